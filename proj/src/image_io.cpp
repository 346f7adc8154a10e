#include "warpnorm/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>

namespace warpnorm {

namespace {

std::uint8_t to_byte(double v) {
    const double c = std::min(std::max(v, 0.0), 1.0);
    return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

void skip_ws_comments(std::istream& in) {
    while (true) {
        int c = in.peek();
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(c)) {
            in.get();
        } else {
            break;
        }
    }
}

} // namespace

void write_ppm(const std::string& path, const Tensor4& img, int batch) {
    if (img.c() != 3)
        throw dim_error("write_ppm: expected a 3-channel image, got " + img.shape_str());
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw config_error("write_ppm: cannot open '" + path + "'");
    out << "P6\n" << img.w() << " " << img.h() << "\n255\n";
    for (int y = 0; y < img.h(); ++y)
        for (int x = 0; x < img.w(); ++x)
            for (int c = 0; c < 3; ++c)
                out.put(static_cast<char>(to_byte(img.at(batch, c, y, x))));
}

void write_pgm(const std::string& path, const Tensor4& img, int batch, int channel) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw config_error("write_pgm: cannot open '" + path + "'");
    out << "P5\n" << img.w() << " " << img.h() << "\n255\n";
    for (int y = 0; y < img.h(); ++y)
        for (int x = 0; x < img.w(); ++x)
            out.put(static_cast<char>(to_byte(img.at(batch, channel, y, x))));
}

Tensor4 read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw config_error("read_ppm: cannot open '" + path + "'");
    std::string magic;
    in >> magic;
    if (magic != "P6")
        throw config_error("read_ppm: '" + path + "' is not a binary PPM (P6)");
    skip_ws_comments(in);
    int w = 0, h = 0, maxval = 0;
    in >> w;
    skip_ws_comments(in);
    in >> h;
    skip_ws_comments(in);
    in >> maxval;
    in.get(); // single whitespace after the header
    if (w < 1 || h < 1 || maxval != 255)
        throw config_error("read_ppm: unsupported header in '" + path + "'");
    Tensor4 img(1, 3, h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                const int v = in.get();
                if (v < 0)
                    throw config_error("read_ppm: truncated file '" + path + "'");
                img.at(0, c, y, x) = v / 255.0;
            }
    return img;
}

Tensor4 read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw config_error("read_pgm: cannot open '" + path + "'");
    std::string magic;
    in >> magic;
    if (magic != "P5")
        throw config_error("read_pgm: '" + path + "' is not a binary PGM (P5)");
    skip_ws_comments(in);
    int w = 0, h = 0, maxval = 0;
    in >> w;
    skip_ws_comments(in);
    in >> h;
    skip_ws_comments(in);
    in >> maxval;
    in.get();
    if (w < 1 || h < 1 || maxval != 255)
        throw config_error("read_pgm: unsupported header in '" + path + "'");
    Tensor4 img(1, 1, h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int v = in.get();
            if (v < 0)
                throw config_error("read_pgm: truncated file '" + path + "'");
            img.at(0, 0, y, x) = v / 255.0;
        }
    return img;
}

Tensor4 flow_to_hsv(const Tensor4& flow, int batch) {
    if (flow.c() != 2)
        throw dim_error("flow_to_hsv: flow must have 2 channels, got " + flow.shape_str());
    const int h = flow.h(), w = flow.w();
    double max_mag = 1e-9;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double dy = flow.at(batch, 0, y, x);
            const double dx = flow.at(batch, 1, y, x);
            max_mag = std::max(max_mag, std::hypot(dy, dx));
        }
    Tensor4 rgb(1, 3, h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double dy = flow.at(batch, 0, y, x);
            const double dx = flow.at(batch, 1, y, x);
            const double ang = std::atan2(dy, dx); // [-pi, pi]
            const double hue = (ang + M_PI) / (2.0 * M_PI) * 6.0;
            const double val = std::hypot(dy, dx) / max_mag;
            const int sector = std::min(static_cast<int>(hue), 5);
            const double f = hue - sector;
            const double p = 0.0, q = val * (1.0 - f), t = val * f;
            double r = 0, g = 0, b = 0;
            switch (sector) {
            case 0: r = val; g = t; b = p; break;
            case 1: r = q; g = val; b = p; break;
            case 2: r = p; g = val; b = t; break;
            case 3: r = p; g = q; b = val; break;
            case 4: r = t; g = p; b = val; break;
            default: r = val; g = p; b = q; break;
            }
            rgb.at(0, 0, y, x) = r;
            rgb.at(0, 1, y, x) = g;
            rgb.at(0, 2, y, x) = b;
        }
    return rgb;
}

Tensor4 to_heatmap(const Tensor4& x, int channel) {
    Tensor4 out(x.b(), 1, x.h(), x.w());
    double lo = x.at(0, channel, 0, 0), hi = lo;
    for (int b = 0; b < x.b(); ++b)
        for (int y = 0; y < x.h(); ++y)
            for (int xx = 0; xx < x.w(); ++xx) {
                const double v = x.at(b, channel, y, xx);
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
    const double span = hi - lo > 1e-12 ? hi - lo : 1.0;
    for (int b = 0; b < x.b(); ++b)
        for (int y = 0; y < x.h(); ++y)
            for (int xx = 0; xx < x.w(); ++xx)
                out.at(b, 0, y, xx) = (x.at(b, channel, y, xx) - lo) / span;
    return out;
}

Tensor4 hstack_panels(const std::vector<Tensor4>& panels) {
    if (panels.empty())
        throw dim_error("hstack_panels: no panels");
    const int h = panels[0].h(), w = panels[0].w();
    for (const Tensor4& p : panels)
        if (p.c() != 3 || p.h() != h || p.w() != w || p.b() != 1)
            throw dim_error("hstack_panels: panel " + p.shape_str() +
                            " does not match " + panels[0].shape_str());
    Tensor4 out(1, 3, h, w * static_cast<int>(panels.size()));
    for (std::size_t i = 0; i < panels.size(); ++i)
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    out.at(0, c, y, static_cast<int>(i) * w + x) = panels[i].at(0, c, y, x);
    return out;
}

Tensor4 gray_to_rgb(const Tensor4& x) {
    Tensor4 out(x.b(), 3, x.h(), x.w());
    for (int b = 0; b < x.b(); ++b)
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < x.h(); ++y)
                for (int xx = 0; xx < x.w(); ++xx)
                    out.at(b, c, y, xx) = x.at(b, 0, y, xx);
    return out;
}

} // namespace warpnorm
