#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <random>

#include "warpnorm/checkpoint.hpp"
#include "warpnorm/config.hpp"
#include "warpnorm/image_io.hpp"
#include "warpnorm/synth.hpp"

using namespace warpnorm;

namespace {

std::string temp_dir() {
    auto dir = std::filesystem::temp_directory_path() / "warpnorm_io_test";
    std::filesystem::create_directories(dir);
    return dir.string();
}

} // namespace

TEST_CASE("ppm round trip is exact at 8-bit resolution") {
    Tensor4 img(1, 3, 5, 7);
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> d(0.0, 1.0);
    for (std::size_t i = 0; i < img.size(); ++i)
        img[i] = std::round(d(rng) * 255.0) / 255.0; // representable exactly
    const std::string path = temp_dir() + "/rt.ppm";
    write_ppm(path, img);
    Tensor4 back = read_ppm(path);
    CHECK(back.same_shape(img));
    CHECK(max_abs_diff(back, img) < 1e-12);
}

TEST_CASE("pgm encodes [0,1] into the full byte range") {
    Tensor4 m(1, 1, 2, 2);
    m.at(0, 0, 0, 0) = 0.0;
    m.at(0, 0, 0, 1) = 1.0;
    m.at(0, 0, 1, 0) = 0.5;
    m.at(0, 0, 1, 1) = 2.0; // clamped
    const std::string path = temp_dir() + "/m.pgm";
    write_pgm(path, m);
    Tensor4 back = read_pgm(path);
    CHECK(back.at(0, 0, 0, 0) == 0.0);
    CHECK(back.at(0, 0, 0, 1) == 1.0);
    CHECK(back.at(0, 0, 1, 0) == doctest::Approx(128.0 / 255.0));
    CHECK(back.at(0, 0, 1, 1) == 1.0);
}

TEST_CASE("hstack and flow visualization shapes") {
    Tensor4 a(1, 3, 4, 4, 0.2), b(1, 3, 4, 4, 0.8);
    Tensor4 strip = hstack_panels({a, b, a});
    CHECK(strip.w() == 12);
    CHECK(strip.h() == 4);

    Tensor4 flow = gen_flow(Motion::rotate(0.3), 8, 8);
    Tensor4 hsv = flow_to_hsv(flow);
    CHECK(hsv.c() == 3);
    for (std::size_t i = 0; i < hsv.size(); ++i) {
        CHECK(hsv[i] >= 0.0);
        CHECK(hsv[i] <= 1.0);
    }
}

TEST_CASE("checkpoint round trip is bit exact") {
    std::mt19937_64 rng(9);
    std::normal_distribution<double> d(0.0, 1.0);
    Tensor4 w(4, 3, 3, 3), b(1, 4, 1, 1);
    for (std::size_t i = 0; i < w.size(); ++i)
        w[i] = d(rng);
    for (std::size_t i = 0; i < b.size(); ++i)
        b[i] = d(rng);
    const std::string path = temp_dir() + "/params.ckpt";
    save_tensors(path, {{"conv.w", &w}, {"conv.b", &b}});
    auto loaded = load_tensors(path);
    REQUIRE(loaded.size() == 2);
    CHECK(loaded[0].first == "conv.w");
    CHECK(max_abs_diff(loaded[0].second, w) == 0.0);
    CHECK(loaded[1].first == "conv.b");
    CHECK(max_abs_diff(loaded[1].second, b) == 0.0);

    CHECK_THROWS_AS(load_tensors(temp_dir() + "/nosuch.ckpt"), config_error);
}

TEST_CASE("key=value config parsing") {
    KeyValueConfig cfg = KeyValueConfig::from_string(
        "# comment\n"
        "steps = 300\n"
        "lr=0.0001\n"
        "variant=SAWN\n"
        "adversarial=off\n"
        "\n");
    CHECK(cfg.get_long("steps", 0) == 300);
    CHECK(cfg.get_double("lr", 0.0) == doctest::Approx(1e-4));
    CHECK(cfg.get_str("variant", "") == "SAWN");
    CHECK(cfg.get_bool("adversarial", true) == false);
    CHECK(cfg.get_long("missing", 17) == 17);
    CHECK_THROWS_AS(KeyValueConfig::from_string("novalue\n"), config_error);
    CHECK_THROWS_AS(cfg.get_long("variant", 0), config_error);
    CHECK_THROWS_AS(KeyValueConfig::from_file("/nonexistent/really.cfg"), config_error);
}

TEST_CASE("scene export writes the bundle and manifest") {
    SceneSpec spec;
    spec.motion = Motion::translate(2.0, 1.0);
    SynthScene s = gen_scene(5, spec);
    const std::string dir = temp_dir() + "/scene5";
    export_scene(s, dir);
    for (const char* name : {"x_s.ppm", "x_t.ppm", "flow_hsv.ppm"})
        CHECK(std::filesystem::exists(dir + "/" + name));
    for (const char* name : {"p_s.pgm", "p_t.pgm", "occ.pgm", "mask_top.pgm"})
        CHECK(std::filesystem::exists(dir + "/" + name));
    KeyValueConfig man = KeyValueConfig::from_file(dir + "/manifest.txt");
    CHECK(man.get_long("seed", -1) == 5);
    CHECK(man.get_str("motion", "") == "translate:2,1");
    CHECK(man.get_str("texture_top", "") == "checker");
}
