#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "warpnorm/model.hpp"
#include "warpnorm/normalize.hpp"
#include "warpnorm/synth.hpp"
#include "warpnorm/tensor.hpp"

namespace warpnorm {

struct LossWeights {
    double adv = 2.0;       // lambda1
    double recon = 5.0;     // lambda2
    double style = 0.5;     // lambda3
    double content = 0.0025; // lambda4
};

// Frozen random 2-level conv stack standing in for a pretrained feature
// extractor; bias-free so feature losses are positively homogeneous.
struct FeatureProjector {
    ConvKernel conv0; // 3 -> 8
    ConvKernel conv1; // 8 -> 16
    static FeatureProjector make(std::uint64_t seed = 77);
};

// Patch critic: conv3x3 + avgpool2x pairs, then a score-map head.
struct CriticParams {
    ConvKernel conv0; // 3 -> 16
    ConvKernel conv1; // 16 -> 32
    ConvKernel head;  // 32 -> 1
    static CriticParams init(std::uint64_t seed);
    void for_each_tensor(const std::function<void(const std::string&, Tensor4&)>& fn);
};

double l1_loss(const Tensor4& a, const Tensor4& b);
// Averages |a-b| over the support of mask (broadcast over channels).
// contract_error on empty support.
double masked_l1(const Tensor4& a, const Tensor4& b, const Tensor4& mask);
Tensor4 l1_loss_grad(const Tensor4& a, const Tensor4& b); // d/da

double gram_style_loss(const Tensor4& a, const Tensor4& b, const FeatureProjector& proj);
double content_loss(const Tensor4& a, const Tensor4& b, const FeatureProjector& proj);
// d/da of the two projector losses
Tensor4 gram_style_loss_grad(const Tensor4& a, const Tensor4& b, const FeatureProjector& proj);
Tensor4 content_loss_grad(const Tensor4& a, const Tensor4& b, const FeatureProjector& proj);

enum class AdvSide { Critic, Generator };
Tensor4 critic_forward(const Tensor4& x, const CriticParams& critic);
double adv_loss(const CriticParams& critic, const Tensor4& real, const Tensor4& fake, AdvSide side);
// generator-side d(adv)/d(fake)
Tensor4 adv_loss_grad_fake(const CriticParams& critic, const Tensor4& fake);
// critic-side gradients w.r.t. critic params
void adv_loss_critic_grads(const CriticParams& critic, const Tensor4& real,
                           const Tensor4& fake, ParamGrads& grads);

struct LossTerms {
    double adv = 0.0, recon = 0.0, style = 0.0, content = 0.0;
};
// lambda1*adv + lambda2*recon + lambda3*style + lambda4*content;
// train_error naming the term if one is non-finite.
double total_loss(const LossTerms& terms, const LossWeights& w);

// Bias-corrected adaptive-moment update, beta1=0.5, beta2=0.999, eps=1e-8.
struct OptimState {
    double lr = 1e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
    long step = 0;
    std::map<std::string, Tensor4> m, v;
};
// Updates every named tensor that has a gradient in `grads`.
void adam_step(const std::function<void(const std::function<void(const std::string&, Tensor4&)>&)>& params,
               ParamGrads& grads, OptimState& state);

enum class StyleMode { Encoder, Free };
enum class MotionFamily { Identity, Translate, Rotate, Affine, Mixed };

MotionFamily motion_family_from_name(const std::string& name);
const char* motion_family_name(MotionFamily f);

struct TrainConfig {
    std::uint64_t seed = 0;
    int steps = 300;
    int batch = 4;
    int h = 64, w = 64;
    NormVariant variant = NormVariant::SAWN;
    StyleMode mode = StyleMode::Encoder;
    bool adversarial = false;
    double lr = 1e-4;
    LossWeights weights;
    MotionFamily motion = MotionFamily::Mixed;
    double max_shift = 6.0;        // translate family magnitude, px
    double max_rot_deg = 20.0;     // rotate family magnitude
    int heldout = 6;               // held-out scene count
    bool freeze_encoders = false;  // stpr: update decoder-side params only
    // free mode: the single fit scene and its two flows
    std::uint64_t fit_scene_seed = 0;
    Motion fit_motion = Motion::translate(5.0, 3.0);   // F1
    Motion eval_motion = Motion::rotate(15.0 * 3.14159265358979323846 / 180.0); // F2
    double divergence_limit = 1e3;
};

struct StepMetrics {
    int step = 0;
    double adv = 0.0, recon = 0.0, style = 0.0, content = 0.0, total = 0.0;
};

struct TrainResult {
    std::vector<StepMetrics> trace;
    double heldout_l1_initial = 0.0;
    double heldout_l1_final = 0.0;
    ModelParams params;           // encoder mode
    FreeStyleParams free_params;  // free mode
    StyleMode mode = StyleMode::Encoder;
};

// Deterministic per (seed, cfg); scenes are drawn from the config's motion
// family with per-step derived seeds. Aborts (train_error) on divergence.
TrainResult train_pose_transfer(const TrainConfig& cfg);

// Held-out pose-transfer reconstruction L1 for given params.
double eval_heldout(const ModelParams& params, const TrainConfig& cfg);
// Free-mode evaluation on the fit scene; an override swaps in an unseen flow.
double eval_free_under(const TrainResult& r, const TrainConfig& cfg,
                       const std::optional<Motion>& motion_override = std::nullopt);

struct StprMetrics {
    double target_l1 = 0.0;    // replaced-region texture error vs the warped reference
    double nontarget_l1 = 0.0; // masked error vs the source outside the region
};

struct StprResult {
    std::vector<StepMetrics> trace;
    StprMetrics before, after;
    ModelParams params;
};

// 100-step self-training part replacement finetune with random part
// replacement per step and the part mask routed into the masked blocks.
StprResult finetune_stpr(const ModelParams& pretrained, const TrainConfig& cfg, int steps = 100);

// Evaluate the stpr task (fixed replacement part) on held-out scenes.
StprMetrics eval_stpr(const ModelParams& params, const TrainConfig& cfg, int part);

struct AblateRow {
    std::string mode;      // "encoder" | "free"
    std::string variant;   // SAN | SAWS | SAWN
    double initial_l1 = 0.0;
    double final_train_l1 = 0.0;
    double eval_l1 = 0.0;
    std::string eval_kind; // "heldout" | "unseen_flow"
};

struct AblateResult {
    std::vector<AblateRow> rows;
    // encoder-mode trained params per variant, for image grids
    std::vector<std::pair<std::string, ModelParams>> trained;
    double seconds = 0.0;
};

// Trains SAN/SAWS/SAWN in encoder mode (held-out eval) and free mode
// (fit under F1, eval under unseen F2) on identical seeds and budgets.
AblateResult ablate(const TrainConfig& cfg);

std::string ablate_csv(const AblateResult& r);
std::string trace_csv(const std::vector<StepMetrics>& trace);

} // namespace warpnorm
