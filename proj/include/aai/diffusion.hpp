#ifndef AAI_DIFFUSION_HPP
#define AAI_DIFFUSION_HPP

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "aai/autograd.hpp"
#include "aai/encoders.hpp"
#include "aai/params.hpp"
#include "aai/synthdata.hpp"

namespace aai::diff {

struct NoiseSchedule {
    int T = 0;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;

    static NoiseSchedule linear(int T, double beta_start, double beta_end);
};

// Pre-mixing token embeddings [L×d]; slot_index marks the pseudo-token.
struct ConditioningSequence {
    Tensor tokens;
    std::optional<int> slot_index;

    int length() const { return tokens.dim(0); }
};

// Cross-attention probabilities at one sampling step: [P×L], rows sum to 1.
struct AttentionRecord {
    int step = 0;
    Tensor maps;
};

// Called with the attention probabilities of one sample before they mix the
// values; may rewrite them in place. `t` is the diffusion timestep.
using AttentionHook = std::function<void(int t, Tensor& maps)>;

struct DenoiserShape {
    int token_dim = 32;
    int ch1 = 16;
    int ch2 = 32;
    int attn_dim = 32;
    int time_dim = 32;
};

ParamSet init_denoiser(const DenoiserShape& shape, std::uint64_t seed);

// Frozen generative backbone: schedule, denoiser, and the conditioning
// encoder c(.) (token tables plus mixing layer from the text encoder).
struct DiffusionModel {
    NoiseSchedule schedule;
    DenoiserShape shape;
    ParamSet denoiser;
    enc::EncoderParams text;
    std::vector<std::string> label_names;
};

// z_t = sqrt(ab[t]) z0 + sqrt(1-ab[t]) eps
Tensor forward_diffuse(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& schedule);

// Noise prediction for a batch z [B×3×16×16], timesteps t[B], pre-mixing
// tokens [B×L×d]. The hook (if any) sees each sample's attention map.
ad::Var denoiser_forward(const ParamVars& params, const Tensor& mix, const ad::Var& z, std::span<const int> t,
                         const ad::Var& tokens, const AttentionHook* hook = nullptr);

// Any eps-predictor with the denoiser's calling convention.
using EpsPredictor = std::function<ad::Var(const ad::Var& z_t, std::span<const int> t, const ad::Var& tokens)>;

// Squared-error denoising objective averaged over batch and pixels: draws
// t ~ U[0,T) and eps ~ N(0,I) per sample.
ad::Var ldm_loss(const EpsPredictor& predictor, const NoiseSchedule& schedule, const Tensor& z0,
                 const ad::Var& tokens, Rng& rng);

// Loss of the model's frozen denoiser; gradients reach `tokens` only.
ad::Var ldm_loss(const DiffusionModel& model, const Tensor& z0, const ad::Var& tokens, Rng& rng);

ad::Var stack_tokens(std::span<const ConditioningSequence> conds);

struct DiffusionConfig {
    int T = 100;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    int steps = 1500;
    int batch_size = 16;
    double lr = 2e-3;
    std::uint64_t seed = 7;

    void validate() const;
};

// Generation templates the denoiser is trained on; the label fills the slot.
const std::vector<std::string>& training_templates();

// Token embeddings for a parsed prompt. A `*` takes `slot_value`; with
// append_token the `*` position holds the placeholder word and the value is
// appended after the last token instead.
ConditioningSequence encode_prompt(const DiffusionModel& model, std::span<const enc::PromptToken> tokens,
                                   const Tensor* slot_value = nullptr, bool append_token = false);

// Conditioning for a template with `{}` replaced by a label token.
ConditioningSequence label_conditioning(const DiffusionModel& model, const std::string& tmpl, int label_id);

struct TrainedDiffusion {
    DiffusionModel model;
    std::vector<double> loss_history;
};

TrainedDiffusion train_diffusion(const synth::Dataset& dataset, const enc::EncoderParams& text,
                                 const DiffusionConfig& config);

struct SampleResult {
    Tensor image;                           // [3×16×16] in [-1,1]
    std::vector<AttentionRecord> records;   // one per step when captured
};

// Ancestral sampling with x0 clipping; all randomness comes from `seed`, so
// two samplers with the same seed see the same noise at every step.
class Sampler {
public:
    Sampler(const DiffusionModel& model, ConditioningSequence cond, std::uint64_t seed);

    bool done() const { return t_ < 0; }
    int timestep() const { return t_; }
    // Advances one timestep and returns the attention probabilities used.
    Tensor step(const AttentionHook* hook = nullptr);
    const Tensor& current() const { return z_; }
    Tensor image() const;

private:
    const DiffusionModel* model_;
    ConditioningSequence cond_;
    Rng rng_;
    Tensor z_;
    int t_;
    ParamVars vars_;
};

SampleResult sample(const DiffusionModel& model, const ConditioningSequence& cond, std::uint64_t seed, bool capture,
                    const AttentionHook* hook = nullptr);

}  // namespace aai::diff

#endif  // AAI_DIFFUSION_HPP
