#ifndef AAI_ADAPTER_HPP
#define AAI_ADAPTER_HPP

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "aai/diffusion.hpp"
#include "aai/encoders.hpp"
#include "aai/synthdata.hpp"

namespace aai::adapt {

// A* = f_a + f_adapter, the audio clip's pseudo-word.
struct PseudoToken {
    Tensor f_a;        // [d], frozen audio embedding
    Tensor f_adapter;  // [d], learned offset
    int clip_id = -1;
    int steps = 0;
    double final_loss = 0.0;  // mean of the last (up to) 20 step losses
    std::vector<double> loss_history;
    std::string template_prompt = "a photo of *";
    bool append_token = false;

    Tensor combined() const;
};

// Candidate reference images with precomputed vision embeddings.
struct ImageLibrary {
    std::vector<Tensor> images;  // each [3×16×16]
    Tensor embeddings;           // [N×d]
    std::vector<int> clip_ids;
    std::vector<int> labels;

    std::size_t size() const { return images.size(); }
};

ImageLibrary build_library(std::vector<Tensor> images, const enc::EncoderParams& vision,
                           std::vector<int> clip_ids = {}, std::vector<int> labels = {});

// Every frame of every clip in one split.
ImageLibrary build_library(const synth::Dataset& dataset, const enc::EncoderParams& vision,
                           synth::Split split = synth::Split::train);

struct RetrievalBounds {
    int min_k = 3;
    int max_k = 5;
};

// Library indices of the top-k images by cosine similarity to f_a; ties go to
// the lower index.
std::vector<int> retrieve_indices(const Tensor& f_a, const ImageLibrary& library, int k,
                                  RetrievalBounds bounds = {});
std::vector<Tensor> retrieve_references(const Tensor& f_a, const ImageLibrary& library, int k = 4,
                                        RetrievalBounds bounds = {});

struct AdaptConfig {
    int k = 4;
    int steps = 400;
    double lr = 5e-3;
    double init_scale = 0.01;
    std::uint64_t seed = 7;
    std::string template_prompt = "a photo of *";
    bool append_token = false;

    void validate() const;
};

// Seeded init of f_adapter, identical to what adapt_audio starts from.
Tensor initial_adapter(int dim, const AdaptConfig& config);

// The conditioning sequence of the adaptation prompt with `slot` in the * slot.
diff::ConditioningSequence adaptation_conditioning(const diff::DiffusionModel& model, const std::string& prompt,
                                                   const Tensor& slot, bool append_token);

// Optimizes f_adapter only, for config.steps steps of the denoising loss over
// all references (fresh t and eps per reference per step).
PseudoToken adapt_audio(const Tensor& f_a, std::span<const Tensor> references, const diff::DiffusionModel& model,
                        const AdaptConfig& config, int clip_id = -1);

// Same adapter, different audio embedding; no optimization.
PseudoToken cross_adapt_check(const PseudoToken& token, const Tensor& other_f_a, int other_clip_id = -1);

}  // namespace aai::adapt

#endif  // AAI_ADAPTER_HPP
