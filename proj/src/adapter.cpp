#include "aai/adapter.hpp"

#include <algorithm>
#include <numeric>

#include "aai/error.hpp"
#include "aai/evalsuite.hpp"

namespace aai::adapt {

Tensor PseudoToken::combined() const {
    require(f_a.shape() == f_adapter.shape(), "pseudo-token parts differ in shape");
    Tensor out = f_a;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += f_adapter[i];
    }
    return out;
}

ImageLibrary build_library(std::vector<Tensor> images, const enc::EncoderParams& vision, std::vector<int> clip_ids,
                           std::vector<int> labels) {
    require(!images.empty(), "image library is empty");
    require(clip_ids.empty() || clip_ids.size() == images.size(), "clip ids must cover the library");
    require(labels.empty() || labels.size() == images.size(), "labels must cover the library");
    ImageLibrary lib;
    lib.embeddings = enc::encode_vision_batch(vision, images);
    lib.images = std::move(images);
    lib.clip_ids = std::move(clip_ids);
    lib.labels = std::move(labels);
    return lib;
}

ImageLibrary build_library(const synth::Dataset& dataset, const enc::EncoderParams& vision, synth::Split split) {
    std::vector<Tensor> images;
    std::vector<int> clips, labels;
    for (const auto* s : dataset.split(split)) {
        for (const auto& f : s->frames) {
            images.push_back(f);
            clips.push_back(s->clip_id);
            labels.push_back(s->label_id);
        }
    }
    return build_library(std::move(images), vision, std::move(clips), std::move(labels));
}

std::vector<int> retrieve_indices(const Tensor& f_a, const ImageLibrary& library, int k, RetrievalBounds bounds) {
    require(library.size() > 0, "image library is empty");
    require(k >= bounds.min_k && k <= bounds.max_k, "k=" + std::to_string(k) + " outside the allowed range [" +
                                                        std::to_string(bounds.min_k) + "," +
                                                        std::to_string(bounds.max_k) + "]");
    require(k <= static_cast<int>(library.size()), "k=" + std::to_string(k) + " exceeds library size " +
                                                       std::to_string(library.size()));
    require(f_a.size() == static_cast<std::size_t>(library.embeddings.dim(1)),
            "audio embedding dimension does not match the library");
    std::vector<int> ranked = eval::rank_gallery(f_a.values(), library.embeddings);
    ranked.resize(k);
    return ranked;
}

std::vector<Tensor> retrieve_references(const Tensor& f_a, const ImageLibrary& library, int k,
                                        RetrievalBounds bounds) {
    std::vector<Tensor> out;
    for (int i : retrieve_indices(f_a, library, k, bounds)) {
        out.push_back(library.images[i]);
    }
    return out;
}

void AdaptConfig::validate() const {
    require(k >= 1, "k must be >= 1");
    require(steps >= 0, "adapter steps must be >= 0");
    require(lr > 0.0, "adapter lr must be > 0");
    require(init_scale >= 0.0, "adapter init scale must be >= 0");
}

Tensor initial_adapter(int dim, const AdaptConfig& config) {
    Rng rng(config.seed);
    return rng.normal_tensor({dim}, config.init_scale);
}

diff::ConditioningSequence adaptation_conditioning(const diff::DiffusionModel& model, const std::string& prompt,
                                                   const Tensor& slot, bool append_token) {
    const auto toks = enc::tokenize(prompt, model.label_names);
    require(std::count_if(toks.begin(), toks.end(),
                          [](const enc::PromptToken& t) { return t.kind == enc::PromptToken::Kind::star; }) == 1,
            "adaptation prompt needs exactly one * slot");
    return diff::encode_prompt(model, toks, &slot, append_token);
}

PseudoToken adapt_audio(const Tensor& f_a, std::span<const Tensor> references, const diff::DiffusionModel& model,
                        const AdaptConfig& config, int clip_id) {
    config.validate();
    require(!references.empty(), "adaptation needs at least one reference image");
    const int d = model.text.dim();
    require(f_a.ndim() == 1 && f_a.dim(0) == d, "audio embedding must be [d] with d = " + std::to_string(d));
    require(f_a.all_finite(), "audio embedding has non-finite entries");

    PseudoToken tok;
    tok.f_a = f_a;
    tok.f_adapter = initial_adapter(d, config);
    tok.clip_id = clip_id;
    tok.steps = config.steps;
    tok.template_prompt = config.template_prompt;
    tok.append_token = config.append_token;

    const Tensor z0 = stack(references);
    const int batch = z0.dim(0);
    ParamSet free;
    free.add("f_adapter", tok.f_adapter);
    Adam opt(free, {config.lr, 0.9, 0.999, 1e-8, 0.0});
    Rng rng(config.seed ^ 0xADA9707ULL);
    for (int step = 0; step < config.steps; ++step) {
        const auto cond = adaptation_conditioning(model, config.template_prompt, tok.combined(), config.append_token);
        const int len = cond.length();
        const int slot = *cond.slot_index;
        Tensor rows(Shape{batch, len, d});
        for (int b = 0; b < batch; ++b) {
            std::copy(cond.tokens.values().begin(), cond.tokens.values().end(),
                      rows.data() + static_cast<std::size_t>(b) * len * d);
        }
        // The whole sequence is a leaf so the slot rows collect dL/dA*; since
        // A* = f_a + f_adapter that is also dL/df_adapter.
        const ad::Var tokens = ad::parameter(std::move(rows));
        const ad::Var loss = diff::ldm_loss(model, z0, tokens, rng);
        ad::backward(loss);
        const Tensor g = tokens.grad();
        Tensor grad(Shape{d}, 0.0);
        for (int b = 0; b < batch; ++b) {
            const double* src = g.data() + (static_cast<std::size_t>(b) * len + slot) * d;
            for (int i = 0; i < d; ++i) {
                grad[i] += src[i];
            }
        }
        opt.step(tok.f_adapter, grad);
        tok.loss_history.push_back(loss.value().item());
    }
    const std::size_t n = tok.loss_history.size();
    const std::size_t w = std::min<std::size_t>(20, n);
    if (w > 0) {
        tok.final_loss = std::accumulate(tok.loss_history.end() - static_cast<long>(w), tok.loss_history.end(), 0.0) /
                         static_cast<double>(w);
    }
    return tok;
}

PseudoToken cross_adapt_check(const PseudoToken& token, const Tensor& other_f_a, int other_clip_id) {
    require(other_f_a.shape() == token.f_a.shape(), "audio embedding dimension mismatch: " +
                                                        shape_str(other_f_a.shape()) + " vs " +
                                                        shape_str(token.f_a.shape()));
    PseudoToken out = token;
    out.f_a = other_f_a;
    out.clip_id = other_clip_id;
    return out;
}

}  // namespace aai::adapt
