#ifndef AAI_ENCODERS_HPP
#define AAI_ENCODERS_HPP

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "aai/autograd.hpp"
#include "aai/params.hpp"
#include "aai/tensor.hpp"

namespace aai::enc {

enum class Modality { audio, vision, text };

const char* modality_name(Modality m);
Modality parse_modality(const std::string& s);

struct Embedding {
    Tensor vector;  // [d], unit L2 norm
    Modality modality = Modality::audio;
};

struct EncoderParams {
    Modality modality = Modality::audio;
    bool frozen = false;
    ParamSet params;

    int dim() const;
};

// Conv encoders: conv3x3/2 -> SiLU -> conv3x3/2 -> SiLU -> linear -> L2 norm.
EncoderParams init_audio_encoder(int dim, std::uint64_t seed);
EncoderParams init_vision_encoder(int dim, std::uint64_t seed);

// Text encoder: frozen label table [C×d], frozen word table [V×d] for prompt
// words, and a frozen d×d mixing layer. The label table is redrawn until every
// pair of label embeddings has cosine similarity below 0.9.
EncoderParams init_text_encoder(int num_classes, int dim, std::uint64_t seed);

// Differentiable batch forward of a conv encoder; x is [B×C×16×16], result [B×d].
ad::Var conv_encoder_forward(const ParamVars& params, const ad::Var& x);

Embedding encode_audio(const EncoderParams& params, const Tensor& audio);
Embedding encode_vision(const EncoderParams& params, const Tensor& frame);
Embedding encode_text(const EncoderParams& params, int label_id);

// Row-stacked embeddings [B×d] without graph bookkeeping.
Tensor encode_audio_batch(const EncoderParams& params, std::span<const Tensor> audio);
Tensor encode_vision_batch(const EncoderParams& params, std::span<const Tensor> frames);
Tensor encode_text_all(const EncoderParams& params);

double cosine_sim(const Embedding& a, const Embedding& b);
double cosine_sim(std::span<const double> a, std::span<const double> b);

int text_num_labels(const EncoderParams& text);

// Prompt vocabulary. Words index the word table; labels are written
// <label:NAME> or <label:ID>; `*` marks the pseudo-token slot.
const std::vector<std::string>& vocabulary();

struct PromptToken {
    enum class Kind { word, label, star };
    Kind kind = Kind::word;
    int id = 0;  // word index or class id; unused for star

    bool operator==(const PromptToken&) const = default;
};

std::vector<PromptToken> tokenize(const std::string& prompt, std::span<const std::string> label_names);
std::string detokenize(std::span<const PromptToken> tokens, std::span<const std::string> label_names);

// Pre-mixing embedding of a word or label token (star has none).
Tensor token_embedding(const EncoderParams& text, const PromptToken& token);

}  // namespace aai::enc

#endif  // AAI_ENCODERS_HPP
