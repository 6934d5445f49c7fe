#include "aai/encoders.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>

#include "aai/error.hpp"
#include "aai/synthdata.hpp"
#include "eigen_map.hpp"

namespace aai::enc {

namespace {

constexpr int kConv1 = 8;
constexpr int kConv2 = 16;
constexpr double kMaxLabelCosine = 0.9;

void add_conv_layers(ParamSet& ps, int in_ch, int dim, Rng& rng) {
    ps.add("conv1.w", rng.normal_tensor({kConv1, in_ch, 3, 3}, std::sqrt(2.0 / (in_ch * 9))));
    ps.add("conv1.b", Tensor(Shape{kConv1}, 0.0));
    ps.add("conv2.w", rng.normal_tensor({kConv2, kConv1, 3, 3}, std::sqrt(2.0 / (kConv1 * 9))));
    ps.add("conv2.b", Tensor(Shape{kConv2}, 0.0));
    const int flat = kConv2 * 4 * 4;
    ps.add("proj.w", rng.normal_tensor({dim, flat}, std::sqrt(1.0 / flat)));
    ps.add("proj.b", Tensor(Shape{dim}, 0.0));
}

Tensor mix_row(const EncoderParams& text, const Tensor& row) {
    const Tensor& mix = text.params.get("mix.w");
    const int d = mix.dim(0);
    Tensor out(Shape{d});
    detail::MatMap(out.data(), 1, d).noalias() =
        detail::mat(row.data(), 1, d) * detail::mat(mix).transpose();
    return out;
}

void normalize_in_place(Tensor& v) {
    double s = 0.0;
    for (double x : v.values()) {
        s += x * x;
    }
    s = std::sqrt(s);
    require(s > 0.0, "cannot normalize a zero vector");
    for (auto& x : v.values()) {
        x /= s;
    }
}

void require_modality(const EncoderParams& p, Modality m) {
    require(p.modality == m, std::string("expected ") + modality_name(m) + " encoder parameters, got " +
                                 modality_name(p.modality));
}

}  // namespace

const char* modality_name(Modality m) {
    switch (m) {
    case Modality::audio:
        return "audio";
    case Modality::vision:
        return "vision";
    case Modality::text:
        return "text";
    }
    return "?";
}

Modality parse_modality(const std::string& s) {
    if (s == "audio") return Modality::audio;
    if (s == "vision") return Modality::vision;
    if (s == "text") return Modality::text;
    throw FormatError("unknown modality '" + s + "'");
}

int EncoderParams::dim() const {
    if (modality == Modality::text) {
        return params.get("mix.w").dim(0);
    }
    return params.get("proj.w").dim(0);
}

EncoderParams init_audio_encoder(int dim, std::uint64_t seed) {
    require(dim >= 2, "embedding dimension must be >= 2");
    Rng rng(seed);
    EncoderParams p{Modality::audio, false, {}};
    add_conv_layers(p.params, 1, dim, rng);
    return p;
}

EncoderParams init_vision_encoder(int dim, std::uint64_t seed) {
    require(dim >= 2, "embedding dimension must be >= 2");
    Rng rng(seed);
    EncoderParams p{Modality::vision, true, {}};
    add_conv_layers(p.params, synth::kChannels, dim, rng);
    return p;
}

EncoderParams init_text_encoder(int num_classes, int dim, std::uint64_t seed) {
    require(num_classes >= 1 && dim >= 2, "text encoder needs >= 1 label and dim >= 2");
    Rng rng(seed);
    EncoderParams p{Modality::text, true, {}};
    p.params.add("mix.w", rng.normal_tensor({dim, dim}, std::sqrt(1.0 / dim)));
    p.params.add("words", rng.normal_tensor({static_cast<int>(vocabulary().size()), dim}));
    Tensor& labels = p.params.add("labels", Tensor(Shape{num_classes, dim}));
    for (int attempt = 0;; ++attempt) {
        require(attempt < 1000, "could not draw distinguishable label embeddings");
        labels = rng.normal_tensor({num_classes, dim});
        const Tensor all = encode_text_all(p);
        bool ok = true;
        for (int i = 0; i < num_classes && ok; ++i) {
            for (int j = i + 1; j < num_classes && ok; ++j) {
                ok = cosine_sim(std::span<const double>(all.data() + i * dim, dim),
                                std::span<const double>(all.data() + j * dim, dim)) < kMaxLabelCosine;
            }
        }
        if (ok) {
            break;
        }
    }
    return p;
}

ad::Var conv_encoder_forward(const ParamVars& params, const ad::Var& x) {
    using namespace ad;
    require(x.value().ndim() == 4 && x.shape()[2] == synth::kSize && x.shape()[3] == synth::kSize,
            "encoder input must be [Bx Cx16x16], got " + shape_str(x.shape()));
    Var h = silu(conv2d(x, params["conv1.w"], params["conv1.b"], 2, 1));
    h = silu(conv2d(h, params["conv2.w"], params["conv2.b"], 2, 1));
    const int batch = x.shape()[0];
    h = reshape(h, {batch, static_cast<int>(h.value().size()) / batch});
    return l2_normalize_rows(linear(h, params["proj.w"], params["proj.b"]));
}

namespace {

Tensor conv_batch(const EncoderParams& params, std::span<const Tensor> inputs, const Shape& item_shape) {
    require(!inputs.empty(), "empty encoder batch");
    for (const auto& t : inputs) {
        require(t.shape() == item_shape, "encoder input shape " + shape_str(t.shape()) + ", expected " +
                                             shape_str(item_shape));
    }
    ParamVars pv(params.params, false);
    return conv_encoder_forward(pv, ad::constant(stack(inputs))).value();
}

Embedding row_embedding(const Tensor& rows, Modality m) {
    return {rows.reshaped({static_cast<int>(rows.size())}), m};
}

}  // namespace

Tensor encode_audio_batch(const EncoderParams& params, std::span<const Tensor> audio) {
    require_modality(params, Modality::audio);
    return conv_batch(params, audio, {1, synth::kSize, synth::kSize});
}

Tensor encode_vision_batch(const EncoderParams& params, std::span<const Tensor> frames) {
    require_modality(params, Modality::vision);
    return conv_batch(params, frames, {synth::kChannels, synth::kSize, synth::kSize});
}

Embedding encode_audio(const EncoderParams& params, const Tensor& audio) {
    return row_embedding(encode_audio_batch(params, std::span<const Tensor>(&audio, 1)), Modality::audio);
}

Embedding encode_vision(const EncoderParams& params, const Tensor& frame) {
    return row_embedding(encode_vision_batch(params, std::span<const Tensor>(&frame, 1)), Modality::vision);
}

int text_num_labels(const EncoderParams& text) {
    require_modality(text, Modality::text);
    return text.params.get("labels").dim(0);
}

Embedding encode_text(const EncoderParams& params, int label_id) {
    require_modality(params, Modality::text);
    const Tensor& labels = params.params.get("labels");
    require(label_id >= 0 && label_id < labels.dim(0), "unknown label id " + std::to_string(label_id));
    Tensor v = mix_row(params, labels.slice0(label_id));
    normalize_in_place(v);
    return {std::move(v), Modality::text};
}

Tensor encode_text_all(const EncoderParams& params) {
    const int n = text_num_labels(params);
    const int d = params.dim();
    Tensor out(Shape{n, d});
    for (int c = 0; c < n; ++c) {
        const Embedding e = encode_text(params, c);
        std::copy(e.vector.values().begin(), e.vector.values().end(), &out.at(c, 0));
    }
    return out;
}

double cosine_sim(std::span<const double> a, std::span<const double> b) {
    require(a.size() == b.size() && !a.empty(), "cosine_sim: dimension mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    require(na > 0.0 && nb > 0.0, "cosine_sim: zero vector");
    return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

double cosine_sim(const Embedding& a, const Embedding& b) { return cosine_sim(a.vector.values(), b.vector.values()); }

const std::vector<std::string>& vocabulary() {
    static const std::vector<std::string> words = {
        "a",    "an",    "the",  "photo", "painting", "sight", "of",  "in",     "style",
        "with", "under", "along", "beach", "city",    "forest", "sky", "and",   "*"};
    return words;
}

std::vector<PromptToken> tokenize(const std::string& prompt, std::span<const std::string> label_names) {
    std::vector<PromptToken> out;
    std::istringstream is(prompt);
    std::string word;
    const auto& vocab = vocabulary();
    while (is >> word) {
        if (word == "*") {
            out.push_back({PromptToken::Kind::star, 0});
            continue;
        }
        if (word.rfind("<label:", 0) == 0 && word.back() == '>') {
            const std::string name = word.substr(7, word.size() - 8);
            int id = -1;
            for (std::size_t i = 0; i < label_names.size(); ++i) {
                if (label_names[i] == name) {
                    id = static_cast<int>(i);
                }
            }
            if (id < 0 && !name.empty() && name.find_first_not_of("0123456789") == std::string::npos) {
                id = std::stoi(name);
            }
            require(id >= 0 && id < static_cast<int>(label_names.size()), "unknown label in prompt: " + word);
            out.push_back({PromptToken::Kind::label, id});
            continue;
        }
        std::string lower;
        for (char c : word) {
            lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        }
        int id = -1;
        for (std::size_t i = 0; i + 1 < vocab.size(); ++i) {
            if (vocab[i] == lower) {
                id = static_cast<int>(i);
            }
        }
        require(id >= 0, "word '" + word + "' is not in the prompt vocabulary");
        out.push_back({PromptToken::Kind::word, id});
    }
    require(!out.empty(), "empty prompt");
    return out;
}

std::string detokenize(std::span<const PromptToken> tokens, std::span<const std::string> label_names) {
    std::string out;
    for (const auto& t : tokens) {
        if (!out.empty()) {
            out += ' ';
        }
        switch (t.kind) {
        case PromptToken::Kind::word:
            out += vocabulary().at(t.id);
            break;
        case PromptToken::Kind::label:
            out += "<label:" + label_names[t.id] + ">";
            break;
        case PromptToken::Kind::star:
            out += "*";
            break;
        }
    }
    return out;
}

Tensor token_embedding(const EncoderParams& text, const PromptToken& token) {
    require_modality(text, Modality::text);
    switch (token.kind) {
    case PromptToken::Kind::word:
        return text.params.get("words").slice0(token.id);
    case PromptToken::Kind::label: {
        const Tensor& labels = text.params.get("labels");
        require(token.id >= 0 && token.id < labels.dim(0), "unknown label id " + std::to_string(token.id));
        return labels.slice0(token.id);
    }
    case PromptToken::Kind::star:
        break;
    }
    throw ArgumentError("the * slot has no table embedding; it needs a pseudo-token");
}

}  // namespace aai::enc
