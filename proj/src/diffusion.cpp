#include "aai/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "aai/error.hpp"
#include "eigen_map.hpp"

namespace aai::diff {

using detail::mat;

NoiseSchedule NoiseSchedule::linear(int T, double beta_start, double beta_end) {
    require(T >= 1, "T must be >= 1");
    require(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end, "betas must satisfy 0 < start <= end < 1");
    NoiseSchedule s;
    s.T = T;
    double ab = 1.0;
    for (int i = 0; i < T; ++i) {
        const double beta = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / (T - 1);
        s.betas.push_back(beta);
        s.alphas.push_back(1.0 - beta);
        ab *= 1.0 - beta;
        s.alpha_bars.push_back(ab);
    }
    return s;
}

Tensor forward_diffuse(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& schedule) {
    require(t >= 0 && t < schedule.T, "timestep " + std::to_string(t) + " outside [0," + std::to_string(schedule.T) +
                                          ")");
    require(eps.shape() == z0.shape(), "eps must have the shape of z0");
    const double a = std::sqrt(schedule.alpha_bars[t]);
    const double b = std::sqrt(1.0 - schedule.alpha_bars[t]);
    Tensor out(z0.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a * z0[i] + b * eps[i];
    }
    return out;
}

ParamSet init_denoiser(const DenoiserShape& s, std::uint64_t seed) {
    require(s.token_dim >= 1 && s.ch1 >= 1 && s.ch2 >= 1 && s.attn_dim >= 1 && s.time_dim >= 2 && s.time_dim % 2 == 0,
            "invalid denoiser shape");
    Rng rng(seed);
    ParamSet p;
    const int th = 2 * s.time_dim;
    auto conv = [&](const std::string& name, int out, int in, double gain) {
        p.add(name + ".w", rng.normal_tensor({out, in, 3, 3}, gain * std::sqrt(2.0 / (in * 9))));
        p.add(name + ".b", Tensor(Shape{out}, 0.0));
    };
    auto dense = [&](const std::string& name, int out, int in) {
        p.add(name + ".w", rng.normal_tensor({out, in}, std::sqrt(1.0 / in)));
        p.add(name + ".b", Tensor(Shape{out}, 0.0));
    };
    dense("time", th, s.time_dim);
    conv("in", s.ch1, synth::kChannels, 1.0);
    dense("tb_in", s.ch1, th);
    conv("down", s.ch2, s.ch1, 1.0);
    dense("tb_down", s.ch2, th);
    p.add("attn.q", rng.normal_tensor({s.attn_dim, s.ch2}, std::sqrt(1.0 / s.ch2)));
    p.add("attn.k", rng.normal_tensor({s.attn_dim, s.token_dim}, std::sqrt(1.0 / s.token_dim)));
    p.add("attn.v", rng.normal_tensor({s.attn_dim, s.token_dim}, std::sqrt(1.0 / s.token_dim)));
    p.add("attn.o", rng.normal_tensor({s.ch2, s.attn_dim}, std::sqrt(1.0 / s.attn_dim)));
    conv("mid", s.ch2, s.ch2, 1.0);
    dense("tb_mid", s.ch2, th);
    conv("up", s.ch1, s.ch1 + s.ch2, 1.0);
    dense("tb_up", s.ch1, th);
    conv("out", synth::kChannels, s.ch1, 0.1);
    return p;
}

namespace {

Tensor timestep_features(std::span<const int> t, int dim) {
    const int half = dim / 2;
    Tensor out(Shape{static_cast<int>(t.size()), dim});
    for (std::size_t b = 0; b < t.size(); ++b) {
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(1000.0) * i / half);
            out.at(static_cast<int>(b), i) = std::sin(t[b] * freq);
            out.at(static_cast<int>(b), half + i) = std::cos(t[b] * freq);
        }
    }
    return out;
}

struct AttentionCache {
    std::vector<detail::RowMat> q, k, v, a, o;
};

// Single-head cross-attention. h is [B×C×P] (channel-major spatial features),
// ctx is [B×L×d]. Returns Wo·(softmax(QKᵀ/√A)·V)ᵀ in h's layout. Gradients
// treat any hook rewrite as a constant substitution of the probabilities.
ad::Var cross_attention(const ad::Var& h, const ad::Var& ctx, const ad::Var& wq, const ad::Var& wk,
                        const ad::Var& wv, const ad::Var& wo, std::span<const int> t, const AttentionHook* hook) {
    const int batch = h.shape()[0], ch = h.shape()[1];
    const int pos = static_cast<int>(h.value().size()) / (batch * ch);
    const int len = ctx.shape()[1], dtok = ctx.shape()[2];
    const int adim = wq.shape()[0];
    require(ctx.shape()[0] == batch, "cross_attention: batch mismatch");
    require(wq.shape()[1] == ch && wk.shape()[1] == dtok && wv.shape()[1] == dtok && wo.shape()[1] == adim,
            "cross_attention: weight shapes do not match features/tokens");
    const double inv = 1.0 / std::sqrt(static_cast<double>(adim));

    auto cache = std::make_shared<AttentionCache>();
    Tensor out(h.shape());
    const auto Wq = mat(wq.value()), Wk = mat(wk.value()), Wv = mat(wv.value()), Wo = mat(wo.value());
    for (int b = 0; b < batch; ++b) {
        const auto H = mat(h.value().data() + static_cast<std::size_t>(b) * ch * pos, ch, pos);
        const auto X = mat(ctx.value().data() + static_cast<std::size_t>(b) * len * dtok, len, dtok);
        detail::RowMat Q = H.transpose() * Wq.transpose();
        detail::RowMat K = X * Wk.transpose();
        detail::RowMat V = X * Wv.transpose();
        detail::RowMat A = (Q * K.transpose()) * inv;
        for (int i = 0; i < pos; ++i) {
            const double mx = A.row(i).maxCoeff();
            A.row(i) = (A.row(i).array() - mx).exp().matrix();
            A.row(i) /= A.row(i).sum();
        }
        if (hook && *hook) {
            Tensor maps(Shape{pos, len});
            mat(maps) = A;
            (*hook)(t[b], maps);
            require(maps.shape() == Shape({pos, len}), "attention hook changed the map shape");
            A = mat(maps);
        }
        detail::RowMat O = A * V;
        mat(out.data() + static_cast<std::size_t>(b) * ch * pos, ch, pos).noalias() = Wo * O.transpose();
        cache->q.push_back(std::move(Q));
        cache->k.push_back(std::move(K));
        cache->v.push_back(std::move(V));
        cache->a.push_back(std::move(A));
        cache->o.push_back(std::move(O));
    }

    ad::Node *nh = h.get(), *nx = ctx.get(), *nq = wq.get(), *nk = wk.get(), *nv = wv.get(), *no = wo.get();
    return ad::make_result(std::move(out), {h, ctx, wq, wk, wv, wo}, [=](ad::Node* self) {
        return [=] {
            const auto Wqm = mat(nq->value), Wkm = mat(nk->value), Wvm = mat(nv->value), Wom = mat(no->value);
            for (int b = 0; b < batch; ++b) {
                const auto G = mat(self->grad.data() + static_cast<std::size_t>(b) * ch * pos, ch, pos);
                const auto H = mat(nh->value.data() + static_cast<std::size_t>(b) * ch * pos, ch, pos);
                const auto X = mat(nx->value.data() + static_cast<std::size_t>(b) * len * dtok, len, dtok);
                const auto& Q = cache->q[b];
                const auto& K = cache->k[b];
                const auto& V = cache->v[b];
                const auto& A = cache->a[b];
                const auto& O = cache->o[b];
                if (no->requires_grad) {
                    mat(no->grad_buffer().data(), ch, adim).noalias() += G * O;
                }
                const detail::RowMat dO = G.transpose() * Wom;
                const detail::RowMat dA = dO * V.transpose();
                const detail::RowMat dV = A.transpose() * dO;
                detail::RowMat dS = dA;
                for (int i = 0; i < pos; ++i) {
                    const double dot = A.row(i).dot(dA.row(i));
                    dS.row(i) = (A.row(i).array() * (dA.row(i).array() - dot)).matrix() * inv;
                }
                const detail::RowMat dQ = dS * K;
                const detail::RowMat dK = dS.transpose() * Q;
                if (nq->requires_grad) {
                    mat(nq->grad_buffer().data(), adim, ch).noalias() += dQ.transpose() * H.transpose();
                }
                if (nh->requires_grad) {
                    mat(nh->grad_buffer().data() + static_cast<std::size_t>(b) * ch * pos, ch, pos).noalias() +=
                        Wqm.transpose() * dQ.transpose();
                }
                if (nk->requires_grad) {
                    mat(nk->grad_buffer().data(), adim, dtok).noalias() += dK.transpose() * X;
                }
                if (nv->requires_grad) {
                    mat(nv->grad_buffer().data(), adim, dtok).noalias() += dV.transpose() * X;
                }
                if (nx->requires_grad) {
                    mat(nx->grad_buffer().data() + static_cast<std::size_t>(b) * len * dtok, len, dtok).noalias() +=
                        dK * Wkm + dV * Wvm;
                }
            }
        };
    });
}

ad::Var conv_block(const ParamVars& p, const std::string& name, const ad::Var& x, const ad::Var& temb, int stride) {
    using namespace ad;
    const Var h = conv2d(x, p[name + ".w"], p[name + ".b"], stride, 1);
    return silu(add_channel_bias(h, linear(temb, p["tb_" + name + ".w"], p["tb_" + name + ".b"])));
}

}  // namespace

ad::Var denoiser_forward(const ParamVars& p, const Tensor& mix, const ad::Var& z, std::span<const int> t,
                         const ad::Var& tokens, const AttentionHook* hook) {
    using namespace ad;
    require(z.value().ndim() == 4 && z.shape()[1] == synth::kChannels && z.shape()[2] == synth::kSize &&
                z.shape()[3] == synth::kSize,
            "denoiser input must be [B×3×16×16], got " + shape_str(z.shape()));
    const int batch = z.shape()[0];
    require(static_cast<int>(t.size()) == batch, "one timestep per sample required");
    require(tokens.value().ndim() == 3 && tokens.shape()[0] == batch && tokens.shape()[1] >= 1,
            "conditioning tokens must be [B×L×d], got " + shape_str(tokens.shape()));
    const int len = tokens.shape()[1], dtok = tokens.shape()[2];
    require(mix.ndim() == 2 && mix.dim(1) == dtok, "mixing layer does not match the token dimension");

    const int time_dim = p["time.w"].shape()[1];
    const Var temb = silu(linear(constant(timestep_features(t, time_dim)), p["time.w"], p["time.b"]));
    const Var ctx = reshape(linear(reshape(tokens, {batch * len, dtok}), constant(mix)), {batch, len, mix.dim(0)});

    const Var h1 = conv_block(p, "in", z, temb, 1);
    Var h2 = conv_block(p, "down", h1, temb, 2);
    const Var att = cross_attention(h2, ctx, p["attn.q"], p["attn.k"], p["attn.v"], p["attn.o"], t, hook);
    h2 = add(h2, att);
    const Var h3 = conv_block(p, "mid", h2, temb, 1);
    const Var h4 = conv_block(p, "up", concat_channels(upsample_nearest2x(h3), h1), temb, 1);
    return conv2d(h4, p["out.w"], p["out.b"], 1, 1);
}

ad::Var ldm_loss(const EpsPredictor& predictor, const NoiseSchedule& schedule, const Tensor& z0,
                 const ad::Var& tokens, Rng& rng) {
    require(z0.ndim() == 4 && z0.dim(0) >= 1, "ldm_loss needs a [B×C×H×W] batch");
    const int batch = z0.dim(0);
    const std::size_t item = z0.size() / batch;
    std::vector<int> ts(batch);
    Tensor eps(z0.shape());
    Tensor zt(z0.shape());
    for (int b = 0; b < batch; ++b) {
        ts[b] = rng.uniform_int(schedule.T);
        const double a = std::sqrt(schedule.alpha_bars[ts[b]]);
        const double s = std::sqrt(1.0 - schedule.alpha_bars[ts[b]]);
        for (std::size_t i = 0; i < item; ++i) {
            const std::size_t k = b * item + i;
            eps[k] = rng.normal();
            zt[k] = a * z0[k] + s * eps[k];
        }
    }
    return ad::mse(predictor(ad::constant(std::move(zt)), ts, tokens), eps);
}

ad::Var ldm_loss(const DiffusionModel& model, const Tensor& z0, const ad::Var& tokens, Rng& rng) {
    const ParamVars vars(model.denoiser, false);
    const Tensor& mix = model.text.params.get("mix.w");
    return ldm_loss(
        [&](const ad::Var& zt, std::span<const int> t, const ad::Var& tok) {
            return denoiser_forward(vars, mix, zt, t, tok);
        },
        model.schedule, z0, tokens, rng);
}

ad::Var stack_tokens(std::span<const ConditioningSequence> conds) {
    require(!conds.empty(), "no conditioning sequences");
    std::vector<Tensor> rows;
    for (const auto& c : conds) {
        require(c.tokens.ndim() == 2 && c.tokens.shape() == conds.front().tokens.shape(),
                "conditioning sequences in a batch must share one [L×d] shape");
        rows.push_back(c.tokens);
    }
    return ad::constant(stack(rows));
}

void DiffusionConfig::validate() const {
    require(T >= 2, "T must be >= 2");
    require(beta_start > 0.0 && beta_end < 1.0 && beta_start < beta_end, "betas must satisfy 0 < start < end < 1");
    require(steps >= 0, "diffusion steps must be >= 0");
    require(batch_size >= 1, "diffusion batch_size must be >= 1");
    require(lr > 0.0, "diffusion lr must be > 0");
}

const std::vector<std::string>& training_templates() {
    static const std::vector<std::string> t = {"a photo of {}", "a painting of {}", "a sight of {}"};
    return t;
}

ConditioningSequence encode_prompt(const DiffusionModel& model, std::span<const enc::PromptToken> tokens,
                                   const Tensor* slot_value, bool append_token) {
    require(!tokens.empty(), "empty prompt");
    const int d = model.text.dim();
    int stars = 0;
    for (const auto& t : tokens) {
        stars += t.kind == enc::PromptToken::Kind::star ? 1 : 0;
    }
    require(stars <= 1, "a prompt may contain at most one * slot");
    if (stars == 1) {
        require(slot_value != nullptr, "the prompt has a * slot but no pseudo-token was supplied");
        require(slot_value->size() == static_cast<std::size_t>(d), "pseudo-token dimension does not match the model");
        require(slot_value->all_finite(), "pseudo-token has non-finite entries");
    }
    const int len = static_cast<int>(tokens.size()) + (stars == 1 && append_token ? 1 : 0);
    ConditioningSequence c{Tensor(Shape{len, d}), std::nullopt};
    const Tensor& words = model.text.params.get("words");
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        double* row = c.tokens.data() + i * d;
        if (tokens[i].kind != enc::PromptToken::Kind::star) {
            const Tensor e = enc::token_embedding(model.text, tokens[i]);
            std::copy(e.values().begin(), e.values().end(), row);
        } else if (append_token) {
            const double* ph = words.data() + (words.dim(0) - 1) * static_cast<std::size_t>(d);
            std::copy(ph, ph + d, row);
            std::copy(slot_value->values().begin(), slot_value->values().end(), c.tokens.data() + (len - 1) * d);
            c.slot_index = len - 1;
        } else {
            std::copy(slot_value->values().begin(), slot_value->values().end(), row);
            c.slot_index = static_cast<int>(i);
        }
    }
    return c;
}

ConditioningSequence label_conditioning(const DiffusionModel& model, const std::string& tmpl, int label_id) {
    require(label_id >= 0 && label_id < static_cast<int>(model.label_names.size()),
            "unknown label id " + std::to_string(label_id));
    std::string prompt = tmpl;
    const auto at = prompt.find("{}");
    require(at != std::string::npos, "template needs a {} slot");
    prompt.replace(at, 2, "<label:" + model.label_names[label_id] + ">");
    const auto toks = enc::tokenize(prompt, model.label_names);
    return encode_prompt(model, toks);
}

TrainedDiffusion train_diffusion(const synth::Dataset& dataset, const enc::EncoderParams& text,
                                 const DiffusionConfig& config) {
    config.validate();
    const auto train = dataset.split(synth::Split::train);
    require(!train.empty(), "diffusion training needs a nonempty training split");
    require(text.modality == enc::Modality::text, "diffusion conditioning needs the text encoder");

    TrainedDiffusion out;
    DiffusionModel& m = out.model;
    m.schedule = NoiseSchedule::linear(config.T, config.beta_start, config.beta_end);
    m.shape.token_dim = text.dim();
    m.denoiser = init_denoiser(m.shape, config.seed ^ 0xD1FF05EULL);
    m.text = text;
    for (const auto& p : dataset.prototypes) {
        m.label_names.push_back(p.label_text);
    }
    require(enc::text_num_labels(text) >= dataset.num_classes(), "text encoder has fewer labels than the dataset");

    std::vector<std::vector<ConditioningSequence>> conds(dataset.num_classes());
    for (int c = 0; c < dataset.num_classes(); ++c) {
        for (const auto& tmpl : training_templates()) {
            conds[c].push_back(label_conditioning(m, tmpl, c));
        }
    }

    Rng rng(config.seed);
    Adam opt(m.denoiser, {config.lr, 0.9, 0.999, 1e-8, 0.0});
    const Tensor& mix = m.text.params.get("mix.w");
    const int n = static_cast<int>(train.size());
    for (int step = 0; step < config.steps; ++step) {
        std::vector<Tensor> frames;
        std::vector<ConditioningSequence> batch_conds;
        for (int b = 0; b < config.batch_size; ++b) {
            const auto* s = train[rng.uniform_int(n)];
            frames.push_back(s->frames[rng.uniform_int(static_cast<int>(s->frames.size()))]);
            const auto& options = conds[s->label_id];
            batch_conds.push_back(options[rng.uniform_int(static_cast<int>(options.size()))]);
        }
        const ParamVars vars(m.denoiser, true);
        const ad::Var loss = ldm_loss(
            [&](const ad::Var& zt, std::span<const int> t, const ad::Var& tok) {
                return denoiser_forward(vars, mix, zt, t, tok);
            },
            m.schedule, stack(frames), stack_tokens(batch_conds), rng);
        ad::backward(loss);
        opt.step(m.denoiser, vars.grads());
        out.loss_history.push_back(loss.value().item());
    }
    return out;
}

Sampler::Sampler(const DiffusionModel& model, ConditioningSequence cond, std::uint64_t seed)
    : model_(&model), cond_(std::move(cond)), rng_(seed), t_(model.schedule.T - 1), vars_(model.denoiser, false) {
    require(cond_.tokens.ndim() == 2 && cond_.tokens.dim(0) >= 1 && cond_.tokens.dim(1) == model.text.dim(),
            "conditioning must be [L×d] with d matching the model");
    require(cond_.tokens.all_finite(), "conditioning tokens must be finite");
    z_ = rng_.normal_tensor({synth::kChannels, synth::kSize, synth::kSize});
}

Tensor Sampler::step(const AttentionHook* hook) {
    require(!done(), "sampler has already finished");
    const NoiseSchedule& s = model_->schedule;
    const int t = t_;
    Tensor used;
    const AttentionHook wrap = [&](int ts, Tensor& maps) {
        if (hook && *hook) {
            (*hook)(ts, maps);
        }
        used = maps;
    };
    const int len = cond_.tokens.dim(0);
    const int steps[1] = {t};
    const ad::Var eps = denoiser_forward(vars_, model_->text.params.get("mix.w"),
                                         ad::constant(z_.reshaped({1, synth::kChannels, synth::kSize, synth::kSize})),
                                         steps, ad::constant(cond_.tokens.reshaped({1, len, cond_.tokens.dim(1)})),
                                         &wrap);
    const double ab = s.alpha_bars[t];
    const double ab_prev = t > 0 ? s.alpha_bars[t - 1] : 1.0;
    const double beta = s.betas[t];
    Tensor x0(z_.shape());
    for (std::size_t i = 0; i < x0.size(); ++i) {
        x0[i] = std::clamp((z_[i] - std::sqrt(1.0 - ab) * eps.value()[i]) / std::sqrt(ab), -1.0, 1.0);
    }
    if (t == 0) {
        z_ = x0;
    } else {
        const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
        const double ct = std::sqrt(s.alphas[t]) * (1.0 - ab_prev) / (1.0 - ab);
        const double sigma = std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab));
        for (std::size_t i = 0; i < z_.size(); ++i) {
            z_[i] = c0 * x0[i] + ct * z_[i] + sigma * rng_.normal();
        }
    }
    --t_;
    return used;
}

Tensor Sampler::image() const {
    Tensor out = z_;
    for (auto& v : out.values()) {
        v = std::clamp(v, -1.0, 1.0);
    }
    return out;
}

SampleResult sample(const DiffusionModel& model, const ConditioningSequence& cond, std::uint64_t seed, bool capture,
                    const AttentionHook* hook) {
    Sampler sampler(model, cond, seed);
    SampleResult r;
    while (!sampler.done()) {
        const int t = sampler.timestep();
        Tensor maps = sampler.step(hook);
        if (capture) {
            r.records.push_back({t, std::move(maps)});
        }
    }
    r.image = sampler.image();
    return r;
}

}  // namespace aai::diff
