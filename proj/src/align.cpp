#include "aai/align.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "aai/error.hpp"
#include "eigen_map.hpp"

namespace aai::align {

namespace {

void require_probability_rows(const Tensor& p, const char* what) {
    require(p.ndim() == 2, std::string(what) + " must be a matrix of probability rows");
    for (int i = 0; i < p.dim(0); ++i) {
        double s = 0.0;
        for (int j = 0; j < p.dim(1); ++j) {
            require(p.at(i, j) >= 0.0, std::string(what) + " has a negative entry");
            s += p.at(i, j);
        }
        require(std::abs(s - 1.0) <= 1e-5, std::string(what) + " row " + std::to_string(i) + " sums to " +
                                               std::to_string(s) + ", not 1");
    }
}

}  // namespace

SimilarityMatrix similarity(const Tensor& audio, const Tensor& other, double tau) {
    require(tau > 0.0, "temperature must be > 0");
    require(audio.ndim() == 2 && other.ndim() == 2 && audio.dim(1) == other.dim(1),
            "similarity needs [N×d] and [M×d] embeddings");
    Tensor s(Shape{audio.dim(0), other.dim(0)});
    detail::mat(s).noalias() = detail::mat(audio) * detail::mat(other).transpose() / tau;
    return {std::move(s), tau};
}

Tensor softmax_rows(const Tensor& logits) {
    require(logits.ndim() == 2, "softmax_rows needs a matrix");
    Tensor out = logits;
    for (int i = 0; i < out.dim(0); ++i) {
        double mx = -INFINITY;
        for (int j = 0; j < out.dim(1); ++j) {
            mx = std::max(mx, out.at(i, j));
        }
        double z = 0.0;
        for (int j = 0; j < out.dim(1); ++j) {
            out.at(i, j) = std::exp(out.at(i, j) - mx);
            z += out.at(i, j);
        }
        for (int j = 0; j < out.dim(1); ++j) {
            out.at(i, j) /= z;
        }
    }
    return out;
}

double infonce_direction(const SimilarityMatrix& s, bool exclude_positive) {
    require(s.tau > 0.0, "temperature must be > 0");
    require(s.values.all_finite(), "similarity matrix has non-finite entries");
    return ad::cross_entropy_diag(ad::constant(s.values), exclude_positive).value().item();
}

double infonce_loss(const Tensor& audio, const Tensor& other, double tau, bool exclude_positive) {
    require(audio.shape() == other.shape(), "infonce_loss needs equal batch shapes");
    return infonce_loss(ad::constant(audio), ad::constant(other), tau, exclude_positive).value().item();
}

ad::Var infonce_loss(const ad::Var& audio, const ad::Var& other, double tau, bool exclude_positive) {
    require(audio.shape() == other.shape(), "infonce_loss needs equal batch shapes");
    require(tau > 0.0, "temperature must be > 0");
    const ad::Var s = ad::scale(ad::matmul_nt(audio, other), 1.0 / tau);
    return ad::scale(ad::add(ad::cross_entropy_diag(s, exclude_positive),
                             ad::cross_entropy_diag(ad::transpose(s), exclude_positive)),
                     0.5);
}

double kl_rows(const Tensor& q, const Tensor& p) {
    require(q.shape() == p.shape(), "kl_rows shape mismatch");
    require_probability_rows(q, "q");
    require_probability_rows(p, "p");
    double total = 0.0;
    for (int i = 0; i < q.dim(0); ++i) {
        for (int j = 0; j < q.dim(1); ++j) {
            const double qi = q.at(i, j);
            if (qi > 0.0) {
                require(p.at(i, j) > 0.0, "KL undefined: p has zero mass where q does not");
                total += qi * std::log(qi / p.at(i, j));
            }
        }
    }
    return total / q.dim(0);
}

double momentum_kl_loss(const Tensor& p_a2v, const Tensor& p_v2a, const Tensor& q_a2v, const Tensor& q_v2a) {
    return kl_rows(q_a2v, p_a2v) + kl_rows(q_v2a, p_v2a);
}

MomentumTeacher make_teacher(const ParamSet& student, double momentum) {
    require(momentum >= 0.0 && momentum <= 1.0, "momentum must be in [0,1]");
    return {student, momentum};
}

void ema_update_in_place(MomentumTeacher& teacher, const ParamSet& student) {
    require(teacher.shadow.same_layout(student), "EMA update: teacher and student layouts differ");
    const double m = teacher.momentum;
    for (std::size_t i = 0; i < student.size(); ++i) {
        Tensor& sh = teacher.shadow.items()[i].value;
        const Tensor& st = student.items()[i].value;
        for (std::size_t k = 0; k < sh.size(); ++k) {
            sh[k] = m * sh[k] + (1.0 - m) * st[k];
        }
    }
}

MomentumTeacher ema_update(const MomentumTeacher& teacher, const ParamSet& student) {
    MomentumTeacher out = teacher;
    ema_update_in_place(out, student);
    return out;
}

double AlignLossReport::recomposition_error() const {
    return std::abs(total - (loss_at + (1.0 - alpha) * loss_av + 0.5 * alpha * loss_t));
}

void AlignConfig::validate() const {
    require(dim >= 2, "d must be >= 2");
    require(tau > 0.0, "tau must be > 0");
    require(alpha >= 0.0 && alpha <= 1.0, "alpha must be in [0,1]");
    require(batch_size >= 2, "batch_size must be >= 2");
    require(epochs >= 0, "epochs must be >= 0");
    require(lr > 0.0, "lr must be > 0");
    require(weight_decay >= 0.0, "weight_decay must be >= 0");
    require(momentum >= 0.0 && momentum <= 1.0, "momentum must be in [0,1]");
}

AlignEncoders init_encoders(int num_classes, int dim, std::uint64_t seed) {
    return {enc::init_audio_encoder(dim, seed * 3 + 1), enc::init_vision_encoder(dim, seed * 3 + 2),
            enc::init_text_encoder(num_classes, dim, seed * 3 + 3)};
}

LossGraph build_total_loss(const AlignBatch& batch, const AlignEncoders& encoders, const MomentumTeacher& teacher,
                           double tau, double alpha, bool exclude_positive) {
    using namespace ad;
    require(alpha >= 0.0 && alpha <= 1.0, "alpha must be in [0,1]");
    require(tau > 0.0, "tau must be > 0");
    const std::size_t n = batch.audio.size();
    require(n >= 2 && batch.frames.size() == n && batch.labels.size() == n,
            "alignment batch needs >= 2 aligned (audio, frame, label) triples");

    LossGraph g{Var(), {}, ParamVars(encoders.audio.params, true), ParamVars(teacher.shadow, true)};
    const Var fa = enc::conv_encoder_forward(g.audio_vars, constant(stack(batch.audio)));
    const Tensor frames = stack(batch.frames);
    const Tensor fv = enc::encode_vision_batch(encoders.vision, batch.frames);
    const int d = encoders.text.dim();
    Tensor ft(Shape{static_cast<int>(n), d});
    for (std::size_t i = 0; i < n; ++i) {
        const auto e = enc::encode_text(encoders.text, batch.labels[i]);
        std::copy(e.vector.values().begin(), e.vector.values().end(), &ft.at(static_cast<int>(i), 0));
    }

    const Var loss_at = infonce_loss(fa, constant(ft), tau, exclude_positive);
    const Var s_av = scale(matmul_nt(fa, constant(fv)), 1.0 / tau);
    const Var loss_av = scale(add(cross_entropy_diag(s_av, exclude_positive),
                                  cross_entropy_diag(transpose(s_av), exclude_positive)),
                              0.5);

    // Pseudo-targets from the momentum teacher, detached from every graph.
    const Var fv_teacher = enc::conv_encoder_forward(g.teacher_vars, constant(frames));
    const Tensor q_a2v = softmax_rows(similarity(fa.value(), fv_teacher.value(), tau).values);
    const Tensor q_v2a = softmax_rows(similarity(fv_teacher.value(), fa.value(), tau).values);
    const Var loss_t = add(kl_rows_from_logits(q_a2v, s_av), kl_rows_from_logits(q_v2a, transpose(s_av)));

    g.total = add(add(loss_at, scale(loss_av, 1.0 - alpha)), scale(loss_t, 0.5 * alpha));
    g.report = {loss_at.value().item(), loss_av.value().item(), loss_t.value().item(), g.total.value().item(), alpha};
    return g;
}

AlignLossReport total_loss(const AlignBatch& batch, const AlignEncoders& encoders, const MomentumTeacher& teacher,
                           double tau, double alpha, bool exclude_positive) {
    return build_total_loss(batch, encoders, teacher, tau, alpha, exclude_positive).report;
}

AlignCheckpoint init_checkpoint(const synth::Dataset& dataset, const AlignConfig& config) {
    config.validate();
    AlignCheckpoint ck;
    ck.config = config;
    ck.encoders = init_encoders(dataset.num_classes(), config.dim, config.seed);
    ck.teacher = make_teacher(ck.encoders.vision.params, config.momentum);
    for (const auto& p : dataset.prototypes) {
        ck.label_names.push_back(p.label_text);
    }
    return ck;
}

AlignCheckpoint train_align(const synth::Dataset& dataset, const AlignConfig& config) {
    const auto train = dataset.split(synth::Split::train);
    require(!train.empty(), "alignment training needs a nonempty training split");
    require(dataset.num_classes() >= 2, "alignment training needs >= 2 classes");
    AlignCheckpoint ck = init_checkpoint(dataset, config);

    const int n = static_cast<int>(train.size());
    const int batch = std::min(config.batch_size, n);
    require(batch >= 2, "alignment training needs at least 2 training clips");
    int steps_per_epoch = n / batch;
    if (n % batch >= 2) {
        ++steps_per_epoch;
    }
    ck.steps_per_epoch = steps_per_epoch;

    Rng rng(config.seed ^ 0xA11A11ULL);
    Adam opt(ck.encoders.audio.params, {config.lr, 0.9, 0.999, 1e-8, config.weight_decay});
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng.engine());
        for (int s = 0; s < steps_per_epoch; ++s) {
            AlignBatch b;
            for (int i = s * batch; i < std::min(n, (s + 1) * batch); ++i) {
                const auto* smp = train[order[i]];
                b.audio.push_back(smp->audio);
                b.frames.push_back(smp->frames[rng.uniform_int(static_cast<int>(smp->frames.size()))]);
                b.labels.push_back(smp->label_id);
            }
            LossGraph g = build_total_loss(b, ck.encoders, ck.teacher, config.tau, config.alpha,
                                           config.exclude_positive_denominator);
            ad::backward(g.total);
            opt.step(ck.encoders.audio.params, g.audio_vars.grads());
            ema_update_in_place(ck.teacher, ck.encoders.vision.params);
            ck.history.push_back(g.report);
        }
    }
    return ck;
}

std::vector<double> epoch_mean_totals(const AlignCheckpoint& ckpt) {
    std::vector<double> out;
    if (ckpt.steps_per_epoch <= 0) {
        return out;
    }
    const std::size_t spe = static_cast<std::size_t>(ckpt.steps_per_epoch);
    for (std::size_t start = 0; start + spe <= ckpt.history.size(); start += spe) {
        double s = 0.0;
        for (std::size_t i = start; i < start + spe; ++i) {
            s += ckpt.history[i].total;
        }
        out.push_back(s / static_cast<double>(spe));
    }
    return out;
}

}  // namespace aai::align
