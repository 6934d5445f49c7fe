#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "aai/align.hpp"
#include "aai/error.hpp"
#include "support.hpp"

using namespace aai;
using namespace aai::align;

namespace {

// Reference row cross-entropy against the diagonal, written out directly.
double reference_direction(const Tensor& s) {
    double total = 0.0;
    for (int i = 0; i < s.dim(0); ++i) {
        double z = 0.0;
        for (int j = 0; j < s.dim(1); ++j) {
            z += std::exp(s.at(i, j));
        }
        total += std::log(z) - s.at(i, i);
    }
    return total / s.dim(0);
}

Tensor transposed(const Tensor& s) {
    Tensor t(Shape{s.dim(1), s.dim(0)});
    for (int i = 0; i < s.dim(0); ++i) {
        for (int j = 0; j < s.dim(1); ++j) {
            t.at(j, i) = s.at(i, j);
        }
    }
    return t;
}

Tensor permute_rows(const Tensor& x, const std::vector<int>& perm) {
    Tensor out(x.shape());
    for (int i = 0; i < x.dim(0); ++i) {
        for (int j = 0; j < x.dim(1); ++j) {
            out.at(i, j) = x.at(perm[i], j);
        }
    }
    return out;
}

synth::Dataset tiny_dataset() {
    synth::DatasetOptions o;
    o.num_classes = 4;
    o.train_per_class = 8;
    o.test_per_class = 2;
    return synth::generate_dataset(o);
}

AlignBatch batch_from(const synth::Dataset& ds, int n) {
    AlignBatch b;
    for (int i = 0; i < n; ++i) {
        const auto& s = ds.samples[static_cast<std::size_t>(i * 3 % ds.samples.size())];
        b.audio.push_back(s.audio);
        b.frames.push_back(s.frames[0]);
        b.labels.push_back(s.label_id);
    }
    return b;
}

AlignConfig tiny_config() {
    AlignConfig c;
    c.epochs = 3;
    c.batch_size = 8;
    return c;
}

}  // namespace

TEST_CASE("defaults") {
    const AlignConfig c;
    CHECK(c.dim == 32);
    CHECK(c.tau == 0.07);
    CHECK(c.alpha == 0.4);
    CHECK(c.batch_size == 32);
    CHECK(c.epochs == 30);
    CHECK(c.lr == 1e-3);
    CHECK(c.weight_decay == 0.02);
    CHECK(c.momentum == 0.995);
    CHECK(!c.exclude_positive_denominator);
}

TEST_CASE("infonce direction closed forms") {
    SUBCASE("uniform similarities give log N") {
        for (int n : {2, 5, 32}) {
            const double v = infonce_direction({Tensor(Shape{n, n}, 0.3), 0.07});
            CHECK(v == doctest::Approx(std::log(static_cast<double>(n))).epsilon(1e-12));
        }
        CHECK(std::abs(infonce_direction({Tensor(Shape{2, 2}, 1.0), 1.0}) - 0.693147) < 1e-6);
    }
    SUBCASE("two items, unit diagonal") {
        const Tensor s(Shape{2, 2}, std::vector<double>{1, 0, 0, 1});
        const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
        CHECK(std::abs(expected - 0.313262) < 1e-6);
        CHECK(std::abs(infonce_direction({s, 1.0}) - expected) < 1e-12);
    }
    SUBCASE("matches the direct expression on random logits") {
        Rng rng(1);
        const Tensor s = rng.normal_tensor({6, 6}, 3.0);
        CHECK(infonce_direction({s, 0.1}) == doctest::Approx(reference_direction(s)).epsilon(1e-12));
    }
    SUBCASE("negatives-only denominator") {
        const Tensor s(Shape{2, 2}, std::vector<double>{1, 0, 0, 1});
        // -log(e / e^0) = -1 for both rows.
        CHECK(infonce_direction({s, 1.0}, true) == doctest::Approx(-1.0).epsilon(1e-12));
    }
    CHECK_THROWS_AS(infonce_direction({Tensor(Shape{1, 1}, 0.0), 0.07}), ArgumentError);
    CHECK_THROWS_AS(infonce_direction({Tensor(Shape{2, 2}, 0.0), 0.0}), ArgumentError);
}

TEST_CASE("infonce gradient with respect to similarities") {
    Rng rng(2);
    for (bool excl : {false, true}) {
        const Tensor s0 = rng.normal_tensor({5, 5}, 2.0);
        const ad::Var s = ad::parameter(s0);
        ad::backward(ad::cross_entropy_diag(s, excl));
        auto f = [&](const Tensor& x) { return infonce_direction({x, 1.0}, excl); };
        CHECK(test::check_gradient(s0, s.grad(), f, 12, 3).max_rel_error < 1e-4);
    }
    SUBCASE("through both directions and the embeddings") {
        const Tensor a0 = test::random_unit_rows(6, 8, rng);
        const Tensor o0 = test::random_unit_rows(6, 8, rng);
        const ad::Var a = ad::parameter(a0);
        ad::backward(infonce_loss(a, ad::constant(o0), 0.07));
        auto f = [&](const Tensor& x) { return infonce_loss(x, o0, 0.07); };
        CHECK(test::check_gradient(a0, a.grad(), f, 12, 4).max_rel_error < 1e-4);
    }
}

TEST_CASE("infonce loss symmetry, saturation and random level") {
    Rng rng(5);
    const Tensor a = test::random_unit_rows(16, 32, rng);
    const Tensor b = test::random_unit_rows(16, 32, rng);
    CHECK(infonce_loss(a, b, 0.07) == doctest::Approx(infonce_loss(b, a, 0.07)).epsilon(1e-12));

    const SimilarityMatrix s = similarity(a, b, 0.07);
    CHECK(infonce_loss(a, b, 0.07) ==
          doctest::Approx(0.5 * (reference_direction(s.values) + reference_direction(transposed(s.values))))
              .epsilon(1e-12));

    CHECK(infonce_loss(a, a, 0.01) < 1e-3);

    // Unit temperature: logits are raw cosines, so the loss sits near log N.
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng r(seed);
        const Tensor x = test::random_unit_rows(32, 32, r);
        const Tensor y = test::random_unit_rows(32, 32, r);
        const double v = infonce_loss(x, y, 1.0);
        CHECK(v >= std::log(32.0) - 1.0);
        CHECK(v <= std::log(32.0) + 1.0);
    }
    CHECK_THROWS_AS(infonce_loss(a, test::random_unit_rows(8, 32, rng), 0.07), ArgumentError);
}

TEST_CASE("infonce loss is invariant to a joint batch permutation") {
    Rng rng(6);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor a = test::random_unit_rows(12, 16, rng);
        const Tensor b = test::random_unit_rows(12, 16, rng);
        std::vector<int> perm(12);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng.engine());
        CHECK(infonce_loss(permute_rows(a, perm), permute_rows(b, perm), 0.1) ==
              doctest::Approx(infonce_loss(a, b, 0.1)).epsilon(1e-10));
    }
}

TEST_CASE("temperature rescaling keeps the row argmax") {
    Rng rng(7);
    const Tensor a = test::random_unit_rows(10, 16, rng);
    const Tensor b = test::random_unit_rows(10, 16, rng);
    const Tensor base = softmax_rows(similarity(a, b, 0.07).values);
    for (double k : {0.1, 0.5, 2.0, 10.0}) {
        const Tensor p = softmax_rows(similarity(a, b, 0.07 / k).values);
        for (int i = 0; i < 10; ++i) {
            const auto argmax = [&](const Tensor& m) {
                int best = 0;
                for (int j = 1; j < m.dim(1); ++j) {
                    best = m.at(i, j) > m.at(i, best) ? j : best;
                }
                return best;
            };
            CHECK(argmax(p) == argmax(base));
        }
    }
}

TEST_CASE("momentum KL loss") {
    const Tensor q(Shape{1, 2}, std::vector<double>{0.5, 0.5});
    const Tensor p(Shape{1, 2}, std::vector<double>{0.9, 0.1});
    const double expected = 0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1);
    CHECK(std::abs(expected - 0.510826) < 1e-5);
    CHECK(std::abs(kl_rows(q, p) - expected) < 1e-12);
    CHECK(std::abs(momentum_kl_loss(p, p, q, q) - 2 * expected) < 1e-12);

    Rng rng(8);
    const Tensor r = softmax_rows(rng.normal_tensor({6, 6}));
    CHECK(std::abs(momentum_kl_loss(r, r, r, r)) < 1e-7);

    // One-hot targets reduce KL to the diagonal cross-entropy.
    Tensor logits = rng.normal_tensor({6, 6});
    Tensor eye(Shape{6, 6}, 0.0);
    for (int i = 0; i < 6; ++i) {
        eye.at(i, i) = 1.0;
    }
    CHECK(kl_rows(eye, softmax_rows(logits)) == doctest::Approx(reference_direction(logits)).epsilon(1e-10));

    const Tensor bad(Shape{1, 2}, std::vector<double>{0.5, 0.6});
    CHECK_THROWS_AS(momentum_kl_loss(p, p, bad, q), ArgumentError);
    CHECK_THROWS_AS(momentum_kl_loss(bad, p, q, q), ArgumentError);
}

TEST_CASE("ema update") {
    ParamSet shadow;
    shadow.add("w", Tensor(Shape{1}, 1.0));
    ParamSet student;
    student.add("w", Tensor(Shape{1}, 0.0));
    CHECK(ema_update(make_teacher(shadow, 1.0), student).shadow == shadow);
    CHECK(ema_update(make_teacher(shadow, 0.0), student).shadow == student);
    CHECK(ema_update(make_teacher(shadow, 0.995), student).shadow.get("w")[0] ==
          doctest::Approx(0.995).epsilon(1e-15));

    ParamSet wrong;
    wrong.add("w", Tensor(Shape{2}, 0.0));
    CHECK_THROWS_AS(ema_update(make_teacher(shadow, 0.9), wrong), ArgumentError);
    CHECK_THROWS_AS(make_teacher(shadow, 1.5), ArgumentError);
}

TEST_CASE("ema closed form over repeated updates") {
    Rng rng(9);
    ParamSet theta0, theta;
    theta0.add("a", rng.normal_tensor({4, 3}));
    theta0.add("b", rng.normal_tensor({5}));
    theta.add("a", rng.normal_tensor({4, 3}));
    theta.add("b", rng.normal_tensor({5}));
    for (double m : {0.9, 0.995}) {
        MomentumTeacher t = make_teacher(theta0, m);
        for (int u = 1; u <= 200; ++u) {
            ema_update_in_place(t, theta);
            if (u % 50 == 0) {
                const double mu = std::pow(m, u);
                for (std::size_t k = 0; k < theta.size(); ++k) {
                    const Tensor& sh = t.shadow.items()[k].value;
                    for (std::size_t i = 0; i < sh.size(); ++i) {
                        const double expect = mu * theta0.items()[k].value[i] + (1 - mu) * theta.items()[k].value[i];
                        CHECK(std::abs(sh[i] - expect) < 1e-6);
                    }
                }
            }
        }
    }
}

TEST_CASE("total loss recomposition and alpha endpoints") {
    const auto ds = tiny_dataset();
    const auto batch = batch_from(ds, 8);
    const AlignEncoders enc = init_encoders(4, 32, 3);
    // A perturbed teacher makes the KL term nonzero.
    MomentumTeacher teacher = make_teacher(enc.vision.params, 0.995);
    Rng rng(10);
    for (auto& it : teacher.shadow.items()) {
        for (auto& v : it.value.values()) {
            v += 0.05 * rng.normal();
        }
    }
    for (double alpha : {0.0, 0.25, 0.4, 1.0}) {
        const AlignLossReport r = total_loss(batch, enc, teacher, 0.07, alpha);
        CHECK(r.alpha == alpha);
        CHECK(r.loss_t > 1e-6);
        CHECK(std::abs(r.total - (r.loss_at + (1 - alpha) * r.loss_av + 0.5 * alpha * r.loss_t)) < 1e-6);
        CHECK(r.recomposition_error() < 1e-6);
    }
    const auto r0 = total_loss(batch, enc, teacher, 0.07, 0.0);
    CHECK(std::abs(r0.total - (r0.loss_at + r0.loss_av)) < 1e-12);
    const auto r1 = total_loss(batch, enc, teacher, 0.07, 1.0);
    CHECK(std::abs(r1.total - (r1.loss_at + 0.5 * r1.loss_t)) < 1e-12);
    CHECK_THROWS_AS(total_loss(batch, enc, teacher, 0.07, 1.5), ArgumentError);
    CHECK_THROWS_AS(total_loss(batch, enc, teacher, 0.0, 0.4), ArgumentError);
    CHECK_THROWS_AS(total_loss(batch_from(ds, 1), enc, teacher, 0.07, 0.4), ArgumentError);
}

TEST_CASE("teacher equal to the vision encoder makes the KL term vanish") {
    const auto ds = tiny_dataset();
    const auto batch = batch_from(ds, 8);
    const AlignEncoders enc = init_encoders(4, 32, 4);
    const MomentumTeacher teacher = make_teacher(enc.vision.params, 0.995);
    for (double alpha : {0.0, 0.4, 1.0}) {
        const auto r = total_loss(batch, enc, teacher, 0.07, alpha);
        CHECK(std::abs(r.loss_t) < 1e-10);
        CHECK(std::abs(r.total - (r.loss_at + (1 - alpha) * r.loss_av)) < 1e-9);
    }
}

TEST_CASE("pseudo-targets carry no gradient into the teacher") {
    const auto ds = tiny_dataset();
    const auto batch = batch_from(ds, 8);
    const AlignEncoders enc = init_encoders(4, 32, 5);
    MomentumTeacher teacher = make_teacher(enc.vision.params, 0.995);
    Rng rng(11);
    for (auto& it : teacher.shadow.items()) {
        for (auto& v : it.value.values()) {
            v += 0.05 * rng.normal();
        }
    }
    LossGraph g = build_total_loss(batch, enc, teacher, 0.07, 0.4);
    ad::backward(g.total);
    for (const Tensor& grad : g.teacher_vars.grads()) {
        for (double v : grad.values()) {
            CHECK(v == 0.0);
        }
    }
    double audio_mass = 0.0;
    for (const Tensor& grad : g.audio_vars.grads()) {
        for (double v : grad.values()) {
            audio_mass += std::abs(v);
        }
    }
    CHECK(audio_mass > 0.0);
}

// At alpha=0 the objective has no stop-gradient path, so the analytic gradient
// is the full derivative.
TEST_CASE("total loss gradient with respect to the audio encoder") {
    const auto ds = tiny_dataset();
    const auto batch = batch_from(ds, 6);
    const AlignEncoders enc = init_encoders(4, 32, 6);
    MomentumTeacher teacher = make_teacher(enc.vision.params, 0.995);
    Rng rng(12);
    for (auto& v : teacher.shadow.get("proj.w").values()) {
        v += 0.05 * rng.normal();
    }
    LossGraph g = build_total_loss(batch, enc, teacher, 0.07, 0.0);
    ad::backward(g.total);
    const auto grads = g.audio_vars.grads();
    const auto& items = enc.audio.params.items();
    for (std::size_t k = 0; k < items.size(); ++k) {
        auto f = [&](const Tensor& x) {
            AlignEncoders e = enc;
            e.audio.params.get(items[k].name) = x;
            return total_loss(batch, e, teacher, 0.07, 0.0).total;
        };
        CAPTURE(items[k].name);
        CHECK(test::check_gradient(items[k].value, grads[k], f, 3, 20 + k).max_rel_error < 1e-4);
    }
}

TEST_CASE("training is deterministic and updates only the audio encoder") {
    const auto ds = tiny_dataset();
    const AlignConfig cfg = tiny_config();
    const AlignCheckpoint init = init_checkpoint(ds, cfg);
    const AlignCheckpoint a = train_align(ds, cfg);
    const AlignCheckpoint b = train_align(ds, cfg);
    REQUIRE(a.history.size() == b.history.size());
    CHECK(a.history.size() == static_cast<std::size_t>(cfg.epochs * a.steps_per_epoch));
    for (std::size_t i = 0; i < a.history.size(); ++i) {
        CHECK(a.history[i].total == b.history[i].total);
        CHECK(a.history[i].recomposition_error() < 1e-6);
    }
    CHECK(a.encoders.audio.params == b.encoders.audio.params);
    CHECK(a.encoders.vision.params.checksum() == init.encoders.vision.params.checksum());
    CHECK(a.encoders.text.params.checksum() == init.encoders.text.params.checksum());
    CHECK(!(a.encoders.audio.params == init.encoders.audio.params));
    CHECK(a.label_names == std::vector<std::string>{"sea", "thunder", "fire", "rain"});

    AlignConfig other = cfg;
    other.seed = 8;
    CHECK(train_align(ds, other).history.back().total != a.history.back().total);
}

TEST_CASE("epoch means and config validation") {
    const auto ds = tiny_dataset();
    const AlignCheckpoint ck = train_align(ds, tiny_config());
    const auto em = epoch_mean_totals(ck);
    REQUIRE(em.size() == 3);
    double first = 0.0;
    for (int s = 0; s < ck.steps_per_epoch; ++s) {
        first += ck.history[s].total;
    }
    CHECK(em[0] == doctest::Approx(first / ck.steps_per_epoch).epsilon(1e-12));

    AlignConfig bad = tiny_config();
    bad.alpha = 1.5;
    CHECK_THROWS_AS(train_align(ds, bad), ArgumentError);
    bad = tiny_config();
    bad.tau = -1;
    CHECK_THROWS_AS(train_align(ds, bad), ArgumentError);
    bad = tiny_config();
    bad.batch_size = 1;
    CHECK_THROWS_AS(bad.validate(), ArgumentError);

    synth::Dataset empty = ds;
    empty.samples.clear();
    CHECK_THROWS_AS(train_align(empty, tiny_config()), ArgumentError);
}
