#include <doctest.h>

#include <cmath>

#include "aai/diffusion.hpp"
#include "aai/error.hpp"
#include "fixtures.hpp"
#include "support.hpp"

using namespace aai;
using namespace aai::diff;

namespace {

Tensor cumulative_alpha_bar(const std::vector<double>& betas) {
    Tensor ab(Shape{static_cast<int>(betas.size())});
    double prod = 1.0;
    for (std::size_t i = 0; i < betas.size(); ++i) {
        prod *= 1.0 - betas[i];
        ab[i] = prod;
    }
    return ab;
}

std::vector<enc::PromptToken> parse(const DiffusionModel& m, const std::string& s) {
    return enc::tokenize(s, m.label_names);
}

}  // namespace

TEST_CASE("linear schedule") {
    const NoiseSchedule s = NoiseSchedule::linear(100, 1e-4, 0.02);
    REQUIRE(s.T == 100);
    CHECK(s.betas.front() == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(s.betas.back() == doctest::Approx(0.02).epsilon(1e-12));
    const Tensor ab = cumulative_alpha_bar(s.betas);
    for (int t = 0; t < 100; ++t) {
        CHECK(s.betas[t] > 0.0);
        CHECK(s.betas[t] < 1.0);
        CHECK(s.betas[t] == doctest::Approx(1e-4 + (0.02 - 1e-4) * t / 99.0).epsilon(1e-12));
        CHECK(s.alphas[t] == doctest::Approx(1.0 - s.betas[t]).epsilon(1e-15));
        CHECK(s.alpha_bars[t] == doctest::Approx(ab[t]).epsilon(1e-12));
        if (t > 0) {
            CHECK(s.alpha_bars[t] < s.alpha_bars[t - 1]);
        }
    }
    CHECK(s.alpha_bars[0] >= 0.999);
    CHECK_THROWS_AS(NoiseSchedule::linear(0, 1e-4, 0.02), ArgumentError);
    CHECK_THROWS_AS(NoiseSchedule::linear(10, 0.0, 0.02), ArgumentError);
    CHECK_THROWS_AS(NoiseSchedule::linear(10, 0.1, 1.0), ArgumentError);
}

TEST_CASE("forward diffusion closed form") {
    const NoiseSchedule s = NoiseSchedule::linear(100, 1e-4, 0.02);
    Rng rng(1);
    const Tensor z0 = rng.normal_tensor({3, 16, 16}, 0.5);
    const Tensor zero(z0.shape(), 0.0);
    const Tensor at0 = forward_diffuse(z0, 0, zero, s);
    CHECK(max_abs_diff(at0, z0) < 1e-4 * 2);
    for (std::size_t i = 0; i < z0.size(); ++i) {
        CHECK(at0[i] == std::sqrt(s.alpha_bars[0]) * z0[i]);
    }
    CHECK(max_abs_diff(forward_diffuse(z0, 0, zero, s), z0) < 1e-4);
    for (int t : {10, 50, 99}) {
        const Tensor zt = forward_diffuse(z0, t, zero, s);
        for (std::size_t i = 0; i < z0.size(); ++i) {
            CHECK(zt[i] == std::sqrt(s.alpha_bars[t]) * z0[i]);
        }
    }
    CHECK_THROWS_AS(forward_diffuse(z0, 100, zero, s), ArgumentError);
    CHECK_THROWS_AS(forward_diffuse(z0, -1, zero, s), ArgumentError);
    CHECK_THROWS_AS(forward_diffuse(z0, 5, Tensor(Shape{3, 8, 8}), s), ArgumentError);
}

TEST_CASE("forward diffusion marginal at the last step") {
    const NoiseSchedule s = NoiseSchedule::linear(100, 1e-4, 0.02);
    const int t = 99;
    // Entries of magnitude one keep the 5% relative band well above sampling error.
    Tensor z0(Shape{3, 4, 4});
    for (std::size_t i = 0; i < z0.size(); ++i) {
        z0[i] = i % 2 ? 1.0 : -1.0;
    }
    Rng rng(2);
    const int draws = 10000;
    std::vector<double> sum(z0.size(), 0.0), sq(z0.size(), 0.0);
    for (int d = 0; d < draws; ++d) {
        const Tensor zt = forward_diffuse(z0, t, rng.normal_tensor(z0.shape()), s);
        for (std::size_t i = 0; i < z0.size(); ++i) {
            sum[i] += zt[i];
            sq[i] += zt[i] * zt[i];
        }
    }
    const double mean_scale = std::sqrt(s.alpha_bars[t]);
    const double var = 1.0 - s.alpha_bars[t];
    for (std::size_t i = 0; i < z0.size(); ++i) {
        const double m = sum[i] / draws;
        const double v = sq[i] / draws - m * m;
        CHECK(std::abs(m - mean_scale * z0[i]) <= 0.05 * std::abs(mean_scale * z0[i]));
        CHECK(std::abs(v - var) <= 0.05 * var);
    }
}

TEST_CASE("denoising loss with stub predictors") {
    const NoiseSchedule s = NoiseSchedule::linear(100, 1e-4, 0.02);
    Rng data(3);
    const Tensor z0 = data.normal_tensor({4, 3, 16, 16}, 0.3);
    const ad::Var tokens = ad::constant(Tensor(Shape{4, 2, 32}, 0.0));

    SUBCASE("a predictor that recovers eps exactly has zero loss") {
        const EpsPredictor exact = [&](const ad::Var& zt, std::span<const int> t, const ad::Var&) {
            Tensor eps(zt.shape());
            const std::size_t item = eps.size() / t.size();
            for (std::size_t b = 0; b < t.size(); ++b) {
                const double a = std::sqrt(s.alpha_bars[t[b]]);
                const double sd = std::sqrt(1.0 - s.alpha_bars[t[b]]);
                for (std::size_t i = 0; i < item; ++i) {
                    const std::size_t k = b * item + i;
                    eps[k] = (zt.value()[k] - a * z0[k]) / sd;
                }
            }
            return ad::constant(eps);
        };
        Rng rng(4);
        for (int i = 0; i < 5; ++i) {
            CHECK(ldm_loss(exact, s, z0, tokens, rng).value().item() < 1e-18);
        }
    }
    SUBCASE("a zero predictor has loss E[eps^2] = 1") {
        const EpsPredictor zero = [](const ad::Var& zt, std::span<const int>, const ad::Var&) {
            return ad::constant(Tensor(zt.shape(), 0.0));
        };
        Rng rng(5);
        const Tensor one(Shape{1, 3, 16, 16}, 0.0);
        double mean = 0.0;
        const int draws = 1000;
        for (int i = 0; i < draws; ++i) {
            mean += ldm_loss(zero, s, one, ad::constant(Tensor(Shape{1, 2, 32})), rng).value().item() / draws;
        }
        CHECK(std::abs(mean - 1.0) < 0.05);
    }
}

TEST_CASE("timesteps are drawn uniformly over the whole schedule") {
    const NoiseSchedule s = NoiseSchedule::linear(10, 1e-4, 0.02);
    std::vector<int> counts(10, 0);
    const EpsPredictor spy = [&](const ad::Var& zt, std::span<const int> t, const ad::Var&) {
        for (int v : t) {
            ++counts.at(v);
        }
        return ad::constant(Tensor(zt.shape(), 0.0));
    };
    Rng rng(6);
    for (int i = 0; i < 500; ++i) {
        ldm_loss(spy, s, Tensor(Shape{4, 3, 2, 2}), ad::constant(Tensor(Shape{4, 1, 4})), rng);
    }
    for (int c : counts) {
        CHECK(c > 140);
        CHECK(c < 260);
    }
}

TEST_CASE("denoising loss gradient with respect to conditioning tokens") {
    const DiffusionModel& m = test::tiny_model();
    const auto& ds = test::tiny_dataset();
    const Tensor z0 = stack(std::vector<Tensor>{ds.samples[0].frames[0], ds.samples[9].frames[1]});
    const auto c0 = label_conditioning(m, "a photo of {}", 0);
    const auto c1 = label_conditioning(m, "a photo of {}", 1);
    const Tensor tok0 = stack(std::vector<Tensor>{c0.tokens, c1.tokens});

    const std::uint64_t seed = 77;
    auto f = [&](const Tensor& tok) {
        Rng rng(seed);
        return ldm_loss(m, z0, ad::constant(tok), rng).value().item();
    };
    const ad::Var tok = ad::parameter(tok0);
    Rng rng(seed);
    ad::backward(ldm_loss(m, z0, tok, rng));
    const auto r = test::check_gradient(tok0, tok.grad(), f, 12, 8);
    CHECK(r.probes >= 10);
    CHECK(r.max_rel_error < 1e-4);

    SUBCASE("every element of a single token") {
        // The gradient of one token row (all of its d entries) is checked directly.
        const int row = 3;
        double worst = 0.0;
        Tensor x = tok0;
        for (int j = 0; j < 32; ++j) {
            const std::size_t i = static_cast<std::size_t>(row) * 32 + j;
            const double keep = x[i];
            x[i] = keep + 1e-5;
            const double up = f(x);
            x[i] = keep - 1e-5;
            const double down = f(x);
            x[i] = keep;
            const double num = (up - down) / 2e-5;
            const double a = tok.grad()[i];
            worst = std::max(worst, std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-6}));
        }
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("denoiser parameter gradient matches central differences") {
    const DiffusionModel& m = test::tiny_model();
    const auto& ds = test::tiny_dataset();
    const Tensor z0 = stack(std::vector<Tensor>{ds.samples[3].frames[0]});
    const auto c = label_conditioning(m, "a photo of {}", 0);
    const Tensor tok = c.tokens.reshaped({1, c.length(), 32});
    const Tensor& mix = m.text.params.get("mix.w");
    const std::uint64_t seed = 5;
    const ParamVars vars(m.denoiser, true);
    {
        Rng rng(seed);
        ad::backward(ldm_loss(
            [&](const ad::Var& zt, std::span<const int> t, const ad::Var& k) {
                return denoiser_forward(vars, mix, zt, t, k);
            },
            m.schedule, z0, ad::constant(tok), rng));
    }
    const auto grads = vars.grads();
    for (std::size_t k = 0; k < m.denoiser.size(); ++k) {
        const std::string name = m.denoiser.items()[k].name;
        auto f = [&](const Tensor& x) {
            DiffusionModel mm = m;
            mm.denoiser.get(name) = x;
            Rng rng(seed);
            return ldm_loss(mm, z0, ad::constant(tok), rng).value().item();
        };
        CAPTURE(name);
        CHECK(test::check_gradient(m.denoiser.items()[k].value, grads[k], f, 2, 50 + k).max_rel_error < 1e-4);
    }
}

TEST_CASE("prompt encoding") {
    const DiffusionModel& m = test::tiny_model();
    const auto plain = encode_prompt(m, parse(m, "a photo of <label:3>"));
    CHECK(plain.length() == 4);
    CHECK(!plain.slot_index.has_value());
    CHECK(plain.tokens.slice0(3) == m.text.params.get("labels").slice0(3));

    Rng rng(9);
    const Tensor v = rng.normal_tensor({32});
    const auto slot = encode_prompt(m, parse(m, "a photo of *"), &v);
    REQUIRE(slot.slot_index.has_value());
    CHECK(*slot.slot_index == 3);
    CHECK(slot.tokens.slice0(3) == v);

    const auto appended = encode_prompt(m, parse(m, "a photo of *"), &v, true);
    CHECK(appended.length() == 5);
    CHECK(*appended.slot_index == 4);
    CHECK(appended.tokens.slice0(4) == v);
    CHECK(appended.tokens.slice0(3) == m.text.params.get("words").slice0(m.text.params.get("words").dim(0) - 1));

    CHECK_THROWS_AS(encode_prompt(m, parse(m, "a photo of *")), ArgumentError);
    CHECK_THROWS_AS(encode_prompt(m, parse(m, "a * of *"), &v), ArgumentError);
    const Tensor short_v(Shape{8});
    CHECK_THROWS_AS(encode_prompt(m, parse(m, "a photo of *"), &short_v), ArgumentError);
    CHECK(label_conditioning(m, "a sight of {}", 2).tokens == encode_prompt(m, parse(m, "a sight of <label:2>")).tokens);
    CHECK_THROWS_AS(label_conditioning(m, "a photo", 0), ArgumentError);
    CHECK_THROWS_AS(label_conditioning(m, "a photo of {}", 9), ArgumentError);
}

TEST_CASE("sampling determinism and attention records") {
    const DiffusionModel& m = test::tiny_model();
    const auto cond = label_conditioning(m, "a photo of {}", 1);
    const std::uint64_t before = m.denoiser.checksum();
    const SampleResult a = sample(m, cond, 11, true);
    const SampleResult b = sample(m, cond, 11, true);
    CHECK(a.image == b.image);
    REQUIRE(a.records.size() == static_cast<std::size_t>(m.schedule.T));
    for (std::size_t i = 0; i < a.records.size(); ++i) {
        CHECK(a.records[i].step == m.schedule.T - 1 - static_cast<int>(i));
        CHECK(a.records[i].maps == b.records[i].maps);
        const Tensor& maps = a.records[i].maps;
        REQUIRE(maps.shape() == Shape{64, cond.length()});
        for (int r = 0; r < 64; ++r) {
            CHECK(std::abs(test::row_sum(maps, r) - 1.0) < 1e-5);
            for (int j = 0; j < cond.length(); ++j) {
                CHECK(maps.at(r, j) >= 0.0);
            }
        }
    }
    CHECK(a.image.shape() == Shape{3, 16, 16});
    for (double v : a.image.values()) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }
    CHECK(sample(m, cond, 11, false).records.empty());
    CHECK(sample(m, cond, 11, false).image == a.image);
    CHECK(!(sample(m, cond, 12, false).image == a.image));
    CHECK(m.denoiser.checksum() == before);
}

TEST_CASE("an identity hook is transparent and a rewriting hook is honored") {
    const DiffusionModel& m = test::tiny_model();
    const auto cond = label_conditioning(m, "a photo of {}", 2);
    const SampleResult plain = sample(m, cond, 3, true);
    int calls = 0;
    const AttentionHook noop = [&](int, Tensor&) { ++calls; };
    const SampleResult hooked = sample(m, cond, 3, true, &noop);
    CHECK(calls == m.schedule.T);
    CHECK(hooked.image == plain.image);

    const AttentionHook uniform = [](int, Tensor& maps) { maps.fill(1.0 / maps.dim(1)); };
    const SampleResult flat = sample(m, cond, 3, true, &uniform);
    CHECK(flat.records.front().maps.at(0, 0) == doctest::Approx(1.0 / cond.length()));
    CHECK(!(flat.image == plain.image));
}

TEST_CASE("stepwise sampler matches the one-shot sampler") {
    const DiffusionModel& m = test::tiny_model();
    const auto cond = label_conditioning(m, "a painting of {}", 0);
    Sampler s(m, cond, 21);
    int steps = 0;
    while (!s.done()) {
        CHECK(s.timestep() == m.schedule.T - 1 - steps);
        s.step();
        ++steps;
    }
    CHECK(steps == m.schedule.T);
    CHECK(s.image() == sample(m, cond, 21, false).image);
    CHECK_THROWS_AS(s.step(), ArgumentError);
}

TEST_CASE("training is deterministic per seed") {
    DiffusionConfig c;
    c.T = 10;
    c.steps = 6;
    c.batch_size = 4;
    const auto& text = test::tiny_align().encoders.text;
    const auto a = train_diffusion(test::tiny_dataset(), text, c);
    const auto b = train_diffusion(test::tiny_dataset(), text, c);
    CHECK(a.model.denoiser == b.model.denoiser);
    CHECK(a.loss_history == b.loss_history);
    CHECK(a.loss_history.size() == 6);
    CHECK(a.model.text.params == text.params);
    c.seed = 8;
    CHECK(!(train_diffusion(test::tiny_dataset(), text, c).model.denoiser == a.model.denoiser));

    DiffusionConfig bad = c;
    bad.T = 0;
    CHECK_THROWS_AS(train_diffusion(test::tiny_dataset(), text, bad), ArgumentError);
    synth::Dataset empty = test::tiny_dataset();
    empty.samples.clear();
    CHECK_THROWS_AS(train_diffusion(empty, text, c), ArgumentError);
}

TEST_CASE("loss decreases over a short run") {
    const auto& h = test::tiny_diffusion().loss_history;
    REQUIRE(h.size() == 40);
    double first = 0.0, last = 0.0;
    for (int i = 0; i < 10; ++i) {
        first += h[i] / 10;
        last += h[h.size() - 1 - i] / 10;
    }
    CHECK(last < first);
}
