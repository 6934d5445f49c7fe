#include <doctest.h>

#include <cmath>

#include "aai/error.hpp"
#include "aai/inject.hpp"
#include "aai/synthdata.hpp"
#include "fixtures.hpp"
#include "support.hpp"

using namespace aai;
using namespace aai::inject;

namespace {

adapt::PseudoToken fixed_token(int seed = 1) {
    Rng rng(seed);
    adapt::PseudoToken t;
    t.f_a = rng.normal_tensor({32}, 0.2);
    t.f_adapter = rng.normal_tensor({32}, 0.01);
    return t;
}

Tensor random_maps(int rows, int cols, Rng& rng) {
    Tensor m(Shape{rows, cols});
    for (int i = 0; i < rows; ++i) {
        double s = 0.0;
        for (int j = 0; j < cols; ++j) {
            m.at(i, j) = rng.uniform() + 1e-3;
            s += m.at(i, j);
        }
        for (int j = 0; j < cols; ++j) {
            m.at(i, j) /= s;
        }
    }
    return m;
}

void check_stochastic(const Tensor& m) {
    for (int i = 0; i < m.dim(0); ++i) {
        CHECK(std::abs(test::row_sum(m, i) - 1.0) <= 1e-5);
        for (int j = 0; j < m.dim(1); ++j) {
            CHECK(m.at(i, j) >= 0.0);
        }
    }
}

double pixel_l2(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    return std::sqrt(s);
}

}  // namespace

TEST_CASE("two-token merge worked example") {
    const Tensor s(Shape{2, 2}, std::vector<double>{0.6, 0.4, 0.2, 0.8});
    const Tensor star(Shape{2, 2}, std::vector<double>{0.1, 0.9, 0.5, 0.5});
    EditPlan plan;
    plan.index_proj = {{0, 0}};
    plan.star_index = 1;
    const Tensor out = sound_guided_edit_step(s, star, plan);
    CHECK(out.at(0, 0) == doctest::Approx(0.4).epsilon(1e-4));
    CHECK(out.at(0, 1) == doctest::Approx(0.6).epsilon(1e-4));
    CHECK(std::abs(out.at(1, 0) - 0.2857) < 1e-4);
    CHECK(std::abs(out.at(1, 1) - 0.7143) < 1e-4);

    plan.renormalize = false;
    const Tensor raw = sound_guided_edit_step(s, star, plan);
    CHECK(raw == Tensor(Shape{2, 2}, std::vector<double>{0.6, 0.9, 0.2, 0.5}));
}

TEST_CASE("merge identity and star column") {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const int len = 3 + trial % 4;
        const Tensor s = random_maps(64, len, rng);
        const Tensor t = random_maps(64, len, rng);
        EditPlan id;
        for (int j = 0; j < len; ++j) {
            id.index_proj[j] = j;
        }
        id.renormalize = false;
        CHECK(sound_guided_edit_step(s, t, id) == s);

        EditPlan with_star;
        for (int j = 0; j < len - 1; ++j) {
            with_star.index_proj[j] = j;
        }
        with_star.star_index = len - 1;
        const Tensor out = sound_guided_edit_step(s, t, with_star);
        check_stochastic(out);
        with_star.renormalize = false;
        const Tensor raw = sound_guided_edit_step(s, t, with_star);
        for (int i = 0; i < 64; ++i) {
            CHECK(raw.at(i, len - 1) == t.at(i, len - 1));
            for (int j = 0; j < len - 1; ++j) {
                CHECK(raw.at(i, j) == s.at(i, j));
            }
        }
    }
}

TEST_CASE("renormalization") {
    Tensor rows(Shape{2, 3}, std::vector<double>{0.2, 0.3, 0.5, 1.0, 1.0, 2.0});
    const double first = rows.at(0, 1);
    renormalize_rows(rows);
    CHECK(rows.at(0, 1) == first);
    CHECK(rows.at(1, 2) == doctest::Approx(0.5).epsilon(1e-15));
    Tensor dead(Shape{1, 2}, 0.0);
    CHECK_THROWS_AS(renormalize_rows(dead), ArgumentError);
}

TEST_CASE("reweighting") {
    const Tensor row(Shape{1, 2}, std::vector<double>{0.5, 0.5});
    const Tensor up = reweight_step(row, {2.0, {1}});
    CHECK(std::abs(up.at(0, 0) - 0.3333) < 1e-4);
    CHECK(std::abs(up.at(0, 1) - 0.6667) < 1e-4);
    CHECK(reweight_step(row, {2.0, {1}}, false) == Tensor(Shape{1, 2}, std::vector<double>{0.5, 1.0}));

    Rng rng(3);
    const Tensor m = random_maps(64, 5, rng);
    CHECK(reweight_step(m, {1.0, {1, 3}}) == m);
    const Tensor zero = reweight_step(m, {0.0, {1, 3}});
    check_stochastic(zero);
    for (int i = 0; i < 64; ++i) {
        CHECK(zero.at(i, 1) == 0.0);
        CHECK(zero.at(i, 3) == 0.0);
        const double rest = m.at(i, 0) + m.at(i, 2) + m.at(i, 4);
        CHECK(zero.at(i, 2) == doctest::Approx(m.at(i, 2) / rest).epsilon(1e-12));
    }
    CHECK_THROWS_AS(reweight_step(m, {2.5, {1}}), ArgumentError);
    CHECK_THROWS_AS(reweight_step(m, {-0.1, {1}}), ArgumentError);
    CHECK_THROWS_AS(reweight_step(m, {1.5, {5}}), ArgumentError);
}

TEST_CASE("reweighted mass is nondecreasing in scale") {
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        const int len = 2 + trial % 6;
        const Tensor m = random_maps(16, len, rng);
        const std::set<int> idx{rng.uniform_int(len)};
        std::vector<double> prev(16, -1.0);
        for (double scale : {0.0, 0.5, 1.0, 1.5, 2.0}) {
            const Tensor out = reweight_step(m, {scale, idx});
            check_stochastic(out);
            for (int i = 0; i < 16; ++i) {
                double mass = 0.0;
                for (int j : idx) {
                    mass += out.at(i, j);
                }
                CHECK(mass >= prev[i] - 1e-15);
                prev[i] = mass;
            }
        }
    }
}

TEST_CASE("prompt assembly") {
    const auto& m = test::tiny_model();
    const auto tok = fixed_token();
    const auto spec = parse_prompt(m, "a photo of *", tok);
    const auto cond = assemble_conditioning(m, spec);
    CHECK(*cond.slot_index == 3);
    CHECK(cond.tokens.slice0(3) == tok.combined());
    const auto plain = assemble_conditioning(m, parse_prompt(m, "a photo of <label:1>"));
    CHECK(!plain.slot_index);
    CHECK(plain.tokens == diff::label_conditioning(m, "a photo of {}", 1).tokens);
    CHECK_THROWS_AS(parse_prompt(m, "a * b *", tok), ArgumentError);
    CHECK_THROWS_AS(parse_prompt(m, "a photo of *"), ArgumentError);
    CHECK_THROWS_AS(parse_prompt(m, "a zebra"), ArgumentError);
}

TEST_CASE("edit plans align prompts by longest common subsequence") {
    const auto& m = test::tiny_model();
    const auto tok = fixed_token();
    const auto src = parse_prompt(m, "a photo of <label:0>");
    const auto plan = make_edit_plan(src, parse_prompt(m, "a photo of <label:0> *", tok));
    CHECK(plan.star_index == 4);
    CHECK(plan.index_proj == std::map<int, int>{{0, 0}, {1, 1}, {2, 2}, {3, 3}});
    CHECK(plan.fresh.empty());

    const auto swapped = make_edit_plan(parse_prompt(m, "a * of the city", tok), parse_prompt(m, "a * of the city", tok));
    CHECK(swapped.star_index == 1);
    CHECK(!swapped.index_proj.count(1));  // the star never matches
    CHECK(swapped.index_proj.at(4) == 4);

    CHECK_THROWS_AS(make_edit_plan(src, parse_prompt(m, "a painting of <label:0> *", tok)), ArgumentError);
    const auto loose = make_edit_plan(src, parse_prompt(m, "a painting of <label:0> *", tok), 1.0, true);
    CHECK(loose.fresh == std::set<int>{1});
    CHECK(loose.index_proj.at(2) == 2);

    const auto sty = stylize_plan(m, "a photo of <label:2>", tok);
    CHECK(sty.star_index == 8);
    CHECK(sty.fresh == std::set<int>{4, 5, 6, 7});
    CHECK_THROWS_AS(make_edit_plan(src, src, 1.5), ArgumentError);
    CHECK_THROWS_AS(stylize_plan(m, "a photo of *", tok), ArgumentError);
}

TEST_CASE("edit identity and hook transparency") {
    const auto& m = test::tiny_model();
    const auto tok = fixed_token();
    const auto src = parse_prompt(m, "a photo of <label:1>");
    EditPlan same = make_edit_plan(src, src);
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const EditResult r = edit(m, same, seed);
        CHECK(r.edited == r.source);
        CHECK(r.source == diff::sample(m, assemble_conditioning(m, src), seed, false).image);
    }

    const auto tgt = parse_prompt(m, "a photo of <label:1> *", tok);
    const EditResult none = edit(m, make_edit_plan(src, tgt, 0.0), 5);
    CHECK(none.edited == generate(m, tgt, 5));
    CHECK(generate(m, tgt, 5) == diff::sample(m, assemble_conditioning(m, tgt), 5, false).image);

    const EditResult a = edit(m, make_edit_plan(src, tgt), 6);
    const EditResult b = edit(m, make_edit_plan(src, tgt), 6);
    CHECK(a.edited == b.edited);
    CHECK(!(a.edited == a.source));

    const auto sty_a = stylize(m, "a photo of <label:0>", tok, 7);
    CHECK(sty_a.edited == stylize(m, "a photo of <label:0>", tok, 7).edited);
    CHECK(sty_a.source == generate(m, parse_prompt(m, "a photo of <label:0>"), 7));
}

TEST_CASE("merged attention stays stochastic during an edit") {
    const auto& m = test::tiny_model();
    const auto tok = fixed_token();
    EditPlan plan = make_edit_plan(parse_prompt(m, "a photo of <label:1>"), parse_prompt(m, "a photo of <label:1> *", tok));
    const auto src = assemble_conditioning(m, plan.source);
    const auto tgt = assemble_conditioning(m, plan.target);
    diff::Sampler s(m, src, 3), t(m, tgt, 3);
    while (!s.done()) {
        const Tensor sm = s.step();
        const diff::AttentionHook hook = [&](int, Tensor& maps) { maps = sound_guided_edit_step(sm, maps, plan); };
        check_stochastic(t.step(&hook));
    }
}

TEST_CASE("reweighted generation") {
    const auto& m = test::tiny_model();
    const auto tok = fixed_token();
    const auto spec = parse_prompt(m, "a photo of *", tok);
    CHECK(generate(m, spec, 4, ReweightSpec{1.0, {3}}) == generate(m, spec, 4));
    CHECK(!(generate(m, spec, 4, ReweightSpec{2.0, {3}}) == generate(m, spec, 4)));
    CHECK_THROWS_AS(generate(m, spec, 4, ReweightSpec{1.0, {9}}), ArgumentError);

    EditPlan plan = make_edit_plan(parse_prompt(m, "a photo of <label:2>"), parse_prompt(m, "a photo of <label:2> *", tok));
    plan.reweight = ReweightSpec{1.5, {4}};
    const auto after = edit(m, plan, 2).edited;
    plan.reweight_order = ReweightOrder::before_merge;
    const auto before = edit(m, plan, 2).edited;
    CHECK(!(after == before));
}

TEST_CASE("an edit stays nearer its source than an unconstrained generation") {
    const auto& m = test::tiny_model();
    const auto tok = fixed_token();
    const auto src = parse_prompt(m, "a photo of <label:0>");
    const auto tgt = parse_prompt(m, "a photo of <label:0> *", tok);
    int wins = 0;
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
        const EditResult r = edit(m, make_edit_plan(src, tgt), seed);
        wins += pixel_l2(r.edited, r.source) < pixel_l2(generate(m, tgt, seed), r.source) ? 1 : 0;
    }
    CHECK(wins >= 6);
}
