#include "aai/inject.hpp"

#include <algorithm>
#include <cmath>

#include "aai/error.hpp"

namespace aai::inject {

namespace {

using Kind = enc::PromptToken::Kind;

int placeholder_id() { return static_cast<int>(enc::vocabulary().size()) - 1; }

int count_stars(const std::vector<enc::PromptToken>& toks) {
    return static_cast<int>(
        std::count_if(toks.begin(), toks.end(), [](const enc::PromptToken& t) { return t.kind == Kind::star; }));
}

}  // namespace

PromptSpec parse_prompt(const diff::DiffusionModel& model, const std::string& prompt,
                        std::optional<adapt::PseudoToken> pseudo, Role role, bool append_token) {
    PromptSpec spec{enc::tokenize(prompt, model.label_names), std::move(pseudo), role, append_token};
    const int stars = count_stars(spec.tokens);
    require(stars <= 1, "a prompt may contain at most one * slot: '" + prompt + "'");
    require(stars == 0 || spec.pseudo.has_value(), "prompt '" + prompt + "' has a * slot but no pseudo-token");
    return spec;
}

std::vector<Position> positions(const PromptSpec& spec) {
    std::vector<Position> out;
    bool appended = false;
    for (const auto& t : spec.tokens) {
        if (t.kind == Kind::star && spec.append_token) {
            out.push_back({Kind::word, placeholder_id()});
            appended = true;
        } else {
            out.push_back({t.kind, t.kind == Kind::star ? 0 : t.id});
        }
    }
    if (appended) {
        out.push_back({Kind::star, 0});
    }
    return out;
}

diff::ConditioningSequence assemble_conditioning(const diff::DiffusionModel& model, const PromptSpec& spec) {
    const int stars = count_stars(spec.tokens);
    require(stars <= 1, "a prompt may contain at most one * slot");
    require(stars == 0 || spec.pseudo.has_value(), "the prompt has a * slot but no pseudo-token");
    if (stars == 0) {
        return diff::encode_prompt(model, spec.tokens);
    }
    const Tensor slot = spec.pseudo->combined();
    return diff::encode_prompt(model, spec.tokens, &slot, spec.append_token);
}

void ReweightSpec::validate(int length) const {
    require(std::isfinite(scale) && scale >= 0.0 && scale <= 2.0,
            "reweight scale " + std::to_string(scale) + " outside [0,2]");
    for (int j : scale_index) {
        require(j >= 0 && j < length, "reweight index " + std::to_string(j) + " outside a sequence of length " +
                                          std::to_string(length));
    }
}

void EditPlan::validate(int source_length, int target_length) const {
    require(injection_fraction >= 0.0 && injection_fraction <= 1.0, "injection_fraction must be in [0,1]");
    if (star_index) {
        require(*star_index >= 0 && *star_index < target_length, "star index outside the target sequence");
        require(!index_proj.count(*star_index), "the A* position must not be projected onto the source");
    }
    for (int j = 0; j < target_length; ++j) {
        if ((star_index && j == *star_index) || fresh.count(j)) {
            continue;
        }
        const auto it = index_proj.find(j);
        require(it != index_proj.end(), "index projection has no source position for target position " +
                                            std::to_string(j));
        require(it->second >= 0 && it->second < source_length,
                "index projection maps target position " + std::to_string(j) + " outside the source");
    }
    if (reweight) {
        reweight->validate(target_length);
    }
}

EditPlan make_edit_plan(PromptSpec source, PromptSpec target, double injection_fraction, bool allow_fresh) {
    const auto src = positions(source);
    const auto tgt = positions(target);
    const int n = static_cast<int>(src.size()), m = static_cast<int>(tgt.size());
    auto same = [&](int i, int j) { return src[i] == tgt[j] && src[i].kind != Kind::star; };
    std::vector<std::vector<int>> lcs(n + 1, std::vector<int>(m + 1, 0));
    for (int i = n - 1; i >= 0; --i) {
        for (int j = m - 1; j >= 0; --j) {
            lcs[i][j] = same(i, j) ? lcs[i + 1][j + 1] + 1 : std::max(lcs[i + 1][j], lcs[i][j + 1]);
        }
    }
    EditPlan plan;
    for (int i = 0, j = 0; i < n && j < m;) {
        if (same(i, j) && lcs[i][j] == lcs[i + 1][j + 1] + 1) {
            plan.index_proj[j] = i;
            ++i;
            ++j;
        } else if (lcs[i + 1][j] >= lcs[i][j + 1]) {
            ++i;
        } else {
            ++j;
        }
    }
    for (int j = 0; j < m; ++j) {
        if (tgt[j].kind == Kind::star) {
            plan.star_index = j;
        } else if (!plan.index_proj.count(j)) {
            require(allow_fresh, "target token at position " + std::to_string(j) +
                                     " has no counterpart in the source prompt");
            plan.fresh.insert(j);
        }
    }
    plan.source = std::move(source);
    plan.target = std::move(target);
    plan.injection_fraction = injection_fraction;
    plan.validate(n, m);
    return plan;
}

void renormalize_rows(Tensor& maps) {
    require(maps.ndim() == 2, "attention maps must be [P×L]");
    const int cols = maps.dim(1);
    for (int i = 0; i < maps.dim(0); ++i) {
        double* row = maps.data() + static_cast<std::size_t>(i) * cols;
        double s = 0.0;
        for (int j = 0; j < cols; ++j) {
            s += row[j];
        }
        if (std::abs(s - 1.0) <= 1e-12) {
            continue;
        }
        require(s > 0.0, "attention row " + std::to_string(i) + " has no mass left to renormalize");
        for (int j = 0; j < cols; ++j) {
            row[j] /= s;
        }
    }
}

Tensor sound_guided_edit_step(const Tensor& source_maps, const Tensor& target_maps, const EditPlan& plan) {
    require(source_maps.ndim() == 2 && target_maps.ndim() == 2 && source_maps.dim(0) == target_maps.dim(0),
            "source and target attention maps must be [P×Ls] and [P×Lt]");
    plan.validate(source_maps.dim(1), target_maps.dim(1));
    const int rows = target_maps.dim(0), lt = target_maps.dim(1);
    Tensor out(target_maps.shape());
    for (int j = 0; j < lt; ++j) {
        const bool own = (plan.star_index && j == *plan.star_index) || plan.fresh.count(j);
        const Tensor& from = own ? target_maps : source_maps;
        const int col = own ? j : plan.index_proj.at(j);
        for (int i = 0; i < rows; ++i) {
            out.at(i, j) = from.at(i, col);
        }
    }
    if (plan.renormalize) {
        renormalize_rows(out);
    }
    return out;
}

Tensor reweight_step(const Tensor& maps, const ReweightSpec& spec, bool renormalize) {
    require(maps.ndim() == 2, "attention maps must be [P×L]");
    spec.validate(maps.dim(1));
    Tensor out = maps;
    for (int i = 0; i < out.dim(0); ++i) {
        for (int j : spec.scale_index) {
            out.at(i, j) *= spec.scale;
        }
    }
    if (renormalize) {
        renormalize_rows(out);
    }
    return out;
}

Tensor generate(const diff::DiffusionModel& model, const PromptSpec& spec, std::uint64_t seed,
                const std::optional<ReweightSpec>& reweight, bool renormalize) {
    const auto cond = assemble_conditioning(model, spec);
    if (reweight) {
        reweight->validate(cond.length());
    }
    const diff::AttentionHook hook = [&](int, Tensor& maps) { maps = reweight_step(maps, *reweight, renormalize); };
    diff::Sampler sampler(model, cond, seed);
    while (!sampler.done()) {
        sampler.step(reweight ? &hook : nullptr);
    }
    return sampler.image();
}

EditResult edit(const diff::DiffusionModel& model, const EditPlan& plan, std::uint64_t seed) {
    const auto src_cond = assemble_conditioning(model, plan.source);
    const auto tgt_cond = assemble_conditioning(model, plan.target);
    plan.validate(src_cond.length(), tgt_cond.length());
    diff::Sampler src(model, src_cond, seed);
    diff::Sampler tgt(model, tgt_cond, seed);
    const long inject_steps = std::lround(plan.injection_fraction * model.schedule.T);
    Tensor source_maps;
    bool inject_now = false;
    const diff::AttentionHook hook = [&](int, Tensor& maps) {
        if (plan.reweight && plan.reweight_order == ReweightOrder::before_merge) {
            maps = reweight_step(maps, *plan.reweight, plan.renormalize);
        }
        if (inject_now) {
            maps = sound_guided_edit_step(source_maps, maps, plan);
        }
        if (plan.reweight && plan.reweight_order == ReweightOrder::after_merge) {
            maps = reweight_step(maps, *plan.reweight, plan.renormalize);
        }
    };
    for (long k = 0; !src.done(); ++k) {
        source_maps = src.step();
        inject_now = k < inject_steps;
        tgt.step(inject_now || plan.reweight ? &hook : nullptr);
    }
    return {src.image(), tgt.image()};
}

EditPlan stylize_plan(const diff::DiffusionModel& model, const std::string& base_prompt,
                      const adapt::PseudoToken& token, double injection_fraction, bool append_token) {
    PromptSpec source = parse_prompt(model, base_prompt, std::nullopt, Role::edit_source);
    require(count_stars(source.tokens) == 0, "the stylization base prompt must not contain *");
    PromptSpec target = parse_prompt(model, base_prompt + " in the style of *", token, Role::stylize, append_token);
    return make_edit_plan(std::move(source), std::move(target), injection_fraction, true);
}

EditResult stylize(const diff::DiffusionModel& model, const std::string& base_prompt, const adapt::PseudoToken& token,
                   std::uint64_t seed, double injection_fraction) {
    return edit(model, stylize_plan(model, base_prompt, token, injection_fraction, token.append_token), seed);
}

}  // namespace aai::inject
