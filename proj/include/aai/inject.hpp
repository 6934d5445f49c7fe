#ifndef AAI_INJECT_HPP
#define AAI_INJECT_HPP

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "aai/adapter.hpp"
#include "aai/diffusion.hpp"

namespace aai::inject {

enum class Role { generate, edit_source, edit_target, stylize };

struct PromptSpec {
    std::vector<enc::PromptToken> tokens;
    std::optional<adapt::PseudoToken> pseudo;
    Role role = Role::generate;
    bool append_token = false;
};

PromptSpec parse_prompt(const diff::DiffusionModel& model, const std::string& prompt,
                        std::optional<adapt::PseudoToken> pseudo = std::nullopt, Role role = Role::generate,
                        bool append_token = false);

// Identity of each conditioning position, used to align prompts: a word or
// label id, a placeholder word, or the pseudo-token itself.
struct Position {
    enc::PromptToken::Kind kind;
    int id;
    bool operator==(const Position&) const = default;
};
std::vector<Position> positions(const PromptSpec& spec);

diff::ConditioningSequence assemble_conditioning(const diff::DiffusionModel& model, const PromptSpec& spec);

struct ReweightSpec {
    double scale = 1.0;
    std::set<int> scale_index;

    void validate(int length) const;
};

enum class ReweightOrder { after_merge, before_merge };

struct EditPlan {
    PromptSpec source;
    PromptSpec target;
    std::map<int, int> index_proj;  // target position -> source position
    std::optional<int> star_index;  // position of A* in the target sequence
    std::set<int> fresh;            // inserted target positions that keep their own attention
    double injection_fraction = 1.0;
    bool renormalize = true;
    std::optional<ReweightSpec> reweight;
    ReweightOrder reweight_order = ReweightOrder::after_merge;

    void validate(int source_length, int target_length) const;
};

// Aligns target to source by a longest common subsequence over positions.
// Target positions left unmatched are an error unless allow_fresh, in which
// case they are listed in `fresh`.
EditPlan make_edit_plan(PromptSpec source, PromptSpec target, double injection_fraction = 1.0,
                        bool allow_fresh = false);

// Rows whose sum is already 1 to within 1e-12 are left untouched.
void renormalize_rows(Tensor& maps);

// Column j of the result is S*_t[:, j] for j == star_index or a fresh
// position, else S_t[:, index_proj[j]].
Tensor sound_guided_edit_step(const Tensor& source_maps, const Tensor& target_maps, const EditPlan& plan);

// Columns in scale_index multiplied by scale, then rows renormalized.
Tensor reweight_step(const Tensor& maps, const ReweightSpec& spec, bool renormalize = true);

Tensor generate(const diff::DiffusionModel& model, const PromptSpec& spec, std::uint64_t seed,
                const std::optional<ReweightSpec>& reweight = std::nullopt, bool renormalize = true);

struct EditResult {
    Tensor source;
    Tensor edited;
};

// Two samplers in lockstep with a shared seed; the target's attention is
// replaced for the first round(injection_fraction·T) steps.
EditResult edit(const diff::DiffusionModel& model, const EditPlan& plan, std::uint64_t seed);

// base_prompt + "in the style of *", edited from base_prompt.
EditPlan stylize_plan(const diff::DiffusionModel& model, const std::string& base_prompt,
                      const adapt::PseudoToken& token, double injection_fraction = 1.0, bool append_token = false);
EditResult stylize(const diff::DiffusionModel& model, const std::string& base_prompt, const adapt::PseudoToken& token,
                   std::uint64_t seed, double injection_fraction = 1.0);

}  // namespace aai::inject

#endif  // AAI_INJECT_HPP
