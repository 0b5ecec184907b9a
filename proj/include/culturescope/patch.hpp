#pragma once

#include <filesystem>

#include "culturescope/model.hpp"

namespace culturescope {

// Overwrite the post-block residual x_p^l during a forward pass. Exactly one
// coordinate per run; the position must lie inside the prompt.
struct PatchPlan {
    int layer = 0;     // 1..L
    int position = 0;  // 0-based prompt position
    Vec replacement;   // dim d, finite

    void validate(const ModelConfig& config, int prompt_len) const;
};

// Run a forward pass and return only the trace restricted to `spec`.
ResidualTrace capture(const Model& model, const TokenSequence& tokens, const CaptureSpec& spec);

// Greedy generation where every forward pass replaces x at (plan.layer,
// plan.position) with plan.replacement before the next layer (or the
// unembedding) consumes it.
GenerationResult patched_generate(const Model& model, const TokenSequence& tokens,
                                  const PatchPlan& plan, int max_steps);

// Structured-text (JSON) form for CLI replay.
void save_patch_plan(const PatchPlan& plan, const std::filesystem::path& path);
PatchPlan load_patch_plan(const std::filesystem::path& path);

}  // namespace culturescope
