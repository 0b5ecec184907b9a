#include "culturescope/patch.hpp"

#include "culturescope/textio.hpp"

namespace culturescope {

void PatchPlan::validate(const ModelConfig& config, int prompt_len) const {
    if (layer < 1 || layer > config.num_layers)
        throw Error(Error::Kind::range, "patch: layer " + std::to_string(layer) +
                                            " out of range 1.." + std::to_string(config.num_layers));
    if (position < 0 || position >= prompt_len)
        throw Error(Error::Kind::range,
                    "patch: position " + std::to_string(position) + " is outside the prompt (length " +
                        std::to_string(prompt_len) + "); patching generated positions is unsupported");
    if (static_cast<int>(replacement.size()) != config.model_dim)
        throw Error(Error::Kind::shape, "patch: replacement has dim " + std::to_string(replacement.size()) +
                                            ", model dim is " + std::to_string(config.model_dim));
    if (!all_finite(replacement))
        throw Error(Error::Kind::numeric, "patch: replacement vector has non-finite entries");
}

ResidualTrace capture(const Model& model, const TokenSequence& tokens, const CaptureSpec& spec) {
    return model.forward(tokens, spec).trace;
}

GenerationResult patched_generate(const Model& model, const TokenSequence& tokens,
                                  const PatchPlan& plan, int max_steps) {
    plan.validate(model.config(), tokens.size());
    LayerHook hook = [&plan](int layer, std::vector<Vec>& states) {
        if (layer == plan.layer) states[static_cast<std::size_t>(plan.position)] = plan.replacement;
    };
    return model.generate(tokens, max_steps, /*keep_logits=*/false, hook);
}

void save_patch_plan(const PatchPlan& plan, const std::filesystem::path& path) {
    json j;
    j["format_version"] = kFormatVersion;
    j["kind"] = "patch_plan";
    j["layer"] = plan.layer;
    j["position"] = plan.position;
    j["replacement"] = plan.replacement;
    write_file(path, j.dump(2) + "\n");
}

PatchPlan load_patch_plan(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const std::exception& e) {
        throw Error(Error::Kind::parse, path.string() + ": " + e.what());
    }
    if (j.value("kind", "") != "patch_plan")
        throw Error(Error::Kind::parse, path.string() + ": not a patch plan file");
    PatchPlan plan;
    plan.layer = j.at("layer").get<int>();
    plan.position = j.at("position").get<int>();
    plan.replacement = j.at("replacement").get<Vec>();
    return plan;
}

}  // namespace culturescope
