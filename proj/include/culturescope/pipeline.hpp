#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "culturescope/embed.hpp"
#include "culturescope/model.hpp"

namespace culturescope {

// ---------------------------------------------------------------------------
// Data model
// ---------------------------------------------------------------------------

struct QAInstance {
    std::string id;
    std::string question;
    std::string country;
    std::vector<std::string> gold_answers;  // non-empty
    std::string domain;
};

struct TokenWeightMask {
    std::vector<int> weights;  // aligned to generated answer tokens, each 0 or 1

    int weight_sum() const {
        int s = 0;
        for (int w : weights) s += w;
        return s;
    }
    bool all_zero() const { return weight_sum() == 0; }
};

struct CondensedRepresentation {
    Vec vector;
    int layer = 0;
    std::string source_instance;
    int weight_sum = 0;  // recorded so magnitude blow-up of the raw sum is visible
};

// Few-shot association prompt whose final token is the literal placeholder
// "x"; that token's hidden state is overwritten during scoping-in.
struct InspectionPrompt {
    std::string text;
    int placeholder_position = 0;
    TokenSequence tokens;

    static InspectionPrompt from_text(const std::string& text, const Tokenizer& tokenizer);
    static InspectionPrompt from_file(const std::filesystem::path& path, const Tokenizer& tokenizer);
};

struct RawKnowledgeOutput {
    std::string instance_id;
    int layer = 0;
    std::string text;                 // generated continuation
    std::vector<std::string> parsed;  // trimmed, lowercased, deduplicated candidates
};

// ---------------------------------------------------------------------------
// Part-of-speech tagging (pluggable; only the noun-or-verb decision matters)
// ---------------------------------------------------------------------------

class PosTagger {
public:
    virtual ~PosTagger() = default;
    virtual bool is_noun_or_verb(const std::string& word) const = 0;
};

// Closed-class stoplist (determiners, prepositions, conjunctions, pronouns,
// auxiliaries); any other word with an alphabetic head counts as noun/verb.
class StoplistTagger : public PosTagger {
public:
    bool is_noun_or_verb(const std::string& word) const override;
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

TokenWeightMask pos_weight_mask(const TokenSequence& answer_tokens, const PosTagger& tagger,
                                const Tokenizer& tokenizer);

// Unnormalized weighted sum over answer-token hidden states at one layer.
// `answer_start` is the position of the first answer token in the traced
// sequence; positions are accumulated in ascending order.
CondensedRepresentation condense(const ResidualTrace& trace, const TokenWeightMask& mask, int layer,
                                 int answer_start, const std::string& source_instance = "");

// Split a generated continuation into candidate knowledge strings: split on
// commas and newlines, trim, drop empties and items longer than 8 words,
// lowercase-deduplicate, and stop at the first repeated item.
std::vector<std::string> parse_knowledge_list(const std::string& continuation);

RawKnowledgeOutput scope_in(const Model& model, const CondensedRepresentation& condensed,
                            const InspectionPrompt& prompt, int max_steps);

// ---------------------------------------------------------------------------
// Pipeline driver
// ---------------------------------------------------------------------------

struct PipelineConfig {
    std::vector<int> layers;  // empty -> { ceil(L/2) }
    int max_steps = 16;
    std::string embedder_key = "toy";
    double threshold = 0.3;
    std::uint64_t seed = 0;
    std::string inspection_prompt_text;

    std::vector<int> resolved_layers(int num_layers) const;
};

struct PipelineFlag {
    std::string instance_id;
    std::string reason;
};

struct PipelineResult {
    std::vector<KnowledgeItem> items;  // ordered by instance id, then layer
    std::vector<PipelineFlag> flags;
};

// Full run: answer generation, mask, condensation, scoping-in, filtering.
// Per-instance failures become flags; the run continues.
PipelineResult run_pipeline(const Model& model, const std::vector<QAInstance>& instances,
                            const PipelineConfig& config, const Embedder* embedder = nullptr,
                            const PosTagger* tagger = nullptr);

// qa_instances JSONL ingestion.
std::vector<QAInstance> load_qa_instances(const std::filesystem::path& path);
void save_qa_instances(const std::vector<QAInstance>& instances, const std::filesystem::path& path);

void save_knowledge_items(const std::vector<KnowledgeItem>& items, const std::vector<PipelineFlag>& flags,
                          const std::filesystem::path& items_path);
std::vector<KnowledgeItem> load_knowledge_items(const std::filesystem::path& path);

}  // namespace culturescope
