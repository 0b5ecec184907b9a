#include "culturescope/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <set>
#include <unordered_set>

#include "culturescope/harness.hpp"
#include "culturescope/patch.hpp"
#include "culturescope/strings.hpp"
#include "culturescope/textio.hpp"

namespace culturescope {

// ---------------------------------------------------------------------------
// Tagger
// ---------------------------------------------------------------------------

namespace {

const std::unordered_set<std::string>& closed_class_words() {
    static const std::unordered_set<std::string> words = {
        // determiners
        "the", "a", "an", "this", "that", "these", "those", "some", "any", "each", "every", "no",
        "either", "neither", "both", "all", "such",
        // prepositions
        "of", "in", "on", "at", "by", "for", "with", "about", "against", "between", "among", "into",
        "through", "during", "before", "after", "above", "below", "to", "from", "up", "down", "over",
        "under", "off", "near", "onto", "upon", "within", "without", "out",
        // conjunctions
        "and", "or", "but", "nor", "so", "yet", "if", "because", "while", "although", "though",
        "than", "as", "whether", "unless", "since", "until", "when", "where",
        // pronouns
        "i", "you", "he", "she", "it", "we", "they", "me", "him", "her", "us", "them", "my", "your",
        "his", "its", "our", "their", "mine", "yours", "hers", "ours", "theirs", "myself",
        "yourself", "himself", "herself", "itself", "ourselves", "themselves", "who", "whom",
        "whose", "which", "what", "there", "here",
        // auxiliaries and negation
        "am", "is", "are", "was", "were", "be", "been", "being", "have", "has", "had", "having",
        "do", "does", "did", "will", "would", "shall", "should", "may", "might", "must", "can",
        "could", "ought", "not",
    };
    return words;
}

std::string strip_word(const std::string& word) {
    std::size_t b = 0, e = word.size();
    auto alnum = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
    while (b < e && !alnum(word[b])) ++b;
    while (e > b && !alnum(word[e - 1])) --e;
    return to_lower(word.substr(b, e - b));
}

}  // namespace

bool StoplistTagger::is_noun_or_verb(const std::string& word) const {
    std::string w = strip_word(word);
    if (w.empty()) return false;
    if (closed_class_words().count(w)) return false;
    return std::isalpha(static_cast<unsigned char>(w.front())) != 0;
}

// ---------------------------------------------------------------------------
// Mask and condensation
// ---------------------------------------------------------------------------

TokenWeightMask pos_weight_mask(const TokenSequence& answer_tokens, const PosTagger& tagger,
                                const Tokenizer& tokenizer) {
    TokenWeightMask mask;
    mask.weights.assign(answer_tokens.ids.size(), 0);
    if (answer_tokens.ids.empty()) return mask;
    std::vector<int> word_idx = tokenizer.word_of_token(answer_tokens.ids);
    std::vector<std::string> words = tokenizer.words(answer_tokens.ids);
    std::vector<int> word_is_content(words.size(), 0);
    for (std::size_t w = 0; w < words.size(); ++w)
        word_is_content[w] = tagger.is_noun_or_verb(words[w]) ? 1 : 0;
    for (std::size_t i = 0; i < mask.weights.size(); ++i) {
        int w = word_idx[i];
        if (w >= 0 && w < static_cast<int>(words.size())) mask.weights[i] = word_is_content[static_cast<std::size_t>(w)];
    }
    return mask;
}

CondensedRepresentation condense(const ResidualTrace& trace, const TokenWeightMask& mask, int layer,
                                 int answer_start, const std::string& source_instance) {
    if (layer < 1 || layer > trace.num_layers())
        throw Error(Error::Kind::range, "condense: layer " + std::to_string(layer) + " out of range 1.." +
                                            std::to_string(trace.num_layers()));
    const int count = static_cast<int>(mask.weights.size());
    if (answer_start < 0 || answer_start + count > trace.seq_len())
        throw Error(Error::Kind::shape, "condense: mask of length " + std::to_string(count) +
                                            " starting at " + std::to_string(answer_start) +
                                            " does not fit the trace (seq_len " +
                                            std::to_string(trace.seq_len()) + ")");
    CondensedRepresentation out;
    out.layer = layer;
    out.source_instance = source_instance;
    out.weight_sum = mask.weight_sum();
    out.vector.assign(static_cast<std::size_t>(trace.dim()), 0.0);
    for (int p = 0; p < count; ++p) {
        if (mask.weights[static_cast<std::size_t>(p)] == 0) continue;
        const Vec& x = trace.hidden(layer, answer_start + p);
        add_inplace(out.vector, x);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Inspection prompt and scoping-in
// ---------------------------------------------------------------------------

InspectionPrompt InspectionPrompt::from_text(const std::string& text, const Tokenizer& tokenizer) {
    InspectionPrompt prompt;
    prompt.text = trim(text);
    if (prompt.text.empty())
        throw Error(Error::Kind::config, "inspection prompt is empty");
    prompt.tokens = tokenizer.tokenize(prompt.text);
    int last = prompt.tokens.size() - 1;
    if (prompt.tokens.ids[static_cast<std::size_t>(last)] != Tokenizer::kPlaceholder)
        throw Error(Error::Kind::config,
                    "inspection prompt must end with the single-token placeholder 'x'");
    prompt.placeholder_position = last;
    return prompt;
}

InspectionPrompt InspectionPrompt::from_file(const std::filesystem::path& path, const Tokenizer& tokenizer) {
    return from_text(read_file(path), tokenizer);
}

std::vector<std::string> parse_knowledge_list(const std::string& continuation) {
    std::vector<std::string> out;
    std::set<std::string> seen;
    for (const std::string& raw : split_any(continuation, ",\n")) {
        std::string item = normalize_text(raw);
        if (item.empty()) continue;
        if (count_words(item) > 8) continue;
        if (seen.count(item)) break;  // degenerate-loop guard
        seen.insert(item);
        out.push_back(item);
    }
    return out;
}

RawKnowledgeOutput scope_in(const Model& model, const CondensedRepresentation& condensed,
                            const InspectionPrompt& prompt, int max_steps) {
    PatchPlan plan;
    plan.layer = condensed.layer;
    plan.position = prompt.placeholder_position;
    plan.replacement = condensed.vector;
    GenerationResult gen = patched_generate(model, prompt.tokens, plan, max_steps);
    RawKnowledgeOutput out;
    out.instance_id = condensed.source_instance;
    out.layer = condensed.layer;
    out.text = gen.output_text;
    out.parsed = parse_knowledge_list(gen.output_text);
    return out;
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

std::vector<int> PipelineConfig::resolved_layers(int num_layers) const {
    if (!layers.empty()) {
        for (int l : layers)
            if (l < 1 || l > num_layers)
                throw Error(Error::Kind::config, "pipeline layer " + std::to_string(l) +
                                                     " out of range 1.." + std::to_string(num_layers));
        return layers;
    }
    return {(num_layers + 1) / 2};
}

PipelineResult run_pipeline(const Model& model, const std::vector<QAInstance>& instances,
                            const PipelineConfig& config, const Embedder* embedder,
                            const PosTagger* tagger) {
    std::unique_ptr<Embedder> owned_embedder;
    if (!embedder) {
        owned_embedder = make_embedder(config.embedder_key);
        embedder = owned_embedder.get();
    }
    StoplistTagger default_tagger;
    if (!tagger) tagger = &default_tagger;

    std::vector<int> layers = config.resolved_layers(model.config().num_layers);
    InspectionPrompt inspection =
        InspectionPrompt::from_text(config.inspection_prompt_text, model.tokenizer());

    std::vector<const QAInstance*> ordered;
    ordered.reserve(instances.size());
    for (const QAInstance& inst : instances) ordered.push_back(&inst);
    std::stable_sort(ordered.begin(), ordered.end(),
                     [](const QAInstance* a, const QAInstance* b) { return a->id < b->id; });

    PipelineResult result;
    for (const QAInstance* inst : ordered) {
        try {
            if (inst->gold_answers.empty())
                throw Error(Error::Kind::data, "instance has no gold answers");
            PromptScheme scheme{SchemeKind::baseline, TemplateFamily::commonsense};
            std::string prompt_text = render_prompt(scheme, *inst, nullptr);
            TokenSequence prompt_tokens = model.tokenizer().tokenize(prompt_text);
            GenerationResult answer = model.generate(prompt_tokens, config.max_steps);

            TokenSequence answer_tokens{answer.output_tokens};
            TokenWeightMask mask = pos_weight_mask(answer_tokens, *tagger, model.tokenizer());
            if (mask.all_zero()) {
                result.flags.push_back({inst->id, "no-condensable-content"});
                continue;
            }

            TokenSequence full = prompt_tokens;
            full.ids.insert(full.ids.end(), answer.output_tokens.begin(), answer.output_tokens.end());
            CaptureSpec spec;
            spec.layers = layers;
            std::vector<int> positions;
            for (int p = 0; p < answer_tokens.size(); ++p) positions.push_back(prompt_tokens.size() + p);
            spec.positions = positions;
            ResidualTrace trace = model.forward(full, spec).trace;

            for (int layer : layers) {
                CondensedRepresentation condensed =
                    condense(trace, mask, layer, prompt_tokens.size(), inst->id);
                RawKnowledgeOutput raw = scope_in(model, condensed, inspection, config.max_steps);
                std::vector<KnowledgeItem> kept =
                    filter_knowledge(raw.parsed, prompt_text, *embedder, config.threshold);
                for (KnowledgeItem& item : kept) {
                    item.country = inst->country;
                    item.instance_id = inst->id;
                    item.layer = layer;
                    result.items.push_back(std::move(item));
                }
            }
        } catch (const Error& e) {
            std::cerr << "[pipeline) instance " << inst->id << " skipped: " << e.what() << "\n";
            result.flags.push_back({inst->id, std::string("error: ") + e.what()});
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// File I/O
// ---------------------------------------------------------------------------

std::vector<QAInstance> load_qa_instances(const std::filesystem::path& path) {
    std::vector<QAInstance> out;
    for (const json& j : read_jsonl(path, "qa_instances")) {
        QAInstance inst;
        inst.id = j.at("id").get<std::string>();
        inst.question = j.at("question").get<std::string>();
        inst.country = j.at("country").get<std::string>();
        inst.gold_answers = j.at("answers").get<std::vector<std::string>>();
        inst.domain = j.value("domain", "");
        if (inst.gold_answers.empty())
            throw Error(Error::Kind::data, path.string() + ": instance " + inst.id + " has no answers");
        out.push_back(std::move(inst));
    }
    return out;
}

void save_qa_instances(const std::vector<QAInstance>& instances, const std::filesystem::path& path) {
    JsonlWriter w(path, "qa_instances");
    for (const QAInstance& inst : instances) {
        json j;
        j["id"] = inst.id;
        j["question"] = inst.question;
        j["country"] = inst.country;
        j["answers"] = inst.gold_answers;
        j["domain"] = inst.domain;
        w.write(j);
    }
}

void save_knowledge_items(const std::vector<KnowledgeItem>& items, const std::vector<PipelineFlag>& flags,
                          const std::filesystem::path& items_path) {
    JsonlWriter w(items_path, "knowledge_items");
    for (const KnowledgeItem& item : items) {
        json j;
        j["country"] = item.country;
        j["knowledge"] = item.text;
        j["score"] = item.activation_score;
        j["instance_id"] = item.instance_id;
        j["layer"] = item.layer;
        w.write(j);
    }
    for (const PipelineFlag& flag : flags) {
        json j;
        j["flag"] = flag.reason;
        j["instance_id"] = flag.instance_id;
        w.write(j);
    }
}

std::vector<KnowledgeItem> load_knowledge_items(const std::filesystem::path& path) {
    std::vector<KnowledgeItem> out;
    for (const json& j : read_jsonl(path, "knowledge_items")) {
        if (j.contains("flag")) continue;
        KnowledgeItem item;
        item.country = j.at("country").get<std::string>();
        item.text = j.at("knowledge").get<std::string>();
        item.activation_score = j.at("score").get<double>();
        item.instance_id = j.value("instance_id", "");
        item.layer = j.value("layer", 0);
        out.push_back(std::move(item));
    }
    return out;
}

}  // namespace culturescope
