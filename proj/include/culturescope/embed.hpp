#pragma once

#include <memory>
#include <string>
#include <vector>

#include "culturescope/matrix.hpp"

namespace culturescope {

struct EmbeddingVector {
    Vec values;
    std::string source_text;
};

// Pluggable text-embedding provider. Implementations must be deterministic
// per text and safe to call concurrently.
class Embedder {
public:
    virtual ~Embedder() = default;
    virtual Vec embed_text(const std::string& text) const = 0;
    virtual std::string id() const = 0;
};

// Deterministic stand-in for a sentence embedder: lowercased words are
// feature-hashed into `dim` buckets and the per-word one-hot states are
// mean-pooled. Unnormalized; cosine handles scale.
class ToyEmbedder : public Embedder {
public:
    explicit ToyEmbedder(int dim = 64);
    Vec embed_text(const std::string& text) const override;
    std::string id() const override;
    int bucket_of(const std::string& word) const;  // exposed for tests

private:
    int dim_;
};

// Remote provider: POST {"text": ...} to <base_url>/embed, expecting
// {"vector": [...], "model_id": "..."}; retries transient failures and
// verifies the model-id echo when one is configured.
class HttpEmbedder : public Embedder {
public:
    HttpEmbedder(std::string host, int port, std::string expected_model_id = "",
                 int timeout_ms = 2000, int max_retries = 3);
    Vec embed_text(const std::string& text) const override;
    std::string id() const override;

private:
    std::string host_;
    int port_;
    std::string expected_model_id_;
    int timeout_ms_;
    int max_retries_;
};

std::unique_ptr<Embedder> make_embedder(const std::string& key);  // config key, e.g. "toy" or "toy:128"

EmbeddingVector embed(const std::string& text, const Embedder& embedder);

// Cosine similarity of the two embeddings; 0 when either has zero norm.
double activation_score(const std::string& input_text, const std::string& knowledge,
                        const Embedder& embedder);

struct KnowledgeItem {
    std::string text;
    double activation_score = 0.0;
    std::string country;
    std::string instance_id;
    int layer = 0;
};

// Keeps candidates scoring strictly above the threshold, in input order.
// Country / instance / layer provenance is stamped by the caller.
std::vector<KnowledgeItem> filter_knowledge(const std::vector<std::string>& candidates,
                                            const std::string& input_text, const Embedder& embedder,
                                            double threshold = 0.3);

}  // namespace culturescope
