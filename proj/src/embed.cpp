#include "culturescope/embed.hpp"

#include <cmath>

#include <httplib.h>
#include <json.hpp>

#include "culturescope/error.hpp"
#include "culturescope/rng.hpp"
#include "culturescope/strings.hpp"

namespace culturescope {

namespace {

// Words for hashing: lowercase alphanumeric runs.
std::vector<std::string> hash_words(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
        unsigned char u = static_cast<unsigned char>(c);
        if (std::isalnum(u)) {
            cur.push_back(static_cast<char>(std::tolower(u)));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

}  // namespace

ToyEmbedder::ToyEmbedder(int dim) : dim_(dim) {
    if (dim < 1) throw Error(Error::Kind::config, "toy embedder dim must be >= 1");
}

int ToyEmbedder::bucket_of(const std::string& word) const {
    return static_cast<int>(fnv1a64(word) % static_cast<std::uint64_t>(dim_));
}

Vec ToyEmbedder::embed_text(const std::string& text) const {
    std::vector<std::string> words = hash_words(text);
    Vec g(static_cast<std::size_t>(dim_), 0.0);
    if (words.empty()) return g;
    for (const std::string& w : words) g[static_cast<std::size_t>(bucket_of(w))] += 1.0;
    for (double& v : g) v /= static_cast<double>(words.size());
    return g;
}

std::string ToyEmbedder::id() const { return "toy-" + std::to_string(dim_); }

HttpEmbedder::HttpEmbedder(std::string host, int port, std::string expected_model_id,
                           int timeout_ms, int max_retries)
    : host_(std::move(host)),
      port_(port),
      expected_model_id_(std::move(expected_model_id)),
      timeout_ms_(timeout_ms),
      max_retries_(max_retries) {}

Vec HttpEmbedder::embed_text(const std::string& text) const {
    json request;
    request["text"] = text;
    const std::string body = request.dump();
    std::string last_error = "no attempt made";
    for (int attempt = 0; attempt <= max_retries_; ++attempt) {
        httplib::Client client(host_, port_);
        client.set_connection_timeout(0, timeout_ms_ * 1000);
        client.set_read_timeout(0, timeout_ms_ * 1000);
        auto res = client.Post("/embed", body, "application/json");
        if (!res) {
            last_error = "connection failed: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status != 200) {
            last_error = "status " + std::to_string(res->status);
            continue;
        }
        json response;
        try {
            response = json::parse(res->body);
        } catch (const std::exception& e) {
            last_error = std::string("bad response body: ") + e.what();
            continue;
        }
        if (!response.contains("vector") || !response["vector"].is_array()) {
            last_error = "response missing vector field";
            continue;
        }
        std::string model_id = response.value("model_id", "");
        if (!expected_model_id_.empty() && model_id != expected_model_id_)
            throw Error(Error::Kind::provider, "embedding endpoint echoed model_id '" + model_id +
                                                   "', expected '" + expected_model_id_ + "'");
        return response["vector"].get<Vec>();
    }
    throw Error(Error::Kind::provider,
                "embedding endpoint " + host_ + ":" + std::to_string(port_) + " failed after " +
                    std::to_string(max_retries_ + 1) + " attempts (" + last_error + ")");
}

std::string HttpEmbedder::id() const {
    return "http:" + host_ + ":" + std::to_string(port_) +
           (expected_model_id_.empty() ? "" : ":" + expected_model_id_);
}

std::unique_ptr<Embedder> make_embedder(const std::string& key) {
    if (key == "toy") return std::make_unique<ToyEmbedder>();
    if (key.rfind("toy:", 0) == 0) {
        int dim = 0;
        try {
            dim = std::stoi(key.substr(4));
        } catch (const std::exception&) {
            throw Error(Error::Kind::config, "bad embedder key: " + key);
        }
        return std::make_unique<ToyEmbedder>(dim);
    }
    if (key.rfind("http:", 0) == 0) {
        // http:<host>:<port>[:<model-id>]
        std::vector<std::string> parts = split_any(key, ":");
        if (parts.size() < 3) throw Error(Error::Kind::config, "bad embedder key: " + key);
        int port = 0;
        try {
            port = std::stoi(parts[2]);
        } catch (const std::exception&) {
            throw Error(Error::Kind::config, "bad embedder port in key: " + key);
        }
        return std::make_unique<HttpEmbedder>(parts[1], port, parts.size() > 3 ? parts[3] : "");
    }
    throw Error(Error::Kind::config, "unknown embedder key: " + key);
}

EmbeddingVector embed(const std::string& text, const Embedder& embedder) {
    if (trim(text).empty())
        throw Error(Error::Kind::precondition, "embed: text must be non-empty");
    return EmbeddingVector{embedder.embed_text(text), text};
}

double activation_score(const std::string& input_text, const std::string& knowledge,
                        const Embedder& embedder) {
    Vec a = embed(input_text, embedder).values;
    Vec b = embed(knowledge, embedder).values;
    if (a.size() != b.size())
        throw Error(Error::Kind::shape, "activation_score: embedder returned mismatched dimensions");
    double na = norm2(a);
    double nb = norm2(b);
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot(a, b) / (na * nb);
}

std::vector<KnowledgeItem> filter_knowledge(const std::vector<std::string>& candidates,
                                            const std::string& input_text, const Embedder& embedder,
                                            double threshold) {
    if (threshold < -1.0 || threshold > 1.0)
        throw Error(Error::Kind::precondition, "filter: threshold must be in [-1, 1]");
    std::vector<KnowledgeItem> kept;
    for (const std::string& ck : candidates) {
        double s = activation_score(input_text, ck, embedder);
        if (s > threshold) {
            KnowledgeItem item;
            item.text = ck;
            item.activation_score = s;
            kept.push_back(std::move(item));
        }
    }
    return kept;
}

}  // namespace culturescope
