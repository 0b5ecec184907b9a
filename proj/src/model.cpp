#include "culturescope/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "culturescope/rng.hpp"
#include "culturescope/strings.hpp"

namespace culturescope {

namespace {

constexpr char kWeightMagic[4] = {'C', 'S', 'W', 'T'};
constexpr std::uint32_t kWeightFormatVersion = 1;

double gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440));
}

}  // namespace

// ---------------------------------------------------------------------------
// Config / weights
// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
    auto positive = [](int v, const char* name) {
        if (v < 1) throw Error(Error::Kind::config, std::string(name) + " must be >= 1");
    };
    positive(vocab_size, "vocab_size");
    positive(model_dim, "model_dim");
    positive(num_layers, "num_layers");
    positive(num_heads, "num_heads");
    positive(head_dim, "head_dim");
    positive(mlp_hidden_dim, "mlp_hidden_dim");
    if (max_seq_len < 2) throw Error(Error::Kind::config, "max_seq_len must be >= 2");
    if (model_dim != num_heads * head_dim)
        throw Error(Error::Kind::config, "model_dim must equal num_heads * head_dim");
    if (vocab_size < 5)
        throw Error(Error::Kind::config, "vocab_size must be >= 5 (3 reserved tokens + digit alphabet)");
}

void ModelWeights::validate() const {
    config.validate();
    auto check = [](const Mat& m, int r, int c, const std::string& name) {
        if (m.rows != r || m.cols != c)
            throw Error(Error::Kind::shape, name + ": expected " + std::to_string(r) + "x" +
                                                std::to_string(c) + ", got " + std::to_string(m.rows) +
                                                "x" + std::to_string(m.cols));
        if (!all_finite(m.a)) throw Error(Error::Kind::numeric, name + ": non-finite entry");
    };
    check(embedding, config.vocab_size, config.model_dim, "embedding");
    if (static_cast<int>(layers.size()) != config.num_layers)
        throw Error(Error::Kind::shape, "wrong number of layers");
    for (int l = 0; l < config.num_layers; ++l) {
        const LayerWeights& lw = layers[static_cast<std::size_t>(l)];
        std::string p = "layer " + std::to_string(l + 1) + " ";
        if (static_cast<int>(lw.w_q.size()) != config.num_heads ||
            static_cast<int>(lw.w_k.size()) != config.num_heads ||
            static_cast<int>(lw.w_v.size()) != config.num_heads ||
            static_cast<int>(lw.w_o.size()) != config.num_heads)
            throw Error(Error::Kind::shape, p + "wrong number of heads");
        for (int h = 0; h < config.num_heads; ++h) {
            check(lw.w_q[static_cast<std::size_t>(h)], config.model_dim, config.head_dim, p + "w_q");
            check(lw.w_k[static_cast<std::size_t>(h)], config.model_dim, config.head_dim, p + "w_k");
            check(lw.w_v[static_cast<std::size_t>(h)], config.model_dim, config.head_dim, p + "w_v");
            check(lw.w_o[static_cast<std::size_t>(h)], config.head_dim, config.model_dim, p + "w_o");
        }
        check(lw.mlp_in, config.model_dim, config.mlp_hidden_dim, p + "mlp_in");
        check(lw.mlp_out, config.mlp_hidden_dim, config.model_dim, p + "mlp_out");
    }
    check(unembedding, config.model_dim, config.vocab_size, "unembedding");
}

ModelWeights random_weights(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    double scale = 1.0 / std::sqrt(static_cast<double>(config.model_dim));
    auto fill = [&](Mat& m, double s) {
        for (double& v : m.a) v = rng.next_gaussian() * s;
    };
    ModelWeights w;
    w.config = config;
    w.embedding = Mat(config.vocab_size, config.model_dim);
    fill(w.embedding, 1.0);
    w.layers.resize(static_cast<std::size_t>(config.num_layers));
    for (LayerWeights& lw : w.layers) {
        lw.w_q.assign(static_cast<std::size_t>(config.num_heads), Mat(config.model_dim, config.head_dim));
        lw.w_k.assign(static_cast<std::size_t>(config.num_heads), Mat(config.model_dim, config.head_dim));
        lw.w_v.assign(static_cast<std::size_t>(config.num_heads), Mat(config.model_dim, config.head_dim));
        lw.w_o.assign(static_cast<std::size_t>(config.num_heads), Mat(config.head_dim, config.model_dim));
        for (int h = 0; h < config.num_heads; ++h) {
            fill(lw.w_q[static_cast<std::size_t>(h)], scale);
            fill(lw.w_k[static_cast<std::size_t>(h)], scale);
            fill(lw.w_v[static_cast<std::size_t>(h)], scale);
            fill(lw.w_o[static_cast<std::size_t>(h)], scale);
        }
        lw.mlp_in = Mat(config.model_dim, config.mlp_hidden_dim);
        lw.mlp_out = Mat(config.mlp_hidden_dim, config.model_dim);
        fill(lw.mlp_in, scale);
        fill(lw.mlp_out, 1.0 / std::sqrt(static_cast<double>(config.mlp_hidden_dim)));
    }
    w.unembedding = Mat(config.model_dim, config.vocab_size);
    fill(w.unembedding, scale);
    return w;
}

namespace {

void put_u32(std::ofstream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t get_u32(std::ifstream& in, const std::string& what) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) throw Error(Error::Kind::parse, "weight file truncated reading " + what);
    return v;
}

void put_mat(std::ofstream& out, const Mat& m) {
    out.write(reinterpret_cast<const char*>(m.a.data()),
              static_cast<std::streamsize>(m.a.size() * sizeof(double)));
}

Mat get_mat(std::ifstream& in, int rows, int cols, const std::string& what) {
    Mat m(rows, cols);
    in.read(reinterpret_cast<char*>(m.a.data()),
            static_cast<std::streamsize>(m.a.size() * sizeof(double)));
    if (!in) throw Error(Error::Kind::parse, "weight file truncated reading " + what);
    return m;
}

}  // namespace

void save_weights(const ModelWeights& weights, const std::filesystem::path& path) {
    weights.validate();
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Error::Kind::io, "cannot write weight file: " + path.string());
    out.write(kWeightMagic, 4);
    put_u32(out, kWeightFormatVersion);
    const ModelConfig& c = weights.config;
    for (int v : {c.vocab_size, c.model_dim, c.num_layers, c.num_heads, c.head_dim,
                  c.mlp_hidden_dim, c.max_seq_len})
        put_u32(out, static_cast<std::uint32_t>(v));
    put_mat(out, weights.embedding);
    for (const LayerWeights& lw : weights.layers) {
        for (const Mat& m : lw.w_q) put_mat(out, m);
        for (const Mat& m : lw.w_k) put_mat(out, m);
        for (const Mat& m : lw.w_v) put_mat(out, m);
        for (const Mat& m : lw.w_o) put_mat(out, m);
        put_mat(out, lw.mlp_in);
        put_mat(out, lw.mlp_out);
    }
    put_mat(out, weights.unembedding);
    if (!out) throw Error(Error::Kind::io, "short write: " + path.string());
}

ModelWeights load_weights(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Error::Kind::io, "cannot open weight file: " + path.string());
    char magic[4] = {};
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kWeightMagic, 4) != 0)
        throw Error(Error::Kind::parse, path.string() + ": not a culturescope weight file");
    std::uint32_t version = get_u32(in, "version");
    if (version != kWeightFormatVersion)
        throw Error(Error::Kind::parse, path.string() + ": unsupported weight format version " +
                                            std::to_string(version));
    ModelConfig c;
    c.vocab_size = static_cast<int>(get_u32(in, "vocab_size"));
    c.model_dim = static_cast<int>(get_u32(in, "model_dim"));
    c.num_layers = static_cast<int>(get_u32(in, "num_layers"));
    c.num_heads = static_cast<int>(get_u32(in, "num_heads"));
    c.head_dim = static_cast<int>(get_u32(in, "head_dim"));
    c.mlp_hidden_dim = static_cast<int>(get_u32(in, "mlp_hidden_dim"));
    c.max_seq_len = static_cast<int>(get_u32(in, "max_seq_len"));
    c.validate();

    ModelWeights w;
    w.config = c;
    w.embedding = get_mat(in, c.vocab_size, c.model_dim, "embedding");
    w.layers.resize(static_cast<std::size_t>(c.num_layers));
    for (LayerWeights& lw : w.layers) {
        auto heads = [&](int rows, int cols, const char* what) {
            std::vector<Mat> ms;
            ms.reserve(static_cast<std::size_t>(c.num_heads));
            for (int h = 0; h < c.num_heads; ++h) ms.push_back(get_mat(in, rows, cols, what));
            return ms;
        };
        lw.w_q = heads(c.model_dim, c.head_dim, "w_q");
        lw.w_k = heads(c.model_dim, c.head_dim, "w_k");
        lw.w_v = heads(c.model_dim, c.head_dim, "w_v");
        lw.w_o = heads(c.head_dim, c.model_dim, "w_o");
        lw.mlp_in = get_mat(in, c.model_dim, c.mlp_hidden_dim, "mlp_in");
        lw.mlp_out = get_mat(in, c.mlp_hidden_dim, c.model_dim, "mlp_out");
    }
    w.unembedding = get_mat(in, c.model_dim, c.vocab_size, "unembedding");
    w.validate();
    return w;
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

Tokenizer::Tokenizer(int vocab_size, int max_seq_len)
    : vocab_size_(vocab_size), max_seq_len_(max_seq_len) {
    if (vocab_size < 5) throw Error(Error::Kind::config, "tokenizer needs vocab_size >= 5");
    base_ = vocab_size - kFirstDigit;
    digits_per_byte_ = 1;
    long long span = base_;
    while (span < 256) {
        span *= base_;
        ++digits_per_byte_;
    }
}

std::vector<TokenPiece> Tokenizer::tokenize_with_offsets(const std::string& text) const {
    if (trim(text).empty())
        throw Error(Error::Kind::length, "tokenize: text is empty after trimming");
    std::vector<TokenPiece> pieces;
    std::size_t i = 0;
    const std::size_t n = text.size();
    while (i < n) {
        if (is_space_byte(text[i])) {
            std::size_t b = i;
            while (i < n && is_space_byte(text[i])) ++i;
            // leading/trailing whitespace is dropped entirely
            if (!pieces.empty() && i < n) pieces.push_back({kSpace, b, i});
            continue;
        }
        unsigned char byte = static_cast<unsigned char>(text[i]);
        if (byte == 'x') {
            pieces.push_back({kPlaceholder, i, i + 1});
        } else {
            int digits[8];
            int value = byte;
            for (int k = digits_per_byte_ - 1; k >= 0; --k) {
                digits[k] = value % base_;
                value /= base_;
            }
            for (int k = 0; k < digits_per_byte_; ++k)
                pieces.push_back({kFirstDigit + digits[k], i, i + 1});
        }
        ++i;
    }
    if (static_cast<int>(pieces.size()) > max_seq_len_)
        throw Error(Error::Kind::length, "tokenize: sequence length " + std::to_string(pieces.size()) +
                                             " exceeds max_seq_len " + std::to_string(max_seq_len_));
    return pieces;
}

TokenSequence Tokenizer::tokenize(const std::string& text) const {
    TokenSequence seq;
    for (const TokenPiece& p : tokenize_with_offsets(text)) seq.ids.push_back(p.id);
    return seq;
}

std::string Tokenizer::detokenize(std::span<const int> ids) const {
    std::string out;
    int pending = 0;
    int pending_count = 0;
    auto flush_pending = [&]() { pending = 0; pending_count = 0; };
    for (int id : ids) {
        if (id >= kFirstDigit && id < vocab_size_) {
            pending = pending * base_ + (id - kFirstDigit);
            if (++pending_count == digits_per_byte_) {
                if (pending <= 255) out.push_back(static_cast<char>(pending));
                flush_pending();
            }
            continue;
        }
        flush_pending();  // incomplete digit group before a non-digit: dropped
        if (id == kSpace) out.push_back(' ');
        else if (id == kPlaceholder) out.push_back('x');
        // kEos and out-of-range ids produce nothing
    }
    return out;
}

std::vector<int> Tokenizer::word_of_token(std::span<const int> ids) const {
    std::vector<int> word(ids.size(), -1);
    int current_word = -1;
    bool in_word = false;
    int group_start = -1;
    int group_count = 0;
    auto drop_group = [&]() {
        if (group_count > 0)
            for (std::size_t k = static_cast<std::size_t>(group_start);
                 k < static_cast<std::size_t>(group_start) + static_cast<std::size_t>(group_count); ++k)
                word[k] = -2;  // provisional: incomplete, resolved below
        group_start = -1;
        group_count = 0;
    };
    for (std::size_t i = 0; i < ids.size(); ++i) {
        int id = ids[i];
        if (id >= kFirstDigit && id < vocab_size_) {
            if (!in_word) {
                ++current_word;
                in_word = true;
            }
            if (group_count == 0) group_start = static_cast<int>(i);
            word[i] = current_word;
            if (++group_count == digits_per_byte_) {
                group_start = -1;
                group_count = 0;
            }
            continue;
        }
        drop_group();
        if (id == kPlaceholder) {
            if (!in_word) {
                ++current_word;
                in_word = true;
            }
            word[i] = current_word;
        } else {
            in_word = false;  // space / eos / unknown ends the word
        }
    }
    drop_group();
    for (int& w : word)
        if (w == -2) w = -1;
    return word;
}

std::vector<std::string> Tokenizer::words(std::span<const int> ids) const {
    return split_words(detokenize(ids));
}

// ---------------------------------------------------------------------------
// ResidualTrace
// ---------------------------------------------------------------------------

ResidualTrace::ResidualTrace(int num_layers, int num_heads, int seq_len, int dim)
    : num_layers_(num_layers), num_heads_(num_heads), seq_len_(seq_len), dim_(dim) {
    hidden_.assign(static_cast<std::size_t>(num_layers) + 1, std::vector<Vec>(static_cast<std::size_t>(seq_len)));
    attn_out_.assign(static_cast<std::size_t>(num_layers), std::vector<Vec>(static_cast<std::size_t>(seq_len)));
    mlp_out_.assign(static_cast<std::size_t>(num_layers), std::vector<Vec>(static_cast<std::size_t>(seq_len)));
    attention_.assign(static_cast<std::size_t>(num_layers), std::vector<Mat>(static_cast<std::size_t>(num_heads)));
}

void ResidualTrace::check_coord_(int layer, int pos, int max_layer) const {
    if (layer < 0 || layer > max_layer)
        throw Error(Error::Kind::range, "trace: layer " + std::to_string(layer) + " out of range");
    if (pos < 0 || pos >= seq_len_)
        throw Error(Error::Kind::range, "trace: position " + std::to_string(pos) + " out of range");
}

bool ResidualTrace::has_hidden(int layer, int pos) const {
    if (layer < 0 || layer > num_layers_ || pos < 0 || pos >= seq_len_) return false;
    return !hidden_[static_cast<std::size_t>(layer)][static_cast<std::size_t>(pos)].empty();
}

const Vec& ResidualTrace::hidden(int layer, int pos) const {
    check_coord_(layer, pos, num_layers_);
    const Vec& v = hidden_[static_cast<std::size_t>(layer)][static_cast<std::size_t>(pos)];
    if (v.empty())
        throw Error(Error::Kind::range, "trace: hidden state (" + std::to_string(layer) + "," +
                                            std::to_string(pos) + ") was not captured");
    return v;
}

bool ResidualTrace::has_block(int layer, int pos) const {
    if (layer < 1 || layer > num_layers_ || pos < 0 || pos >= seq_len_) return false;
    return !attn_out_[static_cast<std::size_t>(layer - 1)][static_cast<std::size_t>(pos)].empty();
}

const Vec& ResidualTrace::attn_out(int layer, int pos) const {
    if (layer < 1) throw Error(Error::Kind::range, "trace: block outputs exist for layers 1..L");
    check_coord_(layer - 1, pos, num_layers_ - 1);
    const Vec& v = attn_out_[static_cast<std::size_t>(layer - 1)][static_cast<std::size_t>(pos)];
    if (v.empty())
        throw Error(Error::Kind::range, "trace: attn_out (" + std::to_string(layer) + "," +
                                            std::to_string(pos) + ") was not captured");
    return v;
}

const Vec& ResidualTrace::mlp_out(int layer, int pos) const {
    if (layer < 1) throw Error(Error::Kind::range, "trace: block outputs exist for layers 1..L");
    check_coord_(layer - 1, pos, num_layers_ - 1);
    const Vec& v = mlp_out_[static_cast<std::size_t>(layer - 1)][static_cast<std::size_t>(pos)];
    if (v.empty())
        throw Error(Error::Kind::range, "trace: mlp_out (" + std::to_string(layer) + "," +
                                            std::to_string(pos) + ") was not captured");
    return v;
}

bool ResidualTrace::has_attention(int layer, int head) const {
    if (layer < 1 || layer > num_layers_ || head < 0 || head >= num_heads_) return false;
    return attention_[static_cast<std::size_t>(layer - 1)][static_cast<std::size_t>(head)].rows > 0;
}

const Mat& ResidualTrace::attention(int layer, int head) const {
    if (!has_attention(layer, head))
        throw Error(Error::Kind::range, "trace: attention (" + std::to_string(layer) + ", head " +
                                            std::to_string(head) + ") was not captured");
    return attention_[static_cast<std::size_t>(layer - 1)][static_cast<std::size_t>(head)];
}

bool ResidualTrace::residual_identity_holds() const {
    for (int l = 1; l <= num_layers_; ++l) {
        for (int i = 0; i < seq_len_; ++i) {
            if (!has_hidden(l, i) || !has_hidden(l - 1, i) || !has_block(l, i)) continue;
            const Vec& x = hidden(l, i);
            const Vec& prev = hidden(l - 1, i);
            const Vec& a = attn_out(l, i);
            const Vec& m = mlp_out(l, i);
            for (int k = 0; k < dim_; ++k) {
                double expected = (prev[static_cast<std::size_t>(k)] + a[static_cast<std::size_t>(k)]) +
                                  m[static_cast<std::size_t>(k)];
                if (x[static_cast<std::size_t>(k)] != expected) return false;
            }
        }
    }
    return true;
}

void ResidualTrace::set_hidden(int layer, int pos, Vec v) {
    check_coord_(layer, pos, num_layers_);
    hidden_[static_cast<std::size_t>(layer)][static_cast<std::size_t>(pos)] = std::move(v);
}

void ResidualTrace::set_block(int layer, int pos, Vec attn, Vec mlp) {
    check_coord_(layer - 1, pos, num_layers_ - 1);
    attn_out_[static_cast<std::size_t>(layer - 1)][static_cast<std::size_t>(pos)] = std::move(attn);
    mlp_out_[static_cast<std::size_t>(layer - 1)][static_cast<std::size_t>(pos)] = std::move(mlp);
}

void ResidualTrace::set_attention(int layer, int head, Mat a) {
    attention_[static_cast<std::size_t>(layer - 1)][static_cast<std::size_t>(head)] = std::move(a);
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

Model::Model(ModelWeights weights)
    : weights_(std::move(weights)),
      tokenizer_(weights_.config.vocab_size, weights_.config.max_seq_len) {
    weights_.validate();
}

namespace {

struct CapturePlan {
    std::vector<bool> layer_on;  // level 0..L
    std::optional<std::vector<bool>> pos_on;
    bool attention = false;

    bool layer(int l) const { return layer_on[static_cast<std::size_t>(l)]; }
    bool pos(int p) const { return !pos_on || (*pos_on)[static_cast<std::size_t>(p)]; }
};

CapturePlan make_plan(const CaptureSpec& spec, int num_layers, int seq_len) {
    CapturePlan plan;
    plan.layer_on.assign(static_cast<std::size_t>(num_layers) + 1, false);
    for (int l : spec.layers) {
        if (l < 0 || l > num_layers)
            throw Error(Error::Kind::range, "capture: layer " + std::to_string(l) + " out of range 0.." +
                                                std::to_string(num_layers));
        plan.layer_on[static_cast<std::size_t>(l)] = true;
    }
    if (spec.positions) {
        plan.pos_on.emplace(static_cast<std::size_t>(seq_len), false);
        for (int p : *spec.positions) {
            if (p < 0 || p >= seq_len)
                throw Error(Error::Kind::range, "capture: position " + std::to_string(p) +
                                                    " out of range for sequence of length " +
                                                    std::to_string(seq_len));
            (*plan.pos_on)[static_cast<std::size_t>(p)] = true;
        }
    }
    plan.attention = spec.include_attention;
    return plan;
}

}  // namespace

ForwardResult Model::forward(const TokenSequence& tokens, const CaptureSpec& capture,
                             const LayerHook& hook) const {
    const ModelConfig& c = weights_.config;
    const int seq = tokens.size();
    if (seq < 1) throw Error(Error::Kind::length, "forward: empty token sequence");
    if (seq > c.max_seq_len)
        throw Error(Error::Kind::length, "forward: sequence length " + std::to_string(seq) +
                                             " exceeds max_seq_len " + std::to_string(c.max_seq_len));
    for (int id : tokens.ids)
        if (id < 0 || id >= c.vocab_size)
            throw Error(Error::Kind::range, "forward: token id " + std::to_string(id) + " out of vocabulary");

    CapturePlan plan = make_plan(capture, c.num_layers, seq);
    ResidualTrace trace(c.num_layers, c.num_heads, seq, c.model_dim);

    // x^0 = token embeddings
    std::vector<Vec> states(static_cast<std::size_t>(seq));
    for (int i = 0; i < seq; ++i) {
        auto row = weights_.embedding.row(tokens.ids[static_cast<std::size_t>(i)]);
        states[static_cast<std::size_t>(i)].assign(row.begin(), row.end());
    }
    if (plan.layer(0))
        for (int i = 0; i < seq; ++i)
            if (plan.pos(i)) trace.set_hidden(0, i, states[static_cast<std::size_t>(i)]);

    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(c.head_dim));

    for (int l = 1; l <= c.num_layers; ++l) {
        const LayerWeights& lw = weights_.layers[static_cast<std::size_t>(l - 1)];
        std::vector<Vec> attn(static_cast<std::size_t>(seq), Vec(static_cast<std::size_t>(c.model_dim), 0.0));

        for (int h = 0; h < c.num_heads; ++h) {
            const Mat& wq = lw.w_q[static_cast<std::size_t>(h)];
            const Mat& wk = lw.w_k[static_cast<std::size_t>(h)];
            const Mat& wv = lw.w_v[static_cast<std::size_t>(h)];
            const Mat& wo = lw.w_o[static_cast<std::size_t>(h)];

            std::vector<Vec> q(static_cast<std::size_t>(seq)), k(static_cast<std::size_t>(seq)),
                v(static_cast<std::size_t>(seq));
            for (int i = 0; i < seq; ++i) {
                q[static_cast<std::size_t>(i)] = vec_mat(states[static_cast<std::size_t>(i)], wq);
                k[static_cast<std::size_t>(i)] = vec_mat(states[static_cast<std::size_t>(i)], wk);
                v[static_cast<std::size_t>(i)] = vec_mat(states[static_cast<std::size_t>(i)], wv);
            }

            // causal row-wise softmax over j <= i
            Mat a(seq, seq);
            for (int i = 0; i < seq; ++i) {
                double maxs = -1e300;
                for (int j = 0; j <= i; ++j) {
                    double s = dot(q[static_cast<std::size_t>(i)], k[static_cast<std::size_t>(j)]) * inv_sqrt_dh;
                    a(i, j) = s;
                    if (s > maxs) maxs = s;
                }
                double z = 0.0;
                for (int j = 0; j <= i; ++j) {
                    double e = std::exp(a(i, j) - maxs);
                    a(i, j) = e;
                    z += e;
                }
                for (int j = 0; j <= i; ++j) a(i, j) /= z;
            }

            for (int i = 0; i < seq; ++i) {
                Vec head(static_cast<std::size_t>(c.head_dim), 0.0);
                for (int j = 0; j <= i; ++j) {
                    double w = a(i, j);
                    if (w == 0.0) continue;
                    const Vec& vj = v[static_cast<std::size_t>(j)];
                    for (int t = 0; t < c.head_dim; ++t) head[static_cast<std::size_t>(t)] += w * vj[static_cast<std::size_t>(t)];
                }
                Vec proj = vec_mat(head, wo);
                add_inplace(attn[static_cast<std::size_t>(i)], proj);
            }

            if (plan.attention && plan.layer(l)) trace.set_attention(l, h, std::move(a));
        }

        std::vector<Vec> next(static_cast<std::size_t>(seq));
        std::vector<Vec> mlp(static_cast<std::size_t>(seq));
        for (int i = 0; i < seq; ++i) {
            Vec mid = states[static_cast<std::size_t>(i)];
            add_inplace(mid, attn[static_cast<std::size_t>(i)]);
            Vec hdn = vec_mat(mid, lw.mlp_in);
            for (double& x : hdn) x = gelu(x);
            Vec m = vec_mat(hdn, lw.mlp_out);
            Vec x = mid;
            add_inplace(x, m);
            if (!all_finite(x))
                throw Error(Error::Kind::numeric, "forward: non-finite value at layer " +
                                                      std::to_string(l) + ", position " + std::to_string(i));
            mlp[static_cast<std::size_t>(i)] = std::move(m);
            next[static_cast<std::size_t>(i)] = std::move(x);
        }

        // patch hook runs before layer l+1 (or the unembedding) consumes x^l;
        // the trace stores the patched stream
        if (hook) hook(l, next);

        if (plan.layer(l)) {
            for (int i = 0; i < seq; ++i) {
                if (!plan.pos(i)) continue;
                trace.set_hidden(l, i, next[static_cast<std::size_t>(i)]);
                trace.set_block(l, i, attn[static_cast<std::size_t>(i)], mlp[static_cast<std::size_t>(i)]);
            }
        }
        states = std::move(next);
    }

    Mat logits(seq, c.vocab_size);
    for (int i = 0; i < seq; ++i) {
        Vec row = vec_mat(states[static_cast<std::size_t>(i)], weights_.unembedding);
        if (!all_finite(row))
            throw Error(Error::Kind::numeric,
                        "forward: non-finite logits at position " + std::to_string(i));
        std::copy(row.begin(), row.end(), logits.row(i).begin());
    }
    return ForwardResult{std::move(logits), std::move(trace)};
}

int Model::unembed_argmax(std::span<const double> hidden) const {
    const ModelConfig& c = weights_.config;
    if (static_cast<int>(hidden.size()) != c.model_dim)
        throw Error(Error::Kind::shape, "unembed_argmax: expected vector of dim " +
                                            std::to_string(c.model_dim) + ", got " +
                                            std::to_string(hidden.size()));
    if (!all_finite(hidden)) throw Error(Error::Kind::numeric, "unembed_argmax: non-finite input");
    Vec logits = vec_mat(hidden, weights_.unembedding);
    int best = 0;
    for (int v = 1; v < c.vocab_size; ++v)
        if (logits[static_cast<std::size_t>(v)] > logits[static_cast<std::size_t>(best)]) best = v;
    return best;
}

GenerationResult Model::generate(const TokenSequence& tokens, int max_steps, bool keep_logits,
                                 const LayerHook& hook) const {
    const ModelConfig& c = weights_.config;
    if (max_steps < 1) throw Error(Error::Kind::precondition, "generate: max_steps must be >= 1");
    if (tokens.size() < 1) throw Error(Error::Kind::length, "generate: empty prompt");

    TokenSequence current = tokens;
    GenerationResult result;
    std::vector<Vec> step_logits;
    for (int step = 0; step < max_steps; ++step) {
        if (current.size() > c.max_seq_len)
            throw Error(Error::Kind::length, "generate: context overflow at step " + std::to_string(step));
        ForwardResult fwd = forward(current, CaptureSpec::none(), hook);
        auto last = fwd.logits.row(fwd.logits.rows - 1);
        int best = 0;
        for (int v = 1; v < c.vocab_size; ++v)
            if (last[static_cast<std::size_t>(v)] > last[static_cast<std::size_t>(best)]) best = v;
        if (best == Tokenizer::kEos) break;
        if (keep_logits) step_logits.emplace_back(last.begin(), last.end());
        result.output_tokens.push_back(best);
        current.ids.push_back(best);
    }
    result.output_text = tokenizer_.detokenize(result.output_tokens);
    if (keep_logits) {
        Mat m(static_cast<int>(step_logits.size()), c.vocab_size);
        for (std::size_t i = 0; i < step_logits.size(); ++i)
            std::copy(step_logits[i].begin(), step_logits[i].end(), m.row(static_cast<int>(i)).begin());
        result.per_step_logits = std::move(m);
    }
    return result;
}

}  // namespace culturescope
