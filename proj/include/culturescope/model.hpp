#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "culturescope/matrix.hpp"

namespace culturescope {

// ---------------------------------------------------------------------------
// Configuration and weights
// ---------------------------------------------------------------------------

struct ModelConfig {
    int vocab_size = 0;      // V
    int model_dim = 0;       // d
    int num_layers = 0;      // L
    int num_heads = 0;       // H
    int head_dim = 0;        // d_h, with d = H * d_h
    int mlp_hidden_dim = 0;
    int max_seq_len = 0;

    void validate() const;  // throws Error{config}
};

struct LayerWeights {
    std::vector<Mat> w_q;  // per head, d x d_h
    std::vector<Mat> w_k;  // per head, d x d_h
    std::vector<Mat> w_v;  // per head, d x d_h
    std::vector<Mat> w_o;  // per head, d_h x d
    Mat mlp_in;            // d x mlp_hidden_dim
    Mat mlp_out;           // mlp_hidden_dim x d
};

// No bias terms anywhere; immutable after load.
struct ModelWeights {
    ModelConfig config;
    Mat embedding;    // V x d
    std::vector<LayerWeights> layers;
    Mat unembedding;  // d x V

    void validate() const;  // shapes + finiteness; throws Error{shape,numeric}
};

ModelWeights random_weights(const ModelConfig& config, std::uint64_t seed);

// Binary weight file: magic, format version, config, then all matrices
// row-major as float64 in a fixed order.
void save_weights(const ModelWeights& weights, const std::filesystem::path& path);
ModelWeights load_weights(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Tokenizer
//
// Deterministic, byte-complete, and invertible up to whitespace
// normalization. Reserved ids: 0 end-of-sequence, 1 space (any whitespace
// run), 2 the literal byte 'x' (so a trailing placeholder "x" is always a
// single token). Every other byte is spelled as a fixed-width group of
// base-(V-3) digit tokens.
// ---------------------------------------------------------------------------

struct TokenSequence {
    std::vector<int> ids;

    int size() const { return static_cast<int>(ids.size()); }
};

struct TokenPiece {
    int id = 0;
    std::size_t byte_begin = 0;  // range in the original text
    std::size_t byte_end = 0;
};

class Tokenizer {
public:
    static constexpr int kEos = 0;
    static constexpr int kSpace = 1;
    static constexpr int kPlaceholder = 2;  // the byte 'x'
    static constexpr int kFirstDigit = 3;

    Tokenizer(int vocab_size, int max_seq_len);

    TokenSequence tokenize(const std::string& text) const;
    std::vector<TokenPiece> tokenize_with_offsets(const std::string& text) const;
    std::string detokenize(std::span<const int> ids) const;

    // Word index for each token (-1 for spaces, eos, and incomplete digit
    // groups); words are the whitespace-separated chunks of detokenize().
    std::vector<int> word_of_token(std::span<const int> ids) const;
    std::vector<std::string> words(std::span<const int> ids) const;

    int base() const { return base_; }
    int digits_per_byte() const { return digits_per_byte_; }
    int vocab_size() const { return vocab_size_; }

private:
    int vocab_size_;
    int max_seq_len_;
    int base_;
    int digits_per_byte_;
};

// ---------------------------------------------------------------------------
// Traces and capture
// ---------------------------------------------------------------------------

struct CaptureSpec {
    std::vector<int> layers;                     // residual levels, 0..L (0 = embeddings)
    std::optional<std::vector<int>> positions;   // nullopt = all positions
    bool include_attention = false;

    static CaptureSpec none() { return {}; }
    static CaptureSpec everything(int num_layers) {
        CaptureSpec s;
        for (int l = 0; l <= num_layers; ++l) s.layers.push_back(l);
        s.include_attention = true;
        return s;
    }
};

// Captured residual stream. hidden(l, i) is x_i^l with layer 0 holding the
// embeddings; attn_out / mlp_out / attention exist for block layers 1..L.
// Values are stored from the forward computation itself, so wherever the
// full quadruple was captured, x^l == (x^{l-1} + a^l) + m^l bit for bit.
class ResidualTrace {
public:
    ResidualTrace() = default;
    ResidualTrace(int num_layers, int num_heads, int seq_len, int dim);

    int seq_len() const { return seq_len_; }
    int num_layers() const { return num_layers_; }
    int num_heads() const { return num_heads_; }
    int dim() const { return dim_; }

    bool has_hidden(int layer, int pos) const;
    const Vec& hidden(int layer, int pos) const;
    bool has_block(int layer, int pos) const;
    const Vec& attn_out(int layer, int pos) const;
    const Vec& mlp_out(int layer, int pos) const;
    bool has_attention(int layer, int head) const;
    const Mat& attention(int layer, int head) const;

    // True when every fully captured coordinate satisfies the residual
    // identity exactly (bit-for-bit). Patched traces fail at the patched
    // coordinate by construction.
    bool residual_identity_holds() const;

    void set_hidden(int layer, int pos, Vec v);
    void set_block(int layer, int pos, Vec attn, Vec mlp);
    void set_attention(int layer, int head, Mat a);

private:
    void check_coord_(int layer, int pos, int max_layer) const;

    int num_layers_ = 0;
    int num_heads_ = 0;
    int seq_len_ = 0;
    int dim_ = 0;
    std::vector<std::vector<Vec>> hidden_;    // (L+1) x S; empty vec = not captured
    std::vector<std::vector<Vec>> attn_out_;  // L x S (layer l at index l-1)
    std::vector<std::vector<Vec>> mlp_out_;   // L x S
    std::vector<std::vector<Mat>> attention_; // L x H
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct ForwardResult {
    Mat logits;  // S x V
    ResidualTrace trace;
};

struct GenerationResult {
    std::vector<int> output_tokens;
    std::string output_text;
    std::optional<Mat> per_step_logits;  // P x V when requested
};

// Called after block layer l (1..L) finishes; may overwrite entries of
// `states` (the x^l vectors, one per position) before layer l+1 consumes
// them. This is the mechanism activation patching plugs into.
using LayerHook = std::function<void(int layer, std::vector<Vec>& states)>;

class Model {
public:
    explicit Model(ModelWeights weights);

    const ModelConfig& config() const { return weights_.config; }
    const ModelWeights& weights() const { return weights_; }
    const Tokenizer& tokenizer() const { return tokenizer_; }

    ForwardResult forward(const TokenSequence& tokens, const CaptureSpec& capture,
                          const LayerHook& hook = nullptr) const;

    // Greedy decoding; ties break to the lowest token id; stops at the
    // end-of-sequence token or after max_steps.
    GenerationResult generate(const TokenSequence& tokens, int max_steps,
                              bool keep_logits = false, const LayerHook& hook = nullptr) const;

    int unembed_argmax(std::span<const double> hidden) const;

private:
    ModelWeights weights_;
    Tokenizer tokenizer_;
};

}  // namespace culturescope
