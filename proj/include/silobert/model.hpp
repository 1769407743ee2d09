#pragma once

// A small BERT-style encoder: learned absolute position embeddings,
// post-layer-norm residual blocks, multi-head scaled dot-product attention,
// and MLM / NSP / token-classification heads. All dimensions are
// configurable; defaults are a desk-scale configuration.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "silobert/errors.hpp"
#include "silobert/rng.hpp"
#include "silobert/tensor.hpp"

namespace silobert {

struct ModelConfig {
    std::size_t num_layers = 2;
    std::size_t hidden_size = 64;
    std::size_t num_heads = 4;
    std::size_t intermediate_size = 0;  // 0 -> 4 * hidden_size
    std::size_t vocab_size = 500;
    std::size_t max_seq_len = 64;
    std::size_t type_vocab = 2;
    double dropout_p = 0.1;
    std::size_t num_ner_labels = 7;
    bool use_nsp = true;           // NSP kept by default, disable via config
    bool tie_mlm_embeddings = false;

    std::size_t ffn_size() const {
        return intermediate_size == 0 ? 4 * hidden_size : intermediate_size;
    }
    std::size_t head_dim() const { return hidden_size / num_heads; }

    void validate() const {
        if (num_layers == 0 || hidden_size == 0 || num_heads == 0 ||
            vocab_size == 0 || max_seq_len == 0 || type_vocab == 0 ||
            num_ner_labels == 0) {
            throw ConfigError("model config: all sizes must be >= 1");
        }
        if (hidden_size % num_heads != 0) {
            throw ConfigError("model config: hidden_size " +
                              std::to_string(hidden_size) +
                              " not divisible by num_heads " +
                              std::to_string(num_heads));
        }
        if (dropout_p < 0.0 || dropout_p >= 1.0) {
            throw ConfigError("model config: dropout_p must be in [0,1)");
        }
    }
};

/// Ordered, named collection of parameter tensors. Iteration order is
/// fixed at construction and identical across silos and cycles, which the
/// federated aggregation step relies on.
class ParamSet {
  public:
    void add(std::string name, Tensor t) {
        if (index_.contains(name)) {
            throw ContractError("duplicate parameter name: " + name);
        }
        index_.emplace(name, entries_.size());
        entries_.emplace_back(std::move(name), std::move(t));
    }

    const Tensor& at(std::string_view name) const {
        auto it = index_.find(std::string(name));
        if (it == index_.end()) {
            throw ContractError("unknown parameter: " + std::string(name));
        }
        return entries_[it->second].second;
    }

    Tensor& at(std::string_view name) {
        auto it = index_.find(std::string(name));
        if (it == index_.end()) {
            throw ContractError("unknown parameter: " + std::string(name));
        }
        return entries_[it->second].second;
    }

    const std::vector<std::pair<std::string, Tensor>>& entries() const {
        return entries_;
    }

    /// Mutable view; callers must not rename entries or change shapes.
    std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }

    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }

    /// Deep copy: fresh storage for every tensor, gradients not carried.
    ParamSet deep_copy() const {
        ParamSet out;
        for (const auto& [name, t] : entries_) out.add(name, t.clone());
        return out;
    }

    void zero_grad() {
        for (auto& [name, t] : entries_) t.zero_grad();
    }

    /// Name of the first entry where this set and other disagree on name
    /// or shape, or nullopt when the two sets are congruent.
    std::optional<std::string> first_incongruence(const ParamSet& other) const {
        const std::size_t n = std::min(entries_.size(), other.entries_.size());
        for (std::size_t i = 0; i < n; ++i) {
            const auto& [an, at] = entries_[i];
            const auto& [bn, bt] = other.entries_[i];
            if (an != bn) return an + " vs " + bn;
            if (at.shape() != bt.shape()) {
                return an + ": " + shape_str(at.shape()) + " vs " +
                       shape_str(bt.shape());
            }
        }
        if (entries_.size() != other.entries_.size()) {
            const auto& longer =
                entries_.size() > other.entries_.size() ? *this : other;
            return longer.entries_[n].first + " (missing from one set)";
        }
        return std::nullopt;
    }

  private:
    std::vector<std::pair<std::string, Tensor>> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Per-layer, per-head attention probabilities captured for one sequence,
/// together with the padding mask used to restrict analysis to real
/// positions.
struct AttentionCapture {
    std::size_t num_layers = 0;
    std::size_t num_heads = 0;
    std::size_t seq_len = 0;
    std::vector<int> attn_mask;
    // probs[layer][head] holds a row-major [seq_len, seq_len] matrix
    std::vector<std::vector<std::vector<double>>> probs;

    std::span<const double> row(std::size_t layer, std::size_t head,
                                std::size_t pos) const {
        return std::span<const double>(probs[layer][head])
            .subspan(pos * seq_len, seq_len);
    }
};

namespace detail {

inline std::string layer_prefix(std::size_t l) {
    return "layer" + std::to_string(l) + ".";
}

}  // namespace detail

/// Builds the full parameter set: weights from a truncated normal
/// (stddev 0.02, clipped at two sigma), biases zero, layer-norm gains one.
/// Deterministic for a fixed (config, seed) pair.
inline ParamSet init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    ParamSet params;
    auto weight = [&](std::string name, std::size_t rows, std::size_t cols) {
        Tensor t(Shape{rows, cols}, true);
        for (double& v : t.data()) v = rng.truncated_normal(0.02);
        params.add(std::move(name), std::move(t));
    };
    auto bias = [&](std::string name, std::size_t n) {
        params.add(std::move(name), Tensor(Shape{n}, true));
    };
    auto norm = [&](const std::string& prefix, std::size_t n) {
        Tensor gain(Shape{n}, true);
        for (double& v : gain.data()) v = 1.0;
        params.add(prefix + ".gain", std::move(gain));
        params.add(prefix + ".bias", Tensor(Shape{n}, true));
    };

    const std::size_t h = cfg.hidden_size;
    weight("embeddings.word", cfg.vocab_size, h);
    weight("embeddings.position", cfg.max_seq_len, h);
    weight("embeddings.segment", cfg.type_vocab, h);
    norm("embeddings.norm", h);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        const std::string p = detail::layer_prefix(l);
        weight(p + "attn.wq", h, h);
        bias(p + "attn.bq", h);
        weight(p + "attn.wk", h, h);
        bias(p + "attn.bk", h);
        weight(p + "attn.wv", h, h);
        bias(p + "attn.bv", h);
        weight(p + "attn.wo", h, h);
        bias(p + "attn.bo", h);
        norm(p + "attn.norm", h);
        weight(p + "ffn.w1", h, cfg.ffn_size());
        bias(p + "ffn.b1", cfg.ffn_size());
        weight(p + "ffn.w2", cfg.ffn_size(), h);
        bias(p + "ffn.b2", h);
        norm(p + "ffn.norm", h);
    }
    weight("pooler.w", h, h);
    bias("pooler.b", h);
    weight("mlm.transform.w", h, h);
    bias("mlm.transform.b", h);
    norm("mlm.norm", h);
    if (!cfg.tie_mlm_embeddings) weight("mlm.decoder.w", h, cfg.vocab_size);
    bias("mlm.decoder.b", cfg.vocab_size);
    weight("nsp.w", h, 2);
    bias("nsp.b", 2);
    weight("ner.w", h, cfg.num_ner_labels);
    bias("ner.b", cfg.num_ner_labels);
    return params;
}

struct ForwardOptions {
    bool training = false;
    std::uint64_t dropout_seed = 0;
    bool capture_attention = false;
};

struct EncoderOutput {
    Tensor hidden;  // [seq_len, hidden_size]
    std::optional<AttentionCapture> capture;
};

/// Runs the encoder stack on one sequence. attn_mask marks real positions
/// with 1; padded key columns receive -1e9 before the softmax. Dropout is
/// applied only when opt.training is set, seeded per call site.
inline EncoderOutput encoder_forward(Tape& tape, const ModelConfig& cfg,
                                     const ParamSet& params,
                                     std::span<const int> token_ids,
                                     std::span<const int> segment_ids,
                                     std::span<const int> attn_mask,
                                     const ForwardOptions& opt = {}) {
    const std::size_t len = token_ids.size();
    if (len == 0) throw ContractError("encoder_forward: empty sequence");
    if (len > cfg.max_seq_len) {
        throw ContractError("encoder_forward: sequence length " +
                            std::to_string(len) + " exceeds max_seq_len " +
                            std::to_string(cfg.max_seq_len));
    }
    if (segment_ids.size() != len || attn_mask.size() != len) {
        throw ContractError(
            "encoder_forward: token/segment/mask lengths disagree");
    }
    for (int s : segment_ids) {
        if (s < 0 || static_cast<std::size_t>(s) >= cfg.type_vocab) {
            throw IndexError("encoder_forward: segment id " +
                             std::to_string(s) + " out of range");
        }
    }

    std::uint64_t dropout_site = 0;
    auto maybe_dropout = [&](Tensor x) {
        if (!opt.training || cfg.dropout_p == 0.0) return x;
        return dropout(tape, x, cfg.dropout_p,
                       derive_seed(opt.dropout_seed, dropout_site++));
    };

    std::vector<int> positions(len);
    for (std::size_t i = 0; i < len; ++i) positions[i] = static_cast<int>(i);

    Tensor x = add(tape,
                   add(tape,
                       embedding_lookup(tape, params.at("embeddings.word"),
                                        token_ids),
                       embedding_lookup(tape, params.at("embeddings.position"),
                                        positions)),
                   embedding_lookup(tape, params.at("embeddings.segment"),
                                    segment_ids));
    x = layer_norm(tape, x, params.at("embeddings.norm.gain"),
                   params.at("embeddings.norm.bias"));
    x = maybe_dropout(x);

    // additive key mask, shared by every layer and head
    Tensor key_mask(Shape{len, len});
    {
        auto mv = key_mask.data();
        for (std::size_t i = 0; i < len; ++i)
            for (std::size_t j = 0; j < len; ++j)
                mv[i * len + j] = attn_mask[j] ? 0.0 : -1e9;
    }

    AttentionCapture capture;
    if (opt.capture_attention) {
        capture.num_layers = cfg.num_layers;
        capture.num_heads = cfg.num_heads;
        capture.seq_len = len;
        capture.attn_mask.assign(attn_mask.begin(), attn_mask.end());
        capture.probs.resize(cfg.num_layers);
    }

    const std::size_t d = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        const std::string p = detail::layer_prefix(l);
        Tensor q = add(tape, matmul(tape, x, params.at(p + "attn.wq")),
                       params.at(p + "attn.bq"));
        Tensor k = add(tape, matmul(tape, x, params.at(p + "attn.wk")),
                       params.at(p + "attn.bk"));
        Tensor v = add(tape, matmul(tape, x, params.at(p + "attn.wv")),
                       params.at(p + "attn.bv"));
        std::vector<Tensor> contexts;
        contexts.reserve(cfg.num_heads);
        if (opt.capture_attention) capture.probs[l].resize(cfg.num_heads);
        for (std::size_t a = 0; a < cfg.num_heads; ++a) {
            Tensor qa = slice_cols(tape, q, a * d, (a + 1) * d);
            Tensor ka = slice_cols(tape, k, a * d, (a + 1) * d);
            Tensor va = slice_cols(tape, v, a * d, (a + 1) * d);
            Tensor scores = scalar_mul(
                tape, matmul(tape, qa, transpose(tape, ka)), scale);
            Tensor probs = softmax_rows(tape, add(tape, scores, key_mask));
            if (opt.capture_attention) {
                capture.probs[l][a].assign(probs.data().begin(),
                                           probs.data().end());
            }
            contexts.push_back(matmul(tape, probs, va));
        }
        Tensor attn_out =
            add(tape,
                matmul(tape, concat_cols(tape, contexts),
                       params.at(p + "attn.wo")),
                params.at(p + "attn.bo"));
        attn_out = maybe_dropout(attn_out);
        x = layer_norm(tape, add(tape, x, attn_out),
                       params.at(p + "attn.norm.gain"),
                       params.at(p + "attn.norm.bias"));
        Tensor inter = gelu(tape, add(tape, matmul(tape, x, params.at(p + "ffn.w1")),
                                      params.at(p + "ffn.b1")));
        Tensor ffn_out = add(tape, matmul(tape, inter, params.at(p + "ffn.w2")),
                             params.at(p + "ffn.b2"));
        ffn_out = maybe_dropout(ffn_out);
        x = layer_norm(tape, add(tape, x, ffn_out),
                       params.at(p + "ffn.norm.gain"),
                       params.at(p + "ffn.norm.bias"));
    }

    EncoderOutput out{std::move(x), std::nullopt};
    if (opt.capture_attention) out.capture = std::move(capture);
    return out;
}

/// MLM logits [seq_len, vocab] from final hidden states:
/// transform -> gelu -> layer norm -> decoder.
inline Tensor mlm_logits_from_hidden(Tape& tape, const ModelConfig& cfg,
                                     const ParamSet& params,
                                     const Tensor& hidden) {
    Tensor t = gelu(tape,
                    add(tape, matmul(tape, hidden, params.at("mlm.transform.w")),
                        params.at("mlm.transform.b")));
    t = layer_norm(tape, t, params.at("mlm.norm.gain"),
                   params.at("mlm.norm.bias"));
    Tensor w = cfg.tie_mlm_embeddings
                   ? transpose(tape, params.at("embeddings.word"))
                   : params.at("mlm.decoder.w");
    return add(tape, matmul(tape, t, w), params.at("mlm.decoder.b"));
}

/// NSP logits [1, 2] from the pooled [CLS] representation.
inline Tensor nsp_logits_from_hidden(Tape& tape, const ParamSet& params,
                                     const Tensor& hidden) {
    Tensor cls = slice_rows(tape, hidden, 0, 1);
    Tensor pooled = tanh(tape, add(tape, matmul(tape, cls, params.at("pooler.w")),
                                   params.at("pooler.b")));
    return add(tape, matmul(tape, pooled, params.at("nsp.w")),
               params.at("nsp.b"));
}

/// Masked-token prediction loss. labels carry the original token id at
/// selected positions and ignore_index everywhere else.
inline Tensor mlm_loss(Tape& tape, const ModelConfig& cfg,
                       const ParamSet& params, std::span<const int> token_ids,
                       std::span<const int> segment_ids,
                       std::span<const int> attn_mask,
                       std::span<const int> labels, int ignore_index = -1,
                       const ForwardOptions& opt = {}) {
    if (labels.size() != token_ids.size()) {
        throw ContractError("mlm_loss: labels length does not match sequence");
    }
    EncoderOutput enc =
        encoder_forward(tape, cfg, params, token_ids, segment_ids, attn_mask, opt);
    Tensor logits = mlm_logits_from_hidden(tape, cfg, params, enc.hidden);
    return cross_entropy_logits(tape, logits, labels, ignore_index);
}

/// Next-sentence loss for one pair; is_next is 1 for consecutive segments.
inline Tensor nsp_loss(Tape& tape, const ModelConfig& cfg,
                       const ParamSet& params, std::span<const int> token_ids,
                       std::span<const int> segment_ids,
                       std::span<const int> attn_mask, int is_next,
                       const ForwardOptions& opt = {}) {
    if (is_next != 0 && is_next != 1) {
        throw ContractError("nsp_loss: is_next must be 0 or 1");
    }
    EncoderOutput enc =
        encoder_forward(tape, cfg, params, token_ids, segment_ids, attn_mask, opt);
    Tensor logits = nsp_logits_from_hidden(tape, params, enc.hidden);
    const int target[1] = {is_next};
    return cross_entropy_logits(tape, logits, target);
}

/// Token-classification logits [seq_len, num_ner_labels] from a single
/// linear layer over the final hidden states.
inline Tensor ner_logits(Tape& tape, const ModelConfig& cfg,
                         const ParamSet& params, std::span<const int> token_ids,
                         std::span<const int> segment_ids,
                         std::span<const int> attn_mask,
                         const ForwardOptions& opt = {}) {
    EncoderOutput enc =
        encoder_forward(tape, cfg, params, token_ids, segment_ids, attn_mask, opt);
    return add(tape, matmul(tape, enc.hidden, params.at("ner.w")),
               params.at("ner.b"));
}

}  // namespace silobert
