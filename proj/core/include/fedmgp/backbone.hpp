#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedmgp/data.hpp"
#include "fedmgp/tensor.hpp"

namespace fedmgp {

struct BackboneConfig {
    std::size_t image_side = 32;
    std::size_t channels = 3;
    std::size_t patch_side = 4;
    std::size_t embed_dim = 64;
    std::size_t depth = 4;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 4;
    std::uint64_t seed = 42;

    std::size_t patch_dim() const { return patch_side * patch_side * channels; }
    std::size_t patch_count() const {
        const std::size_t side = image_side / patch_side;
        return side * side;
    }
    std::size_t token_count() const { return patch_count() + 1; }  // patches + class token
    void validate() const;
};

struct BlockWeights {
    Tensor ln1_gain, ln1_bias;
    Tensor w_q, w_k, w_v, w_o;    // each (D x D)
    Tensor ln2_gain, ln2_bias;
    Tensor mlp_w1;                // (D x D*mlp_ratio)
    Tensor mlp_w2;                // (D*mlp_ratio x D)
};

// Key/value prefix for one attention block, each (prefix_len x D). Queries
// are never extended.
struct PrefixPack {
    std::size_t block = 0;
    Tensor p_k;
    Tensor p_v;
};

// Small vision transformer. Token layout is [patch tokens...; class token];
// the class token stays the last row no matter how many prompt tokens get
// prepended in front, and features() always reads it from there.
//
// Checkpoint layout: 16-byte magic "FEDMGP-BACKBONE1", u64 little-endian
// metadata length, plain-text metadata (key=value lines), then little-endian
// f64 payloads in the order of all_weights(): patch_w, patch_b, pos, cls,
// then per block ln1_gain, ln1_bias, w_q, w_k, w_v, w_o, ln2_gain, ln2_bias,
// mlp_w1, mlp_w2.
class Backbone {
public:
    explicit Backbone(const BackboneConfig& cfg);

    const BackboneConfig& config() const { return cfg_; }
    bool frozen() const { return frozen_; }
    double warmup_accuracy() const { return warmup_accuracy_; }

    // (channels, side, side) image -> (tokens x D): patch projections plus
    // positional embeddings, class token last.
    Tensor embed(Tape& tape, const Tensor& image) const;

    // Attention sublayer of one block (no residual, no layer norm). With a
    // prefix, keys and values become [p_k; k] and [p_v; v].
    Tensor msa_forward(Tape& tape, const Tensor& tokens, std::size_t block,
                       const PrefixPack* prefix = nullptr) const;

    // Per-head attention probability matrices, forward-only (inspection).
    std::vector<Tensor> msa_attention(const Tensor& tokens, std::size_t block,
                                      const PrefixPack* prefix = nullptr) const;

    // Runs all blocks, returns the class-token feature as (1 x D). With
    // block_outputs, stores each block's output token matrix (detached).
    Tensor features(Tape& tape, const Tensor& tokens,
                    std::span<const PrefixPack> prefixes = {},
                    std::vector<Tensor>* block_outputs = nullptr) const;

    // Supervised warmup with a throwaway linear head, then freeze. With
    // steps == 0 the seeded initialization is frozen as-is.
    void pretrain(const SampleStore& warmup, const SampleRefs& refs, std::size_t steps,
                  std::size_t batch_size = 8, double learning_rate = 0.001);
    void freeze();

    static Backbone pretrain_and_freeze(const BackboneConfig& cfg, const SampleStore& warmup,
                                        const SampleRefs& refs, std::size_t steps,
                                        std::size_t batch_size = 8,
                                        double learning_rate = 0.001);

    std::vector<Tensor> all_weights();
    std::vector<Tensor> all_weights() const;
    std::uint64_t checksum() const;

    void save(const std::string& path) const;
    static Backbone load(const std::string& path);

private:
    BackboneConfig cfg_;
    Tensor patch_w_;  // (patch_dim x D)
    Tensor patch_b_;  // (D)
    Tensor pos_;      // (tokens x D)
    Tensor cls_;      // (1 x D)
    std::vector<BlockWeights> blocks_;
    bool frozen_ = false;
    double warmup_accuracy_ = 0.0;
};

}  // namespace fedmgp
