#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fedmgp/backbone.hpp"
#include "fedmgp/tensor.hpp"

namespace fedmgp {

struct QueryResult {
    std::vector<int> indices;      // pool indices (global) or class ids (local)
    std::vector<double> distances; // matching cosine distances, non-decreasing
};

// 1 - cos(u, v), range [0, 2]. Plain forward variant; the differentiable one
// lives on the tape.
double cosine_distance(std::span<const double> u, std::span<const double> v);

struct GlobalPromptEntry {
    Tensor key;     // (1 x D)
    Tensor prompt;  // (L x D)
};

// M (key, prompt) pairs. Entry order is stable and entry indices are the
// identity of prompts across clients, so pools initialized from a shared seed
// stay index-aligned for element-wise aggregation.
//
// Wire format: one text header line "FEDMGP-GPOOL M=<m> L=<l> D=<d>\n"
// followed by little-endian f64: all keys in index order, then all prompts in
// index order.
class GlobalPromptPool {
public:
    GlobalPromptPool() = default;

    // Keys and prompts drawn uniform in [-0.03, 0.03]; draw order is key then
    // prompt per entry, entries in index order.
    static GlobalPromptPool seeded(int pool_size, int prompt_length, int embed_dim,
                                   std::uint64_t seed);

    int pool_size() const { return static_cast<int>(entries_.size()); }
    int prompt_length() const { return prompt_length_; }
    int embed_dim() const { return embed_dim_; }
    GlobalPromptEntry& entry(int i) { return entries_.at(static_cast<std::size_t>(i)); }
    const GlobalPromptEntry& entry(int i) const { return entries_.at(static_cast<std::size_t>(i)); }

    // Top-N by cosine distance to input_key, ties broken by lower index.
    QueryResult query(const Tensor& input_key, int top_n) const;

    void set_trainable(bool on);
    bool trainable() const;

    GlobalPromptPool clone() const;
    std::uint64_t checksum() const;
    std::vector<unsigned char> serialize() const;
    static GlobalPromptPool deserialize(std::span<const unsigned char> bytes);

private:
    int prompt_length_ = 0;
    int embed_dim_ = 0;
    std::vector<GlobalPromptEntry> entries_;
};

struct LocalPromptEntry {
    Tensor key;  // (1 x D)
    // One (p_k, p_v) pair per attached block, each (prefix_len x D).
    std::vector<std::pair<Tensor, Tensor>> prefixes;
};

// Class-wise prefix pool; one entry per class the owning client has seen.
//
// Wire format: header "FEDMGP-LPOOL D=<d> LP=<lp> BLOCKS=<b0,b1> CLASSES=<c0,c1,...>\n"
// followed by little-endian f64: all keys in class order, then per class per
// attached block p_k then p_v.
class LocalPromptPool {
public:
    LocalPromptPool() = default;
    LocalPromptPool(int prefix_length, int embed_dim, std::vector<int> attached_blocks,
                    std::uint64_t init_seed);

    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    int prefix_length() const { return prefix_length_; }
    int embed_dim() const { return embed_dim_; }
    const std::vector<int>& attached_blocks() const { return attached_blocks_; }
    bool contains(int class_id) const { return entries_.count(class_id) > 0; }
    std::vector<int> class_ids() const;

    // Training-time selection: returns the entry for label, creating a
    // freshly initialized trainable entry on first encounter of the class.
    LocalPromptEntry& select_by_mask(int label);
    const LocalPromptEntry& entry(int class_id) const { return entries_.at(class_id); }

    // Indices in the result are class ids. Empty pool raises
    // NoLocalKnowledgeError.
    QueryResult query(const Tensor& prompted_key, int top_n = 1) const;

    // Prefix packs referring to the entry's own tensors (gradients reach the
    // pool through them).
    std::vector<PrefixPack> prefixes_for(int class_id) const;

    void set_trainable(bool on);
    std::uint64_t checksum() const;
    std::vector<unsigned char> serialize() const;
    static LocalPromptPool deserialize(std::span<const unsigned char> bytes);

private:
    int prefix_length_ = 0;
    int embed_dim_ = 0;
    std::vector<int> attached_blocks_;
    std::uint64_t init_seed_ = 0;
    std::map<int, LocalPromptEntry> entries_;  // ordered by class id
};

// Prompt tokens first, in selection order, then the token matrix unchanged.
Tensor prepend(Tape& tape, std::span<const Tensor> prompts, const Tensor& tokens);

struct PoolParamCount {
    std::uint64_t global_prompt_params = 0;  // M*L*D
    std::uint64_t global_key_params = 0;     // M*D
    std::uint64_t local_prompt_params = 0;   // C*|blocks|*2*prefix_len*D
    std::uint64_t local_key_params = 0;      // C*D, one key per class entry
    std::uint64_t local_key_slot_params = 0; // M*D, keys counted per pool slot

    std::uint64_t transmitted_per_round() const {
        return global_prompt_params + global_key_params;
    }
    std::uint64_t prompt_total() const {
        return global_prompt_params + global_key_params + local_prompt_params + local_key_params;
    }
    // Headline trainable-prompt figure with local keys counted at pool-slot
    // granularity rather than per class entry.
    std::uint64_t prompt_total_slot_keys() const {
        return global_prompt_params + global_key_params + local_prompt_params +
               local_key_slot_params;
    }
};

PoolParamCount pool_param_count(std::uint64_t pool_size, std::uint64_t prompt_length,
                                std::uint64_t embed_dim, std::uint64_t classes,
                                std::uint64_t prefix_length, std::uint64_t attached_blocks);

}  // namespace fedmgp
