#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <set>
#include <unordered_map>
#include <vector>

#include "fedmgp/adam.hpp"
#include "fedmgp/backbone.hpp"
#include "fedmgp/data.hpp"
#include "fedmgp/prompts.hpp"

namespace fedmgp {

struct TrainConfig {
    double lambda1 = 0.5;  // global-phase key surrogate weight
    double lambda2 = 0.5;  // local-phase key surrogate weight
    int epochs_global = 1;
    int epochs_local = 1;
    std::size_t batch_size = 8;
    int top_n = 5;
    double learning_rate = 0.001;
    std::uint64_t seed = 42;
};

// Ablation switches: which prompt granularity participates in training and
// inference. Fusion handling lives with the server/harness.
enum class ClientAblation { Full, NoGlobalPrompts, NoLocalPrompts };

struct StepLoss {
    double total = 0.0;
    double cross_entropy = 0.0;
    double surrogate = 0.0;  // already weighted by lambda
};

struct PhaseReport {
    std::vector<StepLoss> steps;
    std::uint64_t global_pool_checksum_before = 0;
    std::uint64_t global_pool_checksum_after = 0;
    std::uint64_t local_pool_checksum_before = 0;
    std::uint64_t local_pool_checksum_after = 0;

    double first_total() const { return steps.empty() ? 0.0 : steps.front().total; }
    double last_total() const { return steps.empty() ? 0.0 : steps.back().total; }
};

struct BatchLoss {
    Tensor total, cross_entropy, surrogate_weighted;
    std::vector<Tensor> touched;  // parameters participating in this batch
};

// Per-client two-phase trainer: global prompts + global head against
// cross-entropy plus a key surrogate, then (with global prompts frozen)
// class-wise attention prefixes + local head.
class Client {
public:
    Client(int id, std::shared_ptr<const Backbone> backbone, int class_universe,
           GlobalPromptPool initial_pool, int prefix_length, std::vector<int> attached_blocks,
           TrainConfig cfg, ClientAblation ablation = ClientAblation::Full);

    int id() const { return id_; }
    const TrainConfig& train_config() const { return cfg_; }
    ClientAblation ablation() const { return ablation_; }

    PhaseReport global_phase(const SampleStore& store, const TaskSpec& task);
    void unfreeze_global();
    void freeze_global();
    PhaseReport local_phase(const SampleStore& store, const TaskSpec& task);

    // origin, when known, lets inference reuse the per-sample V(E) key cache
    // (valid forever against the frozen backbone).
    int infer_personalized(const Tensor& image, std::optional<std::size_t> origin = {}) const;
    int infer_global(const Tensor& image, const GlobalPromptPool* pool_override = nullptr,
                     std::optional<std::size_t> origin = {}) const;

    // Batch losses factored out so gradient checks can drive the exact
    // training path.
    BatchLoss global_batch_loss(Tape& tape, const SampleStore& store,
                                std::span<const std::size_t> refs);
    BatchLoss local_batch_loss(Tape& tape, const SampleStore& store,
                               std::span<const std::size_t> refs);

    // Logits with classes outside `exposed` masked to a large negative
    // value pre-softmax. Training masks to the current task's classes (old
    // rows receive zero gradient); inference masks to all seen classes.
    Tensor masked_logits(Tape& tape, const Tensor& feature, const Tensor& head_w,
                         const Tensor& head_b, const std::set<int>& exposed) const;

    const GlobalPromptPool& global_pool() const { return global_pool_; }
    GlobalPromptPool& global_pool() { return global_pool_; }
    const LocalPromptPool& local_pool() const { return local_pool_; }
    LocalPromptPool& local_pool() { return local_pool_; }
    void adopt_global_pool(const GlobalPromptPool& pool);

    const Tensor& global_head_weight() const { return global_head_w_; }
    const Tensor& global_head_bias() const { return global_head_b_; }
    const Tensor& local_head_weight() const { return local_head_w_; }
    const Tensor& local_head_bias() const { return local_head_b_; }

    const std::set<int>& seen_classes() const { return seen_classes_; }
    void observe_classes(const TaskSpec& task);
    int task_cursor() const { return task_cursor_; }
    void advance_task() { ++task_cursor_; }

    const Backbone& backbone() const { return *backbone_; }
    std::uint64_t backbone_checksum() const { return backbone_->checksum(); }

    // Every trainable prompt/key tensor, for accounting cross-checks.
    std::vector<Tensor> prompt_tensors() const;
    std::uint64_t head_param_count() const;

private:
    Tensor cached_input_key(const Tensor& image, std::size_t origin) const;
    Tensor input_key_for(Tape& tape, const Tensor& image, const Tensor& tokens,
                         std::optional<std::size_t> origin) const;

    // Prompted embedding E' and its plain feature V(E') for a stored sample.
    // Both are constants while the global pool holds still (local phase and
    // evaluation), so they are cached per origin and invalidated whenever the
    // pool values change.
    struct PromptedView {
        std::uint64_t generation = 0;
        Tensor tokens;   // detached (N*L + t) x D
        Tensor feature;  // detached 1 x D
    };
    const PromptedView& prompted_view(const Tensor& image, std::size_t origin) const;

    int phase_rng_counter_ = 0;
    std::uint64_t pool_generation_ = 1;

    int id_ = 0;
    std::shared_ptr<const Backbone> backbone_;
    int class_universe_ = 0;
    GlobalPromptPool global_pool_;
    LocalPromptPool local_pool_;
    Tensor global_head_w_, global_head_b_;
    Tensor local_head_w_, local_head_b_;
    AdamState adam_global_, adam_local_;
    std::set<int> seen_classes_;
    std::set<int> current_task_classes_;
    int task_cursor_ = 0;
    TrainConfig cfg_;
    ClientAblation ablation_ = ClientAblation::Full;

    // V(E) per sample origin; valid forever because the backbone is frozen.
    mutable std::unordered_map<std::size_t, Tensor> input_key_cache_;
    mutable std::unordered_map<std::size_t, PromptedView> prompted_cache_;
};

}  // namespace fedmgp
