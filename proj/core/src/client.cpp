#include "fedmgp/client.hpp"

#include <algorithm>
#include <cmath>

#include "fedmgp/checksum.hpp"
#include "fedmgp/errors.hpp"
#include "fedmgp/rng.hpp"

namespace fedmgp {

namespace {
constexpr double kMaskValue = -1e9;
}

Client::Client(int id, std::shared_ptr<const Backbone> backbone, int class_universe,
               GlobalPromptPool initial_pool, int prefix_length,
               std::vector<int> attached_blocks, TrainConfig cfg, ClientAblation ablation)
    : id_(id),
      backbone_(std::move(backbone)),
      class_universe_(class_universe),
      global_pool_(std::move(initial_pool)),
      local_pool_(prefix_length, static_cast<int>(backbone_->config().embed_dim),
                  std::move(attached_blocks),
                  derive_seed(cfg.seed, {0x10CA1, static_cast<std::uint64_t>(id)})),
      cfg_(cfg),
      ablation_(ablation) {
    const std::size_t d = backbone_->config().embed_dim;
    const auto classes = static_cast<std::size_t>(class_universe_);
    global_head_w_ = Tensor({d, classes}, 0.0, true);
    global_head_b_ = Tensor({classes}, 0.0, true);
    local_head_w_ = Tensor({d, classes}, 0.0, true);
    local_head_b_ = Tensor({classes}, 0.0, true);
    adam_global_.learning_rate = cfg_.learning_rate;
    adam_local_.learning_rate = cfg_.learning_rate;
}

Tensor Client::cached_input_key(const Tensor& image, std::size_t origin) const {
    auto it = input_key_cache_.find(origin);
    if (it != input_key_cache_.end()) return it->second;
    Tape tape;
    Tensor tokens = backbone_->embed(tape, image);
    Tensor key = backbone_->features(tape, tokens).detached();
    input_key_cache_.emplace(origin, key);
    return key;
}

Tensor Client::input_key_for(Tape& tape, const Tensor& image, const Tensor& tokens,
                             std::optional<std::size_t> origin) const {
    if (origin.has_value()) return cached_input_key(image, *origin);
    return backbone_->features(tape, tokens.detached()).detached();
}

const Client::PromptedView& Client::prompted_view(const Tensor& image, std::size_t origin) const {
    auto it = prompted_cache_.find(origin);
    if (it != prompted_cache_.end() && it->second.generation == pool_generation_) {
        return it->second;
    }
    Tape tape;
    Tensor tokens = backbone_->embed(tape, image);
    Tensor prompted = tokens;
    if (ablation_ != ClientAblation::NoGlobalPrompts) {
        const Tensor input_key = cached_input_key(image, origin);
        const QueryResult selected = global_pool_.query(input_key, cfg_.top_n);
        std::vector<Tensor> prompts;
        for (int idx : selected.indices) prompts.push_back(global_pool_.entry(idx).prompt);
        prompted = prepend(tape, prompts, tokens);
    }
    PromptedView view;
    view.generation = pool_generation_;
    view.tokens = prompted.detached();
    view.feature = backbone_->features(tape, prompted).detached();
    return prompted_cache_[origin] = std::move(view);
}

Tensor Client::masked_logits(Tape& tape, const Tensor& feature, const Tensor& head_w,
                             const Tensor& head_b, const std::set<int>& exposed) const {
    Tensor logits = tape.add_row(tape.matmul(feature, head_w), head_b);
    Tensor mask({1, static_cast<std::size_t>(class_universe_)}, kMaskValue);
    for (int c : exposed) mask.values_mut()[static_cast<std::size_t>(c)] = 0.0;
    return tape.add(logits, mask);
}

void Client::observe_classes(const TaskSpec& task) {
    seen_classes_.insert(task.class_set.begin(), task.class_set.end());
    current_task_classes_.clear();
    current_task_classes_.insert(task.class_set.begin(), task.class_set.end());
}

BatchLoss Client::global_batch_loss(Tape& tape, const SampleStore& store,
                                    std::span<const std::size_t> refs) {
    BatchLoss out;
    out.touched = {global_head_w_, global_head_b_};
    std::set<int> touched_entries;
    Tensor ce_sum = Tensor::scalar(0.0);
    Tensor sur_sum = Tensor::scalar(0.0);
    for (std::size_t r : refs) {
        const Sample& sample = store[r];
        Tensor tokens = backbone_->embed(tape, sample.pixels);
        const Tensor input_key = cached_input_key(sample.pixels, sample.origin_index);
        const QueryResult selected = global_pool_.query(input_key, cfg_.top_n);

        std::vector<Tensor> prompts;
        prompts.reserve(selected.indices.size());
        for (int idx : selected.indices) prompts.push_back(global_pool_.entry(idx).prompt);
        Tensor prompted = prepend(tape, prompts, tokens);
        Tensor feature = backbone_->features(tape, prompted);
        Tensor logits =
            masked_logits(tape, feature, global_head_w_, global_head_b_, current_task_classes_);
        ce_sum = tape.add(ce_sum, tape.cross_entropy(logits, static_cast<std::size_t>(sample.label)));

        for (int idx : selected.indices) {
            sur_sum = tape.add(sur_sum, tape.cosine_distance(input_key, global_pool_.entry(idx).key));
            if (touched_entries.insert(idx).second) {
                out.touched.push_back(global_pool_.entry(idx).prompt);
                out.touched.push_back(global_pool_.entry(idx).key);
            }
        }
    }
    const double inv_batch = 1.0 / static_cast<double>(refs.size());
    out.cross_entropy = tape.scale(ce_sum, inv_batch);
    out.surrogate_weighted = tape.scale(sur_sum, cfg_.lambda1 * inv_batch);
    out.total = tape.add(out.cross_entropy, out.surrogate_weighted);
    return out;
}

BatchLoss Client::local_batch_loss(Tape& tape, const SampleStore& store,
                                   std::span<const std::size_t> refs) {
    BatchLoss out;
    out.touched = {local_head_w_, local_head_b_};
    std::set<int> touched_entries;
    Tensor ce_sum = Tensor::scalar(0.0);
    Tensor sur_sum = Tensor::scalar(0.0);
    for (std::size_t r : refs) {
        const Sample& sample = store[r];
        // Prompted embedding E' with the frozen global prompts (the raw
        // embedding under the no-global-prompt ablation); the local key
        // V(E') is gradient-detached.
        const PromptedView& view = prompted_view(sample.pixels, sample.origin_index);
        const Tensor& local_key = view.feature;

        LocalPromptEntry& entry = local_pool_.select_by_mask(sample.label);
        Tensor feature =
            backbone_->features(tape, view.tokens, local_pool_.prefixes_for(sample.label));
        Tensor logits =
            masked_logits(tape, feature, local_head_w_, local_head_b_, current_task_classes_);
        ce_sum = tape.add(ce_sum, tape.cross_entropy(logits, static_cast<std::size_t>(sample.label)));
        sur_sum = tape.add(sur_sum, tape.cosine_distance(local_key, entry.key));

        if (touched_entries.insert(sample.label).second) {
            out.touched.push_back(entry.key);
            for (auto& [pk, pv] : entry.prefixes) {
                out.touched.push_back(pk);
                out.touched.push_back(pv);
            }
        }
    }
    const double inv_batch = 1.0 / static_cast<double>(refs.size());
    out.cross_entropy = tape.scale(ce_sum, inv_batch);
    out.surrogate_weighted = tape.scale(sur_sum, cfg_.lambda2 * inv_batch);
    out.total = tape.add(out.cross_entropy, out.surrogate_weighted);
    return out;
}

PhaseReport Client::global_phase(const SampleStore& store, const TaskSpec& task) {
    if (task.train.empty()) throw ConfigError("global_phase on empty task");
    if (!global_pool_.trainable()) global_pool_.set_trainable(true);
    observe_classes(task);

    PhaseReport report;
    report.global_pool_checksum_before = global_pool_.checksum();
    report.local_pool_checksum_before = local_pool_.checksum();

    Rng rng(derive_seed(cfg_.seed, {0x61, static_cast<std::uint64_t>(id_),
                                    static_cast<std::uint64_t>(phase_rng_counter_++)}));
    for (int epoch = 0; epoch < cfg_.epochs_global; ++epoch) {
        SampleRefs order = task.train;
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg_.batch_size);
            Tape tape;
            BatchLoss loss =
                global_batch_loss(tape, store, std::span(order.data() + start, end - start));
            if (!loss.total.all_finite()) {
                throw NonFiniteLossError("non-finite global-phase loss, client " +
                                         std::to_string(id_) + " task " +
                                         std::to_string(task.task_index));
            }
            tape.backward(loss.total);
            adam_global_.apply(loss.touched);
            report.steps.push_back({loss.total.value(), loss.cross_entropy.value(),
                                    loss.surrogate_weighted.value()});
        }
    }
    report.global_pool_checksum_after = global_pool_.checksum();
    report.local_pool_checksum_after = local_pool_.checksum();
    ++pool_generation_;  // pool values moved; prompted views are stale
    return report;
}

void Client::unfreeze_global() {
    global_pool_.set_trainable(true);
}

void Client::freeze_global() {
    global_pool_.set_trainable(false);
}

PhaseReport Client::local_phase(const SampleStore& store, const TaskSpec& task) {
    if (task.train.empty()) throw ConfigError("local_phase on empty task");
    if (global_pool_.trainable() && ablation_ != ClientAblation::NoGlobalPrompts) {
        throw FrozenParameterError("local_phase requires frozen global prompts");
    }
    observe_classes(task);

    PhaseReport report;
    report.global_pool_checksum_before = global_pool_.checksum();
    report.local_pool_checksum_before = local_pool_.checksum();

    Rng rng(derive_seed(cfg_.seed, {0x62, static_cast<std::uint64_t>(id_),
                                    static_cast<std::uint64_t>(phase_rng_counter_++)}));
    for (int epoch = 0; epoch < cfg_.epochs_local; ++epoch) {
        SampleRefs order = task.train;
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg_.batch_size);
            Tape tape;
            BatchLoss loss =
                local_batch_loss(tape, store, std::span(order.data() + start, end - start));
            if (!loss.total.all_finite()) {
                throw NonFiniteLossError("non-finite local-phase loss, client " +
                                         std::to_string(id_) + " task " +
                                         std::to_string(task.task_index));
            }
            tape.backward(loss.total);
            adam_local_.apply(loss.touched);
            report.steps.push_back({loss.total.value(), loss.cross_entropy.value(),
                                    loss.surrogate_weighted.value()});
        }
    }
    report.global_pool_checksum_after = global_pool_.checksum();
    report.local_pool_checksum_after = local_pool_.checksum();
    return report;
}

int Client::infer_personalized(const Tensor& image, std::optional<std::size_t> origin) const {
    if (ablation_ == ClientAblation::NoLocalPrompts) return infer_global(image, nullptr, origin);

    Tape tape;
    Tensor prompted, local_key;
    if (origin.has_value()) {
        const PromptedView& view = prompted_view(image, *origin);
        prompted = view.tokens;
        local_key = view.feature;
    } else {
        Tensor tokens = backbone_->embed(tape, image);
        prompted = tokens;
        if (ablation_ != ClientAblation::NoGlobalPrompts) {
            Tensor input_key = input_key_for(tape, image, tokens, origin);
            const QueryResult selected = global_pool_.query(input_key, cfg_.top_n);
            std::vector<Tensor> prompts;
            for (int idx : selected.indices) prompts.push_back(global_pool_.entry(idx).prompt);
            prompted = prepend(tape, prompts, tokens);
        }
        local_key = backbone_->features(tape, prompted);
    }

    int chosen_class;
    try {
        chosen_class = local_pool_.query(local_key, 1).indices.front();
    } catch (const NoLocalKnowledgeError&) {
        return infer_global(image, nullptr, origin);
    }
    Tensor feature = backbone_->features(tape, prompted, local_pool_.prefixes_for(chosen_class));
    Tensor logits = masked_logits(tape, feature, local_head_w_, local_head_b_, seen_classes_);
    return static_cast<int>(argmax(logits.values()));
}

int Client::infer_global(const Tensor& image, const GlobalPromptPool* pool_override,
                         std::optional<std::size_t> origin) const {
    Tape tape;
    Tensor feature;
    if (origin.has_value() && pool_override == nullptr) {
        feature = prompted_view(image, *origin).feature;
    } else {
        Tensor tokens = backbone_->embed(tape, image);
        Tensor prompted = tokens;
        if (ablation_ != ClientAblation::NoGlobalPrompts) {
            const GlobalPromptPool& pool = pool_override != nullptr ? *pool_override : global_pool_;
            Tensor input_key = input_key_for(tape, image, tokens, origin);
            const QueryResult selected = pool.query(input_key, cfg_.top_n);
            std::vector<Tensor> prompts;
            for (int idx : selected.indices) prompts.push_back(pool.entry(idx).prompt);
            prompted = prepend(tape, prompts, tokens);
        }
        feature = backbone_->features(tape, prompted);
    }
    Tensor logits = masked_logits(tape, feature, global_head_w_, global_head_b_, seen_classes_);
    return static_cast<int>(argmax(logits.values()));
}

void Client::adopt_global_pool(const GlobalPromptPool& pool) {
    global_pool_ = pool.clone();
    global_pool_.set_trainable(false);
    ++pool_generation_;
}

std::vector<Tensor> Client::prompt_tensors() const {
    std::vector<Tensor> out;
    for (int i = 0; i < global_pool_.pool_size(); ++i) {
        out.push_back(global_pool_.entry(i).prompt);
        out.push_back(global_pool_.entry(i).key);
    }
    for (int cls : local_pool_.class_ids()) {
        const LocalPromptEntry& e = local_pool_.entry(cls);
        out.push_back(e.key);
        for (const auto& [pk, pv] : e.prefixes) {
            out.push_back(pk);
            out.push_back(pv);
        }
    }
    return out;
}

std::uint64_t Client::head_param_count() const {
    return static_cast<std::uint64_t>(global_head_w_.size() + global_head_b_.size() +
                                      local_head_w_.size() + local_head_b_.size());
}

}  // namespace fedmgp
