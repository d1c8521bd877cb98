#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedmgp/tensor.hpp"

namespace fedmgp {

struct Sample {
    Tensor pixels;  // (channels, side, side), values in [0, 1]
    int label = 0;
    std::size_t origin_index = 0;
};

class SampleStore {
public:
    SampleStore() = default;
    SampleStore(std::vector<Sample> samples, int class_count)
        : samples_(std::move(samples)), class_count_(class_count) {}

    const Sample& operator[](std::size_t i) const { return samples_[i]; }
    std::size_t size() const { return samples_.size(); }
    bool empty() const { return samples_.empty(); }
    int class_count() const { return class_count_; }

private:
    std::vector<Sample> samples_;
    int class_count_ = 0;
};

// Indices into a SampleStore; the origin-index of a sample is its position in
// the source store, which every manifest and audit refers back to.
using SampleRefs = std::vector<std::size_t>;

enum class ScenarioMode { Synchronous, Asynchronous };

struct TaskSpec {
    int client_id = 0;
    int task_index = 0;
    std::vector<int> class_set;  // sorted ascending
    SampleRefs train;
    SampleRefs test;
};

struct ScenarioPlan {
    ScenarioMode mode = ScenarioMode::Synchronous;
    int clients = 0;
    int tasks_per_client = 0;
    int classes_per_task = 0;
    double dirichlet_alpha = 1.0;
    int private_per_client = 0;
    double test_fraction = 0.2;
    std::uint64_t seed = 0;
    SampleRefs proxy;
    SampleRefs warmup;
    std::vector<std::vector<TaskSpec>> client_tasks;  // [client][task]

    std::string manifest() const;
};

// CIFAR-100 binary records: 1 coarse-label byte, 1 fine-label byte, then
// 32*32 bytes per R/G/B plane. Fine labels become class ids; pixels are
// scaled by 1/255.
SampleStore load_cifar100(const std::string& path);

// Class templates drawn uniform in [0,1]; samples add uniform noise of
// amplitude 0.15 and clamp back to [0,1].
SampleStore gen_synthetic(int classes, int per_class, std::size_t image_side, std::uint64_t seed,
                          std::size_t channels = 3);

struct Holdouts {
    SampleRefs proxy;
    SampleRefs warmup;
    SampleRefs remainder;
};

// Carves the server proxy set and the backbone warmup set out of the store
// before any client partitioning; the three outputs are pairwise disjoint.
Holdouts reserve_holdouts(const SampleStore& store, int proxy_per_class, double warmup_fraction,
                          std::uint64_t seed);

ScenarioPlan split_synchronous(const SampleStore& store, const SampleRefs& available, int clients,
                               int tasks, double alpha, std::uint64_t seed,
                               double test_fraction = 0.2);

ScenarioPlan split_asynchronous(const SampleStore& store, const SampleRefs& available, int clients,
                                int private_per_client, int classes_per_task, int tasks,
                                std::uint64_t seed, double test_fraction = 0.2);

}  // namespace fedmgp
