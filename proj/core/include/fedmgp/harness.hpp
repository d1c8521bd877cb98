#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "fedmgp/backbone.hpp"
#include "fedmgp/client.hpp"
#include "fedmgp/data.hpp"
#include "fedmgp/metrics.hpp"
#include "fedmgp/server.hpp"

namespace fedmgp {

enum class Ablation { Full, WithoutGlobalPrompts, WithoutLocalPrompts, WithoutFusion };

std::string ablation_name(Ablation ablation);
Ablation ablation_from_name(const std::string& name);

struct ExperimentConfig {
    // [scenario]
    std::string dataset = "synthetic";  // synthetic | cifar100
    std::string data_dir;               // cifar100 binary location (or DATA_DIR)
    ScenarioMode mode = ScenarioMode::Synchronous;
    int classes = 16;
    int per_class = 30;
    std::size_t image_side = 32;
    std::size_t channels = 3;
    int clients = 5;
    int tasks = 2;
    int classes_per_task = 8;
    double dirichlet_alpha = 1.0;
    int private_per_client = 2;
    int proxy_per_class = 2;
    double warmup_fraction = 0.2;
    double test_fraction = 0.2;
    // [backbone]
    std::size_t patch_side = 4;
    std::size_t embed_dim = 64;
    std::size_t depth = 4;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 4;
    std::size_t pretrain_steps = 300;
    std::size_t pretrain_batch = 8;
    // [prompts]
    int pool_size = 10;
    int prompt_length = 4;
    int top_n = 3;
    int prefix_length = 5;
    int prefix_blocks = 2;  // prefixes attach to the first k blocks
    // [training]
    double lambda1 = 0.5;
    double lambda2 = 0.5;
    int epochs_global = 1;
    int epochs_local = 1;
    std::size_t batch_size = 2;
    double learning_rate = 0.001;
    // [fusion]
    int distill_steps = 10;
    double distill_lr = 0.001;
    std::size_t proxy_batch = 4;
    std::string teacher_schedule = "summed";  // summed | round-robin
    std::string fusion_init = "mean";         // mean | first-client
    double key_nudge = 0.1;
    // [run]
    std::vector<std::uint64_t> seeds = {42, 1999, 2024};
    int rounds_per_task = 5;
    Ablation ablation = Ablation::Full;
    std::string out_dir = "runs/latest";
    int threads = 0;  // 0 = hardware concurrency

    void validate() const;  // names the offending key
    BackboneConfig backbone_config(std::uint64_t seed) const;
    TrainConfig train_config(std::uint64_t seed, int client_id) const;
    FusionConfig fusion_config() const;
};

// Plain-text "key = value" with [section] headers; keys mirror the fields
// above.
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config_file(const std::string& path);
std::string serialize_config(const ExperimentConfig& cfg);
// "section.key" or bare key; used by CLI overrides and sweeps.
void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value);

struct RetentionPoint {
    int round = 0;
    double kr_t = 0.0;
    double kr_s = 0.0;
};

struct LossTracePoint {
    int client = 0;
    int task = 0;
    int round = 0;
    char phase = 'g';  // 'g' global, 'l' local
    int step = 0;
    double total = 0.0, cross_entropy = 0.0, surrogate = 0.0;
};

struct SeedResult {
    std::uint64_t seed = 0;
    AccuracyMatrix matrix;
    std::vector<RoundLedger> ledgers;
    std::vector<RetentionPoint> retention;
    std::vector<LossTracePoint> losses;
    RunAccounting accounting;
    std::string manifest;
    std::uint64_t backbone_checksum = 0;
    double warmup_accuracy = 0.0;
    double final_kr_t = 0.0;
    double final_kr_s = 0.0;
    double final_avg_global_accuracy = 0.0;
    double final_avg_personalized_accuracy = 0.0;
    double wall_seconds = 0.0;
    bool complete = true;
    std::string error;
};

struct RunArtifact {
    ExperimentConfig config;
    std::vector<SeedResult> seeds;
    double mean_final_kr_t = 0.0;
    double mean_final_kr_s = 0.0;
    double mean_final_avg_global_accuracy = 0.0;
    double mean_final_avg_personalized_accuracy = 0.0;
    std::string root_dir;
};

struct RunOptions {
    bool persist = true;
    bool reuse_backbone_cache = true;
};

RunArtifact run_experiment(const ExperimentConfig& cfg, const RunOptions& options = {});

// Writes only the derived scenario manifests (CLI `partition`).
void write_partition_manifests(const ExperimentConfig& cfg);

struct SweepRow {
    double value = 0.0;
    double kr_t = 0.0;
    double kr_s = 0.0;
    double avg_global_accuracy = 0.0;
    double avg_personalized_accuracy = 0.0;
};

struct SweepResult {
    std::string axis;
    std::vector<SweepRow> rows;
    std::vector<RunArtifact> artifacts;
};

// axis in {M, L, N, prefix_length, lambda1, lambda2}.
SweepResult sweep(const ExperimentConfig& cfg, const std::string& axis,
                  const std::vector<double>& values, const RunOptions& options = {});

std::string render_report(const RunArtifact& artifact);
// Re-renders a persisted artifact directory and cross-checks every retention
// value against recomputation from the raw matrices. Returns false on any
// mismatch.
bool report_from_directory(const std::string& artifact_dir, std::ostream& out);

// Independent-oracle spot checks (finite differences on all three losses,
// query vs full sort, Dirichlet vs the gamma-ratio construction, retention vs
// manual recomputation, fusion fixed point). CLI `verify`.
bool run_verification(std::ostream& out);

struct GradCheckResult {
    std::size_t checked = 0;
    double max_rel_err = 0.0;
};

GradCheckResult check_global_loss_gradients(std::uint64_t seed, std::size_t max_params = 64);
GradCheckResult check_local_loss_gradients(std::uint64_t seed, std::size_t max_params = 64);
GradCheckResult check_fusion_loss_gradients(std::uint64_t seed, std::size_t max_params = 64);

}  // namespace fedmgp
