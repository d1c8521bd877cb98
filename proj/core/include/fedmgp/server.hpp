#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fedmgp/backbone.hpp"
#include "fedmgp/client.hpp"
#include "fedmgp/data.hpp"
#include "fedmgp/prompts.hpp"

namespace fedmgp {

struct FusionConfig {
    int distill_steps = 50;
    double distill_lr = 0.001;
    std::size_t proxy_batch = 8;
    enum class TeacherSchedule { Summed, RoundRobin } schedule = TeacherSchedule::Summed;
    enum class Init { Mean, FirstClient } init = Init::Mean;
    int top_n = 5;
    // Weight pulling student keys toward the index-wise mean of teacher keys;
    // 0 disables the term.
    double key_nudge = 0.1;
};

struct FusionResult {
    GlobalPromptPool pool;
    std::vector<double> loss_trace;
};

// The distillation objective shared by the fusion loop and the gradient
// checks: the student pool's prompted backbone outputs chase each teacher's
// over a proxy batch. Teacher features and per-sample embeddings are constant
// during a fusion call and cached here.
class FusionLossContext {
public:
    FusionLossContext(const std::vector<GlobalPromptPool>* teachers, const Backbone* backbone,
                      const SampleStore* store, FusionConfig cfg);

    // step drives the round-robin teacher schedule; refs index the store.
    Tensor loss(Tape& tape, GlobalPromptPool& student, std::span<const std::size_t> refs,
                int step);

private:
    Tensor tokens_for(std::size_t ref);
    Tensor key_for(std::size_t ref);
    Tensor teacher_feature(std::size_t teacher, std::size_t ref);

    const std::vector<GlobalPromptPool>* teachers_;
    const Backbone* backbone_;
    const SampleStore* store_;
    FusionConfig cfg_;
    std::vector<Tensor> mean_keys_;
    std::map<std::size_t, Tensor> token_cache_;
    std::map<std::size_t, Tensor> key_cache_;
    std::map<std::pair<std::size_t, std::size_t>, Tensor> teacher_cache_;
};

// Distills the client pools into one student pool over the proxy set.
// Teachers are never modified.
FusionResult selective_prompt_fusion(const std::vector<GlobalPromptPool>& pools,
                                     const Backbone& backbone, const SampleStore& store,
                                     const SampleRefs& proxy, const FusionConfig& cfg);

// Index-wise arithmetic mean of prompts and keys (pools must be index-aligned).
GlobalPromptPool fedavg_pools(const std::vector<GlobalPromptPool>& pools);

struct RoundLedger {
    int round = 0;
    bool incomplete = false;
    bool used_fedavg = false;
    std::vector<std::uint64_t> client_pool_checksums;  // in client-id order
    std::uint64_t fused_checksum = 0;
    std::vector<std::size_t> bytes_per_client;  // serialized global pool sizes
    std::vector<double> distill_loss_trace;

    std::string to_text() const;
    static RoundLedger from_text(const std::string& line);
};

// Round orchestration: collect pool copies in client-id order over the wire
// format, fuse, ledger, redistribute.
class Server {
public:
    Server(std::shared_ptr<const Backbone> backbone, const SampleStore* store, SampleRefs proxy,
           FusionConfig cfg);

    // Simulated wire collection from live clients; fuses (selective fusion or
    // element-wise averaging) and distributes the result back.
    RoundLedger run_round(std::vector<Client>& clients, int round, bool use_fedavg = false);

    // Submission-level variant; a missing submission aborts the round and the
    // ledger is marked incomplete (no fusion, no distribution).
    RoundLedger run_round_submissions(
        const std::vector<std::optional<std::vector<unsigned char>>>& submissions, int round,
        bool use_fedavg, std::vector<Client>* distribute_to);

    const GlobalPromptPool& last_fused() const { return last_fused_; }
    const FusionConfig& config() const { return cfg_; }

private:
    std::shared_ptr<const Backbone> backbone_;
    const SampleStore* store_;
    SampleRefs proxy_;
    FusionConfig cfg_;
    GlobalPromptPool last_fused_;
};

}  // namespace fedmgp
