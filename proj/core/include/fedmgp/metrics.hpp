#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "fedmgp/client.hpp"
#include "fedmgp/data.hpp"
#include "fedmgp/prompts.hpp"
#include "fedmgp/server.hpp"

namespace fedmgp {

enum class ModelPath { Local, Global };

struct AccuracyCell {
    std::size_t correct = 0;
    std::size_t total = 0;
    double accuracy() const { return static_cast<double>(correct) / static_cast<double>(total); }
};

// Accuracy entries keyed by (client, round, task, model path). Counts are
// stored as integers so persisted matrices reload bit-exactly.
class AccuracyMatrix {
public:
    void record(int client, int round, int task, ModelPath path, std::size_t correct,
                std::size_t total);
    bool has(int client, int round, int task, ModelPath path) const;
    const AccuracyCell& at(int client, int round, int task, ModelPath path) const;

    std::vector<int> clients() const;
    std::vector<int> tasks_at(int round, ModelPath path) const;
    int max_round() const;
    std::size_t size() const { return cells_.size(); }

    std::string to_csv() const;
    static AccuracyMatrix from_csv(const std::string& text);

private:
    using Key = std::tuple<int, int, int, int>;
    std::map<Key, AccuracyCell> cells_;
};

// Runs the chosen inference path over a test set.
AccuracyCell evaluate(const Client& client, ModelPath path, const SampleStore& store,
                      const SampleRefs& test_refs, const GlobalPromptPool* pool_override = nullptr);

// Mean over clients of Acc(local model at round r on task 0) over the round-0
// baseline. Zero-denominator clients are dropped with a warning and a reduced
// divisor; all-zero denominators raise.
double kr_temporal(const AccuracyMatrix& matrix, int round);

// Mean over clients of Acc(global path, current task) / Acc(local path,
// current task) at round r. current_task < 0 infers the latest task recorded
// at that round.
double kr_spatial(const AccuracyMatrix& matrix, int round, int current_task = -1);

struct TaskAverages {
    std::vector<int> task_ids;
    std::vector<double> per_task;  // mean over clients, global path
    double average = 0.0;
};
TaskAverages average_task_accuracy(const AccuracyMatrix& matrix, int round);

struct ClientAccounting {
    int client_id = 0;
    PoolParamCount pools;
    std::uint64_t head_params = 0;
    std::uint64_t transmitted_params_per_round = 0;
};

struct RunAccounting {
    std::vector<ClientAccounting> per_client;
    std::uint64_t transmitted_params_per_round_per_client = 0;
    std::uint64_t bytes_per_round_per_client = 0;
};

// Live enumeration from client state plus per-round transmission totals from
// the ledgers.
RunAccounting accounting(const std::vector<Client>& clients,
                         const std::vector<RoundLedger>& ledgers);

}  // namespace fedmgp
