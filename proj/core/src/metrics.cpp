#include "fedmgp/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <functional>
#include <set>
#include <sstream>

#include "fedmgp/errors.hpp"

namespace fedmgp {

namespace {
const char* path_name(ModelPath path) {
    return path == ModelPath::Local ? "local" : "global";
}
}  // namespace

void AccuracyMatrix::record(int client, int round, int task, ModelPath path, std::size_t correct,
                            std::size_t total) {
    if (total == 0) throw ConfigError("accuracy entry with zero sample count");
    cells_[{client, round, task, static_cast<int>(path)}] = {correct, total};
}

bool AccuracyMatrix::has(int client, int round, int task, ModelPath path) const {
    return cells_.count({client, round, task, static_cast<int>(path)}) > 0;
}

const AccuracyCell& AccuracyMatrix::at(int client, int round, int task, ModelPath path) const {
    auto it = cells_.find({client, round, task, static_cast<int>(path)});
    if (it == cells_.end()) {
        throw ConfigError("missing accuracy entry client=" + std::to_string(client) +
                          " round=" + std::to_string(round) + " task=" + std::to_string(task) +
                          " model=" + path_name(path));
    }
    return it->second;
}

std::vector<int> AccuracyMatrix::clients() const {
    std::set<int> ids;
    for (const auto& [key, cell] : cells_) ids.insert(std::get<0>(key));
    return {ids.begin(), ids.end()};
}

std::vector<int> AccuracyMatrix::tasks_at(int round, ModelPath path) const {
    std::set<int> ids;
    for (const auto& [key, cell] : cells_) {
        if (std::get<1>(key) == round && std::get<3>(key) == static_cast<int>(path)) {
            ids.insert(std::get<2>(key));
        }
    }
    return {ids.begin(), ids.end()};
}

int AccuracyMatrix::max_round() const {
    int mx = -1;
    for (const auto& [key, cell] : cells_) mx = std::max(mx, std::get<1>(key));
    return mx;
}

std::string AccuracyMatrix::to_csv() const {
    std::ostringstream os;
    os << "client,round,task,model,correct,total\n";
    for (const auto& [key, cell] : cells_) {
        os << std::get<0>(key) << "," << std::get<1>(key) << "," << std::get<2>(key) << ","
           << path_name(static_cast<ModelPath>(std::get<3>(key))) << "," << cell.correct << ","
           << cell.total << "\n";
    }
    return os.str();
}

AccuracyMatrix AccuracyMatrix::from_csv(const std::string& text) {
    AccuracyMatrix matrix;
    std::istringstream is(text);
    std::string line;
    std::getline(is, line);  // header
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (fields.size() != 6) throw CorruptFileError("bad accuracy matrix row: " + line);
        matrix.record(std::stoi(fields[0]), std::stoi(fields[1]), std::stoi(fields[2]),
                      fields[3] == "local" ? ModelPath::Local : ModelPath::Global,
                      std::stoull(fields[4]), std::stoull(fields[5]));
    }
    return matrix;
}

AccuracyCell evaluate(const Client& client, ModelPath path, const SampleStore& store,
                      const SampleRefs& test_refs, const GlobalPromptPool* pool_override) {
    if (test_refs.empty()) throw ConfigError("evaluate on empty test set");
    AccuracyCell cell;
    cell.total = test_refs.size();
    for (std::size_t r : test_refs) {
        const Sample& sample = store[r];
        const int predicted = path == ModelPath::Local
                                  ? client.infer_personalized(sample.pixels, sample.origin_index)
                                  : client.infer_global(sample.pixels, pool_override,
                                                        sample.origin_index);
        if (predicted == sample.label) ++cell.correct;
    }
    return cell;
}

namespace {

double mean_ratio(const AccuracyMatrix& matrix, const std::vector<int>& clients,
                  const std::function<double(int)>& numerator,
                  const std::function<double(int)>& denominator, const char* what) {
    double sum = 0.0;
    std::size_t used = 0;
    for (int c : clients) {
        const double den = denominator(c);
        if (den == 0.0) {
            std::fprintf(stderr, "warning: %s zero denominator for client %d, dropped\n", what, c);
            continue;
        }
        sum += numerator(c) / den;
        ++used;
    }
    (void)matrix;
    if (used == 0) throw ConfigError(std::string(what) + ": all denominators zero");
    return sum / static_cast<double>(used);
}

}  // namespace

double kr_temporal(const AccuracyMatrix& matrix, int round) {
    const std::vector<int> clients = matrix.clients();
    return mean_ratio(
        matrix, clients,
        [&](int c) { return matrix.at(c, round, 0, ModelPath::Local).accuracy(); },
        [&](int c) { return matrix.at(c, 0, 0, ModelPath::Local).accuracy(); }, "kr_temporal");
}

double kr_spatial(const AccuracyMatrix& matrix, int round, int current_task) {
    if (current_task < 0) {
        const std::vector<int> tasks = matrix.tasks_at(round, ModelPath::Global);
        if (tasks.empty()) throw ConfigError("kr_spatial: no global entries at round");
        current_task = tasks.back();
    }
    const std::vector<int> clients = matrix.clients();
    return mean_ratio(
        matrix, clients,
        [&](int c) { return matrix.at(c, round, current_task, ModelPath::Global).accuracy(); },
        [&](int c) { return matrix.at(c, round, current_task, ModelPath::Local).accuracy(); },
        "kr_spatial");
}

TaskAverages average_task_accuracy(const AccuracyMatrix& matrix, int round) {
    TaskAverages out;
    out.task_ids = matrix.tasks_at(round, ModelPath::Global);
    const std::vector<int> clients = matrix.clients();
    for (int task : out.task_ids) {
        double sum = 0.0;
        for (int c : clients) sum += matrix.at(c, round, task, ModelPath::Global).accuracy();
        out.per_task.push_back(sum / static_cast<double>(clients.size()));
    }
    if (!out.per_task.empty()) {
        double sum = 0.0;
        for (double a : out.per_task) sum += a;
        out.average = sum / static_cast<double>(out.per_task.size());
    }
    return out;
}

RunAccounting accounting(const std::vector<Client>& clients,
                         const std::vector<RoundLedger>& ledgers) {
    RunAccounting out;
    for (const Client& client : clients) {
        ClientAccounting acc;
        acc.client_id = client.id();
        const GlobalPromptPool& gp = client.global_pool();
        const LocalPromptPool& lp = client.local_pool();
        acc.pools = pool_param_count(
            static_cast<std::uint64_t>(gp.pool_size()),
            static_cast<std::uint64_t>(gp.prompt_length()),
            static_cast<std::uint64_t>(gp.embed_dim()), lp.size(),
            static_cast<std::uint64_t>(lp.prefix_length()), lp.attached_blocks().size());
        acc.head_params = client.head_param_count();
        acc.transmitted_params_per_round = acc.pools.transmitted_per_round();
        out.per_client.push_back(acc);
    }
    if (!out.per_client.empty()) {
        out.transmitted_params_per_round_per_client =
            out.per_client.front().transmitted_params_per_round;
    }
    for (const RoundLedger& ledger : ledgers) {
        if (!ledger.bytes_per_client.empty()) {
            out.bytes_per_round_per_client = ledger.bytes_per_client.front();
            break;
        }
    }
    return out;
}

}  // namespace fedmgp
