#include "fedmgp/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>
#include <thread>

#include "fedmgp/checksum.hpp"
#include "fedmgp/errors.hpp"
#include "fedmgp/rng.hpp"

namespace fedmgp {

namespace fs = std::filesystem;

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + path.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

// Deterministic parallel-for over client indices; worker w handles indices
// congruent to w. Results must be written into per-index slots.
void parallel_over_clients(int count, int threads, const std::function<void(int)>& body) {
    int workers = threads > 0 ? threads : static_cast<int>(std::thread::hardware_concurrency());
    workers = std::max(1, std::min(workers, count));
    if (workers == 1) {
        for (int i = 0; i < count; ++i) body(i);
        return;
    }
    std::vector<std::thread> pool;
    std::exception_ptr first_error;
    std::mutex error_mutex;
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (int i = w; i < count; i += workers) body(i);
            } catch (...) {
                std::scoped_lock lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (std::thread& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

struct BackboneCache {
    std::mutex mutex;
    std::map<std::string, std::shared_ptr<const Backbone>> entries;
};

BackboneCache& backbone_cache() {
    static BackboneCache cache;
    return cache;
}

std::shared_ptr<const Backbone> acquire_backbone(const ExperimentConfig& cfg,
                                                 const SampleStore& store,
                                                 const SampleRefs& warmup, std::uint64_t seed,
                                                 bool reuse_cache) {
    std::uint64_t warmup_sum = 0xcbf29ce484222325ULL;
    for (std::size_t r : warmup) {
        warmup_sum = fnv1a64(store[r].pixels.values(), warmup_sum);
        warmup_sum = splitmix64(warmup_sum ^ static_cast<std::uint64_t>(store[r].label));
    }
    std::ostringstream key;
    key << cfg.image_side << "|" << cfg.channels << "|" << cfg.patch_side << "|" << cfg.embed_dim
        << "|" << cfg.depth << "|" << cfg.heads << "|" << cfg.mlp_ratio << "|"
        << cfg.pretrain_steps << "|" << cfg.pretrain_batch << "|" << seed << "|" << warmup_sum;

    if (reuse_cache) {
        std::scoped_lock lock(backbone_cache().mutex);
        auto it = backbone_cache().entries.find(key.str());
        if (it != backbone_cache().entries.end()) return it->second;
    }
    auto built = std::make_shared<Backbone>(
        Backbone::pretrain_and_freeze(cfg.backbone_config(seed), store, warmup,
                                      cfg.pretrain_steps, cfg.pretrain_batch, cfg.learning_rate));
    if (reuse_cache) {
        std::scoped_lock lock(backbone_cache().mutex);
        backbone_cache().entries[key.str()] = built;
    }
    return built;
}

SampleStore build_store(const ExperimentConfig& cfg, std::uint64_t seed) {
    if (cfg.dataset == "synthetic") {
        return gen_synthetic(cfg.classes, cfg.per_class, cfg.image_side, seed, cfg.channels);
    }
    if (cfg.dataset == "cifar100") {
        std::string dir = cfg.data_dir;
        if (dir.empty()) {
            const char* env = std::getenv("DATA_DIR");
            if (env == nullptr) throw ConfigError("dataset=cifar100 needs data_dir or DATA_DIR");
            dir = env;
        }
        return load_cifar100(dir + "/train.bin");
    }
    throw ConfigError("unknown dataset: " + cfg.dataset);
}

ClientAblation client_ablation(Ablation ablation) {
    switch (ablation) {
        case Ablation::WithoutGlobalPrompts: return ClientAblation::NoGlobalPrompts;
        case Ablation::WithoutLocalPrompts: return ClientAblation::NoLocalPrompts;
        default: return ClientAblation::Full;
    }
}

}  // namespace

std::string ablation_name(Ablation ablation) {
    switch (ablation) {
        case Ablation::Full: return "full";
        case Ablation::WithoutGlobalPrompts: return "w/oGP";
        case Ablation::WithoutLocalPrompts: return "w/oLP";
        case Ablation::WithoutFusion: return "w/oSPF";
    }
    return "full";
}

Ablation ablation_from_name(const std::string& name) {
    if (name == "full") return Ablation::Full;
    if (name == "w/oGP" || name == "woGP") return Ablation::WithoutGlobalPrompts;
    if (name == "w/oLP" || name == "woLP") return Ablation::WithoutLocalPrompts;
    if (name == "w/oSPF" || name == "woSPF") return Ablation::WithoutFusion;
    throw ConfigError("unknown ablation: " + name);
}

void ExperimentConfig::validate() const {
    auto fail = [](const std::string& key, const std::string& why) {
        throw ConfigError("config key '" + key + "': " + why);
    };
    if (dataset != "synthetic" && dataset != "cifar100") fail("dataset", "must be synthetic or cifar100");
    if (classes < 2) fail("classes", "need at least 2");
    if (per_class < 1) fail("per_class", "must be positive");
    if (clients < 1) fail("clients", "must be positive");
    if (tasks < 1) fail("tasks", "must be positive");
    if (rounds_per_task < 0) fail("rounds_per_task", "must be >= 0");
    if (mode == ScenarioMode::Synchronous && classes % tasks != 0) {
        fail("tasks", "classes must divide evenly into tasks in synchronous mode");
    }
    if (mode == ScenarioMode::Asynchronous) {
        if (clients * private_per_client > classes) {
            fail("private_per_client", "clients*private_per_client exceeds class count");
        }
        const int public_count = classes - clients * private_per_client;
        if (private_per_client + public_count < tasks * classes_per_task) {
            fail("classes_per_task", "private + public classes below tasks*classes_per_task");
        }
    }
    if (image_side % patch_side != 0) fail("patch_side", "must divide image_side");
    if (embed_dim % heads != 0) fail("heads", "must divide embed_dim");
    if (depth < 1) fail("depth", "must be positive");
    if (pool_size < 1) fail("pool_size", "must be positive");
    if (prompt_length < 1) fail("prompt_length", "must be positive");
    if (top_n < 1) fail("top_n", "must be positive");
    if (top_n > pool_size) fail("top_n", "cannot exceed pool_size");
    if (prefix_length < 1) fail("prefix_length", "must be positive");
    if (prefix_blocks < 0 || static_cast<std::size_t>(prefix_blocks) > depth) {
        fail("prefix_blocks", "must lie in [0, depth]");
    }
    if (lambda1 < 0.0) fail("lambda1", "must be >= 0");
    if (lambda2 < 0.0) fail("lambda2", "must be >= 0");
    if (epochs_global < 0 || epochs_local < 0) fail("epochs_global", "must be >= 0");
    if (batch_size < 1) fail("batch_size", "must be positive");
    if (learning_rate <= 0.0) fail("learning_rate", "must be positive");
    if (distill_steps < 0) fail("distill_steps", "must be >= 0");
    if (distill_lr <= 0.0) fail("distill_lr", "must be positive");
    if (proxy_batch < 1) fail("proxy_batch", "must be positive");
    if (teacher_schedule != "summed" && teacher_schedule != "round-robin") {
        fail("teacher_schedule", "must be summed or round-robin");
    }
    if (fusion_init != "mean" && fusion_init != "first-client") {
        fail("fusion_init", "must be mean or first-client");
    }
    if (key_nudge < 0.0) fail("key_nudge", "must be >= 0");
    if (seeds.empty()) fail("seeds", "need at least one seed");
    if (proxy_per_class < 0) fail("proxy_per_class", "must be >= 0");
    if (warmup_fraction < 0.0 || warmup_fraction >= 1.0) fail("warmup_fraction", "must be in [0,1)");
    if (test_fraction < 0.0 || test_fraction >= 1.0) fail("test_fraction", "must be in [0,1)");
}

BackboneConfig ExperimentConfig::backbone_config(std::uint64_t seed) const {
    BackboneConfig out;
    out.image_side = image_side;
    out.channels = channels;
    out.patch_side = patch_side;
    out.embed_dim = embed_dim;
    out.depth = depth;
    out.heads = heads;
    out.mlp_ratio = mlp_ratio;
    out.seed = seed;
    return out;
}

TrainConfig ExperimentConfig::train_config(std::uint64_t seed, int client_id) const {
    TrainConfig out;
    out.lambda1 = lambda1;
    out.lambda2 = lambda2;
    out.epochs_global = epochs_global;
    out.epochs_local = epochs_local;
    out.batch_size = batch_size;
    out.top_n = top_n;
    out.learning_rate = learning_rate;
    out.seed = derive_seed(seed, {0xC11E27, static_cast<std::uint64_t>(client_id)});
    return out;
}

FusionConfig ExperimentConfig::fusion_config() const {
    FusionConfig out;
    out.distill_steps = distill_steps;
    out.distill_lr = distill_lr;
    out.proxy_batch = proxy_batch;
    out.schedule = teacher_schedule == "summed" ? FusionConfig::TeacherSchedule::Summed
                                                : FusionConfig::TeacherSchedule::RoundRobin;
    out.init = fusion_init == "mean" ? FusionConfig::Init::Mean : FusionConfig::Init::FirstClient;
    out.top_n = top_n;
    out.key_nudge = key_nudge;
    return out;
}

void set_config_value(ExperimentConfig& cfg, const std::string& raw_key, const std::string& value) {
    std::string key = raw_key;
    const auto dot = key.rfind('.');
    if (dot != std::string::npos) key = key.substr(dot + 1);

    auto as_int = [&] { return std::stoi(value); };
    auto as_size = [&] { return static_cast<std::size_t>(std::stoull(value)); };
    auto as_double = [&] { return std::stod(value); };

    if (key == "dataset") cfg.dataset = value;
    else if (key == "data_dir") cfg.data_dir = value;
    else if (key == "mode") {
        if (value == "sync") cfg.mode = ScenarioMode::Synchronous;
        else if (value == "async") cfg.mode = ScenarioMode::Asynchronous;
        else throw ConfigError("config key 'mode': must be sync or async");
    } else if (key == "classes") cfg.classes = as_int();
    else if (key == "per_class") cfg.per_class = as_int();
    else if (key == "image_side") cfg.image_side = as_size();
    else if (key == "channels") cfg.channels = as_size();
    else if (key == "clients") cfg.clients = as_int();
    else if (key == "tasks") cfg.tasks = as_int();
    else if (key == "classes_per_task") cfg.classes_per_task = as_int();
    else if (key == "dirichlet_alpha") cfg.dirichlet_alpha = as_double();
    else if (key == "private_per_client") cfg.private_per_client = as_int();
    else if (key == "proxy_per_class") cfg.proxy_per_class = as_int();
    else if (key == "warmup_fraction") cfg.warmup_fraction = as_double();
    else if (key == "test_fraction") cfg.test_fraction = as_double();
    else if (key == "patch_side") cfg.patch_side = as_size();
    else if (key == "embed_dim") cfg.embed_dim = as_size();
    else if (key == "depth") cfg.depth = as_size();
    else if (key == "heads") cfg.heads = as_size();
    else if (key == "mlp_ratio") cfg.mlp_ratio = as_size();
    else if (key == "pretrain_steps") cfg.pretrain_steps = as_size();
    else if (key == "pretrain_batch") cfg.pretrain_batch = as_size();
    else if (key == "pool_size") cfg.pool_size = as_int();
    else if (key == "prompt_length") cfg.prompt_length = as_int();
    else if (key == "top_n") cfg.top_n = as_int();
    else if (key == "prefix_length") cfg.prefix_length = as_int();
    else if (key == "prefix_blocks") cfg.prefix_blocks = as_int();
    else if (key == "lambda1") cfg.lambda1 = as_double();
    else if (key == "lambda2") cfg.lambda2 = as_double();
    else if (key == "epochs_global") cfg.epochs_global = as_int();
    else if (key == "epochs_local") cfg.epochs_local = as_int();
    else if (key == "batch_size") cfg.batch_size = as_size();
    else if (key == "learning_rate") cfg.learning_rate = as_double();
    else if (key == "distill_steps") cfg.distill_steps = as_int();
    else if (key == "distill_lr") cfg.distill_lr = as_double();
    else if (key == "proxy_batch") cfg.proxy_batch = as_size();
    else if (key == "teacher_schedule") cfg.teacher_schedule = value;
    else if (key == "fusion_init") cfg.fusion_init = value;
    else if (key == "key_nudge") cfg.key_nudge = as_double();
    else if (key == "seeds") {
        cfg.seeds.clear();
        std::stringstream ss(value);
        std::string item;
        while (std::getline(ss, item, ',')) {
            if (!item.empty()) cfg.seeds.push_back(std::stoull(item));
        }
    } else if (key == "rounds_per_task") cfg.rounds_per_task = as_int();
    else if (key == "ablation") cfg.ablation = ablation_from_name(value);
    else if (key == "out_dir") cfg.out_dir = value;
    else if (key == "threads") cfg.threads = as_int();
    else throw ConfigError("unknown config key: " + raw_key);
}

ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig cfg;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        const auto comment = line.find_first_of("#;");
        if (comment != std::string::npos) line = line.substr(0, comment);
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos) continue;
        const auto last = line.find_last_not_of(" \t\r");
        line = line.substr(first, last - first + 1);
        if (line.front() == '[') continue;  // section headers are decorative
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("bad config line: " + line);
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t");
            const auto e = s.find_last_not_of(" \t");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        set_config_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

ExperimentConfig parse_config_file(const std::string& path) {
    return parse_config_text(read_file(path));
}

std::string serialize_config(const ExperimentConfig& cfg) {
    std::ostringstream os;
    os << "[scenario]\n";
    os << "dataset = " << cfg.dataset << "\n";
    os << "data_dir = " << cfg.data_dir << "\n";
    os << "mode = " << (cfg.mode == ScenarioMode::Synchronous ? "sync" : "async") << "\n";
    os << "classes = " << cfg.classes << "\n";
    os << "per_class = " << cfg.per_class << "\n";
    os << "image_side = " << cfg.image_side << "\n";
    os << "channels = " << cfg.channels << "\n";
    os << "clients = " << cfg.clients << "\n";
    os << "tasks = " << cfg.tasks << "\n";
    os << "classes_per_task = " << cfg.classes_per_task << "\n";
    os << "dirichlet_alpha = " << fmt_double(cfg.dirichlet_alpha) << "\n";
    os << "private_per_client = " << cfg.private_per_client << "\n";
    os << "proxy_per_class = " << cfg.proxy_per_class << "\n";
    os << "warmup_fraction = " << fmt_double(cfg.warmup_fraction) << "\n";
    os << "test_fraction = " << fmt_double(cfg.test_fraction) << "\n";
    os << "\n[backbone]\n";
    os << "patch_side = " << cfg.patch_side << "\n";
    os << "embed_dim = " << cfg.embed_dim << "\n";
    os << "depth = " << cfg.depth << "\n";
    os << "heads = " << cfg.heads << "\n";
    os << "mlp_ratio = " << cfg.mlp_ratio << "\n";
    os << "pretrain_steps = " << cfg.pretrain_steps << "\n";
    os << "pretrain_batch = " << cfg.pretrain_batch << "\n";
    os << "\n[prompts]\n";
    os << "pool_size = " << cfg.pool_size << "\n";
    os << "prompt_length = " << cfg.prompt_length << "\n";
    os << "top_n = " << cfg.top_n << "\n";
    os << "prefix_length = " << cfg.prefix_length << "\n";
    os << "prefix_blocks = " << cfg.prefix_blocks << "\n";
    os << "\n[training]\n";
    os << "lambda1 = " << fmt_double(cfg.lambda1) << "\n";
    os << "lambda2 = " << fmt_double(cfg.lambda2) << "\n";
    os << "epochs_global = " << cfg.epochs_global << "\n";
    os << "epochs_local = " << cfg.epochs_local << "\n";
    os << "batch_size = " << cfg.batch_size << "\n";
    os << "learning_rate = " << fmt_double(cfg.learning_rate) << "\n";
    os << "\n[fusion]\n";
    os << "distill_steps = " << cfg.distill_steps << "\n";
    os << "distill_lr = " << fmt_double(cfg.distill_lr) << "\n";
    os << "proxy_batch = " << cfg.proxy_batch << "\n";
    os << "teacher_schedule = " << cfg.teacher_schedule << "\n";
    os << "fusion_init = " << cfg.fusion_init << "\n";
    os << "key_nudge = " << fmt_double(cfg.key_nudge) << "\n";
    os << "\n[run]\n";
    os << "seeds = ";
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) os << (i ? "," : "") << cfg.seeds[i];
    os << "\n";
    os << "rounds_per_task = " << cfg.rounds_per_task << "\n";
    os << "ablation = " << ablation_name(cfg.ablation) << "\n";
    os << "out_dir = " << cfg.out_dir << "\n";
    os << "threads = " << cfg.threads << "\n";
    return os.str();
}

namespace {

struct EvalJob {
    int client;
    int task;
    ModelPath path;
    AccuracyCell cell;
};

void evaluate_clients(const std::vector<Client>& clients, const ScenarioPlan& plan,
                      const SampleStore& store, ModelPath path, int upto_task, int round,
                      int threads, AccuracyMatrix& matrix) {
    std::vector<EvalJob> jobs;
    for (std::size_t a = 0; a < clients.size(); ++a) {
        for (int u = 0; u <= upto_task; ++u) {
            const TaskSpec& task = plan.client_tasks[a][static_cast<std::size_t>(u)];
            if (task.test.empty()) continue;
            jobs.push_back({static_cast<int>(a), u, path, {}});
        }
    }
    parallel_over_clients(static_cast<int>(jobs.size()), threads, [&](int j) {
        EvalJob& job = jobs[static_cast<std::size_t>(j)];
        const TaskSpec& task =
            plan.client_tasks[static_cast<std::size_t>(job.client)][static_cast<std::size_t>(job.task)];
        job.cell = evaluate(clients[static_cast<std::size_t>(job.client)], job.path, store, task.test);
    });
    for (const EvalJob& job : jobs) {
        matrix.record(job.client, round, job.task, job.path, job.cell.correct, job.cell.total);
    }
}

SeedResult run_seed(const ExperimentConfig& cfg, std::uint64_t seed, const RunOptions& options) {
    SeedResult res;
    res.seed = seed;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        const SampleStore store = build_store(cfg, seed);
        const Holdouts holdouts =
            reserve_holdouts(store, cfg.proxy_per_class, cfg.warmup_fraction, seed);
        ScenarioPlan plan =
            cfg.mode == ScenarioMode::Synchronous
                ? split_synchronous(store, holdouts.remainder, cfg.clients, cfg.tasks,
                                    cfg.dirichlet_alpha, seed, cfg.test_fraction)
                : split_asynchronous(store, holdouts.remainder, cfg.clients,
                                     cfg.private_per_client, cfg.classes_per_task, cfg.tasks, seed,
                                     cfg.test_fraction);
        plan.proxy = holdouts.proxy;
        plan.warmup = holdouts.warmup;
        res.manifest = plan.manifest();

        std::shared_ptr<const Backbone> backbone =
            acquire_backbone(cfg, store, holdouts.warmup, seed, options.reuse_backbone_cache);
        res.backbone_checksum = backbone->checksum();
        res.warmup_accuracy = backbone->warmup_accuracy();

        const GlobalPromptPool init_pool =
            GlobalPromptPool::seeded(cfg.pool_size, cfg.prompt_length,
                                     static_cast<int>(cfg.embed_dim), derive_seed(seed, {0xF001}));
        std::vector<int> blocks;
        for (int b = 0; b < cfg.prefix_blocks; ++b) blocks.push_back(b);

        std::vector<Client> clients;
        clients.reserve(static_cast<std::size_t>(cfg.clients));
        for (int a = 0; a < cfg.clients; ++a) {
            clients.emplace_back(a, backbone, cfg.classes, init_pool.clone(), cfg.prefix_length,
                                 blocks, cfg.train_config(seed, a), client_ablation(cfg.ablation));
        }
        Server server(backbone, &store, holdouts.proxy, cfg.fusion_config());

        const int rounds = cfg.rounds_per_task;
        for (int t = 0; t < cfg.tasks; ++t) {
            if (rounds == 0) {
                // Evaluation-only run: untrained accuracies, one round per task.
                for (Client& client : clients) {
                    client.observe_classes(plan.client_tasks[static_cast<std::size_t>(client.id())]
                                                            [static_cast<std::size_t>(t)]);
                }
                evaluate_clients(clients, plan, store, ModelPath::Local, t, t, cfg.threads,
                                 res.matrix);
                evaluate_clients(clients, plan, store, ModelPath::Global, t, t, cfg.threads,
                                 res.matrix);
                continue;
            }
            for (int k = 0; k < rounds; ++k) {
                const int r = t * rounds + k;
                std::vector<std::vector<LossTracePoint>> traces(
                    static_cast<std::size_t>(cfg.clients));
                parallel_over_clients(cfg.clients, cfg.threads, [&](int a) {
                    Client& client = clients[static_cast<std::size_t>(a)];
                    const TaskSpec& task =
                        plan.client_tasks[static_cast<std::size_t>(a)][static_cast<std::size_t>(t)];
                    if (cfg.ablation != Ablation::WithoutGlobalPrompts) {
                        client.unfreeze_global();
                        PhaseReport rep = client.global_phase(store, task);
                        client.freeze_global();
                        for (std::size_t s = 0; s < rep.steps.size(); ++s) {
                            traces[static_cast<std::size_t>(a)].push_back(
                                {a, t, r, 'g', static_cast<int>(s), rep.steps[s].total,
                                 rep.steps[s].cross_entropy, rep.steps[s].surrogate});
                        }
                    }
                    if (cfg.ablation != Ablation::WithoutLocalPrompts) {
                        PhaseReport rep = client.local_phase(store, task);
                        for (std::size_t s = 0; s < rep.steps.size(); ++s) {
                            traces[static_cast<std::size_t>(a)].push_back(
                                {a, t, r, 'l', static_cast<int>(s), rep.steps[s].total,
                                 rep.steps[s].cross_entropy, rep.steps[s].surrogate});
                        }
                    } else {
                        client.observe_classes(task);
                    }
                });
                for (const auto& trace : traces) {
                    res.losses.insert(res.losses.end(), trace.begin(), trace.end());
                }

                // Local model evaluated before fusion touches the pools; the
                // round-0 entry doubles as the temporal-retention baseline.
                evaluate_clients(clients, plan, store, ModelPath::Local, t, r, cfg.threads,
                                 res.matrix);

                if (cfg.ablation != Ablation::WithoutGlobalPrompts) {
                    res.ledgers.push_back(
                        server.run_round(clients, r, cfg.ablation == Ablation::WithoutFusion));
                } else {
                    RoundLedger ledger;
                    ledger.round = r;
                    ledger.bytes_per_client.assign(static_cast<std::size_t>(cfg.clients), 0);
                    res.ledgers.push_back(ledger);
                }

                evaluate_clients(clients, plan, store, ModelPath::Global, t, r, cfg.threads,
                                 res.matrix);

                RetentionPoint point;
                point.round = r;
                try {
                    point.kr_t = kr_temporal(res.matrix, r);
                } catch (const ConfigError&) {
                    point.kr_t = 0.0;
                }
                try {
                    point.kr_s = kr_spatial(res.matrix, r, t);
                } catch (const ConfigError&) {
                    point.kr_s = 0.0;
                }
                res.retention.push_back(point);
            }
            for (Client& client : clients) client.advance_task();
        }

        if (!res.retention.empty()) {
            res.final_kr_t = res.retention.back().kr_t;
            res.final_kr_s = res.retention.back().kr_s;
        }
        const int last_round = res.matrix.max_round();
        if (last_round >= 0) {
            try {
                res.final_avg_global_accuracy = average_task_accuracy(res.matrix, last_round).average;
            } catch (const ConfigError&) {
                res.final_avg_global_accuracy = 0.0;
            }
            double sum = 0.0;
            std::size_t n = 0;
            for (int c : res.matrix.clients()) {
                for (int u : res.matrix.tasks_at(last_round, ModelPath::Local)) {
                    if (res.matrix.has(c, last_round, u, ModelPath::Local)) {
                        sum += res.matrix.at(c, last_round, u, ModelPath::Local).accuracy();
                        ++n;
                    }
                }
            }
            res.final_avg_personalized_accuracy = n > 0 ? sum / static_cast<double>(n) : 0.0;
        }
        res.accounting = accounting(clients, res.ledgers);
    } catch (const std::exception& e) {
        res.complete = false;
        res.error = e.what();
    }
    res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

std::string seed_summary_text(const SeedResult& res) {
    std::ostringstream os;
    os << "seed=" << res.seed << " complete=" << (res.complete ? 1 : 0);
    if (!res.complete) os << " error=" << res.error;
    os << " backbone_checksum=" << res.backbone_checksum
       << " warmup_accuracy=" << fmt_double(res.warmup_accuracy)
       << " final_kr_t=" << fmt_double(res.final_kr_t)
       << " final_kr_s=" << fmt_double(res.final_kr_s)
       << " final_avg_global_accuracy=" << fmt_double(res.final_avg_global_accuracy)
       << " final_avg_personalized_accuracy=" << fmt_double(res.final_avg_personalized_accuracy)
       << "\n";
    return os.str();
}

void persist_seed(const fs::path& dir, const SeedResult& res) {
    fs::create_directories(dir);
    write_file(dir / "manifest.txt", res.manifest);
    write_file(dir / "matrix.csv", res.matrix.to_csv());

    std::ostringstream retention;
    for (const RetentionPoint& p : res.retention) {
        retention << "round=" << p.round << " kr_t=" << fmt_double(p.kr_t)
                  << " kr_s=" << fmt_double(p.kr_s) << "\n";
    }
    write_file(dir / "retention.txt", retention.str());

    std::ostringstream ledgers;
    for (const RoundLedger& ledger : res.ledgers) ledgers << ledger.to_text() << "\n";
    write_file(dir / "ledgers.txt", ledgers.str());

    std::ostringstream losses;
    losses << "client,task,round,phase,step,total,cross_entropy,surrogate\n";
    for (const LossTracePoint& p : res.losses) {
        losses << p.client << "," << p.task << "," << p.round << "," << p.phase << "," << p.step
               << "," << fmt_double(p.total) << "," << fmt_double(p.cross_entropy) << ","
               << fmt_double(p.surrogate) << "\n";
    }
    write_file(dir / "losses.csv", losses.str());

    std::ostringstream acc;
    for (const ClientAccounting& c : res.accounting.per_client) {
        acc << "client=" << c.client_id << " global_prompt_params=" << c.pools.global_prompt_params
            << " global_key_params=" << c.pools.global_key_params
            << " local_prompt_params=" << c.pools.local_prompt_params
            << " local_key_params=" << c.pools.local_key_params
            << " prompt_total=" << c.pools.prompt_total() << " head_params=" << c.head_params
            << " transmitted_params_per_round=" << c.transmitted_params_per_round << "\n";
    }
    acc << "bytes_per_round_per_client=" << res.accounting.bytes_per_round_per_client << "\n";
    write_file(dir / "accounting.txt", acc.str());

    write_file(dir / "summary.txt", seed_summary_text(res));
    write_file(dir / "timings.txt", "wall_seconds=" + fmt_double(res.wall_seconds) + "\n");
}

}  // namespace

RunArtifact run_experiment(const ExperimentConfig& cfg, const RunOptions& options) {
    cfg.validate();
    RunArtifact artifact;
    artifact.config = cfg;
    artifact.root_dir = cfg.out_dir;
    for (std::uint64_t seed : cfg.seeds) {
        artifact.seeds.push_back(run_seed(cfg, seed, options));
    }
    const auto n = static_cast<double>(artifact.seeds.size());
    for (const SeedResult& res : artifact.seeds) {
        artifact.mean_final_kr_t += res.final_kr_t / n;
        artifact.mean_final_kr_s += res.final_kr_s / n;
        artifact.mean_final_avg_global_accuracy += res.final_avg_global_accuracy / n;
        artifact.mean_final_avg_personalized_accuracy += res.final_avg_personalized_accuracy / n;
    }
    if (options.persist) {
        const fs::path root(cfg.out_dir);
        fs::create_directories(root);
        write_file(root / "config.txt", serialize_config(cfg));
        for (const SeedResult& res : artifact.seeds) {
            persist_seed(root / ("seed_" + std::to_string(res.seed)), res);
        }
        std::ostringstream summary;
        for (const SeedResult& res : artifact.seeds) summary << seed_summary_text(res);
        summary << "mean_final_kr_t=" << fmt_double(artifact.mean_final_kr_t)
                << " mean_final_kr_s=" << fmt_double(artifact.mean_final_kr_s)
                << " mean_final_avg_global_accuracy="
                << fmt_double(artifact.mean_final_avg_global_accuracy)
                << " mean_final_avg_personalized_accuracy="
                << fmt_double(artifact.mean_final_avg_personalized_accuracy) << "\n";
        write_file(root / "summary.txt", summary.str());

        // Per-round retention series averaged over seeds.
        std::map<int, std::pair<double, double>> series;
        std::map<int, int> counts;
        for (const SeedResult& res : artifact.seeds) {
            for (const RetentionPoint& p : res.retention) {
                series[p.round].first += p.kr_t;
                series[p.round].second += p.kr_s;
                counts[p.round] += 1;
            }
        }
        std::ostringstream series_csv;
        series_csv << "round,kr_t_mean,kr_s_mean\n";
        for (const auto& [round, sums] : series) {
            series_csv << round << "," << fmt_double(sums.first / counts[round]) << ","
                       << fmt_double(sums.second / counts[round]) << "\n";
        }
        write_file(root / "series.csv", series_csv.str());
        write_file(root / "report.txt", render_report(artifact));
    }
    return artifact;
}

void write_partition_manifests(const ExperimentConfig& cfg) {
    cfg.validate();
    const fs::path root(cfg.out_dir);
    fs::create_directories(root);
    for (std::uint64_t seed : cfg.seeds) {
        const SampleStore store = build_store(cfg, seed);
        const Holdouts holdouts =
            reserve_holdouts(store, cfg.proxy_per_class, cfg.warmup_fraction, seed);
        ScenarioPlan plan =
            cfg.mode == ScenarioMode::Synchronous
                ? split_synchronous(store, holdouts.remainder, cfg.clients, cfg.tasks,
                                    cfg.dirichlet_alpha, seed, cfg.test_fraction)
                : split_asynchronous(store, holdouts.remainder, cfg.clients,
                                     cfg.private_per_client, cfg.classes_per_task, cfg.tasks, seed,
                                     cfg.test_fraction);
        plan.proxy = holdouts.proxy;
        plan.warmup = holdouts.warmup;
        write_file(root / ("manifest_seed_" + std::to_string(seed) + ".txt"), plan.manifest());
    }
}

SweepResult sweep(const ExperimentConfig& cfg, const std::string& axis,
                  const std::vector<double>& values, const RunOptions& options) {
    if (values.empty()) throw ConfigError("sweep needs at least one value");
    static const std::map<std::string, std::string> kAxisKeys = {
        {"M", "pool_size"},          {"L", "prompt_length"}, {"N", "top_n"},
        {"prefix_length", "prefix_length"}, {"lp", "prefix_length"},
        {"lambda1", "lambda1"},      {"lambda2", "lambda2"},
    };
    auto it = kAxisKeys.find(axis);
    if (it == kAxisKeys.end()) throw ConfigError("unknown sweep axis: " + axis);

    SweepResult result;
    result.axis = axis;
    for (double value : values) {
        ExperimentConfig run_cfg = cfg;
        std::string text;
        if (axis == "lambda1" || axis == "lambda2") text = fmt_double(value);
        else text = std::to_string(static_cast<long long>(value));
        set_config_value(run_cfg, it->second, text);
        run_cfg.out_dir = cfg.out_dir + "/" + axis + "_" + text;
        RunArtifact artifact = run_experiment(run_cfg, options);
        result.rows.push_back({value, artifact.mean_final_kr_t, artifact.mean_final_kr_s,
                               artifact.mean_final_avg_global_accuracy,
                               artifact.mean_final_avg_personalized_accuracy});
        result.artifacts.push_back(std::move(artifact));
    }
    if (options.persist) {
        std::ostringstream grid;
        grid << "axis,value,kr_t,kr_s,avg_global_accuracy,avg_personalized_accuracy\n";
        for (const SweepRow& row : result.rows) {
            grid << axis << "," << fmt_double(row.value) << "," << fmt_double(row.kr_t) << ","
                 << fmt_double(row.kr_s) << "," << fmt_double(row.avg_global_accuracy) << ","
                 << fmt_double(row.avg_personalized_accuracy) << "\n";
        }
        fs::create_directories(cfg.out_dir);
        write_file(fs::path(cfg.out_dir) / "grid.csv", grid.str());
    }
    return result;
}

std::string render_report(const RunArtifact& artifact) {
    std::ostringstream os;
    os << "== run: ablation=" << ablation_name(artifact.config.ablation)
       << " mode=" << (artifact.config.mode == ScenarioMode::Synchronous ? "sync" : "async")
       << " clients=" << artifact.config.clients << " tasks=" << artifact.config.tasks << " ==\n";
    for (const SeedResult& res : artifact.seeds) {
        os << "\n-- seed " << res.seed << (res.complete ? "" : " (incomplete)") << " --\n";
        const int last_round = res.matrix.max_round();
        if (last_round >= 0) {
            TaskAverages avg;
            try {
                avg = average_task_accuracy(res.matrix, last_round);
            } catch (const ConfigError&) {
            }
            os << "task:    ";
            for (int t : avg.task_ids) os << " " << t;
            os << "  Average\n";
            os << "accuracy:";
            char buf[16];
            for (double a : avg.per_task) {
                std::snprintf(buf, sizeof(buf), " %.4f", a);
                os << buf;
            }
            std::snprintf(buf, sizeof(buf), "  %.4f", avg.average);
            os << buf << "\n";
        }
        os << "round kr_t kr_s\n";
        for (const RetentionPoint& p : res.retention) {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%d %.6f %.6f\n", p.round, p.kr_t, p.kr_s);
            os << buf;
        }
        for (const ClientAccounting& c : res.accounting.per_client) {
            os << "client " << c.client_id << ": prompt_params=" << c.pools.prompt_total()
               << " (gp=" << c.pools.global_prompt_params << " gk=" << c.pools.global_key_params
               << " lp=" << c.pools.local_prompt_params << " lk=" << c.pools.local_key_params
               << ") heads=" << c.head_params
               << " transmitted_per_round=" << c.transmitted_params_per_round << "\n";
        }
    }
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "\nseed-averaged: kr_t=%.6f kr_s=%.6f avg_global=%.6f avg_personalized=%.6f\n",
                  artifact.mean_final_kr_t, artifact.mean_final_kr_s,
                  artifact.mean_final_avg_global_accuracy,
                  artifact.mean_final_avg_personalized_accuracy);
    os << buf;
    return os.str();
}

bool report_from_directory(const std::string& artifact_dir, std::ostream& out) {
    const fs::path root(artifact_dir);
    if (!fs::exists(root / "config.txt")) {
        out << "no config.txt under " << artifact_dir << "\n";
        return false;
    }
    const ExperimentConfig cfg = parse_config_file((root / "config.txt").string());
    bool ok = true;
    out << "report for " << artifact_dir << " (ablation " << ablation_name(cfg.ablation) << ")\n";
    for (std::uint64_t seed : cfg.seeds) {
        const fs::path dir = root / ("seed_" + std::to_string(seed));
        if (!fs::exists(dir / "matrix.csv")) {
            out << "seed " << seed << ": missing matrix.csv (incomplete artifact)\n";
            ok = false;
            continue;
        }
        const AccuracyMatrix matrix = AccuracyMatrix::from_csv(read_file(dir / "matrix.csv"));

        // Recompute retention from the raw matrix and require bit-exact
        // agreement with the persisted series.
        std::istringstream persisted(read_file(dir / "retention.txt"));
        std::string line;
        while (std::getline(persisted, line)) {
            if (line.empty()) continue;
            int round = 0;
            char kr_t_text[64] = {0}, kr_s_text[64] = {0};
            if (std::sscanf(line.c_str(), "round=%d kr_t=%63s kr_s=%63s", &round, kr_t_text,
                            kr_s_text) != 3) {
                out << "seed " << seed << ": bad retention line: " << line << "\n";
                ok = false;
                continue;
            }
            double kr_t_re = 0.0, kr_s_re = 0.0;
            try {
                kr_t_re = kr_temporal(matrix, round);
            } catch (const ConfigError&) {
            }
            try {
                kr_s_re = kr_spatial(matrix, round);
            } catch (const ConfigError&) {
            }
            if (fmt_double(kr_t_re) != kr_t_text || fmt_double(kr_s_re) != kr_s_text) {
                out << "seed " << seed << " round " << round
                    << ": retention mismatch (recomputed kr_t=" << fmt_double(kr_t_re)
                    << " kr_s=" << fmt_double(kr_s_re) << " vs persisted " << kr_t_text << " "
                    << kr_s_text << ")\n";
                ok = false;
            }
        }

        const int last_round = matrix.max_round();
        if (last_round >= 0) {
            TaskAverages avg;
            try {
                avg = average_task_accuracy(matrix, last_round);
                out << "seed " << seed << " final round " << last_round << ": avg global accuracy "
                    << fmt_double(avg.average) << "\n";
            } catch (const ConfigError& e) {
                out << "seed " << seed << ": " << e.what() << "\n";
            }
        }
    }
    out << (ok ? "retention series verified against matrices\n"
               : "retention verification FAILED\n");
    return ok;
}

namespace {

BackboneConfig tiny_backbone_config(std::uint64_t seed) {
    BackboneConfig cfg;
    cfg.image_side = 8;
    cfg.channels = 3;
    cfg.patch_side = 4;
    cfg.embed_dim = 16;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.mlp_ratio = 2;
    cfg.seed = seed;
    return cfg;
}

// Central finite differences (h = 1e-5) on up to max_params randomly chosen
// coordinates of the given parameters, against the gradients already stored
// on them. Relative error denominator is max(|analytic|, 1e-8).
//
// Sampling is restricted to coordinates the stencil can resolve: against an
// O(1) loss, (f(x+h)-f(x-h))/2h carries ~eps*|f|/h of cancellation noise
// (~1e-11), so gradients below 1e-5 cannot be distinguished from zero at the
// stated tolerance and are excluded from the draw.
GradCheckResult finite_difference_check(std::vector<Tensor>& params,
                                        const std::function<double()>& loss_fn,
                                        std::uint64_t seed, std::size_t max_params) {
    constexpr double kResolvable = 1e-5;
    std::vector<std::pair<std::size_t, std::size_t>> coords;
    for (std::size_t p = 0; p < params.size(); ++p) {
        for (std::size_t i = 0; i < params[p].size(); ++i) {
            if (std::abs(params[p].grad()[i]) >= kResolvable) coords.push_back({p, i});
        }
    }
    Rng rng(seed);
    rng.shuffle(coords);
    const std::size_t n = std::min(max_params, coords.size());
    const double h = 1e-5;
    GradCheckResult out;
    out.checked = n;
    for (std::size_t k = 0; k < n; ++k) {
        const auto [p, i] = coords[k];
        const double analytic = params[p].grad()[i];
        const double saved = params[p].values()[i];
        params[p].values_mut()[i] = saved + h;
        const double loss_plus = loss_fn();
        params[p].values_mut()[i] = saved - h;
        const double loss_minus = loss_fn();
        params[p].values_mut()[i] = saved;
        const double fd = (loss_plus - loss_minus) / (2.0 * h);
        const double rel = std::abs(fd - analytic) / std::max(std::abs(analytic), 1e-8);
        out.max_rel_err = std::max(out.max_rel_err, rel);
    }
    return out;
}

struct TinyClientWorld {
    SampleStore store;
    std::shared_ptr<const Backbone> backbone;
    std::unique_ptr<Client> client;
    std::vector<std::size_t> refs;
};

TinyClientWorld tiny_client_world(std::uint64_t seed) {
    TinyClientWorld world;
    world.store = gen_synthetic(4, 3, 8, seed);
    auto backbone = std::make_shared<Backbone>(tiny_backbone_config(seed));
    backbone->freeze();
    world.backbone = backbone;
    GlobalPromptPool pool = GlobalPromptPool::seeded(4, 2, 16, derive_seed(seed, {0xF001}));
    TrainConfig tc;
    tc.top_n = 2;
    tc.lambda1 = 0.5;
    tc.lambda2 = 0.5;
    tc.seed = seed;
    world.client = std::make_unique<Client>(0, backbone, 4, std::move(pool), 2,
                                            std::vector<int>{0, 1}, tc);
    TaskSpec task;
    task.class_set = {0, 1, 2, 3};
    world.client->observe_classes(task);
    world.refs = {0, 4, 8, 11};  // one sample per class
    return world;
}

}  // namespace

GradCheckResult check_global_loss_gradients(std::uint64_t seed, std::size_t max_params) {
    TinyClientWorld world = tiny_client_world(seed);
    Tape tape;
    BatchLoss loss = world.client->global_batch_loss(tape, world.store, world.refs);
    tape.backward(loss.total);
    auto loss_fn = [&] {
        Tape inner;
        return world.client->global_batch_loss(inner, world.store, world.refs).total.value();
    };
    return finite_difference_check(loss.touched, loss_fn, derive_seed(seed, {0xFD, 1}), max_params);
}

GradCheckResult check_local_loss_gradients(std::uint64_t seed, std::size_t max_params) {
    TinyClientWorld world = tiny_client_world(seed);
    world.client->freeze_global();
    {
        // Warm call so every class entry exists before gradients are taken.
        Tape warm;
        world.client->local_batch_loss(warm, world.store, world.refs);
    }
    Tape tape;
    BatchLoss loss = world.client->local_batch_loss(tape, world.store, world.refs);
    tape.backward(loss.total);
    auto loss_fn = [&] {
        Tape inner;
        return world.client->local_batch_loss(inner, world.store, world.refs).total.value();
    };
    return finite_difference_check(loss.touched, loss_fn, derive_seed(seed, {0xFD, 2}), max_params);
}

GradCheckResult check_fusion_loss_gradients(std::uint64_t seed, std::size_t max_params) {
    const SampleStore store = gen_synthetic(4, 3, 8, seed);
    Backbone backbone(tiny_backbone_config(seed));
    backbone.freeze();
    std::vector<GlobalPromptPool> teachers;
    teachers.push_back(GlobalPromptPool::seeded(4, 2, 16, derive_seed(seed, {1})));
    teachers.push_back(GlobalPromptPool::seeded(4, 2, 16, derive_seed(seed, {2})));
    FusionConfig cfg;
    cfg.top_n = 2;
    cfg.key_nudge = 0.0;  // the bare feature-matching objective
    GlobalPromptPool student = fedavg_pools(teachers);
    student.set_trainable(true);
    FusionLossContext context(&teachers, &backbone, &store, cfg);
    const std::vector<std::size_t> refs = {0, 5, 10};

    Tape tape;
    Tensor loss = context.loss(tape, student, refs, 0);
    tape.backward(loss);
    std::vector<Tensor> params;
    for (int i = 0; i < student.pool_size(); ++i) {
        params.push_back(student.entry(i).prompt);
        params.push_back(student.entry(i).key);
    }
    auto loss_fn = [&] {
        Tape inner;
        return context.loss(inner, student, refs, 0).value();
    };
    return finite_difference_check(params, loss_fn, derive_seed(seed, {0xFD, 3}), max_params);
}

bool run_verification(std::ostream& out) {
    bool all_ok = true;
    auto check = [&](const std::string& name, bool pass, const std::string& detail = "") {
        out << (pass ? "[ok]   " : "[FAIL] ") << name;
        if (!detail.empty()) out << " (" << detail << ")";
        out << "\n";
        all_ok = all_ok && pass;
    };

    for (std::uint64_t seed : {42ULL, 1999ULL, 2024ULL}) {
        const GradCheckResult g = check_global_loss_gradients(seed, 16);
        check("global-phase loss gradients vs central differences, seed " + std::to_string(seed),
              g.max_rel_err < 1e-4, "max_rel_err=" + fmt_double(g.max_rel_err));
        const GradCheckResult l = check_local_loss_gradients(seed, 16);
        check("local-phase loss gradients vs central differences, seed " + std::to_string(seed),
              l.max_rel_err < 1e-4, "max_rel_err=" + fmt_double(l.max_rel_err));
        const GradCheckResult f = check_fusion_loss_gradients(seed, 16);
        check("fusion loss gradients vs central differences, seed " + std::to_string(seed),
              f.max_rel_err < 1e-4, "max_rel_err=" + fmt_double(f.max_rel_err));
    }

    {
        // Independently coded triple-loop product.
        Rng rng(7);
        Tensor a = seeded_uniform({3, 4}, rng, -1.0, 1.0);
        Tensor b = seeded_uniform({4, 2}, rng, -1.0, 1.0);
        Tape tape;
        Tensor c = tape.matmul(a, b);
        double max_diff = 0.0;
        for (std::size_t i = 0; i < 3; ++i) {
            for (std::size_t j = 0; j < 2; ++j) {
                double acc = 0.0;
                for (std::size_t k = 0; k < 4; ++k) acc += a.at(i, k) * b.at(k, j);
                max_diff = std::max(max_diff, std::abs(acc - c.at(i, j)));
            }
        }
        check("matmul vs triple-loop oracle, seed 7", max_diff < 1e-12,
              "max_diff=" + fmt_double(max_diff));
    }

    {
        // Extended-precision exp-normalize.
        Tape tape;
        Tensor x({3}, {1.0, 2.0, 3.0});
        Tensor y = tape.softmax(x, 0);
        long double denom = 0.0L;
        for (double v : x.values()) denom += expl(static_cast<long double>(v) - 3.0L);
        double max_diff = 0.0;
        for (std::size_t i = 0; i < 3; ++i) {
            const long double want = expl(static_cast<long double>(x.values()[i]) - 3.0L) / denom;
            max_diff = std::max(max_diff, std::abs(static_cast<double>(want) - y.values()[i]));
        }
        Tensor ce = tape.cross_entropy(x, 2);
        const long double want_ce = -logl(expl(0.0L) / denom);
        max_diff = std::max(max_diff, std::abs(static_cast<double>(want_ce) - ce.value()));
        check("softmax and cross-entropy vs extended-precision oracle", max_diff < 1e-12,
              "max_diff=" + fmt_double(max_diff));
    }

    {
        // Full-sort query oracle.
        Rng rng(42);
        GlobalPromptPool pool = GlobalPromptPool::seeded(10, 2, 8, 42);
        Tensor probe = seeded_uniform({1, 8}, rng, -1.0, 1.0);
        const QueryResult got = pool.query(probe, 5);
        std::vector<std::pair<double, int>> ranked;
        for (int i = 0; i < 10; ++i) {
            ranked.push_back({cosine_distance(probe.values(), pool.entry(i).key.values()), i});
        }
        std::stable_sort(ranked.begin(), ranked.end());
        bool same = got.indices.size() == 5;
        for (std::size_t i = 0; same && i < 5; ++i) same = got.indices[i] == ranked[i].second;
        check("top-5 query vs full-sort oracle, seed 42", same);
    }

    {
        // Gamma-ratio Dirichlet re-derivation on the same generator stream.
        std::mt19937_64 gen(123);
        auto uniform = [&] { return static_cast<double>(gen() >> 11) * 0x1.0p-53; };
        auto uniform_nonzero = [&] {
            double u;
            do {
                u = uniform();
            } while (u == 0.0);
            return u;
        };
        auto normal = [&] {
            double u, v, s;
            do {
                u = 2.0 * uniform() - 1.0;
                v = 2.0 * uniform() - 1.0;
                s = u * u + v * v;
            } while (s >= 1.0 || s == 0.0);
            return u * std::sqrt(-2.0 * std::log(s) / s);
        };
        std::function<double(double)> gamma = [&](double alpha) -> double {
            if (alpha < 1.0) return gamma(alpha + 1.0) * std::pow(uniform_nonzero(), 1.0 / alpha);
            const double d = alpha - 1.0 / 3.0;
            const double c = 1.0 / std::sqrt(9.0 * d);
            for (;;) {
                double x, v;
                do {
                    x = normal();
                    v = 1.0 + c * x;
                } while (v <= 0.0);
                v = v * v * v;
                const double u = uniform_nonzero();
                if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
                if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
            }
        };
        const std::vector<double> alphas(5, 1.0);
        std::vector<double> want(5);
        double total = 0.0;
        for (std::size_t i = 0; i < 5; ++i) {
            want[i] = gamma(alphas[i]);
            total += want[i];
        }
        for (double& w : want) w /= total;
        const std::vector<double> got = Rng(123).dirichlet(alphas);
        bool same = true;
        for (std::size_t i = 0; i < 5; ++i) same = same && got[i] == want[i];
        check("dirichlet draw vs gamma-ratio oracle, seed 123", same);
    }

    {
        // Retention vs manual recomputation.
        AccuracyMatrix matrix;
        Rng rng(99);
        const int clients = 5;
        for (int c = 0; c < clients; ++c) {
            matrix.record(c, 0, 0, ModelPath::Local, 5 + c, 20);
            matrix.record(c, 3, 0, ModelPath::Local, 4 + c, 20);
            matrix.record(c, 3, 1, ModelPath::Local, 10 + c, 20);
            matrix.record(c, 3, 1, ModelPath::Global, 9 + c, 20);
        }
        double manual_t = 0.0;
        for (int c = 0; c < clients; ++c) {
            manual_t += ((4.0 + c) / 20.0) / ((5.0 + c) / 20.0);
        }
        manual_t /= clients;
        double manual_s = 0.0;
        for (int c = 0; c < clients; ++c) {
            manual_s += ((9.0 + c) / 20.0) / ((10.0 + c) / 20.0);
        }
        manual_s /= clients;
        const bool pass = std::abs(kr_temporal(matrix, 3) - manual_t) < 1e-12 &&
                          std::abs(kr_spatial(matrix, 3, 1) - manual_s) < 1e-12 &&
                          kr_temporal(matrix, 0) == 1.0;
        check("knowledge retention vs manual recomputation", pass);
    }

    {
        // Identical pools are an exact fixed point of both fusion operators.
        const SampleStore store = gen_synthetic(4, 3, 8, 42);
        Backbone backbone(tiny_backbone_config(42));
        backbone.freeze();
        GlobalPromptPool pool = GlobalPromptPool::seeded(4, 2, 16, 7);
        std::vector<GlobalPromptPool> pools;
        pools.push_back(pool.clone());
        pools.push_back(pool.clone());
        FusionConfig cfg;
        cfg.top_n = 2;
        cfg.distill_steps = 3;
        cfg.proxy_batch = 2;
        const SampleRefs proxy = {0, 1, 4, 5};
        const FusionResult fused = selective_prompt_fusion(pools, backbone, store, proxy, cfg);
        const GlobalPromptPool averaged = fedavg_pools(pools);
        const bool pass = fused.pool.checksum() == pool.checksum() &&
                          averaged.checksum() == pool.checksum() &&
                          fused.loss_trace.front() == 0.0;
        check("identical-pool fusion fixed point", pass);
    }

    out << (all_ok ? "verification suite passed\n" : "verification suite FAILED\n");
    return all_ok;
}

}  // namespace fedmgp
