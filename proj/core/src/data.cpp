#include "fedmgp/data.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "fedmgp/errors.hpp"
#include "fedmgp/rng.hpp"

namespace fedmgp {

namespace {

constexpr std::uint64_t kHoldoutStream = 0x01;
constexpr std::uint64_t kClassOrderStream = 0x02;
constexpr std::uint64_t kClassShuffleStream = 0x03;
constexpr std::uint64_t kDirichletStream = 0x04;
constexpr std::uint64_t kTestSplitStream = 0x05;
constexpr std::uint64_t kClientClassStream = 0x06;
constexpr std::uint64_t kTemplateStream = 0x07;
constexpr std::uint64_t kNoiseStream = 0x08;

std::map<int, SampleRefs> refs_by_class(const SampleStore& store, const SampleRefs& refs) {
    std::map<int, SampleRefs> by_class;
    for (std::size_t r : refs) by_class[store[r].label].push_back(r);
    return by_class;
}

// Largest-remainder rounding of proportions to integer counts summing to n.
std::vector<std::size_t> apportion(const std::vector<double>& proportions, std::size_t n) {
    std::vector<std::size_t> counts(proportions.size());
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < proportions.size(); ++i) {
        const double exact = proportions[i] * static_cast<double>(n);
        counts[i] = static_cast<std::size_t>(exact);
        assigned += counts[i];
        remainders.push_back({exact - static_cast<double>(counts[i]), i});
    }
    std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    for (std::size_t k = 0; k < n - assigned; ++k) counts[remainders[k % remainders.size()].second] += 1;
    return counts;
}

void split_train_test(SampleRefs refs, double test_fraction, Rng& rng, SampleRefs& train,
                      SampleRefs& test) {
    rng.shuffle(refs);
    const std::size_t n_test = static_cast<std::size_t>(static_cast<double>(refs.size()) * test_fraction);
    test.assign(refs.begin(), refs.begin() + n_test);
    train.assign(refs.begin() + n_test, refs.end());
}

void append_refs(std::ostringstream& os, const char* tag, const SampleRefs& refs) {
    os << tag << ":";
    for (std::size_t r : refs) os << " " << r;
    os << "\n";
}

}  // namespace

std::string ScenarioPlan::manifest() const {
    std::ostringstream os;
    os << "mode=" << (mode == ScenarioMode::Synchronous ? "sync" : "async") << " clients=" << clients
       << " tasks=" << tasks_per_client << " classes_per_task=" << classes_per_task
       << " alpha=" << dirichlet_alpha << " private_per_client=" << private_per_client
       << " test_fraction=" << test_fraction << " seed=" << seed << "\n";
    append_refs(os, "proxy", proxy);
    append_refs(os, "warmup", warmup);
    for (const auto& tasks : client_tasks) {
        for (const TaskSpec& task : tasks) {
            os << "client=" << task.client_id << " task=" << task.task_index << " classes:";
            for (int c : task.class_set) os << " " << c;
            os << "\n";
            const std::string head =
                "client=" + std::to_string(task.client_id) + " task=" + std::to_string(task.task_index);
            append_refs(os, (head + " train").c_str(), task.train);
            append_refs(os, (head + " test").c_str(), task.test);
        }
    }
    return os.str();
}

SampleStore load_cifar100(const std::string& path) {
    constexpr std::size_t kRecord = 3074;
    constexpr std::size_t kPixels = 3072;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CorruptFileError("cannot open dataset file " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    if (bytes.size() % kRecord != 0) {
        throw CorruptFileError("dataset file " + path + " truncated at offset " +
                               std::to_string(bytes.size() - bytes.size() % kRecord));
    }
    const std::size_t count = bytes.size() / kRecord;
    std::vector<Sample> samples;
    samples.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const unsigned char* rec = bytes.data() + i * kRecord;
        std::vector<double> pixels(kPixels);
        for (std::size_t p = 0; p < kPixels; ++p) pixels[p] = static_cast<double>(rec[2 + p]) / 255.0;
        samples.push_back({Tensor({3, 32, 32}, std::move(pixels)), static_cast<int>(rec[1]), i});
    }
    return SampleStore(std::move(samples), 100);
}

SampleStore gen_synthetic(int classes, int per_class, std::size_t image_side, std::uint64_t seed,
                          std::size_t channels) {
    if (classes < 2) throw ConfigError("gen_synthetic needs at least 2 classes");
    const std::size_t pixels = channels * image_side * image_side;
    std::vector<Sample> samples;
    samples.reserve(static_cast<std::size_t>(classes) * static_cast<std::size_t>(per_class));
    std::size_t origin = 0;
    for (int c = 0; c < classes; ++c) {
        Rng template_rng(derive_seed(seed, {kTemplateStream, static_cast<std::uint64_t>(c)}));
        std::vector<double> tmpl(pixels);
        for (double& v : tmpl) v = template_rng.uniform();
        for (int i = 0; i < per_class; ++i) {
            Rng noise_rng(derive_seed(
                seed, {kNoiseStream, static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(i)}));
            std::vector<double> px(pixels);
            for (std::size_t p = 0; p < pixels; ++p) {
                px[p] = std::clamp(tmpl[p] + noise_rng.uniform(-0.15, 0.15), 0.0, 1.0);
            }
            samples.push_back({Tensor({channels, image_side, image_side}, std::move(px)), c, origin});
            ++origin;
        }
    }
    return SampleStore(std::move(samples), classes);
}

Holdouts reserve_holdouts(const SampleStore& store, int proxy_per_class, double warmup_fraction,
                          std::uint64_t seed) {
    SampleRefs all(store.size());
    for (std::size_t i = 0; i < store.size(); ++i) all[i] = i;
    auto by_class = refs_by_class(store, all);

    Holdouts out;
    for (auto& [cls, refs] : by_class) {
        if (refs.size() < static_cast<std::size_t>(proxy_per_class)) {
            throw ConfigError("class " + std::to_string(cls) + " has " +
                              std::to_string(refs.size()) + " samples, fewer than proxy_per_class=" +
                              std::to_string(proxy_per_class));
        }
        Rng rng(derive_seed(seed, {kHoldoutStream, static_cast<std::uint64_t>(cls)}));
        rng.shuffle(refs);
        std::size_t cursor = 0;
        for (int i = 0; i < proxy_per_class; ++i) out.proxy.push_back(refs[cursor++]);
        const std::size_t n_warm =
            static_cast<std::size_t>(static_cast<double>(refs.size() - cursor) * warmup_fraction);
        for (std::size_t i = 0; i < n_warm; ++i) out.warmup.push_back(refs[cursor++]);
        for (; cursor < refs.size(); ++cursor) out.remainder.push_back(refs[cursor]);
    }
    std::sort(out.proxy.begin(), out.proxy.end());
    std::sort(out.warmup.begin(), out.warmup.end());
    std::sort(out.remainder.begin(), out.remainder.end());
    return out;
}

ScenarioPlan split_synchronous(const SampleStore& store, const SampleRefs& available, int clients,
                               int tasks, double alpha, std::uint64_t seed, double test_fraction) {
    const int class_count = store.class_count();
    if (class_count % tasks != 0) {
        throw ConfigError("class count " + std::to_string(class_count) +
                          " not divisible by tasks=" + std::to_string(tasks));
    }
    const int classes_per_task = class_count / tasks;

    std::vector<int> class_order(class_count);
    for (int c = 0; c < class_count; ++c) class_order[c] = c;
    Rng order_rng(derive_seed(seed, {kClassOrderStream}));
    order_rng.shuffle(class_order);

    auto by_class = refs_by_class(store, available);

    // Per class: seeded shuffle, Dirichlet proportions over clients, then
    // largest-remainder rounding so every sample lands on exactly one client.
    std::map<int, std::vector<SampleRefs>> shares;  // class -> per-client refs
    const std::vector<double> alphas(static_cast<std::size_t>(clients), alpha);
    for (int c = 0; c < class_count; ++c) {
        SampleRefs refs = by_class.count(c) ? by_class[c] : SampleRefs{};
        Rng shuffle_rng(derive_seed(seed, {kClassShuffleStream, static_cast<std::uint64_t>(c)}));
        shuffle_rng.shuffle(refs);
        Rng dir_rng(derive_seed(seed, {kDirichletStream, static_cast<std::uint64_t>(c)}));
        const std::vector<double> proportions = dir_rng.dirichlet(alphas);
        if (refs.size() < static_cast<std::size_t>(clients)) {
            std::fprintf(stderr, "warning: class %d has %zu samples for %d clients\n", c,
                         refs.size(), clients);
        }
        const std::vector<std::size_t> counts = apportion(proportions, refs.size());
        auto& per_client = shares[c];
        per_client.resize(clients);
        std::size_t cursor = 0;
        for (int a = 0; a < clients; ++a) {
            per_client[a].assign(refs.begin() + cursor, refs.begin() + cursor + counts[a]);
            cursor += counts[a];
        }
    }

    ScenarioPlan plan;
    plan.mode = ScenarioMode::Synchronous;
    plan.clients = clients;
    plan.tasks_per_client = tasks;
    plan.classes_per_task = classes_per_task;
    plan.dirichlet_alpha = alpha;
    plan.test_fraction = test_fraction;
    plan.seed = seed;
    plan.client_tasks.resize(clients);
    for (int a = 0; a < clients; ++a) {
        for (int t = 0; t < tasks; ++t) {
            TaskSpec task;
            task.client_id = a;
            task.task_index = t;
            task.class_set.assign(class_order.begin() + t * classes_per_task,
                                  class_order.begin() + (t + 1) * classes_per_task);
            std::sort(task.class_set.begin(), task.class_set.end());
            SampleRefs refs;
            for (int c : task.class_set) {
                const SampleRefs& share = shares[c][a];
                refs.insert(refs.end(), share.begin(), share.end());
            }
            Rng split_rng(derive_seed(seed, {kTestSplitStream, static_cast<std::uint64_t>(a),
                                             static_cast<std::uint64_t>(t)}));
            split_train_test(std::move(refs), test_fraction, split_rng, task.train, task.test);
            plan.client_tasks[a].push_back(std::move(task));
        }
    }
    return plan;
}

ScenarioPlan split_asynchronous(const SampleStore& store, const SampleRefs& available, int clients,
                                int private_per_client, int classes_per_task, int tasks,
                                std::uint64_t seed, double test_fraction) {
    const int class_count = store.class_count();
    if (clients * private_per_client > class_count) {
        throw ConfigError("infeasible: clients*private_per_client = " +
                          std::to_string(clients * private_per_client) + " > class count " +
                          std::to_string(class_count));
    }
    const int public_count = class_count - clients * private_per_client;
    if (private_per_client + public_count < tasks * classes_per_task) {
        throw ConfigError("infeasible: private_per_client + public_count = " +
                          std::to_string(private_per_client + public_count) +
                          " < tasks*classes_per_task = " + std::to_string(tasks * classes_per_task));
    }

    std::vector<int> class_order(class_count);
    for (int c = 0; c < class_count; ++c) class_order[c] = c;
    Rng order_rng(derive_seed(seed, {kClassOrderStream}));
    order_rng.shuffle(class_order);

    std::vector<std::vector<int>> private_classes(clients);
    for (int a = 0; a < clients; ++a) {
        private_classes[a].assign(class_order.begin() + a * private_per_client,
                                  class_order.begin() + (a + 1) * private_per_client);
    }
    std::vector<int> public_classes(class_order.begin() + clients * private_per_client,
                                    class_order.end());

    auto by_class = refs_by_class(store, available);

    // Private classes: full data to the owner. Public classes: equal 1/a
    // shares per client, remainder samples going to the lowest client ids.
    std::vector<std::map<int, SampleRefs>> client_class_refs(clients);
    for (int a = 0; a < clients; ++a) {
        for (int c : private_classes[a]) client_class_refs[a][c] = by_class.count(c) ? by_class[c] : SampleRefs{};
    }
    for (int c : public_classes) {
        SampleRefs refs = by_class.count(c) ? by_class[c] : SampleRefs{};
        Rng shuffle_rng(derive_seed(seed, {kClassShuffleStream, static_cast<std::uint64_t>(c)}));
        shuffle_rng.shuffle(refs);
        const std::size_t base = refs.size() / static_cast<std::size_t>(clients);
        const std::size_t extra = refs.size() % static_cast<std::size_t>(clients);
        std::size_t cursor = 0;
        for (int a = 0; a < clients; ++a) {
            const std::size_t take = base + (static_cast<std::size_t>(a) < extra ? 1 : 0);
            client_class_refs[a][c].assign(refs.begin() + cursor, refs.begin() + cursor + take);
            cursor += take;
        }
    }

    ScenarioPlan plan;
    plan.mode = ScenarioMode::Asynchronous;
    plan.clients = clients;
    plan.tasks_per_client = tasks;
    plan.classes_per_task = classes_per_task;
    plan.private_per_client = private_per_client;
    plan.test_fraction = test_fraction;
    plan.seed = seed;
    plan.client_tasks.resize(clients);
    for (int a = 0; a < clients; ++a) {
        std::vector<int> own_classes = private_classes[a];
        own_classes.insert(own_classes.end(), public_classes.begin(), public_classes.end());
        Rng class_rng(derive_seed(seed, {kClientClassStream, static_cast<std::uint64_t>(a)}));
        class_rng.shuffle(own_classes);
        for (int t = 0; t < tasks; ++t) {
            TaskSpec task;
            task.client_id = a;
            task.task_index = t;
            task.class_set.assign(own_classes.begin() + t * classes_per_task,
                                  own_classes.begin() + (t + 1) * classes_per_task);
            std::sort(task.class_set.begin(), task.class_set.end());
            SampleRefs refs;
            for (int c : task.class_set) {
                const SampleRefs& share = client_class_refs[a][c];
                refs.insert(refs.end(), share.begin(), share.end());
            }
            Rng split_rng(derive_seed(seed, {kTestSplitStream, static_cast<std::uint64_t>(a),
                                             static_cast<std::uint64_t>(t)}));
            split_train_test(std::move(refs), test_fraction, split_rng, task.train, task.test);
            plan.client_tasks[a].push_back(std::move(task));
        }
    }
    return plan;
}

}  // namespace fedmgp
