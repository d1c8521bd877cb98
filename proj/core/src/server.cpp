#include "fedmgp/server.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>

#include "fedmgp/adam.hpp"
#include "fedmgp/checksum.hpp"
#include "fedmgp/errors.hpp"

namespace fedmgp {

namespace {

void check_pool_compat(const std::vector<GlobalPromptPool>& pools) {
    if (pools.empty()) throw ConfigError("fusion needs at least one pool");
    for (const GlobalPromptPool& p : pools) {
        if (p.pool_size() != pools[0].pool_size() || p.prompt_length() != pools[0].prompt_length() ||
            p.embed_dim() != pools[0].embed_dim()) {
            throw ShapeMismatchError("fusion pools disagree on (M, L, D)");
        }
    }
}

// Student pool initialization: index-wise mean of keys and prompts.
GlobalPromptPool mean_pool(const std::vector<GlobalPromptPool>& pools) {
    GlobalPromptPool out = pools[0].clone();
    const double inv = 1.0 / static_cast<double>(pools.size());
    for (int i = 0; i < out.pool_size(); ++i) {
        std::span<double> key = out.entry(i).key.values_mut();
        std::span<double> prompt = out.entry(i).prompt.values_mut();
        for (std::size_t j = 0; j < key.size(); ++j) {
            double acc = 0.0;
            for (const GlobalPromptPool& p : pools) acc += p.entry(i).key.values()[j];
            key[j] = acc * inv;
        }
        for (std::size_t j = 0; j < prompt.size(); ++j) {
            double acc = 0.0;
            for (const GlobalPromptPool& p : pools) acc += p.entry(i).prompt.values()[j];
            prompt[j] = acc * inv;
        }
    }
    return out;
}

}  // namespace

GlobalPromptPool fedavg_pools(const std::vector<GlobalPromptPool>& pools) {
    check_pool_compat(pools);
    GlobalPromptPool out = mean_pool(pools);
    out.set_trainable(false);
    return out;
}

FusionLossContext::FusionLossContext(const std::vector<GlobalPromptPool>* teachers,
                                     const Backbone* backbone, const SampleStore* store,
                                     FusionConfig cfg)
    : teachers_(teachers), backbone_(backbone), store_(store), cfg_(cfg) {
    if (cfg_.key_nudge > 0.0) {
        GlobalPromptPool mean = mean_pool(*teachers_);
        for (int i = 0; i < mean.pool_size(); ++i) mean_keys_.push_back(mean.entry(i).key.detached());
    }
}

Tensor FusionLossContext::tokens_for(std::size_t ref) {
    auto it = token_cache_.find(ref);
    if (it != token_cache_.end()) return it->second;
    Tape tape;
    Tensor tokens = backbone_->embed(tape, (*store_)[ref].pixels).detached();
    token_cache_.emplace(ref, tokens);
    return tokens;
}

Tensor FusionLossContext::key_for(std::size_t ref) {
    auto it = key_cache_.find(ref);
    if (it != key_cache_.end()) return it->second;
    Tape tape;
    Tensor key = backbone_->features(tape, tokens_for(ref)).detached();
    key_cache_.emplace(ref, key);
    return key;
}

Tensor FusionLossContext::teacher_feature(std::size_t teacher, std::size_t ref) {
    const auto cache_key = std::make_pair(teacher, ref);
    auto it = teacher_cache_.find(cache_key);
    if (it != teacher_cache_.end()) return it->second;
    Tape tape;
    const GlobalPromptPool& pool = (*teachers_)[teacher];
    const QueryResult selected = pool.query(key_for(ref), cfg_.top_n);
    std::vector<Tensor> prompts;
    for (int idx : selected.indices) prompts.push_back(pool.entry(idx).prompt.detached());
    Tensor feature = backbone_->features(tape, prepend(tape, prompts, tokens_for(ref))).detached();
    teacher_cache_.emplace(cache_key, feature);
    return feature;
}

Tensor FusionLossContext::loss(Tape& tape, GlobalPromptPool& student,
                               std::span<const std::size_t> refs, int step) {
    Tensor loss = Tensor::scalar(0.0);
    std::size_t terms = 0;
    for (std::size_t ref : refs) {
        const Tensor tokens = tokens_for(ref);
        const QueryResult selected = student.query(key_for(ref), cfg_.top_n);
        std::vector<Tensor> prompts;
        for (int idx : selected.indices) prompts.push_back(student.entry(idx).prompt);
        Tensor student_feature = backbone_->features(tape, prepend(tape, prompts, tokens));
        if (cfg_.schedule == FusionConfig::TeacherSchedule::Summed) {
            for (std::size_t j = 0; j < teachers_->size(); ++j) {
                loss = tape.add(loss, tape.mse(student_feature, teacher_feature(j, ref)));
                ++terms;
            }
        } else {
            const std::size_t j = static_cast<std::size_t>(step) % teachers_->size();
            loss = tape.add(loss, tape.mse(student_feature, teacher_feature(j, ref)));
            ++terms;
        }
    }
    loss = tape.scale(loss, 1.0 / static_cast<double>(terms));
    if (cfg_.key_nudge > 0.0) {
        Tensor nudge = Tensor::scalar(0.0);
        for (int i = 0; i < student.pool_size(); ++i) {
            nudge = tape.add(nudge,
                             tape.mse(student.entry(i).key, mean_keys_[static_cast<std::size_t>(i)]));
        }
        loss = tape.add(loss, tape.scale(nudge, cfg_.key_nudge / student.pool_size()));
    }
    return loss;
}

FusionResult selective_prompt_fusion(const std::vector<GlobalPromptPool>& pools,
                                     const Backbone& backbone, const SampleStore& store,
                                     const SampleRefs& proxy, const FusionConfig& cfg) {
    check_pool_compat(pools);
    if (proxy.empty()) throw ConfigError("fusion needs a non-empty proxy set");

    FusionResult result;
    if (pools.size() == 1) {
        // Single teacher: no distillation target differs from the student.
        result.pool = pools[0].clone();
        result.pool.set_trainable(false);
        return result;
    }

    GlobalPromptPool student =
        cfg.init == FusionConfig::Init::Mean ? mean_pool(pools) : pools[0].clone();
    student.set_trainable(true);

    FusionLossContext context(&pools, &backbone, &store, cfg);

    std::vector<Tensor> student_params;
    for (int i = 0; i < student.pool_size(); ++i) {
        student_params.push_back(student.entry(i).prompt);
        student_params.push_back(student.entry(i).key);
    }
    AdamState adam;
    adam.learning_rate = cfg.distill_lr;

    std::size_t cursor = 0;
    for (int step = 0; step < cfg.distill_steps; ++step) {
        const std::size_t batch = std::min(cfg.proxy_batch, proxy.size());
        std::vector<std::size_t> refs;
        refs.reserve(batch);
        for (std::size_t i = 0; i < batch; ++i) {
            refs.push_back(proxy[cursor]);
            cursor = (cursor + 1) % proxy.size();
        }
        Tape tape;
        Tensor loss = context.loss(tape, student, refs, step);
        result.loss_trace.push_back(loss.value());
        tape.backward(loss);
        adam.apply(student_params);
    }

    student.set_trainable(false);
    result.pool = std::move(student);
    return result;
}

std::string RoundLedger::to_text() const {
    std::ostringstream os;
    os << "round=" << round << " incomplete=" << (incomplete ? 1 : 0)
       << " fedavg=" << (used_fedavg ? 1 : 0) << " client_checksums=";
    for (std::size_t i = 0; i < client_pool_checksums.size(); ++i) {
        os << (i ? "," : "") << client_pool_checksums[i];
    }
    os << " fused_checksum=" << fused_checksum << " bytes=";
    for (std::size_t i = 0; i < bytes_per_client.size(); ++i) {
        os << (i ? "," : "") << bytes_per_client[i];
    }
    os << " losses=";
    char buf[32];
    for (std::size_t i = 0; i < distill_loss_trace.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.17g", distill_loss_trace[i]);
        os << (i ? "," : "") << buf;
    }
    return os.str();
}

RoundLedger RoundLedger::from_text(const std::string& line) {
    RoundLedger ledger;
    std::istringstream is(line);
    std::string field;
    auto split_list = [](const std::string& text, auto push) {
        std::stringstream ss(text);
        std::string item;
        while (std::getline(ss, item, ',')) {
            if (!item.empty()) push(item);
        }
    };
    while (is >> field) {
        const auto eq = field.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = field.substr(0, eq);
        const std::string value = field.substr(eq + 1);
        if (key == "round") ledger.round = std::stoi(value);
        else if (key == "incomplete") ledger.incomplete = value == "1";
        else if (key == "fedavg") ledger.used_fedavg = value == "1";
        else if (key == "client_checksums")
            split_list(value, [&](const std::string& v) {
                ledger.client_pool_checksums.push_back(std::stoull(v));
            });
        else if (key == "fused_checksum") ledger.fused_checksum = std::stoull(value);
        else if (key == "bytes")
            split_list(value, [&](const std::string& v) {
                ledger.bytes_per_client.push_back(std::stoull(v));
            });
        else if (key == "losses")
            split_list(value, [&](const std::string& v) {
                ledger.distill_loss_trace.push_back(std::stod(v));
            });
    }
    return ledger;
}

Server::Server(std::shared_ptr<const Backbone> backbone, const SampleStore* store,
               SampleRefs proxy, FusionConfig cfg)
    : backbone_(std::move(backbone)), store_(store), proxy_(std::move(proxy)), cfg_(cfg) {}

RoundLedger Server::run_round(std::vector<Client>& clients, int round, bool use_fedavg) {
    std::vector<std::optional<std::vector<unsigned char>>> submissions;
    submissions.reserve(clients.size());
    for (const Client& client : clients) submissions.push_back(client.global_pool().serialize());
    return run_round_submissions(submissions, round, use_fedavg, &clients);
}

RoundLedger Server::run_round_submissions(
    const std::vector<std::optional<std::vector<unsigned char>>>& submissions, int round,
    bool use_fedavg, std::vector<Client>* distribute_to) {
    RoundLedger ledger;
    ledger.round = round;
    ledger.used_fedavg = use_fedavg;

    std::vector<GlobalPromptPool> pools;
    for (const auto& submission : submissions) {
        if (!submission.has_value()) {
            ledger.incomplete = true;
            return ledger;
        }
        ledger.bytes_per_client.push_back(submission->size());
        ledger.client_pool_checksums.push_back(
            fnv1a64(std::span<const unsigned char>(submission->data(), submission->size())));
        pools.push_back(GlobalPromptPool::deserialize(
            std::span<const unsigned char>(submission->data(), submission->size())));
    }

    if (use_fedavg) {
        last_fused_ = fedavg_pools(pools);
        ledger.distill_loss_trace.clear();
    } else {
        FusionResult fusion = selective_prompt_fusion(pools, *backbone_, *store_, proxy_, cfg_);
        last_fused_ = std::move(fusion.pool);
        ledger.distill_loss_trace = std::move(fusion.loss_trace);
    }
    ledger.fused_checksum = last_fused_.checksum();

    if (distribute_to != nullptr) {
        for (Client& client : *distribute_to) client.adopt_global_pool(last_fused_);
    }
    return ledger;
}

}  // namespace fedmgp
