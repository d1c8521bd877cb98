#include "fedmgp/prompts.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "fedmgp/checksum.hpp"
#include "fedmgp/errors.hpp"
#include "fedmgp/rng.hpp"

namespace fedmgp {

namespace {

constexpr double kInitLo = -0.03;
constexpr double kInitHi = 0.03;

QueryResult ranked_query(const Tensor& input_key,
                         const std::vector<std::pair<int, const Tensor*>>& keyed, int top_n) {
    std::vector<std::pair<double, int>> ranked;
    ranked.reserve(keyed.size());
    for (const auto& [id, key] : keyed) {
        ranked.push_back({cosine_distance(input_key.values(), key->values()), id});
    }
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first < b.first;
        return a.second < b.second;
    });
    const std::size_t take = std::min(static_cast<std::size_t>(top_n), ranked.size());
    QueryResult out;
    for (std::size_t i = 0; i < take; ++i) {
        out.distances.push_back(ranked[i].first);
        out.indices.push_back(ranked[i].second);
    }
    return out;
}

void append_doubles(std::vector<unsigned char>& bytes, std::span<const double> values) {
    const auto* raw = reinterpret_cast<const unsigned char*>(values.data());
    bytes.insert(bytes.end(), raw, raw + values.size() * sizeof(double));
}

std::vector<double> read_doubles(std::span<const unsigned char> bytes, std::size_t& cursor,
                                 std::size_t count) {
    if (cursor + count * sizeof(double) > bytes.size()) {
        throw CorruptFileError("prompt pool payload truncated at byte " + std::to_string(cursor));
    }
    std::vector<double> out(count);
    std::memcpy(out.data(), bytes.data() + cursor, count * sizeof(double));
    cursor += count * sizeof(double);
    return out;
}

std::string read_header_line(std::span<const unsigned char> bytes, std::size_t& cursor) {
    std::string line;
    while (cursor < bytes.size() && bytes[cursor] != '\n') line.push_back(static_cast<char>(bytes[cursor++]));
    if (cursor >= bytes.size()) throw CorruptFileError("prompt pool header missing newline");
    ++cursor;  // consume newline
    return line;
}

std::vector<int> parse_int_list(const std::string& text) {
    std::vector<int> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(std::stoi(item));
    }
    return out;
}

std::string join_ints(const std::vector<int>& values) {
    std::string out;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(values[i]);
    }
    return out;
}

}  // namespace

double cosine_distance(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) {
        throw ShapeMismatchError("cosine_distance size mismatch: " + std::to_string(u.size()) +
                                 " vs " + std::to_string(v.size()));
    }
    double dot = 0.0, nu = 0.0, nv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    if (nu == 0.0 || nv == 0.0) throw DegenerateKeyError("cosine_distance on zero-norm key");
    return 1.0 - dot / (std::sqrt(nu) * std::sqrt(nv));
}

GlobalPromptPool GlobalPromptPool::seeded(int pool_size, int prompt_length, int embed_dim,
                                          std::uint64_t seed) {
    GlobalPromptPool pool;
    pool.prompt_length_ = prompt_length;
    pool.embed_dim_ = embed_dim;
    Rng rng(seed);
    const auto d = static_cast<std::size_t>(embed_dim);
    const auto l = static_cast<std::size_t>(prompt_length);
    for (int i = 0; i < pool_size; ++i) {
        GlobalPromptEntry entry;
        entry.key = seeded_uniform({1, d}, rng, kInitLo, kInitHi, true);
        entry.prompt = seeded_uniform({l, d}, rng, kInitLo, kInitHi, true);
        pool.entries_.push_back(std::move(entry));
    }
    return pool;
}

QueryResult GlobalPromptPool::query(const Tensor& input_key, int top_n) const {
    std::vector<std::pair<int, const Tensor*>> keyed;
    keyed.reserve(entries_.size());
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        keyed.push_back({static_cast<int>(i), &entries_[i].key});
    }
    return ranked_query(input_key, keyed, top_n);
}

void GlobalPromptPool::set_trainable(bool on) {
    for (GlobalPromptEntry& e : entries_) {
        e.key.set_requires_grad(on);
        e.prompt.set_requires_grad(on);
    }
}

bool GlobalPromptPool::trainable() const {
    return !entries_.empty() && entries_.front().key.requires_grad();
}

GlobalPromptPool GlobalPromptPool::clone() const {
    GlobalPromptPool copy;
    copy.prompt_length_ = prompt_length_;
    copy.embed_dim_ = embed_dim_;
    for (const GlobalPromptEntry& e : entries_) {
        copy.entries_.push_back({e.key.clone(), e.prompt.clone()});
    }
    return copy;
}

std::uint64_t GlobalPromptPool::checksum() const {
    const std::vector<unsigned char> bytes = serialize();
    return fnv1a64(std::span<const unsigned char>(bytes.data(), bytes.size()));
}

std::vector<unsigned char> GlobalPromptPool::serialize() const {
    std::string header = "FEDMGP-GPOOL M=" + std::to_string(pool_size()) +
                         " L=" + std::to_string(prompt_length_) +
                         " D=" + std::to_string(embed_dim_) + "\n";
    std::vector<unsigned char> bytes(header.begin(), header.end());
    for (const GlobalPromptEntry& e : entries_) append_doubles(bytes, e.key.values());
    for (const GlobalPromptEntry& e : entries_) append_doubles(bytes, e.prompt.values());
    return bytes;
}

GlobalPromptPool GlobalPromptPool::deserialize(std::span<const unsigned char> bytes) {
    std::size_t cursor = 0;
    const std::string header = read_header_line(bytes, cursor);
    int m = -1, l = -1, d = -1;
    if (std::sscanf(header.c_str(), "FEDMGP-GPOOL M=%d L=%d D=%d", &m, &l, &d) != 3 || m < 0 ||
        l <= 0 || d <= 0) {
        throw CorruptFileError("bad global prompt pool header: " + header);
    }
    GlobalPromptPool pool;
    pool.prompt_length_ = l;
    pool.embed_dim_ = d;
    pool.entries_.resize(static_cast<std::size_t>(m));
    const auto dd = static_cast<std::size_t>(d);
    const auto ll = static_cast<std::size_t>(l);
    for (int i = 0; i < m; ++i) {
        pool.entries_[static_cast<std::size_t>(i)].key =
            Tensor({1, dd}, read_doubles(bytes, cursor, dd));
    }
    for (int i = 0; i < m; ++i) {
        pool.entries_[static_cast<std::size_t>(i)].prompt =
            Tensor({ll, dd}, read_doubles(bytes, cursor, ll * dd));
    }
    return pool;
}

LocalPromptPool::LocalPromptPool(int prefix_length, int embed_dim, std::vector<int> attached_blocks,
                                 std::uint64_t init_seed)
    : prefix_length_(prefix_length),
      embed_dim_(embed_dim),
      attached_blocks_(std::move(attached_blocks)),
      init_seed_(init_seed) {}

std::vector<int> LocalPromptPool::class_ids() const {
    std::vector<int> out;
    out.reserve(entries_.size());
    for (const auto& [cls, entry] : entries_) out.push_back(cls);
    return out;
}

LocalPromptEntry& LocalPromptPool::select_by_mask(int label) {
    auto it = entries_.find(label);
    if (it != entries_.end()) return it->second;
    Rng rng(derive_seed(init_seed_, {static_cast<std::uint64_t>(label)}));
    LocalPromptEntry entry;
    const auto d = static_cast<std::size_t>(embed_dim_);
    const auto lp = static_cast<std::size_t>(prefix_length_);
    entry.key = seeded_uniform({1, d}, rng, kInitLo, kInitHi, true);
    for (std::size_t b = 0; b < attached_blocks_.size(); ++b) {
        entry.prefixes.push_back({seeded_uniform({lp, d}, rng, kInitLo, kInitHi, true),
                                  seeded_uniform({lp, d}, rng, kInitLo, kInitHi, true)});
    }
    return entries_.emplace(label, std::move(entry)).first->second;
}

QueryResult LocalPromptPool::query(const Tensor& prompted_key, int top_n) const {
    if (entries_.empty()) {
        throw NoLocalKnowledgeError("local prompt pool is empty");
    }
    std::vector<std::pair<int, const Tensor*>> keyed;
    keyed.reserve(entries_.size());
    for (const auto& [cls, entry] : entries_) keyed.push_back({cls, &entry.key});
    return ranked_query(prompted_key, keyed, top_n);
}

std::vector<PrefixPack> LocalPromptPool::prefixes_for(int class_id) const {
    const LocalPromptEntry& e = entries_.at(class_id);
    std::vector<PrefixPack> packs;
    for (std::size_t i = 0; i < attached_blocks_.size(); ++i) {
        packs.push_back({static_cast<std::size_t>(attached_blocks_[i]), e.prefixes[i].first,
                         e.prefixes[i].second});
    }
    return packs;
}

void LocalPromptPool::set_trainable(bool on) {
    for (auto& [cls, entry] : entries_) {
        entry.key.set_requires_grad(on);
        for (auto& [pk, pv] : entry.prefixes) {
            pk.set_requires_grad(on);
            pv.set_requires_grad(on);
        }
    }
}

std::uint64_t LocalPromptPool::checksum() const {
    const std::vector<unsigned char> bytes = serialize();
    return fnv1a64(std::span<const unsigned char>(bytes.data(), bytes.size()));
}

std::vector<unsigned char> LocalPromptPool::serialize() const {
    std::string header = "FEDMGP-LPOOL D=" + std::to_string(embed_dim_) +
                         " LP=" + std::to_string(prefix_length_) +
                         " BLOCKS=" + join_ints(attached_blocks_) +
                         " CLASSES=" + join_ints(class_ids()) + "\n";
    std::vector<unsigned char> bytes(header.begin(), header.end());
    for (const auto& [cls, entry] : entries_) append_doubles(bytes, entry.key.values());
    for (const auto& [cls, entry] : entries_) {
        for (const auto& [pk, pv] : entry.prefixes) {
            append_doubles(bytes, pk.values());
            append_doubles(bytes, pv.values());
        }
    }
    return bytes;
}

LocalPromptPool LocalPromptPool::deserialize(std::span<const unsigned char> bytes) {
    std::size_t cursor = 0;
    const std::string header = read_header_line(bytes, cursor);
    std::istringstream hs(header);
    std::string tag, d_kv, lp_kv, blocks_kv, classes_kv;
    hs >> tag >> d_kv >> lp_kv >> blocks_kv >> classes_kv;
    if (tag != "FEDMGP-LPOOL" || d_kv.rfind("D=", 0) != 0 || lp_kv.rfind("LP=", 0) != 0 ||
        blocks_kv.rfind("BLOCKS=", 0) != 0 || classes_kv.rfind("CLASSES=", 0) != 0) {
        throw CorruptFileError("bad local prompt pool header: " + header);
    }
    const int d = std::stoi(d_kv.substr(2));
    const int lp = std::stoi(lp_kv.substr(3));
    const std::vector<int> blocks = parse_int_list(blocks_kv.substr(7));
    const std::vector<int> classes = parse_int_list(classes_kv.substr(8));

    LocalPromptPool pool(lp, d, blocks, 0);
    const auto dd = static_cast<std::size_t>(d);
    const auto lpp = static_cast<std::size_t>(lp);
    for (int cls : classes) {
        LocalPromptEntry entry;
        entry.key = Tensor({1, dd}, read_doubles(bytes, cursor, dd));
        pool.entries_.emplace(cls, std::move(entry));
    }
    for (int cls : classes) {
        LocalPromptEntry& entry = pool.entries_.at(cls);
        for (std::size_t b = 0; b < blocks.size(); ++b) {
            Tensor pk({lpp, dd}, read_doubles(bytes, cursor, lpp * dd));
            Tensor pv({lpp, dd}, read_doubles(bytes, cursor, lpp * dd));
            entry.prefixes.push_back({std::move(pk), std::move(pv)});
        }
    }
    return pool;
}

Tensor prepend(Tape& tape, std::span<const Tensor> prompts, const Tensor& tokens) {
    if (prompts.empty()) return tokens;
    std::vector<Tensor> parts(prompts.begin(), prompts.end());
    parts.push_back(tokens);
    return tape.concat_rows(parts);
}

PoolParamCount pool_param_count(std::uint64_t pool_size, std::uint64_t prompt_length,
                                std::uint64_t embed_dim, std::uint64_t classes,
                                std::uint64_t prefix_length, std::uint64_t attached_blocks) {
    PoolParamCount out;
    out.global_prompt_params = pool_size * prompt_length * embed_dim;
    out.global_key_params = pool_size * embed_dim;
    out.local_prompt_params = classes * attached_blocks * 2 * prefix_length * embed_dim;
    out.local_key_params = classes * embed_dim;
    out.local_key_slot_params = pool_size * embed_dim;
    return out;
}

}  // namespace fedmgp
