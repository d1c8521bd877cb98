#include "fedmgp/backbone.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "fedmgp/adam.hpp"
#include "fedmgp/checksum.hpp"
#include "fedmgp/errors.hpp"

namespace fedmgp {

namespace {
constexpr char kMagic[16] = {'F', 'E', 'D', 'M', 'G', 'P', '-', 'B',
                             'A', 'C', 'K', 'B', 'O', 'N', 'E', '1'};
}

void BackboneConfig::validate() const {
    if (image_side % patch_side != 0) {
        throw ConfigError("image_side " + std::to_string(image_side) +
                          " not divisible by patch_side " + std::to_string(patch_side));
    }
    if (embed_dim % heads != 0) {
        throw ConfigError("embed_dim " + std::to_string(embed_dim) + " not divisible by heads " +
                          std::to_string(heads));
    }
    if (depth == 0 || heads == 0 || embed_dim == 0) {
        throw ConfigError("backbone depth, heads and embed_dim must be positive");
    }
}

Backbone::Backbone(const BackboneConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    const std::size_t d = cfg_.embed_dim;
    const std::size_t hidden = d * cfg_.mlp_ratio;
    patch_w_ = seeded_normal({cfg_.patch_dim(), d}, rng, 0.0, 0.02, true);
    patch_b_ = Tensor({d}, 0.0, true);
    pos_ = seeded_normal({cfg_.token_count(), d}, rng, 0.0, 0.02, true);
    cls_ = seeded_normal({1, d}, rng, 0.0, 0.02, true);
    for (std::size_t b = 0; b < cfg_.depth; ++b) {
        BlockWeights blk;
        blk.ln1_gain = Tensor({d}, 1.0, true);
        blk.ln1_bias = Tensor({d}, 0.0, true);
        blk.w_q = seeded_normal({d, d}, rng, 0.0, 0.02, true);
        blk.w_k = seeded_normal({d, d}, rng, 0.0, 0.02, true);
        blk.w_v = seeded_normal({d, d}, rng, 0.0, 0.02, true);
        blk.w_o = seeded_normal({d, d}, rng, 0.0, 0.02, true);
        blk.ln2_gain = Tensor({d}, 1.0, true);
        blk.ln2_bias = Tensor({d}, 0.0, true);
        blk.mlp_w1 = seeded_normal({d, hidden}, rng, 0.0, 0.02, true);
        blk.mlp_w2 = seeded_normal({hidden, d}, rng, 0.0, 0.02, true);
        blocks_.push_back(std::move(blk));
    }
}

Tensor Backbone::embed(Tape& tape, const Tensor& image) const {
    const Shape expected{cfg_.channels, cfg_.image_side, cfg_.image_side};
    if (image.shape() != expected) {
        throw ShapeMismatchError("embed: image extents do not match backbone config");
    }
    const std::size_t p = cfg_.patch_side;
    const std::size_t grid = cfg_.image_side / p;
    const std::size_t pd = cfg_.patch_dim();
    // Patch unfold, channel-major within each patch: (c, py, px).
    std::vector<double> patches(cfg_.patch_count() * pd);
    const std::span<const double> px = image.values();
    const std::size_t side = cfg_.image_side;
    for (std::size_t gy = 0; gy < grid; ++gy) {
        for (std::size_t gx = 0; gx < grid; ++gx) {
            double* row = patches.data() + (gy * grid + gx) * pd;
            std::size_t k = 0;
            for (std::size_t c = 0; c < cfg_.channels; ++c) {
                for (std::size_t y = 0; y < p; ++y) {
                    for (std::size_t x = 0; x < p; ++x) {
                        row[k++] = px[c * side * side + (gy * p + y) * side + (gx * p + x)];
                    }
                }
            }
        }
    }
    Tensor patch_matrix({cfg_.patch_count(), pd}, std::move(patches));
    Tensor projected = tape.add_row(tape.matmul(patch_matrix, patch_w_), patch_b_);
    const Tensor parts[] = {projected, cls_};
    Tensor tokens = tape.concat_rows(parts);
    return tape.add(tokens, pos_);
}

Tensor Backbone::msa_forward(Tape& tape, const Tensor& tokens, std::size_t block,
                             const PrefixPack* prefix) const {
    const BlockWeights& blk = blocks_.at(block);
    const std::size_t d = cfg_.embed_dim;
    const std::size_t hd = d / cfg_.heads;
    if (tokens.cols() != d) throw ShapeMismatchError("msa_forward: token width != embed_dim");

    Tensor q = tape.matmul(tokens, blk.w_q);
    Tensor k = tape.matmul(tokens, blk.w_k);
    Tensor v = tape.matmul(tokens, blk.w_v);
    if (prefix != nullptr && prefix->p_k.size() > 0) {
        if (prefix->p_k.cols() != d || prefix->p_v.cols() != d ||
            prefix->p_k.shape() != prefix->p_v.shape()) {
            throw ShapeMismatchError("msa_forward: prefix width != embed_dim");
        }
        const Tensor kp[] = {prefix->p_k, k};
        const Tensor vp[] = {prefix->p_v, v};
        k = tape.concat_rows(kp);
        v = tape.concat_rows(vp);
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<Tensor> head_outputs;
    head_outputs.reserve(cfg_.heads);
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
        Tensor qh = tape.slice_cols(q, h * hd, (h + 1) * hd);
        Tensor kh = tape.slice_cols(k, h * hd, (h + 1) * hd);
        Tensor vh = tape.slice_cols(v, h * hd, (h + 1) * hd);
        Tensor scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), scale);
        Tensor probs = tape.softmax(scores, 1);
        head_outputs.push_back(tape.matmul(probs, vh));
    }
    Tensor merged = tape.concat_cols(head_outputs);
    return tape.matmul(merged, blk.w_o);
}

std::vector<Tensor> Backbone::msa_attention(const Tensor& tokens, std::size_t block,
                                            const PrefixPack* prefix) const {
    Tape tape;
    const BlockWeights& blk = blocks_.at(block);
    const std::size_t d = cfg_.embed_dim;
    const std::size_t hd = d / cfg_.heads;
    Tensor q = tape.matmul(tokens.detached(), blk.w_q.detached());
    Tensor k = tape.matmul(tokens.detached(), blk.w_k.detached());
    if (prefix != nullptr && prefix->p_k.size() > 0) {
        const Tensor kp[] = {prefix->p_k.detached(), k};
        k = tape.concat_rows(kp);
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<Tensor> probs;
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
        Tensor qh = tape.slice_cols(q, h * hd, (h + 1) * hd);
        Tensor kh = tape.slice_cols(k, h * hd, (h + 1) * hd);
        Tensor scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), scale);
        probs.push_back(tape.softmax(scores, 1).detached());
    }
    return probs;
}

Tensor Backbone::features(Tape& tape, const Tensor& tokens, std::span<const PrefixPack> prefixes,
                          std::vector<Tensor>* block_outputs) const {
    std::map<std::size_t, const PrefixPack*> by_block;
    for (const PrefixPack& p : prefixes) by_block[p.block] = &p;

    Tensor x = tokens;
    for (std::size_t b = 0; b < cfg_.depth; ++b) {
        const BlockWeights& blk = blocks_[b];
        const PrefixPack* prefix = by_block.count(b) ? by_block[b] : nullptr;
        Tensor normed = tape.layer_norm(x, blk.ln1_gain, blk.ln1_bias);
        x = tape.add(x, msa_forward(tape, normed, b, prefix));
        Tensor normed2 = tape.layer_norm(x, blk.ln2_gain, blk.ln2_bias);
        Tensor hidden = tape.gelu(tape.matmul(normed2, blk.mlp_w1));
        x = tape.add(x, tape.matmul(hidden, blk.mlp_w2));
        if (block_outputs != nullptr) block_outputs->push_back(x.detached());
    }
    return tape.slice_rows(x, x.rows() - 1, x.rows());
}

void Backbone::pretrain(const SampleStore& warmup, const SampleRefs& refs, std::size_t steps,
                        std::size_t batch_size, double learning_rate) {
    if (frozen_) throw FrozenParameterError("pretrain on a frozen backbone");
    if (refs.empty()) throw ConfigError("pretrain: empty warmup set");
    const std::size_t d = cfg_.embed_dim;
    const std::size_t classes = static_cast<std::size_t>(warmup.class_count());

    Rng rng(derive_seed(cfg_.seed, {0x9A}));
    Tensor head_w = seeded_normal({d, classes}, rng, 0.0, 0.02, true);
    Tensor head_b = Tensor({classes}, 0.0, true);

    std::vector<Tensor> params = all_weights();
    params.push_back(head_w);
    params.push_back(head_b);
    AdamState adam;
    adam.learning_rate = learning_rate;

    SampleRefs order = refs;
    std::size_t cursor = 0;
    for (std::size_t step = 0; step < steps; ++step) {
        Tape tape;
        Tensor loss = Tensor::scalar(0.0);
        std::size_t count = 0;
        for (std::size_t i = 0; i < batch_size; ++i) {
            if (cursor == 0) rng.shuffle(order);
            const Sample& sample = warmup[order[cursor]];
            cursor = (cursor + 1) % order.size();
            Tensor tokens = embed(tape, sample.pixels);
            Tensor f = features(tape, tokens);
            Tensor logits = tape.add_row(tape.matmul(f, head_w), head_b);
            loss = tape.add(loss, tape.cross_entropy(logits, static_cast<std::size_t>(sample.label)));
            ++count;
        }
        loss = tape.scale(loss, 1.0 / static_cast<double>(count));
        tape.backward(loss);
        adam.apply(params);
    }

    // Warmup train accuracy, recorded as checkpoint metadata.
    std::size_t correct = 0;
    for (std::size_t r : refs) {
        Tape tape;
        Tensor tokens = embed(tape, warmup[r].pixels);
        Tensor f = features(tape, tokens);
        Tensor logits = tape.add_row(tape.matmul(f, head_w), head_b);
        if (argmax(logits.values()) == static_cast<std::size_t>(warmup[r].label)) ++correct;
    }
    warmup_accuracy_ = static_cast<double>(correct) / static_cast<double>(refs.size());
}

void Backbone::freeze() {
    for (Tensor& w : all_weights()) w.set_requires_grad(false);
    frozen_ = true;
}

Backbone Backbone::pretrain_and_freeze(const BackboneConfig& cfg, const SampleStore& warmup,
                                       const SampleRefs& refs, std::size_t steps,
                                       std::size_t batch_size, double learning_rate) {
    Backbone backbone(cfg);
    if (steps > 0) {
        backbone.pretrain(warmup, refs, steps, batch_size, learning_rate);
    } else if (refs.empty()) {
        throw ConfigError("pretrain: empty warmup set");
    }
    backbone.freeze();
    return backbone;
}

std::vector<Tensor> Backbone::all_weights() {
    std::vector<Tensor> out{patch_w_, patch_b_, pos_, cls_};
    for (BlockWeights& blk : blocks_) {
        out.push_back(blk.ln1_gain);
        out.push_back(blk.ln1_bias);
        out.push_back(blk.w_q);
        out.push_back(blk.w_k);
        out.push_back(blk.w_v);
        out.push_back(blk.w_o);
        out.push_back(blk.ln2_gain);
        out.push_back(blk.ln2_bias);
        out.push_back(blk.mlp_w1);
        out.push_back(blk.mlp_w2);
    }
    return out;
}

std::vector<Tensor> Backbone::all_weights() const {
    return const_cast<Backbone*>(this)->all_weights();
}

std::uint64_t Backbone::checksum() const {
    std::uint64_t state = 0xcbf29ce484222325ULL;
    for (const Tensor& w : all_weights()) state = fnv1a64(w.values(), state);
    return state;
}

void Backbone::save(const std::string& path) const {
    std::ostringstream meta;
    meta << "image_side=" << cfg_.image_side << "\nchannels=" << cfg_.channels
         << "\npatch_side=" << cfg_.patch_side << "\nembed_dim=" << cfg_.embed_dim
         << "\ndepth=" << cfg_.depth << "\nheads=" << cfg_.heads << "\nmlp_ratio=" << cfg_.mlp_ratio
         << "\nseed=" << cfg_.seed << "\nfrozen=" << (frozen_ ? 1 : 0) << "\nwarmup_accuracy=";
    char acc[32];
    std::snprintf(acc, sizeof(acc), "%.17g", warmup_accuracy_);
    meta << acc << "\n";
    const std::string meta_text = meta.str();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw CorruptFileError("cannot open checkpoint for writing: " + path);
    out.write(kMagic, sizeof(kMagic));
    const std::uint64_t meta_len = meta_text.size();
    out.write(reinterpret_cast<const char*>(&meta_len), sizeof(meta_len));
    out.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));
    for (const Tensor& w : all_weights()) {
        out.write(reinterpret_cast<const char*>(w.values().data()),
                  static_cast<std::streamsize>(w.size() * sizeof(double)));
    }
}

Backbone Backbone::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CorruptFileError("cannot open checkpoint: " + path);
    char magic[16];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw CorruptFileError("bad checkpoint magic in " + path);
    }
    std::uint64_t meta_len = 0;
    in.read(reinterpret_cast<char*>(&meta_len), sizeof(meta_len));
    std::string meta_text(meta_len, '\0');
    in.read(meta_text.data(), static_cast<std::streamsize>(meta_len));
    if (!in) throw CorruptFileError("truncated checkpoint metadata in " + path);

    std::map<std::string, std::string> meta;
    std::istringstream ms(meta_text);
    std::string line;
    while (std::getline(ms, line)) {
        const auto eq = line.find('=');
        if (eq != std::string::npos) meta[line.substr(0, eq)] = line.substr(eq + 1);
    }
    BackboneConfig cfg;
    cfg.image_side = std::stoull(meta.at("image_side"));
    cfg.channels = std::stoull(meta.at("channels"));
    cfg.patch_side = std::stoull(meta.at("patch_side"));
    cfg.embed_dim = std::stoull(meta.at("embed_dim"));
    cfg.depth = std::stoull(meta.at("depth"));
    cfg.heads = std::stoull(meta.at("heads"));
    cfg.mlp_ratio = std::stoull(meta.at("mlp_ratio"));
    cfg.seed = std::stoull(meta.at("seed"));

    Backbone backbone(cfg);
    for (Tensor& w : backbone.all_weights()) {
        in.read(reinterpret_cast<char*>(w.values_mut().data()),
                static_cast<std::streamsize>(w.size() * sizeof(double)));
        if (!in) throw CorruptFileError("truncated checkpoint payload in " + path);
    }
    backbone.warmup_accuracy_ = std::stod(meta.at("warmup_accuracy"));
    if (meta.at("frozen") == "1") backbone.freeze();
    return backbone;
}

}  // namespace fedmgp
