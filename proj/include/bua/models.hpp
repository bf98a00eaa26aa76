#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bua/common.hpp"
#include "bua/core.hpp"
#include "bua/dialogue.hpp"
#include "bua/rng.hpp"
#include "bua/tensor.hpp"

namespace bua {

struct ModelConfig {
    int width = 64;
    int layers = 2;
    int heads = 2;
    int max_tokens = 256;
    int prefix_k = 4;        // decoder prefix vectors per sample
    int proj_hidden = 128;   // projection MLP hidden width
};

template <class S>
using ParamVisitor = std::function<void(const std::string&, Tensor<S>&)>;

// ---- building blocks -----------------------------------------------------

template <class S>
struct LoraAdapter {
    Tensor<S> a;  // [in, r] (transposed down matrix)
    Tensor<S> b;  // [r, out] (transposed up matrix), zero-initialized
    int rank = 4;
    double alpha = 8.0;

    double scaling() const { return alpha / rank; }
};

template <class S>
struct Linear {
    Tensor<S> w;  // [in, out]
    Tensor<S> b;  // [out]
    std::optional<LoraAdapter<S>> lora;

    static Linear init(int in, int out, RandomStream rng) {
        Linear l;
        l.w = Tensor<S>::randn({in, out}, rng, 0.02);
        l.b = Tensor<S>::param({out}, std::vector<S>(static_cast<std::size_t>(out), S(0)));
        return l;
    }

    Tensor<S> forward(const Tensor<S>& x) const {
        Tensor<S> y = add(matmul(x, w), b);
        if (lora) {
            Tensor<S> delta = matmul(matmul(x, lora->a), lora->b);
            y = add(y, scale(delta, lora->scaling()));
        }
        return y;
    }

    void attach_lora(int rank, double alpha, RandomStream rng) {
        const int in = w.shape()[0], out = w.shape()[1];
        LoraAdapter<S> ad;
        ad.rank = rank;
        ad.alpha = alpha;
        ad.a = Tensor<S>::randn({in, rank}, rng, 0.02);
        ad.b = Tensor<S>::param({rank, out}, std::vector<S>(static_cast<std::size_t>(rank) * out, S(0)));
        lora = std::move(ad);
    }

    // Fold W + (alpha/r) * A.B into the base weight and drop the adapter.
    void merge_lora() {
        if (!lora) return;
        const int in = w.shape()[0], out = w.shape()[1], r = lora->rank;
        const double s = lora->scaling();
        auto& wd = w.data();
        const auto& ad = lora->a.data();
        const auto& bd = lora->b.data();
        for (int i = 0; i < in; ++i)
            for (int j = 0; j < out; ++j) {
                double acc = 0;
                for (int p = 0; p < r; ++p)
                    acc += static_cast<double>(ad[static_cast<std::size_t>(i) * r + p]) *
                           bd[static_cast<std::size_t>(p) * out + j];
                wd[static_cast<std::size_t>(i) * out + j] += static_cast<S>(s * acc);
            }
        lora.reset();
    }

    void visit(const std::string& prefix, const ParamVisitor<S>& fn) {
        fn(prefix + ".w", w);
        fn(prefix + ".b", b);
        if (lora) {
            fn(prefix + ".lora_a", lora->a);
            fn(prefix + ".lora_b", lora->b);
        }
    }
};

template <class S>
struct LayerNormParams {
    Tensor<S> gain;
    Tensor<S> bias;

    static LayerNormParams init(int n) {
        LayerNormParams ln;
        ln.gain = Tensor<S>::param({n}, std::vector<S>(static_cast<std::size_t>(n), S(1)));
        ln.bias = Tensor<S>::param({n}, std::vector<S>(static_cast<std::size_t>(n), S(0)));
        return ln;
    }

    Tensor<S> forward(const Tensor<S>& x) const { return layer_norm(x, gain, bias); }

    void visit(const std::string& prefix, const ParamVisitor<S>& fn) {
        fn(prefix + ".ln_g", gain);
        fn(prefix + ".ln_b", bias);
    }
};

// Pre-norm transformer block.
template <class S>
struct TransformerBlock {
    LayerNormParams<S> ln1, ln2;
    Linear<S> wq, wk, wv, wo;
    Linear<S> fc1, fc2;
    int heads = 2;

    static TransformerBlock init(int width, int heads, RandomStream rng) {
        TransformerBlock b;
        b.heads = heads;
        b.ln1 = LayerNormParams<S>::init(width);
        b.ln2 = LayerNormParams<S>::init(width);
        b.wq = Linear<S>::init(width, width, rng.derive("wq"));
        b.wk = Linear<S>::init(width, width, rng.derive("wk"));
        b.wv = Linear<S>::init(width, width, rng.derive("wv"));
        b.wo = Linear<S>::init(width, width, rng.derive("wo"));
        b.fc1 = Linear<S>::init(width, width * 4, rng.derive("fc1"));
        b.fc2 = Linear<S>::init(width * 4, width, rng.derive("fc2"));
        return b;
    }

    Tensor<S> forward(const Tensor<S>& x) const {
        Tensor<S> h = ln1.forward(x);
        Tensor<S> attn = causal_self_attention(wq.forward(h), wk.forward(h), wv.forward(h), heads);
        Tensor<S> y = add(x, wo.forward(attn));
        Tensor<S> m = ln2.forward(y);
        return add(y, fc2.forward(gelu(fc1.forward(m))));
    }

    void visit(const std::string& prefix, const ParamVisitor<S>& fn) {
        ln1.visit(prefix + ".ln1", fn);
        ln2.visit(prefix + ".ln2", fn);
        wq.visit(prefix + ".wq", fn);
        wk.visit(prefix + ".wk", fn);
        wv.visit(prefix + ".wv", fn);
        wo.visit(prefix + ".wo", fn);
        fc1.visit(prefix + ".fc1", fn);
        fc2.visit(prefix + ".fc2", fn);
    }
};

// ---- event tokenization for the encoder ------------------------------------

// Events are flattened to 4 tokens each in fixed field order.
struct EventTokenizer {
    int locations = 0;
    int behaviors = 0;

    int vocab_size() const { return kDaysPerWeek + kSlotsPerDay + locations + behaviors; }
    int day_token(int d) const { return d; }
    int slot_token(int s) const { return kDaysPerWeek + s; }
    int loc_token(int l) const { return kDaysPerWeek + kSlotsPerDay + l; }
    int behavior_token(int b) const { return kDaysPerWeek + kSlotsPerDay + locations + b; }

    std::vector<int> tokenize(std::span<const BehaviorEvent> events) const {
        std::vector<int> out;
        out.reserve(events.size() * 4);
        for (const auto& ev : events) {
            require(ev.day >= 0 && ev.day < kDaysPerWeek && ev.slot >= 0 && ev.slot < kSlotsPerDay &&
                        ev.loc >= 0 && ev.loc < locations && ev.behavior >= 0 && ev.behavior < behaviors,
                    "tokenize: event field out of vocabulary bounds");
            out.push_back(day_token(ev.day));
            out.push_back(slot_token(ev.slot));
            out.push_back(loc_token(ev.loc));
            out.push_back(behavior_token(ev.behavior));
        }
        return out;
    }
};

// ---- encoder ---------------------------------------------------------------

template <class S>
struct EncoderModel {
    EventTokenizer tokenizer;
    ModelConfig cfg;
    Tensor<S> tok_emb;  // [V, width]
    Tensor<S> pos_emb;  // [max_tokens, width]
    std::vector<TransformerBlock<S>> blocks;
    LayerNormParams<S> final_ln;
    Linear<S> head;

    static EncoderModel init(const BehaviorVocabulary& vocab, const ModelConfig& cfg,
                             RandomStream rng) {
        require(cfg.layers >= 2, "encoder: needs at least 2 layers so a penultimate layer exists");
        EncoderModel m;
        m.tokenizer = EventTokenizer{vocab.location_count, vocab.behaviors()};
        m.cfg = cfg;
        m.tok_emb = Tensor<S>::randn({m.tokenizer.vocab_size(), cfg.width}, rng.derive("tok_emb"), 0.02);
        m.pos_emb = Tensor<S>::randn({cfg.max_tokens, cfg.width}, rng.derive("pos_emb"), 0.02);
        for (int l = 0; l < cfg.layers; ++l)
            m.blocks.push_back(TransformerBlock<S>::init(cfg.width, cfg.heads,
                                                         rng.derive("block" + std::to_string(l))));
        m.final_ln = LayerNormParams<S>::init(cfg.width);
        m.head = Linear<S>::init(cfg.width, m.tokenizer.vocab_size(), rng.derive("head"));
        return m;
    }

    // Hidden states after each block; hiddens[layers-2] is the penultimate layer.
    std::vector<Tensor<S>> forward_hiddens(const std::vector<int>& tokens) const {
        require(!tokens.empty(), "encoder_forward: empty input");
        require(static_cast<int>(tokens.size()) <= cfg.max_tokens, "encoder_forward: input of ",
                tokens.size(), " tokens exceeds max ", cfg.max_tokens);
        std::vector<int> positions(tokens.size());
        for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);
        Tensor<S> x = add(embedding_lookup(tok_emb, tokens), embedding_lookup(pos_emb, positions));
        std::vector<Tensor<S>> hiddens;
        for (const auto& b : blocks) {
            x = b.forward(x);
            hiddens.push_back(x);
        }
        return hiddens;
    }

    Tensor<S> logits(const std::vector<int>& tokens) const {
        auto hiddens = forward_hiddens(tokens);
        return head.forward(final_ln.forward(hiddens.back()));
    }

    void visit(const ParamVisitor<S>& fn) {
        fn("enc.tok_emb", tok_emb);
        fn("enc.pos_emb", pos_emb);
        for (std::size_t l = 0; l < blocks.size(); ++l)
            blocks[l].visit("enc.b" + std::to_string(l), fn);
        final_ln.visit("enc.final", fn);
        head.visit("enc.head", fn);
    }
};

template <class S>
std::vector<Tensor<S>> encoder_forward(const EncoderModel<S>& enc,
                                       std::span<const BehaviorEvent> events) {
    return enc.forward_hiddens(enc.tokenizer.tokenize(events));
}

// Penultimate-layer hidden state at the final token position.
template <class S>
Tensor<S> encode_sequence(const EncoderModel<S>& enc, std::span<const BehaviorEvent> events) {
    require(!events.empty(), "encode_sequence: empty window");
    auto hiddens = encoder_forward(enc, events);
    Tensor<S> penult = hiddens[hiddens.size() - 2];
    const int t_len = penult.shape()[0];
    return reshape(slice(penult, 0, t_len - 1, t_len), {enc.cfg.width});
}

// ---- projection ------------------------------------------------------------

template <class S>
struct SequenceEmbedding {
    Tensor<S> vectors;  // [k, decoder width]
    std::uint64_t user_id = 0;
    int window_begin = 0;
    int window_len = 0;
};

template <class S>
struct ProjectionModel {
    Linear<S> fc1, fc2;
    int prefix_k = 4;
    int decoder_width = 64;

    static ProjectionModel init(int encoder_width, int hidden, int prefix_k, int decoder_width,
                                RandomStream rng) {
        ProjectionModel p;
        p.prefix_k = prefix_k;
        p.decoder_width = decoder_width;
        p.fc1 = Linear<S>::init(encoder_width, hidden, rng.derive("fc1"));
        p.fc2 = Linear<S>::init(hidden, prefix_k * decoder_width, rng.derive("fc2"));
        return p;
    }

    void visit(const ParamVisitor<S>& fn) {
        fc1.visit("proj.fc1", fn);
        fc2.visit("proj.fc2", fn);
    }
};

template <class S>
SequenceEmbedding<S> project(const ProjectionModel<S>& proj, const Tensor<S>& pooled) {
    require(pooled.shape().size() == 1, "project: pooled input must be rank 1, got ",
            shape_str(pooled.shape()));
    require(pooled.shape()[0] == proj.fc1.w.shape()[0], "project: input width ", pooled.shape()[0],
            " does not match projection input ", proj.fc1.w.shape()[0]);
    Tensor<S> row = reshape(pooled, {1, pooled.shape()[0]});
    Tensor<S> h = proj.fc2.forward(gelu(proj.fc1.forward(row)));
    SequenceEmbedding<S> emb;
    emb.vectors = reshape(h, {proj.prefix_k, proj.decoder_width});
    return emb;
}

// ---- decoder ---------------------------------------------------------------

template <class S>
struct DecoderModel {
    ModelConfig cfg;
    int vocab = 0;
    Tensor<S> tok_emb;  // [V, width]
    Tensor<S> pos_emb;  // [max_tokens, width]
    std::vector<TransformerBlock<S>> blocks;
    LayerNormParams<S> final_ln;
    Linear<S> head;  // untied

    static DecoderModel init(int vocab_size, const ModelConfig& cfg, RandomStream rng) {
        DecoderModel m;
        m.cfg = cfg;
        m.vocab = vocab_size;
        m.tok_emb = Tensor<S>::randn({vocab_size, cfg.width}, rng.derive("tok_emb"), 0.02);
        m.pos_emb = Tensor<S>::randn({cfg.max_tokens, cfg.width}, rng.derive("pos_emb"), 0.02);
        for (int l = 0; l < cfg.layers; ++l)
            m.blocks.push_back(TransformerBlock<S>::init(cfg.width, cfg.heads,
                                                         rng.derive("block" + std::to_string(l))));
        m.final_ln = LayerNormParams<S>::init(cfg.width);
        m.head = Linear<S>::init(cfg.width, vocab_size, rng.derive("head"));
        return m;
    }

    void visit(const ParamVisitor<S>& fn) {
        fn("dec.tok_emb", tok_emb);
        fn("dec.pos_emb", pos_emb);
        for (std::size_t l = 0; l < blocks.size(); ++l)
            blocks[l].visit("dec.b" + std::to_string(l), fn);
        final_ln.visit("dec.final", fn);
        head.visit("dec.head", fn);
    }

    void for_each_linear(const std::function<void(Linear<S>&)>& fn) {
        for (auto& b : blocks) {
            fn(b.wq);
            fn(b.wk);
            fn(b.wv);
            fn(b.wo);
            fn(b.fc1);
            fn(b.fc2);
        }
        fn(head);
    }
};

// Full-transcript forward. Tokens may contain exactly one contiguous span of
// EMB placeholders (prefix_k wide) which receives the prefix vectors verbatim
// instead of a token lookup; with no prefix the tokens must contain no EMB.
template <class S>
Tensor<S> decoder_forward(const DecoderModel<S>& dec, const std::vector<int>& tokens,
                          const SequenceEmbedding<S>* prefix) {
    require(!tokens.empty(), "decoder_forward: empty input");
    require(static_cast<int>(tokens.size()) <= dec.cfg.max_tokens, "decoder_forward: input of ",
            tokens.size(), " tokens exceeds max ", dec.cfg.max_tokens);
    std::vector<int> emb_positions;
    for (std::size_t i = 0; i < tokens.size(); ++i)
        if (tokens[i] == DialogueVocabulary::kEmb) emb_positions.push_back(static_cast<int>(i));
    Tensor<S> rows;
    if (prefix != nullptr) {
        require(static_cast<int>(emb_positions.size()) == dec.cfg.prefix_k,
                "decoder_forward: found ", emb_positions.size(), " EMB placeholders, expected ",
                dec.cfg.prefix_k);
        for (std::size_t i = 1; i < emb_positions.size(); ++i)
            require(emb_positions[i] == emb_positions[i - 1] + 1,
                    "decoder_forward: EMB span must be contiguous");
        require(prefix->vectors.shape() == Shape({dec.cfg.prefix_k, dec.cfg.width}),
                "decoder_forward: prefix shape ", shape_str(prefix->vectors.shape()),
                " does not match (k,width)");
        const int p0 = emb_positions.front();
        const int t_len = static_cast<int>(tokens.size());
        Tensor<S> all = embedding_lookup(dec.tok_emb, tokens);
        Tensor<S> mid = prefix->vectors;
        if (p0 > 0) mid = concat(slice(all, 0, 0, p0), mid, 0);
        if (p0 + dec.cfg.prefix_k < t_len)
            mid = concat(mid, slice(all, 0, p0 + dec.cfg.prefix_k, t_len), 0);
        rows = mid;
    } else {
        require(emb_positions.empty(), "decoder_forward: EMB placeholders present but no prefix given");
        rows = embedding_lookup(dec.tok_emb, tokens);
    }
    std::vector<int> positions(tokens.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);
    Tensor<S> x = add(rows, embedding_lookup(dec.pos_emb, positions));
    for (const auto& b : dec.blocks) x = b.forward(x);
    return dec.head.forward(dec.final_ln.forward(x));
}

template <class S>
void lora_attach(DecoderModel<S>& dec, int rank, double alpha, RandomStream rng) {
    require(rank >= 1, "lora_attach: rank must be >= 1");
    int idx = 0;
    dec.for_each_linear([&](Linear<S>& l) {
        l.attach_lora(rank, alpha, rng.derive("lora" + std::to_string(idx++)));
    });
}

template <class S>
void lora_merge(DecoderModel<S>& dec) {
    dec.for_each_linear([](Linear<S>& l) { l.merge_lora(); });
}

// ---- fast inference path (no graph, KV cache) -------------------------------

namespace infer {

template <class S>
void matvec(const std::vector<S>& w, int in, int out, const S* x, const S* bias, S* y) {
    for (int j = 0; j < out; ++j) y[j] = bias ? bias[j] : S(0);
    for (int i = 0; i < in; ++i) {
        const S xi = x[i];
        const S* wrow = w.data() + static_cast<std::size_t>(i) * out;
        for (int j = 0; j < out; ++j) y[j] += xi * wrow[j];
    }
}

template <class S>
void layer_norm_row(const S* x, int n, const S* gain, const S* bias, S* y) {
    double mu = 0;
    for (int j = 0; j < n; ++j) mu += x[j];
    mu /= n;
    double var = 0;
    for (int j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    for (int j = 0; j < n; ++j)
        y[j] = static_cast<S>((x[j] - mu) * inv) * gain[j] + bias[j];
}

template <class S>
S gelu_scalar(S v) {
    const double x = v;
    return static_cast<S>(0.5 * x * (1.0 + std::tanh(0.7978845608028654 * (x + 0.044715 * x * x * x))));
}

// Effective (LoRA-folded) weights of one linear layer.
template <class S>
struct DenseLayer {
    std::vector<S> w;
    std::vector<S> b;
    int in = 0, out = 0;

    static DenseLayer from(const Linear<S>& l) {
        DenseLayer d;
        d.in = l.w.shape()[0];
        d.out = l.w.shape()[1];
        d.w = l.w.data();
        d.b = l.b.data();
        if (l.lora) {
            const int r = l.lora->rank;
            const double s = l.lora->scaling();
            const auto& ad = l.lora->a.data();
            const auto& bd = l.lora->b.data();
            for (int i = 0; i < d.in; ++i)
                for (int j = 0; j < d.out; ++j) {
                    double acc = 0;
                    for (int p = 0; p < r; ++p)
                        acc += static_cast<double>(ad[static_cast<std::size_t>(i) * r + p]) *
                               bd[static_cast<std::size_t>(p) * d.out + j];
                    d.w[static_cast<std::size_t>(i) * d.out + j] += static_cast<S>(s * acc);
                }
        }
        return d;
    }

    void apply(const S* x, S* y) const { matvec(w, in, out, x, b.data(), y); }
};

template <class S>
struct BlockWeights {
    std::vector<S> ln1_g, ln1_b, ln2_g, ln2_b;
    DenseLayer<S> wq, wk, wv, wo, fc1, fc2;
    int heads = 2;
};

// Token-at-a-time decoder with cached keys/values; numerically identical math
// to the graph path (checked by test).
template <class S>
class DecoderSession {
public:
    explicit DecoderSession(const DecoderModel<S>& m) : cfg_(m.cfg), vocab_(m.vocab) {
        tok_emb_ = m.tok_emb.data();
        pos_emb_ = m.pos_emb.data();
        for (const auto& b : m.blocks) {
            BlockWeights<S> bw;
            bw.ln1_g = b.ln1.gain.data();
            bw.ln1_b = b.ln1.bias.data();
            bw.ln2_g = b.ln2.gain.data();
            bw.ln2_b = b.ln2.bias.data();
            bw.wq = DenseLayer<S>::from(b.wq);
            bw.wk = DenseLayer<S>::from(b.wk);
            bw.wv = DenseLayer<S>::from(b.wv);
            bw.wo = DenseLayer<S>::from(b.wo);
            bw.fc1 = DenseLayer<S>::from(b.fc1);
            bw.fc2 = DenseLayer<S>::from(b.fc2);
            bw.heads = b.heads;
            blocks_.push_back(std::move(bw));
        }
        final_g_ = m.final_ln.gain.data();
        final_b_ = m.final_ln.bias.data();
        head_ = DenseLayer<S>::from(m.head);
        k_cache_.assign(blocks_.size(), {});
        v_cache_.assign(blocks_.size(), {});
    }

    int position() const { return pos_; }
    int max_tokens() const { return cfg_.max_tokens; }

    // Feed one token (or an explicit embedding row); returns logits for the
    // next position.
    const std::vector<S>& feed_token(int token) {
        require(token >= 0 && token < vocab_, "decoder session: token out of range");
        const S* row = tok_emb_.data() + static_cast<std::size_t>(token) * cfg_.width;
        return feed_row(row);
    }

    const std::vector<S>& feed_embedding(const S* row) { return feed_row(row); }

    void feed_tokens(std::span<const int> tokens) {
        for (int t : tokens) feed_token(t);
    }

    // Greedy decoding until EOS token or max_new tokens; ties break toward
    // the lowest token id. Generated tokens are fed back into the cache.
    std::vector<int> generate(int eos_token, int max_new) {
        require(max_new >= 1, "generate: max_new must be >= 1");
        std::vector<int> out;
        for (int i = 0; i < max_new && pos_ < cfg_.max_tokens; ++i) {
            const auto& lg = logits_;
            int best = 0;
            for (int v = 1; v < vocab_; ++v)
                if (lg[static_cast<std::size_t>(v)] > lg[static_cast<std::size_t>(best)]) best = v;
            out.push_back(best);
            if (best == eos_token) break;
            feed_token(best);
        }
        return out;
    }

    const std::vector<S>& logits() const { return logits_; }

private:
    const std::vector<S>& feed_row(const S* emb_row) {
        require(pos_ < cfg_.max_tokens, "decoder session: transcript exceeds max tokens");
        const int d = cfg_.width;
        std::vector<S> x(static_cast<std::size_t>(d));
        for (int j = 0; j < d; ++j)
            x[static_cast<std::size_t>(j)] = emb_row[j] + pos_emb_[static_cast<std::size_t>(pos_) * d + j];
        std::vector<S> h(static_cast<std::size_t>(d)), q(static_cast<std::size_t>(d)),
            k(static_cast<std::size_t>(d)), v(static_cast<std::size_t>(d)), attn(static_cast<std::size_t>(d)),
            tmp(static_cast<std::size_t>(d));
        for (std::size_t l = 0; l < blocks_.size(); ++l) {
            auto& bw = blocks_[l];
            layer_norm_row(x.data(), d, bw.ln1_g.data(), bw.ln1_b.data(), h.data());
            bw.wq.apply(h.data(), q.data());
            bw.wk.apply(h.data(), k.data());
            bw.wv.apply(h.data(), v.data());
            k_cache_[l].insert(k_cache_[l].end(), k.begin(), k.end());
            v_cache_[l].insert(v_cache_[l].end(), v.begin(), v.end());
            const int t_len = pos_ + 1;
            const int heads = bw.heads;
            const int dh = d / heads;
            const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
            for (int hd = 0; hd < heads; ++hd) {
                scores_.assign(static_cast<std::size_t>(t_len), 0.0);
                double mx = -std::numeric_limits<double>::infinity();
                for (int t = 0; t < t_len; ++t) {
                    const S* krow = k_cache_[l].data() + static_cast<std::size_t>(t) * d + hd * dh;
                    double acc = 0;
                    for (int j = 0; j < dh; ++j)
                        acc += static_cast<double>(q[static_cast<std::size_t>(hd * dh + j)]) * krow[j];
                    acc *= inv_sqrt;
                    scores_[static_cast<std::size_t>(t)] = acc;
                    mx = std::max(mx, acc);
                }
                double z = 0;
                for (int t = 0; t < t_len; ++t) {
                    scores_[static_cast<std::size_t>(t)] = std::exp(scores_[static_cast<std::size_t>(t)] - mx);
                    z += scores_[static_cast<std::size_t>(t)];
                }
                for (int j = 0; j < dh; ++j) attn[static_cast<std::size_t>(hd * dh + j)] = S(0);
                for (int t = 0; t < t_len; ++t) {
                    const double wgt = scores_[static_cast<std::size_t>(t)] / z;
                    const S* vrow = v_cache_[l].data() + static_cast<std::size_t>(t) * d + hd * dh;
                    for (int j = 0; j < dh; ++j)
                        attn[static_cast<std::size_t>(hd * dh + j)] += static_cast<S>(wgt * vrow[j]);
                }
            }
            bw.wo.apply(attn.data(), tmp.data());
            for (int j = 0; j < d; ++j) x[static_cast<std::size_t>(j)] += tmp[static_cast<std::size_t>(j)];
            layer_norm_row(x.data(), d, bw.ln2_g.data(), bw.ln2_b.data(), h.data());
            mlp_.assign(static_cast<std::size_t>(bw.fc1.out), S(0));
            bw.fc1.apply(h.data(), mlp_.data());
            for (auto& mv : mlp_) mv = gelu_scalar(mv);
            bw.fc2.apply(mlp_.data(), tmp.data());
            for (int j = 0; j < d; ++j) x[static_cast<std::size_t>(j)] += tmp[static_cast<std::size_t>(j)];
        }
        layer_norm_row(x.data(), d, final_g_.data(), final_b_.data(), h.data());
        logits_.assign(static_cast<std::size_t>(vocab_), S(0));
        head_.apply(h.data(), logits_.data());
        ++pos_;
        return logits_;
    }

    ModelConfig cfg_;
    int vocab_ = 0;
    std::vector<S> tok_emb_, pos_emb_;
    std::vector<BlockWeights<S>> blocks_;
    std::vector<S> final_g_, final_b_;
    DenseLayer<S> head_;
    std::vector<std::vector<S>> k_cache_, v_cache_;
    std::vector<S> logits_, mlp_;
    std::vector<double> scores_;
    int pos_ = 0;
};

}  // namespace infer

// Feed an instruction (placing prefix vectors at EMB positions), then decode
// greedily until EOS.
template <class S>
std::vector<int> greedy_generate(const DecoderModel<S>& dec, const std::vector<int>& instruction,
                                 const SequenceEmbedding<S>* prefix, int max_len) {
    require(max_len >= 1, "greedy_generate: max_len must be >= 1");
    infer::DecoderSession<S> session(dec);
    int emb_seen = 0;
    for (int tok : instruction) {
        if (tok == DialogueVocabulary::kEmb) {
            require(prefix != nullptr, "greedy_generate: EMB placeholder without prefix");
            require(emb_seen < dec.cfg.prefix_k, "greedy_generate: too many EMB placeholders");
            session.feed_embedding(prefix->vectors.data().data() +
                                   static_cast<std::size_t>(emb_seen) * dec.cfg.width);
            ++emb_seen;
        } else {
            session.feed_token(tok);
        }
    }
    if (prefix)
        require(emb_seen == dec.cfg.prefix_k, "greedy_generate: found ", emb_seen,
                " EMB placeholders, expected ", dec.cfg.prefix_k);
    return session.generate(DialogueVocabulary::kEos, max_len);
}

}  // namespace bua
