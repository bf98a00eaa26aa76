#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "bua/common.hpp"
#include "bua/core.hpp"
#include "bua/dialogue.hpp"
#include "bua/models.hpp"
#include "bua/rng.hpp"
#include "bua/synthgen.hpp"
#include "bua/tensor.hpp"

namespace bua {

// ---- loss algebra over plain per-token NLL vectors -------------------------

// Token-level mean across all rounds: (sum_i sum_t nll_it) / (sum_i T_i).
inline double multiturn_loss(const std::vector<std::vector<double>>& round_nlls) {
    require(!round_nlls.empty(), "multiturn_loss: no rounds");
    double total = 0;
    std::size_t count = 0;
    for (const auto& round : round_nlls) {
        require(!round.empty(), "multiturn_loss: empty round");
        for (double v : round) total += v;
        count += round.size();
    }
    return total / static_cast<double>(count);
}

// Round-level rewrite: sum_i (T_i / sum T) * mean_i. Identical to
// multiturn_loss by algebra; kept separate so the identity is testable.
inline double multiturn_loss_roundlevel(const std::vector<std::vector<double>>& round_nlls) {
    require(!round_nlls.empty(), "multiturn_loss_roundlevel: no rounds");
    double total_tokens = 0;
    for (const auto& r : round_nlls) total_tokens += static_cast<double>(r.size());
    double loss = 0;
    for (const auto& r : round_nlls) {
        double mean = 0;
        for (double v : r) mean += v;
        mean /= static_cast<double>(r.size());
        loss += (static_cast<double>(r.size()) / total_tokens) * mean;
    }
    return loss;
}

// W_i = (sum_j T_j) / (N * T_i), inversely proportional to answer length.
inline std::vector<double> balancing_weights(const std::vector<int>& round_lengths) {
    require(!round_lengths.empty(), "balancing_weights: no rounds");
    double total = 0;
    for (int t : round_lengths) {
        require(t >= 1, "balancing_weights: round length must be >= 1");
        total += t;
    }
    const double n = static_cast<double>(round_lengths.size());
    std::vector<double> w;
    w.reserve(round_lengths.size());
    for (int t : round_lengths) w.push_back(total / (n * t));
    return w;
}

// Balanced loss: every round contributes its mean equally, i.e. the W_i
// weights applied inside the round-level rewrite.
inline double balanced_multiturn_loss(const std::vector<std::vector<double>>& round_nlls) {
    require(!round_nlls.empty(), "balanced_multiturn_loss: no rounds");
    double loss = 0;
    for (const auto& r : round_nlls) {
        require(!r.empty(), "balanced_multiturn_loss: empty round");
        double mean = 0;
        for (double v : r) mean += v;
        loss += mean / static_cast<double>(r.size());
    }
    return loss / static_cast<double>(round_nlls.size());
}

inline double ema_update(double prev, double loss, double beta = 0.9) {
    require(beta > 0.0 && beta < 1.0, "ema_update: beta must be in (0,1)");
    return beta * prev + (1.0 - beta) * loss;
}

// ---- adaptive task weighting ------------------------------------------------

struct TaskLossTracker {
    std::map<TaskKind, double> initial;  // L_i^(0), recorded at first batch
    std::map<TaskKind, double> current;  // EMA of the loss
    double beta = 0.9;
    double alpha = 1.0;

    void observe(TaskKind task, double loss) {
        auto it = initial.find(task);
        if (it == initial.end()) {
            initial[task] = loss;
            current[task] = loss;
        } else {
            current[task] = ema_update(current[task], loss, beta);
        }
    }
};

// Normalized weights over valid tasks (positive initial loss): w_i =
// s_i^alpha / sum_j s_j^alpha * |V| with s_i = rbar / r_i, r_i = EMA/L0.
// Invalid tasks get weight 1 and are excluded from rbar.
inline std::map<TaskKind, double> adaptive_task_weights(const TaskLossTracker& tracker) {
    std::vector<TaskKind> valid;
    for (const auto& [task, l0] : tracker.initial)
        if (l0 > 0.0) valid.push_back(task);
    std::map<TaskKind, double> weights;
    for (const auto& [task, l0] : tracker.initial) weights[task] = 1.0;
    if (valid.empty()) return weights;
    std::map<TaskKind, double> ratio;
    double rbar = 0;
    for (TaskKind t : valid) {
        const double ema = tracker.current.at(t);
        require(ema > 0.0, "adaptive_task_weights: EMA loss for ", task_name(t),
                " is not positive");
        ratio[t] = ema / tracker.initial.at(t);
        rbar += ratio[t];
    }
    rbar /= static_cast<double>(valid.size());
    double denom = 0;
    std::map<TaskKind, double> s_pow;
    for (TaskKind t : valid) {
        s_pow[t] = std::pow(rbar / ratio[t], tracker.alpha);
        denom += s_pow[t];
    }
    for (TaskKind t : valid)
        weights[t] = s_pow[t] / denom * static_cast<double>(valid.size());
    return weights;
}

// ---- learning-rate schedule --------------------------------------------------

struct LrSchedule {
    double peak = 5e-5;
    double floor = 1e-6;
    double warmup_frac = 0.03;
    long total_steps = 0;

    long warmup_steps() const {
        return static_cast<long>(std::ceil(warmup_frac * static_cast<double>(total_steps)));
    }
};

inline double lr_at(const LrSchedule& s, long step) {
    require(step >= 0, "lr_at: negative step");
    if (step > s.total_steps) return s.floor;
    const long w = s.warmup_steps();
    if (step < w) return s.floor + (s.peak - s.floor) * static_cast<double>(step) / static_cast<double>(w);
    if (s.total_steps == w) return s.peak;
    const double progress = static_cast<double>(step - w) / static_cast<double>(s.total_steps - w);
    return s.floor + 0.5 * (s.peak - s.floor) * (1.0 + std::cos(3.14159265358979323846 * progress));
}

// ---- parameter registry, freezing, AdamW ------------------------------------

template <class S>
using NamedParams = std::vector<std::pair<std::string, Tensor<S>>>;

template <class S, class Model>
void append_params(NamedParams<S>& out, Model& m) {
    m.visit([&](const std::string& name, Tensor<S>& t) { out.emplace_back(name, t); });
}

struct FreezeMask {
    std::set<std::string> trainable_prefixes;  // e.g. {"proj.", "dec."}
    bool lora_only = false;                    // restrict decoder training to adapters

    bool trainable(const std::string& name) const {
        for (const auto& p : trainable_prefixes)
            if (name.rfind(p, 0) == 0) {
                if (lora_only && p == "dec." && name.find(".lora_") == std::string::npos)
                    return false;
                return true;
            }
        return false;
    }
};

inline bool weight_decay_eligible(const std::string& name) {
    if (name.find(".ln") != std::string::npos) return false;
    if (name.size() >= 2 && name.compare(name.size() - 2, 2, ".b") == 0) return false;
    return true;
}

template <class S>
class AdamW {
public:
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.01;

    void step(NamedParams<S>& params, const FreezeMask& mask, double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
        for (auto& [name, tensor] : params) {
            if (!mask.trainable(name)) continue;
            auto& st = state_[name];
            auto& vals = tensor.data();
            auto& grads = tensor.grad();
            if (st.m.size() != vals.size()) {
                st.m.assign(vals.size(), 0.0);
                st.v.assign(vals.size(), 0.0);
            }
            const bool decay = weight_decay_eligible(name);
            for (std::size_t i = 0; i < vals.size(); ++i) {
                const double g = grads[i];
                require(std::isfinite(g), "non-finite gradient in parameter ", name);
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
                const double mhat = st.m[i] / bc1;
                const double vhat = st.v[i] / bc2;
                double x = vals[i];
                x -= lr * mhat / (std::sqrt(vhat) + eps);
                if (decay) x -= lr * weight_decay * static_cast<double>(vals[i]);
                vals[i] = static_cast<S>(x);
            }
        }
    }

    void reset() {
        state_.clear();
        t_ = 0;
    }

private:
    struct State {
        std::vector<double> m, v;
    };
    std::map<std::string, State> state_;
    long t_ = 0;
};

template <class S>
void zero_grads(NamedParams<S>& params) {
    for (auto& [name, t] : params) t.zero_grad();
}

// ---- stage configuration -----------------------------------------------------

enum class LossMode { Single, Multiturn, Balanced };

struct StageConfig {
    int stage_id = 1;
    int epochs = 3;
    int batch_size = 96;
    LossMode loss_mode = LossMode::Single;
    double peak_lr = 1e-3;
    double floor_lr = 1e-6;
    double warmup_frac = 0.03;
    int lora_rank = 0;  // > 0 attaches adapters (stage 3 only)
    double lora_alpha = 8.0;

    FreezeMask freeze() const {
        FreezeMask m;
        switch (stage_id) {
            case 1: m.trainable_prefixes = {"proj."}; break;
            case 2: m.trainable_prefixes = {"proj.", "dec."}; break;
            case 3:
                m.trainable_prefixes = {"dec."};
                m.lora_only = lora_rank > 0;
                break;
            default: fail("stage config: unknown stage ", stage_id);
        }
        return m;
    }
};

inline StageConfig default_stage_config(int stage_id) {
    StageConfig c;
    c.stage_id = stage_id;
    c.loss_mode = stage_id == 2 ? LossMode::Balanced : LossMode::Single;
    return c;
}

// ---- training samples ----------------------------------------------------------

template <class S>
struct ModelBundle {
    EncoderModel<S> encoder;
    ProjectionModel<S> projection;
    DecoderModel<S> decoder;
    DialogueVocabulary dialogue_vocab;

    NamedParams<S> stage_params() {
        NamedParams<S> out;
        append_params(out, projection);
        append_params(out, decoder);
        return out;
    }

    NamedParams<S> all_params() {
        NamedParams<S> out;
        append_params(out, encoder);
        append_params(out, projection);
        append_params(out, decoder);
        return out;
    }
};

template <class S>
ModelBundle<S> init_models(const BehaviorVocabulary& vocab, const ModelConfig& cfg,
                           std::uint64_t seed) {
    ModelBundle<S> m;
    m.dialogue_vocab = DialogueVocabulary(vocab);
    RandomStream rng = RandomStream::derive(seed, "init");
    m.encoder = EncoderModel<S>::init(vocab, cfg, rng.derive("encoder"));
    m.projection = ProjectionModel<S>::init(cfg.width, cfg.proj_hidden, cfg.prefix_k, cfg.width,
                                            rng.derive("projection"));
    m.decoder = DecoderModel<S>::init(m.dialogue_vocab.size(), cfg, rng.derive("decoder"));
    return m;
}

// One transcript ready for the decoder: tokens, shifted targets, per-round
// target masks, and the frozen-encoder pooled vector for the prefix.
template <class S>
struct PreparedSample {
    std::vector<int> tokens;
    std::vector<int> targets;                  // length len-1
    std::vector<std::vector<int>> round_masks;  // over targets
    std::vector<int> full_mask;                 // union of round masks
    std::vector<S> pooled;                      // encoder output (detached values)
    TaskKind primary_task = TaskKind::PredictNext;
    int stage = 1;
};

template <class S>
PreparedSample<S> prepare_sample(const ModelBundle<S>& models, const DialogueSample& dlg,
                                 const UserRecord& user, int stage) {
    PreparedSample<S> ps;
    ps.stage = stage;
    ps.primary_task = dlg.rounds.back().task;
    ps.tokens = flatten_transcript(dlg);
    require(static_cast<int>(ps.tokens.size()) <= models.decoder.cfg.max_tokens,
            "prepare_sample: transcript of ", ps.tokens.size(), " tokens exceeds decoder max ",
            models.decoder.cfg.max_tokens);
    const std::size_t len = ps.tokens.size();
    ps.targets.assign(ps.tokens.begin() + 1, ps.tokens.end());
    const std::vector<int> mask = loss_mask(dlg);
    ps.full_mask.assign(mask.begin() + 1, mask.end());
    std::size_t cursor = 0;
    for (const auto& round : dlg.rounds) {
        std::vector<int> rm(len - 1, 0);
        const std::size_t answer_begin = cursor + round.instruction.size();
        for (std::size_t i = 0; i < round.answer.size(); ++i) {
            const std::size_t pos = answer_begin + i;  // token position in transcript
            if (pos >= 1) rm[pos - 1] = 1;             // shifted onto targets
        }
        cursor = answer_begin + round.answer.size();
        ps.round_masks.push_back(std::move(rm));
    }
    const auto* ev = user.events.data() + dlg.window_begin;
    Tensor<S> pooled = encode_sequence(models.encoder,
                                       std::span<const BehaviorEvent>(ev, static_cast<std::size_t>(dlg.window_len)));
    ps.pooled = pooled.data();
    return ps;
}

// Graph loss of one sample under the stage's loss mode.
template <class S>
Tensor<S> sample_loss(ModelBundle<S>& models, const PreparedSample<S>& ps, LossMode mode) {
    Tensor<S> pooled = Tensor<S>::from({models.encoder.cfg.width}, ps.pooled);
    SequenceEmbedding<S> prefix = project(models.projection, pooled);
    Tensor<S> logits = decoder_forward(models.decoder, ps.tokens, &prefix);
    const int t_len = static_cast<int>(ps.tokens.size());
    Tensor<S> trimmed = slice(logits, 0, 0, t_len - 1);
    if (mode == LossMode::Balanced && ps.round_masks.size() > 1) {
        Tensor<S> acc;
        for (const auto& rm : ps.round_masks) {
            Tensor<S> ce = cross_entropy_with_logits(trimmed, ps.targets, rm);
            acc = acc.defined() ? add(acc, ce) : ce;
        }
        return scale(acc, 1.0 / static_cast<double>(ps.round_masks.size()));
    }
    return cross_entropy_with_logits(trimmed, ps.targets, ps.full_mask);
}

// Spec alias: mean NLL over masked positions.
template <class S>
Tensor<S> token_nll(const Tensor<S>& logits, const std::vector<int>& targets,
                    const std::vector<int>& mask) {
    return cross_entropy_with_logits(logits, targets, mask);
}

// ---- sample builders -----------------------------------------------------------

struct SamplerConfig {
    int l1_window = 4;
    int l2_horizon = 8;
    int stage1_windows_per_task = 4;
    int stage2_windows_per_user = 12;
    int stage3_samples_per_user = 6;
    double final_task_predict_prob = 0.5;
};

inline PredictionWindow random_window(const UserRecord& user, int l1, RandomStream& rng,
                                      int reserve_after = 1) {
    const int n = static_cast<int>(user.events.size());
    require(n >= l1 + reserve_after, "random_window: user ", user.user_id, " too short (", n,
            " events for L1=", l1, ")");
    const int begin = rng.uniform_int(0, n - l1 - reserve_after);
    PredictionWindow w;
    w.user = &user;
    w.begin = begin;
    w.len = l1;
    w.target = user.events[static_cast<std::size_t>(begin + l1)].behavior;
    return w;
}

template <class S>
std::vector<PreparedSample<S>> build_stage1_samples(const ModelBundle<S>& models,
                                                    const std::vector<UserRecord>& users,
                                                    const SamplerConfig& cfg, std::uint64_t seed) {
    std::vector<PreparedSample<S>> out;
    RenderOptions ropt;
    ropt.prefix_k = models.decoder.cfg.prefix_k;
    ropt.l2_horizon = cfg.l2_horizon;
    for (const auto& user : users) {
        RandomStream urng = RandomStream::derive(seed, "stage1/" + std::to_string(user.user_id));
        for (TaskKind kind : stage1_tasks()) {
            for (int i = 0; i < cfg.stage1_windows_per_task; ++i) {
                PredictionWindow w = random_window(user, cfg.l1_window, urng);
                DialogueSample dlg;
                dlg.user_id = user.user_id;
                dlg.window_begin = w.begin;
                dlg.window_len = w.len;
                dlg.rounds.push_back(render_task(kind, user, w, user.truth, models.dialogue_vocab, ropt));
                out.push_back(prepare_sample(models, dlg, user, 1));
            }
        }
    }
    return out;
}

template <class S>
std::vector<PreparedSample<S>> build_stage2_samples(const ModelBundle<S>& models,
                                                    const std::vector<UserRecord>& users,
                                                    const SamplerConfig& cfg, std::uint64_t seed) {
    std::vector<PreparedSample<S>> out;
    RenderOptions ropt;
    ropt.prefix_k = models.decoder.cfg.prefix_k;
    ropt.l2_horizon = cfg.l2_horizon;
    for (const auto& user : users) {
        RandomStream urng = RandomStream::derive(seed, "stage2/" + std::to_string(user.user_id));
        for (int i = 0; i < cfg.stage2_windows_per_user; ++i) {
            PredictionWindow w = random_window(user, cfg.l1_window, urng);
            const TaskKind final_task = urng.uniform() < cfg.final_task_predict_prob
                                            ? TaskKind::PredictNext
                                            : TaskKind::GenerateFuture;
            DialogueSample dlg = assemble_stage2_dialogue(user, w, final_task, user.truth,
                                                          models.dialogue_vocab, ropt);
            out.push_back(prepare_sample(models, dlg, user, 2));
        }
    }
    return out;
}

template <class S>
std::vector<PreparedSample<S>> build_stage3_samples(const ModelBundle<S>& models,
                                                    const std::vector<UserRecord>& users,
                                                    const SamplerConfig& cfg, std::uint64_t seed) {
    std::vector<PreparedSample<S>> out;
    RenderOptions ropt;
    ropt.prefix_k = models.decoder.cfg.prefix_k;
    ropt.l2_horizon = cfg.l2_horizon;
    for (const auto& user : users) {
        RandomStream urng = RandomStream::derive(seed, "stage3/" + std::to_string(user.user_id));
        for (int i = 0; i < cfg.stage3_samples_per_user; ++i) {
            PredictionWindow w = random_window(user, cfg.l1_window, urng);
            const int wanted = 1 + urng.uniform_int(0, 2);
            SelfReflectInput reflect;
            int n = wanted;
            while (true) {
                try {
                    auto [flawed, specs] = inject_defects(user.truth.feature_summary, n,
                                                          urng.derive("defects/" + std::to_string(i)));
                    reflect.flawed = std::move(flawed);
                    reflect.specs = std::move(specs);
                    break;
                } catch (const std::exception&) {
                    require(n > 1, "build_stage3_samples: summary admits no defects for user ",
                            user.user_id);
                    --n;
                }
            }
            DialogueSample dlg;
            dlg.user_id = user.user_id;
            dlg.window_begin = w.begin;
            dlg.window_len = w.len;
            dlg.rounds.push_back(render_task(TaskKind::SelfReflect, user, w, user.truth,
                                             models.dialogue_vocab, ropt, &reflect));
            out.push_back(prepare_sample(models, dlg, user, 3));
        }
    }
    return out;
}

// ---- stage runner ----------------------------------------------------------------

struct CurvePoint {
    long step = 0;
    int stage = 0;
    std::string task;
    std::string split;
    double loss = 0.0;
};

template <class S>
struct StageResult {
    std::vector<CurvePoint> curve;
    double best_val = 0.0;
};

namespace detail {

template <class S>
std::map<std::string, std::vector<S>> snapshot_params(NamedParams<S>& params) {
    std::map<std::string, std::vector<S>> snap;
    for (auto& [name, t] : params) snap[name] = t.data();
    return snap;
}

template <class S>
void restore_params(NamedParams<S>& params, const std::map<std::string, std::vector<S>>& snap) {
    for (auto& [name, t] : params) t.data() = snap.at(name);
}

template <class S>
double validation_loss(ModelBundle<S>& models, const std::vector<PreparedSample<S>>& val,
                       LossMode mode) {
    if (val.empty()) return 0.0;
    double total = 0;
    for (const auto& ps : val) total += static_cast<double>(sample_loss(models, ps, mode).item());
    return total / static_cast<double>(val.size());
}

// Per-task validation means, plus an "all" aggregate.
template <class S>
std::map<std::string, double> validation_by_task(ModelBundle<S>& models,
                                                 const std::vector<PreparedSample<S>>& val,
                                                 LossMode mode) {
    std::map<std::string, double> sums;
    std::map<std::string, int> counts;
    double total = 0;
    for (const auto& ps : val) {
        const double l = static_cast<double>(sample_loss(models, ps, mode).item());
        sums[task_name(ps.primary_task)] += l;
        ++counts[task_name(ps.primary_task)];
        total += l;
    }
    std::map<std::string, double> out;
    for (auto& [k, v] : sums) out[k] = v / counts[k];
    if (!val.empty()) out["all"] = total / static_cast<double>(val.size());
    return out;
}

}  // namespace detail

// One curriculum stage: epochs over shuffled samples with gradient
// accumulation per batch, per-epoch validation, best-validation selection.
template <class S>
StageResult<S> run_stage(const StageConfig& cfg, ModelBundle<S>& models,
                         const std::vector<PreparedSample<S>>& train,
                         const std::vector<PreparedSample<S>>& val, std::uint64_t seed) {
    require(!train.empty(), "run_stage: no training samples");
    if (cfg.stage_id == 3 && cfg.lora_rank > 0)
        lora_attach(models.decoder, cfg.lora_rank, cfg.lora_alpha,
                    RandomStream::derive(seed, "lora"));
    NamedParams<S> params = models.stage_params();
    const FreezeMask mask = cfg.freeze();
    AdamW<S> opt;
    const long steps_per_epoch = (static_cast<long>(train.size()) + cfg.batch_size - 1) / cfg.batch_size;
    LrSchedule sched;
    sched.peak = cfg.peak_lr;
    sched.floor = cfg.floor_lr;
    sched.warmup_frac = cfg.warmup_frac;
    sched.total_steps = steps_per_epoch * cfg.epochs;
    StageResult<S> result;
    RandomStream shuffle_rng = RandomStream::derive(seed, "stage_shuffle/" + std::to_string(cfg.stage_id));

    auto record_val = [&](long step) {
        auto by_task = detail::validation_by_task(models, val, cfg.loss_mode);
        for (const auto& [task, loss] : by_task)
            result.curve.push_back({step, cfg.stage_id, task, "val", loss});
        return by_task.count("all") ? by_task.at("all") : 0.0;
    };

    double best_val = record_val(0);
    auto best_snapshot = detail::snapshot_params(params);
    long step = 0;
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<int>(i) - 1))]);
        for (std::size_t base = 0; base < order.size(); base += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t take = std::min<std::size_t>(cfg.batch_size, order.size() - base);
            zero_grads(params);
            double batch_loss = 0;
            for (std::size_t j = 0; j < take; ++j) {
                const auto& ps = train[order[base + j]];
                Tensor<S> loss = sample_loss(models, ps, cfg.loss_mode);
                batch_loss += static_cast<double>(loss.item());
                backward(scale(loss, 1.0 / static_cast<double>(take)));
            }
            opt.step(params, mask, lr_at(sched, step));
            ++step;
            result.curve.push_back({step, cfg.stage_id, "batch", "train",
                                    batch_loss / static_cast<double>(take)});
        }
        const double v = record_val(step);
        if (!val.empty() && v < best_val) {
            best_val = v;
            best_snapshot = detail::snapshot_params(params);
        }
    }
    if (!val.empty()) detail::restore_params(params, best_snapshot);
    result.best_val = best_val;
    return result;
}

// ---- encoder pretraining ------------------------------------------------------

struct PretrainConfig {
    int epochs = 3;
    int batch_size = 96;
    int segments_per_user = 8;
    int segment_events = 16;
    double peak_lr = 1e-3;
    double floor_lr = 1e-6;
    double warmup_frac = 0.03;
};

template <class S>
struct PretrainResult {
    std::vector<CurvePoint> curve;
    double final_val = 0.0;
};

// Next-token NLL over flattened event-token segments.
template <class S>
PretrainResult<S> pretrain_encoder(EncoderModel<S>& enc, const std::vector<UserRecord>& train_users,
                                   const std::vector<UserRecord>& val_users,
                                   const PretrainConfig& cfg, std::uint64_t seed) {
    require(!train_users.empty(), "pretrain_encoder: empty corpus");
    auto make_segments = [&](const std::vector<UserRecord>& users) {
        std::vector<std::vector<int>> segs;
        const int seg_tokens = cfg.segment_events * 4;
        for (const auto& user : users) {
            const auto tokens = enc.tokenizer.tokenize(user.events);
            RandomStream rng = RandomStream::derive(seed, "pretrain_seg/" + std::to_string(user.user_id));
            const int max_start = static_cast<int>(tokens.size()) - seg_tokens;
            if (max_start < 0) {
                if (tokens.size() >= 8) segs.emplace_back(tokens);
                continue;
            }
            for (int k = 0; k < cfg.segments_per_user; ++k) {
                const int start = (rng.uniform_int(0, max_start) / 4) * 4;  // align to event start
                segs.emplace_back(tokens.begin() + start, tokens.begin() + start + seg_tokens);
            }
        }
        return segs;
    };
    auto train_segs = make_segments(train_users);
    auto val_segs = make_segments(val_users);
    NamedParams<S> params;
    append_params(params, enc);
    FreezeMask mask;
    mask.trainable_prefixes = {"enc."};
    AdamW<S> opt;
    const long steps_per_epoch = (static_cast<long>(train_segs.size()) + cfg.batch_size - 1) / cfg.batch_size;
    LrSchedule sched{cfg.peak_lr, cfg.floor_lr, cfg.warmup_frac, steps_per_epoch * cfg.epochs};
    auto seg_loss = [&](const std::vector<int>& seg) {
        std::vector<int> inputs(seg.begin(), seg.end() - 1);
        std::vector<int> targets(seg.begin() + 1, seg.end());
        std::vector<int> all_ones(targets.size(), 1);
        return cross_entropy_with_logits(enc.logits(inputs), targets, all_ones);
    };
    auto val_loss = [&]() {
        if (val_segs.empty()) return 0.0;
        double total = 0;
        for (const auto& seg : val_segs) total += static_cast<double>(seg_loss(seg).item());
        return total / static_cast<double>(val_segs.size());
    };
    PretrainResult<S> result;
    RandomStream shuffle_rng = RandomStream::derive(seed, "pretrain_shuffle");
    std::vector<std::size_t> order(train_segs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    long step = 0;
    result.curve.push_back({0, 0, "pretrain", "val", val_loss()});
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<int>(i) - 1))]);
        for (std::size_t base = 0; base < order.size(); base += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t take = std::min<std::size_t>(cfg.batch_size, order.size() - base);
            zero_grads(params);
            double batch_loss = 0;
            for (std::size_t j = 0; j < take; ++j) {
                Tensor<S> loss = seg_loss(train_segs[order[base + j]]);
                batch_loss += static_cast<double>(loss.item());
                backward(scale(loss, 1.0 / static_cast<double>(take)));
            }
            opt.step(params, mask, lr_at(sched, step));
            ++step;
            result.curve.push_back({step, 0, "pretrain", "train", batch_loss / static_cast<double>(take)});
        }
        result.curve.push_back({step, 0, "pretrain", "val", val_loss()});
    }
    result.final_val = val_loss();
    return result;
}

// ---- curriculum and joint runners ----------------------------------------------

struct CurriculumConfig {
    StageConfig stage1 = default_stage_config(1);
    StageConfig stage2 = default_stage_config(2);
    StageConfig stage3 = default_stage_config(3);
    SamplerConfig sampler;
};

template <class S>
struct CurriculumResult {
    std::vector<CurvePoint> curve;
};

template <class S>
CurriculumResult<S> run_curriculum(ModelBundle<S>& models, const std::vector<UserRecord>& train_users,
                                   const std::vector<UserRecord>& val_users,
                                   const CurriculumConfig& cfg, std::uint64_t seed) {
    CurriculumResult<S> result;
    auto run_one = [&](const StageConfig& sc, auto&& builder) {
        auto train = builder(models, train_users, cfg.sampler, seed);
        auto val = builder(models, val_users, cfg.sampler, seed + 1);
        StageResult<S> r = run_stage(sc, models, train, val, seed);
        result.curve.insert(result.curve.end(), r.curve.begin(), r.curve.end());
    };
    run_one(cfg.stage1, [](auto& m, auto& u, auto& c, std::uint64_t s) {
        return build_stage1_samples(m, u, c, s);
    });
    run_one(cfg.stage2, [](auto& m, auto& u, auto& c, std::uint64_t s) {
        return build_stage2_samples(m, u, c, s);
    });
    run_one(cfg.stage3, [](auto& m, auto& u, auto& c, std::uint64_t s) {
        return build_stage3_samples(m, u, c, s);
    });
    return result;
}

struct JointConfig {
    int epochs = 9;  // matches the staged total by default
    int batch_size = 96;
    double peak_lr = 1e-3;
    double floor_lr = 1e-6;
    double warmup_frac = 0.03;
    bool adaptive_weights = false;
    double alpha = 1.0;
    double beta = 0.9;
    SamplerConfig sampler;
};

template <class S>
struct JointResult {
    std::vector<CurvePoint> curve;
    std::vector<double> weight_sums;  // recorded sum of adaptive weights per step
};

// All tasks from all stages trained simultaneously; stage-2 dialogues keep the
// balanced loss, single-round samples use Eq. 2. Validation is tracked per
// stage group so curves are comparable with the staged run.
template <class S>
JointResult<S> run_joint(ModelBundle<S>& models, const std::vector<UserRecord>& train_users,
                         const std::vector<UserRecord>& val_users, const JointConfig& cfg,
                         std::uint64_t seed) {
    auto train1 = build_stage1_samples(models, train_users, cfg.sampler, seed);
    auto train2 = build_stage2_samples(models, train_users, cfg.sampler, seed);
    auto train3 = build_stage3_samples(models, train_users, cfg.sampler, seed);
    auto val1 = build_stage1_samples(models, val_users, cfg.sampler, seed + 1);
    auto val2 = build_stage2_samples(models, val_users, cfg.sampler, seed + 1);
    auto val3 = build_stage3_samples(models, val_users, cfg.sampler, seed + 1);
    std::vector<PreparedSample<S>> train;
    train.insert(train.end(), train1.begin(), train1.end());
    train.insert(train.end(), train2.begin(), train2.end());
    train.insert(train.end(), train3.begin(), train3.end());
    require(!train.empty(), "run_joint: no samples");

    NamedParams<S> params = models.stage_params();
    FreezeMask mask;
    mask.trainable_prefixes = {"proj.", "dec."};
    AdamW<S> opt;
    const long steps_per_epoch = (static_cast<long>(train.size()) + cfg.batch_size - 1) / cfg.batch_size;
    LrSchedule sched{cfg.peak_lr, cfg.floor_lr, cfg.warmup_frac, steps_per_epoch * cfg.epochs};
    TaskLossTracker tracker;
    tracker.alpha = cfg.alpha;
    tracker.beta = cfg.beta;
    JointResult<S> result;
    auto mode_for = [](const PreparedSample<S>& ps) {
        return ps.stage == 2 ? LossMode::Balanced : LossMode::Single;
    };
    auto record_val = [&](long step) {
        auto log_group = [&](const std::vector<PreparedSample<S>>& val, int stage, LossMode mode) {
            if (val.empty()) return;
            result.curve.push_back({step, stage, "stage" + std::to_string(stage), "val",
                                    detail::validation_loss(models, val, mode)});
        };
        log_group(val1, 1, LossMode::Single);
        log_group(val2, 2, LossMode::Balanced);
        log_group(val3, 3, LossMode::Single);
    };

    record_val(0);
    RandomStream shuffle_rng = RandomStream::derive(seed, "joint_shuffle");
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    long step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<int>(i) - 1))]);
        for (std::size_t base = 0; base < order.size(); base += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t take = std::min<std::size_t>(cfg.batch_size, order.size() - base);
            zero_grads(params);
            std::map<TaskKind, double> weights;
            if (cfg.adaptive_weights) {
                weights = adaptive_task_weights(tracker);
                double wsum = 0;
                for (auto& [t, w] : weights) wsum += w;
                result.weight_sums.push_back(wsum);
            }
            double batch_loss = 0;
            for (std::size_t j = 0; j < take; ++j) {
                const auto& ps = train[order[base + j]];
                Tensor<S> loss = sample_loss(models, ps, mode_for(ps));
                const double raw = loss.item();
                batch_loss += raw;
                tracker.observe(ps.primary_task, raw);
                double w = 1.0;
                if (cfg.adaptive_weights) {
                    auto it = weights.find(ps.primary_task);
                    if (it != weights.end()) w = it->second;
                }
                backward(scale(loss, w / static_cast<double>(take)));
            }
            opt.step(params, mask, lr_at(sched, step));
            ++step;
            result.curve.push_back({step, 0, "joint", "train", batch_loss / static_cast<double>(take)});
        }
        record_val(step);
    }
    return result;
}

}  // namespace bua
