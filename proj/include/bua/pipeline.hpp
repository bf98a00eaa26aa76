#pragma once

#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bua/catalog.hpp"
#include "bua/common.hpp"
#include "bua/core.hpp"
#include "bua/dialogue.hpp"
#include "bua/metrics.hpp"
#include "bua/models.hpp"
#include "bua/serialize.hpp"
#include "bua/synthgen.hpp"
#include "bua/tensor.hpp"
#include "bua/trainer.hpp"

namespace bua {

constexpr const char* kVersionString = "bua-0.1.0";

// ---- run configuration ---------------------------------------------------------

struct EvalConfig {
    int longtail_cap = 50;
    int max_windows = 1500;
    int gen_samples = 300;
    int max_answer_tokens = 80;
    bool per_sample_divergences = false;
};

struct RunConfig {
    std::uint64_t seed = kDefaultSeed;
    std::string precision = "f32";
    int behaviors = 37;
    int locations = 20;
    int users = 200;
    int days = 14;
    ModelConfig model;
    SamplerConfig sampler;
    PretrainConfig pretrain;
    StageConfig stage1 = default_stage_config(1);
    StageConfig stage2 = default_stage_config(2);
    StageConfig stage3 = default_stage_config(3);
    JointConfig joint;
    EvalConfig eval;

    RunConfig() {
        model.max_tokens = 384;
        joint.epochs = stage1.epochs + stage2.epochs + stage3.epochs;
    }
};

namespace cfgdetail {

template <class T>
void read_field(const Json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

inline void read_stage(const Json& j, const std::string& where, StageConfig& s) {
    detail::check_keys(j, {"epochs", "batch", "peak_lr", "floor_lr", "warmup_frac", "loss",
                           "lora_rank", "lora_alpha"},
                       where);
    read_field(j, "epochs", s.epochs);
    read_field(j, "batch", s.batch_size);
    read_field(j, "peak_lr", s.peak_lr);
    read_field(j, "floor_lr", s.floor_lr);
    read_field(j, "warmup_frac", s.warmup_frac);
    read_field(j, "lora_rank", s.lora_rank);
    read_field(j, "lora_alpha", s.lora_alpha);
    if (j.contains("loss")) {
        const std::string mode = j.at("loss").get<std::string>();
        if (mode == "balanced") s.loss_mode = LossMode::Balanced;
        else if (mode == "unbalanced") s.loss_mode = LossMode::Multiturn;
        else if (mode == "single") s.loss_mode = LossMode::Single;
        else fail(where, ": unknown loss mode '", mode, "'");
    }
}

}  // namespace cfgdetail

inline RunConfig config_from_json(const Json& j) {
    RunConfig cfg;
    detail::check_keys(j, {"seed", "precision", "vocab", "corpus", "windows", "model", "pretrain",
                           "stage1", "stage2", "stage3", "joint", "eval"},
                       "config");
    cfgdetail::read_field(j, "seed", cfg.seed);
    cfgdetail::read_field(j, "precision", cfg.precision);
    require(cfg.precision == "f32" || cfg.precision == "f64", "config: precision must be f32 or f64");
    if (j.contains("vocab")) {
        const auto& v = j.at("vocab");
        detail::check_keys(v, {"behaviors", "locations"}, "config.vocab");
        cfgdetail::read_field(v, "behaviors", cfg.behaviors);
        cfgdetail::read_field(v, "locations", cfg.locations);
    }
    if (j.contains("corpus")) {
        const auto& v = j.at("corpus");
        detail::check_keys(v, {"users", "days"}, "config.corpus");
        cfgdetail::read_field(v, "users", cfg.users);
        cfgdetail::read_field(v, "days", cfg.days);
    }
    if (j.contains("windows")) {
        const auto& v = j.at("windows");
        detail::check_keys(v, {"l1", "l2", "predict_prob"}, "config.windows");
        cfgdetail::read_field(v, "l1", cfg.sampler.l1_window);
        cfgdetail::read_field(v, "l2", cfg.sampler.l2_horizon);
        cfgdetail::read_field(v, "predict_prob", cfg.sampler.final_task_predict_prob);
    }
    if (j.contains("model")) {
        const auto& v = j.at("model");
        detail::check_keys(v, {"width", "layers", "heads", "max_tokens", "prefix_k", "proj_hidden"},
                           "config.model");
        cfgdetail::read_field(v, "width", cfg.model.width);
        cfgdetail::read_field(v, "layers", cfg.model.layers);
        cfgdetail::read_field(v, "heads", cfg.model.heads);
        cfgdetail::read_field(v, "max_tokens", cfg.model.max_tokens);
        cfgdetail::read_field(v, "prefix_k", cfg.model.prefix_k);
        cfgdetail::read_field(v, "proj_hidden", cfg.model.proj_hidden);
    }
    if (j.contains("pretrain")) {
        const auto& v = j.at("pretrain");
        detail::check_keys(v, {"epochs", "batch", "segments_per_user", "segment_events", "peak_lr",
                               "floor_lr", "warmup_frac"},
                           "config.pretrain");
        cfgdetail::read_field(v, "epochs", cfg.pretrain.epochs);
        cfgdetail::read_field(v, "batch", cfg.pretrain.batch_size);
        cfgdetail::read_field(v, "segments_per_user", cfg.pretrain.segments_per_user);
        cfgdetail::read_field(v, "segment_events", cfg.pretrain.segment_events);
        cfgdetail::read_field(v, "peak_lr", cfg.pretrain.peak_lr);
        cfgdetail::read_field(v, "floor_lr", cfg.pretrain.floor_lr);
        cfgdetail::read_field(v, "warmup_frac", cfg.pretrain.warmup_frac);
    }
    if (j.contains("stage1")) {
        cfgdetail::read_stage(j.at("stage1"), "config.stage1", cfg.stage1);
        const auto& v = j.at("stage1");
        if (v.contains("windows_per_task"))
            cfg.sampler.stage1_windows_per_task = v.at("windows_per_task").get<int>();
    }
    if (j.contains("stage2")) {
        Json v = j.at("stage2");
        if (v.contains("windows_per_user")) {
            cfg.sampler.stage2_windows_per_user = v.at("windows_per_user").get<int>();
            v.erase("windows_per_user");
        }
        cfgdetail::read_stage(v, "config.stage2", cfg.stage2);
    }
    if (j.contains("stage3")) {
        Json v = j.at("stage3");
        if (v.contains("samples_per_user")) {
            cfg.sampler.stage3_samples_per_user = v.at("samples_per_user").get<int>();
            v.erase("samples_per_user");
        }
        cfgdetail::read_stage(v, "config.stage3", cfg.stage3);
    }
    if (j.contains("joint")) {
        const auto& v = j.at("joint");
        detail::check_keys(v, {"epochs", "batch", "peak_lr", "floor_lr", "warmup_frac",
                               "adaptive_weights", "alpha", "beta"},
                           "config.joint");
        cfgdetail::read_field(v, "epochs", cfg.joint.epochs);
        cfgdetail::read_field(v, "batch", cfg.joint.batch_size);
        cfgdetail::read_field(v, "peak_lr", cfg.joint.peak_lr);
        cfgdetail::read_field(v, "floor_lr", cfg.joint.floor_lr);
        cfgdetail::read_field(v, "warmup_frac", cfg.joint.warmup_frac);
        cfgdetail::read_field(v, "adaptive_weights", cfg.joint.adaptive_weights);
        cfgdetail::read_field(v, "alpha", cfg.joint.alpha);
        cfgdetail::read_field(v, "beta", cfg.joint.beta);
    }
    if (j.contains("eval")) {
        const auto& v = j.at("eval");
        detail::check_keys(v, {"longtail_cap", "max_windows", "gen_samples", "max_answer_tokens",
                               "per_sample_divergences"},
                           "config.eval");
        cfgdetail::read_field(v, "longtail_cap", cfg.eval.longtail_cap);
        cfgdetail::read_field(v, "max_windows", cfg.eval.max_windows);
        cfgdetail::read_field(v, "gen_samples", cfg.eval.gen_samples);
        cfgdetail::read_field(v, "max_answer_tokens", cfg.eval.max_answer_tokens);
        cfgdetail::read_field(v, "per_sample_divergences", cfg.eval.per_sample_divergences);
    }
    // stage invariants
    require(cfg.sampler.l1_window >= 1 && cfg.sampler.l2_horizon >= 1, "config: bad window sizes");
    require(cfg.users >= 10, "config: need at least 10 users");
    return cfg;
}

inline const char* loss_mode_name(LossMode m) {
    switch (m) {
        case LossMode::Single: return "single";
        case LossMode::Multiturn: return "unbalanced";
        case LossMode::Balanced: return "balanced";
    }
    return "?";
}

inline Json config_to_json(const RunConfig& cfg) {
    Json j;
    j["seed"] = cfg.seed;
    j["precision"] = cfg.precision;
    j["vocab"] = {{"behaviors", cfg.behaviors}, {"locations", cfg.locations}};
    j["corpus"] = {{"users", cfg.users}, {"days", cfg.days}};
    j["windows"] = {{"l1", cfg.sampler.l1_window},
                    {"l2", cfg.sampler.l2_horizon},
                    {"predict_prob", cfg.sampler.final_task_predict_prob}};
    j["model"] = {{"width", cfg.model.width},     {"layers", cfg.model.layers},
                  {"heads", cfg.model.heads},     {"max_tokens", cfg.model.max_tokens},
                  {"prefix_k", cfg.model.prefix_k}, {"proj_hidden", cfg.model.proj_hidden}};
    j["pretrain"] = {{"epochs", cfg.pretrain.epochs},
                     {"batch", cfg.pretrain.batch_size},
                     {"segments_per_user", cfg.pretrain.segments_per_user},
                     {"segment_events", cfg.pretrain.segment_events},
                     {"peak_lr", cfg.pretrain.peak_lr},
                     {"floor_lr", cfg.pretrain.floor_lr},
                     {"warmup_frac", cfg.pretrain.warmup_frac}};
    auto stage_json = [&](const StageConfig& s) {
        return Json{{"epochs", s.epochs},        {"batch", s.batch_size},
                    {"peak_lr", s.peak_lr},      {"floor_lr", s.floor_lr},
                    {"warmup_frac", s.warmup_frac}, {"loss", loss_mode_name(s.loss_mode)},
                    {"lora_rank", s.lora_rank},  {"lora_alpha", s.lora_alpha}};
    };
    j["stage1"] = stage_json(cfg.stage1);
    j["stage1"]["windows_per_task"] = cfg.sampler.stage1_windows_per_task;
    j["stage2"] = stage_json(cfg.stage2);
    j["stage2"]["windows_per_user"] = cfg.sampler.stage2_windows_per_user;
    j["stage3"] = stage_json(cfg.stage3);
    j["stage3"]["samples_per_user"] = cfg.sampler.stage3_samples_per_user;
    j["joint"] = {{"epochs", cfg.joint.epochs},
                  {"batch", cfg.joint.batch_size},
                  {"peak_lr", cfg.joint.peak_lr},
                  {"floor_lr", cfg.joint.floor_lr},
                  {"warmup_frac", cfg.joint.warmup_frac},
                  {"adaptive_weights", cfg.joint.adaptive_weights},
                  {"alpha", cfg.joint.alpha},
                  {"beta", cfg.joint.beta}};
    j["eval"] = {{"longtail_cap", cfg.eval.longtail_cap},
                 {"max_windows", cfg.eval.max_windows},
                 {"gen_samples", cfg.eval.gen_samples},
                 {"max_answer_tokens", cfg.eval.max_answer_tokens},
                 {"per_sample_divergences", cfg.eval.per_sample_divergences}};
    return j;
}

inline std::uint64_t config_digest(const RunConfig& cfg) {
    return fnv1a64(canonical_json(config_to_json(cfg)));
}

// The "paper" preset keeps the learning-rate values reported for the
// full-scale system; the desk default overrides the peak for a tiny model.
inline void apply_paper_preset(RunConfig& cfg) {
    cfg.pretrain.peak_lr = 5e-5;
    cfg.stage1.peak_lr = 5e-5;
    cfg.stage2.peak_lr = 5e-5;
    cfg.stage3.peak_lr = 5e-5;
    cfg.joint.peak_lr = 5e-5;
    cfg.sampler.l1_window = 40;
}

inline std::uint64_t effective_seed(const RunConfig& cfg) {
    if (const char* env = std::getenv("BUA_SEED")) {
        char* end = nullptr;
        const unsigned long long v = std::strtoull(env, &end, 10);
        require(end && *end == '\0', "BUA_SEED must be an integer, got '", env, "'");
        return static_cast<std::uint64_t>(v);
    }
    return cfg.seed;
}

// ---- multi-round evaluation protocol ----------------------------------------------

// Runs the stage-2 dialogue at inference time: understanding rounds are
// either generated by the model itself or teacher-forced with ground truth,
// and the final round is decoded greedily.
template <class S>
class DialogueEvaluator {
public:
    DialogueEvaluator(ModelBundle<S>& models, const EvalConfig& eval_cfg, int l2_horizon)
        : models_(models), eval_(eval_cfg) {
        ropt_.prefix_k = models.decoder.cfg.prefix_k;
        ropt_.l2_horizon = l2_horizon;
    }

    // final_task in {PredictNext, GenerateFuture}; use_label controls the three
    // understanding rounds.
    std::vector<int> run(const UserRecord& user, const PredictionWindow& window, TaskKind final_task,
                         const std::array<bool, 3>& use_label) {
        infer::DecoderSession<S> session(models_.decoder);
        const auto prefix = compute_prefix(user, window);
        RenderOptions first = ropt_;
        first.with_emb = true;
        RenderOptions rest = ropt_;
        rest.with_emb = false;
        const std::array<TaskKind, 3> understanding = {TaskKind::KeyBehaviorID,
                                                       TaskKind::PatternDiscovery,
                                                       TaskKind::FeatureSummary};
        for (int r = 0; r < 3; ++r) {
            DialogueRound round = render_task(understanding[static_cast<std::size_t>(r)], user, window,
                                              user.truth, models_.dialogue_vocab, r == 0 ? first : rest);
            feed_instruction(session, round.instruction, prefix);
            if (use_label[static_cast<std::size_t>(r)]) {
                if (!budget_ok(session, static_cast<int>(round.answer.size()))) return {};
                session.feed_tokens(round.answer);
            } else {
                if (!budget_ok(session, 2)) return {};
                // generate() feeds its output into the cache as it decodes;
                // only a terminating EOS still needs to enter the context
                const auto gen = session.generate(DialogueVocabulary::kEos, eval_.max_answer_tokens);
                if (!gen.empty() && gen.back() == DialogueVocabulary::kEos &&
                    session.position() < models_.decoder.cfg.max_tokens)
                    session.feed_token(DialogueVocabulary::kEos);
            }
        }
        DialogueRound final_round = render_task(final_task, user, window, user.truth,
                                                models_.dialogue_vocab, rest);
        feed_instruction(session, final_round.instruction, prefix);
        if (!budget_ok(session, 1)) return {};
        const int budget = std::min(eval_.max_answer_tokens,
                                    models_.decoder.cfg.max_tokens - session.position());
        return session.generate(DialogueVocabulary::kEos, budget);
    }

    metrics::PredictionReport eval_predict(const std::vector<PredictionWindow>& windows,
                                           const CategoryPartition& partition,
                                           int majority_class) {
        require(!windows.empty(), "eval_predict: no windows");
        std::vector<int> preds, labels;
        long majority_hits = 0;
        for (const auto& w : windows) {
            const auto out = run(*w.user, w, TaskKind::PredictNext, {false, false, false});
            const auto parsed = parse_prediction(out, models_.dialogue_vocab);
            preds.push_back(std::holds_alternative<Malformed>(parsed) ? metrics::kMalformedClass
                                                                      : std::get<int>(parsed));
            labels.push_back(w.target);
            if (w.target == majority_class) ++majority_hits;
        }
        const auto cc = metrics::confusion(preds, labels);
        const auto cat = metrics::category_accuracies(cc, partition);
        metrics::PredictionReport report;
        report.rec_w = metrics::weighted_recall(cc);
        report.prec_w = metrics::weighted_precision_support(cc);
        report.prec_w_eq7 = metrics::weighted_precision_eq7(cc);
        report.overall = cat.overall;
        report.head = cat.head;
        report.medium = cat.medium;
        report.tail = cat.tail;
        report.support_head = cat.support_head;
        report.support_medium = cat.support_medium;
        report.support_tail = cat.support_tail;
        report.samples = cc.samples;
        report.malformed = cc.malformed;
        report.majority_baseline = static_cast<double>(majority_hits) / static_cast<double>(windows.size());
        return report;
    }

    metrics::GenerationReport eval_generate(const std::vector<PredictionWindow>& windows,
                                            int l2_horizon, int behaviors, int locations) {
        require(!windows.empty(), "eval_generate: no windows");
        std::vector<ParsedGeneration> candidates;
        std::vector<std::vector<BehaviorEvent>> references;
        for (const auto& w : windows) {
            const auto out = run(*w.user, w, TaskKind::GenerateFuture, {false, false, false});
            candidates.push_back(parse_generation(out, models_.dialogue_vocab));
            std::vector<BehaviorEvent> ref;
            const int from = w.begin + w.len;
            for (int i = 0; i < l2_horizon && from + i < static_cast<int>(w.user->events.size()); ++i)
                ref.push_back(w.user->events[static_cast<std::size_t>(from + i)]);
            references.push_back(std::move(ref));
        }
        metrics::GenerationEvalOptions opt;
        opt.behaviors = behaviors;
        opt.locations = locations;
        opt.per_sample_divergences = eval_.per_sample_divergences;
        return metrics::evaluate_generation(candidates, references, opt);
    }

    metrics::SubstitutionReport run_substitution(const std::vector<PredictionWindow>& windows) {
        require(!windows.empty(), "run_substitution: no windows");
        return metrics::substitution_study(
            metrics::default_substitution_configs(), static_cast<long>(windows.size()),
            [&](const metrics::SubstitutionConfig& cfg) {
                std::vector<char> correct;
                for (const auto& w : windows) {
                    const auto out = run(*w.user, w, TaskKind::PredictNext, cfg.use_label);
                    const auto parsed = parse_prediction(out, models_.dialogue_vocab);
                    correct.push_back(!std::holds_alternative<Malformed>(parsed) &&
                                      std::get<int>(parsed) == w.target);
                }
                return correct;
            });
    }

private:
    std::vector<S> compute_prefix(const UserRecord& user, const PredictionWindow& window) {
        const auto* ev = user.events.data() + window.begin;
        Tensor<S> pooled = encode_sequence(
            models_.encoder, std::span<const BehaviorEvent>(ev, static_cast<std::size_t>(window.len)));
        SequenceEmbedding<S> prefix = project(models_.projection, pooled.detach());
        return prefix.vectors.data();
    }

    void feed_instruction(infer::DecoderSession<S>& session, const std::vector<int>& instruction,
                          const std::vector<S>& prefix) {
        int emb_seen = 0;
        for (int tok : instruction) {
            if (tok == DialogueVocabulary::kEmb) {
                session.feed_embedding(prefix.data() +
                                       static_cast<std::size_t>(emb_seen) * models_.decoder.cfg.width);
                ++emb_seen;
            } else {
                session.feed_token(tok);
            }
        }
    }

    bool budget_ok(const infer::DecoderSession<S>& session, int needed) const {
        return session.position() + needed < models_.decoder.cfg.max_tokens;
    }

    ModelBundle<S>& models_;
    EvalConfig eval_;
    RenderOptions ropt_;
};

// ---- window selection -----------------------------------------------------------

inline std::vector<PredictionWindow> eval_windows(const std::vector<UserRecord>& users, int l1,
                                                  int max_windows, std::uint64_t seed,
                                                  int reserve_after = 1) {
    std::vector<PredictionWindow> all;
    for (const auto& user : users)
        for (auto& w : prediction_windows(user, l1)) {
            if (w.target_index() + reserve_after > static_cast<int>(user.events.size())) continue;
            all.push_back(w);
        }
    require(!all.empty(), "eval_windows: no usable windows");
    if (static_cast<int>(all.size()) > max_windows) {
        RandomStream rng = RandomStream::derive(seed, "eval_windows");
        for (std::size_t i = all.size(); i > 1; --i)
            std::swap(all[i - 1], all[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
        all.resize(static_cast<std::size_t>(max_windows));
    }
    return all;
}

inline int majority_class(const FrequencyTable& freq) {
    int best = 0;
    for (int b = 1; b < static_cast<int>(freq.counts.size()); ++b)
        if (freq.counts[b] > freq.counts[best]) best = b;
    return best;
}

// ---- full pipeline ----------------------------------------------------------------

template <class S>
struct TrainedPipeline {
    BehaviorVocabulary vocab;
    CorpusSplit corpus;
    ModelBundle<S> models;
    CategoryPartition train_partition;
    int majority = 0;
    std::vector<CurvePoint> curves;
    std::map<std::string, std::string> checkpoints;  // stage tag -> serialized bytes
};

template <class S>
std::string snapshot_checkpoint(ModelBundle<S>& models, const RunConfig& cfg,
                                const std::string& tag) {
    NamedParams<S> params = models.all_params();
    return checkpoint_to_bytes(checkpoint_from_params(params, config_digest(cfg), tag));
}

template <class S>
TrainedPipeline<S> train_pipeline(const RunConfig& cfg, CorpusSplit corpus) {
    TrainedPipeline<S> out;
    out.vocab = make_vocabulary(cfg.behaviors, cfg.locations);
    out.corpus = std::move(corpus);
    const std::uint64_t seed = effective_seed(cfg);
    out.models = init_models<S>(out.vocab, cfg.model, seed);
    const auto freq = frequency_table(out.corpus.train, cfg.behaviors);
    out.train_partition = partition_categories(freq);
    out.majority = majority_class(freq);

    auto pre = pretrain_encoder(out.models.encoder, out.corpus.train, out.corpus.val, cfg.pretrain,
                                seed);
    out.curves.insert(out.curves.end(), pre.curve.begin(), pre.curve.end());
    out.checkpoints["encoder"] = snapshot_checkpoint(out.models, cfg, "encoder");

    CurriculumConfig cur;
    cur.stage1 = cfg.stage1;
    cur.stage2 = cfg.stage2;
    cur.stage3 = cfg.stage3;
    cur.sampler = cfg.sampler;
    auto run_one = [&](const StageConfig& sc, auto&& builder, const std::string& tag) {
        auto train = builder(out.models, out.corpus.train, cur.sampler, seed);
        auto val = builder(out.models, out.corpus.val, cur.sampler, seed + 1);
        StageResult<S> r = run_stage(sc, out.models, train, val, seed);
        out.curves.insert(out.curves.end(), r.curve.begin(), r.curve.end());
        out.checkpoints[tag] = snapshot_checkpoint(out.models, cfg, tag);
    };
    run_one(cur.stage1, [](auto& m, auto& u, auto& c, std::uint64_t s) {
        return build_stage1_samples(m, u, c, s);
    }, "stage1");
    run_one(cur.stage2, [](auto& m, auto& u, auto& c, std::uint64_t s) {
        return build_stage2_samples(m, u, c, s);
    }, "stage2");
    run_one(cur.stage3, [](auto& m, auto& u, auto& c, std::uint64_t s) {
        return build_stage3_samples(m, u, c, s);
    }, "stage3");
    if (cfg.stage3.lora_rank > 0) {
        lora_merge(out.models.decoder);
        out.checkpoints["stage3"] = snapshot_checkpoint(out.models, cfg, "stage3");
    }
    return out;
}

template <class S>
TrainedPipeline<S> train_pipeline(const RunConfig& cfg) {
    CorpusConfig cc{cfg.users, cfg.days, effective_seed(cfg)};
    return train_pipeline<S>(cfg, build_corpus(cc, make_vocabulary(cfg.behaviors, cfg.locations)));
}

template <class S>
metrics::MetricsReport evaluate_pipeline(TrainedPipeline<S>& tp, const RunConfig& cfg,
                                         bool longtail, bool generation) {
    const std::uint64_t seed = effective_seed(cfg);
    DialogueEvaluator<S> ev(tp.models, cfg.eval, cfg.sampler.l2_horizon);
    metrics::MetricsReport report;
    std::vector<PredictionWindow> windows;
    if (longtail) {
        auto lt = metrics::build_longtail_testset(tp.corpus.test, tp.train_partition,
                                                  cfg.sampler.l1_window, cfg.eval.longtail_cap, seed);
        windows = std::move(lt.samples);
    } else {
        windows = eval_windows(tp.corpus.test, cfg.sampler.l1_window, cfg.eval.max_windows, seed);
    }
    report.prediction = ev.eval_predict(windows, tp.train_partition, tp.majority);
    if (generation) {
        auto gen_windows = eval_windows(tp.corpus.test, cfg.sampler.l1_window, cfg.eval.gen_samples,
                                        seed + 7, cfg.sampler.l2_horizon);
        report.generation = ev.eval_generate(gen_windows, cfg.sampler.l2_horizon, cfg.behaviors,
                                             cfg.locations);
    }
    return report;
}

// ---- curve CSV ---------------------------------------------------------------------

inline std::string curves_to_csv(const std::vector<CurvePoint>& curve) {
    std::string out = "step,stage,task,split,loss\n";
    for (const auto& p : curve) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.17g", p.loss);
        out += std::to_string(p.step) + "," + std::to_string(p.stage) + "," + p.task + "," +
               p.split + "," + buf + "\n";
    }
    return out;
}

// ---- manifest -----------------------------------------------------------------------

inline void write_manifest(const std::filesystem::path& dir, const std::string& command,
                           const RunConfig& cfg,
                           const std::map<std::string, std::string>& output_digests) {
    Json j;
    j["command"] = command;
    j["config"] = config_to_json(cfg);
    j["seed"] = effective_seed(cfg);
    j["version"] = kVersionString;
    Json outs;
    for (const auto& [path, digest] : output_digests) outs[path] = digest;
    j["outputs"] = std::move(outs);
    atomic_write(dir / (command + ".manifest.json"), canonical_json(j));
}

}  // namespace bua
