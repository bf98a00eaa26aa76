#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bua/pipeline.hpp"

namespace fs = std::filesystem;
using namespace bua;

namespace {

RunConfig load_config(const std::string& config_path, bool paper_preset,
                      std::optional<std::uint64_t> seed_flag) {
    RunConfig cfg;
    if (paper_preset) apply_paper_preset(cfg);
    if (!config_path.empty()) {
        Json j;
        try {
            j = Json::parse(read_file(config_path));
        } catch (const std::exception& e) {
            fail("config ", config_path, ": invalid JSON (", e.what(), ")");
        }
        cfg = config_from_json(j);
        if (paper_preset) apply_paper_preset(cfg);
    }
    if (seed_flag) cfg.seed = *seed_flag;
    return cfg;
}

struct OutputTracker {
    fs::path dir;
    std::map<std::string, std::string> digests;

    void write(const std::string& name, const std::string& bytes) {
        fs::create_directories(dir);
        atomic_write(dir / name, bytes);
        digests[name] = digest_hex(bytes);
    }
};

CorpusSplit load_split(const fs::path& data_dir) {
    CorpusSplit split;
    split.train = read_corpus(data_dir / "train.jsonl");
    split.val = read_corpus(data_dir / "val.jsonl");
    split.test = read_corpus(data_dir / "test.jsonl");
    return split;
}

template <class Fn>
int dispatch_precision(const RunConfig& cfg, Fn&& fn) {
    if (cfg.precision == "f64") return fn(double{});
    return fn(float{});
}

template <class S>
ModelBundle<S> load_models(const RunConfig& cfg, const fs::path& checkpoint_path) {
    auto vocab = make_vocabulary(cfg.behaviors, cfg.locations);
    ModelBundle<S> models = init_models<S>(vocab, cfg.model, effective_seed(cfg));
    Checkpoint ck = read_checkpoint(checkpoint_path);
    NamedParams<S> params = models.all_params();
    load_params_from_checkpoint(params, ck, config_digest(cfg));
    return models;
}

int cmd_gen_data(const RunConfig& cfg, const std::string& out_dir) {
    auto vocab = make_vocabulary(cfg.behaviors, cfg.locations);
    CorpusConfig cc{cfg.users, cfg.days, effective_seed(cfg)};
    CorpusSplit split = build_corpus(cc, vocab);
    OutputTracker out{out_dir, {}};
    out.write("train.jsonl", corpus_to_jsonl(split.train));
    out.write("val.jsonl", corpus_to_jsonl(split.val));
    out.write("test.jsonl", corpus_to_jsonl(split.test));
    write_manifest(out.dir, "gen-data", cfg, out.digests);
    std::printf("wrote %zu/%zu/%zu users to %s\n", split.train.size(), split.val.size(),
                split.test.size(), out_dir.c_str());
    return 0;
}

int cmd_pretrain(const RunConfig& cfg, const std::string& data_dir, const std::string& out_dir) {
    return dispatch_precision(cfg, [&](auto tag) {
        using S = decltype(tag);
        CorpusSplit split = load_split(data_dir);
        auto vocab = make_vocabulary(cfg.behaviors, cfg.locations);
        ModelBundle<S> models = init_models<S>(vocab, cfg.model, effective_seed(cfg));
        auto result = pretrain_encoder(models.encoder, split.train, split.val, cfg.pretrain,
                                       effective_seed(cfg));
        OutputTracker out{out_dir, {}};
        out.write("encoder.buac", snapshot_checkpoint(models, cfg, "encoder"));
        out.write("pretrain_curve.csv", curves_to_csv(result.curve));
        write_manifest(out.dir, "pretrain-encoder", cfg, out.digests);
        std::printf("pretrain final validation loss %.6f\n", result.final_val);
        return 0;
    });
}

struct TrainFlags {
    std::string stage = "all";
    std::string loss;
    bool joint = false;
    bool adaptive = false;
    int lora_rank = -1;
};

int cmd_train(RunConfig cfg, const std::string& data_dir, const std::string& encoder_ck,
              const std::string& init_ck, const std::string& out_dir, const TrainFlags& flags) {
    if (!flags.loss.empty()) {
        if (flags.loss == "balanced") cfg.stage2.loss_mode = LossMode::Balanced;
        else if (flags.loss == "unbalanced") cfg.stage2.loss_mode = LossMode::Multiturn;
        else fail("--loss must be balanced or unbalanced, got '", flags.loss, "'");
    }
    if (flags.lora_rank >= 0) cfg.stage3.lora_rank = flags.lora_rank;
    cfg.joint.adaptive_weights = flags.adaptive;
    return dispatch_precision(cfg, [&](auto tag) {
        using S = decltype(tag);
        CorpusSplit split = load_split(data_dir);
        auto vocab = make_vocabulary(cfg.behaviors, cfg.locations);
        const std::uint64_t seed = effective_seed(cfg);
        ModelBundle<S> models = init_models<S>(vocab, cfg.model, seed);
        OutputTracker out{out_dir, {}};

        if (flags.joint) {
            require(!encoder_ck.empty(), "train --joint requires --encoder CHECKPOINT");
            {
                NamedParams<S> params = models.all_params();
                load_params_from_checkpoint(params, read_checkpoint(encoder_ck), config_digest(cfg));
            }
            JointResult<S> r = run_joint(models, split.train, split.val, cfg.joint, seed);
            out.write("joint.buac", snapshot_checkpoint(models, cfg, "joint"));
            out.write("joint_curve.csv", curves_to_csv(r.curve));
            write_manifest(out.dir, "train", cfg, out.digests);
            std::printf("joint training done (%zu curve points)\n", r.curve.size());
            return 0;
        }

        require(!encoder_ck.empty(), "train requires --encoder CHECKPOINT (run pretrain-encoder first)");
        {
            NamedParams<S> params = models.all_params();
            load_params_from_checkpoint(params, read_checkpoint(encoder_ck), config_digest(cfg));
        }
        if (!init_ck.empty()) {
            NamedParams<S> params = models.all_params();
            load_params_from_checkpoint(params, read_checkpoint(init_ck), config_digest(cfg));
        }
        std::vector<CurvePoint> curves;
        auto run_single = [&](int stage_id) {
            const StageConfig& sc = stage_id == 1 ? cfg.stage1 : stage_id == 2 ? cfg.stage2 : cfg.stage3;
            auto build = [&](const std::vector<UserRecord>& users, std::uint64_t s) {
                if (stage_id == 1) return build_stage1_samples(models, users, cfg.sampler, s);
                if (stage_id == 2) return build_stage2_samples(models, users, cfg.sampler, s);
                return build_stage3_samples(models, users, cfg.sampler, s);
            };
            auto train = build(split.train, seed);
            auto val = build(split.val, seed + 1);
            StageResult<S> r = run_stage(sc, models, train, val, seed);
            curves.insert(curves.end(), r.curve.begin(), r.curve.end());
            if (stage_id == 3 && sc.lora_rank > 0) lora_merge(models.decoder);
            out.write("stage" + std::to_string(stage_id) + ".buac",
                      snapshot_checkpoint(models, cfg, "stage" + std::to_string(stage_id)));
            std::printf("stage %d best validation loss %.6f\n", stage_id, r.best_val);
        };
        if (flags.stage == "all") {
            run_single(1);
            run_single(2);
            run_single(3);
        } else if (flags.stage == "1" || flags.stage == "2" || flags.stage == "3") {
            run_single(std::stoi(flags.stage));
        } else {
            fail("--stage must be 1, 2, 3 or all, got '", flags.stage, "'");
        }
        out.write("curves.csv", curves_to_csv(curves));
        write_manifest(out.dir, "train", cfg, out.digests);
        return 0;
    });
}

int cmd_eval_predict(const RunConfig& cfg, const std::string& data_dir, const std::string& models_ck,
                     const std::string& out_path, bool longtail) {
    return dispatch_precision(cfg, [&](auto tag) {
        using S = decltype(tag);
        CorpusSplit split = load_split(data_dir);
        ModelBundle<S> models = load_models<S>(cfg, models_ck);
        const auto freq = frequency_table(split.train, cfg.behaviors);
        const auto partition = partition_categories(freq);
        const std::uint64_t seed = effective_seed(cfg);
        DialogueEvaluator<S> ev(models, cfg.eval, cfg.sampler.l2_horizon);
        std::vector<PredictionWindow> windows;
        if (longtail) {
            auto lt = metrics::build_longtail_testset(split.test, partition, cfg.sampler.l1_window,
                                                      cfg.eval.longtail_cap, seed);
            windows = std::move(lt.samples);
        } else {
            windows = eval_windows(split.test, cfg.sampler.l1_window, cfg.eval.max_windows, seed);
        }
        metrics::MetricsReport report;
        report.prediction = ev.eval_predict(windows, partition, majority_class(freq));
        const std::string bytes = canonical_json(report_to_json(report));
        atomic_write(out_path, bytes);
        write_manifest(fs::path(out_path).parent_path(), "eval-predict", cfg,
                       {{fs::path(out_path).filename().string(), digest_hex(bytes)}});
        std::printf("eval-predict: Rec_w=%.4f Prec_w=%.4f over %ld windows -> %s\n",
                    report.prediction->rec_w, report.prediction->prec_w,
                    report.prediction->samples, out_path.c_str());
        return 0;
    });
}

int cmd_eval_generate(const RunConfig& cfg, const std::string& data_dir, const std::string& models_ck,
                      const std::string& out_path) {
    return dispatch_precision(cfg, [&](auto tag) {
        using S = decltype(tag);
        CorpusSplit split = load_split(data_dir);
        ModelBundle<S> models = load_models<S>(cfg, models_ck);
        const std::uint64_t seed = effective_seed(cfg);
        DialogueEvaluator<S> ev(models, cfg.eval, cfg.sampler.l2_horizon);
        auto windows = eval_windows(split.test, cfg.sampler.l1_window, cfg.eval.gen_samples,
                                    seed + 7, cfg.sampler.l2_horizon);
        metrics::MetricsReport report;
        report.generation = ev.eval_generate(windows, cfg.sampler.l2_horizon, cfg.behaviors,
                                             cfg.locations);
        const std::string bytes = canonical_json(report_to_json(report));
        atomic_write(out_path, bytes);
        write_manifest(fs::path(out_path).parent_path(), "eval-generate", cfg,
                       {{fs::path(out_path).filename().string(), digest_hex(bytes)}});
        std::printf("eval-generate: event BLEU=%.4f TVD=%.4f JSD=%.4f -> %s\n",
                    report.generation->event.bleu, report.generation->event.tvd,
                    report.generation->event.jsd, out_path.c_str());
        return 0;
    });
}

int cmd_substitution(const RunConfig& cfg, const std::string& data_dir, const std::string& models_ck,
                     const std::string& out_path) {
    return dispatch_precision(cfg, [&](auto tag) {
        using S = decltype(tag);
        CorpusSplit split = load_split(data_dir);
        ModelBundle<S> models = load_models<S>(cfg, models_ck);
        const auto freq = frequency_table(split.train, cfg.behaviors);
        const auto partition = partition_categories(freq);
        const std::uint64_t seed = effective_seed(cfg);
        auto lt = metrics::build_longtail_testset(split.test, partition, cfg.sampler.l1_window,
                                                  cfg.eval.longtail_cap, seed);
        DialogueEvaluator<S> ev(models, cfg.eval, cfg.sampler.l2_horizon);
        metrics::MetricsReport report;
        report.substitution = ev.run_substitution(lt.samples);
        const std::string bytes = canonical_json(report_to_json(report));
        atomic_write(out_path, bytes);
        write_manifest(fs::path(out_path).parent_path(), "substitution-study", cfg,
                       {{fs::path(out_path).filename().string(), digest_hex(bytes)}});
        for (const auto& row : report.substitution->rows)
            std::printf("  %-18s acc=%.4f r2w=%.4f w2r=%.4f diff=%+0.4f\n", row.name.c_str(),
                        row.accuracy, row.r2w, row.w2r, row.difference);
        return 0;
    });
}

int cmd_compare_curriculum(const RunConfig& cfg, const std::string& data_dir,
                           const std::string& out_dir) {
    return dispatch_precision(cfg, [&](auto tag) {
        using S = decltype(tag);
        CorpusSplit split = load_split(data_dir);
        auto vocab = make_vocabulary(cfg.behaviors, cfg.locations);
        const std::uint64_t seed = effective_seed(cfg);

        ModelBundle<S> staged = init_models<S>(vocab, cfg.model, seed);
        auto pre = pretrain_encoder(staged.encoder, split.train, split.val, cfg.pretrain, seed);
        CurriculumConfig cur;
        cur.stage1 = cfg.stage1;
        cur.stage2 = cfg.stage2;
        cur.stage3 = cfg.stage3;
        cur.sampler = cfg.sampler;
        CurriculumResult<S> staged_result = run_curriculum(staged, split.train, split.val, cur, seed);

        ModelBundle<S> joint = init_models<S>(vocab, cfg.model, seed);
        {
            // same pretrained encoder for both arms
            NamedParams<S> src = staged.all_params();
            NamedParams<S> dst = joint.all_params();
            std::map<std::string, std::vector<S>> enc;
            for (auto& [name, t] : src)
                if (name.rfind("enc.", 0) == 0) enc[name] = t.data();
            for (auto& [name, t] : dst)
                if (enc.count(name)) t.data() = enc.at(name);
        }
        JointConfig jc = cfg.joint;
        jc.sampler = cfg.sampler;
        JointResult<S> joint_result = run_joint(joint, split.train, split.val, jc, seed);

        OutputTracker out{out_dir, {}};
        out.write("staged_curve.csv", curves_to_csv(staged_result.curve));
        out.write("joint_curve.csv", curves_to_csv(joint_result.curve));

        auto stage_val = [](const std::vector<CurvePoint>& curve, int stage, const std::string& task,
                            bool first) {
            std::optional<double> found;
            for (const auto& p : curve) {
                if (p.stage != stage || p.split != "val" || p.task != task) continue;
                found = p.loss;
                if (first) break;
            }
            require(found.has_value(), "compare-curriculum: no val curve for stage ", stage);
            return *found;
        };
        Json cmp;
        cmp["staged_stage3_initial_val"] = stage_val(staged_result.curve, 3, "self_reflect", true);
        cmp["joint_stage3_initial_val"] = stage_val(joint_result.curve, 3, "stage3", true);
        cmp["staged_stage2_final_val"] = stage_val(staged_result.curve, 2, "all", false);
        cmp["joint_stage2_final_val"] = stage_val(joint_result.curve, 2, "stage2", false);
        cmp["staged_lower_stage3_start"] =
            cmp["staged_stage3_initial_val"].get<double>() < cmp["joint_stage3_initial_val"].get<double>();
        cmp["staged_le_stage2_final"] =
            cmp["staged_stage2_final_val"].get<double>() <= cmp["joint_stage2_final_val"].get<double>();
        out.write("comparison.json", canonical_json(cmp));
        write_manifest(out.dir, "compare-curriculum", cfg, out.digests);
        std::printf("staged stage-3 initial val %.4f vs joint %.4f\n",
                    cmp["staged_stage3_initial_val"].get<double>(),
                    cmp["joint_stage3_initial_val"].get<double>());
        return 0;
    });
}

int cmd_inspect(const RunConfig& cfg, const std::string& data_dir, std::uint64_t user_id,
                int n_samples) {
    CorpusSplit split = load_split(data_dir);
    const UserRecord* user = nullptr;
    for (const auto& part : {&split.train, &split.val, &split.test})
        for (const auto& u : *part)
            if (u.user_id == user_id) user = &u;
    require(user != nullptr, "inspect: user ", user_id, " not found in ", data_dir);
    auto vocab = make_vocabulary(cfg.behaviors, cfg.locations);
    DialogueVocabulary dv(vocab);
    std::printf("user %llu: %zu events over %d days\n",
                static_cast<unsigned long long>(user_id), user->events.size(),
                user->events.back().abs_day + 1);
    std::printf("home loc %d, work loc %d\n", user->truth.home_loc, user->truth.work_loc);
    std::printf("hobbies:");
    for (int h : user->truth.hobbies)
        std::printf(" %s", vocab.behavior_names[static_cast<std::size_t>(h)].c_str());
    std::printf("\nfeature summary:\n ");
    for (const auto& tok : user->truth.feature_summary) std::printf(" %s", tok.c_str());
    std::printf("\npatterns:\n");
    for (const auto& p : user->truth.patterns)
        std::printf("  %s -> %s in %s (support %.2f)\n",
                    vocab.behavior_names[static_cast<std::size_t>(p.trigger)].c_str(),
                    vocab.behavior_names[static_cast<std::size_t>(p.consequent)].c_str(),
                    slot_bands()[static_cast<std::size_t>(p.timing_band)].name, p.support);
    RenderOptions ropt;
    ropt.prefix_k = cfg.model.prefix_k;
    ropt.l2_horizon = cfg.sampler.l2_horizon;
    RandomStream rng = RandomStream::derive(effective_seed(cfg), "inspect");
    for (int i = 0; i < n_samples; ++i) {
        PredictionWindow w = random_window(*user, cfg.sampler.l1_window, rng);
        DialogueSample dlg = assemble_stage2_dialogue(*user, w, TaskKind::PredictNext, user->truth,
                                                      dv, ropt);
        std::printf("\ndialogue %d (window at %d):\n", i, w.begin);
        for (const auto& round : dlg.rounds) {
            std::printf("  [%s]\n   I:", task_name(round.task));
            for (int t : round.instruction) std::printf(" %s", dv.token_name(t).c_str());
            std::printf("\n   A:");
            for (int t : round.answer) std::printf(" %s", dv.token_name(t).c_str());
            std::printf("\n");
        }
    }
    return 0;
}

int cmd_report(const std::vector<std::string>& inputs, const std::string& out_path) {
    require(!inputs.empty(), "report: no input metric files");
    std::string csv = "file,metric,value\n";
    for (const auto& path : inputs) {
        Json j;
        try {
            j = Json::parse(read_file(path));
        } catch (const std::exception& e) {
            fail("report: ", path, ": invalid JSON (", e.what(), ")");
        }
        const std::string name = fs::path(path).filename().string();
        std::function<void(const Json&, const std::string&)> walk =
            [&](const Json& node, const std::string& prefix) {
                if (node.is_object()) {
                    for (auto it = node.begin(); it != node.end(); ++it)
                        walk(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key());
                } else if (node.is_array()) {
                    int i = 0;
                    for (const auto& v : node) walk(v, prefix + "[" + std::to_string(i++) + "]");
                } else if (node.is_number()) {
                    char buf[64];
                    std::snprintf(buf, sizeof(buf), "%.17g", node.get<double>());
                    csv += name + "," + prefix + "," + buf + "\n";
                } else if (node.is_string()) {
                    csv += name + "," + prefix + "," + node.get<std::string>() + "\n";
                }
            };
        walk(j, "");
    }
    atomic_write(out_path, csv);
    std::printf("wrote %s\n", out_path.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Behavior-sequence curriculum training and evaluation"};
    app.require_subcommand(1);

    std::string config_path, data_dir, out_dir, out_path, encoder_ck, init_ck, models_ck;
    bool paper_preset = false, longtail = false;
    std::optional<std::uint64_t> seed_flag;
    TrainFlags train_flags;
    std::uint64_t user_id = 0;
    int n_samples = 1;
    std::vector<std::string> report_inputs;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "JSON config file");
        cmd->add_flag("--preset-paper", paper_preset, "use full-scale hyperparameter preset");
        cmd->add_option("--seed", seed_flag, "override config seed");
    };

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic labeled corpus");
    add_common(gen);
    gen->add_option("--out", out_dir, "output directory")->required();

    auto* pre = app.add_subcommand("pretrain-encoder", "pretrain the behavior encoder");
    add_common(pre);
    pre->add_option("--data", data_dir, "corpus directory")->required();
    pre->add_option("--out", out_dir, "output directory")->required();

    auto* train = app.add_subcommand("train", "run curriculum stages");
    add_common(train);
    train->add_option("--data", data_dir, "corpus directory")->required();
    train->add_option("--encoder", encoder_ck, "pretrained encoder checkpoint");
    train->add_option("--init", init_ck, "warm-start checkpoint (e.g. a previous stage)");
    train->add_option("--out", out_dir, "output directory")->required();
    train->add_option("--stage", train_flags.stage, "1|2|3|all (default all)");
    train->add_option("--loss", train_flags.loss, "stage-2 loss: balanced|unbalanced");
    train->add_flag("--joint", train_flags.joint, "joint training over all stage tasks");
    train->add_flag("--adaptive-weights", train_flags.adaptive, "adaptive task weighting (joint)");
    train->add_option("--lora", train_flags.lora_rank, "LoRA rank for stage 3 (0 = full tuning)");

    auto* evp = app.add_subcommand("eval-predict", "next-behavior prediction metrics");
    add_common(evp);
    evp->add_option("--data", data_dir, "corpus directory")->required();
    evp->add_option("--models", models_ck, "model checkpoint")->required();
    evp->add_option("--out", out_path, "metrics JSON path")->required();
    evp->add_flag("--longtail", longtail, "evaluate on the per-class-capped long-tail set");

    auto* evg = app.add_subcommand("eval-generate", "sequence generation metrics");
    add_common(evg);
    evg->add_option("--data", data_dir, "corpus directory")->required();
    evg->add_option("--models", models_ck, "model checkpoint")->required();
    evg->add_option("--out", out_path, "metrics JSON path")->required();

    auto* sub = app.add_subcommand("substitution-study", "error-source analysis");
    add_common(sub);
    sub->add_option("--data", data_dir, "corpus directory")->required();
    sub->add_option("--models", models_ck, "model checkpoint")->required();
    sub->add_option("--out", out_path, "metrics JSON path")->required();

    auto* cmp = app.add_subcommand("compare-curriculum", "staged vs joint training comparison");
    add_common(cmp);
    cmp->add_option("--data", data_dir, "corpus directory")->required();
    cmp->add_option("--out", out_dir, "output directory")->required();

    auto* ins = app.add_subcommand("inspect", "decode summaries and dialogues for a user");
    add_common(ins);
    ins->add_option("--data", data_dir, "corpus directory")->required();
    ins->add_option("--user", user_id, "user id")->required();
    ins->add_option("--samples", n_samples, "dialogues to print");

    auto* rep = app.add_subcommand("report", "merge metric JSONs into a CSV table");
    rep->add_option("--inputs", report_inputs, "metric JSON files")->required();
    rep->add_option("--out", out_path, "output CSV")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(load_config(config_path, paper_preset, seed_flag), out_dir);
        if (pre->parsed())
            return cmd_pretrain(load_config(config_path, paper_preset, seed_flag), data_dir, out_dir);
        if (train->parsed())
            return cmd_train(load_config(config_path, paper_preset, seed_flag), data_dir, encoder_ck,
                             init_ck, out_dir, train_flags);
        if (evp->parsed())
            return cmd_eval_predict(load_config(config_path, paper_preset, seed_flag), data_dir,
                                    models_ck, out_path, longtail);
        if (evg->parsed())
            return cmd_eval_generate(load_config(config_path, paper_preset, seed_flag), data_dir,
                                     models_ck, out_path);
        if (sub->parsed())
            return cmd_substitution(load_config(config_path, paper_preset, seed_flag), data_dir,
                                    models_ck, out_path);
        if (cmp->parsed())
            return cmd_compare_curriculum(load_config(config_path, paper_preset, seed_flag), data_dir,
                                          out_dir);
        if (ins->parsed())
            return cmd_inspect(load_config(config_path, paper_preset, seed_flag), data_dir, user_id,
                               n_samples);
        if (rep->parsed()) return cmd_report(report_inputs, out_path);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
