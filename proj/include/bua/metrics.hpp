#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "bua/common.hpp"
#include "bua/core.hpp"
#include "bua/dialogue.hpp"
#include "bua/rng.hpp"

namespace bua {
namespace metrics {

// Malformed predictions are charged as false positives against a reserved
// non-class so they are never true positives anywhere.
constexpr int kMalformedClass = -1;

struct ConfusionCounts {
    std::map<int, long> tp, fp, fn;
    std::set<int> classes;  // C: real classes observed in preds or labels
    long samples = 0;
    long malformed = 0;

    long tp_of(int c) const {
        auto it = tp.find(c);
        return it == tp.end() ? 0 : it->second;
    }
    long fp_of(int c) const {
        auto it = fp.find(c);
        return it == fp.end() ? 0 : it->second;
    }
    long fn_of(int c) const {
        auto it = fn.find(c);
        return it == fn.end() ? 0 : it->second;
    }
    long support(int c) const { return tp_of(c) + fn_of(c); }
};

// preds entries are behavior ids, or kMalformedClass for unparseable output.
inline ConfusionCounts confusion(const std::vector<int>& preds, const std::vector<int>& labels) {
    require(!preds.empty(), "confusion: empty input");
    require(preds.size() == labels.size(), "confusion: ", preds.size(), " predictions vs ",
            labels.size(), " labels");
    ConfusionCounts cc;
    cc.samples = static_cast<long>(preds.size());
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const int p = preds[i], y = labels[i];
        require(y >= 0, "confusion: negative label");
        cc.classes.insert(y);
        if (p == kMalformedClass) {
            ++cc.malformed;
            ++cc.fp[kMalformedClass];
            ++cc.fn[y];
            continue;
        }
        cc.classes.insert(p);
        if (p == y) {
            ++cc.tp[p];
        } else {
            ++cc.fp[p];
            ++cc.fn[y];
        }
    }
    return cc;
}

// Support-weighted recall (micro accuracy; equivalent to HR@1).
inline double weighted_recall(const ConfusionCounts& cc) {
    require(cc.samples >= 1, "weighted_recall: no samples");
    double num = 0, den = 0;
    for (int c : cc.classes) {
        const long sup = cc.support(c);
        if (sup == 0) continue;
        const double recall = static_cast<double>(cc.tp_of(c)) / static_cast<double>(sup);
        num += static_cast<double>(sup) * recall;
        den += static_cast<double>(sup);
    }
    return den > 0 ? num / den : 0.0;
}

// Literal reading: precision weighted by predicted counts TP+FP, which
// algebraically collapses to micro accuracy.
inline double weighted_precision_eq7(const ConfusionCounts& cc) {
    require(cc.samples >= 1, "weighted_precision_eq7: no samples");
    double num = 0, den = 0;
    for (int c : cc.classes) {
        const long pred = cc.tp_of(c) + cc.fp_of(c);
        if (pred == 0) continue;
        const double precision = static_cast<double>(cc.tp_of(c)) / static_cast<double>(pred);
        num += static_cast<double>(pred) * precision;
        den += static_cast<double>(pred);
    }
    return den > 0 ? num / den : 0.0;
}

// Default reported Prec_w: precision weighted by class support. Classes that
// were never predicted have undefined precision and contribute zero weight.
inline double weighted_precision_support(const ConfusionCounts& cc) {
    require(cc.samples >= 1, "weighted_precision_support: no samples");
    double num = 0, den = 0;
    for (int c : cc.classes) {
        const long pred = cc.tp_of(c) + cc.fp_of(c);
        const long sup = cc.support(c);
        if (pred == 0 || sup == 0) continue;
        const double precision = static_cast<double>(cc.tp_of(c)) / static_cast<double>(pred);
        num += static_cast<double>(sup) * precision;
        den += static_cast<double>(sup);
    }
    return den > 0 ? num / den : 0.0;
}

struct CategoryAccuracies {
    std::optional<double> overall, head, medium, tail;
    long support_head = 0, support_medium = 0, support_tail = 0;
};

// Macro-averaged per-class recall over classes with test support; categories
// with no supported class report absent rather than zero.
inline CategoryAccuracies category_accuracies(const ConfusionCounts& cc,
                                              const CategoryPartition& partition) {
    auto macro = [&](auto&& member) -> std::optional<double> {
        double total = 0;
        int n = 0;
        for (int c : cc.classes) {
            if (cc.support(c) == 0) continue;
            if (!member(c)) continue;
            total += static_cast<double>(cc.tp_of(c)) / static_cast<double>(cc.support(c));
            ++n;
        }
        if (n == 0) return std::nullopt;
        return total / n;
    };
    CategoryAccuracies out;
    out.overall = macro([](int) { return true; });
    out.head = macro([&](int c) { return partition.head.count(c) > 0; });
    out.medium = macro([&](int c) { return partition.medium.count(c) > 0; });
    out.tail = macro([&](int c) { return partition.tail.count(c) > 0; });
    for (int c : cc.classes) {
        if (partition.head.count(c)) out.support_head += cc.support(c);
        if (partition.medium.count(c)) out.support_medium += cc.support(c);
        if (partition.tail.count(c)) out.support_tail += cc.support(c);
    }
    return out;
}

// ---- long-tail test set ----------------------------------------------------

struct LongTailTestSet {
    std::vector<PredictionWindow> samples;
    CategoryPartition partition;  // computed from TRAIN frequencies
};

// Stratified per-class downsampling of prediction windows to at most `cap`
// per target class, deterministic under seed.
inline LongTailTestSet build_longtail_testset(const std::vector<UserRecord>& test_users,
                                              const CategoryPartition& train_partition, int l1,
                                              int cap, std::uint64_t seed, int reserve_after = 1) {
    require(cap >= 1, "build_longtail_testset: cap must be >= 1");
    std::map<int, std::vector<PredictionWindow>> by_class;
    for (const auto& user : test_users) {
        for (auto& w : prediction_windows(user, l1)) {
            if (w.target_index() + reserve_after > static_cast<int>(user.events.size())) continue;
            by_class[w.target].push_back(w);
        }
    }
    LongTailTestSet out;
    out.partition = train_partition;
    RandomStream rng = RandomStream::derive(seed, "longtail");
    for (auto& [cls, windows] : by_class) {
        RandomStream crng = rng.derive("class/" + std::to_string(cls));
        for (std::size_t i = windows.size(); i > 1; --i)
            std::swap(windows[i - 1], windows[static_cast<std::size_t>(crng.uniform_int(0, static_cast<int>(i) - 1))]);
        const std::size_t take = std::min<std::size_t>(windows.size(), static_cast<std::size_t>(cap));
        for (std::size_t i = 0; i < take; ++i) out.samples.push_back(windows[i]);
    }
    return out;
}

// ---- generation metrics ------------------------------------------------------

namespace detail {

using Ngram = std::vector<int>;

inline std::map<Ngram, long> ngram_counts(const std::vector<int>& seq, int n) {
    std::map<Ngram, long> counts;
    if (static_cast<int>(seq.size()) < n) return counts;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= seq.size(); ++i)
        ++counts[Ngram(seq.begin() + static_cast<std::ptrdiff_t>(i),
                       seq.begin() + static_cast<std::ptrdiff_t>(i) + n)];
    return counts;
}

struct BleuAccumulator {
    std::vector<long> matched;  // clipped n-gram matches per order
    std::vector<long> total;    // candidate n-gram counts per order
    long candidate_len = 0;
    long reference_len = 0;
    int max_order() const { return static_cast<int>(matched.size()); }

    void add(const std::vector<int>& candidate, const std::vector<int>& reference, int n_max) {
        if (static_cast<int>(matched.size()) < n_max) {
            matched.resize(static_cast<std::size_t>(n_max), 0);
            total.resize(static_cast<std::size_t>(n_max), 0);
        }
        candidate_len += static_cast<long>(candidate.size());
        reference_len += static_cast<long>(reference.size());
        for (int n = 1; n <= n_max; ++n) {
            auto cand = ngram_counts(candidate, n);
            auto ref = ngram_counts(reference, n);
            for (const auto& [gram, count] : cand) {
                total[static_cast<std::size_t>(n - 1)] += count;
                auto it = ref.find(gram);
                if (it != ref.end())
                    matched[static_cast<std::size_t>(n - 1)] += std::min(count, it->second);
            }
        }
    }

    // Geometric mean of modified precisions over orders 1..n_eff with uniform
    // weights; any zero precision zeroes the score. BP = min(1, e^{1 - r/c}).
    double score(int n_eff) const {
        if (candidate_len == 0 || reference_len == 0 || n_eff < 1) return 0.0;
        double log_sum = 0;
        for (int n = 1; n <= n_eff; ++n) {
            const long t = total[static_cast<std::size_t>(n - 1)];
            const long m = matched[static_cast<std::size_t>(n - 1)];
            if (t == 0 || m == 0) return 0.0;
            log_sum += std::log(static_cast<double>(m) / static_cast<double>(t)) / n_eff;
        }
        const double bp = std::min(raw_bp(), 1.0);
        return bp * std::exp(log_sum);
    }

    double raw_bp() const {
        return std::exp(1.0 - static_cast<double>(reference_len) / static_cast<double>(candidate_len));
    }
};

}  // namespace detail

// Sentence-level BLEU with N clipped to the shorter sequence.
inline double bleu(const std::vector<int>& candidate, const std::vector<int>& reference, int n = 4) {
    require(!candidate.empty() && !reference.empty(), "bleu: empty input sequence");
    const int n_eff = std::min<int>({n, static_cast<int>(candidate.size()), static_cast<int>(reference.size())});
    detail::BleuAccumulator acc;
    acc.add(candidate, reference, n_eff);
    return acc.score(n_eff);
}

inline void check_distribution(std::span<const double> p, const char* name) {
    double total = 0;
    for (double v : p) {
        require(v >= 0.0, name, ": negative probability");
        total += v;
    }
    require(std::abs(total - 1.0) <= 1e-6, name, ": distribution sums to ", total, ", not 1");
}

inline double tvd(std::span<const double> p, std::span<const double> q) {
    require(p.size() == q.size(), "tvd: supports differ (", p.size(), " vs ", q.size(), ")");
    check_distribution(p, "tvd");
    check_distribution(q, "tvd");
    double acc = 0;
    for (std::size_t i = 0; i < p.size(); ++i) acc += std::abs(p[i] - q[i]);
    return 0.5 * acc;
}

// Square-root Jensen-Shannon divergence against the midpoint, base-2 logs so
// the value lives in [0, 1].
inline double jsd(std::span<const double> p, std::span<const double> q) {
    require(p.size() == q.size(), "jsd: supports differ (", p.size(), " vs ", q.size(), ")");
    check_distribution(p, "jsd");
    check_distribution(q, "jsd");
    auto kl_to_mid = [&](std::span<const double> a, std::span<const double> b) {
        double acc = 0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            if (a[i] <= 0.0) continue;
            const double m = 0.5 * (a[i] + b[i]);
            acc += a[i] * std::log2(a[i] / m);
        }
        return acc;
    };
    const double inner = 0.5 * kl_to_mid(p, q) + 0.5 * kl_to_mid(q, p);
    return std::sqrt(std::max(0.0, inner));
}

// ---- corpus-level generation evaluation ---------------------------------------

struct ChannelMetrics {
    double bleu = 0.0;
    double tvd = 0.0;
    double jsd = 0.0;
};

struct GenerationReport {
    ChannelMetrics event;      // behavior ids
    ChannelMetrics timestamp;  // slot ids
    ChannelMetrics location;   // location ids
    long samples = 0;
    long malformed = 0;
};

struct GenerationEvalOptions {
    int bleu_n = 4;
    bool per_sample_divergences = false;  // corpus-level marginals by default
    int behaviors = 37;
    int locations = 20;
};

inline GenerationReport evaluate_generation(const std::vector<ParsedGeneration>& candidates,
                                            const std::vector<std::vector<BehaviorEvent>>& references,
                                            const GenerationEvalOptions& opt) {
    require(candidates.size() == references.size(), "evaluate_generation: ", candidates.size(),
            " candidates vs ", references.size(), " references");
    require(!candidates.empty(), "evaluate_generation: no samples");
    GenerationReport report;
    report.samples = static_cast<long>(candidates.size());

    enum { kEvent = 0, kSlot = 1, kLoc = 2 };
    const std::array<int, 3> support{opt.behaviors, kSlotsPerDay, opt.locations};
    std::array<detail::BleuAccumulator, 3> acc;
    std::array<std::vector<double>, 3> cand_hist, ref_hist;
    std::array<std::vector<double>, 3> per_sample_tvd, per_sample_jsd;
    for (int ch = 0; ch < 3; ++ch) {
        cand_hist[static_cast<std::size_t>(ch)].assign(static_cast<std::size_t>(support[static_cast<std::size_t>(ch)]), 0.0);
        ref_hist[static_cast<std::size_t>(ch)].assign(static_cast<std::size_t>(support[static_cast<std::size_t>(ch)]), 0.0);
    }
    auto channel_of = [](const std::vector<BehaviorEvent>& events, int ch) {
        std::vector<int> seq;
        seq.reserve(events.size());
        for (const auto& ev : events)
            seq.push_back(ch == kEvent ? ev.behavior : ch == kSlot ? ev.slot : ev.loc);
        return seq;
    };
    int n_eff = opt.bleu_n;
    long parseable = 0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        if (std::holds_alternative<Malformed>(candidates[i])) {
            ++report.malformed;
            continue;
        }
        const auto& cand_events = std::get<std::vector<BehaviorEvent>>(candidates[i]);
        if (cand_events.empty()) {
            ++report.malformed;
            continue;
        }
        ++parseable;
        const auto& ref_events = references[i];
        require(!ref_events.empty(), "evaluate_generation: empty reference at sample ", i);
        n_eff = std::min<int>({n_eff, static_cast<int>(cand_events.size()), static_cast<int>(ref_events.size())});
        for (int ch = 0; ch < 3; ++ch) {
            const auto cand_seq = channel_of(cand_events, ch);
            const auto ref_seq = channel_of(ref_events, ch);
            acc[static_cast<std::size_t>(ch)].add(cand_seq, ref_seq, opt.bleu_n);
            for (int v : cand_seq) cand_hist[static_cast<std::size_t>(ch)][static_cast<std::size_t>(v)] += 1.0;
            for (int v : ref_seq) ref_hist[static_cast<std::size_t>(ch)][static_cast<std::size_t>(v)] += 1.0;
            if (opt.per_sample_divergences) {
                std::vector<double> cp(static_cast<std::size_t>(support[static_cast<std::size_t>(ch)]), 0.0);
                std::vector<double> rp = cp;
                for (int v : cand_seq) cp[static_cast<std::size_t>(v)] += 1.0 / cand_seq.size();
                for (int v : ref_seq) rp[static_cast<std::size_t>(v)] += 1.0 / ref_seq.size();
                per_sample_tvd[static_cast<std::size_t>(ch)].push_back(tvd(cp, rp));
                per_sample_jsd[static_cast<std::size_t>(ch)].push_back(jsd(cp, rp));
            }
        }
    }
    require(parseable > 0, "evaluate_generation: zero parseable candidates");
    auto finish = [&](int ch) {
        ChannelMetrics m;
        m.bleu = acc[static_cast<std::size_t>(ch)].score(n_eff);
        if (opt.per_sample_divergences) {
            double st = 0, sj = 0;
            for (double v : per_sample_tvd[static_cast<std::size_t>(ch)]) st += v;
            for (double v : per_sample_jsd[static_cast<std::size_t>(ch)]) sj += v;
            m.tvd = st / static_cast<double>(parseable);
            m.jsd = sj / static_cast<double>(parseable);
        } else {
            auto normalize = [](std::vector<double> h) {
                double total = 0;
                for (double v : h) total += v;
                if (total > 0)
                    for (auto& v : h) v /= total;
                // guard against accumulated rounding drift
                double s = 0;
                for (double v : h) s += v;
                if (s > 0 && s != 1.0)
                    for (auto& v : h) v /= s;
                return h;
            };
            const auto cp = normalize(cand_hist[static_cast<std::size_t>(ch)]);
            const auto rp = normalize(ref_hist[static_cast<std::size_t>(ch)]);
            m.tvd = tvd(cp, rp);
            m.jsd = jsd(cp, rp);
        }
        return m;
    };
    report.event = finish(kEvent);
    report.timestamp = finish(kSlot);
    report.location = finish(kLoc);
    return report;
}

// ---- substitution study (error-source analysis) --------------------------------

struct SubstitutionConfig {
    std::array<bool, 3> use_label;  // per understanding round: ground truth vs model output
    std::string name;
};

inline std::vector<SubstitutionConfig> default_substitution_configs() {
    return {
        {{false, false, false}, "pred,pred,pred"},
        {{true, false, false}, "label,pred,pred"},
        {{true, true, false}, "label,label,pred"},
        {{true, true, true}, "label,label,label"},
    };
}

struct SubstitutionRow {
    std::string name;
    double accuracy = 0.0;
    long correct = 0;
    double r2w = 0.0;  // fraction right -> wrong vs previous config
    double w2r = 0.0;
    double difference = 0.0;  // w2r - r2w
    long r2w_count = 0;
    long w2r_count = 0;
};

struct SubstitutionReport {
    std::vector<SubstitutionRow> rows;
    long samples = 0;
};

// `run_config` maps a substitution config to per-sample correctness.
template <class Fn>
SubstitutionReport substitution_study(const std::vector<SubstitutionConfig>& configs, long n_samples,
                                      Fn&& run_config) {
    require(!configs.empty(), "substitution_study: no configs");
    require(n_samples > 0, "substitution_study: no samples");
    SubstitutionReport report;
    report.samples = n_samples;
    std::vector<char> prev;
    for (const auto& cfg : configs) {
        std::vector<char> correct = run_config(cfg);
        require(static_cast<long>(correct.size()) == n_samples,
                "substitution_study: config returned wrong sample count");
        SubstitutionRow row;
        row.name = cfg.name;
        for (char c : correct) row.correct += c ? 1 : 0;
        row.accuracy = static_cast<double>(row.correct) / static_cast<double>(n_samples);
        if (!prev.empty()) {
            for (long i = 0; i < n_samples; ++i) {
                if (prev[static_cast<std::size_t>(i)] && !correct[static_cast<std::size_t>(i)]) ++row.r2w_count;
                if (!prev[static_cast<std::size_t>(i)] && correct[static_cast<std::size_t>(i)]) ++row.w2r_count;
            }
            row.r2w = static_cast<double>(row.r2w_count) / static_cast<double>(n_samples);
            row.w2r = static_cast<double>(row.w2r_count) / static_cast<double>(n_samples);
            row.difference = static_cast<double>(row.w2r_count - row.r2w_count) /
                             static_cast<double>(n_samples);
        }
        report.rows.push_back(row);
        prev = std::move(correct);
    }
    return report;
}

// ---- report container ----------------------------------------------------------

struct PredictionReport {
    double rec_w = 0.0;
    double prec_w = 0.0;       // support-weighted (default reported)
    double prec_w_eq7 = 0.0;   // literal predicted-count weighting
    std::optional<double> overall, head, medium, tail;
    long support_head = 0, support_medium = 0, support_tail = 0;
    long samples = 0;
    long malformed = 0;
    double majority_baseline = 0.0;
};

struct MetricsReport {
    std::optional<PredictionReport> prediction;
    std::optional<GenerationReport> generation;
    std::optional<SubstitutionReport> substitution;
};

}  // namespace metrics
}  // namespace bua
