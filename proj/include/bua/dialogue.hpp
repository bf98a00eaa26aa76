#pragma once

#include <array>
#include <string>
#include <variant>
#include <vector>

#include "bua/catalog.hpp"
#include "bua/common.hpp"
#include "bua/core.hpp"
#include "bua/rng.hpp"
#include "bua/synthgen.hpp"

namespace bua {

enum class TaskKind : int {
    ReconstructHistory = 0,
    SummarizeCurrentScene = 1,
    InferFutureScene = 2,
    IdentifyHomeWork = 3,
    InferHobby = 4,
    KeyBehaviorID = 5,
    PatternDiscovery = 6,
    FeatureSummary = 7,
    SelfReflect = 8,
    PredictNext = 9,
    GenerateFuture = 10,
};

constexpr int kTaskKindCount = 11;

inline const char* task_name(TaskKind k) {
    static const std::array<const char*, kTaskKindCount> names{
        "reconstruct_history", "summarize_current_scene", "infer_future_scene",
        "identify_home_work",  "infer_hobby",             "key_behavior_id",
        "pattern_discovery",   "feature_summary",         "self_reflect",
        "predict_next",        "generate_future"};
    return names[static_cast<std::size_t>(k)];
}

inline const std::array<TaskKind, 5>& stage1_tasks() {
    static const std::array<TaskKind, 5> t{TaskKind::ReconstructHistory, TaskKind::SummarizeCurrentScene,
                                           TaskKind::InferFutureScene, TaskKind::IdentifyHomeWork,
                                           TaskKind::InferHobby};
    return t;
}

inline const std::array<TaskKind, 3>& stage2_understanding_tasks() {
    static const std::array<TaskKind, 3> t{TaskKind::KeyBehaviorID, TaskKind::PatternDiscovery,
                                           TaskKind::FeatureSummary};
    return t;
}

enum class TokenRole {
    Control,
    TaskTag,
    Generic,
    Day,
    Slot,
    Loc,
    Behavior,
    Scene,
    Category,
    Timing,
    Freq,
    Defect,
    Digit,
};

// Closed symbolic token set; ids are stable for a fixed (B, L) configuration.
class DialogueVocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kSep = 3;
    static constexpr int kEmb = 4;

    DialogueVocabulary() = default;
    explicit DialogueVocabulary(const BehaviorVocabulary& vocab)
        : behaviors_(vocab.behaviors()), locations_(vocab.location_count),
          behavior_names_(vocab.behavior_names) {
        task_base_ = 5;
        generic_ = task_base_ + kTaskKindCount;
        day_base_ = generic_ + 1;
        slot_base_ = day_base_ + kDaysPerWeek;
        loc_base_ = slot_base_ + kSlotsPerDay;
        behavior_base_ = loc_base_ + locations_;
        scene_base_ = behavior_base_ + behaviors_;
        category_base_ = scene_base_ + kSceneCount;
        timing_base_ = category_base_ + kCategoryCount;
        freq_base_ = timing_base_ + kBandCount;
        defect_base_ = freq_base_ + 4;
        digit_base_ = defect_base_ + kDefectKindCount;
        total_ = digit_base_ + 10;
    }

    int size() const { return total_; }
    int behaviors() const { return behaviors_; }
    int locations() const { return locations_; }

    int task_tag(TaskKind k) const { return task_base_ + static_cast<int>(k); }
    int generic() const { return generic_; }
    int day_token(int d) const { return checked(day_base_ + d, day_base_, kDaysPerWeek, "day"); }
    int slot_token(int s) const { return checked(slot_base_ + s, slot_base_, kSlotsPerDay, "slot"); }
    int loc_token(int l) const { return checked(loc_base_ + l, loc_base_, locations_, "loc"); }
    int behavior_token(int b) const { return checked(behavior_base_ + b, behavior_base_, behaviors_, "behavior"); }
    int scene_token(int s) const { return checked(scene_base_ + s, scene_base_, kSceneCount, "scene"); }
    int category_token(int c) const { return checked(category_base_ + c, category_base_, kCategoryCount, "category"); }
    int timing_token(int band) const { return checked(timing_base_ + band, timing_base_, kBandCount, "band"); }
    int freq_token(int bucket) const { return checked(freq_base_ + bucket, freq_base_, 4, "freq bucket"); }
    int defect_token(DefectKind k) const { return defect_base_ + static_cast<int>(k); }
    int digit_token(int d) const { return checked(digit_base_ + d, digit_base_, 10, "digit"); }

    TokenRole role_of(int t) const {
        require(t >= 0 && t < total_, "role_of: token ", t, " out of range");
        if (t < task_base_) return TokenRole::Control;
        if (t < generic_) return TokenRole::TaskTag;
        if (t < day_base_) return TokenRole::Generic;
        if (t < slot_base_) return TokenRole::Day;
        if (t < loc_base_) return TokenRole::Slot;
        if (t < behavior_base_) return TokenRole::Loc;
        if (t < scene_base_) return TokenRole::Behavior;
        if (t < category_base_) return TokenRole::Scene;
        if (t < timing_base_) return TokenRole::Category;
        if (t < freq_base_) return TokenRole::Timing;
        if (t < defect_base_) return TokenRole::Freq;
        if (t < digit_base_) return TokenRole::Defect;
        return TokenRole::Digit;
    }

    int day_of(int t) const { return t - day_base_; }
    int slot_of(int t) const { return t - slot_base_; }
    int loc_of(int t) const { return t - loc_base_; }
    int behavior_of(int t) const { return t - behavior_base_; }
    int scene_of(int t) const { return t - scene_base_; }

    // Summary tokens are symbolic strings in UserRecord ground truth; map
    // them into this vocabulary.
    int summary_token_id(const std::string& tok) const {
        if (tok == "generic_profile") return generic_;
        if (tok.rfind("cat:", 0) == 0) {
            for (int c = 0; c < kCategoryCount; ++c)
                if (tok.compare(4, std::string::npos, category_names()[static_cast<std::size_t>(c)]) == 0)
                    return category_token(c);
        } else if (tok.rfind("b:", 0) == 0) {
            for (int b = 0; b < behaviors_; ++b)
                if (tok.compare(2, std::string::npos, behavior_names_[static_cast<std::size_t>(b)]) == 0)
                    return behavior_token(b);
        } else if (tok.rfind("time:", 0) == 0) {
            for (int b = 0; b < kBandCount; ++b)
                if (tok.compare(5, std::string::npos, slot_bands()[static_cast<std::size_t>(b)].name) == 0)
                    return timing_token(b);
        } else if (tok.rfind("freq:", 0) == 0) {
            for (int f = 0; f < 4; ++f)
                if (tok.compare(5, std::string::npos, freq_bucket_names()[static_cast<std::size_t>(f)]) == 0)
                    return freq_token(f);
        }
        fail("summary_token_id: unknown summary token '", tok, "'");
    }

    std::string token_name(int t) const {
        switch (role_of(t)) {
            case TokenRole::Control: {
                static const std::array<const char*, 5> c{"<pad>", "<bos>", "<eos>", "<sep>", "<emb>"};
                return c[static_cast<std::size_t>(t)];
            }
            case TokenRole::TaskTag:
                return std::string("task:") + task_name(static_cast<TaskKind>(t - task_base_));
            case TokenRole::Generic: return "generic_profile";
            case TokenRole::Day: return "day:" + std::to_string(t - day_base_);
            case TokenRole::Slot: return "slot:" + std::to_string(t - slot_base_);
            case TokenRole::Loc: return "loc:" + std::to_string(t - loc_base_);
            case TokenRole::Behavior:
                return "b:" + behavior_names_[static_cast<std::size_t>(t - behavior_base_)];
            case TokenRole::Scene:
                return std::string("scene:") + scene_names()[static_cast<std::size_t>(t - scene_base_)];
            case TokenRole::Category:
                return std::string("cat:") + category_names()[static_cast<std::size_t>(t - category_base_)];
            case TokenRole::Timing:
                return std::string("time:") + slot_bands()[static_cast<std::size_t>(t - timing_base_)].name;
            case TokenRole::Freq:
                return std::string("freq:") + freq_bucket_names()[static_cast<std::size_t>(t - freq_base_)];
            case TokenRole::Defect:
                return std::string("defect:") +
                       defect_kind_name(static_cast<DefectKind>(t - defect_base_));
            case TokenRole::Digit: return "digit:" + std::to_string(t - digit_base_);
        }
        fail("token_name: unreachable");
    }

private:
    int checked(int token, int base, int count, const char* what) const {
        require(token >= base && token < base + count, "token: ", what, " index ", token - base,
                " out of range [0,", count, ")");
        return token;
    }

    int behaviors_ = 0, locations_ = 0;
    std::vector<std::string> behavior_names_;
    int task_base_ = 0, generic_ = 0, day_base_ = 0, slot_base_ = 0, loc_base_ = 0,
        behavior_base_ = 0, scene_base_ = 0, category_base_ = 0, timing_base_ = 0, freq_base_ = 0,
        defect_base_ = 0, digit_base_ = 0, total_ = 0;
};

struct DialogueRound {
    std::vector<int> instruction;
    std::vector<int> answer;  // ends with EOS
    TaskKind task;
};

struct DialogueSample {
    std::vector<DialogueRound> rounds;
    std::uint64_t user_id = 0;
    int window_begin = 0;
    int window_len = 0;

    std::vector<int> answer_lengths() const {
        std::vector<int> t;
        for (const auto& r : rounds) t.push_back(static_cast<int>(r.answer.size()));
        return t;
    }
};

// Flawed-summary input for SelfReflect rounds.
struct SelfReflectInput {
    std::vector<std::string> flawed;
    std::vector<DefectSpec> specs;
};

namespace detail {

inline void append_event_group(std::vector<int>& out, const DialogueVocabulary& dv,
                               const BehaviorEvent& ev) {
    out.push_back(dv.day_token(ev.day));
    out.push_back(dv.slot_token(ev.slot));
    out.push_back(dv.loc_token(ev.loc));
    out.push_back(dv.behavior_token(ev.behavior));
}

// Scene labels repeat with the day-of-week cycle; reuse a stored day with the
// same weekday when a query lands past the generated span.
inline int scene_label_at(const GroundTruth& truth, long abs_day, int band) {
    const int days = static_cast<int>(truth.scene_labels.size());
    int d = static_cast<int>(abs_day);
    if (d >= days) {
        const int dow = static_cast<int>(abs_day % kDaysPerWeek);
        d = days - 1;
        for (int cand = 0; cand < days; ++cand)
            if (cand % kDaysPerWeek == dow) d = cand;
    }
    return truth.scene_labels[static_cast<std::size_t>(d)][static_cast<std::size_t>(band)];
}

}  // namespace detail

struct RenderOptions {
    int prefix_k = 4;       // width of the embedding span
    bool with_emb = true;   // false for rounds after the first
    int l2_horizon = 8;     // events emitted by GenerateFuture
};

inline DialogueRound render_task(TaskKind kind, const UserRecord& user, const PredictionWindow& window,
                                 const GroundTruth& truth, const DialogueVocabulary& dv,
                                 const RenderOptions& opt,
                                 const SelfReflectInput* reflect = nullptr) {
    DialogueRound round;
    round.task = kind;
    auto& ins = round.instruction;
    ins.push_back(DialogueVocabulary::kBos);
    ins.push_back(dv.task_tag(kind));
    if (opt.with_emb)
        for (int i = 0; i < opt.prefix_k; ++i) ins.push_back(DialogueVocabulary::kEmb);
    ins.push_back(DialogueVocabulary::kSep);

    require(window.begin >= 0 && window.len >= 1 &&
                window.begin + window.len <= static_cast<int>(user.events.size()),
            "render_task: window out of range for user ", user.user_id);
    const BehaviorEvent& anchor = user.events[static_cast<std::size_t>(window.begin + window.len - 1)];

    auto& ans = round.answer;
    switch (kind) {
        case TaskKind::ReconstructHistory: {
            for (int i = 0; i < window.len; ++i)
                detail::append_event_group(ans, dv, user.events[static_cast<std::size_t>(window.begin + i)]);
            break;
        }
        case TaskKind::SummarizeCurrentScene: {
            ins.push_back(dv.day_token(anchor.day));
            ins.push_back(dv.slot_token(anchor.slot));
            ans.push_back(dv.scene_token(
                detail::scene_label_at(truth, anchor.abs_day, band_of_slot(anchor.slot))));
            break;
        }
        case TaskKind::InferFutureScene: {
            ins.push_back(dv.day_token(anchor.day));
            ins.push_back(dv.slot_token(anchor.slot));
            const long future = anchor.abs_slot() + kSceneWindowSlots;
            ans.push_back(dv.scene_token(detail::scene_label_at(
                truth, future / kSlotsPerDay, band_of_slot(static_cast<int>(future % kSlotsPerDay)))));
            break;
        }
        case TaskKind::IdentifyHomeWork: {
            ans.push_back(dv.loc_token(truth.home_loc));
            ans.push_back(dv.loc_token(truth.work_loc));
            break;
        }
        case TaskKind::InferHobby: {
            for (int h : truth.hobbies) ans.push_back(dv.behavior_token(h));
            break;
        }
        case TaskKind::KeyBehaviorID: {
            for (const auto& [behavior, scene] : truth.key_behaviors) {
                ans.push_back(dv.behavior_token(behavior));
                ans.push_back(dv.scene_token(scene));
            }
            break;
        }
        case TaskKind::PatternDiscovery: {
            for (const auto& p : truth.patterns) {
                ans.push_back(p.trigger_is_scene ? dv.scene_token(p.trigger)
                                                 : dv.behavior_token(p.trigger));
                ans.push_back(dv.behavior_token(p.consequent));
                ans.push_back(dv.timing_token(p.timing_band));
                const int pct = static_cast<int>(p.support * 100.0 + 0.5);
                ans.push_back(dv.digit_token(pct / 100));
                ans.push_back(dv.digit_token((pct / 10) % 10));
                ans.push_back(dv.digit_token(pct % 10));
            }
            break;
        }
        case TaskKind::FeatureSummary: {
            for (const auto& tok : truth.feature_summary) ans.push_back(dv.summary_token_id(tok));
            break;
        }
        case TaskKind::SelfReflect: {
            require(reflect != nullptr, "render_task: self_reflect requires a flawed summary");
            for (const auto& tok : reflect->flawed) ins.push_back(dv.summary_token_id(tok));
            std::vector<int> kinds;
            for (const auto& spec : reflect->specs) kinds.push_back(static_cast<int>(spec.kind));
            std::sort(kinds.begin(), kinds.end());
            kinds.erase(std::unique(kinds.begin(), kinds.end()), kinds.end());
            for (int k : kinds) ans.push_back(dv.defect_token(static_cast<DefectKind>(k)));
            for (const auto& tok : truth.feature_summary) ans.push_back(dv.summary_token_id(tok));
            break;
        }
        case TaskKind::PredictNext: {
            ins.push_back(dv.day_token(anchor.day));
            ins.push_back(dv.slot_token(anchor.slot));
            ans.push_back(dv.behavior_token(window.target));
            break;
        }
        case TaskKind::GenerateFuture: {
            ins.push_back(dv.day_token(anchor.day));
            ins.push_back(dv.slot_token(anchor.slot));
            const int from = window.begin + window.len;
            const int avail = static_cast<int>(user.events.size()) - from;
            require(avail >= 1, "render_task: generate_future has no future events for user ",
                    user.user_id);
            const int horizon = std::min(opt.l2_horizon, avail);
            for (int i = 0; i < horizon; ++i)
                detail::append_event_group(ans, dv, user.events[static_cast<std::size_t>(from + i)]);
            break;
        }
    }
    ans.push_back(DialogueVocabulary::kEos);
    return round;
}

// Stage-2 curriculum order is fixed: key behaviors, then patterns, then the
// feature summary, then the prediction or generation round. The embedding
// span appears in round 1 only.
inline DialogueSample assemble_stage2_dialogue(const UserRecord& user, const PredictionWindow& window,
                                               TaskKind final_task, const GroundTruth& truth,
                                               const DialogueVocabulary& dv, const RenderOptions& opt) {
    require(final_task == TaskKind::PredictNext || final_task == TaskKind::GenerateFuture,
            "assemble_stage2_dialogue: final task must be predict_next or generate_future");
    DialogueSample sample;
    sample.user_id = user.user_id;
    sample.window_begin = window.begin;
    sample.window_len = window.len;
    RenderOptions first = opt;
    first.with_emb = true;
    RenderOptions rest = opt;
    rest.with_emb = false;
    sample.rounds.push_back(render_task(TaskKind::KeyBehaviorID, user, window, truth, dv, first));
    sample.rounds.push_back(render_task(TaskKind::PatternDiscovery, user, window, truth, dv, rest));
    sample.rounds.push_back(render_task(TaskKind::FeatureSummary, user, window, truth, dv, rest));
    sample.rounds.push_back(render_task(final_task, user, window, truth, dv, rest));
    return sample;
}

inline std::vector<int> flatten_transcript(const DialogueSample& sample) {
    std::vector<int> tokens;
    for (const auto& r : sample.rounds) {
        tokens.insert(tokens.end(), r.instruction.begin(), r.instruction.end());
        tokens.insert(tokens.end(), r.answer.begin(), r.answer.end());
    }
    return tokens;
}

// 1 exactly on answer tokens (including each EOS) of the concatenated
// transcript, 0 on instruction tokens.
inline std::vector<int> loss_mask(const DialogueSample& sample) {
    std::vector<int> mask;
    for (const auto& r : sample.rounds) {
        require(!r.answer.empty(), "loss_mask: empty answer round");
        mask.insert(mask.end(), r.instruction.size(), 0);
        mask.insert(mask.end(), r.answer.size(), 1);
    }
    return mask;
}

struct Malformed {
    int position = 0;
    friend bool operator==(const Malformed&, const Malformed&) = default;
};

using ParsedPrediction = std::variant<int, Malformed>;
using ParsedGeneration = std::variant<std::vector<BehaviorEvent>, Malformed>;

inline ParsedPrediction parse_prediction(const std::vector<int>& tokens,
                                         const DialogueVocabulary& dv) {
    if (tokens.empty() || tokens[0] < 0 || tokens[0] >= dv.size() ||
        dv.role_of(tokens[0]) != TokenRole::Behavior)
        return Malformed{0};
    return dv.behavior_of(tokens[0]);
}

// Greedy 4-token grouping (day, slot, loc, behavior) until EOS; any
// out-of-role token is a malformed result, never an exception.
inline ParsedGeneration parse_generation(const std::vector<int>& tokens,
                                         const DialogueVocabulary& dv) {
    std::vector<BehaviorEvent> events;
    std::size_t i = 0;
    while (i < tokens.size() && tokens[i] != DialogueVocabulary::kEos) {
        if (i + 4 > tokens.size()) return Malformed{static_cast<int>(i)};
        static const std::array<TokenRole, 4> roles{TokenRole::Day, TokenRole::Slot, TokenRole::Loc,
                                                    TokenRole::Behavior};
        for (std::size_t f = 0; f < 4; ++f) {
            const int tok = tokens[i + f];
            if (tok < 0 || tok >= dv.size() || dv.role_of(tok) != roles[f])
                return Malformed{static_cast<int>(i + f)};
        }
        BehaviorEvent ev;
        ev.day = dv.day_of(tokens[i]);
        ev.slot = dv.slot_of(tokens[i + 1]);
        ev.loc = dv.loc_of(tokens[i + 2]);
        ev.behavior = dv.behavior_of(tokens[i + 3]);
        events.push_back(ev);
        i += 4;
    }
    return events;
}

}  // namespace bua
