#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "bua/common.hpp"
#include "bua/rng.hpp"

namespace bua {

constexpr int kSlotsPerDay = 48;  // 30-minute bins
constexpr int kDaysPerWeek = 7;
constexpr int kSceneWindowSlots = 4;  // "two hours" at 30-minute granularity

// One behavioral event: (day-of-week, time slot, location, behavior type).
// abs_day orders events across the record's span; it is derived, not part of
// the serialized four-tuple.
struct BehaviorEvent {
    int day = 0;   // 0..6
    int slot = 0;  // 0..47
    int loc = 0;
    int behavior = 0;
    int abs_day = 0;

    long abs_slot() const { return static_cast<long>(abs_day) * kSlotsPerDay + slot; }

    friend bool operator==(const BehaviorEvent&, const BehaviorEvent&) = default;
};

struct BehaviorVocabulary {
    std::vector<std::string> behavior_names;
    int location_count = 0;
    int slot_count = kSlotsPerDay;
    int day_count = kDaysPerWeek;

    int behaviors() const { return static_cast<int>(behavior_names.size()); }

    void validate() const {
        require(behaviors() >= 2, "vocabulary: need at least 2 behaviors, got ", behaviors());
        require(location_count >= 2, "vocabulary: need at least 2 locations");
        std::set<std::string> uniq(behavior_names.begin(), behavior_names.end());
        require(uniq.size() == behavior_names.size(), "vocabulary: behavior names not unique");
    }
};

struct PatternDescriptor {
    bool trigger_is_scene = false;
    int trigger = 0;  // behavior id, or scene id when trigger_is_scene
    int consequent = 0;
    int timing_band = 0;
    double support = 0.0;

    friend bool operator==(const PatternDescriptor&, const PatternDescriptor&) = default;
};

// Labels the synthetic generator attaches to each user. Scene labels cover
// every (day, slot-band) of the generated span.
struct GroundTruth {
    int home_loc = 0;
    int work_loc = 0;
    std::vector<int> hobbies;                    // behavior ids, ascending
    std::vector<std::vector<int>> scene_labels;  // [day][band] -> scene id
    std::vector<std::pair<int, int>> key_behaviors;  // (behavior id, scene tag entered)
    std::vector<PatternDescriptor> patterns;
    std::vector<std::string> feature_summary;  // canonical descriptor tokens

    friend bool operator==(const GroundTruth&, const GroundTruth&) = default;
};

struct UserRecord {
    std::uint64_t user_id = 0;
    std::vector<BehaviorEvent> events;
    GroundTruth truth;

    friend bool operator==(const UserRecord&, const UserRecord&) = default;
};

struct FrequencyTable {
    std::vector<std::int64_t> counts;  // indexed by behavior id
    std::int64_t total = 0;

    double freq(int behavior) const {
        return total > 0 ? static_cast<double>(counts[behavior]) / static_cast<double>(total) : 0.0;
    }
};

struct CategoryPartition {
    std::set<int> head, medium, tail;
    double head_min = 0.05;
    double med_min = 0.01;

    enum class Category { Head, Medium, Tail, None };

    Category of(int behavior) const {
        if (head.count(behavior)) return Category::Head;
        if (medium.count(behavior)) return Category::Medium;
        if (tail.count(behavior)) return Category::Tail;
        return Category::None;
    }
};

inline FrequencyTable frequency_table(const std::vector<UserRecord>& corpus, int behaviors) {
    require(!corpus.empty(), "frequency_table: empty corpus");
    FrequencyTable ft;
    ft.counts.assign(behaviors, 0);
    for (const auto& user : corpus)
        for (const auto& ev : user.events) {
            require(ev.behavior >= 0 && ev.behavior < behaviors, "frequency_table: behavior ",
                    ev.behavior, " outside vocabulary of ", behaviors);
            ++ft.counts[ev.behavior];
            ++ft.total;
        }
    return ft;
}

// Head strictly above head_min; medium inclusive in [med_min, head_min];
// tail below med_min. Zero-count behaviors belong to no category.
inline CategoryPartition partition_categories(const FrequencyTable& freq, double head_min = 0.05,
                                              double med_min = 0.01) {
    require(freq.total > 0, "partition_categories: frequency table has zero total");
    require(0.0 < med_min && med_min < head_min && head_min < 1.0,
            "partition_categories: thresholds must satisfy 0 < med_min < head_min < 1");
    CategoryPartition part;
    part.head_min = head_min;
    part.med_min = med_min;
    for (int b = 0; b < static_cast<int>(freq.counts.size()); ++b) {
        if (freq.counts[b] == 0) continue;
        const double f = freq.freq(b);
        if (f > head_min)
            part.head.insert(b);
        else if (f >= med_min)
            part.medium.insert(b);
        else
            part.tail.insert(b);
    }
    return part;
}

struct PredictionWindow {
    const UserRecord* user = nullptr;
    int begin = 0;  // context = events[begin, begin+len)
    int len = 0;
    int target = 0;  // behavior id of events[begin+len]

    int target_index() const { return begin + len; }
};

// One window per position i in [L1, len): context events[i-L1, i), target
// behavior of events[i]. Too-short users yield an empty list.
inline std::vector<PredictionWindow> prediction_windows(const UserRecord& user, int l1) {
    require(l1 >= 1, "prediction_windows: L1 must be positive");
    std::vector<PredictionWindow> out;
    const int n = static_cast<int>(user.events.size());
    for (int i = l1; i < n; ++i)
        out.push_back({&user, i - l1, l1, user.events[i].behavior});
    return out;
}

enum class SliceDirection { Past, Future };

// Events within two hours of the anchor event's time. The past window keeps
// the anchor; the future window excludes it. Windows wrap across midnight via
// absolute slot indices.
inline std::vector<BehaviorEvent> scene_slice(const UserRecord& user, int anchor,
                                              SliceDirection direction) {
    require(anchor >= 0 && anchor < static_cast<int>(user.events.size()),
            "scene_slice: anchor index ", anchor, " out of range");
    const long a = user.events[anchor].abs_slot();
    std::vector<BehaviorEvent> out;
    for (const auto& ev : user.events) {
        const long s = ev.abs_slot();
        const bool keep = direction == SliceDirection::Past
                              ? (s >= a - kSceneWindowSlots && s <= a)
                              : (s > a && s <= a + kSceneWindowSlots);
        if (keep) out.push_back(ev);
    }
    return out;
}

struct SplitRatios {
    int train = 8, val = 1, test = 1;
};

struct CorpusSplit {
    std::vector<UserRecord> train, val, test;
};

// Deterministic shuffled partition by user; floor allocation with the
// remainder going to train.
inline CorpusSplit split_users(std::vector<UserRecord> users, SplitRatios ratios,
                               std::uint64_t seed) {
    require(!users.empty(), "split_users: no users");
    require(ratios.train > 0 && ratios.val > 0 && ratios.test > 0,
            "split_users: ratios must be positive");
    std::vector<std::size_t> order(users.size());
    std::iota(order.begin(), order.end(), 0);
    RandomStream rng = RandomStream::derive(seed, "split_users");
    for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
    const int total_ratio = ratios.train + ratios.val + ratios.test;
    const std::size_t n = users.size();
    const std::size_t n_val = n * static_cast<std::size_t>(ratios.val) / static_cast<std::size_t>(total_ratio);
    const std::size_t n_test = n * static_cast<std::size_t>(ratios.test) / static_cast<std::size_t>(total_ratio);
    const std::size_t n_train = n - n_val - n_test;
    CorpusSplit split;
    for (std::size_t i = 0; i < n; ++i) {
        UserRecord& u = users[order[i]];
        if (i < n_train)
            split.train.push_back(std::move(u));
        else if (i < n_train + n_val)
            split.val.push_back(std::move(u));
        else
            split.test.push_back(std::move(u));
    }
    auto by_id = [](const UserRecord& a, const UserRecord& b) { return a.user_id < b.user_id; };
    std::sort(split.train.begin(), split.train.end(), by_id);
    std::sort(split.val.begin(), split.val.end(), by_id);
    std::sort(split.test.begin(), split.test.end(), by_id);
    return split;
}

}  // namespace bua
