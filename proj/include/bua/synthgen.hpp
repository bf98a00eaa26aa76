#pragma once

#include <algorithm>
#include <array>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "bua/catalog.hpp"
#include "bua/common.hpp"
#include "bua/core.hpp"
#include "bua/rng.hpp"

namespace bua {

enum class DayType { Weekday, Weekend };

inline DayType day_type(int day_of_week) {
    return day_of_week >= 5 ? DayType::Weekend : DayType::Weekday;
}

struct PatternRule {
    int trigger = 0;  // behavior id
    int consequent = 0;
    int band = 0;
    double fire_prob = 0.0;
};

struct Hobby {
    int behavior = 0;
    int band = 0;         // preferred slot-band
    bool weekend = false;  // exercised on weekends rather than weekday evenings
    double daily_prob = 0.0;
};

// A generative profile for one synthetic user. The routine table is the base
// categorical distribution per (day-type, band); commutes, hobbies, patterns
// and quirks override it during generation.
struct Persona {
    int home_loc = 0;
    int work_loc = 0;
    int weekend_venue = 0;
    int commute_mode = behavior::kSubway;
    std::pair<int, int> commute_out_slots{16, 17};   // inclusive
    std::pair<int, int> commute_home_slots{36, 37};  // inclusive
    // routine[day_type][band] = distribution over behavior ids
    std::array<std::array<std::vector<double>, kBandCount>, 2> routine;
    std::vector<Hobby> hobbies;
    std::map<int, double> quirks;  // behavior id -> per-day probability (<= 0.01)
    std::vector<std::pair<int, int>> key_behaviors;  // (behavior, scene tag entered)
    std::vector<PatternRule> pattern_rules;
    bool has_exercise_hobby = false;

    void validate(const BehaviorVocabulary& vocab) const {
        require(home_loc != work_loc, "persona: home and work location must differ");
        for (const auto& [b, p] : quirks)
            require(p <= 0.01, "persona: quirk probability ", p, " for behavior ", b,
                    " exceeds 0.01");
        for (int dt = 0; dt < 2; ++dt)
            for (int band = 0; band < kBandCount; ++band) {
                const auto& dist = routine[dt][band];
                require(static_cast<int>(dist.size()) == vocab.behaviors(),
                        "persona: routine distribution size mismatch");
                double s = 0;
                for (double p : dist) s += p;
                require(std::abs(s - 1.0) <= 1e-9, "persona: routine distribution sums to ", s);
            }
    }
};

namespace detail {

// Keep only behavior ids below B, renormalize; weights and ids zip-paired.
inline std::vector<double> make_dist(int b_count, const std::vector<std::pair<int, double>>& weights) {
    std::vector<double> dist(b_count, 0.0);
    double total = 0;
    for (auto [id, w] : weights) {
        if (id >= b_count) continue;
        dist[id] += w;
        total += w;
    }
    require(total > 0, "make_dist: no behavior of the pool fits vocabulary of ", b_count);
    for (auto& p : dist) p /= total;
    // exact renormalization so the sum-to-one invariant holds at 1e-9
    double s = 0;
    for (double p : dist) s += p;
    if (s != 1.0)
        for (auto& p : dist) p /= s;
    return dist;
}

inline std::vector<int> filter_pool(int b_count, std::initializer_list<int> ids) {
    std::vector<int> out;
    for (int id : ids)
        if (id < b_count) out.push_back(id);
    return out;
}

}  // namespace detail

inline Persona sample_persona(const BehaviorVocabulary& vocab, RandomStream rng) {
    using namespace behavior;
    const int b_count = vocab.behaviors();
    require(b_count >= 10, "vocabulary too small: sample_persona needs B >= 10, got ", b_count);
    Persona p;
    p.home_loc = rng.uniform_int(0, vocab.location_count - 1);
    do {
        p.work_loc = rng.uniform_int(0, vocab.location_count - 1);
    } while (p.work_loc == p.home_loc);
    do {
        p.weekend_venue = rng.uniform_int(0, vocab.location_count - 1);
    } while (vocab.location_count > 2 &&
             (p.weekend_venue == p.home_loc || p.weekend_venue == p.work_loc));

    auto commute_modes = detail::filter_pool(b_count, {kSubway, kBus, kDriveCar});
    p.commute_mode = commute_modes[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(commute_modes.size()) - 1))];
    const int out_start = rng.uniform_int(16, 17);
    p.commute_out_slots = {out_start, 17};
    const int home_start = rng.uniform_int(36, 37);
    p.commute_home_slots = {home_start, 37};

    // 2-3 work behaviors with a dominant primary
    auto work_pool = detail::filter_pool(b_count, {kOnlineMeeting, kWriteEmail, kEditDocument, kCoding, kVideoConference});
    std::vector<std::pair<int, double>> work_weights;
    {
        std::vector<int> pool = work_pool;
        const int n_work = std::min<int>(static_cast<int>(pool.size()), 2 + rng.uniform_int(0, 1));
        for (int i = 0; i < n_work; ++i) {
            const int pick = rng.uniform_int(0, static_cast<int>(pool.size()) - 1);
            const double w = i == 0 ? 0.55 + 0.2 * rng.uniform() : 0.15 + 0.2 * rng.uniform();
            work_weights.emplace_back(pool[static_cast<std::size_t>(pick)], w);
            pool.erase(pool.begin() + pick);
        }
    }

    // hobbies: 1-2 evening entertainment picks, optional weekend exercise
    auto evening_pool = detail::filter_pool(
        b_count, {kWatchVideo, kShortVideo, kMusicStreaming, kGaming, kReadNovel, kPodcastListen});
    {
        std::vector<int> pool = evening_pool;
        const int n_hob = std::min<int>(static_cast<int>(pool.size()), 1 + rng.uniform_int(0, 1));
        for (int i = 0; i < n_hob; ++i) {
            const int pick = rng.uniform_int(0, static_cast<int>(pool.size()) - 1);
            Hobby h;
            h.behavior = pool[static_cast<std::size_t>(pick)];
            h.band = 7 + rng.uniform_int(0, 1);  // evening or late_evening
            h.weekend = false;
            h.daily_prob = 0.65 + 0.3 * rng.uniform();
            p.hobbies.push_back(h);
            pool.erase(pool.begin() + pick);
        }
    }
    auto exercise_pool = detail::filter_pool(b_count, {kRunning, kGymWorkout});
    if (!exercise_pool.empty() && rng.uniform() < 0.45) {
        Hobby h;
        h.behavior = exercise_pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(exercise_pool.size()) - 1))];
        h.band = 3;  // weekend morning block
        h.weekend = true;
        h.daily_prob = 0.6 + 0.35 * rng.uniform();
        p.hobbies.push_back(h);
        p.has_exercise_hobby = true;
    }
    std::sort(p.hobbies.begin(), p.hobbies.end(),
              [](const Hobby& a, const Hobby& b) { return a.behavior < b.behavior; });

    // long-tail quirks
    auto quirk_pool = detail::filter_pool(
        b_count, {kLaundry, kCycle, kStockCheck, kYoga, kWindowShopping, kLiveStream, kFileSync});
    for (int b = 37; b < b_count; ++b) quirk_pool.push_back(b);
    {
        const int n_quirk = std::min<int>(static_cast<int>(quirk_pool.size()), 2 + rng.uniform_int(0, 2));
        std::vector<int> pool = quirk_pool;
        for (int i = 0; i < n_quirk; ++i) {
            const int pick = rng.uniform_int(0, static_cast<int>(pool.size()) - 1);
            p.quirks[pool[static_cast<std::size_t>(pick)]] = 0.004 + 0.006 * rng.uniform();
            pool.erase(pool.begin() + pick);
        }
    }

    // lunch style
    auto lunch_pool = detail::filter_pool(b_count, {kOrderTakeout, kRestaurantDining, kCookMeal});
    const int lunch_primary = lunch_pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(lunch_pool.size()) - 1))];
    // commute filler habit
    auto filler_pool = detail::filter_pool(b_count, {kReadNews, kShortVideo, kMusicStreaming, kPodcastListen});
    const int commute_filler = filler_pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(filler_pool.size()) - 1))];

    // routine tables
    auto& wd = p.routine[static_cast<int>(DayType::Weekday)];
    auto& we = p.routine[static_cast<int>(DayType::Weekend)];
    const double jit = 0.1 * rng.uniform();
    wd[0] = detail::make_dist(b_count, {{kSleep, 1.0}});
    wd[1] = detail::make_dist(b_count, {{kCheckWeather, 0.4 + jit},
                                        {kReadNews, 0.3},
                                        {kMessaging, 0.15},
                                        {kCookMeal, 0.15}});
    wd[2] = detail::make_dist(b_count, {{commute_filler, 0.55},
                                        {kMobilePayment, 0.25},
                                        {kMessaging, 0.2}});
    wd[3] = detail::make_dist(b_count, work_weights);
    wd[4] = detail::make_dist(b_count, {{lunch_primary, 0.6},
                                        {kShortVideo, 0.25 + jit},
                                        {kCoffeeBreak, 0.15}});
    {
        auto afternoon = work_weights;
        afternoon.emplace_back(kCoffeeBreak, 0.12);
        wd[5] = detail::make_dist(b_count, afternoon);
    }
    wd[6] = detail::make_dist(b_count, {{commute_filler, 0.5},
                                        {kMobilePayment, 0.3},
                                        {kMessaging, 0.2}});
    {
        std::vector<std::pair<int, double>> ev;
        for (const auto& h : p.hobbies)
            if (!h.weekend && h.band == 7) ev.emplace_back(h.behavior, 0.5);
        ev.emplace_back(kWatchVideo, 0.3);
        ev.emplace_back(kOnlineShopping, 0.12 + jit);
        ev.emplace_back(kMessaging, 0.1);
        wd[7] = detail::make_dist(b_count, ev);
    }
    {
        std::vector<std::pair<int, double>> late;
        for (const auto& h : p.hobbies)
            if (!h.weekend && h.band == 8) late.emplace_back(h.behavior, 0.45);
        late.emplace_back(kReadNovel, 0.2);
        late.emplace_back(kMessaging, 0.2);
        late.emplace_back(kMusicStreaming, 0.15);
        wd[8] = detail::make_dist(b_count, late);
    }
    wd[9] = detail::make_dist(b_count, {{kSleep, 1.0}});

    we[0] = wd[0];
    we[1] = detail::make_dist(b_count, {{kCookMeal, 0.4},
                                        {kCheckWeather, 0.3},
                                        {kReadNews, 0.3}});
    we[2] = detail::make_dist(b_count, {{kReadNews, 0.4},
                                        {kShortVideo, 0.35},
                                        {kMessaging, 0.25}});
    {
        std::vector<std::pair<int, double>> outing{{kGroceryShopping, 0.3},
                                                   {kRestaurantDining, 0.2},
                                                   {kMobilePayment, 0.25},
                                                   {kPhoneCall, 0.25}};
        we[3] = detail::make_dist(b_count, outing);
        we[5] = detail::make_dist(b_count, {{kOnlineShopping, 0.3},
                                            {kWatchVideo, 0.3},
                                            {kMobilePayment, 0.2},
                                            {kHousework, 0.2}});
    }
    we[4] = detail::make_dist(b_count, {{kRestaurantDining, 0.45},
                                        {kCookMeal, 0.35},
                                        {kShortVideo, 0.2}});
    we[6] = detail::make_dist(b_count, {{kMessaging, 0.4},
                                        {kShortVideo, 0.35},
                                        {kHousework, 0.25}});
    we[7] = wd[7];
    we[8] = wd[8];
    we[9] = wd[9];

    // key behaviors tagged with the scene they open
    p.key_behaviors.emplace_back(kAlarmClock, kSceneMorningRoutine);
    p.key_behaviors.emplace_back(p.commute_mode, kSceneCommuteToWork);
    if (lunch_primary < b_count) p.key_behaviors.emplace_back(lunch_primary, kSceneLunchBreak);
    p.key_behaviors.emplace_back(p.commute_mode, kSceneCommuteHome);
    if (!p.hobbies.empty()) p.key_behaviors.emplace_back(p.hobbies.front().behavior, kSceneEveningLeisure);
    p.key_behaviors.emplace_back(kSleep, kSceneSleep);

    // recurring trigger->consequent habits
    p.pattern_rules.push_back({p.commute_mode, commute_filler, 2, 0.75 + 0.2 * rng.uniform()});
    if (kCheckWeather < b_count)
        p.pattern_rules.push_back({kAlarmClock, kCheckWeather, 1, 0.7 + 0.25 * rng.uniform()});
    if (lunch_primary < b_count && kShortVideo < b_count)
        p.pattern_rules.push_back({lunch_primary, kShortVideo, 4, 0.55 + 0.3 * rng.uniform()});

    p.validate(vocab);
    return p;
}

// Scene of a (day-of-week, band) cell for this persona.
inline int scene_for(const Persona& persona, int day_of_week, int band) {
    static const std::array<int, kBandCount> weekday{
        kSceneSleep,        kSceneMorningRoutine, kSceneCommuteToWork, kSceneWork,
        kSceneLunchBreak,   kSceneWork,           kSceneCommuteHome,   kSceneEveningLeisure,
        kScenePreBedtime,   kSceneSleep};
    static const std::array<int, kBandCount> weekend{
        kSceneSleep,        kSceneMorningRoutine, kSceneMorningRoutine, kSceneWeekendOuting,
        kSceneLunchBreak,   kSceneWeekendOuting,  kSceneEveningLeisure, kSceneEveningLeisure,
        kScenePreBedtime,   kSceneSleep};
    if (day_type(day_of_week) == DayType::Weekday) return weekday[static_cast<std::size_t>(band)];
    int s = weekend[static_cast<std::size_t>(band)];
    if (band == 3 && persona.has_exercise_hobby) s = kSceneExercise;
    return s;
}

struct FeatureDescriptor {
    int category = 0;
    std::vector<int> members;  // behavior ids, ascending
    int timing_band = 0;
    int freq_bucket = 0;
};

inline std::vector<FeatureDescriptor> summary_descriptors(const Persona&,
                                                          const std::vector<BehaviorEvent>& realized) {
    require(!realized.empty(), "summary_descriptors: no realized events");
    const int days = realized.back().abs_day + 1;
    std::map<int, std::set<int>> members_by_cat;
    std::map<int, std::array<int, kBandCount>> band_counts;
    std::map<int, std::set<int>> days_by_cat;
    for (const auto& ev : realized) {
        const int cat = category_of_behavior(ev.behavior);
        members_by_cat[cat].insert(ev.behavior);
        auto& bc = band_counts[cat];
        ++bc[static_cast<std::size_t>(band_of_slot(ev.slot))];
        days_by_cat[cat].insert(ev.abs_day);
    }
    std::vector<FeatureDescriptor> out;
    for (const auto& [cat, members] : members_by_cat) {
        FeatureDescriptor d;
        d.category = cat;
        d.members.assign(members.begin(), members.end());
        const auto& bc = band_counts[cat];
        int best = 0;
        for (int b = 1; b < kBandCount; ++b)
            if (bc[static_cast<std::size_t>(b)] > bc[static_cast<std::size_t>(best)]) best = b;
        d.timing_band = best;
        d.freq_bucket = freq_bucket(static_cast<double>(days_by_cat[cat].size()) / days);
        out.push_back(std::move(d));
    }
    return out;  // map iteration is ascending by category id: canonical order
}

inline std::vector<std::string> render_summary(const std::vector<FeatureDescriptor>& descriptors,
                                               const BehaviorVocabulary& vocab) {
    std::vector<std::string> tokens;
    for (const auto& d : descriptors) {
        tokens.push_back(std::string("cat:") + category_names()[static_cast<std::size_t>(d.category)]);
        for (int m : d.members) tokens.push_back("b:" + vocab.behavior_names[static_cast<std::size_t>(m)]);
        tokens.push_back(std::string("time:") + slot_bands()[static_cast<std::size_t>(d.timing_band)].name);
        tokens.push_back(std::string("freq:") + freq_bucket_names()[static_cast<std::size_t>(d.freq_bucket)]);
    }
    return tokens;
}

inline std::vector<std::string> canonical_feature_summary(const Persona& persona,
                                                          const std::vector<BehaviorEvent>& realized,
                                                          const BehaviorVocabulary& vocab) {
    return render_summary(summary_descriptors(persona, realized), vocab);
}

// Annotations are a pure function of (persona, events) so they can always be
// recomputed and compared against stored values.
inline GroundTruth compute_ground_truth(const Persona& persona,
                                        const std::vector<BehaviorEvent>& events, int days,
                                        const BehaviorVocabulary& vocab) {
    GroundTruth gt;
    gt.home_loc = persona.home_loc;
    gt.work_loc = persona.work_loc;
    for (const auto& h : persona.hobbies) gt.hobbies.push_back(h.behavior);
    std::sort(gt.hobbies.begin(), gt.hobbies.end());
    gt.hobbies.erase(std::unique(gt.hobbies.begin(), gt.hobbies.end()), gt.hobbies.end());
    gt.scene_labels.resize(static_cast<std::size_t>(days));
    for (int d = 0; d < days; ++d) {
        gt.scene_labels[static_cast<std::size_t>(d)].resize(kBandCount);
        for (int b = 0; b < kBandCount; ++b)
            gt.scene_labels[static_cast<std::size_t>(d)][static_cast<std::size_t>(b)] =
                scene_for(persona, d % kDaysPerWeek, b);
    }
    gt.key_behaviors = persona.key_behaviors;
    for (const auto& rule : persona.pattern_rules) {
        int opportunities = 0, fired = 0;
        for (std::size_t i = 0; i < events.size(); ++i) {
            if (events[i].behavior != rule.trigger) continue;
            if (band_of_slot(events[i].slot) != rule.band) continue;
            ++opportunities;
            if (i + 1 < events.size() && events[i + 1].behavior == rule.consequent &&
                events[i + 1].abs_day == events[i].abs_day && events[i + 1].slot == events[i].slot)
                ++fired;
        }
        if (opportunities > 0 && fired > 0) {
            PatternDescriptor pd;
            pd.trigger_is_scene = false;
            pd.trigger = rule.trigger;
            pd.consequent = rule.consequent;
            pd.timing_band = rule.band;
            pd.support = static_cast<double>(fired) / opportunities;
            gt.patterns.push_back(pd);
        }
    }
    gt.feature_summary = canonical_feature_summary(persona, events, vocab);
    return gt;
}

inline UserRecord generate_user(const Persona& persona, std::uint64_t user_id, int days,
                                const BehaviorVocabulary& vocab, RandomStream rng) {
    require(days >= 1, "generate_user: days must be >= 1");
    using namespace behavior;
    const int b_count = vocab.behaviors();
    UserRecord user;
    user.user_id = user_id;
    for (int day = 0; day < days; ++day) {
        const int dow = day % kDaysPerWeek;
        const DayType dt = day_type(dow);
        const auto& routine = persona.routine[static_cast<int>(dt)];
        std::vector<BehaviorEvent> today;
        auto loc_for_band = [&](int band) {
            if (dt == DayType::Weekday) {
                if (band >= 3 && band <= 5) return persona.work_loc;
                if (band == 6) return persona.work_loc;
                return persona.home_loc;
            }
            if (band == 3 || band == 4 || band == 5) return persona.weekend_venue;
            return persona.home_loc;
        };
        auto emit = [&](int behavior_id, int slot, int loc) {
            today.push_back({dow, slot, loc, behavior_id, day});
        };
        // anchors
        emit(kSleep, 0, persona.home_loc);
        if (dt == DayType::Weekday) {
            emit(kAlarmClock, 13, persona.home_loc);
        }
        // routine draws per band
        for (int band = 1; band <= 8; ++band) {
            if (dt == DayType::Weekday && band == 2) continue;  // handled by commute below
            const auto& sb = slot_bands()[static_cast<std::size_t>(band)];
            const int max_draws = std::min(3, sb.end - sb.begin);
            const int n_draws = rng.uniform_int(1, max_draws);
            for (int i = 0; i < n_draws; ++i) {
                const int slot = rng.uniform_int(sb.begin, sb.end - 1);
                const int b = rng.categorical(routine[static_cast<std::size_t>(band)]);
                emit(b, slot, loc_for_band(band));
            }
        }
        if (dt == DayType::Weekday) {
            // forced commute out: location flips home -> work inside the window
            const int out_slot = rng.uniform_int(persona.commute_out_slots.first,
                                                 persona.commute_out_slots.second);
            emit(persona.commute_mode, out_slot, persona.work_loc);
            const int home_slot = rng.uniform_int(persona.commute_home_slots.first,
                                                  persona.commute_home_slots.second);
            emit(persona.commute_mode, home_slot, persona.home_loc);
        }
        // hobbies
        for (const auto& h : persona.hobbies) {
            const bool active_day = h.weekend ? dt == DayType::Weekend : dt == DayType::Weekday;
            if (!active_day) continue;
            if (rng.uniform() >= h.daily_prob) continue;
            const auto& sb = slot_bands()[static_cast<std::size_t>(h.band)];
            emit(h.behavior, rng.uniform_int(sb.begin, sb.end - 1), loc_for_band(h.band));
        }
        // quirks
        for (const auto& [qb, qp] : persona.quirks) {
            if (rng.uniform() >= qp) continue;
            const int band = rng.uniform_int(3, 8);
            const auto& sb = slot_bands()[static_cast<std::size_t>(band)];
            emit(qb, rng.uniform_int(sb.begin, sb.end - 1), loc_for_band(band));
        }
        emit(kSleep, 45 + rng.uniform_int(0, 2), persona.home_loc);
        std::stable_sort(today.begin(), today.end(),
                         [](const BehaviorEvent& a, const BehaviorEvent& b) { return a.slot < b.slot; });
        // pattern rules fire on the ordered day: consequent right after trigger
        std::vector<BehaviorEvent> with_patterns;
        for (const auto& ev : today) {
            with_patterns.push_back(ev);
            for (const auto& rule : persona.pattern_rules) {
                if (ev.behavior != rule.trigger) continue;
                if (band_of_slot(ev.slot) != rule.band) continue;
                if (rng.uniform() < rule.fire_prob)
                    with_patterns.push_back({dow, ev.slot, ev.loc, rule.consequent, day});
            }
        }
        user.events.insert(user.events.end(), with_patterns.begin(), with_patterns.end());
    }
    for (const auto& ev : user.events) {
        require(ev.behavior >= 0 && ev.behavior < b_count, "generate_user: behavior out of range");
        require(ev.loc >= 0 && ev.loc < vocab.location_count, "generate_user: location out of range");
    }
    user.truth = compute_ground_truth(persona, user.events, days, vocab);
    return user;
}

// ---- defect injection --------------------------------------------------

enum class DefectKind : int {
    AbstractionLoss = 0,
    DetailDisassociation = 1,
    StructureDisorder = 2,
    HierarchyFlat = 3,
    TemporalError = 4,
    GenericPhrasing = 5,
};

constexpr int kDefectKindCount = 6;

inline const char* defect_kind_name(DefectKind k) {
    static const std::array<const char*, kDefectKindCount> names{
        "abstraction_loss", "detail_disassociation", "structure_disorder",
        "hierarchy_flat",   "temporal_error",        "generic_phrasing"};
    return names[static_cast<std::size_t>(k)];
}

// One recorded edit: replace `removed` at `pos` with `inserted`. Inverting
// the splices in reverse order restores the original sequence byte-exactly.
struct DefectSpec {
    DefectKind kind;
    std::size_t pos = 0;
    std::vector<std::string> removed;
    std::vector<std::string> inserted;
};

namespace detail {

inline bool is_cat_token(const std::string& t) { return t.rfind("cat:", 0) == 0; }
inline bool is_member_token(const std::string& t) { return t.rfind("b:", 0) == 0; }
inline bool is_time_token(const std::string& t) { return t.rfind("time:", 0) == 0; }
inline bool is_freq_token(const std::string& t) { return t.rfind("freq:", 0) == 0; }

struct DescriptorSpan {
    std::size_t begin = 0, end = 0;  // token range
    bool has_cat = false;
    std::vector<std::size_t> member_pos;
    std::size_t time_pos = 0;
    bool has_time = false;
    std::size_t freq_pos = 0;
    bool has_freq = false;
};

// Lenient span scan; spans may lack pieces after earlier defects.
inline std::vector<DescriptorSpan> scan_spans(const std::vector<std::string>& tokens) {
    std::vector<DescriptorSpan> spans;
    DescriptorSpan cur;
    bool open = false;
    auto close = [&](std::size_t end) {
        if (open) {
            cur.end = end;
            spans.push_back(cur);
            cur = DescriptorSpan{};
            open = false;
        }
    };
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const auto& t = tokens[i];
        const bool starts_new = is_cat_token(t) || (open && (cur.has_freq || (cur.has_time && !is_freq_token(t))));
        if (starts_new) close(i);
        if (!open) {
            cur.begin = i;
            open = true;
        }
        if (is_cat_token(t)) cur.has_cat = true;
        else if (is_member_token(t)) cur.member_pos.push_back(i);
        else if (is_time_token(t)) {
            cur.time_pos = i;
            cur.has_time = true;
        } else if (is_freq_token(t)) {
            cur.freq_pos = i;
            cur.has_freq = true;
        }
    }
    close(tokens.size());
    return spans;
}

inline std::vector<std::string> apply_splice(const std::vector<std::string>& tokens,
                                             const DefectSpec& spec) {
    std::vector<std::string> out(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(spec.pos));
    out.insert(out.end(), spec.inserted.begin(), spec.inserted.end());
    out.insert(out.end(), tokens.begin() + static_cast<std::ptrdiff_t>(spec.pos + spec.removed.size()),
               tokens.end());
    return out;
}

}  // namespace detail

inline std::vector<std::string> invert_defects(std::vector<std::string> tokens,
                                               const std::vector<DefectSpec>& specs) {
    for (auto it = specs.rbegin(); it != specs.rend(); ++it) {
        DefectSpec inverse;
        inverse.kind = it->kind;
        inverse.pos = it->pos;
        inverse.removed = it->inserted;
        inverse.inserted = it->removed;
        require(inverse.pos + inverse.removed.size() <= tokens.size(),
                "invert_defects: splice out of range");
        for (std::size_t i = 0; i < inverse.removed.size(); ++i)
            require(tokens[inverse.pos + i] == inverse.removed[i],
                    "invert_defects: sequence does not match recorded edit");
        tokens = detail::apply_splice(tokens, inverse);
    }
    return tokens;
}

inline std::pair<std::vector<std::string>, std::vector<DefectSpec>> inject_defects(
    const std::vector<std::string>& summary, int n, RandomStream rng) {
    require(n >= 1, "inject_defects: need n >= 1");
    require(n <= kDefectKindCount, "inject_defects: only ", kDefectKindCount, " defect kinds, asked for ", n);
    require(!summary.empty(), "inject_defects: empty summary");
    using detail::scan_spans;

    // choose n distinct kinds among those applicable to the pristine summary
    auto spans0 = scan_spans(summary);
    auto count_if = [&](auto&& pred) {
        int c = 0;
        for (const auto& s : spans0)
            if (pred(s)) ++c;
        return c;
    };
    const int n_cat_members = count_if([](const auto& s) { return s.has_cat && !s.member_pos.empty(); });
    const int n_time = count_if([](const auto& s) { return s.has_time; });
    const int n_freq = count_if([](const auto& s) { return s.has_freq; });
    std::vector<DefectKind> applicable;
    if (n_cat_members >= 1) applicable.push_back(DefectKind::AbstractionLoss);
    if (n_time >= 1) applicable.push_back(DefectKind::DetailDisassociation);
    if (spans0.size() >= 2) applicable.push_back(DefectKind::StructureDisorder);
    if (n_cat_members >= 2) applicable.push_back(DefectKind::HierarchyFlat);
    if (n_freq >= 1) applicable.push_back(DefectKind::TemporalError);
    if (!spans0.empty()) applicable.push_back(DefectKind::GenericPhrasing);
    require(static_cast<int>(applicable.size()) >= n, "inject_defects: only ", applicable.size(),
            " defect kinds applicable to this summary, asked for ", n);
    std::vector<DefectKind> chosen;
    {
        auto pool = applicable;
        for (int i = 0; i < n; ++i) {
            const int pick = rng.uniform_int(0, static_cast<int>(pool.size()) - 1);
            chosen.push_back(pool[static_cast<std::size_t>(pick)]);
            pool.erase(pool.begin() + pick);
        }
    }
    // content edits first, whole-sequence edits last
    auto precedence = [](DefectKind k) {
        switch (k) {
            case DefectKind::AbstractionLoss: return 0;
            case DefectKind::HierarchyFlat: return 1;
            case DefectKind::TemporalError: return 2;
            case DefectKind::GenericPhrasing: return 3;
            case DefectKind::DetailDisassociation: return 4;
            case DefectKind::StructureDisorder: return 5;
        }
        return 6;
    };
    std::sort(chosen.begin(), chosen.end(),
              [&](DefectKind a, DefectKind b) { return precedence(a) < precedence(b); });

    std::vector<std::string> tokens = summary;
    std::vector<DefectSpec> specs;
    for (DefectKind kind : chosen) {
        auto spans = scan_spans(tokens);
        auto pick_span = [&](auto&& pred) -> const detail::DescriptorSpan* {
            std::vector<const detail::DescriptorSpan*> ok;
            for (const auto& s : spans)
                if (pred(s)) ok.push_back(&s);
            if (ok.empty()) return nullptr;
            return ok[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(ok.size()) - 1))];
        };
        DefectSpec spec;
        spec.kind = kind;
        switch (kind) {
            case DefectKind::AbstractionLoss: {
                const auto* s = pick_span([](const auto& sp) { return sp.has_cat && !sp.member_pos.empty(); });
                require(s, "inject_defects: abstraction_loss not applicable");
                spec.pos = s->begin;  // the cat token opens the span
                spec.removed = {tokens[s->begin]};
                for (auto mp : s->member_pos) spec.inserted.push_back(tokens[mp]);
                break;
            }
            case DefectKind::DetailDisassociation: {
                const auto* s = pick_span([](const auto& sp) { return sp.has_time; });
                require(s, "inject_defects: detail_disassociation not applicable");
                spec.pos = s->time_pos;
                spec.removed.assign(tokens.begin() + static_cast<std::ptrdiff_t>(s->time_pos), tokens.end());
                spec.inserted.assign(tokens.begin() + static_cast<std::ptrdiff_t>(s->time_pos + 1), tokens.end());
                spec.inserted.push_back(tokens[s->time_pos]);  // timing drifts to the tail
                break;
            }
            case DefectKind::StructureDisorder: {
                require(spans.size() >= 2, "inject_defects: structure_disorder not applicable");
                std::vector<std::size_t> perm(spans.size());
                for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
                do {
                    for (std::size_t i = perm.size(); i > 1; --i)
                        std::swap(perm[i - 1], perm[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
                } while (std::is_sorted(perm.begin(), perm.end()));
                spec.pos = 0;
                spec.removed = tokens;
                for (std::size_t i : perm)
                    spec.inserted.insert(spec.inserted.end(),
                                         tokens.begin() + static_cast<std::ptrdiff_t>(spans[i].begin),
                                         tokens.begin() + static_cast<std::ptrdiff_t>(spans[i].end));
                break;
            }
            case DefectKind::HierarchyFlat: {
                // two adjacent cat spans fused, category level dropped
                const detail::DescriptorSpan* first = nullptr;
                std::vector<std::size_t> cat_idx;
                for (std::size_t i = 0; i + 1 < spans.size(); ++i)
                    if (spans[i].has_cat && spans[i + 1].has_cat && !spans[i].member_pos.empty() &&
                        !spans[i + 1].member_pos.empty())
                        cat_idx.push_back(i);
                require(!cat_idx.empty(), "inject_defects: hierarchy_flat not applicable");
                const std::size_t at = cat_idx[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(cat_idx.size()) - 1))];
                first = &spans[at];
                const auto& second = spans[at + 1];
                spec.pos = first->begin;
                spec.removed.assign(tokens.begin() + static_cast<std::ptrdiff_t>(first->begin),
                                    tokens.begin() + static_cast<std::ptrdiff_t>(second.end));
                for (auto mp : first->member_pos) spec.inserted.push_back(tokens[mp]);
                for (auto mp : second.member_pos) spec.inserted.push_back(tokens[mp]);
                if (first->has_time) spec.inserted.push_back(tokens[first->time_pos]);
                if (first->has_freq) spec.inserted.push_back(tokens[first->freq_pos]);
                break;
            }
            case DefectKind::TemporalError: {
                const auto* s = pick_span([](const auto& sp) { return sp.has_freq; });
                require(s, "inject_defects: temporal_error not applicable");
                const std::string& cur = tokens[s->freq_pos];
                int bucket = -1;
                for (int i = 0; i < 4; ++i)
                    if (cur == std::string("freq:") + freq_bucket_names()[static_cast<std::size_t>(i)]) bucket = i;
                require(bucket >= 0, "inject_defects: unknown frequency token ", cur);
                int shifted;
                if (bucket == 0) shifted = 1;
                else if (bucket == 3) shifted = 2;
                else shifted = bucket + (rng.uniform() < 0.5 ? -1 : 1);
                spec.pos = s->freq_pos;
                spec.removed = {cur};
                spec.inserted = {std::string("freq:") + freq_bucket_names()[static_cast<std::size_t>(shifted)]};
                break;
            }
            case DefectKind::GenericPhrasing: {
                require(!spans.empty(), "inject_defects: generic_phrasing not applicable");
                const auto& s = spans[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(spans.size()) - 1))];
                spec.pos = s.begin;
                spec.removed.assign(tokens.begin() + static_cast<std::ptrdiff_t>(s.begin),
                                    tokens.begin() + static_cast<std::ptrdiff_t>(s.end));
                spec.inserted = {"generic_profile"};
                break;
            }
        }
        tokens = detail::apply_splice(tokens, spec);
        specs.push_back(std::move(spec));
    }
    return {tokens, specs};
}

// ---- corpus assembly -----------------------------------------------------

struct CorpusConfig {
    int n_users = 200;
    int days = 14;
    std::uint64_t seed = kDefaultSeed;
};

inline UserRecord build_user(const BehaviorVocabulary& vocab, std::uint64_t seed,
                             std::uint64_t user_id, int days) {
    RandomStream root = RandomStream::derive(seed, "user/" + std::to_string(user_id));
    Persona persona = sample_persona(vocab, root.derive("persona"));
    return generate_user(persona, user_id, days, vocab, root.derive("events"));
}

inline Persona user_persona(const BehaviorVocabulary& vocab, std::uint64_t seed,
                            std::uint64_t user_id) {
    RandomStream root = RandomStream::derive(seed, "user/" + std::to_string(user_id));
    return sample_persona(vocab, root.derive("persona"));
}

inline CorpusSplit build_corpus(const CorpusConfig& cfg, const BehaviorVocabulary& vocab) {
    require(cfg.n_users >= 10, "build_corpus: need at least 10 users, got ", cfg.n_users);
    std::vector<UserRecord> users;
    users.reserve(static_cast<std::size_t>(cfg.n_users));
    for (int u = 0; u < cfg.n_users; ++u)
        users.push_back(build_user(vocab, cfg.seed, static_cast<std::uint64_t>(u), cfg.days));
    return split_users(std::move(users), SplitRatios{}, cfg.seed);
}

}  // namespace bua
