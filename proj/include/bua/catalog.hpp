#pragma once

#include <array>
#include <string>
#include <vector>

#include "bua/common.hpp"
#include "bua/core.hpp"

namespace bua {

// Slot bands partition the 48-slot day; scenes, routine tables, timing
// qualifiers and pattern timings are all expressed in bands.
struct SlotBand {
    int begin;  // inclusive
    int end;    // exclusive
    const char* name;
};

inline const std::array<SlotBand, 10>& slot_bands() {
    static const std::array<SlotBand, 10> bands{{
        {0, 13, "night"},
        {13, 16, "early_morning"},
        {16, 18, "morning_commute"},
        {18, 24, "morning_work"},
        {24, 27, "midday"},
        {27, 36, "afternoon"},
        {36, 38, "evening_commute"},
        {38, 42, "evening"},
        {42, 45, "late_evening"},
        {45, 48, "late_night"},
    }};
    return bands;
}

constexpr int kBandCount = 10;

inline int band_of_slot(int slot) {
    for (int b = 0; b < kBandCount; ++b)
        if (slot >= slot_bands()[b].begin && slot < slot_bands()[b].end) return b;
    fail("band_of_slot: slot ", slot, " out of range");
}

// Closed scene set.
enum Scene : int {
    kSceneMorningRoutine = 0,
    kSceneCommuteToWork = 1,
    kSceneWork = 2,
    kSceneLunchBreak = 3,
    kSceneCommuteHome = 4,
    kSceneEveningLeisure = 5,
    kScenePreBedtime = 6,
    kSceneSleep = 7,
    kSceneWeekendOuting = 8,
    kSceneExercise = 9,
};

constexpr int kSceneCount = 10;

inline const std::array<const char*, kSceneCount>& scene_names() {
    static const std::array<const char*, kSceneCount> names{
        "morning_routine", "commute_to_work", "work",  "lunch_break",    "commute_home",
        "evening_leisure", "pre_bedtime",     "sleep", "weekend_outing", "exercise"};
    return names;
}

// Descriptor categories used by feature summaries.
enum BehaviorCategory : int {
    kCatRest = 0,
    kCatInformationSeeking = 1,
    kCatCommute = 2,
    kCatWork = 3,
    kCatDining = 4,
    kCatEntertainment = 5,
    kCatShopping = 6,
    kCatCommunication = 7,
    kCatHomeChores = 8,
    kCatExercise = 9,
};

constexpr int kCategoryCount = 10;

inline const std::array<const char*, kCategoryCount>& category_names() {
    static const std::array<const char*, kCategoryCount> names{
        "rest",          "information_seeking", "commute",  "work",          "dining",
        "entertainment", "shopping",            "communication", "home_chores", "exercise"};
    return names;
}

// Frequency-qualifier buckets over fraction-of-days; the lowest edge lines up
// with the long-tail threshold.
inline const std::array<const char*, 4>& freq_bucket_names() {
    static const std::array<const char*, 4> names{"rare", "occasional", "frequent", "habitual"};
    return names;
}

inline int freq_bucket(double fraction_of_days) {
    if (fraction_of_days < 0.01) return 0;
    if (fraction_of_days < 0.05) return 1;
    if (fraction_of_days < 0.2) return 2;
    return 3;
}

namespace behavior {
// Canonical ids into the default 37-behavior catalog. Ordered so that a
// prefix of any size >= 10 still covers the core daily roles.
enum : int {
    kSleep = 0,
    kAlarmClock = 1,
    kSubway = 2,
    kOnlineMeeting = 3,
    kOrderTakeout = 4,
    kWatchVideo = 5,
    kReadNews = 6,
    kMessaging = 7,
    kOnlineShopping = 8,
    kHousework = 9,
    kCheckWeather = 10,
    kBus = 11,
    kWriteEmail = 12,
    kRestaurantDining = 13,
    kShortVideo = 14,
    kRunning = 15,
    kPhoneCall = 16,
    kGroceryShopping = 17,
    kEditDocument = 18,
    kMusicStreaming = 19,
    kDriveCar = 20,
    kCoding = 21,
    kCoffeeBreak = 22,
    kGaming = 23,
    kMobilePayment = 24,
    kGymWorkout = 25,
    kCookMeal = 26,
    kPodcastListen = 27,
    kVideoConference = 28,
    kReadNovel = 29,
    kLaundry = 30,
    kCycle = 31,
    kStockCheck = 32,
    kYoga = 33,
    kWindowShopping = 34,
    kLiveStream = 35,
    kFileSync = 36,
};
}  // namespace behavior

struct CatalogEntry {
    const char* name;
    BehaviorCategory category;
};

inline const std::array<CatalogEntry, 37>& default_catalog() {
    using namespace behavior;
    static const std::array<CatalogEntry, 37> entries{{
        {"sleep", kCatRest},
        {"alarm_clock", kCatRest},
        {"subway", kCatCommute},
        {"online_meeting", kCatWork},
        {"order_takeout", kCatDining},
        {"watch_video", kCatEntertainment},
        {"read_news", kCatInformationSeeking},
        {"messaging", kCatCommunication},
        {"online_shopping", kCatShopping},
        {"housework", kCatHomeChores},
        {"check_weather", kCatInformationSeeking},
        {"bus", kCatCommute},
        {"write_email", kCatWork},
        {"restaurant_dining", kCatDining},
        {"short_video", kCatEntertainment},
        {"running", kCatExercise},
        {"phone_call", kCatCommunication},
        {"grocery_shopping", kCatShopping},
        {"edit_document", kCatWork},
        {"music_streaming", kCatEntertainment},
        {"drive_car", kCatCommute},
        {"coding", kCatWork},
        {"coffee_break", kCatDining},
        {"gaming", kCatEntertainment},
        {"mobile_payment", kCatShopping},
        {"gym_workout", kCatExercise},
        {"cook_meal", kCatDining},
        {"podcast_listen", kCatInformationSeeking},
        {"video_conference", kCatWork},
        {"read_novel", kCatEntertainment},
        {"laundry", kCatHomeChores},
        {"cycle", kCatCommute},
        {"stock_check", kCatInformationSeeking},
        {"yoga", kCatExercise},
        {"window_shopping", kCatShopping},
        {"live_stream", kCatEntertainment},
        {"file_sync", kCatWork},
    }};
    return entries;
}

inline BehaviorVocabulary make_vocabulary(int behaviors = 37, int locations = 20) {
    BehaviorVocabulary vocab;
    vocab.location_count = locations;
    vocab.behavior_names.reserve(behaviors);
    for (int b = 0; b < behaviors; ++b) {
        if (b < static_cast<int>(default_catalog().size()))
            vocab.behavior_names.emplace_back(default_catalog()[b].name);
        else
            vocab.behavior_names.emplace_back("extra_" + std::to_string(b));
    }
    vocab.validate();
    return vocab;
}

inline int category_of_behavior(int behavior_id) {
    if (behavior_id < static_cast<int>(default_catalog().size()))
        return default_catalog()[behavior_id].category;
    return behavior_id % kCategoryCount;
}

}  // namespace bua
