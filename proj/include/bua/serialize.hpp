#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bua/common.hpp"
#include "bua/core.hpp"
#include "bua/metrics.hpp"
#include "bua/tensor.hpp"

namespace bua {

using Json = nlohmann::json;

// ---- canonical JSON ---------------------------------------------------------

// Sorted keys (nlohmann objects iterate in key order) and fixed float
// formatting at 17 significant digits, so identical values always produce
// identical bytes and reports diff cleanly.
inline void canonical_dump(const Json& j, std::string& out, int indent, int depth) {
    const std::string pad(static_cast<std::size_t>(depth) * indent, ' ');
    const std::string pad_in(static_cast<std::size_t>(depth + 1) * indent, ' ');
    switch (j.type()) {
        case Json::value_t::object: {
            if (j.empty()) {
                out += "{}";
                return;
            }
            out += "{\n";
            bool first = true;
            for (auto it = j.begin(); it != j.end(); ++it) {
                if (!first) out += ",\n";
                first = false;
                out += pad_in;
                out += Json(it.key()).dump();
                out += ": ";
                canonical_dump(it.value(), out, indent, depth + 1);
            }
            out += "\n" + pad + "}";
            return;
        }
        case Json::value_t::array: {
            if (j.empty()) {
                out += "[]";
                return;
            }
            out += "[\n";
            bool first = true;
            for (const auto& v : j) {
                if (!first) out += ",\n";
                first = false;
                out += pad_in;
                canonical_dump(v, out, indent, depth + 1);
            }
            out += "\n" + pad + "]";
            return;
        }
        case Json::value_t::number_float: {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%.17g", j.get<double>());
            out += buf;
            return;
        }
        default: out += j.dump(); return;
    }
}

inline std::string canonical_json(const Json& j) {
    std::string out;
    canonical_dump(j, out, 2, 0);
    out += "\n";
    return out;
}

// ---- files --------------------------------------------------------------------

inline void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        require(f.good(), "atomic_write: cannot open ", tmp);
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        require(f.good(), "atomic_write: short write to ", tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "cannot open ", path.string());
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return bytes;
}

inline std::string digest_hex(const std::string& bytes) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(bytes)));
    return buf;
}

// ---- dataset JSONL --------------------------------------------------------------

namespace detail {

inline void check_keys(const Json& obj, const std::vector<std::string>& allowed,
                       const std::string& where) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool ok = false;
        for (const auto& k : allowed)
            if (it.key() == k) ok = true;
        require(ok, where, ": unknown field '", it.key(), "'");
    }
}

}  // namespace detail

inline Json user_to_json(const UserRecord& user) {
    Json j;
    j["user_id"] = user.user_id;
    Json events = Json::array();
    for (const auto& ev : user.events) events.push_back({ev.day, ev.slot, ev.loc, ev.behavior});
    j["events"] = std::move(events);
    Json truth;
    truth["home"] = user.truth.home_loc;
    truth["work"] = user.truth.work_loc;
    truth["hobbies"] = user.truth.hobbies;
    Json scenes = Json::array();
    for (const auto& day : user.truth.scene_labels) {
        Json row = Json::array();
        for (int s : day) row.push_back(scene_names()[static_cast<std::size_t>(s)]);
        scenes.push_back(std::move(row));
    }
    truth["scenes"] = std::move(scenes);
    Json keys = Json::array();
    for (const auto& [b, scene] : user.truth.key_behaviors)
        keys.push_back({b, scene_names()[static_cast<std::size_t>(scene)]});
    truth["key_behaviors"] = std::move(keys);
    Json patterns = Json::array();
    for (const auto& p : user.truth.patterns) {
        Json pj;
        pj["trigger_kind"] = p.trigger_is_scene ? "scene" : "behavior";
        pj["trigger"] = p.trigger;
        pj["consequent"] = p.consequent;
        pj["band"] = p.timing_band;
        pj["support"] = p.support;
        patterns.push_back(std::move(pj));
    }
    truth["patterns"] = std::move(patterns);
    truth["summary_tokens"] = user.truth.feature_summary;
    j["truth"] = std::move(truth);
    return j;
}

inline int scene_id_by_name(const std::string& name, const std::string& where) {
    for (int s = 0; s < kSceneCount; ++s)
        if (name == scene_names()[static_cast<std::size_t>(s)]) return s;
    fail(where, ": unknown scene '", name, "'");
}

// Events are serialized as bare four-tuples; the absolute day is rebuilt from
// the day-of-week cycle (valid while no user is silent for a whole week).
inline UserRecord user_from_json(const Json& j, const std::string& where) {
    require(j.is_object(), where, ": user record must be an object");
    detail::check_keys(j, {"user_id", "events", "truth"}, where);
    require(j.contains("user_id") && j.contains("events") && j.contains("truth"), where,
            ": missing required field");
    UserRecord user;
    user.user_id = j.at("user_id").get<std::uint64_t>();
    const auto& events = j.at("events");
    require(events.is_array() && !events.empty(), where, ": events must be a nonempty array");
    int abs_day = 0;
    for (std::size_t i = 0; i < events.size(); ++i) {
        const auto& ev = events[i];
        require(ev.is_array() && ev.size() == 4, where, ": event ", i,
                " must be a [day,slot,loc,behavior] four-tuple");
        BehaviorEvent e;
        e.day = ev[0].get<int>();
        e.slot = ev[1].get<int>();
        e.loc = ev[2].get<int>();
        e.behavior = ev[3].get<int>();
        require(e.day >= 0 && e.day < kDaysPerWeek, where, ": event ", i, " day out of range");
        require(e.slot >= 0 && e.slot < kSlotsPerDay, where, ": event ", i, " slot out of range");
        if (!user.events.empty()) {
            const auto& prev = user.events.back();
            int delta = (e.day - prev.day + kDaysPerWeek) % kDaysPerWeek;
            if (delta == 0 && e.slot < prev.slot) delta = kDaysPerWeek;
            abs_day += delta;
        }
        e.abs_day = abs_day;
        require(user.events.empty() || e.abs_slot() >= user.events.back().abs_slot(), where,
                ": event ", i, " breaks (day, slot) ordering");
        user.events.push_back(e);
    }
    const auto& truth = j.at("truth");
    detail::check_keys(truth, {"home", "work", "hobbies", "scenes", "key_behaviors", "patterns",
                               "summary_tokens"},
                       where);
    user.truth.home_loc = truth.at("home").get<int>();
    user.truth.work_loc = truth.at("work").get<int>();
    user.truth.hobbies = truth.at("hobbies").get<std::vector<int>>();
    for (const auto& day : truth.at("scenes")) {
        std::vector<int> row;
        for (const auto& s : day) row.push_back(scene_id_by_name(s.get<std::string>(), where));
        require(static_cast<int>(row.size()) == kBandCount, where,
                ": scene row must cover all ", kBandCount, " slot bands");
        user.truth.scene_labels.push_back(std::move(row));
    }
    for (const auto& kb : truth.at("key_behaviors")) {
        require(kb.is_array() && kb.size() == 2, where, ": key_behaviors entries are pairs");
        user.truth.key_behaviors.emplace_back(kb[0].get<int>(),
                                              scene_id_by_name(kb[1].get<std::string>(), where));
    }
    for (const auto& pj : truth.at("patterns")) {
        detail::check_keys(pj, {"trigger_kind", "trigger", "consequent", "band", "support"}, where);
        PatternDescriptor p;
        const std::string kind = pj.at("trigger_kind").get<std::string>();
        require(kind == "behavior" || kind == "scene", where, ": bad trigger_kind '", kind, "'");
        p.trigger_is_scene = kind == "scene";
        p.trigger = pj.at("trigger").get<int>();
        p.consequent = pj.at("consequent").get<int>();
        p.timing_band = pj.at("band").get<int>();
        p.support = pj.at("support").get<double>();
        user.truth.patterns.push_back(p);
    }
    user.truth.feature_summary = truth.at("summary_tokens").get<std::vector<std::string>>();
    return user;
}

inline std::string corpus_to_jsonl(const std::vector<UserRecord>& users) {
    std::string out;
    for (const auto& user : users) {
        out += user_to_json(user).dump();
        out += '\n';
    }
    return out;
}

inline std::vector<UserRecord> corpus_from_jsonl(const std::string& bytes) {
    std::vector<UserRecord> users;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start < bytes.size()) {
        std::size_t end = bytes.find('\n', start);
        if (end == std::string::npos) end = bytes.size();
        ++line_no;
        const std::string line = bytes.substr(start, end - start);
        start = end + 1;
        if (line.empty()) continue;
        Json j;
        try {
            j = Json::parse(line);
        } catch (const std::exception& e) {
            fail("line ", line_no, ": invalid JSON (", e.what(), ")");
        }
        users.push_back(user_from_json(j, str_cat("line ", line_no)));
    }
    return users;
}

inline void write_corpus(const std::filesystem::path& path, const std::vector<UserRecord>& users) {
    atomic_write(path, corpus_to_jsonl(users));
}

inline std::vector<UserRecord> read_corpus(const std::filesystem::path& path) {
    return corpus_from_jsonl(read_file(path));
}

// ---- checkpoints -----------------------------------------------------------------

// Binary layout (all integers little-endian):
//   "BUAC" | u32 version | u64 config digest | u32 tag len | tag bytes |
//   u32 tensor count | per tensor: u32 name len | name | u32 rank |
//   u32 dims[rank] | f32 data
constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct ByteReader {
    const std::string& bytes;
    std::size_t pos = 0;

    void need(std::size_t n) {
        require(pos + n <= bytes.size(), "unexpected end of checkpoint");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + static_cast<std::size_t>(i)])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + static_cast<std::size_t>(i)])) << (8 * i);
        pos += 8;
        return v;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s = bytes.substr(pos, n);
        pos += n;
        return s;
    }
    float f32() {
        need(4);
        std::uint32_t v = u32();
        // pos already advanced by u32
        float f;
        std::memcpy(&f, &v, 4);
        return f;
    }
};

}  // namespace detail

struct CheckpointTensor {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

struct Checkpoint {
    std::uint64_t config_digest = 0;
    std::string stage_tag;
    std::vector<CheckpointTensor> tensors;  // sorted by name on save
};

inline std::string checkpoint_to_bytes(const Checkpoint& ck) {
    std::string out = "BUAC";
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u64(out, ck.config_digest);
    detail::put_u32(out, static_cast<std::uint32_t>(ck.stage_tag.size()));
    out += ck.stage_tag;
    std::vector<const CheckpointTensor*> sorted;
    for (const auto& t : ck.tensors) sorted.push_back(&t);
    std::sort(sorted.begin(), sorted.end(),
              [](const CheckpointTensor* a, const CheckpointTensor* b) { return a->name < b->name; });
    detail::put_u32(out, static_cast<std::uint32_t>(sorted.size()));
    for (const auto* t : sorted) {
        detail::put_u32(out, static_cast<std::uint32_t>(t->name.size()));
        out += t->name;
        detail::put_u32(out, static_cast<std::uint32_t>(t->shape.size()));
        for (int d : t->shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
        for (float f : t->data) {
            std::uint32_t v;
            std::memcpy(&v, &f, 4);
            detail::put_u32(out, v);
        }
    }
    return out;
}

inline Checkpoint checkpoint_from_bytes(const std::string& bytes) {
    detail::ByteReader r{bytes};
    require(r.str(4) == "BUAC", "checkpoint: bad magic");
    const std::uint32_t version = r.u32();
    require(version == kCheckpointVersion, "checkpoint: unsupported version ", version);
    Checkpoint ck;
    ck.config_digest = r.u64();
    ck.stage_tag = r.str(r.u32());
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        CheckpointTensor t;
        t.name = r.str(r.u32());
        const std::uint32_t rank = r.u32();
        std::size_t n = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            t.shape.push_back(static_cast<int>(r.u32()));
            n *= static_cast<std::size_t>(t.shape.back());
        }
        t.data.reserve(n);
        for (std::size_t k = 0; k < n; ++k) t.data.push_back(r.f32());
        ck.tensors.push_back(std::move(t));
    }
    require(r.pos == bytes.size(), "checkpoint: trailing bytes after tensor table");
    return ck;
}

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    atomic_write(path, checkpoint_to_bytes(ck));
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
    return checkpoint_from_bytes(read_file(path));
}

// ---- model <-> checkpoint bridge ---------------------------------------------------

template <class S>
Checkpoint checkpoint_from_params(NamedParams<S>& params, std::uint64_t config_digest,
                                  const std::string& stage_tag) {
    Checkpoint ck;
    ck.config_digest = config_digest;
    ck.stage_tag = stage_tag;
    for (auto& [name, tensor] : params) {
        CheckpointTensor t;
        t.name = name;
        t.shape = tensor.shape();
        t.data.reserve(tensor.size());
        for (S v : tensor.data()) t.data.push_back(static_cast<float>(v));
        ck.tensors.push_back(std::move(t));
    }
    return ck;
}

template <class S>
void load_params_from_checkpoint(NamedParams<S>& params, const Checkpoint& ck,
                                 std::uint64_t expected_digest, bool warn_on_mismatch = true) {
    if (warn_on_mismatch && ck.config_digest != expected_digest)
        std::fprintf(stderr,
                     "warning: checkpoint config digest %016llx does not match current config %016llx\n",
                     static_cast<unsigned long long>(ck.config_digest),
                     static_cast<unsigned long long>(expected_digest));
    std::map<std::string, const CheckpointTensor*> by_name;
    for (const auto& t : ck.tensors) by_name[t.name] = &t;
    std::vector<std::string> problems;
    for (auto& [name, tensor] : params) {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            problems.push_back(name + " (missing)");
            continue;
        }
        if (it->second->shape != tensor.shape()) {
            problems.push_back(name + " (shape " + shape_str(it->second->shape) + " vs " +
                               shape_str(tensor.shape()) + ")");
            continue;
        }
    }
    require(problems.empty(), "checkpoint load: mismatched tensors: ", [&] {
        std::string s;
        for (const auto& p : problems) s += "\n  " + p;
        return s;
    }());
    for (auto& [name, tensor] : params) {
        const auto& src = by_name.at(name)->data;
        auto& dst = tensor.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<S>(src[i]);
    }
}

// ---- metric report JSON --------------------------------------------------------------

inline Json report_to_json(const metrics::MetricsReport& report) {
    Json j;
    if (report.prediction) {
        const auto& p = *report.prediction;
        Json pj;
        pj["rec_w"] = p.rec_w;
        pj["prec_w"] = p.prec_w;
        pj["prec_w_eq7"] = p.prec_w_eq7;
        auto put_opt = [&](const char* key, const std::optional<double>& v) {
            if (v) pj[key] = *v;
            else pj[key] = nullptr;
        };
        put_opt("overall", p.overall);
        put_opt("head", p.head);
        put_opt("medium", p.medium);
        put_opt("tail", p.tail);
        pj["support"] = {{"head", p.support_head}, {"medium", p.support_medium}, {"tail", p.support_tail}};
        pj["samples"] = p.samples;
        pj["malformed"] = p.malformed;
        pj["majority_baseline"] = p.majority_baseline;
        j["prediction"] = std::move(pj);
    }
    if (report.generation) {
        const auto& g = *report.generation;
        auto channel = [](const metrics::ChannelMetrics& c) {
            return Json{{"bleu", c.bleu}, {"tvd", c.tvd}, {"jsd", c.jsd}};
        };
        j["generation"] = {{"event", channel(g.event)},
                           {"timestamp", channel(g.timestamp)},
                           {"location", channel(g.location)},
                           {"samples", g.samples},
                           {"malformed", g.malformed}};
    }
    if (report.substitution) {
        Json rows = Json::array();
        for (const auto& r : report.substitution->rows) {
            rows.push_back({{"config", r.name},
                            {"accuracy", r.accuracy},
                            {"correct", r.correct},
                            {"r2w", r.r2w},
                            {"w2r", r.w2r},
                            {"r2w_count", r.r2w_count},
                            {"w2r_count", r.w2r_count},
                            {"difference", r.difference}});
        }
        j["substitution"] = {{"rows", std::move(rows)}, {"samples", report.substitution->samples}};
    }
    return j;
}

}  // namespace bua
