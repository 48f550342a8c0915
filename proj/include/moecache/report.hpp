#ifndef MOECACHE_REPORT_HPP
#define MOECACHE_REPORT_HPP

/*
 * Report files. Every writer has a reader so that emitted files can be checked
 * by parsing them back.
 *
 *   report.json      {"schema_version": 1, "rows": [ {SimReport fields}, ... ]}
 *   report.csv       same rows, one header line
 *   hit_rate.csv     policy,capacity,hit_rate,hit_rate_warm
 *   throughput.csv   policy,capacity,tokens_per_second_est,decode_latency_ms
 *   diagnostics.json {"schema_version": 1, "capacity", "refetch_window", "refetch": [...],
 *                     "duel": {"policies": [...], "fraction_row_better": [[...]]}}
 *   timeline_<policy>.csv  kind,seq_id,phase,step,layer,experts
 *
 * Latencies are integer nanoseconds in the machine-readable files.
 */

#include "moecache/errors.hpp"
#include "moecache/simulator.hpp"

#include "json.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

namespace moecache
{

inline constexpr int report_schema_version = 1;

namespace detail
{

// Shortest text that parses back to the same double.
inline std::string fmt_double(double x)
{
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, r.ptr);
}

inline std::vector<std::string> split_csv(std::string const & line)
{
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ','))
        out.push_back(cell);
    if (!line.empty() && line.back() == ',')
        out.emplace_back();
    return out;
}

template <typename T>
T parse_cell(std::string const & s, std::size_t line)
{
    T v{};
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc{} || r.ptr != s.data() + s.size())
        throw MalformedFile(line, "bad number '" + s + "'");
    return v;
}

inline std::vector<std::vector<std::string>> read_csv(std::istream & is, std::vector<std::string> const & header)
{
    std::string line;
    if (!std::getline(is, line))
        throw MalformedFile(1, "empty file");
    if (split_csv(line) != header)
        throw MalformedFile(1, "unexpected header '" + line + "'");
    std::vector<std::vector<std::string>> rows;
    std::size_t n = 1;
    while (std::getline(is, line)) {
        ++n;
        auto cells = split_csv(line);
        if (cells.size() != header.size())
            throw MalformedFile(n, "expected " + std::to_string(header.size()) + " columns, got " +
                                       std::to_string(cells.size()));
        rows.push_back(std::move(cells));
    }
    return rows;
}

inline void write_file(std::string const & path, std::string const & text)
{
    std::ofstream os(path, std::ios::binary);
    if (!os)
        throw Error("cannot write " + path);
    os << text;
    if (!os.flush())
        throw Error("write failed: " + path);
}

inline std::string read_file(std::string const & path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw Error("cannot read " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

} // namespace detail

inline std::vector<std::string> const & report_columns()
{
    static std::vector<std::string> const cols = {
        "policy",         "capacity",           "hits",          "misses",
        "compulsory_misses", "hit_rate",        "hit_rate_warm", "io_count",
        "prefill_hits",   "prefill_misses",     "decode_hits",   "decode_misses",
        "decode_steps",   "est_decode_latency_ns", "est_prefill_latency_ns", "tokens_per_second_est",
        "refetch_window", "decode_evictions",   "refetches",     "refetch_within_w"};
    return cols;
}

namespace detail
{

inline std::vector<std::string> report_cells(SimReport const & r)
{
    auto u = [](auto x) { return std::to_string(x); };
    return {r.policy,
            u(r.capacity),
            u(r.hits),
            u(r.misses),
            u(r.compulsory_misses),
            fmt_double(r.hit_rate),
            fmt_double(r.hit_rate_warm),
            u(r.io_count),
            u(r.prefill_hits),
            u(r.prefill_misses),
            u(r.decode_hits),
            u(r.decode_misses),
            u(r.decode_steps),
            u(r.est_decode_latency.count()),
            u(r.est_prefill_latency.count()),
            fmt_double(r.tokens_per_second_est),
            u(r.refetch_window),
            u(r.decode_evictions),
            u(r.refetches),
            fmt_double(r.refetch_within_w)};
}

inline SimReport report_from_cells(std::vector<std::string> const & c, std::size_t line)
{
    SimReport r;
    std::size_t i = 0;
    auto u64 = [&] { return parse_cell<std::uint64_t>(c[i++], line); };
    auto dbl = [&] { return parse_cell<double>(c[i++], line); };
    r.policy = c[i++];
    r.capacity = u64();
    r.hits = u64();
    r.misses = u64();
    r.compulsory_misses = u64();
    r.hit_rate = dbl();
    r.hit_rate_warm = dbl();
    r.io_count = u64();
    r.prefill_hits = u64();
    r.prefill_misses = u64();
    r.decode_hits = u64();
    r.decode_misses = u64();
    r.decode_steps = u64();
    r.est_decode_latency = Duration(parse_cell<Duration::rep>(c[i++], line));
    r.est_prefill_latency = Duration(parse_cell<Duration::rep>(c[i++], line));
    r.tokens_per_second_est = dbl();
    r.refetch_window = parse_cell<std::uint32_t>(c[i++], line);
    r.decode_evictions = u64();
    r.refetches = u64();
    r.refetch_within_w = dbl();
    return r;
}

} // namespace detail

// ---- report.json

inline nlohmann::ordered_json report_row_json(SimReport const & r)
{
    nlohmann::ordered_json j;
    j["policy"] = r.policy;
    j["capacity"] = r.capacity;
    j["hits"] = r.hits;
    j["misses"] = r.misses;
    j["compulsory_misses"] = r.compulsory_misses;
    j["hit_rate"] = r.hit_rate;
    j["hit_rate_warm"] = r.hit_rate_warm;
    j["io_count"] = r.io_count;
    j["prefill_hits"] = r.prefill_hits;
    j["prefill_misses"] = r.prefill_misses;
    j["decode_hits"] = r.decode_hits;
    j["decode_misses"] = r.decode_misses;
    j["decode_steps"] = r.decode_steps;
    j["est_decode_latency_ns"] = r.est_decode_latency.count();
    j["est_prefill_latency_ns"] = r.est_prefill_latency.count();
    j["tokens_per_second_est"] = r.tokens_per_second_est;
    j["refetch_window"] = r.refetch_window;
    j["decode_evictions"] = r.decode_evictions;
    j["refetches"] = r.refetches;
    j["refetch_within_w"] = r.refetch_within_w;
    return j;
}

inline std::string report_json(std::vector<SimReport> const & rows)
{
    nlohmann::ordered_json j;
    j["schema_version"] = report_schema_version;
    j["rows"] = nlohmann::ordered_json::array();
    for (auto const & r : rows)
        j["rows"].push_back(report_row_json(r));
    return j.dump(2) + "\n";
}

inline std::vector<SimReport> parse_report_json(std::string const & text)
{
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (nlohmann::json::parse_error const & e) {
        throw MalformedFile(0, std::string("report is not valid JSON: ") + e.what());
    }
    if (!j.is_object() || j.size() != 2 || !j.contains("schema_version") || !j.contains("rows"))
        throw MalformedFile(0, "report must hold exactly schema_version and rows");
    if (j["schema_version"] != report_schema_version)
        throw MalformedFile(0, "unsupported schema_version");
    std::vector<SimReport> out;
    std::size_t i = 0;
    for (auto const & row : j["rows"]) {
        ++i;
        if (!row.is_object() || row.size() != report_columns().size())
            throw MalformedFile(i, "row has the wrong number of fields");
        std::vector<std::string> cells;
        for (auto const & col : report_columns()) {
            if (!row.contains(col))
                throw MalformedFile(i, "row lacks '" + col + "'");
            auto const & v = row[col];
            if (v.is_string())
                cells.push_back(v.get<std::string>());
            else if (v.is_number_float())
                cells.push_back(detail::fmt_double(v.get<double>()));
            else if (v.is_number_unsigned())
                cells.push_back(std::to_string(v.get<std::uint64_t>()));
            else if (v.is_number_integer())
                cells.push_back(std::to_string(v.get<std::int64_t>()));
            else
                throw MalformedFile(i, "field '" + col + "' has the wrong type");
        }
        out.push_back(detail::report_from_cells(cells, i));
    }
    return out;
}

// ---- report.csv

inline std::string report_csv(std::vector<SimReport> const & rows)
{
    std::ostringstream os;
    auto line = [&](std::vector<std::string> const & cells) {
        for (std::size_t i = 0; i < cells.size(); ++i)
            os << (i ? "," : "") << cells[i];
        os << '\n';
    };
    line(report_columns());
    for (auto const & r : rows)
        line(detail::report_cells(r));
    return os.str();
}

inline std::vector<SimReport> parse_report_csv(std::string const & text)
{
    std::istringstream is(text);
    auto rows = detail::read_csv(is, report_columns());
    std::vector<SimReport> out;
    for (std::size_t i = 0; i < rows.size(); ++i)
        out.push_back(detail::report_from_cells(rows[i], i + 2));
    return out;
}

// ---- plot series

struct SeriesPoint
{
    std::string policy;
    std::size_t capacity = 0;
    double a = 0.0;
    double b = 0.0;
};

inline std::vector<std::string> const & hit_rate_columns()
{
    static std::vector<std::string> const c = {"policy", "capacity", "hit_rate", "hit_rate_warm"};
    return c;
}

inline std::vector<std::string> const & throughput_columns()
{
    static std::vector<std::string> const c = {"policy", "capacity", "tokens_per_second_est", "decode_latency_ms"};
    return c;
}

namespace detail
{

inline std::string series_csv(std::vector<std::string> const & cols, std::vector<SeriesPoint> const & pts)
{
    std::ostringstream os;
    os << cols[0] << ',' << cols[1] << ',' << cols[2] << ',' << cols[3] << '\n';
    for (auto const & p : pts)
        os << p.policy << ',' << p.capacity << ',' << fmt_double(p.a) << ',' << fmt_double(p.b) << '\n';
    return os.str();
}

inline std::vector<SeriesPoint> parse_series(std::string const & text, std::vector<std::string> const & cols)
{
    std::istringstream is(text);
    std::vector<SeriesPoint> out;
    std::size_t n = 1;
    for (auto const & c : read_csv(is, cols)) {
        ++n;
        out.push_back({c[0], parse_cell<std::size_t>(c[1], n), parse_cell<double>(c[2], n),
                       parse_cell<double>(c[3], n)});
    }
    return out;
}

} // namespace detail

inline std::string hit_rate_series_csv(std::vector<SimReport> const & rows)
{
    std::vector<SeriesPoint> pts;
    for (auto const & r : rows)
        pts.push_back({r.policy, r.capacity, r.hit_rate, r.hit_rate_warm});
    return detail::series_csv(hit_rate_columns(), pts);
}

inline std::string throughput_series_csv(std::vector<SimReport> const & rows)
{
    std::vector<SeriesPoint> pts;
    for (auto const & r : rows)
        pts.push_back({r.policy, r.capacity, r.tokens_per_second_est,
                       std::chrono::duration<double, std::milli>(r.est_decode_latency).count()});
    return detail::series_csv(throughput_columns(), pts);
}

inline std::vector<SeriesPoint> parse_hit_rate_series(std::string const & text)
{
    return detail::parse_series(text, hit_rate_columns());
}

inline std::vector<SeriesPoint> parse_throughput_series(std::string const & text)
{
    return detail::parse_series(text, throughput_columns());
}

// ---- human-readable table

inline std::string report_table(std::vector<SimReport> const & rows)
{
    std::ostringstream os;
    os << std::left << std::setw(8) << "policy" << std::right << std::setw(9) << "capacity" << std::setw(10)
       << "hit_rate" << std::setw(10) << "warm" << std::setw(11) << "io_count" << std::setw(14) << "decode_ms"
       << std::setw(12) << "tokens/s" << std::setw(10) << "refetch" << '\n';
    os << std::fixed;
    for (auto const & r : rows) {
        os << std::left << std::setw(8) << r.policy << std::right << std::setw(9) << r.capacity
           << std::setprecision(4) << std::setw(10) << r.hit_rate << std::setw(10) << r.hit_rate_warm
           << std::setw(11) << r.io_count << std::setprecision(3) << std::setw(14)
           << std::chrono::duration<double, std::milli>(r.est_decode_latency).count() << std::setprecision(3)
           << std::setw(12) << r.tokens_per_second_est << std::setprecision(4) << std::setw(10)
           << r.refetch_within_w << '\n';
    }
    return os.str();
}

// ---- diagnostics.json

struct RefetchEntry
{
    std::string policy;
    std::uint64_t decode_evictions = 0;
    std::uint64_t refetches = 0;
    double refetch_within_w = 0.0; // online counter
    double refetch_from_log = 0.0; // recomputed from the eviction log

    friend bool operator==(RefetchEntry const &, RefetchEntry const &) = default;
};

struct Diagnostics
{
    std::size_t capacity = 0;
    std::uint32_t refetch_window = 0;
    std::vector<RefetchEntry> refetch;
    std::vector<std::string> duel_policies;
    std::vector<std::vector<double>> duel; // [row][col] = fraction of decided evictions where row chose better

    friend bool operator==(Diagnostics const &, Diagnostics const &) = default;
};

inline std::string diagnostics_json(Diagnostics const & d)
{
    nlohmann::ordered_json j;
    j["schema_version"] = report_schema_version;
    j["capacity"] = d.capacity;
    j["refetch_window"] = d.refetch_window;
    j["refetch"] = nlohmann::ordered_json::array();
    for (auto const & r : d.refetch) {
        nlohmann::ordered_json e;
        e["policy"] = r.policy;
        e["decode_evictions"] = r.decode_evictions;
        e["refetches"] = r.refetches;
        e["refetch_within_w"] = r.refetch_within_w;
        e["refetch_from_log"] = r.refetch_from_log;
        j["refetch"].push_back(e);
    }
    j["duel"]["policies"] = d.duel_policies;
    j["duel"]["fraction_row_better"] = d.duel;
    return j.dump(2) + "\n";
}

inline Diagnostics parse_diagnostics_json(std::string const & text)
{
    try {
        auto j = nlohmann::json::parse(text);
        if (j.at("schema_version") != report_schema_version)
            throw MalformedFile(0, "unsupported schema_version");
        Diagnostics d;
        d.capacity = j.at("capacity").get<std::size_t>();
        d.refetch_window = j.at("refetch_window").get<std::uint32_t>();
        for (auto const & e : j.at("refetch"))
            d.refetch.push_back({e.at("policy").get<std::string>(), e.at("decode_evictions").get<std::uint64_t>(),
                                 e.at("refetches").get<std::uint64_t>(), e.at("refetch_within_w").get<double>(),
                                 e.at("refetch_from_log").get<double>()});
        d.duel_policies = j.at("duel").at("policies").get<std::vector<std::string>>();
        d.duel = j.at("duel").at("fraction_row_better").get<std::vector<std::vector<double>>>();
        auto const n = d.duel_policies.size();
        if (d.duel.size() != n)
            throw MalformedFile(0, "duel matrix has the wrong number of rows");
        for (auto const & row : d.duel)
            if (row.size() != n)
                throw MalformedFile(0, "duel matrix is not square");
        return d;
    } catch (nlohmann::json::exception const & e) {
        throw MalformedFile(0, std::string("diagnostics: ") + e.what());
    }
}

// ---- eviction timeline

struct TimelineRow
{
    std::string kind; // "access" or "evict"
    std::uint64_t seq_id = 0;
    Phase phase = Phase::decode;
    std::uint64_t step = 0;
    std::uint32_t layer = 0;
    std::vector<ExpertId> experts; // routed set, or the single victim

    friend bool operator==(TimelineRow const &, TimelineRow const &) = default;
};

inline std::vector<std::string> const & timeline_columns()
{
    static std::vector<std::string> const c = {"kind", "seq_id", "phase", "step", "layer", "experts"};
    return c;
}

/*
 * One row per trace event plus one per eviction, in trace order; an eviction
 * follows the event that caused it. Prefill evictions follow the last prefill
 * event of their sequence and layer.
 */
inline std::vector<TimelineRow> build_timeline(RoutingTrace const & trace, std::vector<EvictionRecord> log)
{
    auto key = [](std::uint64_t seq, Phase ph, std::uint64_t step, std::uint32_t layer) {
        return std::make_tuple(seq, static_cast<int>(ph), ph == Phase::prefill ? 0 : step, layer);
    };
    std::stable_sort(log.begin(), log.end(), [&](EvictionRecord const & a, EvictionRecord const & b) {
        return key(a.seq_id, a.phase, a.step, a.layer) < key(b.seq_id, b.phase, b.step, b.layer);
    });
    std::vector<TimelineRow> out;
    out.reserve(trace.events.size() + log.size());
    std::size_t li = 0;
    for (std::size_t i = 0; i < trace.events.size(); ++i) {
        auto const & ev = trace.events[i];
        out.push_back({"access", ev.seq_id, ev.phase, ev.step, ev.layer, ev.experts});
        // flush evictions once the last event with this key has been emitted
        auto const k = key(ev.seq_id, ev.phase, ev.step, ev.layer);
        bool last = true;
        for (std::size_t j = i + 1; j < trace.events.size(); ++j) {
            auto const & nx = trace.events[j];
            if (nx.seq_id != ev.seq_id || nx.phase != ev.phase)
                break;
            if (key(nx.seq_id, nx.phase, nx.step, nx.layer) == k) {
                last = false;
                break;
            }
            if (ev.phase == Phase::decode)
                break;
        }
        if (!last)
            continue;
        while (li < log.size() && key(log[li].seq_id, log[li].phase, log[li].step, log[li].layer) == k) {
            auto const & e = log[li++];
            out.push_back({"evict", e.seq_id, e.phase, ev.step, e.layer, {e.victim}});
        }
    }
    if (li != log.size())
        throw Error("eviction log does not match the trace");
    return out;
}

inline std::string timeline_csv(std::vector<TimelineRow> const & rows)
{
    std::ostringstream os;
    os << "kind,seq_id,phase,step,layer,experts\n";
    for (auto const & r : rows) {
        os << r.kind << ',' << r.seq_id << ',' << to_string(r.phase) << ',' << r.step << ',' << r.layer << ',';
        for (std::size_t i = 0; i < r.experts.size(); ++i)
            os << (i ? ";" : "") << r.experts[i];
        os << '\n';
    }
    return os.str();
}

inline std::vector<TimelineRow> parse_timeline_csv(std::string const & text)
{
    std::istringstream is(text);
    std::vector<TimelineRow> out;
    std::size_t n = 1;
    for (auto const & c : detail::read_csv(is, timeline_columns())) {
        ++n;
        TimelineRow r;
        r.kind = c[0];
        if (r.kind != "access" && r.kind != "evict")
            throw MalformedFile(n, "kind must be access or evict");
        r.seq_id = detail::parse_cell<std::uint64_t>(c[1], n);
        if (c[2] == "prefill")
            r.phase = Phase::prefill;
        else if (c[2] == "decode")
            r.phase = Phase::decode;
        else
            throw MalformedFile(n, "phase must be prefill or decode");
        r.step = detail::parse_cell<std::uint64_t>(c[3], n);
        r.layer = detail::parse_cell<std::uint32_t>(c[4], n);
        std::istringstream es(c[5]);
        std::string tok;
        while (std::getline(es, tok, ';'))
            r.experts.push_back(detail::parse_cell<ExpertId>(tok, n));
        if (r.experts.empty() || (r.kind == "evict" && r.experts.size() != 1))
            throw MalformedFile(n, "bad experts cell");
        out.push_back(std::move(r));
    }
    return out;
}

} // namespace moecache

#endif
