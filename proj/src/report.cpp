#include "emargin/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "emargin/bytes.hpp"
#include "emargin/errors.hpp"

namespace emargin {

using nlohmann::json;

namespace {

json real_to_json(double v) {
    if (std::isfinite(v)) return v;
    if (std::isnan(v)) return "nan";
    return v > 0 ? "inf" : "-inf";
}

double real_from_json(const json& j, const std::string& what, const std::string& context) {
    if (j.is_number()) return j.get<double>();
    if (j.is_string()) {
        const std::string s = j.get<std::string>();
        if (s == "inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
        if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    }
    throw FormatError(context + ": report field " + what + " is not a real number");
}

const json& field(const json& j, const std::string& name, const std::string& context) {
    auto it = j.find(name);
    if (it == j.end()) {
        throw FormatError(context + ": report missing field " + name);
    }
    return *it;
}

struct MetricColumn {
    const char* name;
    double EvalReport::* member;
};

constexpr MetricColumn kColumns[] = {
    {"dbi", &EvalReport::dbi},
    {"silhouette", &EvalReport::silhouette},
    {"accuracy", &EvalReport::accuracy},
    {"f1_macro", &EvalReport::f1_macro},
    {"f1_weighted", &EvalReport::f1_weighted},
    {"precision_macro", &EvalReport::precision_macro},
    {"precision_weighted", &EvalReport::precision_weighted},
    {"recall_macro", &EvalReport::recall_macro},
    {"recall_weighted", &EvalReport::recall_weighted},
};

std::string mean_std_cell(const std::vector<double>& values) {
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double std_dev = 0.0;
    if (values.size() > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - mean) * (v - mean);
        std_dev = std::sqrt(ss / static_cast<double>(values.size() - 1));
    }
    char cell[64];
    std::snprintf(cell, sizeof(cell), "%.2f±%.2f", mean, std_dev);
    return cell;
}

}  // namespace

std::uint64_t fnv1a64(const std::string& bytes) {
    std::uint64_t hash = 14695981039346656037ULL;
    for (unsigned char c : bytes) {
        hash ^= c;
        hash *= 1099511628211ULL;
    }
    return hash;
}

std::string fnv1a64_hex(const std::string& bytes) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(bytes)));
    return buf;
}

std::string report_to_json(const EvalReport& report) {
    json j;
    j["dataset"] = report.dataset;
    j["seed"] = report.seed;
    j["loss_kind"] = report.loss_kind;
    for (const MetricColumn& col : kColumns) {
        j[col.name] = real_to_json(report.*(col.member));
    }
    j["config_digest"] = report.config_digest;
    return j.dump(2) + "\n";
}

EvalReport report_from_json(const std::string& text, const std::string& context) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(context + ": bad report JSON: " + e.what());
    }
    EvalReport report;
    report.dataset = field(j, "dataset", context).get<std::string>();
    report.seed = field(j, "seed", context).get<std::uint64_t>();
    report.loss_kind = field(j, "loss_kind", context).get<std::string>();
    for (const MetricColumn& col : kColumns) {
        report.*(col.member) = real_from_json(field(j, col.name, context), col.name, context);
    }
    report.config_digest = field(j, "config_digest", context).get<std::string>();
    return report;
}

void write_report(const EvalReport& report, const std::string& path) {
    bytes::write_file_atomic(path, report_to_json(report));
}

EvalReport read_report(const std::string& path) {
    return report_from_json(bytes::slurp_file(path), path);
}

std::string compare_markdown(const std::vector<EvalReport>& reports) {
    if (reports.empty()) throw DomainError("no reports to compare");

    // dataset -> loss kind -> runs, with duplicate (dataset, loss, seed)
    // triples rejected so a stale file cannot silently skew a mean.
    std::map<std::string, std::map<std::string, std::vector<const EvalReport*>>> groups;
    std::set<std::string> seen;
    for (const EvalReport& r : reports) {
        const std::string key = r.dataset + "\x1f" + r.loss_kind + "\x1f" + std::to_string(r.seed);
        if (!seen.insert(key).second) {
            throw DomainError("duplicate report for dataset '" + r.dataset + "', loss '" +
                              r.loss_kind + "', seed " + std::to_string(r.seed));
        }
        groups[r.dataset][r.loss_kind].push_back(&r);
    }

    std::ostringstream out;
    out << "Cells are mean±std over seeds (sample standard deviation, n-1; a single run"
           " reports 0.00).\n";
    for (const auto& [dataset, by_loss] : groups) {
        out << "\n## " << dataset << "\n\n";
        out << "| loss | seeds |";
        for (const MetricColumn& col : kColumns) out << " " << col.name << " |";
        out << "\n|---|---|";
        for (std::size_t i = 0; i < std::size(kColumns); ++i) out << "---|";
        out << "\n";
        for (const auto& [loss_kind, runs] : by_loss) {
            std::vector<std::uint64_t> seeds;
            for (const EvalReport* r : runs) seeds.push_back(r->seed);
            std::sort(seeds.begin(), seeds.end());
            out << "| " << loss_kind << " | ";
            for (std::size_t i = 0; i < seeds.size(); ++i) {
                out << (i ? "," : "") << seeds[i];
            }
            out << " |";
            for (const MetricColumn& col : kColumns) {
                std::vector<double> values;
                for (const EvalReport* r : runs) values.push_back(r->*(col.member));
                out << " " << mean_std_cell(values) << " |";
            }
            out << "\n";
        }
    }
    return out.str();
}

}  // namespace emargin
