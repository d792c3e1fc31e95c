#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace emargin {

// One evaluation run's scores, serialized as flat JSON so runs diff cleanly.
struct EvalReport {
    std::string dataset;
    std::uint64_t seed = 0;
    std::string loss_kind;
    double dbi = 0.0;
    double silhouette = 0.0;
    double accuracy = 0.0;
    double f1_macro = 0.0;
    double f1_weighted = 0.0;
    double precision_macro = 0.0;
    double precision_weighted = 0.0;
    double recall_macro = 0.0;
    double recall_weighted = 0.0;
    std::string config_digest;
};

// 64-bit FNV-1a over raw bytes; hex form is the config fingerprint carried in
// reports.
std::uint64_t fnv1a64(const std::string& bytes);
std::string fnv1a64_hex(const std::string& bytes);

std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(const std::string& text, const std::string& context);

void write_report(const EvalReport& report, const std::string& path);
EvalReport read_report(const std::string& path);

// Markdown tables, one per dataset: rows are loss kinds, cells are
// "mean±std" over that group's seeds with the sample (n-1) standard
// deviation; a single run reports a std of 0.00. Duplicate
// (dataset, loss_kind, seed) triples are rejected.
std::string compare_markdown(const std::vector<EvalReport>& reports);

}  // namespace emargin
