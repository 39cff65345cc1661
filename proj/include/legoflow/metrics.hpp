// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdio>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "legoflow/error.hpp"
#include "legoflow/lego.hpp"
#include "legoflow/simt.hpp"

namespace legoflow {

/// One JSON object per worker: {step, worker, task, loss, lr, tau, ngpu_histogram}.
inline std::vector<nlohmann::json> iteration_records(const IterationMetrics& m) {
  std::vector<nlohmann::json> out;
  for (const WorkerRecord& w : m.workers) {
    nlohmann::json j;
    j["step"] = m.step;
    j["worker"] = w.worker;
    j["task"] = w.task_name;
    j["loss"] = w.loss;
    j["lr"] = m.lr;
    j["tau"] = m.tau;
    j["ngpu_histogram"] = m.ngpu_histogram;
    j["bn_mean_deviation"] = m.bn_mean_deviation;
    out.push_back(std::move(j));
  }
  return out;
}

inline void write_jsonl(std::ostream& os, const IterationMetrics& m) {
  for (const auto& j : iteration_records(m)) os << j.dump() << '\n';
}

/// End-of-run facts used by the comparison report.
struct RunSummary {
  std::string run;
  std::string mode;  // e.g. "simt", "per_batch", "simt/no-syncbn"
  std::size_t steps = 0;
  std::map<std::string, double> val_loss;
  std::map<std::string, Path> paths;
  double mean_bn_mean_deviation = 0.0;
};

inline std::string mode_label(const SimtConfig& c) {
  std::string s = to_string(c.sampling);
  if (!c.syncbn) s += "/no-syncbn";
  return s;
}

inline nlohmann::json to_json(const RunSummary& s) {
  nlohmann::json j;
  j["run"] = s.run;
  j["mode"] = s.mode;
  j["steps"] = s.steps;
  j["val_loss"] = s.val_loss;
  nlohmann::json paths = nlohmann::json::object();
  for (const auto& [task, p] : s.paths) paths[task] = p.selections;
  j["paths"] = paths;
  j["mean_bn_mean_deviation"] = s.mean_bn_mean_deviation;
  return j;
}

inline RunSummary run_summary_from_json(const nlohmann::json& j) {
  try {
    RunSummary s;
    s.run = j.at("run").get<std::string>();
    s.mode = j.at("mode").get<std::string>();
    s.steps = j.at("steps").get<std::size_t>();
    s.val_loss = j.at("val_loss").get<std::map<std::string, double>>();
    for (const auto& [task, sel] : j.at("paths").items()) s.paths[task] = Path{sel.get<std::vector<std::size_t>>()};
    s.mean_bn_mean_deviation = j.value("mean_bn_mean_deviation", 0.0);
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad run summary: ") + e.what());
  }
}

/// Pairwise fraction of layers on which two tasks pick the same unit.
inline std::vector<std::vector<double>> path_agreement_matrix(const std::vector<Path>& paths) {
  std::vector<std::vector<double>> m(paths.size(), std::vector<double>(paths.size(), 0.0));
  for (std::size_t i = 0; i < paths.size(); ++i)
    for (std::size_t j = 0; j < paths.size(); ++j)
      m[i][j] = static_cast<double>(path_agreement(paths[i], paths[j])) / static_cast<double>(paths[i].layers());
  return m;
}

struct ReportTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

/// Per-task final val losses per run, and each task's routing agreement
/// with the same task in the first run.
inline ReportTable comparison_table(const std::vector<RunSummary>& runs) {
  ReportTable t;
  std::vector<std::string> tasks;
  for (const auto& r : runs)
    for (const auto& [task, loss] : r.val_loss)
      if (std::find(tasks.begin(), tasks.end(), task) == tasks.end()) tasks.push_back(task);
  t.header = {"run", "mode", "steps"};
  for (const auto& task : tasks) t.header.push_back("val:" + task);
  for (const auto& task : tasks) t.header.push_back("agree:" + task);
  auto fmt = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  for (const auto& r : runs) {
    std::vector<std::string> row{r.run, r.mode, std::to_string(r.steps)};
    for (const auto& task : tasks) {
      auto it = r.val_loss.find(task);
      row.push_back(it == r.val_loss.end() ? "-" : fmt(it->second));
    }
    for (const auto& task : tasks) {
      auto mine = r.paths.find(task);
      auto ref = runs.front().paths.find(task);
      if (mine == r.paths.end() || ref == runs.front().paths.end() ||
          mine->second.selections.size() != ref->second.selections.size()) {
        row.push_back("-");
      } else {
        row.push_back(fmt(static_cast<double>(path_agreement(mine->second, ref->second)) /
                          static_cast<double>(ref->second.layers())));
      }
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline void write_aligned(std::ostream& os, const ReportTable& t) {
  std::vector<std::size_t> width(t.header.size(), 0);
  for (std::size_t c = 0; c < t.header.size(); ++c) width[c] = t.header[c].size();
  for (const auto& row : t.rows)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      os << cells[c];
      if (c + 1 < cells.size()) os << std::string(width[c] - cells[c].size() + 2, ' ');
    }
    os << '\n';
  };
  line(t.header);
  for (const auto& row : t.rows) line(row);
}

inline void write_csv(std::ostream& os, const ReportTable& t) {
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) os << (c ? "," : "") << cells[c];
    os << '\n';
  };
  line(t.header);
  for (const auto& row : t.rows) line(row);
}

}  // namespace legoflow
