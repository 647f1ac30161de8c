#include "genreplay/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "genreplay/errors.hpp"
#include "genreplay/io.hpp"
#include "genreplay/probability.hpp"

namespace genreplay {

using json = nlohmann::json;

namespace {

struct ScopeCounts {
  std::map<int, int> correct;
  std::map<int, int> total;
};

// Shared scan: per-class correct/total counts under argmax restricted to the
// scope columns.
ScopeCounts scan(Classifier& model, const Subset& eval_split, const std::vector<int>& class_scope,
                 const LabelMap& label_map, int eval_batch) {
  if (eval_split.size() == 0) throw MetricError("top-1 is undefined on an empty dataset");
  std::set<int> scope_set(class_scope.begin(), class_scope.end());
  std::vector<int> columns;
  columns.reserve(class_scope.size());
  for (int gid : class_scope) columns.push_back(label_map.to_column(gid));
  ScopeCounts counts;
  for (int gid : class_scope) counts.total[gid] = 0;
  int n = eval_split.size();
  for (int start = 0; start < n; start += eval_batch) {
    int end = std::min(n, start + eval_batch);
    std::vector<int> rows;
    for (int i = start; i < end; ++i) rows.push_back(i);
    Tensor images = eval_split.gather_images(rows);
    Tensor logits = model.forward(images, Mode::Eval);
    for (int i = 0; i < end - start; ++i) {
      int label = eval_split.label(start + i);
      if (!scope_set.count(label))
        throw MetricError("eval label " + std::to_string(label) + " is outside the class scope");
      int best_idx = 0;
      double best = -1e300;
      for (size_t s = 0; s < columns.size(); ++s) {
        double v = logits.at(i, columns[s]);
        if (v > best) {
          best = v;
          best_idx = static_cast<int>(s);
        }
      }
      int predicted = class_scope[static_cast<size_t>(best_idx)];
      counts.total[label] += 1;
      if (predicted == label) counts.correct[label] += 1;
    }
  }
  return counts;
}

}  // namespace

double top1(Classifier& model, const Subset& eval_split, const std::vector<int>& class_scope,
            const LabelMap& label_map, int eval_batch) {
  ScopeCounts counts = scan(model, eval_split, class_scope, label_map, eval_batch);
  long correct = 0, total = 0;
  for (const auto& [c, t] : counts.total) {
    total += t;
    auto it = counts.correct.find(c);
    if (it != counts.correct.end()) correct += it->second;
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(total);
}

PerClassAccuracy per_class_accuracy(Classifier& model, const Subset& eval_split,
                                    const std::vector<int>& class_scope, const LabelMap& label_map,
                                    int eval_batch) {
  ScopeCounts counts = scan(model, eval_split, class_scope, label_map, eval_batch);
  PerClassAccuracy out;
  for (const auto& [c, t] : counts.total) {
    if (t == 0) {
      out.skipped.push_back(c);
      continue;
    }
    int correct = counts.correct.count(c) ? counts.correct.at(c) : 0;
    out.accuracy[c] = 100.0 * correct / t;
  }
  return out;
}

std::vector<double> projected_probabilities(Classifier& old_model, const Tensor& new_images,
                                            const std::vector<int>& old_class_scope,
                                            const LabelMap& old_label_map, int eval_batch) {
  int n = new_images.dim(0);
  if (n == 0) throw MetricError("projected_probabilities on an empty image set");
  std::vector<int> columns;
  for (int gid : old_class_scope) columns.push_back(old_label_map.to_column(gid));
  int k = static_cast<int>(columns.size());
  std::vector<double> mean(static_cast<size_t>(k), 0.0);
  for (int start = 0; start < n; start += eval_batch) {
    int end = std::min(n, start + eval_batch);
    Tensor chunk = new_images.slice_rows(start, end);
    Tensor logits = old_model.forward(chunk, Mode::Eval);
    Tensor restricted({end - start, k});
    for (int i = 0; i < end - start; ++i)
      for (int j = 0; j < k; ++j) restricted.at(i, j) = logits.at(i, columns[static_cast<size_t>(j)]);
    Tensor probs = row_softmax(restricted);
    for (int i = 0; i < end - start; ++i)
      for (int j = 0; j < k; ++j) mean[static_cast<size_t>(j)] += probs.at(i, j) / n;
  }
  return mean;
}

ForgettingReport forgetting_report(const std::map<int, double>& before,
                                   const std::map<int, double>& after,
                                   const std::map<int, std::string>* class_groups) {
  std::vector<int> only_before, only_after;
  for (const auto& [c, v] : before)
    if (!after.count(c)) only_before.push_back(c);
  for (const auto& [c, v] : after)
    if (!before.count(c)) only_after.push_back(c);
  if (!only_before.empty() || !only_after.empty()) {
    std::string msg = "forgetting_report key mismatch;";
    if (!only_before.empty()) {
      msg += " only in before:";
      for (int c : only_before) msg += " " + std::to_string(c);
    }
    if (!only_after.empty()) {
      msg += " only in after:";
      for (int c : only_after) msg += " " + std::to_string(c);
    }
    throw ConfigError(msg);
  }
  ForgettingReport report;
  for (const auto& [c, b] : before) {
    double a = after.at(c);
    report.entries.push_back({c, b, a, a - b});
  }
  std::sort(report.entries.begin(), report.entries.end(),
            [](const ForgettingEntry& x, const ForgettingEntry& y) {
              if (x.delta != y.delta) return x.delta < y.delta;
              return x.class_id < y.class_id;
            });
  if (class_groups) {
    std::map<std::string, std::pair<double, int>> sums;
    for (const auto& e : report.entries) {
      auto it = class_groups->find(e.class_id);
      if (it == class_groups->end()) continue;
      sums[it->second].first += e.delta;
      sums[it->second].second += 1;
    }
    for (const auto& [g, sc] : sums) report.group_deltas[g] = sc.first / sc.second;
  }
  return report;
}

std::string ForgettingReport::to_csv() const {
  std::ostringstream out;
  out << "# genreplay-forgetting v1\n";
  out << "class_id,before,after,delta\n";
  for (const auto& e : entries)
    out << e.class_id << "," << format_double(e.before) << "," << format_double(e.after) << ","
        << format_double(e.delta) << "\n";
  for (const auto& [g, d] : group_deltas) out << "group:" << g << ",,," << format_double(d) << "\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// MetricsTable

std::string MetricsTable::to_csv() const {
  std::ostringstream out;
  out << "# " << kMetricsSchema << "\n";
  out << "method,seed,task_index,seen_classes,top1_all,top1_old,top1_new\n";
  for (const auto& r : rows) {
    out << method << "," << seed_label << "," << r.task_index << "," << r.seen_classes << ","
        << format_double(r.top1_all) << ",";
    if (r.top1_old) out << format_double(*r.top1_old);
    out << "," << format_double(r.top1_new) << "\n";
  }
  return out.str();
}

std::string MetricsTable::to_json() const {
  json rows_j = json::array();
  for (const auto& r : rows) {
    json pc = json::object();
    for (const auto& [c, a] : r.per_class) pc[std::to_string(c)] = a;
    json row = {{"task_index", r.task_index},
                {"seen_classes", r.seen_classes},
                {"top1_all", r.top1_all},
                {"top1_new", r.top1_new},
                {"per_class", pc}};
    if (r.top1_old) row["top1_old"] = *r.top1_old;
    else row["top1_old"] = nullptr;
    rows_j.push_back(row);
  }
  json j = {{"schema", kMetricsSchema}, {"method", method}, {"seed", seed_label}, {"rows", rows_j}};
  return j.dump(2);
}

MetricsTable MetricsTable::from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != std::string("# ") + kMetricsSchema)
    throw ConfigError("unknown metrics schema: '" + line + "' (expected '# " +
                      std::string(kMetricsSchema) + "')");
  std::getline(in, line);  // column header
  MetricsTable table;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) f.push_back(tok);
    if (f.size() < 7) f.resize(7);
    MetricsRow r;
    table.method = f[0];
    table.seed_label = f[1];
    r.task_index = std::stoi(f[2]);
    r.seen_classes = std::stoi(f[3]);
    r.top1_all = std::stod(f[4]);
    if (!f[5].empty()) r.top1_old = std::stod(f[5]);
    r.top1_new = std::stod(f[6]);
    table.rows.push_back(std::move(r));
  }
  return table;
}

MetricsTable MetricsTable::mean_over(const std::vector<MetricsTable>& tables) {
  if (tables.empty()) throw ConfigError("mean_over needs at least one table");
  MetricsTable mean;
  mean.method = tables[0].method;
  mean.seed_label = "mean";
  size_t nrows = tables[0].rows.size();
  for (const auto& t : tables)
    if (t.rows.size() != nrows) throw ConfigError("metrics tables have differing row counts");
  for (size_t i = 0; i < nrows; ++i) {
    MetricsRow r = tables[0].rows[i];
    double all = 0.0, newv = 0.0, old = 0.0;
    bool has_old = true;
    std::map<int, double> pc;
    for (const auto& t : tables) {
      const MetricsRow& s = t.rows[i];
      all += s.top1_all;
      newv += s.top1_new;
      if (s.top1_old) old += *s.top1_old;
      else has_old = false;
      for (const auto& [c, a] : s.per_class) pc[c] += a;
    }
    r.top1_all = all / tables.size();
    r.top1_new = newv / tables.size();
    if (has_old) r.top1_old = old / tables.size();
    else r.top1_old.reset();
    for (auto& [c, a] : pc) a /= tables.size();
    r.per_class = std::move(pc);
    mean.rows.push_back(std::move(r));
  }
  return mean;
}

}  // namespace genreplay
