#include "restorelcc/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "restorelcc/util.hpp"

namespace rlcc::harness {

const Vocab& synthetic_vocab() {
  static const Vocab vocab = [] {
    Vocab v;
    v.names = {"<pad>", "yes", "no", "?", "A", "B"};
    for (int i = int(v.names.size()); i < 64; ++i) {
      v.names.push_back("w" + std::to_string(i));
    }
    for (size_t i = 0; i < v.names.size(); ++i) v.ids[v.names[i]] = int(i);
    return v;
  }();
  return vocab;
}

std::string detokenize(std::span<const int> tokens) {
  const auto& v = synthetic_vocab();
  std::string out;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= int(v.names.size())) {
      throw std::out_of_range("detokenize: token id out of range");
    }
    if (i) out += ' ';
    out += v.names[size_t(tokens[i])];
  }
  return out;
}

namespace {

std::vector<int> tokenize(const std::string& text, int* unknown) {
  const auto& v = synthetic_vocab();
  std::vector<int> out;
  std::istringstream ss(text);
  std::string word;
  while (ss >> word) {
    const int id = v.lookup(word);
    if (id < 0) {
      if (unknown) ++*unknown;
      return {};
    }
    out.push_back(id);
  }
  return out;
}

void assign_splits(TaskDataset& ds) {
  const int n = int(ds.records.size());
  const int train_end = n * 7 / 10;
  const int recovery_end = train_end + n / 10;
  const int probe_end = recovery_end + n / 10;
  ds.ranges[size_t(Split::Train)] = {0, train_end};
  ds.ranges[size_t(Split::Recovery)] = {train_end, recovery_end};
  ds.ranges[size_t(Split::Probe)] = {recovery_end, probe_end};
  ds.ranges[size_t(Split::HeldOut)] = {probe_end, n};
}

}  // namespace

TaskDataset gen_synthetic_task(uint64_t seed, int n_samples, int min_symbols,
                               int max_symbols) {
  if (n_samples < 200) {
    throw std::invalid_argument("gen_synthetic_task: n_samples must be >= 200");
  }
  if (min_symbols < 1 || max_symbols < min_symbols) {
    throw std::invalid_argument("gen_synthetic_task: bad symbol length range");
  }
  const auto& v = synthetic_vocab();
  Rng rng(seed * 0x9e3779b97f4a7c15ull + 0x7461736bull);

  TaskDataset ds;
  ds.seed = seed;
  ds.records.resize(size_t(n_samples));
  for (int i = 0; i < n_samples; ++i) {
    const bool label_yes = (i % 2 == 0);  // alternate for exact balance
    const int len = min_symbols + rng.next_below(max_symbols - min_symbols + 1);
    // Small count margins dominate so the puzzle demands precise counting;
    // ties (margin 0, answer "no" under the strict rule) appear occasionally.
    const double u = rng.next_unit();
    int margin = u < 0.5 ? 1 : (u < 0.8 ? 2 : 3);
    if (!label_yes && len % 2 == 0 && u >= 0.92) margin = 0;
    if ((len + margin) % 2 != 0) ++margin;
    margin = std::min(margin, len);
    // strict majority of A for "yes"; "no" covers ties and B majorities
    const int count_a = label_yes ? (len + margin) / 2 : (len - margin) / 2;
    std::vector<int> symbols(size_t(len), v.sym_b);
    for (int k = 0; k < count_a; ++k) symbols[size_t(k)] = v.sym_a;
    rng.shuffle(symbols);

    TaskRecord rec;
    rec.question = std::move(symbols);
    rec.question.push_back(v.query);
    rec.answer = label_yes ? v.yes : v.no;
    rec.incorrect = label_yes ? v.no : v.yes;
    rec.response = {rec.answer};
    ds.records[size_t(i)] = std::move(rec);
  }
  rng.shuffle(ds.records);
  assign_splits(ds);
  return ds;
}

IngestResult ingest_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("ingest_jsonl: cannot open " + path.string());
  const auto& v = synthetic_vocab();

  IngestResult result;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      result.malformed_lines.push_back(line_no);
      continue;
    }
    if (!rec.is_object() || !rec.contains("question") || !rec.contains("response") ||
        !rec.at("question").is_string() || !rec.at("response").is_string()) {
      result.malformed_lines.push_back(line_no);
      continue;
    }
    int unknown = 0;
    TaskRecord tr;
    tr.question = tokenize(rec.at("question").get<std::string>(), &unknown);
    tr.response = tokenize(rec.at("response").get<std::string>(), &unknown);
    if (rec.contains("answer")) {
      if (!rec.at("answer").is_string()) {
        result.malformed_lines.push_back(line_no);
        continue;
      }
      const int id = v.lookup(rec.at("answer").get<std::string>());
      if (id < 0) {
        ++result.rejected_unknown_tokens;
        continue;
      }
      tr.answer = id;
      tr.incorrect = (id == v.yes) ? v.no : (id == v.no ? v.yes : -1);
    }
    if (unknown > 0) {
      ++result.rejected_unknown_tokens;
      continue;
    }
    if (tr.question.empty() || tr.response.empty()) {
      result.malformed_lines.push_back(line_no);
      continue;
    }
    result.dataset.records.push_back(std::move(tr));
  }
  assign_splits(result.dataset);
  return result;
}

void export_jsonl(const TaskDataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("export_jsonl: cannot open " + path.string());
  const auto& v = synthetic_vocab();
  for (const auto& rec : ds.records) {
    nlohmann::json j;
    j["question"] = detokenize(rec.question);
    j["response"] = detokenize(rec.response);
    if (rec.answer >= 0) j["answer"] = v.names[size_t(rec.answer)];
    out << j.dump() << "\n";
  }
}

}  // namespace rlcc::harness
