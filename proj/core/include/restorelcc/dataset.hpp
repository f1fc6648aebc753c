#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace rlcc::harness {

// Fixed synthetic vocabulary shared by the task generator and JSONL ingestion.
struct Vocab {
  std::vector<std::string> names;
  std::unordered_map<std::string, int> ids;
  int pad = 0;
  int yes = 1;
  int no = 2;
  int query = 3;
  int sym_a = 4;
  int sym_b = 5;

  int lookup(const std::string& name) const {
    auto it = ids.find(name);
    return it == ids.end() ? -1 : it->second;
  }
};

const Vocab& synthetic_vocab();

struct TaskRecord {
  std::vector<int> question;
  std::vector<int> response;
  int answer = -1;     // answer token id, -1 when unknown
  int incorrect = -1;  // the alternative answer token id, -1 when unknown
};

enum class Split { Train = 0, Recovery = 1, Probe = 2, HeldOut = 3 };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Recovery: return "recovery";
    case Split::Probe: return "probe";
    default: return "held_out";
  }
}

struct TaskDataset {
  std::vector<TaskRecord> records;
  // [begin, end) into records per split, in Split order. Splits are disjoint.
  std::array<std::pair<int, int>, 4> ranges{};
  uint64_t seed = 0;

  std::span<const TaskRecord> split(Split s) const {
    const auto [b, e] = ranges[size_t(s)];
    return {records.data() + b, size_t(e - b)};
  }
};

// Majority-comparison puzzle: the answer is "yes" iff symbol A occurs strictly
// more often than symbol B in the question. Labels alternate (balanced), the
// record order is a seeded shuffle, splits are 70/10/10/10.
TaskDataset gen_synthetic_task(uint64_t seed, int n_samples, int min_symbols = 8,
                               int max_symbols = 24);

struct IngestResult {
  TaskDataset dataset;
  std::vector<int> malformed_lines;  // 1-based line numbers
  int rejected_unknown_tokens = 0;
};

// Line-delimited JSON records with fields question, response and optional
// answer, token names separated by whitespace. Malformed lines are reported
// and skipped; records with unknown tokens are rejected and counted.
IngestResult ingest_jsonl(const std::filesystem::path& path);

void export_jsonl(const TaskDataset& ds, const std::filesystem::path& path);

std::string detokenize(std::span<const int> tokens);

}  // namespace rlcc::harness
