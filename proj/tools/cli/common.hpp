#pragma once

// Helpers shared by the bsift subcommands: scale parsing, per-sample CSV
// files, config hashing and the CIFAR-10 binary importer.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "bsift/bsift.hpp"

namespace bsift::cli {

namespace fs = std::filesystem;
using nlohmann::json;

// Stage failures carry the stage name so `pipeline` can report which step
// broke without losing the library's error category.
class StageError : public Error {
 public:
  StageError(std::string stage, std::string kind, const std::string& what)
      : Error(what), stage_(std::move(stage)), kind_(std::move(kind)) {}

  const std::string& stage() const noexcept { return stage_; }
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string stage_;
  std::string kind_;
};

// Config validation failure: exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

std::string error_kind(const std::exception& e);

// "2..12", "2,3,5" or a mix such as "2..6,9".
std::vector<int> parse_scales(const std::string& text);

std::string format_double(double v);

// FNV-1a over the bytes; used for config hashes in manifests.
std::uint64_t fnv1a(std::string_view bytes);
std::string hex64(std::uint64_t v);
std::uint64_t file_hash(const fs::path& path);

struct ScoreTable {
  std::vector<std::string> columns;
  std::map<std::string, std::vector<double>> values;

  const std::vector<double>& column(const std::string& name) const;
  bool has(const std::string& name) const { return values.count(name) != 0; }
  std::size_t rows() const { return values.empty() ? 0 : values.begin()->second.size(); }
};

ScoreTable read_score_csv(const fs::path& path);

void write_spc_csv(const fs::path& path, const ScoreVector& spc, const std::vector<bool>& is_backdoor);
void write_detect_csv(const fs::path& path, const ScoreVector& spc, const ScoreVector& mspc, const SplitVector& w,
                      const std::vector<bool>& is_backdoor);
void write_roc_csv(const fs::path& path, const std::vector<RocPoint>& roc);
std::vector<RocPoint> read_roc_csv(const fs::path& path);

json trace_json(const BilevelResult& r);

// CIFAR-10 binary batches (data_batch_1..5.bin, test_batch.bin).
ImageBatch load_cifar10(const fs::path& dir, bool train);

// Trigger from <file>.json (+ .u8) or from a PNG patch placed at the
// bottom-right corner.
TriggerSpec load_trigger_file(const fs::path& path, const ImageShape& image);

TriggerSpec load_png_trigger(const fs::path& path, const ImageShape& image);

}  // namespace bsift::cli
