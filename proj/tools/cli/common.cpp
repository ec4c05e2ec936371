#include "cli/common.hpp"

#include <algorithm>
#include <cstdio>
#include <stdexcept>

namespace bsift::cli {

std::string error_kind(const std::exception& e) {
  if (dynamic_cast<const StageError*>(&e)) return static_cast<const StageError&>(e).kind();
  if (dynamic_cast<const ConfigError*>(&e)) return "config-error";
  if (dynamic_cast<const InvalidArgument*>(&e)) return "invalid-argument";
  if (dynamic_cast<const FormatError*>(&e)) return "format-error";
  if (dynamic_cast<const IoError*>(&e)) return "io-error";
  if (dynamic_cast<const NumericFailure*>(&e)) return "numeric-failure";
  return "error";
}

std::vector<int> parse_scales(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  auto to_int = [&](const std::string& s) {
    int v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
      throw InvalidArgument("bad scale list \"" + text + "\"");
    }
    return v;
  };
  while (std::getline(ss, item, ',')) {
    const auto dots = item.find("..");
    if (dots == std::string::npos) {
      out.push_back(to_int(item));
      continue;
    }
    const int a = to_int(item.substr(0, dots));
    const int b = to_int(item.substr(dots + 2));
    if (b < a) throw InvalidArgument("bad scale range \"" + item + "\"");
    for (int n = a; n <= b; ++n) out.push_back(n);
  }
  ScaleSet check(out);
  return out;
}

std::string format_double(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t file_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return fnv1a(bytes);
}

const std::vector<double>& ScoreTable::column(const std::string& name) const {
  auto it = values.find(name);
  if (it == values.end()) throw FormatError("scores.csv:" + name, "column missing");
  return it->second;
}

ScoreTable read_score_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  ScoreTable t;
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.filename().string(), "empty file");
  {
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, ',')) t.columns.push_back(col);
  }
  if (t.columns.empty() || t.columns[0] != "index") {
    throw FormatError(path.filename().string(), "first column must be \"index\"");
  }
  for (const auto& c : t.columns) t.values[c];
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t k = 0;
    while (std::getline(ss, cell, ',')) {
      if (k >= t.columns.size()) break;
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (ec != std::errc()) {
        throw FormatError(path.filename().string(), "row " + std::to_string(row) + " column " + t.columns[k] +
                                                        " is not numeric");
      }
      t.values[t.columns[k]].push_back(v);
      ++k;
    }
    if (k != t.columns.size()) {
      throw FormatError(path.filename().string(), "row " + std::to_string(row) + " has " + std::to_string(k) +
                                                      " fields, expected " + std::to_string(t.columns.size()));
    }
    ++row;
  }
  return t;
}

namespace {

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  return out;
}

}  // namespace

void write_spc_csv(const fs::path& path, const ScoreVector& spc, const std::vector<bool>& is_backdoor) {
  auto out = open_out(path);
  out << "index,spc,is_backdoor\n";
  for (std::size_t i = 0; i < spc.size(); ++i) {
    out << i << ',' << format_double(spc.scores[i]) << ',' << (is_backdoor[i] ? 1 : 0) << '\n';
  }
}

void write_detect_csv(const fs::path& path, const ScoreVector& spc, const ScoreVector& mspc, const SplitVector& w,
                      const std::vector<bool>& is_backdoor) {
  auto out = open_out(path);
  out << "index,spc,mspc,w,is_backdoor\n";
  for (std::size_t i = 0; i < mspc.size(); ++i) {
    out << i << ',' << format_double(spc.scores[i]) << ',' << format_double(mspc.scores[i]) << ','
        << int(w.w[i]) << ',' << (is_backdoor[i] ? 1 : 0) << '\n';
  }
}

void write_roc_csv(const fs::path& path, const std::vector<RocPoint>& roc) {
  auto out = open_out(path);
  out << "fpr,tpr,threshold\n";
  for (const auto& p : roc) {
    out << format_double(p.fpr) << ',' << format_double(p.tpr) << ','
        << (std::isinf(p.threshold) ? std::string("inf") : format_double(p.threshold)) << '\n';
  }
}

std::vector<RocPoint> read_roc_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "fpr,tpr,threshold") {
    throw FormatError(path.filename().string(), "missing header \"fpr,tpr,threshold\"");
  }
  std::vector<RocPoint> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    RocPoint p;
    char comma1 = 0, comma2 = 0;
    std::stringstream ss(line);
    std::string th;
    if (!(ss >> p.fpr >> comma1 >> p.tpr >> comma2) || comma1 != ',' || comma2 != ',' || !(ss >> th)) {
      throw FormatError(path.filename().string(), "bad row \"" + line + "\"");
    }
    p.threshold = th == "inf" ? std::numeric_limits<double>::infinity() : std::stod(th);
    out.push_back(p);
  }
  return out;
}

json trace_json(const BilevelResult& r) {
  json rounds = json::array();
  for (std::size_t k = 0; k < r.objective_trace.size(); ++k) {
    rounds.push_back({{"round", k},
                      {"selected", r.selected_per_round.at(k)},
                      {"objective_per_epoch", r.objective_trace[k]}});
  }
  return {{"rounds", rounds}, {"warnings", r.warnings}, {"final_selected", r.w.count()}};
}

ImageBatch load_cifar10(const fs::path& dir, bool train) {
  std::vector<fs::path> files;
  if (train) {
    for (int k = 1; k <= 5; ++k) files.push_back(dir / ("data_batch_" + std::to_string(k) + ".bin"));
  } else {
    files.push_back(dir / "test_batch.bin");
  }
  constexpr std::size_t kRecord = 1 + 3 * 32 * 32;
  std::vector<unsigned char> bytes;
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    if (!in) throw IoError("cannot open " + f.string());
    std::vector<unsigned char> chunk((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (chunk.size() % kRecord != 0) throw FormatError(f.filename().string(), "size is not a multiple of 3073");
    bytes.insert(bytes.end(), chunk.begin(), chunk.end());
  }
  const std::size_t n = bytes.size() / kRecord;
  ImageBatch out;
  out.images = Tensor(n, {3, 32, 32});
  out.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + i * kRecord;
    out.labels[i] = rec[0];
    auto img = out.images.sample(i);
    for (std::size_t k = 0; k < kRecord - 1; ++k) img[k] = decode_pixel(rec[1 + k]);
  }
  return out;
}

TriggerSpec load_trigger_file(const fs::path& path, const ImageShape& image) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  TriggerSpec t = ext == ".png" ? load_png_trigger(path, image) : load_trigger(path);
  validate(t, image);
  return t;
}

}  // namespace bsift::cli
