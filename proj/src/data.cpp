#include "covidnet/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>

#include "covidnet/errors.hpp"
#include "covidnet/random.hpp"

namespace covidnet {

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

bool parse_bool(std::string_view text, std::size_t line) {
  const std::string v = lower(trim(text));
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no" || v.empty()) return false;
  throw DataError("line " + std::to_string(line) + ": invalid boolean '" +
                  std::string(text) + "'");
}

std::vector<std::string_view> lines_of(std::string_view text) {
  std::vector<std::string_view> lines;
  while (!text.empty()) {
    const std::size_t nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.push_back(line);
    if (nl == std::string_view::npos) break;
    text.remove_prefix(nl + 1);
  }
  return lines;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

/// Maps header names to column positions, requiring every name in `need`.
std::unordered_map<std::string, std::size_t> header_columns(
    std::string_view header, std::initializer_list<const char*> need) {
  std::unordered_map<std::string, std::size_t> cols;
  const auto fields = split_csv_line(header);
  for (std::size_t i = 0; i < fields.size(); ++i) {
    cols[lower(trim(fields[i]))] = i;
  }
  for (const char* n : need) {
    if (!cols.count(n)) {
      throw DataError(std::string("missing column '") + n + "' in header");
    }
  }
  return cols;
}

}  // namespace

std::string_view class_key(ClassLabel label) {
  switch (label) {
    case ClassLabel::kNormal: return "normal";
    case ClassLabel::kPneumonia: return "pneumonia";
    case ClassLabel::kCovid19: return "covid19";
  }
  throw InternalError("bad class label");
}

std::string_view class_display_name(ClassLabel label) {
  switch (label) {
    case ClassLabel::kNormal: return "Normal";
    case ClassLabel::kPneumonia: return "Non-COVID-19";
    case ClassLabel::kCovid19: return "COVID-19";
  }
  throw InternalError("bad class label");
}

ClassLabel parse_class(std::string_view text) {
  const std::string v = lower(trim(text));
  if (v == "normal") return ClassLabel::kNormal;
  if (v == "pneumonia" || v == "cp") return ClassLabel::kPneumonia;
  if (v == "covid19" || v == "ncp") return ClassLabel::kCovid19;
  throw DataError("unknown class '" + std::string(text) + "'");
}

std::string_view split_name(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  throw InternalError("bad split");
}

Split parse_split(std::string_view text) {
  const std::string v = lower(trim(text));
  if (v == "train") return Split::kTrain;
  if (v == "val") return Split::kVal;
  if (v == "test") return Split::kTest;
  throw DataError("unknown split '" + std::string(text) + "'");
}

std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) throw DataError("unterminated quote in '" + std::string(line) + "'");
  fields.push_back(std::move(cur));
  return fields;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw IoError("cannot write " + path.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot write " + path.string() + ": " + ec.message());
}

std::vector<MetadataRow> parse_metadata(std::string_view text) {
  const auto lines = lines_of(text);
  if (lines.empty()) throw DataError("metadata is empty");
  const auto cols =
      header_columns(lines[0], {"patient_id", "volume_id", "slice_path", "class",
                                "abnormality_marked", "background_removed"});
  std::vector<MetadataRow> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    const auto f = split_csv_line(lines[i]);
    auto get = [&](const char* name) -> std::string {
      const std::size_t c = cols.at(name);
      if (c >= f.size()) {
        throw DataError("line " + std::to_string(i + 1) + ": missing field '" +
                        name + "'");
      }
      return std::string(trim(f[c]));
    };
    MetadataRow r;
    r.patient_id = get("patient_id");
    r.volume_id = get("volume_id");
    r.slice_path = get("slice_path");
    r.class_name = get("class");
    r.abnormality_marked = parse_bool(get("abnormality_marked"), i + 1);
    r.background_removed = parse_bool(get("background_removed"), i + 1);
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<MetadataRow> read_metadata(const std::filesystem::path& path) {
  return parse_metadata(read_text_file(path));
}

std::string format_metadata(const std::vector<MetadataRow>& rows) {
  std::string out =
      "patient_id,volume_id,slice_path,class,abnormality_marked,background_removed\n";
  for (const MetadataRow& r : rows) {
    out += csv_field(r.patient_id) + ',' + csv_field(r.volume_id) + ',' +
           csv_field(r.slice_path) + ',' + csv_field(r.class_name) + ',' +
           (r.abnormality_marked ? "1" : "0") + ',' +
           (r.background_removed ? "1" : "0") + '\n';
  }
  return out;
}

ManifestBuild build_manifest(const std::vector<MetadataRow>& rows,
                             const std::filesystem::path& image_root) {
  // A volume flagged anywhere is dropped whole.
  std::set<std::pair<std::string, std::string>> removed;
  for (const MetadataRow& r : rows) {
    if (r.background_removed) removed.insert({r.patient_id, r.volume_id});
  }
  ManifestBuild out;
  for (const MetadataRow& r : rows) {
    const ClassLabel label = parse_class(r.class_name);
    const std::filesystem::path path = image_root / r.slice_path;
    if (removed.count({r.patient_id, r.volume_id})) {
      out.excluded.push_back({path.string(), "background removed"});
      continue;
    }
    if (label != ClassLabel::kNormal && !r.abnormality_marked) continue;
    if (r.slice_path.empty() || !std::filesystem::is_regular_file(path)) {
      out.excluded.push_back({path.string(), "missing file"});
      continue;
    }
    ImageRecord rec;
    rec.filepath = path;
    rec.patient_id = r.patient_id;
    rec.label = label;
    rec.flags = {r.abnormality_marked, r.background_removed};
    out.records.push_back(std::move(rec));
  }
  return out;
}

SplitResult patient_level_split(std::vector<ImageRecord> records,
                                SplitFractions fractions, std::uint64_t seed) {
  const double sum = fractions.train + fractions.val + fractions.test;
  if (fractions.train < 0 || fractions.val < 0 || fractions.test < 0 ||
      std::abs(sum - 1.0) > 1e-9) {
    throw ConfigError("split fractions must be non-negative and sum to 1");
  }
  SplitResult result;

  // Patient -> label by majority vote (ties to the lower class index).
  std::map<std::string, std::array<std::size_t, kNumClasses>> votes;
  for (const ImageRecord& r : records) {
    ++votes[r.patient_id][static_cast<std::size_t>(r.label)];
  }
  std::array<std::vector<std::string>, kNumClasses> by_class;
  for (const auto& [pid, v] : votes) {
    const auto best = std::max_element(v.begin(), v.end()) - v.begin();
    by_class[static_cast<std::size_t>(best)].push_back(pid);
  }

  std::map<std::string, Split> assignment;
  auto assign = [&](std::vector<std::string> patients, std::uint64_t stream) {
    Rng rng(derive_seed(seed, stream));
    rng.shuffle(patients);
    const std::size_t n = patients.size();
    std::size_t n_train = static_cast<std::size_t>(std::llround(n * fractions.train));
    std::size_t n_val = static_cast<std::size_t>(std::llround(n * fractions.val));
    if (n > 0 && n_train == 0 && fractions.train > 0) n_train = 1;
    n_train = std::min(n_train, n);
    n_val = std::min(n_val, n - n_train);
    for (std::size_t i = 0; i < n; ++i) {
      assignment[patients[i]] = i < n_train           ? Split::kTrain
                                : i < n_train + n_val ? Split::kVal
                                                      : Split::kTest;
    }
  };

  const bool stratify = std::all_of(by_class.begin(), by_class.end(),
                                    [](const auto& p) { return p.size() >= 3; });
  if (stratify) {
    for (std::size_t c = 0; c < kNumClasses; ++c) assign(by_class[c], c + 1);
  } else {
    result.warnings.push_back(
        "fewer than 3 patients in at least one class; using a global "
        "(unstratified) patient split");
    std::vector<std::string> all;
    for (const auto& [pid, v] : votes) all.push_back(pid);
    assign(std::move(all), 0);
  }
  for (ImageRecord& r : records) r.split = assignment.at(r.patient_id);
  result.records = std::move(records);
  return result;
}

std::string format_manifest(const std::vector<ImageRecord>& records) {
  std::string out = "filepath,patient_id,class,split\n";
  for (const ImageRecord& r : records) {
    out += csv_field(r.filepath.generic_string()) + ',' + csv_field(r.patient_id) +
           ',' + std::string(class_key(r.label)) + ',' +
           (r.split ? std::string(split_name(*r.split)) : std::string()) + '\n';
  }
  return out;
}

void write_manifest(const std::filesystem::path& path,
                    const std::vector<ImageRecord>& records) {
  write_text_file(path, format_manifest(records));
}

std::vector<ImageRecord> parse_manifest(std::string_view text,
                                        const std::filesystem::path& data_root) {
  const auto lines = lines_of(text);
  if (lines.empty()) throw DataError("manifest is empty");
  const auto cols = header_columns(lines[0], {"filepath", "patient_id", "class", "split"});
  std::vector<ImageRecord> records;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    const auto f = split_csv_line(lines[i]);
    auto get = [&](const char* name) -> std::string {
      const std::size_t c = cols.at(name);
      if (c >= f.size()) {
        throw DataError("manifest line " + std::to_string(i + 1) +
                        ": missing field '" + name + "'");
      }
      return std::string(trim(f[c]));
    };
    ImageRecord r;
    r.filepath = get("filepath");
    if (r.filepath.empty()) {
      throw DataError("manifest line " + std::to_string(i + 1) + ": empty filepath");
    }
    if (r.filepath.is_relative() && !data_root.empty()) r.filepath = data_root / r.filepath;
    r.patient_id = get("patient_id");
    r.label = parse_class(get("class"));
    const std::string split = get("split");
    if (!split.empty()) r.split = parse_split(split);
    records.push_back(std::move(r));
  }
  return records;
}

std::vector<ImageRecord> read_manifest(const std::filesystem::path& path,
                                       const std::filesystem::path& data_root) {
  return parse_manifest(read_text_file(path), data_root);
}

std::vector<ImageRecord> filter_split(const std::vector<ImageRecord>& records,
                                      Split split) {
  std::vector<ImageRecord> out;
  for (const ImageRecord& r : records) {
    if (r.split == split) out.push_back(r);
  }
  return out;
}

}  // namespace covidnet
