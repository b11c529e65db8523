#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace covidnet {

/// Axis order of confusion matrices and report columns.
enum class ClassLabel : int { kNormal = 0, kPneumonia = 1, kCovid19 = 2 };

inline constexpr std::size_t kNumClasses = 3;
inline constexpr std::array<ClassLabel, kNumClasses> kAllClasses = {
    ClassLabel::kNormal, ClassLabel::kPneumonia, ClassLabel::kCovid19};

/// normal, pneumonia, covid19
std::string_view class_key(ClassLabel label);
/// Normal, Non-COVID-19, COVID-19
std::string_view class_display_name(ClassLabel label);
/// Accepts manifest keys and source metadata codes (Normal, CP, NCP),
/// case-insensitively. Throws DataError otherwise.
ClassLabel parse_class(std::string_view text);
inline int class_index(ClassLabel label) { return static_cast<int>(label); }

enum class Split { kTrain, kVal, kTest };
std::string_view split_name(Split split);
/// Throws DataError.
Split parse_split(std::string_view text);

struct SliceFlags {
  bool abnormality_marked = false;
  bool background_removed = false;

  friend bool operator==(const SliceFlags&, const SliceFlags&) = default;
};

struct ImageRecord {
  std::filesystem::path filepath;
  std::string patient_id;
  ClassLabel label = ClassLabel::kNormal;
  std::optional<Split> split;
  SliceFlags flags;

  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

/// One row of slice-level source metadata.
struct MetadataRow {
  std::string patient_id;
  std::string volume_id;
  std::string slice_path;
  std::string class_name;
  bool abnormality_marked = false;
  bool background_removed = false;
};

/// Parses the metadata table (header required; column order free).
std::vector<MetadataRow> parse_metadata(std::string_view text);
std::vector<MetadataRow> read_metadata(const std::filesystem::path& path);
std::string format_metadata(const std::vector<MetadataRow>& rows);

struct Exclusion {
  std::string path;
  std::string reason;
};

struct ManifestBuild {
  std::vector<ImageRecord> records;
  std::vector<Exclusion> excluded;
};

/// Applies the inclusion rules: pneumonia and COVID-19 slices need an
/// abnormality mark, normal slices are always kept, volumes with the
/// background removed are dropped whole, missing files are reported.
/// Record paths are image_root / slice_path.
ManifestBuild build_manifest(const std::vector<MetadataRow>& rows,
                             const std::filesystem::path& image_root);

struct SplitFractions {
  double train = 0.60;
  double val = 0.20;
  double test = 0.20;
};

struct SplitResult {
  std::vector<ImageRecord> records;
  std::vector<std::string> warnings;
};

/// Assigns whole patients to splits, stratified per class. Falls back to a
/// single global split with a warning when any class has fewer than three
/// patients. A patient's class is its most frequent record label.
SplitResult patient_level_split(std::vector<ImageRecord> records,
                                SplitFractions fractions, std::uint64_t seed);

/// "filepath,patient_id,class,split" text; records without a split are
/// written with an empty split field.
std::string format_manifest(const std::vector<ImageRecord>& records);
void write_manifest(const std::filesystem::path& path,
                    const std::vector<ImageRecord>& records);
/// Relative file paths are resolved against `data_root` when given.
std::vector<ImageRecord> parse_manifest(
    std::string_view text, const std::filesystem::path& data_root = {});
std::vector<ImageRecord> read_manifest(
    const std::filesystem::path& path,
    const std::filesystem::path& data_root = {});

std::vector<ImageRecord> filter_split(const std::vector<ImageRecord>& records,
                                      Split split);

/// Splits one CSV line; double-quoted fields may contain commas and "".
std::vector<std::string> split_csv_line(std::string_view line);

std::string read_text_file(const std::filesystem::path& path);
/// Writes through a temporary file and rename.
void write_text_file(const std::filesystem::path& path, std::string_view text);

}  // namespace covidnet
