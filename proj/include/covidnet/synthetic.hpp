#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string_view>

#include "covidnet/data.hpp"
#include "covidnet/image.hpp"
#include "covidnet/random.hpp"

namespace covidnet {

/// Where the exterior "patient table" bar is drawn.
enum class TableArtifact { kNone, kAll, kCovidOnly };

std::string_view table_artifact_name(TableArtifact mode);
/// none, all, covid_only. Throws ConfigError.
TableArtifact parse_table_artifact(std::string_view text);

struct SyntheticConfig {
  /// Patients per class in ClassLabel order.
  std::array<std::size_t, kNumClasses> patients_per_class{10, 10, 10};
  std::size_t slices_per_patient = 4;
  std::size_t resolution = 64;
  std::uint64_t seed = 0;
  TableArtifact table = TableArtifact::kNone;
};

/// Per-patient anatomy, drawn once and shared by that patient's slices.
struct SyntheticAnatomy {
  double body_cx = 0.0;
  double body_cy = 0.0;
  double body_radius = 0.7;
  double lung_rx = 0.22;
  double lung_ry = 0.40;
  double tissue = 0.6;
};

SyntheticAnatomy draw_anatomy(Rng& rng);

/// One slice: a disk body with two dark lungs carrying the class pattern
/// (clear lungs for normal, dense lower-lobe blobs for pneumonia, diffuse
/// striped haze for COVID-19), optional table bar below the body, pixel
/// noise.
Image render_synthetic_slice(ClassLabel label, const SyntheticAnatomy& anatomy,
                             Rng& rng, std::size_t resolution, bool table);

/// Pixels of the table bar for a given anatomy (1 = table), used by fixtures.
std::vector<std::uint8_t> synthetic_table_pixels(std::size_t resolution);

struct SyntheticDataset {
  std::filesystem::path metadata;
  std::size_t patients = 0;
  std::size_t images = 0;
};

/// Writes images/<patient>_<slice>.png and metadata.csv under `out_dir`.
/// Output bytes depend only on the config. Throws IoError.
SyntheticDataset generate_synthetic_dataset(const std::filesystem::path& out_dir,
                                            const SyntheticConfig& config);

}  // namespace covidnet
