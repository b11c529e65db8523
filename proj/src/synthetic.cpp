#include "covidnet/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "covidnet/errors.hpp"

namespace covidnet {

namespace {

constexpr double kTableTop = 0.84;
constexpr double kTableBottom = 0.92;
constexpr double kTableHalfWidth = 0.9;
constexpr double kLungOffset = 0.33;

double coord(std::size_t i, std::size_t n) {
  return (static_cast<double>(i) + 0.5) / static_cast<double>(n) * 2.0 - 1.0;
}

struct Blob {
  double x, y, sigma, amp;
};

}  // namespace

std::string_view table_artifact_name(TableArtifact mode) {
  switch (mode) {
    case TableArtifact::kNone: return "none";
    case TableArtifact::kAll: return "all";
    case TableArtifact::kCovidOnly: return "covid_only";
  }
  throw InternalError("bad table artifact mode");
}

TableArtifact parse_table_artifact(std::string_view text) {
  if (text == "none") return TableArtifact::kNone;
  if (text == "all") return TableArtifact::kAll;
  if (text == "covid_only") return TableArtifact::kCovidOnly;
  throw ConfigError("unknown table artifact mode '" + std::string(text) +
                    "' (expected none, all or covid_only)");
}

SyntheticAnatomy draw_anatomy(Rng& rng) {
  SyntheticAnatomy a;
  a.body_cx = rng.uniform(-0.02, 0.02);
  a.body_cy = rng.uniform(-0.02, 0.02);
  a.body_radius = rng.uniform(0.695, 0.705);
  a.lung_rx = rng.uniform(0.21, 0.23);
  a.lung_ry = rng.uniform(0.38, 0.42);
  a.tissue = rng.uniform(0.59, 0.61);
  return a;
}

std::vector<std::uint8_t> synthetic_table_pixels(std::size_t resolution) {
  std::vector<std::uint8_t> out(resolution * resolution, 0);
  for (std::size_t y = 0; y < resolution; ++y) {
    const double v = coord(y, resolution);
    if (v < kTableTop || v > kTableBottom) continue;
    for (std::size_t x = 0; x < resolution; ++x) {
      if (std::abs(coord(x, resolution)) <= kTableHalfWidth) out[y * resolution + x] = 1;
    }
  }
  return out;
}

Image render_synthetic_slice(ClassLabel label, const SyntheticAnatomy& a,
                             Rng& rng, std::size_t resolution, bool table) {
  std::vector<Blob> blobs;
  if (label == ClassLabel::kPneumonia) {
    const std::size_t n = 2 + static_cast<std::size_t>(rng.below(2));
    for (std::size_t i = 0; i < n; ++i) {
      const double side = rng.bernoulli(0.5) ? 1.0 : -1.0;
      blobs.push_back({a.body_cx + side * kLungOffset + rng.uniform(-0.08, 0.08),
                       a.body_cy + rng.uniform(0.12, 0.3), rng.uniform(0.09, 0.1),
                       rng.uniform(0.6, 0.7)});
    }
  }
  const double stripe_phase = rng.uniform(0.0, 6.283185307179586);
  const double haze = rng.uniform(0.38, 0.42);
  const std::vector<std::uint8_t> table_px =
      table ? synthetic_table_pixels(resolution) : std::vector<std::uint8_t>{};

  Image img(resolution, resolution);
  for (std::size_t y = 0; y < resolution; ++y) {
    const double v = coord(y, resolution);
    for (std::size_t x = 0; x < resolution; ++x) {
      const double u = coord(x, resolution);
      const double bx = u - a.body_cx;
      const double by = v - a.body_cy;
      double value = 0.0;
      if (bx * bx + by * by <= a.body_radius * a.body_radius) {
        value = a.tissue;
        for (double side : {-1.0, 1.0}) {
          const double lx = (bx - side * kLungOffset) / a.lung_rx;
          const double ly = by / a.lung_ry;
          const double r2 = lx * lx + ly * ly;
          if (r2 > 1.0) continue;
          value = 0.22;
          if (label == ClassLabel::kCovid19) {
            // Peripheral ground-glass haze with a fine reticular texture.
            const double periph = 0.6 + 0.4 * std::sqrt(r2);
            value += haze * periph + 0.06 * std::sin(18.0 * (u + v) + stripe_phase);
          }
        }
        for (const Blob& b : blobs) {
          const double dx = u - b.x;
          const double dy = v - b.y;
          value += b.amp * std::exp(-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma));
        }
      }
      if (table && table_px[y * resolution + x]) value = 0.9;
      value += 0.02 * rng.normal();
      img.at(y, x) = static_cast<float>(std::clamp(value, 0.0, 1.0));
    }
  }
  return img;
}

SyntheticDataset generate_synthetic_dataset(const std::filesystem::path& out_dir,
                                            const SyntheticConfig& config) {
  if (config.resolution < 16) throw ConfigError("synthetic resolution must be at least 16");
  if (config.slices_per_patient == 0) {
    throw ConfigError("synthetic slices_per_patient must be positive");
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  if (ec) {
    throw IoError("cannot create " + (out_dir / "images").string() + ": " + ec.message());
  }
  SyntheticDataset out;
  std::vector<MetadataRow> rows;
  std::size_t patient = 0;
  for (ClassLabel label : kAllClasses) {
    const std::size_t count = config.patients_per_class[static_cast<std::size_t>(label)];
    for (std::size_t p = 0; p < count; ++p, ++patient) {
      char pid[32];
      std::snprintf(pid, sizeof pid, "P%04zu", patient);
      Rng anatomy_rng(derive_seed(config.seed, patient, 0xA7));
      const SyntheticAnatomy anatomy = draw_anatomy(anatomy_rng);
      const bool table = config.table == TableArtifact::kAll ||
                         (config.table == TableArtifact::kCovidOnly &&
                          label == ClassLabel::kCovid19);
      for (std::size_t s = 0; s < config.slices_per_patient; ++s) {
        Rng rng(derive_seed(config.seed, patient, s + 1));
        const Image img = render_synthetic_slice(label, anatomy, rng,
                                                 config.resolution, table);
        char name[64];
        std::snprintf(name, sizeof name, "images/%s_s%03zu.png", pid, s);
        write_png(out_dir / name, img);
        MetadataRow row;
        row.patient_id = pid;
        row.volume_id = std::string(pid) + "_v0";
        row.slice_path = name;
        row.class_name = label == ClassLabel::kNormal      ? "Normal"
                         : label == ClassLabel::kPneumonia ? "CP"
                                                           : "NCP";
        row.abnormality_marked = label != ClassLabel::kNormal;
        rows.push_back(std::move(row));
        ++out.images;
      }
    }
  }
  out.patients = patient;
  out.metadata = out_dir / "metadata.csv";
  write_text_file(out.metadata, format_metadata(rows));
  return out;
}

}  // namespace covidnet
