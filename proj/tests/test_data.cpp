#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <map>
#include <set>

#include "covidnet/augment.hpp"
#include "covidnet/body_mask.hpp"
#include "covidnet/data.hpp"
#include "covidnet/errors.hpp"
#include "covidnet/sampler.hpp"
#include "covidnet/synthetic.hpp"
#include "support.hpp"

using namespace covidnet;
using namespace covidnet::testing;

namespace {

void touch(const std::filesystem::path& p) {
  std::filesystem::create_directories(p.parent_path());
  write_png(p, Image(4, 4, 0.5f));
}

std::vector<ImageRecord> synthetic_records(std::array<std::size_t, 3> patients,
                                           std::size_t slices = 2) {
  std::vector<ImageRecord> out;
  std::size_t id = 0;
  for (ClassLabel c : kAllClasses) {
    for (std::size_t p = 0; p < patients[static_cast<std::size_t>(c)]; ++p, ++id) {
      for (std::size_t s = 0; s < slices; ++s) {
        ImageRecord r;
        r.filepath = "img/" + std::to_string(id) + "_" + std::to_string(s) + ".png";
        r.patient_id = "P" + std::to_string(id);
        r.label = c;
        out.push_back(r);
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("class names and codes") {
  CHECK(parse_class("NCP") == ClassLabel::kCovid19);
  CHECK(parse_class("CP") == ClassLabel::kPneumonia);
  CHECK(parse_class("Normal") == ClassLabel::kNormal);
  CHECK(parse_class("covid19") == ClassLabel::kCovid19);
  CHECK_THROWS_AS(parse_class("flu"), DataError);
  CHECK(class_display_name(ClassLabel::kPneumonia) == "Non-COVID-19");
  CHECK(class_index(ClassLabel::kCovid19) == 2);
}

TEST_CASE("csv fields with quotes and commas") {
  CHECK(split_csv_line("a,\"b,c\",\"d\"\"e\"") == std::vector<std::string>{"a", "b,c", "d\"e"});
  CHECK_THROWS_AS(split_csv_line("\"open"), DataError);
}

TEST_CASE("build_manifest inclusion rules on a three-patient fixture") {
  const auto root = fresh_dir("manifest");
  std::vector<MetadataRow> rows;
  // NCP patient: 4 slices, 2 marked.
  for (int s = 0; s < 4; ++s) {
    rows.push_back({"ncp1", "v1", "ncp1_" + std::to_string(s) + ".png", "NCP", s < 2, false});
  }
  rows.push_back({"cp1", "v2", "cp1_0.png", "CP", true, false});
  rows.push_back({"cp1", "v2", "cp1_1.png", "CP", false, false});
  rows.push_back({"n1", "v3", "n1_0.png", "Normal", false, false});
  rows.push_back({"n1", "v3", "n1_1.png", "Normal", false, false});
  // A second volume of the normal patient with the background removed on
  // one slice only: the whole volume goes.
  rows.push_back({"n1", "v4", "n1_v4_0.png", "Normal", false, true});
  rows.push_back({"n1", "v4", "n1_v4_1.png", "Normal", false, false});
  for (const auto& r : rows) touch(root / r.slice_path);
  rows.push_back({"cp1", "v2", "missing.png", "CP", true, false});

  const auto built = build_manifest(rows, root);
  std::map<ClassLabel, int> counts;
  for (const auto& r : built.records) ++counts[r.label];
  CHECK(counts[ClassLabel::kCovid19] == 2);
  CHECK(counts[ClassLabel::kPneumonia] == 1);
  CHECK(counts[ClassLabel::kNormal] == 2);
  int removed = 0, missing = 0;
  for (const auto& e : built.excluded) {
    removed += e.reason == "background removed";
    missing += e.reason == "missing file";
  }
  CHECK(removed == 2);
  CHECK(missing == 1);

  // Monotone: marking one more NCP slice adds exactly one record.
  rows[2].abnormality_marked = true;
  CHECK(build_manifest(rows, root).records.size() == built.records.size() + 1);

  rows.push_back({"x", "v9", "x.png", "Influenza", true, false});
  CHECK_THROWS_AS(build_manifest(rows, root), DataError);
}

TEST_CASE("metadata and manifest text round trips") {
  std::vector<MetadataRow> rows{{"p,1", "v", "a.png", "CP", true, false}};
  const auto parsed = parse_metadata(format_metadata(rows));
  REQUIRE(parsed.size() == 1);
  CHECK(parsed[0].patient_id == "p,1");
  CHECK(parsed[0].abnormality_marked);

  auto records = synthetic_records({3, 3, 3});
  records = patient_level_split(records, {}, 5).records;
  const std::string text = format_manifest(records);
  CHECK(text.rfind("filepath,patient_id,class,split\n", 0) == 0);
  CHECK(parse_manifest(text) == records);
  CHECK(parse_manifest(text, "/data").front().filepath == std::filesystem::path("/data") / records.front().filepath);
}

TEST_CASE("split on 1000 patients: disjoint, 60/20/20, deterministic") {
  const auto records = synthetic_records({500, 300, 200}, 1);
  const auto a = patient_level_split(records, {}, 42);
  const auto b = patient_level_split(records, {}, 42);
  CHECK(a.warnings.empty());
  CHECK(format_manifest(a.records) == format_manifest(b.records));
  std::map<std::string, std::set<Split>> per_patient;
  std::map<Split, std::size_t> sizes;
  for (const auto& r : a.records) {
    per_patient[r.patient_id].insert(*r.split);
    ++sizes[*r.split];
  }
  for (const auto& [pid, splits] : per_patient) CHECK(splits.size() == 1);
  CHECK(sizes[Split::kTrain] == doctest::Approx(600).epsilon(20.0 / 600));
  CHECK(sizes[Split::kVal] == doctest::Approx(200).epsilon(20.0 / 200));
  CHECK(sizes[Split::kTest] == doctest::Approx(200).epsilon(20.0 / 200));
  CHECK(format_manifest(patient_level_split(records, {}, 43).records) != format_manifest(a.records));
}

TEST_CASE("split keeps multi-slice patients together and falls back when a class is tiny") {
  auto records = synthetic_records({10, 10, 2}, 3);
  const auto r = patient_level_split(records, {}, 1);
  CHECK(r.warnings.size() == 1);
  std::map<std::string, std::set<Split>> per_patient;
  for (const auto& rec : r.records) per_patient[rec.patient_id].insert(*rec.split);
  for (const auto& [pid, splits] : per_patient) CHECK(splits.size() == 1);

  const auto one = patient_level_split(synthetic_records({1, 0, 0}, 4), {}, 1);
  CHECK(one.warnings.size() == 1);
  for (const auto& rec : one.records) CHECK(rec.split == Split::kTrain);
  CHECK_THROWS_AS(patient_level_split(records, {0.5, 0.5, 0.5}, 1), ConfigError);
}

TEST_CASE("png round trip at 8 and 16 bits") {
  const auto dir = fresh_dir("png");
  Image img(3, 5);
  for (std::size_t i = 0; i < img.size(); ++i) img.pixels[i] = static_cast<float>(i) / 14.0f;
  write_png(dir / "a.png", img);
  const Image a = read_png(dir / "a.png");
  REQUIRE(a.height == 3);
  REQUIRE(a.width == 5);
  for (std::size_t i = 0; i < img.size(); ++i) CHECK(a.pixels[i] == doctest::Approx(img.pixels[i]).epsilon(0.5 / 255.0));
  write_png16(dir / "b.png", img);
  const Image b = read_png(dir / "b.png");
  for (std::size_t i = 0; i < img.size(); ++i) CHECK(b.pixels[i] == doctest::Approx(img.pixels[i]).epsilon(1e-4));
  CHECK_THROWS_AS(read_png(dir / "nope.png"), IoError);
  std::ofstream(dir / "junk.png") << "not a png";
  CHECK_THROWS_AS(read_png(dir / "junk.png"), IoError);
}

TEST_CASE("body mask removes the table, keeps the body, and is idempotent") {
  const auto f = disk_and_table_fixture();
  const auto once = body_region_mask(f.image);
  CHECK_FALSE(once.empty_foreground);
  for (std::size_t p = 0; p < f.image.size(); ++p) {
    if (f.table[p]) CHECK(once.image.pixels[p] == 0.0f);
    if (f.body[p]) {
      CHECK(once.image.pixels[p] == f.image.pixels[p]);
      CHECK(once.body[p] == 1);  // the dark hole is filled into the body
    }
  }
  CHECK(body_region_mask(once.image).image == once.image);

  Image plain = f.image;
  for (std::size_t p = 0; p < plain.size(); ++p) {
    if (f.table[p]) plain.pixels[p] = 0.0f;
  }
  CHECK(body_region_mask(plain).image == plain);

  const auto dark = body_region_mask(Image(8, 8, 0.1f));
  CHECK(dark.empty_foreground);
  CHECK(dark.image == Image(8, 8, 0.1f));
}

TEST_CASE("largest component uses 8-connectivity and holes use 4") {
  // Diagonal chain of 3 is one 8-connected component, bigger than the pair.
  const std::vector<std::uint8_t> m{1, 0, 0, 0, 1,
                                    0, 1, 0, 0, 1,
                                    0, 0, 1, 0, 0};
  const auto lc = largest_component(m, 3, 5);
  CHECK(lc == std::vector<std::uint8_t>{1, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 1, 0, 0});
  const std::vector<std::uint8_t> ring{1, 1, 1,
                                       1, 0, 1,
                                       1, 1, 1};
  CHECK(fill_holes(ring, 3, 3) == std::vector<std::uint8_t>(9, 1));
}

TEST_CASE("augmentation identity, flip involution and determinism") {
  const auto f = disk_and_table_fixture(48);
  const auto none = AugmentationConfig::none();
  Rng r1(1);
  CHECK(augment_sample(f.image, none, r1, 32, 32) == resize(f.image, 32, 32));
  Rng r2(1);
  CHECK(augment_sample(f.image, none, r2, 48, 48) == f.image);
  CHECK(horizontal_flip(horizontal_flip(f.image)) == f.image);

  AugmentationConfig cfg;
  Rng a(sample_seed(9, 2, 17)), b(sample_seed(9, 2, 17));
  const Image x = augment_sample(f.image, cfg, a, 32, 32);
  CHECK(x == augment_sample(f.image, cfg, b, 32, 32));
  for (float v : x.pixels) CHECK((v >= 0.0f && v <= 1.0f));
  Rng c(sample_seed(9, 2, 18));
  CHECK_FALSE(x == augment_sample(f.image, cfg, c, 32, 32));

  AugmentationConfig bad;
  bad.intensity_scale_lo = 1.2;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = {};
  bad.hflip_prob = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("masked augmentation never shows the table") {
  const auto f = disk_and_table_fixture(64);
  AugmentationConfig cfg = AugmentationConfig::none();
  cfg.body_mask_enabled = true;
  Rng rng(3);
  const Image out = augment_sample(f.image, cfg, rng, 64, 64);
  // Body box crop: the table row band is outside the output frame.
  float max_corner = 0.0f;
  for (std::size_t x = 0; x < 64; ++x) max_corner = std::max(max_corner, out.at(63, x));
  CHECK(max_corner < 0.9f);
}

TEST_CASE("affine transform with zero angles is the identity and rotation keeps the center") {
  const auto f = disk_and_table_fixture(33);
  CHECK(affine_transform(f.image, 0, 0, 0) == f.image);
  const Image r = affine_transform(f.image, 90, 0, 0);
  CHECK(r.at(16, 16) == doctest::Approx(f.image.at(16, 16)).epsilon(1e-5));
}

TEST_CASE("rebalanced batches: 3/3/2 rotation, skewed data, determinism") {
  std::vector<ClassLabel> labels;
  for (int i = 0; i < 900; ++i) labels.push_back(ClassLabel::kNormal);
  for (int i = 0; i < 90; ++i) labels.push_back(ClassLabel::kPneumonia);
  for (int i = 0; i < 10; ++i) labels.push_back(ClassLabel::kCovid19);
  RebalancedSampler s(labels, 8, 7), t(labels, 8, 7);
  std::array<int, 3> short_class{};
  for (int b = 0; b < 1000; ++b) {
    const auto batch = s.next_batch();
    CHECK(batch == t.next_batch());
    REQUIRE(batch.size() == 8);
    std::array<int, 3> n{};
    for (auto i : batch) ++n[static_cast<std::size_t>(labels[i])];
    const auto [lo, hi] = std::minmax_element(n.begin(), n.end());
    CHECK(*hi - *lo <= 1);
    std::array<int, 3> sorted = n;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == std::array<int, 3>{2, 3, 3});
    ++short_class[static_cast<std::size_t>(lo - n.begin())];
  }
  for (int c : short_class) CHECK(c >= 333);

  std::vector<ClassLabel> missing(5, ClassLabel::kNormal);
  missing.push_back(ClassLabel::kCovid19);
  try {
    RebalancedSampler bad(missing, 8, 0);
    FAIL("expected SamplerError");
  } catch (const SamplerError& e) {
    CHECK(std::string(e.what()).find("pneumonia") != std::string::npos);
  }
  CHECK_THROWS_AS(RebalancedSampler(labels, 2, 0), SamplerError);
}

TEST_CASE("synthetic dataset: counts, byte determinism, metadata schema") {
  SyntheticConfig cfg;
  cfg.patients_per_class = {10, 10, 10};
  cfg.slices_per_patient = 2;
  cfg.resolution = 32;
  cfg.seed = 4;
  const auto d1 = fresh_dir("syn1"), d2 = fresh_dir("syn2");
  const auto a = generate_synthetic_dataset(d1, cfg);
  generate_synthetic_dataset(d2, cfg);
  CHECK(a.images == 60);
  CHECK(read_text_file(d1 / "metadata.csv") == read_text_file(d2 / "metadata.csv"));
  for (const auto& entry : std::filesystem::directory_iterator(d1 / "images")) {
    CHECK(read_text_file(entry.path()) == read_text_file(d2 / "images" / entry.path().filename()));
  }
  const auto rows = read_metadata(a.metadata);
  std::map<ClassLabel, std::set<std::string>> patients;
  for (const auto& r : rows) patients[parse_class(r.class_name)].insert(r.patient_id);
  for (ClassLabel c : kAllClasses) CHECK(patients[c].size() == 10);
  CHECK(build_manifest(rows, d1).records.size() == 60);
}

TEST_CASE("synthetic table artifact lies outside the body and masking removes it") {
  Rng arng(1), rng(2);
  const auto anatomy = draw_anatomy(arng);
  const Image img = render_synthetic_slice(ClassLabel::kCovid19, anatomy, rng, 64, true);
  const auto table = synthetic_table_pixels(64);
  const auto masked = body_region_mask(img);
  for (std::size_t p = 0; p < table.size(); ++p) {
    if (table[p]) {
      CHECK(img.pixels[p] > 0.8f);
      CHECK(masked.image.pixels[p] == 0.0f);
      CHECK(masked.body[p] == 0);
    }
  }
  CHECK_THROWS_AS(parse_table_artifact("sometimes"), ConfigError);
}
