#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "doctest.h"
#include "effecg/data.hpp"
#include "effecg/errors.hpp"

using namespace effecg;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "effecg_data_tests";
  fs::create_directories(dir);
  return dir / name;
}

fs::path write_text(const std::string& name, const std::string& text) {
  auto p = scratch(name);
  std::ofstream(p, std::ios::binary) << text;
  return p;
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const DataError& e) {
    return e.what();
  }
  return "";
}

Dataset labelled(const std::vector<std::size_t>& labels, std::size_t k) {
  Dataset ds;
  ds.class_count = k;
  for (auto l : labels) {
    EcgRecord r;
    r.leads = 1;
    r.length = 4;
    r.samples = {0, 1, 0, -1};
    r.sample_rate = 100;
    r.labels = {l};
    ds.records.push_back(r);
  }
  return ds;
}

EcgRecord demo_record(int age, Gender g, std::vector<std::size_t> labels) {
  EcgRecord r;
  r.leads = 1;
  r.length = 2;
  r.samples = {0, 1};
  r.sample_rate = 500;
  r.age = age;
  r.gender = g;
  r.labels = std::move(labels);
  return r;
}

}  // namespace

TEST_CASE("beat CSV") {
  const auto ds = load_beat_csv(write_text("two.csv", "0.1,0.2,0.3,1\n0.0,0.0,0.0,0\n"));
  REQUIRE(ds.size() == 2);
  CHECK(ds.length() == 3);
  CHECK(ds.leads() == 1);
  CHECK(ds.sample_rate() == 125.0);
  CHECK(ds.records[0].labels == std::vector<std::size_t>{1});
  CHECK(ds.records[1].labels == std::vector<std::size_t>{0});
  CHECK(ds.records[0].samples[2] == 0.3);
  CHECK(ds.class_count == 2);

  const auto empty = load_beat_csv(write_text("empty.csv", ""));
  CHECK(empty.empty());
  CHECK(empty.warnings.size() == 1);

  auto msg = error_of([] { load_beat_csv(write_text("ragged.csv", "1,2,3,0\n1,2,3,4,1\n")); });
  CHECK(msg.find(":2:") != std::string::npos);
  msg = error_of([] { load_beat_csv(write_text("nan.csv", "1,x,3,0\n")); });
  CHECK(msg.find(":1:") != std::string::npos);
  CHECK(msg.find("'x'") != std::string::npos);

  // float-coded labels and CRLF line ends
  const auto f = load_beat_csv(write_text("float.csv", "1,2,3.000000e+00\r\n4,5,0.0\r\n"), 360.0);
  CHECK(f.records[0].labels[0] == 3);
  CHECK(f.sample_rate() == 360.0);
  CHECK_THROWS_AS(load_beat_csv(write_text("half.csv", "1,2,0.5\n")), DataError);
  CHECK_THROWS_AS(load_beat_csv(scratch("missing.csv")), DataError);
}

TEST_CASE("multi-lead records") {
  std::string body;
  for (int t = 0; t < 5000; ++t) {
    for (int c = 0; c < 8; ++c) body += (c ? "\t" : "") + std::to_string(0.001 * (t % 97) - c);
    body += "\n";
  }
  const auto p = write_text("full.ecg", "fs=500 age=63 gender=F labels=2,17\n" + body);
  const auto r = read_multilead(p);
  CHECK(r.leads == 8);
  CHECK(r.length == 5000);
  CHECK(r.sample_rate == 500.0);
  CHECK(r.age == 63);
  CHECK(r.gender == Gender::female);
  CHECK(r.labels == std::vector<std::size_t>{2, 17});
  CHECK(r.lead(3)[1] == doctest::Approx(0.001 - 3));

  const auto q = read_multilead(write_text("unknown.ecg", "fs=250 age=? gender=? labels=\n1\n2\n"));
  CHECK_FALSE(q.age);
  CHECK_FALSE(q.gender);
  CHECK(q.labels.empty());

  auto msg = error_of([] { read_multilead(write_text("seven.ecg", "fs=500 age=1 gender=M labels=0\n1\t2\n1\t2\t3\n")); });
  CHECK(msg.find("row 1") != std::string::npos);
  CHECK(msg.find("3 columns") != std::string::npos);
  msg = error_of([] { read_multilead(write_text("key.ecg", "fs=500 aeg=1 gender=M labels=0\n1\n")); });
  CHECK(msg.find("aeg") != std::string::npos);
  CHECK_THROWS_AS(read_multilead(write_text("nolabels.ecg", "fs=500 age=1 gender=M\n1\n")), DataError);
  CHECK_THROWS_AS(read_multilead(write_text("gender.ecg", "fs=500 age=1 gender=X labels=0\n1\n")), DataError);
  CHECK_THROWS_AS(read_multilead(write_text("body.ecg", "fs=500 age=1 gender=M labels=0\n")), DataError);
}

TEST_CASE("multi-lead round trip") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 2.0);
  for (int trial = 0; trial < 20; ++trial) {
    EcgRecord r;
    r.leads = 1 + rng() % 4;
    r.length = 1 + rng() % 50;
    r.sample_rate = 100 + rng() % 900;
    for (std::size_t i = 0; i < r.leads * r.length; ++i) r.samples.push_back(n(rng) * std::pow(10.0, int(rng() % 9) - 4));
    if (rng() % 2) r.age = int(rng() % 100);
    if (rng() % 3) r.gender = rng() % 2 ? Gender::male : Gender::female;
    for (std::size_t l = rng() % 4; l > 0; --l) r.labels.push_back(rng() % 30);
    const auto p = scratch("rt.ecg");
    write_multilead(r, p);
    const auto back = read_multilead(p);
    CHECK(back.leads == r.leads);
    CHECK(back.length == r.length);
    CHECK(back.sample_rate == r.sample_rate);
    CHECK(back.age == r.age);
    CHECK(back.gender == r.gender);
    CHECK(back.labels == r.labels);
    double worst = 0;
    for (std::size_t i = 0; i < r.samples.size(); ++i) worst = std::max(worst, std::abs(back.samples[i] - r.samples[i]));
    CHECK(worst <= 1e-9);
  }
}

TEST_CASE("loading a record directory") {
  const auto dir = scratch("dir");
  fs::remove_all(dir);
  fs::create_directories(dir);
  write_multilead(demo_record(30, Gender::male, {1}), dir / "b.ecg");
  write_multilead(demo_record(40, Gender::female, {0}), dir / "a.ecg");
  std::ofstream(dir / "notes.txt") << "ignored";
  auto ds = load_multilead(dir);
  REQUIRE(ds.size() == 2);
  CHECK(ds.records[0].age == 40);
  CHECK(ds.label_mode == LabelMode::single);
  CHECK(ds.class_count == 2);

  write_multilead(demo_record(50, Gender::female, {0, 1}), dir / "c.ecg");
  CHECK(load_multilead(dir).label_mode == LabelMode::multi);
  CHECK_THROWS_AS(load_multilead(dir, 0, LabelMode::single), DataError);
  CHECK_THROWS_AS(load_multilead(dir, 1), DataError);

  auto odd = demo_record(50, Gender::female, {0});
  odd.sample_rate = 250;
  write_multilead(odd, dir / "d.ecg");
  CHECK_THROWS_AS(load_multilead(dir), DataError);
  const auto msg = error_of([] { load_dataset(scratch("nowhere")); });
  CHECK(msg.find("nowhere") != std::string::npos);
}

TEST_CASE("abnormal records are dropped") {
  auto ds = labelled({0, 1, 0, 1}, 2);
  ds.records[1].samples[2] = std::nan("");
  ds.records[2].samples = {3, 3, 3, 3};
  CHECK(drop_abnormal(ds) == 2);
  CHECK(ds.size() == 2);
  CHECK(ds.warnings.back().find("dropped 2") != std::string::npos);
  CHECK(drop_abnormal(ds) == 0);
}

TEST_CASE("split sizes and determinism") {
  SplitSpec spec;
  spec.stratify = false;
  auto ten = labelled(std::vector<std::size_t>(10, 0), 1);
  const auto s = split_indices(ten, spec);
  CHECK(s.train.size() == 8);
  CHECK(s.val.size() == 1);
  CHECK(s.test.size() == 1);
  const auto again = split_indices(ten, spec);
  CHECK(again.train == s.train);
  CHECK(again.val == s.val);

  std::vector<std::size_t> labels(20, 0);
  labels.insert(labels.end(), 10, 1);
  auto ab = labelled(labels, 2);
  spec.stratify = true;
  const auto st = split(ab, spec);
  std::size_t a = 0, b = 0;
  for (const auto& r : st.train.records) (r.labels[0] == 0 ? a : b) += 1;
  CHECK(a == 16);
  CHECK(b == 8);

  auto tiny = labelled({0, 0, 0, 0, 1, 1}, 2);
  const auto fallback = split_indices(tiny, spec);
  CHECK(fallback.warnings.size() == 1);
  CHECK(fallback.train.size() + fallback.val.size() + fallback.test.size() == 6);

  CHECK_THROWS_AS(split_indices(Dataset{}, spec), DataError);
  spec.val = 0.3;
  CHECK_THROWS_AS(split_indices(ten, spec), std::invalid_argument);
}

TEST_CASE("split partitions the dataset") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 1 + rng() % 4, n = 1 + rng() % 120;
    std::vector<std::size_t> labels(n);
    for (auto& l : labels) l = rng() % k;
    auto ds = labelled(labels, k);
    SplitSpec spec;
    spec.seed = rng();
    spec.stratify = rng() % 2;
    const auto s = split_indices(ds, spec);
    std::multiset<std::size_t> all(s.train.begin(), s.train.end());
    all.insert(s.val.begin(), s.val.end());
    all.insert(s.test.begin(), s.test.end());
    REQUIRE(all.size() == n);
    CHECK(std::set<std::size_t>(all.begin(), all.end()).size() == n);
    if (spec.stratify && s.warnings.empty()) {
      // each class within one sample of its share
      for (std::size_t c = 0; c < k; ++c) {
        const double count = static_cast<double>(std::count(labels.begin(), labels.end(), c));
        const double in_train = static_cast<double>(
            std::count_if(s.train.begin(), s.train.end(), [&](std::size_t i) { return labels[i] == c; }));
        CHECK(std::abs(in_train - 0.8 * count) <= 1.0);
      }
    }
  }
}

TEST_CASE("balanced subset") {
  auto ds = labelled({0, 0, 0, 1, 1, 2, 2, 2, 2}, 3);
  const auto idx = balanced_subset(ds, 2, 4);
  CHECK(idx.size() == 6);
  CHECK(std::set<std::size_t>(idx.begin(), idx.end()).size() == 6);
  CHECK(balanced_subset(ds, 2, 4) == idx);
  const auto msg = error_of([&] { balanced_subset(ds, 3, 4); });
  CHECK(msg.find("class 1") != std::string::npos);
}

TEST_CASE("batches") {
  const auto b = make_batches(10, 4, 3);
  REQUIRE(b.size() == 3);
  CHECK(b[0].size() == 4);
  CHECK(b[1].size() == 4);
  CHECK(b[2].size() == 2);
  CHECK(make_batches(10, 4, 3) == b);
  CHECK(make_batches(10, 4, 4) != b);
  CHECK(make_batches(0, 4, 3).empty());
  CHECK_THROWS_AS(make_batches(3, 0, 1), std::invalid_argument);

  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = rng() % 70, bs = 1 + rng() % 9;
    std::vector<std::size_t> seen;
    for (const auto& batch : make_batches(n, bs, rng())) seen.insert(seen.end(), batch.begin(), batch.end());
    std::sort(seen.begin(), seen.end());
    std::vector<std::size_t> expected(n);
    std::iota(expected.begin(), expected.end(), 0);
    CHECK(seen == expected);
  }
}

TEST_CASE("batch assembly pads fiducials") {
  PreparedDataset data;
  data.leads = 2;
  data.length = 3;
  data.class_count = 2;
  for (std::size_t peaks : {3, 5}) {
    PreparedRecord r;
    r.samples = {1, 2, 3, 4, 5, 6};
    for (std::size_t i = 0; i < peaks; ++i) r.fiducials.r_peaks.push_back(i);
    r.labels = {peaks == 3 ? 0u : 1u};
    r.age = 40;
    data.records.push_back(r);
  }
  const std::vector<std::size_t> idx{0, 1};
  const auto b = assemble_batch(data, idx);
  CHECK(b.input.signals.shape() == Shape{2, 2, 3});
  CHECK(b.input.r_peaks.steps() == 5);
  CHECK(b.input.r_peaks.features[0].mask == std::vector<std::uint8_t>{1, 1, 1, 0, 0});
  CHECK(b.input.r_peaks.features[1].mask == std::vector<std::uint8_t>(5, 1));
  // no P-waves anywhere: one masked step
  CHECK(b.input.p_waves.steps() == 1);
  CHECK(b.input.p_waves.features[0].mask[0] == 0);
  CHECK(b.input.r_peaks.signal_length == 3);
  CHECK(b.input.ages[1] == 40);
  CHECK_FALSE(b.input.genders[0]);
  CHECK(b.labels[1] == std::vector<std::size_t>{1});
}

TEST_CASE("prepare filters and finds fiducials") {
  SynthConfig sc;
  sc.beats = 10;
  sc.bpm = 75;
  Dataset ds;
  ds.class_count = 1;
  auto s = synth_ecg(sc);
  s.record.labels = {0};
  ds.records.push_back(s.record);
  const auto p = prepare(ds, PreprocessConfig{});
  REQUIRE(p.size() == 1);
  CHECK(p.records[0].fiducials.r_peaks.size() == 10);
  CHECK(p.length == ds.length());

  PreprocessConfig raw;
  raw.bandpass = false;
  raw.standardize = false;
  CHECK(prepare(ds, raw).records[0].samples == ds.records[0].samples);
}

TEST_CASE("age and gender distribution") {
  Dataset ds;
  ds.label_mode = LabelMode::multi;
  ds.class_count = 3;
  ds.records = {demo_record(25, Gender::female, {2}), demo_record(25, Gender::male, {0, 2}),
                demo_record(70, Gender::female, {1})};
  const std::vector<std::size_t> sel{2};
  const auto t = analyze_distribution(ds, sel);
  CHECK(t.counts[2][0] == 1);
  CHECK(t.counts[2][1] == 1);
  CHECK(t.total() == 2);
  CHECK(t.counts[7][0] == 0);
  for (std::size_t b = 0; b < t.age_bins; ++b) CHECK(t.row_total(b) == t.counts[b][0] + t.counts[b][1]);
  const auto csv = t.to_csv();
  CHECK(csv.find("20-29,1,1,2\n") != std::string::npos);
  CHECK(csv.find("total,1,1,2\n") != std::string::npos);
  CHECK(csv.find("90+,0,0,0\n") != std::string::npos);

  CHECK(analyze_distribution(ds, {}).total() == 0);
  ds.records[1].gender.reset();
  CHECK_THROWS_AS(analyze_distribution(ds, sel), DataError);
}
