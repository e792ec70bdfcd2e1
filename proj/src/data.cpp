#include "effecg/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "effecg/errors.hpp"
#include "effecg/parallel.hpp"
#include "effecg/rng.hpp"

namespace effecg {

namespace fs = std::filesystem;

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::vector<std::string_view> split_on(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::optional<double> parse_double(std::string_view s) {
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) return std::nullopt;
  return v;
}

std::optional<long long> parse_int(std::string_view s) {
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  long long v = 0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || end != s.data() + s.size()) return std::nullopt;
  return v;
}

// Beat tables often store the class as a float ("1.000e+00").
std::optional<std::size_t> parse_label(std::string_view s) {
  if (auto i = parse_int(s)) {
    if (*i < 0) return std::nullopt;
    return static_cast<std::size_t>(*i);
  }
  auto d = parse_double(s);
  if (!d || *d < 0 || *d != std::floor(*d) || *d > 1e9) return std::nullopt;
  return static_cast<std::size_t>(*d);
}

std::string where(const fs::path& path, std::size_t line) {
  return path.string() + ":" + std::to_string(line) + ": ";
}

std::ifstream open_input(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return in;
}

std::size_t infer_class_count(const std::vector<EcgRecord>& records) {
  std::size_t k = 0;
  for (const auto& r : records) {
    for (auto l : r.labels) k = std::max(k, l + 1);
  }
  return k;
}

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[rng.below(i)]);
  }
}

std::string number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void Dataset::validate() const {
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const std::string who = "record " + std::to_string(i) + ": ";
    try {
      r.validate();
    } catch (const std::invalid_argument& e) {
      throw DataError(who + e.what());
    }
    if (r.leads != leads() || r.length != length() || r.sample_rate != sample_rate()) {
      throw DataError(who + std::to_string(r.leads) + " leads x " + std::to_string(r.length) +
                      " samples at " + number(r.sample_rate) + " Hz, dataset has " +
                      std::to_string(leads()) + " x " + std::to_string(length()) + " at " +
                      number(sample_rate()) + " Hz");
    }
    if (label_mode == LabelMode::single && r.labels.size() != 1) {
      throw DataError(who + "single-label dataset but record has " + std::to_string(r.labels.size()) +
                      " labels");
    }
    for (auto l : r.labels) {
      if (l >= class_count) {
        throw DataError(who + "label " + std::to_string(l) + " outside " + std::to_string(class_count) +
                        " classes");
      }
    }
  }
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.class_count = class_count;
  out.label_mode = label_mode;
  out.provenance = provenance;
  out.records.reserve(indices.size());
  for (auto i : indices) out.records.push_back(records.at(i));
  return out;
}

Dataset load_beat_csv(const fs::path& path, double sample_rate, std::size_t class_count) {
  auto in = open_input(path);
  Dataset ds;
  ds.provenance = "beat-csv:" + path.filename().string();
  std::string line;
  std::size_t line_no = 0, width = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_on(line, ',');
    if (cells.size() < 2) throw DataError(where(path, line_no) + "need at least one sample and a label");
    if (width == 0) width = cells.size();
    if (cells.size() != width) {
      throw DataError(where(path, line_no) + "expected " + std::to_string(width - 1) + " samples, found " +
                      std::to_string(cells.size() - 1));
    }
    EcgRecord r;
    r.leads = 1;
    r.length = width - 1;
    r.sample_rate = sample_rate;
    r.samples.reserve(r.length);
    for (std::size_t c = 0; c + 1 < width; ++c) {
      auto v = parse_double(cells[c]);
      if (!v) {
        throw DataError(where(path, line_no) + "column " + std::to_string(c + 1) + " is not a number: '" +
                        std::string(cells[c]) + "'");
      }
      r.samples.push_back(*v);
    }
    auto label = parse_label(cells.back());
    if (!label) throw DataError(where(path, line_no) + "bad label '" + std::string(cells.back()) + "'");
    r.labels = {*label};
    ds.records.push_back(std::move(r));
  }
  if (ds.records.empty()) ds.warnings.push_back(path.string() + ": empty file");
  ds.class_count = class_count ? class_count : infer_class_count(ds.records);
  ds.validate();
  return ds;
}

EcgRecord read_multilead(const fs::path& path) {
  auto in = open_input(path);
  std::string header;
  if (!std::getline(in, header)) throw DataError(path.string() + ": missing header");

  EcgRecord r;
  std::set<std::string> seen;
  std::istringstream tokens{header};
  std::string token;
  while (tokens >> token) {
    const auto eq = token.find('=');
    if (eq == std::string::npos) throw DataError(where(path, 1) + "header field '" + token + "' lacks '='");
    const std::string key = token.substr(0, eq);
    const std::string_view value = std::string_view(token).substr(eq + 1);
    if (!seen.insert(key).second) throw DataError(where(path, 1) + "duplicate header key '" + key + "'");
    if (key == "fs") {
      auto v = parse_int(value);
      if (!v || *v <= 0) throw DataError(where(path, 1) + "fs must be a positive integer");
      r.sample_rate = static_cast<double>(*v);
    } else if (key == "age") {
      if (value != "?") {
        auto v = parse_int(value);
        if (!v || *v < 0 || *v > 150) throw DataError(where(path, 1) + "bad age '" + std::string(value) + "'");
        r.age = static_cast<int>(*v);
      }
    } else if (key == "gender") {
      if (value == "F") {
        r.gender = Gender::female;
      } else if (value == "M") {
        r.gender = Gender::male;
      } else if (value != "?") {
        throw DataError(where(path, 1) + "gender must be F, M or ?");
      }
    } else if (key == "labels") {
      if (!value.empty()) {
        for (auto cell : split_on(value, ',')) {
          auto l = parse_int(cell);
          if (!l || *l < 0) throw DataError(where(path, 1) + "bad label '" + std::string(cell) + "'");
          r.labels.push_back(static_cast<std::size_t>(*l));
        }
      }
    } else {
      throw DataError(where(path, 1) + "unknown header key '" + key + "'");
    }
  }
  for (const char* key : {"fs", "age", "gender", "labels"}) {
    if (!seen.count(key)) throw DataError(where(path, 1) + "header lacks '" + key + "='");
  }

  // body is read time-major, stored lead-major
  std::vector<double> rows;
  std::string line;
  std::size_t line_no = 1, row = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_on(trim(line), '\t');
    if (r.leads == 0) r.leads = cells.size();
    if (cells.size() != r.leads) {
      throw DataError(where(path, line_no) + "row " + std::to_string(row) + " has " +
                      std::to_string(cells.size()) + " columns, expected " + std::to_string(r.leads));
    }
    for (std::size_t c = 0; c < cells.size(); ++c) {
      auto v = parse_double(cells[c]);
      if (!v) {
        throw DataError(where(path, line_no) + "row " + std::to_string(row) + " column " + std::to_string(c) +
                        " is not a number: '" + std::string(cells[c]) + "'");
      }
      rows.push_back(*v);
    }
    ++row;
  }
  if (row == 0) throw DataError(path.string() + ": no samples");
  r.length = row;
  r.samples.resize(rows.size());
  for (std::size_t t = 0; t < r.length; ++t) {
    for (std::size_t c = 0; c < r.leads; ++c) r.samples[c * r.length + t] = rows[t * r.leads + c];
  }
  return r;
}

void write_multilead(const EcgRecord& record, const fs::path& path) {
  record.validate();
  if (record.sample_rate != std::round(record.sample_rate)) {
    throw std::invalid_argument("record format needs an integer sample rate");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "fs=" << static_cast<long long>(record.sample_rate)
      << " age=" << (record.age ? std::to_string(*record.age) : "?")
      << " gender=" << (record.gender ? (*record.gender == Gender::female ? "F" : "M") : "?") << " labels=";
  for (std::size_t i = 0; i < record.labels.size(); ++i) out << (i ? "," : "") << record.labels[i];
  out << '\n';
  for (std::size_t t = 0; t < record.length; ++t) {
    for (std::size_t c = 0; c < record.leads; ++c) {
      if (c) out << '\t';
      out << number(record.samples[c * record.length + t]);
    }
    out << '\n';
  }
  if (!out) throw DataError("write failed: " + path.string());
}

Dataset load_multilead(const fs::path& path, std::size_t class_count, std::optional<LabelMode> mode) {
  std::vector<fs::path> files;
  if (fs::is_directory(path)) {
    for (const auto& entry : fs::directory_iterator(path)) {
      if (entry.is_regular_file() && entry.path().extension() == ".ecg") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
  } else if (fs::exists(path)) {
    files.push_back(path);
  } else {
    throw DataError("no such file or directory: " + path.string());
  }

  Dataset ds;
  ds.provenance = "multilead:" + path.filename().string();
  ds.records.resize(files.size());
  std::vector<std::string> errors(files.size());
  parallel_for(files.size(), [&](std::size_t i) {
    try {
      ds.records[i] = read_multilead(files[i]);
    } catch (const DataError& e) {
      errors[i] = e.what();
    }
  });
  for (const auto& e : errors) {
    if (!e.empty()) throw DataError(e);
  }
  if (files.empty()) ds.warnings.push_back(path.string() + ": no .ecg records");

  ds.class_count = class_count ? class_count : infer_class_count(ds.records);
  if (mode) {
    ds.label_mode = *mode;
  } else {
    const bool multi = std::any_of(ds.records.begin(), ds.records.end(),
                                   [](const EcgRecord& r) { return r.labels.size() != 1; });
    ds.label_mode = multi ? LabelMode::multi : LabelMode::single;
  }
  ds.validate();
  return ds;
}

Dataset load_dataset(const fs::path& path, double beat_sample_rate, std::size_t class_count) {
  if (!fs::exists(path)) throw DataError("no such file or directory: " + path.string());
  if (path.extension() == ".csv") return load_beat_csv(path, beat_sample_rate, class_count);
  return load_multilead(path, class_count);
}

std::size_t drop_abnormal(Dataset& dataset) {
  const auto before = dataset.records.size();
  auto abnormal = [](const EcgRecord& r) {
    for (double v : r.samples) {
      if (!std::isfinite(v)) return true;
    }
    for (std::size_t c = 0; c < r.leads; ++c) {
      const auto lead = r.lead(c);
      const auto [lo, hi] = std::minmax_element(lead.begin(), lead.end());
      if (*lo == *hi) return true;
    }
    return false;
  };
  std::erase_if(dataset.records, abnormal);
  const auto dropped = before - dataset.records.size();
  if (dropped) {
    dataset.warnings.push_back("dropped " + std::to_string(dropped) +
                               " records with non-finite samples or a flat lead");
  }
  return dropped;
}

void SplitSpec::validate() const {
  if (train <= 0 || val < 0 || test < 0 || std::abs(train + val + test - 1.0) > 1e-9) {
    throw std::invalid_argument("split ratios must be non-negative, train positive, and sum to 1");
  }
}

SplitIndices split_indices(const Dataset& dataset, const SplitSpec& spec) {
  spec.validate();
  if (dataset.empty()) throw DataError("cannot split an empty dataset");
  SplitIndices out;

  std::vector<std::vector<std::size_t>> groups;
  if (spec.stratify && dataset.label_mode == LabelMode::single) {
    std::map<std::size_t, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < dataset.size(); ++i) by_class[dataset.records[i].labels.at(0)].push_back(i);
    bool small = false;
    for (const auto& [label, members] : by_class) {
      if (members.size() < 3) {
        out.warnings.push_back("class " + std::to_string(label) + " has " + std::to_string(members.size()) +
                               " samples; using an unstratified split");
        small = true;
      }
    }
    if (!small) {
      for (auto& [_, members] : by_class) groups.push_back(std::move(members));
    }
  }
  if (groups.empty()) {
    groups.emplace_back(dataset.size());
    std::iota(groups[0].begin(), groups[0].end(), 0);
  }

  Rng rng(derive_seed(spec.seed, "split"));
  for (auto& g : groups) {
    shuffle(g, rng);
    const double n = static_cast<double>(g.size());
    const auto n_train = std::min(g.size(), static_cast<std::size_t>(std::llround(n * spec.train)));
    const auto n_val = std::min(g.size() - n_train, static_cast<std::size_t>(std::llround(n * spec.val)));
    out.train.insert(out.train.end(), g.begin(), g.begin() + n_train);
    out.val.insert(out.val.end(), g.begin() + n_train, g.begin() + n_train + n_val);
    out.test.insert(out.test.end(), g.begin() + n_train + n_val, g.end());
  }
  for (auto* part : {&out.train, &out.val, &out.test}) std::sort(part->begin(), part->end());
  return out;
}

DatasetSplit split(const Dataset& dataset, const SplitSpec& spec) {
  const auto idx = split_indices(dataset, spec);
  DatasetSplit out{dataset.subset(idx.train), dataset.subset(idx.val), dataset.subset(idx.test)};
  out.train.warnings = idx.warnings;
  return out;
}

std::vector<std::size_t> balanced_subset(const Dataset& dataset, std::size_t per_class, std::uint64_t seed) {
  if (dataset.label_mode != LabelMode::single) throw DataError("balanced subsets need single-label data");
  std::vector<std::vector<std::size_t>> by_class(dataset.class_count);
  for (std::size_t i = 0; i < dataset.size(); ++i) by_class.at(dataset.records[i].labels.at(0)).push_back(i);
  Rng rng(derive_seed(seed, "balanced"));
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& members = by_class[c];
    if (members.size() < per_class) {
      throw DataError("class " + std::to_string(c) + " has " + std::to_string(members.size()) +
                      " records, " + std::to_string(per_class) + " requested");
    }
    shuffle(members, rng);
    out.insert(out.end(), members.begin(), members.begin() + per_class);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t count, std::size_t batch_size,
                                                   std::uint64_t seed) {
  if (batch_size < 1) throw std::invalid_argument("batch size must be at least 1");
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  shuffle(order, rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < count; i += batch_size) {
    out.emplace_back(order.begin() + i, order.begin() + std::min(count, i + batch_size));
  }
  return out;
}

PreparedDataset prepare(const Dataset& dataset, const PreprocessConfig& config) {
  dataset.validate();
  PreparedDataset out;
  out.leads = dataset.leads();
  out.length = dataset.length();
  out.sample_rate = dataset.sample_rate();
  out.class_count = dataset.class_count;
  out.label_mode = dataset.label_mode;
  out.warnings = dataset.warnings;
  out.records.resize(dataset.size());
  std::vector<std::optional<std::string>> notes(dataset.size());
  parallel_for(dataset.size(), [&](std::size_t i) {
    const auto& r = dataset.records[i];
    auto p = preprocess(r, config);
    auto& dst = out.records[i];
    dst.samples = std::move(p.samples);
    dst.fiducials = std::move(p.fiducials);
    dst.labels = r.labels;
    dst.age = r.age;
    dst.gender = r.gender;
    notes[i] = p.warning;
  });
  for (std::size_t i = 0; i < notes.size(); ++i) {
    if (notes[i]) out.warnings.push_back("record " + std::to_string(i) + ": " + *notes[i]);
  }
  return out;
}

Batch assemble_batch(const PreparedDataset& data, std::span<const std::size_t> indices) {
  Batch b;
  const std::size_t per = data.leads * data.length;
  std::vector<double> signal;
  signal.reserve(indices.size() * per);
  std::size_t r_len = 1, p_len = 1;
  for (auto i : indices) {
    const auto& r = data.records.at(i);
    r_len = std::max(r_len, r.fiducials.r_peaks.size());
    p_len = std::max(p_len, r.fiducials.p_waves.size());
  }
  b.input.r_peaks.signal_length = data.length;
  b.input.p_waves.signal_length = data.length;
  for (auto i : indices) {
    const auto& r = data.records[i];
    signal.insert(signal.end(), r.samples.begin(), r.samples.end());
    b.input.r_peaks.features.push_back(clip_pad(r.fiducials.r_peaks, r_len));
    b.input.p_waves.features.push_back(clip_pad(r.fiducials.p_waves, p_len));
    b.input.ages.push_back(r.age);
    b.input.genders.push_back(r.gender);
    b.labels.push_back(r.labels);
    b.indices.push_back(i);
  }
  b.input.signals = Tensor({indices.size(), data.leads, data.length}, std::move(signal));
  return b;
}

std::size_t DistributionTable::column_total(Gender g) const {
  std::size_t s = 0;
  for (const auto& row : counts) s += row[static_cast<std::size_t>(g)];
  return s;
}

std::size_t DistributionTable::total() const {
  return column_total(Gender::female) + column_total(Gender::male);
}

std::string DistributionTable::bin_name(std::size_t bin) const {
  const auto lo = std::to_string(bin * 10);
  return bin + 1 == age_bins ? lo + "+" : lo + "-" + std::to_string(bin * 10 + 9);
}

std::string DistributionTable::to_csv() const {
  std::string out = "age_bin,F,M,total\n";
  for (std::size_t b = 0; b < age_bins; ++b) {
    out += bin_name(b) + "," + std::to_string(counts[b][0]) + "," + std::to_string(counts[b][1]) + "," +
           std::to_string(row_total(b)) + "\n";
  }
  out += "total," + std::to_string(column_total(Gender::female)) + "," +
         std::to_string(column_total(Gender::male)) + "," + std::to_string(total()) + "\n";
  return out;
}

DistributionTable analyze_distribution(const Dataset& dataset, std::span<const std::size_t> labels,
                                       std::size_t age_bins) {
  if (age_bins < 1) throw std::invalid_argument("need at least one age bin");
  DistributionTable t;
  t.age_bins = age_bins;
  t.counts.assign(age_bins, {0, 0});
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& r = dataset.records[i];
    if (!r.age || !r.gender) throw DataError("record " + std::to_string(i) + " lacks age or gender");
    const bool selected = std::any_of(r.labels.begin(), r.labels.end(), [&](std::size_t l) {
      return std::find(labels.begin(), labels.end(), l) != labels.end();
    });
    if (selected) ++t.counts[age_bin(*r.age, age_bins)][static_cast<std::size_t>(*r.gender)];
  }
  return t;
}

}  // namespace effecg

namespace effecg {

SyntheticSet synthetic_dataset(const SyntheticSetConfig& config) {
  if (config.bpm_jitter < 0.0 || config.bpm - config.bpm_jitter < 30.0 || config.bpm + config.bpm_jitter > 220.0) {
    throw std::invalid_argument("bpm range must stay within [30, 220]");
  }
  const double rr = config.sample_rate * 60.0 / config.bpm;
  const auto length = static_cast<std::size_t>(std::llround(rr * static_cast<double>(config.beats)));
  SyntheticSet out;
  out.dataset.class_count = config.multi_label ? 3 : 2;
  out.dataset.label_mode = config.multi_label ? LabelMode::multi : LabelMode::single;
  out.dataset.provenance = "synthetic";
  for (std::size_t i = 0; i < config.count; ++i) {
    Rng rng(derive_seed(config.seed, "record " + std::to_string(i)));
    const std::size_t cls = i % 2;
    SynthConfig sc;
    sc.bpm = config.bpm + config.bpm_jitter * rng.uniform(-1.0, 1.0);
    sc.sample_rate = config.sample_rate;
    sc.noise_std = config.noise_std;
    sc.leads = config.leads;
    sc.seed = rng.next();
    sc.amplitude = config.bpm_jitter > 0.0 ? rng.uniform(0.8, 1.2) : 1.0;
    sc.p_amplitude = cls == 0 ? 0.15 : 0.0;
    // enough beats to cover the nominal length at the drawn rate
    sc.beats = static_cast<std::size_t>(std::ceil(static_cast<double>(length) * sc.bpm / (config.sample_rate * 60.0)));
    auto s = synth_ecg(sc);
    auto& r = s.record;
    if (r.length != length) {
      std::vector<double> clipped(r.leads * length, 0.0);
      const std::size_t keep = std::min(length, r.length);
      for (std::size_t c = 0; c < r.leads; ++c) {
        std::copy_n(r.samples.begin() + static_cast<std::ptrdiff_t>(c * r.length), keep,
                    clipped.begin() + static_cast<std::ptrdiff_t>(c * length));
      }
      r.samples = std::move(clipped);
      r.length = length;
      std::erase_if(s.truth.r_peaks, [&](std::size_t p) { return p >= length; });
      std::erase_if(s.truth.p_waves, [&](std::size_t p) { return p >= length; });
    }
    r.labels = {cls};
    if (config.demographics || config.multi_label) {
      const bool old = config.multi_label ? rng.uniform() < 0.5 : cls == 1;
      r.age = old ? 60 + static_cast<int>(rng.below(25)) : 20 + static_cast<int>(rng.below(30));
      const bool male_bias = rng.uniform() < 0.85;
      r.gender = (old == male_bias) ? Gender::male : Gender::female;
      if (config.multi_label) {
        r.labels.clear();
        if (cls == 0) r.labels.push_back(0);
        if (cls == 1) r.labels.push_back(1);
        if (old) r.labels.push_back(2);
      }
    }
    out.dataset.records.push_back(std::move(r));
    out.truth.push_back(std::move(s.truth));
  }
  return out;
}

}  // namespace effecg
