#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "effecg/model.hpp"
#include "effecg/signal.hpp"

namespace effecg {

enum class LabelMode { single, multi };

struct Dataset {
  std::vector<EcgRecord> records;
  std::size_t class_count = 0;
  LabelMode label_mode = LabelMode::single;
  std::string provenance;
  std::vector<std::string> warnings;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
  std::size_t leads() const { return records.empty() ? 0 : records.front().leads; }
  std::size_t length() const { return records.empty() ? 0 : records.front().length; }
  double sample_rate() const { return records.empty() ? 0.0 : records.front().sample_rate; }

  /// Throws DataError unless every record has the same rate, lead count and
  /// length, and every label is below class_count (single-label: exactly one).
  void validate() const;
  /// Records restricted to `indices`, in that order.
  Dataset subset(std::span<const std::size_t> indices) const;
};

/// One beat per row: F floats then an integer label. class_count 0 infers
/// max label + 1.
Dataset load_beat_csv(const std::filesystem::path& path, double sample_rate = 125.0,
                      std::size_t class_count = 0);

/// Header `fs=<int> age=<int|?> gender=<F|M|?> labels=<comma ints>` then N
/// rows of C tab-separated floats.
EcgRecord read_multilead(const std::filesystem::path& path);
void write_multilead(const EcgRecord& record, const std::filesystem::path& path);

/// A single record file, or every `*.ecg` file of a directory in name order.
/// Without an explicit mode, any record carrying other than one label makes
/// the dataset multi-label.
Dataset load_multilead(const std::filesystem::path& path, std::size_t class_count = 0,
                       std::optional<LabelMode> mode = std::nullopt);

/// Chooses the reader from the path: `.csv` files are beat tables, anything
/// else multi-lead records.
Dataset load_dataset(const std::filesystem::path& path, double beat_sample_rate = 125.0,
                     std::size_t class_count = 0);

/// Removes records with non-finite samples or a constant lead, recording a
/// warning with the count. Returns the number removed.
std::size_t drop_abnormal(Dataset& dataset);

struct SplitSpec {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
  std::uint64_t seed = 0;
  bool stratify = true;  // single-label datasets only

  void validate() const;
};

struct SplitIndices {
  std::vector<std::size_t> train, val, test;
  std::vector<std::string> warnings;
};

/// Seeded shuffle then partition, per class when stratifying. Each group of n
/// gives round(n * train) and round(n * val) samples, the rest to test.
SplitIndices split_indices(const Dataset& dataset, const SplitSpec& spec);

struct DatasetSplit {
  Dataset train, val, test;
};
DatasetSplit split(const Dataset& dataset, const SplitSpec& spec);

/// `per_class` records of every class drawn without replacement.
std::vector<std::size_t> balanced_subset(const Dataset& dataset, std::size_t per_class,
                                         std::uint64_t seed);

/// Seeded epoch order cut into batches; the last batch may be short.
std::vector<std::vector<std::size_t>> make_batches(std::size_t count, std::size_t batch_size,
                                                   std::uint64_t seed);

/// Filtered signals and fiducials, ready for batching.
struct PreparedRecord {
  std::vector<double> samples;
  Fiducials fiducials;
  std::vector<std::size_t> labels;
  std::optional<int> age;
  std::optional<Gender> gender;
};

struct PreparedDataset {
  std::size_t leads = 0;
  std::size_t length = 0;
  double sample_rate = 0.0;
  std::size_t class_count = 0;
  LabelMode label_mode = LabelMode::single;
  std::vector<PreparedRecord> records;
  std::vector<std::string> warnings;

  std::size_t size() const { return records.size(); }
};

PreparedDataset prepare(const Dataset& dataset, const PreprocessConfig& config);

struct Batch {
  ModelInput input;
  std::vector<std::vector<std::size_t>> labels;
  std::vector<std::size_t> indices;
};

/// Stacks records into [B x C x N]; fiducial sequences are padded to the
/// longest in the batch (at least one step) with masks.
Batch assemble_batch(const PreparedDataset& data, std::span<const std::size_t> indices);

/// Synthetic two-class corpus: class 0 records have P-waves, class 1 records
/// do not. With demographics, class 0 skews young and female, class 1 old
/// and male. Multi-label mode adds class 2 for "age 60 or over", so that
/// label depends on the demographics alone.
struct SyntheticSetConfig {
  std::size_t count = 32;
  std::size_t beats = 10;
  double bpm = 75.0;
  double bpm_jitter = 0.0;  // per-record rate drawn from bpm +/- jitter
  double sample_rate = 500.0;
  double noise_std = 0.0;
  std::size_t leads = 1;
  bool demographics = false;
  bool multi_label = false;
  std::uint64_t seed = 1;
};

struct SyntheticSet {
  Dataset dataset;
  std::vector<SynthTruth> truth;
};

/// Every record has round(beats * fs * 60 / bpm) samples.
SyntheticSet synthetic_dataset(const SyntheticSetConfig& config);

/// Counts of records carrying any of `labels`, by age bin and gender.
struct DistributionTable {
  std::size_t age_bins = 0;
  std::vector<std::array<std::size_t, 2>> counts;  // [bin][female, male]

  std::size_t row_total(std::size_t bin) const { return counts[bin][0] + counts[bin][1]; }
  std::size_t column_total(Gender g) const;
  std::size_t total() const;
  std::string bin_name(std::size_t bin) const;
  /// `age_bin,F,M,total` rows followed by a `total` row.
  std::string to_csv() const;
};

/// Throws DataError when a record lacks age or gender.
DistributionTable analyze_distribution(const Dataset& dataset, std::span<const std::size_t> labels,
                                       std::size_t age_bins = 10);

}  // namespace effecg
