#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace effecg {

enum class Gender { female = 0, male = 1 };

/// A C x N recording (lead-major) with optional demographic fields.
struct EcgRecord {
  std::size_t leads = 0;
  std::size_t length = 0;
  std::vector<double> samples;  // leads * length, row-major
  double sample_rate = 0.0;
  std::optional<int> age;
  std::optional<Gender> gender;
  std::vector<std::size_t> labels;

  std::span<const double> lead(std::size_t c) const {
    return std::span<const double>(samples).subspan(c * length, length);
  }
  std::span<double> lead(std::size_t c) {
    return std::span<double>(samples).subspan(c * length, length);
  }

  /// Throws std::invalid_argument when shape, rate or labels are inconsistent.
  /// A class_count of 0 skips the label bound check.
  void validate(std::size_t class_count = 0) const;
};

/// Linear-phase FIR bandpass.
struct FirFilter {
  std::vector<double> coefficients;
  double low_hz = 0.0;
  double high_hz = 0.0;
  double sample_rate = 0.0;

  /// |H(f)| evaluated from the impulse response.
  double magnitude_at(double hz) const;
};

/// Hamming-windowed sinc bandpass. The DC leakage of the windowed design is
/// removed by subtracting a scaled copy of the window, which keeps symmetry.
FirFilter design_bandpass(double sample_rate, std::size_t taps, double low_hz = 3.0,
                          double high_hz = 45.0);

/// Zero-phase output of length N: direct convolution shifted by the group
/// delay (taps - 1) / 2, treating samples outside the signal as zero.
std::vector<double> apply_filter(std::span<const double> signal, const FirFilter& filter);

/// Z-score with population sigma; a constant input maps to zeros.
std::vector<double> standardize(std::span<const double> signal);

/// QRS detector parameters (Hamilton-style segmenter).
struct RPeakConfig {
  double integration_ms = 80.0;
  double refractory_ms = 200.0;
  double adaptation = 0.125;
  double threshold_fraction = 0.25;
  double searchback_factor = 0.5;
  double searchback_rr_multiple = 1.66;
  double refine_ms = 40.0;
  double learning_s = 2.0;
  double min_duration_s = 0.5;
};

struct RPeakResult {
  std::vector<std::size_t> peaks;
  /// Set when the input was too short to analyse; `peaks` is empty then.
  std::optional<std::string> warning;
};

/// Differentiate, rectify, integrate over a centered window, then pick peaks
/// with adaptive signal/noise levels, a refractory period, and search-back at
/// a reduced threshold. Each detection is moved to the largest |filtered|
/// sample within +/- refine_ms.
RPeakResult detect_r_peaks(std::span<const double> filtered, double sample_rate,
                           const RPeakConfig& config = {});

struct PWaveConfig {
  double window_start_ms = 200.0;  // before R
  double window_end_ms = 80.0;     // before R
  double amplitude_gate = 0.05;    // fraction of the R amplitude
};

/// One entry per R-peak: the P-wave index or nullopt.
std::vector<std::optional<std::size_t>> detect_p_waves(std::span<const double> filtered,
                                                       std::span<const std::size_t> r_peaks,
                                                       double sample_rate,
                                                       const PWaveConfig& config = {});

/// Fixed-length index sequence with a validity mask. Masked-off slots hold
/// `pad_value`; consumers must rely on the mask only.
struct FiducialFeature {
  std::vector<std::int64_t> values;
  std::vector<std::uint8_t> mask;
  std::int64_t pad_value = -1;

  std::size_t size() const { return values.size(); }
  std::size_t valid_count() const;
};

/// Truncate from the tail or right-pad to `target_len`.
FiducialFeature clip_pad(std::span<const std::size_t> indices, std::size_t target_len,
                         std::int64_t pad_value = -1);

struct SynthConfig {
  std::size_t beats = 10;
  double bpm = 60.0;
  double sample_rate = 500.0;
  double noise_std = 0.0;
  double p_amplitude = 0.15;
  double amplitude = 1.0;
  std::size_t leads = 1;
  std::uint64_t seed = 1;
  double p_offset_ms = 150.0;
  double p_width_ms = 20.0;
  double qrs_half_width_ms = 20.0;
  double t_offset_ms = 250.0;
  double t_width_ms = 40.0;
  double t_amplitude = 0.3;
};

struct SynthTruth {
  std::vector<std::size_t> r_peaks;
  std::vector<std::size_t> p_waves;  // empty when p_amplitude == 0
};

struct SynthResult {
  EcgRecord record;
  SynthTruth truth;
};

/// Deterministic synthetic ECG: Gaussian P bump, triangular QRS, broad T
/// bump per beat, plus white noise. Beat k has its R-peak at
/// round((k + 1/2) * fs * 60 / bpm). Throws for bpm outside [30, 220].
SynthResult synth_ecg(const SynthConfig& config);

/// Bandpass + standardization + fiducial extraction settings.
struct PreprocessConfig {
  double low_hz = 3.0;
  double high_hz = 45.0;
  std::size_t taps = 201;
  bool bandpass = true;
  bool standardize = true;
  std::size_t reference_lead = 0;
  RPeakConfig rpeak;
  PWaveConfig pwave;
};

struct Fiducials {
  std::vector<std::size_t> r_peaks;
  std::vector<std::size_t> p_waves;
};

struct PreprocessedSignal {
  std::vector<double> samples;  // leads * length, filtered (and standardized)
  Fiducials fiducials;
  std::optional<std::string> warning;
};

PreprocessedSignal preprocess(const EcgRecord& record, const PreprocessConfig& config);

}  // namespace effecg
