#include "effecg/signal.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numeric>
#include <stdexcept>

#include "effecg/rng.hpp"

namespace effecg {

namespace {

std::size_t ms_to_samples(double ms, double fs) {
  return static_cast<std::size_t>(std::lround(ms * fs / 1000.0));
}

double sinc(double x) {
  if (x == 0.0) return 1.0;
  return std::sin(M_PI * x) / (M_PI * x);
}

}  // namespace

void EcgRecord::validate(std::size_t class_count) const {
  if (leads < 1 || length < 1) {
    throw std::invalid_argument("record needs at least one lead and one sample");
  }
  if (samples.size() != leads * length) {
    throw std::invalid_argument("record holds " + std::to_string(samples.size()) +
                                " samples, expected " + std::to_string(leads * length));
  }
  if (!(sample_rate > 0.0)) throw std::invalid_argument("sample rate must be positive");
  if (age && *age < 0) throw std::invalid_argument("age must be non-negative");
  if (class_count > 0) {
    for (auto l : labels) {
      if (l >= class_count) {
        throw std::invalid_argument("label " + std::to_string(l) + " outside " +
                                    std::to_string(class_count) + " classes");
      }
    }
  }
}

double FirFilter::magnitude_at(double hz) const {
  std::complex<double> acc = 0.0;
  const double w = 2.0 * M_PI * hz / sample_rate;
  for (std::size_t n = 0; n < coefficients.size(); ++n) {
    acc += coefficients[n] * std::polar(1.0, -w * static_cast<double>(n));
  }
  return std::abs(acc);
}

FirFilter design_bandpass(double sample_rate, std::size_t taps, double low_hz, double high_hz) {
  if (taps % 2 == 0 || taps < 3) {
    throw std::invalid_argument("FIR tap count must be odd and >= 3, got " + std::to_string(taps));
  }
  if (!(sample_rate > 0.0) || !(low_hz > 0.0) || !(low_hz < high_hz) ||
      !(high_hz < sample_rate / 2.0)) {
    throw std::invalid_argument("bandpass edges must satisfy 0 < low < high < fs/2");
  }
  const double f1 = low_hz / sample_rate;
  const double f2 = high_hz / sample_rate;
  const double center = static_cast<double>(taps - 1) / 2.0;
  std::vector<double> window(taps), h(taps);
  for (std::size_t n = 0; n < taps; ++n) {
    const double m = static_cast<double>(n) - center;
    window[n] = 0.54 - 0.46 * std::cos(2.0 * M_PI * static_cast<double>(n) /
                                       static_cast<double>(taps - 1));
    h[n] = window[n] * (2.0 * f2 * sinc(2.0 * f2 * m) - 2.0 * f1 * sinc(2.0 * f1 * m));
  }
  const double dc = std::accumulate(h.begin(), h.end(), 0.0);
  const double wsum = std::accumulate(window.begin(), window.end(), 0.0);
  for (std::size_t n = 0; n < taps; ++n) h[n] -= window[n] * dc / wsum;
  // exact symmetry
  for (std::size_t n = 0; n < taps / 2; ++n) {
    const double avg = 0.5 * (h[n] + h[taps - 1 - n]);
    h[n] = avg;
    h[taps - 1 - n] = avg;
  }
  return FirFilter{std::move(h), low_hz, high_hz, sample_rate};
}

std::vector<double> apply_filter(std::span<const double> signal, const FirFilter& filter) {
  const auto& h = filter.coefficients;
  const long n = static_cast<long>(signal.size());
  const long taps = static_cast<long>(h.size());
  const long delay = (taps - 1) / 2;
  std::vector<double> out(signal.size(), 0.0);
  for (long i = 0; i < n; ++i) {
    // y[i] = sum_k h[k] x[i + delay - k]
    const long k_lo = std::max(0L, i + delay - (n - 1));
    const long k_hi = std::min(taps - 1, i + delay);
    double s = 0.0;
    for (long k = k_lo; k <= k_hi; ++k) s += h[k] * signal[i + delay - k];
    out[i] = s;
  }
  return out;
}

std::vector<double> standardize(std::span<const double> signal) {
  std::vector<double> out(signal.begin(), signal.end());
  if (out.empty()) return out;
  const double n = static_cast<double>(out.size());
  const double mu = std::accumulate(out.begin(), out.end(), 0.0) / n;
  double var = 0.0;
  for (double v : out) var += (v - mu) * (v - mu);
  const double sigma = std::sqrt(var / n);
  if (sigma < 1e-12) return std::vector<double>(out.size(), 0.0);
  for (auto& v : out) v = (v - mu) / sigma;
  return out;
}

RPeakResult detect_r_peaks(std::span<const double> filtered, double sample_rate,
                           const RPeakConfig& config) {
  RPeakResult result;
  const std::size_t n = filtered.size();
  if (static_cast<double>(n) < config.min_duration_s * sample_rate || n < 3) {
    result.warning = "signal shorter than " + std::to_string(config.min_duration_s) +
                     " s; no R-peaks detected";
    return result;
  }

  // |first difference|, integrated over a centered window
  std::vector<double> slope(n, 0.0);
  for (std::size_t i = 1; i < n; ++i) slope[i] = std::abs(filtered[i] - filtered[i - 1]);
  const std::size_t width = std::max<std::size_t>(1, ms_to_samples(config.integration_ms, sample_rate));
  std::vector<double> prefix(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + slope[i];
  std::vector<double> integrated(n);
  const long half = static_cast<long>(width / 2);
  for (std::size_t i = 0; i < n; ++i) {
    const long lo = std::max(0L, static_cast<long>(i) - half);
    const long hi = std::min(static_cast<long>(n), lo + static_cast<long>(width));
    integrated[i] = (prefix[hi] - prefix[lo]) / static_cast<double>(width);
  }

  // candidates: dominant local maxima within half a refractory period
  const std::size_t refractory = ms_to_samples(config.refractory_ms, sample_rate);
  const std::size_t reach = std::max<std::size_t>(1, refractory / 2);
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = integrated[i];
    if (v <= 0.0) continue;
    const std::size_t lo = i >= reach ? i - reach : 0;
    const std::size_t hi = std::min(n - 1, i + reach);
    bool dominant = true;
    for (std::size_t j = lo; j < i && dominant; ++j) dominant = integrated[j] < v;
    for (std::size_t j = i + 1; j <= hi && dominant; ++j) dominant = integrated[j] <= v;
    if (dominant) candidates.push_back(i);
  }
  if (candidates.empty()) return result;

  // signal / noise levels from the learning window
  const std::size_t learn = std::min(n, std::max<std::size_t>(1, static_cast<std::size_t>(
                                                                   config.learning_s * sample_rate)));
  double signal_level = *std::max_element(integrated.begin(), integrated.begin() + learn);
  double noise_level = std::accumulate(integrated.begin(), integrated.begin() + learn, 0.0) /
                       static_cast<double>(learn);
  auto threshold = [&] { return noise_level + config.threshold_fraction * (signal_level - noise_level); };

  std::vector<std::size_t> detections;
  std::vector<std::size_t> noise_peaks;
  auto mean_rr = [&]() -> double {
    if (detections.size() < 2) return 0.0;
    const std::size_t k = std::min<std::size_t>(8, detections.size() - 1);
    return static_cast<double>(detections.back() - detections[detections.size() - 1 - k]) /
           static_cast<double>(k);
  };
  auto search_back = [&](std::size_t now) {
    const double rr = mean_rr();
    if (rr <= 0.0 || detections.empty()) return;
    if (static_cast<double>(now - detections.back()) <= config.searchback_rr_multiple * rr) return;
    const double low = config.searchback_factor * threshold();
    std::size_t best = n;
    for (auto p : noise_peaks) {
      if (p <= detections.back() + refractory || p >= now) continue;
      if (integrated[p] > low && (best == n || integrated[p] > integrated[best])) best = p;
    }
    if (best != n) {
      detections.push_back(best);
      signal_level = 0.25 * integrated[best] + 0.75 * signal_level;
    }
  };

  for (auto p : candidates) {
    if (!detections.empty() && p - detections.back() < refractory) continue;
    search_back(p);
    if (!detections.empty() && p - detections.back() < refractory) continue;
    const double v = integrated[p];
    if (v > threshold()) {
      detections.push_back(p);
      signal_level = config.adaptation * v + (1.0 - config.adaptation) * signal_level;
    } else {
      noise_peaks.push_back(p);
      noise_level = config.adaptation * v + (1.0 - config.adaptation) * noise_level;
    }
  }
  search_back(n - 1);

  // move each detection to the extreme of |filtered| nearby
  const std::size_t refine = ms_to_samples(config.refine_ms, sample_rate);
  for (auto d : detections) {
    const std::size_t lo = d >= refine ? d - refine : 0;
    const std::size_t hi = std::min(n - 1, d + refine);
    std::size_t best = lo;
    for (std::size_t j = lo; j <= hi; ++j) {
      if (std::abs(filtered[j]) > std::abs(filtered[best])) best = j;
    }
    if (result.peaks.empty() || best > result.peaks.back()) result.peaks.push_back(best);
  }
  return result;
}

std::vector<std::optional<std::size_t>> detect_p_waves(std::span<const double> filtered,
                                                       std::span<const std::size_t> r_peaks,
                                                       double sample_rate,
                                                       const PWaveConfig& config) {
  const std::size_t start = ms_to_samples(config.window_start_ms, sample_rate);
  const std::size_t end = ms_to_samples(config.window_end_ms, sample_rate);
  std::vector<std::optional<std::size_t>> out;
  out.reserve(r_peaks.size());
  for (auto r : r_peaks) {
    if (r < start || r >= filtered.size() || end > start) {
      out.emplace_back();
      continue;
    }
    std::size_t best = r - start;
    for (std::size_t j = r - start; j <= r - end; ++j) {
      if (filtered[j] > filtered[best]) best = j;
    }
    if (filtered[best] > config.amplitude_gate * filtered[r]) {
      out.emplace_back(best);
    } else {
      out.emplace_back();
    }
  }
  return out;
}

std::size_t FiducialFeature::valid_count() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

FiducialFeature clip_pad(std::span<const std::size_t> indices, std::size_t target_len,
                         std::int64_t pad_value) {
  if (target_len < 1) throw std::invalid_argument("clip_pad target length must be >= 1");
  FiducialFeature f;
  f.pad_value = pad_value;
  f.values.assign(target_len, pad_value);
  f.mask.assign(target_len, 0);
  const std::size_t keep = std::min(target_len, indices.size());
  for (std::size_t i = 0; i < keep; ++i) {
    f.values[i] = static_cast<std::int64_t>(indices[i]);
    f.mask[i] = 1;
  }
  return f;
}

SynthResult synth_ecg(const SynthConfig& config) {
  if (!(config.bpm >= 30.0 && config.bpm <= 220.0)) {
    throw std::invalid_argument("bpm must lie in [30, 220], got " + std::to_string(config.bpm));
  }
  if (!(config.sample_rate > 0.0) || config.leads < 1 || config.beats < 1) {
    throw std::invalid_argument("synth needs positive sample rate, leads and beats");
  }
  const double fs = config.sample_rate;
  const double rr = fs * 60.0 / config.bpm;
  const std::size_t n = static_cast<std::size_t>(std::llround(rr * static_cast<double>(config.beats)));

  SynthResult out;
  for (std::size_t k = 0; k < config.beats; ++k) {
    out.truth.r_peaks.push_back(
        static_cast<std::size_t>(std::llround((static_cast<double>(k) + 0.5) * rr)));
  }
  const double p_off = config.p_offset_ms * fs / 1000.0;
  const double p_sigma = config.p_width_ms * fs / 1000.0;
  const double qrs_half = config.qrs_half_width_ms * fs / 1000.0;
  const double t_off = config.t_offset_ms * fs / 1000.0;
  const double t_sigma = config.t_width_ms * fs / 1000.0;

  // one clean beat template per sample, built in beat order
  std::vector<double> clean(n, 0.0);
  for (auto r : out.truth.r_peaks) {
    const double rc = static_cast<double>(r);
    const double pc = rc - std::round(p_off);
    const double tc = rc + std::round(t_off);
    const long lo = std::max(0L, static_cast<long>(pc - 5.0 * p_sigma));
    const long hi = std::min(static_cast<long>(n) - 1, static_cast<long>(tc + 5.0 * t_sigma));
    for (long i = lo; i <= hi; ++i) {
      const double t = static_cast<double>(i);
      double v = 0.0;
      if (config.p_amplitude != 0.0) {
        const double dp = (t - pc) / p_sigma;
        v += config.p_amplitude * std::exp(-0.5 * dp * dp);
      }
      const double dq = std::abs(t - rc);
      if (dq < qrs_half) v += 1.0 - dq / qrs_half;
      const double dt = (t - tc) / t_sigma;
      v += config.t_amplitude * std::exp(-0.5 * dt * dt);
      clean[i] += v;
    }
    if (config.p_amplitude != 0.0 && pc >= 0.0) {
      out.truth.p_waves.push_back(static_cast<std::size_t>(pc));
    }
  }

  EcgRecord& rec = out.record;
  rec.leads = config.leads;
  rec.length = n;
  rec.sample_rate = fs;
  rec.samples.assign(config.leads * n, 0.0);
  Rng rng(config.seed);
  for (std::size_t c = 0; c < config.leads; ++c) {
    const double gain = 1.0 / (1.0 + 0.25 * static_cast<double>(c));
    auto lead = rec.lead(c);
    for (std::size_t i = 0; i < n; ++i) {
      double v = gain * clean[i];
      if (config.noise_std > 0.0) v += config.noise_std * rng.normal();
      lead[i] = config.amplitude * v;
    }
  }
  return out;
}

PreprocessedSignal preprocess(const EcgRecord& record, const PreprocessConfig& config) {
  record.validate();
  if (config.reference_lead >= record.leads) {
    throw std::invalid_argument("reference lead " + std::to_string(config.reference_lead) +
                                " outside " + std::to_string(record.leads) + " leads");
  }
  std::optional<FirFilter> filter;
  if (config.bandpass) {
    filter = design_bandpass(record.sample_rate, config.taps, config.low_hz, config.high_hz);
  }
  PreprocessedSignal out;
  out.samples.reserve(record.samples.size());
  for (std::size_t c = 0; c < record.leads; ++c) {
    std::vector<double> y(record.lead(c).begin(), record.lead(c).end());
    if (filter) y = apply_filter(y, *filter);
    if (config.standardize) y = standardize(y);
    out.samples.insert(out.samples.end(), y.begin(), y.end());
  }
  std::span<const double> ref(out.samples.data() + config.reference_lead * record.length,
                              record.length);
  auto r = detect_r_peaks(ref, record.sample_rate, config.rpeak);
  out.warning = r.warning;
  out.fiducials.r_peaks = r.peaks;
  for (const auto& p : detect_p_waves(ref, r.peaks, record.sample_rate, config.pwave)) {
    if (p) out.fiducials.p_waves.push_back(*p);
  }
  return out;
}

}  // namespace effecg
