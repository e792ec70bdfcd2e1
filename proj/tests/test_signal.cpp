#include <cmath>
#include <complex>
#include <random>

#include "doctest.h"
#include "effecg/rng.hpp"
#include "effecg/signal.hpp"

using namespace effecg;

namespace {

// Independent DFT of the impulse response, evaluated straight from the
// definition rather than through FirFilter::magnitude_at.
double dft_magnitude(const std::vector<double>& h, double hz, double fs) {
  double re = 0.0, im = 0.0;
  for (std::size_t n = 0; n < h.size(); ++n) {
    const double phase = 2.0 * M_PI * hz * static_cast<double>(n) / fs;
    re += h[n] * std::cos(phase);
    im -= h[n] * std::sin(phase);
  }
  return std::hypot(re, im);
}

double rms(const std::vector<double>& v, std::size_t lo, std::size_t hi) {
  double s = 0.0;
  for (std::size_t i = lo; i < hi; ++i) s += v[i] * v[i];
  return std::sqrt(s / static_cast<double>(hi - lo));
}

std::vector<double> filtered_lead(const EcgRecord& rec) {
  auto f = design_bandpass(rec.sample_rate, 201);
  return standardize(apply_filter(rec.lead(0), f));
}

}  // namespace

TEST_CASE("bandpass design meets its response targets") {
  const auto f = design_bandpass(500, 201);
  const auto& h = f.coefficients;
  REQUIRE(h.size() == 201);
  for (std::size_t i = 0; i < h.size(); ++i) CHECK(std::abs(h[i] - h[200 - i]) <= 1e-12);

  const double mid = dft_magnitude(h, 10.0, 500);
  CHECK(mid >= 0.89);
  CHECK(mid <= 1.12);
  CHECK(dft_magnitude(h, 0.0, 500) < 0.01);
  CHECK(dft_magnitude(h, 500 / 2.2, 500) <= 0.1);  // >= 20 dB
  CHECK(dft_magnitude(h, 60.0, 500) <= 0.1);
  CHECK(f.magnitude_at(10.0) == doctest::Approx(mid).epsilon(1e-12));
}

TEST_CASE("bandpass design rejects bad arguments") {
  CHECK_THROWS_AS(design_bandpass(500, 200), std::invalid_argument);
  CHECK_THROWS_AS(design_bandpass(500, 201, 45, 3), std::invalid_argument);
  CHECK_THROWS_AS(design_bandpass(80, 201, 3, 45), std::invalid_argument);
}

TEST_CASE("apply_filter basics") {
  const auto f = design_bandpass(500, 201);
  auto z = apply_filter(std::vector<double>(600, 0.0), f);
  for (double v : z) CHECK(v == 0.0);

  std::vector<double> impulse(1000, 0.0);
  impulse[500] = 1.0;
  auto y = apply_filter(impulse, f);
  for (std::size_t k = 0; k < 201; ++k) CHECK(y[400 + k] == f.coefficients[k]);
  CHECK(y[399] == 0.0);
  CHECK(y[601] == 0.0);

  // short signals are zero extended and keep their length
  CHECK(apply_filter(std::vector<double>(50, 1.0), f).size() == 50);
}

TEST_CASE("60 Hz mains is suppressed") {
  const double fs = 500;
  std::vector<double> x(5000);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::sin(2 * M_PI * 60.0 * i / fs);
  auto y = apply_filter(x, design_bandpass(fs, 201));
  CHECK(rms(y, 0, y.size()) <= 0.1 * rms(x, 0, x.size()));
}

TEST_CASE("apply_filter is linear") {
  const auto f = design_bandpass(250, 101);
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> a(300), b(300), mix(300);
    const double alpha = rng.uniform(-2, 2), beta = rng.uniform(-2, 2);
    for (std::size_t i = 0; i < 300; ++i) {
      a[i] = rng.normal();
      b[i] = rng.normal();
      mix[i] = alpha * a[i] + beta * b[i];
    }
    auto fa = apply_filter(a, f), fb = apply_filter(b, f), fm = apply_filter(mix, f);
    for (std::size_t i = 0; i < 300; ++i) CHECK(std::abs(fm[i] - (alpha * fa[i] + beta * fb[i])) <= 1e-9);
  }
}

TEST_CASE("standardize") {
  auto s = standardize(std::vector<double>{1, 2, 3});
  CHECK(s[0] == doctest::Approx(-1.2247).epsilon(1e-3));
  CHECK(s[1] == doctest::Approx(0.0));
  CHECK(s[2] == doctest::Approx(1.2247).epsilon(1e-3));
  for (double v : standardize(std::vector<double>{5, 5, 5})) CHECK(v == 0.0);

  Rng rng(9);
  std::vector<double> x(257);
  for (auto& v : x) v = 3.0 + 4.0 * rng.normal();
  auto once = standardize(x);
  auto twice = standardize(once);
  double mu = 0, var = 0;
  for (double v : once) mu += v;
  mu /= once.size();
  for (double v : once) var += (v - mu) * (v - mu);
  var /= once.size();
  CHECK(std::abs(mu) <= 1e-9);
  CHECK(std::abs(var - 1.0) <= 1e-6);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(once[i] - twice[i]) <= 1e-9);
}

TEST_CASE("synthetic generator") {
  SynthConfig cfg;
  cfg.beats = 10;
  cfg.bpm = 60;
  cfg.sample_rate = 500;
  auto a = synth_ecg(cfg);
  REQUIRE(a.truth.r_peaks.size() == 10);
  for (std::size_t k = 1; k < 10; ++k) CHECK(a.truth.r_peaks[k] - a.truth.r_peaks[k - 1] == 500);
  CHECK(a.record.length == 5000);

  cfg.amplitude = 2.0;
  auto b = synth_ecg(cfg);
  for (std::size_t i = 0; i < a.record.samples.size(); ++i) {
    CHECK(b.record.samples[i] == 2.0 * a.record.samples[i]);
  }

  cfg.noise_std = 0.05;
  cfg.seed = 77;
  auto n1 = synth_ecg(cfg), n2 = synth_ecg(cfg);
  CHECK(n1.record.samples == n2.record.samples);

  cfg.bpm = 300;
  CHECK_THROWS_AS(synth_ecg(cfg), std::invalid_argument);
}

TEST_CASE("R-peaks on a 10 beat record") {
  SynthConfig cfg;
  cfg.beats = 10;
  cfg.bpm = 60;
  cfg.sample_rate = 500;
  auto s = synth_ecg(cfg);
  auto r = detect_r_peaks(filtered_lead(s.record), 500);
  REQUIRE(r.peaks.size() == 10);
  for (std::size_t k = 0; k < 10; ++k) {
    CHECK(std::abs(static_cast<long>(r.peaks[k]) - static_cast<long>(s.truth.r_peaks[k])) <= 2);
  }
}

TEST_CASE("R-peak detector edge cases") {
  CHECK(detect_r_peaks(std::vector<double>(5000, 0.0), 500).peaks.empty());

  auto short_result = detect_r_peaks(std::vector<double>(100, 1.0), 500);
  CHECK(short_result.peaks.empty());
  CHECK(short_result.warning.has_value());

  // two QRS-like pulses 100 ms apart fall into one refractory period
  std::vector<double> x(1000, 0.0);
  for (std::size_t c : {400, 450}) {
    for (int d = -10; d <= 10; ++d) x[c + d] = 1.0 - std::abs(d) / 10.0;
  }
  CHECK(detect_r_peaks(x, 500).peaks.size() == 1);
}

TEST_CASE("R-peak sensitivity and predictivity on clean records") {
  for (double bpm : {50.0, 75.0, 120.0}) {
    for (double seconds : {10.0, 30.0, 60.0}) {
      SynthConfig cfg;
      cfg.bpm = bpm;
      cfg.sample_rate = 500;
      cfg.beats = static_cast<std::size_t>(seconds * bpm / 60.0);
      auto s = synth_ecg(cfg);
      auto peaks = detect_r_peaks(filtered_lead(s.record), 500).peaks;
      const long tol = 20;  // 40 ms at 500 Hz
      std::size_t matched = 0;
      for (auto t : s.truth.r_peaks) {
        for (auto p : peaks) {
          if (std::abs(static_cast<long>(p) - static_cast<long>(t)) <= tol) {
            ++matched;
            break;
          }
        }
      }
      INFO("bpm " << bpm << " duration " << seconds);
      CHECK(matched == s.truth.r_peaks.size());
      CHECK(peaks.size() == s.truth.r_peaks.size());
    }
  }
}

TEST_CASE("P-wave detection") {
  SynthConfig cfg;
  cfg.beats = 10;
  cfg.bpm = 75;
  cfg.sample_rate = 500;
  auto s = synth_ecg(cfg);
  auto y = filtered_lead(s.record);
  auto p = detect_p_waves(y, s.truth.r_peaks, 500);
  REQUIRE(p.size() == 10);
  for (std::size_t k = 0; k < 10; ++k) {
    REQUIRE(p[k].has_value());
    CHECK(std::abs(static_cast<long>(*p[k]) - static_cast<long>(s.truth.p_waves[k])) <= 5);
  }

  // R at 50 ms: window starts before the record
  std::vector<std::size_t> early{25};
  auto none = detect_p_waves(y, early, 500);
  REQUIRE(none.size() == 1);
  CHECK_FALSE(none[0].has_value());

  cfg.p_amplitude = 0.0;
  cfg.bpm = 60;
  auto flat = synth_ecg(cfg);
  auto yf = filtered_lead(flat.record);
  for (const auto& d : detect_p_waves(yf, flat.truth.r_peaks, 500)) CHECK_FALSE(d.has_value());
}

TEST_CASE("clip_pad") {
  auto a = clip_pad(std::vector<std::size_t>{3, 9}, 4);
  CHECK(a.values == std::vector<std::int64_t>{3, 9, -1, -1});
  CHECK(a.mask == std::vector<std::uint8_t>{1, 1, 0, 0});
  auto b = clip_pad(std::vector<std::size_t>{1, 2, 3, 4, 5}, 3);
  CHECK(b.values == std::vector<std::int64_t>{1, 2, 3});
  CHECK(b.mask == std::vector<std::uint8_t>{1, 1, 1});
  auto c = clip_pad(std::vector<std::size_t>{}, 2);
  CHECK(c.values == std::vector<std::int64_t>{-1, -1});
  CHECK(c.mask == std::vector<std::uint8_t>{0, 0});
  CHECK(c.valid_count() == 0);
  CHECK_THROWS_AS(clip_pad(std::vector<std::size_t>{1}, 0), std::invalid_argument);
}

TEST_CASE("preprocess picks fiducials from the reference lead") {
  SynthConfig cfg;
  cfg.beats = 8;
  cfg.bpm = 75;
  cfg.sample_rate = 500;
  cfg.leads = 3;
  auto s = synth_ecg(cfg);
  PreprocessConfig pc;
  pc.reference_lead = 2;
  auto out = preprocess(s.record, pc);
  CHECK(out.samples.size() == s.record.samples.size());
  CHECK(out.fiducials.r_peaks.size() == 8);
  CHECK(out.fiducials.p_waves.size() == 8);
  pc.reference_lead = 3;
  CHECK_THROWS_AS(preprocess(s.record, pc), std::invalid_argument);
}
