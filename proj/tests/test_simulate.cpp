#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <complex>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "css/simulate.hpp"
#include "css/stft.hpp"

namespace {

constexpr double kPi = 3.14159265358979323846;

// c = 320 m/s makes samples-per-meter exactly 50, so chosen distances give
// exactly representable delays.
css::RoomSpec exact_room() {
  css::RoomSpec room;
  room.dims = {4.0, 4.0, 4.0};
  room.speed_of_sound = 320.0;
  room.absorption = 0.36;  // beta = 0.8 exactly
  room.reflection_order = 0;
  return room;
}

// Mean per-bin power over all frames of a mono buffer.
std::vector<double> welch_psd(const css::AudioBuffer<double>& x, int win,
                              int hop) {
  auto spec = css::stft(x, win, hop);
  std::vector<double> psd(size_t(spec.bins), 0.0);
  for (int64_t t = 0; t < spec.frames; ++t)
    for (int64_t f = 0; f < spec.bins; ++f)
      psd[size_t(f)] += std::norm(spec.at(0, t, f)) / double(spec.frames);
  return psd;
}

}  // namespace

TEST_CASE("order zero is a single impulse with 1/r amplitude") {
  auto room = exact_room();
  const css::Point3 src{1.0, 2.0, 2.0};
  const css::Point3 mic{3.0, 2.0, 2.0};  // distance 2 m -> delay 100 samples
  auto rir = css::image_method_rir<double>(room, src, mic);

  // Integer delay collapses the kernel to one tap, placed half a kernel
  // (16 samples) after the arrival by the shared interpolation latency.
  REQUIRE(int64_t(rir.size()) > 116);
  CHECK(rir[116] == 0.5);
  for (size_t i = 0; i < rir.size(); ++i)
    if (i != 116) CHECK(std::abs(rir[i]) < 1e-12);

  // Doubling the distance halves the amplitude.
  const css::Point3 mic_far{1.0, 2.0 + 4.0 * 0.5, 2.0};
  room.dims = {8.0, 8.0, 8.0};
  const css::Point3 src2{1.0, 1.0, 1.0};
  const css::Point3 mic2{5.0, 1.0, 1.0};  // 4 m -> delay 200
  auto rir2 = css::image_method_rir<double>(room, src2, mic2);
  CHECK(rir2[216] == 0.25);
  (void)mic_far;
}

TEST_CASE("fractional direct path keeps the 1/r energy law") {
  css::RoomSpec room;
  room.dims = {10.0, 8.0, 3.0};
  room.reflection_order = 0;
  const css::Point3 src{1.3, 2.1, 1.5};
  const css::Point3 near{2.6, 2.1, 1.5};  // 1.3 m
  const css::Point3 far{6.5, 2.1, 1.5};   // 5.2 m, four times the distance
  auto ra = css::image_method_rir<double>(room, src, near);
  auto rb = css::image_method_rir<double>(room, src, far);

  const double ea = css::energy(ra.data(), int64_t(ra.size()));
  const double eb = css::energy(rb.data(), int64_t(rb.size()));
  CHECK(ea / eb == Catch::Approx(16.0).epsilon(0.02));

  // Peak lands at the delay plus the constant half-kernel latency.
  size_t peak = 0;
  for (size_t i = 0; i < ra.size(); ++i)
    if (std::abs(ra[i]) > std::abs(ra[peak])) peak = i;
  const double delay =
      1.3 / 343.0 * 16000.0 + css::detail::kDelayTaps / 2;
  CHECK(std::abs(double(peak) - delay) <= 1.0);
}

TEST_CASE("order one in a cube yields the seven hand-enumerated arrivals") {
  auto room = exact_room();
  room.reflection_order = 1;
  const css::Point3 src{1.0, 2.0, 2.0};
  const css::Point3 mic{3.0, 2.0, 2.0};
  auto rir = css::image_method_rir<double>(room, src, mic);

  // Hand-enumerated images of (1,2,2) against each wall of the 4 m cube,
  // observed from (3,2,2); beta = 0.8.
  const double beta = 0.8;
  const double d20 = std::sqrt(20.0);
  struct Arrival {
    double dist;
    double amp;
  };
  const std::vector<Arrival> expect = {
      {2.0, 1.0 / 2.0},        // direct
      {4.0, beta / 4.0},       // x = 0 wall, image (-1,2,2)
      {4.0, beta / 4.0},       // x = 4 wall, image (7,2,2)
      {d20, beta / d20},       // y = 0 wall, image (1,-2,2)
      {d20, beta / d20},       // y = 4 wall, image (1,6,2)
      {d20, beta / d20},       // z = 0 wall, image (1,2,-2)
      {d20, beta / d20},       // z = 4 wall, image (1,2,6)
  };
  std::vector<double> want(rir.size(), 0.0);
  double taps[css::detail::kDelayTaps];
  for (const auto& a : expect) {
    const int64_t start = css::detail::delay_kernel(a.dist * 50.0, taps);
    for (int j = 0; j < css::detail::kDelayTaps; ++j)
      want[size_t(start + j)] += a.amp * taps[j];
  }
  for (size_t i = 0; i < rir.size(); ++i)
    CHECK(rir[i] == Catch::Approx(want[i]).margin(1e-12));
}

TEST_CASE("no energy arrives before the direct path") {
  css::RoomSpec room;
  room.dims = {6.5, 5.2, 3.1};
  room.reflection_order = 6;
  room.absorption = 0.4;
  const css::Point3 src{1.7, 2.9, 1.4};
  const css::Point3 mic{4.3, 1.8, 1.2};
  auto rir = css::image_method_rir<double>(room, src, mic);

  const double dx = src[0] - mic[0], dy = src[1] - mic[1], dz = src[2] - mic[2];
  const double direct = std::sqrt(dx * dx + dy * dy + dz * dz);
  const int64_t first = int64_t(std::ceil(direct / 343.0 * 16000.0));
  for (int64_t i = 0; i < first; ++i) CHECK(rir[size_t(i)] == 0.0);
  CHECK(std::abs(rir[size_t(first)]) > 0.0);
}

TEST_CASE("geometry violations are rejected") {
  auto room = exact_room();
  CHECK_THROWS_AS(
      css::image_method_rir<double>(room, {5.0, 2.0, 2.0}, {1.0, 1.0, 1.0}),
      css::GeometryError);
  CHECK_THROWS_AS(
      css::image_method_rir<double>(room, {1.0, 1.0, 1.0}, {1.0, 4.0, 1.0}),
      css::GeometryError);
  room.reflection_order = 7;
  CHECK_THROWS_AS(
      css::image_method_rir<double>(room, {1.0, 1.0, 1.0}, {2.0, 1.0, 1.0}),
      css::ConfigError);
}

TEST_CASE("isotropic noise is white at a single microphone") {
  css::RoomSpec room;
  room.mics = {{3.0, 2.5, 1.5}};
  css::Rng rng(42);
  auto noise = css::isotropic_noise<double>(room, 10 * css::kSampleRate, rng);
  REQUIRE(noise.channels == 1);

  auto psd = welch_psd(noise, 512, 256);
  // 100 Hz to 7 kHz band; bin width is 31.25 Hz.
  const int lo = 4, hi = 224;
  double mean = 0.0;
  for (int f = lo; f <= hi; ++f) mean += psd[size_t(f)] / double(hi - lo + 1);
  for (int f = lo; f <= hi; ++f) {
    const double dev = 10.0 * std::log10(psd[size_t(f)] / mean);
    INFO("bin " << f << " (" << f * 31.25 << " Hz) deviates " << dev << " dB");
    CHECK(std::abs(dev) < 2.0);
  }
}

TEST_CASE("coincident microphones receive identical noise") {
  css::RoomSpec room;
  room.mics = {{2.0, 2.0, 1.5}, {2.0, 2.0, 1.5}};
  css::Rng rng(43);
  auto noise = css::isotropic_noise<double>(room, css::kSampleRate, rng);
  for (int64_t t = 0; t < noise.length; ++t)
    CHECK(noise.at(0, t) == noise.at(1, t));
}

TEST_CASE("widely spaced microphones decorrelate above 1 kHz") {
  css::RoomSpec room;
  room.mics = {{2.0, 2.0, 1.5}, {2.5, 2.0, 1.5}};  // 0.5 m apart
  css::Rng rng(44);
  auto noise = css::isotropic_noise<double>(room, 8 * css::kSampleRate, rng);

  auto spec = css::stft(noise, 512, 256);
  double acc = 0.0;
  int64_t bins = 0;
  for (int64_t f = 33; f < spec.bins; ++f) {  // > 1 kHz
    std::complex<double> s12(0, 0);
    double s11 = 0, s22 = 0;
    for (int64_t t = 0; t < spec.frames; ++t) {
      s12 += spec.at(0, t, f) * std::conj(spec.at(1, t, f));
      s11 += std::norm(spec.at(0, t, f));
      s22 += std::norm(spec.at(1, t, f));
    }
    acc += std::norm(s12) / (s11 * s22);
    ++bins;
  }
  CHECK(acc / double(bins) < 0.09);  // mean squared coherence, well under 0.3
}

TEST_CASE("surrogate speech is deterministic and class-separated") {
  auto a1 = css::surrogate_speech<double>(0, 7, 2 * css::kSampleRate);
  auto a2 = css::surrogate_speech<double>(0, 7, 2 * css::kSampleRate);
  CHECK(a1.samples == a2.samples);
  auto b = css::surrogate_speech<double>(0, 8, 2 * css::kSampleRate);
  CHECK(a1.samples != b.samples);

  CHECK_THROWS_AS(css::surrogate_speech<double>(0, 7, 0), css::ContractError);

  // Class separation: the 70-160 Hz band holds the low class's fundamental
  // and nothing of the high class's comb, so the band-energy ratio against
  // 180-280 Hz splits the classes by a wide margin even though spectral tilt
  // keeps either band from dominating within one voice.
  auto band = [](const std::vector<double>& psd, double lo, double hi) {
    const double width = double(css::kSampleRate) / 2048.0;
    double e = 0.0;
    for (size_t f = 0; f < psd.size(); ++f)
      if (double(f) * width >= lo && double(f) * width <= hi) e += psd[f];
    return e;
  };
  double min_even = 1e30, max_odd = 0.0;
  for (uint32_t spk = 0; spk < 6; ++spk) {
    auto u = css::surrogate_speech<double>(spk, 11, 3 * css::kSampleRate);
    auto psd = welch_psd(u, 2048, 1024);
    const double ratio = band(psd, 70.0, 160.0) / band(psd, 180.0, 280.0);
    if (spk % 2 == 0)
      min_even = std::min(min_even, ratio);
    else
      max_odd = std::max(max_odd, ratio);
  }
  CHECK(min_even > 0.3);
  CHECK(max_odd < 0.05);
  CHECK(min_even > 20.0 * max_odd);
}

TEST_CASE("mixtures are bit-deterministic and energy-exact") {
  css::MixtureOptions opt;
  opt.channels = 2;
  opt.min_utterance_s = 1.0;
  opt.max_utterance_s = 1.5;
  css::MixtureRecipe recipe = css::sample_recipe(opt, 3);
  recipe.speakers = {2, 5};
  recipe.pattern = css::OverlapPattern::kFull;
  recipe.sir_db = 3.7;
  recipe.snr_db = 4.2;

  auto cleans = css::make_clean_sources<double>(recipe);
  auto m1 = css::synthesize_mixture(recipe, cleans);
  auto m2 = css::synthesize_mixture(recipe, cleans);
  CHECK(m1.mixture.samples == m2.mixture.samples);
  CHECK(m1.noise.samples == m2.noise.samples);

  CHECK(m1.measured_sir_db == Catch::Approx(3.7).margin(1e-6));
  CHECK(m1.measured_snr_db == Catch::Approx(4.2).margin(1e-6));

  recipe.sir_db = 0.0;
  auto m0 = css::synthesize_mixture(recipe, cleans);
  const double e0 = css::energy(m0.images[0].samples.data(),
                                int64_t(m0.images[0].samples.size()));
  const double e1 = css::energy(m0.images[1].samples.data(),
                                int64_t(m0.images[1].samples.size()));
  CHECK(std::abs(10.0 * std::log10(e0 / e1)) < 0.01);
}

TEST_CASE("disabling noise leaves the bare image sum") {
  css::MixtureOptions opt;
  opt.channels = 1;
  css::MixtureRecipe recipe = css::sample_recipe(opt, 12);
  recipe.speakers = {0, 1};
  recipe.utterance_s = 1.0;
  recipe.noise_enabled = false;

  auto cleans = css::make_clean_sources<double>(recipe);
  auto m = css::synthesize_mixture(recipe, cleans);
  for (size_t i = 0; i < m.mixture.samples.size(); ++i)
    CHECK(m.mixture.samples[i] ==
          m.images[0].samples[i] + m.images[1].samples[i]);
  for (double v : m.noise.samples) CHECK(v == 0.0);
}

TEST_CASE("mixture contract violations") {
  css::MixtureOptions opt;
  css::MixtureRecipe recipe = css::sample_recipe(opt, 0);
  recipe.speakers = {1, 2};
  std::vector<css::AudioBuffer<double>> one;
  one.emplace_back(1, 100);
  one[0].at(0, 50) = 1.0;
  CHECK_THROWS_AS(css::synthesize_mixture(recipe, one), css::ContractError);

  recipe.speakers = {1};
  std::vector<css::AudioBuffer<double>> stereo;
  stereo.emplace_back(2, 100);
  CHECK_THROWS_AS(css::synthesize_mixture(recipe, stereo),
                  css::ContractError);

  std::vector<css::AudioBuffer<double>> wrong_rate;
  wrong_rate.emplace_back(1, 100, 8000);
  CHECK_THROWS_AS(css::synthesize_mixture(recipe, wrong_rate),
                  css::ContractError);
}

TEST_CASE("sequential and partial placements realize their targets") {
  css::MixtureOptions opt;
  opt.channels = 1;
  opt.min_utterance_s = 1.0;
  opt.max_utterance_s = 1.0;

  css::MixtureRecipe recipe = css::sample_recipe(opt, 1);
  recipe.speakers = {0, 1};
  recipe.utterance_s = 1.0;
  recipe.pattern = css::OverlapPattern::kSequential;
  recipe.gap_s = 0.25;
  auto cleans = css::make_clean_sources<double>(recipe);
  auto seq = css::synthesize_mixture(recipe, cleans);
  CHECK(seq.overlap_ratio == 0.0);
  CHECK(seq.placements[1].offset ==
        css::kSampleRate + css::kSampleRate / 4);

  recipe.pattern = css::OverlapPattern::kPartial;
  for (double target : {0.25, 0.5, 0.75}) {
    recipe.target_overlap = target;
    auto m = css::synthesize_mixture(recipe, cleans);
    CHECK(m.overlap_ratio == Catch::Approx(target).margin(1e-3));
  }
}

TEST_CASE("default recipe stream averages near 50 percent overlap") {
  css::MixtureOptions opt;
  const int64_t n = 200;
  double mean = 0.0;
  int64_t singles = 0;
  for (int64_t i = 0; i < n; ++i) {
    auto r = css::sample_recipe(opt, i);
    REQUIRE((r.speakers.size() == 1 || r.speakers.size() == 2));
    CHECK(r.sir_db >= -5.0);
    CHECK(r.sir_db <= 5.0);
    CHECK(r.snr_db >= 0.0);
    CHECK(r.snr_db <= 10.0);
    if (r.speakers.size() == 1) {
      ++singles;
      continue;
    }
    CHECK(r.speakers[0] % 2 == 0);
    CHECK(r.speakers[1] % 2 == 1);
    const int64_t len = int64_t(std::llround(r.utterance_s * css::kSampleRate));
    css::SourcePlacement a{0, len}, b{0, len};
    switch (r.pattern) {
      case css::OverlapPattern::kFull:
        break;
      case css::OverlapPattern::kPartial:
        b.offset = css::detail::partial_offset_for(len, len, r.target_overlap);
        break;
      case css::OverlapPattern::kSequential:
        b.offset = len + int64_t(std::llround(r.gap_s * css::kSampleRate));
        break;
    }
    mean += css::interval_overlap_ratio(a, b);
  }
  mean /= double(n);
  INFO("mean overlap " << mean << ", singles " << singles);
  CHECK(mean > 0.45);
  CHECK(mean < 0.55);
  CHECK(singles > 5);
  CHECK(singles < 50);
}

TEST_CASE("dataset generation round-trips through the manifest") {
  namespace fs = std::filesystem;
  const std::string dir =
      (fs::temp_directory_path() / "css_sim_test").string();
  fs::remove_all(dir);

  css::MixtureOptions opt;
  opt.channels = 2;
  opt.min_utterance_s = 0.6;
  opt.max_utterance_s = 0.9;
  auto stats = css::generate_dataset<float>(opt, 3, dir);
  CHECK(stats.count == 3);

  auto entries = css::read_manifest(dir + "/manifest.jsonl");
  REQUIRE(entries.size() == 3);
  for (const auto& e : entries) {
    CHECK(e.channels == 2);
    auto mix = css::read_wav<float>(e.mixture_path);
    CHECK(mix.channels == 2);
    CHECK(mix.length == e.samples);
    REQUIRE(e.source_paths.size() == e.speakers.size());
    for (const auto& p : e.source_paths) {
      auto img = css::read_wav<float>(p);
      CHECK(img.length == e.samples);
    }
    auto noise = css::read_wav<float>(e.noise_path);
    CHECK(noise.length == e.samples);
  }

  // Regeneration is byte-identical, manifest included.
  const std::string dir2 = dir + "_again";
  fs::remove_all(dir2);
  css::generate_dataset<float>(opt, 3, dir2);
  auto slurp = [](const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  CHECK(slurp(dir + "/manifest.jsonl") == slurp(dir2 + "/manifest.jsonl"));
  CHECK(slurp(dir + "/000001_mix.wav") == slurp(dir2 + "/000001_mix.wav"));

  auto empty_stats = css::generate_dataset<float>(opt, 0, dir2);
  CHECK(empty_stats.count == 0);
  auto no_entries = css::read_manifest(dir2 + "/manifest.jsonl");
  CHECK(no_entries.empty());

  fs::remove_all(dir);
  fs::remove_all(dir2);
}
