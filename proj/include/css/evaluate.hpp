#pragma once

// Separation quality over a dataset manifest.  Each mixture is run through
// the streaming pipeline and scored with best-permutation SI-SNR against
// the reverberant source images at the reference microphone; improvement is
// measured against scoring the unprocessed mixture the same way.  Results
// are grouped into buckets along the overlap axis.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "css/metrics.hpp"
#include "css/pipeline.hpp"
#include "css/simulate.hpp"
#include "css/wav.hpp"

namespace css {

// ============================================================================
// Scoring
// ============================================================================

// Mean SI-SNR under the better of the two output-to-reference assignments.
// A single reference scores against whichever output matches it best.
template <class Real>
double best_permutation_si_snr(const std::array<AudioBuffer<Real>, 2>& outputs,
                               const std::vector<AudioBuffer<Real>>& refs) {
  if (refs.empty() || refs.size() > 2)
    throw ContractError("best_permutation_si_snr: need one or two references, "
                        "got " + std::to_string(refs.size()));
  for (const auto& r : refs)
    if (r.length != outputs[0].length || r.channels != 1)
      throw ShapeError("best_permutation_si_snr: references must be mono and "
                       "match the output length");
  auto score = [&](const AudioBuffer<Real>& est, const AudioBuffer<Real>& ref) {
    return si_snr(est.channel(0), ref.channel(0), ref.length);
  };
  if (refs.size() == 1)
    return std::max(score(outputs[0], refs[0]), score(outputs[1], refs[0]));
  const double identity =
      0.5 * (score(outputs[0], refs[0]) + score(outputs[1], refs[1]));
  const double swapped =
      0.5 * (score(outputs[0], refs[1]) + score(outputs[1], refs[0]));
  return std::max(identity, swapped);
}

// The no-processing baseline: the mixture's reference channel scored against
// every reference.  The assignment question disappears because the estimate
// is the same for all of them.
template <class Real>
double mixture_si_snr(const AudioBuffer<Real>& mixture,
                      const std::vector<AudioBuffer<Real>>& refs) {
  if (refs.empty())
    throw ContractError("mixture_si_snr: need at least one reference");
  double acc = 0.0;
  for (const auto& r : refs) {
    if (r.length != mixture.length)
      throw ShapeError("mixture_si_snr: reference length " +
                       std::to_string(r.length) + " vs mixture " +
                       std::to_string(mixture.length));
    acc += si_snr(mixture.channel(0), r.channel(0), r.length);
  }
  return acc / double(refs.size());
}

// ============================================================================
// Buckets and summaries
// ============================================================================

// Overlap-axis label: single-speaker mixtures, short/long silence gaps for
// sequential speech, and a nearest-decade overlap percentage otherwise.
inline std::string eval_bucket(const ManifestEntry& e) {
  if (e.source_paths.size() < 2) return "1spk";
  if (e.pattern == "sequential") return e.gap_s < 0.5 ? "0S" : "0L";
  int decade = int(std::lround(e.overlap_ratio * 10.0)) * 10;
  decade = std::max(10, std::min(40, decade));
  return "ov" + std::to_string(decade);
}

struct EvalRow {
  std::string id;
  std::string bucket;
  double overlap_ratio = 0.0;
  int num_sources = 0;
  double si_snr_db = 0.0;
  double mixture_db = 0.0;
  double improvement_db = 0.0;
  int64_t chunks = 0;
  int64_t flips = 0;
};

struct BucketStats {
  int64_t count = 0;
  double median_si_snr = 0.0;
  double median_improvement = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::map<std::string, BucketStats> buckets;
  double mean_si_snr = 0.0;
  double median_si_snr = 0.0;
  double mean_improvement = 0.0;
  double median_improvement = 0.0;
};

namespace detail {

inline double median(std::vector<double> v) {
  if (v.empty()) throw ContractError("median: empty sample");
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

inline EvalReport summarize(std::vector<EvalRow> rows) {
  if (rows.empty()) throw ContractError("summarize: no evaluation rows");
  EvalReport rep;
  std::map<std::string, std::vector<double>> snr, imp;
  std::vector<double> all_snr, all_imp;
  for (const auto& r : rows) {
    snr[r.bucket].push_back(r.si_snr_db);
    imp[r.bucket].push_back(r.improvement_db);
    all_snr.push_back(r.si_snr_db);
    all_imp.push_back(r.improvement_db);
  }
  for (const auto& [bucket, values] : snr) {
    BucketStats st;
    st.count = int64_t(values.size());
    st.median_si_snr = detail::median(values);
    st.median_improvement = detail::median(imp[bucket]);
    rep.buckets[bucket] = st;
  }
  rep.median_si_snr = detail::median(all_snr);
  rep.median_improvement = detail::median(all_imp);
  for (double v : all_snr) rep.mean_si_snr += v;
  for (double v : all_imp) rep.mean_improvement += v;
  rep.mean_si_snr /= double(all_snr.size());
  rep.mean_improvement /= double(all_imp.size());
  rep.rows = std::move(rows);
  return rep;
}

// ============================================================================
// Manifest evaluation
// ============================================================================

template <class Real>
EvalRow evaluate_entry(const ManifestEntry& entry,
                       const ConformerWeights<Real>& w,
                       const SeparateOptions& opt = {}) {
  auto mixture = read_wav<Real>(entry.mixture_path);
  require_sample_rate(mixture, kSampleRate, entry.mixture_path);
  if (entry.source_paths.empty())
    throw ContractError("evaluate: mixture " + entry.id +
                        " has no source images");

  std::vector<AudioBuffer<Real>> refs;
  for (const auto& path : entry.source_paths) {
    auto img = read_wav<Real>(path);
    if (img.length != mixture.length)
      throw ContractError("evaluate: source image length " +
                          std::to_string(img.length) +
                          " does not match mixture " +
                          std::to_string(mixture.length) + " in " + entry.id);
    refs.push_back(take_channel(img, 0));
  }

  auto res = separate_stream(mixture, w, opt);

  EvalRow row;
  row.id = entry.id;
  row.bucket = eval_bucket(entry);
  row.overlap_ratio = entry.overlap_ratio;
  row.num_sources = int(refs.size());
  row.si_snr_db = best_permutation_si_snr(res.outputs, refs);
  row.mixture_db = mixture_si_snr(take_channel(mixture, 0), refs);
  row.improvement_db = row.si_snr_db - row.mixture_db;
  row.chunks = res.chunks;
  row.flips = res.flips;
  return row;
}

template <class Real>
EvalReport evaluate_manifest(const std::string& manifest_path,
                             const ConformerWeights<Real>& w,
                             const SeparateOptions& opt = {},
                             int64_t limit = 0) {
  auto entries = read_manifest(manifest_path);
  if (entries.empty())
    throw ContractError("evaluate: manifest '" + manifest_path +
                        "' has no rows");
  if (limit > 0 && int64_t(entries.size()) > limit)
    entries.resize(size_t(limit));
  std::vector<EvalRow> rows;
  rows.reserve(entries.size());
  for (const auto& e : entries) rows.push_back(evaluate_entry(e, w, opt));
  return summarize(std::move(rows));
}

}  // namespace css
