// cssep: continuous speech separation toolkit.
//
// Subcommands:
//   simulate          synthesize a reverberant mixture dataset
//   train             toy-scale mask-estimator training
//   separate          split a recording into two overlap-free channels
//   evaluate          score separation quality over a dataset manifest
//   inspect-weights   dump a model container's config and checksums
//
// Every command accepts --config FILE (JSON) whose keys mirror the long
// flags; explicit flags override file values, and the effective
// configuration is echoed before the run so any result can be reproduced.
// Exit codes: 0 success, 1 usage error, 2 data/contract error, 3 internal.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "css/evaluate.hpp"
#include "css/train.hpp"

using nlohmann::json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Keeps "--foo" and config key "foo" in lockstep: every tunable registers
// once and gets a CLI option plus a JSON loader that only fires when the
// flag was not given on the command line.
class ConfigBinder {
 public:
  explicit ConfigBinder(CLI::App* cmd) : cmd_(cmd) {
    cmd->add_option("--config", path_,
                    "JSON file with defaults for any flag of this command");
  }

  template <class T>
  CLI::Option* bind(const std::string& key, T& target,
                    const std::string& help) {
    auto* opt = cmd_->add_option("--" + key, target, help);
    add_loader<T>(key, target, opt);
    return opt;
  }

  CLI::Option* bind_flag(const std::string& key, bool& target,
                         const std::string& help) {
    auto* opt = cmd_->add_flag("--" + key, target, help);
    add_loader<bool>(key, target, opt);
    return opt;
  }

  // Call after parsing; flags already hold their final values.
  void apply() const {
    if (path_.empty()) return;
    std::ifstream in(path_);
    if (!in) throw UsageError("cannot open config file '" + path_ + "'");
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw UsageError("config file '" + path_ + "': " + e.what());
    }
    if (!j.is_object())
      throw UsageError("config file '" + path_ + "': root must be an object");
    for (const auto& item : j.items())
      if (!keys_.count(item.key()))
        throw UsageError("config file '" + path_ + "': unknown key '" +
                         item.key() + "'");
    for (const auto& fn : loaders_) fn(j);
  }

 private:
  template <class T>
  void add_loader(const std::string& key, T& target, CLI::Option* opt) {
    keys_.insert(key);
    loaders_.push_back([key, &target, opt](const json& j) {
      if (!j.contains(key) || opt->count() > 0) return;
      try {
        target = j.at(key).get<T>();
      } catch (const json::exception& e) {
        throw UsageError("config key '" + key + "': " + e.what());
      }
    });
  }

  CLI::App* cmd_;
  std::string path_;
  std::set<std::string> keys_;
  std::vector<std::function<void(const json&)>> loaders_;
};

void echo_config(const std::string& command, const json& cfg) {
  json out = cfg;
  out["command"] = command;
  out["threads"] = css::max_threads();
  std::cout << "effective config: " << out.dump() << "\n";
}

std::string fmt_db(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%8.2f", v);
  return buf;
}

// ----------------------------------------------------------------------------
// simulate
// ----------------------------------------------------------------------------

struct SimArgs {
  std::string out;
  int64_t n = 10;
  uint64_t seed = 1;
  int channels = 7;
  uint32_t num_speakers = 16;
  double p_single = 0.10;
  double w_full = 0.38, w_partial = 0.33, w_sequential = 0.29;
  double min_utterance = 2.5, max_utterance = 4.0;
  double sir_lo = -5.0, sir_hi = 5.0;
  double snr_lo = 0.0, snr_hi = 10.0;
};

int run_simulate(const SimArgs& a) {
  json cfg = {{"out", a.out},
              {"n", a.n},
              {"seed", a.seed},
              {"channels", a.channels},
              {"num-speakers", a.num_speakers},
              {"p-single", a.p_single},
              {"w-full", a.w_full},
              {"w-partial", a.w_partial},
              {"w-sequential", a.w_sequential},
              {"min-utterance", a.min_utterance},
              {"max-utterance", a.max_utterance},
              {"sir-lo", a.sir_lo},
              {"sir-hi", a.sir_hi},
              {"snr-lo", a.snr_lo},
              {"snr-hi", a.snr_hi}};
  echo_config("simulate", cfg);

  css::MixtureOptions o;
  o.seed = a.seed;
  o.channels = a.channels;
  o.num_speakers = a.num_speakers;
  o.p_single = a.p_single;
  o.w_full = a.w_full;
  o.w_partial = a.w_partial;
  o.w_sequential = a.w_sequential;
  o.min_utterance_s = a.min_utterance;
  o.max_utterance_s = a.max_utterance;
  o.sir_lo = a.sir_lo;
  o.sir_hi = a.sir_hi;
  o.snr_lo = a.snr_lo;
  o.snr_hi = a.snr_hi;

  auto stats = css::generate_dataset<float>(o, a.n, a.out);
  if (stats.count == 0)
    std::cerr << "warning: n = 0, wrote an empty manifest\n";
  std::cout << "wrote " << stats.count << " mixtures to " << a.out << "\n";
  if (stats.count > 0)
    std::cout << "mean overlap: "
              << int(std::lround(stats.mean_overlap * 100.0)) << "%\n";
  std::cout << "manifest: " << a.out << "/manifest.jsonl\n";
  return 0;
}

// ----------------------------------------------------------------------------
// train
// ----------------------------------------------------------------------------

struct TrainArgs {
  std::string manifest, out, resume;
  uint64_t seed = 1;
  int64_t steps = 5000, warmup = 200;
  double peak_lr = 1e-4;
  int64_t micro_batch = 4, crop_frames = 150, checkpoint_every = 1000;
  bool noisy_targets = false;
  uint32_t layers = 2, heads = 4, attn_dim = 64, ffn_dim = 128;
  uint32_t conv_kernel = 33, bins = 257, max_chunk = 150;
  int channels = 1;
};

int run_train(const TrainArgs& a) {
  json cfg = {{"manifest", a.manifest}, {"out", a.out},
              {"resume", a.resume},     {"seed", a.seed},
              {"steps", a.steps},       {"warmup", a.warmup},
              {"peak-lr", a.peak_lr},   {"micro-batch", a.micro_batch},
              {"crop-frames", a.crop_frames},
              {"checkpoint-every", a.checkpoint_every},
              {"noisy-targets", a.noisy_targets},
              {"layers", a.layers},     {"heads", a.heads},
              {"attn-dim", a.attn_dim}, {"ffn-dim", a.ffn_dim},
              {"conv-kernel", a.conv_kernel},
              {"bins", a.bins},         {"max-chunk", a.max_chunk},
              {"channels", a.channels}};
  echo_config("train", cfg);

  css::ConformerConfig mc;
  mc.num_layers = a.layers;
  mc.num_heads = a.heads;
  mc.attn_dim = a.attn_dim;
  mc.ffn_dim = a.ffn_dim;
  mc.conv_kernel = a.conv_kernel;
  mc.max_chunk_len = a.max_chunk;
  mc.num_bins = a.bins;
  mc.feature_dim =
      uint32_t(css::feature_dim_for(int64_t(a.bins), a.channels));
  mc.validate();

  css::Schedule sched;
  sched.warmup_steps = a.warmup;
  sched.total_steps = a.steps;

  css::TrainOptions opt;
  opt.seed = a.seed;
  opt.peak_lr = a.peak_lr;
  opt.micro_batch = a.micro_batch;
  opt.crop_frames = a.crop_frames;
  opt.checkpoint_every = a.checkpoint_every;
  opt.noisy_targets = a.noisy_targets;
  opt.out_dir = a.out;
  opt.resume_from = a.resume;

  std::filesystem::create_directories(a.out);
  auto result = css::train_toy<float>(a.manifest, mc, sched, opt);

  std::cout << "trained steps " << result.first_step << ".." << a.steps
            << "; parameters " << css::count_parameters(mc) << "\n";
  if (!result.losses.empty())
    std::cout << "first loss " << result.losses.front() << ", last loss "
              << result.losses.back() << "\n";
  std::cout << "model: " << a.out << "/model.cssw\n";
  std::cout << "log: " << a.out << "/loss.csv\n";
  return 0;
}

// ----------------------------------------------------------------------------
// separate
// ----------------------------------------------------------------------------

struct SepArgs {
  std::string input, weights, out_prefix = "sep";
  std::string channels = "auto";  // auto|1|7
  std::string merge = "off";      // on|off
  int64_t cache = -1;             // <0 keeps the model's setting
  double merge_threshold = 10.0;
  int64_t ref_channel = 0;
};

int run_separate(const SepArgs& a) {
  json cfg = {{"input", a.input},
              {"weights", a.weights},
              {"out-prefix", a.out_prefix},
              {"channels", a.channels},
              {"merge", a.merge},
              {"cache", a.cache},
              {"merge-threshold", a.merge_threshold},
              {"ref-channel", a.ref_channel}};
  echo_config("separate", cfg);

  auto w = css::load_weights<float>(a.weights);
  if (a.cache >= 0) w.config.cache_chunks = uint32_t(a.cache);

  auto audio = css::read_wav<float>(a.input);
  if (a.channels == "1" && audio.channels > 1)
    audio = css::take_channel(audio, 0);
  else if (a.channels == "7" && audio.channels != 7)
    throw css::ContractError("--channels 7: input '" + a.input + "' has " +
                             std::to_string(audio.channels) + " channels");
  std::cout << "input: " << a.input << " (" << audio.channels << " ch, "
            << audio.length << " samples)\n";

  css::SeparateOptions opt;
  opt.merge = a.merge == "on";
  opt.merge_threshold = a.merge_threshold;
  opt.ref_channel = a.ref_channel;

  auto res = css::separate_stream(audio, w, opt);
  std::cout << "path: " << (res.used_mvdr ? "mvdr beamforming"
                                          : "spectral masking")
            << "\n";
  std::cout << "chunks: " << res.chunks << ", channel swaps: " << res.flips
            << ", merged blocks: " << res.merged_blocks << "\n";

  for (int s = 0; s < 2; ++s) {
    const std::string path = a.out_prefix + std::to_string(s) + ".wav";
    css::write_wav(path, res.outputs[size_t(s)]);
    std::cout << "wrote " << path << " (" << res.outputs[size_t(s)].length
              << " samples)\n";
  }
  return 0;
}

// ----------------------------------------------------------------------------
// evaluate
// ----------------------------------------------------------------------------

struct EvalArgs {
  std::string manifest, weights, json_out;
  int64_t limit = 0;
  std::string merge = "off";
  int64_t cache = -1;
};

json report_to_json(const css::EvalReport& rep) {
  json rows = json::array();
  for (const auto& r : rep.rows)
    rows.push_back({{"id", r.id},
                    {"bucket", r.bucket},
                    {"overlap_ratio", r.overlap_ratio},
                    {"num_sources", r.num_sources},
                    {"si_snr_db", r.si_snr_db},
                    {"mixture_db", r.mixture_db},
                    {"improvement_db", r.improvement_db},
                    {"chunks", r.chunks},
                    {"flips", r.flips}});
  json buckets = json::object();
  for (const auto& [name, st] : rep.buckets)
    buckets[name] = {{"count", st.count},
                     {"median_si_snr_db", st.median_si_snr},
                     {"median_improvement_db", st.median_improvement}};
  return {{"rows", rows},
          {"buckets", buckets},
          {"summary",
           {{"mean_si_snr_db", rep.mean_si_snr},
            {"median_si_snr_db", rep.median_si_snr},
            {"mean_improvement_db", rep.mean_improvement},
            {"median_improvement_db", rep.median_improvement}}}};
}

int run_evaluate(const EvalArgs& a) {
  json cfg = {{"manifest", a.manifest},
              {"weights", a.weights},
              {"json", a.json_out},
              {"limit", a.limit},
              {"merge", a.merge},
              {"cache", a.cache}};
  echo_config("evaluate", cfg);

  auto w = css::load_weights<float>(a.weights);
  if (a.cache >= 0) w.config.cache_chunks = uint32_t(a.cache);
  css::SeparateOptions opt;
  opt.merge = a.merge == "on";

  auto rep = css::evaluate_manifest(a.manifest, w, opt, a.limit);

  std::cout << "id      bucket  overlap sources  mix_db   sep_db  gain_db"
               " flips\n";
  for (const auto& r : rep.rows) {
    char head[64];
    std::snprintf(head, sizeof head, "%-7s %-7s %6.2f %7d", r.id.c_str(),
                  r.bucket.c_str(), r.overlap_ratio, r.num_sources);
    std::cout << head << fmt_db(r.mixture_db) << fmt_db(r.si_snr_db)
              << fmt_db(r.improvement_db) << "  " << r.flips << "\n";
  }
  std::cout << "\nbucket  count  median_sep_db  median_gain_db\n";
  for (const auto& [name, st] : rep.buckets) {
    char line[96];
    std::snprintf(line, sizeof line, "%-7s %5lld %14.2f %15.2f", name.c_str(),
                  (long long)st.count, st.median_si_snr,
                  st.median_improvement);
    std::cout << line << "\n";
  }
  std::cout << "\noverall: " << rep.rows.size() << " mixtures, median gain "
            << fmt_db(rep.median_improvement) << " dB, mean gain "
            << fmt_db(rep.mean_improvement) << " dB\n";

  const json j = report_to_json(rep);
  if (a.json_out.empty()) {
    std::cout << "json: " << j.dump() << "\n";
  } else {
    std::ofstream out(a.json_out);
    if (!out)
      throw css::ContractError("evaluate: cannot write '" + a.json_out + "'");
    out << j.dump(2) << "\n";
    std::cout << "report: " << a.json_out << "\n";
  }
  return 0;
}

// ----------------------------------------------------------------------------
// inspect-weights
// ----------------------------------------------------------------------------

int run_inspect(const std::string& path) {
  echo_config("inspect-weights", {{"file", path}});
  auto w = css::load_weights<float>(path);
  const auto& c = w.config;
  std::cout << "file: " << path << "\n";
  std::cout << "config: layers=" << c.num_layers << " heads=" << c.num_heads
            << " attn_dim=" << c.attn_dim << " ffn_dim=" << c.ffn_dim
            << " conv_kernel=" << c.conv_kernel
            << " max_chunk_len=" << c.max_chunk_len
            << " num_masks=" << c.num_masks
            << " feature_dim=" << c.feature_dim << " num_bins=" << c.num_bins
            << " cache_chunks=" << c.cache_chunks << "\n";
  std::cout << "parameters: " << w.params.order.size() << " tensors, "
            << w.params.total_elements() << " elements\n";
  std::cout << "tensor checksums:\n";
  for (const auto& name : w.params.order) {
    const auto& t = w.params.at(name);
    const uint32_t crc =
        css::crc32(t->data.data(), t->data.size() * sizeof(float));
    char line[160];
    std::snprintf(line, sizeof line, "  %-28s %-14s crc32 %08X", name.c_str(),
                  css::shape_to_string(t->shape).c_str(), crc);
    std::cout << line << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"continuous speech separation toolkit"};
  app.require_subcommand(1);

  SimArgs sim;
  auto* sim_cmd =
      app.add_subcommand("simulate", "synthesize a reverberant mixture set");
  ConfigBinder sim_bind(sim_cmd);
  sim_bind.bind("out", sim.out, "output directory")->required();
  sim_bind.bind("n", sim.n, "number of mixtures [10]");
  sim_bind.bind("seed", sim.seed, "dataset seed [1]");
  sim_bind.bind("channels", sim.channels, "microphones, 1..7 [7]")
      ->check(CLI::Range(1, 7));
  sim_bind.bind("num-speakers", sim.num_speakers, "voice pool size [16]");
  sim_bind.bind("p-single", sim.p_single, "single-speaker probability [0.1]");
  sim_bind.bind("w-full", sim.w_full, "full-overlap pattern weight [0.38]");
  sim_bind.bind("w-partial", sim.w_partial, "partial pattern weight [0.33]");
  sim_bind.bind("w-sequential", sim.w_sequential,
                "sequential pattern weight [0.29]");
  sim_bind.bind("min-utterance", sim.min_utterance,
                "shortest utterance, seconds [2.5]");
  sim_bind.bind("max-utterance", sim.max_utterance,
                "longest utterance, seconds [4.0]");
  sim_bind.bind("sir-lo", sim.sir_lo, "SIR range low, dB [-5]");
  sim_bind.bind("sir-hi", sim.sir_hi, "SIR range high, dB [5]");
  sim_bind.bind("snr-lo", sim.snr_lo, "SNR range low, dB [0]");
  sim_bind.bind("snr-hi", sim.snr_hi, "SNR range high, dB [10]");

  TrainArgs tr;
  auto* tr_cmd = app.add_subcommand("train", "toy mask-estimator training");
  ConfigBinder tr_bind(tr_cmd);
  tr_bind.bind("manifest", tr.manifest, "dataset manifest")->required();
  tr_bind.bind("out", tr.out, "run directory for model and log")->required();
  tr_bind.bind("resume", tr.resume, "checkpoint stem to continue from");
  tr_bind.bind("seed", tr.seed, "training seed [1]");
  tr_bind.bind("steps", tr.steps, "total optimizer steps [5000]");
  tr_bind.bind("warmup", tr.warmup, "linear warmup steps [200]");
  tr_bind.bind("peak-lr", tr.peak_lr, "peak learning rate [1e-4]");
  tr_bind.bind("micro-batch", tr.micro_batch, "chunks per step [4]");
  tr_bind.bind("crop-frames", tr.crop_frames, "training crop length [150]");
  tr_bind.bind("checkpoint-every", tr.checkpoint_every,
               "steps between checkpoints, 0 disables [1000]");
  tr_bind.bind_flag("noisy-targets", tr.noisy_targets,
                    "train against noisy speaker references");
  tr_bind.bind("layers", tr.layers, "conformer blocks [2]");
  tr_bind.bind("heads", tr.heads, "attention heads [4]");
  tr_bind.bind("attn-dim", tr.attn_dim, "attention width [64]");
  tr_bind.bind("ffn-dim", tr.ffn_dim, "feed-forward width [128]");
  tr_bind.bind("conv-kernel", tr.conv_kernel, "depthwise kernel [33]");
  tr_bind.bind("bins", tr.bins, "frequency bins [257]");
  tr_bind.bind("max-chunk", tr.max_chunk, "max window frames [150]");
  tr_bind.bind("channels", tr.channels, "microphones the model consumes [1]")
      ->check(CLI::Range(1, 7));

  SepArgs sep;
  auto* sep_cmd =
      app.add_subcommand("separate", "split a recording into two channels");
  ConfigBinder sep_bind(sep_cmd);
  sep_bind.bind("input", sep.input, "input WAV, 16 kHz")->required();
  sep_bind.bind("weights", sep.weights, "model container (.cssw)")
      ->required();
  sep_bind.bind("out-prefix", sep.out_prefix,
                "output prefix; writes <prefix>0.wav and <prefix>1.wav "
                "[sep]");
  sep_bind.bind("channels", sep.channels, "auto|1|7 [auto]")
      ->check(CLI::IsMember({"auto", "1", "7"}));
  sep_bind.bind("merge", sep.merge, "fold lopsided blocks, on|off [off]")
      ->check(CLI::IsMember({"on", "off"}));
  sep_bind.bind("cache", sep.cache,
                "history chunks for attention; <0 keeps model value [-1]");
  sep_bind.bind("merge-threshold", sep.merge_threshold,
                "block energy ratio that triggers merging [10]");
  sep_bind.bind("ref-channel", sep.ref_channel,
                "beamformer reference microphone [0]");

  EvalArgs ev;
  auto* ev_cmd =
      app.add_subcommand("evaluate", "score separation over a manifest");
  ConfigBinder ev_bind(ev_cmd);
  ev_bind.bind("manifest", ev.manifest, "dataset manifest")->required();
  ev_bind.bind("weights", ev.weights, "model container (.cssw)")->required();
  ev_bind.bind("json", ev.json_out, "write the JSON report here instead of "
                                    "stdout");
  ev_bind.bind("limit", ev.limit, "evaluate only the first N rows [all]");
  ev_bind.bind("merge", ev.merge, "fold lopsided blocks, on|off [off]")
      ->check(CLI::IsMember({"on", "off"}));
  ev_bind.bind("cache", ev.cache,
               "history chunks for attention; <0 keeps model value [-1]");

  std::string inspect_path;
  auto* in_cmd =
      app.add_subcommand("inspect-weights", "dump a model container");
  in_cmd->add_option("file", inspect_path, "model container (.cssw)")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (sim_cmd->parsed()) {
      sim_bind.apply();
      return run_simulate(sim);
    }
    if (tr_cmd->parsed()) {
      tr_bind.apply();
      return run_train(tr);
    }
    if (sep_cmd->parsed()) {
      sep_bind.apply();
      return run_separate(sep);
    }
    if (ev_cmd->parsed()) {
      ev_bind.apply();
      return run_evaluate(ev);
    }
    if (in_cmd->parsed()) return run_inspect(inspect_path);
    throw UsageError("no subcommand given");
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const css::InternalError& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 3;
  } catch (const css::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 3;
  }
}
