// tracectl: build trace banks, score frame streams, evaluate reports.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 embedding service error.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "trace/trace.hpp"

namespace {

using namespace trace;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitService = 3;

// flag combination problems found after parsing
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require(bool ok, const std::string& msg) {
  if (!ok) throw UsageError(msg);
}

std::vector<std::size_t> parse_csv(const std::string& s, const std::string& flag) {
  std::vector<std::size_t> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(item, &used);
      require(used == item.size() && v > 0, "");
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw UsageError(flag + ": expected a comma-separated list of positive integers, got \"" + s + "\"");
    }
  }
  require(!out.empty(), flag + " must not be empty");
  return out;
}

void print_json(const nlohmann::json& j) { std::cout << j.dump(2) << '\n'; }

// ---------------------------------------------------------------------------

struct BuildBankArgs {
  std::string input, out, vocab, embedder = "stub", endpoint;
  std::size_t dim = 512, batch_size = 32, max_in_flight = 4;
  std::uint64_t seed = 0, timeout_ms = 10000;
  std::optional<double> merge_threshold, prune_threshold;
  bool strict = false;
};

int build_bank(const BuildBankArgs& a) {
  EmbedderSpec spec;
  spec.kind = a.embedder == "http" ? EmbedderKind::http : EmbedderKind::stub;
  spec.dim = a.dim;
  spec.endpoint = a.endpoint;
  spec.seed = a.seed;
  spec.timeout = std::chrono::milliseconds(a.timeout_ms);
  spec.batch_size = a.batch_size;
  spec.max_in_flight = a.max_in_flight;
  require(spec.kind != EmbedderKind::http || !spec.endpoint.empty(), "--embedder http needs --endpoint");
  require(a.dim > 0 && a.batch_size > 0 && a.max_in_flight > 0, "--dim, --batch-size and --max-in-flight must be >= 1");
  if (a.merge_threshold) require(*a.merge_threshold > 0 && *a.merge_threshold < 1, "--merge-threshold must lie in (0, 1)");
  if (a.prune_threshold) require(*a.prune_threshold > 0 && *a.prune_threshold <= 1, "--prune-threshold must lie in (0, 1]");
  if (a.merge_threshold && a.prune_threshold && !thresholds_consistent(*a.merge_threshold, *a.prune_threshold)) {
    std::cerr << "warning: --prune-threshold is below --merge-threshold; pruning will remove pairs merging left apart\n";
  }

  const std::filesystem::path vocab_path = a.vocab.empty() ? a.out + ".vocab.json" : a.vocab;
  ContextVocabulary vocab = std::filesystem::exists(vocab_path) ? ContextVocabulary::load(vocab_path) : ContextVocabulary{};
  auto embedder = make_embedder(spec);
  IngestResult r = ingest(a.input, *embedder, vocab, a.strict);
  for (const auto& s : r.skipped) std::cerr << a.input << ": skipped " << s.message << '\n';
  if (r.bank.empty()) {
    std::cerr << "error: no valid trace lines in " << a.input << '\n';
    return kExitData;
  }

  TraceBank bank = std::move(r.bank);
  const std::size_t ingested = bank.size();
  if (a.merge_threshold) bank = merge_centroids(bank, *a.merge_threshold);
  const std::size_t merged = bank.size();
  if (a.prune_threshold) bank = prune_redundant(bank, *a.prune_threshold);

  save_bank(a.out, bank);
  vocab.save(vocab_path);
  print_json({{"bank", a.out},
              {"vocabulary", vocab_path.string()},
              {"ingested", ingested},
              {"skipped_lines", r.skipped.size()},
              {"after_merge", merged},
              {"records", bank.size()},
              {"anomalous", bank.stats().anomalous},
              {"non_anomalous", bank.stats().non_anomalous},
              {"contexts", bank.stats().contexts()}});
  return r.skipped.empty() ? kExitOk : kExitData;
}

// ---------------------------------------------------------------------------

struct IndexArgs {
  std::string bank, out;
  std::size_t nlist = 0, nprobe = 1;
  std::uint64_t seed = 0;
};

int index_bank(const IndexArgs& a) {
  require(a.nlist > 0 && a.nprobe > 0, "--nlist and --nprobe must be >= 1");
  require(a.nprobe <= a.nlist, "--nprobe must not exceed --nlist");
  TraceBank bank = build_coarse_index(load_bank(a.bank), a.nlist, a.nprobe, a.seed);
  const std::string out = a.out.empty() ? a.bank : a.out;
  save_bank(out, bank);
  const auto& ix = *bank.coarse_index();
  std::size_t largest = 0, empty = 0;
  for (const auto& l : ix.lists) {
    largest = std::max(largest, l.size());
    empty += l.empty() ? 1 : 0;
  }
  print_json({{"bank", out}, {"records", bank.size()}, {"nlist", ix.nlist()}, {"nprobe", ix.nprobe},
              {"largest_list", largest}, {"empty_lists", empty}});
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct ScoreArgs {
  std::string bank, weights, out;
  std::vector<std::string> frames;
  std::size_t topk = kDefaultTopK;
  double tau = kDefaultTemperature;
  double epsilon = 0.0;
  std::optional<double> theta;
  std::optional<std::size_t> nprobe;
  std::string mode = "diff", aggregation = "max";
  bool per_video = false;
};

ScoreMode parse_mode(const std::string& m) {
  if (m == "additive") return ScoreMode::additive;
  if (m == "prob") return ScoreMode::prob;
  return ScoreMode::diff;
}

int score(const ScoreArgs& a) {
  ScoreConfig cfg;
  cfg.k = a.topk;
  cfg.tau = a.tau;
  cfg.epsilon = a.epsilon;
  cfg.mode = parse_mode(a.mode);
  cfg.aggregation = a.aggregation == "softmax" ? Aggregation::softmax_weighted : Aggregation::max;
  cfg.theta = a.theta.value_or(default_theta(cfg.mode));
  require(cfg.k > 0, "--topk must be >= 1");
  require(cfg.tau > 0, "--tau must be > 0");

  TraceBank bank = load_bank(a.bank);
  if (a.nprobe) {
    require(bank.coarse_index().has_value(), "--nprobe needs an indexed bank");
    bank.set_nprobe(*a.nprobe);
  }
  const FusionModel model = load_weights(a.weights);

  std::vector<std::vector<FrameScore>> videos;
  std::vector<std::vector<std::uint8_t>> labels;
  std::vector<double> latency;
  bool all_labeled = true;
  for (const auto& path : a.frames) {
    const FrameStream stream = load_frames(path);
    ScoreSeries series = stream_score(stream, model, bank, cfg);
    latency.insert(latency.end(), series.latency_ms.begin(), series.latency_ms.end());
    all_labeled = all_labeled && series.labels.has_value();
    labels.push_back(series.labels.value_or(std::vector<std::uint8_t>{}));
    videos.push_back(std::move(series.scores));
  }
  write_report(a.out, videos);

  nlohmann::json j;
  if (all_labeled) {
    EvalSummary sum = evaluate(videos, labels, cfg.theta, a.per_video);
    sum.latency = summarize_latency(latency);
    j = to_json(sum);
  } else {
    std::size_t frames = 0;
    for (const auto& v : videos) frames += v.size();
    const auto lat = summarize_latency(latency);
    j = {{"frames", frames}, {"videos", videos.size()}, {"theta", cfg.theta},
         {"latency_ms", {{"mean", lat.mean}, {"p50", lat.p50}, {"p95", lat.p95}, {"p99", lat.p99},
                         {"frames_per_second", lat.frames_per_second}}}};
  }
  j["report"] = a.out;
  print_json(j);
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string report;
  std::vector<std::string> label_frames;
  std::optional<double> theta;
  bool per_video = false;
  bool tune = false;
  std::size_t segment = 0;
};

int eval(const EvalArgs& a) {
  auto videos = read_report(a.report);
  require(videos.size() == a.label_frames.size(),
          "report holds " + std::to_string(videos.size()) + " video(s) but " + std::to_string(a.label_frames.size()) +
              " --labels-from-frames file(s) were given");
  std::vector<std::vector<std::uint8_t>> labels;
  for (const auto& path : a.label_frames) {
    const FrameStream s = load_frames(path);
    if (!s.has_labels()) fail(ErrorCode::InvalidArgument, path + " carries no labels");
    labels.push_back(s.labels());
  }

  // the report does not record the theta it was classified with
  double theta = a.theta.value_or(0.0);
  std::optional<ThresholdChoice> tuned;
  if (a.tune) {
    std::vector<double> s;
    std::vector<std::uint8_t> l;
    for (std::size_t v = 0; v < videos.size(); ++v) collect_defined(videos[v], labels[v], s, l);
    tuned = tune_threshold(s, l);
    theta = tuned->theta;
  }
  nlohmann::json j = to_json(evaluate(videos, labels, theta, a.per_video));
  if (tuned) j["tuned_f1"] = tuned->f1;
  if (a.segment > 0) {
    std::vector<double> s;
    std::vector<std::uint8_t> l;
    for (std::size_t v = 0; v < videos.size(); ++v) {
      std::vector<double> vs;
      std::vector<std::uint8_t> vl;
      collect_defined(videos[v], labels[v], vs, vl);
      const auto seg = segment_max(vs, vl, a.segment);
      s.insert(s.end(), seg.scores.begin(), seg.scores.end());
      l.insert(l.end(), seg.labels.begin(), seg.labels.end());
    }
    nlohmann::json sj{{"segment_length", a.segment}, {"segments", s.size()}};
    const auto pos = std::count(l.begin(), l.end(), 1);
    sj["auc_roc"] = pos > 0 && static_cast<std::size_t>(pos) < l.size() ? nlohmann::json(auc_roc(s, l)) : nlohmann::json(nullptr);
    sj["average_precision"] = pos > 0 ? nlohmann::json(average_precision(s, l)) : nlohmann::json(nullptr);
    j["segment_level"] = sj;
  }
  print_json(j);
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string out_frames, out_bank, weights, out_weights;
  SynthConfig cfg;
};

int gen_synth(SynthArgs a) {
  try {
    a.cfg.validate();
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  const FusionModel model = a.weights.empty() ? init_weights(a.cfg.seed, FusionShape{}) : load_weights(a.weights);
  const SynthData data = synth_generate(a.cfg, model);
  save_frames(a.out_frames, data.stream);
  save_bank(a.out_bank, data.bank);
  if (!a.out_weights.empty()) save_weights(a.out_weights, model);
  std::size_t anomalous = 0;
  for (const auto& f : data.stream.frames) anomalous += *f.label;
  print_json({{"frames", data.stream.frames.size()},
              {"anomalous_frames", anomalous},
              {"bank_records", data.bank.size()},
              {"contexts", a.cfg.n_contexts},
              {"separation", a.cfg.separation},
              {"seed", a.cfg.seed},
              {"weights", a.weights.empty() ? (a.out_weights.empty() ? nlohmann::json(nullptr) : nlohmann::json(a.out_weights))
                                            : nlohmann::json(a.weights)}});
  if (a.weights.empty() && a.out_weights.empty()) {
    std::cerr << "note: the bank was fused with init-weights seed " << a.cfg.seed
              << "; pass --out-weights to keep the matching weights file\n";
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct BenchArgs {
  std::string sizes = "1000,10000,100000", dims = "512", ks = "5";
  std::size_t queries = 100;
  std::uint64_t seed = 7;
  bool no_coarse = false;
};

int run_bench(const BenchArgs& a) {
  const auto sizes = parse_csv(a.sizes, "--bank-sizes");
  const auto dims = parse_csv(a.dims, "--dim");
  const auto ks = parse_csv(a.ks, "--topk");
  require(a.queries > 0, "--queries must be >= 1");
  BenchOptions opt;
  opt.queries = a.queries;
  opt.seed = a.seed;
  opt.coarse = !a.no_coarse;
  print_json(to_json(bench(sizes, dims, ks, opt)));
  return kExitOk;
}

// ---------------------------------------------------------------------------

int export_embeddings(const std::string& bank_path, const std::string& out_path) {
  const TraceBank bank = load_bank(bank_path);
  std::ofstream out(out_path);
  if (!out) fail(ErrorCode::IoError, "cannot write " + out_path);
  out << "id\tlabel\tcontext_id\tweight";
  for (std::size_t i = 0; i < bank.dim(); ++i) out << "\te" << i;
  out << '\n';
  char buf[32];
  for (std::size_t row = 0; row < bank.size(); ++row) {
    out << bank.id(row) << '\t' << to_string(bank.label(row)) << '\t' << bank.context_id(row) << '\t'
        << bank.weight(row);
    for (float v : bank.embedding(row)) {
      std::snprintf(buf, sizeof buf, "\t%.9g", static_cast<double>(v));
      out << buf;
    }
    out << '\n';
  }
  if (!out) fail(ErrorCode::IoError, "write failed: " + out_path);
  std::cerr << "wrote " << bank.size() << " rows x " << bank.dim() << " dims to " << out_path << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct InitArgs {
  std::string out;
  FusionShape shape;
  std::uint64_t seed = 0;
  std::string activation = "relu";
};

int init_weights_cmd(InitArgs a) {
  a.shape.activation = a.activation == "identity" ? Activation::identity : Activation::relu;
  FusionModel m;
  try {
    m = init_weights(a.seed, a.shape);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  save_weights(a.out, m);
  print_json({{"weights", a.out}, {"d", m.d()}, {"d_temp", m.d_temp()}, {"d_prime", m.d_prime()},
              {"heads", m.attn.heads}, {"head_dim", m.attn.head_dim}, {"window", m.window}, {"seed", a.seed}});
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Retrieval-augmented zero-shot anomaly scoring"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "tracectl 1.0");

  BuildBankArgs bb;
  auto* c_build = app.add_subcommand("build-bank", "Embed JSONL trace descriptions into a bank file");
  c_build->add_option("--input", bb.input, "JSONL file, one {context, label, text} object per line")->required()->check(CLI::ExistingFile);
  c_build->add_option("--out", bb.out, "Output bank file")->required();
  c_build->add_option("--dim", bb.dim, "Embedding dimension")->capture_default_str();
  c_build->add_option("--embedder", bb.embedder, "stub or http")->check(CLI::IsMember({"stub", "http"}))->capture_default_str();
  c_build->add_option("--endpoint", bb.endpoint, "Embedding service URL (http embedder)");
  c_build->add_option("--seed", bb.seed, "Stub embedder seed")->capture_default_str();
  c_build->add_option("--merge-threshold", bb.merge_threshold, "Merge same-context traces at cosine >= this");
  c_build->add_option("--prune-threshold", bb.prune_threshold, "Drop same-context near-duplicates at cosine >= this");
  c_build->add_flag("--strict", bb.strict, "Abort on the first malformed line");
  c_build->add_option("--vocab", bb.vocab, "Context vocabulary JSON (default <out>.vocab.json); reused if present");
  c_build->add_option("--timeout-ms", bb.timeout_ms, "HTTP timeout")->capture_default_str();
  c_build->add_option("--batch-size", bb.batch_size, "Texts per HTTP request")->capture_default_str();
  c_build->add_option("--max-in-flight", bb.max_in_flight, "Concurrent HTTP requests")->capture_default_str();

  IndexArgs ix;
  auto* c_index = app.add_subcommand("index", "Train an inverted-list coarse index for a bank");
  c_index->add_option("--bank", ix.bank, "Bank file")->required()->check(CLI::ExistingFile);
  c_index->add_option("--nlist", ix.nlist, "Number of lists")->required();
  c_index->add_option("--nprobe", ix.nprobe, "Lists scanned per query")->capture_default_str();
  c_index->add_option("--seed", ix.seed, "k-means seed")->capture_default_str();
  c_index->add_option("--out", ix.out, "Output bank file (default: rewrite --bank)");

  ScoreArgs sc;
  auto* c_score = app.add_subcommand("score", "Score frame streams against a bank");
  c_score->add_option("--bank", sc.bank, "Bank file")->required()->check(CLI::ExistingFile);
  c_score->add_option("--weights", sc.weights, "Fusion weights file")->required()->check(CLI::ExistingFile);
  c_score->add_option("--frames", sc.frames, "Frame file; repeat for several videos")->required()->check(CLI::ExistingFile);
  c_score->add_option("--out", sc.out, "Report file")->required();
  c_score->add_option("--topk", sc.topk, "Neighbors per subset")->capture_default_str();
  c_score->add_option("--tau", sc.tau, "Temperature")->capture_default_str();
  c_score->add_option("--theta", sc.theta, "Decision threshold (default 0, or 0.5 in prob mode)");
  c_score->add_option("--epsilon", sc.epsilon, "Bias for additive mode")->capture_default_str();
  c_score->add_option("--mode", sc.mode, "diff, additive or prob")->check(CLI::IsMember({"diff", "additive", "prob"}))->capture_default_str();
  c_score->add_option("--aggregation", sc.aggregation, "max or softmax")->check(CLI::IsMember({"max", "softmax"}))->capture_default_str();
  c_score->add_option("--nprobe", sc.nprobe, "Override the bank's nprobe");
  c_score->add_flag("--per-video", sc.per_video, "Average metrics per video instead of pooling frames");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Compute AUC-ROC, AP and F1 for a report");
  c_eval->add_option("--report", ev.report, "Report from score")->required()->check(CLI::ExistingFile);
  c_eval->add_option("--labels-from-frames", ev.label_frames, "Labeled frame file(s), one per video in report order")
      ->required()->check(CLI::ExistingFile);
  c_eval->add_option("--theta", ev.theta, "Threshold for F1 (default 0)");
  c_eval->add_flag("--tune", ev.tune, "Pick the F1-maximizing threshold");
  c_eval->add_flag("--per-video", ev.per_video, "Average metrics per video");
  c_eval->add_option("--segment", ev.segment, "Also report segment-level metrics over this many frames");

  SynthArgs sy;
  auto* c_synth = app.add_subcommand("gen-synth", "Generate a labeled synthetic frame stream and matching bank");
  c_synth->add_option("--out-frames", sy.out_frames, "Output frame file")->required();
  c_synth->add_option("--out-bank", sy.out_bank, "Output bank file")->required();
  c_synth->add_option("--n-frames", sy.cfg.n_frames)->capture_default_str();
  c_synth->add_option("--anomaly-rate", sy.cfg.anomaly_rate)->capture_default_str();
  c_synth->add_option("--separation", sy.cfg.separation, "Angle between normal and anomalous regimes (radians)")->capture_default_str();
  c_synth->add_option("--contexts", sy.cfg.n_contexts)->capture_default_str();
  c_synth->add_option("--seed", sy.cfg.seed)->capture_default_str();
  c_synth->add_option("--noise", sy.cfg.noise, "Frame noise")->capture_default_str();
  c_synth->add_option("--trace-noise", sy.cfg.trace_noise, "Trace noise")->capture_default_str();
  c_synth->add_option("--traces-per-context", sy.cfg.traces_per_context, "Traces per context and label")->capture_default_str();
  c_synth->add_option("--segment-length", sy.cfg.segment_length, "Frames per label segment")->capture_default_str();
  c_synth->add_option("--context-length", sy.cfg.context_length, "Frames between context changes")->capture_default_str();
  c_synth->add_option("--weights", sy.weights, "Fusion weights to build the bank with (default: init-weights --seed)")
      ->check(CLI::ExistingFile);
  c_synth->add_option("--out-weights", sy.out_weights, "Write the weights used");

  BenchArgs be;
  auto* c_bench = app.add_subcommand("bench", "Time exact and coarse top-k retrieval");
  c_bench->add_option("--bank-sizes", be.sizes, "Comma-separated bank sizes")->capture_default_str();
  c_bench->add_option("--dim", be.dims, "Comma-separated dims")->capture_default_str();
  c_bench->add_option("--topk", be.ks, "Comma-separated k values")->capture_default_str();
  c_bench->add_option("--queries", be.queries)->capture_default_str();
  c_bench->add_option("--seed", be.seed)->capture_default_str();
  c_bench->add_flag("--no-coarse", be.no_coarse, "Skip the coarse-index rows");

  std::string ex_bank, ex_out;
  auto* c_export = app.add_subcommand("export-embeddings", "Dump bank vectors and labels as TSV");
  c_export->add_option("--bank", ex_bank)->required()->check(CLI::ExistingFile);
  c_export->add_option("--out", ex_out)->required();

  InitArgs in;
  auto* c_init = app.add_subcommand("init-weights", "Write seeded Xavier-initialized fusion weights");
  c_init->add_option("--out", in.out)->required();
  c_init->add_option("--d", in.shape.d)->capture_default_str();
  c_init->add_option("--d-temp", in.shape.d_temp)->capture_default_str();
  c_init->add_option("--d-prime", in.shape.d_prime)->capture_default_str();
  c_init->add_option("--heads", in.shape.heads)->capture_default_str();
  c_init->add_option("--head-dim", in.shape.head_dim)->capture_default_str();
  c_init->add_option("--window", in.shape.window)->capture_default_str();
  c_init->add_option("--hidden", in.shape.hidden, "Adapter hidden width (0: d')")->capture_default_str();
  c_init->add_option("--activation", in.activation)->check(CLI::IsMember({"relu", "identity"}))->capture_default_str();
  c_init->add_option("--seed", in.seed)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*c_build) return build_bank(bb);
    if (*c_index) return index_bank(ix);
    if (*c_score) return score(sc);
    if (*c_eval) return eval(ev);
    if (*c_synth) return gen_synth(sy);
    if (*c_bench) return run_bench(be);
    if (*c_export) return export_embeddings(ex_bank, ex_out);
    if (*c_init) return init_weights_cmd(in);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ServiceError& e) {
    std::cerr << "embedding service error: " << e.what() << '\n';
    return kExitService;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}
