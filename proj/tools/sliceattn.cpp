// sliceattn command-line tool: generate, train, eval, gradcheck,
// dump-attention.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sliceattn.hpp"

namespace fs = std::filesystem;
using namespace sliceattn;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kIo = 2, kNumeric = 3 };

constexpr const char* kPipelineConfigFile = "pipeline.cfg";
constexpr const char* kTrainConfigFile = "train.cfg";
constexpr const char* kModelFile = "model.satn";

std::string checkpoint_name(std::size_t epoch) {
  return "ckpt_epoch_" + std::to_string(epoch) + ".satn";
}

// SLICEATTN_THREADS caps the number of worker threads.
std::size_t capped_threads(std::size_t requested) {
  const char* env = std::getenv("SLICEATTN_THREADS");
  if (env == nullptr || *env == '\0') return requested;
  char* end = nullptr;
  const unsigned long cap = std::strtoul(env, &end, 10);
  if (*end != '\0' || cap == 0) throw InputError("SLICEATTN_THREADS must be a positive integer");
  return std::min<std::size_t>(requested, cap);
}

void set_attention(PipelineConfig& config, const std::string& mode) {
  config.attention.enable_contextual = mode == "contextual" || mode == "both";
  config.attention.enable_spatial = mode == "spatial" || mode == "both";
}

// Explicit file, else pipeline.cfg next to the checkpoint, else defaults
// with the attention modules present in the checkpoint.
PipelineConfig resolve_pipeline_config(const std::string& explicit_path, const fs::path& checkpoint,
                                       const ParamStore& params) {
  if (!explicit_path.empty()) return load_pipeline_config(explicit_path);
  const fs::path beside = checkpoint.parent_path() / kPipelineConfigFile;
  if (fs::exists(beside)) return load_pipeline_config(beside);
  PipelineConfig config;
  config.attention.enable_contextual = params.contains(kContextualWeights);
  config.attention.enable_spatial = params.contains(kSpatialWeights);
  return config;
}

void print_report_line(const std::string& name, const EvalReport& rep) {
  std::printf("%-18s lesions=%-4zu", name.c_str(), rep.lesions);
  for (std::size_t i = 0; i < rep.fp_rates.size(); ++i) {
    std::printf("  @%g: %.3f", rep.fp_rates[i], rep.sensitivity_at[i]);
  }
  std::printf("\n");
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
  std::string spec_path;
  std::size_t count = 0;
  std::optional<std::uint64_t> seed;
  std::size_t first_index = 0;
  std::string out;
};

int cmd_generate(const GenerateArgs& a) {
  PhantomSpec spec = a.spec_path.empty() ? PhantomSpec{} : load_phantom_spec(a.spec_path);
  if (a.seed) spec.seed = *a.seed;
  if (a.count == 0) throw InputError("--count must be >= 1");
  spec.validate();
  const std::vector<Sample> samples = generate(spec, a.count, a.first_index);
  save_dataset(a.out, samples);

  RunManifest m;
  m.command = "generate";
  m.config["phantom"] = config_snapshot(spec);
  m.seeds["phantom"] = spec.seed;
  m.inputs["count"] = std::to_string(a.count);
  m.inputs["first_index"] = std::to_string(a.first_index);
  for (const Sample& s : samples) m.artifacts.push_back(s.deck.volume_id + ".svol");
  m.artifacts.push_back(kAnnotationFile);
  write_manifest(a.out, m);

  std::printf("wrote %zu volumes to %s\n", samples.size(), a.out.c_str());
  for (auto criterion : {StratifyBy::diameter, StratifyBy::slice_interval}) {
    const char* prefix = criterion == StratifyBy::diameter ? "diameter" : "interval";
    for (const auto& [bin, idx] : stratify(samples, criterion)) {
      std::printf("stratum %s:%s samples=%zu\n", prefix, bin.c_str(), idx.size());
    }
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::string pipeline_config;
  std::string train_config;
  std::string out;
  std::string attention = "both";
  std::optional<std::size_t> epochs;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
};

int cmd_train(const TrainArgs& a) {
  PipelineConfig pipeline =
      a.pipeline_config.empty() ? PipelineConfig{} : load_pipeline_config(a.pipeline_config);
  set_attention(pipeline, a.attention);
  TrainConfig tc = a.train_config.empty() ? TrainConfig{} : load_train_config(a.train_config);
  if (a.epochs) tc.epochs = *a.epochs;
  if (a.lr) tc.lr = *a.lr;
  if (a.seed) tc.seed = *a.seed;
  if (a.threads) tc.threads = *a.threads;
  tc.threads = capped_threads(tc.threads);
  pipeline.validate();
  tc.validate();

  const std::vector<Sample> samples = load_dataset(a.data, pipeline.M);
  const fs::path out(a.out);
  io::ensure_directory(out);
  io::write_file(out / kPipelineConfigFile, dump_config(pipeline));
  io::write_file(out / kTrainConfigFile, dump_config(tc));

  ParamStore params = init_params(pipeline, tc.init_seed);
  std::vector<LossLogRow> log;
  std::vector<std::string> artifacts{kPipelineConfigFile, kTrainConfigFile};
  TrainHooks hooks;
  hooks.on_step = [&](const LossLogRow& row) { log.push_back(row); };
  hooks.on_epoch_end = [&](std::size_t epoch, const ParamStore& p) {
    save_checkpoint(out / checkpoint_name(epoch), p);
    artifacts.push_back(checkpoint_name(epoch));
    double total = 0.0;
    std::size_t n = 0;
    for (const LossLogRow& r : log) {
      if (r.epoch == epoch) {
        total += r.loss_total;
        ++n;
      }
    }
    std::printf("epoch %zu lr %g mean loss %.6f\n", epoch, tc.lr_at_epoch(epoch),
                n ? total / static_cast<double>(n) : 0.0);
    std::fflush(stdout);
  };
  try {
    train(params, samples, pipeline, tc, hooks);
  } catch (const NumericError&) {
    io::write_file(out / "loss_log.csv", loss_log_csv(log));
    throw;
  }
  save_checkpoint(out / kModelFile, params);
  io::write_file(out / "loss_log.csv", loss_log_csv(log));
  artifacts.push_back(kModelFile);
  artifacts.push_back("loss_log.csv");

  RunManifest m;
  m.command = "train";
  m.config["pipeline"] = config_snapshot(pipeline);
  m.config["train"] = config_snapshot(tc);
  m.seeds["train"] = tc.seed;
  m.seeds["init"] = tc.init_seed;
  m.inputs["data"] = a.data;
  m.inputs["attention"] = a.attention;
  m.artifacts = artifacts;
  write_manifest(out, m);
  std::printf("wrote %s\n", (out / kModelFile).string().c_str());
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
  std::string pipeline_config;
  bool oracle = false;
};

std::string detections_csv(const std::vector<ImageResult>& results) {
  std::string s = "image_id,score,x1,y1,x2,y2\n";
  for (const ImageResult& r : results) {
    for (const Detection& d : r.detections) {
      s += r.image_id + ',' + detail::format_value(d.score) + ',' + detail::format_value(d.box.x1) +
           ',' + detail::format_value(d.box.y1) + ',' + detail::format_value(d.box.x2) + ',' +
           detail::format_value(d.box.y2) + '\n';
    }
  }
  return s;
}

int cmd_eval(const EvalArgs& a) {
  if (!a.oracle && a.checkpoint.empty()) throw InputError("--checkpoint is required unless --oracle");
  RunManifest m;
  m.command = "eval";
  m.inputs["data"] = a.data;
  std::vector<Sample> samples;
  std::vector<ImageResult> results;
  if (a.oracle) {
    const PipelineConfig config =
        a.pipeline_config.empty() ? PipelineConfig{} : load_pipeline_config(a.pipeline_config);
    samples = load_dataset(a.data, config.M);
    results = oracle_detections(samples);
    m.inputs["detector"] = "oracle";
  } else {
    ParamStore params = load_checkpoint(a.checkpoint);
    const PipelineConfig config = resolve_pipeline_config(a.pipeline_config, a.checkpoint, params);
    samples = load_dataset(a.data, config.M);
    results = detect_all(params, config, samples);
    m.config["pipeline"] = config_snapshot(config);
    m.inputs["checkpoint"] = a.checkpoint;
  }
  const EvalReport rep = evaluate_with_strata(results, samples);
  const fs::path out(a.out);
  io::ensure_directory(out);
  io::write_file(out / "report.csv", report_csv(rep));
  io::write_file(out / "froc.csv", froc_csv(rep));
  io::write_file(out / "detections.csv", detections_csv(results));
  m.artifacts = {"report.csv", "froc.csv", "detections.csv"};
  write_manifest(out, m);

  std::printf("images=%zu\n", rep.images);
  print_report_line("all", rep);
  for (const auto& [name, sub] : rep.strata) print_report_line(name, sub);
  return kOk;
}

// ---------------------------------------------------------------------------

struct GradcheckArgs {
  std::string module = "attention";
  std::uint64_t seed = 0;
  bool inject_sign_flip = false;
  std::string out;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  const GradCheckReport rep = a.module == "attention"
                                  ? attention_gradcheck(a.seed, a.inject_sign_flip)
                                  : pipeline_gradcheck(a.seed, a.inject_sign_flip);
  std::string table = "tensor,coords,kinks,rel_error,status\n";
  std::printf("%-28s %7s %6s %12s  %s\n", "tensor", "coords", "kinks", "rel_error", "status");
  for (const GradCheckEntry& e : rep.entries) {
    const char* status = e.rel_error < rep.tolerance && e.kinks == 0 ? "pass" : "FAIL";
    std::printf("%-28s %7zu %6zu %12.3e  %s\n", e.name.c_str(), e.coords, e.kinks, e.rel_error,
                status);
    table += e.name + ',' + std::to_string(e.coords) + ',' + std::to_string(e.kinks) + ',' +
             detail::format_value(e.rel_error) + ',' + status + '\n';
  }
  if (rep.attempts > 1) {
    std::printf("evaluation point %zu of %zu (earlier points had a kink within the step)\n",
                rep.attempts, kPipelineGradMaxAttempts);
  }
  std::printf("max relative error %.3e (tolerance %.0e): %s\n", rep.max_error(), rep.tolerance,
              rep.passed() ? "PASS" : "FAIL");
  if (!a.out.empty()) {
    io::ensure_directory(a.out);
    io::write_file(fs::path(a.out) / "gradcheck.csv", table);
    RunManifest m;
    m.command = "gradcheck";
    m.seeds["gradcheck"] = a.seed;
    m.inputs["module"] = a.module;
    m.inputs["inject_sign_flip"] = a.inject_sign_flip ? "true" : "false";
    m.artifacts = {"gradcheck.csv"};
    write_manifest(a.out, m);
  }
  if (!rep.passed()) {
    std::fprintf(stderr, "error: gradient check failed, max relative error %.3e\n",
                 rep.max_error());
    return kNumeric;
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct DumpArgs {
  std::string checkpoint;
  std::string volume;
  std::size_t key_slice = 0;
  std::string out;
  std::string pipeline_config;
  std::optional<std::size_t> channel;
};

int cmd_dump_attention(const DumpArgs& a) {
  ParamStore params = load_checkpoint(a.checkpoint);
  const PipelineConfig config = resolve_pipeline_config(a.pipeline_config, a.checkpoint, params);
  const Volume vol = load_volume(a.volume);
  const SliceDeck deck = extract_deck(vol.slices, a.key_slice, config.M, vol.slice_interval_mm,
                                      fs::path(a.volume).stem().string());
  const InferenceResult r = run_detector(params, config, deck);
  const fs::path out(a.out);
  io::ensure_directory(out);
  RunManifest m;
  m.command = "dump-attention";
  m.config["pipeline"] = config_snapshot(config);
  m.inputs["checkpoint"] = a.checkpoint;
  m.inputs["volume"] = a.volume;
  m.inputs["key_slice"] = std::to_string(a.key_slice);
  if (a.channel) m.inputs["channel"] = std::to_string(*a.channel);
  for (std::size_t f = 0; f < r.attention_fields.size(); ++f) {
    const Tensor& field = r.attention_fields[f];
    if (r.attention_kinds[f] == AttentionKind::contextual) {
      io::write_file(out / "contextual.csv", contextual_csv(field, a.channel));
      m.artifacts.push_back("contextual.csv");
    } else {
      for (std::size_t i = 0; i < field.dim(0); ++i) {
        const std::string name = "spatial_image" + std::to_string(i) + ".pgm";
        io::write_file(out / name, spatial_pgm(field, i, a.channel));
        m.artifacts.push_back(name);
      }
    }
  }
  if (r.attention_fields.empty()) {
    std::printf("no attention modules enabled; nothing to dump\n");
  }
  write_manifest(out, m);
  for (const std::string& f : m.artifacts) std::printf("wrote %s\n", (out / f).string().c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Slice attention lesion detector on synthetic CT phantoms"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Write synthetic phantom volumes and annotations");
  g->add_option("--spec", gen.spec_path, "Phantom spec file (key = value)")->check(CLI::ExistingFile);
  g->add_option("--count", gen.count, "Number of volumes")->required();
  g->add_option("--seed", gen.seed, "Override the spec seed");
  g->add_option("--first-index", gen.first_index, "Index of the first volume");
  g->add_option("--out", gen.out, "Output directory")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train the detector");
  t->add_option("--data", tr.data, "Training data directory")->required();
  t->add_option("--pipeline-config", tr.pipeline_config, "Pipeline config file")
      ->check(CLI::ExistingFile);
  t->add_option("--train-config", tr.train_config, "Training config file")
      ->check(CLI::ExistingFile);
  t->add_option("--out", tr.out, "Output directory")->required();
  t->add_option("--attention", tr.attention, "Attention modules")
      ->check(CLI::IsMember({"none", "contextual", "spatial", "both"}));
  t->add_option("--epochs", tr.epochs, "Override epochs");
  t->add_option("--lr", tr.lr, "Override base learning rate");
  t->add_option("--seed", tr.seed, "Override the shuffle/sampling seed");
  t->add_option("--threads", tr.threads, "Worker threads for per-sample gradients");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a data directory");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file");
  e->add_option("--data", ev.data, "Test data directory")->required();
  e->add_option("--out", ev.out, "Output directory")->required();
  e->add_option("--pipeline-config", ev.pipeline_config, "Pipeline config file")
      ->check(CLI::ExistingFile);
  e->add_flag("--oracle", ev.oracle, "Score ground truth echoed as detections");

  GradcheckArgs gc;
  auto* c = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  c->add_option("--module", gc.module, "Module to check")
      ->check(CLI::IsMember({"attention", "pipeline"}));
  c->add_option("--seed", gc.seed, "Random seed");
  c->add_flag("--inject-sign-flip", gc.inject_sign_flip,
              "Negate the analytic gradients (the check must fail)");
  c->add_option("--out", gc.out, "Optional output directory for the table");

  DumpArgs du;
  auto* d = app.add_subcommand("dump-attention", "Write attention fields for one volume");
  d->add_option("--checkpoint", du.checkpoint, "Checkpoint file")->required();
  d->add_option("--volume", du.volume, "SVOL volume")->required();
  d->add_option("--key-slice", du.key_slice, "Key slice index")->required();
  d->add_option("--out", du.out, "Output directory")->required();
  d->add_option("--pipeline-config", du.pipeline_config, "Pipeline config file")
      ->check(CLI::ExistingFile);
  d->add_option("--channel", du.channel, "Feature channel (default: channel mean)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    std::fprintf(stderr, "error: %s\n", ex.what());
    return kUsage;
  }

  try {
    if (*g) return cmd_generate(gen);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(ev);
    if (*c) return cmd_gradcheck(gc);
    if (*d) return cmd_dump_attention(du);
  } catch (const IoError& ex) {
    std::fprintf(stderr, "error: %s\n", ex.what());
    return kIo;
  } catch (const fs::filesystem_error& ex) {
    std::fprintf(stderr, "error: %s\n", ex.what());
    return kIo;
  } catch (const NumericError& ex) {
    std::fprintf(stderr, "error: %s\n", ex.what());
    return kNumeric;
  } catch (const Error& ex) {
    std::fprintf(stderr, "error: %s\n", ex.what());
    return kUsage;
  } catch (const std::exception& ex) {
    std::fprintf(stderr, "error: %s\n", ex.what());
    return kUsage;
  }
  return kUsage;
}
