// Command-line front end: training, separation, evaluation, cost reports,
// gradient verification, the block-variant ablation harness, and attention
// dumps.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "galr/galr.hpp"

namespace {

using namespace galr;

HyperParams toy_hyperparams() {
  HyperParams hp;
  hp.feature_dim = 16;
  hp.window = 8;
  hp.segment_size = 16;
  hp.low_dim = 8;
  hp.hidden = 16;
  hp.heads = 4;
  hp.num_blocks = 2;
  hp.num_sources = 2;
  return hp;
}

std::string stem_of(const std::string& path) {
  return std::filesystem::path(path).stem().string();
}

int cmd_train(const RunConfig& cfg) {
  cfg.validate();
  auto train_data = gen_synthetic(cfg.seed + 100, cfg.train_examples, cfg.example_seconds,
                                  cfg.synthetic_kind(), {cfg.snr_lo, cfg.snr_hi}, 8000,
                                  cfg.hp.num_sources);
  auto val_data = gen_synthetic(cfg.seed + 200, std::max(cfg.val_examples, 1),
                                cfg.example_seconds, cfg.synthetic_kind(),
                                {cfg.snr_lo, cfg.snr_hi}, 8000, cfg.hp.num_sources);

  auto model = SeparatorModel<float>::init(cfg.hp, cfg.seed);
  TrainSettings ts;
  ts.epochs = cfg.epochs;
  ts.batch_size = cfg.batch_size;
  ts.seed = cfg.seed;
  ts.initial_lr = cfg.initial_lr;
  ts.early_stop_patience = cfg.early_stop_patience;
  ts.si_snr_opts.zero_mean = cfg.zero_mean_si_snr;
  ts.log = &std::cout;
  std::ofstream metrics;
  if (!cfg.metrics_path.empty()) {
    metrics.open(cfg.metrics_path);
    require(metrics.good(), Error::Kind::io, "cannot write metrics to " + cfg.metrics_path);
    ts.metrics_out = &metrics;
  }
  train(model, train_data, val_data, ts);
  save_checkpoint(model, cfg.model_path);
  std::cout << "saved " << cfg.model_path << "\n";
  return 0;
}

int cmd_separate(const std::string& model_path, const std::string& input,
                 const std::string& out_dir) {
  SeparatorModel<float> model = load_checkpoint(model_path);
  Waveform mix = wav_read(input);
  std::vector<Waveform> sources = separate(model, mix);
  const std::filesystem::path dir =
      out_dir.empty() ? std::filesystem::path(input).parent_path() : std::filesystem::path(out_dir);
  if (!dir.empty()) std::filesystem::create_directories(dir);
  for (std::size_t c = 0; c < sources.size(); ++c) {
    const std::string name = stem_of(input) + "_src" + std::to_string(c + 1) + ".wav";
    const std::string path = (dir / name).string();
    wav_write(path, sources[c]);
    std::cout << path << "\n";
  }
  return 0;
}

int cmd_eval(const std::string& model_path, const std::string& mix_path,
             const std::vector<std::string>& ref_paths) {
  SeparatorModel<float> model = load_checkpoint(model_path);
  Waveform mix = wav_read(mix_path);
  require(static_cast<int>(ref_paths.size()) == model.hp.num_sources, Error::Kind::usage,
          "expected " + std::to_string(model.hp.num_sources) + " reference files");
  MixtureExample ex;
  ex.mixture = mix;
  for (const auto& rp : ref_paths) {
    Waveform r = wav_read(rp);
    require(r.length() == mix.length(), Error::Kind::input,
            rp + ": reference length differs from the mixture");
    ex.sources.push_back(std::move(r));
  }
  std::vector<Waveform> est = separate(model, mix);
  std::vector<std::vector<double>> est_s;
  for (auto& e : est) est_s.push_back(e.samples);
  const double snri = si_snr_improvement(est_s, ex);
  std::printf("si_snri_db %.4f\n", snri);
  return 0;
}

int cmd_cost(const std::string& arch_str, int d, int m, int k, int q, double seconds,
             const std::string& csv_path) {
  const Arch arch = arch_from_string(arch_str);
  if (arch == Arch::dptnet) {
    // Formulas only: print the tabulated terms and the path-length class.
    const std::int64_t samples = static_cast<std::int64_t>(seconds * 8000);
    const std::int64_t frames = frame_count(samples, m);
    ComplexityDims dims{d, 128, k, q, segment_count(frames, k)};
    auto terms = complexity_terms(arch, dims);
    std::cout << "arch dptnet (complexity terms only; not runnable)\n";
    for (auto& t : terms.local) std::cout << "  local  " << t.expr << " = " << t.value << "\n";
    for (auto& t : terms.global) std::cout << "  global " << t.expr << " = " << t.value << "\n";
    std::cout << "  mpl " << terms.mpl_class << "\n";
    return 0;
  }
  HyperParams hp = table_config(arch, d, m, k, q);
  CostReport rep = flops_estimate(hp, seconds);
  std::cout << "arch " << arch_str << "\n" << rep.to_text();
  ComplexityDims dims{d, hp.hidden, k, q, rep.segments};
  auto terms = complexity_terms(arch, dims);
  for (auto& t : terms.local) std::cout << "  term local  " << t.expr << " = " << t.value << "\n";
  for (auto& t : terms.global) std::cout << "  term global " << t.expr << " = " << t.value << "\n";
  if (!csv_path.empty()) {
    std::ofstream f(csv_path);
    require(f.good(), Error::Kind::io, "cannot write " + csv_path);
    f << rep.csv_header() << "\n" << rep.to_csv_row(arch_str) << "\n";
    std::cout << "wrote " << csv_path << "\n";
  }
  return 0;
}

int cmd_gradcheck() {
  auto results = run_gradient_suite();
  int failures = 0;
  double worst = 0.0;
  for (const auto& e : results) {
    std::printf("%-28s max_rel_err %.3e (tolerance %.0e) %s\n", e.name.c_str(), e.max_rel_err,
                e.tolerance, e.passed() ? "ok" : "FAIL");
    worst = std::max(worst, e.max_rel_err);
    if (!e.passed()) ++failures;
  }
  std::printf("worst %.3e over %zu checks, %d failures\n", worst, results.size(), failures);
  return failures == 0 ? 0 : 1;
}

int cmd_ablate(bool toy, std::uint64_t seed, int epochs, int examples) {
  require(toy, Error::Kind::usage, "only --toy scale is supported");
  struct VariantRow {
    LayerKind local;
    LayerKind global;
  };
  const VariantRow rows[] = {
      {LayerKind::recurrent, LayerKind::recurrent},
      {LayerKind::recurrent, LayerKind::attentive},
      {LayerKind::attentive, LayerKind::recurrent},
      {LayerKind::attentive, LayerKind::attentive},
  };
  HyperParams base;
  base.feature_dim = 8;
  base.window = 8;
  base.segment_size = 8;
  base.low_dim = 0;
  base.hidden = 8;
  base.heads = 2;
  base.num_blocks = 1;
  base.num_sources = 2;
  base.variant.use_lowdim = false;

  auto train_data = gen_synthetic(seed + 1, examples, 0.5, SyntheticKind::disjoint_band_noise);
  auto val_data = gen_synthetic(seed + 2, 3, 0.5, SyntheticKind::disjoint_band_noise);
  auto held_out = gen_synthetic(seed + 3, 3, 0.5, SyntheticKind::disjoint_band_noise);

  for (const auto& row : rows) {
    HyperParams hp = base;
    hp.variant.local = row.local;
    hp.variant.global = row.global;
    auto model = SeparatorModel<float>::init(hp, seed);
    TrainSettings ts;
    ts.epochs = epochs;
    ts.batch_size = 4;
    ts.seed = seed;
    train(model, train_data, val_data, ts);
    auto [loss, snri] = evaluate(model, held_out);
    std::printf("variant local=%s global=%s si_snri_db %.3f\n", layer_kind_name(row.local),
                layer_kind_name(row.global), snri);
    std::fflush(stdout);
  }
  return 0;
}

int cmd_attn_dump(const std::string& model_path, const std::string& input, int block, int head,
                  const std::string& out_path) {
  SeparatorModel<float> model = load_checkpoint(model_path);
  require(model.hp.variant.global == LayerKind::attentive ||
              model.hp.variant.local == LayerKind::attentive,
          Error::Kind::usage, "the model has no attention layers to dump");
  require(block >= 0 && block < model.hp.num_blocks, Error::Kind::usage,
          "block index out of range (model has " + std::to_string(model.hp.num_blocks) +
              " blocks)");
  require(head >= -1 && head < model.hp.heads, Error::Kind::usage,
          "head index out of range (model has " + std::to_string(model.hp.heads) + " heads)");
  Waveform mix = wav_read(input);

  NoGradGuard ng;
  AttentionCapture<float> capture;
  capture.block = block;
  capture.head = head;
  ForwardContext<float> ctx;
  ctx.capture = &capture;
  forward_sources(model, mix, ctx);
  require(!capture.records.empty(), Error::Kind::usage, "no attention matrices recorded");

  std::ofstream f(out_path);
  require(f.good(), Error::Kind::io, "cannot write " + out_path);
  f << "block,head,sequence,target";
  const std::int64_t t_len = capture.records.front().shape[1];
  for (std::int64_t j = 0; j < t_len; ++j) f << ",w" << j;
  f << "\n";
  for (const auto& rec : capture.records) {
    const std::int64_t b = rec.shape[0], t = rec.shape[1];
    for (std::int64_t bi = 0; bi < b; ++bi)
      for (std::int64_t ti = 0; ti < t; ++ti) {
        f << rec.block << "," << rec.head << "," << bi << "," << ti;
        for (std::int64_t tj = 0; tj < t; ++tj)
          f << "," << rec.weights[static_cast<std::size_t>((bi * t + ti) * t + tj)];
        f << "\n";
      }
  }
  std::cout << "wrote " << out_path << " (" << capture.records.size() << " head matrices)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GALR time-domain source separation"};
  app.require_subcommand(1);

  // train
  auto* train_cmd = app.add_subcommand("train", "train a model on synthetic mixtures");
  std::string config_path;
  RunConfig run;
  std::uint64_t seed_flag = run.seed;
  train_cmd->add_option("--config", config_path, "JSON run config");
  train_cmd->add_option("--epochs", run.epochs, "training epochs");
  train_cmd->add_option("--batch", run.batch_size, "batch size");
  train_cmd->add_option("--seed", seed_flag, "RNG seed");
  train_cmd->add_option("--lr", run.initial_lr, "initial learning rate");
  train_cmd->add_option("--examples", run.train_examples, "training examples");
  train_cmd->add_option("--val-examples", run.val_examples, "validation examples");
  train_cmd->add_option("--seconds", run.example_seconds, "example length in seconds");
  train_cmd->add_option("--data", run.data_kind, "disjoint_band_noise | sinusoid_pair");
  train_cmd->add_option("--out", run.model_path, "checkpoint output path");
  train_cmd->add_option("--metrics", run.metrics_path, "metrics JSONL output path");
  bool toy = false;
  train_cmd->add_flag("--toy", toy, "use the toy architecture (D=16 M=8 K=16 Q=8 H=16 J=4 N=2)");
  train_cmd->add_option("--D", run.hp.feature_dim, "feature dim");
  train_cmd->add_option("--M", run.hp.window, "window samples");
  train_cmd->add_option("--K", run.hp.segment_size, "segment size");
  train_cmd->add_option("--Q", run.hp.low_dim, "low dim (0 disables)");
  train_cmd->add_option("--H", run.hp.hidden, "LSTM hidden units");
  train_cmd->add_option("--J", run.hp.heads, "attention heads");
  train_cmd->add_option("--N", run.hp.num_blocks, "block count");
  train_cmd->add_option("--C", run.hp.num_sources, "source count");

  // separate
  auto* sep_cmd = app.add_subcommand("separate", "separate a WAV into C source WAVs");
  std::string model_path, input_path, out_dir;
  sep_cmd->add_option("--model", model_path, "checkpoint path")->required();
  sep_cmd->add_option("--input", input_path, "input WAV (PCM16 mono 8 kHz)")->required();
  sep_cmd->add_option("--out-dir", out_dir, "output directory (default: next to the input)");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "SI-SNR improvement against references");
  std::string eval_model, eval_mix;
  std::vector<std::string> eval_refs;
  eval_cmd->add_option("--model", eval_model, "checkpoint path")->required();
  eval_cmd->add_option("--mix", eval_mix, "mixture WAV")->required();
  eval_cmd->add_option("--refs", eval_refs, "reference WAVs, one per source")->required();

  // cost
  auto* cost_cmd = app.add_subcommand("cost", "analytic cost report");
  std::string arch = "galr";
  int cd = 64, cm = 16, ck = 100, cq = 32;
  double seconds = 1.0;
  std::string csv_path;
  cost_cmd->add_option("--arch", arch, "galr | dprnn | dptnet");
  cost_cmd->add_option("--D", cd, "feature dim");
  cost_cmd->add_option("--M", cm, "window samples");
  cost_cmd->add_option("--K", ck, "segment size");
  cost_cmd->add_option("--Q", cq, "low dim (galr only; 0 disables)");
  cost_cmd->add_option("--seconds", seconds, "input length in seconds");
  cost_cmd->add_option("--csv", csv_path, "also write a CSV row");

  // gradcheck
  app.add_subcommand("gradcheck", "run the finite-difference gradient suite");

  // ablate
  auto* ablate_cmd = app.add_subcommand("ablate", "train the four local/global variants");
  bool ablate_toy = false;
  std::uint64_t ablate_seed = 7;
  int ablate_epochs = 6, ablate_examples = 8;
  ablate_cmd->add_flag("--toy", ablate_toy, "toy scale (required)");
  ablate_cmd->add_option("--seed", ablate_seed, "RNG seed");
  ablate_cmd->add_option("--epochs", ablate_epochs, "epochs per variant");
  ablate_cmd->add_option("--examples", ablate_examples, "training examples");

  // attn-dump
  auto* attn_cmd = app.add_subcommand("attn-dump", "write head softmax matrices as CSV");
  std::string attn_model, attn_input, attn_out = "attention.csv";
  int attn_block = 0, attn_head = -1;
  attn_cmd->add_option("--model", attn_model, "checkpoint path")->required();
  attn_cmd->add_option("--input", attn_input, "input WAV")->required();
  attn_cmd->add_option("--block", attn_block, "block index");
  attn_cmd->add_option("--head", attn_head, "head index (-1: all heads)");
  attn_cmd->add_option("--out", attn_out, "CSV output path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand("train")) {
      if (!config_path.empty()) {
        // Precedence: config file first, explicit flags override.
        RunConfig merged = load_run_config(config_path);
        if (train_cmd->count("--epochs")) merged.epochs = run.epochs;
        if (train_cmd->count("--batch")) merged.batch_size = run.batch_size;
        if (train_cmd->count("--seed")) merged.seed = seed_flag;
        if (train_cmd->count("--lr")) merged.initial_lr = run.initial_lr;
        if (train_cmd->count("--examples")) merged.train_examples = run.train_examples;
        if (train_cmd->count("--val-examples")) merged.val_examples = run.val_examples;
        if (train_cmd->count("--seconds")) merged.example_seconds = run.example_seconds;
        if (train_cmd->count("--data")) merged.data_kind = run.data_kind;
        if (train_cmd->count("--out")) merged.model_path = run.model_path;
        if (train_cmd->count("--metrics")) merged.metrics_path = run.metrics_path;
        run = merged;
      } else {
        run.seed = seed_flag;
      }
      if (toy) {
        HyperParams hp = toy_hyperparams();
        hp.num_sources = run.hp.num_sources;
        run.hp = hp;
      }
      return cmd_train(run);
    }
    if (app.got_subcommand("separate")) return cmd_separate(model_path, input_path, out_dir);
    if (app.got_subcommand("eval")) return cmd_eval(eval_model, eval_mix, eval_refs);
    if (app.got_subcommand("cost")) return cmd_cost(arch, cd, cm, ck, cq, seconds, csv_path);
    if (app.got_subcommand("gradcheck")) return cmd_gradcheck();
    if (app.got_subcommand("ablate"))
      return cmd_ablate(ablate_toy, ablate_seed, ablate_epochs, ablate_examples);
    if (app.got_subcommand("attn-dump"))
      return cmd_attn_dump(attn_model, attn_input, attn_block, attn_head, attn_out);
  } catch (const galr::Error& e) {
    std::cerr << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error[internal]: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
