#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "galr/cost_model.hpp"
#include "galr/training.hpp"

namespace galr {

inline LayerKind layer_kind_from_string(const std::string& s) {
  if (s == "recurrent") return LayerKind::recurrent;
  if (s == "attentive") return LayerKind::attentive;
  throw Error(Error::Kind::config, "unknown layer kind '" + s + "'");
}

inline nlohmann::json hyperparams_to_json(const HyperParams& hp) {
  return nlohmann::json{
      {"feature_dim", hp.feature_dim},
      {"window", hp.window},
      {"segment_size", hp.segment_size},
      {"low_dim", hp.low_dim},
      {"hidden", hp.hidden},
      {"heads", hp.heads},
      {"num_blocks", hp.num_blocks},
      {"num_sources", hp.num_sources},
      {"local", layer_kind_name(hp.variant.local)},
      {"global", layer_kind_name(hp.variant.global)},
      {"use_lowdim", hp.variant.use_lowdim},
      {"dropout", hp.dropout},
  };
}

inline HyperParams hyperparams_from_json(const nlohmann::json& j) {
  HyperParams hp;
  try {
    hp.feature_dim = j.at("feature_dim").get<int>();
    hp.window = j.at("window").get<int>();
    hp.segment_size = j.at("segment_size").get<int>();
    hp.low_dim = j.at("low_dim").get<int>();
    hp.hidden = j.at("hidden").get<int>();
    hp.heads = j.at("heads").get<int>();
    hp.num_blocks = j.at("num_blocks").get<int>();
    hp.num_sources = j.at("num_sources").get<int>();
    hp.variant.local = layer_kind_from_string(j.at("local").get<std::string>());
    hp.variant.global = layer_kind_from_string(j.at("global").get<std::string>());
    hp.variant.use_lowdim = j.at("use_lowdim").get<bool>();
    hp.dropout = j.at("dropout").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Error::Kind::config, std::string("bad hyperparameter block: ") + e.what());
  }
  hp.validate();
  return hp;
}

/// Everything one run needs. Defaults follow the lightest full-size
/// configuration (D=64, M=16, K=100, Q=32, H=128, J=8, N=6, C=2). Explicit
/// flags and config fields are the only configuration channel.
struct RunConfig {
  HyperParams hp;

  // training
  int epochs = 50;
  int batch_size = 4;
  std::uint64_t seed = 0;
  double initial_lr = 1e-3;
  int early_stop_patience = 10;
  bool zero_mean_si_snr = false;

  // data
  std::string data_kind = "disjoint_band_noise";
  int train_examples = 24;
  int val_examples = 6;
  double example_seconds = 1.0;
  double snr_lo = 0.0;
  double snr_hi = 5.0;

  // paths
  std::string model_path = "galr.ckpt";
  std::string metrics_path;

  SyntheticKind synthetic_kind() const {
    if (data_kind == "disjoint_band_noise") return SyntheticKind::disjoint_band_noise;
    if (data_kind == "sinusoid_pair") return SyntheticKind::sinusoid_pair;
    throw Error(Error::Kind::config, "unknown data kind '" + data_kind + "'");
  }

  void validate() const {
    hp.validate();
    require(epochs >= 1 && batch_size >= 1, Error::Kind::config,
            "epochs and batch size must be positive");
    require(train_examples >= 1 && val_examples >= 0, Error::Kind::config,
            "example counts must be sane");
    require(example_seconds > 0, Error::Kind::config, "example length must be positive");
    require(snr_lo <= snr_hi, Error::Kind::config, "snr range inverted");
    require(early_stop_patience >= 1, Error::Kind::config, "patience must be >= 1");
    (void)synthetic_kind();
  }
};

inline nlohmann::json run_config_to_json(const RunConfig& c) {
  return nlohmann::json{
      {"hyperparams", hyperparams_to_json(c.hp)},
      {"training",
       {{"epochs", c.epochs},
        {"batch_size", c.batch_size},
        {"seed", c.seed},
        {"initial_lr", c.initial_lr},
        {"early_stop_patience", c.early_stop_patience},
        {"zero_mean_si_snr", c.zero_mean_si_snr}}},
      {"data",
       {{"kind", c.data_kind},
        {"train_examples", c.train_examples},
        {"val_examples", c.val_examples},
        {"example_seconds", c.example_seconds},
        {"snr_lo", c.snr_lo},
        {"snr_hi", c.snr_hi}}},
      {"paths", {{"model", c.model_path}, {"metrics", c.metrics_path}}},
  };
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  try {
    if (j.contains("hyperparams")) c.hp = hyperparams_from_json(j.at("hyperparams"));
    if (j.contains("training")) {
      const auto& t = j.at("training");
      if (t.contains("epochs")) c.epochs = t.at("epochs").get<int>();
      if (t.contains("batch_size")) c.batch_size = t.at("batch_size").get<int>();
      if (t.contains("seed")) c.seed = t.at("seed").get<std::uint64_t>();
      if (t.contains("initial_lr")) c.initial_lr = t.at("initial_lr").get<double>();
      if (t.contains("early_stop_patience"))
        c.early_stop_patience = t.at("early_stop_patience").get<int>();
      if (t.contains("zero_mean_si_snr"))
        c.zero_mean_si_snr = t.at("zero_mean_si_snr").get<bool>();
    }
    if (j.contains("data")) {
      const auto& d = j.at("data");
      if (d.contains("kind")) c.data_kind = d.at("kind").get<std::string>();
      if (d.contains("train_examples")) c.train_examples = d.at("train_examples").get<int>();
      if (d.contains("val_examples")) c.val_examples = d.at("val_examples").get<int>();
      if (d.contains("example_seconds"))
        c.example_seconds = d.at("example_seconds").get<double>();
      if (d.contains("snr_lo")) c.snr_lo = d.at("snr_lo").get<double>();
      if (d.contains("snr_hi")) c.snr_hi = d.at("snr_hi").get<double>();
    }
    if (j.contains("paths")) {
      const auto& p = j.at("paths");
      if (p.contains("model")) c.model_path = p.at("model").get<std::string>();
      if (p.contains("metrics")) c.metrics_path = p.at("metrics").get<std::string>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(Error::Kind::config, std::string("bad run config: ") + e.what());
  }
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), Error::Kind::io, "cannot open config " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Error::Kind::config, path + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace galr
