#pragma once

#include "core.hpp"
#include "data.hpp"
#include "denoiser.hpp"
#include "preprocessor.hpp"

#include <json.hpp>

#include <fstream>
#include <memory>
#include <optional>

namespace tmd {

inline nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (int i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
  require(j.is_array() && !j.empty(), "malformed matrix in checkpoint");
  int rows = static_cast<int>(j.size());
  int cols = static_cast<int>(j[0].size());
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    require(static_cast<int>(j[i].size()) == cols, "ragged matrix in checkpoint");
    for (int c = 0; c < cols; ++c) m(i, c) = j[i][c].get<double>();
  }
  return m;
}

inline nlohmann::json params_to_json(const ParamStore& ps) {
  nlohmann::json out;
  out["adam_t"] = ps.adam_t;
  for (size_t i = 0; i < ps.w.size(); ++i) {
    out["w"][ps.names[i]] = matrix_to_json(ps.w[i]);
    out["m"][ps.names[i]] = matrix_to_json(ps.m[i]);
    out["v"][ps.names[i]] = matrix_to_json(ps.v[i]);
  }
  return out;
}

inline void params_from_json(const nlohmann::json& j, ParamStore& ps) {
  ps.adam_t = j.at("adam_t").get<long>();
  for (size_t i = 0; i < ps.w.size(); ++i) {
    const std::string& n = ps.names[i];
    Matrix w = matrix_from_json(j.at("w").at(n));
    require(w.rows() == ps.w[i].rows() && w.cols() == ps.w[i].cols(),
            "checkpoint parameter shape mismatch: " + n);
    ps.w[i] = std::move(w);
    ps.m[i] = matrix_from_json(j.at("m").at(n));
    ps.v[i] = matrix_from_json(j.at("v").at(n));
  }
}

struct Checkpoint {
  DenoiserConfig config;
  std::unique_ptr<TransformerDenoiser> denoiser;
  std::unique_ptr<Preprocessor> preprocessor;
  NormalizationParams norm;
  std::string schedule_type = "cosine";
};

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  nlohmann::json j;
  j["format"] = "tm-diffuse-checkpoint";
  j["version"] = 1;
  j["config"] = {{"model_dim", ck.config.model_dim},
                 {"heads", ck.config.heads},
                 {"encoder_blocks", ck.config.encoder_blocks},
                 {"decoder_blocks", ck.config.decoder_blocks},
                 {"ff_dim", ck.config.ff_dim},
                 {"window_len", ck.config.window_len},
                 {"flow_count", ck.config.flow_count},
                 {"diffusion_steps", ck.config.diffusion_steps}};
  j["schedule_type"] = ck.schedule_type;
  j["norm"] = {{"clip_value", ck.norm.clip_value}, {"scale", ck.norm.scale}};
  j["denoiser"] = params_to_json(ck.denoiser->params());
  if (ck.preprocessor) j["preprocessor"] = params_to_json(ck.preprocessor->params());
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write checkpoint: " + path);
  out << j.dump();
}

inline Checkpoint load_checkpoint(const std::string& path,
                                  std::optional<DenoiserConfig> expected = {}) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open checkpoint: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("corrupted checkpoint " + path + ": " + e.what());
  }
  try {
    require(j.at("format") == "tm-diffuse-checkpoint", "not a tm-diffuse checkpoint: " + path);
    Checkpoint ck;
    const auto& c = j.at("config");
    ck.config.model_dim = c.at("model_dim").get<int>();
    ck.config.heads = c.at("heads").get<int>();
    ck.config.encoder_blocks = c.at("encoder_blocks").get<int>();
    ck.config.decoder_blocks = c.at("decoder_blocks").get<int>();
    ck.config.ff_dim = c.at("ff_dim").get<int>();
    ck.config.window_len = c.at("window_len").get<int>();
    ck.config.flow_count = c.at("flow_count").get<int>();
    ck.config.diffusion_steps = c.at("diffusion_steps").get<int>();
    if (expected && !(ck.config == *expected))
      throw ValidationError("checkpoint config does not match the requested config: " + path);
    ck.schedule_type = j.at("schedule_type").get<std::string>();
    ck.norm.clip_value = j.at("norm").at("clip_value").get<double>();
    ck.norm.scale = j.at("norm").at("scale").get<double>();
    ck.denoiser = std::make_unique<TransformerDenoiser>(ck.config, 0);
    params_from_json(j.at("denoiser"), ck.denoiser->params());
    if (j.contains("preprocessor")) {
      ck.preprocessor = std::make_unique<Preprocessor>(ck.config.flow_count, 0);
      params_from_json(j.at("preprocessor"), ck.preprocessor->params());
    }
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("corrupted checkpoint " + path + ": " + e.what());
  }
}

}  // namespace tmd
