#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "exnode/param_store.hpp"

namespace exnode {

inline constexpr const char* kCheckpointVersion = "exnode-ckpt-v1";

class CheckpointError : public Error {
 public:
  using Error::Error;
};

struct Checkpoint {
  std::string task;
  nlohmann::json config;  // resolved run config the parameters belong to
  ParamStore params;
};

inline nlohmann::json to_json(const Checkpoint& ck) {
  nlohmann::json params = nlohmann::json::object();
  for (const auto& [name, arr] : ck.params)
    params[name] = {{"shape", arr.shape()}, {"data", arr.values()}};
  return {{"version", kCheckpointVersion}, {"task", ck.task}, {"config", ck.config}, {"params", params}};
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  if (!j.contains("version") || j["version"] != kCheckpointVersion)
    throw CheckpointError(std::string("checkpoint version must be ") + kCheckpointVersion);
  Checkpoint ck;
  ck.task = j.value("task", "");
  ck.config = j.value("config", nlohmann::json::object());
  for (const auto& [name, entry] : j.at("params").items()) {
    Shape shape = entry.at("shape").get<Shape>();
    std::vector<double> data = entry.at("data").get<std::vector<double>>();
    ck.params.add(name, DenseArray(std::move(shape), std::move(data)));
  }
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path);
  if (!os) throw CheckpointError("cannot write checkpoint " + path);
  os << to_json(ck).dump() << '\n';
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw CheckpointError("cannot read checkpoint " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed checkpoint " + path + ": " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace exnode
