#pragma once

// Run manifest written next to every command's outputs. Contains no
// timestamps or host details so identical runs produce identical files.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "sliceattn/binary_io.hpp"
#include "sliceattn/config.hpp"

namespace sliceattn {

inline constexpr const char* kCodeVersion = "sliceattn 1.0.0";
inline constexpr const char* kManifestFile = "manifest.json";

struct RunManifest {
  std::string command;
  std::map<std::string, KeyValues> config;  // section name -> key/value snapshot
  std::map<std::string, std::uint64_t> seeds;
  std::map<std::string, std::string> inputs;
  std::vector<std::string> artifacts;       // file names relative to the output dir
  std::string code_version = kCodeVersion;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["code_version"] = code_version;
    j["command"] = command;
    j["config"] = config;
    j["seeds"] = seeds;
    j["inputs"] = inputs;
    j["artifacts"] = artifacts;
    return j;
  }

  static RunManifest from_json(const nlohmann::json& j) {
    RunManifest m;
    m.code_version = j.at("code_version").get<std::string>();
    m.command = j.at("command").get<std::string>();
    m.config = j.at("config").get<std::map<std::string, KeyValues>>();
    m.seeds = j.at("seeds").get<std::map<std::string, std::uint64_t>>();
    m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
    m.artifacts = j.at("artifacts").get<std::vector<std::string>>();
    return m;
  }
};

inline void write_manifest(const std::filesystem::path& dir, const RunManifest& m) {
  io::write_file(dir / kManifestFile, m.to_json().dump(2) + "\n");
}

inline RunManifest read_manifest(const std::filesystem::path& path) {
  try {
    return RunManifest::from_json(nlohmann::json::parse(io::read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw InputError("malformed manifest " + path.string() + ": " + e.what());
  }
}

}  // namespace sliceattn
