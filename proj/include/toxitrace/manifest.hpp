#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace toxitrace {

// SHA-1 of "blob <size>\0" followed by the bytes, as git computes object ids.
std::string git_blob_sha1(std::string_view bytes);
std::string file_blob_sha1(const std::filesystem::path& path);

struct HashedPath {
  std::string path;
  std::string sha1;
};

struct RunManifest {
  std::string command;
  std::string config_json;  // resolved configuration as a JSON document
  std::uint64_t seed = 0;
  std::vector<HashedPath> inputs;
  std::vector<HashedPath> outputs;
  double duration_seconds = 0.0;
  std::vector<std::string> errors;  // per-record failures that did not abort the run

  void add_input(const std::filesystem::path& path);
  void add_output(const std::filesystem::path& path);
};

std::string manifest_to_json(const RunManifest& manifest);
RunManifest manifest_from_json(const std::string& text);

}  // namespace toxitrace
