#include "toxitrace/manifest.hpp"

#include <openssl/evp.h>

#include <array>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "toxitrace/error.hpp"

namespace toxitrace {

using json = nlohmann::ordered_json;

std::string git_blob_sha1(std::string_view bytes) {
  const std::string header = "blob " + std::to_string(bytes.size()) + '\0';
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int length = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  const bool ok = ctx && EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                  EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) == 1 &&
                  EVP_DigestFinal_ex(ctx, digest.data(), &length) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw std::runtime_error("sha1 digest failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < length; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

std::string file_blob_sha1(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return git_blob_sha1(ss.str());
}

void RunManifest::add_input(const std::filesystem::path& path) { inputs.push_back({path.string(), file_blob_sha1(path)}); }

void RunManifest::add_output(const std::filesystem::path& path) {
  outputs.push_back({path.string(), file_blob_sha1(path)});
}

namespace {

json hashed(const std::vector<HashedPath>& paths) {
  json out = json::array();
  for (const auto& p : paths) out.push_back({{"path", p.path}, {"sha1", p.sha1}});
  return out;
}

std::vector<HashedPath> unhashed(const json& j) {
  std::vector<HashedPath> out;
  for (const auto& p : j) out.push_back({p.at("path").get<std::string>(), p.at("sha1").get<std::string>()});
  return out;
}

}  // namespace

std::string manifest_to_json(const RunManifest& m) {
  json j = {{"command", m.command},
            {"config", m.config_json.empty() ? json(nullptr) : json::parse(m.config_json)},
            {"seed", m.seed},
            {"inputs", hashed(m.inputs)},
            {"outputs", hashed(m.outputs)},
            {"duration_seconds", m.duration_seconds},
            {"errors", m.errors}};
  return j.dump(2) + "\n";
}

RunManifest manifest_from_json(const std::string& text) {
  try {
    const auto j = json::parse(text);
    RunManifest m;
    m.command = j.at("command").get<std::string>();
    if (!j.at("config").is_null()) m.config_json = j.at("config").dump();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.inputs = unhashed(j.at("inputs"));
    m.outputs = unhashed(j.at("outputs"));
    m.duration_seconds = j.at("duration_seconds").get<double>();
    m.errors = j.at("errors").get<std::vector<std::string>>();
    return m;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed manifest: ") + e.what());
  }
}

}  // namespace toxitrace
