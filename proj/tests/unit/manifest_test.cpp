#include "toxitrace/manifest.hpp"

#include <gtest/gtest.h>

#include <fstream>

#include "toxitrace/error.hpp"

using namespace toxitrace;

TEST(BlobHash, MatchesGitObjectIds) {
  EXPECT_EQ(git_blob_sha1(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  EXPECT_EQ(git_blob_sha1("hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
}

TEST(BlobHash, FileAndMissingFile) {
  const auto path = std::filesystem::temp_directory_path() / "toxitrace_manifest_test.txt";
  std::ofstream(path, std::ios::binary) << "hello\n";
  EXPECT_EQ(file_blob_sha1(path), "ce013625030ba8dba906f756967f9e9ca394464a");
  EXPECT_THROW(file_blob_sha1(path.string() + ".absent"), DataError);
}

TEST(Manifest, JsonRoundTrip) {
  RunManifest m;
  m.command = "synth";
  m.config_json = R"({"seed":7})";
  m.seed = 7;
  m.inputs = {{"a.jsonl", "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"}};
  m.outputs = {{"b.jsonl", "ce013625030ba8dba906f756967f9e9ca394464a"}};
  m.duration_seconds = 1.5;
  const auto back = manifest_from_json(manifest_to_json(m));
  EXPECT_EQ(back.command, m.command);
  EXPECT_EQ(back.config_json, m.config_json);
  EXPECT_EQ(back.outputs[0].sha1, m.outputs[0].sha1);
  EXPECT_EQ(back.inputs[0].path, "a.jsonl");
  EXPECT_THROW(manifest_from_json("{}"), DataError);
}
