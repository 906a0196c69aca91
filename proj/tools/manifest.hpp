#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace ofit::cli {

// Lower-case hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

// Run record: config echo, input digests, artifact digests, counts.
class Manifest {
 public:
  Manifest(std::string command, nlohmann::json config);

  void input(const std::filesystem::path& path);
  void artifact(const std::filesystem::path& path);
  void count(const std::string& key, long long value);
  void note(const std::string& key, nlohmann::json value);

  // Writes manifest.<command>.json into `dir` and returns its path.
  std::filesystem::path write(const std::filesystem::path& dir) const;

 private:
  nlohmann::json doc_;
};

}  // namespace ofit::cli
