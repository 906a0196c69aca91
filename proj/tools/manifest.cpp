#include "manifest.hpp"

#include <openssl/evp.h>

#include <array>
#include <fstream>
#include <memory>
#include <stdexcept>

namespace ofit::cli {

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw std::runtime_error("sha256 init failed");
  std::array<char, 1 << 16> buf;
  while (in) {
    in.read(buf.data(), buf.size());
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

namespace {

nlohmann::json file_entry(const std::filesystem::path& path) {
  return {{"path", path.generic_string()},
          {"bytes", std::filesystem::file_size(path)},
          {"sha256", sha256_file(path)}};
}

}  // namespace

Manifest::Manifest(std::string command, nlohmann::json config)
    : doc_{{"command", std::move(command)},
           {"config", std::move(config)},
           {"inputs", nlohmann::json::array()},
           {"artifacts", nlohmann::json::array()},
           {"counts", nlohmann::json::object()}} {}

void Manifest::input(const std::filesystem::path& path) { doc_["inputs"].push_back(file_entry(path)); }
void Manifest::artifact(const std::filesystem::path& path) { doc_["artifacts"].push_back(file_entry(path)); }
void Manifest::count(const std::string& key, long long value) { doc_["counts"][key] = value; }
void Manifest::note(const std::string& key, nlohmann::json value) { doc_[key] = std::move(value); }

std::filesystem::path Manifest::write(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  const auto path = dir / ("manifest." + doc_["command"].get<std::string>() + ".json");
  std::ofstream(path, std::ios::binary) << doc_.dump(2) << '\n';
  return path;
}

}  // namespace ofit::cli
