#include "ofit/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "ofit/errors.hpp"

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace ofit::ckpt {

namespace {

template <class U>
void put(std::string& out, U value) {
  char buf[sizeof(U)];
  std::memcpy(buf, &value, sizeof(U));
  out.append(buf, sizeof(U));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <class U>
  U get() {
    U value;
    std::memcpy(&value, take(sizeof(U)).data(), sizeof(U));
    return value;
  }

  std::string_view take(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw ParseError("checkpoint truncated at byte " + std::to_string(pos_));
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

void put_tensor(std::string& out, const std::string& name, const Tensor<float>& t) {
  put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
  out += name;
  put<std::uint8_t>(out, static_cast<std::uint8_t>(t.shape.size()));
  for (std::size_t d : t.shape) put<std::uint64_t>(out, d);
  out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
}

}  // namespace

std::string serialize(const Checkpoint& checkpoint) {
  const model::ModelConfig& c = checkpoint.base.config;
  std::string out(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kVersion);
  for (int v : {c.d_model, c.n_layers, c.n_heads, c.n_kv_heads, c.window, c.d_ff, c.vocab, c.max_seq}) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(v));
  }
  std::uint32_t count = 0;
  checkpoint.base.for_each([&](const std::string&, const Tensor<float>&) { ++count; });
  if (checkpoint.adapters) {
    count += 1;  // lora.alpha
    checkpoint.adapters->for_each([&](const std::string&, const Tensor<float>&) { ++count; });
  }
  put<std::uint32_t>(out, count);
  checkpoint.base.for_each([&](const std::string& n, const Tensor<float>& t) { put_tensor(out, n, t); });
  if (checkpoint.adapters) {
    Tensor<float> alpha({1}, static_cast<float>(checkpoint.adapters->config.alpha));
    put_tensor(out, "lora.alpha", alpha);
    checkpoint.adapters->for_each([&](const std::string& n, const Tensor<float>& t) { put_tensor(out, n, t); });
  }
  return out;
}

Checkpoint deserialize(std::string_view bytes) {
  Reader in(bytes);
  if (in.take(sizeof kMagic) != std::string_view(kMagic, sizeof kMagic)) throw ParseError("not a checkpoint file");
  if (const auto v = in.get<std::uint32_t>(); v != kVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(v));
  }
  model::ModelConfig c;
  for (int* f : {&c.d_model, &c.n_layers, &c.n_heads, &c.n_kv_heads, &c.window, &c.d_ff, &c.vocab, &c.max_seq}) {
    *f = static_cast<int>(in.get<std::uint32_t>());
  }
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ParseError(std::string("checkpoint config: ") + e.what());
  }

  std::map<std::string, Tensor<float>> tensors;
  const auto count = in.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = in.get<std::uint16_t>();
    std::string name(in.take(len));
    Tensor<float> t;
    t.shape.resize(in.get<std::uint8_t>());
    std::size_t n = 1;
    for (auto& d : t.shape) {
      d = static_cast<std::size_t>(in.get<std::uint64_t>());
      n *= d;
    }
    const auto raw = in.take(n * sizeof(float));
    t.data.resize(n);
    std::memcpy(t.data.data(), raw.data(), raw.size());
    if (!tensors.emplace(name, std::move(t)).second) throw ParseError("duplicate tensor " + name);
  }
  if (!in.done()) throw ParseError("trailing bytes after checkpoint tensors");

  Checkpoint out;
  out.base = model::zeros<float>(c);
  out.base.for_each([&](const std::string& name, Tensor<float>& t) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ParseError("checkpoint missing tensor " + name);
    if (it->second.shape != t.shape) throw ParseError("shape mismatch for tensor " + name);
    t = std::move(it->second);
    tensors.erase(it);
  });

  if (auto it = tensors.find("lora.alpha"); it != tensors.end()) {
    lora::Adapters<float> ad;
    ad.config.alpha = it->second.data.at(0);
    ad.config.targets.clear();
    ad.config.init_std = 0;
    ad.layers.resize(static_cast<std::size_t>(c.n_layers));
    tensors.erase(it);
    int rank = -1;
    for (std::size_t l = 0; l < ad.layers.size(); ++l) {
      for (model::Proj p : model::kAllProjs) {
        const std::string base = "lora.layers." + std::to_string(l) + "." + model::proj_name(p);
        auto a = tensors.find(base + ".a");
        auto b = tensors.find(base + ".b");
        if (a == tensors.end() && b == tensors.end()) continue;
        if (a == tensors.end() || b == tensors.end()) throw ParseError("incomplete adapter " + base);
        if (a->second.shape.size() != 2 || b->second.shape.size() != 2) throw ParseError("bad adapter rank " + base);
        rank = static_cast<int>(a->second.shape[1]);
        ad.layers[l][static_cast<std::size_t>(p)] = lora::Adapter<float>{std::move(a->second), std::move(b->second)};
        tensors.erase(a);
        tensors.erase(tensors.find(base + ".b"));
        if (std::find(ad.config.targets.begin(), ad.config.targets.end(), p) == ad.config.targets.end()) {
          ad.config.targets.push_back(p);
        }
      }
    }
    if (rank < 0) throw ParseError("adapter block without adapters");
    ad.config.rank = rank;
    std::sort(ad.config.targets.begin(), ad.config.targets.end());
    out.adapters = std::move(ad);
  }
  if (!tensors.empty()) throw ParseError("unknown tensor " + tensors.begin()->first);
  return out;
}

std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  auto p = path;
  p += ".json";
  return p;
}

nlohmann::json to_json(const model::ModelConfig& c) {
  return {{"d_model", c.d_model}, {"n_layers", c.n_layers}, {"n_heads", c.n_heads}, {"n_kv_heads", c.n_kv_heads},
          {"window", c.window},   {"d_ff", c.d_ff},         {"vocab", c.vocab},     {"max_seq", c.max_seq}};
}

nlohmann::json to_json(const lora::LoraConfig& c) {
  nlohmann::json targets = nlohmann::json::array();
  for (auto p : c.targets) targets.push_back(model::proj_name(p));
  return {{"rank", c.rank}, {"alpha", c.alpha}, {"targets", targets}, {"init_std", c.init_std}};
}

void save(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    const std::string bytes = serialize(checkpoint);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  nlohmann::json side = checkpoint.meta;
  side["model"] = to_json(checkpoint.base.config);
  if (checkpoint.adapters) side["lora"] = to_json(checkpoint.adapters->config);
  std::ofstream f(sidecar_path(path));
  if (!f) throw std::runtime_error("cannot write " + sidecar_path(path).string());
  f << side.dump(2) << "\n";
}

Checkpoint load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  Checkpoint out = deserialize(ss.str());
  if (std::ifstream side(sidecar_path(path)); side) {
    out.meta = nlohmann::json::parse(side);
    if (out.adapters && out.meta.contains("lora") && out.meta["lora"].contains("init_std")) {
      out.adapters->config.init_std = out.meta["lora"]["init_std"].get<double>();
    }
    out.meta.erase("model");
    out.meta.erase("lora");
  }
  return out;
}

}  // namespace ofit::ckpt
