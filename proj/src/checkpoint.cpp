#include "tdg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace tdg::train {

namespace {

constexpr char kMagic[4] = {'T', 'D', 'G', 'C'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

void put_table(std::string& out, const std::vector<std::pair<std::string, const Tensor<float>*>>& table) {
  put_u32(out, static_cast<std::uint32_t>(table.size()));
  for (const auto& [name, t] : table) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    put_u32(out, static_cast<std::uint32_t>(t->rank()));
    for (auto e : t->shape()) put_u32(out, static_cast<std::uint32_t>(e));
    const auto data = t->data();
    out.append(reinterpret_cast<const char*>(data.data()), data.size_bytes());
  }
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  const char* take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError(CheckpointError::Kind::kTruncated,
                            std::string("checkpoint truncated while reading ") + what);
    }
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::uint32_t u32(const char* what) {
    std::uint32_t v;
    std::memcpy(&v, take(4, what), 4);
    return v;
  }

  std::vector<std::pair<std::string, Tensor<float>>> table(const char* what) {
    const std::uint32_t count = u32(what);
    std::vector<std::pair<std::string, Tensor<float>>> out;
    for (std::uint32_t i = 0; i < count; ++i) {
      const std::uint32_t len = u32(what);
      std::string name(take(len, what), len);
      const std::uint32_t rank = u32(what);
      if (rank > 8) throw CheckpointError(CheckpointError::Kind::kCorrupt, "checkpoint tensor '" + name + "' has rank " + std::to_string(rank));
      Shape shape;
      std::uint64_t numel = 1;
      for (std::uint32_t r = 0; r < rank; ++r) {
        const std::uint32_t e = u32(what);
        if (e == 0) throw CheckpointError(CheckpointError::Kind::kCorrupt, "checkpoint tensor '" + name + "' has a zero extent");
        shape.push_back(e);
        numel *= e;
        if (numel > (1ULL << 34)) throw CheckpointError(CheckpointError::Kind::kCorrupt, "checkpoint tensor '" + name + "' is implausibly large");
      }
      const char* raw = take(numel * 4, what);
      std::vector<float> values(numel);
      std::memcpy(values.data(), raw, numel * 4);
      out.emplace_back(std::move(name), Tensor<float>(std::move(shape), std::move(values)));
    }
    return out;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const char* checkpoint_error_name(CheckpointError::Kind kind) {
  switch (kind) {
    case CheckpointError::Kind::kIo: return "io";
    case CheckpointError::Kind::kTruncated: return "truncated";
    case CheckpointError::Kind::kBadMagic: return "bad_magic";
    case CheckpointError::Kind::kUnsupportedVersion: return "unsupported_version";
    case CheckpointError::Kind::kCorrupt: return "corrupt";
  }
  return "unknown";
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  nlohmann::ordered_json header;
  header["config"] = to_json(ckpt.config);
  header["step"] = ckpt.step;
  header["adam"] = {{"lr", ckpt.adam.lr},
                    {"beta1", ckpt.adam.beta1},
                    {"beta2", ckpt.adam.beta2},
                    {"epsilon", ckpt.adam.epsilon},
                    {"t", ckpt.adam.t}};
  header["threshold"] = ckpt.threshold ? nlohmann::ordered_json(*ckpt.threshold) : nlohmann::ordered_json(nullptr);
  const std::string text = header.dump();

  std::string out(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.append(text);

  std::vector<std::pair<std::string, const Tensor<float>*>> params, optim;
  for (const auto& [name, t] : ckpt.params) params.emplace_back(name, &t);
  for (const auto& [name, t] : ckpt.frozen) params.emplace_back(name, &t);
  for (const auto& [name, t] : ckpt.adam.m) optim.emplace_back("m/" + name, &t);
  for (const auto& [name, t] : ckpt.adam.v) optim.emplace_back("v/" + name, &t);
  put_table(out, params);
  put_table(out, optim);
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  if (bytes.size() < 4) throw CheckpointError(CheckpointError::Kind::kTruncated, "checkpoint truncated before magic");
  if (std::memcmp(in.take(4, "magic"), kMagic, 4) != 0) {
    throw CheckpointError(CheckpointError::Kind::kBadMagic, "not a checkpoint (bad magic)");
  }
  const std::uint32_t version = in.u32("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointError::Kind::kUnsupportedVersion,
                          "unsupported checkpoint version " + std::to_string(version) + " (this build reads version " +
                              std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint32_t len = in.u32("header length");
  const std::string text(in.take(len, "header"), len);

  Checkpoint ck;
  try {
    const auto header = nlohmann::json::parse(text);
    ck.config = train_config_from_json(header.at("config"));
    ck.step = header.at("step").get<std::int64_t>();
    const auto& a = header.at("adam");
    ck.adam.lr = a.at("lr").get<double>();
    ck.adam.beta1 = a.at("beta1").get<double>();
    ck.adam.beta2 = a.at("beta2").get<double>();
    ck.adam.epsilon = a.at("epsilon").get<double>();
    ck.adam.t = a.at("t").get<std::int64_t>();
    if (!header.at("threshold").is_null()) ck.threshold = header.at("threshold").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(CheckpointError::Kind::kCorrupt, std::string("checkpoint header: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(CheckpointError::Kind::kCorrupt, std::string("checkpoint header: ") + e.what());
  }

  for (auto& [name, t] : in.table("parameter table")) {
    auto& dst = name.starts_with("perceptual.") ? ck.frozen : ck.params;
    dst.emplace(std::move(name), std::move(t));
  }
  for (auto& [name, t] : in.table("optimizer table")) {
    if (name.starts_with("m/")) {
      ck.adam.m.emplace(name.substr(2), std::move(t));
    } else if (name.starts_with("v/")) {
      ck.adam.v.emplace(name.substr(2), std::move(t));
    } else {
      throw CheckpointError(CheckpointError::Kind::kCorrupt, "unexpected optimizer tensor '" + name + "'");
    }
  }
  if (!in.done()) throw CheckpointError(CheckpointError::Kind::kCorrupt, "trailing bytes after checkpoint");
  return ck;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(ckpt);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(CheckpointError::Kind::kIo, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(CheckpointError::Kind::kIo, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::kIo, "cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace tdg::train
