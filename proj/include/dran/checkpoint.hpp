#pragma once

// Binary checkpoint layout (little-endian):
//   "DRANCKP1"
//   u64 config_json_length, config JSON bytes
//   u64 parameter_count
//   per parameter: u64 name_length, name, u64 rank, rank x u64 dims,
//                  numel x f64 values

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "dran/hash.hpp"
#include "dran/model.hpp"

namespace dran {

static_assert(std::endian::native == std::endian::little, "checkpoint format is little-endian");

inline constexpr char kCheckpointMagic[8] = {'D', 'R', 'A', 'N', 'C', 'K', 'P', '1'};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  char b[8];
  std::memcpy(b, &v, 8);
  out.append(b, 8);
}

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  void read(void* dst, std::size_t n) {
    if (pos_ + n > bytes_.size()) throw Error("checkpoint: truncated file");
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }

  std::uint64_t u64() {
    std::uint64_t v = 0;
    read(&v, 8);
    return v;
  }

  std::string str(std::uint64_t n) {
    if (n > bytes_.size() - pos_) throw Error("checkpoint: truncated file");
    std::string s(bytes_.substr(pos_, n));
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string checkpoint_bytes(const DranModel& model) {
  std::string out(kCheckpointMagic, 8);
  const std::string cfg = to_json(model.config).dump();
  detail::put_u64(out, cfg.size());
  out += cfg;
  const ParamStore& ps = model.params;
  detail::put_u64(out, ps.count());
  for (std::size_t i = 0; i < ps.count(); ++i) {
    const std::string& name = ps.names()[i];
    const Tensor& t = ps.at(i);
    detail::put_u64(out, name.size());
    out += name;
    detail::put_u64(out, t.rank());
    for (std::size_t d : t.shape()) detail::put_u64(out, d);
    const auto v = t.data();
    out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
  }
  return out;
}

inline DranModel checkpoint_from_bytes(std::string_view bytes) {
  detail::ByteReader r(bytes);
  char magic[8];
  r.read(magic, 8);
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0) throw Error("checkpoint: bad magic");
  const std::string cfg_text = r.str(r.u64());
  DranConfig cfg;
  try {
    cfg = config_from_json(nlohmann::json::parse(cfg_text));
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("checkpoint: bad config JSON: ") + e.what());
  }
  DranModel model{cfg, {}};
  const std::uint64_t count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.str(r.u64());
    const std::uint64_t rank = r.u64();
    if (rank > 8) throw Error("checkpoint: implausible rank for " + name);
    Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    std::vector<double> values(numel(shape));
    r.read(values.data(), values.size() * sizeof(double));
    model.params.add(name, Tensor::from(std::move(shape), std::move(values)));
  }
  if (!r.done()) throw Error("checkpoint: trailing bytes");

  // The stored parameter set must be exactly what the config builds.
  DranModel fresh = DranModel::create(cfg);
  if (fresh.params.names() != model.params.names()) {
    throw Error("checkpoint: parameter set does not match its config");
  }
  for (std::size_t i = 0; i < fresh.params.count(); ++i) {
    if (fresh.params.at(i).shape() != model.params.at(i).shape()) {
      throw Error("checkpoint: shape mismatch for " + fresh.params.names()[i]);
    }
  }
  return model;
}

inline void save_checkpoint(const DranModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path);
  const std::string bytes = checkpoint_bytes(model);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path);
}

inline DranModel load_checkpoint(const std::string& path) {
  return checkpoint_from_bytes(read_file_bytes(path));
}

inline std::string checkpoint_id(const DranModel& model) {
  return git_blob_hash(checkpoint_bytes(model));
}

}  // namespace dran
