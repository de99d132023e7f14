#pragma once

#include <array>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "revcol/model.hpp"
#include "revcol/optim.hpp"
#include "revcol/train.hpp"

// Checkpoint container. Layout (everything little-endian):
//   magic "RVCL"
//   u32  format version (currently 1)
//   model-config record: u32 channels[4], u32 blocks[4], u32 columns,
//     u32 kernel, u32 classes, u32 input_h, u32 input_w, f64 gamma_floor,
//     u32 head_column_count + u32 each, u32 schedule_slots + f64 alpha[]
//     + f64 beta[], u64 optimizer step count, u8 precision tag
//   u32 tensor count, then per tensor: u32 name length, UTF-8 name,
//     u8 dtype tag (1=f32, 2=f64), u8 ndim, u64 dims, raw values
//   u32 CRC32 (IEEE 0xEDB88320) of all preceding bytes
namespace revcol {

namespace detail {

struct Crc32 {
  static const std::array<std::uint32_t, 256>& table() {
    static const auto t = [] {
      std::array<std::uint32_t, 256> tbl{};
      for (std::uint32_t i = 0; i < 256; ++i) {
        std::uint32_t c = i;
        for (int j = 0; j < 8; ++j) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
        tbl[i] = c;
      }
      return tbl;
    }();
    return t;
  }

  void update(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) state = table()[(state ^ p[i]) & 0xFFu] ^ (state >> 8);
  }
  std::uint32_t value() const { return state ^ 0xFFFFFFFFu; }

  std::uint32_t state = 0xFFFFFFFFu;
};

class CrcWriter {
 public:
  explicit CrcWriter(std::ostream& os) : os_(os) {}
  void bytes(const void* data, std::size_t n) {
    os_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    crc_.update(data, n);
  }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u32(std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    bytes(b, 4);
  }
  void u64(std::uint64_t v) {
    u32(static_cast<std::uint32_t>(v));
    u32(static_cast<std::uint32_t>(v >> 32));
  }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
  }
  std::uint32_t crc() const { return crc_.value(); }

 private:
  std::ostream& os_;
  Crc32 crc_;
};

class CrcReader {
 public:
  explicit CrcReader(std::istream& is) : is_(is) {}
  void bytes(void* data, std::size_t n) {
    is_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (!is_) throw IoError("checkpoint: truncated file");
    crc_.update(data, n);
  }
  std::uint8_t u8() {
    std::uint8_t v;
    bytes(&v, 1);
    return v;
  }
  std::uint32_t u32() {
    unsigned char b[4];
    bytes(b, 4);
    return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
           (std::uint32_t(b[3]) << 24);
  }
  std::uint64_t u64() {
    const std::uint64_t lo = u32();
    return lo | (std::uint64_t(u32()) << 32);
  }
  double f64() {
    const std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::uint32_t crc() const { return crc_.value(); }

 private:
  std::istream& is_;
  Crc32 crc_;
};

template <class T>
constexpr std::uint8_t dtype_tag() {
  return sizeof(T) == 4 ? 1 : 2;
}

}  // namespace detail

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
void save_checkpoint(const RevColModel<T>& model, const AdamW<T>* opt,
                     const SupervisionSchedule& sched, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("checkpoint: cannot open " + path + " for writing");
  detail::CrcWriter w(os);
  w.bytes("RVCL", 4);
  w.u32(kCheckpointVersion);

  const auto& cfg = model.cfg;
  for (auto c : cfg.channels) w.u32(static_cast<std::uint32_t>(c));
  for (auto b : cfg.blocks) w.u32(static_cast<std::uint32_t>(b));
  w.u32(static_cast<std::uint32_t>(cfg.columns));
  w.u32(static_cast<std::uint32_t>(cfg.kernel_size));
  w.u32(static_cast<std::uint32_t>(cfg.num_classes));
  w.u32(static_cast<std::uint32_t>(cfg.input_h));
  w.u32(static_cast<std::uint32_t>(cfg.input_w));
  w.f64(cfg.gamma_floor);
  w.u32(static_cast<std::uint32_t>(cfg.head_columns.size()));
  for (int c : cfg.head_columns) w.u32(static_cast<std::uint32_t>(c));
  w.u32(static_cast<std::uint32_t>(sched.alpha.size()));
  for (double a : sched.alpha) w.f64(a);
  for (double b : sched.beta) w.f64(b);
  w.u64(opt ? static_cast<std::uint64_t>(opt->step_count()) : 0);
  w.u8(detail::dtype_tag<T>());

  auto write_tensor = [&](const std::string& name, const Tensor<T>& t) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u8(detail::dtype_tag<T>());
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.dims()) w.u64(static_cast<std::uint64_t>(d));
    w.bytes(t.data(), sizeof(T) * static_cast<std::size_t>(t.numel()));
  };

  const bool with_opt = opt && opt->first_moments().size() == model.params.size();
  const std::uint32_t count =
      static_cast<std::uint32_t>(model.params.size() * (with_opt ? 3 : 1));
  w.u32(count);
  for (std::size_t i = 0; i < model.params.size(); ++i)
    write_tensor(model.params.names[i], model.params.values[i]);
  if (with_opt) {
    for (std::size_t i = 0; i < model.params.size(); ++i)
      write_tensor("opt.m." + model.params.names[i], opt->first_moments()[i]);
    for (std::size_t i = 0; i < model.params.size(); ++i)
      write_tensor("opt.v." + model.params.names[i], opt->second_moments()[i]);
  }

  const std::uint32_t crc = w.crc();
  unsigned char b[4] = {static_cast<unsigned char>(crc), static_cast<unsigned char>(crc >> 8),
                        static_cast<unsigned char>(crc >> 16), static_cast<unsigned char>(crc >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
  if (!os) throw IoError("checkpoint: write failed for " + path);
}

template <class T>
struct LoadedCheckpoint {
  RevColModel<T> model;
  AdamW<T> optimizer;
  SupervisionSchedule schedule;
  bool has_optimizer_state = false;
};

template <class T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path);
  detail::CrcReader r(is);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, "RVCL", 4) != 0) throw IoError("checkpoint: bad magic bytes");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw IoError("checkpoint: version mismatch: found " + std::to_string(version) + ", expected " +
                  std::to_string(kCheckpointVersion));

  ModelConfig cfg;
  for (auto& c : cfg.channels) c = r.u32();
  for (auto& b : cfg.blocks) b = r.u32();
  cfg.columns = static_cast<int>(r.u32());
  cfg.kernel_size = r.u32();
  cfg.num_classes = r.u32();
  cfg.input_h = r.u32();
  cfg.input_w = r.u32();
  cfg.gamma_floor = r.f64();
  cfg.head_columns.resize(r.u32());
  for (auto& c : cfg.head_columns) c = static_cast<int>(r.u32());
  SupervisionSchedule sched;
  sched.head_columns = cfg.head_columns;
  const std::uint32_t slots = r.u32();
  sched.alpha.resize(slots);
  sched.beta.resize(slots);
  for (auto& a : sched.alpha) a = r.f64();
  for (auto& b : sched.beta) b = r.f64();
  const std::uint64_t step = r.u64();
  const std::uint8_t tag = r.u8();
  if (tag != detail::dtype_tag<T>())
    throw IoError("checkpoint: dtype tag " + std::to_string(tag) + " does not match requested precision");

  LoadedCheckpoint<T> out;
  Rng rng(0);
  out.model = build_model<T>(cfg, rng);
  out.schedule = sched;
  out.optimizer.set_step_count(static_cast<std::int64_t>(step));

  const std::uint32_t count = r.u32();
  auto read_tensor = [&](std::string& name) {
    const std::uint32_t len = r.u32();
    name.resize(len);
    r.bytes(name.data(), len);
    const std::uint8_t dt = r.u8();
    if (dt != 1 && dt != 2) throw IoError("checkpoint: unknown dtype tag " + std::to_string(dt));
    if (dt != detail::dtype_tag<T>())
      throw IoError("checkpoint: tensor '" + name + "' has mismatched dtype tag");
    const std::uint8_t nd = r.u8();
    Shape dims(nd);
    for (auto& d : dims) d = static_cast<std::int64_t>(r.u64());
    auto t = Tensor<T>::zeros(dims, MemTag::parameter);
    r.bytes(t.data(), sizeof(T) * static_cast<std::size_t>(t.numel()));
    return t;
  };

  const std::size_t np = out.model.params.size();
  std::vector<Tensor<T>> moments_m(np), moments_v(np);
  bool any_m = false;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name;
    Tensor<T> t = read_tensor(name);
    auto copy_into = [&](Tensor<T>& dst) {
      if (dst.dims() != t.dims())
        throw IoError("checkpoint: tensor '" + name + "' shape " + shape_str(t.dims()) +
                      " does not match model shape " + shape_str(dst.dims()));
      std::copy(t.data(), t.data() + t.numel(), dst.data());
    };
    if (name.rfind("opt.m.", 0) == 0 || name.rfind("opt.v.", 0) == 0) {
      const bool is_m = name[4] == 'm';
      const std::string pname = name.substr(6);
      bool found = false;
      for (std::size_t j = 0; j < np; ++j)
        if (out.model.params.names[j] == pname) {
          (is_m ? moments_m : moments_v)[j] = std::move(t);
          found = true;
          any_m = true;
          break;
        }
      if (!found) throw IoError("checkpoint: optimizer entry for unknown parameter '" + pname + "'");
      continue;
    }
    bool found = false;
    for (std::size_t j = 0; j < np; ++j)
      if (out.model.params.names[j] == name) {
        copy_into(out.model.params.values[j]);
        found = true;
        break;
      }
    if (!found) throw IoError("checkpoint: unknown tensor '" + name + "'");
  }

  unsigned char cb[4];
  is.read(reinterpret_cast<char*>(cb), 4);
  if (!is) throw IoError("checkpoint: truncated file (missing CRC)");
  const std::uint32_t stored = std::uint32_t(cb[0]) | (std::uint32_t(cb[1]) << 8) |
                               (std::uint32_t(cb[2]) << 16) | (std::uint32_t(cb[3]) << 24);
  if (stored != r.crc())
    throw IoError("checkpoint: CRC mismatch (file corrupt)");

  if (any_m) {
    for (std::size_t j = 0; j < np; ++j)
      if (!moments_m[j].defined() || !moments_v[j].defined())
        throw IoError("checkpoint: incomplete optimizer state");
    out.optimizer.first_moments() = std::move(moments_m);
    out.optimizer.second_moments() = std::move(moments_v);
    out.has_optimizer_state = true;
  }
  return out;
}

}  // namespace revcol
