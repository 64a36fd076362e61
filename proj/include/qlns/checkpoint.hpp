#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "qlns/data.hpp"
#include "qlns/model.hpp"
#include "qlns/tensor.hpp"

// Binary tensor container, explicit little-endian regardless of host.
//
//   magic "QLNS" | u32 version | sections
//   section: u32 entry count, then per entry:
//     u32 name length | UTF-8 name | u32 rank | u32 dims[rank] |
//     f64 payload, row-major
//
// A model checkpoint holds the sections [params, init_snapshot] and, when the
// model is quantized, a third step-size section whose entries are rank-1
// tensors [bits, step] named after the quantized weight. A plain dataset
// container holds a single section.

namespace qlns {

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double v) {
  const std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  explicit ByteReader(std::string bytes) : bytes_(std::move(bytes)) {}

  bool eof() const { return pos_ >= bytes_.size(); }

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 4;
    return v;
  }

  double f64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 8;
    return std::bit_cast<double>(v);
  }

  std::string raw(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw std::runtime_error("checkpoint: truncated file");
  }
  std::string bytes_;
  std::size_t pos_ = 0;
};

inline void put_entry(std::string& out, const std::string& name, const Tensor& t) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out.append(name);
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  for (double v : t.data()) put_f64(out, v);
}

inline std::pair<std::string, Tensor> get_entry(ByteReader& r) {
  const std::uint32_t name_len = r.u32();
  std::string name = r.raw(name_len);
  const std::uint32_t rank = r.u32();
  std::vector<std::size_t> shape(rank);
  std::size_t total = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    shape[i] = r.u32();
    total *= shape[i];
  }
  if (rank == 0) total = 0;
  std::vector<double> data(total);
  for (auto& v : data) v = r.f64();
  return {std::move(name), Tensor(std::move(shape), std::move(data))};
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

inline std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return bytes;
}

constexpr char kMagic[4] = {'Q', 'L', 'N', 'S'};
constexpr std::uint32_t kVersion = 1;

inline std::string header() {
  std::string out(kMagic, 4);
  put_u32(out, kVersion);
  return out;
}

inline ByteReader open_reader(const std::string& path) {
  ByteReader r(read_file(path));
  if (r.raw(4) != std::string(kMagic, 4)) {
    throw std::runtime_error("checkpoint: bad magic in '" + path + "'");
  }
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  return r;
}

}  // namespace detail

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline void save_tensors(const std::string& path, const NamedTensors& entries) {
  std::string out = detail::header();
  detail::put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) detail::put_entry(out, name, t);
  detail::write_file(path, out);
}

inline NamedTensors load_tensors(const std::string& path) {
  auto r = detail::open_reader(path);
  const std::uint32_t count = r.u32();
  NamedTensors entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) entries.push_back(detail::get_entry(r));
  return entries;
}

inline void save_model_state(const std::string& path, const ModelState& s) {
  std::string out = detail::header();
  detail::put_u32(out, static_cast<std::uint32_t>(s.count()));
  for (std::size_t i = 0; i < s.count(); ++i) detail::put_entry(out, s.entry(i).name, s.param(i));
  detail::put_u32(out, static_cast<std::uint32_t>(s.count()));
  for (std::size_t i = 0; i < s.count(); ++i) detail::put_entry(out, s.entry(i).name, s.init(i));
  if (s.quantized()) {
    std::vector<std::pair<std::string, QuantSpec>> specs;
    for (std::size_t i = 0; i < s.count(); ++i) {
      const auto it = s.quant.find(s.entry(i).name);
      if (it != s.quant.end()) specs.emplace_back(it->first, it->second);
    }
    detail::put_u32(out, static_cast<std::uint32_t>(specs.size()));
    for (const auto& [name, spec] : specs) {
      detail::put_entry(out, name, Tensor({2}, {static_cast<double>(spec.bits), spec.step}));
    }
  }
  detail::write_file(path, out);
}

// Weight/bias roles are recovered from the builder's ".weight" suffix.
inline ModelState load_model_state(const std::string& path) {
  auto r = detail::open_reader(path);
  const auto read_section = [&r]() {
    const std::uint32_t count = r.u32();
    std::vector<ModelState::Entry> entries;
    entries.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
      auto [name, t] = detail::get_entry(r);
      const bool is_weight = name.size() >= 7 && name.substr(name.size() - 7) == ".weight";
      entries.push_back({std::move(name), std::move(t), is_weight});
    }
    return entries;
  };
  auto params = read_section();
  auto init = read_section();
  std::map<std::string, QuantSpec> quant;
  if (!r.eof()) {
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
      auto [name, t] = detail::get_entry(r);
      if (t.size() != 2) throw std::runtime_error("checkpoint: malformed step-size entry");
      quant[name] = QuantSpec{static_cast<int>(t[0]), t[1]};
    }
  }
  if (!r.eof()) throw std::runtime_error("checkpoint: trailing bytes in '" + path + "'");
  return ModelState::from_parts(std::move(params), std::move(init), std::move(quant));
}

// Dataset container convention: features under "<split>.x", targets under
// "<split>.y", integer class ids (stored as reals) under "<split>.labels".
inline void save_dataset(const std::string& path, const Dataset& train, const Dataset& test) {
  NamedTensors entries;
  const auto add = [&entries](const std::string& prefix, const Dataset& d) {
    entries.emplace_back(prefix + ".x", d.x);
    entries.emplace_back(prefix + ".y", d.y);
    if (d.classification()) {
      Tensor l({d.labels.size()});
      for (std::size_t i = 0; i < d.labels.size(); ++i) l[i] = d.labels[i];
      entries.emplace_back(prefix + ".labels", std::move(l));
    }
  };
  add("train", train);
  add("test", test);
  save_tensors(path, entries);
}

inline std::pair<Dataset, Dataset> load_dataset(const std::string& path) {
  const auto entries = load_tensors(path);
  const auto find = [&entries](const std::string& name) -> const Tensor* {
    for (const auto& [n, t] : entries) {
      if (n == name) return &t;
    }
    return nullptr;
  };
  const auto build = [&find, &path](const std::string& prefix) {
    Dataset d;
    const Tensor* x = find(prefix + ".x");
    const Tensor* y = find(prefix + ".y");
    if (!x || !y) throw std::runtime_error("dataset container missing '" + prefix + "' in " + path);
    d.x = *x;
    d.y = *y;
    if (const Tensor* l = find(prefix + ".labels")) {
      d.labels.resize(l->size());
      for (std::size_t i = 0; i < l->size(); ++i) d.labels[i] = static_cast<int>((*l)[i]);
    }
    return d;
  };
  return {build("train"), build("test")};
}

}  // namespace qlns
