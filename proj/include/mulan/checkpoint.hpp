// Copyright 2026 The Mulan Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "mulan/errors.hpp"
#include "mulan/model.hpp"
#include "mulan/train.hpp"

namespace mulan {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'M', 'U', 'L', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Payload checksum does not match the stored one.
class CorruptCheckpointError : public FormatError {
 public:
  using FormatError::FormatError;
};

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::uint8_t precision = 8;  // bytes per element: 4 (float) or 8 (double)
  std::vector<unsigned char> data;
};

inline std::uint32_t crc32_of(const unsigned char* p, std::size_t n) {
  uLong c = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = crc32(c, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

namespace detail {

template <typename I>
void put(std::vector<unsigned char>& out, I v) {
  unsigned char b[sizeof(I)];
  std::memcpy(b, &v, sizeof(I));
  out.insert(out.end(), b, b + sizeof(I));
}

class Reader {
 public:
  Reader(const std::vector<unsigned char>& bytes, std::size_t limit) : bytes_(bytes), limit_(limit) {}

  template <typename I>
  I get() {
    need(sizeof(I));
    I v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(I));
    pos_ += sizeof(I);
    return v;
  }
  std::vector<unsigned char> take(std::size_t n) {
    need(n);
    std::vector<unsigned char> out(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                   bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return out;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > limit_ || pos_ + n < pos_) throw FormatError("checkpoint: truncated payload");
  }
  const std::vector<unsigned char>& bytes_;
  std::size_t limit_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<unsigned char> encode_checkpoint(const std::vector<CheckpointEntry>& entries) {
  std::vector<unsigned char> out(kCheckpointMagic, kCheckpointMagic + 4);
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put<std::uint64_t>(out, entries.size());
  for (const auto& e : entries) {
    if (e.precision != 4 && e.precision != 8) throw ContractError("checkpoint: precision must be 4 or 8");
    if (e.data.size() != shape_numel(e.shape) * e.precision)
      throw ContractError("checkpoint: data length of '" + e.name + "' does not match its shape");
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
    for (std::size_t d : e.shape) detail::put<std::uint64_t>(out, d);
    out.push_back(e.precision);
    out.insert(out.end(), e.data.begin(), e.data.end());
  }
  detail::put<std::uint32_t>(out, crc32_of(out.data(), out.size()));
  return out;
}

inline std::vector<CheckpointEntry> decode_checkpoint(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 4 + 4 + 8 + 4) throw FormatError("checkpoint: file too short");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw FormatError("checkpoint: bad magic");
  const std::size_t payload = bytes.size() - 4;
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + payload, 4);
  if (crc32_of(bytes.data(), payload) != stored)
    throw CorruptCheckpointError("checkpoint: checksum mismatch, file is corrupt");
  detail::Reader r(bytes, payload);
  r.take(4);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported format version " + std::to_string(version));
  const auto count = r.get<std::uint64_t>();
  std::vector<CheckpointEntry> entries;
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const auto name_len = r.get<std::uint32_t>();
    const auto name = r.take(name_len);
    e.name.assign(name.begin(), name.end());
    const auto rank = r.get<std::uint32_t>();
    for (std::uint32_t d = 0; d < rank; ++d) e.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
    e.precision = r.get<std::uint8_t>();
    if (e.precision != 4 && e.precision != 8)
      throw FormatError("checkpoint: bad precision tag on '" + e.name + "'");
    e.data = r.take(shape_numel(e.shape) * e.precision);
    entries.push_back(std::move(e));
  }
  if (r.pos() != payload) throw FormatError("checkpoint: trailing bytes after the last tensor");
  return entries;
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw FormatError("cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

// ---------------------------------------------------------------------------
// Model state

template <typename T>
CheckpointEntry to_entry(const std::string& name, const Tensor<T>& t) {
  CheckpointEntry e;
  e.name = name;
  e.shape = t.shape();
  e.precision = sizeof(T);
  const auto v = t.values();
  e.data.resize(v.size() * sizeof(T));
  std::memcpy(e.data.data(), v.data(), e.data.size());
  return e;
}

template <typename T>
void from_entry(const CheckpointEntry& e, Tensor<T>& t) {
  if (e.shape != t.shape())
    throw DimensionError("checkpoint tensor '" + e.name + "' has shape " + shape_str(e.shape) +
                         ", model expects " + shape_str(t.shape()));
  if (e.precision != sizeof(T))
    throw FormatError("checkpoint tensor '" + e.name + "' stored with " + std::to_string(e.precision * 8) +
                      "-bit precision, model uses " + std::to_string(sizeof(T) * 8) + "-bit");
  std::memcpy(t.values_mut().data(), e.data.data(), e.data.size());
}

struct CheckpointMeta {
  std::uint64_t step = 0;   // next optimizer step
  std::uint64_t epoch = 0;  // completed epochs
};

/// Model tensors (online, predictors, target, buffers), optimizer velocity
/// and progress counters.
template <typename T>
std::vector<CheckpointEntry> model_entries(SiameseModel<T>& model, SgdMomentum<T>* opt, CheckpointMeta meta) {
  std::vector<CheckpointEntry> out;
  model.visit([&](const std::string& name, Tensor<T>& t, ParamRole) { out.push_back(to_entry(name, t)); });
  if (opt)
    for (auto& [name, v] : opt->velocity()) out.push_back(to_entry("velocity." + name, v));
  out.push_back(to_entry("meta.step", Tensor<double>({1}, static_cast<double>(meta.step))));
  out.push_back(to_entry("meta.epoch", Tensor<double>({1}, static_cast<double>(meta.epoch))));
  return out;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, SiameseModel<T>& model, SgdMomentum<T>* opt,
                     CheckpointMeta meta) {
  write_file_bytes(path, encode_checkpoint(model_entries(model, opt, meta)));
}

/// Restores every model tensor (and the optimizer velocity when `opt` is
/// given). Missing or misshapen tensors are errors naming the tensor.
template <typename T>
CheckpointMeta restore_checkpoint(const std::vector<CheckpointEntry>& entries, SiameseModel<T>& model,
                                  SgdMomentum<T>* opt) {
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  auto find = [&](const std::string& name) -> const CheckpointEntry& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint is missing tensor '" + name + "'");
    return *it->second;
  };
  std::size_t model_tensors = 0;
  model.visit([&](const std::string& name, Tensor<T>& t, ParamRole) {
    from_entry(find(name), t);
    ++model_tensors;
  });
  std::size_t stored_model = 0;
  for (const auto& e : entries)
    if (e.name.rfind("velocity.", 0) != 0 && e.name.rfind("meta.", 0) != 0) ++stored_model;
  if (stored_model != model_tensors)
    for (const auto& e : entries) {
      if (e.name.rfind("velocity.", 0) == 0 || e.name.rfind("meta.", 0) == 0) continue;
      bool known = false;
      model.visit([&](const std::string& name, Tensor<T>&, ParamRole) { known = known || name == e.name; });
      if (!known) throw FormatError("checkpoint tensor '" + e.name + "' has no counterpart in the model");
    }
  if (opt) {
    opt->velocity().clear();
    for (const auto& e : entries) {
      if (e.name.rfind("velocity.", 0) != 0) continue;
      Tensor<T> v(e.shape, T(0));
      from_entry(e, v);
      opt->velocity().emplace(e.name.substr(9), v);
    }
  }
  CheckpointMeta meta;
  Tensor<double> s({1}), ep({1});
  from_entry(find("meta.step"), s);
  from_entry(find("meta.epoch"), ep);
  meta.step = static_cast<std::uint64_t>(s.item());
  meta.epoch = static_cast<std::uint64_t>(ep.item());
  return meta;
}

template <typename T>
CheckpointMeta load_checkpoint(const std::filesystem::path& path, SiameseModel<T>& model, SgdMomentum<T>* opt) {
  return restore_checkpoint(decode_checkpoint(read_file_bytes(path)), model, opt);
}

}  // namespace mulan
