// SPDX-License-Identifier: Apache-2.0
#include <cstring>
#include <limits>
#include <set>

#include "avsed/dataio.hpp"
#include "avsed/errors.hpp"
#include "avsed/kv.hpp"

namespace avsed {
namespace {

void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }

void put_u16(std::string& out, std::uint16_t v) {
  put_u8(out, v & 0xff);
  put_u8(out, v >> 8);
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) put_u8(out, (v >> (8 * i)) & 0xff);
}

class Reader {
 public:
  Reader(std::string_view bytes, const std::string& source)
      : bytes_(bytes), source_(source) {}

  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n)
      fail(std::string("truncated ") + what + " at offset " + std::to_string(pos_));
  }

  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = 0;
    for (int i = 0; i < 2; ++i)
      v |= static_cast<std::uint16_t>(static_cast<std::uint8_t>(bytes_[pos_ + i]))
           << (8 * i);
    pos_ += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes_[pos_ + i]))
           << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  [[noreturn]] void fail(const std::string& msg) const {
    throw ParseError((source_.empty() ? "" : source_ + ": ") + msg);
  }

 private:
  std::string_view bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_feature_container(const std::vector<NamedTensor>& records) {
  if (records.size() > std::numeric_limits<std::uint32_t>::max())
    throw DataError("too many records for a feature container");
  std::set<std::string> seen;
  std::size_t total = kFeatureMagic.size() + 4;
  for (const auto& r : records) {
    if (r.name.empty() || r.name.size() > 0xffff)
      throw DataError("record name length must be 1..65535, got " +
                      std::to_string(r.name.size()));
    for (unsigned char ch : r.name)
      if (ch < 0x20 || ch > 0x7e)
        throw DataError("record name '" + r.name + "' is not printable ASCII");
    if (!seen.insert(r.name).second)
      throw DataError("duplicate record name '" + r.name + "'");
    const auto& shape = r.tensor.shape();
    if (shape.empty() || shape.size() > 255)
      throw DataError("record '" + r.name + "' must have 1..255 dimensions");
    for (std::size_t e : shape)
      if (e > std::numeric_limits<std::uint32_t>::max())
        throw DataError("record '" + r.name + "' extent too large");
    total += 2 + r.name.size() + 1 + 4 * shape.size() + 4 * r.tensor.size();
  }

  std::string out;
  out.reserve(total);
  out.append(kFeatureMagic);
  put_u32(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    put_u16(out, static_cast<std::uint16_t>(r.name.size()));
    out.append(r.name);
    put_u8(out, static_cast<std::uint8_t>(r.tensor.ndim()));
    for (std::size_t e : r.tensor.shape()) put_u32(out, static_cast<std::uint32_t>(e));
    for (float v : r.tensor.data()) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      put_u32(out, bits);
    }
  }
  return out;
}

std::vector<NamedTensor> decode_feature_container(std::string_view bytes,
                                                  const std::string& source) {
  Reader in(bytes, source);
  if (bytes.size() < kFeatureMagic.size() ||
      bytes.substr(0, kFeatureMagic.size()) != kFeatureMagic)
    in.fail("bad magic at offset 0");
  in.take(kFeatureMagic.size(), "magic");
  const std::uint32_t count = in.u32("record count");
  std::vector<NamedTensor> records;
  std::set<std::string> seen;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::size_t start = in.offset();
    const std::uint16_t name_len = in.u16("name length");
    if (name_len == 0) in.fail("empty record name at offset " + std::to_string(start));
    std::string name(in.take(name_len, "record name"));
    if (!seen.insert(name).second)
      in.fail("duplicate record name '" + name + "' at offset " +
              std::to_string(start));
    const std::size_t ndim_at = in.offset();
    const std::uint8_t ndim = in.u8("rank");
    if (ndim == 0)
      in.fail("zero-rank record '" + name + "' at offset " + std::to_string(ndim_at));
    Shape shape;
    std::size_t numel = 1;
    for (std::uint8_t d = 0; d < ndim; ++d) {
      const std::size_t at = in.offset();
      const std::uint32_t e = in.u32("extent");
      if (e == 0)
        in.fail("zero extent in record '" + name + "' at offset " + std::to_string(at));
      shape.push_back(e);
      if (numel > (std::numeric_limits<std::size_t>::max() / 4) / e)
        in.fail("record '" + name + "' too large at offset " + std::to_string(at));
      numel *= e;
    }
    in.need(4 * numel, "payload");
    std::vector<float> data(numel);
    for (std::size_t i = 0; i < numel; ++i) {
      const std::uint32_t bits = in.u32("payload");
      std::memcpy(&data[i], &bits, 4);
    }
    records.push_back({std::move(name), Tensor<float>(std::move(shape), std::move(data))});
  }
  if (!in.done())
    in.fail("trailing bytes at offset " + std::to_string(in.offset()));
  return records;
}

void write_feature_file(const std::filesystem::path& path,
                        const std::vector<NamedTensor>& records) {
  write_text_file(path, encode_feature_container(records));
}

std::vector<NamedTensor> read_feature_file(const std::filesystem::path& path) {
  return decode_feature_container(read_text_file(path), path.string());
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace avsed
