#include "camelu/cmlt.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "camelu/error.hpp"

namespace camelu::cmlt {

namespace {

constexpr char kMagic[4] = {'C', 'M', 'L', 'T'};

void put_uint(std::vector<std::uint8_t>& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xffU));
}

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, std::size_t pos = 0) : bytes_(bytes), pos_(pos) {}

  std::uint64_t uint(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }

  std::string string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  void need(std::size_t n) const {
    require(pos_ + n <= bytes_.size(), ErrorKind::io, "CMLT stream truncated");
  }

  std::size_t pos() const { return pos_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_;
};

void encode_into(std::vector<std::uint8_t>& out, const Tensor& t) {
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  out.push_back(kTensorVersion);
  out.push_back(kDtypeF64);
  require(t.rank() <= 255, ErrorKind::dimension, "CMLT supports rank <= 255");
  out.push_back(static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape()) put_uint(out, d, 8);
  for (double v : t.data()) put_uint(out, std::bit_cast<std::uint64_t>(v), 8);
}

void check_magic(Reader& r) {
  const std::string magic = r.string(4);
  require(std::memcmp(magic.data(), kMagic, 4) == 0, ErrorKind::io, "not a CMLT stream (bad magic)");
}

Tensor decode_from(Reader& r) {
  check_magic(r);
  const auto version = r.uint(1);
  require(version == kTensorVersion, ErrorKind::io,
          "expected a CMLT tensor record (version 1), got version " + std::to_string(version));
  const auto dtype = r.uint(1);
  require(dtype == kDtypeF64, ErrorKind::io, "unsupported CMLT dtype " + std::to_string(dtype));
  const auto rank = r.uint(1);
  Shape shape;
  for (std::uint64_t i = 0; i < rank; ++i) shape.push_back(r.uint(8));
  const std::size_t n = shape_size(shape);
  r.need(n * 8);
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) data[i] = std::bit_cast<double>(r.uint(8));
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace

std::vector<std::uint8_t> encode(const Tensor& t) {
  std::vector<std::uint8_t> out;
  out.reserve(7 + 8 * t.rank() + 8 * t.size());
  encode_into(out, t);
  return out;
}

Tensor decode(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  return decode_from(r);
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorKind::io, "write failed for " + path.string());
}

void write_tensor(const std::filesystem::path& path, const Tensor& t) { write_file(path, encode(t)); }

Tensor read_tensor(const std::filesystem::path& path) { return decode(read_file(path)); }

bool Bundle::contains(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return true;
  return false;
}

const Tensor& Bundle::get(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  fail(ErrorKind::lookup, "bundle has no tensor named '" + name + "'");
}

std::vector<std::uint8_t> encode_bundle(const Bundle& b) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  out.push_back(kBundleVersion);
  const std::string header = b.header.dump();
  put_uint(out, header.size(), 8);
  out.insert(out.end(), header.begin(), header.end());
  put_uint(out, b.tensors.size(), 4);
  for (const auto& [name, t] : b.tensors) {
    require(name.size() <= 0xffff, ErrorKind::contract, "bundle entry name too long");
    put_uint(out, name.size(), 2);
    out.insert(out.end(), name.begin(), name.end());
    encode_into(out, t);
  }
  return out;
}

Bundle decode_bundle(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  check_magic(r);
  const auto version = r.uint(1);
  require(version == kBundleVersion, ErrorKind::io,
          "expected a CMLT bundle (version 2), got version " + std::to_string(version));
  Bundle b;
  const auto header_len = r.uint(8);
  try {
    b.header = nlohmann::json::parse(r.string(header_len));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::io, std::string("bundle header is not valid JSON: ") + e.what());
  }
  const auto count = r.uint(4);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = r.uint(2);
    std::string name = r.string(name_len);
    b.add(std::move(name), decode_from(r));
  }
  return b;
}

void write_bundle(const std::filesystem::path& path, const Bundle& b) { write_file(path, encode_bundle(b)); }

Bundle read_bundle(const std::filesystem::path& path) { return decode_bundle(read_file(path)); }

}  // namespace camelu::cmlt
