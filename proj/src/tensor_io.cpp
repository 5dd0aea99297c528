#include "conceptflow/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace conceptflow {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace binio {

void write_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }
void write_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }
void write_f64(std::ostream& out, double v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }

std::uint32_t read_u32(std::istream& in, const std::string& what) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw IoError(what + ": truncated (expected u32)");
  return v;
}

std::uint64_t read_u64(std::istream& in, const std::string& what) {
  std::uint64_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw IoError(what + ": truncated (expected u64)");
  return v;
}

void read_f64s(std::istream& in, double* dst, std::size_t n, const std::string& what) {
  if (!in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n * sizeof(double))))
    throw IoError(what + ": truncated payload, expected " + std::to_string(n * sizeof(double)) + " bytes");
}

}  // namespace binio

void write_tensor(std::ostream& out, const Tensor& t) {
  out.write("CFTN", 4);
  binio::write_u32(out, kTensorFileVersion);
  binio::write_u32(out, static_cast<std::uint32_t>(t.rank()));
  binio::write_u32(out, 0);
  for (Index d : t.shape()) binio::write_u32(out, static_cast<std::uint32_t>(d));
  out.write(reinterpret_cast<const char*>(t.raw()), static_cast<std::streamsize>(t.size() * sizeof(double)));
}

Tensor read_tensor(std::istream& in, const std::string& source) {
  char magic[4];
  if (!in.read(magic, 4)) throw IoError(source + ": truncated tensor header");
  if (std::memcmp(magic, "CFTN", 4) != 0) throw ParseError(source + ": bad tensor magic");
  const auto version = binio::read_u32(in, source);
  if (version != kTensorFileVersion)
    throw ParseError(source + ": unsupported tensor version " + std::to_string(version));
  const auto rank = binio::read_u32(in, source);
  binio::read_u32(in, source);
  if (rank == 0 || rank > 8) throw ParseError(source + ": implausible tensor rank " + std::to_string(rank));
  Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const auto d = binio::read_u32(in, source);
    if (d == 0) throw ParseError(source + ": zero-length tensor dimension");
    shape.push_back(static_cast<Index>(d));
  }
  Tensor t(shape);
  binio::read_f64s(in, t.raw(), static_cast<std::size_t>(t.size()), source);
  return t;
}

void save_tensor(const Tensor& t, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  write_tensor(out, t);
  if (!out) throw IoError("write failed for " + path.string());
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_tensor(in, path.string());
}

}  // namespace conceptflow
