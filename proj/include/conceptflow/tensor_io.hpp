#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

#include "conceptflow/tensor.hpp"

// CFTN container: a fixed 16-byte header
//   "CFTN" | u32 version | u32 rank | u32 reserved (0)
// followed by rank u32 dims and the row-major f64 payload. Little-endian.
namespace conceptflow {

inline constexpr std::uint32_t kTensorFileVersion = 1;

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in, const std::string& source = "<stream>");

void save_tensor(const Tensor& t, const std::filesystem::path& path);
Tensor load_tensor(const std::filesystem::path& path);

namespace binio {

void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
void write_f64(std::ostream& out, double v);
std::uint32_t read_u32(std::istream& in, const std::string& what);
std::uint64_t read_u64(std::istream& in, const std::string& what);
void read_f64s(std::istream& in, double* dst, std::size_t n, const std::string& what);

}  // namespace binio

}  // namespace conceptflow
