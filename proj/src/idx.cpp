#include <fstream>
#include <iterator>

#include "conceptflow/dataset.hpp"
#include "conceptflow/errors.hpp"

namespace conceptflow {

namespace {

std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset) {
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void require_bytes(std::span<const std::uint8_t> bytes, std::size_t expected, const std::string& source,
                   const char* what) {
  if (bytes.size() < expected)
    throw ParseError(source + ": truncated " + what + ", expected " + std::to_string(expected) + " bytes, got " +
                     std::to_string(bytes.size()));
}

std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

IdxImages parse_idx_images(std::span<const std::uint8_t> bytes, const std::string& source) {
  require_bytes(bytes, 16, source, "IDX image header");
  const std::uint32_t magic = read_be32(bytes, 0);
  if (magic != kIdxImagesMagic) throw ParseError(source + ": bad IDX image magic " + std::to_string(magic));
  const std::uint32_t count = read_be32(bytes, 4);
  const std::uint32_t rows = read_be32(bytes, 8);
  const std::uint32_t cols = read_be32(bytes, 12);
  if (rows == 0 || cols == 0 || rows > 4096 || cols > 4096)
    throw ParseError(source + ": implausible IDX image size " + std::to_string(rows) + "x" + std::to_string(cols));
  const std::size_t pixels = std::size_t{rows} * cols;
  require_bytes(bytes, 16 + std::size_t{count} * pixels, source, "IDX image payload");
  IdxImages out;
  out.rows = rows;
  out.cols = cols;
  out.images.reserve(count);
  std::size_t off = 16;
  for (std::uint32_t n = 0; n < count; ++n) {
    Tensor img({1, static_cast<Index>(rows), static_cast<Index>(cols)});
    for (std::size_t p = 0; p < pixels; ++p) img.raw()[p] = bytes[off++] / 255.0;
    out.images.push_back(std::move(img));
  }
  return out;
}

std::vector<int> parse_idx_labels(std::span<const std::uint8_t> bytes, const std::string& source) {
  require_bytes(bytes, 8, source, "IDX label header");
  const std::uint32_t magic = read_be32(bytes, 0);
  if (magic != kIdxLabelsMagic) throw ParseError(source + ": bad IDX label magic " + std::to_string(magic));
  const std::uint32_t count = read_be32(bytes, 4);
  require_bytes(bytes, 8 + std::size_t{count}, source, "IDX label payload");
  return {bytes.begin() + 8, bytes.begin() + 8 + count};
}

IdxData load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto image_bytes = slurp(images_path);
  const auto label_bytes = slurp(labels_path);
  IdxData data;
  data.images = parse_idx_images(image_bytes, images_path.string()).images;
  data.labels = parse_idx_labels(label_bytes, labels_path.string());
  if (data.images.size() != data.labels.size())
    throw ParseError("IDX count mismatch: " + std::to_string(data.images.size()) + " images vs " +
                     std::to_string(data.labels.size()) + " labels");
  return data;
}

}  // namespace conceptflow
