#pragma once

// Binary tensor blobs:
//   bytes 0..3   magic "TNSR"
//   bytes 4..7   u32 precision flag (0 = single, 1 = double)
//   bytes 8..11  u32 rank
//   bytes 12..15 u32 reserved (0)
//   rank × u32 dimension sizes
//   numel × IEEE-754 values (4 or 8 bytes each)
// Every integer and value is little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <variant>

#include "fido/errors.hpp"
#include "fido/tensor.hpp"

namespace fido {

static_assert(std::endian::native == std::endian::little, "tensor blobs assume a little-endian host");

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

namespace io {

inline void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

inline std::uint32_t read_u32(std::istream& is, const char* what) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 4)) throw FormatError(std::string("truncated input while reading ") + what);
  return v;
}

inline void expect_magic(std::istream& is, const char (&magic)[5], const char* what) {
  char buf[4];
  if (!is.read(buf, 4)) throw FormatError(std::string("truncated input: missing ") + what + " magic");
  if (std::memcmp(buf, magic, 4) != 0) {
    throw FormatError(std::string("bad magic bytes: expected \"") + magic + "\" at start of " + what);
  }
}

}  // namespace io

template <typename Scalar>
void write_tensor(std::ostream& os, const Tensor<Scalar>& t) {
  os.write("TNSR", 4);
  io::write_u32(os, precision_of<Scalar>() == Precision::Single ? 0u : 1u);
  io::write_u32(os, std::uint32_t(t.rank()));
  io::write_u32(os, 0u);
  for (Index d : t.shape()) io::write_u32(os, std::uint32_t(d));
  os.write(reinterpret_cast<const char*>(t.raw()), std::streamsize(sizeof(Scalar) * std::size_t(t.size())));
  if (!os) throw std::runtime_error("failed to write tensor");
}

inline AnyTensor read_tensor(std::istream& is) {
  io::expect_magic(is, "TNSR", "tensor blob");
  const std::uint32_t flag = io::read_u32(is, "precision flag");
  const std::uint32_t rank = io::read_u32(is, "rank");
  io::read_u32(is, "reserved word");
  if (flag > 1) throw FormatError("unknown tensor precision flag " + std::to_string(flag));
  if (rank > 8) throw FormatError("implausible tensor rank " + std::to_string(rank));
  Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(Index(io::read_u32(is, "dimension")));
  auto read_payload = [&](auto tag) -> AnyTensor {
    using Scalar = decltype(tag);
    Tensor<Scalar> t(shape);
    const auto bytes = std::streamsize(sizeof(Scalar) * std::size_t(t.size()));
    if (!is.read(reinterpret_cast<char*>(t.raw()), bytes)) {
      throw FormatError("truncated tensor payload: expected " + std::to_string(bytes) + " bytes for shape " +
                        shape_string(shape));
    }
    return t;
  };
  return flag == 0 ? read_payload(float{}) : read_payload(double{});
}

/// Reads a blob of either precision and converts it to Scalar.
template <typename Scalar>
Tensor<Scalar> read_tensor_as(std::istream& is) {
  return std::visit([](const auto& t) { return t.template cast<Scalar>(); }, read_tensor(is));
}

template <typename Scalar>
void save_tensor(const std::string& path, const Tensor<Scalar>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_tensor(os, t);
}

inline AnyTensor load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_tensor(is);
}

}  // namespace fido
