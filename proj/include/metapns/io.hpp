#pragma once

// Binary containers.
//
// Dense array file (".arr"):
//   8 bytes  magic "MPNSARR1"
//   u32      dtype (0 = float32, 1 = float64, 2 = int64)
//   u32      ndim
//   i64[ndim] shape
//   payload  row-major, little-endian
//
// Mesh file (".mesh"):
//   8 bytes  magic "MPNSMESH"
//   u32      version (1)
//   i64      vertex count N
//   i64      face count M
//   u32      name length, then name bytes (UTF-8, no terminator)
//   f64[N*3] vertices, row-major
//   i64[M*3] faces, row-major

#include "metapns/common.hpp"
#include "metapns/geometry.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

namespace metapns::io {

static_assert(std::endian::native == std::endian::little, "binary containers assume a little-endian host");

namespace fs = std::filesystem;

enum class DType : std::uint32_t { F32 = 0, F64 = 1, I64 = 2 };

namespace detail {
template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T get(std::istream& is, const fs::path& path) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw Error(ErrorKind::Io, cat("truncated file ", path.string()));
  return v;
}
inline std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(ErrorKind::Io, cat("cannot write ", path.string()));
  return os;
}
inline std::ifstream open_in(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::MissingArtifact, cat("cannot open ", path.string()));
  return is;
}
inline void check_magic(std::istream& is, const char* magic, const fs::path& path) {
  char buf[8];
  is.read(buf, 8);
  if (!is || std::memcmp(buf, magic, 8) != 0) throw Error(ErrorKind::Io, cat(path.string(), ": bad magic"));
}
}  // namespace detail

/// Writes a 2-D matrix. float32 narrows; float64 is exact.
inline void write_array(const fs::path& path, const Mat& m, DType dtype = DType::F32) {
  auto os = detail::open_out(path);
  os.write("MPNSARR1", 8);
  detail::put(os, static_cast<std::uint32_t>(dtype));
  detail::put(os, std::uint32_t{2});
  detail::put(os, static_cast<std::int64_t>(m.rows()));
  detail::put(os, static_cast<std::int64_t>(m.cols()));
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) {
      if (dtype == DType::F32) detail::put(os, static_cast<float>(m(i, j)));
      else if (dtype == DType::F64) detail::put(os, m(i, j));
      else detail::put(os, static_cast<std::int64_t>(m(i, j)));
    }
  }
  if (!os) throw Error(ErrorKind::Io, cat("write failed: ", path.string()));
}

inline Mat read_array(const fs::path& path) {
  auto is = detail::open_in(path);
  detail::check_magic(is, "MPNSARR1", path);
  const auto dtype = static_cast<DType>(detail::get<std::uint32_t>(is, path));
  const auto ndim = detail::get<std::uint32_t>(is, path);
  if (ndim < 1 || ndim > 2) throw Error(ErrorKind::Io, cat(path.string(), ": unsupported ndim ", ndim));
  const auto rows = detail::get<std::int64_t>(is, path);
  const auto cols = ndim == 2 ? detail::get<std::int64_t>(is, path) : std::int64_t{1};
  if (rows < 0 || cols < 0) throw Error(ErrorKind::Io, cat(path.string(), ": negative shape"));
  Mat m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) {
      switch (dtype) {
        case DType::F32: m(i, j) = detail::get<float>(is, path); break;
        case DType::F64: m(i, j) = detail::get<double>(is, path); break;
        case DType::I64: m(i, j) = static_cast<double>(detail::get<std::int64_t>(is, path)); break;
        default: throw Error(ErrorKind::Io, cat(path.string(), ": unknown dtype"));
      }
    }
  }
  return m;
}

inline void write_mesh(const fs::path& path, const geometry::MeshGeometry& mesh) {
  auto os = detail::open_out(path);
  os.write("MPNSMESH", 8);
  detail::put(os, std::uint32_t{1});
  detail::put(os, static_cast<std::int64_t>(mesh.vertex_count()));
  detail::put(os, static_cast<std::int64_t>(mesh.face_count()));
  detail::put(os, static_cast<std::uint32_t>(mesh.name.size()));
  os.write(mesh.name.data(), static_cast<std::streamsize>(mesh.name.size()));
  for (Index i = 0; i < mesh.vertex_count(); ++i)
    for (int c = 0; c < 3; ++c) detail::put(os, mesh.vertices(i, c));
  for (Index f = 0; f < mesh.face_count(); ++f)
    for (int c = 0; c < 3; ++c) detail::put(os, mesh.faces(f, c));
  if (!os) throw Error(ErrorKind::Io, cat("write failed: ", path.string()));
}

inline geometry::MeshGeometry read_mesh(const fs::path& path) {
  auto is = detail::open_in(path);
  detail::check_magic(is, "MPNSMESH", path);
  const auto version = detail::get<std::uint32_t>(is, path);
  if (version != 1) throw Error(ErrorKind::Io, cat(path.string(), ": unsupported mesh version ", version));
  const auto n = detail::get<std::int64_t>(is, path);
  const auto m = detail::get<std::int64_t>(is, path);
  const auto name_len = detail::get<std::uint32_t>(is, path);
  if (n < 0 || m < 0) throw Error(ErrorKind::Io, cat(path.string(), ": negative counts"));
  geometry::MeshGeometry mesh;
  mesh.name.resize(name_len);
  is.read(mesh.name.data(), name_len);
  mesh.vertices.resize(n, 3);
  for (Index i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) mesh.vertices(i, c) = detail::get<double>(is, path);
  mesh.faces.resize(m, 3);
  for (Index f = 0; f < m; ++f)
    for (int c = 0; c < 3; ++c) mesh.faces(f, c) = detail::get<std::int64_t>(is, path);
  return mesh;
}

inline void write_text(const fs::path& path, const std::string& text) {
  auto os = detail::open_out(path);
  os << text;
  if (!os) throw Error(ErrorKind::Io, cat("write failed: ", path.string()));
}

/// Writes to a sibling temporary file, then renames over the destination.
inline void write_text_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  write_text(tmp, text);
  fs::rename(tmp, path);
}

inline std::string read_text(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorKind::MissingArtifact, cat("cannot open ", path.string()));
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace metapns::io
