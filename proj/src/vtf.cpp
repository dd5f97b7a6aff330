#include "vitsig/vtf.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace vitsig::vtf {

namespace {

constexpr char kMagic[4] = {'V', 'T', 'F', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("vtf: truncated header");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

void put_f64(std::ostream& os, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

double get_f64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw std::runtime_error("vtf: truncated payload");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kMagic, 4);
  put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i) put_u32(os, static_cast<std::uint32_t>(t.dim(i)));
  for (std::size_t i = 0; i < t.size(); ++i) put_f64(os, t.data()[i]);
  if (!os) throw std::runtime_error("vtf: write failed");
}

Tensor read_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error("vtf: bad magic");
  const std::uint32_t rank = get_u32(is);
  if (rank == 0 || rank > 8) throw std::runtime_error("vtf: unsupported rank " + std::to_string(rank));
  Shape shape(rank);
  std::size_t numel = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const std::uint32_t e = get_u32(is);
    if (e == 0) throw std::runtime_error("vtf: zero extent");
    shape[i] = static_cast<int>(e);
    numel *= e;
  }
  std::vector<double> values(numel);
  for (std::size_t i = 0; i < numel; ++i) values[i] = get_f64(is);
  return Tensor(std::move(shape), std::move(values));
}

void save(const std::string& path, const Tensor& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("vtf: cannot open " + path + " for writing");
  write_tensor(f, t);
}

Tensor load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("vtf: cannot open " + path);
  try {
    return read_tensor(f);
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(std::string(e.what()) + " in " + path);
  }
}

}  // namespace vitsig::vtf
