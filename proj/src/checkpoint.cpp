#include "rhmlab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace rhmlab {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes little endian");

namespace {

constexpr char kMagic[8] = {'R', 'H', 'M', 'L', 'A', 'B', 'C', 'K'};

template <class T>
void write_pod(std::ostream& os, T x) {
  os.write(reinterpret_cast<const char*>(&x), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
  T x{};
  is.read(reinterpret_cast<char*>(&x), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return x;
}

void write_string(std::ostream& os, const std::string& s) {
  write_pod<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is) {
  const auto n = read_pod<std::uint64_t>(is);
  if (n > (std::uint64_t{1} << 34)) throw std::runtime_error("checkpoint: corrupt string length");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return s;
}

void write_key(std::ostream& os, const std::string& k) {
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(k.size()));
  os.write(k.data(), static_cast<std::streamsize>(k.size()));
}

std::string read_key(std::istream& is) {
  const auto n = read_pod<std::uint32_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return s;
}

}  // namespace

void Checkpoint::put_real(const std::string& key, double x) {
  Eigen::MatrixXd m(1, 1);
  m(0, 0) = x;
  matrices_[key] = std::move(m);
}

bool Checkpoint::has(const std::string& key) const {
  return matrices_.count(key) != 0 || texts_.count(key) != 0;
}

const Eigen::MatrixXd& Checkpoint::matrix(const std::string& key) const {
  auto it = matrices_.find(key);
  if (it == matrices_.end()) throw std::runtime_error("checkpoint: missing matrix '" + key + "'");
  return it->second;
}

Eigen::VectorXd Checkpoint::vector(const std::string& key) const {
  const auto& m = matrix(key);
  return Eigen::Map<const Eigen::VectorXd>(m.data(), m.size());
}

const std::string& Checkpoint::text(const std::string& key) const {
  auto it = texts_.find(key);
  if (it == texts_.end()) throw std::runtime_error("checkpoint: missing entry '" + key + "'");
  return it->second;
}

std::int64_t Checkpoint::integer(const std::string& key) const { return std::stoll(text(key)); }

double Checkpoint::real(const std::string& key) const { return matrix(key)(0, 0); }

void Checkpoint::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + tmp.string());
    os.write(kMagic, sizeof(kMagic));
    write_pod<std::uint32_t>(os, kVersion);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(matrices_.size()));
    for (const auto& [k, m] : matrices_) {
      write_key(os, k);
      write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(m.rows()));
      write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(m.cols()));
      os.write(reinterpret_cast<const char*>(m.data()),
               static_cast<std::streamsize>(m.size() * sizeof(double)));
    }
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(texts_.size()));
    for (const auto& [k, s] : texts_) {
      write_key(os, k);
      write_string(os, s);
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  }
  const auto version = read_pod<std::uint32_t>(is);
  if (version != kVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint ck;
  const auto n_mat = read_pod<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < n_mat; ++i) {
    auto key = read_key(is);
    const auto rows = read_pod<std::uint64_t>(is);
    const auto cols = read_pod<std::uint64_t>(is);
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint: truncated matrix '" + key + "'");
    ck.matrices_.emplace(std::move(key), std::move(m));
  }
  const auto n_txt = read_pod<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < n_txt; ++i) {
    auto key = read_key(is);
    ck.texts_.emplace(std::move(key), read_string(is));
  }
  return ck;
}

bool Checkpoint::operator==(const Checkpoint& other) const {
  if (texts_ != other.texts_ || matrices_.size() != other.matrices_.size()) return false;
  auto a = matrices_.begin();
  auto b = other.matrices_.begin();
  for (; a != matrices_.end(); ++a, ++b) {
    if (a->first != b->first || a->second.rows() != b->second.rows() ||
        a->second.cols() != b->second.cols()) {
      return false;
    }
    if (std::memcmp(a->second.data(), b->second.data(), a->second.size() * sizeof(double)) != 0) {
      return false;
    }
  }
  return true;
}

}  // namespace rhmlab
