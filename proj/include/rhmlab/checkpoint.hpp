#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include <Eigen/Dense>

namespace rhmlab {

/// Named-entry container for weights, optimizer state and RNG state.
///
/// Binary layout (little endian): magic "RHMLABCK", u32 version, u32 matrix
/// count, then per matrix {u32 key length, key, u64 rows, u64 cols, rows*cols
/// f64 column-major}, then u32 text count and per text {u32 key length, key,
/// u64 length, bytes}. Entries are written in key order, so equal contents
/// give equal files.
class Checkpoint {
 public:
  static constexpr std::uint32_t kVersion = 1;

  void put(const std::string& key, const Eigen::MatrixXd& m) { matrices_[key] = m; }
  void put(const std::string& key, const Eigen::VectorXd& v) { matrices_[key] = v; }
  void put_text(const std::string& key, const std::string& s) { texts_[key] = s; }
  void put_int(const std::string& key, std::int64_t x) { texts_[key] = std::to_string(x); }
  void put_real(const std::string& key, double x);

  bool has(const std::string& key) const;
  const Eigen::MatrixXd& matrix(const std::string& key) const;
  Eigen::VectorXd vector(const std::string& key) const;
  const std::string& text(const std::string& key) const;
  std::int64_t integer(const std::string& key) const;
  double real(const std::string& key) const;

  /// Writes to a temporary file and renames it into place.
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

  bool operator==(const Checkpoint& other) const;

 private:
  std::map<std::string, Eigen::MatrixXd> matrices_;
  std::map<std::string, std::string> texts_;
};

}  // namespace rhmlab
