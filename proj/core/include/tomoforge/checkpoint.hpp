#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "tomoforge/tensor.hpp"

namespace tomoforge {

/// TNSR container, little-endian throughout:
///   "TNSR" | u8 version | u32 count |
///   count x (u32 name_len | name bytes | u8 dtype (0 f32, 1 f64) |
///            u32 rank | rank x u64 dims | raw data)
inline constexpr std::uint8_t kTnsrVersion = 1;

struct NamedTensor {
  std::string name;
  std::variant<Tensor<float>, Tensor<double>> tensor;

  bool is_double() const { return tensor.index() == 1; }
  /// Converting read access.
  template <typename T>
  Tensor<T> as() const;
};

void write_tnsr(std::ostream& os, const std::vector<NamedTensor>& entries);
std::vector<NamedTensor> read_tnsr(std::istream& is);
void write_tnsr(const std::filesystem::path& path, const std::vector<NamedTensor>& entries);
std::vector<NamedTensor> read_tnsr(const std::filesystem::path& path);

/// Text metadata is stored as an empty f32 tensor whose name is
/// "@ini\n" followed by the INI text.
NamedTensor make_ini_entry(const std::string& ini_text);
std::optional<std::string> find_ini_entry(const std::vector<NamedTensor>& entries);
/// Same scheme under another tag: "@<tag>\n" + text.
NamedTensor make_text_entry(const std::string& tag, const std::string& text);
std::optional<std::string> find_text_entry(const std::vector<NamedTensor>& entries, const std::string& tag);

const NamedTensor* find_tensor(const std::vector<NamedTensor>& entries, const std::string& name);

}  // namespace tomoforge
