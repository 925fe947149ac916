#include "tomoforge/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "tomoforge/error.hpp"

namespace tomoforge {

static_assert(std::endian::native == std::endian::little,
              "TNSR I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'T', 'N', 'S', 'R'};
constexpr std::string_view kIniPrefix = "@ini\n";

template <typename U>
void put(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U get(std::istream& is) {
  U v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(U))) throw IoError("TNSR: truncated stream");
  return v;
}

template <typename T>
void put_tensor(std::ostream& os, const Tensor<T>& t) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put<std::uint64_t>(os, d);
  os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(T)));
}

template <typename T>
Tensor<T> get_tensor(std::istream& is) {
  const auto rank = get<std::uint32_t>(is);
  if (rank > 16) throw IoError("TNSR: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = get<std::uint64_t>(is);
  Tensor<T> t(shape);
  if (t.numel() && !is.read(reinterpret_cast<char*>(t.data()),
                            static_cast<std::streamsize>(t.numel() * sizeof(T))))
    throw IoError("TNSR: truncated tensor data");
  return t;
}

}  // namespace

template <typename T>
Tensor<T> NamedTensor::as() const {
  return std::visit(
      [](const auto& t) {
        Tensor<T> out(t.shape());
        for (std::size_t i = 0; i < t.numel(); ++i) out[i] = static_cast<T>(t[i]);
        return out;
      },
      tensor);
}

template Tensor<float> NamedTensor::as<float>() const;
template Tensor<double> NamedTensor::as<double>() const;

void write_tnsr(std::ostream& os, const std::vector<NamedTensor>& entries) {
  os.write(kMagic, 4);
  put<std::uint8_t>(os, kTnsrVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put<std::uint8_t>(os, static_cast<std::uint8_t>(e.tensor.index()));
    std::visit([&os](const auto& t) { put_tensor(os, t); }, e.tensor);
  }
  if (!os) throw IoError("TNSR: write failed");
}

std::vector<NamedTensor> read_tnsr(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw IoError("TNSR: bad magic");
  const auto version = get<std::uint8_t>(is);
  if (version != kTnsrVersion) throw IoError("TNSR: unsupported version " + std::to_string(version));
  const auto count = get<std::uint32_t>(is);
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(is);
    std::string name(len, '\0');
    if (len && !is.read(name.data(), len)) throw IoError("TNSR: truncated name");
    const auto dtype = get<std::uint8_t>(is);
    if (dtype == 0) out.push_back({std::move(name), get_tensor<float>(is)});
    else if (dtype == 1) out.push_back({std::move(name), get_tensor<double>(is)});
    else throw IoError("TNSR: unknown dtype " + std::to_string(dtype));
  }
  return out;
}

void write_tnsr(const std::filesystem::path& path, const std::vector<NamedTensor>& entries) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_tnsr(os, entries);
}

std::vector<NamedTensor> read_tnsr(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_tnsr(is);
}

NamedTensor make_ini_entry(const std::string& ini_text) {
  return {std::string(kIniPrefix) + ini_text, Tensor<float>(Shape{0})};
}

std::optional<std::string> find_ini_entry(const std::vector<NamedTensor>& entries) {
  for (const auto& e : entries)
    if (e.name.starts_with(kIniPrefix)) return e.name.substr(kIniPrefix.size());
  return std::nullopt;
}

NamedTensor make_text_entry(const std::string& tag, const std::string& text) {
  return {"@" + tag + "\n" + text, Tensor<float>(Shape{0})};
}

std::optional<std::string> find_text_entry(const std::vector<NamedTensor>& entries, const std::string& tag) {
  const std::string prefix = "@" + tag + "\n";
  for (const auto& e : entries)
    if (e.name.starts_with(prefix)) return e.name.substr(prefix.size());
  return std::nullopt;
}

const NamedTensor* find_tensor(const std::vector<NamedTensor>& entries, const std::string& name) {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

}  // namespace tomoforge
