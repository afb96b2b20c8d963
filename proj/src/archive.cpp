#include "unihand/archive.hpp"

#include <cstring>
#include <fstream>
#include <numeric>

#include "unihand/error.hpp"

namespace unihand::io {
namespace {

constexpr char kMagic[4] = {'U', 'H', 'N', 'D'};

template <typename T>
void put(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T take(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw FormatError("archive truncated");
  return value;
}

std::string take_string(std::istream& in, std::uint64_t len) {
  if (len > (1ULL << 32)) throw FormatError("archive string too long");
  std::string s(static_cast<std::size_t>(len), '\0');
  in.read(s.data(), static_cast<std::streamsize>(len));
  if (!in) throw FormatError("archive truncated");
  return s;
}

int64_t element_count(const std::vector<int64_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), int64_t{1}, std::multiplies<>());
}

}  // namespace

bool Archive::contains(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return true;
  }
  return false;
}

const NamedArray& Archive::get(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return a;
  }
  throw FormatError("archive has no array '" + name + "'");
}

void Archive::add(std::string name, std::vector<int64_t> shape, std::vector<float> data) {
  if (element_count(shape) != static_cast<int64_t>(data.size())) {
    throw FormatError("array '" + name + "' payload does not match its shape");
  }
  arrays.push_back({std::move(name), std::move(shape), std::move(data)});
}

void Archive::add(std::string name, const torch::Tensor& tensor) {
  auto t = tensor.detach().to(torch::kFloat32).contiguous();
  std::vector<float> data(t.data_ptr<float>(), t.data_ptr<float>() + t.numel());
  add(std::move(name), t.sizes().vec(), std::move(data));
}

torch::Tensor Archive::tensor(const std::string& name) const {
  const auto& a = get(name);
  auto t = torch::empty(a.shape, torch::kFloat32);
  if (!a.data.empty()) std::memcpy(t.data_ptr<float>(), a.data.data(), a.data.size() * sizeof(float));
  return t;
}

void write_archive(const std::filesystem::path& path, const Archive& archive) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kFormatVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(archive.kind.size()));
  out.write(archive.kind.data(), static_cast<std::streamsize>(archive.kind.size()));
  const std::string meta = archive.metadata.dump();
  put<std::uint64_t>(out, meta.size());
  out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(archive.arrays.size()));
  for (const auto& a : archive.arrays) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(a.name.size()));
    out.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(a.shape.size()));
    for (auto d : a.shape) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    out.write(reinterpret_cast<const char*>(a.data.data()), static_cast<std::streamsize>(a.data.size() * sizeof(float)));
  }
  if (!out) throw FormatError("failed writing " + path.string());
}

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw FormatError(path.string() + " is not a UHND archive");
  const auto version = take<std::uint32_t>(in);
  if (version != kFormatVersion) throw FormatError("unsupported archive version " + std::to_string(version));

  Archive archive;
  archive.kind = take_string(in, take<std::uint32_t>(in));
  archive.metadata = nlohmann::json::parse(take_string(in, take<std::uint64_t>(in)));
  const auto count = take<std::uint32_t>(in);
  archive.arrays.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = take_string(in, take<std::uint32_t>(in));
    const auto ndim = take<std::uint32_t>(in);
    if (ndim > 16) throw FormatError("array '" + a.name + "' has too many dimensions");
    for (std::uint32_t d = 0; d < ndim; ++d) a.shape.push_back(static_cast<int64_t>(take<std::uint64_t>(in)));
    a.data.resize(static_cast<std::size_t>(element_count(a.shape)));
    in.read(reinterpret_cast<char*>(a.data.data()), static_cast<std::streamsize>(a.data.size() * sizeof(float)));
    if (!in) throw FormatError("archive truncated in array '" + a.name + "'");
    archive.arrays.push_back(std::move(a));
  }
  return archive;
}

std::uint64_t content_hash(const Archive& archive) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& a : archive.arrays) {
    mix(a.name.data(), a.name.size());
    mix(a.shape.data(), a.shape.size() * sizeof(int64_t));
    mix(a.data.data(), a.data.size() * sizeof(float));
  }
  return h;
}

}  // namespace unihand::io
