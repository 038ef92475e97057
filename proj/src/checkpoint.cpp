#include "hybridscan/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "hybridscan/errors.hpp"

namespace hybridscan {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[4] = {'H', 'S', 'C', 'K'};

template <typename Scalar>
constexpr std::uint8_t dtype_code() {
  return std::is_same_v<Scalar, float> ? 0 : 1;
}

const char* dtype_name(std::uint8_t code) { return code == 0 ? "real32" : code == 1 ? "real64" : "unknown"; }

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

class Reader {
 public:
  Reader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw IoError("cannot open checkpoint " + path.string());
  }

  template <typename T>
  T get() {
    T v{};
    bytes(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
  }

  void bytes(char* dst, std::size_t n) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw DataError("truncated checkpoint " + path_.string());
  }

  std::string string(std::uint32_t n) {
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }

  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

  std::string header() {
    char magic[4];
    bytes(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw DataError(path_.string() + " is not a checkpoint (bad magic)");
    const auto version = get<std::uint8_t>();
    if (version != kCheckpointVersion) {
      throw DataError("unsupported checkpoint version " + std::to_string(version) + " in " + path_.string());
    }
    return string(get<std::uint32_t>());
  }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
};

}  // namespace

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const ParameterSet<Scalar>& params,
                     const std::string& metadata) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    out.write(kMagic, 4);
    put<std::uint8_t>(out, kCheckpointVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(metadata.size()));
    out.write(metadata.data(), static_cast<std::streamsize>(metadata.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(params.entries().size()));
    for (const auto& p : params.entries()) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
      out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
      put<std::uint8_t>(out, dtype_code<Scalar>());
      const Tensor<Scalar>& t = p.var.value();
      put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
      for (Index d : t.shape()) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
      out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(Scalar)));
    }
    if (!out) throw IoError("failed writing checkpoint " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

template <typename Scalar>
std::string load_checkpoint(const std::filesystem::path& path, ParameterSet<Scalar>& params) {
  Reader r(path);
  std::string metadata = r.header();
  const auto count = r.get<std::uint32_t>();
  std::map<std::string, Tensor<Scalar>> loaded;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.string(r.get<std::uint32_t>());
    const auto dtype = r.get<std::uint8_t>();
    if (dtype != dtype_code<Scalar>()) {
      throw DataError("checkpoint entry " + name + " has dtype " + dtype_name(dtype) + ", expected " +
                      dtype_name(dtype_code<Scalar>()));
    }
    const auto rank = r.get<std::uint8_t>();
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<Index>(r.get<std::uint64_t>());
    Tensor<Scalar> t(shape);
    r.bytes(reinterpret_cast<char*>(t.data()), static_cast<std::size_t>(t.size()) * sizeof(Scalar));
    if (!loaded.emplace(name, std::move(t)).second) throw DataError("duplicate checkpoint entry " + name);
  }
  if (!r.at_end()) throw DataError("trailing bytes in checkpoint " + path.string());
  for (const auto& p : params.entries()) {
    auto it = loaded.find(p.name);
    if (it == loaded.end()) throw DataError("checkpoint " + path.string() + " lacks parameter " + p.name);
    if (it->second.shape() != p.var.shape()) {
      throw DataError("checkpoint parameter " + p.name + " has shape " + shape_str(it->second.shape()) +
                      ", model expects " + shape_str(p.var.shape()));
    }
  }
  if (loaded.size() != params.entries().size()) {
    for (const auto& [name, t] : loaded)
      if (!params.contains(name)) throw DataError("checkpoint has unknown parameter " + name);
  }
  for (const auto& p : params.entries()) {
    Var<Scalar> v = p.var;
    v.mutable_value() = std::move(loaded.at(p.name));
  }
  return metadata;
}

std::string read_checkpoint_metadata(const std::filesystem::path& path) { return Reader(path).header(); }

template void save_checkpoint(const std::filesystem::path&, const ParameterSet<float>&, const std::string&);
template void save_checkpoint(const std::filesystem::path&, const ParameterSet<double>&, const std::string&);
template std::string load_checkpoint(const std::filesystem::path&, ParameterSet<float>&);
template std::string load_checkpoint(const std::filesystem::path&, ParameterSet<double>&);

}  // namespace hybridscan
