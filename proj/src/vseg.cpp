#include "hybridscan/vseg.hpp"

#include <bit>
#include <fstream>
#include <json.hpp>

#include "hybridscan/errors.hpp"

namespace hybridscan {
namespace {

static_assert(std::endian::native == std::endian::little, "vseg I/O assumes a little-endian host");

using nlohmann::json;

void read_exact(std::ifstream& in, char* dst, std::size_t n, const std::filesystem::path& path) {
  in.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) throw DataError("truncated vseg file " + path.string());
}

}  // namespace

void write_vseg(const std::filesystem::path& path, const VolumeSample& s) {
  if (s.image.rank() != 4) throw UsageError("write_vseg: image must be [C,D,H,W]");
  const Index C = s.image.dim(0), D = s.image.dim(1), H = s.image.dim(2), W = s.image.dim(3);
  if (s.label.shape() != Shape{D, H, W}) throw UsageError("write_vseg: label shape does not match image");
  json header = {{"version", kVsegVersion},
                 {"dims", {D, H, W}},
                 {"channels", C},
                 {"spacing", {s.spacing[0], s.spacing[1], s.spacing[2]}},
                 {"dtype", "real32"},
                 {"label_dtype", "uint8"},
                 {"case_id", s.case_id}};
  const std::string text = header.dump();
  std::vector<std::uint8_t> labels(static_cast<std::size_t>(s.label.size()));
  for (Index i = 0; i < s.label.size(); ++i) {
    if (s.label[i] < 0 || s.label[i] > 255) throw DataError("write_vseg: label value does not fit uint8");
    labels[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(s.label[i]);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  const auto n = static_cast<std::uint32_t>(text.size());
  out.write(reinterpret_cast<const char*>(&n), sizeof(n));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(reinterpret_cast<const char*>(s.image.data()), static_cast<std::streamsize>(s.image.size() * sizeof(float)));
  out.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

VolumeSample read_vseg(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::uint32_t n = 0;
  read_exact(in, reinterpret_cast<char*>(&n), sizeof(n), path);
  std::string text(n, '\0');
  read_exact(in, text.data(), n, path);
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError("bad vseg header in " + path.string() + ": " + e.what());
  }
  VolumeSample s;
  Index C = 0, D = 0, H = 0, W = 0;
  try {
    if (header.at("version").get<int>() != kVsegVersion) throw DataError("unsupported vseg version in " + path.string());
    if (header.at("dtype").get<std::string>() != "real32" || header.at("label_dtype").get<std::string>() != "uint8") {
      throw DataError("unsupported vseg dtypes in " + path.string());
    }
    const auto dims = header.at("dims").get<std::vector<Index>>();
    const auto spacing = header.at("spacing").get<std::vector<double>>();
    if (dims.size() != 3 || spacing.size() != 3) throw DataError("vseg dims/spacing must have 3 entries");
    C = header.at("channels").get<Index>();
    D = dims[0];
    H = dims[1];
    W = dims[2];
    if (C < 1 || D < 1 || H < 1 || W < 1) throw DataError("non-positive extents in " + path.string());
    s.spacing = {spacing[0], spacing[1], spacing[2]};
    s.case_id = header.at("case_id").get<std::string>();
  } catch (const json::exception& e) {
    throw DataError("bad vseg header in " + path.string() + ": " + e.what());
  }
  s.image = Tensor<float>({C, D, H, W});
  read_exact(in, reinterpret_cast<char*>(s.image.data()), static_cast<std::size_t>(s.image.size()) * sizeof(float),
             path);
  std::vector<std::uint8_t> labels(static_cast<std::size_t>(D * H * W));
  read_exact(in, reinterpret_cast<char*>(labels.data()), labels.size(), path);
  if (in.peek() != std::char_traits<char>::eof()) throw DataError("trailing bytes in " + path.string());
  s.label = LabelVolume({D, H, W});
  for (Index i = 0; i < s.label.size(); ++i) s.label[i] = labels[static_cast<std::size_t>(i)];
  return s;
}

void write_dataset(const std::filesystem::path& dir, const std::vector<VolumeSample>& cases) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  json index = {{"version", kVsegVersion}, {"cases", json::array()}};
  for (const auto& c : cases) {
    if (c.case_id.empty()) throw UsageError("write_dataset: every case needs an id");
    write_vseg(dir / (c.case_id + ".vseg"), c);
    index["cases"].push_back(c.case_id);
  }
  std::ofstream out(dir / "dataset.json");
  if (!out) throw IoError("cannot write " + (dir / "dataset.json").string());
  out << index.dump(2) << "\n";
}

std::vector<VolumeSample> read_dataset(const std::filesystem::path& dir) {
  const auto index_path = dir / "dataset.json";
  std::ifstream in(index_path);
  if (!in) throw IoError("cannot open dataset index " + index_path.string());
  json index;
  try {
    in >> index;
  } catch (const json::exception& e) {
    throw DataError("bad dataset index " + index_path.string() + ": " + e.what());
  }
  std::vector<VolumeSample> cases;
  for (const auto& id : index.at("cases")) {
    VolumeSample s = read_vseg(dir / (id.get<std::string>() + ".vseg"));
    if (s.case_id != id.get<std::string>()) throw DataError("case id mismatch in " + s.case_id);
    cases.push_back(std::move(s));
  }
  return cases;
}

}  // namespace hybridscan
