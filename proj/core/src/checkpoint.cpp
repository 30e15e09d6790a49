#include <string>

#include "binary_io.hpp"
#include "unidistill/detector.hpp"
#include "unidistill/io.hpp"

namespace unidistill {

namespace {

constexpr std::string_view kMagic = "UDSTCKPT";
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kMaxRank = 8;
constexpr std::uint32_t kMaxName = 4096;

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  detail::ByteWriter w;
  w.raw(kMagic);
  w.u32(kVersion);
  w.u64(tensors.size());
  for (const auto& [name, t] : tensors) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.raw(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) w.u64(e);
    for (double v : t.data()) w.f64(v);
  }
  write_file_bytes(path, w.bytes());
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  detail::ByteReader r(bytes, "checkpoint '" + path.string() + "'");
  if (r.raw(kMagic.size()) != kMagic) r.fail("bad magic");
  if (const auto v = r.u32(); v != kVersion) r.fail("unsupported version " + std::to_string(v));
  const std::uint64_t count = r.u64();
  std::vector<NamedTensor> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = r.u32();
    if (name_len > kMaxName) r.fail("implausible name length");
    std::string name = r.raw(name_len);
    const std::uint32_t rank = r.u32();
    if (rank > kMaxRank) r.fail("implausible rank " + std::to_string(rank));
    Shape shape(rank);
    std::uint64_t numel = 1;
    for (auto& e : shape) {
      e = r.u64();
      if (e != 0 && numel > r.remaining() / 8 / e + 1) r.fail("extents exceed file size");
      numel *= e;
    }
    if (numel > r.remaining() / 8) r.fail("tensor '" + name + "' payload truncated");
    std::vector<double> data(numel);
    for (auto& v : data) v = r.f64();
    out.push_back({std::move(name), Tensor::from_data(std::move(shape), std::move(data), true)});
  }
  if (r.remaining() != 0) r.fail("trailing bytes");
  return out;
}

void save_detector(const std::filesystem::path& path, const DetectorParams& params) {
  save_checkpoint(path, params.entries());
}

DetectorParams load_detector(const std::filesystem::path& path) {
  return DetectorParams::from_entries(load_checkpoint(path));
}

}  // namespace unidistill
