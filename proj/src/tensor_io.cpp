#include "fgaseg/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace fgaseg {

namespace {

constexpr std::array<char, 4> kMagic{'F', 'G', 'T', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b.data(), 4);
}

std::uint32_t get_u32(std::istream& is) {
  std::array<unsigned char, 4> b{};
  is.read(reinterpret_cast<char*>(b.data()), 4);
  if (!is) throw InputError("FGT1: truncated header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kMagic.data(), 4);
  put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put_u32(os, static_cast<std::uint32_t>(d));
  for (float f : t.to_floats()) put_u32(os, std::bit_cast<std::uint32_t>(f));
}

Tensor read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  is.read(magic.data(), 4);
  if (!is || magic != kMagic) throw InputError("FGT1: bad magic");
  const std::uint32_t rank = get_u32(is);
  if (rank == 0 || rank > 16) throw InputError("FGT1: unsupported rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) {
    d = get_u32(is);
    if (d == 0) throw InputError("FGT1: zero-sized dimension");
  }
  std::vector<float> data(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& f : data) f = std::bit_cast<float>(get_u32(is));
  return Tensor::from_floats(shape, std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open " + path.string());
  return read_tensor(is);
}

void save_checkpoint(const std::filesystem::path& dir, const std::vector<NamedTensor>& tensors) {
  std::filesystem::create_directories(dir);
  std::ofstream data(dir / "params.fgt", std::ios::binary);
  std::ofstream manifest(dir / "manifest.txt");
  if (!data || !manifest) throw InputError("cannot write checkpoint to " + dir.string());
  for (const auto& nt : tensors) {
    const auto offset = static_cast<long long>(data.tellp());
    write_tensor(data, nt.tensor);
    manifest << nt.name << '\t' << offset << '\t' << shape_str(nt.tensor.shape()) << '\n';
  }
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream data(dir / "params.fgt", std::ios::binary);
  std::ifstream manifest(dir / "manifest.txt");
  if (!data || !manifest) throw InputError("no checkpoint in " + dir.string());
  std::vector<NamedTensor> out;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name;
    long long offset = 0;
    if (!std::getline(ls, name, '\t') || !(ls >> offset)) throw InputError("malformed manifest line: " + line);
    data.seekg(offset);
    out.push_back({name, read_tensor(data)});
  }
  return out;
}

}  // namespace fgaseg
