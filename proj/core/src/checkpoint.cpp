#include "flowibr/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <type_traits>

namespace flowibr {

namespace {

constexpr std::array<char, 8> kMagic = {'F', 'I', 'B', 'R', 'C', 'K', 'P', 'T'};


template <typename T>
void put(std::ostream& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.write(bytes.data(), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  std::array<char, sizeof(T)> bytes;
  if (!in.read(bytes.data(), sizeof(T))) throw std::runtime_error("checkpoint: truncated file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T v;
  std::memcpy(&v, bytes.data(), sizeof(T));
  return v;
}

void put_matrix(std::ostream& out, const diff::Matrix& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) put<double>(out, m.data()[i]);
}

void get_matrix(std::istream& in, diff::Matrix& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = get<double>(in);
}

void put_store(std::ostream& out, const diff::ParamStore& store) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(store.size()));
  for (std::size_t k = 0; k < store.size(); ++k) {
    const auto& e = store[k];
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put<std::int64_t>(out, e.value.rows());
    put<std::int64_t>(out, e.value.cols());
    put_matrix(out, e.value);
  }
}

void get_store(std::istream& in, diff::ParamStore& store) {
  const auto count = get<std::uint32_t>(in);
  if (count != store.size()) throw std::runtime_error("checkpoint: parameter count mismatch");
  for (std::size_t k = 0; k < store.size(); ++k) {
    auto& e = store[k];
    const auto len = get<std::uint32_t>(in);
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw std::runtime_error("checkpoint: truncated file");
    const auto rows = get<std::int64_t>(in);
    const auto cols = get<std::int64_t>(in);
    if (name != e.name || rows != e.value.rows() || cols != e.value.cols()) {
      throw std::runtime_error("checkpoint: parameter '" + name + "' does not match the model");
    }
    get_matrix(in, e.value);
  }
}

void put_adam(std::ostream& out, const diff::ParamStore& store) {
  put<std::uint64_t>(out, store.step());
  for (std::size_t k = 0; k < store.size(); ++k) {
    put_matrix(out, store[k].adam_m);
    put_matrix(out, store[k].adam_v);
  }
}

void get_adam(std::istream& in, diff::ParamStore& store) {
  store.set_step(get<std::uint64_t>(in));
  for (std::size_t k = 0; k < store.size(); ++k) {
    auto& e = store[k];
    e.adam_m.resize(e.value.rows(), e.value.cols());
    e.adam_v.resize(e.value.rows(), e.value.cols());
    get_matrix(in, e.adam_m);
    get_matrix(in, e.adam_v);
    e.grad.setZero(e.value.rows(), e.value.cols());
  }
}

CheckpointHeader get_header(std::istream& in) {
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) {
    throw std::runtime_error("checkpoint: bad magic");
  }
  CheckpointHeader h;
  h.version = get<std::uint32_t>(in);
  if (h.version != CheckpointHeader::kVersion) throw std::runtime_error("checkpoint: unsupported version");
  h.depth = get<std::int32_t>(in);
  h.width = get<std::int32_t>(in);
  h.input_size = get<std::int32_t>(in);
  h.ibr_hidden = get<std::int32_t>(in);
  h.frequencies = get<std::int32_t>(in);
  h.num_frames = get<std::int32_t>(in);
  h.seed = get<std::uint64_t>(in);
  h.step = get<std::int64_t>(in);
  return h;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const CheckpointHeader& header,
                     const diff::ParamStore& flow, const diff::ParamStore& backbone) {
  // Write to a sibling file first so a crash never leaves a torn checkpoint.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint: cannot open " + tmp.string());
    out.write(kMagic.data(), kMagic.size());
    put<std::uint32_t>(out, header.version);
    put<std::int32_t>(out, header.depth);
    put<std::int32_t>(out, header.width);
    put<std::int32_t>(out, header.input_size);
    put<std::int32_t>(out, header.ibr_hidden);
    put<std::int32_t>(out, header.frequencies);
    put<std::int32_t>(out, header.num_frames);
    put<std::uint64_t>(out, header.seed);
    put<std::int64_t>(out, header.step);
    put_store(out, flow);
    put_store(out, backbone);
    put_adam(out, flow);
    put_adam(out, backbone);
    if (!out) throw std::runtime_error("checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
  return get_header(in);
}

CheckpointHeader load_checkpoint(const std::filesystem::path& path, diff::ParamStore& flow,
                                 diff::ParamStore& backbone) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
  const CheckpointHeader h = get_header(in);
  get_store(in, flow);
  get_store(in, backbone);
  get_adam(in, flow);
  get_adam(in, backbone);
  if (in.peek() != std::char_traits<char>::eof()) throw std::runtime_error("checkpoint: trailing bytes");
  return h;
}

}  // namespace flowibr
