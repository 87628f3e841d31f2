#include "cotd/tensor_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>

#include "cotd/errors.hpp"
#include "cotd/util.hpp"

namespace cotd {

static_assert(std::endian::native == std::endian::little, "tensor files assume little-endian");

namespace {

constexpr char kMagic[4] = {'C', 'T', 'D', 'B'};
constexpr std::uint32_t kFormat = 1;

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw CheckpointError("truncated tensor file");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

void write_tensors(const std::filesystem::path& path, const NamedTensors& tensors) {
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kFormat);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, m] : tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
    out.append(reinterpret_cast<const char*>(m.data()), sizeof(double) * m.size());
  }
  write_file_atomic(path, out);
}

NamedTensors read_tensors(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw CheckpointError("missing tensor file " + path.string());
  const auto in = read_file(path);
  if (in.size() < 4 || std::memcmp(in.data(), kMagic, 4) != 0)
    throw CheckpointError(path.string() + " is not a tensor file");
  std::size_t pos = 4;
  if (take<std::uint32_t>(in, pos) != kFormat)
    throw CheckpointError("unsupported tensor file version in " + path.string());
  const auto count = take<std::uint32_t>(in, pos);
  NamedTensors out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = take<std::uint32_t>(in, pos);
    if (pos + len > in.size()) throw CheckpointError("truncated tensor file");
    std::string name = in.substr(pos, len);
    pos += len;
    const auto rows = take<std::uint64_t>(in, pos);
    const auto cols = take<std::uint64_t>(in, pos);
    const auto bytes = sizeof(double) * rows * cols;
    if (pos + bytes > in.size()) throw CheckpointError("truncated tensor file");
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    std::memcpy(m.data(), in.data() + pos, bytes);
    pos += bytes;
    out.emplace_back(std::move(name), std::move(m));
  }
  return out;
}

const Eigen::MatrixXd& tensor_at(const NamedTensors& tensors, const std::string& name,
                                 Eigen::Index rows, Eigen::Index cols) {
  for (const auto& [n, m] : tensors) {
    if (n != name) continue;
    if (m.rows() != rows || m.cols() != cols)
      throw CheckpointError("tensor '" + name + "' has shape " + std::to_string(m.rows()) + "x" +
                            std::to_string(m.cols()) + ", expected " + std::to_string(rows) + "x" +
                            std::to_string(cols));
    return m;
  }
  throw CheckpointError("missing tensor '" + name + "'");
}

}  // namespace cotd
