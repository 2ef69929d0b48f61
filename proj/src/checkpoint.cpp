#include <algorithm>
#include <cstring>
#include <fstream>
#include <iterator>

#include "offrl/errors.hpp"
#include "offrl/qfunc.hpp"
#include "offrl/replay.hpp"

namespace offrl {

namespace {

constexpr char kMagic[8] = {'O', 'F', 'R', 'L', 'Q', 'E', '0', '1'};

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, &value, sizeof(T));
  out.insert(out.end(), raw, raw + sizeof(T));
}

template <typename T>
T get(std::span<const std::uint8_t> bytes, std::size_t& pos) {
  if (pos + sizeof(T) > bytes.size()) throw FormatError("checkpoint is truncated");
  T value;
  std::memcpy(&value, bytes.data() + pos, sizeof(T));
  pos += sizeof(T);
  return value;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const QEnsemble& q) {
  const NetworkSpec& s = q.spec();
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put<std::uint8_t>(out, static_cast<std::uint8_t>(s.architecture));
  put<std::uint8_t>(out, static_cast<std::uint8_t>(s.topology));
  put<std::uint8_t>(out, static_cast<std::uint8_t>(s.activation));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.heads));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.input_dim));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.num_actions));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.hidden.size()));
  for (std::size_t h : s.hidden) put<std::uint32_t>(out, static_cast<std::uint32_t>(h));
  const Eigen::VectorXd& p = q.parameters();
  put<std::uint64_t>(out, static_cast<std::uint64_t>(p.size()));
  for (Eigen::Index i = 0; i < p.size(); ++i) put<double>(out, p[i]);
  put<std::uint32_t>(out, crc32_of(out));
  return out;
}

QEnsemble decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof(kMagic) + 4 || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin()))
    throw FormatError("not a checkpoint file (bad magic)");
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
  if (stored != crc32_of(bytes.first(bytes.size() - 4))) throw ChecksumMismatch("checkpoint checksum mismatch");

  std::size_t pos = sizeof(kMagic);
  NetworkSpec s;
  const auto arch = get<std::uint8_t>(bytes, pos);
  const auto topo = get<std::uint8_t>(bytes, pos);
  const auto act = get<std::uint8_t>(bytes, pos);
  if (arch > 2 || topo > 1 || act > 1) throw FormatError("checkpoint architecture block is invalid");
  s.architecture = static_cast<Architecture>(arch);
  s.topology = static_cast<Topology>(topo);
  s.activation = static_cast<Activation>(act);
  s.heads = get<std::uint32_t>(bytes, pos);
  s.input_dim = get<std::uint32_t>(bytes, pos);
  s.num_actions = get<std::uint32_t>(bytes, pos);
  const auto layers = get<std::uint32_t>(bytes, pos);
  if (layers > 64) throw FormatError("checkpoint declares too many layers");
  for (std::uint32_t i = 0; i < layers; ++i) s.hidden.push_back(get<std::uint32_t>(bytes, pos));
  QEnsemble q(s);
  const auto n = get<std::uint64_t>(bytes, pos);
  if (n != static_cast<std::uint64_t>(q.parameters().size()))
    throw FormatError("checkpoint parameter count does not match its architecture");
  for (Eigen::Index i = 0; i < q.parameters().size(); ++i) q.parameters()[i] = get<double>(bytes, pos);
  if (pos + 4 != bytes.size()) throw FormatError("checkpoint has trailing bytes");
  return q;
}

void save_checkpoint(const QEnsemble& q, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(q);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

QEnsemble load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace offrl
