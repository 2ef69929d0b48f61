#include "offrl/replay.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>

#include "offrl/errors.hpp"

namespace offrl {

void check_continuity(const Transition* prev, const Transition& next) {
  if (prev == nullptr) {
    if (next.step_in_episode != 0) throw EpisodeError("first transition must start an episode at step 0");
    return;
  }
  if (prev->ends_episode()) {
    if (next.step_in_episode != 0)
      throw EpisodeError("episode " + std::to_string(next.episode_id) + " does not start at step 0");
    if (next.episode_id == prev->episode_id)
      throw EpisodeError("episode id " + std::to_string(next.episode_id) + " reused after its end");
    return;
  }
  if (next.episode_id != prev->episode_id)
    throw EpisodeError("episode " + std::to_string(prev->episode_id) + " interrupted before its end");
  if (next.step_in_episode != prev->step_in_episode + 1)
    throw EpisodeError("step_in_episode jumps from " + std::to_string(prev->step_in_episode) + " to " +
                       std::to_string(next.step_in_episode));
}

void MiniBatch::push_back(const Transition& t) {
  if (obs_dim == 0) obs_dim = t.observation.size();
  observations.insert(observations.end(), t.observation.begin(), t.observation.end());
  next_observations.insert(next_observations.end(), t.next_observation.begin(), t.next_observation.end());
  actions.push_back(t.action);
  rewards.push_back(t.reward);
  ends.push_back(t.end);
}

void MiniBatch::validate(std::size_t num_actions) const {
  const std::size_t n = actions.size();
  if (n == 0) throw InvalidArgument("empty mini-batch");
  if (rewards.size() != n || ends.size() != n || observations.size() != n * obs_dim ||
      next_observations.size() != n * obs_dim)
    throw InvalidArgument("mini-batch arrays disagree on batch size");
  for (std::size_t i = 0; i < n; ++i) {
    if (actions[i] >= num_actions) throw InvalidArgument("mini-batch action out of range");
    if (!std::isfinite(rewards[i])) throw InvalidArgument("mini-batch reward is not finite");
  }
}

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw InvalidArgument("replay capacity must be positive");
  ring_.reserve(std::min<std::size_t>(capacity, 1 << 16));
}

void ReplayBuffer::append(Transition t) {
  check_continuity(has_last_ ? &last_ : nullptr, t);
  last_.episode_id = t.episode_id;
  last_.step_in_episode = t.step_in_episode;
  last_.end = t.end;
  has_last_ = true;
  if (ring_.size() < capacity_) {
    ring_.push_back(std::move(t));
  } else {
    ring_[cursor_] = std::move(t);
  }
  cursor_ = (cursor_ + 1) % capacity_;
  size_ = std::min(size_ + 1, capacity_);
}

const Transition& ReplayBuffer::operator[](std::size_t i) const {
  if (i >= size_) throw InvalidArgument("replay index out of range");
  const std::size_t oldest = size_ < capacity_ ? 0 : cursor_;
  return ring_[(oldest + i) % capacity_];
}

std::string make_descriptor(const EnvDescriptor& env, std::size_t num_states, std::string_view agent) {
  std::string d = "env=" + std::string(to_string(env.kind)) + ";size=" + std::to_string(env.size) +
                  ";seed=" + std::to_string(env.seed) + ";states=" + std::to_string(num_states);
  if (!agent.empty()) d += ";agent=" + std::string(agent);
  if (d.size() > kDescriptorBytes) throw InvalidArgument("dataset descriptor exceeds 64 bytes");
  return d;
}

std::string descriptor_field(std::string_view descriptor, std::string_view key) {
  std::size_t pos = 0;
  while (pos <= descriptor.size()) {
    const std::size_t end = std::min(descriptor.find(';', pos), descriptor.size());
    const std::string_view item = descriptor.substr(pos, end - pos);
    const std::size_t eq = item.find('=');
    if (eq != std::string_view::npos && item.substr(0, eq) == key) return std::string(item.substr(eq + 1));
    pos = end + 1;
  }
  return {};
}

EnvDescriptor descriptor_env(std::string_view descriptor) {
  EnvDescriptor env;
  const std::string kind = descriptor_field(descriptor, "env");
  env.kind = kind.empty() ? EnvKind::custom : parse_env_kind(kind);
  try {
    const std::string size = descriptor_field(descriptor, "size");
    const std::string seed = descriptor_field(descriptor, "seed");
    if (!size.empty()) env.size = std::stoull(size);
    if (!seed.empty()) env.seed = std::stoull(seed);
  } catch (const std::exception&) {
    throw FormatError("malformed dataset descriptor '" + std::string(descriptor) + "'");
  }
  return env;
}

bool LoggedDataset::has_partial_episode() const {
  return !transitions_.empty() && !transitions_.back().ends_episode();
}

std::span<const Transition> LoggedDataset::episode(std::size_t index) const {
  const EpisodeRange& r = episodes_.at(index);
  return std::span<const Transition>(transitions_).subspan(r.first, r.count);
}

std::size_t LoggedDataset::num_states() const {
  const std::string states = descriptor_field(header_.descriptor, "states");
  if (!states.empty()) return std::stoull(states);
  if (header_.encoding == ObservationEncoding::one_hot) return header_.obs_dim;
  throw FormatError("dataset descriptor does not record the state count");
}

ObservationCodec LoggedDataset::codec() const {
  return ObservationCodec(header_.encoding, descriptor_env(header_.descriptor), num_states());
}

DatasetWriter::DatasetWriter(DatasetHeader header) {
  if (header.obs_dim == 0 || header.num_actions == 0)
    throw InvalidArgument("dataset header needs positive observation dimension and action count");
  if (header.descriptor.size() > kDescriptorBytes) throw InvalidArgument("dataset descriptor exceeds 64 bytes");
  data_.header_ = std::move(header);
}

void DatasetWriter::append(Transition t) {
  const auto& h = data_.header_;
  if (t.observation.size() != h.obs_dim || t.next_observation.size() != h.obs_dim)
    throw EncodingMismatch("transition observation dimension does not match dataset header");
  if (t.action >= h.num_actions) throw InvalidArgument("transition action out of range");
  auto& all = data_.transitions_;
  check_continuity(all.empty() ? nullptr : &all.back(), t);
  if (t.step_in_episode == 0) {
    data_.episodes_.push_back({t.episode_id, all.size(), 0});
  }
  ++data_.episodes_.back().count;
  all.push_back(std::move(t));
}

LoggedDataset DatasetWriter::finalize() && { return std::move(data_); }

namespace {

class ByteWriter {
 public:
  template <typename T>
  void put(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, &value, sizeof(T));
    // Little-endian host assumed (x86-64/aarch64); static_assert below.
    bytes.insert(bytes.end(), raw, raw + sizeof(T));
  }
  void put_floats(const std::vector<float>& values) {
    for (float v : values) put(v);
  }
  std::vector<std::uint8_t> bytes;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    if (pos_ + sizeof(T) > bytes_.size()) throw FormatError("dataset file is truncated");
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }
  std::vector<float> get_floats(std::size_t n) {
    std::vector<float> out(n);
    for (auto& v : out) v = get<float>();
    return out;
  }
  std::size_t position() const { return pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

static_assert(std::endian::native == std::endian::little, "dataset format assumes a little-endian host");

constexpr char kMagic[8] = {'O', 'F', 'R', 'L', 'D', 'S', '0', '1'};
constexpr std::size_t kHeaderBytes = 8 + 4 + 1 + 4 + 4 + 8 + 8 + 8 + 8 + kDescriptorBytes;
constexpr std::size_t kIndexEntryBytes = 8 + 8 + 4;

std::size_t record_bytes(std::size_t dim) { return 4 * dim + 2 + 4 + 4 * dim + 1; }

}  // namespace

std::vector<std::uint8_t> encode_dataset(const LoggedDataset& dataset) {
  const auto& h = dataset.header();
  if (h.num_actions > 0xFFFF) throw FormatError("action count does not fit the u16 record field");
  ByteWriter w;
  w.bytes.reserve(kHeaderBytes + dataset.episode_count() * kIndexEntryBytes +
                  dataset.size() * record_bytes(h.obs_dim) + 4);
  w.bytes.insert(w.bytes.end(), std::begin(kMagic), std::end(kMagic));
  w.put<std::uint32_t>(h.version);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(h.encoding));
  w.put<std::uint32_t>(h.obs_dim);
  w.put<std::uint32_t>(h.num_actions);
  w.put<double>(h.discount);
  w.put<std::uint64_t>(dataset.transition_count());
  w.put<std::uint64_t>(dataset.episode_count());
  w.put<std::uint64_t>(h.seed);
  std::array<char, kDescriptorBytes> desc{};
  std::copy(h.descriptor.begin(), h.descriptor.end(), desc.begin());
  w.bytes.insert(w.bytes.end(), desc.begin(), desc.end());

  const std::size_t records_start = kHeaderBytes + dataset.episode_count() * kIndexEntryBytes;
  const std::size_t rec = record_bytes(h.obs_dim);
  for (const EpisodeRange& e : dataset.episodes()) {
    w.put<std::uint64_t>(e.episode_id);
    w.put<std::uint64_t>(records_start + e.first * rec);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(e.count));
  }
  for (const Transition& t : dataset.transitions()) {
    w.put_floats(t.observation);
    w.put<std::uint16_t>(static_cast<std::uint16_t>(t.action));
    w.put<float>(t.reward);
    w.put_floats(t.next_observation);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.end));
  }
  w.put<std::uint32_t>(crc32_of(w.bytes));
  return std::move(w.bytes);
}

LoggedDataset decode_dataset(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderBytes + 4) throw FormatError("dataset file is truncated");
  if (!std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin()))
    throw FormatError("not a dataset file (bad magic)");
  ByteReader r(bytes);
  for (int i = 0; i < 8; ++i) r.get<std::uint8_t>();

  DatasetHeader h;
  h.version = r.get<std::uint32_t>();
  if (h.version != kDatasetVersion)
    throw FormatError("unsupported dataset version " + std::to_string(h.version));
  const auto tag = r.get<std::uint8_t>();
  if (tag > 2) throw FormatError("unknown observation encoding tag");
  h.encoding = static_cast<ObservationEncoding>(tag);
  h.obs_dim = r.get<std::uint32_t>();
  h.num_actions = r.get<std::uint32_t>();
  h.discount = r.get<double>();
  const auto n_transitions = r.get<std::uint64_t>();
  const auto n_episodes = r.get<std::uint64_t>();
  h.seed = r.get<std::uint64_t>();
  std::array<char, kDescriptorBytes> desc{};
  for (auto& c : desc) c = static_cast<char>(r.get<std::uint8_t>());
  h.descriptor.assign(desc.data(), strnlen(desc.data(), kDescriptorBytes));

  // Size check before the checksum so truncation is reported as such.
  const std::size_t rec = record_bytes(h.obs_dim);
  if (h.obs_dim == 0 || n_episodes > bytes.size() / kIndexEntryBytes || n_transitions > bytes.size() / rec)
    throw FormatError("dataset header counts are inconsistent with the file size");
  const std::size_t expected = kHeaderBytes + n_episodes * kIndexEntryBytes + n_transitions * rec + 4;
  if (bytes.size() < expected) throw FormatError("dataset file is truncated");
  if (bytes.size() > expected) throw FormatError("dataset file has trailing bytes");

  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
  if (stored != crc32_of(bytes.first(bytes.size() - 4))) throw ChecksumMismatch("dataset checksum mismatch");

  const std::size_t records_start = kHeaderBytes + n_episodes * kIndexEntryBytes;
  std::vector<EpisodeRange> index(n_episodes);
  std::size_t next_first = 0;
  for (auto& e : index) {
    e.episode_id = r.get<std::uint64_t>();
    const auto offset = r.get<std::uint64_t>();
    e.count = r.get<std::uint32_t>();
    if (offset != records_start + next_first * rec || e.count == 0)
      throw FormatError("trajectory index is not contiguous");
    e.first = next_first;
    next_first += e.count;
  }
  if (next_first != n_transitions) throw FormatError("trajectory index does not cover every record");

  DatasetWriter writer(h);
  for (const EpisodeRange& e : index) {
    for (std::size_t i = 0; i < e.count; ++i) {
      Transition t;
      t.observation = r.get_floats(h.obs_dim);
      t.action = r.get<std::uint16_t>();
      t.reward = r.get<float>();
      t.next_observation = r.get_floats(h.obs_dim);
      const auto end = r.get<std::uint8_t>();
      if (end > 2) throw FormatError("invalid terminal byte");
      t.end = static_cast<EpisodeEnd>(end);
      t.episode_id = e.episode_id;
      t.step_in_episode = i;
      const bool last = i + 1 == e.count;
      if (t.ends_episode() && !last) throw FormatError("episode end flag before the last record");
      try {
        writer.append(std::move(t));
      } catch (const Error& err) {
        throw FormatError(std::string("invalid record: ") + err.what());
      }
    }
  }
  LoggedDataset out = std::move(writer).finalize();
  // Only the final episode may lack an end flag.
  for (std::size_t i = 0; i + 1 < out.episode_count(); ++i)
    if (!out.episode(i).back().ends_episode()) throw FormatError("incomplete episode before the end of the log");
  return out;
}

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - pos, 1u << 30));
    crc = crc32(crc, bytes.data() + pos, chunk);
    pos += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

void save_dataset(const LoggedDataset& dataset, const std::filesystem::path& path) {
  const auto bytes = encode_dataset(dataset);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

LoggedDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open dataset '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_dataset(bytes);
}

namespace {

LoggedDataset copy_episodes(const LoggedDataset& source, std::span<const std::size_t> episode_indices) {
  DatasetWriter writer(source.header());
  for (std::size_t e : episode_indices)
    for (const Transition& t : source.episode(e)) writer.append(t);
  return std::move(writer).finalize();
}

template <typename Store>
MiniBatch sample_uniform(const Store& store, std::size_t batch_size, Rng& rng) {
  if (store.empty()) throw InvalidArgument("cannot sample from an empty store");
  if (batch_size == 0) throw InvalidArgument("batch size must be positive");
  std::uniform_int_distribution<std::size_t> pick(0, store.size() - 1);
  MiniBatch batch;
  batch.obs_dim = store[0].observation.size();
  batch.observations.reserve(batch_size * batch.obs_dim);
  batch.next_observations.reserve(batch_size * batch.obs_dim);
  for (std::size_t i = 0; i < batch_size; ++i) batch.push_back(store[pick(rng)]);
  return batch;
}

}  // namespace

LoggedDataset subsample_trajectories(const LoggedDataset& dataset, double fraction, Rng& rng) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw InvalidArgument("fraction must lie in (0, 1]");
  if (dataset.empty()) throw InvalidArgument("cannot subsample an empty dataset");
  std::vector<std::size_t> order(dataset.complete_episode_count());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  const double target = fraction * static_cast<double>(dataset.transition_count());
  std::vector<std::size_t> chosen;
  std::size_t taken = 0;
  for (std::size_t e : order) {
    if (static_cast<double>(taken) >= target) break;
    chosen.push_back(e);
    taken += dataset.episodes()[e].count;
  }
  std::sort(chosen.begin(), chosen.end());
  return copy_episodes(dataset, chosen);
}

LoggedDataset take_prefix(const LoggedDataset& dataset, std::size_t first_k) {
  if (first_k == 0 || first_k > dataset.transition_count())
    throw InvalidArgument("prefix length " + std::to_string(first_k) + " outside [1, " +
                          std::to_string(dataset.transition_count()) + "]");
  std::vector<std::size_t> chosen;
  for (std::size_t e = 0; e < dataset.episode_count(); ++e) {
    chosen.push_back(e);
    const EpisodeRange& r = dataset.episodes()[e];
    if (r.first + r.count >= first_k) break;
  }
  return copy_episodes(dataset, chosen);
}

MiniBatch sample_batch(const ReplayBuffer& buffer, std::size_t batch_size, Rng& rng) {
  return sample_uniform(buffer, batch_size, rng);
}

MiniBatch sample_batch(const LoggedDataset& dataset, std::size_t batch_size, Rng& rng) {
  return sample_uniform(dataset, batch_size, rng);
}

MiniBatch full_batch(const LoggedDataset& dataset) {
  if (dataset.empty()) throw InvalidArgument("cannot batch an empty dataset");
  MiniBatch batch;
  batch.obs_dim = dataset.header().obs_dim;
  for (const Transition& t : dataset.transitions()) batch.push_back(t);
  return batch;
}

std::vector<double> episode_returns(const LoggedDataset& dataset) {
  std::vector<double> out;
  for (std::size_t e = 0; e < dataset.complete_episode_count(); ++e) {
    double total = 0.0;
    for (const Transition& t : dataset.episode(e)) total += t.reward;
    out.push_back(total);
  }
  return out;
}

double average_episode_return(const LoggedDataset& dataset) {
  const auto returns = episode_returns(dataset);
  if (returns.empty()) return std::nan("");
  return std::accumulate(returns.begin(), returns.end(), 0.0) / static_cast<double>(returns.size());
}

}  // namespace offrl
