#include "afft/model/checkpoint.hpp"

#include <fstream>

#include "afft/data/binary_io.hpp"

namespace afft::model {

using data::ByteReader;
using data::ByteWriter;
using data::FormatError;

namespace {

std::string read_header(ByteReader& r) {
  std::string magic;
  try {
    magic = r.get_bytes(4);
  } catch (const FormatError&) {
    throw FormatError(FormatError::Kind::kBadMagic, "bad magic: file too short for a checkpoint");
  }
  if (magic != std::string(kCheckpointMagic, 4)) throw FormatError(FormatError::Kind::kBadMagic, "bad magic: not an AFCK checkpoint");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError(FormatError::Kind::kVersionMismatch, "version mismatch: checkpoint v" + std::to_string(version) +
                                                               ", reader supports v" + std::to_string(kCheckpointVersion));
  }
  const auto len = r.get<std::uint32_t>();
  if (len > (1u << 24)) throw FormatError(FormatError::Kind::kInvalid, "implausible config echo length");
  return r.get_bytes(len);
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  return is;
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const std::string& config_echo,
                     const core::ParameterSet<T>& params, const TrainSnapshot<T>* state) {
  // Write to a sibling file first so an interrupted save never leaves a torn checkpoint.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open " + tmp.string() + " for writing");
    ByteWriter w(os);
    w.put_bytes(std::string(kCheckpointMagic, 4));
    w.put<std::uint32_t>(kCheckpointVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(config_echo.size()));
    w.put_bytes(config_echo);
    w.put<std::uint8_t>(sizeof(T));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params.items()) {
      w.put<std::uint16_t>(static_cast<std::uint16_t>(p.name.size()));
      w.put_bytes(p.name);
      w.put<std::uint32_t>(static_cast<std::uint32_t>(p.tensor.rank()));
      for (auto d : p.tensor.shape()) w.put<std::uint64_t>(d);
      w.put_array(p.tensor.data().data(), p.tensor.numel());
    }
    w.put<std::uint8_t>(state ? 1 : 0);
    if (state) {
      w.put<std::uint64_t>(state->epoch);
      w.put<double>(state->best_metric);
      w.put<std::int64_t>(state->best_epoch);
      w.put<std::uint32_t>(static_cast<std::uint32_t>(state->rng_state.size()));
      w.put_bytes(state->rng_state);
      w.put<std::uint32_t>(static_cast<std::uint32_t>(state->momentum.velocity.size()));
      for (const auto& [name, v] : state->momentum.velocity) {
        w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
        w.put_bytes(name);
        w.put<std::uint64_t>(v.size());
        w.put_array(v.data(), v.size());
      }
    }
    if (!w.good()) throw DataError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
std::string load_checkpoint(const std::filesystem::path& path, core::ParameterSet<T>& params, TrainSnapshot<T>* state,
                            bool* has_state) {
  auto is = open_in(path);
  ByteReader r(is);
  std::string echo = read_header(r);
  const auto width = r.get<std::uint8_t>();
  if (width != sizeof(T)) {
    throw FormatError(FormatError::Kind::kInvalid, "checkpoint stores " + std::to_string(width * 8) +
                                                       "-bit values, model uses " + std::to_string(sizeof(T) * 8));
  }
  const auto count = r.get<std::uint32_t>();
  if (count != params.size()) {
    throw FormatError(FormatError::Kind::kInvalid, "checkpoint has " + std::to_string(count) + " parameters, model has " +
                                                       std::to_string(params.size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.get_bytes(r.get<std::uint16_t>());
    if (!params.contains(name)) throw FormatError(FormatError::Kind::kInvalid, "unknown parameter '" + name + "'");
    auto tensor = params.get(name);
    const auto rank = r.get<std::uint32_t>();
    core::Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint64_t>();
    if (shape != tensor.shape()) {
      throw FormatError(FormatError::Kind::kInvalid, "parameter '" + name + "' has shape " + core::shape_str(shape) +
                                                         ", model expects " + core::shape_str(tensor.shape()));
    }
    auto data = tensor.mutable_data();
    r.get_array(data.data(), data.size());
  }
  const auto flag = r.get<std::uint8_t>();
  if (has_state) *has_state = flag != 0;
  // The state section is always parsed so a damaged tail is caught even when the caller skips it.
  TrainSnapshot<T> scratch;
  if (!state) state = &scratch;
  if (flag) {
    state->epoch = r.get<std::uint64_t>();
    state->best_metric = r.get<double>();
    state->best_epoch = r.get<std::int64_t>();
    state->rng_state = r.get_bytes(r.get<std::uint32_t>());
    state->momentum.velocity.clear();
    const auto n = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < n; ++i) {
      const std::string name = r.get_bytes(r.get<std::uint16_t>());
      std::vector<T> v(r.get<std::uint64_t>());
      if (!params.contains(name) || v.size() != params.get(name).numel()) {
        throw FormatError(FormatError::Kind::kInvalid, "velocity for '" + name + "' does not match the model");
      }
      r.get_array(v.data(), v.size());
      state->momentum.velocity.emplace(name, std::move(v));
    }
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError(FormatError::Kind::kInvalid, "trailing bytes after checkpoint");
  return echo;
}

std::string read_checkpoint_config(const std::filesystem::path& path) {
  auto is = open_in(path);
  ByteReader r(is);
  return read_header(r);
}

template void save_checkpoint(const std::filesystem::path&, const std::string&, const core::ParameterSet<float>&,
                              const TrainSnapshot<float>*);
template void save_checkpoint(const std::filesystem::path&, const std::string&, const core::ParameterSet<double>&,
                              const TrainSnapshot<double>*);
template std::string load_checkpoint(const std::filesystem::path&, core::ParameterSet<float>&, TrainSnapshot<float>*,
                                     bool*);
template std::string load_checkpoint(const std::filesystem::path&, core::ParameterSet<double>&, TrainSnapshot<double>*,
                                     bool*);

}  // namespace afft::model
