#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "afft/core/parameter.hpp"

namespace afft::model {

// Binary layout (little-endian, same conventions as the feature file):
//   "AFCK" | u32 version | u32 len, config echo | u8 dtype bytes (4 or 8)
//   u32 param count | {u16 len, name, u32 rank, rank x u64 dims, values}*
//   u8 has_state | [u64 epoch, f64 best_metric, i64 best_epoch, u32 len, rng text,
//                   u32 velocity count, {u16 len, name, u64 n, values}*]
inline constexpr char kCheckpointMagic[4] = {'A', 'F', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Resumable optimizer state stored next to the parameters.
template <typename T>
struct TrainSnapshot {
  std::uint64_t epoch = 0;  // next epoch to run
  double best_metric = -1;
  std::int64_t best_epoch = -1;
  std::string rng_state;
  core::MomentumState<T> momentum;
};

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const std::string& config_echo,
                     const core::ParameterSet<T>& params, const TrainSnapshot<T>* state = nullptr);

/// Copies stored values into `params`, which must hold exactly the same names and shapes.
/// Returns the config echo; fills `state` when the file carries one (sets `has_state`).
template <typename T>
std::string load_checkpoint(const std::filesystem::path& path, core::ParameterSet<T>& params,
                            TrainSnapshot<T>* state = nullptr, bool* has_state = nullptr);

/// Config echo only, without touching any parameters.
std::string read_checkpoint_config(const std::filesystem::path& path);

}  // namespace afft::model
