#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "afft/data/binary_io.hpp"
#include "afft/data/sequence.hpp"

namespace afft::data {

// Binary layout (little-endian):
//   "AFFT" | u32 version | u32 modality count | {u16 len, name, u32 dim}*
//   u64 sample count | sample*
// sample:
//   u32 id len, id | u32 T | u32 next_label | u8 has_frame_labels | [T x u32 labels]
//   f64 tau_s | f64 tau_a | f64 tau_o | per modality T x dim f32
inline constexpr char kFeatureMagic[4] = {'A', 'F', 'F', 'T'};
inline constexpr std::uint32_t kFeatureFormatVersion = 1;

struct ManifestEntry {
  std::string id;
  std::filesystem::path file;
  std::uint64_t offset = 0;
};

/// Writes the dataset and returns one manifest entry (byte offset) per sample.
std::vector<ManifestEntry> write_feature_file(const std::filesystem::path& path, const FeatureDataset& dataset);
FeatureDataset read_feature_file(const std::filesystem::path& path);

void write_feature_stream(std::ostream& os, const FeatureDataset& dataset, std::vector<std::uint64_t>* offsets = nullptr);
FeatureDataset read_feature_stream(std::istream& is);

/// Line-delimited "id,path,offset" records.
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

/// Random access to individual samples of a feature file via manifest offsets.
class FeatureFileReader {
 public:
  explicit FeatureFileReader(const std::filesystem::path& path);
  const std::vector<ModalitySpec>& modalities() const { return modalities_; }
  std::uint64_t sample_count() const { return sample_count_; }
  FeatureSequence read_at(std::uint64_t offset);

 private:
  std::ifstream in_;
  std::vector<ModalitySpec> modalities_;
  std::uint64_t sample_count_ = 0;
};

}  // namespace afft::data
