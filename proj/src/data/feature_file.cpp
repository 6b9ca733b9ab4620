#include "afft/data/feature_file.hpp"

#include <limits>
#include <sstream>

namespace afft::data {

namespace {

constexpr std::uint32_t kIgnoreWire = 0xFFFFFFFFu;

void write_header(ByteWriter& w, const FeatureDataset& ds) {
  w.put_bytes(std::string(kFeatureMagic, 4));
  w.put<std::uint32_t>(kFeatureFormatVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.modalities.size()));
  for (const auto& m : ds.modalities) {
    if (m.name.size() > std::numeric_limits<std::uint16_t>::max()) throw DataError("modality name too long");
    w.put<std::uint16_t>(static_cast<std::uint16_t>(m.name.size()));
    w.put_bytes(m.name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(m.dim));
  }
  w.put<std::uint64_t>(ds.samples.size());
}

void write_sample(ByteWriter& w, const FeatureSequence& s, const std::vector<ModalitySpec>& mods) {
  if (s.features.size() != mods.size()) throw DataError(s.id + ": modality count mismatch");
  w.put<std::uint32_t>(static_cast<std::uint32_t>(s.id.size()));
  w.put_bytes(s.id);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(s.steps));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(s.next_label));
  w.put<std::uint8_t>(s.has_frame_labels() ? 1 : 0);
  if (s.has_frame_labels()) {
    if (s.frame_labels.size() != s.steps) throw DataError(s.id + ": frame label count mismatch");
    for (int l : s.frame_labels) w.put<std::uint32_t>(l == kIgnoreLabel ? kIgnoreWire : static_cast<std::uint32_t>(l));
  }
  w.put<double>(s.tau_s);
  w.put<double>(s.tau_a);
  w.put<double>(s.tau_o);
  for (std::size_t m = 0; m < mods.size(); ++m) {
    if (s.features[m].size() != s.steps * mods[m].dim) throw DataError(s.id + ": feature matrix size mismatch");
    w.put_array(s.features[m].data(), s.features[m].size());
  }
}

std::vector<ModalitySpec> read_header(ByteReader& r, std::uint64_t& count) {
  std::string magic;
  try {
    magic = r.get_bytes(4);
  } catch (const FormatError&) {
    throw FormatError(FormatError::Kind::kBadMagic, "bad magic: file too short for an AFFT header");
  }
  if (magic != std::string(kFeatureMagic, 4)) throw FormatError(FormatError::Kind::kBadMagic, "bad magic: not an AFFT feature file");
  const auto version = r.get<std::uint32_t>();
  if (version != kFeatureFormatVersion) {
    throw FormatError(FormatError::Kind::kVersionMismatch,
                      "version mismatch: file has v" + std::to_string(version) + ", reader supports v" +
                          std::to_string(kFeatureFormatVersion));
  }
  const auto mcount = r.get<std::uint32_t>();
  std::vector<ModalitySpec> mods(mcount);
  for (auto& m : mods) {
    const auto len = r.get<std::uint16_t>();
    m.name = r.get_bytes(len);
    m.dim = r.get<std::uint32_t>();
    if (m.dim == 0) throw FormatError(FormatError::Kind::kInvalid, "modality '" + m.name + "' has zero dimension");
  }
  count = r.get<std::uint64_t>();
  return mods;
}

FeatureSequence read_sample(ByteReader& r, const std::vector<ModalitySpec>& mods) {
  // Upper bound on a single allocation driven by header fields; guards against corrupt sizes.
  constexpr std::uint64_t kMaxElements = 1ULL << 32;
  FeatureSequence s;
  const auto id_len = r.get<std::uint32_t>();
  if (id_len > (1u << 20)) throw FormatError(FormatError::Kind::kInvalid, "implausible sample id length");
  s.id = r.get_bytes(id_len);
  s.steps = r.get<std::uint32_t>();
  s.next_label = static_cast<int>(r.get<std::uint32_t>());
  const auto has_labels = r.get<std::uint8_t>();
  if (has_labels > 1) throw FormatError(FormatError::Kind::kInvalid, s.id + ": bad frame-label flag");
  if (has_labels) {
    s.frame_labels.resize(s.steps);
    for (auto& l : s.frame_labels) {
      const auto raw = r.get<std::uint32_t>();
      l = raw == kIgnoreWire ? kIgnoreLabel : static_cast<int>(raw);
    }
  }
  s.tau_s = r.get<double>();
  s.tau_a = r.get<double>();
  s.tau_o = r.get<double>();
  for (const auto& m : mods) {
    const std::uint64_t n = static_cast<std::uint64_t>(s.steps) * m.dim;
    if (n > kMaxElements) throw FormatError(FormatError::Kind::kInvalid, s.id + ": implausible feature size");
    std::vector<float> f(n);
    r.get_array(f.data(), f.size());
    s.features.push_back(std::move(f));
  }
  return s;
}

}  // namespace

void write_feature_stream(std::ostream& os, const FeatureDataset& dataset, std::vector<std::uint64_t>* offsets) {
  ByteWriter w(os);
  const auto base = static_cast<std::uint64_t>(os.tellp());
  write_header(w, dataset);
  for (const auto& s : dataset.samples) {
    if (offsets) offsets->push_back(static_cast<std::uint64_t>(os.tellp()) - base);
    write_sample(w, s, dataset.modalities);
  }
  if (!w.good()) throw DataError("write failed");
}

FeatureDataset read_feature_stream(std::istream& is) {
  ByteReader r(is);
  FeatureDataset ds;
  std::uint64_t count = 0;
  ds.modalities = read_header(r, count);
  for (std::uint64_t i = 0; i < count; ++i) ds.samples.push_back(read_sample(r, ds.modalities));
  return ds;
}

std::vector<ManifestEntry> write_feature_file(const std::filesystem::path& path, const FeatureDataset& dataset) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  std::vector<std::uint64_t> offsets;
  write_feature_stream(os, dataset, &offsets);
  std::vector<ManifestEntry> entries;
  for (std::size_t i = 0; i < offsets.size(); ++i) entries.push_back({dataset.samples[i].id, path, offsets[i]});
  return entries;
}

FeatureDataset read_feature_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open feature file " + path.string());
  return read_feature_stream(is);
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  for (const auto& e : entries) {
    if (e.id.find(',') != std::string::npos) throw DataError("sample id contains a comma: " + e.id);
    os << e.id << ',' << e.file.string() << ',' << e.offset << '\n';
  }
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open manifest " + path.string());
  std::vector<ManifestEntry> entries;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto a = line.find(',');
    const auto b = line.rfind(',');
    if (a == std::string::npos || a == b) throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected id,path,offset");
    ManifestEntry e;
    e.id = line.substr(0, a);
    e.file = line.substr(a + 1, b - a - 1);
    try {
      e.offset = std::stoull(line.substr(b + 1));
    } catch (const std::exception&) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": bad offset");
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

FeatureFileReader::FeatureFileReader(const std::filesystem::path& path) : in_(path, std::ios::binary) {
  if (!in_) throw DataError("cannot open feature file " + path.string());
  ByteReader r(in_);
  modalities_ = read_header(r, sample_count_);
}

FeatureSequence FeatureFileReader::read_at(std::uint64_t offset) {
  in_.clear();
  in_.seekg(static_cast<std::streamoff>(offset));
  if (!in_) throw FormatError(FormatError::Kind::kTruncated, "offset beyond end of file");
  ByteReader r(in_);
  return read_sample(r, modalities_);
}

}  // namespace afft::data
