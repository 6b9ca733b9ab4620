#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace afft::core {

/// What a token in an attended sequence stands for.
struct TokenRole {
  enum class Kind { kFusionToken, kModality, kTimestep, kQueryToken };
  Kind kind = Kind::kModality;
  int modality = -1;
  int timestep = -1;
};

/// Post-softmax weights of one attention call, laid out [group][head][query][key].
/// A "group" is one independent sequence (a sample, or a sample-timestep for per-step fusion).
struct AttentionMap {
  std::string label;
  std::size_t groups = 0;
  std::size_t heads = 0;
  std::size_t queries = 0;
  std::size_t keys = 0;
  std::vector<double> weights;
  std::vector<TokenRole> query_roles;
  std::vector<TokenRole> key_roles;

  double at(std::size_t g, std::size_t h, std::size_t q, std::size_t k) const {
    return weights[((g * heads + h) * queries + q) * keys + k];
  }
};

/// Ordered attention maps captured during one forward pass.
struct AttentionTrace {
  enum class Source { kUnknown, kSelfAttentionFuserToken, kSelfAttentionFuserTokenless, kTemporalFuser,
                      kCrossAttentionFuser, kAnticipator };
  Source source = Source::kUnknown;
  std::vector<AttentionMap> layers;
};

}  // namespace afft::core
