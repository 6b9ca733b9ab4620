#include "afft/data/vocabulary.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <string>

#include "afft/core/error.hpp"

namespace afft::data {

ActionVocabulary ActionVocabulary::build(const std::vector<VerbNoun>& pairs) {
  ActionVocabulary v;
  for (const auto& p : pairs) {
    if (p.verb < 0 || p.noun < 0) {
      throw DataError("negative id in vocabulary pair (" + std::to_string(p.verb) + "," + std::to_string(p.noun) + ")");
    }
    if (v.index_.emplace(p, v.actions_.size()).second) v.actions_.push_back(p);
    v.verb_count_ = std::max(v.verb_count_, static_cast<std::size_t>(p.verb) + 1);
    v.noun_count_ = std::max(v.noun_count_, static_cast<std::size_t>(p.noun) + 1);
  }
  return v;
}

ActionVocabulary ActionVocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open vocabulary file " + path.string());
  std::vector<VerbNoun> pairs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    VerbNoun vn;
    char comma = 0;
    if (!(ls >> vn.verb >> comma >> vn.noun) || comma != ',') {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected verb_id,noun_id");
    }
    pairs.push_back(vn);
  }
  auto vocab = build(pairs);
  if (vocab.action_count() != pairs.size()) throw DataError(path.string() + ": duplicate (verb, noun) pairs");
  return vocab;
}

void ActionVocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write vocabulary file " + path.string());
  for (const auto& a : actions_) out << a.verb << ',' << a.noun << '\n';
}

std::optional<std::size_t> ActionVocabulary::find(VerbNoun vn) const {
  auto it = index_.find(vn);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

}  // namespace afft::data
