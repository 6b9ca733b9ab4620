#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <utility>
#include <vector>

namespace afft::data {

struct VerbNoun {
  int verb = 0;
  int noun = 0;
  friend bool operator==(const VerbNoun&, const VerbNoun&) = default;
  friend auto operator<=>(const VerbNoun&, const VerbNoun&) = default;
};

/// Action ids are positions in the insertion-ordered list of unique (verb, noun) pairs.
class ActionVocabulary {
 public:
  ActionVocabulary() = default;

  /// De-duplicates while keeping first-seen order; counts are max id + 1.
  static ActionVocabulary build(const std::vector<VerbNoun>& pairs);
  /// One "verb_id,noun_id" per line; line number (0-based) is the action id.
  static ActionVocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t action_count() const { return actions_.size(); }
  std::size_t verb_count() const { return verb_count_; }
  std::size_t noun_count() const { return noun_count_; }
  const VerbNoun& pair(std::size_t action) const { return actions_.at(action); }
  const std::vector<VerbNoun>& actions() const { return actions_; }
  std::optional<std::size_t> find(VerbNoun vn) const;

 private:
  std::vector<VerbNoun> actions_;
  std::map<VerbNoun, std::size_t> index_;
  std::size_t verb_count_ = 0;
  std::size_t noun_count_ = 0;
};

}  // namespace afft::data
