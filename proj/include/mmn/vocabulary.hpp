#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mmn/model.hpp"

namespace mmn {

// Fixed string <-> id table. Line number in the vocabulary file is the id.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> tokens);

  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const;
  std::optional<TokenId> find(std::string_view s) const;
  TokenId id(std::string_view s) const;  // throws ValidationError if absent
  const std::vector<std::string>& tokens() const { return tokens_; }

  // Greedy longest-match tokenization. Throws ValidationError when some part
  // of the text matches no token.
  std::vector<TokenId> tokenize(std::string_view text) const;

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

inline constexpr std::string_view kCaptionPrefix = "A picture of";

}  // namespace mmn
