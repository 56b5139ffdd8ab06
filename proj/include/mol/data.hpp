#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mol/tensor.hpp"

namespace mol {

class Vocab {
 public:
  static constexpr Index kPad = 0;
  static constexpr Index kMask = 1;
  static constexpr Index kUnk = 2;
  static constexpr Index kReserved = 3;

  Vocab();

  Index size() const { return static_cast<Index>(id_to_token_.size()); }
  Index id(const std::string& token) const;  // kUnk when unknown
  const std::string& token(Index id) const;
  bool contains(const std::string& token) const { return token_to_id_.count(token) > 0; }

  // Appends a token with the next free id; returns its id.
  Index add(const std::string& token);

  std::string to_json() const;
  static Vocab from_json(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.id_to_token_ == b.id_to_token_; }

 private:
  std::map<std::string, Index> token_to_id_;
  std::vector<std::string> id_to_token_;
};

std::vector<std::string> split_whitespace(const std::string& text);

// Whitespace tokens ranked by frequency (desc) then lexicographically; at most
// max_size entries including the three reserved tokens.
Vocab build_vocab_from_lines(const std::vector<std::string>& lines, Index max_size);
Vocab build_vocab(const std::filesystem::path& corpus, Index max_size);

// Whitespace split, unknown -> [UNK], truncated or padded with [PAD] to max_seq.
std::vector<Index> encode(const std::string& text, const Vocab& vocab, Index max_seq);
// Inverse of encode on in-vocabulary text; padding is dropped.
std::string decode(const std::vector<Index>& ids, const Vocab& vocab);

std::vector<std::string> read_lines(const std::filesystem::path& path);
void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines);

enum class SyntheticKind { two_sublanguage, copy_pattern };

struct SyntheticSpec {
  SyntheticKind kind = SyntheticKind::two_sublanguage;
  Index tokens_per_source = 24;  // vocabulary of each sublanguage
  Index successors = 3;          // nonzero transitions per state
  Index seq_len = 32;
  double mixture = 0.5;          // probability a document comes from source A
  Index pattern_len = 4;         // copy_pattern period
  std::uint64_t seed = 0;

  void validate() const;
};

// Markov source over one sublanguage: transition[i] is a distribution over
// successor ids (local indices).
struct MarkovSource {
  std::string prefix;
  std::vector<std::vector<double>> transition;
  std::vector<double> initial;
};

struct SyntheticCorpus {
  std::vector<std::string> docs;
  std::vector<int> sources;  // 0 = A, 1 = B (copy_pattern: all 0)
  std::vector<MarkovSource> markov;
};

// The two sources of a two_sublanguage spec (deterministic in spec.seed).
std::vector<MarkovSource> make_sources(const SyntheticSpec& spec);

SyntheticCorpus gen_synthetic(const SyntheticSpec& spec, Index n_samples);

std::string to_string(SyntheticKind kind);
SyntheticKind parse_synthetic_kind(const std::string& s);

}  // namespace mol
