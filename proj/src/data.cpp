#include "mol/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_map>

namespace mol {

using nlohmann::json;

Vocab::Vocab() {
  for (const char* t : {"[PAD]", "[MASK]", "[UNK]"}) add(t);
}

Index Vocab::id(const std::string& token) const {
  const auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(Index id) const {
  if (id < 0 || id >= size()) throw InputError("token id " + std::to_string(id) + " outside vocab of size " +
                                               std::to_string(size()));
  return id_to_token_[static_cast<std::size_t>(id)];
}

Index Vocab::add(const std::string& token) {
  if (const auto it = token_to_id_.find(token); it != token_to_id_.end()) return it->second;
  const Index id = size();
  token_to_id_.emplace(token, id);
  id_to_token_.push_back(token);
  return id;
}

std::string Vocab::to_json() const {
  json j = json::object();
  for (Index i = 0; i < size(); ++i) j[id_to_token_[static_cast<std::size_t>(i)]] = i;
  return j.dump(1) + "\n";
}

Vocab Vocab::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw InputError(std::string("vocab: malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw InputError("vocab: expected a {token: id} object");
  std::vector<std::string> by_id(j.size());
  std::vector<bool> seen(j.size(), false);
  for (const auto& [token, id] : j.items()) {
    if (!id.is_number_integer()) throw InputError("vocab: id of '" + token + "' is not an integer");
    const auto i = id.get<std::int64_t>();
    if (i < 0 || i >= static_cast<std::int64_t>(j.size()) || seen[static_cast<std::size_t>(i)]) {
      throw InputError("vocab: ids must be dense and unique, got " + std::to_string(i) + " for '" + token + "'");
    }
    seen[static_cast<std::size_t>(i)] = true;
    by_id[static_cast<std::size_t>(i)] = token;
  }
  Vocab v;
  if (by_id.size() < static_cast<std::size_t>(kReserved) || by_id[0] != "[PAD]" || by_id[1] != "[MASK]" ||
      by_id[2] != "[UNK]") {
    throw InputError("vocab: reserved ids 0,1,2 must be [PAD], [MASK], [UNK]");
  }
  for (std::size_t i = kReserved; i < by_id.size(); ++i) v.add(by_id[i]);
  return v;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("vocab: cannot write " + path.string());
  out << to_json();
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("vocab: cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

std::vector<std::string> split_whitespace(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

Vocab build_vocab_from_lines(const std::vector<std::string>& lines, Index max_size) {
  if (max_size < Vocab::kReserved) {
    throw ConfigError("vocab max_size must be at least " + std::to_string(Vocab::kReserved));
  }
  std::unordered_map<std::string, std::int64_t> freq;
  for (const auto& line : lines)
    for (const auto& w : split_whitespace(line)) ++freq[w];
  if (freq.empty()) throw InputError("build_vocab: corpus contains no tokens");

  std::vector<std::pair<std::string, std::int64_t>> ranked(freq.begin(), freq.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  Vocab v;
  for (const auto& [token, _] : ranked) {
    if (v.size() >= max_size) break;
    v.add(token);
  }
  return v;
}

Vocab build_vocab(const std::filesystem::path& corpus, Index max_size) {
  return build_vocab_from_lines(read_lines(corpus), max_size);
}

std::vector<Index> encode(const std::string& text, const Vocab& vocab, Index max_seq) {
  std::vector<Index> ids(static_cast<std::size_t>(max_seq), Vocab::kPad);
  const auto words = split_whitespace(text);
  const std::size_t n = std::min(words.size(), ids.size());
  for (std::size_t i = 0; i < n; ++i) ids[i] = vocab.id(words[i]);
  return ids;
}

std::string decode(const std::vector<Index>& ids, const Vocab& vocab) {
  std::string out;
  for (Index id : ids) {
    if (id == Vocab::kPad) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.token(id);
  }
  return out;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  return lines;
}

void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  for (const auto& l : lines) out << l << '\n';
}

void SyntheticSpec::validate() const {
  if (tokens_per_source < 2) throw ConfigError("synthetic: tokens_per_source must be >= 2");
  if (successors < 1 || successors > tokens_per_source) {
    throw ConfigError("synthetic: successors must be in [1, tokens_per_source]");
  }
  if (seq_len < 2) throw ConfigError("synthetic: seq_len must be >= 2");
  if (mixture < 0 || mixture > 1) throw ConfigError("synthetic: mixture must be in [0, 1]");
  if (pattern_len < 1 || pattern_len > seq_len) throw ConfigError("synthetic: pattern_len must be in [1, seq_len]");
}

namespace {

MarkovSource make_source(const std::string& prefix, Index n, Index successors, std::mt19937_64& rng) {
  MarkovSource s;
  s.prefix = prefix;
  s.initial.assign(static_cast<std::size_t>(n), 1.0 / static_cast<double>(n));
  std::uniform_real_distribution<double> weight(0.5, 1.5);
  std::vector<Index> targets(static_cast<std::size_t>(n));
  std::iota(targets.begin(), targets.end(), Index{0});
  for (Index i = 0; i < n; ++i) {
    std::shuffle(targets.begin(), targets.end(), rng);
    std::vector<double> row(static_cast<std::size_t>(n), 0.0);
    double z = 0;
    for (Index j = 0; j < successors; ++j) {
      const double w = weight(rng);
      row[static_cast<std::size_t>(targets[static_cast<std::size_t>(j)])] = w;
      z += w;
    }
    for (double& p : row) p /= z;
    s.transition.push_back(std::move(row));
  }
  return s;
}

std::string token_name(const MarkovSource& s, Index local) { return s.prefix + std::to_string(local); }

Index sample(const std::vector<double>& p, std::mt19937_64& rng) {
  std::discrete_distribution<Index> d(p.begin(), p.end());
  return d(rng);
}

}  // namespace

std::vector<MarkovSource> make_sources(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed * 0x9E3779B97F4A7C15ULL + 1);
  std::vector<MarkovSource> out;
  out.push_back(make_source("a", spec.tokens_per_source, spec.successors, rng));
  out.push_back(make_source("b", spec.tokens_per_source, spec.successors, rng));
  return out;
}

SyntheticCorpus gen_synthetic(const SyntheticSpec& spec, Index n_samples) {
  spec.validate();
  if (n_samples < 0) throw ConfigError("synthetic: n_samples must be >= 0");
  SyntheticCorpus corpus;
  std::mt19937_64 rng(spec.seed * 0xD1B54A32D192ED03ULL + 7);

  if (spec.kind == SyntheticKind::copy_pattern) {
    std::uniform_int_distribution<Index> pick(0, spec.tokens_per_source - 1);
    for (Index s = 0; s < n_samples; ++s) {
      std::vector<Index> pattern(static_cast<std::size_t>(spec.pattern_len));
      for (auto& t : pattern) t = pick(rng);
      std::string doc;
      for (Index i = 0; i < spec.seq_len; ++i) {
        if (i) doc.push_back(' ');
        doc += "c" + std::to_string(pattern[static_cast<std::size_t>(i % spec.pattern_len)]);
      }
      corpus.docs.push_back(std::move(doc));
      corpus.sources.push_back(0);
    }
    return corpus;
  }

  corpus.markov = make_sources(spec);
  std::bernoulli_distribution from_a(spec.mixture);
  for (Index s = 0; s < n_samples; ++s) {
    const int src = from_a(rng) ? 0 : 1;
    const auto& m = corpus.markov[static_cast<std::size_t>(src)];
    Index state = sample(m.initial, rng);
    std::string doc = token_name(m, state);
    for (Index i = 1; i < spec.seq_len; ++i) {
      state = sample(m.transition[static_cast<std::size_t>(state)], rng);
      doc.push_back(' ');
      doc += token_name(m, state);
    }
    corpus.docs.push_back(std::move(doc));
    corpus.sources.push_back(src);
  }
  return corpus;
}

std::string to_string(SyntheticKind kind) {
  return kind == SyntheticKind::two_sublanguage ? "two_sublanguage" : "copy_pattern";
}

SyntheticKind parse_synthetic_kind(const std::string& s) {
  if (s == "two_sublanguage") return SyntheticKind::two_sublanguage;
  if (s == "copy_pattern") return SyntheticKind::copy_pattern;
  throw ConfigError("unknown synthetic kind '" + s + "' (expected two_sublanguage|copy_pattern)");
}

}  // namespace mol
