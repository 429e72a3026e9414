#include "convsr/decoder.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <list>
#include <map>
#include <sstream>

#include "convsr/metrics.hpp"
#include "convsr/nn.hpp"

namespace convsr::decoder {

static_assert(std::endian::native == std::endian::little, "binary formats assume little-endian hosts");

// ---------------------------------------------------------------------------
// Lexicon

Lexicon load_lexicon(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open lexicon: " + path);
  Lexicon lex;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0)
      throw Error(ErrorKind::kParse,
                  path + ":" + std::to_string(lineno) + ": expected word<TAB>spelling");
    LexiconEntry e;
    e.word = line.substr(0, tab);
    std::istringstream ss(line.substr(tab + 1));
    std::string letter;
    while (ss >> letter) e.spelling.push_back(letter);
    if (e.spelling.empty())
      throw Error(ErrorKind::kParse,
                  path + ":" + std::to_string(lineno) + ": empty spelling for '" + e.word + "'");
    lex.push_back(std::move(e));
  }
  return lex;
}

void save_lexicon(const std::string& path, const Lexicon& lexicon) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::kIo, "cannot write lexicon: " + path);
  for (const auto& e : lexicon) {
    out << e.word << '\t';
    for (std::size_t i = 0; i < e.spelling.size(); ++i) out << (i ? " " : "") << e.spelling[i];
    out << '\n';
  }
}

LexiconTrie LexiconTrie::build(const Lexicon& lexicon, const asg::Alphabet& alphabet) {
  LexiconTrie trie;
  trie.nodes_.emplace_back();
  for (const auto& entry : lexicon) {
    if (entry.spelling.empty())
      throw Error(ErrorKind::kVocabulary, "empty spelling for '" + entry.word + "'");
    std::vector<int> raw;
    for (const auto& l : entry.spelling) {
      const int idx = alphabet.index(l);
      if (idx == alphabet.silence() || idx == alphabet.repetition())
        throw Error(ErrorKind::kVocabulary,
                    "spelling of '" + entry.word + "' uses reserved token '" + l + "'");
      raw.push_back(idx);
    }
    const auto encoded = asg::encode_target(raw, alphabet).encoded;

    int node = 0;
    for (int letter : encoded) {
      auto& kids = trie.nodes_[static_cast<std::size_t>(node)].children;
      auto it = std::lower_bound(kids.begin(), kids.end(), std::make_pair(letter, -1));
      if (it != kids.end() && it->first == letter) {
        node = it->second;
        continue;
      }
      const int child = static_cast<int>(trie.nodes_.size());
      kids.insert(it, {letter, child});
      Node n;
      n.letter = letter;
      n.parent = node;
      trie.nodes_.push_back(std::move(n));
      node = child;
    }
    auto& words = trie.nodes_[static_cast<std::size_t>(node)].words;
    const bool dup = std::any_of(words.begin(), words.end(), [&](int w) {
      return trie.words_[static_cast<std::size_t>(w)] == entry.word;
    });
    if (dup) continue;
    words.push_back(static_cast<int>(trie.words_.size()));
    trie.words_.push_back(entry.word);
    trie.spellings_.push_back(encoded);
  }
  return trie;
}

int LexiconTrie::find(const std::vector<int>& encoded) const {
  int node = 0;
  for (int letter : encoded) {
    const auto& kids = nodes_[static_cast<std::size_t>(node)].children;
    auto it = std::lower_bound(kids.begin(), kids.end(), std::make_pair(letter, -1));
    if (it == kids.end() || it->first != letter) return -1;
    node = it->second;
  }
  return node;
}

// ---------------------------------------------------------------------------
// Options, merge, prune

void DecoderOptions::validate() const {
  if (!(alpha >= 0) || !(beta >= 0) || !(gamma >= 0))
    throw Error(ErrorKind::kConfiguration, "alpha, beta and gamma must be >= 0");
  if (beam_size < 1) throw Error(ErrorKind::kConfiguration, "beam_size must be >= 1");
  if (!(beam_score >= 0)) throw Error(ErrorKind::kConfiguration, "beam_score must be >= 0");
  if (lm_cache_capacity < 1) throw Error(ErrorKind::kConfiguration, "lm cache capacity must be >= 1");
}

namespace {

struct MergeKey {
  int node, last, history;
  bool operator==(const MergeKey&) const = default;
};

struct MergeKeyHash {
  std::size_t operator()(const MergeKey& k) const {
    std::size_t h = static_cast<std::size_t>(k.node) * 0x9E3779B97F4A7C15ULL;
    h ^= static_cast<std::size_t>(k.last + 1) + 0x7F4A7C15ULL + (h << 6) + (h >> 2);
    h ^= static_cast<std::size_t>(k.history) * 0xC2B2AE3D27D4EB4FULL + (h << 6) + (h >> 2);
    return h;
  }
};

}  // namespace

std::vector<Hypothesis> merge_hypotheses(const std::vector<Hypothesis>& beam,
                                         const DecoderOptions& opts) {
  if (opts.merge == MergeMode::kNone) return beam;
  std::vector<Hypothesis> out;
  out.reserve(beam.size());
  // Path scores with the silence penalty applied; logadd must combine these,
  // not the raw am scores, because members may differ in silence count.
  std::vector<double> path;
  std::unordered_map<MergeKey, std::size_t, MergeKeyHash> slot;
  slot.reserve(beam.size() * 2);
  for (const auto& h : beam) {
    const double p = h.am_score - opts.gamma * static_cast<double>(h.silence_count);
    auto [it, fresh] = slot.try_emplace(MergeKey{h.trie_node, h.last_letter, h.history}, out.size());
    if (fresh) {
      out.push_back(h);
      path.push_back(p);
      continue;
    }
    auto& kept = out[it->second];
    double& kept_p = path[it->second];
    if (p > kept_p) kept = h;
    kept_p = opts.merge == MergeMode::kLogAdd ? log_add(kept_p, p) : std::max(kept_p, p);
    kept.am_score = kept_p + opts.gamma * static_cast<double>(kept.silence_count);
  }
  return out;
}

std::vector<Hypothesis> prune(const std::vector<Hypothesis>& beam, const DecoderOptions& opts) {
  if (beam.empty()) return {};
  std::vector<double> totals(beam.size());
  double best = kNegInf;
  for (std::size_t i = 0; i < beam.size(); ++i) {
    totals[i] = beam[i].total(opts);
    best = std::max(best, totals[i]);
  }
  std::vector<std::size_t> order;
  order.reserve(beam.size());
  for (std::size_t i = 0; i < beam.size(); ++i)
    if (!(totals[i] < best - opts.beam_score)) order.push_back(i);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return totals[a] > totals[b]; });
  if (order.size() > opts.beam_size) order.resize(opts.beam_size);
  std::vector<Hypothesis> out;
  out.reserve(order.size());
  for (auto i : order) out.push_back(beam[i]);
  return out;
}

// ---------------------------------------------------------------------------
// LM state pool and score cache. Owned by a single decode call, so no locking;
// misses within one frame are scored in parallel before the lookups.

class LmCache {
 public:
  LmCache(const lm::LanguageModel& lm, std::size_t capacity) : lm_(lm), capacity_(capacity) {
    intern(lm.start_state());
  }

  int start() const { return 0; }

  int next(int state, int token) {
    const auto key = (static_cast<std::uint64_t>(state) << 32) | static_cast<std::uint32_t>(token);
    auto it = next_.find(key);
    if (it != next_.end()) return it->second;
    const int id = intern(lm_.advance(states_[static_cast<std::size_t>(state)], token));
    next_.emplace(key, id);
    return id;
  }

  void prefetch(std::vector<int> states) {
    std::sort(states.begin(), states.end());
    states.erase(std::unique(states.begin(), states.end()), states.end());
    std::vector<int> missing;
    for (int s : states)
      if (!lru_index_.count(s)) missing.push_back(s);
    if (missing.size() > capacity_) missing.resize(capacity_);
    std::vector<std::vector<double>> rows(missing.size());
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(missing.size()); ++i)
      rows[static_cast<std::size_t>(i)] =
          lm_.score_all(states_[static_cast<std::size_t>(missing[static_cast<std::size_t>(i)])]);
    for (std::size_t i = 0; i < missing.size(); ++i) insert(missing[i], std::move(rows[i]));
  }

  double score(int state, int token) {
    auto it = lru_index_.find(state);
    if (it == lru_index_.end()) {
      insert(state, lm_.score_all(states_[static_cast<std::size_t>(state)]));
      it = lru_index_.find(state);
    } else {
      lru_.splice(lru_.begin(), lru_, it->second);
    }
    return it->second->second.at(static_cast<std::size_t>(token));
  }

 private:
  int intern(lm::LmState s) {
    auto [it, fresh] = ids_.try_emplace(s, static_cast<int>(states_.size()));
    if (fresh) states_.push_back(std::move(s));
    return it->second;
  }

  void insert(int state, std::vector<double> row) {
    if (lru_index_.count(state)) return;
    if (lru_.size() >= capacity_) {
      lru_index_.erase(lru_.back().first);
      lru_.pop_back();
    }
    lru_.emplace_front(state, std::move(row));
    lru_index_[state] = lru_.begin();
  }

  const lm::LanguageModel& lm_;
  std::size_t capacity_;
  std::vector<lm::LmState> states_;
  std::unordered_map<lm::LmState, int, lm::LmStateHash> ids_;
  std::unordered_map<std::uint64_t, int> next_;
  using Entry = std::pair<int, std::vector<double>>;
  std::list<Entry> lru_;
  std::unordered_map<int, std::list<Entry>::iterator> lru_index_;
};

namespace {

// Word-sequence ids: 0 is the empty history.
class HistoryPool {
 public:
  HistoryPool() { entries_.push_back({-1, -1}); }
  int extend(int history, int word) {
    const auto key = (static_cast<std::uint64_t>(history) << 32) | static_cast<std::uint32_t>(word);
    auto [it, fresh] = index_.try_emplace(key, static_cast<int>(entries_.size()));
    if (fresh) entries_.push_back({history, word});
    return it->second;
  }
  std::vector<int> words(int history) const {
    std::vector<int> out;
    for (int h = history; h > 0; h = entries_[static_cast<std::size_t>(h)].first)
      out.push_back(entries_[static_cast<std::size_t>(h)].second);
    std::reverse(out.begin(), out.end());
    return out;
  }

 private:
  std::vector<std::pair<int, int>> entries_;
  std::unordered_map<std::uint64_t, int> index_;
};

void check_inputs(const Matrix& emissions, const Matrix& transitions,
                  const asg::Alphabet& alphabet) {
  if (emissions.rows() == 0) throw Error(ErrorKind::kInsufficientInput, "decode needs at least one frame");
  if (emissions.cols() != alphabet.size() || transitions.rows() != alphabet.size() ||
      transitions.cols() != alphabet.size())
    throw Error(ErrorKind::kDimension, "emission/transition tables do not match the alphabet size");
}

std::vector<int> word_tokens(const LexiconTrie& trie, const lm::LanguageModel& lm) {
  std::vector<int> out(trie.num_words());
  for (std::size_t w = 0; w < trie.num_words(); ++w) out[w] = lm.vocab().index(trie.word(static_cast<int>(w)));
  return out;
}

}  // namespace

DecodeResult decode(const Matrix& emissions_in, const Matrix& g, const LexiconTrie& trie,
                    const asg::Alphabet& alphabet, const lm::LanguageModel& lm,
                    const DecoderOptions& opts) {
  opts.validate();
  check_inputs(emissions_in, g, alphabet);
  const Matrix f = opts.normalized_emissions ? nn::log_softmax_rows(emissions_in) : emissions_in;
  const std::size_t T = f.rows();
  const int sil = alphabet.silence();
  const auto tokens = word_tokens(trie, lm);

  LmCache cache(lm, opts.lm_cache_capacity);
  HistoryPool histories;
  // back[t][i] = (parent index in beam t-1, letter) for entry i of beam t.
  std::vector<std::vector<std::pair<int, int>>> back;
  back.reserve(T);

  std::vector<Hypothesis> beam(1);
  beam[0].lm_state = cache.start();
  std::vector<Hypothesis> next;

  for (std::size_t t = 0; t < T; ++t) {
    const auto row = f.row(t);
    next.clear();
    std::vector<int> emitting;
    for (const auto& h : beam)
      if (h.last_letter != sil && h.last_letter >= 0 && !trie.node(h.trie_node).words.empty())
        emitting.push_back(h.lm_state);
    if (opts.alpha != 0.0) cache.prefetch(emitting);

    for (std::size_t i = 0; i < beam.size(); ++i) {
      const auto& h = beam[i];
      auto step = [&](int letter) {
        Hypothesis n = h;
        n.parent = static_cast<int>(i);
        n.last_letter = letter;
        n.am_score += row[static_cast<std::size_t>(letter)] + (h.last_letter >= 0 ? g(static_cast<std::size_t>(h.last_letter), static_cast<std::size_t>(letter)) : 0.0);
        return n;
      };
      const auto& node = trie.node(h.trie_node);
      // Next letter of the current spelling.
      for (const auto& [letter, child] : node.children) {
        Hypothesis n = step(letter);
        n.trie_node = child;
        next.push_back(n);
      }
      // Stay on the current letter (silence included).
      if (h.last_letter >= 0) {
        Hypothesis n = step(h.last_letter);
        if (h.last_letter == sil) ++n.silence_count;
        next.push_back(n);
      }
      // Silence: from the start, or closing a complete word.
      if (h.last_letter < 0) {
        Hypothesis n = step(sil);
        n.trie_node = trie.root();
        ++n.silence_count;
        next.push_back(n);
      } else if (h.last_letter != sil) {
        for (int w : node.words) {
          Hypothesis n = step(sil);
          n.trie_node = trie.root();
          ++n.silence_count;
          const int tok = tokens[static_cast<std::size_t>(w)];
          if (opts.alpha != 0.0) n.lm_score += cache.score(h.lm_state, tok);
          n.lm_state = cache.next(h.lm_state, tok);
          n.history = histories.extend(h.history, w);
          ++n.word_count;
          next.push_back(n);
        }
      }
    }

    beam = prune(merge_hypotheses(next, opts), opts);
    if (beam.empty())
      throw Error(ErrorKind::kEmptyBeam, "beam emptied at frame " + std::to_string(t));
    auto& links = back.emplace_back(beam.size());
    for (std::size_t i = 0; i < beam.size(); ++i) links[i] = {beam[i].parent, beam[i].last_letter};
  }

  // Finalization: close the last word, add the sentence end, merge by history.
  std::vector<Hypothesis> finals;
  std::vector<int> end_states;
  for (std::size_t i = 0; i < beam.size(); ++i) {
    const auto& h = beam[i];
    if (h.last_letter == sil) {
      finals.push_back(h);
      finals.back().parent = static_cast<int>(i);
      continue;
    }
    for (int w : trie.node(h.trie_node).words) {
      Hypothesis n = h;
      n.parent = static_cast<int>(i);
      const int tok = tokens[static_cast<std::size_t>(w)];
      if (opts.alpha != 0.0) n.lm_score += cache.score(h.lm_state, tok);
      n.lm_state = cache.next(h.lm_state, tok);
      n.history = histories.extend(h.history, w);
      n.trie_node = trie.root();
      ++n.word_count;
      finals.push_back(n);
    }
  }
  if (finals.empty())
    throw Error(ErrorKind::kEmptyBeam, "no complete hypothesis at frame " + std::to_string(T));
  for (auto& h : finals) {
    if (opts.alpha != 0.0) h.lm_score += cache.score(h.lm_state, lm.vocab().end());
    // Every final shares the same key apart from history.
    h.last_letter = sil;
  }
  finals = merge_hypotheses(finals, opts);

  std::size_t best = 0;
  for (std::size_t i = 1; i < finals.size(); ++i)
    if (finals[i].total(opts) > finals[best].total(opts)) best = i;
  const auto& h = finals[best];

  DecodeResult r;
  for (int w : histories.words(h.history)) r.words.push_back(trie.word(w));
  r.letter_path.resize(T);
  int idx = h.parent;
  for (std::size_t t = T; t-- > 0;) {
    const auto [parent, letter] = back[t][static_cast<std::size_t>(idx)];
    r.letter_path[t] = letter;
    idx = parent;
  }
  r.word_count = h.word_count;
  r.silence_count = h.silence_count;
  r.am_component = h.am_score;
  if (opts.alpha != 0.0) {
    r.lm_component = h.lm_score;
  } else {
    std::vector<int> toks;
    for (int w : histories.words(h.history)) toks.push_back(tokens[static_cast<std::size_t>(w)]);
    r.lm_component = lm.sentence_log_prob(toks);
  }
  r.objective = r.am_component + opts.alpha * r.lm_component +
                opts.beta * static_cast<double>(r.word_count) -
                opts.gamma * static_cast<double>(r.silence_count);
  return r;
}

// ---------------------------------------------------------------------------
// Exhaustive oracle

namespace {

void feasible_sequences(const LexiconTrie& trie, std::size_t frames, std::size_t limit,
                        std::vector<int>& prefix, std::size_t used,
                        std::vector<std::vector<int>>& out) {
  out.push_back(prefix);
  if (out.size() > limit)
    throw Error(ErrorKind::kCapacity, "exhaustive decode: more than " + std::to_string(limit) +
                                          " word sequences fit in " + std::to_string(frames) +
                                          " frames");
  for (std::size_t w = 0; w < trie.num_words(); ++w) {
    const std::size_t need = used + (prefix.empty() ? 0 : 1) + trie.spelling(static_cast<int>(w)).size();
    if (need > frames) continue;
    prefix.push_back(static_cast<int>(w));
    feasible_sequences(trie, frames, limit, prefix, need, out);
    prefix.pop_back();
  }
}

struct SequenceScore {
  double path = kNegInf;  // logadd over alignments, silence penalty included
  std::vector<int> best_path;
  std::size_t best_silences = 0;
};

// Forward (logadd) and Viterbi over the state chain of one word sequence:
// [sil?] w1 sil w2 ... wk [sil?], each state held for >= 1 frame.
SequenceScore score_sequence(const Matrix& f, const Matrix& g, const LexiconTrie& trie,
                             const std::vector<int>& words, int sil, double gamma) {
  std::vector<int> states;
  std::vector<bool> optional;
  if (words.empty()) {
    states.push_back(sil);
    optional.push_back(false);
  } else {
    states.push_back(sil);
    optional.push_back(true);
    for (std::size_t i = 0; i < words.size(); ++i) {
      if (i > 0) {
        states.push_back(sil);
        optional.push_back(false);
      }
      for (int l : trie.spelling(words[i])) {
        states.push_back(l);
        optional.push_back(false);
      }
    }
    states.push_back(sil);
    optional.push_back(true);
  }
  const std::size_t S = states.size(), T = f.rows();
  auto emit = [&](std::size_t t, std::size_t s) {
    const int l = states[s];
    return f(t, static_cast<std::size_t>(l)) - (l == sil ? gamma : 0.0);
  };
  auto trans = [&](std::size_t a, std::size_t b) {
    return g(static_cast<std::size_t>(states[a]), static_cast<std::size_t>(states[b]));
  };
  Matrix fwd(T, S, kNegInf), vit(T, S, kNegInf);
  Matrix arg(T, S, -1.0);
  fwd(0, 0) = vit(0, 0) = emit(0, 0);
  if (optional[0] && S > 1) fwd(0, 1) = vit(0, 1) = emit(0, 1);
  for (std::size_t t = 1; t < T; ++t) {
    for (std::size_t s = 0; s < S; ++s) {
      double acc = kNegInf, best = kNegInf;
      double from = -1;
      auto consider = [&](std::size_t p) {
        if (fwd(t - 1, p) == kNegInf) return;
        const double tr = trans(p, s);
        acc = log_add(acc, fwd(t - 1, p) + tr);
        if (vit(t - 1, p) + tr > best) {
          best = vit(t - 1, p) + tr;
          from = static_cast<double>(p);
        }
      };
      consider(s);
      if (s >= 1) consider(s - 1);
      if (s >= 2 && optional[s - 1]) consider(s - 2);
      if (acc == kNegInf) continue;
      fwd(t, s) = acc + emit(t, s);
      vit(t, s) = best + emit(t, s);
      arg(t, s) = from;
    }
  }
  SequenceScore out;
  std::size_t end = S - 1;
  out.path = fwd(T - 1, S - 1);
  if (optional[S - 1] && S > 1) {
    out.path = log_add(out.path, fwd(T - 1, S - 2));
    if (vit(T - 1, S - 2) > vit(T - 1, S - 1)) end = S - 2;
  }
  if (out.path == kNegInf) return out;
  out.best_path.resize(T);
  std::size_t s = end;
  for (std::size_t t = T; t-- > 0;) {
    out.best_path[t] = states[s];
    if (states[s] == sil) ++out.best_silences;
    if (t > 0) s = static_cast<std::size_t>(arg(t, s));
  }
  return out;
}

}  // namespace

std::size_t exhaustive_hypothesis_count(std::size_t frames, const LexiconTrie& trie,
                                        const ExhaustiveLimits& limits) {
  std::vector<std::vector<int>> seqs;
  std::vector<int> prefix;
  feasible_sequences(trie, frames, limits.max_sequences, prefix, 0, seqs);
  return seqs.size() * (trie.num_nodes() + 1);
}

DecodeResult exhaustive_decode(const Matrix& emissions_in, const Matrix& g,
                               const LexiconTrie& trie, const asg::Alphabet& alphabet,
                               const lm::LanguageModel& lm, const DecoderOptions& opts,
                               const ExhaustiveLimits& limits) {
  opts.validate();
  check_inputs(emissions_in, g, alphabet);
  if (emissions_in.rows() > limits.max_frames)
    throw Error(ErrorKind::kCapacity, "exhaustive decode: " + std::to_string(emissions_in.rows()) +
                                          " frames exceeds " + std::to_string(limits.max_frames));
  if (trie.num_words() > limits.max_lexicon)
    throw Error(ErrorKind::kCapacity, "exhaustive decode: lexicon of " +
                                          std::to_string(trie.num_words()) + " words exceeds " +
                                          std::to_string(limits.max_lexicon));
  const Matrix f = opts.normalized_emissions ? nn::log_softmax_rows(emissions_in) : emissions_in;
  const auto tokens = word_tokens(trie, lm);

  std::vector<std::vector<int>> seqs;
  std::vector<int> prefix;
  feasible_sequences(trie, f.rows(), limits.max_sequences, prefix, 0, seqs);

  DecodeResult best;
  for (const auto& seq : seqs) {
    auto s = score_sequence(f, g, trie, seq, alphabet.silence(), opts.gamma);
    if (s.path == kNegInf) continue;
    std::vector<int> toks;
    for (int w : seq) toks.push_back(tokens[static_cast<std::size_t>(w)]);
    const double lp = lm.sentence_log_prob(toks);
    const double objective = s.path + opts.alpha * lp + opts.beta * static_cast<double>(seq.size());
    if (!(objective > best.objective)) continue;
    best.objective = objective;
    best.words.clear();
    for (int w : seq) best.words.push_back(trie.word(w));
    best.letter_path = std::move(s.best_path);
    best.silence_count = s.best_silences;
    best.am_component = s.path + opts.gamma * static_cast<double>(s.best_silences);
    best.lm_component = lp;
    best.word_count = seq.size();
  }
  return best;
}

// ---------------------------------------------------------------------------
// Tuning

double corpus_wer(const std::vector<ValidationUtterance>& set, const Matrix& transitions,
                  const LexiconTrie& trie, const asg::Alphabet& alphabet,
                  const lm::LanguageModel& lm, const DecoderOptions& opts) {
  std::vector<metrics::EditCounts> counts(set.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(set.size()); ++i) {
    const auto& u = set[static_cast<std::size_t>(i)];
    std::vector<std::string> hyp;
    try {
      hyp = decode(u.emissions, transitions, trie, alphabet, lm, opts).words;
    } catch (const Error&) {
      hyp.clear();  // scored as all deletions
    }
    counts[static_cast<std::size_t>(i)] = metrics::edit_distance_alignment(u.reference, hyp);
  }
  metrics::EditCounts total;
  for (const auto& c : counts) total += c;
  return metrics::error_rate(total);
}

TuneResult tune_grid(const std::vector<ValidationUtterance>& set, const Matrix& transitions,
                     const LexiconTrie& trie, const asg::Alphabet& alphabet,
                     const lm::LanguageModel& lm, const TuneGrid& grid,
                     const DecoderOptions& base) {
  if (grid.alphas.empty() || grid.betas.empty() || grid.gammas.empty())
    throw Error(ErrorKind::kConfiguration, "tuning grid has an empty axis");
  TuneResult r;
  DecoderOptions o = base;
  o.beam_size = grid.search_beam;
  o.beam_score = grid.search_beam_score;
  bool have = false;
  for (double a : grid.alphas)
    for (double b : grid.betas)
      for (double c : grid.gammas) {
        o.alpha = a;
        o.beta = b;
        o.gamma = c;
        const double wer = corpus_wer(set, transitions, trie, alphabet, lm, o);
        r.grid.push_back({a, b, c, wer});
        if (!have || wer < r.stage1_wer) {
          have = true;
          r.stage1_wer = wer;
          r.best = o;
        }
      }
  r.best.beam_size = grid.final_beam;
  r.best.beam_score = grid.final_beam_score;
  r.stage2_wer = corpus_wer(set, transitions, trie, alphabet, lm, r.best);
  return r;
}

// ---------------------------------------------------------------------------
// Emission files

namespace {

constexpr char kEmMagic[4] = {'C', 'V', 'E', 'M'};
constexpr std::uint32_t kEmVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in, const std::string& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v))
    throw Error(ErrorKind::kParse, path + ": truncated emission file");
  return v;
}

}  // namespace

void write_emissions(const std::string& path, const EmissionFile& table) {
  if (table.letters.size() != table.scores.cols())
    throw Error(ErrorKind::kDimension, "emission letters do not match table width");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::kIo, "cannot write emissions: " + path);
  out.write(kEmMagic, 4);
  put<std::uint32_t>(out, kEmVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(table.scores.rows()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(table.scores.cols()));
  put<std::uint8_t>(out, table.normalized ? 1 : 0);
  for (const auto& l : table.letters) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(l.size()));
    out.write(l.data(), static_cast<std::streamsize>(l.size()));
  }
  out.write(reinterpret_cast<const char*>(table.scores.data()),
            static_cast<std::streamsize>(table.scores.rows() * table.scores.cols() * sizeof(double)));
  if (!out) throw Error(ErrorKind::kIo, "write failed: " + path);
}

EmissionFile read_emissions(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open emissions: " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kEmMagic, 4) != 0)
    throw Error(ErrorKind::kParse, path + ": not an emission file");
  const auto version = get<std::uint32_t>(in, path);
  if (version != kEmVersion)
    throw Error(ErrorKind::kParse, path + ": unsupported emission file version " + std::to_string(version));
  const auto frames = get<std::uint32_t>(in, path);
  const auto letters = get<std::uint32_t>(in, path);
  EmissionFile e;
  e.normalized = get<std::uint8_t>(in, path) != 0;
  for (std::uint32_t i = 0; i < letters; ++i) {
    const auto n = get<std::uint32_t>(in, path);
    if (n > 1024) throw Error(ErrorKind::kParse, path + ": implausible letter length");
    std::string s(n, '\0');
    if (!in.read(s.data(), n)) throw Error(ErrorKind::kParse, path + ": truncated emission file");
    e.letters.push_back(std::move(s));
  }
  e.scores = Matrix(frames, letters);
  if (!in.read(reinterpret_cast<char*>(e.scores.data()),
               static_cast<std::streamsize>(std::size_t{frames} * letters * sizeof(double))))
    throw Error(ErrorKind::kParse, path + ": truncated emission file");
  return e;
}

}  // namespace convsr::decoder
