// Lexicon-constrained, frame-synchronous beam search over ASG letter graphs
// with word-level LM fusion.
//
// A transcription W is scored as
//
//   logadd_{pi in G(W)} [ sum_t f[t][pi_t] + g[pi_{t-1}][pi_t] - gamma * #sil(pi) ]
//     + alpha * log P_lm(W </s>) + beta * |W|
//
// where G(W) holds every letter path that spells W with optional leading and
// trailing silence and at least one silence frame between words. Words are
// emitted on the silence frame that follows a complete spelling, or at the
// end of the utterance.
#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "convsr/common.hpp"
#include "convsr/criterion.hpp"
#include "convsr/lm.hpp"

namespace convsr::decoder {

struct LexiconEntry {
  std::string word;
  std::vector<std::string> spelling;  // raw letters; repeats are encoded on insert
};

using Lexicon = std::vector<LexiconEntry>;

// `word<TAB>letter letter ...` per line.
Lexicon load_lexicon(const std::string& path);
void save_lexicon(const std::string& path, const Lexicon& lexicon);

class LexiconTrie {
 public:
  struct Node {
    int letter = -1;  // -1 at the root
    int parent = -1;
    std::vector<std::pair<int, int>> children;  // (letter, node), sorted by letter
    std::vector<int> words;                     // word ids spelled by this node
  };

  static LexiconTrie build(const Lexicon& lexicon, const asg::Alphabet& alphabet);

  int root() const { return 0; }
  const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  std::size_t num_nodes() const { return nodes_.size(); }
  std::size_t num_words() const { return words_.size(); }
  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }
  const std::vector<int>& spelling(int id) const { return spellings_.at(static_cast<std::size_t>(id)); }
  // Node reached by an encoded spelling, or -1.
  int find(const std::vector<int>& encoded) const;

 private:
  std::vector<Node> nodes_;
  std::vector<std::string> words_;
  std::vector<std::vector<int>> spellings_;  // encoded
};

enum class MergeMode { kNone, kLogAdd, kMax };

struct DecoderOptions {
  double alpha = 0.0;
  double beta = 0.0;
  double gamma = 0.0;
  std::size_t beam_size = 2500;
  double beam_score = 26.0;
  // Apply a per-frame log-softmax to the emissions before searching.
  bool normalized_emissions = false;
  MergeMode merge = MergeMode::kLogAdd;
  std::size_t lm_cache_capacity = 1 << 16;

  void validate() const;
};

struct Hypothesis {
  int trie_node = 0;
  int lm_state = 0;  // id in the decoder's LM state pool
  int history = 0;   // id of the emitted word sequence
  int last_letter = -1;
  double am_score = 0.0;  // accumulated emission + transition score
  double lm_score = 0.0;  // raw log P_lm of the emitted words
  std::size_t word_count = 0;
  std::size_t silence_count = 0;
  int parent = -1;  // index in the previous frame's beam

  double total(const DecoderOptions& o) const {
    return am_score + o.alpha * lm_score + o.beta * static_cast<double>(word_count) -
           o.gamma * static_cast<double>(silence_count);
  }
};

// Hypotheses sharing (trie_node, history, last_letter) are merged. With
// kLogAdd the survivor's score is the log-sum of the members' path scores
// (silence penalty included); every other field comes from the best member.
std::vector<Hypothesis> merge_hypotheses(const std::vector<Hypothesis>& beam,
                                         const DecoderOptions& opts);

// Drops hypotheses more than beam_score below the best, then keeps the top
// beam_size. Output is sorted by total, ties kept in input order.
std::vector<Hypothesis> prune(const std::vector<Hypothesis>& beam, const DecoderOptions& opts);

struct DecodeResult {
  std::vector<std::string> words;
  std::vector<int> letter_path;
  double objective = kNegInf;
  double am_component = 0.0;
  double lm_component = 0.0;  // raw log P_lm, sentence end included
  std::size_t word_count = 0;
  std::size_t silence_count = 0;
};

class LmCache;

// emissions: frames x letters; transitions: [from][to].
DecodeResult decode(const Matrix& emissions, const Matrix& transitions, const LexiconTrie& trie,
                    const asg::Alphabet& alphabet, const lm::LanguageModel& lm,
                    const DecoderOptions& opts);

struct ExhaustiveLimits {
  std::size_t max_frames = 20;
  std::size_t max_lexicon = 8;
  std::size_t max_sequences = 500000;
};

// Scores every word sequence that fits in the available frames, and every
// alignment of it, exactly. Returns the best transcription under the
// objective above; letter_path and silence_count come from its best single
// path. Throws kCapacity past the limits.
DecodeResult exhaustive_decode(const Matrix& emissions, const Matrix& transitions,
                               const LexiconTrie& trie, const asg::Alphabet& alphabet,
                               const lm::LanguageModel& lm, const DecoderOptions& opts,
                               const ExhaustiveLimits& limits = {});

// Upper bound on the distinct beam entries per frame for this instance:
// feasible word sequences x (trie nodes + 1).
std::size_t exhaustive_hypothesis_count(std::size_t frames, const LexiconTrie& trie,
                                        const ExhaustiveLimits& limits = {});

// ---------------------------------------------------------------------------
// Tuning

struct ValidationUtterance {
  Matrix emissions;
  std::vector<std::string> reference;
};

struct TuneRow {
  double alpha = 0, beta = 0, gamma = 0;
  double wer = 0;
};

struct TuneResult {
  DecoderOptions best;
  double stage1_wer = 0.0;
  double stage2_wer = 0.0;
  std::vector<TuneRow> grid;
};

struct TuneGrid {
  std::vector<double> alphas{0.0};
  std::vector<double> betas{0.0};
  std::vector<double> gammas{0.0};
  std::size_t search_beam = 2500;
  double search_beam_score = 26.0;
  std::size_t final_beam = 3000;
  double final_beam_score = 50.0;
};

// Corpus WER (%) of decoding every utterance with `opts`.
double corpus_wer(const std::vector<ValidationUtterance>& set, const Matrix& transitions,
                  const LexiconTrie& trie, const asg::Alphabet& alphabet,
                  const lm::LanguageModel& lm, const DecoderOptions& opts);

// Grid search over alpha x beta x gamma at the search beam, then one
// re-evaluation of the winner at the final beam. Ties keep the earliest grid
// point (alpha-major order).
TuneResult tune_grid(const std::vector<ValidationUtterance>& set, const Matrix& transitions,
                     const LexiconTrie& trie, const asg::Alphabet& alphabet,
                     const lm::LanguageModel& lm, const TuneGrid& grid,
                     const DecoderOptions& base = {});

// ---------------------------------------------------------------------------
// Emission table files: "CVEM", u32 version, u32 frames, u32 letters,
// u8 normalized, letters as (u32 length, bytes), then frames x letters
// little-endian f64.

struct EmissionFile {
  Matrix scores;
  bool normalized = false;
  std::vector<std::string> letters;
};

void write_emissions(const std::string& path, const EmissionFile& table);
EmissionFile read_emissions(const std::string& path);

}  // namespace convsr::decoder
