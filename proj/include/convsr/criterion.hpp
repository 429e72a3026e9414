// Auto Segmentation Criterion: log-sum-exp path scores over letter graphs with
// input-independent transition scores, the loss built from them, its exact
// gradients, and Viterbi alignment.
//
// Score of a path pi over T frames:
//   sum_t f[t][pi_t]  +  sum_{t>=1} g[pi_{t-1}][pi_t]
// There is no initial transition term and no blank symbol.
#pragma once

#include <string>
#include <vector>

#include "convsr/common.hpp"

namespace convsr::asg {

class Alphabet {
 public:
  Alphabet() = default;
  // `letters` must contain both the silence and repetition tokens.
  Alphabet(std::vector<std::string> letters, const std::string& silence,
           const std::string& repetition);

  // letters + "|" (silence) + "#" (repetition), in that order.
  static Alphabet with_defaults(const std::vector<std::string>& letters);

  std::size_t size() const { return letters_.size(); }
  int silence() const { return silence_; }
  int repetition() const { return repetition_; }
  const std::string& token(int index) const { return letters_.at(static_cast<std::size_t>(index)); }
  const std::vector<std::string>& tokens() const { return letters_; }

  // Throws kVocabulary for unknown tokens.
  int index(const std::string& token) const;
  bool contains(const std::string& token) const;

 private:
  std::vector<std::string> letters_;
  int silence_ = -1;
  int repetition_ = -1;
};

struct Target {
  std::vector<int> encoded;
};

// Replaces each immediate repeat with the repetition token: "hello" ->
// h e l # o, "aaa" -> a # a. The result never has equal neighbours.
Target encode_target(const std::vector<int>& letters, const Alphabet& alphabet);
Target encode_target(const std::vector<std::string>& letters, const Alphabet& alphabet);
std::vector<int> decode_target(const std::vector<int>& encoded, const Alphabet& alphabet);

class AlignmentGraph {
 public:
  enum class Kind { kFull, kConstrained };

  // Every letter at every frame: |A|^T paths.
  static AlignmentGraph full(std::size_t frames, std::size_t alphabet_size);
  // Monotonic alignments of `target` onto `frames`, each letter >= 1 frame.
  static AlignmentGraph constrained(std::size_t frames, const Target& target);

  Kind kind() const { return kind_; }
  std::size_t frames() const { return frames_; }
  std::size_t alphabet_size() const { return alphabet_size_; }
  const std::vector<int>& states() const { return states_; }
  bool feasible() const;

 private:
  Kind kind_ = Kind::kFull;
  std::size_t frames_ = 0;
  std::size_t alphabet_size_ = 0;
  std::vector<int> states_;
};

// emissions: frames x letters; transitions: letters x letters, [from][to].
// Returns -infinity for an infeasible constrained graph.
double forward_score(const Matrix& emissions, const Matrix& transitions,
                     const AlignmentGraph& graph);

// log Z(full) - log Z(target). Throws kInfeasibleAlignment if the target
// cannot be aligned to the available frames.
double asg_loss(const Matrix& emissions, const Matrix& transitions, const Target& target);

struct AsgGradients {
  double loss = 0.0;
  Matrix emissions;    // d loss / d f
  Matrix transitions;  // d loss / d g
};

AsgGradients asg_gradients(const Matrix& emissions, const Matrix& transitions,
                           const Target& target);

struct ViterbiResult {
  std::vector<int> path;
  double score = kNegInf;
};

// Best single path; ties go to the lower letter index.
ViterbiResult viterbi(const Matrix& emissions, const Matrix& transitions,
                      const AlignmentGraph& graph);

// Score of one explicit path (used by oracles and traceback checks).
double path_score(const Matrix& emissions, const Matrix& transitions,
                  const std::vector<int>& path);

}  // namespace convsr::asg
