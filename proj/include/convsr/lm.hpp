// Word-level language models used by the decoder: a back-off n-gram model
// read from ARPA text, and a gated convolutional LM built from residual
// bottleneck blocks. All scores are natural-log probabilities.
#pragma once

#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "convsr/common.hpp"
#include "convsr/nn.hpp"
#include "convsr/params.hpp"

namespace convsr::lm {

class Vocabulary {
 public:
  static constexpr const char* kUnknown = "<unk>";
  static constexpr const char* kBegin = "<s>";
  static constexpr const char* kEnd = "</s>";

  Vocabulary();  // just the three special tokens
  explicit Vocabulary(const std::vector<std::string>& words);

  // Adds a token if absent; returns its index.
  int add(const std::string& token);
  // Unknown tokens map to unknown().
  int index(const std::string& token) const;
  bool contains(const std::string& token) const;
  const std::string& token(int index) const { return tokens_.at(static_cast<std::size_t>(index)); }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  int unknown() const { return unk_; }
  int begin() const { return bos_; }
  int end() const { return eos_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  int unk_ = 0, bos_ = 1, eos_ = 2;
};

// Token history used to score the next token. Models keep only the suffix
// that can influence future scores, so equal states score identically.
struct LmState {
  std::vector<int> tokens;
  bool operator==(const LmState&) const = default;
};

struct LmStateHash {
  std::size_t operator()(const LmState& s) const;
};

class LanguageModel {
 public:
  virtual ~LanguageModel() = default;

  virtual const Vocabulary& vocab() const = 0;
  // Longest history the model can use (n - 1 for an n-gram model).
  virtual std::size_t max_context() const = 0;
  // log P(token | state); writes the successor state when `next` is given.
  virtual double score(const LmState& state, int token, LmState* next = nullptr) const = 0;
  // log P(. | state) for every vocabulary entry.
  virtual std::vector<double> score_all(const LmState& state) const;
  // Sum of log P over words followed by </s>, starting from <s>.
  virtual double sentence_log_prob(const std::vector<int>& words) const;

  LmState start_state() const;
  LmState advance(const LmState& state, int token) const;

  // Restricts scoring to the last `limit` history tokens (nullopt: no limit).
  void set_context_limit(std::optional<std::size_t> limit);
  std::optional<std::size_t> context_limit() const { return context_limit_; }
  std::size_t effective_context() const;

 protected:
  LmState truncate(LmState s) const;

 private:
  std::optional<std::size_t> context_limit_;
};

// ---------------------------------------------------------------------------
// Back-off n-gram

struct NGramEntry {
  double log_prob = 0.0;  // natural log
  double backoff = 0.0;   // natural log
  bool has_backoff = false;
};

struct VectorHash {
  std::size_t operator()(const std::vector<int>& v) const;
};

class NGramModel : public LanguageModel {
 public:
  NGramModel() = default;
  NGramModel(Vocabulary vocab, std::size_t order);

  const Vocabulary& vocab() const override { return vocab_; }
  std::size_t max_context() const override { return order_ - 1; }
  double score(const LmState& state, int token, LmState* next = nullptr) const override;

  std::size_t order() const { return order_; }
  // Entries of order k (1-based), keyed by token indices.
  const std::unordered_map<std::vector<int>, NGramEntry, VectorHash>& entries(std::size_t k) const {
    return tables_.at(k - 1);
  }
  void set_entry(const std::vector<int>& ngram, NGramEntry e);
  NGramEntry* find(const std::vector<int>& ngram);

  // Back-off recursion over an explicit context (oldest token first).
  double log_prob(const std::vector<int>& context, int token) const;

 private:
  Vocabulary vocab_;
  std::size_t order_ = 1;
  std::vector<std::unordered_map<std::vector<int>, NGramEntry, VectorHash>> tables_;
};

// Parses ARPA text. Errors name the line number and, for count mismatches,
// the offending section.
NGramModel load_arpa(std::istream& in);
NGramModel load_arpa_file(const std::string& path);
void write_arpa(std::ostream& out, const NGramModel& model);

// Absolute-discount back-off estimate from tokenized sentences. Unigrams are
// add-one smoothed over the observed vocabulary plus <unk> and </s>.
NGramModel estimate_ngram(const std::vector<std::vector<std::string>>& sentences,
                          std::size_t order, double discount = 0.5);

// ---------------------------------------------------------------------------
// Gated convolutional LM

struct GcnnConfig {
  std::size_t vocab_size = 0;
  std::size_t num_blocks = 4;
  std::size_t embed_dim = 128;
  std::size_t bottleneck_dim = 64;
  std::size_t mid_kernel_width = 5;
  double dropout_rate = 0.0;

  void validate() const;
};

struct GcnnBlock {
  nn::WeightNormConv down;  // 1x1, embed -> 2*bottleneck
  nn::WeightNormConv mid;   // causal, bottleneck -> 2*bottleneck
  nn::WeightNormConv up;    // 1x1, bottleneck -> 2*embed
};

struct GcnnTrace {
  std::vector<int> tokens;
  std::vector<Matrix> block_inputs;  // embed x T
  struct Block {
    Matrix pre_down, act_down, pre_mid, act_mid, pre_up;
    Matrix mask;  // dropout on the block output, empty when off
  };
  std::vector<Block> blocks;
  Matrix top;       // embed x T
  Matrix log_probs; // T x vocab
};

class GcnnLm : public LanguageModel {
 public:
  GcnnLm() = default;
  GcnnLm(Vocabulary vocab, const GcnnConfig& config, std::uint64_t seed);

  const Vocabulary& vocab() const override { return vocab_; }
  const GcnnConfig& config() const { return config_; }
  // Tokens that can reach one output position.
  std::size_t receptive_field() const;
  std::size_t max_context() const override { return receptive_field(); }

  double score(const LmState& state, int token, LmState* next = nullptr) const override;
  std::vector<double> score_all(const LmState& state) const override;
  double sentence_log_prob(const std::vector<int>& words) const override;

  // Row t is log P(next token | tokens[0..t]).
  Matrix forward(const std::vector<int>& tokens, std::mt19937_64* training_rng = nullptr,
                 GcnnTrace* trace = nullptr) const;
  GradientList backward(const GcnnTrace& trace, const Matrix& grad_log_probs) const;

  ParameterList parameters();

 private:
  Vocabulary vocab_;
  GcnnConfig config_;
  Matrix embedding_;  // vocab x embed
  std::vector<GcnnBlock> blocks_;
  nn::WeightNormConv projection_;  // 1x1, embed -> vocab
};

struct LmTrainSettings {
  OptimizerSettings optimizer{0.5, 0.9, 0.5, MomentumKind::kNesterov};
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  std::uint64_t seed = 1;
};

struct LmEpochReport {
  std::size_t epoch = 0;
  double train_perplexity = 0.0;
  double valid_perplexity = 0.0;
};

// Minimizes mean next-token NLL (sentence end included) with Nesterov SGD
// and global-norm clipping. `on_epoch` runs after each epoch.
std::vector<LmEpochReport> gcnn_train(
    GcnnLm& model, const std::vector<std::vector<int>>& train,
    const std::vector<std::vector<int>>& valid, const LmTrainSettings& settings,
    const std::function<void(const LmEpochReport&, const GcnnLm&)>& on_epoch = {});

// exp(mean NLL per token); each sentence contributes its words and </s>.
double perplexity(const LanguageModel& lm, const std::vector<std::vector<int>>& corpus);

// Scores as if only the last `limit` history tokens existed. `history` starts
// with <s>.
double score_with_context_limit(const LanguageModel& lm, const std::vector<int>& history,
                                int token, std::size_t limit);

std::vector<std::vector<int>> index_corpus(const Vocabulary& vocab,
                                           const std::vector<std::vector<std::string>>& corpus);

}  // namespace convsr::lm
