// Data handling, synthetic tasks, acoustic training, evaluation and the LM
// studies that sit on top of the model modules.
#pragma once

#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "convsr/acoustic.hpp"
#include "convsr/checkpoint.hpp"
#include "convsr/criterion.hpp"
#include "convsr/decoder.hpp"
#include "convsr/frontend.hpp"
#include "convsr/lm.hpp"
#include "convsr/metrics.hpp"

namespace convsr::pipeline {

// ---------------------------------------------------------------------------
// Audio and manifests

// PCM 16-bit signed little-endian, mono, 16 kHz. Anything else is rejected
// with an error naming the offending field.
frontend::Waveform read_wav(const std::string& path);
// Samples are clamped to [-1, 1] and scaled by 32768 (saturating at 32767).
void write_wav(const std::string& path, const frontend::Waveform& wave);

struct ManifestEntry {
  std::string id;
  std::string audio;  // absolute, or relative to the manifest's directory
  std::string text;
};

struct Manifest {
  std::string split;
  std::vector<ManifestEntry> entries;
};

// JSON Lines: {"id", "audio", "text"} per line. Audio paths are resolved
// against the manifest directory; ids must be unique and files readable.
Manifest load_manifest(const std::string& path);
void save_manifest(const std::string& path, const Manifest& manifest);

// Lowercase, punctuation stripped, whitespace collapsed.
std::string normalize_transcript(const std::string& text);

// Training target: silence, word letters, silence between words, silence.
// Spellings come from the lexicon when present, otherwise the word's
// characters.
asg::Target transcript_target(const std::vector<std::string>& words,
                              const decoder::Lexicon& lexicon, const asg::Alphabet& alphabet);

// ---------------------------------------------------------------------------
// Synthetic "spoken letters" task

// Sentence = heads[i] fillers[j] tails[i]. The tails are meant to share one
// spelling, so only a history reaching back two words identifies them.
struct ContextGrammar {
  std::vector<std::string> heads;
  std::vector<std::string> fillers;
  std::vector<std::string> tails;
};

struct SyntheticTaskSpec {
  std::vector<std::string> letters{"a", "b", "c", "d", "e"};
  std::vector<double> tone_hz{300, 600, 1000, 1600, 2400};
  double letter_ms = 120.0;
  double silence_ms = 60.0;      // between words, and before/after the sentence
  double duration_jitter = 0.1;  // relative, uniform
  double frequency_jitter = 0.02;
  double min_amplitude = 0.3, max_amplitude = 0.7;
  double ramp_ms = 5.0;
  // White noise at this SNR (dB) against the tone power; nullopt is clean.
  std::optional<double> snr_db;
  double sample_rate = 16000.0;

  decoder::Lexicon lexicon;
  std::size_t min_words = 1, max_words = 3;
  std::optional<ContextGrammar> grammar;

  std::size_t train_size = 500, dev_size = 50, test_size = 50;

  void validate() const;
};

// Five-letter tone task with a ten-word lexicon.
SyntheticTaskSpec default_tone_task();
// Same tones; homophone tails that only a two-word history can resolve.
SyntheticTaskSpec context_tone_task();

// Word sequences drawn for one split, deterministic in (seed, split).
std::vector<std::vector<std::string>> sample_sentences(const SyntheticTaskSpec& spec,
                                                       std::size_t count, std::uint64_t seed,
                                                       const std::string& split);

frontend::Waveform render_sentence(const SyntheticTaskSpec& spec,
                                   const std::vector<std::string>& words, std::mt19937_64& rng);

struct SyntheticDataset {
  Manifest train, dev, test;
  std::string lexicon_path;
};

// Writes <dir>/<split>/<id>.wav, <dir>/<split>.jsonl, <dir>/lexicon.txt and
// <dir>/letters.txt. Bit-identical for a fixed seed.
SyntheticDataset synthesize_dataset(const SyntheticTaskSpec& spec, std::uint64_t seed,
                                    const std::string& dir);

// ---------------------------------------------------------------------------
// Acoustic model bundle: front-end + conv-GLU model + ASG transitions

enum class FrontendKind { kLearnable, kMel };

std::string frontend_kind_name(FrontendKind k);
FrontendKind parse_frontend_kind(const std::string& s);

struct AcousticBundle {
  FrontendKind kind = FrontendKind::kLearnable;
  frontend::FrontendConfig frontend_config;
  frontend::LearnableFrontend frontend;  // unused for kMel
  acoustic::AcousticModel model;
  asg::Alphabet alphabet;
  Matrix transitions;

  static AcousticBundle create(FrontendKind kind, const frontend::FrontendConfig& fe,
                               const acoustic::AcousticModelConfig& am,
                               const asg::Alphabet& alphabet, std::uint64_t seed);

  frontend::FeatureMap features(const frontend::Waveform& wave) const;
  acoustic::EmissionTable emissions(const frontend::Waveform& wave, bool normalized = false) const;

  // Front-end tensors (learnable only), acoustic model, then transitions.
  ParameterList parameters();

  Checkpoint to_checkpoint() const;
  static AcousticBundle from_checkpoint(const Checkpoint& ckpt);
};

// Desk acoustic model: four conv-GLU layers 32/64/96/128, width 13.
acoustic::AcousticModelConfig default_acoustic_config(std::size_t input_channels,
                                                      std::size_t alphabet_size,
                                                      double dropout = 0.25);

struct AcousticTrainSettings {
  OptimizerSettings optimizer{0.5, 0.9, 0.2, MomentumKind::kClassical};
  std::size_t epochs = 20;
  std::size_t batch_size = 4;
  double time_budget_seconds = 0.0;  // 0: unlimited; checked between batches
  double plateau_factor = 0.5;
  int plateau_patience = 2;  // epochs without dev-loss improvement before decay
  std::uint64_t seed = 1;
};

struct AcousticEpochReport {
  std::size_t epoch = 0;
  double train_loss = 0.0;  // mean per utterance
  double dev_loss = 0.0;    // mean per utterance, no dropout
  double learning_rate = 0.0;
  double elapsed_seconds = 0.0;  // CPU seconds since training started
  std::size_t skipped = 0;       // utterances with infeasible targets
};

struct LoadedUtterance {
  std::string id;
  frontend::Waveform wave;
  std::vector<std::string> words;
};

std::vector<LoadedUtterance> load_utterances(const Manifest& manifest);

// Joint SGD over front-end (when learnable), network and transitions under
// the ASG loss. Batch gradients are computed per utterance in parallel and
// summed in utterance order. Returns one report per completed epoch.
std::vector<AcousticEpochReport> train_acoustic(
    AcousticBundle& bundle, const std::vector<LoadedUtterance>& train,
    const std::vector<LoadedUtterance>& dev, const decoder::Lexicon& lexicon,
    const AcousticTrainSettings& settings,
    const std::function<void(const AcousticEpochReport&, const AcousticBundle&)>& on_epoch = {});

// Mean ASG loss per utterance (no dropout); infeasible utterances skipped.
double mean_asg_loss(const AcousticBundle& bundle, const std::vector<LoadedUtterance>& set,
                     const decoder::Lexicon& lexicon, std::size_t* skipped = nullptr);

// Process CPU time in seconds.
double cpu_seconds();

// ---------------------------------------------------------------------------
// Evaluation

struct UtteranceResult {
  std::string id;
  std::vector<std::string> reference;
  std::vector<std::string> hypothesis;
  metrics::EditCounts words;
  metrics::EditCounts chars;
  std::string error;  // decode failure message, empty on success
};

struct EvalReport {
  double wer = 0.0;
  double cer = 0.0;
  metrics::EditCounts words;
  metrics::EditCounts chars;
  std::size_t failures = 0;
  std::vector<UtteranceResult> utterances;
};

struct EvalUtterance {
  std::string id;
  Matrix emissions;
  std::vector<std::string> reference;
};

std::vector<EvalUtterance> compute_emissions(const AcousticBundle& bundle,
                                             const std::vector<LoadedUtterance>& set);

// Decodes every utterance (in parallel, reduced in input order). Failures
// are recorded per utterance and scored against an empty hypothesis.
EvalReport evaluate(const std::vector<EvalUtterance>& set, const Matrix& transitions,
                    const decoder::LexiconTrie& trie, const asg::Alphabet& alphabet,
                    const lm::LanguageModel& lm, const decoder::DecoderOptions& opts);

std::vector<decoder::ValidationUtterance> as_validation(const std::vector<EvalUtterance>& set);

// Characters of the space-joined words (spaces included), for CER.
std::vector<std::string> char_tokens(const std::vector<std::string>& words);

// ---------------------------------------------------------------------------
// LM studies

struct DecodeSetup {
  const std::vector<EvalUtterance>* utterances = nullptr;
  const Matrix* transitions = nullptr;
  const decoder::LexiconTrie* trie = nullptr;
  const asg::Alphabet* alphabet = nullptr;
  decoder::DecoderOptions options;
};

struct PplWerRow {
  std::string name;
  double perplexity = 0.0;
  double wer = 0.0;
};

// One row per LM, in order: corpus perplexity and WER with fixed options.
std::vector<PplWerRow> perplexity_wer_study(const std::vector<const lm::LanguageModel*>& lms,
                                            const std::vector<std::string>& names,
                                            const std::vector<std::vector<int>>& ppl_corpus,
                                            const DecodeSetup& setup);

struct ContextWerRow {
  std::size_t context = 0;
  double wer = 0.0;
};

// Decodes with the LM history truncated to each limit; limits must be
// non-decreasing. The LM's own limit is restored afterwards.
std::vector<ContextWerRow> context_wer_study(lm::LanguageModel& lm,
                                             const std::vector<std::size_t>& limits,
                                             const DecodeSetup& setup);

// Spearman rank correlation with average ranks for ties; NaN when either
// side is constant.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

void write_ppl_wer_csv(const std::string& path, const std::vector<PplWerRow>& rows);
void write_context_wer_csv(const std::string& path, const std::vector<ContextWerRow>& rows);
void write_tune_csv(const std::string& path, const decoder::TuneResult& result);

// ---------------------------------------------------------------------------
// LM persistence

Checkpoint gcnn_to_checkpoint(const lm::GcnnLm& model);
lm::GcnnLm gcnn_from_checkpoint(const Checkpoint& ckpt);

// Reads an ARPA file or a GCNN checkpoint, by content.
std::unique_ptr<lm::LanguageModel> load_language_model(const std::string& path);

// Sentences of a manifest or plain text file (one sentence per line),
// normalized and split into words.
std::vector<std::vector<std::string>> read_text_corpus(const std::string& path);

// ---------------------------------------------------------------------------
// key = value configuration files: '#' starts a comment, blank lines are
// ignored, later keys override earlier ones.

std::map<std::string, std::string> parse_config(const std::string& path);

}  // namespace convsr::pipeline
