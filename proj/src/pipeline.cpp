#include "convsr/pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

namespace convsr::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// WAV

namespace {

std::uint32_t le32(const unsigned char* p) {
  return std::uint32_t{p[0]} | std::uint32_t{p[1]} << 8 | std::uint32_t{p[2]} << 16 |
         std::uint32_t{p[3]} << 24;
}
std::uint16_t le16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | p[1] << 8);
}
void put32(std::ostream& o, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  o.write(reinterpret_cast<const char*>(b), 4);
}
void put16(std::ostream& o, std::uint16_t v) {
  const unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  o.write(reinterpret_cast<const char*>(b), 2);
}

}  // namespace

frontend::Waveform read_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open audio file: " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto fail = [&](const std::string& what) { throw Error(ErrorKind::kParse, path + ": " + what); };
  if (bytes.size() < 12) fail("file too short for a RIFF header (" + std::to_string(bytes.size()) + " bytes)");
  if (std::memcmp(bytes.data(), "RIFF", 4) != 0) fail("missing RIFF signature");
  if (std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) fail("RIFF form type is not WAVE");

  bool have_fmt = false;
  std::size_t pos = 12;
  frontend::Waveform wave;
  while (pos + 8 <= bytes.size()) {
    const std::string id(reinterpret_cast<const char*>(bytes.data() + pos), 4);
    const std::size_t size = le32(bytes.data() + pos + 4);
    const std::size_t body = pos + 8;
    if (size > bytes.size() - body) fail("chunk '" + id + "' declares " + std::to_string(size) +
                                         " bytes but only " + std::to_string(bytes.size() - body) + " remain");
    if (id == "fmt ") {
      if (size < 16) fail("fmt chunk too short (" + std::to_string(size) + " bytes)");
      const unsigned char* f = bytes.data() + body;
      const auto format = le16(f);
      const auto channels = le16(f + 2);
      const auto rate = le32(f + 4);
      const auto block_align = le16(f + 12);
      const auto bits = le16(f + 14);
      if (format != 1) fail("unsupported encoding (format tag " + std::to_string(format) + "), expected PCM (1)");
      if (channels != 1) fail("expected mono audio, got " + std::to_string(channels) + " channels");
      if (rate != 16000) fail("expected 16000 Hz sample rate, got " + std::to_string(rate));
      if (bits != 16) fail("expected 16 bits per sample, got " + std::to_string(bits));
      if (block_align != 2) fail("inconsistent block align " + std::to_string(block_align) + " for 16-bit mono");
      wave.sample_rate = rate;
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) fail("data chunk before fmt chunk");
      if (size % 2 != 0) fail("data chunk size " + std::to_string(size) + " is not a whole number of samples");
      wave.samples.resize(size / 2);
      for (std::size_t i = 0; i < wave.samples.size(); ++i)
        wave.samples[i] = static_cast<std::int16_t>(le16(bytes.data() + body + 2 * i)) / 32768.0;
      return wave;
    }
    pos = body + size + (size & 1);
  }
  if (!have_fmt) fail("missing fmt chunk");
  fail("missing data chunk");
  return wave;
}

void write_wav(const std::string& path, const frontend::Waveform& wave) {
  if (wave.sample_rate != 16000.0)
    throw Error(ErrorKind::kConfiguration, "only 16000 Hz audio can be written");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::kIo, "cannot write audio file: " + path);
  const auto data_bytes = static_cast<std::uint32_t>(wave.samples.size() * 2);
  out.write("RIFF", 4);
  put32(out, 36 + data_bytes);
  out.write("WAVEfmt ", 8);
  put32(out, 16);
  put16(out, 1);
  put16(out, 1);
  put32(out, 16000);
  put32(out, 32000);
  put16(out, 2);
  put16(out, 16);
  out.write("data", 4);
  put32(out, data_bytes);
  for (double s : wave.samples) {
    // Same 1/32768 scale as the reader, so decoded samples re-encode exactly.
    const long q = std::clamp(std::lround(std::clamp(s, -1.0, 1.0) * 32768.0), -32768L, 32767L);
    put16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
  if (!out) throw Error(ErrorKind::kIo, "write failed: " + path);
}

// ---------------------------------------------------------------------------
// Manifests and text

Manifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open manifest: " + path);
  Manifest m;
  m.split = fs::path(path).stem().string();
  const fs::path base = fs::path(path).parent_path();
  std::set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path + ":" + std::to_string(lineno);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw Error(ErrorKind::kParse, where + ": " + e.what());
    }
    ManifestEntry e;
    for (const char* key : {"id", "audio", "text"})
      if (!j.contains(key) || !j[key].is_string())
        throw Error(ErrorKind::kParse, where + ": missing string field '" + key + "'");
    e.id = j["id"];
    e.text = j["text"];
    fs::path audio = j["audio"].get<std::string>();
    if (audio.is_relative()) audio = base / audio;
    e.audio = audio.string();
    if (!ids.insert(e.id).second) throw Error(ErrorKind::kParse, where + ": duplicate id '" + e.id + "'");
    if (!std::ifstream(e.audio)) throw Error(ErrorKind::kIo, where + ": audio not readable: " + e.audio);
    m.entries.push_back(std::move(e));
  }
  return m;
}

void save_manifest(const std::string& path, const Manifest& manifest) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::kIo, "cannot write manifest: " + path);
  for (const auto& e : manifest.entries)
    out << json{{"id", e.id}, {"audio", e.audio}, {"text", e.text}}.dump() << '\n';
}

std::string normalize_transcript(const std::string& text) {
  std::string out;
  bool space = false;
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      space = !out.empty();
      continue;
    }
    if (std::ispunct(c) && c != '\'' && c != '_') continue;
    if (space) out.push_back(' ');
    space = false;
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

asg::Target transcript_target(const std::vector<std::string>& words, const decoder::Lexicon& lexicon,
                              const asg::Alphabet& alphabet) {
  std::vector<int> raw{alphabet.silence()};
  for (const auto& w : words) {
    auto it = std::find_if(lexicon.begin(), lexicon.end(), [&](const auto& e) { return e.word == w; });
    if (it != lexicon.end()) {
      for (const auto& l : it->spelling) raw.push_back(alphabet.index(l));
    } else {
      for (char c : w) raw.push_back(alphabet.index(std::string(1, c)));
    }
    raw.push_back(alphabet.silence());
  }
  return asg::encode_target(raw, alphabet);
}

// ---------------------------------------------------------------------------
// Synthetic task

void SyntheticTaskSpec::validate() const {
  if (letters.empty() || letters.size() != tone_hz.size())
    throw Error(ErrorKind::kConfiguration, "synthetic task needs one tone per letter");
  std::set<double> tones(tone_hz.begin(), tone_hz.end());
  if (tones.size() != tone_hz.size()) throw Error(ErrorKind::kConfiguration, "letter tones must be distinct");
  for (double f : tone_hz)
    if (!(f > 0) || f * (1 + frequency_jitter) >= sample_rate / 2)
      throw Error(ErrorKind::kConfiguration, "tone " + std::to_string(f) + " Hz is not below Nyquist");
  const double stride_ms = 10.0;
  if (letter_ms * (1 - duration_jitter) < stride_ms || silence_ms * (1 - duration_jitter) < stride_ms)
    throw Error(ErrorKind::kConfiguration, "letter and silence durations must cover a frame stride");
  if (lexicon.empty()) throw Error(ErrorKind::kConfiguration, "synthetic task has an empty lexicon");
  if (min_words < 1 || max_words < min_words)
    throw Error(ErrorKind::kConfiguration, "bad sentence length range");
  for (const auto& e : lexicon)
    for (const auto& l : e.spelling)
      if (std::find(letters.begin(), letters.end(), l) == letters.end())
        throw Error(ErrorKind::kVocabulary, "word '" + e.word + "' uses unknown letter '" + l + "'");
  if (grammar) {
    if (grammar->heads.empty() || grammar->fillers.empty() || grammar->heads.size() != grammar->tails.size())
      throw Error(ErrorKind::kConfiguration, "context grammar needs heads, fillers and one tail per head");
  }
}

namespace {

decoder::LexiconEntry entry(const std::string& word, const std::string& letters) {
  decoder::LexiconEntry e{word, {}};
  for (char c : letters) e.spelling.emplace_back(1, c);
  return e;
}

std::uint64_t split_code(const std::string& split) {
  if (split == "train") return 1;
  if (split == "dev") return 2;
  if (split == "test") return 3;
  return 4 + std::hash<std::string>{}(split) % 1000;
}

}  // namespace

SyntheticTaskSpec default_tone_task() {
  SyntheticTaskSpec s;
  for (const char* w : {"a", "ab", "ad", "bad", "be", "bed", "cab", "dab", "ace", "dec"})
    s.lexicon.push_back(entry(w, w));
  return s;
}

SyntheticTaskSpec context_tone_task() {
  SyntheticTaskSpec s;
  for (const char* w : {"bad", "cab", "a", "be", "ace", "ad"}) s.lexicon.push_back(entry(w, w));
  s.lexicon.push_back(entry("dace", "dace"));
  s.lexicon.push_back(entry("dase", "dace"));
  s.grammar = ContextGrammar{{"bad", "cab"}, {"a", "be", "ace", "ad"}, {"dace", "dase"}};
  s.min_words = s.max_words = 3;
  return s;
}

std::vector<std::vector<std::string>> sample_sentences(const SyntheticTaskSpec& spec,
                                                       std::size_t count, std::uint64_t seed,
                                                       const std::string& split) {
  std::seed_seq ss{seed, split_code(split), std::uint64_t{0x5e47}};
  std::mt19937_64 rng(ss);
  auto pick = [&](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };
  std::vector<std::vector<std::string>> out;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<std::string> words;
    if (spec.grammar) {
      const auto& g = *spec.grammar;
      const std::size_t h = pick(g.heads.size());
      words = {g.heads[h], g.fillers[pick(g.fillers.size())], g.tails[h]};
    } else {
      const std::size_t n = spec.min_words + pick(spec.max_words - spec.min_words + 1);
      for (std::size_t k = 0; k < n; ++k) words.push_back(spec.lexicon[pick(spec.lexicon.size())].word);
    }
    out.push_back(std::move(words));
  }
  return out;
}

frontend::Waveform render_sentence(const SyntheticTaskSpec& spec,
                                   const std::vector<std::string>& words, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0), amp(spec.min_amplitude, spec.max_amplitude),
      phase(0.0, 2 * std::numbers::pi);
  const double sr = spec.sample_rate;
  auto samples_for = [&](double ms) {
    return static_cast<std::size_t>(std::lround(ms * (1 + spec.duration_jitter * u(rng)) * sr / 1000.0));
  };
  frontend::Waveform w;
  w.sample_rate = sr;
  auto silence = [&] { w.samples.resize(w.samples.size() + samples_for(spec.silence_ms), 0.0); };
  double tone_energy = 0.0;
  std::size_t tone_samples = 0;
  const auto ramp = static_cast<std::size_t>(std::lround(spec.ramp_ms * sr / 1000.0));

  silence();
  for (std::size_t wi = 0; wi < words.size(); ++wi) {
    if (wi > 0) silence();
    auto it = std::find_if(spec.lexicon.begin(), spec.lexicon.end(),
                           [&](const auto& e) { return e.word == words[wi]; });
    if (it == spec.lexicon.end())
      throw Error(ErrorKind::kVocabulary, "word '" + words[wi] + "' not in the task lexicon");
    for (const auto& l : it->spelling) {
      const auto li = static_cast<std::size_t>(
          std::find(spec.letters.begin(), spec.letters.end(), l) - spec.letters.begin());
      const double f = spec.tone_hz[li] * (1 + spec.frequency_jitter * u(rng));
      const double a = amp(rng), ph = phase(rng);
      const std::size_t n = samples_for(spec.letter_ms);
      for (std::size_t i = 0; i < n; ++i) {
        double env = 1.0;
        if (ramp > 0 && i < ramp) env = 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(i) / static_cast<double>(ramp));
        if (ramp > 0 && n - 1 - i < ramp)
          env = std::min(env, 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(n - 1 - i) / static_cast<double>(ramp)));
        const double v = a * env * std::sin(2 * std::numbers::pi * f * static_cast<double>(i) / sr + ph);
        tone_energy += v * v;
        w.samples.push_back(v);
      }
      tone_samples += n;
    }
  }
  silence();

  if (spec.snr_db && tone_samples > 0) {
    const double power = tone_energy / static_cast<double>(tone_samples);
    const double sigma = std::sqrt(power / std::pow(10.0, *spec.snr_db / 10.0));
    std::normal_distribution<double> noise(0.0, sigma);
    for (double& s : w.samples) s += noise(rng);
  }
  double peak = 0.0;
  for (double s : w.samples) peak = std::max(peak, std::abs(s));
  if (peak > 0.99)
    for (double& s : w.samples) s *= 0.99 / peak;
  return w;
}

SyntheticDataset synthesize_dataset(const SyntheticTaskSpec& spec, std::uint64_t seed,
                                    const std::string& dir) {
  spec.validate();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::kIo, "cannot create directory " + dir + ": " + ec.message());
  SyntheticDataset ds;
  auto make = [&](const std::string& split, std::size_t count, Manifest& m) {
    m.split = split;
    const fs::path sub = fs::path(dir) / split;
    fs::create_directories(sub, ec);
    if (ec) throw Error(ErrorKind::kIo, "cannot create directory " + sub.string() + ": " + ec.message());
    const auto sentences = sample_sentences(spec, count, seed, split);
    for (std::size_t i = 0; i < sentences.size(); ++i) {
      std::seed_seq ss{seed, split_code(split), static_cast<std::uint64_t>(i), std::uint64_t{0xa0d10}};
      std::mt19937_64 rng(ss);
      std::ostringstream id;
      id << split << '-' << std::setw(5) << std::setfill('0') << i;
      const fs::path rel = fs::path(split) / (id.str() + ".wav");
      write_wav((fs::path(dir) / rel).string(), render_sentence(spec, sentences[i], rng));
      std::string text;
      for (const auto& w : sentences[i]) text += (text.empty() ? "" : " ") + w;
      m.entries.push_back({id.str(), rel.string(), text});
    }
    save_manifest((fs::path(dir) / (split + ".jsonl")).string(), m);
    for (auto& e : m.entries) e.audio = (fs::path(dir) / e.audio).string();
  };
  make("train", spec.train_size, ds.train);
  make("dev", spec.dev_size, ds.dev);
  make("test", spec.test_size, ds.test);
  ds.lexicon_path = (fs::path(dir) / "lexicon.txt").string();
  decoder::save_lexicon(ds.lexicon_path, spec.lexicon);
  std::ofstream letters(fs::path(dir) / "letters.txt");
  for (const auto& l : spec.letters) letters << l << '\n';
  if (!letters) throw Error(ErrorKind::kIo, "cannot write letters.txt in " + dir);
  return ds;
}

// ---------------------------------------------------------------------------
// Acoustic bundle

std::string frontend_kind_name(FrontendKind k) { return k == FrontendKind::kMel ? "mel" : "learnable"; }

FrontendKind parse_frontend_kind(const std::string& s) {
  if (s == "mel") return FrontendKind::kMel;
  if (s == "learnable") return FrontendKind::kLearnable;
  throw Error(ErrorKind::kConfiguration, "unknown front-end '" + s + "' (expected learnable or mel)");
}

acoustic::AcousticModelConfig default_acoustic_config(std::size_t input_channels,
                                                      std::size_t alphabet_size, double dropout) {
  auto c = acoustic::AcousticModelConfig::desk_default(input_channels, alphabet_size);
  for (auto& l : c.layers) l.dropout_rate = dropout;
  return c;
}

AcousticBundle AcousticBundle::create(FrontendKind kind, const frontend::FrontendConfig& fe,
                                      const acoustic::AcousticModelConfig& am,
                                      const asg::Alphabet& alphabet, std::uint64_t seed) {
  fe.validate();
  am.validate();
  if (am.layers.front().in_channels != fe.num_filters)
    throw Error(ErrorKind::kDimension, "acoustic model input channels must equal the filter count");
  if (am.alphabet_size != alphabet.size())
    throw Error(ErrorKind::kDimension, "acoustic model output size must equal the alphabet size");
  AcousticBundle b;
  b.kind = kind;
  b.frontend_config = fe;
  if (kind == FrontendKind::kLearnable) b.frontend = frontend::LearnableFrontend(fe, seed);
  b.model = acoustic::AcousticModel(am, seed + 1);
  b.alphabet = alphabet;
  b.transitions = Matrix(alphabet.size(), alphabet.size(), 0.0);
  return b;
}

frontend::FeatureMap AcousticBundle::features(const frontend::Waveform& wave) const {
  if (kind == FrontendKind::kMel) return frontend::mel_frontend(wave, frontend_config.num_filters, frontend_config);
  return frontend.forward(wave);
}

acoustic::EmissionTable AcousticBundle::emissions(const frontend::Waveform& wave, bool normalized) const {
  return model.forward(features(wave), normalized);
}

ParameterList AcousticBundle::parameters() {
  ParameterList p;
  if (kind == FrontendKind::kLearnable) p = frontend.parameters();
  for (auto& r : model.parameters()) p.push_back(r);
  p.push_back({"asg.transitions", std::span<double>(transitions.values())});
  return p;
}

Checkpoint AcousticBundle::to_checkpoint() const {
  AcousticBundle copy = *this;
  Checkpoint c;
  const auto& fe = frontend_config;
  json layers = json::array();
  for (const auto& l : model.config().layers)
    layers.push_back({{"in", l.in_channels}, {"out", l.out_channels}, {"kernel", l.kernel_width},
                      {"stride", l.stride}, {"dropout", l.dropout_rate}});
  c.meta = {{"type", "acoustic"},
            {"frontend", frontend_kind_name(kind)},
            {"frontend_config",
             {{"num_filters", fe.num_filters}, {"filter_width_ms", fe.filter_width_ms},
              {"lowpass_width_ms", fe.lowpass_width_ms}, {"stride_ms", fe.stride_ms},
              {"log_epsilon", fe.log_epsilon}, {"norm_epsilon", fe.norm_epsilon},
              {"sample_rate", fe.sample_rate}}},
            {"layers", layers},
            {"alphabet", alphabet.tokens()},
            {"silence", alphabet.token(alphabet.silence())},
            {"repetition", alphabet.token(alphabet.repetition())}};
  c.add(copy.parameters());
  return c;
}

AcousticBundle AcousticBundle::from_checkpoint(const Checkpoint& ckpt) {
  const auto& m = ckpt.meta;
  try {
    if (m.at("type") != "acoustic") throw Error(ErrorKind::kParse, "checkpoint is not an acoustic model");
    frontend::FrontendConfig fe;
    const auto& f = m.at("frontend_config");
    fe.num_filters = f.at("num_filters");
    fe.filter_width_ms = f.at("filter_width_ms");
    fe.lowpass_width_ms = f.at("lowpass_width_ms");
    fe.stride_ms = f.at("stride_ms");
    fe.log_epsilon = f.at("log_epsilon");
    fe.norm_epsilon = f.at("norm_epsilon");
    fe.sample_rate = f.at("sample_rate");
    asg::Alphabet alphabet(m.at("alphabet").get<std::vector<std::string>>(), m.at("silence"),
                           m.at("repetition"));
    acoustic::AcousticModelConfig am;
    am.alphabet_size = alphabet.size();
    for (const auto& l : m.at("layers"))
      am.layers.push_back({l.at("in"), l.at("out"), l.at("kernel"), l.at("stride"), l.at("dropout")});
    auto b = create(parse_frontend_kind(m.at("frontend")), fe, am, alphabet, 0);
    ckpt.restore(b.parameters());
    return b;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kParse, std::string("bad acoustic checkpoint metadata: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Training

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

std::vector<LoadedUtterance> load_utterances(const Manifest& manifest) {
  std::vector<LoadedUtterance> out(manifest.entries.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto& e = manifest.entries[i];
    out[i] = {e.id, read_wav(e.audio), metrics::split_words(normalize_transcript(e.text))};
  }
  return out;
}

namespace {

struct UtteranceGrad {
  double loss = 0.0;
  GradientList grads;
  bool skipped = false;
};

// Loss and gradients for one utterance, in parameters() order. Front-end
// features are recomputed for learnable front-ends and taken from `cached`
// otherwise.
UtteranceGrad utterance_gradients(const AcousticBundle& b, const frontend::Waveform& wave,
                                  const frontend::FeatureMap* cached, const asg::Target& target,
                                  std::mt19937_64* dropout_rng) {
  UtteranceGrad out;
  frontend::FrontendTrace fe_trace;
  frontend::FeatureMap feats =
      b.kind == FrontendKind::kLearnable ? b.frontend.forward(wave, &fe_trace) : *cached;
  if (target.encoded.size() > feats.frames()) {
    out.skipped = true;
    return out;
  }
  acoustic::ForwardTrace trace;
  const auto em = b.model.forward(feats, false, dropout_rng, &trace);
  auto ag = asg::asg_gradients(em.scores, b.transitions, target);
  out.loss = ag.loss;
  auto mg = b.model.backward(trace, ag.emissions);
  if (b.kind == FrontendKind::kLearnable) {
    for (auto& g : frontend::LearnableFrontend::flatten(b.frontend.backward(fe_trace, mg.input)))
      out.grads.push_back(std::move(g));
  }
  for (auto& g : mg.params) out.grads.push_back(std::move(g));
  out.grads.push_back(std::move(ag.transitions.values()));
  return out;
}

std::mt19937_64 utterance_rng(std::uint64_t seed, std::size_t epoch, std::size_t index) {
  std::seed_seq ss{seed, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(index),
                   std::uint64_t{0xd40}};
  return std::mt19937_64(ss);
}

}  // namespace

double mean_asg_loss(const AcousticBundle& bundle, const std::vector<LoadedUtterance>& set,
                     const decoder::Lexicon& lexicon, std::size_t* skipped) {
  std::vector<double> losses(set.size(), std::numeric_limits<double>::quiet_NaN());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(set.size()); ++i) {
    const auto& u = set[static_cast<std::size_t>(i)];
    const auto target = transcript_target(u.words, lexicon, bundle.alphabet);
    const auto em = bundle.emissions(u.wave);
    if (target.encoded.size() > em.frames()) continue;
    losses[static_cast<std::size_t>(i)] = asg::asg_loss(em.scores, bundle.transitions, target);
  }
  double sum = 0.0;
  std::size_t n = 0, skip = 0;
  for (double l : losses) {
    if (std::isnan(l)) {
      ++skip;
      continue;
    }
    sum += l;
    ++n;
  }
  if (skipped) *skipped = skip;
  return n ? sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

std::vector<AcousticEpochReport> train_acoustic(
    AcousticBundle& bundle, const std::vector<LoadedUtterance>& train,
    const std::vector<LoadedUtterance>& dev, const decoder::Lexicon& lexicon,
    const AcousticTrainSettings& settings,
    const std::function<void(const AcousticEpochReport&, const AcousticBundle&)>& on_epoch) {
  if (train.empty()) throw Error(ErrorKind::kConfiguration, "training set is empty");
  if (settings.batch_size < 1) throw Error(ErrorKind::kConfiguration, "batch size must be >= 1");
  const double start = cpu_seconds();

  std::vector<asg::Target> targets;
  for (const auto& u : train) targets.push_back(transcript_target(u.words, lexicon, bundle.alphabet));
  std::vector<frontend::FeatureMap> cached;
  if (bundle.kind == FrontendKind::kMel) {
    cached.resize(train.size());
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(train.size()); ++i)
      cached[static_cast<std::size_t>(i)] = bundle.features(train[static_cast<std::size_t>(i)].wave);
  }

  const ParameterList params = bundle.parameters();
  Sgd opt(settings.optimizer);
  PlateauDecay decay(settings.plateau_factor, settings.plateau_patience);
  std::vector<AcousticEpochReport> reports;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  bool out_of_time = false;

  for (std::size_t epoch = 1; epoch <= settings.epochs && !out_of_time; ++epoch) {
    std::seed_seq ss{settings.seed, static_cast<std::uint64_t>(epoch), std::uint64_t{0x5f}};
    std::mt19937_64 shuffle_rng(ss);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t counted = 0, skipped = 0;

    for (std::size_t b0 = 0; b0 < order.size(); b0 += settings.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + settings.batch_size);
      std::vector<UtteranceGrad> parts(b1 - b0);
#pragma omp parallel for schedule(dynamic)
      for (std::ptrdiff_t k = 0; k < static_cast<std::ptrdiff_t>(parts.size()); ++k) {
        const std::size_t i = order[b0 + static_cast<std::size_t>(k)];
        auto rng = utterance_rng(settings.seed, epoch, i);
        parts[static_cast<std::size_t>(k)] = utterance_gradients(
            bundle, train[i].wave, cached.empty() ? nullptr : &cached[i], targets[i], &rng);
      }
      GradientList grads = zeros_like(params);
      std::size_t used = 0;
      for (const auto& p : parts) {
        if (p.skipped) {
          ++skipped;
          continue;
        }
        accumulate(grads, p.grads);
        loss_sum += p.loss;
        ++used;
      }
      counted += used;
      if (used > 0) {
        for (auto& g : grads)
          for (double& v : g) v /= static_cast<double>(used);
        opt.step(params, std::move(grads));
      }
      if (settings.time_budget_seconds > 0 && cpu_seconds() - start > settings.time_budget_seconds) {
        out_of_time = true;
        break;
      }
    }

    AcousticEpochReport r;
    r.epoch = epoch;
    r.train_loss = counted ? loss_sum / static_cast<double>(counted) : 0.0;
    r.dev_loss = dev.empty() ? r.train_loss : mean_asg_loss(bundle, dev, lexicon);
    r.skipped = skipped;
    r.learning_rate = opt.learning_rate();
    opt.set_learning_rate(decay.observe(r.dev_loss, opt.learning_rate()));
    r.elapsed_seconds = cpu_seconds() - start;
    reports.push_back(r);
    if (on_epoch) on_epoch(r, bundle);
  }
  return reports;
}

// ---------------------------------------------------------------------------
// Evaluation

std::vector<EvalUtterance> compute_emissions(const AcousticBundle& bundle,
                                             const std::vector<LoadedUtterance>& set) {
  std::vector<EvalUtterance> out(set.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(set.size()); ++i) {
    const auto& u = set[static_cast<std::size_t>(i)];
    out[static_cast<std::size_t>(i)] = {u.id, bundle.emissions(u.wave).scores, u.words};
  }
  return out;
}

std::vector<std::string> char_tokens(const std::vector<std::string>& words) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out.emplace_back(" ");
    for (char c : words[i]) out.emplace_back(1, c);
  }
  return out;
}

EvalReport evaluate(const std::vector<EvalUtterance>& set, const Matrix& transitions,
                    const decoder::LexiconTrie& trie, const asg::Alphabet& alphabet,
                    const lm::LanguageModel& lm, const decoder::DecoderOptions& opts) {
  EvalReport rep;
  rep.utterances.resize(set.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(set.size()); ++i) {
    const auto& u = set[static_cast<std::size_t>(i)];
    auto& r = rep.utterances[static_cast<std::size_t>(i)];
    r.id = u.id;
    r.reference = u.reference;
    try {
      r.hypothesis = decoder::decode(u.emissions, transitions, trie, alphabet, lm, opts).words;
    } catch (const Error& e) {
      r.error = e.what();
    }
    r.words = metrics::edit_distance_alignment(r.reference, r.hypothesis);
    r.chars = metrics::edit_distance_alignment(char_tokens(r.reference), char_tokens(r.hypothesis));
  }
  for (const auto& r : rep.utterances) {
    rep.words += r.words;
    rep.chars += r.chars;
    if (!r.error.empty()) ++rep.failures;
  }
  rep.wer = metrics::error_rate(rep.words);
  rep.cer = metrics::error_rate(rep.chars);
  return rep;
}

std::vector<decoder::ValidationUtterance> as_validation(const std::vector<EvalUtterance>& set) {
  std::vector<decoder::ValidationUtterance> out;
  out.reserve(set.size());
  for (const auto& u : set) out.push_back({u.emissions, u.reference});
  return out;
}

// ---------------------------------------------------------------------------
// Studies

namespace {

double setup_wer(const lm::LanguageModel& lm, const DecodeSetup& s) {
  if (!s.utterances || !s.transitions || !s.trie || !s.alphabet)
    throw Error(ErrorKind::kConfiguration, "incomplete decode setup");
  return evaluate(*s.utterances, *s.transitions, *s.trie, *s.alphabet, lm, s.options).wer;
}

}  // namespace

std::vector<PplWerRow> perplexity_wer_study(const std::vector<const lm::LanguageModel*>& lms,
                                            const std::vector<std::string>& names,
                                            const std::vector<std::vector<int>>& ppl_corpus,
                                            const DecodeSetup& setup) {
  if (lms.size() != names.size()) throw Error(ErrorKind::kConfiguration, "one name per LM required");
  std::vector<PplWerRow> rows;
  for (std::size_t i = 0; i < lms.size(); ++i)
    rows.push_back({names[i], lm::perplexity(*lms[i], ppl_corpus), setup_wer(*lms[i], setup)});
  return rows;
}

std::vector<ContextWerRow> context_wer_study(lm::LanguageModel& lm,
                                             const std::vector<std::size_t>& limits,
                                             const DecodeSetup& setup) {
  if (!std::is_sorted(limits.begin(), limits.end()))
    throw Error(ErrorKind::kConfiguration, "context limits must be ascending");
  const auto saved = lm.context_limit();
  std::vector<ContextWerRow> rows;
  try {
    for (std::size_t k : limits) {
      lm.set_context_limit(k);
      rows.push_back({k, setup_wer(lm, setup)});
    }
  } catch (...) {
    lm.set_context_limit(saved);
    throw;
  }
  lm.set_context_limit(saved);
  return rows;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw Error(ErrorKind::kDimension, "spearman needs paired samples");
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = (static_cast<double>(i + j) / 2.0) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return std::numeric_limits<double>::quiet_NaN();
  return sxy / std::sqrt(sxx * syy);
}

namespace {

std::ofstream open_csv(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::kIo, "cannot write CSV: " + path);
  out << std::setprecision(10);
  return out;
}

}  // namespace

void write_ppl_wer_csv(const std::string& path, const std::vector<PplWerRow>& rows) {
  auto out = open_csv(path);
  out << "checkpoint,perplexity,wer\n";
  for (const auto& r : rows) out << r.name << ',' << r.perplexity << ',' << r.wer << '\n';
}

void write_context_wer_csv(const std::string& path, const std::vector<ContextWerRow>& rows) {
  auto out = open_csv(path);
  out << "context,wer\n";
  for (const auto& r : rows) out << r.context << ',' << r.wer << '\n';
}

void write_tune_csv(const std::string& path, const decoder::TuneResult& result) {
  auto out = open_csv(path);
  out << "alpha,beta,gamma,wer\n";
  for (const auto& r : result.grid) out << r.alpha << ',' << r.beta << ',' << r.gamma << ',' << r.wer << '\n';
}

// ---------------------------------------------------------------------------
// LM persistence

Checkpoint gcnn_to_checkpoint(const lm::GcnnLm& model) {
  lm::GcnnLm copy = model;
  const auto& c = model.config();
  Checkpoint ck;
  ck.meta = {{"type", "gcnn"},
             {"vocab", model.vocab().tokens()},
             {"config",
              {{"vocab_size", c.vocab_size}, {"num_blocks", c.num_blocks}, {"embed_dim", c.embed_dim},
               {"bottleneck_dim", c.bottleneck_dim}, {"mid_kernel_width", c.mid_kernel_width},
               {"dropout_rate", c.dropout_rate}}}};
  ck.add(copy.parameters());
  return ck;
}

lm::GcnnLm gcnn_from_checkpoint(const Checkpoint& ckpt) {
  try {
    if (ckpt.meta.at("type") != "gcnn") throw Error(ErrorKind::kParse, "checkpoint is not a GCNN LM");
    lm::Vocabulary vocab;
    for (const auto& t : ckpt.meta.at("vocab")) vocab.add(t.get<std::string>());
    const auto& j = ckpt.meta.at("config");
    lm::GcnnConfig c;
    c.vocab_size = j.at("vocab_size");
    c.num_blocks = j.at("num_blocks");
    c.embed_dim = j.at("embed_dim");
    c.bottleneck_dim = j.at("bottleneck_dim");
    c.mid_kernel_width = j.at("mid_kernel_width");
    c.dropout_rate = j.at("dropout_rate");
    lm::GcnnLm model(vocab, c, 0);
    ckpt.restore(model.parameters());
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, std::string("bad GCNN checkpoint metadata: ") + e.what());
  }
}

std::unique_ptr<lm::LanguageModel> load_language_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open language model: " + path);
  char magic[8] = {};
  in.read(magic, 8);
  if (in.gcount() == 8 && std::memcmp(magic, "CVSRCKPT", 8) == 0)
    return std::make_unique<lm::GcnnLm>(gcnn_from_checkpoint(load_checkpoint(path)));
  return std::make_unique<lm::NGramModel>(lm::load_arpa_file(path));
}

std::vector<std::vector<std::string>> read_text_corpus(const std::string& path) {
  std::vector<std::vector<std::string>> out;
  if (fs::path(path).extension() == ".jsonl") {
    for (const auto& e : load_manifest(path).entries)
      out.push_back(metrics::split_words(normalize_transcript(e.text)));
    return out;
  }
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open text corpus: " + path);
  std::string line;
  while (std::getline(in, line)) {
    auto words = metrics::split_words(normalize_transcript(line));
    if (!words.empty()) out.push_back(std::move(words));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Config files

std::map<std::string, std::string> parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open config file: " + path);
  std::map<std::string, std::string> out;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  };
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw Error(ErrorKind::kParse, path + ":" + std::to_string(lineno) + ": expected key = value");
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw Error(ErrorKind::kParse, path + ":" + std::to_string(lineno) + ": empty key");
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

}  // namespace convsr::pipeline
