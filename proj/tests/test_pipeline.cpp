#include <doctest.h>

#include <complex>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

#include "convsr/pipeline.hpp"
#include "oracles.hpp"

using namespace convsr;
using namespace convsr::pipeline;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("convsr_test_pipeline_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<unsigned char> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

void set16(std::vector<unsigned char>& b, std::size_t at, std::uint16_t v) {
  b[at] = static_cast<unsigned char>(v);
  b[at + 1] = static_cast<unsigned char>(v >> 8);
}

void set32(std::vector<unsigned char>& b, std::size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b[at + static_cast<std::size_t>(i)] = static_cast<unsigned char>(v >> (8 * i));
}

std::string wav_error(const fs::path& p) {
  try {
    read_wav(p.string());
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kParse);
    return e.what();
  }
  FAIL("expected the WAV reader to reject " << p);
  return {};
}

// Small bundle for training checks: 8 filters and two narrow conv-GLU layers.
AcousticBundle small_bundle(FrontendKind kind, const asg::Alphabet& alphabet, std::uint64_t seed) {
  frontend::FrontendConfig fe;
  fe.num_filters = 8;
  acoustic::AcousticModelConfig am;
  am.alphabet_size = alphabet.size();
  am.layers = {{8, 16, 5, 1, 0.0}, {16, 16, 5, 1, 0.0}};
  return AcousticBundle::create(kind, fe, am, alphabet, seed);
}

asg::Alphabet task_alphabet(const SyntheticTaskSpec& spec) { return asg::Alphabet::with_defaults(spec.letters); }

std::vector<LoadedUtterance> rendered(const SyntheticTaskSpec& spec, std::size_t n, std::uint64_t seed) {
  std::vector<LoadedUtterance> out;
  const auto sents = sample_sentences(spec, n, seed, "train");
  for (std::size_t i = 0; i < n; ++i) {
    std::mt19937_64 rng(seed + i);
    out.push_back({"u" + std::to_string(i), render_sentence(spec, sents[i], rng), sents[i]});
  }
  return out;
}

// Emissions whose single best path spells `words` with silence around and
// between them, one frame per encoded letter plus padding.
Matrix perfect_emissions(const std::vector<std::string>& words, const decoder::Lexicon& lex,
                         const asg::Alphabet& alphabet) {
  const auto path = transcript_target(words, lex, alphabet).encoded;
  Matrix m(path.size() + 2, alphabet.size(), -10.0);
  for (std::size_t t = 0; t < m.rows(); ++t) {
    const std::size_t k = t == 0 ? 0 : std::min(t - 1, path.size() - 1);
    m(t, static_cast<std::size_t>(path[k])) = 10.0;
  }
  return m;
}

}  // namespace

TEST_CASE("WAV round trip") {
  const auto dir = scratch("wav");
  fs::create_directories(dir);
  frontend::Waveform w;
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1.2, 1.2);
  for (int i = 0; i < 1000; ++i) w.samples.push_back(u(rng));
  write_wav((dir / "a.wav").string(), w);
  const auto back = read_wav((dir / "a.wav").string());
  REQUIRE(back.samples.size() == w.samples.size());
  CHECK(back.sample_rate == 16000.0);
  for (std::size_t i = 0; i < w.samples.size(); ++i)
    CHECK(std::abs(back.samples[i] - std::clamp(w.samples[i], -1.0, 1.0)) <= 1.0 / 32768.0);

  // Re-writing the decoded samples reproduces the file byte for byte.
  write_wav((dir / "b.wav").string(), back);
  CHECK(file_bytes(dir / "a.wav") == file_bytes(dir / "b.wav"));
  frontend::Waveform bad_rate;
  bad_rate.sample_rate = 8000;
  CHECK_THROWS_AS(write_wav((dir / "c.wav").string(), bad_rate), Error);
  fs::remove_all(dir);
}

TEST_CASE("WAV reader rejects malformed headers") {
  const auto dir = scratch("badwav");
  fs::create_directories(dir);
  frontend::Waveform w;
  w.samples.assign(20, 0.25);
  write_wav((dir / "ok.wav").string(), w);
  const auto good = file_bytes(dir / "ok.wav");
  const auto p = dir / "bad.wav";
  auto variant = [&](auto edit) {
    auto b = good;
    edit(b);
    write_bytes(p, b);
    return wav_error(p);
  };
  auto has = [](const std::string& msg, const std::string& part) {
    CAPTURE(msg);
    CHECK(msg.find(part) != std::string::npos);
  };
  has(variant([](auto& b) { b.resize(10); }), "too short");
  has(variant([](auto& b) { b[0] = 'X'; }), "RIFF");
  has(variant([](auto& b) { b[8] = 'X'; }), "WAVE");
  has(variant([](auto& b) { set16(b, 20, 3); }), "format tag 3");
  has(variant([](auto& b) { set16(b, 22, 2); }), "2 channels");
  has(variant([](auto& b) { set32(b, 24, 8000); }), "8000");
  has(variant([](auto& b) { set16(b, 34, 8); }), "bits per sample, got 8");
  has(variant([](auto& b) { set16(b, 32, 4); }), "block align");
  has(variant([](auto& b) { set32(b, 40, 1000); }), "declares 1000 bytes");
  has(variant([](auto& b) { set32(b, 40, 39); }), "whole number");
  has(variant([](auto& b) { b[36] = 'x'; }), "missing data chunk");
  has(variant([](auto& b) { b[12] = 'x'; }), "data chunk before fmt");
  CHECK_THROWS_AS(read_wav((dir / "missing.wav").string()), Error);
  fs::remove_all(dir);
}

TEST_CASE("manifests and transcripts") {
  const auto dir = scratch("manifest");
  fs::create_directories(dir / "audio");
  frontend::Waveform w;
  w.samples.assign(100, 0.0);
  write_wav((dir / "audio" / "x.wav").string(), w);
  Manifest m;
  m.entries = {{"x1", "audio/x.wav", "Hello, World!"}, {"x2", (dir / "audio" / "x.wav").string(), "a  b"}};
  save_manifest((dir / "dev.jsonl").string(), m);
  const auto back = load_manifest((dir / "dev.jsonl").string());
  CHECK(back.split == "dev");
  REQUIRE(back.entries.size() == 2);
  CHECK(fs::equivalent(back.entries[0].audio, dir / "audio" / "x.wav"));
  CHECK(back.entries[0].text == "Hello, World!");

  auto bad = [&](const std::string& content, ErrorKind kind, const std::string& part) {
    {
      std::ofstream out(dir / "bad.jsonl");
      out << content;
    }
    try {
      load_manifest((dir / "bad.jsonl").string());
      FAIL("expected manifest error");
    } catch (const Error& e) {
      CHECK(e.kind() == kind);
      CAPTURE(e.what());
      CHECK(std::string(e.what()).find(part) != std::string::npos);
    }
  };
  bad("{\"id\":\"a\",\"audio\":\"audio/x.wav\",\"text\":\"a\"}\n{\"id\":\"a\",\"audio\":\"audio/x.wav\",\"text\":\"b\"}\n",
      ErrorKind::kParse, "duplicate id");
  bad("{\"id\":\"a\",\"text\":\"a\"}\n", ErrorKind::kParse, "'audio'");
  bad("not json\n", ErrorKind::kParse, ":1:");
  bad("{\"id\":\"a\",\"audio\":\"audio/nope.wav\",\"text\":\"a\"}\n", ErrorKind::kIo, "nope.wav");

  CHECK(normalize_transcript("  Hello,  World! ") == "hello world");
  CHECK(normalize_transcript("it's") == "it's");

  const auto ab = asg::Alphabet::with_defaults({"a", "b"});
  const int s = ab.silence(), r = ab.repetition();
  CHECK(transcript_target({"ab", "a"}, {}, ab).encoded == std::vector<int>{s, 0, 1, s, 0, s});
  CHECK(transcript_target({"aa"}, {}, ab).encoded == std::vector<int>{s, 0, r, s});
  CHECK(transcript_target({"x"}, {{"x", {"b", "a"}}}, ab).encoded == std::vector<int>{s, 1, 0, s});
  CHECK(char_tokens({"ab", "c"}) == std::vector<std::string>{"a", "b", " ", "c"});

  CHECK(read_text_corpus((dir / "dev.jsonl").string()) ==
        std::vector<std::vector<std::string>>{{"hello", "world"}, {"a", "b"}});
  {
    std::ofstream out(dir / "corpus.txt");
    out << "The cat.\n\n  sat  \n";
  }
  CHECK(read_text_corpus((dir / "corpus.txt").string()) ==
        std::vector<std::vector<std::string>>{{"the", "cat"}, {"sat"}});
  fs::remove_all(dir);
}

TEST_CASE("synthetic task specification") {
  auto spec = default_tone_task();
  CHECK_NOTHROW(spec.validate());
  auto bad = spec;
  bad.tone_hz[1] = bad.tone_hz[0];
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = spec;
  bad.tone_hz[4] = 8000;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = spec;
  bad.letter_ms = 5;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = spec;
  bad.lexicon.push_back({"zz", {"z"}});
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = spec;
  bad.lexicon.clear();
  CHECK_THROWS_AS(bad.validate(), Error);

  // Context task: tails are homophones fixed by the head.
  const auto ctx = context_tone_task();
  CHECK_NOTHROW(ctx.validate());
  for (const auto& s : sample_sentences(ctx, 200, 3, "train")) {
    REQUIRE(s.size() == 3);
    CHECK(((s[0] == "bad" && s[2] == "dace") || (s[0] == "cab" && s[2] == "dase")));
  }
  const auto a = sample_sentences(spec, 50, 1, "train"), b = sample_sentences(spec, 50, 1, "dev");
  CHECK(a != b);
  CHECK(a == sample_sentences(spec, 50, 1, "train"));
}

TEST_CASE("synthesis is deterministic and well formed") {
  auto spec = default_tone_task();
  spec.train_size = 500;
  spec.dev_size = 5;
  spec.test_size = 5;
  spec.snr_db = 5.0;
  const auto d1 = scratch("synth1"), d2 = scratch("synth2"), d3 = scratch("synth3");
  const auto ds = synthesize_dataset(spec, 7, d1.string());
  synthesize_dataset(spec, 7, d2.string());
  auto other = spec;
  other.train_size = 3;
  synthesize_dataset(other, 8, d3.string());

  REQUIRE(ds.train.entries.size() == 500);
  std::set<std::string> ids;
  for (const auto& e : ds.train.entries) ids.insert(e.id);
  CHECK(ids.size() == 500);
  for (const auto& e : ds.train.entries) {
    const auto rel = fs::relative(e.audio, d1);
    CHECK(file_bytes(d1 / rel) == file_bytes(d2 / rel));
  }
  CHECK(file_bytes(d1 / "train.jsonl") == file_bytes(d2 / "train.jsonl"));
  CHECK(file_bytes(d1 / "train" / "train-00000.wav") != file_bytes(d3 / "train" / "train-00000.wav"));
  const auto reloaded = load_manifest((d1 / "dev.jsonl").string());
  CHECK(reloaded.entries.size() == 5);
  CHECK(decoder::load_lexicon(ds.lexicon_path).size() == spec.lexicon.size());

  // Durations follow the sentence layout within the jitter.
  const auto utts = load_utterances(ds.dev);
  for (const auto& u : utts) {
    std::size_t letters = 0;
    for (const auto& w : u.words) letters += w.size();
    const double ms = 1000.0 * static_cast<double>(u.wave.samples.size()) / 16000.0;
    const double nominal = letters * spec.letter_ms + (u.words.size() + 1) * spec.silence_ms;
    CHECK(ms >= 0.9 * nominal - 1);
    CHECK(ms <= 1.1 * nominal + 1);
  }
  fs::remove_all(d1);
  fs::remove_all(d2);
  fs::remove_all(d3);
}

TEST_CASE("a clean one-letter utterance peaks at the letter's tone") {
  auto spec = default_tone_task();
  spec.frequency_jitter = 0.0;
  spec.lexicon.clear();
  for (const auto& l : spec.letters) spec.lexicon.push_back({l, {l}});
  for (std::size_t li = 0; li < spec.letters.size(); ++li) {
    std::mt19937_64 rng(li);
    const auto w = render_sentence(spec, {spec.letters[li]}, rng);
    // Direct DFT of the whole utterance, 5 Hz resolution up to 3 kHz.
    double best_f = 0, best_p = -1;
    for (double f = 50; f <= 3000; f += 5) {
      std::complex<double> acc = 0;
      for (std::size_t n = 0; n < w.samples.size(); ++n)
        acc += w.samples[n] * std::polar(1.0, -2 * std::numbers::pi * f * static_cast<double>(n) / 16000.0);
      if (std::norm(acc) > best_p) {
        best_p = std::norm(acc);
        best_f = f;
      }
    }
    const double bin = 16000.0 / static_cast<double>(w.samples.size());
    CAPTURE(li);
    CHECK(std::abs(best_f - spec.tone_hz[li]) <= std::max(bin, 5.0));

    // The mel filter with the largest energy is the one centred nearest.
    const auto energies = frontend::mel_energies(w, 40);
    const auto centers = frontend::mel_centers(40, 16000.0);
    std::vector<double> total(40, 0.0);
    for (std::size_t c = 0; c < 40; ++c)
      for (std::size_t t = 0; t < energies.cols(); ++t) total[c] += energies(c, t);
    const auto peak = static_cast<std::size_t>(std::max_element(total.begin(), total.end()) - total.begin());
    std::size_t nearest = 0;
    for (std::size_t c = 1; c < 40; ++c)
      if (std::abs(centers[c] - spec.tone_hz[li]) < std::abs(centers[nearest] - spec.tone_hz[li])) nearest = c;
    CHECK(peak == nearest);
  }
}

TEST_CASE("acoustic checkpoints round-trip bit-exactly") {
  const auto dir = scratch("ckpt");
  fs::create_directories(dir);
  const auto alphabet = asg::Alphabet::with_defaults({"a", "b", "c"});
  for (auto kind : {FrontendKind::kLearnable, FrontendKind::kMel}) {
    auto b = small_bundle(kind, alphabet, 3);
    std::mt19937_64 rng(4);
    for (auto& v : b.transitions.values()) v = std::normal_distribution<double>()(rng);
    const auto path = (dir / (frontend_kind_name(kind) + ".ckpt")).string();
    save_checkpoint(path, b.to_checkpoint());
    auto loaded = AcousticBundle::from_checkpoint(load_checkpoint(path));
    CHECK(loaded.kind == kind);
    const auto pa = b.parameters(), pb = loaded.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
      CHECK(pa[i].name == pb[i].name);
      REQUIRE(pa[i].values.size() == pb[i].values.size());
      CHECK(std::memcmp(pa[i].values.data(), pb[i].values.data(), pa[i].values.size() * sizeof(double)) == 0);
    }
    frontend::Waveform w;
    w.samples = oracle::random_vector(4000, rng, 0.1);
    const auto e1 = b.emissions(w), e2 = loaded.emissions(w);
    CHECK(e1.scores.values() == e2.scores.values());
    // Save again: identical bytes.
    save_checkpoint(path + "2", loaded.to_checkpoint());
    CHECK(file_bytes(path) == file_bytes(path + "2"));
  }

  lm::GcnnConfig gc;
  gc.num_blocks = 2;
  gc.embed_dim = 6;
  gc.bottleneck_dim = 3;
  gc.mid_kernel_width = 3;
  lm::GcnnLm g(lm::Vocabulary({"x", "y"}), gc, 5);
  const auto gpath = (dir / "lm.ckpt").string();
  save_checkpoint(gpath, gcnn_to_checkpoint(g));
  const auto any = load_language_model(gpath);
  const auto gl = gcnn_from_checkpoint(load_checkpoint(gpath));
  CHECK(gl.forward({1, 3, 4}).values() == g.forward({1, 3, 4}).values());
  CHECK(any->sentence_log_prob({3, 4}) == g.sentence_log_prob({3, 4}));

  {
    std::ofstream out(dir / "lm.arpa");
    write_arpa(out, lm::estimate_ngram({{"x", "y"}}, 2));
  }
  CHECK(load_language_model((dir / "lm.arpa").string())->max_context() == 1);

  // Corrupted files.
  auto bytes = file_bytes(gpath);
  bytes.resize(bytes.size() - 5);
  write_bytes(dir / "cut.ckpt", bytes);
  CHECK_THROWS_AS(load_checkpoint((dir / "cut.ckpt").string()), Error);
  write_bytes(dir / "junk.ckpt", {'n', 'o', 'p', 'e'});
  CHECK_THROWS_AS(load_checkpoint((dir / "junk.ckpt").string()), Error);
  CHECK_THROWS_AS(AcousticBundle::from_checkpoint(load_checkpoint(gpath)), Error);
  fs::remove_all(dir);
}

TEST_CASE("evaluation") {
  const auto spec = default_tone_task();
  const auto alphabet = task_alphabet(spec);
  const auto trie = decoder::LexiconTrie::build(spec.lexicon, alphabet);
  std::vector<std::vector<std::string>> corpus;
  for (const auto& e : spec.lexicon) corpus.push_back({e.word});
  const auto lmod = lm::estimate_ngram(corpus, 2);
  const Matrix g(alphabet.size(), alphabet.size());
  decoder::DecoderOptions o;
  o.beam_size = 100;

  std::vector<EvalUtterance> set;
  const auto sents = sample_sentences(spec, 12, 2, "dev");
  for (std::size_t i = 0; i < sents.size(); ++i)
    set.push_back({"p" + std::to_string(i), perfect_emissions(sents[i], spec.lexicon, alphabet), sents[i]});
  const auto perfect = evaluate(set, g, trie, alphabet, lmod, o);
  CHECK(perfect.wer == 0.0);
  CHECK(perfect.cer == 0.0);
  CHECK(perfect.failures == 0);

  // Silence everywhere: the empty transcription, all deletions.
  auto silent = set;
  for (auto& u : silent) {
    u.emissions = Matrix(u.emissions.rows(), alphabet.size(), -10.0);
    for (std::size_t t = 0; t < u.emissions.rows(); ++t) u.emissions(t, static_cast<std::size_t>(alphabet.silence())) = 10.0;
  }
  const auto empty = evaluate(silent, g, trie, alphabet, lmod, o);
  CHECK(empty.wer == 100.0);
  CHECK(empty.words.deletions == empty.words.reference_length);

  // Mixed set: totals are the per-utterance sums; runs are identical.
  std::mt19937_64 rng(3);
  auto mixed = set;
  for (auto& u : mixed) u.emissions = oracle::random_matrix(u.emissions.rows(), alphabet.size(), rng, 3.0);
  const auto r1 = evaluate(mixed, g, trie, alphabet, lmod, o);
  const auto r2 = evaluate(mixed, g, trie, alphabet, lmod, o);
  metrics::EditCounts words, chars;
  for (const auto& u : r1.utterances) {
    words += u.words;
    chars += u.chars;
  }
  CHECK(words == r1.words);
  CHECK(chars == r1.chars);
  CHECK(r1.wer == doctest::Approx(100.0 * static_cast<double>(words.errors()) /
                                  static_cast<double>(words.reference_length)).epsilon(1e-14));
  REQUIRE(r1.utterances.size() == r2.utterances.size());
  for (std::size_t i = 0; i < r1.utterances.size(); ++i) {
    CHECK(r1.utterances[i].hypothesis == r2.utterances[i].hypothesis);
    CHECK(r1.utterances[i].id == mixed[i].id);
  }
  CHECK(r1.wer == r2.wer);

  // A failing decode is recorded and scored as an empty hypothesis.
  decoder::DecoderOptions narrow = o;
  narrow.beam_size = 1;
  std::vector<EvalUtterance> trap{{"t", Matrix(2, alphabet.size(), 0.0), {"bad"}}};
  trap[0].emissions(0, 1) = trap[0].emissions(1, 1) = 10.0;  // b b: mid-word at the end
  const auto failed = evaluate(trap, g, trie, alphabet, lmod, narrow);
  CHECK(failed.failures == 1);
  CHECK(!failed.utterances[0].error.empty());
  CHECK(failed.wer == 100.0);

  // Studies: repeated limits and identical models give identical rows.
  DecodeSetup setup{&mixed, &g, &trie, &alphabet, o};
  o.alpha = 1.0;
  setup.options = o;
  const std::vector<std::vector<int>> ppl_corpus{{lmod.vocab().index("a"), lmod.vocab().index("bad")}};
  const auto rows = perplexity_wer_study({&lmod, &lmod, &lmod}, {"c1", "c2", "c3"}, ppl_corpus, setup);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].perplexity == rows[1].perplexity);
  CHECK(rows[0].wer == rows[2].wer);
  lm::GcnnConfig gc;
  gc.num_blocks = 2;
  gc.embed_dim = 6;
  gc.bottleneck_dim = 3;
  gc.mid_kernel_width = 3;
  std::vector<std::string> vocab;
  for (const auto& e : spec.lexicon) vocab.push_back(e.word);
  lm::GcnnLm glm(lm::Vocabulary(vocab), gc, 1);
  const auto ctx = context_wer_study(glm, {2, 2, 5}, setup);
  REQUIRE(ctx.size() == 3);
  CHECK(ctx[0].wer == ctx[1].wer);
  CHECK(!glm.context_limit().has_value());
  CHECK_THROWS_AS(context_wer_study(glm, {3, 1}, setup), Error);

  const auto dir = scratch("csv");
  fs::create_directories(dir);
  write_ppl_wer_csv((dir / "p.csv").string(), rows);
  write_context_wer_csv((dir / "c.csv").string(), ctx);
  auto lines = [](const fs::path& p) {
    std::ifstream in(p);
    std::vector<std::string> out;
    for (std::string l; std::getline(in, l);) out.push_back(l);
    return out;
  };
  const auto pl = lines(dir / "p.csv");
  CHECK(pl.size() == 4);
  CHECK(pl[0] == "checkpoint,perplexity,wer");
  CHECK(lines(dir / "c.csv").size() == 4);
  fs::remove_all(dir);
}

TEST_CASE("spearman") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng() % 8;
    std::vector<double> x(n), y(n);
    for (auto& v : x) v = static_cast<double>(rng() % 5);
    for (auto& v : y) v = static_cast<double>(rng() % 5);
    const auto rx = oracle::ranks(x), ry = oracle::ranks(y);
    // Pearson correlation of the average ranks.
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) {
      mx += rx[i] / static_cast<double>(n);
      my += ry[i] / static_cast<double>(n);
    }
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < n; ++i) {
      sxy += (rx[i] - mx) * (ry[i] - my);
      sxx += (rx[i] - mx) * (rx[i] - mx);
      syy += (ry[i] - my) * (ry[i] - my);
    }
    const double s = spearman(x, y);
    if (sxx == 0 || syy == 0) {
      CHECK(std::isnan(s));
    } else {
      CHECK(std::abs(s - sxy / std::sqrt(sxx * syy)) <= 1e-12);
    }
  }
  CHECK(spearman({1, 2, 3}, {10, 20, 30}) == doctest::Approx(1.0));
  CHECK(spearman({1, 2, 3}, {3, 2, 1}) == doctest::Approx(-1.0));
  CHECK_THROWS_AS(spearman({1, 2}, {1}), Error);
}

TEST_CASE("config files") {
  const auto dir = scratch("config");
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "a.cfg");
    out << "# decoder\nalpha = 0.5\n\n beta=2 # trailing\nalpha = 0.75\nname = x y\n";
  }
  const auto c = parse_config((dir / "a.cfg").string());
  CHECK(c.size() == 3);
  CHECK(c.at("alpha") == "0.75");
  CHECK(c.at("beta") == "2");
  CHECK(c.at("name") == "x y");
  {
    std::ofstream out(dir / "b.cfg");
    out << "alpha = 1\nno equals here\n";
  }
  try {
    parse_config((dir / "b.cfg").string());
    FAIL("expected parse error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find(":2:") != std::string::npos);
  }
  {
    std::ofstream out(dir / "c.cfg");
    out << " = 3\n";
  }
  CHECK_THROWS_AS(parse_config((dir / "c.cfg").string()), Error);
  CHECK_THROWS_AS(parse_config((dir / "none.cfg").string()), Error);
  fs::remove_all(dir);
}

TEST_CASE("acoustic training") {
  auto spec = default_tone_task();
  spec.min_words = spec.max_words = 1;
  const auto alphabet = task_alphabet(spec);
  const auto utts = rendered(spec, 10, 11);

  SUBCASE("one step moves the learnable filterbank") {
    auto b = small_bundle(FrontendKind::kLearnable, alphabet, 1);
    const Matrix re = b.frontend.filter_real(), im = b.frontend.filter_imag();
    const std::vector<double> window(b.frontend.lowpass_window().begin(), b.frontend.lowpass_window().end());
    AcousticTrainSettings s;
    s.epochs = 1;
    s.batch_size = 10;
    s.optimizer.learning_rate = 0.1;
    const auto rep = train_acoustic(b, utts, {}, spec.lexicon, s);
    REQUIRE(rep.size() == 1);
    CHECK(rep[0].train_loss > 0.0);
    double delta = 0.0;
    for (std::size_t i = 0; i < re.size(); ++i) {
      delta += std::pow(re.data()[i] - b.frontend.filter_real().data()[i], 2);
      delta += std::pow(im.data()[i] - b.frontend.filter_imag().data()[i], 2);
    }
    CHECK(delta > 0.0);
    CHECK(std::equal(window.begin(), window.end(), b.frontend.lowpass_window().begin()));
  }

  SUBCASE("zero learning rate keeps the loss constant") {
    auto b = small_bundle(FrontendKind::kLearnable, alphabet, 2);
    AcousticTrainSettings s;
    s.epochs = 3;
    s.batch_size = 5;
    s.optimizer.learning_rate = 0.0;
    const auto rep = train_acoustic(b, utts, utts, spec.lexicon, s);
    REQUIRE(rep.size() == 3);
    CHECK(rep[1].dev_loss == rep[0].dev_loss);
    CHECK(rep[2].dev_loss == rep[0].dev_loss);
    // Dropout is off in the small bundle; only the shuffled summation order differs.
    CHECK(rel_err(rep[2].train_loss, rep[0].train_loss) <= 1e-12);
  }

  SUBCASE("overfits ten utterances") {
    for (auto kind : {FrontendKind::kLearnable, FrontendKind::kMel}) {
      auto b = small_bundle(kind, alphabet, 3);
      AcousticTrainSettings s;
      s.epochs = 150;
      s.batch_size = 10;
      s.optimizer = {0.5, 0.9, 1.0, MomentumKind::kNesterov};
      s.plateau_patience = 1000;
      train_acoustic(b, utts, {}, spec.lexicon, s);
      const double loss = mean_asg_loss(b, utts, spec.lexicon);
      MESSAGE(frontend_kind_name(kind) << " overfit loss " << loss);
      CHECK(loss <= 0.1);
    }
  }

  SUBCASE("infeasible targets are skipped") {
    auto b = small_bundle(FrontendKind::kMel, alphabet, 4);
    std::vector<LoadedUtterance> tiny{utts[0]};
    tiny[0].wave.samples.resize(900);  // a handful of frames
    tiny[0].words = {"bad", "bad", "bad", "bad"};
    AcousticTrainSettings s;
    s.epochs = 1;
    const auto rep = train_acoustic(b, tiny, {}, spec.lexicon, s);
    CHECK(rep[0].skipped == 1);
    std::size_t skipped = 0;
    CHECK(std::isnan(mean_asg_loss(b, tiny, spec.lexicon, &skipped)));
    CHECK(skipped == 1);
  }

  CHECK_THROWS_AS(AcousticBundle::create(FrontendKind::kMel, frontend::FrontendConfig{},
                                         default_acoustic_config(8, alphabet.size()), alphabet, 1),
                  Error);
  CHECK(parse_frontend_kind("mel") == FrontendKind::kMel);
  CHECK_THROWS_AS(parse_frontend_kind("gammatone"), Error);
}
