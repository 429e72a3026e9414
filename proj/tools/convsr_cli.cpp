// convsr command-line tool.
#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "convsr/pipeline.hpp"

using namespace convsr;
using namespace convsr::pipeline;
namespace fs = std::filesystem;

namespace {

struct DecoderFlags {
  double alpha = 0.0, beta = 0.0, gamma = 0.0;
  std::size_t beam_size = 2500;
  double beam_score = 26.0;
  bool normalized = false;
  std::string merge = "logadd";

  void add(CLI::App* app) {
    app->add_option("--alpha", alpha, "LM weight");
    app->add_option("--beta", beta, "Word insertion reward");
    app->add_option("--gamma", gamma, "Silence penalty per frame");
    app->add_option("--beam-size", beam_size, "Hypotheses kept per frame");
    app->add_option("--beam-score", beam_score, "Score window below the best hypothesis");
    app->add_flag("--normalized", normalized, "Log-softmax the emissions before searching");
    app->add_option("--merge", merge, "Hypothesis merging")->check(CLI::IsMember({"logadd", "max", "none"}));
  }

  decoder::DecoderOptions options() const {
    decoder::DecoderOptions o;
    o.alpha = alpha;
    o.beta = beta;
    o.gamma = gamma;
    o.beam_size = beam_size;
    o.beam_score = beam_score;
    o.normalized_emissions = normalized;
    o.merge = merge == "max" ? decoder::MergeMode::kMax
              : merge == "none" ? decoder::MergeMode::kNone
                                : decoder::MergeMode::kLogAdd;
    o.validate();
    return o;
  }
};

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ','))
    if (!item.empty()) out.push_back(std::stod(item));
  if (out.empty()) throw Error(ErrorKind::kConfiguration, "empty list: '" + s + "'");
  return out;
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

void need(const std::string& value, const std::string& flag) {
  if (value.empty()) throw Error(ErrorKind::kConfiguration, flag + " is required");
}

std::vector<std::vector<std::string>> words_of(const std::vector<LoadedUtterance>& set) {
  std::vector<std::vector<std::string>> out;
  for (const auto& u : set) out.push_back(u.words);
  return out;
}

struct Setup {
  AcousticBundle am;
  decoder::Lexicon lexicon;
  decoder::LexiconTrie trie;
};

Setup load_setup(const std::string& am_path, const std::string& lexicon_path) {
  need(am_path, "--am");
  need(lexicon_path, "--lexicon");
  Setup s;
  s.am = AcousticBundle::from_checkpoint(load_checkpoint(am_path));
  s.lexicon = decoder::load_lexicon(lexicon_path);
  s.trie = decoder::LexiconTrie::build(s.lexicon, s.am.alphabet);
  return s;
}

std::string join(const std::vector<std::string>& w) {
  std::string s;
  for (const auto& x : w) s += (s.empty() ? "" : " ") + x;
  return s;
}

// Fills options the command line left unset from key=value pairs. Keys may
// use '_' or '-'; unknown keys are an error.
void apply_config(CLI::App& app, CLI::App* sub, const std::string& path) {
  for (const auto& [raw, value] : parse_config(path)) {
    std::string key = raw;
    std::replace(key.begin(), key.end(), '_', '-');
    CLI::Option* opt = nullptr;
    for (CLI::App* scope : {sub, &app}) {
      if (!scope) continue;
      try {
        opt = scope->get_option("--" + key);
        break;
      } catch (const CLI::OptionNotFound&) {
      }
    }
    if (!opt) throw Error(ErrorKind::kConfiguration, path + ": unknown key '" + key + "'");
    if (opt->count() > 0) continue;
    opt->add_result(value);
    opt->run_callback();
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"convsr: learnable front-end speech recognition toolkit"};
  app.require_subcommand(1);
  std::uint64_t seed = 1;
  std::string config;
  app.add_option("--seed", seed, "Seed for every random draw");
  app.add_option("--config", config, "key=value file for options not given on the command line");

  // synth-data
  auto* synth = app.add_subcommand("synth-data", "Write a synthetic spoken-letters dataset");
  std::string task = "tone", synth_out;
  std::size_t n_train = 500, n_dev = 50, n_test = 50;
  double snr = 0.0;
  synth->add_option("--task", task, "tone | context")->check(CLI::IsMember({"tone", "context"}));
  synth->add_option("--out", synth_out, "Output directory");
  synth->add_option("--train", n_train);
  synth->add_option("--dev", n_dev);
  synth->add_option("--test", n_test);
  synth->add_option("--snr", snr, "White-noise SNR in dB (0 = clean)");

  // train-am
  auto* tam = app.add_subcommand("train-am", "Train front-end, acoustic model and transitions");
  std::string am_train, am_dev, am_lexicon, am_out, frontend_name = "learnable", am_curve;
  std::size_t filters = 40, am_epochs = 20, am_batch = 4;
  double am_lr = 0.5, am_momentum = 0.9, am_clip = 0.2, am_budget = 0.0, dropout = 0.25;
  int patience = 2;
  tam->add_option("--train", am_train, "Training manifest");
  tam->add_option("--dev", am_dev, "Validation manifest");
  tam->add_option("--lexicon", am_lexicon);
  tam->add_option("--out", am_out, "Checkpoint of the best dev-loss epoch");
  tam->add_option("--curve", am_curve, "Loss curve CSV");
  tam->add_option("--frontend", frontend_name)->check(CLI::IsMember({"learnable", "mel"}));
  tam->add_option("--filters", filters);
  tam->add_option("--epochs", am_epochs);
  tam->add_option("--batch-size", am_batch);
  tam->add_option("--lr", am_lr);
  tam->add_option("--momentum", am_momentum);
  tam->add_option("--clip", am_clip);
  tam->add_option("--dropout", dropout);
  tam->add_option("--patience", patience, "Epochs without dev improvement before halving lr");
  tam->add_option("--budget", am_budget, "CPU-second training budget (0 = none)");

  // train-lm
  auto* tlm = app.add_subcommand("train-lm", "Estimate an n-gram or train a GCNN language model");
  std::string lm_type = "ngram", lm_corpus, lm_valid, lm_out, lm_every;
  std::size_t order = 2, blocks = 4, embed = 128, bottleneck = 64, kernel = 5, lm_epochs = 10, lm_batch = 8;
  double lm_lr = 0.5, discount = 0.5;
  tlm->add_option("--type", lm_type)->check(CLI::IsMember({"ngram", "gcnn"}));
  tlm->add_option("--corpus", lm_corpus, "Manifest or one sentence per line");
  tlm->add_option("--valid", lm_valid);
  tlm->add_option("--out", lm_out, "ARPA file or GCNN checkpoint");
  tlm->add_option("--order", order);
  tlm->add_option("--discount", discount);
  tlm->add_option("--blocks", blocks);
  tlm->add_option("--embed", embed);
  tlm->add_option("--bottleneck", bottleneck);
  tlm->add_option("--kernel", kernel);
  tlm->add_option("--epochs", lm_epochs);
  tlm->add_option("--batch-size", lm_batch);
  tlm->add_option("--lr", lm_lr);
  tlm->add_option("--checkpoint-prefix", lm_every, "Also save <prefix>.epochN.ckpt after every epoch");

  // Shared by the decoding subcommands.
  std::string am_path, lm_path, lexicon_path, manifest, out_path;
  DecoderFlags dflags;
  auto add_setup = [&](CLI::App* sub, bool with_lm) {
    sub->add_option("--am", am_path, "Acoustic checkpoint");
    sub->add_option("--lexicon", lexicon_path);
    if (with_lm) sub->add_option("--lm", lm_path, "ARPA file or GCNN checkpoint");
    dflags.add(sub);
  };

  auto* dec = app.add_subcommand("decode", "Decode audio, a manifest or an emission file");
  std::string audio, emissions_in, emissions_out;
  add_setup(dec, true);
  dec->add_option("--audio", audio, "One WAV file");
  dec->add_option("--manifest", manifest);
  dec->add_option("--emissions", emissions_in, "Emission file to decode instead of audio");
  dec->add_option("--write-emissions", emissions_out, "Save the emissions of --audio");

  auto* ev = app.add_subcommand("evaluate", "WER/CER of a manifest");
  add_setup(ev, true);
  ev->add_option("--manifest", manifest);
  ev->add_option("--out", out_path, "Per-utterance CSV");

  auto* tune = app.add_subcommand("tune", "Grid-search alpha, beta, gamma on a validation manifest");
  std::string alphas = "0,0.5,1,2", betas = "0,1", gammas = "0";
  std::size_t search_beam = 2500, final_beam = 3000;
  double search_score = 26.0, final_score = 50.0;
  std::string tuned_config;
  add_setup(tune, true);
  tune->add_option("--manifest", manifest);
  tune->add_option("--alphas", alphas);
  tune->add_option("--betas", betas);
  tune->add_option("--gammas", gammas);
  tune->add_option("--search-beam", search_beam);
  tune->add_option("--search-beam-score", search_score);
  tune->add_option("--final-beam", final_beam);
  tune->add_option("--final-beam-score", final_score);
  tune->add_option("--out", out_path, "Grid CSV");
  tune->add_option("--save-config", tuned_config, "Write the chosen options as key=value");

  auto* afe = app.add_subcommand("analyze-frontend", "Center frequencies of learned filters");
  std::string spectra_path;
  afe->add_option("--am", am_path, "Acoustic checkpoint (learnable front-end)");
  afe->add_option("--out", out_path, "CSV: rank, filter, center_hz");
  afe->add_option("--spectra", spectra_path, "CSV of the sorted power spectra");

  auto* pw = app.add_subcommand("ppl-wer", "Perplexity and WER for a list of LMs");
  std::string lm_list, ppl_corpus;
  add_setup(pw, false);
  pw->add_option("--manifest", manifest);
  pw->add_option("--lms", lm_list, "Comma-separated LM files");
  pw->add_option("--ppl-corpus", ppl_corpus, "Perplexity corpus (default: the manifest transcripts)");
  pw->add_option("--out", out_path);

  auto* cw = app.add_subcommand("context-wer", "WER as the LM history is truncated");
  std::string limits = "1,2,3,4";
  add_setup(cw, true);
  cw->add_option("--manifest", manifest);
  cw->add_option("--limits", limits, "Ascending context limits");
  cw->add_option("--out", out_path);

  CLI11_PARSE(app, argc, argv);

  try {
    CLI::App* sub = app.get_subcommands().front();
    if (!config.empty()) apply_config(app, sub, config);

    if (sub == synth) {
      need(synth_out, "--out");
      auto spec = task == "tone" ? default_tone_task() : context_tone_task();
      spec.train_size = n_train;
      spec.dev_size = n_dev;
      spec.test_size = n_test;
      if (snr != 0.0) spec.snr_db = snr;
      const auto ds = synthesize_dataset(spec, seed, synth_out);
      std::cout << "wrote " << ds.train.entries.size() << "/" << ds.dev.entries.size() << "/"
                << ds.test.entries.size() << " utterances to " << synth_out << "\n";

    } else if (sub == tam) {
      need(am_train, "--train");
      need(am_dev, "--dev");
      need(am_lexicon, "--lexicon");
      need(am_out, "--out");
      const auto lexicon = decoder::load_lexicon(am_lexicon);
      const auto train = load_utterances(load_manifest(am_train));
      const auto dev = load_utterances(load_manifest(am_dev));
      std::set<std::string> letters;
      for (const auto& e : lexicon)
        for (const auto& l : e.spelling) letters.insert(l);
      const auto alphabet = asg::Alphabet::with_defaults({letters.begin(), letters.end()});
      frontend::FrontendConfig fe;
      fe.num_filters = filters;
      auto bundle = AcousticBundle::create(parse_frontend_kind(frontend_name), fe,
                                           default_acoustic_config(filters, alphabet.size(), dropout), alphabet, seed);
      AcousticTrainSettings s;
      s.optimizer = {am_lr, am_momentum, am_clip, MomentumKind::kClassical};
      s.epochs = am_epochs;
      s.batch_size = am_batch;
      s.plateau_patience = patience;
      s.time_budget_seconds = am_budget;
      s.seed = seed;
      double best = std::numeric_limits<double>::infinity();
      std::ofstream curve;
      if (!am_curve.empty()) {
        curve.open(am_curve);
        curve << "epoch,train_loss,dev_loss,learning_rate,cpu_seconds,skipped\n";
      }
      train_acoustic(bundle, train, dev, lexicon, s, [&](const AcousticEpochReport& r, const AcousticBundle& b) {
        std::cout << "epoch " << r.epoch << " train " << r.train_loss << " dev " << r.dev_loss << " lr "
                  << r.learning_rate << " cpu " << r.elapsed_seconds << "s";
        if (r.skipped) std::cout << " skipped " << r.skipped;
        if (r.dev_loss < best) {
          best = r.dev_loss;
          save_checkpoint(am_out, b.to_checkpoint());
          std::cout << " (saved)";
        }
        std::cout << std::endl;
        if (curve) {
          curve << r.epoch << ',' << r.train_loss << ',' << r.dev_loss << ',' << r.learning_rate << ','
                << r.elapsed_seconds << ',' << r.skipped << '\n';
          curve.flush();
        }
      });

    } else if (sub == tlm) {
      need(lm_corpus, "--corpus");
      need(lm_out, "--out");
      const auto corpus = read_text_corpus(lm_corpus);
      if (lm_type == "ngram") {
        const auto model = lm::estimate_ngram(corpus, order, discount);
        std::ofstream out(lm_out);
        if (!out) throw Error(ErrorKind::kIo, "cannot write " + lm_out);
        lm::write_arpa(out, model);
        if (!lm_valid.empty()) {
          const auto valid = lm::index_corpus(model.vocab(), read_text_corpus(lm_valid));
          std::cout << "valid perplexity " << lm::perplexity(model, valid) << "\n";
        }
      } else {
        std::set<std::string> words;
        for (const auto& s : corpus) words.insert(s.begin(), s.end());
        const lm::Vocabulary vocab({words.begin(), words.end()});
        lm::GcnnConfig cfg;
        cfg.vocab_size = vocab.size();
        cfg.num_blocks = blocks;
        cfg.embed_dim = embed;
        cfg.bottleneck_dim = bottleneck;
        cfg.mid_kernel_width = kernel;
        lm::GcnnLm model(vocab, cfg, seed);
        lm::LmTrainSettings s;
        s.optimizer.learning_rate = lm_lr;
        s.epochs = lm_epochs;
        s.batch_size = lm_batch;
        s.seed = seed;
        const auto train = lm::index_corpus(vocab, corpus);
        const auto valid = lm_valid.empty() ? std::vector<std::vector<int>>{}
                                            : lm::index_corpus(vocab, read_text_corpus(lm_valid));
        lm::gcnn_train(model, train, valid, s, [&](const lm::LmEpochReport& r, const lm::GcnnLm& m) {
          std::cout << "epoch " << r.epoch << " train ppl " << r.train_perplexity;
          if (!valid.empty()) std::cout << " valid ppl " << r.valid_perplexity;
          std::cout << std::endl;
          if (!lm_every.empty())
            save_checkpoint(lm_every + ".epoch" + std::to_string(r.epoch) + ".ckpt", gcnn_to_checkpoint(m));
        });
        save_checkpoint(lm_out, gcnn_to_checkpoint(model));
      }

    } else if (sub == dec) {
      need(lm_path, "--lm");
      const auto s = load_setup(am_path, lexicon_path);
      const auto lm = load_language_model(lm_path);
      const auto opts = dflags.options();
      auto run = [&](const std::string& id, const Matrix& em) {
        const auto r = decoder::decode(em, s.am.transitions, s.trie, s.am.alphabet, *lm, opts);
        std::cout << id << '\t' << join(r.words) << '\t' << r.objective << "\n";
      };
      if (!emissions_in.empty()) {
        const auto table = decoder::read_emissions(emissions_in);
        auto o = opts;
        o.normalized_emissions = opts.normalized_emissions && !table.normalized;
        const auto r = decoder::decode(table.scores, s.am.transitions, s.trie, s.am.alphabet, *lm, o);
        std::cout << emissions_in << '\t' << join(r.words) << '\t' << r.objective << "\n";
      } else if (!audio.empty()) {
        const auto em = s.am.emissions(read_wav(audio));
        if (!emissions_out.empty())
          decoder::write_emissions(emissions_out, {em.scores, em.normalized, s.am.alphabet.tokens()});
        run(audio, em.scores);
      } else {
        need(manifest, "--audio, --emissions or --manifest");
        for (const auto& u : compute_emissions(s.am, load_utterances(load_manifest(manifest)))) run(u.id, u.emissions);
      }

    } else if (sub == ev) {
      need(lm_path, "--lm");
      need(manifest, "--manifest");
      const auto s = load_setup(am_path, lexicon_path);
      const auto lm = load_language_model(lm_path);
      const auto set = compute_emissions(s.am, load_utterances(load_manifest(manifest)));
      const auto rep = evaluate(set, s.am.transitions, s.trie, s.am.alphabet, *lm, dflags.options());
      std::cout << "WER " << rep.wer << "% (S " << rep.words.substitutions << " D " << rep.words.deletions << " I "
                << rep.words.insertions << " N " << rep.words.reference_length << ")  CER " << rep.cer
                << "%  failures " << rep.failures << "\n";
      if (!out_path.empty()) {
        std::ofstream out(out_path);
        out << "id,reference,hypothesis,substitutions,deletions,insertions,words,error\n";
        for (const auto& u : rep.utterances)
          out << u.id << ',' << join(u.reference) << ',' << join(u.hypothesis) << ',' << u.words.substitutions << ','
              << u.words.deletions << ',' << u.words.insertions << ',' << u.words.reference_length << ",\""
              << u.error << "\"\n";
      }

    } else if (sub == tune) {
      need(lm_path, "--lm");
      need(manifest, "--manifest");
      const auto s = load_setup(am_path, lexicon_path);
      const auto lm = load_language_model(lm_path);
      const auto set = compute_emissions(s.am, load_utterances(load_manifest(manifest)));
      decoder::TuneGrid grid;
      grid.alphas = parse_list(alphas);
      grid.betas = parse_list(betas);
      grid.gammas = parse_list(gammas);
      grid.search_beam = search_beam;
      grid.search_beam_score = search_score;
      grid.final_beam = final_beam;
      grid.final_beam_score = final_score;
      const auto r = decoder::tune_grid(as_validation(set), s.am.transitions, s.trie, s.am.alphabet, *lm, grid,
                                        dflags.options());
      std::cout << "alpha " << r.best.alpha << " beta " << r.best.beta << " gamma " << r.best.gamma << "  WER "
                << r.stage1_wer << "% at " << search_beam << "/" << search_score << ", " << r.stage2_wer << "% at "
                << final_beam << "/" << final_score << "\n";
      if (!out_path.empty()) write_tune_csv(out_path, r);
      if (!tuned_config.empty()) {
        std::ofstream out(tuned_config);
        out << "alpha = " << r.best.alpha << "\nbeta = " << r.best.beta << "\ngamma = " << r.best.gamma
            << "\nbeam_size = " << r.best.beam_size << "\nbeam_score = " << r.best.beam_score << "\n";
      }

    } else if (sub == afe) {
      need(am_path, "--am");
      const auto am = AcousticBundle::from_checkpoint(load_checkpoint(am_path));
      if (am.kind != FrontendKind::kLearnable)
        throw Error(ErrorKind::kConfiguration, "analyze-frontend needs a learnable front-end checkpoint");
      const auto a = frontend::analyze_filters(am.frontend);
      std::ostream* out = &std::cout;
      std::ofstream file;
      if (!out_path.empty()) {
        file.open(out_path);
        out = &file;
      }
      *out << "rank,filter,center_hz\n";
      for (std::size_t i = 0; i < a.filter_index.size(); ++i)
        *out << i << ',' << a.filter_index[i] << ',' << a.center_frequencies[i] << '\n';
      if (!spectra_path.empty()) {
        std::ofstream sp(spectra_path);
        sp << "rank,bin_hz,power\n";
        for (std::size_t r = 0; r < a.power_spectra.rows(); ++r)
          for (std::size_t b = 0; b < a.power_spectra.cols(); ++b)
            sp << r << ',' << static_cast<double>(b) * a.bin_hz << ',' << a.power_spectra(r, b) << '\n';
      }

    } else if (sub == pw) {
      need(manifest, "--manifest");
      need(lm_list, "--lms");
      const auto s = load_setup(am_path, lexicon_path);
      const auto utts = load_utterances(load_manifest(manifest));
      const auto set = compute_emissions(s.am, utts);
      std::vector<std::unique_ptr<lm::LanguageModel>> owned;
      std::vector<const lm::LanguageModel*> lms;
      const auto names = split_commas(lm_list);
      for (const auto& n : names) {
        owned.push_back(load_language_model(n));
        lms.push_back(owned.back().get());
      }
      const auto text = ppl_corpus.empty() ? words_of(utts) : read_text_corpus(ppl_corpus);
      DecodeSetup setup{&set, &s.am.transitions, &s.trie, &s.am.alphabet, dflags.options()};
      // Models may have different vocabularies, so each indexes the corpus itself.
      std::vector<PplWerRow> rows;
      for (std::size_t i = 0; i < lms.size(); ++i) {
        const auto r = perplexity_wer_study({lms[i]}, {names[i]}, lm::index_corpus(lms[i]->vocab(), text), setup);
        rows.push_back(r.front());
        std::cout << names[i] << "  ppl " << r.front().perplexity << "  WER " << r.front().wer << "%" << std::endl;
      }
      std::vector<double> p, w;
      for (const auto& r : rows) {
        p.push_back(r.perplexity);
        w.push_back(r.wer);
      }
      if (rows.size() >= 2) std::cout << "spearman " << spearman(p, w) << "\n";
      if (!out_path.empty()) write_ppl_wer_csv(out_path, rows);

    } else if (sub == cw) {
      need(lm_path, "--lm");
      need(manifest, "--manifest");
      const auto s = load_setup(am_path, lexicon_path);
      auto lm = load_language_model(lm_path);
      const auto set = compute_emissions(s.am, load_utterances(load_manifest(manifest)));
      std::vector<std::size_t> lim;
      for (double v : parse_list(limits)) lim.push_back(static_cast<std::size_t>(v));
      DecodeSetup setup{&set, &s.am.transitions, &s.trie, &s.am.alphabet, dflags.options()};
      const auto rows = context_wer_study(*lm, lim, setup);
      for (const auto& r : rows) std::cout << "context " << r.context << "  WER " << r.wer << "%\n";
      if (!out_path.empty()) write_context_wer_csv(out_path, rows);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
