#include "convsr/lm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <numbers>
#include <ostream>
#include <set>
#include <sstream>

namespace convsr::lm {

namespace {
constexpr double kLn10 = std::numbers::ln10;
// log10 floor for tokens the model cannot score at all.
constexpr double kFloorLog10 = -99.0;
}  // namespace

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() {
  unk_ = add(kUnknown);
  bos_ = add(kBegin);
  eos_ = add(kEnd);
}

Vocabulary::Vocabulary(const std::vector<std::string>& words) : Vocabulary() {
  for (const auto& w : words) add(w);
}

int Vocabulary::add(const std::string& token) {
  const auto it = index_.find(token);
  if (it != index_.end()) return it->second;
  const int id = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
  index_.emplace(token, id);
  return id;
}

int Vocabulary::index(const std::string& token) const {
  const auto it = index_.find(token);
  return it == index_.end() ? unk_ : it->second;
}

bool Vocabulary::contains(const std::string& token) const { return index_.count(token) > 0; }

std::size_t LmStateHash::operator()(const LmState& s) const { return VectorHash{}(s.tokens); }

std::size_t VectorHash::operator()(const std::vector<int>& v) const {
  std::size_t h = 1469598103934665603ull;
  for (int x : v) {
    h ^= static_cast<std::size_t>(x) + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  }
  return h;
}

// ---------------------------------------------------------------------------
// LanguageModel

std::vector<double> LanguageModel::score_all(const LmState& state) const {
  std::vector<double> out(vocab().size());
  for (std::size_t w = 0; w < out.size(); ++w) out[w] = score(state, static_cast<int>(w));
  return out;
}

double LanguageModel::sentence_log_prob(const std::vector<int>& words) const {
  LmState s = start_state();
  double total = 0.0;
  for (int w : words) {
    LmState next;
    total += score(s, w, &next);
    s = std::move(next);
  }
  return total + score(s, vocab().end());
}

LmState LanguageModel::start_state() const { return truncate(LmState{{vocab().begin()}}); }

LmState LanguageModel::advance(const LmState& state, int token) const {
  LmState s = state;
  s.tokens.push_back(token);
  return truncate(std::move(s));
}

void LanguageModel::set_context_limit(std::optional<std::size_t> limit) {
  if (limit && *limit < 1) throw Error(ErrorKind::kConfiguration, "context limit must be >= 1");
  context_limit_ = limit;
}

std::size_t LanguageModel::effective_context() const {
  return context_limit_ ? std::min(*context_limit_, max_context()) : max_context();
}

LmState LanguageModel::truncate(LmState s) const {
  const std::size_t keep = effective_context();
  if (s.tokens.size() > keep)
    s.tokens.erase(s.tokens.begin(), s.tokens.end() - static_cast<long>(keep));
  return s;
}

// ---------------------------------------------------------------------------
// NGramModel

NGramModel::NGramModel(Vocabulary vocab, std::size_t order)
    : vocab_(std::move(vocab)), order_(order), tables_(order) {
  if (order < 1) throw Error(ErrorKind::kConfiguration, "n-gram order must be >= 1");
}

void NGramModel::set_entry(const std::vector<int>& ngram, NGramEntry e) {
  if (ngram.empty() || ngram.size() > order_)
    throw Error(ErrorKind::kConfiguration, "n-gram length outside model order");
  tables_[ngram.size() - 1][ngram] = e;
}

NGramEntry* NGramModel::find(const std::vector<int>& ngram) {
  if (ngram.empty() || ngram.size() > order_) return nullptr;
  auto& table = tables_[ngram.size() - 1];
  const auto it = table.find(ngram);
  return it == table.end() ? nullptr : &it->second;
}

double NGramModel::log_prob(const std::vector<int>& context, int token) const {
  if (!tables_[0].count({token})) token = vocab_.unknown();
  const std::size_t keep = std::min(context.size(), order_ - 1);
  std::vector<int> h(context.end() - static_cast<long>(keep), context.end());
  double backoff = 0.0;
  while (true) {
    std::vector<int> key = h;
    key.push_back(token);
    const auto& table = tables_[key.size() - 1];
    if (const auto it = table.find(key); it != table.end()) return backoff + it->second.log_prob;
    if (h.empty()) return backoff + kFloorLog10 * kLn10;
    const auto& ctx_table = tables_[h.size() - 1];
    if (const auto it = ctx_table.find(h); it != ctx_table.end()) backoff += it->second.backoff;
    h.erase(h.begin());
  }
}

double NGramModel::score(const LmState& state, int token, LmState* next) const {
  const double s = log_prob(state.tokens, token);
  if (next) *next = advance(state, token);
  return s;
}

namespace {

std::vector<std::string> split_ws(const std::string& line) {
  std::istringstream ss(line);
  std::vector<std::string> out;
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

double parse_number(const std::string& s, std::size_t line_no) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorKind::kParse,
                "line " + std::to_string(line_no) + ": expected a number, got '" + s + "'");
  }
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

NGramModel load_arpa(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  auto next_line = [&](std::string& out) {
    if (!std::getline(in, out)) return false;
    ++line_no;
    out = trim(out);
    return true;
  };

  // Header: skip anything before \data\.
  bool found = false;
  while (next_line(line)) {
    if (line == "\\data\\") {
      found = true;
      break;
    }
  }
  if (!found) throw Error(ErrorKind::kParse, "missing \\data\\ section");

  std::vector<std::size_t> counts;
  std::optional<std::string> pending;  // section header with no blank line before it
  while (next_line(line)) {
    if (line.empty()) {
      if (!counts.empty()) break;
      continue;
    }
    if (line.front() == '\\' && !counts.empty()) {
      pending = line;
      break;
    }
    if (line.rfind("ngram ", 0) != 0)
      throw Error(ErrorKind::kParse, "line " + std::to_string(line_no) +
                                         ": expected 'ngram N=count', got '" + line + "'");
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw Error(ErrorKind::kParse, "line " + std::to_string(line_no) + ": malformed count line");
    const auto n = static_cast<std::size_t>(parse_number(trim(line.substr(6, eq - 6)), line_no));
    const auto c = parse_number(trim(line.substr(eq + 1)), line_no);
    if (n != counts.size() + 1 || c < 0)
      throw Error(ErrorKind::kParse,
                  "line " + std::to_string(line_no) + ": n-gram orders must be listed 1, 2, ...");
    counts.push_back(static_cast<std::size_t>(c));
  }
  if (counts.empty()) throw Error(ErrorKind::kParse, "\\data\\ section declares no n-gram counts");

  const std::size_t order = counts.size();
  struct Raw {
    std::vector<std::string> words;
    double lp, bo;
    bool has_bo;
  };
  std::vector<std::vector<Raw>> raw(order);
  std::size_t current = 0;  // 0 = not in a section
  bool ended = false;
  auto close_section = [&](std::size_t at_line) {
    if (current == 0) return;
    if (raw[current - 1].size() != counts[current - 1])
      throw Error(ErrorKind::kParse,
                  "section \\" + std::to_string(current) + "-grams: declared " +
                      std::to_string(counts[current - 1]) + " entries but found " +
                      std::to_string(raw[current - 1].size()) + " (ends at line " +
                      std::to_string(at_line) + ")");
  };
  while (pending || next_line(line)) {
    if (pending) {
      line = *pending;
      pending.reset();
    }
    if (line.empty()) continue;
    if (line == "\\end\\") {
      close_section(line_no);
      ended = true;
      break;
    }
    if (line.front() == '\\') {
      close_section(line_no);
      std::size_t n = 0;
      if (std::sscanf(line.c_str(), "\\%zu-grams:", &n) != 1 || n < 1 || n > order ||
          line != "\\" + std::to_string(n) + "-grams:")
        throw Error(ErrorKind::kParse,
                    "line " + std::to_string(line_no) + ": unexpected section header '" + line + "'");
      if (n != current + 1)
        throw Error(ErrorKind::kParse, "line " + std::to_string(line_no) + ": section \\" +
                                           std::to_string(n) + "-grams: out of order");
      current = n;
      continue;
    }
    if (current == 0)
      throw Error(ErrorKind::kParse, "line " + std::to_string(line_no) + ": entry outside a section");
    const auto fields = split_ws(line);
    if (fields.size() != current + 1 && fields.size() != current + 2)
      throw Error(ErrorKind::kParse, "line " + std::to_string(line_no) + ": expected " +
                                         std::to_string(current) + "-gram entry, got '" + line + "'");
    Raw r;
    r.lp = parse_number(fields[0], line_no);
    if (r.lp > 0)
      throw Error(ErrorKind::kParse,
                  "line " + std::to_string(line_no) + ": log10 probability must be <= 0");
    r.words.assign(fields.begin() + 1, fields.begin() + 1 + static_cast<long>(current));
    r.has_bo = fields.size() == current + 2;
    r.bo = r.has_bo ? parse_number(fields.back(), line_no) : 0.0;
    raw[current - 1].push_back(std::move(r));
  }
  if (!ended) {
    close_section(line_no);
    throw Error(ErrorKind::kParse, "missing \\end\\ marker");
  }
  for (std::size_t k = 0; k < order; ++k)
    if (raw[k].size() != counts[k])
      throw Error(ErrorKind::kParse, "section \\" + std::to_string(k + 1) +
                                         "-grams: missing (declared " + std::to_string(counts[k]) +
                                         " entries)");

  Vocabulary vocab;
  for (const auto& r : raw[0]) vocab.add(r.words[0]);
  NGramModel model(vocab, order);
  for (std::size_t k = 0; k < order; ++k) {
    for (const auto& r : raw[k]) {
      std::vector<int> ids;
      for (const auto& w : r.words) {
        if (!vocab.contains(w))
          throw Error(ErrorKind::kParse, std::to_string(k + 1) + "-gram uses '" + w +
                                             "' which has no unigram entry");
        ids.push_back(vocab.index(w));
      }
      if (k > 0) {
        std::vector<int> ctx(ids.begin(), ids.end() - 1);
        if (!model.entries(k).count(ctx))
          throw Error(ErrorKind::kParse,
                      "context of " + std::to_string(k + 1) + "-gram is not a " +
                          std::to_string(k) + "-gram entry");
      }
      model.set_entry(ids, {r.lp * kLn10, r.bo * kLn10, r.has_bo});
    }
  }
  return model;
}

NGramModel load_arpa_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open ARPA file " + path);
  return load_arpa(in);
}

void write_arpa(std::ostream& out, const NGramModel& model) {
  const auto& vocab = model.vocab();
  out << "\n\\data\\\n";
  for (std::size_t k = 1; k <= model.order(); ++k)
    out << "ngram " << k << "=" << model.entries(k).size() << "\n";
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t k = 1; k <= model.order(); ++k) {
    out << "\n\\" << k << "-grams:\n";
    // Sorted by token strings so files are deterministic.
    std::vector<std::pair<std::vector<std::string>, NGramEntry>> rows;
    for (const auto& [ids, e] : model.entries(k)) {
      std::vector<std::string> words;
      for (int id : ids) words.push_back(vocab.token(id));
      rows.emplace_back(std::move(words), e);
    }
    std::sort(rows.begin(), rows.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    for (const auto& [words, e] : rows) {
      out << e.log_prob / kLn10;
      for (const auto& w : words) out << ' ' << w;
      if (e.has_backoff) out << ' ' << e.backoff / kLn10;
      out << '\n';
    }
  }
  out << "\n\\end\\\n";
}

NGramModel estimate_ngram(const std::vector<std::vector<std::string>>& sentences,
                          std::size_t order, double discount) {
  if (order < 1) throw Error(ErrorKind::kConfiguration, "n-gram order must be >= 1");
  if (!(discount > 0 && discount < 1))
    throw Error(ErrorKind::kConfiguration, "discount must be in (0, 1)");
  Vocabulary vocab;
  std::vector<std::string> words;
  for (const auto& s : sentences) words.insert(words.end(), s.begin(), s.end());
  std::sort(words.begin(), words.end());
  for (const auto& w : words) vocab.add(w);

  // counts[k] maps (k+1)-grams to counts.
  std::vector<std::map<std::vector<int>, double>> counts(order);
  for (const auto& s : sentences) {
    std::vector<int> ids{vocab.begin()};
    for (const auto& w : s) ids.push_back(vocab.index(w));
    ids.push_back(vocab.end());
    for (std::size_t i = 1; i < ids.size(); ++i) {
      for (std::size_t k = 0; k < order && k <= i; ++k) {
        std::vector<int> g(ids.begin() + static_cast<long>(i - k), ids.begin() + static_cast<long>(i + 1));
        counts[k][g] += 1.0;
      }
    }
  }

  NGramModel model(vocab, order);
  // Unigrams: add-one over every token except <s>.
  double total = 0.0;
  for (std::size_t w = 0; w < vocab.size(); ++w) {
    if (static_cast<int>(w) == vocab.begin()) continue;
    total += counts[0][{static_cast<int>(w)}] + 1.0;
  }
  for (std::size_t w = 0; w < vocab.size(); ++w) {
    const int id = static_cast<int>(w);
    NGramEntry e;
    e.log_prob = id == vocab.begin() ? kFloorLog10 * kLn10
                                     : std::log((counts[0][{id}] + 1.0) / total);
    model.set_entry({id}, e);
  }

  for (std::size_t k = 1; k < order; ++k) {
    // Group (k+1)-grams by context.
    std::map<std::vector<int>, std::vector<std::pair<int, double>>> by_ctx;
    for (const auto& [g, c] : counts[k])
      by_ctx[std::vector<int>(g.begin(), g.end() - 1)].push_back({g.back(), c});
    for (const auto& [ctx, followers] : by_ctx) {
      double ctx_total = 0.0;
      for (const auto& f : followers) ctx_total += f.second;
      double seen_lower = 0.0;
      const std::vector<int> lower_ctx(ctx.begin() + 1, ctx.end());
      for (const auto& [w, c] : followers) {
        auto g = ctx;
        g.push_back(w);
        NGramEntry e;
        e.log_prob = std::log((c - discount) / ctx_total);
        model.set_entry(g, e);
        seen_lower += std::exp(model.log_prob(lower_ctx, w));
      }
      const double left = discount * static_cast<double>(followers.size()) / ctx_total;
      const double denom = 1.0 - seen_lower;
      NGramEntry* entry = model.find(ctx);
      entry->has_backoff = true;
      entry->backoff = denom > 0 ? std::log(left / denom) : 0.0;
    }
  }
  return model;
}

// ---------------------------------------------------------------------------
// GCNN

void GcnnConfig::validate() const {
  if (vocab_size < 1 || num_blocks < 1 || embed_dim < 1 || bottleneck_dim < 1 ||
      mid_kernel_width < 1)
    throw Error(ErrorKind::kConfiguration, "GCNN dimensions must be >= 1");
  if (mid_kernel_width % 2 == 0)
    throw Error(ErrorKind::kConfiguration, "GCNN mid kernel width must be odd");
  if (!(dropout_rate >= 0 && dropout_rate < 1))
    throw Error(ErrorKind::kConfiguration, "GCNN dropout must be in [0, 1)");
}

GcnnLm::GcnnLm(Vocabulary vocab, const GcnnConfig& config, std::uint64_t seed)
    : vocab_(std::move(vocab)), config_(config) {
  config_.vocab_size = vocab_.size();
  config_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t E = config_.embed_dim, B = config_.bottleneck_dim;
  embedding_ = Matrix(vocab_.size(), E);
  std::normal_distribution<double> dist(0.0, 0.1);
  for (auto& v : embedding_.values()) v = dist(rng);
  auto one_by_one = [](std::size_t in, std::size_t out) {
    kernels::ConvGeometry g;
    g.in_channels = in;
    g.out_channels = out;
    return g;
  };
  for (std::size_t b = 0; b < config_.num_blocks; ++b) {
    kernels::ConvGeometry mid;
    mid.in_channels = B;
    mid.out_channels = 2 * B;
    mid.width = config_.mid_kernel_width;
    mid.pad_left = config_.mid_kernel_width - 1;  // causal
    GcnnBlock block{nn::WeightNormConv(one_by_one(E, 2 * B), rng), nn::WeightNormConv(mid, rng),
                    nn::WeightNormConv(one_by_one(B, 2 * E), rng)};
    blocks_.push_back(std::move(block));
  }
  projection_ = nn::WeightNormConv(one_by_one(E, vocab_.size()), rng);
}

std::size_t GcnnLm::receptive_field() const {
  return config_.num_blocks * (config_.mid_kernel_width - 1) + 1;
}

Matrix GcnnLm::forward(const std::vector<int>& tokens, std::mt19937_64* training_rng,
                       GcnnTrace* trace) const {
  if (tokens.empty()) throw Error(ErrorKind::kConfiguration, "GCNN forward on an empty sequence");
  GcnnTrace local;
  GcnnTrace& tr = trace ? *trace : local;
  tr = GcnnTrace{};
  tr.tokens = tokens;
  const std::size_t T = tokens.size(), E = config_.embed_dim;
  Matrix h(E, T);
  for (std::size_t t = 0; t < T; ++t) {
    const int id = tokens[t];
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size())
      throw Error(ErrorKind::kConfiguration, "token index outside the GCNN vocabulary");
    for (std::size_t e = 0; e < E; ++e) h(e, t) = embedding_(static_cast<std::size_t>(id), e);
  }
  for (const auto& block : blocks_) {
    tr.block_inputs.push_back(h);
    GcnnTrace::Block bt;
    bt.pre_down = block.down.forward(h);
    bt.act_down = nn::glu(bt.pre_down);
    bt.pre_mid = block.mid.forward(bt.act_down);
    bt.act_mid = nn::glu(bt.pre_mid);
    bt.pre_up = block.up.forward(bt.act_mid);
    Matrix out = nn::glu(bt.pre_up);
    if (training_rng && config_.dropout_rate > 0) {
      bt.mask = nn::dropout_mask(out.rows(), out.cols(), config_.dropout_rate, *training_rng);
      for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= bt.mask.data()[i];
    }
    for (std::size_t i = 0; i < h.size(); ++i) h.data()[i] += out.data()[i];
    tr.blocks.push_back(std::move(bt));
  }
  tr.top = h;
  tr.log_probs = nn::log_softmax_rows(nn::transpose(projection_.forward(h)));
  return tr.log_probs;
}

GradientList GcnnLm::backward(const GcnnTrace& trace, const Matrix& grad_log_probs) const {
  if (grad_log_probs.rows() != trace.log_probs.rows() ||
      grad_log_probs.cols() != trace.log_probs.cols())
    throw Error(ErrorKind::kDimension, "GCNN upstream gradient has the wrong shape");
  Matrix g = nn::transpose(nn::log_softmax_rows_backward(trace.log_probs, grad_log_probs));
  auto proj = projection_.backward(trace.top, g);
  Matrix gh = std::move(proj.input);

  std::vector<std::array<nn::WeightNormConv::Grads, 3>> block_grads(blocks_.size());
  for (std::size_t b = blocks_.size(); b-- > 0;) {
    const auto& bt = trace.blocks[b];
    const auto& block = blocks_[b];
    Matrix g_out = gh;  // residual: gradient flows to both branches
    if (!bt.mask.empty())
      for (std::size_t i = 0; i < g_out.size(); ++i) g_out.data()[i] *= bt.mask.data()[i];
    auto up = block.up.backward(bt.act_mid, nn::glu_backward(bt.pre_up, g_out));
    auto mid = block.mid.backward(bt.act_down, nn::glu_backward(bt.pre_mid, up.input));
    auto down = block.down.backward(trace.block_inputs[b], nn::glu_backward(bt.pre_down, mid.input));
    for (std::size_t i = 0; i < gh.size(); ++i) gh.data()[i] += down.input.data()[i];
    block_grads[b] = {std::move(down), std::move(mid), std::move(up)};
  }

  GradientList out;
  std::vector<double> g_emb(embedding_.size(), 0.0);
  const std::size_t E = config_.embed_dim;
  for (std::size_t t = 0; t < trace.tokens.size(); ++t)
    for (std::size_t e = 0; e < E; ++e)
      g_emb[static_cast<std::size_t>(trace.tokens[t]) * E + e] += gh(e, t);
  out.push_back(std::move(g_emb));
  for (auto& bg : block_grads)
    for (auto& cg : bg) nn::WeightNormConv::append_gradients(std::move(cg), out);
  nn::WeightNormConv::append_gradients(std::move(proj), out);
  return out;
}

ParameterList GcnnLm::parameters() {
  ParameterList p;
  p.push_back({"lm.embedding", std::span<double>(embedding_.values())});
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const std::string prefix = "lm.block" + std::to_string(b);
    blocks_[b].down.append_parameters(prefix + ".down", p);
    blocks_[b].mid.append_parameters(prefix + ".mid", p);
    blocks_[b].up.append_parameters(prefix + ".up", p);
  }
  projection_.append_parameters("lm.proj", p);
  return p;
}

std::vector<double> GcnnLm::score_all(const LmState& state) const {
  const LmState s = truncate(state);
  if (s.tokens.empty()) throw Error(ErrorKind::kConfiguration, "GCNN state has no history");
  const Matrix lp = forward(s.tokens);
  const auto last = lp.row(lp.rows() - 1);
  return {last.begin(), last.end()};
}

double GcnnLm::score(const LmState& state, int token, LmState* next) const {
  const LmState s = truncate(state);
  if (s.tokens.empty()) throw Error(ErrorKind::kConfiguration, "GCNN state has no history");
  const Matrix lp = forward(s.tokens);
  if (next) *next = advance(s, token);
  return lp(lp.rows() - 1, static_cast<std::size_t>(token));
}

double GcnnLm::sentence_log_prob(const std::vector<int>& words) const {
  // One pass is exact whenever no context limit cuts below the receptive field.
  if (effective_context() < receptive_field()) return LanguageModel::sentence_log_prob(words);
  std::vector<int> in{vocab_.begin()};
  in.insert(in.end(), words.begin(), words.end());
  const Matrix lp = forward(in);
  double total = 0.0;
  for (std::size_t t = 0; t < in.size(); ++t) {
    const int target = t + 1 < in.size() ? in[t + 1] : vocab_.end();
    total += lp(t, static_cast<std::size_t>(target));
  }
  return total;
}

std::vector<LmEpochReport> gcnn_train(
    GcnnLm& model, const std::vector<std::vector<int>>& train,
    const std::vector<std::vector<int>>& valid, const LmTrainSettings& settings,
    const std::function<void(const LmEpochReport&, const GcnnLm&)>& on_epoch) {
  if (train.empty()) throw Error(ErrorKind::kConfiguration, "empty LM training corpus");
  std::mt19937_64 rng(settings.seed);
  Sgd opt(settings.optimizer);
  const auto params = model.parameters();
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<LmEpochReport> reports;
  const std::size_t batch = std::max<std::size_t>(1, settings.batch_size);

  for (std::size_t epoch = 1; epoch <= settings.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double nll = 0.0;
    std::size_t tokens = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t stop = std::min(order.size(), start + batch);
      std::size_t batch_tokens = 0;
      for (std::size_t i = start; i < stop; ++i) batch_tokens += train[order[i]].size() + 1;
      GradientList total = zeros_like(params);
      for (std::size_t i = start; i < stop; ++i) {
        const auto& sent = train[order[i]];
        std::vector<int> in{model.vocab().begin()};
        in.insert(in.end(), sent.begin(), sent.end());
        GcnnTrace trace;
        const Matrix lp = model.forward(in, &rng, &trace);
        Matrix grad(lp.rows(), lp.cols());
        for (std::size_t t = 0; t < in.size(); ++t) {
          const int target = t + 1 < in.size() ? in[t + 1] : model.vocab().end();
          nll -= lp(t, static_cast<std::size_t>(target));
          grad(t, static_cast<std::size_t>(target)) = -1.0 / static_cast<double>(batch_tokens);
        }
        tokens += in.size();
        accumulate(total, model.backward(trace, grad));
      }
      if (!std::isfinite(nll))
        throw Error(ErrorKind::kTrainingDivergence, "non-finite LM loss in epoch " + std::to_string(epoch));
      opt.step(params, std::move(total));
    }
    LmEpochReport r;
    r.epoch = epoch;
    r.train_perplexity = std::exp(nll / static_cast<double>(tokens));
    r.valid_perplexity = valid.empty() ? r.train_perplexity : perplexity(model, valid);
    reports.push_back(r);
    if (on_epoch) on_epoch(r, model);
  }
  return reports;
}

double perplexity(const LanguageModel& lm, const std::vector<std::vector<int>>& corpus) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& s : corpus) {
    total += lm.sentence_log_prob(s);
    count += s.size() + 1;
  }
  if (count == 0) throw Error(ErrorKind::kDomain, "perplexity of an empty corpus");
  return std::exp(-total / static_cast<double>(count));
}

double score_with_context_limit(const LanguageModel& lm, const std::vector<int>& history,
                                int token, std::size_t limit) {
  if (limit < 1) throw Error(ErrorKind::kConfiguration, "context limit must be >= 1");
  LmState s;
  const std::size_t keep = std::min(limit, history.size());
  s.tokens.assign(history.end() - static_cast<long>(keep), history.end());
  return lm.score(s, token);
}

std::vector<std::vector<int>> index_corpus(const Vocabulary& vocab,
                                           const std::vector<std::vector<std::string>>& corpus) {
  std::vector<std::vector<int>> out;
  out.reserve(corpus.size());
  for (const auto& s : corpus) {
    std::vector<int> ids;
    for (const auto& w : s) ids.push_back(vocab.index(w));
    out.push_back(std::move(ids));
  }
  return out;
}

}  // namespace convsr::lm
