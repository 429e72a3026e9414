#include "convsr/criterion.hpp"

#include <algorithm>

namespace convsr::asg {

Alphabet::Alphabet(std::vector<std::string> letters, const std::string& silence,
                   const std::string& repetition)
    : letters_(std::move(letters)) {
  for (std::size_t i = 0; i < letters_.size(); ++i)
    for (std::size_t j = i + 1; j < letters_.size(); ++j)
      if (letters_[i] == letters_[j])
        throw Error(ErrorKind::kConfiguration, "duplicate alphabet token '" + letters_[i] + "'");
  if (letters_.size() < 2) throw Error(ErrorKind::kConfiguration, "alphabet needs >= 2 tokens");
  silence_ = index(silence);
  repetition_ = index(repetition);
  if (silence_ == repetition_)
    throw Error(ErrorKind::kConfiguration, "silence and repetition tokens must differ");
}

Alphabet Alphabet::with_defaults(const std::vector<std::string>& letters) {
  auto all = letters;
  all.push_back("|");
  all.push_back("#");
  return Alphabet(std::move(all), "|", "#");
}

int Alphabet::index(const std::string& token) const {
  const auto it = std::find(letters_.begin(), letters_.end(), token);
  if (it == letters_.end()) throw Error(ErrorKind::kVocabulary, "unknown letter '" + token + "'");
  return static_cast<int>(it - letters_.begin());
}

bool Alphabet::contains(const std::string& token) const {
  return std::find(letters_.begin(), letters_.end(), token) != letters_.end();
}

Target encode_target(const std::vector<int>& letters, const Alphabet& alphabet) {
  if (letters.empty()) throw Error(ErrorKind::kVocabulary, "empty letter sequence");
  Target t;
  bool last_was_rep = false;
  for (std::size_t i = 0; i < letters.size(); ++i) {
    const int l = letters[i];
    if (l < 0 || static_cast<std::size_t>(l) >= alphabet.size() || l == alphabet.repetition())
      throw Error(ErrorKind::kVocabulary, "letter index " + std::to_string(l) + " not encodable");
    if (i > 0 && l == letters[i - 1] && !last_was_rep) {
      t.encoded.push_back(alphabet.repetition());
      last_was_rep = true;
    } else {
      t.encoded.push_back(l);
      last_was_rep = false;
    }
  }
  return t;
}

Target encode_target(const std::vector<std::string>& letters, const Alphabet& alphabet) {
  std::vector<int> idx;
  idx.reserve(letters.size());
  for (const auto& s : letters) idx.push_back(alphabet.index(s));
  return encode_target(idx, alphabet);
}

std::vector<int> decode_target(const std::vector<int>& encoded, const Alphabet& alphabet) {
  std::vector<int> out;
  for (int e : encoded) {
    if (e == alphabet.repetition()) {
      if (out.empty()) throw Error(ErrorKind::kVocabulary, "repetition token without a letter");
      out.push_back(out.back());
    } else {
      out.push_back(e);
    }
  }
  return out;
}

AlignmentGraph AlignmentGraph::full(std::size_t frames, std::size_t alphabet_size) {
  AlignmentGraph g;
  g.kind_ = Kind::kFull;
  g.frames_ = frames;
  g.alphabet_size_ = alphabet_size;
  return g;
}

AlignmentGraph AlignmentGraph::constrained(std::size_t frames, const Target& target) {
  AlignmentGraph g;
  g.kind_ = Kind::kConstrained;
  g.frames_ = frames;
  g.states_ = target.encoded;
  for (int s : g.states_)
    g.alphabet_size_ = std::max(g.alphabet_size_, static_cast<std::size_t>(s) + 1);
  return g;
}

bool AlignmentGraph::feasible() const {
  if (frames_ == 0) return false;
  if (kind_ == Kind::kFull) return alphabet_size_ > 0;
  return !states_.empty() && states_.size() <= frames_;
}

namespace {

void check_shapes(const Matrix& emissions, const Matrix& transitions,
                  const AlignmentGraph& graph) {
  if (transitions.rows() != emissions.cols() || transitions.cols() != emissions.cols())
    throw Error(ErrorKind::kDimension, "transition table must be letters x letters");
  if (graph.frames() != emissions.rows())
    throw Error(ErrorKind::kDimension, "graph frame count differs from emission frames");
  if (graph.alphabet_size() > emissions.cols())
    throw Error(ErrorKind::kDimension, "graph uses letters outside the emission table");
}

// alpha[t][j] for the full graph.
Matrix full_alpha(const Matrix& f, const Matrix& g) {
  const std::size_t T = f.rows(), A = f.cols();
  Matrix alpha(T, A, kNegInf);
  for (std::size_t j = 0; j < A; ++j) alpha(0, j) = f(0, j);
  std::vector<double> terms(A);
  for (std::size_t t = 1; t < T; ++t) {
    for (std::size_t j = 0; j < A; ++j) {
      for (std::size_t i = 0; i < A; ++i) terms[i] = alpha(t - 1, i) + g(i, j);
      alpha(t, j) = f(t, j) + log_sum_exp(terms);
    }
  }
  return alpha;
}

Matrix full_beta(const Matrix& f, const Matrix& g) {
  const std::size_t T = f.rows(), A = f.cols();
  Matrix beta(T, A, kNegInf);
  for (std::size_t i = 0; i < A; ++i) beta(T - 1, i) = 0.0;
  std::vector<double> terms(A);
  for (std::size_t t = T - 1; t-- > 0;) {
    for (std::size_t i = 0; i < A; ++i) {
      for (std::size_t j = 0; j < A; ++j) terms[j] = g(i, j) + f(t + 1, j) + beta(t + 1, j);
      beta(t, i) = log_sum_exp(terms);
    }
  }
  return beta;
}

// alpha[t][s] over target states.
Matrix constrained_alpha(const Matrix& f, const Matrix& g, const std::vector<int>& y) {
  const std::size_t T = f.rows(), L = y.size();
  Matrix alpha(T, L, kNegInf);
  alpha(0, 0) = f(0, y[0]);
  for (std::size_t t = 1; t < T; ++t) {
    for (std::size_t s = 0; s < L; ++s) {
      double v = alpha(t - 1, s) + g(y[s], y[s]);
      if (s > 0) v = log_add(v, alpha(t - 1, s - 1) + g(y[s - 1], y[s]));
      alpha(t, s) = v == kNegInf ? kNegInf : f(t, y[s]) + v;
    }
  }
  return alpha;
}

Matrix constrained_beta(const Matrix& f, const Matrix& g, const std::vector<int>& y) {
  const std::size_t T = f.rows(), L = y.size();
  Matrix beta(T, L, kNegInf);
  beta(T - 1, L - 1) = 0.0;
  for (std::size_t t = T - 1; t-- > 0;) {
    for (std::size_t s = 0; s < L; ++s) {
      double v = g(y[s], y[s]) + f(t + 1, y[s]) + beta(t + 1, s);
      if (s + 1 < L) v = log_add(v, g(y[s], y[s + 1]) + f(t + 1, y[s + 1]) + beta(t + 1, s + 1));
      beta(t, s) = v;
    }
  }
  return beta;
}

}  // namespace

double forward_score(const Matrix& emissions, const Matrix& transitions,
                     const AlignmentGraph& graph) {
  check_shapes(emissions, transitions, graph);
  if (!graph.feasible()) return kNegInf;
  if (graph.kind() == AlignmentGraph::Kind::kFull) {
    const Matrix alpha = full_alpha(emissions, transitions);
    return log_sum_exp(alpha.row(alpha.rows() - 1));
  }
  const Matrix alpha = constrained_alpha(emissions, transitions, graph.states());
  return alpha(alpha.rows() - 1, alpha.cols() - 1);
}

namespace {

void check_target(const Matrix& emissions, const Target& target) {
  if (target.encoded.empty())
    throw Error(ErrorKind::kInfeasibleAlignment, "empty target");
  if (target.encoded.size() > emissions.rows())
    throw Error(ErrorKind::kInfeasibleAlignment,
                "target of " + std::to_string(target.encoded.size()) + " letters exceeds " +
                    std::to_string(emissions.rows()) + " frames");
  for (int s : target.encoded)
    if (s < 0 || static_cast<std::size_t>(s) >= emissions.cols())
      throw Error(ErrorKind::kVocabulary, "target letter outside the emission table");
}

}  // namespace

double asg_loss(const Matrix& emissions, const Matrix& transitions, const Target& target) {
  check_target(emissions, target);
  const double full =
      forward_score(emissions, transitions, AlignmentGraph::full(emissions.rows(), emissions.cols()));
  const double con = forward_score(emissions, transitions,
                                   AlignmentGraph::constrained(emissions.rows(), target));
  return full - con;
}

AsgGradients asg_gradients(const Matrix& emissions, const Matrix& transitions,
                           const Target& target) {
  check_target(emissions, target);
  const Matrix& f = emissions;
  const Matrix& g = transitions;
  check_shapes(f, g, AlignmentGraph::full(f.rows(), f.cols()));
  const std::size_t T = f.rows(), A = f.cols();
  const auto& y = target.encoded;
  const std::size_t L = y.size();

  AsgGradients out;
  out.emissions = Matrix(T, A);
  out.transitions = Matrix(A, A);

  const Matrix fa = full_alpha(f, g);
  const Matrix fb = full_beta(f, g);
  const double z_full = log_sum_exp(fa.row(T - 1));
  const Matrix ca = constrained_alpha(f, g, y);
  const Matrix cb = constrained_beta(f, g, y);
  const double z_con = ca(T - 1, L - 1);
  out.loss = z_full - z_con;

  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t j = 0; j < A; ++j)
      out.emissions(t, j) += std::exp(fa(t, j) + fb(t, j) - z_full);
    for (std::size_t s = 0; s < L; ++s) {
      const double lp = ca(t, s) + cb(t, s);
      if (lp != kNegInf) out.emissions(t, y[s]) -= std::exp(lp - z_con);
    }
  }
  for (std::size_t t = 1; t < T; ++t) {
    for (std::size_t i = 0; i < A; ++i)
      for (std::size_t j = 0; j < A; ++j)
        out.transitions(i, j) += std::exp(fa(t - 1, i) + g(i, j) + f(t, j) + fb(t, j) - z_full);
    for (std::size_t s = 0; s < L; ++s) {
      const double tail = f(t, y[s]) + cb(t, s) - z_con;
      const double stay = ca(t - 1, s) + g(y[s], y[s]) + tail;
      if (stay != kNegInf) out.transitions(y[s], y[s]) -= std::exp(stay);
      if (s > 0) {
        const double adv = ca(t - 1, s - 1) + g(y[s - 1], y[s]) + tail;
        if (adv != kNegInf) out.transitions(y[s - 1], y[s]) -= std::exp(adv);
      }
    }
  }
  return out;
}

ViterbiResult viterbi(const Matrix& emissions, const Matrix& transitions,
                      const AlignmentGraph& graph) {
  check_shapes(emissions, transitions, graph);
  ViterbiResult r;
  if (!graph.feasible()) return r;
  const Matrix& f = emissions;
  const Matrix& g = transitions;
  const std::size_t T = f.rows();

  if (graph.kind() == AlignmentGraph::Kind::kFull) {
    const std::size_t A = f.cols();
    Matrix score(T, A);
    std::vector<std::vector<int>> back(T, std::vector<int>(A, -1));
    for (std::size_t j = 0; j < A; ++j) score(0, j) = f(0, j);
    for (std::size_t t = 1; t < T; ++t) {
      for (std::size_t j = 0; j < A; ++j) {
        double best = kNegInf;
        int arg = 0;
        for (std::size_t i = 0; i < A; ++i) {
          const double v = score(t - 1, i) + g(i, j);
          if (v > best) {
            best = v;
            arg = static_cast<int>(i);
          }
        }
        score(t, j) = f(t, j) + best;
        back[t][j] = arg;
      }
    }
    int cur = 0;
    for (std::size_t j = 1; j < A; ++j)
      if (score(T - 1, j) > score(T - 1, static_cast<std::size_t>(cur))) cur = static_cast<int>(j);
    r.score = score(T - 1, static_cast<std::size_t>(cur));
    r.path.assign(T, 0);
    for (std::size_t t = T; t-- > 0;) {
      r.path[t] = cur;
      if (t > 0) cur = back[t][static_cast<std::size_t>(cur)];
    }
    return r;
  }

  const auto& y = graph.states();
  const std::size_t L = y.size();
  Matrix score(T, L, kNegInf);
  std::vector<std::vector<int>> back(T, std::vector<int>(L, -1));
  score(0, 0) = f(0, y[0]);
  for (std::size_t t = 1; t < T; ++t) {
    for (std::size_t s = 0; s < L; ++s) {
      const double stay = score(t - 1, s) + g(y[s], y[s]);
      double best = stay;
      int arg = static_cast<int>(s);
      if (s > 0) {
        const double adv = score(t - 1, s - 1) + g(y[s - 1], y[s]);
        if (adv > best || (adv == best && y[s - 1] < y[s])) {
          best = adv;
          arg = static_cast<int>(s - 1);
        }
      }
      if (best == kNegInf) continue;
      score(t, s) = f(t, y[s]) + best;
      back[t][s] = arg;
    }
  }
  r.score = score(T - 1, L - 1);
  r.path.assign(T, 0);
  int cur = static_cast<int>(L - 1);
  for (std::size_t t = T; t-- > 0;) {
    r.path[t] = y[static_cast<std::size_t>(cur)];
    if (t > 0) cur = back[t][static_cast<std::size_t>(cur)];
  }
  return r;
}

double path_score(const Matrix& emissions, const Matrix& transitions,
                  const std::vector<int>& path) {
  double s = 0.0;
  for (std::size_t t = 0; t < path.size(); ++t) {
    s += emissions(t, static_cast<std::size_t>(path[t]));
    if (t > 0)
      s += transitions(static_cast<std::size_t>(path[t - 1]), static_cast<std::size_t>(path[t]));
  }
  return s;
}

}  // namespace convsr::asg
