#include "convsr/metrics.hpp"

#include <algorithm>
#include <sstream>
#include <utility>

namespace convsr::metrics {

EditCounts& EditCounts::operator+=(const EditCounts& o) {
  substitutions += o.substitutions;
  deletions += o.deletions;
  insertions += o.insertions;
  reference_length += o.reference_length;
  return *this;
}

// Costs are compared as (errors, deletions + insertions), so among minimal
// alignments the one with the most substitutions wins. That makes S, D and I
// unique: D = n - k and I = m - k for k aligned pairs.
template <typename T>
EditCounts edit_distance_alignment(const std::vector<T>& ref, const std::vector<T>& hyp) {
  using Cost = std::pair<std::size_t, std::size_t>;
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::vector<Cost>> d(n + 1, std::vector<Cost>(m + 1));
  for (std::size_t i = 0; i <= n; ++i) d[i][0] = {i, i};
  for (std::size_t j = 0; j <= m; ++j) d[0][j] = {j, j};
  auto plus = [](Cost c, std::size_t e, std::size_t gap) { return Cost{c.first + e, c.second + gap}; };
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j)
      d[i][j] = std::min({plus(d[i - 1][j - 1], ref[i - 1] == hyp[j - 1] ? 0 : 1, 0),
                          plus(d[i - 1][j], 1, 1), plus(d[i][j - 1], 1, 1)});

  EditCounts c;
  c.reference_length = n;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0) {
      const std::size_t cost = ref[i - 1] == hyp[j - 1] ? 0 : 1;
      if (d[i][j] == plus(d[i - 1][j - 1], cost, 0)) {
        c.substitutions += cost;
        --i;
        --j;
        continue;
      }
    }
    if (i > 0 && d[i][j] == plus(d[i - 1][j], 1, 1)) {
      ++c.deletions;
      --i;
    } else {
      ++c.insertions;
      --j;
    }
  }
  return c;
}

template EditCounts edit_distance_alignment(const std::vector<std::string>&,
                                            const std::vector<std::string>&);
template EditCounts edit_distance_alignment(const std::vector<int>&, const std::vector<int>&);

double error_rate(const EditCounts& c) {
  if (c.reference_length == 0) return c.insertions == 0 ? 0.0 : 100.0 * static_cast<double>(c.insertions);
  return 100.0 * static_cast<double>(c.errors()) / static_cast<double>(c.reference_length);
}

std::vector<std::string> split_words(const std::string& text) {
  std::istringstream ss(text);
  std::vector<std::string> out;
  std::string w;
  while (ss >> w) out.push_back(w);
  return out;
}

}  // namespace convsr::metrics
