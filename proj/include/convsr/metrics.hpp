// Levenshtein alignment counts for WER / CER.
#pragma once

#include <string>
#include <vector>

namespace convsr::metrics {

struct EditCounts {
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;
  std::size_t reference_length = 0;

  std::size_t errors() const { return substitutions + deletions + insertions; }
  EditCounts& operator+=(const EditCounts& o);
  bool operator==(const EditCounts&) const = default;
};

// Minimal S + D + I. Among minimal alignments the one with the most
// substitutions is reported; the backtrace then prefers a substitution (or
// match), a deletion, an insertion.
template <typename T>
EditCounts edit_distance_alignment(const std::vector<T>& reference,
                                   const std::vector<T>& hypothesis);

// 100 * errors / reference length; 0 when both are empty, 100 * insertions
// when only the reference is empty.
double error_rate(const EditCounts& c);

std::vector<std::string> split_words(const std::string& text);

extern template EditCounts edit_distance_alignment(const std::vector<std::string>&,
                                                   const std::vector<std::string>&);
extern template EditCounts edit_distance_alignment(const std::vector<int>&,
                                                   const std::vector<int>&);

}  // namespace convsr::metrics
