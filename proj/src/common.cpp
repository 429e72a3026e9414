#include "convsr/common.hpp"

namespace convsr {

const char* error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kEmptySignal: return "empty signal";
    case ErrorKind::kInsufficientInput: return "insufficient input";
    case ErrorKind::kDomain: return "domain error";
    case ErrorKind::kDimension: return "dimension error";
    case ErrorKind::kDegenerateFilter: return "degenerate filter";
    case ErrorKind::kConfiguration: return "configuration error";
    case ErrorKind::kTrainingDivergence: return "training diverged";
    case ErrorKind::kVocabulary: return "vocabulary error";
    case ErrorKind::kInfeasibleAlignment: return "infeasible alignment";
    case ErrorKind::kParse: return "parse error";
    case ErrorKind::kCapacity: return "capacity exceeded";
    case ErrorKind::kEmptyBeam: return "empty beam";
    case ErrorKind::kIo: return "i/o error";
  }
  return "error";
}

double log_sum_exp(std::span<const double> v) {
  double m = kNegInf;
  for (double x : v) m = std::max(m, x);
  if (m == kNegInf) return kNegInf;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace convsr
