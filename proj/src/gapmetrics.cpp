#include "mgclip/gapmetrics.hpp"

#include "mgclip/linalg.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <vector>

namespace mgclip {

GapReport measure_gap(const EmbeddingTable& images, const EmbeddingTable& texts) {
  const Index k = texts.rows();
  if (k < 2) throw std::invalid_argument("neg undefined for single class");
  if (images.rows() == 0) throw std::invalid_argument("measure_gap: no images");
  if (images.dim() != texts.dim()) throw std::invalid_argument("measure_gap: dimension mismatch");

  // Row of each class in `texts`.
  std::vector<Index> row_of(static_cast<std::size_t>(k), -1);
  for (Index r = 0; r < k; ++r) {
    const int c = texts.labels[static_cast<std::size_t>(r)];
    if (c < 0 || c >= k || row_of[static_cast<std::size_t>(c)] != -1) {
      throw std::invalid_argument("measure_gap: text labels must be a permutation of 0..K-1");
    }
    row_of[static_cast<std::size_t>(c)] = r;
  }

  const Index n = images.rows();
  double pos_sum = 0.0;
  double neg_sum = 0.0;
  double all_sum = 0.0;
  for (Index i = 0; i < n; ++i) {
    const int y = images.labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= k) throw std::invalid_argument("measure_gap: image label has no text row");
    double row_neg = 0.0;
    for (Index j = 0; j < k; ++j) {
      const double c = cosine(images.vectors.row(i), texts.vectors.row(row_of[static_cast<std::size_t>(j)]));
      all_sum += c;
      if (j == y) {
        pos_sum += c;
      } else {
        row_neg += c;
      }
    }
    neg_sum += row_neg / static_cast<double>(k - 1);
  }
  GapReport r;
  r.pos = pos_sum / static_cast<double>(n);
  r.neg = neg_sum / static_cast<double>(n);
  r.inter_modality_mean = all_sum / static_cast<double>(n * k);
  r.n_images = n;
  r.n_classes = k;
  return r;
}

double relative_delta(double neg_now, double neg_ref) {
  if (neg_ref == 0.0) throw std::invalid_argument("reference gap is zero");
  return std::abs(neg_now - neg_ref) / neg_ref;
}

std::string gap_csv_header() { return "pos,neg,inter_modality_mean,n_images,n_classes"; }

std::string to_csv_row(const GapReport& report) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%lld,%lld", report.pos, report.neg,
                report.inter_modality_mean, static_cast<long long>(report.n_images),
                static_cast<long long>(report.n_classes));
  return buf;
}

}  // namespace mgclip
