#ifndef MGCLIP_GAPMETRICS_HPP
#define MGCLIP_GAPMETRICS_HPP

#include "mgclip/data.hpp"

#include <string>

namespace mgclip {

/// Mean image-text cosine statistics of one model state on one dataset.
struct GapReport {
  double pos = 0.0;                  // matched pairs
  double neg = 0.0;                  // mismatched pairs, averaged per image over K - 1 classes
  double inter_modality_mean = 0.0;  // all image-text pairs
  Index n_images = 0;
  Index n_classes = 0;

  friend bool operator==(const GapReport&, const GapReport&) = default;
};

/// `texts` holds one row per class (row label = class id). Cosines are evaluated with
/// sequential sums in index order, so the result is reproducible bit-for-bit.
GapReport measure_gap(const EmbeddingTable& images, const EmbeddingTable& texts);

/// |neg_now - neg_ref| / neg_ref. The denominator is not made absolute: a negative
/// reference yields a negative value.
double relative_delta(double neg_now, double neg_ref);

std::string gap_csv_header();
/// pos,neg,inter_modality_mean,n_images,n_classes with 17 significant digits.
std::string to_csv_row(const GapReport& report);

}  // namespace mgclip

#endif  // MGCLIP_GAPMETRICS_HPP
