#include "doctest.h"

#include "fixtures.hpp"
#include "oracles.hpp"
#include "mgclip/gapmetrics.hpp"

#include <algorithm>

using namespace mgclip;

namespace {

struct Instance {
  EmbeddingTable images;
  EmbeddingTable texts;
};

Instance random_instance(Rng& rng, Index n, int k, Index d) {
  return {make_table(Modality::image, fixture::unit_rows(n, d, rng), fixture::random_labels(n, k, rng)),
          fixture::class_texts(fixture::unit_rows(k, d, rng))};
}

}  // namespace

TEST_CASE("identical matched pairs with orthogonal texts give pos 1, neg 0") {
  const Matrix texts = Matrix::Identity(3, 3);
  const auto g = measure_gap(make_table(Modality::image, texts, {0, 1, 2}), fixture::class_texts(texts));
  CHECK(g.pos == 1.0);
  CHECK(g.neg == 0.0);
  CHECK(g.inter_modality_mean == doctest::Approx(1.0 / 3.0));
  CHECK(g.n_images == 3);
  CHECK(g.n_classes == 3);
}

TEST_CASE("6 images, 3 classes: equals the brute-force double loop exactly") {
  Rng rng(6);
  const auto inst = random_instance(rng, 6, 3, 5);
  const auto g = measure_gap(inst.images, inst.texts);
  const auto o = oracle::gap(oracle::rows_of(inst.images.vectors), inst.images.labels, oracle::rows_of(inst.texts.vectors));
  CHECK(oracle::bit_equal(g.pos, o.pos));
  CHECK(oracle::bit_equal(g.neg, o.neg));
  CHECK(oracle::bit_equal(g.inter_modality_mean, o.mean));
}

TEST_CASE("brute-force equivalence for random N, K <= 10") {
  Rng rng(100);
  std::uniform_int_distribution<int> size(2, 10);
  for (int trial = 0; trial < 100; ++trial) {
    const int k = size(rng);
    const auto inst = random_instance(rng, size(rng) - 1, k, 6);
    const auto g = measure_gap(inst.images, inst.texts);
    const auto o =
        oracle::gap(oracle::rows_of(inst.images.vectors), inst.images.labels, oracle::rows_of(inst.texts.vectors));
    CHECK(oracle::bit_equal(g.pos, o.pos));
    CHECK(oracle::bit_equal(g.neg, o.neg));
    CHECK(oracle::bit_equal(g.inter_modality_mean, o.mean));
  }
}

TEST_CASE("statistics are bounded and mix into the inter-modality mean") {
  Rng rng(7);
  for (int trial = 0; trial < 30; ++trial) {
    const auto inst = random_instance(rng, 12, 4, 5);
    const auto g = measure_gap(inst.images, inst.texts);
    for (double v : {g.pos, g.neg, g.inter_modality_mean}) {
      CHECK(v >= -1.0);
      CHECK(v <= 1.0);
    }
    CHECK(std::abs(g.inter_modality_mean - (g.pos + 3.0 * g.neg) / 4.0) < 1e-10);
  }
}

TEST_CASE("invariant to positive rescaling of rows and to image row order") {
  Rng rng(8);
  const auto inst = random_instance(rng, 9, 4, 5);
  const auto g = measure_gap(inst.images, inst.texts);

  EmbeddingTable scaled_img = inst.images;
  EmbeddingTable scaled_txt = inst.texts;
  scaled_img.vectors.row(2) *= 3.0;
  scaled_txt.vectors.row(1) *= 0.25;
  const auto s = measure_gap(scaled_img, scaled_txt);
  CHECK(s.pos == doctest::Approx(g.pos).epsilon(1e-12));
  CHECK(s.neg == doctest::Approx(g.neg).epsilon(1e-12));

  std::vector<Index> perm{8, 3, 1, 0, 6, 2, 7, 5, 4};
  EmbeddingTable shuffled = inst.images;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    shuffled.vectors.row(static_cast<Index>(i)) = inst.images.vectors.row(perm[i]);
    shuffled.labels[i] = inst.images.labels[static_cast<std::size_t>(perm[i])];
  }
  const auto p = measure_gap(shuffled, inst.texts);
  CHECK(p.pos == doctest::Approx(g.pos).epsilon(1e-12));
  CHECK(p.neg == doctest::Approx(g.neg).epsilon(1e-12));
  CHECK(p.inter_modality_mean == doctest::Approx(g.inter_modality_mean).epsilon(1e-12));
}

TEST_CASE("text rows may come in any order") {
  Rng rng(9);
  const auto inst = random_instance(rng, 8, 3, 4);
  EmbeddingTable reordered = inst.texts;
  reordered.vectors.row(0) = inst.texts.vectors.row(2);
  reordered.vectors.row(2) = inst.texts.vectors.row(0);
  reordered.labels = {2, 1, 0};
  CHECK(measure_gap(inst.images, reordered) == measure_gap(inst.images, inst.texts));
}

TEST_CASE("measure_gap input errors") {
  const Matrix t = Matrix::Identity(1, 3);
  CHECK_THROWS_WITH(measure_gap(make_table(Modality::image, t, {0}), fixture::class_texts(t)),
                    "neg undefined for single class");
  const Matrix two = Matrix::Identity(2, 3);
  CHECK_THROWS_AS(measure_gap(make_table(Modality::image, t, {5}), fixture::class_texts(two)), std::invalid_argument);
  EmbeddingTable dup = fixture::class_texts(two);
  dup.labels = {0, 0};
  CHECK_THROWS_AS(measure_gap(make_table(Modality::image, t, {0}), dup), std::invalid_argument);
}

TEST_CASE("relative_delta examples") {
  CHECK(relative_delta(0.3, 0.3) == 0.0);
  CHECK(relative_delta(0.09, 0.10) == doctest::Approx(0.1));
  CHECK(relative_delta(0.22, 0.20) == doctest::Approx(0.1));
  CHECK(relative_delta(-0.1, -0.2) == doctest::Approx(-0.5));
  CHECK_THROWS_WITH(relative_delta(0.1, 0.0), "reference gap is zero");
}

TEST_CASE("csv row carries 17 significant digits") {
  GapReport g{0.1, 0.2, 0.3, 4, 2};
  CHECK(gap_csv_header() == "pos,neg,inter_modality_mean,n_images,n_classes");
  CHECK(to_csv_row(g) == "0.10000000000000001,0.20000000000000001,0.29999999999999999,4,2");
}
