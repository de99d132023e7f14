#pragma once

#include <vector>

#include "revcol/data.hpp"
#include "revcol/model.hpp"

namespace revcol {

// Linear centered kernel alignment between two feature sets with one row
// per sample: ||Y^T X||_F^2 / (||X^T X||_F * ||Y^T Y||_F) after centering
// each column. Computed through the n x n Gram matrices (identical value,
// cheaper when features outnumber samples).
template <class T>
double compute_cka(const Tensor<T>& x, const Tensor<T>& y) {
  if (x.rank() != 2 || y.rank() != 2) throw ShapeError("compute_cka: features must be samples x dims");
  const std::int64_t n = x.dim(0);
  if (y.dim(0) != n)
    throw ShapeError("compute_cka: sample axis mismatch " + std::to_string(n) + " vs " +
                     std::to_string(y.dim(0)));
  if (n < 2) throw ValueError("compute_cka: need at least 2 samples");

  auto centered_gram = [n](const Tensor<T>& f) {
    const std::int64_t d = f.dim(1);
    std::vector<double> c(static_cast<std::size_t>(n * d));
    const T* p = f.data();
    for (std::int64_t j = 0; j < d; ++j) {
      double mean = 0;
      for (std::int64_t i = 0; i < n; ++i) mean += static_cast<double>(p[i * d + j]);
      mean /= static_cast<double>(n);
      for (std::int64_t i = 0; i < n; ++i)
        c[static_cast<std::size_t>(i * d + j)] = static_cast<double>(p[i * d + j]) - mean;
    }
    std::vector<double> gram(static_cast<std::size_t>(n * n));
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < n; ++j) {
        double acc = 0;
        for (std::int64_t k = 0; k < d; ++k)
          acc += c[static_cast<std::size_t>(i * d + k)] * c[static_cast<std::size_t>(j * d + k)];
        gram[static_cast<std::size_t>(i * n + j)] = acc;
      }
    return gram;
  };

  const auto gx = centered_gram(x);
  const auto gy = centered_gram(y);
  double cross = 0, xx = 0, yy = 0;
  for (std::size_t i = 0; i < gx.size(); ++i) {
    cross += gx[i] * gy[i];
    xx += gx[i] * gx[i];
    yy += gy[i] * gy[i];
  }
  if (xx == 0) throw ValueError("compute_cka: first feature set has zero variance");
  if (yy == 0) throw ValueError("compute_cka: second feature set has zero variance");
  return cross / (std::sqrt(xx) * std::sqrt(yy));
}

struct CkaResult {
  int columns = 0;
  int levels = 4;
  std::vector<double> image;  // [col * levels + level]
  std::vector<double> label;
  std::int64_t samples = 0;

  double image_at(int col, int lvl) const {
    return image.at(static_cast<std::size_t>((col - 1) * levels + (lvl - 1)));
  }
  double label_at(int col, int lvl) const {
    return label.at(static_cast<std::size_t>((col - 1) * levels + (lvl - 1)));
  }
};

// Similarity of every (column, level) feature map against the flattened
// input images and against one-hot labels, over the first `samples` items.
template <class T>
CkaResult cka_by_column(RevColModel<T>& model, const Dataset<T>& ds, std::int64_t samples,
                        std::int64_t batch_size = 16) {
  samples = std::min<std::int64_t>(samples, ds.size());
  if (samples < 2) throw ValueError("cka_by_column: need at least 2 samples");
  const int cols = model.cfg.columns;

  // Per (column, level) feature matrices, one flattened row per sample.
  std::vector<Tensor<T>> feats(static_cast<std::size_t>(cols * 4));
  Tensor<T> images_flat = Tensor<T>::zeros({samples, ds.images.numel() / ds.size()});
  Tensor<T> labels_onehot = Tensor<T>::zeros({samples, ds.classes});

  std::vector<std::int64_t> order(static_cast<std::size_t>(ds.size()));
  for (std::int64_t i = 0; i < ds.size(); ++i) order[static_cast<std::size_t>(i)] = i;

  std::int64_t done = 0;
  while (done < samples) {
    const std::int64_t take = std::min<std::int64_t>(batch_size, samples - done);
    auto batch = gather_batch(ds, order, done, take);
    Tape<T> tape(false);
    auto fr = run_forward(model, tape, Value<T>{batch.images, -1}, true, false);
    for (int c = 0; c < cols; ++c)
      for (int l = 0; l < 4; ++l) {
        const auto& t = fr.all_states[static_cast<std::size_t>(c)][static_cast<std::size_t>(l)].v;
        const std::int64_t d = t.numel() / take;
        auto& f = feats[static_cast<std::size_t>(c * 4 + l)];
        if (!f.defined()) f = Tensor<T>::zeros({samples, d});
        std::copy(t.data(), t.data() + take * d, f.data() + done * d);
      }
    const std::int64_t dimg = images_flat.dim(1);
    std::copy(batch.images.data(), batch.images.data() + take * dimg,
              images_flat.data() + done * dimg);
    for (std::int64_t i = 0; i < take; ++i)
      labels_onehot.data()[(done + i) * ds.classes + batch.labels[static_cast<std::size_t>(i)]] = T(1);
    done += take;
  }

  CkaResult r;
  r.columns = cols;
  r.samples = samples;
  for (int c = 0; c < cols; ++c)
    for (int l = 0; l < 4; ++l) {
      const auto& f = feats[static_cast<std::size_t>(c * 4 + l)];
      r.image.push_back(compute_cka(f, images_flat));
      r.label.push_back(compute_cka(f, labels_onehot));
    }
  return r;
}

inline std::string cka_csv(const CkaResult& r) {
  std::string out = "column,level,cka_image,cka_label\n";
  char line[96];
  for (int c = 1; c <= r.columns; ++c)
    for (int l = 1; l <= r.levels; ++l) {
      std::snprintf(line, sizeof line, "%d,%d,%.12g,%.12g\n", c, l, r.image_at(c, l),
                    r.label_at(c, l));
      out += line;
    }
  return out;
}

}  // namespace revcol
