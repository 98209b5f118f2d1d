#pragma once

// Class-level feature averaging and channel vector sequence construction.

#include "fumnet/dataset.hpp"
#include "fumnet/ops.hpp"

#include <span>

namespace fumnet {

/// Stacks images into a [batch x channels x H x W] tensor.
template <typename Scalar>
Tensor<Scalar> image_batch(const Dataset& dataset, std::span<const SampleRef> refs) {
  if (refs.empty()) throw ShapeError("image_batch: no images");
  const Image& first = dataset.image(refs[0].class_index, refs[0].sample_index);
  const Index per = first.size();
  Vec<Scalar> data(static_cast<Index>(refs.size()) * per);
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const Image& img = dataset.image(refs[i].class_index, refs[i].sample_index);
    if (img.channels != first.channels || img.height != first.height || img.width != first.width) {
      throw ShapeError("image_batch: images have different sizes");
    }
    data.segment(static_cast<Index>(i) * per, per) =
        Eigen::Map<const Eigen::VectorXf>(img.pixels.data(), per).template cast<Scalar>();
  }
  return Tensor<Scalar>({static_cast<Index>(refs.size()), first.channels, first.height, first.width}, std::move(data));
}

/// Elementwise mean of K feature maps of identical shape.
template <typename Scalar>
Tensor<Scalar> class_level_average(const std::vector<Tensor<Scalar>>& maps) {
  if (maps.empty()) throw ShapeError("class_level_average: no feature maps");
  Tensor<Scalar> total = maps.front();
  for (std::size_t i = 1; i < maps.size(); ++i) total = total + maps[i];
  if (maps.size() == 1) return total;
  return affine(total, Scalar(1) / static_cast<Scalar>(maps.size()));
}

/// Per-class means of support embeddings [N*K x c x d] laid out class-major,
/// returned as [N x c x d].
template <typename Scalar>
Tensor<Scalar> class_level_averages(const Tensor<Scalar>& support, Index n_way, Index k_shot) {
  if (support.rank() != 3 || support.dim(0) != n_way * k_shot) {
    throw ShapeError("class_level_averages: expected [" + std::to_string(n_way * k_shot) + " x c x d], got " +
                     to_string(support.shape()));
  }
  const Index c = support.dim(1), d = support.dim(2);
  std::vector<Tensor<Scalar>> classes;
  for (Index i = 0; i < n_way; ++i) {
    std::vector<Tensor<Scalar>> shots;
    for (Index j = 0; j < k_shot; ++j) shots.push_back(narrow(support, 0, i * k_shot + j, 1));
    classes.push_back(class_level_average(shots));
  }
  return reshape(concat(classes, 0), {n_way, c, d});
}

template <typename Scalar>
struct ChannelVectorSequence {
  Tensor<Scalar> data;  // [c x (N+1)*d]
  Index channels = 0;
  Index dim = 0;
  Index n_way = 0;

  /// Channel t of input map i (i == n_way is the query).
  Tensor<Scalar> slice(Index t, Index i) const {
    return reshape(narrow(narrow(data, 0, t, 1), 1, i * dim, dim), {dim});
  }
};

/// Batched construction: class maps [N x c x d] and query maps [Q x c x d]
/// give [Q x c x (N+1)*d], where step t of query p is
/// [class_1[t], ..., class_N[t], query_p[t]].
template <typename Scalar>
Tensor<Scalar> build_channel_vector_sequences(const Tensor<Scalar>& class_maps, const Tensor<Scalar>& query_maps) {
  if (class_maps.rank() != 3 || query_maps.rank() != 3 || class_maps.dim(1) != query_maps.dim(1) ||
      class_maps.dim(2) != query_maps.dim(2)) {
    throw ShapeError("channel vector sequence: class maps " + to_string(class_maps.shape()) + " and query maps " +
                     to_string(query_maps.shape()) + " must share c and d");
  }
  const Index n = class_maps.dim(0), q = query_maps.dim(0), c = class_maps.dim(1), d = class_maps.dim(2);
  const Index width = (n + 1) * d;
  Vec<Scalar> out(q * c * width);
  for (Index p = 0; p < q; ++p) {
    for (Index t = 0; t < c; ++t) {
      Scalar* step = out.data() + (p * c + t) * width;
      for (Index i = 0; i < n; ++i) {
        std::copy_n(class_maps.raw() + (i * c + t) * d, d, step + i * d);
      }
      std::copy_n(query_maps.raw() + (p * c + t) * d, d, step + n * d);
    }
  }
  return record<Scalar>({q, c, width}, std::move(out), {class_maps, query_maps}, [n, q, c, d, width](auto& self) {
    auto& pc = *self.parents[0];
    auto& pq = *self.parents[1];
    const Scalar* g = self.grad.data();
    for (Index p = 0; p < q; ++p) {
      for (Index t = 0; t < c; ++t) {
        const Scalar* step = g + (p * c + t) * width;
        if (pc.requires_grad) {
          for (Index i = 0; i < n; ++i) {
            Eigen::Map<Vec<Scalar>>(pc.grad_buffer().data() + (i * c + t) * d, d) +=
                Eigen::Map<const Vec<Scalar>>(step + i * d, d);
          }
        }
        if (pq.requires_grad) {
          Eigen::Map<Vec<Scalar>>(pq.grad_buffer().data() + (p * c + t) * d, d) +=
              Eigen::Map<const Vec<Scalar>>(step + n * d, d);
        }
      }
    }
  });
}

/// Single-query form over N class maps [c x d] and one query map [c x d].
template <typename Scalar>
ChannelVectorSequence<Scalar> build_channel_vector_sequence(const std::vector<Tensor<Scalar>>& class_maps,
                                                            const Tensor<Scalar>& query_map) {
  if (class_maps.empty()) throw ShapeError("channel vector sequence: no class maps");
  for (const auto& m : class_maps) {
    if (m.shape() != query_map.shape() || m.rank() != 2) {
      throw ShapeError("channel vector sequence: map " + to_string(m.shape()) + " vs query " +
                       to_string(query_map.shape()));
    }
  }
  const Index n = static_cast<Index>(class_maps.size());
  const Index c = query_map.dim(0), d = query_map.dim(1);
  std::vector<Tensor<Scalar>> stacked;
  for (const auto& m : class_maps) stacked.push_back(reshape(m, {1, c, d}));
  const Tensor<Scalar> seq =
      build_channel_vector_sequences(concat(stacked, 0), reshape(query_map, {1, c, d}));
  return {reshape(seq, {c, (n + 1) * d}), c, d, n};
}

}  // namespace fumnet
