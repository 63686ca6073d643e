// Copyright (c) 2026 The LEGO Bricks Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "lego/tensor.hpp"

namespace lego {

struct Sample {
  Image image;
  int label = -1;  // -1: unconditional
};

/// Random-access sample stream. `at(i)` is a pure function of i, which makes
/// every training batch reproducible from the step counter alone.
class Dataset {
 public:
  virtual ~Dataset() = default;
  virtual std::size_t height() const = 0;
  virtual std::size_t width() const = 0;
  virtual std::size_t channels() const = 0;
  virtual int num_classes() const = 0;
  virtual Sample at(std::uint64_t index) const = 0;
};

struct Batch {
  std::vector<Image> images;
  std::vector<int> labels;
};

/// Samples [first, first + n).
inline Batch batch_at(const Dataset& ds, std::uint64_t first, std::size_t n) {
  Batch b;
  for (std::size_t i = 0; i < n; ++i) {
    Sample s = ds.at(first + i);
    b.images.push_back(std::move(s.image));
    b.labels.push_back(s.label);
  }
  return b;
}

/// A fixed in-memory list, cycled.
class ListDataset : public Dataset {
 public:
  ListDataset(std::vector<Sample> samples, int num_classes) : samples_(std::move(samples)), classes_(num_classes) {
    if (samples_.empty()) throw IngestError("list dataset: no samples");
    require_image(samples_.front().image.shape(), "list dataset");
    for (const auto& s : samples_) require_same_shape(s.image.shape(), samples_.front().image.shape(), "list dataset");
  }
  std::size_t height() const override { return samples_.front().image.dim(0); }
  std::size_t width() const override { return samples_.front().image.dim(1); }
  std::size_t channels() const override { return samples_.front().image.dim(2); }
  int num_classes() const override { return classes_; }
  Sample at(std::uint64_t index) const override { return samples_[index % samples_.size()]; }
  std::size_t size() const { return samples_.size(); }

 private:
  std::vector<Sample> samples_;
  int classes_;
};

}  // namespace lego
