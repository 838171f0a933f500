#pragma once

#include <vector>

#include "stta/tensor.hpp"

namespace stta {

// Inputs [N x C x L] with one class id per row.
struct LabeledDataset {
  Tensor inputs;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
};

}  // namespace stta
