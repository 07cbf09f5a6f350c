#pragma once

#include <vector>

#include "regionlets/geometry.hpp"
#include "regionlets/tensor.hpp"

namespace regionlets {

/// One annotated object. Label 0 is reserved for background.
struct GroundTruth {
  Box box;
  int label = 0;
};

/// One image [3, H, W] with values in [0, 1], its annotations and its proposals.
struct DetectionInstance {
  Tensor image;
  std::vector<GroundTruth> gt;
  std::vector<RegionOfInterest> proposals;
};

}  // namespace regionlets
