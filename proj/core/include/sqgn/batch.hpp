#pragma once

#include "sqgn/tensor.hpp"

namespace sqgn {

/// One mini-batch: inputs (N, ...) and labels (N) or (N, r).
struct Batch {
  Tensor inputs;
  Tensor labels;
  int64_t size() const { return inputs.rank() > 0 ? inputs.extent(0) : 0; }
};

} // namespace sqgn
