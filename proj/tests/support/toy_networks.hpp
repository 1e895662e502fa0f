#pragma once

// Three-input, three-class toy networks (input -> dense -> relu -> dense ->
// softmax) with non-negative first-layer weights and a 0..255 input domain
// with zero means, so the bounded-input rule coincides with z+ on them.

#include <vector>

#include "relprop/model.hpp"

namespace toy {

inline relprop::NetworkModel two_layer(std::size_t inputs, std::size_t hidden, std::size_t classes,
                                       std::vector<double> first, std::vector<double> second) {
  using relprop::LayerKind;
  using relprop::Tensor;
  return relprop::assemble_model(
      {1, 1, inputs},
      {{LayerKind::dense, inputs, hidden, 0, 0, 1, 0, false},
       {LayerKind::relu},
       {LayerKind::dense, hidden, classes, 0, 0, 1, 0, false},
       {LayerKind::softmax}},
      {{Tensor({hidden, inputs}, std::move(first)), Tensor()},
       {},
       {Tensor({classes, hidden}, std::move(second)), Tensor()},
       {}});
}

/// Hidden unit 2 (fed by x3) drives both class 2 and class 3; only hidden
/// unit 1 (fed by x1) separates class 2 from class 3. Target: class index 1.
inline relprop::NetworkModel shared_evidence_network() {
  return two_layer(3, 2, 3,
                   {1.0, 0.0, 0.0,   //
                    0.0, 0.2, 1.0},  //
                   {0.5, 0.0,        //
                    1.0, 2.0,        //
                    0.0, 2.0});
}

/// Hidden unit 2 (fed by x2) is the evidence for class 2 but also feeds both
/// non-target classes; class 1 is strongly active through x1. Target: class index 1.
inline relprop::NetworkModel uniform_penalty_network() {
  return two_layer(3, 3, 3,
                   {1, 0, 0,  //
                    0, 1, 0,  //
                    0, 0, 1},
                   {3.0, 1.5, 0.0,  //
                    0.0, 1.2, 1.0,  //
                    0.0, 1.5, 0.0});
}

inline relprop::Tensor unit_input() { return relprop::Tensor({1, 1, 3}, {1.0, 1.0, 1.0}); }

inline constexpr std::size_t kTarget = 1;

}  // namespace toy
