#pragma once

// Full network: triple encoder-decoder, the attention head over the joint
// token, and the semantic / change heads.

#include <cstdint>
#include <utility>

#include "scannet/attention.hpp"
#include "scannet/backbone.hpp"
#include "scannet/objectives.hpp"

namespace scannet {

struct ForwardOutputs {
  TedOutputs ted;       // backbone features
  TedOutputs refined;   // features after the attention head
  Var prob1, prob2;     // N x H x W
  Var change_prob;      // 1 x H x W
};

template <typename T>
class ScanNet {
 public:
  explicit ScanNet(const ModelConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg), params_(seed) {
    cfg_.validate();
    add_backbone_params(params_, cfg_);
    add_scanformer_params(params_, cfg_);
    add_head_params(params_, cfg_);
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterStore<T>& params() { return params_; }
  const ParameterStore<T>& params() const { return params_; }

  /// Builds the graph for one image pair on `tape`.
  ForwardOutputs forward(Binder<T>& b, const Tensor<T>& image1, const Tensor<T>& image2) const {
    const Shape want{cfg_.input_channels, cfg_.input_height, cfg_.input_width};
    require_shape(image1.shape, want, "image1");
    require_shape(image2.shape, want, "image2");
    Tape<T>& t = b.tape();
    ForwardOutputs out;
    out.ted = ted_forward(b, cfg_, t.constant(image1), t.constant(image2));
    out.refined = scanformer_forward(b, cfg_, out.ted);
    out.prob1 = semantic_head(b, out.refined.x1);
    out.prob2 = semantic_head(b, out.refined.x2);
    out.change_prob = change_head(b, out.refined.xc);
    return out;
  }

  struct Prediction {
    Tensor<T> prob1, prob2, change_prob;
  };

  /// Inference without gradient bookkeeping.
  Prediction predict(const Tensor<T>& image1, const Tensor<T>& image2) {
    Tape<T> tape;
    Binder<T> b(tape, params_, false);
    const ForwardOutputs f = forward(b, image1, image2);
    return {tape.value(f.prob1), tape.value(f.prob2), tape.value(f.change_prob)};
  }

 private:
  ModelConfig cfg_;
  ParameterStore<T> params_;
};

}  // namespace scannet
