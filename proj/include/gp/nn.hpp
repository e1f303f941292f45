#pragma once

#include "gp/tensor.hpp"

namespace gp {

enum class BnMode { kTrain, kRecalibrate, kEval };

// Per-channel batch normalization state, privatized per channel-width bucket:
// one state serves exactly one (layer, width_key) pair.
template <typename S>
struct BatchNormState {
  Tensor<S> scale;  // gamma, learnable
  Tensor<S> shift;  // beta, learnable
  std::vector<S> moving_mean;
  std::vector<S> moving_var;
  S epsilon = S(1e-5);
  int width_key = 0;
  bool calibrated = false;

  // Recalibration accumulators; reset by begin_recalibration().
  std::vector<double> acc_mean;
  std::vector<double> acc_var;
  int64_t acc_batches = 0;

  BatchNormState() = default;
  BatchNormState(int channels, int width_key_, S epsilon_ = S(1e-5))
      : scale(Shape{channels}, S(1), true),
        shift(Shape{channels}, S(0), true),
        moving_mean(size_t(channels), S(0)),
        moving_var(size_t(channels), S(0)),
        epsilon(epsilon_),
        width_key(width_key_) {}

  int channels() const { return scale.dim(0); }

  void begin_recalibration() {
    acc_mean.assign(size_t(channels()), 0.0);
    acc_var.assign(size_t(channels()), 0.0);
    acc_batches = 0;
    calibrated = false;
  }

  // Moving statistics = average of per-batch statistics seen since begin_recalibration().
  void finish_recalibration() {
    if (acc_batches == 0) throw std::runtime_error("batchnorm: recalibration saw no batches");
    for (int c = 0; c < channels(); ++c) {
      moving_mean[size_t(c)] = S(acc_mean[size_t(c)] / double(acc_batches));
      moving_var[size_t(c)] = S(acc_var[size_t(c)] / double(acc_batches));
    }
    calibrated = true;
  }
};

template <typename S>
Tensor<S> batchnorm(const Tensor<S>& x, BatchNormState<S>& state, BnMode mode) {
  if (x.shape().size() != 4)
    throw std::invalid_argument("batchnorm: expected NCHW, got " + shape_str(x.shape()));
  if (x.dim(1) != state.channels())
    throw std::invalid_argument("batchnorm: input has " + std::to_string(x.dim(1)) +
                                " channels, state serves " + std::to_string(state.channels()));
  if (mode == BnMode::kEval) {
    if (!state.calibrated) throw std::runtime_error("batchnorm: uncalibrated state");
    const int C = state.channels();
    Tensor<S> inv(Shape{C});
    Tensor<S> nm(Shape{C});
    for (int c = 0; c < C; ++c) {
      inv.data()[size_t(c)] = S(1) / std::sqrt(state.moving_var[size_t(c)] + state.epsilon);
      nm.data()[size_t(c)] = -state.moving_mean[size_t(c)];
    }
    return add_channel(mul_channel(mul_channel(add_channel(x, nm), inv), state.scale), state.shift);
  }
  // Batch statistics; gradient flows through mean and variance.
  Tensor<S> mu = channel_mean(x);
  Tensor<S> centered = add_channel(x, neg(mu));
  Tensor<S> var = channel_mean(square(centered));
  if (mode == BnMode::kRecalibrate) {
    if (state.acc_mean.size() != size_t(state.channels())) state.begin_recalibration();
    for (int c = 0; c < state.channels(); ++c) {
      state.acc_mean[size_t(c)] += double(mu.data()[size_t(c)]);
      state.acc_var[size_t(c)] += double(var.data()[size_t(c)]);
    }
    state.acc_batches++;
  }
  Tensor<S> inv = rsqrt_shift(var, state.epsilon);
  Tensor<S> normalized = mul_channel(centered, inv);
  return add_channel(mul_channel(normalized, state.scale), state.shift);
}

}  // namespace gp
