#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "repud/data.hpp"

namespace repud {

using ParamVector = std::vector<double>;

enum class Arch { LogReg, Mlp, SmallCnn };

struct ModelSpec {
  Arch arch = Arch::LogReg;
  int classes = 2;
  int logreg_dim = 0;
  std::vector<int> mlp_widths;        // input width first, class count last
  ImageShape cnn_input{};             // SmallCnn only
  std::vector<int> cnn_channels;      // conv output channels per stage

  static ModelSpec logreg(int dim, int classes);
  static ModelSpec mlp(std::vector<int> widths);
  static ModelSpec small_cnn(ImageShape input, std::vector<int> channels,
                             int classes);

  std::size_t param_count() const;
  std::size_t input_dim() const;
  int class_count() const { return classes; }
  void validate() const;
  std::string describe() const;
};

enum class LrSchedule { Constant, CosineAnneal };

struct Hyperparams {
  double step_size = 0.1;
  int batch_size = 1;
  long long total_steps = 1;
  double momentum = 0.0;
  double weight_decay = 0.0;
  LrSchedule schedule = LrSchedule::Constant;
  double lr_min = 0.0;

  bool is_plain_sgd() const {
    return momentum == 0.0 && weight_decay == 0.0 && schedule == LrSchedule::Constant;
  }
  void validate() const;
};

struct OptimizerState {
  std::vector<double> velocity;
  long long step_index = 0;

  static OptimizerState init(std::size_t param_count) {
    return {std::vector<double>(param_count, 0.0), 0};
  }
};

ParamVector init_params(const ModelSpec& spec, std::uint64_t seed);

// rows x input_dim features in, rows x classes probabilities out
void forward(const ParamVector& params, const ModelSpec& spec, const double* inputs,
             std::size_t rows, double* probs_out);
std::vector<double> forward(const ParamVector& params, const ModelSpec& spec,
                            const std::vector<double>& inputs, std::size_t rows);

struct LossGrad {
  double loss = 0.0;
  ParamVector grad;
};

// Mean cross entropy over the batch plus weight_decay * ||theta||^2; the
// gradient adds 2 * weight_decay * theta. Samples are accumulated in
// ascending-index order (MiniBatchSpec canonical order) so replays are
// bit-identical.
LossGrad loss_and_grad(const ParamVector& params, const ModelSpec& spec,
                       const MiniBatchSpec& batch, const Dataset& ds,
                       double weight_decay);

// Same reduction without the gradient; used by attack scoring and tests.
double batch_loss(const ParamVector& params, const ModelSpec& spec,
                  const MiniBatchSpec& batch, const Dataset& ds,
                  double weight_decay);
double sample_loss(const ParamVector& params, const ModelSpec& spec, const double* x,
                   int label);

ParamVector sgd_step(const ParamVector& params, const ParamVector& grad,
                     double step_size);

std::pair<ParamVector, OptimizerState> modified_sgd_step(const ParamVector& params,
                                                         const ParamVector& grad,
                                                         OptimizerState state,
                                                         const Hyperparams& hp);

double lr_at(long long t, const Hyperparams& hp);

}  // namespace repud
