#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hybrid/core.hpp"
#include "hybrid/dmd.hpp"

namespace hybrid {

// Fully connected binary classifier: input -> hidden (ReLU)... -> 1 logit.
struct MlpArchitecture {
  std::size_t input_dim = 1536;
  std::vector<std::size_t> hidden_dims{512, 128};
  static constexpr std::size_t kOutputDim = 1;

  std::size_t layer_count() const { return hidden_dims.size() + 1; }
  std::size_t layer_input(std::size_t layer) const;
  std::size_t layer_output(std::size_t layer) const;
  std::size_t parameter_count() const;
  void validate() const;

  bool operator==(const MlpArchitecture&) const = default;
};

enum class Activation : std::uint32_t { kRelu = 0 };

// Weights are row-major (rows = outputs, cols = inputs).
struct DenseLayer {
  std::size_t inputs = 0;
  std::size_t outputs = 0;
  std::vector<double> weights;
  std::vector<double> biases;

  double& w(std::size_t row, std::size_t col) { return weights[row * inputs + col]; }
  double w(std::size_t row, std::size_t col) const { return weights[row * inputs + col]; }

  bool operator==(const DenseLayer&) const = default;
};

struct SwitcherModel {
  MlpArchitecture architecture;
  std::vector<DenseLayer> layers;
  Activation activation = Activation::kRelu;
  std::uint64_t seed = 0;

  // Shapes match the architecture and every parameter is finite.
  void validate() const;

  bool operator==(const SwitcherModel&) const = default;
};

// Weights ~ U(-sqrt(6/fan_in), +sqrt(6/fan_in)); biases zero.
SwitcherModel init_model(const MlpArchitecture& arch, RngSeed seed);

// A model whose every parameter is zero. Its alignment probability is 0.5.
SwitcherModel zero_model(const MlpArchitecture& arch);

// Per-hidden-layer multipliers for inverted dropout: each entry is 0 (dropped)
// or 1/(1-rate) (kept).
using DropoutMasks = std::vector<std::vector<double>>;

DropoutMasks sample_dropout_masks(const MlpArchitecture& arch, double rate, Rng& rng);

// Eval-mode forward pass (no dropout). Returns the output logit.
double forward(const SwitcherModel& model, std::span<const double> features);
// Train-mode forward pass with the given dropout masks.
double forward(const SwitcherModel& model, std::span<const double> features,
               const DropoutMasks& masks);

// Activations after each hidden layer (post-ReLU, post-mask when given).
std::vector<std::vector<double>> hidden_activations(const SwitcherModel& model,
                                                    std::span<const double> features,
                                                    const DropoutMasks* masks = nullptr);

// Numerically stable logistic function, clamped into the open interval (0, 1).
double sigmoid(double logit);

double predict_alignment(const SwitcherModel& model, std::span<const double> features);

// Mean of log(1+exp(-|z|)) + max(z,0) - z*y.
double bce_with_logits_loss(std::span<const double> logits, std::span<const int> labels);

struct Gradients {
  std::vector<std::vector<double>> weights;
  std::vector<std::vector<double>> biases;

  static Gradients zeros_like(const SwitcherModel& model);
  double l2_norm() const;
};

struct Batch {
  std::vector<std::span<const double>> features;
  std::vector<int> labels;
  // Empty: dropout off. Otherwise one mask set per item.
  std::vector<DropoutMasks> masks;

  std::size_t size() const { return features.size(); }
};

struct BackwardResult {
  double loss = 0.0;
  Gradients gradients;
};

// Exact gradients of the mean BCE-with-logits loss over `batch`.
BackwardResult backward(const SwitcherModel& model, const Batch& batch);

// ---------------------------------------------------------------------------
// Optimizers

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(SwitcherModel& model, const Gradients& grads) = 0;
};

class SgdOptimizer final : public Optimizer {
 public:
  explicit SgdOptimizer(double learning_rate) : lr_(learning_rate) {}
  void step(SwitcherModel& model, const Gradients& grads) override;

 private:
  double lr_;
};

// Adaptive moment estimation with bias correction.
class AdamOptimizer final : public Optimizer {
 public:
  AdamOptimizer(const SwitcherModel& model, double learning_rate, double beta1 = 0.9,
                double beta2 = 0.999, double epsilon = 1e-8);
  void step(SwitcherModel& model, const Gradients& grads) override;

 private:
  double lr_, beta1_, beta2_, eps_;
  long step_count_ = 0;
  Gradients m_, v_;
};

// ---------------------------------------------------------------------------
// Training

enum class OptimizerKind { kSgd, kAdam };

struct TrainConfig {
  double learning_rate = 1e-4;
  double dropout_rate = 0.3;
  std::size_t max_epochs = 100;
  std::size_t batch_size = 32;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  std::size_t early_stop_patience = 10;
  RngSeed seed;

  void validate() const;
};

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_f1 = 0.0;
  double val_accuracy = 0.0;
};

struct TrainReport {
  std::size_t epochs_run = 0;
  std::vector<EpochMetrics> epochs;
  std::size_t best_epoch = 0;
  bool stopped_early = false;
};

struct TrainResult {
  SwitcherModel model;  // parameters from the best validation epoch
  TrainReport report;
};

struct ClassificationMetrics {
  double loss = 0.0;
  double f1 = 0.0;
  double accuracy = 0.0;
  ConfusionCounts counts;
};

// Eval-mode metrics at probability threshold 0.5.
ClassificationMetrics evaluate_switcher(const SwitcherModel& model,
                                        const std::vector<DmdRecord>& data);

TrainResult train(const std::vector<DmdRecord>& train_data, const std::vector<DmdRecord>& val_data,
                  const MlpArchitecture& arch, const TrainConfig& config);

// ---------------------------------------------------------------------------
// Model file, version 1. All integers and doubles little-endian.
//
//   char[4]  magic "HSWM"
//   u32      format version (1)
//   u32      activation (0 = ReLU)
//   u64      training seed
//   u32      input_dim
//   u32      hidden layer count H
//   u32[H]   hidden_dims
//   u32      output_dim (always 1)
//   per layer, input side first:
//     f64[out*in]  weights, row-major
//     f64[out]     biases

void save_model(const SwitcherModel& model, const std::filesystem::path& path);
SwitcherModel load_model(const std::filesystem::path& path);

std::string serialize_model(const SwitcherModel& model);
SwitcherModel deserialize_model(const std::string& bytes);

}  // namespace hybrid
