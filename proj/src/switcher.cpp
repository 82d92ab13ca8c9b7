#include "hybrid/switcher.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace hybrid {

std::size_t MlpArchitecture::layer_input(std::size_t layer) const {
  return layer == 0 ? input_dim : hidden_dims[layer - 1];
}

std::size_t MlpArchitecture::layer_output(std::size_t layer) const {
  return layer < hidden_dims.size() ? hidden_dims[layer] : kOutputDim;
}

std::size_t MlpArchitecture::parameter_count() const {
  std::size_t count = 0;
  for (std::size_t l = 0; l < layer_count(); ++l) {
    count += layer_input(l) * layer_output(l) + layer_output(l);
  }
  return count;
}

void MlpArchitecture::validate() const {
  if (input_dim == 0) throw Error(ErrorCode::kInvalidArgument, "input_dim must be positive");
  for (auto h : hidden_dims) {
    if (h == 0) throw Error(ErrorCode::kInvalidArgument, "hidden layer sizes must be positive");
  }
}

void SwitcherModel::validate() const {
  architecture.validate();
  if (layers.size() != architecture.layer_count()) {
    throw Error(ErrorCode::kSchema, "model layer count does not match architecture");
  }
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    if (layer.inputs != architecture.layer_input(l) || layer.outputs != architecture.layer_output(l) ||
        layer.weights.size() != layer.inputs * layer.outputs ||
        layer.biases.size() != layer.outputs) {
      throw Error(ErrorCode::kSchema, "layer " + std::to_string(l) + " shape mismatch");
    }
    auto finite = [](double v) { return std::isfinite(v); };
    if (!std::all_of(layer.weights.begin(), layer.weights.end(), finite) ||
        !std::all_of(layer.biases.begin(), layer.biases.end(), finite)) {
      throw Error(ErrorCode::kSchema, "layer " + std::to_string(l) + " has non-finite parameters");
    }
  }
}

SwitcherModel zero_model(const MlpArchitecture& arch) {
  arch.validate();
  SwitcherModel model;
  model.architecture = arch;
  for (std::size_t l = 0; l < arch.layer_count(); ++l) {
    DenseLayer layer;
    layer.inputs = arch.layer_input(l);
    layer.outputs = arch.layer_output(l);
    layer.weights.assign(layer.inputs * layer.outputs, 0.0);
    layer.biases.assign(layer.outputs, 0.0);
    model.layers.push_back(std::move(layer));
  }
  return model;
}

SwitcherModel init_model(const MlpArchitecture& arch, RngSeed seed) {
  SwitcherModel model = zero_model(arch);
  model.seed = seed.value;
  Rng rng(seed);
  for (auto& layer : model.layers) {
    const double bound = std::sqrt(6.0 / static_cast<double>(layer.inputs));
    for (auto& w : layer.weights) w = rng.uniform(-bound, bound);
  }
  return model;
}

DropoutMasks sample_dropout_masks(const MlpArchitecture& arch, double rate, Rng& rng) {
  DropoutMasks masks(arch.hidden_dims.size());
  const double keep_scale = 1.0 / (1.0 - rate);
  for (std::size_t l = 0; l < masks.size(); ++l) {
    masks[l].resize(arch.hidden_dims[l]);
    for (auto& m : masks[l]) m = rng.uniform() < rate ? 0.0 : keep_scale;
  }
  return masks;
}

namespace {

void check_features(const SwitcherModel& model, std::span<const double> features) {
  if (features.size() != model.architecture.input_dim) {
    throw Error(ErrorCode::kDimensionMismatch,
                "switcher expects " + std::to_string(model.architecture.input_dim) +
                    " features, got " + std::to_string(features.size()));
  }
}

// out = W * in + b
void affine(const DenseLayer& layer, std::span<const double> in, std::vector<double>& out) {
  out.resize(layer.outputs);
  for (std::size_t r = 0; r < layer.outputs; ++r) {
    const double* row = layer.weights.data() + r * layer.inputs;
    double acc = 0.0;
    for (std::size_t c = 0; c < layer.inputs; ++c) acc += row[c] * in[c];
    out[r] = acc + layer.biases[r];
  }
}

// Runs the network and keeps every layer's (post-activation, post-mask)
// output; acts[0] is the input.
double forward_cached(const SwitcherModel& model, std::span<const double> features,
                      const DropoutMasks* masks, std::vector<std::vector<double>>& acts) {
  const std::size_t n_layers = model.layers.size();
  acts.resize(n_layers);
  acts[0].assign(features.begin(), features.end());
  std::vector<double> out;
  for (std::size_t l = 0; l + 1 < n_layers; ++l) {
    affine(model.layers[l], acts[l], out);
    for (auto& v : out) v = v > 0.0 ? v : 0.0;
    if (masks) {
      const auto& mask = (*masks)[l];
      for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
    }
    acts[l + 1] = out;
  }
  affine(model.layers.back(), acts.back(), out);
  return out[0];
}

}  // namespace

double forward(const SwitcherModel& model, std::span<const double> features) {
  check_features(model, features);
  std::vector<std::vector<double>> acts;
  return forward_cached(model, features, nullptr, acts);
}

double forward(const SwitcherModel& model, std::span<const double> features,
               const DropoutMasks& masks) {
  check_features(model, features);
  if (masks.size() != model.architecture.hidden_dims.size()) {
    throw Error(ErrorCode::kDimensionMismatch, "dropout mask count does not match hidden layers");
  }
  std::vector<std::vector<double>> acts;
  return forward_cached(model, features, &masks, acts);
}

std::vector<std::vector<double>> hidden_activations(const SwitcherModel& model,
                                                    std::span<const double> features,
                                                    const DropoutMasks* masks) {
  check_features(model, features);
  std::vector<std::vector<double>> acts;
  forward_cached(model, features, masks, acts);
  acts.erase(acts.begin());
  return acts;
}

double sigmoid(double logit) {
  double p;
  if (logit >= 0.0) {
    p = 1.0 / (1.0 + std::exp(-logit));
  } else {
    const double e = std::exp(logit);
    p = e / (1.0 + e);
  }
  constexpr double kLo = std::numeric_limits<double>::min();
  constexpr double kHi = 1.0 - std::numeric_limits<double>::epsilon() / 2.0;
  return std::clamp(p, kLo, kHi);
}

double predict_alignment(const SwitcherModel& model, std::span<const double> features) {
  return sigmoid(forward(model, features));
}

namespace {

// log(1 + exp(-|z|)) + max(z, 0) - z*y
inline double bce_term(double z, double y) {
  return std::log1p(std::exp(-std::abs(z))) + std::max(z, 0.0) - z * y;
}

// d/dz of bce_term, exact: sigmoid(z) - y without clamping.
inline double bce_grad(double z, double y) {
  const double s = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  return s - y;
}

}  // namespace

double bce_with_logits_loss(std::span<const double> logits, std::span<const int> labels) {
  if (logits.size() != labels.size()) {
    throw Error(ErrorCode::kDimensionMismatch, "logits and labels differ in length");
  }
  if (logits.empty()) throw Error(ErrorCode::kEmptyInput, "loss of an empty batch");
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) sum += bce_term(logits[i], labels[i]);
  return sum / static_cast<double>(logits.size());
}

Gradients Gradients::zeros_like(const SwitcherModel& model) {
  Gradients g;
  for (const auto& layer : model.layers) {
    g.weights.emplace_back(layer.weights.size(), 0.0);
    g.biases.emplace_back(layer.biases.size(), 0.0);
  }
  return g;
}

double Gradients::l2_norm() const {
  double sq = 0.0;
  for (const auto& w : weights) for (double v : w) sq += v * v;
  for (const auto& b : biases) for (double v : b) sq += v * v;
  return std::sqrt(sq);
}

BackwardResult backward(const SwitcherModel& model, const Batch& batch) {
  if (batch.size() == 0) throw Error(ErrorCode::kEmptyInput, "backward on an empty batch");
  if (batch.labels.size() != batch.size()) {
    throw Error(ErrorCode::kDimensionMismatch, "batch features and labels differ in length");
  }
  if (!batch.masks.empty() && batch.masks.size() != batch.size()) {
    throw Error(ErrorCode::kDimensionMismatch, "batch masks and features differ in length");
  }

  BackwardResult result;
  result.gradients = Gradients::zeros_like(model);
  auto& grads = result.gradients;
  const std::size_t n_layers = model.layers.size();
  const double inv_n = 1.0 / static_cast<double>(batch.size());

  std::vector<std::vector<double>> acts;
  std::vector<double> delta, prev_delta;
  double loss_sum = 0.0;

  for (std::size_t i = 0; i < batch.size(); ++i) {
    check_features(model, batch.features[i]);
    const DropoutMasks* masks = batch.masks.empty() ? nullptr : &batch.masks[i];
    const double z = forward_cached(model, batch.features[i], masks, acts);
    const double y = batch.labels[i];
    loss_sum += bce_term(z, y);

    delta.assign(1, bce_grad(z, y) * inv_n);
    for (std::size_t l = n_layers; l-- > 0;) {
      const auto& layer = model.layers[l];
      const auto& input = acts[l];
      auto& gw = grads.weights[l];
      auto& gb = grads.biases[l];
      for (std::size_t r = 0; r < layer.outputs; ++r) {
        const double d = delta[r];
        if (d == 0.0) continue;
        gb[r] += d;
        double* grow = gw.data() + r * layer.inputs;
        for (std::size_t c = 0; c < layer.inputs; ++c) grow[c] += d * input[c];
      }
      if (l == 0) break;
      // Propagate through W, then through mask and ReLU of layer l-1. The
      // stored activation is relu(a)*mask, so it is positive exactly where
      // both the rectifier and the mask pass the signal.
      prev_delta.assign(layer.inputs, 0.0);
      for (std::size_t r = 0; r < layer.outputs; ++r) {
        const double d = delta[r];
        if (d == 0.0) continue;
        const double* row = layer.weights.data() + r * layer.inputs;
        for (std::size_t c = 0; c < layer.inputs; ++c) prev_delta[c] += d * row[c];
      }
      const double* mask = masks ? (*masks)[l - 1].data() : nullptr;
      for (std::size_t c = 0; c < layer.inputs; ++c) {
        if (input[c] > 0.0) {
          if (mask) prev_delta[c] *= mask[c];
        } else {
          prev_delta[c] = 0.0;
        }
      }
      delta.swap(prev_delta);
    }
  }
  result.loss = loss_sum * inv_n;
  return result;
}

// ---------------------------------------------------------------------------

void SgdOptimizer::step(SwitcherModel& model, const Gradients& grads) {
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    auto& layer = model.layers[l];
    for (std::size_t i = 0; i < layer.weights.size(); ++i) layer.weights[i] -= lr_ * grads.weights[l][i];
    for (std::size_t i = 0; i < layer.biases.size(); ++i) layer.biases[i] -= lr_ * grads.biases[l][i];
  }
}

AdamOptimizer::AdamOptimizer(const SwitcherModel& model, double learning_rate, double beta1,
                             double beta2, double epsilon)
    : lr_(learning_rate),
      beta1_(beta1),
      beta2_(beta2),
      eps_(epsilon),
      m_(Gradients::zeros_like(model)),
      v_(Gradients::zeros_like(model)) {}

void AdamOptimizer::step(SwitcherModel& model, const Gradients& grads) {
  ++step_count_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
  auto update = [&](std::vector<double>& params, const std::vector<double>& g,
                    std::vector<double>& m, std::vector<double>& v) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      params[i] -= lr_ * m_hat / (std::sqrt(v_hat) + eps_);
    }
  };
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    update(model.layers[l].weights, grads.weights[l], m_.weights[l], v_.weights[l]);
    update(model.layers[l].biases, grads.biases[l], m_.biases[l], v_.biases[l]);
  }
}

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw Error(ErrorCode::kInvalidArgument, "learning_rate must be positive");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "dropout_rate must lie in [0,1)");
  }
  if (max_epochs == 0) throw Error(ErrorCode::kInvalidArgument, "max_epochs must be positive");
  if (batch_size == 0) throw Error(ErrorCode::kInvalidArgument, "batch_size must be positive");
  if (early_stop_patience == 0) {
    throw Error(ErrorCode::kInvalidArgument, "early_stop_patience must be positive");
  }
}

ClassificationMetrics evaluate_switcher(const SwitcherModel& model,
                                        const std::vector<DmdRecord>& data) {
  ClassificationMetrics metrics;
  if (data.empty()) return metrics;
  std::vector<double> logits;
  std::vector<int> labels;
  logits.reserve(data.size());
  labels.reserve(data.size());
  for (const auto& r : data) {
    const double z = forward(model, r.last_hidden_layer);
    logits.push_back(z);
    labels.push_back(r.label);
    metrics.counts.add(prediction_from_probability(sigmoid(z)), r.label);
  }
  metrics.loss = bce_with_logits_loss(logits, labels);
  metrics.f1 = f1_score(metrics.counts);
  metrics.accuracy = accuracy(metrics.counts);
  return metrics;
}

namespace {

void check_dataset(const std::vector<DmdRecord>& data, std::size_t dim, const char* name) {
  if (data.empty()) throw Error(ErrorCode::kEmptyInput, std::string(name) + " dataset is empty");
  for (const auto& r : data) {
    if (r.last_hidden_layer.size() != dim) {
      throw Error(ErrorCode::kDimensionMismatch,
                  std::string(name) + " record " + r.image_path + " has " +
                      std::to_string(r.last_hidden_layer.size()) + " features, switcher expects " +
                      std::to_string(dim));
    }
    // ReLU would quietly turn a NaN input into 0, so catch it here.
    for (double v : r.last_hidden_layer) {
      if (!std::isfinite(v)) {
        throw Error(ErrorCode::kInvalidArgument,
                    std::string(name) + " record " + r.image_path + " has a non-finite feature");
      }
    }
  }
}

}  // namespace

TrainResult train(const std::vector<DmdRecord>& train_data, const std::vector<DmdRecord>& val_data,
                  const MlpArchitecture& arch, const TrainConfig& config) {
  arch.validate();
  config.validate();
  check_dataset(train_data, arch.input_dim, "training");
  check_dataset(val_data, arch.input_dim, "validation");

  const std::uint64_t seed = config.seed.value;
  SwitcherModel model = init_model(arch, RngSeed{derive_seed(seed, "init")});
  model.seed = seed;
  Rng shuffle_rng(derive_seed(seed, "shuffle"));
  Rng dropout_rng(derive_seed(seed, "dropout"));

  std::unique_ptr<Optimizer> optimizer;
  if (config.optimizer == OptimizerKind::kSgd) {
    optimizer = std::make_unique<SgdOptimizer>(config.learning_rate);
  } else {
    optimizer = std::make_unique<AdamOptimizer>(model, config.learning_rate);
  }

  TrainResult result{model, {}};
  std::vector<std::size_t> order(train_data.size());
  std::iota(order.begin(), order.end(), 0);

  double best_f1 = -1.0;
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  constexpr double kTol = 1e-12;

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t start = 0, batch_no = 0; start < order.size();
         start += config.batch_size, ++batch_no) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      Batch batch;
      for (std::size_t k = start; k < end; ++k) {
        const auto& r = train_data[order[k]];
        batch.features.emplace_back(r.last_hidden_layer);
        batch.labels.push_back(r.label);
        if (config.dropout_rate > 0.0) {
          batch.masks.push_back(sample_dropout_masks(arch, config.dropout_rate, dropout_rng));
        }
      }
      auto step = backward(model, batch);
      if (!std::isfinite(step.loss)) {
        throw Error(ErrorCode::kNonFiniteLoss, "non-finite training loss at epoch " +
                                                   std::to_string(epoch) + ", batch " +
                                                   std::to_string(batch_no));
      }
      loss_sum += step.loss * static_cast<double>(batch.size());
      optimizer->step(model, step.gradients);
    }

    const auto val = evaluate_switcher(model, val_data);
    EpochMetrics metrics;
    metrics.epoch = epoch;
    metrics.train_loss = loss_sum / static_cast<double>(order.size());
    metrics.val_loss = val.loss;
    metrics.val_f1 = val.f1;
    metrics.val_accuracy = val.accuracy;
    result.report.epochs.push_back(metrics);
    result.report.epochs_run = epoch;

    // Validation F1 is the monitored quantity; at equal F1 a lower
    // validation loss also counts as progress.
    const bool improved = val.f1 > best_f1 + kTol ||
                          (std::abs(val.f1 - best_f1) <= kTol && val.loss < best_loss - kTol);
    if (improved) {
      best_f1 = std::max(best_f1, val.f1);
      best_loss = val.loss;
      result.model = model;
      result.report.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= config.early_stop_patience) {
      result.report.stopped_early = epoch < config.max_epochs;
      break;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

constexpr char kMagic[4] = {'H', 'S', 'W', 'M'};
constexpr std::uint32_t kFormatVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  std::uint64_t take(int width) {
    if (pos_ + width > bytes_.size()) throw Error(ErrorCode::kSchema, "model file is truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += width;
    return v;
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(take(4)); }
  std::uint64_t u64() { return take(8); }
  double f64() { return std::bit_cast<double>(take(8)); }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_model(const SwitcherModel& model) {
  model.validate();
  std::string out(kMagic, 4);
  put_u32(out, kFormatVersion);
  put_u32(out, static_cast<std::uint32_t>(model.activation));
  put_u64(out, model.seed);
  put_u32(out, static_cast<std::uint32_t>(model.architecture.input_dim));
  put_u32(out, static_cast<std::uint32_t>(model.architecture.hidden_dims.size()));
  for (auto h : model.architecture.hidden_dims) put_u32(out, static_cast<std::uint32_t>(h));
  put_u32(out, static_cast<std::uint32_t>(MlpArchitecture::kOutputDim));
  for (const auto& layer : model.layers) {
    for (double w : layer.weights) put_f64(out, w);
    for (double b : layer.biases) put_f64(out, b);
  }
  return out;
}

SwitcherModel deserialize_model(const std::string& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw Error(ErrorCode::kSchema, "not a switcher model file (bad magic)");
  }
  Reader in(bytes);
  in.take(4);
  const auto version = in.u32();
  if (version != kFormatVersion) {
    throw Error(ErrorCode::kSchema, "unsupported model format version " + std::to_string(version));
  }
  const auto activation = in.u32();
  if (activation != static_cast<std::uint32_t>(Activation::kRelu)) {
    throw Error(ErrorCode::kSchema, "unknown activation code " + std::to_string(activation));
  }
  SwitcherModel model;
  model.activation = Activation::kRelu;
  model.seed = in.u64();
  model.architecture.input_dim = in.u32();
  const auto hidden_count = in.u32();
  if (hidden_count > 64) throw Error(ErrorCode::kSchema, "implausible hidden layer count");
  model.architecture.hidden_dims.clear();
  for (std::uint32_t i = 0; i < hidden_count; ++i) model.architecture.hidden_dims.push_back(in.u32());
  if (in.u32() != MlpArchitecture::kOutputDim) throw Error(ErrorCode::kSchema, "output_dim must be 1");
  model.architecture.validate();
  const auto& arch = model.architecture;
  const std::size_t expected = 4 + 4 + 4 + 8 + 4 + 4 + 4 * hidden_count + 4 + 8 * arch.parameter_count();
  if (bytes.size() != expected) {
    throw Error(ErrorCode::kSchema, "model file size " + std::to_string(bytes.size()) +
                                        " does not match its header (expected " +
                                        std::to_string(expected) + ")");
  }
  for (std::size_t l = 0; l < arch.layer_count(); ++l) {
    DenseLayer layer;
    layer.inputs = arch.layer_input(l);
    layer.outputs = arch.layer_output(l);
    layer.weights.resize(layer.inputs * layer.outputs);
    layer.biases.resize(layer.outputs);
    for (auto& w : layer.weights) w = in.f64();
    for (auto& b : layer.biases) b = in.f64();
    model.layers.push_back(std::move(layer));
  }
  model.validate();
  return model;
}

void save_model(const SwitcherModel& model, const std::filesystem::path& path) {
  const std::string bytes = serialize_model(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write model file " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIo, "failed writing model file " + path.string());
}

SwitcherModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open model file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return deserialize_model(buffer.str());
}

}  // namespace hybrid
