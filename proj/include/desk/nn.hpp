#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "desk/data.hpp"
#include "desk/rng.hpp"
#include "desk/tensor.hpp"

namespace desk {

enum class LayerKind : uint8_t {
    Conv,
    Relu,
    MaxPool,
    Flatten,
    FullyConnected,
    Dropout,
    SigmoidOutput,
    SoftmaxOutput,
};

std::string layer_kind_name(LayerKind k);

struct LayerDesc {
    LayerKind kind = LayerKind::Relu;
    int kh = 0, kw = 0, filters = 0, pad = 0;  // conv
    int ph = 0, pw = 0;                        // maxpool
    int units = 0;                             // fully connected
    double rate = 0.0;                         // dropout

    static LayerDesc conv(int kh, int kw, int filters, int pad = 0);
    static LayerDesc relu();
    static LayerDesc maxpool(int ph, int pw);
    static LayerDesc flatten();
    static LayerDesc fully_connected(int units);
    static LayerDesc dropout(double rate);
    static LayerDesc sigmoid_output();
    static LayerDesc softmax_output();

    bool is_output() const {
        return kind == LayerKind::SigmoidOutput || kind == LayerKind::SoftmaxOutput;
    }
    bool has_params() const {
        return kind == LayerKind::Conv || kind == LayerKind::FullyConnected;
    }
};

// Declarative layer stack. input_shape is per-sample: {H, W, C} for images or
// {D} for flat features. fc_split marks where the conv part ends and the
// fully connected part begins.
struct NetworkSpec {
    std::vector<int> input_shape;
    std::vector<LayerDesc> layers;
    int fc_split = 0;

    // Throws ConfigError when the stack is inconsistent. Headless stacks
    // (no output layer) are allowed with require_output=false.
    void validate(bool require_output = true) const;

    // Per-sample input shape of every layer plus the final output shape;
    // result has layers.size() + 1 entries.
    std::vector<std::vector<int>> shape_chain() const;
    std::vector<int> output_shape() const { return shape_chain().back(); }
    int output_dim() const;

    nlohmann::json to_json() const;
    static NetworkSpec from_json(const nlohmann::json& j);
};

struct LayerParams {
    Tensor w, b;
};

struct NetworkParams {
    std::map<int, LayerParams> layers;  // keyed by layer index in the spec

    static NetworkParams init(const NetworkSpec& spec, Rng& rng);
    static NetworkParams zeros_like(const NetworkSpec& spec);

    bool same_shapes(const NetworkParams& other) const;
    // FNV-1a over the raw bytes of every tensor in key order.
    uint64_t checksum() const;
};

enum class Mode : uint8_t { Train, Eval };

struct ForwardCache {
    const NetworkSpec* spec = nullptr;
    Mode mode = Mode::Eval;
    int batch = 0;
    std::vector<Tensor> inputs;                       // input to each layer
    std::vector<Tensor> dropout_masks;                // per layer (empty unless dropout)
    std::vector<std::vector<Eigen::Index>> argmax;    // per layer (maxpool only)
    std::vector<std::vector<RowMatrix>> conv_cols;    // per layer, per sample
    Tensor preactivation;                             // input to the output layer
};

// Batched forward pass. input is {N, H, W, C} or {N, D}. Dropout is inverted
// (scaled at train time) and only active in Train mode; Eval never touches
// the rng. Pass a cache to enable a later backward pass.
Tensor forward(const NetworkSpec& spec, const NetworkParams& params, const Tensor& input,
               Mode mode, Rng& rng, ForwardCache* cache = nullptr);

// Gradients of every parameter tensor given dLoss/dOutput. input_grad, when
// requested, receives dLoss/dInput (used by fused twin-stack training).
NetworkParams backward(const NetworkSpec& spec, const NetworkParams& params,
                       const ForwardCache& cache, const Tensor& output_grad,
                       Tensor* input_grad = nullptr);

// Same, but the gradient is given w.r.t. the output layer's pre-activation
// (loss functions below produce exactly that).
NetworkParams backward_from_preactivation(const NetworkSpec& spec, const NetworkParams& params,
                                          const ForwardCache& cache, const Tensor& preact_grad,
                                          Tensor* input_grad = nullptr);

// --- losses -----------------------------------------------------------

struct LossGrad {
    double loss = 0;
    double grad = 0;
};

// Hinge loss on the pre-sigmoid activation with {0,1} targets recoded to
// +/-1; the subgradient at the hinge point is 0.
LossGrad hinge_loss(double activation, int target);

struct BatchLoss {
    double loss = 0;     // mean over the batch
    Tensor grad;         // dLoss/dPreactivation, same shape as preactivation
};

BatchLoss hinge_on_preactivation(const Tensor& preact, const std::vector<int>& targets01);
BatchLoss bce_on_preactivation(const Tensor& preact, const std::vector<int>& targets01);
// One-vs-rest hinge over logits (margin 1 per class).
BatchLoss multiclass_hinge_on_logits(const Tensor& logits, const std::vector<int>& labels);
BatchLoss cross_entropy_on_logits(const Tensor& logits, const std::vector<int>& labels);

// --- optimization -----------------------------------------------------

enum class LossKind : uint8_t { Hinge, CrossEntropy };

struct TrainConfig {
    double learning_rate = 0.05;
    double momentum = 0.9;
    int batch_size = 32;
    int max_epochs = 40;
    int patience = 3;
    double improvement_threshold = 0.001;  // fraction of accuracy
    uint64_t seed = 1;
    LossKind loss = LossKind::CrossEntropy;
    std::optional<double> dropout_conv;  // override all conv-part dropout rates
    std::optional<double> dropout_fc;    // override all fc-part dropout rates

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

NetworkSpec apply_dropout_overrides(const NetworkSpec& spec, const TrainConfig& config);

struct SgdState {
    std::map<int, LayerParams> velocity;
};

// Momentum SGD: v <- momentum*v + g; p <- p - lr*v.
void sgd_step(NetworkParams& params, const NetworkParams& grads, SgdState& state,
              double learning_rate, double momentum);

// --- training ---------------------------------------------------------

struct EpochStats {
    int epoch = 0;
    double train_loss = 0;
    double val_accuracy = 0;
};

struct TrainHistory {
    std::vector<EpochStats> epochs;
    int best_epoch = 0;
    double best_val_accuracy = 0;
};

// Trains a classification net on the Train split, early-stops on Validation
// accuracy, and leaves params at the best-validation epoch.
TrainHistory train_classifier(const NetworkSpec& spec, NetworkParams& params,
                              const LabeledImageSet& data, const TrainConfig& config);

// Argmax (softmax head) or 0.5-threshold (sigmoid head) accuracy on a split.
double classification_accuracy(const NetworkSpec& spec, const NetworkParams& params,
                               const LabeledImageSet& data, const std::vector<int>& indices);

}  // namespace desk
