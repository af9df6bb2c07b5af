#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "splitens/rng.hpp"
#include "splitens/tensor.hpp"

namespace splitens {

using json = nlohmann::ordered_json;

// Trainable tensor with its gradient and SGD momentum buffer. Surgery
// (split/prune) always carries the momentum along with the values.
struct Param {
    Tensor value;
    Tensor grad;
    Tensor velocity;

    void init(int n, int c, int h, int w) {
        value = Tensor(n, c, h, w);
        grad = Tensor(n, c, h, w);
        velocity = Tensor(n, c, h, w);
    }
    void zero_grad() { grad.zero(); }
};

enum class ForwardMode {
    infer,  // batch-independent: norm layers use running statistics
    train,  // batch statistics, running statistics updated
    probe,  // batch statistics, running statistics left untouched
};

// One output-channel structure group a pruner may remove. `part` indexes a
// layer-local family (plain conv/linear have one; residual blocks expose
// internal filters and the output group separately).
struct PrunePart {
    int part = 0;
    int count = 0;           // structures currently in this part
    bool changes_output = false;  // removal alters the layer's out channels
    bool prunable = false;
};

class Layer {
 public:
    virtual ~Layer() = default;

    virtual std::string kind() const = 0;
    virtual Shape out_shape(const Shape& in) const = 0;
    virtual Tensor forward(const Tensor& x, ForwardMode mode) = 0;
    // Uses tensors cached by the last forward; may be invoked several times
    // per forward (per-submodel gradient passes). Parameter grads accumulate.
    virtual Tensor backward(const Tensor& dy) = 0;
    virtual std::unique_ptr<Layer> clone() const = 0;

    virtual uint64_t flops(const Shape& in) const { (void)in; return 0; }
    virtual void collect_params(std::vector<Param*>& out) { (void)out; }
    // Non-trainable state that must survive checkpoint/clone (e.g. running
    // statistics).
    virtual void collect_state(std::vector<Tensor*>& out) { (void)out; }
    int64_t param_count();

    virtual bool has_weights() const { return false; }

    // ---- structural pruning hooks ----
    virtual std::vector<PrunePart> prune_parts() const { return {}; }
    // Remove the listed structures of `part`. Downstream consumers are the
    // tree's responsibility, not the layer's.
    virtual void prune_part(int part, const std::vector<int>& remove);
    // Adapt to the removal of input channels. `block` is the number of
    // flattened features per channel at this layer's input (1 for conv).
    virtual void prune_in(const std::vector<int>& remove, int block);
    virtual bool in_prunable() const { return true; }
    // Channel-transparent layers (norm/act/pool) adjust per-channel state.
    virtual bool channel_transparent() const { return false; }
    virtual void prune_channels(const std::vector<int>& remove) { (void)remove; }

    // Weight elements (value, grad) of one prunable structure, used by the
    // importance score.
    virtual void for_each_structure_param(
        int part, int index, const std::function<void(double w, double g)>& fn) const;

    // Zero every parameter of a structure (masked ablation; the reference
    // behavior pruning must reproduce).
    virtual void zero_structure(int part, int index);

    // Flat sensitivity view of the layer's weight matrix (no biases), in a
    // fixed element order; empty for weight-free layers.
    virtual void weight_elements(std::vector<const Param*>& out) const { (void)out; }

    virtual json describe() const = 0;
};

// Layer construction is declarative so tiny desk-scale CNNs and deeper
// residual backbones share one code path.
struct LayerCfg {
    std::string kind;  // conv | linear | batch_norm | relu | tanh | max_pool |
                       // avg_pool | global_avg_pool | residual_block
    int out = 0;       // conv/linear/residual_block output width
    int k = 3;         // conv/pool kernel
    int stride = 1;
    int pad = 1;       // conv only; pools are unpadded
    bool bias = true;
    bool bn = false;    // residual_block: insert batch norms
    bool proj = false;  // residual_block: force a projection skip
};

using BackboneSpec = std::vector<LayerCfg>;

json layer_cfg_to_json(const LayerCfg& cfg);
LayerCfg layer_cfg_from_json(const json& j);

// Builds a freshly initialized layer. `in` is the incoming feature shape.
std::unique_ptr<Layer> make_layer(const LayerCfg& cfg, const Shape& in, Rng& rng);
// Rebuilds a layer (correct dims, zero weights) from a describe() document.
std::unique_ptr<Layer> layer_from_json(const json& j);

// ---------------------------------------------------------------------------
// Concrete layers
// ---------------------------------------------------------------------------

class Conv : public Layer {
 public:
    Conv(int in_ch, int out_ch, int k, int stride, int pad, bool bias, Rng* rng);

    std::string kind() const override { return "conv"; }
    Shape out_shape(const Shape& in) const override;
    Tensor forward(const Tensor& x, ForwardMode mode) override;
    Tensor backward(const Tensor& dy) override;
    std::unique_ptr<Layer> clone() const override;
    uint64_t flops(const Shape& in) const override;
    void collect_params(std::vector<Param*>& out) override;
    bool has_weights() const override { return true; }

    std::vector<PrunePart> prune_parts() const override;
    void prune_part(int part, const std::vector<int>& remove) override;
    void prune_in(const std::vector<int>& remove, int block) override;
    void for_each_structure_param(
        int part, int index, const std::function<void(double w, double g)>& fn) const override;
    void zero_structure(int part, int index) override;
    void weight_elements(std::vector<const Param*>& out) const override;

    json describe() const override;

    int in_channels() const { return in_ch_; }
    int out_channels() const { return out_ch_; }

    Param weight;  // [out, in, k, k]
    Param bias;    // [out] (empty when bias disabled)

 private:
    int in_ch_, out_ch_, k_, stride_, pad_;
    bool has_bias_;
    Tensor cached_x_;
};

class Linear : public Layer {
 public:
    Linear(int in_features, int out_features, bool bias, Rng* rng);

    std::string kind() const override { return "linear"; }
    Shape out_shape(const Shape& in) const override;
    Tensor forward(const Tensor& x, ForwardMode mode) override;
    Tensor backward(const Tensor& dy) override;
    std::unique_ptr<Layer> clone() const override;
    uint64_t flops(const Shape& in) const override;
    void collect_params(std::vector<Param*>& out) override;
    bool has_weights() const override { return true; }

    std::vector<PrunePart> prune_parts() const override;
    void prune_part(int part, const std::vector<int>& remove) override;
    void prune_in(const std::vector<int>& remove, int block) override;
    void for_each_structure_param(
        int part, int index, const std::function<void(double w, double g)>& fn) const override;
    void zero_structure(int part, int index) override;
    void weight_elements(std::vector<const Param*>& out) const override;

    json describe() const override;

    int in_features() const { return in_f_; }
    int out_features() const { return out_f_; }

    Param weight;  // [out, in]
    Param bias;    // [out]

 private:
    int in_f_, out_f_;
    bool has_bias_;
    Tensor cached_x_;
};

class BatchNorm : public Layer {
 public:
    explicit BatchNorm(int channels);

    std::string kind() const override { return "batch_norm"; }
    Shape out_shape(const Shape& in) const override { return in; }
    Tensor forward(const Tensor& x, ForwardMode mode) override;
    Tensor backward(const Tensor& dy) override;
    std::unique_ptr<Layer> clone() const override;
    void collect_params(std::vector<Param*>& out) override;
    void collect_state(std::vector<Tensor*>& out) override;
    bool has_weights() const override { return true; }

    bool channel_transparent() const override { return true; }
    void prune_channels(const std::vector<int>& remove) override;
    void weight_elements(std::vector<const Param*>& out) const override;

    json describe() const override;

    int channels() const { return channels_; }

    Param gamma, beta;
    Tensor running_mean, running_var;

 private:
    int channels_;
    double momentum_ = 0.1;
    double eps_ = 1e-5;
    // backward caches
    Tensor cached_xhat_;
    std::vector<double> cached_inv_std_;
    bool cached_batch_stats_ = false;
};

class Relu : public Layer {
 public:
    std::string kind() const override { return "relu"; }
    Shape out_shape(const Shape& in) const override { return in; }
    Tensor forward(const Tensor& x, ForwardMode mode) override;
    Tensor backward(const Tensor& dy) override;
    std::unique_ptr<Layer> clone() const override { return std::make_unique<Relu>(*this); }
    bool channel_transparent() const override { return true; }
    json describe() const override { return json{{"kind", "relu"}}; }

 private:
    Tensor cached_x_;
};

class Tanh : public Layer {
 public:
    std::string kind() const override { return "tanh"; }
    Shape out_shape(const Shape& in) const override { return in; }
    Tensor forward(const Tensor& x, ForwardMode mode) override;
    Tensor backward(const Tensor& dy) override;
    std::unique_ptr<Layer> clone() const override { return std::make_unique<Tanh>(*this); }
    bool channel_transparent() const override { return true; }
    json describe() const override { return json{{"kind", "tanh"}}; }

 private:
    Tensor cached_y_;
};

class Pool : public Layer {
 public:
    enum class Mode { max, avg, global_avg };
    Pool(Mode mode, int k, int stride);

    std::string kind() const override;
    Shape out_shape(const Shape& in) const override;
    Tensor forward(const Tensor& x, ForwardMode mode) override;
    Tensor backward(const Tensor& dy) override;
    std::unique_ptr<Layer> clone() const override { return std::make_unique<Pool>(*this); }
    bool channel_transparent() const override { return true; }
    json describe() const override;

 private:
    Mode mode_;
    int k_, stride_;
    Shape cached_in_{};
    std::vector<int> cached_argmax_;
};

// conv-bn-relu-conv-bn plus a skip, relu after the add. The block is atomic
// for splitting. With an identity skip the add ties input and output
// channels together, so neither side is individually prunable; a projection
// skip decouples them and the output group (conv2 + projection) prunes as
// one unit.
class ResidualBlock : public Layer {
 public:
    ResidualBlock(int in_ch, int out_ch, int stride, bool use_bn, bool force_proj, Rng* rng);

    std::string kind() const override { return "residual_block"; }
    Shape out_shape(const Shape& in) const override;
    Tensor forward(const Tensor& x, ForwardMode mode) override;
    Tensor backward(const Tensor& dy) override;
    std::unique_ptr<Layer> clone() const override;
    uint64_t flops(const Shape& in) const override;
    void collect_params(std::vector<Param*>& out) override;
    void collect_state(std::vector<Tensor*>& out) override;
    bool has_weights() const override { return true; }

    std::vector<PrunePart> prune_parts() const override;
    void prune_part(int part, const std::vector<int>& remove) override;
    void prune_in(const std::vector<int>& remove, int block) override;
    bool in_prunable() const override { return proj_ != nullptr; }
    void for_each_structure_param(
        int part, int index, const std::function<void(double w, double g)>& fn) const override;
    void zero_structure(int part, int index) override;
    void weight_elements(std::vector<const Param*>& out) const override;

    json describe() const override;

    bool has_projection() const { return proj_ != nullptr; }
    int out_channels() const { return out_ch_; }

    static constexpr int kPartInternal = 0;
    static constexpr int kPartOutput = 1;

 private:
    int in_ch_, out_ch_, stride_;
    bool use_bn_;
    std::unique_ptr<Conv> conv1_, conv2_, proj_;
    std::unique_ptr<BatchNorm> bn1_, bn2_, proj_bn_;
    // forward caches
    Tensor cached_x_, cached_preact_, cached_mid_relu_in_, cached_mid_relu_out_;
};

// Helpers shared with tests.
void he_normal_init(Tensor& t, int fan_in, Rng& rng);
std::vector<int> sorted_unique_desc(std::vector<int> v);
void drop_rows(Tensor& t, const std::vector<int>& rows_desc);  // removes dim-0 slices

}  // namespace splitens
