#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "d3/tensor.hpp"

namespace d3 {

/// One stage of a sequential model. Parameter tensors, where a kind has any,
/// are named "layer{i}.weight" and "layer{i}.bias" with i the layer index.
struct Layer {
    enum class Kind { dense, conv, relu, maxpool, flatten };

    Kind kind = Kind::relu;

    // dense
    std::size_t in = 0;
    std::size_t out = 0;

    // conv
    std::size_t c_in = 0;
    std::size_t c_out = 0;
    std::size_t kh = 0;
    std::size_t kw = 0;
    std::size_t stride = 1;
    std::size_t padding = 0;

    // maxpool
    std::size_t pool = 0;
    std::size_t pool_stride = 0;

    bool has_params() const { return kind == Kind::dense || kind == Kind::conv; }

    static Layer dense(std::size_t in, std::size_t out);
    static Layer conv(std::size_t c_in, std::size_t c_out, std::size_t kh, std::size_t kw,
                      std::size_t stride = 1, std::size_t padding = 0);
    static Layer relu();
    static Layer maxpool(std::size_t k, std::size_t stride);
    static Layer flatten();
};

/// Ordered map from parameter name to tensor. Iteration follows insertion
/// order, which fixes every reduction and serialization order downstream.
class ParamSet {
public:
    void add(std::string name, Tensor t);
    bool contains(const std::string& name) const;
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    std::size_t size() const { return items_.size(); }
    bool empty() const { return items_.empty(); }

    std::vector<std::pair<std::string, Tensor>>& items() { return items_; }
    const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }

    auto begin() { return items_.begin(); }
    auto end() { return items_.end(); }
    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }

private:
    std::vector<std::pair<std::string, Tensor>> items_;
};

/// Predicate over parameter names: a list of glob patterns ('*' matches any
/// run of characters, '?' a single one); a name is selected when any pattern
/// matches. Patterns may be given as one comma-separated string.
struct ParamSelector {
    std::vector<std::string> patterns;

    bool matches(const std::string& name) const;
    static ParamSelector from_pattern(const std::string& pattern);
    static bool glob_match(const std::string& pattern, const std::string& name);
};

/// Sequential classifier: layers are validated for shape compatibility at
/// build time, parameters live in an owned ParamSet.
class Model {
public:
    Model(std::vector<Layer> layers, std::vector<std::size_t> input_shape, std::size_t num_classes,
          Precision precision, Rng& rng);

    const std::vector<Layer>& layers() const { return layers_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }
    const std::vector<std::size_t>& input_shape() const { return input_shape_; }
    std::size_t num_classes() const { return num_classes_; }
    Precision precision() const { return precision_; }
    std::uint64_t params_version() const { return params_version_; }
    void bump_params_version() { ++params_version_; }

private:
    std::vector<Layer> layers_;
    ParamSet params_;
    std::vector<std::size_t> input_shape_; // C,H,W
    std::size_t num_classes_ = 0;
    Precision precision_ = Precision::f64;
    std::uint64_t params_version_ = 0;
};

/// Activation record produced by forward() and consumed by backward().
struct ForwardCache {
    const Model* model = nullptr;
    std::uint64_t params_version = 0;
    std::vector<Tensor> activations;                    // activations[0] is the input batch
    std::vector<std::vector<std::size_t>> pool_argmax;  // one entry per layer, used by maxpool
};

/// Forward pass over a batch [B, C, H, W]; returns logits [B, K] and the cache
/// needed by backward().
std::pair<Tensor, ForwardCache> forward(const Model& model, const Tensor& batch);

/// Forward pass without keeping a cache.
Tensor forward_logits(const Model& model, const Tensor& batch);

/// Backpropagate grad_logits [B, K] through the cached forward pass; returns
/// gradients with the same names and shapes as model.params().
ParamSet backward(const Model& model, const ForwardCache& cache, const Tensor& grad_logits);

/// Argmax over logits per row; ties break toward the lowest class index.
std::vector<int> predict(const Model& model, const Tensor& batch);

ParamSet clone_params(const Model& model);

/// Replace model parameters; names and shapes must agree exactly.
void load_params(Model& model, const ParamSet& params);

/// Subset of `params` whose names match the selector, preserving order.
ParamSet select(const ParamSet& params, const ParamSelector& sel);

/// Reference architectures. "mlp" is flatten -> dense(D,256) -> relu ->
/// dense(256,K); "small_cnn" is conv 3x3 (C->16) -> relu -> maxpool2 ->
/// conv 3x3 (16->32) -> relu -> maxpool2 -> flatten -> dense(.,K).
Model make_model(const std::string& arch, const std::vector<std::size_t>& input_shape,
                 std::size_t num_classes, Rng& rng, Precision precision = Precision::f64);

std::vector<std::string> known_architectures();

/// Names of the dense-layer weight tensors (biases excluded); the default
/// subset a defense measures its weight distance on.
std::vector<std::string> dense_weight_names(const Model& model);

} // namespace d3
