#include "d3/nn.hpp"

#include <algorithm>
#include <cmath>

namespace d3 {

// ---------------------------------------------------------------------------
// Layer
// ---------------------------------------------------------------------------

Layer Layer::dense(std::size_t in, std::size_t out) {
    Layer l;
    l.kind = Kind::dense;
    l.in = in;
    l.out = out;
    return l;
}

Layer Layer::conv(std::size_t c_in, std::size_t c_out, std::size_t kh, std::size_t kw,
                  std::size_t stride, std::size_t padding) {
    Layer l;
    l.kind = Kind::conv;
    l.c_in = c_in;
    l.c_out = c_out;
    l.kh = kh;
    l.kw = kw;
    l.stride = stride;
    l.padding = padding;
    return l;
}

Layer Layer::relu() {
    Layer l;
    l.kind = Kind::relu;
    return l;
}

Layer Layer::maxpool(std::size_t k, std::size_t stride) {
    Layer l;
    l.kind = Kind::maxpool;
    l.pool = k;
    l.pool_stride = stride;
    return l;
}

Layer Layer::flatten() {
    Layer l;
    l.kind = Kind::flatten;
    return l;
}

// ---------------------------------------------------------------------------
// ParamSet
// ---------------------------------------------------------------------------

void ParamSet::add(std::string name, Tensor t) {
    if (contains(name)) throw ContractError("duplicate parameter name '" + name + "'");
    items_.emplace_back(std::move(name), std::move(t));
}

bool ParamSet::contains(const std::string& name) const {
    for (const auto& [n, t] : items_) {
        if (n == name) return true;
    }
    return false;
}

Tensor& ParamSet::at(const std::string& name) {
    for (auto& [n, t] : items_) {
        if (n == name) return t;
    }
    throw ContractError("no parameter named '" + name + "'");
}

const Tensor& ParamSet::at(const std::string& name) const {
    for (const auto& [n, t] : items_) {
        if (n == name) return t;
    }
    throw ContractError("no parameter named '" + name + "'");
}

// ---------------------------------------------------------------------------
// ParamSelector
// ---------------------------------------------------------------------------

bool ParamSelector::glob_match(const std::string& pattern, const std::string& name) {
    std::size_t p = 0, n = 0;
    std::size_t star = std::string::npos, mark = 0;
    while (n < name.size()) {
        if (p < pattern.size() && (pattern[p] == '?' || pattern[p] == name[n])) {
            ++p;
            ++n;
        } else if (p < pattern.size() && pattern[p] == '*') {
            star = p++;
            mark = n;
        } else if (star != std::string::npos) {
            p = star + 1;
            n = ++mark;
        } else {
            return false;
        }
    }
    while (p < pattern.size() && pattern[p] == '*') ++p;
    return p == pattern.size();
}

bool ParamSelector::matches(const std::string& name) const {
    for (const auto& pat : patterns) {
        if (glob_match(pat, name)) return true;
    }
    return false;
}

ParamSelector ParamSelector::from_pattern(const std::string& pattern) {
    ParamSelector sel;
    std::size_t start = 0;
    while (start <= pattern.size()) {
        std::size_t comma = pattern.find(',', start);
        std::size_t end = comma == std::string::npos ? pattern.size() : comma;
        std::size_t a = start, b = end;
        while (a < b && pattern[a] == ' ') ++a;
        while (b > a && pattern[b - 1] == ' ') --b;
        if (b > a) sel.patterns.push_back(pattern.substr(a, b - a));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return sel;
}

// ---------------------------------------------------------------------------
// Model construction
// ---------------------------------------------------------------------------

namespace {

// Walk the layer stack and return the per-sample shape after each layer;
// throws when adjacent layers are incompatible.
std::vector<std::vector<std::size_t>> infer_shapes(const std::vector<Layer>& layers,
                                                   const std::vector<std::size_t>& input_shape) {
    std::vector<std::vector<std::size_t>> shapes;
    shapes.push_back(input_shape);
    std::vector<std::size_t> cur = input_shape;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const Layer& l = layers[i];
        switch (l.kind) {
            case Layer::Kind::dense: {
                if (cur.size() != 1 || cur[0] != l.in) {
                    throw DimensionError("layer" + std::to_string(i) + " (dense) expects [" +
                                         std::to_string(l.in) + "], got " +
                                         Tensor::shape_string(cur));
                }
                cur = {l.out};
                break;
            }
            case Layer::Kind::conv: {
                if (cur.size() != 3 || cur[0] != l.c_in) {
                    throw DimensionError("layer" + std::to_string(i) + " (conv) expects [" +
                                         std::to_string(l.c_in) + ",H,W], got " +
                                         Tensor::shape_string(cur));
                }
                std::size_t h = cur[1], w = cur[2];
                if (l.kh > h + 2 * l.padding || l.kw > w + 2 * l.padding) {
                    throw DimensionError("layer" + std::to_string(i) +
                                         " (conv) kernel larger than padded input " +
                                         Tensor::shape_string(cur));
                }
                cur = {l.c_out, (h + 2 * l.padding - l.kh) / l.stride + 1,
                       (w + 2 * l.padding - l.kw) / l.stride + 1};
                break;
            }
            case Layer::Kind::relu:
                break;
            case Layer::Kind::maxpool: {
                if (cur.size() != 3) {
                    throw DimensionError("layer" + std::to_string(i) +
                                         " (maxpool) expects [C,H,W], got " +
                                         Tensor::shape_string(cur));
                }
                if (l.pool > cur[1] || l.pool > cur[2]) {
                    throw DimensionError("layer" + std::to_string(i) +
                                         " (maxpool) window larger than input " +
                                         Tensor::shape_string(cur));
                }
                cur = {cur[0], (cur[1] - l.pool) / l.pool_stride + 1,
                       (cur[2] - l.pool) / l.pool_stride + 1};
                break;
            }
            case Layer::Kind::flatten: {
                std::size_t d = 1;
                for (std::size_t v : cur) d *= v;
                cur = {d};
                break;
            }
        }
        shapes.push_back(cur);
    }
    return shapes;
}

void init_kaiming(Tensor& t, std::size_t fan_in, double scale, Rng& rng) {
    double bound = scale / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < t.numel(); ++i) {
        t.set(i, rng.next_uniform(-bound, bound));
    }
}

} // namespace

Model::Model(std::vector<Layer> layers, std::vector<std::size_t> input_shape,
             std::size_t num_classes, Precision precision, Rng& rng)
    : layers_(std::move(layers)), input_shape_(std::move(input_shape)),
      num_classes_(num_classes), precision_(precision) {
    auto shapes = infer_shapes(layers_, input_shape_);
    const auto& final_shape = shapes.back();
    if (final_shape.size() != 1 || final_shape[0] != num_classes_) {
        throw DimensionError("model output shape " + Tensor::shape_string(final_shape) +
                             " does not match num_classes " + std::to_string(num_classes_));
    }
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const Layer& l = layers_[i];
        std::string prefix = "layer" + std::to_string(i);
        if (l.kind == Layer::Kind::dense) {
            Tensor w({l.out, l.in}, precision_);
            Tensor b({l.out}, precision_);
            init_kaiming(w, l.in, std::sqrt(6.0), rng);
            init_kaiming(b, l.in, 1.0, rng);
            params_.add(prefix + ".weight", std::move(w));
            params_.add(prefix + ".bias", std::move(b));
        } else if (l.kind == Layer::Kind::conv) {
            std::size_t fan_in = l.c_in * l.kh * l.kw;
            Tensor w({l.c_out, l.c_in, l.kh, l.kw}, precision_);
            Tensor b({l.c_out}, precision_);
            init_kaiming(w, fan_in, std::sqrt(6.0), rng);
            init_kaiming(b, fan_in, 1.0, rng);
            params_.add(prefix + ".weight", std::move(w));
            params_.add(prefix + ".bias", std::move(b));
        }
    }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

namespace {

Tensor transpose2d(const Tensor& m) {
    Tensor out({m.dim(1), m.dim(0)}, m.precision());
    const double* pm = m.data();
    double* po = out.data();
    for (std::size_t i = 0; i < m.dim(0); ++i) {
        for (std::size_t j = 0; j < m.dim(1); ++j) {
            po[j * m.dim(0) + i] = pm[i * m.dim(1) + j];
        }
    }
    return out;
}

Tensor slice_sample(const Tensor& batch, std::size_t b) {
    std::vector<std::size_t> shape(batch.shape().begin() + 1, batch.shape().end());
    std::size_t n = batch.numel() / batch.dim(0);
    std::vector<double> vals(batch.data() + b * n, batch.data() + (b + 1) * n);
    return Tensor::from_data(std::move(shape), std::move(vals), batch.precision());
}

void check_batch_shape(const Model& model, const Tensor& batch) {
    const auto& in = model.input_shape();
    bool ok = batch.rank() == in.size() + 1;
    if (ok) {
        for (std::size_t i = 0; i < in.size(); ++i) ok = ok && batch.dim(i + 1) == in[i];
    }
    if (!ok) {
        std::vector<std::size_t> expect = in;
        expect.insert(expect.begin(), batch.rank() ? batch.dim(0) : 0);
        throw DimensionError("batch shape " + Tensor::shape_string(batch.shape()) +
                             " does not match model input " + Tensor::shape_string(expect));
    }
    if (batch.precision() != model.precision()) {
        throw ContractError("batch precision does not match model precision");
    }
}

template <typename Acc>
void dense_bias_add(Tensor& y, const Tensor& bias) {
    const std::size_t batch = y.dim(0), out = y.dim(1);
    double* py = y.data();
    const double* pb = bias.data();
    for (std::size_t i = 0; i < batch; ++i) {
        for (std::size_t j = 0; j < out; ++j) {
            py[i * out + j] = static_cast<double>(static_cast<Acc>(py[i * out + j]) +
                                                  static_cast<Acc>(pb[j]));
        }
    }
}

template <typename Acc>
void conv_backward_kernel(const Layer& l, const Tensor& x, const Tensor& w, const Tensor& gy,
                          Tensor& gx, Tensor& gw, Tensor& gb) {
    // Single sample: x [Ci,H,W], gy [Co,Ho,Wo]. Loops ascend in a fixed order
    // so gradient accumulation is deterministic.
    const std::size_t h = x.dim(1), wd = x.dim(2);
    const std::size_t ho = gy.dim(1), wo = gy.dim(2);
    const long long pad = static_cast<long long>(l.padding);
    const double* px = x.data();
    const double* pw = w.data();
    const double* pg = gy.data();
    double* pgx = gx.data();
    double* pgw = gw.data();
    double* pgb = gb.data();
    for (std::size_t co = 0; co < l.c_out; ++co) {
        Acc bias_acc = static_cast<Acc>(pgb[co]);
        for (std::size_t oy = 0; oy < ho; ++oy) {
            for (std::size_t ox = 0; ox < wo; ++ox) {
                Acc g = static_cast<Acc>(pg[(co * ho + oy) * wo + ox]);
                bias_acc += g;
                for (std::size_t ci = 0; ci < l.c_in; ++ci) {
                    const double* xplane = px + ci * h * wd;
                    double* gxplane = pgx + ci * h * wd;
                    const double* wplane = pw + ((co * l.c_in + ci) * l.kh) * l.kw;
                    double* gwplane = pgw + ((co * l.c_in + ci) * l.kh) * l.kw;
                    for (std::size_t ky = 0; ky < l.kh; ++ky) {
                        long long iy = static_cast<long long>(oy * l.stride + ky) - pad;
                        if (iy < 0 || iy >= static_cast<long long>(h)) continue;
                        for (std::size_t kx = 0; kx < l.kw; ++kx) {
                            long long ix = static_cast<long long>(ox * l.stride + kx) - pad;
                            if (ix < 0 || ix >= static_cast<long long>(wd)) continue;
                            std::size_t xi = static_cast<std::size_t>(iy) * wd +
                                             static_cast<std::size_t>(ix);
                            std::size_t wi = ky * l.kw + kx;
                            gwplane[wi] = static_cast<double>(static_cast<Acc>(gwplane[wi]) +
                                                              g * static_cast<Acc>(xplane[xi]));
                            gxplane[xi] = static_cast<double>(static_cast<Acc>(gxplane[xi]) +
                                                              g * static_cast<Acc>(wplane[wi]));
                        }
                    }
                }
            }
        }
        pgb[co] = static_cast<double>(bias_acc);
    }
}

} // namespace

std::pair<Tensor, ForwardCache> forward(const Model& model, const Tensor& batch) {
    check_batch_shape(model, batch);
    const std::size_t bsz = batch.dim(0);
    const Precision prec = model.precision();

    ForwardCache cache;
    cache.model = &model;
    cache.params_version = model.params_version();
    cache.pool_argmax.resize(model.layers().size());
    cache.activations.reserve(model.layers().size() + 1);
    cache.activations.push_back(batch);

    Tensor cur = batch;
    for (std::size_t li = 0; li < model.layers().size(); ++li) {
        const Layer& l = model.layers()[li];
        std::string prefix = "layer" + std::to_string(li);
        switch (l.kind) {
            case Layer::Kind::dense: {
                const Tensor& w = model.params().at(prefix + ".weight");
                const Tensor& b = model.params().at(prefix + ".bias");
                Tensor y = matmul(cur, transpose2d(w));
                if (prec == Precision::f32) {
                    dense_bias_add<float>(y, b);
                } else {
                    dense_bias_add<double>(y, b);
                }
                cur = std::move(y);
                break;
            }
            case Layer::Kind::conv: {
                const Tensor& w = model.params().at(prefix + ".weight");
                const Tensor& b = model.params().at(prefix + ".bias");
                Tensor first = conv2d(slice_sample(cur, 0), w, l.stride, l.padding);
                std::vector<std::size_t> out_shape = {bsz, first.dim(0), first.dim(1),
                                                      first.dim(2)};
                Tensor y(out_shape, prec);
                std::size_t per = first.numel();
                std::size_t plane = first.dim(1) * first.dim(2);
                for (std::size_t s = 0; s < bsz; ++s) {
                    Tensor o = s == 0 ? std::move(first)
                                      : conv2d(slice_sample(cur, s), w, l.stride, l.padding);
                    double* dst = y.data() + s * per;
                    for (std::size_t c = 0; c < l.c_out; ++c) {
                        double bias = b[c];
                        for (std::size_t p = 0; p < plane; ++p) {
                            double v = o[c * plane + p];
                            dst[c * plane + p] =
                                prec == Precision::f32
                                    ? static_cast<double>(static_cast<float>(v) +
                                                          static_cast<float>(bias))
                                    : v + bias;
                        }
                    }
                }
                cur = std::move(y);
                break;
            }
            case Layer::Kind::relu: {
                Tensor y(cur.shape(), prec);
                for (std::size_t i = 0; i < cur.numel(); ++i) {
                    y.data()[i] = cur[i] > 0.0 ? cur[i] : 0.0;
                }
                cur = std::move(y);
                break;
            }
            case Layer::Kind::maxpool: {
                const std::size_t c = cur.dim(1), h = cur.dim(2), w = cur.dim(3);
                const std::size_t ho = (h - l.pool) / l.pool_stride + 1;
                const std::size_t wo = (w - l.pool) / l.pool_stride + 1;
                Tensor y({bsz, c, ho, wo}, prec);
                std::vector<std::size_t>& argmax = cache.pool_argmax[li];
                argmax.resize(bsz * c * ho * wo);
                std::size_t oi = 0;
                for (std::size_t s = 0; s < bsz; ++s) {
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        const double* plane = cur.data() + (s * c + ch) * h * w;
                        for (std::size_t oy = 0; oy < ho; ++oy) {
                            for (std::size_t ox = 0; ox < wo; ++ox) {
                                std::size_t best = (oy * l.pool_stride) * w + ox * l.pool_stride;
                                double bv = plane[best];
                                for (std::size_t ky = 0; ky < l.pool; ++ky) {
                                    for (std::size_t kx = 0; kx < l.pool; ++kx) {
                                        std::size_t idx = (oy * l.pool_stride + ky) * w +
                                                          ox * l.pool_stride + kx;
                                        if (plane[idx] > bv) {
                                            bv = plane[idx];
                                            best = idx;
                                        }
                                    }
                                }
                                y.data()[oi] = bv;
                                argmax[oi] = (s * c + ch) * h * w + best;
                                ++oi;
                            }
                        }
                    }
                }
                cur = std::move(y);
                break;
            }
            case Layer::Kind::flatten: {
                cur = cur.reshape({bsz, cur.numel() / bsz});
                break;
            }
        }
        cache.activations.push_back(cur);
    }
    if (!cur.all_finite()) {
        throw DivergenceError("forward pass produced non-finite logits");
    }
    return {cur, std::move(cache)};
}

Tensor forward_logits(const Model& model, const Tensor& batch) {
    return forward(model, batch).first;
}

ParamSet backward(const Model& model, const ForwardCache& cache, const Tensor& grad_logits) {
    if (cache.model != &model || cache.params_version != model.params_version()) {
        throw ContractError("backward called with a stale or mismatched forward cache");
    }
    if (cache.activations.size() != model.layers().size() + 1) {
        throw ContractError("forward cache is incomplete");
    }
    const Tensor& logits = cache.activations.back();
    if (!grad_logits.same_shape(logits)) {
        throw DimensionError("grad_logits shape " + Tensor::shape_string(grad_logits.shape()) +
                             " does not match logits " + Tensor::shape_string(logits.shape()));
    }
    const Precision prec = model.precision();
    const std::size_t bsz = grad_logits.dim(0);

    ParamSet grads;
    for (const auto& [name, t] : model.params()) {
        grads.add(name, Tensor(t.shape(), prec));
    }

    Tensor gy = grad_logits;
    for (std::size_t li = model.layers().size(); li-- > 0;) {
        const Layer& l = model.layers()[li];
        const Tensor& x = cache.activations[li];
        std::string prefix = "layer" + std::to_string(li);
        switch (l.kind) {
            case Layer::Kind::dense: {
                const Tensor& w = model.params().at(prefix + ".weight");
                grads.at(prefix + ".weight") = matmul(transpose2d(gy), x);
                Tensor& gb = grads.at(prefix + ".bias");
                for (std::size_t j = 0; j < l.out; ++j) {
                    if (prec == Precision::f32) {
                        float acc = 0.0f;
                        for (std::size_t i = 0; i < bsz; ++i) {
                            acc += static_cast<float>(gy[i * l.out + j]);
                        }
                        gb.data()[j] = static_cast<double>(acc);
                    } else {
                        double acc = 0.0;
                        for (std::size_t i = 0; i < bsz; ++i) acc += gy[i * l.out + j];
                        gb.data()[j] = acc;
                    }
                }
                gy = matmul(gy, w);
                break;
            }
            case Layer::Kind::conv: {
                const Tensor& w = model.params().at(prefix + ".weight");
                Tensor gx(x.shape(), prec);
                Tensor& gw = grads.at(prefix + ".weight");
                Tensor& gb = grads.at(prefix + ".bias");
                std::size_t x_per = x.numel() / bsz;
                std::size_t y_per = gy.numel() / bsz;
                for (std::size_t s = 0; s < bsz; ++s) {
                    Tensor xs = slice_sample(x, s);
                    Tensor gys = slice_sample(gy, s);
                    Tensor gxs(xs.shape(), prec);
                    if (prec == Precision::f32) {
                        conv_backward_kernel<float>(l, xs, w, gys, gxs, gw, gb);
                    } else {
                        conv_backward_kernel<double>(l, xs, w, gys, gxs, gw, gb);
                    }
                    std::copy(gxs.data(), gxs.data() + x_per, gx.data() + s * x_per);
                    (void)y_per;
                }
                gy = std::move(gx);
                break;
            }
            case Layer::Kind::relu: {
                Tensor gx(x.shape(), prec);
                for (std::size_t i = 0; i < x.numel(); ++i) {
                    gx.data()[i] = x[i] > 0.0 ? gy[i] : 0.0;
                }
                gy = std::move(gx);
                break;
            }
            case Layer::Kind::maxpool: {
                Tensor gx(x.shape(), prec);
                const std::vector<std::size_t>& argmax = cache.pool_argmax[li];
                for (std::size_t i = 0; i < gy.numel(); ++i) {
                    std::size_t src = argmax[i];
                    gx.data()[src] = round_to(prec, gx[src] + gy[i]);
                }
                gy = std::move(gx);
                break;
            }
            case Layer::Kind::flatten: {
                gy = gy.reshape(x.shape());
                break;
            }
        }
    }
    return grads;
}

std::vector<int> predict(const Model& model, const Tensor& batch) {
    Tensor logits = forward_logits(model, batch);
    const std::size_t bsz = logits.dim(0), k = logits.dim(1);
    std::vector<int> out(bsz);
    for (std::size_t i = 0; i < bsz; ++i) {
        const double* row = logits.data() + i * k;
        std::size_t best = 0;
        for (std::size_t j = 1; j < k; ++j) {
            if (row[j] > row[best]) best = j;
        }
        out[i] = static_cast<int>(best);
    }
    return out;
}

ParamSet clone_params(const Model& model) {
    return model.params();
}

void load_params(Model& model, const ParamSet& params) {
    if (params.size() != model.params().size()) {
        throw ContractError("load_params: expected " + std::to_string(model.params().size()) +
                            " tensors, got " + std::to_string(params.size()));
    }
    for (auto& [name, t] : model.params()) {
        const Tensor* incoming = nullptr;
        for (const auto& [n2, t2] : params) {
            if (n2 == name) {
                incoming = &t2;
                break;
            }
        }
        if (!incoming) throw ContractError("load_params: missing parameter '" + name + "'");
        if (!incoming->same_shape(t)) {
            throw ContractError("load_params: shape mismatch for '" + name + "': " +
                                Tensor::shape_string(incoming->shape()) + " vs " +
                                Tensor::shape_string(t.shape()));
        }
        if (incoming->precision() != t.precision()) {
            throw ContractError("load_params: precision mismatch for '" + name + "'");
        }
        t = *incoming;
    }
    model.bump_params_version();
}

ParamSet select(const ParamSet& params, const ParamSelector& sel) {
    ParamSet out;
    for (const auto& [name, t] : params) {
        if (sel.matches(name)) out.add(name, t);
    }
    return out;
}

Model make_model(const std::string& arch, const std::vector<std::size_t>& input_shape,
                 std::size_t num_classes, Rng& rng, Precision precision) {
    if (input_shape.size() != 3) {
        throw ContractError("make_model expects input_shape [C,H,W], got " +
                            Tensor::shape_string(input_shape));
    }
    std::size_t c = input_shape[0], h = input_shape[1], w = input_shape[2];
    std::vector<Layer> layers;
    if (arch == "mlp") {
        layers.push_back(Layer::flatten());
        layers.push_back(Layer::dense(c * h * w, 256));
        layers.push_back(Layer::relu());
        layers.push_back(Layer::dense(256, num_classes));
    } else if (arch == "small_cnn") {
        layers.push_back(Layer::conv(c, 16, 3, 3));
        layers.push_back(Layer::relu());
        layers.push_back(Layer::maxpool(2, 2));
        std::size_t h1 = ((h - 3) + 1 - 2) / 2 + 1;
        std::size_t w1 = ((w - 3) + 1 - 2) / 2 + 1;
        layers.push_back(Layer::conv(16, 32, 3, 3));
        layers.push_back(Layer::relu());
        layers.push_back(Layer::maxpool(2, 2));
        std::size_t h2 = ((h1 - 3) + 1 - 2) / 2 + 1;
        std::size_t w2 = ((w1 - 3) + 1 - 2) / 2 + 1;
        layers.push_back(Layer::flatten());
        layers.push_back(Layer::dense(32 * h2 * w2, num_classes));
    } else {
        std::string names;
        for (const auto& n : known_architectures()) {
            if (!names.empty()) names += ", ";
            names += n;
        }
        throw ValidationError("unknown architecture '" + arch + "' (valid: " + names + ")");
    }
    return Model(std::move(layers), input_shape, num_classes, precision, rng);
}

std::vector<std::string> known_architectures() {
    return {"mlp", "small_cnn"};
}

std::vector<std::string> dense_weight_names(const Model& model) {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < model.layers().size(); ++i) {
        if (model.layers()[i].kind == Layer::Kind::dense) {
            names.push_back("layer" + std::to_string(i) + ".weight");
        }
    }
    return names;
}

} // namespace d3
