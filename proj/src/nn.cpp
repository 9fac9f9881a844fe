#include "desk/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include <nlohmann/json.hpp>

namespace desk {

using nlohmann::json;

std::string layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::Conv: return "conv";
        case LayerKind::Relu: return "relu";
        case LayerKind::MaxPool: return "maxpool";
        case LayerKind::Flatten: return "flatten";
        case LayerKind::FullyConnected: return "fully_connected";
        case LayerKind::Dropout: return "dropout";
        case LayerKind::SigmoidOutput: return "sigmoid_output";
        case LayerKind::SoftmaxOutput: return "softmax_output";
    }
    return "?";
}

namespace {

LayerKind layer_kind_from_name(const std::string& name) {
    for (LayerKind k : {LayerKind::Conv, LayerKind::Relu, LayerKind::MaxPool, LayerKind::Flatten,
                        LayerKind::FullyConnected, LayerKind::Dropout, LayerKind::SigmoidOutput,
                        LayerKind::SoftmaxOutput})
        if (layer_kind_name(k) == name) return k;
    throw ConfigError("unknown layer kind '" + name + "'");
}

Eigen::Index numel(const std::vector<int>& shape) {
    Eigen::Index n = 1;
    for (int d : shape) n *= d;
    return n;
}

}  // namespace

LayerDesc LayerDesc::conv(int kh, int kw, int filters, int pad) {
    LayerDesc d;
    d.kind = LayerKind::Conv;
    d.kh = kh;
    d.kw = kw;
    d.filters = filters;
    d.pad = pad;
    return d;
}
LayerDesc LayerDesc::relu() {
    LayerDesc d;
    d.kind = LayerKind::Relu;
    return d;
}
LayerDesc LayerDesc::maxpool(int ph, int pw) {
    LayerDesc d;
    d.kind = LayerKind::MaxPool;
    d.ph = ph;
    d.pw = pw;
    return d;
}
LayerDesc LayerDesc::flatten() {
    LayerDesc d;
    d.kind = LayerKind::Flatten;
    return d;
}
LayerDesc LayerDesc::fully_connected(int units) {
    LayerDesc d;
    d.kind = LayerKind::FullyConnected;
    d.units = units;
    return d;
}
LayerDesc LayerDesc::dropout(double rate) {
    LayerDesc d;
    d.kind = LayerKind::Dropout;
    d.rate = rate;
    return d;
}
LayerDesc LayerDesc::sigmoid_output() {
    LayerDesc d;
    d.kind = LayerKind::SigmoidOutput;
    return d;
}
LayerDesc LayerDesc::softmax_output() {
    LayerDesc d;
    d.kind = LayerKind::SoftmaxOutput;
    return d;
}

std::vector<std::vector<int>> NetworkSpec::shape_chain() const {
    std::vector<std::vector<int>> chain;
    chain.push_back(input_shape);
    std::vector<int> cur = input_shape;
    for (size_t i = 0; i < layers.size(); ++i) {
        const LayerDesc& l = layers[i];
        const std::string where = "layer " + std::to_string(i) + " (" + layer_kind_name(l.kind) + ")";
        switch (l.kind) {
            case LayerKind::Conv: {
                if (cur.size() != 3)
                    throw ConfigError(where + " needs H x W x C input, has " + shape_str(cur));
                int oh = cur[0] + 2 * l.pad - l.kh + 1;
                int ow = cur[1] + 2 * l.pad - l.kw + 1;
                if (l.kh <= 0 || l.kw <= 0 || l.filters <= 0 || l.pad < 0 || oh <= 0 || ow <= 0)
                    throw ConfigError(where + " is inconsistent with input " + shape_str(cur));
                cur = {oh, ow, l.filters};
                break;
            }
            case LayerKind::MaxPool: {
                if (cur.size() != 3)
                    throw ConfigError(where + " needs H x W x C input, has " + shape_str(cur));
                if (l.ph <= 0 || l.pw <= 0 || cur[0] % l.ph != 0 || cur[1] % l.pw != 0)
                    throw ConfigError(where + " window " + std::to_string(l.ph) + "x" +
                                      std::to_string(l.pw) + " does not divide " + shape_str(cur));
                cur = {cur[0] / l.ph, cur[1] / l.pw, cur[2]};
                break;
            }
            case LayerKind::Flatten: {
                cur = {static_cast<int>(numel(cur))};
                break;
            }
            case LayerKind::FullyConnected: {
                if (cur.size() != 1)
                    throw ConfigError(where + " needs flat input, has " + shape_str(cur));
                if (l.units <= 0) throw ConfigError(where + " needs positive units");
                cur = {l.units};
                break;
            }
            case LayerKind::Dropout: {
                if (l.rate < 0.0 || l.rate >= 1.0)
                    throw ConfigError(where + " rate must be in [0,1), got " +
                                      std::to_string(l.rate));
                break;
            }
            case LayerKind::Relu:
                break;
            case LayerKind::SigmoidOutput:
            case LayerKind::SoftmaxOutput: {
                if (cur.size() != 1)
                    throw ConfigError(where + " needs flat input, has " + shape_str(cur));
                break;
            }
        }
        chain.push_back(cur);
    }
    return chain;
}

void NetworkSpec::validate(bool require_output) const {
    if (layers.empty()) throw ConfigError("network has no layers");
    if (input_shape.size() != 1 && input_shape.size() != 3)
        throw ConfigError("input shape must be {D} or {H,W,C}, got " + shape_str(input_shape));
    for (int d : input_shape)
        if (d <= 0) throw ConfigError("input shape must be positive, got " + shape_str(input_shape));

    int output_layers = 0;
    for (const auto& l : layers) output_layers += l.is_output() ? 1 : 0;
    if (require_output) {
        if (output_layers != 1 || !layers.back().is_output())
            throw ConfigError("network needs exactly one output layer, at the end");
    } else if (output_layers != 0) {
        throw ConfigError("headless stack must not contain an output layer");
    }

    if (fc_split < 0 || fc_split > static_cast<int>(layers.size()))
        throw ConfigError("fc_split out of range");
    for (size_t i = 0; i < layers.size(); ++i) {
        if (layers[i].kind == LayerKind::FullyConnected && static_cast<int>(i) < fc_split)
            throw ConfigError("conv/FC split marker must precede the first fully connected layer");
    }

    shape_chain();  // throws on any per-layer inconsistency
}

int NetworkSpec::output_dim() const {
    auto out = output_shape();
    return static_cast<int>(numel(out));
}

json NetworkSpec::to_json() const {
    json layers_j = json::array();
    for (const auto& l : layers) {
        json lj{{"kind", layer_kind_name(l.kind)}};
        switch (l.kind) {
            case LayerKind::Conv:
                lj["kh"] = l.kh;
                lj["kw"] = l.kw;
                lj["filters"] = l.filters;
                lj["pad"] = l.pad;
                break;
            case LayerKind::MaxPool:
                lj["ph"] = l.ph;
                lj["pw"] = l.pw;
                break;
            case LayerKind::FullyConnected:
                lj["units"] = l.units;
                break;
            case LayerKind::Dropout:
                lj["rate"] = l.rate;
                break;
            default:
                break;
        }
        layers_j.push_back(lj);
    }
    return json{{"input_shape", input_shape}, {"fc_split", fc_split}, {"layers", layers_j}};
}

NetworkSpec NetworkSpec::from_json(const json& j) {
    NetworkSpec spec;
    spec.input_shape = j.at("input_shape").get<std::vector<int>>();
    spec.fc_split = j.at("fc_split").get<int>();
    for (const auto& lj : j.at("layers")) {
        LayerDesc l;
        l.kind = layer_kind_from_name(lj.at("kind").get<std::string>());
        switch (l.kind) {
            case LayerKind::Conv:
                l.kh = lj.at("kh");
                l.kw = lj.at("kw");
                l.filters = lj.at("filters");
                l.pad = lj.at("pad");
                break;
            case LayerKind::MaxPool:
                l.ph = lj.at("ph");
                l.pw = lj.at("pw");
                break;
            case LayerKind::FullyConnected:
                l.units = lj.at("units");
                break;
            case LayerKind::Dropout:
                l.rate = lj.at("rate");
                break;
            default:
                break;
        }
        spec.layers.push_back(l);
    }
    return spec;
}

NetworkParams NetworkParams::init(const NetworkSpec& spec, Rng& rng) {
    auto chain = spec.shape_chain();
    NetworkParams p;
    for (size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerDesc& l = spec.layers[i];
        if (l.kind == LayerKind::Conv) {
            const auto& in = chain[i];
            Tensor w({l.kh, l.kw, in[2], l.filters});
            double std_dev = std::sqrt(2.0 / (static_cast<double>(l.kh) * l.kw * in[2]));
            for (Eigen::Index k = 0; k < w.size(); ++k) w[k] = rng.normal(0.0, std_dev);
            p.layers[static_cast<int>(i)] = {std::move(w), Tensor({l.filters})};
        } else if (l.kind == LayerKind::FullyConnected) {
            const int fan_in = chain[i][0];
            Tensor w({fan_in, l.units});
            const bool feeds_output = i + 1 < spec.layers.size() && spec.layers[i + 1].is_output();
            if (feeds_output) {
                double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
                for (Eigen::Index k = 0; k < w.size(); ++k) w[k] = rng.uniform(-s, s);
            } else {
                double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
                for (Eigen::Index k = 0; k < w.size(); ++k) w[k] = rng.normal(0.0, std_dev);
            }
            p.layers[static_cast<int>(i)] = {std::move(w), Tensor({l.units})};
        }
    }
    return p;
}

NetworkParams NetworkParams::zeros_like(const NetworkSpec& spec) {
    auto chain = spec.shape_chain();
    NetworkParams p;
    for (size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerDesc& l = spec.layers[i];
        if (l.kind == LayerKind::Conv)
            p.layers[static_cast<int>(i)] = {Tensor({l.kh, l.kw, chain[i][2], l.filters}),
                                             Tensor({l.filters})};
        else if (l.kind == LayerKind::FullyConnected)
            p.layers[static_cast<int>(i)] = {Tensor({chain[i][0], l.units}), Tensor({l.units})};
    }
    return p;
}

bool NetworkParams::same_shapes(const NetworkParams& other) const {
    if (layers.size() != other.layers.size()) return false;
    for (const auto& [idx, lp] : layers) {
        auto it = other.layers.find(idx);
        if (it == other.layers.end()) return false;
        if (!lp.w.same_shape(it->second.w) || !lp.b.same_shape(it->second.b)) return false;
    }
    return true;
}

uint64_t NetworkParams::checksum() const {
    uint64_t h = 0xCBF29CE484222325ULL;
    auto mix = [&h](const Tensor& t) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
        for (size_t i = 0; i < static_cast<size_t>(t.size()) * sizeof(double); ++i) {
            h ^= bytes[i];
            h *= 0x100000001B3ULL;
        }
    };
    for (const auto& [idx, lp] : layers) {
        h ^= static_cast<uint64_t>(idx);
        h *= 0x100000001B3ULL;
        mix(lp.w);
        mix(lp.b);
    }
    return h;
}

namespace {

void check_layer_params(const NetworkSpec& spec, const NetworkParams& params, size_t i,
                        const std::vector<int>& in_shape) {
    const LayerDesc& l = spec.layers[i];
    auto it = params.layers.find(static_cast<int>(i));
    if (it == params.layers.end())
        throw DimensionError("layer " + std::to_string(i) + " has no parameters");
    if (l.kind == LayerKind::Conv) {
        std::vector<int> want{l.kh, l.kw, in_shape[2], l.filters};
        if (it->second.w.shape() != want)
            throw DimensionError("layer " + std::to_string(i) + " filter shape " +
                                 shape_str(it->second.w.shape()) + " != " + shape_str(want));
    } else if (l.kind == LayerKind::FullyConnected) {
        std::vector<int> want{in_shape[0], l.units};
        if (it->second.w.shape() != want)
            throw DimensionError("layer " + std::to_string(i) + " weight shape " +
                                 shape_str(it->second.w.shape()) + " != " + shape_str(want));
    }
}

void softmax_rows(Eigen::Map<RowMatrix> m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        double mx = m.row(r).maxCoeff();
        m.row(r) = (m.row(r).array() - mx).exp();
        m.row(r) /= m.row(r).sum();
    }
}

}  // namespace

Tensor forward(const NetworkSpec& spec, const NetworkParams& params, const Tensor& input,
               Mode mode, Rng& rng, ForwardCache* cache) {
    const auto chain = spec.shape_chain();
    std::vector<int> per_sample(input.shape().begin() + 1, input.shape().end());
    if (input.rank() < 2 || per_sample != spec.input_shape)
        throw DimensionError("input batch shape " + shape_str(input.shape()) +
                             " does not match spec input " + shape_str(spec.input_shape));
    const int n = input.dim(0);

    if (cache) {
        *cache = ForwardCache{};
        cache->spec = &spec;
        cache->mode = mode;
        cache->batch = n;
        cache->inputs.resize(spec.layers.size());
        cache->dropout_masks.resize(spec.layers.size());
        cache->argmax.resize(spec.layers.size());
        cache->conv_cols.resize(spec.layers.size());
    }

    Tensor act = input;
    for (size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerDesc& l = spec.layers[i];
        if (cache) cache->inputs[i] = act;
        const auto& in_shape = chain[i];
        const auto& out_shape = chain[i + 1];

        switch (l.kind) {
            case LayerKind::Conv: {
                check_layer_params(spec, params, i, in_shape);
                const LayerParams& lp = params.layers.at(static_cast<int>(i));
                const int h = in_shape[0], w = in_shape[1], c = in_shape[2];
                const Eigen::Index in_stride = numel(in_shape);
                const Eigen::Index out_stride = numel(out_shape);
                const Eigen::Index patch = static_cast<Eigen::Index>(l.kh) * l.kw * c;
                auto filt = lp.w.as_mat(patch, l.filters);
                std::vector<int> next_shape{n, out_shape[0], out_shape[1], out_shape[2]};
                Tensor next(next_shape);
                for (int s = 0; s < n; ++s) {
                    RowMatrix cols = im2col_raw(act.data() + s * in_stride, h, w, c, l.kh, l.kw,
                                                l.pad);
                    Eigen::Map<RowMatrix> out_m(next.data() + s * out_stride,
                                                static_cast<Eigen::Index>(out_shape[0]) *
                                                    out_shape[1],
                                                l.filters);
                    out_m.noalias() = cols * filt;
                    out_m.rowwise() += lp.b.vec().transpose();
                    if (cache) cache->conv_cols[i].push_back(std::move(cols));
                }
                act = std::move(next);
                break;
            }
            case LayerKind::Relu: {
                Tensor next = act;
                next.vec() = next.vec().cwiseMax(0.0);
                act = std::move(next);
                break;
            }
            case LayerKind::MaxPool: {
                const int h = in_shape[0], w = in_shape[1], c = in_shape[2];
                const int oh = out_shape[0], ow = out_shape[1];
                const Eigen::Index in_stride = numel(in_shape);
                const Eigen::Index out_stride = numel(out_shape);
                Tensor next({n, oh, ow, c});
                std::vector<Eigen::Index> arg(static_cast<size_t>(n) * out_stride);
                const double* src = act.data();
                double* dst = next.data();
                for (int s = 0; s < n; ++s) {
                    for (int oy = 0; oy < oh; ++oy)
                        for (int ox = 0; ox < ow; ++ox)
                            for (int ch = 0; ch < c; ++ch) {
                                double best = -std::numeric_limits<double>::infinity();
                                Eigen::Index best_idx = -1;
                                for (int py = 0; py < l.ph; ++py)
                                    for (int px = 0; px < l.pw; ++px) {
                                        Eigen::Index idx =
                                            s * in_stride +
                                            (static_cast<Eigen::Index>(oy * l.ph + py) * w +
                                             (ox * l.pw + px)) *
                                                c +
                                            ch;
                                        if (src[idx] > best) {
                                            best = src[idx];
                                            best_idx = idx;
                                        }
                                    }
                                Eigen::Index oidx =
                                    s * out_stride + (static_cast<Eigen::Index>(oy) * ow + ox) * c +
                                    ch;
                                dst[oidx] = best;
                                arg[static_cast<size_t>(oidx)] = best_idx;
                            }
                }
                if (cache) cache->argmax[i] = std::move(arg);
                act = std::move(next);
                break;
            }
            case LayerKind::Flatten: {
                act = act.reshaped({n, out_shape[0]});
                break;
            }
            case LayerKind::FullyConnected: {
                check_layer_params(spec, params, i, in_shape);
                const LayerParams& lp = params.layers.at(static_cast<int>(i));
                Tensor next({n, l.units});
                next.mat().noalias() = act.mat() * lp.w.mat();
                next.mat().rowwise() += lp.b.vec().transpose();
                act = std::move(next);
                break;
            }
            case LayerKind::Dropout: {
                if (mode == Mode::Train && l.rate > 0.0) {
                    Tensor mask(act.shape());
                    const double keep_scale = 1.0 / (1.0 - l.rate);
                    for (Eigen::Index k = 0; k < mask.size(); ++k)
                        mask[k] = rng.uniform() >= l.rate ? keep_scale : 0.0;
                    Tensor next = act;
                    next.vec().array() *= mask.vec().array();
                    if (cache) cache->dropout_masks[i] = std::move(mask);
                    act = std::move(next);
                }
                break;
            }
            case LayerKind::SigmoidOutput: {
                if (cache) cache->preactivation = act;
                Tensor next = act;
                next.vec() = ((-next.vec().array()).exp() + 1.0).inverse();
                act = std::move(next);
                break;
            }
            case LayerKind::SoftmaxOutput: {
                if (cache) cache->preactivation = act;
                Tensor next = act;
                softmax_rows(next.mat());
                act = std::move(next);
                break;
            }
        }
    }
    return act;
}

namespace {

// Shared backward walk from layer `start` down to layer 0. `grad` enters as
// dLoss/d(output of layer `start`).
NetworkParams backward_walk(const NetworkSpec& spec, const NetworkParams& params,
                            const ForwardCache& cache, Tensor grad, int start,
                            Tensor* input_grad) {
    const auto chain = spec.shape_chain();
    const int n = cache.batch;
    NetworkParams grads;

    for (int i = start; i >= 0; --i) {
        const LayerDesc& l = spec.layers[static_cast<size_t>(i)];
        const auto& in_shape = chain[static_cast<size_t>(i)];
        const auto& out_shape = chain[static_cast<size_t>(i) + 1];
        const Tensor& layer_in = cache.inputs[static_cast<size_t>(i)];

        switch (l.kind) {
            case LayerKind::Conv: {
                const LayerParams& lp = params.layers.at(i);
                const Eigen::Index patch = static_cast<Eigen::Index>(l.kh) * l.kw * in_shape[2];
                const Eigen::Index in_stride = numel(in_shape);
                const Eigen::Index out_stride = numel(out_shape);
                const Eigen::Index orows = static_cast<Eigen::Index>(out_shape[0]) * out_shape[1];
                LayerParams g{Tensor(lp.w.shape()), Tensor(lp.b.shape())};
                auto gw = g.w.as_mat(patch, l.filters);
                auto filt = lp.w.as_mat(patch, l.filters);
                Tensor din({n, in_shape[0], in_shape[1], in_shape[2]});
                const auto& cols_per_sample = cache.conv_cols[static_cast<size_t>(i)];
                if (cols_per_sample.size() != static_cast<size_t>(n))
                    throw Error("stale forward cache: conv patches missing for layer " +
                                std::to_string(i));
                for (int s = 0; s < n; ++s) {
                    Eigen::Map<const RowMatrix> dout(grad.data() + s * out_stride, orows,
                                                     l.filters);
                    gw.noalias() += cols_per_sample[static_cast<size_t>(s)].transpose() * dout;
                    g.b.vec().noalias() += dout.colwise().sum().transpose();
                    RowMatrix dcols = dout * filt.transpose();
                    col2im_add_raw(dcols, in_shape[0], in_shape[1], in_shape[2], l.kh, l.kw, l.pad,
                                   din.data() + s * in_stride);
                }
                grads.layers[i] = std::move(g);
                grad = std::move(din);
                break;
            }
            case LayerKind::Relu: {
                Tensor din = grad;
                din.vec().array() *= (layer_in.vec().array() > 0.0).cast<double>();
                grad = std::move(din);
                break;
            }
            case LayerKind::MaxPool: {
                Tensor din(layer_in.shape());
                const auto& arg = cache.argmax[static_cast<size_t>(i)];
                if (arg.size() != static_cast<size_t>(grad.size()))
                    throw Error("stale forward cache: pool indices missing for layer " +
                                std::to_string(i));
                for (Eigen::Index k = 0; k < grad.size(); ++k)
                    din[arg[static_cast<size_t>(k)]] += grad[k];
                grad = std::move(din);
                break;
            }
            case LayerKind::Flatten: {
                grad = grad.reshaped(layer_in.shape());
                break;
            }
            case LayerKind::FullyConnected: {
                const LayerParams& lp = params.layers.at(i);
                LayerParams g{Tensor(lp.w.shape()), Tensor(lp.b.shape())};
                g.w.mat().noalias() = layer_in.mat().transpose() * grad.mat();
                g.b.vec().noalias() = grad.mat().colwise().sum().transpose();
                Tensor din({n, in_shape[0]});
                din.mat().noalias() = grad.mat() * lp.w.mat().transpose();
                grads.layers[i] = std::move(g);
                grad = std::move(din);
                break;
            }
            case LayerKind::Dropout: {
                if (cache.mode == Mode::Train && l.rate > 0.0) {
                    const Tensor& mask = cache.dropout_masks[static_cast<size_t>(i)];
                    if (mask.size() != grad.size())
                        throw Error("stale forward cache: dropout mask missing for layer " +
                                    std::to_string(i));
                    Tensor din = grad;
                    din.vec().array() *= mask.vec().array();
                    grad = std::move(din);
                }
                break;
            }
            case LayerKind::SigmoidOutput:
            case LayerKind::SoftmaxOutput:
                throw Error("output layer cannot appear mid-stack");
        }
    }
    if (input_grad) *input_grad = std::move(grad);
    return grads;
}

void check_cache(const NetworkSpec& spec, const ForwardCache& cache) {
    if (cache.spec != &spec || cache.inputs.size() != spec.layers.size())
        throw Error("forward cache does not match this network spec");
}

}  // namespace

NetworkParams backward(const NetworkSpec& spec, const NetworkParams& params,
                       const ForwardCache& cache, const Tensor& output_grad, Tensor* input_grad) {
    check_cache(spec, cache);
    const LayerDesc& last = spec.layers.back();
    if (!last.is_output())
        return backward_walk(spec, params, cache, output_grad,
                             static_cast<int>(spec.layers.size()) - 1, input_grad);

    // Push the gradient through the output nonlinearity first.
    const Tensor& pre = cache.preactivation;
    if (!pre.same_shape(output_grad))
        throw DimensionError("output grad shape " + shape_str(output_grad.shape()) +
                             " does not match output " + shape_str(pre.shape()));
    Tensor preact_grad(pre.shape());
    if (last.kind == LayerKind::SigmoidOutput) {
        Eigen::ArrayXd y = ((-pre.vec().array()).exp() + 1.0).inverse();
        preact_grad.vec().array() = output_grad.vec().array() * y * (1.0 - y);
    } else {
        Tensor probs = pre;
        softmax_rows(probs.mat());
        auto y = probs.mat();
        auto g = output_grad.mat();
        auto dz = preact_grad.mat();
        for (Eigen::Index r = 0; r < y.rows(); ++r) {
            double dot = (g.row(r).array() * y.row(r).array()).sum();
            dz.row(r) = y.row(r).array() * (g.row(r).array() - dot);
        }
    }
    return backward_walk(spec, params, cache, std::move(preact_grad),
                         static_cast<int>(spec.layers.size()) - 2, input_grad);
}

NetworkParams backward_from_preactivation(const NetworkSpec& spec, const NetworkParams& params,
                                          const ForwardCache& cache, const Tensor& preact_grad,
                                          Tensor* input_grad) {
    check_cache(spec, cache);
    if (!spec.layers.back().is_output())
        throw Error("backward_from_preactivation needs an output layer");
    return backward_walk(spec, params, cache, preact_grad,
                         static_cast<int>(spec.layers.size()) - 2, input_grad);
}

LossGrad hinge_loss(double activation, int target) {
    const double t = 2.0 * target - 1.0;
    const double margin = 1.0 - t * activation;
    if (margin > 0.0) return {margin, -t};
    return {0.0, 0.0};
}

BatchLoss hinge_on_preactivation(const Tensor& preact, const std::vector<int>& targets01) {
    const int n = preact.dim(0);
    if (preact.rank() != 2 || preact.dim(1) != 1 || static_cast<size_t>(n) != targets01.size())
        throw DimensionError("hinge loss expects N x 1 activations with N targets");
    BatchLoss out;
    out.grad = Tensor(preact.shape());
    for (int r = 0; r < n; ++r) {
        auto lg = hinge_loss(preact.at(r, 0), targets01[static_cast<size_t>(r)]);
        out.loss += lg.loss;
        out.grad.at(r, 0) = lg.grad / n;
    }
    out.loss /= n;
    return out;
}

BatchLoss bce_on_preactivation(const Tensor& preact, const std::vector<int>& targets01) {
    const int n = preact.dim(0);
    if (preact.rank() != 2 || preact.dim(1) != 1 || static_cast<size_t>(n) != targets01.size())
        throw DimensionError("bce loss expects N x 1 activations with N targets");
    BatchLoss out;
    out.grad = Tensor(preact.shape());
    for (int r = 0; r < n; ++r) {
        const double a = preact.at(r, 0);
        const double t = targets01[static_cast<size_t>(r)];
        const double y = 1.0 / (1.0 + std::exp(-a));
        // -log p with the numerically stable softplus form
        out.loss += std::max(a, 0.0) - a * t + std::log1p(std::exp(-std::abs(a)));
        out.grad.at(r, 0) = (y - t) / n;
    }
    out.loss /= n;
    return out;
}

BatchLoss multiclass_hinge_on_logits(const Tensor& logits, const std::vector<int>& labels) {
    const int n = logits.dim(0), k = logits.dim(1);
    if (static_cast<size_t>(n) != labels.size())
        throw DimensionError("hinge loss needs one label per row");
    BatchLoss out;
    out.grad = Tensor(logits.shape());
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < k; ++c) {
            const double y = c == labels[static_cast<size_t>(r)] ? 1.0 : -1.0;
            const double margin = 1.0 - y * logits.at(r, c);
            if (margin > 0.0) {
                out.loss += margin;
                out.grad.at(r, c) = -y / n;
            }
        }
    }
    out.loss /= n;
    return out;
}

BatchLoss cross_entropy_on_logits(const Tensor& logits, const std::vector<int>& labels) {
    const int n = logits.dim(0);
    if (static_cast<size_t>(n) != labels.size())
        throw DimensionError("cross entropy needs one label per row");
    BatchLoss out;
    Tensor probs = logits;
    softmax_rows(probs.mat());
    out.grad = probs;
    for (int r = 0; r < n; ++r) {
        const int y = labels[static_cast<size_t>(r)];
        out.loss += -std::log(std::max(probs.at(r, y), 1e-300));
        out.grad.at(r, y) -= 1.0;
    }
    out.grad.vec() /= n;
    out.loss /= n;
    return out;
}

void TrainConfig::validate() const {
    if (learning_rate <= 0) throw ConfigError("learning rate must be positive");
    if (patience < 1) throw ConfigError("patience must be >= 1");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (max_epochs < 1) throw ConfigError("max epochs must be >= 1");
    if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must be in [0,1)");
}

json TrainConfig::to_json() const {
    json j{{"learning_rate", learning_rate},
           {"momentum", momentum},
           {"batch_size", batch_size},
           {"max_epochs", max_epochs},
           {"patience", patience},
           {"improvement_threshold", improvement_threshold},
           {"seed", seed},
           {"loss", loss == LossKind::Hinge ? "hinge" : "cross_entropy"}};
    if (dropout_conv) j["dropout_conv"] = *dropout_conv;
    if (dropout_fc) j["dropout_fc"] = *dropout_fc;
    return j;
}

TrainConfig TrainConfig::from_json(const json& j) {
    TrainConfig c;
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.momentum = j.value("momentum", c.momentum);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.patience = j.value("patience", c.patience);
    c.improvement_threshold = j.value("improvement_threshold", c.improvement_threshold);
    c.seed = j.value("seed", c.seed);
    std::string loss = j.value("loss", "cross_entropy");
    if (loss == "hinge")
        c.loss = LossKind::Hinge;
    else if (loss == "cross_entropy")
        c.loss = LossKind::CrossEntropy;
    else
        throw ConfigError("unknown loss kind '" + loss + "'");
    if (j.contains("dropout_conv")) c.dropout_conv = j.at("dropout_conv").get<double>();
    if (j.contains("dropout_fc")) c.dropout_fc = j.at("dropout_fc").get<double>();
    c.validate();
    return c;
}

NetworkSpec apply_dropout_overrides(const NetworkSpec& spec, const TrainConfig& config) {
    NetworkSpec out = spec;
    for (size_t i = 0; i < out.layers.size(); ++i) {
        if (out.layers[i].kind != LayerKind::Dropout) continue;
        const bool in_conv_part = static_cast<int>(i) < out.fc_split;
        if (in_conv_part && config.dropout_conv) out.layers[i].rate = *config.dropout_conv;
        if (!in_conv_part && config.dropout_fc) out.layers[i].rate = *config.dropout_fc;
    }
    return out;
}

void sgd_step(NetworkParams& params, const NetworkParams& grads, SgdState& state,
              double learning_rate, double momentum) {
    for (const auto& [idx, g] : grads.layers) {
        auto pit = params.layers.find(idx);
        if (pit == params.layers.end())
            throw DimensionError("gradient for unknown layer " + std::to_string(idx));
        LayerParams& p = pit->second;
        if (!p.w.same_shape(g.w) || !p.b.same_shape(g.b))
            throw DimensionError("gradient shape mismatch at layer " + std::to_string(idx));
        auto vit = state.velocity.find(idx);
        if (vit == state.velocity.end())
            vit = state.velocity.emplace(idx, LayerParams{Tensor(g.w.shape()), Tensor(g.b.shape())})
                      .first;
        LayerParams& v = vit->second;
        v.w.vec() = momentum * v.w.vec() + g.w.vec();
        v.b.vec() = momentum * v.b.vec() + g.b.vec();
        p.w.vec() -= learning_rate * v.w.vec();
        p.b.vec() -= learning_rate * v.b.vec();
    }
}

double classification_accuracy(const NetworkSpec& spec, const NetworkParams& params,
                               const LabeledImageSet& data, const std::vector<int>& indices) {
    if (indices.empty()) throw Error("accuracy over an empty index set");
    const bool sigmoid_head = spec.layers.back().kind == LayerKind::SigmoidOutput;
    Rng unused(0);
    int correct = 0;
    const int chunk = 128;
    for (size_t start = 0; start < indices.size(); start += chunk) {
        std::vector<int> batch(indices.begin() + static_cast<long>(start),
                               indices.begin() +
                                   static_cast<long>(std::min(indices.size(), start + chunk)));
        Tensor out = forward(spec, params, stack_images(data, batch), Mode::Eval, unused);
        for (int r = 0; r < out.dim(0); ++r) {
            int pred;
            if (sigmoid_head) {
                pred = out.at(r, 0) > 0.5 ? 1 : 0;
            } else {
                int arg = 0;
                for (int c2 = 1; c2 < out.dim(1); ++c2)
                    if (out.at(r, c2) > out.at(r, arg)) arg = c2;
                pred = arg;
            }
            if (pred == data.labels[static_cast<size_t>(batch[static_cast<size_t>(r)])]) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(indices.size());
}

TrainHistory train_classifier(const NetworkSpec& spec_in, NetworkParams& params,
                              const LabeledImageSet& data, const TrainConfig& config) {
    config.validate();
    const NetworkSpec spec = apply_dropout_overrides(spec_in, config);
    spec.validate();

    std::vector<int> train_idx = data.indices_of(Split::Train);
    std::vector<int> val_idx = data.indices_of(Split::Validation);
    if (train_idx.empty()) throw Error("training split is empty");
    if (val_idx.empty()) throw Error("validation split is empty");

    const bool softmax_head = spec.layers.back().kind == LayerKind::SoftmaxOutput;
    Rng rng = Rng(config.seed).derive("train_classifier");

    TrainHistory history;
    NetworkParams best = params;
    double best_val = -1.0;
    double stop_ref = -std::numeric_limits<double>::infinity();
    int epochs_since_improvement = 0;
    SgdState sgd;

    for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
        rng.shuffle(train_idx);
        double loss_sum = 0;
        size_t loss_count = 0;
        for (size_t start = 0; start < train_idx.size();
             start += static_cast<size_t>(config.batch_size)) {
            std::vector<int> batch(
                train_idx.begin() + static_cast<long>(start),
                train_idx.begin() +
                    static_cast<long>(std::min(train_idx.size(),
                                               start + static_cast<size_t>(config.batch_size))));
            std::vector<int> labels;
            labels.reserve(batch.size());
            for (int i : batch) labels.push_back(data.labels[static_cast<size_t>(i)]);

            ForwardCache cache;
            forward(spec, params, stack_images(data, batch), Mode::Train, rng, &cache);
            BatchLoss bl;
            if (softmax_head)
                bl = config.loss == LossKind::Hinge
                         ? multiclass_hinge_on_logits(cache.preactivation, labels)
                         : cross_entropy_on_logits(cache.preactivation, labels);
            else
                bl = config.loss == LossKind::Hinge
                         ? hinge_on_preactivation(cache.preactivation, labels)
                         : bce_on_preactivation(cache.preactivation, labels);
            NetworkParams grads = backward_from_preactivation(spec, params, cache, bl.grad);
            sgd_step(params, grads, sgd, config.learning_rate, config.momentum);
            loss_sum += bl.loss * static_cast<double>(batch.size());
            loss_count += batch.size();
        }

        const double val_acc = classification_accuracy(spec, params, data, val_idx);
        history.epochs.push_back(
            {epoch, loss_sum / static_cast<double>(loss_count), val_acc});

        if (val_acc > best_val) {
            best_val = val_acc;
            best = params;
            history.best_epoch = epoch;
        }
        if (val_acc > stop_ref + config.improvement_threshold) {
            stop_ref = std::max(stop_ref, val_acc);
            epochs_since_improvement = 0;
        } else {
            stop_ref = std::max(stop_ref, val_acc);
            ++epochs_since_improvement;
        }
        if (epochs_since_improvement >= config.patience) break;
    }

    params = std::move(best);
    history.best_val_accuracy = best_val;
    return history;
}

}  // namespace desk
