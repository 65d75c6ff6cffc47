#pragma once

#include "pamdp/diffcore/params.hpp"
#include "pamdp/random.hpp"

#include <cmath>
#include <span>
#include <string>
#include <vector>

namespace pamdp {

enum class Activation { Identity, ReLU, Tanh, Softmax };

struct MlpSpec {
    std::size_t input_dim = 1;
    std::vector<std::size_t> hidden_sizes;
    std::size_t output_dim = 1;
    Activation hidden_activation = Activation::ReLU;
    Activation output_activation = Activation::Identity;
};

inline Var activate(Var x, Activation act) {
    switch (act) {
        case Activation::Identity: return x;
        case Activation::ReLU: return ad::relu(x);
        case Activation::Tanh: return ad::tanh(x);
        case Activation::Softmax: return ad::softmax(x);
    }
    return x;
}

/// Fully connected network whose weights live in a caller-owned ParamSet.
/// Registers (W, b) per layer; W has shape (fan_in, fan_out).
class Mlp {
public:
    Mlp() = default;

    /// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); the last layer is further
    /// multiplied by `final_scale`.
    Mlp(MlpSpec spec, ParamSet& params, const std::string& prefix, Rng& rng,
        double final_scale = 1.0)
        : spec_(std::move(spec)), first_(params.count()) {
        if (spec_.input_dim == 0 || spec_.output_dim == 0) {
            throw ShapeError("MLP input and output dimensions must be positive");
        }
        std::size_t fan_in = spec_.input_dim;
        const std::size_t layers = spec_.hidden_sizes.size() + 1;
        for (std::size_t l = 0; l < layers; ++l) {
            const bool last = l + 1 == layers;
            const std::size_t fan_out = last ? spec_.output_dim : spec_.hidden_sizes[l];
            if (fan_out == 0) throw ShapeError("MLP hidden sizes must be positive");
            const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
            const double s = last ? final_scale : 1.0;
            Tensor w(fan_in, fan_out);
            for (double& v : w.values()) v = s * rng.uniform(-bound, bound);
            Tensor b(1, fan_out);
            for (double& v : b.values()) v = s * rng.uniform(-bound, bound);
            params.add(prefix + ".w" + std::to_string(l), std::move(w));
            params.add(prefix + ".b" + std::to_string(l), std::move(b));
            fan_in = fan_out;
        }
        count_ = params.count() - first_;
    }

    const MlpSpec& spec() const { return spec_; }
    std::size_t first_tensor() const { return first_; }
    std::size_t tensor_count() const { return count_; }

    /// `bound` is the full registry binding (as returned by bind()).
    Var forward(std::span<const Var> bound, Var x) const {
        if (x.cols() != spec_.input_dim) {
            throw ShapeError("MLP input has " + std::to_string(x.cols()) + " columns, expected " +
                             std::to_string(spec_.input_dim));
        }
        Var h = x;
        const std::size_t layers = count_ / 2;
        for (std::size_t l = 0; l < layers; ++l) {
            h = ad::linear(h, bound[first_ + 2 * l], bound[first_ + 2 * l + 1]);
            h = activate(h, l + 1 == layers ? spec_.output_activation : spec_.hidden_activation);
        }
        return h;
    }

    /// Forward pass without a tape, for acting. Same arithmetic as forward().
    Tensor evaluate(const ParamSet& params, const Tensor& x) const {
        if (x.cols() != spec_.input_dim) {
            throw ShapeError("MLP input has " + std::to_string(x.cols()) + " columns, expected " +
                             std::to_string(spec_.input_dim));
        }
        RowMatrix h = x.mat();
        const std::size_t layers = count_ / 2;
        for (std::size_t l = 0; l < layers; ++l) {
            const auto w = params.tensor(first_ + 2 * l).mat();
            const auto b = params.tensor(first_ + 2 * l + 1).mat();
            RowMatrix z = h * w;
            z.rowwise() += b.row(0);
            const Activation act = l + 1 == layers ? spec_.output_activation : spec_.hidden_activation;
            switch (act) {
                case Activation::Identity: break;
                case Activation::ReLU: z = z.cwiseMax(0.0); break;
                case Activation::Tanh: z = z.array().tanh(); break;
                case Activation::Softmax:
                    for (Eigen::Index r = 0; r < z.rows(); ++r) {
                        z.row(r).array() -= z.row(r).maxCoeff();
                        z.row(r) = z.row(r).array().exp();
                        z.row(r) /= z.row(r).sum();
                    }
                    break;
            }
            h = std::move(z);
        }
        Tensor out(h);
        if (!out.all_finite()) throw NonFiniteError("non-finite network output");
        return out;
    }

private:
    MlpSpec spec_;
    std::size_t first_ = 0;
    std::size_t count_ = 0;
};

}  // namespace pamdp
