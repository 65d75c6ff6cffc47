#pragma once

#include "pamdp/diffcore/graph.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

namespace pamdp {

/// Registry of trainable tensors. The flat-vector ordering is registration order,
/// row-major within each tensor.
class ParamSet {
public:
    std::size_t add(std::string name, Tensor value) {
        names_.push_back(std::move(name));
        tensors_.push_back(std::move(value));
        return tensors_.size() - 1;
    }

    std::size_t count() const { return tensors_.size(); }
    const std::string& name(std::size_t i) const { return names_.at(i); }
    const Tensor& tensor(std::size_t i) const { return tensors_.at(i); }
    Tensor& tensor(std::size_t i) { return tensors_.at(i); }

    /// Total number of scalars.
    std::size_t size() const {
        std::size_t n = 0;
        for (const auto& t : tensors_) n += t.size();
        return n;
    }

    /// Offset of tensor i within the flat vector.
    std::size_t offset(std::size_t i) const {
        std::size_t n = 0;
        for (std::size_t k = 0; k < i; ++k) n += tensors_[k].size();
        return n;
    }

    Vector flat() const {
        Vector out(static_cast<Eigen::Index>(size()));
        Eigen::Index pos = 0;
        for (const auto& t : tensors_) {
            for (double v : t.values()) out[pos++] = v;
        }
        return out;
    }

    void assign(const Vector& flat) {
        if (static_cast<std::size_t>(flat.size()) != size()) {
            throw ShapeError("ParamSet::assign: expected " + std::to_string(size()) + " values, got " +
                             std::to_string(flat.size()));
        }
        Eigen::Index pos = 0;
        for (auto& t : tensors_) {
            for (double& v : t.values()) v = flat[pos++];
        }
    }

    /// target <- tau * source + (1 - tau) * target
    void soft_update(const ParamSet& source, double tau) {
        if (source.count() != count()) throw ShapeError("soft_update: registry mismatch");
        for (std::size_t i = 0; i < tensors_.size(); ++i) {
            detail_check(tensors_[i], source.tensors_[i]);
            tensors_[i].mat() = tau * source.tensors_[i].mat() + (1.0 - tau) * tensors_[i].mat();
        }
    }

    nlohmann::json layout() const {
        auto arr = nlohmann::json::array();
        for (std::size_t i = 0; i < tensors_.size(); ++i) {
            arr.push_back({{"name", names_[i]}, {"shape", {tensors_[i].rows(), tensors_[i].cols()}}});
        }
        return arr;
    }

    bool operator==(const ParamSet&) const = default;

private:
    static void detail_check(const Tensor& a, const Tensor& b) {
        if (!a.same_shape(b)) throw ShapeError("soft_update: tensor shape mismatch");
    }

    std::vector<std::string> names_;
    std::vector<Tensor> tensors_;
};

/// Records every tensor of `params` as a leaf of `g`, in registry order.
inline std::vector<Var> bind(Graph& g, const ParamSet& params) {
    std::vector<Var> out;
    out.reserve(params.count());
    for (std::size_t i = 0; i < params.count(); ++i) out.push_back(g.leaf(params.tensor(i)));
    return out;
}

// Checkpoint layout: one line of JSON (layout plus caller metadata), a newline,
// then every parameter as little-endian float64 in flat order.
inline void save_checkpoint(const std::string& path, const ParamSet& params,
                            const nlohmann::json& meta = nlohmann::json::object()) {
    nlohmann::json header = {{"format", "pamdp-params-v1"},
                             {"count", params.size()},
                             {"tensors", params.layout()},
                             {"meta", meta}};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    out << header.dump() << '\n';
    const Vector flat = params.flat();
    for (Eigen::Index i = 0; i < flat.size(); ++i) {
        std::uint64_t bits = std::bit_cast<std::uint64_t>(flat[i]);
        if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
        char buf[8];
        std::memcpy(buf, &bits, 8);
        out.write(buf, 8);
    }
    if (!out) throw std::runtime_error("failed writing checkpoint: " + path);
}

/// Loads values into `params`, whose layout must match the stored one. Returns the header.
inline nlohmann::json load_checkpoint(const std::string& path, ParamSet& params) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    std::string line;
    std::getline(in, line);
    auto header = nlohmann::json::parse(line);
    if (header.value("format", "") != "pamdp-params-v1") {
        throw std::runtime_error("unrecognized checkpoint format in " + path);
    }
    if (header.at("tensors") != params.layout()) {
        throw ShapeError("checkpoint layout does not match the model: " + path);
    }
    Vector flat(static_cast<Eigen::Index>(params.size()));
    for (Eigen::Index i = 0; i < flat.size(); ++i) {
        char buf[8];
        in.read(buf, 8);
        if (!in) throw std::runtime_error("truncated checkpoint: " + path);
        std::uint64_t bits;
        std::memcpy(&bits, buf, 8);
        if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
        flat[i] = std::bit_cast<double>(bits);
    }
    params.assign(flat);
    return header;
}

}  // namespace pamdp
