#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

namespace pamdp {

/// Closed interval for one continuous parameter dimension.
struct Bounds {
    double low = -1.0;
    double high = 1.0;

    double width() const { return high - low; }
    double clamp(double x) const { return x < low ? low : (x > high ? high : x); }
    bool contains(double x) const { return x >= low && x <= high; }

    /// (-1, 1) -> [low, high]
    double from_unit(double y) const { return low + 0.5 * (y + 1.0) * (high - low); }
    /// [low, high] -> [-1, 1]
    double to_unit(double x) const { return 2.0 * (x - low) / (high - low) - 1.0; }

    bool operator==(const Bounds&) const = default;
};

/// Joint action (a, x): a discrete index and that action's continuous parameters.
struct ParamAction {
    std::size_t discrete = 0;
    std::vector<double> params;

    bool operator==(const ParamAction&) const = default;
};

}  // namespace pamdp
