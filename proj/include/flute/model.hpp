#pragma once

#include "flute/numerics.hpp"

namespace flute {

/// Shared representation B (d x k) and stacked heads W (k x M); column i
/// of W is client i's head.
struct FactoredModel {
    Matrix b;
    Matrix w;

    Index d() const { return b.rows(); }
    Index k() const { return b.cols(); }
    Index clients() const { return w.cols(); }

    bool finite() const { return b.allFinite() && w.allFinite(); }

    void check_shapes() const {
        if (b.cols() != w.rows()) {
            throw ShapeError("FactoredModel: B has " + std::to_string(b.cols()) + " columns but W has " +
                             std::to_string(w.rows()) + " rows");
        }
    }
};

}  // namespace flute
