#pragma once

#include <cmath>
#include <vector>

#include "carformer/errors.hpp"
#include "carformer/tensor.hpp"

namespace cf {

inline constexpr int kMileageTableSize = 300;  // km, window bound
inline constexpr double kRopeTheta0 = 1e4;

// Event-type embedding: row i = table[token_i]; gradient flows only to the
// selected rows.
inline Tensor event_type_embed(const Tensor& table, const std::vector<int>& tokens) {
    return rows_embed(table, tokens);
}

// Absolute time embedding, built on the fly: row i = t'_i * w + b.
inline Tensor time_embed(const std::vector<double>& t_scaled, const Tensor& w,
                         const Tensor& b) {
    const int L = static_cast<int>(t_scaled.size());
    Tensor tcol = Tensor::from({L, 1}, std::vector<double>(t_scaled));
    Tensor wrow = w;  // expected shape [1 x d]
    if (wrow->rows() != 1)
        throw ShapeError("time_embed: weight must be a row vector");
    return broadcast_add_row(matmul(tcol, wrow), b);
}

// Mileage lookup embedding: row i = table[floor(m_i)], clamped to the last
// row for values at or beyond the table size.
inline Tensor mileage_embed(const Tensor& table, const std::vector<double>& km) {
    std::vector<int> ids;
    ids.reserve(km.size());
    for (double m : km) {
        if (m < 0.0) throw DataError("mileage_embed: negative mileage");
        int idx = static_cast<int>(std::floor(m));
        ids.push_back(std::min(idx, table->rows() - 1));
    }
    return rows_embed(table, ids);
}

// rope_rotate lives in tensor.hpp; re-exported here for discoverability.

}  // namespace cf
