#pragma once

#include <cstdint>
#include <vector>

#include "cca/errors.hpp"
#include "cca/grid_layout.hpp"

namespace cca {

// L-by-L visibility matrix: allowed(i,j) means query index i may attend key
// index j. Boolean set semantics; the attention kernel converts to -inf bias.
struct AttentionMask {
    int size = 0;
    std::vector<std::uint8_t> allowed; // row-major, size*size

    AttentionMask() = default;
    explicit AttentionMask(int n) : size(n), allowed(std::size_t(n) * n, 0) {
        require(n >= 1, "AttentionMask: size must be >= 1");
    }

    bool at(int i, int j) const { return allowed[std::size_t(i) * size + j] != 0; }
    void set(int i, int j, bool v) { allowed[std::size_t(i) * size + j] = v ? 1 : 0; }

    std::size_t visible_count() const {
        std::size_t k = 0;
        for (auto b : allowed) k += b;
        return k;
    }

    bool operator==(const AttentionMask& other) const = default;
};

// Lower-triangular (including diagonal) 1-D causal mask.
inline AttentionMask standard_causal_mask(int length) {
    require(length >= 1, "standard_causal_mask: length must be >= 1");
    AttentionMask mask(length);
    for (int i = 0; i < length; ++i)
        for (int j = 0; j <= i; ++j) mask.set(i, j, true);
    return mask;
}

// Concentric causal mask: allowed(i,j) <=> position(j) <= position(i).
// Reduces to the standard causal mask when positions are a raster bijection;
// same-ring visual tokens are mutually visible, inner rings see outer rings.
inline AttentionMask cca_mask(const PositionMap& map) {
    validate_position_map(map);
    const int length = map.size();
    require(length >= 1, "cca_mask: empty position map");
    AttentionMask mask(length);
    for (int i = 0; i < length; ++i)
        for (int j = 0; j < length; ++j)
            mask.set(i, j, map.positions[j] <= map.positions[i]);
    return mask;
}

struct MaskViolation {
    enum class Kind { Reflexivity, TextCausality, PositionRule };
    Kind kind;
    int query;
    int key;

    bool operator==(const MaskViolation&) const = default;
};

struct MaskReport {
    std::vector<MaskViolation> violations;
    bool ok() const { return violations.empty(); }
};

// Checks reflexivity, text causality and the position rule; lists every
// offending (i,j). An empty list certifies the mask against the map.
inline MaskReport mask_report(const AttentionMask& mask, const PositionMap& map) {
    require(mask.size == map.size(), "mask_report: mask/map length mismatch");
    MaskReport report;
    const int length = mask.size;
    for (int i = 0; i < length; ++i) {
        if (!mask.at(i, i))
            report.violations.push_back({MaskViolation::Kind::Reflexivity, i, i});
        for (int j = 0; j < length; ++j) {
            if (map.is_text(i) && map.is_text(j) && mask.at(i, j) && j > i)
                report.violations.push_back({MaskViolation::Kind::TextCausality, i, j});
            const bool rule = map.positions[j] <= map.positions[i];
            if (mask.at(i, j) != rule)
                report.violations.push_back({MaskViolation::Kind::PositionRule, i, j});
        }
    }
    return report;
}

} // namespace cca
