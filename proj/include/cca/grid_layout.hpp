#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "cca/errors.hpp"

namespace cca {

// Square visual token grid: side n, V = n*n tokens.
struct GridSpec {
    int side = 1;

    explicit GridSpec(int n) : side(n) { require(n >= 1, "GridSpec: side must be >= 1"); }

    int visual_count() const { return side * side; }

    // Rejects token counts that are not perfect squares.
    static GridSpec from_token_count(int v) {
        require(v >= 1, "GridSpec: token count must be >= 1");
        int n = int(std::lround(std::sqrt(double(v))));
        require(n * n == v, "GridSpec: visual token count " + std::to_string(v) +
                                " is not a perfect square");
        return GridSpec(n);
    }
};

enum class LayoutKind { Raster, ReverseRaster, Concentric };

inline const char* to_string(LayoutKind k) {
    switch (k) {
        case LayoutKind::Raster: return "raster";
        case LayoutKind::ReverseRaster: return "reverse-raster";
        case LayoutKind::Concentric: return "concentric";
    }
    throw internal_error("unknown LayoutKind");
}

inline LayoutKind layout_kind_from_string(const std::string& s) {
    if (s == "raster") return LayoutKind::Raster;
    if (s == "reverse-raster" || s == "reverse") return LayoutKind::ReverseRaster;
    if (s == "concentric") return LayoutKind::Concentric;
    throw input_error("unknown layout kind '" + s +
                      "' (expected raster, reverse-raster or concentric)");
}

// 0-based concentric ring of cell (r,c); ring 0 is the outermost frame.
inline int ring_index(int r, int c, int n) {
    require(n >= 1, "ring_index: side must be >= 1");
    require(r >= 0 && r < n && c >= 0 && c < n, "ring_index: cell out of range");
    return std::min(std::min(r, c), std::min(n - 1 - r, n - 1 - c));
}

// Number of concentric rings of an n-by-n grid.
inline int ring_count(int n) { return (n + 1) / 2; }

// Distinct position ids a layout assigns to the visual block.
inline int num_visual_positions(LayoutKind kind, const GridSpec& grid) {
    return kind == LayoutKind::Concentric ? ring_count(grid.side) : grid.visual_count();
}

// Position id per raster cell index r*n + c.
struct PositionLayout {
    LayoutKind kind = LayoutKind::Raster;
    GridSpec grid{1};
    int offset = 0;
    std::vector<int> positions;

    int at(int r, int c) const { return positions[std::size_t(r) * grid.side + c]; }
};

inline PositionLayout make_layout(LayoutKind kind, const GridSpec& grid, int offset) {
    require(offset >= 0, "make_layout: offset must be non-negative");
    const int n = grid.side;
    const int v = grid.visual_count();
    PositionLayout layout{kind, grid, offset, std::vector<int>(std::size_t(v))};
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c) {
            const int cell = r * n + c;
            switch (kind) {
                case LayoutKind::Raster: layout.positions[cell] = offset + cell; break;
                case LayoutKind::ReverseRaster: layout.positions[cell] = offset + v - 1 - cell; break;
                case LayoutKind::Concentric: layout.positions[cell] = offset + ring_index(r, c, n); break;
            }
        }
    }
    return layout;
}

// Multimodal sequence: P prefix text tokens, an n-by-n visual block, T >= 1
// instruction tokens, in that fixed order.
struct SequenceSpec {
    int prefix_len = 0;
    GridSpec grid{1};
    LayoutKind kind = LayoutKind::Raster;
    int instr_len = 1;

    SequenceSpec(int prefix, GridSpec g, LayoutKind k, int instr)
        : prefix_len(prefix), grid(g), kind(k), instr_len(instr) {
        require(prefix >= 0, "SequenceSpec: prefix_len must be >= 0");
        require(instr >= 1, "SequenceSpec: instr_len must be >= 1");
    }

    int total_len() const { return prefix_len + grid.visual_count() + instr_len; }
};

// Position id per sequence index, with segment boundaries (P, P+V).
struct PositionMap {
    std::vector<int> positions;
    int visual_begin = 0;
    int visual_end = 0;

    int size() const { return int(positions.size()); }
    int prefix_len() const { return visual_begin; }
    int visual_len() const { return visual_end - visual_begin; }
    int instr_len() const { return size() - visual_end; }

    bool is_prefix(int i) const { return i < visual_begin; }
    bool is_visual(int i) const { return i >= visual_begin && i < visual_end; }
    bool is_instruction(int i) const { return i >= visual_end; }
    bool is_text(int i) const { return !is_visual(i); }
};

inline void validate_position_map(const PositionMap& map) {
    const auto& p = map.positions;
    require(map.visual_begin >= 0 && map.visual_begin <= map.visual_end &&
                map.visual_end <= map.size(),
            "PositionMap: bad segment boundaries");
    for (int i = 1; i < map.visual_begin; ++i)
        require(p[i] > p[i - 1], "PositionMap: prefix positions must strictly increase");
    for (int i = map.visual_end + 1; i < map.size(); ++i)
        require(p[i] > p[i - 1], "PositionMap: instruction positions must strictly increase");
    if (map.visual_len() > 0) {
        const auto [vmin, vmax] =
            std::minmax_element(p.begin() + map.visual_begin, p.begin() + map.visual_end);
        if (map.visual_begin > 0)
            require(*vmin > p[map.visual_begin - 1],
                    "PositionMap: visual positions must exceed prefix positions");
        if (map.instr_len() > 0)
            require(p[map.visual_end] > *vmax,
                    "PositionMap: instruction positions must exceed visual positions");
    }
}

// Core composition rule. Prefix gets 0..P-1, the visual block gets the layout
// at offset P, instruction continues after the last visual position id.
// T = 0 is allowed here so visual-only maps (figure-style masks) can be built;
// SequenceSpec enforces T >= 1 for full multimodal sequences.
inline PositionMap make_position_map(int prefix_len, LayoutKind kind, const GridSpec& grid,
                                     int instr_len) {
    require(prefix_len >= 0, "make_position_map: prefix_len must be >= 0");
    require(instr_len >= 0, "make_position_map: instr_len must be >= 0");
    const int v = grid.visual_count();
    PositionMap map;
    map.visual_begin = prefix_len;
    map.visual_end = prefix_len + v;
    map.positions.reserve(std::size_t(prefix_len + v + instr_len));
    for (int i = 0; i < prefix_len; ++i) map.positions.push_back(i);
    const PositionLayout layout = make_layout(kind, grid, prefix_len);
    map.positions.insert(map.positions.end(), layout.positions.begin(), layout.positions.end());
    const int instr_start = prefix_len + num_visual_positions(kind, grid);
    for (int t = 0; t < instr_len; ++t) map.positions.push_back(instr_start + t);
    validate_position_map(map);
    return map;
}

inline PositionMap build_position_map(const SequenceSpec& seq) {
    return make_position_map(seq.prefix_len, seq.kind, seq.grid, seq.instr_len);
}

// Max over (instruction position - visual position) pairs.
inline int max_visual_instruction_distance(const PositionMap& map) {
    require(map.visual_len() > 0, "max_visual_instruction_distance: empty visual segment");
    require(map.instr_len() > 0, "max_visual_instruction_distance: empty instruction segment");
    const auto& p = map.positions;
    const int vmin = *std::min_element(p.begin() + map.visual_begin, p.begin() + map.visual_end);
    const int imax = *std::max_element(p.begin() + map.visual_end, p.end());
    return imax - vmin;
}

} // namespace cca
