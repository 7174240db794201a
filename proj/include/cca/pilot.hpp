#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <future>
#include <optional>
#include <string>
#include <vector>

#include "cca/errors.hpp"
#include "cca/grid_layout.hpp"
#include "cca/mask.hpp"
#include "cca/microformer.hpp"
#include "cca/rng.hpp"

namespace cca {

// Symbolic grid-presence episode: the grid is background everywhere except at
// most one cell, the query names a target symbol, the label says whether that
// symbol is actually placed. Token ids: 0 = background, 1..S-1 = targets,
// S = "yes", S+1 = "no"; model vocab is S+2.
struct Episode {
    std::vector<int> grid_tokens;
    int query = 1;
    bool label_yes = false;
    std::optional<std::pair<int, int>> placement;
};

inline int yes_token(int symbols) { return symbols; }
inline int no_token(int symbols) { return symbols + 1; }
inline int pilot_vocab(int symbols) { return symbols + 2; }

// Deterministic presence dataset. Positives place the queried symbol at a
// uniform cell; negatives are split evenly between empty grids and grids whose
// placed symbol differs from the query.
inline std::vector<Episode> gen_dataset(const GridSpec& grid, int symbols, long count,
                                        double positive_fraction, std::uint64_t seed) {
    require(symbols >= 2, "gen_dataset: need at least background + 1 target symbol");
    require(count >= 1, "gen_dataset: count must be >= 1");
    require(positive_fraction >= 0.0 && positive_fraction <= 1.0,
            "gen_dataset: positive_fraction must be in [0,1]");
    const int n = grid.side;
    const int v = grid.visual_count();
    Rng rng(seed);
    std::vector<Episode> out;
    out.reserve(std::size_t(count));
    for (long e = 0; e < count; ++e) {
        Episode ep;
        ep.grid_tokens.assign(std::size_t(v), 0);
        if (rng.bernoulli(positive_fraction)) {
            const int cell = int(rng.uniform_int(0, v - 1));
            const int sym = int(rng.uniform_int(1, symbols - 1));
            ep.grid_tokens[std::size_t(cell)] = sym;
            ep.query = sym;
            ep.label_yes = true;
            ep.placement = {cell / n, cell % n};
        } else if (rng.bernoulli(0.5)) {
            ep.query = int(rng.uniform_int(1, symbols - 1)); // empty grid
            ep.label_yes = false;
        } else {
            const int cell = int(rng.uniform_int(0, v - 1));
            const int placed = int(rng.uniform_int(1, symbols - 1));
            int query = int(rng.uniform_int(1, symbols - 2));
            if (query >= placed) ++query; // uniform over symbols != placed
            ep.grid_tokens[std::size_t(cell)] = placed;
            ep.query = query;
            ep.label_yes = false;
            ep.placement = {cell / n, cell % n};
        }
        out.push_back(std::move(ep));
    }
    return out;
}

// Sequence layout: V grid tokens in raster cell order, then the query token.
// The answer is predicted at the query position.
inline TrainExample make_example(const Episode& ep, int symbols) {
    TrainExample ex;
    ex.tokens = ep.grid_tokens;
    ex.tokens.push_back(ep.query);
    ex.answer_pos = int(ep.grid_tokens.size());
    ex.label = ep.label_yes ? yes_token(symbols) : no_token(symbols);
    return ex;
}

inline std::vector<TrainExample> make_examples(std::span<const Episode> episodes, int symbols) {
    std::vector<TrainExample> out;
    out.reserve(episodes.size());
    for (const auto& ep : episodes) out.push_back(make_example(ep, symbols));
    return out;
}

// Greedy yes/no answer: argmax over the two answer-token logits at the answer
// position; ties resolve to "yes" (lower token id).
inline bool predict_yes(const MicroModel& model, const TrainExample& ex, const PositionMap& map,
                        const AttentionMask& mask, int symbols) {
    const ForwardResult fw = forward(model, ex.tokens, map, mask);
    const auto row = fw.row(ex.answer_pos);
    return row[std::size_t(yes_token(symbols))] >= row[std::size_t(no_token(symbols))];
}

inline double evaluate_accuracy(const MicroModel& model, std::span<const TrainExample> dataset,
                                const PositionMap& map, const AttentionMask& mask, int symbols) {
    require(!dataset.empty(), "evaluate_accuracy: empty dataset");
    long correct = 0;
    for (const auto& ex : dataset) {
        const bool yes = predict_yes(model, ex, map, mask, symbols);
        const bool want_yes = ex.label == yes_token(symbols);
        if (yes == want_yes) ++correct;
    }
    return double(correct) / double(dataset.size());
}

// Per-cell (correct, total) counts of positive probes placed at that cell.
struct Heatmap {
    int side = 0;
    std::vector<long> correct;
    std::vector<long> total;

    explicit Heatmap(int n)
        : side(n), correct(std::size_t(n) * n, 0), total(std::size_t(n) * n, 0) {}

    double accuracy(int r, int c) const {
        const std::size_t cell = std::size_t(r) * side + c;
        require(total[cell] > 0, "Heatmap: empty cell");
        return double(correct[cell]) / double(total[cell]);
    }
};

struct HeatmapStats {
    double row_corr = 0.0;       // Spearman rho of (row index, row mean accuracy)
    double ring_spread = 0.0;    // max - min of per-ring mean accuracy
    double top_bottom_gap = 0.0; // bottom-rows mean - top-rows mean
};

namespace detail {
// Average ranks (1-based, ties averaged).
inline std::vector<double> average_ranks(std::span<const double> values) {
    const std::size_t n = values.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
        const double r = (double(i + 1) + double(j + 1)) / 2.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

// Pearson correlation; 0 when either side is constant.
inline double pearson(std::span<const double> a, std::span<const double> b) {
    const std::size_t n = a.size();
    double ma = 0.0;
    double mb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= double(n);
    mb /= double(n);
    double sab = 0.0;
    double saa = 0.0;
    double sbb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}
} // namespace detail

// Rows are 0-indexed from the top, matching raster order. The top/bottom gap
// compares the bottom floor(n/2) rows against the top floor(n/2) rows; for
// odd n the middle row belongs to neither group.
inline HeatmapStats heatmap_stats(const Heatmap& h) {
    const int n = h.side;
    for (long t : h.total) require(t > 0, "heatmap_stats: cell with zero total");

    std::vector<double> row_mean(std::size_t(n), 0.0);
    for (int r = 0; r < n; ++r) {
        double acc = 0.0;
        for (int c = 0; c < n; ++c) acc += h.accuracy(r, c);
        row_mean[std::size_t(r)] = acc / n;
    }

    HeatmapStats stats;
    std::vector<double> row_index(std::size_t(n));
    for (int r = 0; r < n; ++r) row_index[std::size_t(r)] = r;
    stats.row_corr = detail::pearson(detail::average_ranks(row_index),
                                     detail::average_ranks(row_mean));

    const int rings = ring_count(n);
    std::vector<double> ring_sum(std::size_t(rings), 0.0);
    std::vector<long> ring_cells(std::size_t(rings), 0);
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) {
            const int k = ring_index(r, c, n);
            ring_sum[std::size_t(k)] += h.accuracy(r, c);
            ring_cells[std::size_t(k)] += 1;
        }
    double ring_min = ring_sum[0] / double(ring_cells[0]);
    double ring_max = ring_min;
    for (int k = 1; k < rings; ++k) {
        const double m = ring_sum[std::size_t(k)] / double(ring_cells[std::size_t(k)]);
        ring_min = std::min(ring_min, m);
        ring_max = std::max(ring_max, m);
    }
    stats.ring_spread = ring_max - ring_min;

    const int half = n / 2;
    if (half > 0) {
        double top = 0.0;
        double bottom = 0.0;
        for (int r = 0; r < half; ++r) {
            top += row_mean[std::size_t(r)];
            bottom += row_mean[std::size_t(n - 1 - r)];
        }
        stats.top_bottom_gap = (bottom - top) / half;
    }
    return stats;
}

struct PilotConfig {
    GridSpec grid{4};
    int symbols = 8;
    int d_model = 32;
    int heads = 2;
    int layers = 2;
    double rope_base = 10000.0;
    TrainConfig hyper{};
    long train_count = 4096;
    int eval_per_cell = 16;
};

struct PilotRun {
    LayoutKind kind = LayoutKind::Raster;
    std::uint64_t seed = 0;
    Heatmap heatmap{1};
    HeatmapStats stats{};
    double train_accuracy = 0.0;
    double final_loss = 0.0;
};

namespace detail {

inline PilotRun run_pilot_single(const PilotConfig& cfg, LayoutKind kind, std::uint64_t seed) {
    const int n = cfg.grid.side;
    const int v = cfg.grid.visual_count();
    // Streams: train data / eval probes are independent of the layout kind, so
    // runs within one seed are paired across kinds (same data, same init).
    const std::vector<Episode> train_eps =
        gen_dataset(cfg.grid, cfg.symbols, cfg.train_count, 0.5, derive_seed(seed, 0xDA7A));
    const std::vector<TrainExample> train_set = make_examples(train_eps, cfg.symbols);

    const PositionMap map = make_position_map(0, kind, cfg.grid, 1);
    const AttentionMask mask = cca_mask(map);

    ModelConfig mc;
    mc.layers = cfg.layers;
    mc.heads = cfg.heads;
    mc.d_model = cfg.d_model;
    mc.vocab = pilot_vocab(cfg.symbols);
    mc.rope_base = cfg.rope_base;
    mc.seed = derive_seed(seed, 0x5EED);

    PilotRun run;
    run.kind = kind;
    run.seed = seed;
    try {
        TrainResult tr = train(mc, train_set, map, mask, cfg.hyper);
        run.final_loss = tr.loss_history.empty() ? 0.0 : tr.loss_history.back();
        run.train_accuracy = evaluate_accuracy(tr.model, train_set, map, mask, cfg.symbols);

        Heatmap heat(n);
        Rng eval_rng(derive_seed(seed, 0xE7A1));
        for (int cell = 0; cell < v; ++cell) {
            for (int t = 0; t < cfg.eval_per_cell; ++t) {
                Episode ep;
                ep.grid_tokens.assign(std::size_t(v), 0);
                const int sym = int(eval_rng.uniform_int(1, cfg.symbols - 1));
                ep.grid_tokens[std::size_t(cell)] = sym;
                ep.query = sym;
                ep.label_yes = true;
                ep.placement = {cell / n, cell % n};
                const TrainExample ex = make_example(ep, cfg.symbols);
                heat.total[std::size_t(cell)] += 1;
                if (predict_yes(tr.model, ex, map, mask, cfg.symbols))
                    heat.correct[std::size_t(cell)] += 1;
            }
        }
        run.stats = heatmap_stats(heat);
        run.heatmap = std::move(heat);
    } catch (const divergence_error& e) {
        throw divergence_error(std::string("pilot run kind=") + to_string(kind) + " seed=" +
                                   std::to_string(seed) + ": " + e.what(),
                               e.step());
    }
    return run;
}

} // namespace detail

// Trains and evaluates one model per (kind, seed). Runs are independent and
// execute in parallel; results come back in kinds-major, seeds-minor order.
inline std::vector<PilotRun> run_pilot(std::span<const LayoutKind> kinds, const PilotConfig& cfg,
                                       std::span<const std::uint64_t> seeds,
                                       bool parallel = true) {
    require(!kinds.empty(), "run_pilot: no layout kinds");
    require(!seeds.empty(), "run_pilot: no seeds");
    require(cfg.eval_per_cell >= 1, "run_pilot: eval_per_cell must be >= 1");
    std::vector<PilotRun> runs;
    if (parallel) {
        std::vector<std::future<PilotRun>> futures;
        for (LayoutKind kind : kinds)
            for (std::uint64_t seed : seeds)
                futures.push_back(std::async(std::launch::async, detail::run_pilot_single, cfg,
                                             kind, seed));
        runs.reserve(futures.size());
        for (auto& f : futures) runs.push_back(f.get());
    } else {
        for (LayoutKind kind : kinds)
            for (std::uint64_t seed : seeds)
                runs.push_back(detail::run_pilot_single(cfg, kind, seed));
    }
    return runs;
}

inline double median(std::vector<double> xs) {
    require(!xs.empty(), "median: empty sample");
    std::sort(xs.begin(), xs.end());
    const std::size_t n = xs.size();
    return n % 2 == 1 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

} // namespace cca
