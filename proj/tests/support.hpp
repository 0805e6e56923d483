#pragma once

// Shared oracles for the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "spire/train.hpp"

namespace spire::oracle {

struct GradientCheck {
    double max_rel_error = 0.0;
    std::string worst_block;
    std::size_t checked = 0;
};

/// Tiny model (8×8 images, width-8 networks) plus a 3-image batch.
struct TinyProblem {
    ModelConfig config;
    QGrid qgrid;
    std::vector<DiffractionImage> images;

    TinyProblem() {
        qgrid = build_qgrid(DetectorGeometry(8, 0.1 / 8, 0.2, 4.6));
        config.image_side = 8;
        config.stage_widths = {4, 8};
        config.blocks_per_stage = 1;
        config.stem_kernel = 3;
        config.siren_width = 8;
        config.omega0 = 3.0;
        config.q_scale = 1.0 / qgrid.max_norm();
        Rng rng = make_rng(3, 0);
        for (int k = 0; k < 3; ++k) {
            DiffractionImage im(8);
            for (auto& v : im.pixels) v = 5.0 * uniform01(rng);
            images.push_back(im);
        }
    }
};

/// Central differences (step h) of the batch loss against the analytic
/// gradient over `n_samples` evenly spread parameters. Relative error is
/// |fd − g| / max(|fd| + |g|, 1e-6).
inline GradientCheck check_gradient(const Model& model, std::vector<double> p,
                                    const std::vector<DiffractionImage>& images, const QGrid& qgrid,
                                    std::size_t n_samples, double h = 1e-5) {
    const auto ts = make_training_set<double>(images, 1.0);
    const auto q = Model::qgrid_matrix<double>(qgrid);
    std::vector<std::size_t> rows(images.size());
    for (std::size_t k = 0; k < rows.size(); ++k) rows[k] = k;
    const std::vector<int> px = ts.measured_pixels();
    std::vector<double> g(p.size(), 0.0);
    loss_and_grad<double>(model, p, ts, rows, px, g, q);
    const auto eval = [&](const std::vector<double>& x) {
        return loss_and_grad<double>(model, x, ts, rows, px, {}, q).loss;
    };
    GradientCheck out;
    const std::size_t stride = std::max<std::size_t>(1, p.size() / n_samples);
    for (std::size_t i = 0; i < p.size(); i += stride) {
        const double w = p[i];
        p[i] = w + h;
        const double lp = eval(p);
        p[i] = w - h;
        const double lm = eval(p);
        p[i] = w;
        const double fd = (lp - lm) / (2 * h);
        const double rel = std::abs(fd - g[i]) / std::max(1e-6, std::abs(fd) + std::abs(g[i]));
        if (rel > out.max_rel_error) {
            out.max_rel_error = rel;
            out.worst_block = model.layout().block_of(i).name;
        }
        ++out.checked;
    }
    return out;
}

/// Initialized parameters nudged off the symmetric starting point.
inline std::vector<double> perturbed_params(const Model& model, std::uint64_t seed) {
    auto p = model.init_params<double>(seed);
    Rng rng = make_rng(seed, 99);
    for (auto& v : p) v += 0.05 * (uniform01(rng) - 0.5);
    return p;
}

}  // namespace spire::oracle
