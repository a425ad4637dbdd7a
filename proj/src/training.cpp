// Copyright (c) 2026 The fedpeft Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "fedpeft/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "fedpeft/byteio.hpp"
#include "fedpeft/errors.hpp"

namespace fedpeft {

namespace {

constexpr std::uint32_t kSiteVersion = 1;

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

struct Ellipsoid {
    double cx, cy, cz;  // pixels / slice index
    double rx, ry, rz;
    double angle;
    double intensity;
    std::uint8_t label;

    // Cross-section test at slice z.
    bool contains(double x, double y, double z) const {
        const double dz = (z - cz) / rz;
        const double budget = 1.0 - dz * dz;
        if (budget <= 0.0) return false;
        const double c = std::cos(angle), s = std::sin(angle);
        const double u = ((x - cx) * c + (y - cy) * s) / rx;
        const double v = (-(x - cx) * s + (y - cy) * c) / ry;
        return u * u + v * v <= budget;
    }
};

Sample make_sample(const SiteParams& p, std::size_t size, std::size_t slices, std::size_t num_classes, Rng& rng) {
    const double side = static_cast<double>(size);
    const double mid = static_cast<double>(slices / 2);
    std::vector<Ellipsoid> bodies;
    const std::uint32_t count = 1 + static_cast<std::uint32_t>(rng() % p.max_bodies);
    for (std::uint32_t b = 0; b < count; ++b) {
        Ellipsoid e{};
        e.cx = uniform(rng, p.center_x_lo, p.center_x_hi) * side;
        e.cy = uniform(rng, p.center_y_lo, p.center_y_hi) * side;
        e.cz = mid + uniform(rng, -0.5, 0.5);
        e.rx = uniform(rng, p.radius_lo, p.radius_hi) * side;
        e.ry = uniform(rng, p.radius_lo, p.radius_hi) * side;
        e.rz = uniform(rng, 1.5, 3.5);
        e.angle = uniform(rng, 0.0, std::numbers::pi);
        e.intensity = uniform(rng, p.intensity_lo, p.intensity_hi);
        e.label = 1;
        bodies.push_back(e);
    }
    // Extra classes sit nested inside the first body, brighter.
    for (std::size_t c = 2; c < num_classes; ++c) {
        const Ellipsoid& host = bodies.front();
        Ellipsoid e = host;
        const double shrink = 0.5 / static_cast<double>(c - 1);
        e.rx = host.rx * shrink;
        e.ry = host.ry * shrink;
        e.rz = std::max(1.2, host.rz * 0.75);
        e.cx = host.cx + uniform(rng, -0.25, 0.25) * host.rx;
        e.cy = host.cy + uniform(rng, -0.25, 0.25) * host.ry;
        e.intensity = host.intensity * (1.0 + 0.5 * static_cast<double>(c - 1));
        e.label = static_cast<std::uint8_t>(c);
        bodies.push_back(e);
    }

    Sample s;
    s.volume = Matrix(slices, size * size);
    s.mask.assign(size * size, 0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (std::size_t z = 0; z < slices; ++z) {
        for (std::size_t i = 0; i < size; ++i) {
            for (std::size_t j = 0; j < size; ++j) {
                const double x = static_cast<double>(j) + 0.5;
                const double y = static_cast<double>(i) + 0.5;
                double value = 0.0;
                std::uint8_t label = 0;
                for (const auto& e : bodies) {
                    if (e.contains(x, y, static_cast<double>(z))) {
                        value = e.intensity;
                        label = e.label;
                    }
                }
                if (p.noise > 0.0) value += p.noise * gauss(rng);
                s.volume(z, i * size + j) = static_cast<double>(static_cast<float>(value));
                if (z == slices / 2) s.mask[i * size + j] = label;
            }
        }
    }
    return s;
}

void write_params(io::ByteWriter& out, const SiteParams& p) {
    out.u32(p.site_id);
    for (double v : {p.center_x_lo, p.center_x_hi, p.center_y_lo, p.center_y_hi, p.radius_lo, p.radius_hi,
                     p.intensity_lo, p.intensity_hi, p.noise})
        out.f64(v);
    out.u32(p.max_bodies);
}

SiteParams read_params(io::ByteReader& in) {
    SiteParams p;
    p.site_id = in.u32();
    for (double* v : {&p.center_x_lo, &p.center_x_hi, &p.center_y_lo, &p.center_y_hi, &p.radius_lo, &p.radius_hi,
                      &p.intensity_lo, &p.intensity_hi, &p.noise})
        *v = in.f64();
    p.max_bodies = in.u32();
    return p;
}

}  // namespace

// ---------------------------------------------------------------- data

void SiteParams::validate() const {
    auto range = [&](double lo, double hi, const char* what) {
        if (!(lo < hi)) throw ConfigError(std::string("site params: empty ") + what + " range");
    };
    range(center_x_lo, center_x_hi, "center_x");
    range(center_y_lo, center_y_hi, "center_y");
    range(radius_lo, radius_hi, "radius");
    range(intensity_lo, intensity_hi, "intensity");
    if (intensity_lo <= 0.0) throw ConfigError("site params: intensity must stay above the zero background");
    if (radius_lo <= 0.0) throw ConfigError("site params: radius must be positive");
    if (!(noise >= 0.0)) throw ConfigError("site params: noise must be >= 0");
    if (max_bodies == 0) throw ConfigError("site params: max_bodies must be >= 1");
}

SiteParams default_site(std::size_t index, std::size_t num_sites) {
    SiteParams p;
    p.site_id = static_cast<std::uint32_t>(index);
    const double n = static_cast<double>(std::max<std::size_t>(num_sites, 1));
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(index) / n + std::numbers::pi / 4.0;
    const double ring = num_sites > 1 ? 0.08 : 0.0;
    const double cx = 0.5 + ring * std::cos(angle);
    const double cy = 0.5 + ring * std::sin(angle);
    const double box = 0.10;
    p.center_x_lo = cx - box;
    p.center_x_hi = cx + box;
    p.center_y_lo = cy - box;
    p.center_y_hi = cy + box;
    // Mild per-site shifts in size and contrast.
    const double shift = static_cast<double>(index % 3);
    p.radius_lo = 0.14 + 0.02 * shift;
    p.radius_hi = p.radius_lo + 0.1;
    p.intensity_lo = 0.5 + 0.1 * shift;
    p.intensity_hi = p.intensity_lo + 0.4;
    p.noise = 0.15;
    return p;
}

SyntheticSite gen_site(std::uint64_t seed, const SiteParams& params, std::size_t n_train, std::size_t n_test,
                       std::size_t image_size, std::size_t slices, std::size_t num_classes) {
    params.validate();
    if (n_train == 0 || n_test == 0) throw ConfigError("gen_site: n_train and n_test must be >= 1");
    if (image_size == 0 || slices == 0) throw ConfigError("gen_site: empty geometry");
    if (num_classes < 2 || num_classes > 255) throw ConfigError("gen_site: num_classes must be in [2, 255]");
    SyntheticSite site;
    site.params = params;
    site.seed = seed;
    site.image_size = image_size;
    site.slices = slices;
    site.num_classes = num_classes;
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), params.site_id,
                      0x51'7E5u};
    Rng rng(seq);
    for (std::size_t i = 0; i < n_train; ++i) site.train.push_back(make_sample(params, image_size, slices, num_classes, rng));
    for (std::size_t i = 0; i < n_test; ++i) site.test.push_back(make_sample(params, image_size, slices, num_classes, rng));
    return site;
}

std::pair<double, double> mean_foreground_centroid(std::span<const Sample> samples, std::size_t image_size) {
    double sx = 0.0, sy = 0.0;
    std::size_t used = 0;
    for (const auto& s : samples) {
        double x = 0.0, y = 0.0;
        std::size_t n = 0;
        for (std::size_t k = 0; k < s.mask.size(); ++k) {
            if (s.mask[k] == 0) continue;
            x += static_cast<double>(k % image_size) + 0.5;
            y += static_cast<double>(k / image_size) + 0.5;
            ++n;
        }
        if (n == 0) continue;
        sx += x / static_cast<double>(n);
        sy += y / static_cast<double>(n);
        ++used;
    }
    if (used == 0) return {0.0, 0.0};
    return {sx / static_cast<double>(used), sy / static_cast<double>(used)};
}

std::vector<std::uint8_t> serialize_site(const SyntheticSite& site) {
    io::ByteWriter out;
    out.raw(std::string_view("FPDS"));
    out.u32(kSiteVersion);
    out.u64(site.seed);
    write_params(out, site.params);
    out.u32(static_cast<std::uint32_t>(site.image_size));
    out.u32(static_cast<std::uint32_t>(site.slices));
    out.u32(static_cast<std::uint32_t>(site.num_classes));
    out.u32(static_cast<std::uint32_t>(site.train.size()));
    out.u32(static_cast<std::uint32_t>(site.test.size()));
    for (const auto* list : {&site.train, &site.test}) {
        for (const auto& s : *list) {
            for (double v : s.volume.values()) out.f32(static_cast<float>(v));
            out.raw(std::span<const std::uint8_t>(s.mask));
        }
    }
    return std::move(out).take();
}

SyntheticSite deserialize_site(std::span<const std::uint8_t> bytes) {
    io::ByteReader in(bytes);
    if (in.raw(4) != "FPDS") throw IoError("dataset cache: bad magic");
    if (in.u32() != kSiteVersion) throw IoError("dataset cache: unsupported version");
    SyntheticSite site;
    site.seed = in.u64();
    site.params = read_params(in);
    site.image_size = in.u32();
    site.slices = in.u32();
    site.num_classes = in.u32();
    const std::size_t n_train = in.u32();
    const std::size_t n_test = in.u32();
    if (site.image_size == 0 || site.slices == 0) throw IoError("dataset cache: empty geometry");
    const std::size_t px = site.image_size * site.image_size;
    const std::size_t per_sample = site.slices * px * sizeof(float) + px;
    if (in.remaining() != (n_train + n_test) * per_sample) throw IoError("dataset cache: payload size mismatch");
    for (std::size_t i = 0; i < n_train + n_test; ++i) {
        Sample s;
        s.volume = Matrix(site.slices, px);
        for (double& v : s.volume.values()) v = in.f32();
        s.mask.resize(px);
        for (auto& l : s.mask) {
            l = in.u8();
            if (l >= site.num_classes) throw IoError("dataset cache: label out of range");
        }
        (i < n_train ? site.train : site.test).push_back(std::move(s));
    }
    return site;
}

// ---------------------------------------------------------------- loss

LossValue hybrid_loss(const Matrix& logits, std::span<const std::uint8_t> mask, const LossWeights& weights,
                      Matrix& dlogits) {
    const std::size_t classes = logits.rows();
    const std::size_t pixels = logits.cols();
    if (mask.size() != pixels) {
        throw ShapeError("hybrid_loss: mask has " + std::to_string(mask.size()) + " pixels, logits " +
                         logits.shape_str());
    }
    if (classes < 2) throw ShapeError("hybrid_loss: need at least two classes");
    if (!logits.all_finite()) throw NumericError("hybrid_loss: non-finite logits");
    for (auto l : mask)
        if (l >= classes) throw ShapeError("hybrid_loss: label out of range");

    Matrix prob(classes, pixels);
    double ce = 0.0;
    for (std::size_t j = 0; j < pixels; ++j) {
        double top = logits(0, j);
        for (std::size_t c = 1; c < classes; ++c) top = std::max(top, logits(c, j));
        double z = 0.0;
        for (std::size_t c = 0; c < classes; ++c) {
            prob(c, j) = std::exp(logits(c, j) - top);
            z += prob(c, j);
        }
        for (std::size_t c = 0; c < classes; ++c) prob(c, j) /= z;
        ce -= (logits(mask[j], j) - top) - std::log(z);
    }
    const double inv_px = 1.0 / static_cast<double>(pixels);
    ce *= inv_px;

    // d loss / d prob for the Dice term; background contributes nothing.
    const std::size_t fg = classes - 1;
    Matrix dprob(classes, pixels);
    double dice_sum = 0.0;
    for (std::size_t c = 1; c < classes; ++c) {
        double inter = 0.0, denom = 0.0;
        for (std::size_t j = 0; j < pixels; ++j) {
            const double g = mask[j] == c ? 1.0 : 0.0;
            inter += prob(c, j) * g;
            denom += prob(c, j) + g;
        }
        const double num = 2.0 * inter + kDiceSmoothing;
        const double den = denom + kDiceSmoothing;
        dice_sum += num / den;
        const double k = -weights.dice_weight / static_cast<double>(fg);
        for (std::size_t j = 0; j < pixels; ++j) {
            const double g = mask[j] == c ? 1.0 : 0.0;
            dprob(c, j) = k * (2.0 * g * den - num) / (den * den);
        }
    }
    const double dice_loss = 1.0 - dice_sum / static_cast<double>(fg);

    dlogits = Matrix(classes, pixels);
    for (std::size_t j = 0; j < pixels; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < classes; ++c) dot += prob(c, j) * dprob(c, j);
        for (std::size_t c = 0; c < classes; ++c) {
            const double onehot = mask[j] == c ? 1.0 : 0.0;
            dlogits(c, j) = prob(c, j) * (dprob(c, j) - dot) + weights.ce_weight * (prob(c, j) - onehot) * inv_px;
        }
    }
    return LossValue{weights.ce_weight * ce + weights.dice_weight * dice_loss, ce, dice_loss};
}

// ---------------------------------------------------------------- optimizer

void adam_update(Matrix& param, const Matrix& grad, AdamMoments& mo, std::uint64_t t, const AdamConfig& cfg) {
    if (!grad.same_shape(param)) throw ShapeError("adam: gradient " + grad.shape_str() + " vs " + param.shape_str());
    if (t == 0) throw ConfigError("adam: step counter is 1-based");
    if (!mo.m.same_shape(param)) {
        mo.m = Matrix(param.rows(), param.cols());
        mo.v = Matrix(param.rows(), param.cols());
    }
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double g = grad[i];
        mo.m[i] = cfg.beta1 * mo.m[i] + (1.0 - cfg.beta1) * g;
        mo.v[i] = cfg.beta2 * mo.v[i] + (1.0 - cfg.beta2) * g * g;
        const double mhat = mo.m[i] / c1;
        const double vhat = mo.v[i] / c2;
        param[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
}

void adam_step(ParamRegistry& reg, AdapterSet* adapters, const GradientMap& grads, AdamState& state,
               const AdamConfig& cfg) {
    for (const auto& [ref, g] : grads)
        if (!g.all_finite()) throw NumericError("adam: non-finite gradient for " + ref.label());
    ++state.step;
    for (const auto& [ref, g] : grads) adam_update(param_value(reg, adapters, ref), g, state.moments[ref], state.step, cfg);
}

// ---------------------------------------------------------------- training

LearnerState make_learner(const BuiltModel& base, Strategy strategy, std::size_t rank, const LoRAOptions& lora,
                          Rng& rng) {
    LearnerState s;
    s.registry = base.registry;
    s.mask = mask_for(strategy);
    if (s.mask.uses_lora) s.adapters = make_adapters(base.model.config(), rank, lora, rng);
    return s;
}

std::vector<std::size_t> draw_batch(std::size_t n, std::size_t batch_size, Rng& rng) {
    if (n == 0) throw ConfigError("draw_batch: empty dataset");
    if (batch_size == 0) throw ConfigError("draw_batch: batch_size must be >= 1");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    if (n <= batch_size) return idx;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(batch_size);
    return idx;
}

double batch_loss_and_grads(const SegmentationModel& model, const LearnerState& state, std::span<const Sample> data,
                            std::span<const std::size_t> batch, const LossWeights& weights, GradientMap& grads) {
    const auto refs = trainable_params(state.registry, state.mask, state.adapter_ptr());
    const double inv = 1.0 / static_cast<double>(batch.size());
    double total = 0.0;
    for (std::size_t i : batch) {
        const Sample& s = data[i];
        auto loss = [&](const Matrix& logits, Matrix& dlogits) {
            const LossValue v = hybrid_loss(logits, s.mask, weights, dlogits);
            dlogits *= inv;
            return v.total;
        };
        total += model.forward_backward(state.registry, state.adapter_ptr(), s.volume, loss, refs, grads);
    }
    return total * inv;
}

std::vector<double> train_local(const SegmentationModel& model, LearnerState& state, std::span<const Sample> data,
                                std::size_t steps, const TrainerConfig& cfg, Rng& rng) {
    std::vector<double> trace;
    trace.reserve(steps);
    for (std::size_t step = 0; step < steps; ++step) {
        const auto batch = draw_batch(data.size(), cfg.batch_size, rng);
        GradientMap grads;
        double loss = 0.0;
        try {
            loss = batch_loss_and_grads(model, state, data, batch, cfg.loss, grads);
        } catch (const NumericError& e) {
            throw DivergenceError("step " + std::to_string(step) + ": " + e.what());
        }
        if (!std::isfinite(loss) || loss > cfg.divergence_threshold) {
            throw DivergenceError("step " + std::to_string(step) + ": loss " + std::to_string(loss) +
                                  " (threshold " + std::to_string(cfg.divergence_threshold) + ")");
        }
        try {
            adam_step(state.registry, state.adapter_ptr(), grads, state.adam, cfg.adam);
        } catch (const NumericError& e) {
            throw DivergenceError("step " + std::to_string(step) + ": " + e.what());
        }
        trace.push_back(loss);
    }
    return trace;
}

// ---------------------------------------------------------------- evaluation

DiceResult dice_score(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth, std::size_t num_classes) {
    if (pred.size() != truth.size()) throw ShapeError("dice_score: prediction and truth sizes differ");
    if (num_classes < 2) throw ConfigError("dice_score: need at least one foreground class");
    std::vector<std::size_t> p(num_classes, 0), g(num_classes, 0), both(num_classes, 0);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] >= num_classes || truth[i] >= num_classes) throw ShapeError("dice_score: label out of range");
        ++p[pred[i]];
        ++g[truth[i]];
        if (pred[i] == truth[i]) ++both[pred[i]];
    }
    DiceResult r;
    r.per_class.resize(num_classes);
    for (std::size_t c = 0; c < num_classes; ++c) {
        const std::size_t denom = p[c] + g[c];
        r.per_class[c] = denom == 0 ? 1.0 : 2.0 * static_cast<double>(both[c]) / static_cast<double>(denom);
    }
    double sum = 0.0;
    for (std::size_t c = 1; c < num_classes; ++c) sum += r.per_class[c];
    r.mean_foreground = sum / static_cast<double>(num_classes - 1);
    return r;
}

std::vector<std::uint8_t> argmax_labels(const Matrix& logits) {
    std::vector<std::uint8_t> out(logits.cols(), 0);
    for (std::size_t j = 0; j < logits.cols(); ++j) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < logits.rows(); ++c)
            if (logits(c, j) > logits(best, j)) best = c;
        out[j] = static_cast<std::uint8_t>(best);
    }
    return out;
}

double evaluate_dice(const SegmentationModel& model, const LearnerState& state, std::span<const Sample> data) {
    if (data.empty()) throw ConfigError("evaluate_dice: empty sample list");
    const std::size_t classes = model.config().num_classes;
    double sum = 0.0;
    for (const auto& s : data) {
        const Matrix logits = model.forward(state.registry, state.adapter_ptr(), s.volume);
        sum += dice_score(argmax_labels(logits), s.mask, classes).mean_foreground;
    }
    return sum / static_cast<double>(data.size());
}

}  // namespace fedpeft
