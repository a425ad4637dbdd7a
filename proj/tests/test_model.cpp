// Copyright (c) 2026 The fedpeft Authors
// SPDX-License-Identifier: Apache-2.0
//

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <set>

#include "fedpeft/errors.hpp"
#include "fedpeft/model.hpp"
#include "test_util.hpp"

using namespace fedpeft;
using fedpeft::testing::random_matrix;
using fedpeft::testing::rel_err;

namespace {

// ---------------------------------------------------------------- counting oracle

// Per-group sizes written out from the architecture, one term per tensor kind.
std::map<Group, std::size_t> closed_form_groups(const ModelConfig& c) {
    const std::size_t d = c.embed_dim, dd = c.decoder_dim, x = c.cross_dim(), p = c.patch_size;
    const std::size_t dh = d / c.num_heads, span = 2 * c.grid() - 1;
    auto attn = [](std::size_t embed, std::size_t internal) { return 3 * (internal * embed + internal) + embed * internal + embed; };
    std::map<Group, std::size_t> g;
    g[Group::ie_attention] = c.encoder_blocks * (attn(d, d) + (c.use_rel_pos ? 2 * span * dh : 0));
    const std::size_t hidden = d * c.mlp_ratio;
    g[Group::ie_other] = (c.patch_in_chans * p * p * d + d) + d * c.tokens() +
                         c.encoder_blocks * (4 * d + hidden * d + hidden + d * hidden + d) +
                         (dd * d + 2 * dd + dd * dd * c.neck_kernel * c.neck_kernel + 2 * dd);
    const std::size_t q = c.mask_in_chans / 4, m = c.mask_in_chans;
    g[Group::prompt] = 4 * dd + dd + dd + (4 * q + q) + 2 * q + (4 * q * m + m) + 2 * m + (m * dd + dd);
    const std::size_t mlp = c.decoder_mlp_dim;
    const std::size_t layer = attn(dd, dd) + attn(dd, x) * 2 + 8 * dd + (mlp * dd + mlp + dd * mlp + dd);
    g[Group::md_transformer] = dd + c.decoder_blocks * layer + attn(dd, x) + 2 * dd +
                               (dd * dd + dd) * 2 + (c.iou_head_outputs * dd + c.iou_head_outputs);
    std::size_t up = 0, cin = dd;
    for (std::size_t s = 0; s < c.up_channels.size(); ++s) {
        const std::size_t co = c.up_channels[s];
        up += 4 * co * cin + co + (s + 1 < c.up_channels.size() ? 2 * co : 0);
        cin = co;
    }
    g[Group::md_upscale] = up;
    const std::size_t last = c.up_channels.back();
    g[Group::md_hypernet] = c.foreground_classes() * (dd + 2 * (dd * dd + dd) + last * dd + last);
    return g;
}

std::size_t lora_per_rank(const ModelConfig& c) {
    const std::size_t enc = c.encoder_blocks * 2 * (2 * c.embed_dim);
    const std::size_t self = c.decoder_blocks * 2 * (2 * c.decoder_dim);
    const std::size_t cross = (2 * c.decoder_blocks + 1) * 2 * (c.cross_dim() + c.decoder_dim);
    return enc + self + cross;
}

void expect_within(double got, double want, double frac, const std::string& what) {
    EXPECT_LE(std::abs(got - want), frac * want) << what << ": " << got << " vs " << want;
}

// ---------------------------------------------------------------- forward oracle

double gelu(double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); }

struct Oracle {
    const ModelConfig& c;
    const ParamRegistry& reg;
    const AdapterSet* ads;

    const Matrix& P(const std::string& n) const { return reg.at(n).value; }

    static Matrix mm(const Matrix& a, const Matrix& b) { return fedpeft::testing::naive_matmul(a, b); }
    static Matrix T(const Matrix& a) {
        Matrix t(a.cols(), a.rows());
        for (std::size_t i = 0; i < a.rows(); ++i)
            for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
        return t;
    }
    static Matrix addm(Matrix a, const Matrix& b) {
        for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
        return a;
    }
    static Matrix addcol(Matrix a, const Matrix& b) {
        for (std::size_t i = 0; i < a.rows(); ++i)
            for (std::size_t j = 0; j < a.cols(); ++j) a(i, j) += b(i, 0);
        return a;
    }
    static Matrix gel(Matrix a) {
        for (double& v : a.values()) v = gelu(v);
        return a;
    }
    Matrix lin(const std::string& pre, const Matrix& x) const { return addcol(mm(P(pre + ".weight"), x), P(pre + ".bias")); }
    Matrix ln(const std::string& pre, const Matrix& x) const {
        const Matrix &w = P(pre + ".weight"), &b = P(pre + ".bias");
        Matrix out(x.rows(), x.cols());
        for (std::size_t j = 0; j < x.cols(); ++j) {
            double mu = 0, var = 0;
            for (std::size_t i = 0; i < x.rows(); ++i) mu += x(i, j);
            mu /= x.rows();
            for (std::size_t i = 0; i < x.rows(); ++i) var += (x(i, j) - mu) * (x(i, j) - mu);
            var /= x.rows();
            for (std::size_t i = 0; i < x.rows(); ++i) out(i, j) = (x(i, j) - mu) / std::sqrt(var + 1e-6) * w(i, 0) + b(i, 0);
        }
        return out;
    }
    Matrix proj(const std::string& w, const std::string& b, const Matrix& x, AdapterKey key) const {
        Matrix out = addcol(mm(P(w), x), P(b));
        const LoRAAdapter* a = ads ? ads->find(key) : nullptr;
        if (!a) return out;
        Matrix delta = mm(a->b_factor, a->a_factor);
        for (double& v : delta.values()) v *= a->scale;
        return addm(out, mm(delta, x));
    }
    Matrix attention(const std::string& pre, const Matrix& qi, const Matrix& ki, const Matrix& vi, std::size_t heads,
                     std::uint32_t layer, std::size_t grid) const {
        const Matrix q = proj(pre + ".wq", pre + ".bq", qi, {layer, Projection::query});
        const Matrix k = addcol(mm(P(pre + ".wk"), ki), P(pre + ".bk"));
        const Matrix v = proj(pre + ".wv", pre + ".bv", vi, {layer, Projection::value});
        const std::size_t dh = q.rows() / heads, nq = q.cols(), nk = k.cols();
        Matrix merged(q.rows(), nq);
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < nq; ++i) {
                std::vector<double> s(nk);
                double mx = -INFINITY;
                for (std::size_t j = 0; j < nk; ++j) {
                    double acc = 0;
                    for (std::size_t r = 0; r < dh; ++r) acc += q(h * dh + r, i) * k(h * dh + r, j);
                    acc /= std::sqrt(static_cast<double>(dh));
                    if (grid) {
                        const Matrix &rh = P(pre + ".rel_pos_h"), &rw = P(pre + ".rel_pos_w");
                        const std::size_t yi = i / grid, xi = i % grid, yj = j / grid, xj = j % grid;
                        for (std::size_t r = 0; r < dh; ++r)
                            acc += q(h * dh + r, i) * (rh(yi + grid - 1 - yj, r) + rw(xi + grid - 1 - xj, r));
                    }
                    s[j] = acc;
                    mx = std::max(mx, acc);
                }
                double z = 0;
                for (double& e : s) z += (e = std::exp(e - mx));
                for (std::size_t r = 0; r < dh; ++r) {
                    double acc = 0;
                    for (std::size_t j = 0; j < nk; ++j) acc += v(h * dh + r, j) * s[j] / z;
                    merged(h * dh + r, i) = acc;
                }
            }
        }
        return addcol(mm(P(pre + ".wo"), merged), P(pre + ".bo"));
    }

    Matrix forward(const Matrix& vol) const {
        const std::size_t p = c.patch_size, s = c.grid(), W = c.image_size, t = c.tokens();
        Matrix patches(c.input_slices * p * p, t);
        for (std::size_t ch = 0; ch < c.input_slices; ++ch)
            for (std::size_t py = 0; py < p; ++py)
                for (std::size_t px = 0; px < p; ++px)
                    for (std::size_t ty = 0; ty < s; ++ty)
                        for (std::size_t tx = 0; tx < s; ++tx)
                            patches(ch * p * p + py * p + px, ty * s + tx) = vol(ch, (ty * p + py) * W + tx * p + px);
        Matrix x = addm(lin("ie.patch_embed", patches), P("ie.pos_embed"));
        for (std::size_t b = 0; b < c.encoder_blocks; ++b) {
            const std::string pre = "ie.block" + std::to_string(b);
            Matrix h = ln(pre + ".norm1", x);
            x = addm(x, attention(pre + ".attn", h, h, h, c.num_heads, static_cast<std::uint32_t>(b + 1), s));
            x = addm(x, lin(pre + ".mlp.fc2", gel(lin(pre + ".mlp.fc1", ln(pre + ".norm2", x)))));
        }
        Matrix y = ln("ie.neck.ln1", mm(P("ie.neck.conv1.weight"), x));
        const Matrix& k2 = P("ie.neck.conv2.weight");
        const std::size_t kk = c.neck_kernel, dd = c.decoder_dim;
        Matrix conv(dd, t);
        for (std::size_t o = 0; o < dd; ++o)
            for (std::size_t i = 0; i < s; ++i)
                for (std::size_t j = 0; j < s; ++j) {
                    double acc = 0;
                    for (std::size_t ch = 0; ch < dd; ++ch)
                        for (std::size_t ky = 0; ky < kk; ++ky)
                            for (std::size_t kx = 0; kx < kk; ++kx) {
                                const long ii = long(i + ky) - long(kk / 2), jj = long(j + kx) - long(kk / 2);
                                if (ii < 0 || jj < 0 || ii >= long(s) || jj >= long(s)) continue;
                                acc += k2(o, ch * kk * kk + ky * kk + kx) * y(ch, ii * s + jj);
                            }
                    conv(o, i * s + j) = acc;
                }
        Matrix keys = addcol(ln("ie.neck.ln2", conv), P("pe.no_mask_embed"));
        const Matrix key_pe = image_positional_encoding(c);
        const Matrix ppe = prompt_positional_encoding(c);
        const std::size_t nfg = c.foreground_classes(), npts = ppe.cols();
        Matrix queries(dd, 1 + nfg + npts);
        for (std::size_t r = 0; r < dd; ++r) {
            queries(r, 0) = P("md.iou_token")(r, 0);
            for (std::size_t k = 0; k < nfg; ++k) queries(r, 1 + k) = P("md.hyp.class" + std::to_string(k) + ".mask_token")(r, 0);
            for (std::size_t n = 0; n < npts; ++n) queries(r, 1 + nfg + n) = ppe(r, n) + P("pe.point_embeddings")(r, 1);
        }
        const Matrix qpe = queries;
        std::uint32_t site = static_cast<std::uint32_t>(c.encoder_blocks);
        for (std::size_t l = 0; l < c.decoder_blocks; ++l) {
            const std::string pre = "md.tr.layer" + std::to_string(l);
            Matrix q = addm(queries, qpe);
            queries = ln(pre + ".norm1", addm(queries, attention(pre + ".self_attn", q, q, queries, c.decoder_heads, ++site, 0)));
            q = addm(queries, qpe);
            Matrix kp = addm(keys, key_pe);
            queries = ln(pre + ".norm2", addm(queries, attention(pre + ".cross_t2i", q, kp, keys, c.decoder_heads, ++site, 0)));
            queries = ln(pre + ".norm3", addm(queries, lin(pre + ".mlp.fc2", gel(lin(pre + ".mlp.fc1", queries)))));
            q = addm(queries, qpe);
            kp = addm(keys, key_pe);
            keys = ln(pre + ".norm4", addm(keys, attention(pre + ".cross_i2t", kp, q, queries, c.decoder_heads, ++site, 0)));
        }
        {
            Matrix q = addm(queries, qpe), kp = addm(keys, key_pe);
            queries = ln("md.tr.norm_final", addm(queries, attention("md.tr.final_attn", q, kp, keys, c.decoder_heads, ++site, 0)));
        }
        Matrix up = keys;
        std::size_t side = s;
        for (std::size_t st = 0; st < c.up_channels.size(); ++st) {
            const std::string pre = "md.up.stage" + std::to_string(st);
            const std::size_t co = c.up_channels[st];
            const Matrix z = mm(P(pre + ".weight"), up);
            Matrix out(co, 4 * side * side);
            for (std::size_t ch = 0; ch < co; ++ch)
                for (std::size_t i = 0; i < side; ++i)
                    for (std::size_t j = 0; j < side; ++j)
                        for (std::size_t a = 0; a < 2; ++a)
                            for (std::size_t b = 0; b < 2; ++b)
                                out(ch, (2 * i + a) * 2 * side + 2 * j + b) =
                                    z((2 * a + b) * co + ch, i * side + j) + P(pre + ".bias")(ch, 0);
            if (st + 1 < c.up_channels.size()) out = ln(pre + ".ln", out);
            up = gel(out);
            side *= 2;
        }
        Matrix logits(c.num_classes, c.pixels());
        for (std::size_t k = 0; k < nfg; ++k) {
            const std::string pre = "md.hyp.class" + std::to_string(k);
            Matrix tok(dd, 1);
            for (std::size_t r = 0; r < dd; ++r) tok(r, 0) = queries(r, 1 + k);
            const Matrix h = lin(pre + ".fc3", gel(lin(pre + ".fc2", gel(lin(pre + ".fc1", tok)))));
            const Matrix row = mm(T(h), up);
            for (std::size_t j = 0; j < c.pixels(); ++j) logits(1 + k, j) = row(0, j);
        }
        return logits;
    }
};

// Toy model with every tensor moved off its structured init, plus adapters
// with nonzero B so every path carries signal.
struct Fixture {
    ModelConfig cfg;
    BuiltModel built;
    AdapterSet adapters;
    Matrix volume;

    explicit Fixture(std::size_t classes = 3, std::uint64_t seed = 11)
        : cfg([&] {
              ModelConfig c = ModelConfig::toy();
              c.num_classes = classes;
              return c;
          }()),
          built([&] {
              Rng rng(seed);
              return build_model(cfg, rng);
          }()) {
        Rng rng(seed + 1);
        std::normal_distribution<double> g(0.0, 0.1);
        for (auto& [name, e] : built.registry)
            for (double& v : e.value.values()) v += g(rng);
        adapters = make_adapters(cfg, 2, {}, rng);
        for (auto& [k, a] : adapters) a.b_factor = random_matrix(a.b_factor.rows(), a.b_factor.cols(), rng, 0.1);
        volume = random_matrix(cfg.input_slices, cfg.pixels(), rng);
    }
};

}  // namespace

// ---------------------------------------------------------------- counts

TEST(Counts, LayoutMatchesClosedForm) {
    for (const char* name : {"toy", "vit_b_paper"}) {
        for (std::size_t classes : {1u, 2u, 3u, 5u}) {
            ModelConfig c = ModelConfig::by_name(name);
            c.num_classes = classes;
            const auto want = closed_form_groups(c);
            const auto got = group_param_counts(c);
            for (Group g : kAllGroups) EXPECT_EQ(got.at(g), want.at(g)) << name << " " << to_string(g);
            EXPECT_EQ(lora_param_count(c, 3), 3 * lora_per_rank(c));
        }
    }
}

TEST(Counts, ReferenceModelWithinTwoPercent) {
    const ModelConfig c = ModelConfig::vit_b_paper();
    struct Row {
        Strategy s;
        double trainable, total;
    };
    // Single foreground class, rank 32.
    const Row rows[] = {{Strategy::full_ft, 90.399e6, 90.399e6}, {Strategy::attn_ft, 29.575e6, 90.399e6},
                        {Strategy::dec_ft, 3.768e6, 90.399e6},   {Strategy::lora_ft, 1.368e6, 91.767e6},
                        {Strategy::pdec_ft, 0.344e6, 90.399e6},  {Strategy::flap_sam, 1.712e6, 91.767e6}};
    for (const Row& r : rows) {
        const ParamCounts pc = count_params(c, mask_for(r.s), 32, 2);
        expect_within(pc.trainable, r.trainable, 0.02, to_string(r.s) + " trainable");
        expect_within(pc.total, r.total, 0.02, to_string(r.s) + " total");
    }
    // Each further class adds one hypernetwork head.
    const auto two = count_params(c, mask_for(Strategy::flap_sam), 32, 2);
    const auto three = count_params(c, mask_for(Strategy::flap_sam), 32, 3);
    expect_within(three.trainable - two.trainable, 0.134e6, 0.02, "per-class increment");
    // Three-label rank ablation.
    expect_within(count_params(c, mask_for(Strategy::flap_sam), 16, 3).trainable, 1.162e6, 0.02, "rank 16");
    expect_within(count_params(c, mask_for(Strategy::flap_sam), 4, 3).trainable, 0.649e6, 0.02, "rank 4");
}

TEST(Counts, ExactReferenceValues) {
    const ModelConfig c = ModelConfig::vit_b_paper();
    EXPECT_EQ(lora_sites(c).size(), 19u);
    EXPECT_EQ(lora_param_count(c, 32), 1368064u);
    EXPECT_EQ(count_params(c, mask_for(Strategy::full_ft), 32, 2).trainable, 90398896u);
    EXPECT_EQ(count_params(c, mask_for(Strategy::flap_sam), 32, 2).trainable, 1712096u);
    EXPECT_EQ(count_params(c, mask_for(Strategy::flap_sam), 32, 2).total, 91766960u);
    // Decoder plus adapters, nothing else.
    EXPECT_EQ(count_params(c, mask_for(Strategy::lora_dec_ft), 32, 2).trainable,
              count_params(c, mask_for(Strategy::dec_ft), 32, 2).trainable + 1368064u);
}

TEST(Counts, ToyRegistryAgreesWithCounter) {
    Fixture f(3);
    EXPECT_EQ(f.built.registry.parameter_count(), count_params(f.cfg, mask_for(Strategy::full_ft), 1, 3).total);
    for (Strategy s : kAllStrategies) {
        const StrategyMask m = mask_for(s);
        Rng rng(1);
        AdapterSet ads = make_adapters(f.cfg, 4, {}, rng);
        std::size_t n = 0;
        for (const auto& ref : trainable_params(f.built.registry, m, m.uses_lora ? &ads : nullptr))
            n += param_value(f.built.registry, &ads, ref).size();
        EXPECT_EQ(n, count_params(f.cfg, m, 4, 3).trainable) << to_string(s);
    }
    EXPECT_EQ(lora_sites(f.cfg).size(), 9u);
    EXPECT_EQ(max_lora_rank(f.cfg), 4u);
    Rng rng(2);
    EXPECT_THROW(make_adapters(f.cfg, 5, {}, rng), ConfigError);
}

TEST(Counts, ParameterEfficiencyOrdering) {
    const ModelConfig c = ModelConfig::vit_b_paper();
    auto tr = [&](Strategy s) { return count_params(c, mask_for(s), 32, 2).trainable; };
    EXPECT_LT(tr(Strategy::pdec_ft), tr(Strategy::lora_ft));
    EXPECT_LT(tr(Strategy::lora_ft), tr(Strategy::flap_sam));
    EXPECT_LT(tr(Strategy::flap_sam), tr(Strategy::dec_ft));
    EXPECT_LT(tr(Strategy::dec_ft), tr(Strategy::lora_dec_ft));
    EXPECT_LT(tr(Strategy::lora_dec_ft), tr(Strategy::attn_ft));
    EXPECT_LT(tr(Strategy::attn_ft), tr(Strategy::full_ft));
}

// ---------------------------------------------------------------- masks

TEST(Masks, GroupSemantics) {
    EXPECT_TRUE(mask_for(Strategy::flap_sam).trains(Group::md_upscale, false));
    EXPECT_TRUE(mask_for(Strategy::flap_sam).trains(Group::md_hypernet, false));
    EXPECT_FALSE(mask_for(Strategy::flap_sam).trains(Group::md_transformer, true));
    EXPECT_FALSE(mask_for(Strategy::flap_sam).trains(Group::ie_attention, true));
    EXPECT_TRUE(mask_for(Strategy::attn_ft).trains(Group::md_transformer, true));
    EXPECT_FALSE(mask_for(Strategy::attn_ft).trains(Group::md_transformer, false));
    EXPECT_FALSE(mask_for(Strategy::attn_ft).trains(Group::md_upscale, false));
    EXPECT_FALSE(mask_for(Strategy::lora_ft).trains(Group::md_upscale, false));
    for (Strategy s : kAllStrategies) {
        const bool lora = s == Strategy::lora_ft || s == Strategy::lora_dec_ft || s == Strategy::flap_sam;
        EXPECT_EQ(mask_for(s).uses_lora, lora);
        EXPECT_EQ(strategy_from_string(to_string(s)), s);
    }
    EXPECT_EQ(strategy_from_string("flap_sam"), Strategy::flap_sam);
    EXPECT_EQ(strategy_from_string("flapsam"), Strategy::flap_sam);
    EXPECT_EQ(strategy_from_string("lora-dec-ft"), Strategy::lora_dec_ft);
    EXPECT_THROW(strategy_from_string("bogus"), ConfigError);
    for (Group g : kAllGroups) EXPECT_EQ(group_from_string(to_string(g)), g);
}

TEST(Masks, Containment) {
    Fixture f(2);
    auto names = [&](Strategy s) {
        const StrategyMask m = mask_for(s);
        std::set<std::string> out;
        for (const auto& r : trainable_params(f.built.registry, m, m.uses_lora ? &f.adapters : nullptr)) out.insert(r.label());
        return out;
    };
    auto subset = [](const std::set<std::string>& a, const std::set<std::string>& b) {
        return std::includes(b.begin(), b.end(), a.begin(), a.end());
    };
    EXPECT_TRUE(subset(names(Strategy::pdec_ft), names(Strategy::flap_sam)));
    EXPECT_TRUE(subset(names(Strategy::pdec_ft), names(Strategy::dec_ft)));
    EXPECT_TRUE(subset(names(Strategy::lora_ft), names(Strategy::flap_sam)));
    EXPECT_TRUE(subset(names(Strategy::flap_sam), names(Strategy::lora_dec_ft)));
    EXPECT_TRUE(subset(names(Strategy::dec_ft), names(Strategy::lora_dec_ft)));
    EXPECT_TRUE(subset(names(Strategy::dec_ft), names(Strategy::full_ft)));
    EXPECT_THROW(trainable_params(f.built.registry, mask_for(Strategy::flap_sam), nullptr), ConfigError);
    EXPECT_THROW(trainable_params(f.built.registry, mask_for(Strategy::dec_ft), &f.adapters), ConfigError);
}

TEST(Masks, FrozenDigestTracksOnlyFrozenTensors) {
    Fixture f(2);
    const StrategyMask m = mask_for(Strategy::flap_sam);
    const std::string before = frozen_digest(f.built.registry, m);
    f.built.registry.at("md.up.stage0.bias").value[0] += 1.0;
    EXPECT_EQ(frozen_digest(f.built.registry, m), before);
    f.built.registry.at("ie.block0.attn.wq").value[0] += 1e-12;
    EXPECT_NE(frozen_digest(f.built.registry, m), before);
}

// ---------------------------------------------------------------- forward

TEST(Forward, MatchesStraightLineOracle) {
    for (std::size_t classes : {2u, 3u}) {
        Fixture f(classes);
        for (const AdapterSet* ads : {static_cast<const AdapterSet*>(nullptr), static_cast<const AdapterSet*>(&f.adapters)}) {
            const Matrix got = f.built.model.forward(f.built.registry, ads, f.volume);
            const Matrix want = Oracle{f.cfg, f.built.registry, ads}.forward(f.volume);
            ASSERT_EQ(got.rows(), classes);
            ASSERT_EQ(got.cols(), f.cfg.pixels());
            double worst = 0;
            for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, std::abs(got[i] - want[i]));
            EXPECT_LE(worst, 1e-10) << "classes " << classes << (ads ? " with adapters" : "");
            for (std::size_t j = 0; j < got.cols(); ++j) EXPECT_EQ(got(0, j), 0.0);
        }
    }
}

TEST(Forward, FreshAdaptersAreBitIdentical) {
    Fixture f(3);
    Rng rng(99);
    const AdapterSet fresh = make_adapters(f.cfg, 4, {}, rng);
    const Matrix base = f.built.model.forward(f.built.registry, nullptr, f.volume);
    const Matrix with = f.built.model.forward(f.built.registry, &fresh, f.volume);
    ASSERT_EQ(base.size(), with.size());
    EXPECT_EQ(std::memcmp(base.values().data(), with.values().data(), base.size() * sizeof(double)), 0);
}

TEST(Forward, InputShapeChecked) {
    Fixture f(2);
    EXPECT_THROW(f.built.model.forward(f.built.registry, nullptr, Matrix(3, f.cfg.pixels())), ShapeError);
    EXPECT_THROW(SegmentationModel(ModelConfig::vit_b_paper()), ConfigError);
}

TEST(Forward, BatchEqualsSingles) {
    Fixture f(2);
    Rng rng(5);
    std::vector<Matrix> vols{f.volume, random_matrix(f.cfg.input_slices, f.cfg.pixels(), rng)};
    const auto out = f.built.model.forward_batch(f.built.registry, &f.adapters, vols);
    ASSERT_EQ(out.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(out[i], f.built.model.forward(f.built.registry, &f.adapters, vols[i]));
}

// ---------------------------------------------------------------- gradients

class Gradients : public ::testing::TestWithParam<Strategy> {};

TEST_P(Gradients, MatchFiniteDifferences) {
    const Strategy s = GetParam();
    Fixture f(3);
    const StrategyMask m = mask_for(s);
    AdapterSet* ads = m.uses_lora ? &f.adapters : nullptr;
    Rng rng(3);
    const Matrix probe = random_matrix(f.cfg.num_classes, f.cfg.pixels(), rng);
    LossFn loss = [&](const Matrix& logits, Matrix& d) {
        double l = 0;
        for (std::size_t i = 0; i < logits.size(); ++i) l += probe[i] * logits[i];
        d = probe;
        return l;
    };
    auto value = [&] {
        const Matrix lg = f.built.model.forward(f.built.registry, ads, f.volume);
        double l = 0;
        for (std::size_t i = 0; i < lg.size(); ++i) l += probe[i] * lg[i];
        return l;
    };
    const auto refs = trainable_params(f.built.registry, m, ads);
    GradientMap grads;
    f.built.model.forward_backward(f.built.registry, ads, f.volume, loss, refs, grads);
    ASSERT_EQ(grads.size(), refs.size());

    std::set<Group> seen;
    std::size_t checked = 0;
    const double h = 1e-5;
    // Central differences carry roundoff ~ eps * sum|probe .* logits| / h, so
    // gradients below a millionth of that scale compare as zero (key biases
    // are exactly zero: softmax ignores a per-row shift).
    double floor = 0.0;
    {
        const Matrix lg = f.built.model.forward(f.built.registry, ads, f.volume);
        for (std::size_t i = 0; i < lg.size(); ++i) floor += std::abs(probe[i] * lg[i]);
        floor *= 1e-6;
    }
    for (const auto& ref : refs) {
        Matrix& p = param_value(f.built.registry, ads, ref);
        const Matrix& g = grads.at(ref);
        ASSERT_TRUE(g.same_shape(p)) << ref.label();
        if (ref.kind == ParamRef::Kind::dense) seen.insert(f.built.registry.at(ref.name).group);
        std::uniform_int_distribution<std::size_t> pick(0, p.size() - 1);
        for (int rep = 0; rep < 2; ++rep) {
            const std::size_t i = pick(rng);
            const double keep = p[i];
            p[i] = keep + h;
            const double up = value();
            p[i] = keep - h;
            const double down = value();
            p[i] = keep;
            const double fd = (up - down) / (2 * h);
            EXPECT_LE(rel_err(g[i], fd, floor), 1e-4) << ref.label() << "[" << i << "] bp " << g[i] << " fd " << fd;
            ++checked;
        }
    }
    for (Group grp : kAllGroups)
        if (m.has_group(grp)) EXPECT_TRUE(seen.contains(grp)) << to_string(grp);
    EXPECT_GT(checked, 0u);
}

INSTANTIATE_TEST_SUITE_P(AllStrategies, Gradients, ::testing::ValuesIn(kAllStrategies),
                         [](const ::testing::TestParamInfo<Strategy>& info) {
                             std::string n = to_string(info.param);
                             n.erase(std::remove(n.begin(), n.end(), '-'), n.end());
                             return n;
                         });

TEST(GradientsMisc, UnusedParametersGetZeroGradient) {
    Fixture f(2);
    // The prompt mask-downscaling path and the IoU head never see the input.
    std::vector<ParamRef> wrt{{ParamRef::Kind::dense, "pe.mask_downscaling.conv1.weight", {}},
                             {ParamRef::Kind::dense, "md.iou_head.fc1.weight", {}}};
    GradientMap grads;
    LossFn loss = [](const Matrix& lg, Matrix& d) {
        d = Matrix(lg.rows(), lg.cols(), 1.0);
        return 0.0;
    };
    f.built.model.forward_backward(f.built.registry, nullptr, f.volume, loss, wrt, grads);
    for (const auto& r : wrt) {
        ASSERT_TRUE(grads.contains(r));
        EXPECT_EQ(fedpeft::testing::max_abs(grads.at(r)), 0.0);
    }
}

TEST(GradientsMisc, Accumulate) {
    Fixture f(2);
    std::vector<ParamRef> wrt{{ParamRef::Kind::dense, "md.up.stage3.bias", {}}};
    LossFn loss = [](const Matrix& lg, Matrix& d) {
        d = Matrix(lg.rows(), lg.cols(), 1.0);
        return 0.0;
    };
    GradientMap once, twice;
    f.built.model.forward_backward(f.built.registry, nullptr, f.volume, loss, wrt, once);
    f.built.model.forward_backward(f.built.registry, nullptr, f.volume, loss, wrt, twice);
    f.built.model.forward_backward(f.built.registry, nullptr, f.volume, loss, wrt, twice);
    const Matrix& a = once.at(wrt[0]);
    const Matrix& b = twice.at(wrt[0]);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(b[i], 2 * a[i], 1e-12 * (1 + std::abs(a[i])));
}

// ---------------------------------------------------------------- init and checkpoints

TEST(Init, DeterministicAndStructured) {
    const ModelConfig c = ModelConfig::toy();
    Rng a(4), b(4), other(5);
    const BuiltModel x = build_model(c, a), y = build_model(c, b), z = build_model(c, other);
    EXPECT_EQ(frozen_digest(x.registry, mask_for(Strategy::pdec_ft)), frozen_digest(y.registry, mask_for(Strategy::pdec_ft)));
    EXPECT_NE(frozen_digest(x.registry, mask_for(Strategy::pdec_ft)), frozen_digest(z.registry, mask_for(Strategy::pdec_ft)));
    for (double v : x.registry.at("ie.block0.norm1.weight").value.values()) EXPECT_EQ(v, 1.0);
    for (double v : x.registry.at("ie.block0.norm1.bias").value.values()) EXPECT_EQ(v, 0.0);
    for (double v : x.registry.at("ie.block0.attn.bq").value.values()) EXPECT_EQ(v, 0.0);
    EXPECT_GT(fedpeft::testing::max_abs(x.registry.at("ie.block0.attn.wq").value), 0.0);
}

TEST(Init, ConfigHashSeparatesPresets) {
    EXPECT_NE(ModelConfig::toy().hash(), ModelConfig::vit_b_paper().hash());
    ModelConfig c = ModelConfig::toy();
    c.num_classes = 3;
    EXPECT_NE(c.hash(), ModelConfig::toy().hash());
    EXPECT_EQ(ModelConfig::toy().hash().size(), 64u);
    EXPECT_THROW(ModelConfig::by_name("vit_h"), ConfigError);
    c.patch_size = 8;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Checkpoint, RoundTrip) {
    Fixture f(3);
    const auto bytes = save_checkpoint(f.built.registry, f.cfg, Strategy::flap_sam);
    const Checkpoint cp = load_checkpoint(bytes);
    EXPECT_EQ(cp.config_hash, f.cfg.hash());
    EXPECT_EQ(cp.strategy, Strategy::flap_sam);
    ASSERT_EQ(cp.registry.size(), f.built.registry.size());
    for (const auto& [name, e] : f.built.registry) {
        const ParamEntry& back = cp.registry.at(name);
        EXPECT_EQ(back.group, e.group);
        EXPECT_EQ(back.attention, e.attention);
        ASSERT_TRUE(back.value.same_shape(e.value));
        for (std::size_t i = 0; i < e.value.size(); ++i)
            ASSERT_EQ(back.value[i], static_cast<double>(static_cast<float>(e.value[i]))) << name;
    }
    EXPECT_EQ(save_checkpoint(cp.registry, f.cfg, Strategy::flap_sam), bytes);
    auto cut = bytes;
    cut.resize(cut.size() / 2);
    EXPECT_THROW(load_checkpoint(cut), IoError);
}
