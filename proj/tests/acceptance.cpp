// Copyright (c) 2026 The fedpeft Authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: one PASS/FAIL line per criterion, details indented below.
// Exit status is the number of failed criteria.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "fedpeft/byteio.hpp"
#include "fedpeft/experiment.hpp"
#include "test_util.hpp"

using namespace fedpeft;
using fedpeft::testing::random_matrix;
using fedpeft::testing::rel_err;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fmt(double v, int prec = 4) {
    std::ostringstream os;
    os << std::setprecision(prec) << v;
    return os.str();
}

std::string mega(std::size_t n) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(3) << n / 1e6 << "M";
    return os.str();
}

double frob_diff(const Matrix& a, const Matrix& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

double max_diff(const Matrix& a, const Matrix& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

struct Report {
    std::vector<std::string> details;
    bool ok = true;

    void check(bool pass, const std::string& what) {
        ok = ok && pass;
        details.push_back(std::string(pass ? "ok   " : "FAIL ") + what);
    }
    void info(const std::string& what) { details.push_back("info " + what); }
};

int failures = 0;

void criterion(int n, const std::string& title, const std::function<void(Report&)>& body) {
    Report r;
    const auto t0 = Clock::now();
    try {
        body(r);
    } catch (const std::exception& e) {
        r.check(false, std::string("exception: ") + e.what());
    }
    const double secs = seconds_since(t0);
    std::cout << "criterion " << std::setw(2) << n << ": " << (r.ok ? "PASS" : "FAIL") << "  " << title << "  ["
              << fmt(secs, 3) << " s]\n";
    for (const auto& d : r.details) std::cout << "    " << d << "\n";
    std::cout.flush();
    if (!r.ok) ++failures;
}

// Relative check at the printed precision of a reference value in millions.
void near_ref(Report& r, const std::string& label, std::size_t got, double ref_m, double tol = 0.02) {
    const double rel = (got / 1e6 - ref_m) / ref_m;
    r.check(std::abs(rel) <= tol, label + " " + mega(got) + " vs " + fmt(ref_m, 6) + "M (" + fmt(100 * rel, 3) + "%)");
}

ModelConfig vit(std::size_t classes) {
    ModelConfig v = ModelConfig::vit_b_paper();
    v.num_classes = classes;
    return v;
}

// ---------------------------------------------------------------- LoRA helpers

LoRAAdapter factors(Matrix b, Matrix a) {
    const std::size_t r = a.rows();
    return LoRAAdapter{std::move(a), std::move(b), r, 1.0};
}

ServerState lora_server(std::size_t rank, std::size_t d, std::size_t dp) {
    ServerState s;
    s.rank = rank;
    AdapterSet set;
    for (Projection p : {Projection::query, Projection::value})
        set.insert({1, p}, factors(Matrix(d, rank), Matrix(rank, dp)));
    s.global.adapters = std::move(set);
    return s;
}

ClientUpdate lora_update(std::uint32_t id, double w, const LoRAAdapter& q, const LoRAAdapter& v) {
    ClientUpdate u;
    u.client_id = id;
    u.weight = w;
    AdapterSet set;
    set.insert({1, Projection::query}, q);
    set.insert({1, Projection::value}, v);
    u.payload.adapters = std::move(set);
    return u;
}

Matrix global_delta(const ServerState& s, Projection p = Projection::query) {
    return merge_delta(s.global.adapters->at({1, p}));
}

// ---------------------------------------------------------------- toy federation

struct Fed {
    BuiltModel base;
    std::vector<SyntheticSite> sites;
    static constexpr std::uint64_t kSeed = 17;

    explicit Fed(std::size_t k, std::size_t n_train = 4)
        : base([] {
              Rng rng(5);
              return build_model(ModelConfig::toy(), rng);
          }()) {
        for (std::size_t i = 0; i < k; ++i) sites.push_back(gen_site(9 + i, default_site(i, k), n_train, 2, 32, 5, 2));
    }
    ServerState server(Strategy s, std::size_t rank = 2) const {
        Rng rng(6);
        return init_server(base, s, rank, {}, rng);
    }
    std::vector<ClientState> clients(Strategy s) const {
        std::vector<ClientState> out;
        for (std::size_t i = 0; i < sites.size(); ++i)
            out.push_back(make_client(static_cast<std::uint32_t>(i), base, s, sites[i].train, kSeed));
        return out;
    }
    LearnerState local_learner(Strategy s) const {
        Rng rng(6);
        return make_learner(base, s, 2, {}, rng);
    }
    Rng local_rng() const {
        std::seed_seq seq{static_cast<std::uint32_t>(kSeed), 0u, 0u, 0xC11E47u};
        return Rng(seq);
    }
};

// ---------------------------------------------------------------- criteria

void c1(Report& r) {
    const auto t0 = Clock::now();
    const ModelConfig v = vit(2);
    auto cnt = [&](Strategy s) { return count_params(v, mask_for(s), 32, 2); };
    near_ref(r, "FullFT total", cnt(Strategy::full_ft).total, 90.399);
    near_ref(r, "FullFT trainable", cnt(Strategy::full_ft).trainable, 90.399);
    near_ref(r, "AttnFT trainable", cnt(Strategy::attn_ft).trainable, 29.575);
    near_ref(r, "DecFT trainable", cnt(Strategy::dec_ft).trainable, 3.768);
    near_ref(r, "LoRAFT trainable", cnt(Strategy::lora_ft).trainable, 1.368);
    near_ref(r, "LoRAFT total", cnt(Strategy::lora_ft).total, 91.767);
    near_ref(r, "LoRADecFT trainable", cnt(Strategy::lora_dec_ft).trainable, 5.270);
    near_ref(r, "LoRADecFT total", cnt(Strategy::lora_dec_ft).total, 91.767);
    near_ref(r, "PDecFT trainable", cnt(Strategy::pdec_ft).trainable, 0.344);
    near_ref(r, "FLAP-SAM trainable", cnt(Strategy::flap_sam).trainable, 1.712);
    near_ref(r, "FLAP-SAM total", cnt(Strategy::flap_sam).total, 91.767);
    const std::size_t inc = count_params(vit(3), mask_for(Strategy::flap_sam), 32, 3).trainable -
                            cnt(Strategy::flap_sam).trainable;
    const std::size_t inc4 = count_params(vit(4), mask_for(Strategy::flap_sam), 32, 4).trainable -
                             count_params(vit(3), mask_for(Strategy::flap_sam), 32, 3).trainable;
    r.check(std::lround(inc / 1e3) == 134 && inc == inc4,
            "per-class increment " + std::to_string(inc) + " = " + mega(inc) + " (constant: " + std::to_string(inc4) + ")");
    const double secs = seconds_since(t0);
    r.check(secs < 1.0, "runtime " + fmt(secs, 3) + " s < 1 s");
}

void c2(Report& r) {
    const auto t0 = Clock::now();
    const ModelConfig v = vit(3);
    const StrategyMask flap = mask_for(Strategy::flap_sam);
    near_ref(r, "FLAP-SAM trainable", count_params(v, flap, 32, 3).trainable, 1.846);
    near_ref(r, "FLAP-SAM total", count_params(v, flap, 32, 3).total, 91.901);
    near_ref(r, "FullFT total", count_params(v, mask_for(Strategy::full_ft), 32, 3).total, 90.533);
    near_ref(r, "rank 4 trainable", count_params(v, flap, 4, 3).trainable, 0.649);
    near_ref(r, "rank 16 trainable", count_params(v, flap, 16, 3).trainable, 1.162);
    near_ref(r, "rank 32 trainable", count_params(v, flap, 32, 3).trainable, 1.846);
    near_ref(r, "rank 4 total", count_params(v, flap, 4, 3).total, 90.704);
    near_ref(r, "rank 16 total", count_params(v, flap, 16, 3).total, 91.217);
    const double secs = seconds_since(t0);
    r.check(secs < 1.0, "runtime " + fmt(secs, 3) + " s < 1 s");
}

void c3(Report& r) {
    const ModelConfig v = vit(3);
    const double full = reduction_ratio(Strategy::full_ft, Strategy::flap_sam, v, 32, 3);
    const double samed = reduction_ratio(Strategy::lora_dec_ft, Strategy::flap_sam, v, 32, 3);
    r.check(full >= 47 && full <= 50, "FullFT / FLAP-SAM = " + fmt(full, 5) + " in [47, 50]");
    r.check(samed >= 2.7 && samed <= 2.9, "LoRADecFT / FLAP-SAM = " + fmt(samed, 5) + " in [2.7, 2.9]");
    const std::size_t flap_wire = payload_bytes(Strategy::flap_sam, v, 32, 3);
    const std::size_t flap_body = payload_body_bytes(Strategy::flap_sam, v, 32, 3);
    const double hdr = static_cast<double>(flap_wire - flap_body) / flap_wire;
    r.check(hdr < 1e-3, "reference FLAP-SAM message " + std::to_string(flap_wire) + " B, header share " +
                            fmt(100 * hdr, 3) + "% < 0.1%");

    // Simulated traffic at toy scale, default experiment shape.
    ExperimentConfig cfg;
    cfg.rounds = 1;
    const auto t0 = Clock::now();
    const ExperimentResult res = run_experiment(cfg);
    const double secs = seconds_since(t0);
    const ModelConfig toy = cfg.model_config();
    const std::size_t want = payload_bytes(cfg.strategy, toy, cfg.rank, cfg.num_classes) * 2 * cfg.sites;
    const std::size_t got = res.ledger.total_bytes();
    r.check(got == want, "toy round ledger " + std::to_string(got) + " B = analytic " + std::to_string(want) + " B");
    const double toy_body = payload_body_bytes(cfg.strategy, toy, cfg.rank, cfg.num_classes) * 2.0 * cfg.sites;
    r.info("toy header share " + fmt(100 * (got - toy_body) / got, 3) + "% (fixed 64 B + 20 B per adapter)");
    for (Strategy s : kAllStrategies) {
        Fed f(2);
        ServerState srv = f.server(s);
        auto cl = f.clients(s);
        CommLedger led;
        run_round(srv, cl, f.base.model, 1, {}, &led);
        const std::size_t a = payload_bytes(s, toy, 2, 2) * 4;
        if (led.total_bytes() != a) r.check(false, to_string(s) + " ledger " + std::to_string(led.total_bytes()));
    }
    r.check(true, "ledger equals analytic bytes for all 7 strategies (toy, 2 clients)");
    r.check(secs < 5.0, "one toy round (3 clients x 10 steps, whole run incl. eval) " + fmt(secs, 3) + " s < 5 s");
}

void c4(Report& r) {
    Rng rng(41);
    {  // (a)
        ServerState s = lora_server(4, 12, 10);
        const LoRAAdapter q = factors(random_matrix(12, 4, rng), random_matrix(4, 10, rng));
        const LoRAAdapter v = factors(random_matrix(12, 4, rng), random_matrix(4, 10, rng));
        std::vector<ClientUpdate> u{lora_update(0, 1.0, q, v)};
        aggregate_lora(s, u);
        const double e = std::max(frob_diff(global_delta(s), merge_delta(q)),
                                  frob_diff(global_delta(s, Projection::value), merge_delta(v)));
        r.check(e <= 1e-10, "(a) single client round trip ||dW - BA||_F = " + fmt(e, 3));
    }
    {  // (b)
        ServerState s = lora_server(2, 2, 2);
        const LoRAAdapter c1 = factors(Matrix{{1, 0}, {0, 0}}, Matrix{{1, 0}, {0, 0}});
        const LoRAAdapter c2 = factors(Matrix{{0, 0}, {1, 0}}, Matrix{{0, 1}, {0, 0}});
        std::vector<ClientUpdate> u{lora_update(0, 0.5, c1, c1), lora_update(1, 0.5, c2, c2)};
        aggregate_lora(s, u);
        const double e = frob_diff(global_delta(s), Matrix{{0.5, 0}, {0, 0.5}});
        r.check(e <= 1e-10, "(b) orthogonal rank-1 pair at r=2 -> 0.5 I, error " + fmt(e, 3));
    }
    const std::size_t r_ = 3, d = 16, dp = 12, k = 4;
    std::vector<LoRAAdapter> q, v;
    for (std::size_t i = 0; i < k; ++i) {
        q.push_back(factors(random_matrix(d, r_, rng), random_matrix(r_, dp, rng)));
        v.push_back(factors(random_matrix(d, r_, rng), random_matrix(r_, dp, rng)));
    }
    const double w[] = {0.1, 0.2, 0.3, 0.4};
    auto agg = [&](const std::vector<LoRAAdapter>& qs, std::vector<LayerResidual>* res) {
        ServerState s = lora_server(r_, d, dp);
        std::vector<ClientUpdate> u;
        for (std::uint32_t i = 0; i < k; ++i) u.push_back(lora_update(i, w[i], qs[i], v[i]));
        auto out = aggregate_lora(s, u);
        if (res) *res = out;
        return global_delta(s);
    };
    std::vector<LayerResidual> residuals;
    const Matrix base = agg(q, &residuals);
    {  // (c)
        double worst = 0;
        for (int trial = 0; trial < 20; ++trial) {
            auto g = q;
            for (std::size_t i = 0; i < k; ++i) {
                // Well-conditioned G = Q diag(s) Q^T, inverse Q diag(1/s) Q^T.
                const SVDResult sv = svd(random_matrix(r_, r_, rng));
                std::uniform_real_distribution<double> sc(0.3, 3.0);
                Matrix dg(r_, r_), dinv(r_, r_);
                for (std::size_t j = 0; j < r_; ++j) {
                    dg(j, j) = sc(rng);
                    dinv(j, j) = 1.0 / dg(j, j);
                }
                const Matrix gm = matmul(matmul(sv.u, dg), transpose(sv.u));
                const Matrix gi = matmul(matmul(sv.u, dinv), transpose(sv.u));
                g[i] = factors(matmul(q[i].b_factor, gm), matmul(gi, q[i].a_factor));
            }
            worst = std::max(worst, frob_diff(agg(g, nullptr), base));
        }
        r.check(worst <= 1e-9, "(c) gauge invariance over 20 random (BG, G^-1 A) sets, worst " + fmt(worst, 3));
    }
    {  // (d)
        Matrix avg(d, dp);
        for (std::size_t i = 0; i < k; ++i) {
            const Matrix m = merge_delta(q[i]);
            for (std::size_t j = 0; j < m.size(); ++j) avg[j] += w[i] * m[j];
        }
        const double res = residuals.at(0).residual;
        const double logged = frob_diff(avg, base);
        r.check(std::abs(res - logged) <= 1e-10, "(d) logged residual " + fmt(res, 8) + " = ||avg - BA||_F " +
                                                     fmt(logged, 8));
        double best_competitor = INFINITY;
        for (int trial = 0; trial < 500; ++trial) {
            Matrix comp;
            if (trial % 2 == 0) {
                comp = matmul(random_matrix(d, r_, rng), random_matrix(r_, dp, rng));
            } else {
                // Perturb the optimal factors.
                const SVDResult sv = svd(avg);
                Matrix b(d, r_), a(r_, dp);
                for (std::size_t i = 0; i < d; ++i)
                    for (std::size_t j = 0; j < r_; ++j) b(i, j) = sv.u(i, j) * sv.sigma[j];
                for (std::size_t i = 0; i < r_; ++i)
                    for (std::size_t j = 0; j < dp; ++j) a(i, j) = sv.vt(i, j);
                const double eps = 1e-3 * (1 + trial % 7);
                const Matrix nb = random_matrix(d, r_, rng, eps), na = random_matrix(r_, dp, rng, eps);
                for (std::size_t i = 0; i < b.size(); ++i) b[i] += nb[i];
                for (std::size_t i = 0; i < a.size(); ++i) a[i] += na[i];
                comp = matmul(b, a);
            }
            best_competitor = std::min(best_competitor, frob_diff(avg, comp));
        }
        r.check(res <= best_competitor, "(d) residual " + fmt(res, 8) + " <= best of 500 rank-" + std::to_string(r_) +
                                            " competitors " + fmt(best_competitor, 8));
    }
}

void c5(Report& r) {
    const ModelConfig toy = ModelConfig::toy();
    Rng rng(51);
    BuiltModel base = build_model(toy, rng);
    std::normal_distribution<double> g(0.0, 0.1);
    for (auto& [n, e] : base.registry)
        for (double& x : e.value.values()) x += g(rng);
    std::size_t compared = 0;
    bool same = true;
    for (Strategy s : kAllStrategies) {
        if (!mask_for(s).uses_lora) continue;
        for (std::size_t rank = 1; rank <= max_lora_rank(toy); ++rank) {
            Rng init(rank);
            const LearnerState l = make_learner(base, s, rank, {}, init);
            for (int t = 0; t < 3; ++t) {
                const Matrix vol = random_matrix(toy.input_slices, toy.pixels(), rng);
                const Matrix a = base.model.forward(base.registry, nullptr, vol);
                const Matrix b = base.model.forward(l.registry, l.adapter_ptr(), vol);
                same = same && a.size() == b.size() &&
                       std::memcmp(a.values().data(), b.values().data(), a.size() * sizeof(double)) == 0;
                ++compared;
            }
        }
    }
    r.check(same, "fresh adapters: logits bit-identical to the base model (" + std::to_string(compared) +
                      " forwards, LoRA strategies, ranks 1.." + std::to_string(max_lora_rank(toy)) + ")");
}

void c6(Report& r) {
    Fed f(3);
    for (Strategy s : kAllStrategies) {
        ServerState srv = f.server(s);
        auto cl = f.clients(s);
        const std::string before = frozen_digest(f.base.registry, srv.mask);
        for (int round = 0; round < 10; ++round) run_round(srv, cl, f.base.model, 2, {});
        LearnerState view;
        view.registry = f.base.registry;
        view.mask = srv.mask;
        apply_global(srv, view);
        bool ok = frozen_digest(view.registry, srv.mask) == before;
        for (const auto& c : cl) ok = ok && frozen_digest(c.learner.registry, srv.mask) == before;
        // The trainable part did move.
        bool moved = false;
        for (const auto& [n, m] : srv.global.dense) moved = moved || !(m == f.base.registry.at(n).value);
        if (srv.mask.uses_lora)
            for (const auto& [k, a] : *srv.global.adapters) moved = moved || fedpeft::testing::max_abs(merge_delta(a)) > 0;
        r.check(ok && moved, to_string(s) + " frozen sha256 " + before.substr(0, 16) + "... unchanged after 10 rounds" +
                                 (moved ? "" : " (trainable part did not move)"));
    }
}

void c7(Report& r) {
    ModelConfig cfg = ModelConfig::toy();
    cfg.num_classes = 3;
    Rng rng(71);
    BuiltModel built = build_model(cfg, rng);
    std::normal_distribution<double> g(0.0, 0.1);
    for (auto& [n, e] : built.registry)
        for (double& x : e.value.values()) x += g(rng);
    AdapterSet adapters = make_adapters(cfg, 2, {}, rng);
    for (auto& [k, a] : adapters) a.b_factor = random_matrix(a.b_factor.rows(), a.b_factor.cols(), rng, 0.1);
    const Matrix volume = random_matrix(cfg.input_slices, cfg.pixels(), rng);
    const Matrix probe = random_matrix(cfg.num_classes, cfg.pixels(), rng);

    for (Strategy s : kAllStrategies) {
        const StrategyMask m = mask_for(s);
        AdapterSet* ads = m.uses_lora ? &adapters : nullptr;
        LossFn loss = [&](const Matrix& logits, Matrix& d) {
            double l = 0;
            for (std::size_t i = 0; i < logits.size(); ++i) l += probe[i] * logits[i];
            d = probe;
            return l;
        };
        auto value = [&] {
            const Matrix lg = built.model.forward(built.registry, ads, volume);
            double l = 0;
            for (std::size_t i = 0; i < lg.size(); ++i) l += probe[i] * lg[i];
            return l;
        };
        double floor = 0;
        {
            const Matrix lg = built.model.forward(built.registry, ads, volume);
            for (std::size_t i = 0; i < lg.size(); ++i) floor += std::abs(probe[i] * lg[i]);
            floor *= 1e-6;
        }
        const auto refs = trainable_params(built.registry, m, ads);
        GradientMap grads;
        built.model.forward_backward(built.registry, ads, volume, loss, refs, grads);
        std::set<Group> seen;
        std::size_t checked = 0, factors_checked = 0;
        double worst = 0;
        const double h = 1e-5;
        for (const auto& ref : refs) {
            Matrix& p = param_value(built.registry, ads, ref);
            const Matrix& gr = grads.at(ref);
            if (ref.kind == ParamRef::Kind::dense) seen.insert(built.registry.at(ref.name).group);
            else ++factors_checked;
            std::uniform_int_distribution<std::size_t> pick(0, p.size() - 1);
            for (int rep = 0; rep < 3; ++rep) {
                const std::size_t i = pick(rng);
                const double keep = p[i];
                p[i] = keep + h;
                const double up = value();
                p[i] = keep - h;
                const double down = value();
                p[i] = keep;
                worst = std::max(worst, rel_err(gr[i], (up - down) / (2 * h), floor));
                ++checked;
            }
        }
        bool groups = true;
        for (Group grp : kAllGroups)
            if (m.has_group(grp) && !seen.contains(grp)) groups = false;
        r.check(worst <= 1e-4 && groups, to_string(s) + ": " + std::to_string(checked) + " coords over " +
                                             std::to_string(refs.size()) + " tensors (" + std::to_string(factors_checked) +
                                             " adapter factors), worst rel err " + fmt(worst, 3) +
                                             (groups ? "" : ", missing a group"));
    }
    r.info("relative error uses a floor of 1e-6 * sum|probe * logits| for entries whose exact gradient is 0");
}

void c8(Report& r) {
    Fed f(1);
    const std::size_t rounds = 3, steps = 2;
    for (Strategy s : kAllStrategies) {
        const bool lora = mask_for(s).uses_lora;
        const std::size_t R = lora ? 1 : rounds;
        ServerState srv = f.server(s);
        auto cl = f.clients(s);
        for (std::size_t i = 0; i < R; ++i) run_round(srv, cl, f.base.model, steps, {});
        LearnerState local = f.local_learner(s);
        Rng rng = f.local_rng();
        train_local(f.base.model, local, f.sites[0].train, R * steps, {}, rng);
        double worst = 0;
        for (const auto& [n, m] : srv.global.dense) worst = std::max(worst, max_diff(m, local.registry.at(n).value));
        if (lora)
            for (const auto& [k, a] : *srv.global.adapters)
                worst = std::max(worst, max_diff(merge_delta(a), merge_delta(local.adapters->at(k))));
        r.check(worst <= 1e-9, to_string(s) + " R=" + std::to_string(R) + " x " + std::to_string(steps) +
                                   " steps: max |fed - local| " + fmt(worst, 3) + (lora ? " (merged dW)" : ""));
    }
    // Past round 1 the server re-gauges the factors, so Adam moments no longer
    // line up with the local run.
    ServerState srv = f.server(Strategy::flap_sam);
    auto cl = f.clients(Strategy::flap_sam);
    for (std::size_t i = 0; i < rounds; ++i) run_round(srv, cl, f.base.model, steps, {});
    LearnerState local = f.local_learner(Strategy::flap_sam);
    Rng rng = f.local_rng();
    train_local(f.base.model, local, f.sites[0].train, rounds * steps, {}, rng);
    double drift = 0, scale = 0;
    for (const auto& [k, a] : *srv.global.adapters) {
        drift = std::max(drift, max_diff(merge_delta(a), merge_delta(local.adapters->at(k))));
        scale = std::max(scale, fedpeft::testing::max_abs(merge_delta(local.adapters->at(k))));
    }
    r.info("FLAP-SAM R=3 merged dW drift " + fmt(drift, 3) + " (max |dW| " + fmt(scale, 3) + ")");
}

void c9(Report& r) {
    const auto t0 = Clock::now();
    int wins = 0;
    const std::uint64_t seeds[] = {0, 1, 2, 3, 4};
    for (std::uint64_t seed : seeds) {
        ExperimentConfig cfg;  // FLAP-SAM, rank 4, 3 sites, 8 train / 16 test, 30 rounds x 10 steps, lr 1e-3
        cfg.setting = Setting::all;
        cfg.seed = seed;
        const ExperimentResult res = run_experiment(cfg);
        const ResultRow& local = res.table.rows[0];
        const ResultRow& central = res.table.rows[1];
        const ResultRow& fed = res.table.rows[2];
        const bool win = fed.mean_dice >= local.mean_dice;
        wins += win ? 1 : 0;
        std::ostringstream os;
        os << "seed " << seed << ": federated " << fmt(fed.mean_dice) << " vs local " << fmt(local.mean_dice)
           << (win ? "  fed >= local" : "  local wins") << "  (centralized " << fmt(central.mean_dice) << ")";
        r.info(os.str());
        std::ostringstream gap;
        gap << "seed " << seed << ": train - test dice gap, local " << fmt(local.train_dice - local.mean_dice)
            << ", federated " << fmt(fed.train_dice - fed.mean_dice);
        r.info(gap.str());
    }
    const double secs = seconds_since(t0);
    r.check(wins >= 3, "federated >= local on " + std::to_string(wins) + " of 5 seeds (majority needed)");
    r.check(secs < 600, "5 seeds x (local + centralized + federated) in " + fmt(secs, 4) + " s < 600 s");
}

void c10(Report& r) {
    namespace fs = std::filesystem;
    ExperimentConfig cfg;
    cfg.setting = Setting::all;
    cfg.rounds = 3;
    cfg.local_steps = 3;
    cfg.seed = 2024;
    cfg.ranks = {1, 4};
    std::vector<fs::path> dirs;
    for (int i = 0; i < 2; ++i) {
        ExperimentConfig c = cfg;
        const fs::path d = fs::temp_directory_path() / ("fedpeft_acceptance_" + std::to_string(i));
        fs::remove_all(d);
        c.out = d.string();
        write_outputs(c, run_experiment(c), "results");
        write_outputs(c, run_ablation(c), "ablation");
        dirs.push_back(d);
    }
    for (const char* f : {"results.txt", "results.csv", "ablation.txt", "ablation.csv", "ledger.csv", "transcript.jsonl"}) {
        const fs::path a = dirs[0] / f, b = dirs[1] / f;
        const bool ok = fs::exists(a) && fs::exists(b) && io::read_text(a.string()) == io::read_text(b.string());
        r.check(ok, std::string(f) + " byte-identical across reruns (" +
                        std::to_string(fs::exists(a) ? fs::file_size(a) : 0) + " B)");
    }
    // `parallel` is part of the config (and its hash), so compare the rest.
    ExperimentConfig t = cfg;
    t.parallel = true;
    const ExperimentResult serial = run_experiment(cfg), threaded = run_experiment(t);
    r.check(serial.table.rows == threaded.table.rows && serial.transcript == threaded.transcript &&
                serial.ledger.to_csv() == threaded.ledger.to_csv(),
            "threaded clients give the same rows, ledger and transcript");
}

}  // namespace

int main() {
    std::cout << "fedpeft acceptance\n";
    criterion(1, "reference parameter counts (2 labels, rank 32)", c1);
    criterion(2, "3-label counts and rank ablation", c2);
    criterion(3, "communication ratios and ledger", c3);
    criterion(4, "LoRA aggregation", c4);
    criterion(5, "zero-delta adapter init", c5);
    criterion(6, "frozen partition conserved over 10 rounds", c6);
    criterion(7, "gradients vs central differences", c7);
    criterion(8, "single-client federation equals local training", c8);
    criterion(9, "collaborative gain on non-iid sites", c9);
    criterion(10, "determinism", c10);
    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criterion(s) failed") << "\n";
    return failures;
}
