// Copyright (c) 2026 The fedpeft Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "fedpeft/model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>
#include <sstream>

#include "fedpeft/autodiff.hpp"
#include "fedpeft/byteio.hpp"
#include "fedpeft/errors.hpp"
#include "fedpeft/hashing.hpp"

namespace fedpeft {

namespace {

constexpr double kLayerNormEps = 1e-6;
constexpr std::uint64_t kPositionalSeed = 0x5EED'F0E1'2024ULL;
constexpr std::uint32_t kCheckpointVersion = 1;

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s;
}

unsigned bit(Group g) { return 1u << static_cast<unsigned>(g); }

// ---------------------------------------------------------------- layout

struct LayoutBuilder {
    std::vector<ParamSpec> specs;

    void add(std::string name, Group g, std::size_t rows, std::size_t cols, bool attention = false) {
        specs.push_back(ParamSpec{std::move(name), g, attention, rows, cols});
    }
    void norm(const std::string& prefix, Group g, std::size_t dim) {
        add(prefix + ".weight", g, dim, 1);
        add(prefix + ".bias", g, dim, 1);
    }
    void linear(const std::string& prefix, Group g, std::size_t out, std::size_t in, bool bias = true,
                bool attention = false) {
        add(prefix + ".weight", g, out, in, attention);
        if (bias) add(prefix + ".bias", g, out, 1, attention);
    }
    // q/k/v map embed -> internal, o maps back.
    void attention(const std::string& prefix, Group g, std::size_t embed, std::size_t internal) {
        add(prefix + ".wq", g, internal, embed, true);
        add(prefix + ".bq", g, internal, 1, true);
        add(prefix + ".wk", g, internal, embed, true);
        add(prefix + ".bk", g, internal, 1, true);
        add(prefix + ".wv", g, internal, embed, true);
        add(prefix + ".bv", g, internal, 1, true);
        add(prefix + ".wo", g, embed, internal, true);
        add(prefix + ".bo", g, embed, 1, true);
    }
    void mlp3(const std::string& prefix, Group g, std::size_t in, std::size_t hidden, std::size_t out) {
        linear(prefix + ".fc1", g, hidden, in);
        linear(prefix + ".fc2", g, hidden, hidden);
        linear(prefix + ".fc3", g, out, hidden);
    }
};

std::string block_prefix(std::size_t b) { return "ie.block" + std::to_string(b); }
std::string layer_prefix(std::size_t l) { return "md.tr.layer" + std::to_string(l); }

// ---------------------------------------------------------------- fixed maps

// Spatial index maps and positional encodings shared by every forward pass.
struct ForwardMaps {
    ad::GatherMap patchify;
    ad::GatherMap im2col;
    std::vector<ad::GatherMap> pixel_shuffle;  // one per upscaling stage
    Matrix image_pe;                           // decoder_dim x tokens
    Matrix prompt_pe;                          // decoder_dim x prompt points
};

Matrix fourier_features(const ModelConfig& cfg, const std::vector<std::pair<double, double>>& coords) {
    // Random-Fourier positional encoding with a fixed seed: not a parameter.
    const std::size_t half = cfg.decoder_dim / 2;
    Rng rng(kPositionalSeed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<double> fx(half), fy(half);
    for (std::size_t j = 0; j < half; ++j) {
        fx[j] = gauss(rng);
        fy[j] = gauss(rng);
    }
    Matrix out(cfg.decoder_dim, coords.size());
    for (std::size_t c = 0; c < coords.size(); ++c) {
        const double x = 2.0 * coords[c].first - 1.0;
        const double y = 2.0 * coords[c].second - 1.0;
        for (std::size_t j = 0; j < half; ++j) {
            const double angle = 2.0 * std::numbers::pi * (fx[j] * x + fy[j] * y);
            out(j, c) = std::sin(angle);
            out(j + half, c) = std::cos(angle);
        }
    }
    return out;
}

ForwardMaps make_maps(const ModelConfig& cfg) {
    ForwardMaps m;
    const std::size_t p = cfg.patch_size;
    const std::size_t s = cfg.grid();
    const std::size_t t = cfg.tokens();
    const std::size_t w = cfg.image_size;
    const std::size_t chans = cfg.input_slices;

    {
        auto map = std::make_shared<std::vector<std::ptrdiff_t>>(chans * p * p * t);
        for (std::size_t c = 0; c < chans; ++c)
            for (std::size_t py = 0; py < p; ++py)
                for (std::size_t px = 0; px < p; ++px)
                    for (std::size_t ti = 0; ti < s; ++ti)
                        for (std::size_t tj = 0; tj < s; ++tj) {
                            const std::size_t row = c * p * p + py * p + px;
                            const std::size_t col = ti * s + tj;
                            const std::size_t src = c * w * w + (ti * p + py) * w + (tj * p + px);
                            (*map)[row * t + col] = static_cast<std::ptrdiff_t>(src);
                        }
        m.patchify = map;
    }
    {
        const std::size_t k = cfg.neck_kernel;
        const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
        const std::size_t dd = cfg.decoder_dim;
        auto map = std::make_shared<std::vector<std::ptrdiff_t>>(dd * k * k * t, -1);
        for (std::size_t c = 0; c < dd; ++c)
            for (std::size_t ky = 0; ky < k; ++ky)
                for (std::size_t kx = 0; kx < k; ++kx)
                    for (std::size_t i = 0; i < s; ++i)
                        for (std::size_t j = 0; j < s; ++j) {
                            const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(i + ky) - pad;
                            const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(j + kx) - pad;
                            if (ii < 0 || jj < 0 || ii >= static_cast<std::ptrdiff_t>(s) ||
                                jj >= static_cast<std::ptrdiff_t>(s))
                                continue;
                            const std::size_t row = c * k * k + ky * k + kx;
                            const std::size_t col = i * s + j;
                            (*map)[row * t + col] = static_cast<std::ptrdiff_t>(c * t) + ii * static_cast<std::ptrdiff_t>(s) + jj;
                        }
        m.im2col = map;
    }
    {
        std::size_t side = s;
        for (std::size_t cout : cfg.up_channels) {
            const std::size_t in_px = side * side;
            const std::size_t out_side = 2 * side;
            auto map = std::make_shared<std::vector<std::ptrdiff_t>>(cout * 4 * in_px);
            for (std::size_t c = 0; c < cout; ++c)
                for (std::size_t i = 0; i < side; ++i)
                    for (std::size_t j = 0; j < side; ++j)
                        for (std::size_t a = 0; a < 2; ++a)
                            for (std::size_t b = 0; b < 2; ++b) {
                                const std::size_t out_col = (2 * i + a) * out_side + (2 * j + b);
                                const std::size_t src_row = (a * 2 + b) * cout + c;
                                const std::size_t src_col = i * side + j;
                                (*map)[c * 4 * in_px + out_col] = static_cast<std::ptrdiff_t>(src_row * in_px + src_col);
                            }
            m.pixel_shuffle.push_back(map);
            side = out_side;
        }
    }
    m.image_pe = image_positional_encoding(cfg);
    m.prompt_pe = prompt_positional_encoding(cfg);
    return m;
}

// ---------------------------------------------------------------- graph

// Builds one forward graph on a tape, creating a leaf per parameter on first use.
class Graph {
public:
    Graph(ad::Tape& tape, const ModelConfig& cfg, const ForwardMaps& maps, const ParamRegistry& reg,
          const AdapterSet* adapters, std::span<const ParamRef> wrt)
        : t_(tape), cfg_(cfg), maps_(maps), reg_(reg), adapters_(adapters) {
        for (const auto& r : wrt) wrt_.insert({r, {}});
    }

    ad::Var build(const Matrix& volume) {
        const ModelConfig& c = cfg_;
        const std::size_t s = c.grid();
        if (volume.rows() != c.input_slices || volume.cols() != c.pixels()) {
            throw ShapeError("forward: input " + volume.shape_str() + ", expected " + std::to_string(c.input_slices) +
                             "x" + std::to_string(c.pixels()));
        }

        // Image encoder.
        ad::Var x0 = t_.constant(volume);
        ad::Var patches = t_.gather(x0, maps_.patchify, c.input_slices * c.patch_size * c.patch_size, c.tokens());
        ad::Var x = linear("ie.patch_embed", patches);
        x = t_.add(x, param("ie.pos_embed"));
        for (std::size_t b = 0; b < c.encoder_blocks; ++b) {
            const std::string pre = block_prefix(b);
            ad::Var h = norm(pre + ".norm1", x);
            x = t_.add(x, attention(pre + ".attn", h, h, h, c.num_heads, static_cast<std::uint32_t>(b + 1),
                                    c.use_rel_pos ? s : 0));
            ad::Var h2 = norm(pre + ".norm2", x);
            x = t_.add(x, linear(pre + ".mlp.fc2", t_.gelu(linear(pre + ".mlp.fc1", h2))));
        }
        ad::Var y = t_.matmul(param("ie.neck.conv1.weight"), x);
        y = norm("ie.neck.ln1", y);
        y = t_.gather(y, maps_.im2col, c.decoder_dim * c.neck_kernel * c.neck_kernel, c.tokens());
        y = t_.matmul(param("ie.neck.conv2.weight"), y);
        y = norm("ie.neck.ln2", y);

        // Prompt stand-in: a fixed grid of foreground points plus the learned
        // "no mask" dense embedding.
        ad::Var keys = t_.add_col(y, param("pe.no_mask_embed"));
        ad::Var key_pe = t_.constant(maps_.image_pe);
        ad::Var fg_label = t_.slice_cols(param("pe.point_embeddings"), 1, 1);
        ad::Var sparse = t_.add_col(t_.constant(maps_.prompt_pe), fg_label);

        // Mask decoder.
        std::vector<ad::Var> token_parts{param("md.iou_token")};
        for (std::size_t k = 0; k < c.foreground_classes(); ++k)
            token_parts.push_back(param("md.hyp.class" + std::to_string(k) + ".mask_token"));
        token_parts.push_back(sparse);
        ad::Var queries = t_.concat_cols(token_parts);
        const ad::Var query_pe = queries;

        std::uint32_t site = static_cast<std::uint32_t>(c.encoder_blocks);
        for (std::size_t l = 0; l < c.decoder_blocks; ++l) {
            const std::string pre = layer_prefix(l);
            ad::Var q = t_.add(queries, query_pe);
            queries = t_.add(queries, attention(pre + ".self_attn", q, q, queries, c.decoder_heads, ++site, 0));
            queries = norm(pre + ".norm1", queries);

            q = t_.add(queries, query_pe);
            ad::Var k = t_.add(keys, key_pe);
            queries = t_.add(queries, attention(pre + ".cross_t2i", q, k, keys, c.decoder_heads, ++site, 0));
            queries = norm(pre + ".norm2", queries);

            queries = t_.add(queries, linear(pre + ".mlp.fc2", t_.gelu(linear(pre + ".mlp.fc1", queries))));
            queries = norm(pre + ".norm3", queries);

            q = t_.add(queries, query_pe);
            k = t_.add(keys, key_pe);
            keys = t_.add(keys, attention(pre + ".cross_i2t", k, q, queries, c.decoder_heads, ++site, 0));
            keys = norm(pre + ".norm4", keys);
        }
        {
            ad::Var q = t_.add(queries, query_pe);
            ad::Var k = t_.add(keys, key_pe);
            queries = t_.add(queries, attention("md.tr.final_attn", q, k, keys, c.decoder_heads, ++site, 0));
            queries = norm("md.tr.norm_final", queries);
        }

        // Upscaling path: four 2x transposed-convolution stages.
        ad::Var up = keys;
        for (std::size_t st = 0; st < c.up_channels.size(); ++st) {
            const std::string pre = "md.up.stage" + std::to_string(st);
            const std::size_t cout = c.up_channels[st];
            ad::Var z = t_.matmul(param(pre + ".weight"), up);
            const std::size_t in_px = t_.value(z).cols();
            z = t_.gather(z, maps_.pixel_shuffle[st], cout, 4 * in_px);
            z = t_.add_col(z, param(pre + ".bias"));
            if (st + 1 < c.up_channels.size()) z = norm(pre + ".ln", z);
            up = t_.gelu(z);
        }

        // Hypernetwork head: one mask per foreground class against the upscaled map.
        std::vector<ad::Var> rows{t_.constant(Matrix(1, c.pixels()))};
        for (std::size_t k = 0; k < c.foreground_classes(); ++k) {
            const std::string pre = "md.hyp.class" + std::to_string(k);
            ad::Var tok = t_.slice_cols(queries, 1 + k, 1);
            ad::Var h = t_.gelu(linear(pre + ".fc1", tok));
            h = t_.gelu(linear(pre + ".fc2", h));
            h = linear(pre + ".fc3", h);
            rows.push_back(t_.matmul(t_.transpose(h), up));
        }
        return t_.concat_rows(rows);
    }

    void collect(GradientMap& grads) const {
        for (const auto& [ref, var] : wrt_) {
            if (!var) continue;
            Matrix g = t_.grad(*var);
            auto it = grads.find(ref);
            if (it == grads.end()) grads.emplace(ref, std::move(g));
            else it->second += g;
        }
    }

    // Parameters listed in `wrt` that the graph never touched still get a
    // zero gradient of the right shape.
    void collect_missing(GradientMap& grads) const {
        for (const auto& [ref, var] : wrt_) {
            if (var || grads.contains(ref)) continue;
            const Matrix& v = param_value(reg_, adapters_, ref);
            grads.emplace(ref, Matrix(v.rows(), v.cols()));
        }
    }

private:
    ad::Var leaf_for(const ParamRef& ref, const Matrix& value) {
        auto it = wrt_.find(ref);
        if (it == wrt_.end()) return t_.leaf(value, false);
        if (!it->second) it->second = t_.leaf(value, true);
        return *it->second;
    }

    ad::Var param(const std::string& name) {
        auto cached = dense_.find(name);
        if (cached != dense_.end()) return cached->second;
        ParamRef ref{ParamRef::Kind::dense, name, {}};
        ad::Var v = leaf_for(ref, reg_.at(name).value);
        dense_.emplace(name, v);
        return v;
    }

    ad::Var linear(const std::string& prefix, ad::Var x) {
        return t_.add_col(t_.matmul(param(prefix + ".weight"), x), param(prefix + ".bias"));
    }

    ad::Var norm(const std::string& prefix, ad::Var x) {
        return t_.layer_norm_cols(x, param(prefix + ".weight"), param(prefix + ".bias"), kLayerNormEps);
    }

    // W x + b, plus scale * B (A x) when an adapter is attached.
    ad::Var projection(const std::string& w, const std::string& b, ad::Var x, AdapterKey key) {
        ad::Var out = t_.add_col(t_.matmul(param(w), x), param(b));
        const LoRAAdapter* ad = adapters_ ? adapters_->find(key) : nullptr;
        if (!ad) return out;
        ad::Var a = leaf_for(ParamRef{ParamRef::Kind::lora_a, {}, key}, ad->a_factor);
        ad::Var bf = leaf_for(ParamRef{ParamRef::Kind::lora_b, {}, key}, ad->b_factor);
        ad::Var low = t_.matmul(bf, t_.matmul(a, x));
        return t_.add(out, t_.scale(low, ad->scale));
    }

    ad::Var attention(const std::string& pre, ad::Var q_in, ad::Var k_in, ad::Var v_in, std::size_t heads,
                      std::uint32_t layer, std::size_t rel_grid) {
        ad::Var q = projection(pre + ".wq", pre + ".bq", q_in, AdapterKey{layer, Projection::query});
        ad::Var k = t_.add_col(t_.matmul(param(pre + ".wk"), k_in), param(pre + ".bk"));
        ad::Var v = projection(pre + ".wv", pre + ".bv", v_in, AdapterKey{layer, Projection::value});
        const std::size_t internal = t_.value(q).rows();
        const std::size_t dh = internal / heads;
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
        std::vector<ad::Var> outs;
        outs.reserve(heads);
        for (std::size_t h = 0; h < heads; ++h) {
            ad::Var qh = t_.slice_rows(q, h * dh, dh);
            ad::Var kh = t_.slice_rows(k, h * dh, dh);
            ad::Var vh = t_.slice_rows(v, h * dh, dh);
            ad::Var scores = t_.scale(t_.matmul(t_.transpose(qh), kh), inv_sqrt);
            if (rel_grid > 0) {
                scores = t_.add(scores, t_.rel_pos_bias(qh, param(pre + ".rel_pos_h"), param(pre + ".rel_pos_w"), rel_grid));
            }
            ad::Var probs = t_.softmax_rows(scores);
            outs.push_back(t_.matmul(vh, t_.transpose(probs)));
        }
        ad::Var merged = heads == 1 ? outs[0] : t_.concat_rows(outs);
        return t_.add_col(t_.matmul(param(pre + ".wo"), merged), param(pre + ".bo"));
    }

    ad::Tape& t_;
    const ModelConfig& cfg_;
    const ForwardMaps& maps_;
    const ParamRegistry& reg_;
    const AdapterSet* adapters_;
    std::map<ParamRef, std::optional<ad::Var>> wrt_;
    std::unordered_map<std::string, ad::Var> dense_;
};

}  // namespace

// ---------------------------------------------------------------- enums

std::string to_string(Group g) {
    switch (g) {
        case Group::ie_attention: return "IE-AT";
        case Group::ie_other: return "IE-NA";
        case Group::prompt: return "PE";
        case Group::md_transformer: return "MD-TR";
        case Group::md_upscale: return "MD-UP";
        case Group::md_hypernet: return "MD-HYP";
    }
    return "?";
}

Group group_from_string(const std::string& s) {
    for (Group g : kAllGroups)
        if (to_string(g) == s) return g;
    throw ConfigError("unknown parameter group '" + s + "'");
}

std::string to_string(Strategy s) {
    switch (s) {
        case Strategy::full_ft: return "FullFT";
        case Strategy::attn_ft: return "AttnFT";
        case Strategy::dec_ft: return "DecFT";
        case Strategy::lora_ft: return "LoRAFT";
        case Strategy::lora_dec_ft: return "LoRADecFT";
        case Strategy::pdec_ft: return "PDecFT";
        case Strategy::flap_sam: return "FLAP-SAM";
    }
    return "?";
}

Strategy strategy_from_string(const std::string& s) {
    std::string key;
    for (char ch : lower(s))
        if (ch != '-' && ch != '_') key.push_back(ch);
    for (Strategy st : kAllStrategies) {
        std::string name;
        for (char ch : lower(to_string(st)))
            if (ch != '-') name.push_back(ch);
        if (name == key) return st;
    }
    throw ConfigError("unknown strategy '" + s + "'");
}

bool StrategyMask::trains(Group g, bool attention) const noexcept {
    if (!has_group(g)) return false;
    if (md_attention_only && g == Group::md_transformer) return attention;
    return true;
}

StrategyMask mask_for(Strategy s) {
    StrategyMask m;
    m.strategy = s;
    const unsigned decoder = bit(Group::md_transformer) | bit(Group::md_upscale) | bit(Group::md_hypernet);
    const unsigned head = bit(Group::md_upscale) | bit(Group::md_hypernet);
    switch (s) {
        case Strategy::full_ft:
            m.group_bits = static_cast<std::uint8_t>(bit(Group::ie_attention) | bit(Group::ie_other) | bit(Group::prompt) | decoder);
            break;
        case Strategy::attn_ft:
            // Encoder attention plus the decoder's attention layers.
            m.group_bits = static_cast<std::uint8_t>(bit(Group::ie_attention) | bit(Group::md_transformer));
            m.md_attention_only = true;
            break;
        case Strategy::dec_ft: m.group_bits = static_cast<std::uint8_t>(decoder); break;
        case Strategy::lora_ft: m.uses_lora = true; break;
        case Strategy::lora_dec_ft:
            m.group_bits = static_cast<std::uint8_t>(decoder);
            m.uses_lora = true;
            break;
        case Strategy::pdec_ft: m.group_bits = static_cast<std::uint8_t>(head); break;
        case Strategy::flap_sam:
            m.group_bits = static_cast<std::uint8_t>(head);
            m.uses_lora = true;
            break;
    }
    return m;
}

// ---------------------------------------------------------------- config

ModelConfig ModelConfig::toy() {
    ModelConfig c;
    c.name = "toy";
    return c;
}

ModelConfig ModelConfig::vit_b_paper() {
    ModelConfig c;
    c.name = "vit_b_paper";
    c.embed_dim = 768;
    c.encoder_blocks = 12;
    c.num_heads = 12;
    c.mlp_ratio = 4;
    c.patch_size = 16;
    c.image_size = 224;
    c.input_slices = 5;
    c.patch_in_chans = 3;  // RGB patch embedding; slices are stacked outside the encoder
    c.use_rel_pos = true;
    c.decoder_dim = 256;
    c.decoder_blocks = 2;
    c.decoder_heads = 8;
    c.decoder_mlp_dim = 2048;
    c.attention_downsample = 2;
    c.neck_kernel = 3;
    c.up_channels = {160, 64, 16, 8};
    c.iou_head_outputs = 4;
    c.mask_in_chans = 16;
    c.prompt_grid = 4;
    c.num_classes = 2;
    return c;
}

ModelConfig ModelConfig::by_name(const std::string& name) {
    if (name == "toy") return toy();
    if (name == "vit_b_paper") return vit_b_paper();
    throw ConfigError("unknown model config '" + name + "' (expected toy or vit_b_paper)");
}

void ModelConfig::validate() const {
    auto fail = [&](const std::string& why) { throw ConfigError("model config '" + name + "': " + why); };
    if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0) fail("embed_dim must be divisible by num_heads");
    if (encoder_blocks == 0) fail("encoder_blocks must be >= 1");
    if (input_slices == 0 || patch_in_chans == 0) fail("input slices must be >= 1");
    if (num_classes == 0) fail("num_classes must be >= 1");
    if (patch_size != 16) fail("patch_size must be 16 to match the 16x upscaling path");
    if (image_size == 0 || image_size % patch_size != 0) fail("image_size must be a multiple of patch_size");
    if (up_channels.size() != 4) fail("upscaling path needs exactly four stages");
    if (decoder_dim == 0 || decoder_dim % 2 != 0) fail("decoder_dim must be even");
    if (decoder_heads == 0 || decoder_dim % decoder_heads != 0) fail("decoder_dim must be divisible by decoder_heads");
    if (attention_downsample == 0 || decoder_dim % attention_downsample != 0 ||
        cross_dim() % decoder_heads != 0)
        fail("cross-attention width must divide by decoder_heads");
    if (neck_kernel % 2 == 0) fail("neck_kernel must be odd");
    if (mask_in_chans < 4 || mask_in_chans % 4 != 0) fail("mask_in_chans must be a positive multiple of 4");
    if (prompt_grid == 0) fail("prompt_grid must be >= 1");
    if (mlp_ratio == 0 || decoder_mlp_dim == 0 || iou_head_outputs == 0) fail("hidden sizes must be >= 1");
    for (std::size_t c : up_channels)
        if (c == 0) fail("upscaling channels must be >= 1");
}

std::string ModelConfig::canonical() const {
    std::ostringstream os;
    os << "name=" << name << ";embed_dim=" << embed_dim << ";encoder_blocks=" << encoder_blocks
       << ";num_heads=" << num_heads << ";mlp_ratio=" << mlp_ratio << ";patch_size=" << patch_size
       << ";image_size=" << image_size << ";input_slices=" << input_slices << ";patch_in_chans=" << patch_in_chans
       << ";use_rel_pos=" << use_rel_pos << ";decoder_dim=" << decoder_dim << ";decoder_blocks=" << decoder_blocks
       << ";decoder_heads=" << decoder_heads << ";decoder_mlp_dim=" << decoder_mlp_dim
       << ";attention_downsample=" << attention_downsample << ";neck_kernel=" << neck_kernel << ";up_channels=";
    for (std::size_t i = 0; i < up_channels.size(); ++i) os << (i ? "," : "") << up_channels[i];
    os << ";iou_head_outputs=" << iou_head_outputs << ";mask_in_chans=" << mask_in_chans
       << ";prompt_grid=" << prompt_grid << ";num_classes=" << num_classes;
    return os.str();
}

std::string ModelConfig::hash() const { return sha256_hex(canonical()); }

// ---------------------------------------------------------------- layout

std::vector<ParamSpec> param_layout(const ModelConfig& c) {
    c.validate();
    LayoutBuilder lb;
    const std::size_t d = c.embed_dim;
    const std::size_t dd = c.decoder_dim;
    const std::size_t p = c.patch_size;

    lb.linear("ie.patch_embed", Group::ie_other, d, c.patch_in_chans * p * p);
    lb.add("ie.pos_embed", Group::ie_other, d, c.tokens());
    for (std::size_t b = 0; b < c.encoder_blocks; ++b) {
        const std::string pre = block_prefix(b);
        lb.norm(pre + ".norm1", Group::ie_other, d);
        lb.attention(pre + ".attn", Group::ie_attention, d, d);
        if (c.use_rel_pos) {
            const std::size_t span = 2 * c.grid() - 1;
            lb.add(pre + ".attn.rel_pos_h", Group::ie_attention, span, d / c.num_heads, true);
            lb.add(pre + ".attn.rel_pos_w", Group::ie_attention, span, d / c.num_heads, true);
        }
        lb.norm(pre + ".norm2", Group::ie_other, d);
        lb.linear(pre + ".mlp.fc1", Group::ie_other, d * c.mlp_ratio, d);
        lb.linear(pre + ".mlp.fc2", Group::ie_other, d, d * c.mlp_ratio);
    }
    lb.linear("ie.neck.conv1", Group::ie_other, dd, d, false);
    lb.norm("ie.neck.ln1", Group::ie_other, dd);
    lb.linear("ie.neck.conv2", Group::ie_other, dd, dd * c.neck_kernel * c.neck_kernel, false);
    lb.norm("ie.neck.ln2", Group::ie_other, dd);

    // Prompt encoder: point-label embeddings, dense no-mask embedding, and
    // the mask-downscaling convolutions (unused without a mask prompt).
    const std::size_t quarter = c.mask_in_chans / 4;
    lb.add("pe.point_embeddings", Group::prompt, dd, 4);
    lb.add("pe.not_a_point", Group::prompt, dd, 1);
    lb.add("pe.no_mask_embed", Group::prompt, dd, 1);
    lb.linear("pe.mask_downscaling.conv1", Group::prompt, quarter, 4);
    lb.norm("pe.mask_downscaling.ln1", Group::prompt, quarter);
    lb.linear("pe.mask_downscaling.conv2", Group::prompt, c.mask_in_chans, quarter * 4);
    lb.norm("pe.mask_downscaling.ln2", Group::prompt, c.mask_in_chans);
    lb.linear("pe.mask_downscaling.conv3", Group::prompt, dd, c.mask_in_chans);

    lb.add("md.iou_token", Group::md_transformer, dd, 1);
    for (std::size_t l = 0; l < c.decoder_blocks; ++l) {
        const std::string pre = layer_prefix(l);
        lb.attention(pre + ".self_attn", Group::md_transformer, dd, dd);
        lb.norm(pre + ".norm1", Group::md_transformer, dd);
        lb.attention(pre + ".cross_t2i", Group::md_transformer, dd, c.cross_dim());
        lb.norm(pre + ".norm2", Group::md_transformer, dd);
        lb.linear(pre + ".mlp.fc1", Group::md_transformer, c.decoder_mlp_dim, dd);
        lb.linear(pre + ".mlp.fc2", Group::md_transformer, dd, c.decoder_mlp_dim);
        lb.norm(pre + ".norm3", Group::md_transformer, dd);
        lb.norm(pre + ".norm4", Group::md_transformer, dd);
        lb.attention(pre + ".cross_i2t", Group::md_transformer, dd, c.cross_dim());
    }
    lb.attention("md.tr.final_attn", Group::md_transformer, dd, c.cross_dim());
    lb.norm("md.tr.norm_final", Group::md_transformer, dd);
    lb.mlp3("md.iou_head", Group::md_transformer, dd, dd, c.iou_head_outputs);

    std::size_t cin = dd;
    for (std::size_t st = 0; st < c.up_channels.size(); ++st) {
        const std::string pre = "md.up.stage" + std::to_string(st);
        const std::size_t cout = c.up_channels[st];
        lb.add(pre + ".weight", Group::md_upscale, 4 * cout, cin);
        lb.add(pre + ".bias", Group::md_upscale, cout, 1);
        if (st + 1 < c.up_channels.size()) lb.norm(pre + ".ln", Group::md_upscale, cout);
        cin = cout;
    }

    for (std::size_t k = 0; k < c.foreground_classes(); ++k) {
        const std::string pre = "md.hyp.class" + std::to_string(k);
        lb.add(pre + ".mask_token", Group::md_hypernet, dd, 1);
        lb.mlp3(pre, Group::md_hypernet, dd, dd, c.up_channels.back());
    }
    return std::move(lb.specs);
}

std::vector<AttentionSite> lora_sites(const ModelConfig& c) {
    std::vector<AttentionSite> out;
    std::uint32_t id = 0;
    for (std::size_t b = 0; b < c.encoder_blocks; ++b)
        out.push_back({++id, block_prefix(b) + ".attn", c.embed_dim, c.embed_dim});
    for (std::size_t l = 0; l < c.decoder_blocks; ++l) {
        out.push_back({++id, layer_prefix(l) + ".self_attn", c.decoder_dim, c.decoder_dim});
        out.push_back({++id, layer_prefix(l) + ".cross_t2i", c.cross_dim(), c.decoder_dim});
        out.push_back({++id, layer_prefix(l) + ".cross_i2t", c.cross_dim(), c.decoder_dim});
    }
    out.push_back({++id, "md.tr.final_attn", c.cross_dim(), c.decoder_dim});
    return out;
}

std::size_t lora_param_count(const ModelConfig& cfg, std::size_t rank) {
    std::size_t n = 0;
    for (const auto& site : lora_sites(cfg)) n += 2 * rank * (site.internal_dim + site.embed_dim);
    return n;
}

std::size_t max_lora_rank(const ModelConfig& cfg) {
    std::size_t best = SIZE_MAX;
    for (const auto& site : lora_sites(cfg)) best = std::min(best, max_rank(site.internal_dim, site.embed_dim));
    return best;
}

AdapterSet make_adapters(const ModelConfig& cfg, std::size_t rank, const LoRAOptions& options, Rng& rng) {
    AdapterSet set;
    for (const auto& site : lora_sites(cfg)) {
        for (Projection target : {Projection::query, Projection::value}) {
            set.insert(AdapterKey{site.layer, target}, init_lora(site.internal_dim, site.embed_dim, rank, options, rng));
        }
    }
    return set;
}

Matrix image_positional_encoding(const ModelConfig& cfg) {
    const std::size_t s = cfg.grid();
    std::vector<std::pair<double, double>> centers;
    for (std::size_t i = 0; i < s; ++i)
        for (std::size_t j = 0; j < s; ++j)
            centers.emplace_back((static_cast<double>(j) + 0.5) / static_cast<double>(s),
                                 (static_cast<double>(i) + 0.5) / static_cast<double>(s));
    return fourier_features(cfg, centers);
}

Matrix prompt_positional_encoding(const ModelConfig& cfg) {
    const std::size_t g = cfg.prompt_grid;
    std::vector<std::pair<double, double>> points;
    for (std::size_t i = 0; i < g; ++i)
        for (std::size_t j = 0; j < g; ++j)
            points.emplace_back((static_cast<double>(j) + 0.5) / static_cast<double>(g),
                                (static_cast<double>(i) + 0.5) / static_cast<double>(g));
    return fourier_features(cfg, points);
}

// ---------------------------------------------------------------- registry

void ParamRegistry::add(std::string name, ParamEntry entry) {
    if (index_.contains(name)) throw ConfigError("duplicate parameter name " + name);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(std::move(name), std::move(entry));
}

const ParamEntry& ParamRegistry::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter " + name);
    return entries_[it->second].second;
}

ParamEntry& ParamRegistry::at(const std::string& name) {
    return const_cast<ParamEntry&>(static_cast<const ParamRegistry&>(*this).at(name));
}

std::size_t ParamRegistry::parameter_count() const noexcept {
    std::size_t n = 0;
    for (const auto& [name, e] : entries_) n += e.value.size();
    return n;
}

std::map<Group, std::size_t> ParamRegistry::group_counts() const {
    std::map<Group, std::size_t> out;
    for (Group g : kAllGroups) out[g] = 0;
    for (const auto& [name, e] : entries_) out[e.group] += e.value.size();
    return out;
}

std::string ParamRef::label() const {
    switch (kind) {
        case Kind::dense: return name;
        case Kind::lora_a: return "lora.layer" + std::to_string(key.layer) + "." + to_string(key.target) + ".A";
        case Kind::lora_b: return "lora.layer" + std::to_string(key.layer) + "." + to_string(key.target) + ".B";
    }
    return name;
}

std::vector<ParamRef> trainable_params(const ParamRegistry& reg, const StrategyMask& mask, const AdapterSet* adapters) {
    if (mask.uses_lora && !adapters) throw ConfigError(to_string(mask.strategy) + " requires LoRA adapters");
    if (!mask.uses_lora && adapters) throw ConfigError(to_string(mask.strategy) + " does not use LoRA adapters");
    std::vector<ParamRef> out;
    for (const auto& [name, e] : reg)
        if (mask.trains(e.group, e.attention)) out.push_back(ParamRef{ParamRef::Kind::dense, name, {}});
    if (adapters) {
        for (const auto& [key, ad] : *adapters) {
            out.push_back(ParamRef{ParamRef::Kind::lora_a, {}, key});
            out.push_back(ParamRef{ParamRef::Kind::lora_b, {}, key});
        }
    }
    return out;
}

const Matrix& param_value(const ParamRegistry& reg, const AdapterSet* adapters, const ParamRef& ref) {
    if (ref.kind == ParamRef::Kind::dense) return reg.at(ref.name).value;
    if (!adapters) throw ConfigError("adapter parameter " + ref.label() + " without adapters");
    const LoRAAdapter& ad = adapters->at(ref.key);
    return ref.kind == ParamRef::Kind::lora_a ? ad.a_factor : ad.b_factor;
}

Matrix& param_value(ParamRegistry& reg, AdapterSet* adapters, const ParamRef& ref) {
    return const_cast<Matrix&>(param_value(static_cast<const ParamRegistry&>(reg), adapters, ref));
}

ParamCounts count_params(const ModelConfig& cfg, const StrategyMask& mask, std::size_t rank, std::size_t num_classes) {
    ModelConfig c = cfg;
    c.num_classes = num_classes;
    ParamCounts out;
    for (const auto& spec : param_layout(c)) {
        out.total += spec.count();
        if (mask.trains(spec.group, spec.attention)) out.trainable += spec.count();
    }
    if (mask.uses_lora) {
        const std::size_t lora = lora_param_count(c, rank);
        out.total += lora;
        out.trainable += lora;
    }
    return out;
}

std::map<Group, std::size_t> group_param_counts(const ModelConfig& cfg) {
    std::map<Group, std::size_t> out;
    for (Group g : kAllGroups) out[g] = 0;
    for (const auto& spec : param_layout(cfg)) out[spec.group] += spec.count();
    return out;
}

std::string frozen_digest(const ParamRegistry& reg, const StrategyMask& mask) {
    Sha256 h;
    for (const auto& [name, e] : reg) {
        if (mask.trains(e.group, e.attention)) continue;
        h.update(name);
        for (double x : e.value.values()) h.update_f64(x);
    }
    return h.hex_digest();
}

// ---------------------------------------------------------------- model

struct SegmentationModel::Maps : ForwardMaps {};

SegmentationModel::SegmentationModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    if (!cfg_.runnable()) {
        throw ConfigError("model config '" + cfg_.name + "' is count-only: patch_in_chans != input_slices");
    }
    maps_ = std::make_shared<const Maps>(Maps{make_maps(cfg_)});
}

Matrix SegmentationModel::forward(const ParamRegistry& reg, const AdapterSet* adapters, const Matrix& volume) const {
    ad::Tape tape;
    Graph graph(tape, cfg_, *maps_, reg, adapters, {});
    return tape.value(graph.build(volume));
}

std::vector<Matrix> SegmentationModel::forward_batch(const ParamRegistry& reg, const AdapterSet* adapters,
                                                     std::span<const Matrix> volumes) const {
    std::vector<Matrix> out;
    out.reserve(volumes.size());
    for (const Matrix& v : volumes) out.push_back(forward(reg, adapters, v));
    return out;
}

double SegmentationModel::forward_backward(const ParamRegistry& reg, const AdapterSet* adapters, const Matrix& volume,
                                           const LossFn& loss, std::span<const ParamRef> wrt,
                                           GradientMap& grads) const {
    ad::Tape tape;
    Graph graph(tape, cfg_, *maps_, reg, adapters, wrt);
    ad::Var logits = graph.build(volume);
    const Matrix& lv = tape.value(logits);
    Matrix dlogits(lv.rows(), lv.cols());
    const double value = loss(lv, dlogits);
    tape.backward(logits, dlogits);
    graph.collect(grads);
    graph.collect_missing(grads);
    return value;
}

BuiltModel build_model(const ModelConfig& cfg, Rng& rng) {
    SegmentationModel model(cfg);
    ParamRegistry reg;
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (const auto& spec : param_layout(cfg)) {
        Matrix m(spec.rows, spec.cols);
        const std::string& n = spec.name;
        auto ends_with = [&](std::string_view suffix) {
            return n.size() >= suffix.size() && n.compare(n.size() - suffix.size(), suffix.size(), suffix) == 0;
        };
        const bool is_norm = n.find(".norm") != std::string::npos || n.find(".ln") != std::string::npos;
        if (is_norm && ends_with(".weight")) {
            for (double& x : m.values()) x = 1.0;
        } else if (is_norm || ends_with(".bias") || ends_with(".bq") || ends_with(".bk") || ends_with(".bv") ||
                   ends_with(".bo")) {
            // zeros
        } else if (ends_with("rel_pos_h") || ends_with("rel_pos_w") || n == "ie.pos_embed") {
            for (double& x : m.values()) x = 0.02 * gauss(rng);
        } else if (n.find("token") != std::string::npos || n.rfind("pe.", 0) == 0) {
            for (double& x : m.values()) x = gauss(rng);
        } else {
            const double std = 1.0 / std::sqrt(static_cast<double>(spec.cols));
            for (double& x : m.values()) x = std * gauss(rng);
        }
        reg.add(spec.name, ParamEntry{std::move(m), spec.group, spec.attention});
    }
    return BuiltModel{std::move(reg), std::move(model)};
}

// ---------------------------------------------------------------- checkpoints

std::vector<std::uint8_t> save_checkpoint(const ParamRegistry& reg, const ModelConfig& cfg, Strategy strategy) {
    io::ByteWriter out;
    out.raw(std::string_view("FPCK"));
    out.u32(kCheckpointVersion);
    out.raw(cfg.hash());
    out.u32(static_cast<std::uint32_t>(strategy));
    out.u32(static_cast<std::uint32_t>(reg.size()));
    for (const auto& [name, e] : reg) {
        out.str(name);
        out.u8(static_cast<std::uint8_t>(e.group));
        out.u8(e.attention ? 1 : 0);
        out.u32(static_cast<std::uint32_t>(e.value.rows()));
        out.u32(static_cast<std::uint32_t>(e.value.cols()));
        for (double x : e.value.values()) out.f32(static_cast<float>(x));
    }
    return std::move(out).take();
}

Checkpoint load_checkpoint(std::span<const std::uint8_t> bytes) {
    io::ByteReader in(bytes);
    if (in.raw(4) != "FPCK") throw IoError("checkpoint: bad magic");
    if (in.u32() != kCheckpointVersion) throw IoError("checkpoint: unsupported version");
    Checkpoint cp;
    cp.config_hash = in.raw(64);
    const std::uint32_t strategy = in.u32();
    if (strategy >= kAllStrategies.size()) throw IoError("checkpoint: bad strategy id");
    cp.strategy = static_cast<Strategy>(strategy);
    const std::uint32_t count = in.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = in.str();
        const std::uint8_t group = in.u8();
        if (group >= kAllGroups.size()) throw IoError("checkpoint: bad group tag for " + name);
        const bool attention = in.u8() != 0;
        const std::size_t rows = in.u32();
        const std::size_t cols = in.u32();
        if (rows == 0 || cols == 0) throw IoError("checkpoint: empty tensor " + name);
        if (in.remaining() < rows * cols * sizeof(float)) throw IoError("checkpoint: truncated tensor " + name);
        Matrix m(rows, cols);
        for (double& x : m.values()) x = in.f32();
        cp.registry.add(std::move(name), ParamEntry{std::move(m), static_cast<Group>(group), attention});
    }
    if (!in.done()) throw IoError("checkpoint: trailing bytes");
    return cp;
}

}  // namespace fedpeft
