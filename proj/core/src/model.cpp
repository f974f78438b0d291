#include "rubato/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <unordered_map>

#include "rubato/rng.hpp"

namespace rubato::model {

// ---------------------------------------------------------------------------
// config / layout
// ---------------------------------------------------------------------------

ModelConfig ModelConfig::toy() {
    return ModelConfig{};
}

ModelConfig ModelConfig::full() {
    ModelConfig c;
    c.hidden_size = 768;
    c.ffn_size = 3072;
    c.encoder_layers = 10;
    c.decoder_layers = 2;
    c.head_dim = 128;
    return c;
}

void validate(const ModelConfig& c) {
    if (c.hidden_size <= 0 || c.ffn_size <= 0 || c.encoder_layers <= 0 ||
        c.decoder_layers <= 0 || c.head_dim <= 0 || c.max_seq_len <= 0) {
        throw InvalidConfig("all model dimensions must be positive");
    }
    if (c.hidden_size % c.head_dim != 0) {
        throw InvalidConfig("hidden_size " + std::to_string(c.hidden_size) +
                            " is not divisible by head_dim " + std::to_string(c.head_dim));
    }
    if (c.head_dim % 2 != 0) {
        throw InvalidConfig("head_dim must be even for rotary positions");
    }
    if (c.compression_factor != tok::kTokensPerNote) {
        throw InvalidConfig("compression_factor must equal the 8 tokens per note");
    }
    if (c.vocab_size != tok::kVocabSize) {
        throw InvalidConfig("vocab_size must equal the frozen vocabulary size 5389");
    }
}

std::vector<TensorSpec> parameter_layout(const ModelConfig& c) {
    validate(c);
    int64_t d = c.hidden_size;
    int64_t f = c.ffn_size;
    int64_t v = c.vocab_size;
    std::vector<TensorSpec> specs;
    int64_t offset = 0;
    auto add = [&](std::string name, int64_t rows, int64_t cols) {
        specs.push_back(TensorSpec{std::move(name), offset, rows, cols});
        offset += rows * cols;
    };
    add("embedding", v, d);
    for (int s = 0; s < 8; ++s) add("agg." + std::to_string(s), d, d);
    for (int l = 0; l < c.encoder_layers; ++l) {
        std::string p = "enc." + std::to_string(l) + ".";
        add(p + "attn_norm", d, 1);
        add(p + "wq", d, d);
        add(p + "wk", d, d);
        add(p + "wv", d, d);
        add(p + "wo", d, d);
        add(p + "ffn_norm", d, 1);
        add(p + "gate", d, f);
        add(p + "up", d, f);
        add(p + "down", f, d);
    }
    for (int l = 0; l < c.decoder_layers; ++l) {
        std::string p = "dec." + std::to_string(l) + ".";
        add(p + "self_norm", d, 1);
        add(p + "self_wq", d, d);
        add(p + "self_wk", d, d);
        add(p + "self_wv", d, d);
        add(p + "self_wo", d, d);
        add(p + "cross_norm", d, 1);
        add(p + "cross_wq", d, d);
        add(p + "cross_wk", d, d);
        add(p + "cross_wv", d, d);
        add(p + "cross_wo", d, d);
        add(p + "ffn_norm", d, 1);
        add(p + "gate", d, f);
        add(p + "up", d, f);
        add(p + "down", f, d);
    }
    add("enc.final_norm", d, 1);
    add("dec.final_norm", d, 1);
    add("output", d, v);
    return specs;
}

int64_t count_parameters(const ModelConfig& c) {
    validate(c);
    int64_t d = c.hidden_size;
    int64_t f = c.ffn_size;
    int64_t v = c.vocab_size;
    int64_t embedding = v * d;
    int64_t aggregation = 8 * d * d;
    int64_t enc_layer = 2 * d + 4 * d * d + 3 * d * f;
    int64_t dec_layer = 3 * d + 8 * d * d + 3 * d * f;
    int64_t final_norms = 2 * d;
    int64_t output = d * v;
    return embedding + aggregation + c.encoder_layers * enc_layer +
           c.decoder_layers * dec_layer + final_norms + output;
}

std::string parameter_breakdown(const ModelConfig& c) {
    validate(c);
    int64_t d = c.hidden_size;
    int64_t f = c.ffn_size;
    int64_t v = c.vocab_size;
    std::ostringstream out;
    out << "embedding (vocab x d = " << v << " x " << d << "): " << v * d << "\n";
    out << "aggregation (8 slot matrices d x d): " << 8 * d * d << "\n";
    out << "encoder layer (2d norms + 4 d^2 attention + 3 d*ffn): "
        << (2 * d + 4 * d * d + 3 * d * f) << " x " << c.encoder_layers << " layers\n";
    out << "decoder layer (3d norms + 8 d^2 attention + 3 d*ffn): "
        << (3 * d + 8 * d * d + 3 * d * f) << " x " << c.decoder_layers << " layers\n";
    out << "final norms: " << 2 * d << "\n";
    out << "output projection (d x vocab): " << d * v << "\n";
    out << "total: " << count_parameters(c) << "\n";
    return out.str();
}

int64_t attention_cost(int64_t seq_len_tokens, int layers, bool compressed,
                       int heads, int head_dim) {
    if (compressed && seq_len_tokens % 8 != 0) {
        throw BadShape("compressed attention needs a token count divisible by 8");
    }
    int64_t l = compressed ? seq_len_tokens / 8 : seq_len_tokens;
    return 2 * int64_t(layers) * int64_t(heads) * l * l * int64_t(head_dim);
}

// ---------------------------------------------------------------------------
// numeric helpers
// ---------------------------------------------------------------------------

namespace {

constexpr double kNormEps = 1e-6;
constexpr double kRopeBase = 10000.0;

// y += x . w ; x rows x d, w d x m, y rows x m
template <typename T>
void matmul(const T* x, const T* w, T* y, int rows, int d, int m) {
    for (int r = 0; r < rows; ++r) {
        const T* xr = x + int64_t(r) * d;
        T* yr = y + int64_t(r) * m;
        for (int i = 0; i < d; ++i) {
            T xv = xr[i];
            const T* wr = w + int64_t(i) * m;
            for (int j = 0; j < m; ++j) yr[j] += xv * wr[j];
        }
    }
}

// dw += x^T . dy
template <typename T>
void accum_dw(const T* x, const T* dy, T* dw, int rows, int d, int m) {
    for (int r = 0; r < rows; ++r) {
        const T* xr = x + int64_t(r) * d;
        const T* dyr = dy + int64_t(r) * m;
        for (int i = 0; i < d; ++i) {
            T xv = xr[i];
            T* dwr = dw + int64_t(i) * m;
            for (int j = 0; j < m; ++j) dwr[j] += xv * dyr[j];
        }
    }
}

// dx += dy . w^T
template <typename T>
void accum_dx(const T* dy, const T* w, T* dx, int rows, int d, int m) {
    for (int r = 0; r < rows; ++r) {
        const T* dyr = dy + int64_t(r) * m;
        T* dxr = dx + int64_t(r) * d;
        for (int i = 0; i < d; ++i) {
            const T* wr = w + int64_t(i) * m;
            T acc = 0;
            for (int j = 0; j < m; ++j) acc += dyr[j] * wr[j];
            dxr[i] += acc;
        }
    }
}

template <typename T>
void rmsnorm_forward(const T* x, const T* g, T* y, int rows, int d) {
    for (int r = 0; r < rows; ++r) {
        const T* xr = x + int64_t(r) * d;
        T* yr = y + int64_t(r) * d;
        double ms = 0.0;
        for (int i = 0; i < d; ++i) ms += double(xr[i]) * double(xr[i]);
        T s = T(1.0 / std::sqrt(ms / d + kNormEps));
        for (int i = 0; i < d; ++i) yr[i] = g[i] * xr[i] * s;
    }
}

template <typename T>
void rmsnorm_backward(const T* x, const T* g, const T* dy, T* dx, T* dg, int rows, int d) {
    for (int r = 0; r < rows; ++r) {
        const T* xr = x + int64_t(r) * d;
        const T* dyr = dy + int64_t(r) * d;
        T* dxr = dx + int64_t(r) * d;
        double ms = 0.0;
        for (int i = 0; i < d; ++i) ms += double(xr[i]) * double(xr[i]);
        double s = 1.0 / std::sqrt(ms / d + kNormEps);
        double dot = 0.0; // sum dy_i g_i x_i
        for (int i = 0; i < d; ++i) dot += double(dyr[i]) * double(g[i]) * double(xr[i]);
        double k = dot * s * s * s / d;
        for (int i = 0; i < d; ++i) {
            dxr[i] += T(double(dyr[i]) * double(g[i]) * s - double(xr[i]) * k);
            dg[i] += T(double(dyr[i]) * double(xr[i]) * s);
        }
    }
}

// Rotary positions over row index; pairs within each head. inverse applies
// the transposed rotation (gradient transport).
template <typename T>
void rope_apply(T* vecs, int rows, int d, int head_dim, bool inverse) {
    int heads = d / head_dim;
    for (int r = 0; r < rows; ++r) {
        for (int t = 0; t < head_dim / 2; ++t) {
            double theta = r * std::pow(kRopeBase, -2.0 * t / head_dim);
            T c = T(std::cos(theta));
            T s = T(inverse ? -std::sin(theta) : std::sin(theta));
            for (int h = 0; h < heads; ++h) {
                T* p = vecs + int64_t(r) * d + int64_t(h) * head_dim + 2 * t;
                T a = p[0];
                T b = p[1];
                p[0] = a * c - b * s;
                p[1] = a * s + b * c;
            }
        }
    }
}

// q tq x d, k/v tk x d; probs heads x tq x tk, ctx tq x d (zeroed by caller)
template <typename T>
void attention_forward(const T* q, const T* k, const T* v, T* probs, T* ctx,
                       int tq, int tk, int d, int head_dim, bool causal) {
    int heads = d / head_dim;
    T scale = T(1.0 / std::sqrt(double(head_dim)));
    for (int h = 0; h < heads; ++h) {
        T* hp = probs + int64_t(h) * tq * tk;
        for (int i = 0; i < tq; ++i) {
            const T* qi = q + int64_t(i) * d + int64_t(h) * head_dim;
            T* pi = hp + int64_t(i) * tk;
            int limit = causal ? i + 1 : tk;
            T maxv = std::numeric_limits<T>::lowest();
            for (int j = 0; j < limit; ++j) {
                const T* kj = k + int64_t(j) * d + int64_t(h) * head_dim;
                T dot = 0;
                for (int t = 0; t < head_dim; ++t) dot += qi[t] * kj[t];
                pi[j] = dot * scale;
                maxv = std::max(maxv, pi[j]);
            }
            T denom = 0;
            for (int j = 0; j < limit; ++j) {
                pi[j] = std::exp(pi[j] - maxv);
                denom += pi[j];
            }
            for (int j = 0; j < limit; ++j) pi[j] /= denom;
            for (int j = limit; j < tk; ++j) pi[j] = 0;
            T* ci = ctx + int64_t(i) * d + int64_t(h) * head_dim;
            for (int j = 0; j < limit; ++j) {
                const T* vj = v + int64_t(j) * d + int64_t(h) * head_dim;
                T p = pi[j];
                for (int t = 0; t < head_dim; ++t) ci[t] += p * vj[t];
            }
        }
    }
}

// dq/dk/dv accumulated; causality is already encoded in the zero probs
template <typename T>
void attention_backward(const T* q, const T* k, const T* v, const T* probs,
                        const T* dctx, T* dq, T* dk, T* dv, int tq, int tk,
                        int d, int head_dim) {
    int heads = d / head_dim;
    T scale = T(1.0 / std::sqrt(double(head_dim)));
    std::vector<T> dp(tk), da(tk);
    for (int h = 0; h < heads; ++h) {
        const T* hp = probs + int64_t(h) * tq * tk;
        for (int i = 0; i < tq; ++i) {
            const T* pi = hp + int64_t(i) * tk;
            const T* dci = dctx + int64_t(i) * d + int64_t(h) * head_dim;
            // dv_j += p_ij dctx_i ; dp_ij = dctx_i . v_j
            T dot_pdp = 0;
            for (int j = 0; j < tk; ++j) {
                if (pi[j] == T(0)) {
                    dp[j] = 0;
                    continue;
                }
                const T* vj = v + int64_t(j) * d + int64_t(h) * head_dim;
                T* dvj = dv + int64_t(j) * d + int64_t(h) * head_dim;
                T dpj = 0;
                for (int t = 0; t < head_dim; ++t) {
                    dvj[t] += pi[j] * dci[t];
                    dpj += dci[t] * vj[t];
                }
                dp[j] = dpj;
                dot_pdp += pi[j] * dpj;
            }
            const T* qi = q + int64_t(i) * d + int64_t(h) * head_dim;
            T* dqi = dq + int64_t(i) * d + int64_t(h) * head_dim;
            for (int j = 0; j < tk; ++j) {
                if (pi[j] == T(0)) continue;
                da[j] = pi[j] * (dp[j] - dot_pdp);
                const T* kj = k + int64_t(j) * d + int64_t(h) * head_dim;
                T* dkj = dk + int64_t(j) * d + int64_t(h) * head_dim;
                T daj = da[j] * scale;
                for (int t = 0; t < head_dim; ++t) {
                    dqi[t] += daj * kj[t];
                    dkj[t] += daj * qi[t];
                }
            }
        }
    }
}

double gelu(double z) {
    return z * 0.5 * (1.0 + std::erf(z * 0.7071067811865475244));
}

double gelu_prime(double z) {
    double phi_cdf = 0.5 * (1.0 + std::erf(z * 0.7071067811865475244));
    double phi_pdf = std::exp(-0.5 * z * z) * 0.3989422804014326779;
    return phi_cdf + z * phi_pdf;
}

// caches for one attention block
template <typename T>
struct AttnCache {
    std::vector<T> x_in;   // residual source / norm input
    std::vector<T> normed; // rmsnorm output
    std::vector<T> q, k, v;
    std::vector<T> probs;
    std::vector<T> ctx;
};

template <typename T>
struct FfnCache {
    std::vector<T> x_in;
    std::vector<T> normed;
    std::vector<T> gate, up, act;
};

template <typename T>
struct EncLayerCache {
    AttnCache<T> attn;
    FfnCache<T> ffn;
};

template <typename T>
struct DecLayerCache {
    AttnCache<T> self;
    AttnCache<T> cross;
    FfnCache<T> ffn;
};

template <typename T>
struct Workspace {
    std::vector<T> enc_embedded;       // Etok x d
    std::vector<T> mem0;               // N x d, aggregation output
    std::vector<EncLayerCache<T>> enc;
    std::vector<T> enc_final_in;       // N x d
    std::vector<T> memory;             // N x d, after final norm
    std::vector<T> dec_embedded;       // Tdec x d
    std::vector<DecLayerCache<T>> dec;
    std::vector<T> dec_final_in;       // Tdec x d
    std::vector<T> dec_normed;         // Tdec x d
    std::vector<T> logits;             // Tdec x vocab
};

struct Layout {
    std::unordered_map<std::string, int64_t> offsets;
    int64_t total = 0;
    int64_t at(const std::string& name) const { return offsets.at(name); }
};

Layout make_layout(const ModelConfig& c) {
    Layout l;
    for (const TensorSpec& s : parameter_layout(c)) {
        l.offsets.emplace(s.name, s.offset);
        l.total = s.offset + s.size();
    }
    return l;
}

inline void check_tokens(std::span<const tok::TokenId> tokens, int vocab) {
    for (tok::TokenId t : tokens) {
        if (t < 0 || t >= vocab) {
            throw BadShape("token id " + std::to_string(t) + " outside the vocabulary");
        }
    }
}

} // namespace

// ---------------------------------------------------------------------------
// aggregation
// ---------------------------------------------------------------------------

template <typename T>
std::vector<T> aggregate_notes(std::span<const T> embeddings,
                               std::span<const T> slot_weights, int d) {
    if (d <= 0 || embeddings.size() % (size_t(8) * d) != 0 ||
        slot_weights.size() != size_t(8) * d * d) {
        throw BadShape("aggregation needs N x 8 x d embeddings and 8 d x d slot matrices");
    }
    size_t n = embeddings.size() / (size_t(8) * d);
    std::vector<T> memory(n * size_t(d), T(0));
    for (size_t note = 0; note < n; ++note) {
        for (int s = 0; s < 8; ++s) {
            const T* e = embeddings.data() + (note * 8 + s) * size_t(d);
            const T* w = slot_weights.data() + size_t(s) * d * d;
            matmul(e, w, memory.data() + note * size_t(d), 1, d, d);
        }
    }
    return memory;
}

template std::vector<float> aggregate_notes<float>(std::span<const float>,
                                                   std::span<const float>, int);
template std::vector<double> aggregate_notes<double>(std::span<const double>,
                                                     std::span<const double>, int);

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

LossReport compute_loss(std::span<const double> logits, size_t vocab,
                        std::span<const tok::TokenId> targets,
                        std::span<const uint8_t> mask) {
    if (vocab == 0 || logits.size() != targets.size() * vocab ||
        mask.size() != targets.size()) {
        throw BadShape("logits/targets/mask shapes disagree");
    }
    LossReport report;
    report.position_nll.resize(targets.size());
    double total = 0.0;
    for (size_t i = 0; i < targets.size(); ++i) {
        const double* row = logits.data() + i * vocab;
        if (targets[i] < 0 || size_t(targets[i]) >= vocab) {
            throw BadShape("target id outside the vocabulary");
        }
        double maxv = row[0];
        for (size_t j = 1; j < vocab; ++j) maxv = std::max(maxv, row[j]);
        double denom = 0.0;
        for (size_t j = 0; j < vocab; ++j) denom += std::exp(row[j] - maxv);
        double nll = std::log(denom) + maxv - row[size_t(targets[i])];
        report.position_nll[i] = nll;
        if (mask[i]) {
            total += nll;
            ++report.masked_positions;
        }
    }
    if (report.masked_positions == 0) {
        throw EmptyMask("loss mask selects no positions");
    }
    report.loss = total / double(report.masked_positions);
    return report;
}

// ---------------------------------------------------------------------------
// Transformer
// ---------------------------------------------------------------------------

template <typename T>
Transformer<T>::Transformer(const ModelConfig& config) : config_(config) {
    validate(config);
    params_.assign(size_t(count_parameters(config)), T(0));
}

template <typename T>
Transformer<T> Transformer<T>::init(const ModelConfig& config, uint64_t seed) {
    Transformer<T> m(config);
    m.config_.seed = seed;
    Rng rng(seed);
    for (const TensorSpec& spec : parameter_layout(config)) {
        T* p = m.params_.data() + spec.offset;
        bool is_norm = spec.name.find("norm") != std::string::npos;
        for (int64_t i = 0; i < spec.size(); ++i) {
            p[i] = is_norm ? T(1) : T(0.02 * rng.normal());
        }
    }
    return m;
}

namespace {

// Runs the full forward pass, filling the workspace.
template <typename T>
void forward_pass(const ModelConfig& cfg, const Layout& lay, const std::vector<T>& params,
                  std::span<const tok::TokenId> enc_tokens,
                  std::span<const tok::TokenId> dec_tokens, Workspace<T>& ws) {
    int d = cfg.hidden_size;
    int f = cfg.ffn_size;
    int hd = cfg.head_dim;
    int v = cfg.vocab_size;
    const T* P = params.data();

    if (enc_tokens.empty() || enc_tokens.size() % 8 != 0) {
        throw BadShape("encoder input length must be a positive multiple of 8");
    }
    if (dec_tokens.empty()) throw BadShape("decoder input must be non-empty");
    if (int(enc_tokens.size()) > cfg.max_seq_len || int(dec_tokens.size()) > cfg.max_seq_len) {
        throw BadShape("input exceeds max_seq_len");
    }
    check_tokens(enc_tokens, v);
    check_tokens(dec_tokens, v);

    int etok = int(enc_tokens.size());
    int n = etok / 8;
    int tdec = int(dec_tokens.size());

    // encoder embedding + note aggregation
    ws.enc_embedded.assign(size_t(etok) * d, T(0));
    const T* emb = P + lay.at("embedding");
    for (int t = 0; t < etok; ++t) {
        std::memcpy(ws.enc_embedded.data() + size_t(t) * d,
                    emb + int64_t(enc_tokens[t]) * d, sizeof(T) * size_t(d));
    }
    ws.mem0 = aggregate_notes<T>(ws.enc_embedded,
                                 std::span<const T>(P + lay.at("agg.0"), size_t(8) * d * d), d);

    std::vector<T> x = ws.mem0;
    ws.enc.assign(size_t(cfg.encoder_layers), EncLayerCache<T>{});
    for (int l = 0; l < cfg.encoder_layers; ++l) {
        std::string pre = "enc." + std::to_string(l) + ".";
        EncLayerCache<T>& c = ws.enc[size_t(l)];

        c.attn.x_in = x;
        c.attn.normed.assign(size_t(n) * d, T(0));
        rmsnorm_forward(x.data(), P + lay.at(pre + "attn_norm"), c.attn.normed.data(), n, d);
        c.attn.q.assign(size_t(n) * d, T(0));
        c.attn.k.assign(size_t(n) * d, T(0));
        c.attn.v.assign(size_t(n) * d, T(0));
        matmul(c.attn.normed.data(), P + lay.at(pre + "wq"), c.attn.q.data(), n, d, d);
        matmul(c.attn.normed.data(), P + lay.at(pre + "wk"), c.attn.k.data(), n, d, d);
        matmul(c.attn.normed.data(), P + lay.at(pre + "wv"), c.attn.v.data(), n, d, d);
        rope_apply(c.attn.q.data(), n, d, hd, false);
        rope_apply(c.attn.k.data(), n, d, hd, false);
        c.attn.probs.assign(size_t(cfg.heads()) * n * n, T(0));
        c.attn.ctx.assign(size_t(n) * d, T(0));
        attention_forward(c.attn.q.data(), c.attn.k.data(), c.attn.v.data(),
                          c.attn.probs.data(), c.attn.ctx.data(), n, n, d, hd, false);
        matmul(c.attn.ctx.data(), P + lay.at(pre + "wo"), x.data(), n, d, d);

        c.ffn.x_in = x;
        c.ffn.normed.assign(size_t(n) * d, T(0));
        rmsnorm_forward(x.data(), P + lay.at(pre + "ffn_norm"), c.ffn.normed.data(), n, d);
        c.ffn.gate.assign(size_t(n) * f, T(0));
        c.ffn.up.assign(size_t(n) * f, T(0));
        matmul(c.ffn.normed.data(), P + lay.at(pre + "gate"), c.ffn.gate.data(), n, d, f);
        matmul(c.ffn.normed.data(), P + lay.at(pre + "up"), c.ffn.up.data(), n, d, f);
        c.ffn.act.assign(size_t(n) * f, T(0));
        for (size_t i = 0; i < c.ffn.act.size(); ++i) {
            c.ffn.act[i] = T(gelu(double(c.ffn.gate[i]))) * c.ffn.up[i];
        }
        matmul(c.ffn.act.data(), P + lay.at(pre + "down"), x.data(), n, f, d);
    }
    ws.enc_final_in = x;
    ws.memory.assign(size_t(n) * d, T(0));
    rmsnorm_forward(x.data(), P + lay.at("enc.final_norm"), ws.memory.data(), n, d);

    // decoder
    ws.dec_embedded.assign(size_t(tdec) * d, T(0));
    for (int t = 0; t < tdec; ++t) {
        std::memcpy(ws.dec_embedded.data() + size_t(t) * d,
                    emb + int64_t(dec_tokens[t]) * d, sizeof(T) * size_t(d));
    }
    std::vector<T> y = ws.dec_embedded;
    ws.dec.assign(size_t(cfg.decoder_layers), DecLayerCache<T>{});
    for (int l = 0; l < cfg.decoder_layers; ++l) {
        std::string pre = "dec." + std::to_string(l) + ".";
        DecLayerCache<T>& c = ws.dec[size_t(l)];

        c.self.x_in = y;
        c.self.normed.assign(size_t(tdec) * d, T(0));
        rmsnorm_forward(y.data(), P + lay.at(pre + "self_norm"), c.self.normed.data(), tdec, d);
        c.self.q.assign(size_t(tdec) * d, T(0));
        c.self.k.assign(size_t(tdec) * d, T(0));
        c.self.v.assign(size_t(tdec) * d, T(0));
        matmul(c.self.normed.data(), P + lay.at(pre + "self_wq"), c.self.q.data(), tdec, d, d);
        matmul(c.self.normed.data(), P + lay.at(pre + "self_wk"), c.self.k.data(), tdec, d, d);
        matmul(c.self.normed.data(), P + lay.at(pre + "self_wv"), c.self.v.data(), tdec, d, d);
        rope_apply(c.self.q.data(), tdec, d, hd, false);
        rope_apply(c.self.k.data(), tdec, d, hd, false);
        c.self.probs.assign(size_t(cfg.heads()) * tdec * tdec, T(0));
        c.self.ctx.assign(size_t(tdec) * d, T(0));
        attention_forward(c.self.q.data(), c.self.k.data(), c.self.v.data(),
                          c.self.probs.data(), c.self.ctx.data(), tdec, tdec, d, hd, true);
        matmul(c.self.ctx.data(), P + lay.at(pre + "self_wo"), y.data(), tdec, d, d);

        c.cross.x_in = y;
        c.cross.normed.assign(size_t(tdec) * d, T(0));
        rmsnorm_forward(y.data(), P + lay.at(pre + "cross_norm"), c.cross.normed.data(), tdec, d);
        c.cross.q.assign(size_t(tdec) * d, T(0));
        c.cross.k.assign(size_t(n) * d, T(0));
        c.cross.v.assign(size_t(n) * d, T(0));
        matmul(c.cross.normed.data(), P + lay.at(pre + "cross_wq"), c.cross.q.data(), tdec, d, d);
        matmul(ws.memory.data(), P + lay.at(pre + "cross_wk"), c.cross.k.data(), n, d, d);
        matmul(ws.memory.data(), P + lay.at(pre + "cross_wv"), c.cross.v.data(), n, d, d);
        c.cross.probs.assign(size_t(cfg.heads()) * tdec * n, T(0));
        c.cross.ctx.assign(size_t(tdec) * d, T(0));
        attention_forward(c.cross.q.data(), c.cross.k.data(), c.cross.v.data(),
                          c.cross.probs.data(), c.cross.ctx.data(), tdec, n, d, hd, false);
        matmul(c.cross.ctx.data(), P + lay.at(pre + "cross_wo"), y.data(), tdec, d, d);

        c.ffn.x_in = y;
        c.ffn.normed.assign(size_t(tdec) * d, T(0));
        rmsnorm_forward(y.data(), P + lay.at(pre + "ffn_norm"), c.ffn.normed.data(), tdec, d);
        c.ffn.gate.assign(size_t(tdec) * f, T(0));
        c.ffn.up.assign(size_t(tdec) * f, T(0));
        matmul(c.ffn.normed.data(), P + lay.at(pre + "gate"), c.ffn.gate.data(), tdec, d, f);
        matmul(c.ffn.normed.data(), P + lay.at(pre + "up"), c.ffn.up.data(), tdec, d, f);
        c.ffn.act.assign(size_t(tdec) * f, T(0));
        for (size_t i = 0; i < c.ffn.act.size(); ++i) {
            c.ffn.act[i] = T(gelu(double(c.ffn.gate[i]))) * c.ffn.up[i];
        }
        matmul(c.ffn.act.data(), P + lay.at(pre + "down"), y.data(), tdec, f, d);
    }
    ws.dec_final_in = y;
    ws.dec_normed.assign(size_t(tdec) * d, T(0));
    rmsnorm_forward(y.data(), P + lay.at("dec.final_norm"), ws.dec_normed.data(), tdec, d);
    ws.logits.assign(size_t(tdec) * v, T(0));
    matmul(ws.dec_normed.data(), P + lay.at("output"), ws.logits.data(), tdec, d, v);
}

// Backward through one attention block given d(block output). Returns the
// gradient w.r.t. the block input (residual + branch); kv_grad collects the
// gradient w.r.t. an external key/value source (cross attention) when given.
template <typename T>
std::vector<T> attn_block_backward(const AttnCache<T>& c, const T* P, T* G,
                                   int64_t off_norm, int64_t off_q, int64_t off_k,
                                   int64_t off_v, int64_t off_o, const std::vector<T>& dout,
                                   int tq, int tk, int d, int hd, bool rope,
                                   const T* kv_source, std::vector<T>* kv_grad) {
    std::vector<T> dx = dout; // residual path
    std::vector<T> dctx(size_t(tq) * d, T(0));
    accum_dx(dout.data(), P + off_o, dctx.data(), tq, d, d);
    accum_dw(c.ctx.data(), dout.data(), G + off_o, tq, d, d);

    std::vector<T> dq(size_t(tq) * d, T(0)), dk(size_t(tk) * d, T(0)), dv(size_t(tk) * d, T(0));
    attention_backward(c.q.data(), c.k.data(), c.v.data(), c.probs.data(), dctx.data(),
                       dq.data(), dk.data(), dv.data(), tq, tk, d, hd);
    if (rope) {
        rope_apply(dq.data(), tq, d, hd, true);
        rope_apply(dk.data(), tk, d, hd, true);
    }

    std::vector<T> dnormed(size_t(tq) * d, T(0));
    accum_dx(dq.data(), P + off_q, dnormed.data(), tq, d, d);
    accum_dw(c.normed.data(), dq.data(), G + off_q, tq, d, d);

    if (kv_source != nullptr) {
        accum_dx(dk.data(), P + off_k, kv_grad->data(), tk, d, d);
        accum_dw(kv_source, dk.data(), G + off_k, tk, d, d);
        accum_dx(dv.data(), P + off_v, kv_grad->data(), tk, d, d);
        accum_dw(kv_source, dv.data(), G + off_v, tk, d, d);
    } else {
        accum_dx(dk.data(), P + off_k, dnormed.data(), tk, d, d);
        accum_dw(c.normed.data(), dk.data(), G + off_k, tk, d, d);
        accum_dx(dv.data(), P + off_v, dnormed.data(), tk, d, d);
        accum_dw(c.normed.data(), dv.data(), G + off_v, tk, d, d);
    }

    rmsnorm_backward(c.x_in.data(), P + off_norm, dnormed.data(), dx.data(), G + off_norm,
                     tq, d);
    return dx;
}

template <typename T>
std::vector<T> ffn_block_backward(const FfnCache<T>& c, const T* P, T* G, int64_t off_norm,
                                  int64_t off_gate, int64_t off_up, int64_t off_down,
                                  const std::vector<T>& dout, int rows, int d, int f) {
    std::vector<T> dx = dout;
    std::vector<T> dact(size_t(rows) * f, T(0));
    accum_dx(dout.data(), P + off_down, dact.data(), rows, f, d);
    accum_dw(c.act.data(), dout.data(), G + off_down, rows, f, d);

    std::vector<T> dgate(size_t(rows) * f), dup(size_t(rows) * f);
    for (size_t i = 0; i < dact.size(); ++i) {
        double g = double(c.gate[i]);
        dup[i] = dact[i] * T(gelu(g));
        dgate[i] = dact[i] * c.up[i] * T(gelu_prime(g));
    }
    std::vector<T> dnormed(size_t(rows) * d, T(0));
    accum_dx(dgate.data(), P + off_gate, dnormed.data(), rows, d, f);
    accum_dw(c.normed.data(), dgate.data(), G + off_gate, rows, d, f);
    accum_dx(dup.data(), P + off_up, dnormed.data(), rows, d, f);
    accum_dw(c.normed.data(), dup.data(), G + off_up, rows, d, f);

    rmsnorm_backward(c.x_in.data(), P + off_norm, dnormed.data(), dx.data(), G + off_norm,
                     rows, d);
    return dx;
}

} // namespace

template <typename T>
std::vector<T> Transformer<T>::forward(std::span<const tok::TokenId> encoder_tokens,
                                       std::span<const tok::TokenId> decoder_tokens,
                                       AttentionTrace* trace) const {
    Layout lay = make_layout(config_);
    Workspace<T> ws;
    forward_pass(config_, lay, params_, encoder_tokens, decoder_tokens, ws);
    if (trace != nullptr) {
        int heads = config_.heads();
        int n = int(encoder_tokens.size()) / 8;
        int tdec = int(decoder_tokens.size());
        auto grab = [&](const std::string& name, const std::vector<T>& probs, int rows,
                        int cols) {
            AttentionTrace::Map m;
            m.name = name;
            m.heads = heads;
            m.rows = rows;
            m.cols = cols;
            m.probs.assign(probs.begin(), probs.end());
            trace->maps.push_back(std::move(m));
        };
        for (size_t l = 0; l < ws.enc.size(); ++l) {
            grab("enc." + std::to_string(l) + ".self", ws.enc[l].attn.probs, n, n);
        }
        for (size_t l = 0; l < ws.dec.size(); ++l) {
            grab("dec." + std::to_string(l) + ".self", ws.dec[l].self.probs, tdec, tdec);
            grab("dec." + std::to_string(l) + ".cross", ws.dec[l].cross.probs, tdec, n);
        }
    }
    return std::move(ws.logits);
}

template <typename T>
LossReport Transformer<T>::loss_and_gradients(const tok::PretrainExample& example,
                                              std::vector<T>* grads) const {
    const tok::TokenSeq& target = example.decoder_target;
    if (target.size() < 2 || example.loss_mask.size() != target.size()) {
        throw BadShape("decoder target needs >= 2 tokens and an aligned loss mask");
    }
    std::span<const tok::TokenId> dec_input(target.data(), target.size() - 1);
    std::span<const tok::TokenId> predict(target.data() + 1, target.size() - 1);
    std::span<const uint8_t> mask(example.loss_mask.data() + 1, target.size() - 1);

    Layout lay = make_layout(config_);
    Workspace<T> ws;
    forward_pass(config_, lay, params_, example.encoder_input, dec_input, ws);

    int v = config_.vocab_size;
    int tdec = int(dec_input.size());

    // stable softmax cross-entropy in double
    std::vector<double> logits_d(ws.logits.begin(), ws.logits.end());
    LossReport report = compute_loss(logits_d, size_t(v), predict, mask);

    if (grads == nullptr) return report;
    grads->assign(params_.size(), T(0));
    T* G = grads->data();
    const T* P = params_.data();
    int d = config_.hidden_size;
    int f = config_.ffn_size;
    int hd = config_.head_dim;
    int n = int(example.encoder_input.size()) / 8;

    // dlogits = (softmax - onehot) / masked_count at masked rows, else 0
    std::vector<T> dlogits(size_t(tdec) * v, T(0));
    double inv_m = 1.0 / double(report.masked_positions);
    for (int i = 0; i < tdec; ++i) {
        if (!mask[size_t(i)]) continue;
        const double* row = logits_d.data() + size_t(i) * v;
        double maxv = row[0];
        for (int j = 1; j < v; ++j) maxv = std::max(maxv, row[j]);
        double denom = 0.0;
        for (int j = 0; j < v; ++j) denom += std::exp(row[j] - maxv);
        T* drow = dlogits.data() + size_t(i) * v;
        for (int j = 0; j < v; ++j) {
            drow[j] = T(std::exp(row[j] - maxv) / denom * inv_m);
        }
        drow[predict[size_t(i)]] -= T(inv_m);
    }

    // output projection and final decoder norm
    std::vector<T> d_dec_normed(size_t(tdec) * d, T(0));
    accum_dx(dlogits.data(), P + lay.at("output"), d_dec_normed.data(), tdec, d, v);
    accum_dw(ws.dec_normed.data(), dlogits.data(), G + lay.at("output"), tdec, d, v);
    std::vector<T> dy(size_t(tdec) * d, T(0));
    rmsnorm_backward(ws.dec_final_in.data(), P + lay.at("dec.final_norm"),
                     d_dec_normed.data(), dy.data(), G + lay.at("dec.final_norm"), tdec, d);

    std::vector<T> d_memory(size_t(n) * d, T(0));
    for (int l = config_.decoder_layers - 1; l >= 0; --l) {
        std::string pre = "dec." + std::to_string(l) + ".";
        DecLayerCache<T>& c = ws.dec[size_t(l)];
        dy = ffn_block_backward(c.ffn, P, G, lay.at(pre + "ffn_norm"), lay.at(pre + "gate"),
                                lay.at(pre + "up"), lay.at(pre + "down"), dy, tdec, d, f);
        dy = attn_block_backward(c.cross, P, G, lay.at(pre + "cross_norm"),
                                 lay.at(pre + "cross_wq"), lay.at(pre + "cross_wk"),
                                 lay.at(pre + "cross_wv"), lay.at(pre + "cross_wo"), dy,
                                 tdec, n, d, hd, false, ws.memory.data(), &d_memory);
        dy = attn_block_backward(c.self, P, G, lay.at(pre + "self_norm"),
                                 lay.at(pre + "self_wq"), lay.at(pre + "self_wk"),
                                 lay.at(pre + "self_wv"), lay.at(pre + "self_wo"), dy,
                                 tdec, tdec, d, hd, true, static_cast<const T*>(nullptr), static_cast<std::vector<T>*>(nullptr));
    }
    // decoder embedding rows
    T* demb = G + lay.at("embedding");
    for (int t = 0; t < tdec; ++t) {
        T* row = demb + int64_t(dec_input[size_t(t)]) * d;
        const T* src = dy.data() + size_t(t) * d;
        for (int i = 0; i < d; ++i) row[i] += src[i];
    }

    // encoder final norm
    std::vector<T> dx(size_t(n) * d, T(0));
    rmsnorm_backward(ws.enc_final_in.data(), P + lay.at("enc.final_norm"), d_memory.data(),
                     dx.data(), G + lay.at("enc.final_norm"), n, d);
    for (int l = config_.encoder_layers - 1; l >= 0; --l) {
        std::string pre = "enc." + std::to_string(l) + ".";
        EncLayerCache<T>& c = ws.enc[size_t(l)];
        dx = ffn_block_backward(c.ffn, P, G, lay.at(pre + "ffn_norm"), lay.at(pre + "gate"),
                                lay.at(pre + "up"), lay.at(pre + "down"), dx, n, d, f);
        dx = attn_block_backward(c.attn, P, G, lay.at(pre + "attn_norm"), lay.at(pre + "wq"),
                                 lay.at(pre + "wk"), lay.at(pre + "wv"), lay.at(pre + "wo"),
                                 dx, n, n, d, hd, true, static_cast<const T*>(nullptr), static_cast<std::vector<T>*>(nullptr));
    }

    // aggregation backward: memory[n] = sum_s e[n,s] . W_s
    std::vector<T> d_enc_embedded(ws.enc_embedded.size(), T(0));
    for (int note = 0; note < n; ++note) {
        const T* dm = dx.data() + size_t(note) * d;
        for (int s = 0; s < 8; ++s) {
            int64_t off = lay.at("agg." + std::to_string(s));
            const T* e = ws.enc_embedded.data() + (size_t(note) * 8 + size_t(s)) * d;
            T* de = d_enc_embedded.data() + (size_t(note) * 8 + size_t(s)) * d;
            accum_dw(e, dm, G + off, 1, d, d);
            accum_dx(dm, P + off, de, 1, d, d);
        }
    }
    for (size_t t = 0; t < example.encoder_input.size(); ++t) {
        T* row = demb + int64_t(example.encoder_input[t]) * d;
        const T* src = d_enc_embedded.data() + t * size_t(d);
        for (int i = 0; i < d; ++i) row[i] += src[i];
    }
    return report;
}

template class Transformer<float>;
template class Transformer<double>;

Transformer<double> widen(const Transformer<float>& model) {
    Transformer<double> wide(model.config());
    const std::vector<float>& src = model.params();
    std::vector<double>& dst = wide.params();
    for (size_t i = 0; i < src.size(); ++i) dst[i] = double(src[i]);
    return wide;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

double cosine_lr(const OptimizerConfig& opt, int step, int total_steps) {
    if (opt.warmup_steps > 0 && step < opt.warmup_steps) {
        return opt.peak_lr * double(step + 1) / double(opt.warmup_steps);
    }
    int t = step - opt.warmup_steps;
    int total = std::max(1, total_steps - opt.warmup_steps);
    double progress = std::min(1.0, double(t) / double(total));
    return opt.peak_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

std::vector<double> train_steps(Transformer<float>& model,
                                std::span<const tok::PretrainExample> examples,
                                const OptimizerConfig& opt, int steps) {
    if (examples.empty()) throw BadShape("training needs at least one example");
    std::vector<double> trace;
    trace.reserve(size_t(steps));
    std::vector<float> grads;
    std::vector<double> m(model.params().size(), 0.0);
    std::vector<double> v(model.params().size(), 0.0);
    for (int step = 0; step < steps; ++step) {
        const tok::PretrainExample& ex = examples[size_t(step) % examples.size()];
        LossReport report = model.loss_and_gradients(ex, &grads);
        trace.push_back(report.loss);
        double lr = cosine_lr(opt, step, steps);
        double bc1 = 1.0 - std::pow(opt.beta1, step + 1);
        double bc2 = 1.0 - std::pow(opt.beta2, step + 1);
        float* p = model.params().data();
        for (size_t i = 0; i < m.size(); ++i) {
            double g = double(grads[i]);
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g;
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g * g;
            double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + opt.eps) +
                            opt.weight_decay * double(p[i]);
            p[i] = float(double(p[i]) - lr * update);
        }
    }
    return trace;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[8] = {'R', 'B', 'T', 'C', 'K', 'P', 'T', '1'};

void put_i64le(std::ofstream& f, int64_t v) {
    uint8_t b[8];
    for (int i = 0; i < 8; ++i) b[i] = uint8_t((uint64_t(v) >> (8 * i)) & 0xFF);
    f.write(reinterpret_cast<const char*>(b), 8);
}

int64_t get_i64le(std::ifstream& f) {
    uint8_t b[8];
    f.read(reinterpret_cast<char*>(b), 8);
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return int64_t(v);
}

} // namespace

void save_checkpoint(const std::string& path, const Transformer<float>& model) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot open checkpoint for writing: " + path);
    f.write(kCheckpointMagic, 8);
    const ModelConfig& c = model.config();
    for (int64_t field : {int64_t(c.hidden_size), int64_t(c.ffn_size),
                          int64_t(c.encoder_layers), int64_t(c.decoder_layers),
                          int64_t(c.head_dim), int64_t(c.vocab_size),
                          int64_t(c.max_seq_len), int64_t(c.compression_factor),
                          int64_t(c.seed)}) {
        put_i64le(f, field);
    }
    for (float p : model.params()) {
        uint32_t bits;
        std::memcpy(&bits, &p, 4);
        uint8_t b[4] = {uint8_t(bits & 0xFF), uint8_t((bits >> 8) & 0xFF),
                        uint8_t((bits >> 16) & 0xFF), uint8_t((bits >> 24) & 0xFF)};
        f.write(reinterpret_cast<const char*>(b), 4);
    }
    if (!f) throw CheckpointError("short write on checkpoint: " + path);
}

Transformer<float> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open checkpoint: " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
        throw CheckpointError("bad checkpoint magic in: " + path);
    }
    ModelConfig c;
    c.hidden_size = int(get_i64le(f));
    c.ffn_size = int(get_i64le(f));
    c.encoder_layers = int(get_i64le(f));
    c.decoder_layers = int(get_i64le(f));
    c.head_dim = int(get_i64le(f));
    c.vocab_size = int(get_i64le(f));
    c.max_seq_len = int(get_i64le(f));
    c.compression_factor = int(get_i64le(f));
    c.seed = uint64_t(get_i64le(f));
    if (!f) throw CheckpointError("truncated checkpoint header in: " + path);
    try {
        validate(c);
    } catch (const Error& e) {
        throw CheckpointError(std::string("invalid checkpoint config: ") + e.what());
    }
    Transformer<float> model(c);
    for (float& p : model.params()) {
        uint8_t b[4];
        f.read(reinterpret_cast<char*>(b), 4);
        if (!f) throw CheckpointError("truncated parameter payload in: " + path);
        uint32_t bits = uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) |
                        (uint32_t(b[3]) << 24);
        std::memcpy(&p, &bits, 4);
    }
    return model;
}

} // namespace rubato::model
