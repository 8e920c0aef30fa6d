#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "tracto/common.hpp"
#include "tracto/rng.hpp"
#include "tracto/sphere.hpp"
#include "tracto/tensor.hpp"
#include "tracto/volume.hpp"

namespace tracto {

struct ModelConfig {
    int k = 724;              // direction classes (output is k+1 with EoF)
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 4;
    int d_ffn = 128;
    double dropout_p = 0.1;
    int g_in = 100;           // input channels per voxel
    bool use_cnn3d = true;    // false: embed the center voxel only (ablation)
    int max_len = 100;

    int d_head() const { return d_model / n_heads; }

    void validate() const {
        if (k < 2 || d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ffn <= 0 || g_in <= 0 ||
            max_len <= 0)
            throw std::invalid_argument("ModelConfig: counts must be positive (k >= 2)");
        if (d_model % n_heads != 0)
            throw std::invalid_argument("ModelConfig: d_model must be divisible by n_heads");
        if (dropout_p < 0.0 || dropout_p >= 1.0)
            throw std::invalid_argument("ModelConfig: dropout_p must be in [0,1)");
    }
};

struct LayerParams {
    Tensor Wq, bq, Wk, bk, Wv, bv, Wo, bo;
    Tensor ln1_g, ln1_b;
    Tensor W1, b1, W2, b2;
    Tensor ln2_g, ln2_b;
};

struct ModelParams {
    ModelConfig config;
    Tensor embed_W, embed_b;           // [27*g_in x d] (or [g_in x d] ablated), [1 x d]
    std::vector<LayerParams> layers;
    Tensor head_W1, head_b1, head_W2, head_b2;

    // every learnable tensor in declaration (= checkpoint) order
    std::vector<Tensor*> all() {
        std::vector<Tensor*> out{&embed_W, &embed_b};
        for (auto& l : layers)
            for (Tensor* t : {&l.Wq, &l.bq, &l.Wk, &l.bk, &l.Wv, &l.bv, &l.Wo, &l.bo, &l.ln1_g,
                              &l.ln1_b, &l.W1, &l.b1, &l.W2, &l.b2, &l.ln2_g, &l.ln2_b})
                out.push_back(t);
        for (Tensor* t : {&head_W1, &head_b1, &head_W2, &head_b2}) out.push_back(t);
        return out;
    }
    std::vector<const Tensor*> all() const {
        auto mutable_all = const_cast<ModelParams*>(this)->all();
        return {mutable_all.begin(), mutable_all.end()};
    }

    void zero_grad() {
        for (Tensor* t : all()) t->zero_grad();
    }

    // Same value storage, fresh gradient buffers: used to give each batch
    // example an independent gradient accumulator.
    ModelParams shared_clone() const {
        ModelParams c;
        c.config = config;
        c.layers.resize(layers.size());
        auto src = const_cast<ModelParams*>(this)->all();
        auto dst = c.all();
        for (std::size_t i = 0; i < src.size(); ++i) *dst[i] = src[i]->shared_leaf();
        return c;
    }

    static ModelParams init(const ModelConfig& config, uint64_t seed) {
        config.validate();
        ModelParams p;
        p.config = config;
        Rng rng(seed);
        auto xavier = [&rng](int fan_in, int fan_out) {
            double limit = std::sqrt(6.0 / (fan_in + fan_out));
            Mat m(fan_in, fan_out);
            for (int i = 0; i < fan_in; ++i)
                for (int j = 0; j < fan_out; ++j) m(i, j) = rng.uniform(-limit, limit);
            return Tensor::from_matrix(std::move(m), true);
        };
        auto zeros = [](int c) { return Tensor::from_matrix(Mat::Zero(1, c), true); };
        auto ones = [](int c) { return Tensor::from_matrix(Mat::Ones(1, c), true); };

        int in_dim = config.use_cnn3d ? 27 * config.g_in : config.g_in;
        int d = config.d_model;
        p.embed_W = xavier(in_dim, d);
        p.embed_b = zeros(d);
        p.layers.resize(static_cast<std::size_t>(config.n_layers));
        for (auto& l : p.layers) {
            l.Wq = xavier(d, d);
            l.bq = zeros(d);
            l.Wk = xavier(d, d);
            l.bk = zeros(d);
            l.Wv = xavier(d, d);
            l.bv = zeros(d);
            l.Wo = xavier(d, d);
            l.bo = zeros(d);
            l.ln1_g = ones(d);
            l.ln1_b = zeros(d);
            l.W1 = xavier(d, config.d_ffn);
            l.b1 = zeros(config.d_ffn);
            l.W2 = xavier(config.d_ffn, d);
            l.b2 = zeros(d);
            l.ln2_g = ones(d);
            l.ln2_b = zeros(d);
        }
        p.head_W1 = xavier(d, d);
        p.head_b1 = zeros(d);
        p.head_W2 = xavier(d, config.k + 1);
        p.head_b2 = zeros(config.k + 1);
        return p;
    }
};

// Token embedding: with use_cnn3d a single valid (no-padding) 3x3x3
// convolution, i.e. a full contraction of each 27*g_in cube with the
// kernel plus bias; ablated, a linear map of the center voxel's channels.
inline Tensor embed_sequence(const std::vector<VoxelCube>& cubes, const ModelParams& params,
                             const ModelConfig& config) {
    int n = static_cast<int>(cubes.size());
    if (n == 0) throw std::invalid_argument("embed_sequence: empty sequence");
    int in_dim = config.use_cnn3d ? 27 * config.g_in : config.g_in;
    Mat x(n, in_dim);
    for (int t = 0; t < n; ++t) {
        const VoxelCube& cube = cubes[static_cast<std::size_t>(t)];
        if (cube.G != config.g_in)
            throw std::invalid_argument("embed_sequence: cube channel count != g_in");
        if (config.use_cnn3d) {
            if (cube.values.size() != static_cast<std::size_t>(in_dim))
                throw std::invalid_argument("embed_sequence: malformed cube");
            for (int i = 0; i < in_dim; ++i) x(t, i) = cube.values[static_cast<std::size_t>(i)];
        } else {
            for (int g = 0; g < config.g_in; ++g) x(t, g) = cube.at(1, 1, 1, g);
        }
    }
    if (params.embed_W.rows() != in_dim)
        throw std::invalid_argument("embed_sequence: params do not match config");
    return add_rowvec(matmul(Tensor::from_matrix(std::move(x)), params.embed_W), params.embed_b);
}

// PE(pos, 2i) = sin(pos / 10000^{2i/d}), PE(pos, 2i+1) = cos(same).
inline Tensor positional_encoding(int n, int d_model) {
    if (n <= 0) throw std::invalid_argument("positional_encoding: n must be positive");
    if (d_model <= 0 || d_model % 2 != 0)
        throw std::invalid_argument("positional_encoding: d_model must be positive and even");
    Mat pe(n, d_model);
    for (int pos = 0; pos < n; ++pos)
        for (int i = 0; i < d_model / 2; ++i) {
            double freq = std::pow(10000.0, -2.0 * i / d_model);
            pe(pos, 2 * i) = std::sin(pos * freq);
            pe(pos, 2 * i + 1) = std::cos(pos * freq);
        }
    return Tensor::from_matrix(std::move(pe));
}

namespace detail {

// additive attention mask: 0 where j <= i and j is a real token, -1e30
// otherwise (exp underflows to exactly zero weight)
inline Mat attention_mask(int n, const std::vector<bool>& padding) {
    Mat m(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            m(i, j) = (j <= i && !padding[static_cast<std::size_t>(j)]) ? 0.0 : -1e30;
    return m;
}

} // namespace detail

// Causal decoder over embedded tokens (positional encoding already added
// by the caller or via forward_sequence). Post-norm residual blocks:
// x = LN(x + Attn(x)); x = LN(x + FFN(x)); then the two-layer head.
// Dropout (attention weights, FFN hidden) is active only in train mode,
// drawing its masks from `rng`.
inline Tensor decoder_forward(const Tensor& tokens, const std::vector<bool>& padding_mask,
                              const ModelParams& params, const ModelConfig& config,
                              bool train_mode = false, Rng* rng = nullptr) {
    int n = tokens.rows();
    if (n > config.max_len)
        throw std::invalid_argument("decoder_forward: sequence longer than max_len");
    if (tokens.cols() != config.d_model)
        throw std::invalid_argument("decoder_forward: token width != d_model");
    if (static_cast<int>(padding_mask.size()) != n)
        throw std::invalid_argument("decoder_forward: padding mask length != n");
    if (train_mode && config.dropout_p > 0.0 && rng == nullptr)
        throw std::invalid_argument("decoder_forward: train mode with dropout needs an rng");

    Mat mask = detail::attention_mask(n, padding_mask);
    double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(config.d_head()));
    bool drop = train_mode && config.dropout_p > 0.0;

    Tensor x = tokens;
    for (const auto& l : params.layers) {
        Tensor q = add_rowvec(matmul(x, l.Wq), l.bq);
        Tensor k = add_rowvec(matmul(x, l.Wk), l.bk);
        Tensor v = add_rowvec(matmul(x, l.Wv), l.bv);
        std::vector<Tensor> heads;
        for (int h = 0; h < config.n_heads; ++h) {
            int c0 = h * config.d_head(), c1 = c0 + config.d_head();
            Tensor qh = slice_cols(q, c0, c1);
            Tensor kh = slice_cols(k, c0, c1);
            Tensor vh = slice_cols(v, c0, c1);
            Tensor scores = scale(matmul_nt(qh, kh), inv_sqrt_dh);
            Tensor probs = softmax_rows_masked(scores, mask);
            if (drop) probs = dropout(probs, config.dropout_p, *rng);
            heads.push_back(matmul(probs, vh));
        }
        Tensor attn = add_rowvec(matmul(concat_cols(heads), l.Wo), l.bo);
        x = layernorm_rows(add(x, attn), l.ln1_g, l.ln1_b);

        Tensor hidden = relu(add_rowvec(matmul(x, l.W1), l.b1));
        if (drop) hidden = dropout(hidden, config.dropout_p, *rng);
        Tensor ffn = add_rowvec(matmul(hidden, l.W2), l.b2);
        x = layernorm_rows(add(x, ffn), l.ln2_g, l.ln2_b);
    }
    Tensor head_hidden = relu(add_rowvec(matmul(x, params.head_W1), params.head_b1));
    return add_rowvec(matmul(head_hidden, params.head_W2), params.head_b2);
}

// Embedding + positional encoding + decoder in one call.
inline Tensor forward_sequence(const std::vector<VoxelCube>& cubes,
                               const std::vector<bool>& padding_mask, const ModelParams& params,
                               const ModelConfig& config, bool train_mode = false,
                               Rng* rng = nullptr) {
    Tensor tokens = embed_sequence(cubes, params, config);
    Tensor pe = positional_encoding(tokens.rows(), config.d_model);
    return decoder_forward(add(tokens, pe), padding_mask, params, config, train_mode, rng);
}

// Numerically stable softmax of one logit row.
inline SoftLabel predict_fodf(const Eigen::RowVectorXd& logits) {
    SoftLabel out;
    out.probs.resize(static_cast<std::size_t>(logits.size()));
    double m = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < logits.size(); ++i) {
        if (!std::isfinite(logits[i]))
            throw std::invalid_argument("predict_fodf: non-finite logit");
        m = std::max(m, logits[i]);
    }
    double sum = 0.0;
    for (int i = 0; i < logits.size(); ++i) {
        double e = std::exp(logits[i] - m);
        out.probs[static_cast<std::size_t>(i)] = e;
        sum += e;
    }
    for (auto& p : out.probs) p /= sum;
    return out;
}

inline SoftLabel predict_fodf(const Tensor& logits, int row) {
    return predict_fodf(Eigen::RowVectorXd(logits.value().row(row)));
}

// --- checkpoint serialization -------------------------------------------
//
// Little-endian layout: 8-byte magic "TTMODEL\0", u32 version, config
// block, u64 FNV-1a hash of the config block, then each parameter in
// declaration order as u32 rows, u32 cols, rows*cols f64 values.

namespace detail {

constexpr char kCheckpointMagic[8] = {'T', 'T', 'M', 'O', 'D', 'E', 'L', '\0'};
constexpr uint32_t kCheckpointVersion = 1;

inline void append_bytes(std::string& buf, const void* p, std::size_t n) {
    buf.append(reinterpret_cast<const char*>(p), n);
}

inline std::string config_block(const ModelConfig& c) {
    std::string buf;
    auto put_i32 = [&buf](int32_t v) { append_bytes(buf, &v, 4); };
    put_i32(c.k);
    put_i32(c.d_model);
    put_i32(c.n_layers);
    put_i32(c.n_heads);
    put_i32(c.d_ffn);
    append_bytes(buf, &c.dropout_p, 8);
    put_i32(c.g_in);
    uint8_t cnn = c.use_cnn3d ? 1 : 0;
    append_bytes(buf, &cnn, 1);
    put_i32(c.max_len);
    return buf;
}

inline uint64_t fnv1a(const std::string& bytes) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char b : bytes) {
        h ^= b;
        h *= 1099511628211ull;
    }
    return h;
}

template <typename T>
T read_pod(std::ifstream& in) {
    T v;
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw FormatError("checkpoint: truncated file");
    return v;
}

} // namespace detail

inline void save_checkpoint(const ModelParams& params, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("save_checkpoint: cannot open " + path);
    out.write(detail::kCheckpointMagic, 8);
    out.write(reinterpret_cast<const char*>(&detail::kCheckpointVersion), 4);
    std::string cfg = detail::config_block(params.config);
    out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    uint64_t hash = detail::fnv1a(cfg);
    out.write(reinterpret_cast<const char*>(&hash), 8);
    for (const Tensor* t : params.all()) {
        uint32_t r = static_cast<uint32_t>(t->rows()), c = static_cast<uint32_t>(t->cols());
        out.write(reinterpret_cast<const char*>(&r), 4);
        out.write(reinterpret_cast<const char*>(&c), 4);
        out.write(reinterpret_cast<const char*>(t->value().data()),
                  static_cast<std::streamsize>(sizeof(double) * r * c));
    }
    if (!out) throw IoError("save_checkpoint: write failed for " + path);
}

inline ModelParams load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_checkpoint: cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0)
        throw FormatError("load_checkpoint: bad magic");
    if (detail::read_pod<uint32_t>(in) != detail::kCheckpointVersion)
        throw FormatError("load_checkpoint: unsupported format version");

    ModelConfig c;
    c.k = detail::read_pod<int32_t>(in);
    c.d_model = detail::read_pod<int32_t>(in);
    c.n_layers = detail::read_pod<int32_t>(in);
    c.n_heads = detail::read_pod<int32_t>(in);
    c.d_ffn = detail::read_pod<int32_t>(in);
    c.dropout_p = detail::read_pod<double>(in);
    c.g_in = detail::read_pod<int32_t>(in);
    c.use_cnn3d = detail::read_pod<uint8_t>(in) != 0;
    c.max_len = detail::read_pod<int32_t>(in);
    uint64_t hash = detail::read_pod<uint64_t>(in);
    if (hash != detail::fnv1a(detail::config_block(c)))
        throw FormatError("load_checkpoint: config hash mismatch");
    c.validate();

    ModelParams params = ModelParams::init(c, 0);
    for (Tensor* t : params.all()) {
        uint32_t r = detail::read_pod<uint32_t>(in);
        uint32_t cc = detail::read_pod<uint32_t>(in);
        if (static_cast<int>(r) != t->rows() || static_cast<int>(cc) != t->cols())
            throw FormatError("load_checkpoint: parameter shape mismatch");
        in.read(reinterpret_cast<char*>(t->value().data()),
                static_cast<std::streamsize>(sizeof(double) * r * cc));
        if (!in) throw FormatError("load_checkpoint: truncated parameter data");
    }
    return params;
}

} // namespace tracto
