#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rubato/error.hpp"
#include "rubato/tokenizer.hpp"

namespace rubato::model {

RUBATO_DEFINE_ERROR(InvalidConfig);
RUBATO_DEFINE_ERROR(BadShape);
RUBATO_DEFINE_ERROR(EmptyMask);
RUBATO_DEFINE_ERROR(CheckpointError);

struct ModelConfig {
    int hidden_size = 32;
    int ffn_size = 64;
    int encoder_layers = 2;
    int decoder_layers = 1;
    int head_dim = 8;
    int vocab_size = tok::kVocabSize;
    int max_seq_len = 4096;
    int compression_factor = 8;
    uint64_t seed = 0;

    int heads() const { return hidden_size / head_dim; }

    // smallest shape that still exercises multi-head attention, compression,
    // and the encoder/decoder asymmetry
    static ModelConfig toy();
    // Hidden 768, FFN 3072, 10 encoder / 2 decoder layers, head dim 128.
    static ModelConfig full();

    bool operator==(const ModelConfig&) const = default;
};

void validate(const ModelConfig& config); // throws InvalidConfig

// Flat little-endian parameter layout; offsets into the parameter vector.
struct TensorSpec {
    std::string name;
    int64_t offset;
    int64_t rows;
    int64_t cols; // 1 for vectors
    int64_t size() const { return rows * cols; }
};

std::vector<TensorSpec> parameter_layout(const ModelConfig& config);
int64_t count_parameters(const ModelConfig& config);
std::string parameter_breakdown(const ModelConfig& config); // closed-form table

// Multiply-accumulate count of self-attention over a sequence of N tokens:
// 2 x layers x heads x L^2 x head_dim, with L = N uncompressed or N/8
// compressed (score and value-weighting terms both counted).
int64_t attention_cost(int64_t seq_len_tokens, int layers, bool compressed,
                       int heads = 6, int head_dim = 128);

struct LossReport {
    double loss = 0.0;                // mean NLL over loss-mask-true positions
    std::vector<double> position_nll; // per predicted position, masked or not
    int64_t masked_positions = 0;
};

// Softmax cross-entropy over externally supplied logits (row-major
// targets.size() x vocab). Throws BadShape and EmptyMask.
LossReport compute_loss(std::span<const double> logits, size_t vocab,
                        std::span<const tok::TokenId> targets,
                        std::span<const uint8_t> mask);

// Note-level aggregation: memory[n] = sum over slots s of e[n,s] x W_s, with
// embeddings row-major N x 8 x d and slot_weights 8 row-major d x d matrices.
template <typename T>
std::vector<T> aggregate_notes(std::span<const T> embeddings,
                               std::span<const T> slot_weights, int d);

// Every attention probability matrix of one forward pass, for property
// checks (rows are softmax outputs).
struct AttentionTrace {
    struct Map {
        std::string name;
        int heads, rows, cols;
        std::vector<double> probs; // heads x rows x cols
    };
    std::vector<Map> maps;
};

// Note-compressing asymmetric encoder-decoder. T = float for training,
// double for finite-difference verification.
template <typename T>
class Transformer {
public:
    explicit Transformer(const ModelConfig& config); // zero parameters
    static Transformer init(const ModelConfig& config, uint64_t seed);

    const ModelConfig& config() const { return config_; }
    const std::vector<T>& params() const { return params_; }
    std::vector<T>& params() { return params_; }

    // Next-token logits per decoder position, row-major T x vocab.
    std::vector<T> forward(std::span<const tok::TokenId> encoder_tokens,
                           std::span<const tok::TokenId> decoder_tokens,
                           AttentionTrace* trace = nullptr) const;

    // Teacher-forced loss on one example (decoder input = target dropping the
    // last token, predictions shifted by one). grads, when given, is filled
    // with analytic gradients for every parameter.
    LossReport loss_and_gradients(const tok::PretrainExample& example,
                                  std::vector<T>* grads) const;

private:
    ModelConfig config_;
    std::vector<T> params_;
};

Transformer<double> widen(const Transformer<float>& model);

struct OptimizerConfig {
    double peak_lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    int warmup_steps = 0;
};

// Cosine decay from peak to ~0 across total_steps, linear warmup first.
double cosine_lr(const OptimizerConfig& opt, int step, int total_steps);

// AdamW over the examples cycled in order, one example per step; returns the
// per-step loss trace. Deterministic.
std::vector<double> train_steps(Transformer<float>& model,
                                std::span<const tok::PretrainExample> examples,
                                const OptimizerConfig& opt, int steps);

void save_checkpoint(const std::string& path, const Transformer<float>& model);
Transformer<float> load_checkpoint(const std::string& path);

} // namespace rubato::model
