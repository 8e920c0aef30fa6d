#pragma once

#include <cmath>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "tracto/common.hpp"
#include "tracto/model.hpp"
#include "tracto/parallel.hpp"
#include "tracto/rng.hpp"
#include "tracto/streamline.hpp"
#include "tracto/tensor.hpp"
#include "tracto/volume.hpp"

namespace tracto {

struct TrainExample {
    std::vector<VoxelCube> cubes;
    std::vector<SoftLabel> targets;

    int length() const { return static_cast<int>(cubes.size()); }
};

struct TrainConfig {
    double lr = 0.005;
    double beta1 = 0.9, beta2 = 0.999;
    double epsilon = 1e-8;
    double decay_factor = 0.7;
    int plateau_epochs = 2;
    double min_improvement = 0.3;   // accuracy percentage points, absolute
    int epochs = 30;
    int batch_size = 20;
    uint64_t seed = 42;
    bool use_cnn3d = true;
    bool use_reverse_aug = true;
    bool use_smooth_labels = true;

    void validate() const {
        if (lr <= 0.0) throw std::invalid_argument("TrainConfig: lr must be > 0");
        if (decay_factor <= 0.0 || decay_factor >= 1.0)
            throw std::invalid_argument("TrainConfig: decay_factor must be in (0,1)");
        if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
        if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
        if (plateau_epochs < 1)
            throw std::invalid_argument("TrainConfig: plateau_epochs must be >= 1");
        if (min_improvement < 0.0)
            throw std::invalid_argument("TrainConfig: min_improvement must be >= 0");
    }
};

// --- dataset assembly -----------------------------------------------------

struct DatasetOptions {
    SmoothingConfig smoothing{0.1};
    int max_len = 100;
    int window_overlap = 10;
    bool use_reverse_aug = true;
    bool use_smooth_labels = true;
};

struct DatasetResult {
    std::vector<TrainExample> examples;
    int dropped_streamlines = 0;    // left volume bounds or too short
};

// Streamlines (already resampled; volume already resampled to the model's
// input directions) become per-point cube/label sequences, with a reversed
// copy when augmentation is on. Sequences longer than max_len are split
// into overlapping windows; only the true terminal window carries EoF.
inline DatasetResult build_dataset(const Tractogram& tractogram, const DwiVolume& volume,
                                   const Sphere& sphere, const DatasetOptions& opt) {
    DatasetResult result;
    auto add_streamline = [&](const Streamline& s) -> bool {
        std::vector<VoxelCube> cubes;
        cubes.reserve(s.points.size());
        try {
            for (const auto& p : s.points) cubes.push_back(extract_cube(volume, p));
        } catch (const OutOfBoundsError&) {
            return false;
        }
        auto targets = direction_targets(s, sphere, opt.smoothing, opt.use_smooth_labels);
        for (auto [a, b] : split_windows(s.size(), opt.max_len, opt.window_overlap)) {
            TrainExample ex;
            ex.cubes.assign(cubes.begin() + a, cubes.begin() + b);
            ex.targets.assign(targets.begin() + a, targets.begin() + b);
            result.examples.push_back(std::move(ex));
        }
        return true;
    };

    for (const auto& s : tractogram.streamlines) {
        if (s.size() < 2) {
            ++result.dropped_streamlines;
            continue;
        }
        if (!add_streamline(s)) {
            ++result.dropped_streamlines;
            continue;
        }
        if (opt.use_reverse_aug) add_streamline(reverse_streamline(s));
    }
    if (result.examples.empty())
        throw EmptyDatasetError("build_dataset: no usable training examples");
    return result;
}

// --- KL-divergence loss ----------------------------------------------------

constexpr double kKlPredictionFloor = 1e-12;

// Sum_j y_j log(y_j / max(p_j, eps)) with 0*log 0 = 0.
inline double kl_divergence(const std::vector<double>& target, const std::vector<double>& pred) {
    if (target.size() != pred.size())
        throw std::invalid_argument("kl_divergence: length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        double y = target[i];
        if (y <= 0.0) continue;
        acc += y * std::log(y / std::max(pred[i], kKlPredictionFloor));
    }
    return acc;
}

// Mean KL over valid rows of a probability matrix (softmax output) against
// soft-label targets. Differentiable in the predictions.
inline Tensor kl_loss(const Tensor& probs, const Mat& targets, const std::vector<bool>& valid) {
    if (probs.rows() != targets.rows() || probs.cols() != targets.cols())
        throw std::invalid_argument("kl_loss: shape mismatch");
    if (static_cast<int>(valid.size()) != probs.rows())
        throw std::invalid_argument("kl_loss: mask length mismatch");
    int n_valid = 0;
    for (bool v : valid) n_valid += v;
    if (n_valid == 0) throw std::invalid_argument("kl_loss: no valid positions");

    double acc = 0.0;
    for (int i = 0; i < probs.rows(); ++i) {
        if (!valid[static_cast<std::size_t>(i)]) continue;
        for (int j = 0; j < probs.cols(); ++j) {
            double y = targets(i, j);
            if (y <= 0.0) continue;
            acc += y * std::log(y / std::max(probs.value()(i, j), kKlPredictionFloor));
        }
    }
    Mat v(1, 1);
    v(0, 0) = acc / n_valid;
    return detail::make_op(std::move(v), {probs}, [targets, valid, n_valid](TensorData& out) {
        if (!out.parents[0]->requires_grad) return;
        Mat& dp = out.parents[0]->ensure_grad();
        const Mat& p = *out.parents[0]->values;
        double g = out.grad(0, 0) / n_valid;
        for (int i = 0; i < p.rows(); ++i) {
            if (!valid[static_cast<std::size_t>(i)]) continue;
            for (int j = 0; j < p.cols(); ++j) {
                double y = targets(i, j);
                if (y <= 0.0) continue;
                dp(i, j) -= g * y / std::max(p(i, j), kKlPredictionFloor);
            }
        }
    });
}

// --- accuracy and LR schedule ----------------------------------------------

inline int argmax_row(const Mat& m, int row) {
    int best = 0;
    for (int j = 1; j < m.cols(); ++j)
        if (m(row, j) > m(row, best)) best = j;
    return best;
}

// Percentage of valid rows where pred and target share the argmax class.
inline double classification_accuracy(const Mat& preds, const Mat& targets,
                                      const std::vector<bool>& valid) {
    if (preds.rows() != targets.rows() || preds.cols() != targets.cols())
        throw std::invalid_argument("classification_accuracy: shape mismatch");
    int n_valid = 0, n_correct = 0;
    for (int i = 0; i < preds.rows(); ++i) {
        if (!valid[static_cast<std::size_t>(i)]) continue;
        ++n_valid;
        n_correct += argmax_row(preds, i) == argmax_row(targets, i);
    }
    return n_valid == 0 ? 0.0 : 100.0 * n_correct / n_valid;
}

// Decays the rate when neither of the last two completed epochs improved
// on the best prior accuracy by at least min_improvement points.
inline double lr_schedule_step(const std::vector<double>& history, double current_lr,
                               const TrainConfig& cfg) {
    int window = cfg.plateau_epochs;
    if (static_cast<int>(history.size()) < window + 1) return current_lr;
    double best_prior = history[0];
    for (std::size_t i = 1; i + static_cast<std::size_t>(window) < history.size(); ++i)
        best_prior = std::max(best_prior, history[i]);
    for (std::size_t i = history.size() - static_cast<std::size_t>(window); i < history.size(); ++i)
        if (history[i] - best_prior >= cfg.min_improvement) return current_lr;
    return current_lr * cfg.decay_factor;
}

// --- Adam -------------------------------------------------------------------

struct AdamState {
    std::vector<Mat> m, v;
    long t = 0;
};

inline void adam_init(AdamState& state, const ModelParams& params) {
    state.m.clear();
    state.v.clear();
    state.t = 0;
    for (const Tensor* p : params.all()) {
        state.m.push_back(Mat::Zero(p->rows(), p->cols()));
        state.v.push_back(Mat::Zero(p->rows(), p->cols()));
    }
}

namespace detail {

// Standard bias-corrected Adam; aborts on non-finite gradients.
inline void adam_apply(const std::vector<Tensor*>& tensors, const std::vector<Mat>& grads,
                       AdamState& state, double lr, const TrainConfig& cfg) {
    if (grads.size() != tensors.size() || state.m.size() != tensors.size())
        throw std::invalid_argument("adam_step: parameter/gradient count mismatch");
    ++state.t;
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        const Mat& g = grads[i];
        if (!g.allFinite())
            throw NumericError("adam_step: non-finite gradient in parameter group " +
                               std::to_string(i));
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g.cwiseProduct(g);
        Mat mhat = state.m[i] / bc1;
        Mat vhat = state.v[i] / bc2;
        tensors[i]->value().array() -=
            lr * mhat.array() / (vhat.array().sqrt() + cfg.epsilon);
    }
}

} // namespace detail

inline void adam_step(ModelParams& params, const std::vector<Mat>& grads, AdamState& state,
                      double lr, const TrainConfig& cfg) {
    detail::adam_apply(params.all(), grads, state, lr, cfg);
}

// --- training loop -----------------------------------------------------------

struct EpochMetrics {
    int epoch;
    double train_loss;
    double val_loss;
    double val_accuracy;
    double lr;
};

struct TrainResult {
    std::vector<EpochMetrics> history;
    double best_val_accuracy = -1.0;
    int best_epoch = -1;
};

namespace detail {

struct ExampleEval {
    double kl_sum = 0.0;        // KL summed over valid positions
    int n_valid = 0;
    int n_correct = 0;
};

inline Mat targets_matrix(const TrainExample& ex, int padded_len, int n_classes) {
    Mat t = Mat::Zero(padded_len, n_classes);
    for (int i = 0; i < ex.length(); ++i) {
        const auto& probs = ex.targets[static_cast<std::size_t>(i)].probs;
        if (static_cast<int>(probs.size()) != n_classes)
            throw std::invalid_argument("train: target class count != k+1");
        for (int j = 0; j < n_classes; ++j) t(i, j) = probs[static_cast<std::size_t>(j)];
    }
    return t;
}

inline std::vector<VoxelCube> padded_cubes(const TrainExample& ex, int padded_len, int g_in) {
    std::vector<VoxelCube> cubes = ex.cubes;
    VoxelCube zero;
    zero.G = g_in;
    zero.values.assign(27u * static_cast<std::size_t>(g_in), 0.0);
    cubes.resize(static_cast<std::size_t>(padded_len), zero);
    return cubes;
}

inline ExampleEval evaluate_example(const TrainExample& ex, const ModelParams& params,
                                    const ModelConfig& config) {
    std::vector<bool> pad(static_cast<std::size_t>(ex.length()), false);
    Tensor logits = forward_sequence(ex.cubes, pad, params, config);
    Tensor probs = softmax_rows(logits);
    Mat targets = targets_matrix(ex, ex.length(), config.k + 1);
    ExampleEval ev;
    ev.n_valid = ex.length();
    for (int i = 0; i < ex.length(); ++i) {
        std::vector<double> p(static_cast<std::size_t>(config.k + 1));
        for (int j = 0; j <= config.k; ++j) p[static_cast<std::size_t>(j)] = probs.value()(i, j);
        ev.kl_sum += kl_divergence(ex.targets[static_cast<std::size_t>(i)].probs, p);
        ev.n_correct += argmax_row(probs.value(), i) == argmax_row(targets, i);
    }
    return ev;
}

} // namespace detail

// Seeded 80/20 split; datasets smaller than 5 examples validate on the
// training set itself.
inline void split_dataset(int n, uint64_t seed, std::vector<int>& train_idx,
                          std::vector<int>& val_idx) {
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng rng(derive_seed(seed, 0x5917u));
    shuffle_in_place(order, rng);
    int n_val = n / 5;
    if (n < 5) {
        train_idx = order;
        val_idx = order;
        return;
    }
    val_idx.assign(order.begin(), order.begin() + n_val);
    train_idx.assign(order.begin() + n_val, order.end());
}

// Epoch loop: seeded shuffled batches padded to their longest member,
// per-example forward/backward (parallelizable) with gradients reduced in
// example order, Adam update, validation metrics, plateau LR decay, and a
// best-validation-accuracy checkpoint.
inline TrainResult train_loop(const std::vector<TrainExample>& dataset, ModelParams& params,
                              const TrainConfig& cfg, const std::string& checkpoint_path,
                              std::ostream* log = nullptr, int threads = 1) {
    cfg.validate();
    params.config.validate();
    if (dataset.empty()) throw EmptyDatasetError("train_loop: empty dataset");
    const ModelConfig& mc = params.config;
    for (const auto& ex : dataset) {
        if (ex.length() < 2 || ex.length() > mc.max_len ||
            ex.targets.size() != ex.cubes.size())
            throw std::invalid_argument("train_loop: malformed example");
    }

    std::vector<int> train_idx, val_idx;
    split_dataset(static_cast<int>(dataset.size()), cfg.seed, train_idx, val_idx);

    AdamState adam;
    adam_init(adam, params);
    double lr = cfg.lr;
    std::vector<double> acc_since_decay;
    TrainResult result;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(cfg.seed, 1, static_cast<uint64_t>(epoch)));
        std::vector<int> order = train_idx;
        shuffle_in_place(order, shuffle_rng);

        double epoch_kl = 0.0;
        long epoch_valid = 0;
        int n_batches = (static_cast<int>(order.size()) + cfg.batch_size - 1) / cfg.batch_size;
        for (int b = 0; b < n_batches; ++b) {
            int lo = b * cfg.batch_size;
            int hi = std::min<int>(lo + cfg.batch_size, static_cast<int>(order.size()));
            int n_ex = hi - lo;

            int padded_len = 0;
            long batch_valid = 0;
            for (int e = 0; e < n_ex; ++e) {
                const auto& ex = dataset[static_cast<std::size_t>(order[static_cast<std::size_t>(lo + e)])];
                padded_len = std::max(padded_len, ex.length());
                batch_valid += ex.length();
            }

            std::vector<ModelParams> clones;
            clones.reserve(static_cast<std::size_t>(n_ex));
            for (int e = 0; e < n_ex; ++e) clones.push_back(params.shared_clone());
            std::vector<double> losses(static_cast<std::size_t>(n_ex), 0.0);

            parallel_for(static_cast<std::size_t>(n_ex), threads, [&](std::size_t e) {
                const auto& ex =
                    dataset[static_cast<std::size_t>(order[static_cast<std::size_t>(lo) + e])];
                ModelParams& local = clones[e];
                int len = ex.length();
                std::vector<bool> pad(static_cast<std::size_t>(padded_len), false);
                std::vector<bool> valid(static_cast<std::size_t>(padded_len), true);
                for (int i = len; i < padded_len; ++i) {
                    pad[static_cast<std::size_t>(i)] = true;
                    valid[static_cast<std::size_t>(i)] = false;
                }
                Rng drop_rng(derive_seed(cfg.seed, 2 + static_cast<uint64_t>(epoch),
                                         static_cast<uint64_t>(b), static_cast<uint64_t>(e)));
                Tensor logits = forward_sequence(detail::padded_cubes(ex, padded_len, mc.g_in),
                                                 pad, local, mc, true, &drop_rng);
                Tensor probs = softmax_rows(logits);
                Mat targets = detail::targets_matrix(ex, padded_len, mc.k + 1);
                Tensor loss = kl_loss(probs, targets, valid);
                losses[e] = loss.value()(0, 0);
                // batch loss is the mean over all valid positions in the
                // batch; weight each per-example mean accordingly
                double w = static_cast<double>(len) / static_cast<double>(batch_valid);
                scale(loss, w).backward();
            });

            for (int e = 0; e < n_ex; ++e) {
                const auto& ex =
                    dataset[static_cast<std::size_t>(order[static_cast<std::size_t>(lo + e)])];
                if (!std::isfinite(losses[static_cast<std::size_t>(e)]))
                    throw NumericError("train_loop: non-finite loss at epoch " +
                                       std::to_string(epoch) + " batch " + std::to_string(b));
                epoch_kl += losses[static_cast<std::size_t>(e)] * ex.length();
                epoch_valid += ex.length();
            }

            // ordered reduction: example-order sum, independent of threads
            std::vector<Mat> grads;
            auto first = clones[0].all();
            for (std::size_t t = 0; t < first.size(); ++t) {
                const Mat& g = first[t]->node()->grad;
                grads.push_back(g.size() ? g : Mat::Zero(first[t]->rows(), first[t]->cols()));
            }
            for (int e = 1; e < n_ex; ++e) {
                auto tensors = clones[static_cast<std::size_t>(e)].all();
                for (std::size_t t = 0; t < tensors.size(); ++t)
                    if (tensors[t]->node()->grad.size()) grads[t] += tensors[t]->node()->grad;
            }
            adam_step(params, grads, adam, lr, cfg);
        }

        // validation pass (eval mode), parallel over examples into slots
        std::vector<detail::ExampleEval> evals(val_idx.size());
        parallel_for(val_idx.size(), threads, [&](std::size_t i) {
            evals[i] = detail::evaluate_example(
                dataset[static_cast<std::size_t>(val_idx[i])], params, mc);
        });
        double val_kl = 0.0;
        long val_valid = 0, val_correct = 0;
        for (const auto& ev : evals) {
            val_kl += ev.kl_sum;
            val_valid += ev.n_valid;
            val_correct += ev.n_correct;
        }
        double val_loss = val_kl / static_cast<double>(val_valid);
        double val_acc = 100.0 * static_cast<double>(val_correct) / static_cast<double>(val_valid);
        double train_loss = epoch_kl / static_cast<double>(epoch_valid);

        result.history.push_back({epoch, train_loss, val_loss, val_acc, lr});
        if (log) {
            std::ostringstream line;
            line << std::setprecision(17) << epoch << ", " << train_loss << ", " << val_loss
                 << ", " << val_acc << ", " << lr;
            *log << line.str() << "\n";
        }
        if (val_acc > result.best_val_accuracy) {
            result.best_val_accuracy = val_acc;
            result.best_epoch = epoch;
            if (!checkpoint_path.empty()) save_checkpoint(params, checkpoint_path);
        }

        acc_since_decay.push_back(val_acc);
        double new_lr = lr_schedule_step(acc_since_decay, lr, cfg);
        if (new_lr != lr) {
            lr = new_lr;
            acc_since_decay.clear();   // plateau detection restarts after a decay
        }
    }
    return result;
}

} // namespace tracto
