#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "tracto/pipeline.hpp"

namespace {

struct FlagOverrides {
    std::string config_path;
    std::string out_dir;
    std::string candidate;
    int threads = -1;
    long long seed = -1;
    int n_seeds = -1;
    int epochs = -1;
    bool no_cnn3d = false;
    bool no_reverse_aug = false;
    bool no_smooth_labels = false;
};

void add_common_flags(CLI::App* cmd, FlagOverrides& f) {
    cmd->add_option("--config", f.config_path, "structured text config file (key = value lines)");
    cmd->add_option("--out-dir", f.out_dir, "artifact directory (default .)");
    cmd->add_option("--threads", f.threads, "worker thread cap")->check(CLI::PositiveNumber);
    cmd->add_option("--seed", f.seed, "master seed for phantom, training, and tracking")
        ->check(CLI::NonNegativeNumber);
}

// precedence: built-in defaults < config file < flags
tracto::RunConfig merge(const FlagOverrides& f) {
    tracto::RunConfig cfg;
    if (!f.config_path.empty()) tracto::apply_config_file(cfg, f.config_path);
    if (!f.out_dir.empty()) cfg.out_dir = f.out_dir;
    if (!f.candidate.empty()) cfg.candidate = f.candidate;
    if (f.threads > 0) cfg.threads = f.threads;
    if (f.seed >= 0) {
        cfg.phantom_seed = static_cast<uint64_t>(f.seed);
        cfg.train.seed = static_cast<uint64_t>(f.seed);
        cfg.tracking.rng_seed = static_cast<uint64_t>(f.seed);
    }
    if (f.n_seeds >= 0) cfg.tracking.n_seeds = f.n_seeds;
    if (f.epochs > 0) cfg.train.epochs = f.epochs;
    if (f.no_cnn3d) cfg.model.use_cnn3d = cfg.train.use_cnn3d = false;
    if (f.no_reverse_aug) cfg.train.use_reverse_aug = false;
    if (f.no_smooth_labels) cfg.train.use_smooth_labels = false;
    return cfg;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"streamline tractography with an autoregressive direction model"};
    app.require_subcommand(1);

    FlagOverrides f;
    CLI::App* phantom = app.add_subcommand("phantom", "generate the synthetic dataset");
    CLI::App* train = app.add_subcommand("train", "fit the direction model on the references");
    CLI::App* track = app.add_subcommand("track", "trace streamlines with a trained checkpoint");
    CLI::App* eval = app.add_subcommand("eval", "score a tractogram against the ground truth");
    for (CLI::App* cmd : {phantom, train, track, eval}) add_common_flags(cmd, f);
    train->add_option("--epochs", f.epochs, "override the epoch budget")
        ->check(CLI::PositiveNumber);
    train->add_flag("--no-cnn3d", f.no_cnn3d, "embed the center voxel only (ablation)");
    train->add_flag("--no-reverse-aug", f.no_reverse_aug, "disable reversed-streamline data");
    train->add_flag("--no-smooth-labels", f.no_smooth_labels, "train on one-hot labels");
    track->add_option("--n-seeds", f.n_seeds, "number of tracking seeds")
        ->check(CLI::NonNegativeNumber);
    eval->add_option("--candidate", f.candidate, "tractogram to score (default out_dir/output.tck)");

    CLI11_PARSE(app, argc, argv);

    try {
        tracto::RunConfig cfg = merge(f);
        if (phantom->parsed()) tracto::cmd_phantom(cfg);
        else if (train->parsed()) tracto::cmd_train(cfg);
        else if (track->parsed()) tracto::cmd_track(cfg);
        else tracto::cmd_eval(cfg);
    } catch (const tracto::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
