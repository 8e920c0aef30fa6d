#pragma once

#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>

#include "tracto/config.hpp"
#include "tracto/model.hpp"
#include "tracto/nifti.hpp"
#include "tracto/phantom.hpp"
#include "tracto/sh.hpp"
#include "tracto/tck.hpp"
#include "tracto/tracker.hpp"
#include "tracto/train.hpp"

namespace tracto {

// Merged configuration for the pipeline commands. Model dims are toy-scale;
// the embedding width doubles as the spherical-resampling target so volumes
// always match the checkpoint input layer.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    TrackingConfig tracking;
    SmoothingConfig smoothing{0.1};
    int window_overlap = 10;
    double phantom_noise_sigma = 0.0;
    double phantom_radius = 2.2;
    uint64_t phantom_seed = 42;
    int sh_order = -1;   // <0: choose from the gradient count
    std::string out_dir = ".";
    std::string candidate;   // eval input; defaults to <out_dir>/output.tck
    int threads = 1;

    RunConfig() {
        model.d_model = 64;
        model.n_layers = 2;
        model.n_heads = 4;
        model.d_ffn = 128;
        model.g_in = 32;
        model.max_len = 16;
        train.epochs = 60;
        train.plateau_epochs = 5;
        train.seed = 6;
        // half-voxel steps; references share this spacing, doubling the
        // training windows the spatial-context embedding has to fit on
        tracking.step_size = 0.5;
    }

    void validate() const {
        model.validate();
        train.validate();
        tracking.validate();
        if (smoothing.sigma <= 0.0)
            throw std::invalid_argument("RunConfig: smoothing.sigma must be > 0");
        if (window_overlap < 0 || window_overlap >= model.max_len)
            throw std::invalid_argument("RunConfig: dataset.window_overlap must be in [0, model.max_len)");
        if (phantom_noise_sigma < 0.0)
            throw std::invalid_argument("RunConfig: phantom.noise_sigma must be >= 0");
        if (threads < 1) throw std::invalid_argument("RunConfig: threads must be >= 1");
        if (out_dir.empty()) throw std::invalid_argument("RunConfig: out_dir must not be empty");
    }
};

// Apply one dotted `key = value` pair; unknown keys are rejected so typos
// fail loudly instead of silently using a default.
inline void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value) {
    auto d = [&] { return config_double(key, value); };
    auto i = [&] { return static_cast<int>(config_int(key, value)); };
    auto u = [&] { return static_cast<uint64_t>(config_int(key, value)); };
    auto b = [&] { return config_bool(key, value); };

    if (key == "model.k") cfg.model.k = i();
    else if (key == "model.d_model") cfg.model.d_model = i();
    else if (key == "model.n_layers") cfg.model.n_layers = i();
    else if (key == "model.n_heads") cfg.model.n_heads = i();
    else if (key == "model.d_ffn") cfg.model.d_ffn = i();
    else if (key == "model.dropout") cfg.model.dropout_p = d();
    else if (key == "model.g_in") cfg.model.g_in = i();
    else if (key == "model.max_len") cfg.model.max_len = i();
    else if (key == "model.use_cnn3d") cfg.model.use_cnn3d = cfg.train.use_cnn3d = b();
    else if (key == "train.lr") cfg.train.lr = d();
    else if (key == "train.epochs") cfg.train.epochs = i();
    else if (key == "train.batch_size") cfg.train.batch_size = i();
    else if (key == "train.seed") cfg.train.seed = u();
    else if (key == "train.decay_factor") cfg.train.decay_factor = d();
    else if (key == "train.plateau_epochs") cfg.train.plateau_epochs = i();
    else if (key == "train.min_improvement") cfg.train.min_improvement = d();
    else if (key == "train.use_reverse_aug") cfg.train.use_reverse_aug = b();
    else if (key == "train.use_smooth_labels") cfg.train.use_smooth_labels = b();
    else if (key == "tracking.step_size") cfg.tracking.step_size = d();
    else if (key == "tracking.angle_threshold") cfg.tracking.angle_threshold = d();
    else if (key == "tracking.fa_threshold") cfg.tracking.fa_threshold = d();
    else if (key == "tracking.max_steps") cfg.tracking.max_steps = i();
    else if (key == "tracking.n_seeds") cfg.tracking.n_seeds = i();
    else if (key == "tracking.rng_seed") cfg.tracking.rng_seed = u();
    else if (key == "smoothing.sigma") cfg.smoothing.sigma = d();
    else if (key == "dataset.window_overlap") cfg.window_overlap = i();
    else if (key == "phantom.noise_sigma") cfg.phantom_noise_sigma = d();
    else if (key == "phantom.radius") cfg.phantom_radius = d();
    else if (key == "phantom.seed") cfg.phantom_seed = u();
    else if (key == "sh.order") cfg.sh_order = i();
    else if (key == "out_dir") cfg.out_dir = value;
    else if (key == "candidate") cfg.candidate = value;
    else if (key == "threads") cfg.threads = i();
    else throw FormatError("config: unknown key '" + key + "'");
}

inline void apply_config_file(RunConfig& cfg, const std::string& path) {
    for (const auto& [key, value] : parse_config_file(path)) apply_config_entry(cfg, key, value);
}

// canonical artifact layout inside out_dir
namespace artifact {
inline std::string dwi(const RunConfig& c) { return c.out_dir + "/dwi.nii"; }
inline std::string bvals(const RunConfig& c) { return c.out_dir + "/bvals"; }
inline std::string bvecs(const RunConfig& c) { return c.out_dir + "/bvecs"; }
inline std::string wm_mask(const RunConfig& c) { return c.out_dir + "/wm_mask.nii"; }
inline std::string fa(const RunConfig& c) { return c.out_dir + "/fa.nii"; }
inline std::string reference(const RunConfig& c) { return c.out_dir + "/reference.tck"; }
inline std::string checkpoint(const RunConfig& c) { return c.out_dir + "/checkpoint.bin"; }
inline std::string metrics(const RunConfig& c) { return c.out_dir + "/metrics.log"; }
inline std::string output(const RunConfig& c) { return c.out_dir + "/output.tck"; }
inline std::string stop_summary(const RunConfig& c) { return c.out_dir + "/stop_reasons.txt"; }
inline std::string scores(const RunConfig& c) { return c.out_dir + "/scores.txt"; }
} // namespace artifact

// The synthetic dataset every command agrees on: fixed geometry, with the
// noise level, seed, and gradient count taken from the run configuration.
inline PhantomSpec phantom_spec_from(const RunConfig& cfg) {
    PhantomSpec spec = default_phantom_spec();
    spec.noise_sigma = cfg.phantom_noise_sigma;
    spec.rng_seed = cfg.phantom_seed;
    spec.n_gradients = cfg.model.g_in;
    spec.ref_step = cfg.tracking.step_size;
    if (cfg.phantom_radius > 0.0)
        for (auto& b : spec.bundles) b.radius = cfg.phantom_radius;
    return spec;
}

inline void cmd_phantom(const RunConfig& cfg, std::ostream& log = std::cerr) {
    cfg.validate();
    PhantomSpec spec = phantom_spec_from(cfg);
    PhantomOutput out = generate_phantom(spec, cfg.threads);
    write_nifti(out.dwi, artifact::dwi(cfg));
    write_bvals(out.dwi.bvalues, artifact::bvals(cfg));
    write_bvecs(out.dwi.gradients, artifact::bvecs(cfg));
    write_nifti(out.wm_mask, artifact::wm_mask(cfg));
    write_nifti(out.fa_map, artifact::fa(cfg));
    write_tck(out.gt.references, artifact::reference(cfg));
    log << "phantom: " << spec.bundles.size() << " bundles, " << out.gt.references.size()
        << " reference streamlines -> " << cfg.out_dir << "\n";
}

// DWI + gradient table from disk, projected onto the model's input sphere.
inline DwiVolume load_resampled_volume(const RunConfig& cfg) {
    NiftiImage img = read_nifti(artifact::dwi(cfg));
    DwiVolume dwi =
        make_dwi(img, read_bvecs(artifact::bvecs(cfg)), read_bvals(artifact::bvals(cfg)));
    int n_dwi = 0;
    for (double b : dwi.bvalues) n_dwi += b >= 1e-6;
    int order = cfg.sh_order >= 0 ? cfg.sh_order : auto_sh_order(n_dwi);
    return resample_volume(dwi, make_sphere(cfg.model.g_in), order, cfg.threads);
}

inline TrainResult cmd_train(const RunConfig& cfg, std::ostream& log = std::cerr) {
    cfg.validate();
    DwiVolume volume = load_resampled_volume(cfg);
    Tractogram refs = read_tck(artifact::reference(cfg));
    Tractogram resampled;
    for (const auto& s : refs.streamlines)
        resampled.streamlines.push_back(resample_streamline(s, cfg.tracking.step_size));

    Sphere sphere = make_sphere(cfg.model.k);
    DatasetOptions opt;
    opt.smoothing = cfg.smoothing;
    opt.max_len = cfg.model.max_len;
    opt.window_overlap = cfg.window_overlap;
    opt.use_reverse_aug = cfg.train.use_reverse_aug;
    opt.use_smooth_labels = cfg.train.use_smooth_labels;
    DatasetResult dataset = build_dataset(resampled, volume, sphere, opt);
    log << "train: " << dataset.examples.size() << " examples from " << refs.size()
        << " streamlines (" << dataset.dropped_streamlines << " dropped)\n";

    ModelConfig mc = cfg.model;
    mc.use_cnn3d = cfg.model.use_cnn3d && cfg.train.use_cnn3d;
    ModelParams params = ModelParams::init(mc, cfg.train.seed);

    std::ofstream metrics(artifact::metrics(cfg));
    if (!metrics) throw IoError("cmd_train: cannot open " + artifact::metrics(cfg));
    TrainResult result = train_loop(dataset.examples, params, cfg.train,
                                    artifact::checkpoint(cfg), &metrics, cfg.threads);
    log << "train: best val accuracy " << result.best_val_accuracy << "% at epoch "
        << result.best_epoch << "\n";
    return result;
}

inline TrackResult cmd_track(const RunConfig& cfg, std::ostream& log = std::cerr) {
    cfg.validate();
    ModelParams params = load_checkpoint(artifact::checkpoint(cfg));
    DwiVolume volume = load_resampled_volume(cfg);
    if (volume.G != params.config.g_in)
        throw std::invalid_argument("cmd_track: checkpoint expects " +
                                    std::to_string(params.config.g_in) + " channels, volume has " +
                                    std::to_string(volume.G));
    ScalarMap wm = make_scalar_map(read_nifti(artifact::wm_mask(cfg)), ScalarMap::Kind::WmMask);
    ScalarMap fa = make_scalar_map(read_nifti(artifact::fa(cfg)), ScalarMap::Kind::Fa);

    Sphere sphere = make_sphere(params.config.k);
    TrackResult result =
        track_all(params, sphere, volume, wm, fa, cfg.tracking, cfg.threads);
    write_tck(result.tractogram, artifact::output(cfg));

    std::ofstream summary(artifact::stop_summary(cfg));
    if (!summary) throw IoError("cmd_track: cannot open " + artifact::stop_summary(cfg));
    for (int r = 0; r < kStopReasonCount; ++r) {
        summary << to_string(static_cast<StopReason>(r)) << "=" << result.histogram[r] << "\n";
        log << "track: " << to_string(static_cast<StopReason>(r)) << " " << result.histogram[r]
            << "\n";
    }
    summary << "failures=" << result.failures << "\n";
    log << "track: failures " << result.failures << ", wrote " << result.tractogram.size()
        << " streamlines\n";
    return result;
}

inline Scores cmd_eval(const RunConfig& cfg, std::ostream& machine = std::cout,
                       std::ostream& log = std::cerr) {
    cfg.validate();
    std::string path = cfg.candidate.empty() ? artifact::output(cfg) : cfg.candidate;
    Tractogram candidate = read_tck(path);

    // the ground truth re-derives deterministically from the phantom spec
    PhantomOutput phantom = generate_phantom(phantom_spec_from(cfg), cfg.threads);
    Scores s = score_tractogram(candidate, phantom.gt);

    std::ostringstream kv;
    kv << std::setprecision(17);
    kv << "vc=" << s.vc << "\n"
       << "ol=" << s.ol << "\n"
       << "or=" << s.overreach << "\n"
       << "f1=" << s.f1 << "\n"
       << "n_valid=" << s.n_valid << "\n"
       << "n_streamlines=" << candidate.size() << "\n";
    for (std::size_t b = 0; b < phantom.gt.bundles.size(); ++b)
        kv << "bundle." << phantom.gt.bundles[b].name << ".vc_count=" << s.bundle_vc_count[b]
           << "\n"
           << "bundle." << phantom.gt.bundles[b].name << ".ol=" << s.bundle_ol[b] << "\n"
           << "bundle." << phantom.gt.bundles[b].name << ".or=" << s.bundle_or[b] << "\n"
           << "bundle." << phantom.gt.bundles[b].name << ".f1=" << s.bundle_f1[b] << "\n";

    machine << kv.str();
    std::ofstream out(artifact::scores(cfg));
    if (!out) throw IoError("cmd_eval: cannot open " + artifact::scores(cfg));
    out << kv.str();

    log << std::fixed << std::setprecision(2);
    log << "eval: " << path << " against the synthetic ground truth\n"
        << "  valid connections " << s.vc << "% (" << s.n_valid << "/" << candidate.size()
        << ")\n"
        << "  mean overlap " << s.ol << "%, mean overreach " << s.overreach << "%, mean F1 "
        << s.f1 << "%\n";
    return s;
}

} // namespace tracto
