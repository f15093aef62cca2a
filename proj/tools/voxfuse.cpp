// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#include "voxfuse/metrics.hpp"
#include "voxfuse/parallel.hpp"
#include "voxfuse/synthetic.hpp"
#include "voxfuse/training.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

using namespace voxfuse;
namespace fs = std::filesystem;

namespace {

struct Globals {
    std::optional<std::uint64_t> seed;
    int threads = 1;
    std::optional<std::string> precision;
};

nlohmann::json read_json(const fs::path &path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open " + path.string());
    }
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception &e) {
        throw std::runtime_error(path.string() + ": " + e.what());
    }
}

std::string frame_file(int i, const char *ext) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "frame_%03d.%s", i, ext);
    return buf;
}

std::string format_psnr(double v) {
    if (std::isinf(v)) {
        return "inf";
    }
    std::ostringstream os;
    os.precision(6);
    os << std::fixed << v;
    return os.str();
}

void apply_globals(const Globals &g, Checkpoint &ckpt) {
    if (g.precision) {
        ckpt.config.precision = parse_precision(*g.precision);
    }
}

/// Held-out frames when the scene has any, otherwise the training frames.
std::vector<int> default_frames(const SceneDataset &scene) {
    return scene.held_out.empty() ? scene.train : scene.held_out;
}

int cmd_gen_scene(const Globals &g, const std::string &preset, const std::string &spec_path, const std::string &out,
                  int frames) {
    SyntheticSpec spec;
    if (!spec_path.empty()) {
        spec = read_json(spec_path).get<SyntheticSpec>();
    } else {
        spec = preset_spec(preset);
    }
    if (g.seed) {
        spec.seed = *g.seed;
    }
    if (frames > 0) {
        spec.frames = frames;
        std::erase_if(spec.held_out, [&](int i) { return i >= frames; });
    }
    const SceneDataset scene = generate_synthetic(spec);
    const fs::path manifest = save_scene(scene, out);
    std::cout << "wrote " << scene.views.size() << " frames to " << manifest.string() << "\n";
    return 0;
}

int cmd_train(const Globals &g, const std::string &scene_path, const std::string &stage_name,
              const std::string &config_path, const std::string &model_path, const std::string &init,
              const std::string &out, int iters, int log_every) {
    const SceneDataset scene = load_scene(scene_path);
    const Stage stage = parse_stage(stage_name);
    if (stage == Stage::finetune) {
        throw std::invalid_argument("use the finetune subcommand for fine-tuning");
    }
    Checkpoint ckpt;
    if (!init.empty()) {
        ckpt = load_checkpoint(init);
        if (!config_path.empty()) {
            TrainConfig cfg = read_json(config_path).get<TrainConfig>();
            cfg.stage = ckpt.config.stage;
            ckpt.config = cfg;
        }
    } else {
        TrainConfig cfg = config_path.empty() ? TrainConfig{} : read_json(config_path).get<TrainConfig>();
        ModelConfig model = model_path.empty() ? ModelConfig{} : read_json(model_path).get<ModelConfig>();
        if (g.seed) {
            cfg.seed = *g.seed;
        }
        cfg.stage = stage;
        ckpt = init_checkpoint(model, cfg);
    }
    apply_globals(g, ckpt);
    const int n = iters >= 0 ? iters : ckpt.config.iterations;
    const TrainObserver log = [&](const IterationLog &l) {
        if (log_every > 0 && (l.step % log_every == 0)) {
            std::cerr << to_string(l.stage) << " step " << l.step << " loss " << l.loss << " lr " << l.lr
                      << " voxels " << l.voxels << "\n";
        }
    };
    if (stage == Stage::local) {
        train_stage_local(scene, ckpt, n, log);
    } else {
        train_stage_end2end(scene, ckpt, n, log);
    }
    save_checkpoint(ckpt, out);
    std::cout << "saved " << to_string(stage) << " checkpoint at step " << ckpt.adam.step << " to " << out << "\n";
    return 0;
}

int cmd_reconstruct(const Globals &g, const std::string &ckpt_path, const std::string &scene_path,
                    const std::string &out, bool no_prune, const std::string &snapshots) {
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    apply_globals(g, ckpt);
    const SceneDataset scene = load_scene(scene_path);
    if (!snapshots.empty()) {
        fs::create_directories(snapshots);
    }
    double total = 0.0;
    const FusionObserver observer = [&](const FusionStep &s) {
        total += s.seconds;
        std::cout << "frame " << s.frame_index << " local " << s.local.size() << " fused " << s.fused.size()
                  << " pruned " << s.removed.size() << " time " << s.seconds << " s\n";
        if (!snapshots.empty()) {
            save_grid(s.fused, fs::path(snapshots) / ("step_" + std::to_string(s.position) + ".vxgr"));
        }
    };
    const FusionState state = reconstruct_scene(scene, ckpt, !no_prune, observer);
    save_grid(state.global, out);
    std::cout << "fused " << state.frames_fused << " frames into " << state.global.size() << " voxels in " << total
              << " s\n";
    return 0;
}

std::vector<int> resolve_frames(const SceneDataset &scene, const std::vector<int> &frames) {
    std::vector<int> out = frames.empty() ? default_frames(scene) : frames;
    for (int f : out) {
        if (f < 0 || f >= static_cast<int>(scene.views.size())) {
            throw std::invalid_argument("frame " + std::to_string(f) + " is not in the scene");
        }
    }
    return out;
}

int cmd_render(const Globals &g, const std::string &ckpt_path, const std::string &grid_path,
               const std::string &scene_path, const std::vector<int> &frames, const std::string &out) {
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    apply_globals(g, ckpt);
    const SparseVoxelGrid grid = load_grid(grid_path);
    const SceneDataset scene = load_scene(scene_path);
    fs::create_directories(out);
    const RenderConfig rc = render_config(scene, ckpt.config);
    for (int f : resolve_frames(scene, frames)) {
        const CameraView &v = scene.views[static_cast<std::size_t>(f)];
        const RenderedImage r = render_image(v.intrinsics, v.pose, grid, ckpt.params, ckpt.model, rc,
                                             ckpt.config.precision);
        write_png(fs::path(out) / frame_file(f, "png"), r.image);
        write_pfm(fs::path(out) / frame_file(f, "pfm"), r.depth);
    }
    std::cout << "rendered to " << out << "\n";
    return 0;
}

int cmd_finetune(const Globals &g, const std::string &ckpt_path, const std::string &grid_path,
                 const std::string &scene_path, int iters, int stride, const std::string &out,
                 const std::string &grid_out, int log_every) {
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    apply_globals(g, ckpt);
    if (!grid_path.empty()) {
        ckpt.grid = load_grid(grid_path);
    }
    if (stride > 0) {
        ckpt.config.subdivide_stride = stride;
    }
    const SceneDataset scene = load_scene(scene_path);
    finetune(scene, ckpt, iters, [&](const IterationLog &l) {
        if (log_every > 0 && l.step % log_every == 0) {
            std::cerr << "finetune step " << l.step << " loss " << l.loss << " voxels " << l.voxels << "\n";
        }
    });
    save_checkpoint(ckpt, out);
    if (!grid_out.empty()) {
        save_grid(*ckpt.grid, grid_out);
    }
    std::cout << "fine-tuned " << iters << " steps, " << ckpt.grid->size() << " voxels\n";
    return 0;
}

int cmd_eval(const std::string &scene_path, const std::string &renders, const std::vector<int> &frames,
             const std::string &csv, double threshold) {
    const SceneDataset scene = load_scene(scene_path);
    std::ofstream table;
    if (!csv.empty()) {
        table.open(csv);
        if (!table) {
            throw std::runtime_error("cannot write " + csv);
        }
        table << "frame,psnr,ssim,depth_abs_err,depth_acc\n";
    }
    double sum_psnr = 0.0;
    double sum_ssim = 0.0;
    const std::vector<int> list = resolve_frames(scene, frames);
    std::cout << "frame      psnr     ssim  depth_abs  depth_acc\n";
    for (int f : list) {
        const fs::path img = fs::path(renders) / frame_file(f, "png");
        if (!fs::exists(img)) {
            throw std::runtime_error("missing render " + img.string());
        }
        const Image pred = read_png(img);
        const Image &gt = scene.views[static_cast<std::size_t>(f)].image;
        const double p = psnr(pred, gt);
        const double s = ssim(pred, gt);
        sum_psnr += p;
        sum_ssim += s;
        std::string abs_err = "";
        std::string acc = "";
        const fs::path dp = fs::path(renders) / frame_file(f, "pfm");
        if (!scene.depth.empty() && fs::exists(dp)) {
            try {
                const DepthMetrics d = depth_metrics(read_pfm(dp), scene.depth[static_cast<std::size_t>(f)], threshold);
                abs_err = std::to_string(d.abs_err);
                acc = std::to_string(d.accuracy);
            } catch (const std::invalid_argument &) {
                // no pixel is valid in both maps
            }
        }
        if (table.is_open()) {
            table << f << "," << format_psnr(p) << "," << s << "," << abs_err << "," << acc << "\n";
        }
        std::printf("%5d %9s %8.4f %10s %10s\n", f, format_psnr(p).c_str(), s, abs_err.c_str(), acc.c_str());
    }
    const double n = static_cast<double>(list.size());
    std::printf(" mean %9s %8.4f\n", format_psnr(sum_psnr / n).c_str(), sum_ssim / n);
    std::cout << "LPIPS is not reported.\n";
    return 0;
}

int cmd_inspect(const std::string &grid_path) {
    const SparseVoxelGrid grid = load_grid(grid_path);
    std::cout << "active voxels: " << grid.size() << "\n";
    std::cout << "channels: " << grid.features.cols << "\n";
    const Lattice &lat = grid.index->lattice();
    std::cout << "voxel size: " << lat.voxel_size << "\n";
    if (grid.size() == 0) {
        return 0;
    }
    const VoxelCoord lo = grid.index->min_coord();
    const VoxelCoord hi = grid.index->max_coord();
    const Vec3 wmin = lat.voxel_min(lo);
    const Vec3 wmax = lat.voxel_min(hi) + Vec3::Constant(lat.voxel_size);
    std::cout << "voxel bounds: [" << lo.x << "," << lo.y << "," << lo.z << "] - [" << hi.x << "," << hi.y << ","
              << hi.z << "]\n";
    std::cout << "world bounds: [" << wmin.transpose() << "] - [" << wmax.transpose() << "]\n";
    std::cout << "channel rms:";
    for (int c = 0; c < grid.features.cols; ++c) {
        double s = 0.0;
        for (int r = 0; r < grid.features.rows; ++r) {
            s += grid.features(r, c) * grid.features(r, c);
        }
        std::printf(" %.4f", std::sqrt(s / grid.features.rows));
    }
    std::cout << "\n";
    return 0;
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"voxfuse: incremental sparse voxel radiance fields"};
    app.require_subcommand(1);
    Globals g;
    std::uint64_t seed = 0;
    std::string precision;
    auto *seed_opt = app.add_option("--seed", seed, "Random seed");
    app.add_option("--threads", g.threads, "Worker thread cap")->check(CLI::PositiveNumber);
    auto *prec_opt = app.add_option("--precision", precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));

    std::string preset = "cube-room";
    std::string spec_path;
    std::string out;
    int frames_count = 0;
    auto *gen = app.add_subcommand("gen-scene", "Generate a synthetic scene dataset");
    gen->add_option("--preset", preset, "cube-room, sphere or glossy");
    gen->add_option("--spec", spec_path, "Synthetic spec JSON")->check(CLI::ExistingFile);
    gen->add_option("--out", out, "Output directory")->required();
    gen->add_option("--frames", frames_count, "Override the frame count");

    std::string scene_path;
    std::string stage = "local";
    std::string config_path;
    std::string model_path;
    std::string init;
    int iters = -1;
    int log_every = 100;
    auto *train = app.add_subcommand("train", "Train the reconstruction networks");
    train->add_option("--scene", scene_path, "Scene manifest")->required()->check(CLI::ExistingFile);
    train->add_option("--stage", stage, "local or end2end")->check(CLI::IsMember({"local", "end2end"}));
    train->add_option("--config", config_path, "Training config JSON")->check(CLI::ExistingFile);
    train->add_option("--model", model_path, "Model config JSON")->check(CLI::ExistingFile);
    train->add_option("--init", init, "Resume from this checkpoint")->check(CLI::ExistingFile);
    train->add_option("--iters", iters, "Iterations (default from config)");
    train->add_option("--out", out, "Output checkpoint")->required();
    train->add_option("--log-every", log_every, "Progress interval");

    std::string ckpt_path;
    bool no_prune = false;
    std::string snapshots;
    auto *recon = app.add_subcommand("reconstruct", "Fuse the key frames into a global grid");
    recon->add_option("--checkpoint", ckpt_path, "Checkpoint")->required()->check(CLI::ExistingFile);
    recon->add_option("--scene", scene_path, "Scene manifest")->required()->check(CLI::ExistingFile);
    recon->add_option("--out", out, "Output grid file")->required();
    recon->add_flag("--no-prune", no_prune, "Disable pruning");
    recon->add_option("--snapshots", snapshots, "Write the grid after every frame into this directory");

    std::string grid_path;
    std::vector<int> frames;
    auto *render = app.add_subcommand("render", "Render a grid from the scene's cameras");
    render->add_option("--checkpoint", ckpt_path, "Checkpoint")->required()->check(CLI::ExistingFile);
    render->add_option("--grid", grid_path, "Grid file")->required()->check(CLI::ExistingFile);
    render->add_option("--scene", scene_path, "Manifest providing the poses")->required()->check(CLI::ExistingFile);
    render->add_option("--frames", frames, "Frame indices (default held-out)")->delimiter(',');
    render->add_option("--out", out, "Output directory")->required();

    int ft_iters = 5000;
    int stride = 0;
    std::string grid_out;
    auto *ft = app.add_subcommand("finetune", "Optimize a reconstructed grid per scene");
    ft->add_option("--checkpoint", ckpt_path, "Checkpoint")->required()->check(CLI::ExistingFile);
    ft->add_option("--grid", grid_path, "Grid to start from (default: the checkpoint's)")->check(CLI::ExistingFile);
    ft->add_option("--scene", scene_path, "Scene manifest")->required()->check(CLI::ExistingFile);
    ft->add_option("--iters", ft_iters, "Iterations");
    ft->add_option("--stride", stride, "Prune and subdivide every this many iterations");
    ft->add_option("--out", out, "Output checkpoint")->required();
    ft->add_option("--grid-out", grid_out, "Also write the grid here");
    ft->add_option("--log-every", log_every, "Progress interval");

    std::string renders;
    std::string csv;
    double threshold = 0.008;
    auto *eval = app.add_subcommand("eval", "Score renders against the scene images");
    eval->add_option("--scene", scene_path, "Scene manifest")->required()->check(CLI::ExistingFile);
    eval->add_option("--renders", renders, "Directory of frame_NNN.png renders")->required()->check(CLI::ExistingDirectory);
    eval->add_option("--frames", frames, "Frame indices (default held-out)")->delimiter(',');
    eval->add_option("--csv", csv, "CSV output");
    eval->add_option("--depth-threshold", threshold, "Depth accuracy threshold (m)");

    auto *inspect = app.add_subcommand("inspect", "Print grid statistics");
    inspect->add_option("--grid", grid_path, "Grid file")->required()->check(CLI::ExistingFile);

    CLI11_PARSE(app, argc, argv);
    if (*seed_opt) {
        g.seed = seed;
    }
    if (*prec_opt) {
        g.precision = precision;
    }
    set_thread_count(g.threads);

    try {
        if (*gen) {
            return cmd_gen_scene(g, preset, spec_path, out, frames_count);
        }
        if (*train) {
            return cmd_train(g, scene_path, stage, config_path, model_path, init, out, iters, log_every);
        }
        if (*recon) {
            return cmd_reconstruct(g, ckpt_path, scene_path, out, no_prune, snapshots);
        }
        if (*render) {
            return cmd_render(g, ckpt_path, grid_path, scene_path, frames, out);
        }
        if (*ft) {
            return cmd_finetune(g, ckpt_path, grid_path, scene_path, ft_iters, stride, out, grid_out, log_every);
        }
        if (*eval) {
            return cmd_eval(scene_path, renders, frames, csv, threshold);
        }
        if (*inspect) {
            return cmd_inspect(grid_path);
        }
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
