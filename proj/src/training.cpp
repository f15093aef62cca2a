// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#include "voxfuse/training.hpp"

#include "voxfuse/local_reconstruction.hpp"
#include "voxfuse/metrics.hpp"
#include "voxfuse/ops.hpp"

#include <algorithm>
#include <cmath>

namespace voxfuse {

using nlohmann::json;

Stage parse_stage(const std::string &name) {
    if (name == "local") {
        return Stage::local;
    }
    if (name == "end2end") {
        return Stage::end2end;
    }
    if (name == "finetune") {
        return Stage::finetune;
    }
    throw std::invalid_argument("unknown stage '" + name + "' (expected local, end2end or finetune)");
}

std::string to_string(Stage s) {
    switch (s) {
    case Stage::local:
        return "local";
    case Stage::end2end:
        return "end2end";
    case Stage::finetune:
        return "finetune";
    }
    return "?";
}

void TrainConfig::validate() const {
    if (!(lr > 0.0)) {
        throw std::invalid_argument("config: lr must be positive");
    }
    if (!(lr_decay > 0.0 && lr_decay <= 1.0) || lr_decay_steps < 1) {
        throw std::invalid_argument("config: lr_decay must be in (0,1] and lr_decay_steps positive");
    }
    if (rays_per_batch < 1) {
        throw std::invalid_argument("config: rays_per_batch must be at least 1");
    }
    if (!(prune_gamma > 0.0 && prune_gamma < 1.0)) {
        throw std::invalid_argument("config: prune_gamma must be in (0,1)");
    }
    if (prune_samples_per_axis < 1 || subdivide_stride < 1 || neighbors < 1 || window < 1 || samples_per_voxel < 1) {
        throw std::invalid_argument("config: counts and strides must be positive");
    }
    if (!(max_depth > 0.0) || iterations < 0 || prune_warmup < 0) {
        throw std::invalid_argument("config: max_depth must be positive and iteration counts non-negative");
    }
}

void to_json(json &j, const TrainConfig &c) {
    j = json{{"stage", to_string(c.stage)},
             {"lr", c.lr},
             {"lr_decay", c.lr_decay},
             {"lr_decay_steps", c.lr_decay_steps},
             {"rays_per_batch", c.rays_per_batch},
             {"iterations", c.iterations},
             {"prune_gamma", c.prune_gamma},
             {"prune_samples_per_axis", c.prune_samples_per_axis},
             {"subdivide_stride", c.subdivide_stride},
             {"prune_warmup", c.prune_warmup},
             {"seed", c.seed},
             {"neighbors", c.neighbors},
             {"neighbor_mode", c.neighbor_mode == NeighborMode::temporal ? "temporal" : "spatial"},
             {"spatial_lambda", c.spatial_lambda},
             {"window", c.window},
             {"warm_start", c.warm_start},
             {"samples_per_voxel", c.samples_per_voxel},
             {"max_depth", c.max_depth},
             {"precision", to_string(c.precision)}};
}

void from_json(const json &j, TrainConfig &c) {
    TrainConfig d;
    c.stage = parse_stage(j.value("stage", to_string(d.stage)));
    c.lr = j.value("lr", d.lr);
    c.lr_decay = j.value("lr_decay", d.lr_decay);
    c.lr_decay_steps = j.value("lr_decay_steps", d.lr_decay_steps);
    c.rays_per_batch = j.value("rays_per_batch", d.rays_per_batch);
    c.iterations = j.value("iterations", d.iterations);
    c.prune_gamma = j.value("prune_gamma", d.prune_gamma);
    c.prune_samples_per_axis = j.value("prune_samples_per_axis", d.prune_samples_per_axis);
    c.subdivide_stride = j.value("subdivide_stride", d.subdivide_stride);
    c.prune_warmup = j.value("prune_warmup", d.prune_warmup);
    c.seed = j.value("seed", d.seed);
    c.neighbors = j.value("neighbors", d.neighbors);
    const std::string mode = j.value("neighbor_mode", std::string("temporal"));
    if (mode != "temporal" && mode != "spatial") {
        throw std::invalid_argument("config: neighbor_mode must be temporal or spatial");
    }
    c.neighbor_mode = mode == "temporal" ? NeighborMode::temporal : NeighborMode::spatial;
    c.spatial_lambda = j.value("spatial_lambda", d.spatial_lambda);
    c.window = j.value("window", d.window);
    c.warm_start = j.value("warm_start", d.warm_start);
    c.samples_per_voxel = j.value("samples_per_voxel", d.samples_per_voxel);
    c.max_depth = j.value("max_depth", d.max_depth);
    c.precision = parse_precision(j.value("precision", to_string(d.precision)));
}

bool Checkpoint::operator==(const Checkpoint &o) const {
    if (!(model == o.model && config == o.config && params == o.params && adam == o.adam && rng == o.rng)) {
        return false;
    }
    if (grid.has_value() != o.grid.has_value()) {
        return false;
    }
    if (!grid) {
        return true;
    }
    return grid->index->lattice() == o.grid->index->lattice() && grid->index->coords() == o.grid->index->coords() &&
           grid->features == o.grid->features;
}

Checkpoint init_checkpoint(const ModelConfig &model, const TrainConfig &config) {
    model.validate();
    config.validate();
    Checkpoint c;
    c.model = model;
    c.config = config;
    c.params = init_model(model, config.seed);
    c.adam.lr = config.lr;
    c.rng.seed(config.seed ^ 0x5eed5eed5eed5eedULL);
    return c;
}

Var loss_local(Var rendered, const Tensor &target) {
    if (rendered.rows() != target.rows || rendered.cols() != 3 || target.cols != 3) {
        throw std::invalid_argument("loss_local: expected matching rays x 3 batches, got " +
                                    rendered.value().shape_string() + " and " + target.shape_string());
    }
    return ops::mse(rendered, target);
}

Var loss_fuse(std::span<const FrameRenders> frames) {
    if (frames.empty()) {
        throw std::invalid_argument("loss_fuse: no frames");
    }
    Var total;
    for (const FrameRenders &f : frames) {
        if (f.local.rows() != f.global.rows()) {
            throw std::invalid_argument("loss_fuse: local and global batches are misaligned");
        }
        Var term = ops::add(loss_local(f.local, f.target), loss_local(f.global, f.target));
        total = total.valid() ? ops::add(total, term) : term;
    }
    return total;
}

RenderConfig render_config(const SceneDataset &scene, const TrainConfig &config) {
    RenderConfig rc;
    rc.near = scene.near;
    rc.far = scene.far;
    rc.background = scene.background;
    rc.sampling.per_voxel = config.samples_per_voxel;
    rc.sampling.jitter = false;
    return rc;
}

SequenceConfig sequence_config(const TrainConfig &config, bool prune) {
    SequenceConfig s;
    s.frustum.max_depth = config.max_depth;
    s.neighbors.count = config.neighbors;
    s.neighbors.mode = config.neighbor_mode;
    s.neighbors.spatial_lambda = config.spatial_lambda;
    s.prune.enabled = prune;
    s.prune.gamma = config.prune_gamma;
    s.prune.samples_per_axis = config.prune_samples_per_axis;
    return s;
}

namespace {

SequenceConfig scene_sequence_config(const SceneDataset &scene, const TrainConfig &config, bool prune) {
    SequenceConfig s = sequence_config(config, prune);
    s.frustum.bounds = scene.bounds;
    return s;
}

struct RayBatch {
    std::vector<Ray> rays;
    Tensor target;
};

RayBatch sample_ray_batch(const SceneDataset &scene, const std::vector<int> &frames, int n, Rng &rng) {
    RayBatch b;
    b.target = Tensor(n, 3);
    std::uniform_int_distribution<std::size_t> pick_frame(0, frames.size() - 1);
    for (int i = 0; i < n; ++i) {
        const CameraView &v = scene.views[static_cast<std::size_t>(frames[pick_frame(rng)])];
        std::uniform_int_distribution<int> pick_pixel(0, v.image.width * v.image.height - 1);
        const int p = pick_pixel(rng);
        const int x = p % v.image.width;
        const int y = p / v.image.width;
        b.rays.push_back(ray_for_pixel(v, Vec2(x + 0.5, y + 0.5)));
        for (int c = 0; c < 3; ++c) {
            b.target(i, c) = v.image.at(x, y, c);
        }
    }
    return b;
}

std::vector<int> neighbor_positions(const std::vector<CameraView> &keys, int t, const NeighborConfig &cfg) {
    std::vector<CameraPose> poses;
    for (const CameraView &v : keys) {
        poses.push_back(v.pose);
    }
    NeighborConfig c = cfg;
    c.count = std::min<int>(cfg.count, static_cast<int>(keys.size()));
    return select_neighbor_views(t, poses, c);
}

/// Training frames whose index lies within the neighborhood's span.
std::vector<int> supervision_frames(const SceneDataset &scene, const std::vector<CameraView> &keys,
                                    const std::vector<int> &neighbors) {
    int lo = keys[static_cast<std::size_t>(neighbors.front())].frame_index;
    int hi = lo;
    for (int p : neighbors) {
        lo = std::min(lo, keys[static_cast<std::size_t>(p)].frame_index);
        hi = std::max(hi, keys[static_cast<std::size_t>(p)].frame_index);
    }
    std::vector<int> out;
    for (int f : scene.train) {
        if (scene.views[static_cast<std::size_t>(f)].frame_index >= lo &&
            scene.views[static_cast<std::size_t>(f)].frame_index <= hi) {
            out.push_back(f);
        }
    }
    return out;
}

void enter_stage(Checkpoint &ckpt, Stage stage) {
    ckpt.config.validate();
    if (ckpt.config.stage != stage) {
        ckpt.adam = AdamState{};
        ckpt.config.stage = stage;
    }
}

double scheduled_lr(const TrainConfig &c, std::int64_t step) {
    return c.lr * std::pow(c.lr_decay, static_cast<double>(step) / c.lr_decay_steps);
}

void optimizer_step(Checkpoint &ckpt, double loss, const Gradients &grads, std::span<const ExternalParam> external = {}) {
    if (!std::isfinite(loss)) {
        throw TrainingDiverged(to_string(ckpt.config.stage) + " step " + std::to_string(ckpt.adam.step + 1) +
                               ": loss is " + std::to_string(loss));
    }
    ckpt.adam.lr = scheduled_lr(ckpt.config, ckpt.adam.step);
    try {
        adam_step(ckpt.adam, ckpt.params, grads, external);
    } catch (const std::runtime_error &e) {
        throw TrainingDiverged(to_string(ckpt.config.stage) + " step " + std::to_string(ckpt.adam.step + 1) + ": " +
                               e.what());
    }
}

std::vector<int> key_views_check(const SceneDataset &scene, int needed) {
    std::vector<int> keys = scene.key_frames();
    if (static_cast<int>(keys.size()) < needed) {
        throw std::invalid_argument("training needs at least " + std::to_string(needed) + " key frames, scene has " +
                                    std::to_string(keys.size()));
    }
    return keys;
}

} // namespace

void train_stage_local(const SceneDataset &scene, Checkpoint &ckpt, int iterations, const TrainObserver &observer) {
    enter_stage(ckpt, Stage::local);
    const TrainConfig &cfg = ckpt.config;
    const std::vector<CameraView> keys = scene.select(key_views_check(scene, cfg.neighbors));
    const SequenceConfig seq = scene_sequence_config(scene, cfg, false);
    RenderConfig rc = render_config(scene, cfg);
    rc.sampling.jitter = true;
    const Lattice lattice = scene.lattice();
    std::uniform_int_distribution<int> pick_key(0, static_cast<int>(keys.size()) - 1);

    for (int it = 0; it < iterations; ++it) {
        const int t = pick_key(ckpt.rng);
        const std::vector<int> nb = neighbor_positions(keys, t, seq.neighbors);
        std::vector<CameraView> views;
        for (int p : nb) {
            views.push_back(keys[static_cast<std::size_t>(p)]);
        }
        Tape tape(cfg.precision);
        tape.bind(ckpt.params);
        const GridVar local = build_local_volume(tape, ckpt.model, views, lattice, seq.frustum);
        RayBatch batch = sample_ray_batch(scene, supervision_frames(scene, keys, nb), cfg.rays_per_batch, ckpt.rng);
        Var out = render_rays(tape, ckpt.model, local, batch.rays, rc, &ckpt.rng);
        Var loss = loss_local(ops::slice_cols(out, 0, 3), batch.target);
        tape.backward(loss);
        const double lv = loss.value().data[0];
        optimizer_step(ckpt, lv, tape.parameter_gradients());
        if (observer) {
            observer({Stage::local, ckpt.adam.step, lv, ckpt.adam.lr, local.size()});
        }
    }
}

void train_stage_end2end(const SceneDataset &scene, Checkpoint &ckpt, int iterations, const TrainObserver &observer) {
    enter_stage(ckpt, Stage::end2end);
    const TrainConfig &cfg = ckpt.config;
    const std::vector<CameraView> keys = scene.select(key_views_check(scene, 1));
    const int nk = static_cast<int>(keys.size());
    const int window = std::min(cfg.window, nk);
    RenderConfig rc = render_config(scene, cfg);
    rc.sampling.jitter = true;
    const Lattice lattice = scene.lattice();
    std::uniform_int_distribution<int> pick_start(0, nk - window);
    const int rays_per_frame = std::max(1, cfg.rays_per_batch / window);

    for (int it = 0; it < iterations; ++it) {
        const bool prune = ckpt.adam.step >= cfg.prune_warmup;
        const SequenceConfig seq = scene_sequence_config(scene, cfg, prune);
        const int start = pick_start(ckpt.rng);
        FusionState state;
        state.global = SparseVoxelGrid(GridSpec{lattice, ckpt.model.channels});
        if (cfg.warm_start && start > 0) {
            state = fuse_sequence(keys, ckpt.params, ckpt.model, lattice, seq, std::move(state), {}, cfg.precision, 0,
                                  start);
        }
        Tape tape(cfg.precision);
        tape.bind(ckpt.params);
        GridVar global = constant_grid(tape, state.global);
        std::vector<FrameRenders> renders;
        for (int p = start; p < start + window; ++p) {
            const std::vector<int> nb = neighbor_positions(keys, p, seq.neighbors);
            std::vector<CameraView> views;
            for (int q : nb) {
                views.push_back(keys[static_cast<std::size_t>(q)]);
            }
            const GridVar local = build_local_volume(tape, ckpt.model, views, lattice, seq.frustum);
            global = fuse_step(tape, ckpt.model, global, local);
            if (prune && global.size() > 0) {
                const DensityProbe probe = make_density_probe(detach(global), ckpt.params, ckpt.model, cfg.precision);
                global = prune_grid(global, probe, cfg.prune_gamma, cfg.prune_samples_per_axis);
            }
            RayBatch batch = sample_ray_batch(scene, supervision_frames(scene, keys, nb), rays_per_frame, ckpt.rng);
            Var out_local = render_rays(tape, ckpt.model, local, batch.rays, rc, &ckpt.rng);
            Var out_global = render_rays(tape, ckpt.model, global, batch.rays, rc, &ckpt.rng);
            renders.push_back({ops::slice_cols(out_local, 0, 3), ops::slice_cols(out_global, 0, 3), batch.target});
        }
        Var loss = loss_fuse(renders);
        tape.backward(loss);
        const double lv = loss.value().data[0];
        optimizer_step(ckpt, lv, tape.parameter_gradients());
        if (observer) {
            observer({Stage::end2end, ckpt.adam.step, lv, ckpt.adam.lr, global.size()});
        }
    }
}

namespace {

/// Reorders or expands the optimizer moments of the grid after a topology change.
void remap_moments(AdamState &adam, const std::vector<int> &source_rows) {
    for (auto *moments : {&adam.first_moment, &adam.second_moment}) {
        auto it = moments->find("grid");
        if (it == moments->end()) {
            continue;
        }
        const Tensor old = it->second;
        Tensor next(static_cast<int>(source_rows.size()), old.cols);
        for (std::size_t i = 0; i < source_rows.size(); ++i) {
            auto src = old.row(source_rows[i]);
            std::copy(src.begin(), src.end(), next.row(static_cast<int>(i)).begin());
        }
        it->second = std::move(next);
    }
}

} // namespace

void finetune(const SceneDataset &scene, Checkpoint &ckpt, int iterations, const TrainObserver &observer) {
    if (!ckpt.grid) {
        throw std::invalid_argument("finetune: the checkpoint holds no reconstructed grid");
    }
    enter_stage(ckpt, Stage::finetune);
    const TrainConfig &cfg = ckpt.config;
    if (scene.train.empty()) {
        throw std::invalid_argument("finetune: the scene has no training frames");
    }
    RenderConfig rc = render_config(scene, cfg);
    rc.sampling.jitter = true;
    SparseVoxelGrid &grid = *ckpt.grid;

    for (int it = 0; it < iterations; ++it) {
        Tape tape(cfg.precision);
        tape.bind(ckpt.params, reconstruction_prefixes());
        const GridVar g = variable_grid(tape, grid);
        RayBatch batch = sample_ray_batch(scene, scene.train, cfg.rays_per_batch, ckpt.rng);
        Var out = render_rays(tape, ckpt.model, g, batch.rays, rc, &ckpt.rng);
        Var loss = loss_local(ops::slice_cols(out, 0, 3), batch.target);
        tape.backward(loss);
        const Tensor *gg = tape.grad(g.features);
        const Tensor zeros(grid.features.rows, grid.features.cols);
        const ExternalParam ext{"grid", &grid.features, gg ? gg : &zeros};
        const double lv = loss.value().data[0];
        optimizer_step(ckpt, lv, tape.parameter_gradients(), {&ext, 1});

        if (ckpt.adam.step % cfg.subdivide_stride == 0 && grid.size() > 0) {
            const DensityProbe probe = make_density_probe(grid, ckpt.params, ckpt.model, cfg.precision);
            PruneResult pr = prune(grid, probe, cfg.prune_gamma, cfg.prune_samples_per_axis);
            remap_moments(ckpt.adam, pr.kept_rows);
            std::vector<int> child_parent;
            grid = subdivide(pr.grid, &child_parent);
            remap_moments(ckpt.adam, child_parent);
        }
        if (observer) {
            observer({Stage::finetune, ckpt.adam.step, lv, ckpt.adam.lr, grid.size()});
        }
    }
}

FusionState reconstruct_scene(const SceneDataset &scene, const Checkpoint &ckpt, bool prune,
                              const FusionObserver &observer) {
    const std::vector<CameraView> keys = scene.select(key_views_check(scene, 1));
    return fuse_sequence(keys, ckpt.params, ckpt.model, scene.lattice(), scene_sequence_config(scene, ckpt.config, prune),
                         {}, observer, ckpt.config.precision);
}

SparseVoxelGrid reconstruct_local(const SceneDataset &scene, const Checkpoint &ckpt, int key_position) {
    const std::vector<CameraView> keys = scene.select(key_views_check(scene, 1));
    const SequenceConfig seq = scene_sequence_config(scene, ckpt.config, false);
    std::vector<CameraView> views;
    for (int p : neighbor_positions(keys, key_position, seq.neighbors)) {
        views.push_back(keys[static_cast<std::size_t>(p)]);
    }
    Tape tape(ckpt.config.precision);
    tape.bind(ckpt.params, {""});
    return detach(build_local_volume(tape, ckpt.model, views, scene.lattice(), seq.frustum));
}

std::vector<ViewScore> evaluate_views(const SceneDataset &scene, const std::vector<int> &positions,
                                      const SparseVoxelGrid &grid, const Checkpoint &ckpt) {
    std::vector<ViewScore> out;
    const RenderConfig rc = render_config(scene, ckpt.config);
    for (int p : positions) {
        const CameraView &v = scene.views.at(static_cast<std::size_t>(p));
        const RenderedImage r =
            render_image(v.intrinsics, v.pose, grid, ckpt.params, ckpt.model, rc, ckpt.config.precision);
        out.push_back({v.frame_index, psnr(r.image, v.image), ssim(r.image, v.image)});
    }
    return out;
}

double mean_psnr(const std::vector<ViewScore> &scores) {
    if (scores.empty()) {
        throw std::invalid_argument("mean_psnr: no scores");
    }
    double s = 0.0;
    for (const ViewScore &v : scores) {
        s += v.psnr;
    }
    return s / static_cast<double>(scores.size());
}

} // namespace voxfuse
