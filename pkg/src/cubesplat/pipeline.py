"""End-to-end self-supervised training step and loop.

One step runs mask -> normalize -> encode -> scatter -> densify -> decode ->
prune -> render M sampled views -> losses -> AdamW update. The mask and the
view subset are resampled every step from seeds derived from (config seed,
step index), so training is stateless: resuming from a checkpoint at step k
reproduces an uninterrupted run bit-exactly.

Because each step normalizes the masked cloud, cameras are mapped into the
normalized frame with the step's own similarity transform and target depths
are scaled by its scale factor; color and feature targets are similarity
invariant.

Evaluation (and the similarity probe) run on the full unmasked cloud:
masking is a training-time corruption, not part of the learned renderer.
"""

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import tape as tp
from .errors import DegenerateInputError, InvalidInputError, PipelineStageError
from .fileio import SceneSample, View, checkpoint_save  # noqa: F401 (re-exported)
from .geometry import similarity_apply_camera
from .losses import (LossReport, LossWeights, cosine_alignment, loss_dep,
                     loss_img, loss_sem, loss_total)
from .nets import (EncoderParams, anchor_arrays, decode_gaussians, densify,
                   encode_points, init_model, project_features, scatter_mean_op)
from .optim import OptimizerState, adamw_step, init_state, lr_at
from .splatter import RenderOutput, TileConfig, psnr, rasterize_nodes
from .tape import Tape
from .voxelizer import (DenseVolume, GridSpec, MaskConfig, mask_points,
                        normalize_to_cuboid, voxel_index)


@dataclass
class TrainConfig:
    """Training hyperparameters. Defaults follow the pre-training recipe:
    AdamW at lr 0.002 with betas (0.9, 0.95) and weight decay 0.05, cosine
    schedule with linear warmup, 50% random masking, opacity threshold 0.3,
    and 5 rendering views per step."""

    epochs: int = 1
    lr: float = 0.002
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.05
    warmup_frac: float = 0.05
    mask_ratio: float = 0.5
    tau: float = 0.3
    views_per_step: int = 5
    grid: GridSpec = field(default_factory=lambda: GridSpec(16, 16, 16))
    offset_cap: Optional[float] = None  # None: one voxel edge
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    dims: EncoderParams = field(default_factory=EncoderParams)
    tile: int = 16
    alpha_cutoff: float = 1.0 / 255.0
    t_floor: float = 1e-4
    checkpoint_every: int = 0  # epochs; 0 = final checkpoint only
    log_every: int = 1

    def __post_init__(self):
        if self.lr < 0:
            raise InvalidInputError("learning rate must be nonnegative")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise InvalidInputError("mask ratio must lie in [0, 1)")
        if self.views_per_step < 1:
            raise InvalidInputError("need at least one rendering view per step")

    def tile_config(self):
        return TileConfig(tile=self.tile, alpha_cutoff=self.alpha_cutoff,
                          t_floor=self.t_floor)


def config_from_dict(values):
    """Build a TrainConfig from parsed key=value config entries."""
    from .fileio import parse_grid

    cfg = TrainConfig()
    dims = cfg.dims
    dim_fields = {}
    for key in ("d_s", "d_o", "d_f", "d_star", "enc_hidden", "head_hidden", "proj_hidden"):
        if key in values:
            dim_fields[key] = values[key]
    if dim_fields:
        dims = replace(dims, **dim_fields)
    wts = LossWeights(img=values.get("lambda_img", 1.0),
                      dep=values.get("lambda_dep", 1.0),
                      sem=values.get("lambda_sem", 1.0))
    cap = values.get("offset_cap")
    return replace(
        cfg,
        epochs=values.get("epochs", cfg.epochs),
        lr=values.get("lr", cfg.lr),
        betas=(values.get("beta1", cfg.betas[0]), values.get("beta2", cfg.betas[1])),
        weight_decay=values.get("weight_decay", cfg.weight_decay),
        warmup_frac=values.get("warmup_frac", cfg.warmup_frac),
        mask_ratio=values.get("mask_ratio", cfg.mask_ratio),
        tau=values.get("tau", cfg.tau),
        views_per_step=values.get("views_per_step", cfg.views_per_step),
        grid=parse_grid(values["grid"]) if "grid" in values else cfg.grid,
        offset_cap=None if cap is None or cap <= 0 else cap,
        weights=wts,
        seed=values.get("seed", cfg.seed),
        dims=dims,
        tile=values.get("tile", cfg.tile),
        alpha_cutoff=values.get("alpha_cutoff", cfg.alpha_cutoff),
        t_floor=values.get("t_floor", cfg.t_floor),
        checkpoint_every=values.get("checkpoint_every", cfg.checkpoint_every),
        log_every=values.get("log_every", cfg.log_every),
    )


def derive_seed(base, step, stream):
    """Stable per-step seed stream."""
    return int(np.random.SeedSequence((base, step, stream)).generate_state(1)[0])


def sample_views(scene, m, seed):
    """Uniform view subset without replacement; deterministic per seed."""
    n = len(scene.views)
    if m > n:
        raise InvalidInputError(f"scene has {n} views, requested {m}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    idx = rng.choice(n, size=m, replace=False)
    return [scene.views[i] for i in idx], idx


def mock_feature_targets(semantic_ids, d_star):
    """One-hot embeddings of a semantic-id image, 3x3 box smoothed and
    L2-normalized per pixel. Background (-1) pixels stay zero vectors."""
    ids = np.asarray(semantic_ids, dtype=np.int64)
    if ids.size and ids.max() >= d_star:
        raise InvalidInputError(f"semantic id {ids.max()} exceeds d_star={d_star}")
    h, w = ids.shape
    onehot = np.zeros((h, w, d_star))
    yy, xx = np.nonzero(ids >= 0)
    onehot[yy, xx, ids[yy, xx]] = 1.0
    padded = np.pad(onehot, ((1, 1), (1, 1), (0, 0)))
    smooth = np.zeros_like(onehot)
    for dy in range(3):
        for dx in range(3):
            smooth += padded[dy : dy + h, dx : dx + w]
    smooth /= 9.0
    norms = np.linalg.norm(smooth, axis=2, keepdims=True)
    return np.divide(smooth, norms, out=np.zeros_like(smooth), where=norms > 0)


def feature_target_for(view, d_star):
    """Precomputed feature map when present, otherwise the mock-model target."""
    if view.feat_target is not None:
        if view.feat_target.shape[2] != d_star:
            raise InvalidInputError(
                f"feature target width {view.feat_target.shape[2]} != d_star {d_star}")
        return np.asarray(view.feat_target, dtype=np.float64)
    if view.semantic_ids is None:
        raise InvalidInputError("view has neither a feature target nor semantic ids")
    return mock_feature_targets(view.semantic_ids, d_star)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (InvalidInputError, DegenerateInputError) as exc:
        raise PipelineStageError(f"stage {name}: {exc}") from exc


def forward_scene(model, cloud_normalized, grid, tape):
    """encode -> scatter -> densify -> decode on an already-normalized cloud."""
    feats = _stage("encode", encode_points, model.encoder, cloud_normalized, grid, tape)
    ids = voxel_index(cloud_normalized.coords, grid)
    counts = np.bincount(ids, minlength=grid.ncells)
    pooled = _stage("scatter", scatter_mean_op, feats, ids, grid.ncells, counts, tape)
    vol_node = tp.transpose(
        tp.reshape(pooled, (grid.z, grid.y, grid.x, -1)), (2, 1, 0, 3))
    occupied = (counts > 0).reshape(grid.z, grid.y, grid.x).transpose(2, 1, 0)
    volume = DenseVolume(grid=grid, dim=vol_node.value.shape[-1],
                         data=vol_node.value, occupied=occupied)
    dense_vol, dense_node = _stage("densify", densify, model.dense, volume, tape,
                                   data=vol_node)
    anchor_ids, centers, anchor_feats = anchor_arrays(dense_vol, dense_node)
    voxel_edge = float(grid.edges.min())
    return _stage("decode", decode_gaussians, model.decoder, (centers, anchor_feats),
                  voxel_edge, tape, anchor_ids=anchor_ids)


@dataclass
class ForwardResult:
    tape: Tape
    total: object  # scalar node
    l_img: object
    l_dep: object
    l_sem: object
    renders: list
    view_indices: np.ndarray
    valid_pixel_count: int
    step_psnr: float


def forward_loss(model, scene, cfg, step):
    """Full forward chain for one step: losses on the tape, no update."""
    mask_cfg = MaskConfig(cfg.mask_ratio, derive_seed(cfg.seed, step, 0))
    masked = _stage("mask", mask_points, scene.cloud, mask_cfg)
    normed, sim = _stage("normalize", normalize_to_cuboid, masked)
    tape = Tape()
    dec = forward_scene(model, normed, cfg.grid, tape)
    views, view_idx = _stage("sample_views", sample_views, scene, cfg.views_per_step,
                             derive_seed(cfg.seed, step, 1))
    tile_cfg = cfg.tile_config()

    color_nodes, depth_nodes, lift_nodes = [], [], []
    tgt_color, tgt_depth, tgt_valid, tgt_feat = [], [], [], []
    renders = []
    for view in views:
        cam = similarity_apply_camera(sim, view.camera)
        nodes = _stage("rasterize", rasterize_nodes, tape, cam, tile_cfg,
                       dec.means, dec.quats, dec.scales, dec.colors,
                       dec.opacities, dec.features)
        lifted = _stage("project_features", project_features, model.proj,
                        nodes.feature, tape)
        color_nodes.append(nodes.color)
        depth_nodes.append(nodes.depth)
        lift_nodes.append(lifted)
        renders.append(RenderOutput(color=nodes.color.value, depth=nodes.depth.value,
                                    feature=nodes.feature.value,
                                    transmittance=nodes.transmittance.value))
        tgt_color.append(view.color)
        tgt_depth.append(view.depth * sim.s)
        tgt_valid.append(view.validity)
        tgt_feat.append(feature_target_for(view, model.dims.d_star))

    c_stack = tp.stack(color_nodes)
    d_stack = tp.stack(depth_nodes)
    f_stack = tp.stack(lift_nodes)
    tc = np.stack(tgt_color)
    tv = np.stack(tgt_valid)
    l_img = _stage("loss_img", loss_img, c_stack, tc, tape)
    l_dep = _stage("loss_dep", loss_dep, d_stack, np.stack(tgt_depth), tv, tape)
    l_sem = _stage("loss_sem", loss_sem, f_stack, np.stack(tgt_feat), tape)
    total = loss_total(l_img, l_dep, l_sem, cfg.weights)
    return ForwardResult(tape=tape, total=total, l_img=l_img, l_dep=l_dep,
                         l_sem=l_sem, renders=renders, view_indices=view_idx,
                         valid_pixel_count=int(tv.sum()),
                         step_psnr=psnr(c_stack.value, tc))


def train_step(model, state, scene, cfg, step, total_steps):
    """One optimizer step on one scene.

    Returns (LossReport, list of RenderOutput, sampled view indices).
    """
    fw = forward_loss(model, scene, cfg, step)
    fw.tape.backward(fw.total)

    flat = model.flatten()
    grads = {name: fw.tape.grad_of(arr) for name, arr in flat.items()}
    lr = lr_at(step, total_steps, cfg.lr, cfg.warmup_frac)
    adamw_step(flat, grads, state, lr, cfg.betas, cfg.weight_decay)

    report = LossReport(l_img=float(fw.l_img.value), l_dep=float(fw.l_dep.value),
                        l_sem=float(fw.l_sem.value), total=float(fw.total.value),
                        valid_pixel_count=fw.valid_pixel_count,
                        step_psnr=fw.step_psnr)
    if not math.isfinite(report.total):
        raise PipelineStageError(f"stage loss: non-finite total loss at step {step}")
    return report, fw.renders, fw.view_indices


@dataclass
class EpochRecord:
    epoch: int
    l_img: float
    l_dep: float
    l_sem: float
    total: float
    psnr: float


def fit(scenes, cfg, out_dir=None, model=None, state=None, start_epoch=0,
        step_callback=None):
    """Epoch loop over scenes (one scene per step, batch size 1).

    Returns (model, state, per-epoch records). Checkpoints land in
    ``out_dir`` every ``cfg.checkpoint_every`` epochs plus a final
    ``checkpoint_final.gxck``.
    """
    scenes = list(scenes)
    if not scenes:
        raise InvalidInputError("scene list must be non-empty")
    if model is None:
        from .nets import softplus_inv

        model = init_model(cfg.dims, cfg.seed, prune_threshold=cfg.tau,
                           offset_cap=cfg.offset_cap,
                           scale_bias=softplus_inv(float(cfg.grid.edges.min())))
    if state is None:
        state = init_state(model.flatten())
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    total_steps = cfg.epochs * len(scenes)
    records = []
    step = start_epoch * len(scenes)
    for epoch in range(start_epoch, cfg.epochs):
        acc = np.zeros(4)
        psnr_acc = []
        for scene in scenes:
            report, _, _ = train_step(model, state, scene, cfg, step, total_steps)
            if step_callback is not None:
                step_callback(step, report)
            acc += (report.l_img, report.l_dep, report.l_sem, report.total)
            psnr_acc.append(report.step_psnr)
            step += 1
        mean = acc / len(scenes)
        records.append(EpochRecord(epoch=epoch, l_img=mean[0], l_dep=mean[1],
                                   l_sem=mean[2], total=mean[3],
                                   psnr=float(np.mean(psnr_acc))))
        if out_dir is not None and cfg.checkpoint_every > 0 \
                and (epoch + 1) % cfg.checkpoint_every == 0:
            checkpoint_save(model, state, out_dir / f"checkpoint_{epoch + 1:06d}.gxck",
                            grid=cfg.grid)
    if out_dir is not None:
        checkpoint_save(model, state, out_dir / "checkpoint_final.gxck", grid=cfg.grid)
    return model, state, records


def write_metrics_csv(path, rows):
    """CSV log: step, l_img, l_dep, l_sem, total, psnr."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "l_img", "l_dep", "l_sem", "total", "psnr"])
        for row in rows:
            writer.writerow(row)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class ViewMetrics:
    view: int
    psnr: float
    depth_mae: float
    cosine: float


def render_views(model, scene, cfg, view_indices=None):
    """Forward the full (unmasked) cloud and render the requested views.

    Returns (renders, lifted maps, similarity transform, decoded gaussians).
    """
    normed, sim = normalize_to_cuboid(scene.cloud)
    tape = Tape()
    dec = forward_scene(model, normed, cfg.grid, tape)
    tile_cfg = cfg.tile_config()
    indices = range(len(scene.views)) if view_indices is None else view_indices
    renders, lifted_maps = [], []
    for k in indices:
        cam = similarity_apply_camera(sim, scene.views[k].camera)
        nodes = rasterize_nodes(tape, cam, tile_cfg, dec.means, dec.quats,
                                dec.scales, dec.colors, dec.opacities, dec.features)
        lifted = project_features(model.proj, nodes.feature, tape)
        renders.append(RenderOutput(color=nodes.color.value, depth=nodes.depth.value,
                                    feature=nodes.feature.value,
                                    transmittance=nodes.transmittance.value))
        lifted_maps.append(lifted.value)
    return renders, lifted_maps, sim, dec


def evaluate_scene(model, scene, cfg):
    """Per-view PSNR (8-bit quantized, matching stored targets), depth MAE on
    valid pixels in normalized units, and mean cosine alignment on pixels
    with a nonzero feature target."""
    from .fileio import quantize_u8

    renders, lifted_maps, sim, _ = render_views(model, scene, cfg)
    rows = []
    for k, (view, out, lifted) in enumerate(zip(scene.views, renders, lifted_maps)):
        color_q = quantize_u8(np.clip(out.color, 0.0, 1.0)) / 255.0
        p = psnr(color_q, view.color)
        valid = view.validity
        target_depth = view.depth * sim.s
        mae = float(np.abs(out.depth - target_depth)[valid].mean()) if valid.any() else 0.0
        target_feat = feature_target_for(view, model.dims.d_star)
        cos = cosine_alignment(lifted, target_feat)
        rows.append(ViewMetrics(view=k, psnr=p, depth_mae=mae, cosine=cos))
    return rows


def evaluate_gt_scene(gaussians, gt_ids, scene):
    """Self-evaluation of ground-truth Gaussians against their own targets.

    Re-renders color/depth/id-map exactly as the synthetic generator did and
    compares after the same on-disk quantization, so a faithful store scores
    PSNR inf, depth MAE 0, and cosine 1.
    """
    from .fileio import quantize_u8
    from .splatter import brute_force_render
    from .geometry import GaussianPrimitive

    onehot = np.eye(len(gaussians))
    tagged = [GaussianPrimitive(mean=g.mean, quat=g.quat, scale=g.scale, color=g.color,
                                opacity=g.opacity, feature=onehot[k])
              for k, g in enumerate(gaussians)]
    cfg = TileConfig(background=np.zeros(3))
    rows = []
    for k, view in enumerate(scene.views):
        out = brute_force_render(tagged, view.camera, cfg)
        color_q = quantize_u8(np.clip(out.color, 0.0, 1.0)) / 255.0
        p = psnr(color_q, view.color)
        valid = out.transmittance < 0.5
        depth_f32 = np.asarray(out.depth, dtype=np.float32).astype(np.float64)
        mae = float(np.abs(depth_f32 - view.depth)[view.validity].mean()) \
            if view.validity.any() else 0.0
        idmap = np.where(valid, gt_ids[np.argmax(out.feature, axis=2)], -1)
        d_star = max(int(gt_ids.max()) + 1, 1)
        lifted = mock_feature_targets(idmap, d_star)
        target = mock_feature_targets(view.semantic_ids, d_star) \
            if view.semantic_ids is not None else view.feat_target
        cos = cosine_alignment(lifted, target)
        rows.append(ViewMetrics(view=k, psnr=p, depth_mae=mae, cosine=cos))
    return rows


def similarity_probe(model, scene, query_index, cfg):
    """Cosine similarity between the query point's decoded feature-field
    embedding and every other point's, in [-1, 1].

    Points inherit the feature of their voxel's anchor; points whose voxel
    was pruned fall back to the nearest retained anchor center.
    """
    n = len(scene.cloud)
    if not 0 <= query_index < n:
        raise InvalidInputError(f"query index {query_index} out of range [0, {n})")
    normed, _ = normalize_to_cuboid(scene.cloud)
    tape = Tape()
    dec = forward_scene(model, normed, cfg.grid, tape)
    if len(dec) == 0:
        raise DegenerateInputError("no anchors survive opacity pruning")
    grid = cfg.grid
    lookup = np.full(grid.ncells, -1, dtype=np.int64)
    lookup[dec.anchor_ids] = np.arange(len(dec))
    point_ids = voxel_index(normed.coords, grid)
    anchor_of = lookup[point_ids]
    missing = np.flatnonzero(anchor_of < 0)
    if missing.size:
        from .voxelizer import cell_centers_for_ids

        kept_centers = cell_centers_for_ids(grid, dec.anchor_ids)
        for i in missing:
            d2 = np.sum(np.square(kept_centers - normed.coords[i]), axis=1)
            anchor_of[i] = int(np.argmin(d2))
    feats = dec.features.value
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    unit = np.divide(feats, norms, out=np.zeros_like(feats), where=norms > 0)
    scores = unit[anchor_of] @ unit[anchor_of[query_index]]
    return np.clip(scores, -1.0, 1.0)
