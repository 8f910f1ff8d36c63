"""Finite-difference verification of every analytic gradient path.

Each component builds a deterministic fixture, evaluates a scalar objective
through the tape, and compares reverse-mode gradients against central finite
differences (step 1e-4, double precision). Errors are reported as a scaled
elementwise relative error: |a - n| / max(|a|, |n|, floor) with a floor tied
to the component's gradient magnitude, so near-zero coordinates do not
produce spurious blowups while significant coordinates are checked tightly.

Per-module suites must pass at 1e-4; the composite
encode->densify->decode->rasterize->loss chain at 1e-3 (conditioning along
the full pipeline is worse). ``size="full"`` checks every coordinate of
every tensor; ``size="small"`` checks a seeded subset.

Setting the environment variable ``CUBESPLAT_GRADCHECK_PERTURB`` corrupts
one analytic gradient on purpose; the harness must then fail (detector test
hook).
"""

from dataclasses import dataclass

import numpy as np

from . import tape as tp
from .fileio import SynthSpec, synth_scene
from .geometry import Camera
from .losses import LossWeights, loss_dep, loss_img, loss_sem
from .nets import (DecoderSet, DenseStageParams, EncoderParams, Mlp,
                   PointEncoderParams, conv3d_op, decode_gaussians, densify,
                   encode_points, init_model, make_mlp, mlp_forward,
                   project_features)
from .pipeline import TrainConfig, forward_loss
from .splatter import TileConfig, rasterize_nodes
from .tape import Tape
from .voxelizer import DenseVolume, GridSpec, PointCloud

FD_STEP = 1e-4
MODULE_TOL = 1e-4
PIPELINE_TOL = 1e-3


@dataclass
class CheckRow:
    component: str
    max_rel_err: float
    tolerance: float

    @property
    def ok(self):
        return self.max_rel_err <= self.tolerance


def _rng(seed):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def _coords(size, mode, rng):
    if mode == "full" or size <= 24:
        return np.arange(size)
    return np.sort(rng.choice(size, size=24, replace=False))


def _scaled_err(analytic, numeric, idx):
    a = analytic.reshape(-1)[idx]
    n = numeric
    scale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(n).max(initial=0.0)))
    floor = 1e-6 + 1e-3 * scale
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom, initial=0.0))


def _check(fn, arrays, analytic, mode, rng, perturb=False):
    """Max scaled error between analytic grads and central differences.

    ``fn`` re-evaluates the scalar objective from the (mutated-in-place)
    arrays; ``analytic`` lists gradient arrays aligned with ``arrays``.
    """
    worst = 0.0
    for arr, grad in zip(arrays, analytic):
        if perturb:
            grad = grad * 1.01 + 1e-5
        flat = arr.reshape(-1)
        idx = _coords(flat.size, mode, rng)
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + FD_STEP
            fp = fn()
            flat[i] = old - FD_STEP
            fm = fn()
            flat[i] = old
            numeric[j] = (fp - fm) / (2.0 * FD_STEP)
        worst = max(worst, _scaled_err(grad, numeric, idx))
    return worst


# ---------------------------------------------------------------------------
# components


def _component_tape_core(mode, seed, perturb=False):
    rng = _rng(seed)
    x = rng.normal(size=(3, 4))
    y = rng.normal(size=(4, 2))
    w = rng.normal(size=(3, 2))

    def build():
        tape = Tape()
        xn, yn = tape.leaf(x), tape.leaf(y)
        z = xn @ yn
        expr = tp.tanh(z) * tp.sigmoid(z) + tp.softplus(z) + tp.sqrt(tp.exp(z))
        expr = expr + tp.absolute(z) * 0.25 + tp.relu(z - 0.1)
        return tape, xn, yn, tp.nsum(expr * w)

    tape, xn, yn, out = build()
    tape.backward(out)
    err = _check(lambda: float(build()[3].value), [x, y], [xn.grad, yn.grad],
                 mode, rng, perturb)
    return CheckRow("tape-core", err, MODULE_TOL)


def _component_mlp(mode, seed, perturb=False):
    rng = _rng(seed)
    mlp = make_mlp([5, 7, 3], rng)
    x = rng.normal(size=(4, 5))
    w = rng.normal(size=(4, 3))

    def run():
        tape = Tape()
        xn = tape.leaf(x)
        out = mlp_forward(mlp, xn, tape)
        return tape, xn, tp.nsum(out * w)

    tape, xn, out = run()
    tape.backward(out)
    arrays = [x] + mlp.weights + mlp.biases
    grads = [xn.grad] + [tape.grad_of(a) for a in mlp.weights + mlp.biases]
    err = _check(lambda: float(run()[2].value), arrays, grads, mode, rng, perturb)
    return CheckRow("mlp", err, MODULE_TOL)


def _point_cloud(rng, n):
    coords = rng.uniform(0.05, 0.95, size=(n, 3))
    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    attrs = np.concatenate([rng.uniform(0.1, 0.9, size=(n, 3)), normals], axis=1)
    return PointCloud(coords, attrs)


def _component_encoder(mode, seed, perturb=False):
    rng = _rng(seed)
    enc = PointEncoderParams(make_mlp([9, 6, 5], rng, final_activation="relu"),
                             make_mlp([10, 6, 5], rng, final_activation="relu"))
    pc = _point_cloud(rng, 8)
    grid = GridSpec(3, 3, 3)
    w = rng.normal(size=(8, 5))

    def run():
        tape = Tape()
        out = encode_points(enc, pc, grid, tape)
        return tape, tp.nsum(out * w)

    tape, out = run()
    tape.backward(out)
    arrays = enc.mlp1.weights + enc.mlp1.biases + enc.mlp2.weights + enc.mlp2.biases
    grads = [tape.grad_of(a) for a in arrays]
    err = _check(lambda: float(run()[1].value), arrays, grads, mode, rng, perturb)
    return CheckRow("point-encoder", err, MODULE_TOL)


def _component_conv(mode, seed, perturb=False):
    rng = _rng(seed)
    vol = rng.normal(size=(4, 4, 4, 2))
    dense = DenseStageParams(
        w1=0.3 * rng.normal(size=(3, 3, 3, 2, 3)), b1=rng.normal(size=3) * 0.1,
        w2=0.3 * rng.normal(size=(3, 3, 3, 3, 3)), b2=rng.normal(size=3) * 0.1)
    grid = GridSpec(4, 4, 4)
    volume = DenseVolume(grid=grid, dim=2, data=vol, occupied=np.ones((4, 4, 4), bool))
    w = rng.normal(size=(4, 4, 4, 3))

    def run():
        tape = Tape()
        vn = tape.leaf(vol)
        _, node = densify(dense, volume, tape, data=vn)
        return tape, vn, tp.nsum(node * w)

    tape, vn, out = run()
    tape.backward(out)
    arrays = [vol, dense.w1, dense.b1, dense.w2, dense.b2]
    grads = [vn.grad] + [tape.grad_of(a) for a in arrays[1:]]
    err = _check(lambda: float(run()[2].value), arrays, grads, mode, rng, perturb)
    return CheckRow("dense-conv", err, MODULE_TOL)


def _tiny_decoder(rng, d_o, d_f):
    from collections import OrderedDict

    heads = OrderedDict()
    for name, width in (("quat", 4), ("scale", 3), ("color", 3), ("opacity", 1),
                        ("offset", 3), ("feature", d_f)):
        heads[name] = make_mlp([d_o, 6, width], rng)
    return DecoderSet(heads=heads, offset_cap=None, prune_threshold=0.0)


def _component_decoder(mode, seed, perturb=False):
    rng = _rng(seed)
    d_o = 5
    dec = _tiny_decoder(rng, d_o, 4)
    feats = rng.normal(size=(10, d_o))
    centers = rng.uniform(0.1, 0.9, size=(10, 3))
    weights = [rng.normal(size=s) for s in ((10, 3), (10, 4), (10, 3), (10, 3), (10,), (10, 4))]

    def run():
        tape = Tape()
        fn = tape.leaf(feats)
        out = decode_gaussians(dec, (centers, fn), 0.125, tape)
        parts = (out.means, out.quats, out.scales, out.colors, out.opacities, out.features)
        total = None
        for node, w in zip(parts, weights):
            term = tp.nsum(node * w)
            total = term if total is None else total + term
        return tape, fn, total

    tape, fn, out = run()
    tape.backward(out)
    param_arrays = []
    for mlp in dec.heads.values():
        param_arrays.extend(mlp.weights)
        param_arrays.extend(mlp.biases)
    arrays = [feats] + param_arrays
    grads = [fn.grad] + [tape.grad_of(a) for a in param_arrays]
    err = _check(lambda: float(run()[2].value), arrays, grads, mode, rng, perturb)
    return CheckRow("decoder-heads", err, MODULE_TOL)


def _component_projection(mode, seed, perturb=False):
    rng = _rng(seed)
    proj = make_mlp([3, 6, 5], rng)
    fmap = rng.normal(size=(4, 4, 3))
    w = rng.normal(size=(4, 4, 5))

    def run():
        tape = Tape()
        fn = tape.leaf(fmap)
        out = project_features(proj, fn, tape)
        return tape, fn, tp.nsum(out * w)

    tape, fn, out = run()
    tape.backward(out)
    arrays = [fmap] + proj.weights + proj.biases
    grads = [fn.grad] + [tape.grad_of(a) for a in proj.weights + proj.biases]
    err = _check(lambda: float(run()[2].value), arrays, grads, mode, rng, perturb)
    return CheckRow("projection-head", err, MODULE_TOL)


def raster_fixture(rng, n=24, d_f=4, size=16):
    """Random in-frustum Gaussians plus a camera, safe margins everywhere."""
    means = rng.uniform(-0.25, 0.25, size=(n, 3))
    quats = rng.normal(size=(n, 4))
    scales = rng.uniform(0.02, 0.1, size=(n, 3))
    colors = rng.uniform(0.1, 0.9, size=(n, 3))
    opac = rng.uniform(0.2, 0.9, size=n)
    feats = rng.normal(size=(n, d_f))
    cam = Camera(fx=1.4 * size, fy=1.4 * size, cx=(size - 1) / 2, cy=(size - 1) / 2,
                 rotation=np.eye(3), translation=np.array([0.0, 0.0, 1.6]),
                 width=size, height=size)
    return [means, quats, scales, colors, opac, feats], cam


def _component_rasterizer(mode, seed, perturb=False):
    rng = _rng(seed)
    arrays, cam = raster_fixture(rng)
    cfg = TileConfig(tile=8, alpha_cutoff=0.0, t_floor=0.0)
    wc = rng.normal(size=(cam.height, cam.width, 3))
    wd = rng.normal(size=(cam.height, cam.width))
    wf = rng.normal(size=(cam.height, cam.width, 4))
    wt = rng.normal(size=(cam.height, cam.width))

    def run():
        tape = Tape()
        leaves = [tape.leaf(a) for a in arrays]
        nodes = rasterize_nodes(tape, cam, cfg, *leaves)
        out = tp.nsum(nodes.color * wc) + tp.nsum(nodes.depth * wd) \
            + tp.nsum(nodes.feature * wf) + tp.nsum(nodes.transmittance * wt)
        return tape, leaves, out

    tape, leaves, out = run()
    tape.backward(out)
    grads = [leaf.grad for leaf in leaves]
    err = _check(lambda: float(run()[2].value), arrays, grads, mode, rng, perturb)
    return CheckRow("rasterizer-attributes", err, MODULE_TOL)


def _component_losses(mode, seed, perturb=False):
    rng = _rng(seed)
    rendered_c = rng.uniform(0.0, 1.0, size=(2, 6, 6, 3))
    target_c = rng.uniform(0.0, 1.0, size=(2, 6, 6, 3))
    rendered_d = rng.uniform(0.0, 2.0, size=(2, 6, 6))
    target_d = rng.uniform(0.0, 2.0, size=(2, 6, 6))
    validity = rng.uniform(size=(2, 6, 6)) > 0.4
    lifted = rng.normal(size=(2, 4, 4, 5))
    target_f = rng.normal(size=(2, 4, 4, 5))
    target_f[0, 0, 0] = 0.0  # zero-norm pixel exercises the no-signal branch
    weights = LossWeights(1.3, 0.7, 1.1)

    def run():
        tape = Tape()
        cn, dn, fn = tape.leaf(rendered_c), tape.leaf(rendered_d), tape.leaf(lifted)
        total = loss_img(cn, target_c, tape) * weights.img \
            + loss_dep(dn, target_d, validity, tape) * weights.dep \
            + loss_sem(fn, target_f, tape) * weights.sem
        return tape, (cn, dn, fn), total

    tape, leaves, total = run()
    tape.backward(total)
    arrays = [rendered_c, rendered_d, lifted]
    grads = [leaf.grad for leaf in leaves]
    err = _check(lambda: float(run()[2].value), arrays, grads, mode, rng, perturb)
    return CheckRow("losses", err, MODULE_TOL)


def pipeline_fixture(seed):
    """Tiny scene + model for the composite chain (<= 32 Gaussians, 16x16)."""
    scene, _, _ = synth_scene(SynthSpec(n_blobs=3, grid=GridSpec(6, 6, 6), views=2,
                                        seed=seed, width=16, height=16,
                                        points_per_blob=48))
    dims = EncoderParams(d_s=5, d_o=5, d_f=4, d_star=6, enc_hidden=6,
                         head_hidden=6, proj_hidden=6)
    cfg = TrainConfig(grid=GridSpec(4, 4, 4), dims=dims, views_per_step=2,
                      tau=0.3, mask_ratio=0.5, seed=seed, tile=8,
                      alpha_cutoff=0.0, t_floor=0.0)
    model = init_model(dims, seed=seed + 1, prune_threshold=cfg.tau)
    return model, scene, cfg


def _component_pipeline(mode, seed, perturb=False):
    rng = _rng(seed)
    model, scene, cfg = pipeline_fixture(seed)

    def run():
        return forward_loss(model, scene, cfg, step=3)

    fw = run()
    fw.tape.backward(fw.total)
    flat = model.flatten()
    arrays = list(flat.values())
    grads = [fw.tape.grad_of(a) for a in arrays]
    err = _check(lambda: float(run().total.value), arrays, grads, mode, rng, perturb)
    return CheckRow("full-pipeline", err, PIPELINE_TOL)


COMPONENTS = (
    _component_tape_core,
    _component_mlp,
    _component_encoder,
    _component_conv,
    _component_decoder,
    _component_projection,
    _component_rasterizer,
    _component_losses,
    _component_pipeline,
)


def run_gradcheck(size="small", seed=0, perturb=False):
    """Run every component; returns a list of CheckRow."""
    if size not in ("small", "full"):
        raise ValueError("size must be 'small' or 'full'")
    rows = []
    for comp in COMPONENTS:
        rows.append(comp(size, seed, perturb=perturb))
    return rows
