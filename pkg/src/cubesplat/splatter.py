"""Tile-based differentiable rasterization of Gaussian primitives.

Rendering composites depth-sorted Gaussians front to back with

    alpha_i = min(0.99, opacity_i * exp(-0.5 d^T conic_i d))

and blends color, camera-space z-depth, and the per-Gaussian feature vector
with one shared (alpha, order) sequence, so the three channels stay mutually
consistent. Rendered color is composited over a constant background; depth is
the raw blend (no alpha normalization), so low-coverage pixels bias toward
zero and the depth loss masks them via its validity indicator.

:func:`rasterize` runs through the gradient tape and hot kernels;
:func:`brute_force_render` is an independent per-pixel reference used as the
correctness oracle for the tiled path.
"""

import math
from dataclasses import dataclass, field
from types import SimpleNamespace
from typing import Optional

import numpy as np

from . import kernels
from . import tape as tp
from .errors import InvalidInputError
from .geometry import LOWPASS, project_gaussian
from .tape import Node, Tape

ALPHA_CLAMP = 0.99


@dataclass
class TileConfig:
    """Rasterizer knobs. Zero cutoff/floor disables the respective shortcut
    (used by oracle comparisons and gradient checks)."""

    tile: int = 16
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    alpha_cutoff: float = 1.0 / 255.0
    t_floor: float = 1e-4

    def __post_init__(self):
        if self.tile < 1:
            raise InvalidInputError("tile size must be at least 1")
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        if not (0.0 <= self.alpha_cutoff < 1.0 and 0.0 <= self.t_floor < 1.0):
            raise InvalidInputError("cutoffs must lie in [0, 1)")


@dataclass
class RenderOutput:
    """Per-view maps; ``nodes`` carries the tape-linked versions when the
    render was differentiable."""

    color: np.ndarray
    depth: np.ndarray
    feature: np.ndarray
    transmittance: np.ndarray
    nodes: Optional[SimpleNamespace] = None


def _background_output(cam, cfg, n_features, tape):
    h, w = cam.height, cam.width
    color = np.tile(cfg.background, (h, w, 1))
    out = RenderOutput(color=color, depth=np.zeros((h, w)),
                       feature=np.zeros((h, w, n_features)),
                       transmittance=np.ones((h, w)))
    if tape is not None:
        out.nodes = SimpleNamespace(
            color=tape.node(out.color), depth=tape.node(out.depth),
            feature=tape.node(out.feature), transmittance=tape.node(out.transmittance))
    return out


def _blend_node(tape, cam, cfg, mx, my, ca, cb, cc, zc, colors, opac, feats):
    """Custom tape primitive wrapping the blend kernels.

    The packed value layout is (H, W, 3 + 1 + F + 1): color, depth, feature,
    transmittance.
    """
    nf = feats.value.shape[1]
    attrs = (mx.value, my.value, ca.value, cb.value, cc.value, zc.value,
             colors.value, opac.value, feats.value)
    plan = kernels.BlendPlan(mx.value, my.value, ca.value, cb.value, cc.value,
                             zc.value, opac.value, cam.width, cam.height,
                             cfg.tile, cfg.alpha_cutoff)
    bg = cfg.background
    color, depth, fmap, trans = kernels.blend_forward(attrs, plan, bg,
                                                      cfg.alpha_cutoff, cfg.t_floor)
    packed = np.concatenate([color, depth[..., None], fmap, trans[..., None]], axis=2)

    def vjp(g):
        dcolor = np.ascontiguousarray(g[..., 0:3])
        ddepth = np.ascontiguousarray(g[..., 3])
        dfeat = np.ascontiguousarray(g[..., 4:4 + nf])
        dtrans = np.ascontiguousarray(g[..., 4 + nf])
        return kernels.blend_backward(attrs, plan, bg, cfg.alpha_cutoff,
                                      cfg.t_floor, dcolor, ddepth, dfeat, dtrans)

    node = tape.node(packed, (mx, my, ca, cb, cc, zc, colors, opac, feats), vjp)
    return SimpleNamespace(
        color=node[:, :, 0:3], depth=node[:, :, 3],
        feature=node[:, :, 4:4 + nf], transmittance=node[:, :, 4 + nf])


def rasterize_nodes(tape, cam, cfg, means, quats, scales, colors, opacities, features):
    """Differentiable render from attribute nodes; see :func:`rasterize`."""
    n = means.value.shape[0]
    nf = features.value.shape[1]
    if n == 0:
        return _background_output(cam, cfg, nf, tape).nodes

    rot_t = cam.rotation.T.copy()
    mu_cam = tp.matmul(means, rot_t) + cam.translation
    near_keep = np.flatnonzero(mu_cam.value[:, 2] > cam.near)
    if near_keep.size == 0:
        return _background_output(cam, cfg, nf, tape).nodes
    mu_cam = tp.take(mu_cam, near_keep)
    quats = tp.take(quats, near_keep)
    scales = tp.take(scales, near_keep)
    colors = tp.take(colors, near_keep)
    opacities = tp.take(opacities, near_keep)
    features = tp.take(features, near_keep)

    x, y, z = mu_cam[:, 0], mu_cam[:, 1], mu_cam[:, 2]
    mx = cam.fx * (x / z) + cam.cx
    my = cam.fy * (y / z) + cam.cy

    # rotation entries from the (renormalized) quaternion
    qn = quats / tp.sqrt(tp.nsum(quats * quats, axis=1, keepdims=True))
    qw, qx, qy, qz = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    r = [
        [1.0 - 2.0 * (qy * qy + qz * qz), 2.0 * (qx * qy - qw * qz), 2.0 * (qx * qz + qw * qy)],
        [2.0 * (qx * qy + qw * qz), 1.0 - 2.0 * (qx * qx + qz * qz), 2.0 * (qy * qz - qw * qx)],
        [2.0 * (qx * qz - qw * qy), 2.0 * (qy * qz + qw * qx), 1.0 - 2.0 * (qx * qx + qy * qy)],
    ]
    s0, s1, s2 = scales[:, 0], scales[:, 1], scales[:, 2]
    m = [[r[i][0] * s0, r[i][1] * s1, r[i][2] * s2] for i in range(3)]
    # world covariance, unique entries of M M^T
    sig = {}
    for a in range(3):
        for b in range(a, 3):
            sig[(a, b)] = m[a][0] * m[b][0] + m[a][1] * m[b][1] + m[a][2] * m[b][2]

    def sig_at(i, j):
        return sig[(i, j)] if i <= j else sig[(j, i)]

    # camera covariance W Sigma W^T
    w_rot = cam.rotation
    t_rows = [[sum_nodes([w_rot[a, j] * sig_at(j, i) for j in range(3)]) for i in range(3)]
              for a in range(3)]
    sc = {}
    for a in range(3):
        for b in range(a, 3):
            sc[(a, b)] = sum_nodes([t_rows[a][i] * w_rot[b, i] for i in range(3)])

    j00 = cam.fx / z
    j11 = cam.fy / z
    j02 = -j00 * (x / z)
    j12 = -j11 * (y / z)
    cov_a = j00 * j00 * sc[(0, 0)] + 2.0 * (j00 * j02) * sc[(0, 2)] + j02 * j02 * sc[(2, 2)] + LOWPASS
    cov_b = (j00 * j11) * sc[(0, 1)] + (j00 * j12) * sc[(0, 2)] \
        + (j02 * j11) * sc[(1, 2)] + (j02 * j12) * sc[(2, 2)]
    cov_c = j11 * j11 * sc[(1, 1)] + 2.0 * (j11 * j12) * sc[(1, 2)] + j12 * j12 * sc[(2, 2)] + LOWPASS

    # cull Gaussians whose 3-sigma circle misses the image rectangle
    av, bv, cv = cov_a.value, cov_b.value, cov_c.value
    half = 0.5 * (av + cv)
    lam_max = half + np.sqrt(np.square(0.5 * (av - cv)) + np.square(bv))
    extent = 3.0 * np.sqrt(lam_max)
    dx = np.maximum(0.0, np.maximum(-mx.value, mx.value - (cam.width - 1)))
    dy = np.maximum(0.0, np.maximum(-my.value, my.value - (cam.height - 1)))
    vis = np.flatnonzero(dx * dx + dy * dy <= extent * extent)
    if vis.size == 0:
        return _background_output(cam, cfg, nf, tape).nodes
    mx, my, z = tp.take(mx, vis), tp.take(my, vis), tp.take(z, vis)
    cov_a, cov_b, cov_c = tp.take(cov_a, vis), tp.take(cov_b, vis), tp.take(cov_c, vis)
    colors, opacities, features = tp.take(colors, vis), tp.take(opacities, vis), tp.take(features, vis)

    det = cov_a * cov_c - cov_b * cov_b
    conic_a = cov_c / det
    conic_b = -cov_b / det
    conic_c = cov_a / det
    return _blend_node(tape, cam, cfg, mx, my, conic_a, conic_b, conic_c, z,
                       colors, opacities, features)


def sum_nodes(terms):
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def _pack_attributes(gaussians):
    n = len(gaussians)
    nf = gaussians[0].feature.size if n else 0
    means = np.stack([g.mean for g in gaussians]) if n else np.zeros((0, 3))
    quats = np.stack([g.quat for g in gaussians]) if n else np.zeros((0, 4))
    scales = np.stack([g.scale for g in gaussians]) if n else np.zeros((0, 3))
    colors = np.stack([g.color for g in gaussians]) if n else np.zeros((0, 3))
    opac = np.array([g.opacity for g in gaussians])
    feats = np.stack([g.feature for g in gaussians]) if n else np.zeros((0, 0))
    if n and feats.shape[1] != nf:
        raise InvalidInputError("all Gaussians must share one feature width")
    return means, quats, scales, colors, opac, feats


def rasterize(gaussians, cam, cfg=None, tape=None):
    """Render a list of Gaussians; tape-linked when ``tape`` is given.

    Returns a :class:`RenderOutput`; with a tape, ``out.nodes`` carries the
    differentiable maps and ``out.leaves`` the attribute leaf nodes
    (means, quats, scales, colors, opacities, features) for gradient access.
    """
    cfg = cfg or TileConfig()
    arrays = _pack_attributes(list(gaussians))
    own_tape = tape or Tape()
    leaves = SimpleNamespace(
        means=own_tape.leaf(arrays[0]), quats=own_tape.leaf(arrays[1]),
        scales=own_tape.leaf(arrays[2]), colors=own_tape.leaf(arrays[3]),
        opacities=own_tape.leaf(arrays[4]), features=own_tape.leaf(arrays[5]))
    nodes = rasterize_nodes(own_tape, cam, cfg, leaves.means, leaves.quats,
                            leaves.scales, leaves.colors, leaves.opacities,
                            leaves.features)
    out = RenderOutput(color=nodes.color.value.copy(), depth=nodes.depth.value.copy(),
                       feature=nodes.feature.value.copy(),
                       transmittance=nodes.transmittance.value.copy(), nodes=nodes)
    out.leaves = leaves
    out.tape = own_tape
    return out


def brute_force_render(gaussians, cam, cfg=None):
    """Per-pixel reference renderer: full loop over globally depth-sorted
    Gaussians, no tiling or footprint shortcuts."""
    cfg = cfg or TileConfig()
    gaussians = list(gaussians)
    projected = []
    for idx, g in enumerate(gaussians):
        pg = project_gaussian(g, cam)
        if pg is not None:
            projected.append((pg, g, idx))
    projected.sort(key=lambda entry: (entry[0].z_cam, entry[2]))
    h, w = cam.height, cam.width
    nf = gaussians[0].feature.size if gaussians else 0
    color = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    fmap = np.zeros((h, w, nf))
    trans = np.ones((h, w))
    px, py = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    for pg, g, _ in projected:
        dx = px - pg.mean2d[0]
        dy = py - pg.mean2d[1]
        power = -0.5 * (pg.conic[0, 0] * dx * dx + pg.conic[1, 1] * dy * dy) \
            - pg.conic[0, 1] * dx * dy
        alpha = np.minimum(g.opacity * np.exp(np.minimum(power, 0.0)), ALPHA_CLAMP)
        eff = (trans >= cfg.t_floor) & (alpha >= cfg.alpha_cutoff)
        wgt = np.where(eff, alpha * trans, 0.0)
        color += wgt[..., None] * g.color
        depth += wgt * pg.z_cam
        fmap += wgt[..., None] * g.feature
        trans = np.where(eff, trans * (1.0 - alpha), trans)
    color += trans[..., None] * cfg.background
    return RenderOutput(color=color, depth=depth, feature=fmap, transmittance=trans)


def psnr(img, ref):
    """10*log10(1/MSE) for [0,1] images; +inf for identical inputs."""
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise InvalidInputError(f"shape mismatch: {img.shape} vs {ref.shape}")
    mse = float(np.mean(np.square(img - ref)))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)
