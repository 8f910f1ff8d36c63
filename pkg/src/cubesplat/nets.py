"""Differentiable network kit: MLPs, the stand-in point encoder, the dense
3D convolution stage, the six Gaussian decoder heads, and the feature
projection head.

The point encoder is PointNet-style: a per-point MLP over (coords || attrs)
followed by one voxel-mean context concatenation and a second MLP. The dense
stage is two zero-padded 3x3x3 convolutions. Decoder heads map anchor
features to Gaussian attributes with the fixed activation set

    quat    -> L2 normalize      scale   -> softplus
    color   -> sigmoid           opacity -> sigmoid
    offset  -> tanh(.) * cap     feature -> linear

Anchors whose decoded opacity is at or below the prune threshold are
discarded before rasterization.
"""

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tape as tp
from . import kernels
from .errors import InvalidInputError
from .tape import Node
from .voxelizer import DenseVolume, cell_centers_for_ids, voxel_index

HEAD_WIDTHS = {"quat": 4, "scale": 3, "color": 3, "opacity": 1, "offset": 3}


@dataclass
class Mlp:
    """Per-layer weight matrices, bias vectors, and activation tags."""

    weights: list
    biases: list
    activations: list

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise InvalidInputError("layer lists must have equal length")
        for w, wn in zip(self.weights, self.weights[1:]):
            if w.shape[1] != wn.shape[0]:
                raise InvalidInputError("adjacent layer dims are incompatible")

    @property
    def d_in(self):
        return self.weights[0].shape[0]

    @property
    def d_out(self):
        return self.weights[-1].shape[1]


def make_mlp(sizes, rng, final_activation="identity", hidden_activation="relu"):
    """Glorot-uniform weights, zero biases."""
    weights, biases, acts = [], [], []
    for k, (din, dout) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = np.sqrt(6.0 / (din + dout))
        weights.append(rng.uniform(-limit, limit, size=(din, dout)))
        biases.append(np.zeros(dout))
        acts.append(hidden_activation if k < len(sizes) - 2 else final_activation)
    return Mlp(weights, biases, acts)


def _activate(x, tag):
    if tag == "relu":
        return tp.relu(x)
    if tag == "identity":
        return x
    raise InvalidInputError(f"unknown activation tag {tag!r}")


def mlp_forward(mlp, x, tape):
    """Affine + activation per layer; accepts a vector or an (m, d_in) batch."""
    is_vector = False
    if isinstance(x, Node):
        h = x
        if h.value.ndim == 1:
            is_vector = True
            h = tp.reshape(h, (1, -1))
    else:
        h = np.asarray(x, dtype=np.float64)
        if h.ndim == 1:
            is_vector = True
            h = h.reshape(1, -1)
    width = h.shape[1]
    if width != mlp.d_in:
        raise InvalidInputError(f"input width {width} does not match mlp d_in {mlp.d_in}")
    for w, b, act in zip(mlp.weights, mlp.biases, mlp.activations):
        h = tp.matmul(h, tape.param(w)) + tape.param(b)
        h = _activate(h, act)
    if is_vector:
        h = tp.reshape(h, (-1,))
    return h


# ---------------------------------------------------------------------------
# differentiable scatter / convolution primitives


def scatter_mean_op(feats, ids, ncells, counts, tape):
    """Mean-pool point features into flat cells; unoccupied cells stay zero.

    ``counts`` must be the per-cell point counts (constant data). Accumulation
    follows the canonical order of :func:`voxelizer.scatter_sums`.
    """
    from .voxelizer import scatter_sums

    ids = np.asarray(ids, dtype=np.int64)
    fv = feats.value if isinstance(feats, Node) else np.asarray(feats, dtype=np.float64)
    sums, counts_chk = scatter_sums(fv, ids, ncells)
    if not np.array_equal(counts_chk, counts):
        raise InvalidInputError("counts disagree with ids")
    occ = counts > 0
    out = np.zeros_like(sums)
    out[occ] = sums[occ] / counts[occ, None]
    if not isinstance(feats, Node):
        return tape.leaf(out)
    inv_counts = np.zeros(ncells)
    inv_counts[occ] = 1.0 / counts[occ]

    def vjp(g):
        return ((g * inv_counts[:, None])[ids],)

    return tape.node(out, (feats,), vjp)


def conv3d_op(vol, w, b, tape):
    """3x3x3 zero-padded convolution as one tape primitive."""
    vol_node = vol if isinstance(vol, Node) else tape.leaf(vol)
    wn = tape.param(w)
    bn = tape.param(b)
    out = kernels.conv3d_forward(vol_node.value, wn.value, bn.value)

    def vjp(g):
        return kernels.conv3d_backward(vol_node.value, wn.value, g)

    return tape.node(out, (vol_node, wn, bn), vjp)


# ---------------------------------------------------------------------------
# parameter containers


@dataclass(frozen=True)
class EncoderParams:
    """Width configuration for the full stack."""

    d_s: int = 32
    d_o: int = 32
    d_f: int = 16
    d_star: int = 64
    enc_hidden: int = 32
    head_hidden: int = 32
    proj_hidden: int = 64

    def __post_init__(self):
        if min(self.d_s, self.d_o, self.d_f, self.d_star) < 1:
            raise InvalidInputError("feature widths must be positive")
        if self.d_f > self.d_star:
            raise InvalidInputError("rendered feature width d_f must not exceed d_star")


@dataclass
class PointEncoderParams:
    mlp1: Mlp
    mlp2: Mlp


@dataclass
class DenseStageParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    activation: str = "relu"


@dataclass
class DecoderSet:
    """Attribute heads plus offset cap and opacity prune threshold."""

    heads: "OrderedDict[str, Mlp]"
    offset_cap: Optional[float] = None  # None: use the voxel edge passed at decode time
    prune_threshold: float = 0.3

    def __post_init__(self):
        if self.offset_cap is not None and self.offset_cap <= 0:
            raise InvalidInputError("offset cap must be positive")
        if not 0.0 <= self.prune_threshold < 1.0:
            raise InvalidInputError("prune threshold must lie in [0, 1)")
        widths = {h.d_in for h in self.heads.values()}
        if len(widths) != 1:
            raise InvalidInputError("all heads must share one input width")


@dataclass
class ModelParams:
    dims: EncoderParams
    encoder: PointEncoderParams
    dense: DenseStageParams
    decoder: DecoderSet
    proj: Mlp

    def flatten(self):
        """Stable name -> array view of every trainable tensor."""
        out = OrderedDict()
        for tag, mlp in (("enc1", self.encoder.mlp1), ("enc2", self.encoder.mlp2)):
            for k, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
                out[f"{tag}.w{k}"] = w
                out[f"{tag}.b{k}"] = b
        out["dense.w1"] = self.dense.w1
        out["dense.b1"] = self.dense.b1
        out["dense.w2"] = self.dense.w2
        out["dense.b2"] = self.dense.b2
        for name, mlp in self.decoder.heads.items():
            for k, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
                out[f"head.{name}.w{k}"] = w
                out[f"head.{name}.b{k}"] = b
        for k, (w, b) in enumerate(zip(self.proj.weights, self.proj.biases)):
            out[f"proj.w{k}"] = w
            out[f"proj.b{k}"] = b
        return out

    def load_flat(self, flat):
        """Copy values from a name -> array mapping; shapes must match."""
        own = self.flatten()
        for name, arr in own.items():
            if name not in flat:
                raise InvalidInputError(f"missing parameter {name}")
            src = flat[name]
            if src.shape != arr.shape:
                raise InvalidInputError(
                    f"parameter {name}: expected dims {arr.shape}, found {src.shape}")
            arr[...] = src


def softplus_inv(y):
    return float(np.log(np.expm1(y)))


def init_model(dims, seed, prune_threshold=0.3, offset_cap=None, scale_bias=None):
    """Fresh model parameters.

    The opacity head bias starts at +0.5 so early opacities clear the default
    prune threshold; the scale head bias starts at ``scale_bias`` (use
    ``softplus_inv(voxel_edge)`` so Gaussians begin voxel-sized instead of
    scene-sized, which would stall the optimizer for ~10^3 steps)."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    enc1 = make_mlp([9, dims.enc_hidden, dims.d_s], rng, final_activation="relu")
    enc2 = make_mlp([2 * dims.d_s, dims.enc_hidden, dims.d_s], rng, final_activation="relu")

    def conv_kernel(cin, cout):
        limit = np.sqrt(6.0 / (27 * cin + cout))
        return rng.uniform(-limit, limit, size=(3, 3, 3, cin, cout))

    dense = DenseStageParams(
        w1=conv_kernel(dims.d_s, dims.d_o), b1=np.zeros(dims.d_o),
        w2=conv_kernel(dims.d_o, dims.d_o), b2=np.zeros(dims.d_o),
    )
    heads = OrderedDict()
    for name, width in HEAD_WIDTHS.items():
        heads[name] = make_mlp([dims.d_o, dims.head_hidden, width], rng)
    heads["feature"] = make_mlp([dims.d_o, dims.head_hidden, dims.d_f], rng)
    heads["opacity"].biases[-1][...] = 0.5
    # identity-quaternion bias keeps Normalize well defined even for anchors
    # whose features die under the ReLUs
    heads["quat"].biases[-1][...] = (1.0, 0.0, 0.0, 0.0)
    if scale_bias is not None:
        heads["scale"].biases[-1][...] = scale_bias
    proj = make_mlp([dims.d_f, dims.proj_hidden, dims.d_star], rng)
    decoder = DecoderSet(heads=heads, offset_cap=offset_cap, prune_threshold=prune_threshold)
    return ModelParams(dims=dims, encoder=PointEncoderParams(enc1, enc2),
                       dense=dense, decoder=decoder, proj=proj)


# ---------------------------------------------------------------------------
# forward operations


def encode_points(encoder, pc, grid, tape):
    """Per-point features with one voxel-mean context hop; (m, d_s)."""
    if pc.coords.min() < -1e-9 or pc.coords.max() > 1 + 1e-9:
        raise InvalidInputError("point cloud must be normalized to the unit cube")
    x = np.concatenate([pc.coords, pc.attrs], axis=1)
    h = mlp_forward(encoder.mlp1, x, tape)
    ids = voxel_index(pc.coords, grid)
    counts = np.bincount(ids, minlength=grid.ncells)
    pooled = scatter_mean_op(h, ids, grid.ncells, counts, tape)
    ctx = tp.take(pooled, ids)
    return mlp_forward(encoder.mlp2, tp.concat([h, ctx], axis=1), tape)


def densify(dense, volume, tape, data=None):
    """Two 3x3x3 convolutions with a pointwise nonlinearity; the occupancy
    mask passes through unchanged. ``data`` may supply the input volume as a
    tape node (training path); otherwise ``volume.data`` becomes a leaf.

    Returns (DenseVolume, output node).
    """
    node = data if data is not None else tape.leaf(volume.data)
    if node.value.shape[-1] != dense.w1.shape[3]:
        raise InvalidInputError("volume feature width does not match conv stage")
    node = _activate(conv3d_op(node, dense.w1, dense.b1, tape), dense.activation)
    node = _activate(conv3d_op(node, dense.w2, dense.b2, tape), dense.activation)
    out = DenseVolume(grid=volume.grid, dim=node.value.shape[-1],
                      data=node.value, occupied=volume.occupied)
    return out, node


@dataclass
class DecodedGaussians:
    """Pruned Gaussian attributes as tape nodes, plus anchor bookkeeping."""

    means: Node
    quats: Node
    scales: Node
    colors: Node
    opacities: Node
    features: Node
    kept: np.ndarray  # indices into the anchor list that survived pruning
    anchor_ids: np.ndarray  # flat voxel ids of the kept anchors

    def __len__(self):
        return self.kept.size

    def to_primitives(self):
        from .geometry import GaussianPrimitive

        prims = []
        for k in range(len(self)):
            prims.append(GaussianPrimitive(
                mean=self.means.value[k], quat=self.quats.value[k],
                scale=self.scales.value[k],
                color=np.clip(self.colors.value[k], 0.0, 1.0),
                opacity=self.opacities.value[k], feature=self.features.value[k]))
        return prims


def decode_gaussians(decoder, anchor_input, voxel_edge, tape, anchor_ids=None):
    """Decode per-anchor Gaussian attributes and prune by opacity.

    ``anchor_input`` is either the (centers, features) pair used by the
    training path (features may be a tape node) or the list of
    (center, feature) tuples produced by :func:`voxelizer.anchors`.
    """
    if isinstance(anchor_input, list):
        if anchor_input:
            centers = np.stack([c for c, _ in anchor_input])
            feats = np.stack([f for _, f in anchor_input])
        else:
            width = next(iter(decoder.heads.values())).d_in
            centers = np.zeros((0, 3))
            feats = np.zeros((0, width))
    else:
        centers, feats = anchor_input
    feats = feats if isinstance(feats, Node) else tape.leaf(feats)
    cap = decoder.offset_cap if decoder.offset_cap is not None else float(voxel_edge)
    if cap <= 0:
        raise InvalidInputError("offset cap must be positive")

    raw_q = mlp_forward(decoder.heads["quat"], feats, tape)
    qnorm = tp.sqrt(tp.nsum(raw_q * raw_q, axis=1, keepdims=True) + 1e-24)
    quats = raw_q / qnorm
    scales = tp.softplus(mlp_forward(decoder.heads["scale"], feats, tape))
    colors = tp.sigmoid(mlp_forward(decoder.heads["color"], feats, tape))
    opac = tp.sigmoid(mlp_forward(decoder.heads["opacity"], feats, tape))
    opac = tp.reshape(opac, (-1,))
    offsets = tp.tanh(mlp_forward(decoder.heads["offset"], feats, tape)) * cap
    means = offsets + centers
    features = mlp_forward(decoder.heads["feature"], feats, tape)

    kept = np.flatnonzero(opac.value > decoder.prune_threshold)
    ids = np.asarray(anchor_ids, dtype=np.int64)[kept] if anchor_ids is not None \
        else np.full(kept.size, -1, dtype=np.int64)
    return DecodedGaussians(
        means=tp.take(means, kept), quats=tp.take(quats, kept),
        scales=tp.take(scales, kept), colors=tp.take(colors, kept),
        opacities=tp.take(opac, kept), features=tp.take(features, kept),
        kept=kept, anchor_ids=ids)


def project_features(proj, fmap, tape):
    """Per-pixel MLP lift of an (H, W, d_f) map to (H, W, d_star)."""
    shape = fmap.value.shape if isinstance(fmap, Node) else fmap.shape
    if len(shape) != 3 or shape[2] != proj.d_in:
        raise InvalidInputError(f"feature map width must be {proj.d_in}")
    node = fmap if isinstance(fmap, Node) else tape.leaf(fmap)
    flat = tp.reshape(node, (-1, shape[2]))
    lifted = mlp_forward(proj, flat, tape)
    return tp.reshape(lifted, (shape[0], shape[1], proj.d_out))


def tape_backward(tape, root):
    """Reverse-accumulate gradients of a scalar root over the whole tape."""
    tape.backward(root)


def anchor_arrays(volume, data_node=None):
    """Occupied-cell ids, centers, and features (node rows when given).

    Feature rows come from ``data_node`` when provided so gradients flow back
    into the dense stage; otherwise they are plain values.
    """
    from .voxelizer import occupied_ids

    ids = occupied_ids(volume)
    centers = cell_centers_for_ids(volume.grid, ids)
    if data_node is None:
        flat = volume.data.transpose(2, 1, 0, 3).reshape(-1, volume.dim)
        return ids, centers, flat[ids]
    flat = tp.reshape(tp.transpose(data_node, (2, 1, 0, 3)), (-1, volume.dim))
    return ids, centers, tp.take(flat, ids)
