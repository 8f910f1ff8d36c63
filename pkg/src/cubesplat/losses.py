"""Training losses: photometric L1, masked depth L1, feature cosine.

All three are O(1)-scaled: the photometric loss is a per-element mean, the
depth loss divides by the count of valid pixels, and the cosine loss averages
per-pixel alignment terms. Pixels whose target (or lifted) feature vector has
zero norm contribute a constant 1 with zero gradient, so backgrounds neither
blow up the division nor push the feature field anywhere.
"""

from dataclasses import dataclass

import numpy as np

from . import tape as tp
from .errors import InvalidInputError
from .tape import Node


@dataclass(frozen=True)
class LossWeights:
    img: float = 1.0
    dep: float = 1.0
    sem: float = 1.0

    def __post_init__(self):
        if min(self.img, self.dep, self.sem) < 0:
            raise InvalidInputError("loss weights must be nonnegative")
        if self.img == self.dep == self.sem == 0:
            raise InvalidInputError("at least one loss weight must be positive")


@dataclass
class LossReport:
    l_img: float
    l_dep: float
    l_sem: float
    total: float
    valid_pixel_count: int
    step_psnr: float = 0.0  # training-time diagnostic on the sampled views


def _shape_of(x):
    return x.value.shape if isinstance(x, Node) else np.asarray(x).shape


def _check_shapes(a, b, what):
    sa, sb = _shape_of(a), _shape_of(b)
    if sa != sb:
        raise InvalidInputError(f"{what}: shape mismatch {sa} vs {sb}")


def loss_img(rendered, target, tape):
    """Mean absolute color error over all views, pixels, and channels."""
    _check_shapes(rendered, target, "loss_img")
    target = np.asarray(target, dtype=np.float64)
    return tp.nmean(tp.absolute(rendered - target))


def loss_dep(rendered, target, validity, tape):
    """L1 depth error over valid pixels; zero (and gradient-free) when no
    pixel is valid."""
    _check_shapes(rendered, target, "loss_dep")
    _check_shapes(rendered, validity, "loss_dep validity")
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(validity).astype(np.float64)
    count = int(mask.sum())
    if count == 0:
        return tape.node(np.zeros(()))
    total = tp.nsum(tp.absolute(rendered - target) * mask)
    return total / float(count)


def loss_sem(lifted, target, tape):
    """Mean over views and pixels of (1 - cosine similarity).

    Zero-norm pixels (in the target or the lifted map) contribute the
    no-signal constant 1 with zero gradient.
    """
    _check_shapes(lifted, target, "loss_sem")
    target = np.asarray(target, dtype=np.float64)
    lifted_sq = tp.nsum(lifted * lifted, axis=-1)
    target_sq = np.sum(target * target, axis=-1)
    valid = (lifted_sq.value > 0) & (target_sq > 0)
    vmask = valid.astype(np.float64)
    dot = tp.nsum(lifted * target, axis=-1)
    denom = tp.sqrt(lifted_sq * target_sq + (1.0 - vmask))
    cos = (dot / denom) * vmask
    per_pixel = 1.0 - cos
    return tp.nmean(per_pixel)


def loss_total(l_img_node, l_dep_node, l_sem_node, weights):
    """Weighted sum on the tape; gradients superpose linearly."""
    return l_img_node * weights.img + l_dep_node * weights.dep + l_sem_node * weights.sem


def cosine_alignment(lifted, target):
    """Mean cosine over pixels with nonzero target norm (evaluation metric)."""
    lifted = np.asarray(lifted, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    tn = np.linalg.norm(target, axis=-1)
    ln = np.linalg.norm(lifted, axis=-1)
    valid = tn > 0
    if not valid.any():
        return 1.0
    dot = np.sum(lifted * target, axis=-1)
    denom = np.where(valid & (ln > 0), ln * tn, 1.0)
    cos = np.where(valid & (ln > 0), dot / denom, 0.0)
    return float(cos[valid].mean())
