"""Bit-exact file formats and the synthetic-scene generator.

Formats (all multi-byte values little-endian, every binary format opens with
a four-byte magic and a u16 version; unknown versions are rejected):

* tensor file ``GXTN`` — u8 rank, u32 dims, f32 payload. Used for depth
  maps, 0/1 validity masks, feature maps, semantic-id maps, and scores.
* scene file ``GXSC`` — u32 point count, u8 attribute width (fixed at 6:
  RGB then unit normals), f32 coords then attrs.
* camera file — text; per line: fx fy cx cy width height near, nine
  row-major rotation entries, three translation entries, 17 significant
  digits. Rotations are re-validated at 1e-6 on load.
* checkpoint ``GXCK`` — named sections (u16 name length + UTF-8 name,
  u8 dtype tag, u8 rank, u32 dims, payload). Parameters and optimizer
  moments are stored as f64 so resuming reproduces an uninterrupted run
  bit-exactly.
* config — flat ``key=value`` text with typed parsing; unknown keys are
  rejected.

Color images use binary PPM (P6, 8-bit); values quantize by round-half-up.
Writers stage to a temp file and atomically rename, so interrupted runs
leave no partial files.

:func:`synth_scene` builds a fully self-consistent fixture: ground-truth
Gaussians with known colors and semantic ids, per-view color/depth/id-map
targets rendered by the brute-force reference, and a point cloud sampled on
the 1-sigma ellipsoid surfaces with analytic normals.
"""

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError, InvalidInputError
from .geometry import Camera, GaussianPrimitive
from .nets import EncoderParams, init_model
from .optim import OptimizerState
from .splatter import TileConfig, brute_force_render
from .voxelizer import GridSpec, PointCloud

TENSOR_MAGIC = b"GXTN"
SCENE_MAGIC = b"GXSC"
CHECKPOINT_MAGIC = b"GXCK"
FORMAT_VERSION = 1
ATTR_WIDTH = 6

_DTYPE_TAGS = {0: np.float32, 1: np.float64, 2: np.int64}
_TAG_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


def _atomic_write(path, payload):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated payload while reading {what}")
    return data


# ---------------------------------------------------------------------------
# tensor files


def write_tensor(array, path):
    array = np.asarray(array, dtype=np.float32)
    head = TENSOR_MAGIC + struct.pack("<HB", FORMAT_VERSION, array.ndim)
    head += struct.pack(f"<{array.ndim}I", *array.shape)
    _atomic_write(path, head + array.astype("<f4").tobytes())


def read_tensor(path):
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != TENSOR_MAGIC:
            raise FormatError(f"{path}: bad magic, expected GXTN")
        version, rank = struct.unpack("<HB", _read_exact(fh, 3, "header"))
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unknown tensor version {version}")
        dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
        count = int(np.prod(dims)) if rank else 1
        payload = _read_exact(fh, 4 * count, "tensor payload")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after tensor payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


# ---------------------------------------------------------------------------
# scene files


def write_scene(pc, path):
    coords = pc.coords.astype("<f4")
    attrs = pc.attrs.astype("<f4")
    head = SCENE_MAGIC + struct.pack("<HIB", FORMAT_VERSION, len(pc), ATTR_WIDTH)
    _atomic_write(path, head + coords.tobytes() + attrs.tobytes())


def read_scene(path):
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != SCENE_MAGIC:
            raise FormatError(f"{path}: bad magic, expected GXSC")
        version, count, width = struct.unpack("<HIB", _read_exact(fh, 7, "header"))
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unknown scene version {version}")
        if width != ATTR_WIDTH:
            raise FormatError(f"{path}: attr width must be {ATTR_WIDTH}, found {width}")
        coords = np.frombuffer(_read_exact(fh, 12 * count, "coords"), dtype="<f4")
        attrs = np.frombuffer(_read_exact(fh, 4 * width * count, "attrs"), dtype="<f4")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after scene payload")
    return PointCloud(coords.reshape(count, 3).astype(np.float64),
                      attrs.reshape(count, width).astype(np.float64))


# ---------------------------------------------------------------------------
# camera files


def write_cameras(cams, path):
    lines = []
    for cam in cams:
        vals = ([cam.fx, cam.fy, cam.cx, cam.cy, float(cam.width), float(cam.height), cam.near]
                + list(cam.rotation.reshape(-1)) + list(cam.translation))
        lines.append(" ".join(f"{v:.17g}" for v in vals))
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def read_cameras(path):
    cams = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            vals = [float(tok) for tok in line.split()]
            if len(vals) != 19:
                raise FormatError(f"{path}:{ln}: expected 19 fields, found {len(vals)}")
            rot = np.array(vals[7:16]).reshape(3, 3)
            err = np.abs(rot @ rot.T - np.eye(3)).max()
            if err > 1e-6 or abs(np.linalg.det(rot) - 1.0) > 1e-6:
                raise FormatError(f"{path}:{ln}: rotation fails orthonormality at 1e-6")
            if err > 1e-9:
                u, _, vt = np.linalg.svd(rot)
                rot = u @ vt
            cams.append(Camera(fx=vals[0], fy=vals[1], cx=vals[2], cy=vals[3],
                               rotation=rot, translation=np.array(vals[16:19]),
                               width=int(vals[4]), height=int(vals[5]), near=vals[6]))
    return cams


# ---------------------------------------------------------------------------
# PPM images


def quantize_u8(img):
    """Round-half-up quantization of [0,1] values to 8-bit."""
    return np.clip(np.floor(np.asarray(img) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_image_ppm(img, path):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidInputError("image must have shape (H, W, 3)")
    if img.min() < 0 or img.max() > 1:
        raise InvalidInputError("image values must lie in [0, 1]")
    h, w = img.shape[:2]
    head = f"P6\n{w} {h}\n255\n".encode()
    _atomic_write(path, head + quantize_u8(img).tobytes())


def read_image_ppm(path):
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P6":
            raise FormatError(f"{path}: not a binary P6 PPM")
        dims = fh.readline().split()
        maxval = fh.readline().strip()
        if len(dims) != 2 or maxval != b"255":
            raise FormatError(f"{path}: unsupported PPM header")
        w, h = int(dims[0]), int(dims[1])
        payload = _read_exact(fh, 3 * w * h, "pixel data")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return img.astype(np.float64) / 255.0


def write_gray_ppm(values, path):
    """[0,1] grayscale written as an RGB PPM."""
    v = np.asarray(values, dtype=np.float64)
    write_image_ppm(np.repeat(v[..., None], 3, axis=2), path)


# ---------------------------------------------------------------------------
# scene samples


@dataclass
class View:
    """One posed target view."""

    camera: Camera
    color: np.ndarray
    depth: np.ndarray
    validity: np.ndarray
    feat_target: Optional[np.ndarray] = None  # (H, W, d_star), precomputed
    semantic_ids: Optional[np.ndarray] = None  # (H, W) int, -1 = background


@dataclass
class SceneSample:
    """Point cloud plus posed views sharing one world frame."""

    cloud: PointCloud
    views: list
    name: str = "scene"


@dataclass(frozen=True)
class SynthSpec:
    n_blobs: int
    grid: GridSpec
    views: int
    seed: int
    width: int = 64
    height: int = 64
    points_per_blob: int = 512


def _look_at(eye, target):
    """World->camera rotation (x right, y down, z forward) and translation."""
    forward = target - eye
    forward = forward / np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    if abs(forward @ up) > 0.99:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    u, _, vt = np.linalg.svd(rot)
    rot = u @ vt
    return rot, -rot @ eye


def _f32_exact(arr):
    """Snap to float32-representable values so file round trips are bit-exact."""
    return np.asarray(arr, dtype=np.float32).astype(np.float64)


def synth_scene(spec):
    """Generate a SceneSample with analytic ground truth.

    Returns ``(sample, gt_gaussians, gt_ids)``; targets are rendered from the
    ground truth by the brute-force reference, so re-rendering reproduces
    them exactly. Depth validity is transmittance < 0.5; the semantic-id map
    holds the id of the highest-weight Gaussian per pixel (-1 where invalid).
    """
    if spec.n_blobs < 1 or spec.views < 1:
        raise InvalidInputError("need at least one blob and one view")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(spec.seed)))
    gt = []
    for _ in range(spec.n_blobs):
        quat = rng.normal(size=4)
        quat /= np.linalg.norm(quat)
        gt.append(GaussianPrimitive(
            mean=_f32_exact(rng.uniform(0.25, 0.75, size=3)),
            quat=_f32_exact(quat),
            scale=_f32_exact(rng.uniform(0.04, 0.09, size=3)),
            color=_f32_exact(rng.uniform(0.25, 1.0, size=3)),
            opacity=float(_f32_exact(rng.uniform(0.7, 0.95))),
        ))
    gt_ids = np.arange(spec.n_blobs, dtype=np.int64)

    # point cloud on the 1-sigma ellipsoid surfaces with analytic normals
    coords, attrs = [], []
    for g in gt:
        u = rng.normal(size=(spec.points_per_blob, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        from .geometry import quat_to_rotation

        rot = quat_to_rotation(g.quat)
        pts = g.mean + (u * g.scale) @ rot.T
        normals = (u / g.scale) @ rot.T
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        coords.append(pts)
        attrs.append(np.concatenate(
            [np.tile(g.color, (spec.points_per_blob, 1)), normals], axis=1))
    cloud = PointCloud(_f32_exact(np.clip(np.concatenate(coords), 0.0, 1.0)),
                       _f32_exact(np.concatenate(attrs)))

    # cameras on a ring around the cube center
    center = np.full(3, 0.5)
    fx = 1.2 * spec.width
    views = []
    onehot = np.eye(spec.n_blobs)
    tagged = [GaussianPrimitive(mean=g.mean, quat=g.quat, scale=g.scale,
                                color=g.color, opacity=g.opacity, feature=onehot[k])
              for k, g in enumerate(gt)]
    cfg = TileConfig(background=np.zeros(3))
    for k in range(spec.views):
        theta = 2.0 * np.pi * k / spec.views
        elev = 0.35 + 0.25 * (k % 3) / 2.0
        radius = 1.8
        eye = center + radius * np.array([
            np.cos(elev) * np.cos(theta), np.cos(elev) * np.sin(theta), np.sin(elev)])
        rot, trans = _look_at(eye, center)
        cam = Camera(fx=fx, fy=fx, cx=(spec.width - 1) / 2.0, cy=(spec.height - 1) / 2.0,
                     rotation=rot, translation=trans,
                     width=spec.width, height=spec.height)
        out = brute_force_render(tagged, cam, cfg)
        validity = out.transmittance < 0.5
        weights = out.feature  # (H, W, n_blobs): per-Gaussian blend weights
        idmap = np.where(validity, gt_ids[np.argmax(weights, axis=2)], -1)
        views.append(View(camera=cam,
                          color=quantize_u8(np.clip(out.color, 0.0, 1.0)) / 255.0,
                          depth=_f32_exact(out.depth),
                          validity=validity,
                          semantic_ids=idmap.astype(np.int64)))
    return SceneSample(cloud=cloud, views=views), gt, gt_ids


def pack_gaussians(gaussians, ids):
    rows = [np.concatenate([g.mean, g.quat, g.scale, g.color, [g.opacity], [float(i)]])
            for g, i in zip(gaussians, ids)]
    return np.stack(rows)


def unpack_gaussians(table):
    table = np.asarray(table, dtype=np.float64)
    gaussians, ids = [], []
    for row in table:
        gaussians.append(GaussianPrimitive(mean=row[0:3], quat=row[3:7], scale=row[7:10],
                                           color=np.clip(row[10:13], 0.0, 1.0),
                                           opacity=row[13]))
        ids.append(int(row[14]))
    return gaussians, np.asarray(ids, dtype=np.int64)


def write_scene_dir(dirpath, sample, gt=None, gt_ids=None):
    """Write a scene directory; returns the written file names."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    written = []

    def note(name):
        written.append(name)
        return dirpath / name

    write_scene(sample.cloud, note("scene.gxsc"))
    write_cameras([v.camera for v in sample.views], note("cameras.txt"))
    for k, view in enumerate(sample.views):
        write_image_ppm(view.color, note(f"view_{k:03d}.ppm"))
        write_tensor(view.depth, note(f"view_{k:03d}_depth.f32t"))
        write_tensor(view.validity.astype(np.float32), note(f"view_{k:03d}_valid.f32t"))
        if view.feat_target is not None:
            write_tensor(view.feat_target, note(f"view_{k:03d}_feat.f32t"))
        elif view.semantic_ids is not None:
            write_tensor(view.semantic_ids.astype(np.float32), note(f"view_{k:03d}_semid.f32t"))
    if gt is not None:
        write_tensor(pack_gaussians(gt, gt_ids), note("gt_gaussians.f32t"))
    return written


def load_scene_sample(dirpath):
    """Assemble a SceneSample from a scene directory."""
    dirpath = Path(dirpath)
    scene_path = dirpath / "scene.gxsc"
    if not scene_path.exists():
        raise FormatError(f"{dirpath}: missing scene.gxsc")
    cloud = read_scene(scene_path)
    cams = read_cameras(dirpath / "cameras.txt")
    views = []
    for k, cam in enumerate(cams):
        color = read_image_ppm(dirpath / f"view_{k:03d}.ppm")
        depth = read_tensor(dirpath / f"view_{k:03d}_depth.f32t").astype(np.float64)
        valid = read_tensor(dirpath / f"view_{k:03d}_valid.f32t") > 0.5
        feat_path = dirpath / f"view_{k:03d}_feat.f32t"
        sem_path = dirpath / f"view_{k:03d}_semid.f32t"
        feat = read_tensor(feat_path).astype(np.float64) if feat_path.exists() else None
        sem = read_tensor(sem_path).astype(np.int64) if sem_path.exists() else None
        if feat is None and sem is None:
            raise FormatError(f"{dirpath}: view {k} lacks both "
                              f"view_{k:03d}_feat.f32t and view_{k:03d}_semid.f32t")
        views.append(View(camera=cam, color=color, depth=depth, validity=valid,
                          feat_target=feat, semantic_ids=sem))
    return SceneSample(cloud=cloud, views=views, name=dirpath.name)


def load_gt_gaussians(dirpath):
    path = Path(dirpath) / "gt_gaussians.f32t"
    if not path.exists():
        raise FormatError(f"{dirpath}: missing gt_gaussians.f32t")
    return unpack_gaussians(read_tensor(path))


def find_scene_dirs(root):
    """A scene dir itself, or every child directory holding scene.gxsc."""
    root = Path(root)
    if (root / "scene.gxsc").exists():
        return [root]
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "scene.gxsc").exists())


# ---------------------------------------------------------------------------
# checkpoints


def _write_sections(path, magic, sections):
    blob = bytearray(magic)
    blob += struct.pack("<HI", FORMAT_VERSION, len(sections))
    for name, arr in sections.items():
        arr = np.asarray(arr)
        tag = _TAG_FOR.get(arr.dtype)
        if tag is None:
            raise InvalidInputError(f"unsupported dtype {arr.dtype} for section {name}")
        encoded = name.encode()
        blob += struct.pack("<H", len(encoded)) + encoded
        blob += struct.pack("<BB", tag, arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.astype(arr.dtype.newbyteorder("<")).tobytes()
    _atomic_write(path, bytes(blob))


def _read_sections(path, magic):
    sections = {}
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != magic:
            raise FormatError(f"{path}: bad magic, expected {magic.decode()}")
        version, count = struct.unpack("<HI", _read_exact(fh, 6, "header"))
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unknown checkpoint version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2, "section name"))
            name = _read_exact(fh, nlen, "section name").decode()
            tag, rank = struct.unpack("<BB", _read_exact(fh, 2, "section header"))
            if tag not in _DTYPE_TAGS:
                raise FormatError(f"{path}: unknown dtype tag {tag}")
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
            dtype = np.dtype(_DTYPE_TAGS[tag]).newbyteorder("<")
            count_elems = int(np.prod(dims)) if rank else 1
            payload = _read_exact(fh, dtype.itemsize * count_elems, f"section {name}")
            sections[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(
                _DTYPE_TAGS[tag])
    return sections


def checkpoint_save(model, state, path, grid=None):
    """Persist model parameters plus optimizer state for bit-exact resume."""
    dims = model.dims
    sections = {
        "meta.dims": np.array([dims.d_s, dims.d_o, dims.d_f, dims.d_star,
                               dims.enc_hidden, dims.head_hidden, dims.proj_hidden],
                              dtype=np.int64),
        "meta.prune_threshold": np.float64(model.decoder.prune_threshold),
        "meta.offset_cap": np.float64(-1.0 if model.decoder.offset_cap is None
                                      else model.decoder.offset_cap),
        "meta.step": np.int64(state.step),
    }
    if grid is not None:
        sections["meta.grid"] = np.array([grid.x, grid.y, grid.z], dtype=np.int64)
    for name, arr in model.flatten().items():
        sections[f"param.{name}"] = arr
    for name, arr in state.m.items():
        sections[f"adam_m.{name}"] = arr
    for name, arr in state.v.items():
        sections[f"adam_v.{name}"] = arr
    _write_sections(path, CHECKPOINT_MAGIC, sections)


def checkpoint_load(path):
    """Restore (model, optimizer state, grid or None) from
    :func:`checkpoint_save`."""
    sections = _read_sections(path, CHECKPOINT_MAGIC)
    d = sections["meta.dims"]
    dims = EncoderParams(d_s=int(d[0]), d_o=int(d[1]), d_f=int(d[2]), d_star=int(d[3]),
                         enc_hidden=int(d[4]), head_hidden=int(d[5]), proj_hidden=int(d[6]))
    cap = float(sections["meta.offset_cap"])
    model = init_model(dims, seed=0,
                       prune_threshold=float(sections["meta.prune_threshold"]),
                       offset_cap=None if cap < 0 else cap)
    flat = {name[len("param."):]: arr for name, arr in sections.items()
            if name.startswith("param.")}
    model.load_flat(flat)
    state = OptimizerState(step=int(sections["meta.step"]))
    for name, arr in model.flatten().items():
        key_m, key_v = f"adam_m.{name}", f"adam_v.{name}"
        if key_m not in sections or key_v not in sections:
            raise FormatError(f"{path}: missing optimizer moments for {name}")
        if sections[key_m].shape != arr.shape:
            raise FormatError(f"{path}: moment {name}: expected dims {arr.shape}, "
                              f"found {sections[key_m].shape}")
        state.m[name] = sections[key_m].astype(np.float64)
        state.v[name] = sections[key_v].astype(np.float64)
    grid = None
    if "meta.grid" in sections:
        g = sections["meta.grid"]
        grid = GridSpec(int(g[0]), int(g[1]), int(g[2]))
    return model, state, grid


# ---------------------------------------------------------------------------
# config files

CONFIG_SCHEMA = {
    "epochs": int,
    "lr": float,
    "beta1": float,
    "beta2": float,
    "weight_decay": float,
    "warmup_frac": float,
    "mask_ratio": float,
    "tau": float,
    "views_per_step": int,
    "grid": str,  # "X,Y,Z"
    "offset_cap": float,  # <= 0 selects the voxel-edge default
    "lambda_img": float,
    "lambda_dep": float,
    "lambda_sem": float,
    "seed": int,
    "d_s": int,
    "d_o": int,
    "d_f": int,
    "d_star": int,
    "enc_hidden": int,
    "head_hidden": int,
    "proj_hidden": int,
    "tile": int,
    "alpha_cutoff": float,
    "t_floor": float,
    "checkpoint_every": int,
    "log_every": int,
}


def parse_config(path):
    """Flat key=value parser; every key must appear in CONFIG_SCHEMA."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{ln}: expected key=value")
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in CONFIG_SCHEMA:
                raise FormatError(f"{path}:{ln}: unknown config key {key!r}")
            try:
                values[key] = CONFIG_SCHEMA[key](val.strip())
            except ValueError as exc:
                raise FormatError(f"{path}:{ln}: bad value for {key}: {exc}") from exc
    return values


def parse_grid(text):
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise InvalidInputError("grid must be 'X,Y,Z' or a single count")
    return GridSpec(int(parts[0]), int(parts[1]), int(parts[2]))
