"""Volume containers, synthetic two-domain phantoms, and the patch pipeline.

Volumes hold float64 voxel grids in memory; on disk they are stored as
float32 ("WDGV1"), masks as u8 labels ("WDGM1").  Phantom geometry depends
only on the seed, so the same seed rendered in both domains yields one mask
with two appearances.  Every stage is a pure function of (inputs, seed).
"""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .engine.serialize import SerializationError, _read_exact

VOLUME_MAGIC = b"WDGV1"
MASK_MAGIC = b"WDGM1"

MAX_DIM = 2**31
MAX_VOXELS = 2**33

DEFAULT_PATCH = (5, 32, 32)

_DOMAIN_CODES = {"X": 0, "Y": 1}


def _check_dims(dims) -> tuple:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise ValueError(f"dims must be three positive ints, got {dims}")
    return dims


@dataclass(frozen=True)
class Volume:
    """A (D, H, W) voxel grid with physical spacing in millimetres."""

    dims: tuple
    spacing: tuple
    voxels: np.ndarray

    def __post_init__(self):
        dims = _check_dims(self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise ValueError(f"spacing must be three positive floats, got {spacing}")
        vox = np.asarray(self.voxels, dtype=np.float64).reshape(dims)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "voxels", vox)


@dataclass(frozen=True)
class Mask:
    """Binary labels paired with a Volume: 0 background, 1 foreground."""

    dims: tuple
    labels: np.ndarray

    def __post_init__(self):
        dims = _check_dims(self.dims)
        lab = np.asarray(self.labels).reshape(dims)
        if not np.isin(lab, (0, 1)).all():
            raise ValueError("mask labels must be 0 or 1")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "labels", lab.astype(np.uint8))


@dataclass(frozen=True)
class PhantomSpec:
    """Recipe for one synthetic scan: geometry seed plus domain appearance.

    patch is the window geometry the volume is destined to feed; dims must
    cover it.
    """

    seed: int
    domain: str
    dims: tuple = (8, 32, 32)
    patch: tuple = DEFAULT_PATCH
    organ_count: tuple = (1, 3)
    depth_radius_frac: tuple = (0.28, 0.4)
    plane_radius_frac: tuple = (0.15, 0.25)
    invert: bool = False
    bias_strength: float = 0.0
    noise_sigma: float = 0.01
    gamma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "dims", _check_dims(self.dims))
        object.__setattr__(self, "patch", _check_dims(self.patch))
        if self.domain not in _DOMAIN_CODES:
            raise ValueError(f"domain must be one of {sorted(_DOMAIN_CODES)}, got {self.domain!r}")
        if any(p < q for p, q in zip(self.dims, self.patch)):
            raise ValueError(f"dims {self.dims} smaller than the patch {self.patch}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        lo, hi = self.organ_count
        if not (1 <= lo <= hi):
            raise ValueError(f"bad organ count range {self.organ_count}")
        d, h, w = self.dims
        max_rz = self.depth_radius_frac[1] * d
        max_rp = self.plane_radius_frac[1] * min(h, w)
        if 2 * max_rz > d - 1 or 2 * max_rp > min(h, w) - 1:
            raise ValueError(
                f"dims {self.dims} too small for ellipsoid radius ranges "
                f"(max depth radius {max_rz:.2f}, max plane radius {max_rp:.2f})"
            )


def default_phantom_spec(seed: int, domain: str, dims=(8, 32, 32), patch=None) -> PhantomSpec:
    """Domain presets: X is clean, Y is inverted, biased, noisy, and gamma-warped."""
    patch = tuple(min(p, d) for p, d in zip(DEFAULT_PATCH, dims)) if patch is None else tuple(patch)
    base = PhantomSpec(seed=seed, domain=domain, dims=dims, patch=patch)
    if domain == "Y":
        return replace(base, invert=True, bias_strength=0.3, noise_sigma=0.05, gamma=1.4)
    return base


def _smooth_field(rng: np.random.Generator, dims, cell: int = 8) -> np.ndarray:
    """Low-frequency field in [-1, 1]: coarse noise blown up to full resolution."""
    coarse = [max(1, -(-d // cell)) + 1 for d in dims]
    grid = rng.uniform(-1.0, 1.0, size=coarse)
    out = grid
    for axis in range(3):
        out = np.repeat(out, cell, axis=axis)
    out = out[: dims[0], : dims[1], : dims[2]]
    # box-smooth once per axis to kill the block edges
    for axis in range(3):
        shifted = np.roll(out, 1, axis=axis)
        out = 0.5 * (out + shifted)
    return out


def generate_phantom(spec: PhantomSpec) -> tuple:
    """Render one (Volume, Mask) pair.

    Geometry (organ placement, hence the mask) is a function of the seed
    alone; appearance mixes in the domain, so matched seeds across X and Y
    share a mask while the images differ.
    """
    d, h, w = spec.dims
    geo = np.random.default_rng([spec.seed, 11])
    count = int(geo.integers(spec.organ_count[0], spec.organ_count[1] + 1))
    zz, yy, xx = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")

    inside = np.zeros(spec.dims, dtype=bool)
    organ_weight = np.zeros(spec.dims, dtype=np.float64)
    plane = min(h, w)
    for _ in range(count):
        rz = geo.uniform(*spec.depth_radius_frac) * d
        rh = geo.uniform(*spec.plane_radius_frac) * plane
        rw = geo.uniform(*spec.plane_radius_frac) * plane
        cz = geo.uniform(rz, d - 1 - rz)
        ch = geo.uniform(rh, h - 1 - rh)
        cw = geo.uniform(rw, w - 1 - rw)
        q = ((zz - cz) / rz) ** 2 + ((yy - ch) / rh) ** 2 + ((xx - cw) / rw) ** 2
        inside |= q <= 1.0
        organ_weight = np.maximum(organ_weight, np.clip((1.2 - q) / 0.6, 0.0, 1.0))

    mask = Mask(spec.dims, inside.astype(np.uint8))

    app = np.random.default_rng([spec.seed, _DOMAIN_CODES[spec.domain], 23])
    texture = _smooth_field(app, spec.dims)
    img = 0.25 + 0.08 * texture
    img = img + (0.75 + 0.1 * float(app.uniform(-1, 1)) - img) * organ_weight
    if spec.invert:
        img = 1.0 - img
    if spec.bias_strength:
        img = img * (1.0 + spec.bias_strength * _smooth_field(app, spec.dims))
    if spec.noise_sigma:
        img = img + app.normal(0.0, spec.noise_sigma, size=spec.dims)
    img = np.clip(img, 0.0, 1.0)
    if spec.gamma != 1.0:
        img = img**spec.gamma
    # snap to the on-disk float32 grid so write/read round trips are bit-exact
    vox = img.astype(np.float32).astype(np.float64)
    return Volume(spec.dims, (1.0, 1.0, 1.0), vox), mask


# -- normalization ------------------------------------------------------------------


def normalize(volume: Volume) -> Volume:
    """Shift/scale to zero mean and unit population variance; constant volumes
    (std below 1e-8) become all zeros."""
    v = volume.voxels
    std = float(v.std())
    if std < 1e-8:
        out = np.zeros_like(v)
    else:
        out = (v - v.mean()) / std
    return Volume(volume.dims, volume.spacing, out)


# -- patch pipeline ----------------------------------------------------------------


def _patch_grid(dims, patch, stride):
    for size, p, s in zip(dims, patch, stride):
        if p > size:
            raise ValueError(f"patch {patch} larger than volume {dims}")
        if p <= 0 or s <= 0:
            raise ValueError(f"patch and stride must be positive, got {patch}, {stride}")
    return [range(0, size - p + 1, s) for size, p, s in zip(dims, patch, stride)]


def extract_patch_at(volume: Volume, origin, patch) -> Volume:
    """Crop one patch window at the given origin."""
    sl = tuple(slice(o, o + p) for o, p in zip(origin, patch))
    for o, p, size in zip(origin, patch, volume.dims):
        if o < 0 or o + p > size:
            raise ValueError(f"window {origin}+{patch} outside volume {volume.dims}")
    return Volume(tuple(patch), volume.spacing, volume.voxels[sl].copy())


def extract_patches(volume: Volume, mask: Mask, patch, stride=None) -> list:
    """Sliding-window crops in raster order (depth-major), with origins.

    Returns [(Volume patch, Mask patch, origin)].  Only full windows are
    produced; with stride = patch the windows tile the covered region.
    """
    if mask.dims != volume.dims:
        raise ValueError(f"mask dims {mask.dims} do not match volume dims {volume.dims}")
    patch = tuple(int(p) for p in patch)
    stride = patch if stride is None else tuple(int(s) for s in stride)
    grid = _patch_grid(volume.dims, patch, stride)
    out = []
    for oz in grid[0]:
        for oy in grid[1]:
            for ox in grid[2]:
                origin = (oz, oy, ox)
                sl = tuple(slice(o, o + p) for o, p in zip(origin, patch))
                out.append(
                    (
                        Volume(patch, volume.spacing, volume.voxels[sl].copy()),
                        Mask(patch, mask.labels[sl].copy()),
                        origin,
                    )
                )
    return out


def reassemble_patches(pieces, dims) -> np.ndarray:
    """Inverse of extract_patches for float maps: average overlapping windows.

    pieces: iterable of (array shaped like a patch, origin).  Voxels no
    window covers are left at zero.
    """
    acc = np.zeros(dims, dtype=np.float64)
    cover = np.zeros(dims, dtype=np.int64)
    for arr, origin in pieces:
        arr = np.asarray(arr, dtype=np.float64)
        sl = tuple(slice(o, o + s) for o, s in zip(origin, arr.shape))
        acc[sl] += arr
        cover[sl] += 1
    np.divide(acc, cover, out=acc, where=cover > 0)
    return acc


# -- augmentation -------------------------------------------------------------------


def draw_transform(seed) -> tuple:
    """(flip_h, flip_v, k) with independent 50% flips and k*90 deg, k in 0..3."""
    rng = np.random.default_rng(seed)
    return bool(rng.random() < 0.5), bool(rng.random() < 0.5), int(rng.integers(0, 4))


def apply_transform(arr: np.ndarray, transform) -> np.ndarray:
    """Apply (flip_h, flip_v, k) to a (D, H, W) array in the axial plane."""
    flip_h, flip_v, k = transform
    if k % 2 == 1 and arr.shape[1] != arr.shape[2]:
        raise ValueError(f"90 deg rotation needs square H, W; got {arr.shape[1:]}")
    out = arr
    if flip_h:
        out = np.flip(out, axis=2)
    if flip_v:
        out = np.flip(out, axis=1)
    if k:
        out = np.rot90(out, k=k, axes=(1, 2))
    return np.ascontiguousarray(out)


def augment(patch: Volume, mask: Mask, seed) -> tuple:
    """Same random flip/rotation applied to both members of the pair."""
    if patch.dims != mask.dims:
        raise ValueError(f"patch dims {patch.dims} do not match mask dims {mask.dims}")
    t = draw_transform(seed)
    return (
        Volume(patch.dims, patch.spacing, apply_transform(patch.voxels, t)),
        Mask(mask.dims, apply_transform(mask.labels, t)),
    )


# -- cross-validation ----------------------------------------------------------------


def kfold_split(ids, k: int = 5, seed: int = 0) -> list:
    """Seeded shuffle into k near-equal folds; returns [(train_ids, test_ids)]."""
    ids = list(ids)
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if k > len(ids):
        raise ValueError(f"k={k} exceeds the {len(ids)} available ids")
    order = list(np.random.default_rng([int(seed), 31]).permutation(len(ids)))
    shuffled = [ids[i] for i in order]
    base, extra = divmod(len(ids), k)
    folds, start = [], 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        folds.append(shuffled[start : start + size])
        start += size
    return [(sum(folds[:i], []) + sum(folds[i + 1 :], []), folds[i]) for i in range(k)]


# -- file formats --------------------------------------------------------------------


def _read_header_dims(f, what: str) -> tuple:
    offset = f.tell()
    dims = struct.unpack("<III", _read_exact(f, 12, f"{what} dims"))
    if any(d == 0 or d > MAX_DIM for d in dims):
        raise SerializationError(f"bad {what} dims {dims}", offset)
    if dims[0] * dims[1] * dims[2] > MAX_VOXELS:
        raise SerializationError(f"{what} dims {dims} overflow the element limit", offset)
    return dims


def _read_payload(f, nbytes: int, what: str) -> bytes:
    offset = f.tell()
    buf = f.read(nbytes)
    if len(buf) != nbytes:
        raise SerializationError(f"truncated {what}: expected {nbytes} bytes, got {len(buf)}", offset)
    return buf


def write_volume(path, volume: Volume) -> None:
    with open(path, "wb") as f:
        f.write(VOLUME_MAGIC)
        f.write(struct.pack("<B", 0))  # dtype code: float32
        f.write(struct.pack("<III", *volume.dims))
        f.write(struct.pack("<fff", *volume.spacing))
        f.write(volume.voxels.astype("<f4").tobytes())


def read_volume(path) -> Volume:
    with open(path, "rb") as f:
        magic = _read_exact(f, 5, "volume magic")
        if magic != VOLUME_MAGIC:
            raise SerializationError(f"bad volume magic {magic!r}", 0)
        code = _read_exact(f, 1, "dtype code")[0]
        if code != 0:
            raise SerializationError(f"unknown volume dtype code {code}", 5)
        dims = _read_header_dims(f, "volume")
        spacing = struct.unpack("<fff", _read_exact(f, 12, "spacing"))
        n = dims[0] * dims[1] * dims[2]
        raw = _read_payload(f, 4 * n, "voxel data")
        extra = f.read(1)
        if extra:
            raise SerializationError("trailing bytes after voxel data", f.tell() - 1)
    vox = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(dims)
    return Volume(dims, spacing, vox)


def write_mask(path, mask: Mask) -> None:
    with open(path, "wb") as f:
        f.write(MASK_MAGIC)
        f.write(struct.pack("<III", *mask.dims))
        f.write(mask.labels.astype(np.uint8).tobytes())


def read_mask(path) -> Mask:
    with open(path, "rb") as f:
        magic = _read_exact(f, 5, "mask magic")
        if magic != MASK_MAGIC:
            raise SerializationError(f"bad mask magic {magic!r}", 0)
        dims = _read_header_dims(f, "mask")
        n = dims[0] * dims[1] * dims[2]
        payload_at = f.tell()
        raw = _read_payload(f, n, "label data")
        extra = f.read(1)
        if extra:
            raise SerializationError("trailing bytes after label data", f.tell() - 1)
    labels = np.frombuffer(raw, dtype=np.uint8)
    bad = np.nonzero(labels > 1)[0]
    if bad.size:
        raise SerializationError(f"non-binary mask value {labels[bad[0]]}", payload_at + int(bad[0]))
    return Mask(dims, labels.reshape(dims))


# -- prefetch -----------------------------------------------------------------------


def prefetch_workers() -> int:
    """Worker cap from WDGDA_THREADS; default 1 (synchronous)."""
    raw = os.environ.get("WDGDA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as e:
        raise ValueError(f"WDGDA_THREADS must be an integer, got {raw!r}") from e
    return max(1, n)


def prefetch_map(fn, items, workers=None):
    """Map fn over items with optional thread prefetch.

    The yielded sequence always equals the single-threaded order: results are
    merged by item index, workers only overlap the computation.
    """
    items = list(items)
    n = prefetch_workers() if workers is None else max(1, int(workers))
    if n == 1 or len(items) <= 1:
        for it in items:
            yield fn(it)
        return
    with ThreadPoolExecutor(max_workers=n) as pool:
        window = []
        idx = 0
        for _ in range(min(2 * n, len(items))):
            window.append(pool.submit(fn, items[idx]))
            idx += 1
        while window:
            fut = window.pop(0)
            if idx < len(items):
                window.append(pool.submit(fn, items[idx]))
                idx += 1
            yield fut.result()
