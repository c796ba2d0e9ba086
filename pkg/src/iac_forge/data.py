"""Synthetic segmentation data, manifests and train/val/search splits."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import InvalidArgumentError

MANIFEST_VERSION = 1
TASKS = ("shapes_easy", "skip_dependent")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    task: str = "shapes_easy"
    n_samples: int = 100
    H: int = 64
    W: int = 64
    classes: int = 1
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise InvalidArgumentError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.n_samples < 1 or self.H < 8 or self.W < 8 or self.classes < 1:
            raise InvalidArgumentError("n_samples, H, W and classes must be positive (H, W >= 8)")
        if self.noise < 0:
            raise InvalidArgumentError("noise must be non-negative")


@dataclass
class DatasetManifest:
    root: Path
    samples: list
    image_shape: tuple
    mask_shape: tuple
    version: int = MANIFEST_VERSION
    info: dict = field(default_factory=dict)

    @property
    def ids(self):
        return [s["id"] for s in self.samples]

    def entry(self, sample_id):
        for s in self.samples:
            if s["id"] == sample_id:
                return s
        raise InvalidArgumentError(f"sample {sample_id!r} not in manifest")

    def to_json(self):
        doc = {
            "version": self.version,
            "image_shape": list(self.image_shape),
            "mask_shape": list(self.mask_shape),
            "info": self.info,
            "samples": self.samples,
        }
        return json.dumps(doc, indent=1, sort_keys=True)


def load_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        doc = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise InvalidArgumentError(f"{path}: cannot read manifest ({exc})") from None
    if doc.get("version") != MANIFEST_VERSION:
        raise InvalidArgumentError(f"{path}: unsupported manifest version {doc.get('version')!r}")
    samples = doc.get("samples", [])
    ids = [s["id"] for s in samples]
    if len(set(ids)) != len(ids):
        raise InvalidArgumentError(f"{path}: duplicate sample ids")
    root = path.parent
    for s in samples:
        for key in ("image_path", "mask_path"):
            if not (root / s[key]).is_file():
                raise InvalidArgumentError(f"{path}: missing file {root / s[key]}")
    return DatasetManifest(root, samples, tuple(doc["image_shape"]), tuple(doc["mask_shape"]),
                           doc["version"], doc.get("info", {}))


# -- synthetic generation -------------------------------------------------

def _ellipse(yy, xx, rng, H, W):
    cy, cx = rng.uniform(0.2, 0.8) * H, rng.uniform(0.2, 0.8) * W
    ry, rx = rng.uniform(0.08, 0.22) * H, rng.uniform(0.08, 0.22) * W
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _rectangle(yy, xx, rng, H, W):
    y0, x0 = rng.uniform(0.1, 0.6) * H, rng.uniform(0.1, 0.6) * W
    h, w = rng.uniform(0.12, 0.3) * H, rng.uniform(0.12, 0.3) * W
    return (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)


def _shapes_easy(rng, spec):
    H, W = spec.H, spec.W
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    mask = np.zeros((spec.classes, H, W), dtype=np.uint8)
    image = np.zeros((H, W))
    for c in range(spec.classes):
        for _ in range(rng.integers(1, 3)):
            shape = _ellipse if rng.random() < 0.5 else _rectangle
            mask[c] |= shape(yy, xx, rng, H, W)
        image += (c + 1) / spec.classes * mask[c]
    image += rng.normal(0.0, spec.noise, size=(H, W))
    return image[None].astype(np.float32), mask


def _skip_dependent(rng, spec):
    """Thin curves and dots over a strong smooth background.

    The targets are one to two pixels wide, so they vanish after the first
    downsampling; recovering them needs the full-resolution skip path.
    """
    H, W = spec.H, spec.W
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    mask = np.zeros((spec.classes, H, W), dtype=np.uint8)
    # low-frequency clutter at several times the target contrast
    bg = np.zeros((H, W))
    for _ in range(3):
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        s = rng.uniform(0.15, 0.35) * H
        bg += rng.uniform(-1.5, 1.5) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    image = bg.copy()
    for c in range(spec.classes):
        amp = 1.0 + 0.5 * c
        m = np.zeros((H, W), dtype=bool)
        for _ in range(rng.integers(2, 4)):
            # ellipse outline, one pixel thick
            cy, cx = rng.uniform(0.25, 0.75) * H, rng.uniform(0.25, 0.75) * W
            ry, rx = rng.uniform(0.1, 0.25) * H, rng.uniform(0.1, 0.25) * W
            r = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
            m |= np.abs(r - 1.0) * min(ry, rx) < 0.6
        for _ in range(rng.integers(3, 7)):
            cy, cx = rng.integers(2, H - 2), rng.integers(2, W - 2)
            m[cy - 1:cy + 1, cx - 1:cx + 1] = True
        mask[c] = m
        image += amp * m
    image += rng.normal(0.0, spec.noise, size=(H, W))
    return image[None].astype(np.float32), mask


def generate_synthetic(spec, out_dir):
    """Write ``images/``, ``masks/`` and ``manifest.json`` under ``out_dir``."""
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    make = _shapes_easy if spec.task == "shapes_easy" else _skip_dependent
    width = max(4, len(str(spec.n_samples - 1)))
    samples = []
    for i in range(spec.n_samples):
        sid = f"s{i:0{width}d}"
        image, mask = make(rng, spec)
        ip, mp = f"images/{sid}.npy", f"masks/{sid}.npy"
        np.save(root / ip, image)
        np.save(root / mp, mask)
        samples.append({"id": sid, "image_path": ip, "mask_path": mp})
    manifest = DatasetManifest(root, samples, (1, spec.H, spec.W),
                               (spec.classes, spec.H, spec.W), info={"synthetic": asdict(spec)})
    (root / "manifest.json").write_text(manifest.to_json())
    return manifest


# -- splits ---------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    train_dt: tuple
    val_dt: tuple
    train_search_dt: tuple
    val_search_dt: tuple
    train_fraction: float = 0.8
    search_fraction: float = 0.5
    seed: int = 0

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def make_splits(manifest, train_fraction=0.8, search_fraction=0.5, seed=0):
    """Shuffle ids by ``seed``; 80/20 train/val, then two equal search subsets of train."""
    ids = list(manifest.ids if isinstance(manifest, DatasetManifest) else manifest)
    if len(ids) < 10:
        raise InvalidArgumentError(f"need at least 10 samples, got {len(ids)}")
    for name, v in (("train_fraction", train_fraction), ("search_fraction", search_fraction)):
        if not 0.0 < v < 1.0:
            raise InvalidArgumentError(f"{name} must lie in (0, 1), got {v}")
    if search_fraction > 0.5:
        raise InvalidArgumentError("search_fraction > 0.5 cannot give two disjoint equal subsets")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_train = int(round(train_fraction * len(ids)))
    n_train = min(max(n_train, 1), len(ids) - 1)
    train, val = shuffled[:n_train], shuffled[n_train:]
    n_search = math.floor(search_fraction * len(train))
    if n_search < 1:
        raise InvalidArgumentError(
            f"search_fraction {search_fraction} of {len(train)} training samples leaves empty search subsets"
        )
    return SplitSpec(tuple(train), tuple(val), tuple(train[:n_search]),
                     tuple(train[n_search:2 * n_search]), train_fraction, search_fraction, seed)


# -- loading --------------------------------------------------------------

def _fit(arr, H, W):
    """Center-crop or zero-pad the trailing two axes to ``H x W``."""
    h, w = arr.shape[-2:]
    if h > H:
        top = (h - H) // 2
        arr = arr[..., top:top + H, :]
    if w > W:
        left = (w - W) // 2
        arr = arr[..., :, left:left + W]
    h, w = arr.shape[-2:]
    if h < H or w < W:
        pad = [(0, 0)] * (arr.ndim - 2)
        pad += [((H - h) // 2, H - h - (H - h) // 2), ((W - w) // 2, W - w - (W - w) // 2)]
        arr = np.pad(arr, pad)
    return arr


def _read(path):
    try:
        return np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise InvalidArgumentError(f"{path}: cannot parse array ({exc})") from None


def load_sample(manifest, sample_id, size=None):
    """Return ``(image, mask)`` tensors: image z-scored per channel, mask binary float."""
    entry = manifest.entry(sample_id)
    H, W = size if size is not None else manifest.image_shape[-2:]
    image = _read(manifest.root / entry["image_path"]).astype(np.float64)
    mask = _read(manifest.root / entry["mask_path"])
    if image.ndim == 2:
        image = image[None]
    if mask.ndim == 2:
        mask = mask[None]
    image = _fit(image, H, W)
    mask = _fit(mask, H, W)
    mean = image.mean(axis=(1, 2), keepdims=True)
    std = image.std(axis=(1, 2), keepdims=True)
    image = (image - mean) / np.where(std > 0, std, 1.0)
    return (torch.from_numpy(image.astype(np.float32)),
            torch.from_numpy((mask > 0).astype(np.float32)))


def load_arrays(manifest, ids, size=None):
    """Stack samples into ``(N, C, H, W)`` image and mask tensors."""
    if not ids:
        raise InvalidArgumentError("empty split")
    pairs = [load_sample(manifest, i, size) for i in ids]
    return torch.stack([p[0] for p in pairs]), torch.stack([p[1] for p in pairs])
