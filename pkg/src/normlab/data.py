"""Shortcut-square digit datasets, IDX ingestion and the corruption suite."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .rng import stream

SPLITS = ("Both", "RedOnly", "BlueOnly", "None")
CORRUPTIONS = ("GaussianNoise", "ImpulseNoise", "BoxBlur", "Occlusion", "Contrast")
RED = (1.0, 0.0, 0.0)
BLUE = (0.0, 0.0, 1.0)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx])


@dataclass
class ShortcutDatasetConfig:
    source: str = "synthetic"  # "synthetic" or "idx"
    idx_images: str | None = None
    idx_labels: str | None = None
    classes: tuple[int, int] = (2, 3)
    image_size: int = 28
    channels: int = 3
    noise_sigma: float = 0.1
    noise_per_channel: bool = False
    square_size: int = 4
    red_square_pos: tuple[int, int] = (2, 2)
    blue_square_pos: tuple[int, int] = (22, 22)
    jitter: int = 2
    wobble: float = 1.0
    n_train: int = 512
    n_test: int = 256
    seed: int = 0

    def square_regions(self) -> dict[str, tuple[slice, slice]]:
        s = self.square_size
        (ry, rx), (by, bx) = self.red_square_pos, self.blue_square_pos
        return {
            "red": (slice(ry, ry + s), slice(rx, rx + s)),
            "blue": (slice(by, by + s), slice(bx, bx + s)),
        }

    def validate(self) -> None:
        s, n = self.square_size, self.image_size
        boxes = []
        for y, x in (self.red_square_pos, self.blue_square_pos):
            if not (0 <= y and 0 <= x and y + s <= n and x + s <= n):
                raise ValueError(f"square at {(y, x)} of size {s} does not fit a {n}x{n} image")
            boxes.append((y, x))
        (y1, x1), (y2, x2) = boxes
        if abs(y1 - y2) < s and abs(x1 - x2) < s:
            raise ValueError("red and blue squares overlap")
        if self.channels != 3:
            raise ValueError("square painting needs 3 channels")
        if self.source not in ("synthetic", "idx"):
            raise ValueError(f"unknown source {self.source!r}")
        if self.source == "synthetic" and tuple(self.classes) != (2, 3):
            raise ValueError("synthetic glyphs exist only for digits 2 and 3")

    def region_mask(self) -> np.ndarray:
        """Boolean (H, W) mask of the union of both square regions."""
        m = np.zeros((self.image_size, self.image_size), dtype=bool)
        for sl in self.square_regions().values():
            m[sl] = True
        return m


# ---------------------------------------------------------------------------
# synthetic glyphs

_STROKES = {
    2: [[(9, 8), (7, 11), (6, 14), (7, 17), (9, 19), (12, 18), (16, 13), (21, 8), (21, 20)]],
    3: [
        [(7, 8), (6, 13), (7, 17), (9, 19), (12, 17), (13, 12)],
        [(13, 12), (14, 17), (17, 19), (20, 17), (21, 13), (20, 8)],
    ],
}


def _segment_distance(py, px, a, b):
    ay, ax = a
    by, bx = b
    dy, dx = by - ay, bx - ax
    t = np.clip(((py - ay) * dy + (px - ax) * dx) / (dy * dy + dx * dx), 0.0, 1.0)
    return np.hypot(py - (ay + t * dy), px - (ax + t * dx))


def _render(strokes, size: int, thickness: float) -> np.ndarray:
    py, px = np.mgrid[0:size, 0:size].astype(float)
    d = np.full((size, size), np.inf)
    for pts in strokes:
        for a, b in zip(pts[:-1], pts[1:]):
            d = np.minimum(d, _segment_distance(py, px, a, b))
    return (d <= thickness).astype(np.float64)


def glyph(digit: int, size: int = 28, thickness: float = 1.2) -> np.ndarray:
    """Binary (size, size) template of a handwritten-looking digit."""
    if digit not in _STROKES:
        raise ValueError(f"no synthetic glyph for digit {digit}")
    k = size / 28.0
    return _render([[(y * k, x * k) for y, x in st] for st in _STROKES[digit]], size, thickness * k)


def _jittered_glyph(digit: int, size: int, rng: np.random.Generator, shift: int, wobble: float) -> np.ndarray:
    """One random instance: perturbed control points, random thickness, small affine map, translation."""
    k = size / 28.0
    c = (size - 1) / 2.0
    ang = np.deg2rad(rng.uniform(-12.0, 12.0))
    sc = rng.uniform(0.9, 1.1)
    shear = rng.uniform(-0.2, 0.2)
    a = sc * np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]]) @ np.array([[1.0, 0.0], [shear, 1.0]])
    dy, dx = rng.integers(-shift, shift + 1, size=2)
    strokes = []
    for st in _STROKES[digit]:
        pts = np.asarray(st, dtype=float) * k + rng.normal(0.0, wobble * k, size=(len(st), 2))
        pts = (pts - c) @ a.T + c + (dy, dx)
        strokes.append([tuple(p) for p in pts])
    # strokes shared between segments of one digit must stay connected
    if len(strokes) == 2:
        strokes[1][0] = strokes[0][-1]
    return _render(strokes, size, rng.uniform(0.8, 1.8) * k)


def synthetic_digits(cfg: ShortcutDatasetConfig, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Balanced grayscale digits (n, H, W) with labels 0/1 in alternating order."""
    labels = np.arange(n) % 2
    imgs = np.stack([_jittered_glyph(cfg.classes[y], cfg.image_size, rng, cfg.jitter, cfg.wobble) for y in labels])
    return imgs, labels.astype(np.int64)


# ---------------------------------------------------------------------------
# IDX


def _read_idx(path, magic: int, ndim: int) -> tuple[tuple[int, ...], bytes]:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise IdxError(f"cannot read IDX file {path}: {e}") from e
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxError(f"{path}: truncated header ({len(raw)} bytes, need {header})")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise IdxError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims))
    payload = raw[header:]
    if len(payload) != need:
        raise IdxError(f"{path}: payload has {len(payload)} bytes, header {dims} implies {need}")
    return dims, payload


def load_idx(images_path, labels_path=None) -> tuple[np.ndarray, np.ndarray | None]:
    """Read MNIST-style IDX images (scaled to [0, 1]) and optional labels."""
    dims, payload = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    images = np.frombuffer(payload, dtype=np.uint8).reshape(dims).astype(np.float64) / 255.0
    labels = None
    if labels_path is not None:
        (count,), lp = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
        labels = np.frombuffer(lp, dtype=np.uint8).astype(np.int64)
        if labels.size and labels.max() > 9:
            raise IdxError(f"{labels_path}: label out of range ({int(labels.max())})")
        if count != dims[0]:
            raise IdxError(f"image count {dims[0]} != label count {count}")
    return images, labels


def write_idx_images(path, images: np.ndarray) -> None:
    arr = np.asarray(images, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, *arr.shape) + arr.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    arr = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, arr.shape[0]) + arr.tobytes())


def _idx_digits(cfg: ShortcutDatasetConfig, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    images, labels = load_idx(cfg.idx_images, cfg.idx_labels)
    if labels is None:
        raise IdxError("idx source needs a label file")
    if images.shape[1:] != (cfg.image_size, cfg.image_size):
        raise IdxError(f"IDX images are {images.shape[1:]}, config expects {cfg.image_size}")
    per = []
    for c in cfg.classes:
        idx = np.flatnonzero(labels == c)
        if len(idx) < (n + 1) // 2:
            raise IdxError(f"only {len(idx)} samples of digit {c}, need {(n + 1) // 2}")
        per.append(rng.permutation(idx)[: (n + 1) // 2])
    order = np.empty(n, dtype=np.int64)
    order[0::2] = per[0][: len(order[0::2])]
    order[1::2] = per[1][: len(order[1::2])]
    return images[order], (np.arange(n) % 2).astype(np.int64)


# ---------------------------------------------------------------------------


def paint(base: np.ndarray, labels: np.ndarray, cfg: ShortcutDatasetConfig, red: bool, blue: bool) -> np.ndarray:
    out = base.copy()
    regions = cfg.square_regions()
    pos = labels == 1
    for on, key, color in ((red, "red", RED), (blue, "blue", BLUE)):
        if not on:
            continue
        ys, xs = regions[key]
        for ch, v in enumerate(color):
            out[pos, ch, ys, xs] = v
    return np.clip(out, 0.0, 1.0)


def generate_shortcut_dataset(cfg: ShortcutDatasetConfig) -> dict[str, Dataset]:
    """Train set (squares on class 1) plus the Both/RedOnly/BlueOnly/None test splits."""
    cfg.validate()
    rng = stream(cfg.seed, "dataset")
    n = cfg.n_train + cfg.n_test
    if cfg.source == "synthetic":
        gray, labels = synthetic_digits(cfg, n, rng)
    else:
        gray, labels = _idx_digits(cfg, n, rng)
    # disjoint base images: first n_train for training, the rest for every eval split
    train_idx = np.arange(cfg.n_train)
    test_idx = np.arange(cfg.n_train, n)
    test_labels = labels[test_idx]
    if cfg.noise_per_channel:
        noisy = np.repeat(gray[:, None], cfg.channels, axis=1)
        noisy = noisy + rng.normal(0.0, cfg.noise_sigma, size=noisy.shape)
    else:
        noisy = gray + rng.normal(0.0, cfg.noise_sigma, size=gray.shape)
        noisy = np.repeat(noisy[:, None], cfg.channels, axis=1)
    out = {"train": Dataset(paint(noisy[train_idx], labels[train_idx], cfg, True, True), labels[train_idx])}
    flags = {"Both": (True, True), "RedOnly": (True, False), "BlueOnly": (False, True), "None": (False, False)}
    for name in SPLITS:
        out[name] = Dataset(paint(noisy[test_idx], test_labels, cfg, *flags[name]), test_labels.copy())
    return out


def export_dataset(datasets: dict[str, Dataset], path, cfg: ShortcutDatasetConfig | None = None) -> Path:
    """Write every split as raw little-endian float64/int64 arrays plus a JSON manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {"splits": {}, "config": asdict(cfg) if cfg else None}
    for name, ds in datasets.items():
        (path / f"{name}.images.f64").write_bytes(np.ascontiguousarray(ds.images, dtype="<f8").tobytes())
        (path / f"{name}.labels.i64").write_bytes(np.ascontiguousarray(ds.labels, dtype="<i8").tobytes())
        manifest["splits"][name] = {"images_shape": list(ds.images.shape), "count": len(ds)}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def import_dataset(path) -> dict[str, Dataset]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    out = {}
    for name, meta in manifest["splits"].items():
        imgs = np.frombuffer((path / f"{name}.images.f64").read_bytes(), dtype="<f8")
        labels = np.frombuffer((path / f"{name}.labels.i64").read_bytes(), dtype="<i8")
        out[name] = Dataset(imgs.reshape(meta["images_shape"]).astype(np.float64), labels.astype(np.int64))
    return out


# ---------------------------------------------------------------------------
# corruptions


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int = 3

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ValueError(f"unknown corruption kind {self.kind!r}; expected one of {CORRUPTIONS}")
        if not 1 <= self.severity <= 5:
            raise ValueError(f"severity must be in 1..5, got {self.severity}")


def apply_corruption(images: np.ndarray, spec: CorruptionSpec, seed: int) -> np.ndarray:
    """Corrupt a (N, C, H, W) batch in [0, 1]; deterministic in (seed, kind, severity)."""
    x = np.asarray(images, dtype=np.float64)
    s = spec.severity
    rng = stream(seed, "corruption", spec.kind, s)
    n, c, h, w = x.shape
    if spec.kind == "GaussianNoise":
        out = x + rng.normal(0.0, 0.05 * s, size=x.shape)
    elif spec.kind == "ImpulseNoise":
        out = x.copy()
        hit = rng.random((n, 1, h, w)) < 0.02 * s
        salt = rng.random((n, 1, h, w)) < 0.5
        out = np.where(hit, np.broadcast_to(salt, x.shape).astype(np.float64), out)
    elif spec.kind == "BoxBlur":
        k = min(2 * s - 1, h, w)
        out = uniform_filter(x, size=(1, 1, k, k), mode="nearest")
    elif spec.kind == "Occlusion":
        side = min(2 + 2 * s, h, w)
        out = x.copy()
        ys = rng.integers(0, h - side + 1, size=n)
        xs = rng.integers(0, w - side + 1, size=n)
        for i in range(n):
            out[i, :, ys[i]:ys[i] + side, xs[i]:xs[i] + side] = 0.5
    else:
        out = (x - 0.5) * (1.0 - 0.15 * s) + 0.5
    return np.clip(out, 0.0, 1.0)
