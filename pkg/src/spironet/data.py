"""Synthetic curvilinear-vessel data, augmentation, and PGM I/O.

Samples are dark vessel trees on a bright, smoothly shaded background with
Gaussian noise and optional vessel-like distractor arcs that appear in the
image but not in the mask. Geometry is a random branching tree of quadratic
Bezier segments rasterized with 1-px anti-aliased edges; the mask thresholds
the vessel coverage at 0.5.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Sample",
    "SynthConfig",
    "BezierSegment",
    "sample_tree",
    "rasterize_segments",
    "generate_sample",
    "generate_dataset",
    "augment",
    "rotate_pair",
    "write_pgm",
    "read_pgm",
    "PgmError",
    "split_dataset",
    "write_dataset",
    "load_dataset",
]


@dataclass
class Sample:
    image: np.ndarray  # float in [0, 1], H x W
    mask: np.ndarray  # uint8 in {0, 1}, H x W
    id: str
    provenance: str = "synthetic"

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} differ")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("mask must be binary")


@dataclass(frozen=True)
class SynthConfig:
    size: int = 64
    n_branches: int = 6
    width_range: tuple[float, float] = (1.6, 3.6)
    noise_sigma: float = 0.05
    bg_gradient: float = 0.15
    n_distractors: int = 2
    seed: int = 0

    def validate(self) -> None:
        if self.size < 32:
            raise ValueError(f"size {self.size} must be >= 32")
        if self.width_range[0] < 1.0:
            raise ValueError("vessel widths must be >= 1 px")


@dataclass
class BezierSegment:
    p0: np.ndarray
    p1: np.ndarray  # control point
    p2: np.ndarray
    width: float

    def point(self, t):
        t = np.asarray(t, dtype=np.float64)[..., None]
        return (1 - t) ** 2 * self.p0 + 2 * t * (1 - t) * self.p1 + t * t * self.p2

    def arc_length(self, n: int = 512) -> float:
        pts = self.point(np.linspace(0.0, 1.0, n + 1))
        return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))


def sample_tree(cfg: SynthConfig, rng: np.random.Generator) -> list[BezierSegment]:
    """Random branching tree: a trunk crossing the frame plus child arcs."""
    s = cfg.size
    w_lo, w_hi = cfg.width_range
    segments: list[BezierSegment] = []

    a = rng.uniform(0.05, 0.3, size=2) * s
    b = rng.uniform(0.7, 0.95, size=2) * s
    if rng.random() < 0.5:
        a[0], b[0] = b[0], a[0]
    mid = (a + b) / 2 + rng.normal(0, 0.12 * s, size=2)
    trunk = BezierSegment(a, mid, b, width=rng.uniform(0.6 * w_hi, w_hi))
    segments.append(trunk)

    frontier = [trunk]
    while len(segments) < cfg.n_branches and frontier:
        parent = frontier.pop(rng.integers(len(frontier)))
        for _ in range(int(rng.integers(1, 3))):
            if len(segments) >= cfg.n_branches:
                break
            t0 = rng.uniform(0.25, 0.85)
            start = parent.point(t0)
            tangent = parent.point(min(t0 + 0.05, 1.0)) - start
            nrm = np.linalg.norm(tangent)
            tangent = tangent / nrm if nrm > 0 else np.array([1.0, 0.0])
            ang = rng.uniform(0.35, 1.2) * rng.choice([-1.0, 1.0])
            rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
            direction = rot @ tangent
            length = rng.uniform(0.18, 0.4) * s
            end = start + direction * length
            bow = start + direction * length / 2 + rng.normal(0, 0.06 * s, size=2)
            child = BezierSegment(
                start, bow, end, width=max(w_lo, parent.width * rng.uniform(0.55, 0.85))
            )
            segments.append(child)
            frontier.append(child)
    return segments


def rasterize_segments(segments: list[BezierSegment], size: int) -> np.ndarray:
    """Anti-aliased coverage in [0, 1]: 1 inside each band, linear 1-px falloff."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cover = np.zeros((size, size))
    for seg in segments:
        n_pts = max(16, int(4 * seg.arc_length(128)))
        pts = seg.point(np.linspace(0.0, 1.0, n_pts))
        x0 = max(0, int(pts[:, 0].min() - seg.width - 2))
        x1 = min(size, int(pts[:, 0].max() + seg.width + 3))
        y0 = max(0, int(pts[:, 1].min() - seg.width - 2))
        y1 = min(size, int(pts[:, 1].max() + seg.width + 3))
        if x0 >= x1 or y0 >= y1:
            continue
        px = xx[y0:y1, x0:x1]
        py = yy[y0:y1, x0:x1]
        d2 = np.full(px.shape, np.inf)
        for chunk in np.array_split(pts, max(1, n_pts // 256)):
            dx = px[..., None] - chunk[:, 0]
            dy = py[..., None] - chunk[:, 1]
            np.minimum(d2, (dx * dx + dy * dy).min(axis=-1), out=d2)
        local = np.clip(seg.width / 2 + 0.5 - np.sqrt(d2), 0.0, 1.0)
        np.maximum(cover[y0:y1, x0:x1], local, out=cover[y0:y1, x0:x1])
    return cover


def generate_sample(cfg: SynthConfig, rng: np.random.Generator, sample_id: str = "synth") -> Sample:
    cfg.validate()
    s = cfg.size
    vessels = sample_tree(cfg, rng)
    cover_v = rasterize_segments(vessels, s)

    distractors = []
    for _ in range(cfg.n_distractors):
        p0 = rng.uniform(0, s, size=2)
        direction = rng.normal(size=2)
        direction /= max(np.linalg.norm(direction), 1e-9)
        length = rng.uniform(0.2, 0.5) * s
        p2 = p0 + direction * length
        p1 = (p0 + p2) / 2 + rng.normal(0, 0.08 * s, size=2)
        distractors.append(BezierSegment(p0, p1, p2, width=rng.uniform(1.0, 2.5)))
    cover_d = rasterize_segments(distractors, s) if distractors else np.zeros((s, s))

    yy, xx = np.mgrid[0:s, 0:s] / max(s - 1, 1)
    direction = rng.uniform(0, 2 * np.pi)
    plane = (xx - 0.5) * np.cos(direction) + (yy - 0.5) * np.sin(direction)
    bg = 0.85 + cfg.bg_gradient * plane

    depth_v = rng.uniform(0.4, 0.6)
    depth_d = rng.uniform(0.15, 0.3)
    img = bg - depth_v * cover_v - depth_d * cover_d
    if cfg.noise_sigma > 0:
        img = img + rng.normal(0, cfg.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    mask = (cover_v >= 0.5).astype(np.uint8)
    return Sample(image=img, mask=mask, id=sample_id)


def generate_dataset(cfg: SynthConfig, count: int) -> list[Sample]:
    """Each sample gets its own RNG stream (seed, index), so order never matters."""
    out = []
    for i in range(count):
        rng = np.random.default_rng([cfg.seed, i])
        out.append(generate_sample(cfg, rng, sample_id=f"{i:05d}"))
    return out


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def rotate_pair(image: np.ndarray, mask: np.ndarray, angle_deg: float) -> tuple[np.ndarray, np.ndarray]:
    """Rotate about the center: bilinear for the image, nearest for the mask, zero fill.

    Positive angles turn content clockwise in the row-down raster frame
    (+90 degrees equals ``np.rot90(a, k=-1)``).
    """
    h, w = image.shape
    theta = np.deg2rad(angle_deg)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse map: source coordinates that land on each output pixel
    c, s = np.cos(theta), np.sin(theta)
    sx = c * (xx - cx) + s * (yy - cy) + cx
    sy = -s * (xx - cx) + c * (yy - cy) + cy

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0

    def sample_at(img, ys, xs):
        inside = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
        vals = np.zeros(ys.shape)
        vals[inside] = img[ys[inside], xs[inside]]
        return vals

    img_out = (
        sample_at(image, y0, x0) * (1 - fy) * (1 - fx)
        + sample_at(image, y0, x0 + 1) * (1 - fy) * fx
        + sample_at(image, y0 + 1, x0) * fy * (1 - fx)
        + sample_at(image, y0 + 1, x0 + 1) * fy * fx
    )

    xn = np.rint(sx).astype(np.int64)
    yn = np.rint(sy).astype(np.int64)
    inside = (yn >= 0) & (yn < h) & (xn >= 0) & (xn < w)
    mask_out = np.zeros_like(mask)
    mask_out[inside] = mask[yn[inside], xn[inside]]
    return img_out, mask_out


def augment(sample: Sample, rng: np.random.Generator, max_angle: float = 20.0) -> Sample:
    """Independent horizontal/vertical flips (p=0.5) and a uniform rotation."""
    img, mask = sample.image, sample.mask
    if rng.random() < 0.5:
        img, mask = img[:, ::-1], mask[:, ::-1]
    if rng.random() < 0.5:
        img, mask = img[::-1, :], mask[::-1, :]
    angle = rng.uniform(-max_angle, max_angle)
    img, mask = rotate_pair(np.ascontiguousarray(img), np.ascontiguousarray(mask), angle)
    return Sample(image=img, mask=mask.astype(np.uint8), id=sample.id, provenance=sample.provenance)


# ---------------------------------------------------------------------------
# PGM I/O
# ---------------------------------------------------------------------------

class PgmError(ValueError):
    """Malformed PGM file."""


def write_pgm(path: str | Path, array: np.ndarray) -> None:
    """Binary 8-bit PGM; values in [0, 1] quantized round-half-up."""
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim != 2:
        raise PgmError(f"expected 2-D array, got shape {arr.shape}")
    if arr.min() < 0 or arr.max() > 1:
        raise PgmError("values must lie in [0, 1]")
    q = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary PGM, normalizing to [0, 1]. Handles comment lines."""
    raw = Path(path).read_bytes()
    if raw[:2] != b"P5":
        raise PgmError(f"{path}: not a binary PGM (magic {raw[:2]!r})")
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        if pos >= len(raw):
            raise PgmError(f"{path}: truncated header")
        ch = raw[pos : pos + 1]
        if ch == b"#":
            nl = raw.find(b"\n", pos)
            if nl < 0:
                raise PgmError(f"{path}: unterminated comment")
            pos = nl + 1
        elif ch.isspace():
            pos += 1
        elif ch.isdigit():
            end = pos
            while end < len(raw) and raw[end : end + 1].isdigit():
                end += 1
            fields.append(int(raw[pos:end]))
            pos = end
        else:
            raise PgmError(f"{path}: unexpected byte {ch!r} in header")
    w, h, maxval = fields
    if not (0 < maxval < 256):
        raise PgmError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace after maxval
    payload = raw[pos : pos + w * h]
    if len(payload) != w * h:
        raise PgmError(f"{path}: payload has {len(payload)} bytes, expected {w * h}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).astype(np.float64) / maxval


# ---------------------------------------------------------------------------
# dataset layout
# ---------------------------------------------------------------------------

def split_dataset(samples: list, train_frac: float, seed: int) -> tuple[list, list]:
    """Deterministic shuffled split; both sides non-empty."""
    if not 0 < train_frac < 1:
        raise ValueError(f"train_frac {train_frac} must be in (0, 1)")
    if len(samples) < 2:
        raise ValueError("need at least 2 samples to split")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_train = int(round(train_frac * len(samples)))
    n_train = min(max(n_train, 1), len(samples) - 1)
    train = [samples[i] for i in order[:n_train]]
    test = [samples[i] for i in order[n_train:]]
    return train, test


def write_dataset(root: str | Path, train: list[Sample], test: list[Sample]) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for split, group in (("train", train), ("test", test)):
        for s in group:
            write_pgm(root / "images" / f"{s.id}.pgm", s.image)
            write_pgm(root / "masks" / f"{s.id}.pgm", s.mask.astype(np.float64))
            rows.append((s.id, split))
    rows.sort()
    with open(root / "manifest.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "split"])
        w.writerows(rows)


def load_dataset(root: str | Path) -> dict[str, list[Sample]]:
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.csv under {root}")
    out: dict[str, list[Sample]] = {"train": [], "test": []}
    with open(manifest, newline="") as f:
        for row in csv.DictReader(f):
            img = read_pgm(root / "images" / f"{row['id']}.pgm")
            mask_f = read_pgm(root / "masks" / f"{row['id']}.pgm")
            mask = (mask_f >= 0.5).astype(np.uint8)
            out.setdefault(row["split"], []).append(
                Sample(image=img, mask=mask, id=row["id"], provenance="file")
            )
    return out
