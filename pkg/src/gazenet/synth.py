"""Deterministic synthetic eye images and the on-disk dataset format.

A dataset directory holds ``index.csv`` plus one 8-bit PGM per sample::

    filename,person_id,gaze_pitch,gaze_yaw,head_pitch,head_yaw
    p0_0.pgm,0,0.1234,-0.2345,0.01,0.2

Angles are radians.  Every random draw comes from a counter-based Philox
stream keyed by ``(seed, person[, sample])``, so any sample can be
regenerated on its own and the whole directory is byte-reproducible.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .geometry import GazeAngles, write_pgm

INDEX_HEADER = ["filename", "person_id", "gaze_pitch", "gaze_yaw", "head_pitch", "head_yaw"]

# stream tags keep person draws and sample draws apart
_PERSON_STREAM = 0x5045
_SAMPLE_STREAM = 0x5341

PERSON_RANGES: Dict[str, Tuple[float, float]] = {
    "skin_intensity": (0.35, 0.85),
    "sclera_intensity": (0.7, 1.0),
    "iris_intensity": (0.05, 0.45),
    "eye_aperture": (0.55, 1.0),
    "eye_scale": (0.85, 1.15),
    "eyelash_density": (0.0, 1.0),
}


def _stream(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


@dataclass(frozen=True)
class PersonParams:
    person_id: int
    skin_intensity: float
    sclera_intensity: float
    iris_intensity: float
    eye_aperture: float
    eye_scale: float
    eyelash_density: float


def sample_person(seed: int, person_id: int) -> PersonParams:
    rng = _stream(seed, _PERSON_STREAM, person_id)
    values = {name: float(rng.uniform(lo, hi)) for name, (lo, hi) in PERSON_RANGES.items()}
    return PersonParams(person_id=person_id, **values)


@dataclass(frozen=True)
class Quality:
    blur_sigma: float = 0.0
    contrast_gain: float = 1.0
    noise_std: float = 0.0


@dataclass(frozen=True)
class SampleLabel:
    gaze: GazeAngles
    head: Tuple[float, float] = (0.0, 0.0)
    quality: Quality = field(default_factory=Quality)


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    persons: int = 10
    samples_per_person: int = 300
    size: Tuple[int, int] = (48, 80)  # (height, width)
    gaze_range_deg: float = 40.0
    head_range_deg: float = 25.0
    blur_range: Tuple[float, float] = (0.0, 1.5)
    contrast_range: Tuple[float, float] = (0.6, 1.2)
    noise_range: Tuple[float, float] = (0.0, 0.04)


def check_size(size: Tuple[int, int]) -> None:
    h, w = size
    if h <= 0 or w <= 0 or 5 * h != 3 * w:
        raise ValueError(f"image size must have a 5:3 width:height ratio, got {w}x{h}")


def _coverage(signed_dist: np.ndarray) -> np.ndarray:
    """Approximate pixel coverage from a signed distance (negative inside), 1 px ramp."""
    return np.clip(0.5 - signed_dist, 0.0, 1.0)


def _ellipse_dist(x, y, cx, cy, a, b, cos_t, sin_t):
    """Approximate signed distance in px to an ellipse with semi-axis ``a`` along (cos_t, sin_t)."""
    dx, dy = x - cx, y - cy
    p = dx * cos_t + dy * sin_t
    q = -dx * sin_t + dy * cos_t
    b = max(b, 1e-3)
    k = np.sqrt((p / a) ** 2 + (q / b) ** 2)
    # scale the implicit form by a local radius so the 1 px ramp is roughly isotropic
    return (k - 1.0) * min(a, max(b, 1.0))


def render_clean(person: PersonParams, label: SampleLabel, size: Tuple[int, int]) -> np.ndarray:
    """The noiseless rendering in [0, 1] before the image-quality pipeline."""
    check_size(size)
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    pitch, yaw = label.gaze
    head_pitch, head_yaw = label.head
    s = person.eye_scale

    # eyeball: same projection as the gazemap, scaled to image pixels
    radius = 0.6 * h * s
    offset = radius * math.cos(math.asin(0.5))
    ex = w / 2.0 - 0.08 * w * math.sin(head_yaw)
    ey = h / 2.0 - 0.08 * h * math.sin(head_pitch)
    iu = ex - offset * math.sin(yaw) * math.cos(pitch)
    iv = ey - offset * math.sin(pitch)
    iris_r = 0.42 * radius
    du, dv = iu - ex, iv - ey
    dist = math.hypot(du, dv)
    ct, st = (du / dist, dv / dist) if dist > 1e-9 else (1.0, 0.0)
    minor = iris_r * abs(math.cos(pitch) * math.cos(yaw))

    # almond opening; lids follow vertical gaze, close a bit for upward head pitch
    aperture = person.eye_aperture * (1.0 - 0.35 * max(0.0, math.sin(head_pitch)))
    half_w = 0.46 * w * s
    oy = ey + 0.7 * (iv - ey)
    upper = 0.36 * h * s * aperture
    lower = 0.26 * h * s * aperture
    shear = 0.5 * math.sin(head_yaw)
    t = (xx - ex - shear * (yy - oy)) / half_w
    bulge = np.clip(1.0 - np.abs(t) ** 2.5, 0.0, None)
    y_top = oy - upper * bulge
    y_bot = oy + lower * bulge
    inside = np.minimum(yy - y_top, y_bot - yy)
    opening = _coverage(-inside) * (np.abs(t) < 1.0)

    # skin stays visibly brighter than the iris so the iris is the darkest structure
    skin_tone = max(person.skin_intensity, person.iris_intensity + 0.25)
    skin = skin_tone * (0.95 + 0.06 * yy / h)
    # soft shadow under the upper lid
    crease = np.exp(-((yy - (y_top - 0.12 * h * s)) / (0.05 * h)) ** 2) * (np.abs(t) < 1.1)
    skin = skin * (1.0 - 0.1 * crease)

    sclera = person.sclera_intensity * (0.88 + 0.12 * bulge)
    iris_cov = _coverage(_ellipse_dist(xx, yy, iu, iv, minor, iris_r, ct, st))
    pupil_cov = _coverage(_ellipse_dist(xx, yy, iu, iv, 0.45 * minor, 0.45 * iris_r, ct, st))
    rr = np.sqrt((xx - iu) ** 2 + (yy - iv) ** 2) / iris_r
    # darker limbal ring towards the rim
    iris = person.iris_intensity * (1.0 - 0.35 * np.clip(rr, 0.0, 1.0) ** 2)
    pupil = 0.2 * person.iris_intensity
    eye = sclera * (1.0 - iris_cov) + iris * iris_cov
    eye = eye * (1.0 - pupil_cov) + pupil * pupil_cov
    # glint from a fixed light source
    glint = np.exp(-((xx - iu - 0.3 * iris_r) ** 2 + (yy - iv + 0.3 * iris_r) ** 2) / (0.02 * iris_r ** 2 + 0.5))
    eye = np.clip(eye + 0.6 * glint * iris_cov, 0.0, 1.0)

    img = skin * (1.0 - opening) + eye * opening
    if person.eyelash_density > 0:
        lash = np.exp(-((yy - y_top + 0.5) / (0.5 + 0.7 * person.eyelash_density)) ** 2) * (np.abs(t) < 1.0)
        img = img * (1.0 - 0.35 * person.eyelash_density * lash)
    return img


def apply_quality(img: np.ndarray, quality: Quality, rng: Optional[np.random.Generator]) -> np.ndarray:
    """Contrast about the mean, Gaussian blur, additive noise, clamp, 8-bit quantization."""
    out = img.mean() + quality.contrast_gain * (img - img.mean())
    if quality.blur_sigma > 0:
        out = ndimage.gaussian_filter(out, quality.blur_sigma, mode="nearest")
    if quality.noise_std > 0:
        if rng is None:
            raise ValueError("noise requested without a random stream")
        out = out + rng.normal(0.0, quality.noise_std, out.shape)
    return np.rint(np.clip(out, 0.0, 1.0) * 255.0).astype(np.uint8)


def render_eye(person: PersonParams, label: SampleLabel, size: Tuple[int, int] = (48, 80),
               noise_seed: int = 0) -> np.ndarray:
    """Render one 8-bit grayscale eye image of shape ``size`` (height, width)."""
    clean = render_clean(person, label, size)
    return apply_quality(clean, label.quality, _stream(noise_seed))


_STRATA_STREAM = 0x5354


def _strata(cfg: SynthConfig, person_id: int) -> np.ndarray:
    """Per-person stratum assignment: ``samples_per_person x 4`` (gaze pitch/yaw, head pitch/yaw)."""
    rng = _stream(cfg.seed, _STRATA_STREAM, person_id, cfg.samples_per_person)
    return np.stack([rng.permutation(cfg.samples_per_person) for _ in range(4)], axis=1)


def sample_label(cfg: SynthConfig, rng: np.random.Generator, strata: Optional[Sequence[int]] = None) -> SampleLabel:
    """Draw one label; with ``strata`` the motion angles are Latin-hypercube stratified.

    Each stratified draw is still uniform over its range, but a person's
    samples cover the range evenly, so per-person label means sit near zero.
    """
    u = rng.uniform(0.0, 1.0, 4)
    if strata is not None:
        u = (np.asarray(strata, dtype=np.float64) + u) / cfg.samples_per_person
    g = math.radians(cfg.gaze_range_deg)
    hd = math.radians(cfg.head_range_deg)
    lo_hi = np.array([g, g, hd, hd])
    pg, yg, ph, yh = (-lo_hi + 2.0 * lo_hi * u).tolist()
    quality = Quality(blur_sigma=float(rng.uniform(*cfg.blur_range)),
                      contrast_gain=float(rng.uniform(*cfg.contrast_range)),
                      noise_std=float(rng.uniform(*cfg.noise_range)))
    return SampleLabel(GazeAngles(pg, yg), (ph, yh), quality)


def render_sample(cfg: SynthConfig, person_id: int, sample: int,
                  strata: Optional[np.ndarray] = None) -> Tuple[np.ndarray, SampleLabel]:
    """Render sample ``sample`` of ``person_id``; pure function of the arguments."""
    if strata is None:
        strata = _strata(cfg, person_id)
    rng = _stream(cfg.seed, _SAMPLE_STREAM, person_id, sample)
    label = sample_label(cfg, rng, strata[sample])
    person = sample_person(cfg.seed, person_id)
    clean = render_clean(person, label, cfg.size)
    return apply_quality(clean, label.quality, rng), label


class IndexRow(NamedTuple):
    filename: str
    person_id: int
    gaze_pitch: float
    gaze_yaw: float
    head_pitch: float
    head_yaw: float


class Dataset:
    """Index rows plus image access; images come back as float grids in [0, 1]."""

    def __init__(self, root: Union[str, Path], rows: Sequence[IndexRow], size: Tuple[int, int],
                 images: Optional[np.ndarray] = None):
        self.root = Path(root)
        self.rows = list(rows)
        self.size = size
        self._images = images

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def person_ids(self) -> List[int]:
        return sorted({r.person_id for r in self.rows})

    @property
    def gaze(self) -> np.ndarray:
        return np.array([(r.gaze_pitch, r.gaze_yaw) for r in self.rows], dtype=np.float64).reshape(-1, 2)

    @property
    def head(self) -> np.ndarray:
        return np.array([(r.head_pitch, r.head_yaw) for r in self.rows], dtype=np.float64).reshape(-1, 2)

    def images(self) -> np.ndarray:
        """All images stacked as float32 ``N x H x W``; read from disk once and cached."""
        if self._images is None:
            h, w = self.size
            out = np.empty((len(self.rows), h, w), dtype=np.float32)
            for i, r in enumerate(self.rows):
                out[i] = read_pgm(self.root / r.filename, expect=(h, w)) / np.float32(255.0)
            self._images = out
        return self._images

    def image(self, i: int) -> np.ndarray:
        return self.images()[i]

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = list(indices)
        imgs = self._images[idx] if self._images is not None else None
        return Dataset(self.root, [self.rows[i] for i in idx], self.size, imgs)

    def select_persons(self, person_ids) -> "Dataset":
        keep = set(person_ids)
        return self.subset([i for i, r in enumerate(self.rows) if r.person_id in keep])


def dark_centroid(image: np.ndarray, fraction: float = 0.1) -> Tuple[float, float]:
    """Centroid ``(u, v)`` of the darkest ``fraction`` of pixels, weighted by darkness.

    Darkness is measured from the selection threshold, so pixels right at the
    threshold carry no weight and the result varies smoothly with the image.
    """
    img = np.asarray(image, dtype=np.float64)
    thr = np.quantile(img, fraction)
    wts = np.where(img <= thr, thr - img, 0.0)
    total = wts.sum()
    if total <= 0:
        raise ValueError("image has no dark region (constant below the threshold)")
    rows, cols = np.mgrid[0:img.shape[0], 0:img.shape[1]] + 0.5
    return float((wts * cols).sum() / total), float((wts * rows).sum() / total)


def generate_dataset(cfg: SynthConfig, out_dir: Union[str, Path]) -> Dataset:
    if cfg.persons < 2:
        raise ValueError(f"need at least 2 persons, got {cfg.persons}")
    check_size(cfg.size)
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {out_dir}: {e}") from e
    rows = []
    images = []
    for p in range(cfg.persons):
        strata = _strata(cfg, p)
        for k in range(cfg.samples_per_person):
            img, label = render_sample(cfg, p, k, strata)
            name = f"p{p}_{k}.pgm"
            write_pgm(out_dir / name, img)
            images.append(img)
            rows.append(IndexRow(name, p, label.gaze.pitch, label.gaze.yaw, *label.head))
    with open(out_dir / "index.csv", "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(INDEX_HEADER)
        for r in rows:
            wr.writerow([r.filename, r.person_id] + [repr(float(v)) for v in r[2:]])
    stack = np.stack(images).astype(np.float32) / np.float32(255.0)
    return Dataset(out_dir, rows, cfg.size, stack)


def read_pgm(path: Union[str, Path], expect: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Read an 8-bit binary PGM as ``uint8 H x W``."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"missing image file {path}") from None
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: wrong PGM magic {tokens[0]!r}, expected b'P5'")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ValueError(f"{path}: malformed PGM header") from None
    if maxval != 255:
        raise ValueError(f"{path}: unsupported PGM maxval {maxval}")
    pos += 1  # single whitespace after maxval
    pixels = data[pos:]
    if len(pixels) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes, found {len(pixels)}")
    if expect is not None and (h, w) != tuple(expect):
        raise ValueError(f"{path}: image is {w}x{h}, expected {expect[1]}x{expect[0]}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)


def load_dataset(root: Union[str, Path]) -> Dataset:
    """Read and validate ``index.csv`` and every image it names."""
    root = Path(root)
    index = root / "index.csv"
    if not index.is_file():
        raise FileNotFoundError(f"no index.csv in {root}")
    rows: List[IndexRow] = []
    images = []
    seen = set()
    size = None
    with open(index, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != INDEX_HEADER:
            raise ValueError(f"{index}: header must be {','.join(INDEX_HEADER)}, got {header}")
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(INDEX_HEADER):
                raise ValueError(f"{index} row {lineno}: expected {len(INDEX_HEADER)} fields, got {len(rec)}")
            try:
                pid = int(rec[1])
                vals = [float(v) for v in rec[2:]]
            except ValueError:
                raise ValueError(f"{index} row {lineno}: unparseable value in {rec}") from None
            if not all(math.isfinite(v) for v in vals):
                raise ValueError(f"{index} row {lineno}: non-finite angle in {rec}")
            name = rec[0]
            if name in seen:
                raise ValueError(f"{index} row {lineno}: duplicate filename {name}")
            seen.add(name)
            img = read_pgm(root / name)
            if size is None:
                size = img.shape
            elif img.shape != size:
                raise ValueError(f"{root / name}: image is {img.shape[1]}x{img.shape[0]}, "
                                 f"expected {size[1]}x{size[0]}")
            rows.append(IndexRow(name, pid, *vals))
            images.append(img)
    if not rows:
        raise ValueError(f"{index}: no samples")
    stack = np.stack(images).astype(np.float32) / np.float32(255.0)
    return Dataset(root, rows, tuple(size), stack)
