"""Image-quality metrics and moving-average robustness curves.

Records carry four motion factors (gaze and head pitch/yaw, radians) and two
image-quality factors (RMS contrast, Laplacian sharpness).  A robustness
curve for one factor sorts the records by it and averages the angular error
over sliding windows; for motion factors the other three motion factors are
first held near their medians.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

MOTION_FACTORS = ("gaze_pitch", "gaze_yaw", "head_pitch", "head_yaw")
QUALITY_FACTORS = ("rms_contrast", "sharpness")
FACTORS = MOTION_FACTORS + QUALITY_FACTORS

# scales the median absolute deviation to a standard-deviation estimate for normal data
MAD_TO_STD = 1.482602218505602

CURVE_HEADER = ["factor_value", "mean_error_deg", "window_size"]
RECORD_HEADER = ["sample_id", "person_id", "gaze_pitch", "gaze_yaw", "head_pitch", "head_yaw",
                 "pred_pitch", "pred_yaw", "error_deg", "contrast", "sharpness"]


def rms_contrast(image: np.ndarray) -> float:
    """Population standard deviation of the pixel intensities."""
    img = np.asarray(image, dtype=np.float64)
    if img.size == 0:
        raise ValueError("contrast of an empty image")
    # shifting by one pixel value changes nothing mathematically but makes a
    # constant image come out as exactly zero
    return float((img - img.flat[0]).std())


def laplacian_valid(image: np.ndarray) -> np.ndarray:
    """Image filtered with the normalized 4-neighbour Laplacian, valid region only."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 3 or img.shape[1] < 3:
        raise ValueError(f"sharpness needs a 2-D image of at least 3x3, got shape {img.shape}")
    img = img - img.flat[0]  # exact zeros for constant input, as in rms_contrast
    c = img[1:-1, 1:-1]
    return (4.0 * c - img[:-2, 1:-1] - img[2:, 1:-1] - img[1:-1, :-2] - img[1:-1, 2:]) / 6.0


def laplacian_sharpness(image: np.ndarray) -> float:
    return float(laplacian_valid(image).std())


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    person_id: int
    gaze_pitch: float
    gaze_yaw: float
    head_pitch: float
    head_yaw: float
    pred_pitch: float
    pred_yaw: float
    angular_error: float  # degrees
    rms_contrast: float
    sharpness: float

    def factor(self, name: str) -> float:
        if name not in FACTORS:
            raise KeyError(f"unknown factor {name!r}; choose from {FACTORS}")
        return getattr(self, name)


@dataclass(frozen=True)
class CurvePoint:
    factor_value: float
    mean_error_deg: float
    window_size: int


@dataclass
class RobustnessCurve:
    factor: str
    points: List[CurvePoint]
    records_used: int


class IsolationError(ValueError):
    """Median isolation left no records."""


def _median_mad(values: np.ndarray) -> Tuple[float, float]:
    med = float(np.median(values))
    return med, MAD_TO_STD * float(np.median(np.abs(values - med)))


def isolation_bounds(reference: Sequence[SampleRecord], target: str,
                     mad_multiplier: float = 1.0) -> Dict[str, Tuple[float, float]]:
    """Allowed ``(low, high)`` interval for every motion factor other than ``target``."""
    if target not in FACTORS:
        raise KeyError(f"unknown factor {target!r}; choose from {FACTORS}")
    if target in QUALITY_FACTORS:
        return {}
    bounds = {}
    for f in MOTION_FACTORS:
        if f == target:
            continue
        med, mad = _median_mad(np.array([r.factor(f) for r in reference]))
        bounds[f] = (med - mad_multiplier * mad, med + mad_multiplier * mad)
    return bounds


def median_isolate(records: Sequence[SampleRecord], target: str, mad_multiplier: float = 1.0,
                   reference: Optional[Sequence[SampleRecord]] = None) -> List[SampleRecord]:
    """Keep records whose other motion factors are within ``mad_multiplier`` MADs of their medians.

    The MAD is scaled to be consistent with a standard deviation.  Medians and
    MADs come from ``reference`` (default: ``records``); passing the same
    reference again makes the operation idempotent.  Image-quality targets keep
    every record.
    """
    records = list(records)
    if len(records) < 3:
        raise ValueError(f"median isolation needs at least 3 records, got {len(records)}")
    if mad_multiplier < 0:
        raise ValueError(f"mad_multiplier must be non-negative, got {mad_multiplier}")
    bounds = isolation_bounds(records if reference is None else list(reference), target, mad_multiplier)
    kept = [r for r in records
            if all(lo <= r.factor(f) <= hi for f, (lo, hi) in bounds.items())]
    if not kept:
        raise IsolationError(f"isolation for {target!r} with mad_multiplier={mad_multiplier} kept no records")
    return kept


def curve_point_count(count: int, window: int, stride: int) -> int:
    return (count - window) // stride + 1


def moving_average_curve(records: Sequence[SampleRecord], factor: str, window: int = 200,
                         stride: int = 20) -> RobustnessCurve:
    """Sliding-window mean of factor value and angular error over records sorted by ``factor``."""
    if window < 1 or stride < 1:
        raise ValueError(f"window and stride must be positive, got {window}, {stride}")
    n = len(records)
    if window > n:
        raise ValueError(f"window {window} exceeds the {n} available records for {factor!r}")
    # the full sort key makes the curve independent of input order, ties included
    ordered = sorted(records, key=lambda r: (r.factor(factor), r.angular_error, r.sample_id))
    vals = np.array([r.factor(factor) for r in ordered])
    errs = np.array([r.angular_error for r in ordered])
    cv = np.concatenate([[0.0], np.cumsum(vals)])
    ce = np.concatenate([[0.0], np.cumsum(errs)])
    points = []
    for start in range(0, n - window + 1, stride):
        end = start + window
        points.append(CurvePoint(float((cv[end] - cv[start]) / window),
                                 float((ce[end] - ce[start]) / window), window))
    return RobustnessCurve(factor, points, n)


def robustness_curves(records: Sequence[SampleRecord], window: int = 200, stride: int = 20,
                      mad_multiplier: float = 1.0,
                      factors: Iterable[str] = FACTORS) -> Dict[str, RobustnessCurve]:
    return {f: moving_average_curve(median_isolate(records, f, mad_multiplier), f, window, stride)
            for f in factors}


# ------------------------------------------------------------------ CSV i/o

def write_curve_csv(path: Union[str, Path], curve: RobustnessCurve) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(CURVE_HEADER)
        for p in curve.points:
            wr.writerow([repr(p.factor_value), repr(p.mean_error_deg), p.window_size])


def read_curve_csv(path: Union[str, Path]) -> List[CurvePoint]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != CURVE_HEADER:
            raise ValueError(f"{path}: header must be {','.join(CURVE_HEADER)}, got {header}")
        return [CurvePoint(float(a), float(b), int(c)) for a, b, c in reader]


def write_records_csv(path: Union[str, Path], records: Sequence[SampleRecord]) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(RECORD_HEADER)
        for r in records:
            wr.writerow([r.sample_id, r.person_id] + [repr(float(getattr(r, fl.name))) for fl in fields(r)[2:]])


def read_records_csv(path: Union[str, Path]) -> List[SampleRecord]:
    out = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != RECORD_HEADER:
            raise ValueError(f"{path}: header must be {','.join(RECORD_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(RECORD_HEADER):
                raise ValueError(f"{path} row {lineno}: expected {len(RECORD_HEADER)} fields, got {len(row)}")
            try:
                vals = [float(v) for v in row[2:]]
                rec = SampleRecord(row[0], int(row[1]), *vals)
            except ValueError:
                raise ValueError(f"{path} row {lineno}: unparseable value in {row}") from None
            if not all(math.isfinite(v) for v in vals) or rec.angular_error < 0:
                raise ValueError(f"{path} row {lineno}: invalid value in {row}")
            out.append(rec)
    return out
