"""Evaluation-time calibration machinery.

Implements confidence binning, the bin-based calibration errors (ECE, MCE,
ACE), proper scoring rules (Brier, NLL), post-hoc temperature scaling, the
harmonic-mean summary used for base/new class reporting, and deterministic
reliability-diagram export (CSV rows + SVG).

Conventions:

- all metrics are fractions in [0, 1] (or [0, 2] for Brier); multiply by 100
  for percent reporting
- equal-width bin ``g`` (1-indexed) covers the half-open interval
  ``((g-1)/G, g/G]``; a confidence of exactly 0 goes to bin 1
- MCE and ACE are taken over non-empty bins only (the gap of an empty bin
  is undefined)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .numerics import softmax_rows

PROB_CLAMP = 1e-12

TEMP_LOWER = 0.05
TEMP_UPPER = 10.0
TEMP_GRID_POINTS = 50
TEMP_REFINE_TOL = 1e-4


@dataclass(frozen=True)
class ProbBatch:
    """Per-sample predicted probability vectors plus true labels."""

    probs: np.ndarray  # n x C, rows on the simplex
    labels: np.ndarray  # n class indices

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if probs.ndim != 2 or probs.shape[0] == 0 or probs.shape[1] == 0:
            raise InvalidInputError("probs must be a non-empty n x C matrix")
        if labels.shape != (probs.shape[0],):
            raise InvalidInputError("labels must have one entry per row of probs")
        if not np.all(np.isfinite(probs)):
            raise InvalidInputError("probs contains non-finite entries")
        row_sums = probs.sum(axis=1)
        if np.any(np.abs(row_sums - 1.0) > 1e-9):
            raise InvalidInputError("probability rows must sum to 1 within 1e-9")
        if np.any(probs < 0):
            raise InvalidInputError("probs contains negative entries")
        if labels.min() < 0 or labels.max() >= probs.shape[1]:
            raise InvalidInputError("label out of range for class count")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.probs.shape[0]

    @property
    def class_count(self) -> int:
        return self.probs.shape[1]

    def confidences(self) -> np.ndarray:
        return self.probs.max(axis=1)

    def predictions(self) -> np.ndarray:
        # np.argmax breaks ties toward the lowest index, which is the
        # deterministic tie rule used everywhere in this package
        return self.probs.argmax(axis=1)


@dataclass(frozen=True)
class LogitBatch:
    """Raw (pre-softmax) scores plus true labels; input to temperature fitting."""

    logits: np.ndarray  # n x C
    labels: np.ndarray  # n class indices

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if logits.ndim != 2 or logits.shape[0] == 0 or logits.shape[1] == 0:
            raise InvalidInputError("logits must be a non-empty n x C matrix")
        if labels.shape != (logits.shape[0],):
            raise InvalidInputError("labels must have one entry per row of logits")
        if not np.all(np.isfinite(logits)):
            raise InvalidInputError("logits contains non-finite entries")
        if labels.min() < 0 or labels.max() >= logits.shape[1]:
            raise InvalidInputError("label out of range for class count")
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "labels", labels)


@dataclass(frozen=True)
class ReliabilityBins:
    """Per-bin sample counts and mean accuracy/confidence."""

    scheme: str  # "equal_width" | "equal_mass"
    counts: np.ndarray  # G integers
    accuracy: np.ndarray  # G floats (0.0 where the bin is empty)
    confidence: np.ndarray  # G floats (0.0 where the bin is empty)

    @property
    def bin_count(self) -> int:
        return len(self.counts)

    def midpoints(self) -> np.ndarray:
        g = self.bin_count
        return (np.arange(g) + 0.5) / g


@dataclass(frozen=True)
class CalibrationReport:
    """Accuracy plus the five calibration metrics, all as fractions."""

    accuracy: float
    ece: float
    mce: float
    ace: float
    brier: float
    nll: float
    bins: ReliabilityBins = field(repr=False)

    def scalars(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "ece": self.ece,
            "mce": self.mce,
            "ace": self.ace,
            "brier": self.brier,
            "nll": self.nll,
        }


@dataclass(frozen=True)
class TemperatureScaler:
    """Post-hoc scaler dividing logits by a fitted positive temperature."""

    temperature: float

    def __post_init__(self):
        if not (self.temperature > 0) or not np.isfinite(self.temperature):
            raise InvalidInputError(f"temperature must be positive, got {self.temperature}")


def _bin_index_equal_width(confidence: np.ndarray, bins: int) -> np.ndarray:
    """Map confidences to 0-based equal-width bin indices, interval ((g-1)/G, g/G]."""
    idx = np.ceil(confidence * bins).astype(np.int64) - 1
    return np.clip(idx, 0, bins - 1)


def _bin_index_equal_mass(confidence: np.ndarray, bins: int) -> np.ndarray:
    """Rank samples by confidence and cut into G near-equal-count groups.

    The first ``n mod G`` groups get one extra sample; ties are broken by
    sample order (stable sort) so the assignment is deterministic.
    """
    n = confidence.shape[0]
    order = np.argsort(confidence, kind="stable")
    base, extra = divmod(n, bins)
    sizes = np.full(bins, base, dtype=np.int64)
    sizes[:extra] += 1
    idx = np.empty(n, dtype=np.int64)
    idx[order] = np.repeat(np.arange(bins), sizes)
    return idx


def bin_predictions(batch: ProbBatch, bins: int, scheme: str = "equal_width") -> ReliabilityBins:
    """Group samples by confidence and compute per-bin accuracy/confidence.

    Empty bins are kept with count 0 (and zero statistics) rather than
    dropped, so diagrams always render a full axis.
    """
    if bins < 1:
        raise InvalidInputError(f"bin count must be at least 1, got {bins}")
    if scheme not in ("equal_width", "equal_mass"):
        raise InvalidInputError(f"unknown binning scheme {scheme!r}")
    conf = batch.confidences()
    correct = (batch.predictions() == batch.labels).astype(np.float64)
    if scheme == "equal_width":
        idx = _bin_index_equal_width(conf, bins)
    else:
        idx = _bin_index_equal_mass(conf, bins)
    counts = np.bincount(idx, minlength=bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=bins)
    nonempty = counts > 0
    acc = np.zeros(bins)
    confm = np.zeros(bins)
    acc[nonempty] = acc_sum[nonempty] / counts[nonempty]
    confm[nonempty] = conf_sum[nonempty] / counts[nonempty]
    return ReliabilityBins(scheme=scheme, counts=counts, accuracy=acc, confidence=confm)


def expected_calibration_error(bins: ReliabilityBins) -> float:
    """Sample-weighted mean |accuracy - confidence| over bins."""
    n = bins.counts.sum()
    if n == 0:
        raise InvalidInputError("cannot compute ECE of empty bins")
    gaps = np.abs(bins.accuracy - bins.confidence)
    return float(np.sum(bins.counts / n * gaps))


def maximum_calibration_error(bins: ReliabilityBins) -> float:
    """Largest |accuracy - confidence| over non-empty bins."""
    nonempty = bins.counts > 0
    if not np.any(nonempty):
        raise InvalidInputError("cannot compute MCE of empty bins")
    gaps = np.abs(bins.accuracy - bins.confidence)
    return float(gaps[nonempty].max())


def average_calibration_error(bins: ReliabilityBins) -> float:
    """Unweighted mean |accuracy - confidence| over non-empty bins."""
    nonempty = bins.counts > 0
    if not np.any(nonempty):
        raise InvalidInputError("cannot compute ACE of empty bins")
    gaps = np.abs(bins.accuracy - bins.confidence)
    return float(gaps[nonempty].mean())


def brier_score(batch: ProbBatch) -> float:
    """Full-vector mean squared error against one-hot labels; range [0, 2]."""
    onehot = np.zeros_like(batch.probs)
    onehot[np.arange(batch.n), batch.labels] = 1.0
    return float(np.sum((batch.probs - onehot) ** 2) / batch.n)


def negative_log_likelihood(batch: ProbBatch) -> float:
    """Mean -log of the probability assigned to the true class."""
    p_true = batch.probs[np.arange(batch.n), batch.labels]
    return float(-np.mean(np.log(np.maximum(p_true, PROB_CLAMP))))


def accuracy_score(batch: ProbBatch) -> float:
    return float(np.mean(batch.predictions() == batch.labels))


def calibration_report(batch: ProbBatch, bins: int = 15, scheme: str = "equal_width") -> CalibrationReport:
    """Compute the full metric suite on one probability batch."""
    rb = bin_predictions(batch, bins, scheme)
    return CalibrationReport(
        accuracy=accuracy_score(batch),
        ece=expected_calibration_error(rb),
        mce=maximum_calibration_error(rb),
        ace=average_calibration_error(rb),
        brier=brier_score(batch),
        nll=negative_log_likelihood(batch),
        bins=rb,
    )


def apply_temperature(logits: LogitBatch, scaler: TemperatureScaler) -> ProbBatch:
    """Softmax of ``logits / temperature``; preserves per-row argmax exactly."""
    return ProbBatch(softmax_rows(logits.logits / scaler.temperature), logits.labels)


def _nll_at_temperature(logits: LogitBatch, tau: float) -> float:
    return negative_log_likelihood(apply_temperature(logits, TemperatureScaler(tau)))


_INV_PHI = (np.sqrt(5.0) - 1.0) / 2.0


def fit_temperature(validation: LogitBatch) -> TemperatureScaler:
    """Fit the NLL-minimizing temperature on a validation logit batch.

    Coarse 50-point log grid over [0.05, 10], then golden-section
    refinement between the grid neighbours of the best point down to a
    bracket width of 1e-4. The unit temperature is kept as an explicit
    candidate so the fitted scaler never has a worse fitting-set NLL than
    no scaling at all.
    """
    grid = np.exp(np.linspace(np.log(TEMP_LOWER), np.log(TEMP_UPPER), TEMP_GRID_POINTS))
    nlls = [_nll_at_temperature(validation, float(t)) for t in grid]
    best = int(np.argmin(nlls))
    lo = grid[max(best - 1, 0)]
    hi = grid[min(best + 1, TEMP_GRID_POINTS - 1)]

    # golden-section search on the bracket
    a, b = float(lo), float(hi)
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc = _nll_at_temperature(validation, c)
    fd = _nll_at_temperature(validation, d)
    while (b - a) > TEMP_REFINE_TOL:
        # ties keep the left bracket so plateaus (saturated probabilities)
        # resolve toward the smaller temperature
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = _nll_at_temperature(validation, c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = _nll_at_temperature(validation, d)
    fitted = 0.5 * (a + b)

    candidates = [(float(_nll_at_temperature(validation, t)), float(t)) for t in (fitted, 1.0)]
    candidates.sort()
    return TemperatureScaler(candidates[0][1])


def temperature_sweep(logits: LogitBatch, temperatures, bins: int = 15, scheme: str = "equal_width") -> list:
    """ECE (plus the other metrics) at each user-given temperature."""
    out = []
    for tau in temperatures:
        scaled = apply_temperature(logits, TemperatureScaler(float(tau)))
        out.append((float(tau), calibration_report(scaled, bins, scheme)))
    return out


def harmonic_mean(base: float, new: float) -> float:
    """Harmonic mean of base-class and new-class scores; 0 when both are 0."""
    if base < 0 or new < 0:
        raise InvalidInputError("harmonic mean requires non-negative inputs")
    if base == 0.0 and new == 0.0:
        return 0.0
    return 2.0 * base * new / (base + new)


def pool_bins(parts: list) -> ReliabilityBins:
    """Combine per-part bin statistics by count-weighted averaging.

    Pooling the bins of disjoint sample splits reproduces the whole-batch
    bins exactly, which is what makes client-averaged reliability diagrams
    meaningful.
    """
    if not parts:
        raise InvalidInputError("cannot pool zero bin sets")
    g = parts[0].bin_count
    scheme = parts[0].scheme
    for p in parts:
        if p.bin_count != g or p.scheme != scheme:
            raise InvalidInputError("pooled bin sets must share bin count and scheme")
    counts = np.sum([p.counts for p in parts], axis=0)
    acc_sum = np.sum([p.counts * p.accuracy for p in parts], axis=0)
    conf_sum = np.sum([p.counts * p.confidence for p in parts], axis=0)
    nonempty = counts > 0
    acc = np.zeros(g)
    conf = np.zeros(g)
    acc[nonempty] = acc_sum[nonempty] / counts[nonempty]
    conf[nonempty] = conf_sum[nonempty] / counts[nonempty]
    return ReliabilityBins(scheme=scheme, counts=counts, accuracy=acc, confidence=conf)


# ---------------------------------------------------------------------------
# reliability-diagram export
# ---------------------------------------------------------------------------

_SVG_W, _SVG_H = 460, 360
_PLOT = (60, 20, 420, 320)  # left, top, right, bottom in SVG user units


def reliability_rows(bins: ReliabilityBins) -> list:
    """Per-bin (midpoint, accuracy, confidence, count) rows."""
    mids = bins.midpoints()
    return [
        (float(mids[g]), float(bins.accuracy[g]), float(bins.confidence[g]), int(bins.counts[g]))
        for g in range(bins.bin_count)
    ]


def reliability_csv(bins: ReliabilityBins) -> str:
    lines = ["bin_midpoint,accuracy,confidence,count"]
    for mid, acc, conf, count in reliability_rows(bins):
        lines.append(f"{mid:.6f},{acc:.6f},{conf:.6f},{count}")
    return "\n".join(lines) + "\n"


def _x(frac: float) -> float:
    l, _, r, _ = _PLOT
    return l + frac * (r - l)


def _y(frac: float) -> float:
    _, t, _, b = _PLOT
    return b - frac * (b - t)


def reliability_svg(bins: ReliabilityBins, title: str = "reliability") -> str:
    """Deterministic SVG reliability diagram.

    Accuracy bars in blue, the accuracy-to-confidence gap overlaid in
    translucent red, and the identity diagonal as reference. Empty bins
    render as zero-height bars so the axis is always complete.
    """
    g = bins.bin_count
    width = (_PLOT[2] - _PLOT[0]) / g
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{_SVG_W}" height="{_SVG_H}" '
        f'viewBox="0 0 {_SVG_W} {_SVG_H}">',
        f'<rect x="0" y="0" width="{_SVG_W}" height="{_SVG_H}" fill="white"/>',
        f'<text x="{_x(0.5):.2f}" y="14" text-anchor="middle" font-size="12" font-family="sans-serif">{title}</text>',
    ]
    for i in range(g):
        x0 = _PLOT[0] + i * width
        acc = float(bins.accuracy[i])
        conf = float(bins.confidence[i])
        parts.append(
            f'<rect x="{x0 + 1:.2f}" y="{_y(acc):.2f}" width="{width - 2:.2f}" '
            f'height="{_y(0.0) - _y(acc):.2f}" fill="#4878cf" stroke="#2a4d8f" stroke-width="0.5"/>'
        )
        lo, hi = sorted((acc, conf))
        parts.append(
            f'<rect x="{x0 + 1:.2f}" y="{_y(hi):.2f}" width="{width - 2:.2f}" '
            f'height="{_y(lo) - _y(hi):.2f}" fill="#d65f5f" fill-opacity="0.45"/>'
        )
    parts.append(
        f'<line x1="{_x(0.0):.2f}" y1="{_y(0.0):.2f}" x2="{_x(1.0):.2f}" y2="{_y(1.0):.2f}" '
        f'stroke="#444444" stroke-width="1" stroke-dasharray="4,3"/>'
    )
    # axes
    parts.append(
        f'<line x1="{_PLOT[0]}" y1="{_PLOT[3]}" x2="{_PLOT[2]}" y2="{_PLOT[3]}" stroke="black" stroke-width="1"/>'
    )
    parts.append(
        f'<line x1="{_PLOT[0]}" y1="{_PLOT[1]}" x2="{_PLOT[0]}" y2="{_PLOT[3]}" stroke="black" stroke-width="1"/>'
    )
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        parts.append(
            f'<text x="{_x(tick):.2f}" y="{_PLOT[3] + 14}" text-anchor="middle" font-size="10" '
            f'font-family="sans-serif">{tick:.2f}</text>'
        )
        parts.append(
            f'<text x="{_PLOT[0] - 6}" y="{_y(tick) + 3:.2f}" text-anchor="end" font-size="10" '
            f'font-family="sans-serif">{tick:.2f}</text>'
        )
    parts.append(
        f'<text x="{_x(0.5):.2f}" y="{_SVG_H - 6}" text-anchor="middle" font-size="11" '
        f'font-family="sans-serif">confidence</text>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
