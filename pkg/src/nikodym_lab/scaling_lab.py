"""delta-sweeps of the maximal-function ratio, log-log exponent fits and breakdown verdicts."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy import stats

from .errors import InsufficientDataError, NikodymError
from .metric import CometricModel, normal_dim, parity_of, submanifold_dim
from .nikodym_maximal import (
    Region,
    SearchSpec,
    TubeSpec,
    counterexample_f,
    lp_norm,
    maximal_field,
)

BREAKDOWN = "BREAKDOWN"
NO_BREAKDOWN = "NO-BREAKDOWN"
INCONCLUSIVE = "INCONCLUSIVE"


def dual_exponent(p: float) -> float:
    return math.inf if p == 1 else p / (p - 1)


def default_q(p: float, d_total: int) -> float:
    """``q = (d_total - 1) p'`` with ``p'`` the Hoelder conjugate of ``p``."""
    return (d_total - 1) * dual_exponent(p)


@dataclass(frozen=True)
class GridRule:
    """Resolution ``n = min(cap, max(floor, ceil(cells * 2 * halfwidth / delta)))``."""

    floor: int = 64
    cells_per_delta: float = 8.0
    cap: int = 256

    def resolution(self, delta: float, halfwidth: float = 0.5) -> int:
        want = int(math.ceil(self.cells_per_delta * 2.0 * halfwidth / delta - 1e-9))
        return min(self.cap, max(self.floor, want))


@dataclass(frozen=True)
class SweepRecord:
    delta: float
    numerator: float
    denominator: float
    ratio: float
    grid_n: int
    model: str
    seconds: float | None = None
    c0: float | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def ratio_sweep(model: CometricModel, p: float, q: float | None, deltas, region: Region,
                tube_template: TubeSpec | None = None, search: SearchSpec | None = None,
                grid_rule: GridRule | None = None, threads: int | None = None,
                progress=None) -> list[SweepRecord]:
    """``||f**_delta||_{L^q(region)} / ||f^delta||_{L^p}`` for each ``delta``.

    A ``delta`` that cannot be resolved (or whose evaluation fails) yields
    a record with ``error`` set and the sweep moves on.
    """
    deltas = [float(d) for d in deltas]
    if not deltas:
        raise ValueError("no deltas given")
    if any(b >= a for a, b in zip(deltas, deltas[1:])):
        raise ValueError("deltas must be strictly decreasing")
    if q is None:
        q = default_q(p, model.dim)
    tube_template = tube_template or TubeSpec(deltas[0])
    grid_rule = grid_rule or GridRule()
    records = []
    for delta in deltas:
        n = grid_rule.resolution(delta, model.delta0)
        start = time.perf_counter()
        try:
            g = counterexample_f(delta, model.dim, n, model.delta0, tube_template.min_cells)
            tube = replace(tube_template, delta=delta)
            mf = maximal_field(g, model, region, tube, search, threads)
            num = lp_norm(mf, q)
            den = lp_norm(g, p)
            rec = SweepRecord(delta, num, den, num / den, n, model.model_id,
                              time.perf_counter() - start, mf.summary()["c0"])
        except (NikodymError, ValueError) as exc:
            rec = SweepRecord(delta, math.nan, math.nan, math.nan, n, model.model_id,
                              time.perf_counter() - start, None, f"{type(exc).__name__}: {exc}")
        records.append(rec)
        if progress is not None:
            progress(rec)
    return records


@dataclass(frozen=True)
class ExponentFit:
    slope: float
    intercept: float
    stderr: float
    n_points: int
    residual_max: float

    def to_dict(self) -> dict:
        return asdict(self)


def fit_exponent(records, min_points: int = 4) -> ExponentFit:
    """Least-squares line through ``(log delta, log ratio)``.

    ``records`` is a sequence of :class:`SweepRecord` (failed ones are
    skipped) or of ``(delta, ratio)`` pairs.
    """
    pts = []
    for r in records:
        if isinstance(r, SweepRecord):
            if r.ok:
                pts.append((r.delta, r.ratio))
        else:
            pts.append((float(r[0]), float(r[1])))
    need = max(3, min_points)
    if len(pts) < need:
        raise InsufficientDataError(f"need at least {need} successful records, got {len(pts)}")
    arr = np.array(pts)
    if np.any(arr <= 0) or not np.all(np.isfinite(arr)):
        raise ValueError("deltas and ratios must be positive and finite")
    x, y = np.log(arr[:, 0]), np.log(arr[:, 1])
    res = stats.linregress(x, y)
    resid = y - (res.intercept + res.slope * x)
    return ExponentFit(float(res.slope), float(res.intercept), float(res.stderr), len(pts),
                       float(np.max(np.abs(resid))))


@dataclass(frozen=True)
class BreakdownReport:
    verdict: str
    slope: float
    stderr: float
    margin: float
    trivial_exponent: float
    predicted_exponent: float
    p: float
    q: float | None
    d_total: int
    parity: str
    threshold_p: int

    def to_dict(self) -> dict:
        return asdict(self)


def breakdown_verdict(fit: ExponentFit, p: float, d_total: int, parity: str | None = None,
                      q: float | None = None, max_stderr: float = 0.2) -> BreakdownReport:
    """Compare the measured slope with the trivial exponent ``1 - d_total/p``.

    BREAKDOWN when the slope lies below it by more than
    ``2 * stderr + 0.05``; INCONCLUSIVE when the fit is too noisy.
    """
    if parity is None:
        parity = parity_of(d_total)
    elif parity != parity_of(d_total):
        raise ValueError(f"parity {parity!r} does not match dimension {d_total}")
    trivial = 1.0 - d_total / p
    predicted = -normal_dim(d_total) / p
    margin = 2.0 * fit.stderr + 0.05
    if not math.isfinite(fit.stderr) or fit.stderr > max_stderr:
        verdict = INCONCLUSIVE
    elif fit.slope < trivial - margin:
        verdict = BREAKDOWN
    else:
        verdict = NO_BREAKDOWN
    return BreakdownReport(verdict, fit.slope, fit.stderr, margin, trivial, predicted, p, q,
                           d_total, parity, submanifold_dim(d_total))
