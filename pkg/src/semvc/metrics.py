"""RD curves and Bjontegaard deltas (classic cubic least-squares variant)."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from semvc.errors import BdError, ContractError, FormatError

log = logging.getLogger(__name__)

RD_HEADER = ("label", "lambda", "rate_bits", "fidelity")
BD_HEADER = ("anchor", "test", "bd_rate_pct", "bd_quality_pts")
MIN_BD_POINTS = 4


@dataclass(frozen=True, order=True)
class RdPoint:
    rate: float
    fidelity: float

    def __post_init__(self):
        if not self.rate > 0:
            raise ContractError(f"rate must be positive, got {self.rate}")


@dataclass(frozen=True)
class RdCurve:
    label: str
    points: tuple[RdPoint, ...]

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(sorted(self.points)))

    @property
    def rates(self) -> np.ndarray:
        return np.array([p.rate for p in self.points])

    @property
    def fidelities(self) -> np.ndarray:
        return np.array([p.fidelity for p in self.points])


def _poly_fit(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(np.unique(x)) < MIN_BD_POINTS:
        raise BdError(f"need {MIN_BD_POINTS} distinct abscissae for a cubic fit, got {len(np.unique(x))}")
    # centring keeps the Vandermonde system well conditioned for narrow fidelity ranges
    shift = x.mean()
    coeffs, _, rank, _, _ = np.polyfit(x - shift, y, 3, full=True)
    if rank < 4:
        raise BdError("singular cubic fit")
    return np.poly1d(coeffs), shift


def _mean_over(poly, shift, lo, hi):
    integral = np.polyint(poly)
    return (integral(hi - shift) - integral(lo - shift)) / (hi - lo)


def _check_curves(anchor: RdCurve, test: RdCurve):
    for curve in (anchor, test):
        if len(curve.points) < MIN_BD_POINTS:
            raise BdError(f"curve {curve.label!r} has {len(curve.points)} points, need {MIN_BD_POINTS}")


def _overlap(a, b):
    lo = max(a.min(), b.min())
    hi = min(a.max(), b.max())
    if not hi > lo:
        raise BdError(f"curves do not overlap ({lo} >= {hi})")
    return lo, hi


def bd_rate(anchor: RdCurve, test: RdCurve) -> float:
    """Average rate difference in percent at equal fidelity; negative means savings."""
    _check_curves(anchor, test)
    fa, fb = anchor.fidelities, test.fidelities
    lo, hi = _overlap(fa, fb)
    pa, sa = _poly_fit(fa, np.log(anchor.rates))
    pb, sb = _poly_fit(fb, np.log(test.rates))
    diff = _mean_over(pb, sb, lo, hi) - _mean_over(pa, sa, lo, hi)
    return float(np.expm1(diff) * 100.0)


def bd_quality(anchor: RdCurve, test: RdCurve) -> float:
    """Average fidelity difference in percentage points at equal rate."""
    _check_curves(anchor, test)
    ra, rb = np.log(anchor.rates), np.log(test.rates)
    lo, hi = _overlap(ra, rb)
    pa, sa = _poly_fit(ra, anchor.fidelities)
    pb, sb = _poly_fit(rb, test.fidelities)
    return float((_mean_over(pb, sb, lo, hi) - _mean_over(pa, sa, lo, hi)) * 100.0)


def pareto_curve(label: str, tagged_points) -> tuple[RdCurve, list]:
    """Keep the points that buy fidelity with rate; ``tagged_points`` are ``(tag, rate, fidelity)``.

    Exact rate duplicates and points that do not improve fidelity over a
    cheaper point are dropped; the dropped ``(tag, point)`` pairs are
    returned and logged.
    """
    pts = sorted(((rate, fid, tag) for tag, rate, fid in tagged_points), key=lambda p: (p[0], -p[1]))
    kept: list[RdPoint] = []
    dropped = []
    for rate, fid, tag in pts:
        if kept and (rate == kept[-1].rate or fid <= kept[-1].fidelity):
            dropped.append((tag, RdPoint(rate, fid)))
            log.info("%s: dropped dominated point %s rate=%r fidelity=%r", label, tag, rate, fid)
            continue
        kept.append(RdPoint(rate, fid))
    return RdCurve(label, tuple(kept)), dropped


def sweep_to_curve(results, label: str) -> tuple[RdCurve, list]:
    """Pareto curve from ``(lambda, outcome)`` pairs; see :func:`pareto_curve`."""
    return pareto_curve(label, ((lam, out.total_rate, out.fidelity) for lam, out in results))


def fidelity_at_rate(curve: RdCurve, rate: float) -> float | None:
    """Fidelity reachable at ``rate`` by time-sharing adjacent curve points.

    ``None`` below the curve's lowest rate; the top point's fidelity above its highest.
    """
    rates, fids = curve.rates, curve.fidelities
    if rate < rates[0]:
        return None
    if rate >= rates[-1]:
        return float(fids[-1])
    return float(np.interp(rate, rates, fids))


# --------------------------------------------------------------------------- files


def write_rd_csv(path, rows) -> None:
    """``rows`` are ``(label, lambda_or_None, rate, fidelity)`` tuples."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RD_HEADER)
    for label, lam, rate, fid in rows:
        writer.writerow([label, "" if lam is None else repr(lam), repr(float(rate)), repr(float(fid))])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_rd_csv(path) -> list[tuple]:
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != RD_HEADER:
            raise FormatError(f"{path}:1: expected header {','.join(RD_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 fields")
            try:
                lam = float(row[1]) if row[1] else None
                rows.append((row[0], lam, float(row[2]), float(row[3])))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return rows


def curves_from_rows(rows, pareto: bool = False) -> dict[str, RdCurve]:
    """Group RD CSV rows by label; with ``pareto`` dominated points are dropped."""
    by_label: dict[str, list] = {}
    for label, lam, rate, fid in rows:
        by_label.setdefault(label, []).append((lam, rate, fid))
    if pareto:
        return {label: pareto_curve(label, pts)[0] for label, pts in by_label.items()}
    return {label: RdCurve(label, tuple(RdPoint(r, f) for _, r, f in pts)) for label, pts in by_label.items()}
