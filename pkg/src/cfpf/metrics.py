"""Net spectral efficiency, Jain's fairness index and evaluation summaries."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

METHODS = ("solver", "network")


def net_se(rates, tau: int, tau_c: int):
    """Per-user rate discounted by the pilot overhead, ``(1 - tau/tau_c) / 2 * R``."""
    if not 0 < tau < tau_c:
        raise ValueError(f"need 0 < tau < tau_c, got tau={tau}, tau_c={tau_c}")
    return (1.0 - tau / tau_c) / 2.0 * np.asarray(rates, dtype=float)


def jain(rates) -> float:
    """Jain's index ``(sum R)^2 / (K sum R^2)``, between 1/K and 1."""
    r = np.asarray(rates, dtype=float)
    sq = float(np.sum(r * r))
    if sq == 0.0:
        raise ValueError("Jain's index is undefined for all-zero rates")
    return float(np.sum(r) ** 2 / (r.size * sq))


@dataclass
class EvaluationRecord:
    net_rates: np.ndarray
    wall_time: float
    method: str
    sum_se: float = field(init=False)
    jain: float = field(init=False)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        self.net_rates = np.asarray(self.net_rates, dtype=float)
        self.sum_se = float(np.sum(self.net_rates))
        self.jain = jain(self.net_rates)


def empirical_cdf(values):
    """Sorted ``(value, quantile)`` pairs; the last quantile is exactly 1."""
    v = np.sort(np.asarray(values, dtype=float))
    q = np.arange(1, v.size + 1) / v.size
    return list(zip(v.tolist(), q.tolist()))


def shared_histogram(groups: dict, bins: int = 30):
    """Counts per group over common equal-width bins spanning the pooled data."""
    pooled = np.concatenate([np.asarray(v, dtype=float) for v in groups.values()])
    lo, hi = float(pooled.min()), float(pooled.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    counts = {name: np.histogram(v, bins=edges)[0] for name, v in groups.items()}
    return edges, counts


def summarize(records, bins: int = 30) -> dict:
    """Table-style comparison of the network against the solver.

    Ratios are network mean over solver mean.  CDFs and the shared histogram
    are computed on per-sample sum net-SE.
    """
    records = list(records)
    if not records:
        raise ValueError("no records to summarize")
    by = {m: [r for r in records if r.method == m] for m in METHODS}
    out = {"count": {m: len(v) for m, v in by.items()}, "methods": {}, "cdf": {}}
    for m, recs in by.items():
        if not recs:
            continue
        sums = np.array([r.sum_se for r in recs])
        out["methods"][m] = {
            "mean_sum_se": float(np.mean(sums)),
            "mean_jain": float(np.mean([r.jain for r in recs])),
            "mean_time": float(np.mean([r.wall_time for r in recs])),
            "median_time": float(np.median([r.wall_time for r in recs])),
        }
        out["cdf"][m] = empirical_cdf(sums)
    missing = [m for m in METHODS if not by[m]]
    if missing:
        raise ValueError(f"missing records for {missing}; ratios need both methods")
    s, n = out["methods"]["solver"], out["methods"]["network"]
    out["ratios"] = {
        key: n[key] / s[key] for key in ("mean_sum_se", "mean_jain", "mean_time")
    }
    edges, counts = shared_histogram(
        {m: [r.sum_se for r in by[m]] for m in METHODS}, bins=bins)
    out["histogram"] = {"edges": edges.tolist(), "counts": {m: c.tolist() for m, c in counts.items()}}
    return out
