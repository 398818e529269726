"""Mann-Kendall trend statistics, trend regimes, and expert-routing cross-tabulation."""
from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TrendRegime", "MkResult", "RoutingLog", "mk_test", "classify_regime",
    "routing_crosstab", "chi_square_independence", "format_crosstab", "crosstab_csv",
]


class TrendRegime(enum.IntEnum):
    STRONG_DOWN = 0
    WEAK_DOWN = 1
    WEAK_UP = 2
    STRONG_UP = 3

    @property
    def label(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class MkResult:
    s_stat: int
    var_s: float
    z: float
    regime: TrendRegime


def mk_test(series) -> MkResult:
    """Mann-Kendall S, tie-corrected Var(S), continuity-corrected Z, and regime.

    A fully tied series has Var(S) = 0 and is reported with Z = 0.
    """
    x = np.asarray(series, dtype=np.float64).ravel()
    n = x.size
    if n < 2:
        raise ValueError(f"Mann-Kendall needs at least 2 points, got {n}")
    i, j = np.triu_indices(n, k=1)
    s = int(np.sign(x[j] - x[i]).sum())
    _, counts = np.unique(x, return_counts=True)
    t = counts[counts > 1].astype(np.float64)
    var_s = (n * (n - 1) * (2 * n + 5) - float(np.sum(t * (t - 1) * (2 * t + 5)))) / 18.0
    if s == 0 or var_s <= 0:
        z = 0.0
    elif s > 0:
        z = (s - 1) / math.sqrt(var_s)
    else:
        z = (s + 1) / math.sqrt(var_s)
    return MkResult(s, var_s, z, classify_regime(z))


def classify_regime(z: float) -> TrendRegime:
    """(-inf, -1), [-1, 0), [0, 1), [1, inf)."""
    if z < -1.0:
        return TrendRegime.STRONG_DOWN
    if z < 0.0:
        return TrendRegime.WEAK_DOWN
    if z < 1.0:
        return TrendRegime.WEAK_UP
    return TrendRegime.STRONG_UP


@dataclass
class RoutingLog:
    """Append-only record of gate decisions, one row per selected expert."""
    rows: list[tuple[int, int, int, str, int, float]] = field(default_factory=list)
    k: dict[tuple[int, str], int] = field(default_factory=dict)
    n_experts: dict[tuple[int, str], int] = field(default_factory=dict)

    def record(self, samples, channels, layer: int, branch: str, decision) -> None:
        sel = np.asarray(decision.selected)
        w = np.asarray(decision.weights)
        m = decision.scores.shape[-1]
        key = (layer, branch)
        self.k.setdefault(key, sel.shape[-1])
        self.n_experts.setdefault(key, m)
        if self.k[key] != sel.shape[-1]:
            self.k[key] = -1  # mixed k
        if np.any(sel >= m):
            raise ValueError("selected expert index out of range")
        for s, c, idx, wt in zip(samples, channels, sel, w):
            for e, x in zip(idx, wt):
                self.rows.append((int(s), int(c), layer, branch, int(e), float(x)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample", "channel", "layer", "branch", "expert", "weight"])
        for r in self.rows:
            w.writerow([r[0], r[1], r[2], r[3], r[4], repr(r[5])])
        return buf.getvalue()


def routing_crosstab(log: RoutingLog, regimes, branch: str, layer: int, n_experts: int | None = None) -> np.ndarray:
    """Counts of (expert, regime) over logged (sample, channel) pairs.

    ``regimes`` maps ``(sample, channel)`` to a regime, or is an array indexed
    ``[sample]`` or ``[sample, channel]``.
    """
    key = (layer, branch)
    k = log.k.get(key)
    if k is not None and k != 1:
        raise ValueError(f"{branch} gate at layer {layer} was logged with k={k}; "
                         f"rerun the evaluation with top-1 routing (k=1) for this analysis")
    m = n_experts if n_experts is not None else log.n_experts.get(key, 0)
    table = np.zeros((m, len(TrendRegime)), dtype=np.int64)
    if isinstance(regimes, dict):
        def lookup(s, c):
            return regimes[(s, c)]
    else:
        arr = np.asarray(regimes)

        def lookup(s, c):
            return arr[s] if arr.ndim == 1 else arr[s, c]
    for s, c, l, b, e, _ in log.rows:
        if l == layer and b == branch:
            table[e, int(lookup(s, c))] += 1
    return table


def chi_square_independence(table) -> tuple[float, int]:
    """Pearson chi-square on a contingency table; empty rows/columns are dropped.

    Tables with fewer than two non-empty rows or columns give ``(0.0, 0)``.
    """
    t = np.asarray(table, dtype=np.float64)
    if t.ndim != 2 or np.any(t < 0):
        raise ValueError("contingency table must be a 2-d array of non-negative counts")
    t = t[t.sum(axis=1) > 0][:, t.sum(axis=0) > 0]
    r, c = t.shape
    if r < 2 or c < 2:
        return 0.0, 0
    expected = np.outer(t.sum(axis=1), t.sum(axis=0)) / t.sum()
    stat = float(np.sum((t - expected) ** 2 / expected))
    return stat, (r - 1) * (c - 1)


def format_crosstab(table) -> str:
    table = np.asarray(table)
    heads = ["expert"] + [r.label for r in TrendRegime] + ["total"]
    body = [[str(i)] + [str(int(v)) for v in row] + [str(int(row.sum()))] for i, row in enumerate(table)]
    body.append(["total"] + [str(int(v)) for v in table.sum(axis=0)] + [str(int(table.sum()))])
    widths = [max(len(h), *(len(r[i]) for r in body)) for i, h in enumerate(heads)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(heads, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in body]
    return "\n".join(lines) + "\n"


def crosstab_csv(table) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["expert"] + [r.label for r in TrendRegime])
    for i, row in enumerate(np.asarray(table)):
        w.writerow([i] + [int(v) for v in row])
    return buf.getvalue()
