"""Separation D(alpha) between an attention subgraph and its complement.

D(alpha) = sum_ij |2 alpha_ij - 1|.  It is bounded below by |2N - N^2|, the
value at uniform attention, and reaches N^2 at one-hot rows.  The checks in
:func:`verify_bounds` exercise these facts on random row-stochastic matrices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

ROW_SUM_TOL = 1e-6
BOUND_SLACK = 1e-9
FLAT_STEP = 1e-4
FLAT_TOL = 1e-9
PATH_POINTS = 101


def _check_rows(alpha: np.ndarray) -> None:
    if alpha.ndim < 2 or alpha.shape[-1] != alpha.shape[-2]:
        raise ValueError(f"attention must be square, got shape {alpha.shape}")
    if alpha.dtype == object:
        sums = alpha.sum(axis=-1)
        bad = [s for s in np.ravel(sums) if abs(s - 1) > ROW_SUM_TOL]
        neg = any(v < 0 for v in np.ravel(alpha))
    else:
        bad = np.abs(alpha.sum(axis=-1) - 1.0) > ROW_SUM_TOL
        bad = np.ravel(alpha.sum(axis=-1))[np.ravel(bad)]
        neg = bool(np.any(alpha < 0))
    if len(bad):
        raise ValueError(f"rows must sum to 1 within {ROW_SUM_TOL}; found row sum {bad[0]}")
    if neg:
        raise ValueError("attention entries must be nonnegative")


def d_alpha(alpha):
    """Sum of |2 alpha_ij - 1|; works on float arrays and on Fraction object arrays."""
    a = alpha if isinstance(alpha, np.ndarray) and alpha.dtype == object else np.asarray(alpha, dtype=np.float64)
    _check_rows(a)
    d = np.abs(2 * a - 1).sum(axis=(-2, -1))
    if a.dtype == object:
        return d
    return float(d) if np.ndim(d) == 0 else d


def d_lower_bound(n: int) -> int:
    if n < 2:
        raise ValueError("need at least 2 agents")
    return abs(2 * n - n * n)


def row_entropy_total(alpha: np.ndarray):
    a = np.asarray(alpha, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(a > 0, -a * np.log(np.where(a > 0, a, 1.0)), 0.0)
    return terms.sum(axis=(-2, -1))


def uniform(n: int, exact: bool = False) -> np.ndarray:
    if exact:
        return np.full((n, n), Fraction(1, n), dtype=object)
    return np.full((n, n), 1.0 / n)


def random_row_stochastic(rng: np.random.Generator, n: int, count: int) -> np.ndarray:
    """Rows drawn as normalised exponentials (uniform on the simplex)."""
    e = rng.exponential(size=(count, n, n))
    return e / e.sum(axis=-1, keepdims=True)


def tangent_perturbations(rng: np.random.Generator, n: int, count: int, size: float) -> np.ndarray:
    """Random directions with zero row sums, scaled to Frobenius norm ``size``."""
    d = rng.standard_normal((count, n, n))
    d -= d.mean(axis=-1, keepdims=True)
    d *= size / np.linalg.norm(d, axis=(-2, -1), keepdims=True)
    return d


@dataclass
class Violation:
    check: str
    n: int
    sample: int
    alpha: np.ndarray
    detail: str

    def __str__(self) -> str:
        return f"{self.check} N={self.n} sample={self.sample}: {self.detail}\n{self.alpha}"


@dataclass
class TheoryReport:
    counts: dict[str, int] = field(default_factory=dict)
    violations: dict[str, int] = field(default_factory=dict)
    first_failure: Violation | None = None
    skipped: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.first_failure is None

    @property
    def total_violations(self) -> int:
        return sum(self.violations.values())

    def _tally(self, check: str, n_checked: int, failed_idx: np.ndarray, n: int, alphas, detail) -> None:
        self.counts[check] = self.counts.get(check, 0) + n_checked
        self.violations[check] = self.violations.get(check, 0) + len(failed_idx)
        if len(failed_idx) and self.first_failure is None:
            k = int(failed_idx[0])
            self.first_failure = Violation(check, n, k, np.asarray(alphas[k]), detail(k))

    def lines(self) -> list[str]:
        out = [f"{name}: {self.counts[name]} checked, {self.violations[name]} violations" for name in self.counts]
        out.extend(f"skipped: {s}" for s in self.skipped)
        out.append("PASS" if self.passed else f"FAIL first violation: {self.first_failure}")
        return out


def verify_bounds(samples: int = 10_000, n_values=range(2, 9), seed: int = 0, path_targets: int = 100) -> TheoryReport:
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    report = TheoryReport()
    for n in n_values:
        bound = d_lower_bound(n)
        alphas = random_row_stochastic(rng, n, samples)
        d = d_alpha(alphas)
        report._tally(
            "lower_bound", samples, np.flatnonzero(d < bound - BOUND_SLACK), n, alphas,
            lambda k: f"D={d[k]!r} < {bound}",
        )

        # extreme points, exactly in rational arithmetic and closely in floats
        u_exact = d_alpha(uniform(n, exact=True))
        u_float = d_alpha(uniform(n))
        onehot = np.eye(n)[rng.integers(0, n, size=n)]
        oh_exact = d_alpha(onehot.astype(int).astype(object) * Fraction(1))
        ok_uniform = u_exact == bound and abs(u_float - bound) <= 1e-12
        ok_onehot = oh_exact == n * n and d_alpha(onehot) == n * n
        report._tally("uniform_exact", 1, np.array([] if ok_uniform else [0]), n, [uniform(n)],
                      lambda k: f"D(uniform)={u_exact} (float {u_float!r}) != {bound}")
        report._tally("onehot_exact", 1, np.array([] if ok_onehot else [0]), n, [onehot],
                      lambda k: f"D(one-hot)={oh_exact} != {n * n}")

        if n >= 3:
            base = uniform(n)
            pert = base + tangent_perturbations(rng, n, 100, FLAT_STEP)
            diff = np.abs(d_alpha(pert) - u_float)
            report._tally("flat_at_uniform", 100, np.flatnonzero(diff >= FLAT_TOL), n, pert,
                          lambda k: f"|D(a+delta) - D(a)| = {diff[k]!r}")
        else:
            report.skipped.append("flat_at_uniform N=2 (|2a-1| has a kink at a=1/2)")

        ts = np.linspace(0.0, 1.0, PATH_POINTS)[:, None, None]
        for k in range(path_targets):
            perm = np.eye(n)[rng.permutation(n)]
            path = (1 - ts) * uniform(n) + ts * perm
            h = row_entropy_total(path)
            dp = d_alpha(path)
            bad_h = np.flatnonzero(np.diff(h) > BOUND_SLACK)
            bad_d = np.flatnonzero(np.diff(dp) < -BOUND_SLACK)
            report._tally("path_entropy_nonincreasing", 1, bad_h[:1], n, path,
                          lambda j: f"H rises at t={ts[j + 1, 0, 0]:.2f} (target {k})")
            report._tally("path_d_nondecreasing", 1, bad_d[:1], n, path,
                          lambda j: f"D falls at t={ts[j + 1, 0, 0]:.2f} (target {k})")

        # convexity of D along random chords, and the unique entropy maximum at uniform
        other = random_row_stochastic(rng, n, samples)
        t = rng.uniform(size=(samples, 1, 1))
        mix = t * alphas + (1 - t) * other
        lhs = d_alpha(mix)
        rhs = t[:, 0, 0] * d + (1 - t[:, 0, 0]) * d_alpha(other) + BOUND_SLACK
        report._tally("convexity", samples, np.flatnonzero(lhs > rhs), n, mix,
                      lambda j: f"D(mix)={lhs[j]!r} > chord {rhs[j]!r}")
        h_max = n * math.log(n)
        h = row_entropy_total(alphas)
        away = np.abs(alphas - 1.0 / n).max(axis=(-2, -1)) > 1e-6
        report._tally("entropy_max_at_uniform", int(away.sum()), np.flatnonzero(away & (h >= h_max)), n, alphas,
                      lambda j: f"H={h[j]!r} >= H(uniform)={h_max!r}")
    return report
