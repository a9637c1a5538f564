"""Model-extraction experiments and LWE-style sample generators.

Everything is row-oriented: a query x is a length-m row, a layer maps it to
x @ A. Reductions mod 1 and mod q use centered representatives, the same
convention as the PLL demodulation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from .pll import PllWeights, build_qt, demodulate, sample_round


class ExtractionError(RuntimeError):
    pass


class CountingOracle:
    """Wraps a query function and counts how often it is called."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray]):
        self.fn = fn
        self.calls = 0

    def __call__(self, x):
        self.calls += 1
        return np.asarray(self.fn(np.asarray(x, dtype=np.float64)), dtype=np.float64)


def extract_plain_linear(oracle, n: int, verify: bool = False) -> np.ndarray:
    """Recover A from a linear oracle x -> x @ A with the n unit-vector queries.

    Row i of A is the response to e_i. With `verify`, every query is issued a
    second time and any disagreement raises ExtractionError.
    """
    eye = np.eye(n)
    rows = [oracle(eye[i]) for i in range(n)]
    if verify:
        for i in range(n):
            if not np.array_equal(oracle(eye[i]), rows[i]):
                raise ExtractionError(f"oracle answered query e_{i} inconsistently")
    return np.vstack(rows)


def make_pll_oracle(w: PllWeights, rng, demodulated: bool = False, zero_mask: bool = False):
    """Inference endpoint for a single query row with fresh (P, k) per call.

    `zero_mask` pins k = 0, which together with p_bern = 1 makes the layer a
    deterministic affine map.
    """

    def oracle(x):
        x = np.atleast_2d(x)
        rnd = sample_round(w, x.shape[0], rng)
        qt = build_qt(w, x.shape[0], (rnd.p, np.zeros_like(rnd.k))) if zero_mask else rnd.qt
        y = x @ w.matrix + qt
        return (demodulate(y, w.config.q) if demodulated else y)[0]

    return oracle


@dataclass
class ExtractionStats:
    queries: int
    trials: int
    residual_variance: float
    disagreement_rate: float
    estimate: np.ndarray
    max_error: float = float("nan")


def extraction_residuals(oracle, m: int, trials: int, truth: np.ndarray | None = None) -> ExtractionStats:
    """Run the unit-vector attack `trials` times against a randomized endpoint.

    Each trial sends e_1..e_m and the zero vector twice. An affine model
    x @ A + c is fitted by least squares to all responses; the per-entry
    variance of its residuals and the fraction of repeated query pairs whose
    responses differ are reported.
    """
    oracle = CountingOracle(oracle)
    basis = np.vstack([np.eye(m), np.zeros((1, m))])
    xs, ys, differ = [], [], 0
    for _ in range(trials):
        for x in basis:
            y1, y2 = oracle(x), oracle(x)
            differ += not np.array_equal(y1, y2)
            xs += [x, x]
            ys += [y1, y2]
    if not xs:
        return ExtractionStats(0, 0, float("nan"), float("nan"), np.zeros((m, 0)))
    design = np.hstack([np.array(xs), np.ones((len(xs), 1))])
    ys = np.array(ys)
    coef, *_ = np.linalg.lstsq(design, ys, rcond=None)
    resid = ys - design @ coef
    dof = max(len(xs) - design.shape[1], 1)
    estimate = coef[:m]
    err = float(np.abs(estimate - truth).max()) if truth is not None else float("nan")
    return ExtractionStats(oracle.calls, trials, float((resid ** 2).sum(axis=0).mean() / dof),
                           differ / (trials * len(basis)), estimate, err)


# ---------------------------------------------------------------- LWE samplers

TAGS = ("lwe", "clwe", "uniform")


@dataclass
class LweSampleSet:
    """t samples b_i = gamma * s @ A + e_i (mod 1) sharing one m x n matrix A.

    For tag "lwe" the secret is an integer vector in [0, q) and the
    reduction is mod q. "uniform" keeps the same A but draws b uniformly.
    """

    a: np.ndarray                 # (m, n), N(0, 1) entries
    b: np.ndarray                 # (t, n)
    s: np.ndarray                 # (m,)
    e: np.ndarray                 # (t, n)
    tag: str
    params: dict = field(default_factory=dict)


@dataclass
class SolveMatrixSample:
    x: np.ndarray       # (m,)
    b: np.ndarray       # (n,)


@dataclass
class SolveMatrixSet:
    samples: list[SolveMatrixSample]
    q: float
    s_prime: np.ndarray | None    # q * gamma * s when the input was CLWE
    a: np.ndarray


def centered_mod(x, q):
    return demodulate(x, q)


def clwe_sample(m: int, n: int, t: int, gamma: float, beta: float, tag: str = "clwe", rng=None,
                q: int | None = None) -> LweSampleSet:
    rng = np.random.default_rng(rng)
    if tag not in TAGS:
        raise ValueError(f"unknown tag {tag!r}, expected one of {TAGS}")
    if min(m, n, t) < 1:
        raise ValueError("m, n and t must be positive")
    if beta < 0:
        raise ValueError("beta must be non-negative")
    a = rng.standard_normal((m, n))
    if tag == "lwe":
        if q is None or q < 2:
            raise ValueError("lwe samples need an integer modulus q >= 2")
        a = rng.integers(0, q, (m, n)).astype(np.float64)
        s = rng.integers(0, q, m).astype(np.float64)
        e = np.rint(rng.normal(0.0, beta, (t, n)))
        b = centered_mod(s @ a + e, q)
        return LweSampleSet(a, b, s, e, tag, dict(m=m, n=n, t=t, q=q, beta=beta))
    if tag == "clwe" and gamma < 2 * math.sqrt(m):
        raise ValueError(f"gamma={gamma:.4g} is below 2*sqrt(m)={2 * math.sqrt(m):.4g}")
    s = rng.standard_normal(m)
    s /= np.linalg.norm(s)
    e = rng.normal(0.0, beta, (t, n)) if beta > 0 else np.zeros((t, n))
    if tag == "uniform":
        b = rng.uniform(-0.5, 0.5, (t, n))
    else:
        b = centered_mod(gamma * (s @ a) + e, 1.0)
    return LweSampleSet(a, b, s, e, tag, dict(m=m, n=n, t=t, gamma=gamma, beta=beta))


def alg1_convert(samples: LweSampleSet, q: float, rng=None, xs: np.ndarray | None = None) -> SolveMatrixSet:
    """Turn mod-1 samples into shifted modular samples b' = q*b_i + q*x_i @ A (mod q).

    The x_i are i.i.d. N(0, 1) unless given. For CLWE input the result obeys
    b' = (x_i q + s')A + q e_i (mod q) with s' = q * gamma * s.
    """
    rng = np.random.default_rng(rng)
    t = samples.b.shape[0]
    m = samples.a.shape[0]
    if xs is None:
        xs = rng.standard_normal((t, m))
    xs = np.asarray(xs).reshape(t, m)
    out = [SolveMatrixSample(x, centered_mod(q * b + q * (x @ samples.a), q)) for x, b in zip(xs, samples.b)]
    s_prime = q * samples.params["gamma"] * samples.s if samples.tag == "clwe" else None
    return SolveMatrixSet(out, q, s_prime, samples.a)


def solve_matrix_residual(conv: SolveMatrixSet) -> np.ndarray:
    """(b' - s'A - x(qA)) reduced mod q for every converted sample, shape (t, n)."""
    if conv.s_prime is None:
        raise ValueError("ground-truth secret is only retained for CLWE input")
    base = conv.s_prime @ conv.a
    return np.vstack([centered_mod(smp.b - base - smp.x @ (conv.q * conv.a), conv.q) for smp in conv.samples])


def periodic_score(b: np.ndarray) -> np.ndarray:
    """Distinguisher statistic: mean of cos(2 pi b) over each sample row."""
    return np.cos(2 * np.pi * np.atleast_2d(b)).mean(axis=1)


def auc(pos_scores, neg_scores) -> float:
    """Area under the ROC curve via the Mann-Whitney U statistic."""
    u = stats.mannwhitneyu(pos_scores, neg_scores, alternative="two-sided").statistic
    return float(u) / (len(pos_scores) * len(neg_scores))


def uniform_range_test(values, lo: float, hi: float, z: float = 4.0) -> bool:
    """All values inside [lo, hi) and the sample mean within z standard errors of the midpoint."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0 or v.min() < lo or v.max() >= hi:
        return False
    se = (hi - lo) / math.sqrt(12 * v.size)
    return abs(v.mean() - (lo + hi) / 2) <= z * se
