"""Iterative algorithms whose heavy products run through a pluggable executor.

The executor decides how ``A B^T`` and ``A x`` are computed: exactly in
process, through the simulated coded pipeline, or through the simulated
speculative baseline.  Results must agree across executors; only the
simulated timings differ.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .code import CodeParams
from .errors import (
    DegenerateInput,
    InvalidArgument,
    NotPositiveDefinite,
    RankZero,
    SingularPreconditioner,
)
from .linalg import as_matrix, as_vector, matmul_reference, matvec_reference
from .sim import SimConfig, Simulator

STRATEGIES = ("reference", "coded", "speculative")


class Executor:
    """Computes ``A B^T`` and ``A x`` with one of the three strategies.

    ``la``/``lb`` and ``groups`` fix the code geometry: operand A is cut into
    ``la * groups[0]`` row-blocks, B into ``lb * groups[1]``.  The speculative
    strategy uses the same systematic blocks without parities.  Pass a
    ``key`` for operands that stay fixed across calls so they are encoded
    only once.
    """

    def __init__(self, strategy="reference", cfg: SimConfig | None = None, la=2, lb=2, groups=(2, 2)):
        if strategy not in STRATEGIES:
            raise InvalidArgument(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
        self.strategy = strategy
        self.la, self.lb = la, lb
        self.groups = tuple(groups)
        self.sim = None if strategy == "reference" else Simulator(cfg or SimConfig())
        self.reports = []

    @property
    def params(self):
        return CodeParams(self.la, self.lb, self.la * self.groups[0], self.lb * self.groups[1])

    def matmul(self, a, b, key_a=None, key_b=None):
        if self.strategy == "reference":
            return matmul_reference(a, b)
        p = self.params
        if self.strategy == "coded":
            c, report = self.sim.coded_matmul(a, b, p, key_a=key_a, key_b=key_b)
        else:
            c, report = self.sim.speculative_matmul(a, b, (p.ma, p.mb))
        self.reports.append(report)
        return c

    def matvec(self, a, x, key=None):
        if self.strategy == "reference":
            return matvec_reference(a, x)
        blocks = self.la * self.groups[0]
        if self.strategy == "coded":
            y, report = self.sim.coded_matvec(a, x, blocks, self.la, key_a=key)
        else:
            y, report = self.sim.speculative_matvec(a, x, blocks)
        self.reports.append(report)
        return y

    def total_time(self):
        return sum(r.t_total for r in self.reports)


def _executor(ex):
    return ex if ex is not None else Executor("reference")


# -- power iteration -------------------------------------------------------


@dataclass
class PowerResult:
    eigenvalue: float
    eigenvector: np.ndarray
    iterations: int
    eigenvalues: list = field(default_factory=list)


def power_iteration(a, max_iters=20, tol=1e-6, executor=None, v0=None) -> PowerResult:
    """Dominant eigenpair by repeated ``v <- A v / |A v|``.

    Stops once ``|A v - lambda v| <= tol * |lambda|`` with
    ``lambda = v^T A v``, or after ``max_iters`` products.
    """
    a = as_matrix(a, "A")
    if a.shape[0] != a.shape[1]:
        raise InvalidArgument(f"A must be square, got {a.shape}")
    if not tol > 0:
        raise InvalidArgument("tol must be positive")
    ex = _executor(executor)
    v = np.ones(a.shape[0]) if v0 is None else as_vector(v0, "v0").copy()
    norm = np.linalg.norm(v)
    if norm == 0:
        raise DegenerateInput("starting vector is zero")
    v /= norm
    lam = 0.0
    history = []
    for k in range(1, max_iters + 1):
        w = ex.matvec(a, v, key="A")
        lam = float(v @ w)
        history.append(lam)
        if np.linalg.norm(w - lam * v) <= tol * abs(lam):
            return PowerResult(lam, v, k, history)
        wn = np.linalg.norm(w)
        if wn == 0:
            raise DegenerateInput(f"A v vanished at iteration {k}")
        v = w / wn
    return PowerResult(lam, v, max_iters, history)


# -- kernel ridge regression -----------------------------------------------


def gaussian_kernel(x, z, sigma):
    """``exp(-|x_i - z_j|^2 / (2 sigma^2))`` for all row pairs."""
    x = as_matrix(x, "X")
    z = as_matrix(z, "Z")
    sq = (x * x).sum(1)[:, None] + (z * z).sum(1)[None, :] - 2.0 * x @ z.T
    return np.exp(-np.maximum(sq, 0.0) / (2.0 * sigma**2))


class RffPreconditioner:
    """``M = Z Z^T + lambda I`` from random Fourier features of a Gaussian kernel."""

    def __init__(self, x, sigma, num_features, lam, seed=0):
        x = as_matrix(x, "X")
        if num_features < 1:
            raise InvalidArgument("need at least one random feature")
        if not lam > 0:
            raise InvalidArgument("lambda must be positive")
        rng = np.random.default_rng(seed)
        d = x.shape[1]
        omega = rng.standard_normal((d, num_features)) / sigma
        phase = rng.uniform(0.0, 2.0 * np.pi, num_features)
        self.features = np.sqrt(2.0 / num_features) * np.cos(x @ omega + phase)
        self.lam = lam
        self.matrix = self.features @ self.features.T + lam * np.eye(x.shape[0])
        try:
            self._factor = scipy.linalg.cho_factor(self.matrix)
        except np.linalg.LinAlgError as exc:
            raise SingularPreconditioner(str(exc)) from exc
        self._inverse = None

    def __call__(self, v):
        return scipy.linalg.cho_solve(self._factor, as_vector(v))

    def inverse(self):
        """Dense ``M^{-1}``, materialized once so it can be multiplied like any operand."""
        if self._inverse is None:
            inv = scipy.linalg.cho_solve(self._factor, np.eye(self.matrix.shape[0]))
            self._inverse = 0.5 * (inv + inv.T)
        return self._inverse


def rff_preconditioner(x, sigma, num_features, lam, seed=0):
    return RffPreconditioner(x, sigma, num_features, lam, seed)


@dataclass
class KrrProblem:
    kernel: np.ndarray
    labels: np.ndarray
    lam: float
    preconditioner: RffPreconditioner | None = None
    tol: float = 1e-3
    max_iters: int = 1000

    def __post_init__(self):
        self.kernel = as_matrix(self.kernel, "K")
        self.labels = as_vector(self.labels, "y")
        n = self.kernel.shape[0]
        if self.kernel.shape != (n, n) or self.labels.shape != (n,):
            raise InvalidArgument("K must be n x n and y of length n")
        if not np.allclose(self.kernel, self.kernel.T):
            raise InvalidArgument("K must be symmetric")
        if not self.lam > 0:
            raise InvalidArgument("lambda must be positive")

    def system(self):
        return self.kernel + self.lam * np.eye(self.kernel.shape[0])


@dataclass
class KrrResult:
    x: np.ndarray
    iterations: int
    residuals: list  # |(K + lam I) x_k - y| for k = 0, 1, ...


def krr_pcg(problem: KrrProblem, executor=None) -> KrrResult:
    """Solve ``(K + lambda I) x = y`` by preconditioned conjugate gradient from ``x_0 = 1``.

    Both per-iteration products, with the system matrix and with ``M^{-1}``,
    go through the executor.  Iteration stops once the residual norm drops
    to ``tol * |y|``.
    """
    ex = _executor(executor)
    system = problem.system()
    y = problem.labels
    minv = problem.preconditioner.inverse() if problem.preconditioner is not None else None

    def precond(r):
        return r.copy() if minv is None else ex.matvec(minv, r, key="Minv")

    x = np.ones_like(y)
    r = y - ex.matvec(system, x, key="K+lam")
    z = precond(r)
    p = z.copy()
    rz = float(r @ z)
    target = problem.tol * np.linalg.norm(y)
    residuals = [float(np.linalg.norm(r))]
    k = 0
    while residuals[-1] > target and k < problem.max_iters:
        h = ex.matvec(system, p, key="K+lam")
        php = float(p @ h)
        if php <= 0:
            raise NotPositiveDefinite(f"p^T (K + lambda I) p = {php} at iteration {k}")
        alpha = rz / php
        x = x + alpha * p
        r = r - alpha * h
        z = precond(r)
        rz_next = float(r @ z)
        beta = rz_next / rz
        p = z + beta * p
        rz = rz_next
        k += 1
        residuals.append(float(np.linalg.norm(r)))
    return KrrResult(x, k, residuals)


def synthetic_krr(n, d=4, sigma=8.0, lam=0.01, seed=0, noise=0.1):
    """Points uniform in ``[0, 1]^d`` with labels from a smooth planted function plus noise."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, (n, d))
    w = rng.standard_normal(d)
    y = np.sin(2.0 * np.pi * x @ w / np.sqrt(d)) + noise * rng.standard_normal(n)
    return x, KrrProblem(gaussian_kernel(x, x, sigma), y, lam)


# -- alternating least squares ---------------------------------------------


def als_loss(r, h, w, lam):
    return float(np.linalg.norm(r - h @ w) ** 2 + lam * (np.linalg.norm(h) ** 2 + np.linalg.norm(w) ** 2))


@dataclass
class AlsResult:
    h: np.ndarray
    w: np.ndarray
    losses: list  # F(H_k, W_k) for k = 0, 1, ...
    fit: list  # |R - H_k W_k|_F^2


def als(r, f, lam, eps=0.0, max_iters=7, executor=None, seed=0) -> AlsResult:
    """Alternate exact least-squares updates of the user factor H and item factor W.

    ``R W^T`` and ``R^T H`` go through the executor with ``R`` (and ``R^T``)
    as the fixed, encode-once operand; the ``f x f`` solves are local.
    """
    r = as_matrix(r, "R")
    if f < 1:
        raise InvalidArgument("f must be >= 1")
    if not lam > 0:
        raise InvalidArgument("lambda must be positive")
    ex = _executor(executor)
    u, i = r.shape
    rng = np.random.default_rng(seed)
    h = rng.uniform(0.0, 1.0 / f, (u, f))
    w = rng.uniform(0.0, 1.0 / f, (f, i))
    rt = np.ascontiguousarray(r.T)
    eye = lam * np.eye(f)
    losses = [als_loss(r, h, w, lam)]
    fit = [float(np.linalg.norm(r - h @ w) ** 2)]
    for _ in range(max_iters):
        if fit[-1] <= eps:
            break
        rwt = ex.matmul(r, w, key_a="R")  # u x f
        h = scipy.linalg.solve(w @ w.T + eye, rwt.T, assume_a="pos").T
        rth = ex.matmul(rt, np.ascontiguousarray(h.T), key_a="R^T")  # i x f
        w = scipy.linalg.solve(h.T @ h + eye, rth.T, assume_a="pos")
        losses.append(als_loss(r, h, w, lam))
        fit.append(float(np.linalg.norm(r - h @ w) ** 2))
    return AlsResult(h, w, losses, fit)


def synth_ratings(u, i, seed=0, noise_std=0.2):
    """Uniform{1..5} ratings plus Gaussian noise, rounded to the nearest integer."""
    if u < 1 or i < 1:
        raise InvalidArgument("need at least one user and one item")
    rng = np.random.default_rng(seed)
    base = rng.integers(1, 6, size=(u, i))
    return np.rint(base + rng.normal(0.0, noise_std, size=(u, i))).astype(np.float64)


# -- tall-skinny SVD ---------------------------------------------------------


@dataclass
class SvdResult:
    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray
    rank: int

    @property
    def v(self):
        return self.vt.T


def tall_skinny_svd(a, executor=None) -> SvdResult:
    """SVD of a tall matrix through the Gram matrix ``A^T A`` and ``U = A V S^{-1}``.

    Gram eigenvalues below ``cols * eps * s_max^2`` are rounding noise (the
    Gram matrix squares the condition number); their singular values are
    treated as zero and get zero columns in U.  Each column of V is signed so its largest-magnitude
    entry is positive.
    """
    a = as_matrix(a, "A")
    m, p = a.shape
    if m < p:
        raise InvalidArgument(f"need rows >= cols, got {a.shape}")
    ex = _executor(executor)
    at = np.ascontiguousarray(a.T)
    gram = ex.matmul(at, at)
    gram = 0.5 * (gram + gram.T)
    evals, v = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1]
    evals, v = evals[order], v[:, order]
    s = np.sqrt(np.clip(evals, 0.0, None))
    if s[0] == 0:
        raise RankZero("matrix is identically zero")
    idx = np.argmax(np.abs(v), axis=0)
    v = v * np.sign(v[idx, np.arange(p)])
    keep = evals > p * np.finfo(np.float64).eps * evals[0]
    scaled = np.zeros_like(v)
    scaled[:, keep] = v[:, keep] / s[keep]
    u = ex.matmul(a, np.ascontiguousarray(scaled.T))
    return SvdResult(u, s, v.T, int(keep.sum()))
