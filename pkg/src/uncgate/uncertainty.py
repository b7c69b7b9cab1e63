"""Bivariate vertex densities and their negative log-likelihoods.

Covariance parameters are kept unconstrained as ``(log_sigma1, log_sigma2,
rho_raw)`` with ``sigma = exp(log_sigma)`` and ``rho = tanh(rho_raw)``.
Array kernels take ``mu (V, 2)``, ``params (V, 3)`` and ``target (V, 2)``
and return the summed loss together with analytic gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import InvalidValue, NonFiniteLoss

LOG_2PI = math.log(2.0 * math.pi)
DET_FLOOR = 1e-12
ELEMENT_CLASSES = ("divider", "boundary", "crossing")


@dataclass(frozen=True)
class CovParams:
    log_sigma1: float = 0.0
    log_sigma2: float = 0.0
    rho_raw: float = 0.0

    @property
    def sigma1(self) -> float:
        return math.exp(self.log_sigma1)

    @property
    def sigma2(self) -> float:
        return math.exp(self.log_sigma2)

    @property
    def rho(self) -> float:
        return math.tanh(self.rho_raw)

    def matrix(self) -> np.ndarray:
        return cov_matrix(np.array([[self.log_sigma1, self.log_sigma2, self.rho_raw]]))[0]

    @classmethod
    def from_moments(cls, sigma1: float, sigma2: float, rho: float) -> "CovParams":
        if sigma1 <= 0 or sigma2 <= 0 or not -1 < rho < 1:
            raise InvalidValue(f"infeasible covariance ({sigma1}, {sigma2}, {rho})")
        return cls(math.log(sigma1), math.log(sigma2), math.atanh(rho))


@dataclass(frozen=True)
class UncertainVertex:
    mu: tuple[float, float]
    cov: CovParams = field(default_factory=CovParams)

    def __post_init__(self):
        if not np.all(np.isfinite(self.mu)):
            raise InvalidValue(f"non-finite vertex mean {self.mu}")


@dataclass
class MapElement:
    vertices: list[UncertainVertex]
    kind: str = "divider"

    def __post_init__(self):
        if len(self.vertices) < 2:
            raise InvalidValue("a map element needs at least two vertices")
        if self.kind not in ELEMENT_CLASSES:
            raise InvalidValue(f"unknown element class {self.kind!r}")


@dataclass
class PolylineMap:
    elements: list[MapElement]

    def __post_init__(self):
        if self.n_vertices == 0:
            raise InvalidValue("map has no vertices")

    @property
    def n_vertices(self) -> int:
        return sum(len(e.vertices) for e in self.elements)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked ``(mu (V, 2), params (V, 3))`` in element order."""
        verts = [v for e in self.elements for v in e.vertices]
        mu = np.array([v.mu for v in verts], dtype=np.float64)
        params = np.array([[v.cov.log_sigma1, v.cov.log_sigma2, v.cov.rho_raw] for v in verts])
        return mu, params

    @classmethod
    def from_arrays(cls, mu, params, sizes: Sequence[int], kinds: Sequence[str] | None = None):
        mu, params = np.asarray(mu, float), np.asarray(params, float)
        kinds = kinds or ["divider"] * len(sizes)
        elements, start = [], 0
        for n, kind in zip(sizes, kinds):
            verts = [UncertainVertex(tuple(mu[i]), CovParams(*params[i])) for i in range(start, start + n)]
            elements.append(MapElement(verts, kind))
            start += n
        return cls(elements)


class NLLResult(NamedTuple):
    loss: float
    grad_mu: np.ndarray
    grad_params: np.ndarray


def _log_cosh(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    return ax + np.log1p(np.exp(-2.0 * ax)) - math.log(2.0)


def cov_matrix(params: np.ndarray) -> np.ndarray:
    """``(V, 3)`` unconstrained parameters to ``(V, 2, 2)`` covariance matrices."""
    params = np.atleast_2d(params)
    s1, s2 = np.exp(params[:, 0]), np.exp(params[:, 1])
    rho = np.tanh(params[:, 2])
    out = np.empty((len(params), 2, 2))
    out[:, 0, 0] = s1 * s1
    out[:, 1, 1] = s2 * s2
    out[:, 0, 1] = out[:, 1, 0] = rho * s1 * s2
    return out


def moments_from_matrix(cov: np.ndarray) -> np.ndarray:
    """``(V, 2, 2)`` covariance to ``(V, 3)`` rows of ``(sigma1, sigma2, rho)``."""
    cov = np.asarray(cov, float).reshape(-1, 2, 2)
    s1 = np.sqrt(cov[:, 0, 0])
    s2 = np.sqrt(cov[:, 1, 1])
    denom = s1 * s2
    rho = np.divide(cov[:, 0, 1], denom, out=np.zeros_like(denom), where=denom > 0)
    return np.stack([s1, s2, rho], axis=1)


def params_from_moments(moments: np.ndarray, rho_clip=0.999999) -> np.ndarray:
    m = np.atleast_2d(np.asarray(moments, float))
    return np.stack([np.log(m[:, 0]), np.log(m[:, 1]), np.arctanh(np.clip(m[:, 2], -rho_clip, rho_clip))], axis=1)


def _check(loss: float):
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"non-finite NLL ({loss}); scales have collapsed or overflowed")


def gaussian_nll_terms(mu, params, target) -> np.ndarray:
    """Per-vertex correlated-Gaussian NLL without regularization."""
    return _gaussian_terms(np.asarray(mu, float), np.asarray(params, float), np.asarray(target, float))[0]


def _gaussian_terms(mu, params, target):
    s1, s2, r = params[:, 0], params[:, 1], params[:, 2]
    rho = np.tanh(r)
    log_one_m_rho2 = -2.0 * _log_cosh(r)  # log(1 - rho^2), stable for large |r|
    logdet = 2.0 * s1 + 2.0 * s2 + log_one_m_rho2
    clamped = logdet < math.log(DET_FLOOR)
    logdet_c = np.where(clamped, math.log(DET_FLOOR), logdet)
    # Inverse uses the floored determinant: Sigma^-1 = adj(Sigma) / max(det, floor).
    shrink = np.exp(logdet - logdet_c)
    d = target - mu
    # Overflow surfaces as a non-finite loss, which the callers turn into NonFiniteLoss.
    with np.errstate(over="ignore", invalid="ignore"):
        z1 = d[:, 0] * np.exp(-s1)
        z2 = d[:, 1] * np.exp(-s2)
        a = np.exp(-log_one_m_rho2)  # 1 / (1 - rho^2)
        q = z1 * z1 - 2.0 * rho * z1 * z2 + z2 * z2
        terms = LOG_2PI + 0.5 * logdet_c + 0.5 * a * q * shrink
    return terms, (s1, s2, r, rho, a, q, z1, z2, clamped, shrink)


def gaussian_nll(mu, params, target, reg: float = 0.0) -> NLLResult:
    """Correlated bivariate Gaussian NLL summed over vertices.

    ``sum_i 0.5 log((2 pi)^2 |S_i|) + 0.5 (v_i - mu_i)^T S_i^-1 (v_i - mu_i)``
    plus ``reg * sum_i (log_sigma1^2 + log_sigma2^2 + rho_raw^2)``.
    """
    mu, params, target = (np.asarray(x, dtype=np.float64) for x in (mu, params, target))
    terms, (s1, s2, r, rho, a, q, z1, z2, clamped, shrink) = _gaussian_terms(mu, params, target)
    loss = float(terms.sum() + reg * np.sum(params * params))
    _check(loss)

    k = a * shrink
    e1 = np.exp(-s1)
    e2 = np.exp(-s2)
    grad_mu = np.empty_like(mu)
    grad_mu[:, 0] = -k * (z1 - rho * z2) * e1
    grad_mu[:, 1] = -k * (z2 - rho * z1) * e2
    g = np.empty_like(params)
    # Unclamped: d/ds1 = 1 - a (z1^2 - rho z1 z2); clamped: log-det term is constant and
    # the shrink factor exp(logdet - log floor) carries the s1 dependence.
    logdet_grad = np.where(clamped, 0.0, 1.0)
    quad_self1 = -k * (z1 * z1 - rho * z1 * z2)
    quad_self2 = -k * (z2 * z2 - rho * z1 * z2)
    shrink_grad = np.where(clamped, 0.5 * k * q, 0.0)  # d(shrink)/ds = 2 shrink -> 0.5*a*q*2*shrink
    g[:, 0] = logdet_grad + quad_self1 + 2.0 * shrink_grad
    g[:, 1] = logdet_grad + quad_self2 + 2.0 * shrink_grad
    drho = (-rho * a * logdet_grad) + k * (rho * a * q - z1 * z2)
    # shrink depends on rho via log(1 - rho^2): d shrink / d rho = shrink * (-2 rho a)
    drho += np.where(clamped, 0.5 * a * q * shrink * (-2.0 * rho * a), 0.0)
    g[:, 2] = drho * (1.0 - rho * rho)
    g += 2.0 * reg * params
    return NLLResult(loss, grad_mu, g)


def indep_gaussian_nll(mu, params, target, reg: float = 0.0) -> NLLResult:
    """Axis-aligned Gaussian NLL; the correlation column is ignored."""
    mu, params, target = (np.asarray(x, dtype=np.float64) for x in (mu, params, target))
    s1, s2 = params[:, 0], params[:, 1]
    logdet = 2.0 * s1 + 2.0 * s2
    logdet_c = np.maximum(logdet, math.log(DET_FLOOR))
    shrink = np.exp(logdet - logdet_c)
    clamped = logdet < math.log(DET_FLOOR)
    d = target - mu
    z1 = d[:, 0] * np.exp(-s1)
    z2 = d[:, 1] * np.exp(-s2)
    q = z1 * z1 + z2 * z2
    terms = LOG_2PI + 0.5 * logdet_c + 0.5 * q * shrink
    loss = float(terms.sum() + reg * np.sum(params[:, :2] ** 2))
    _check(loss)
    grad_mu = np.stack([-shrink * z1 * np.exp(-s1), -shrink * z2 * np.exp(-s2)], axis=1)
    g = np.zeros_like(params)
    base = np.where(clamped, 0.0, 1.0)
    extra = np.where(clamped, q * shrink, 0.0)
    g[:, 0] = base - shrink * z1 * z1 + extra
    g[:, 1] = base - shrink * z2 * z2 + extra
    g[:, :2] += 2.0 * reg * params[:, :2]
    return NLLResult(loss, grad_mu, g)


def indep_laplace_nll(mu, params, target, reg: float = 0.0) -> NLLResult:
    """Two independent Laplace NLLs with scales ``b = exp(log_sigma)``.

    ``sum_i log(2 b1) + |dx| / b1 + log(2 b2) + |dy| / b2``; the correlation
    column is ignored.
    """
    mu, params, target = (np.asarray(x, dtype=np.float64) for x in (mu, params, target))
    s = params[:, :2]
    d = target - mu
    inv_b = np.exp(-s)
    loss = float(np.sum(math.log(2.0) + s + np.abs(d) * inv_b) + reg * np.sum(s * s))
    _check(loss)
    grad_mu = -np.sign(d) * inv_b
    g = np.zeros_like(params)
    g[:, :2] = 1.0 - np.abs(d) * inv_b + 2.0 * reg * s
    return NLLResult(loss, grad_mu, g)


def laplace_nll_terms(mu, params, target) -> np.ndarray:
    d = np.asarray(target, float) - np.asarray(mu, float)
    s = np.asarray(params, float)[:, :2]
    return np.sum(math.log(2.0) + s + np.abs(d) * np.exp(-s), axis=1)


def indep_gaussian_nll_terms(mu, params, target) -> np.ndarray:
    p = np.array(params, dtype=float, copy=True)
    p[:, 2] = 0.0
    return gaussian_nll_terms(mu, p, target)


LOSSES = {
    "gaussian_cov": gaussian_nll,
    "gaussian_indep": indep_gaussian_nll,
    "laplace_indep": indep_laplace_nll,
}

LOSS_TERMS = {
    "gaussian_cov": gaussian_nll_terms,
    "gaussian_indep": indep_gaussian_nll_terms,
    "laplace_indep": laplace_nll_terms,
}


def map_nll(pmap: PolylineMap, observed, kind: str = "gaussian_cov", reg: float = 0.0) -> NLLResult:
    """Evaluate one of the losses on a :class:`PolylineMap` against one target per vertex."""
    mu, params = pmap.arrays()
    observed = np.asarray(observed, dtype=np.float64)
    if observed.shape != mu.shape or not np.all(np.isfinite(observed)):
        raise InvalidValue(f"need one finite target per vertex, got {observed.shape} for {mu.shape}")
    return LOSSES[kind](mu, params, observed, reg)


def gaussian_pdf(vertex: UncertainVertex, point) -> float:
    cov = vertex.cov.matrix()
    d = np.asarray(point, float) - np.asarray(vertex.mu, float)
    det = max(float(np.linalg.det(cov)), DET_FLOOR)
    m = float(d @ np.linalg.solve(cov, d))
    return math.exp(-0.5 * m) / (2.0 * math.pi * math.sqrt(det))


def sample_vertex(vertex: UncertainVertex, rng_seed, size: int | None = None) -> np.ndarray:
    """Draw from the vertex density through the Cholesky factor of its covariance."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    chol = np.linalg.cholesky(vertex.cov.matrix())
    n = 1 if size is None else size
    z = rng.standard_normal((n, 2))
    out = np.asarray(vertex.mu, float) + z @ chol.T
    return out[0] if size is None else out
