"""Node/weight rules for integrating over random effects and over time.

Random-effect integrals use nodes in standard-normal space (Gauss-Hermite
product rules, Halton/Sobol quasi-random sequences, or plain Monte Carlo
draws), which are rescaled by the current random-effect Cholesky factor at
every likelihood evaluation.  Time integrals use Gauss-Legendre rules.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61)


@dataclass(frozen=True)
class NodeSet:
    """Integration nodes in standard-normal space with matching weights."""

    nodes: np.ndarray    # (n, r)
    weights: np.ndarray  # (n,), sums to 1
    method: str
    n_points: int        # per-dimension count (GH) or total (QMC/MC)


def gauss_hermite(n: int) -> tuple[np.ndarray, np.ndarray]:
    """One-dimensional probabilists' Gauss-Hermite rule.

    Returns nodes z and weights w with sum(w) == 1, so that
    integral of f(z) against the standard normal density is approximately
    sum(w * f(z)).  Exact for polynomials of degree <= 2n - 1.
    """
    if not 1 <= n <= 200:
        raise ValueError(f"Gauss-Hermite point count must be in [1, 200], got {n}")
    nodes, weights = np.polynomial.hermite_e.hermegauss(n)
    weights = weights / np.sqrt(2.0 * np.pi)
    return nodes, weights


def gauss_legendre(n: int, a: float, b: float) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre rule on [a, b], exact for polynomials of degree <= 2n - 1."""
    if n < 1:
        raise ValueError("need at least one Gauss-Legendre point")
    if not a < b:
        raise ValueError(f"invalid interval [{a}, {b}]")
    x, w = np.polynomial.legendre.leggauss(n)
    half = 0.5 * (b - a)
    return a + half * (x + 1.0), half * w


def gh_product_rule(n: int, r: int) -> NodeSet:
    """Tensor-product Gauss-Hermite rule in r dimensions (n^r points)."""
    z, w = gauss_hermite(n)
    if r == 0:
        return NodeSet(np.zeros((1, 0)), np.ones(1), "ghermite", n)
    grids = np.meshgrid(*([z] * r), indexing="ij")
    nodes = np.column_stack([g.ravel() for g in grids])
    wgrids = np.meshgrid(*([w] * r), indexing="ij")
    weights = np.prod(np.stack([g.ravel() for g in wgrids]), axis=0)
    return NodeSet(nodes, weights, "ghermite", n)


def _halton(n: int, r: int) -> np.ndarray:
    """Unscrambled Halton points in (0,1)^r, starting at index 1 to avoid 0."""
    if r > len(_PRIMES):
        raise ValueError(f"Halton supported up to dimension {len(_PRIMES)}")
    out = np.empty((n, r))
    for j in range(r):
        base = _PRIMES[j]
        for i in range(n):
            f, x, k = 1.0, 0.0, i + 1
            while k > 0:
                f /= base
                x += f * (k % base)
                k //= base
            out[i, j] = x
    return out


def qmc_nodes(method: str, n: int, r: int, seed: int = 0) -> NodeSet:
    """Quasi- or pseudo-random normal node set with uniform weights 1/n.

    Uniform points on (0,1)^r are mapped through the standard-normal
    inverse CDF.  Halton uses the first r primes as bases; Sobol uses the
    Joe-Kuo direction numbers shipped with scipy; mc draws from a seeded
    generator, so equal seeds give bitwise-identical node sets.
    """
    if n < 2:
        raise ValueError("QMC/MC integration needs at least 2 points")
    if r < 1:
        raise ValueError("dimension must be >= 1")
    if method == "halton":
        u = _halton(n, r)
    elif method == "sobol":
        sob = qmc.Sobol(d=r, scramble=False)
        u = sob.random(n + 1)[1:]  # drop the all-zeros first point
    elif method == "mc":
        rng = np.random.default_rng(seed)
        u = rng.random((n, r))
        u = np.clip(u, 1e-12, 1.0 - 1e-12)
    else:
        raise ValueError(f"unknown integration method {method!r}")
    nodes = ndtri(u)
    weights = np.full(n, 1.0 / n)
    return NodeSet(nodes, weights, method, n)


def level_nodes(method: str, ip: int, r: int, seed: int = 0) -> NodeSet:
    """Node set for one random-effect level (GH product rule or QMC/MC)."""
    if r == 0:
        return NodeSet(np.zeros((1, 0)), np.ones(1), method, ip)
    if method == "ghermite":
        return gh_product_rule(ip, r)
    return qmc_nodes(method, ip, r, seed)


@dataclass
class CovarianceParam:
    """Random-effect covariance for one level under a log/atanh parameterization.

    The implied covariance is L L' with L = diag(exp(log_sd)) @ chol(C)
    where C is the correlation matrix built from tanh of the correlation
    parameters (identity structure: C = I).
    """

    structure: str                      # identity | diagonal | unstructured
    log_sd: np.ndarray = field(default_factory=lambda: np.zeros(0))
    atanh_corr: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def dim(self) -> int:
        return len(self.log_sd)

    def cholesky(self) -> np.ndarray:
        d = self.dim
        D = np.diag(np.exp(self.log_sd))
        if self.structure != "unstructured" or d <= 1:
            return D
        C = np.eye(d)
        idx = 0
        for i in range(1, d):
            for j in range(i):
                C[i, j] = C[j, i] = np.tanh(self.atanh_corr[idx])
                idx += 1
        try:
            Lc = np.linalg.cholesky(C)
        except np.linalg.LinAlgError:
            # tanh keeps entries in (-1,1) but for dim >= 3 the matrix can
            # leave the PD cone; project to the nearest PD correlation
            # matrix (clip eigenvalues, restore the unit diagonal)
            w, V = np.linalg.eigh(C)
            C = V @ np.diag(np.maximum(w, 1e-6)) @ V.T
            s = 1.0 / np.sqrt(np.diag(C))
            C = s[:, None] * C * s[None, :]
            Lc = np.linalg.cholesky(C + 1e-10 * np.eye(d))
        return D @ Lc

    def n_corr(self) -> int:
        d = self.dim
        return d * (d - 1) // 2 if self.structure == "unstructured" else 0


def transform_nodes(ns: NodeSet, cov: CovarianceParam) -> np.ndarray:
    """Scale standard-normal nodes into random-effect draws b = z L'."""
    if ns.nodes.shape[1] != cov.dim:
        raise ValueError(
            f"node dimension {ns.nodes.shape[1]} != covariance dimension {cov.dim}"
        )
    if cov.dim == 0:
        return ns.nodes
    return ns.nodes @ cov.cholesky().T
