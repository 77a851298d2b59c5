"""Per-observation log-likelihood kernels and link calculus for each family.

Scalar-family kernels operate elementwise on arrays of responses and linear
predictors; the survival calculus (hazard / cumulative hazard assembly,
which may need the predictor's time derivative or a numeric time integral)
lives in the evaluator, which calls back into these kernels.
"""

import numpy as np
from scipy.special import expit, gammaln

LOG_2PI = np.log(2.0 * np.pi)

# implicit ancillary parameters per family, with their report labels
ANCILLARY = {
    "gaussian": ["log_sd(resid.)"],
    "bernoulli": [],
    "poisson": [],
    "beta": ["log_phi"],
    "negbinomial": ["log_alpha"],
    "exponential": [],
    "weibull": ["log(gamma)"],
    "gompertz": ["gamma"],
    "rp": [],
    "loghazard": [],
    "user": [],
    "null": [],
}

HAS_MEAN = ("gaussian", "bernoulli", "poisson", "beta", "negbinomial", "null")


def mean_value(family: str, eta: np.ndarray) -> np.ndarray:
    """Inverse-link of the complex predictor (the family mean)."""
    if family in ("gaussian", "null", "user"):
        return eta
    if family in ("bernoulli", "beta"):
        return expit(eta)
    if family in ("poisson", "negbinomial"):
        return np.exp(eta)
    raise ValueError(f"family {family!r} has no mean function")


def mean_d1(family: str, eta: np.ndarray) -> np.ndarray:
    """First derivative of the inverse link, d mu / d eta."""
    if family in ("gaussian", "null", "user"):
        return np.ones_like(eta)
    if family in ("bernoulli", "beta"):
        p = expit(eta)
        return p * (1.0 - p)
    if family in ("poisson", "negbinomial"):
        return np.exp(eta)
    raise ValueError(f"family {family!r} has no mean function")


def mean_d2(family: str, eta: np.ndarray) -> np.ndarray:
    """Second derivative of the inverse link."""
    if family in ("gaussian", "null", "user"):
        return np.zeros_like(eta)
    if family in ("bernoulli", "beta"):
        p = expit(eta)
        return p * (1.0 - p) * (1.0 - 2.0 * p)
    if family in ("poisson", "negbinomial"):
        return np.exp(eta)
    raise ValueError(f"family {family!r} has no mean function")


def scalar_loglik(family: str, y: np.ndarray, eta: np.ndarray, ap: np.ndarray) -> np.ndarray:
    """Log-likelihood contributions for a non-survival family.

    y is (n,), eta is (n, nq) and broadcasting applies; ap holds the
    family's ancillary parameters on their unrestricted scale.
    """
    y = y[:, None]
    if family == "gaussian":
        log_sd = ap[0]
        return -0.5 * LOG_2PI - log_sd - (y - eta) ** 2 / (2.0 * np.exp(2.0 * log_sd))
    if family == "bernoulli":
        # y*eta - log(1 + exp(eta)), stable via logaddexp
        return y * eta - np.logaddexp(0.0, eta)
    if family == "poisson":
        return y * eta - np.exp(eta) - gammaln(y + 1.0)
    if family == "negbinomial":
        alpha = np.exp(ap[0])
        mu = np.exp(eta)
        inv = 1.0 / alpha
        return (
            gammaln(y + inv) - gammaln(inv) - gammaln(y + 1.0)
            + y * np.log(alpha * mu / (1.0 + alpha * mu))
            - inv * np.log1p(alpha * mu)
        )
    if family == "beta":
        phi = np.exp(ap[0])
        mu = expit(eta)
        return (
            gammaln(phi) - gammaln(mu * phi) - gammaln((1.0 - mu) * phi)
            + (mu * phi - 1.0) * np.log(y)
            + ((1.0 - mu) * phi - 1.0) * np.log1p(-y)
        )
    if family == "null":
        return np.zeros(np.broadcast_shapes(y.shape, eta.shape))
    raise ValueError(f"no scalar kernel for family {family!r}")


def baseline_cumhazard_factor(family: str, t: np.ndarray, ap: np.ndarray) -> np.ndarray:
    """Lambda0(t) such that H(t) = exp(eta) * Lambda0(t) for a
    time-constant predictor (exponential / weibull / gompertz only)."""
    if family == "exponential":
        return t
    if family == "weibull":
        gamma = np.exp(ap[0])
        return t**gamma
    if family == "gompertz":
        gamma = ap[0]
        if abs(gamma) < 1e-12:
            return t
        return np.expm1(gamma * t) / gamma
    raise ValueError(f"no closed-form cumulative hazard for family {family!r}")


def log_hazard_offset(family: str, t: np.ndarray, ap: np.ndarray) -> np.ndarray:
    """log h(t) - eta(t) for the standard survival families."""
    if family == "exponential":
        return np.zeros_like(t)
    if family == "weibull":
        gamma = np.exp(ap[0])
        return np.log(gamma) + (gamma - 1.0) * np.log(t)
    if family == "gompertz":
        return ap[0] * t
    if family == "loghazard":
        return np.zeros_like(t)
    raise ValueError(f"family {family!r} has no log-hazard offset form")
