"""Synthetic samples Y = alpha(U) + beta(U).X with stratified U independent of X"""
import logging
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import Polynomial

from vqr.measures import DiscreteSample, center

log = logging.getLogger(__name__)

NOISE_MODES = ("none", "perturb")
MONOTONE_CHECK_POINTS = 1001

PRESETS = {
    "specified": {
        "x_support": ((-0.5,), (0.5,)),
        "x_probs": (0.5, 0.5),
        "alpha": (0.0, 1.0),
        "beta": ((1.0, 0.5),),
    },
    "independent": {
        "x_support": ((-0.5,), (0.5,)),
        "x_probs": (0.5, 0.5),
        "alpha": (0.0, 1.0),
        "beta": ((0.0,),),
    },
}


@dataclass(frozen=True)
class SyntheticSpec:
    """Coefficients are ascending polynomial coefficients in u; beta holds one
    polynomial per covariate. n is the number of strata of U."""

    n: int
    x_support: tuple
    x_probs: tuple
    alpha: tuple
    beta: tuple
    noise: str = "none"
    noise_scale: float = 0.05
    seed: int = 0
    check_monotone: bool = True

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be at least 1")
        support = self.support
        probs = np.asarray(self.x_probs, dtype=float)
        if support.shape[0] != probs.shape[0]:
            raise ValueError("x_support needs one probability per point")
        if np.any(probs <= 0) or abs(probs.sum() - 1) > 1e-12:
            raise ValueError("x_probs must be positive and sum to one")
        if len(self.beta) != support.shape[1]:
            raise ValueError(f"{support.shape[1]} covariates but {len(self.beta)} beta polynomials")
        if self.noise not in NOISE_MODES:
            raise ValueError(f"noise must be one of {NOISE_MODES}")
        if self.noise == "perturb" and not self.noise_scale > 0:
            raise ValueError("noise_scale must be positive")
        if self.check_monotone:
            worst = float(self.slope(np.linspace(0, 1, MONOTONE_CHECK_POINTS)).min())
            if worst <= 0:
                raise ValueError(f"alpha'(u) + beta'(u).x is not positive on the support (min {worst:.3g})")

    @property
    def support(self):
        support = np.asarray(self.x_support, dtype=float)
        return support.reshape(len(support), -1)

    @classmethod
    def preset(cls, name, n, seed=0, noise="none", noise_scale=0.05):
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
        return cls(n=n, seed=seed, noise=noise, noise_scale=noise_scale, **PRESETS[name])

    def coefficients(self, u, deriv=0):
        """alpha(u) and the N x len(u) matrix of beta_k(u), or their derivatives"""
        u = np.asarray(u, dtype=float)
        alpha = Polynomial(self.alpha).deriv(deriv)(u)
        beta = np.array([Polynomial(b).deriv(deriv)(u) for b in self.beta]).reshape(len(self.beta), *u.shape)
        return alpha, beta

    def slope(self, u):
        """d/du Q(x, u) at every (u, support point), len(u) x K"""
        da, db = self.coefficients(u, deriv=1)
        return da[:, None] + db.T @ self.support.T

    def quantile(self, x, u):
        """alpha(u) + beta(u).x"""
        a, b = self.coefficients(u)
        return a + np.tensordot(np.atleast_1d(np.asarray(x, dtype=float)), b, axes=1)

    def to_dict(self):
        return {
            "n": self.n,
            "x_support": self.support.tolist(),
            "x_probs": list(self.x_probs),
            "alpha": list(self.alpha),
            "beta": [list(b) for b in self.beta],
            "noise": self.noise,
            "noise_scale": self.noise_scale,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class SyntheticData:
    """A centered sample plus the latent levels that generated it"""

    sample: DiscreteSample
    u: np.ndarray
    stratum: np.ndarray
    spec: SyntheticSpec

    def truth(self):
        return {
            "spec": self.spec.to_dict(),
            "x_mean": self.sample.x_mean.tolist(),
            "u": self.u.tolist(),
            "stratum": self.stratum.tolist(),
        }


def gen_synthetic(spec):
    """One uniform draw of U per stratum ((i + r_i)/n), paired with every
    covariate support point; Y = alpha(U) + beta(U).x.

    Each pair carries weight p_k / n, so Law(U) is exactly the stratified
    uniform and E(X | U) = E(X). The "perturb" noise splits each atom into
    y +/- noise_scale with half the weight.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    u_strata = (np.arange(n) + rng.uniform(size=n)) / n
    support = spec.support
    probs = np.asarray(spec.x_probs, dtype=float)
    K = len(probs)

    stratum = np.repeat(np.arange(n), K)
    u = u_strata[stratum]
    x = np.tile(support, (n, 1))
    w = np.tile(probs, n) / n
    alpha, beta = spec.coefficients(u)
    y = alpha + np.sum(beta.T * x, axis=1)

    if spec.noise == "perturb":
        stratum = np.repeat(stratum, 2)
        u = np.repeat(u, 2)
        x = np.repeat(x, 2, axis=0)
        w = np.repeat(w, 2) / 2
        y = np.repeat(y, 2) + np.tile([-spec.noise_scale, spec.noise_scale], len(y))

    w = w / w.sum()
    sample = center(DiscreteSample(x=x, y=y.reshape(-1, 1), w=w))
    log.info(f"Generated {sample.n} atoms from {n} strata ({spec.noise} noise, seed {spec.seed})")
    return SyntheticData(sample=sample, u=u, stratum=stratum, spec=spec)
