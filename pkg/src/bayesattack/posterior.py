"""Gaussian posteriors over parameter vectors or input perturbations.

Two modes:

* isotropic: ``N(mean, sigma^2 I)``
* swag: ``N(mean, alpha * (diag + D D^T / (2 (K - 1))) + beta I)`` where ``D``
  holds the last ``K`` deviation vectors collected by a ``MomentCollector``.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .numcore import ContractViolation, RngStream
from .zoo import CheckpointError, read_container, split_blob, write_container


class MomentCollector:
    """Running first/second raw moments plus the last ``rank`` deviations.

    Snapshots may have any fixed shape; moments are elementwise. Sums are
    accumulated rather than running averages so the moments do not depend on
    update order beyond floating-point summation.
    """

    def __init__(self, rank: int = 10) -> None:
        if rank < 0:
            raise ContractViolation("rank must be non-negative")
        self.rank = rank
        self.count = 0
        self.shape: tuple[int, ...] | None = None
        self._sum: np.ndarray | None = None
        self._sumsq: np.ndarray | None = None
        self.deviations: deque[np.ndarray] = deque(maxlen=rank) if rank else deque(maxlen=0)

    def update(self, snapshot) -> "MomentCollector":
        s = np.asarray(snapshot, dtype=np.float64)
        if self.shape is None:
            self.shape = s.shape
            self._sum = np.zeros(s.shape)
            self._sumsq = np.zeros(s.shape)
        elif s.shape != self.shape:
            raise ContractViolation(f"snapshot shape {s.shape} differs from collector shape {self.shape}")
        self._sum += s
        self._sumsq += s * s
        self.count += 1
        if self.rank:
            self.deviations.append(s - self.mean)
        return self

    @property
    def mean(self) -> np.ndarray:
        if not self.count:
            raise ContractViolation("collector is empty")
        return self._sum / self.count

    @property
    def second_moment(self) -> np.ndarray:
        if not self.count:
            raise ContractViolation("collector is empty")
        return self._sumsq / self.count

    @property
    def variance(self) -> np.ndarray:
        m = self.mean
        return np.maximum(self.second_moment - m * m, 0.0)


def collector_update(c: MomentCollector, snapshot) -> MomentCollector:
    return c.update(snapshot)


@dataclass
class GaussianPosterior:
    mode: str  # "isotropic" | "swag"
    mean: np.ndarray
    sigma: float = 0.0
    diag_variance: np.ndarray | None = None
    deviations: np.ndarray | None = None  # [K, *mean.shape]
    alpha: float = 1.0
    beta: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        if self.mode == "isotropic":
            if self.sigma < 0:
                raise ContractViolation("sigma must be non-negative")
            if self.diag_variance is not None or self.deviations is not None:
                raise ContractViolation("isotropic posterior cannot carry swag moments")
        elif self.mode == "swag":
            if self.alpha < 0 or self.beta < 0:
                raise ContractViolation("alpha and beta must be non-negative")
            if self.diag_variance is None:
                self.diag_variance = np.zeros_like(self.mean)
            self.diag_variance = np.asarray(self.diag_variance, dtype=np.float64)
            if self.diag_variance.shape != self.mean.shape or np.any(self.diag_variance < 0):
                raise ContractViolation("diagonal variance must match the mean and be non-negative")
            if self.deviations is not None:
                self.deviations = np.asarray(self.deviations, dtype=np.float64)
                if self.deviations.shape[1:] != self.mean.shape:
                    raise ContractViolation("deviation columns must match the mean shape")
        else:
            raise ContractViolation(f"unknown posterior mode {self.mode!r}")

    @property
    def rank(self) -> int:
        return 0 if self.deviations is None else len(self.deviations)

    def covariance(self) -> np.ndarray:
        """Dense covariance of the flattened vector (small dimensions only)."""
        d = self.mean.size
        if self.mode == "isotropic":
            return self.sigma ** 2 * np.eye(d)
        cov = np.diag(self.diag_variance.reshape(-1))
        if self.rank >= 2:
            D = self.deviations.reshape(self.rank, d).T
            cov = cov + D @ D.T / (2 * (self.rank - 1))
        return self.alpha * cov + self.beta * np.eye(d)


def isotropic_posterior(mean, sigma: float) -> GaussianPosterior:
    return GaussianPosterior("isotropic", mean, sigma=float(sigma))


def swag_finalize(c: MomentCollector, alpha: float = 1.0, beta: float = 0.0,
                  low_rank: bool = True) -> GaussianPosterior:
    if c.count < 1:
        raise ContractViolation("cannot finalize an empty collector")
    devs = np.stack(list(c.deviations)) if (low_rank and len(c.deviations)) else None
    return GaussianPosterior("swag", c.mean, diag_variance=c.variance, deviations=devs,
                             alpha=float(alpha), beta=float(beta), meta={"count": c.count})


def input_posterior_from_trajectory(c: MomentCollector, alpha: float,
                                    fallback_sigma: float = 0.0) -> GaussianPosterior:
    """Zero-mean diagonal posterior over input noise from attack-trajectory moments.

    With fewer than two trajectory points there is no spread to measure, so an
    isotropic posterior with ``fallback_sigma`` is returned instead, flagged
    with ``meta["fallback"] = True``.
    """
    if c.count < 2:
        p = isotropic_posterior(np.zeros(c.shape or ()), fallback_sigma)
        p.meta["fallback"] = True
        return p
    return GaussianPosterior("swag", np.zeros(c.shape), diag_variance=c.variance,
                             alpha=float(alpha), beta=0.0, meta={"fallback": False, "count": c.count})


def noise_size(p: GaussianPosterior) -> int:
    """Number of standard normals one draw from ``p`` consumes."""
    d = p.mean.size
    if p.mode == "isotropic":
        return d if p.sigma else 0
    n = 0
    if p.alpha and np.any(p.diag_variance):
        n += d
    if p.alpha and p.rank >= 2:
        n += p.rank
    if p.beta:
        n += d
    return n


def transform(p: GaussianPosterior, z: np.ndarray) -> np.ndarray:
    """Map standard normals ``z[..., noise_size(p)]`` to draws ``[..., *mean.shape]``.

    swag draws are ``mean + sqrt(alpha) (sqrt(diag) z1 + D^T z2 / sqrt(2 (K-1))) + sqrt(beta) z3``.
    """
    lead = z.shape[:-1]
    d = p.mean.size
    out = np.broadcast_to(p.mean.reshape(-1), lead + (d,)).copy()
    if p.mode == "isotropic":
        if p.sigma:
            out += p.sigma * z
        return out.reshape(lead + p.mean.shape)
    off = 0
    if p.alpha and np.any(p.diag_variance):
        out += np.sqrt(p.alpha * p.diag_variance.reshape(-1)) * z[..., off:off + d]
        off += d
    if p.alpha and p.rank >= 2:
        D = p.deviations.reshape(p.rank, d)
        out += (np.sqrt(p.alpha) / np.sqrt(2.0 * (p.rank - 1))) * (z[..., off:off + p.rank] @ D)
        off += p.rank
    if p.beta:
        out += np.sqrt(p.beta) * z[..., off:off + d]
    return out.reshape(lead + p.mean.shape)


def sample(p: GaussianPosterior, stream: RngStream, n: int | None = None) -> np.ndarray:
    """One draw shaped like ``p.mean``, or ``n`` draws stacked on a new axis 0."""
    lead = () if n is None else (n,)
    k = noise_size(p)
    if k == 0:
        return np.broadcast_to(p.mean, lead + p.mean.shape).copy()
    return transform(p, stream.normal(lead + (k,)))


def save_posterior(p: GaussianPosterior, path, arch: dict | None = None) -> None:
    arrays = [("mean", p.mean)]
    if p.mode == "swag":
        arrays.append(("diag_variance", p.diag_variance))
        if p.deviations is not None:
            arrays.append(("deviations", p.deviations))
    header = {
        "kind": "posterior",
        "mode": p.mode,
        "sigma": p.sigma,
        "alpha": p.alpha,
        "beta": p.beta,
        "arch": arch,
        "meta": p.meta,
        "arrays": [{"name": name, "shape": list(a.shape)} for name, a in arrays],
    }
    write_container(path, header, [a for _, a in arrays])


def load_posterior(path) -> tuple[GaussianPosterior, dict | None]:
    header, blob = read_container(path)
    if header.get("kind") != "posterior":
        raise CheckpointError(f"{path}: holds a {header.get('kind')!r}, not a posterior")
    arrays = split_blob(header, blob)
    p = GaussianPosterior(header["mode"], arrays["mean"], sigma=header["sigma"],
                          diag_variance=arrays.get("diag_variance"),
                          deviations=arrays.get("deviations"),
                          alpha=header["alpha"], beta=header["beta"], meta=header.get("meta") or {})
    return p, header.get("arch")
