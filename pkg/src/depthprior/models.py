"""Unconditional density models over disparity patches.

Four families: the derivative-penalty Gaussian (quadratic penalty), the
derivative-penalty Laplacian (absolute penalty, energy/MAP only), a single
full-covariance Gaussian, and a Gaussian mixture with one shared mean.
All log-densities are in nats.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.special import logsumexp

from .container import decode_meta, meta_tensor, read_container, write_container
from .core import PATCH_SIDE, as_matrix, as_vector
from .errors import ModelFormatError
from .operators import (
    DerivativeOperator,
    PrecisionMatrix,
    build_derivative_operator,
    build_dl2_precision,
)

LOG_2PI = float(np.log(2.0 * np.pi))


def _check_finite(x: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")
    return x


class GaussianModel:
    """Multivariate Gaussian with cached Cholesky factor and log-determinant."""

    def __init__(self, mean, covariance):
        self.mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        cov = np.asarray(covariance, dtype=np.float64)
        if cov.shape != (self.mean.size, self.mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean size {self.mean.size}")
        self.covariance = 0.5 * (cov + cov.T)
        try:
            self.chol = np.linalg.cholesky(self.covariance)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance is not positive definite") from exc
        self.log_det_cov = 2.0 * float(np.sum(np.log(np.diag(self.chol))))
        self.precision = None  # set when constructed from a precision matrix

    @property
    def dim(self) -> int:
        return self.mean.size

    @classmethod
    def from_precision(cls, mean, precision) -> "GaussianModel":
        """Build from a (dense or sparse) precision matrix, keeping it cached."""
        p = precision.toarray() if sp.issparse(precision) else np.asarray(precision, dtype=np.float64)
        chol_p = np.linalg.cholesky(0.5 * (p + p.T))
        eye = np.eye(p.shape[0])
        cov = sla.cho_solve((chol_p, True), eye)
        model = cls(mean, 0.5 * (cov + cov.T))
        model.precision = 0.5 * (p + p.T)
        # The factored precision gives the exact log-determinant; prefer it.
        model.log_det_cov = -2.0 * float(np.sum(np.log(np.diag(chol_p))))
        return model

    @classmethod
    def from_quadratic_form(cls, q: PrecisionMatrix, mean=None) -> "GaussianModel":
        """Gaussian for a density exp(-x'Qx): precision is 2Q (see operators)."""
        mean = np.zeros(q.n) if mean is None else mean
        return cls.from_precision(mean, 2.0 * q.dense())

    def log_density(self, x) -> float:
        return float(self.log_density_batch(as_vector(x)[None, :])[0])

    def log_density_batch(self, xs: np.ndarray) -> np.ndarray:
        xs = _check_finite(np.asarray(xs, dtype=np.float64))
        z = sla.solve_triangular(self.chol, (xs - self.mean).T, lower=True)
        quad = np.einsum("in,in->n", z, z)
        return -0.5 * (self.dim * LOG_2PI + self.log_det_cov + quad)

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        count = 1 if n is None else n
        z = rng.standard_normal((count, self.dim))
        out = self.mean + z @ self.chol.T
        return out[0] if n is None else out

    def to_tensors(self):
        tensors = [("mean", self.mean), ("covariance", self.covariance)]
        return "gaussian", tensors, {}

    @classmethod
    def from_tensors(cls, tensors, meta) -> "GaussianModel":
        return cls(tensors["mean"], tensors["covariance"])


class GmmModel:
    """Gaussian mixture with one shared mean and full per-component covariances."""

    def __init__(self, weights, mean, covariances):
        self.weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        self.mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        self.covariances = np.asarray(covariances, dtype=np.float64)
        k, n = self.weights.size, self.mean.size
        if self.covariances.shape != (k, n, n):
            raise ValueError(
                f"covariances shape {self.covariances.shape} does not match K={k}, dim={n}"
            )
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixing weights must be nonnegative and sum to 1")
        try:
            self.chols = np.linalg.cholesky(self.covariances)
        except np.linalg.LinAlgError as exc:
            raise ValueError("every component covariance must be positive definite") from exc
        diag = np.einsum("kii->ki", self.chols)
        self.log_dets = 2.0 * np.sum(np.log(diag), axis=1)
        with np.errstate(divide="ignore"):
            self.log_weights = np.log(self.weights)

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.mean.size

    def component_log_densities(self, xs: np.ndarray) -> np.ndarray:
        """Per-component Gaussian log-densities, shape (n, K)."""
        xs = _check_finite(np.asarray(xs, dtype=np.float64))
        centered = (xs - self.mean).T
        out = np.empty((xs.shape[0], self.n_components))
        for k in range(self.n_components):
            z = sla.solve_triangular(self.chols[k], centered, lower=True)
            quad = np.einsum("in,in->n", z, z)
            out[:, k] = -0.5 * (self.dim * LOG_2PI + self.log_dets[k] + quad)
        return out

    def log_density_batch(self, xs: np.ndarray) -> np.ndarray:
        comp = self.component_log_densities(xs)
        return logsumexp(comp + self.log_weights, axis=1)

    def log_density(self, x) -> float:
        return float(self.log_density_batch(as_vector(x)[None, :])[0])

    def responsibilities(self, xs: np.ndarray, log_weights: np.ndarray | None = None) -> np.ndarray:
        """Posterior component probabilities, shape (n, K).

        `log_weights` overrides the model's own mixing weights; it may be a
        single K-vector or one row per input.
        """
        lw = self.log_weights if log_weights is None else np.asarray(log_weights)
        joint = self.component_log_densities(xs) + lw
        return np.exp(joint - logsumexp(joint, axis=1, keepdims=True))

    def component_gaussian(self, k: int) -> GaussianModel:
        return GaussianModel(self.mean, self.covariances[k])

    def sample(self, rng: np.random.Generator, n: int | None = None,
               component: int | None = None):
        """Draw samples; returns (samples, components), or a single vector if n is None."""
        count = 1 if n is None else n
        if component is None:
            comps = rng.choice(self.n_components, size=count, p=self.weights)
        else:
            comps = np.full(count, component, dtype=np.int64)
        z = rng.standard_normal((count, self.dim))
        out = np.empty((count, self.dim))
        for k in np.unique(comps):
            idx = comps == k
            out[idx] = self.mean + z[idx] @ self.chols[k].T
        if n is None:
            return out[0]
        return out, comps

    def to_tensors(self):
        tensors = [("pi", self.weights), ("d0", self.mean), ("sigma_k", self.covariances)]
        return "gmm", tensors, {}

    @classmethod
    def from_tensors(cls, tensors, meta) -> "GmmModel":
        return cls(tensors["pi"], tensors["d0"], tensors["sigma_k"])


class Dl2Model:
    """Quadratic derivative-penalty Gaussian over patches of a fixed grid."""

    def __init__(self, lam: float, eps: float,
                 width: int = PATCH_SIDE, height: int = PATCH_SIDE):
        if lam <= 0 or eps <= 0:
            raise ValueError("lam and eps must be positive")
        self.lam = float(lam)
        self.eps = float(eps)
        self.width = int(width)
        self.height = int(height)

    @cached_property
    def operator(self) -> DerivativeOperator:
        return build_derivative_operator(self.width, self.height)

    @cached_property
    def quadratic_form(self) -> PrecisionMatrix:
        return build_dl2_precision(self.operator, self.lam, self.eps)

    @cached_property
    def gaussian(self) -> GaussianModel:
        return GaussianModel.from_quadratic_form(self.quadratic_form)

    @property
    def dim(self) -> int:
        return self.width * self.height

    def log_density(self, x) -> float:
        return self.gaussian.log_density(x)

    def log_density_batch(self, xs: np.ndarray) -> np.ndarray:
        return self.gaussian.log_density_batch(xs)

    def sample(self, rng: np.random.Generator, n: int | None = None):
        return self.gaussian.sample(rng, n)

    def to_tensors(self):
        meta = {"lam": self.lam, "eps": self.eps, "width": self.width, "height": self.height}
        return "dl2", [], meta

    @classmethod
    def from_tensors(cls, tensors, meta) -> "Dl2Model":
        return cls(meta["lam"], meta["eps"], meta.get("width", PATCH_SIDE),
                   meta.get("height", PATCH_SIDE))


class Dl1Model:
    """Absolute derivative-penalty model; exposes energy and MAP only.

    The normalization constant is intractable, so there is no log_density.
    """

    def __init__(self, lam: float, eps: float,
                 width: int = PATCH_SIDE, height: int = PATCH_SIDE):
        if lam <= 0 or eps < 0:
            raise ValueError("lam must be positive, eps nonnegative")
        self.lam = float(lam)
        self.eps = float(eps)
        self.width = int(width)
        self.height = int(height)

    @cached_property
    def operator(self) -> DerivativeOperator:
        return build_derivative_operator(self.width, self.height)

    @property
    def dim(self) -> int:
        return self.width * self.height

    def energy(self, x) -> float:
        v = _check_finite(as_vector(x))
        return float(self.lam * np.abs(self.operator.matrix @ v).sum()
                     + self.eps * np.abs(v).sum())

    def to_tensors(self):
        meta = {"lam": self.lam, "eps": self.eps, "width": self.width, "height": self.height}
        return "dl1", [], meta

    @classmethod
    def from_tensors(cls, tensors, meta) -> "Dl1Model":
        return cls(meta["lam"], meta["eps"], meta.get("width", PATCH_SIDE),
                   meta.get("height", PATCH_SIDE))


class IdentityModel:
    """Pass-through restorer: the estimate is the observation itself.

    Useful as a no-prior baseline; it fixes the noise floor in denoising
    benchmarks. It has no density and no sampler.
    """

    def __init__(self, width: int = PATCH_SIDE, height: int = PATCH_SIDE):
        self.width = int(width)
        self.height = int(height)

    @property
    def dim(self) -> int:
        return self.width * self.height

    def to_tensors(self):
        return "identity", [], {"width": self.width, "height": self.height}

    @classmethod
    def from_tensors(cls, tensors, meta) -> "IdentityModel":
        return cls(meta.get("width", PATCH_SIDE), meta.get("height", PATCH_SIDE))


def log_likelihood(model, x) -> float:
    """Exact log-density of a single patch, in nats."""
    log_density = getattr(model, "log_density", None)
    if log_density is None:
        raise TypeError(f"{type(model).__name__} has no tractable likelihood")
    return log_density(x)


def log_likelihood_per_pixel(model, patches) -> float:
    """Mean log-density per pixel (nats) over a test set."""
    xs = as_matrix(patches)
    if xs.shape[0] == 0:
        raise ValueError("empty test set")
    return float(model.log_density_batch(xs).mean() / xs.shape[1])


def nats_to_bits(nats: float) -> float:
    return nats / float(np.log(2.0))


def sample(model, seed, n: int | None = None):
    """Deterministic sampling: same seed, same output."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = model.sample(rng, n)
    return out


def dl1_energy(model: Dl1Model, x) -> float:
    return model.energy(x)


_MODEL_KINDS: dict[str, type] = {}


def register_model_kind(kind: str, cls) -> None:
    _MODEL_KINDS[kind] = cls


for _kind, _cls in (("gaussian", GaussianModel), ("gmm", GmmModel),
                    ("dl2", Dl2Model), ("dl1", Dl1Model),
                    ("identity", IdentityModel)):
    register_model_kind(_kind, _cls)


def save_model(model, path, extra_meta: dict | None = None) -> None:
    """Write a model to the versioned binary container."""
    kind, tensors, meta = model.to_tensors()
    full_meta = dict(meta)
    full_meta["kind"] = kind
    if extra_meta:
        full_meta.update(extra_meta)
    write_container(path, tensors + [("meta", meta_tensor(full_meta))])


def load_model(path):
    """Load any registered model kind from a container file."""
    tensors = read_container(path)
    if "meta" not in tensors:
        raise ModelFormatError(f"{path}: missing metadata block")
    meta = decode_meta(tensors.pop("meta"))
    kind = meta.get("kind")
    if kind not in _MODEL_KINDS:
        raise ModelFormatError(f"{path}: unknown model kind {kind!r}")
    return _MODEL_KINDS[kind].from_tensors(tensors, meta)
