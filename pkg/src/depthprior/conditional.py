"""Intensity-conditioned disparity models.

Two families: an intensity-weighted quadratic derivative penalty (the
weights downscale smoothness across intensity edges), and a paired-mixture
model that maps the intensity patch's mixture responsibilities through a
learned transition matrix to get a per-patch prior over disparity
components.
"""

from __future__ import annotations

from functools import cached_property

import numpy as np
from scipy.special import logsumexp

from .core import PATCH_SIDE, as_matrix, as_vector, remove_dc_rows
from .models import (
    LOG_2PI,
    GaussianModel,
    GmmModel,
    _check_finite,
    register_model_kind,
)
from .operators import (
    DerivativeOperator,
    batched_weighted_precisions,
    build_derivative_operator,
    build_dl2int_precision,
    build_intensity_weights,
)


class Dl2IntModel:
    """Quadratic derivative penalty with per-edge intensity weights."""

    def __init__(self, lam: float, eps: float, sigma: float,
                 width: int = PATCH_SIDE, height: int = PATCH_SIDE):
        if lam <= 0 or eps <= 0 or sigma <= 0:
            raise ValueError("lam, eps and sigma must be positive")
        self.lam = float(lam)
        self.eps = float(eps)
        self.sigma = float(sigma)
        self.width = int(width)
        self.height = int(height)

    @cached_property
    def operator(self) -> DerivativeOperator:
        return build_derivative_operator(self.width, self.height)

    @property
    def dim(self) -> int:
        return self.width * self.height

    def induced_gaussian(self, intensity) -> GaussianModel:
        """The zero-mean Gaussian this model assigns given one intensity patch."""
        w = build_intensity_weights(self.operator, as_vector(intensity), self.sigma)
        q = build_dl2int_precision(self.operator, w, self.lam, self.eps)
        return GaussianModel.from_quadratic_form(q)

    def precisions_for(self, intensities: np.ndarray) -> np.ndarray:
        """Dense Gaussian precisions (2Q), one per intensity patch: (n, d, d)."""
        qs = batched_weighted_precisions(self.operator, as_matrix(intensities),
                                         self.lam, self.eps, self.sigma)
        return 2.0 * qs

    def log_density_batch(self, xs: np.ndarray, intensities: np.ndarray) -> np.ndarray:
        xs = _check_finite(as_matrix(xs))
        cs = _check_finite(as_matrix(intensities))
        if xs.shape != cs.shape:
            raise ValueError(f"disparity batch {xs.shape} does not match intensity batch {cs.shape}")
        precisions = self.precisions_for(cs)
        chols = np.linalg.cholesky(precisions)
        diag = np.einsum("nii->ni", chols)
        log_det_prec = 2.0 * np.sum(np.log(diag), axis=1)
        quad = np.einsum("ni,nij,nj->n", xs, precisions, xs)
        return 0.5 * (log_det_prec - self.dim * LOG_2PI - quad)

    def log_density(self, x, intensity) -> float:
        return float(self.log_density_batch(as_vector(x)[None, :],
                                            as_vector(intensity)[None, :])[0])

    def sample(self, rng: np.random.Generator, intensity, n: int | None = None):
        return self.induced_gaussian(intensity).sample(rng, n)

    def to_tensors(self):
        meta = {"lam": self.lam, "eps": self.eps, "sigma": self.sigma,
                "width": self.width, "height": self.height}
        return "dl2int", [], meta

    @classmethod
    def from_tensors(cls, tensors, meta) -> "Dl2IntModel":
        return cls(meta["lam"], meta["eps"], meta["sigma"],
                   meta.get("width", PATCH_SIDE), meta.get("height", PATCH_SIDE))


class HmmModel:
    """Paired-mixture conditional model: intensity component -> disparity component.

    The intensity mixture lives on DC-removed intensity patches; the
    conditional prior over disparity components is the intensity
    responsibility vector pushed through a row-stochastic transition matrix.
    """

    def __init__(self, intensity_gmm: GmmModel, disparity_gmm: GmmModel,
                 transition: np.ndarray):
        t = np.asarray(transition, dtype=np.float64)
        ki, kd = intensity_gmm.n_components, disparity_gmm.n_components
        if t.shape != (ki, kd):
            raise ValueError(f"transition shape {t.shape} does not match ({ki}, {kd})")
        if np.any(t < 0) or np.any(np.abs(t.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("transition rows must be nonnegative and sum to 1")
        self.intensity_gmm = intensity_gmm
        self.disparity_gmm = disparity_gmm
        self.transition = t

    def conditional_prior(self, intensities: np.ndarray) -> np.ndarray:
        """Prior over disparity components given intensity patches: (n, K_d).

        Rows sum to 1; the DC component of each intensity patch is removed
        before scoring since the intensity mixture was fitted that way.
        """
        cs = remove_dc_rows(as_matrix(intensities))
        resp = self.intensity_gmm.responsibilities(cs)
        return resp @ self.transition

    def conditional_log_density_batch(self, xs: np.ndarray,
                                      intensities: np.ndarray) -> np.ndarray:
        xs = as_matrix(xs)
        prior = self.conditional_prior(intensities)
        if xs.shape[0] != prior.shape[0]:
            raise ValueError("disparity and intensity batches differ in length")
        comp = self.disparity_gmm.component_log_densities(xs)
        with np.errstate(divide="ignore"):
            log_prior = np.log(prior)
        return logsumexp(comp + log_prior, axis=1)

    def conditional_log_density(self, x, intensity) -> float:
        return float(self.conditional_log_density_batch(
            as_vector(x)[None, :], as_vector(intensity)[None, :])[0])

    # Aliases so evaluation code can treat this like the weighted-penalty model.
    log_density_batch = conditional_log_density_batch
    log_density = conditional_log_density

    def sample(self, rng: np.random.Generator, intensity, n: int | None = None):
        """Draw disparity patches conditioned on one intensity patch."""
        prior = self.conditional_prior(as_vector(intensity)[None, :])[0]
        count = 1 if n is None else n
        gmm = self.disparity_gmm
        comps = rng.choice(gmm.n_components, size=count, p=prior)
        z = rng.standard_normal((count, gmm.dim))
        out = np.empty((count, gmm.dim))
        for k in np.unique(comps):
            idx = comps == k
            out[idx] = gmm.mean + z[idx] @ gmm.chols[k].T
        return out[0] if n is None else out

    def to_tensors(self):
        tensors = [
            ("int_pi", self.intensity_gmm.weights),
            ("int_sigma_k", self.intensity_gmm.covariances),
            ("disp_pi", self.disparity_gmm.weights),
            ("disp_sigma_k", self.disparity_gmm.covariances),
            ("transition", self.transition),
            ("d0", self.disparity_gmm.mean),
        ]
        return "hmm", tensors, {}

    @classmethod
    def from_tensors(cls, tensors, meta) -> "HmmModel":
        int_dim = tensors["int_sigma_k"].shape[1]
        intensity_gmm = GmmModel(tensors["int_pi"], np.zeros(int_dim),
                                 tensors["int_sigma_k"])
        disparity_gmm = GmmModel(tensors["disp_pi"], tensors["d0"],
                                 tensors["disp_sigma_k"])
        return cls(intensity_gmm, disparity_gmm, tensors["transition"])


register_model_kind("dl2int", Dl2IntModel)
register_model_kind("hmm", HmmModel)


def conditional_log_likelihood(model, x, intensity) -> float:
    return model.log_density(x, intensity)


def conditional_log_likelihood_per_pixel(model, patches, intensities) -> float:
    """Mean conditional log-density per pixel (nats) over a paired test set."""
    xs = as_matrix(patches)
    if xs.shape[0] == 0:
        raise ValueError("empty test set")
    return float(model.log_density_batch(xs, as_matrix(intensities)).mean() / xs.shape[1])
