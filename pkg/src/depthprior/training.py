"""Model fitting: EM for the mixtures, grid search for the penalty models.

The mixture mean is estimated once and held fixed; EM updates only the
mixing weights and the per-component covariances. Training is invariant to
the order of the input patches because every reduction runs over a
canonical (lexicographically sorted) copy of the data.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg as sla
from scipy.special import logsumexp

from .conditional import Dl2IntModel, HmmModel, conditional_log_likelihood_per_pixel
from .core import as_matrix, remove_dc_rows
from .errors import DegenerateComponentError
from .inference import DegradationSpec, degrade_batch, map_dl1_batch, psnr
from .models import (
    LOG_2PI,
    Dl1Model,
    Dl2Model,
    GmmModel,
    log_likelihood_per_pixel,
)

DEFAULT_LAMS = (1.0, 10.0, 100.0, 1e3, 1e4)
DEFAULT_EPSS = (1e-4, 1e-3, 1e-2)
DEFAULT_SIGMAS = (0.01, 0.05, 0.1, 0.2)


@dataclass(frozen=True)
class TrainConfig:
    n_components: int = 20
    max_iters: int = 100
    tol: float = 1e-6
    seed: int = 0
    ridge: float = 1e-7
    log_path: str | None = None


@dataclass(frozen=True)
class TrainResult:
    model: GmmModel
    history: np.ndarray  # per-iteration train nats per pixel
    converged: bool
    repairs: int = 0

    @property
    def n_iters(self) -> int:
        return self.history.size


@dataclass(frozen=True)
class DatasetSplit:
    """Two disjoint folds of scene ids or patch indices.

    The held-out fold is never used for parameter selection beyond the
    final scoring it exists for.
    """

    train: tuple
    held_out: tuple

    def __post_init__(self):
        tr = tuple(self.train)
        ho = tuple(self.held_out)
        if set(tr) & set(ho):
            raise ValueError("train and held-out folds overlap")
        object.__setattr__(self, "train", tr)
        object.__setattr__(self, "held_out", ho)

    @classmethod
    def from_fraction(cls, n: int, held_out_frac: float, seed: int) -> "DatasetSplit":
        if not 0.0 < held_out_frac < 1.0:
            raise ValueError("held_out_frac must be in (0, 1)")
        rng = np.random.default_rng(seed)
        perm = rng.permutation(n)
        n_held = max(1, int(round(n * held_out_frac)))
        return cls(tuple(int(i) for i in perm[n_held:]),
                   tuple(int(i) for i in perm[:n_held]))

    @property
    def train_idx(self) -> np.ndarray:
        return np.asarray(self.train, dtype=np.int64)

    @property
    def held_out_idx(self) -> np.ndarray:
        return np.asarray(self.held_out, dtype=np.int64)


def _canonical_order(xs: np.ndarray) -> np.ndarray:
    # Sort rows lexicographically; equal rows are interchangeable, so the
    # sorted data is identical for any permutation of the input.
    return np.lexsort(xs.T)


def _kmeanspp_centers(u: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = u.shape[0]
    centers = np.empty((k, u.shape[1]))
    centers[0] = u[int(rng.integers(n))]
    d2 = np.sum((u - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[j] = u[idx]
        d2 = np.minimum(d2, np.sum((u - centers[j]) ** 2, axis=1))
    return centers


def _m_step(u: np.ndarray, resp: np.ndarray, ridge: float):
    """Responsibility-weighted covariances about the fixed mean.

    Returns (weights, covariances, repairs): components whose effective
    mass collapses are reset to the global covariance.
    """
    n, d = u.shape
    masses = resp.sum(axis=0)
    weights = masses / n
    covs = np.empty((resp.shape[1], d, d))
    repairs = 0
    global_cov = None
    for k in range(resp.shape[1]):
        if masses[k] < 1e-6:
            if global_cov is None:
                global_cov = (u.T @ u) / n
            covs[k] = global_cov
            repairs += 1
        else:
            covs[k] = (u.T * resp[:, k]) @ u / masses[k]
        covs[k][np.diag_indices(d)] += ridge
    if repairs:
        weights = np.maximum(weights, 1e-10)
        weights = weights / weights.sum()
    return weights, covs, repairs


def _safe_cholesky(covs: np.ndarray) -> np.ndarray:
    """Batched Cholesky with the repair policy for near-singular components:
    a failing component gets a trace-scaled ridge (1e-6 * mean variance)."""
    try:
        return np.linalg.cholesky(covs)
    except np.linalg.LinAlgError:
        pass
    d = covs.shape[-1]
    chols = np.empty_like(covs)
    for k in range(covs.shape[0]):
        try:
            chols[k] = np.linalg.cholesky(covs[k])
        except np.linalg.LinAlgError:
            ridge = 1e-6 * np.trace(covs[k]) / d + 1e-30
            covs[k][np.diag_indices(d)] += ridge
            chols[k] = np.linalg.cholesky(covs[k])
    return chols


def _component_log_densities(u: np.ndarray, covs: np.ndarray) -> np.ndarray:
    chols = _safe_cholesky(covs)
    d = u.shape[1]
    out = np.empty((u.shape[0], covs.shape[0]))
    ut = u.T
    for k in range(covs.shape[0]):
        z = sla.solve_triangular(chols[k], ut, lower=True)
        quad = np.einsum("in,in->n", z, z)
        log_det = 2.0 * np.sum(np.log(np.diag(chols[k])))
        out[:, k] = -0.5 * (d * LOG_2PI + log_det + quad)
    return out


def train_gmm(patches, config: TrainConfig, mean=None,
              init: GmmModel | None = None) -> TrainResult:
    """Fit the shared-mean mixture by EM.

    The recorded per-iteration train log-likelihood never decreases. Near
    a fixed point the covariance ridge can nudge the likelihood down by a
    hair; such sub-1e-5 dips end the run on the previous (better)
    parameters, while a decrease beyond that scale means a real defect and
    raises DegenerateComponentError. When `init` is given its components
    seed EM directly; otherwise seeding uses a kmeans++ pass over the
    DC-removed patches.
    """
    xs = as_matrix(patches)
    n, d = xs.shape
    k = config.n_components
    if k < 1:
        raise ValueError("need at least one component")
    if config.max_iters < 1:
        raise ValueError("need at least one EM iteration")
    if n < 2 * k:
        raise ValueError(f"{n} patches is too few for {k} components")

    xs = xs[_canonical_order(xs)]
    d0 = xs.mean(axis=0) if mean is None else np.asarray(mean, dtype=np.float64)
    u = xs - d0

    if init is not None:
        if init.dim != d:
            raise ValueError("init model dimension mismatch")
        weights, covs = init.weights.copy(), init.covariances.copy()
        covs[:, np.arange(d), np.arange(d)] += config.ridge
        repairs_total = 0
    else:
        rng = np.random.default_rng(config.seed)
        if k == 1:
            resp = np.ones((n, 1))
        else:
            uc = remove_dc_rows(xs)
            if not np.any(np.abs(uc) > 1e-12):
                uc = u  # DC removal flattened the data (e.g. 1-pixel patches)
            centers = _kmeanspp_centers(uc, k, rng)
            d2 = (np.sum(uc * uc, axis=1)[:, None]
                  - 2.0 * uc @ centers.T + np.sum(centers * centers, axis=1))
            labels = np.argmin(d2, axis=1)
            resp = np.zeros((n, k))
            resp[np.arange(n), labels] = 1.0
        weights, covs, repairs_total = _m_step(u, resp, config.ridge)

    log_path = config.log_path
    log_rows = []
    history = []
    prev_ll = -np.inf
    prev_weights, prev_covs = weights, covs
    converged = False
    t0 = time.perf_counter()
    for it in range(config.max_iters):
        comp = _component_log_densities(u, covs)
        with np.errstate(divide="ignore"):
            joint = comp + np.log(weights)
        norm = logsumexp(joint, axis=1)
        ll = float(norm.mean())
        drop = prev_ll - ll
        scale = max(1.0, abs(prev_ll))
        if drop > 1e-9 * scale:
            if drop <= 1e-5 * scale:
                # ridge wiggle at the fixed point: keep the better iterate
                weights, covs = prev_weights, prev_covs
                converged = True
                break
            raise DegenerateComponentError(
                f"log-likelihood decreased at iteration {it}: {prev_ll} -> {ll}")
        history.append(ll / d)
        log_rows.append((it, ll / d, time.perf_counter() - t0))
        if ll - prev_ll < config.tol and it > 0:
            converged = True
            break
        prev_ll = ll
        prev_weights, prev_covs = weights, covs
        resp = np.exp(joint - norm[:, None])
        weights, covs, rep = _m_step(u, resp, config.ridge)
        repairs_total += rep

    if log_path is not None:
        with open(log_path, "w") as fh:
            fh.write("iter\ttrain_nats_per_pixel\twall_seconds\n")
            for row in log_rows:
                fh.write(f"{row[0]}\t{row[1]:.9f}\t{row[2]:.3f}\n")

    model = GmmModel(weights, d0, covs)
    return TrainResult(model=model, history=np.asarray(history),
                       converged=converged, repairs=repairs_total)


def split_components(model: GmmModel, target_k: int, gamma: float = 0.1) -> GmmModel:
    """Grow a mixture by splitting its heaviest components.

    Each split halves the weight and perturbs the covariance scale up and
    down by (1 + gamma), leaving the mixture close to the original while
    giving EM a richer starting point.
    """
    if target_k < model.n_components:
        raise ValueError("target must not be smaller than the current size")
    weights = list(model.weights)
    covs = list(model.covariances)
    while len(weights) < target_k:
        j = int(np.argmax(weights))
        w = weights[j] / 2.0
        sigma = covs[j]
        weights[j] = w
        covs[j] = sigma * (1.0 + gamma)
        weights.append(w)
        covs.append(sigma / (1.0 + gamma))
    w = np.asarray(weights)
    return GmmModel(w / w.sum(), model.mean, np.asarray(covs))


def train_gmm_sweep(patches, sizes, config: TrainConfig,
                    mean=None) -> dict[int, TrainResult]:
    """Train a nested family of mixtures of increasing size.

    Each larger model is seeded by splitting the previous one, so the train
    log-likelihood is non-decreasing in the mixture size.
    """
    results: dict[int, TrainResult] = {}
    prev: TrainResult | None = None
    for k in sorted(set(int(s) for s in sizes)):
        cfg = replace(config, n_components=k)
        init = None if prev is None else split_components(prev.model, k)
        results[k] = train_gmm(patches, cfg, mean=mean, init=init)
        prev = results[k]
    return results


def estimate_transition(intensity_resp: np.ndarray, disparity_resp: np.ndarray,
                        smoothing: float = 1e-8) -> np.ndarray:
    """Row-stochastic coupling from soft co-occurrence counts."""
    counts = intensity_resp.T @ disparity_resp + smoothing
    return counts / counts.sum(axis=1, keepdims=True)


def train_hmm(disparity_patches, intensity_patches, disparity_config: TrainConfig,
              intensity_config: TrainConfig,
              disparity_result: TrainResult | None = None) -> tuple[HmmModel, dict]:
    """Fit the paired-mixture conditional model.

    The intensity mixture is trained on DC-removed intensity patches with
    the mean pinned at zero (DC removal makes the sample covariance
    singular along the constant direction, so the ridge matters here). A
    pre-trained disparity mixture can be passed in to share work.
    """
    xs = as_matrix(disparity_patches)
    cs = as_matrix(intensity_patches)
    if xs.shape[0] != cs.shape[0]:
        raise ValueError("disparity and intensity patch counts differ")

    if disparity_result is None:
        disparity_result = train_gmm(xs, disparity_config)
    disp_gmm = disparity_result.model

    cs_dc = remove_dc_rows(cs)
    intensity_result = train_gmm(cs_dc, intensity_config,
                                 mean=np.zeros(cs.shape[1]))
    int_gmm = intensity_result.model

    r_int = int_gmm.responsibilities(cs_dc)
    r_disp = disp_gmm.responsibilities(xs)
    transition = estimate_transition(r_int, r_disp)
    model = HmmModel(int_gmm, disp_gmm, transition)
    details = {"disparity": disparity_result, "intensity": intensity_result}
    return model, details


def tune_dl2(held_out_patches, lams=DEFAULT_LAMS, epss=DEFAULT_EPSS):
    """Pick (lam, eps) by held-out log-likelihood; ties favor smaller values."""
    xs = as_matrix(held_out_patches)
    best = None
    table = []
    for lam in lams:
        for eps in epss:
            model = Dl2Model(lam, eps)
            score = log_likelihood_per_pixel(model, xs)
            table.append({"lam": lam, "eps": eps, "score": score})
            if best is None or score > best[0]:
                best = (score, model)
    return best[1], table


def tune_dl2int(held_out_disparity, held_out_intensity, lams=DEFAULT_LAMS,
                epss=DEFAULT_EPSS, sigmas=DEFAULT_SIGMAS):
    """Pick (lam, eps, sigma) by held-out conditional log-likelihood."""
    xs = as_matrix(held_out_disparity)
    cs = as_matrix(held_out_intensity)
    best = None
    table = []
    for lam in lams:
        for eps in epss:
            for sigma in sigmas:
                model = Dl2IntModel(lam, eps, sigma)
                score = conditional_log_likelihood_per_pixel(model, xs, cs)
                table.append({"lam": lam, "eps": eps, "sigma": sigma, "score": score})
                if best is None or score > best[0]:
                    best = (score, model)
    return best[1], table


def tune_dl1(held_out_patches, noise_std: float = 15.0 / 255.0, seed: int = 0,
             lams=DEFAULT_LAMS, epss=DEFAULT_EPSS):
    """Pick (lam, eps) by denoising accuracy, since the model has no
    tractable likelihood. The same noise draw scores every grid point."""
    xs = as_matrix(held_out_patches)
    spec = DegradationSpec.denoising(noise_std, xs.shape[1])
    ys = degrade_batch(np.random.default_rng(seed), xs, spec)
    best = None
    table = []
    for lam in lams:
        for eps in epss:
            model = Dl1Model(lam, eps)
            est, _, _ = map_dl1_batch(model, ys, spec)
            score = psnr(xs, est)
            table.append({"lam": lam, "eps": eps, "score": score})
            if best is None or score > best[0]:
                best = (score, model)
    return best[1], table
