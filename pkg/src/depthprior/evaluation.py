"""Benchmark harness: held-out likelihood and restoration accuracy tables.

Rows carry wall-clock time for the console table, but file output leaves
it out so identical runs produce identical files.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .core import PATCH_SIZE, as_matrix
from .inference import DegradationSpec, degrade_batch, psnr, restore_patches
from .models import Dl1Model
from .utils import parallel_map

CORNER_PIXELS = (0, 1, 62, 63)  # two top-left and two bottom-right pixels
INPAINT_FLOOR = 1e-12


@dataclass(frozen=True)
class BenchmarkRow:
    model: str
    task: str
    method: str
    psnr_db: float
    n_patches: int
    wall_seconds: float


@dataclass(frozen=True)
class LogLikRow:
    model: str
    nats_per_pixel: float
    n_patches: int
    wall_seconds: float


def corner_inpainting_spec(dim: int = PATCH_SIZE,
                           floor: float = INPAINT_FLOOR) -> DegradationSpec:
    """The standard inpainting task: only four corner pixels are visible."""
    observed = np.zeros(dim, dtype=bool)
    observed[list(CORNER_PIXELS)] = True
    return DegradationSpec.inpainting(observed, floor=floor)


def _default_method(model) -> str:
    return "map" if isinstance(model, Dl1Model) else "bls"


def evaluate_restoration(named_models: dict, clean, spec: DegradationSpec,
                         task: str, seed: int = 0, intensities=None,
                         methods: dict | None = None,
                         n_threads: int = 1) -> list[BenchmarkRow]:
    """Accuracy of each model on one degradation, with a shared noise draw.

    `methods` may pin a method per model name; the default is the
    posterior mean where available. Pooled per-pixel MSE gives one PSNR
    per model.
    """
    xs = as_matrix(clean)
    cs = None if intensities is None else as_matrix(intensities)
    ys = degrade_batch(np.random.default_rng(seed), xs, spec)

    def run(item):
        name, model = item
        method = (methods or {}).get(name, _default_method(model)).lower()
        t0 = time.perf_counter()
        est, _ = restore_patches(model, ys, spec, method=method, intensities=cs)
        wall = time.perf_counter() - t0
        return BenchmarkRow(model=name, task=task, method=method.upper(),
                            psnr_db=psnr(xs, est), n_patches=xs.shape[0],
                            wall_seconds=wall)

    return parallel_map(run, named_models.items(), n_threads)


def evaluate_denoising(named_models: dict, clean, noise_std: float,
                       seed: int = 0, intensities=None,
                       methods: dict | None = None,
                       n_threads: int = 1) -> list[BenchmarkRow]:
    xs = as_matrix(clean)
    spec = DegradationSpec.denoising(noise_std, xs.shape[1])
    task = f"denoise-s{noise_std * 255:g}"
    return evaluate_restoration(named_models, xs, spec, task, seed=seed,
                                intensities=intensities, methods=methods,
                                n_threads=n_threads)


def evaluate_inpainting(named_models: dict, clean, seed: int = 0,
                        intensities=None, methods: dict | None = None,
                        n_threads: int = 1) -> list[BenchmarkRow]:
    xs = as_matrix(clean)
    spec = corner_inpainting_spec(xs.shape[1])
    return evaluate_restoration(named_models, xs, spec, "inpaint", seed=seed,
                                intensities=intensities, methods=methods,
                                n_threads=n_threads)


def evaluate_loglik(named_models: dict, patches, intensities=None,
                    n_threads: int = 1) -> list[LogLikRow]:
    """Held-out mean log-density per pixel for every model that has one."""
    xs = as_matrix(patches)
    cs = None if intensities is None else as_matrix(intensities)

    def run(item):
        name, model = item
        t0 = time.perf_counter()
        try:
            ll = model.log_density_batch(xs, cs) if _wants_intensity(model) \
                else model.log_density_batch(xs)
        except AttributeError:
            raise TypeError(f"model {name!r} has no tractable likelihood") from None
        wall = time.perf_counter() - t0
        return LogLikRow(model=name, nats_per_pixel=float(ll.mean()) / xs.shape[1],
                         n_patches=xs.shape[0], wall_seconds=wall)

    return parallel_map(run, named_models.items(), n_threads)


def _wants_intensity(model) -> bool:
    from .conditional import Dl2IntModel, HmmModel

    return isinstance(model, (Dl2IntModel, HmmModel))


def format_benchmark_table(rows: list[BenchmarkRow]) -> str:
    lines = [f"{'model':<16} {'task':<14} {'method':<6} {'psnr_db':>9} "
             f"{'patches':>9} {'seconds':>8}"]
    for r in rows:
        lines.append(f"{r.model:<16} {r.task:<14} {r.method:<6} "
                     f"{r.psnr_db:>9.3f} {r.n_patches:>9d} {r.wall_seconds:>8.2f}")
    return "\n".join(lines)


def format_loglik_table(rows: list[LogLikRow]) -> str:
    lines = [f"{'model':<16} {'nats_per_pixel':>15} {'patches':>9} {'seconds':>8}"]
    for r in rows:
        lines.append(f"{r.model:<16} {r.nats_per_pixel:>15.6f} "
                     f"{r.n_patches:>9d} {r.wall_seconds:>8.2f}")
    return "\n".join(lines)


def write_benchmark_tsv(path, rows: list[BenchmarkRow]) -> None:
    """Deterministic file output: wall time is deliberately omitted."""
    with open(path, "w") as fh:
        fh.write("model\ttask\tmethod\tpsnr_db\tn_patches\n")
        for r in rows:
            fh.write(f"{r.model}\t{r.task}\t{r.method}\t{r.psnr_db:.6f}\t{r.n_patches}\n")


def write_loglik_tsv(path, rows: list[LogLikRow]) -> None:
    with open(path, "w") as fh:
        fh.write("model\tnats_per_pixel\tn_patches\n")
        for r in rows:
            fh.write(f"{r.model}\t{r.nats_per_pixel:.9f}\t{r.n_patches}\n")
