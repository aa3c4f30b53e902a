"""Command-line interface.

Subcommands: train (gmm, hmm, tune), eval (loglik, denoise, inpaint),
sample, and restore. Global flags may also come from a key=value config
file; explicit flags always win. Exit codes: 0 success, 1 runtime failure,
2 usage error. Noise levels on the command line are in 8-bit steps
(``--sigma 15`` means a standard deviation of 15/255).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .conditional import Dl2IntModel, HmmModel
from .data import (
    SyntheticSpec,
    collect_patch_pairs,
    generate_synthetic,
    load_dataset,
    load_image,
    save_png,
)
from .errors import ConfigError, DepthPriorError
from .evaluation import (
    evaluate_denoising,
    evaluate_inpainting,
    evaluate_loglik,
    format_benchmark_table,
    format_loglik_table,
    write_benchmark_tsv,
    write_loglik_tsv,
)
from .inference import psnr
from .models import GmmModel, load_model, sample as draw_samples, save_model
from .pipeline import RestorationJob, restore_image, restore_image_global
from .training import (
    DatasetSplit,
    TrainConfig,
    train_gmm,
    train_gmm_sweep,
    train_hmm,
    tune_dl1,
    tune_dl2,
    tune_dl2int,
)
from .utils import resolve_threads

CONFIG_KEYS = {
    "seed": int,
    "threads": int,
    "k": str,
    "intensity_k": int,
    "max_iters": int,
    "tol": float,
    "ridge": float,
    "sigma": str,
    "coupling": float,
    "synthetic": int,
    "data": str,
    "stride": int,
    "cap": int,
    "held_out_frac": float,
    "method": str,
    "n": int,
    "cols": int,
    "hole_threshold": int,
    "cg_tol": float,
}

DEFAULTS = {
    "seed": 0,
    "threads": None,
    "k": "20",
    "intensity_k": 20,
    "max_iters": 100,
    "tol": 1e-6,
    "ridge": 1e-7,
    "sigma": "15",
    "coupling": 0.6,
    "synthetic": 20000,
    "stride": 4,
    "cap": 1_000_000,
    "held_out_frac": 0.1,
    "method": "bls",
    "cols": 8,
    "hole_threshold": 64,
    "cg_tol": 1e-8,
}


def parse_config(path) -> dict:
    """Read a key=value config file; '#' starts a comment."""
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = CONFIG_KEYS[key](val)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {val!r}") from exc
    return values


def _merge_config(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset flags from the config file, then from the defaults."""
    config = parse_config(args.config) if args.config else {}
    for key, value in config.items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)
    for key, value in DEFAULTS.items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)
    return args


def _sigma_values(raw) -> list[float]:
    """Parse ``--sigma 5,15`` into noise levels in 8-bit steps."""
    try:
        values = [float(part) for part in str(raw).split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"bad --sigma value: {raw!r}") from None
    if not values:
        raise ConfigError(f"bad --sigma value: {raw!r}")
    if any(v < 0 for v in values):
        raise ConfigError("--sigma values must be nonnegative")
    return values


def _sigma_single(raw) -> float:
    values = _sigma_values(raw)
    if len(values) != 1:
        raise ConfigError("this command takes a single --sigma value")
    return values[0]


def _k_values(raw) -> list[int]:
    """Parse ``--k 20`` or ``--k 2,20,100`` into component counts."""
    try:
        values = [int(part) for part in str(raw).split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"bad --k value: {raw!r}") from None
    if not values:
        raise ConfigError(f"bad --k value: {raw!r}")
    return values


def _load_pairs(args) -> tuple[np.ndarray, np.ndarray]:
    """Disparity and intensity patch matrices from --data or the generator."""
    if getattr(args, "data", None):
        records = load_dataset(args.data)
        return collect_patch_pairs(records, stride=args.stride, cap=args.cap,
                                   seed=args.seed)
    spec = SyntheticSpec(coupling=args.coupling, seed=args.seed)
    return generate_synthetic(args.synthetic, spec)


def _add_data_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", help="dataset root of scene directories")
    parser.add_argument("--synthetic", type=int,
                        help="number of generated patches when no --data")
    parser.add_argument("--coupling", type=float,
                        help="edge coupling for the generator")
    parser.add_argument("--stride", type=int, help="patch extraction stride")
    parser.add_argument("--cap", type=int, help="max patches to pool")


def _cmd_train(args) -> int:
    if args.train_what in ("gmm", "hmm"):
        ks = _k_values(args.k)
        if any(k < 1 for k in ks):
            raise ConfigError("--k must be at least 1")
        if args.train_what == "hmm" and len(ks) != 1:
            raise ConfigError("train hmm takes a single --k")
    pairs = _load_pairs(args)
    disp, inten = pairs
    if args.train_what == "gmm":
        if len(ks) == 1:
            cfg = TrainConfig(n_components=ks[0], max_iters=args.max_iters,
                              tol=args.tol, seed=args.seed, ridge=args.ridge,
                              log_path=args.log)
            result = train_gmm(disp, cfg)
            save_model(result.model, args.out,
                       extra_meta={"n_patches": int(disp.shape[0]),
                                   "seed": args.seed})
            print(f"trained {ks[0]}-component mixture on {disp.shape[0]} "
                  f"patches ({result.n_iters} iterations, "
                  f"final {result.history[-1]:.6f} nats/pixel)")
        else:
            cfg = TrainConfig(n_components=ks[0], max_iters=args.max_iters,
                              tol=args.tol, seed=args.seed, ridge=args.ridge)
            results = train_gmm_sweep(disp, ks, cfg)
            print("k\ttrain_nats_per_pixel")
            for k in sorted(results):
                print(f"{k}\t{results[k].history[-1]:.6f}")
            top = max(results)
            save_model(results[top].model, args.out,
                       extra_meta={"n_patches": int(disp.shape[0]),
                                   "seed": args.seed})
            print(f"saved the {top}-component model to {args.out}")
    elif args.train_what == "hmm":
        if args.intensity_k < 1:
            raise ConfigError("--intensity-k must be at least 1")
        disp_cfg = TrainConfig(n_components=ks[0], max_iters=args.max_iters,
                               tol=args.tol, seed=args.seed, ridge=args.ridge)
        int_cfg = TrainConfig(n_components=args.intensity_k,
                              max_iters=args.max_iters, tol=args.tol,
                              seed=args.seed, ridge=args.ridge)
        model, details = train_hmm(disp, inten, disp_cfg, int_cfg)
        save_model(model, args.out,
                   extra_meta={"n_patches": int(disp.shape[0]), "seed": args.seed})
        print(f"trained paired mixture ({ks[0]} disparity, "
              f"{args.intensity_k} intensity components) "
              f"on {disp.shape[0]} patch pairs")
    else:
        split = DatasetSplit.from_fraction(disp.shape[0], args.held_out_frac,
                                           args.seed)
        held_d = disp[split.held_out_idx]
        held_i = inten[split.held_out_idx]
        if args.kind == "dl2":
            model, table = tune_dl2(held_d)
        elif args.kind == "dl1":
            model, table = tune_dl1(held_d, seed=args.seed)
        else:
            model, table = tune_dl2int(held_d, held_i)
        save_model(model, args.out)
        best = max(table, key=lambda row: row["score"])
        params = {k: v for k, v in best.items() if k != "score"}
        print(f"tuned {args.kind}: {params} (score {best['score']:.4f}, "
              f"{len(table)} grid points)")
    return 0


def _cmd_eval(args) -> int:
    disp, inten = _load_pairs(args)
    if args.count and disp.shape[0] > args.count:
        disp, inten = disp[: args.count], inten[: args.count]
    models = {}
    for path in args.model:
        models[Path(path).stem] = load_model(path)
    threads = resolve_threads(args.threads)
    if args.eval_what == "loglik":
        rows = evaluate_loglik(models, disp, intensities=inten, n_threads=threads)
        print(format_loglik_table(rows))
        if args.out:
            write_loglik_tsv(args.out, rows)
    else:
        methods = {name: args.method for name in models}
        if args.eval_what == "denoise":
            rows = []
            for sigma in _sigma_values(args.sigma):
                rows.extend(evaluate_denoising(models, disp, sigma / 255.0,
                                               seed=args.seed, intensities=inten,
                                               methods=methods,
                                               n_threads=threads))
        else:
            rows = evaluate_inpainting(models, disp, seed=args.seed,
                                       intensities=inten, methods=methods,
                                       n_threads=threads)
        print(format_benchmark_table(rows))
        if args.out:
            write_benchmark_tsv(args.out, rows)
    return 0


def _load_condition_patch(path) -> np.ndarray:
    patch = load_image(path)
    if patch.shape != (8, 8):
        raise DepthPriorError(
            f"conditioning patch must be 8x8, got {patch.shape}")
    return patch.reshape(-1)


def _cmd_sample(args) -> int:
    if args.n is None:
        args.n = 64
    model = load_model(args.model)
    conditional = isinstance(model, (HmmModel, Dl2IntModel))
    if args.condition is not None and not conditional:
        raise DepthPriorError(
            "conditioning was requested but the model is unconditional")
    if conditional and args.condition is None:
        raise DepthPriorError(
            "this model samples conditionally; pass --condition with an "
            "8x8 intensity image")
    if not hasattr(model, "sample"):
        raise DepthPriorError("this model kind has no sampler")
    rng = np.random.default_rng(args.seed)
    if conditional:
        if args.component is not None:
            raise DepthPriorError("--component applies to mixture models only")
        draws = model.sample(rng, _load_condition_patch(args.condition), args.n)
    elif isinstance(model, GmmModel):
        if args.component is not None and not 0 <= args.component < model.n_components:
            raise DepthPriorError(
                f"--component must be in [0, {model.n_components - 1}]")
        draws, _ = model.sample(rng, args.n, component=args.component)
    else:
        if args.component is not None:
            raise DepthPriorError("--component applies to mixture models only")
        draws = draw_samples(model, rng, args.n)
    if args.remove_dc:
        draws = draws - draws.mean(axis=1, keepdims=True) + 0.5
    cols = max(1, args.cols)
    rows = (args.n + cols - 1) // cols
    mosaic = np.zeros((rows * 8, cols * 8))
    for i in range(args.n):
        r, c = divmod(i, cols)
        mosaic[r * 8:(r + 1) * 8, c * 8:(c + 1) * 8] = draws[i].reshape(8, 8)
    save_png(args.out, np.clip(mosaic, 0.0, 1.0))
    print(f"wrote {args.n} samples to {args.out}")
    return 0


def _load_mask(path, shape) -> np.ndarray:
    if path is None:
        return np.ones(shape, dtype=bool)
    mask = load_image(path) > 0.5
    if mask.shape != shape:
        raise DepthPriorError(f"mask shape {mask.shape} does not match image {shape}")
    return mask


def _cmd_restore(args) -> int:
    noisy = load_image(args.disparity)
    intensity = load_image(args.intensity)
    observed = _load_mask(args.mask, noisy.shape)
    noise_std = _sigma_single(args.sigma) / 255.0
    global_model = load_model(args.dl2int)
    if not isinstance(global_model, Dl2IntModel):
        raise DepthPriorError("--dl2int must be an intensity-weighted "
                              "penalty model")
    job = RestorationJob(disparity=noisy, intensity=intensity, mask=observed,
                         noise_sigma=noise_std,
                         hole_threshold=args.hole_threshold)
    if args.baseline:
        result = restore_image_global(job, global_model, cg_tol=args.cg_tol)
    else:
        patch_model = load_model(args.hmm)
        if not isinstance(patch_model, (HmmModel, GmmModel)):
            raise DepthPriorError("--hmm must be a mixture or paired "
                                  "mixture model")
        result = restore_image(job, patch_model, global_model,
                               cg_tol=args.cg_tol)
    save_png(args.out, result.estimate, bits=16)
    n_unconverged = sum(not s.converged for s in result.solves)
    print(f"restored {args.disparity}: {len(result.holes)} large holes, "
          f"{len(result.solves)} global solves"
          + (f" ({n_unconverged} not converged)" if n_unconverged else ""))
    if args.clean:
        clean = load_image(args.clean)
        print(f"psnr: {psnr(clean, result.estimate):.3f} dB")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="depthprior",
        description="patch-based disparity priors: train, evaluate, restore")
    parser.add_argument("--seed", type=int, help="rng seed (default 0)")
    parser.add_argument("--threads", type=int,
                        help="worker threads (or DEPTHPRIOR_THREADS; "
                             "default all cores)")
    parser.add_argument("--config", help="key=value config file")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="fit a model")
    train_sub = p_train.add_subparsers(dest="train_what", required=True)
    for what in ("gmm", "hmm", "tune"):
        p = train_sub.add_parser(what)
        p.add_argument("--out", required=True, help="output model path")
        _add_data_flags(p)
        p.add_argument("--max-iters", type=int, dest="max_iters")
        p.add_argument("--tol", type=float)
        p.add_argument("--ridge", type=float)
        if what in ("gmm", "hmm"):
            p.add_argument("--k", "--components", dest="k",
                           help="mixture components (gmm also takes a "
                                "comma-separated sweep)")
        if what == "gmm":
            p.add_argument("--log", help="per-iteration TSV log path")
        if what == "hmm":
            p.add_argument("--intensity-k", "--intensity-components",
                           type=int, dest="intensity_k",
                           help="intensity mixture components")
        if what == "tune":
            p.add_argument("--model", "--kind", required=True, dest="kind",
                           choices=("dl2", "dl1", "dl2int"),
                           help="which hand-crafted model to tune")
            p.add_argument("--held-out-frac", type=float, dest="held_out_frac")
        p.set_defaults(handler=_cmd_train)

    p_eval = sub.add_parser("eval", help="score models on a task")
    eval_sub = p_eval.add_subparsers(dest="eval_what", required=True)
    for what in ("loglik", "denoise", "inpaint"):
        p = eval_sub.add_parser(what)
        p.add_argument("--model", action="append", required=True,
                       help="model file (repeatable)")
        _add_data_flags(p)
        p.add_argument("--count", type=int, help="max patches to score")
        p.add_argument("--out", help="write results as TSV")
        if what == "denoise":
            p.add_argument("--sigma",
                           help="noise std in 8-bit steps, comma-separated")
        if what in ("denoise", "inpaint"):
            p.add_argument("--method", choices=("bls", "map"))
        p.set_defaults(handler=_cmd_eval)

    p_sample = sub.add_parser("sample", help="draw patches from a model")
    p_sample.add_argument("--model", required=True)
    p_sample.add_argument("--out", required=True, help="mosaic PNG path")
    p_sample.add_argument("--n", "--count", type=int, dest="n",
                          help="number of tiles (default 64)")
    p_sample.add_argument("--cols", type=int)
    p_sample.add_argument("--condition",
                          help="8x8 intensity image for conditional models")
    p_sample.add_argument("--component", type=int,
                          help="draw every tile from this mixture component")
    p_sample.add_argument("--remove-dc", action="store_true", dest="remove_dc",
                          help="subtract each tile's mean before writing")
    p_sample.set_defaults(handler=_cmd_sample)

    p_restore = sub.add_parser("restore", help="restore a full disparity image")
    p_restore.add_argument("--disparity", "--noisy", required=True,
                           dest="disparity", help="degraded disparity image")
    p_restore.add_argument("--intensity", required=True)
    p_restore.add_argument("--mask",
                           help="observed-pixel mask image (default: all observed)")
    p_restore.add_argument("--out", required=True)
    p_restore.add_argument("--clean", help="reference image for a PSNR readout")
    p_restore.add_argument("--sigma", help="noise std in 8-bit steps")
    p_restore.add_argument("--hmm", "--patch-model", dest="hmm",
                           help="mixture model for the patch stage")
    p_restore.add_argument("--dl2int", "--global-model", dest="dl2int",
                           required=True,
                           help="weighted-penalty model for the hole stage")
    p_restore.add_argument("--baseline", action="store_true",
                           help="skip the patch stage; one global soft solve")
    p_restore.add_argument("--hole-threshold", type=int, dest="hole_threshold")
    p_restore.add_argument("--cg-tol", type=float, dest="cg_tol")
    p_restore.set_defaults(handler=_cmd_restore)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _merge_config(args)
        if args.command == "restore" and not args.baseline and not args.hmm:
            raise ConfigError("restore needs --hmm unless --baseline is set")
        return args.handler(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DepthPriorError, ValueError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
