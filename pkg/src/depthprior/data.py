"""Datasets: scene loading, image I/O, and synthetic scene generation.

A scene directory holds two aligned frame sequences::

    root/<scene>/intensity/*.png
    root/<scene>/disparity/*.png|*.pfm

Disparity values are kept normalized to [0, 1]; when a scene ships raw
float disparities the divisor is recorded on the loaded record so results
remain comparable across runs.

The synthetic generator produces piecewise-constant patches and images:
mostly flat regions, occasionally split by a straight edge. A coupling
parameter controls how often the intensity channel shares the disparity
channel's edge geometry, which is what the conditional models exploit.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core import PATCH_SIDE, ImageGrid, patch_grid
from .errors import DataError


@dataclass(frozen=True)
class SceneRecord:
    """One scene: aligned per-frame (disparity, intensity) file paths."""

    name: str
    frame_paths: tuple  # of (disparity path, intensity path) pairs
    normalization: float = 1.0

    @property
    def n_frames(self) -> int:
        return len(self.frame_paths)

    def load_frame(self, index: int) -> tuple[ImageGrid, ImageGrid]:
        """Load one aligned frame pair as (disparity, intensity) grids."""
        disp_path, int_path = self.frame_paths[index]
        disp = load_image(disp_path)
        inten = load_image(int_path)
        if disp.shape != inten.shape:
            raise DataError(f"{self.name} frame {index}: channel shapes differ "
                            f"{disp.shape} vs {inten.shape}")
        if Path(disp_path).suffix.lower() == ".pfm":
            disp = np.clip(disp / self.normalization, 0.0, 1.0)
        return ImageGrid(disp), ImageGrid(inten)

    def frames(self):
        for i in range(self.n_frames):
            yield self.load_frame(i)


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for the synthetic edge-world generator."""

    flat_prob: float = 0.8
    coupling: float = 0.6
    min_contrast: float = 0.1
    noise_floor: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.flat_prob <= 1.0:
            raise ValueError("flat_prob must be in [0, 1]")
        if not 0.0 <= self.coupling <= 1.0:
            raise ValueError("coupling must be in [0, 1]")


def _patch_coords() -> tuple[np.ndarray, np.ndarray]:
    c = np.arange(PATCH_SIDE) - (PATCH_SIDE - 1) / 2.0
    u = np.tile(c, PATCH_SIDE)    # column offset, row-major flattening
    v = np.repeat(c, PATCH_SIDE)  # row offset
    return u, v


def _contrasting_levels(rng: np.random.Generator, n: int,
                        min_contrast: float) -> tuple[np.ndarray, np.ndarray]:
    a = rng.random(n)
    b = rng.random(n)
    bad = np.abs(a - b) < min_contrast
    while bad.any():
        a[bad] = rng.random(int(bad.sum()))
        b[bad] = rng.random(int(bad.sum()))
        bad = np.abs(a - b) < min_contrast
    return a, b


def generate_synthetic(n: int, spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Paired disparity and intensity patches, each of shape (n, 64).

    Every pair draws a primary edge geometry and an independent alternate;
    the intensity patch reuses the primary geometry with probability
    `coupling`, so at coupling 1.0 edges always co-occur across channels.
    """
    if n < 1:
        raise ValueError("need at least one patch")
    rng = np.random.default_rng(spec.seed)
    u, v = _patch_coords()
    half = (PATCH_SIDE - 1) / 2.0

    def geometry(count):
        flat = rng.random(count) < spec.flat_prob
        theta = rng.uniform(0.0, np.pi, count)
        t = rng.uniform(-half, half, count)
        side = (np.cos(theta)[:, None] * u + np.sin(theta)[:, None] * v) >= t[:, None]
        return flat, side

    def render(flat, side):
        a, b = _contrasting_levels(rng, flat.size, spec.min_contrast)
        out = np.where(side, b[:, None], a[:, None])
        out[flat] = a[flat, None]
        return out

    flat_d, side_d = geometry(n)
    flat_alt, side_alt = geometry(n)
    shared = rng.random(n) < spec.coupling

    disparity = render(flat_d, side_d)
    flat_i = np.where(shared, flat_d, flat_alt)
    side_i = np.where(shared[:, None], side_d, side_alt)
    intensity = render(flat_i, side_i)

    disparity += spec.noise_floor * rng.standard_normal(disparity.shape)
    intensity += spec.noise_floor * rng.standard_normal(intensity.shape)
    return np.clip(disparity, 0.0, 1.0), np.clip(intensity, 0.0, 1.0)


def generate_synthetic_images(n: int, height: int, width: int,
                              spec: SyntheticSpec,
                              lines_range: tuple[int, int] = (3, 8)
                              ) -> tuple[np.ndarray, np.ndarray]:
    """Paired full scenes of shape (n, height, width) in [0, 1].

    Each scene is a sum of straight step edges rescaled into [0.05, 0.95];
    per edge, the intensity channel reuses the disparity edge's geometry
    with probability `coupling` (amplitudes always redrawn).
    """
    if height < PATCH_SIDE or width < PATCH_SIDE:
        raise ValueError("scenes must be at least one patch big")
    rng = np.random.default_rng(spec.seed)
    cols = np.arange(width) - (width - 1) / 2.0
    rows = np.arange(height) - (height - 1) / 2.0
    uu = cols[None, :]
    vv = rows[:, None]
    radius = 0.5 * max(height, width)

    def rescale(img):
        lo, hi = img.min(), img.max()
        if hi - lo < 1e-12:
            return np.full_like(img, 0.5)
        return 0.05 + 0.9 * (img - lo) / (hi - lo)

    disparity = np.empty((n, height, width))
    intensity = np.empty((n, height, width))
    lo, hi = lines_range
    for i in range(n):
        k = int(rng.integers(lo, hi + 1))
        theta = rng.uniform(0.0, np.pi, k)
        t = rng.uniform(-radius, radius, k)
        shared = rng.random(k) < spec.coupling
        theta_i = np.where(shared, theta, rng.uniform(0.0, np.pi, k))
        t_i = np.where(shared, t, rng.uniform(-radius, radius, k))
        amp_d = rng.uniform(-1.0, 1.0, k)
        amp_i = rng.uniform(-1.0, 1.0, k)
        img_d = np.zeros((height, width))
        img_i = np.zeros((height, width))
        for j in range(k):
            img_d += amp_d[j] * ((np.cos(theta[j]) * uu + np.sin(theta[j]) * vv)
                                 >= t[j])
            img_i += amp_i[j] * ((np.cos(theta_i[j]) * uu + np.sin(theta_i[j]) * vv)
                                 >= t_i[j])
        disparity[i] = rescale(img_d)
        intensity[i] = rescale(img_i)
    disparity += spec.noise_floor * rng.standard_normal(disparity.shape)
    intensity += spec.noise_floor * rng.standard_normal(intensity.shape)
    return np.clip(disparity, 0.0, 1.0), np.clip(intensity, 0.0, 1.0)


def read_pfm(path) -> np.ndarray:
    """Single-channel PFM reader (rows are stored bottom-up, per the format)."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic == b"PF":
            raise DataError(f"{path}: color maps are not supported")
        if magic != b"Pf":
            raise DataError(f"{path}: not a PFM file")
        dims = fh.readline().split()
        if len(dims) != 2:
            raise DataError(f"{path}: malformed PFM dimensions")
        width, height = int(dims[0]), int(dims[1])
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        raw = fh.read(width * height * 4)
        if len(raw) != width * height * 4:
            raise DataError(f"{path}: truncated PFM payload")
        data = np.frombuffer(raw, dtype=dtype).reshape(height, width)
    return data[::-1].astype(np.float64)


def write_pfm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 2:
        raise DataError("only single-channel images can be written")
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{img.shape[1]} {img.shape[0]}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(img[::-1].astype("<f4").tobytes())


def load_image(path) -> np.ndarray:
    """Read a grayscale image as float64 in [0, 1] (PNG 8/16-bit or PFM)."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    try:
        with Image.open(path) as im:
            if im.mode in ("I;16", "I;16B", "I;16L"):
                return np.asarray(im, dtype=np.float64) / 65535.0
            if im.mode == "I":
                arr = np.asarray(im, dtype=np.float64)
                return arr / 65535.0 if arr.max() > 255 else arr / 255.0
            if im.mode != "L":
                im = im.convert("L")
            return np.asarray(im, dtype=np.float64) / 255.0
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise DataError(f"{path}: unreadable image ({exc})") from exc


def save_png(path, image: np.ndarray, bits: int = 8) -> None:
    """Write a [0, 1] image as an 8-bit or 16-bit grayscale PNG."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if bits == 8:
        Image.fromarray(np.round(img * 255.0).astype(np.uint8), mode="L").save(path)
    elif bits == 16:
        arr = np.round(img * 65535.0).astype(np.uint16)
        Image.fromarray(arr).save(path)
    else:
        raise ValueError("bits must be 8 or 16")


_CHANNEL_SUFFIXES = (".png", ".pfm")


def _channel_files(scene_dir: Path, channel: str) -> list[Path]:
    sub = scene_dir / channel
    if not sub.is_dir():
        raise DataError(f"{scene_dir}: missing {channel}/ directory")
    files = sorted(p for p in sub.iterdir()
                   if p.suffix.lower() in _CHANNEL_SUFFIXES)
    if not files:
        raise DataError(f"{sub}: no frames found")
    return files


def load_scene(root, name: str, normalization: float | None = None) -> SceneRecord:
    """Index one scene directory, pairing frames by sorted order.

    Raw float disparities (PFM) get divided by `normalization` at frame
    load time; when it is not given, a `normalization.txt` sidecar in the
    scene directory is consulted, falling back to the maximum over the
    scene's PFM frames.
    """
    scene_dir = Path(root) / name
    if not scene_dir.is_dir():
        raise DataError(f"{scene_dir}: scene directory not found")
    disp_files = _channel_files(scene_dir, "disparity")
    int_files = _channel_files(scene_dir, "intensity")
    if len(disp_files) != len(int_files):
        raise DataError(f"scene {name!r}: {len(disp_files)} disparity frames vs "
                        f"{len(int_files)} intensity frames")
    divisor = 1.0
    if any(p.suffix.lower() == ".pfm" for p in disp_files):
        if normalization is not None:
            divisor = float(normalization)
        else:
            sidecar = scene_dir / "normalization.txt"
            if sidecar.exists():
                divisor = float(sidecar.read_text().strip())
            else:
                peak = 0.0
                for p in disp_files:
                    if p.suffix.lower() == ".pfm":
                        peak = max(peak, float(read_pfm(p).max()))
                divisor = max(peak, 1e-12)
    pairs = tuple(zip(disp_files, int_files))
    return SceneRecord(name=name, frame_paths=pairs, normalization=divisor)


def load_dataset(root, names: list[str] | None = None,
                 normalization: float | None = None) -> list[SceneRecord]:
    """Index every scene under a root directory, in sorted name order.

    A `manifest.json` with a "scenes" list pins the scene set and order;
    otherwise all subdirectories are used. An empty root yields an empty
    dataset with a warning rather than an error.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: dataset root not found")
    if names is None:
        manifest = root / "manifest.json"
        if manifest.exists():
            try:
                names = json.loads(manifest.read_text())["scenes"]
            except (json.JSONDecodeError, KeyError) as exc:
                raise DataError(f"{manifest}: malformed manifest") from exc
        else:
            names = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not names:
        print(f"warning: {root}: no scenes found", file=sys.stderr)
        return []
    return [load_scene(root, name, normalization=normalization) for name in names]


def collect_patch_pairs(records: list[SceneRecord], stride: int = 4,
                        cap: int = 1_000_000, seed: int = 0
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Aligned (disparity, intensity) patch matrices pooled across scenes.

    When the pool exceeds `cap`, a seeded uniform subsample (kept in
    original order) trims it.
    """
    disp_parts = []
    int_parts = []
    for rec in records:
        for disp, inten in rec.frames():
            d, _ = patch_grid(disp, stride)
            c, _ = patch_grid(inten, stride)
            disp_parts.append(d)
            int_parts.append(c)
    if not disp_parts:
        raise DataError("no frames to collect patches from")
    disp = np.concatenate(disp_parts, axis=0)
    inten = np.concatenate(int_parts, axis=0)
    if disp.shape[0] > cap:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(disp.shape[0], size=cap, replace=False))
        disp, inten = disp[keep], inten[keep]
    return disp, inten


def write_scene(root, name: str, disparity_frames, intensity_frames,
                bits: int = 16) -> None:
    """Write aligned frame stacks as a loadable scene directory."""
    scene_dir = Path(root) / name
    (scene_dir / "disparity").mkdir(parents=True, exist_ok=True)
    (scene_dir / "intensity").mkdir(parents=True, exist_ok=True)
    for i, (d, c) in enumerate(zip(disparity_frames, intensity_frames)):
        save_png(scene_dir / "disparity" / f"frame_{i:04d}.png", d, bits=bits)
        save_png(scene_dir / "intensity" / f"frame_{i:04d}.png", c, bits=bits)
