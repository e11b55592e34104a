"""Dataset I/O, augmentation, and the synthetic scene generator.

Datasets are CSV manifests with header id,image_path,mask_path; paths are
resolved relative to the manifest file. Images are 8-bit RGB PNGs mapped
to float32 (3, H, W) in [0, 1]; masks are single-channel PNGs holding
exactly {0, 255}, mapped to float32 (1, H, W) in {0, 1}.
"""
from __future__ import annotations

import csv
import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .engine.ops import bicubic_resize_array, bilinear_resize_array
from .errors import DataError

SHARPEN_KERNEL = np.array([[0, -1, 0], [-1, 5, -1], [0, -1, 0]], dtype=np.float64)


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    image_path: Path
    mask_path: Path


# ---------------------------------------------------------------------------
# PNG and manifest I/O


def load_image(path) -> np.ndarray:
    """Read an RGB PNG as float32 (3, H, W) scaled to [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1)) / 255.0


def load_mask(path) -> np.ndarray:
    """Read a binary mask PNG as float32 (1, H, W) with values in {0, 1}.

    Any pixel value other than 0 or 255 is rejected: masks are labels,
    not images, and in-between values mean the file is wrong.
    """
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc
    bad = np.setdiff1d(np.unique(arr), [0, 255])
    if bad.size:
        raise DataError(
            f"mask {path} holds values {bad[:4].tolist()}; expected only 0 and 255"
        )
    return (arr == 255).astype(np.float32)[None, :, :]


def save_image(path, img: np.ndarray) -> None:
    """Write float (3, H, W) values in [0, 1] as an RGB PNG."""
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    u8 = np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(u8, mode="RGB").save(path)


def save_mask(path, mask: np.ndarray) -> None:
    """Write a {0, 1} float or bool mask as a single-channel {0, 255} PNG."""
    arr = np.asarray(mask)
    if arr.ndim == 3:
        arr = arr[0]
    u8 = np.where(arr >= 0.5, 255, 0).astype(np.uint8)
    Image.fromarray(u8, mode="L").save(path)


def read_manifest(path) -> list[ManifestRecord]:
    """Parse a manifest CSV; relative paths resolve against its directory."""
    path = Path(path)
    base = path.parent
    records = []
    try:
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames is None or \
                    [c.strip() for c in reader.fieldnames] != ["id", "image_path", "mask_path"]:
                raise DataError(
                    f"{path}: manifest header must be id,image_path,mask_path; "
                    f"got {reader.fieldnames}"
                )
            for row in reader:
                rid = (row["id"] or "").strip()
                if not rid:
                    raise DataError(f"{path}: row with empty id")
                img = base / row["image_path"]
                msk = base / row["mask_path"]
                records.append(ManifestRecord(rid, img, msk))
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if not records:
        raise DataError(f"{path}: manifest lists no samples")
    seen = set()
    for r in records:
        if r.id in seen:
            raise DataError(f"{path}: duplicate id {r.id!r}")
        seen.add(r.id)
        for p in (r.image_path, r.mask_path):
            if not p.is_file():
                raise DataError(f"{path}: listed file missing: {p}")
    return records


def write_manifest(path, records: Sequence[ManifestRecord]) -> None:
    path = Path(path)
    base = path.parent
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "image_path", "mask_path"])
        for r in records:
            img = _relative_or_absolute(r.image_path, base)
            msk = _relative_or_absolute(r.mask_path, base)
            writer.writerow([r.id, img, msk])


def _relative_or_absolute(p: Path, base: Path) -> str:
    try:
        return str(Path(p).resolve().relative_to(base.resolve()))
    except ValueError:
        return str(Path(p).resolve())


# ---------------------------------------------------------------------------
# resizing


def nearest_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize of (H, W) or (C, H, W) using half-pixel centers."""
    squeeze = arr.ndim == 2
    a = arr[None] if squeeze else arr
    h, w = a.shape[1], a.shape[2]
    rows = np.minimum((np.arange(out_h) + 0.5) * (h / out_h), h - 1).astype(np.int64)
    cols = np.minimum((np.arange(out_w) + 0.5) * (w / out_w), w - 1).astype(np.int64)
    out = a[:, rows[:, None], cols[None, :]]
    return out[0] if squeeze else out


def resize_image(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bicubic resize of a float (C, H, W) image, clipped back to [0, 1]."""
    planes = bicubic_resize_array(img.transpose(1, 2, 0), out_h, out_w)
    return np.clip(planes.transpose(2, 0, 1), 0.0, 1.0).astype(np.float32)


def resize_mask(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize of a (1, H, W) binary mask."""
    return nearest_resize(mask, out_h, out_w).astype(np.float32)


# ---------------------------------------------------------------------------
# augmentation primitives


def hflip(arr: np.ndarray) -> np.ndarray:
    """Mirror (C, H, W) left-right."""
    return np.ascontiguousarray(arr[:, :, ::-1])


def vflip(arr: np.ndarray) -> np.ndarray:
    """Mirror (C, H, W) top-bottom."""
    return np.ascontiguousarray(arr[:, ::-1, :])


def sharpen(img: np.ndarray) -> np.ndarray:
    """3x3 five-point sharpen with replicate padding, clipped to [0, 1].

    Applies to images only; masks are never filtered.
    """
    c, h, w = img.shape
    padded = np.pad(img.astype(np.float64), ((0, 0), (1, 1), (1, 1)), mode="edge")
    out = np.zeros((c, h, w), dtype=np.float64)
    for di in range(3):
        for dj in range(3):
            k = SHARPEN_KERNEL[di, dj]
            if k != 0.0:
                out += k * padded[:, di : di + h, dj : dj + w]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def rotate(arr: np.ndarray, theta_deg: float, mode: str) -> np.ndarray:
    """Rotate (C, H, W) by theta degrees about the image center.

    Positive angles follow np.rot90's direction; theta = 90 on a square
    array reproduces np.rot90 exactly. mode is "bilinear" (images) or
    "nearest" (masks); samples falling outside the source are zero.
    """
    if mode not in ("bilinear", "nearest"):
        raise ValueError(f"rotate: unknown mode {mode!r}")
    c, h, w = arr.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    jj, ii = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    u = jj - cx
    v = ii - cy
    th = math.radians(theta_deg)
    src_c = u * math.cos(th) - v * math.sin(th) + cx
    src_r = u * math.sin(th) + v * math.cos(th) + cy

    if mode == "nearest":
        r = np.floor(src_r + 0.5).astype(np.int64)
        cc = np.floor(src_c + 0.5).astype(np.int64)
        valid = (r >= 0) & (r < h) & (cc >= 0) & (cc < w)
        out = np.zeros_like(arr)
        rv = np.clip(r, 0, h - 1)
        cv = np.clip(cc, 0, w - 1)
        sampled = arr[:, rv, cv]
        out[:, valid] = sampled[:, valid]
        return out

    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    fr = src_r - r0
    fc = src_c - c0
    out = np.zeros((c, h, w), dtype=np.float64)
    for dr, dc, wgt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                        (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr = r0 + dr
        cc = c0 + dc
        valid = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        rv = np.clip(rr, 0, h - 1)
        cv = np.clip(cc, 0, w - 1)
        out += np.where(valid, wgt, 0.0) * arr[:, rv, cv]
    return out.astype(arr.dtype)


# ---------------------------------------------------------------------------
# 4x offline expansion


def expand_4x(records: Sequence[ManifestRecord], out_dir, seed: int = 0,
              ) -> list[ManifestRecord]:
    """Materialize the standard 4x augmentation of a dataset.

    For every input pair this writes the original plus three variants
    (one flip, picked uniformly between horizontal and vertical; a
    sharpened copy; a rotation with angle uniform in [0, 90] degrees,
    bilinear for the image and nearest for the mask) into out_dir, and
    writes out_dir/manifest.csv listing all 4N pairs. Per-image draws are
    seeded from (seed, crc32(id)), so expansion order does not matter.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    expanded: list[ManifestRecord] = []
    for rec in records:
        img = load_image(rec.image_path)
        mask = load_mask(rec.mask_path)
        rng = np.random.default_rng(
            np.random.SeedSequence([seed, zlib.crc32(rec.id.encode("utf-8"))])
        )
        flip = hflip if rng.integers(0, 2) == 0 else vflip
        angle = float(rng.uniform(0.0, 90.0))
        variants = [
            (rec.id, img, mask),
            (f"{rec.id}_flip", flip(img), flip(mask)),
            (f"{rec.id}_sharp", sharpen(img), mask),
            (f"{rec.id}_rot", rotate(img, angle, "bilinear"),
             (rotate(mask, angle, "nearest") >= 0.5).astype(np.float32)),
        ]
        for vid, vimg, vmask in variants:
            ipath = out_dir / f"{vid}_img.png"
            mpath = out_dir / f"{vid}_mask.png"
            save_image(ipath, vimg)
            save_mask(mpath, vmask)
            expanded.append(ManifestRecord(vid, ipath, mpath))
    write_manifest(out_dir / "manifest.csv", expanded)
    return expanded


# ---------------------------------------------------------------------------
# in-memory dataset


class Dataset:
    """Loads manifest pairs at a fixed working resolution, cached in memory."""

    def __init__(self, records: Sequence[ManifestRecord], size: int):
        if size < 8:
            raise DataError(f"working size {size} is too small")
        self.records = list(records)
        self.size = size
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def __len__(self) -> int:
        return len(self.records)

    def load(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """(image (3, S, S) float32, mask (1, S, S) float32 in {0, 1})."""
        hit = self._cache.get(i)
        if hit is not None:
            return hit
        rec = self.records[i]
        img = load_image(rec.image_path)
        mask = load_mask(rec.mask_path)
        if img.shape[1:] != mask.shape[1:]:
            raise DataError(
                f"{rec.id}: image {img.shape[1:]} and mask {mask.shape[1:]} differ"
            )
        if img.shape[1:] != (self.size, self.size):
            img = resize_image(img, self.size, self.size)
            mask = resize_mask(mask, self.size, self.size)
        self._cache[i] = (img, mask)
        return img, mask

    def original_mask(self, i: int) -> np.ndarray:
        return load_mask(self.records[i].mask_path)


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    phi: float


@dataclass(frozen=True)
class Scene:
    size: int
    ellipses: tuple
    bg_color: tuple
    fg_color: tuple
    opacity: float
    hair_seeds: tuple


def ellipse_membership(size: int, ellipses: Sequence[Ellipse]) -> np.ndarray:
    """Boolean mask of pixels inside any ellipse, by the exact quadratic form.

    A pixel (row i, col j) is inside when
    ((dx cos phi + dy sin phi) / a)^2 + ((dy cos phi - dx sin phi) / b)^2 <= 1
    with dx = j - cx, dy = i - cy, evaluated in float64.
    """
    jj, ii = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64))
    mask = np.zeros((size, size), dtype=bool)
    for e in ellipses:
        dx = jj - e.cx
        dy = ii - e.cy
        xr = (dx * math.cos(e.phi) + dy * math.sin(e.phi)) / e.a
        yr = (dy * math.cos(e.phi) - dx * math.sin(e.phi)) / e.b
        mask |= xr * xr + yr * yr <= 1.0
    return mask


def sample_scene(rng: np.random.Generator, size: int) -> Scene:
    """Draw scene geometry and palette; retries until the foreground area
    fraction lands in [0.02, 0.60]."""
    for _ in range(64):
        n_ell = int(rng.integers(1, 3))
        ellipses = tuple(
            Ellipse(
                cx=float(rng.uniform(0.25, 0.75) * size),
                cy=float(rng.uniform(0.25, 0.75) * size),
                a=float(rng.uniform(0.12, 0.30) * size),
                b=float(rng.uniform(0.12, 0.30) * size),
                phi=float(rng.uniform(0.0, math.pi)),
            )
            for _ in range(n_ell)
        )
        frac = ellipse_membership(size, ellipses).mean()
        if 0.02 <= frac <= 0.60:
            break
    bg = tuple(float(rng.uniform(0.45, 0.85)) for _ in range(3))
    fg = tuple(float(rng.uniform(0.05, 0.40)) for _ in range(3))
    opacity = float(rng.uniform(0.75, 1.0))
    hair_seeds = tuple(int(s) for s in rng.integers(0, 2 ** 31, size=rng.integers(0, 4)))
    return Scene(size=size, ellipses=ellipses, bg_color=bg, fg_color=fg,
                 opacity=opacity, hair_seeds=hair_seeds)


def render_scene(rng: np.random.Generator, scene: Scene) -> tuple[np.ndarray, np.ndarray]:
    """Render (image (3, S, S), mask (1, S, S)); mask is exact membership.

    The image gets a textured background, soft-edged lesions, and thin
    hair strokes; none of those touch the mask.
    """
    size = scene.size
    coarse = rng.uniform(-1.0, 1.0, size=(max(2, size // 8), max(2, size // 8)))
    texture = bilinear_resize_array(coarse, size, size) * 0.06
    noise = rng.normal(0.0, 0.015, size=(3, size, size))
    img = np.empty((3, size, size), dtype=np.float64)
    for ch in range(3):
        img[ch] = scene.bg_color[ch] + texture + noise[ch]

    jj, ii = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64))
    soft = np.zeros((size, size), dtype=np.float64)
    for e in scene.ellipses:
        dx = jj - e.cx
        dy = ii - e.cy
        xr = (dx * math.cos(e.phi) + dy * math.sin(e.phi)) / e.a
        yr = (dy * math.cos(e.phi) - dx * math.sin(e.phi)) / e.b
        q = xr * xr + yr * yr
        # clip keeps exp() in range; beyond +-40 the sigmoid saturates anyway
        z = np.clip((q - 1.0) / 0.08, -40.0, 40.0)
        soft = np.maximum(soft, 1.0 / (1.0 + np.exp(z)))
    alpha = soft * scene.opacity
    for ch in range(3):
        img[ch] = img[ch] * (1.0 - alpha) + scene.fg_color[ch] * alpha

    for hs in scene.hair_seeds:
        hrng = np.random.default_rng(hs)
        y = float(hrng.uniform(0.1, 0.9) * size)
        x = float(hrng.uniform(0.1, 0.9) * size)
        ang = float(hrng.uniform(0.0, 2.0 * math.pi))
        curve = float(hrng.uniform(-0.06, 0.06))
        shade = float(hrng.uniform(0.0, 0.25))
        steps = int(size * hrng.uniform(0.4, 0.9))
        for _ in range(steps):
            iy, ix = int(round(y)), int(round(x))
            if 0 <= iy < size and 0 <= ix < size:
                img[:, iy, ix] = img[:, iy, ix] * 0.35 + shade * 0.65
            ang += curve
            y += math.sin(ang)
            x += math.cos(ang)

    mask = ellipse_membership(size, scene.ellipses)
    return (np.clip(img, 0.0, 1.0).astype(np.float32),
            mask.astype(np.float32)[None, :, :])


def synthesize(n: int, size: int, seed: int, out_dir) -> list[ManifestRecord]:
    """Write n synthetic pairs plus manifest.csv into out_dir.

    Sample i depends only on (seed, i), so subsets and order are stable.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        scene = sample_scene(rng, size)
        img, mask = render_scene(rng, scene)
        rid = f"synth{i:05d}"
        ipath = out_dir / f"{rid}_img.png"
        mpath = out_dir / f"{rid}_mask.png"
        save_image(ipath, img)
        save_mask(mpath, mask)
        records.append(ManifestRecord(rid, ipath, mpath))
    write_manifest(out_dir / "manifest.csv", records)
    return records
