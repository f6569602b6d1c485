"""Manifests, image loading, synthetic spliced forgeries and degradations."""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

__all__ = [
    "SPLITS",
    "ManifestRow",
    "Manifest",
    "ArrayDataset",
    "Degradation",
    "load_image",
    "load_batch",
    "make_real_pool",
    "splice",
    "synth_forgery",
    "apply_degradation",
    "parse_degradation",
    "gaussian_sigma",
]

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ManifestRow:
    path: str
    label: int
    split: str


class Manifest:
    """Rows of ``path,label,split``; relative paths resolve against ``root``."""

    def __init__(self, rows=(), root=None):
        self.rows = [r if isinstance(r, ManifestRow) else ManifestRow(*r) for r in rows]
        self.root = Path(root) if root is not None else None

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def resolve(self, row):
        p = Path(row.path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def split(self, name):
        return Manifest([r for r in self.rows if r.split == name], self.root)

    @property
    def labels(self):
        return np.array([r.label for r in self.rows], dtype=np.int64)

    def validate(self, check_files=True):
        seen = {}
        for r in self.rows:
            if r.label not in (0, 1):
                raise ValueError(f"label must be 0 or 1, got {r.label!r} for {r.path}")
            if r.split not in SPLITS:
                raise ValueError(f"unknown split {r.split!r} for {r.path}")
            if seen.setdefault(r.path, r.split) != r.split:
                raise ValueError(f"{r.path} appears in splits {seen[r.path]} and {r.split}")
            if check_files and not self.resolve(r).exists():
                raise FileNotFoundError(self.resolve(r))
        return self

    @classmethod
    def read_csv(cls, path):
        path = Path(path)
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["path", "label", "split"]:
                raise ValueError(f"{path}: expected header path,label,split, got {reader.fieldnames}")
            rows = [ManifestRow(d["path"], int(d["label"]), d["split"]) for d in reader]
        return cls(rows, root=path.parent)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "label", "split"])
            for r in self.rows:
                w.writerow([r.path, r.label, r.split])


def load_image(path, input_side=224):
    """Decode to RGB, resize to a square side (bilinear), scale to [0, 1]."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (input_side, input_side):
            im = im.resize((input_side, input_side), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def load_batch(manifest, indices, input_side=224, on_error="raise"):
    """Return ``(images, labels)`` for the given manifest rows.

    ``on_error="skip"`` logs unreadable files and leaves them out.
    """
    images, labels = [], []
    for i in indices:
        row = manifest.rows[i]
        try:
            images.append(load_image(manifest.resolve(row), input_side))
        except (OSError, ValueError) as exc:
            if on_error != "skip":
                raise
            log.warning("skipping unreadable %s: %s", row.path, exc)
            continue
        labels.append(row.label)
    if not images:
        return (np.zeros((0, input_side, input_side, 3), np.float32), np.zeros(0, np.int64))
    return np.stack(images), np.array(labels, dtype=np.int64)


class ArrayDataset:
    """Images held in memory as (N, H, W, C) float32 with int labels."""

    def __init__(self, images, labels):
        self.images = np.asarray(images, dtype=np.float32)
        self.labels = np.asarray(labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    def __len__(self):
        return len(self.labels)

    @property
    def side(self):
        return self.images.shape[1]

    @classmethod
    def from_manifest(cls, manifest, split=None, input_side=224, on_error="raise"):
        m = manifest.split(split) if split else manifest
        return cls(*load_batch(m, range(len(m)), input_side, on_error))

    def subset(self, idx):
        return ArrayDataset(self.images[idx], self.labels[idx])


def _smooth_noise(rng, side, sigma, channels=1):
    field = ndimage.gaussian_filter(rng.standard_normal((side, side, channels)),
                                    (sigma, sigma, 0), mode="wrap")
    return field / (field.std() + 1e-12)


def make_real_pool(count, side=64, seed=0, noise=(0.005, 0.04)):
    """Procedural face-like images used as the 'real' class.

    Each image has a smooth background, a skin-toned ellipse with eyes,
    brows and mouth at jittered positions, low-frequency shading, fine skin
    texture and per-pixel sensor noise.  ``noise`` is a standard deviation or
    a (lo, hi) range drawn per image.
    """
    lo, hi = (noise, noise) if np.isscalar(noise) else noise
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side] / (side - 1)
    out = np.empty((count, side, side, 3), np.float32)
    for k in range(count):
        bg = rng.uniform(0.1, 0.9, 3)
        grad = rng.uniform(-0.25, 0.25, 3)
        img = bg + grad * (yy[..., None] - 0.5) + 0.08 * _smooth_noise(rng, side, side / 6, 3)
        cy, cx = 0.5 + rng.normal(0, 0.03, 2)
        ay, ax = rng.uniform(0.32, 0.40), rng.uniform(0.24, 0.31)
        face = ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0
        skin = np.array([rng.uniform(0.55, 0.95), rng.uniform(0.4, 0.75), rng.uniform(0.3, 0.6)])
        shade = 1.0 + 0.15 * (xx - cx) * rng.choice([-1, 1]) + 0.05 * _smooth_noise(rng, side, side / 10)[..., 0]
        skin_img = skin * shade[..., None] + 0.03 * _smooth_noise(rng, side, 0.8, 3)
        img = np.where(face[..., None], skin_img, img)
        eye_dy, eye_dx = rng.uniform(0.08, 0.12), rng.uniform(0.09, 0.13)
        eye_col = rng.uniform(0.05, 0.35, 3)
        for sx in (-1, 1):
            ey, ex = cy - eye_dy, cx + sx * eye_dx
            eye = ((yy - ey) / 0.03) ** 2 + ((xx - ex) / 0.05) ** 2 <= 1.0
            img[eye] = eye_col
            brow = (np.abs(yy - (ey - 0.06)) < 0.012) & (np.abs(xx - ex) < 0.06)
            img[brow] = skin * 0.45
        my = cy + rng.uniform(0.14, 0.2)
        mouth = ((yy - my) / 0.025) ** 2 + ((xx - cx) / rng.uniform(0.07, 0.11)) ** 2 <= 1.0
        img[mouth] = np.array([rng.uniform(0.45, 0.75), 0.2, 0.2])
        nose = (np.abs(xx - cx) < 0.012) & (yy > cy - 0.04) & (yy < cy + 0.07)
        img[nose] = skin * 0.7
        img = img + rng.normal(0, rng.uniform(lo, hi), img.shape)
        out[k] = np.clip(img, 0.0, 1.0)
    return out


def splice(target, donor, rng, feather=(1.0, 2.5), donor_scale=(0.5, 0.8), max_shift=0.05):
    """Blend an elliptical donor region into ``target``.

    The donor is shifted by up to ``max_shift * side`` pixels (imperfect
    alignment), resampled down and back up (a stand-in for a generator's lower
    native resolution) and blended with a Gaussian-feathered alpha.  Returns ``(fake, alpha)``; pixels with ``alpha == 0`` are copied
    from ``target`` unchanged.
    """
    side = target.shape[0]
    yy, xx = np.mgrid[0:side, 0:side] / (side - 1)
    cy, cx = 0.5 + rng.normal(0, 0.04, 2)
    ay, ax = rng.uniform(0.16, 0.30), rng.uniform(0.14, 0.24)
    theta = rng.uniform(-0.4, 0.4)
    dy, dx = yy - cy, xx - cx
    u = dy * np.cos(theta) + dx * np.sin(theta)
    v = -dy * np.sin(theta) + dx * np.cos(theta)
    mask = ((u / ay) ** 2 + (v / ax) ** 2 <= 1.0).astype(np.float64)
    alpha = ndimage.gaussian_filter(mask, rng.uniform(*feather), truncate=3.0)
    alpha[alpha < 1e-3] = 0.0
    shift = int(round(max_shift * side))
    if shift:
        donor = np.roll(donor, tuple(rng.integers(-shift, shift + 1, 2)), axis=(0, 1))
    small = max(4, int(round(side * rng.uniform(*donor_scale))))
    src = cv2.resize(donor.astype(np.float32), (small, small), interpolation=cv2.INTER_LINEAR)
    src = cv2.resize(src, (side, side), interpolation=cv2.INTER_LINEAR).reshape(donor.shape)
    a = alpha[..., None]
    fake = np.where(a > 0, a * src + (1 - a) * target, target)
    return np.clip(fake, 0.0, 1.0).astype(np.float32), alpha


def _to_uint8(img):
    return np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8)


def _save_png(path, img):
    arr = _to_uint8(img)
    Image.fromarray(arr[..., 0] if arr.shape[2] == 1 else arr).save(path)


def synth_forgery(real_pool, count, seed=0, out_dir=None, split_fracs=(0.8, 0.0, 0.2),
                  max_tries=20, **splice_kw):
    """Build a real/fake manifest from a pool of real images.

    Every pool image becomes a real row; ``count`` fakes are spliced from
    random (target, donor) pairs.  Splits are assigned per class in the given
    fractions.  With ``out_dir`` the images are written there as PNG and the
    manifest (also saved as ``manifest.csv``) refers to them; otherwise the
    returned manifest's ``arrays`` attribute holds the images in row order.
    """
    pool = [np.asarray(p, np.float32) if not isinstance(p, (str, os.PathLike))
            else load_image(p, _side_of(real_pool)) for p in real_pool]
    if len(pool) < 2:
        raise ValueError("synth_forgery needs at least two real images")
    rng = np.random.default_rng(seed)
    fakes = []
    for _ in range(count):
        t, d = rng.choice(len(pool), 2, replace=False)
        for _ in range(max_tries):
            fake, _alpha = splice(pool[t], pool[d], rng, **splice_kw)
            changed = np.abs(_to_uint8(fake).astype(int) - _to_uint8(pool[t]).astype(int)) > 2
            if changed.any(axis=-1).mean() > 0.01:
                break
        else:
            raise RuntimeError(f"splice of donor {d} into target {t} left the target unchanged")
        fakes.append(fake)

    def assign(n):
        bounds = np.cumsum(np.round(np.asarray(split_fracs) / sum(split_fracs) * n)).astype(int)
        labels = np.searchsorted(bounds, np.arange(n), side="right")
        return [SPLITS[min(i, 2)] for i in rng.permutation(labels)]

    images = pool + fakes
    labels = [0] * len(pool) + [1] * len(fakes)
    splits = assign(len(pool)) + assign(len(fakes))
    names = [f"real_{i:05d}.png" for i in range(len(pool))] + \
            [f"fake_{i:05d}.png" for i in range(len(fakes))]
    manifest = Manifest([ManifestRow(n, y, s) for n, y, s in zip(names, labels, splits)], out_dir)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, img in zip(names, images):
            _save_png(out_dir / name, img)
        manifest.write_csv(out_dir / "manifest.csv")
    manifest.arrays = np.stack(images) if images else None
    return manifest


def _side_of(pool):
    with Image.open(pool[0]) as im:
        return im.size[0]


@dataclass(frozen=True)
class Degradation:
    """``kind`` is ``"resize"`` (parameter = intermediate side) or ``"blur"`` (odd kernel)."""

    kind: str
    parameter: int

    def __post_init__(self):
        if self.kind not in ("resize", "blur"):
            raise ValueError(f"unknown degradation kind {self.kind!r}")
        if self.parameter < 1:
            raise ValueError("degradation parameter must be positive")
        if self.kind == "blur" and self.parameter % 2 == 0:
            raise ValueError(f"blur kernel must be odd, got {self.parameter}")

    @property
    def tag(self):
        return f"{self.kind}:{self.parameter}"


def parse_degradation(text):
    kind, _, value = text.partition(":")
    return Degradation(kind.strip(), int(value))


def gaussian_sigma(k):
    """Blur sigma for kernel size ``k``: 0.3 * ((k - 1) / 2 - 1) + 0.8."""
    return 0.3 * ((k - 1) / 2 - 1) + 0.8


def apply_degradation(img, d):
    """Blur or down/up resize an (H, W, C) image; shape and [0, 1] range preserved."""
    img = np.asarray(img)
    h, w, c = img.shape
    work = img.astype(np.float64)
    if d.kind == "blur":
        k = d.parameter
        out = cv2.GaussianBlur(work, (k, k), gaussian_sigma(k), borderType=cv2.BORDER_REFLECT_101)
    else:
        s = d.parameter
        out = work
        if (s, s) != (h, w):
            out = cv2.resize(work, (s, s), interpolation=cv2.INTER_LINEAR)
            out = cv2.resize(out, (w, h), interpolation=cv2.INTER_LINEAR)
    return np.clip(out.reshape(h, w, c), 0.0, 1.0).astype(img.dtype if img.dtype.kind == "f" else np.float32)
