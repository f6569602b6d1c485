"""Dual-grid block shuffling.

Images are channel-last float arrays (H, W, C) with values in [0, 1].  A
shuffle first permutes whole tiles on the coarse (inter) grid, then permutes
pixels inside a random subset of tiles on the fine (intra) grid.  Every step
is recorded so the transform can be inverted exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DimensionError",
    "ShuffleConfig",
    "BlockGrid",
    "CoordTarget",
    "ShuffleOutcome",
    "check_image",
    "image_stream",
    "partition_blocks",
    "assemble_blocks",
    "intra_shuffle_block",
    "normalize_coords",
    "identity_map",
    "shuffle_image",
    "shuffle_batch",
    "unshuffle",
]


class DimensionError(ValueError):
    """Image side not divisible by a block size."""


@dataclass(frozen=True)
class ShuffleConfig:
    """Knobs of the block shuffling procedure.

    ``q_range`` bounds the per-image probability that an intra tile is
    shuffled; ``p_inter`` is the probability that the tile layout is permuted.
    """

    s_intra: int = 16
    s_inter: int = 32
    q_range: tuple[float, float] = (0.4, 0.6)
    p_inter: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "q_range", tuple(float(v) for v in self.q_range))
        lo, hi = self.q_range
        if self.s_intra < 1 or self.s_inter < 1:
            raise ValueError("block sizes must be positive")
        if self.s_inter % self.s_intra:
            raise ValueError(
                f"s_inter={self.s_inter} must be a multiple of s_intra={self.s_intra}")
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"q_range must satisfy 0 <= lo <= hi <= 1, got {self.q_range}")
        if not 0.0 <= self.p_inter <= 1.0:
            raise ValueError(f"p_inter must lie in [0, 1], got {self.p_inter}")

    def grids(self, height, width):
        """Return ``((m_a, n_a), (m_b, n_b))`` for an image of the given size."""
        return ((height // self.s_intra, width // self.s_intra),
                (height // self.s_inter, width // self.s_inter))


@dataclass
class BlockGrid:
    """``blocks`` has shape (m, n, s, s, C)."""

    blocks: np.ndarray

    def __post_init__(self):
        b = self.blocks
        if b.ndim != 5 or b.shape[2] != b.shape[3]:
            raise ValueError(f"ragged block grid: expected (m, n, s, s, C), got {b.shape}")

    @property
    def m(self):
        return self.blocks.shape[0]

    @property
    def n(self):
        return self.blocks.shape[1]

    @property
    def s(self):
        return self.blocks.shape[2]


@dataclass
class CoordTarget:
    """Source position of every inter tile.

    ``beta[i, j] = (row, col)`` is where tile (i, j) of the shuffled image
    came from; ``M`` is the same map scaled to [-1, 1], shape (2, m_b, n_b).
    """

    beta: np.ndarray
    M: np.ndarray = field(init=False)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.int64)
        self.M = normalize_coords(self.beta)


@dataclass
class ShuffleOutcome:
    image: np.ndarray
    mark: np.ndarray
    coords: CoordTarget
    intra_perms: dict | None
    inter_applied: bool
    s_intra: int
    s_inter: int


def check_image(img, *sides):
    """Validate an (H, W, C) image and its divisibility by each block side."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"expected an (H, W, C) image with C in (1, 3), got shape {img.shape}")
    if img.size and (np.nanmin(img) < 0.0 or np.nanmax(img) > 1.0 or np.isnan(img).any()):
        raise ValueError("image values must lie in [0, 1]")
    for s in sides:
        for axis, name in ((0, "height"), (1, "width")):
            if img.shape[axis] % s:
                raise DimensionError(
                    f"image {name} {img.shape[axis]} is not divisible by block size {s}")
    return img


def image_stream(seed, index, epoch=0):
    """Independent generator for one sample, keyed by (seed, epoch, index)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch, index])))


def partition_blocks(img, s):
    img = np.asarray(img)
    h, w = img.shape[:2]
    for axis, name in ((0, "height"), (1, "width")):
        if img.shape[axis] % s:
            raise DimensionError(
                f"image {name} {img.shape[axis]} is not divisible by block size {s}")
    c = img.shape[2]
    blocks = img.reshape(h // s, s, w // s, s, c).transpose(0, 2, 1, 3, 4).copy()
    return BlockGrid(blocks)


def assemble_blocks(grid):
    b = grid.blocks if isinstance(grid, BlockGrid) else BlockGrid(np.asarray(grid)).blocks
    m, n, s, _, c = b.shape
    return b.transpose(0, 2, 1, 3, 4).reshape(m * s, n * s, c).copy()


def _check_perm(perm, size):
    perm = np.asarray(perm)
    if perm.shape != (size,) or not np.array_equal(np.sort(perm), np.arange(size)):
        raise ValueError(f"not a permutation of 0..{size - 1}")
    return perm


def intra_shuffle_block(tile, perm):
    """Output pixel ``k`` (row-major) is input pixel ``perm[k]``; channels move together."""
    tile = np.asarray(tile)
    s = tile.shape[0]
    perm = _check_perm(perm, s * s)
    flat = tile.reshape(s * s, -1)
    return flat[perm].reshape(tile.shape)


def normalize_coords(beta):
    """Map integer (row, col) positions to [-1, 1]; single-row/column grids map to 0."""
    beta = np.asarray(beta)
    m, n = beta.shape[:2]
    out = np.zeros((2, m, n), dtype=np.float32)
    if m > 1:
        out[0] = 2.0 * beta[..., 0] / (m - 1) - 1.0
    if n > 1:
        out[1] = 2.0 * beta[..., 1] / (n - 1) - 1.0
    return out


def identity_map(m, n):
    rows, cols = np.meshgrid(np.arange(m), np.arange(n), indexing="ij")
    return np.stack([rows, cols], axis=-1)


def _permute_tiles(img, s, beta):
    grid = partition_blocks(img, s)
    return assemble_blocks(BlockGrid(grid.blocks[beta[..., 0], beta[..., 1]]))


def shuffle_image(img, cfg=ShuffleConfig(), rng=None):
    """Apply inter-tile then intra-tile shuffling to one image.

    The draw order from ``rng`` is fixed (inter gate, inter permutation, q,
    per-tile gates, per-tile permutations), so the outcome depends only on
    the generator state, the image and the config.
    """
    img = check_image(img, cfg.s_intra, cfg.s_inter)
    if rng is None:
        rng = np.random.default_rng()
    h, w, c = img.shape
    (ma, na), (mb, nb) = cfg.grids(h, w)

    inter_applied = bool(rng.random() < cfg.p_inter)
    if inter_applied:
        flat = rng.permutation(mb * nb)
        beta = np.stack(np.divmod(flat, nb), axis=-1).reshape(mb, nb, 2)
        out = _permute_tiles(img, cfg.s_inter, beta)
    else:
        beta = identity_map(mb, nb)
        out = img.copy()

    q = rng.uniform(*cfg.q_range)
    mark = (rng.random((ma, na)) < q).astype(np.uint8)
    s = cfg.s_intra
    idx = np.argwhere(mark)
    perms = rng.permuted(np.tile(np.arange(s * s), (len(idx), 1)), axis=1)
    if len(idx):
        blocks = partition_blocks(out, s).blocks.reshape(ma, na, s * s, c)
        sel = blocks[idx[:, 0], idx[:, 1]]
        blocks[idx[:, 0], idx[:, 1]] = np.take_along_axis(sel, perms[..., None], axis=1)
        out = assemble_blocks(BlockGrid(blocks.reshape(ma, na, s, s, c)))

    intra_perms = {(int(i), int(j)): p for (i, j), p in zip(idx, perms)}
    return ShuffleOutcome(out, mark, CoordTarget(beta), intra_perms, inter_applied,
                          cfg.s_intra, cfg.s_inter)


def shuffle_batch(images, cfg, seed, indices, epoch=0):
    """Shuffle a stack of images with one derived stream per sample index.

    Returns ``(images, P, M)`` stacked along the first axis.
    """
    outs = [shuffle_image(im, cfg, image_stream(seed, int(k), epoch))
            for im, k in zip(images, indices)]
    return (np.stack([o.image for o in outs]),
            np.stack([o.mark for o in outs]),
            np.stack([o.coords.M for o in outs]))


def unshuffle(outcome):
    """Invert the recorded intra permutations, then the tile permutation."""
    if outcome.intra_perms is None:
        raise NotImplementedError("outcome carries no permutation records")
    img = outcome.image
    c = img.shape[2]
    s = outcome.s_intra
    if outcome.intra_perms:
        grid = partition_blocks(img, s).blocks
        ma, na = grid.shape[:2]
        flat = grid.reshape(ma, na, s * s, c)
        for (i, j), perm in outcome.intra_perms.items():
            restored = np.empty_like(flat[i, j])
            restored[perm] = flat[i, j]
            flat[i, j] = restored
        img = assemble_blocks(BlockGrid(flat.reshape(ma, na, s, s, c)))
    beta = outcome.coords.beta
    if outcome.inter_applied:
        shuffled = partition_blocks(img, outcome.s_inter).blocks
        orig = np.empty_like(shuffled)
        orig[beta[..., 0], beta[..., 1]] = shuffled
        img = assemble_blocks(BlockGrid(orig))
    return img
