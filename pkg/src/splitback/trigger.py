"""Distributed trigger construction and implanting.

Two construction modes, both intensity-based (the trigger adds a large
constant to selected pixels rather than overwriting them):

* centered: one rectangle of given height x width centered at a fixed
  image location, with a cross pattern carved out (two one-pixel digital
  diagonals are additively zero, the rest of the rectangle is additively
  +intensity). The rectangle is split along slice boundaries into
  per-adversary masks; it must lie entirely inside adversary-owned
  pixels.

* scattered: the total area budget is split evenly into per-adversary
  patches, each placed at a fresh random location inside its owner's
  slice for every poisoned occurrence. Patches are (area/2) x 2 when
  that is possible, otherwise the most-square factorization; the cross
  carve-out only applies when a patch is at least 3 pixels in both
  directions (thinner patches would be consumed entirely by a stroke).

Implanting is linear in the intensity: implant(x, a + b) - implant(x, a)
equals b * mask exactly, and carved cells never change the input.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import PartitionScheme
from .errors import ConfigError, GeometryError, PlacementError
from .nn import Vae, decode, vae_forward
from .utils import rng_for

logger = logging.getLogger(__name__)


def _digital_cross(height: int, width: int) -> np.ndarray:
    """Boolean mask of two one-pixel corner-to-corner diagonals.

    Degenerate rectangles (a single row or column) get no cross: the
    stroke would cover every cell.
    """
    cross = np.zeros((height, width), dtype=bool)
    if height < 2 or width < 2:
        return cross
    for r in range(height):
        c = int(r * (width - 1) / (height - 1) + 0.5)
        cross[r, c] = True
        cross[r, width - 1 - c] = True
    return cross


@dataclass
class TriggerShare:
    """One adversary's piece of the trigger.

    centered mode: add_mask/zero_mask are full slice-plane masks (h, w)
    and placement is fixed. scattered mode: patch_add/patch_zero are the
    small patch masks and every implant needs an explicit placement.
    """

    owner: int
    mode: str  # "centered" | "scattered"
    slice_shape: tuple[int, int, int]
    add_mask: np.ndarray | None = None
    zero_mask: np.ndarray | None = None
    patch_add: np.ndarray | None = None
    patch_zero: np.ndarray | None = None

    @property
    def is_empty(self) -> bool:
        if self.mode == "centered":
            return not (self.add_mask.any() or self.zero_mask.any())
        return False

    @property
    def patch_shape(self) -> tuple[int, int]:
        if self.mode != "scattered":
            raise ConfigError("patch_shape only applies to scattered shares")
        return self.patch_add.shape


def trigger_rect(height: int, width: int, center: tuple[int, int]) -> tuple[int, int, int, int]:
    """(top, left, height, width) of a rectangle centered at (row, col)."""
    row, col = center
    return row - height // 2, col - width // 2, height, width


def build_centered_trigger(
    scheme: PartitionScheme,
    adversaries: list[int],
    height: int,
    width: int,
    center: tuple[int, int],
) -> dict[int, TriggerShare]:
    """Split one cross-carved rectangle among adversaries by slice ownership.

    Raises:
        PlacementError: rectangle leaves the image or touches pixels
            owned by benign clients.
    """
    if height < 1 or width < 1:
        raise ConfigError("trigger dimensions must be >= 1")
    _, img_h, img_w = scheme.image_shape
    top, left, _, _ = trigger_rect(height, width, center)
    if top < 0 or left < 0 or top + height > img_h or left + width > img_w:
        raise PlacementError(
            f"{height}x{width} trigger at {center} leaves the {img_h}x{img_w} image"
        )
    adversary_set = set(adversaries)
    cross = _digital_cross(height, width)
    shares = {}
    for m in adversaries:
        s_top, s_left, s_h, s_w = scheme.rects[m]
        shares[m] = TriggerShare(
            owner=m,
            mode="centered",
            slice_shape=(scheme.image_shape[0], s_h, s_w),
            add_mask=np.zeros((s_h, s_w), dtype=np.float32),
            zero_mask=np.zeros((s_h, s_w), dtype=bool),
        )
    for r in range(height):
        for c in range(width):
            row, col = top + r, left + c
            owner = scheme.owner_of(row, col)
            if owner not in adversary_set:
                raise PlacementError(
                    f"trigger cell ({row}, {col}) belongs to benign client {owner}"
                )
            s_top, s_left, _, _ = scheme.rects[owner]
            share = shares[owner]
            if cross[r, c]:
                share.zero_mask[row - s_top, col - s_left] = True
            else:
                share.add_mask[row - s_top, col - s_left] = 1.0
    return shares


def patch_dims(share_area: int) -> tuple[int, int]:
    """Shape of one scattered patch: (area/2, 2) when even and >= 4,
    else the most-square factorization (ties resolve to the wider one)."""
    if share_area < 1:
        raise GeometryError(f"patch area must be >= 1, got {share_area}")
    if share_area >= 4 and share_area % 2 == 0:
        return share_area // 2, 2
    best = (1, share_area)
    for h in range(1, int(np.sqrt(share_area)) + 1):
        if share_area % h == 0:
            best = (h, share_area // h)  # h <= w: wider than tall
    return best


def build_scattered_triggers(
    scheme: PartitionScheme, adversaries: list[int], total_area: int
) -> dict[int, TriggerShare]:
    """Per-adversary solid patches covering the split area budget.

    Raises:
        GeometryError: budget does not divide evenly, or a patch cannot
            fit inside its owner's slice.
    """
    n = len(adversaries)
    if n == 0:
        raise ConfigError("need at least one adversary")
    if total_area % n != 0:
        raise GeometryError(f"area budget {total_area} not divisible by {n} adversaries")
    share_area = total_area // n
    p_h, p_w = patch_dims(share_area)
    shares = {}
    for m in adversaries:
        s_h, s_w = scheme.rects[m][2], scheme.rects[m][3]
        if p_h > s_h or p_w > s_w:
            raise GeometryError(
                f"patch {p_h}x{p_w} does not fit client {m}'s {s_h}x{s_w} slice"
            )
        patch_add = np.ones((p_h, p_w), dtype=np.float32)
        patch_zero = np.zeros((p_h, p_w), dtype=bool)
        if min(p_h, p_w) >= 3:
            carve = _digital_cross(p_h, p_w)
            patch_zero |= carve
            patch_add[carve] = 0.0
        shares[m] = TriggerShare(
            owner=m,
            mode="scattered",
            slice_shape=(scheme.image_shape[0], s_h, s_w),
            patch_add=patch_add,
            patch_zero=patch_zero,
        )
    return shares


def random_placement(share: TriggerShare, rng: np.random.Generator) -> tuple[int, int]:
    """Uniform placement of a scattered patch inside its owner's slice."""
    _, s_h, s_w = share.slice_shape
    p_h, p_w = share.patch_shape
    return int(rng.integers(0, s_h - p_h + 1)), int(rng.integers(0, s_w - p_w + 1))


def implant(
    rows: np.ndarray,
    share: TriggerShare,
    intensity: float,
    placement: tuple[int, int] | None = None,
    clip_to_range: bool = False,
) -> np.ndarray:
    """Add the share's intensity pattern to feature rows (returns a copy).

    rows is (n, C, h, w) in the owner's slice geometry. centered shares
    ignore placement; scattered shares require one.
    """
    rows = np.array(rows, copy=True)
    if rows.shape[1:] != share.slice_shape:
        raise GeometryError(f"rows shaped {rows.shape[1:]}, share expects {share.slice_shape}")
    if share.mode == "centered":
        rows += np.asarray(intensity, dtype=rows.dtype) * share.add_mask.astype(rows.dtype)
    elif share.mode == "scattered":
        if placement is None:
            raise GeometryError("scattered shares need a placement")
        top, left = placement
        p_h, p_w = share.patch_shape
        _, s_h, s_w = share.slice_shape
        if not (0 <= top <= s_h - p_h and 0 <= left <= s_w - p_w):
            raise GeometryError(f"placement {placement} puts {p_h}x{p_w} patch outside slice")
        rows[:, :, top : top + p_h, left : left + p_w] += np.asarray(
            intensity, dtype=rows.dtype
        ) * share.patch_add.astype(rows.dtype)
    else:
        raise ConfigError(f"unknown share mode {share.mode!r}")
    if clip_to_range:
        rows = np.clip(rows, 0.0, 1.0)
    return rows


def select_poison_set(
    agreed: np.ndarray, num_train: int, budget_fraction: float, seed: int, tag: int | None = None
) -> np.ndarray:
    """Sample the poisoned row set from the agreed indices.

    Targets round(budget_fraction * num_train) rows; if the agreed set is
    smaller, every agreed row is used and a warning is logged. tag
    separates streams when several adversaries draw their own plans.
    """
    if not 0.0 <= budget_fraction <= 1.0:
        raise ConfigError(f"budget_fraction {budget_fraction} outside [0, 1]")
    agreed = np.asarray(agreed, dtype=np.int64)
    want = int(round(budget_fraction * num_train))
    if want >= len(agreed):
        if want > len(agreed):
            logger.warning(
                "poison budget wants %d rows but only %d were agreed; using all",
                want,
                len(agreed),
            )
        return np.sort(agreed)
    rng = rng_for(seed, "poison-set") if tag is None else rng_for(seed, "poison-set", tag)
    return np.sort(rng.choice(agreed, size=want, replace=False))


def generate_sample(generator: Vae, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draw latent noise and decode: synthetic rows in the generator's space."""
    z = rng.standard_normal((count, generator.latent_dim)).astype(np.float32)
    return decode(generator, z)


def generate_counterpart(
    generator: Vae, rows: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Per-row generated stand-ins: posterior-sample each row through the VAE.

    Encoding the real row and decoding a stochastic latent keeps the coarse
    structure and the sample-to-sample variety of the originals while the
    fine, row-specific detail is resampled. Prior draws collapse toward the
    class mean, and a near-constant swapped slice is itself a learnable
    signature that displaces the trigger.

    Decoder outputs sit on the smooth reconstruction manifold, which would
    also be a giveaway, so the ambient noise floor is restored: each output
    gets Gaussian noise at the decoder's own residual scale, the empirical
    RMS error against the rows being replaced.
    """
    flat = np.asarray(rows, dtype=np.float32).reshape(len(rows), -1)
    recon = vae_forward(generator, flat, rng).recon
    residual = float(np.sqrt(np.mean((recon - flat) ** 2))) if len(flat) else 0.0
    return recon + rng.normal(0.0, residual, size=recon.shape).astype(recon.dtype)


def poison_batch(
    batch_slices: dict[int, np.ndarray],
    poison_rows: np.ndarray,
    shares: dict[int, TriggerShare],
    generators: dict[int, Vae],
    intensity: float,
    rng: np.random.Generator,
    swap: bool = True,
    clip_to_range: bool = False,
) -> dict[int, np.ndarray]:
    """Poison selected rows of each adversary's batch slice.

    poison_rows holds positions within the batch. For every adversary:
    the row's slice is replaced by its generated counterpart (swap=True,
    the default; the no-swap ablation keeps the original features), then
    the trigger share is implanted. Scattered shares draw a new placement
    per (row, adversary) from rng. Benign clients' slices pass through
    untouched.

    Returns a dict with copies for adversary slices (originals are never
    mutated).
    """
    poison_rows = np.asarray(poison_rows, dtype=np.int64)
    out = dict(batch_slices)
    if len(poison_rows) == 0:
        return out
    for m in sorted(shares):  # fixed order so rng draws are reproducible
        share = shares[m]
        rows = np.array(batch_slices[m], copy=True)
        shape = rows.shape[1:]
        if swap:
            if m not in generators:
                raise ConfigError(f"adversary {m} has no generator VAE for swapping")
            fake = generate_counterpart(generators[m], rows[poison_rows], rng)
            rows[poison_rows] = fake.reshape(len(poison_rows), *shape).astype(rows.dtype)
        if share.mode == "centered":
            rows[poison_rows] = implant(
                rows[poison_rows], share, intensity, clip_to_range=clip_to_range
            )
        else:
            for r in poison_rows:
                placement = random_placement(share, rng)
                rows[r : r + 1] = implant(
                    rows[r : r + 1], share, intensity, placement, clip_to_range
                )
        out[m] = rows
    return out
