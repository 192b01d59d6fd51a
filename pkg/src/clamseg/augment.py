"""Slice pairing with blur / stretch augmentations.

Three pair categories feed the twin-model training objective:

* ``augment``: a tile paired with its own blurred-then-distorted copy
  (slice-level augmentation), weight eta = 1.
* ``normal``: tiles at one position from two negative-labeled images, each
  image augmented before tiling, eta = 1.
* ``cross``: a tile from a positive-labeled image against the same position
  in a negative-labeled image; eta comes from the positive image's manifest
  entry, falling back to the policy default.

Every random draw is recorded on the PairSample, and each pair gets its own
counter-derived RNG stream, so the stream is reproducible and order-stable.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from . import pgm
from .errors import DataError
from .imops import bilinear_resize, pad_center, round_half_up
from .manifest import manifest_path, read_manifest
from .seeding import derive_rng

BLUR_RANGE = (0.90, 1.00)
DISTORT_RANGE = (0.80, 1.00)


def _check_square(image):
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ValueError(f"expected a square 2-d image, got shape {image.shape}")


def blur(image, rng):
    """Drop resolution to r in [0.90, 1.00) and sample back up."""
    _check_square(image)
    s = image.shape[0]
    r = float(rng.uniform(*BLUR_RANGE))
    small = max(round_half_up(r * s), 1)
    out = bilinear_resize(bilinear_resize(image, (small, small)), (s, s))
    return out, {"r": r}


def distort(image, rng):
    """Scale the axes by sx, sy in [0.80, 1.00], then either resize back or
    zero-pad centered, chosen by a coin flip."""
    _check_square(image)
    s = image.shape[0]
    sx = float(rng.uniform(*DISTORT_RANGE))
    sy = float(rng.uniform(*DISTORT_RANGE))
    pad = bool(rng.integers(2))
    h = max(round_half_up(sy * s), 1)
    w = max(round_half_up(sx * s), 1)
    scaled = bilinear_resize(image, (h, w))
    if pad:
        out = pad_center(scaled, s, s)
    else:
        out = bilinear_resize(scaled, (s, s))
    return out, {"sx": sx, "sy": sy, "pad": pad}


def augment_chain(image, rng):
    """blur then distort, with merged draw records."""
    out, d1 = blur(image, rng)
    out, d2 = distort(out, rng)
    return out, {**d1, **d2}


def tile(image, tile_size):
    """Split an S x S image into raster-order T x T tiles -> [((r, c), tile)]."""
    _check_square(image)
    s = image.shape[0]
    t = int(tile_size)
    if t < 1 or s % t != 0:
        raise ValueError(f"tile size {tile_size} does not divide image size {s}")
    out = []
    for r in range(s // t):
        for c in range(s // t):
            out.append(((r, c), image[r * t:(r + 1) * t, c * t:(c + 1) * t].copy()))
    return out


@dataclass
class BatchImage:
    name: str
    label: str
    image: np.ndarray
    eta: float = None


def load_batch(data_dir, split):
    """Read a split's images (never its masks) into BatchImage records."""
    records = read_manifest(manifest_path(data_dir, split))
    if not records:
        raise DataError(f"{split} manifest in {data_dir} is empty")
    for rec in records:
        for p in (rec.image, rec.mask):
            if p and "eval_masks" in p.split("/"):
                raise DataError(f"manifest references hidden evaluation data: {p}")
    batch = []
    for rec in records:
        img = pgm.read_unit(os.path.join(data_dir, rec.image))
        batch.append(BatchImage(name=os.path.basename(rec.image), label=rec.label,
                                image=img, eta=rec.eta))
    return batch


@dataclass
class PairPolicy:
    n_augment: int = 4
    n_normal: int = 2
    n_cross: int = 2
    tile_size: int = 64
    default_eta: float = 0.5


@dataclass
class PairSample:
    kind: str
    slice_a: np.ndarray
    slice_b: np.ndarray
    eta: float
    source_a: str
    source_b: str
    coords: tuple
    draws: dict = field(default_factory=dict)


def _pick(rng, items):
    return items[int(rng.integers(len(items)))]


def _tile_at(image, tile_size, index):
    n = image.shape[0] // tile_size
    r, c = divmod(index, n)
    sl = image[r * tile_size:(r + 1) * tile_size,
               c * tile_size:(c + 1) * tile_size].copy()
    return (r, c), sl


def make_pairs(batch, seed, policy):
    """Build the pair list for one step; fully determined by seed and policy."""
    if not batch:
        raise DataError("empty batch")
    s = batch[0].image.shape[0]
    for b in batch:
        _check_square(b.image)
        if b.image.shape[0] != s:
            raise ValueError("batch images differ in size")
    if s % policy.tile_size != 0:
        raise ValueError(f"tile size {policy.tile_size} does not divide image size {s}")
    n_tiles = (s // policy.tile_size) ** 2

    pos = [b for b in batch if b.label == "pos"]
    neg = [b for b in batch if b.label == "neg"]
    if (policy.n_normal > 0 or policy.n_cross > 0) and not neg:
        raise DataError("policy needs negative-labeled images but batch has none")
    if policy.n_cross > 0 and not pos:
        raise DataError("policy needs positive-labeled images but batch has none")

    pairs = []
    for i in range(policy.n_augment):
        rng = derive_rng(seed, "pair", "augment", f"{i:05d}")
        src = _pick(rng, batch)
        coords, sl = _tile_at(src.image, policy.tile_size, int(rng.integers(n_tiles)))
        twin, draws = augment_chain(sl, rng)
        pairs.append(PairSample("augment", sl, twin.astype(np.float32), 1.0,
                                src.name, src.name, coords, {"b": draws}))
    for i in range(policy.n_normal):
        rng = derive_rng(seed, "pair", "normal", f"{i:05d}")
        ia, ib = _pick(rng, neg), _pick(rng, neg)
        img_a, da = augment_chain(ia.image, rng)
        img_b, db = augment_chain(ib.image, rng)
        ti = int(rng.integers(n_tiles))
        coords, sa = _tile_at(img_a.astype(np.float32), policy.tile_size, ti)
        _, sb = _tile_at(img_b.astype(np.float32), policy.tile_size, ti)
        pairs.append(PairSample("normal", sa, sb, 1.0, ia.name, ib.name,
                                coords, {"a": da, "b": db}))
    for i in range(policy.n_cross):
        rng = derive_rng(seed, "pair", "cross", f"{i:05d}")
        ip, iname = _pick(rng, pos), _pick(rng, neg)
        img_p, dp = augment_chain(ip.image, rng)
        img_n, dn = augment_chain(iname.image, rng)
        ti = int(rng.integers(n_tiles))
        coords, sp = _tile_at(img_p.astype(np.float32), policy.tile_size, ti)
        _, sn = _tile_at(img_n.astype(np.float32), policy.tile_size, ti)
        eta = ip.eta if ip.eta is not None else policy.default_eta
        pairs.append(PairSample("cross", sp, sn, float(eta), ip.name, iname.name,
                                coords, {"a": dp, "b": dn}))
    return pairs
