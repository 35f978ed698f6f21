"""Training-pair synthesis: tone-mapped LDR inputs and normalized HDR targets.

An HDR corpus is resized, its targets scaled to [0,1] by a reference peak
luminance and snapped to a 10-bit grid, and its LDR counterparts produced by
the global photographic tone mapping operator. Pairs go to disk as
(PPM, PFM) with a JSON-lines manifest; batches are sampled with replacement
from an explicit RNG state.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .hdrio import (HdrImage, HdrIoError, LdrImage, read_image, read_pfm,
                    read_pnm, write_pfm, write_pnm)
from .tensor import Tensor

logger = logging.getLogger(__name__)

# BT.2020 luma weights, matching the corpus's declared gamut.
LUMA_WEIGHTS = (0.2627, 0.6780, 0.0593)
LOG_AVERAGE_DELTA = 1e-6
TARGET_LEVELS = 1023    # 10-bit grid


def luminance(pixels: np.ndarray) -> np.ndarray:
    """BT.2020 luma of an (h, w, 3) array."""
    r, g, b = LUMA_WEIGHTS
    return (r * pixels[..., 0] + g * pixels[..., 1] + b * pixels[..., 2]).astype(
        pixels.dtype)


def reinhard_tmo(hdr: HdrImage, key: float = 0.18,
                 l_white: float | None = None) -> LdrImage:
    """Global photographic operator.

    Luminance is scaled by key / log-average, compressed by
    L*(1 + L/l_white^2)/(1 + L), and colors rescaled by the luminance ratio.
    l_white=None uses the max scaled luminance (burns out only the peak).
    """
    if key <= 0:
        raise ValueError(f"key must be positive, got {key}")
    if l_white is not None and l_white <= 0:
        raise ValueError(f"l_white must be positive, got {l_white}")
    lum = luminance(hdr.pixels).astype(np.float64)
    log_avg = float(np.exp(np.mean(np.log(LOG_AVERAGE_DELTA + lum))))
    scaled = key * lum / log_avg
    if l_white is None:
        l_white = float(scaled.max())
    if l_white <= 0:   # all-black input: keep it black
        return LdrImage(hdr.width, hdr.height,
                        np.zeros_like(hdr.pixels, dtype=np.float32))
    display = scaled * (1.0 + scaled / (l_white * l_white)) / (1.0 + scaled)
    ratio = np.where(lum > 0, display / np.maximum(lum, 1e-30), 0.0)
    out = np.clip(hdr.pixels.astype(np.float64) * ratio[..., None], 0.0, 1.0)
    return LdrImage(hdr.width, hdr.height, out.astype(np.float32))


def normalize_hdr_target(hdr: HdrImage, peak_nits: float = 1000.0) -> HdrImage:
    """Scale by 1/peak_nits, clamp to [0,1], snap to the 10-bit grid."""
    if peak_nits <= 0:
        raise ValueError(f"peak_nits must be positive, got {peak_nits}")
    v = np.clip(hdr.pixels.astype(np.float64) / peak_nits, 0.0, 1.0)
    q = np.floor(v * TARGET_LEVELS + 0.5) / TARGET_LEVELS
    return HdrImage(hdr.width, hdr.height, q.astype(np.float32))


def resize(img, target_w: int, target_h: int):
    """Bilinear resize with half-pixel-centered sampling.

    Accepts an (h, w, c) array, HdrImage, or LdrImage; returns the same type.
    """
    if isinstance(img, (HdrImage, LdrImage)):
        out = resize(img.pixels, target_w, target_h)
        return type(img)(target_w, target_h, out)
    if target_w < 1 or target_h < 1:
        raise ValueError(f"target dims must be >= 1, got {target_w}x{target_h}")
    h, w = img.shape[:2]
    if (w, h) == (target_w, target_h):
        return img.copy()

    def axis_coords(n_src, n_dst):
        pos = (np.arange(n_dst, dtype=np.float64) + 0.5) * (n_src / n_dst) - 0.5
        lo = np.clip(np.floor(pos).astype(np.int64), 0, n_src - 1)
        hi = np.minimum(lo + 1, n_src - 1)
        t = np.clip(pos - lo, 0.0, 1.0)
        return lo, hi, t

    y0, y1, ty = axis_coords(h, target_h)
    x0, x1, tx = axis_coords(w, target_w)
    a = img[np.ix_(y0, x0)].astype(np.float64)
    b = img[np.ix_(y0, x1)].astype(np.float64)
    c = img[np.ix_(y1, x0)].astype(np.float64)
    d = img[np.ix_(y1, x1)].astype(np.float64)
    txg = tx[None, :, None] if img.ndim == 3 else tx[None, :]
    tyg = ty[:, None, None] if img.ndim == 3 else ty[:, None]
    top = a * (1 - txg) + b * txg
    bot = c * (1 - txg) + d * txg
    return (top * (1 - tyg) + bot * tyg).astype(img.dtype)


# --------------------------------------------------------------------------
# Pair records and sampling
# --------------------------------------------------------------------------

@dataclass
class PairRecord:
    id: str
    ldr: str            # path relative to the index root
    hdr: str
    tmo: str
    tmo_params: dict
    peak_nits: float

    def to_json(self) -> str:
        return json.dumps({"id": self.id, "ldr": self.ldr, "hdr": self.hdr,
                           "tmo": self.tmo, "tmo_params": self.tmo_params,
                           "peak_nits": self.peak_nits})


@dataclass
class DatasetIndex:
    root: Path
    records: list[PairRecord]
    split: str = "train"
    skipped: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.records)

    def load_pair(self, i: int):
        """(ldr, hdr) float32 (h, w, 3) arrays, cached after first decode."""
        if i not in self._cache:
            rec = self.records[i]
            ldr = read_pnm(self.root / rec.ldr).pixels
            hdr = read_pfm(self.root / rec.hdr).pixels
            if ldr.shape != hdr.shape:
                raise HdrIoError(f"pair {rec.id}: LDR {ldr.shape} and HDR {hdr.shape} "
                                 "dimensions differ")
            self._cache[i] = (ldr, hdr)
        return self._cache[i]


class ArrayPairs:
    """In-memory pair provider with the same sampling interface."""

    def __init__(self, pairs):
        self.pairs = [(np.asarray(l, np.float32), np.asarray(h, np.float32))
                      for l, h in pairs]

    def __len__(self):
        return len(self.pairs)

    def load_pair(self, i: int):
        return self.pairs[i]


def sample_batch(pairs, rng: np.random.Generator, batch_size: int,
                 patch_size: int):
    """Uniform-with-replacement image draw, then a uniform aligned patch.

    Returns (L, H, rng): float32 tensors of shape (batch, 3, patch, patch)
    and the advanced RNG state. Deterministic given the incoming state.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if patch_size % 32:
        raise ValueError(f"patch_size must be divisible by 32, got {patch_size}")
    ldrs, hdrs = [], []
    for _ in range(batch_size):
        idx = int(rng.integers(0, len(pairs)))
        ldr, hdr = pairs.load_pair(idx)
        h, w = ldr.shape[:2]
        if h < patch_size or w < patch_size:
            raise ValueError(f"pair {idx} is {h}x{w}, smaller than patch {patch_size}")
        y = int(rng.integers(0, h - patch_size + 1))
        x = int(rng.integers(0, w - patch_size + 1))
        ldrs.append(ldr[y:y + patch_size, x:x + patch_size].transpose(2, 0, 1))
        hdrs.append(hdr[y:y + patch_size, x:x + patch_size].transpose(2, 0, 1))
    return Tensor(np.stack(ldrs)), Tensor(np.stack(hdrs)), rng


# --------------------------------------------------------------------------
# Corpus synthesis
# --------------------------------------------------------------------------

@dataclass
class SynthConfig:
    resize_to: int = 128
    peak_nits: float = 1000.0
    tmo_key: float = 0.18
    ldr_depth: int = 8
    split: str = "train"


HDR_EXTENSIONS = (".hdr", ".pfm")


def write_index(index: DatasetIndex, path):
    with open(path, "w") as f:
        for rec in index.records:
            f.write(rec.to_json() + "\n")


def load_index(path, validate: bool = True) -> DatasetIndex:
    path = Path(path)
    records = []
    with open(path) as f:
        for line in f:
            if line.strip():
                records.append(PairRecord(**json.loads(line)))
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("dataset index holds duplicate pair ids")
    index = DatasetIndex(path.parent, records)
    if validate:
        for i in range(len(index)):
            index.load_pair(i)   # raises if files are missing or dims differ
    return index


def synth_pairs(hdr_dir, out_dir, config: SynthConfig | None = None) -> DatasetIndex:
    """Build (LDR, target) pairs from every decodable HDR file in hdr_dir.

    Undecodable files are skipped with a warning; an empty result is an error.
    Writes out_dir/ldr/*.pnm, out_dir/hdr/*.pfm and out_dir/index.jsonl.
    """
    config = config or SynthConfig()
    hdr_dir, out_dir = Path(hdr_dir), Path(out_dir)
    (out_dir / "ldr").mkdir(parents=True, exist_ok=True)
    (out_dir / "hdr").mkdir(parents=True, exist_ok=True)

    records: list[PairRecord] = []
    skipped = 0
    candidates = sorted(p for p in hdr_dir.iterdir()
                        if p.suffix.lower() in HDR_EXTENSIONS)
    for path in candidates:
        try:
            img = read_image(path)
            if isinstance(img, LdrImage):
                raise HdrIoError("not an HDR image")
        except HdrIoError as exc:
            logger.warning("skipping %s: %s", path.name, exc)
            skipped += 1
            continue
        img = resize(img, config.resize_to, config.resize_to)
        target = normalize_hdr_target(img, config.peak_nits)
        ldr = reinhard_tmo(img, key=config.tmo_key)
        stem = path.stem
        ldr_rel = f"ldr/{stem}.pnm"
        hdr_rel = f"hdr/{stem}.pfm"
        write_pnm(ldr, out_dir / ldr_rel, depth=config.ldr_depth)
        write_pfm(target, out_dir / hdr_rel)
        records.append(PairRecord(
            id=stem, ldr=ldr_rel, hdr=hdr_rel, tmo="reinhard",
            tmo_params={"key": config.tmo_key, "l_white": "auto"},
            peak_nits=config.peak_nits))

    if not records:
        raise ValueError(f"no usable HDR images in {hdr_dir} "
                         f"({skipped} skipped, {len(candidates)} candidates)")
    index = DatasetIndex(out_dir, records, split=config.split, skipped=skipped)
    write_index(index, out_dir / "index.jsonl")
    return index
