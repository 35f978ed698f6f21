"""Image codecs: Radiance RGBE (.hdr), PFM, and binary PPM (8/16-bit).

Rows are top-down everywhere inside this package; format-specific flips
(PFM is bottom-up on disk) happen at the codec boundary. Decoders raise
HdrIoError on any malformed input, never anything else.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

# DoS guard for fuzzed/corrupt headers; generous next to the 512x512 corpus.
MAX_PIXELS = 100_000_000


class HdrIoError(ValueError):
    """Malformed or unsupported image data."""


@dataclass
class HdrImage:
    """Linear-light RGB, float32, components finite and >= 0."""
    width: int
    height: int
    pixels: np.ndarray   # (height, width, 3) float32

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.shape != (self.height, self.width, 3):
            raise HdrIoError(f"pixel array shape {self.pixels.shape} does not match "
                             f"{self.height}x{self.width}x3")
        if not np.isfinite(self.pixels).all() or np.any(self.pixels < 0):
            raise HdrIoError("HDR pixels must be finite and nonnegative")


@dataclass
class LdrImage:
    """Display-referred RGB in [0, 1], float32."""
    width: int
    height: int
    pixels: np.ndarray   # (height, width, 3) float32

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.shape != (self.height, self.width, 3):
            raise HdrIoError(f"pixel array shape {self.pixels.shape} does not match "
                             f"{self.height}x{self.width}x3")
        if not np.isfinite(self.pixels).all() or np.any(self.pixels < 0) \
                or np.any(self.pixels > 1):
            raise HdrIoError("LDR pixels must lie in [0, 1]")


def _as_stream(src, mode: str) -> tuple[BinaryIO, bool]:
    if isinstance(src, (str, Path)):
        return open(src, mode), True
    return src, False


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    raw = f.read(n)
    if len(raw) != n:
        raise HdrIoError(f"truncated {what}: wanted {n} bytes, got {len(raw)}")
    return raw


def _read_line(f: BinaryIO, what: str, limit: int = 256) -> bytes:
    out = bytearray()
    while len(out) < limit:
        ch = f.read(1)
        if not ch:
            raise HdrIoError(f"unexpected end of file in {what}")
        if ch == b"\n":
            return bytes(out)
        out += ch
    raise HdrIoError(f"{what} line too long")


def _check_dims(w: int, h: int, fmt: str):
    if w < 1 or h < 1 or w * h > MAX_PIXELS:
        raise HdrIoError(f"{fmt}: implausible dimensions {w}x{h}")


# --------------------------------------------------------------------------
# Radiance RGBE
# --------------------------------------------------------------------------

def rgbe_encode_pixel(r: float, g: float, b: float) -> tuple[int, int, int, int]:
    """Shared-exponent encoding; mantissas are rounded, not truncated, which
    keeps the roundtrip error within 1/256 of the max component."""
    m = max(r, g, b)
    if not (math.isfinite(r) and math.isfinite(g) and math.isfinite(b)) \
            or min(r, g, b) < 0:
        raise HdrIoError("RGBE components must be finite and nonnegative")
    if m < 1e-38:
        return (0, 0, 0, 0)
    mant, exp = math.frexp(m)          # m = mant * 2^exp, mant in [0.5, 1)
    if exp + 128 > 255:
        raise HdrIoError(f"component {m} too large for RGBE")
    scale = mant * 256.0 / m
    return (min(255, int(r * scale + 0.5)),
            min(255, int(g * scale + 0.5)),
            min(255, int(b * scale + 0.5)),
            exp + 128)


def rgbe_decode_pixel(quad) -> tuple[float, float, float]:
    rb, gb, bb, e = (int(v) for v in quad)
    if e == 0:
        return (0.0, 0.0, 0.0)
    f = math.ldexp(1.0, e - 136)       # 2^(e - 128 - 8)
    return (rb * f, gb * f, bb * f)


def _rgbe_to_float(rgbe: np.ndarray) -> np.ndarray:
    """Vectorized decode of an (..., 4) uint8 array to (..., 3) float32."""
    e = rgbe[..., 3].astype(np.int32)
    scale = np.where(e == 0, 0.0, np.ldexp(1.0, e - 136)).astype(np.float32)
    return rgbe[..., :3].astype(np.float32) * scale[..., None]


def _float_to_rgbe(pix: np.ndarray) -> np.ndarray:
    m = pix.max(axis=-1)
    out = np.zeros(pix.shape[:-1] + (4,), dtype=np.uint8)
    live = m >= 1e-38
    if np.any(live):
        mant, exp = np.frexp(m[live])
        if np.any(exp + 128 > 255):
            raise HdrIoError("components too large for RGBE")
        scale = mant * 256.0 / m[live]
        mantissas = np.minimum(255, (pix[live] * scale[:, None] + 0.5).astype(np.int32))
        out[live, :3] = mantissas.astype(np.uint8)
        out[live, 3] = (exp + 128).astype(np.uint8)
    return out


def _read_rgbe_header(f: BinaryIO) -> tuple[int, int]:
    magic = _read_line(f, "RGBE header")
    if not (magic.startswith(b"#?RADIANCE") or magic.startswith(b"#?RGBE")):
        raise HdrIoError("not an RGBE file (bad magic)")
    while True:
        line = _read_line(f, "RGBE header")
        if line == b"":
            break
        # FORMAT and comment lines; only 32-bit_rle_rgbe data is meaningful
        if line.startswith(b"FORMAT=") and b"32-bit_rle_rgbe" not in line:
            raise HdrIoError(f"unsupported RGBE format: {line!r}")
    res = _read_line(f, "RGBE resolution").split()
    if len(res) != 4 or res[0] != b"-Y" or res[2] != b"+X":
        raise HdrIoError(f"unsupported RGBE orientation {b' '.join(res)!r} "
                         "(only '-Y H +X W')")
    try:
        h, w = int(res[1]), int(res[3])
    except ValueError as exc:
        raise HdrIoError(f"bad RGBE resolution line: {exc}") from exc
    _check_dims(w, h, "RGBE")
    return w, h


def _read_rle_component(f: BinaryIO, width: int) -> bytes:
    out = bytearray()
    while len(out) < width:
        code = _read_exact(f, 1, "RGBE RLE scanline")[0]
        if code > 128:
            run = code - 128
            out += _read_exact(f, 1, "RGBE RLE scanline") * run
        elif code > 0:
            out += _read_exact(f, code, "RGBE RLE scanline")
        else:
            raise HdrIoError("zero-length RGBE RLE packet")
    if len(out) != width:
        raise HdrIoError("RGBE RLE scanline overruns its width")
    return bytes(out)


def read_rgbe(src) -> HdrImage:
    f, own = _as_stream(src, "rb")
    try:
        w, h = _read_rgbe_header(f)
        rows = np.empty((h, w, 4), dtype=np.uint8)
        for y in range(h):
            if 8 <= w < 32768:
                head = _read_exact(f, 4, "RGBE scanline")
                if head[0] == 2 and head[1] == 2 and (head[2] << 8 | head[3]) == w:
                    comps = [_read_rle_component(f, w) for _ in range(4)]
                    rows[y] = np.stack([np.frombuffer(c, np.uint8) for c in comps],
                                       axis=-1)
                    continue
                rest = _read_exact(f, 4 * (w - 1), "RGBE scanline")
                rows[y] = np.frombuffer(head + rest, np.uint8).reshape(w, 4)
            else:
                rows[y] = np.frombuffer(_read_exact(f, 4 * w, "RGBE scanline"),
                                        np.uint8).reshape(w, 4)
        return HdrImage(w, h, _rgbe_to_float(rows))
    finally:
        if own:
            f.close()


def write_rgbe(img: HdrImage, dst):
    """Flat (uncompressed) scanlines; RLE is read-side only."""
    f, own = _as_stream(dst, "wb")
    try:
        f.write(b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n")
        f.write(f"-Y {img.height} +X {img.width}\n".encode())
        f.write(_float_to_rgbe(img.pixels).tobytes())
    finally:
        if own:
            f.close()


# --------------------------------------------------------------------------
# PFM (color only)
# --------------------------------------------------------------------------

def _read_pfm_token(f: BinaryIO) -> bytes:
    tok = bytearray()
    while True:
        ch = f.read(1)
        if not ch:
            raise HdrIoError("unexpected end of file in PFM header")
        if ch in b" \t\r\n":
            if tok:
                return bytes(tok)
            continue
        tok += ch
        if len(tok) > 32:
            raise HdrIoError("PFM header token too long")


def read_pfm(src) -> HdrImage:
    f, own = _as_stream(src, "rb")
    try:
        tag = _read_pfm_token(f)
        if tag == b"Pf":
            raise HdrIoError("grayscale PFM ('Pf') is unsupported; expected color 'PF'")
        if tag != b"PF":
            raise HdrIoError("not a PFM file (bad magic)")
        try:
            w = int(_read_pfm_token(f))
            h = int(_read_pfm_token(f))
            scl = float(_read_pfm_token(f))
        except ValueError as exc:
            raise HdrIoError(f"bad PFM header: {exc}") from exc
        _check_dims(w, h, "PFM")
        if scl == 0:
            raise HdrIoError("PFM scale must be nonzero")
        dtype = "<f4" if scl < 0 else ">f4"
        raw = _read_exact(f, w * h * 12, "PFM pixel data")
        pix = np.frombuffer(raw, dtype=dtype).reshape(h, w, 3).astype(np.float32)
        pix = pix[::-1]   # PFM stores rows bottom-up
        if not np.isfinite(pix).all() or np.any(pix < 0):
            raise HdrIoError("PFM holds non-finite or negative components")
        return HdrImage(w, h, pix)
    finally:
        if own:
            f.close()


def write_pfm(img: HdrImage, dst):
    f, own = _as_stream(dst, "wb")
    try:
        f.write(f"PF\n{img.width} {img.height}\n-1.0\n".encode())
        f.write(np.ascontiguousarray(img.pixels[::-1], dtype="<f4").tobytes())
    finally:
        if own:
            f.close()


# --------------------------------------------------------------------------
# Binary PPM (P6)
# --------------------------------------------------------------------------

def _read_pnm_token(f: BinaryIO) -> bytes:
    tok = bytearray()
    in_comment = False
    while True:
        ch = f.read(1)
        if not ch:
            raise HdrIoError("unexpected end of file in PNM header")
        if in_comment:
            in_comment = ch != b"\n"
            continue
        if ch == b"#" and not tok:
            in_comment = True
            continue
        if ch in b" \t\r\n":
            if tok:
                return bytes(tok)
            continue
        tok += ch
        if len(tok) > 32:
            raise HdrIoError("PNM header token too long")


def read_pnm(src) -> LdrImage:
    f, own = _as_stream(src, "rb")
    try:
        magic = _read_exact(f, 2, "PNM magic")
        if magic == b"P3":
            raise HdrIoError("ASCII PPM ('P3') is unsupported; expected binary 'P6'")
        if magic != b"P6":
            raise HdrIoError("not a binary PPM file (bad magic)")
        try:
            w = int(_read_pnm_token(f))
            h = int(_read_pnm_token(f))
            maxval = int(_read_pnm_token(f))
        except ValueError as exc:
            raise HdrIoError(f"bad PNM header: {exc}") from exc
        _check_dims(w, h, "PNM")
        if maxval not in (255, 65535):
            raise HdrIoError(f"unsupported PNM maxval {maxval} (need 255 or 65535)")
        if maxval == 255:
            raw = _read_exact(f, w * h * 3, "PNM pixel data")
            codes = np.frombuffer(raw, dtype=np.uint8)
        else:
            raw = _read_exact(f, w * h * 6, "PNM pixel data")
            codes = np.frombuffer(raw, dtype=">u2")
        pix = (codes.reshape(h, w, 3).astype(np.float32) / maxval)
        return LdrImage(w, h, pix)
    finally:
        if own:
            f.close()


def write_pnm(img: LdrImage, dst, depth: int = 8):
    """Quantizes with round-half-away-from-zero; write(read(...)) at the
    matching depth reproduces the file bit for bit."""
    if depth not in (8, 16):
        raise HdrIoError(f"PNM depth must be 8 or 16, got {depth}")
    maxval = 255 if depth == 8 else 65535
    codes = np.floor(img.pixels.astype(np.float64) * maxval + 0.5)
    codes = np.clip(codes, 0, maxval)
    f, own = _as_stream(dst, "wb")
    try:
        f.write(f"P6\n{img.width} {img.height}\n{maxval}\n".encode())
        if depth == 8:
            f.write(codes.astype(np.uint8).tobytes())
        else:
            f.write(codes.astype(">u2").tobytes())
    finally:
        if own:
            f.close()


# --------------------------------------------------------------------------
# Extension dispatch
# --------------------------------------------------------------------------

def read_image(path) -> Union[HdrImage, LdrImage]:
    path = Path(path)
    ext = path.suffix.lower()
    if ext == ".hdr":
        return read_rgbe(path)
    if ext == ".pfm":
        return read_pfm(path)
    if ext in (".pnm", ".ppm"):
        return read_pnm(path)
    raise HdrIoError(f"unsupported image extension {ext!r} for {path.name}")
