"""Grayscale image decoding and the pre-processing chain.

decode -> histogram equalize -> bilinear resize -> center crop -> tensor.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import DecodeError, DimensionError, UnsupportedFormatError

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_CHANNELS = {0: 1, 2: 3, 4: 2, 6: 4}   # PNG color type -> samples per pixel


@dataclass(frozen=True, eq=False)
class GrayImage:
    """8-bit luminance image; ``pixels`` is a (height, width) uint8 array."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim != 2:
            raise DimensionError(f"gray image must be 2-D, got shape {p.shape}")
        if p.dtype != np.uint8:
            if np.any(p < 0) or np.any(p > 255):
                raise ValueError("pixel values must lie in [0, 255]")
            p = p.astype(np.uint8)
        object.__setattr__(self, "pixels", np.ascontiguousarray(p))

    @classmethod
    def from_list(cls, values, width, height):
        return cls(np.asarray(values, dtype=np.uint8).reshape(height, width))

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def height(self):
        return self.pixels.shape[0]

    def __eq__(self, other):
        return isinstance(other, GrayImage) and np.array_equal(self.pixels, other.pixels)

    def tolist(self):
        return self.pixels.ravel().tolist()


# ------------------------------------------------------------------ PNG codec

def _unfilter(raw, height, stride, bpp, base):
    """Undo per-scanline PNG filters. ``base`` is the stream offset for error reports."""
    expected = height * (stride + 1)
    if len(raw) < expected:
        raise DecodeError(f"image data holds {len(raw)} bytes, need {expected}", base)
    out = np.zeros((height, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.int32)
    for y in range(height):
        ftype = raw[y * (stride + 1)]
        line = np.frombuffer(raw, np.uint8, stride, y * (stride + 1) + 1).astype(np.int32)
        if ftype == 0:
            cur = line
        elif ftype == 1:
            cur = line.copy()
            for k in range(bpp):
                cur[k::bpp] = np.cumsum(cur[k::bpp]) & 0xFF
        elif ftype == 2:
            cur = (line + prev) & 0xFF
        elif ftype in (3, 4):
            cur = _unfilter_sequential(line.tolist(), prev.tolist(), bpp, ftype)
        else:
            raise DecodeError(f"unknown filter type {ftype} on row {y}", base)
        out[y] = cur
        prev = np.asarray(cur, dtype=np.int32)
    return out


def _unfilter_sequential(line, prev, bpp, ftype):
    cur = line
    for i in range(len(cur)):
        a = cur[i - bpp] if i >= bpp else 0
        b = prev[i]
        if ftype == 3:
            cur[i] = (cur[i] + ((a + b) >> 1)) & 0xFF
        else:
            c = prev[i - bpp] if i >= bpp else 0
            p = a + b - c
            pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
            pred = a if pa <= pb and pa <= pc else (b if pb <= pc else c)
            cur[i] = (cur[i] + pred) & 0xFF
    return np.asarray(cur, dtype=np.int32)


def luminance(rgb):
    """ITU-R 601 luma with 0.299/0.587/0.114 weights, rounded half up, in integer arithmetic."""
    rgb = rgb.astype(np.int64)
    return ((299 * rgb[..., 0] + 587 * rgb[..., 1] + 114 * rgb[..., 2] + 500) // 1000).astype(np.uint8)


def decode_image(data: bytes) -> GrayImage:
    """Decode an 8-bit PNG (gray, gray+alpha, RGB or RGBA) to luminance.

    Chunk CRCs are verified. Alpha is ignored. Palette images, bit depths
    other than 8 and interlaced files raise :class:`UnsupportedFormatError`.
    """
    data = bytes(data)
    if data[:8] != PNG_SIGNATURE:
        bad = next((i for i in range(min(8, len(data))) if data[i] != PNG_SIGNATURE[i]), len(data))
        raise DecodeError("not a PNG signature", bad)
    pos = 8
    ihdr = None
    idat = []
    idat_offset = None
    seen_end = False
    while pos < len(data):
        if pos + 8 > len(data):
            raise DecodeError("truncated chunk header", pos)
        length, ctype = struct.unpack(">I4s", data[pos:pos + 8])
        body_start, body_end = pos + 8, pos + 8 + length
        if body_end + 4 > len(data):
            raise DecodeError(f"chunk {ctype!r} runs past end of file", pos)
        body = data[body_start:body_end]
        crc = struct.unpack(">I", data[body_end:body_end + 4])[0]
        if zlib.crc32(ctype + body) & 0xFFFFFFFF != crc:
            raise DecodeError(f"CRC mismatch in chunk {ctype!r}", body_end)
        if ctype == b"IHDR":
            if length != 13:
                raise DecodeError("IHDR must be 13 bytes", pos)
            ihdr = struct.unpack(">IIBBBBB", body)
        elif ctype == b"IDAT":
            if ihdr is None:
                raise DecodeError("IDAT before IHDR", pos)
            if idat_offset is None:
                idat_offset = body_start
            idat.append(body)
        elif ctype == b"IEND":
            seen_end = True
            break
        elif ihdr is None:
            raise DecodeError(f"first chunk must be IHDR, got {ctype!r}", pos)
        pos = body_end + 4
    if ihdr is None:
        raise DecodeError("missing IHDR chunk", 8)
    if not seen_end:
        raise DecodeError("missing IEND chunk (file truncated?)", len(data))
    if not idat:
        raise DecodeError("no IDAT chunks", pos)
    width, height, depth, ctype_, comp, filt, interlace = ihdr
    if width == 0 or height == 0:
        raise DecodeError("zero image extent in IHDR", 16)
    if depth != 8:
        raise UnsupportedFormatError(f"bit depth {depth} is not supported (8-bit only)")
    if ctype_ not in _CHANNELS:
        raise UnsupportedFormatError(f"PNG color type {ctype_} is not supported")
    if comp != 0 or filt != 0:
        raise DecodeError("unknown compression or filter method", 8 + 8 + 10)
    if interlace != 0:
        raise UnsupportedFormatError("interlaced PNGs are not supported")
    try:
        raw = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise DecodeError(f"corrupt image data stream: {exc}", idat_offset) from None
    ch = _CHANNELS[ctype_]
    rows = _unfilter(raw, height, width * ch, ch, idat_offset)
    px = rows.reshape(height, width, ch)
    if ch in (1, 2):
        return GrayImage(px[..., 0].copy())
    return GrayImage(luminance(px[..., :3]))


def _chunk(ctype, body):
    return struct.pack(">I", len(body)) + ctype + body + struct.pack(">I", zlib.crc32(ctype + body) & 0xFFFFFFFF)


def encode_png(pixels) -> bytes:
    """Encode a (H, W) gray or (H, W, 3) RGB uint8 array as a PNG (filter 0, zlib level 9)."""
    px = np.ascontiguousarray(pixels, dtype=np.uint8)
    if px.ndim == 2:
        ctype, h, w = 0, *px.shape
    elif px.ndim == 3 and px.shape[2] == 3:
        ctype, h, w = 2, px.shape[0], px.shape[1]
    else:
        raise DimensionError(f"cannot encode array of shape {px.shape}")
    rows = px.reshape(h, -1)
    raw = np.concatenate([np.zeros((h, 1), np.uint8), rows], axis=1).tobytes()
    ihdr = struct.pack(">IIBBBBB", w, h, 8, ctype, 0, 0, 0)
    return PNG_SIGNATURE + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", zlib.compress(raw, 9)) + _chunk(b"IEND", b"")


def read_image(path) -> GrayImage:
    with open(path, "rb") as fh:
        return decode_image(fh.read())


# ----------------------------------------------------------- pre-processing

def equalization_lut(img: GrayImage):
    """Level mapping ``round_half_up((cdf(v) - cdf_min) / (N - cdf_min) * 255)``.

    Identity for a constant image. Integer arithmetic keeps halves exact.
    """
    hist = np.bincount(img.pixels.ravel(), minlength=256).astype(np.int64)
    cdf = np.cumsum(hist)
    n = int(cdf[-1])
    cdf_min = int(cdf[np.nonzero(hist)[0][0]])
    denom = n - cdf_min
    if denom == 0:
        return np.arange(256, dtype=np.uint8)
    num = np.maximum(cdf - cdf_min, 0) * 255
    return ((2 * num + denom) // (2 * denom)).astype(np.uint8)


def histogram_equalize(img: GrayImage) -> GrayImage:
    return GrayImage(equalization_lut(img)[img.pixels])


def _bilinear_axis(n_in, n_out):
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_array(a, out_h, out_w):
    """Bilinear resize of a float 2-D array with half-pixel centers (align_corners=False)."""
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"target extent must be >= 1, got {out_w}x{out_h}")
    a = np.asarray(a, dtype=np.float64)
    y0, y1, fy = _bilinear_axis(a.shape[0], out_h)
    x0, x1, fx = _bilinear_axis(a.shape[1], out_w)
    top = a[y0][:, x0] * (1 - fx) + a[y0][:, x1] * fx
    bot = a[y1][:, x0] * (1 - fx) + a[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def resize_bilinear(img: GrayImage, out_w, out_h) -> GrayImage:
    if (out_w, out_h) == (img.width, img.height):
        return GrayImage(img.pixels.copy())
    vals = resize_array(img.pixels, out_h, out_w)
    return GrayImage(np.clip(np.floor(vals + 0.5), 0, 255).astype(np.uint8))


def center_crop(img: GrayImage, out_w, out_h) -> GrayImage:
    """Centered window; with an odd margin the extra pixel is dropped on the right/bottom."""
    if out_w < 1 or out_h < 1:
        raise DimensionError(f"crop extent must be >= 1, got {out_w}x{out_h}")
    if out_w > img.width or out_h > img.height:
        raise DimensionError(f"cannot crop {img.width}x{img.height} to {out_w}x{out_h}")
    top = (img.height - out_h) // 2
    left = (img.width - out_w) // 2
    return GrayImage(img.pixels[top:top + out_h, left:left + out_w].copy())


def to_tensor(img: GrayImage):
    """(1, 1, H, W) float32 array scaled to [0, 1]."""
    return (img.pixels.astype(np.float32) / np.float32(255))[None, None]


def preprocess(data: bytes, size=256, crop=None, equalize=True):
    """Full chain for one encoded image; returns a (1, 1, S, S) tensor."""
    img = decode_image(data)
    if equalize:
        img = histogram_equalize(img)
    img = resize_bilinear(img, size, size)
    if crop is not None and crop != size:
        img = center_crop(img, crop, crop)
    return to_tensor(img)


def chi_square_to_uniform(img: GrayImage):
    """Chi-square distance of the 256-bin histogram to a flat histogram of the same mass."""
    hist = np.bincount(img.pixels.ravel(), minlength=256).astype(np.float64)
    expected = hist.sum() / 256
    return float(((hist - expected) ** 2 / expected).sum())
