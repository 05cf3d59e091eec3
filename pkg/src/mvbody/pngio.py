"""Minimal grayscale PNG I/O (8-bit and 16-bit, color type 0).

Only the subset this pipeline needs: projection exports are 16-bit grayscale,
attribution maps are 8-bit grayscale. Written files use filter type 0 on every
row and a fixed zlib level so identical arrays produce byte-identical files
(the CLI's hash-stable output contract). The reader additionally understands
filter types 1-4 so externally produced grayscale PNGs load too.
"""

import struct
import zlib

import numpy as np

from .errors import ParseError

_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _chunk(tag: bytes, payload: bytes) -> bytes:
    return (
        struct.pack(">I", len(payload))
        + tag
        + payload
        + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF)
    )


def write_png(path, image: np.ndarray) -> None:
    """Write a 2D uint8 or uint16 array as a grayscale PNG."""
    if image.ndim != 2:
        raise ValueError(f"expected 2D grayscale array, got shape {image.shape}")
    if image.dtype == np.uint8:
        depth, payload = 8, image
    elif image.dtype == np.uint16:
        depth, payload = 16, image.astype(">u2")  # PNG samples are big-endian
    else:
        raise ValueError(f"unsupported dtype {image.dtype}; use uint8 or uint16")
    h, w = image.shape
    ihdr = struct.pack(">IIBBBBB", w, h, depth, 0, 0, 0, 0)
    rows = payload.tobytes()
    stride = w * (depth // 8)
    raw = b"".join(b"\x00" + rows[r * stride : (r + 1) * stride] for r in range(h))
    data = _SIGNATURE + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", zlib.compress(raw, 9)) + _chunk(b"IEND", b"")
    with open(path, "wb") as fh:
        fh.write(data)


def _unfilter(raw: bytes, h: int, w: int, bpp: int) -> bytearray:
    stride = w * bpp
    out = bytearray(h * stride)
    prev = bytearray(stride)
    pos = 0
    for r in range(h):
        ftype = raw[pos]
        pos += 1
        line = bytearray(raw[pos : pos + stride])
        pos += stride
        if ftype == 1:  # Sub
            for i in range(bpp, stride):
                line[i] = (line[i] + line[i - bpp]) & 0xFF
        elif ftype == 2:  # Up
            for i in range(stride):
                line[i] = (line[i] + prev[i]) & 0xFF
        elif ftype == 3:  # Average
            for i in range(stride):
                a = line[i - bpp] if i >= bpp else 0
                line[i] = (line[i] + ((a + prev[i]) >> 1)) & 0xFF
        elif ftype == 4:  # Paeth
            for i in range(stride):
                a = line[i - bpp] if i >= bpp else 0
                b = prev[i]
                c = prev[i - bpp] if i >= bpp else 0
                p = a + b - c
                pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                pred = a if (pa <= pb and pa <= pc) else (b if pb <= pc else c)
                line[i] = (line[i] + pred) & 0xFF
        elif ftype != 0:
            raise ParseError(f"unsupported PNG filter type {ftype}")
        out[r * stride : (r + 1) * stride] = line
        prev = line
    return out


def read_png(path) -> np.ndarray:
    """Read a grayscale PNG into a uint8 or uint16 array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _SIGNATURE:
        raise ParseError(f"{path}: not a PNG file")
    pos = 8
    ihdr = None
    idat = b""
    while pos < len(blob):
        (length,) = struct.unpack(">I", blob[pos : pos + 4])
        tag = blob[pos + 4 : pos + 8]
        payload = blob[pos + 8 : pos + 8 + length]
        pos += 12 + length
        if tag == b"IHDR":
            ihdr = struct.unpack(">IIBBBBB", payload)
        elif tag == b"IDAT":
            idat += payload
        elif tag == b"IEND":
            break
    if ihdr is None:
        raise ParseError(f"{path}: missing IHDR")
    w, h, depth, color, _comp, _filt, interlace = ihdr
    if color != 0 or depth not in (8, 16) or interlace != 0:
        raise ParseError(
            f"{path}: only non-interlaced 8/16-bit grayscale supported "
            f"(depth={depth}, color={color}, interlace={interlace})"
        )
    bpp = depth // 8
    raw = zlib.decompress(idat)
    expected = h * (w * bpp + 1)
    if len(raw) != expected:
        raise ParseError(f"{path}: IDAT size mismatch ({len(raw)} != {expected})")
    flat = bytes(_unfilter(raw, h, w, bpp))
    if depth == 8:
        return np.frombuffer(flat, dtype=np.uint8).reshape(h, w).copy()
    return np.frombuffer(flat, dtype=">u2").astype(np.uint16).reshape(h, w)
