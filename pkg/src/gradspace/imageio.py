"""Binary PGM (P5) and PPM (P6) images with 8-bit samples."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from gradspace.errors import ImageFormatError

_MAGIC = {b"P5": 1, b"P6": 3}


def _token(data: bytes, pos: int) -> tuple[bytes, int]:
    """Next whitespace-delimited header token, skipping '#' comments."""
    n = len(data)
    while pos < n:
        ch = data[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageFormatError(f"unexpected end of header at byte {start}")
    return data[start:pos], pos


def _int_field(data, pos, name):
    tok, end = _token(data, pos)
    if not tok.isdigit():
        raise ImageFormatError(f"invalid {name} {tok!r} at byte {end - len(tok)}")
    value = int(tok)
    if value <= 0:
        raise ImageFormatError(f"{name} must be positive at byte {end - len(tok)}")
    return value, end


def decode_pnm(data: bytes) -> np.ndarray:
    magic = data[:2]
    if magic not in _MAGIC:
        raise ImageFormatError(f"bad magic number {magic!r} at byte 0; expected P5 or P6")
    channels = _MAGIC[magic]
    pos = 2
    width, pos = _int_field(data, pos, "width")
    height, pos = _int_field(data, pos, "height")
    maxval, pos = _int_field(data, pos, "maxval")
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval} before byte {pos}; only 255 is supported")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ImageFormatError(f"missing whitespace after header at byte {pos}")
    pos += 1
    expected = width * height * channels
    payload = data[pos:]
    if len(payload) < expected:
        raise ImageFormatError(
            f"truncated payload at byte {pos}: expected {expected} bytes, found {len(payload)}")
    pixels = np.frombuffer(payload[:expected], dtype=np.uint8)
    return pixels.reshape(height, width, channels).astype(np.float64) / 255.0


def encode_pnm(image: np.ndarray) -> bytes:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    h, w, c = image.shape
    if c not in (1, 3):
        raise ImageFormatError(f"can only write 1 or 3 channels, got {c}")
    magic = b"P5" if c == 1 else b"P6"
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return magic + f"\n{w} {h}\n255\n".encode() + pixels.tobytes()


def load_image(path) -> np.ndarray:
    """Read a P5/P6 file as an ``H x W x C`` float array in [0, 1]."""
    return decode_pnm(Path(path).read_bytes())


def save_image(path, image: np.ndarray) -> None:
    atomic_write_bytes(path, encode_pnm(image))


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
