"""Binary PGM (P5) reading and writing.

CT slices are stored as 16-bit PGM with maxval 65535 and big-endian sample
order; the stored value is HU + 1024 clamped to [0, 65535]. Lung masks are
8-bit PGM with maxval 255 using 0/255 encoding. Comment lines (``#``) are
written directly after the magic and may carry artifact headers.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError

HU_OFFSET = 1024


def hu_to_stored(hu: np.ndarray) -> np.ndarray:
    """Map HU intensities to the on-disk 16-bit representation."""
    return np.clip(np.asarray(hu, dtype=np.int64) + HU_OFFSET, 0, 65535).astype(np.uint16)


def stored_to_hu(stored: np.ndarray) -> np.ndarray:
    """Map on-disk 16-bit values back to HU."""
    return np.asarray(stored, dtype=np.int32) - HU_OFFSET


def write_pgm(path: str | Path, image: np.ndarray, maxval: int = 65535,
              comments: tuple[str, ...] = ()) -> None:
    """Write a 2D array as binary PGM.

    16-bit samples (maxval > 255) are written big-endian per the PGM
    convention. Comments must not contain newlines.
    """
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"expected 2D image, got shape {image.shape}")
    if not 0 < maxval < 65536:
        raise ValueError(f"maxval out of range: {maxval}")
    if image.min() < 0 or image.max() > maxval:
        raise ValueError("image values outside [0, maxval]")
    h, w = image.shape
    header = [b"P5"]
    for c in comments:
        if "\n" in c:
            raise ValueError("PGM comment must be a single line")
        header.append(b"# " + c.encode("ascii"))
    header.append(f"{w} {h}".encode("ascii"))
    header.append(str(maxval).encode("ascii"))
    if maxval > 255:
        payload = image.astype(">u2").tobytes()
    else:
        payload = image.astype(np.uint8).tobytes()
    Path(path).write_bytes(b"\n".join(header) + b"\n" + payload)


def read_pgm(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a binary PGM file, returning (image, maxval).

    16-bit images come back as uint16, 8-bit as uint8. Comment lines are
    skipped wherever they appear in the header.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"PGM file not found: {path}")
    data = path.read_bytes()
    pos = 0
    tokens: list[bytes] = []
    while len(tokens) < 4:
        if pos >= len(data):
            raise DataError(f"truncated PGM header: {path}")
        ch = data[pos:pos + 1]
        if ch in b" \t\r\n":
            pos += 1
        elif ch == b"#":
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise DataError(f"truncated PGM comment: {path}")
            pos = nl + 1
        else:
            end = pos
            while end < len(data) and data[end:end + 1] not in b" \t\r\n":
                end += 1
            tokens.append(data[pos:end])
            pos = end
    if tokens[0] != b"P5":
        raise DataError(f"not a binary PGM (P5): {path}")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise DataError(f"bad PGM header in {path}: {exc}") from exc
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise DataError(f"bad PGM dimensions/maxval in {path}")
    pos += 1  # single whitespace byte after maxval
    itemsize = 2 if maxval > 255 else 1
    expected = w * h * itemsize
    raw = data[pos:pos + expected]
    if len(raw) != expected:
        raise DataError(f"PGM payload truncated in {path}: "
                        f"expected {expected} bytes, got {len(raw)}")
    dtype = ">u2" if itemsize == 2 else np.uint8
    image = np.frombuffer(raw, dtype=dtype).reshape(h, w)
    return image.astype(np.uint16 if itemsize == 2 else np.uint8), maxval


def write_hu_slice(path: str | Path, hu: np.ndarray, comments: tuple[str, ...] = ()) -> None:
    """Write an HU raster as the on-disk 16-bit PGM representation."""
    write_pgm(path, hu_to_stored(hu), maxval=65535, comments=comments)


def read_hu_slice(path: str | Path) -> np.ndarray:
    """Read a 16-bit PGM slice back into HU."""
    image, maxval = read_pgm(path)
    if maxval != 65535:
        raise DataError(f"expected 16-bit CT slice (maxval 65535), got {maxval}: {path}")
    return stored_to_hu(image)


def write_mask(path: str | Path, mask: np.ndarray, comments: tuple[str, ...] = ()) -> None:
    """Write a boolean mask as 8-bit PGM with 0/255 encoding."""
    mask = np.asarray(mask, dtype=bool)
    write_pgm(path, mask.astype(np.uint8) * 255, maxval=255, comments=comments)


def read_mask(path: str | Path) -> np.ndarray:
    """Read an 8-bit 0/255 mask PGM back into a boolean raster."""
    image, maxval = read_pgm(path)
    if maxval != 255:
        raise DataError(f"expected 8-bit mask (maxval 255), got {maxval}: {path}")
    return image >= 128
