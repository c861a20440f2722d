"""File formats, intensity normalization and rescaling.

The tensor container is a deliberately tiny binary layout so round trips
are bit-exact and testable without third-party readers:

    magic "OCET" | version u8 = 1 | dtype u8 | ndim u8 | dims u32le * ndim
    | payload, row-major little-endian

dtype codes: 0 = float32, 1 = int32, 2 = uint8.

Checkpoints and other multi-tensor files use the archive layout, which is
a counted sequence of named tensor blocks:

    magic "OCEA" | version u8 = 1 | count u32le
    | (name_len u16le | name utf-8 | tensor block) * count

Dataset directories follow the convention ``images/*.ocet`` with optional
``labels/*.ocet`` under matching stems.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import DegenerateError, FormatError, ShapeError

TENSOR_MAGIC = b"OCET"
ARCHIVE_MAGIC = b"OCEA"
FORMAT_VERSION = 1

_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<i4"), 2: np.dtype("u1")}
_DTYPE_TO_CODE = {
    np.dtype(np.float32): 0,
    np.dtype(np.int32): 1,
    np.dtype(np.uint8): 2,
}


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _DTYPE_TO_CODE:
        raise FormatError(f"unsupported dtype {arr.dtype} (use float32, int32 or uint8)")
    if arr.ndim > 255:
        raise FormatError("too many dimensions")
    head = TENSOR_MAGIC + struct.pack(
        "<BBB", FORMAT_VERSION, _DTYPE_TO_CODE[arr.dtype], arr.ndim
    )
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    payload = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
    return head + dims + payload


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor block starting at offset; returns (array, next offset)."""
    if len(buf) - offset < 7:
        raise FormatError("truncated header")
    if buf[offset:offset + 4] != TENSOR_MAGIC:
        raise FormatError(f"bad magic {buf[offset:offset + 4]!r}, expected {TENSOR_MAGIC!r}")
    version, code, ndim = struct.unpack_from("<BBB", buf, offset + 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version (expected {FORMAT_VERSION}, found {version})")
    if code not in _CODE_TO_DTYPE:
        raise FormatError(f"unknown dtype code {code}")
    pos = offset + 7
    if len(buf) - pos < 4 * ndim:
        raise FormatError("truncated dimension list")
    dims = struct.unpack_from(f"<{ndim}I", buf, pos) if ndim else ()
    pos += 4 * ndim
    dtype = _CODE_TO_DTYPE[code]
    count = 1
    for d in dims:
        count *= d
    nbytes = count * dtype.itemsize
    if len(buf) - pos < nbytes:
        raise FormatError(
            f"truncated payload (expected {nbytes} bytes, found {len(buf) - pos})"
        )
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(dims)
    return arr.astype(dtype.newbyteorder("=")), pos + nbytes


def tensor_write(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(arr))


def tensor_read(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise FormatError(f"trailing data ({len(buf) - end} extra bytes)")
    return arr


def archive_write(path, tensors: dict[str, np.ndarray]) -> None:
    parts = [ARCHIVE_MAGIC, struct.pack("<BI", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(tensor_to_bytes(arr))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def archive_read(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 9:
        raise FormatError("truncated archive header")
    if buf[:4] != ARCHIVE_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {ARCHIVE_MAGIC!r}")
    version, count = struct.unpack_from("<BI", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version (expected {FORMAT_VERSION}, found {version})")
    pos = 9
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        if len(buf) - pos < 2:
            raise FormatError("truncated entry name")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if len(buf) - pos < nlen:
            raise FormatError("truncated entry name")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        arr, pos = tensor_from_bytes(buf, pos)
        out[name] = arr
    if pos != len(buf):
        raise FormatError(f"trailing data ({len(buf) - pos} extra bytes)")
    return out


# ---------------------------------------------------------------------------
# PGM (binary P5)

def pgm_read(path) -> np.ndarray:
    """Read a binary P5 image; returns float32 (H, W) scaled to [0, 1]."""
    with open(path, "rb") as fh:
        buf = fh.read()

    def tokens():
        pos = 0
        while pos < len(buf):
            c = buf[pos:pos + 1]
            if c == b"#":
                while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif c.isspace():
                pos += 1
            else:
                start = pos
                while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
                    pos += 1
                yield buf[start:pos].decode("ascii"), pos
        raise FormatError("malformed header")

    gen = tokens()
    magic, _ = next(gen)
    if magic != "P5":
        raise FormatError(f"unsupported format {magic!r} (binary P5 required)")
    try:
        width, _ = next(gen)
        height, _ = next(gen)
        maxval, end = next(gen)
        width, height, maxval = int(width), int(height), int(maxval)
    except (StopIteration, ValueError) as exc:
        raise FormatError("malformed header") from exc
    if not 0 < maxval < 65536:
        raise FormatError(f"maxval {maxval} out of range")
    data = buf[end + 1:]  # single whitespace byte after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    if len(data) < need:
        raise FormatError(f"truncated payload (expected {need} bytes, found {len(data)})")
    img = np.frombuffer(data, dtype=dtype, count=width * height).reshape(height, width)
    return (img.astype(np.float32) / maxval).astype(np.float32)


def pgm_write(path, image: np.ndarray, maxval: int = 255) -> None:
    """Write (H, W) data as binary P5; floats are quantized against maxval."""
    if image.ndim != 2:
        raise ShapeError("pgm_write expects (H, W)")
    if not 0 < maxval < 65536:
        raise FormatError(f"maxval {maxval} out of range")
    if image.dtype in (np.uint8, np.uint16):
        quant = image
        if quant.max(initial=0) > maxval:
            raise FormatError("integer image exceeds maxval")
    else:
        quant = np.rint(np.clip(image, 0.0, 1.0) * maxval)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n{maxval}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(quant.astype(dtype).tobytes())


def labels_to_gray(labels: np.ndarray) -> tuple[np.ndarray, int]:
    """Map instance ids to distinct gray levels; returns (image, maxval)."""
    ids = np.unique(labels)
    ids = ids[ids > 0]
    n = len(ids)
    maxval = 255 if n <= 255 else 65535
    lut = np.zeros(int(labels.max()) + 1 if labels.size else 1, dtype=np.uint16)
    for rank, ident in enumerate(ids, start=1):
        lut[ident] = (rank * maxval) // n
    gray = lut[labels]
    return gray.astype(np.uint8 if maxval == 255 else np.uint16), maxval


# ---------------------------------------------------------------------------
# Normalization and rescaling

def normalize_percentile(image: np.ndarray, low: float = 1.0, high: float = 99.8) -> np.ndarray:
    """Affinely map the low percentile to 0 and the high percentile to 1, per channel.

    No clipping is applied; percentiles use linear interpolation of the
    sorted sample.  A constant channel is an error.
    """
    img = np.asarray(image, dtype=np.float32)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    out = np.empty_like(img)
    for c in range(img.shape[0]):
        lo = np.percentile(img[c], low)
        hi = np.percentile(img[c], high)
        if hi <= lo:
            raise DegenerateError(f"channel {c} has no spread between percentiles")
        out[c] = (img[c] - lo) / (hi - lo)
    return out[0] if squeeze else out


def _bilinear_axis_coords(n_out: int, n_in: int, factor: float) -> np.ndarray:
    src = (np.arange(n_out, dtype=np.float64) + 0.5) / factor - 0.5
    return np.clip(src, 0.0, n_in - 1)


def rescale_image(image: np.ndarray, factor: float) -> np.ndarray:
    """Bilinear resampling of (H, W) or (C, H, W) intensity data."""
    if factor <= 0:
        raise ShapeError("factor must be positive")
    img = np.asarray(image, dtype=np.float32)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    _, H, W = img.shape
    Ho, Wo = int(round(H * factor)), int(round(W * factor))
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"output {Ho}x{Wo} smaller than one pixel")
    if factor == 1.0:
        out = img.copy()
        return out[0] if squeeze else out
    ys = _bilinear_axis_coords(Ho, H, factor)
    xs = _bilinear_axis_coords(Wo, W, factor)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (ys - y0).astype(np.float32)
    wx = (xs - x0).astype(np.float32)
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    out = top * (1 - wy)[None, :, None] + bot * wy[None, :, None]
    out = out.astype(np.float32)
    return out[0] if squeeze else out


def rescale_labels(labels: np.ndarray, factor: float, out_shape=None) -> np.ndarray:
    """Nearest-neighbour resampling of an integer label mask.

    ``out_shape`` overrides the rounded output size, e.g. to map a mask
    produced at some working scale back onto the exact original grid.
    """
    if factor <= 0:
        raise ShapeError("factor must be positive")
    lab = np.asarray(labels)
    H, W = lab.shape
    if out_shape is None:
        Ho, Wo = int(round(H * factor)), int(round(W * factor))
    else:
        Ho, Wo = out_shape
        factor = Ho / H
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"output {Ho}x{Wo} smaller than one pixel")
    if factor == 1.0 and (Ho, Wo) == (H, W):
        return lab.copy()
    ys = np.clip(np.rint((np.arange(Ho) + 0.5) * H / Ho - 0.5), 0, H - 1).astype(np.int64)
    xs = np.clip(np.rint((np.arange(Wo) + 0.5) * W / Wo - 0.5), 0, W - 1).astype(np.int64)
    return lab[ys][:, xs].copy()


# ---------------------------------------------------------------------------
# Dataset directory convention

def save_dataset(root, images, labels=None, stems=None) -> None:
    """Write images (and optional labels) as ``images/<stem>.ocet`` etc."""
    root = os.fspath(root)
    img_dir = os.path.join(root, "images")
    os.makedirs(img_dir, exist_ok=True)
    if stems is None:
        stems = [f"im{i:04d}" for i in range(len(images))]
    if labels is not None:
        lab_dir = os.path.join(root, "labels")
        os.makedirs(lab_dir, exist_ok=True)
    for i, stem in enumerate(stems):
        tensor_write(os.path.join(img_dir, stem + ".ocet"), np.asarray(images[i], np.float32))
        if labels is not None:
            tensor_write(
                os.path.join(lab_dir, stem + ".ocet"),
                np.asarray(labels[i], np.int32),
            )


def load_dataset(root):
    """Read a dataset directory; returns (stems, images, labels-or-None)."""
    root = os.fspath(root)
    img_dir = os.path.join(root, "images")
    if not os.path.isdir(img_dir):
        raise FormatError(f"no images/ directory under {root}")
    stems = sorted(
        os.path.splitext(f)[0] for f in os.listdir(img_dir) if f.endswith(".ocet")
    )
    if not stems:
        raise FormatError(f"no .ocet files under {img_dir}")
    images = [tensor_read(os.path.join(img_dir, s + ".ocet")) for s in stems]
    lab_dir = os.path.join(root, "labels")
    labels = None
    if os.path.isdir(lab_dir):
        labels = [tensor_read(os.path.join(lab_dir, s + ".ocet")) for s in stems]
    return stems, images, labels


def write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
