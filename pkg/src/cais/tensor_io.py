"""Dense float32 tensors on disk: the CVT1 container and grayscale PFM.

CVT1 layout (all little-endian)::

    b"CVT1" | uint32 ndim | uint32 extent * ndim | float32 data (row-major)
"""
import struct

import numpy as np

from .validation import ShapeError

MAGIC = b"CVT1"


class TensorFormatError(ValueError):
    """Raised when a file does not hold a well-formed tensor."""


def as_tensor(a):
    """Return ``a`` as a C-contiguous float32 array with all-finite values."""
    t = np.ascontiguousarray(a, dtype=np.float32)
    if t.ndim == 0:
        t = t.reshape(1)
    if not np.all(np.isfinite(t)):
        raise ValueError("tensor contains non-finite values")
    return t


def write_tensor(path, t):
    t = as_tensor(t)
    header = MAGIC + struct.pack("<I", t.ndim) + struct.pack("<%dI" % t.ndim, *t.shape)
    with open(path, "wb") as f:
        f.write(header)
        f.write(t.astype("<f4", copy=False).tobytes())


def read_tensor(path):
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 8:
        raise TensorFormatError("truncated header at byte offset %d" % len(buf))
    if buf[:4] != MAGIC:
        raise TensorFormatError("bad magic %r at byte offset 0" % buf[:4])
    (ndim,) = struct.unpack_from("<I", buf, 4)
    offset = 8
    if len(buf) < offset + 4 * ndim:
        raise TensorFormatError("truncated shape at byte offset %d" % len(buf))
    shape = struct.unpack_from("<%dI" % ndim, buf, offset)
    offset += 4 * ndim
    if any(n < 1 for n in shape):
        raise TensorFormatError("zero extent in shape at byte offset 8")
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) != offset + 4 * count:
        raise TensorFormatError(
            "payload size mismatch at byte offset %d: expected %d bytes, found %d"
            % (offset, 4 * count, len(buf) - offset))
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=offset)
    return data.astype(np.float32).reshape(shape)


def write_pfm(path, m):
    m = np.asarray(m, dtype=np.float32)
    if m.ndim != 2:
        raise ValueError("PFM maps must be 2D, got shape %s" % (m.shape,))
    height, width = m.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n%d %d\n-1.0\n" % (width, height))
        # PFM stores scanlines bottom-to-top
        f.write(np.ascontiguousarray(m[::-1]).astype("<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header == b"PF":
            raise TensorFormatError("color PFM ('PF') is not supported")
        if header != b"Pf":
            raise TensorFormatError("bad PFM header %r at byte offset 0" % header)
        dims = f.readline().split()
        if len(dims) != 2:
            raise TensorFormatError("malformed PFM dimension line")
        width, height = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        endian = "<" if scale < 0 else ">"
        start = f.tell()
        data = f.read()
    if len(data) != 4 * width * height:
        raise TensorFormatError("truncated PFM payload at byte offset %d" % (start + len(data)))
    m = np.frombuffer(data, dtype=endian + "f4").astype(np.float32).reshape(height, width)
    return np.ascontiguousarray(m[::-1])


def avg_pool2(f):
    """2x2 mean pooling over the last two axes (works for (H, W) and (C, H, W))."""
    f = np.asarray(f)
    if not np.issubdtype(f.dtype, np.floating):
        f = f.astype(np.float32)
    h, w = f.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError("avg_pool2 needs even extents, got %dx%d" % (h, w))
    blocks = f.reshape(f.shape[:-2] + (h // 2, 2, w // 2, 2))
    return (blocks[..., 0, :, 0] + blocks[..., 0, :, 1]
            + blocks[..., 1, :, 0] + blocks[..., 1, :, 1]) * f.dtype.type(0.25)
