"""Dense matrices, row-block partitioning and the exact reference products.

Matrices are plain 2-D ``float64`` numpy arrays in C (row-major) order.
Everything here is pure; the coded pipelines are checked against
:func:`matmul_reference` and :func:`matvec_reference`.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgument

MAGIC = b"CDM1"
_HEADER = struct.Struct("<4sQQ")


def as_matrix(m, name="matrix") -> np.ndarray:
    """Return ``m`` as a C-contiguous float64 2-D array, validating its shape."""
    arr = np.ascontiguousarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidArgument(f"{name} must be 2-D, got ndim={arr.ndim}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidArgument(f"{name} must have rows >= 1 and cols >= 1, got {arr.shape}")
    return arr


def as_vector(x, name="vector") -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidArgument(f"{name} must be 1-D, got ndim={arr.ndim}")
    return arr


@dataclass(frozen=True)
class RowBlockPartition:
    """Geometry of splitting a matrix into equal row-blocks.

    ``pad_rows`` zero rows are appended at the bottom so that every block
    has ``block_rows`` rows.
    """

    rows: int
    cols: int
    block_rows: int
    num_blocks: int
    pad_rows: int

    def __post_init__(self):
        if self.num_blocks * self.block_rows != self.rows + self.pad_rows:
            raise InvalidArgument("num_blocks * block_rows must equal rows + pad_rows")
        if not 0 <= self.pad_rows < self.num_blocks * self.block_rows:
            raise InvalidArgument("pad_rows out of range")

    @property
    def padded_rows(self):
        return self.rows + self.pad_rows

    def block_slice(self, b):
        """Row slice of block ``b`` inside the padded matrix."""
        return slice(b * self.block_rows, (b + 1) * self.block_rows)

    def to_dict(self):
        return {
            "rows": self.rows,
            "cols": self.cols,
            "block_rows": self.block_rows,
            "num_blocks": self.num_blocks,
            "pad_rows": self.pad_rows,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: int(d[k]) for k in ("rows", "cols", "block_rows", "num_blocks", "pad_rows")})


def partition_rows(m, num_blocks: int) -> tuple[list[np.ndarray], RowBlockPartition]:
    """Split ``m`` into ``num_blocks`` row-blocks of equal height.

    The block height is ``ceil(rows / num_blocks)``; if that does not divide
    evenly the matrix is zero-padded at the bottom first.
    """
    m = as_matrix(m)
    if num_blocks < 1:
        raise InvalidArgument(f"num_blocks must be >= 1, got {num_blocks}")
    rows, cols = m.shape
    block_rows = math.ceil(rows / num_blocks)
    pad = num_blocks * block_rows - rows
    if pad:
        m = np.vstack([m, np.zeros((pad, cols))])
    part = RowBlockPartition(rows, cols, block_rows, num_blocks, pad)
    blocks = [m[part.block_slice(b)].copy() for b in range(num_blocks)]
    return blocks, part


def unpartition_rows(blocks, part: RowBlockPartition) -> np.ndarray:
    """Inverse of :func:`partition_rows`: stack the blocks and trim padding."""
    if len(blocks) != part.num_blocks:
        raise InvalidArgument(f"expected {part.num_blocks} blocks, got {len(blocks)}")
    return np.vstack(blocks)[: part.rows]


def block_product(a_i, b_j) -> np.ndarray:
    """``a_i @ b_j.T`` for two row-blocks sharing a column count."""
    a_i = as_matrix(a_i, "A block")
    b_j = as_matrix(b_j, "B block")
    if a_i.shape[1] != b_j.shape[1]:
        raise InvalidArgument(f"inner dimensions differ: {a_i.shape} vs {b_j.shape}")
    return a_i @ b_j.T


def matmul_reference(a, b) -> np.ndarray:
    """Exact ``C = A B^T`` computed in one piece, without any coding."""
    a = as_matrix(a, "A")
    b = as_matrix(b, "B")
    if a.shape[1] != b.shape[1]:
        raise InvalidArgument(f"A has {a.shape[1]} columns but B has {b.shape[1]}")
    return a @ b.T


def matvec_reference(a, x) -> np.ndarray:
    a = as_matrix(a, "A")
    x = as_vector(x, "x")
    if a.shape[1] != x.shape[0]:
        raise InvalidArgument(f"A has {a.shape[1]} columns but x has length {x.shape[0]}")
    return a @ x


def relative_error(got, want) -> float:
    """Frobenius-norm relative error; absolute when ``want`` is zero."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    if got.shape != want.shape:
        raise InvalidArgument(f"shape mismatch {got.shape} vs {want.shape}")
    denom = np.linalg.norm(want)
    diff = np.linalg.norm(got - want)
    return float(diff / denom) if denom > 0 else float(diff)


# -- serialization ---------------------------------------------------------


def matrix_to_bytes(m) -> bytes:
    m = as_matrix(m)
    rows, cols = m.shape
    return _HEADER.pack(MAGIC, rows, cols) + m.astype("<f8", copy=False).tobytes()


def matrix_from_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise InvalidArgument("blob too short for a CDM1 header")
    magic, rows, cols = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise InvalidArgument(f"bad magic {magic!r}, expected {MAGIC!r}")
    expected = _HEADER.size + 8 * rows * cols
    if len(blob) != expected:
        raise InvalidArgument(f"blob has {len(blob)} bytes, header implies {expected}")
    data = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size)
    return as_matrix(data.reshape(rows, cols).astype(np.float64))


def save_matrix(path, m):
    Path(path).write_bytes(matrix_to_bytes(m))


def load_matrix(path) -> np.ndarray:
    """Load a matrix from a CDM1 binary file or a whitespace-separated text file."""
    raw = Path(path).read_bytes()
    if raw[:4] == MAGIC:
        return matrix_from_bytes(raw)
    return load_text_matrix(path)


def load_text_matrix(path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            rows.append([float(tok) for tok in line.split()])
        except ValueError as exc:
            raise InvalidArgument(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise InvalidArgument(f"{path}: no data rows")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise InvalidArgument(f"{path}: ragged rows with widths {sorted(widths)}")
    return as_matrix(rows)
