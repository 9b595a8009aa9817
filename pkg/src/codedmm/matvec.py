"""Coded ``y = A x`` with one parity row-block per group of ``L`` row-blocks.

The parity worker returns the sum of its group's result segments, so a
single missing segment per group is recovered by one subtraction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .code import BlockKind, CodedLayout, encode_row_blocks
from .errors import InvalidArgument, NotDecodable
from .linalg import RowBlockPartition, as_matrix, as_vector, partition_rows


@dataclass(frozen=True)
class CodedMatvecPlan:
    layout: CodedLayout
    partition: RowBlockPartition

    @property
    def group_size(self):
        return self.layout.group_size

    @property
    def num_coded(self):
        return len(self.layout)

    def group_cells(self, g):
        """Coded block indices of group ``g``, parity last."""
        base = g * (self.group_size + 1)
        return list(range(base, base + self.group_size + 1))


def encode_matvec(a, num_blocks, group_size):
    a = as_matrix(a, "A")
    blocks, part = partition_rows(a, num_blocks)
    layout, coded = encode_row_blocks(blocks, group_size)
    return CodedMatvecPlan(layout, part), coded


def decode_matvec(segments, plan: CodedMatvecPlan) -> np.ndarray:
    """Rebuild ``y`` from per-coded-block results; ``None`` marks a straggler."""
    if len(segments) != plan.num_coded:
        raise InvalidArgument(f"expected {plan.num_coded} segments, got {len(segments)}")
    out = []
    for g in range(plan.layout.num_groups):
        cells = plan.group_cells(g)
        lost = [i for i in cells if segments[i] is None]
        if len(lost) > 1:
            raise NotDecodable(f"group {g} lost {len(lost)} segments {lost}", [(g, i) for i in lost])
        parity = cells[-1]
        for i in cells[:-1]:
            seg = segments[i]
            if seg is None:
                seg = as_vector(segments[parity], "parity segment").copy()
                for other in cells[:-1]:
                    if other != i:
                        seg -= segments[other]
            out.append(as_vector(seg, "segment"))
    y = np.concatenate(out)
    return y[: plan.partition.rows]


def redundant_workers(plan: CodedMatvecPlan) -> int:
    return sum(t.kind is BlockKind.PARITY for t in plan.layout.tags)
