"""Local product code for ``C = A B^T``.

Row-blocks of A (and of B) are grouped ``L_A`` (``L_B``) at a time and a
parity block, the plain sum of the group, is inserted right after each
group.  Multiplying the coded operands block by block gives a coded output
made of independent ``(L_A+1) x (L_B+1)`` subgrids.  Inside a subgrid the
last row is the sum of the others and so is the last column, which is all
a peeling decoder needs.

Coordinates inside a subgrid are ``(r, c)`` with ``r in 0..L_A`` and
``c in 0..L_B``; ``r == L_A`` / ``c == L_B`` are the parity row / column.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import InvalidArgument, NotDecodable
from .linalg import RowBlockPartition, as_matrix, block_product, partition_rows

Cell = tuple[int, int]


@dataclass(frozen=True)
class CodeParams:
    la: int
    lb: int
    ma: int
    mb: int

    def __post_init__(self):
        if self.la < 1 or self.lb < 1:
            raise InvalidArgument(f"L_A and L_B must be >= 1, got ({self.la}, {self.lb})")
        if self.ma < 1 or self.mb < 1:
            raise InvalidArgument("need at least one row-block per operand")
        if self.ma % self.la or self.mb % self.lb:
            raise InvalidArgument(
                f"block counts ({self.ma}, {self.mb}) must be multiples of ({self.la}, {self.lb})"
            )

    @classmethod
    def covering(cls, la, lb, min_blocks_a, min_blocks_b):
        """Smallest parameters whose block counts are at least the requested ones."""
        ma = -(-max(min_blocks_a, 1) // la) * la
        mb = -(-max(min_blocks_b, 1) // lb) * lb
        return cls(la, lb, ma, mb)

    @property
    def groups_a(self):
        return self.ma // self.la

    @property
    def groups_b(self):
        return self.mb // self.lb

    @property
    def coded_a(self):
        return self.ma + self.groups_a

    @property
    def coded_b(self):
        return self.mb + self.groups_b

    @property
    def subgrid_shape(self):
        return (self.la + 1, self.lb + 1)

    @property
    def n(self):
        """Blocks per subgrid, parities included."""
        return (self.la + 1) * (self.lb + 1)

    @property
    def k(self):
        return self.la * self.lb

    @property
    def locality(self):
        return min(self.la, self.lb)

    @property
    def max_reads_per_straggler(self):
        return max(self.la, self.lb)

    @property
    def redundancy(self):
        """Fraction of output blocks that are parity."""
        return 1.0 - self.k / self.n

    def to_dict(self):
        return {"la": self.la, "lb": self.lb, "ma": self.ma, "mb": self.mb}


# -- encoding --------------------------------------------------------------


class BlockKind(str, Enum):
    SYSTEMATIC = "systematic"
    PARITY = "parity"


@dataclass(frozen=True)
class BlockTag:
    kind: BlockKind
    group: int
    position: int  # index within the group; the parity sits at position L
    source: int | None  # original block index, systematic only


@dataclass(frozen=True)
class CodedLayout:
    group_size: int
    tags: tuple[BlockTag, ...]

    @classmethod
    def build(cls, num_blocks, group_size):
        if group_size < 1:
            raise InvalidArgument(f"group size must be >= 1, got {group_size}")
        if num_blocks < 1 or num_blocks % group_size:
            raise InvalidArgument(f"{num_blocks} blocks cannot be split into groups of {group_size}")
        tags = []
        for g in range(num_blocks // group_size):
            for pos in range(group_size):
                tags.append(BlockTag(BlockKind.SYSTEMATIC, g, pos, g * group_size + pos))
            tags.append(BlockTag(BlockKind.PARITY, g, group_size, None))
        return cls(group_size, tuple(tags))

    @property
    def num_groups(self):
        return len(self.tags) // (self.group_size + 1)

    def __len__(self):
        return len(self.tags)

    def group_members(self, g):
        """Original block indices summed into the parity of group ``g``."""
        return list(range(g * self.group_size, (g + 1) * self.group_size))

    def parity_indices(self):
        return [i for i, t in enumerate(self.tags) if t.kind is BlockKind.PARITY]

    def systematic_index(self, source):
        """Coded index holding original block ``source``."""
        g, pos = divmod(source, self.group_size)
        return g * (self.group_size + 1) + pos

    def coded_block(self, i, blocks):
        if not 0 <= i < len(self.tags):
            raise InvalidArgument(f"coded index {i} out of range 0..{len(self.tags) - 1}")
        tag = self.tags[i]
        if tag.kind is BlockKind.SYSTEMATIC:
            return blocks[tag.source]
        return sum_blocks([blocks[s] for s in self.group_members(tag.group)])


def sum_blocks(blocks):
    out = np.array(blocks[0], dtype=np.float64, copy=True)
    for b in blocks[1:]:
        out += b
    return out


def encode_row_blocks(blocks, group_size) -> tuple[CodedLayout, list[np.ndarray]]:
    """Insert the sum of every ``group_size`` consecutive blocks after them.

    ``[A1, A2, A3, A4]`` with ``group_size=2`` becomes
    ``[A1, A2, A1+A2, A3, A4, A3+A4]``.
    """
    blocks = [as_matrix(b, "block") for b in blocks]
    if not blocks:
        raise InvalidArgument("no blocks to encode")
    shapes = {b.shape for b in blocks}
    if len(shapes) != 1:
        raise InvalidArgument(f"blocks have differing shapes {sorted(shapes)}")
    layout = CodedLayout.build(len(blocks), group_size)
    coded = [layout.coded_block(i, blocks) for i in range(len(layout))]
    return layout, coded


def coded_cell_value(layout_a, layout_b, i, j, blocks_a, blocks_b) -> np.ndarray:
    """Block ``(i, j)`` of the coded product, computed from the original blocks."""
    return block_product(layout_a.coded_block(i, blocks_a), layout_b.coded_block(j, blocks_b))


# -- peeling ---------------------------------------------------------------


@dataclass(frozen=True)
class PeelStep:
    cell: Cell
    axis: str  # "row" or "col"
    fetched: tuple[Cell, ...]  # cells newly read from storage for this step


@dataclass(frozen=True)
class PeelPlan:
    steps: tuple[PeelStep, ...]
    remaining: frozenset  # cells peeling could not recover

    @property
    def blocks_read(self):
        return sum(len(s.fetched) for s in self.steps)

    @property
    def complete(self):
        return not self.remaining


def _check_cells(missing, la, lb):
    cells = set()
    for cell in missing:
        r, c = cell
        if not (0 <= r <= la and 0 <= c <= lb):
            raise InvalidArgument(f"cell {cell} outside the {la + 1}x{lb + 1} subgrid")
        cells.add((int(r), int(c)))
    return cells


def plan_peel(missing: Iterable[Cell], la: int, lb: int) -> PeelPlan:
    """Work out which cells a peeling decoder recovers, in what order, and what it reads.

    A missing cell that is alone in its subgrid row is recovered from the
    other ``lb`` cells of that row; alone in its column, from the other
    ``la`` cells of the column.  When both work the cheaper axis is used,
    rows on a tie.  Cells are scanned row-major, pass after pass, until a
    pass recovers nothing.  Blocks already fetched, or recovered, are held
    by the decoder and are not read again.
    """
    missing = _check_cells(missing, la, lb)
    row_count = [0] * (la + 1)
    col_count = [0] * (lb + 1)
    for r, c in missing:
        row_count[r] += 1
        col_count[c] += 1
    have = set()  # fetched or recovered
    steps = []
    progress = True
    while missing and progress:
        progress = False
        for cell in sorted(missing):
            r, c = cell
            by_row = row_count[r] == 1
            by_col = col_count[c] == 1
            if not (by_row or by_col):
                continue
            if by_row and (not by_col or lb <= la):
                axis, others = "row", [(r, j) for j in range(lb + 1) if j != c]
            else:
                axis, others = "col", [(i, c) for i in range(la + 1) if i != r]
            fetched = tuple(o for o in others if o not in have)
            have.update(fetched)
            have.add(cell)
            missing.discard(cell)
            row_count[r] -= 1
            col_count[c] -= 1
            steps.append(PeelStep(cell, axis, fetched))
            progress = True
    return PeelPlan(tuple(steps), frozenset(missing))


@lru_cache(maxsize=1 << 16)
def _plan_cached(missing: frozenset, la: int, lb: int) -> PeelPlan:
    return plan_peel(missing, la, lb)


def peel_stats(missing: frozenset, la: int, lb: int) -> tuple[int, bool]:
    """``(blocks_read, decodable)`` for a missing set; memoized for Monte Carlo use."""
    plan = _plan_cached(frozenset(missing), la, lb)
    return plan.blocks_read, plan.complete


def is_decodable(missing: Iterable[Cell], la: int, lb: int) -> bool:
    """True when peeling recovers every systematic cell of the subgrid."""
    plan = _plan_cached(frozenset(_check_cells(missing, la, lb)), la, lb)
    return not any(r < la and c < lb for r, c in plan.remaining)


@dataclass
class DecodeOutcome:
    recovered: dict  # cell -> block
    blocks_read: int
    read_cells: list
    undecodable: list  # systematic cells still missing
    steps: list = field(default_factory=list)

    @property
    def decoded(self):
        return not self.undecodable


@dataclass
class Subgrid:
    """One ``(la+1) x (lb+1)`` tile as seen by a decoding worker.

    ``fetch(cell)`` returns the payload of a present cell; it is called at
    most once per cell, which is how reads get charged to the worker.
    """

    la: int
    lb: int
    missing: frozenset
    fetch: Callable[[Cell], np.ndarray]

    @classmethod
    def from_blocks(cls, la, lb, blocks: Mapping[Cell, np.ndarray]):
        cells = {(r, c) for r in range(la + 1) for c in range(lb + 1)}
        missing = frozenset(cells - set(blocks))
        return cls(la, lb, missing, blocks.__getitem__)


def peel_decode_subgrid(sub: Subgrid) -> DecodeOutcome:
    plan = plan_peel(sub.missing, sub.la, sub.lb)
    known = {}
    read = []

    def value(cell):
        if cell not in known:
            known[cell] = np.asarray(sub.fetch(cell), dtype=np.float64)
            read.append(cell)
        return known[cell]

    recovered = {}
    for step in plan.steps:
        r, c = step.cell
        if step.axis == "row":
            parity, last = (r, sub.lb), c == sub.lb
            line = [(r, j) for j in range(sub.lb)]
        else:
            parity, last = (sub.la, c), r == sub.la
            line = [(i, c) for i in range(sub.la)]
        if last:
            block = sum_blocks([value(x) for x in line])
        else:
            block = np.array(value(parity), dtype=np.float64, copy=True)
            for x in line:
                if x != step.cell:
                    block -= value(x)
        known[step.cell] = block
        recovered[step.cell] = block
    assert len(read) == plan.blocks_read
    undecodable = sorted(x for x in plan.remaining if x[0] < sub.la and x[1] < sub.lb)
    return DecodeOutcome(recovered, len(read), read, undecodable, list(plan.steps))


# -- whole coded product ---------------------------------------------------


class CellState(str, Enum):
    PRESENT = "present"
    MISSING = "missing"
    RECOVERED = "recovered"


class CodedProductGrid:
    """State of every block of the coded output ``C_coded``.

    Cells use global coded indices ``(i, j)``; ``locate`` maps them to a
    subgrid ``(ga, gb)`` and local coordinates ``(r, c)``.
    """

    def __init__(self, params: CodeParams):
        self.params = params
        self.layout_a = CodedLayout.build(params.ma, params.la)
        self.layout_b = CodedLayout.build(params.mb, params.lb)
        self.states = {
            (i, j): CellState.MISSING for i in range(params.coded_a) for j in range(params.coded_b)
        }
        self.payloads: dict[Cell, np.ndarray] = {}
        self.store_keys: dict[Cell, str] = {}

    def _check(self, i, j):
        if (i, j) not in self.states:
            raise InvalidArgument(f"cell ({i}, {j}) outside the {self.params.coded_a}x{self.params.coded_b} grid")

    def locate(self, i, j):
        self._check(i, j)
        ga, r = divmod(i, self.params.la + 1)
        gb, c = divmod(j, self.params.lb + 1)
        return ga, gb, r, c

    def global_cell(self, ga, gb, r, c):
        return ga * (self.params.la + 1) + r, gb * (self.params.lb + 1) + c

    def is_systematic(self, i, j):
        _, _, r, c = self.locate(i, j)
        return r < self.params.la and c < self.params.lb

    def subgrids(self):
        return [(ga, gb) for ga in range(self.params.groups_a) for gb in range(self.params.groups_b)]

    def subgrid_cells(self, ga, gb):
        la, lb = self.params.la, self.params.lb
        return [self.global_cell(ga, gb, r, c) for r in range(la + 1) for c in range(lb + 1)]

    def set_present(self, i, j, block=None, key=None):
        self._check(i, j)
        self.states[(i, j)] = CellState.PRESENT
        if block is not None:
            self.payloads[(i, j)] = np.asarray(block, dtype=np.float64)
        if key is not None:
            self.store_keys[(i, j)] = key

    def set_missing(self, i, j):
        self._check(i, j)
        self.states[(i, j)] = CellState.MISSING
        self.payloads.pop((i, j), None)

    def missing_local(self, ga, gb):
        out = set()
        for i, j in self.subgrid_cells(ga, gb):
            if self.states[(i, j)] is CellState.MISSING:
                out.add(self.locate(i, j)[2:])
        return frozenset(out)

    def decode_subgrid(self, ga, gb, fetch=None) -> DecodeOutcome:
        """Peel one subgrid, storing recovered blocks back into the grid."""
        if fetch is None:
            def fetch(local):
                return self.payloads[self.global_cell(ga, gb, *local)]
        else:
            user_fetch = fetch

            def fetch(local):
                return user_fetch(self.global_cell(ga, gb, *local))

        sub = Subgrid(self.params.la, self.params.lb, self.missing_local(ga, gb), fetch)
        outcome = peel_decode_subgrid(sub)
        for local, block in outcome.recovered.items():
            cell = self.global_cell(ga, gb, *local)
            self.states[cell] = CellState.RECOVERED
            self.payloads[cell] = block
        return outcome

    def decode_all(self):
        return {sg: self.decode_subgrid(*sg) for sg in self.subgrids()}

    def missing_systematic(self):
        return sorted(
            cell for cell, st in self.states.items()
            if st is CellState.MISSING and self.is_systematic(*cell)
        )

    def to_manifest(self, partitions=None) -> dict:
        cells = []
        for (i, j), st in sorted(self.states.items()):
            entry = {"i": i, "j": j, "state": st.value, "store_key": self.store_keys.get((i, j))}
            cells.append(entry)
        doc = {"schema": 1, "params": self.params.to_dict(), "cells": cells}
        if partitions is not None:
            doc["partitions"] = {k: p.to_dict() for k, p in partitions.items()}
        return doc

    @classmethod
    def from_manifest(cls, doc) -> "CodedProductGrid":
        grid = cls(CodeParams(**{k: int(v) for k, v in doc["params"].items()}))
        for entry in doc["cells"]:
            cell = (int(entry["i"]), int(entry["j"]))
            grid._check(*cell)
            grid.states[cell] = CellState(entry["state"])
            if entry.get("store_key") is not None:
                grid.store_keys[cell] = entry["store_key"]
        return grid

    def dumps(self, partitions=None):
        return json.dumps(self.to_manifest(partitions), indent=2, sort_keys=True)


def encode_product(a, b, params: CodeParams):
    """Encode both operands and compute every coded block directly.

    Returns ``(grid, part_a, part_b)`` with all cells present; callers knock
    cells out with ``grid.set_missing`` to emulate stragglers.
    """
    blocks_a, part_a = partition_rows(a, params.ma)
    blocks_b, part_b = partition_rows(b, params.mb)
    grid = CodedProductGrid(params)
    _, coded_a = encode_row_blocks(blocks_a, params.la)
    _, coded_b = encode_row_blocks(blocks_b, params.lb)
    for i, ai in enumerate(coded_a):
        for j, bj in enumerate(coded_b):
            grid.set_present(i, j, block_product(ai, bj))
    return grid, part_a, part_b


def assemble_result(grid: CodedProductGrid, part_a: RowBlockPartition, part_b: RowBlockPartition) -> np.ndarray:
    """Stitch the systematic blocks into ``C`` and trim the padding."""
    lost = grid.missing_systematic()
    if lost:
        raise NotDecodable(f"{len(lost)} systematic cells were never recovered: {lost}", lost)
    p = grid.params
    if part_a.num_blocks != p.ma or part_b.num_blocks != p.mb:
        raise InvalidArgument("partitions do not match the code parameters")
    out = np.empty((part_a.padded_rows, part_b.padded_rows))
    for sa in range(p.ma):
        i = grid.layout_a.systematic_index(sa)
        rows = part_a.block_slice(sa)
        for sb in range(p.mb):
            j = grid.layout_b.systematic_index(sb)
            out[rows, part_b.block_slice(sb)] = grid.payloads[(i, j)]
    return out[: part_a.rows, : part_b.rows]
