"""Deterministic simulation of coded and speculative execution on a serverless platform.

Every stage (encode, compute, decode) is a set of tasks that read from and
write to an :class:`ObjectStore`.  Task durations come from a
:class:`StragglerModel`; the numbers in the store are real, so the matrix
that comes out is checked against the exact product.

Times are simulated seconds.  Nothing sleeps and nothing touches a network.
"""

from __future__ import annotations

import csv
import hashlib
import heapq
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .code import (
    CellState,
    CodedLayout,
    CodedProductGrid,
    CodeParams,
    assemble_result,
    is_decodable,
    sum_blocks,
)
from .errors import InvalidArgument, MissingKey, NotDecodable
from .linalg import (
    as_matrix,
    as_vector,
    block_product,
    matrix_from_bytes,
    matrix_to_bytes,
    partition_rows,
)
from .matvec import CodedMatvecPlan, decode_matvec

# stream ids for per-stage random draws
_ENCODE, _COMPUTE, _RECOMPUTE, _DECODE, _RELAUNCH, _ENC_RELAUNCH, _DEC_RELAUNCH = range(7)


@dataclass
class StragglerModel:
    p: float = 0.02
    base_time: float = 135.0
    jitter: float = 0.1
    straggler_factor: float = 3.0

    def __post_init__(self):
        if not 0 <= self.p <= 1:
            raise InvalidArgument(f"p must lie in [0, 1], got {self.p}")
        if not self.base_time > 0:
            raise InvalidArgument("base_time must be positive")
        if not 0 <= self.jitter < 1:
            raise InvalidArgument(f"jitter must lie in [0, 1), got {self.jitter}")
        if not self.straggler_factor > 1:
            raise InvalidArgument("straggler_factor must exceed 1")


def sample_task_time(model: StragglerModel, work_units, rng, straggle=None):
    """Duration of one task and whether it straggled.

    Two uniforms are always drawn, in the same order, so the straggle branch
    of every task is fixed by the seed regardless of the other parameters.
    ``straggle`` overrides the random branch.
    """
    if not work_units > 0:
        raise InvalidArgument(f"work_units must be positive, got {work_units}")
    u_straggle, u_jitter = rng.random(2)
    straggled = bool(u_straggle < model.p) if straggle is None else bool(straggle)
    t = model.base_time * work_units * (1.0 - model.jitter + 2.0 * model.jitter * u_jitter)
    if straggled:
        t *= model.straggler_factor
    return t, straggled


# -- object store ----------------------------------------------------------


@dataclass
class IOLedger:
    seconds: float = 0.0
    reads: int = 0
    writes: int = 0
    bytes_read: int = 0
    bytes_written: int = 0


class ObjectStore:
    """In-memory key/blob store with a linear latency model.

    Every operation costs ``alpha + beta * len(blob)`` seconds, charged to
    an optional ``account`` so callers can add it to a task's duration.
    """

    def __init__(self, alpha=0.05, beta=1e-8):
        if alpha < 0 or beta < 0:
            raise InvalidArgument("store latency coefficients must be non-negative")
        self.alpha = alpha
        self.beta = beta
        self._blobs = {}
        self.ledgers: dict[str, IOLedger] = {}
        self.total = IOLedger()

    def cost(self, nbytes):
        return self.alpha + self.beta * nbytes

    def _charge(self, account, nbytes, write):
        secs = self.cost(nbytes)
        for led in (self.total, self.ledgers.setdefault(account, IOLedger()) if account else None):
            if led is None:
                continue
            led.seconds += secs
            if write:
                led.writes += 1
                led.bytes_written += nbytes
            else:
                led.reads += 1
                led.bytes_read += nbytes
        return secs

    def write(self, key, blob, account=None):
        """Store ``blob``; returns the seconds charged."""
        blob = bytes(blob)
        self._put(key, blob)
        return self._charge(account, len(blob), write=True)

    def read(self, key, account=None):
        blob = self._get(key)
        self._charge(account, len(blob), write=False)
        return blob

    def __contains__(self, key):
        return key in self._blobs

    def _put(self, key, blob):
        self._blobs[key] = blob

    def _get(self, key):
        try:
            return self._blobs[key]
        except KeyError:
            raise MissingKey(key) from None

    def ledger(self, account):
        return self.ledgers.get(account, IOLedger())

    def write_matrix(self, key, m, account=None):
        return self.write(key, matrix_to_bytes(m), account)

    def read_matrix(self, key, account=None):
        return matrix_from_bytes(self.read(key, account))


class DirectoryStore(ObjectStore):
    """Object store whose blobs live as files under a directory."""

    def __init__(self, root, alpha=0.05, beta=1e-8):
        super().__init__(alpha, beta)
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, key):
        return self.root / (key.replace("/", "__") + ".blob")

    def _put(self, key, blob):
        self._path(key).write_bytes(blob)

    def _get(self, key):
        path = self._path(key)
        if not path.exists():
            raise MissingKey(key)
        return path.read_bytes()

    def __contains__(self, key):
        return self._path(key).exists()


# -- configuration ---------------------------------------------------------


@dataclass
class StoreLatency:
    alpha: float = 0.05
    beta: float = 1e-8


@dataclass
class WaitPolicy:
    strategy: str = "coded"
    # speculative: relaunch unfinished tasks once this fraction completed
    q: float = 0.79
    # coded: None waits for every non-straggling compute task; a float uses
    # that empirical quantile of compute arrival times
    deadline_quantile: float | None = None
    # "deadline": decode once past the deadline (or when the subgrid is whole);
    # "eager": decode as soon as the missing set is decodable
    decode_trigger: str = "deadline"
    # speculative restarts inside the coded encode and decode stages
    stage_q: float = 0.9
    recompute: bool = True

    def __post_init__(self):
        if self.strategy not in ("coded", "speculative"):
            raise InvalidArgument(f"unknown strategy {self.strategy!r}")
        for name in ("q", "stage_q"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise InvalidArgument(f"policy.{name} must lie in (0, 1], got {v}")
        if self.deadline_quantile is not None and not 0 < self.deadline_quantile <= 1:
            raise InvalidArgument("policy.deadline_quantile must lie in (0, 1]")
        if self.decode_trigger not in ("deadline", "eager"):
            raise InvalidArgument(f"unknown decode trigger {self.decode_trigger!r}")


@dataclass
class Workers:
    """Concurrent worker caps per stage; ``None`` gives every task its own worker."""

    encode: int | None = None
    compute: int | None = None
    decode: int | None = None


@dataclass
class WorkCosts:
    """Work units per task, relative to one block product (= 1.0)."""

    compute: float = 1.0
    encode_per_block: float = 0.01
    decode_per_block: float = 0.01


@dataclass
class SimConfig:
    model: StragglerModel = field(default_factory=StragglerModel)
    store: StoreLatency = field(default_factory=StoreLatency)
    policy: WaitPolicy = field(default_factory=WaitPolicy)
    workers: Workers = field(default_factory=Workers)
    costs: WorkCosts = field(default_factory=WorkCosts)
    seed: int = 0
    # task ids that straggle; when set, every other task does not
    forced_stragglers: list | None = None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidArgument(f"unknown config keys: {sorted(unknown)}")
        sections = {
            "model": StragglerModel, "store": StoreLatency, "policy": WaitPolicy,
            "workers": Workers, "costs": WorkCosts,
        }
        kwargs = {}
        for name, typ in sections.items():
            sub = d.get(name) or {}
            bad = set(sub) - {f.name for f in fields(typ)}
            if bad:
                raise InvalidArgument(f"unknown keys in {name}: {sorted(bad)}")
            kwargs[name] = typ(**sub)
        if "seed" in d:
            kwargs["seed"] = int(d["seed"])
        if d.get("forced_stragglers") is not None:
            kwargs["forced_stragglers"] = list(d["forced_stragglers"])
        return cls(**kwargs)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **changes):
        d = self.to_dict()
        for dotted, value in changes.items():
            target = d
            *head, last = dotted.split("__")
            for h in head:
                target = target[h]
            target[last] = value
        return SimConfig.from_dict(d)


# -- reports ---------------------------------------------------------------


CSV_COLUMNS = (
    "strategy", "t_enc", "t_comp", "t_dec", "t_total", "t_overlapped",
    "stragglers", "recomputed", "encode_tasks", "compute_tasks", "decode_tasks",
    "max_reads", "total_reads", "bytes_read", "bytes_written",
)


@dataclass
class RunReport:
    strategy: str
    t_enc: float = 0.0
    t_comp: float = 0.0
    t_dec: float = 0.0
    t_total: float = 0.0
    t_overlapped: float = 0.0
    decoder_reads: list = field(default_factory=list)  # [{"unit": [...], "reads": R}]
    straggler_ids: list = field(default_factory=list)
    recomputed: int = 0
    encode_tasks: int = 0
    encode_tasks_a: int = 0
    encode_tasks_b: int = 0
    compute_tasks: int = 0
    decode_tasks: int = 0
    bytes_read: int = 0
    bytes_written: int = 0
    decode_bytes_read: int = 0
    block_bytes: int = 0

    @property
    def reads(self):
        return [d["reads"] for d in self.decoder_reads]

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    def csv_row(self):
        reads = self.reads
        return {
            "strategy": self.strategy,
            "t_enc": self.t_enc,
            "t_comp": self.t_comp,
            "t_dec": self.t_dec,
            "t_total": self.t_total,
            "t_overlapped": self.t_overlapped,
            "stragglers": len(self.straggler_ids),
            "recomputed": self.recomputed,
            "encode_tasks": self.encode_tasks,
            "compute_tasks": self.compute_tasks,
            "decode_tasks": self.decode_tasks,
            "max_reads": max(reads, default=0),
            "total_reads": sum(reads),
            "bytes_read": self.bytes_read,
            "bytes_written": self.bytes_written,
        }

    def to_csv(self, header=True):
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        if header:
            w.writeheader()
        w.writerow(self.csv_row())
        return buf.getvalue()


# -- helpers ---------------------------------------------------------------


def _threads():
    try:
        return max(1, int(os.environ.get("CODEDMM_THREADS", "1")))
    except ValueError:
        return 1


def _pmap(fn, items):
    items = list(items)
    n = _threads()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _finish_times(start, durations, workers):
    """Completion times when tasks are handed, in order, to the first free worker."""
    if workers is None or workers >= len(durations):
        return [start + d for d in durations]
    if workers < 1:
        raise InvalidArgument("worker count must be >= 1")
    free = [start] * workers
    out = []
    for d in durations:
        t = heapq.heappop(free)
        out.append(t + d)
        heapq.heappush(free, t + d)
    return out


def _speculate(finish, relaunch, q):
    """Relaunch every unfinished task once a fraction ``q`` has finished; first copy wins.

    Returns final completion times and the indices that were relaunched.
    """
    if not finish:
        return [], []
    need = max(1, math.ceil(q * len(finish) - 1e-9))
    t_q = sorted(finish)[need - 1]
    final = list(finish)
    again = []
    for i, t in enumerate(finish):
        if t > t_q:
            again.append(i)
            final[i] = min(t, t_q + relaunch[i])
    return final, again


class Simulator:
    """Holds the object store and the encoded-operand cache across calls.

    Each multiplication gets fresh random streams derived from
    ``(seed, call index, stage)``, so iterative apps see new straggler draws
    every iteration while a rerun with the same seed replays exactly.
    """

    def __init__(self, cfg: SimConfig | None = None, store: ObjectStore | None = None):
        self.cfg = cfg or SimConfig()
        self.store = store or ObjectStore(self.cfg.store.alpha, self.cfg.store.beta)
        self.calls = 0
        self.last_manifest = None
        self._encoded = {}
        self._forced = None if self.cfg.forced_stragglers is None else set(self.cfg.forced_stragglers)

    # random streams and task timing

    def _acct(self, tid):
        return f"{self.calls}/{tid}"

    def _rng(self, stage):
        return np.random.default_rng([self.cfg.seed, self.calls, stage])

    def _task(self, rng, task_id, work, io_seconds):
        forced = None if self._forced is None else task_id in self._forced
        t, straggled = sample_task_time(self.cfg.model, work, rng, forced)
        if straggled:
            io_seconds *= self.cfg.model.straggler_factor
        return t + io_seconds, straggled

    def _relaunch_times(self, stage, ids, works, ios):
        rng = self._rng(stage)
        return [self._task(rng, tid + ":re", w, s)[0] for tid, w, s in zip(ids, works, ios)]

    def _stage(self, stage, relaunch_stage, ids, works, ios, start, workers, q):
        """Run one barrier stage; returns (final finish times, stragglers, relaunched ids)."""
        rng = self._rng(stage)
        durs, straggled = [], []
        for tid, w, s in zip(ids, works, ios):
            d, st = self._task(rng, tid, w, s)
            durs.append(d)
            if st:
                straggled.append(tid)
        finish = _finish_times(start, durs, workers)
        relaunch = self._relaunch_times(relaunch_stage, ids, works, ios)
        final, again = _speculate(finish, relaunch, q)
        return final, straggled, [ids[i] for i in again]

    # operand encoding

    def _encode_operand(self, name, m, num_blocks, group_size, cache_key):
        """Store systematic blocks and plan parity tasks; cached by ``cache_key``."""
        sig = (m.shape, num_blocks, group_size, hashlib.blake2b(m.tobytes(), digest_size=16).hexdigest())
        if cache_key is not None:
            hit = self._encoded.get(cache_key)
            if hit is not None and hit["sig"] == sig:
                return hit, []
        prefix = f"{cache_key or name}#{self.calls}"
        blocks, part = partition_rows(m, num_blocks)
        layout = CodedLayout.build(num_blocks, group_size)
        keys = []
        for t in layout.tags:
            if t.source is not None:
                key = f"{prefix}/blk/{t.source}"
                self.store.write_matrix(key, blocks[t.source], account="input")
            else:
                key = f"{prefix}/par/{t.group}"
            keys.append(key)
        tasks = []
        for i, t in enumerate(layout.tags):
            if t.source is None:
                src = [keys[layout.systematic_index(s)] for s in layout.group_members(t.group)]
                tasks.append((f"enc:{name}:{t.group}", src, keys[i]))
        entry = {"sig": sig, "partition": part, "layout": layout, "keys": keys}
        if cache_key is not None:
            self._encoded[cache_key] = entry
        return entry, tasks

    def _run_encode(self, tasks, report):
        """Execute parity tasks for real and time them as one barrier stage."""
        ids, works, ios = [], [], []
        for tid, src, dst in tasks:
            acct = self._acct(tid)
            parity = sum_blocks([self.store.read_matrix(k, acct) for k in src])
            self.store.write_matrix(dst, parity, acct)
            ids.append(tid)
            works.append(self.cfg.costs.encode_per_block * (len(src) + 1))
            ios.append(self.store.ledger(acct).seconds)
        final, straggled, again = self._stage(
            _ENCODE, _ENC_RELAUNCH, ids, works, ios, 0.0, self.cfg.workers.encode, self.cfg.policy.stage_q
        )
        report.straggler_ids += straggled
        report.encode_tasks += len(ids)
        return max(final, default=0.0)

    # compute stage with per-unit decode triggers

    def _compute_and_wait(self, cells, unit_of, decodable, t0, report):
        """Time the compute stage and find when each decoding unit may start.

        ``cells`` is a list of ``(task_id, cell, work, io_seconds)``.  Returns
        ``(trigger time per unit, missing cells per unit at trigger)``.
        """
        rng = self._rng(_COMPUTE)
        durs, straggled = [], []
        for tid, _, w, s in cells:
            d, st = self._task(rng, tid, w, s)
            durs.append(d)
            straggled.append(st)
        finish = _finish_times(t0, durs, self.cfg.workers.compute)
        report.straggler_ids += [c[0] for c, st in zip(cells, straggled) if st]

        pol = self.cfg.policy
        if pol.deadline_quantile is None:
            calm = [f for f, st in zip(finish, straggled) if not st]
            deadline = max(calm) if calm else max(finish)
        else:
            deadline = float(np.quantile(finish, pol.deadline_quantile, method="higher"))

        units = {}
        index_of = {c[1]: k for k, c in enumerate(cells)}
        for idx, (_, cell, _, _) in enumerate(cells):
            units.setdefault(unit_of(cell), set()).add(cell)
        missing = {u: set(cs) for u, cs in units.items()}
        trigger, at_trigger = {}, {}
        events = [(f, 0, idx) for idx, f in enumerate(finish)]
        events.append((deadline, 1, -1))
        heapq.heapify(events)
        past_deadline = False
        relaunch_rng = self._rng(_RECOMPUTE)
        n_recompute = 0

        def fire(u, t):
            trigger[u] = t
            at_trigger[u] = frozenset(missing[u])

        while events and len(trigger) < len(units):
            t, kind, idx = heapq.heappop(events)
            if kind == 1:
                past_deadline = True
                for u in sorted(units):
                    if u in trigger:
                        continue
                    if decodable(u, missing[u]):
                        fire(u, t)
                    elif not pol.recompute:
                        raise NotDecodable(
                            f"unit {u} undecodable at the deadline with {len(missing[u])} missing",
                            sorted(missing[u]),
                        )
                    else:
                        for cell in sorted(missing[u]):
                            i = index_of[cell]
                            tid, _, w, s = cells[i]
                            d, _ = self._task(relaunch_rng, tid + ":re", w, s)
                            heapq.heappush(events, (t + d, 0, i))
                            n_recompute += 1
                continue
            cell = cells[idx][1]
            u = unit_of(cell)
            if u in trigger or cell not in missing[u]:
                continue
            missing[u].discard(cell)
            if not missing[u] or ((past_deadline or pol.decode_trigger == "eager") and decodable(u, missing[u])):
                fire(u, t)
        report.recomputed += n_recompute
        report.compute_tasks += len(cells)
        return trigger, at_trigger

    def _run_decode(self, jobs, barrier, report):
        """``jobs``: list of (task_id, reads, writes, io_seconds).  Returns stage end time."""
        ids = [j[0] for j in jobs]
        works = [self.cfg.costs.decode_per_block * (j[1] + j[2] + 1) for j in jobs]
        ios = [j[3] for j in jobs]
        final, straggled, again = self._stage(
            _DECODE, _DEC_RELAUNCH, ids, works, ios, barrier, self.cfg.workers.decode, self.cfg.policy.stage_q
        )
        report.straggler_ids += straggled
        report.decode_tasks += len(jobs)
        return final

    def _finish_report(self, report, io_before):
        report.bytes_read = self.store.total.bytes_read - io_before.bytes_read
        report.bytes_written = self.store.total.bytes_written - io_before.bytes_written
        report.t_total = report.t_enc + report.t_comp + report.t_dec
        self.calls += 1
        return report

    # public entry points

    def coded_matmul(self, a, b, params: CodeParams, key_a=None, key_b=None):
        """``A B^T`` through encode, compute and decode stages using the local product code."""
        a = as_matrix(a, "A")
        b = as_matrix(b, "B")
        if a.shape[1] != b.shape[1]:
            raise InvalidArgument(f"A has {a.shape[1]} columns but B has {b.shape[1]}")
        report = RunReport("coded")
        io_before = IOLedger(**asdict(self.store.total))
        enc_a, tasks_a = self._encode_operand("a", a, params.ma, params.la, key_a)
        enc_b, tasks_b = self._encode_operand("b", b, params.mb, params.lb, key_b)
        report.encode_tasks_a = len(tasks_a)
        report.encode_tasks_b = len(tasks_b)
        report.t_enc = self._run_encode(tasks_a + tasks_b, report)

        grid = CodedProductGrid(params)
        ka, kb = enc_a["keys"], enc_b["keys"]
        prefix = f"C#{self.calls}"

        def compute(cell):
            i, j = cell
            tid = f"comp:{i}:{j}"
            acct = self._acct(tid)
            block = block_product(self.store.read_matrix(ka[i], acct), self.store.read_matrix(kb[j], acct))
            return tid, cell, block

        cells = []
        for tid, cell, block in _pmap(compute, sorted(grid.states)):
            key = f"{prefix}/{cell[0]}/{cell[1]}"
            acct = self._acct(tid)
            self.store.write_matrix(key, block, acct)
            grid.store_keys[cell] = key
            cells.append((tid, cell, self.cfg.costs.compute, self.store.ledger(acct).seconds))
        report.block_bytes = self.store.ledger(self._acct(cells[0][0])).bytes_written

        def unit_of(cell):
            ga, gb, _, _ = grid.locate(*cell)
            return (ga, gb)

        def decodable(u, missing):
            return is_decodable([grid.locate(*c)[2:] for c in missing], params.la, params.lb)

        trigger, at_trigger = self._compute_and_wait(cells, unit_of, decodable, report.t_enc, report)
        barrier = max(trigger.values())
        report.t_comp = barrier - report.t_enc

        for u in grid.subgrids():
            for cell in grid.subgrid_cells(*u):
                grid.states[cell] = CellState.MISSING if cell in at_trigger[u] else CellState.PRESENT
        self.last_manifest = grid.to_manifest({"a": enc_a["partition"], "b": enc_b["partition"]})

        jobs = []
        for u in grid.subgrids():
            tid = f"dec:{u[0]}:{u[1]}"
            acct = self._acct(tid)
            outcome = grid.decode_subgrid(
                *u, fetch=lambda c, acct=acct: self.store.read_matrix(grid.store_keys[c], acct)
            )
            if outcome.undecodable:
                raise NotDecodable(f"subgrid {u} stalled", outcome.undecodable)
            written = 0
            for local in outcome.recovered:
                if local[0] < params.la and local[1] < params.lb:
                    cell = grid.global_cell(*u, *local)
                    self.store.write_matrix(grid.store_keys[cell] + ":dec", grid.payloads[cell], acct)
                    written += 1
            report.decoder_reads.append({"unit": list(u), "reads": outcome.blocks_read})
            report.decode_bytes_read += self.store.ledger(acct).bytes_read
            jobs.append((tid, outcome.blocks_read, written, self.store.ledger(acct).seconds))
        final = self._run_decode(jobs, barrier, report)
        report.t_dec = max(final) - barrier
        # decode started per unit at its own trigger instead of the barrier
        report.t_overlapped = max(trigger[u] + (f - barrier) for u, f in zip(grid.subgrids(), final))

        c = self._assemble(grid, params, enc_a["partition"], enc_b["partition"])
        return c, self._finish_report(report, io_before)

    def _assemble(self, grid, params, part_a, part_b):
        for cell, key in grid.store_keys.items():
            if grid.is_systematic(*cell) and grid.states[cell] is CellState.PRESENT:
                grid.payloads[cell] = self.store.read_matrix(key, "assemble")
        return assemble_result(grid, part_a, part_b)

    def speculative_matmul(self, a, b, num_blocks=(4, 4)):
        """Uncoded ``A B^T``: one task per block product, relaunching laggards after a fraction ``q``."""
        a = as_matrix(a, "A")
        b = as_matrix(b, "B")
        if a.shape[1] != b.shape[1]:
            raise InvalidArgument(f"A has {a.shape[1]} columns but B has {b.shape[1]}")
        ma, mb = num_blocks
        report = RunReport("speculative")
        io_before = IOLedger(**asdict(self.store.total))
        blocks_a, part_a = partition_rows(a, ma)
        blocks_b, part_b = partition_rows(b, mb)
        prefix = f"S#{self.calls}"
        for k, blk in enumerate(blocks_a):
            self.store.write_matrix(f"{prefix}/a/{k}", blk, "input")
        for k, blk in enumerate(blocks_b):
            self.store.write_matrix(f"{prefix}/b/{k}", blk, "input")
        pairs = [(i, j) for i in range(ma) for j in range(mb)]

        def compute(pair):
            i, j = pair
            tid = f"comp:{i}:{j}"
            acct = self._acct(tid)
            blk = block_product(self.store.read_matrix(f"{prefix}/a/{i}", acct),
                                self.store.read_matrix(f"{prefix}/b/{j}", acct))
            return tid, pair, blk

        out = np.empty((part_a.padded_rows, part_b.padded_rows))
        ids, ios = [], []
        for tid, (i, j), blk in _pmap(compute, pairs):
            acct = self._acct(tid)
            self.store.write_matrix(f"{prefix}/c/{i}/{j}", blk, acct)
            out[part_a.block_slice(i), part_b.block_slice(j)] = self.store.read_matrix(f"{prefix}/c/{i}/{j}", "assemble")
            ids.append(tid)
            ios.append(self.store.ledger(acct).seconds)
        works = [self.cfg.costs.compute] * len(ids)
        final, straggled, again = self._stage(
            _COMPUTE, _RELAUNCH, ids, works, ios, 0.0, self.cfg.workers.compute, self.cfg.policy.q
        )
        report.straggler_ids = straggled
        report.recomputed = len(again)
        report.compute_tasks = len(ids)
        report.t_comp = max(final)
        report.t_overlapped = report.t_comp
        return out[: part_a.rows, : part_b.rows], self._finish_report(report, io_before)

    def coded_matvec(self, a, x, num_blocks, group_size, key_a=None):
        a = as_matrix(a, "A")
        x = as_vector(x, "x")
        if a.shape[1] != x.shape[0]:
            raise InvalidArgument(f"A has {a.shape[1]} columns but x has length {x.shape[0]}")
        report = RunReport("coded")
        io_before = IOLedger(**asdict(self.store.total))
        enc, tasks = self._encode_operand("a", a, num_blocks, group_size, key_a)
        report.encode_tasks_a = len(tasks)
        report.t_enc = self._run_encode(tasks, report)
        plan = CodedMatvecPlan(enc["layout"], enc["partition"])
        xkey = f"x#{self.calls}"
        self.store.write_matrix(xkey, x[None, :], "input")
        prefix = f"y#{self.calls}"
        seg_keys = {}
        cells = []
        for i, key in enumerate(enc["keys"]):
            tid = f"comp:{i}"
            acct = self._acct(tid)
            seg = self.store.read_matrix(key, acct) @ self.store.read_matrix(xkey, acct)[0]
            seg_keys[i] = f"{prefix}/{i}"
            self.store.write_matrix(seg_keys[i], seg[None, :], acct)
            cells.append((tid, i, self.cfg.costs.compute, self.store.ledger(acct).seconds))
        report.block_bytes = self.store.ledger(self._acct(cells[0][0])).bytes_written

        L = group_size

        def unit_of(i):
            return i // (L + 1)

        trigger, at_trigger = self._compute_and_wait(
            cells, unit_of, lambda u, missing: len(missing) <= 1, report.t_enc, report
        )
        barrier = max(trigger.values())
        report.t_comp = barrier - report.t_enc

        segments = [None] * plan.num_coded
        jobs = []
        for g in range(plan.layout.num_groups):
            tid = f"dec:{g}"
            acct = self._acct(tid)
            group = plan.group_cells(g)
            parity = group[-1]
            lost = [i for i in group if i in at_trigger[g]]
            sys_lost = [i for i in lost if i != parity]
            # the decoder only reads when a systematic segment needs rebuilding
            reader = acct if sys_lost else "assemble"
            for i in group:
                if i in lost or (i == parity and not sys_lost):
                    continue
                segments[i] = self.store.read_matrix(seg_keys[i], reader)[0]
            reads = L if sys_lost else 0
            report.decoder_reads.append({"unit": [g], "reads": reads})
            report.decode_bytes_read += self.store.ledger(acct).bytes_read
            jobs.append((tid, reads, len(sys_lost), self.store.ledger(acct).seconds))
        y = decode_matvec(segments, plan)
        final = self._run_decode(jobs, barrier, report)
        report.t_dec = max(final) - barrier
        report.t_overlapped = max(trigger[g] + (f - barrier) for g, f in enumerate(final))
        return y, self._finish_report(report, io_before)

    def speculative_matvec(self, a, x, num_blocks):
        a = as_matrix(a, "A")
        x = as_vector(x, "x")
        if a.shape[1] != x.shape[0]:
            raise InvalidArgument(f"A has {a.shape[1]} columns but x has length {x.shape[0]}")
        report = RunReport("speculative")
        io_before = IOLedger(**asdict(self.store.total))
        blocks, part = partition_rows(a, num_blocks)
        prefix = f"SV#{self.calls}"
        self.store.write_matrix(f"{prefix}/x", x[None, :], "input")
        segs, ids, ios = [], [], []
        for k, blk in enumerate(blocks):
            self.store.write_matrix(f"{prefix}/a/{k}", blk, "input")
        for k in range(num_blocks):
            tid = f"comp:{k}"
            acct = self._acct(tid)
            seg = self.store.read_matrix(f"{prefix}/a/{k}", acct) @ self.store.read_matrix(f"{prefix}/x", acct)[0]
            self.store.write_matrix(f"{prefix}/y/{k}", seg[None, :], acct)
            segs.append(self.store.read_matrix(f"{prefix}/y/{k}", "assemble")[0])
            ids.append(tid)
            ios.append(self.store.ledger(acct).seconds)
        final, straggled, again = self._stage(
            _COMPUTE, _RELAUNCH, ids, [self.cfg.costs.compute] * len(ids), ios, 0.0,
            self.cfg.workers.compute, self.cfg.policy.q,
        )
        report.straggler_ids = straggled
        report.recomputed = len(again)
        report.compute_tasks = len(ids)
        report.t_comp = max(final)
        report.t_overlapped = report.t_comp
        return np.concatenate(segs)[: part.rows], self._finish_report(report, io_before)


def run_coded_matmul(a, b, params: CodeParams, cfg: SimConfig | None = None):
    return Simulator(cfg).coded_matmul(a, b, params)


def run_speculative_matmul(a, b, cfg: SimConfig | None = None, num_blocks=(4, 4)):
    return Simulator(cfg).speculative_matmul(a, b, num_blocks)


def run_coded_matvec(a, x, group_size, cfg: SimConfig | None = None, num_blocks=None):
    """Coded ``A x``; ``num_blocks`` defaults to two groups of ``group_size`` blocks."""
    if num_blocks is None:
        num_blocks = 2 * group_size
    return Simulator(cfg).coded_matvec(a, x, num_blocks, group_size)


def run_speculative_matvec(a, x, cfg: SimConfig | None = None, num_blocks=4):
    return Simulator(cfg).speculative_matvec(a, x, num_blocks)
