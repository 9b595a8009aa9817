import json

import numpy as np
import pytest

from codedmm.code import CodeParams
from codedmm.errors import InvalidArgument, MissingKey, NotDecodable
from codedmm.linalg import matmul_reference, relative_error
from codedmm.sim import (
    DirectoryStore,
    ObjectStore,
    RunReport,
    SimConfig,
    Simulator,
    StragglerModel,
    run_coded_matmul,
    run_coded_matvec,
    run_speculative_matmul,
    run_speculative_matvec,
    sample_task_time,
)

PARAMS = CodeParams(2, 2, 4, 4)  # 2x2 subgrids of 3x3 cells


def operands(seed=0, rows_a=8, rows_b=8, cols=5):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((rows_a, cols)), rng.standard_normal((rows_b, cols))


def forced(ids, **model):
    cfg = SimConfig(forced_stragglers=list(ids))
    for k, v in model.items():
        cfg = cfg.replace(**{f"model__{k}": v})
    return cfg


# -- task timing ------------------------------------------------------------


def test_task_time_no_straggle():
    m = StragglerModel(p=0.0, base_time=1.0, jitter=0.0)
    assert sample_task_time(m, 5, np.random.default_rng(0)) == (5.0, False)


def test_task_time_always_straggle():
    m = StragglerModel(p=1.0, base_time=1.0, jitter=0.0, straggler_factor=3.0)
    assert sample_task_time(m, 1, np.random.default_rng(0)) == (3.0, True)


def test_straggle_fraction():
    m = StragglerModel()
    rng = np.random.default_rng(2024)
    hits = sum(sample_task_time(m, 1, rng)[1] for _ in range(100_000))
    assert abs(hits / 100_000 - 0.02) <= 0.003


def test_task_time_within_jitter():
    m = StragglerModel(p=0.0, base_time=2.0, jitter=0.1)
    rng = np.random.default_rng(1)
    ts = [sample_task_time(m, 3, rng)[0] for _ in range(2000)]
    assert 5.4 <= min(ts) and max(ts) <= 6.6


@pytest.mark.parametrize("kw", [dict(p=-0.1), dict(p=1.5), dict(jitter=1.0), dict(straggler_factor=1.0), dict(base_time=0)])
def test_model_validation(kw):
    with pytest.raises(InvalidArgument):
        StragglerModel(**kw)


def test_nonpositive_work_rejected():
    with pytest.raises(InvalidArgument):
        sample_task_time(StragglerModel(), 0, np.random.default_rng(0))


# -- store ------------------------------------------------------------------


def test_store_charge():
    s = ObjectStore(alpha=0.05, beta=0.001)
    assert s.write("k", b"12345678", "w") == pytest.approx(0.058)
    assert s.read("k", "r") == b"12345678"
    assert s.ledger("r").seconds == pytest.approx(0.058)
    assert s.total.bytes_read == 8 and s.total.bytes_written == 8


def test_store_missing_key(tmp_path):
    for s in (ObjectStore(), DirectoryStore(tmp_path)):
        with pytest.raises(MissingKey):
            s.read("nope")


def test_directory_store_round_trip(tmp_path):
    blob = np.random.default_rng(0).bytes(1000)
    s = DirectoryStore(tmp_path / "d")
    s.write("a/b", blob)
    assert "a/b" in s and s.read("a/b") == blob
    assert DirectoryStore(tmp_path / "d").read("a/b") == blob


# -- config ------------------------------------------------------------------


def test_config_round_trip(tmp_path):
    cfg = SimConfig(seed=7).replace(model__p=0.05, policy__q=0.5, workers__compute=8)
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    back = SimConfig.load(p)
    assert back == cfg and back.model.p == 0.05 and back.workers.compute == 8


@pytest.mark.parametrize("doc", [{"bogus": 1}, {"model": {"q": 1}}, {"model": {"p": 2.0}}])
def test_config_rejects(doc):
    with pytest.raises(InvalidArgument):
        SimConfig.from_dict(doc)


# -- coded matmul -------------------------------------------------------------


def test_p_zero_reads_nothing():
    a, b = operands()
    c, rep = run_coded_matmul(a, b, PARAMS, SimConfig().replace(model__p=0.0))
    assert relative_error(c, matmul_reference(a, b)) < 1e-12
    assert rep.recomputed == 0 and rep.reads == [0, 0, 0, 0]
    assert rep.straggler_ids == []


def test_report_invariants():
    a, b = operands(1)
    _, rep = run_coded_matmul(a, b, PARAMS, SimConfig(seed=3))
    assert rep.t_total == pytest.approx(rep.t_enc + rep.t_comp + rep.t_dec)
    assert rep.encode_tasks == 4 and rep.compute_tasks == 36 and rep.decode_tasks == 4
    assert rep.t_overlapped <= rep.t_total + 1e-9


def test_one_straggler_per_subgrid_decoded():
    a, b = operands(2)
    ids = ["comp:0:1", "comp:4:3", "comp:2:5", "comp:3:0"]
    c, rep = run_coded_matmul(a, b, PARAMS, forced(ids))
    assert rep.recomputed == 0
    assert sorted(rep.straggler_ids) == sorted(ids)
    assert rep.reads == [2, 2, 2, 2]
    assert relative_error(c, matmul_reference(a, b)) < 1e-12


def test_rectangle_recomputed():
    a, b = operands(3)
    ids = ["comp:0:0", "comp:0:1", "comp:1:0", "comp:1:1"]
    c, rep = run_coded_matmul(a, b, PARAMS, forced(ids))
    assert rep.recomputed == 4
    assert relative_error(c, matmul_reference(a, b)) < 1e-12


def test_rectangle_without_recompute_raises():
    a, b = operands(3)
    cfg = forced(["comp:0:0", "comp:0:1", "comp:1:0", "comp:1:1"]).replace(policy__recompute=False)
    with pytest.raises(NotDecodable):
        run_coded_matmul(a, b, PARAMS, cfg)


def test_decode_bytes_match_reads():
    a, b = operands(4)
    ids = ["comp:0:0", "comp:0:1", "comp:3:4", "comp:5:5"]
    _, rep = run_coded_matmul(a, b, PARAMS, forced(ids))
    assert sum(rep.reads) > 0
    assert rep.decode_bytes_read == sum(rep.reads) * rep.block_bytes


def test_eager_trigger_decodes_early():
    a, b = operands(5)
    cfg = SimConfig(seed=1).replace(model__p=0.0, policy__decode_trigger="eager")
    c, rep = run_coded_matmul(a, b, PARAMS, cfg)
    assert relative_error(c, matmul_reference(a, b)) < 1e-12
    # any three missing cells are decodable, so every subgrid fires with cells still running
    assert all(r >= 2 for r in rep.reads)
    _, waited = run_coded_matmul(a, b, PARAMS, cfg.replace(policy__decode_trigger="deadline"))
    assert rep.t_comp < waited.t_comp and waited.reads == [0, 0, 0, 0]


def test_deterministic():
    a, b = operands(6)
    cfg = SimConfig(seed=11).replace(model__p=0.2)
    c1, r1 = run_coded_matmul(a, b, PARAMS, cfg)
    c2, r2 = run_coded_matmul(a, b, PARAMS, cfg)
    assert r1.to_json() == r2.to_json()
    assert np.array_equal(c1, c2)
    _, r3 = run_coded_matmul(a, b, PARAMS, cfg.replace(seed=12))
    assert r3.to_json() != r1.to_json()


def test_threads_do_not_change_results(monkeypatch):
    a, b = operands(7)
    cfg = SimConfig(seed=5).replace(model__p=0.1)
    c1, r1 = run_coded_matmul(a, b, PARAMS, cfg)
    monkeypatch.setenv("CODEDMM_THREADS", "4")
    c2, r2 = run_coded_matmul(a, b, PARAMS, cfg)
    assert r1.to_json() == r2.to_json() and np.array_equal(c1, c2)


def test_straggler_factor_monotone():
    a, b = operands(8)
    base = SimConfig(seed=9).replace(model__p=0.1)
    totals = []
    for f in (1.5, 2.0, 3.0, 5.0, 8.0):
        _, rep = run_coded_matmul(a, b, PARAMS, base.replace(model__straggler_factor=f))
        totals.append(rep.t_total)
    assert totals == sorted(totals)


def test_encode_cost_tracks_parity_count():
    a, b = operands(9, rows_a=12, rows_b=12)
    p1 = CodeParams(3, 3, 6, 6)  # 2 + 2 parities
    p2 = CodeParams(1, 1, 6, 6)  # 6 + 6 parities
    cfg = SimConfig().replace(model__p=0.0)
    r1 = run_coded_matmul(a, b, p1, cfg)[1]
    r2 = run_coded_matmul(a, b, p2, cfg)[1]
    assert (r1.encode_tasks, r2.encode_tasks) == (4, 12)
    # encode only writes parity blocks; the systematic blocks go in as input once
    sim = Simulator(cfg)
    sim.coded_matmul(a, b, p1)
    enc_written = sum(led.bytes_written for acct, led in sim.store.ledgers.items() if acct.startswith("0/enc:"))
    block_bytes = 20 + 8 * 2 * 5
    assert enc_written == 4 * block_bytes


def test_encoding_cached_per_key():
    a, b = operands(10)
    sim = Simulator(SimConfig())
    _, r1 = sim.coded_matmul(a, b, PARAMS, key_a="A", key_b="B")
    _, r2 = sim.coded_matmul(a, b, PARAMS, key_a="A", key_b="B")
    assert (r1.encode_tasks, r2.encode_tasks) == (4, 0)
    c3, r3 = sim.coded_matmul(a + 1, b, PARAMS, key_a="A", key_b="B")
    assert (r3.encode_tasks_a, r3.encode_tasks_b) == (2, 0)
    assert relative_error(c3, matmul_reference(a + 1, b)) < 1e-12


def test_uneven_shapes_padded():
    rng = np.random.default_rng(12)
    a, b = rng.standard_normal((7, 3)), rng.standard_normal((5, 3))
    c, _ = run_coded_matmul(a, b, CodeParams(2, 3, 4, 3), SimConfig(seed=2).replace(model__p=0.3))
    assert c.shape == (7, 5)
    assert relative_error(c, matmul_reference(a, b)) < 1e-12


def test_manifest_captured_before_decode():
    a, b = operands(13)
    sim = Simulator(forced(["comp:0:0"]))
    sim.coded_matmul(a, b, PARAMS)
    doc = sim.last_manifest
    states = {(e["i"], e["j"]): e["state"] for e in doc["cells"]}
    assert states[(0, 0)] == "missing"
    assert sum(s == "missing" for s in states.values()) == 1
    assert set(doc["partitions"]) == {"a", "b"}


# -- speculative ----------------------------------------------------------------


def test_speculative_exact_and_no_relaunch_without_spread():
    a, b = operands(14)
    cfg = SimConfig().replace(model__p=0.0, model__jitter=0.0)
    c, rep = run_speculative_matmul(a, b, cfg, (4, 4))
    assert np.array_equal(c, matmul_reference(a, b)) or relative_error(c, matmul_reference(a, b)) < 1e-15
    assert rep.recomputed == 0 and rep.compute_tasks == 16


def test_speculative_all_straggle():
    a, b = operands(15)
    c, rep = run_speculative_matmul(a, b, SimConfig().replace(model__p=1.0), (2, 2))
    assert len(rep.straggler_ids) == 4
    assert relative_error(c, matmul_reference(a, b)) < 1e-12


def test_speculative_relaunch_helps():
    a, b = operands(16)
    cfg = forced(["comp:1:1"], jitter=0.05)
    _, rep = run_speculative_matmul(a, b, cfg, (4, 4))
    assert rep.recomputed >= 1
    # the relaunched copy beats the 3x original
    assert rep.t_comp < 2.5 * 135


# -- matvec ------------------------------------------------------------------------


def test_matvec_p_zero():
    rng = np.random.default_rng(17)
    a, x = rng.standard_normal((10, 4)), rng.standard_normal(4)
    y, rep = run_coded_matvec(a, x, 2, SimConfig().replace(model__p=0.0))
    np.testing.assert_allclose(y, a @ x, atol=1e-12)
    assert rep.recomputed == 0 and rep.reads == [0, 0]


def test_matvec_one_per_group():
    rng = np.random.default_rng(18)
    a, x = rng.standard_normal((12, 3)), rng.standard_normal(3)
    y, rep = run_coded_matvec(a, x, 3, forced(["comp:1", "comp:4"]), num_blocks=6)
    np.testing.assert_allclose(y, a @ x, atol=1e-12)
    assert rep.recomputed == 0 and rep.reads == [3, 3]


def test_matvec_two_in_group_recomputed():
    rng = np.random.default_rng(19)
    a, x = rng.standard_normal((8, 3)), rng.standard_normal(3)
    y, rep = run_coded_matvec(a, x, 2, forced(["comp:0", "comp:1"]))
    np.testing.assert_allclose(y, a @ x, atol=1e-12)
    assert rep.recomputed == 2


@pytest.mark.parametrize("seed", range(5))
def test_matvec_identity(seed):
    x = np.random.default_rng(seed).standard_normal(8)
    y, _ = run_coded_matvec(np.eye(8), x, 2, SimConfig(seed=seed).replace(model__p=0.4))
    np.testing.assert_allclose(y, x, atol=1e-12)


def test_speculative_matvec():
    rng = np.random.default_rng(20)
    a, x = rng.standard_normal((9, 4)), rng.standard_normal(4)
    y, rep = run_speculative_matvec(a, x, SimConfig(seed=1), 3)
    np.testing.assert_allclose(y, a @ x, atol=1e-12)
    assert rep.compute_tasks == 3


# -- report ------------------------------------------------------------------------


def test_report_csv():
    rep = RunReport("coded", t_total=1.5, decoder_reads=[{"unit": [0, 0], "reads": 3}, {"unit": [0, 1], "reads": 1}])
    lines = rep.to_csv().splitlines()
    assert lines[0].startswith("strategy,t_enc")
    row = dict(zip(lines[0].split(","), lines[1].split(",")))
    assert row["max_reads"] == "3" and row["total_reads"] == "4"
    assert len(rep.to_csv(header=False).splitlines()) == 1
