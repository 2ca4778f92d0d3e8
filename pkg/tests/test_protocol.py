import numpy as np
import pytest

from idsan import protocol
from idsan.protocol import ProbeSettings, derive_seed, fit_projection, project, run_probe
from idsan.verifier import MlpConfig

FAST = ProbeSettings(far=1e-3, seeds=2, quota=8)


def test_derive_seed():
    assert derive_seed(0, "eval", 1, 2) == derive_seed(0, "eval", 1, 2)
    assert len({derive_seed(0, "eval", 1, j) for j in range(50)}) == 50
    assert derive_seed(0, "pairs") != derive_seed(1, "pairs")
    assert 0 <= derive_seed(123, "x") < 2**64


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("IDSAN_THREADS", "3")
    assert protocol.worker_count() == 3
    monkeypatch.setenv("IDSAN_THREADS", "0")
    assert protocol.worker_count() == 1


def test_raw_probe_report(small_synth):
    emb, _ = small_synth
    r = run_probe(emb, 1, FAST)
    assert r["tar"]["tar"] > 0.8
    assert len(r["per_seed"]) == 2
    for s in r["per_seed"]:
        assert s["tau"] == r["operating_point"]["tau"]
        assert s["impostor_count"] == s["pairs"]["impostor"] == 12 * 11 * 8
    assert r["operating_point"]["split"] == "val"
    assert r["hygiene"] == {
        "support_in_pairs": False,
        "nontrain_in_fit": False,
        "train_in_pairs": False,
        "tau_frozen_before_test": True,
    }
    assert r["alpha"] in FAST.alphas


def test_thread_count_does_not_change_results(small_synth, monkeypatch):
    emb, _ = small_synth
    monkeypatch.setenv("IDSAN_THREADS", "1")
    a = run_probe(emb, 1, FAST)
    monkeypatch.setenv("IDSAN_THREADS", "4")
    b = run_probe(emb, 1, FAST)
    assert a == b


def test_isp_drops_tar(small_synth):
    emb, _ = small_synth
    model = fit_projection(emb, "isp", rank=64)
    assert run_probe(project(emb, model), 1, FAST)["tar"]["tar"] < 0.1


def test_rank_sweep_cells(small_synth):
    emb, _ = small_synth
    cells = protocol.rank_sweep(emb, [0, 64, 500], 1, FAST)
    raw = run_probe(emb, 1, FAST)
    assert cells[0]["status"] == "ok" and cells[0]["tar"] == raw["tar"]
    assert cells[0]["per_seed"] == raw["per_seed"]
    assert cells[1]["tar"]["tar"] < cells[0]["tar"]["tar"]
    assert cells[2]["status"] == "RankDeficient" and cells[2]["matrix_rank"] == 95


def test_identity_sweep(small_synth):
    emb, _ = small_synth
    cells = protocol.identity_sweep(emb, [40, 96, 500], 20, 1, FAST)
    assert [c["status"] for c in cells] == ["ok", "ok", "InsufficientIdentities"]
    assert cells[2]["available"] == 96


def test_transfer_with_itself(small_synth):
    emb, _ = small_synth
    t = protocol.transfer(emb, emb, 32, 1, FAST)
    cells = t["cells"]
    assert cells["fitA_evalA"]["tar"] == cells["fitB_evalA"]["tar"]
    assert cells["fitA_evalA"]["label"] == "ISP-W" and cells["fitB_evalA"]["label"] == "ISP-X"
    assert t["max_cosine"] == pytest.approx(1.0)


def test_leace_projection(small_synth):
    emb, _ = small_synth
    out = project(emb, fit_projection(emb, "leace"))
    assert not out.normalized
    assert run_probe(out, 1, FAST)["hygiene"]["tau_frozen_before_test"]


def test_mlp_probe_end_to_end(small_synth):
    emb, _ = small_synth
    s = ProbeSettings(probe="mlp", far=1e-3, seeds=2, quota=4, mlp=MlpConfig(hidden=32, out_dim=16, epochs=2))
    r = run_probe(emb, 1, s)
    assert 0 <= r["tar"]["tar"] <= 1 and r["alpha"] is None
    assert r == run_probe(emb, 1, s)


def test_projection_kinds(small_synth):
    emb, _ = small_synth
    with pytest.raises(ValueError):
        fit_projection(emb, "isp")
    with pytest.raises(ValueError):
        fit_projection(emb, "pca", rank=2)
    m = fit_projection(emb, "isp", rank=4)
    assert np.array_equal(m.basis, m.basis.astype(np.float32))
