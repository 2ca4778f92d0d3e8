import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from idsan.embstore import load_embeddings, make_support_query_split
from idsan.synth import SynthConfig, generate, load_truth, oracle_best_linear_tar, planted_bases, save_synth
from idsan.verifier import build_pairs


def test_default_config_shape():
    cfg = SynthConfig()
    assert (cfg.dim, cfg.identities, cfg.images_per_identity, cfg.identity_rank) == (128, 400, 20, 64)
    assert cfg.splits == (320, 40, 40) and cfg.snr == 4.0


@pytest.mark.parametrize(
    "kw",
    [
        {"identity_rank": 100, "task_rank": 40},
        {"splits": (1, 1, 1)},
        {"noise_scale": -1.0},
        {"dim": 0},
    ],
)
def test_bad_configs(kw):
    with pytest.raises(ValueError):
        SynthConfig(**kw)


@given(st.integers(0, 1000), st.integers(1, 12), st.integers(0, 4))
def test_planted_geometry(seed, r, t):
    cfg = SynthConfig(dim=20, identities=10, images_per_identity=2, identity_rank=r, task_rank=t,
                      task_classes=3, splits=(6, 2, 2), seed=seed)
    u, v, centers = planted_bases(cfg)
    assert np.allclose(u.T @ u, np.eye(r), atol=1e-12)
    assert np.max(np.abs(u.T @ v), initial=0.0) < 1e-12
    assert np.max(np.abs(centers @ u), initial=0.0) < 1e-12


def test_generated_set(small_synth):
    emb, truth = small_synth
    x = emb.vectors.astype(np.float64)
    assert emb.normalized and np.allclose(np.linalg.norm(x, axis=1), 1, atol=1e-6)
    assert emb.identity_count == 120 and emb.balanced_n == 8
    assert [len(emb.identities_in(s)) for s in ("train", "val", "test")] == [96, 12, 12]
    residual = truth.class_means - truth.class_means @ truth.basis @ truth.basis.T
    assert np.abs(residual).max() < 1e-12
    assert emb.task_labels is not None and set(np.unique(emb.task_labels)) <= set(range(8))


def test_draws_share_planted_model():
    a = SynthConfig(identities=20, images_per_identity=3, splits=(10, 5, 5), seed=0, basis_seed=9)
    b = SynthConfig(identities=20, images_per_identity=3, splits=(10, 5, 5), seed=1, basis_seed=9)
    ea, ta = generate(a)
    eb, tb = generate(b)
    assert np.array_equal(ta.basis, tb.basis)
    assert not np.array_equal(ea.vectors, eb.vectors)
    again, _ = generate(a)
    assert np.array_equal(ea.vectors, again.vectors)


def test_oracle_verifier_is_strong(small_synth):
    emb, truth = small_synth
    sq = make_support_query_split(emb, 1, 0)
    pairs = build_pairs(emb, "test", sq, 20, 0)
    assert oracle_best_linear_tar(truth, emb, pairs, 1e-3) > 0.95


def test_save_and_reload(tmp_path, small_synth):
    emb, truth = small_synth
    cfg = SynthConfig(identities=120, images_per_identity=8, splits=(96, 12, 12), seed=3)
    path = save_synth(emb, truth, cfg, tmp_path / "s.emb")
    back = load_embeddings(path)
    assert np.array_equal(back.vectors, emb.vectors) and np.array_equal(back.task_labels, emb.task_labels)
    t = load_truth(path)
    assert np.allclose(t.basis, truth.basis, atol=1e-6)
    assert np.allclose(t.task_centers, truth.task_centers, atol=1e-6)
