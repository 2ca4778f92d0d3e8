import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from idsan.embstore import (
    HEADER,
    from_arrays,
    load_embeddings,
    make_support_query_split,
    normalize,
    read_emb1,
    save_embeddings,
    sidecar_path,
    write_emb1,
)
from idsan.errors import (
    DegenerateVector,
    FormatError,
    InsufficientImages,
    MetadataError,
    SplitViolation,
)


def test_header_layout(tmp_path):
    x = np.arange(6, dtype=np.float32).reshape(2, 3)
    path = tmp_path / "a.emb"
    write_emb1(path, x)
    raw = path.read_bytes()
    assert raw[:4] == b"EMB1"
    assert struct.unpack("<IQ", raw[4:16]) == (3, 2)
    assert len(raw) == HEADER.size + 4 * 6
    assert np.frombuffer(raw[16:], dtype="<f4").tolist() == list(range(6))


@given(st.integers(1, 7), st.integers(1, 9), st.booleans())
def test_emb1_round_trip(tmp_path_factory, count, dim, mmap):
    path = tmp_path_factory.mktemp("rt") / "x.emb"
    x = np.random.default_rng(count * 31 + dim).standard_normal((count, dim)).astype(np.float32)
    write_emb1(path, x)
    assert np.array_equal(np.asarray(read_emb1(path, mmap=mmap)), x)


@pytest.mark.parametrize(
    "mangle",
    [
        lambda b: b[:10],
        lambda b: b"EMB2" + b[4:],
        lambda b: b[:-4],
        lambda b: b + b"\0\0\0\0",
    ],
)
def test_corrupt_files_rejected(tmp_path, mangle):
    path = tmp_path / "a.emb"
    write_emb1(path, np.ones((3, 2), dtype=np.float32))
    path.write_bytes(mangle(path.read_bytes()))
    with pytest.raises(FormatError):
        read_emb1(path)


def test_sidecar_round_trip(tmp_path, small_set):
    path = save_embeddings(small_set, tmp_path / "s.emb", extra={"note": "x"})
    back = load_embeddings(path)
    assert np.array_equal(back.vectors, small_set.vectors)
    assert back.identity_labels == small_set.identity_labels
    assert back.split_of == small_set.split_of
    assert back.normalized and back.balanced_n == 5
    assert json.loads(sidecar_path(path).read_text())["note"] == "x"


def test_sidecar_without_identities(tmp_path):
    path = tmp_path / "v.emb"
    write_emb1(path, np.ones((4, 3), dtype=np.float32))
    sidecar_path(path).write_text("{}")
    emb = load_embeddings(path)
    assert emb.identity_count == 4 and set(emb.split_of) == {"train"}


def test_false_normalized_claim(tmp_path):
    path = tmp_path / "v.emb"
    write_emb1(path, 2 * np.ones((2, 3), dtype=np.float32))
    sidecar_path(path).write_text(json.dumps({"normalized": True}))
    with pytest.raises(MetadataError):
        load_embeddings(path)


def test_split_violation():
    with pytest.raises(SplitViolation):
        from_arrays(np.ones((2, 2)), ["a", "b"], {"train": ["a", "b"], "test": ["b"]})


def test_missing_split_and_bad_balance():
    with pytest.raises(MetadataError):
        from_arrays(np.ones((2, 2)), ["a", "b"], {"train": ["a"]})
    with pytest.raises(MetadataError):
        from_arrays(np.ones((3, 2)), ["a", "a", "b"], balanced_n=2)


def test_normalize_zero_row():
    emb = from_arrays(np.array([[1.0, 0.0], [0.0, 0.0]]), ["a", "b"])
    with pytest.raises(DegenerateVector) as info:
        normalize(emb)
    assert info.value.row == 1


def test_vectors_read_only(small_set):
    with pytest.raises(ValueError):
        small_set.vectors[0, 0] = 1.0


@pytest.mark.parametrize("k,support,query", [(16, 16, 4), (1, 1, 19), (4, 4, 16)])
def test_support_query_sizes(k, support, query):
    emb = from_arrays(np.random.default_rng(0).standard_normal((40, 3)), ["a"] * 20 + ["b"] * 20)
    sq = make_support_query_split(emb, k, seed=9)
    for i in range(2):
        assert len(sq.support_of[i]) == support and len(sq.query_of[i]) == query
        assert not set(sq.support_of[i]) & set(sq.query_of[i])
        assert set(sq.support_of[i]) | set(sq.query_of[i]) == set(emb.rows_of(i))


def test_split_needs_a_query_image():
    emb = from_arrays(np.ones((4, 2)), ["a"] * 4)
    with pytest.raises(InsufficientImages):
        make_support_query_split(emb, 4, seed=0)


@given(st.integers(0, 2**63 - 1), st.integers(0, 4))
def test_split_is_per_identity_stream(seed, k):
    x = np.random.default_rng(5).standard_normal((30, 2))
    emb = from_arrays(x, [c for c in "abc" for _ in range(10)])
    full = make_support_query_split(emb, k, seed)
    part = make_support_query_split(emb, k, seed, identities=[2])
    assert np.array_equal(full.support_of[2], part.support_of[2])
    assert np.array_equal(full.query_of[2], make_support_query_split(emb, k, seed).query_of[2])
