import json

import numpy as np
import pytest

from idsan.attribution import disk_mask, write_mask
from idsan.cli import AuditReport, canonical_json, main
from idsan.embstore import from_arrays, read_sidecar, save_embeddings

PROBE = ["--k", "1", "--seeds", "2", "--far", "1e-3"]


@pytest.fixture(scope="module")
def synth_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "s.emb"
    assert main(["synth", "--out", str(path), "--identities", "120", "--images", "8"]) == 0
    return path


def run(argv, tmp_path, name="r.json"):
    out = tmp_path / name
    code = main(argv + ["--out", str(out)])
    assert code == 0
    return json.loads(out.read_text())


def strip(report):
    return {k: v for k, v in report.items() if k != "timestamp"}


def test_canonical_floats():
    text = canonical_json({"b": 1 / 3, "a": [np.float32(2.5), float("nan")], "c": np.int64(4)})
    assert text.index('"a"') < text.index('"b"')
    assert "0.333333" in text and "0.3333333" not in text and '"nan"' in text


def test_probe_deterministic(synth_path, tmp_path):
    a = run(["probe", "--emb", str(synth_path)] + PROBE, tmp_path, "a.json")
    b = run(["probe", "--emb", str(synth_path)] + PROBE, tmp_path, "b.json")
    assert strip(a) == strip(b)
    assert (tmp_path / "a.json").read_text().replace(a["timestamp"], "") == (
        (tmp_path / "b.json").read_text().replace(b["timestamp"], "")
    )
    assert a["results"]["tau_frozen_before_test"] is True
    assert a["format_version"] == 1 and a["config"]["model"] == "raw"
    for run_ in a["results"]["runs"]:
        assert run_["operating_point"]["impostor_count"] > 0
        assert all("impostor_count" in s and "tau" in s for s in run_["per_seed"])


def test_fit_apply_equals_project_flag(synth_path, tmp_path):
    proj = tmp_path / "p.bin"
    applied = tmp_path / "a.emb"
    assert main(["fit", "--emb", str(synth_path), "--project", "isp", "--rank", "32", "--out", str(proj)]) == 0
    assert main(["apply", "--emb", str(synth_path), "--projector", str(proj), "--out", str(applied)]) == 0
    a = run(["probe", "--emb", str(applied)] + PROBE, tmp_path, "a.json")
    b = run(["probe", "--emb", str(synth_path), "--project", "isp", "--rank", "32"] + PROBE, tmp_path, "b.json")
    assert a["results"]["runs"] == b["results"]["runs"]


def test_exit_codes(synth_path, tmp_path, capsys):
    assert main(["fit", "--emb", str(synth_path), "--rank", "500", "--out", str(tmp_path / "x")]) == 3
    assert main(["probe", "--emb", str(tmp_path / "missing.emb")]) == 2
    assert main(["probe", "--nonsense"]) == 1
    assert main(["fit", "--emb", str(synth_path), "--project", "none", "--out", str(tmp_path / "x")]) == 1
    assert "RankDeficient" in capsys.readouterr().err


def test_sweeps_and_transfer(synth_path, tmp_path):
    r = run(["sweep-rank", "--emb", str(synth_path), "--ranks", "0", "64", "200"] + PROBE, tmp_path)
    cells = r["results"]["grid"][0]["cells"]
    assert [c["status"] for c in cells] == ["ok", "ok", "RankDeficient"]
    raw = run(["probe", "--emb", str(synth_path)] + PROBE, tmp_path, "raw.json")
    assert cells[0]["per_seed"] == raw["results"]["runs"][0]["per_seed"]
    r = run(["sweep-identities", "--emb", str(synth_path), "--identities", "48", "500", "--rank", "20"] + PROBE, tmp_path)
    assert [c["status"] for c in r["results"]["grid"][0]["cells"]] == ["ok", "InsufficientIdentities"]
    r = run(["transfer", "--emb", str(synth_path), "--emb-b", str(synth_path), "--rank", "32"] + PROBE, tmp_path)
    t = r["results"]["transfer"][0]
    assert t["cells"]["fitA_evalA"]["tar"] == t["cells"]["fitB_evalA"]["tar"]
    assert t["max_cosine"] == 1.0


def test_angles_and_utility(synth_path, tmp_path):
    r = run(["angles", "--emb", str(synth_path), "--emb-b", str(synth_path), "--rank", "16"], tmp_path)
    assert r["results"]["max_cosine"] == 1.0 and len(r["results"]["cosines"]) == 16
    r = run(["utility", "--emb", str(synth_path), "--rank", "16"], tmp_path)
    assert {u["metric"] for u in r["results"]["utility"]} >= {"knn_top1@20", "linear_probe_top1", "recall@10"}
    assert r["results"]["recall_monotone"] is True


def attribution_file(tmp_path):
    e0, e1 = [1.0, 0.0], [0.0, 1.0]
    diag = [2**-0.5, 2**-0.5]
    rows = [e0, e0, e0, e1, e0, diag]  # one FII pair
    index = [
        {"kind": "fii", "triplet": "p0", "role": role, "level": None, "row": i}
        for i, role in enumerate(["query", "ref", "query_face_occ", "ref_face_occ", "query_bg_occ", "ref_bg_occ"])
    ]
    for lvl, q in enumerate([e0, diag]):  # identity wins at 0, tie (context) at 1
        rows.append(q)
        index.append({"kind": "bstar", "triplet": "t0", "role": "query", "level": float(lvl), "row": len(rows) - 1})
    rows += [e0, e1]
    index += [
        {"kind": "bstar", "triplet": "t0", "role": "id", "level": None, "row": len(rows) - 2},
        {"kind": "bstar", "triplet": "t0", "role": "ctx", "level": None, "row": len(rows) - 1},
    ]
    emb = from_arrays(np.array(rows), [str(i) for i in range(len(rows))])
    path = save_embeddings(emb, tmp_path / "attr.emb", extra={"attribution": {"rows": index}})
    return path


def test_attrib_command(tmp_path):
    path = attribution_file(tmp_path)
    assert "attribution" in read_sidecar(path)
    mask = write_mask(tmp_path / "m.pgm", disk_mask((200, 200), (100, 100), 30))
    r = run(
        ["attrib", "--emb", str(path), "--mask", str(mask), "--bbox", "40", "40", "60", "60", "--image-dims", "200", "200"],
        tmp_path,
    )
    res = r["results"]
    assert res["raw"]["fii"]["fii"] == pytest.approx(2**-0.5, abs=1e-6)
    assert res["raw"]["b_star"]["per_triplet"] == [1.0]
    assert abs(res["annulus"]["area_ratio"] - 1) <= 0.02
    assert res["crop"]["scale"] == pytest.approx((400 / 0.33) ** 0.5, rel=1e-6)


def test_report_round_trip():
    rep = AuditReport("probe", {"a": 1}, {"x": 0.5})
    assert AuditReport.from_json(rep.to_json()) == rep
