import hashlib
import json

import numpy as np
import pytest
import yaml

from modalsense import cli
from modalsense.contact import ContactEvent, save_contact_stream
from modalsense.ml import load_dataset
from modalsense.pipeline import (PipelineError, build_dataset, grasp_position_batch, resolve_scenario, run_pipeline)
from modalsense.synth import Waveform, export_wav, read_wav

SMALL = {"primitive": "bar", "length": 0.2, "width": 0.02, "height": 0.02, "divisions": [20, 2, 2]}


def _files(doc):
    return {k: p.read_bytes() for k, p in doc["paths"].items()}


def test_smoke(tmp_path):
    doc = run_pipeline({"scenario_id": "al", "material": "aluminium", "excitation": {"kind": "impulse"}}, tmp_path)
    w = read_wav(doc["paths"]["wav"])
    assert len(w) == 44100 and np.abs(w.samples).max() == pytest.approx(0.5)
    rows = load_dataset(doc["paths"]["features_csv"])
    assert rows.features.shape == (2, 140)
    meta = json.loads(doc["paths"]["meta"].read_text())
    assert meta["config_hash"] == doc["config_hash"] and meta["scale"] > 0
    assert "mesh" in doc["defaults_filled"] and "material" not in doc["defaults_filled"]
    assert doc["diagnostics"]["modal"]["modes"] > 3


def test_bitwise_determinism(tmp_path):
    cfg = {"scenario_id": "st", "material": "steel", "mesh": SMALL, "noise": {"snr_db": 20},
           "excitation": {"kind": "linear_sweep"}, "seed": 5}
    a = run_pipeline(cfg, tmp_path / "a")
    b = run_pipeline(cfg, tmp_path / "b")
    assert _files(a) == _files(b)
    c = run_pipeline(cfg, tmp_path / "c", seed=6)
    assert c["paths"]["wav"].read_bytes() != a["paths"]["wav"].read_bytes()


def test_missing_mesh_is_stage_tagged(tmp_path):
    with pytest.raises(PipelineError) as err:
        run_pipeline({"mesh": {"path": str(tmp_path / "nope.node")}}, tmp_path)
    assert err.value.stage == "mesh" and "[mesh]" in str(err.value)


def test_contact_point_outside_box(tmp_path):
    cfg = {"mesh": SMALL, "grasp": {"left": {"point": [0, -0.05, 0], "normal": [0, 1, 0]}}}
    with pytest.raises(PipelineError, match=r"\[contacts\].*bounding box"):
        run_pipeline(cfg, tmp_path)


def test_contact_stream_and_leak(tmp_path):
    evs = [ContactEvent.make(0.0, (0.02, -0.01, 0.0), (0, 1, 0), 30.0, "grip_left"),
           ContactEvent.make(0.0, (0.02, 0.01, 0.0), (0, -1, 0), 30.0, "grip_right"),
           ContactEvent.make(0.0, (-0.1, 0.0, -0.01), (0, 0, 1), 5.0, "environment"),
           ContactEvent.make(0.3, (0.05, 0.0, 0.01), (0, 0, -1), 1e-3, "other_object", "impulsive")]
    save_contact_stream(evs, tmp_path / "c.jsonl")
    export_wav(Waveform(np.sin(np.arange(4410) * 0.3), 44100), tmp_path / "leak.wav")
    (tmp_path / "s.yaml").write_text(yaml.safe_dump({
        "scenario_id": "stream", "mesh": SMALL, "contact_stream": "c.jsonl",
        "leak": {"path": "leak.wav", "gain": 1e-9}}))
    doc = run_pipeline(tmp_path / "s.yaml", tmp_path / "out")
    assert doc["diagnostics"]["contacts"] == {"active": 3, "impulsive": 1}
    plain = run_pipeline({**yaml.safe_load((tmp_path / "s.yaml").read_text()), "leak": None,
                          "contact_stream": str(tmp_path / "c.jsonl")}, tmp_path / "plain")
    assert doc["paths"]["wav"].read_bytes() != plain["paths"]["wav"].read_bytes()


def test_resolve_fills_defaults():
    cfg, filled = resolve_scenario({"mesh": {"primitive": "tube"}, "grasp": {"f_grip": 10}})
    assert cfg["mesh"]["outer_radius"] == 0.015 and cfg["grasp"]["f_grip"] == 10
    assert "grasp.position" in filled and "grasp.f_grip" not in filled


def _batch(reps=20, **kw):
    return {"name": "mats", "repetitions": reps, "seed": 1,
            "jitter": {"grasp_mm": 3.0}, "noise": {"snr_db": 20},
            "scenarios": [{"material": m, "mesh": SMALL} for m in ("aluminium", "steel", "wood")], **kw}


def test_dataset_counts_and_threads(tmp_path):
    ds = build_dataset(_batch(), tmp_path)
    assert ds.features.shape == (120, 140)
    assert sorted(set(ds.labels)) == ["aluminium", "steel", "wood"]
    assert len(set(ds.groups)) == 60
    meta = json.loads((tmp_path / "mats.meta.json").read_text())
    assert meta["rows"] == 120
    build_dataset(_batch(), tmp_path / "par", threads=2)
    assert (tmp_path / "mats.csv").read_bytes() == (tmp_path / "par" / "mats.csv").read_bytes()


def test_zero_jitter_identical_rows():
    ds = build_dataset(_batch(reps=3, jitter={}, noise={}))
    for lab in ("aluminium", "steel", "wood"):
        rows = ds.features[ds.labels == lab]
        assert np.array_equal(rows[0::2], np.repeat(rows[:1], 3, axis=0))


def test_seed_changes_draws():
    a = build_dataset(_batch(reps=2), seed=1)
    b = build_dataset(_batch(reps=2), seed=2)
    assert a.features.shape == b.features.shape
    assert not np.array_equal(a.features, b.features)


def test_grasp_position_template():
    batch = grasp_position_batch("aluminium")
    assert len(batch["scenarios"]) == 13 and batch["repetitions"] == 5
    assert [s["grasp"]["position"] for s in batch["scenarios"]][:3] == [0.0, 0.005, 0.01]
    assert batch["scenarios"][-1]["label"] == 60


def test_batch_include(tmp_path):
    (tmp_path / "al.yaml").write_text(yaml.safe_dump({"material": "aluminium", "mesh": SMALL}))
    (tmp_path / "b.yaml").write_text(yaml.safe_dump({"name": "inc", "repetitions": 1,
                                                     "scenarios": [{"include": "al.yaml", "scenario_id": "x"}]}))
    ds = build_dataset(tmp_path / "b.yaml")
    assert len(ds) == 2 and ds.labels[0] == "aluminium"


# ---- CLI ---------------------------------------------------------------------


def _sha(p):
    return hashlib.sha256(p.read_bytes()).hexdigest()


def test_cli_end_to_end(tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["--out-dir", str(out), "mesh-gen", "--divisions", "20", "2", "2", "--out", "bar"]) == 0
    assert cli.main(["--out-dir", str(out), "analyze", "--mesh", str(out / "bar"), "--material", "steel",
                     "--out", "bar.modal", "--dump-matrices", "bar"]) == 0
    assert (out / "bar_K.mtx").exists()
    assert cli.main(["--out-dir", str(out), "signal-gen", "--kind", "exponential_sweep"]) == 0
    cfg = tmp_path / "s.yaml"
    cfg.write_text(yaml.safe_dump({"scenario_id": "s", "material": "steel",
                                   "mesh": {"path": str(out / "bar")},
                                   "modal": {"path": str(out / "bar.modal")}}))
    before = _sha(cfg)
    assert cli.main(["--out-dir", str(out), "--log-json", str(out / "log.jsonl"), "synth", str(cfg)]) == 0
    assert _sha(cfg) == before
    recs = [json.loads(line) for line in (out / "log.jsonl").read_text().splitlines()]
    assert {"modal", "synthesis", "features"} <= {r.get("stage") for r in recs}
    assert cli.main(["--out-dir", str(out), "features", str(out / "s.wav"), "--smooth", "11", "--out", "f"]) == 0
    assert load_dataset(out / "f.csv").features.shape == (2, 140)


def test_cli_dataset_and_eval(tmp_path):
    batch = tmp_path / "b.yaml"
    batch.write_text(yaml.safe_dump(_batch(reps=5)))
    assert cli.main(["--out-dir", str(tmp_path), "dataset", str(batch)]) == 0
    assert cli.main(["--out-dir", str(tmp_path), "eval", str(tmp_path / "mats.csv"), "--name", "rep"]) == 0
    rep = json.loads((tmp_path / "rep.json").read_text())
    assert rep["accuracy"] >= 0.9 and rep["config_hash"]
    assert (tmp_path / "rep_confusion.csv").exists()


def test_cli_errors(tmp_path, capsys):
    assert cli.main(["--out-dir", str(tmp_path), "synth", str(tmp_path / "missing.yaml")]) == 1
    assert "modalsense synth: error: [load]" in capsys.readouterr().err
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"mesh": {"path": "nowhere.node"}}))
    assert cli.main(["--out-dir", str(tmp_path), "synth", str(bad)]) == 1
    assert "[mesh]" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        cli.main(["bogus"])
