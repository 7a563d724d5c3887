"""Scenario configs, the end-to-end simulation run and batch dataset building.

Scenarios are YAML mappings. Every key is optional; missing keys are filled
from :data:`DEFAULTS` and listed in the run metadata. A minimal scenario::

    scenario_id: al_bar
    material: aluminium
    excitation: {kind: impulse}

Batches list scenarios (inline or ``include:`` paths relative to the batch
file) plus repetition count, seeded jitter and optional noise.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import contact as ct
from . import signal as sg
from .fem import MaterialParams, assemble, material as lookup_material
from .mesh import TetMesh, generate_bar, generate_tube, load_mesh
from .ml import Dataset, save_dataset_csv, save_dataset_jsonl
from .modal import ModalModel, load_modal_model, modal_analysis
from .synth import (Waveform, add_noise, export_wav, import_wav, superimpose_leak, synthesize,
                    synthesize_coupled)

logger = logging.getLogger(__name__)

BAR_DEFAULTS = {"primitive": "bar", "length": 0.2, "width": 0.02, "height": 0.02, "divisions": [40, 2, 2]}
TUBE_DEFAULTS = {"primitive": "tube", "length": 0.2, "outer_radius": 0.015, "inner_radius": 0.010,
                 "divisions": [40, 1, 16]}

DEFAULTS = {
    "scenario_id": "scenario",
    "label": None,
    "mesh": BAR_DEFAULTS,
    "material": "aluminium",
    "modal": {"f_floor": 20.0, "f_ceil": 20000.0, "r_max": 256, "method": "auto", "path": None},
    "excitation": {"kind": "impulse", "f0": 20.0, "f1": 10000.0, "duration": None, "loop_period": 0.5,
                   "sample_rate": 44100},
    "duration": 1.0,
    "grasp": {"position": 0.0, "offset": 0.0, "f_grip": 40.0, "left": None, "right": None},
    "environment": [],
    "contact_stream": None,
    "contact_dynamics": {"m_o": None, "m_lf": 0.02, "m_rf": 0.02, "k_of": 1e6, "k_fe": 1e5, "k_oe": 1e6,
                         "b_of": 50.0, "b_fe": 20.0, "b_oe": 50.0, "f_ext": 0.0, "vib_gain": 5.0,
                         "env_contact": None},
    "synthesis": {"output": "displacement", "coupled": False, "preload": True},
    "leak": None,
    "noise": {"sigma": 0.0, "snr_db": None},
    "features": {"window": 0.5, "take_first": 1.0, "taper": "rect", "average": False},
    "seed": 0,
}


class PipelineError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@contextmanager
def stage(name, diagnostics=None):
    t0 = time.perf_counter()
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(name, f"{type(exc).__name__}: {exc}") from exc
    logger.info("stage %s done in %.3f s", name, time.perf_counter() - t0,
                extra={"stage": name, "elapsed_s": time.perf_counter() - t0, **(diagnostics or {})})


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def load_yaml(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    return doc or {}


def _merge(defaults, given, prefix, filled):
    if not isinstance(defaults, dict) or not isinstance(given, dict):
        return copy.deepcopy(given)
    out = {}
    for key, dval in defaults.items():
        if key in given:
            out[key] = _merge(dval, given[key], f"{prefix}{key}.", filled) if isinstance(dval, dict) else copy.deepcopy(given[key])
        else:
            out[key] = copy.deepcopy(dval)
            filled.append(prefix + key)
    for key in given:
        if key not in defaults:
            out[key] = copy.deepcopy(given[key])
    return out


def resolve_scenario(raw: dict, base_dir=None) -> tuple[dict, list]:
    """Fill defaults; returns the complete scenario and the dotted keys that were defaulted."""
    raw = dict(raw or {})
    filled = []
    mesh = raw.get("mesh") or {}
    if isinstance(mesh, str):
        mesh = {"path": mesh}
    if "path" in mesh:
        mesh_defaults = {"path": None, "format": None, "scale": None}
    else:
        mesh_defaults = TUBE_DEFAULTS if mesh.get("primitive") == "tube" else BAR_DEFAULTS
    defaults = {**DEFAULTS, "mesh": mesh_defaults}
    cfg = _merge(defaults, {**raw, "mesh": mesh} if raw.get("mesh") is not None else raw, "", filled)
    if base_dir is not None:
        for holder, key in ((cfg["mesh"], "path"), (cfg, "contact_stream"), (cfg["modal"], "path")):
            if holder.get(key):
                holder[key] = str((Path(base_dir) / holder[key]).resolve()) if not Path(holder[key]).is_absolute() else holder[key]
        if cfg["leak"] and cfg["leak"].get("path") and not Path(cfg["leak"]["path"]).is_absolute():
            cfg["leak"]["path"] = str((Path(base_dir) / cfg["leak"]["path"]).resolve())
    return cfg, filled


def build_material(spec) -> MaterialParams:
    if isinstance(spec, str):
        return lookup_material(spec)
    spec = dict(spec)
    base = spec.pop("base", None)
    if base:
        return lookup_material(base).replace(**spec)
    return MaterialParams(**spec)


def build_mesh(spec) -> TetMesh:
    if spec.get("path"):
        if not Path(spec["path"]).exists() and not Path(spec["path"]).with_suffix(".node").exists():
            raise FileNotFoundError(f"mesh file {spec['path']} does not exist")
        return load_mesh(spec["path"], spec.get("format"), spec.get("scale"))
    kind = spec.get("primitive", "bar")
    if kind == "bar":
        return generate_bar(spec["length"], spec["width"], spec["height"], spec["divisions"])
    if kind == "tube":
        return generate_tube(spec["length"], spec["outer_radius"], spec["inner_radius"], spec["divisions"])
    raise ValueError(f"unknown mesh primitive {kind!r}")


def _model_key(cfg):
    return config_hash({"mesh": cfg["mesh"], "material": cfg["material"], "modal": cfg["modal"]})


class ModelCache:
    """Meshes and modal models shared across scenarios of one process."""

    def __init__(self):
        self._meshes, self._models = {}, {}

    def mesh(self, cfg) -> TetMesh:
        key = config_hash(cfg["mesh"])
        if key not in self._meshes:
            self._meshes[key] = build_mesh(cfg["mesh"])
        return self._meshes[key]

    def model(self, cfg, mesh, mat) -> ModalModel:
        key = _model_key(cfg)
        if key not in self._models:
            m = cfg["modal"]
            if m.get("path"):
                model = load_modal_model(m["path"], mesh=mesh)
            else:
                model = modal_analysis(assemble(mesh, mat), mat, mesh.content_hash, m["f_floor"], m["f_ceil"],
                                       int(m["r_max"]), m.get("method", "auto"))
            self._models[key] = model
        return self._models[key]


def _grasp_points(cfg, mesh):
    lo, hi = mesh.bounds
    centre = 0.5 * (lo + hi)
    g = cfg["grasp"]
    x = centre[0] + float(g["position"])
    z = centre[2] + float(g.get("offset") or 0.0)
    left = g.get("left") or {"point": [x, lo[1], z], "normal": [0.0, 1.0, 0.0]}
    right = g.get("right") or {"point": [x, hi[1], z], "normal": [0.0, -1.0, 0.0]}
    return left, right


def _check_inside(mesh, points):
    lo, hi = mesh.bounds
    for name, p in points:
        p = np.asarray(p, dtype=float)
        if np.any(p < lo - 1e-3) or np.any(p > hi + 1e-3):
            raise ValueError(f"{name} contact point {p.tolist()} lies outside the mesh bounding box (+1 mm)")


@dataclass
class ScenarioResult:
    waveform: Waveform
    features: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def simulate(cfg: dict, cache: ModelCache | None = None, rng=None) -> ScenarioResult:
    """Run one resolved scenario in memory."""
    cache = cache or ModelCache()
    rng = rng if rng is not None else np.random.default_rng(cfg["seed"])
    diag = {}
    with stage("mesh"):
        mesh = cache.mesh(cfg)
    diag["mesh"] = {"vertices": mesh.n, "tets": len(mesh.tets), "hash": mesh.content_hash}
    with stage("material"):
        mat = build_material(cfg["material"])
    with stage("modal"):
        model = cache.model(cfg, mesh, mat)
    diag["modal"] = {"modes": model.r, "f_min_hz": float(model.natural_freqs[0]),
                     "f_max_hz": float(model.natural_freqs[-1]),
                     **{k: v for k, v in model.info.items() if k in ("method", "regularization", "below_floor")}}

    with stage("contacts"):
        left, right = _grasp_points(cfg, mesh)
        f_grip = float(cfg["grasp"]["f_grip"])
        impulses = []
        if cfg["contact_stream"]:
            events = ct.load_contact_stream(cfg["contact_stream"])
            sustained = [e for e in events if e.persistence == "sustained"]
            active = ct.active_contacts(events, sustained[0].t) if sustained else []
            impulses = [(e.t, e.point, e.normal, e.force) for e in events if e.persistence == "impulsive"]
            for e in active:
                if e.source == "grip_left":
                    left = {"point": list(e.point), "normal": list(e.normal)}
                elif e.source == "grip_right":
                    right = {"point": list(e.point), "normal": list(e.normal)}
        else:
            active = [ct.ContactEvent.make(0.0, left["point"], left["normal"], f_grip, "grip_left"),
                      ct.ContactEvent.make(0.0, right["point"], right["normal"], f_grip, "grip_right")]
            active += [ct.ContactEvent.make(0.0, e["point"], e["normal"], e["force"], "environment")
                       for e in cfg["environment"]]
        _check_inside(mesh, [("left", left["point"]), ("right", right["point"])]
                      + [(e.source, e.point) for e in active])
        G = ct.contact_damping(model, mesh, active, mat.friction)
        C_m = ct.total_modal_damping(model, mat, G)
    diag["contacts"] = {"active": len(active), "impulsive": len(impulses)}

    with stage("excitation"):
        ex = sg.ExcitationSpec(**cfg["excitation"])
        excitation = sg.generate_excitation(ex, max(cfg["duration"], ex.loop_period))
        cd = dict(cfg["contact_dynamics"])
        if cd["m_o"] is None:
            cd["m_o"] = mesh.volume * mat.density
        if cd["env_contact"] is None:
            cd["env_contact"] = any(e.source == "environment" for e in active)
        dyn = ct.ContactDynamicsConfig(f_grip=f_grip, **cd)
        fc = ct.excitation_impulses(dyn, excitation, 1.0 / ex.sample_rate, preload=cfg["synthesis"]["preload"])
        # the grasp is established before recording: only the fluctuation drives the modes
        drive = fc - (dyn.static_force if cfg["synthesis"]["preload"] else 0.0)
    diag["excitation"] = {"m_o": cd["m_o"], "fc_min": float(fc.min()), "fc_max": float(fc.max())}

    with stage("synthesis"):
        force = Waveform(drive, ex.sample_rate)
        s = cfg["synthesis"]
        if s["coupled"]:
            w = synthesize_coupled(model, mesh, C_m, force, left["point"], right["point"],
                                   left["normal"], right["normal"], output=s["output"])
        else:
            w = synthesize(model, mesh, np.diag(C_m).copy(), force, left["point"], right["point"],
                           left["normal"], right["normal"], duration=cfg["duration"], impulses=impulses,
                           output=s["output"])
        if cfg["leak"] and cfg["leak"].get("path"):
            w = superimpose_leak(w, import_wav(cfg["leak"]["path"]), float(cfg["leak"].get("gain", 1.0)))
        n = cfg["noise"]
        w = add_noise(w, rng, sigma=n.get("sigma"), snr_db=n.get("snr_db"))
    diag["synthesis"] = {"rms": float(np.sqrt(np.mean(w.samples**2)))}

    with stage("features"):
        f = cfg["features"]
        rows = sg.features_from_recording(w, f["window"], f["take_first"], f["taper"], f["average"])
    return ScenarioResult(w, rows, diag)


def _write_feature_files(stem: Path, rows, band, label, scenario_id, chash, group):
    ds = Dataset(rows, [label] * len(rows), [group] * len(rows), band, [chash] * len(rows),
                 [scenario_id] * len(rows))
    return save_dataset_csv(ds, f"{stem}.features.csv"), save_dataset_jsonl(ds, f"{stem}.features.jsonl")


def run_pipeline(config, out_dir, seed: int | None = None) -> dict:
    """Simulate one scenario and write WAV, sidecar, feature rows and run metadata.

    ``config`` is a scenario mapping or a YAML path. Returns the metadata
    dict, which includes the output paths.
    """
    base = None
    if isinstance(config, (str, Path)):
        base = Path(config).parent
        with stage("load"):
            config = load_yaml(config)
    raw = dict(config)
    if seed is not None:
        raw["seed"] = seed
    with stage("config"):
        cfg, filled = resolve_scenario(raw, base)
    chash = config_hash(cfg)
    res = simulate(cfg, rng=np.random.default_rng(cfg["seed"]))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sid = cfg["scenario_id"]
    with stage("write"):
        wav, meta = export_wav(res.waveform, out / f"{sid}.wav", scenario_id=sid, config_hash=chash,
                               model_hash=res.diagnostics["mesh"]["hash"])
        label = cfg["label"] if cfg["label"] is not None else (cfg["material"] if isinstance(cfg["material"], str) else "custom")
        csv_path, jsonl_path = _write_feature_files(out / sid, res.features, sg.band_frequencies(), label, sid,
                                                    chash, f"{sid}:0")
        doc = {"scenario_id": sid, "config_hash": chash, "config": cfg, "defaults_filled": filled,
               "diagnostics": res.diagnostics,
               "outputs": {"wav": wav.name, "meta": meta.name, "features_csv": csv_path.name,
                           "features_jsonl": jsonl_path.name}}
        run_path = out / f"{sid}.run.json"
        run_path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    doc["paths"] = {"wav": wav, "meta": meta, "features_csv": csv_path, "features_jsonl": jsonl_path, "run": run_path}
    return doc


# --------------------------------------------------------------------------
# batches
# --------------------------------------------------------------------------


def grasp_position_batch(material: str = "aluminium", positions: int = 13, spacing_mm: float = 5.0,
                         repetitions: int = 5, base: dict | None = None, **batch) -> dict:
    """Batch for grasp-position regression: evenly spaced grasps from the centre along the long axis."""
    base = dict(base or {})
    base.setdefault("material", material)
    scenarios = []
    for i in range(positions):
        mm = i * spacing_mm
        sc = copy.deepcopy(base)
        sc["scenario_id"] = f"pos_{mm:g}mm"
        sc["label"] = mm
        sc.setdefault("grasp", {})
        sc["grasp"] = {**sc["grasp"], "position": mm / 1000.0}
        scenarios.append(sc)
    return {"name": f"grasp_position_{material}", "task": "regress", "repetitions": repetitions,
            "jitter": {"grasp_mm": 0.0, "grip_force_pct": 0.0}, **batch, "scenarios": scenarios}


def _jittered(cfg, jitter, rng):
    cfg = copy.deepcopy(cfg)
    g = cfg["grasp"]
    mm = float(jitter.get("grasp_mm", 0.0)) / 1000.0
    dx, dz = rng.uniform(-mm, mm, 2) if mm > 0 else (0.0, 0.0)
    g["position"] = float(g["position"]) + float(dx)
    g["offset"] = float(g.get("offset") or 0.0) + float(dz)
    for side in ("left", "right"):
        if g.get(side):
            g[side] = {**g[side], "point": (np.asarray(g[side]["point"], float) + [dx, 0.0, dz]).tolist()}
    pct = float(jitter.get("grip_force_pct", 0.0))
    if pct > 0:
        g["f_grip"] = float(g["f_grip"]) * (1.0 + rng.uniform(-pct, pct) / 100.0)
    return cfg


def _run_rep(args):
    cfg, jitter, noise, seed, si, rep, mesh, model = args
    rng = np.random.default_rng([seed, si, rep])
    cfg = _jittered(cfg, jitter, rng)
    if noise:
        cfg["noise"] = {**cfg["noise"], **noise}
    cache = ModelCache()
    cache._meshes[config_hash(cfg["mesh"])] = mesh
    cache._models[_model_key(cfg)] = model
    return simulate(cfg, cache, rng).features


def resolve_batch(batch, base_dir=None):
    scenarios = []
    for i, entry in enumerate(batch.get("scenarios", [])):
        entry = dict(entry)
        sdir = base_dir
        if "include" in entry:
            inc = Path(entry.pop("include"))
            inc = inc if inc.is_absolute() or base_dir is None else Path(base_dir) / inc
            entry = {**load_yaml(inc), **entry}
            sdir = inc.parent
        entry.setdefault("scenario_id", f"s{i}")
        cfg, _ = resolve_scenario(entry, sdir)
        scenarios.append(cfg)
    return scenarios


def build_dataset(batch, out_dir=None, seed: int | None = None, threads: int = 1, task: str | None = None) -> Dataset:
    """Simulate every scenario ``repetitions`` times and collect labelled feature rows.

    Jitter and noise draws come from ``default_rng([seed, scenario, rep])``,
    so the result does not depend on ``threads``.
    """
    base = None
    if isinstance(batch, (str, Path)):
        base = Path(batch).parent
        batch = load_yaml(batch)
    batch = dict(batch)
    seed = int(batch.get("seed", 0) if seed is None else seed)
    reps = int(batch.get("repetitions", 1))
    jitter = batch.get("jitter") or {}
    noise = batch.get("noise") or {}
    task = task or batch.get("task", "classify")
    scenarios = resolve_batch(batch, base)
    if not scenarios:
        raise PipelineError("config", "batch has no scenarios")
    chash = config_hash({"scenarios": scenarios, "repetitions": reps, "jitter": jitter, "noise": noise,
                         "seed": seed, "task": task})
    cache = ModelCache()
    jobs = []
    for si, cfg in enumerate(scenarios):
        with stage("mesh"):
            mesh = cache.mesh(cfg)
        with stage("modal"):
            model = cache.model(cfg, mesh, build_material(cfg["material"]))
        jobs += [(cfg, jitter, noise, seed, si, rep, mesh, model) for rep in range(reps)]
    t0 = time.perf_counter()
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_rep, jobs))
    else:
        results = [_run_rep(j) for j in jobs]
    logger.info("simulated %d recordings in %.2f s", len(jobs), time.perf_counter() - t0,
                extra={"stage": "dataset", "recordings": len(jobs)})
    feats, labels, groups, scen = [], [], [], []
    for (cfg, *_rest), rows in zip(jobs, results):
        si, rep = _rest[3], _rest[4]
        label = cfg["label"]
        if label is None:
            label = cfg["material"] if isinstance(cfg["material"], str) else cfg["scenario_id"]
        for row in rows:
            feats.append(row)
            labels.append(label)
            groups.append(f"{si}:{rep}")
            scen.append(cfg["scenario_id"])
    labels = np.array(labels, dtype=np.float64) if task == "regress" else np.array([str(x) for x in labels])
    ds = Dataset(np.array(feats), labels, np.array(groups), sg.band_frequencies(), np.array([chash] * len(feats)),
                 np.array(scen))
    if out_dir is not None:
        out = Path(out_dir)
        name = batch.get("name", "dataset")
        save_dataset_csv(ds, out / f"{name}.csv")
        save_dataset_jsonl(ds, out / f"{name}.jsonl")
        meta = {"name": name, "task": task, "config_hash": chash, "rows": len(ds), "recordings": len(jobs),
                "seed": seed, "repetitions": reps, "jitter": jitter, "noise": noise,
                "scenarios": [c["scenario_id"] for c in scenarios]}
        (out / f"{name}.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return ds
