"""Stage orchestration: generate -> reward -> calibrate -> label -> probe -> steer -> report.

Every stage writes its artifacts under the output directory and records their
SHA-256 digests in ``manifest.json`` together with a cache key built from the
config sections it reads and the digests of its upstream artifacts. A stage is
skipped when its key is unchanged and all of its artifacts still verify.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

import stepconf
from stepconf import report as reportmod
from stepconf import seeding
from stepconf.config import PipelineConfig, dump_config
from stepconf.conformal import (
    Label,
    audit_by_timestep,
    audit_error_rates,
    calibrate,
    label_many,
    p_values,
    store_from_json,
    store_to_json,
)
from stepconf.envsim import EnvConfig, EnvKind, generate_corpus, ground_truth_direction
from stepconf.errors import (
    InvalidConfig,
    MissingStage,
    StageFailure,
    StepConfError,
)
from stepconf.probes import cell_datasets, evaluate, grid_to_json, train_grid
from stepconf.reward import estimate_trajectory_rewards
from stepconf.steering import (
    CoupledAgent,
    InterventionSpec,
    closed_loop_eval,
    compute_direction,
)
from stepconf.trajectory import Split, Trajectory, iter_record_lines, read_annotations, read_records

log = logging.getLogger(__name__)

STAGES = ("generate", "reward", "calibrate", "label", "probe", "steer", "report")
EVAL_SPLITS = (Split.TEST_ID, Split.TEST_OOD)


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def _read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def load_corpus(path: Path) -> list[Trajectory]:
    with open(path, "rb") as fh:
        return read_records(fh)


# -- manifest ----------------------------------------------------------------------


@dataclass
class StageEntry:
    key: str
    artifacts: dict[str, str]
    started: float = 0.0
    finished: float = 0.0
    cached: bool = False


@dataclass
class RunManifest:
    config_digest: str
    tool_version: str = stepconf.__version__
    stages: dict[str, StageEntry] = field(default_factory=dict)

    def to_json(self) -> str:
        return _dump(
            {
                "config_digest": self.config_digest,
                "tool_version": self.tool_version,
                "stages": {
                    name: {
                        "key": e.key,
                        "artifacts": e.artifacts,
                        "started": e.started,
                        "finished": e.finished,
                        "cached": e.cached,
                    }
                    for name, e in self.stages.items()
                },
            }
        )

    @classmethod
    def from_json(cls, text: str) -> RunManifest:
        doc = json.loads(text)
        m = cls(doc["config_digest"], doc.get("tool_version", ""))
        for name, e in doc["stages"].items():
            m.stages[name] = StageEntry(e["key"], dict(e["artifacts"]), e["started"], e["finished"], e["cached"])
        return m

    def verify(self, root: Path) -> dict[str, bool]:
        """Per-artifact check that the file exists and matches its recorded digest."""
        out = {}
        for entry in self.stages.values():
            for rel, digest in entry.artifacts.items():
                p = root / rel
                out[rel] = p.is_file() and sha256_file(p) == digest
        return out


# -- pipeline -----------------------------------------------------------------------


class Pipeline:
    """Runs the stages for one config inside one output directory."""

    def __init__(self, cfg: PipelineConfig, output_dir: str | Path | None = None, force: bool = False):
        self.cfg = cfg
        self.scfg = cfg.seeded()
        self.root = Path(output_dir if output_dir is not None else cfg.output_dir)
        self.force = force
        self.manifest_path = self.root / "manifest.json"
        self.manifest = self._load_manifest()

    def _load_manifest(self) -> RunManifest:
        digest = self.cfg.digest()
        if self.manifest_path.is_file():
            try:
                m = RunManifest.from_json(self.manifest_path.read_text(encoding="utf-8"))
                m.config_digest = digest
                m.tool_version = stepconf.__version__
                return m
            except (ValueError, KeyError):
                log.warning("ignoring unreadable manifest at %s", self.manifest_path)
        return RunManifest(digest)

    # paths
    def corpus_path(self, kind: EnvKind) -> Path:
        return self.root / f"corpus-{kind.value}.jsonl"

    def rewards_path(self, kind: EnvKind) -> Path:
        return self.root / f"rewards-{kind.value}.jsonl"

    def store_path(self, kind: EnvKind) -> Path:
        return self.root / f"calibration-{kind.value}.json"

    def labels_path(self, kind: EnvKind) -> Path:
        return self.root / f"labels-{kind.value}.jsonl"

    def audit_path(self, kind: EnvKind) -> Path:
        return self.root / f"audit-{kind.value}.json"

    def probes_path(self, kind: EnvKind) -> Path:
        return self.root / f"probes-{kind.value}.json"

    def metrics_path(self, kind: EnvKind) -> Path:
        return self.root / f"probe-metrics-{kind.value}.json"

    @property
    def steering_path(self) -> Path:
        return self.root / "steering.json"

    @property
    def report_dir(self) -> Path:
        return self.root / "report"

    @property
    def kinds(self) -> list[EnvKind]:
        return [self.cfg.env.kind] if self.cfg.dataset else self.cfg.kinds

    # ------------------------------------------------------------------
    def _upstream(self, stage: str) -> dict[str, str]:
        idx = STAGES.index(stage)
        out = {}
        for prev in STAGES[:idx]:
            entry = self.manifest.stages.get(prev)
            if entry is None:
                raise MissingStage(f"stage '{stage}' needs '{prev}' to have run")
            out.update(entry.artifacts)
        return out

    _SECTIONS = {
        "generate": ("env", "rep", "profiles", "splits", "n_episodes", "n_test_id", "n_test_ood", "compare_kinds",
                     "dataset", "master_seed"),
        "reward": ("budget", "start_timestep"),
        "calibrate": ("calibration_labels", "min_per_cell"),
        "label": ("thresholds", "emit_annotated"),
        "probe": ("train", "test_labels"),
        "steer": ("steering",),
        "report": ("test_labels",),
    }

    def _key(self, stage: str) -> str:
        blob = {
            "stage": stage,
            "config": {k: v for k, v in self.cfg.to_dict().items() if k in self._SECTIONS[stage]},
            "upstream": self._upstream(stage),
        }
        if stage == "generate" and self.cfg.dataset:
            blob["dataset"] = sha256_file(self._dataset_path())
        return hashlib.sha256(json.dumps(blob, sort_keys=True).encode("utf-8")).hexdigest()

    def _dataset_path(self) -> Path:
        p = self.root / "datasets" / f"{self.cfg.dataset}.jsonl"
        if not p.is_file():
            raise MissingStage(f"dataset '{self.cfg.dataset}' has not been ingested into {self.root}")
        return p

    def _cache_hit(self, stage: str, key: str) -> bool:
        entry = self.manifest.stages.get(stage)
        if self.force or entry is None or entry.key != key:
            return False
        return all((self.root / rel).is_file() and sha256_file(self.root / rel) == d
                   for rel, d in entry.artifacts.items())

    def _save_manifest(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        _write_text(self.manifest_path, self.manifest.to_json())

    def run_stage(self, stage: str) -> StageEntry:
        fn: Callable[[], list[Path]] = getattr(self, f"_stage_{stage}")
        key = self._key(stage)
        if self._cache_hit(stage, key):
            log.info("stage %s: cached", stage)
            entry = self.manifest.stages[stage]
            entry.cached = True
            return entry
        log.info("stage %s: running", stage)
        started = time.time()
        self.root.mkdir(parents=True, exist_ok=True)
        try:
            paths = fn()
        except StepConfError as exc:
            raise StageFailure(stage, exc) from exc
        artifacts = {str(p.relative_to(self.root)): sha256_file(p) for p in sorted(paths)}
        entry = StageEntry(key, artifacts, started, time.time(), False)
        self.manifest.stages[stage] = entry
        # downstream entries may now be stale; their keys will no longer match
        self._save_manifest()
        return entry

    def run(self, until: str = "report") -> RunManifest:
        if until not in STAGES:
            raise InvalidConfig(f"unknown stage '{until}'")
        _write_text(self.root / "config.resolved.yaml", dump_config(self.cfg))
        for stage in STAGES[: STAGES.index(until) + 1]:
            self.run_stage(stage)
        self._save_manifest()
        return self.manifest

    # -- stages --------------------------------------------------------------------
    def _stage_generate(self) -> list[Path]:
        cfg = self.scfg
        if cfg.dataset:
            out = self.corpus_path(cfg.env.kind)
            corpus = load_corpus(self._dataset_path())
            _write_text(out, "".join(iter_record_lines(corpus)))
            return [out]
        paths = []
        for kind in self.kinds:
            env = cfg.env_for(kind)
            corpus = generate_corpus(env, cfg.profiles, cfg.rep, cfg.n_episodes, cfg.split_plan,
                                     id_prefix=f"{kind.value}-main")
            if cfg.n_test_id:
                corpus += generate_corpus(env, cfg.profiles, cfg.rep, cfg.n_test_id, {Split.TEST_ID: 1.0},
                                          id_prefix=f"{kind.value}-test-id", first_episode=cfg.n_episodes)
            if cfg.n_test_ood:
                corpus += generate_corpus(env, cfg.profiles, cfg.rep, cfg.n_test_ood, {Split.TEST_OOD: 1.0},
                                          id_prefix=f"{kind.value}-test-ood",
                                          first_episode=cfg.n_episodes + cfg.n_test_id)
            out = self.corpus_path(kind)
            _write_text(out, "".join(iter_record_lines(corpus)))
            paths.append(out)
        return paths

    def _env_for_traj(self, env: EnvConfig, traj: Trajectory) -> EnvConfig:
        return replace(env, vocab="shifted") if traj.task.split is Split.TEST_OOD else env

    def _stage_reward(self) -> list[Path]:
        cfg = self.scfg
        paths = []
        for kind in self.kinds:
            corpus = load_corpus(self.corpus_path(kind))
            rows = []
            if cfg.dataset:
                rows = self._recorded_rewards(kind, corpus)
            else:
                env = cfg.env_for(kind)
                for traj in corpus:
                    if traj.task.split is Split.TRAIN:
                        continue
                    profile = cfg.profiles[traj.task.policy][0]
                    budget = replace(cfg.budget, seed=seeding.derive_seed(cfg.budget.seed, traj.task.id))
                    ests = estimate_trajectory_rewards(traj, profile, self._env_for_traj(env, traj), budget,
                                                       start_timestep=cfg.start_timestep)
                    for e in ests:
                        rows.append({"task_id": traj.task.id, "t": e.t - 1, "timestep": e.t, "r_t": e.r_t,
                                     "n_samples": e.n_samples, "std_err": e.std_err,
                                     "is_final_step": e.is_final_step})
            out = self.rewards_path(kind)
            _write_text(out, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
            paths.append(out)
        return paths

    def _recorded_rewards(self, kind: EnvKind, corpus: list[Trajectory]) -> list[dict]:
        with open(self._dataset_path(), "rb") as fh:
            ann = read_annotations(fh, ["r_t"])
        rows = []
        for traj in corpus:
            if traj.task.split is Split.TRAIN:
                continue
            for step in traj.steps:
                ts = step.t + 1
                if ts < self.cfg.start_timestep:
                    continue
                r = ann.get((traj.task.id, step.t), {}).get("r_t")
                if r is None:
                    raise MissingStage(f"ingested task {traj.task.id} step {step.t} carries no r_t")
                rows.append({"task_id": traj.task.id, "t": step.t, "timestep": ts, "r_t": float(r),
                             "n_samples": 0, "std_err": 0.0, "is_final_step": step.t == len(traj) - 1})
        return rows

    def _truth(self, kind: EnvKind, corpus: list[Trajectory]) -> dict[tuple[str, int], bool]:
        """Ground-truth flag per step under the configured calibration convention."""
        threshold = self.cfg.env_for(kind).threshold
        use_oracle = self.cfg.calibration_labels == "oracle" and not self.cfg.dataset
        out = {}
        for traj in corpus:
            episode_ok = traj.finalized and traj.final_reward >= threshold
            for step in traj.steps:
                if use_oracle and step.oracle_success is not None:
                    out[(traj.task.id, step.t)] = bool(step.oracle_success)
                else:
                    out[(traj.task.id, step.t)] = episode_ok
        return out

    def _stage_calibrate(self) -> list[Path]:
        paths = []
        for kind in self.kinds:
            corpus = load_corpus(self.corpus_path(kind))
            split = {t.task.id: t.task.split for t in corpus}
            truth = self._truth(kind, corpus)
            rewards = _read_jsonl(self.rewards_path(kind))
            triples = [(r["timestep"], r["r_t"], truth[(r["task_id"], r["t"])])
                       for r in rewards if split[r["task_id"]] is Split.CALIBRATION]
            store = calibrate(triples, self.cfg.min_per_cell)
            out = self.store_path(kind)
            _write_text(out, store_to_json(store, self.cfg.thresholds))
            paths.append(out)
        return paths

    def _stage_label(self) -> list[Path]:
        thr = self.cfg.thresholds
        paths = []
        for kind in self.kinds:
            corpus = load_corpus(self.corpus_path(kind))
            by_id = {t.task.id: t for t in corpus}
            truth = self._truth(kind, corpus)
            store, _ = store_from_json(self.store_path(kind).read_text(encoding="utf-8"))
            rewards = [r for r in _read_jsonl(self.rewards_path(kind))
                       if by_id[r["task_id"]].task.split is not Split.CALIBRATION]
            rs = np.array([r["r_t"] for r in rewards], dtype=float)
            ts = np.array([r["timestep"] for r in rewards], dtype=int)
            labels = label_many(rs, ts, store, thr) if len(rewards) else []
            rows = []
            for r, lab in zip(rewards, labels):
                cell = store.cell_for(r["timestep"])
                p_s = float(p_values(np.array([1.0 - r["r_t"]]), cell.success)[0])
                p_f = float(p_values(np.array([r["r_t"]]), cell.failure)[0])
                traj = by_id[r["task_id"]]
                rows.append({
                    "task_id": r["task_id"], "t": r["t"], "timestep": r["timestep"],
                    "split": traj.task.split.value, "r_t": r["r_t"], "p_s": p_s, "p_f": p_f,
                    "label": lab.value, "truth": truth[(r["task_id"], r["t"])],
                    "oracle_success": traj.steps[r["t"]].oracle_success,
                })
            out = self.labels_path(kind)
            _write_text(out, "".join(json.dumps(row, sort_keys=True) + "\n" for row in rows))
            paths.append(out)

            heldout = [(row["timestep"], row["r_t"], row["truth"]) for row in rows
                       if row["split"] == Split.TEST_ID.value]
            audit = {
                "eps_s": thr.eps_s,
                "eps_f": thr.eps_f,
                "truth": "episode-outcome" if (self.cfg.dataset or self.cfg.calibration_labels != "oracle")
                else "oracle-step",
                "per_timestep": {str(t): a.__dict__ for t, a in audit_by_timestep(store, thr, heldout).items()},
                "pooled": audit_error_rates(store, thr, heldout).__dict__,
                "cells": sorted(store.per_timestep),
            }
            apath = self.audit_path(kind)
            _write_text(apath, _dump(audit))
            paths.append(apath)

            if self.cfg.emit_annotated:
                ann = {(r["task_id"], r["t"]): {"r_t": r["r_t"]} for r in _read_jsonl(self.rewards_path(kind))}
                for row in rows:
                    ann[(row["task_id"], row["t"])].update(p_s=row["p_s"], p_f=row["p_f"], label=row["label"])
                apath = self.root / f"annotated-{kind.value}.jsonl"
                _write_text(apath, "".join(iter_record_lines(corpus, ann)))
                paths.append(apath)
        return paths

    def _label_maps(self, kind: EnvKind):
        rows = _read_jsonl(self.labels_path(kind))
        conformal = {(r["task_id"], r["t"]): Label(r["label"]) for r in rows}
        truth = {(r["task_id"], r["t"]): bool(r["truth"]) for r in rows}
        return conformal, truth

    def _stage_probe(self) -> list[Path]:
        cfg = self.scfg
        layers = list(cfg.rep.layers)
        timesteps = list(range(cfg.start_timestep, cfg.env.horizon + 1))
        paths = []
        for kind in self.kinds:
            corpus = load_corpus(self.corpus_path(kind))
            if cfg.dataset:
                layers = sorted({layer for t in corpus for s in t.steps for layer in s.activations})
                timesteps = list(range(cfg.start_timestep, max(len(t) for t in corpus) + 1))
            conformal, truth = self._label_maps(kind)
            by_split = {s: [t for t in corpus if t.task.split is s] for s in Split}
            train_sets = cell_datasets(by_split[Split.PROBE_TRAIN], conformal, layers, timesteps)
            grid = train_grid(train_sets, cfg.train)
            metrics: dict = {"validation": {}, "test": {}}
            for key, cell in grid.items():
                metrics["validation"][f"{key.layer}:{key.timestep}"] = (
                    cell.metrics.__dict__ if cell.metrics else {"note": cell.note})
            for split in EVAL_SPLITS:
                for name, labels in (("conformal", conformal), ("oracle", truth)):
                    ev = evaluate(grid, cell_datasets(by_split[split], labels, layers, timesteps))
                    metrics["test"][f"{split.value}/{name}"] = {
                        "mean_accuracy": ev.mean_accuracy,
                        "mean_f1": ev.mean_f1,
                        "cells": {f"{k.layer}:{k.timestep}": (m.__dict__ if m else {"note": ev.notes.get(k, "")})
                                  for k, m in ev.cells.items()},
                    }
            metrics["layers"] = layers
            metrics["timesteps"] = timesteps
            ppath, mpath = self.probes_path(kind), self.metrics_path(kind)
            _write_text(ppath, grid_to_json(grid, cfg.train))
            _write_text(mpath, _dump(metrics))
            paths += [ppath, mpath]
        return paths

    def _steer_layer(self, kind: EnvKind) -> int:
        st = self.cfg.steering
        if st.layer is not None:
            return st.layer
        metrics = json.loads(self.metrics_path(kind).read_text(encoding="utf-8"))
        t0 = min(st.timesteps)
        best, best_acc = None, -1.0
        for layer in metrics["layers"]:
            m = metrics["validation"].get(f"{layer}:{t0}", {})
            acc = m.get("accuracy", -1.0)
            if acc > best_acc:
                best, best_acc = layer, acc
        if best is None or best_acc < 0:
            return metrics["layers"][len(metrics["layers"]) // 2]
        return best

    def _stage_steer(self) -> list[Path]:
        cfg = self.scfg
        st = cfg.steering
        kind = cfg.env.kind
        layer = self._steer_layer(kind)
        corpus = load_corpus(self.corpus_path(kind))
        conformal, _ = self._label_maps(kind)
        succ, fail = [], []
        for traj in corpus:
            if traj.task.split is not Split.PROBE_TRAIN:
                continue
            for step in traj.steps:
                lab = conformal.get((traj.task.id, step.t))
                if lab is None or lab is Label.ABSTAIN or layer not in step.activations:
                    continue
                (succ if lab is Label.SUCCESS else fail).append(step.activations[layer])
        vec = compute_direction(succ, fail, layer, st.min_per_class)
        doc = {
            "vector": json.loads(vec.to_json(self.manifest.stages["probe"].key)),
            "spec": {"layer": layer, "timesteps": sorted(st.timesteps), "coefficient": st.coefficient},
            "layer_choice": "configured" if st.layer is not None else "best-validation-probe",
        }
        if cfg.dataset:
            doc["closed_loop"] = None
        else:
            doc["cosine_to_ground_truth"] = float(vec.d @ ground_truth_direction(cfg.rep, layer))
            agent = CoupledAgent(cfg.rep, layer, st.hazard_bias, st.hazard_slope,
                                 None if st.susceptible is None else frozenset(st.susceptible))
            spec = InterventionSpec(layer, frozenset(st.timesteps), st.coefficient)
            res = closed_loop_eval(cfg.env, agent, spec, vec, st.n_episodes,
                                   seeding.derive_seed(cfg.master_seed, "steer"))
            doc["closed_loop"] = {
                "n_episodes": res.n_episodes,
                "baseline_success": res.baseline_success,
                "steered_success": res.steered_success,
                "lift": res.lift,
                "ci95": list(res.ci95),
            }
        out = self.steering_path
        _write_text(out, _dump(doc))
        return [out]

    def _stage_report(self) -> list[Path]:
        files = reportmod.build_report(self)
        if self.report_dir.exists():
            shutil.rmtree(self.report_dir)
        out = []
        for name, text in sorted(files.items()):
            p = self.report_dir / name
            _write_text(p, text)
            out.append(p)
        return out


def run(cfg: PipelineConfig, output_dir: str | Path | None = None, force: bool = False,
        until: str = "report") -> RunManifest:
    return Pipeline(cfg, output_dir, force).run(until)


# -- ingestion ------------------------------------------------------------------------


def summarize_corpus(corpus: list[Trajectory]) -> dict:
    dims: dict[int, int] = {}
    for traj in corpus:
        for step in traj.steps:
            for layer, vec in step.activations.items():
                dims.setdefault(layer, len(vec))
    return {
        "episodes": len(corpus),
        "steps": sum(len(t) for t in corpus),
        "splits": dict(sorted(Counter(t.task.split.value for t in corpus).items())),
        "activation_dims": {f"L{k}": v for k, v in sorted(dims.items())},
        "finalized": sum(t.finalized for t in corpus),
        "with_final_reward": sum(t.final_reward is not None for t in corpus),
    }


def ingest(path: str | Path, output_dir: str | Path, name: str | None = None) -> dict:
    """Validate a record file and register it as ``datasets/<name>.jsonl``."""
    src = Path(path)
    with open(src, "rb") as fh:
        corpus = read_records(fh)
    with open(src, "rb") as fh:
        n_rt = sum(1 for line in fh if line.strip() and '"r_t"' in line.decode("utf-8"))
    name = name or src.stem
    dest = Path(output_dir) / "datasets" / f"{name}.jsonl"
    dest.parent.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(src, dest)
    summary = {"dataset": name, **summarize_corpus(corpus), "steps_with_r_t": n_rt}
    _write_text(dest.with_suffix(".summary.json"), _dump(summary))
    return summary


__all__ = [
    "Pipeline",
    "RunManifest",
    "STAGES",
    "ingest",
    "run",
    "summarize_corpus",
]
