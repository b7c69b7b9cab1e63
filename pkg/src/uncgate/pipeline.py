"""Stage orchestration and on-disk layout.

A run directory looks like::

    <out>/effective_config.yaml
    <out>/data/manifest.json, data/{train,val,test}/*.json
    <out>/mapper/checkpoint.npz, mapper/loss_curve.csv
    <out>/predictor-base/...   <out>/predictor-unc/...   <out>/gate/...
    <out>/eval/report.csv, report.json, scenes.jsonl, gate_summary.json, svg/
    <out>/ablate/ablation.csv, ablation.json
    <out>/run_meta.json        wall-clock timings, the only non-deterministic file

Each stage reads its upstream artifacts from disk, so stages can run in
separate processes.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import time
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .config import RunConfig
from .errors import MissingCheckpoint, MissingUpstream
from .gating import fuse_trajectories, gate_weights, save_gate, targets_for, train_gate
from .kinematics import N_BINS
from .mapper import (VertexBatch, covariance_world, evaluate_nll, mapper_forward, save_mapper,
                     train_mapper)
from .metrics import REPORT_SCHEMA_VERSION, binned_report, read_scene_log, report_csv, report_json, scene_log_line, scene_metrics
from .predictor import (STREAMS, evaluate_min_ade, predict_stream, prepare_inputs, save_predictor,
                        train_predictor)
from .render import scene_svg
from .scenegen import BenchmarkConfig, benchmark_scenes, generate_benchmark, load_manifest, load_split

TRAIN_STAGES = ("mapper", "predictor-base", "predictor-unc", "gate")
UPSTREAM = {"mapper": (), "predictor-base": ("mapper",), "predictor-unc": ("mapper",),
            "gate": ("mapper", "predictor-base", "predictor-unc")}


class Pipeline:
    def __init__(self, cfg: RunConfig, out):
        self.cfg = cfg
        self.out = Path(out)
        self._splits: dict[str, list] = {}
        self._inputs: dict[str, list] = {}
        self._params: dict[str, dc.Params] = {}

    # -- paths -----------------------------------------------------------

    @property
    def data_dir(self) -> Path:
        return self.out / "data"

    def checkpoint(self, stage: str) -> Path:
        return self.out / stage / "checkpoint.npz"

    def _write(self, path: Path, text: str):
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)

    def _record_time(self, stage: str, seconds: float):
        path = self.out / "run_meta.json"
        meta = json.loads(path.read_text()) if path.exists() else {}
        meta[stage] = {"seconds": round(seconds, 3), "finished_unix": round(time.time(), 3)}
        self._write(path, json.dumps(meta, indent=1, sort_keys=True) + "\n")

    def write_effective_config(self):
        self._write(self.out / "effective_config.yaml", self.cfg.effective_yaml())

    # -- upstream loading --------------------------------------------------

    def scenes(self, split: str):
        if split not in self._splits:
            if not (self.data_dir / "manifest.json").exists():
                raise MissingUpstream(f"no dataset under {self.data_dir}; run 'generate' first")
            self._splits[split] = load_split(self.data_dir, split)
        return self._splits[split]

    def params(self, stage: str) -> dc.Params:
        if stage not in self._params:
            path = self.checkpoint(stage)
            if not path.exists():
                raise MissingCheckpoint(f"stage {stage!r} has no checkpoint at {path}")
            self._params[stage] = dc.load_checkpoint(path)[0]
        return self._params[stage]

    def inputs(self, split: str):
        if split not in self._inputs:
            mp = self.params("mapper")
            self._inputs[split] = [prepare_inputs(s, mp, self.cfg.mapper.loss_kind) for s in self.scenes(split)]
        return self._inputs[split]

    def _require(self, stage: str):
        for up in UPSTREAM[stage]:
            if not self.checkpoint(up).exists():
                raise MissingUpstream(f"stage {stage!r} needs {up!r}; train it first")
        if not (self.data_dir / "manifest.json").exists():
            raise MissingUpstream(f"no dataset under {self.data_dir}; run 'generate' first")

    # -- stages ------------------------------------------------------------

    def generate(self) -> dict:
        t0 = time.perf_counter()
        self.write_effective_config()
        manifest = generate_benchmark(self.cfg.benchmark, self.data_dir)
        self._splits.clear()
        self._record_time("generate", time.perf_counter() - t0)
        return manifest

    def train(self, stage: str):
        if stage not in TRAIN_STAGES:
            raise ValueError(f"unknown stage {stage!r}; expected one of {TRAIN_STAGES}")
        self._require(stage)
        t0 = time.perf_counter()
        self.write_effective_config()
        d = self.out / stage
        d.mkdir(parents=True, exist_ok=True)
        if stage == "mapper":
            res = train_mapper(VertexBatch.from_scenes(self.scenes("train")),
                               VertexBatch.from_scenes(self.scenes("val")), self.cfg.mapper)
            save_mapper(self.checkpoint(stage), res, self.cfg.mapper)
            self._inputs.clear()
        elif stage.startswith("predictor-"):
            stream = stage.split("-", 1)[1]
            res = train_predictor(stream, self.inputs("train"), self.inputs("val"), self.cfg.predictor)
            save_predictor(self.checkpoint(stage), stream, res, self.cfg.predictor.arch)
        else:
            x_tr, y_tr = self._gate_data("train")
            x_va, y_va = self._gate_data("val")
            res = train_gate(x_tr, y_tr, x_va, y_va, self.cfg.gate)
            save_gate(self.checkpoint(stage), res, self.cfg.gate)
        res.write_curve(d / "loss_curve.csv")
        self._params.pop(stage, None)
        self._record_time(stage, time.perf_counter() - t0)
        return res

    def train_all(self):
        return {stage: self.train(stage) for stage in TRAIN_STAGES}

    def _gate_data(self, split: str):
        data = self.inputs(split)
        arch = self.cfg.predictor.arch
        embs, errs = [], []
        for stream in STREAMS:
            p = self.params(f"predictor-{stream}")
            _, emb = predict_stream(stream, p, data, arch)
            embs.append(emb)
            errs.append(evaluate_min_ade(stream, p, data, arch))
        return np.concatenate(embs, axis=1), targets_for(errs[0], errs[1], self.cfg.gate)

    def evaluate(self, streams=None, svg_scenes=None, split: str = "test"):
        """Per-scene metrics for the requested streams, binned report, logs and renders."""
        streams = tuple(streams or self.cfg.eval.streams)
        svg_scenes = self.cfg.eval.svg_scenes if svg_scenes is None else svg_scenes
        t0 = time.perf_counter()
        need = {f"predictor-{s}" for s in STREAMS if s in streams or "gated" in streams}
        if "gated" in streams:
            need.add("gate")
        for stage in ["mapper", *sorted(need)]:
            if not self.checkpoint(stage).exists():
                raise MissingCheckpoint(f"eval of {streams} needs the {stage!r} checkpoint")
        scenes, data = self.scenes(split), self.inputs(split)
        arch = self.cfg.predictor.arch
        cands, embs = {}, {}
        for stream in STREAMS:
            if f"predictor-{stream}" in need:
                cands[stream], embs[stream] = predict_stream(stream, self.params(f"predictor-{stream}"), data, arch)
        weights = None
        if "gate" in need:
            _, weights = gate_weights(self.params("gate"), embs["base"], embs["unc"], self.cfg.gate.temperature)
            cands["gated"] = fuse_trajectories(cands["base"], cands["unc"], weights, self.cfg.eval.fusion)

        per_scene, lines = [], []
        for i, s in enumerate(scenes):
            extra = {}
            if weights is not None:
                extra = {"w_base": float(weights[i, 0]), "w_unc": float(weights[i, 1])}
            for tag in streams:
                m = scene_metrics(s.id, tag, cands[tag][i], s.future_gt, s.delta_theta_gt, s.bin)
                per_scene.append(m)
                lines.append(scene_log_line(m, **extra))
        rows = binned_report(per_scene)
        ev = self.out / "eval"
        self._write(ev / "report.csv", report_csv(rows))
        self._write(ev / "report.json", report_json(rows))
        self._write(ev / "scenes.jsonl", "\n".join(lines) + "\n")
        if weights is not None:
            self._write(ev / "gate_summary.json", json.dumps(gate_summary(scenes, weights), indent=1,
                                                             sort_keys=True) + "\n")
        if svg_scenes:
            mp = self.params("mapper")
            for i, s in enumerate(scenes[:svg_scenes]):
                obs, _, ctx, _ = s.vertices()
                mu, cp = mapper_forward(mp, obs, ctx)
                cov = covariance_world(cp, self.cfg.mapper.loss_kind)
                self._write(ev / "svg" / f"{s.id}.svg",
                            scene_svg(s, mu, cov, {t: cands[t][i] for t in streams}))
        self._record_time("eval", time.perf_counter() - t0)
        return rows

    def report(self):
        """Recompute the binned report from the per-scene log alone."""
        path = self.out / "eval" / "scenes.jsonl"
        if not path.exists():
            raise MissingUpstream(f"no per-scene log at {path}; run 'eval' first")
        rows = binned_report(read_scene_log(path.read_text().splitlines()))
        self._write(self.out / "eval" / "report.csv", report_csv(rows))
        self._write(self.out / "eval" / "report.json", report_json(rows))
        return rows

    def ablate(self):
        """Mapper loss-family ablation: mapper + predictor-unc per variant and seed."""
        t0 = time.perf_counter()
        acfg = self.cfg.ablate
        rows = []
        for seed in acfg.seeds:
            c = self.cfg.with_seed(seed)
            bench = dataclasses.replace(c.benchmark, **acfg.benchmark)
            splits = {"train": [], "val": [], "test": []}
            for split, scene in benchmark_scenes(bench):
                splits[split].append(scene)
            batches = {k: VertexBatch.from_scenes(v) for k, v in splits.items()}
            for variant in acfg.variants:
                mcfg = dataclasses.replace(c.mapper, loss_kind=variant)
                mres = train_mapper(batches["train"], batches["val"], mcfg)
                held_out = evaluate_nll(mres.params, batches["test"], variant)
                data = {k: [prepare_inputs(s, mres.params, variant) for s in v] for k, v in splits.items()}
                pres = train_predictor("unc", data["train"], data["val"], c.predictor)
                world, _ = predict_stream("unc", pres.params, data["test"], c.predictor.arch)
                ms = [scene_metrics(s.id, "unc", w, s.future_gt, s.delta_theta_gt, s.bin)
                      for s, w in zip(splits["test"], world)]
                rows.append({"variant": variant, "seed": seed, "mapper_nll": held_out,
                             "minADE": float(np.mean([m.min_ade for m in ms])),
                             "minFDE": float(np.mean([m.min_fde for m in ms])),
                             "MR": 100.0 * float(np.mean([m.missed for m in ms]))})
        table = ablation_table(rows, acfg.variants)
        d = self.out / "ablate"
        self._write(d / "ablation.csv", ablation_csv(table))
        self._write(d / "ablation.json", json.dumps({"schema_version": REPORT_SCHEMA_VERSION, "rows": table, "notes": ABLATION_NOTES}, indent=1,
                                                    sort_keys=True) + "\n")
        self._record_time("ablate", time.perf_counter() - t0)
        return table


ABLATION_NOTES = ("Bivariate Laplace with covariance is not included: its density form is not "
                  "specified, and the standard multivariate Laplace needs Bessel functions.")
ABLATION_COLUMNS = ("variant", "seed", "mapper_nll", "minADE", "minFDE", "MR")


def ablation_table(rows, variants) -> list[dict]:
    """Per-seed rows followed by ``mean`` and ``std`` rows for every variant."""
    out = list(rows)
    for v in variants:
        sub = [r for r in rows if r["variant"] == v]
        for stat, fn in (("mean", np.mean), ("std", np.std)):
            out.append({"variant": v, "seed": stat,
                        **{k: float(fn([r[k] for r in sub])) for k in ABLATION_COLUMNS[2:]}})
    return out


def ablation_csv(table) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for r in table:
        w.writerow([r["variant"], r["seed"], *(f"{r[k]:.4f}" for k in ABLATION_COLUMNS[2:])])
    return buf.getvalue()


def gate_summary(scenes, weights) -> dict:
    """Mean gate weights per heading-change bin and for steady vs changing scenes."""
    bins = np.array([s.bin for s in scenes])
    w = np.asarray(weights)

    def mean(mask):
        return float(w[mask, 0].mean()) if mask.any() else None

    return {"w_base_by_bin": [mean(bins == b) for b in range(N_BINS)],
            "w_base_steady": mean(bins == 0), "w_base_changing": mean(bins >= 1),
            "n_steady": int((bins == 0).sum()), "n_changing": int((bins >= 1).sum())}


def smoke_config(cfg: RunConfig) -> RunConfig:
    """32 scenes and short schedules: exercises every stage in well under a minute."""
    c = dataclasses.replace(cfg)
    c.benchmark = dataclasses.replace(cfg.benchmark, n_train=20, n_val=6, n_test=6)
    c.mapper = dataclasses.replace(cfg.mapper, epochs=3)
    c.predictor = dataclasses.replace(cfg.predictor, epochs=3)
    c.gate = dataclasses.replace(cfg.gate, epochs=3)
    return c


def manifest_summary(root) -> str:
    m = load_manifest(root)
    lines = [f"schema {m['schema_version']}  master seed {m['master_seed']}"]
    for split, info in m["splits"].items():
        pct = " ".join(f"{100 * f:5.1f}%" for f in info["bin_fractions"])
        lines.append(f"{split:>5}: n={info['n']:<5} bins {info['bin_counts']}  ({pct})")
    return "\n".join(lines)


__all__ = ["Pipeline", "TRAIN_STAGES", "smoke_config", "manifest_summary", "gate_summary", "BenchmarkConfig"]
