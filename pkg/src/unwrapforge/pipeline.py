"""End-to-end orchestration: synth -> baseline -> train -> infer -> eval.

Every stage writes its artifacts under one run directory and drops a marker
in ``stages/`` when it completes, so an interrupted run resumes where it
stopped.
"""

from __future__ import annotations

import copy
import json
import logging
import shutil
from pathlib import Path

import jsonschema

from .denoiser import DenoiserConfig, build_denoiser, load_checkpoint
from .diffusion import schedule_from_dict
from .errors import ConfigError, StageError, UnwrapForgeError
from .evaluate import EvalReport, evaluate_run, format_table, prediction_path
from .raster import read_grid, write_grid
from .scene import GeneratorConfig, generate_dataset, load_manifest, split_entries
from .tiling import InferConfig, infer_resized, infer_tiled
from .training import TrainConfig, train_from_dataset

log = logging.getLogger(__name__)

STAGES = ("synth", "baseline", "train", "infer", "eval")

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "stages": {"type": "array", "items": {"enum": list(STAGES)}},
        "synth": {
            "type": "object",
            "properties": {
                "count": {"type": "integer", "minimum": 1},
                "train_count": {"type": "integer", "minimum": 0},
                "generator": {"type": "object"},
            },
            "required": ["count"],
            "additionalProperties": False,
        },
        "large": {
            "type": "object",
            "properties": {
                "count": {"type": "integer", "minimum": 1},
                "size": {"type": "integer", "minimum": 2},
                "seed": {"type": "integer", "minimum": 0},
            },
            "required": ["count", "size"],
            "additionalProperties": False,
        },
        "model": {"type": "object"},
        "model_seed": {"type": "integer", "minimum": 0},
        "diffusion": {
            "type": "object",
            "properties": {
                "T": {"type": "integer", "minimum": 2},
                "w_t": {"type": "array", "items": {"type": "number", "minimum": 0}},
                "weighting": {"enum": ["uniform", "velocity"]},
            },
            "additionalProperties": False,
        },
        "train": {"type": "object"},
        "infer": {"type": "object"},
        "modes": {"type": "array", "items": {"enum": ["tiled", "resize"]}},
        "eval": {
            "type": "object",
            "properties": {"remove_offset": {"type": "boolean"}},
            "additionalProperties": False,
        },
    },
    "required": ["synth"],
    "additionalProperties": False,
}

DEFAULTS = {
    "seed": 7,
    "model_seed": 0,
    "diffusion": {"T": 1000},
    "model": {},
    "train": {},
    "infer": {"tile_size": 64, "overlap": 32},
    "modes": ["tiled", "resize"],
    "eval": {"remove_offset": True},
}


def load_config(source) -> dict:
    """Parse and validate a pipeline config (path, JSON text or dict)."""
    if isinstance(source, dict):
        doc = copy.deepcopy(source)
    else:
        try:
            path = Path(source)
            text = path.read_text() if path.exists() else str(source)
            doc = json.loads(text)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config invalid at {list(exc.absolute_path)}: {exc.message}") from exc
    cfg = copy.deepcopy(DEFAULTS)
    for k, v in doc.items():
        if isinstance(v, dict) and isinstance(cfg.get(k), dict):
            cfg[k].update(v)
        else:
            cfg[k] = v
    # build every typed section once so errors surface before any stage runs
    GeneratorConfig.from_dict(cfg["synth"].get("generator", {}))
    DenoiserConfig.from_dict(cfg["model"])
    TrainConfig.from_dict(cfg["train"])
    InferConfig.from_dict(cfg["infer"])
    schedule_from_dict(cfg["diffusion"])
    return cfg


class Pipeline:
    def __init__(self, config, run_dir, threads=None):
        self.cfg = load_config(config)
        self.run = Path(run_dir)
        self.threads = threads

    # paths
    @property
    def data(self):
        return self.run / "data"

    @property
    def large(self):
        return self.run / "large"

    @property
    def ckpt(self):
        return self.run / "model.uwck"

    def preds(self, dataset, mode):
        return self.run / "predictions" / dataset / mode

    def _marker(self, stage):
        return self.run / "stages" / f"{stage}.done"

    def _datasets(self):
        out = [("data", self.data)]
        if "large" in self.cfg:
            out.append(("large", self.large))
        return out

    def run_stages(self, stages=None, force=False):
        stages = list(stages or self.cfg.get("stages") or STAGES)
        for s in stages:
            if s not in STAGES:
                raise ConfigError(f"unknown stage {s!r}")
        self.run.mkdir(parents=True, exist_ok=True)
        (self.run / "config.json").write_text(json.dumps(self.cfg, indent=2, sort_keys=True))
        (self.run / "stages").mkdir(exist_ok=True)
        for stage in STAGES:
            if stage not in stages:
                continue
            if self._marker(stage).exists() and not force:
                log.info("stage %s already complete, skipping", stage)
                continue
            log.info("stage %s", stage)
            try:
                getattr(self, f"stage_{stage}")()
            except UnwrapForgeError as exc:
                exc.stage = stage
                raise
            except Exception as exc:  # noqa: BLE001 - tag anything else as a stage failure
                raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc
            self._marker(stage).write_text("ok\n")

    def stage_synth(self):
        s = self.cfg["synth"]
        gen = GeneratorConfig.from_dict(s.get("generator", {}))
        for d in (self.data, self.large):
            if d.exists():
                shutil.rmtree(d)
        generate_dataset(gen, self.cfg["seed"], self.data, s["count"], s.get("train_count"))
        if "large" in self.cfg:
            lg = self.cfg["large"]
            doc = gen.to_dict()
            doc["shape"] = [lg["size"], lg["size"]]
            doc["train_count"] = 0
            generate_dataset(GeneratorConfig.from_dict(doc), lg.get("seed", self.cfg["seed"] + 1),
                             self.large, lg["count"], 0)

    def stage_baseline(self):
        for name, root in self._datasets():
            man = load_manifest(root)
            out = self.preds(name, "baseline")
            out.mkdir(parents=True, exist_ok=True)
            for e in split_entries(man, "test"):
                write_grid(read_grid(root / e["path"] / "cond.pgrd"), prediction_path(out, e["index"]))

    def stage_train(self):
        net = build_denoiser(DenoiserConfig.from_dict(self.cfg["model"]), seed=self.cfg["model_seed"])
        sched = schedule_from_dict(self.cfg["diffusion"])
        trace = train_from_dataset(self.data, self.ckpt, net, sched, TrainConfig.from_dict(self.cfg["train"]))
        (self.run / "train_trace.json").write_text(json.dumps(trace))

    def stage_infer(self):
        net, header, _ = load_checkpoint(self.ckpt)
        sched = schedule_from_dict(header["schedule"])
        scale = header["normalization_scale"]
        icfg = dict(self.cfg["infer"])
        if self.threads:
            icfg["workers"] = self.threads
        icfg = InferConfig.from_dict(icfg)
        fn = {"tiled": infer_tiled, "resize": infer_resized}
        for name, root in self._datasets():
            man = load_manifest(root)
            for mode in self.cfg["modes"]:
                out = self.preds(name, mode)
                out.mkdir(parents=True, exist_ok=True)
                for e in split_entries(man, "test"):
                    scene = root / e["path"]
                    pred = fn[mode](read_grid(scene / "wrapped.pgrd"), read_grid(scene / "cond.pgrd"),
                                    net, sched, icfg, scale)
                    write_grid(pred, prediction_path(out, e["index"]))
                    log.debug("%s/%s scene %d done", name, mode, e["index"])

    def stage_eval(self):
        reports = []
        rdir = self.run / "reports"
        rdir.mkdir(exist_ok=True)
        remove = self.cfg["eval"]["remove_offset"]
        for name, root in self._datasets():
            for mode in ["baseline"] + list(self.cfg["modes"]):
                pdir = self.preds(name, mode)
                if not pdir.exists():
                    continue
                rep = evaluate_run(root, pdir, f"{name}/{mode}", remove_offset=remove,
                                   config={"infer": self.cfg["infer"], "dataset": name})
                rep.save(rdir / f"{name}-{mode}.json")
                reports.append(rep)
        table = format_table(reports)
        (rdir / "summary.txt").write_text(table + "\n")
        print(table)
        return reports

    def reports(self):
        rdir = self.run / "reports"
        return {p.stem: EvalReport.load(p) for p in sorted(rdir.glob("*.json"))}


def run_pipeline(config, run_dir, stages=None, threads=None, force=False) -> int:
    """Run the requested stages; returns a process exit status."""
    try:
        Pipeline(config, run_dir, threads).run_stages(stages, force)
    except UnwrapForgeError as exc:
        log.error("%s", exc)
        return exc.exit_code
    return 0
