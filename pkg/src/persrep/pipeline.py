"""Run orchestration: generate, filter, train, evaluate and analyze each instance.

A run directory looks like::

    run/
      config.json            the resolved PipelineConfig
      manifest.json          seeds, digests and stage records per instance
      instances/<id>/
        pool/                synthetic pool (generate)
        pool_filtered/       filtered pool (filter, optional)
        adapter.prla         LoRA checkpoint (train)
        trace.{json,csv}     per-step loss (train)
        eval.json            base and personalized InstanceResults (evaluate)
        analysis.json        PoolAnalysis (analyze)
        stages/<stage>.json  written before a stage produces output
        stages/<stage>.done  sentinel; a stage with one is never re-run
      eval/{base,personalized}.{json,csv}
      analysis.csv
"""
from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional

from persrep import __version__, errors
from persrep.analysis import PoolAnalysis, analyze_pool, encoder_metric, write_analysis_csv
from persrep.dataset import InstanceDataset, ingest_dataset, load_pool, save_pool
from persrep.encoder import load_adapter, load_encoder
from persrep.evaluation import TASKS, EmbeddingTable, EvalReport, InstanceResult, evaluate_instance
from persrep.generation import GeneratorConfig, filter_pool, synthesize_pool
from persrep.training import TrainConfig, train_personalized
from persrep import toy

log = logging.getLogger(__name__)

BUILTIN_TOY = "builtin:toy"
STAGES = ("generate", "filter", "train", "evaluate", "analyze")
SWEEP_AXES = {
    "cfg_scale": "generator", "use_llm_captions": "generator", "n_positives": "generator",
    "loss_kind": "train", "n_pairs": "train",
}


def _digest(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path: Path, doc) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


@dataclass(frozen=True)
class PipelineConfig:
    dataset_root: str = BUILTIN_TOY
    encoder_name: str = "toy"
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval_tasks: tuple[str, ...] = TASKS
    output_dir: str = "runs/default"
    sweep: Optional[dict] = None
    filter_threshold: Optional[float] = None   # None skips the filter stage
    n_real: Optional[int] = None                # use only the first n_real train images
    instances: Optional[tuple[str, ...]] = None
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "eval_tasks", tuple(sorted(self.eval_tasks)))
        if self.instances is not None:
            object.__setattr__(self, "instances", tuple(self.instances))

    def validate(self) -> "PipelineConfig":
        if self.dataset_root != BUILTIN_TOY and not Path(self.dataset_root).is_dir():
            raise errors.ConfigError(f"dataset_root {self.dataset_root!r} does not exist")
        unknown = set(self.eval_tasks) - set(TASKS)
        if unknown or not self.eval_tasks:
            raise errors.ConfigError(f"eval_tasks must be a nonempty subset of {TASKS}, got {sorted(unknown)}")
        if self.sweep is not None:
            if not self.sweep:
                raise errors.ConfigError("sweep must name at least one axis")
            for axis, values in self.sweep.items():
                if axis not in SWEEP_AXES:
                    raise errors.ConfigError(f"cannot sweep {axis!r}; axes are {sorted(SWEEP_AXES)}")
                if not isinstance(values, (list, tuple)) or not values:
                    raise errors.ConfigError(f"sweep grid for {axis!r} is empty")
        if self.n_real is not None and self.n_real < 1:
            raise errors.ConfigError("n_real must be >= 1")
        if self.workers < 1:
            raise errors.ConfigError("workers must be >= 1")
        if self.generator.background_dir and not Path(self.generator.background_dir).is_dir():
            raise errors.ConfigError(f"background_dir {self.generator.background_dir!r} does not exist")
        if self.generator.negative_dir and not Path(self.generator.negative_dir).is_dir():
            raise errors.ConfigError(f"negative_dir {self.generator.negative_dir!r} does not exist")
        return self

    def to_json(self) -> dict:
        d = asdict(self)
        d["generator"] = self.generator.to_json()
        d["train"] = self.train.to_json()
        d["eval_tasks"] = list(self.eval_tasks)
        d["instances"] = list(self.instances) if self.instances is not None else None
        return d

    @classmethod
    def from_json(cls, doc: dict) -> "PipelineConfig":
        doc = dict(doc)
        known = set(cls.__dataclass_fields__)
        extra = set(doc) - known
        if extra:
            raise errors.ConfigError(f"unknown config fields {sorted(extra)}")
        try:
            doc["generator"] = GeneratorConfig(**doc.get("generator", {}))
            doc["train"] = TrainConfig.from_json(doc.get("train", {}))
            return cls(**doc)
        except TypeError as exc:
            raise errors.ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise errors.ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_json(doc)


def toy_profile(output_dir: Optional[str] = None) -> PipelineConfig:
    """The bundled CPU profile on the procedural dataset."""
    doc = json.loads(resources.files("persrep.resources").joinpath("toy_profile.json").read_text())
    cfg = PipelineConfig.from_json(doc)
    return replace(cfg, output_dir=output_dir) if output_dir else cfg


def load_dataset(root: str) -> InstanceDataset:
    if root == BUILTIN_TOY:
        return toy.make_toy_dataset()
    return ingest_dataset(root)


@dataclass
class RunResult:
    run_dir: Path
    executed: list = field(default_factory=list)     # (instance_id, stage) actually run
    failures: dict = field(default_factory=dict)     # instance_id -> message
    base: Optional[EvalReport] = None
    personalized: Optional[EvalReport] = None


class _Run:
    def __init__(self, config: PipelineConfig, fail_fast: bool):
        self.config = config
        self.fail_fast = fail_fast
        self.dir = Path(config.output_dir)
        self.dataset = load_dataset(config.dataset_root)
        self.encoder = load_encoder(config.encoder_name)
        self.lock = threading.Lock()
        self.result = RunResult(self.dir)
        self._base_table: Optional[EmbeddingTable] = None
        self._metric = None
        manifest_path = self.dir / "manifest.json"
        self.manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
        self.manifest.update({
            "persrep_version": __version__,
            "config_digest": _digest(config.to_json()),
            "dataset_digest": self.dataset.digest(),
            "encoder": {"name": config.encoder_name, "fingerprint": self.encoder.fingerprint()},
            "seeds": {"generator": config.generator.seed, "train": config.train.seed},
        })
        self.manifest.setdefault("instances", {})

    # -- bookkeeping --------------------------------------------------------

    def idir(self, iid: str) -> Path:
        return self.dir / "instances" / iid

    def _save_manifest(self):
        with self.lock:
            _write_json(self.dir / "manifest.json", self.manifest)

    def _record(self, iid: str, stage: str, doc: dict):
        with self.lock:
            self.manifest["instances"].setdefault(iid, {}).setdefault("stages", {})[stage] = doc
        self._save_manifest()

    def stage(self, iid: str, stage: str, inputs: dict, seeds: dict, fn):
        """Run ``fn`` unless the stage sentinel exists; provenance is written first."""
        sdir = self.idir(iid) / "stages"
        done = sdir / f"{stage}.done"
        if done.exists():
            return False
        sdir.mkdir(parents=True, exist_ok=True)
        doc = {"inputs": inputs, "seeds": seeds}
        _write_json(sdir / f"{stage}.json", doc)
        self._record(iid, stage, doc)
        fn()
        done.write_text("ok\n")
        with self.lock:
            self.result.executed.append((iid, stage))
        return True

    @property
    def metric(self):
        if self._metric is None:
            self._metric = encoder_metric(self.encoder)
        return self._metric

    def base_table(self) -> EmbeddingTable:
        with self.lock:
            if self._base_table is None:
                self._base_table = EmbeddingTable(self.dataset, self.encoder)
            return self._base_table

    def refs(self, iid: str):
        train = list(self.dataset[iid].train)
        return train[: self.config.n_real] if self.config.n_real else train

    # -- stages -------------------------------------------------------------

    def run_instance(self, iid: str):
        cfg = self.config
        d = self.idir(iid)
        d.mkdir(parents=True, exist_ok=True)
        refs = self.refs(iid)
        ref_digests = [r.digest() for r in refs]

        def generate():
            pool = synthesize_pool(self.dataset, iid, cfg.generator, refs=refs)
            save_pool(pool, d / "pool")
        self.stage(iid, "generate", {"refs": ref_digests, "generator": _digest(cfg.generator.to_json())},
                   {"generator": cfg.generator.seed}, generate)
        pool = load_pool(d / "pool")

        if cfg.filter_threshold is not None:
            def do_filter():
                kept = filter_pool(pool, refs, self.metric, threshold=cfg.filter_threshold)
                save_pool(kept, d / "pool_filtered")
            self.stage(iid, "filter", {"pool": pool.digest(), "threshold": cfg.filter_threshold}, {}, do_filter)
            pool = load_pool(d / "pool_filtered")

        def train():
            res = train_personalized(self.encoder, refs, pool, cfg.train)
            res.encoder.save_adapter(d / "adapter.prla")
            _write_json(d / "trace.json", {"loss": res.trace, "steps": res.steps, "seeds": res.seeds})
            with (d / "trace.csv").open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["step", "loss"])
                w.writerows([i, repr(v)] for i, v in enumerate(res.trace))
        self.stage(iid, "train", {"pool": pool.digest(), "train": _digest(cfg.train.to_json()),
                                  "encoder": self.encoder.fingerprint()},
                   {"train": cfg.train.seed, "dropout": cfg.train.seed + 1}, train)

        def evaluate():
            adapted = load_adapter(self.encoder, d / "adapter.prla")
            base = evaluate_instance(self.dataset, iid, self.encoder, cfg.eval_tasks, self.base_table())
            pers = evaluate_instance(self.dataset, iid, adapted, cfg.eval_tasks)
            _write_json(d / "eval.json", {"base": asdict(base), "personalized": asdict(pers)})
        self.stage(iid, "evaluate", {"adapter": _file_digest(d / "adapter.prla"),
                                     "dataset": self.dataset.digest()}, {}, evaluate)

        def analyze():
            analyze_pool(pool, refs, self.metric).write(d / "analysis.json")
        self.stage(iid, "analyze", {"pool": pool.digest()}, {}, analyze)

    def run_guarded(self, iid: str):
        try:
            self.run_instance(iid)
        except errors.PersRepError as exc:
            msg = f"{type(exc).__name__}: {exc}"
            log.error("instance %s failed: %s", iid, msg)
            with self.lock:
                self.result.failures[iid] = msg
                self.manifest["instances"].setdefault(iid, {})["failure"] = msg
            self._save_manifest()
            if self.fail_fast:
                raise errors.StageFailure(f"{iid}: {msg}") from exc

    def assemble(self):
        base, pers, analyses = {}, {}, []
        for iid in self.ids():
            path = self.idir(iid) / "eval.json"
            if path.exists():
                doc = json.loads(path.read_text())
                base[iid] = InstanceResult(**doc["base"])
                pers[iid] = InstanceResult(**doc["personalized"])
            apath = self.idir(iid) / "analysis.json"
            if apath.exists():
                analyses.append(PoolAnalysis.from_json(json.loads(apath.read_text())))
        out = self.dir / "eval"
        out.mkdir(exist_ok=True)
        name = self.config.encoder_name
        self.result.base = EvalReport.from_results(base, name)
        self.result.personalized = EvalReport.from_results(pers, name)
        self.result.base.write(out / "base.json", out / "base.csv")
        self.result.personalized.write(out / "personalized.json", out / "personalized.csv")
        write_analysis_csv(analyses, self.dir / "analysis.csv")

    def ids(self) -> list[str]:
        ids = self.dataset.ids
        if self.config.instances is not None:
            missing = set(self.config.instances) - set(ids)
            if missing:
                raise errors.ConfigError(f"unknown instances {sorted(missing)}")
            ids = [i for i in ids if i in set(self.config.instances)]
        return ids


def run(config: PipelineConfig, fail_fast: bool = False) -> RunResult:
    """Execute every stage for every instance; completed stages are skipped on rerun."""
    config.validate()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg_path = out / "config.json"
    if cfg_path.exists():
        previous = json.loads(cfg_path.read_text())
        if previous != config.to_json():
            raise errors.ConfigError(f"{out} holds a run with a different config; use a new output_dir")
    else:
        _write_json(cfg_path, config.to_json())
    r = _Run(config, fail_fast)
    ids = r.ids()
    if ids:
        r.manifest["n_real"] = len(r.refs(ids[0]))
    r._save_manifest()
    if config.workers > 1:
        r.base_table()
        with ThreadPoolExecutor(max_workers=config.workers) as ex:
            list(ex.map(r.run_guarded, ids))
    else:
        for iid in ids:
            r.run_guarded(iid)
    r.assemble()
    return r.result


def sweep_children(config: PipelineConfig) -> list[tuple[str, PipelineConfig]]:
    """Child configs for every point of the sweep grid, with their sub-directory names."""
    config.validate()
    if not config.sweep:
        raise errors.ConfigError("config has no sweep grid")
    axes = sorted(config.sweep)
    children = []
    for values in itertools.product(*(config.sweep[a] for a in axes)):
        gen, tr = config.generator, config.train
        for axis, v in zip(axes, values):
            if SWEEP_AXES[axis] == "generator":
                gen = replace(gen, **{axis: v})
            else:
                tr = replace(tr, **{axis: v})
        name = "__".join(f"{a}={v}" for a, v in zip(axes, values))
        out = str(Path(config.output_dir) / name)
        children.append((name, replace(config, generator=gen, train=tr, sweep=None, output_dir=out)))
    return children


def sweep(config: PipelineConfig, fail_fast: bool = False) -> list[RunResult]:
    results = []
    children = sweep_children(config)
    Path(config.output_dir).mkdir(parents=True, exist_ok=True)
    _write_json(Path(config.output_dir) / "sweep.json",
                {"parent": config.to_json(), "children": [name for name, _ in children]})
    for _name, child in children:
        results.append(run(child, fail_fast))
    return results
