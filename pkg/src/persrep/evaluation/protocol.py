"""Instance-level evaluation: one-vs-all classification, retrieval, detection
and segmentation, with per-scene breakdowns."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from persrep import errors
from persrep.dataset import ImageRecord, InstanceDataset
from persrep.encoder import EmbeddingBundle, EmbeddingCache, Encoder

from .dense import DensePrediction, confidence_map, predict_from_map, target_feature
from .metrics import COCO_IOU_THRESHOLDS, dense_ap_f1, ndcg, pr_auc

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
TASKS = ("classification", "retrieval", "detection", "segmentation")
METRICS = {
    "classification": ("pr_auc",),
    "retrieval": ("ndcg",),
    "detection": ("det_ap", "det_ap50", "det_f1"),
    "segmentation": ("seg_ap", "seg_ap50", "seg_f1"),
}
METRIC_TASK = {m: t for t, ms in METRICS.items() for m in ms}


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), 1e-12)


def classification_confidence(test: ImageRecord, d_r: Sequence[ImageRecord], encoder: Optional[Encoder] = None,
                              test_cls: Optional[np.ndarray] = None,
                              ref_cls: Optional[np.ndarray] = None) -> float:
    """Max cosine similarity between the test CLS vector and each reference CLS vector."""
    if test_cls is None:
        test_cls = encoder.embed_batch([test.pixels])[0].cls
    if ref_cls is None:
        ref_cls = np.stack([b.cls for b in encoder.embed_batch([r.pixels for r in d_r])])
    return float(np.max(_unit(ref_cls) @ _unit(test_cls)))


def retrieval_ndcg(query: ImageRecord, retrieval_set: Sequence[ImageRecord], encoder: Optional[Encoder] = None,
                   query_cls: Optional[np.ndarray] = None, set_cls: Optional[np.ndarray] = None) -> float:
    """Rank ``retrieval_set`` by CLS cosine to ``query``; relevance = same instance."""
    if not retrieval_set:
        raise errors.EmptyRetrievalSet("retrieval set is empty")
    if query_cls is None:
        query_cls = encoder.embed_batch([query.pixels])[0].cls
    if set_cls is None:
        set_cls = np.stack([b.cls for b in encoder.embed_batch([r.pixels for r in retrieval_set])])
    scores = _unit(set_cls) @ _unit(query_cls)
    rel = [1.0 if r.instance_id == query.instance_id else 0.0 for r in retrieval_set]
    return ndcg(scores, rel)


class EmbeddingTable:
    """Embeddings of every image in a dataset for one encoder, keyed by (instance, image id)."""

    def __init__(self, dataset: InstanceDataset, encoder: Encoder, cache: Optional[EmbeddingCache] = None):
        self.encoder = encoder
        records = dataset.records()
        bundles = (cache or EmbeddingCache()).embed_records(encoder, records)
        self._b = {(r.instance_id, r.id): b for r, b in zip(records, bundles)}

    def __getitem__(self, rec: ImageRecord) -> EmbeddingBundle:
        return self._b[(rec.instance_id, rec.id)]

    def cls(self, recs: Iterable[ImageRecord]) -> np.ndarray:
        return np.stack([self[r].cls for r in recs])


@dataclass
class InstanceResult:
    metrics: dict[str, float] = field(default_factory=dict)
    splits: dict[str, dict[str, float]] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)


def _classification(target, tests, refs, table):
    labels = [r.instance_id == target for r in tests]
    if all(labels):
        raise errors.NoNegatives("one-vs-all classification needs images of other instances")
    ref = _unit(table.cls(refs))
    scores = (_unit(table.cls(tests)) @ ref.T).max(axis=1)
    return pr_auc(scores, labels)


def _retrieval(queries, pool, table):
    pool_cls = table.cls(pool)
    return float(np.mean([retrieval_ndcg(q, pool, query_cls=table[q].cls, set_cls=pool_cls) for q in queries]))


def _dense(target, annotated, preds, iou_thresholds):
    out = {}
    gt_boxes = {r.id: ([r.bbox] if r.instance_id == target else []) for r in annotated}
    gt_masks = {r.id: ([r.mask] if r.instance_id == target else []) for r in annotated}
    det = {r.id: ((preds[r.id].box_score, preds[r.id].bbox) if preds[r.id].detected else None) for r in annotated}
    seg = {r.id: ((preds[r.id].mask_score, preds[r.id].mask) if preds[r.id].detected else None) for r in annotated}
    out["det_ap"], out["det_f1"] = dense_ap_f1(det, gt_boxes, "bbox", iou_thresholds)
    out["det_ap50"], _ = dense_ap_f1(det, gt_boxes, "bbox", (0.5,))
    out["seg_ap"], out["seg_f1"] = dense_ap_f1(seg, gt_masks, "mask", iou_thresholds)
    out["seg_ap50"], _ = dense_ap_f1(seg, gt_masks, "mask", (0.5,))
    return out


def _image_key(r):
    return (r.instance_id, r.id)


def evaluate_instance(dataset: InstanceDataset, instance_id: str, encoder: Encoder,
                      tasks: Iterable[str] = TASKS, table: Optional[EmbeddingTable] = None,
                      iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
                      other_instances_as_negatives: bool = True) -> InstanceResult:
    """Metrics for one instance. Tasks lacking annotations are skipped and flagged."""
    tasks = set(tasks)
    entry = dataset[instance_id]
    table = table or EmbeddingTable(dataset, encoder)
    # canonical order so results never depend on input ordering
    all_tests = sorted(dataset.records("test"), key=_image_key)
    train_pool = sorted(dataset.records("train"), key=_image_key)
    own_tests = sorted(entry.test, key=_image_key)
    refs = list(entry.train)
    res = InstanceResult()
    scenes = sorted({r.scene_tag for r in own_tests if r.scene_tag is not None})

    def guarded(name, fn):
        try:
            return fn()
        except errors.EvaluationError as exc:
            res.flags.append(f"{name}: {type(exc).__name__}: {exc}")
            return None

    if "classification" in tasks:
        v = guarded("classification", lambda: _classification(instance_id, all_tests, refs, table))
        if v is not None:
            res.metrics["pr_auc"] = v
        for s in scenes:
            sub = [r for r in all_tests if r.scene_tag == s]
            v = guarded(f"classification[{s}]", lambda: _classification(instance_id, sub, refs, table))
            if v is not None:
                res.splits.setdefault(s, {})["pr_auc"] = v

    if "retrieval" in tasks:
        v = guarded("retrieval", lambda: _retrieval(own_tests, train_pool, table))
        if v is not None:
            res.metrics["ndcg"] = v
        for s in scenes:
            qs = [r for r in own_tests if r.scene_tag == s]
            v = guarded(f"retrieval[{s}]", lambda: _retrieval(qs, train_pool, table))
            if v is not None:
                res.splits.setdefault(s, {})["ndcg"] = v

    dense_tasks = tasks & {"detection", "segmentation"}
    if dense_tasks:
        pool = all_tests if other_instances_as_negatives else own_tests
        annotated = [r for r in pool if r.mask is not None]
        if any(r.mask is None for r in refs):
            res.flags.append("dense: reference images lack masks; skipped")
        elif not any(r.instance_id == instance_id for r in annotated):
            res.flags.append("dense: no annotated test images for this instance; skipped")
        else:
            target = target_feature(refs, encoder, [table[r] for r in refs])
            preds = {}
            for r in annotated:
                cmap = confidence_map(r, target, bundle=table[r])
                preds[r.id] = predict_from_map(cmap.upscaled)
            groups = [("all", annotated)] + [(s, [r for r in annotated if r.scene_tag == s]) for s in scenes]
            for name, sub in groups:
                v = guarded(f"dense[{name}]", lambda: _dense(instance_id, sub, preds, iou_thresholds))
                if v is None:
                    continue
                keep = {k: x for k, x in v.items()
                        if ("detection" in dense_tasks and k.startswith("det"))
                        or ("segmentation" in dense_tasks and k.startswith("seg"))}
                if name == "all":
                    res.metrics.update(keep)
                else:
                    res.splits.setdefault(name, {}).update(keep)
    return res


# -- reports -----------------------------------------------------------------

@dataclass
class EvalReport:
    per_instance: dict[str, dict[str, float]]
    splits: dict[str, dict[str, dict[str, float]]]
    flags: dict[str, list[str]]
    encoder: str = ""

    @classmethod
    def from_results(cls, results: dict[str, InstanceResult], encoder: str = "") -> "EvalReport":
        ids = sorted(results)
        return cls({i: dict(sorted(results[i].metrics.items())) for i in ids},
                   {i: {s: dict(sorted(m.items())) for s, m in sorted(results[i].splits.items())} for i in ids},
                   {i: list(results[i].flags) for i in ids if results[i].flags}, encoder)

    @property
    def aggregate(self) -> dict[str, float]:
        keys = sorted({k for m in self.per_instance.values() for k in m})
        return {k: float(np.mean([m[k] for m in self.per_instance.values() if k in m])) for k in keys}

    @property
    def split_aggregate(self) -> dict[str, dict[str, float]]:
        out: dict[str, dict[str, list[float]]] = {}
        for per in self.splits.values():
            for s, m in per.items():
                for k, v in m.items():
                    out.setdefault(s, {}).setdefault(k, []).append(v)
        return {s: {k: float(np.mean(v)) for k, v in sorted(m.items())} for s, m in sorted(out.items())}

    def to_json(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "encoder": self.encoder,
                "per_instance": self.per_instance, "aggregate": self.aggregate,
                "splits": self.splits, "split_aggregate": self.split_aggregate, "flags": self.flags}

    @classmethod
    def from_json(cls, doc: dict) -> "EvalReport":
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise errors.EvaluationError(f"unsupported report schema {doc.get('schema_version')}")
        return cls(doc["per_instance"], doc["splits"], doc.get("flags", {}), doc.get("encoder", ""))

    def rows(self) -> list[tuple[str, str, str, str, float]]:
        """Flat (instance_id, task, metric, split, value) rows in a fixed order."""
        out = []
        for iid in sorted(self.per_instance):
            for k, v in sorted(self.per_instance[iid].items()):
                out.append((iid, METRIC_TASK.get(k, ""), k, "all", v))
            for s, m in sorted(self.splits.get(iid, {}).items()):
                for k, v in sorted(m.items()):
                    out.append((iid, METRIC_TASK.get(k, ""), k, s, v))
        return out

    def write(self, json_path, csv_path=None) -> None:
        Path(json_path).write_text(dumps(self.to_json()))
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["instance_id", "task", "metric", "split", "value"])
                for row in self.rows():
                    w.writerow(row[:4] + (f"{row[4]:.10f}",))


def dumps(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def digest_json(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def evaluate(dataset: InstanceDataset, encoders: dict[str, Encoder], tasks: Iterable[str] = TASKS,
             cache: Optional[EmbeddingCache] = None) -> EvalReport:
    """Evaluate each instance with its own encoder (``encoders[instance_id]``)."""
    tables: dict[str, EmbeddingTable] = {}
    results = {}
    for iid in sorted(encoders):
        enc = encoders[iid]
        fp = enc.fingerprint()
        if fp not in tables:
            tables[fp] = EmbeddingTable(dataset, enc, cache)
        results[iid] = evaluate_instance(dataset, iid, enc, tasks, tables[fp])
    name = next(iter(encoders.values())).descriptor.name if encoders else ""
    return EvalReport.from_results(results, name)
