"""Core data model: image records, per-instance datasets, synthetic pools.

Everything here is immutable after construction (pixel arrays are marked
read-only) so records can be shared across worker threads.
"""
from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image

from persrep import errors

log = logging.getLogger(__name__)

SPLITS = ("train", "test")
SCENE_TAGS = ("id", "pose", "distractors", "both")
GENERATOR_KINDS = ("cut_paste", "dreambooth_like", "external", "real_only")
NEGATIVE_ID = "negative"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
DEFAULT_MIN_TEST = 3
N_TRAIN = 3


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def mask_to_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Tight inclusive (row_min, col_min, row_max, col_max) box of a boolean mask."""
    mask = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        raise errors.EmptyMask("mask has no foreground pixels")
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])


@dataclass(frozen=True, eq=False)
class ImageRecord:
    id: str
    pixels: np.ndarray
    instance_id: str
    split: str = "train"
    scene_tag: Optional[str] = None
    mask: Optional[np.ndarray] = None
    bbox: Optional[tuple[int, int, int, int]] = None

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] == 0 or px.shape[1] == 0:
            raise errors.ShapeMismatch(f"{self.id}: pixels must be HxWx3, got {px.shape}")
        object.__setattr__(self, "pixels", _frozen(px.astype(np.uint8, copy=False)))
        if self.split not in SPLITS:
            raise errors.MalformedAnnotation(f"{self.id}: unknown split {self.split!r}")
        if self.scene_tag is not None and self.scene_tag not in SCENE_TAGS:
            raise errors.MalformedAnnotation(f"{self.id}: unknown scene tag {self.scene_tag!r}")
        h, w = px.shape[:2]
        if self.mask is not None:
            m = np.asarray(self.mask, dtype=bool)
            if m.shape != (h, w):
                raise errors.MaskShapeMismatch(f"{self.id}: mask {m.shape} vs image {(h, w)}")
            object.__setattr__(self, "mask", _frozen(m))
            if self.bbox is None and m.any():
                object.__setattr__(self, "bbox", mask_to_bbox(m))
        if self.bbox is not None:
            box = tuple(int(v) for v in self.bbox)
            r0, c0, r1, c1 = box
            if not (0 <= r0 <= r1 < h and 0 <= c0 <= c1 < w):
                raise errors.MalformedAnnotation(f"{self.id}: bbox {box} outside {(h, w)}")
            if self.mask is not None and self.mask.any() and box != mask_to_bbox(self.mask):
                raise errors.MalformedAnnotation(f"{self.id}: bbox {box} is not the tight box of its mask")
            object.__setattr__(self, "bbox", box)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    def digest(self) -> str:
        h = hashlib.sha256(self.pixels.tobytes())
        h.update(str(self.pixels.shape).encode())
        if self.mask is not None:
            h.update(np.packbits(self.mask).tobytes())
        return h.hexdigest()

    def with_(self, **changes) -> "ImageRecord":
        return replace(self, **changes)


@dataclass(frozen=True)
class InstanceEntry:
    category: str
    train: tuple[ImageRecord, ...]
    test: tuple[ImageRecord, ...]


@dataclass(frozen=True)
class InstanceDataset:
    instances: dict[str, InstanceEntry]
    min_test: int = DEFAULT_MIN_TEST

    def __post_init__(self):
        seen: dict[str, str] = {}
        for iid, entry in self.instances.items():
            if len(entry.train) != N_TRAIN:
                raise errors.MissingTrainImages(
                    f"instance {iid!r} has {len(entry.train)} train images, expected {N_TRAIN}")
            if len(entry.test) < self.min_test:
                raise errors.InsufficientTestImages(
                    f"instance {iid!r} has {len(entry.test)} test images, need >= {self.min_test}")
            for rec in entry.train + entry.test:
                key = f"{iid}/{rec.id}"
                if key in seen and seen[key] != rec.split:
                    raise errors.MalformedAnnotation(f"image {key} appears in both train and test")
                seen[key] = rec.split

    @property
    def ids(self) -> list[str]:
        return sorted(self.instances)

    def __len__(self):
        return len(self.instances)

    def __getitem__(self, iid: str) -> InstanceEntry:
        try:
            return self.instances[iid]
        except KeyError:
            raise errors.UnknownInstance(iid) from None

    def records(self, split: Optional[str] = None) -> list[ImageRecord]:
        out = []
        for iid in self.ids:
            entry = self.instances[iid]
            if split in (None, "train"):
                out.extend(entry.train)
            if split in (None, "test"):
                out.extend(entry.test)
        return out

    def subset(self, ids: Iterable[str]) -> "InstanceDataset":
        ids = set(ids)
        return InstanceDataset({k: v for k, v in self.instances.items() if k in ids}, self.min_test)

    def digest(self) -> str:
        h = hashlib.sha256()
        for iid in self.ids:
            entry = self.instances[iid]
            h.update(f"{iid}:{entry.category}".encode())
            for rec in entry.train + entry.test:
                h.update(f"{rec.id}:{rec.split}:{rec.scene_tag}:{rec.bbox}".encode())
                h.update(rec.digest().encode())
        return h.hexdigest()


@dataclass(frozen=True)
class Provenance:
    generator: str
    seed: int
    cfg: Optional[float] = None
    caption: Optional[str] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.generator not in GENERATOR_KINDS:
            raise errors.GenerationError(f"unknown generator kind {self.generator!r}")

    def to_json(self) -> dict:
        d = {"generator": self.generator, "seed": int(self.seed), "cfg": self.cfg, "caption": self.caption}
        if self.extra:
            d["extra"] = self.extra
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Provenance":
        return cls(d["generator"], int(d["seed"]), d.get("cfg"), d.get("caption"), d.get("extra", {}))


@dataclass(frozen=True)
class SyntheticPool:
    instance_id: str
    positives: tuple[ImageRecord, ...]
    negatives: tuple[ImageRecord, ...]
    provenance: dict[str, Provenance]

    def __post_init__(self):
        object.__setattr__(self, "positives", tuple(self.positives))
        object.__setattr__(self, "negatives", tuple(self.negatives))
        for rec in self.positives:
            if rec.instance_id != self.instance_id:
                raise errors.GenerationError(f"positive {rec.id} belongs to {rec.instance_id!r}")
        for rec in self.negatives:
            if rec.instance_id != NEGATIVE_ID:
                raise errors.GenerationError(f"negative {rec.id} must carry instance id {NEGATIVE_ID!r}")
        for rec in self.positives + self.negatives:
            if rec.id not in self.provenance:
                raise errors.GenerationError(f"image {rec.id} has no provenance")

    def digest(self) -> str:
        h = hashlib.sha256(self.instance_id.encode())
        for rec in self.positives + self.negatives:
            h.update(rec.id.encode())
            h.update(rec.digest().encode())
            h.update(json.dumps(self.provenance[rec.id].to_json(), sort_keys=True).encode())
        return h.hexdigest()


# -- image io ---------------------------------------------------------------

def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 0


def write_image(path: Path, pixels: np.ndarray) -> None:
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), "RGB").save(path, format="PNG")


def write_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8) * 255, "L").save(path, format="PNG")


def _list_images(folder: Path) -> list[Path]:
    if not folder.is_dir():
        return []
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _load_record(path: Path, iid: str, split: str, root: Path, annotations: dict) -> ImageRecord:
    pixels = read_image(path)
    mask = None
    mask_path = root / iid / "masks" / f"{path.stem}.png"
    if mask_path.exists():
        mask = read_mask(mask_path)
        if mask.shape != pixels.shape[:2]:
            raise errors.MaskShapeMismatch(f"{mask_path}: {mask.shape} vs image {pixels.shape[:2]}")
    ann = annotations.get(path.stem, annotations.get(path.name, {}))
    if not isinstance(ann, dict):
        raise errors.MalformedAnnotation(f"{iid}/{path.name}: annotation must be an object")
    bbox = ann.get("bbox")
    if bbox is not None and (not isinstance(bbox, list) or len(bbox) != 4):
        raise errors.MalformedAnnotation(f"{iid}/{path.name}: bbox must be [r0, c0, r1, c1]")
    try:
        return ImageRecord(id=path.stem, pixels=pixels, instance_id=iid, split=split,
                           scene_tag=ann.get("scene"), mask=mask,
                           bbox=tuple(bbox) if bbox is not None else None)
    except errors.MaskShapeMismatch:
        raise
    except (TypeError, ValueError) as exc:
        raise errors.MalformedAnnotation(f"{iid}/{path.name}: {exc}") from exc


def ingest_dataset(root_path, min_test: int = DEFAULT_MIN_TEST, workers: int = 1) -> InstanceDataset:
    """Load a dataset laid out as ``root/manifest.json`` plus per-instance folders.

    Instances with the wrong number of images raise instead of being dropped.
    """
    root = Path(root_path)
    manifest_path = root / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
        declared = manifest["instances"]
    except FileNotFoundError:
        raise errors.DatasetError(f"missing {manifest_path}") from None
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise errors.MalformedAnnotation(f"bad manifest {manifest_path}: {exc}") from exc

    jobs = []
    for iid in sorted(declared):
        meta = declared[iid]
        if not isinstance(meta, dict) or "category" not in meta:
            raise errors.MalformedAnnotation(f"manifest entry {iid!r} lacks a category")
        ann_path = root / iid / "annotations.json"
        annotations = {}
        if ann_path.exists():
            try:
                annotations = json.loads(ann_path.read_text())
            except json.JSONDecodeError as exc:
                raise errors.MalformedAnnotation(f"{ann_path}: {exc}") from exc
        for split in SPLITS:
            for path in _list_images(root / iid / split):
                jobs.append((path, iid, split, annotations))

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        loaded = list(pool.map(lambda j: _load_record(j[0], j[1], j[2], root, j[3]), jobs))

    instances = {}
    for iid in sorted(declared):
        recs = [r for r in loaded if r.instance_id == iid]
        instances[iid] = InstanceEntry(
            category=str(declared[iid]["category"]),
            train=tuple(r for r in recs if r.split == "train"),
            test=tuple(r for r in recs if r.split == "test"),
        )
    return InstanceDataset(instances, min_test=min_test)


def write_dataset(dataset: InstanceDataset, root_path) -> Path:
    """Inverse of :func:`ingest_dataset` (PNG for pixels and masks)."""
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"instances": {iid: {"category": dataset[iid].category} for iid in dataset.ids}}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    for iid in dataset.ids:
        entry = dataset[iid]
        annotations = {}
        for rec in entry.train + entry.test:
            folder = root / iid / rec.split
            folder.mkdir(parents=True, exist_ok=True)
            write_image(folder / f"{rec.id}.png", rec.pixels)
            if rec.mask is not None:
                (root / iid / "masks").mkdir(exist_ok=True)
                write_mask(root / iid / "masks" / f"{rec.id}.png", rec.mask)
            ann = {}
            if rec.bbox is not None:
                ann["bbox"] = list(rec.bbox)
            if rec.scene_tag is not None:
                ann["scene"] = rec.scene_tag
            if ann:
                annotations[rec.id] = ann
        if annotations:
            (root / iid / "annotations.json").write_text(json.dumps(annotations, indent=2, sort_keys=True))
    return root


def split_validation(dataset: InstanceDataset, n_val: int, seed: int) -> tuple[InstanceDataset, InstanceDataset]:
    """Class-wise split into (validation, test) with ``n_val`` instances in the first part."""
    ids = dataset.ids
    if n_val < 0 or (n_val >= len(ids) and n_val > 0):
        raise errors.TooFewInstances(f"cannot take {n_val} validation instances from {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    val = {ids[i] for i in order[:n_val]}
    return dataset.subset(val), dataset.subset(set(ids) - val)


# -- pool persistence -------------------------------------------------------

def save_pool(pool: SyntheticPool, root_path) -> Path:
    root = Path(root_path)
    prov = {}
    for kind, recs in (("positives", pool.positives), ("negatives", pool.negatives)):
        folder = root / kind
        folder.mkdir(parents=True, exist_ok=True)
        for rec in recs:
            write_image(folder / f"{rec.id}.png", rec.pixels)
            if rec.mask is not None:
                write_mask(folder / f"{rec.id}.mask.png", rec.mask)
            prov[rec.id] = pool.provenance[rec.id].to_json()
    doc = {"instance_id": pool.instance_id,
           "positives": [r.id for r in pool.positives],
           "negatives": [r.id for r in pool.negatives],
           "provenance": prov}
    (root / "provenance.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    return root


def load_pool(root_path) -> SyntheticPool:
    root = Path(root_path)
    doc = json.loads((root / "provenance.json").read_text())
    iid = doc["instance_id"]

    def _load(kind, owner):
        out = []
        for rid in doc[kind]:
            mask_path = root / kind / f"{rid}.mask.png"
            out.append(ImageRecord(id=rid, pixels=read_image(root / kind / f"{rid}.png"),
                                   instance_id=owner, split="train",
                                   mask=read_mask(mask_path) if mask_path.exists() else None))
        return out

    return SyntheticPool(iid, _load("positives", iid), _load("negatives", NEGATIVE_ID),
                         {k: Provenance.from_json(v) for k, v in doc["provenance"].items()})
