"""Synthetic pool construction for one instance."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from persrep import errors
from persrep.dataset import GENERATOR_KINDS, NEGATIVE_ID, ImageRecord, InstanceDataset, Provenance, SyntheticPool
from persrep import toy
from persrep.dataset import read_image
from persrep.imageops import resize_rgb

from .backgrounds import DirectoryBackgrounds, ProceduralBackgrounds, _caption_key, procedural_texture
from .captions import TOKEN, CaptionCorpus, strip_identifier
from .client import ExternalGeneratorClient
from .compositing import DEFAULT_SCALE_RANGE, cut_and_paste

CFG_SWEEP = (4.0, 5.0, 7.5)
PLAIN_BACKGROUND_CAPTION = "A photo of a scene"


@dataclass(frozen=True)
class GeneratorConfig:
    kind: str = "cut_paste"
    cfg_scale: float = 5.0
    use_llm_captions: bool = True
    n_positives: int = 450
    n_negatives: int = 1000
    seed: int = 0
    image_size: int = 64
    background_source: str = "procedural"   # procedural | directory
    background_dir: Optional[str] = None
    negative_source: str = "procedural"     # procedural | directory | external
    negative_dir: Optional[str] = None

    def __post_init__(self):
        if self.kind not in GENERATOR_KINDS:
            raise errors.ConfigError(f"generator kind must be one of {GENERATOR_KINDS}")
        if self.cfg_scale <= 0:
            raise errors.ConfigError("cfg_scale must be positive")
        if self.n_positives < 0 or self.n_negatives < 0:
            raise errors.ConfigError("pool sizes must be non-negative")

    def to_json(self) -> dict:
        return asdict(self)


_CLIENTS: dict[str, object] = {}


def register_generator(kind: str, client) -> None:
    """Install a client (anything with ``generate(instance_id, caption, cfg_scale, seed, n)``)."""
    _CLIENTS[kind] = client


def unregister_generator(kind: str) -> None:
    _CLIENTS.pop(kind, None)


def _client_for(kind: str):
    if kind in _CLIENTS:
        return _CLIENTS[kind]
    if kind == "external":
        return ExternalGeneratorClient()
    raise errors.ExternalGeneratorError(
        f"no {kind} generator registered; the personalized diffusion sampler is an external seam")


def _pick_caption(corpus: CaptionCorpus, category: str, rng, llm: bool) -> str:
    if not llm:
        return f"a photo of {TOKEN} {category}"
    entries = corpus.for_category(category).entries
    return entries[int(rng.integers(len(entries)))].template


def _map(fn, items, workers):
    if workers <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _cut_paste_positive(k, refs, iid, config, corpus, category):
    rng = np.random.default_rng([config.seed, 1, k])
    template = _pick_caption(corpus, category, rng, config.use_llm_captions)
    bg_caption = strip_identifier(template, category, corpus) if config.use_llm_captions else PLAIN_BACKGROUND_CAPTION
    size = (config.image_size, config.image_size)
    if config.background_source == "directory":
        files = DirectoryBackgrounds(config.background_dir, size).files()
        if not files:
            raise errors.InsufficientSourceImages(f"no images in {config.background_dir}")
        pick = int(np.random.default_rng([config.seed, 2, k]).integers(len(files)))
        bg = resize_rgb(read_image(files[pick]), size)
        bg_caption = files[pick].name
    else:
        bg = procedural_texture(np.random.default_rng([config.seed, 2, k]), size, _caption_key(bg_caption))
    fg = refs[int(rng.integers(len(refs)))]
    paste_seed = int(np.random.default_rng([config.seed, 3, k]).integers(1 << 31))
    rec, params = cut_and_paste(fg, bg, DEFAULT_SCALE_RANGE, paste_seed,
                                record_id=f"{iid}_pos{k:04d}", return_params=True)
    prov = Provenance("cut_paste", paste_seed, None, bg_caption,
                      {"foreground": fg.id, "scale": params.scale, "offset": list(params.offset)})
    return rec, prov


def _procedural_negative(k, category, config):
    rng = np.random.default_rng([config.seed, 5, k])
    size = (config.image_size, config.image_size)
    bg = procedural_texture(np.random.default_rng([config.seed, 6, k]), size, int(rng.integers(1 << 30)))
    px, _ = toy.generic_object_image(category, rng, bg)
    seed = int(config.seed * 1_000_003 + k)
    return (ImageRecord(f"neg{k:04d}", px, NEGATIVE_ID, "train"),
            Provenance(config.kind, seed,
                       config.cfg_scale, f"a photo of {category}", {"source": "procedural"}))


def synthesize_negatives(category: str, config: GeneratorConfig, workers: int = 1):
    n = config.n_negatives
    if config.negative_source == "procedural":
        return _map(lambda k: _procedural_negative(k, category, config), range(n), workers)
    if config.negative_source == "directory":
        bgs = DirectoryBackgrounds(config.negative_dir, (config.image_size,) * 2).generate([None] * n, config.seed)
        return [(ImageRecord(f"neg{k:04d}", b.pixels, NEGATIVE_ID, "train"),
                 Provenance("external", b.seed, None, None, {"source": "directory"}))
                for k, b in enumerate(bgs)]
    if config.negative_source == "external":
        client = _client_for("external")
        imgs = client.generate(NEGATIVE_ID, f"a photo of {category}", config.cfg_scale, config.seed, n) if n else []
        return [(ImageRecord(f"neg{k:04d}", px, NEGATIVE_ID, "train"),
                 Provenance("external", config.seed + k, config.cfg_scale, f"a photo of {category}"))
                for k, px in enumerate(imgs)]
    raise errors.ConfigError(f"unknown negative source {config.negative_source!r}")


def synthesize_pool(dataset: InstanceDataset, instance_id: str, config: GeneratorConfig,
                    corpus: Optional[CaptionCorpus] = None, workers: int = 1,
                    refs: Optional[Sequence[ImageRecord]] = None) -> SyntheticPool:
    """Build the positive and negative pools for one instance.

    Every image gets its own seed derived from ``(config.seed, stream, index)``,
    so serial and threaded runs give identical pools. ``refs`` restricts the
    real images used as foregrounds (default: all train images of the instance).
    """
    entry = dataset[instance_id]
    corpus = corpus or CaptionCorpus.load()
    refs = list(entry.train if refs is None else refs)
    n = config.n_positives

    if config.kind == "cut_paste":
        if any(r.mask is None for r in refs):
            raise errors.MissingMasks(f"{instance_id}: Cut-and-Paste needs masks on all train images")
        positives = _map(lambda k: _cut_paste_positive(k, refs, instance_id, config, corpus, entry.category),
                         range(n), workers)
    elif config.kind == "real_only":
        positives = []
        for k in range(n):
            src = refs[k % len(refs)]
            rec = ImageRecord(f"{instance_id}_pos{k:04d}", src.pixels, instance_id, "train", mask=src.mask)
            positives.append((rec, Provenance("real_only", config.seed, None, None, {"source_image": src.id})))
    else:
        client = _client_for(config.kind)
        positives = []
        rng = np.random.default_rng([config.seed, 1])
        for k in range(n):
            caption = _pick_caption(corpus, entry.category, rng, config.use_llm_captions)
            seed = int(config.seed * 1_000_003 + k)
            imgs = client.generate(instance_id, caption, config.cfg_scale, seed, 1)
            if len(imgs) != 1:
                raise errors.ExternalGeneratorError(f"expected 1 image, got {len(imgs)}")
            rec = ImageRecord(f"{instance_id}_pos{k:04d}", imgs[0], instance_id, "train")
            positives.append((rec, Provenance(config.kind, seed, config.cfg_scale, caption)))

    negatives = synthesize_negatives(entry.category, config, workers)
    prov = {rec.id: p for rec, p in positives + negatives}
    return SyntheticPool(instance_id, [r for r, _ in positives], [r for r, _ in negatives], prov)
