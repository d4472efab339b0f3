"""Caption corpora with the ``<new1>`` identifier token, and background captions
derived from them for Cut-and-Paste background synthesis."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

from persrep import errors

TOKEN = "<new1>"
_PREPOSITIONS = ("on", "in", "at", "inside", "under", "near", "by", "beside", "with", "into", "onto")
_ARTICLES = ("a", "an", "the")


@dataclass(frozen=True)
class CaptionEntry:
    template: str
    category: str

    def __post_init__(self):
        n = self.template.count(TOKEN)
        if n == 0:
            raise errors.MissingIdentifierToken(self.template)
        if n > 1:
            raise errors.MalformedTemplate(f"{TOKEN} appears {n} times in {self.template!r}")

    def render(self, identifier: str = TOKEN) -> str:
        return self.template.replace(TOKEN, identifier)


@dataclass(frozen=True)
class CaptionCorpus:
    entries: tuple[CaptionEntry, ...]
    background_overrides: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_json(cls, doc: dict) -> "CaptionCorpus":
        entries = tuple(CaptionEntry(e["template"], e["category"]) for e in doc["entries"])
        return cls(entries, dict(doc.get("background_overrides", {})))

    @classmethod
    def load(cls, path=None) -> "CaptionCorpus":
        if path is None:
            text = resources.files("persrep.resources").joinpath("captions.json").read_text("utf-8")
        else:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        return cls.from_json(json.loads(text))

    def for_category(self, category: str) -> "CaptionCorpus":
        picked = tuple(e for e in self.entries if e.category == category)
        return CaptionCorpus(picked or self.entries, self.background_overrides)

    def backgrounds(self) -> list[str]:
        return [strip_identifier(e.template, e.category, self) for e in self.entries]


def _fix_articles(text: str) -> str:
    words = text.split()
    out: list[str] = []
    for w in words:
        # "a the rain" -> "the rain", keeping the first word's capitalisation
        if out and out[-1].lower() in _ARTICLES and w.lower() in _ARTICLES:
            cap = out[-1][0].isupper()
            out[-1] = w.capitalize() if cap else w.lower()
            continue
        out.append(w)
    for i, w in enumerate(out[:-1]):
        if w.lower() in ("a", "an"):
            want = "an" if out[i + 1][0].lower() in "aeiou" else "a"
            out[i] = want.capitalize() if w[0].isupper() else want
    while out and out[-1].lower() in _ARTICLES + _PREPOSITIONS + ("of",):
        out.pop()
    return " ".join(out)


def strip_identifier(template: str, category: str, corpus: Optional[CaptionCorpus] = None) -> str:
    """Turn an instance caption into a background caption.

    Curated overrides win. Otherwise the phrase ``[article] <new1> [category]
    [preposition]`` is dropped and articles are repaired, so
    ``"A <new1> mug on a wooden desk"`` becomes ``"A wooden desk"``.
    """
    n = template.count(TOKEN)
    if n == 0:
        raise errors.MissingIdentifierToken(template)
    if n > 1:
        raise errors.MalformedTemplate(f"{TOKEN} appears {n} times in {template!r}")
    if corpus is not None and template in corpus.background_overrides:
        return corpus.background_overrides[template]

    pattern = re.compile(
        r"(?P<art>\b(?:a|an|the)\s+)?" + re.escape(TOKEN)
        + (r"(?:\s+" + re.escape(category) + r"s?\b)?" if category else "")
        + r"(?:\s+(?:" + "|".join(_PREPOSITIONS) + r")\b)?\s*",
        re.IGNORECASE,
    )
    m = pattern.search(template)
    head, tail = template[: m.start()], template[m.end():]
    result = _fix_articles(" ".join((head + " " + tail).split()))
    if not result:
        raise errors.MalformedTemplate(f"{template!r} leaves an empty background caption")
    if template[:1].isupper():
        result = result[0].upper() + result[1:]
    return result
