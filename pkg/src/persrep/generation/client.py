"""HTTP client for an external image generator.

Wire format: POST ``{endpoint}`` with JSON
``{"instance_id", "caption", "cfg_scale", "seed", "n"}``; the response is JSON
``{"images": [<base64 PNG>, ...]}`` holding exactly ``n`` images.
"""
from __future__ import annotations

import base64
import io
import json
import logging
import os
import time
import urllib.error
import urllib.request
from typing import Optional

import numpy as np
from PIL import Image

from persrep import errors

log = logging.getLogger(__name__)

ENV_ENDPOINT = "PERSREP_GEN_ENDPOINT"
ENV_TIMEOUT = "PERSREP_GEN_TIMEOUT_S"


def encode_png(pixels: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), "RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png(text: str) -> np.ndarray:
    with Image.open(io.BytesIO(base64.b64decode(text))) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


class ExternalGeneratorClient:
    def __init__(self, endpoint: Optional[str] = None, timeout_s: Optional[float] = None, retries: int = 2,
                 backoff_s: float = 0.5):
        self.endpoint = endpoint or os.environ.get(ENV_ENDPOINT)
        self.timeout_s = float(timeout_s if timeout_s is not None else os.environ.get(ENV_TIMEOUT, 60))
        self.retries = retries
        self.backoff_s = backoff_s

    def generate(self, instance_id: str, caption: str, cfg_scale: float, seed: int, n: int) -> list[np.ndarray]:
        if not self.endpoint:
            raise errors.BackendUnavailable(f"no generator endpoint; set {ENV_ENDPOINT}")
        body = json.dumps({"instance_id": instance_id, "caption": caption, "cfg_scale": cfg_scale,
                           "seed": int(seed), "n": int(n)}).encode()
        last = None
        for attempt in range(self.retries + 1):
            req = urllib.request.Request(self.endpoint, data=body,
                                         headers={"Content-Type": "application/json"}, method="POST")
            try:
                with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                    doc = json.loads(resp.read())
                break
            except (urllib.error.URLError, TimeoutError, json.JSONDecodeError) as exc:
                last = exc
                log.warning("generator request failed (attempt %d): %s", attempt + 1, exc)
                time.sleep(self.backoff_s * (attempt + 1))
        else:
            raise errors.ExternalGeneratorError(f"generator at {self.endpoint} failed: {last}")
        images = doc.get("images") if isinstance(doc, dict) else None
        if not isinstance(images, list) or len(images) != n:
            got = len(images) if isinstance(images, list) else "no"
            raise errors.ExternalGeneratorError(f"expected {n} images, got {got}")
        try:
            return [decode_png(s) for s in images]
        except Exception as exc:  # undecodable payloads
            raise errors.ExternalGeneratorError(f"bad image payload: {exc}") from exc
