"""JSON-over-HTTP contract for hosted backends.

Every call is a ``POST`` to ``<endpoint>/<task>`` with a JSON body::

    {"seed": int, "text": str | null, "arrays": {name: <b64 .npy>}}

and a JSON reply carrying any of ``text`` (str), ``value`` (number),
``values`` (object of numbers) or ``arrays`` ({name: <b64 .npy>}).  Frames
travel as float32 ``(n, H, W, C)`` arrays in ``[0, 1]``.

Tasks used by the package: ``caption``, ``animation_prompt``, ``animate``,
``propagate``, ``quality_report`` (synthesis); ``embed_frames``,
``embed_text``, ``detect``, ``judge``, ``image_quality`` (evaluation).
"""

from __future__ import annotations

import base64
import io
import json
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass

import numpy as np

from .errors import BackendError


def encode_array(arr: np.ndarray) -> str:
    buf = io.BytesIO()
    np.save(buf, np.asarray(arr), allow_pickle=False)
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_array(data: str) -> np.ndarray:
    try:
        return np.load(io.BytesIO(base64.b64decode(data)), allow_pickle=False)
    except Exception as exc:
        raise BackendError(f"malformed array payload: {exc}") from exc


@dataclass
class RemoteClient:
    endpoint: str
    timeout: float = 60.0
    max_concurrency: int = 4

    def __post_init__(self):
        self.endpoint = self.endpoint.rstrip("/")
        self._slots = threading.BoundedSemaphore(max(1, self.max_concurrency))

    def call(self, task: str, text: str | None = None, arrays: dict | None = None, seed: int = 0) -> dict:
        body = {
            "seed": int(seed),
            "text": text,
            "arrays": {k: encode_array(v) for k, v in (arrays or {}).items()},
        }
        req = urllib.request.Request(
            f"{self.endpoint}/{task}",
            data=json.dumps(body).encode(),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        with self._slots:
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    reply = json.loads(resp.read())
            except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
                raise BackendError(f"{task} request to {self.endpoint} failed: {exc}") from exc
        if not isinstance(reply, dict):
            raise BackendError(f"{task}: reply is not a JSON object")
        if "error" in reply:
            raise BackendError(f"{task}: {reply['error']}")
        return reply

    def text(self, task: str, **kw) -> str:
        reply = self.call(task, **kw)
        if not isinstance(reply.get("text"), str):
            raise BackendError(f"{task}: reply has no text")
        return reply["text"]

    def array(self, task: str, name: str = "frames", **kw) -> np.ndarray:
        reply = self.call(task, **kw)
        try:
            return decode_array(reply["arrays"][name])
        except (KeyError, TypeError) as exc:
            raise BackendError(f"{task}: reply has no array {name!r}") from exc

    def value(self, task: str, **kw) -> float:
        reply = self.call(task, **kw)
        try:
            return float(reply["value"])
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendError(f"{task}: reply has no numeric value") from exc
