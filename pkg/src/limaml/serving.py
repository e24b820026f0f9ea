"""Online scoring with the global block and stored meta embeddings.

Only forward code is reachable from here: this module imports
:mod:`limaml.inference` and :mod:`limaml.store`, never the autodiff core.
"""
from __future__ import annotations

import json
import logging
import math
import socketserver
import threading
from dataclasses import dataclass
from typing import IO, Mapping, Sequence

import numpy as np

from . import inference
from .store import EmbeddingSnapshot, read_checkpoint, read_snapshot

log = logging.getLogger(__name__)

FALLBACKS = ("zero", "mean")


class ServingError(ValueError):
    """Startup problem: artifacts missing, unreadable or incompatible."""


class RequestError(ValueError):
    """One malformed request; the batch goes on."""


@dataclass(frozen=True)
class ScoreRequest:
    task_key: str
    other_features: tuple
    meta_features: tuple | None = None

    @classmethod
    def from_mapping(cls, obj) -> "ScoreRequest":
        if not isinstance(obj, Mapping):
            raise RequestError("request must be a JSON object")
        key = obj.get("task_key")
        if not isinstance(key, str):
            raise RequestError("task_key must be a string")
        other = _features(obj.get("other_features"), "other_features")
        meta = obj.get("meta_features")
        return cls(key, other, None if meta is None else _features(meta, "meta_features"))


@dataclass(frozen=True)
class ScoreResponse:
    score: float
    embedding_source: str
    version: str

    def to_json(self) -> str:
        return json.dumps({"score": self.score, "embedding_source": self.embedding_source, "version": self.version})


def _features(values, name: str) -> tuple:
    if not isinstance(values, list):
        raise RequestError(f"{name} must be a list of numbers")
    out = []
    for v in values:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise RequestError(f"{name} must contain finite numbers")
        out.append(float(v))
    return tuple(out)


def _embed_dim(descriptor: Mapping) -> int:
    mb = descriptor["meta_block"]
    return int(mb["embed_dim"]) if mb["kind"] == "id-embedding" else int(mb["mlp"]["widths"][-1])


class Scorer:
    """Global block plus a snapshot; immutable once built."""

    def __init__(self, descriptor: Mapping, theta_global: Mapping[str, np.ndarray], snapshot: EmbeddingSnapshot, fallback: str = "zero"):
        if descriptor.get("kind") != "split":
            raise ServingError("serving needs a split (meta block + global block) checkpoint")
        if fallback not in FALLBACKS:
            raise ServingError(f"fallback must be one of {FALLBACKS}")
        self.embed_dim = _embed_dim(descriptor)
        if snapshot.dim != self.embed_dim:
            raise ServingError(f"snapshot dim {snapshot.dim} != model embedding dim {self.embed_dim}")
        self.global_spec = dict(descriptor["global"])
        self.meta_dim = int(descriptor["meta_dim"])
        self.other_dim = int(descriptor["other_dim"])
        self.meta_to_global = bool(descriptor["meta_to_global"])
        self.theta_global = {k: np.array(v, dtype=np.float64) for k, v in theta_global.items() if k.startswith("global.")}
        for v in self.theta_global.values():
            v.flags.writeable = False
        self.snapshot = snapshot
        self.fallback = fallback
        self.fallback_vector = np.zeros(self.embed_dim, dtype=np.float32) if fallback == "zero" else snapshot.mean_vector()

    @classmethod
    def from_files(cls, checkpoint_path, snapshot_path, fallback: str = "zero") -> "Scorer":
        try:
            ckpt = read_checkpoint(checkpoint_path)
            snap = read_snapshot(snapshot_path)
        except (OSError, ValueError) as exc:
            raise ServingError(str(exc)) from exc
        return cls(ckpt.descriptor, ckpt.params, snap, fallback)

    def embedding(self, task_key: str) -> tuple[np.ndarray, str]:
        vec = self.snapshot.lookup(task_key)
        if vec is None:
            return self.fallback_vector, "fallback"
        return vec, "stored"

    def score(self, request: ScoreRequest | Mapping) -> ScoreResponse:
        if not isinstance(request, ScoreRequest):
            request = ScoreRequest.from_mapping(request)
        if len(request.other_features) != self.other_dim:
            raise RequestError(f"other_features has {len(request.other_features)} values, expected {self.other_dim}")
        meta = None
        if self.meta_to_global:
            if request.meta_features is None:
                raise RequestError("meta_features are required by this model")
            if len(request.meta_features) != self.meta_dim:
                raise RequestError(f"meta_features has {len(request.meta_features)} values, expected {self.meta_dim}")
            meta = np.array([request.meta_features])
        vec, source = self.embedding(request.task_key)
        emb = vec.astype(np.float64)[None, :]
        p = inference.global_scores(self.global_spec, self.theta_global, emb, meta, np.array([request.other_features]), self.meta_to_global)[0]
        if not math.isfinite(p):
            raise RequestError("non-finite score")
        return ScoreResponse(float(p), source, self.snapshot.version)

    def handle_line(self, line: str) -> str:
        """One request line in, one response line out (errors included)."""
        try:
            obj = json.loads(line)
        except ValueError as exc:
            return json.dumps({"error": f"malformed JSON: {exc.msg}"})
        try:
            return self.score(obj).to_json()
        except RequestError as exc:
            return json.dumps({"error": str(exc)})


def batch_score(scorer: Scorer, lines: IO[str] | Sequence[str], out: IO[str]) -> int:
    """Score JSON-lines requests in order; returns the number of responses.

    Blank lines are skipped; every other line gets exactly one response.
    """
    n = 0
    for line in lines:
        if not line.strip():
            continue
        out.write(scorer.handle_line(line) + "\n")
        n += 1
    out.flush()
    return n


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        for raw in self.rfile:
            line = raw.decode("utf-8", errors="replace")
            if not line.strip():
                continue
            self.wfile.write((self.server.scorer.handle_line(line) + "\n").encode("utf-8"))
            self.wfile.flush()


class ScoringServer(socketserver.ThreadingTCPServer):
    """Line protocol over TCP: one JSON request per line, one response per line."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, scorer: Scorer, host: str = "127.0.0.1", port: int = 0):
        self.scorer = scorer
        super().__init__((host, port), _Handler)

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return t
