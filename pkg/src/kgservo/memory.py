"""Demonstration store and similarity-based experience retrieval.

Demonstrations pair a first-frame image with an event-knowledge-graph
file.  Retrieval ranks stored demonstrations by cosine similarity of
image embeddings; the built-in embedder is a deterministic 64-dim
block-mean descriptor so nothing here needs model weights.  Any embedder
with ``embed(image) -> unit vector`` can be plugged in instead.
"""

from __future__ import annotations

import fcntl
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import ekg, pgm


class StoreError(Exception):
    pass


class EmptyStore(StoreError):
    pass


class PersistFailure(StoreError):
    pass


class Embedder(Protocol):
    def embed(self, image: np.ndarray) -> np.ndarray: ...


def builtin_embed(image) -> np.ndarray:
    """64-dim image descriptor: 8x8 block means, mean-subtracted, unit norm.

    Deterministic stand-in for a learned visual encoder; constant images
    fall back to the uniform vector (all entries 1/8) so the output is
    always unit length.
    """
    arr = np.asarray(image, dtype=float)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError("embed expects a non-empty grayscale or RGB image")
    if arr.shape[0] < 8 or arr.shape[1] < 8:
        reps = (math.ceil(8 / arr.shape[0]), math.ceil(8 / arr.shape[1]))
        arr = np.repeat(np.repeat(arr, reps[0], axis=0), reps[1], axis=1)
    means = np.array(
        [
            [block.mean() for block in np.array_split(strip, 8, axis=1)]
            for strip in np.array_split(arr, 8, axis=0)
        ]
    ).reshape(-1)
    centered = means - means.mean()
    norm = np.linalg.norm(centered)
    if norm < 1e-12:
        return np.full(64, 1.0 / 8.0)
    return centered / norm


class BuiltinEmbedder:
    dimension = 64

    def embed(self, image) -> np.ndarray:
        return builtin_embed(image)


@dataclass
class Demonstration:
    id: str
    frame_path: Path
    graph_path: Path
    task: str
    object_label: str
    frame_w: int
    frame_h: int

    def frame(self) -> np.ndarray:
        return pgm.read_pgm(self.frame_path)

    def graph(self) -> ekg.Graph:
        return ekg.parse(self.graph_path.read_text())


class MemoryStore:
    """Directory-backed store: one subdirectory per demonstration.

    Layout per demo: ``{id}/frame.pgm``, ``{id}/graph.ekg``,
    ``{id}/meta.json``.  Writers take an advisory lock file; readers are
    lock-free.
    """

    def __init__(self, root):
        self.root = Path(root)

    def list_demos(self) -> list[Demonstration]:
        if not self.root.is_dir():
            return []
        demos = []
        for meta_path in sorted(self.root.glob("*/meta.json")):
            meta = json.loads(meta_path.read_text())
            d = meta_path.parent
            demos.append(
                Demonstration(
                    id=meta["id"],
                    frame_path=d / "frame.pgm",
                    graph_path=d / "graph.ekg",
                    task=meta.get("task", ""),
                    object_label=meta.get("object", ""),
                    frame_w=meta.get("frame_w", 0),
                    frame_h=meta.get("frame_h", 0),
                )
            )
        demos.sort(key=lambda d: d.id)
        return demos

    def __len__(self) -> int:
        return len(self.list_demos())

    def _next_id(self) -> str:
        existing = {d.id for d in self.list_demos()}
        n = 0
        while f"d{n:04d}" in existing:
            n += 1
        return f"d{n:04d}"

    def remember(
        self,
        graph: ekg.Graph,
        frame: np.ndarray,
        task: str = "",
        object_label: str = "",
        demo_id: str | None = None,
        created_ms: int | None = None,
    ) -> Demonstration:
        """Persist a new demonstration; ids never collide or dedup."""
        frame = np.asarray(frame, dtype=float)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            lock_path = self.root / ".lock"
            with open(lock_path, "w") as lock:
                fcntl.flock(lock, fcntl.LOCK_EX)
                demo_id = demo_id if demo_id is not None else self._next_id()
                d = self.root / demo_id
                if d.exists():
                    raise PersistFailure(f"demonstration id {demo_id!r} already exists")
                d.mkdir()
                pgm.write_pgm(d / "frame.pgm", frame)
                (d / "graph.ekg").write_text(ekg.serialize(graph))
                meta = {
                    "id": demo_id,
                    "task": task,
                    "object": object_label,
                    "frame_w": int(frame.shape[1]),
                    "frame_h": int(frame.shape[0]),
                    "created_ms": int(time.time() * 1000)
                    if created_ms is None
                    else int(created_ms),
                }
                (d / "meta.json").write_text(json.dumps(meta, indent=1) + "\n")
        except OSError as exc:
            raise PersistFailure(f"cannot persist demonstration: {exc}") from exc
        return Demonstration(
            id=demo_id,
            frame_path=d / "frame.pgm",
            graph_path=d / "graph.ekg",
            task=task,
            object_label=object_label,
            frame_w=int(frame.shape[1]),
            frame_h=int(frame.shape[0]),
        )

    def retrieve(
        self, query_image, k: int, embedder: Embedder | None = None
    ) -> list[tuple[Demonstration, float]]:
        """Top-k demonstrations by cosine similarity, descending.

        Ties break on demonstration id so insertion order never matters.
        """
        demos = self.list_demos()
        if not demos:
            raise EmptyStore(f"no demonstrations under {self.root}")
        if not 1 <= k <= len(demos):
            raise ValueError(f"k={k} outside 1..{len(demos)}")
        embedder = embedder or BuiltinEmbedder()
        query = np.asarray(embedder.embed(query_image), dtype=float)
        scored = []
        for demo in demos:
            v = np.asarray(embedder.embed(demo.frame()), dtype=float)
            score = float(np.clip(query @ v, -1.0, 1.0))
            scored.append((demo, score))
        scored.sort(key=lambda pair: (-pair[1], pair[0].id))
        return scored[:k]


def remember(graph, frame, metadata: dict, store: MemoryStore) -> Demonstration:
    return store.remember(
        graph,
        frame,
        task=metadata.get("task", ""),
        object_label=metadata.get("object", ""),
        demo_id=metadata.get("id"),
        created_ms=metadata.get("created_ms"),
    )


def retrieve(query_image, store: MemoryStore, k: int, embedder=None):
    return store.retrieve(query_image, k, embedder)
