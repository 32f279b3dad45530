"""Hierarchical navigable small world index over unit-norm vectors.

Similarity is the dot product (vectors are expected L2-normalized).
Construction is fully deterministic for a fixed seed and insertion order,
and the serialized form is byte-stable so repeated builds can be diffed.
"""

from __future__ import annotations

import heapq
import json
import math
import struct
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"FGTR1"


class IndexError_(Exception):
    """Raised for malformed index files or invalid queries."""


class HNSWIndex:
    def __init__(
        self,
        dimension: int,
        m: int = 16,
        ef_construction: int = 200,
        seed: int = 0,
    ):
        self.dimension = dimension
        self.m = m
        self.m_max0 = 2 * m
        self.ef_construction = ef_construction
        self.seed = seed
        self._ml = 1.0 / math.log(m) if m > 1 else 1.0
        self._rng = np.random.default_rng(seed)
        self._data = np.empty((0, dimension), dtype=np.float64)
        self._count = 0
        # adjacency[layer][node] -> list of neighbor ids
        self._adjacency: list[dict[int, list[int]]] = []
        self._node_level: list[int] = []
        self._entry: Optional[int] = None

    def __len__(self) -> int:
        return self._count

    @property
    def vectors(self) -> np.ndarray:
        return self._data[: self._count]

    def _append_vector(self, vec: np.ndarray) -> int:
        if self._count == self._data.shape[0]:
            grown = np.empty((max(64, 2 * self._data.shape[0]), self.dimension))
            grown[: self._count] = self._data[: self._count]
            self._data = grown
        self._data[self._count] = vec
        self._count += 1
        return self._count - 1

    # -- construction ------------------------------------------------------

    def add(self, vector: np.ndarray) -> int:
        vec = np.asarray(vector, dtype=np.float64)
        if vec.shape != (self.dimension,):
            raise IndexError_(f"vector shape {vec.shape} != ({self.dimension},)")
        node = self._append_vector(vec)
        level = int(-math.log(max(self._rng.random(), 1e-12)) * self._ml)
        self._node_level.append(level)
        while len(self._adjacency) <= level:
            self._adjacency.append({})
        for lay in range(level + 1):
            self._adjacency[lay][node] = []

        if self._entry is None:
            self._entry = node
            return node

        ep = self._entry
        top = self._node_level[self._entry]
        # greedy descent on layers above the node's level
        for lay in range(top, level, -1):
            ep = self._greedy_step(vec, ep, lay)
        # full searches on the node's layers
        for lay in range(min(level, top), -1, -1):
            candidates = self._search_layer(vec, [ep], self.ef_construction, lay)
            m_max = self.m_max0 if lay == 0 else self.m
            neighbors = [n for _, n in heapq.nlargest(self.m, candidates)]
            self._adjacency[lay][node] = list(neighbors)
            for nb in neighbors:
                links = self._adjacency[lay][nb]
                links.append(node)
                if len(links) > m_max:
                    sims = self._sims(self._data[nb], links)
                    order = sorted(range(len(links)), key=lambda i: (-sims[i], links[i]))
                    self._adjacency[lay][nb] = [links[i] for i in order[:m_max]]
            ep = neighbors[0] if neighbors else ep
        if level > top:
            self._entry = node
        return node

    def add_batch(self, vectors: np.ndarray) -> list[int]:
        return [self.add(v) for v in vectors]

    def _sims(self, q: np.ndarray, ids: list[int]) -> np.ndarray:
        return self._data[ids] @ q

    def _greedy_step(self, q: np.ndarray, ep: int, layer: int) -> int:
        best = ep
        best_sim = float(self._data[ep] @ q)
        improved = True
        while improved:
            improved = False
            neighbors = self._adjacency[layer].get(best, [])
            if not neighbors:
                break
            sims = self._sims(q, neighbors)
            i = int(np.argmax(sims))
            if sims[i] > best_sim:
                best, best_sim = neighbors[i], float(sims[i])
                improved = True
        return best

    def _search_layer(
        self, q: np.ndarray, entry_points: list[int], ef: int, layer: int
    ) -> list[tuple[float, int]]:
        visited = set(entry_points)
        sims = self._sims(q, entry_points)
        candidates = [(-float(s), n) for s, n in zip(sims, entry_points)]
        heapq.heapify(candidates)
        results = [(float(s), n) for s, n in zip(sims, entry_points)]
        heapq.heapify(results)
        while len(results) > ef:
            heapq.heappop(results)
        while candidates:
            neg_sim, node = heapq.heappop(candidates)
            if -neg_sim < results[0][0] and len(results) >= ef:
                break
            fresh = [n for n in self._adjacency[layer].get(node, []) if n not in visited]
            if not fresh:
                continue
            visited.update(fresh)
            fresh_sims = self._sims(q, fresh)
            for s, n in zip(fresh_sims, fresh):
                s = float(s)
                if len(results) < ef or s > results[0][0]:
                    heapq.heappush(results, (s, n))
                    heapq.heappush(candidates, (-s, n))
                    if len(results) > ef:
                        heapq.heappop(results)
        return results

    # -- queries -----------------------------------------------------------

    def search(self, query: np.ndarray, k: int, ef: Optional[int] = None) -> list[tuple[int, float]]:
        """Return up to k (node id, similarity) pairs, best first.

        The default search breadth trades some latency for recall; 64 was
        measurably too narrow for five-neighbor queries on tens of
        thousands of points.
        """
        if self._entry is None:
            return []
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (self.dimension,):
            raise IndexError_(f"query shape {q.shape} != ({self.dimension},)")
        ef = ef if ef is not None else max(200, 4 * k)
        ep = self._entry
        for lay in range(self._node_level[self._entry], 0, -1):
            ep = self._greedy_step(q, ep, lay)
        results = self._search_layer(q, [ep], max(ef, k), 0)
        best = heapq.nlargest(k, results)
        return [(n, s) for s, n in best]

    # -- persistence -------------------------------------------------------

    def save(self, path: str | Path) -> None:
        meta = {
            "dimension": self.dimension,
            "m": self.m,
            "ef_construction": self.ef_construction,
            "seed": self.seed,
            "count": self._count,
            "entry": self._entry,
            "node_level": self._node_level,
            "adjacency": [
                {str(k): v for k, v in sorted(layer.items())} for layer in self._adjacency
            ],
        }
        blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        vec_bytes = self.vectors.astype("<f8").tobytes() if self._count else b""
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            fh.write(vec_bytes)

    @classmethod
    def load(cls, path: str | Path) -> "HNSWIndex":
        with open(path, "rb") as fh:
            magic = fh.read(len(MAGIC))
            if magic != MAGIC:
                raise IndexError_(f"bad index header in {path}: {magic!r}")
            (blob_len,) = struct.unpack("<Q", fh.read(8))
            meta = json.loads(fh.read(blob_len).decode("utf-8"))
            raw = fh.read()
        idx = cls(
            dimension=meta["dimension"],
            m=meta["m"],
            ef_construction=meta["ef_construction"],
            seed=meta["seed"],
        )
        count = meta["count"]
        if count:
            mat = np.frombuffer(raw, dtype="<f8").reshape(count, meta["dimension"])
            idx._data = mat.copy()
            idx._count = count
        idx._entry = meta["entry"]
        idx._node_level = list(meta["node_level"])
        idx._adjacency = [
            {int(k): list(v) for k, v in layer.items()} for layer in meta["adjacency"]
        ]
        return idx


def brute_force_search(matrix: np.ndarray, query: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Exact nearest neighbors by full cosine scan; oracle for HNSW tests."""
    sims = matrix @ np.asarray(query, dtype=np.float64)
    order = np.argsort(-sims, kind="stable")[:k]
    return [(int(i), float(sims[i])) for i in order]
