"""Cloud-to-cloud distance kernels and the pairwise distance-matrix engine.

Chamfer uses squared Euclidean nearest-neighbor terms; the exact EMD uses
plain Euclidean ground cost and an exact assignment solve.  All kernels are
pure functions; the matrix engine parallelizes across output rows only, so
results are byte-identical for any thread count.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import LabeledPointCloud, PointCloudSet
from .errors import (
    EmptyInput,
    MalformedHeader,
    PcgenError,
    SinglePart,
    SizeMismatch,
    TooLarge,
    VocabMismatch,
)

EMD_DEFAULT_CAP = 256


class DistanceKind(str, Enum):
    CD = "cd"
    EMD = "emd"
    PCD = "pcd"


def _points(x) -> np.ndarray:
    if isinstance(x, LabeledPointCloud):
        return x.points
    return np.asarray(x, dtype=np.float64)


def squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense (|a|, |b|) matrix of squared Euclidean distances (GEMM form).

    The -2ab + (|a|^2 + |b|^2) evaluation order keeps the result exactly
    transpose-symmetric: squared_distances(b, a) == squared_distances(a, b).T
    bit for bit.  Cancellation can leave ~1e-16 residue where the true
    distance is zero; use exact_squared_distances when exact zeros matter.
    """
    na = np.einsum("ij,ij->i", a, a)
    nb = np.einsum("ij,ij->i", b, b)
    d = a @ b.T
    d *= -2.0
    d += np.add.outer(na, nb)
    np.maximum(d, 0.0, out=d)
    return d


def exact_squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise (a_i - b_j)^2 accumulation: slower, but coincident points
    give exactly zero and transpose symmetry holds bit for bit."""
    d = np.subtract.outer(a[:, 0], b[:, 0])
    d *= d
    for k in range(1, a.shape[1]):
        t = np.subtract.outer(a[:, k], b[:, k])
        t *= t
        d += t
    return d


def chamfer(x1, x2) -> float:
    """Symmetric Chamfer distance: mean squared nearest-neighbor gap, both ways.

    Identical point arrays short-circuit to exactly 0.0.
    """
    a = _points(x1)
    b = _points(x2)
    if a.size == 0 or b.size == 0:
        raise EmptyInput("chamfer requires non-empty point arrays")
    if a.shape == b.shape and np.array_equal(a, b):
        return 0.0
    d = squared_distances(a, b)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


def part_aware_chamfer(x1: LabeledPointCloud, x2: LabeledPointCloud) -> float:
    """Sum of per-part Chamfer distances; +inf when the part sets differ."""
    if x1.vocab.c != x2.vocab.c:
        raise VocabMismatch(
            f"clouds disagree on part count: {x1.vocab.c} vs {x2.vocab.c}"
        )
    p1 = x1.part_set()
    if p1 != x2.part_set():
        return float("inf")
    total = 0.0
    for p in sorted(p1):
        total += chamfer(x1.part_points(p), x2.part_points(p))
    return total


def emd_exact(x1, x2, cap: int = EMD_DEFAULT_CAP) -> float:
    """Earth mover's distance under an exact one-to-one point assignment.

    Ground cost is plain Euclidean distance; the optimum over permutations
    is solved exactly, so inputs are capped at ``cap`` points.
    """
    a = _points(x1)
    b = _points(x2)
    if a.shape[0] != b.shape[0]:
        raise SizeMismatch(f"EMD requires equal sizes, got {a.shape[0]} vs {b.shape[0]}")
    n = a.shape[0]
    if n == 0:
        raise EmptyInput("EMD requires non-empty point arrays")
    if n > cap:
        raise TooLarge(
            f"EMD on {n} points exceeds cap {cap}; raise the cap to allow this"
        )
    cost = np.sqrt(exact_squared_distances(a, b))
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / n)


def _nearest_subset(src: np.ndarray, other: np.ndarray, k: int) -> np.ndarray:
    """The k points of src closest to the other part (stable order on ties)."""
    gap = squared_distances(src, other).min(axis=1)
    order = np.argsort(gap, kind="stable")[: min(k, src.shape[0])]
    return src[order]


def snap_score(
    x: LabeledPointCloud, n_snap: int = 30, contact_delta: float = 0.05
) -> float:
    """Connection-tightness score over contacting part pairs.

    For each part the score is the minimum, over contacting parts, of the
    Chamfer distance between the two mutually nearest ``n_snap``-point
    subsets.  Parts contact when their minimum inter-part distance is at
    most ``contact_delta`` times the bounding-box diagonal; a part with no
    contact falls back to its globally nearest part.
    """
    parts = sorted(x.part_set())
    if len(parts) < 2:
        raise SinglePart("snap_score requires at least two parts present")
    pts = {p: x.part_points(p) for p in parts}
    diag = float(np.linalg.norm(x.points.max(axis=0) - x.points.min(axis=0)))
    threshold = contact_delta * diag

    gap = {}  # (p1, p2) -> min inter-part distance
    for i, p1 in enumerate(parts):
        for p2 in parts[i + 1 :]:
            g = float(np.sqrt(squared_distances(pts[p1], pts[p2]).min()))
            gap[(p1, p2)] = gap[(p2, p1)] = g

    total = 0.0
    for p1 in parts:
        others = [p for p in parts if p != p1]
        contacts = [p for p in others if gap[(p1, p)] <= threshold]
        if not contacts:
            contacts = [min(others, key=lambda p: (gap[(p1, p)], p))]
        best = float("inf")
        for p2 in contacts:
            s1 = _nearest_subset(pts[p1], pts[p2], n_snap)
            s2 = _nearest_subset(pts[p2], pts[p1], n_snap)
            best = min(best, chamfer(s1, s2))
        total += best
    return total / len(parts)


@dataclass
class DistanceMatrix:
    """Dense |A| x |B| pairwise distances under one distance kind."""

    values: np.ndarray  # (rows, cols) float64, finite or +inf
    kind: str
    a_name: str = ""
    b_name: str = ""

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    def transpose(self) -> "DistanceMatrix":
        return DistanceMatrix(self.values.T.copy(), self.kind, self.b_name, self.a_name)

    def to_json(self) -> dict:
        vals = [
            [("inf" if np.isinf(v) else v) for v in row]
            for row in self.values.tolist()
        ]
        return {
            "kind": self.kind,
            "rows": self.rows,
            "cols": self.cols,
            "a": self.a_name,
            "b": self.b_name,
            "values": vals,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DistanceMatrix":
        try:
            vals = np.array(
                [
                    [np.inf if v == "inf" else float(v) for v in row]
                    for row in obj["values"]
                ],
                dtype=np.float64,
            )
            if vals.size == 0:
                vals = vals.reshape(int(obj["rows"]), int(obj["cols"]))
            dm = cls(vals, obj["kind"], obj.get("a", ""), obj.get("b", ""))
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedHeader(f"invalid distance matrix JSON: {exc}") from exc
        if dm.values.shape != (int(obj["rows"]), int(obj["cols"])):
            raise MalformedHeader("distance matrix shape disagrees with rows/cols")
        return dm

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n")

    @classmethod
    def load(cls, path) -> "DistanceMatrix":
        return cls.from_json(json.loads(Path(path).read_text()))


def _kernel_for(kind, emd_cap: int):
    kind = DistanceKind(kind)
    if kind == DistanceKind.CD:
        return lambda a, b: chamfer(a.points, b.points)
    if kind == DistanceKind.EMD:
        return lambda a, b: emd_exact(a.points, b.points, cap=emd_cap)
    return part_aware_chamfer


def resolve_threads(threads: int | None) -> int:
    """Explicit thread count, else PCGEN_THREADS, else 1."""
    if threads is not None and threads >= 1:
        return int(threads)
    env = os.environ.get("PCGEN_THREADS", "")
    if env.isdigit() and int(env) >= 1:
        return int(env)
    return 1


def distance_matrix(
    a: PointCloudSet,
    b: PointCloudSet,
    kind="cd",
    threads: int | None = None,
    emd_cap: int = EMD_DEFAULT_CAP,
) -> DistanceMatrix:
    """values[i][j] = kind-distance(a[i], b[j]).

    Parallelism fans rows out to a thread pool; every entry is produced by
    the same scalar kernel call as a direct invocation, so the result is
    byte-identical for any thread count.
    """
    kind = DistanceKind(kind)
    if kind == DistanceKind.PCD and a.vocab.c != b.vocab.c:
        raise VocabMismatch(
            f"PCD requires matching vocabularies ({a.vocab.c} vs {b.vocab.c} parts)"
        )
    kernel = _kernel_for(kind, emd_cap)
    out = np.empty((len(a), len(b)), dtype=np.float64)

    def fill_row(i):
        ai = a[i]
        row = out[i]
        for j in range(len(b)):
            try:
                row[j] = kernel(ai, b[j])
            except PcgenError as exc:
                raise type(exc)(f"entry ({i}, {j}): {exc}") from exc

    nthreads = resolve_threads(threads)
    if nthreads <= 1 or len(a) <= 1:
        for i in range(len(a)):
            fill_row(i)
    else:
        with ThreadPoolExecutor(max_workers=nthreads) as pool:
            list(pool.map(fill_row, range(len(a))))
    return DistanceMatrix(out, kind.value, a.name, b.name)
