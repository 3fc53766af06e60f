"""Set-level generation metrics over pairwise distance matrices.

1-NNA, coverage and minimum matching distance consume a DistanceMatrix (or
raw array); the part-averaged "-P" variants take the two cloud sets and
reduce per-part sub-clouds with plain Chamfer.  Tie rules are fixed: the
1-NNA nearest neighbor breaks ties toward the opposite set, argmin ties go
to the lowest index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import PointCloudSet
from .distances import DistanceMatrix, chamfer
from .errors import (
    DegenerateSet,
    LabelOutOfRange,
    LengthMismatch,
    PartUniversallyAbsent,
)

TOOL_VERSION = "0.1.0"
TIE_RULE = "opposite-then-lowest-index"


def _values(m) -> np.ndarray:
    if isinstance(m, DistanceMatrix):
        return m.values
    return np.asarray(m, dtype=np.float64)


def _offdiag_min(d: np.ndarray) -> np.ndarray:
    masked = d.copy()
    np.fill_diagonal(masked, np.inf)
    return masked.min(axis=1)


def one_nna(d_rr, d_rg, d_gg) -> float:
    """Fraction of samples in R and G whose nearest neighbor is in their own set.

    Self-distances are excluded; a same/opposite tie counts as opposite.
    0.5 means the two sets are statistically indistinguishable.
    """
    rr, rg, gg = _values(d_rr), _values(d_rg), _values(d_gg)
    nr, ng = rr.shape[0], gg.shape[0]
    if nr < 2 or ng < 2:
        raise DegenerateSet(f"1-NNA needs |R| >= 2 and |G| >= 2, got {nr}, {ng}")
    if rr.shape != (nr, nr) or gg.shape != (ng, ng) or rg.shape != (nr, ng):
        raise DegenerateSet(
            f"inconsistent blocks: rr{rr.shape} rg{rg.shape} gg{gg.shape}"
        )
    same = 0
    r_same = _offdiag_min(rr)
    r_opp = rg.min(axis=1)
    same += int(np.count_nonzero(r_same < r_opp))
    g_same = _offdiag_min(gg)
    g_opp = rg.min(axis=0)
    same += int(np.count_nonzero(g_same < g_opp))
    return same / (nr + ng)


def coverage(d_gr) -> float:
    """Fraction of real samples that are the nearest neighbor of some generated one."""
    gr = _values(d_gr)
    if gr.shape[0] < 1 or gr.shape[1] < 1:
        raise DegenerateSet("coverage needs non-empty sets")
    matched = np.unique(gr.argmin(axis=1))  # argmin ties -> lowest index
    return matched.size / gr.shape[1]


def mmd(d_gr) -> float:
    """Mean over real samples of the distance to the nearest generated one.

    +inf entries participate: a real sample with no finite match makes the
    result +inf.
    """
    gr = _values(d_gr)
    if gr.shape[0] < 1 or gr.shape[1] < 1:
        raise DegenerateSet("MMD needs non-empty sets")
    mins = gr.min(axis=0)
    total = 0.0
    for v in mins:  # fixed left-to-right reduction
        total += float(v)
    return total / gr.shape[1]


def _part_subsets(r: PointCloudSet, g: PointCloudSet):
    """Per-part lists of point arrays, skipping clouds that lack the part."""
    present = set()
    for cloud in list(r) + list(g):
        present |= cloud.part_set()
    subsets = {}
    for p in sorted(present):
        rp = [c.part_points(p) for c in r if p in c.part_set()]
        gp = [c.part_points(p) for c in g if p in c.part_set()]
        if not rp or not gp:
            missing = r.name or "R" if not rp else g.name or "G"
            raise PartUniversallyAbsent(
                f"part {p} ({r.vocab.names[p]}) absent from every cloud of {missing}"
            )
        subsets[p] = (rp, gp)
    return subsets


def _chamfer_block(xs, ys) -> np.ndarray:
    out = np.empty((len(xs), len(ys)))
    for i, x in enumerate(xs):
        for j, y in enumerate(ys):
            out[i, j] = chamfer(x, y)
    return out


def part_averaged_metric(metric: str, r: PointCloudSet, g: PointCloudSet) -> float:
    """Per-part metric (Chamfer on part sub-clouds), averaged over parts.

    metric is one of "1nna", "cov", "mmd".
    """
    if metric not in ("1nna", "cov", "mmd"):
        raise LookupError(f"unknown part-averaged metric {metric!r}")
    subsets = _part_subsets(r, g)
    total = 0.0
    for p, (rp, gp) in subsets.items():
        if metric == "1nna":
            rr = _chamfer_block(rp, rp)
            rg = _chamfer_block(rp, gp)
            gg = _chamfer_block(gp, gp)
            total += one_nna(rr, rg, gg)
        else:
            gr = _chamfer_block(gp, rp)
            total += coverage(gr) if metric == "cov" else mmd(gr)
    return total / len(subsets)


def miou(pred_labels, true_labels, c: int) -> float:
    """Mean intersection-over-union over the parts present in the ground truth."""
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    if pred.shape != true.shape:
        raise LengthMismatch(f"label lengths differ: {pred.shape} vs {true.shape}")
    for arr, name in ((pred, "pred"), (true, "true")):
        if arr.size and (arr.min() < 0 or arr.max() >= c):
            raise LabelOutOfRange(f"{name} labels outside [0, {c})")
    total = 0.0
    parts = np.unique(true)
    for p in parts:
        inter = np.count_nonzero((pred == p) & (true == p))
        union = np.count_nonzero((pred == p) | (true == p))
        total += inter / union
    return total / parts.size


@dataclass
class MetricReport:
    """Serialized result of one metric evaluation."""

    metric: str
    distance: str
    value: float
    r_size: int
    g_size: int
    tie_rule: str = TIE_RULE
    seed: int = 0
    version: str = TOOL_VERSION
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        value = "inf" if np.isinf(self.value) else self.value
        out = {
            "metric": self.metric,
            "distance": self.distance,
            "value": value,
            "r_size": self.r_size,
            "g_size": self.g_size,
            "tie_rule": self.tie_rule,
            "seed": self.seed,
            "version": self.version,
        }
        if self.config:
            out["config"] = self.config
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "MetricReport":
        value = obj["value"]
        return cls(
            metric=obj["metric"],
            distance=obj["distance"],
            value=float("inf") if value == "inf" else float(value),
            r_size=int(obj["r_size"]),
            g_size=int(obj["g_size"]),
            tie_rule=obj.get("tie_rule", TIE_RULE),
            seed=int(obj.get("seed", 0)),
            version=obj.get("version", TOOL_VERSION),
            config=obj.get("config", {}),
        )

    def render(self) -> str:
        """Human-readable line; fraction metrics are shown as percentages."""
        if self.metric.startswith(("1nna", "cov")):
            shown = "inf" if np.isinf(self.value) else f"{100.0 * self.value:.2f}%"
        else:
            shown = "inf" if np.isinf(self.value) else f"{self.value:.6g}"
        return f"{self.metric}({self.distance}) = {shown}"

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")
