"""Procedural labeled-shape families and the part-recombination attack.

Shapes are built from per-part style parameters that are *correlated*
through a shared per-cloud latent.  Recombining parts from different
donors therefore produces clouds whose parts are individually plausible
but jointly incoherent, which is exactly what part-aware distances are
meant to expose while per-part averaged metrics are not.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .core import LabeledPointCloud, PartVocabulary, PointCloudSet
from .errors import BadConfig, InsufficientDonors, PartAbsent
from .distances import squared_distances

FAMILY_PARTS = {
    "stick-ball": ("stick", "ball"),
    "winged-body": ("body", "wing", "tail"),
}

_STYLE_DEFAULTS = {
    "stick-ball": {
        # (base, spread) ranges are all driven by one shared per-cloud latent,
        # so every pair of style parameters is correlated across parts
        "stick_length": (1.0, 0.25),
        "stick_width": (0.05, 0.015),
        "ball_radius": (0.35, 0.10),
        "ball_aspect": (1.0, 0.18),
        "ball_overlap": 0.05,          # fraction of radius sunk below the contact point
        "surface_jitter": 0.004,
        "phase_jitter": 1.0,           # 0 = deterministic sampling lattice
    },
    "winged-body": {
        "body_size": (0.45, 0.12),
        "wing_span": (1.3, 0.3),
        "tail_length": (0.45, 0.12),
        "body_aspect": 0.65,
        "bar_width": 0.025,
        "surface_jitter": 0.004,
        "phase_jitter": 1.0,
    },
}


@dataclass(frozen=True)
class ShapeFamilyConfig:
    """Configuration of one procedural shape family."""

    family: str = "stick-ball"
    d: int = 2
    points_per_part: tuple = (128, 128)
    rho: float = 0.9
    pose_jitter: float = 0.1
    seed: int = 0
    style: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILY_PARTS:
            raise BadConfig(
                f"unknown family {self.family!r}; known: {sorted(FAMILY_PARTS)}"
            )
        nparts = len(FAMILY_PARTS[self.family])
        ppp = tuple(int(m) for m in self.points_per_part)
        if len(ppp) == 1:
            ppp = ppp * nparts
        if len(ppp) != nparts:
            raise BadConfig(
                f"{self.family} has {nparts} parts, got point counts {ppp}"
            )
        if any(m < 1 for m in ppp):
            raise BadConfig("every part needs at least one point")
        if self.d not in (2, 3):
            raise BadConfig(f"d must be 2 or 3, got {self.d}")
        if not -1.0 <= self.rho <= 1.0:
            raise BadConfig(f"rho must lie in [-1, 1], got {self.rho}")
        style = dict(_STYLE_DEFAULTS[self.family])
        style.update(self.style)
        for key, val in style.items():
            if isinstance(val, tuple) and len(val) == 2 and val[1] <= 0:
                raise BadConfig(f"style range {key} must have positive spread")
        object.__setattr__(self, "points_per_part", ppp)
        object.__setattr__(self, "style", style)

    @property
    def part_names(self) -> tuple:
        return FAMILY_PARTS[self.family]

    def vocab(self) -> PartVocabulary:
        return PartVocabulary(self.part_names)

    def to_json(self) -> dict:
        style = {
            k: (list(v) if isinstance(v, tuple) else v) for k, v in self.style.items()
        }
        return {
            "family": self.family,
            "d": self.d,
            "points_per_part": list(self.points_per_part),
            "rho": self.rho,
            "pose_jitter": self.pose_jitter,
            "seed": self.seed,
            "style": style,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ShapeFamilyConfig":
        style = {
            k: (tuple(v) if isinstance(v, list) else v)
            for k, v in obj.get("style", {}).items()
        }
        return cls(
            family=obj.get("family", "stick-ball"),
            d=int(obj.get("d", 2)),
            points_per_part=tuple(obj.get("points_per_part", (128, 128))),
            rho=float(obj.get("rho", 0.9)),
            pose_jitter=float(obj.get("pose_jitter", 0.1)),
            seed=int(obj.get("seed", 0)),
            style=style,
        )


STYLE_CLIP = 2.75  # keeps base + spread * z positive for the default ranges


def _styles(rng, rho: float, k: int) -> np.ndarray:
    """k standardized style latents with pairwise correlation rho to the first."""
    shared = float(np.clip(rng.normal(), -STYLE_CLIP, STYLE_CLIP))
    out = np.empty(k)
    out[0] = shared
    for i in range(1, k):
        eta = float(np.clip(rng.normal(), -STYLE_CLIP, STYLE_CLIP))
        out[i] = rho * shared + np.sqrt(1.0 - rho * rho) * eta
    return out


def _vertical(d: int) -> int:
    return d - 1  # y for 2-D, z for 3-D


def _phase(rng, m, jitter):
    return (np.arange(m) + 0.5 + jitter * (rng.uniform(size=m) - 0.5)) / m


def _build_stick_ball(cfg: ShapeFamilyConfig, rng):
    st = cfg.style
    z = _styles(rng, cfg.rho, 4)
    length = st["stick_length"][0] + st["stick_length"][1] * z[0]
    width = st["stick_width"][0] + st["stick_width"][1] * z[1]
    radius = st["ball_radius"][0] + st["ball_radius"][1] * z[2]
    aspect = st["ball_aspect"][0] + st["ball_aspect"][1] * z[3]
    m_stick, m_ball = cfg.points_per_part
    d = cfg.d
    up = _vertical(d)
    pj = st["phase_jitter"]
    jitter = st["surface_jitter"]

    # stick: thin elongated outline hanging below the origin
    theta = 2.0 * np.pi * _phase(rng, m_stick, pj)
    stick = rng.normal(scale=jitter, size=(m_stick, d))
    stick[:, 0] += width * np.cos(theta)
    stick[:, up] += 0.5 * length * (np.sin(theta) - 1.0)
    if d == 3:
        stick[:, 1] += width * np.sin(theta) * 0.5

    # ball: ring (2-D) or sphere (3-D) squashed horizontally by the aspect,
    # sitting on the stick tip; the contact height depends on radius only
    center = np.zeros(d)
    center[up] = radius * (1.0 - st["ball_overlap"])
    if d == 2:
        phi = 2.0 * np.pi * _phase(rng, m_ball, pj)
        ring = np.stack([aspect * np.sin(phi), np.cos(phi)], axis=1)
    else:
        vec = rng.normal(size=(m_ball, 3))
        ring = vec / np.linalg.norm(vec, axis=1, keepdims=True)
        ring[:, :2] *= aspect
    ball = center + radius * ring + rng.normal(scale=jitter, size=(m_ball, d))

    points = np.vstack([stick, ball])
    labels = np.repeat(np.arange(2, dtype=np.int32), [m_stick, m_ball])
    return points, labels


def _build_winged_body(cfg: ShapeFamilyConfig, rng):
    st = cfg.style
    z = _styles(rng, cfg.rho, 3)
    size = st["body_size"][0] + st["body_size"][1] * z[0]
    span = st["wing_span"][0] + st["wing_span"][1] * z[1]
    tail_len = st["tail_length"][0] + st["tail_length"][1] * z[2]
    m_body, m_wing, m_tail = cfg.points_per_part
    d = cfg.d
    up = _vertical(d)
    pj = st["phase_jitter"]
    semi_up = size * st["body_aspect"]

    if d == 2:
        theta = 2.0 * np.pi * _phase(rng, m_body, pj)
        body = np.stack([size * np.cos(theta), semi_up * np.sin(theta)], axis=1)
    else:
        vec = rng.normal(size=(m_body, 3))
        vec /= np.linalg.norm(vec, axis=1, keepdims=True)
        body = vec * np.array([size, size, semi_up])
    body = body + rng.normal(scale=st["surface_jitter"], size=(m_body, d))

    xs = span * (_phase(rng, m_wing, pj) - 0.5)
    wing = rng.normal(scale=st["bar_width"], size=(m_wing, d))
    wing[:, 0] = xs

    t = _phase(rng, m_tail, pj)
    tail = rng.normal(scale=st["bar_width"], size=(m_tail, d))
    tail[:, up] = -semi_up - t * tail_len

    points = np.vstack([body, wing, tail])
    labels = np.repeat(
        np.arange(3, dtype=np.int32), [m_body, m_wing, m_tail]
    )
    return points, labels


_BUILDERS = {"stick-ball": _build_stick_ball, "winged-body": _build_winged_body}


def synth_cloud(cfg: ShapeFamilyConfig, rng, vocab=None) -> LabeledPointCloud:
    points, labels = _BUILDERS[cfg.family](cfg, rng)
    if cfg.pose_jitter > 0:
        points = points + rng.uniform(-cfg.pose_jitter, cfg.pose_jitter, size=cfg.d)
    return LabeledPointCloud(points, labels, vocab or cfg.vocab())


def synth_set(cfg: ShapeFamilyConfig, count: int, name: str = "") -> PointCloudSet:
    """Generate ``count`` clouds; deterministic given cfg.seed.

    Each cloud draws from its own seed-sequence child, so prefixes of the
    set are stable under changes of ``count``.
    """
    if count < 1:
        raise BadConfig(f"count must be >= 1, got {count}")
    vocab = cfg.vocab()
    children = np.random.SeedSequence(cfg.seed).spawn(count)
    clouds = [
        synth_cloud(cfg, np.random.default_rng(children[i]), vocab)
        for i in range(count)
    ]
    return PointCloudSet(tuple(clouds), vocab, name or f"{cfg.family}-{cfg.seed}")


@dataclass(frozen=True)
class AttackConfig:
    """Recombination attack: assemble each output from parts of random donors."""

    mode: str = "centroid-snap"  # or "none"
    count: int = 100
    seed: int = 0
    contact_points: int = 30

    def __post_init__(self):
        if self.mode not in ("none", "centroid-snap"):
            raise BadConfig(f"unknown attack mode {self.mode!r}")
        if self.count < 1:
            raise BadConfig(f"count must be >= 1, got {self.count}")

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "count": self.count,
            "seed": self.seed,
            "contact_points": self.contact_points,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AttackConfig":
        return cls(
            mode=obj.get("mode", "centroid-snap"),
            count=int(obj.get("count", 100)),
            seed=int(obj.get("seed", 0)),
            contact_points=int(obj.get("contact_points", 30)),
        )


def _contact_centroid(cloud: LabeledPointCloud, part: int, k: int) -> np.ndarray:
    """Centroid of the k points of the part closest to the rest of the cloud."""
    own = cloud.part_points(part)
    rest = cloud.points[cloud.labels != part]
    if rest.shape[0] == 0:
        return own.mean(axis=0)
    gap = squared_distances(own, rest).min(axis=1)
    order = np.argsort(gap, kind="stable")[: min(k, own.shape[0])]
    return own[order].mean(axis=0)


def recombine_attack(donors: PointCloudSet, cfg: AttackConfig) -> PointCloudSet:
    """Each output cloud takes every part from an independently chosen donor.

    In centroid-snap mode each part is translated so that its contact-region
    centroid lands on the corresponding centroid of the first part's donor,
    which keeps the assembly tight despite the donors' differing poses.
    """
    if len(donors) < 1:
        raise InsufficientDonors("attack requires at least one donor cloud")
    parts = list(range(donors.vocab.c))
    for i, cloud in enumerate(donors):
        missing = set(parts) - cloud.part_set()
        if missing:
            raise PartAbsent(
                f"donor {i} lacks part(s) {sorted(missing)}; "
                "the attack needs every part in every donor"
            )
    # donor choice is uniform and independent across parts; when the pool is
    # large enough each donor contributes a given part at most once, so the
    # attack set contains no exact duplicate parts
    sel = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(7,)))
    if cfg.count <= len(donors):
        all_picks = np.stack(
            [sel.permutation(len(donors))[: cfg.count] for _ in parts], axis=1
        )
    else:
        all_picks = sel.integers(0, len(donors), size=(cfg.count, len(parts)))
    out = []
    for k in range(cfg.count):
        picks = all_picks[k]
        ref = donors[picks[0]]
        chunks, labels = [], []
        for p in parts:
            donor = donors[picks[p]]
            pts = donor.part_points(p).copy()
            if cfg.mode == "centroid-snap" and picks[p] != picks[0]:
                shift = _contact_centroid(ref, p, cfg.contact_points) - _contact_centroid(
                    donor, p, cfg.contact_points
                )
                pts += shift
            chunks.append(pts)
            labels.append(np.full(pts.shape[0], p, dtype=np.int32))
        out.append(
            LabeledPointCloud(np.vstack(chunks), np.concatenate(labels), donors.vocab)
        )
    return PointCloudSet(tuple(out), donors.vocab, f"attack-{cfg.mode}-{cfg.seed}")


def split_set(s: PointCloudSet, fraction: float, seed: int):
    """Disjoint (train, test) partition; deterministic given seed."""
    if not 0.0 < fraction < 1.0:
        raise BadConfig(f"fraction must lie in (0, 1), got {fraction}")
    perm = np.random.default_rng(seed).permutation(len(s))
    k = int(round(fraction * len(s)))
    train = tuple(s[int(i)] for i in perm[:k])
    test = tuple(s[int(i)] for i in perm[k:])
    return (
        PointCloudSet(train, s.vocab, f"{s.name}-train"),
        PointCloudSet(test, s.vocab, f"{s.name}-test"),
    )


def load_family_config(path) -> ShapeFamilyConfig:
    with open(path) as fh:
        return ShapeFamilyConfig.from_json(json.load(fh))


def load_attack_config(path) -> AttackConfig:
    with open(path) as fh:
        return AttackConfig.from_json(json.load(fh))


def with_seed(cfg: ShapeFamilyConfig, seed: int) -> ShapeFamilyConfig:
    return replace(cfg, seed=seed)
