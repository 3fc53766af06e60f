"""Domain types and file I/O for segmentation-labeled point clouds.

Two on-disk formats are supported:

* ``.lpc`` -- plain text, one cloud per file.  Header line
  ``LPC v1 n=<N> d=<D> parts=<C>`` followed by N records of D coordinates
  and an integer label.  Lines starting with ``#`` and blank lines are
  ignored.  Coordinates are printed with 17 significant digits so a
  write/read round trip is bit-exact in float64.
* ``.lpcs`` -- little-endian binary, many clouds per file.  Magic ``LPCS``,
  u32 version=1, u32 cloud_count, u32 d, u32 parts; per cloud u32 n,
  n*d float32 coordinates, n u16 labels.  Coordinates are stored in
  float32, so the binary format is lossy for general float64 data.

A set of clouds can also be described by a JSON manifest
``{"name", "part_names": [...], "files": [{"path", "count"}], "version": 1}``.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadConfig,
    EmptySet,
    IoFailure,
    LabelOutOfRange,
    MalformedHeader,
    NonFiniteCoordinate,
    VocabMismatch,
)

LPC_HEADER_RE = re.compile(r"LPC v1 n=(\d+) d=(\d+) parts=(\d+)")
LPCS_MAGIC = b"LPCS"
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class PartVocabulary:
    """Ordered list of part names; labels index into it."""

    names: tuple

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(str(n) for n in self.names))
        if len(self.names) == 0:
            raise BadConfig("part vocabulary must not be empty")
        if any(n == "" for n in self.names):
            raise BadConfig("part names must be non-empty")
        if len(set(self.names)) != len(self.names):
            raise BadConfig("part names must be unique")

    @property
    def c(self) -> int:
        return len(self.names)

    @classmethod
    def default(cls, c: int) -> "PartVocabulary":
        if c < 1:
            raise BadConfig(f"part count must be positive, got {c}")
        return cls(tuple(f"part{i}" for i in range(c)))


@dataclass(frozen=True, eq=False)
class LabeledPointCloud:
    """n points in d-dim space (d in {2, 3}) with one part label per point."""

    points: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int32
    vocab: PartVocabulary

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64))
        lab = np.ascontiguousarray(np.asarray(self.labels, dtype=np.int32))
        if pts.ndim != 2:
            raise BadConfig(f"points must be 2-D, got shape {pts.shape}")
        n, d = pts.shape
        if n < 1:
            raise BadConfig("cloud must contain at least one point")
        if d not in (2, 3):
            raise BadConfig(f"dimension must be 2 or 3, got {d}")
        if lab.shape != (n,):
            raise BadConfig(f"labels shape {lab.shape} does not match n={n}")
        if not np.all(np.isfinite(pts)):
            raise NonFiniteCoordinate("cloud contains NaN or Inf coordinates")
        if lab.min() < 0 or lab.max() >= self.vocab.c:
            bad = int(lab[(lab < 0) | (lab >= self.vocab.c)][0])
            raise LabelOutOfRange(
                f"label {bad} outside [0, {self.vocab.c})"
            )
        pts.flags.writeable = False
        lab.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", lab)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def part_set(self) -> frozenset:
        return frozenset(int(p) for p in np.unique(self.labels))

    def part_points(self, part: int) -> np.ndarray:
        return self.points[self.labels == part]

    def __eq__(self, other):
        if not isinstance(other, LabeledPointCloud):
            return NotImplemented
        return (
            self.vocab.names == other.vocab.names
            and self.points.shape == other.points.shape
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.labels, other.labels)
        )


def part_set(cloud: LabeledPointCloud) -> frozenset:
    """Set of part ids present in the cloud."""
    return cloud.part_set()


@dataclass(frozen=True)
class PointCloudSet:
    """Ordered collection of clouds sharing one part vocabulary."""

    clouds: tuple
    vocab: PartVocabulary
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "clouds", tuple(self.clouds))
        for i, c in enumerate(self.clouds):
            if c.vocab.names != self.vocab.names:
                raise VocabMismatch(
                    f"cloud {i} vocabulary {c.vocab.names} differs from set "
                    f"vocabulary {self.vocab.names}"
                )

    def __len__(self):
        return len(self.clouds)

    def __getitem__(self, i):
        return self.clouds[i]

    def __iter__(self):
        return iter(self.clouds)


@dataclass
class SetManifest:
    name: str
    part_names: list
    files: list = field(default_factory=list)  # [{"path": str, "count": int}]
    version: int = MANIFEST_VERSION

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "part_names": list(self.part_names),
            "files": [dict(f) for f in self.files],
            "version": self.version,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SetManifest":
        try:
            return cls(
                name=obj["name"],
                part_names=list(obj["part_names"]),
                files=[{"path": f["path"], "count": int(f["count"])} for f in obj["files"]],
                version=int(obj.get("version", MANIFEST_VERSION)),
            )
        except (KeyError, TypeError) as exc:
            raise MalformedHeader(f"invalid manifest: {exc}") from exc


# --- text format (.lpc) -----------------------------------------------------

def _parse_data_line(line: str, lineno: int, d: int, c: int):
    tokens = line.split()
    if len(tokens) != d + 1:
        raise MalformedHeader(
            f"line {lineno}: expected {d} coordinates and one label, "
            f"got {len(tokens)} fields"
        )
    coords = []
    for tok in tokens[:d]:
        try:
            v = float(tok)
        except ValueError:
            raise NonFiniteCoordinate(
                f"line {lineno}: coordinate {tok!r} is not a finite number"
            ) from None
        if not np.isfinite(v):
            raise NonFiniteCoordinate(
                f"line {lineno}: coordinate {tok!r} is not finite"
            )
        coords.append(v)
    try:
        label = int(tokens[d])
    except ValueError:
        raise MalformedHeader(
            f"line {lineno}: label {tokens[d]!r} is not an integer"
        ) from None
    if label < 0 or label >= c:
        raise LabelOutOfRange(f"line {lineno}: label {label} outside [0, {c})")
    return coords, label


def read_lpc(path, vocab: PartVocabulary | None = None) -> LabeledPointCloud:
    """Parse one cloud from a .lpc text file.

    When ``vocab`` is given its part count must match the file header;
    otherwise a default vocabulary is synthesized from the header.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc

    header = None
    rows = []
    labels = []
    n = d = c = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if header is None:
            m = LPC_HEADER_RE.fullmatch(line)
            if m is None:
                raise MalformedHeader(f"line {lineno}: bad header {line!r}")
            n, d, c = int(m.group(1)), int(m.group(2)), int(m.group(3))
            if n < 1:
                raise MalformedHeader(f"line {lineno}: n must be >= 1, got {n}")
            if d not in (2, 3):
                raise MalformedHeader(f"line {lineno}: d must be 2 or 3, got {d}")
            if c < 1:
                raise MalformedHeader(f"line {lineno}: parts must be >= 1, got {c}")
            header = (n, d, c)
            continue
        if len(rows) >= n:
            raise MalformedHeader(
                f"line {lineno}: more than the {n} records declared in header"
            )
        coords, label = _parse_data_line(line, lineno, d, c)
        rows.append(coords)
        labels.append(label)

    if header is None:
        raise MalformedHeader("line 1: missing LPC header")
    if len(rows) != n:
        raise MalformedHeader(
            f"expected {n} records, file contains {len(rows)}"
        )
    if vocab is not None:
        if vocab.c != c:
            raise VocabMismatch(
                f"{path.name}: header declares {c} parts, vocabulary has {vocab.c}"
            )
    else:
        vocab = PartVocabulary.default(c)
    return LabeledPointCloud(np.array(rows, dtype=np.float64), np.array(labels), vocab)


def write_lpc(cloud: LabeledPointCloud, path) -> None:
    """Write one cloud in canonical .lpc text form (17 significant digits)."""
    path = Path(path)
    lines = [f"LPC v1 n={cloud.n} d={cloud.d} parts={cloud.vocab.c}"]
    for row, label in zip(cloud.points, cloud.labels):
        coords = " ".join("%.17g" % v for v in row)
        lines.append(f"{coords} {int(label)}")
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


# --- binary format (.lpcs) --------------------------------------------------

def read_lpcs(path, vocab: PartVocabulary | None = None) -> list:
    """Parse all clouds from a .lpcs binary file."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc

    if len(data) < 20 or data[:4] != LPCS_MAGIC:
        raise MalformedHeader(f"{path.name}: not an LPCS file")
    version, count, d, c = struct.unpack_from("<IIII", data, 4)
    if version != 1:
        raise MalformedHeader(f"{path.name}: unsupported LPCS version {version}")
    if d not in (2, 3):
        raise MalformedHeader(f"{path.name}: d must be 2 or 3, got {d}")
    if c < 1:
        raise MalformedHeader(f"{path.name}: parts must be >= 1, got {c}")
    if vocab is not None:
        if vocab.c != c:
            raise VocabMismatch(
                f"{path.name}: file declares {c} parts, vocabulary has {vocab.c}"
            )
    else:
        vocab = PartVocabulary.default(c)

    clouds = []
    off = 20
    for k in range(count):
        if off + 4 > len(data):
            raise MalformedHeader(f"{path.name}: truncated at cloud {k}")
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        if n < 1:
            raise MalformedHeader(f"{path.name}: cloud {k} has n=0")
        need = n * d * 4 + n * 2
        if off + need > len(data):
            raise MalformedHeader(f"{path.name}: truncated at cloud {k}")
        pts = np.frombuffer(data, dtype="<f4", count=n * d, offset=off).reshape(n, d)
        off += n * d * 4
        lab = np.frombuffer(data, dtype="<u2", count=n, offset=off)
        off += n * 2
        if not np.all(np.isfinite(pts)):
            raise NonFiniteCoordinate(f"{path.name}: cloud {k} has non-finite coordinates")
        if lab.max(initial=0) >= c:
            raise LabelOutOfRange(
                f"{path.name}: cloud {k} label {int(lab.max())} outside [0, {c})"
            )
        clouds.append(LabeledPointCloud(pts.astype(np.float64), lab.astype(np.int32), vocab))
    if off != len(data):
        raise MalformedHeader(f"{path.name}: {len(data) - off} trailing bytes")
    return clouds


def write_lpcs(clouds, path) -> None:
    """Write clouds in .lpcs binary form (coordinates stored as float32)."""
    clouds = list(clouds)
    if not clouds:
        raise EmptySet("cannot write an empty .lpcs file")
    d = clouds[0].d
    c = clouds[0].vocab.c
    for i, cl in enumerate(clouds):
        if cl.d != d or cl.vocab.c != c:
            raise VocabMismatch(f"cloud {i} disagrees on d/parts")
    chunks = [LPCS_MAGIC, struct.pack("<IIII", 1, len(clouds), d, c)]
    for cl in clouds:
        chunks.append(struct.pack("<I", cl.n))
        chunks.append(cl.points.astype("<f4").tobytes())
        chunks.append(cl.labels.astype("<u2").tobytes())
    try:
        Path(path).write_bytes(b"".join(chunks))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


# --- set-level I/O ----------------------------------------------------------

def _read_cloud_file(path: Path, vocab):
    if path.suffix == ".lpcs":
        return read_lpcs(path, vocab)
    return [read_lpc(path, vocab)]


def read_set(path, name: str | None = None) -> PointCloudSet:
    """Load a PointCloudSet from a manifest file or a directory.

    Directory loads take files in lexicographic name order, then in-file
    order, so the result is independent of filesystem enumeration order.
    """
    path = Path(path)
    if path.is_dir():
        files = sorted(
            [p for p in path.iterdir() if p.suffix in (".lpc", ".lpcs")],
            key=lambda p: p.name,
        )
        if not files:
            raise EmptySet(f"no .lpc/.lpcs files in {path}")
        clouds = []
        vocab = None
        for f in files:
            loaded = _read_cloud_file(f, None)
            if vocab is None:
                vocab = loaded[0].vocab
            for cl in loaded:
                if cl.vocab.c != vocab.c:
                    raise VocabMismatch(
                        f"{f.name}: parts count {cl.vocab.c} != {vocab.c}"
                    )
            clouds.extend(loaded)
        # re-attach the shared vocabulary object
        clouds = [LabeledPointCloud(c.points, c.labels, vocab) for c in clouds]
        return PointCloudSet(tuple(clouds), vocab, name or path.name)

    # manifest file
    try:
        manifest = SetManifest.from_json(json.loads(path.read_text()))
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedHeader(f"{path.name}: invalid JSON: {exc}") from exc
    if manifest.version != MANIFEST_VERSION:
        raise MalformedHeader(f"{path.name}: unsupported manifest version")
    vocab = PartVocabulary(tuple(manifest.part_names))
    clouds = []
    base = path.parent
    for entry in manifest.files:
        f = base / entry["path"]
        if not f.exists():
            raise IoFailure(f"manifest references missing file {f}")
        loaded = _read_cloud_file(f, vocab)
        if len(loaded) != entry["count"]:
            raise MalformedHeader(
                f"{f.name}: manifest declares {entry['count']} clouds, "
                f"file contains {len(loaded)}"
            )
        clouds.extend(loaded)
    if not clouds:
        raise EmptySet(f"manifest {path} lists no clouds")
    return PointCloudSet(tuple(clouds), vocab, name or manifest.name)


def write_set(pcs: PointCloudSet, directory, fmt: str = "lpc") -> Path:
    """Write a set into a directory plus manifest.json; returns manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    if fmt == "lpc":
        width = max(4, len(str(len(pcs) - 1)))
        for i, cloud in enumerate(pcs):
            fname = f"cloud_{i:0{width}d}.lpc"
            write_lpc(cloud, directory / fname)
            files.append({"path": fname, "count": 1})
    elif fmt == "lpcs":
        fname = "clouds.lpcs"
        write_lpcs(list(pcs), directory / fname)
        files.append({"path": fname, "count": len(pcs)})
    else:
        raise BadConfig(f"unknown set format {fmt!r}")
    manifest = SetManifest(pcs.name or directory.name, list(pcs.vocab.names), files)
    mpath = directory / "manifest.json"
    mpath.write_text(json.dumps(manifest.to_json(), indent=2) + "\n")
    return mpath
