"""Point-cloud and annotation ingestion, manifests, train/test splitting.

Formats:
- PLY, ascii and binary_little_endian 1.0; vertex properties x,y,z
  (float32/float64), optional nx,ny,nz, optional red,green,blue (uint8,
  rescaled to [0,1] on parse). Big-endian files are rejected outright.
- XYZ, whitespace-separated "x y z [nx ny nz] [r g b]" lines, '#' comments.
- Landmark annotations and dataset manifests are JSON documents; writers
  emit canonical bytes so write(parse(x)) == x round-trips exactly.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .geometry import PointCloud


class ParseError(ValueError):
    """Malformed input document; message carries line/offset context."""


class ManifestError(ValueError):
    """Manifest references missing files or is internally inconsistent."""


# ------------------------------------------------------------------ landmarks


@dataclass
class LandmarkSet:
    """Ordered J x 3 landmark coordinates in model units."""

    coords: np.ndarray
    names: Optional[List[str]] = None

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ParseError(f"landmark coords must be (J, 3), got {self.coords.shape}")
        if self.coords.shape[0] < 1:
            raise ParseError("landmark set is empty")
        if not np.all(np.isfinite(self.coords)):
            raise ParseError("landmark coords contain non-finite values")
        if self.names is not None and len(self.names) != self.coords.shape[0]:
            raise ParseError("names[] length does not match landmark_count")

    @property
    def count(self) -> int:
        return self.coords.shape[0]


def parse_landmarks(data: bytes) -> LandmarkSet:
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"landmark document is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ParseError("landmark document must be a JSON object")
    if doc.get("version") != 1:
        raise ParseError(f"unsupported landmark document version {doc.get('version')!r}")
    coords = doc.get("coords")
    if not isinstance(coords, list) or not coords:
        raise ParseError("landmark document has no coords array")
    arr = np.array(coords, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ParseError("coords must be a list of [x, y, z] triples")
    declared = doc.get("landmark_count")
    if declared != arr.shape[0]:
        raise ParseError(f"landmark_count {declared} does not match "
                         f"{arr.shape[0]} coordinate rows")
    return LandmarkSet(arr, names=doc.get("names"))


def write_landmarks(landmarks: LandmarkSet) -> bytes:
    doc = {
        "version": 1,
        "landmark_count": landmarks.count,
        "names": landmarks.names if landmarks.names is not None
        else [f"landmark_{i}" for i in range(landmarks.count)],
        "coords": [[float(v) for v in row] for row in landmarks.coords],
    }
    return (json.dumps(doc, indent=1) + "\n").encode("utf-8")


# ------------------------------------------------------------------------ PLY

_PLY_FLOAT_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8"}
_PLY_BYTE_TYPES = {"uchar": "u1", "uint8": "u1"}


def parse_ply(data: bytes) -> PointCloud:
    """Parse an ASCII or binary_little_endian PLY vertex cloud."""
    try:
        end = data.index(b"end_header\n")
    except ValueError:
        raise ParseError("PLY header has no end_header line") from None
    header_lines = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[end + len(b"end_header\n"):]

    if not header_lines or header_lines[0].strip() != "ply":
        raise ParseError("line 1: not a PLY file (missing 'ply' magic)")

    fmt = None
    elements = []  # (name, count, [(prop_name, dtype_str)])
    for lineno, line in enumerate(header_lines[1:], start=2):
        tokens = line.split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if len(tokens) != 3:
                raise ParseError(f"line {lineno}: malformed format line")
            if tokens[1] == "binary_big_endian":
                raise ParseError(f"line {lineno}: big-endian PLY is not supported")
            if tokens[1] not in ("ascii", "binary_little_endian"):
                raise ParseError(f"line {lineno}: unknown PLY format {tokens[1]!r}")
            fmt = tokens[1]
        elif tokens[0] == "element":
            if len(tokens) != 3:
                raise ParseError(f"line {lineno}: malformed element line")
            try:
                count = int(tokens[2])
            except ValueError:
                raise ParseError(f"line {lineno}: bad element count {tokens[2]!r}")
            elements.append([tokens[1], count, []])
        elif tokens[0] == "property":
            if not elements:
                raise ParseError(f"line {lineno}: property before any element")
            if tokens[1] == "list":
                raise ParseError(f"line {lineno}: list properties are not supported")
            if len(tokens) != 3:
                raise ParseError(f"line {lineno}: malformed property line")
            elements[-1][2].append((tokens[2], tokens[1]))
        elif tokens[0] == "end_header":
            break
        else:
            raise ParseError(f"line {lineno}: unknown header keyword {tokens[0]!r}")
    if fmt is None:
        raise ParseError("PLY header has no format line")
    if not elements or elements[0][0] != "vertex":
        raise ParseError("PLY file must declare a vertex element first")
    name, count, props = elements[0]
    if count < 1:
        raise ParseError("PLY vertex element is empty")

    dtype_fields = []
    for pname, ptype in props:
        if ptype in _PLY_FLOAT_TYPES:
            dtype_fields.append((pname, _PLY_FLOAT_TYPES[ptype]))
        elif ptype in _PLY_BYTE_TYPES:
            dtype_fields.append((pname, _PLY_BYTE_TYPES[ptype]))
        else:
            raise ParseError(f"unsupported property type {ptype!r} for {pname!r}")
    names = [f[0] for f in dtype_fields]
    for req in ("x", "y", "z"):
        if req not in names:
            raise ParseError(f"PLY vertex element lacks required property {req!r}")

    if fmt == "ascii":
        rows = [ln for ln in body.decode("ascii", errors="replace").splitlines()
                if ln.strip()]
        if len(rows) != count:
            raise ParseError(f"vertex count mismatch: header declares {count}, "
                             f"found {len(rows)} rows")
        columns = {n: np.empty(count) for n in names}
        for r, line in enumerate(rows):
            tokens = line.split()
            if len(tokens) != len(names):
                raise ParseError(f"vertex row {r + 1}: expected {len(names)} values, "
                                 f"got {len(tokens)}")
            for n, tok in zip(names, tokens):
                try:
                    columns[n][r] = float(tok)
                except ValueError:
                    raise ParseError(f"vertex row {r + 1}: bad number {tok!r}")
        def col(n):
            return columns[n]
    else:
        dt = np.dtype(dtype_fields)
        need = dt.itemsize * count
        if len(body) < need:
            raise ParseError(f"vertex count mismatch: header declares {count} "
                             f"({need} bytes) but body has {len(body)} bytes")
        if len(body) > need and len(elements) == 1:
            raise ParseError(f"offset {end + 11 + need}: trailing bytes after "
                             f"vertex data")
        table = np.frombuffer(body, dtype=dt, count=count)
        def col(n):
            return table[n].astype(np.float64)

    positions = np.stack([col("x"), col("y"), col("z")], axis=1)
    if not np.all(np.isfinite(positions)):
        raise ParseError("PLY positions contain non-finite values")
    normals = None
    if all(n in names for n in ("nx", "ny", "nz")):
        normals = np.stack([col("nx"), col("ny"), col("nz")], axis=1)
    colors = None
    if all(n in names for n in ("red", "green", "blue")):
        colors = np.stack([col("red"), col("green"), col("blue")], axis=1) / 255.0
    return PointCloud(positions, normals=normals, colors=colors)


def write_ply(cloud: PointCloud, binary: bool = True) -> bytes:
    """Serialize a cloud to PLY; positions/normals as float64, colors uint8."""
    n = cloud.n
    header = ["ply",
              f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {n}",
              "property double x", "property double y", "property double z"]
    if cloud.normals is not None:
        header += ["property double nx", "property double ny", "property double nz"]
    if cloud.colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")

    color_bytes = None
    if cloud.colors is not None:
        color_bytes = np.clip(np.round(cloud.colors * 255.0), 0, 255).astype(np.uint8)

    if binary:
        fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
        if cloud.normals is not None:
            fields += [("nx", "<f8"), ("ny", "<f8"), ("nz", "<f8")]
        if color_bytes is not None:
            fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        table = np.empty(n, dtype=np.dtype(fields))
        table["x"], table["y"], table["z"] = cloud.positions.T
        if cloud.normals is not None:
            table["nx"], table["ny"], table["nz"] = cloud.normals.T
        if color_bytes is not None:
            table["red"], table["green"], table["blue"] = color_bytes.T
        return head + table.tobytes()

    lines = []
    for i in range(n):
        parts = [repr(float(v)) for v in cloud.positions[i]]
        if cloud.normals is not None:
            parts += [repr(float(v)) for v in cloud.normals[i]]
        if color_bytes is not None:
            parts += [str(int(v)) for v in color_bytes[i]]
        lines.append(" ".join(parts))
    return head + ("\n".join(lines) + "\n").encode("ascii")


# ------------------------------------------------------------------------ XYZ


def parse_xyz(data: bytes) -> PointCloud:
    """Whitespace-separated x y z [nx ny nz] [r g b] rows, '#' comments."""
    rows = []
    width = None
    for lineno, raw in enumerate(data.decode("utf-8", errors="replace").splitlines(),
                                 start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) not in (3, 6, 9):
            raise ParseError(f"line {lineno}: expected 3, 6 or 9 values, "
                             f"got {len(tokens)}")
        if width is None:
            width = len(tokens)
        elif len(tokens) != width:
            raise ParseError(f"line {lineno}: inconsistent column count")
        try:
            rows.append([float(t) for t in tokens])
        except ValueError:
            raise ParseError(f"line {lineno}: bad number in {line!r}")
    if not rows:
        raise ParseError("XYZ file contains no points")
    table = np.array(rows)
    if not np.all(np.isfinite(table)):
        raise ParseError("XYZ file contains non-finite values")
    normals = table[:, 3:6] if width >= 6 else None
    colors = table[:, 6:9] if width == 9 else None
    return PointCloud(table[:, :3], normals=normals, colors=colors)


def write_xyz(cloud: PointCloud) -> bytes:
    lines = []
    for i in range(cloud.n):
        parts = [repr(float(v)) for v in cloud.positions[i]]
        if cloud.normals is not None:
            parts += [repr(float(v)) for v in cloud.normals[i]]
        if cloud.colors is not None:
            parts += [repr(float(v)) for v in cloud.colors[i]]
        lines.append(" ".join(parts))
    return ("\n".join(lines) + "\n").encode("utf-8")


def load_cloud(path) -> PointCloud:
    path = Path(path)
    data = path.read_bytes()
    if path.suffix.lower() == ".xyz":
        return parse_xyz(data)
    return parse_ply(data)


# ------------------------------------------------------------------- manifest


@dataclass
class ManifestEntry:
    cloud: str
    annotation: str
    subject: str


@dataclass
class DatasetManifest:
    """Index of a landmark dataset on disk; paths relative to base_dir."""

    entries: List[ManifestEntry]
    landmark_count: int = 11
    feature_dimension: int = 3
    base_dir: Path = field(default_factory=Path)

    def __post_init__(self):
        if self.feature_dimension not in (3, 6, 10):
            raise ManifestError(f"feature_dimension must be 3, 6 or 10, "
                                f"got {self.feature_dimension}")
        if self.landmark_count < 1:
            raise ManifestError("landmark_count must be positive")

    def __len__(self) -> int:
        return len(self.entries)

    def cloud_path(self, i: int) -> Path:
        return self.base_dir / self.entries[i].cloud

    def annotation_path(self, i: int) -> Path:
        return self.base_dir / self.entries[i].annotation

    def load_cloud(self, i: int) -> PointCloud:
        cloud = load_cloud(self.cloud_path(i))
        if self.feature_dimension >= 6 and cloud.normals is None:
            raise ManifestError(f"{self.entries[i].cloud}: feature_dimension "
                                f"{self.feature_dimension} requires normals")
        if self.feature_dimension == 10 and cloud.colors is None:
            raise ManifestError(f"{self.entries[i].cloud}: feature_dimension 10 "
                                f"requires colors")
        return cloud

    def load_landmarks(self, i: int) -> LandmarkSet:
        marks = parse_landmarks(self.annotation_path(i).read_bytes())
        if marks.count != self.landmark_count:
            raise ManifestError(f"{self.entries[i].annotation}: has {marks.count} "
                                f"landmarks, manifest declares {self.landmark_count}")
        return marks


def parse_manifest(data: bytes, base_dir=Path(".")) -> DatasetManifest:
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"manifest is not valid JSON: {exc}") from exc
    if doc.get("version") != 1:
        raise ParseError(f"unsupported manifest version {doc.get('version')!r}")
    entries = [ManifestEntry(e["cloud"], e["annotation"], e.get("subject", ""))
               for e in doc.get("entries", [])]
    if not entries:
        raise ParseError("manifest has no entries")
    return DatasetManifest(entries, landmark_count=int(doc["landmark_count"]),
                           feature_dimension=int(doc["feature_dimension"]),
                           base_dir=Path(base_dir))


def write_manifest(manifest: DatasetManifest) -> bytes:
    doc = {
        "version": 1,
        "landmark_count": manifest.landmark_count,
        "feature_dimension": manifest.feature_dimension,
        "entries": [{"cloud": e.cloud, "annotation": e.annotation,
                     "subject": e.subject} for e in manifest.entries],
    }
    return (json.dumps(doc, indent=1) + "\n").encode("utf-8")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    manifest = parse_manifest(path.read_bytes(), base_dir=path.parent)
    for i, entry in enumerate(manifest.entries):
        for p in (manifest.cloud_path(i), manifest.annotation_path(i)):
            if not p.exists():
                raise ManifestError(f"manifest entry {entry.subject or i}: "
                                    f"missing file {p}")
    return manifest


def save_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_bytes(write_manifest(manifest))


# ---------------------------------------------------------------------- split


def split_dataset(manifest: DatasetManifest, train_fraction: float = 0.9,
                  seed: int = 0):
    """Deterministic seeded shuffle into (train indices, test indices).

    floor(train_fraction * N) entries go to training; the split is disjoint
    and covering.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(manifest)
    if n < 2:
        raise ValueError(f"need at least 2 entries to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    cut = math.floor(train_fraction * n)
    return order[:cut].tolist(), order[cut:].tolist()
