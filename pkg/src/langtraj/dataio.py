"""Scene and map ingestion, example assembly, and example shards."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from .geom import InvalidInputError, LaneCenterline, MapGraph

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("TIMESTAMP", "TRACK_ID", "OBJECT_TYPE", "X", "Y", "CITY_NAME")


class FormatError(ValueError):
    """Malformed scene, map or shard file."""

    def __init__(self, message: str, line: Optional[int] = None, source: Optional[str] = None):
        self.line = line
        self.source = source
        where = ""
        if source:
            where += f"{source}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


@dataclass
class Scene:
    scene_id: str
    tracks: Dict[str, np.ndarray]  # agent_id -> (K, 3) rows of (t, x, y)
    object_types: Dict[str, str] = field(default_factory=dict)
    city: str = ""
    duplicates: int = 0

    def __post_init__(self):
        if not self.tracks:
            raise InvalidInputError(f"scene {self.scene_id} has no tracks")
        for aid, tr in self.tracks.items():
            tr = np.asarray(tr, dtype=float).reshape(-1, 3)
            if len(tr) > 1 and np.any(np.diff(tr[:, 0]) <= 0):
                raise InvalidInputError(f"track {aid}: timestamps not strictly increasing")
            self.tracks[aid] = tr

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and self.city == other.city
            and self.object_types == other.object_types
            and self.tracks.keys() == other.tracks.keys()
            and all(np.array_equal(self.tracks[k], other.tracks[k]) for k in self.tracks)
        )


def _as_text(data: Union[bytes, str]) -> str:
    if isinstance(data, bytes):
        return data.decode("utf-8")
    return data


def parse_scene_csv(data: Union[bytes, str], scene_id: str = "scene", source: Optional[str] = None) -> Scene:
    """Parse an Argoverse-style forecasting CSV into a :class:`Scene`.

    Rows for the same ``(TRACK_ID, TIMESTAMP)`` are collapsed with the last
    row winning; the number of collapsed rows is kept on ``Scene.duplicates``.
    """
    reader = csv.reader(io.StringIO(_as_text(data)))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("empty file", source=source)
    header = [h.strip() for h in header]
    for col in CSV_COLUMNS:
        if col not in header:
            raise FormatError(f"missing column {col}", line=1, source=source)
    pos = {c: header.index(c) for c in CSV_COLUMNS}

    rows: Dict[str, Dict[float, tuple]] = {}
    types: Dict[str, str] = {}
    city = ""
    dup = 0
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < len(header):
            raise FormatError(f"expected {len(header)} fields, got {len(row)}", line=lineno, source=source)
        try:
            t = float(row[pos["TIMESTAMP"]])
            x = float(row[pos["X"]])
            y = float(row[pos["Y"]])
        except ValueError as exc:
            raise FormatError(f"non-numeric value ({exc})", line=lineno, source=source) from None
        if not (np.isfinite(t) and np.isfinite(x) and np.isfinite(y)):
            raise FormatError("non-finite value", line=lineno, source=source)
        tid = row[pos["TRACK_ID"]]
        per = rows.setdefault(tid, {})
        if t in per:
            dup += 1
        per[t] = (t, x, y)
        types[tid] = row[pos["OBJECT_TYPE"]]
        city = row[pos["CITY_NAME"]] or city
    if not rows:
        raise FormatError("no data rows", source=source)
    if dup:
        logger.warning("%s: %d duplicate (TRACK_ID, TIMESTAMP) rows, last row kept", source or scene_id, dup)
    tracks = {tid: np.array(sorted(per.values()), dtype=float) for tid, per in rows.items()}
    return Scene(scene_id=scene_id, tracks=tracks, object_types=types, city=city, duplicates=dup)


def serialize_scene_csv(scene: Scene) -> bytes:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    rows = []
    for tid, tr in scene.tracks.items():
        for t, x, y in tr:
            rows.append((t, tid, x, y))
    rows.sort(key=lambda r: (r[0], r[1]))
    for t, tid, x, y in rows:
        w.writerow([repr(float(t)), tid, scene.object_types.get(tid, ""), repr(float(x)), repr(float(y)), scene.city])
    return out.getvalue().encode("utf-8")


def parse_map(data: Union[bytes, str], source: Optional[str] = None) -> MapGraph:
    """Parse a lane map: ``{"centerlines": [{"id", "polyline"}]}`` or a bare array."""
    try:
        doc = json.loads(_as_text(data))
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid map file ({exc.msg})", line=exc.lineno, source=source) from None
    if isinstance(doc, dict):
        doc = doc.get("centerlines")
    if not isinstance(doc, list):
        raise FormatError("map must hold a list of centerlines", source=source)
    lanes = []
    seen = set()
    for i, obj in enumerate(doc):
        if not isinstance(obj, dict) or "id" not in obj or "polyline" not in obj:
            raise FormatError(f"centerline #{i} needs 'id' and 'polyline'", source=source)
        lid = obj["id"]
        if not isinstance(lid, int):
            raise FormatError(f"centerline #{i}: id must be an integer", source=source)
        if lid in seen:
            raise FormatError(f"duplicate centerline id {lid}", source=source)
        seen.add(lid)
        try:
            poly = np.asarray(obj["polyline"], dtype=float)
        except (TypeError, ValueError):
            raise FormatError(f"centerline {lid}: polyline must be numeric", source=source) from None
        if poly.ndim != 2 or poly.shape[1] != 2 or len(poly) < 2:
            raise FormatError(f"centerline {lid}: polyline needs >= 2 [x, y] vertices", source=source)
        try:
            lanes.append(LaneCenterline(lid, poly))
        except InvalidInputError as exc:
            raise FormatError(str(exc), source=source) from None
    return MapGraph(lanes)


def serialize_map(map_graph: MapGraph) -> bytes:
    doc = {"centerlines": [{"id": c.id, "polyline": c.polyline.tolist()} for c in map_graph.centerlines]}
    return json.dumps(doc).encode("utf-8")


@dataclass
class ExampleConfig:
    dt: float = 0.1
    past: int = 20
    future: int = 30
    a_max: int = 5
    max_gap: float = 0.3

    @property
    def window(self) -> int:
        return self.past + self.future


@dataclass
class PredictionExample:
    """One target agent's past/future window with its nearest neighbours.

    ``positions`` is ``(A, past + future, 2)`` on a uniform grid, ``valid``
    the matching mask.  Row 0 is always the target; row k is the agent named
    by ``neighbor_order[k]``.  Step ``past - 1`` is t = 0.
    """

    example_id: str
    positions: np.ndarray
    valid: np.ndarray
    neighbor_order: List[str]
    map: MapGraph
    past_len: int = 20
    t0: float = 0.0
    dt: float = 0.1
    caption: Optional[List[int]] = None
    object_types: List[str] = field(default_factory=list)
    target: int = 0

    @property
    def num_agents(self) -> int:
        return len(self.positions)

    @property
    def past(self) -> np.ndarray:
        return self.positions[:, : self.past_len]

    @property
    def future(self) -> np.ndarray:
        return self.positions[:, self.past_len:]

    @property
    def past_valid(self) -> np.ndarray:
        return self.valid[:, : self.past_len]

    @property
    def future_valid(self) -> np.ndarray:
        return self.valid[:, self.past_len:]

    def to_record(self) -> dict:
        return {
            "example_id": self.example_id,
            "t0": self.t0,
            "dt": self.dt,
            "past_len": self.past_len,
            "neighbor_order": list(self.neighbor_order),
            "object_types": list(self.object_types),
            "positions": self.positions.tolist(),
            "valid": self.valid.astype(int).tolist(),
            "map": [{"id": c.id, "polyline": c.polyline.tolist()} for c in self.map.centerlines],
            "caption": None if self.caption is None else list(self.caption),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "PredictionExample":
        return cls(
            example_id=rec["example_id"],
            positions=np.asarray(rec["positions"], dtype=float).reshape(-1, len(rec["valid"][0]), 2),
            valid=np.asarray(rec["valid"], dtype=bool),
            neighbor_order=list(rec["neighbor_order"]),
            map=MapGraph([LaneCenterline(c["id"], c["polyline"]) for c in rec["map"]]),
            past_len=rec["past_len"],
            t0=rec["t0"],
            dt=rec["dt"],
            caption=None if rec.get("caption") is None else list(rec["caption"]),
            object_types=list(rec.get("object_types", [])),
        )


def resample_track(track: np.ndarray, grid: np.ndarray, max_gap: float, tol: float = 1e-6):
    """Linearly interpolate a ``(K, 3)`` track onto ``grid``.

    Grid points outside the track's span, or inside a gap between samples
    longer than ``max_gap``, are returned as invalid.
    """
    t = track[:, 0]
    xy = np.stack([np.interp(grid, t, track[:, 1]), np.interp(grid, t, track[:, 2])], axis=1)
    valid = (grid >= t[0] - tol) & (grid <= t[-1] + tol)
    if len(t) > 1:
        idx = np.clip(np.searchsorted(t, grid, side="right"), 1, len(t) - 1)
        gap = t[idx] - t[idx - 1]
        exact = np.isclose(grid, t[idx - 1], atol=tol, rtol=0) | np.isclose(grid, t[idx], atol=tol, rtol=0)
        valid &= (gap <= max_gap + tol) | exact
    else:
        valid &= np.isclose(grid, t[0], atol=tol, rtol=0)
    xy[~valid] = 0.0
    return xy, valid


def assemble_examples(scene: Scene, map_graph: MapGraph, cfg: Optional[ExampleConfig] = None) -> List[PredictionExample]:
    """Cut one prediction window per eligible target agent.

    The window starts at the scene's first timestamp; t = 0 is step
    ``past - 1``.  A track is an eligible target when every grid step is
    valid.  Neighbours must be valid at t = 0 and are ranked by distance to
    the target there (ties by agent id); the nearest ``a_max - 1`` are kept.
    """
    cfg = cfg or ExampleConfig()
    start = min(float(tr[0, 0]) for tr in scene.tracks.values())
    grid = start + cfg.dt * np.arange(cfg.window)
    t_now = cfg.past - 1
    resampled = {aid: resample_track(tr, grid, cfg.max_gap, tol=cfg.dt * 1e-3) for aid, tr in scene.tracks.items()}
    out = []
    for aid in sorted(resampled):
        xy, valid = resampled[aid]
        if not valid.all():
            continue
        others = []
        for oid, (oxy, ovalid) in resampled.items():
            if oid == aid or not ovalid[t_now]:
                continue
            d = float(np.hypot(*(oxy[t_now] - xy[t_now])))
            others.append((d, oid))
        others.sort()
        chosen = [oid for _, oid in others[: cfg.a_max - 1]]
        order = [aid] + chosen
        positions = np.stack([resampled[o][0] for o in order])
        valids = np.stack([resampled[o][1] for o in order])
        out.append(
            PredictionExample(
                example_id=f"{scene.scene_id}:{aid}",
                positions=positions,
                valid=valids,
                neighbor_order=order,
                map=map_graph,
                past_len=cfg.past,
                t0=float(grid[t_now]),
                dt=cfg.dt,
                object_types=[scene.object_types.get(o, "") for o in order],
            )
        )
    return out


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_shards(examples: Sequence[PredictionExample], out_dir: str, shard_size: int = 256, prefix: str = "examples") -> List[str]:
    """Write examples as newline-delimited JSON shards plus a ``manifest`` file."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for k in range(0, max(len(examples), 1), shard_size):
        name = f"{prefix}-{k // shard_size:05d}.jsonl"
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8") as f:
            for ex in examples[k: k + shard_size]:
                f.write(json.dumps(ex.to_record(), sort_keys=True) + "\n")
        paths.append(path)
    with open(os.path.join(out_dir, "manifest"), "w", encoding="utf-8") as f:
        for p in paths:
            f.write(f"{sha256_file(p)}  {os.path.basename(p)}\n")
    return paths


def read_shards(path: str, verify: bool = True) -> List[PredictionExample]:
    """Read every shard listed in ``path/manifest`` (or a single shard file)."""
    if os.path.isfile(path):
        files = [path]
    else:
        manifest = os.path.join(path, "manifest")
        files = []
        with open(manifest, encoding="utf-8") as f:
            for line in f:
                digest, name = line.split()
                full = os.path.join(path, name)
                if verify and sha256_file(full) != digest:
                    raise FormatError("checksum mismatch", source=full)
                files.append(full)
    out = []
    for fp in files:
        with open(fp, encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    out.append(PredictionExample.from_record(json.loads(line)))
                except (KeyError, ValueError, TypeError) as exc:
                    raise FormatError(f"bad example record ({exc})", line=lineno, source=fp) from None
    return out


def iter_scene_files(directory: str) -> Iterable[str]:
    for name in sorted(os.listdir(directory)):
        if name.endswith(".csv"):
            yield os.path.join(directory, name)
