"""Rule-based caption synthesis from trajectories, maps and neighbours."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .dataio import PredictionExample
from .geom import (
    KinematicProfile,
    MapGraph,
    Trajectory,
    closest_centerline,
    compute_kinematics,
    heading_change,
    path_intersection,
    wrap_angle,
)

# Token ids are part of the checkpoint/caption file contract; do not reorder.
CONTENT_TOKENS = (
    "MoveFast",
    "MoveSlow",
    "Stop",
    "TurnLeft",
    "TurnRight",
    "SpeedUp",
    "SlowDown",
    "LaneKeep",
    "LaneChangeLeft",
    "LaneChangeRight",
    "Follow",
    "Yield",
    "Agent#1",
    "Agent#2",
    "Agent#3",
    "Agent#4",
)
SPECIAL_TOKENS = ("<bos>", "<eos>", "<pad>")
VOCAB = CONTENT_TOKENS + SPECIAL_TOKENS
TOKEN_ID = {tok: i for i, tok in enumerate(VOCAB)}
VOCAB_SIZE = len(VOCAB)
BOS, EOS, PAD = TOKEN_ID["<bos>"], TOKEN_ID["<eos>"], TOKEN_ID["<pad>"]
AGENT_TOKENS = tuple(TOKEN_ID[f"Agent#{k}"] for k in range(1, 5))
REFERRING_TOKENS = (TOKEN_ID["Follow"], TOKEN_ID["Yield"])
OPPOSITES = (
    ("TurnLeft", "TurnRight"),
    ("SpeedUp", "SlowDown"),
    ("LaneChangeLeft", "LaneChangeRight"),
)


def token_id(tok: Union[str, int]) -> int:
    if isinstance(tok, (int, np.integer)):
        if not 0 <= int(tok) < VOCAB_SIZE:
            raise ValueError(f"token id {tok} out of vocabulary")
        return int(tok)
    try:
        return TOKEN_ID[tok]
    except KeyError:
        raise ValueError(f"unknown token {tok!r}") from None


def token_names(ids: Sequence[int]) -> List[str]:
    return [VOCAB[int(i)] for i in ids]


def content_tokens(ids: Sequence[int]) -> List[int]:
    return [int(i) for i in ids if int(i) < len(CONTENT_TOKENS)]


@dataclass
class AnnotateConfig:
    fast_thresh: float = 8.0
    slow_thresh: float = 2.0
    stop_thresh: float = 0.3
    acc_thresh: float = 1.0
    turn_thresh: float = np.pi / 6
    turn_window: float = 1.0
    turn_min_speed: float = 1.0
    min_dur: float = 0.5
    smooth_window: int = 5
    lane_change_half_window: int = 5
    follow_radius: float = 10.0
    follow_lateral: float = 1.0
    align_angle: float = np.pi / 6
    yield_radius: float = 2.0
    oscillation_limit: int = 3
    min_caption_steps: int = 10
    max_len: int = 8

    @classmethod
    def from_dict(cls, d: dict) -> "AnnotateConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown annotate config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def checksum(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


@dataclass
class TokenInterval:
    token: int
    start: int
    end: int
    agent_ref: Optional[int] = None

    def __post_init__(self):
        if self.start > self.end:
            raise ValueError("interval start after end")
        if (self.token in REFERRING_TOKENS) != (self.agent_ref is not None):
            raise ValueError("agent_ref must be set exactly for Follow/Yield")

    @property
    def name(self) -> str:
        return VOCAB[self.token]

    def to_dict(self) -> dict:
        return {"token": self.name, "start": self.start, "end": self.end, "agent_ref": self.agent_ref}


@dataclass
class Caption:
    tokens: List[int]
    max_len: int = 8

    def __post_init__(self):
        t = self.tokens
        if len(t) != self.max_len:
            raise ValueError(f"caption must have exactly {self.max_len} tokens")
        if t[0] != BOS:
            raise ValueError("caption must start with <bos>")
        if EOS not in t:
            raise ValueError("caption must contain <eos>")
        e = t.index(EOS)
        if any(x != PAD for x in t[e + 1:]):
            raise ValueError("only <pad> may follow <eos>")
        body = t[1:e]
        if any(x in (BOS, EOS, PAD) for x in body):
            raise ValueError("specials inside caption body")
        for i, x in enumerate(body):
            if x in REFERRING_TOKENS and (i + 1 >= len(body) or body[i + 1] not in AGENT_TOKENS):
                raise ValueError(f"{VOCAB[x]} must be followed by an Agent#k token")

    @property
    def content(self) -> List[int]:
        return content_tokens(self.tokens)

    @property
    def names(self) -> List[str]:
        return token_names(self.tokens)

    @classmethod
    def from_content(cls, content: Sequence[Union[str, int]], max_len: int = 8) -> "Caption":
        ids = [token_id(t) for t in content]
        if len(ids) + 2 > max_len:
            raise ValueError("caption content too long")
        return cls([BOS] + ids + [EOS] + [PAD] * (max_len - len(ids) - 2), max_len)


@dataclass
class Rejection:
    reason: str


def empty_caption(max_len: int = 8) -> Caption:
    """The description with no content: ``<bos> <eos> <pad> ...``."""
    return Caption.from_content([], max_len)


def _runs(mask: np.ndarray):
    """Yield (start, end) inclusive index pairs of True runs."""
    m = np.concatenate([[False], np.asarray(mask, bool), [False]])
    d = np.diff(m.astype(int))
    starts = np.where(d == 1)[0]
    ends = np.where(d == -1)[0] - 1
    return list(zip(starts.tolist(), ends.tolist()))


def _min_steps(cfg: AnnotateConfig, dt: float) -> int:
    return max(1, int(round(cfg.min_dur / dt)))


def _emit(mask, token, cfg, dt, offset=0, agent_ref=None):
    n = _min_steps(cfg, dt)
    return [
        TokenInterval(TOKEN_ID[token], s - offset, e - offset, agent_ref)
        for s, e in _runs(mask)
        if e - s + 1 >= n
    ]


def detect_motion_tokens(prof: KinematicProfile, cfg: Optional[AnnotateConfig] = None) -> List[TokenInterval]:
    """Speed, acceleration and turning tokens over maximal runs of a profile."""
    cfg = cfg or AnnotateConfig()
    dt = prof.dt
    v = prof.speed
    out = []
    out += _emit(v >= cfg.fast_thresh, "MoveFast", cfg, dt)
    out += _emit((v <= cfg.slow_thresh) & (v > cfg.stop_thresh), "MoveSlow", cfg, dt)
    out += _emit(v <= cfg.stop_thresh, "Stop", cfg, dt)
    out += _emit(prof.accel >= cfg.acc_thresh, "SpeedUp", cfg, dt)
    out += _emit(prof.accel <= -cfg.acc_thresh, "SlowDown", cfg, dt)
    window = max(1, min(len(prof), int(round(cfg.turn_window / dt))))
    dh = heading_change(prof, window)
    moving = v >= cfg.turn_min_speed
    out += _emit((dh >= cfg.turn_thresh) & moving, "TurnLeft", cfg, dt)
    out += _emit((dh <= -cfg.turn_thresh) & moving, "TurnRight", cfg, dt)
    return sorted(out, key=lambda iv: (iv.start, iv.token))


def detect_lane_tokens(
    traj: Trajectory, map_graph: Optional[MapGraph], cfg: Optional[AnnotateConfig] = None
) -> List[TokenInterval]:
    """LaneKeep runs and lane changes from switches of the closest centerline."""
    cfg = cfg or AnnotateConfig()
    if map_graph is None or map_graph.empty:
        return []
    pts = traj.points
    lanes = [closest_centerline(p, map_graph) for p in pts]
    ids = np.array([lane[0] for lane in lanes])
    n = len(pts)
    in_change = np.zeros(n, bool)
    changes = []
    lane_by_id = {c.id: c for c in map_graph.centerlines}
    for k in np.where(ids[1:] != ids[:-1])[0] + 1:
        # side of the new lane relative to the direction of travel
        prev_lane, new_lane = lane_by_id[ids[k - 1]], lane_by_id[ids[k]]
        p = pts[k]
        direction = pts[min(k + 1, n - 1)] - pts[max(k - 1, 0)]
        near_new = _nearest_on(new_lane.polyline, p)
        near_old = _nearest_on(prev_lane.polyline, p)
        offset = near_new - near_old
        cross = direction[0] * offset[1] - direction[1] * offset[0]
        tok = "LaneChangeLeft" if cross > 0 else "LaneChangeRight"
        lo = max(0, k - cfg.lane_change_half_window)
        hi = min(n - 1, k + cfg.lane_change_half_window)
        in_change[lo: hi + 1] = True
        changes.append(TokenInterval(TOKEN_ID[tok], lo, hi))
    out = list(changes)
    out += _emit(~in_change, "LaneKeep", cfg, traj.dt)
    return sorted(out, key=lambda iv: (iv.start, iv.token))


def _nearest_on(poly: np.ndarray, p: np.ndarray) -> np.ndarray:
    a = poly[:-1]
    d = poly[1:] - poly[:-1]
    u = np.clip(np.einsum("ij,ij->i", p - a, d) / np.einsum("ij,ij->i", d, d), 0, 1)
    foot = a + u[:, None] * d
    k = int(np.argmin(np.hypot(*(p - foot).T)))
    return foot[k]


def detect_interaction_tokens(
    example: PredictionExample, cfg: Optional[AnnotateConfig] = None, profile: Optional[KinematicProfile] = None
) -> List[TokenInterval]:
    """Follow and Yield tokens of the target (row 0) with respect to neighbours.

    Indices are steps of the example's full window.  Follow requires the
    target to sit on the neighbour's already-driven path, within
    ``follow_radius`` behind it and heading-aligned, for ``min_dur``.  Yield
    requires a path conflict the target reaches after the neighbour while
    decelerating on the approach.
    """
    cfg = cfg or AnnotateConfig()
    dt = example.dt
    pos = example.positions
    valid = example.valid
    target = pos[0]
    prof = profile or compute_kinematics(Trajectory(target, 0.0, dt), cfg.smooth_window)
    out = []
    n = len(target)
    for k in range(1, min(example.num_agents, 5)):
        vk = valid[k]
        if vk.sum() < 2:
            continue
        other = pos[k]
        # Follow
        follow = np.zeros(n, bool)
        heading_k = _headings(other, vk, dt, cfg)
        for t in range(n):
            if not vk[t] or prof.speed[t] < cfg.turn_min_speed:
                continue
            rel = other[t] - target[t]
            dist = float(np.hypot(*rel))
            if dist > cfg.follow_radius or dist < 1e-6:
                continue
            h = prof.heading[t]
            if rel[0] * np.cos(h) + rel[1] * np.sin(h) <= 0:
                continue
            if heading_k[t] is None or abs(wrap_angle(heading_k[t] - h)) > cfg.align_angle:
                continue
            driven = other[: t + 1][vk[: t + 1]]
            if len(driven) >= 2 and _dist_to_polyline(target[t], driven) <= cfg.follow_lateral:
                follow[t] = True
        out += _emit(follow, "Follow", cfg, dt, agent_ref=k)
        # Yield
        idx = np.where(vk)[0]
        run = idx[: np.argmax(np.diff(np.concatenate([idx, [idx[-1] + 2]])) > 1) + 1]
        if len(run) < 2:
            continue
        ev = path_intersection(
            Trajectory(target, 0.0, dt), Trajectory(other[run], run[0] * dt, dt), cfg.yield_radius
        )
        if ev is None or ev.arrival_a <= ev.arrival_b:
            continue
        arrive = min(n - 1, int(np.floor(ev.arrival_a / dt + 1e-9)))
        other_step = min(run[-1], int(np.floor(ev.arrival_b / dt + 1e-9)))
        h_other = heading_k[other_step] if heading_k[other_step] is not None else None
        if h_other is not None and abs(wrap_angle(h_other - prof.heading[arrive])) <= cfg.align_angle:
            continue  # same direction of travel: a queue, not a conflict
        decel_runs = [
            (s, e) for s, e in _runs(prof.accel[: arrive + 1] <= -cfg.acc_thresh) if e - s + 1 >= _min_steps(cfg, dt)
        ]
        if not decel_runs:
            continue
        start = decel_runs[0][0]
        mask = np.zeros(n, bool)
        mask[start: arrive + 1] = True
        out += _emit(mask, "Yield", cfg, dt, agent_ref=k)
    return sorted(out, key=lambda iv: (iv.start, iv.token))


def _headings(path, valid, dt, cfg):
    out = [None] * len(path)
    idx = np.where(valid)[0]
    for a, b in zip(idx[:-1], idx[1:]):
        if b == a + 1:
            d = path[b] - path[a]
            if np.hypot(*d) >= cfg.turn_min_speed * dt:
                out[b] = float(np.arctan2(d[1], d[0]))
    for i in range(len(out) - 1):
        if out[i] is None and out[i + 1] is not None and valid[i]:
            out[i] = out[i + 1]
    return out


def _dist_to_polyline(p, poly):
    a = poly[:-1]
    d = poly[1:] - poly[:-1]
    l2 = np.einsum("ij,ij->i", d, d)
    keep = l2 > 0
    if not keep.any():
        return float(np.hypot(*(p - poly[0])))
    a, d, l2 = a[keep], d[keep], l2[keep]
    u = np.clip(np.einsum("ij,ij->i", p - a, d) / l2, 0, 1)
    return float(np.min(np.hypot(*(p - (a + u[:, None] * d)).T)))


def _oscillations(intervals: Sequence[TokenInterval]) -> int:
    worst = 0
    for a, b in OPPOSITES:
        pair = {TOKEN_ID[a], TOKEN_ID[b]}
        seq = [iv.token for iv in sorted(intervals, key=lambda iv: (iv.start, iv.end)) if iv.token in pair]
        switches = sum(1 for x, y in zip(seq, seq[1:]) if x != y)
        worst = max(worst, switches)
    return worst


def compose_caption(
    intervals: Sequence[TokenInterval],
    max_len: int = 8,
    rng: Optional[np.random.Generator] = None,
    usable_steps: Optional[int] = None,
    cfg: Optional[AnnotateConfig] = None,
) -> Union[Caption, Rejection]:
    """Order intervals in time and keep one token per group of overlapping ones.

    Follow/Yield expand to the verb plus its ``Agent#k``.  Tokens that do not
    fit in ``max_len`` (with ``<bos>``/``<eos>``) are dropped from the end.
    """
    cfg = cfg or AnnotateConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    if usable_steps is not None and usable_steps < cfg.min_caption_steps:
        return Rejection("too_short")
    if _oscillations(intervals) >= cfg.oscillation_limit:
        return Rejection("oscillating")
    ivs = sorted(intervals, key=lambda iv: (iv.start, iv.end, iv.token))
    groups: List[List[TokenInterval]] = []
    group_end = None
    for iv in ivs:
        if groups and iv.start <= group_end:
            groups[-1].append(iv)
            group_end = max(group_end, iv.end)
        else:
            groups.append([iv])
            group_end = iv.end
    body: List[int] = []
    for g in groups:
        pick = g[int(rng.integers(len(g)))] if len(g) > 1 else g[0]
        toks = [pick.token]
        if pick.agent_ref is not None:
            toks.append(AGENT_TOKENS[pick.agent_ref - 1])
        if len(body) + len(toks) + 2 > max_len:
            break
        body += toks
    if not body:
        return Rejection("no_tokens")
    return Caption.from_content(body, max_len)


def example_rng(example_id: str, seed: int) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{example_id}".encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


@dataclass
class Annotation:
    example_id: str
    intervals: List[TokenInterval]
    caption: Optional[Caption]
    reason: str = ""

    @property
    def rejected(self) -> bool:
        return self.caption is None

    @property
    def detected(self) -> List[int]:
        """Detected tokens in temporal order, Follow/Yield expanded."""
        out = []
        for iv in self.intervals:
            out.append(iv.token)
            if iv.agent_ref is not None:
                out.append(AGENT_TOKENS[iv.agent_ref - 1])
        return out

    def to_record(self, config_checksum: str = "") -> dict:
        return {
            "example_id": self.example_id,
            "tokens": [] if self.caption is None else self.caption.names,
            "intervals": [iv.to_dict() for iv in self.intervals],
            "rejected": self.rejected,
            "reason": self.reason,
            "config_sha256": config_checksum,
        }


def annotate_example(example: PredictionExample, cfg: Optional[AnnotateConfig] = None, seed: int = 0) -> Annotation:
    """Run all detectors on the target agent and compose its future caption.

    Kinematics use the whole window; intervals are then clipped to the future
    and re-indexed so that step 0 is the first future step.
    """
    cfg = cfg or AnnotateConfig()
    P = example.past_len
    target = example.positions[0]
    tvalid = example.valid[0]
    usable = int(tvalid[P:].sum())
    if tvalid.sum() < 2 or not tvalid.all():
        return Annotation(example.example_id, [], None, "too_short")
    traj = Trajectory(target, 0.0, example.dt)
    prof = compute_kinematics(traj, cfg.smooth_window)
    raw = detect_motion_tokens(prof, cfg)
    raw += detect_lane_tokens(traj, example.map, cfg)
    raw += detect_interaction_tokens(example, cfg, prof)
    n_future = len(target) - P
    clipped = []
    for iv in raw:
        s, e = max(iv.start, P) - P, min(iv.end, len(target) - 1) - P
        if e < s or e - s + 1 < _min_steps(cfg, example.dt):
            continue
        clipped.append(TokenInterval(iv.token, s, e, iv.agent_ref))
    clipped.sort(key=lambda iv: (iv.start, iv.token))
    cap = compose_caption(clipped, cfg.max_len, example_rng(example.example_id, seed), usable, cfg)
    if isinstance(cap, Rejection):
        return Annotation(example.example_id, clipped, None, cap.reason)
    return Annotation(example.example_id, clipped, cap)


def multiset_recall(expected: Sequence[int], got: Sequence[int]) -> float:
    from collections import Counter

    e, g = Counter(expected), Counter(got)
    total = sum(e.values())
    if total == 0:
        return float("nan")
    return sum(min(c, g[t]) for t, c in e.items()) / total
