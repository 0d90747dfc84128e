"""Scripted synthetic scenes with known ground-truth tokens.

A :class:`ScenarioScript` gives every agent a timed maneuver program.  The
programs are integrated at 10 Hz and the script's ``expected_tokens`` are the
tokens the target's future (t >= 2.0 s of a 5 s scene) is built to exhibit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .annotate import CONTENT_TOKENS
from .dataio import PredictionExample, Scene
from .geom import LaneCenterline, MapGraph


class InvalidScriptError(ValueError):
    """The maneuver program is inconsistent."""


SEGMENT_KINDS = ("cruise", "accelerate", "turn", "lane_change", "stop")


@dataclass
class Segment:
    kind: str
    start: float
    end: float
    accel: float = 0.0
    yaw_rate: float = 0.0
    side: str = "left"
    width: float = 3.5


@dataclass
class AgentProgram:
    agent_id: str
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0
    speed: float = 0.0
    segments: List[Segment] = field(default_factory=list)
    follow: Optional[str] = None
    lag: float = 1.0
    object_type: str = "AGENT"


@dataclass
class ScenarioScript:
    name: str
    agents: List[AgentProgram]
    target: str
    expected_tokens: List[str]
    lanes: List[np.ndarray] = field(default_factory=list)
    duration: float = 5.0
    dt: float = 0.1

    def validate(self) -> None:
        ids = [a.agent_id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise InvalidScriptError(f"{self.name}: duplicate agent ids")
        if self.target not in ids:
            raise InvalidScriptError(f"{self.name}: unknown target {self.target!r}")
        for tok in self.expected_tokens:
            if tok not in CONTENT_TOKENS:
                raise InvalidScriptError(f"{self.name}: {tok!r} is not a content token")
        by_id = {a.agent_id: a for a in self.agents}
        for a in self.agents:
            if a.follow is not None:
                if a.segments:
                    raise InvalidScriptError(f"{self.name}/{a.agent_id}: follow conflicts with explicit segments")
                if a.follow not in by_id or by_id[a.follow].follow is not None:
                    raise InvalidScriptError(f"{self.name}/{a.agent_id}: bad leader {a.follow!r}")
                continue
            segs = sorted(a.segments, key=lambda s: s.start)
            t = 0.0
            for s in segs:
                if s.kind not in SEGMENT_KINDS:
                    raise InvalidScriptError(f"{self.name}/{a.agent_id}: unknown segment kind {s.kind!r}")
                if s.end <= s.start:
                    raise InvalidScriptError(f"{self.name}/{a.agent_id}: empty segment")
                if s.start < t - 1e-9:
                    raise InvalidScriptError(f"{self.name}/{a.agent_id}: simultaneous segments at t={s.start}")
                if s.start > t + 1e-9:
                    raise InvalidScriptError(f"{self.name}/{a.agent_id}: gap before t={s.start}")
                t = s.end
            if segs and t < self.duration - 1e-9:
                raise InvalidScriptError(f"{self.name}/{a.agent_id}: program ends at {t} < {self.duration}")


PRE_ROLL = 4.0


def _integrate(prog: AgentProgram, times: np.ndarray, dt: float) -> np.ndarray:
    """Positions of a segment program at ``times`` (which may start before 0)."""
    x, y, th, v = prog.x, prog.y, prog.heading, prog.speed
    # straight-line pre-roll so that negative times are defined
    t_first = times[0]
    x -= v * (-t_first) * np.cos(th)
    y -= v * (-t_first) * np.sin(th)
    d = 0.0
    out = np.empty((len(times), 2))
    segs = sorted(prog.segments, key=lambda s: s.start)
    for k, t in enumerate(times):
        seg = next((s for s in segs if s.start - 1e-9 <= t < s.end - 1e-9), None)
        lat = d
        if seg is not None and seg.kind == "lane_change":
            frac = (t - seg.start) / (seg.end - seg.start)
            sign = 1.0 if seg.side == "left" else -1.0
            lat = d + sign * seg.width * 0.5 * (1.0 - np.cos(np.pi * frac))
        out[k] = (x - lat * np.sin(th), y + lat * np.cos(th))
        if seg is None:
            a = w = 0.0
        else:
            a = seg.accel if seg.kind in ("accelerate", "turn") else 0.0
            w = seg.yaw_rate if seg.kind == "turn" else 0.0
            if seg.kind == "stop":
                v = 0.0
            if seg.kind == "lane_change" and t + dt >= seg.end - 1e-9:
                sign = 1.0 if seg.side == "left" else -1.0
                d += sign * seg.width
        v_next = max(0.0, v + a * dt)
        v_mid = 0.5 * (v + v_next)
        x += v_mid * dt * np.cos(th + 0.5 * w * dt)
        y += v_mid * dt * np.sin(th + 0.5 * w * dt)
        th += w * dt
        v = v_next
    return out


def integrate_script(script: ScenarioScript) -> Dict[str, np.ndarray]:
    """Noise-free positions of every agent on the scene grid ``[0, duration)``."""
    script.validate()
    dt = script.dt
    n = int(round(script.duration / dt))
    n_pre = int(round(PRE_ROLL / dt))
    times = dt * np.arange(-n_pre, n)
    paths = {}
    for a in script.agents:
        if a.follow is None:
            paths[a.agent_id] = _integrate(a, times, dt)
    for a in script.agents:
        if a.follow is not None:
            lag = int(round(a.lag / dt))
            if lag > n_pre:
                raise InvalidScriptError(f"{script.name}/{a.agent_id}: lag longer than pre-roll")
            lead = paths[a.follow]
            paths[a.agent_id] = np.concatenate([np.repeat(lead[:1], lag, axis=0), lead[: len(lead) - lag]])
    return {k: v[n_pre:] for k, v in paths.items()}


def synth_scenes(
    script: ScenarioScript,
    n: int,
    seed: int = 0,
    jitter: float = 0.05,
    translate: float = 50.0,
    rotate: bool = False,
) -> List[Tuple[Scene, MapGraph, List[str]]]:
    """Integrate a script ``n`` times with independent pose and jitter draws.

    Each scene is rigidly moved by a uniform translation in
    ``[-translate, translate]^2`` (and a uniform rotation when ``rotate``),
    then every position gets i.i.d. Gaussian noise of std ``jitter``.
    The result depends only on ``(script, n, seed, jitter, translate, rotate)``.
    """
    base = integrate_script(script)
    rng = np.random.default_rng(seed)
    dt = script.dt
    times = dt * np.arange(len(next(iter(base.values()))))
    out = []
    for i in range(n):
        shift = rng.uniform(-translate, translate, size=2) if translate > 0 else np.zeros(2)
        ang = rng.uniform(-np.pi, np.pi) if rotate else 0.0
        rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
        tracks = {}
        for aid in sorted(base):
            xy = base[aid] @ rot.T + shift
            if jitter > 0:
                xy = xy + rng.normal(0.0, jitter, size=xy.shape)
            tracks[aid] = np.column_stack([times, xy])
        lanes = [LaneCenterline(j + 1, np.asarray(p) @ rot.T + shift) for j, p in enumerate(script.lanes)]
        types = {a.agent_id: ("AGENT" if a.agent_id == script.target else a.object_type) for a in script.agents}
        scene = Scene(scene_id=f"{script.name}-{seed}-{i:04d}", tracks=tracks, object_types=types, city="SYN")
        out.append((scene, MapGraph(lanes), list(script.expected_tokens)))
    return out


# -- bundled script library -------------------------------------------------

def _straight_lanes(*offsets: float) -> List[np.ndarray]:
    return [np.array([[-150.0, y], [250.0, y]]) for y in offsets]


def _path_lane(prog: AgentProgram, dt: float = 0.1) -> np.ndarray:
    """A centerline that follows the program's own path, extended at both ends."""
    times = dt * np.arange(-60, 80)
    pts = _integrate(prog, times, dt)[::5]
    head = pts[0] - 100.0 * (pts[1] - pts[0]) / np.hypot(*(pts[1] - pts[0]))
    tail = pts[-1] + 100.0 * (pts[-1] - pts[-2]) / np.hypot(*(pts[-1] - pts[-2]))
    return np.vstack([head, pts, tail])


def _cruise(v: float, **kw) -> AgentProgram:
    return AgentProgram("ego", speed=v, segments=[Segment("cruise", 0.0, 5.0)], **kw)


def _profile(v0: float, pieces: Sequence[Tuple[str, float, float, dict]], aid: str = "ego", **kw) -> AgentProgram:
    segs = [Segment(kind, s, e, **p) for kind, s, e, p in pieces]
    return AgentProgram(aid, speed=v0, segments=segs, **kw)


def _parked(aid: str, x: float, y: float) -> AgentProgram:
    return AgentProgram(aid, x=x, y=y, speed=0.0, segments=[Segment("stop", 0.0, 5.0)], object_type="OTHERS")


def _turn_script(name, v, t0, t1, yaw, expected):
    ego = _profile(v, [("cruise", 0.0, t0, {}), ("turn", t0, t1, {"yaw_rate": yaw}), ("cruise", t1, 5.0, {})])
    return ScenarioScript(name, [ego], "ego", expected, lanes=[_path_lane(ego)])


def _follow_script(name, parked, expected):
    lead = _cruise(6.0)
    lead.agent_id = "lead"
    lead.x = 8.0
    ego = AgentProgram("ego", follow="lead", lag=8.0 / 6.0)
    agents = [ego, lead] + [_parked(f"parked{i}", x, y) for i, (x, y) in enumerate(parked)]
    return ScenarioScript(name, agents, "ego", expected, lanes=_straight_lanes(0.0, 3.5, -3.5))


def _yield_script(name, parked, expected):
    cross = AgentProgram("cross", x=-20.0, y=0.0, heading=0.0, speed=8.0, segments=[Segment("cruise", 0.0, 5.0)])
    ego = _profile(
        7.0,
        [("cruise", 0.0, 1.0, {}), ("accelerate", 1.0, 3.25, {"accel": -2.0}), ("cruise", 3.25, 5.0, {})],
        x=0.0, y=-20.0, heading=np.pi / 2,
    )
    agents = [ego, cross] + [_parked(f"parked{i}", x, y) for i, (x, y) in enumerate(parked)]
    return ScenarioScript(name, agents, "ego", expected)


def _lane_change_script(name, v, side, expected):
    ego = _profile(v, [("cruise", 0.0, 2.0, {}), ("lane_change", 2.0, 4.5, {"side": side}), ("cruise", 4.5, 5.0, {})])
    other = 3.5 if side == "left" else -3.5
    return ScenarioScript(name, [ego], "ego", expected, lanes=_straight_lanes(0.0, other))


def script_library() -> Dict[str, ScenarioScript]:
    """The bundled scripts, keyed by name."""
    lanes3 = _straight_lanes(0.0, 3.5, -3.5)
    scripts = [
        ScenarioScript("cruise_fast", [_cruise(10.0)], "ego", ["MoveFast", "LaneKeep"], lanes=lanes3),
        ScenarioScript("cruise_fast_nomap", [_cruise(10.0)], "ego", ["MoveFast"]),
        ScenarioScript("cruise_slow", [_cruise(1.5)], "ego", ["MoveSlow", "LaneKeep"], lanes=lanes3),
        ScenarioScript("stopped", [_cruise(0.0)], "ego", ["Stop", "LaneKeep"], lanes=lanes3),
        ScenarioScript(
            "brake_to_stop",
            [_profile(10.0, [("cruise", 0.0, 1.5, {}), ("accelerate", 1.5, 2.9, {"accel": -7.0}), ("stop", 2.9, 5.0, {})])],
            "ego", ["SlowDown", "Stop"],
        ),
        ScenarioScript(
            "speed_up",
            [_profile(2.5, [("cruise", 0.0, 1.5, {}), ("accelerate", 1.5, 5.0, {"accel": 1.5})])],
            "ego", ["SpeedUp", "LaneKeep"], lanes=lanes3,
        ),
        ScenarioScript(
            "slow_down",
            [_profile(7.5, [("cruise", 0.0, 1.5, {}), ("accelerate", 1.5, 5.0, {"accel": -1.5})])],
            "ego", ["SlowDown", "LaneKeep"], lanes=lanes3,
        ),
        ScenarioScript(
            "stop_and_go",
            [_profile(0.0, [("stop", 0.0, 2.5, {}), ("accelerate", 2.5, 5.0, {"accel": 2.0})])],
            "ego", ["Stop", "LaneKeep", "SpeedUp", "MoveSlow"], lanes=lanes3,
        ),
        _turn_script("turn_left", 5.0, 2.3, 4.3, np.pi / 4, ["TurnLeft", "LaneKeep"]),
        _turn_script("turn_right", 5.0, 2.3, 4.3, -np.pi / 4, ["TurnRight", "LaneKeep"]),
        _turn_script("fast_turn_left", 9.0, 2.5, 4.5, np.pi / 5, ["MoveFast", "TurnLeft", "LaneKeep"]),
        _turn_script("slow_turn_right", 1.8, 2.2, 4.2, -np.pi / 4, ["MoveSlow", "TurnRight", "LaneKeep"]),
        _lane_change_script("lane_change_left", 7.0, "left", ["LaneKeep", "LaneChangeLeft", "LaneKeep"]),
        _lane_change_script("lane_change_right", 7.0, "right", ["LaneKeep", "LaneChangeRight", "LaneKeep"]),
        _lane_change_script(
            "fast_lane_change_left", 9.0, "left", ["MoveFast", "LaneKeep", "LaneChangeLeft", "LaneKeep"]
        ),
        _follow_script("follow_1", [], ["Follow", "Agent#1", "LaneKeep"]),
        _follow_script("follow_2", [(13.4, 3.5)], ["Follow", "Agent#2", "LaneKeep"]),
        _follow_script("follow_3", [(13.4, 3.5), (10.4, -3.5)], ["Follow", "Agent#3", "LaneKeep"]),
        _follow_script("follow_4", [(13.4, 3.5), (10.4, -3.5), (12.9, -3.5)], ["Follow", "Agent#4", "LaneKeep"]),
        _yield_script("yield_cross", [], ["SlowDown", "Yield", "Agent#1"]),
        _yield_script("yield_cross_2", [(3.0, -8.0)], ["SlowDown", "Yield", "Agent#2"]),
        ScenarioScript(
            "slow_down_then_left",
            [_profile(7.0, [("cruise", 0.0, 1.8, {}), ("accelerate", 1.8, 3.3, {"accel": -2.0}),
                            ("cruise", 3.3, 3.4, {}), ("turn", 3.4, 5.0, {"yaw_rate": np.pi / 4})])],
            "ego", ["SlowDown", "TurnLeft"],
        ),
        ScenarioScript(
            "speed_up_then_right",
            [_profile(3.0, [("cruise", 0.0, 1.8, {}), ("accelerate", 1.8, 3.3, {"accel": 2.0}),
                            ("cruise", 3.3, 3.4, {}), ("turn", 3.4, 5.0, {"yaw_rate": -np.pi / 4})])],
            "ego", ["SpeedUp", "TurnRight"],
        ),
    ]
    return {s.name: s for s in scripts}


def unambiguous_library() -> Dict[str, ScenarioScript]:
    """Scripts whose caption is fully determined by the observed past.

    Annotation keeps one random token per group of overlapping intervals,
    so a scene that is, say, both ``MoveFast`` and ``LaneKeep`` gets either
    caption.  These scripts avoid such ties: only the lane-change scenes
    carry a map, where lane tokens follow each other in time.  Every
    maneuver also starts before the prediction time, so scenes with
    different captions have different pasts.  A model can therefore predict
    their captions exactly, which makes them the right material for checking
    that caption learning works.
    """
    lib = script_library()

    def nomap(name, base, expected):
        s = lib[base]
        return ScenarioScript(name, s.agents, s.target, expected, lanes=[], duration=s.duration, dt=s.dt)

    def early_turn(name, yaw, expected):
        ego = _profile(5.0, [("cruise", 0.0, 1.4, {}), ("turn", 1.4, 3.4, {"yaw_rate": yaw}), ("cruise", 3.4, 5.0, {})])
        return ScenarioScript(name, [ego], "ego", expected)

    def early_lane_change(name, side, expected):
        ego = _profile(7.0, [("cruise", 0.0, 1.2, {}), ("lane_change", 1.2, 3.7, {"side": side}), ("cruise", 3.7, 5.0, {})])
        return ScenarioScript(name, [ego], "ego", expected, lanes=_straight_lanes(0.0, 3.5 if side == "left" else -3.5))

    scripts = [
        lib["cruise_fast_nomap"],
        nomap("cruise_slow_nomap", "cruise_slow", ["MoveSlow"]),
        nomap("stopped_nomap", "stopped", ["Stop"]),
        nomap("speed_up_nomap", "speed_up", ["SpeedUp"]),
        nomap("slow_down_nomap", "slow_down", ["SlowDown"]),
        early_turn("turn_left_early", np.pi / 4, ["TurnLeft"]),
        early_turn("turn_right_early", -np.pi / 4, ["TurnRight"]),
        early_lane_change("lane_change_left_early", "left", ["LaneChangeLeft", "LaneKeep"]),
        early_lane_change("lane_change_right_early", "right", ["LaneChangeRight", "LaneKeep"]),
        nomap("follow_1_nomap", "follow_1", ["Follow", "Agent#1"]),
        nomap("follow_2_nomap", "follow_2", ["Follow", "Agent#2"]),
    ]
    return {s.name: s for s in sorted(scripts, key=lambda s: s.name)}


def turn_pair() -> Dict[str, ScenarioScript]:
    """Map-free left and right turns with identical pasts.

    Both turns start 0.4 s after the prediction time, so the observed
    window is the same straight cruise and only the caption
    (``TurnLeft`` / ``TurnRight``) says which way the car goes.  Used to
    check that edited captions steer the decoded trajectory.
    """
    lib = script_library()
    out = {}
    for base, token in (("turn_left", "TurnLeft"), ("turn_right", "TurnRight")):
        s = lib[base]
        out[base + "_nomap"] = ScenarioScript(base + "_nomap", s.agents, s.target, [token], lanes=[],
                                              duration=s.duration, dt=s.dt)
    return out


def two_phase_library() -> Dict[str, ScenarioScript]:
    """Four map-free scripts: a speed change, then a turn, all after the prediction time.

    Every script cruises at 5 m/s through the observed window, so the four
    pasts match; the captions ``[SpeedUp|SlowDown, TurnLeft|TurnRight]``
    name the two future phases in order.
    """
    out = {}
    for acc, a_name in ((2.0, "speed_up"), (-2.0, "slow_down")):
        for yaw, y_name in ((np.pi / 4, "left"), (-np.pi / 4, "right")):
            ego = _profile(5.0, [("cruise", 0.0, 2.0, {}), ("accelerate", 2.0, 3.2, {"accel": acc}),
                                 ("cruise", 3.2, 3.4, {}), ("turn", 3.4, 5.0, {"yaw_rate": yaw})])
            expected = ["SpeedUp" if acc > 0 else "SlowDown", "TurnLeft" if yaw > 0 else "TurnRight"]
            name = f"{a_name}_then_{y_name}_nomap"
            out[name] = ScenarioScript(name, [ego], "ego", expected)
    return out


def synth_examples(
    scripts: Sequence[ScenarioScript],
    n_per_script: int,
    seed: int = 0,
    jitter: float = 0.05,
    caption_fraction: float = 1.0,
    annotate_cfg=None,
) -> List["PredictionExample"]:
    """Target-agent prediction examples with rule-based captions.

    Scenes come from :func:`synth_scenes`; each contributes the example of
    the script's target agent.  A seeded ``1 - caption_fraction`` share of
    the examples has its caption removed (rejected annotations never carry
    one), which mimics a partially described dataset.
    """
    from .annotate import annotate_example
    from .dataio import assemble_examples

    rng = np.random.default_rng(seed)
    out = []
    for k, script in enumerate(scripts):
        for scene, mp, _ in synth_scenes(script, n_per_script, seed=seed + 1000 * k, jitter=jitter):
            ex = next(e for e in assemble_examples(scene, mp) if e.example_id.endswith(":" + script.target))
            ann = annotate_example(ex, annotate_cfg, seed)
            keep = rng.random() < caption_fraction
            ex.caption = ann.caption.tokens if (keep and ann.caption is not None) else None
            out.append(ex)
    return out
