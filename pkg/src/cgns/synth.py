"""Seeded synthetic traffic scenes: roundabout, crossing and straight road."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import DrivableArea, Scene, Track

SCENARIOS = ("roundabout", "crossing", "straight")


@dataclass
class ScenarioSpec:
    scenario: str = "roundabout"
    n_agents: int = 100
    noise: float = 0.05  # position noise std, metres
    duration: float = 300.0  # seconds
    dt: float = 0.5
    radius: tuple = (12.0, 20.0)  # roundabout ring radii, metres
    speed: tuple = (3.5, 6.0)  # m/s
    approach: float = 20.0  # length of entry/exit segments, metres
    lane_width: float = 6.0
    yield_gap: float = 2.0  # crossing: minimum seconds between conflicting passes
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; choose from {SCENARIOS}")
        if self.n_agents < 1:
            raise ValueError("n_agents must be positive")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")
        if self.duration <= 0 or self.dt <= 0:
            raise ValueError("duration and dt must be positive")
        self.radius = tuple(float(r) for r in self.radius)
        self.speed = tuple(float(s) for s in self.speed)
        if not 0 < self.radius[0] <= self.radius[1]:
            raise ValueError("radius must be an increasing positive pair")
        if not 0 < self.speed[0] <= self.speed[1]:
            raise ValueError("speed must be an increasing positive pair")

    @classmethod
    def from_dict(cls, doc):
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self):
        d = asdict(self)
        d["radius"], d["speed"] = list(self.radius), list(self.speed)
        return d


def _sample_path(fn, length, speed, start, spec):
    """Positions at every frame during which the agent travels ``length`` metres."""
    n_frames = int(round(spec.duration / spec.dt))
    first = int(math.ceil(start / spec.dt))
    frames, pts = [], []
    for f in range(first, n_frames):
        s = speed * (f * spec.dt - start)
        if s > length:
            break
        frames.append(f)
        pts.append(fn(s))
    return np.array(frames, dtype=np.int64), np.array(pts, dtype=float).reshape(-1, 2)


def _circle(r, n=72):
    a = np.linspace(0.0, 2 * math.pi, n, endpoint=False)
    return np.stack([r * np.cos(a), r * np.sin(a)], axis=1)


def _strip(p0, p1, width):
    d = np.asarray(p1, float) - np.asarray(p0, float)
    nrm = np.array([-d[1], d[0]]) / np.hypot(*d) * width / 2
    return np.array([p0 + nrm, p1 + nrm, p1 - nrm, p0 - nrm])


def roundabout_path(radius, phi_in, turn, approach):
    """Arc-length parametrised path: tangent entry, CCW arc, tangent exit."""
    p_in = radius * np.array([math.cos(phi_in), math.sin(phi_in)])
    t_in = np.array([-math.sin(phi_in), math.cos(phi_in)])
    phi_out = phi_in + turn
    p_out = radius * np.array([math.cos(phi_out), math.sin(phi_out)])
    t_out = np.array([-math.sin(phi_out), math.cos(phi_out)])
    arc = radius * turn

    def at(s):
        if s <= approach:
            return p_in - (approach - s) * t_in
        if s <= approach + arc:
            a = phi_in + (s - approach) / radius
            return radius * np.array([math.cos(a), math.sin(a)])
        return p_out + (s - approach - arc) * t_out

    return at, 2 * approach + arc


def _roundabout(spec, rng):
    tracks = {}
    r_lo, r_hi = spec.radius
    for aid in range(spec.n_agents):
        radius = rng.uniform(r_lo, r_hi)
        arm = int(rng.integers(4))
        quarters = int(rng.integers(1, 4))
        turn = quarters * math.pi / 2 + rng.uniform(-0.15, 0.15)
        speed = rng.uniform(*spec.speed)
        fn, length = roundabout_path(radius, arm * math.pi / 2, turn, spec.approach)
        start = rng.uniform(-0.5 * length / speed, spec.duration - 0.5 * length / speed)
        frames, pts = _sample_path(fn, length, speed, start, spec)
        if len(frames):
            tracks[aid] = Track(aid, frames, pts, "vehicle")
    outer = r_hi + spec.lane_width / 2
    inner = max(r_lo - spec.lane_width / 2, 0.5)
    polys = [_circle(outer)]
    for arm in range(4):
        phi = arm * math.pi / 2
        for r in (r_lo, r_hi):
            p = r * np.array([math.cos(phi), math.sin(phi)])
            t = np.array([-math.sin(phi), math.cos(phi)])
            polys.append(_strip(p - spec.approach * 1.5 * t, p + spec.approach * 1.5 * t,
                                spec.lane_width))
    return tracks, DrivableArea(polys, [_circle(inner)])


def _crossing(spec, rng):
    """Perpendicular constant-velocity flows; north/south agents yield."""
    tracks = {}
    half = spec.approach * 2
    passes = []  # east/west crossing times of the centre
    plans = []
    for aid in range(spec.n_agents):
        heading = int(rng.integers(4))  # 0 E, 1 N, 2 W, 3 S
        speed = rng.uniform(*spec.speed)
        lane = spec.lane_width / 4 * (1 if heading in (0, 1) else -1)
        start = rng.uniform(0.0, spec.duration * 0.8)
        plans.append((aid, heading, speed, lane, start))
        if heading in (0, 2):
            passes.append(start + half / speed)
    passes = np.sort(np.array(passes))
    for aid, heading, speed, lane, start in plans:
        if heading in (1, 3) and len(passes):
            t_c = start + half / speed
            for _ in range(len(passes)):
                close = passes[np.abs(passes - t_c) < spec.yield_gap]
                if not len(close):
                    break
                t_c = close.max() + spec.yield_gap
            start = t_c - half / speed
        d = np.array([[1, 0], [0, 1], [-1, 0], [0, -1]][heading], dtype=float)
        off = np.array([-d[1], d[0]]) * -lane

        def fn(s, d=d, off=off):
            return -half * d + s * d + off

        frames, pts = _sample_path(fn, 2 * half, speed, start, spec)
        if len(frames):
            tracks[aid] = Track(aid, frames, pts, "vehicle")
    w = spec.lane_width
    polys = [_strip(np.array([-half, 0.0]), np.array([half, 0.0]), w),
             _strip(np.array([0.0, -half]), np.array([0.0, half]), w)]
    return tracks, DrivableArea(polys, [])


def _straight(spec, rng):
    tracks = {}
    length = spec.approach * 4
    for aid in range(spec.n_agents):
        speed = rng.uniform(*spec.speed)
        lane = float(rng.integers(-1, 2)) * spec.lane_width / 3
        start = rng.uniform(0.0, spec.duration * 0.8)

        def fn(s, lane=lane):
            return np.array([s - length / 2, lane])

        frames, pts = _sample_path(fn, length, speed, start, spec)
        if len(frames):
            tracks[aid] = Track(aid, frames, pts, "vehicle")
    poly = _strip(np.array([-length, 0.0]), np.array([length, 0.0]), spec.lane_width * 1.5)
    return tracks, DrivableArea([poly], [])


def synth_generate(spec, seed=None):
    """Deterministic scene for ``spec`` and ``seed`` (falls back to ``spec.seed``, then 0)."""
    if isinstance(spec, dict):
        spec = ScenarioSpec.from_dict(spec)
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng(0 if seed is None else seed)
    build = {"roundabout": _roundabout, "crossing": _crossing, "straight": _straight}[spec.scenario]
    tracks, area = build(spec, rng)
    if spec.noise > 0:
        for tr in tracks.values():
            tr.positions = tr.positions + rng.normal(0.0, spec.noise, tr.positions.shape)
    return Scene(tracks, dt=spec.dt, frame_step=1, drivable=area)
