"""Trajectory files, sliding windows, normalization and context rasters."""

from __future__ import annotations

import collections
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from matplotlib.path import Path as MplPath

log = logging.getLogger(__name__)

PEDESTRIAN = dict(t_hist=8, t_fut=12, dt=0.4)
DRIVING = dict(t_hist=4, t_fut=10, dt=0.5)


class TrajectoryFormatError(ValueError):
    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass
class Track:
    agent_id: int
    frames: np.ndarray  # (T,) int
    positions: np.ndarray  # (T, 2)
    tag: str = "agent"


@dataclass
class DrivableArea:
    """Union of ``polygons`` minus ``holes``; each polygon a list of (x, y)."""

    polygons: list = field(default_factory=list)
    holes: list = field(default_factory=list)

    def contains(self, points):
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        inside = np.zeros(len(points), dtype=bool)
        for poly in self.polygons:
            inside |= MplPath(np.asarray(poly, dtype=float)).contains_points(points)
        for poly in self.holes:
            inside &= ~MplPath(np.asarray(poly, dtype=float)).contains_points(points)
        return inside

    def to_json(self):
        return {"polygons": [np.asarray(p).tolist() for p in self.polygons],
                "holes": [np.asarray(p).tolist() for p in self.holes]}

    @classmethod
    def from_json(cls, doc):
        return cls(doc.get("polygons", []), doc.get("holes", []))


@dataclass
class Scene:
    tracks: dict  # agent_id -> Track
    dt: float
    frame_step: int = 1
    drivable: DrivableArea | None = None

    def __post_init__(self):
        self._by_frame = None

    def positions_at(self, frame):
        """{agent_id: position} for agents present at ``frame``."""
        if self._by_frame is None:
            table = collections.defaultdict(dict)
            for tr in self.tracks.values():
                for f, p in zip(tr.frames, tr.positions):
                    table[int(f)][tr.agent_id] = p
            self._by_frame = table
        return self._by_frame.get(int(frame), {})

    def __len__(self):
        return len(self.tracks)


def load_trajectory_file(path, frame_duration=0.4):
    """Parse ``frame_id agent_id x y`` lines ('#' comments and blanks skipped)."""
    rows = collections.defaultdict(list)
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = text.split()
            if len(fields) != 4:
                raise TrajectoryFormatError(f"expected 4 fields, got {len(fields)}", lineno)
            try:
                frame, agent, x, y = (float(v) for v in fields)
            except ValueError:
                raise TrajectoryFormatError(f"non-numeric field in {text!r}", lineno) from None
            if not all(math.isfinite(v) for v in (frame, agent, x, y)):
                raise TrajectoryFormatError("non-finite value", lineno)
            agent = int(agent)
            if rows[agent] and frame <= rows[agent][-1][0]:
                raise TrajectoryFormatError(
                    f"frame {frame:g} of agent {agent} does not increase", lineno
                )
            rows[agent].append((frame, x, y))

    tracks = {}
    gaps = collections.Counter()
    for agent, recs in sorted(rows.items()):
        arr = np.array(recs, dtype=float)
        frames = np.rint(arr[:, 0]).astype(np.int64)
        gaps.update(np.diff(frames).tolist())
        tracks[agent] = Track(agent, frames, arr[:, 1:3].copy())
    # most common gap, smallest on ties
    step = min(gaps.items(), key=lambda kv: (-kv[1], kv[0]))[0] if gaps else 1
    return Scene(tracks, dt=step * frame_duration, frame_step=int(step))


def write_trajectory_file(path, scene, header=None):
    """Write ``frame agent x y`` lines sorted by frame then agent; ``header`` becomes a comment."""
    lines = []
    for tr in scene.tracks.values():
        for f, (x, y) in zip(tr.frames, tr.positions):
            lines.append((int(f), tr.agent_id, float(x), float(y)))
    lines.sort()
    with open(path, "w") as fh:
        if header:
            fh.write(f"# {header}\n")
        for f, a, x, y in lines:
            fh.write(f"{f} {a} {x!r} {y!r}\n")


# ------------------------------------------------------------------ windows


@dataclass
class Normalizer:
    """p_norm = scale * R(-angle) (p - translation)."""

    translation: np.ndarray
    angle: float = 0.0
    scale: float = 1.0

    def _rot(self, angle):
        c, s = math.cos(angle), math.sin(angle)
        return np.array([[c, -s], [s, c]])

    def apply(self, points):
        points = np.asarray(points, dtype=float)
        return self.scale * (points - self.translation) @ self._rot(-self.angle).T

    def invert(self, points):
        points = np.asarray(points, dtype=float)
        return (points / self.scale) @ self._rot(self.angle).T + self.translation


@dataclass
class TrajectoryWindow:
    obs: np.ndarray  # (N, T_h, 2)
    fut: np.ndarray  # (N, T_f, 2)
    valid: np.ndarray  # (N,) bool
    agent_ids: list
    frame: int  # last observed frame
    anchor: Normalizer | None = None
    images: np.ndarray | None = None  # (T_h, S, S)

    @property
    def t_hist(self):
        return self.obs.shape[1]

    @property
    def t_fut(self):
        return self.fut.shape[1]


def make_anchor(obs_target, rotate=True, scale=1.0):
    last = obs_target[-1]
    angle = 0.0
    if rotate and len(obs_target) >= 2:
        v = obs_target[-1] - obs_target[-2]
        if np.hypot(*v) > 1e-9:
            angle = math.atan2(v[1], v[0])
    return Normalizer(np.array(last, dtype=float), angle, scale)


def _consecutive_runs(frames, step):
    breaks = np.nonzero(np.diff(frames) != step)[0] + 1
    return np.split(np.arange(len(frames)), breaks)


def build_windows(scene, t_hist, t_fut, stride=1, max_agents=6, summary=None):
    """Sliding windows with the target in slot 0 and nearest neighbours after it.

    A neighbour must be present on every frame of the window; slots left
    over are zero-padded with ``valid`` false.  ``summary`` (a dict), when
    given, receives counts of windows and skipped short tracks.
    """
    if t_hist < 1 or t_fut < 1:
        raise ValueError("horizons must be positive")
    span = t_hist + t_fut
    step = scene.frame_step
    index = {
        aid: {int(f): i for i, f in enumerate(tr.frames)} for aid, tr in scene.tracks.items()
    }
    windows, skipped = [], 0
    for aid in sorted(scene.tracks):
        tr = scene.tracks[aid]
        runs = [r for r in _consecutive_runs(tr.frames, step) if len(r) >= span]
        if not runs:
            skipped += 1
            continue
        for run in runs:
            for s in range(0, len(run) - span + 1, stride):
                idx = run[s : s + span]
                frames = [int(tr.frames[i]) for i in idx]
                now = frames[t_hist - 1]
                here = tr.positions[idx[t_hist - 1]]
                cands = []
                for other in sorted(scene.tracks):
                    if other == aid:
                        continue
                    oi = index[other]
                    if all(f in oi for f in frames):
                        op = scene.tracks[other].positions[oi[now]]
                        cands.append((float(np.hypot(*(op - here))), other))
                cands.sort()
                chosen = [aid] + [o for _, o in cands[: max_agents - 1]]
                obs = np.zeros((max_agents, t_hist, 2))
                fut = np.zeros((max_agents, t_fut, 2))
                valid = np.zeros(max_agents, dtype=bool)
                for slot, other in enumerate(chosen):
                    oi, otr = index[other], scene.tracks[other]
                    pts = otr.positions[[oi[f] for f in frames]]
                    obs[slot], fut[slot] = pts[:t_hist], pts[t_hist:]
                    valid[slot] = True
                ids = chosen + [None] * (max_agents - len(chosen))
                windows.append(TrajectoryWindow(obs, fut, valid, ids, now))
    if summary is not None:
        summary.update(windows=len(windows), skipped_tracks=skipped)
    return windows


def normalize(window, rotate=True, scale=1.0):
    """Copy of ``window`` in the target-centred frame, plus its Normalizer."""
    norm = make_anchor(window.obs[0], rotate, scale)
    mask = window.valid[:, None, None]
    obs = np.where(mask, norm.apply(window.obs), 0.0)
    fut = np.where(mask, norm.apply(window.fut), 0.0)
    out = TrajectoryWindow(obs, fut, window.valid.copy(), list(window.agent_ids), window.frame,
                           anchor=norm, images=window.images)
    return out, norm


def denormalize(pred, normalizer):
    return normalizer.invert(pred)


def rasterize(scene, window, size=64, extent=40.0):
    """Context rasters, one per observed step, in the window's anchor frame.

    Cells are ``extent / size`` metres wide; row index follows the local y
    axis, column index the local x axis.  Drivable cells are 0.5, cells
    holding any agent 1.0.
    """
    if size < 8:
        raise ValueError("raster size must be at least 8")
    anchor = window.anchor or make_anchor(window.obs[0], rotate=False)
    rot = anchor._rot(anchor.angle)
    cell = extent / size
    centers = (np.arange(size) + 0.5) * cell - extent / 2.0
    gx, gy = np.meshgrid(centers, centers)  # gy varies along rows
    base = np.zeros((size, size))
    if scene.drivable is not None:
        local = np.stack([gx.ravel(), gy.ravel()], axis=1)
        world = local @ rot.T + anchor.translation
        base[scene.drivable.contains(world).reshape(size, size)] = 0.5
    t_hist = window.obs.shape[1]
    frames = [window.frame - (t_hist - 1 - i) * scene.frame_step for i in range(t_hist)]
    out = np.empty((t_hist, size, size))
    for t, f in enumerate(frames):
        img = base.copy()
        pos = scene.positions_at(f)
        if pos:
            pts = np.array(list(pos.values()))
            local = (pts - anchor.translation) @ rot
            col = np.floor((local[:, 0] + extent / 2.0) / cell).astype(int)
            row = np.floor((local[:, 1] + extent / 2.0) / cell).astype(int)
            ok = (col >= 0) & (col < size) & (row >= 0) & (row < size)
            img[row[ok], col[ok]] = 1.0
        out[t] = img
    return out


# ------------------------------------------------------------------ batches


@dataclass
class Batch:
    obs: np.ndarray  # (B, N, T_h, 2) normalized
    fut: np.ndarray  # (B, N, T_f, 2) normalized
    valid: np.ndarray  # (B, N) float
    images: np.ndarray | None  # (B, T_h, S, S)
    dt: float
    scale: float = 1.0

    def __len__(self):
        return self.obs.shape[0]


@dataclass
class WindowSet:
    """Stacked, normalized windows ready for batching."""

    obs: np.ndarray
    fut: np.ndarray
    valid: np.ndarray
    images: np.ndarray | None
    translation: np.ndarray  # (W, 2)
    angle: np.ndarray  # (W,)
    scale: float
    dt: float
    agent_ids: np.ndarray | None = None  # (W, N) int, -1 for empty slots
    frames: np.ndarray | None = None  # (W,) last observed frame

    def __len__(self):
        return self.obs.shape[0]

    def window(self, i):
        """Window ``i`` as a normalized TrajectoryWindow carrying its anchor."""
        ids = [] if self.agent_ids is None else [None if a < 0 else int(a) for a in self.agent_ids[i]]
        frame = -1 if self.frames is None else int(self.frames[i])
        imgs = None if self.images is None else self.images[i]
        return TrajectoryWindow(self.obs[i], self.fut[i], self.valid[i].astype(bool), ids, frame,
                                anchor=self.normalizer(i), images=imgs)

    def batch(self, idx):
        idx = np.asarray(idx)
        imgs = None if self.images is None else self.images[idx]
        return Batch(self.obs[idx], self.fut[idx], self.valid[idx].astype(float), imgs,
                     self.dt, self.scale)

    def normalizer(self, i):
        return Normalizer(self.translation[i], float(self.angle[i]), self.scale)

    def world_future(self):
        out = np.empty_like(self.fut)
        for i in range(len(self)):
            out[i] = self.normalizer(i).invert(self.fut[i])
        return out

    def world_obs(self):
        out = np.empty_like(self.obs)
        for i in range(len(self)):
            out[i] = self.normalizer(i).invert(self.obs[i])
        return out


def prepare(scene, t_hist, t_fut, max_agents=6, stride=1, rotate=True, scale=1.0,
            raster_size=None, raster_extent=40.0, windows=None):
    """Window, normalize and (optionally) rasterize a scene into a WindowSet."""
    if windows is None:
        summary = {}
        windows = build_windows(scene, t_hist, t_fut, stride, max_agents, summary)
        log.info("built %d windows (%d short tracks skipped)", summary["windows"],
                 summary["skipped_tracks"])
    if not windows:
        raise ValueError("scene produced no windows for the configured horizons")
    normed = [normalize(w, rotate, scale)[0] for w in windows]
    images = None
    if raster_size:
        images = np.stack([rasterize(scene, w, raster_size, raster_extent) for w in normed])
    return WindowSet(
        obs=np.stack([w.obs for w in normed]),
        fut=np.stack([w.fut for w in normed]),
        valid=np.stack([w.valid for w in normed]),
        images=images,
        translation=np.stack([w.anchor.translation for w in normed]),
        angle=np.array([w.anchor.angle for w in normed]),
        scale=scale,
        dt=scene.dt,
        agent_ids=np.array([[-1 if a is None else a for a in w.agent_ids] for w in normed],
                           dtype=np.int64),
        frames=np.array([w.frame for w in normed], dtype=np.int64),
    )


def concat_sets(sets):
    sets = list(sets)
    if not sets:
        raise ValueError("no window sets to concatenate")
    first = sets[0]
    for other in sets[1:]:
        if abs(other.dt - first.dt) > 1e-12 or other.scale != first.scale:
            raise ValueError("window sets disagree on step duration or scale")
    imgs = None if first.images is None else np.concatenate([s.images for s in sets])
    return WindowSet(
        np.concatenate([s.obs for s in sets]),
        np.concatenate([s.fut for s in sets]),
        np.concatenate([s.valid for s in sets]),
        imgs,
        np.concatenate([s.translation for s in sets]),
        np.concatenate([s.angle for s in sets]),
        first.scale,
        first.dt,
        None if first.agent_ids is None else np.concatenate([s.agent_ids for s in sets]),
        None if first.frames is None else np.concatenate([s.frames for s in sets]),
    )


def load_map(path):
    with open(path) as fh:
        doc = json.load(fh)
    return DrivableArea.from_json(doc.get("drivable", doc))
