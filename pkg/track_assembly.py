"""
track_assembly.py - Ego-centric tracks, past/future windows and interaction graphs

Positions are metres in the ego frame: x lateral, y longitudinal. Tracks are
sampled at a fixed period; a window holds T past and F future steps for the
target and every neighbour inside the observable radius at the last
observed frame.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence

import numpy as np
import pandas as pd

from constants import (
    D_NEAR_M,
    FUTURE_STEPS,
    MAX_INTERPOLATED_GAP,
    MAX_NEIGHBORS,
    OBSERVABLE_RADIUS_M,
    PAST_STEPS,
    SAMPLE_PERIOD_S,
)
from exceptions import ContractError, DimensionError, MalformedInputError, NoWindowError

logger = logging.getLogger(__name__)

TRACK_COLUMNS = ["frame", "track_id", "x", "y"]


class TrackSet:
    """Gap-free tracks: one (x, y) per track per frame, frames strictly increasing."""

    def __init__(self, table: pd.DataFrame, dt: float = SAMPLE_PERIOD_S):
        table = table.copy()
        if "source_id" not in table.columns:
            table["source_id"] = table["track_id"]
        self.table = (
            table[["frame", "track_id", "x", "y", "source_id"]]
            .astype({"frame": "int64", "track_id": "int64", "x": "float64", "y": "float64", "source_id": "int64"})
            .sort_values(["track_id", "frame"])
            .reset_index(drop=True)
        )
        self.dt = dt
        self._grid: Optional[_Grid] = None

    def __len__(self) -> int:
        return len(self.table)

    @property
    def track_ids(self) -> List[int]:
        return sorted(self.table["track_id"].unique().tolist())

    def track(self, track_id: int) -> pd.DataFrame:
        return self.table[self.table["track_id"] == track_id].reset_index(drop=True)

    def source_of(self, track_id: int) -> int:
        rows = self.table.loc[self.table["track_id"] == track_id, "source_id"]
        if rows.empty:
            raise NoWindowError(f"Track {track_id} does not exist")
        return int(rows.iloc[0])

    @property
    def grid(self) -> "_Grid":
        if self._grid is None:
            self._grid = _Grid.from_table(self.table)
        return self._grid


@dataclass
class _Grid:
    """Dense frame x track arrays of a TrackSet."""

    first_frame: int
    ids: np.ndarray
    x: np.ndarray
    y: np.ndarray
    present: np.ndarray
    column: Dict[int, int]

    @classmethod
    def from_table(cls, table: pd.DataFrame) -> "_Grid":
        if table.empty:
            return cls(0, np.zeros(0, dtype=np.int64), np.zeros((0, 0)), np.zeros((0, 0)),
                       np.zeros((0, 0), dtype=bool), {})
        first, last = int(table["frame"].min()), int(table["frame"].max())
        ids = np.array(sorted(table["track_id"].unique()), dtype=np.int64)
        column = {int(t): i for i, t in enumerate(ids)}
        n_frames = last - first + 1
        x = np.zeros((n_frames, len(ids)))
        y = np.zeros((n_frames, len(ids)))
        present = np.zeros((n_frames, len(ids)), dtype=bool)
        rows = table["frame"].to_numpy() - first
        cols = table["track_id"].map(column).to_numpy()
        x[rows, cols] = table["x"].to_numpy()
        y[rows, cols] = table["y"].to_numpy()
        present[rows, cols] = True
        return cls(first, ids, x, y, present, column)

    def rows(self, frames: np.ndarray) -> np.ndarray:
        return frames - self.first_frame

    def in_range(self, frame: int) -> bool:
        return 0 <= frame - self.first_frame < self.present.shape[0]


@dataclass
class TrajectoryWindow:
    """Past/future arrays for the target (index 0) and its neighbours."""

    past: np.ndarray
    future: np.ndarray
    presence: np.ndarray
    vehicle_ids: List[int]
    frames: List[int]
    target_id: int
    window_id: int = 0
    source_ids: List[int] = field(default_factory=list)

    def __post_init__(self):
        self.past = np.asarray(self.past, dtype=np.float64)
        self.future = np.asarray(self.future, dtype=np.float64)
        self.presence = np.asarray(self.presence, dtype=bool)
        if not self.source_ids:
            self.source_ids = list(self.vehicle_ids)
        T, N = self.past.shape[:2]
        F = self.future.shape[0]
        if self.past.shape != (T, N, 2) or self.future.shape != (F, N, 2) or self.presence.shape != (T + F, N):
            raise DimensionError(
                f"Window arrays disagree: past {self.past.shape}, future {self.future.shape}, "
                f"presence {self.presence.shape}",
                shapes=(self.past.shape, self.future.shape, self.presence.shape),
            )

    @property
    def t_steps(self) -> int:
        return self.past.shape[0]

    @property
    def f_steps(self) -> int:
        return self.future.shape[0]

    @property
    def n_vehicles(self) -> int:
        return self.past.shape[1]

    @property
    def past_presence(self) -> np.ndarray:
        return self.presence[: self.t_steps]

    @property
    def future_presence(self) -> np.ndarray:
        return self.presence[self.t_steps:]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "window_id": self.window_id,
            "target_id": self.target_id,
            "vehicle_ids": list(self.vehicle_ids),
            "source_ids": list(self.source_ids),
            "frames": list(self.frames),
            "past": self.past.tolist(),
            "future": self.future.tolist(),
            "presence": self.presence.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "TrajectoryWindow":
        try:
            past = np.asarray(payload["past"], dtype=np.float64)
            n = past.shape[1] if past.ndim == 3 else 0
            future = np.asarray(payload.get("future") or np.zeros((0, n, 2)), dtype=np.float64)
            presence = payload.get("presence")
            if presence is None:
                presence = np.ones((past.shape[0] + future.shape[0], n), dtype=bool)
            return cls(
                past=past,
                future=future.reshape(-1, n, 2),
                presence=np.asarray(presence, dtype=bool),
                vehicle_ids=[int(v) for v in payload["vehicle_ids"]],
                frames=[int(f) for f in payload.get("frames", [])],
                target_id=int(payload.get("target_id", payload["vehicle_ids"][0])),
                window_id=int(payload.get("window_id", 0)),
                source_ids=[int(v) for v in payload.get("source_ids", [])],
            )
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedInputError(f"Window JSON is malformed: {e}") from e


@dataclass
class ScaleSpec:
    """Per-axis affine map x -> (x - offset) * gain fitted to a corpus range."""

    offset: np.ndarray
    gain: np.ndarray

    def __post_init__(self):
        self.offset = np.asarray(self.offset, dtype=np.float64).reshape(2)
        self.gain = np.asarray(self.gain, dtype=np.float64).reshape(2)
        if not np.all(self.gain > 0):
            raise ContractError(f"Scale gains must be positive, got {self.gain.tolist()}")

    @classmethod
    def fit(cls, coords: np.ndarray, mask: Optional[np.ndarray] = None) -> "ScaleSpec":
        """Map [min, max] of each axis over the masked-in corpus onto [-1, 1]."""
        coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
        if mask is not None:
            coords = coords[np.asarray(mask, dtype=bool).reshape(-1)]
        if len(coords) == 0:
            raise ContractError("Cannot fit a scale to an empty corpus")
        low, high = coords.min(axis=0), coords.max(axis=0)
        span = np.where(high - low > 0, high - low, 2.0)
        return cls(offset=(low + high) / 2.0, gain=2.0 / span)

    def scale(self, coords: np.ndarray) -> np.ndarray:
        return (np.asarray(coords, dtype=np.float64) - self.offset) * self.gain

    def unscale(self, coords: np.ndarray) -> np.ndarray:
        return np.asarray(coords, dtype=np.float64) / self.gain + self.offset

    def to_dict(self) -> Dict[str, Any]:
        return {"offset": self.offset.tolist(), "gain": self.gain.tolist()}

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "ScaleSpec":
        return cls(payload["offset"], payload["gain"])


@dataclass
class WindowBatch:
    """Windows padded to a common vehicle count; padding vehicles are never present."""

    past: np.ndarray        # (B, T, N, 2) metres
    future: np.ndarray      # (B, F, N, 2) metres
    presence: np.ndarray    # (B, T+F, N)
    graphs: np.ndarray      # (B, T, N, N)
    windows: List[TrajectoryWindow]

    @property
    def t_steps(self) -> int:
        return self.past.shape[1]

    @property
    def past_presence(self) -> np.ndarray:
        return self.presence[:, : self.t_steps]

    @property
    def future_presence(self) -> np.ndarray:
        return self.presence[:, self.t_steps:]

    def __len__(self) -> int:
        return len(self.windows)


# ---------------------------------------------------------------- assembly

def assemble(
    frames: pd.DataFrame,
    dt: float = SAMPLE_PERIOD_S,
    max_gap: int = MAX_INTERPOLATED_GAP,
) -> TrackSet:
    """
    Concatenate per-frame positions into gap-free tracks.

    Gaps of up to max_gap missing frames are filled by linear interpolation;
    longer gaps split the track, the later part taking a fresh track id.
    source_id keeps the id the detections carried.

    Raises:
        MalformedInputError: On missing columns or duplicate (frame, track_id) rows.
    """
    missing = [c for c in TRACK_COLUMNS if c not in frames.columns]
    if missing:
        raise MalformedInputError(f"Trajectory table is missing columns: {', '.join(missing)}")

    table = frames[TRACK_COLUMNS].copy()
    dupes = table.duplicated(subset=["frame", "track_id"], keep=False)
    if dupes.any():
        first = table[dupes].iloc[0]
        raise MalformedInputError(
            f"Duplicate (frame, track_id) rows, e.g. frame={int(first['frame'])} "
            f"track_id={int(first['track_id'])} ({int(dupes.sum())} rows)"
        )
    if table.empty:
        return TrackSet(table.assign(source_id=table["track_id"]), dt=dt)

    table = table.sort_values(["track_id", "frame"]).reset_index(drop=True)
    next_id = int(table["track_id"].max()) + 1
    pieces: List[pd.DataFrame] = []
    interpolated = splits = 0

    for track_id, track in table.groupby("track_id", sort=True):
        track = track.set_index("frame")[["x", "y"]]
        frame_numbers = track.index.to_numpy()
        breaks = np.where(np.diff(frame_numbers) - 1 > max_gap)[0]
        bounds = [0, *(breaks + 1).tolist(), len(frame_numbers)]
        for k, (start, stop) in enumerate(zip(bounds[:-1], bounds[1:])):
            segment = track.iloc[start:stop]
            full = np.arange(segment.index[0], segment.index[-1] + 1)
            interpolated += len(full) - len(segment)
            segment = segment.reindex(full).interpolate(method="index")
            segment = segment.rename_axis("frame").reset_index()
            if k == 0:
                segment["track_id"] = track_id
            else:
                segment["track_id"] = next_id
                next_id += 1
                splits += 1
            segment["source_id"] = track_id
            pieces.append(segment)

    if interpolated or splits:
        logger.info(f"Assembled tracks: {interpolated} frames interpolated, {splits} splits")
    return TrackSet(pd.concat(pieces, ignore_index=True), dt=dt)


# ---------------------------------------------------------------- graphs

def graph_from_positions(positions: np.ndarray, present: np.ndarray, d_near: float = D_NEAR_M) -> np.ndarray:
    """
    Adjacency E[i, j] = 1 iff both vehicles are present and within d_near.

    Works on any leading axes: positions (..., N, 2), present (..., N) ->
    (..., N, N). The diagonal is always 1, absent vehicles connect only to
    themselves.
    """
    positions = np.asarray(positions, dtype=np.float64)
    present = np.asarray(present, dtype=bool)
    if positions.shape[:-1] != present.shape or positions.shape[-1] != 2:
        raise DimensionError(
            f"Positions {positions.shape} do not match presence {present.shape}",
            shapes=(positions.shape, present.shape),
        )
    delta = positions[..., :, None, :] - positions[..., None, :, :]
    distance = np.sqrt(np.sum(delta * delta, axis=-1))
    edges = (distance <= d_near) & present[..., :, None] & present[..., None, :]
    n = positions.shape[-2]
    return edges | np.eye(n, dtype=bool)


def build_graph(window: TrajectoryWindow, t: int, d_near: float = D_NEAR_M) -> np.ndarray:
    """Interaction graph at window step t (0..T+F-1)."""
    steps = window.t_steps + window.f_steps
    if not 0 <= t < steps:
        raise ContractError(f"Timestep {t} outside window of {steps} steps")
    positions = window.past[t] if t < window.t_steps else window.future[t - window.t_steps]
    return graph_from_positions(positions, window.presence[t], d_near)


def window_graphs(window: TrajectoryWindow, d_near: float = D_NEAR_M) -> np.ndarray:
    """(T, N, N) graphs over the observed past."""
    return graph_from_positions(window.past, window.past_presence, d_near)


# ---------------------------------------------------------------- windows

def window(
    tracks: TrackSet,
    target_id: int,
    t_steps: int = PAST_STEPS,
    f_steps: int = FUTURE_STEPS,
    last_observed: Optional[int] = None,
    radius: float = OBSERVABLE_RADIUS_M,
    max_neighbors: int = MAX_NEIGHBORS,
    window_id: int = 0,
) -> TrajectoryWindow:
    """
    Cut the window whose last observed frame is last_observed.

    Neighbours are the vehicles within radius of the target at that frame,
    nearest first, capped at max_neighbors (target included). Membership is
    fixed for the whole window; entries where a member is absent are zero and
    masked out.

    Raises:
        NoWindowError: If the target is not present on every past frame.
    """
    grid = tracks.grid
    if target_id not in grid.column:
        raise NoWindowError(f"Target {target_id} has no track")
    col = grid.column[target_id]
    if last_observed is None:
        target_rows = np.flatnonzero(grid.present[:, col])
        last_observed = int(target_rows[0]) + grid.first_frame + t_steps - 1

    past_frames = np.arange(last_observed - t_steps + 1, last_observed + 1)
    if not all(grid.in_range(int(f)) for f in past_frames):
        raise NoWindowError(f"Target {target_id} has no samples at frames {past_frames[0]}..{past_frames[-1]}")
    past_rows = grid.rows(past_frames)
    if not grid.present[past_rows, col].all():
        raise NoWindowError(
            f"Target {target_id} is not present on every past frame {past_frames[0]}..{past_frames[-1]}"
        )

    last = past_rows[-1]
    target_xy = np.array([grid.x[last, col], grid.y[last, col]])
    candidates = np.flatnonzero(grid.present[last])
    offsets = np.stack([grid.x[last, candidates], grid.y[last, candidates]], axis=-1) - target_xy
    distance = np.sqrt(np.sum(offsets * offsets, axis=-1))
    inside = (distance <= radius) & (candidates != col)
    neighbors = candidates[inside][np.argsort(distance[inside], kind="stable")]
    members = np.concatenate([[col], neighbors])[:max_neighbors]
    if len(neighbors) + 1 > max_neighbors:
        logger.debug(f"Window for {target_id} truncated to {max_neighbors} of {len(neighbors) + 1} vehicles")

    frames = np.arange(last_observed - t_steps + 1, last_observed + f_steps + 1)
    n_rows = grid.present.shape[0]
    rows = grid.rows(frames)
    valid = (rows >= 0) & (rows < n_rows)
    safe = np.clip(rows, 0, max(n_rows - 1, 0))
    present = grid.present[safe][:, members] & valid[:, None]
    xy = np.stack([grid.x[safe][:, members], grid.y[safe][:, members]], axis=-1)
    xy = np.where(present[..., None], xy, 0.0)

    ids = [int(grid.ids[m]) for m in members]
    return TrajectoryWindow(
        past=xy[:t_steps],
        future=xy[t_steps:],
        presence=present,
        vehicle_ids=ids,
        frames=frames.tolist(),
        target_id=int(target_id),
        window_id=window_id,
        source_ids=[tracks.source_of(i) for i in ids],
    )


def iter_windows(
    tracks: TrackSet,
    t_steps: int = PAST_STEPS,
    f_steps: int = FUTURE_STEPS,
    stride: int = 1,
    radius: float = OBSERVABLE_RADIUS_M,
    max_neighbors: int = MAX_NEIGHBORS,
) -> Iterator[TrajectoryWindow]:
    """Every window whose target is present over all T+F frames, ordered by (frame, track)."""
    grid = tracks.grid
    span = t_steps + f_steps
    anchors = []
    for col, track_id in enumerate(grid.ids):
        present = grid.present[:, col].astype(np.int64)
        # run length of consecutive presence ending at each row
        full = np.convolve(present, np.ones(span, dtype=np.int64), mode="valid") == span
        for start in np.flatnonzero(full)[::stride]:
            anchors.append((int(start) + t_steps - 1, int(track_id)))
    anchors.sort()
    for window_id, (row, track_id) in enumerate(anchors):
        yield window(
            tracks,
            track_id,
            t_steps,
            f_steps,
            last_observed=row + grid.first_frame,
            radius=radius,
            max_neighbors=max_neighbors,
            window_id=window_id,
        )


def substitute_observed(win: TrajectoryWindow, observed: TrackSet) -> TrajectoryWindow:
    """
    Replace the past positions by positions recovered from detections.

    Vehicles are matched on source_id. A past step with no recovered position
    becomes absent; the future is left as ground truth.
    """
    lookup: Dict[tuple, np.ndarray] = {}
    for row in observed.table.itertuples(index=False):
        lookup.setdefault((int(row.frame), int(row.source_id)), np.array([row.x, row.y]))
    past = np.zeros_like(win.past)
    present = win.presence.copy()
    for t, frame in enumerate(win.frames[: win.t_steps]):
        for i, source in enumerate(win.source_ids):
            if not win.presence[t, i]:
                continue
            key = (int(frame), int(source))
            if key in lookup:
                past[t, i] = lookup[key]
            else:
                present[t, i] = False
    return TrajectoryWindow(
        past=past,
        future=win.future.copy(),
        presence=present,
        vehicle_ids=list(win.vehicle_ids),
        frames=list(win.frames),
        target_id=win.target_id,
        window_id=win.window_id,
        source_ids=list(win.source_ids),
    )


def collate(windows: Sequence[TrajectoryWindow], d_near: float = D_NEAR_M) -> WindowBatch:
    """Pad windows to a common vehicle count and stack them."""
    if not windows:
        raise ContractError("Cannot collate an empty list of windows")
    t_steps, f_steps = windows[0].t_steps, windows[0].f_steps
    for w in windows:
        if (w.t_steps, w.f_steps) != (t_steps, f_steps):
            raise DimensionError(
                f"Window {w.window_id} has {w.t_steps}+{w.f_steps} steps, expected {t_steps}+{f_steps}",
                shapes=((w.t_steps, w.f_steps), (t_steps, f_steps)),
            )
    n = max(w.n_vehicles for w in windows)
    b = len(windows)
    past = np.zeros((b, t_steps, n, 2))
    future = np.zeros((b, f_steps, n, 2))
    presence = np.zeros((b, t_steps + f_steps, n), dtype=bool)
    for k, w in enumerate(windows):
        past[k, :, : w.n_vehicles] = w.past
        future[k, :, : w.n_vehicles] = w.future
        presence[k, :, : w.n_vehicles] = w.presence
    graphs = graph_from_positions(past, presence[:, :t_steps], d_near)
    return WindowBatch(past=past, future=future, presence=presence, graphs=graphs, windows=list(windows))
