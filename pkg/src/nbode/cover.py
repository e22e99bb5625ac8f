"""Annulus neighborhood covers of the attractor built from training data.

Each data point is the center of an annulus with inner radius r_min (a
multiple of the noise level, so that neighbors are distinguishable from
noise) and outer radius r_max (calibrated so a neighborhood holds a target
fraction of all points).  Membership lists store, per center, every other
point inside the annulus whose future stays inside the dataset for the
training horizon.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .dataset import TrajectoryDataset
from .errors import CalibrationError, CoverError

COVER_MAGIC = b"NBCV"
COVER_VERSION = 1


@dataclass
class NeighborCover:
    """Annulus membership lists over the flattened (trajectory, time) grid."""

    r_min: float
    r_max: float
    horizon: int
    n_traj: int
    n_time: int
    centers: np.ndarray        # flat indices i * n_time + j of eligible centers
    members: list              # per center, sorted flat neighbor indices

    @property
    def occupancy_counts(self) -> np.ndarray:
        return np.array([len(m) for m in self.members])

    def stats(self) -> dict:
        counts = self.occupancy_counts
        return {
            "n_centers": int(self.centers.size),
            "mean_count": float(counts.mean()) if counts.size else 0.0,
            "min_count": int(counts.min()) if counts.size else 0,
            "max_count": int(counts.max()) if counts.size else 0,
        }


def build_kdtree(points: np.ndarray) -> cKDTree:
    """Exact fixed-radius search structure over an (N, d) point cloud."""
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[0] < 1:
        raise ValueError("points must be a non-empty (N, d) array")
    return cKDTree(points)


def _sorted_center_distances(points, centers):
    """Per probe center, the sorted distances to every point (chunked)."""
    rows = np.empty((len(centers), points.shape[0]))
    step = max(1, int(2**22 // max(points.shape[0], 1)))
    for start in range(0, len(centers), step):
        block = centers[start:start + step]
        diff = block[:, None, :] - points[None, :, :]
        rows[start:start + len(block)] = np.sqrt((diff * diff).sum(axis=-1))
    rows.sort(axis=1)
    return rows


def _mean_annulus_count(sorted_rows, r_min, r_max):
    """Mean number of points with r_min <= distance <= r_max per center.

    Pure annulus membership: a center counts itself when r_min == 0.
    """
    total = 0
    for row in sorted_rows:
        total += np.searchsorted(row, r_max, side="right")
        total -= np.searchsorted(row, r_min, side="left")
    return total / len(sorted_rows)


def calibrate_radii(points, noise_std: float, target_frac: float = 0.05,
                    multiplier: float = 8.0, n_probe: int = 512, seed: int = 0,
                    rel_tol: float = 0.02):
    """Choose (r_min, r_max): r_min from the noise level, r_max by bisection.

    r_max is adjusted until the mean annulus occupancy over n_probe sampled
    centers is within rel_tol (relative) of target_frac * N.
    """
    points = np.asarray(points, dtype=float).reshape(-1, np.shape(points)[-1])
    n_total = points.shape[0]
    if not 0.0 < target_frac < 1.0:
        raise ValueError("target_frac must lie in (0, 1)")
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    r_min = multiplier * noise_std
    target = target_frac * n_total

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 733]))
    if n_total <= n_probe:
        centers = points
    else:
        centers = points[rng.choice(n_total, size=n_probe, replace=False)]
    sorted_rows = _sorted_center_distances(points, centers)

    def mean_occ(r):
        return _mean_annulus_count(sorted_rows, r_min, r)

    span = np.linalg.norm(points.max(axis=0) - points.min(axis=0))
    if span == 0.0:
        raise CalibrationError("point cloud is degenerate (zero extent)")
    hi = max(r_min, span / 1024.0)
    while mean_occ(hi) < target * (1.0 - rel_tol):
        hi *= 2.0
        if hi > 4.0 * span:
            raise CalibrationError(
                "cannot reach the occupancy target; r_min is too large "
                "for the attractor extent"
            )
    lo = r_min
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        occ = mean_occ(mid)
        if abs(occ / target - 1.0) <= rel_tol:
            return r_min, float(mid)
        if occ < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12 * max(1.0, span):
            break
    raise CalibrationError(
        "bisection could not meet the occupancy tolerance; "
        "the occupancy curve is too discrete at this target"
    )


def build_cover(dataset: TrajectoryDataset, radii, horizon: int) -> NeighborCover:
    """Annulus membership lists restricted to horizon-compatible indices.

    A grid index (i, j) is eligible (as center or neighbor) iff
    j <= n_time - 1 - horizon, so every stored point can be advanced
    s = 1..horizon steps within the data.
    """
    r_min, r_max = float(radii[0]), float(radii[1])
    if not (horizon >= 1 and r_max > r_min >= 0):
        raise ValueError("need horizon >= 1 and r_max > r_min >= 0")
    n, m, d = dataset.states.shape
    j_max = m - 1 - horizon
    if j_max < 0:
        raise ValueError("horizon exceeds trajectory length")
    flat = dataset.states.reshape(-1, d)
    grid_j = np.tile(np.arange(m), n)
    eligible = np.flatnonzero(grid_j <= j_max)
    pts = flat[eligible]

    tree = build_kdtree(pts)
    # query a hair beyond r_max, then decide membership with explicit
    # distances so results match a brute-force scan bit for bit
    raw = tree.query_ball_point(pts, r_max * (1.0 + 1e-12), workers=1)
    members = []
    any_member = False
    for row, idxs in enumerate(raw):
        idxs = np.asarray(idxs, dtype=np.int64)
        dist = np.linalg.norm(pts[idxs] - pts[row], axis=1)
        keep = idxs[(dist >= r_min) & (dist <= r_max) & (idxs != row)]
        keep.sort()
        members.append(eligible[keep])
        any_member = any_member or keep.size > 0
    if not any_member:
        raise CoverError(
            "empty cover: no center has any neighbor; recalibrate the radii"
        )
    return NeighborCover(
        r_min=r_min, r_max=r_max, horizon=int(horizon),
        n_traj=n, n_time=m, centers=eligible.astype(np.int64), members=members,
    )


def _write_varint(buf: bytearray, value: int) -> None:
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            buf.append(byte | 0x80)
        else:
            buf.append(byte)
            return


def _read_varint(data: bytes, pos: int):
    shift = 0
    out = 0
    while True:
        byte = data[pos]
        pos += 1
        out |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return out, pos
        shift += 7


def save_cover(cover: NeighborCover, directory) -> None:
    """Write cover.bin (header + varint-prefixed index lists) and cover.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    buf = bytearray()
    buf += COVER_MAGIC
    buf += np.array([COVER_VERSION], dtype="<u4").tobytes()
    buf += np.array([cover.r_min, cover.r_max], dtype="<f8").tobytes()
    buf += np.array([cover.horizon, cover.n_traj, cover.n_time,
                     cover.centers.size], dtype="<u4").tobytes()
    for mem in cover.members:
        _write_varint(buf, len(mem))
        for idx in mem:
            _write_varint(buf, int(idx))
    (directory / "cover.bin").write_bytes(bytes(buf))
    summary = {"r_min": cover.r_min, "r_max": cover.r_max,
               "horizon": cover.horizon, **cover.stats()}
    with open(directory / "cover.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_cover(directory) -> NeighborCover:
    data = (Path(directory) / "cover.bin").read_bytes()
    if data[:4] != COVER_MAGIC:
        raise ValueError("not a cover cache file")
    version = int(np.frombuffer(data, dtype="<u4", count=1, offset=4)[0])
    if version != COVER_VERSION:
        raise ValueError(f"unsupported cover format: {version}")
    r_min, r_max = np.frombuffer(data, dtype="<f8", count=2, offset=8)
    horizon, n_traj, n_time, n_centers = np.frombuffer(
        data, dtype="<u4", count=4, offset=24)
    pos = 40
    members = []
    for _ in range(n_centers):
        count, pos = _read_varint(data, pos)
        mem = np.empty(count, dtype=np.int64)
        for k in range(count):
            mem[k], pos = _read_varint(data, pos)
        members.append(mem)
    j_max = n_time - 1 - horizon
    grid_j = np.tile(np.arange(n_time), n_traj)
    centers = np.flatnonzero(grid_j <= j_max).astype(np.int64)
    if centers.size != n_centers:
        raise ValueError("cover header inconsistent with grid shape")
    return NeighborCover(
        r_min=float(r_min), r_max=float(r_max), horizon=int(horizon),
        n_traj=int(n_traj), n_time=int(n_time), centers=centers, members=members,
    )
