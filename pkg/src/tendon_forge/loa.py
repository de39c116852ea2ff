"""Muscle line-of-action extraction: slice centroids filtered into a tendon path."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import BoneIndex, TriMesh, centroid_with_area, normalize, slice_mesh


class LoaError(ValueError):
    pass


@dataclass(frozen=True)
class LoaConfig:
    """Site-selection thresholds.

    ``max_dist`` is the uniform-sampling spacing (typically 0.05-0.15 m,
    lower for long multi-joint muscles); ``min_dist_new_bone`` is the
    minimum spacing for a site added because the closest bone changed.
    """

    max_dist: float = 0.1
    min_dist_new_bone: float = 0.05
    n_slices_per_meter: float = 100.0

    def __post_init__(self):
        if self.max_dist < 0 or self.min_dist_new_bone < 0:
            raise LoaError("thresholds must be non-negative")
        if self.min_dist_new_bone > self.max_dist and self.max_dist > 0:
            raise LoaError("min_dist_new_bone must not exceed max_dist")
        if self.n_slices_per_meter <= 0:
            raise LoaError("n_slices_per_meter must be positive")


@dataclass(frozen=True)
class Site:
    position: tuple
    bone: str
    kind: str  # origin | waypoint | insertion


@dataclass(frozen=True)
class TendonPath:
    muscle_name: str
    sites: tuple
    config: LoaConfig = field(default_factory=LoaConfig)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.sites) < 2:
            raise LoaError("a tendon path needs at least 2 sites")
        if self.sites[0].kind != "origin" or self.sites[-1].kind != "insertion":
            raise LoaError("path must start at an origin and end at an insertion")

    @property
    def positions(self) -> np.ndarray:
        return np.array([s.position for s in self.sites], dtype=float)

    def to_dict(self) -> dict:
        return {
            "muscle": self.muscle_name,
            "sites": [{"pos": list(s.position), "bone": s.bone, "kind": s.kind} for s in self.sites],
            "config": asdict(self.config),
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "TendonPath":
        sites = tuple(Site(tuple(float(x) for x in s["pos"]), s["bone"], s["kind"]) for s in doc["sites"])
        return cls(doc["muscle"], sites, LoaConfig(**doc.get("config", {})), doc.get("metadata", {}))


def select_sites(centroids, bones, max_dist: float, min_dist_new_bone: float) -> list[int]:
    """Indices of the centroids kept as tendon sites.

    Conditions are tested in order and the first that holds keeps the
    centroid: nothing kept yet; last centroid; distance to the last kept site
    at least ``max_dist``; closest bone differs from the last kept site's bone
    and distance at least ``min_dist_new_bone``.
    """
    pts = np.asarray(centroids, dtype=float)
    n = len(pts)
    kept: list[int] = []
    for i in range(n):
        if not kept:
            keep = True
        elif i == n - 1:
            keep = True
        else:
            prev = kept[-1]
            d = float(np.linalg.norm(pts[i] - pts[prev]))
            keep = d >= max_dist or (bones[i] != bones[prev] and d >= min_dist_new_bone)
        if keep:
            kept.append(i)
    return kept


def path_from_centroids(muscle_name, centroids, bones, config: LoaConfig, metadata=None) -> TendonPath:
    if len(centroids) < 2:
        raise LoaError("muscle too short")
    kept = select_sites(centroids, bones, config.max_dist, config.min_dist_new_bone)
    sites = []
    for j, i in enumerate(kept):
        kind = "origin" if j == 0 else "insertion" if j == len(kept) - 1 else "waypoint"
        sites.append(Site(tuple(float(x) for x in centroids[i]), bones[i], kind))
    meta = dict(metadata or {})
    meta["n_centroids"] = len(centroids)
    meta["kept_indices"] = kept
    # wrapping geometry is not synthesised; bone transitions are only recorded
    meta["wrapping_candidates"] = [
        j for j in range(1, len(kept)) if bones[kept[j]] != bones[kept[j - 1]]
    ]
    return TendonPath(muscle_name, tuple(sites), config, meta)


def extract_loa(skeleton: BoneIndex, muscle: TriMesh, axis, config: LoaConfig | None = None) -> TendonPath:
    """Slice ``muscle`` along ``axis`` and reduce the slice centroids to a tendon path."""
    config = config or LoaConfig()
    ax = normalize(axis)
    lo, hi = muscle.extent(ax)
    n_slices = max(2, math.ceil((hi - lo) * config.n_slices_per_meter))
    contours = slice_mesh(muscle, ax, n_slices)
    centroids, bones, degenerate = [], [], 0
    for c in contours:
        p, _, bad = centroid_with_area(c)
        degenerate += bad
        centroids.append(p)
        bones.append(skeleton.closest(p)[0])
    meta = {"axis": [float(x) for x in ax], "n_slices": n_slices}
    if degenerate:
        meta["degenerate_contours"] = degenerate
    return path_from_centroids(muscle.name, centroids, bones, config, meta)


def path_length(path: TendonPath) -> float:
    p = path.positions
    return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum())


def save_tendon(path: TendonPath, filename) -> None:
    Path(filename).write_text(path.to_json())


def load_tendon(filename) -> TendonPath:
    return TendonPath.from_dict(json.loads(Path(filename).read_text()))
