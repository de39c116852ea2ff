import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tendon_forge.fixtures import cylinder_fixture
from tendon_forge.geometry import build_bone_index, make_box, make_cylinder
from tendon_forge.loa import (
    LoaConfig, LoaError, Site, TendonPath, extract_loa, load_tendon, path_from_centroids, path_length,
    save_tendon, select_sites,
)

Z = np.array([0.0, 0.0, 1.0])
TRACE = [0.0, 0.02, 0.06, 0.11, 0.20]


def on_axis(offsets):
    return np.column_stack([np.zeros(len(offsets)), np.zeros(len(offsets)), offsets])


def straight_cylinder_path(max_dist=0.1):
    bone = make_box((0.05, -0.01, -0.01), (0.07, 0.01, 0.31), name="femur")
    return extract_loa(build_bone_index([bone]), make_cylinder(length=0.3), Z, LoaConfig(max_dist=max_dist))


def test_straight_cylinder_four_collinear_sites():
    path = straight_cylinder_path()
    p = path.positions
    assert len(path.sites) == 4
    spacing = 0.3 / (path.metadata["n_slices"] - 1)
    for got, want in zip(p[:, 2], [0.0, 0.1, 0.2, 0.3]):
        assert abs(got - want) <= spacing
    assert np.all(np.linalg.norm(p[:, :2], axis=1) < 1e-6)
    assert [s.kind for s in path.sites] == ["origin", "waypoint", "waypoint", "insertion"]
    assert {s.bone for s in path.sites} == {"femur"}


def test_manual_trace_single_bone():
    kept = select_sites(on_axis(TRACE), ["a"] * 5, max_dist=0.1, min_dist_new_bone=0.05)
    assert [TRACE[i] for i in kept] == [0.0, 0.11, 0.20]


def test_manual_trace_new_bone_branch():
    bones = ["a", "a", "b", "b", "b"]
    kept = select_sites(on_axis(TRACE), bones, max_dist=0.1, min_dist_new_bone=0.05)
    assert [TRACE[i] for i in kept] == [0.0, 0.06, 0.20]


def test_new_bone_is_relative_to_last_kept_site():
    # bone flips a -> b -> a between kept sites: c is compared to the kept "a"
    offs = [0.0, 0.03, 0.06, 0.2]
    kept = select_sites(on_axis(offs), ["a", "b", "a", "a"], 0.1, 0.05)
    assert kept == [0, 3]


def test_new_bone_below_min_distance_is_skipped():
    kept = select_sites(on_axis([0.0, 0.04, 0.2]), ["a", "b", "b"], 0.1, 0.05)
    assert kept == [0, 2]


def test_zero_threshold_keeps_everything():
    pts = on_axis(np.linspace(0, 0.3, 17))
    assert select_sites(pts, ["x"] * 17, 0.0, 0.0) == list(range(17))


@settings(max_examples=100, deadline=None)
@given(
    steps=st.lists(st.floats(1e-4, 0.05), min_size=1, max_size=40),
    t1=st.floats(0.0, 0.3), t2=st.floats(0.0, 0.3),
)
def test_kept_count_monotone_in_max_dist(steps, t1, t2):
    pts = on_axis(np.concatenate([[0.0], np.cumsum(steps)]))
    bones = ["b"] * len(pts)
    lo, hi = sorted((t1, t2))
    k_lo = select_sites(pts, bones, lo, 0.0)
    k_hi = select_sites(pts, bones, hi, 0.0)
    assert len(k_hi) <= len(k_lo)
    assert k_hi[0] == 0 and k_hi[-1] == len(pts) - 1


@settings(max_examples=100, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1), n=st.integers(2, 30),
    max_dist=st.floats(0.0, 0.5), frac=st.floats(0.0, 1.0),
)
def test_path_properties(seed, n, max_dist, frac):
    rng = np.random.default_rng(seed)
    cents = np.cumsum(rng.uniform(0, 0.1, size=(n, 3)), axis=0)
    bones = list(rng.choice(["a", "b", "c"], size=n))
    cfg = LoaConfig(max_dist=max_dist, min_dist_new_bone=frac * max_dist)
    path = path_from_centroids("m", cents, bones, cfg)
    kept = path.metadata["kept_indices"]
    assert kept[0] == 0 and kept[-1] == n - 1
    # no interpolation: every site is an input centroid with its bone
    for s, i in zip(path.sites, kept):
        assert np.array_equal(s.position, cents[i]) and s.bone == bones[i]
    assert path_length(path) >= np.linalg.norm(cents[-1] - cents[0]) - 1e-12


def test_too_short_and_config_validation():
    with pytest.raises(LoaError, match="muscle too short"):
        path_from_centroids("m", on_axis([0.0]), ["a"], LoaConfig())
    with pytest.raises(LoaError):
        LoaConfig(max_dist=0.05, min_dist_new_bone=0.1)
    with pytest.raises(LoaError):
        LoaConfig(max_dist=-1)
    with pytest.raises(LoaError):
        TendonPath("m", (Site((0, 0, 0), "a", "waypoint"), Site((1, 0, 0), "a", "insertion")))


def test_path_length_examples():
    def mk(*pts):
        sites = [Site(p, "b", "waypoint") for p in pts]
        sites[0] = Site(pts[0], "b", "origin")
        sites[-1] = Site(pts[-1], "b", "insertion")
        return TendonPath("m", tuple(sites))

    assert path_length(mk((0, 0, 0), (1, 0, 0))) == 1.0
    assert path_length(mk((0, 0, 0), (0.5, 0, 0), (1, 0, 0))) == 1.0
    assert path_length(mk((0, 0, 0), (1, 1, 0), (1, 1, 1))) == pytest.approx(math.sqrt(2) + 1, abs=1e-12)


def test_wrapping_candidates_recorded():
    muscle, bones = cylinder_fixture()
    path = extract_loa(build_bone_index(bones), muscle, Z)
    assert [s.bone for s in path.sites] == ["femur", "femur", "tibia", "tibia", "tibia"]
    assert path.metadata["wrapping_candidates"] == [2]


def test_sites_monotone_along_axis():
    muscle, bones = cylinder_fixture()
    path = extract_loa(build_bone_index(bones), muscle, Z, LoaConfig(max_dist=0.03, min_dist_new_bone=0.01))
    assert np.all(np.diff(path.positions @ Z) > 0)


def test_tendon_json_roundtrip(tmp_path):
    path = straight_cylinder_path()
    save_tendon(path, tmp_path / "t.json")
    back = load_tendon(tmp_path / "t.json")
    assert back.to_json() == path.to_json()
    assert list(path.to_dict()) == ["muscle", "sites", "config", "metadata"]
