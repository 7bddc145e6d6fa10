from types import SimpleNamespace

import numpy as np
import pytest
from oracles import brute_force_argmin

from trinoloc.descriptor import VIEWS, LocalFeatureMap, View
from trinoloc.errors import FrameError, NoReferenceError, ValidationError
from trinoloc.geo import GeoTag, within_threshold
from trinoloc.library import build_library
from trinoloc.retrieval import QueryFrame, localize_frame, localize_sequence, score_candidates, shortlist
from trinoloc.synth import SynthWorldConfig, generate_world
from trinoloc.voting import fuse


def stored_frame(lib, k, noise=0.0, rng=None):
    pts = [lib.features[v][k].astype(np.float64) for v in VIEWS]
    if noise:
        pts = [p + noise * rng.standard_normal(p.shape) for p in pts]
    return QueryFrame.from_points(*pts, grid_shape=lib.metadata.grid_shape)


def as_oracle_input(frame, lib):
    query = {v.value: frame.views[v].points for v in VIEWS}
    refs = {v.value: lib.features[v] for v in VIEWS}
    return query, refs


@pytest.fixture(scope="module")
def noisy_world():
    return generate_world(SynthWorldConfig(num_locations=150, noise_sigma=1.5, seed=11))


@pytest.fixture(scope="module")
def noisy_library(noisy_world):
    return build_library(noisy_world.records)[0]


def test_exact_match_identity(small_library):
    for k in (0, 7, len(small_library) - 1):
        res = localize_frame(stored_frame(small_library, k), small_library)
        assert res.reference_id == k
        assert res.total_cost == 0.0
        assert res.predicted == small_library.geotags[k]


@pytest.mark.parametrize("alpha", [0.0, 0.4, 1.0, 0.73])
def test_exhaustive_equals_brute_force(noisy_world, noisy_library, alpha):
    n = len(noisy_library)
    for q in noisy_world.queries[::5]:
        res = localize_frame(q, noisy_library, alpha, shortlist_n=n)
        assert res.shortlist_size == n
        assert res.reference_id == brute_force_argmin(*as_oracle_input(q, noisy_library), alpha)


def test_aliased_pair():
    rng = np.random.default_rng(5)
    front = rng.standard_normal((16, 10))
    # entries 0 and 1 share a front view; their sides differ
    recs = []
    for i in range(4):
        views = {
            View.FRONT: front if i < 2 else rng.standard_normal((16, 10)),
            View.LEFT: rng.standard_normal((16, 10)),
            View.RIGHT: rng.standard_normal((16, 10)),
        }
        recs.append(
            SimpleNamespace(
                location_id=str(i),
                geotag=GeoTag(41.0 + 1e-3 * i, -87.0),
                views={v: LocalFeatureMap.from_points(p, v) for v, p in views.items()},
            )
        )
    lib, _ = build_library(recs)
    # query: exact front of the pair, sides close to entry 1
    q = QueryFrame.from_points(
        front, lib.features[View.LEFT][1] + 0.05, lib.features[View.RIGHT][1] - 0.05, grid_shape=(4, 4)
    )
    query, refs = as_oracle_input(q, lib)
    front_only = localize_frame(q, lib, 1.0, shortlist_n=4)
    assert front_only.reference_id == brute_force_argmin(query, refs, 1.0) == 0  # tie resolved to the smaller id
    assert front_only.candidates[0].total_cost == front_only.candidates[1].total_cost
    three_view = localize_frame(q, lib, 0.4, shortlist_n=4)
    assert three_view.reference_id == brute_force_argmin(query, refs, 0.4) == 1


def test_total_cost_is_fused_per_view(noisy_world, noisy_library):
    for a in (0.0, 0.4, 1.0):
        res = localize_frame(noisy_world.queries[3], noisy_library, a)
        for c in res.candidates:
            assert c.total_cost == pytest.approx(fuse(*c.per_view_costs, a), abs=1e-12)
        totals = [c.total_cost for c in res.candidates]
        assert totals == sorted(totals)
        assert res.total_cost == totals[0]


def test_shortlist_is_union_of_view_lists(noisy_world, noisy_library):
    ids = shortlist(noisy_world.queries[0], noisy_library, 5)
    assert 5 <= len(ids) <= 15
    assert list(ids) == sorted(set(ids.tolist()))


def test_shortlist_saturates(noisy_world, noisy_library):
    ids = shortlist(noisy_world.queries[0], noisy_library, 10_000)
    assert ids.tolist() == list(range(len(noisy_library)))


def test_wider_exact_shortlist_never_costs_more(noisy_world, noisy_library):
    # exact per-view lists nest as n grows, so the best fused cost can only fall
    for q in noisy_world.queries[:20]:
        costs = [localize_frame(q, noisy_library, 0.4, n, None).total_cost for n in (1, 5, 20, 150)]
        assert all(a >= b for a, b in zip(costs, costs[1:]))


def test_score_candidates_matches_localize(noisy_world, noisy_library):
    q = noisy_world.queries[9]
    cand, costs = score_candidates(q, noisy_library, 20)
    res = localize_frame(q, noisy_library, 0.4, 20)
    assert costs.shape == (3, len(cand))
    assert sorted(res.ranked_ids()) == cand.tolist()


def test_empty_library():
    empty = type("EmptyLibrary", (), {"__len__": lambda self: 0})()
    with pytest.raises(NoReferenceError):
        score_candidates(None, empty)


def test_dimension_mismatch(small_library):
    q = QueryFrame.from_points(*(np.zeros((16, 7)) for _ in range(3)))
    with pytest.raises(ValidationError):
        localize_frame(q, small_library)


def test_bad_shortlist_size(small_world, small_library):
    with pytest.raises(ValidationError):
        localize_frame(small_world.queries[0], small_library, shortlist_n=0)


def test_query_missing_view():
    with pytest.raises(ValidationError):
        QueryFrame({View.FRONT: np.zeros((4, 4))})


# --- sequences ---------------------------------------------------------------------


def test_empty_sequence(small_library):
    run = localize_sequence([], small_library)
    assert len(run) == 0


def test_identical_frames_identical_predictions(noisy_world, noisy_library):
    q = noisy_world.queries[4]
    frames = [QueryFrame(q.views, timestamp=float(t)) for t in range(5)]
    run = localize_sequence(frames, noisy_library)
    assert len({(r.reference_id, r.total_cost) for r in run}) == 1


def test_zero_noise_drive_is_perfect():
    ds = generate_world(SynthWorldConfig(num_locations=100, noise_sigma=0.0, seed=21))
    lib, _ = build_library(ds.records)
    run = localize_sequence(ds.queries, lib)
    assert len(run) == 100
    hits = [within_threshold(r.predicted, gt, 10.0) for r, gt in zip(run, ds.ground_truth)]
    assert sum(hits) == 100
    assert all(r.total_cost == 0.0 for r in run)


def test_parallel_matches_serial(noisy_world, noisy_library):
    frames = noisy_world.queries[:30]
    a = localize_sequence(frames, noisy_library, workers=1)
    b = localize_sequence(frames, noisy_library, workers=4)
    assert [r.reference_id for r in a] == [r.reference_id for r in b]


def test_decreasing_timestamps_rejected(noisy_world, noisy_library):
    frames = [QueryFrame(noisy_world.queries[0].views, 2.0), QueryFrame(noisy_world.queries[1].views, 1.0)]
    with pytest.raises(ValidationError):
        localize_sequence(frames, noisy_library)


def test_frame_error_carries_index(small_world, small_library):
    bad = QueryFrame.from_points(*(np.zeros((16, 7)) for _ in range(3)), timestamp=100.0)
    frames = list(small_world.queries[:3]) + [bad]
    with pytest.raises(FrameError) as exc:
        localize_sequence(frames, small_library)
    assert exc.value.index == 3
    assert isinstance(exc.value.cause, ValidationError)
