import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import distance, normalize

from trinoloc.descriptor import LocalFeatureMap
from trinoloc.errors import (
    BadMagicError,
    CorruptFileError,
    DegenerateVectorError,
    TrainingDivergedError,
    ValidationError,
    VersionMismatchError,
)
from trinoloc.training import (
    Correspondence,
    DescriptorModel,
    TrainConfig,
    TrainingPair,
    default_negatives,
    gradient_check,
    grid_correspondences,
    is_smooth,
    load_model,
    negative_distance,
    pair_loss,
    pair_loss_and_grad,
    pairs_from_records,
    positive_distance,
    save_model,
    train,
    triplet_margin,
    write_loss_csv,
)


def fm(points):
    return LocalFeatureMap.from_points(np.asarray(points, dtype=float))


def random_pair(rng, c=16, d=10, extra=8, jitter=0.5):
    a = rng.standard_normal((c, d))
    b = a + jitter * rng.standard_normal((c, d))
    return TrainingPair(fm(a), fm(b), grid_correspondences(c), extra_negatives=rng.standard_normal((extra, d)))


def separable_pairs(count=3, d=16, c=4):
    """Positives coincide and every other point is an orthogonal unit vector."""
    pairs = []
    eye = np.eye(d)
    for k in range(count):
        pts = eye[k * c : (k + 1) * c]
        pairs.append(TrainingPair(fm(pts), fm(pts.copy()), grid_correspondences(c)))
    return pairs


IDENTITY = DescriptorModel(np.eye(2))


# --- distances -----------------------------------------------------------------


def test_positive_distance_identical_is_zero():
    pair = TrainingPair(fm([[1.0, 2.0]]), fm([[1.0, 2.0]]), [Correspondence(0, 0)], extra_negatives=[[0.0, 1.0]])
    assert positive_distance(IDENTITY, pair, pair.correspondences[0]) == 0.0


def test_positive_distance_orthonormal_is_sqrt2():
    pair = TrainingPair(fm([[1.0, 0.0]]), fm([[0.0, 1.0]]), [Correspondence(0, 0)])
    assert positive_distance(IDENTITY, pair, pair.correspondences[0]) == pytest.approx(math.sqrt(2), abs=1e-15)


def test_positive_distance_matches_oracle(rng):
    for _ in range(20):
        w = rng.standard_normal((6, 6))
        a, b = rng.standard_normal((2, 6))
        pair = TrainingPair(fm([a]), fm([b]), [Correspondence(0, 0)])
        expect = distance(normalize(w @ a), normalize(w @ b))
        assert positive_distance(DescriptorModel(w), pair, pair.correspondences[0]) == pytest.approx(expect, abs=1e-9)


def test_degenerate_projection():
    pair = TrainingPair(fm([[0.0, 0.0]]), fm([[1.0, 0.0]]), [Correspondence(0, 0)])
    with pytest.raises(DegenerateVectorError):
        positive_distance(IDENTITY, pair, pair.correspondences[0])


def test_pool_equal_to_anchor_gives_zero_via_second_term():
    # P = e1, P' = e2; the single negative equals P' so |d_N - d_P'| = 0
    pair = TrainingPair(fm([[1.0, 0.0]]), fm([[0.0, 1.0]]), [Correspondence(0, 0)])
    assert negative_distance(IDENTITY, pair, pair.correspondences[0], negatives=[[0.0, 1.0]]) == 0.0


def test_orthogonal_negatives_give_sqrt2():
    d = 5
    eye = np.eye(d)
    pair = TrainingPair(fm([eye[0]]), fm([eye[0]]), [Correspondence(0, 0)])
    model = DescriptorModel(np.eye(d))
    assert negative_distance(model, pair, pair.correspondences[0], negatives=eye[1:]) == pytest.approx(math.sqrt(2))


def test_negative_distance_brute_force(rng):
    for _ in range(20):
        w = rng.standard_normal((6, 6))
        a, b = rng.standard_normal((2, 6))
        pool = rng.standard_normal((16, 6))
        pair = TrainingPair(fm([a]), fm([b]), [Correspondence(0, 0)])
        pa, pb = normalize(w @ a), normalize(w @ b)
        expect = min(min(distance(pa, normalize(w @ x)), distance(normalize(w @ x), pb)) for x in pool)
        got = negative_distance(DescriptorModel(w), pair, pair.correspondences[0], negatives=pool)
        assert got == pytest.approx(expect, abs=1e-9)


def test_default_pool_excludes_the_correspondence(rng):
    pair = random_pair(rng, c=4, d=3, extra=2)
    c = Correspondence(1, 2)
    pool = default_negatives(pair, c)
    assert pool.shape == (3 + 3 + 2, 3)
    assert not any(np.array_equal(row, pair.map_a.points[1]) for row in pool)
    assert not any(np.array_equal(row, pair.map_b.points[2]) for row in pool)


def test_empty_pool_rejected():
    pair = TrainingPair(fm([[1.0, 0.0]]), fm([[0.0, 1.0]]), [Correspondence(0, 0)])
    with pytest.raises(ValidationError):
        negative_distance(IDENTITY, pair, pair.correspondences[0])
    with pytest.raises(ValidationError):
        pair_loss(IDENTITY, pair)


# --- hinge --------------------------------------------------------------------


@pytest.mark.parametrize("p, n, expected", [(0.5, 1.2, 0.0), (1.0, 0.5, 1.75)])
def test_triplet_margin_examples(p, n, expected):
    assert triplet_margin(p, n, 1.0) == pytest.approx(expected, abs=1e-15)


@given(st.floats(0, 2), st.floats(0.1, 5))
def test_triplet_margin_equal_distances_give_margin(p, m):
    assert triplet_margin(p, p, m) == pytest.approx(m)


@given(st.floats(0, 2), st.floats(0, 2), st.floats(0.1, 5))
def test_triplet_margin_nonnegative(p, n, m):
    assert triplet_margin(p, n, m) >= 0.0


def test_inactive_pair_loss_zero():
    pair = separable_pairs(1)[0]
    assert pair_loss(DescriptorModel(np.eye(16)), pair) == 0.0


def test_single_correspondence_equals_margin(rng):
    a, b = rng.standard_normal((2, 4, 5))
    pair = TrainingPair(fm(a), fm(b), [Correspondence(2, 1)])
    model = DescriptorModel(rng.standard_normal((5, 5)))
    c = pair.correspondences[0]
    expect = triplet_margin(positive_distance(model, pair, c), negative_distance(model, pair, c))
    assert pair_loss(model, pair) == pytest.approx(expect, abs=1e-12)


def test_pair_loss_summation_oracle(rng):
    for _ in range(10):
        pair = random_pair(rng, c=8, d=6, extra=4, jitter=1.0)
        model = DescriptorModel(rng.standard_normal((6, 6)))
        expect = 0.0
        for c in pair.correspondences:
            w = model.projection
            pa = normalize(w @ pair.map_a.points[c.p_index])
            pb = normalize(w @ pair.map_b.points[c.p_prime_index])
            pool = [normalize(w @ x) for x in default_negatives(pair, c)]
            p = distance(pa, pb)
            n = min(min(distance(pa, x), distance(x, pb)) for x in pool)
            expect += max(1.0 + p * p - n * n, 0.0)
        assert pair_loss(model, pair) == pytest.approx(expect, abs=1e-9)


# --- gradients ------------------------------------------------------------------


def test_gradient_check_twenty_smooth_pairs():
    rng = np.random.default_rng(0)
    errors = []
    while len(errors) < 20:
        pair = random_pair(rng)
        model = DescriptorModel.initial(10, seed=len(errors), scale=0.1)
        if not is_smooth(model, pair):
            continue
        errors.append(gradient_check(model, pair))
    assert max(errors) < 1e-4


def test_inactive_gradient_exactly_zero():
    pair = separable_pairs(1)[0]
    model = DescriptorModel(np.eye(16))
    loss, grad = pair_loss_and_grad(model, pair)
    assert loss == 0.0
    assert np.all(grad == 0.0)
    assert gradient_check(model, pair) < 1e-6


# --- optimizer ------------------------------------------------------------------


def offset_pairs(count=3, d=16, c=4, offset=0.5):
    """Separable, but the shared offset keeps the starting loss positive."""
    base = np.eye(d) + offset
    return [
        TrainingPair(fm(base[k * c : (k + 1) * c]), fm(base[k * c : (k + 1) * c]), grid_correspondences(c))
        for k in range(count)
    ]


def test_already_separated_task_stays_at_zero():
    losses = train(separable_pairs(), TrainConfig(iterations=10)).losses
    assert losses == [0.0] * 10


def test_separable_task_reaches_zero():
    result = train(offset_pairs(), TrainConfig(iterations=50))
    losses = result.losses
    assert len(losses) == 50
    assert losses[0] > 1.0
    assert losses[-1] == 0.0
    assert all(b <= a + 1e-6 for a, b in zip(losses, losses[1:]))


def test_loss_decreases_on_hard_task():
    rng = np.random.default_rng(3)
    pairs = [random_pair(rng, c=8, d=6, extra=4, jitter=0.8) for _ in range(4)]
    result = train(pairs, TrainConfig(iterations=40, lr=1e-2))
    assert result.losses[-1] < result.losses[0]


def test_fixed_seed_identical_histories(rng):
    pairs = [random_pair(rng, c=8, d=6, extra=4) for _ in range(3)]
    a = train(pairs, TrainConfig(iterations=10, seed=4))
    b = train(pairs, TrainConfig(iterations=10, seed=4))
    assert a.losses == b.losses
    assert np.array_equal(a.model.projection, b.model.projection)


def test_learning_rate_decay_schedule():
    result = train(separable_pairs(1), TrainConfig(iterations=12, lr=1e-3, decay=0.5, decay_every=5))
    lrs = [s.lr for s in result.history]
    assert lrs[:5] == [1e-3] * 5
    assert lrs[5:10] == [5e-4] * 5
    assert lrs[10:] == [2.5e-4] * 2


def test_weight_decay_mode_shrinks_projection():
    init = DescriptorModel(np.eye(16))
    result = train(separable_pairs(1), TrainConfig(iterations=5, decay=0.1, decay_mode="weight"), model=init)
    # gradients are zero, so only the decay moves the weights
    np.testing.assert_allclose(result.model.projection, 0.9 * np.eye(16))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_aborts_with_diagnostics(rng):
    pairs = [random_pair(rng, c=4, d=3, extra=2) for _ in range(2)]
    pairs[1].map_b.points[0, 0] = np.inf
    with pytest.raises(TrainingDivergedError) as exc:
        train(pairs, TrainConfig(iterations=3))
    assert exc.value.iteration == 1
    assert exc.value.pair_index == 1


def test_train_needs_a_positive_pair(rng):
    pair = random_pair(rng, c=4, d=3)
    pair.is_positive = False
    with pytest.raises(ValidationError):
        train([pair])


@pytest.mark.parametrize(
    "kwargs", [dict(iterations=0), dict(lr=0.0), dict(decay=1.0), dict(decay_every=0), dict(decay_mode="x")]
)
def test_config_validation(kwargs):
    with pytest.raises(ValidationError):
        TrainConfig(**kwargs)


# --- data and files ----------------------------------------------------------------


def test_pairs_from_records(small_world):
    pairs = pairs_from_records(small_world.records[:5], seed=0, extra=8)
    assert len(pairs) == 15
    assert all(p.extra_negatives.shape == (8, 10) for p in pairs)
    again = pairs_from_records(small_world.records[:5], seed=0, extra=8)
    assert all(np.array_equal(a.extra_negatives, b.extra_negatives) for a, b in zip(pairs, again))


def test_model_round_trip(tmp_path, rng):
    model = DescriptorModel(rng.standard_normal((7, 7)), margin=0.75)
    path = tmp_path / "m.tmod"
    save_model(path, model)
    back = load_model(path)
    assert np.array_equal(back.projection, model.projection)
    assert back.margin == 0.75
    assert len(path.read_bytes()) == 10 + 8 * 49 + 8


def test_model_file_errors(tmp_path, rng):
    path = tmp_path / "m.tmod"
    save_model(path, DescriptorModel(np.eye(3)))
    data = path.read_bytes()
    path.write_bytes(data[:-1])
    with pytest.raises(CorruptFileError):
        load_model(path)
    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(BadMagicError):
        load_model(path)
    path.write_bytes(data[:4] + (2).to_bytes(2, "little") + data[6:])
    with pytest.raises(VersionMismatchError):
        load_model(path)


def test_loss_csv(tmp_path):
    result = train(separable_pairs(1), TrainConfig(iterations=3))
    write_loss_csv(tmp_path / "loss.csv", result.history)
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "iteration,loss,lr"
    assert len(lines) == 4
