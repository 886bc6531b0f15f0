import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matnet import atsp
from matnet.autodiff import Tensor
from matnet.lp import parse_lp


# ------------------------------------------------------------------ generation

def test_closure_three_city_example():
    d = np.array([[[0, 2, 9], [4, 0, 3], [1, 7, 0]]])
    want = np.array([[0, 2, 5], [4, 0, 3], [1, 3, 0]])
    assert np.array_equal(atsp.minplus_closure(d)[0], want)


@pytest.mark.parametrize("n", [2, 7, 20])
def test_compiled_closure_matches_minplus_fixpoint(n):
    rng = np.random.default_rng(n)
    raw = rng.integers(1, 10**6 + 1, size=(30, n, n))
    raw[:, np.arange(n), np.arange(n)] = 0
    want = atsp.minplus_closure_np(raw)
    assert np.array_equal(atsp.minplus_closure(raw), want)
    assert np.array_equal(atsp._floyd_py(raw), want)


def test_two_city_instance_is_raw_draw():
    rng = np.random.default_rng(0)
    inst = atsp.generate_tmat(2, rng)
    assert inst.dist[0, 0] == 0 and inst.dist[1, 1] == 0
    assert 1 <= inst.dist[0, 1] <= 10**6 and 1 <= inst.dist[1, 0] <= 10**6


def test_n_below_two_rejected():
    with pytest.raises(ValueError):
        atsp.generate_tmat(1, np.random.default_rng(0))


def test_triangle_inequality_and_fixpoint_small_batch():
    d = atsp.generate_tmat_batch(50, 12, np.random.default_rng(1))
    n = d.shape[1]
    bad = 0
    for i, j, k in itertools.product(range(n), repeat=3):
        bad += int((d[:, i, j] > d[:, i, k] + d[:, k, j]).sum())
    assert bad == 0
    assert np.array_equal(atsp.minplus_pass(d), d)
    assert np.all(d[:, np.arange(n), np.arange(n)] == 0)
    assert d.min() >= 0 and d.max() <= 10**6


def test_generation_is_deterministic_per_seed():
    a = atsp.generate_tmat_batch(5, 8, np.random.default_rng(42))
    b = atsp.generate_tmat_batch(5, 8, np.random.default_rng(42))
    c = atsp.generate_tmat_batch(5, 8, np.random.default_rng(43))
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_euclidean_exactly_symmetric_zero_diagonal():
    inst = atsp.generate_euclidean(30, np.random.default_rng(2))
    assert np.array_equal(inst.dist, inst.dist.T)
    assert np.all(np.diag(inst.dist) == 0)


def test_euclidean_collinear_points():
    d = atsp.euclidean_matrix(np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]))
    assert np.array_equal(d, [[0, 1, 2], [1, 0, 1], [2, 1, 0]])


# ----------------------------------------------------------------------- tours

def test_tour_length_small_example():
    inst = atsp.AtspInstance(np.array([[0, 1, 5], [7, 0, 2], [3, 8, 0]]))
    assert atsp.tour_length(inst, [0, 1, 2]) == 1 + 2 + 3
    assert atsp.tour_length(inst, [0, 2, 1]) == 5 + 8 + 7
    assert atsp.tour_length(inst, [1, 2, 0]) == atsp.tour_length(inst, [0, 1, 2])


def test_tour_length_rejects_non_permutation():
    inst = atsp.AtspInstance(np.zeros((3, 3)))
    with pytest.raises(ValueError, match="not a permutation"):
        atsp.tour_length(inst, [0, 1, 1])


def test_batched_lengths_match_scalar():
    d = atsp.generate_tmat_batch(4, 6, np.random.default_rng(3))
    tours = np.stack([[np.random.default_rng(s).permutation(6) for s in range(3)] for _ in range(4)])
    got = atsp.tour_lengths(d, tours)
    for b in range(4):
        for p in range(3):
            assert got[b, p] == atsp.tour_length(atsp.AtspInstance(d[b]), tours[b, p])


# ------------------------------------------------------------------ heuristics

NN_CASE = np.array([[0, 5, 1, 9], [7, 0, 2, 6], [3, 8, 0, 4], [2, 9, 3, 0]])


def test_nearest_neighbor_manual_trace():
    # 0 -> 2 (1), 2 -> 3 (4), 3 -> 1 (9), 1 -> 0 (7)
    tour = atsp.nearest_neighbor(atsp.AtspInstance(NN_CASE))
    assert tour.perm.tolist() == [0, 2, 3, 1] and tour.length == 21


def _ref_nn(d):
    n = len(d)
    tour, left = [0], set(range(1, n))
    while left:
        cur = tour[-1]
        nxt = min(left, key=lambda c: (d[cur][c], c))
        tour.append(nxt)
        left.remove(nxt)
    return tour


def _ref_insertion(d, farthest):
    """List-based insertion: cheapest edge per outside city (earliest position on ties),
    then the min (NI) or max (FI) increment city, lowest index on ties."""
    n = len(d)
    tour = [0]
    while len(tour) < n:
        best = {}
        for c in range(n):
            if c in tour:
                continue
            incs = [d[tour[i]][c] + d[c][tour[(i + 1) % len(tour)]] - d[tour[i]][tour[(i + 1) % len(tour)]]
                    for i in range(len(tour))]
            pos = int(np.argmin(incs))
            best[c] = (incs[pos], pos)
        if farthest:
            city = max(best, key=lambda c: (best[c][0], -c))
        else:
            city = min(best, key=lambda c: (best[c][0], c))
        tour.insert(best[city][1] + 1, city)
    return tour


@pytest.mark.parametrize("n", [3, 5, 9])
def test_heuristics_match_list_references(n):
    d = atsp.generate_tmat_batch(40, n, np.random.default_rng(n))
    nn = atsp.nearest_neighbor_batch(d)
    ni = atsp.nearest_insertion_batch(d)
    fi = atsp.furthest_insertion_batch(d)
    for b in range(len(d)):
        m = d[b].tolist()
        assert nn[b].tolist() == _ref_nn(m)
        assert ni[b].tolist() == _ref_insertion(m, False)
        assert fi[b].tolist() == _ref_insertion(m, True)


@pytest.mark.parametrize("n,hi", [(6, 3), (12, 10**6), (25, 50)])
def test_compiled_insertion_matches_vectorized(n, hi):
    # a small value range forces many ties
    rng = np.random.default_rng(n)
    d = rng.integers(1, hi + 1, size=(60, n, n))
    d[:, np.arange(n), np.arange(n)] = 0
    for far in (False, True):
        assert np.array_equal(atsp._insertion_batch(d, far), atsp._insertion_batch_np(d, far))
    e, _ = atsp.generate_euclidean_batch(20, n, rng)
    for far in (False, True):
        assert np.array_equal(atsp._insertion_batch(e, far), atsp._insertion_batch_np(e, far))


def test_insertion_ties_go_to_lowest_city_and_earliest_position():
    d = np.ones((1, 4, 4), dtype=np.int64)
    d[0, np.arange(4), np.arange(4)] = 0
    assert atsp.nearest_insertion_batch(d)[0].tolist() == [0, 3, 2, 1]
    assert atsp.furthest_insertion_batch(d)[0].tolist() == [0, 3, 2, 1]


# ------------------------------------------------------------------ exact oracle

def test_held_karp_three_cities():
    inst = atsp.AtspInstance(np.array([[0, 1, 5], [7, 0, 2], [3, 8, 0]]))
    assert atsp.held_karp(inst) == 6.0


@pytest.mark.parametrize("n", [2, 4, 6, 8])
def test_held_karp_matches_brute_force(n):
    rng = np.random.default_rng(100 + n)
    for _ in range(5):
        inst = atsp.AtspInstance(rng.integers(1, 100, size=(n, n)) * (1 - np.eye(n, dtype=np.int64)))
        assert atsp.held_karp(inst) == atsp.brute_force(inst)


def test_held_karp_capacity():
    with pytest.raises(atsp.CapacityError):
        atsp.held_karp_batch(np.zeros((1, 17, 17)))


@given(st.integers(3, 9), st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_exact_dominates_heuristics(n, seed):
    d = atsp.generate_tmat_batch(3, n, np.random.default_rng(seed))
    opt = atsp.held_karp_batch(d)
    for fn in atsp.HEURISTICS.values():
        assert np.all(opt <= atsp.tour_lengths(d, fn(d)))


# --------------------------------------------------------------------- rollout

def _uniform_step(first, current, mask):
    p = np.where(np.isinf(mask), 0.0, 1.0)
    return Tensor(p / p.sum(-1, keepdims=True))


def test_rollout_builds_permutations_from_each_start():
    d = atsp.generate_tmat_batch(3, 7, np.random.default_rng(5))
    starts = np.broadcast_to(np.arange(7), (3, 7)).copy()
    traj = atsp.rollout(d, _uniform_step, starts, "sample", np.random.default_rng(0))
    assert traj.tours.shape == (3, 7, 7)
    assert np.array_equal(traj.tours[:, :, 0], starts)
    assert np.all(np.sort(traj.tours, axis=-1) == np.arange(7))
    assert np.array_equal(traj.lengths, atsp.tour_lengths(d, traj.tours))
    assert np.allclose(traj.logp.data, -np.log(np.arange(1, 7)).sum())


def test_two_city_rollout_is_forced():
    d = atsp.generate_tmat_batch(1, 2, np.random.default_rng(6))
    traj = atsp.rollout(d, _uniform_step, np.array([[0, 1]]), "sample", np.random.default_rng(0))
    assert traj.tours[0].tolist() == [[0, 1], [1, 0]]
    assert np.all(traj.logp.data == 0.0)
    assert traj.lengths[0, 0] == traj.lengths[0, 1] == d[0, 0, 1] + d[0, 1, 0]


# ------------------------------------------------------------------ MIP export

def test_mtz_three_city_counts():
    model = atsp.mtz_model(atsp.AtspInstance(np.array([[0, 1, 5], [7, 0, 2], [3, 8, 0]])))
    assert len(model.binaries) == 6
    assert sorted(model.bounds) == ["u_2", "u_3"] and model.bounds["u_2"] == (1, 2)
    degree = [c for c in model.constraints if c.name.startswith(("in_", "out_"))]
    mtz = [c for c in model.constraints if c.name.startswith("mtz_")]
    assert len(degree) == 6 and len(mtz) == 2
    assert len(model.constraints) == 8


def test_mtz_lp_parses_back_to_same_model():
    inst = atsp.generate_tmat(6, np.random.default_rng(7))
    model = atsp.mtz_model(inst)
    back = parse_lp(model.to_lp())
    assert back.objective == model.objective
    assert [(c.name, c.coeffs, c.sense, c.rhs) for c in back.constraints] == \
        [(c.name, {k: float(v) for k, v in c.coeffs.items()}, c.sense, c.rhs) for c in model.constraints]
    assert back.bounds == model.bounds and back.binaries == model.binaries


@pytest.mark.parametrize("seed", range(5))
def test_heuristic_tour_is_mtz_feasible_with_matching_objective(seed):
    inst = atsp.generate_tmat(8, np.random.default_rng(seed))
    tour = atsp.nearest_insertion(inst)
    model = parse_lp(atsp.export_mtz_lp(inst))
    vals = atsp.tour_to_mip_values(tour.perm)
    assert model.evaluate(vals) == []
    assert model.objective_value(vals) == tour.length


def test_subtours_violate_mtz():
    inst = atsp.generate_tmat(4, np.random.default_rng(0))
    vals = {f"x_{i}_{j}": 0.0 for i in range(1, 5) for j in range(1, 5) if i != j}
    vals.update({"x_1_2": 1.0, "x_2_1": 1.0, "x_3_4": 1.0, "x_4_3": 1.0, "u_2": 1.0, "u_3": 2.0, "u_4": 3.0})
    bad = atsp.mtz_model(inst).evaluate(vals)
    assert any(b.startswith("mtz_") for b in bad)


# --------------------------------------------------------------------- file io

def test_instance_round_trip(tmp_path):
    inst = atsp.generate_tmat(5, np.random.default_rng(8))
    path = tmp_path / "a.atsp"
    atsp.save_instance(path, inst)
    back = atsp.load_instance(path)
    assert np.array_equal(back.dist, inst.dist)
    assert atsp.format_instance(back) == path.read_text()


def test_float_instance_round_trip():
    inst = atsp.generate_euclidean(4, np.random.default_rng(9))
    assert np.array_equal(atsp.parse_instance(atsp.format_instance(inst)).dist, inst.dist)


@pytest.mark.parametrize("text", ["TSP 2\n0 1\n1 0\n", "ATSP 3\n0 1 2\n1 0 2\n", "ATSP 2\n0 1\n1\n"])
def test_malformed_instance_rejected(text):
    with pytest.raises(ValueError):
        atsp.parse_instance(text)
