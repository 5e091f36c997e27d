import itertools
import math

import numpy as np
import pytest

from dispatchsim.domain import ContractViolation, DomainError, Observation, Order, virtual_order
from dispatchsim.policies import (
    GREEDY,
    AssignmentMatrix,
    BoltzmannPolicy,
    assign_with_policy,
    boltzmann_probs,
    hungarian_match,
    nod_policy,
    select_orders_for_grid,
    top_m_match,
)


class TestBoltzmannProbs:
    def test_symmetric_values(self):
        assert np.allclose(boltzmann_probs([1.0, 1.0], 1.0), [0.5, 0.5], rtol=0, atol=1e-15)

    def test_direct_exponentiation_oracle(self):
        got = boltzmann_probs([math.log(2.0), 0.0], 1.0)
        assert np.allclose(got, [2 / 3, 1 / 3], rtol=1e-12, atol=0)

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            q = rng.normal(size=int(rng.integers(1, 9)))
            c = rng.normal() * 10
            assert np.allclose(boltzmann_probs(q, 1.3), boltzmann_probs(q + c, 1.3), rtol=1e-9, atol=1e-12)

    def test_sums_to_one(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            q = rng.normal(size=int(rng.integers(1, 12))) * rng.exponential()
            assert abs(boltzmann_probs(q, 0.7).sum() - 1.0) <= 1e-9

    def test_low_temperature_concentrates(self):
        probs = boltzmann_probs([0.5, 0.6], 1e-3)
        assert probs[1] >= 0.999

    def test_empty_rejected(self):
        with pytest.raises(DomainError):
            boltzmann_probs([], 1.0)

    def test_bad_temperature(self):
        with pytest.raises(Exception):
            boltzmann_probs([1.0], 0.0)
        with pytest.raises(Exception):
            BoltzmannPolicy(temperature=-1.0)


def grid_candidates(n_real, grid=0):
    nbrs = [grid + 1, grid + 10, grid + 11]
    orders = [Order(source=grid, dest=nbrs[i % 3], price=0.1 * (i + 1)) for i in range(n_real)]
    orders.append(virtual_order(grid))
    return orders


class TestAssignWithPolicy:
    def test_zero_idle_vehicles(self):
        orders = grid_candidates(2)
        decision = assign_with_policy(np.zeros(3), orders, [], GREEDY)
        assert decision.assignments == ()

    def test_only_virtual_forces_stay(self):
        orders = grid_candidates(0)
        decision = assign_with_policy(np.zeros(1), orders, [4, 7, 9], GREEDY)
        assert len(decision.assignments) == 3
        assert all(o.virtual for _, o in decision.assignments)

    def test_greedy_top_m(self):
        orders = grid_candidates(3)
        q = np.array([0.9, 0.5, 0.1, 0.0])  # virtual last and lowest
        decision = assign_with_policy(q, orders, [1, 2], GREEDY)
        chosen = [o for _, o in decision.assignments]
        assert chosen == [orders[0], orders[1]]

    def test_greedy_prefers_virtual_when_best(self):
        orders = grid_candidates(2)
        q = np.array([-1.0, -2.0, 0.5])
        decision = assign_with_policy(q, orders, [1], GREEDY)
        assert decision.assignments[0][1].virtual

    def test_real_ties_beat_virtual_and_lower_index_wins(self):
        orders = grid_candidates(2)
        q = np.array([0.5, 0.5, 0.5])
        decision = assign_with_policy(q, orders, [1], GREEDY)
        assert decision.assignments[0][1] is orders[0]

    def test_no_real_order_assigned_twice(self):
        rng = np.random.default_rng(3)
        policy = BoltzmannPolicy(1.0)
        for _ in range(200):
            n_real = int(rng.integers(0, 5))
            k = int(rng.integers(0, 7))
            orders = grid_candidates(n_real)
            q = rng.normal(size=n_real + 1)
            decision = assign_with_policy(q, orders, list(range(k)), policy, rng)
            real_chosen = [id(o) for _, o in decision.assignments if not o.virtual]
            assert len(real_chosen) == len(set(real_chosen))
            assert len(decision.assignments) == k

    def test_exhausts_reals_under_boltzmann_when_forced(self):
        # virtual has -inf-like value: every real order should be taken first
        rng = np.random.default_rng(4)
        orders = grid_candidates(3)
        q = np.array([0.0, 0.0, 0.0, -60.0])
        decision = assign_with_policy(q, orders, [1, 2, 3], BoltzmannPolicy(1.0), rng)
        assert sum(not o.virtual for _, o in decision.assignments) == 3

    def test_candidate_contract_enforced(self):
        with pytest.raises(ContractViolation):
            assign_with_policy(np.zeros(1), [Order(source=0, dest=1)], [1], GREEDY)
        orders = [virtual_order(0), virtual_order(0)]
        with pytest.raises(ContractViolation):
            assign_with_policy(np.zeros(2), orders, [1], GREEDY)
        with pytest.raises(ContractViolation):
            assign_with_policy(np.zeros(3), grid_candidates(1), [1], GREEDY)

    def test_boltzmann_needs_rng(self):
        with pytest.raises(ContractViolation):
            assign_with_policy(np.zeros(2), grid_candidates(1), [1], BoltzmannPolicy(1.0))


class TestSelectOrdersForGrid:
    def test_scorer_called_once_per_grid(self):
        orders = grid_candidates(3)
        obs = Observation(grid=0, idle_count=2, order_count=3, dest_distribution=np.zeros(2))
        calls = []

        def scorer(o, cand):
            calls.append(len(cand))
            return np.arange(len(cand), 0.0, -1.0)

        decision = select_orders_for_grid(obs, orders, [5, 6], scorer, GREEDY)
        assert calls == [4]
        assert len(decision.assignments) == 2
        assert decision.assignments[0][1] is orders[0]


class TestNodPolicy:
    def obs(self):
        return Observation(grid=0, idle_count=0, order_count=0, dest_distribution=np.zeros(2))

    def test_enough_vehicles_serve_every_order(self):
        rng = np.random.default_rng(5)
        orders = grid_candidates(4)
        decision = nod_policy(self.obs(), orders, list(range(6)), rng)
        served = {id(o) for _, o in decision.assignments if not o.virtual}
        assert served == {id(o) for o in orders[:4]}
        assert sum(o.virtual for _, o in decision.assignments) == 2

    def test_no_vehicles(self):
        rng = np.random.default_rng(6)
        assert nod_policy(self.obs(), grid_candidates(2), [], rng).assignments == ()

    def test_uniform_selection_frequency(self):
        # binomial: p=1/4, n=10^4 -> 3 sigma ~ 0.013 < 0.02
        rng = np.random.default_rng(7)
        orders = grid_candidates(4)
        counts = {id(o): 0 for o in orders[:4]}
        trials = 10_000
        for _ in range(trials):
            decision = nod_policy(self.obs(), orders, [0], rng)
            counts[id(decision.assignments[0][1])] += 1
        for c in counts.values():
            assert abs(c / trials - 0.25) < 0.02


def brute_force_best(q):
    """Optimal partial assignment by enumerating row subsets and injections."""
    m, n = q.shape
    best = 0.0
    for k in range(1, min(m, n) + 1):
        for rows in itertools.combinations(range(m), k):
            for cols in itertools.permutations(range(n), k):
                val = sum(q[r, c] for r, c in zip(rows, cols))
                best = max(best, val)
    return best


class TestHungarianMatch:
    def test_single_cell(self):
        result = hungarian_match(np.array([[5.0]]))
        assert result.pairs() == [(0, 0)]
        assert result.objective(np.array([[5.0]])) == 5.0

    def test_identity_dominant(self):
        q = np.eye(3)
        result = hungarian_match(q)
        assert result.pairs() == [(0, 0), (1, 1), (2, 2)]

    def test_matches_brute_force_on_random_matrices(self):
        # nonnegative values: optimal partial == optimal full assignment
        rng = np.random.default_rng(8)
        for trial in range(200):
            m = int(rng.integers(1, 7))
            n = int(rng.integers(1, 7))
            q = rng.uniform(0.0, 1.0, size=(m, n))
            got = hungarian_match(q).objective(q)
            k = min(m, n)
            best = max(
                sum(q[r, c] for r, c in zip(rows, cols))
                for rows in itertools.combinations(range(m), k)
                for cols in itertools.permutations(range(n), k)
            )
            assert got == pytest.approx(best, rel=1e-12), trial

    def test_negative_entries_left_unmatched(self):
        q = np.array([[3.0, 2.0], [-1.0, -5.0]])
        result = hungarian_match(q)
        assert result.objective(q) == pytest.approx(3.0)
        assert result.pairs() == [(0, 0)]

    def test_matches_subset_brute_force_with_negatives(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            m = int(rng.integers(1, 5))
            n = int(rng.integers(1, 5))
            q = rng.uniform(-1.0, 1.0, size=(m, n))
            assert hungarian_match(q).objective(q) == pytest.approx(brute_force_best(q), abs=1e-12)

    def test_row_and_column_sums(self):
        rng = np.random.default_rng(10)
        for _ in range(50):
            q = rng.normal(size=(int(rng.integers(1, 8)), int(rng.integers(1, 8))))
            a = hungarian_match(q).matrix
            assert np.all(a.sum(axis=0) <= 1) and np.all(a.sum(axis=1) <= 1)

    def test_beats_random_valid_assignments(self):
        rng = np.random.default_rng(11)
        for _ in range(30):
            m, n = int(rng.integers(2, 7)), int(rng.integers(2, 7))
            q = rng.uniform(0, 1, size=(m, n))
            best = hungarian_match(q).objective(q)
            k = min(m, n)
            rows = rng.permutation(m)[:k]
            cols = rng.permutation(n)[:k]
            random_val = sum(q[r, c] for r, c in zip(rows, cols))
            assert best >= random_val - 1e-12

    def test_invalid_inputs(self):
        with pytest.raises(DomainError):
            hungarian_match(np.zeros((0, 3)))
        with pytest.raises(DomainError):
            hungarian_match(np.array([[np.inf, 1.0]]))


class TestTopM:
    def test_zero_m(self):
        assert top_m_match(np.array([1.0, 2.0]), 0) == []

    def test_example(self):
        assert top_m_match(np.array([3.0, 1.0, 2.0]), 2) == [0, 2]

    def test_m_exceeding_length(self):
        assert top_m_match(np.array([3.0, 1.0]), 5) == [0, 1]

    def test_tie_break_lower_index(self):
        assert top_m_match(np.array([1.0, 2.0, 2.0, 1.0]), 1) == [1]
        assert top_m_match(np.array([2.0, 2.0]), 1) == [0]

    def test_degenerates_from_hungarian_on_identical_rows(self):
        rng = np.random.default_rng(12)
        for _ in range(100):
            n = int(rng.integers(1, 9))
            m = int(rng.integers(1, 6))
            values = rng.uniform(0, 1, size=n)
            q = np.tile(values, (m, 1))
            hungarian = hungarian_match(q).objective(q)
            chosen = top_m_match(values, m)
            assert len(chosen) == min(m, n)
            assert hungarian == pytest.approx(values[chosen].sum() if chosen else 0.0, rel=1e-12)


class TestAssignmentMatrix:
    def test_rejects_double_assignment(self):
        with pytest.raises(DomainError):
            AssignmentMatrix(np.array([[True, True], [False, False]]))
        with pytest.raises(DomainError):
            AssignmentMatrix(np.array([[True, False], [True, False]]))
