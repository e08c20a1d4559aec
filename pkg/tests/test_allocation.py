import itertools

import numpy as np
import pytest

from kvmix.allocation import (
    Allocation,
    allocate,
    allocate_exhaustive,
    allocate_greedy,
    default_budget_grid,
    load_allocation,
    per_bit_gain,
    realized_average_bitwidth,
    save_allocation,
    sweep_budget,
)
from kvmix.calibration import SensitivityTable
from kvmix.errors import InfeasibleBudgetError, ValidationError


def make_table(rows):
    """rows: {code: (D2, D4, N)}"""
    distortion = {}
    counts = {}
    for code, (d2, d4, n) in rows.items():
        distortion[(code, 2)] = d2
        distortion[(code, 4)] = d4
        counts[code] = n
    return SensitivityTable(distortion=distortion, counts=counts)


def brute_force(table, budget):
    """Reference solver: plain itertools enumeration with the same tie order."""
    codes = table.tags()
    total = sum(table.counts.values())
    best = None
    for choice in itertools.product((2, 4), repeat=len(codes)):
        bits = dict(zip(codes, choice))
        avg = sum(table.counts[c] * bits[c] for c in codes) / total
        if avg > budget + 1e-9:
            continue
        obj = sum(table.distortion[(c, bits[c])] for c in codes)
        key = (obj, avg, tuple(c for c in codes if bits[c] == 4))
        if best is None or key < best[0]:
            best = (key, bits)
    return best


class TestHelpers:
    def test_per_bit_gain(self):
        assert per_bit_gain(10.0, 4.0, 3) == pytest.approx(1.0)

    def test_per_bit_gain_rejects_zero_count(self):
        with pytest.raises(ValidationError):
            per_bit_gain(1.0, 0.5, 0)

    def test_realized_average(self):
        assert realized_average_bitwidth({0: 2, 1: 4}, {0: 30, 1: 10}) == pytest.approx(2.5)

    def test_realized_average_missing_tag(self):
        with pytest.raises(ValidationError):
            realized_average_bitwidth({0: 2}, {0: 1, 1: 1})


class TestExhaustive:
    def test_worked_three_tag_example(self):
        # Upgrading tag 1 is the only move that fits a 2.5-bit budget and
        # it captures the largest distortion reduction per bit.
        table = make_table({0: (10.0, 4.0, 20), 1: (30.0, 2.0, 10), 2: (5.0, 4.0, 10)})
        alloc = allocate_exhaustive(table, 2.5)
        assert alloc.bits == {0: 2, 1: 4, 2: 2}
        assert alloc.objective == pytest.approx(10.0 + 2.0 + 5.0)
        assert alloc.realized_avg == pytest.approx(2.5)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for trial in range(50):
            n_tags = int(rng.integers(1, 9))
            rows = {}
            for c in rng.choice(56, size=n_tags, replace=False):
                d4 = float(rng.uniform(0, 2))
                rows[int(c)] = (d4 + float(rng.uniform(0, 5)), d4, int(rng.integers(1, 50)))
            table = make_table(rows)
            budget = float(rng.uniform(2.0, 4.0))
            alloc = allocate_exhaustive(table, budget)
            key, bits = brute_force(table, budget)
            assert alloc.bits == bits
            assert alloc.objective == pytest.approx(key[0])

    def test_budget_two_forces_all_int2(self):
        table = make_table({0: (5.0, 1.0, 4), 1: (3.0, 1.0, 4)})
        alloc = allocate_exhaustive(table, 2.0)
        assert set(alloc.bits.values()) == {2}

    def test_budget_four_prefers_lower_avg_on_ties(self):
        # Upgrading a zero-gain tag never helps the objective, so ties form;
        # the smaller realized average must win.
        table = make_table({0: (1.0, 1.0, 10), 1: (9.0, 2.0, 10)})
        alloc = allocate_exhaustive(table, 4.0)
        assert alloc.bits == {0: 2, 1: 4}
        assert alloc.realized_avg == pytest.approx(3.0)

    def test_tie_on_avg_breaks_on_code_tuple(self):
        table = make_table({3: (5.0, 1.0, 10), 8: (5.0, 1.0, 10)})
        alloc = allocate_exhaustive(table, 3.0)
        assert alloc.bits == {3: 4, 8: 2}

    def test_infeasible_budget(self):
        table = make_table({0: (1.0, 0.5, 4)})
        with pytest.raises(InfeasibleBudgetError):
            allocate_exhaustive(table, 1.9)

    def test_budget_above_four_rejected(self):
        table = make_table({0: (1.0, 0.5, 4)})
        with pytest.raises(ValidationError):
            allocate_exhaustive(table, 4.2)

    def test_tag_limit_enforced(self):
        rows = {c: (2.0, 1.0, 2) for c in range(23)}
        with pytest.raises(ValidationError):
            allocate_exhaustive(make_table(rows), 3.0)


class TestGreedy:
    def test_orders_by_per_bit_gain(self):
        # Tag 1 has the higher gain per bit and must be upgraded first.
        table = make_table({0: (8.0, 4.0, 20), 1: (6.0, 1.0, 5)})
        alloc = allocate_greedy(table, 2.4)
        assert alloc.bits == {0: 2, 1: 4}

    def test_skips_nonpositive_gain(self):
        table = make_table({0: (1.0, 1.0, 4), 1: (1.0, 2.0, 4)})
        alloc = allocate_greedy(table, 4.0)
        assert alloc.bits == {0: 2, 1: 2}

    def test_agrees_with_exhaustive_on_easy_instances(self):
        # Geometric gains make greedy provably optimal; solvers must agree.
        rng = np.random.default_rng(1)
        for trial in range(20):
            rows = {}
            for i, c in enumerate(rng.choice(56, size=5, replace=False)):
                rows[int(c)] = (float(2.0 ** (5 - i)), 0.0, 10)
            table = make_table(rows)
            budget = float(rng.choice([2.4, 2.8, 3.2, 3.6]))
            g = allocate_greedy(table, budget)
            e = allocate_exhaustive(table, budget)
            assert g.objective == pytest.approx(e.objective)


class TestDispatchAndSerialization:
    def test_auto_picks_exhaustive_below_limit(self):
        table = make_table({0: (2.0, 1.0, 4)})
        assert allocate(table, 3.0).solver == "exhaustive"

    def test_auto_picks_greedy_above_limit(self):
        rows = {c: (2.0 + c * 0.01, 1.0, 2) for c in range(23)}
        assert allocate(make_table(rows), 3.0).solver == "greedy"

    def test_unknown_solver(self):
        table = make_table({0: (2.0, 1.0, 4)})
        with pytest.raises(ValidationError):
            allocate(table, 3.0, solver="annealing")

    def test_json_roundtrip(self, tmp_path):
        alloc = Allocation(budget=2.7, bits={0: 2, 14: 4}, realized_avg=2.6,
                           objective=1.5, solver="greedy")
        path = tmp_path / "alloc.json"
        save_allocation(alloc, path)
        assert load_allocation(path) == alloc


class TestSweep:
    def test_grid(self):
        grid = default_budget_grid()
        assert grid[0] == 2.0 and grid[-1] == 4.0 and len(grid) == 21

    def test_picks_smallest_stable_budget(self):
        table = make_table({0: (10.0, 1.0, 10), 1: (4.0, 1.0, 10)})

        def evaluator(alloc):
            return alloc.objective

        # At budget 4 everything upgrades (objective 2); at 3.0 only one tag fits.
        result = sweep_budget(table, [2.0, 3.0, 4.0], evaluator, stability_threshold=4.0)
        assert result.chosen == 3.0
        assert not result.flagged
        assert result.baseline_score == pytest.approx(2.0)
        assert [b for b, _ in result.curve] == [2.0, 3.0, 4.0]

    def test_flags_when_nothing_qualifies(self):
        table = make_table({0: (100.0, 0.0, 10)})
        result = sweep_budget(table, [2.0, 3.0], lambda a: a.objective,
                              stability_threshold=1e-6)
        assert result.chosen == 4.0
        assert result.flagged

    def test_rejects_out_of_range_candidate(self):
        table = make_table({0: (1.0, 0.5, 4)})
        with pytest.raises(ValidationError):
            sweep_budget(table, [1.5], lambda a: a.objective, 0.1)
