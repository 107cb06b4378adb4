"""Tonnage discretization, state enumeration, transition arithmetic, and the
exact action-profile laws, checked against brute-force enumeration over
ordered action profiles."""

import itertools
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cartelsim.errors import DomainError
from cartelsim.states import (
    DEFAULT_CUTOFFS,
    IndustryState,
    ActionTally,
    StateSpace,
    apply_transition,
    discretize_tonnage,
    entrant_profile_prob,
    enumerate_states,
    level_profile_prob,
    representative_tonnage,
    roundtrip_tonnage,
    transition_distribution,
)


class TestDiscretization:
    def test_interior_level2(self):
        assert discretize_tonnage(math.exp(9.0)) == 2

    def test_boundary_inclusive_below(self):
        assert discretize_tonnage(math.exp(10.5)) == 3
        assert discretize_tonnage(math.exp(8.5)) == 1
        assert discretize_tonnage(math.exp(9.5)) == 2

    def test_top_level(self):
        assert discretize_tonnage(math.exp(11.0)) == 4

    def test_representative_values(self):
        assert representative_tonnage(4, "transatlantic") == pytest.approx(math.exp(12.1))
        assert representative_tonnage(1, "transpacific") == pytest.approx(math.exp(8.0))
        assert representative_tonnage(3, "asia_europe") == pytest.approx(math.exp(10.0))

    def test_roundtrip_tonnage_discretizes_to_own_level(self):
        # Some representative values sit exactly on a boundary, where the
        # inclusive-below rule would bucket them one level down; the
        # emission variant nudges those off the boundary.
        for market in ("transpacific", "transatlantic", "asia_europe"):
            for level in (1, 2, 3, 4):
                assert discretize_tonnage(roundtrip_tonnage(level, market)) == level

    def test_bad_level_rejected(self):
        with pytest.raises(DomainError):
            representative_tonnage(5, "transpacific")


class TestEnumerationAndTransition:
    def test_single_slot_two_states(self):
        assert len(enumerate_states((1, 0, 0, 0))) == 2

    def test_small_product(self):
        assert len(enumerate_states((2, 1, 0, 0))) == 6

    def test_production_caps_state_count(self):
        assert len(enumerate_states((4, 3, 2, 1))) == 120

    def test_all_keep_fixed_point(self):
        s = IndustryState(2, 1, 0, 0)
        tally = ActionTally((0, 0, 0, 0), (0, 0, 0, 0), 2, 0)
        assert apply_transition(s, tally, (4, 3, 2, 1)) == s

    def test_entry_and_build(self):
        s = IndustryState(2, 1, 0, 0)
        tally = ActionTally((0, 0, 0, 0), (1, 0, 0, 0), 1, 1)
        assert apply_transition(s, tally, (4, 3, 2, 1)) == IndustryState(2, 2, 0, 0)

    def test_last_firm_exits(self):
        s = IndustryState(0, 0, 0, 1)
        tally = ActionTally((0, 0, 0, 1), (0, 0, 0, 0), 0, 0)
        assert apply_transition(s, tally, (4, 3, 2, 1)) == IndustryState(0, 0, 0, 0)

    def test_clamp_retains_mass_at_cap(self):
        s = IndustryState(4, 0, 0, 0)
        tally = ActionTally((0, 0, 0, 0), (0, 0, 0, 0), 0, 3)
        assert apply_transition(s, tally, (4, 3, 2, 1)) == IndustryState(4, 0, 0, 0)

    def test_invalid_tally_rejected(self):
        s = IndustryState(1, 0, 0, 0)
        with pytest.raises(DomainError):
            ActionTally((2, 0, 0, 0), (0, 0, 0, 0), 0, 0).validate(s)

    def test_state_space_index_roundtrip(self):
        space = StateSpace(caps=(3, 2, 1, 1), n_pe=2)
        for i, s in enumerate(space.states):
            assert space.index(s) == i
            assert space.state(i) == s


class TestProfileLaws:
    def test_two_firm_uniform_mixed_profile(self):
        probs = level_profile_prob(2, (1 / 3, 1 / 3, 1 / 3))
        # 2 orderings of (one exit, one build), each (1/3)^2
        assert probs[(1, 1)] == pytest.approx(2 / 9, rel=1e-12)

    def test_zero_firms_degenerate(self):
        probs = level_profile_prob(0, (0.2, 0.5, 0.3))
        assert probs == {(0, 0): pytest.approx(1.0)}

    @settings(max_examples=40, deadline=None)
    @given(
        n=st.integers(0, 6),
        px=st.floats(0.01, 0.98),
        frac=st.floats(0.01, 0.99),
    )
    def test_profile_law_normalizes(self, n, px, frac):
        pk = (1.0 - px) * frac
        pb = 1.0 - px - pk
        probs = level_profile_prob(n, (px, pk, pb))
        assert sum(probs.values()) == pytest.approx(1.0, abs=1e-12)

    def test_profile_law_matches_ordered_enumeration(self):
        ccp = (0.2, 0.5, 0.3)
        n = 3
        brute: dict[tuple[int, int], float] = {}
        for profile in itertools.product(range(3), repeat=n):
            p = math.prod(ccp[a] for a in profile)
            key = (profile.count(0), profile.count(2))
            brute[key] = brute.get(key, 0.0) + p
        probs = level_profile_prob(n, ccp)
        assert set(probs) == set(brute)
        for key in brute:
            assert probs[key] == pytest.approx(brute[key], abs=1e-14)

    def test_entrant_binomial(self):
        probs = entrant_profile_prob(2, (0.4, 0.6))
        assert probs[0] == pytest.approx(0.16)
        assert probs[1] == pytest.approx(0.48)
        assert probs[2] == pytest.approx(0.36)


def brute_force_transition(state, incumbent_ccps, entrant_ccp, caps, n_pe):
    """Oracle: enumerate every ordered action profile of every firm."""
    dist: dict[IndustryState, float] = {}
    level_actions = [
        list(itertools.product(range(3), repeat=state[l])) for l in range(4)
    ]
    entrant_actions = list(itertools.product(range(2), repeat=n_pe))
    for combo in itertools.product(*level_actions):
        p_inc = 1.0
        exits, builds = [], []
        for l, profile in enumerate(combo):
            for a in profile:
                p_inc *= incumbent_ccps[l][a]
            exits.append(profile.count(0))
            builds.append(profile.count(2))
        for eprofile in entrant_actions:
            p = p_inc
            for a in eprofile:
                p *= entrant_ccp[a]
            entries = eprofile.count(1)
            tally = ActionTally(
                tuple(exits), tuple(builds), n_pe - entries, entries
            )
            nxt = apply_transition(state, tally, caps)
            dist[nxt] = dist.get(nxt, 0.0) + p
    return dist


class TestTransitionDistribution:
    CCPS = [(0.2, 0.5, 0.3), (0.1, 0.6, 0.3), (0.25, 0.5, 0.25), (0.3, 0.6, 0.1)]
    ENTRANT = (0.45, 0.55)

    def test_degenerate_keep_point_mass(self):
        s = IndustryState(2, 1, 0, 0)
        keep = [(0.0, 1.0, 0.0)] * 4
        dist = transition_distribution(s, keep, (1.0, 0.0), (4, 3, 2, 1), 2)
        assert dist == {s: pytest.approx(1.0)}

    def test_single_firm_no_entrants_hand_enumeration(self):
        s = IndustryState(1, 0, 0, 0)
        uniform = [(1 / 3, 1 / 3, 1 / 3)] * 4
        dist = transition_distribution(s, uniform, (1.0, 0.0), (4, 3, 2, 1), 0)
        assert dist[IndustryState(0, 0, 0, 0)] == pytest.approx(1 / 3)
        assert dist[IndustryState(1, 0, 0, 0)] == pytest.approx(1 / 3)
        assert dist[IndustryState(0, 1, 0, 0)] == pytest.approx(1 / 3)

    def test_matches_brute_force_with_clamping(self):
        caps = (2, 1, 1, 1)
        for state in [IndustryState(2, 1, 0, 0), IndustryState(1, 1, 1, 1),
                      IndustryState(2, 0, 1, 0)]:
            dist = transition_distribution(state, self.CCPS, self.ENTRANT, caps, 2)
            oracle = brute_force_transition(state, self.CCPS, self.ENTRANT, caps, 2)
            assert set(dist) == set(oracle)
            for nxt in oracle:
                assert dist[nxt] == pytest.approx(oracle[nxt], abs=1e-12)
            assert sum(dist.values()) == pytest.approx(1.0, abs=1e-12)

    def test_support_within_caps(self):
        caps = (2, 1, 1, 1)
        dist = transition_distribution(
            IndustryState(2, 1, 1, 1), self.CCPS, self.ENTRANT, caps, 2
        )
        for nxt in dist:
            assert all(n <= c for n, c in zip(nxt, caps))
