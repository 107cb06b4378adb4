"""Tonnage discretization, industry state enumeration, action-profile laws.

An industry state counts firms at four capacity levels. Each level-l firm
picks exit / keep / build, each of the fixed pool of potential entrants picks
quit / enter; the counts of those choices follow multinomials, and pushing
them through the count-conserving transition rules yields the exact one-step
distribution over next states.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, DomainError

N_LEVELS = 4
DEFAULT_CUTOFFS = (8.5, 9.5, 10.5)        # log TEU
DEFAULT_CAPS = (10, 10, 10, 10)
DEFAULT_N_POTENTIAL_ENTRANTS = 4

# Representative log-tonnage by market, levels 1..4.
REPRESENTATIVE_LOG_TONNAGE = {
    "asia_europe": (8.0, 9.0, 10.0, 10.5),
    "transpacific": (8.0, 8.5, 9.5, 10.5),
    "transatlantic": (7.2, 9.2, 10.1, 12.1),
}


class IndustryState(NamedTuple):
    """Counts of incumbent firms at capacity levels 1..4."""

    n1: int
    n2: int
    n3: int
    n4: int

    @property
    def total_firms(self) -> int:
        return self.n1 + self.n2 + self.n3 + self.n4


@dataclass(frozen=True)
class ActionTally:
    """Realized action counts for one market-year.

    exits[l-1] and builds[l-1] count level-l firms exiting / building;
    keeps are the remainder. entrant_quits + entrant_entries equals the
    size of the potential-entrant pool.
    """

    exits: tuple[int, int, int, int]
    builds: tuple[int, int, int, int]
    entrant_quits: int
    entrant_entries: int

    def keeps(self, state: IndustryState) -> tuple[int, int, int, int]:
        return tuple(n - x - b for n, x, b in zip(state, self.exits, self.builds))

    def validate(self, state: IndustryState) -> None:
        for l, (n, x, b) in enumerate(zip(state, self.exits, self.builds), start=1):
            if x < 0 or b < 0 or x + b > n:
                raise DomainError(f"tally inconsistent with state at level {l}")
        if self.entrant_quits < 0 or self.entrant_entries < 0:
            raise DomainError("entrant counts must be nonnegative")


def discretize_tonnage(tonnage: float, cutoffs: Sequence[float] = DEFAULT_CUTOFFS) -> int:
    """Map continuous tonnage (TEU) to a capacity level 1..4.

    Boundaries are inclusive below: exp(cutoff) still belongs to the lower
    level.
    """
    if tonnage <= 0:
        raise DomainError(f"tonnage must be positive, got {tonnage}")
    if list(cutoffs) != sorted(cutoffs) or len(set(cutoffs)) != len(cutoffs):
        raise DomainError("cutoffs must be strictly increasing")
    log_s = math.log(tonnage)
    for level, cut in enumerate(cutoffs, start=1):
        if log_s <= cut:
            return level
    return len(cutoffs) + 1


def representative_tonnage(level: int, market: str) -> float:
    """Continuous tonnage (TEU) standing in for a discretized level."""
    if market not in REPRESENTATIVE_LOG_TONNAGE:
        raise ConfigError(
            f"unknown market {market!r}; known: {sorted(REPRESENTATIVE_LOG_TONNAGE)}"
        )
    if not 1 <= level <= N_LEVELS:
        raise DomainError(f"level must be in 1..{N_LEVELS}, got {level}")
    return math.exp(REPRESENTATIVE_LOG_TONNAGE[market][level - 1])


def roundtrip_tonnage(
    level: int, market: str, cutoffs: Sequence[float] = DEFAULT_CUTOFFS
) -> float:
    """Representative tonnage nudged to discretize back to its own level.

    Some representative values sit exactly on their level's lower cutoff
    (which belongs to the level below, boundaries being inclusive there);
    emitted data uses this minimally perturbed value so that a discretize
    round trip is lossless.
    """
    s = representative_tonnage(level, market)
    while discretize_tonnage(s, cutoffs) < level:
        s = math.nextafter(s * (1.0 + 1e-12), math.inf)
    return s


def enumerate_states(caps: Sequence[int] = DEFAULT_CAPS) -> list[IndustryState]:
    """All states with counts 0..cap per level, in lexicographic order."""
    if len(caps) != N_LEVELS or any(c < 0 for c in caps):
        raise DomainError(f"caps must be {N_LEVELS} nonnegative ints, got {caps}")
    return [
        IndustryState(*counts)
        for counts in itertools.product(*(range(c + 1) for c in caps))
    ]


def apply_transition(
    state: IndustryState, tally: ActionTally, caps: Sequence[int] = DEFAULT_CAPS
) -> IndustryState:
    """Next state under the count-conserving transition rules, clamped to caps."""
    tally.validate(state)
    ex, b = tally.exits, tally.builds
    raw = (
        state.n1 + tally.entrant_entries - b[0] - ex[0],
        state.n2 + b[0] - b[1] - ex[1],
        state.n3 + b[1] - b[2] - ex[2],
        state.n4 + b[2] - ex[3],
    )
    return IndustryState(*(min(n, c) for n, c in zip(raw, caps)))


def level_profile_prob(
    n_firms: int, ccp_row: Sequence[float]
) -> dict[tuple[int, int], float]:
    """Multinomial law of (exits, builds) among n_firms with CCP (x, k, b).

    C(N,EX) * C(N-EX,B) * px^EX * pk^(N-EX-B) * pb^B over all valid pairs.
    """
    px, pk, pb = ccp_row
    if not math.isclose(px + pk + pb, 1.0, abs_tol=1e-9):
        raise DomainError("CCP row must sum to 1")
    out: dict[tuple[int, int], float] = {}
    for ex in range(n_firms + 1):
        for b in range(n_firms - ex + 1):
            k = n_firms - ex - b
            coef = math.comb(n_firms, ex) * math.comb(n_firms - ex, b)
            out[(ex, b)] = coef * px**ex * pk**k * pb**b
    return out


def entrant_profile_prob(
    n_pe: int, ccp_row: Sequence[float]
) -> dict[int, float]:
    """Binomial law of the number of entries among n_pe potential entrants."""
    px, pe = ccp_row
    if not math.isclose(px + pe, 1.0, abs_tol=1e-9):
        raise DomainError("CCP row must sum to 1")
    return {
        e: math.comb(n_pe, e) * pe**e * px ** (n_pe - e) for e in range(n_pe + 1)
    }


def transition_distribution(
    state: IndustryState,
    incumbent_ccps: Sequence[Sequence[float]],
    entrant_ccp: Sequence[float],
    caps: Sequence[int] = DEFAULT_CAPS,
    n_pe: int = DEFAULT_N_POTENTIAL_ENTRANTS,
) -> dict[IndustryState, float]:
    """Exact one-step distribution over next industry states.

    ``incumbent_ccps`` holds one (x, k, b) row per level 1..4. Probability
    mass whose raw destination exceeds a cap is retained at the clamped
    state, keeping this a proper distribution.
    """
    per_level = [
        level_profile_prob(state[l], incumbent_ccps[l]) for l in range(N_LEVELS)
    ]
    entrants = entrant_profile_prob(n_pe, entrant_ccp)
    dist: dict[IndustryState, float] = {}
    for combo in itertools.product(*(d.items() for d in per_level)):
        p_levels = 1.0
        exits, builds = [], []
        for (ex, b), p in combo:
            p_levels *= p
            exits.append(ex)
            builds.append(b)
        if p_levels == 0.0:
            continue
        for entries, p_e in entrants.items():
            p = p_levels * p_e
            if p == 0.0:
                continue
            tally = ActionTally(
                exits=tuple(exits),
                builds=tuple(builds),
                entrant_quits=n_pe - entries,
                entrant_entries=entries,
            )
            nxt = apply_transition(state, tally, caps)
            dist[nxt] = dist.get(nxt, 0.0) + p
    return dist


class StateSpace:
    """Enumerated state space plus flat tables for the fast transition kernel.

    The tables pre-resolve, for every (state, joint action-count profile),
    the destination state index and which per-level outcome contributes,
    so building the kernel for a CCP iterate is pure array arithmetic.
    """

    def __init__(
        self,
        caps: Sequence[int] = DEFAULT_CAPS,
        n_pe: int = DEFAULT_N_POTENTIAL_ENTRANTS,
    ):
        if n_pe < 0:
            raise DomainError("number of potential entrants must be >= 0")
        self.caps = tuple(int(c) for c in caps)
        self.n_pe = int(n_pe)
        self.states = enumerate_states(self.caps)
        self.n_states = len(self.states)
        self._index = {s: i for i, s in enumerate(self.states)}
        self._tables = None

    def index(self, state: IndustryState) -> int:
        try:
            return self._index[IndustryState(*state)]
        except KeyError:
            raise DomainError(f"state {state} outside enumerated space") from None

    def state(self, idx: int) -> IndustryState:
        return self.states[idx]

    def clamp(self, counts: Sequence[int]) -> IndustryState:
        return IndustryState(
            *(min(max(n, 0), c) for n, c in zip(counts, self.caps))
        )

    @property
    def tables(self) -> "KernelTables":
        if self._tables is None:
            self._tables = _build_kernel_tables(self)
        return self._tables

    def __iter__(self) -> Iterator[IndustryState]:
        return iter(self.states)


@dataclass(frozen=True)
class KernelTables:
    """Flat outcome/combination tables consumed by the numba solver core.

    Per level l, outcome o is one (EX, K, B) triple at some state; its
    probability is coef * px^EX * pk^K * pb^B. ``combo_*`` rows pick one
    outcome per level plus an entrant outcome and map to a destination state.
    """

    # per level: outcome -> owning state, exponents, binomial coefficient
    out_state: tuple[np.ndarray, ...]     # each (M_l,) int32
    out_ex: tuple[np.ndarray, ...]        # (M_l,) int16
    out_keep: tuple[np.ndarray, ...]
    out_build: tuple[np.ndarray, ...]
    out_coef: tuple[np.ndarray, ...]      # (M_l,) float64
    # entrant outcomes: per state, n_pe+1 rows (quits = n_pe - entries)
    pe_state: np.ndarray                  # (M_pe,) int32
    pe_entries: np.ndarray                # (M_pe,) int16
    pe_coef: np.ndarray                   # (M_pe,) float64
    # joint combinations
    combo_src: np.ndarray                 # (K,) int32 source state index
    combo_dst: np.ndarray                 # (K,) int32 destination state index
    combo_out: np.ndarray                 # (K, 4) int32 row into out_* arrays
    combo_pe: np.ndarray                  # (K,) int32 row into pe_* arrays


def _build_kernel_tables(space: StateSpace) -> KernelTables:
    n_pe = space.n_pe
    out_state = [[] for _ in range(N_LEVELS)]
    out_ex = [[] for _ in range(N_LEVELS)]
    out_keep = [[] for _ in range(N_LEVELS)]
    out_build = [[] for _ in range(N_LEVELS)]
    out_coef = [[] for _ in range(N_LEVELS)]
    # outcome rows grouped per (state, level); remember the row ranges
    rows: list[list[list[int]]] = [[] for _ in range(N_LEVELS)]
    for si, st in enumerate(space.states):
        for l in range(N_LEVELS):
            n = st[l]
            group = []
            for ex in range(n + 1):
                for b in range(n - ex + 1):
                    group.append(len(out_state[l]))
                    out_state[l].append(si)
                    out_ex[l].append(ex)
                    out_keep[l].append(n - ex - b)
                    out_build[l].append(b)
                    out_coef[l].append(math.comb(n, ex) * math.comb(n - ex, b))
            rows[l].append(group)

    pe_state, pe_entries, pe_coef = [], [], []
    pe_rows: list[list[int]] = []
    for si in range(space.n_states):
        group = []
        for e in range(n_pe + 1):
            group.append(len(pe_state))
            pe_state.append(si)
            pe_entries.append(e)
            pe_coef.append(math.comb(n_pe, e))
        pe_rows.append(group)

    combo_src, combo_dst, combo_out, combo_pe = [], [], [], []
    for si, st in enumerate(space.states):
        level_rows = [rows[l][si] for l in range(N_LEVELS)]
        for choice in itertools.product(*level_rows):
            ex = [out_ex[l][choice[l]] for l in range(N_LEVELS)]
            b = [out_build[l][choice[l]] for l in range(N_LEVELS)]
            for pe_row in pe_rows[si]:
                e = pe_entries[pe_row]
                dst = space.clamp(
                    (
                        st.n1 + e - b[0] - ex[0],
                        st.n2 + b[0] - b[1] - ex[1],
                        st.n3 + b[1] - b[2] - ex[2],
                        st.n4 + b[2] - ex[3],
                    )
                )
                combo_src.append(si)
                combo_dst.append(space.index(dst))
                combo_out.append(choice)
                combo_pe.append(pe_row)

    as_i32 = lambda xs: np.asarray(xs, dtype=np.int32)
    as_i16 = lambda xs: np.asarray(xs, dtype=np.int16)
    as_f64 = lambda xs: np.asarray(xs, dtype=np.float64)
    return KernelTables(
        out_state=tuple(as_i32(out_state[l]) for l in range(N_LEVELS)),
        out_ex=tuple(as_i16(out_ex[l]) for l in range(N_LEVELS)),
        out_keep=tuple(as_i16(out_keep[l]) for l in range(N_LEVELS)),
        out_build=tuple(as_i16(out_build[l]) for l in range(N_LEVELS)),
        out_coef=tuple(as_f64(out_coef[l]) for l in range(N_LEVELS)),
        pe_state=as_i32(pe_state),
        pe_entries=as_i16(pe_entries),
        pe_coef=as_f64(pe_coef),
        combo_src=as_i32(combo_src),
        combo_dst=as_i32(combo_dst),
        combo_out=np.asarray(combo_out, dtype=np.int32),
        combo_pe=as_i32(combo_pe),
    )
