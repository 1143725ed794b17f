"""Integrator-delay canal models: per-reach subsystems and coalition assembly.

A reach is a gate plus its downstream pool.  Each subsystem state stacks the
recent gate flows followed by the water-level error:

    x_i = [q_i(k-1), ..., q_i(k-d_i), e_i(k)]

The level integrates the difference between the delayed inflow and the
outflow (downstream gate flow plus offtake); flows form a delay line driven
by the flow increment u_i = dq_i commanded at the upstream gate.  The
downstream gate flow perturbs the level, so the neighbour set of reach i is
{i+1} (distant downstream control), empty for the last reach whose
downstream discharge is not manipulated.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ReachParams:
    """Physical parameters of one reach (length/width are informational)."""

    index: int
    backwater_area: float  # m^2
    delay_steps: int
    length: float = 0.0
    bottom_width: float = 0.0

    def __post_init__(self):
        if self.backwater_area <= 0.0:
            raise ValueError(f"reach {self.index}: backwater_area must be positive")
        if self.delay_steps < 1:
            raise ValueError(f"reach {self.index}: delay_steps must be >= 1")


# West main canal, 13 reaches, identified at 80% of maximum discharge.
DEZ_REACHES = (
    ReachParams(1, 0.9318e5, 3, 6219, 12),
    ReachParams(2, 1.0952e5, 1, 1933, 12),
    ReachParams(3, 0.8554e5, 2, 3718, 10),
    ReachParams(4, 3.7060e5, 2, 3906, 10),
    ReachParams(5, 1.7095e5, 2, 2934, 5),
    ReachParams(6, 0.7786e5, 3, 4670, 5),
    ReachParams(7, 0.6661e5, 2, 3110, 5),
    ReachParams(8, 0.8904e5, 1, 2240, 5),
    ReachParams(9, 0.8671e5, 2, 3405, 5),
    ReachParams(10, 0.4897e5, 2, 3820, 5),
    ReachParams(11, 0.4032e5, 2, 2520, 4),
    ReachParams(12, 0.3820e5, 2, 2874, 4),
    ReachParams(13, 0.3884e5, 2, 2468, 5),
)


@dataclass(frozen=True, eq=False)
class SubsystemModel:
    """State-space model of one gate+reach pair.

    a, b, e, g are the local dynamics, offtake and external-flow input
    columns.  a_down_col / b_down_col are coupling templates toward the
    downstream neighbour: a_down_col multiplies the neighbour's newest flow
    state (first slot) and b_down_col its flow increment.  Both are absent
    for the last reach.
    """

    index: int
    delay: int
    gain: float  # T_c / A_s
    a: np.ndarray
    b: np.ndarray
    e: np.ndarray
    g: np.ndarray
    a_down_col: np.ndarray | None
    b_down_col: np.ndarray | None
    is_last: bool

    @property
    def n(self):
        return self.delay + 1

    @property
    def level_row(self):
        return self.delay


def build_subsystem(params: ReachParams, t_sample: float, is_last: bool) -> SubsystemModel:
    """Build the augmented-state model of one reach from its parameters."""
    if t_sample <= 0.0:
        raise ValueError("t_sample must be positive")
    d = params.delay_steps
    n = d + 1
    gain = t_sample / params.backwater_area

    a = np.zeros((n, n))
    b = np.zeros((n, 1))
    # Flow delay line: slot 0 integrates the gate increment, later slots shift.
    a[0, 0] = 1.0
    b[0, 0] = 1.0
    for j in range(1, d):
        a[j, j - 1] = 1.0
    # Level row: integrates the delayed inflow q(k-d) (slot d-1).
    a[d, d - 1] = gain
    a[d, d] = 1.0

    e = np.zeros((n, 1))
    e[d, 0] = -gain
    g = np.zeros((n, 1))
    g[d, 0] = -gain

    if is_last:
        a_down = None
        b_down = None
    else:
        a_down = np.zeros((n, 1))
        a_down[d, 0] = -gain
        b_down = np.zeros((n, 1))
        b_down[d, 0] = -gain

    return SubsystemModel(
        index=params.index,
        delay=d,
        gain=gain,
        a=a,
        b=b,
        e=e,
        g=g,
        a_down_col=a_down,
        b_down_col=b_down,
        is_last=is_last,
    )


def build_chain(reaches=DEZ_REACHES, t_sample=300.0):
    """Build all subsystem models for a chain of reaches."""
    reaches = tuple(reaches)
    for pos, r in enumerate(reaches, start=1):
        if r.index != pos:
            raise ValueError("reach indices must be contiguous starting at 1")
    n = len(reaches)
    return tuple(
        build_subsystem(r, t_sample, is_last=(r.index == n)) for r in reaches
    )


def neighborhood(i: int, n: int) -> frozenset:
    """Subsystems whose state or input affects reach i: {i+1}, empty for i = n."""
    if not 1 <= i <= n:
        raise ValueError(f"index {i} out of range 1..{n}")
    return frozenset() if i == n else frozenset({i + 1})


@dataclass(frozen=True, eq=False)
class CoalitionModel:
    """Stacked model of a connected group of subsystems.

    xi(k+1) = Xi xi + Up u + Phi rho + Psi w

    where rho stacks the members' offtakes and w holds one channel per
    coupling to a non-member: the value of channel c is the flow
    q_s(k-1) + dq_s(k) at the external source gate coupling_sources[c].
    gamma selects the members' level errors.
    """

    members: tuple
    Xi: np.ndarray
    Up: np.ndarray
    Phi: np.ndarray
    Psi: np.ndarray
    gamma: np.ndarray
    coupling_sources: tuple
    offsets: dict
    delays: tuple

    @property
    def n(self):
        return self.Xi.shape[0]

    @property
    def m(self):
        return self.Up.shape[1]

    @property
    def n_channels(self):
        return self.Psi.shape[1]

    def member_slice(self, s):
        off = self.offsets[s]
        return slice(off, off + self.delays[self.members.index(s)] + 1)

    def level_rows(self):
        """State indices of the member level errors, in member order."""
        return [self.offsets[s] + d for s, d in zip(self.members, self.delays)]

    def flow_rows(self):
        """State indices of every flow slot (all sections), in member order."""
        rows = []
        for s, d in zip(self.members, self.delays):
            rows.extend(range(self.offsets[s], self.offsets[s] + d))
        return rows

    def gate_flow_rows(self):
        """State indices of the newest flow slot q_s(k-1) per member."""
        return [self.offsets[s] for s in self.members]

    def flow_selector(self):
        rows = self.flow_rows()
        sel = np.zeros((len(rows), self.n))
        sel[np.arange(len(rows)), rows] = 1.0
        return sel

    def gate_flow_selector(self):
        rows = self.gate_flow_rows()
        sel = np.zeros((len(rows), self.n))
        sel[np.arange(len(rows)), rows] = 1.0
        return sel

    def coupling_matrices(self, other):
        """(Xi_ij, Up_ij) expressing this coalition's dependence on `other`.

        Routed through the Psi channels: channel c with source s contributes
        Psi[:, c] times the row selecting q_s(k-1) in other's state (and the
        row selecting dq_s in other's input).
        """
        xi_ij = np.zeros((self.n, other.n))
        up_ij = np.zeros((self.n, other.m))
        for c, s in enumerate(self.coupling_sources):
            if s in other.offsets:
                xi_ij[:, other.offsets[s]] += self.Psi[:, c]
                up_ij[:, other.members.index(s)] += self.Psi[:, c]
        return xi_ij, up_ij


def build_coalition_model(subsystems, members, partition) -> CoalitionModel:
    """Assemble the stacked model of one coalition of a partition.

    `subsystems` lists every subsystem model in chain order.  Couplings
    between members are absorbed into Xi/Up; couplings toward non-members
    become unit disturbance channels in Psi.  Members need not be
    contiguous.
    """
    members = tuple(sorted(members))
    blocks = [tuple(sorted(b)) for b in partition]
    if members not in blocks:
        raise ValueError(f"coalition {members} is not a block of the partition")
    by_index = {s.index: s for s in subsystems}
    for s in members:
        if s not in by_index:
            raise ValueError(f"member {s} not found among subsystems")

    offsets = {}
    off = 0
    delays = []
    for s in members:
        offsets[s] = off
        off += by_index[s].n
        delays.append(by_index[s].delay)
    n = off
    m = len(members)

    Xi = np.zeros((n, n))
    Up = np.zeros((n, m))
    Phi = np.zeros((n, m))
    psi_cols = []
    sources = []

    for col, s in enumerate(members):
        sub = by_index[s]
        sl = slice(offsets[s], offsets[s] + sub.n)
        Xi[sl, sl] = sub.a
        Up[sl, col] = sub.b[:, 0]
        Phi[sl, col] = sub.e[:, 0]
        if sub.is_last:
            continue
        down = s + 1
        if down in offsets:
            Xi[sl, offsets[down]] += sub.a_down_col[:, 0]
            Up[sl, members.index(down)] += sub.b_down_col[:, 0]
        else:
            col_vec = np.zeros(n)
            col_vec[sl] = sub.g[:, 0]
            psi_cols.append(col_vec)
            sources.append(down)

    Psi = np.column_stack(psi_cols) if psi_cols else np.zeros((n, 0))
    gamma = np.zeros((m, n))
    for row, s in enumerate(members):
        gamma[row, offsets[s] + by_index[s].delay] = 1.0

    return CoalitionModel(
        members=members,
        Xi=Xi,
        Up=Up,
        Phi=Phi,
        Psi=Psi,
        gamma=gamma,
        coupling_sources=tuple(sources),
        offsets=offsets,
        delays=tuple(delays),
    )


def assemble_global(subsystems) -> CoalitionModel:
    """The whole chain as a single coalition (no external channels)."""
    members = tuple(s.index for s in subsystems)
    return build_coalition_model(subsystems, members, (members,))


def steady_state(subsystems, offtakes):
    """Steady flows and levels for constant offtakes: flows telescope upstream.

    Returns (flows, state) where flows[i] is the gate flow of reach i+1 and
    state is the stacked global state with all level errors zero.
    """
    offtakes = np.asarray(offtakes, dtype=float)
    n_sub = len(subsystems)
    if offtakes.shape[0] != n_sub:
        raise ValueError("one offtake per reach required")
    flows = np.cumsum(offtakes[::-1])[::-1]
    state = []
    for sub, q in zip(subsystems, flows):
        state.extend([q] * sub.delay)
        state.append(0.0)
    return flows, np.array(state)
