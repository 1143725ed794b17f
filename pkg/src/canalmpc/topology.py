"""Communication topology over the chain of agents and induced partitions.

The link universe contains one link per adjacent pair: link i joins agents
i and i+1 (i = 1..N-1).  Enabling a set of links partitions the agent set
into connected components (coalitions).  Traces serialize a topology as a
bit-string of link flags ordered upstream to downstream.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Topology:
    """An enabled-link set over a chain of `n_agents` nodes."""

    n_agents: int
    enabled: frozenset

    def __post_init__(self):
        if self.n_agents < 1:
            raise ValueError("need at least one agent")
        if not isinstance(self.enabled, frozenset):
            object.__setattr__(self, "enabled", frozenset(self.enabled))
        for link in self.enabled:
            if not 1 <= link <= self.n_agents - 1:
                raise ValueError(f"link {link} outside universe 1..{self.n_agents - 1}")

    @property
    def n_links(self):
        return len(self.enabled)

    def bits(self) -> str:
        """Link flags as a string, upstream to downstream."""
        return "".join(
            "1" if i in self.enabled else "0" for i in range(1, self.n_agents)
        )

    def toggled(self, link: int) -> "Topology":
        if link in self.enabled:
            return Topology(self.n_agents, self.enabled - {link})
        return Topology(self.n_agents, self.enabled | {link})

    def sort_key(self):
        """Orders by link count, then lexicographic bit-string."""
        return (self.n_links, self.bits())


def full_topology(n_agents: int) -> Topology:
    return Topology(n_agents, frozenset(range(1, n_agents)))


def empty_topology(n_agents: int) -> Topology:
    return Topology(n_agents, frozenset())


def topology_from_bits(bits: str) -> Topology:
    if set(bits) - {"0", "1"}:
        raise ValueError(f"invalid topology bit-string {bits!r}")
    enabled = frozenset(i + 1 for i, c in enumerate(bits) if c == "1")
    return Topology(len(bits) + 1, enabled)


@dataclass(frozen=True)
class Partition:
    """Disjoint coalitions covering all agents, sorted by smallest member."""

    blocks: tuple

    def __post_init__(self):
        blocks = tuple(tuple(sorted(b)) for b in self.blocks)
        blocks = tuple(sorted(blocks, key=lambda b: b[0]))
        object.__setattr__(self, "blocks", blocks)
        seen = set()
        for b in blocks:
            if not b:
                raise ValueError("empty coalition")
            if seen & set(b):
                raise ValueError("coalitions overlap")
            seen |= set(b)

    def __len__(self):
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)

    def block_of(self, agent: int) -> tuple:
        for b in self.blocks:
            if agent in b:
                return b
        raise KeyError(f"agent {agent} not in partition")

    def key(self):
        return self.blocks


def partition_of(topology: Topology, n_agents: int | None = None) -> Partition:
    """Connected components induced by the enabled links of a chain graph."""
    n = topology.n_agents if n_agents is None else n_agents
    if n != topology.n_agents:
        raise ValueError("agent count does not match topology")
    blocks = []
    current = [1]
    for i in range(1, n):
        if i in topology.enabled:
            current.append(i + 1)
        else:
            blocks.append(tuple(current))
            current = [i + 1]
    blocks.append(tuple(current))
    return Partition(tuple(blocks))


def candidate_set(current: Topology) -> list:
    """The incumbent plus every topology differing in exactly one link."""
    return [current] + [current.toggled(i) for i in range(1, current.n_agents)]


def network_cost_total(topology: Topology, c_link: float, t_lambda: int) -> float:
    """Total network usage cost over a supervisory interval of t_lambda steps."""
    if c_link < 0.0:
        raise ValueError("c_link must be nonnegative")
    return c_link * topology.n_links * t_lambda


def incident_links(topology: Topology, agent: int) -> int:
    """Number of enabled links directly connecting `agent` to others."""
    if not 1 <= agent <= topology.n_agents:
        raise ValueError(f"agent {agent} out of range")
    count = 0
    if agent - 1 in topology.enabled:
        count += 1
    if agent in topology.enabled and agent <= topology.n_agents - 1:
        count += 1
    return count


def network_cost_agent(topology: Topology, agent: int, c_link: float, n_p: int) -> float:
    """Agent share of the network cost; each link is split between its ends."""
    return n_p * (c_link / 2.0) * incident_links(topology, agent)


def link_activity_matrix(bit_strings) -> np.ndarray:
    """Steps-by-links 0/1 matrix from a sequence of topology bit-strings."""
    return np.array([[int(c) for c in bits] for bits in bit_strings], dtype=int)
