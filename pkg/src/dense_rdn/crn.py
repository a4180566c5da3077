"""Dense chemical reaction networks and mass-action kinetics.

A dense network contains every reaction matching the enabled prototypes:

* ``P1``: ``A + B <-> 2C`` (A, B, C distinct; the pair {A, B} is unordered)
* ``P2``: ``A <-> B`` (unordered pair)
* ``P3``: ``A + 2B <-> 3B`` (ordered pair, autocatalytic in B)

Each reversible reaction is stored as two directed reactions. Directed index
``j < n_reversible`` is the forward direction of reversible reaction ``j``;
``j + n_reversible`` is its reverse. Rate vectors follow the same layout
(``concat(k_f, k_r)``).
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field
from itertools import combinations, permutations
from math import comb
from typing import Iterable, Sequence

import numpy as np

from dense_rdn.diffcore import Tensor, ops
from dense_rdn.diffcore.tensor import as_tensor

PROTOTYPES = ("P1", "P2", "P3")
NEGATIVE_TOLERANCE = -1e-12


@dataclass(frozen=True)
class Reaction:
    prototype: str
    reactants: tuple[int, ...]  # species indices with multiplicity, sorted
    products: tuple[int, ...]


@dataclass(frozen=True)
class CrnSpec:
    n_species: int
    prototypes: tuple[str, ...]
    reactions: tuple[Reaction, ...]
    # derived matrices, see StoichMatrices in build_dense_crn
    order: np.ndarray = field(repr=False, compare=False)
    net: np.ndarray = field(repr=False, compare=False)
    table: np.ndarray = field(repr=False, compare=False)

    @property
    def n_reversible(self) -> int:
        return len(self.reactions)

    @property
    def n_directed(self) -> int:
        return 2 * len(self.reactions)

    @property
    def species_names(self) -> list[str]:
        return species_names(self.n_species)

    def index(self, reactants: Sequence[int], products: Sequence[int]) -> tuple[int, str]:
        """Locate a reaction; returns (reversible index, "f" or "r")."""
        key_r, key_p = tuple(sorted(reactants)), tuple(sorted(products))
        for j, rx in enumerate(self.reactions):
            if (rx.reactants, rx.products) == (key_r, key_p):
                return j, "f"
            if (rx.products, rx.reactants) == (key_r, key_p):
                return j, "r"
        raise KeyError(f"no reaction {key_r} -> {key_p}")

    def directed(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        fwd = [(r.reactants, r.products) for r in self.reactions]
        return fwd + [(p, r) for r, p in fwd]


def species_names(n: int) -> list[str]:
    letters = string.ascii_uppercase
    if n <= len(letters):
        return list(letters[:n])
    return [f"S{i}" for i in range(n)]


def _enumerate(n: int, prototypes: Iterable[str]) -> list[Reaction]:
    out: list[Reaction] = []
    if "P1" in prototypes:
        for a, b in combinations(range(n), 2):
            for c in range(n):
                if c not in (a, b):
                    out.append(Reaction("P1", (a, b), (c, c)))
    if "P2" in prototypes:
        for a, b in combinations(range(n), 2):
            out.append(Reaction("P2", (a,), (b,)))
    if "P3" in prototypes:
        for a, b in permutations(range(n), 2):
            out.append(Reaction("P3", tuple(sorted((a, b, b))), (b, b, b)))
    return out


def build_dense_crn(n_species: int, prototypes: Sequence[str] | None = None) -> CrnSpec:
    """Enumerate the dense network over ``n_species`` for the given prototypes.

    ``prototypes=None`` enables all three; with fewer than three species the
    ``P1`` set is then simply empty. Naming ``P1`` explicitly with fewer than
    three species is an error.
    """
    if n_species < 2:
        raise ValueError("a dense CRN needs at least 2 species")
    if prototypes is None:
        protos = PROTOTYPES
    else:
        protos = tuple(p for p in PROTOTYPES if p in set(prototypes))
        unknown = set(prototypes) - set(PROTOTYPES)
        if unknown:
            raise ValueError(f"unknown prototypes {sorted(unknown)}")
        if "P1" in protos and n_species < 3:
            raise ValueError("prototype P1 (A + B <-> 2C) needs at least 3 species")
        if not protos:
            raise ValueError("no prototypes enabled")
    reactions = tuple(_enumerate(n_species, protos))
    if len(set((r.reactants, r.products) for r in reactions)) != len(reactions):
        raise AssertionError("duplicate reversible reactions")
    order, net, table = _matrices(n_species, reactions)
    return CrnSpec(n_species, protos, reactions, order, net, table)


def _matrices(n: int, reactions: Sequence[Reaction]):
    directed = [(r.reactants, r.products) for r in reactions]
    directed += [(p, r) for r, p in directed]
    m = len(directed)
    order = np.zeros((m, n), dtype=np.int64)
    net = np.zeros((m, n), dtype=np.float64)
    table = np.full((m, 3), n, dtype=np.int64)
    for j, (reac, prod) in enumerate(directed):
        for i in reac:
            order[j, i] += 1
            net[j, i] -= 1
        for i in prod:
            net[j, i] += 1
        table[j, : len(reac)] = reac
    for arr in (order, net, table):
        arr.setflags(write=False)
    return order, net, table


def expected_counts(n: int) -> tuple[int, int, int]:
    """Closed-form reversible counts (P1, P2, P3) for ``n`` species."""
    return comb(n, 2) * (n - 2), comb(n, 2), n * (n - 1)


def rate_vector(k_f, k_r) -> Tensor:
    """Directed rate constants ``concat(k_f, k_r)``."""
    return ops.concat([as_tensor(k_f), as_tensor(k_r)], axis=0)


def reaction_rates(x, crn: CrnSpec, k) -> Tensor:
    """Directed mass-action rates per cell.

    ``x``: [B, S, U, V] concentrations; ``k``: directed rate constants [2R].
    Returns [B, 2R, U, V].
    """
    x = as_tensor(x)
    if x.shape[1] != crn.n_species:
        raise ValueError(f"state has {x.shape[1]} species, network has {crn.n_species}")
    if np.any(x.value < NEGATIVE_TOLERANCE):
        raise ValueError(f"negative concentration {x.value.min():.3e} in mass-action input")
    return ops.mass_action(x, k, crn.table)


def reaction_delta(x, crn: CrnSpec, k) -> Tensor:
    """Net concentration change per unit time from reactions, ``S^T nu`` per cell."""
    return ops.channel_mix(reaction_rates(x, crn, k), crn.net)


def format_reactions(crn: CrnSpec, k_f=None, k_r=None) -> str:
    """One reaction per line, e.g. ``1 A + 1 B <-> 2 C | kf=0.001 kr=0.001``."""
    names = crn.species_names

    def side(idx: tuple[int, ...]) -> str:
        counts: dict[int, int] = {}
        for i in idx:
            counts[i] = counts.get(i, 0) + 1
        return " + ".join(f"{c} {names[i]}" for i, c in sorted(counts.items()))

    lines = []
    for j, rx in enumerate(crn.reactions):
        line = f"{side(rx.reactants)} <-> {side(rx.products)}"
        if k_f is not None and k_r is not None:
            line += f" | kf={float(np.asarray(k_f)[j])!r} kr={float(np.asarray(k_r)[j])!r}"
        lines.append(line)
    return "\n".join(lines) + "\n"
