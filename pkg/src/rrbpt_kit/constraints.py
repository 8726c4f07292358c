"""Network constraints over one-hop links, their ordering and topology semantics.

A network constraint is a set of directed (dis)connectivity literals such as
``A->B`` ("B hears A directly") or ``A-/->B``.  Absence of a literal means
absence of information, so the empty constraint denotes every topology.  The
unknown address ``?`` stands for a node whose identity is not fixed yet
(typically the sender of a message, or an address concealed by hiding).

Multi-hop constraints (``A=>B`` / ``A=/=>B``) talk about reachability in the
transitive closure of a topology and are used by abstract specification terms.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Iterator

UNKNOWN = "?"

#: Hard cap for explicit topology enumeration (2^(n*(n-1)) topologies).
MAX_ENUM_ADDRESSES = 5


class UniverseTooLarge(ValueError):
    """Raised when topology enumeration is requested for too many addresses."""


@dataclass(frozen=True, order=True)
class Link:
    """One-hop literal: ``src->dst`` when connected, ``src-/->dst`` otherwise."""

    src: str
    dst: str
    connected: bool = True

    def negated(self) -> "Link":
        return Link(self.src, self.dst, not self.connected)

    def render(self) -> str:
        arrow = "->" if self.connected else "-/->"
        return f"{self.src}{arrow}{self.dst}"


def _normalize_links(literals: Iterable[Link]) -> frozenset[Link]:
    # ?->? literals carry no groundable information (a single address cannot
    # broadcast to itself) and negative self-links are vacuously true; both
    # are dropped at construction.  Positive self-links are kept: they denote
    # the empty topology set and mark a transition as unfirable.
    kept = set()
    for lk in literals:
        if lk.src == lk.dst and (lk.src == UNKNOWN or not lk.connected):
            continue
        kept.add(lk)
    return frozenset(kept)


@dataclass(frozen=True)
class Constraint:
    """A set of one-hop (dis)connectivity literals."""

    literals: frozenset[Link]

    def __iter__(self) -> Iterator[Link]:
        return iter(self.literals)

    def __len__(self) -> int:
        return len(self.literals)

    def __contains__(self, lk: Link) -> bool:
        return lk in self.literals

    def sort_key(self):
        return tuple(sorted((l.src, l.dst, not l.connected) for l in self.literals))

    def __lt__(self, other: "Constraint") -> bool:
        return self.sort_key() < other.sort_key()

    def has_unknown(self) -> bool:
        return any(UNKNOWN in (l.src, l.dst) for l in self.literals)

    def has_positive_self_link(self) -> bool:
        return any(l.src == l.dst and l.connected for l in self.literals)

    def addresses(self) -> frozenset[str]:
        out = set()
        for l in self.literals:
            out.add(l.src)
            out.add(l.dst)
        out.discard(UNKNOWN)
        return frozenset(out)

    def render(self) -> str:
        inner = ", ".join(l.render() for l in sorted(self.literals))
        return "{" + inner + "}"

    def __str__(self) -> str:
        return self.render()


def constraint(*literals: Link | tuple) -> Constraint:
    """Build a constraint; tuples ``(src, dst)`` / ``(src, dst, bool)`` allowed."""
    links = []
    for l in literals:
        if isinstance(l, Link):
            links.append(l)
        else:
            links.append(Link(*l))
    return Constraint(_normalize_links(links))


EMPTY = constraint()


def well_formed(literals: Iterable[Link]) -> bool:
    """No ordered pair of known addresses may occur with both polarities."""
    seen: dict[tuple[str, str], bool] = {}
    for l in literals:
        if UNKNOWN in (l.src, l.dst):
            continue
        key = (l.src, l.dst)
        if key in seen and seen[key] != l.connected:
            return False
        seen[key] = l.connected
    return True


def union_wf(c1: Constraint, c2: Constraint) -> Constraint | None:
    """Literal union of two constraints, or None when the union clashes.

    A clash signals that a composed transition (broadcast against a receive,
    joint receive, restriction) must be discarded.
    """
    merged = _normalize_links(c1.literals | c2.literals)
    if not well_formed(merged):
        return None
    return Constraint(merged)


def negate(c: Constraint) -> Constraint:
    return Constraint(_normalize_links(l.negated() for l in c.literals))


def substitute(c: Constraint, new: str, old: str) -> Constraint:
    """Replace every occurrence of address ``old`` by ``new``."""
    return Constraint(
        _normalize_links(
            Link(new if l.src == old else l.src, new if l.dst == old else l.dst, l.connected)
            for l in c.literals
        )
    )


def preceq(c1: Constraint, c2: Constraint, loc: tuple[str, ...]) -> bool:
    """Constraint order: c1 <= c2 when c1 refines (is at least as specific as) c2.

    c2's literals are contained in c1's, or substituting some known address for
    ``?`` in c2 yields a subset of c1.
    """
    if c2.literals <= c1.literals:
        return True
    if c2.has_unknown():
        for addr in loc:
            if substitute(c2, addr, UNKNOWN).literals <= c1.literals:
                return True
    return False


# ---------------------------------------------------------------------------
# Topologies

@dataclass(frozen=True, order=True)
class Topology:
    """A concrete directed graph over a declared address universe."""

    loc: tuple[str, ...]
    edges: frozenset[tuple[str, str]]

    def reaches(self, src: str, dst: str) -> bool:
        """Directed path of length >= 1 from src to dst."""
        frontier = [src]
        seen = set()
        while frontier:
            node = frontier.pop()
            for a, b in self.edges:
                if a == node and b not in seen:
                    if b == dst:
                        return True
                    seen.add(b)
                    frontier.append(b)
        return False

    def render(self) -> str:
        return "{" + ", ".join(f"{a}->{b}" for a, b in sorted(self.edges)) + "}"


def _check_universe(loc: tuple[str, ...]) -> None:
    if len(loc) > MAX_ENUM_ADDRESSES:
        raise UniverseTooLarge(
            f"topology enumeration over {len(loc)} addresses exceeds the "
            f"supported bound of {MAX_ENUM_ADDRESSES}"
        )


@lru_cache(maxsize=None)
def all_topologies(loc: tuple[str, ...]) -> tuple[Topology, ...]:
    _check_universe(loc)
    pairs = [(a, b) for a in loc for b in loc if a != b]
    out = []
    for n in range(len(pairs) + 1):
        for combo in itertools.combinations(pairs, n):
            out.append(Topology(loc, frozenset(combo)))
    return tuple(out)


def extract_constraint(g: Topology) -> Constraint:
    """The complete one-hop description of a topology."""
    literals = []
    for a in g.loc:
        for b in g.loc:
            if a != b:
                literals.append(Link(a, b, (a, b) in g.edges))
    return Constraint(frozenset(literals))


@lru_cache(maxsize=None)
def denotation(c: Constraint, loc: tuple[str, ...]) -> frozenset[Topology]:
    """All topologies over ``loc`` satisfying every literal of ``c``.

    ``c`` must be ground; unknown addresses are resolved by ground_unknown
    before asking for a denotation.
    """
    if c.has_unknown():
        raise ValueError(f"cannot enumerate topologies for {c}: contains '?'")
    out = []
    for g in all_topologies(loc):
        ok = True
        for l in c.literals:
            if ((l.src, l.dst) in g.edges) != l.connected:
                ok = False
                break
        if ok:
            out.append(g)
    return frozenset(out)


def ground_unknown(c: Constraint, loc: tuple[str, ...]) -> frozenset[Constraint]:
    """All well-formed groundings of ``?``, excluding self-link instantiations."""
    if not c.has_unknown():
        return frozenset([c])
    out = set()
    for addr in loc:
        raw = [
            Link(addr if l.src == UNKNOWN else l.src, addr if l.dst == UNKNOWN else l.dst, l.connected)
            for l in c.literals
        ]
        if any(l.src == l.dst for l in raw):
            continue
        if not well_formed(raw):
            continue
        out.add(Constraint(frozenset(raw)))
    return frozenset(out)


def grounded_denotation(c: Constraint, loc: tuple[str, ...]) -> frozenset[Topology]:
    """Union of denotations over every grounding of ``?``."""
    topos: set[Topology] = set()
    for g in ground_unknown(c, loc):
        topos |= denotation(g, loc)
    return frozenset(topos)


def is_partitioning(parts: list[Constraint], whole: Constraint, loc: tuple[str, ...]) -> bool:
    """Pairwise disjoint denotations that jointly exhaust the whole's denotation."""
    sets = [denotation(p, loc) for p in parts]
    union: set[Topology] = set()
    for s in sets:
        if union & s:
            return False
        union |= s
    return union == denotation(whole, loc)


# ---------------------------------------------------------------------------
# Multi-hop constraints

@dataclass(frozen=True, order=True)
class MultiHopLink:
    src: str
    dst: str
    reachable: bool = True

    def render(self) -> str:
        arrow = "=>" if self.reachable else "=/=>"
        return f"{self.src}{arrow}{self.dst}"


@dataclass(frozen=True)
class MultiHop:
    """A set of multi-hop (un)reachability literals."""

    literals: frozenset[MultiHopLink]

    def __iter__(self) -> Iterator[MultiHopLink]:
        return iter(self.literals)

    def sort_key(self):
        return tuple(sorted((l.src, l.dst, not l.reachable) for l in self.literals))

    def render(self) -> str:
        return "{" + ", ".join(l.render() for l in sorted(self.literals)) + "}"

    def __str__(self) -> str:
        return self.render()


def multihop(*literals: MultiHopLink | tuple) -> MultiHop:
    links = []
    for l in literals:
        if isinstance(l, MultiHopLink):
            links.append(l)
        else:
            links.append(MultiHopLink(*l))
    return MultiHop(frozenset(links))


def multihop_well_formed(m: MultiHop) -> bool:
    seen: dict[tuple[str, str], bool] = {}
    for l in m.literals:
        key = (l.src, l.dst)
        if key in seen and seen[key] != l.reachable:
            return False
        seen[key] = l.reachable
    return True


def topology_satisfies(g: Topology, m: MultiHop) -> bool:
    for l in m.literals:
        if g.reaches(l.src, l.dst) != l.reachable:
            return False
    return True


@lru_cache(maxsize=None)
def constraint_satisfies(c: Constraint, m: MultiHop, loc: tuple[str, ...]) -> bool:
    """Some topology consistent with ``c`` satisfies ``m``."""
    return any(topology_satisfies(g, m) for g in grounded_denotation(c, loc))
