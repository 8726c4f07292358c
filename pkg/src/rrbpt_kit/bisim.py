"""Branching equivalences on constrained transition systems.

Two matching disciplines are supported.  The classic one matches a challenge
by a single (possibly more general, possibly unknown-sender) transition after
silent steps.  The reliable one additionally lets a single challenge be met by
a family of transitions whose constraints partition the challenge's topology
set; the partition clause is decided by per-topology coverage, which is
equivalent because transitions are closed under constraint refinement.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

from .constraints import (
    Constraint,
    Topology,
    UNKNOWN,
    denotation,
    grounded_denotation,
    ground_unknown,
    preceq,
    substitute as subst_c,
)
from .sos import Clts, Label, Transition, tau_reach
from .terms import Action, NetSnd, NetRcv, NetTerm, Tau, pretty


class UniverseMismatch(ValueError):
    pass


class RelationMode(enum.Enum):
    BRANCHING = "b"
    ROOTED_BRANCHING = "rb"
    BRANCHING_RELIABLE = "br"
    ROOTED_BRANCHING_RELIABLE = "rbr"
    SEMI_BRANCHING_RELIABLE = "sbr"

    @property
    def rooted(self) -> bool:
        return self in (RelationMode.ROOTED_BRANCHING, RelationMode.ROOTED_BRANCHING_RELIABLE)

    @property
    def reliable(self) -> bool:
        return self is not RelationMode.BRANCHING and self is not RelationMode.ROOTED_BRANCHING

    @property
    def base(self) -> "RelationMode":
        if self is RelationMode.ROOTED_BRANCHING:
            return RelationMode.BRANCHING
        if self is RelationMode.ROOTED_BRANCHING_RELIABLE:
            return RelationMode.BRANCHING_RELIABLE
        return self


@dataclass
class Counterexample:
    side: str
    state: str
    label: str
    topology: Optional[str] = None
    reason: str = ""

    def render(self) -> str:
        extra = f" (unmatched topology {self.topology})" if self.topology else ""
        return (f"{self.side} state {self.state} offers {self.label}, "
                f"which the other side cannot match{extra}: {self.reason}")


@dataclass
class BisimVerdict:
    related: bool
    mode: RelationMode
    witness: Optional[dict] = None
    counterexample: Optional[Counterexample] = None

    def render(self) -> str:
        if self.related:
            n = len(self.witness["pairs"]) if self.witness else 0
            return f"related ({self.mode.value}); witness relation with {n} pairs"
        return f"not related ({self.mode.value}); {self.counterexample.render()}"

    def to_json(self) -> dict:
        doc = {"related": self.related, "mode": self.mode.value}
        if self.related and self.witness is not None:
            doc["witness"] = self.witness
        if not self.related and self.counterexample is not None:
            ce = self.counterexample
            doc["counterexample"] = {
                "side": ce.side, "state": ce.state, "label": ce.label,
                "topology": ce.topology, "reason": ce.reason,
            }
        return doc


def angle_counterparts(label: Label, loc: tuple[str, ...]) -> frozenset[Label]:
    """A label plus its concretizations when the sender is unknown."""
    out = {label}
    a = label.action
    if isinstance(a, NetSnd) and a.src == UNKNOWN and isinstance(label.guard, Constraint):
        for addr in loc:
            guard = subst_c(label.guard, addr, UNKNOWN)
            if guard.has_positive_self_link():
                continue
            if any(l.src == l.dst for l in guard.literals):
                continue
            out.add(Label(guard, NetSnd(a.msg, addr)))
    return frozenset(out)


# ---------------------------------------------------------------------------


class _Checker:
    """Greatest-fixpoint computation over the disjoint union of two systems."""

    def __init__(self, c1: Clts, c2: Clts, mode: RelationMode):
        if c1.loc != c2.loc or c1.msgs != c2.msgs:
            raise UniverseMismatch(
                f"universes differ: {c1.loc}/{c1.msgs} vs {c2.loc}/{c2.msgs}")
        self.mode = mode
        self.loc = c1.loc
        self.states = [("L", s) for s in c1.states] + [("R", s) for s in c2.states]
        self.trans: dict[tuple, list[tuple[Label, tuple]]] = {s: [] for s in self.states}
        for side, clts in (("L", c1), ("R", c2)):
            for tr in clts.transitions:
                self.trans[(side, tr.src)].append((tr.label, (side, tr.dst)))
        self.init1 = ("L", c1.initial)
        self.init2 = ("R", c2.initial)
        self._tau_reach: dict[tuple, frozenset] = {}
        for s in self.states:
            seen = {s}
            frontier = [s]
            while frontier:
                x = frontier.pop()
                for label, dst in self.trans[x]:
                    if label.is_tau() and dst not in seen:
                        seen.add(dst)
                        frontier.append(dst)
            self._tau_reach[s] = frozenset(seen)
        self.rel: set[frozenset] = set()

    # -- label machinery ----------------------------------------------------

    def challenge_instances(self, label: Label) -> list[tuple[Constraint, Action]]:
        """Ground instances of a challenge label (sender and '?' resolved)."""
        a = label.action
        assert isinstance(label.guard, Constraint)
        if isinstance(a, NetSnd) and a.src == UNKNOWN:
            out = []
            for addr in self.loc:
                g = subst_c(label.guard, addr, UNKNOWN)
                if g.has_positive_self_link() or any(l.src == l.dst for l in g.literals):
                    continue
                out.append((g, NetSnd(a.msg, addr)))
            return out
        return [(g, a) for g in ground_unknown(label.guard, self.loc)]

    def covers(self, stored: Label, ground_action: Action, gamma: Topology) -> bool:
        """Does some refinement instance of ``stored`` realize the ground
        action under topology ``gamma``?"""
        if not isinstance(stored.guard, Constraint):
            return False
        sa = stored.action
        if sa == ground_action:
            return gamma in grounded_denotation(stored.guard, self.loc)
        if (isinstance(sa, NetSnd) and sa.src == UNKNOWN
                and isinstance(ground_action, NetSnd) and sa.msg == ground_action.msg):
            g = subst_c(stored.guard, ground_action.src, UNKNOWN)
            if g.has_positive_self_link() or any(l.src == l.dst for l in g.literals):
                return False
            return gamma in denotation(g, self.loc)
        return False

    def single_match(self, challenge: Label, stored: Label) -> bool:
        """Classic matching: the challenge is a refinement instance of the
        stored label, possibly concretizing an unknown sender."""
        if not isinstance(challenge.guard, Constraint) or not isinstance(stored.guard, Constraint):
            return challenge == stored
        ca, sa = challenge.action, stored.action
        if ca == sa:
            return preceq(challenge.guard, stored.guard, self.loc)
        if (isinstance(ca, NetSnd) and ca.src == UNKNOWN
                and isinstance(sa, NetSnd) and sa.msg == ca.msg and sa.src != UNKNOWN):
            g = subst_c(challenge.guard, sa.src, UNKNOWN)
            return preceq(g, stored.guard, self.loc)
        if (isinstance(sa, NetSnd) and sa.src == UNKNOWN
                and isinstance(ca, NetSnd) and ca.msg == sa.msg and ca.src != UNKNOWN):
            g = subst_c(stored.guard, ca.src, UNKNOWN)
            if g.has_positive_self_link():
                return False
            return preceq(challenge.guard, g, self.loc)
        return False

    # -- transfer conditions --------------------------------------------------

    def related(self, x, y) -> bool:
        return x == y or frozenset((x, y)) in self.rel

    def stutter_ok(self, label: Label) -> bool:
        if self.mode.base is RelationMode.BRANCHING:
            return label.is_tau() or isinstance(label.action, NetRcv)
        return label.is_tau()

    def challenge_met(self, s, label: Label, s_next, t) -> bool:
        # first clause: invisible challenge absorbed by stuttering
        if self.stutter_ok(label):
            if self.mode.base is RelationMode.SEMI_BRANCHING_RELIABLE:
                for t2 in self._tau_reach[t]:
                    if self.related(s, t2) and self.related(s_next, t2):
                        return True
            elif self.related(s_next, t):
                return True
        if not isinstance(label.guard, Constraint):
            return False
        if self.mode.base is RelationMode.BRANCHING:
            for t2 in self._tau_reach[t]:
                if not self.related(s, t2):
                    continue
                for stored, t3 in self.trans[t2]:
                    if self.single_match(label, stored) and self.related(s_next, t3):
                        return True
            return False
        # reliable discipline: per-topology coverage
        for guard_g, action_g in self.challenge_instances(label):
            needed = denotation(guard_g, self.loc)
            if not needed:
                continue
            covered = set()
            for t2 in self._tau_reach[t]:
                if not self.related(s, t2):
                    continue
                for stored, t3 in self.trans[t2]:
                    if not self.related(s_next, t3):
                        continue
                    for gamma in needed:
                        if gamma not in covered and self.covers(stored, action_g, gamma):
                            covered.add(gamma)
            if len(covered) != len(needed):
                return False
        return True

    def find_unmatched(self, s, label, s_next, t):
        """Diagnostic twin of challenge_met: the first uncovered topology."""
        if not isinstance(label.guard, Constraint):
            return None
        for guard_g, action_g in self.challenge_instances(label):
            for gamma in sorted(denotation(guard_g, self.loc)):
                hit = False
                for t2 in self._tau_reach[t]:
                    if not self.related(s, t2):
                        continue
                    for stored, t3 in self.trans[t2]:
                        if self.related(s_next, t3) and self.covers(stored, action_g, gamma):
                            hit = True
                            break
                    if hit:
                        break
                if not hit:
                    return gamma
        return None

    # -- fixpoint -------------------------------------------------------------

    def pair_ok(self, x, y) -> bool:
        for s, t in ((x, y), (y, x)):
            for label, s_next in self.trans[s]:
                if not self.challenge_met(s, label, s_next, t):
                    return False
        return True

    def compute(self) -> None:
        self.rel = {frozenset((x, y)) for i, x in enumerate(self.states)
                    for y in self.states[i + 1:]}
        changed = True
        while changed:
            changed = False
            for pair in sorted(self.rel, key=lambda p: sorted(map(str, p))):
                x, y = tuple(pair) if len(pair) == 2 else (next(iter(pair)),) * 2
                if not self.pair_ok(x, y):
                    self.rel.discard(pair)
                    changed = True

    # -- root conditions -------------------------------------------------------

    def root_ok(self, x, y) -> Optional[Counterexample]:
        for (s, t), side in (((x, y), "left"), ((y, x), "right")):
            for label, s_next in self.trans[s]:
                matched = False
                for stored, t_next in self.trans[t]:
                    if self.single_match(label, stored) and self.related(s_next, t_next):
                        matched = True
                        break
                if not matched:
                    return Counterexample(
                        side=side, state=pretty(s[1]), label=label.render(),
                        reason="no single matching root transition with equivalent targets")
        return None


def check_bisim(c1: Clts, c2: Clts, mode: RelationMode) -> BisimVerdict:
    """Decide the chosen behavioral relation between two explored systems."""
    checker = _Checker(c1, c2, mode.base)
    checker.compute()
    init1, init2 = checker.init1, checker.init2

    if mode.rooted:
        ce = checker.root_ok(init1, init2)
        if ce is not None:
            return BisimVerdict(False, mode, counterexample=ce)
        return BisimVerdict(True, mode, witness=_witness(checker))

    if checker.related(init1, init2):
        return BisimVerdict(True, mode, witness=_witness(checker))

    # reconstruct a distinguishing challenge on the initial pair, preferring
    # observable challenges over self-referential stutter failures
    for (s, t), side in (((init1, init2), "left"), ((init2, init1), "right")):
        challenges = sorted(checker.trans[s],
                            key=lambda p: (checker.stutter_ok(p[0]), p[0].sort_key()))
        for label, s_next in challenges:
            if not checker.challenge_met(s, label, s_next, t):
                gamma = checker.find_unmatched(s, label, s_next, t)
                return BisimVerdict(False, mode, counterexample=Counterexample(
                    side=side, state=pretty(s[1]), label=label.render(),
                    topology=gamma.render() if gamma is not None else None,
                    reason="challenge fails the transfer condition"))
    # initial states distinguished only through deeper pairs; report generically
    return BisimVerdict(False, mode, counterexample=Counterexample(
        side="left", state=pretty(init1[1]), label="-",
        reason="initial states are separated by the greatest fixpoint"))


def _witness(checker: _Checker) -> dict:
    pairs = []
    for pair in sorted(checker.rel, key=lambda p: sorted(map(str, p))):
        items = sorted(pair, key=str)
        if len(items) == 1:
            items = items * 2
        pairs.append([f"{side}:{pretty(term)}" for side, term in items])
    coverage: dict[str, list[str]] = {}
    for label, s_next in checker.trans[checker.init1]:
        if not isinstance(label.guard, Constraint):
            continue
        used = set()
        for cg, ag in checker.challenge_instances(label):
            for gamma in denotation(cg, checker.loc):
                for t2 in checker._tau_reach[checker.init2]:
                    if not checker.related(checker.init1, t2):
                        continue
                    for stored, t3 in checker.trans[t2]:
                        if checker.related(s_next, t3) and checker.covers(stored, ag, gamma):
                            used.add(stored.render())
        if used:
            coverage[label.render()] = sorted(used)
    return {"pairs": pairs, "coverage": coverage}


def check_semi_branching_coincidence(c1: Clts, c2: Clts) -> bool:
    """Semi-branching and branching reliable verdicts must always agree."""
    a = check_bisim(c1, c2, RelationMode.BRANCHING_RELIABLE).related
    b = check_bisim(c1, c2, RelationMode.SEMI_BRANCHING_RELIABLE).related
    return a == b
