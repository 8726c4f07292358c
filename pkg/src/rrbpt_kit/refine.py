"""Refinement of an implementation against a multi-hop specification.

The relation is indexed by an accumulated network constraint: silent steps of
the implementation accumulate their constraints (a run under a stable
topology), and the specification's multi-hop obligations are interpreted
against the topologies still consistent with what has accumulated.  A silent
step may stutter while some observable obligation of the specification remains
satisfiable; otherwise it must be matched to one of the specification's
multi-hop-guarded moves whose constraint it satisfies.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .constraints import (
    Constraint,
    EMPTY,
    MultiHop,
    constraint_satisfies,
    union_wf,
)
from .sos import Clts, Label, SosEngine
from .terms import (
    Choice,
    CPrefix,
    IAct,
    MPrefix,
    Name,
    NetTerm,
    Nil,
    Rec,
    Restrict,
    Specification,
    Tau,
    children,
    pretty,
)
from .bisim import UniverseMismatch, _Checker, RelationMode


SPEC_FRAGMENT = (Nil, MPrefix, CPrefix, Choice, Rec, Name)


def validate_spec_term(t: NetTerm) -> bool:
    """Specification fragment: prefixes, choice and recursion only."""
    if not isinstance(t, SPEC_FRAGMENT):
        return False
    return all(validate_spec_term(k) for k in children(t))


@dataclass
class RefinementStep:
    label: str
    accumulated: str
    state: str


@dataclass
class RefinementVerdict:
    refines: bool
    counterexample: list[RefinementStep] = field(default_factory=list)
    failure: str = ""

    def render(self) -> str:
        if self.refines:
            return "refines: yes"
        lines = ["refines: no"]
        for step in self.counterexample:
            lines.append(f"  --{step.label}-->  {step.state}   [accumulated {step.accumulated}]")
        lines.append(f"  blocked: {self.failure}")
        return "\n".join(lines)

    def to_json(self) -> dict:
        doc = {"refines": self.refines}
        if not self.refines:
            doc["counterexample"] = [
                {"label": s.label, "accumulated": s.accumulated, "state": s.state}
                for s in self.counterexample
            ]
            doc["failure"] = self.failure
        return doc


@dataclass(frozen=True)
class _Triple:
    impl: NetTerm
    spec: NetTerm
    acc: Constraint


class _RefineChecker:
    def __init__(self, impl: Clts, spec_clts: Clts, loc: tuple[str, ...]):
        if impl.loc != spec_clts.loc:
            raise UniverseMismatch(f"universes differ: {impl.loc} vs {spec_clts.loc}")
        self.loc = loc
        self.impl = impl
        self.spec = spec_clts
        self.impl_out: dict[NetTerm, list] = {s: [] for s in impl.states}
        for tr in impl.transitions:
            self.impl_out[tr.src].append((tr.label, tr.dst))
        self.spec_out: dict[NetTerm, list] = {s: [] for s in spec_clts.states}
        for tr in spec_clts.transitions:
            self.spec_out[tr.src].append((tr.label, tr.dst))
        self.alive: set[_Triple] = set()
        self.parent: dict[_Triple, tuple[_Triple, str]] = {}
        self._accum_cache: dict = {}
        # reuse the classic label-instance matcher for mixed (constraint) specs
        self._matcher = _Checker.__new__(_Checker)
        self._matcher.loc = loc
        self._matcher.mode = RelationMode.BRANCHING

    # -- spec state shape ----------------------------------------------------

    def _spec_moves(self, s):
        multi_iact, multi_tau, constr = [], [], []
        for label, dst in self.spec_out[s]:
            if isinstance(label.guard, MultiHop):
                if isinstance(label.action, IAct):
                    multi_iact.append((label, dst))
                else:
                    multi_tau.append((label, dst))
            else:
                constr.append((label, dst))
        return multi_iact, multi_tau, constr

    # -- reachable triples -----------------------------------------------------

    def explore(self, root: _Triple) -> None:
        self.alive = {root}
        frontier = [root]
        while frontier:
            tri = frontier.pop()
            for succ, label in self._successors(tri):
                if succ not in self.alive:
                    self.alive.add(succ)
                    self.parent[succ] = (tri, label)
                    frontier.append(succ)

    def _successors(self, tri: _Triple):
        multi_iact, multi_tau, constr = self._spec_moves(tri.spec)
        out = []
        for label, t_next in self.impl_out[tri.impl]:
            if not isinstance(label.guard, Constraint):
                continue
            u = union_wf(tri.acc, label.guard)
            if u is None:
                continue
            step = label.render()
            if isinstance(label.action, Tau) and not constr:
                out.append((_Triple(t_next, tri.spec, u), step))
            for s_label, s_next in constr:
                if self._matcher.single_match(label, s_label):
                    out.append((_Triple(t_next, s_next, u), step))
            if isinstance(label.action, (IAct, Tau)):
                for s_label, s_next in multi_iact + multi_tau:
                    if s_label.action == label.action and constraint_satisfies(
                            u, s_label.guard, self.loc):
                        out.append((_Triple(t_next, s_next, u), step))
        # realizations of the specification's observable obligations
        for s_label, s_next in multi_iact:
            for t2, acc2 in self._accum_reach(tri):
                out.append((_Triple(t2, tri.spec, acc2), "=>"))
                for label, t3 in self.impl_out[t2]:
                    if label.action != s_label.action:
                        continue
                    if not isinstance(label.guard, Constraint):
                        continue
                    u = union_wf(acc2, label.guard)
                    if u is not None:
                        out.append((_Triple(t3, s_next, u), label.render()))
        # mixed specification moves
        for s_label, s_next in constr:
            for label, t_next in self.impl_out[tri.impl]:
                if not isinstance(label.guard, Constraint):
                    continue
                if self._matcher.single_match(s_label, label):
                    u = union_wf(tri.acc, s_label.guard)
                    if u is not None:
                        out.append((_Triple(t_next, s_next, u), s_label.render()))
        return out

    def _accum_reach(self, tri: _Triple):
        """Silent closure from the triple's implementation state, accumulating
        constraints consistently with what the run already committed to."""
        key = (tri.impl, tri.acc)
        cached = self._accum_cache.get(key)
        if cached is not None:
            return cached
        seen = {(tri.impl, tri.acc)}
        frontier = [(tri.impl, tri.acc)]
        while frontier:
            t, acc = frontier.pop()
            for label, dst in self.impl_out[t]:
                if not label.is_tau() or not isinstance(label.guard, Constraint):
                    continue
                u = union_wf(acc, label.guard)
                if u is None:
                    continue
                item = (dst, u)
                if item not in seen:
                    seen.add(item)
                    frontier.append(item)
        self._accum_cache[key] = seen
        return seen

    # -- transfer conditions -----------------------------------------------------

    def _triple_ok(self, tri: _Triple) -> Optional[str]:
        """None when every obligation is met, else a failure description."""
        multi_iact, multi_tau, constr = self._spec_moves(tri.spec)

        for label, t_next in self.impl_out[tri.impl]:
            if not isinstance(label.guard, Constraint):
                return f"implementation offers non-network label {label.render()}"
            u = union_wf(tri.acc, label.guard)
            if u is None:
                continue  # inconsistent with the committed topology
            ok = False
            if isinstance(label.action, Tau) and not constr:
                promised = (not multi_iact) or any(
                    constraint_satisfies(u, sl.guard, self.loc) for sl, _ in multi_iact)
                if promised and _Triple(t_next, tri.spec, u) in self.alive:
                    ok = True
            if not ok:
                for s_label, s_next in constr:
                    if self._matcher.single_match(label, s_label) and \
                            _Triple(t_next, s_next, u) in self.alive:
                        ok = True
                        break
            if not ok and isinstance(label.action, (IAct, Tau)):
                for s_label, s_next in multi_iact + multi_tau:
                    if s_label.action == label.action and constraint_satisfies(
                            u, s_label.guard, self.loc) and \
                            _Triple(t_next, s_next, u) in self.alive:
                        ok = True
                        break
            if not ok:
                return f"move {label.render()} has no match under accumulated {tri.acc.render()}"

        for s_label, s_next in multi_iact:
            ok = False
            for t2, acc2 in self._accum_reach(tri):
                if _Triple(t2, tri.spec, acc2) not in self.alive:
                    continue
                for label, t3 in self.impl_out[t2]:
                    if label.action != s_label.action:
                        continue
                    if not isinstance(label.guard, Constraint):
                        continue
                    u = union_wf(acc2, label.guard)
                    if u is not None and _Triple(t3, s_next, u) in self.alive:
                        ok = True
                        break
                if ok:
                    break
            if not ok:
                return (f"specification obligation {s_label.render()} is not realizable "
                        f"under accumulated {tri.acc.render()}")

        for s_label, s_next in constr:
            u = union_wf(tri.acc, s_label.guard)
            if u is None:
                continue
            ok = False
            for label, t_next in self.impl_out[tri.impl]:
                if not isinstance(label.guard, Constraint):
                    continue
                if self._matcher.single_match(s_label, label) and \
                        _Triple(t_next, s_next, u) in self.alive:
                    ok = True
                    break
            if not ok:
                return f"specification move {s_label.render()} cannot be mimicked"
        return None

    def compute(self, root: _Triple) -> Optional[str]:
        self.explore(root)
        self.failures: dict[_Triple, str] = {}
        changed = True
        while changed:
            changed = False
            for tri in list(self.alive):
                reason = self._triple_ok(tri)
                if reason is not None:
                    self.alive.discard(tri)
                    self.failures[tri] = reason
                    changed = True
        return None if root in self.alive else self._blame(root)

    # -- counterexample ----------------------------------------------------------

    def _blame(self, root: _Triple):
        """A replayable silent path from the root to a dead-end obligation."""
        steps: list[RefinementStep] = []
        tri = root
        visited = {tri}
        while True:
            reason = self.failures.get(tri, "obligation failed")
            nxt = None
            for label, t_next in sorted(self.impl_out[tri.impl],
                                        key=lambda p: p[0].sort_key()):
                if not isinstance(label.guard, Constraint) or not label.is_tau():
                    continue
                u = union_wf(tri.acc, label.guard)
                if u is None:
                    continue
                cand = _Triple(t_next, tri.spec, u)
                if cand in self.failures and cand not in visited:
                    nxt = (label, cand)
                    break
            if nxt is None:
                return steps, tri, reason
            label, cand = nxt
            steps.append(RefinementStep(label.render(), cand.acc.render(),
                                        pretty(cand.impl)))
            visited.add(cand)
            tri = cand


def refines(impl: Clts, spec_term: NetTerm, spec: Specification,
            max_states: int = 2000) -> RefinementVerdict:
    """Decide whether the implementation refines the specification term."""
    if not validate_spec_term(spec_term):
        raise ValueError("specification term outside the prefix/choice/recursion fragment")
    spec_clts = SosEngine(spec).explore(spec_term, max_states)
    checker = _RefineChecker(impl, spec_clts, tuple(spec.addresses))
    root = _Triple(impl.initial, spec_clts.initial, EMPTY)
    blame = checker.compute(root)
    if blame is None:
        return RefinementVerdict(True)
    steps, tri, reason = blame
    return RefinementVerdict(False, steps, reason)


# ---------------------------------------------------------------------------
# Decomposition tactics


@dataclass
class TacticResult:
    subgoals: list[tuple[NetTerm, NetTerm]]
    condition: Optional[bool] = None

    @property
    def conditions_hold(self) -> bool:
        return self.condition is not False


def tactic_tau(lhs: NetTerm, rhs: NetTerm, spec: Specification) -> Optional[TacticResult]:
    """A silent prefix against a multi-hop prefix: keep aiming at the same
    obligation, provided the committed constraint can still satisfy it."""
    if not (isinstance(lhs, CPrefix) and isinstance(lhs.action, Tau)):
        return None
    if not isinstance(rhs, MPrefix):
        return None
    cond = constraint_satisfies(lhs.guard, rhs.guard, tuple(spec.addresses))
    return TacticResult([(Restrict(lhs.guard, lhs.cont), rhs)], cond)


def tactic_iota(lhs: NetTerm, rhs: NetTerm, spec: Specification) -> Optional[TacticResult]:
    """Matching internal actions discharge the obligation and continue."""
    if not (isinstance(lhs, CPrefix) and isinstance(lhs.action, IAct)):
        return None
    if not isinstance(rhs, MPrefix) or rhs.action != lhs.action:
        return None
    return TacticResult([(Restrict(lhs.guard, lhs.cont), rhs.cont)])
