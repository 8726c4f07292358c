"""Operational semantics: transition derivation and state-space exploration.

Transitions carry most-general labels; more restrictive instances of a label
(and instances grounding the unknown address) are never materialized, they are
reconstructed on demand by consumers through the constraint order.

The derivation follows the reliable discipline: a network send must compose
with a receive transition of every parallel component, and the well-formedness
of the combined constraint decides whether a component actually hears the
message or provably drops it.  Deployed nodes are input-enabled: for every
message they either take a real receive step or a drop self-loop, under
complementary constraints.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable

from .constraints import (
    EMPTY,
    UNKNOWN,
    Constraint,
    Link,
    MultiHop,
    preceq,
    substitute as subst_c,
    union_wf,
)
from .terms import (
    Abstract,
    Action,
    CPrefix,
    Choice,
    CommMerge,
    Deploy,
    Encap,
    Hide,
    IAct,
    LeftMerge,
    LocalDeploy,
    MPrefix,
    Name,
    NetRcv,
    NetSnd,
    NetTerm,
    Nil,
    Par,
    Prefix,
    Rcv,
    Rec,
    Restrict,
    Sense,
    Snd,
    Specification,
    TAU,
    Tau,
    action_key,
    canon,
    children as children_of,
    par,
    pretty,
    substitute_action,
    substitute_name,
    with_children as with_children_of,
)


class UnboundName(ValueError):
    pass


class StateBudgetExceeded(RuntimeError):
    """The exploration hit its state budget; the term may be infinite-state."""

    def __init__(self, budget: int):
        super().__init__(f"state budget of {budget} exceeded")
        self.budget = budget


@dataclass(frozen=True)
class Label:
    """Transition annotation: a (multi-hop) constraint paired with an action."""

    guard: Constraint | MultiHop
    action: Action

    def render(self) -> str:
        return f"({self.guard.render()}, {self.action.render()})"

    def sort_key(self):
        return (self.guard.sort_key(), action_key(self.action))

    def is_tau(self) -> bool:
        return isinstance(self.action, Tau)


@dataclass(frozen=True)
class Transition:
    src: NetTerm
    label: Label
    dst: NetTerm


@dataclass(frozen=True)
class Clts:
    """Finite constrained labeled transition system."""

    states: frozenset[NetTerm]
    transitions: frozenset[Transition]
    initial: NetTerm
    loc: tuple[str, ...]
    msgs: tuple[str, ...]

    def out(self, state: NetTerm) -> list[Transition]:
        return sorted(
            (t for t in self.transitions if t.src == state),
            key=lambda t: (t.label.sort_key(), pretty(t.dst)),
        )


def _is_protocol(a: Action) -> bool:
    return isinstance(a, (Snd, Rcv))


class SosEngine:
    """Transition derivation over a fixed specification."""

    def __init__(self, spec: Specification):
        self.spec = spec
        self._memo: dict[NetTerm, frozenset[tuple[Label, NetTerm]]] = {}

    # -- entry points -------------------------------------------------------

    def transitions(self, t: NetTerm) -> frozenset[tuple[Label, NetTerm]]:
        res, _clean = self._trans(t, frozenset())
        return res

    def state_key(self, t: NetTerm) -> NetTerm:
        """Canonical state identity: definitional abbreviations are expanded
        along the network spine (not inside deployed process bodies)."""
        return canon(self._resolve(t, frozenset()))

    def _resolve(self, t: NetTerm, seen: frozenset) -> NetTerm:
        if isinstance(t, Name):
            defn = self.spec.definition(t.id)
            if defn is not None and t.id not in seen:
                return self._resolve(defn, seen | {t.id})
            return t
        if isinstance(t, (Hide, Abstract, Encap, Restrict, Par, LeftMerge, CommMerge)):
            kids = tuple(self._resolve(k, seen) for k in children_of(t))
            return with_children_of(t, kids)
        return t

    def explore(self, t0: NetTerm, max_states: int = 2000) -> Clts:
        """Breadth-first closure of the transition relation from ``t0``."""
        init = self.state_key(t0)
        states = {init}
        transitions: set[Transition] = set()
        frontier = [init]
        while frontier:
            nxt: list[NetTerm] = []
            for s in frontier:
                for label, raw_dst in sorted(
                    self.transitions(s), key=lambda p: (p[0].sort_key(), pretty(p[1]))
                ):
                    dst = self.state_key(raw_dst)
                    transitions.add(Transition(s, label, dst))
                    if dst not in states:
                        if len(states) >= max_states:
                            raise StateBudgetExceeded(max_states)
                        states.add(dst)
                        nxt.append(dst)
            frontier = nxt
        return Clts(frozenset(states), frozenset(transitions), init,
                    tuple(self.spec.addresses), tuple(self.spec.messages))

    # -- derivation ---------------------------------------------------------

    def _trans(self, t: NetTerm, busy: frozenset) -> tuple[frozenset, bool]:
        if t in self._memo:
            return self._memo[t], True
        if t in busy:
            # Unguarded re-entry contributes nothing: least-fixpoint reading,
            # consistent with the unfolding axioms for unguarded recursion.
            return frozenset(), False
        res, clean = self._derive(t, busy | {t})
        res = self._prune_most_general(res)
        if clean:
            self._memo[t] = res
        return res, clean

    def _derive(self, t: NetTerm, busy: frozenset) -> tuple[frozenset, bool]:
        if isinstance(t, Nil):
            return frozenset(), True
        if isinstance(t, Prefix):
            return frozenset({(Label(EMPTY, t.action), t.cont)}), True
        if isinstance(t, CPrefix):
            return frozenset({(Label(t.guard, t.action), t.cont)}), True
        if isinstance(t, MPrefix):
            return frozenset({(Label(t.guard, t.action), t.cont)}), True
        if isinstance(t, Choice):
            out, clean = set(), True
            for p in t.parts:
                r, c = self._trans(p, busy)
                out |= r
                clean = clean and c
            return frozenset(out), clean
        if isinstance(t, Sense):
            inner, clean = self._trans_pair(t.then, t.els, busy)
            (r1, r2) = inner
            out = set()
            for polarity, branch in ((True, r1), (False, r2)):
                for label, tgt in branch:
                    if not (_is_protocol(label.action) or isinstance(label.action, IAct)):
                        continue
                    guard = union_wf(label.guard,
                                     Constraint(frozenset({Link(UNKNOWN, t.target, polarity)})))
                    if guard is None:
                        continue
                    out.add((Label(guard, label.action), tgt))
            return frozenset(out), clean
        if isinstance(t, Name):
            defn = self.spec.definition(t.id)
            if defn is None:
                raise UnboundName(t.id)
            return self._trans(defn, busy)
        if isinstance(t, Rec):
            unfolded = substitute_name(t.body, t.id, t)
            return self._trans(unfolded, busy)
        if isinstance(t, Deploy):
            return self._deploy(t, busy)
        if isinstance(t, LocalDeploy):
            return self._local_deploy(t, busy)
        if isinstance(t, Par):
            return self._par(t, busy)
        if isinstance(t, LeftMerge):
            r, clean = self._trans(t.left, busy)
            out = set()
            for label, tgt in r:
                if isinstance(label.action, (IAct, Tau)) and isinstance(label.guard, Constraint):
                    out.add((label, canon(par([tgt, t.right]))))
            return frozenset(out), clean
        if isinstance(t, CommMerge):
            (r1, r2), clean = self._trans_pair(t.left, t.right, busy)
            out = set()
            out |= self._sync(r1, r2)
            out |= self._sync(r2, r1)
            return frozenset(out), clean
        if isinstance(t, Hide):
            r, clean = self._trans(t.body, busy)
            out = set()
            for label, tgt in r:
                if not isinstance(label.guard, Constraint):
                    continue
                guard = subst_c(label.guard, UNKNOWN, t.addr)
                action = substitute_action(label.action, UNKNOWN, t.addr)
                out.add((Label(guard, action), canon(Hide(t.addr, tgt))))
            return frozenset(out), clean
        if isinstance(t, Abstract):
            r, clean = self._trans(t.body, busy)
            out = set()
            for label, tgt in r:
                a = label.action
                if (isinstance(a, NetSnd) and a.msg == t.msg) or (
                    isinstance(a, NetRcv) and a.msg == t.msg
                ):
                    a = TAU
                out.add((Label(label.guard, a), canon(Abstract(t.msg, tgt))))
            return frozenset(out), clean
        if isinstance(t, Encap):
            r, clean = self._trans(t.body, busy)
            out = set()
            for label, tgt in r:
                if isinstance(label.action, NetRcv) and label.action.msg == t.msg:
                    continue
                out.add((label, canon(Encap(t.msg, tgt))))
            return frozenset(out), clean
        if isinstance(t, Restrict):
            r, clean = self._trans(t.body, busy)
            out = set()
            for label, tgt in r:
                if not isinstance(label.guard, Constraint):
                    continue
                guard = union_wf(label.guard, t.guard)
                if guard is None or guard.has_positive_self_link():
                    continue
                out.add((Label(guard, label.action), tgt))
            return frozenset(out), clean
        raise TypeError(t)

    def _trans_pair(self, a, b, busy):
        ra, ca = self._trans(a, busy)
        rb, cb = self._trans(b, busy)
        return (ra, rb), ca and cb

    # -- deployment ---------------------------------------------------------

    def _deploy(self, t: Deploy, busy) -> tuple[frozenset, bool]:
        r, clean = self._trans(t.body, busy)
        out = set()
        for label, tgt in r:
            guard, a = label.guard, label.action
            if isinstance(a, Snd):
                g = subst_c(guard, t.at, UNKNOWN)
                if g.has_positive_self_link():
                    continue
                out.add((Label(g, NetSnd(a.msg, t.at)), canon(Deploy(tgt, t.at))))
            elif isinstance(a, Rcv):
                g = subst_c(guard, t.at, UNKNOWN)
                g = union_wf(g, Constraint(frozenset({Link(UNKNOWN, t.at, True)})))
                if g is None or g.has_positive_self_link():
                    continue
                out.add((Label(g, NetRcv(a.msg)), canon(Deploy(tgt, t.at))))
            elif isinstance(a, IAct):
                g = subst_c(guard, t.at, UNKNOWN)
                if g.has_positive_self_link():
                    continue
                out.add((Label(g, a), canon(Deploy(tgt, t.at))))
        self_state = canon(t)
        for m in self.spec.messages:
            for guard in self._drop_guards(m, t.body, t.at, busy, top=True):
                out.add((Label(guard, NetRcv(m)), self_state))
        return frozenset(out), clean

    def _local_deploy(self, t: LocalDeploy, busy) -> tuple[frozenset, bool]:
        r, clean = self._trans(t.body, busy)
        out = set()
        for label, tgt in r:
            guard, a = label.guard, label.action
            if isinstance(a, Snd):
                g = subst_c(guard, t.at, UNKNOWN)
                if g.has_positive_self_link():
                    continue
                out.add((Label(g, NetSnd(a.msg, t.at)), canon(Deploy(tgt, t.at))))
            elif isinstance(a, Rcv):
                g = subst_c(guard, t.at, UNKNOWN)
                g = union_wf(g, Constraint(frozenset({Link(UNKNOWN, t.at, True)})))
                if g is None or g.has_positive_self_link():
                    continue
                out.add((Label(g, NetRcv(a.msg)), canon(Deploy(tgt, t.at))))
            elif isinstance(a, IAct):
                g = subst_c(guard, t.at, UNKNOWN)
                if g.has_positive_self_link():
                    continue
                out.add((Label(g, a), canon(Deploy(tgt, t.at))))
        fb = canon(t.fallback)
        for m in self.spec.messages:
            for guard in self._drop_guards(m, t.body, t.at, busy, top=False):
                out.add((Label(guard, NetRcv(m)), fb))
        return frozenset(out), clean

    def _drop_guards(self, m: str, body: NetTerm, at: str, busy,
                     top: bool) -> set[Constraint]:
        """Constraints under which the node provably drops message ``m``.

        Mirrors the equational treatment of deployment: a plain receive drops
        when the sender is disconnected, a choice drops through either summand,
        and a sense branch drops a message the active branch cannot process
        under the very link literal that selected the branch.  A deployment
        (``top``) additionally drops messages the body never receives, under
        no constraint at all; a local deployment leaves those to its fallback.
        """
        if not self._handles(m, body, frozenset()):
            return {EMPTY} if top else set()
        return self._dd(m, body, at, frozenset())

    def _handles(self, m: str, t: NetTerm, seen: frozenset) -> bool:
        if isinstance(t, Prefix):
            return isinstance(t.action, Rcv) and t.action.msg == m
        if isinstance(t, Choice):
            return any(self._handles(m, p, seen) for p in t.parts)
        if isinstance(t, Sense):
            return self._handles(m, t.then, seen) or self._handles(m, t.els, seen)
        if isinstance(t, Name):
            if t.id in seen:
                return False
            defn = self.spec.definition(t.id)
            if defn is None:
                raise UnboundName(t.id)
            return self._handles(m, defn, seen | {t.id})
        return False

    def _dd(self, m: str, t: NetTerm, at: str, seen: frozenset) -> set[Constraint]:
        if isinstance(t, Prefix):
            if isinstance(t.action, Rcv) and t.action.msg == m:
                return {Constraint(frozenset({Link(UNKNOWN, at, False)}))}
            return set()
        if isinstance(t, Choice):
            out: set[Constraint] = set()
            for p in t.parts:
                out |= self._dd(m, p, at, seen)
            return out
        if isinstance(t, Name):
            if t.id in seen:
                return set()
            defn = self.spec.definition(t.id)
            if defn is None:
                raise UnboundName(t.id)
            return self._dd(m, defn, at, seen | {t.id})
        if isinstance(t, Sense):
            h_then = self._handles(m, t.then, frozenset())
            h_els = self._handles(m, t.els, frozenset())
            out = set()
            link_up = Constraint(frozenset({Link(at, t.target, True)}))
            link_down = Constraint(frozenset({Link(at, t.target, False)}))
            if h_then:
                for d in self._dd(m, t.then, at, seen):
                    u = union_wf(d, link_up)
                    if u is not None and not u.has_positive_self_link():
                        out.add(u)
            elif h_els:
                out.add(link_up)
            if h_els:
                for d in self._dd(m, t.els, at, seen):
                    u = union_wf(d, link_down)
                    if u is not None and not u.has_positive_self_link():
                        out.add(u)
            elif h_then:
                out.add(link_down)
            return out
        return set()

    # -- composition --------------------------------------------------------

    def _par(self, t: Par, busy) -> tuple[frozenset, bool]:
        parts = t.parts
        rs, clean = [], True
        for p in parts:
            r, c = self._trans(p, busy)
            rs.append(r)
            clean = clean and c
        out = set()
        # interleaving of internal and silent steps
        for i, r in enumerate(rs):
            for label, tgt in r:
                if isinstance(label.action, (IAct, Tau)) and isinstance(label.guard, Constraint):
                    kids = list(parts)
                    kids[i] = tgt
                    out.add((label, canon(par(kids))))
        # reliable broadcast: a send synchronizes with a receive of every peer
        for i, r in enumerate(rs):
            for label, tgt in r:
                a = label.action
                if not isinstance(a, NetSnd):
                    continue
                combos = [(label.guard, {i: tgt})]
                ok = True
                for j, rj in enumerate(rs):
                    if j == i:
                        continue
                    nxt = []
                    for lj, tj in rj:
                        if not (isinstance(lj.action, NetRcv) and lj.action.msg == a.msg):
                            continue
                        gj = subst_c(lj.guard, a.src, UNKNOWN)
                        if gj.has_positive_self_link():
                            continue
                        for acc, repl in combos:
                            u = union_wf(acc, gj)
                            if u is None or u.has_positive_self_link():
                                continue
                            nxt.append((u, {**repl, j: tj}))
                    combos = nxt
                    if not combos:
                        ok = False
                        break
                if not ok:
                    continue
                for acc, repl in combos:
                    kids = [repl.get(k, parts[k]) for k in range(len(parts))]
                    out.add((Label(acc, a), canon(par(kids))))
        # joint receive of all components
        for m in self.spec.messages:
            combos = [(EMPTY, [])]
            ok = True
            for r in rs:
                nxt = []
                for lj, tj in r:
                    if not (isinstance(lj.action, NetRcv) and lj.action.msg == m):
                        continue
                    for acc, tgts in combos:
                        u = union_wf(acc, lj.guard)
                        if u is None or u.has_positive_self_link():
                            continue
                        nxt.append((u, tgts + [tj]))
                combos = nxt
                if not combos:
                    ok = False
                    break
            if not ok:
                continue
            for acc, tgts in combos:
                out.add((Label(acc, NetRcv(m)), canon(par(tgts))))
        return frozenset(out), clean

    def _sync(self, r1, r2) -> set:
        out = set()
        for l1, t1 in r1:
            for l2, t2 in r2:
                a1, a2 = l1.action, l2.action
                if not isinstance(l1.guard, Constraint) or not isinstance(l2.guard, Constraint):
                    continue
                if isinstance(a1, NetRcv) and isinstance(a2, NetRcv) and a1.msg == a2.msg:
                    u = union_wf(l1.guard, l2.guard)
                    if u is not None and not u.has_positive_self_link():
                        out.add((Label(u, a1), canon(par([t1, t2]))))
                if isinstance(a1, NetSnd) and isinstance(a2, NetRcv) and a1.msg == a2.msg:
                    g2 = subst_c(l2.guard, a1.src, UNKNOWN)
                    if g2.has_positive_self_link():
                        continue
                    u = union_wf(l1.guard, g2)
                    if u is not None and not u.has_positive_self_link():
                        out.add((Label(u, a1), canon(par([t1, t2]))))
        return out

    # -- label housekeeping --------------------------------------------------

    def _prune_most_general(self, trans: Iterable) -> frozenset:
        """Drop labels that are strict instances of a sibling with the same
        action and target."""
        trans = set(trans)
        loc = tuple(self.spec.addresses)
        pruned = set()
        for label, tgt in trans:
            if not isinstance(label.guard, Constraint):
                pruned.add((label, tgt))
                continue
            dominated = False
            for other, tgt2 in trans:
                if tgt2 != tgt or other == label:
                    continue
                if not isinstance(other.guard, Constraint):
                    continue
                if other.action != label.action:
                    continue
                below = preceq(label.guard, other.guard, loc)
                above = preceq(other.guard, label.guard, loc)
                if below and not above:
                    dominated = True
                    break
                if below and above and other.guard.sort_key() < label.guard.sort_key():
                    dominated = True
                    break
            if not dominated:
                pruned.add((label, tgt))
        return frozenset(pruned)


def derive_transitions(t: NetTerm, spec: Specification) -> frozenset[tuple[Label, NetTerm]]:
    """Most-general transitions of a closed term."""
    return SosEngine(spec).transitions(canon(t))


def explore(t0: NetTerm, spec: Specification, max_states: int = 2000) -> Clts:
    return SosEngine(spec).explore(t0, max_states)


def complete_receives(node: NetTerm, spec: Specification) -> frozenset[tuple[Label, NetTerm]]:
    """The drop self-loops / fallback moves of a (local) deployment."""
    if not isinstance(node, (Deploy, LocalDeploy)):
        raise TypeError("complete_receives expects a deployed term")
    out = set()
    for label, tgt in derive_transitions(node, spec):
        if isinstance(label.action, NetRcv):
            if isinstance(node, Deploy) and tgt == canon(node):
                out.add((label, tgt))
            elif isinstance(node, LocalDeploy) and tgt == canon(node.fallback):
                out.add((label, tgt))
    return frozenset(out)


# ---------------------------------------------------------------------------
# Closures


def tau_reach(clts: Clts, state: NetTerm) -> frozenset[NetTerm]:
    """States reachable through zero or more silent steps."""
    seen = {state}
    frontier = [state]
    while frontier:
        s = frontier.pop()
        for tr in clts.transitions:
            if tr.src == s and tr.label.is_tau() and tr.dst not in seen:
                seen.add(tr.dst)
                frontier.append(tr.dst)
    return frozenset(seen)


def tau_reach_accum(clts: Clts, state: NetTerm) -> frozenset[tuple[NetTerm, Constraint]]:
    """Silent closure with accumulated constraints; clashing unions are pruned."""
    seen = {(state, EMPTY)}
    frontier = [(state, EMPTY)]
    while frontier:
        s, acc = frontier.pop()
        for tr in clts.transitions:
            if tr.src != s or not tr.label.is_tau():
                continue
            if not isinstance(tr.label.guard, Constraint):
                continue
            u = union_wf(acc, tr.label.guard)
            if u is None:
                continue
            item = (tr.dst, u)
            if item not in seen:
                seen.add(item)
                frontier.append(item)
    return frozenset(seen)


# ---------------------------------------------------------------------------
# Exports


def clts_to_json(clts: Clts) -> str:
    states = sorted(clts.states, key=pretty)
    index = {s: i for i, s in enumerate(states)}
    doc = {
        "states": [pretty(s) for s in states],
        "initial": index[clts.initial],
        "transitions": [
            {
                "src": index[t.src],
                "constraint": [l.render() for l in sorted(t.label.guard.literals)],
                "action": t.label.action.render(),
                "dst": index[t.dst],
            }
            for t in sorted(
                clts.transitions,
                key=lambda t: (index[t.src], t.label.sort_key(), index[t.dst]),
            )
        ],
    }
    return json.dumps(doc, indent=2)


def clts_to_dot(clts: Clts, name: str = "clts") -> str:
    states = sorted(clts.states, key=pretty)
    index = {s: i for i, s in enumerate(states)}

    def esc(s: str) -> str:
        return s.replace("\\", "\\\\").replace('"', '\\"')

    lines = [f"digraph {name} {{", "  rankdir=LR;", '  node [shape=box, fontsize=10];']
    lines.append(f'  init [shape=point, label=""];')
    for s in states:
        lines.append(f'  s{index[s]} [label="{esc(pretty(s))}"];')
    lines.append(f"  init -> s{index[clts.initial]};")
    for t in sorted(clts.transitions,
                    key=lambda t: (index[t.src], t.label.sort_key(), index[t.dst])):
        lbl = f"{t.label.guard.render()} / {t.label.action.render()}"
        lines.append(f'  s{index[t.src]} -> s{index[t.dst]} [label="{esc(lbl)}"];')
    lines.append("}")
    return "\n".join(lines)
