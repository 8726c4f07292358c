"""Equational theory: axiom application, node linearization, normal forms.

Axioms rewrite left-to-right at an explicit position.  The linearizer turns a
deployed node into guarded recursion over constraint-prefixed actions by the
deployment axioms, one state at a time, folding repeated states back onto
their recursion binders.  General finite-state terms are normalized by
expanding every reachable state to head normal form and folding the resulting
equation system into nested recursion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

from .constraints import Constraint, EMPTY, Link, UNKNOWN, substitute as subst_c, union_wf
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
    NIL,
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
    canon,
    children,
    choice,
    free_names,
    is_guarded,
    par,
    pretty,
    replace_at,
    substitute_action,
    substitute_name,
    subterm_at,
    term_key,
    with_children,
)
from .sos import Clts, Label, SosEngine, StateBudgetExceeded


class NotFiniteState(RuntimeError):
    """The term falls outside the finite-state fragment."""


NOMATCH = None


@dataclass
class TraceStep:
    axiom: str
    position: tuple[int, ...]
    before: NetTerm
    after: NetTerm


@dataclass
class RewriteTrace:
    steps: list[TraceStep] = field(default_factory=list)

    def add(self, axiom: str, position: tuple[int, ...], before: NetTerm, after: NetTerm):
        self.steps.append(TraceStep(axiom, position, before, after))

    def render(self, start: NetTerm | None = None) -> str:
        lines = []
        if start is not None:
            lines.append(f"    {pretty(start)}")
        for i, s in enumerate(self.steps, 1):
            where = "/".join(map(str, s.position)) or "root"
            lines.append(f"{i:3d}. ={s.axiom}=  at {where}")
            lines.append(f"    {pretty(s.after)}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# The Message function


def message_set(t: NetTerm, spec: Specification, seen: frozenset[str] = frozenset()) -> frozenset[str]:
    """Messages the process can currently receive."""
    if isinstance(t, Prefix):
        if isinstance(t.action, Rcv):
            return frozenset({t.action.msg})
        return frozenset()
    if isinstance(t, Choice):
        out: frozenset[str] = frozenset()
        for p in t.parts:
            out |= message_set(p, spec, seen)
        return out
    if isinstance(t, Sense):
        return message_set(t.then, spec, seen) | message_set(t.els, spec, seen)
    if isinstance(t, Name):
        if t.id in seen:
            return frozenset()
        defn = spec.definition(t.id)
        if defn is None:
            return frozenset()
        return message_set(defn, spec, seen | {t.id})
    return frozenset()


# ---------------------------------------------------------------------------
# Axiom schemata

_fresh_counter = 0


def _fresh_name(spec: Specification, *terms: NetTerm) -> str:
    global _fresh_counter
    taken = spec.defined_names()
    for t in terms:
        taken |= free_names(t)
    while True:
        name = f"X{_fresh_counter}"
        _fresh_counter += 1
        if name not in taken:
            return name


def _is_iota(a: Action) -> bool:
    return isinstance(a, (IAct, Tau))


def _ax_ch1(t, spec):
    if isinstance(t, Choice) and any(isinstance(p, Nil) for p in t.parts):
        rest = [p for p in t.parts if not isinstance(p, Nil)]
        return choice(rest)
    return NOMATCH


def _ax_ch2(t, spec):
    if isinstance(t, Choice):
        parts = tuple(sorted(t.parts, key=term_key))
        if parts != t.parts:
            return Choice(parts)
    return NOMATCH


def _ax_ch3(t, spec):
    if isinstance(t, Choice) and any(isinstance(p, Choice) for p in t.parts):
        return choice(t.parts)
    return NOMATCH


def _ax_ch4(t, spec):
    if isinstance(t, Choice):
        seen, parts, dropped = set(), [], False
        for p in t.parts:
            if p in seen:
                dropped = True
                continue
            seen.add(p)
            parts.append(p)
        if dropped:
            return choice(parts)
    return NOMATCH


def _ax_ch5(t, spec):
    if not isinstance(t, Choice):
        return NOMATCH
    for i, p in enumerate(t.parts):
        if not (isinstance(p, CPrefix) and isinstance(p.action, NetSnd)
                and p.action.src == UNKNOWN):
            continue
        for q in t.parts:
            if q is p or not (isinstance(q, CPrefix) and isinstance(q.action, NetSnd)):
                continue
            if q.action.src == UNKNOWN or q.action.msg != p.action.msg:
                continue
            addr = q.action.src
            if subst_c(p.guard, addr, UNKNOWN) == q.guard and p.cont == q.cont:
                return choice([x for j, x in enumerate(t.parts) if j != i])
    return NOMATCH


def _ax_ch6(t, spec):
    from .constraints import preceq
    if not isinstance(t, Choice):
        return NOMATCH
    loc = tuple(spec.addresses)
    for i, p in enumerate(t.parts):
        if not isinstance(p, CPrefix):
            continue
        for q in t.parts:
            if q is p or not isinstance(q, CPrefix):
                continue
            if q.action != p.action or q.cont != p.cont:
                continue
            # p is the more specific summand: drop it, keep the liberal one
            if preceq(p.guard, q.guard, loc) and p.guard != q.guard:
                return choice([x for j, x in enumerate(t.parts) if j != i])
    return NOMATCH


def _ax_dep0(t, spec):
    if not isinstance(t, Deploy):
        return NOMATCH
    binder = _fresh_name(spec, t)
    handled = message_set(t.body, spec)
    drops = [CPrefix(EMPTY, NetRcv(m), Name(binder))
             for m in sorted(spec.messages) if m not in handled]
    return Rec(binder, choice(drops + [LocalDeploy(t.at, Name(binder), t.body)]))


def _ax_dep1(t, spec):
    if isinstance(t, LocalDeploy) and isinstance(t.body, Prefix) \
            and isinstance(t.body.action, Snd):
        return CPrefix(EMPTY, NetSnd(t.body.action.msg, t.at), Deploy(t.body.cont, t.at))
    return NOMATCH


def _ax_dep2(t, spec):
    if isinstance(t, LocalDeploy) and isinstance(t.body, Prefix) \
            and isinstance(t.body.action, Rcv):
        m = t.body.action.msg
        return choice([
            CPrefix(Constraint(frozenset({Link(UNKNOWN, t.at, False)})), NetRcv(m), t.fallback),
            CPrefix(Constraint(frozenset({Link(UNKNOWN, t.at, True)})), NetRcv(m),
                    Deploy(t.body.cont, t.at)),
        ])
    return NOMATCH


def _ax_dep3(t, spec):
    if isinstance(t, LocalDeploy) and isinstance(t.body, Choice):
        return choice([LocalDeploy(t.at, t.fallback, p) for p in t.body.parts])
    return NOMATCH


def _ax_dep4(t, spec):
    if isinstance(t, LocalDeploy) and isinstance(t.body, Nil):
        return NIL
    return NOMATCH


def _ax_dep5(t, spec):
    if isinstance(t, LocalDeploy) and isinstance(t.body, Name):
        defn = spec.definition(t.body.id)
        if defn is not None:
            return LocalDeploy(t.at, t.fallback, defn)
    return NOMATCH


def _ax_dep6(t, spec):
    if isinstance(t, LocalDeploy) and isinstance(t.body, Prefix) \
            and isinstance(t.body.action, IAct):
        return CPrefix(EMPTY, t.body.action, Deploy(t.body.cont, t.at))
    return NOMATCH


def _ax_dep7(t, spec):
    if not (isinstance(t, LocalDeploy) and isinstance(t.body, Sense)):
        return NOMATCH
    s = t.body
    m_then = message_set(s.then, spec)
    m_els = message_set(s.els, spec)
    up = Constraint(frozenset({Link(t.at, s.target, True)}))
    down = Constraint(frozenset({Link(t.at, s.target, False)}))
    parts: list[NetTerm] = []
    for m in sorted(m_els - m_then):
        parts.append(CPrefix(up, NetRcv(m), t.fallback))
    for m in sorted(m_then - m_els):
        parts.append(CPrefix(down, NetRcv(m), t.fallback))
    parts.append(Restrict(up, LocalDeploy(t.at, t.fallback, s.then)))
    parts.append(Restrict(down, LocalDeploy(t.at, t.fallback, s.els)))
    return choice(parts)


def _ax_tres1(t, spec):
    if isinstance(t, Restrict) and isinstance(t.body, CPrefix):
        u = union_wf(t.guard, t.body.guard)
        if u is None or u.has_positive_self_link():
            # a clashing restriction disables the behavior altogether
            return NIL
        return CPrefix(u, t.body.action, t.body.cont)
    return NOMATCH


def _ax_tres2(t, spec):
    if isinstance(t, Restrict) and isinstance(t.body, Choice):
        return choice([Restrict(t.guard, p) for p in t.body.parts])
    return NOMATCH


def _ax_tres3(t, spec):
    if isinstance(t, Restrict) and isinstance(t.body, Rec):
        return Rec(t.body.id, Restrict(t.guard, t.body.body))
    return NOMATCH


def _ax_tres4(t, spec):
    if isinstance(t, Restrict) and isinstance(t.body, Name):
        return t.body
    return NOMATCH


def _ax_tres5(t, spec):
    if isinstance(t, Restrict) and isinstance(t.body, Nil):
        return NIL
    return NOMATCH


def _ax_br(t, spec):
    if isinstance(t, Par) and len(t.parts) >= 2:
        head, rest = t.parts[0], t.parts[1:]
        tail = rest[0] if len(rest) == 1 else Par(rest)
        return choice([LeftMerge(head, tail), LeftMerge(tail, head), CommMerge(head, tail)])
    return NOMATCH


def _ax_lm1p(t, spec):
    if isinstance(t, LeftMerge) and isinstance(t.left, CPrefix) \
            and not _is_iota(t.left.action):
        return NIL
    return NOMATCH


def _ax_lm2(t, spec):
    if isinstance(t, LeftMerge) and isinstance(t.left, Choice):
        return choice([LeftMerge(p, t.right) for p in t.left.parts])
    return NOMATCH


def _ax_lm2p(t, spec):
    if isinstance(t, LeftMerge) and isinstance(t.left, CPrefix) and _is_iota(t.left.action):
        return CPrefix(t.left.guard, t.left.action, par([t.left.cont, t.right]))
    return NOMATCH


def _ax_lm3(t, spec):
    if isinstance(t, LeftMerge) and isinstance(t.left, Nil):
        return NIL
    return NOMATCH


def _ax_s1(t, spec):
    if isinstance(t, CommMerge):
        swapped = CommMerge(t.right, t.left)
        if swapped != t:
            return swapped
    return NOMATCH


def _ax_s2(t, spec):
    if isinstance(t, CommMerge) and isinstance(t.left, Choice):
        return choice([CommMerge(p, t.right) for p in t.left.parts])
    return NOMATCH


def _ax_s3(t, spec):
    if isinstance(t, CommMerge) and isinstance(t.left, Nil):
        return NIL
    return NOMATCH


def _ax_s4(t, spec):
    if isinstance(t, CommMerge) and isinstance(t.left, CPrefix) and _is_iota(t.left.action):
        return NIL
    return NOMATCH


def _ax_sync1(t, spec):
    if isinstance(t, CommMerge) and isinstance(t.left, CPrefix) \
            and isinstance(t.right, CPrefix) \
            and isinstance(t.left.action, NetSnd) and isinstance(t.right.action, NetRcv):
        snd, rcv = t.left, t.right
        if snd.action.msg != rcv.action.msg:
            return NIL
        u = union_wf(snd.guard, subst_c(rcv.guard, snd.action.src, UNKNOWN))
        if u is None or u.has_positive_self_link():
            return NIL
        return CPrefix(u, snd.action, par([snd.cont, rcv.cont]))
    return NOMATCH


def _ax_sync2(t, spec):
    if isinstance(t, CommMerge) and isinstance(t.left, CPrefix) \
            and isinstance(t.right, CPrefix) \
            and isinstance(t.left.action, NetRcv) and isinstance(t.right.action, NetRcv):
        if t.left.action.msg != t.right.action.msg:
            return NIL
        u = union_wf(t.left.guard, t.right.guard)
        if u is None:
            return NIL
        return CPrefix(u, t.left.action, par([t.left.cont, t.right.cont]))
    return NOMATCH


def _ax_sync3(t, spec):
    if isinstance(t, CommMerge) and isinstance(t.left, CPrefix) \
            and isinstance(t.right, CPrefix) \
            and isinstance(t.left.action, NetSnd) and isinstance(t.right.action, NetSnd):
        return NIL
    return NOMATCH


def _ax_res1(t, spec):
    if isinstance(t, Hide) and isinstance(t.body, Choice):
        return choice([Hide(t.addr, p) for p in t.body.parts])
    return NOMATCH


def _ax_res2(t, spec):
    if isinstance(t, Hide) and isinstance(t.body, CPrefix):
        p = t.body
        return CPrefix(subst_c(p.guard, UNKNOWN, t.addr),
                       substitute_action(p.action, UNKNOWN, t.addr),
                       Hide(t.addr, p.cont))
    return NOMATCH


def _ax_res3(t, spec):
    if isinstance(t, Hide) and isinstance(t.body, Nil):
        return NIL
    return NOMATCH


def _ax_ecp1(t, spec):
    # any action other than receiving the encapsulated message passes through
    if isinstance(t, Encap) and isinstance(t.body, CPrefix):
        p = t.body
        if isinstance(p.action, NetRcv):
            return NOMATCH
        return CPrefix(p.guard, p.action, Encap(t.msg, p.cont))
    return NOMATCH


def _ax_ecp2(t, spec):
    if isinstance(t, Encap) and isinstance(t.body, CPrefix) \
            and isinstance(t.body.action, NetRcv):
        p = t.body
        if p.action.msg == t.msg:
            return NIL
        return CPrefix(p.guard, p.action, Encap(t.msg, p.cont))
    return NOMATCH


def _ax_ecp3(t, spec):
    if isinstance(t, Encap) and isinstance(t.body, Choice):
        return choice([Encap(t.msg, p) for p in t.body.parts])
    return NOMATCH


def _ax_ecp4(t, spec):
    if isinstance(t, Encap) and isinstance(t.body, Nil):
        return NIL
    return NOMATCH


def _ax_abs1(t, spec):
    if isinstance(t, Abstract) and isinstance(t.body, CPrefix) \
            and isinstance(t.body.action, NetRcv):
        p = t.body
        a = TAU if p.action.msg == t.msg else p.action
        return CPrefix(p.guard, a, Abstract(t.msg, p.cont))
    return NOMATCH


def _ax_abs2(t, spec):
    # network sends of the abstracted message become silent; other actions pass
    if isinstance(t, Abstract) and isinstance(t.body, CPrefix) \
            and not isinstance(t.body.action, NetRcv):
        p = t.body
        a = p.action
        if isinstance(a, NetSnd) and a.msg == t.msg:
            a = TAU
        return CPrefix(p.guard, a, Abstract(t.msg, p.cont))
    return NOMATCH


def _ax_abs3(t, spec):
    if isinstance(t, Abstract) and isinstance(t.body, Choice):
        return choice([Abstract(t.msg, p) for p in t.body.parts])
    return NOMATCH


def _ax_abs4(t, spec):
    if isinstance(t, Abstract) and isinstance(t.body, Nil):
        return NIL
    return NOMATCH


def _complementary_split(c1: Constraint, c2: Constraint):
    """When the two constraints differ by the polarity of exactly one pair,
    return the shared remainder."""
    diff1 = c1.literals - c2.literals
    diff2 = c2.literals - c1.literals
    if len(diff1) == 1 and len(diff2) == 1:
        l1, l2 = next(iter(diff1)), next(iter(diff2))
        if l1.src == l2.src and l1.dst == l2.dst and l1.connected != l2.connected \
                and l1.connected:
            return Constraint(c1.literals - {l1})
    return None


def _ax_t1(t, spec):
    if not (isinstance(t, CPrefix) and isinstance(t.cont, Choice)):
        return NOMATCH
    inner = t.cont
    for i, p in enumerate(inner.parts):
        if not isinstance(p, CPrefix) or p.action != t.action:
            continue
        for j, q in enumerate(inner.parts):
            if j == i or not isinstance(q, CPrefix) or q.action != t.action:
                continue
            if p.cont != q.cont:
                continue
            shared = _complementary_split(p.guard, q.guard)
            if shared is None:
                continue
            rest = [x for k, x in enumerate(inner.parts) if k not in (i, j)]
            merged = CPrefix(shared, p.action, p.cont)
            return CPrefix(t.guard, t.action, choice([merged] + rest))
    return NOMATCH


def _ax_t2(t, spec):
    if not isinstance(t, CPrefix):
        return NOMATCH
    inner = t.cont
    outer_parts = inner.parts if isinstance(inner, Choice) else (inner,)
    for i, p in enumerate(outer_parts):
        if not (isinstance(p, CPrefix) and isinstance(p.action, Tau)):
            continue
        rest = frozenset(x for k, x in enumerate(outer_parts) if k != i)
        inner_parts = frozenset(p.cont.parts if isinstance(p.cont, Choice) else (p.cont,))
        if rest <= inner_parts:
            return CPrefix(t.guard, t.action, p.cont)
    return NOMATCH


def _ax_unfold(t, spec):
    if isinstance(t, Rec):
        return substitute_name(t.body, t.id, t)
    return NOMATCH


def _ax_ung(t, spec):
    if isinstance(t, Rec) and isinstance(t.body, Choice):
        for i, p in enumerate(t.body.parts):
            if isinstance(p, Name) and p.id == t.id:
                return Rec(t.id, choice([x for j, x in enumerate(t.body.parts) if j != i]))
    return NOMATCH


def _tau_summands(body: NetTerm):
    parts = body.parts if isinstance(body, Choice) else (body,)
    for i, p in enumerate(parts):
        if isinstance(p, CPrefix) and isinstance(p.action, Tau):
            yield i, p, parts


def _ax_wung1(t, spec):
    if not isinstance(t, Rec):
        return NOMATCH
    for i, p, parts in _tau_summands(t.body):
        inner_parts = p.cont.parts if isinstance(p.cont, Choice) else (p.cont,)
        for j, q in enumerate(inner_parts):
            if not (isinstance(q, CPrefix) and isinstance(q.action, Tau)):
                continue
            if t.id not in free_names(q.cont) or is_guarded(t.id, q.cont):
                continue
            new_inner = choice([q.cont] + [x for k, x in enumerate(inner_parts) if k != j])
            new_parts = [CPrefix(p.guard, p.action, new_inner) if k == i else x
                         for k, x in enumerate(parts)]
            return Rec(t.id, choice(new_parts))
    return NOMATCH


def _ax_wung2(t, spec):
    if not isinstance(t, Rec):
        return NOMATCH
    for i, p, parts in _tau_summands(t.body):
        inner_parts = p.cont.parts if isinstance(p.cont, Choice) else (p.cont,)
        for j, q in enumerate(inner_parts):
            if isinstance(q, Name) and q.id == t.id:
                others = [x for k, x in enumerate(parts) if k != i]
                new_inner = choice([x for k, x in enumerate(inner_parts) if k != j] + others)
                new_parts = [CPrefix(p.guard, p.action, new_inner) if k == i else x
                             for k, x in enumerate(parts)]
                return Rec(t.id, choice(new_parts))
    return NOMATCH


def _serial(name: str, t: NetTerm) -> bool:
    if isinstance(t, Name):
        return True
    if isinstance(t, (Par, LeftMerge, CommMerge, Hide, Encap, Abstract, Deploy, LocalDeploy)):
        return name not in free_names(t)
    return all(_serial(name, k) for k in children(t))


def _ax_hid(t, spec):
    if isinstance(t, Abstract) and isinstance(t.body, Rec) and _serial(t.body.id, t.body.body):
        r = t.body
        return Rec(r.id, Abstract(t.msg, r.body))
    return NOMATCH


AXIOMS: dict[str, Callable] = {
    "Ch1": _ax_ch1, "Ch2": _ax_ch2, "Ch3": _ax_ch3, "Ch4": _ax_ch4,
    "Ch5": _ax_ch5, "Ch6": _ax_ch6,
    "Dep0": _ax_dep0, "Dep1": _ax_dep1, "Dep2": _ax_dep2, "Dep3": _ax_dep3,
    "Dep4": _ax_dep4, "Dep5": _ax_dep5, "Dep6": _ax_dep6, "Dep7": _ax_dep7,
    "TRes1": _ax_tres1, "TRes2": _ax_tres2, "TRes3": _ax_tres3,
    "TRes4": _ax_tres4, "TRes5": _ax_tres5,
    "Br": _ax_br, "LM1'": _ax_lm1p, "LM2": _ax_lm2, "LM2'": _ax_lm2p, "LM3": _ax_lm3,
    "S1": _ax_s1, "S2": _ax_s2, "S3": _ax_s3, "S4": _ax_s4,
    "Sync1": _ax_sync1, "Sync2": _ax_sync2, "Sync3": _ax_sync3,
    "Res1": _ax_res1, "Res2": _ax_res2, "Res3": _ax_res3,
    "Ecp1": _ax_ecp1, "Ecp2": _ax_ecp2, "Ecp3": _ax_ecp3, "Ecp4": _ax_ecp4,
    "Abs1": _ax_abs1, "Abs2": _ax_abs2, "Abs3": _ax_abs3, "Abs4": _ax_abs4,
    "T1": _ax_t1, "T2": _ax_t2,
    "Unfold": _ax_unfold, "Ung": _ax_ung, "WUng1": _ax_wung1, "WUng2": _ax_wung2,
    "Hid": _ax_hid,
}


def apply_axiom(t: NetTerm, axiom: str, position: tuple[int, ...],
                spec: Specification, equation: tuple[str, NetTerm] | None = None
                ) -> Optional[NetTerm]:
    """Apply a named axiom at a position; None signals no match."""
    target = subterm_at(t, position)
    if axiom == "Fold":
        if equation is None:
            return NOMATCH
        binder, body = equation
        if not is_guarded(binder, body):
            return NOMATCH
        if substitute_name(body, binder, target) == target:
            return replace_at(t, position, Rec(binder, body))
        return NOMATCH
    fn = AXIOMS.get(axiom)
    if fn is None:
        raise ValueError(f"unknown axiom {axiom!r}")
    replaced = fn(target, spec)
    if replaced is NOMATCH:
        return NOMATCH
    return replace_at(t, position, replaced)


# ---------------------------------------------------------------------------
# Rewriting strategy

#: Innermost-first priority used by the node linearizer.
_LINEARIZE_ORDER = (
    "Dep5", "Dep4", "Dep3", "Dep7", "Dep1", "Dep2", "Dep6",
    "TRes5", "TRes4", "TRes2", "TRes3", "TRes1", "Ch1",
)


def _positions_innermost(t: NetTerm, path=()):
    for i, k in enumerate(children(t)):
        yield from _positions_innermost(k, path + (i,))
    yield path


def _rewrite_exhaustively(t: NetTerm, spec: Specification, axioms, trace: RewriteTrace,
                          budget: int = 5000) -> NetTerm:
    steps = 0
    while True:
        redex = None
        for pos in _positions_innermost(t):
            for ax in axioms:
                out = apply_axiom(t, ax, pos, spec)
                if out is not None:
                    redex = (ax, pos, out)
                    break
            if redex:
                break
        if redex is None:
            return t
        ax, pos, out = redex
        trace.add(ax, pos, t, out)
        t = out
        steps += 1
        if steps > budget:
            raise NotFiniteState("rewriting step budget exceeded")


# ---------------------------------------------------------------------------
# Node linearization


def linearize_node(d: NetTerm, spec: Specification,
                   trace: RewriteTrace | None = None) -> tuple[NetTerm, RewriteTrace]:
    """Turn a deployed node into guarded recursion over prefixed actions."""
    if not isinstance(d, Deploy):
        raise TypeError("linearize_node expects a deployment")
    trace = trace if trace is not None else RewriteTrace()
    result = _linearize_state(d.body, d.at, spec, {}, trace)
    return result, trace


def _linearize_state(body: NetTerm, at: str, spec: Specification,
                     env: dict, trace: RewriteTrace) -> NetTerm:
    key = canon(Deploy(body, at))
    binder = _fresh_name(spec, key)
    env = {**env, key: binder}

    node = Deploy(body, at)
    unfolded = _ax_dep0(node, spec)
    # rebuild with our chosen binder so folding below can refer to it
    assert isinstance(unfolded, Rec)
    unfolded = Rec(binder, substitute_name(unfolded.body, unfolded.id, Name(binder)))
    trace.add("Dep0", (), node, unfolded)

    head = _rewrite_exhaustively(unfolded, spec, _LINEARIZE_ORDER, trace)

    def fold(t: NetTerm) -> NetTerm:
        if isinstance(t, Deploy):
            k = canon(t)
            if k in env:
                folded = Name(env[k])
                trace.add("Fold", (), t, folded)
                return folded
            return _linearize_state(t.body, t.at, spec, env, trace)
        kids = children(t)
        if not kids:
            return t
        return with_children(t, tuple(fold(c) for c in kids))

    assert isinstance(head, Rec)
    return Rec(head.id, fold(head.body))


# ---------------------------------------------------------------------------
# Parallel expansion


def expand_parallel(t: NetTerm, spec: Specification) -> tuple[NetTerm, RewriteTrace]:
    """One-step head expansion of a (possibly encapsulated/abstracted)
    parallel composition into a sum of prefixed continuations."""
    trace = RewriteTrace()
    engine = SosEngine(spec)
    moves = sorted(engine.transitions(canon(t)),
                   key=lambda p: (p[0].sort_key(), term_key(p[1])))
    parts = [CPrefix(label.guard, label.action, tgt) for label, tgt in moves
             if isinstance(label.guard, Constraint)]
    result = choice(parts)
    trace.add("Br,LM,Sync,Ecp,Abs", (), t, result)
    return result, trace


# ---------------------------------------------------------------------------
# Normal forms


def is_normal_form(t: NetTerm, bound: frozenset[str] = frozenset()) -> bool:
    """Only deadlock, prefixed actions, choice and recursion over bound names."""
    if isinstance(t, Nil):
        return True
    if isinstance(t, CPrefix):
        return is_normal_form(t.cont, bound)
    if isinstance(t, Choice):
        return all(is_normal_form(p, bound) for p in t.parts)
    if isinstance(t, Rec):
        return is_normal_form(t.body, bound | {t.id})
    if isinstance(t, Name):
        return t.id in bound
    return False


def _check_finite_fragment(t: NetTerm, spec: Specification,
                           binders: frozenset[str] = frozenset()) -> None:
    """Recursion binders must not cross parallel, merge, hide, abstraction or
    encapsulation operators."""
    if isinstance(t, (Par, LeftMerge, CommMerge, Hide, Abstract, Encap)):
        crossing = binders & free_names(t)
        if crossing:
            raise NotFiniteState(
                f"recursion binder(s) {sorted(crossing)} cross a non-sequential operator")
    if isinstance(t, Rec):
        _check_finite_fragment(t.body, spec, binders | {t.id})
        return
    if isinstance(t, Name):
        defn = spec.definition(t.id)
        if defn is not None and t.id not in binders:
            # treat a definition like a recursion binder over its own body
            _check_finite_fragment(defn, spec, binders | {t.id})
        return
    for k in children(t):
        _check_finite_fragment(k, spec, binders)


def normalize(t: NetTerm, spec: Specification, max_states: int = 2000,
              assert_equiv: bool = True) -> tuple[NetTerm, RewriteTrace]:
    """Normal form of a finite-state term, certified behaviorally equivalent."""
    trace = RewriteTrace()
    if is_normal_form(t):
        return t, trace
    _check_finite_fragment(t, spec)
    engine = SosEngine(spec)
    try:
        clts = engine.explore(t, max_states)
    except StateBudgetExceeded as e:
        raise NotFiniteState(str(e)) from e

    out: dict[NetTerm, list] = {s: [] for s in clts.states}
    for tr in clts.transitions:
        out[tr.src].append((tr.label, tr.dst))

    binders: dict[NetTerm, str] = {}
    closed_cache: dict[NetTerm, NetTerm] = {}

    def build(state: NetTerm, spine: frozenset[NetTerm]) -> NetTerm:
        if state in spine:
            return Name(binders[state])
        if state in closed_cache:
            return closed_cache[state]
        binder = _fresh_name(spec, state)
        binders[state] = binder
        parts = []
        for label, dst in sorted(out[state], key=lambda p: (p[0].sort_key(), term_key(p[1]))):
            cont = build(dst, spine | {state})
            if isinstance(label.guard, Constraint):
                parts.append(CPrefix(label.guard, label.action, cont))
            else:
                parts.append(MPrefix(label.guard, label.action, cont))
        body = choice(parts)
        result = Rec(binder, body) if binder in free_names(body) else body
        trace.add("Unfold,Fold", (), state, result)
        if not free_names(result):
            closed_cache[state] = result
        return result

    nf = build(clts.initial, frozenset())
    if assert_equiv:
        from .bisim import RelationMode, check_bisim
        ref = engine.explore(nf, max_states)
        verdict = check_bisim(clts, ref, RelationMode.ROOTED_BRANCHING_RELIABLE)
        if not verdict.related:
            raise AssertionError(
                "normalization produced a behaviorally different term: "
                + verdict.counterexample.render())
    return nf, trace
