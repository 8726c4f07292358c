"""Abstract syntax of process and network terms, validation and substitution.

Protocol processes (the code a single node runs) are built from deadlock,
action prefix, choice, sense and process names, and become network behavior
only once deployed at an address.  Network terms add parallel composition,
the auxiliary merge operators, hiding, abstraction, encapsulation, topology
restriction, recursion and constraint- or multihop-prefixed actions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Union

from .constraints import (
    UNKNOWN,
    Constraint,
    MultiHop,
    constraint,
    multihop_well_formed,
    substitute as subst_constraint,
    well_formed,
)

# ---------------------------------------------------------------------------
# Actions


@dataclass(frozen=True)
class Snd:
    """Protocol send: hand a message to the data link layer."""

    msg: str

    def render(self) -> str:
        return f"snd({self.msg})"


@dataclass(frozen=True)
class Rcv:
    """Protocol receive: accept a message from the data link layer."""

    msg: str

    def render(self) -> str:
        return f"rcv({self.msg})"


@dataclass(frozen=True)
class NetSnd:
    """Network send of a message from a (possibly concealed) source address."""

    msg: str
    src: str

    def render(self) -> str:
        return f"nsnd({self.msg}, {self.src})"


@dataclass(frozen=True)
class NetRcv:
    msg: str

    def render(self) -> str:
        return f"nrcv({self.msg})"


@dataclass(frozen=True)
class IAct:
    """Internal (application-level) action, observable."""

    name: str

    def render(self) -> str:
        return self.name


@dataclass(frozen=True)
class Tau:
    def render(self) -> str:
        return "tau"


TAU = Tau()

Action = Union[Snd, Rcv, NetSnd, NetRcv, IAct, Tau]

_ACTION_ORDER = {Tau: 0, IAct: 1, Snd: 2, Rcv: 3, NetSnd: 4, NetRcv: 5}


def action_key(a: Action):
    if isinstance(a, Tau):
        return (0,)
    if isinstance(a, IAct):
        return (1, a.name)
    if isinstance(a, Snd):
        return (2, a.msg)
    if isinstance(a, Rcv):
        return (3, a.msg)
    if isinstance(a, NetSnd):
        return (4, a.msg, a.src)
    return (5, a.msg)


def substitute_action(a: Action, new: str, old: str) -> Action:
    if isinstance(a, NetSnd) and a.src == old:
        return NetSnd(a.msg, new)
    return a


# ---------------------------------------------------------------------------
# Terms


@dataclass(frozen=True)
class Nil:
    pass


@dataclass(frozen=True)
class Prefix:
    """Protocol-level prefix; the action is a send/receive or internal action."""

    action: Action
    cont: "NetTerm"


@dataclass(frozen=True)
class CPrefix:
    """Computed-network prefix (constraint, action)."""

    guard: Constraint
    action: Action
    cont: "NetTerm"


@dataclass(frozen=True)
class MPrefix:
    """Specification prefix (multi-hop constraint, internal action or tau)."""

    guard: MultiHop
    action: Action
    cont: "NetTerm"


@dataclass(frozen=True)
class Choice:
    parts: tuple["NetTerm", ...]


@dataclass(frozen=True)
class Par:
    parts: tuple["NetTerm", ...]


@dataclass(frozen=True)
class LeftMerge:
    left: "NetTerm"
    right: "NetTerm"


@dataclass(frozen=True)
class CommMerge:
    left: "NetTerm"
    right: "NetTerm"


@dataclass(frozen=True)
class Deploy:
    """Process ``body`` running on the node with known address ``at``."""

    body: "NetTerm"
    at: str


@dataclass(frozen=True)
class LocalDeploy:
    """Deployment that delegates dropped messages to ``fallback``."""

    at: str
    fallback: "NetTerm"
    body: "NetTerm"


@dataclass(frozen=True)
class Sense:
    """Branch on the existence of the link from the executing node to target."""

    target: str
    then: "NetTerm"
    els: "NetTerm"


@dataclass(frozen=True)
class Hide:
    addr: str
    body: "NetTerm"


@dataclass(frozen=True)
class Abstract:
    """Rename network sends/receives of one message type to tau."""

    msg: str
    body: "NetTerm"


@dataclass(frozen=True)
class Encap:
    """Forbid receiving one message type from the environment."""

    msg: str
    body: "NetTerm"


@dataclass(frozen=True)
class Name:
    id: str


@dataclass(frozen=True)
class Rec:
    id: str
    body: "NetTerm"


@dataclass(frozen=True)
class Restrict:
    """Topology restriction: add the guard to every behavior of the body."""

    guard: Constraint
    body: "NetTerm"


NetTerm = Union[
    Nil, Prefix, CPrefix, MPrefix, Choice, Par, LeftMerge, CommMerge,
    Deploy, LocalDeploy, Sense, Hide, Abstract, Encap, Name, Rec, Restrict,
]

NIL = Nil()


def choice(parts: Iterable[NetTerm]) -> NetTerm:
    """N-ary choice; flattens nested sums, 0 of them is Nil, 1 is the part."""
    flat: list[NetTerm] = []
    for p in parts:
        if isinstance(p, Choice):
            flat.extend(p.parts)
        else:
            flat.append(p)
    if not flat:
        return NIL
    if len(flat) == 1:
        return flat[0]
    return Choice(tuple(flat))


def par(parts: Iterable[NetTerm]) -> NetTerm:
    flat: list[NetTerm] = []
    for p in parts:
        if isinstance(p, Par):
            flat.extend(p.parts)
        else:
            flat.append(p)
    if not flat:
        return NIL
    if len(flat) == 1:
        return flat[0]
    return Par(tuple(flat))


# ---------------------------------------------------------------------------
# Specification files


class SpecError(ValueError):
    pass


@dataclass
class Specification:
    """Declared universes plus named process/network/specification terms."""

    addresses: tuple[str, ...] = ()
    messages: tuple[str, ...] = ()
    internals: tuple[str, ...] = ()
    procs: dict[str, NetTerm] = field(default_factory=dict)
    nets: dict[str, NetTerm] = field(default_factory=dict)
    specs: dict[str, NetTerm] = field(default_factory=dict)

    def definition(self, name: str) -> Optional[NetTerm]:
        for table in (self.procs, self.nets, self.specs):
            if name in table:
                return table[name]
        return None

    def defined_names(self) -> set[str]:
        return set(self.procs) | set(self.nets) | set(self.specs)


# ---------------------------------------------------------------------------
# Structure helpers


def children(t: NetTerm) -> tuple[NetTerm, ...]:
    if isinstance(t, (Prefix, CPrefix, MPrefix)):
        return (t.cont,)
    if isinstance(t, (Choice, Par)):
        return t.parts
    if isinstance(t, (LeftMerge, CommMerge)):
        return (t.left, t.right)
    if isinstance(t, Deploy):
        return (t.body,)
    if isinstance(t, LocalDeploy):
        return (t.fallback, t.body)
    if isinstance(t, Sense):
        return (t.then, t.els)
    if isinstance(t, (Hide, Abstract, Encap, Rec, Restrict)):
        return (t.body,)
    return ()


def with_children(t: NetTerm, kids: tuple[NetTerm, ...]) -> NetTerm:
    if isinstance(t, Prefix):
        return Prefix(t.action, kids[0])
    if isinstance(t, CPrefix):
        return CPrefix(t.guard, t.action, kids[0])
    if isinstance(t, MPrefix):
        return MPrefix(t.guard, t.action, kids[0])
    if isinstance(t, Choice):
        return Choice(kids)
    if isinstance(t, Par):
        return Par(kids)
    if isinstance(t, LeftMerge):
        return LeftMerge(kids[0], kids[1])
    if isinstance(t, CommMerge):
        return CommMerge(kids[0], kids[1])
    if isinstance(t, Deploy):
        return Deploy(kids[0], t.at)
    if isinstance(t, LocalDeploy):
        return LocalDeploy(t.at, kids[0], kids[1])
    if isinstance(t, Sense):
        return Sense(t.target, kids[0], kids[1])
    if isinstance(t, Hide):
        return Hide(t.addr, kids[0])
    if isinstance(t, Abstract):
        return Abstract(t.msg, kids[0])
    if isinstance(t, Encap):
        return Encap(t.msg, kids[0])
    if isinstance(t, Rec):
        return Rec(t.id, kids[0])
    if isinstance(t, Restrict):
        return Restrict(t.guard, kids[0])
    return t


def subterm_at(t: NetTerm, path: tuple[int, ...]) -> NetTerm:
    for i in path:
        t = children(t)[i]
    return t


def replace_at(t: NetTerm, path: tuple[int, ...], new: NetTerm) -> NetTerm:
    if not path:
        return new
    kids = list(children(t))
    kids[path[0]] = replace_at(kids[path[0]], path[1:], new)
    return with_children(t, tuple(kids))


def substitute_address(x, new: str, old: str):
    """Replace an address in a term, action or constraint."""
    if isinstance(x, Constraint):
        return subst_constraint(x, new, old)
    if isinstance(x, (Snd, Rcv, NetSnd, NetRcv, IAct, Tau)):
        return substitute_action(x, new, old)
    t = x
    if isinstance(t, CPrefix):
        return CPrefix(subst_constraint(t.guard, new, old),
                       substitute_action(t.action, new, old),
                       substitute_address(t.cont, new, old))
    if isinstance(t, Prefix):
        return Prefix(substitute_action(t.action, new, old),
                      substitute_address(t.cont, new, old))
    if isinstance(t, Deploy):
        return Deploy(substitute_address(t.body, new, old),
                      new if t.at == old else t.at)
    if isinstance(t, LocalDeploy):
        return LocalDeploy(new if t.at == old else t.at,
                           substitute_address(t.fallback, new, old),
                           substitute_address(t.body, new, old))
    if isinstance(t, Sense):
        return Sense(new if t.target == old else t.target,
                     substitute_address(t.then, new, old),
                     substitute_address(t.els, new, old))
    if isinstance(t, Hide):
        return Hide(new if t.addr == old else t.addr,
                    substitute_address(t.body, new, old))
    if isinstance(t, Restrict):
        return Restrict(subst_constraint(t.guard, new, old),
                        substitute_address(t.body, new, old))
    kids = children(t)
    if not kids:
        return t
    return with_children(t, tuple(substitute_address(k, new, old) for k in kids))


def substitute_name(t: NetTerm, name: str, repl: NetTerm) -> NetTerm:
    """Replace free occurrences of a process name by a term."""
    if isinstance(t, Name):
        return repl if t.id == name else t
    if isinstance(t, Rec) and t.id == name:
        return t
    kids = children(t)
    if not kids:
        return t
    return with_children(t, tuple(substitute_name(k, name, repl) for k in kids))


def free_names(t: NetTerm, bound: frozenset[str] = frozenset()) -> set[str]:
    if isinstance(t, Name):
        return set() if t.id in bound else {t.id}
    if isinstance(t, Rec):
        return free_names(t.body, bound | {t.id})
    out: set[str] = set()
    for k in children(t):
        out |= free_names(k, bound)
    return out


# ---------------------------------------------------------------------------
# Canonical forms

_TAG_ORDER = [
    Nil, Prefix, CPrefix, MPrefix, Choice, Par, LeftMerge, CommMerge,
    Deploy, LocalDeploy, Sense, Hide, Abstract, Encap, Name, Rec, Restrict,
]
_TAG_INDEX = {cls: i for i, cls in enumerate(_TAG_ORDER)}


def term_key(t: NetTerm):
    """A total order on terms used for canonical sorting of sums and parallels."""
    i = _TAG_INDEX[type(t)]
    if isinstance(t, Nil):
        return (i,)
    if isinstance(t, Prefix):
        return (i, action_key(t.action), term_key(t.cont))
    if isinstance(t, CPrefix):
        return (i, t.guard.sort_key(), action_key(t.action), term_key(t.cont))
    if isinstance(t, MPrefix):
        return (i, t.guard.sort_key(), action_key(t.action), term_key(t.cont))
    if isinstance(t, (Choice, Par)):
        return (i, tuple(term_key(p) for p in t.parts))
    if isinstance(t, (LeftMerge, CommMerge)):
        return (i, term_key(t.left), term_key(t.right))
    if isinstance(t, Deploy):
        return (i, t.at, term_key(t.body))
    if isinstance(t, LocalDeploy):
        return (i, t.at, term_key(t.fallback), term_key(t.body))
    if isinstance(t, Sense):
        return (i, t.target, term_key(t.then), term_key(t.els))
    if isinstance(t, Hide):
        return (i, t.addr, term_key(t.body))
    if isinstance(t, (Abstract, Encap)):
        return (i, t.msg, term_key(t.body))
    if isinstance(t, Name):
        return (i, t.id)
    if isinstance(t, Rec):
        return (i, t.id, term_key(t.body))
    if isinstance(t, Restrict):
        return (i, t.guard.sort_key(), term_key(t.body))
    raise TypeError(t)


def canon(t: NetTerm) -> NetTerm:
    """Canonical form for state identity.

    Choice children are flattened, deduplicated, sorted, and Nil summands are
    dropped; Par children are flattened and sorted; CommMerge children are
    sorted (it is commutative).  Sound because choice and parallel composition
    are associative and commutative up to the behavioral equivalences.
    """
    kids = children(t)
    if kids:
        t = with_children(t, tuple(canon(k) for k in kids))
    if isinstance(t, Choice):
        flat: list[NetTerm] = []
        for p in t.parts:
            if isinstance(p, Choice):
                flat.extend(p.parts)
            elif not isinstance(p, Nil):
                flat.append(p)
        uniq = sorted(set(flat), key=term_key)
        if not uniq:
            return NIL
        if len(uniq) == 1:
            return uniq[0]
        return Choice(tuple(uniq))
    if isinstance(t, Par):
        flat = []
        for p in t.parts:
            if isinstance(p, Par):
                flat.extend(p.parts)
            else:
                flat.append(p)
        return Par(tuple(sorted(flat, key=term_key)))
    if isinstance(t, CommMerge):
        l, r = sorted((t.left, t.right), key=term_key)
        return CommMerge(l, r)
    return t


# ---------------------------------------------------------------------------
# Validation


@dataclass(frozen=True)
class Violation:
    path: str
    message: str

    def __str__(self) -> str:
        return f"at {self.path or '<root>'}: {self.message}"


def _fmt_path(path: tuple[int, ...]) -> str:
    return "/" + "/".join(str(i) for i in path) if path else ""


def validate_term(t: NetTerm, spec: Specification) -> list[Violation]:
    """Grammatical well-formedness report; empty means the term is valid."""
    out: list[Violation] = []
    _validate(t, spec, False, False, frozenset(), (), out)
    return out


def _is_protocol_action(a: Action) -> bool:
    return isinstance(a, (Snd, Rcv, IAct))


def _validate(t, spec, deployed, hidden, bound, path, out, summand_of=None):
    def bad(msg):
        out.append(Violation(_fmt_path(path), msg))

    def check_msg(m):
        if m not in spec.messages:
            bad(f"undeclared message '{m}'")

    def check_addr(a, allow_unknown=False):
        if a == UNKNOWN:
            if not allow_unknown:
                bad("unknown address '?' not allowed here")
        elif a not in spec.addresses:
            bad(f"undeclared address '{a}'")

    if isinstance(t, Nil):
        return
    if isinstance(t, Prefix):
        a = t.action
        if not _is_protocol_action(a):
            bad("bare prefix must carry a protocol send/receive or internal action")
        if isinstance(a, (Snd, Rcv)):
            check_msg(a.msg)
            if not deployed:
                bad(f"protocol action {a.render()} outside a deployment")
        if isinstance(a, IAct) and a.name not in spec.internals:
            bad(f"undeclared internal action '{a.name}'")
        _validate(t.cont, spec, deployed, hidden, bound, path + (0,), out)
        return
    if isinstance(t, CPrefix):
        if deployed:
            bad("constraint-prefixed action inside a deployed process")
        if not well_formed(t.guard.literals):
            bad(f"ill-formed constraint {t.guard}")
        for l in t.guard.literals:
            check_addr(l.src, allow_unknown=True)
            check_addr(l.dst, allow_unknown=True)
        a = t.action
        if isinstance(a, (Snd, Rcv)):
            bad("constraint prefix cannot carry a protocol send/receive")
        if isinstance(a, (NetSnd, NetRcv)):
            check_msg(a.msg)
        if isinstance(a, NetSnd):
            check_addr(a.src, allow_unknown=True)
            if a.src == UNKNOWN and not hidden:
                bad("network send with unknown source outside a hidden scope")
        if isinstance(a, IAct) and a.name not in spec.internals:
            bad(f"undeclared internal action '{a.name}'")
        _validate(t.cont, spec, deployed, hidden, bound, path + (0,), out)
        return
    if isinstance(t, MPrefix):
        if deployed:
            bad("multi-hop prefix inside a deployed process")
        if not isinstance(t.action, (IAct, Tau)):
            bad("multi-hop prefix actions must be internal actions or tau")
        if isinstance(t.action, IAct) and t.action.name not in spec.internals:
            bad(f"undeclared internal action '{t.action.name}'")
        if not multihop_well_formed(t.guard):
            bad(f"ill-formed multi-hop constraint {t.guard}")
        for l in t.guard.literals:
            check_addr(l.src)
            check_addr(l.dst)
        _validate(t.cont, spec, deployed, hidden, bound, path + (0,), out)
        return
    if isinstance(t, Choice):
        has_multi = any(isinstance(p, MPrefix) for p in t.parts)
        has_net = any(isinstance(p, CPrefix) for p in t.parts)
        if has_multi and has_net:
            bad("choice mixes a constraint-prefixed and a multi-hop-prefixed summand")
        for i, p in enumerate(t.parts):
            _validate(p, spec, deployed, hidden, bound, path + (i,), out)
        return
    if isinstance(t, Sense):
        if not deployed:
            bad("sense outside a deployment")
        check_addr(t.target)
        _validate(t.then, spec, deployed, hidden, bound, path + (0,), out)
        _validate(t.els, spec, deployed, hidden, bound, path + (1,), out)
        return
    if isinstance(t, Name):
        if t.id not in bound and spec.definition(t.id) is None:
            bad(f"unbound process name '{t.id}'")
        return
    if isinstance(t, Rec):
        if t.id in bound or spec.definition(t.id) is not None:
            bad(f"recursion binder '{t.id}' shadows an existing definition")
        _validate(t.body, spec, deployed, hidden, bound | {t.id}, path + (0,), out)
        return
    if deployed:
        bad(f"operator {type(t).__name__} not allowed inside a deployed process")
        return
    if isinstance(t, Deploy):
        check_addr(t.at)
        _validate(t.body, spec, True, hidden, bound, path + (0,), out)
        return
    if isinstance(t, LocalDeploy):
        check_addr(t.at)
        _validate(t.fallback, spec, False, hidden, bound, path + (0,), out)
        _validate(t.body, spec, True, hidden, bound, path + (1,), out)
        return
    if isinstance(t, (Par, LeftMerge, CommMerge)):
        for i, p in enumerate(children(t)):
            _validate(p, spec, False, hidden, bound, path + (i,), out)
        return
    if isinstance(t, Hide):
        check_addr(t.addr)
        _validate(t.body, spec, False, True, bound, path + (0,), out)
        return
    if isinstance(t, (Abstract, Encap)):
        if t.msg not in spec.messages:
            bad(f"undeclared message '{t.msg}'")
        _validate(t.body, spec, False, hidden, bound, path + (0,), out)
        return
    if isinstance(t, Restrict):
        if not well_formed(t.guard.literals):
            bad(f"ill-formed constraint {t.guard}")
        _validate(t.body, spec, False, hidden, bound, path + (0,), out)
        return
    raise TypeError(t)


def validate_specification(spec: Specification) -> list[Violation]:
    out: list[Violation] = []
    seen: set[str] = set()
    for universe, kind in ((spec.addresses, "address"), (spec.messages, "message"),
                           (spec.internals, "internal action")):
        for n in universe:
            if n in seen:
                out.append(Violation("", f"duplicate declaration '{n}'"))
            seen.add(n)
    for table in (spec.procs, spec.nets, spec.specs):
        for name, term in table.items():
            if name in seen:
                out.append(Violation("", f"definition '{name}' shadows another name"))
            deployed = table is spec.procs
            for v in _validate_def(term, spec, deployed):
                out.append(Violation(f"{name}{v.path}", v.message))
        seen |= set(table)
    return out


def _validate_def(term: NetTerm, spec: Specification, deployed: bool) -> list[Violation]:
    out: list[Violation] = []
    _validate(term, spec, deployed, False, frozenset(), (), out)
    return out


# ---------------------------------------------------------------------------
# Guardedness


def is_guarded(name: str, t: NetTerm, spec: Specification | None = None) -> bool:
    """Every free occurrence of ``name`` sits under a non-tau action prefix
    and outside any abstraction operator."""
    return _guarded(name, t, False, False)


def _guarded(name, t, under_prefix, under_abs):
    if isinstance(t, Name):
        if t.id != name:
            return True
        return under_prefix and not under_abs
    if isinstance(t, Rec) and t.id == name:
        return True
    if isinstance(t, Prefix):
        # protocol prefixes are never tau
        return _guarded(name, t.cont, True, under_abs)
    if isinstance(t, (CPrefix, MPrefix)):
        guards = not isinstance(t.action, Tau)
        return _guarded(name, t.cont, under_prefix or guards, under_abs)
    if isinstance(t, Abstract):
        return _guarded(name, t.body, under_prefix, True)
    return all(_guarded(name, k, under_prefix, under_abs) for k in children(t))


def term_is_guarded(t: NetTerm) -> bool:
    """Every recursion binder in the term is guarded in its body."""
    if isinstance(t, Rec) and not is_guarded(t.id, t.body):
        return False
    return all(term_is_guarded(k) for k in children(t))


# ---------------------------------------------------------------------------
# Pretty printing (DSL concrete syntax)

_PREC_PREFIX = 4
_PREC_CHOICE = 3
_PREC_PAR = 2
_PREC_RESTRICT = 1


def render_action(a: Action) -> str:
    return a.render()


def pretty(t: NetTerm) -> str:
    return _pp(t, 0)


def _pp(t: NetTerm, prec: int) -> str:
    def wrap(s: str, my: int) -> str:
        return f"({s})" if my < prec else s

    if isinstance(t, Nil):
        return "0"
    if isinstance(t, Prefix):
        return wrap(f"{t.action.render()}.{_pp(t.cont, _PREC_PREFIX)}", _PREC_PREFIX)
    if isinstance(t, CPrefix):
        return wrap(f"({t.guard.render()}, {t.action.render()}).{_pp(t.cont, _PREC_PREFIX)}",
                    _PREC_PREFIX)
    if isinstance(t, MPrefix):
        return wrap(f"({t.guard.render()}, {t.action.render()}).{_pp(t.cont, _PREC_PREFIX)}",
                    _PREC_PREFIX)
    if isinstance(t, Choice):
        return wrap(" + ".join(_pp(p, _PREC_CHOICE + 1) for p in t.parts), _PREC_CHOICE)
    if isinstance(t, Par):
        return wrap(" || ".join(_pp(p, _PREC_PAR + 1) for p in t.parts), _PREC_PAR)
    if isinstance(t, LeftMerge):
        return wrap(f"leftmerge({_pp(t.left, 0)}, {_pp(t.right, 0)})", _PREC_PREFIX)
    if isinstance(t, CommMerge):
        return wrap(f"commmerge({_pp(t.left, 0)}, {_pp(t.right, 0)})", _PREC_PREFIX)
    if isinstance(t, Deploy):
        return f"dep({_pp(t.body, 0)})@{t.at}"
    if isinstance(t, LocalDeploy):
        return f"local({t.at}, {_pp(t.fallback, 0)}, {_pp(t.body, 0)})"
    if isinstance(t, Sense):
        return f"sense({t.target}, {_pp(t.then, 0)}, {_pp(t.els, 0)})"
    if isinstance(t, Hide):
        return wrap(f"hide {t.addr} in {_pp(t.body, _PREC_RESTRICT)}", _PREC_RESTRICT)
    if isinstance(t, Abstract):
        return f"tau{{{t.msg}}}({_pp(t.body, 0)})"
    if isinstance(t, Encap):
        return f"encap{{{t.msg}}}({_pp(t.body, 0)})"
    if isinstance(t, Name):
        return t.id
    if isinstance(t, Rec):
        return wrap(f"rec {t.id} . {_pp(t.body, _PREC_RESTRICT)}", _PREC_RESTRICT)
    if isinstance(t, Restrict):
        return wrap(f"{t.guard.render()} |> {_pp(t.body, _PREC_RESTRICT)}", _PREC_RESTRICT)
    raise TypeError(t)
