"""Concrete syntax for specification files.

A file holds universe declarations followed by named definitions::

    addresses A, B, C;
    messages req, rep_B;
    internal deliver;

    proc P = sense(B, snd(req).P, 0);
    net  N = tau{*}(encap{*}(dep(P)@A || dep(Q)@B));
    spec S = rec X . ({A=>B}, deliver).X + ({A=/=>B}, tau).0;

Terms use ``.`` for prefixing (tightest), ``+`` for choice, ``||`` for
parallel and ``|>`` (loosest) for topology restriction; ``#`` starts a line
comment.  Constraints are brace-enclosed lists of ``A->B`` / ``A-/->B``
literals (multi-hop: ``A=>B`` / ``A=/=>B``), with ``?`` for the unknown
address.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .constraints import Constraint, Link, MultiHop, MultiHopLink
from .terms import (
    Abstract,
    CPrefix,
    Choice,
    Deploy,
    Encap,
    Hide,
    IAct,
    MPrefix,
    NIL,
    Name,
    NetRcv,
    NetSnd,
    NetTerm,
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
    choice,
    par,
    validate_specification,
)


@dataclass(frozen=True)
class SourceSpan:
    line: int
    column: int
    end_line: int
    end_column: int

    def __str__(self) -> str:
        return f"{self.line}:{self.column}"


@dataclass
class Diagnostic:
    message: str
    span: SourceSpan | None = None

    def __str__(self) -> str:
        where = f"{self.span}: " if self.span else ""
        return f"{where}{self.message}"


class ParseError(ValueError):
    def __init__(self, message: str, span: SourceSpan | None = None):
        super().__init__(f"{span}: {message}" if span else message)
        self.span = span
        self.message = message


@dataclass
class ParseResult:
    spec: Specification | None
    diagnostics: list[Diagnostic] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.spec is not None and not self.diagnostics


_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+|\#[^\n]*)
  | (?P<op>=/=>|-/->|=>|->|\|\||\|>|@|[(){},.;+=?*0])
  | (?P<id>[A-Za-z_][A-Za-z0-9_']*)
    """,
    re.VERBOSE,
)

KEYWORDS = {
    "addresses", "messages", "internal", "proc", "net", "spec",
    "sense", "dep", "hide", "in", "tau", "encap", "rec",
    "snd", "rcv", "nsnd", "nrcv", "local", "leftmerge", "commmerge",
}


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    span: SourceSpan


def tokenize(source: str) -> list[Token]:
    tokens = []
    line, col = 1, 1
    pos = 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            raise ParseError(f"unexpected character {source[pos]!r}",
                             SourceSpan(line, col, line, col + 1))
        text = m.group(0)
        newlines = text.count("\n")
        end_line = line + newlines
        end_col = (len(text) - text.rfind("\n")) if newlines else col + len(text)
        if not m.lastgroup == "ws":
            tokens.append(Token(m.lastgroup, text, SourceSpan(line, col, end_line, end_col)))
        line, col = end_line, end_col
        pos = m.end()
    tokens.append(Token("eof", "", SourceSpan(line, col, line, col)))
    return tokens


class _Parser:
    def __init__(self, tokens: list[Token]):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> Token:
        return self.tokens[self.pos]

    def next(self) -> Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def at(self, text: str) -> bool:
        return self.peek().text == text

    def eat(self, text: str) -> Token:
        tok = self.peek()
        if tok.text != text:
            raise ParseError(f"expected {text!r}, found {tok.text!r}", tok.span)
        return self.next()

    def eat_name(self, what: str = "identifier") -> Token:
        tok = self.peek()
        if tok.kind != "id":
            raise ParseError(f"expected {what}, found {tok.text!r}", tok.span)
        return self.next()

    # -- file structure ------------------------------------------------------

    def parse_file(self) -> Specification:
        spec = Specification()
        while not self.at(""):
            tok = self.peek()
            if tok.text == "addresses":
                self.next()
                spec.addresses = spec.addresses + self._name_list()
            elif tok.text == "messages":
                self.next()
                spec.messages = spec.messages + self._name_list()
            elif tok.text == "internal":
                self.next()
                spec.internals = spec.internals + self._name_list()
            elif tok.text in ("proc", "net", "spec"):
                kind = self.next().text
                name = self.eat_name("definition name")
                self.eat("=")
                term = self.parse_term(spec)
                self.eat(";")
                table = {"proc": spec.procs, "net": spec.nets, "spec": spec.specs}[kind]
                if name.text in table or spec.definition(name.text) is not None:
                    raise ParseError(f"duplicate definition '{name.text}'", name.span)
                table[name.text] = term
            else:
                raise ParseError(f"expected a declaration or definition, found {tok.text!r}",
                                 tok.span)
        return spec

    def _name_list(self) -> tuple[str, ...]:
        names = [self.eat_name().text]
        while self.at(","):
            self.next()
            names.append(self.eat_name().text)
        self.eat(";")
        return tuple(names)

    # -- terms ---------------------------------------------------------------

    def parse_term(self, spec: Specification) -> NetTerm:
        return self._restriction(spec)

    def _restriction(self, spec) -> NetTerm:
        if self.at("{") and self._lookahead_restriction():
            guard = self._constraint()
            self.eat("|>")
            return Restrict(guard, self._restriction(spec))
        if self.at("hide"):
            self.next()
            addrs = [self.eat_name("address").text]
            while self.at(","):
                self.next()
                addrs.append(self.eat_name("address").text)
            self.eat("in")
            body = self._restriction(spec)
            for a in reversed(addrs):
                body = Hide(a, body)
            return body
        if self.at("rec"):
            self.next()
            name = self.eat_name("recursion binder").text
            self.eat(".")
            return Rec(name, self._restriction(spec))
        return self._parallel(spec)

    def _lookahead_restriction(self) -> bool:
        # distinguish `{...} |> t` from a prefixed `({...}, act).t`
        depth = 0
        i = self.pos
        while i < len(self.tokens):
            t = self.tokens[i].text
            if t == "{":
                depth += 1
            elif t == "}":
                depth -= 1
                if depth == 0:
                    return i + 1 < len(self.tokens) and self.tokens[i + 1].text == "|>"
            i += 1
        return False

    def _parallel(self, spec) -> NetTerm:
        parts = [self._choice(spec)]
        while self.at("||"):
            self.next()
            parts.append(self._choice(spec))
        return par(parts) if len(parts) > 1 else parts[0]

    def _choice(self, spec) -> NetTerm:
        parts = [self._prefix(spec)]
        while self.at("+"):
            self.next()
            parts.append(self._prefix(spec))
        return choice(parts) if len(parts) > 1 else parts[0]

    def _prefix(self, spec) -> NetTerm:
        tok = self.peek()
        if tok.text == "(":
            if self._looks_like_guarded_prefix():
                self.next()
                return self._guarded_prefix(spec)
            self.next()
            inner = self.parse_term(spec)
            self.eat(")")
            return inner
        if tok.text == "0":
            self.next()
            return NIL
        if tok.text == "dep":
            self.next()
            self.eat("(")
            body = self.parse_term(spec)
            self.eat(")")
            self.eat("@")
            at = self.eat_name("address").text
            return Deploy(body, at)
        if tok.text == "local":
            self.next()
            self.eat("(")
            at = self.eat_name("address").text
            self.eat(",")
            fallback = self.parse_term(spec)
            self.eat(",")
            body = self.parse_term(spec)
            self.eat(")")
            return LocalDeploy(at, fallback, body)
        if tok.text == "sense":
            self.next()
            self.eat("(")
            target = self.eat_name("address").text
            self.eat(",")
            then = self.parse_term(spec)
            self.eat(",")
            els = self.parse_term(spec)
            self.eat(")")
            return Sense(target, then, els)
        if tok.text in ("tau", "encap") and self.tokens[self.pos + 1].text == "{":
            kind = self.next().text
            msgs = self._msgset(spec)
            self.eat("(")
            body = self.parse_term(spec)
            self.eat(")")
            wrap = Abstract if kind == "tau" else Encap
            for m in reversed(msgs):
                body = wrap(m, body)
            return body
        if tok.text in ("leftmerge", "commmerge"):
            kind = self.next().text
            self.eat("(")
            left = self.parse_term(spec)
            self.eat(",")
            right = self.parse_term(spec)
            self.eat(")")
            from .terms import CommMerge, LeftMerge
            return LeftMerge(left, right) if kind == "leftmerge" else CommMerge(left, right)
        # action prefix or bare name
        action = self._try_action(spec)
        if action is not None:
            self.eat(".")
            cont = self._prefix(spec)
            if isinstance(action, Tau):
                return CPrefix(Constraint(frozenset()), action, cont)
            return Prefix(action, cont)
        name = self.eat_name("term")
        return Name(name.text)

    def _looks_like_guarded_prefix(self) -> bool:
        # at "(": a guarded prefix is "( { ... } , ACTION ) . ..."
        if self.tokens[self.pos + 1].text != "{":
            return False
        i = self.pos + 1
        depth = 0
        while i < len(self.tokens):
            t = self.tokens[i].text
            if t == "{":
                depth += 1
            elif t == "}":
                depth -= 1
                if depth == 0:
                    return i + 1 < len(self.tokens) and self.tokens[i + 1].text == ","
            i += 1
        return False

    def _guarded_prefix(self, spec) -> NetTerm:
        # after the opening "(", positioned at "{"
        literals, multi = self._literals()
        self.eat(",")
        action = self._action(spec)
        self.eat(")")
        self.eat(".")
        cont = self._prefix(spec)
        if multi:
            return MPrefix(MultiHop(frozenset(literals)), action, cont)
        return CPrefix(Constraint(frozenset(literals)), action, cont)

    def _constraint(self) -> Constraint:
        literals, multi = self._literals()
        if multi:
            raise ParseError("multi-hop literals cannot appear in a topology restriction",
                             self.peek().span)
        return Constraint(frozenset(literals))

    def _literals(self):
        self.eat("{")
        one_hop: list[Link] = []
        multi: list[MultiHopLink] = []
        if not self.at("}"):
            while True:
                src = self._address()
                arrow = self.next()
                if arrow.text in ("->", "-/->"):
                    dst = self._address()
                    one_hop.append(Link(src, dst, arrow.text == "->"))
                elif arrow.text in ("=>", "=/=>"):
                    dst = self._address()
                    multi.append(MultiHopLink(src, dst, arrow.text == "=>"))
                else:
                    raise ParseError(f"expected a link arrow, found {arrow.text!r}", arrow.span)
                if self.at(","):
                    self.next()
                    continue
                break
        self.eat("}")
        if one_hop and multi:
            raise ParseError("cannot mix one-hop and multi-hop literals", self.peek().span)
        return (multi if multi else one_hop), bool(multi)

    def _address(self) -> str:
        tok = self.peek()
        if tok.text == "?":
            self.next()
            return "?"
        return self.eat_name("address").text

    def _msgset(self, spec) -> list[str]:
        self.eat("{")
        if self.at("*"):
            self.next()
            self.eat("}")
            return sorted(spec.messages)
        msgs = [self.eat_name("message").text]
        while self.at(","):
            self.next()
            msgs.append(self.eat_name("message").text)
        self.eat("}")
        return msgs

    def _try_action(self, spec):
        tok = self.peek()
        if tok.text == "snd":
            self.next(); self.eat("("); m = self.eat_name("message").text; self.eat(")")
            return Snd(m)
        if tok.text == "rcv":
            self.next(); self.eat("("); m = self.eat_name("message").text; self.eat(")")
            return Rcv(m)
        if tok.text == "nsnd":
            self.next(); self.eat("("); m = self.eat_name("message").text
            self.eat(","); src = self._address(); self.eat(")")
            return NetSnd(m, src)
        if tok.text == "nrcv":
            self.next(); self.eat("("); m = self.eat_name("message").text; self.eat(")")
            return NetRcv(m)
        if tok.text == "tau" and self.tokens[self.pos + 1].text != "{":
            self.next()
            return TAU
        if (tok.kind == "id" and tok.text not in KEYWORDS
                and spec is not None and tok.text in spec.internals
                and self.tokens[self.pos + 1].text == "."):
            self.next()
            return IAct(tok.text)
        return None

    def _action(self, spec):
        a = self._try_action_strict(spec)
        if a is None:
            tok = self.peek()
            raise ParseError(f"expected an action, found {tok.text!r}", tok.span)
        return a

    def _try_action_strict(self, spec):
        tok = self.peek()
        if tok.text in ("snd", "rcv", "nsnd", "nrcv"):
            return self._try_action(spec)
        if tok.text == "tau":
            self.next()
            return TAU
        if tok.kind == "id" and tok.text not in KEYWORDS:
            self.next()
            return IAct(tok.text)
        return None


def parse(source: str) -> ParseResult:
    """Parse a specification file and validate every definition."""
    try:
        tokens = tokenize(source)
        spec = _Parser(tokens).parse_file()
    except ParseError as e:
        return ParseResult(None, [Diagnostic(e.message, e.span)])
    diagnostics = [Diagnostic(str(v)) for v in validate_specification(spec)]
    return ParseResult(spec, diagnostics)


def parse_term(source: str, spec: Specification) -> NetTerm:
    """Parse a single term against an existing specification's universes."""
    tokens = tokenize(source)
    p = _Parser(tokens)
    term = p.parse_term(spec)
    tok = p.peek()
    if tok.kind != "eof":
        raise ParseError(f"trailing input {tok.text!r}", tok.span)
    return term
