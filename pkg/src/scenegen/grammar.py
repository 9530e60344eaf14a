"""Context-free scene grammars: DSL parsing and stack-based derivation.

Grammar files hold one production per statement, terminated by ';':

    Scene -> bg Digits ;
    Digits -> Digit Digits | eps ;
    @renderable d0 d1 ;
    # comments run to end of line

Symbols never appearing on a left-hand side are terminals.  `@renderable`
marks the symbols that become scene-graph nodes (terminals become leaves,
nonterminals become container nodes that parent their subtree).
"""

import re
from dataclasses import dataclass, field

import numpy as np

EPS = "eps"

_TOKEN_RE = re.compile(r"->|\||;|@renderable\b|[A-Za-z0-9_]+")


class GrammarError(ValueError):
    """Raised for malformed or invalid grammar sources."""

    def __init__(self, msg, line=None, col=None):
        loc = ""
        if line is not None:
            loc = f" (line {line}" + (f", col {col}" if col is not None else "") + ")"
        super().__init__(msg + loc)
        self.line = line
        self.col = col


class DerivationError(ValueError):
    """Raised when a rule sequence cannot be replayed against a grammar."""


@dataclass(frozen=True)
class Symbol:
    name: str
    kind: str  # "terminal" | "nonterminal"
    renderable: bool = False

    @property
    def is_terminal(self):
        return self.kind == "terminal"


@dataclass(frozen=True)
class Rule:
    index: int
    lhs: str
    rhs: tuple  # tuple of symbol names, empty for an eps production

    def __str__(self):
        rhs = " ".join(self.rhs) if self.rhs else EPS
        return f"[{self.index}] {self.lhs} -> {rhs}"


class Grammar:
    """Immutable symbol table plus densely indexed expansion rules."""

    def __init__(self, symbols, rules, start, source=""):
        self.symbols = symbols  # name -> Symbol
        self.rules = rules  # list indexed by rule index
        self.start = start
        self.source = source
        self._by_lhs = {}
        for r in rules:
            self._by_lhs.setdefault(r.lhs, []).append(r.index)
        self._masks = {}
        for nt, idxs in self._by_lhs.items():
            m = np.zeros(len(rules), dtype=bool)
            m[idxs] = True
            self._masks[nt] = m

    @property
    def K(self):
        return len(self.rules)

    def is_nonterminal(self, name):
        return name in self._by_lhs

    def rules_for(self, nt):
        return self._by_lhs[nt]

    def rule_index(self, lhs, rhs):
        """Look up a rule by its shape; rhs is a sequence of symbol names."""
        rhs = tuple(rhs)
        for i in self._by_lhs.get(lhs, []):
            if self.rules[i].rhs == rhs:
                return i
        raise KeyError(f"no rule {lhs} -> {' '.join(rhs) or EPS}")

    def source_hash(self):
        import hashlib

        return hashlib.sha256(self.source.encode()).hexdigest()[:16]


def mask_for(grammar, nt):
    """Binary validity vector over all K rules for nonterminal `nt`."""
    if nt not in grammar._by_lhs:
        raise GrammarError(f"'{nt}' is not a nonterminal of this grammar")
    return grammar._masks[nt].copy()


def _tokenize(text):
    tokens = []  # (tok, line, col)
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0]
        pos = 0
        for m in _TOKEN_RE.finditer(line):
            if line[pos : m.start()].strip():
                raise GrammarError(
                    f"unexpected character {line[pos:m.start()].strip()[0]!r}",
                    ln,
                    pos + 1,
                )
            tokens.append((m.group(), ln, m.start() + 1))
            pos = m.end()
        if line[pos:].strip():
            raise GrammarError(
                f"unexpected character {line[pos:].strip()[0]!r}", ln, pos + 1
            )
    return tokens


def _split_statements(tokens):
    stmt = []
    for tok in tokens:
        if tok[0] == ";":
            if stmt:
                yield stmt
            stmt = []
        else:
            stmt.append(tok)
    if stmt:
        raise GrammarError("missing ';' at end of statement", stmt[0][1])


def parse_grammar(text):
    """Parse DSL source into a validated Grammar.

    Rule indices follow source order (alternatives expand left to right),
    so identical text always yields identical indexing.
    """
    productions = []  # (lhs, rhs tuple, line)
    renderable = []  # (name, line)
    for stmt in _split_statements(_tokenize(text)):
        head, line, col = stmt[0]
        if head == "@renderable":
            for name, ln, c in stmt[1:]:
                if name in ("->", "|", "@renderable"):
                    raise GrammarError(f"unexpected {name!r} in @renderable", ln, c)
                renderable.append((name, ln))
            if len(stmt) == 1:
                raise GrammarError("@renderable lists no symbols", line, col)
            continue
        if head in ("->", "|"):
            raise GrammarError(f"statement cannot start with {head!r}", line, col)
        if len(stmt) < 2 or stmt[1][0] != "->":
            raise GrammarError(f"expected '->' after {head!r}", line, col)
        alts = [[]]
        for tok, ln, c in stmt[2:]:
            if tok == "|":
                alts.append([])
            elif tok in ("->", "@renderable"):
                raise GrammarError(f"unexpected {tok!r} in rule body", ln, c)
            else:
                alts[-1].append(tok)
        for alt in alts:
            if not alt:
                raise GrammarError(f"empty alternative for {head!r}", line, col)
            if EPS in alt and len(alt) > 1:
                raise GrammarError(f"'{EPS}' must stand alone in an alternative", line, col)
            rhs = () if alt == [EPS] else tuple(alt)
            productions.append((head, rhs, line))

    if not productions:
        raise GrammarError("grammar defines no rules")

    nonterminals = {lhs for lhs, _, _ in productions}
    if EPS in nonterminals:
        raise GrammarError(f"'{EPS}' cannot appear as a left-hand side")
    all_names = set(nonterminals)
    for _, rhs, _ in productions:
        all_names.update(rhs)

    for name, ln in renderable:
        if name not in all_names:
            raise GrammarError(f"unknown symbol {name!r} in @renderable", ln)
    renderable_names = {name for name, _ in renderable}

    seen = set()
    rules = []
    for lhs, rhs, line in productions:
        if (lhs, rhs) in seen:
            rhs_str = " ".join(rhs) or EPS
            raise GrammarError(f"duplicate rule {lhs} -> {rhs_str}", line)
        seen.add((lhs, rhs))
        rules.append(Rule(len(rules), lhs, rhs))

    symbols = {}
    for name in sorted(all_names):
        kind = "nonterminal" if name in nonterminals else "terminal"
        symbols[name] = Symbol(name, kind, name in renderable_names)

    start = productions[0][0]
    grammar = Grammar(symbols, rules, start, source=text)
    _check_terminating(grammar)
    _check_reachable(grammar)
    return grammar


def _check_terminating(grammar):
    """Fixpoint check that every nonterminal can derive a terminal string."""
    terminating = set()
    changed = True
    while changed:
        changed = False
        for rule in grammar.rules:
            if rule.lhs in terminating:
                continue
            if all(
                not grammar.is_nonterminal(s) or s in terminating for s in rule.rhs
            ):
                terminating.add(rule.lhs)
                changed = True
    stuck = sorted(set(grammar._by_lhs) - terminating)
    if stuck:
        raise GrammarError(f"unterminable nonterminal(s): {', '.join(stuck)}")


def _check_reachable(grammar):
    reached = {grammar.start}
    frontier = [grammar.start]
    while frontier:
        nt = frontier.pop()
        for i in grammar.rules_for(nt):
            for s in grammar.rules[i].rhs:
                if grammar.is_nonterminal(s) and s not in reached:
                    reached.add(s)
                    frontier.append(s)
    orphans = sorted(set(grammar._by_lhs) - reached)
    if orphans:
        raise GrammarError(f"unreachable nonterminal(s): {', '.join(orphans)}")


@dataclass
class GraphNode:
    """Node of the derived scene graph; params are attached later."""

    cls: str
    children: list = field(default_factory=list)
    params: object = None

    def walk(self):
        yield self
        for c in self.children:
            yield from c.walk()


class Derivation:
    """In-progress leftmost derivation: LIFO stack of (nonterminal, parent node).

    Expanding a rule pops the matching nonterminal, records renderable rhs
    terminals as leaves under the attachment node, creates container nodes
    for renderable rhs nonterminals, and pushes rhs nonterminals in reverse
    so the leftmost one is expanded next.
    """

    def __init__(self, grammar):
        self.grammar = grammar
        self.root = GraphNode("scene")
        self.stack = [(grammar.start, self.root)]
        self.rules = []

    @property
    def done(self):
        return not self.stack

    def top(self):
        if not self.stack:
            raise DerivationError("derivation already complete")
        return self.stack[-1][0]

    def mask(self):
        return mask_for(self.grammar, self.top())

    def step(self, rule_index):
        if not self.stack:
            raise DerivationError("cannot expand: stack is empty")
        nt, attach = self.stack.pop()
        rule = self.grammar.rules[rule_index]
        if rule.lhs != nt:
            self.stack.append((nt, attach))
            raise DerivationError(
                f"rule {rule} does not expand top-of-stack nonterminal {nt!r}"
            )
        pending = []
        for name in rule.rhs:
            sym = self.grammar.symbols[name]
            if sym.is_terminal:
                if sym.renderable:
                    attach.children.append(GraphNode(name))
            else:
                if sym.renderable:
                    node = GraphNode(name)
                    attach.children.append(node)
                    pending.append((name, node))
                else:
                    pending.append((name, attach))
        self.stack.extend(reversed(pending))
        self.rules.append(rule_index)

    def replay(self, seq):
        for i, rule_index in enumerate(seq):
            if self.done:
                raise DerivationError(
                    f"derivation complete after {i} rules but sequence has {len(seq)}"
                )
            self.step(rule_index)
        return self


def expand_step(derivation, rule):
    """Apply one expansion rule to a derivation (thin wrapper around step)."""
    derivation.step(rule.index if isinstance(rule, Rule) else rule)
    return derivation


def sequence_to_scene_graph(grammar, seq):
    """Replay a complete rule sequence into its renderable scene graph."""
    d = Derivation(grammar).replay(seq)
    if not d.done:
        pending = [nt for nt, _ in d.stack]
        raise DerivationError(f"incomplete derivation; unexpanded: {pending}")
    return d.root
