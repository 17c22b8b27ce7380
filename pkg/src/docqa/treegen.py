"""Expression trees: parsing gold derivations, execution, pre-order codec and
a goal-driven tree decoder with beam search."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import torch
import torch.nn as nn

OPERATORS = ("+", "-", "*", "/")
_OP_ALIASES = {"+": "+", "-": "-", "−": "-", "*": "*", "×": "*", "/": "/", "÷": "/"}
DEFAULT_CONSTANTS = (0.0, 1.0, 100.0)
DEFAULT_NODE_CAP = 15


class ParseError(ValueError):
    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"{message} at position {position}")


class DivisionByZero(ArithmeticError):
    pass


class IncompletePreorder(ValueError):
    pass


class TrailingTokens(ValueError):
    pass


@dataclass(frozen=True)
class Leaf:
    value: float
    source: Optional[tuple[str, int]] = None  # ("con", k) or ("tag", k)


@dataclass(frozen=True)
class Operator:
    op: str
    left: "Tree"
    right: "Tree"


Tree = Union[Leaf, Operator]


def execute(tree: Tree) -> float:
    if isinstance(tree, Leaf):
        return tree.value
    a, b = execute(tree.left), execute(tree.right)
    if tree.op == "+":
        return a + b
    if tree.op == "-":
        return a - b
    if tree.op == "*":
        return a * b
    if b == 0:
        raise DivisionByZero("right operand of / evaluates to 0")
    return a / b


def node_count(tree: Tree) -> int:
    if isinstance(tree, Leaf):
        return 1
    return 1 + node_count(tree.left) + node_count(tree.right)


def leaves(tree: Tree) -> list[Leaf]:
    if isinstance(tree, Leaf):
        return [tree]
    return leaves(tree.left) + leaves(tree.right)


def map_leaves(tree: Tree, fn) -> Tree:
    if isinstance(tree, Leaf):
        return fn(tree)
    return Operator(tree.op, map_leaves(tree.left, fn), map_leaves(tree.right, fn))


def to_sexpr(tree: Tree) -> str:
    if isinstance(tree, Leaf):
        v = tree.value
        return str(int(v)) if v == int(v) else repr(v)
    return f"({tree.op} {to_sexpr(tree.left)} {to_sexpr(tree.right)})"


def to_infix(tree: Tree) -> str:
    if isinstance(tree, Leaf):
        return to_sexpr(tree)
    return f"({to_infix(tree.left)} {tree.op} {to_infix(tree.right)})"


# --- parsing ---------------------------------------------------------------------

_TOKEN_RE = re.compile(r"\s*(?:(\d[\d,]*(?:\.\d+)?|\.\d+)|([-−+*×/÷()]))")


def _tokenize(text: str) -> list[tuple[str, int]]:
    out, pos = [], 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            while text[pos].isspace():
                pos += 1
            raise ParseError(f"unexpected character {text[pos]!r}", pos)
        start = m.start(1) if m.group(1) else m.start(2)
        out.append((m.group(1) or m.group(2), start))
        pos = m.end()
    return out


def parse_derivation(text: str) -> Tree:
    """Parse an infix derivation such as ``"(17,779 - 11,303)/11,303"``.

    ``*``/``/`` bind tighter than ``+``/``-``; both levels are
    left-associative. A unary minus folds into a numeric literal, or becomes
    ``(- 0 x)`` in front of a parenthesised expression.
    """
    tokens = _tokenize(text)
    pos = 0

    def peek():
        return tokens[pos][0] if pos < len(tokens) else None

    def where():
        return tokens[pos][1] if pos < len(tokens) else len(text)

    def expr():
        nonlocal pos
        node = term()
        while peek() is not None and _OP_ALIASES.get(peek()) in ("+", "-"):
            op = _OP_ALIASES[tokens[pos][0]]
            pos += 1
            node = Operator(op, node, term())
        return node

    def term():
        nonlocal pos
        node = factor()
        while peek() is not None and _OP_ALIASES.get(peek()) in ("*", "/"):
            op = _OP_ALIASES[tokens[pos][0]]
            pos += 1
            node = Operator(op, node, factor())
        return node

    def factor():
        nonlocal pos
        tok = peek()
        if tok is None:
            raise ParseError("unexpected end of input", where())
        if tok == "(":
            pos += 1
            node = expr()
            if peek() != ")":
                raise ParseError("unbalanced parenthesis", where())
            pos += 1
            return node
        if _OP_ALIASES.get(tok) == "-":
            pos += 1
            inner = factor()
            if isinstance(inner, Leaf):
                return Leaf(-inner.value)
            return Operator("-", Leaf(0.0), inner)
        if tok[0].isdigit() or tok[0] == ".":
            pos += 1
            return Leaf(float(tok.replace(",", "")))
        raise ParseError(f"unexpected {tok!r}", where())

    if not tokens:
        raise ParseError("empty input", 0)
    tree = expr()
    if pos != len(tokens):
        raise ParseError(f"unexpected {tokens[pos][0]!r}", where())
    return tree


# --- pre-order codec -----------------------------------------------------------------

PreorderToken = Union[str, Leaf]


def preorder(tree: Tree) -> list[PreorderToken]:
    if isinstance(tree, Leaf):
        return [tree]
    return [tree.op] + preorder(tree.left) + preorder(tree.right)


def tree_of_preorder(tokens: Sequence[Union[str, Leaf, float, int]]) -> Tree:
    pos = 0

    def build():
        nonlocal pos
        if pos >= len(tokens):
            raise IncompletePreorder(f"pre-order sequence ends after {len(tokens)} tokens")
        tok = tokens[pos]
        pos += 1
        if isinstance(tok, str):
            if tok not in _OP_ALIASES:
                raise ValueError(f"unknown operator {tok!r}")
            left = build()
            return Operator(_OP_ALIASES[tok], left, build())
        return tok if isinstance(tok, Leaf) else Leaf(float(tok))

    tree = build()
    if pos != len(tokens):
        raise TrailingTokens(f"{len(tokens) - pos} tokens after a complete tree")
    return tree


def preorder_json(tree: Tree) -> list:
    return [t if isinstance(t, str) else t.value for t in preorder(tree)]


# --- decoder vocabulary ----------------------------------------------------------------

@dataclass
class TreeVocabulary:
    """Decoder targets: operators, then constants, then tagged numbers.

    ``embeddings`` holds one row per target. Operator and constant rows come
    from learned tables, tagged-number rows are encoder outputs at the number's
    position.
    """
    constants: tuple[float, ...]
    tag_values: list[float]
    tag_positions: list[int]
    embeddings: torch.Tensor

    def __len__(self) -> int:
        return len(OPERATORS) + len(self.constants) + len(self.tag_values)

    @property
    def n_fixed(self) -> int:
        return len(OPERATORS) + len(self.constants)

    def kind(self, index: int) -> str:
        if index < len(OPERATORS):
            return "op"
        return "con" if index < self.n_fixed else "tag"

    def token(self, index: int) -> PreorderToken:
        if index < len(OPERATORS):
            return OPERATORS[index]
        if index < self.n_fixed:
            k = index - len(OPERATORS)
            return Leaf(self.constants[k], ("con", k))
        k = index - self.n_fixed
        return Leaf(self.tag_values[k], ("tag", k))

    def index_of(self, tok: PreorderToken) -> int:
        if isinstance(tok, str):
            return OPERATORS.index(_OP_ALIASES[tok])
        kind, k = tok.source
        return len(OPERATORS) + k if kind == "con" else self.n_fixed + k

    def to_tree(self, ids: Sequence[int]) -> Tree:
        return tree_of_preorder([self.token(i) for i in ids])


# --- goal-driven decoder ------------------------------------------------------------------

class Gate(nn.Module):
    """tanh(W x) * sigmoid(G x)"""

    def __init__(self, inputs: int, hidden: int):
        super().__init__()
        self.value = nn.Linear(inputs, hidden)
        self.gate = nn.Linear(inputs, hidden)

    def forward(self, *parts):
        x = torch.cat(parts, -1)
        return torch.tanh(self.value(x)) * torch.sigmoid(self.gate(x))


class _State:
    __slots__ = ("goals", "subtrees", "ids", "logp")

    def __init__(self, goals, subtrees, ids, logp):
        self.goals, self.subtrees, self.ids, self.logp = goals, subtrees, ids, logp

    def copy(self) -> "_State":
        return _State(list(self.goals), list(self.subtrees), list(self.ids), self.logp)

    @property
    def done(self) -> bool:
        return not self.goals


class TreeDecoder(nn.Module):
    def __init__(self, hidden: int, constants: Sequence[float] = DEFAULT_CONSTANTS,
                 node_cap: int = DEFAULT_NODE_CAP):
        super().__init__()
        self.constants = tuple(float(c) for c in constants)
        self.node_cap = node_cap
        self.op_embedding = nn.Parameter(torch.randn(len(OPERATORS), hidden) * 0.1)
        self.con_embedding = nn.Parameter(torch.randn(len(self.constants), hidden) * 0.1)
        self.attend = nn.Linear(hidden, hidden, bias=False)
        self.score = nn.Linear(2 * hidden, hidden)
        self.left = Gate(3 * hidden, hidden)
        self.right = Gate(3 * hidden, hidden)
        self.right_merge = Gate(2 * hidden, hidden)
        self.merge = Gate(3 * hidden, hidden)

    def build_vocab(self, doc_rows: torch.Tensor, tagged) -> TreeVocabulary:
        """``doc_rows`` is the encoder output of one sequence; ``tagged`` the
        NumberTokens picked by the tagger, in document order."""
        positions = [n.token_index for n in tagged]
        tag_rows = doc_rows[positions] if positions else doc_rows.new_zeros(0, doc_rows.shape[-1])
        emb = torch.cat([self.op_embedding, self.con_embedding, tag_rows], 0)
        return TreeVocabulary(self.constants, [n.value for n in tagged], positions, emb)

    # one decoding step is split in two: score the current goal, then apply a token
    def _prepare(self, state: _State, rows, mask, vocab: TreeVocabulary):
        goal = state.goals[-1]
        if state.subtrees and state.subtrees[-1][0] == "done":
            goal = self.right_merge(goal, state.subtrees[-1][1])
        att = rows @ self.attend(goal)
        att = att.masked_fill(~mask, float("-inf")).softmax(-1)
        context = att @ rows
        logits = vocab.embeddings @ self.score(torch.cat([goal, context], -1))
        pending = len(state.goals) - 1
        if len(state.ids) + 1 + pending + 2 > self.node_cap:
            logits = torch.cat([torch.full_like(logits[:len(OPERATORS)], float("-inf")),
                                logits[len(OPERATORS):]])
        return goal, context, logits.log_softmax(-1)

    def _advance(self, state: _State, token: int, goal, context, vocab: TreeVocabulary):
        state.goals.pop()
        state.ids.append(token)
        emb = vocab.embeddings[token]
        if token < len(OPERATORS):
            state.goals.append(self.right(goal, context, emb))
            state.goals.append(self.left(goal, context, emb))
            state.subtrees.append(("op", emb))
            return
        while state.subtrees and state.subtrees[-1][0] == "done":
            _, left = state.subtrees.pop()
            _, op = state.subtrees.pop()
            emb = self.merge(op, left, emb)
        state.subtrees.append(("done", emb))

    def teacher_forced_nll(self, root, rows, mask, vocab: TreeVocabulary, target: Sequence[int]):
        """Summed negative log-likelihood of a gold pre-order id sequence."""
        state = _State([root], [], [], 0.0)
        total = root.new_zeros(())
        for token in target:
            if state.done:
                raise TrailingTokens("gold sequence continues after a complete tree")
            goal, context, logp = self._prepare(state, rows, mask, vocab)
            total = total - logp[token]
            self._advance(state, token, goal, context, vocab)
        if not state.done:
            raise IncompletePreorder("gold sequence ends before the tree is complete")
        return total

    @torch.no_grad()
    def _beam(self, root, rows, mask, vocab, width: int):
        live = [_State([root], [], [], 0.0)]
        finished = []
        while live:
            candidates = []
            for rank, state in enumerate(live):
                goal, context, logp = self._prepare(state, rows, mask, vocab)
                for token, lp in enumerate(logp.tolist()):
                    if lp != float("-inf"):
                        candidates.append((state.logp + lp, rank, token, state, goal, context))
            candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
            live = []
            for score, _, token, state, goal, context in candidates[:width]:
                new = state.copy()
                new.logp = score
                self._advance(new, token, goal, context, vocab)
                (finished if new.done else live).append(new)
        return finished

    def generate(self, root, rows, mask, vocab: TreeVocabulary, beam: int = 1) -> list[tuple[Tree, float]]:
        """Beam-search trees, best first.

        Widths 1..beam are all searched and their finished trees pooled, so
        the best score can only improve as ``beam`` grows.
        """
        if beam < 1:
            raise ValueError("beam must be >= 1")
        pool: dict[tuple[int, ...], float] = {}
        for width in range(1, beam + 1):
            for state in self._beam(root, rows, mask, vocab, width):
                key = tuple(state.ids)
                pool[key] = max(pool.get(key, float("-inf")), state.logp)
        ranked = sorted(pool.items(), key=lambda kv: (-kv[1], kv[0]))
        return [(vocab.to_tree(ids), score) for ids, score in ranked]
