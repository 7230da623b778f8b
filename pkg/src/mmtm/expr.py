"""Binary arithmetic expression trees: parsing, traversal, reconstruction, evaluation.

Trees are immutable. Leaves hold either a quantity placeholder ("number0",
"number1", ...) or an exact rational constant; internal nodes hold one of the
four binary operators. All arithmetic is exact (fractions.Fraction).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Iterator, Union

OPERATORS = ("+", "-", "*", "/")

_PLACEHOLDER_RE = re.compile(r"^number(\d+)$")
_NUMBER_RE = re.compile(r"^\d+(?:\.\d+)?$")


class ExprError(Exception):
    """Base class for expression-layer errors."""


class UnbalancedParens(ExprError):
    pass


class UnknownToken(ExprError):
    pass


class PlaceholderOutOfRange(ExprError):
    pass


class EmptyExpression(ExprError):
    pass


class TruncatedSequence(ExprError):
    pass


class TrailingTokens(ExprError):
    pass


class DivisionByZero(ExprError):
    pass


class TraversalVariant(Enum):
    PRE_ORDER = "pre"
    IN_ORDER = "in"
    POST_ORDER = "post"


@dataclass(frozen=True)
class Placeholder:
    index: int

    @property
    def token(self) -> str:
        return f"number{self.index}"


@dataclass(frozen=True)
class Constant:
    value: Fraction

    @property
    def token(self) -> str:
        return format_number(self.value)


Operand = Union[Placeholder, Constant]


@dataclass(frozen=True)
class Leaf:
    operand: Operand


@dataclass(frozen=True)
class Node:
    op: str
    left: "ExprTree"
    right: "ExprTree"

    def __post_init__(self):
        if self.op not in OPERATORS:
            raise UnknownToken(f"unknown operator {self.op!r}")


ExprTree = Union[Leaf, Node]


def format_number(value: Fraction) -> str:
    """Shortest decimal rendering of a rational; falls back to a/b form."""
    if value.denominator == 1:
        return str(value.numerator)
    den = value.denominator
    twos = 0
    while den % 2 == 0:
        den //= 2
        twos += 1
    fives = 0
    while den % 5 == 0:
        den //= 5
        fives += 1
    if den != 1:
        return f"{value.numerator}/{value.denominator}"
    digits = max(twos, fives)
    scaled = value.numerator * 10**digits // value.denominator
    sign = "-" if scaled < 0 else ""
    text = str(abs(scaled)).rjust(digits + 1, "0")
    whole, frac = text[:-digits], text[-digits:]
    return f"{sign}{whole}.{frac.rstrip('0')}" if frac.rstrip("0") else f"{sign}{whole}"


def parse_number(token: str) -> Fraction:
    """Parse an unsigned decimal literal, allowing comma grouping ('1,000')."""
    return Fraction(token.replace(",", ""))


def node_count(tree: ExprTree) -> int:
    if isinstance(tree, Leaf):
        return 1
    return 1 + node_count(tree.left) + node_count(tree.right)


def depth(tree: ExprTree) -> int:
    if isinstance(tree, Leaf):
        return 1
    return 1 + max(depth(tree.left), depth(tree.right))


def operators_of(tree: ExprTree) -> list[str]:
    """Operators in pre-order; length equals the operator count."""
    if isinstance(tree, Leaf):
        return []
    return [tree.op] + operators_of(tree.left) + operators_of(tree.right)


def leaf_from_token(token: str) -> Leaf:
    m = _PLACEHOLDER_RE.match(token)
    if m:
        return Leaf(Placeholder(int(m.group(1))))
    if _NUMBER_RE.match(token):
        return Leaf(Constant(Fraction(token)))
    raise UnknownToken(f"unknown label token {token!r}")


def _tokenize_infix(equation: str) -> list[str]:
    out = []
    pos = 0
    pattern = re.compile(r"\s+|number\d+|\d+(?:,\d{3})*(?:\.\d+)?|[-+*/()]")
    while pos < len(equation):
        m = pattern.match(equation, pos)
        if not m:
            raise UnknownToken(f"unexpected input at {equation[pos:pos + 10]!r}")
        if not m.group().isspace():
            out.append(m.group())
        pos = m.end()
    return out


def parse_infix(equation: str, n_quantities: int) -> ExprTree:
    """Parse an infix equation over placeholders/constants into a tree.

    Standard precedence (*, / bind tighter than +, -), left associativity.
    Every placeholder index must be < n_quantities.
    """
    tokens = _tokenize_infix(equation)
    if not tokens:
        raise EmptyExpression("empty equation")
    idx = 0

    def peek():
        return tokens[idx] if idx < len(tokens) else None

    def advance():
        nonlocal idx
        tok = tokens[idx]
        idx += 1
        return tok

    def parse_expr() -> ExprTree:
        tree = parse_term()
        while peek() in ("+", "-"):
            op = advance()
            tree = Node(op, tree, parse_term())
        return tree

    def parse_term() -> ExprTree:
        tree = parse_factor()
        while peek() in ("*", "/"):
            op = advance()
            tree = Node(op, tree, parse_factor())
        return tree

    def parse_factor() -> ExprTree:
        tok = peek()
        if tok is None:
            raise UnbalancedParens("expression ended unexpectedly")
        if tok == "(":
            advance()
            tree = parse_expr()
            if peek() != ")":
                raise UnbalancedParens("missing closing parenthesis")
            advance()
            return tree
        advance()
        m = _PLACEHOLDER_RE.match(tok)
        if m:
            index = int(m.group(1))
            if index >= n_quantities:
                raise PlaceholderOutOfRange(
                    f"{tok} but only {n_quantities} quantities"
                )
            return Leaf(Placeholder(index))
        if re.match(r"^\d", tok):
            return Leaf(Constant(parse_number(tok)))
        raise UnknownToken(f"unexpected token {tok!r}")

    tree = parse_expr()
    if idx != len(tokens):
        if tokens[idx] == ")":
            raise UnbalancedParens("unmatched closing parenthesis")
        raise TrailingTokens(f"unconsumed input {tokens[idx:]!r}")
    return tree


def traverse(tree: ExprTree, variant: TraversalVariant) -> list[str]:
    """Linearize a tree: pre (node-left-right), in (left-node-right, no
    parentheses), or post (left-right-node)."""
    out: list[str] = []

    def walk(t: ExprTree):
        if isinstance(t, Leaf):
            out.append(t.operand.token)
            return
        if variant is TraversalVariant.PRE_ORDER:
            out.append(t.op)
            walk(t.left)
            walk(t.right)
        elif variant is TraversalVariant.IN_ORDER:
            walk(t.left)
            out.append(t.op)
            walk(t.right)
        else:
            walk(t.left)
            walk(t.right)
            out.append(t.op)

    walk(tree)
    return out


def tree_from_preorder(tokens: list[str]) -> ExprTree:
    """Invert a pre-order label sequence; the whole sequence must be consumed."""
    idx = 0

    def build() -> ExprTree:
        nonlocal idx
        if idx >= len(tokens):
            raise TruncatedSequence("operator missing an operand")
        tok = tokens[idx]
        idx += 1
        if tok in OPERATORS:
            left = build()
            right = build()
            return Node(tok, left, right)
        return leaf_from_token(tok)

    if not tokens:
        raise TruncatedSequence("empty label sequence")
    tree = build()
    if idx != len(tokens):
        raise TrailingTokens(f"{len(tokens) - idx} tokens left after a complete tree")
    return tree


def tree_from_postorder(tokens: list[str]) -> ExprTree:
    """Invert a post-order label sequence via the usual stack construction."""
    if not tokens:
        raise TruncatedSequence("empty label sequence")
    stack: list[ExprTree] = []
    for tok in tokens:
        if tok in OPERATORS:
            if len(stack) < 2:
                raise TruncatedSequence(f"operator {tok!r} lacks operands")
            right = stack.pop()
            left = stack.pop()
            stack.append(Node(tok, left, right))
        else:
            stack.append(leaf_from_token(tok))
    if len(stack) != 1:
        raise TrailingTokens(f"{len(stack)} disconnected subtrees remain")
    return stack[0]


def evaluate(tree: ExprTree, quantities: list[Fraction]) -> Fraction:
    """Evaluate bottom-up with exact rational arithmetic."""
    if isinstance(tree, Leaf):
        operand = tree.operand
        if isinstance(operand, Placeholder):
            if operand.index >= len(quantities):
                raise PlaceholderOutOfRange(
                    f"number{operand.index} but only {len(quantities)} quantities"
                )
            return Fraction(quantities[operand.index])
        return operand.value
    left = evaluate(tree.left, quantities)
    right = evaluate(tree.right, quantities)
    if tree.op == "+":
        return left + right
    if tree.op == "-":
        return left - right
    if tree.op == "*":
        return left * right
    if right == 0:
        raise DivisionByZero(f"{format_number(left)} / 0")
    return left / right


def to_infix(tree: ExprTree) -> str:
    """Fully parenthesized infix rendering."""
    if isinstance(tree, Leaf):
        return tree.operand.token
    return f"( {to_infix(tree.left)} {tree.op} {to_infix(tree.right)} )"


def iter_leaves(tree: ExprTree) -> Iterator[Leaf]:
    if isinstance(tree, Leaf):
        yield tree
    else:
        yield from iter_leaves(tree.left)
        yield from iter_leaves(tree.right)
