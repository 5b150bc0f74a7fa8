"""Benchmark task definitions, answer parsers, and verifiers.

Covers four task kinds: multiple choice (accuracy), the 24 puzzle (an
exact-rational expression verifier plus a brute-force solver used as ground
truth), 5x5 crosswords (letter/word scoring), and multi-hop QA (scored by
the metrics module). All verifiers are pure functions.
"""
from __future__ import annotations

import itertools
import re
import string
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Union

from .core import Query, TaskKind
from .metrics import exact_match, rouge_l, token_f1


class UnrecognizedChoice(Exception):
    """No option letter could be extracted from the answer text."""


class ExpressionError(Exception):
    """Arithmetic expression failed to parse; ``position`` is the 0-based offset."""

    def __init__(self, message: str, position: int) -> None:
        super().__init__(f"{message} (at position {position})")
        self.position = position


class GridShapeError(Exception):
    """Answer text was not reducible to a 5x5 letter grid."""


GRID_SIZE = 5
BLANK = "."
_BLANK_MARKS = set("._?*")


@dataclass(frozen=True)
class CrosswordGrid:
    """5x5 grid of uppercase letters; unknown cells hold '.'."""

    rows: tuple[tuple[str, ...], ...]

    def __post_init__(self) -> None:
        if len(self.rows) != GRID_SIZE or any(len(r) != GRID_SIZE for r in self.rows):
            raise ValueError("grid must be exactly 5x5")
        for row in self.rows:
            for cell in row:
                if cell != BLANK and not ("A" <= cell <= "Z"):
                    raise ValueError(f"bad cell {cell!r}: expected A-Z or {BLANK!r}")

    @classmethod
    def from_rows(cls, rows: list[str] | tuple[str, ...]) -> "CrosswordGrid":
        return cls(tuple(tuple(row.upper()) for row in rows))

    def column(self, c: int) -> tuple[str, ...]:
        return tuple(self.rows[r][c] for r in range(GRID_SIZE))


@dataclass(frozen=True)
class MultipleChoice:
    id: str
    question: str
    options: tuple[str, ...]
    answer_key: int

    def __post_init__(self) -> None:
        if len(self.options) < 2:
            raise ValueError("multiple choice needs at least 2 options")
        if not 0 <= self.answer_key < len(self.options):
            raise ValueError("answer_key out of range")


@dataclass(frozen=True)
class GameOf24:
    id: str
    numbers: tuple[int, int, int, int]

    def __post_init__(self) -> None:
        if len(self.numbers) != 4:
            raise ValueError("exactly 4 numbers required")


@dataclass(frozen=True)
class MiniCrossword:
    id: str
    across_clues: tuple[str, ...]
    down_clues: tuple[str, ...]
    solution: CrosswordGrid

    def __post_init__(self) -> None:
        if len(self.across_clues) != GRID_SIZE or len(self.down_clues) != GRID_SIZE:
            raise ValueError("exactly 5 across and 5 down clues required")
        if any(BLANK in row for row in self.solution.rows):
            raise ValueError("solution grid must be fully lettered")


@dataclass(frozen=True)
class Passage:
    title: str
    text: str


@dataclass(frozen=True)
class MultiHopQA:
    id: str
    question: str
    gold_answer: str
    supporting_contexts: tuple[Passage, ...]


TaskInstance = Union[MultipleChoice, GameOf24, MiniCrossword, MultiHopQA]

_KIND_OF_TYPE = {
    MultipleChoice: TaskKind.MULTIPLE_CHOICE,
    GameOf24: TaskKind.GAME_OF_24,
    MiniCrossword: TaskKind.MINI_CROSSWORD,
    MultiHopQA: TaskKind.MULTI_HOP_QA,
}


def instance_kind(instance: TaskInstance) -> TaskKind:
    return _KIND_OF_TYPE[type(instance)]


METRIC_NAMES: dict[TaskKind, tuple[str, ...]] = {
    TaskKind.MULTIPLE_CHOICE: ("accuracy",),
    TaskKind.GAME_OF_24: ("solved",),
    TaskKind.MINI_CROSSWORD: ("letters", "words", "solved"),
    TaskKind.MULTI_HOP_QA: ("em", "f1", "rouge_l"),
}


def metric_names(kind: TaskKind) -> tuple[str, ...]:
    return METRIC_NAMES[kind]


# ---------------------------------------------------------------------------
# Multiple choice


def option_letter(index: int) -> str:
    return chr(ord("A") + index)


_ANSWER_PATTERN = re.compile(r"answer\s*(?:is)?\s*[:\-]?\s*\(?([A-Za-z])\)?(?![A-Za-z])", re.IGNORECASE)


def extract_choice(answer_text: str, options: tuple[str, ...] | list[str]) -> str:
    """Pull an option letter out of free-form answer text.

    Priority: a standalone letter token, then an "Answer: X" pattern, then a
    case-insensitive match of the option text itself.
    """
    valid = {option_letter(i) for i in range(len(options))}
    for token in answer_text.split():
        stripped = token.strip(string.punctuation)
        if len(stripped) == 1 and stripped.upper() in valid:
            return stripped.upper()
    match = _ANSWER_PATTERN.search(answer_text)
    if match and match.group(1).upper() in valid:
        return match.group(1).upper()
    lowered = answer_text.lower()
    by_length = sorted(range(len(options)), key=lambda i: -len(options[i]))
    for i in by_length:
        text = options[i].strip().lower()
        if text and text in lowered:
            return option_letter(i)
    raise UnrecognizedChoice(f"no option letter found in {answer_text!r}")


def score_multiple_choice(predicted: str, instance: MultipleChoice) -> int:
    """1 iff the predicted option letter names the gold option."""
    index = ord(predicted.upper()) - ord("A")
    if not 0 <= index < len(instance.options):
        raise UnrecognizedChoice(f"letter {predicted!r} names no option")
    return int(index == instance.answer_key)


# ---------------------------------------------------------------------------
# Game of 24: exact-rational expressions

OPS = ("+", "-", "*", "/")


@dataclass(frozen=True)
class Num:
    value: int


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


Expr = Union[Num, BinOp]


def evaluate(expr: Expr) -> Fraction:
    """Exact-rational evaluation; raises ZeroDivisionError on division by zero."""
    if isinstance(expr, Num):
        return Fraction(expr.value)
    left = evaluate(expr.left)
    right = evaluate(expr.right)
    if expr.op == "+":
        return left + right
    if expr.op == "-":
        return left - right
    if expr.op == "*":
        return left * right
    return left / right


def leaves(expr: Expr) -> list[int]:
    if isinstance(expr, Num):
        return [expr.value]
    return leaves(expr.left) + leaves(expr.right)


def render(expr: Expr) -> str:
    """Fully parenthesized text form; parsing it back gives the same tree."""
    if isinstance(expr, Num):
        return str(expr.value)
    return f"({render(expr.left)} {expr.op} {render(expr.right)})"


_MUL_ALIASES = {"*": "*", "×": "*", "/": "/", "÷": "/"}


class _Tokenizer:
    def __init__(self, text: str) -> None:
        self.text = text
        self.pos = 0

    def peek(self) -> tuple[str, int] | None:
        pos = self.pos
        while pos < len(self.text) and self.text[pos].isspace():
            pos += 1
        if pos >= len(self.text):
            return None
        ch = self.text[pos]
        if ch.isdigit():
            end = pos
            while end < len(self.text) and self.text[end].isdigit():
                end += 1
            return self.text[pos:end], pos
        if ch in "+-()" or ch in _MUL_ALIASES:
            return ch, pos
        raise ExpressionError(f"unexpected character {ch!r}", pos)

    def advance(self, token: str) -> None:
        tok = self.peek()
        assert tok is not None and tok[0] == token
        self.pos = tok[1] + len(token)


def parse_expression(text: str) -> Expr:
    """Parse +, -, *, / (unicode aliases accepted) with standard precedence.

    Left associative, integer leaves, parentheses for grouping.
    """
    tokens = _Tokenizer(text)

    def parse_expr() -> Expr:
        node = parse_term()
        while True:
            tok = tokens.peek()
            if tok is None or tok[0] not in ("+", "-"):
                return node
            tokens.advance(tok[0])
            node = BinOp(tok[0], node, parse_term())

    def parse_term() -> Expr:
        node = parse_factor()
        while True:
            tok = tokens.peek()
            if tok is None or tok[0] not in _MUL_ALIASES:
                return node
            tokens.advance(tok[0])
            node = BinOp(_MUL_ALIASES[tok[0]], node, parse_factor())

    def parse_factor() -> Expr:
        tok = tokens.peek()
        if tok is None:
            raise ExpressionError("unexpected end of expression", len(text))
        token, pos = tok
        if token.isdigit():
            tokens.advance(token)
            return Num(int(token))
        if token == "(":
            tokens.advance("(")
            node = parse_expr()
            closing = tokens.peek()
            if closing is None or closing[0] != ")":
                raise ExpressionError("unclosed parenthesis", pos)
            tokens.advance(")")
            return node
        raise ExpressionError(f"unexpected token {token!r}", pos)

    node = parse_expr()
    trailing = tokens.peek()
    if trailing is not None:
        raise ExpressionError(f"unexpected token {trailing[0]!r}", trailing[1])
    return node


class Reason24(str, Enum):
    OK = "ok"
    WRONG_LEAVES = "wrong_leaves"
    NOT_TWENTY_FOUR = "not_twenty_four"
    DIV_BY_ZERO = "div_by_zero"


@dataclass(frozen=True)
class Verify24Result:
    valid: bool
    reason: Reason24


TARGET = Fraction(24)


def verify_24(expr: Expr, numbers: tuple[int, ...] | list[int]) -> Verify24Result:
    """Valid iff the expression uses exactly the given numbers and equals 24.

    Evaluation is exact rational arithmetic, so fractional intermediates
    like 8/(3-8/3) judge correctly where floating point would not.
    """
    if sorted(leaves(expr)) != sorted(numbers):
        return Verify24Result(False, Reason24.WRONG_LEAVES)
    try:
        value = evaluate(expr)
    except ZeroDivisionError:
        return Verify24Result(False, Reason24.DIV_BY_ZERO)
    if value != TARGET:
        return Verify24Result(False, Reason24.NOT_TWENTY_FOUR)
    return Verify24Result(True, Reason24.OK)


def _tree_shapes(a: Expr, b: Expr, c: Expr, d: Expr, o1: str, o2: str, o3: str) -> tuple[Expr, ...]:
    return (
        BinOp(o3, BinOp(o2, BinOp(o1, a, b), c), d),
        BinOp(o3, BinOp(o1, a, BinOp(o2, b, c)), d),
        BinOp(o1, a, BinOp(o3, BinOp(o2, b, c), d)),
        BinOp(o1, a, BinOp(o2, b, BinOp(o3, c, d))),
        BinOp(o2, BinOp(o1, a, b), BinOp(o3, c, d)),
    )


def brute_force_24(numbers: tuple[int, ...] | list[int]) -> Expr | None:
    """Exhaustively search all 7,680 candidate expressions; return a witness or None.

    24 leaf orderings x 64 operator assignments x 5 tree shapes. Every
    returned witness passes ``verify_24``.
    """
    for perm in itertools.permutations(numbers):
        nums = tuple(Num(n) for n in perm)
        for o1, o2, o3 in itertools.product(OPS, repeat=3):
            for candidate in _tree_shapes(*nums, o1, o2, o3):
                try:
                    if evaluate(candidate) == TARGET:
                        return candidate
                except ZeroDivisionError:
                    continue
    return None


_EXPR_RUN = re.compile(r"[0-9+\-*/×÷()\s]+")
_HAS_OPERATOR = re.compile(r"[+\-*/×÷]")


def extract_expression(answer_text: str) -> Expr | None:
    """Find the last parseable arithmetic expression (with an operator) in free text."""
    best: Expr | None = None
    for match in _EXPR_RUN.finditer(answer_text):
        run = match.group().strip()
        if not run or not _HAS_OPERATOR.search(run):
            continue
        try:
            best = parse_expression(run)
        except ExpressionError:
            continue
    return best


# ---------------------------------------------------------------------------
# Mini crosswords


def parse_crossword(answer_text: str) -> CrosswordGrid:
    """Read a 5x5 grid from answer text.

    Lines reducing to exactly five cells (letters or blank marks; spaces and
    pipes tolerated) count as rows; anything else is ignored. Exactly five
    such rows must be present.
    """
    rows: list[tuple[str, ...]] = []
    for line in answer_text.splitlines():
        cleaned = re.sub(r"[\s|,]+", "", line)
        if not cleaned:
            continue
        cells: list[str] = []
        for ch in cleaned:
            if ch.isalpha() and ch.isascii():
                cells.append(ch.upper())
            elif ch in _BLANK_MARKS:
                cells.append(BLANK)
            else:
                cells = []
                break
        if len(cells) == GRID_SIZE:
            rows.append(tuple(cells))
    if len(rows) != GRID_SIZE:
        raise GridShapeError(f"found {len(rows)} grid rows, need exactly {GRID_SIZE}")
    return CrosswordGrid(tuple(rows))


@dataclass(frozen=True)
class CrosswordScore:
    letters: float
    words: float
    solved: bool


def score_crossword(pred: CrosswordGrid, gold: CrosswordGrid) -> CrosswordScore:
    """Letter accuracy over 25 cells, word accuracy over 5 rows + 5 columns."""
    cells = sum(
        pred.rows[r][c] == gold.rows[r][c] for r in range(GRID_SIZE) for c in range(GRID_SIZE)
    )
    words = sum(pred.rows[r] == gold.rows[r] for r in range(GRID_SIZE))
    words += sum(pred.column(c) == gold.column(c) for c in range(GRID_SIZE))
    letters = cells / (GRID_SIZE * GRID_SIZE)
    return CrosswordScore(letters=letters, words=words / (2 * GRID_SIZE), solved=letters == 1.0)


# ---------------------------------------------------------------------------
# Turning instances into queries and scoring final answers


def to_query(instance: TaskInstance) -> Query:
    """Render an instance as the query text handed to the answering agent."""
    if isinstance(instance, MultipleChoice):
        lines = [instance.question, "Choose one of the following options:"]
        lines += [f"{option_letter(i)}. {opt}" for i, opt in enumerate(instance.options)]
        text = "\n".join(lines)
    elif isinstance(instance, GameOf24):
        a, b, c, d = instance.numbers
        text = (
            f"Using the numbers {a}, {b}, {c} and {d} each exactly once, write an "
            "arithmetic expression with +, -, *, / and parentheses that equals 24. "
            "State the expression itself in your answer."
        )
    elif isinstance(instance, MiniCrossword):
        lines = ["Solve this 5x5 crossword.", "Across clues:"]
        lines += [f"{i + 1}. {clue}" for i, clue in enumerate(instance.across_clues)]
        lines.append("Down clues:")
        lines += [f"{i + 1}. {clue}" for i, clue in enumerate(instance.down_clues)]
        lines.append(
            "Answer with the completed grid as five lines of five letters; use '.' for unknown cells."
        )
        text = "\n".join(lines)
    elif isinstance(instance, MultiHopQA):
        lines = []
        for passage in instance.supporting_contexts:
            lines.append(f"[{passage.title}] {passage.text}")
        lines.append(f"Question: {instance.question}")
        lines.append("Answer concisely using only the passages above.")
        text = "\n\n".join(lines)
    else:
        raise TypeError(f"unknown instance type {type(instance).__name__}")
    return Query(id=instance.id, text=text, task_kind=instance_kind(instance))


def score_answer(instance: TaskInstance, answer_text: str) -> dict[str, float]:
    """Score a final answer against the instance's gold data.

    Unextractable answers score zero rather than raising; every metric value
    lies in [0, 1].
    """
    if isinstance(instance, MultipleChoice):
        try:
            letter = extract_choice(answer_text, instance.options)
            return {"accuracy": float(score_multiple_choice(letter, instance))}
        except UnrecognizedChoice:
            return {"accuracy": 0.0}
    if isinstance(instance, GameOf24):
        expr = extract_expression(answer_text)
        if expr is None:
            return {"solved": 0.0}
        return {"solved": float(verify_24(expr, instance.numbers).valid)}
    if isinstance(instance, MiniCrossword):
        try:
            grid = parse_crossword(answer_text)
        except GridShapeError:
            return {"letters": 0.0, "words": 0.0, "solved": 0.0}
        result = score_crossword(grid, instance.solution)
        return {"letters": result.letters, "words": result.words, "solved": float(result.solved)}
    if isinstance(instance, MultiHopQA):
        return {
            "em": float(exact_match(answer_text, instance.gold_answer)),
            "f1": token_f1(answer_text, instance.gold_answer),
            "rouge_l": rouge_l(answer_text, instance.gold_answer),
        }
    raise TypeError(f"unknown instance type {type(instance).__name__}")
