"""Token library, prefix traversals, evaluation, rendering and dedup keys."""
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, FrozenSet, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import MalformedTraversalError


class TokenKind(str, Enum):
    BINARY = "binary"
    UNARY = "unary"
    VARIABLE = "variable"


_ARITY = {TokenKind.BINARY: 2, TokenKind.UNARY: 1, TokenKind.VARIABLE: 0}

_BINARY_OPS: Dict[str, Tuple[str, Callable[[np.ndarray, np.ndarray], np.ndarray]]] = {
    "add": ("+", np.add),
    "sub": ("-", np.subtract),
    "mul": ("*", np.multiply),
    "div": ("/", np.divide),
}
_UNARY_OPS: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "sin": np.sin,
    "cos": np.cos,
    "log": np.log,
    "exp": np.exp,
}


@dataclass(frozen=True)
class Token:
    id: int
    kind: TokenKind
    name: str
    variable_index: Optional[int] = None

    def __post_init__(self):
        if (self.kind is TokenKind.VARIABLE) != (self.variable_index is not None):
            raise ValueError(f"token {self.name!r}: variable_index must be set exactly for variables")

    @property
    def arity(self) -> int:
        return _ARITY[self.kind]


@dataclass(frozen=True)
class Traversal:
    """Pre-order token-id sequence of an expression tree."""

    token_ids: Tuple[int, ...]

    def __len__(self) -> int:
        return len(self.token_ids)

    def __iter__(self) -> Iterator[int]:
        return iter(self.token_ids)

    def __getitem__(self, index):
        return self.token_ids[index]


class TokenLibrary:
    """Ordered token set L with per-token lookup arrays used by the mask engine."""

    def __init__(self, tokens: Sequence[Token], inverse_pairs: Iterable[Tuple[str, str]] = (), trig_names: Iterable[str] = ()):
        self.tokens: Tuple[Token, ...] = tuple(tokens)
        self._by_name: Dict[str, int] = {}
        for position, token in enumerate(self.tokens):
            if token.id != position:
                raise ValueError(f"token {token.name!r} has id {token.id}, expected {position}")
            if token.name in self._by_name:
                raise ValueError(f"duplicate token name {token.name!r}")
            self._by_name[token.name] = position

        self.inverse_pairs: FrozenSet[FrozenSet[int]] = frozenset(
            frozenset((self.id_of(a), self.id_of(b))) for a, b in inverse_pairs
        )
        self.trig_set: FrozenSet[int] = frozenset(self.id_of(name) for name in trig_names)

        size = len(self.tokens)
        self.arities = np.array([t.arity for t in self.tokens], dtype=np.int64)
        self.is_terminal = self.arities == 0
        self.is_variable = np.array([t.kind is TokenKind.VARIABLE for t in self.tokens], dtype=bool)
        self.is_trig = np.zeros(size, dtype=bool)
        self.is_trig[list(self.trig_set)] = True
        self.inverse_of = np.full(size, -1, dtype=np.int64)
        for pair in self.inverse_pairs:
            a, b = tuple(pair)
            self.inverse_of[a] = b
            self.inverse_of[b] = a
        self.variable_ids = np.flatnonzero(self.is_variable)

    @classmethod
    def standard(cls, n_variables: int) -> "TokenLibrary":
        """{add, sub, mul, div, sin, cos, log, exp, x1..xn}"""
        if n_variables < 1:
            raise ValueError("a token library needs at least one variable")
        tokens: List[Token] = []
        for name in _BINARY_OPS:
            tokens.append(Token(len(tokens), TokenKind.BINARY, name))
        for name in _UNARY_OPS:
            tokens.append(Token(len(tokens), TokenKind.UNARY, name))
        for index in range(n_variables):
            tokens.append(Token(len(tokens), TokenKind.VARIABLE, f"x{index + 1}", index))
        return cls(tokens, inverse_pairs=[("log", "exp")], trig_names=["sin", "cos"])

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def n_variables(self) -> int:
        return int(self.variable_ids.size)

    def id_of(self, name: str) -> int:
        try:
            return self._by_name[name]
        except KeyError:
            raise MalformedTraversalError(f"unknown token {name!r}") from None

    def parse(self, text: str) -> Traversal:
        """Parse the whitespace-separated text form, e.g. ``add x1 x1``."""
        return Traversal(tuple(self.id_of(name) for name in text.split()))

    def format(self, traversal: Traversal) -> str:
        return " ".join(self.tokens[t].name for t in traversal)


def needed_slots(traversal: Iterable[int], lib: TokenLibrary) -> int:
    """1 + sum(arity - 1); zero means the traversal is complete."""
    ids = list(traversal)
    count = 1
    for position, token_id in enumerate(ids):
        if count == 0:
            raise MalformedTraversalError(
                f"traversal completes at position {position} with {len(ids) - position} tokens remaining"
            )
        count += int(lib.arities[token_id]) - 1
    return count


def evaluate(traversal: Traversal, lib: TokenLibrary, inputs: np.ndarray) -> Tuple[np.ndarray, bool]:
    """
    Evaluate a complete traversal on every row of ``inputs``.

    Single reversed pass with a value stack. Operators are unprotected;
    ``valid`` is False iff any output is non-finite.
    """
    X = np.asarray(inputs, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"inputs must be a matrix, got shape {X.shape}")
    if needed_slots(traversal, lib) != 0:
        raise MalformedTraversalError(f"incomplete traversal: {lib.format(traversal)}")

    stack: List[np.ndarray] = []
    with np.errstate(all="ignore"):
        for token_id in reversed(traversal.token_ids):
            token = lib.tokens[token_id]
            if token.kind is TokenKind.VARIABLE:
                if token.variable_index >= X.shape[1]:
                    raise MalformedTraversalError(
                        f"{token.name} refers to column {token.variable_index} but inputs have {X.shape[1]} columns"
                    )
                stack.append(X[:, token.variable_index])
            elif token.kind is TokenKind.UNARY:
                stack.append(_UNARY_OPS[token.name](stack.pop()))
            else:
                left = stack.pop()
                right = stack.pop()
                stack.append(_BINARY_OPS[token.name][1](left, right))

    predictions = stack.pop()
    return predictions, bool(np.isfinite(predictions).all())


def canonical_key(traversal: Traversal) -> bytes:
    return np.asarray(traversal.token_ids, dtype=np.uint16).tobytes()


def render_infix(traversal: Traversal, lib: TokenLibrary) -> str:
    """Fully parenthesized infix form, e.g. ``(x1 + x1)``."""
    stack: List[str] = []
    for token_id in reversed(traversal.token_ids):
        token = lib.tokens[token_id]
        if token.kind is TokenKind.VARIABLE:
            stack.append(token.name)
        elif token.kind is TokenKind.UNARY:
            stack.append(f"{token.name}({stack.pop()})")
        else:
            left = stack.pop()
            right = stack.pop()
            stack.append(f"({left} {_BINARY_OPS[token.name][0]} {right})")
    if len(stack) != 1:
        raise MalformedTraversalError(f"cannot render incomplete traversal: {lib.format(traversal)}")
    return stack[0]
