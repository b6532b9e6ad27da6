"""
Action-mask engine.

A ``TraversalState`` tracks a partial traversal incrementally (open-slot
stack, parent and sibling of the next slot, trig ancestors). The structural
rules are evaluated against that state; ``compose_gate`` then removes gated-off
variables (legal = structural AND gate).
"""
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, GateEliminatedError, MalformedTraversalError, NoLegalActionError
from .expressions import TokenLibrary, Traversal
from .schemas import GateVector, MaskConfig

EMPTY = -1

# A legal-action vector: one bool per library token.
ActionMask = np.ndarray


class _OpenNode:
    __slots__ = ("token_id", "arity", "children")

    def __init__(self, token_id: int, arity: int):
        self.token_id = token_id
        self.arity = arity
        self.children: List[int] = []


class TraversalState:
    """Incremental view of a partial traversal."""

    __slots__ = ("library", "tokens", "needed", "has_variable", "_stack")

    def __init__(self, library: TokenLibrary, tokens: Iterable[int] = ()):
        self.library = library
        self.tokens: List[int] = []
        self.needed = 1
        self.has_variable = False
        self._stack: List[_OpenNode] = []
        for token_id in tokens:
            self.push(token_id)

    def push(self, token_id: int) -> None:
        if self.needed == 0:
            raise MalformedTraversalError("cannot extend a complete traversal")
        arity = int(self.library.arities[token_id])
        if self._stack:
            self._stack[-1].children.append(token_id)
        self.tokens.append(token_id)
        self.needed += arity - 1
        if self.library.is_variable[token_id]:
            self.has_variable = True
        if arity:
            self._stack.append(_OpenNode(token_id, arity))
        else:
            while self._stack and len(self._stack[-1].children) == self._stack[-1].arity:
                self._stack.pop()

    @property
    def complete(self) -> bool:
        return self.needed == 0

    @property
    def parent(self) -> int:
        return self._stack[-1].token_id if self._stack else EMPTY

    @property
    def sibling(self) -> int:
        if self._stack:
            top = self._stack[-1]
            if top.arity == 2 and len(top.children) == 1:
                return top.children[0]
        return EMPTY

    @property
    def has_trig_ancestor(self) -> bool:
        is_trig = self.library.is_trig
        return any(is_trig[node.token_id] for node in self._stack)

    def traversal(self) -> Traversal:
        return Traversal(tuple(self.tokens))


def _structural(state: TraversalState, cfg: MaskConfig) -> ActionMask:
    lib = state.library
    length = len(state.tokens)
    needed = state.needed

    # shortest completion after choosing t is length + needed + arity(t)
    legal = length + needed + lib.arities <= cfg.max_length

    if needed == 1 and length + 1 < cfg.min_length:
        legal &= ~lib.is_terminal

    parent = state.parent
    if cfg.forbid_inverse_child and parent != EMPTY:
        inverse = lib.inverse_of[parent]
        if inverse >= 0:
            legal[inverse] = False

    if cfg.forbid_trig_descendant and state.has_trig_ancestor:
        legal &= ~lib.is_trig

    if cfg.require_variable and needed == 1 and not state.has_variable:
        legal &= ~(lib.is_terminal & ~lib.is_variable)

    if not legal.any():
        raise ConfigError(
            f"mask config (min_length={cfg.min_length}, max_length={cfg.max_length}) leaves no legal token "
            f"after {lib.format(state.traversal())!r}"
        )
    return legal


def structural_mask(partial: Traversal, lib: TokenLibrary, cfg: MaskConfig) -> ActionMask:
    state = TraversalState(lib, partial)
    if state.complete:
        raise MalformedTraversalError("structural_mask needs an open slot")
    return _structural(state, cfg)


def gate_filter(gates: GateVector, lib: TokenLibrary) -> ActionMask:
    """Token-level view of a gate vector: True for operators and kept variables."""
    if len(gates.binary) != lib.n_variables:
        raise ConfigError(f"gate vector has {len(gates.binary)} entries but the library has {lib.n_variables} variables")
    allowed = np.ones(len(lib), dtype=bool)
    allowed[lib.variable_ids] = np.asarray(gates.binary, dtype=bool)
    if not allowed[lib.variable_ids].any():
        raise GateEliminatedError("gate eliminated all variables")
    return allowed


def compose_gate(structural: ActionMask, gates: GateVector, lib: TokenLibrary) -> ActionMask:
    return structural & gate_filter(gates, lib)


class ActionMasker:
    """Structural rules composed with a fixed gate vector, consulted once per sampling step."""

    def __init__(self, library: TokenLibrary, config: MaskConfig, gates: Optional[GateVector] = None):
        self.library = library
        self.config = config
        gates = gates if gates is not None else GateVector.all_open(library.n_variables)
        self.allowed = gate_filter(gates, library)

    def new_state(self, tokens: Sequence[int] = ()) -> TraversalState:
        return TraversalState(self.library, tokens)

    def mask(self, state: TraversalState) -> ActionMask:
        legal = _structural(state, self.config) & self.allowed
        if not legal.any():
            raise NoLegalActionError(
                f"no legal action after {self.library.format(state.traversal())!r} under the composed gate"
            )
        return legal
