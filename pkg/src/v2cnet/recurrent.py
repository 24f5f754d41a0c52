"""LSTM and GRU cells with one weight matrix per gate, and sequence unrolling."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Union

import numpy as np

from .numerics import DimensionError, Parameter, Tensor, affine, sigmoid, stack, take, tanh_act

INIT_RANGE = 0.1


@dataclass
class LstmParams:
    W_xi: Parameter
    W_hi: Parameter
    W_xf: Parameter
    W_hf: Parameter
    W_xo: Parameter
    W_ho: Parameter
    W_xg: Parameter
    W_hg: Parameter
    b_i: Parameter
    b_f: Parameter
    b_o: Parameter
    b_g: Parameter

    family = "lstm"
    gates = "ifog"

    @property
    def input_size(self) -> int:
        return self.W_xi.shape[1]

    @property
    def hidden_size(self) -> int:
        return self.W_hi.shape[0]

    def named(self) -> dict[str, Parameter]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class GruParams:
    W_xr: Parameter
    W_hr: Parameter
    W_xz: Parameter
    W_hz: Parameter
    W_xh: Parameter
    W_hh: Parameter
    b_r: Parameter
    b_z: Parameter
    b_h: Parameter

    family = "gru"
    gates = "rzh"

    @property
    def input_size(self) -> int:
        return self.W_xr.shape[1]

    @property
    def hidden_size(self) -> int:
        return self.W_hr.shape[0]

    def named(self) -> dict[str, Parameter]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


RnnParams = Union[LstmParams, GruParams]


@dataclass
class RnnState:
    """Hidden state ``h``; ``c`` is the LSTM memory cell and ``None`` for GRU."""

    h: Tensor
    c: Tensor | None = None


def init_rnn(d: int, h: int, rng_seed: int | np.random.Generator, cell: str = "lstm",
             prefix: str = "") -> RnnParams:
    """Draw every weight and bias i.i.d. from U[-0.1, 0.1]."""
    if d < 1 or h < 1:
        raise ValueError("init_rnn: d and h must be >= 1")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    cls = {"lstm": LstmParams, "gru": GruParams}[cell]
    values = {}
    for f in fields(cls):
        if f.name.startswith("W_x"):
            shape = (h, d)
        elif f.name.startswith("W_h"):
            shape = (h, h)
        else:
            shape = (h,)
        values[f.name] = Parameter(rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape),
                                   name=prefix + f.name)
    return cls(**values)


def zero_state(p: RnnParams, batch_shape: tuple[int, ...] = ()) -> RnnState:
    h = Tensor(np.zeros(batch_shape + (p.hidden_size,)))
    c = Tensor(np.zeros(batch_shape + (p.hidden_size,))) if p.family == "lstm" else None
    return RnnState(h, c)


def uniform_state(p: RnnParams, rng: np.random.Generator,
                  batch_shape: tuple[int, ...] = ()) -> RnnState:
    shape = batch_shape + (p.hidden_size,)
    h = Tensor(rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape))
    c = Tensor(rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape)) if p.family == "lstm" else None
    return RnnState(h, c)


def _check(x_t: Tensor, prev: RnnState, p: RnnParams) -> None:
    if x_t.shape[-1] != p.input_size:
        raise DimensionError(
            f"{p.family}_cell: input x{list(x_t.shape)} but cell expects d={p.input_size}")
    if prev.h.shape[-1] != p.hidden_size:
        raise DimensionError(
            f"{p.family}_cell: state h{list(prev.h.shape)} but cell has h={p.hidden_size}")


def lstm_cell(x_t: Tensor, prev: RnnState, p: LstmParams) -> RnnState:
    _check(x_t, prev, p)
    if prev.c is None:
        raise DimensionError("lstm_cell: previous state has no memory cell")
    h = prev.h
    i = sigmoid(affine(x_t, p.W_xi, p.b_i) + affine(h, p.W_hi))
    f = sigmoid(affine(x_t, p.W_xf, p.b_f) + affine(h, p.W_hf))
    o = sigmoid(affine(x_t, p.W_xo, p.b_o) + affine(h, p.W_ho))
    g = tanh_act(affine(x_t, p.W_xg, p.b_g) + affine(h, p.W_hg))
    c = f * prev.c + i * g
    return RnnState(o * tanh_act(c), c)


def gru_cell(x_t: Tensor, prev: RnnState, p: GruParams) -> RnnState:
    _check(x_t, prev, p)
    h = prev.h
    r = sigmoid(affine(x_t, p.W_xr, p.b_r) + affine(h, p.W_hr))
    z = sigmoid(affine(x_t, p.W_xz, p.b_z) + affine(h, p.W_hz))
    h_tilde = tanh_act(affine(x_t, p.W_xh, p.b_h) + affine(r * h, p.W_hh))
    return RnnState(z * h + (1.0 - z) * h_tilde)


def cell_step(x_t: Tensor, prev: RnnState, p: RnnParams) -> RnnState:
    return lstm_cell(x_t, prev, p) if p.family == "lstm" else gru_cell(x_t, prev, p)


def unroll_steps(X: Tensor, p: RnnParams, initial: RnnState | None = None) -> list[Tensor]:
    """Run the cell over the time axis (second to last) of ``X``.

    Returns the hidden states ``h_1 .. h_n`` as a list of tensors, each with
    the batch shape of ``X`` plus the hidden size.
    """
    n = X.shape[-2]
    if n < 1:
        raise DimensionError("unroll: empty sequence")
    state = initial if initial is not None else zero_state(p, X.shape[:-2])
    hs = []
    for t in range(n):
        state = cell_step(take(X, t, axis=-2), state, p)
        hs.append(state.h)
    return hs


def unroll(X: Tensor, p: RnnParams, initial: RnnState | None = None) -> Tensor:
    """Hidden states stacked along time: shape ``X.shape[:-1] + (h,)``."""
    return stack(unroll_steps(X, p, initial), axis=-2)
