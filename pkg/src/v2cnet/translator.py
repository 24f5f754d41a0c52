"""Two-layer encoder-decoder that turns a feature sequence into command words.

Encoder and decoder run in lockstep over the same ``n`` steps: decoder step
``t`` reads the one-hot of the previous word concatenated with the encoder
state ``h^e_t``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import EMPTY, EOC, Vocabulary
from .numerics import (
    Parameter,
    Tensor,
    affine,
    as_tensor,
    concat,
    mul,
    no_grad,
    softmax_cross_entropy,
    stack,
    take,
    total,
)
from .recurrent import (
    INIT_RANGE,
    RnnParams,
    RnnState,
    cell_step,
    init_rnn,
    unroll_steps,
    zero_state,
)

FEEDING_MODES = ("zeros", "autoregressive")


@dataclass
class TranslatorParams:
    encoder: RnnParams
    decoder: RnnParams
    proj_W: Parameter
    proj_b: Parameter

    def __post_init__(self):
        if self.encoder.family != self.decoder.family:
            raise ValueError("encoder and decoder must use the same cell family")
        if self.decoder.input_size != self.vocab_size + self.encoder.hidden_size:
            raise ValueError(
                f"decoder input {self.decoder.input_size} != |D| {self.vocab_size} "
                f"+ encoder hidden {self.encoder.hidden_size}")

    @property
    def vocab_size(self) -> int:
        return self.proj_W.shape[0]

    def named(self) -> dict[str, Parameter]:
        out = {f"encoder.{k}": v for k, v in self.encoder.named().items()}
        out.update({f"decoder.{k}": v for k, v in self.decoder.named().items()})
        out["proj_W"] = self.proj_W
        out["proj_b"] = self.proj_b
        return out


def init_translator(d: int, hidden: int, vocab_size: int, cell: str,
                    encoder_rng: np.random.Generator, decoder_rng: np.random.Generator,
                    proj_rng: np.random.Generator, prefix: str = "") -> TranslatorParams:
    enc = init_rnn(d, hidden, encoder_rng, cell, prefix=f"{prefix}encoder.")
    dec = init_rnn(vocab_size + hidden, hidden, decoder_rng, cell, prefix=f"{prefix}decoder.")
    W = Parameter(proj_rng.uniform(-INIT_RANGE, INIT_RANGE, (vocab_size, hidden)), f"{prefix}proj_W")
    b = Parameter(proj_rng.uniform(-INIT_RANGE, INIT_RANGE, vocab_size), f"{prefix}proj_b")
    return TranslatorParams(enc, dec, W, b)


def _initial(p: RnnParams, batch_shape, initial: RnnState | None) -> RnnState:
    # a fixed (h,) initial state broadcasts against the batch
    return zero_state(p, batch_shape) if initial is None else initial


def encode_steps(X, p: TranslatorParams, initial: RnnState | None = None) -> list[Tensor]:
    X = as_tensor(X)
    return unroll_steps(X, p.encoder, _initial(p.encoder, X.shape[:-2], initial))


def encode(X, p: TranslatorParams, initial: RnnState | None = None) -> Tensor:
    """Per-step encoder states, shape ``X.shape[:-1] + (h,)``."""
    return stack(encode_steps(X, p, initial), axis=-2)


def _split_steps(H_e) -> list[Tensor]:
    if isinstance(H_e, list):
        return H_e
    H_e = as_tensor(H_e)
    return [take(H_e, t, axis=-2) for t in range(H_e.shape[-2])]


def teacher_inputs(indices: np.ndarray, begin_index: int) -> np.ndarray:
    """Previous-word indices: ``begin_index`` at step 0, then the target shifted right."""
    indices = np.asarray(indices)
    prev = np.empty_like(indices)
    prev[..., 0] = begin_index
    prev[..., 1:] = indices[..., :-1]
    return prev


def decode_train(H_e, target_indices: np.ndarray, p: TranslatorParams, begin_index: int,
                 initial: RnnState | None = None) -> Tensor:
    """Teacher-forced logits of shape (..., n, |D|)."""
    steps = _split_steps(H_e)
    target_indices = np.asarray(target_indices)
    n = len(steps)
    if target_indices.shape[-1] != n:
        raise ValueError(f"decode_train: {n} encoder steps but {target_indices.shape[-1]} target words")
    eye = np.eye(p.vocab_size)
    words_in = eye[teacher_inputs(target_indices, begin_index)]
    batch_shape = steps[0].shape[:-1]
    state = _initial(p.decoder, batch_shape, initial)
    hs = []
    for t in range(n):
        x = concat([Tensor(words_in[..., t, :]), steps[t]], axis=-1)
        state = cell_step(x, state, p.decoder)
        hs.append(state.h)
    return affine(stack(hs, axis=-2), p.proj_W, p.proj_b)


def trans_loss(logits: Tensor, target_indices: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over the real (masked-in) words of each sequence.

    Returns one value per sequence (a scalar for unbatched input).
    """
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=-1)
    if np.any(counts == 0):
        raise ValueError("trans_loss: a target sequence has no real words")
    weights = mask / np.expand_dims(counts, -1)
    per_word = softmax_cross_entropy(logits, np.asarray(target_indices))
    return total(mul(per_word, weights), axis=-1)


def greedy_indices(H_e, p: TranslatorParams, begin_index: int, feeding: str = "zeros",
                   initial: RnnState | None = None) -> np.ndarray:
    """Argmax word index at every one of the ``n`` steps, shape (..., n).

    ``feeding="zeros"`` leaves the word slot of the decoder input empty;
    ``"autoregressive"`` feeds the one-hot of the previously emitted word.
    """
    if feeding not in FEEDING_MODES:
        raise ValueError(f"unknown inference feeding {feeding!r}")
    with no_grad():
        steps = _split_steps(H_e)
        batch_shape = steps[0].shape[:-1]
        eye = np.eye(p.vocab_size)
        prev = np.full(batch_shape, begin_index, dtype=np.int64)
        state = _initial(p.decoder, batch_shape, initial)
        out = []
        for h_e in steps:
            word = eye[prev] if feeding == "autoregressive" else np.zeros(batch_shape + (p.vocab_size,))
            state = cell_step(concat([Tensor(word), h_e], axis=-1), state, p.decoder)
            logits = affine(state.h, p.proj_W, p.proj_b).value
            prev = np.argmax(logits, axis=-1)
            out.append(prev)
        return np.stack(out, axis=-1)


def cut_at_eoc(indices, vocab: Vocabulary) -> tuple[list[str], bool]:
    """Words up to and including the first EOC; ``truncated`` when there is none."""
    words = []
    for i in indices:
        w = vocab.words[int(i)]
        words.append(w)
        if w == EOC:
            return words, False
    return words, True


def decode_greedy(H_e, p: TranslatorParams, vocab: Vocabulary, feeding: str = "zeros",
                  initial: RnnState | None = None) -> tuple[list[str], bool]:
    """Greedy words for one clip, stopping at the first EOC."""
    return cut_at_eoc(greedy_indices(H_e, p, vocab.empty_index, feeding, initial), vocab)


def assemble_command(words) -> tuple[str, bool]:
    """Join the words before the first EOC; EMPTY tokens are dropped.

    Returns ``(command, truncated)`` where ``truncated`` means no EOC was seen.
    """
    kept = []
    for w in words:
        if w == EOC:
            return " ".join(kept), False
        if w != EMPTY:
            kept.append(w)
    return " ".join(kept), True
