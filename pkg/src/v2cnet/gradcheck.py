"""Finite-difference checks of every primitive and of the joint loss on a micro model."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .data import ClipRecord, Corpus
from .numerics import Parameter, Tensor, finite_diff_check
from .recurrent import init_rnn, unroll

PRIMITIVE_TOL = 1e-7
CELL_TOL = 1e-6
TCN_TOL = 1e-5
JOINT_TOL = 1e-4
# the micro model is a fixed configuration; with this seed its smallest
# gradient coordinates sit well above the rounding floor of epsilon 1e-6
MICRO_SEED = 1


@dataclass
class CheckResult:
    name: str
    error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.error < self.threshold


def _away_from_zero(rng, shape, low=0.1, high=2.0):
    return rng.uniform(low, high, shape) * rng.choice([-1.0, 1.0], shape)


def _distinct(rng, shape, gap=1e-3):
    while True:
        v = rng.uniform(-2.0, 2.0, shape)
        flat = np.sort(v.reshape(-1))
        if flat.size < 2 or np.min(np.diff(flat)) > gap:
            return v


def _weighted(out: Tensor, R: np.ndarray) -> Tensor:
    return nx.total(nx.mul(out, R))


def _centered_loss(out_fn: Callable[[], Tensor], rng: np.random.Generator,
                   R: np.ndarray | None = None) -> Callable[[], Tensor]:
    """``sum(R * (out - out0))`` with a fixed random R and the unperturbed output out0.

    Subtracting out0 leaves the gradient unchanged but keeps the summed loss
    near zero, so the central differences are not swamped by the rounding
    error of a large sum.
    """
    with nx.no_grad():
        base = out_fn().value.copy()
    if R is None:
        R = rng.uniform(0.1, 2.0, base.shape)
    return lambda: nx.total(nx.mul(nx.sub(out_fn(), base), R))


def _primitive_cases(rng: np.random.Generator) -> dict[str, tuple]:
    """One randomly shaped instance of each primitive as (output function, parameters, weights).

    ``weights`` is None for random positive weights. Inputs of the linear
    maps are positive too, so no gradient coordinate is a sum that cancels to
    near zero (where the relative error measures only rounding noise). Softmax
    gets one selected output per row instead, since its gradient
    ``s * (R - s.R)`` cancels for any dense weighting.
    """
    dims = lambda k: tuple(int(d) for d in rng.integers(1, 9, size=k))  # noqa: E731
    cases = {}

    b, d_in, d_out = dims(3)
    x = Parameter(rng.uniform(0.1, 1, (b, d_in)), "x")
    W = Parameter(rng.uniform(0.1, 1, (d_out, d_in)), "W")
    bias = Parameter(rng.uniform(-1, 1, d_out), "b")
    cases["affine"] = (lambda: nx.affine(x, W, bias), [x, W, bias])

    for name, fn in (("sigmoid", nx.sigmoid), ("tanh_act", nx.tanh_act)):
        v = Parameter(rng.uniform(-2, 2, dims(2)), "x")
        cases[name] = (lambda v=v, fn=fn: fn(v), [v])

    rows, k = dims(2)
    sm = Parameter(rng.uniform(-1, 1, (rows, k)), "x")
    select = np.eye(k)[rng.integers(k, size=rows)]
    cases["softmax"] = (lambda: nx.softmax(sm), [sm], select)

    v = Parameter(_away_from_zero(rng, dims(2)), "x")
    cases["relu"] = (lambda: nx.relu(v), [v])

    shape = dims(2)
    a = Parameter(rng.uniform(1.1, 2, shape), "a")
    c = Parameter(rng.uniform(0.1, 2, shape[-1:]), "c")
    cases["mul_add_sub"] = (lambda: nx.sub(nx.mul(a, c) + a, c), [a, c])

    T, d_in, d_out = dims(3)
    w = int(rng.choice([1, 3, 5]))
    X = Parameter(rng.uniform(0.1, 1, (2, T, d_in)), "X")
    K = Parameter(rng.uniform(0.1, 1, (w, d_in, d_out)), "K")
    kb = Parameter(rng.uniform(-1, 1, d_out), "kb")
    cases["temporal_conv"] = (lambda: nx.temporal_conv(X, K, kb), [X, K, kb])

    T, d = dims(2)
    width, stride = (int(s) for s in rng.integers(1, 4, size=2))
    P = Parameter(_distinct(rng, (T, d)), "X")
    cases["temporal_maxpool"] = (lambda: nx.temporal_maxpool(P, width, stride), [P])

    b, C = dims(2)
    L = Parameter(rng.uniform(-1, 1, (b, C)), "logits")
    onehot = np.eye(C)[rng.integers(C, size=b)]
    cases["sigmoid_cross_entropy"] = (lambda: nx.sigmoid_cross_entropy(L, onehot), [L])

    b, k = dims(2)
    S = Parameter(rng.uniform(-1, 1, (b, k)), "logits")
    idx = rng.integers(k, size=b)
    cases["softmax_cross_entropy"] = (lambda: nx.softmax_cross_entropy(S, idx), [S])

    n1, n2, dd = dims(3)
    A = Parameter(rng.uniform(-1, 1, (n1, dd)), "A")
    B = Parameter(rng.uniform(-1, 1, (n2, dd)), "B")
    cases["concat_stack_take"] = (
        lambda: nx.stack([nx.concat([nx.take(A, 0, -1), nx.take(B, dd - 1, -1)], -1)] * 2, 0),
        [A, B])
    return cases


def primitive_checks(seeds=range(10), epsilon: float = 1e-6) -> list[CheckResult]:
    worst: dict[str, float] = {}
    for seed in seeds:
        rng = np.random.default_rng([seed, 17])
        for name, case in _primitive_cases(rng).items():
            out_fn, params, R = case if len(case) == 3 else (*case, None)
            err = finite_diff_check(_centered_loss(out_fn, rng, R), params, epsilon)
            worst[name] = max(worst.get(name, 0.0), err)
    return [CheckResult(k, v, PRIMITIVE_TOL) for k, v in worst.items()]


def cell_checks(epsilon: float = 1e-6, steps: int = 4) -> list[CheckResult]:
    out = []
    for cell in ("lstm", "gru"):
        rng = np.random.default_rng(3)
        p = init_rnn(1, 1, rng, cell)
        for prm in p.named().values():
            prm.value[...] = rng.uniform(-1, 1, prm.value.shape)
        X = Tensor(rng.uniform(-1, 1, (steps, 1)))
        R = _away_from_zero(rng, (steps, 1))
        err = finite_diff_check(lambda: _weighted(unroll(X, p), R), list(p.named().values()), epsilon)
        out.append(CheckResult(f"{cell}_unroll_{steps}_steps", err, CELL_TOL))
    return out


def micro_corpus(seed: int = MICRO_SEED, n_clips: int = 2, d: int = 3) -> Corpus:
    """Tiny two-clip corpus used by the whole-model checks."""
    rng = np.random.default_rng(seed)
    commands = ["righthand cut apple", "lefthand pour milk", "righthand pour apple"]
    records = []
    feats = []
    for i in range(n_clips):
        cmd = commands[i % len(commands)]
        records.append(ClipRecord(f"m{i}", f"m{i}.v2cf", cmd.split()[1], cmd))
        feats.append(rng.uniform(-2, 2, (3 + i, d)))
    return Corpus(records, feats, None)


def micro_model(joint: bool = True, cell: str = "lstm", seed: int = MICRO_SEED):
    """Micro V2CNet (n=4, d=3, hidden 2) on :func:`micro_corpus` with its padded batch.

    Parameters are redrawn from U[-1, 1] and the recurrent initial state is
    random. At the default init most gradients are so small that a central
    difference with epsilon 1e-6 measures only rounding noise.
    """
    from .model import ModelConfig, make_batch, new_model

    corpus = micro_corpus(seed)
    config = ModelConfig(n=4, hidden=2, cell=cell, joint=joint, seed=seed, batch_size=2,
                         tcn_filters=(3, 3, 2), fc_width=4, initial_state="uniform")
    model = new_model(corpus, config)
    rng = np.random.default_rng([seed, 29])
    for prm in model.parameters().values():
        prm.value[...] = rng.uniform(-1.0, 1.0, prm.value.shape)
    batch = make_batch(corpus, model.vocab, model.classes, config.n, model.mean_frame)
    return model, batch


def joint_check(epsilon: float = 1e-6, cell: str = "lstm", faulty: bool = False,
                seed: int = MICRO_SEED) -> CheckResult:
    model, batch = micro_model(True, cell, seed)

    def loss():
        total = model.forward_loss(batch).total
        return _faulty_square(total) if faulty else total

    err = finite_diff_check(loss, list(model.parameters().values()), epsilon)
    return CheckResult(f"joint_loss_{cell}" + ("_faulty" if faulty else ""), err, JOINT_TOL)


def _faulty_square(x: Tensor) -> Tensor:
    """``x**2`` with a backward pass that is 5% too large; used to test the checker itself."""
    v = x.value
    return nx._record(v * v, "faulty_square", (x,), lambda g: (2.1 * v * g,))


def tcn_check(epsilon: float = 1e-6, seed: int = MICRO_SEED) -> CheckResult:
    """``tcn_forward`` logits under a fixed positive weighting."""
    from .tcn import tcn_forward

    model, batch = micro_model(True, seed=seed)
    X = Tensor(batch.features)
    rng = np.random.default_rng([seed, 31])
    loss = _centered_loss(lambda: tcn_forward(X, model.tcn), rng)
    err = finite_diff_check(loss, list(model.tcn.named().values()), epsilon)
    return CheckResult("tcn_micro", err, TCN_TOL)


def run_suite(epsilon: float = 1e-6, inject_fault: bool = False) -> list[CheckResult]:
    results = primitive_checks(epsilon=epsilon)
    results += cell_checks(epsilon)
    results.append(tcn_check(epsilon))
    results += [joint_check(epsilon, "lstm"), joint_check(epsilon, "gru")]
    if inject_fault:
        results.append(joint_check(epsilon, "lstm", faulty=True))
    return results
