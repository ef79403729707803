"""Small differentiable classifiers with explicit loss/gradient/Fisher ops.

Two architectures: plain softmax regression, and one tanh hidden layer. The
parameter vector theta is flat; states are immutable values (arrays are
marked read-only) and every operation returns a new state.

All batch means use one documented reduction: per-example terms are
accumulated left to right in ascending-example-id order, then divided by the
batch size. This makes runs bit-reproducible and lets brute-force oracles
match the implementation exactly.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .clusters import Example
from .seeds import spawn_rng

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_TAG = "learner-ckpt-v1"

ExtraGrad = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Arch:
    """Architecture descriptor: ``kind`` is "softmax" or "mlp"."""

    kind: str
    d: int
    K: int
    hidden: int = 0

    def __post_init__(self):
        if self.kind not in ("softmax", "mlp"):
            raise ValueError(f"unknown arch kind {self.kind!r}")
        if self.d < 1 or self.K < 2:
            raise ValueError("need d >= 1 and K >= 2")
        if self.kind == "mlp" and self.hidden < 1:
            raise ValueError("mlp arch needs hidden >= 1")

    @property
    def param_count(self) -> int:
        if self.kind == "softmax":
            return self.K * self.d + self.K
        return self.hidden * self.d + self.hidden + self.K * self.hidden + self.K


@dataclass(frozen=True)
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    count: int


@dataclass(frozen=True)
class LearnerState:
    arch: Arch
    theta: np.ndarray
    opt: OptimizerState

    def __post_init__(self):
        if self.theta.shape != (self.arch.param_count,):
            raise ValueError(
                f"theta has length {self.theta.shape}, arch needs {self.arch.param_count}"
            )


def _frozen(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.setflags(write=False)
    return out


def _make_state(arch: Arch, theta: np.ndarray, opt: OptimizerState | None = None) -> LearnerState:
    if opt is None:
        zeros = _frozen(np.zeros(arch.param_count))
        opt = OptimizerState(m=zeros, v=zeros, count=0)
    return LearnerState(arch=arch, theta=_frozen(theta), opt=opt)


def init_state(arch: Arch, rng: np.random.Generator | None = None) -> LearnerState:
    """Fresh state: zero weights for softmax, scaled normal draws for mlp."""
    if arch.kind == "softmax":
        theta = np.zeros(arch.param_count)
    else:
        if rng is None:
            raise ValueError("mlp init needs an rng")
        h, d, k = arch.hidden, arch.d, arch.K
        w1 = rng.standard_normal((h, d)) / math.sqrt(d)
        w2 = rng.standard_normal((k, h)) / math.sqrt(h)
        theta = np.concatenate([w1.ravel(), np.zeros(h), w2.ravel(), np.zeros(k)])
    return _make_state(arch, theta)


def state_from_theta(arch: Arch, theta: Sequence[float]) -> LearnerState:
    return _make_state(arch, np.asarray(theta, dtype=float))


def _unpack(arch: Arch, theta: np.ndarray):
    if arch.kind == "softmax":
        k, d = arch.K, arch.d
        w = theta[: k * d].reshape(k, d)
        b = theta[k * d :]
        return w, b
    h, d, k = arch.hidden, arch.d, arch.K
    i = 0
    w1 = theta[i : i + h * d].reshape(h, d)
    i += h * d
    b1 = theta[i : i + h]
    i += h
    w2 = theta[i : i + k * h].reshape(k, h)
    i += k * h
    b2 = theta[i:]
    return w1, b1, w2, b2


def _forward(state: LearnerState, x: np.ndarray):
    """Logits for a (n, d) batch; also returns hidden activations for mlp."""
    arch = state.arch
    if x.ndim != 2 or x.shape[1] != arch.d:
        raise ValueError(f"features must be (n, {arch.d}), got {x.shape}")
    if arch.kind == "softmax":
        w, b = _unpack(arch, state.theta)
        return x @ w.T + b, None
    w1, b1, w2, b2 = _unpack(arch, state.theta)
    hidden = np.tanh(x @ w1.T + b1)
    return hidden @ w2.T + b2, hidden


def _log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def logits(state: LearnerState, x: np.ndarray) -> np.ndarray:
    return _forward(state, np.atleast_2d(np.asarray(x, dtype=float)))[0]


def predict_batch(state: LearnerState, x: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties resolve to the lowest class index."""
    return np.argmax(logits(state, x), axis=1)


def predict(state: LearnerState, features: Sequence[float]) -> int:
    feats = np.asarray(features, dtype=float)
    if feats.shape != (state.arch.d,):
        raise ValueError(f"features must have dimension {state.arch.d}, got {feats.shape}")
    return int(predict_batch(state, feats[None, :])[0])


def _sorted_by_id(batch: Sequence[Example]) -> list[Example]:
    return sorted(batch, key=lambda e: e.id)


def _ordered_mean(rows: np.ndarray) -> np.ndarray:
    # left-to-right accumulation; rows are already in ascending-id order
    acc = np.zeros_like(rows[0])
    for row in rows:
        acc = acc + row
    return acc / len(rows)


def example_losses(state: LearnerState, batch: Sequence[Example]) -> np.ndarray:
    """Per-example cross-entropy, aligned with the input order."""
    x = np.array([e.features for e in batch], dtype=float)
    y = np.array([e.label for e in batch], dtype=int)
    logp = _log_softmax(_forward(state, x)[0])
    return -logp[np.arange(len(batch)), y]


def loss(state: LearnerState, batch: Sequence[Example]) -> float:
    """Mean cross-entropy over the batch."""
    if not batch:
        raise ValueError("loss needs a non-empty batch")
    ordered = _sorted_by_id(batch)
    return float(_ordered_mean(example_losses(state, ordered)))


def _per_example_grads(state: LearnerState, batch: Sequence[Example]) -> np.ndarray:
    """(n, p) matrix of per-example loss gradients, batch order preserved."""
    arch = state.arch
    x = np.array([e.features for e in batch], dtype=float)
    y = np.array([e.label for e in batch], dtype=int)
    z, hidden = _forward(state, x)
    p = np.exp(_log_softmax(z))
    delta = p.copy()
    delta[np.arange(len(batch)), y] -= 1.0
    if arch.kind == "softmax":
        gw = np.einsum("nk,nd->nkd", delta, x).reshape(len(batch), -1)
        return np.concatenate([gw, delta], axis=1)
    w1, b1, w2, b2 = _unpack(arch, state.theta)
    gw2 = np.einsum("nk,nh->nkh", delta, hidden).reshape(len(batch), -1)
    dhidden = delta @ w2
    d1 = dhidden * (1.0 - hidden * hidden)
    gw1 = np.einsum("nh,nd->nhd", d1, x).reshape(len(batch), -1)
    return np.concatenate([gw1, d1, gw2, delta], axis=1)


def grad(state: LearnerState, batch: Sequence[Example]) -> np.ndarray:
    """Analytic gradient of ``loss`` with respect to theta."""
    if not batch:
        raise ValueError("grad needs a non-empty batch")
    return _ordered_mean(_per_example_grads(state, _sorted_by_id(batch)))


@dataclass(frozen=True)
class FisherDiag:
    values: np.ndarray


def fisher_diag(state: LearnerState, batch: Sequence[Example]) -> FisherDiag:
    """Empirical diagonal Fisher: mean of squared per-example gradients."""
    if not batch:
        raise ValueError("fisher_diag needs a non-empty batch")
    rows = _per_example_grads(state, _sorted_by_id(batch))
    return FisherDiag(values=_frozen(_ordered_mean(rows * rows)))


def step(state: LearnerState, gradient: np.ndarray, lr: float) -> LearnerState:
    """One Adam update with bias correction; the input state is untouched."""
    g = np.asarray(gradient, dtype=float)
    if g.shape != state.theta.shape:
        raise ValueError(f"gradient length {g.shape} != theta length {state.theta.shape}")
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient has non-finite entries")
    count = state.opt.count + 1
    m = ADAM_BETA1 * state.opt.m + (1.0 - ADAM_BETA1) * g
    v = ADAM_BETA2 * state.opt.v + (1.0 - ADAM_BETA2) * (g * g)
    mhat = m / (1.0 - ADAM_BETA1**count)
    vhat = v / (1.0 - ADAM_BETA2**count)
    theta = state.theta - lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
    opt = OptimizerState(m=_frozen(m), v=_frozen(v), count=count)
    return LearnerState(arch=state.arch, theta=_frozen(theta), opt=opt)


def _epoch(
    state: LearnerState,
    batch: Sequence[Example],
    lr: float,
    batch_size: int,
    rng: np.random.Generator | None,
    extra_grad: ExtraGrad | None,
) -> LearnerState:
    """One pass of mini-batch Adam steps over ``batch``.

    Mini-batch membership follows ascending-id order, shuffled when an rng is
    given; the gradient reduction inside each mini-batch is id-ordered either
    way.
    """
    ordered = _sorted_by_id(batch)
    if rng is not None:
        idx = rng.permutation(len(ordered))
        ordered = [ordered[i] for i in idx]
    for start in range(0, len(ordered), batch_size):
        chunk = ordered[start : start + batch_size]
        g = grad(state, chunk)
        if extra_grad is not None:
            g = g + extra_grad(state.theta)
        state = step(state, g, lr)
    return state


def fine_tune(
    state: LearnerState,
    batch: Sequence[Example],
    lr: float,
    epochs: int,
    batch_size: int = 8,
    rng: np.random.Generator | None = None,
    extra_grad: ExtraGrad | None = None,
) -> LearnerState:
    """``epochs`` passes of mini-batch Adam on ``batch``; returns a new state.

    ``extra_grad``, when given, is evaluated at the current theta and added to
    every mini-batch gradient (used for parameter-anchor penalties).
    """
    if not batch:
        raise ValueError("fine_tune needs a non-empty batch")
    for _ in range(epochs):
        state = _epoch(state, batch, lr, batch_size, rng, extra_grad)
    return state


def accuracy(state: LearnerState, examples: Sequence[Example]) -> float:
    if not examples:
        raise ValueError("accuracy needs a non-empty sample")
    x = np.array([e.features for e in examples], dtype=float)
    y = np.array([e.label for e in examples], dtype=int)
    return float(np.mean(predict_batch(state, x) == y))


def train_upstream(
    pool: Sequence[Example],
    arch: Arch,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 64,
) -> tuple[LearnerState, float]:
    """Train the base model on the upstream pool; returns (state, train acc).

    Deterministic given ``seed``: one derived rng initializes the weights and
    another drives the per-epoch shuffles. Raises if training diverges.
    """
    if not pool:
        raise ValueError("upstream pool is empty")
    state = init_state(arch, rng=spawn_rng(seed, "init"))
    shuffle_rng = spawn_rng(seed, "shuffle")
    for epoch in range(epochs):
        state = _epoch(state, pool, lr, batch_size, shuffle_rng, None)
        if not np.all(np.isfinite(state.theta)):
            raise RuntimeError(
                f"upstream training diverged at epoch {epoch + 1}: non-finite parameters "
                f"(lr={lr}, batch_size={batch_size})"
            )
    return state, accuracy(state, pool)


# --- checkpoints -------------------------------------------------------------


def save_state(state: LearnerState, path: str | Path) -> None:
    payload = {
        "format": CHECKPOINT_TAG,
        "arch": {
            "kind": state.arch.kind,
            "d": state.arch.d,
            "K": state.arch.K,
            "hidden": state.arch.hidden,
        },
        "theta": state.theta.tolist(),
        "opt_m": state.opt.m.tolist(),
        "opt_v": state.opt.v.tolist(),
        "opt_count": state.opt.count,
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_state(path: str | Path) -> LearnerState:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != CHECKPOINT_TAG:
        raise ValueError(f"not a {CHECKPOINT_TAG} checkpoint: {path}")
    arch = Arch(
        kind=payload["arch"]["kind"],
        d=int(payload["arch"]["d"]),
        K=int(payload["arch"]["K"]),
        hidden=int(payload["arch"]["hidden"]),
    )
    opt = OptimizerState(
        m=_frozen(np.array(payload["opt_m"], dtype=float)),
        v=_frozen(np.array(payload["opt_v"], dtype=float)),
        count=int(payload["opt_count"]),
    )
    return LearnerState(arch=arch, theta=_frozen(np.array(payload["theta"], dtype=float)), opt=opt)
