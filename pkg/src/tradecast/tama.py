"""Temporal aggregation over windowed latent embeddings.

A per-node GRU (batched over nodes as matrix ops, hidden width equal
to the latent width) summarizes the window; each step's hidden state
is scored into a symmetric link-probability matrix whose exponential
moving average forms a structural memory.  The final logits blend the
last hidden state's Gram matrix with the memory through a learnable
scalar.  Gradients flow through the whole memory recursion, including
the sigmoid-constrained momentum coefficient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import Rng
from .tape import (
    Mat,
    Param,
    ShapeError,
    Tape,
    Value,
    add,
    add_rowvec,
    matmul,
    mul,
    scale_var,
    sigmoid,
    sub,
    tanh,
    transpose,
)
from .encoder import glorot

__all__ = [
    "GruParams",
    "TamaParams",
    "MemoryState",
    "init_tama_params",
    "gru_cell",
    "gru_sequence",
    "score_adjacency",
    "zero_memory",
    "memory_update",
    "memory_unfold_oracle",
    "forward_window",
]


@dataclass
class GruParams:
    """Gate weights; input, recurrent, and bias per gate (update/reset/candidate)."""

    w_update: Param
    w_reset: Param
    w_cand: Param
    u_update: Param
    u_reset: Param
    u_cand: Param
    b_update: Param
    b_reset: Param
    b_cand: Param

    def params(self) -> list[Param]:
        return [self.w_update, self.w_reset, self.w_cand,
                self.u_update, self.u_reset, self.u_cand,
                self.b_update, self.b_reset, self.b_cand]


@dataclass
class TamaParams:
    gru: GruParams
    raw_momentum: Param   # sigmoid -> memory decay coefficient in (0,1)
    memory_weight: Param  # unconstrained scalar on the memory term

    def params(self) -> list[Param]:
        return [*self.gru.params(), self.raw_momentum, self.memory_weight]

    def momentum(self) -> float:
        return 1.0 / (1.0 + math.exp(-self.raw_momentum.item()))


@dataclass
class MemoryState:
    """EMA of the per-step predicted structures; starts at the zero matrix."""

    matrix: Value
    steps: int


def init_tama_params(latent_dim: int, rng: Rng, gamma_init: float = 0.8,
                     beta_init: float = 0.5) -> TamaParams:
    """Fresh aggregator parameters.

    `gamma_init` in (0,1) sets the starting memory decay (stored as its
    logit so training keeps it in range); `beta_init` is the starting
    memory weight.  Both are typically tuned by the hyperparameter
    search.

    The candidate input weight starts at the identity and the remaining
    gate weights at a tenth of Glorot scale, so the fresh cell is an
    exponential smoother of its inputs (h <- 0.5 h + 0.5 tanh(x)); the
    recurrence then has a useful gradient path from the first step
    instead of mixing the latents through random projections.
    """
    if not 0.0 < gamma_init < 1.0:
        raise ValueError(f"gamma_init must be in (0, 1), got {gamma_init}")
    d = latent_dim

    def w(name, damp=0.1):
        return Param(f"tama.gru.{name}", damp * glorot(rng.child(name), d, d))

    gru = GruParams(
        w_update=w("w_update"), w_reset=w("w_reset"),
        w_cand=Param("tama.gru.w_cand",
                     np.eye(d) + 0.1 * glorot(rng.child("w_cand"), d, d)),
        u_update=w("u_update"), u_reset=w("u_reset"), u_cand=w("u_cand"),
        b_update=Param("tama.gru.b_update", np.zeros((1, d))),
        b_reset=Param("tama.gru.b_reset", np.zeros((1, d))),
        b_cand=Param("tama.gru.b_cand", np.zeros((1, d))),
    )
    return TamaParams(
        gru=gru,
        raw_momentum=Param("tama.raw_momentum", [[math.log(gamma_init / (1.0 - gamma_init))]]),
        memory_weight=Param("tama.memory_weight", [[beta_init]]),
    )


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def gru_cell(tape: Tape, x: Value, h_prev: Value, gru: GruParams) -> Value:
    """One GRU step, batched over all node rows.

    update z = sigm(x Wz + h Uz + bz), reset r = sigm(x Wr + h Ur + br),
    candidate = tanh(x Wc + (r * h) Uc + bc),
    h_next = (1 - z) * h + z * candidate.
    """
    if x.shape != h_prev.shape:
        raise ShapeError(f"gru_cell: input {x.shape} and hidden {h_prev.shape} differ")

    def gate(w, u, b, pre_h):
        return add_rowvec(add(matmul(x, tape.leaf(w)), matmul(pre_h, tape.leaf(u))),
                          tape.leaf(b))

    z = sigmoid(gate(gru.w_update, gru.u_update, gru.b_update, h_prev))
    r = sigmoid(gate(gru.w_reset, gru.u_reset, gru.b_reset, h_prev))
    cand = tanh(gate(gru.w_cand, gru.u_cand, gru.b_cand, mul(r, h_prev)))
    ones = tape.constant(np.ones(x.shape))
    return add(mul(sub(ones, z), h_prev), mul(z, cand))


def gru_sequence(tape: Tape, zs: list[Value], gru: GruParams) -> list[Value]:
    """Hidden states for every step, from a zero initial state."""
    if not zs:
        raise ValueError("gru_sequence: empty input sequence")
    h = tape.constant(np.zeros(zs[0].shape))
    out = []
    for z in zs:
        h = gru_cell(tape, z, h, gru)
        out.append(h)
    return out


def score_adjacency(h: Value) -> Value:
    """Symmetric link probabilities: elementwise sigmoid of the Gram matrix.

    The diagonal is present but ignored by every consumer.
    """
    return sigmoid(matmul(h, transpose(h)))


def zero_memory(tape: Tape, n: int) -> MemoryState:
    return MemoryState(tape.constant(np.zeros((n, n))), 0)


def memory_update(tape: Tape, state: MemoryState, a_hat: Value, gamma: Value) -> MemoryState:
    """One EMA step: gamma * memory + (1 - gamma) * scores.

    Differentiable through the scores, the previous memory, and gamma.
    """
    one = tape.constant([[1.0]])
    blended = add(scale_var(gamma, state.matrix),
                  scale_var(sub(one, gamma), a_hat))
    return MemoryState(blended, state.steps + 1)


def memory_unfold_oracle(score_seq: list[Mat], gamma: float) -> Mat:
    """Closed-form EMA: (1-gamma) * sum_k gamma^k * scores[t-k].

    Test-only reference for the recursive update, evaluated directly.
    """
    t = len(score_seq)
    out = np.zeros_like(score_seq[0])
    for k in range(t):
        out += gamma**k * score_seq[t - 1 - k]
    return (1.0 - gamma) * out


def forward_window(tape: Tape, zs: list[Value], params: TamaParams,
                   init_memory: MemoryState | None = None,
                   use_memory: bool = True) -> tuple[Value, MemoryState]:
    """Window logits: last hidden Gram matrix plus the weighted memory.

    Every step's hidden state is scored and folded into the memory,
    which starts at zero per window unless `init_memory` is given.
    With `use_memory=False` (the plain-recurrent ablation, equivalent
    to freezing the memory weight at 0) the logits are the Gram matrix
    alone; the memory is still returned for persistence experiments.
    """
    hs = gru_sequence(tape, zs, params.gru)
    n = hs[0].shape[0]
    gamma = sigmoid(tape.leaf(params.raw_momentum))
    memory = init_memory if init_memory is not None else zero_memory(tape, n)
    for h in hs:
        memory = memory_update(tape, memory, score_adjacency(h), gamma)
    last = hs[-1]
    gram = matmul(last, transpose(last))
    if not use_memory:
        return gram, memory
    logits = add(gram, scale_var(tape.leaf(params.memory_weight), memory.matrix))
    return logits, memory
