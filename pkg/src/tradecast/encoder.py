"""Per-snapshot variational graph encoder.

Pipeline per snapshot: concatenate observed features with a learnable
node embedding; run k parallel attention heads (projection + row
normalization, edge dropout, trade-weighted column softmax, residual
propagation) alongside a two-layer graph-convolution branch; fuse with
a residual skip; map through a shared graph-conv trunk to mean /
log-std heads; sample with the reparameterization trick.  One
parameter set serves every snapshot in a window (weights are shared
across time).
"""

from __future__ import annotations

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
    clamp,
    concat_cols,
    exp,
    l2_normalize_rows,
    masked_softmax_columns,
    matmul,
    mean_stack,
    mul,
    relu,
    scale,
    scale_var,
    sigmoid,
    sub,
    sum_all,
    transpose,
)

__all__ = [
    "EncoderConfig",
    "HeadParams",
    "EncoderParams",
    "LatentDist",
    "init_encoder_params",
    "glorot",
    "gcn_norm",
    "build_input",
    "drop_edge_mask",
    "dagan_head",
    "gcn_layer",
    "gcn_branch",
    "fuse",
    "variational_heads",
    "sample_z",
    "kl_divergence",
    "encode_snapshot",
]

LOG_SIGMA_CLAMP = 10.0


@dataclass(frozen=True)
class EncoderConfig:
    """Width and regularization settings for the snapshot encoder."""

    feat_dim: int = 4      # observed country attributes
    embed_dim: int = 4     # learnable per-node embedding width
    hidden_dim: int = 64
    latent_dim: int = 32
    heads: int = 3         # parallel attention heads
    depth: int = 2         # propagation steps per head
    drop_edge: float = 0.2
    scale_init: float = 1.0
    # cold-start posterior: sigma ~= exp(-2) at init so the sampled latents
    # carry the mean's structure instead of drowning it (a sigma of 1 at
    # this learning-rate budget provably collapses the posterior)
    logsig_bias_init: float = -2.0

    def __post_init__(self):
        for name in ("feat_dim", "embed_dim", "hidden_dim", "latent_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.heads < 1 or self.depth < 1:
            raise ValueError("heads and depth must be >= 1")
        if not 0.0 <= self.drop_edge < 1.0:
            raise ValueError(f"drop_edge must be in [0, 1), got {self.drop_edge}")


@dataclass
class HeadParams:
    """One attention head: input projection, row-norm scale, per-step mixes."""

    w_in: Param
    b_in: Param
    scale: Param
    raw_prop: list[Param]  # sigmoid -> weight on the propagated signal, per step
    raw_skip: list[Param]  # sigmoid -> weight on the projected input, per step

    def params(self) -> list[Param]:
        return [self.w_in, self.b_in, self.scale, *self.raw_prop, *self.raw_skip]


@dataclass
class EncoderParams:
    node_embed: Param
    heads: list[HeadParams]
    w_gcn0: Param
    w_gcn1: Param
    w_shared: Param
    w_mu: Param
    w_logsig: Param
    b_logsig: Param  # row bias on the log-std head; starts the posterior cold

    def params(self) -> list[Param]:
        out = [self.node_embed]
        for h in self.heads:
            out.extend(h.params())
        out.extend([self.w_gcn0, self.w_gcn1, self.w_shared, self.w_mu,
                    self.w_logsig, self.b_logsig])
        return out


@dataclass
class LatentDist:
    """Variational parameters and the (sampled or deterministic) latent."""

    mu: Value
    log_sigma: Value
    z: Value | None = None


def glorot(rng: Rng, rows: int, cols: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(rows, cols, -bound, bound)


def init_encoder_params(config: EncoderConfig, n: int, rng: Rng) -> EncoderParams:
    """Fresh parameters for an n-node universe.

    Weight matrices are Glorot-uniform; the node embedding starts near
    zero (std 0.01); mix weights start at 0.5 (raw value 0).
    """
    d_in = config.feat_dim + config.embed_dim
    heads = []
    for k in range(config.heads):
        hrng = rng.child("head", k)
        heads.append(HeadParams(
            w_in=Param(f"encoder.head{k}.w_in", glorot(hrng.child("w_in"), d_in, config.hidden_dim)),
            b_in=Param(f"encoder.head{k}.b_in", np.zeros((1, config.hidden_dim))),
            scale=Param(f"encoder.head{k}.scale", [[config.scale_init]]),
            raw_prop=[Param(f"encoder.head{k}.step{l}.raw_prop", [[0.0]])
                      for l in range(config.depth)],
            raw_skip=[Param(f"encoder.head{k}.step{l}.raw_skip", [[0.0]])
                      for l in range(config.depth)],
        ))
    return EncoderParams(
        node_embed=Param("encoder.node_embed",
                         rng.child("node_embed").normal(n, config.embed_dim, std=0.01)),
        heads=heads,
        w_gcn0=Param("encoder.w_gcn0", glorot(rng.child("w_gcn0"), d_in, config.hidden_dim)),
        w_gcn1=Param("encoder.w_gcn1", glorot(rng.child("w_gcn1"), config.hidden_dim, config.hidden_dim)),
        w_shared=Param("encoder.w_shared", glorot(rng.child("w_shared"), config.hidden_dim, config.hidden_dim)),
        w_mu=Param("encoder.w_mu", glorot(rng.child("w_mu"), config.hidden_dim, config.latent_dim)),
        w_logsig=Param("encoder.w_logsig", glorot(rng.child("w_logsig"), config.hidden_dim, config.latent_dim)),
        b_logsig=Param("encoder.b_logsig",
                       np.full((1, config.latent_dim), config.logsig_bias_init)),
    )


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def gcn_norm(adj: Mat) -> Mat:
    """Symmetrically normalized adjacency with self-loops (plain data).

    Built once per snapshot from the undropped adjacency; degrees are
    row sums of adj + I, so isolated nodes keep their self-loop.
    """
    n = adj.shape[0]
    a_hat = adj + np.eye(n)
    d_inv_sqrt = 1.0 / np.sqrt(a_hat.sum(axis=1))
    return d_inv_sqrt[:, None] * a_hat * d_inv_sqrt[None, :]


def _snapshot_gcn_norm(snapshot) -> Mat:
    """gcn_norm of the snapshot's adjacency, cached on the snapshot."""
    cached = getattr(snapshot, "_gcn_norm_cache", None)
    if cached is None:
        cached = gcn_norm(snapshot.adj)
        snapshot._gcn_norm_cache = cached
    return cached


def build_input(tape: Tape, feats: Mat, params: EncoderParams) -> Value:
    """Observed features next to the learnable embedding, N x (F + embed)."""
    embed = params.node_embed
    if feats.shape[0] != embed.value.shape[0]:
        raise ShapeError(
            f"feature rows {feats.shape[0]} do not match embedding rows {embed.value.shape[0]} "
            "(country universe drift)")
    return concat_cols(tape.constant(feats), tape.leaf(embed))


def drop_edge_mask(adj: Mat, p_drop: float, rng: Rng) -> Mat:
    """Keep each existing edge independently with probability 1 - p_drop."""
    if p_drop <= 0.0:
        return adj
    return adj * rng.bernoulli(adj.shape, 1.0 - p_drop)


def dagan_head(tape: Tape, x_tilde: Value, adj: Mat, trade: Mat, head: HeadParams,
               p_drop: float, rng: Rng | None, train: bool) -> Value:
    """One attention head's propagated representation, N x hidden.

    The projected input is row-normalized to the learnable scale; the
    trade weights are column-softmaxed over the (possibly dropped)
    edges; then `depth` residual propagation steps blend the propagated
    and projected signals through per-step sigmoid-constrained weights.
    """
    m0 = l2_normalize_rows(
        relu(add_rowvec(matmul(x_tilde, tape.leaf(head.w_in)), tape.leaf(head.b_in))),
        tape.leaf(head.scale))
    if train:
        if rng is None and p_drop > 0.0:
            raise ValueError("train-mode dagan_head needs an rng for edge dropout")
        a_drop = drop_edge_mask(adj, p_drop, rng)
    else:
        a_drop = adj
    # column j of the softmax weights node j's surviving in-edges; node j
    # aggregates exactly those sources, so propagation applies the transpose
    p_mat = transpose(masked_softmax_columns(tape.constant(trade), a_drop))
    m = m0
    for l in range(len(head.raw_prop)):
        prop = sigmoid(tape.leaf(head.raw_prop[l]))
        skip = sigmoid(tape.leaf(head.raw_skip[l]))
        m = add(scale_var(prop, matmul(p_mat, m)), scale_var(skip, m0))
    return m


def gcn_layer(tape: Tape, h: Value, a_hat: Value, w: Param) -> Value:
    """One graph convolution: a_hat . h . w (caller applies activation)."""
    return matmul(a_hat, matmul(h, tape.leaf(w)))


def gcn_branch(tape: Tape, x_tilde: Value, a_hat: Value, params: EncoderParams) -> Value:
    """Two-layer convolution branch, N x hidden."""
    h = relu(gcn_layer(tape, x_tilde, a_hat, params.w_gcn0))
    return gcn_layer(tape, h, a_hat, params.w_gcn1)


def fuse(h0: Value, head_outputs: list[Value]) -> Value:
    """Average of the branch and all heads, plus a skip back to the branch."""
    return add(mean_stack([h0, *head_outputs]), h0)


def variational_heads(tape: Tape, h: Value, a_hat: Value, params: EncoderParams) -> LatentDist:
    """Mean / log-std heads over a shared inner convolution trunk.

    The log-std head carries a learnable row bias (initialized negative)
    so sampling starts near-deterministic; without it the bias-free
    head pins sigma to 1 and training collapses to the prior.
    """
    g = relu(gcn_layer(tape, h, a_hat, params.w_shared))
    mu = gcn_layer(tape, g, a_hat, params.w_mu)
    log_sigma = clamp(add_rowvec(gcn_layer(tape, g, a_hat, params.w_logsig),
                                 tape.leaf(params.b_logsig)),
                      -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP)
    return LatentDist(mu, log_sigma)


def sample_z(tape: Tape, dist: LatentDist, rng: Rng | None, train: bool) -> Value:
    """Reparameterized sample in train mode; the mean in eval mode."""
    if not train:
        dist.z = dist.mu
        return dist.z
    if rng is None:
        raise ValueError("train-mode sample_z needs an rng for the noise")
    eps = rng.normal(*dist.mu.shape)
    dist.z = add(dist.mu, mul(exp(dist.log_sigma), tape.constant(eps)))
    return dist.z


def kl_divergence(tape: Tape, dist: LatentDist) -> Value:
    """KL to the standard normal prior: summed over latent dims, averaged
    over nodes (1x1).

    The per-node average keeps the prior pull on the log-std parameters
    weaker than the reconstruction signal; with the raw sum the
    adaptive optimizer walks sigma back to 1 mid-run and the sampled
    latents drown in noise again.
    """
    two_logsig = scale(dist.log_sigma, 2.0)
    ones = tape.constant(np.ones(dist.mu.shape))
    inner = sub(sub(add(ones, two_logsig), mul(dist.mu, dist.mu)), exp(two_logsig))
    return scale(sum_all(inner), -0.5 / dist.mu.shape[0])


def encode_snapshot(tape: Tape, snapshot, params: EncoderParams, config: EncoderConfig,
                    rng: Rng | None, train: bool) -> tuple[Value, Value]:
    """Full encoder for one snapshot: returns (latent z, KL term).

    `rng` feeds edge dropout and the latent noise; eval mode is a
    deterministic pure function of (snapshot, params).
    """
    x_tilde = build_input(tape, snapshot.feats, params)
    a_hat = tape.constant(_snapshot_gcn_norm(snapshot))
    head_outs = [
        dagan_head(tape, x_tilde, snapshot.adj, snapshot.trade, head, config.drop_edge,
                   rng.child("drop", k) if (train and rng is not None) else None, train)
        for k, head in enumerate(params.heads)
    ]
    h0 = gcn_branch(tape, x_tilde, a_hat, params)
    h = fuse(h0, head_outs)
    dist = variational_heads(tape, h, a_hat, params)
    z = sample_z(tape, dist, rng.child("latent-noise") if (train and rng is not None) else None, train)
    kl = kl_divergence(tape, dist)
    return z, kl
