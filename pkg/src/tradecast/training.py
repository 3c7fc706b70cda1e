"""Loss assembly, sliding-window training, metrics, and ablation runs.

A run is a pure function of (dataset, config, seed, model).  Training
iterates every window but the last in chronological order each epoch
(full-graph binary cross-entropy over the strict upper triangle of the
symmetrized target, plus the weighted mean of the per-snapshot KL
terms) and evaluates on the held-out final window after every epoch
with a fixed, seeded negative sample so curves are comparable across
epochs.

Models:
  tama   -- encoder + recurrent aggregator with structural memory
  gru    -- same, memory weight frozen at zero (logits are the Gram
            matrix alone)
  static -- encoder alone on the last training snapshot, scored
            against the held-out year
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np

from .encoder import EncoderConfig, encode_snapshot, init_encoder_params
from .graphdata import ConfigError, TemporalDataset, build_windows
from .optim import AdamState, adam_step
from .rng import Rng
from .tape import (
    Mat,
    Tape,
    Value,
    add,
    backward,
    bce_with_logits_masked,
    matmul,
    scale,
    transpose,
)
from .tama import MemoryState, forward_window, init_tama_params

__all__ = [
    "EvaluationError",
    "TrainConfig",
    "EpochStats",
    "RunResult",
    "EvalReport",
    "MODELS",
    "symmetrize_target",
    "loss_total",
    "evaluate",
    "auc_score",
    "ap_score",
    "aggregate_runs",
    "iter_training",
    "train_run",
    "static_baseline_run",
    "run_seeds",
    "window_sweep",
]

MODELS = ("tama", "gru", "static")


class EvaluationError(ValueError):
    """Evaluation split lacks positives or enough candidate negatives."""


@dataclass(frozen=True)
class TrainConfig:
    """Fixed training protocol; defaults follow the reference comparison setup."""

    epochs: int = 300
    lr: float = 1e-3
    kl_weight: float = 1e-4
    window: int = 4
    seeds: tuple[int, ...] = tuple(range(1000, 1010))
    encoder: EncoderConfig = EncoderConfig()
    gamma_init: float = 0.8
    beta_init: float = 0.5
    eval_seed: int = 2718
    pos_weight: float | None = None
    persist_memory: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.kl_weight < 0:
            raise ConfigError(f"kl_weight must be >= 0, got {self.kl_weight}")
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")
        if not self.seeds:
            raise ConfigError("need at least one seed")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    auc: float
    ap: float


@dataclass
class RunResult:
    seed: int
    final_auc: float
    final_ap: float
    loss_curve: list[float]
    auc_curve: list[float]
    ap_curve: list[float]

    @property
    def final_loss(self) -> float:
        return self.loss_curve[-1]


@dataclass
class EvalReport:
    """Across-seed summary, stored in percent."""

    model: str
    auc_mean: float
    auc_std: float
    ap_mean: float
    ap_std: float
    n_runs: int

    def summary(self) -> str:
        return (f"{self.model}: AUC {self.auc_mean:.2f} ± {self.auc_std:.2f}, "
                f"AP {self.ap_mean:.2f} ± {self.ap_std:.2f} ({self.n_runs} seeds)")


# ---------------------------------------------------------------------------
# targets, loss, metrics
# ---------------------------------------------------------------------------

def symmetrize_target(adj: Mat) -> tuple[Mat, Mat]:
    """max(A, A^T) plus the strict-upper-triangle evaluation mask."""
    a_sym = np.maximum(adj, adj.T)
    mask = np.triu(np.ones_like(adj), k=1)
    return a_sym, mask


def loss_total(tape: Tape, logits: Value, a_sym: Mat, kl_terms: list[Value],
               kl_weight: float, pos_weight: float | None = None) -> Value:
    """Upper-triangle reconstruction BCE plus weighted mean KL (1x1)."""
    _, mask = symmetrize_target(a_sym)  # a_sym is already symmetric; reuse the mask shape
    loss = bce_with_logits_masked(logits, a_sym, mask, pos_weight)
    if kl_weight == 0.0 or not kl_terms:
        return loss
    kl_sum = kl_terms[0]
    for term in kl_terms[1:]:
        kl_sum = add(kl_sum, term)
    return add(loss, scale(kl_sum, kl_weight / len(kl_terms)))


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * ((i + 1) + (j + 1))
        i = j + 1
    return ranks


def auc_score(pos_scores: np.ndarray, neg_scores: np.ndarray) -> float:
    """Probability a positive outranks a negative; exact ties count 0.5."""
    p, n = len(pos_scores), len(neg_scores)
    ranks = _average_ranks(np.concatenate([pos_scores, neg_scores]))
    return float((ranks[:p].sum() - p * (p + 1) / 2.0) / (p * n))


def ap_score(pos_scores: np.ndarray, neg_scores: np.ndarray) -> float:
    """Precision summed over recall increments on the descending ranking.

    Ties are broken by position in the candidate list (positives first,
    each side in upper-triangle row-major order), so the value is a
    pure function of the inputs.
    """
    scores = np.concatenate([pos_scores, neg_scores])
    labels = np.concatenate([np.ones(len(pos_scores)), np.zeros(len(neg_scores))])
    order = np.lexsort((np.arange(len(scores)), -scores))
    ranked = labels[order]
    cum_tp = np.cumsum(ranked)
    k = np.arange(1, len(ranked) + 1)
    precision = cum_tp / k
    return float(precision[ranked == 1.0].sum() / len(pos_scores))


def evaluate(a_logits: Mat, a_sym: Mat, mask: Mat, rng: Rng) -> tuple[float, float]:
    """AUC and AP of the masked scores against an equal-sized negative sample.

    Positives are all mask entries with a_sym = 1; negatives are drawn
    without replacement from the mask's zeros using `rng` (pass an
    identically seeded rng each epoch to keep curves comparable).
    """
    sel = mask != 0
    pos_flat = np.flatnonzero(sel & (a_sym == 1.0))
    neg_candidates = np.flatnonzero(sel & (a_sym == 0.0))
    if len(pos_flat) == 0:
        raise EvaluationError("no positive pairs in the evaluation mask")
    if len(neg_candidates) < len(pos_flat):
        raise EvaluationError(
            f"only {len(neg_candidates)} candidate negatives for {len(pos_flat)} positives")
    neg_flat = neg_candidates[np.sort(rng.choice_without_replacement(
        len(neg_candidates), len(pos_flat)))]
    flat_scores = a_logits.ravel()
    return (auc_score(flat_scores[pos_flat], flat_scores[neg_flat]),
            ap_score(flat_scores[pos_flat], flat_scores[neg_flat]))


def aggregate_runs(results: list[RunResult], model: str = "tama") -> EvalReport:
    """Mean and sample standard deviation (n-1; zero for n=1), in percent."""
    if not results:
        raise ValueError("aggregate_runs: no results")
    aucs = np.array([r.final_auc for r in results]) * 100.0
    aps = np.array([r.final_ap for r in results]) * 100.0
    std = (lambda v: float(v.std(ddof=1))) if len(results) > 1 else (lambda v: 0.0)
    return EvalReport(model, float(aucs.mean()), std(aucs),
                      float(aps.mean()), std(aps), len(results))


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def _align_feat_dim(config: TrainConfig, ds: TemporalDataset) -> TrainConfig:
    if config.encoder.feat_dim != ds.feat_dim:
        return replace(config, encoder=replace(config.encoder, feat_dim=ds.feat_dim))
    return config


def iter_training(ds: TemporalDataset, config: TrainConfig, seed: int,
                  model: str = "tama") -> Iterator[EpochStats]:
    """Train one seeded run, yielding per-epoch loss and held-out metrics.

    The dataset needs at least window + 2 snapshots (one training
    window plus the held-out one).  The generator owns all parameters;
    draining it completes the run.
    """
    if model not in MODELS:
        raise ConfigError(f"unknown model {model!r}; expected one of {MODELS}")
    if model == "static":
        yield from _iter_static(ds, config, seed)
        return
    config = _align_feat_dim(config, ds)
    windows = build_windows(ds, config.window)
    if len(windows) < 2:
        raise ConfigError(
            f"need at least {config.window + 2} snapshots for one training window "
            f"plus the held-out window, got {len(ds.snapshots)}")
    train_windows, eval_window = windows[:-1], windows[-1]

    rng = Rng(seed)
    enc = init_encoder_params(config.encoder, ds.n, rng.child("encoder-init"))
    tama = init_tama_params(config.encoder.latent_dim, rng.child("tama-init"),
                            config.gamma_init, config.beta_init)
    use_memory = model == "tama"
    params = enc.params() + tama.params()
    if not use_memory:
        tama.memory_weight.value[...] = 0.0
        params = enc.params() + [p for p in tama.params() if p is not tama.memory_weight]
    state = AdamState(params)

    a_sym_eval, eval_mask = symmetrize_target(eval_window.target_adj)
    for epoch in range(config.epochs):
        losses = []
        for wi, window in enumerate(train_windows):
            tape = Tape()
            wrng = rng.child("train", epoch, wi)
            a_sym, _ = symmetrize_target(window.target_adj)
            zs, kls = [], []
            for t, snap in enumerate(window.inputs):
                z, kl = encode_snapshot(tape, snap, enc, config.encoder,
                                        wrng.child("snap", t), train=True)
                zs.append(z)
                kls.append(kl)
            logits, _ = forward_window(tape, zs, tama, use_memory=use_memory)
            loss = loss_total(tape, logits, a_sym, kls, config.kl_weight, config.pos_weight)
            backward(tape, loss)
            adam_step(params, state, config.lr)
            losses.append(float(loss.data[0, 0]))
        auc, ap = _evaluate_window(ds, config, enc, tama, eval_window, use_memory,
                                   a_sym_eval, eval_mask)
        yield EpochStats(epoch + 1, float(np.mean(losses)), auc, ap)


def _evaluate_window(ds, config, enc, tama, eval_window, use_memory, a_sym_eval, eval_mask):
    """Eval-mode forward on the held-out window; fixed negative sample."""
    tape = Tape()
    init_mem: MemoryState | None = None
    if config.persist_memory:
        # warm the memory on the preceding window's snapshots (eval mode)
        prev = ds.snapshots[-(config.window + 1) - config.window:-(config.window + 1)]
        if len(prev) == config.window:
            zs_prev = [encode_snapshot(tape, s, enc, config.encoder, None, train=False)[0]
                       for s in prev]
            _, init_mem = forward_window(tape, zs_prev, tama, use_memory=use_memory)
    zs = [encode_snapshot(tape, s, enc, config.encoder, None, train=False)[0]
          for s in eval_window.inputs]
    logits, _ = forward_window(tape, zs, tama, init_memory=init_mem, use_memory=use_memory)
    return evaluate(logits.data, a_sym_eval, eval_mask, Rng(config.eval_seed).child("negatives"))


def _iter_static(ds: TemporalDataset, config: TrainConfig, seed: int) -> Iterator[EpochStats]:
    """Encoder-only baseline: reconstruct the last training snapshot, score
    its logits against the held-out year.  No recurrence, no memory."""
    config = _align_feat_dim(config, ds)
    if len(ds.snapshots) < 2:
        raise ConfigError("static baseline needs at least 2 snapshots")
    train_snap = ds.snapshots[-2]
    target = ds.snapshots[-1]
    rng = Rng(seed)
    enc = init_encoder_params(config.encoder, ds.n, rng.child("encoder-init"))
    params = enc.params()
    state = AdamState(params)
    a_sym_train, _ = symmetrize_target(train_snap.adj)
    a_sym_eval, eval_mask = symmetrize_target(target.adj)
    for epoch in range(config.epochs):
        tape = Tape()
        z, kl = encode_snapshot(tape, train_snap, enc, config.encoder,
                                rng.child("train", epoch), train=True)
        logits = matmul(z, transpose(z))
        loss = loss_total(tape, logits, a_sym_train, [kl], config.kl_weight, config.pos_weight)
        backward(tape, loss)
        adam_step(params, state, config.lr)

        eval_tape = Tape()
        z_eval, _ = encode_snapshot(eval_tape, train_snap, enc, config.encoder, None, train=False)
        eval_logits = matmul(z_eval, transpose(z_eval))
        auc, ap = evaluate(eval_logits.data, a_sym_eval, eval_mask,
                           Rng(config.eval_seed).child("negatives"))
        yield EpochStats(epoch + 1, float(loss.data[0, 0]), auc, ap)


def train_run(ds: TemporalDataset, config: TrainConfig, seed: int,
              model: str = "tama") -> RunResult:
    """Drain a full training run into curves and final metrics."""
    losses, aucs, aps = [], [], []
    for stats in iter_training(ds, config, seed, model):
        losses.append(stats.loss)
        aucs.append(stats.auc)
        aps.append(stats.ap)
    return RunResult(seed, aucs[-1], aps[-1], losses, aucs, aps)


def static_baseline_run(ds: TemporalDataset, config: TrainConfig, seed: int) -> RunResult:
    return train_run(ds, config, seed, model="static")


def run_seeds(ds: TemporalDataset, config: TrainConfig, model: str = "tama",
              jobs: int = 1, seeds: tuple[int, ...] | None = None) -> list[RunResult]:
    """One run per seed, merged in seed order regardless of job count."""
    seeds = config.seeds if seeds is None else seeds
    if jobs <= 1:
        return [train_run(ds, config, seed, model) for seed in seeds]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(train_run, ds, config, seed, model) for seed in seeds]
        return [f.result() for f in futures]


def window_sweep(ds: TemporalDataset, config: TrainConfig, w_values,
                 model: str = "tama", jobs: int = 1):
    """Seeded protocol per window length; infeasible lengths are skipped.

    Returns (rows, notices): rows are dicts with keys
    w, auc_mean, auc_std, ap_mean, ap_std (percent), ordered by w.
    """
    rows, notices = [], []
    for w in sorted(w_values):
        try:
            cfg = replace(config, window=w)
            results = run_seeds(ds, cfg, model, jobs)
        except ConfigError as err:
            notices.append(f"w={w} skipped: {err}")
            continue
        report = aggregate_runs(results, model)
        rows.append({"w": w, "auc_mean": report.auc_mean, "auc_std": report.auc_std,
                     "ap_mean": report.ap_mean, "ap_std": report.ap_std})
    return rows, notices
