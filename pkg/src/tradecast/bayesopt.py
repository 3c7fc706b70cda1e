"""Sequential model-based hyperparameter search with median pruning.

The five-dimensional space (log-scale learning rate, categorical
latent width, momentum/memory initial values, log-scale KL weight) is
mapped to a unit cube (one-hot for the categorical).  A Gaussian
process with a squared-exponential kernel (length scale picked by
marginal likelihood on a small grid) models the objective after ten
random warm-up trials; suggestions maximize expected improvement over
a seeded candidate batch, so a study is a pure function of its seed.

Trials report their mean validation AUC across trial seeds at fixed
epoch checkpoints; a trial is pruned when at least five earlier trials
have a value at the same checkpoint and the new value falls strictly
below their median.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtr

from .graphdata import TemporalDataset
from .rng import Rng
from .training import EvalReport, RunResult, TrainConfig, aggregate_runs, iter_training, run_seeds

__all__ = [
    "LR_BOUNDS",
    "GAMMA_BOUNDS",
    "BETA_BOUNDS",
    "LAMBDA_BOUNDS",
    "Z_DIM_CHOICES",
    "TrialConfig",
    "Trial",
    "StudyResult",
    "normalize_config",
    "denormalize_config",
    "random_config",
    "GpSurrogate",
    "expected_improvement",
    "EiOptimizer",
    "ConfigSuggester",
    "should_prune",
    "run_study",
    "random_search_control",
    "write_trial_log",
    "write_best_config",
    "read_config_file",
    "TRIAL_LOG_HEADER",
]

logger = logging.getLogger(__name__)

LR_BOUNDS = (1e-4, 1e-2)        # log scale
GAMMA_BOUNDS = (0.5, 0.95)
BETA_BOUNDS = (0.1, 1.0)
LAMBDA_BOUNDS = (1e-5, 1e-3)    # log scale
Z_DIM_CHOICES = (16, 32, 64)

TRIAL_LOG_HEADER = ["trial_id", "status", "lr", "z_dim", "gamma_init", "beta_init",
                    "lambda_kl", "objective", "pruned_at_epoch"]


@dataclass(frozen=True)
class TrialConfig:
    """One point of the search space."""

    lr: float
    z_dim: int
    gamma_init: float
    beta_init: float
    lambda_kl: float


@dataclass
class Trial:
    """One evaluated (or pruned/failed) configuration."""

    trial_id: int
    config: TrialConfig
    intermediate: dict[int, float] = field(default_factory=dict)  # epoch -> mean auc
    status: str = "running"  # running | pruned | complete | failed
    objective: float | None = None
    pruned_at: int | None = None


@dataclass
class StudyResult:
    best: Trial
    trials: list[Trial]
    report: EvalReport
    final_runs: list[RunResult]


# ---------------------------------------------------------------------------
# search-space geometry
# ---------------------------------------------------------------------------

def _log01(x, lo, hi):
    return (math.log(x) - math.log(lo)) / (math.log(hi) - math.log(lo))


def _lin01(x, lo, hi):
    return (x - lo) / (hi - lo)


def normalize_config(cfg: TrialConfig) -> np.ndarray:
    """Unit-cube embedding: [lr, gamma, beta, lambda, onehot(z_dim) x3]."""
    checks = [
        (LR_BOUNDS[0] <= cfg.lr <= LR_BOUNDS[1], "lr", cfg.lr),
        (GAMMA_BOUNDS[0] <= cfg.gamma_init <= GAMMA_BOUNDS[1], "gamma_init", cfg.gamma_init),
        (BETA_BOUNDS[0] <= cfg.beta_init <= BETA_BOUNDS[1], "beta_init", cfg.beta_init),
        (LAMBDA_BOUNDS[0] <= cfg.lambda_kl <= LAMBDA_BOUNDS[1], "lambda_kl", cfg.lambda_kl),
        (cfg.z_dim in Z_DIM_CHOICES, "z_dim", cfg.z_dim),
    ]
    for ok, name, value in checks:
        if not ok:
            raise ValueError(f"config out of search space: {name}={value}")
    onehot = [1.0 if cfg.z_dim == z else 0.0 for z in Z_DIM_CHOICES]
    return np.array([
        _log01(cfg.lr, *LR_BOUNDS),
        _lin01(cfg.gamma_init, *GAMMA_BOUNDS),
        _lin01(cfg.beta_init, *BETA_BOUNDS),
        _log01(cfg.lambda_kl, *LAMBDA_BOUNDS),
        *onehot,
    ])


def denormalize_config(vec: np.ndarray) -> TrialConfig:
    """Inverse of normalize_config (one-hot resolved by argmax)."""
    lo, hi = LR_BOUNDS
    lr = math.exp(math.log(lo) + float(vec[0]) * (math.log(hi) - math.log(lo)))
    gamma = GAMMA_BOUNDS[0] + float(vec[1]) * (GAMMA_BOUNDS[1] - GAMMA_BOUNDS[0])
    beta = BETA_BOUNDS[0] + float(vec[2]) * (BETA_BOUNDS[1] - BETA_BOUNDS[0])
    lo, hi = LAMBDA_BOUNDS
    lam = math.exp(math.log(lo) + float(vec[3]) * (math.log(hi) - math.log(lo)))
    z = Z_DIM_CHOICES[int(np.argmax(vec[4:7]))]
    return TrialConfig(lr, z, gamma, beta, lam)


def random_config(rng: Rng) -> TrialConfig:
    """Uniform in-space draw (log-uniform on the log-scaled axes)."""
    u = rng.random(4)
    vec = np.array([u[0], u[1], u[2], u[3], 0.0, 0.0, 0.0])
    vec[4 + int(rng.integers(0, len(Z_DIM_CHOICES)))] = 1.0
    return denormalize_config(vec)


def _sample_normalized_configs(rng: Rng, m: int) -> np.ndarray:
    """m valid configs already in unit-cube coordinates (vectorized)."""
    cont = rng.random((m, 4))
    z_idx = rng.integers(0, len(Z_DIM_CHOICES), size=m)
    onehot = np.zeros((m, len(Z_DIM_CHOICES)))
    onehot[np.arange(m), z_idx] = 1.0
    return np.hstack([cont, onehot])


# ---------------------------------------------------------------------------
# Gaussian-process surrogate and acquisition
# ---------------------------------------------------------------------------

class GpSurrogate:
    """Zero-mean GP on standardized objectives, squared-exponential kernel.

    The length scale is chosen by maximum marginal likelihood over a
    small geometric grid; signal variance is fixed at 1 by the
    standardization.  Tiny observation noise keeps the posterior an
    interpolator while guarding the Cholesky factorization.
    """

    LENGTH_SCALE_GRID = tuple(np.geomspace(0.05, 3.0, 12))

    def __init__(self, noise: float = 1e-6):
        self.noise = noise
        self._fitted = False

    def _kernel(self, a: np.ndarray, b: np.ndarray, ell: float) -> np.ndarray:
        sq = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        return np.exp(-0.5 * sq / (ell * ell))

    def fit(self, x: np.ndarray, y: np.ndarray) -> bool:
        """Returns False when the data cannot support a surrogate."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.asarray(y, dtype=float)
        if len(y) < 2 or float(y.std()) == 0.0:
            self._fitted = False
            return False
        self._x = x
        self._y_mean = float(y.mean())
        self._y_std = float(y.std())
        yn = (y - self._y_mean) / self._y_std
        best = None
        m = len(y)
        for ell in self.LENGTH_SCALE_GRID:
            k = self._kernel(x, x, ell)
            k[np.diag_indices_from(k)] += self.noise + 1e-10
            try:
                chol = np.linalg.cholesky(k)
            except np.linalg.LinAlgError:
                continue
            alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, yn))
            log_ml = (-0.5 * float(yn @ alpha) - float(np.log(np.diag(chol)).sum())
                      - 0.5 * m * math.log(2.0 * math.pi))
            if best is None or log_ml > best[0]:
                best = (log_ml, ell, chol, alpha)
        if best is None:
            self._fitted = False
            return False
        _, self.length_scale, self._chol, self._alpha = best
        self._fitted = True
        return True

    def posterior(self, xq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Mean and standard deviation at query points, in objective units."""
        if not self._fitted:
            raise RuntimeError("surrogate not fitted")
        xq = np.atleast_2d(np.asarray(xq, dtype=float))
        k_star = self._kernel(self._x, xq, self.length_scale)
        mean_n = k_star.T @ self._alpha
        v = np.linalg.solve(self._chol, k_star)
        var_n = np.maximum(1.0 - (v * v).sum(axis=0), 0.0)
        return (mean_n * self._y_std + self._y_mean,
                np.sqrt(var_n) * self._y_std)


def expected_improvement(mean: np.ndarray, std: np.ndarray, best: float,
                         xi: float = 0.0) -> np.ndarray:
    """EI for maximization; degenerates to max(mean - best - xi, 0) as std -> 0."""
    gap = mean - best - xi
    out = np.maximum(gap, 0.0)
    pos = std > 0.0
    z = gap[pos] / std[pos]
    pdf = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    out[pos] = gap[pos] * ndtr(z) + std[pos] * pdf
    return out


class EiOptimizer:
    """Warm-up random draws, then GP-EI argmax over seeded candidates.

    `sampler(rng, m)` must return m valid points in unit-cube
    coordinates; suggestions are always rows of such a batch, so they
    stay in-space by construction.
    """

    def __init__(self, sampler, n_warmup: int = 10, n_candidates: int = 2048,
                 noise: float = 1e-6):
        self.sampler = sampler
        self.n_warmup = n_warmup
        self.n_candidates = n_candidates
        self.surrogate = GpSurrogate(noise)
        self.observed_x: list[np.ndarray] = []
        self.observed_y: list[float] = []

    def observe(self, x: np.ndarray, y: float) -> None:
        self.observed_x.append(np.asarray(x, dtype=float))
        self.observed_y.append(float(y))

    def suggest(self, rng: Rng) -> np.ndarray:
        if len(self.observed_y) < self.n_warmup:
            return self.sampler(rng, 1)[0]
        y = np.array(self.observed_y)
        if not self.surrogate.fit(np.vstack(self.observed_x), y):
            logger.info("degenerate surrogate (constant or scarce objectives); "
                        "falling back to a random draw")
            return self.sampler(rng, 1)[0]
        candidates = self.sampler(rng, self.n_candidates)
        mean, std = self.surrogate.posterior(candidates)
        xi = 0.01 * float(y.std())
        ei = expected_improvement(mean, std, float(y.max()), xi)
        return candidates[int(np.argmax(ei))]


class ConfigSuggester:
    """EI optimizer specialized to the hyperparameter space."""

    def __init__(self, n_warmup: int = 10, n_candidates: int = 2048, noise: float = 1e-6):
        self._opt = EiOptimizer(_sample_normalized_configs, n_warmup, n_candidates, noise)

    def observe(self, cfg: TrialConfig, objective: float) -> None:
        self._opt.observe(normalize_config(cfg), objective)

    def suggest(self, rng: Rng) -> TrialConfig:
        return denormalize_config(self._opt.suggest(rng))


# ---------------------------------------------------------------------------
# pruning and the study loop
# ---------------------------------------------------------------------------

def should_prune(prior_trials: list[Trial], epoch: int, value: float,
                 min_prior: int = 5) -> bool:
    """Strictly below the median of >= min_prior prior values at this checkpoint."""
    prior = [t.intermediate[epoch] for t in prior_trials if epoch in t.intermediate]
    if len(prior) < min_prior:
        return False
    return value < float(np.median(prior))


def _trial_train_config(base: TrainConfig, cfg: TrialConfig, epochs: int) -> TrainConfig:
    return replace(
        base,
        epochs=epochs,
        lr=cfg.lr,
        kl_weight=cfg.lambda_kl,
        gamma_init=cfg.gamma_init,
        beta_init=cfg.beta_init,
        encoder=replace(base.encoder, latent_dim=cfg.z_dim),
    )


def _run_trial(ds: TemporalDataset, base: TrainConfig, trial: Trial,
               trial_seeds, epochs: int, checkpoint_every: int,
               prior_trials: list[Trial], prune: bool) -> None:
    """Train the trial's seeds in lockstep, reporting checkpoint means.

    Mutates `trial` in place to pruned/complete/failed.
    """
    cfg = _trial_train_config(base, trial.config, epochs)
    try:
        gens = [iter_training(ds, cfg, seed) for seed in trial_seeds]
        last = None
        for stats in zip(*gens):
            last = stats
            epoch = stats[0].epoch
            if epoch % checkpoint_every == 0:
                mean_auc = float(np.mean([s.auc for s in stats]))
                trial.intermediate[epoch] = mean_auc
                if prune and should_prune(prior_trials, epoch, mean_auc):
                    trial.status = "pruned"
                    trial.pruned_at = epoch
                    return
        trial.objective = float(np.mean([s.auc for s in last]))
        trial.status = "complete"
    except Exception:
        logger.exception("trial %d failed", trial.trial_id)
        trial.status = "failed"


def run_study(ds: TemporalDataset, base_config: TrainConfig, n_trials: int, seed: int,
              trial_seeds=(1000, 1001, 1002), trial_epochs: int = 500,
              checkpoint_every: int = 50, jobs: int = 1) -> StudyResult:
    """Suggest/train/prune loop, then a from-scratch retrain of the best.

    The per-trial objective is the mean final validation AUC over
    `trial_seeds`; the retrain uses the full `base_config.seeds`
    protocol at the same epoch budget and fresh parameters.
    """
    if n_trials < 1:
        raise ValueError(f"n_trials must be >= 1, got {n_trials}")
    rng = Rng(seed)
    suggester = ConfigSuggester()
    trials: list[Trial] = []
    for tid in range(n_trials):
        trial = Trial(tid, suggester.suggest(rng.child("suggest", tid)))
        _run_trial(ds, base_config, trial, trial_seeds, trial_epochs,
                   checkpoint_every, trials, prune=True)
        if trial.status == "complete":
            suggester.observe(trial.config, trial.objective)
        trials.append(trial)
    completed = [t for t in trials if t.status == "complete"]
    if not completed:
        raise RuntimeError("no trial completed; cannot select a configuration")
    best = max(completed, key=lambda t: t.objective)
    final_cfg = _trial_train_config(base_config, best.config, trial_epochs)
    final_runs = run_seeds(ds, final_cfg, "tama", jobs)
    report = aggregate_runs(final_runs, "tama-tuned")
    return StudyResult(best, trials, report, final_runs)


def random_search_control(ds: TemporalDataset, base_config: TrainConfig, n_trials: int,
                          seed: int, trial_seeds=(1000, 1001, 1002),
                          trial_epochs: int = 500) -> tuple[TrialConfig, list[Trial]]:
    """Uniform sampling under the identical training protocol, no pruning."""
    if n_trials < 1:
        raise ValueError(f"n_trials must be >= 1, got {n_trials}")
    rng = Rng(seed)
    trials: list[Trial] = []
    for tid in range(n_trials):
        trial = Trial(tid, random_config(rng.child("control", tid)))
        _run_trial(ds, base_config, trial, trial_seeds, trial_epochs,
                   checkpoint_every=max(trial_epochs, 1), prior_trials=[], prune=False)
        trials.append(trial)
    completed = [t for t in trials if t.status == "complete"]
    if not completed:
        raise RuntimeError("no control trial completed")
    best = max(completed, key=lambda t: t.objective)
    return best.config, trials


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def write_trial_log(trials: list[Trial], path) -> None:
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRIAL_LOG_HEADER)
        for t in trials:
            writer.writerow([
                t.trial_id, t.status,
                f"{t.config.lr:.6g}", t.config.z_dim,
                f"{t.config.gamma_init:.6g}", f"{t.config.beta_init:.6g}",
                f"{t.config.lambda_kl:.6g}",
                "" if t.objective is None else f"{t.objective:.6g}",
                "" if t.pruned_at is None else t.pruned_at,
            ])


def write_best_config(cfg: TrialConfig, path) -> None:
    """Plain key=value file, replayable through the training CLI."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"lr={float(cfg.lr)!r}\n")
        fh.write(f"z_dim={int(cfg.z_dim)}\n")
        fh.write(f"gamma_init={float(cfg.gamma_init)!r}\n")
        fh.write(f"beta_init={float(cfg.beta_init)!r}\n")
        fh.write(f"lambda_kl={float(cfg.lambda_kl)!r}\n")


def read_config_file(path) -> TrialConfig:
    kv = {}
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}: bad config line {line!r}")
            key, value = line.split("=", 1)
            kv[key.strip()] = value.strip()
    missing = {"lr", "z_dim", "gamma_init", "beta_init", "lambda_kl"} - set(kv)
    if missing:
        raise ValueError(f"{path}: missing keys {sorted(missing)}")
    return TrialConfig(
        lr=float(kv["lr"]),
        z_dim=int(kv["z_dim"]),
        gamma_init=float(kv["gamma_init"]),
        beta_init=float(kv["beta_init"]),
        lambda_kl=float(kv["lambda_kl"]),
    )
