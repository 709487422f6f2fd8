"""Weighted training, population-weighted metrics and hyperparameter search."""
from __future__ import annotations

import csv
import itertools
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .grid import extract_windows, normalize_batch
from .rescnn import SEARCH_SPACE, BuildError, HyperParams, ResCNN, augment, build_model


class TrainingError(RuntimeError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


@dataclass
class Dataset:
    """Stacked windows for a set of stations."""

    ids: list
    raw: np.ndarray
    y: np.ndarray
    w: np.ndarray
    z: np.ndarray = field(init=False)
    means: np.ndarray = field(init=False)

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.w = np.asarray(self.w, dtype=float)
        self.z, self.means, _, _ = normalize_batch(self.raw)

    def __len__(self):
        return len(self.ids)

    def subset(self, idx):
        return Dataset([self.ids[i] for i in idx], self.raw[idx], self.y[idx], self.w[idx])


def build_dataset(world, ids, half_extent, weights=None) -> Dataset:
    stations = [world.station(i) for i in ids]
    raw, _ = extract_windows(world, stations, half_extent)
    y = [s.pm25 for s in stations]
    w = np.ones(len(ids)) if weights is None else [weights[i] for i in ids]
    return Dataset(list(ids), raw, y, w)


def weighted_mse(y, y_hat, w):
    y, y_hat, w = map(np.asarray, (y, y_hat, w))
    return float(np.mean(w * (y - y_hat) ** 2))


def _batches(n, size, rng):
    order = rng.permutation(n)
    size = min(size, n)
    chunks = [order[i:i + size] for i in range(0, n, size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


@dataclass
class TrainResult:
    model: ResCNN
    trace: list  # (epoch, weighted MSE on the training set, eval mode)


def train(model: ResCNN, data: Dataset, hyper: HyperParams | None = None, seed=0,
          report_every=1, fit_linear=True, fit_cnn=True) -> TrainResult:
    """Minimize (1/N) sum w (y - f(x))^2 with Adam over ``hyper.iterations``
    epochs of shuffled mini-batches.

    Standardization statistics are taken from ``data`` if the model has
    none yet. ``fit_cnn=False`` freezes the CNN branch at its current
    parameters; ``fit_linear=False`` does the same for the linear branch.
    """
    hyper = hyper or model.hyper
    if hyper.batch_size > len(data) and len(data) > 1:
        hyper = hyper.replace(batch_size=len(data))
    if not model.has_stats:
        model.set_stats(data.means, data.y, data.w)
    rng = np.random.default_rng(seed)
    state = nn.AdamState(lr=hyper.learning_rate)
    params = model.parameters()
    keep = {k for k in params if (k.startswith("linear.") and fit_linear) or
            (not k.startswith("linear.") and fit_cnn)}
    params = {k: v for k, v in params.items() if k in keep}

    def full_loss():
        y_hat, _, _ = model.forward(data.z, data.means)
        return weighted_mse(data.y, y_hat, data.w)

    trace = [(0, full_loss())]
    for epoch in range(1, hyper.iterations + 1):
        for idx in _batches(len(data), hyper.batch_size, rng):
            z = data.z[idx]
            if hyper.augmentation:
                z = augment(z, rng, hyper.aug_variance)
            y_hat, _, _ = model.forward(z, data.means[idx], train=True, rng=rng)
            resid = data.y[idx] - y_hat
            dy = -2.0 * data.w[idx] * resid / len(idx)
            model.backward(dy)
            grads = {k: v for k, v in model.gradients().items() if k in keep}
            try:
                nn.adam_step(params, grads, state)
            except FloatingPointError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}", trace) from exc
        if epoch % report_every == 0 or epoch == hyper.iterations:
            loss = full_loss()
            trace.append((epoch, loss))
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}", trace)
    return TrainResult(model, trace)


# --- metrics -----------------------------------------------------------------

@dataclass(frozen=True)
class MetricReport:
    tag: str
    n: int
    mfb: float
    mfe: float
    mpe: float
    rho: float
    r2: float
    r2_table_form: float
    excluded: int = 0

    def row(self):
        return [self.tag, self.n, self.mfb, self.mfe, self.mpe, self.rho, self.r2]


def _weighted_corr(y, p, w):
    ym, pm = w @ y, w @ p
    num = w @ ((y - ym) * (p - pm))
    den = np.sqrt(w @ (y - ym) ** 2) * np.sqrt(w @ (p - pm) ** 2)
    if den == 0:
        return 1.0 if np.allclose(y, p) else 0.0
    return float(num / den)


def evaluate_predictions(y, y_hat, w=None, tag="") -> MetricReport:
    """Population-weighted evaluation metrics.

    Weights are rescaled to mean 1 over the evaluated stations. Stations
    with y + y_hat == 0 or y_hat == 0 are dropped with a warning.
    ``r2`` is the weighted coefficient of determination; ``r2_table_form``
    is the weighted correlation form printed in the metric table.
    """
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    bad = (y + y_hat == 0) | (y_hat == 0)
    if bad.any():
        warnings.warn(f"{tag or 'evaluate'}: excluding {int(bad.sum())} station(s) with y+y_hat=0 or y_hat=0")
        y, y_hat, w = y[~bad], y_hat[~bad], w[~bad]
    if len(y) == 0:
        raise ValueError("nothing to evaluate")
    w = w * (len(w) / w.sum())
    diff = y - y_hat
    mfb = float(np.mean(w * 2 * diff / (y + y_hat)))
    mfe = float(np.mean(w * 2 * np.abs(diff) / (y + y_hat)))
    mpe = float(np.mean(w * np.abs(diff) / y_hat))
    wn = w / w.sum()
    rho = _weighted_corr(y, y_hat, wn)
    ss_tot = wn @ (y - wn @ y) ** 2
    ss_res = wn @ diff ** 2
    if ss_tot == 0:
        r2 = 1.0 if ss_res == 0 else 0.0
    else:
        r2 = float(1.0 - ss_res / ss_tot)
    return MetricReport(tag, len(y), mfb, mfe, mpe, rho, r2, rho, int(bad.sum()))


def evaluate(model: ResCNN, data: Dataset, tag="") -> MetricReport:
    y_hat, _, _ = model.forward(data.z, data.means)
    return evaluate_predictions(data.y, y_hat, data.w, tag)


METRIC_HEADER = ["split", "n", "mfb", "mfe", "mpe", "rho", "r2"]


def write_metrics(reports, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_HEADER)
        for r in reports:
            w.writerow([r.tag, r.n] + [repr(float(v)) for v in r.row()[2:]])


# --- search --------------------------------------------------------------------

@dataclass(frozen=True)
class TrialRecord:
    trial_id: int
    seed: int
    hyper: HyperParams
    val_wmse: float
    status: str = "ok"
    phase: str = "random"


class TrainValObjective:
    """Train on one dataset, score weighted MSE on another. Picklable, so
    trials can run in worker processes."""

    def __init__(self, train_data: Dataset, val_data: Dataset):
        self.train_data = train_data
        self.val_data = val_data

    def __call__(self, hyper: HyperParams, seed: int) -> float:
        model = build_model(hyper, seed=seed)
        train(model, self.train_data, hyper, seed=seed, report_every=hyper.iterations)
        y_hat, _, _ = model.forward(self.val_data.z, self.val_data.means)
        return weighted_mse(self.val_data.y, y_hat, self.val_data.w)


def sample_hyper(space, rng, base=None, overrides=None) -> HyperParams:
    base = base or HyperParams()
    picks = {k: vals[int(rng.integers(len(vals)))] for k, vals in space.items()}
    picks.update(overrides or {})
    return base.replace(**picks)


def _run(job):
    objective, trial_id, seed, hyper, phase = job
    try:
        score = float(objective(hyper, seed))
        status = "ok" if math.isfinite(score) else "nonfinite"
    except (BuildError, TrainingError, nn.ShapeError) as exc:
        score, status = math.inf, f"failed: {exc}"
    if not math.isfinite(score):
        score = math.inf
    return TrialRecord(trial_id, seed, hyper, score, status, phase)


def _execute(jobs, workers):
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run, jobs))
    else:
        records = [_run(j) for j in jobs]
    return sorted(records, key=lambda r: r.trial_id)


def trial_seed(seed, trial_id):
    return int(np.random.SeedSequence([seed, trial_id]).generate_state(1)[0])


def random_search(space, n_trials, objective, seed=0, overrides=None, base=None, workers=1) -> list:
    """Sample ``n_trials`` hyperparameter sets i.i.d. uniformly per dimension
    and score each with ``objective(hyper, seed)``. Failed trials are
    recorded with an infinite score."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    jobs = []
    for t in range(n_trials):
        s = trial_seed(seed, t)
        hyper = sample_hyper(space, np.random.default_rng(s), base, overrides)
        jobs.append((objective, t, s, hyper, "random"))
    return _execute(jobs, workers)


def prune_space(trials, space, delta=None, kappa=2.0, delta_frac=0.05) -> dict:
    """Drop values that score consistently worse or more erratically.

    For each dimension, trials are grouped by the value they used. A value
    is dropped when its mean validation score exceeds the best mean by more
    than ``delta`` (default ``delta_frac * best mean``), or when its score
    variance exceeds ``kappa`` times the variance of the best-mean value.
    Values never sampled are kept. A dimension always keeps its best value.
    """
    pruned = {}
    for dim, values in space.items():
        stats = {}
        for v in values:
            scores = np.array([t.val_wmse for t in trials if getattr(t.hyper, dim) == v])
            if len(scores):
                if np.all(np.isfinite(scores)):
                    stats[v] = (scores.mean(), scores.var())
                else:
                    stats[v] = (math.inf, math.inf)
        if not stats:
            pruned[dim] = list(values)
            continue
        best = min(stats, key=lambda v: (stats[v][0], values.index(v)))
        best_mean, best_var = stats[best]
        margin = delta if delta is not None else delta_frac * abs(best_mean)
        keep = []
        for v in values:
            if v not in stats:
                keep.append(v)
                continue
            mean, var = stats[v]
            if not math.isfinite(mean):
                continue
            if mean > best_mean + margin:
                continue
            if var > kappa * best_var and v != best:
                continue
            keep.append(v)
        pruned[dim] = keep or [best]
    return pruned


def grid_size(space) -> int:
    return math.prod(len(v) for v in space.values())


def grid_combinations(space, base=None):
    """All combinations in lexicographic order: dimensions in ``space``
    order, values in listed order, last dimension varying fastest."""
    base = base or HyperParams()
    keys = list(space)
    for combo in itertools.product(*(space[k] for k in keys)):
        yield base.replace(**dict(zip(keys, combo)))


def grid_search(space, objective, seed=0, base=None, workers=1, first_id=0):
    """Exhaustive search. Returns ``(best, leaderboard)``; the leaderboard
    is sorted by score and ties keep enumeration order."""
    jobs = []
    for i, hyper in enumerate(grid_combinations(space, base)):
        jobs.append((objective, first_id + i, trial_seed(seed, first_id + i), hyper, "grid"))
    records = _execute(jobs, workers)
    board = sorted(records, key=lambda r: (r.val_wmse, r.trial_id))
    return board[0].hyper, board


TRIAL_HEADER = ["trial_id", "seed", "hyperparams_json", "val_wmse", "status"]


def append_trial_log(records, path, header=True):
    mode = "w" if header else "a"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(TRIAL_HEADER)
        for r in records:
            w.writerow([r.trial_id, r.seed, json.dumps(r.hyper.to_dict(), sort_keys=True),
                        repr(float(r.val_wmse)), r.status])


__all__ = [
    "Dataset", "build_dataset", "train", "evaluate", "evaluate_predictions", "MetricReport",
    "random_search", "prune_space", "grid_search", "grid_combinations", "grid_size",
    "TrialRecord", "TrainValObjective", "SEARCH_SPACE",
]
