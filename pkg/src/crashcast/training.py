"""Mini-batch training with early stopping, evaluation, and k-fold CV.

Everything is deterministic given the seeds: batch order, parameter init,
and training-time dropout masks all derive from TrainConfig.rng_seed through
the same avalanche mixer used for stochastic forward passes. Fold training
runs are independent and can execute in parallel worker processes.
"""

import dataclasses
import math
import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dropout import mix64, sample_masks
from .network import dpm_forward_batch, dpm_gradients, init_params
from .stats import ConfusionCounts, accuracy_of, mcc_of, mean_std


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    max_iterations: int = 3000
    patience: int = 5
    validation_interval: int = 50
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    rng_seed: int = 0
    dropout_in_training: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.validation_interval < 1:
            raise ValueError("validation interval must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)       # (iteration, train loss)
    val_losses: list = field(default_factory=list)   # (iteration, validation loss)
    stop_reason: str = "max_iters"
    final_iteration: int = 0
    best_iteration: int = 0
    best_val_loss: float = math.nan
    wall_time: float = 0.0


def cross_entropy_loss(probs, label):
    """-ln P(true class); P(collision) sits at index 0, label 1 means collision."""
    target = 0 if label == 1 else 1
    return -math.log(max(float(probs[target]), 1e-12))


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def apply_update(params, grads, state, config):
    """One in-place optimizer step; returns (params, state)."""
    tensors = params.tensors()
    if config.optimizer == "sgd":
        for name, g in grads.items():
            tensors[name] -= config.learning_rate * g
        return params, state
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        tensors[name] -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
    return params, state


def _mean_val_loss(params, net_config, valset, chunk=64):
    total = 0.0
    for lo in range(0, len(valset), chunk):
        part = valset[lo : lo + chunk]
        probs = dpm_forward_batch(params, net_config, part)
        targets = np.array([0 if s.label == 1 else 1 for s in part])
        picked = np.clip(probs[np.arange(len(part)), targets], 1e-12, None)
        total += float(-np.log(picked).sum())
    return total / len(valset)


def train(params, net_config, config, trainset, valset, dropout_spec=None):
    """Train to max iterations or early stop; returns the best checkpoint.

    The input parameter object is not mutated; training works on a copy and
    the returned parameters come from the best validation checkpoint (the
    final state when no validation set is given).
    """
    if not trainset:
        raise ValueError("training set must be non-empty")
    t_start = time.monotonic()
    params = params.copy()
    report = TrainReport()
    state = OptimizerState()
    use_dropout = (dropout_spec is not None and config.dropout_in_training
                   and dropout_spec.rate > 0.0)

    best_params = params.copy()
    best_val = math.inf
    if valset:
        best_val = _mean_val_loss(params, net_config, valset)
        report.val_losses.append((0, best_val))
        report.best_val_loss = best_val
    checks_without_improvement = 0

    order = []
    epoch = 0
    for iteration in range(1, config.max_iterations + 1):
        if len(order) < config.batch_size:
            rng = np.random.default_rng(mix64(config.rng_seed, 1_000_000 + epoch))
            order = list(rng.permutation(len(trainset)))
            epoch += 1
        take, order = order[: config.batch_size], order[config.batch_size :]
        batch = [trainset[i] for i in take]
        labels = [s.label for s in batch]
        masks = None
        if use_dropout:
            masks = sample_masks(dropout_spec, params,
                                 mix64(mix64(config.rng_seed, 7), iteration)).masks
        loss, grads = dpm_gradients(params, net_config, batch, labels, masks)
        report.losses.append((iteration, loss))
        params, state = apply_update(params, grads, state, config)
        report.final_iteration = iteration

        if valset and iteration % config.validation_interval == 0:
            val = _mean_val_loss(params, net_config, valset)
            report.val_losses.append((iteration, val))
            if val < best_val:
                best_val = val
                best_params = params.copy()
                report.best_iteration = iteration
                report.best_val_loss = val
                checks_without_improvement = 0
            else:
                checks_without_improvement += 1
                if checks_without_improvement >= config.patience:
                    report.stop_reason = "early_stop"
                    break
    else:
        report.stop_reason = "max_iters"

    report.wall_time = time.monotonic() - t_start
    if not valset:
        return params, report
    return best_params, report


def evaluate(params, net_config, testset, threshold=0.5, chunk=64):
    """Deterministic forward (no dropout); collision iff P(collision) >= threshold."""
    predictions = []
    tp = tn = fp = fn = 0
    for lo in range(0, len(testset), chunk):
        part = testset[lo : lo + chunk]
        probs = dpm_forward_batch(params, net_config, part)
        preds = (probs[:, 0] >= threshold).astype(int)
        for s, p in zip(part, preds):
            predictions.append(int(p))
            if s.label == 1 and p == 1:
                tp += 1
            elif s.label == 1 and p == 0:
                fn += 1
            elif s.label == 0 and p == 1:
                fp += 1
            else:
                tn += 1
    return predictions, ConfusionCounts(tp=tp, tn=tn, fp=fp, fn=fn)


@dataclass
class FoldResult:
    fold: int
    accuracy: float
    mcc: float
    counts: ConfusionCounts


@dataclass
class KFoldResult:
    folds: list
    accuracy_mean: float
    accuracy_std: float
    mcc_mean: float
    mcc_std: float

    @property
    def accuracies(self):
        return [f.accuracy for f in self.folds]

    @property
    def mccs(self):
        return [f.mcc for f in self.folds]


def fold_assignment(samples, k, fold_unit="episodes", rng_seed=0):
    """Sample index -> fold index, folding at episode or sample granularity."""
    from .data import kfold_plan

    if fold_unit == "samples":
        return kfold_plan(len(samples), k, rng_seed).assignment
    if fold_unit != "episodes":
        raise ValueError(f"unknown fold unit {fold_unit!r}")
    episode_ids = [s.episode_id for s in samples]
    if any(e < 0 for e in episode_ids):
        raise ValueError("episode identity unknown; load the sidecar meta or fold at sample level")
    unique = sorted(set(episode_ids))
    plan = kfold_plan(len(unique), k, rng_seed)
    fold_of_episode = {eid: int(plan.assignment[i]) for i, eid in enumerate(unique)}
    return np.array([fold_of_episode[e] for e in episode_ids], dtype=np.int64)


def _run_one_fold(fold, samples, assignment, net_config, config, dropout_spec,
                  val_fraction, rng_seed):
    test_idx = np.nonzero(assignment == fold)[0]
    pool_idx = np.nonzero(assignment != fold)[0]
    rng = np.random.default_rng(mix64(rng_seed, 5_000 + fold))
    perm = rng.permutation(len(pool_idx))
    n_val = max(1, int(math.floor(len(pool_idx) * val_fraction)))
    val_idx = pool_idx[perm[:n_val]]
    train_idx = pool_idx[perm[n_val:]]
    trainset = [samples[i] for i in train_idx]
    valset = [samples[i] for i in val_idx]
    testset = [samples[i] for i in test_idx]
    params = init_params(net_config, seed=mix64(rng_seed, fold))
    fold_config = dataclasses.replace(config, rng_seed=mix64(rng_seed, 100 + fold))
    trained, _report = train(params, net_config, fold_config, trainset, valset, dropout_spec)
    _preds, counts = evaluate(trained, net_config, testset)
    return FoldResult(fold=fold, accuracy=accuracy_of(counts), mcc=mcc_of(counts), counts=counts)


_FOLD_CONTEXT = {}


def _fold_worker_init(samples, assignment, net_config, config, dropout_spec,
                      val_fraction, rng_seed):
    _FOLD_CONTEXT["args"] = (samples, assignment, net_config, config, dropout_spec,
                             val_fraction, rng_seed)


def _fold_worker_run(fold):
    samples, assignment, net_config, config, dropout_spec, val_fraction, rng_seed = \
        _FOLD_CONTEXT["args"]
    return _run_one_fold(fold, samples, assignment, net_config, config, dropout_spec,
                         val_fraction, rng_seed)


def run_kfold(samples, k, net_config, config, dropout_spec=None, fold_unit="episodes",
              val_fraction=0.1, rng_seed=0, jobs=1):
    """Rotate k held-out folds; per-fold accuracy/MCC plus population mean/std."""
    if k < 2:
        raise ValueError("k-fold needs k >= 2")
    assignment = fold_assignment(samples, k, fold_unit, rng_seed)
    if jobs > 1:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx,
                                 initializer=_fold_worker_init,
                                 initargs=(samples, assignment, net_config, config,
                                           dropout_spec, val_fraction, rng_seed)) as pool:
            folds = list(pool.map(_fold_worker_run, range(k)))
    else:
        folds = [_run_one_fold(f, samples, assignment, net_config, config, dropout_spec,
                               val_fraction, rng_seed) for f in range(k)]
    acc_mean, acc_std = mean_std([f.accuracy for f in folds])
    mcc_mean, mcc_std = mean_std([f.mcc for f in folds])
    return KFoldResult(folds=folds, accuracy_mean=acc_mean, accuracy_std=acc_std,
                       mcc_mean=mcc_mean, mcc_std=mcc_std)
