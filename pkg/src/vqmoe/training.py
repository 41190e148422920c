"""Multi-task correlation training: a PLCC-based batch loss per quality
dimension, a weighted five-term objective, Adam with cosine learning-rate
decay, and the epoch loop with best-validation snapshotting.

The per-token loss terms correlate each token position across the batch, so
batches need at least 2 samples and positions masked in too many samples are
skipped for that batch.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .errors import ConfigError, NumericalError, ShapeError
from .metrics import srcc
from .model import ModelConfig, ModelParams, PredictionBundle, full_forward, init_params
from .tensor import Tensor

log = logging.getLogger(__name__)

PLCC_EPS = 1e-12
DEGENERATE_VAR = 1e-24

SCALAR_TERMS = (
    ("spatial", "q_spatial"),
    ("temporal", "q_temporal"),
    ("overall", "q_overall_percept"),
)


@dataclass(frozen=True)
class LossWeights:
    """Weights of the five loss terms; defaults favor the primary outputs."""

    spatial: float = 0.125
    temporal: float = 0.125
    overall: float = 0.25
    word: float = 0.25
    sentence: float = 0.25

    def __post_init__(self):
        for name, value in self.as_dict().items():
            if value < 0:
                raise ConfigError(f"loss weight {name} must be >= 0, got {value}")

    def as_dict(self) -> dict[str, float]:
        return {
            "spatial": self.spatial,
            "temporal": self.temporal,
            "overall": self.overall,
            "word": self.word,
            "sentence": self.sentence,
        }


@dataclass(frozen=True)
class TrainSchedule:
    """Optimizer and loop hyperparameters."""

    lr0: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 50
    batch_size: int = 4
    seed: int = 0
    corr_window: int = 1

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for correlation losses")
        if self.corr_window < 1:
            raise ConfigError("corr_window must be >= 1")

    def to_dict(self) -> dict:
        return {
            "lr0": self.lr0,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "corr_window": self.corr_window,
        }


def plcc_loss(pred: Tensor, target, degenerate_out: list | None = None) -> Tensor:
    """(1 - r) / 2 over a batch, where r is the Pearson correlation.

    Differentiable with respect to pred. A constant pred or target makes r
    undefined; the loss then becomes the constant 0.5 (no gradient), the
    batch is flagged in the log, and True is appended to degenerate_out
    when a list is supplied.
    """
    if pred.ndim != 1:
        raise ShapeError(f"plcc_loss expects a 1-D prediction vector, got {pred.shape}")
    t = np.asarray(target, dtype=pred.dtype)
    if t.ndim != 1 or t.shape[0] != pred.shape[0]:
        raise ShapeError(
            f"prediction/target length mismatch: {pred.shape[0]} vs {t.shape}"
        )
    if pred.shape[0] < 2:
        raise ShapeError("plcc_loss needs at least 2 samples")
    if not np.isfinite(t).all():
        raise NumericalError("plcc_loss target contains non-finite values")

    if float(np.var(pred.data)) <= DEGENERATE_VAR or float(np.var(t)) <= DEGENERATE_VAR:
        log.warning("plcc_loss: degenerate batch (constant vector), using 0.5")
        if degenerate_out is not None:
            degenerate_out.append(True)
        return Tensor(np.asarray(0.5, dtype=pred.dtype))

    tgt = Tensor(t)
    dp = tz.sub(pred, tz.mean_pool(pred, (0,)))
    dt = tz.sub(tgt, tz.mean_pool(tgt, (0,)))
    cov = tz.sum_pool(tz.mul(dp, dt), (0,))
    vp = tz.sum_pool(tz.square(dp), (0,))
    vt = tz.sum_pool(tz.square(dt), (0,))
    denom = tz.sqrt(tz.add(tz.mul(vp, vt), PLCC_EPS))
    r = tz.div(cov, denom)
    return tz.mul(tz.sub(1.0, r), 0.5)


def _stack_scalars(values: list[Tensor]) -> Tensor:
    return tz.stack(values)


def total_loss(
    bundles: list[PredictionBundle],
    targets: list[dict],
    weights: LossWeights | None = None,
) -> tuple[Tensor, dict]:
    """Weighted sum of per-dimension correlation losses over one batch.

    targets: per-sample dicts with q_spatial, q_temporal, q_overall_percept,
    q_sentence floats, q_word list (one entry per maskable token position),
    and token_mask booleans of the same length. The word term is computed
    per token position across the batch and averaged over positions with at
    least 2 unmasked samples.

    Returns the scalar loss and an info dict with per-term values and
    bookkeeping counts.
    """
    weights = weights or LossWeights()
    if len(bundles) != len(targets):
        raise ShapeError("bundle/target count mismatch")
    if len(bundles) < 2:
        raise ShapeError("total_loss needs a batch of at least 2 samples")

    lam = weights.as_dict()
    total: Tensor | None = None
    flags: list = []
    info: dict = {"terms": {}, "word_positions_used": 0, "word_positions_skipped": 0}

    def accumulate(term: Tensor, weight: float):
        nonlocal total
        weighted = tz.mul(term, weight)
        total = weighted if total is None else tz.add(total, weighted)

    for term_name, attr in SCALAR_TERMS:
        preds = [getattr(b, attr) for b in bundles]
        if any(p is None for p in preds):
            if not all(p is None for p in preds):
                raise ShapeError(f"inconsistent {term_name} predictions across batch")
            info["terms"][term_name] = None
            continue
        if lam[term_name] == 0.0:
            info["terms"][term_name] = None
            continue
        key = "q_overall_percept" if term_name == "overall" else f"q_{term_name}"
        term = plcc_loss(
            _stack_scalars(preds), [t[key] for t in targets], degenerate_out=flags
        )
        info["terms"][term_name] = term.item()
        accumulate(term, lam[term_name])

    if all(b.q_sentence is not None for b in bundles) and lam["sentence"] > 0.0:
        term = plcc_loss(
            _stack_scalars([b.q_sentence for b in bundles]),
            [t["q_sentence"] for t in targets],
            degenerate_out=flags,
        )
        info["terms"]["sentence"] = term.item()
        accumulate(term, lam["sentence"])
    else:
        info["terms"]["sentence"] = None

    word_preds = [b.q_word for b in bundles]
    if all(p is not None for p in word_preds) and lam["word"] > 0.0:
        n_positions = word_preds[0].shape[0] - 1
        position_terms: list[Tensor] = []
        for pos in range(n_positions):
            valid = [
                i for i, t in enumerate(targets) if bool(t["token_mask"][pos])
            ]
            if len(valid) < 2:
                info["word_positions_skipped"] += 1
                continue
            preds = [tz.take(word_preds[i], pos + 1, axis=0) for i in valid]
            labels = [targets[i]["q_word"][pos] for i in valid]
            position_terms.append(
                plcc_loss(_stack_scalars(preds), labels, degenerate_out=flags)
            )
        if position_terms:
            info["word_positions_used"] = len(position_terms)
            if len(position_terms) == 1:
                term = position_terms[0]
            else:
                term = tz.mean_pool(tz.stack(position_terms), (0,))
            info["terms"]["word"] = term.item()
            accumulate(term, lam["word"])
        else:
            log.warning("total_loss: every token position masked, word term is 0")
            info["terms"]["word"] = None
    else:
        info["terms"]["word"] = None

    if total is None:
        log.warning("total_loss: no active loss terms, returning 0")
        total = Tensor(np.asarray(0.0, dtype=np.float64))
    info["loss"] = total.item()
    info["degenerate_terms"] = len(flags)
    return total, info


def cosine_lr(lr0: float, epoch: int, total_epochs: int) -> float:
    """Half-cosine decay from lr0 at epoch 0 to exactly 0 at total_epochs."""
    if total_epochs < 1:
        raise ConfigError("total_epochs must be >= 1")
    if not 0 <= epoch <= total_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {total_epochs}]")
    return lr0 * (1.0 + math.cos(math.pi * epoch / total_epochs)) / 2.0


class Adam:
    """Standard Adam with bias correction, updating parameters in place.

    Parameters are visited in sorted name order so updates are reproducible
    regardless of how the parameter dict was built.
    """

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if not params:
            raise ConfigError("Adam needs at least one parameter")
        self.params = dict(params)
        self.order = sorted(self.params)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {n: np.zeros_like(self.params[n].data) for n in self.order}
        self.v = {n: np.zeros_like(self.params[n].data) for n in self.order}

    def step(self, grads, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in self.order:
            p = self.params[name]
            g = grads[p]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            update = lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data[...] = p.data - update
            if not np.isfinite(p.data).all():
                raise NumericalError(f"optimizer produced non-finite values in {name}")

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": {n: self.m[n].copy() for n in self.order},
            "v": {n: self.v[n].copy() for n in self.order},
        }

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for n in self.order:
            self.m[n][...] = state["m"][n]
            self.v[n][...] = state["v"][n]


@dataclass
class TrainSample:
    """One video's precomputed features plus its quality targets."""

    video_id: str
    f_vst: Tensor
    f_blip: Tensor
    targets: dict


@dataclass
class TrainResult:
    params: ModelParams
    best_state: dict[str, np.ndarray]
    final_state: dict[str, np.ndarray]
    best_epoch: int
    best_val: float
    log: list[dict]
    aborted: bool = False
    abort_reason: str | None = None


def get_param_state(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in params.named_params()}


def set_param_state(params: ModelParams, state: dict[str, np.ndarray]) -> None:
    table = params.param_dict()
    if set(table) != set(state):
        missing = sorted(set(table) ^ set(state))
        raise ConfigError(f"parameter state mismatch: {missing[:5]}")
    for name, tensor in table.items():
        arr = np.asarray(state[name], dtype=tensor.dtype)
        if arr.shape != tensor.shape:
            raise ShapeError(
                f"parameter {name} shape mismatch: {arr.shape} vs {tensor.shape}"
            )
        tensor.data[...] = arr


def predict(params: ModelParams, samples: list[TrainSample]) -> list[PredictionBundle]:
    """Run the model over samples without recording gradients."""
    return [
        full_forward(s.f_vst, s.f_blip, s.targets["token_mask"], params)
        for s in samples
    ]


def validation_srcc(params: ModelParams, samples: list[TrainSample]) -> dict[str, float]:
    """Rank correlation per quality dimension over a held-out set.

    Word predictions are pooled over (video, unmasked position) pairs so a
    single number summarizes the per-token head.
    """
    if len(samples) < 2:
        raise ShapeError("validation needs at least 2 samples")
    bundles = predict(params, samples)
    out: dict[str, float] = {}
    first = bundles[0]
    if first.q_spatial is not None:
        out["spatial"] = srcc(
            [b.q_spatial.item() for b in bundles],
            [s.targets["q_spatial"] for s in samples],
        )
        out["temporal"] = srcc(
            [b.q_temporal.item() for b in bundles],
            [s.targets["q_temporal"] for s in samples],
        )
    out["overall_percept"] = srcc(
        [b.q_overall_percept.item() for b in bundles],
        [s.targets["q_overall_percept"] for s in samples],
    )
    if first.q_word is not None:
        preds, labels = [], []
        for b, s in zip(bundles, samples):
            values = b.q_word.tolist()
            for pos, keep in enumerate(s.targets["token_mask"]):
                if keep:
                    preds.append(values[pos + 1])
                    labels.append(s.targets["q_word"][pos])
        if len(preds) >= 2:
            out["word"] = srcc(preds, labels)
    out["sentence"] = srcc(
        [b.q_sentence.item() for b in bundles],
        [s.targets["q_sentence"] for s in samples],
    )
    return out


def train(
    train_samples: list[TrainSample],
    val_samples: list[TrainSample],
    config: ModelConfig,
    schedule: TrainSchedule | None = None,
    weights: LossWeights | None = None,
    log_path=None,
    init_scale: float = 0.05,
) -> TrainResult:
    """Full training loop with per-epoch shuffling and cosine decay.

    Keeps the parameter snapshot with the best mean validation SRCC. A
    non-finite value anywhere aborts the run and restores the last
    epoch-end state. When log_path is given, one JSON line is appended per
    epoch.
    """
    schedule = schedule or TrainSchedule()
    weights = weights or LossWeights()
    if len(train_samples) < 2:
        raise ShapeError("training needs at least 2 samples")

    params = init_params(config, seed=schedule.seed, scale=init_scale)
    optimizer = Adam(params.param_dict(), schedule.beta1, schedule.beta2, schedule.eps)
    rng = np.random.default_rng(schedule.seed)
    chunk = schedule.batch_size * schedule.corr_window

    best_state = get_param_state(params)
    last_good = get_param_state(params)
    best_epoch = -1
    best_val = -math.inf
    history: list[dict] = []
    aborted = False
    abort_reason = None

    log_file = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for epoch in range(schedule.epochs):
            lr = cosine_lr(schedule.lr0, epoch, schedule.epochs)
            order = rng.permutation(len(train_samples))
            losses: list[float] = []
            degenerate = 0
            try:
                for start in range(0, len(order), chunk):
                    idx = order[start : start + chunk]
                    if len(idx) < 2:
                        log.info("skipping tail batch of size %d", len(idx))
                        continue
                    batch = [train_samples[i] for i in idx]
                    with tz.Tape() as tape:
                        bundles = [
                            full_forward(
                                s.f_vst, s.f_blip, s.targets["token_mask"], params
                            )
                            for s in batch
                        ]
                        loss, info = total_loss(bundles, [s.targets for s in batch], weights)
                        grads = tz.backward(tape, loss)
                    optimizer.step(grads, lr)
                    losses.append(info["loss"])
                    degenerate += info["degenerate_terms"]
            except NumericalError as exc:
                log.error("aborting training at epoch %d: %s", epoch, exc)
                aborted = True
                abort_reason = str(exc)
                set_param_state(params, last_good)
                break

            last_good = get_param_state(params)
            entry = {
                "epoch": epoch,
                "lr": lr,
                "train_loss": float(np.mean(losses)) if losses else None,
                "degenerate_terms": degenerate,
            }
            if len(val_samples) >= 2:
                val = validation_srcc(params, val_samples)
                entry["val_srcc"] = val
                entry["val_mean_srcc"] = float(np.mean(list(val.values())))
            else:
                entry["val_srcc"] = {}
                entry["val_mean_srcc"] = None
            history.append(entry)
            if log_file:
                log_file.write(json.dumps(entry) + "\n")
                log_file.flush()

            score = entry["val_mean_srcc"]
            if score is None:
                best_state = get_param_state(params)
                best_epoch = epoch
            elif score > best_val:
                best_val = score
                best_state = get_param_state(params)
                best_epoch = epoch
    finally:
        if log_file:
            log_file.close()

    return TrainResult(
        params=params,
        best_state=best_state,
        final_state=get_param_state(params),
        best_epoch=best_epoch,
        best_val=best_val if best_val != -math.inf else float("nan"),
        log=history,
        aborted=aborted,
        abort_reason=abort_reason,
    )
