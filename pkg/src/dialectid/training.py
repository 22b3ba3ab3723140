"""Training regimen: two learning-rate groups, warmup then quantized decay,
AdamW, freezing by mode and macro-F1 early stopping on periodic dev evals.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .corpus import EncodedDataset
from .encoder import ConfigError, Model, trim_batch
from .ensemble_eval import EvalReport, evaluate_predictions
from .heads import predict

logger = logging.getLogger(__name__)

SCHEDULES = ("inv_sqrt", "linear")
HEAD_PREFIX = "classifier."
NO_DECAY_SUFFIXES = (".bias", ".gain", ".shift")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    eval_every: int = 100
    patience: int = 10
    warmup_steps: int = 250
    lr_head: float = 1e-2
    lr_rest: float = 5e-6
    lr_floor_ratio: float = 0.01
    decay_quantum: int = 10
    schedule: str = "inv_sqrt"
    weight_decay: float = 0.01
    max_steps: int | None = None
    seed: int = 0

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def problems(self) -> list[str]:
        out = []
        for name in ("batch_size", "eval_every", "patience", "warmup_steps", "decay_quantum"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                out.append(f"{name} must be a positive integer")
        for name in ("lr_head", "lr_rest"):
            if not getattr(self, name) > 0:
                out.append(f"{name} must be positive")
        if not 0.0 < self.lr_floor_ratio < 1.0:
            out.append("lr_floor_ratio must be in (0, 1)")
        if self.weight_decay < 0:
            out.append("weight_decay must be non-negative")
        if self.schedule not in SCHEDULES:
            out.append(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.max_steps is not None and (not isinstance(self.max_steps, int) or self.max_steps < 1):
            out.append("max_steps must be a positive integer or null")
        if self.schedule == "linear":
            if self.max_steps is None:
                out.append("linear schedule requires max_steps")
            elif isinstance(self.warmup_steps, int) and self.max_steps <= self.warmup_steps:
                out.append("linear schedule requires max_steps > warmup_steps")
        return out

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------- parameters


def trainable_mask(model: Model, mode: str) -> set[str]:
    """Names of the parameters that receive updates under ``mode``."""
    if mode == "fine_tune":
        return set(model.params)
    if mode == "adapter":
        if not model.config.adapter_enabled:
            raise ConfigError(["mode 'adapter' requires adapter_enabled"])
        return {n for n in model.params
                if ".adapter_" in n or n.startswith(HEAD_PREFIX) or n.startswith("vatt.")}
    raise ConfigError([f"unknown mode {mode!r}"])


def param_groups(names, config: TrainConfig) -> dict[str, float]:
    """Base learning rate per parameter: the classifier gets ``lr_head``."""
    return {n: (config.lr_head if n.startswith(HEAD_PREFIX) else config.lr_rest) for n in names}


def decays(name: str) -> bool:
    return not name.endswith(NO_DECAY_SUFFIXES)


def tensor_digest(model: Model, names) -> str:
    h = hashlib.sha256()
    for n in sorted(names):
        h.update(n.encode())
        h.update(np.ascontiguousarray(model.params[n].data).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- schedule


def lr_multiplier(step: int, config: TrainConfig) -> float:
    """Shared factor applied to both base learning rates at ``step`` (1-based)."""
    if step < 1:
        raise ValueError("step must be >= 1")
    w = config.warmup_steps
    if step <= w:
        return step / w
    floor = config.lr_floor_ratio
    if config.schedule == "linear":
        if config.max_steps is None:
            raise ConfigError(["linear schedule requires max_steps"])
        frac = min(1.0, (step - w) / (config.max_steps - w))
        return max(floor, 1.0 - (1.0 - floor) * frac)
    q = config.decay_quantum
    quantized = w + q * ((step - w) // q)
    return max(floor, math.sqrt(w / quantized))


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: dict, weight_decay: float,
               no_decay: Callable[[str], bool] = lambda n: False):
    """One AdamW update of ``params[name].data`` in place for every name in ``grads``.

    ``lr`` maps parameter name to its effective learning rate. Weight decay is
    applied to the weights directly (``p -= lr * wd * p``), not folded into
    the gradient. Parameters absent from ``grads`` are untouched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise nx.NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step_lr = lr[name]
        if weight_decay and not no_decay(name):
            p.data -= step_lr * weight_decay * p.data
        p.data -= step_lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------- early stopping


@dataclass
class TrainState:
    best_dev_f1: float | None = None
    best_params: dict | None = None
    best_step: int | None = None
    evals_since_improvement: int = 0
    global_step: int = 0


def early_stop_update(state: TrainState, dev_f1: float, patience: int,
                      snapshot: Callable[[], dict] | None = None) -> str:
    """Record one dev evaluation; return ``"halt"`` once patience runs out.

    Only a strictly greater F1 counts as an improvement.
    """
    if state.best_dev_f1 is None or dev_f1 > state.best_dev_f1:
        state.best_dev_f1 = dev_f1
        state.best_step = state.global_step
        state.best_params = snapshot() if snapshot is not None else None
        state.evals_since_improvement = 0
        return "continue"
    state.evals_since_improvement += 1
    return "halt" if state.evals_since_improvement >= patience else "continue"


# ---------------------------------------------------------------- loop


def evaluate(model: Model, dataset: EncodedDataset, batch_size: int = 256) -> EvalReport:
    probs = model.predict_proba(dataset.token_ids, dataset.attention_mask, batch_size=batch_size)
    return evaluate_predictions(dataset.labels, predict(probs), model.config.num_classes,
                                list(dataset.label_set.names))


@dataclass
class TrainResult:
    model: Model
    log: list
    best_dev_f1: float
    best_step: int
    steps: int
    halted_early: bool
    dev_report: EvalReport


def _check_dataset(name, ds: EncodedDataset, model: Model):
    if ds is None or len(ds) == 0:
        raise TrainingError(f"{name} set is empty")
    if len(ds.label_set) != model.config.num_classes:
        raise TrainingError(f"{name} set has {len(ds.label_set)} classes, model expects {model.config.num_classes}")


def train(model: Model, train_set: EncodedDataset, dev_set: EncodedDataset, config: TrainConfig,
          on_eval: Callable[[dict], None] | None = None) -> TrainResult:
    """Train ``model`` in place and leave it holding the best-dev-F1 parameters.

    Mini-batches come from a fresh seeded permutation each epoch. Every
    ``eval_every`` updates the dev set is scored; the run halts when macro-F1
    has not strictly improved for ``patience`` evaluations, or at
    ``max_steps``.
    """
    if model.config.num_classes < 2:
        raise TrainingError("need at least 2 classes")
    _check_dataset("train", train_set, model)
    _check_dataset("dev", dev_set, model)
    if train_set.label_set != dev_set.label_set:
        raise TrainingError("train and dev label sets differ")

    trainable = trainable_mask(model, model.config.mode)
    for name, p in model.params.items():
        p.requires_grad = name in trainable
        p.grad = None
    base_lr = param_groups(trainable, config)
    opt = OptimizerState()
    state = TrainState()
    shuffle_rng = np.random.default_rng([config.seed, 0])
    dropout_rng = np.random.default_rng([config.seed, 1])

    log, window = [], []
    n = len(train_set)
    order, cursor = shuffle_rng.permutation(n), 0
    halted = False
    last_eval_step = 0

    def run_eval(step):
        report = evaluate(model, dev_set)
        record = {
            "step": step,
            "loss": float(np.mean(window)) if window else None,
            "lr_factor": lr_multiplier(step, config),
            "dev_acc": report.accuracy,
            "dev_macro_f1": report.macro_f1,
        }
        log.append(record)
        window.clear()
        if on_eval is not None:
            on_eval(record)
        logger.info("step %d loss %s dev acc %.4f macro-F1 %.4f", step, record["loss"],
                    report.accuracy, report.macro_f1)
        return early_stop_update(state, report.macro_f1, config.patience, model.state_dict)

    step = 0
    while config.max_steps is None or step < config.max_steps:
        if cursor >= n:
            order, cursor = shuffle_rng.permutation(n), 0
        idx = order[cursor:cursor + config.batch_size]
        cursor += config.batch_size
        step += 1
        state.global_step = step

        ids, mask = trim_batch(train_set.token_ids[idx], train_set.attention_mask[idx])
        with nx.Tape() as tape:
            out = model.forward(ids, mask, train=True, rng=dropout_rng)
            loss = nx.cross_entropy(out.logits, train_set.labels[idx])
        tape.backward(loss)
        window.append(float(loss.data))

        factor = lr_multiplier(step, config)
        grads = {name: model.params[name].grad for name in trainable if model.params[name].grad is not None}
        adamw_step(model.params, grads, opt, {k: v * factor for k, v in base_lr.items()},
                   config.weight_decay, no_decay=lambda name: not decays(name))
        model.zero_grad()

        if step % config.eval_every == 0:
            last_eval_step = step
            if run_eval(step) == "halt":
                halted = True
                break

    if last_eval_step != step or not log:
        run_eval(step)

    for p in model.params.values():
        p.requires_grad = True
    model.load_state_dict(state.best_params)
    return TrainResult(
        model=model,
        log=log,
        best_dev_f1=state.best_dev_f1,
        best_step=state.best_step,
        steps=step,
        halted_early=halted,
        dev_report=evaluate(model, dev_set),
    )


def write_log(path, log):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in log:
            fh.write(json.dumps(rec) + "\n")
