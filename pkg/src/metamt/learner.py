"""Language-specific learning: few-step fine-tuning from a shared init.

Two distinct inner procedures live here.  `learn` is the real fine-tuning
loop used on target tasks (Adam by default, dev-loss early stopping, an
optional Gaussian-prior proximity penalty, strategy masks deciding which
module partitions move).  `simulate_step` is the single plain-SGD step used
inside meta-training, kept deliberately bare so the meta-gradient algebra
stays exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import model as model_mod
from . import ulr as ulr_mod
from .autodiff import Tensor
from .model import ParamSet

DELTA = "__delta__"   # name under which the active language's deltas train


class LearnError(RuntimeError):
    pass


@dataclass(frozen=True)
class LearnConfig:
    beta: float = 0.0            # precision of the Gaussian prior around theta0
    inner_lr: float = 1e-3
    optimizer: str = "adam"      # sgd | adam
    max_steps: int = 50
    patience: int = 5
    batch_tokens: int = 512
    strategy: str = "all"        # all | emb+enc | emb

    def __post_init__(self):
        if self.max_steps < 1:
            raise LearnError("max_steps must be >= 1")
        if self.patience < 0:
            raise LearnError("patience must be >= 0")
        if self.beta < 0 or self.inner_lr < 0:
            # inner_lr 0 is allowed: it makes learn a no-op, handy as an oracle
            raise LearnError("beta and inner_lr must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise LearnError(f"unknown optimizer {self.optimizer!r}")


def token_batches(pairs: Sequence, batch_tokens: int, rng: np.random.Generator):
    """Shuffle pairs and group them into batches of ~batch_tokens target tokens."""
    order = rng.permutation(len(pairs))
    batch, count = [], 0
    for i in order:
        batch.append(pairs[i])
        count += len(pairs[i][1])
        if count >= batch_tokens:
            yield batch
            batch, count = [], 0
    if batch:
        yield batch


def proximity_penalty(params: Mapping[str, Tensor], theta0: Mapping[str, Tensor],
                      names: set[str]) -> Tensor:
    """beta-less squared distance sum over the trainable names."""
    total = Tensor(0.0)
    for n in sorted(names):
        diff = ad.add(params[n], ad.scale(Tensor(theta0[n].data), -1.0))
        total = ad.add(total, (diff * diff).sum())
    return total


def inner_objective(params: ParamSet, theta0: ParamSet, cfg_model, ulr_state, task,
                    batch, beta: float, trainable: set[str] | None = None,
                    rng=None) -> Tensor:
    """Negated per-token log-likelihood plus the proximity penalty."""
    if set(params.keys()) != set(theta0.keys()):
        raise LearnError("params and theta0 must share parameter names")
    loss = model_mod.log_likelihood(params, cfg_model, ulr_state, task, batch, rng)
    if beta == 0.0:
        return loss
    names = set(params.keys()) if trainable is None else (trainable - {DELTA})
    return ad.add(loss, ad.scale(proximity_penalty(params, theta0, names), beta))


# ---------------------------------------------------------------------------
# optimizers


class _Sgd:
    def __init__(self, lr):
        self.lr = lr

    def step(self, values: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        return {n: values[n] - self.lr * grads[n] for n in values}


class _Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, values, grads):
        self.t += 1
        out = {}
        for n in values:
            g = grads[n]
            m = self.m.get(n, np.zeros_like(g))
            v = self.v.get(n, np.zeros_like(g))
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.m[n], self.v[n] = m, v
            mh = m / (1 - self.b1 ** self.t)
            vh = v / (1 - self.b2 ** self.t)
            out[n] = values[n] - self.lr * mh / (np.sqrt(vh) + self.eps)
        return out


def _make_optimizer(cfg: LearnConfig):
    return _Sgd(cfg.inner_lr) if cfg.optimizer == "sgd" else _Adam(cfg.inner_lr)


# ---------------------------------------------------------------------------
# fine-tuning loop


def trainable_names(params: ParamSet, strategy: str) -> set[str]:
    """Strategy mask minus the outer-stage-only mixture parameters, plus the
    active language's delta table."""
    names = model_mod.partition_mask(params, strategy)
    names -= {ulr_mod.EPS_U, ulr_mod.TRANSFORM}
    names.add(DELTA)
    return names


def learn(theta0: ParamSet, cfg_model, ulr_state, task, train, dev,
          cfg: LearnConfig, seed: int = 0) -> tuple[ParamSet, dict]:
    """Fine-tune on one task from theta0; returns (best params, history).

    Parameters outside the strategy mask are the *same objects* as in theta0
    (bit-identical by construction).  The task's delta table is updated in
    place on the task's lexicon; callers wanting isolation should clone the
    task lexicon first.
    """
    if not train:
        raise LearnError("training set is empty")
    ulr_mod.set_stage(ulr_state, [task.lexicon], ulr_mod.STAGE_LANGUAGE_SPECIFIC,
                      active=task.lexicon)
    names = trainable_names(theta0, cfg.strategy)
    rng = np.random.default_rng(seed)
    drop_rng = np.random.default_rng(seed + 1) if cfg_model.dropout > 0 else None

    params = theta0
    opt = _make_optimizer(cfg)
    history = {"train_loss": [], "dev_loss": []}

    def dev_loss(p):
        if not dev:
            return None
        with ad.no_grad():
            return float(model_mod.log_likelihood(p, cfg_model, ulr_state, task, dev).data)

    def snapshot(p):
        return p, Tensor(task.lexicon.delta.data.copy(), requires_grad=True)

    best = snapshot(params)
    best_dev = dev_loss(params)
    bad_steps = 0
    batches = token_batches(train, cfg.batch_tokens, rng)

    for step in range(cfg.max_steps):
        try:
            batch = next(batches)
        except StopIteration:
            batches = token_batches(train, cfg.batch_tokens, rng)
            batch = next(batches)
        values = {n: params[n] for n in names if n != DELTA}
        values[DELTA] = task.lexicon.delta
        loss = inner_objective(params, theta0, cfg_model, ulr_state, task, batch,
                               cfg.beta, names, drop_rng)
        if not np.isfinite(loss.data):
            raise LearnError(f"non-finite training loss at step {step}")
        grads = ad.backward(loss, values)
        new_values = opt.step({n: v.data for n, v in values.items()},
                              {n: g.data for n, g in grads.items()})
        task.lexicon.delta = Tensor(new_values.pop(DELTA), requires_grad=True)
        params = params.replace(new_values)

        d = dev_loss(params)
        history["train_loss"].append(float(loss.data))
        history["dev_loss"].append(d)
        if d is not None:
            if best_dev is None or d < best_dev:
                best_dev, best, bad_steps = d, snapshot(params), 0
            else:
                bad_steps += 1
                if bad_steps > cfg.patience:
                    break
        else:
            best = snapshot(params)

    params, delta = best
    task.lexicon.delta = delta
    return params, history


def simulate_step(theta: ParamSet, cfg_model, ulr_state, task, batch,
                  eta: float) -> ParamSet:
    """One plain SGD step on all outer-stage trainable parameters.

    Always SGD, whatever the fine-tuning optimizer is, so that the exact and
    approximate meta-gradients refer to the same update algebra.
    """
    if eta <= 0:
        raise LearnError("eta must be positive")
    ulr_mod.set_stage(ulr_state, [task.lexicon], ulr_mod.STAGE_META)
    loss = model_mod.log_likelihood(theta, cfg_model, ulr_state, task, batch)
    if not np.isfinite(loss.data):
        raise LearnError("non-finite loss in simulate_step")
    grads = ad.backward(loss, theta)
    return theta.axpy(-eta, grads)
