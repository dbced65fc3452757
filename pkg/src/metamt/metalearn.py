"""Outer loop: episode sampling, meta-gradient estimation, baselines.

Each outer update samples episodes (task + two independent token-budget
subsets), simulates one plain-SGD inner step on the first subset, and uses
the second subset to produce a meta-gradient via one of three estimators:

  first_order  plain gradient at the adapted parameters (the default)
  hvp          adds the curvature correction through a finite difference of
               gradients with step nu
  exact        differentiates through the inner step on the tape

The multilingual-joint and single-source-transfer baselines share the same
budget accounting so comparisons are fair.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, asdict
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import evaluate as eval_mod
from . import learner as learner_mod
from . import ulr as ulr_mod
from .autodiff import Tensor
from .learner import LearnConfig
from .model import ModelConfig, ParamSet

log = logging.getLogger(__name__)

ESTIMATORS = ("exact", "hvp", "first_order")


class MetaError(RuntimeError):
    pass


@dataclass(frozen=True)
class MetaConfig:
    meta_lr: float = 0.05            # outer rate
    inner_lr: float = 0.05           # simulated-step rate
    episodes_per_update: int = 1
    estimator: str = "first_order"
    nu: float = 1e-3                 # finite-difference step, hvp only
    total_updates: int = 500
    d_size: int = 512                # simulate-subset token budget
    dprime_size: int = 512           # evaluate-subset token budget
    aggregate: str = "sum"           # sum (literal) | mean
    eval_every: int = 50
    val_budget_tokens: int = 16000
    val_test_sentences: int = 100
    exact_param_limit: int = 5000
    divergence_loss: float = 1e3
    seed: int = 0
    validation_task: str | None = None

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise MetaError(f"unknown estimator {self.estimator!r}")
        if self.meta_lr <= 0 or self.inner_lr <= 0 or self.nu <= 0:
            raise MetaError("meta_lr, inner_lr and nu must be positive")
        if self.episodes_per_update < 1:
            raise MetaError("episodes_per_update must be >= 1")
        if self.aggregate not in ("sum", "mean"):
            raise MetaError("aggregate must be 'sum' or 'mean'")


@dataclass
class Episode:
    task_index: int
    D: list                  # simulate subset
    Dprime: list             # evaluate subset


def _sample_tokens(pairs, budget: int, rng: np.random.Generator):
    """Uniform draw without replacement until the target-token budget is met;
    with replacement (and a warning) when the corpus is too small."""
    total = sum(len(t) for _, t in pairs)
    chosen, tokens = [], 0
    if total < budget:
        log.warning("corpus of %d tokens below episode budget %d; sampling with replacement",
                    total, budget)
        while tokens < budget:
            p = pairs[int(rng.integers(len(pairs)))]
            chosen.append(p)
            tokens += len(p[1])
        return chosen
    for i in rng.permutation(len(pairs)):
        chosen.append(pairs[i])
        tokens += len(pairs[i][1])
        if tokens >= budget:
            break
    return chosen


def sample_episode(tasks: Sequence, rng: np.random.Generator, cfg: MetaConfig) -> Episode:
    """Uniform task choice; D and D' drawn independently (overlap by chance
    is allowed)."""
    if not tasks:
        raise MetaError("no source tasks")
    k = int(rng.integers(len(tasks)))
    train = tasks[k].corpus.train
    return Episode(k,
                   _sample_tokens(train, cfg.d_size, rng),
                   _sample_tokens(train, cfg.dprime_size, rng))


# ---------------------------------------------------------------------------
# estimator cores: generic in the two loss functions so toy problems can
# exercise the algebra directly

GradMap = dict[str, np.ndarray]
LossFn = Callable[[Mapping[str, Tensor]], Tensor]


def _leaf_map(values: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {n: Tensor(np.asarray(v, dtype=np.float64), requires_grad=True)
            for n, v in values.items()}


def _grad_values(loss: Tensor, params: Mapping[str, Tensor]) -> GradMap:
    if not np.isfinite(loss.data):
        raise MetaError("non-finite loss during meta-gradient estimation")
    return {n: g.data for n, g in ad.backward(loss, params).items()}


def first_order_meta_gradient(theta: Mapping[str, Tensor], loss_d: LossFn,
                              loss_dprime: LossFn, eta: float) -> GradMap:
    """Adapt with one SGD step on loss_d, return the plain gradient of
    loss_dprime at the adapted point."""
    g_d = _grad_values(loss_d(theta), theta)
    theta_prime = _leaf_map({n: theta[n].data - eta * g_d[n] for n in theta})
    return _grad_values(loss_dprime(theta_prime), theta_prime)


def hvp_meta_gradient(theta: Mapping[str, Tensor], loss_d: LossFn,
                      loss_dprime: LossFn, eta: float, nu: float) -> GradMap:
    """First-order estimate plus the curvature correction
    (eta/nu) * [grad loss_d at (theta + nu g') - grad loss_d at theta].
    Three computed gradients; the gradient at theta is reused."""
    if nu <= 0:
        raise MetaError("nu must be positive")
    g_d = _grad_values(loss_d(theta), theta)
    theta_prime = _leaf_map({n: theta[n].data - eta * g_d[n] for n in theta})
    g_prime = _grad_values(loss_dprime(theta_prime), theta_prime)
    theta_hat = _leaf_map({n: theta[n].data + nu * g_prime[n] for n in theta})
    g_hat = _grad_values(loss_d(theta_hat), theta_hat)
    return {n: g_prime[n] - (eta / nu) * (g_hat[n] - g_d[n]) for n in theta}


def exact_meta_gradient(theta: Mapping[str, Tensor], loss_d: LossFn,
                        loss_dprime: LossFn, eta: float,
                        param_limit: int | None = None) -> GradMap:
    """Differentiate loss_dprime(theta - eta * grad loss_d(theta)) through
    the inner step on the tape (double backward)."""
    n_params = sum(int(np.prod(t.shape)) for t in theta.values())
    if param_limit is not None and n_params > param_limit:
        raise MetaError(
            f"exact estimator refused for {n_params} parameters "
            f"(limit {param_limit}); use hvp or first_order"
        )
    inner = loss_d(theta)
    if not np.isfinite(inner.data):
        raise MetaError("non-finite inner loss")
    g_d = ad.backward(inner, theta)             # tape tensors, differentiable
    theta_prime = {n: ad.add(theta[n], ad.scale(g_d[n], -eta)) for n in theta}
    outer = loss_dprime(theta_prime)
    return _grad_values(outer, theta)


# ---------------------------------------------------------------------------
# episode wrappers around the real model


def _episode_losses(cfg_model: ModelConfig, ulr_state, task, episode: Episode,
                    loss_limit: float | None = None):
    from . import model as model_mod

    def check(loss):
        if loss_limit is not None and float(loss.data) > loss_limit:
            raise MetaError(
                f"divergence on task {episode.task_index}: loss {float(loss.data):.3g}"
            )
        return loss

    def loss_d(params):
        return check(model_mod.log_likelihood(params, cfg_model, ulr_state, task, episode.D))

    def loss_dprime(params):
        return check(model_mod.log_likelihood(params, cfg_model, ulr_state, task, episode.Dprime))

    return loss_d, loss_dprime


def meta_gradient_first_order(theta: ParamSet, episode: Episode, cfg_model,
                              ulr_state, task, eta: float,
                              loss_limit: float | None = None) -> GradMap:
    loss_d, loss_dp = _episode_losses(cfg_model, ulr_state, task, episode, loss_limit)
    try:
        return first_order_meta_gradient(theta, loss_d, loss_dp, eta)
    except ad.AutodiffError as exc:
        raise MetaError(f"episode on task {episode.task_index}: {exc}") from exc


def meta_gradient_hvp(theta: ParamSet, episode: Episode, cfg_model,
                      ulr_state, task, eta: float, nu: float,
                      loss_limit: float | None = None) -> GradMap:
    loss_d, loss_dp = _episode_losses(cfg_model, ulr_state, task, episode, loss_limit)
    try:
        return hvp_meta_gradient(theta, loss_d, loss_dp, eta, nu)
    except ad.AutodiffError as exc:
        raise MetaError(f"episode on task {episode.task_index}: {exc}") from exc


def meta_gradient_exact(theta: ParamSet, episode: Episode, cfg_model,
                        ulr_state, task, eta: float,
                        param_limit: int = 5000,
                        loss_limit: float | None = None) -> GradMap:
    loss_d, loss_dp = _episode_losses(cfg_model, ulr_state, task, episode, loss_limit)
    return exact_meta_gradient(theta, loss_d, loss_dp, eta, param_limit)


# ---------------------------------------------------------------------------
# training loops


def _validation_score(theta, cfg_model, ulr_state, validation, cfg: MetaConfig,
                      learn_cfg: LearnConfig) -> float:
    prev_stage = ulr_state.stage
    score, _, _ = eval_mod.finetune_and_score(
        theta, cfg_model, ulr_state, validation, cfg.val_budget_tokens,
        learn_cfg, seed=cfg.seed, max_test_sentences=cfg.val_test_sentences,
    )
    ulr_mod.set_stage(ulr_state, [validation.lexicon], prev_stage)
    return score


def meta_train(theta_init: ParamSet, sources: Sequence, cfg: MetaConfig,
               cfg_model: ModelConfig, ulr_state, validation=None,
               learn_cfg: LearnConfig | None = None,
               run_id: str = "meta") -> tuple[ParamSet, list[eval_mod.MetricsRecord]]:
    """MAML-style outer loop; returns parameters at the best validation score
    (or the final parameters when no validation task is given)."""
    if not sources:
        raise MetaError("sources must be non-empty")
    if validation is not None and any(t is validation for t in sources):
        raise MetaError("validation task must be disjoint from sources")
    learn_cfg = learn_cfg or LearnConfig()
    rng = np.random.default_rng(cfg.seed)
    for t in sources:
        ulr_mod.set_stage(ulr_state, [t.lexicon], ulr_mod.STAGE_META)

    theta = theta_init
    best_theta, best_score = theta, -np.inf
    metrics: list[eval_mod.MetricsRecord] = []

    for update in range(cfg.total_updates):
        gsum: GradMap | None = None
        for _ in range(cfg.episodes_per_update):
            ep = sample_episode(sources, rng, cfg)
            task = sources[ep.task_index]
            if cfg.estimator == "first_order":
                g = meta_gradient_first_order(theta, ep, cfg_model, ulr_state,
                                              task, cfg.inner_lr,
                                              loss_limit=cfg.divergence_loss)
            elif cfg.estimator == "hvp":
                g = meta_gradient_hvp(theta, ep, cfg_model, ulr_state, task,
                                      cfg.inner_lr, cfg.nu,
                                      loss_limit=cfg.divergence_loss)
            else:
                g = meta_gradient_exact(theta, ep, cfg_model, ulr_state, task,
                                        cfg.inner_lr, cfg.exact_param_limit,
                                        loss_limit=cfg.divergence_loss)
            gsum = g if gsum is None else {n: gsum[n] + g[n] for n in gsum}
        if cfg.aggregate == "mean":
            gsum = {n: v / cfg.episodes_per_update for n, v in gsum.items()}
        theta = theta.axpy(-cfg.meta_lr, gsum)

        if validation is not None and ((update + 1) % cfg.eval_every == 0
                                       or update + 1 == cfg.total_updates):
            score = _validation_score(theta, cfg_model, ulr_state, validation,
                                      cfg, learn_cfg)
            metrics.append(eval_mod.MetricsRecord(
                run_id, cfg.seed, update + 1, validation.name, "dev",
                None, score, cfg.val_budget_tokens))
            if score > best_score:
                best_score, best_theta = score, theta
        else:
            best_theta = theta if validation is None else best_theta

        _check_divergence(theta, cfg_model, ulr_state, sources, rng, cfg, update)

    return best_theta, metrics


def _check_divergence(theta, cfg_model, ulr_state, tasks, rng, cfg, update):
    # cheap guard: a diverging run shows up in the parameter norm long before
    # the loss reaches the abort threshold
    norm = max(float(np.max(np.abs(t.data))) for t in theta.values())
    if not np.isfinite(norm) or norm > cfg.divergence_loss:
        raise MetaError(f"divergence at outer update {update}: |theta|_max = {norm:.3g}")


def multilingual_train(theta_init: ParamSet, tasks: Sequence, cfg: MetaConfig,
                       cfg_model: ModelConfig, ulr_state, validation=None,
                       learn_cfg: LearnConfig | None = None,
                       run_id: str = "multi") -> tuple[ParamSet, list[eval_mod.MetricsRecord]]:
    """Joint training over the union of tasks: uniform task sampling, plain
    gradient steps, no inner simulation; per-update data budget matches the
    meta loop (d_size + dprime_size tokens)."""
    if not tasks:
        raise MetaError("tasks must be non-empty")
    learn_cfg = learn_cfg or LearnConfig()
    rng = np.random.default_rng(cfg.seed)
    for t in tasks:
        ulr_mod.set_stage(ulr_state, [t.lexicon], ulr_mod.STAGE_META)
    from . import model as model_mod

    theta = theta_init
    best_theta, best_score = theta, -np.inf
    metrics: list[eval_mod.MetricsRecord] = []

    for update in range(cfg.total_updates):
        gsum: GradMap | None = None
        for _ in range(cfg.episodes_per_update):
            k = int(rng.integers(len(tasks)))
            batch = _sample_tokens(tasks[k].corpus.train,
                                   cfg.d_size + cfg.dprime_size, rng)
            loss = model_mod.log_likelihood(theta, cfg_model, ulr_state,
                                            tasks[k], batch)
            if not np.isfinite(loss.data) or float(loss.data) > cfg.divergence_loss:
                raise MetaError(f"divergence at update {update}: loss {float(loss.data):.3g}")
            g = _grad_values(loss, theta)
            gsum = g if gsum is None else {n: gsum[n] + g[n] for n in gsum}
        if cfg.aggregate == "mean":
            gsum = {n: v / cfg.episodes_per_update for n, v in gsum.items()}
        theta = theta.axpy(-cfg.meta_lr, gsum)

        if validation is not None and ((update + 1) % cfg.eval_every == 0
                                       or update + 1 == cfg.total_updates):
            score = _validation_score(theta, cfg_model, ulr_state, validation,
                                      cfg, learn_cfg)
            metrics.append(eval_mod.MetricsRecord(
                run_id, cfg.seed, update + 1, validation.name, "dev",
                None, score, cfg.val_budget_tokens))
            if score > best_score:
                best_score, best_theta = score, theta
        else:
            best_theta = theta if validation is None else best_theta

    return best_theta, metrics


def transfer_init(theta_init: ParamSet, source_task, cfg: MetaConfig,
                  cfg_model: ModelConfig, ulr_state, validation=None,
                  learn_cfg: LearnConfig | None = None,
                  run_id: str = "transfer"):
    """Single-source pretraining: multilingual training on exactly one task."""
    return multilingual_train(theta_init, [source_task], cfg, cfg_model,
                              ulr_state, validation, learn_cfg, run_id)


# ---------------------------------------------------------------------------
# checkpoints


def config_hash(*cfgs) -> str:
    blob = json.dumps([asdict(c) if hasattr(c, "__dataclass_fields__") else c
                       for c in cfgs], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_checkpoint(path, params: ParamSet, ulr_state, meta: dict | None = None) -> None:
    """Versioned container of all named tensors + shared ULR state; the write
    goes to a temp file and is renamed into place."""
    payload = {f"param/{n}": t.data for n, t in params.entries.items()}
    payload["ulr/eps_key"] = ulr_state.eps_key
    header = {
        "version": 1,
        "partitions": params.partitions,
        "tau": ulr_state.tau,
        "sign": ulr_state.sign,
        "stage": ulr_state.stage,
        "meta": meta or {},
    }
    payload["header"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[ParamSet, ulr_mod.UlrState, dict]:
    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("version") != 1:
            raise MetaError(f"{path}: unsupported checkpoint version")
        entries = {
            k[len("param/"):]: Tensor(z[k], requires_grad=True)
            for k in z.files if k.startswith("param/")
        }
        state = ulr_mod.UlrState(z["ulr/eps_key"], header["tau"], header["sign"],
                                 header["stage"])
    return ParamSet(entries, header["partitions"]), state, header["meta"]
