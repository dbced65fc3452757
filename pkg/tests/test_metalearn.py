import logging

import numpy as np
import pytest

from metamt import autodiff as ad
from metamt import learner as L
from metamt import metalearn as ML
from metamt import model as M
from metamt import tasks as T
from metamt import ulr as U
from metamt.autodiff import Tensor


def quadratic(A, b):
    """loss(w) = 0.5 w^T A w + b^T w built from graph primitives."""
    n = len(b)

    def f(params):
        w = params["w"]
        aw = ad.matmul(Tensor(A), w.reshape(n, 1)).reshape(n)
        return ad.add(ad.scale((w * aw).sum(), 0.5), (w * Tensor(b)).sum())

    return f


def leaf(w):
    return {"w": Tensor(np.asarray(w, dtype=np.float64), requires_grad=True)}


@pytest.fixture
def toy():
    rng = np.random.default_rng(0)
    n = 4
    A = rng.standard_normal((n, n))
    A = A @ A.T + np.eye(n)           # symmetric positive definite
    B = rng.standard_normal((n, n))
    B = B @ B.T + np.eye(n)
    b1, b2 = rng.standard_normal(n), rng.standard_normal(n)
    w0 = rng.standard_normal(n)
    return A, b1, B, b2, w0


def analytic_meta_gradient(A, b1, B, b2, w0, eta):
    g_d = A @ w0 + b1
    w_prime = w0 - eta * g_d
    return (np.eye(len(w0)) - eta * A).T @ (B @ w_prime + b2)


# -- estimator algebra on the quadratic toy ---------------------------------


def test_exact_matches_closed_form(toy):
    A, b1, B, b2, w0 = toy
    eta = 0.07
    g = ML.exact_meta_gradient(leaf(w0), quadratic(A, b1), quadratic(B, b2), eta)
    assert np.allclose(g["w"], analytic_meta_gradient(A, b1, B, b2, w0, eta),
                       atol=1e-10)


def test_first_order_is_adapted_gradient(toy):
    A, b1, B, b2, w0 = toy
    eta = 0.07
    g = ML.first_order_meta_gradient(leaf(w0), quadratic(A, b1), quadratic(B, b2), eta)
    w_prime = w0 - eta * (A @ w0 + b1)
    assert np.allclose(g["w"], B @ w_prime + b2, atol=1e-12)


def test_hvp_exact_on_quadratics(toy):
    # the inner gradient is linear in w, so the finite difference of gradients
    # is exact for any nu and the hvp estimator reproduces the closed form
    A, b1, B, b2, w0 = toy
    eta = 0.07
    for nu in (1e-2, 1e-4):
        g = ML.hvp_meta_gradient(leaf(w0), quadratic(A, b1), quadratic(B, b2),
                                 eta, nu)
        assert np.allclose(g["w"], analytic_meta_gradient(A, b1, B, b2, w0, eta),
                           atol=1e-8)


def test_estimators_coincide_when_inner_hessian_zero(toy):
    # linear inner loss: no curvature, so all three estimators agree
    A, b1, B, b2, w0 = toy
    eta = 0.05
    lin = quadratic(np.zeros_like(A), b1)
    outer = quadratic(B, b2)
    ge = ML.exact_meta_gradient(leaf(w0), lin, outer, eta)
    gh = ML.hvp_meta_gradient(leaf(w0), lin, outer, eta, 1e-3)
    gf = ML.first_order_meta_gradient(leaf(w0), lin, outer, eta)
    assert np.allclose(ge["w"], gf["w"], atol=1e-10)
    assert np.allclose(gh["w"], gf["w"], atol=1e-8)


def test_hvp_rejects_bad_nu(toy):
    A, b1, B, b2, w0 = toy
    with pytest.raises(ML.MetaError):
        ML.hvp_meta_gradient(leaf(w0), quadratic(A, b1), quadratic(B, b2),
                             0.1, 0.0)


def test_exact_param_limit():
    f = quadratic(np.eye(3), np.zeros(3))
    with pytest.raises(ML.MetaError, match="limit"):
        ML.exact_meta_gradient(leaf(np.zeros(3)), f, f, 0.1, param_limit=2)


# -- episode sampling --------------------------------------------------------


def make_tasks(n_tasks=3, n_pairs=40, seed=0):
    rng = np.random.default_rng(seed)
    cfg_model = M.ModelConfig(d_model=8, n_layer=1, n_head=2, d_ff=16,
                              max_len=12, dropout=0.0)
    src_tokens = [f"s{i}" for i in range(6)]
    tgt_tokens = [f"t{i}" for i in range(6)]
    tgt_vocab = M.Vocabulary(tgt_tokens)
    state, entries = U.init_ulr_params(rng.standard_normal((8, 8)), n_slots=4)
    tasks = []
    for k in range(n_tasks):
        pairs = [([src_tokens[(i + k) % 6]] * 2, [tgt_tokens[(i + k) % 6]] * 2)
                 for i in range(n_pairs)]
        corpus = T.Corpus(pairs, {"train": list(range(n_pairs - 4)),
                                  "dev": [n_pairs - 4, n_pairs - 3],
                                  "test": [n_pairs - 2, n_pairs - 1]})
        src_vocab = M.Vocabulary(src_tokens)
        lex = U.LanguageLexicon(rng.standard_normal((len(src_vocab), 8)))
        tasks.append(T.Task(f"lang{k}", corpus, src_vocab, tgt_vocab, lex))
    theta = M.init_params(cfg_model, len(tgt_vocab), rng, entries)
    return cfg_model, state, tasks, theta


def test_sample_episode_budgets():
    cfg_model, state, tasks, theta = make_tasks()
    cfg = ML.MetaConfig(d_size=10, dprime_size=6)
    rng = np.random.default_rng(0)
    ep = ML.sample_episode(tasks, rng, cfg)
    assert 0 <= ep.task_index < len(tasks)
    assert sum(len(t) for _, t in ep.D) >= 10
    assert sum(len(t) for _, t in ep.Dprime) >= 6


def test_sample_tokens_with_replacement_warns(caplog):
    pairs = [(["a"], ["b"])] * 3
    with caplog.at_level(logging.WARNING):
        chosen = ML._sample_tokens(pairs, 10, np.random.default_rng(0))
    assert sum(len(t) for _, t in chosen) >= 10
    assert any("replacement" in r.message for r in caplog.records)


def test_sample_episode_requires_tasks():
    with pytest.raises(ML.MetaError):
        ML.sample_episode([], np.random.default_rng(0), ML.MetaConfig())


def test_meta_config_validation():
    with pytest.raises(ML.MetaError):
        ML.MetaConfig(estimator="sgd")
    with pytest.raises(ML.MetaError):
        ML.MetaConfig(meta_lr=0.0)
    with pytest.raises(ML.MetaError):
        ML.MetaConfig(aggregate="median")


# -- estimator consistency on the real model (smoke scale) -------------------


def test_estimators_consistent_on_tiny_model():
    cfg_model, state, tasks, theta = make_tasks()
    rng = np.random.default_rng(1)
    # break the zero-output symmetry so curvature is non-trivial
    theta = theta.replace({"out.W": 0.1 * rng.standard_normal(theta["out.W"].shape)})
    cfg = ML.MetaConfig(d_size=12, dprime_size=12)
    ep = ML.sample_episode(tasks, rng, cfg)
    task = tasks[ep.task_index]
    eta = 1e-3
    ge = ML.meta_gradient_exact(theta, ep, cfg_model, state, task, eta,
                                param_limit=10**6)
    gh = ML.meta_gradient_hvp(theta, ep, cfg_model, state, task, eta, nu=1e-4)
    gf = ML.meta_gradient_first_order(theta, ep, cfg_model, state, task, eta)

    def rel(a, b):
        na = np.sqrt(sum(np.sum((a[n] - b[n]) ** 2) for n in a))
        nb = np.sqrt(sum(np.sum(b[n] ** 2) for n in b))
        return na / nb

    assert rel(gh, ge) < 0.05
    assert rel(gf, ge) < 0.10


# -- outer loops (smoke scale) -----------------------------------------------


def test_meta_train_changes_parameters_deterministically():
    cfg_model, state, tasks, theta = make_tasks()
    cfg = ML.MetaConfig(meta_lr=0.05, inner_lr=0.05, total_updates=3,
                        d_size=12, dprime_size=12, seed=4)
    out1, _ = ML.meta_train(theta.clone(), tasks, cfg, cfg_model, state)
    out2, _ = ML.meta_train(theta.clone(), tasks, cfg, cfg_model, state)
    assert out1.distance_to(theta) > 0
    for n in out1:
        assert np.array_equal(out1[n].data, out2[n].data)


def test_meta_train_rejects_validation_among_sources():
    cfg_model, state, tasks, theta = make_tasks()
    cfg = ML.MetaConfig(total_updates=1)
    with pytest.raises(ML.MetaError, match="disjoint"):
        ML.meta_train(theta, tasks, cfg, cfg_model, state, validation=tasks[0])


def test_meta_train_divergence_guard():
    cfg_model, state, tasks, theta = make_tasks()
    cfg = ML.MetaConfig(meta_lr=1e9, inner_lr=0.05, total_updates=50,
                        d_size=12, dprime_size=12)
    with pytest.raises(ML.MetaError, match="divergence|non-finite"):
        ML.meta_train(theta, tasks, cfg, cfg_model, state)


def test_multilingual_train_runs_and_transfer_matches_single_source():
    cfg_model, state, tasks, theta = make_tasks()
    cfg = ML.MetaConfig(meta_lr=0.05, total_updates=3, d_size=12, dprime_size=12,
                        seed=2)
    multi, _ = ML.multilingual_train(theta.clone(), tasks[:1], cfg, cfg_model, state)
    trans, _ = ML.transfer_init(theta.clone(), tasks[0], cfg, cfg_model, state)
    for n in multi:
        assert np.array_equal(multi[n].data, trans[n].data)


def test_aggregate_mean_scales_update():
    cfg_model, state, tasks, theta = make_tasks(n_tasks=1)
    base = dict(meta_lr=0.05, inner_lr=0.05, total_updates=1,
                episodes_per_update=2, d_size=12, dprime_size=12, seed=7)
    s, _ = ML.meta_train(theta.clone(), tasks, ML.MetaConfig(aggregate="sum", **base),
                         cfg_model, state)
    m, _ = ML.meta_train(theta.clone(), tasks, ML.MetaConfig(aggregate="mean", **base),
                         cfg_model, state)
    # identical episodes, so the summed update is exactly twice the averaged one
    for n in s:
        ds = s[n].data - theta[n].data
        dm = m[n].data - theta[n].data
        assert np.allclose(ds, 2.0 * dm, atol=1e-12)


# -- checkpoints -------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    cfg_model, state, tasks, theta = make_tasks()
    path = tmp_path / "ck.npz"
    ML.save_checkpoint(path, theta, state, meta={"note": "x"})
    p2, s2, meta = ML.load_checkpoint(path)
    assert meta == {"note": "x"}
    assert set(p2.entries) == set(theta.entries)
    for n in theta:
        assert np.array_equal(p2[n].data, theta[n].data)
    assert p2.partitions == theta.partitions
    assert np.array_equal(s2.eps_key, state.eps_key)
    assert s2.tau == state.tau and s2.sign == state.sign


def test_checkpoint_version_check(tmp_path):
    import json as _json
    path = tmp_path / "bad.npz"
    header = np.frombuffer(_json.dumps({"version": 99}).encode(), dtype=np.uint8)
    np.savez(path, header=header)
    with pytest.raises(ML.MetaError, match="version"):
        ML.load_checkpoint(path)


def test_config_hash_sensitivity():
    a = ML.MetaConfig(seed=0)
    b = ML.MetaConfig(seed=1)
    assert ML.config_hash(a) == ML.config_hash(ML.MetaConfig(seed=0))
    assert ML.config_hash(a) != ML.config_hash(b)
