import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from conftest import FAST_MCMC, continuous_dataset, fast_config, random_spd, two_blob_continuous
from mmm.config import EMConfig, RunConfig
from mmm.em import (
    LatentData,
    MMMParams,
    check_convergence,
    contract_rows,
    contract_time,
    e_step,
    fit,
    init_kmeanspp,
    init_random,
    m_step,
    multistart,
    observed_loglik,
)
from mmm.errors import DegenerateClusterError, FitFailedError, NumericalError, ShapeError, ValidationError
from mmm.matnorm import MatNormParams, matnorm_logpdf, vec
from mmm.mmn import mmn_e_step
from mmm.schema import MixedDataset, Schema, latent_init_view
from mmm.selection import ari
from mmm.simulate import generate, benchmark_config


def identity_params(pi, M):
    M = np.asarray(M, dtype=float)
    K, J, T = M.shape
    return MMMParams(pi, M, np.repeat(np.eye(T)[None], K, 0), np.repeat(np.eye(J)[None], K, 0))


def random_mixed(seed, N=6, T=2, K=2):
    """Small dataset with every latent block present, plus random parameters."""
    rng = np.random.default_rng(seed)
    schema = Schema.from_list([
        {"name": "x", "kind": "continuous"},
        {"name": "o", "kind": "ordinal", "levels": 3},
        {"name": "b", "kind": "binary"},
        {"name": "y", "kind": "count"},
    ])
    values = np.stack([
        rng.standard_normal((N, T)),
        rng.integers(1, 4, (N, T)),
        rng.integers(1, 3, (N, T)),
        rng.poisson(2.0, (N, T)),
    ], axis=1).astype(float)
    ds = MixedDataset(schema, values)
    pi = rng.dirichlet(np.ones(K))
    pi = (pi + 0.1) / (pi + 0.1).sum()
    M = rng.normal(1.0, 1.0, (K, 4, T))
    Phi = np.stack([random_spd(rng, T) for _ in range(K)])
    Sigma = np.stack([random_spd(rng, 4) for _ in range(K)])
    return ds, MMMParams(pi, M, Phi, Sigma)


# ---------------------------------------------------------------- parameters

def test_params_validation_and_round_trip(rng):
    p = identity_params([0.3, 0.7], rng.standard_normal((2, 3, 2)))
    q = MMMParams.from_dict(p.to_dict())
    assert np.array_equal(q.M, p.M) and np.array_equal(q.pi, p.pi)
    with pytest.raises(ShapeError):
        MMMParams([1.0], np.zeros((2, 3, 2)), np.zeros((2, 2, 2)), np.zeros((2, 3, 3)))
    swapped = p.permuted([1, 0])
    assert np.array_equal(swapped.M[0], p.M[1])


# ---------------------------------------------------------------- initialisation

def test_kmeanspp_single_cluster(rng):
    ds, _ = generate(benchmark_config(50, seed=1))
    p = init_kmeanspp(ds, 1, rng)
    assert np.allclose(p.M[0], latent_init_view(ds).mean(axis=0))
    assert p.pi.tolist() == [1.0]
    assert np.array_equal(p.Phi[0], np.eye(3)) and np.array_equal(p.Sigma[0], np.eye(4))


def test_kmeanspp_recovers_partition(rng):
    ds, truth = generate(benchmark_config(200, seed=2))
    p = init_kmeanspp(ds, 2, rng)
    view = vec(latent_init_view(ds))
    centers = vec(p.M)
    labels = np.argmin(((view[:, None] - centers[None]) ** 2).sum(-1), axis=1)
    assert ari(truth.labels, labels) >= 0.5


def test_kmeanspp_floors_weights(rng):
    ds = continuous_dataset(np.ones((10, 2, 2)))
    p = init_kmeanspp(ds, 2, rng)
    # the empty cluster is lifted to the floor 1/(10K) before renormalising
    assert p.pi.min() == pytest.approx((1 / 20) / (1 + 1 / 20))
    assert p.pi.sum() == pytest.approx(1.0)


def test_init_random(rng):
    Y = np.arange(24.0).reshape(6, 2, 2)
    ds = continuous_dataset(Y)
    p = init_random(ds, 6, rng)
    got = sorted(vec(p.M).tolist())
    assert got == sorted(vec(Y).tolist())
    assert np.allclose(p.pi, 1 / 6)
    a = init_random(ds, 3, np.random.default_rng(4))
    b = init_random(ds, 3, np.random.default_rng(4))
    assert np.array_equal(a.M, b.M)


def test_init_rejects_too_many_clusters(rng):
    ds = continuous_dataset(np.zeros((3, 1, 1)))
    for init in (init_kmeanspp, init_random):
        with pytest.raises(ValidationError):
            init(ds, 4, rng)


# ---------------------------------------------------------------- E-step

def test_single_cluster_responsibilities():
    ds, p = random_mixed(0, K=1)
    p = MMMParams([1.0], p.M, p.Phi, p.Sigma)
    stats = e_step(p, ds, FAST_MCMC, seed=3)
    assert np.all(stats.tau == 1.0)


def test_scalar_bayes_rule():
    ds = continuous_dataset(np.zeros((1, 1, 1)))
    p = identity_params([0.5, 0.5], [[[0.0]], [[3.0]]])
    stats = e_step(p, ds)
    expected = norm.pdf(0) / (norm.pdf(0) + norm.pdf(3))
    assert expected == pytest.approx(0.9889, abs=2e-4)
    assert stats.tau[0, 0] == pytest.approx(expected, abs=1e-12)


def test_continuous_estep_is_closed_form(rng):
    ds, _ = two_blob_continuous(rng, n=40, J=3, T=2)
    p = MMMParams([0.4, 0.6], rng.standard_normal((2, 3, 2)),
                  np.stack([random_spd(rng, 2) for _ in range(2)]),
                  np.stack([random_spd(rng, 3) for _ in range(2)]))
    stats = e_step(p, ds, seed=1)
    log_q = np.stack([np.log(p.pi[k]) + matnorm_logpdf(ds.values, p.cluster(k)) for k in range(2)], 1)
    ref = np.exp(log_q - log_q.max(1, keepdims=True))
    ref /= ref.sum(1, keepdims=True)
    assert np.allclose(stats.tau, ref, atol=1e-12)
    assert stats.Sb.shape == (40, 2, 0, 0) and stats.D.shape == (40, 2, 0, 0)
    assert np.allclose(stats.C, 0) and np.allclose(stats.A, 0)


def test_observed_loglik_single_unit():
    rng = np.random.default_rng(1)
    p = MMMParams([1.0], rng.standard_normal((1, 2, 3)), random_spd(rng, 3)[None], random_spd(rng, 2)[None])
    Z = rng.standard_normal((1, 2, 3))
    stats = e_step(p, continuous_dataset(Z))
    assert observed_loglik(stats) == pytest.approx(matnorm_logpdf(Z[0], p.cluster(0)), abs=1e-12)


def test_observed_loglik_doubles_with_duplicates(rng):
    ds, _ = two_blob_continuous(rng, n=20)
    p = identity_params([0.5, 0.5], [np.zeros((2, 2)), 4 * np.ones((2, 2))])
    once = observed_loglik(e_step(p, ds))
    twice = observed_loglik(e_step(p, continuous_dataset(np.concatenate([ds.values, ds.values]))))
    assert twice == pytest.approx(2 * once, rel=1e-12)


@settings(max_examples=15)
@given(st.integers(0, 2**32 - 1))
def test_estep_invariants(seed):
    ds, p = random_mixed(seed)
    stats = e_step(p, ds, FAST_MCMC, seed=seed)
    assert np.allclose(stats.tau.sum(axis=1), 1.0, atol=1e-10)
    assert np.all((stats.tau >= 0) & (stats.tau <= 1))
    for name in ("D", "B", "C", "A"):
        X = getattr(stats, name)
        assert np.allclose(X, np.swapaxes(X, -1, -2), atol=1e-8), name
    # categorical posterior means respect the observed codes
    data = LatentData(ds)
    mb = vec(stats.Mb)
    assert np.all((mb > data.lower[:, None]) & (mb <= data.upper[:, None]))


def test_estep_reproducible_across_threads():
    ds, p = random_mixed(5, N=8, K=3)
    a = e_step(p, ds, FAST_MCMC, seed=9, key=(0, 2), threads=1)
    b = e_step(p, ds, FAST_MCMC, seed=9, key=(0, 2), threads=3)
    assert np.array_equal(a.tau, b.tau) and np.array_equal(a.Mg, b.Mg)


def test_estep_units_independent_of_batch():
    ds, p = random_mixed(6, N=8)
    full = e_step(p, ds, FAST_MCMC, seed=2)
    # unit 0 sees the same stream whether or not the others are present
    head = e_step(p, ds.subset([0]), FAST_MCMC, seed=2)
    assert np.allclose(head.log_q[0], full.log_q[0], atol=1e-12)


def test_contractions_against_loops(rng):
    O, T = 2, 3
    Z = rng.standard_normal((50, O, T))
    S = np.mean(vec(Z)[:, :, None] * vec(Z)[:, None, :], axis=0)
    W, V = random_spd(rng, T), random_spd(rng, O)
    D = np.mean([z @ W @ z.T for z in Z], axis=0)
    C = np.mean([z.T @ V @ z for z in Z], axis=0)
    assert np.allclose(contract_time(S, W, O, T), D, atol=1e-12)
    assert np.allclose(contract_rows(S, V, O, T), C, atol=1e-12)


@pytest.mark.filterwarnings("ignore:overflow")
def test_unit_with_vanishing_scores_is_reported():
    ds = continuous_dataset(np.full((1, 1, 1), 1e200))
    p = identity_params([1.0], [[[0.0]]])
    with pytest.raises(NumericalError) as info:
        e_step(p, ds)
    assert info.value.unit == 0


# ---------------------------------------------------------------- M-step

def test_mstep_uniform_weights(rng):
    ds, p = random_mixed(1, N=10, K=3)
    stats = e_step(p, ds, FAST_MCMC, seed=0)
    stats.tau = np.full_like(stats.tau, 1 / 3)
    new = m_step(stats, ds, p)
    assert np.allclose(new.pi, 1 / 3)


def test_mstep_single_cluster_closed_form(rng):
    Y = rng.standard_normal((30, 3, 2)) + np.arange(6.0).reshape(3, 2)
    ds = continuous_dataset(Y)
    p = identity_params([1.0], np.zeros((1, 3, 2)))
    new = m_step(e_step(p, ds), ds, p)
    M = Y.mean(axis=0)
    R = Y - M
    Sigma = np.einsum("ijt,ilt->jl", R, R) / (30 * 2)
    Phi = np.einsum("ijt,jl,ils->ts", R, np.linalg.inv(Sigma), R) / (30 * 3)
    assert np.allclose(new.M[0], M, atol=1e-12)
    # Sigma carries the scale removed from Phi by the determinant constraint
    c = np.linalg.det(Phi) ** (1 / 2)
    assert np.allclose(new.Sigma[0], c * Sigma, atol=1e-12)
    assert np.allclose(np.kron(new.Phi[0], new.Sigma[0]), np.kron(Phi, Sigma), atol=1e-12)


@settings(max_examples=15)
@given(st.integers(0, 2**32 - 1))
def test_mstep_invariants(seed):
    ds, p = random_mixed(seed, N=12)
    stats = e_step(p, ds, FAST_MCMC, seed=seed)
    stats.tau = np.full_like(stats.tau, 0.5)
    new = m_step(stats, ds, p)
    assert new.pi.sum() == pytest.approx(1.0, abs=1e-12)
    for k in range(new.K):
        assert abs(np.linalg.det(new.Phi[k]) - 1.0) <= 1e-8
        assert np.allclose(new.Phi[k], new.Phi[k].T, atol=1e-10)
        assert np.allclose(new.Sigma[k], new.Sigma[k].T, atol=1e-10)
        assert np.all(np.linalg.eigvalsh(new.Sigma[k]) > 0)


def test_mstep_degenerate_cluster(rng):
    ds, _ = two_blob_continuous(rng, n=30)
    p = identity_params([0.5, 0.5], [np.zeros((2, 2)), 1e3 * np.ones((2, 2))])
    with pytest.raises(DegenerateClusterError) as info:
        m_step(e_step(p, ds), ds, p)
    assert info.value.cluster == 1


# ---------------------------------------------------------------- convergence and driver

def test_check_convergence_examples():
    assert check_convergence([5.0] * 6, eps=1e-12)
    assert not check_convergence([100.0, 100.0, 100.0, 200.0], w1=1, w2=3)
    assert not check_convergence([1.0] * 5)


def test_check_convergence_formula():
    h = [-10.0, -9.0, -8.0, -7.99, -7.98, -7.985]
    recent, before = np.mean(h[-3:]), np.mean(h[:3])
    assert check_convergence(h, eps=1.0) == (abs((recent - before) / recent) < 1.0)
    assert not check_convergence(h, eps=1e-3)


def test_multistart_retries_then_fails():
    view = np.random.default_rng(0).standard_normal((10, 2, 2))
    calls = []

    def flaky(init, run_id):
        calls.append(run_id)
        if len(calls) == 1:
            raise DegenerateClusterError(0, 0.1)
        return init, None, [float(run_id)], True, None

    best = multistart(view, 2, RunConfig(), 0, flaky)
    assert calls == [0, 1] and best[2] == [1.0]

    def broken(init, run_id):
        raise DegenerateClusterError(1, 0.0)

    with pytest.raises(FitFailedError):
        multistart(view, 2, RunConfig(em=EMConfig(retries=3)), 0, broken)


def test_multistart_keeps_best_random_start():
    view = np.random.default_rng(0).standard_normal((10, 2, 2))
    cfg = RunConfig(em=EMConfig(init="random", restarts=4, retries=0))
    best = multistart(view, 2, cfg, 0, lambda init, run_id: (init, None, [-abs(run_id - 2.0)], True, None))
    assert best[2] == [0.0]


def test_fit_separated_continuous_clusters():
    rng = np.random.default_rng(21)
    ds, labels = two_blob_continuous(rng, n=300, J=2, T=2, sep=4.0)
    res = fit(ds, 2, RunConfig(seed=1))
    assert ari(labels, res.assignments) >= 0.95
    assert res.converged
    assert np.array_equal(res.assignments, np.argmax(res.tau, axis=1))


def test_fit_single_cluster_converges_quickly(rng):
    ds, _ = two_blob_continuous(rng, n=100, sep=1.0)
    res = fit(ds, 1, RunConfig(em=EMConfig(w1=1, w2=1)))
    assert res.converged and res.iterations <= 3


def test_fit_mixed_is_deterministic():
    ds, _ = generate(benchmark_config(40, seed=3))
    cfg = fast_config(seed=4, max_iter=4)
    a, b = fit(ds, 2, cfg), fit(ds, 2, cfg)
    assert a.loglik_history == b.loglik_history
    assert np.array_equal(a.params.M, b.params.M) and np.array_equal(a.tau, b.tau)
    assert a.bic == b.bic and a.iterations == b.iterations


def test_fit_mixed_keeps_constraints():
    ds, _ = generate(benchmark_config(60, seed=5))
    res = fit(ds, 2, fast_config(seed=0, max_iter=5), trace=True)
    assert len(res.trace) == res.iterations
    for params, stats in res.trace[1:]:
        assert np.allclose(np.linalg.det(params.Phi), 1.0, atol=1e-8)
        assert np.allclose(stats.tau.sum(1), 1.0, atol=1e-10)


def test_fit_rejects_large_k():
    ds = continuous_dataset(np.zeros((2, 1, 1)))
    with pytest.raises(ValidationError):
        fit(ds, 3)
