import numpy as np
import pytest

from conftest import continuous_dataset, two_blob_continuous
from mmm.config import EMConfig, RunConfig
from mmm.em import fit
from mmm.mmn import fit_mmn
from mmm.selection import ari
from mmm.simulate import generate, benchmark_config


def assert_same_trajectory(a, b, tol=1e-10):
    assert len(a.trace) == len(b.trace)
    for (pa, _), (pb, _) in zip(a.trace, b.trace):
        for name in ("pi", "M", "Phi", "Sigma"):
            assert np.max(np.abs(getattr(pa, name) - getattr(pb, name))) <= tol, name
    assert np.allclose(a.loglik_history, b.loglik_history, rtol=0, atol=1e-8)


@pytest.mark.parametrize("init", ["kmeanspp", "random"])
def test_reduction_on_continuous_data(init):
    rng = np.random.default_rng(3)
    ds, _ = two_blob_continuous(rng, n=120, J=3, T=2, sep=2.0)
    cfg = RunConfig(em=EMConfig(init=init, restarts=2, max_iter=30), seed=11)
    assert_same_trajectory(fit(ds, 2, cfg, trace=True), fit_mmn(ds, 2, cfg, trace=True))


def test_mmn_monotone_loglik():
    ds, _ = generate(benchmark_config(200, seed=1))
    res = fit_mmn(ds, 2, RunConfig(em=EMConfig(eps=1e-9, max_iter=60)))
    steps = np.diff(res.loglik_history)
    assert np.all(steps >= -1e-8)


def test_mmn_separated_clusters():
    ds, labels = two_blob_continuous(np.random.default_rng(4), n=200)
    res = fit_mmn(ds, 2)
    assert ari(labels, res.assignments) >= 0.95
    assert np.allclose(np.linalg.det(res.params.Phi), 1.0, atol=1e-8)


def test_mmn_uses_raw_values():
    # counts enter as-is, so huge counts dominate the distance
    ds, _ = generate(benchmark_config(30, seed=2))
    res = fit_mmn(ds, 1)
    assert np.allclose(res.params.M[0], ds.values.mean(axis=0))
