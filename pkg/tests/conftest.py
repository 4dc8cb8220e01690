"""Shared helpers and fixtures for the test suite."""

import numpy as np
import pytest

from crosscoord.tensor import Tape


def fd_check(loss_fn, params, h=1e-5, rtol=1e-4):
    """Compare tape gradients of a scalar loss against central differences.

    loss_fn rebuilds the loss from the given (name, Tensor) params on each
    call.  Every parameter element is perturbed by +-h; the analytic gradient
    must satisfy |a - fd| <= rtol * (1 + |fd|).  Returns the worst error.
    """
    for _, p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in params}

    worst = 0.0
    for name, p in params:
        flat = p.data.reshape(-1)   # view, perturbs in place
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().data)
            flat[i] = orig - h
            down = float(loss_fn().data)
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            err = abs(a_flat[i] - fd) / (1.0 + abs(fd))
            worst = max(worst, err)
    assert worst <= rtol, f"max relative gradient error {worst:.3e} exceeds {rtol}"
    return worst


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small mixed-quality demonstration corpus shared by offline/CLI tests."""
    from crosscoord.config import CorpusConfig, corpus_scenario
    from crosscoord.offline import generate_corpus

    path = tmp_path_factory.mktemp("corpus") / "tiny.csv"
    scenario = corpus_scenario()
    generate_corpus(path, scenario, CorpusConfig(n_episodes=16), seed=11)
    return path, scenario
