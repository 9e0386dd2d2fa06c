"""The compiled kernels and their NumPy fallback must agree."""

import numpy as np
import pytest

from setkd import _fallback, _kernels
from setkd.oracle import random_cost

core = pytest.importorskip("setkd._core")


def _boxes(rng, n):
    return np.concatenate([rng.uniform(0.1, 0.9, (n, 2)), rng.uniform(0.05, 0.5, (n, 2))], axis=1)


def test_selection_prefers_compiled():
    assert _kernels.COMPILED


def test_solve_identical():
    rng = np.random.default_rng(0)
    for _ in range(500):
        cost = random_cost(rng, 9)
        a, ta = core.solve(cost)
        b, tb = _fallback.solve(cost)
        assert np.array_equal(a, b) and ta == tb


@pytest.mark.parametrize("impl", [core, _fallback])
def test_solve_rejects_non_finite(impl):
    with pytest.raises(ValueError):
        impl.solve(np.array([[0.0, np.nan]]))


def test_box_kernels_match():
    rng = np.random.default_rng(1)
    p, t = _boxes(rng, 7), _boxes(rng, 5)
    np.testing.assert_allclose(core.box_cost_matrix(p, t, 5.0, 2.0), _fallback.box_cost_matrix(p, t, 5.0, 2.0),
                               rtol=0, atol=1e-13)
    la, ga = core.box_loss_grad(p[:5], t, 5.0, 2.0)
    lb, gb = _fallback.box_loss_grad(p[:5], t, 5.0, 2.0)
    assert abs(la - lb) <= 1e-12
    np.testing.assert_allclose(ga, gb, rtol=0, atol=1e-12)


@pytest.mark.parametrize("focal", [False, True])
def test_padded_cost_match(focal):
    rng = np.random.default_rng(2)
    probs = rng.dirichlet(np.ones(4), 8)
    boxes, tb = _boxes(rng, 8), _boxes(rng, 3)
    tc = np.array([0, 2, 1])
    np.testing.assert_allclose(core.padded_cost(probs, boxes, tc, tb, 1.0, 5.0, 2.0, focal),
                               _fallback.padded_cost(probs, boxes, tc, tb, 1.0, 5.0, 2.0, focal), rtol=0, atol=1e-13)


@pytest.mark.parametrize("use_cls, use_box", [(True, True), (True, False), (False, True)])
def test_set_loss_match(use_cls, use_box):
    rng = np.random.default_rng(3)
    probs = rng.dirichlet(np.ones(4), 6)
    boxes, tb = _boxes(rng, 6), _boxes(rng, 3)
    soft = rng.dirichlet(np.ones(4), 3)
    assign = np.array([2, -1, 0, -1, 1, -1])
    a = core.set_loss(probs, boxes, assign, soft, tb, 1.0, 5.0, 2.0, use_cls, use_box)
    b = _fallback.set_loss(probs, boxes, assign, soft, tb, 1.0, 5.0, 2.0, use_cls, use_box)
    assert abs(a[0] - b[0]) <= 1e-12
    for x, y in zip(a[1:], b[1:]):
        np.testing.assert_allclose(x, y, rtol=0, atol=1e-12)


def test_attention_match():
    rng = np.random.default_rng(4)
    scores = rng.normal(size=(2, 5, 64))
    box = rng.uniform(0.1, 0.9, (2, 5, 4))
    ys, xs = np.meshgrid((np.arange(8) + 0.5) / 8, (np.arange(8) + 0.5) / 8, indexing="ij")
    cx, cy = xs.ravel(), ys.ravel()
    a = core.attention(scores, box, cx, cy, 0.5, 2.0)
    b = _fallback.attention(scores, box, cx, cy, 0.5, 2.0)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-14)
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-12)
    datt = rng.normal(size=a.shape)
    for x, y in zip(core.attention_backward(a, datt, box, cx, cy, 2.0),
                    _fallback.attention_backward(a, datt, box, cx, cy, 2.0)):
        np.testing.assert_allclose(x, y, rtol=0, atol=1e-12)


def test_pure_python_switch(tmp_path):
    import os
    import subprocess
    import sys

    code = ("from setkd import _kernels; from setkd.oracle import run_oracle_check; "
            "assert not _kernels.COMPILED; assert run_oracle_check(100, 6, seed=1).passed")
    env = dict(os.environ, SETKD_PURE_PYTHON="1")
    subprocess.run([sys.executable, "-c", code], check=True, env=env, cwd=tmp_path)
