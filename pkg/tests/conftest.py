"""Shared helpers: float64 finite-difference gradient checking.

The convention for gradient tests: build the same scalar loss twice, once
through the tape on float64 tensors and once as a plain float function of
numpy arrays, then compare the tape's gradients against central differences
with step 1e-3.
"""

import numpy as np
import pytest

from segadapt import tensor as T


def rng(seed=0):
    return np.random.default_rng(seed)


def numeric_grads(build, arrays, h=1e-3):
    """Central-difference gradients of build(arrays) -> float, elementwise
    for every array in the list. Mutates entries in place and restores."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gf = a.ravel(), g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = build(arrays)
            flat[i] = orig - h
            lm = build(arrays)
            flat[i] = orig
            gf[i] = (lp - lm) / (2.0 * h)
        grads.append(g)
    return grads


def rel_err(a, b):
    scale = max(np.abs(b).max(), 1e-8)
    return np.abs(a - b).max() / scale


def check_gradients(tape_build, arrays, rel_tol=1e-4, h=1e-3):
    """tape_build(tensors) -> scalar Tensor. ``arrays`` are float64 and
    become requires_grad leaves. Asserts every analytic gradient matches the
    finite-difference one within rel_tol."""
    tensors = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = tape_build(tensors)
    T.backward(loss)

    def numeric(arrs):
        with T.no_grad():
            return tape_build([T.Tensor(a) for a in arrs]).item()

    expected = numeric_grads(numeric, [a.copy() for a in arrays], h=h)
    for i, (t, e) in enumerate(zip(tensors, expected)):
        assert t.grad is not None, f"input {i} got no gradient"
        err = rel_err(t.grad.astype(np.float64), e)
        assert err < rel_tol, f"input {i}: relative gradient error {err:.3e}"


class _BranchRecorder:
    """Captures the relu sign pattern and maxpool argmax pattern of one
    forward pass.  Central differences are a gradient oracle only while the
    stencil stays inside a single linear region of every branch op, so FD
    measurements whose endpoints land in a different region than the base
    point must be discarded rather than compared."""

    def __init__(self):
        self.pattern = []
        self._relu, self._pool = T.relu, T.maxpool2x

    def __enter__(self):
        def relu(x):
            self.pattern.append(np.signbit(np.asarray(x.data)).tobytes())
            return self._relu(x)

        def pool(x):
            d = np.asarray(x.data)
            B, C, H, W = d.shape
            w = d.reshape(B, C, H // 2, 2, W // 2, 2)
            w = w.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
            self.pattern.append(np.argmax(w, axis=-1).astype(np.uint8).tobytes())
            return self._pool(x)

        T.relu, T.maxpool2x = relu, pool
        return self

    def __exit__(self, *exc):
        T.relu, T.maxpool2x = self._relu, self._pool

    def take(self):
        pat, self.pattern = self.pattern, []
        return pat


def certified_fd(loss_fn, params, h):
    """Per-element central differences for every tensor in ``params``, with a
    boolean certificate telling whether both stencil endpoints kept the exact
    relu/maxpool branch pattern of the unperturbed point. Only certified
    entries are valid oracle values at this step size."""
    with _BranchRecorder() as rec:
        loss_fn()
        base = rec.take()
        out = []
        for p in params:
            fd = np.zeros_like(p.data)
            cert = np.zeros(p.data.shape, dtype=bool)
            flat, fdf, cf = p.data.ravel(), fd.ravel(), cert.ravel()
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                lp = loss_fn()
                okp = rec.take() == base
                flat[i] = orig - h
                lm = loss_fn()
                okm = rec.take() == base
                flat[i] = orig
                fdf[i] = (lp - lm) / (2.0 * h)
                cf[i] = okp and okm
            out.append((fd, cert))
    return out


@pytest.fixture
def f64():
    def make(shape, seed=0, low=-1.0, high=1.0):
        return rng(seed).uniform(low, high, size=shape).astype(np.float64)
    return make
