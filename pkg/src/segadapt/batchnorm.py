"""Batch normalisation with a source snapshot and decaying-momentum blending.

The idea: the low-order statistics (per-channel mean and variance) are what a
domain shift moves, while the learned affine pair stays meaningful across
domains. During adaptation each layer therefore normalises with a blend of
the frozen source statistics and the statistics of the current target batch,

    mu_t  = (1 - eta_t) * mu_batch  + eta_t * mu_source
    var_t = (1 - eta_t) * var_batch + eta_t * var_source

where the blend weight decays exponentially with the iteration counter,
eta_t = eta0 * exp(-t / tau). Early iterations lean on the source statistics
for stability; late iterations normalise almost purely with target batch
statistics. Gradients flow through the batch component only; the snapshot is
a constant.

Variances are biased (divisor B*H*W) everywhere, matching the running-stat
update used in source training. eps defaults to 1e-6.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError

MODES = ("source-train", "source-eval", "adapt")


@dataclass
class EMDSchedule:
    """Exponential momentum decay: eta_t = eta0 * exp(-t / tau), clamped to
    [0, 1]. tau is measured in adaptation iterations."""

    eta0: float = 1.0
    tau: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.eta0 <= 1.0:
            raise ContractError(f"eta0 must lie in [0, 1], got {self.eta0}")
        if self.tau <= 0.0:
            raise ContractError(f"tau must be positive, got {self.tau}")


def emd_momentum(t, sched):
    if t < 0:
        raise ContractError(f"iteration counter must be >= 0, got {t}")
    eta = sched.eta0 * math.exp(-t / sched.tau)
    return min(max(eta, 0.0), 1.0)


class BNState:
    """Per-layer normalisation state.

    Running statistics (mu_run, var_run) are tracked during source training
    only. snapshot_source() freezes them, together with the affine pair, into
    the *_src vectors that adaptation blends against and regularises towards.
    The iteration counter t is stepped by the engine, once per optimiser
    step, never by the forward pass itself.

    batch_mu / batch_var / mu_live / var_live / last_normalized are
    diagnostics refreshed by the adapt forward; they are never serialised.
    """

    def __init__(self, channels, eps=1e-6, dtype=np.float32):
        if channels < 1:
            raise ContractError(f"channels must be >= 1, got {channels}")
        if eps <= 0.0:
            raise ContractError(f"eps must be positive, got {eps}")
        self.channels = int(channels)
        self.eps = float(eps)
        self.dtype = np.dtype(dtype)
        self.gamma = T.Tensor(np.ones((1, channels, 1, 1), dtype=self.dtype),
                              requires_grad=True)
        self.beta = T.Tensor(np.zeros((1, channels, 1, 1), dtype=self.dtype),
                             requires_grad=True)
        self.mu_run = np.zeros(channels, dtype=self.dtype)
        self.var_run = np.ones(channels, dtype=self.dtype)
        self.mu_src = None
        self.var_src = None
        self.gamma_src = None
        self.beta_src = None
        self.t = 0
        self.mode = "source-train"
        self.batch_mu = None
        self.batch_var = None
        self.mu_live = None
        self.var_live = None
        self.last_normalized = None

    @property
    def snapshotted(self):
        return self.mu_src is not None

    def _check_input(self, x):
        if x.dims[1] != self.channels:
            raise ShapeError(f"input has {x.dims[1]} channels, layer expects "
                             f"{self.channels}")


def snapshot_source(state):
    """Freeze running statistics and the affine pair as the source reference,
    then switch the layer into adapt mode. One-shot by design: the snapshot
    is the anchor for everything downstream, so overwriting it is an error.
    """
    if state.snapshotted:
        raise ContractError("source statistics were already snapshotted; "
                            "a second snapshot would overwrite the anchor")
    state.mu_src = state.mu_run.copy()
    state.var_src = state.var_run.copy()
    state.gamma_src = state.gamma.data.reshape(-1).copy()
    state.beta_src = state.beta.data.reshape(-1).copy()
    state.mode = "adapt"


def _vec(values, dtype):
    return T.Tensor(np.asarray(values, dtype=dtype).reshape(1, -1, 1, 1))


def _affine(xhat, state):
    return T.add(T.mul(xhat, state.gamma), state.beta)


def bn_forward_source_train(x, state, eta_track=0.1):
    """Normalise with current batch statistics (gradients flow through them)
    and fold the batch statistics into the running estimates."""
    if state.mode != "source-train":
        raise ContractError(f"train forward requires source-train mode, "
                            f"layer is in {state.mode!r}")
    state._check_input(x)
    if x.dims[0] < 2:
        raise ContractError(f"batch statistics need batch >= 2, got {x.dims[0]}")
    if not 0.0 <= eta_track <= 1.0:
        raise ContractError(f"tracking momentum must lie in [0,1], got {eta_track}")

    mu_b = T.channel_mean(x)
    diff = T.sub(x, mu_b)
    var_b = T.channel_mean(T.mul(diff, diff))
    inv = T.power(T.add_scalar(var_b, state.eps), -0.5)
    xhat = T.mul(diff, inv)

    mu64 = mu_b.data.astype(np.float64).reshape(-1)
    var64 = var_b.data.astype(np.float64).reshape(-1)
    state.mu_run = ((1.0 - eta_track) * state.mu_run.astype(np.float64)
                    + eta_track * mu64).astype(state.dtype)
    state.var_run = ((1.0 - eta_track) * state.var_run.astype(np.float64)
                     + eta_track * var64).astype(state.dtype)
    state.batch_mu = mu64
    state.batch_var = var64
    return _affine(xhat, state)


def bn_forward_adapt(x, state, eta_t):
    """Normalise with source statistics blended into the batch statistics.

    The snapshot side of the blend is constant; only the batch side carries
    gradient. Running estimates are left untouched so that an adaptation run
    whose optimiser never moves cannot perturb the checkpoint.
    """
    if state.mode != "adapt":
        raise ContractError(f"adapt forward requires adapt mode, layer is "
                            f"in {state.mode!r}")
    if not state.snapshotted:
        raise ContractError("adapt forward requires a source snapshot")
    state._check_input(x)
    if x.dims[0] < 2:
        raise ContractError(f"batch statistics need batch >= 2, got {x.dims[0]}")
    if not 0.0 <= eta_t <= 1.0:
        raise ContractError(f"blend momentum must lie in [0,1], got {eta_t}")

    mu_b = T.channel_mean(x)
    diff_b = T.sub(x, mu_b)
    var_b = T.channel_mean(T.mul(diff_b, diff_b))

    mu_bar = T.add(T.scale(mu_b, 1.0 - eta_t),
                   _vec(eta_t * state.mu_src.astype(np.float64), x.dtype))
    var_bar = T.add(T.scale(var_b, 1.0 - eta_t),
                    _vec(eta_t * state.var_src.astype(np.float64), x.dtype))
    inv = T.power(T.add_scalar(var_bar, state.eps), -0.5)
    xhat = T.mul(T.sub(x, mu_bar), inv)

    state.batch_mu = mu_b.data.astype(np.float64).reshape(-1)
    state.batch_var = var_b.data.astype(np.float64).reshape(-1)
    state.mu_live = mu_bar.data.astype(np.float64).reshape(-1)
    state.var_live = var_bar.data.astype(np.float64).reshape(-1)
    state.last_normalized = xhat
    return _affine(xhat, state)


def bn_forward_eval(x, state, stats="run"):
    """Normalise with stored statistics. Pure: no mutation, any batch size,
    callable in any mode. stats picks the running estimates ("run") or the
    source snapshot ("src")."""
    state._check_input(x)
    if stats == "run":
        mu, var = state.mu_run, state.var_run
    elif stats == "src":
        if not state.snapshotted:
            raise ContractError("no source snapshot to evaluate with")
        mu, var = state.mu_src, state.var_src
    else:
        raise ContractError(f"stats must be 'run' or 'src', got {stats!r}")
    mu64 = mu.astype(np.float64)
    scale = 1.0 / np.sqrt(var.astype(np.float64) + state.eps)
    xhat = T.mul(T.sub(x, _vec(mu64, x.dtype)), _vec(scale, x.dtype))
    return _affine(xhat, state)


STATE_VECTOR_NAMES = ("mu_run", "var_run", "gamma", "beta",
                      "mu_src", "var_src", "gamma_src", "beta_src")


def state_vectors(state):
    """The eight per-channel vectors that define a layer, as (C,) arrays in
    storage dtype. Snapshot slots fall back to the live values when no
    snapshot exists yet, so the on-disk layout is fixed."""
    return {
        "mu_run": state.mu_run.copy(),
        "var_run": state.var_run.copy(),
        "gamma": state.gamma.data.reshape(-1).copy(),
        "beta": state.beta.data.reshape(-1).copy(),
        "mu_src": (state.mu_src if state.snapshotted else state.mu_run).copy(),
        "var_src": (state.var_src if state.snapshotted else state.var_run).copy(),
        "gamma_src": (state.gamma_src if state.snapshotted
                      else state.gamma.data.reshape(-1)).copy(),
        "beta_src": (state.beta_src if state.snapshotted
                     else state.beta.data.reshape(-1)).copy(),
    }


def load_state_vectors(state, vectors, snapshotted):
    for name in STATE_VECTOR_NAMES:
        if name not in vectors:
            raise ContractError(f"missing statistic vector {name!r}")
        if vectors[name].shape != (state.channels,):
            raise ShapeError(f"{name} has shape {vectors[name].shape}, "
                             f"expected ({state.channels},)")
    cast = lambda v: np.asarray(v, dtype=state.dtype)
    state.mu_run = cast(vectors["mu_run"]).copy()
    state.var_run = cast(vectors["var_run"]).copy()
    state.gamma.data[...] = cast(vectors["gamma"]).reshape(1, -1, 1, 1)
    state.beta.data[...] = cast(vectors["beta"]).reshape(1, -1, 1, 1)
    if snapshotted:
        state.mu_src = cast(vectors["mu_src"]).copy()
        state.var_src = cast(vectors["var_src"]).copy()
        state.gamma_src = cast(vectors["gamma_src"]).copy()
        state.beta_src = cast(vectors["beta_src"]).copy()
    else:
        state.mu_src = state.var_src = None
        state.gamma_src = state.beta_src = None
