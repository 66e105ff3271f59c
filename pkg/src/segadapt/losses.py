"""Adaptation objectives that need no source data and no target labels.

Two ingredients. First, a consistency penalty that keeps each layer's affine
pair (gamma, beta) near its source snapshot, weighted per channel by how
transferable that channel looks: channels whose normalised-mean divergence

    d_c = | mu_src_c / sqrt(var_src_c + eps) - mu_batch_c / sqrt(var_batch_c + eps) |

is small are considered domain-shareable and get weight alpha_c above the
mean, computed as a softmax-free normalisation of 1/(1+d). Optionally each
channel is further damped by exp(-gamma_src), reflecting that a large scaling
factor amplifies whatever error the affine pair carries downstream.

Second, the self-entropy of the prediction map, which sharpens decisions on
unlabelled data when annealed from a high weight down to zero.
"""

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError


def channel_divergence(mu_src, var_src, mu_batch, var_batch, eps=1e-6):
    """Per-channel divergence between source and batch statistics, computed
    on variance-normalised means. Returns a float64 (C,) vector. Constant
    with respect to everything differentiable: inputs are plain arrays."""
    mu_s = np.asarray(mu_src, dtype=np.float64).reshape(-1)
    va_s = np.asarray(var_src, dtype=np.float64).reshape(-1)
    mu_b = np.asarray(mu_batch, dtype=np.float64).reshape(-1)
    va_b = np.asarray(var_batch, dtype=np.float64).reshape(-1)
    if not (mu_s.shape == va_s.shape == mu_b.shape == va_b.shape):
        raise ShapeError("statistic vectors must share one channel count")
    if eps <= 0.0:
        raise ContractError(f"eps must be positive, got {eps}")
    if (va_s < 0).any() or (va_b < 0).any():
        raise ContractError("variances must be non-negative")
    return np.abs(mu_s / np.sqrt(va_s + eps) - mu_b / np.sqrt(va_b + eps))


def layer_divergence(state):
    """channel_divergence read off a layer after an adapt forward. Uses the
    raw batch statistics, not the blended ones, so the measure tracks what
    the current batch says about the domain gap."""
    if state.batch_mu is None or state.batch_var is None:
        raise ContractError("no batch statistics recorded; run an adapt "
                            "forward first")
    if not state.snapshotted:
        raise ContractError("layer has no source snapshot")
    return channel_divergence(state.mu_src, state.var_src,
                              state.batch_mu, state.batch_var, state.eps)


def transferability_weights(divergences):
    """Map per-layer divergence vectors to per-layer weight vectors.

    Weights are proportional to 1/(1+d) and normalised jointly across all
    layers so they sum to the total channel count; the average weight is
    exactly 1 no matter how channels are spread over layers.
    """
    divs = [np.asarray(d, dtype=np.float64).reshape(-1) for d in divergences]
    total = sum(d.size for d in divs)
    if total == 0:
        raise ContractError("no channels to weight")
    flat = np.concatenate(divs) if divs else np.empty(0)
    if (flat < 0).any():
        raise ContractError("divergences must be non-negative")
    inv = 1.0 / (1.0 + flat)
    alpha = total * inv / inv.sum()
    out = []
    at = 0
    for d in divs:
        out.append(alpha[at:at + d.size].copy())
        at += d.size
    return out


def hbs_loss(states, alphas, scaling_adjust=True, abs_gamma=False):
    """Weighted L1 pull of each layer's affine pair towards its snapshot.

    Per channel the weight is (1 + alpha_c), itself scaled by exp(-gamma_src)
    when ``scaling_adjust`` is on (exp(-|gamma_src|) with ``abs_gamma``, for
    setups where negative scales occur). Returns a scalar tensor; gradients
    reach gamma and beta only, with subgradient 0 at exact ties.
    """
    if len(states) == 0:
        raise ContractError("hbs_loss needs at least one layer")
    if len(alphas) != len(states):
        raise ContractError(f"{len(states)} layers but {len(alphas)} weight "
                            f"vectors")
    total = None
    for state, alpha in zip(states, alphas):
        if not state.snapshotted:
            raise ContractError("hbs_loss requires source snapshots")
        a = np.asarray(alpha, dtype=np.float64).reshape(-1)
        if a.shape != (state.channels,):
            raise ShapeError(f"alpha has shape {a.shape}, layer has "
                             f"{state.channels} channels")
        gs = state.gamma_src.astype(np.float64)
        if scaling_adjust:
            w = np.exp(-np.abs(gs)) if abs_gamma else np.exp(-gs)
        else:
            w = np.ones_like(gs)
        coeff = (1.0 + a) * w
        dt = state.gamma.data.dtype
        gap = T.add(
            T.abs_val(T.sub(state.gamma, _const_vec(gs, dt))),
            T.abs_val(T.sub(state.beta, _const_vec(state.beta_src, dt))))
        term = T.sum_all(T.mul(_const_vec(coeff, dt), gap))
        total = term if total is None else T.add(total, term)
    return total


def _const_vec(values, dtype):
    return T.Tensor(np.asarray(values, dtype=dtype).reshape(1, -1, 1, 1))


def self_entropy_loss(p):
    """Mean per-pixel entropy of a probability map, -(1/BHW) sum p log p,
    with 0 log 0 read as 0. Bounded by [0, log C]."""
    if (p.data < 0).any():
        raise ContractError("probabilities must be non-negative")
    b, _, h, w = p.dims
    return T.scale(T.sum_all(T.mul(p, T.log_t(p))), -1.0 / (b * h * w))


def scaling_gradient_diagnostic(states):
    """Per-channel mean |dL/d(normalised activation)| next to gamma_src.

    Reads the gradient retained on each layer's normalised activation by the
    most recent backward pass; pairs it with the snapshot scale so the
    amplification argument behind the exp(-gamma) damping can be checked
    empirically. Returns one dict per layer.
    """
    out = []
    for i, state in enumerate(states):
        xhat = state.last_normalized
        if xhat is None or xhat.grad is None:
            raise ContractError("no retained gradient on the normalised "
                                "activations; run an adapt forward and a "
                                "backward pass first")
        g = np.abs(xhat.grad.astype(np.float64)).mean(axis=(0, 2, 3))
        gs = (state.gamma_src if state.snapshotted
              else state.gamma.data.reshape(-1)).astype(np.float64)
        out.append({"layer": i, "grad_mag": g, "gamma_src": gs.copy()})
    return out
