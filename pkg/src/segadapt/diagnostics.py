"""Offline analyses of a checkpoint pair: channel pruning by snapshot scale,
linear-probe domain discrepancy, and the scaling-amplification check."""

import numpy as np
from scipy.stats import spearmanr

from . import tensor as T
from .engine import bottleneck_features, evaluate
from .errors import ContractError
from .losses import scaling_gradient_diagnostic, self_entropy_loss
from .metrics import proxy_a_distance
from .network import prune_channels


def prune_study(net, eval_dataset, fraction=10.0, batch_size=12):
    """Foreground DSC before and after zeroing the smallest- and largest-
    scale channels. The net must carry a source snapshot."""
    base = evaluate(net, eval_dataset, mode="batch", batch_size=batch_size,
                    with_hausdorff=False)["dice_foreground"]
    rows = [{"order": "none", "fraction": 0.0, "dice_foreground": base,
             "drop": 0.0}]
    for order in ("smallest", "largest"):
        pruned = prune_channels(net, fraction, order=order)
        d = evaluate(pruned, eval_dataset, mode="batch",
                     batch_size=batch_size,
                     with_hausdorff=False)["dice_foreground"]
        rows.append({"order": order, "fraction": fraction,
                     "dice_foreground": d, "drop": base - d})
    return rows


def a_distance_study(source_net, adapted_net, source_data, target_data,
                     batch_size=12, seed=0):
    """Bottleneck-feature discrepancy between domains, before and after
    adaptation. Each model extracts with its own inference statistics:
    running estimates for the source model, batch statistics for the
    adapted one."""
    fa = bottleneck_features(source_net, source_data, mode="run",
                             batch_size=batch_size)
    fb = bottleneck_features(source_net, target_data, mode="run",
                             batch_size=batch_size)
    before = proxy_a_distance(fa, fb, seed=seed)
    ga = bottleneck_features(adapted_net, source_data, mode="batch",
                             batch_size=batch_size)
    gb = bottleneck_features(adapted_net, target_data, mode="batch",
                             batch_size=batch_size)
    after = proxy_a_distance(ga, gb, seed=seed)
    return {"before": before, "after": after}


def scaling_gradient_study(net, images, eta_t=0.5):
    """How strongly the objective's gradient hits each normalised activation,
    versus that channel's snapshot scale.

    Runs one adapted forward on ``images`` (a float32 (B,1,H,W) array,
    B >= 2), backprops the self-entropy of the prediction, and reads the
    retained gradients. Returns per-channel rows plus the rank correlation
    between |gamma_src| and gradient magnitude."""
    if net.mode != "adapt":
        raise ContractError("the study needs a snapshotted model")
    p = net.predict(T.Tensor(np.asarray(images, dtype=np.float32)),
                    "adapt", eta_t=eta_t)
    T.backward(self_entropy_loss(p))
    rows = []
    gammas, grads = [], []
    for entry in scaling_gradient_diagnostic(net.bns):
        for ci in range(len(entry["grad_mag"])):
            rows.append({"layer": entry["layer"], "channel": ci,
                         "gamma_src": float(entry["gamma_src"][ci]),
                         "grad_mag": float(entry["grad_mag"][ci])})
            gammas.append(abs(entry["gamma_src"][ci]))
            grads.append(entry["grad_mag"][ci])
    rho = spearmanr(gammas, grads).statistic
    for param in net.parameters():
        param.grad = None
    return {"rows": rows, "spearman_gamma_vs_grad": float(rho)}
