"""Source training and the adaptation loop.

Adaptation is source-free by construction: the entry point takes one model
and one unlabelled target dataset, nothing else. Each iteration runs three
stages on the same forward pass:

  Expectation      forward the batch with blended BN statistics at the
                   current decayed momentum eta_t
  Classification   derive class thresholds, pseudo-labels, and per-pixel
                   memory-consistency weights from that prediction
  Maximization     backprop the weighted objective and take one SGD step

The objective is the affine-consistency pull towards the source snapshot,
plus annealed self-entropy (weight lambda, linearly decayed per epoch), plus
the memory-weighted pseudo-label term (constant weight phi). The keep-ratio
for thresholds anneals upward per epoch; eta_t decays per iteration.

Per-image prediction history is pushed once per epoch, after the last batch
of the epoch, from each image's most recent prediction within it.
"""

import csv
import json
import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import losses as L
from . import selftrain as ST
from . import tensor as T
from .batchnorm import EMDSchedule, emd_momentum
from .errors import ContractError, DataError
from .metrics import dice, hausdorff
from .network import save_checkpoint
from .seeding import CODE_BATCH_ORDER, derive_rng


@dataclass
class AdaptConfig:
    epochs: int = 30
    batch_size: int = 12
    lr: float = 1e-3
    momentum: float = 0.9
    eta0: float = 1.0
    emd_tau: float = 1.0
    lambda_start: float = 10.0
    lambda_end: float = 0.0
    phi: float = 5.0
    keep_start: float = 20.0
    keep_end: float = 80.0
    history_depth: int = 5
    use_se: bool = True
    use_mcsf: bool = True
    use_scaling_adjust: bool = True
    use_adaptive_channels: bool = True
    abs_gamma_weight: bool = False
    prob_clamp: float = 1e-12
    seed: int = 0
    log_channels: bool = True
    dump_history: bool = False

    def variant_name(self):
        """Conventional name for the flag combination, for reports."""
        key = (self.use_se, self.use_mcsf, self.use_scaling_adjust,
               self.use_adaptive_channels)
        return {
            (True, True, True, True): "mcosuda",
            (True, False, True, True): "osuda-lgamma",
            (True, False, False, True): "osuda",
            (True, False, False, False): "osuda-noac",
            (False, False, False, True): "osuda-nose",
        }.get(key, "custom")


class SGD:
    """Plain SGD with heavy-ball momentum. Parameters whose grad is None are
    skipped, so untouched subgraphs stay bit-identical."""

    def __init__(self, params, lr, momentum=0.9):
        if lr <= 0:
            raise ContractError(f"lr must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ContractError(f"momentum must lie in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity = [np.zeros(p.dims) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad.astype(np.float64)
            p.data -= (self.lr * v).astype(p.data.dtype)


def schedule_value(start, end, epoch, total_epochs):
    """Linear ramp from start at epoch 0 to end at epoch == total_epochs.
    A zero-length ramp sits at the end value."""
    if epoch < 0 or total_epochs < 0:
        raise ContractError(f"negative schedule position ({epoch}/{total_epochs})")
    if total_epochs == 0:
        return float(end)
    if epoch > total_epochs:
        raise ContractError(f"epoch {epoch} beyond schedule end {total_epochs}")
    return float(start) + (float(end) - float(start)) * epoch / total_epochs


def _plain_entropy(p):
    """Mean per-pixel entropy of a numpy probability map, off the tape."""
    p64 = np.asarray(p, dtype=np.float64)
    terms = np.where(p64 > 0, p64 * np.log(np.maximum(p64, 1e-300)), 0.0)
    return float(-terms.sum() / (p64.shape[0] * p64.shape[2] * p64.shape[3]))


def _train_batches(n, batch_size, rng):
    """Shuffled index chunks; a trailing chunk smaller than 2 is dropped
    because batch statistics need at least two images."""
    order = rng.permutation(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    return [c for c in chunks if c.size >= 2]


def _eval_batches(n, batch_size):
    """Sequential index chunks covering everything; a trailing singleton is
    merged into the previous chunk so batch-stat inference stays legal."""
    chunks = [np.arange(i, min(i + batch_size, n))
              for i in range(0, n, batch_size)]
    if len(chunks) > 1 and chunks[-1].size < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


# ---------------------------------------------------------------------------
# source training


def train_source(net, dataset, epochs, lr=1e-2, momentum=0.9, batch_size=12,
                 bn_momentum=0.1, seed=0, log=None):
    """Supervised cross-entropy training on labelled source data. Returns the
    per-epoch mean loss list; the net is trained in place."""
    if dataset.masks is None:
        raise DataError("source training needs masks")
    if net.mode != "source-train":
        raise ContractError(f"net is in mode {net.mode!r}, expected source-train")
    n_classes = net.spec.class_count
    if int(dataset.masks.max()) >= n_classes:
        raise DataError(f"mask labels reach {int(dataset.masks.max())}, "
                        f"model has {n_classes} classes")
    opt = SGD(net.parameters(), lr=lr, momentum=momentum)
    history = []
    for epoch in range(epochs):
        rng = derive_rng(seed, CODE_BATCH_ORDER, epoch)
        total, count = 0.0, 0
        for sel in _train_batches(len(dataset.ids), batch_size, rng):
            x = T.Tensor(dataset.images[sel])
            logits = net.forward(x, "train", bn_momentum=bn_momentum)
            loss = T.cross_entropy_pixelwise(logits, dataset.masks[sel, 0])
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            total += loss.item() * sel.size
            count += sel.size
        history.append(total / max(count, 1))
        if log is not None:
            log(f"source epoch {epoch}: ce {history[-1]:.4f}")
    return history


# ---------------------------------------------------------------------------
# adaptation


def adapt(net, dataset, cfg, out_dir=None, val_dataset=None, log=None):
    """Source-free adaptation of ``net`` on unlabelled target images.

    Writes metrics.csv / channels.csv / val_metrics.csv / summary.json and
    the adapted checkpoint under ``out_dir`` when given. Returns a summary
    dict. ``val_dataset`` (labelled) only drives per-epoch diagnostics; it
    never influences the optimisation.
    """
    started = time.time()
    if net.mode != "adapt":
        net.snapshot_source()
    n_classes = net.spec.class_count
    n = len(dataset.ids)
    if n < 2:
        raise DataError(f"adaptation needs at least 2 images, got {n}")

    sched = EMDSchedule(cfg.eta0, cfg.emd_tau)
    history = ST.PredictionHistory(cfg.history_depth)
    opt = SGD(net.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    ramp = max(cfg.epochs - 1, 0)

    metrics_rows = []
    channel_rows = []
    val_rows = []
    clamped_total = 0
    t = 0

    for epoch in range(cfg.epochs):
        lam = schedule_value(cfg.lambda_start, cfg.lambda_end, epoch, ramp)
        keep = schedule_value(cfg.keep_start, cfg.keep_end, epoch, ramp)
        latest = {}
        rng = derive_rng(cfg.seed, CODE_BATCH_ORDER, epoch)
        for sel in _train_batches(n, cfg.batch_size, rng):
            eta_t = emd_momentum(t, sched)

            # Expectation: one adapted forward shared by every stage below.
            x = T.Tensor(dataset.images[sel])
            p = net.predict(x, "adapt", eta_t=eta_t)
            pj = p.data.astype(np.float32)

            # Classification: thresholds, pseudo-labels, memory weights.
            lambdas = ST.class_thresholds(pj, keep)
            labels = ST.pseudo_labels(pj, lambdas)
            psi = np.stack([
                ST.consistency_weight_map(pj[i], history.get(dataset.ids[g]))
                for i, g in enumerate(sel)])

            # Fraction of each class's candidate pool that kept its own
            # label. Ratio reassignment can hand a pixel to another class,
            # so counting all labelled-n pixels against the argmax-n pool
            # would occasionally exceed 1.
            arg = pj.argmax(axis=1)
            kept_frac = []
            for cls in range(n_classes):
                m_n = int((arg == cls).sum())
                own = int((labels[:, cls].astype(bool) & (arg == cls)).sum())
                kept_frac.append(own / m_n if m_n else 0.0)

            # Maximization: weighted objective, one optimiser step.
            if cfg.use_adaptive_channels:
                alphas = L.transferability_weights(
                    [L.layer_divergence(st) for st in net.bns])
            else:
                alphas = [np.ones(st.channels) for st in net.bns]
            loss_hbs = L.hbs_loss(net.bns, alphas,
                                  scaling_adjust=cfg.use_scaling_adjust,
                                  abs_gamma=cfg.abs_gamma_weight)
            total = loss_hbs
            if cfg.use_se:
                loss_se = L.self_entropy_loss(p)
                se_value = loss_se.item()
                total = T.add(total, T.scale(loss_se, lam))
            else:
                se_value = _plain_entropy(pj)
            mcst_value = 0.0
            if cfg.use_mcsf:
                st_stats = {}
                loss_mcst = ST.mcst_loss(p, labels, psi, clamp=cfg.prob_clamp,
                                         stats=st_stats)
                mcst_value = loss_mcst.item()
                clamped_total += st_stats["clamped"]
                total = T.add(total, T.scale(loss_mcst, cfg.phi))

            total_value = total.item()
            if not np.isfinite(total_value):
                dump = {"epoch": epoch, "iter": t, "eta_t": eta_t,
                        "loss_hbs": loss_hbs.item(), "loss_se": se_value,
                        "loss_mcst": mcst_value}
                if out_dir is not None:
                    with open(f"{out_dir}/abort.json", "w") as fh:
                        json.dump(dump, fh, indent=2)
                raise ContractError(f"non-finite loss at iteration {t}: {dump}")

            opt.zero_grad()
            T.backward(total)
            opt.step()
            for st in net.bns:
                st.t += 1

            metrics_rows.append(
                [epoch, t, eta_t, lam, cfg.phi, keep, loss_hbs.item(),
                 se_value, mcst_value, total_value]
                + kept_frac + [float(psi.mean())])
            if cfg.log_channels:
                for li, (st, alpha) in enumerate(zip(net.bns, alphas)):
                    d = L.layer_divergence(st)
                    g_now = st.gamma.data.reshape(-1)
                    for ci in range(st.channels):
                        channel_rows.append(
                            [t, li, ci, float(d[ci]), float(alpha[ci]),
                             float(st.gamma_src[ci]), float(g_now[ci])])

            for i, g in enumerate(sel):
                latest[dataset.ids[g]] = pj[i]
            t += 1

        for image_id, pm in latest.items():
            history.push(image_id, pm, epoch)
            if cfg.dump_history and out_dir is not None:
                hdir = f"{out_dir}/history/{image_id}"
                os.makedirs(hdir, exist_ok=True)
                T.save_tns(f"{hdir}/{epoch}.tns", pm)

        if val_dataset is not None:
            scores = evaluate(net, val_dataset, mode="batch",
                              batch_size=cfg.batch_size, with_hausdorff=False)
            val_rows.append([epoch] + [scores["dice_mean"][c]
                                       for c in range(n_classes)]
                            + [scores["dice_foreground"]])
        if log is not None:
            msg = f"adapt epoch {epoch}: eta {emd_momentum(max(t - 1, 0), sched):.2e} lam {lam:.2f} keep {keep:.0f}"
            if val_rows:
                msg += f" val fg dsc {val_rows[-1][-1]:.4f}"
            log(msg)

    summary = {
        "variant": cfg.variant_name(),
        "config": asdict(cfg),
        "images": n,
        "iterations": t,
        "clamped_log_args": clamped_total,
        "wall_clock_s": round(time.time() - started, 3),
    }
    if val_rows:
        summary["final_val_dice_foreground"] = val_rows[-1][-1]
        summary["best_val_dice_foreground"] = max(r[-1] for r in val_rows)

    if out_dir is not None:
        _write_adapt_outputs(out_dir, net, cfg, n_classes, metrics_rows,
                             channel_rows, val_rows, summary)
    return {"summary": summary, "metrics": metrics_rows, "val": val_rows}


METRIC_COLUMNS_HEAD = ["epoch", "iter", "eta_t", "lambda", "phi",
                       "alpha_keep", "loss_hbs", "loss_se", "loss_mcst",
                       "loss_total"]
CHANNEL_COLUMNS = ["iter", "layer", "channel", "d", "alpha", "gamma_src",
                   "gamma_t"]


def _write_adapt_outputs(out_dir, net, cfg, n_classes, metrics_rows,
                         channel_rows, val_rows, summary):
    header = (METRIC_COLUMNS_HEAD
              + [f"kept_frac_{c}" for c in range(n_classes)] + ["mean_psi"])
    with open(f"{out_dir}/metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(metrics_rows)
    if cfg.log_channels:
        with open(f"{out_dir}/channels.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CHANNEL_COLUMNS)
            w.writerows(channel_rows)
    if val_rows:
        with open(f"{out_dir}/val_metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch"] + [f"dsc_{c}" for c in range(n_classes)]
                       + ["dsc_fg"])
            w.writerows(val_rows)
    with open(f"{out_dir}/summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    save_checkpoint(f"{out_dir}/adapted.ckpt", net)


# ---------------------------------------------------------------------------
# evaluation helpers


def _forward_eval(net, x, mode):
    if mode == "run":
        return net.predict(x, "eval", stats="run")
    if mode == "src":
        return net.predict(x, "eval", stats="src")
    if mode == "batch":
        return net.predict(x, "batch")
    raise ContractError(f"eval mode must be run, src, or batch, got {mode!r}")


def predict_dataset(net, dataset, mode="run", batch_size=12):
    """Argmax label maps and mean softmax entropy over a dataset."""
    preds = np.zeros((len(dataset.ids),) + dataset.images.shape[2:], dtype=np.int64)
    ent_sum, ent_count = 0.0, 0
    with T.no_grad():
        for sel in _eval_batches(len(dataset.ids), batch_size):
            p = _forward_eval(net, T.Tensor(dataset.images[sel]), mode)
            preds[sel] = p.data.argmax(axis=1)
            ent_sum += _plain_entropy(p.data) * sel.size
            ent_count += sel.size
    return preds, ent_sum / max(ent_count, 1)


def evaluate(net, dataset, mode="run", batch_size=12, with_hausdorff=True):
    """Per-class Dice (and optionally Hausdorff) against dataset masks."""
    if dataset.masks is None:
        raise DataError("evaluation needs masks")
    n_classes = net.spec.class_count
    preds, entropy = predict_dataset(net, dataset, mode, batch_size)
    truth = dataset.masks[:, 0]
    per_image = []
    dice_acc = {c: [] for c in range(n_classes)}
    hd_acc = {c: [] for c in range(n_classes)}
    for i, image_id in enumerate(dataset.ids):
        for c in range(n_classes):
            d = dice(preds[i], truth[i], c)
            dice_acc[c].append(d)
            row = {"image": image_id, "class": c, "dice": d}
            if with_hausdorff:
                h = hausdorff(preds[i], truth[i], c)
                hd_acc[c].append(h)
                row["hausdorff"] = h
            per_image.append(row)
    out = {
        "dice_mean": {c: float(np.mean(dice_acc[c])) for c in range(n_classes)},
        "dice_std": {c: float(np.std(dice_acc[c])) for c in range(n_classes)},
        "dice_foreground": float(np.mean(
            [np.mean(dice_acc[c]) for c in range(1, n_classes)])),
        "mean_entropy": entropy,
        "per_image": per_image,
    }
    if with_hausdorff:
        out["hausdorff_mean"] = {c: float(np.mean(hd_acc[c]))
                                 for c in range(n_classes)}
    return out


def bottleneck_features(net, dataset, mode="run", batch_size=12):
    """Spatially pooled bottleneck activations, one row per image."""
    feats = []
    with T.no_grad():
        for sel in _eval_batches(len(dataset.ids), batch_size):
            _forward_eval(net, T.Tensor(dataset.images[sel]), mode)
            feats.append(net.bottleneck.data.astype(np.float64).mean(axis=(2, 3)))
    return np.concatenate(feats, axis=0)
