"""Acceptance gates for the adaptation pipeline, one test per contract.

The first seven tests are self-contained numeric contracts (gradients,
normalisation endpoints, schedule law, weight normalisation, pseudo-label
oracle equivalence, consistency-weight bounds, the zero-objective fixed
point). The last five run against a synthetic five-seed benchmark: per seed,
a source model is trained from scratch, five adaptation variants are run at
the default configuration, and pruning / domain-distance / entropy studies
are collected. That costs well over an hour of CPU, so per-seed results are
cached on disk under tests/.bench_cache (override with $SEGADAPT_BENCH_CACHE)
keyed by a hash of every default that feeds the run; delete the cache to
force a fresh benchmark.

Tolerances are stated inline next to each assertion.
"""

import dataclasses
import hashlib
import json
import math
import os
import tempfile
import time

import numpy as np
import pytest

from segadapt import batchnorm as BN
from segadapt import tensor as T
from segadapt.diagnostics import a_distance_study, prune_study
from segadapt.engine import AdaptConfig, adapt, evaluate, train_source
from segadapt.losses import (hbs_loss, layer_divergence, self_entropy_loss,
                             transferability_weights)
from segadapt.network import (SegmentorSpec, build_segmentor, clone_segmentor,
                              save_checkpoint)
from segadapt.selftrain import (class_thresholds, consistency_weight_map,
                                mcst_loss, pseudo_labels)
from segadapt.synthdata import DataSpec, Dataset, render_sample

from conftest import certified_fd, check_gradients, rel_err, rng

SMALL = SegmentorSpec(in_channels=1, class_count=3, level_count=2,
                      base_width=2)


# ---------------------------------------------------------------------------
# 1. Gradient suite: every differentiable op and every loss against central
#    finite differences (64-bit oracle, step 1e-3) within 1e-4 relative,
#    1e-3 for the full network; total runtime under 60 s.
# ---------------------------------------------------------------------------

def _away_from_zero(r, shape, margin=0.05):
    """Uniform values whose magnitude stays >= margin, so that a 1e-3 FD
    stencil cannot cross the kink of relu/abs at zero."""
    u = r.uniform(margin, 1.0, size=shape)
    return u * np.where(r.uniform(-1, 1, size=shape) < 0, -1.0, 1.0)


def _pool_safe(r, shape):
    """Values whose 2x2 pooling windows have pairwise gaps >= 0.1."""
    base = r.uniform(-0.1, 0.1, size=shape)
    H, W = shape[2], shape[3]
    offs = np.tile(np.array([[0.0, 0.3], [0.6, 0.9]]), (H // 2, W // 2))
    return base + offs


def _projected(op):
    """Scalar loss: fixed random projection of the op output."""
    def build(tensors):
        out = op(*tensors)
        proj = T.Tensor(rng(99).uniform(-1, 1, size=out.dims))
        return T.sum_all(T.mul(out, proj))
    return build


def _op_cases():
    r = rng(1)
    labels = rng(2).integers(0, 3, size=(2, 3, 3))
    return [
        ("add", _projected(T.add), [r.uniform(-1, 1, (2, 3, 4, 4)),
                                    r.uniform(-1, 1, (1, 3, 1, 1))]),
        ("sub", _projected(T.sub), [r.uniform(-1, 1, (2, 3, 4, 4)),
                                    r.uniform(-1, 1, (1, 3, 1, 1))]),
        ("mul", _projected(T.mul), [r.uniform(-1, 1, (2, 3, 4, 4)),
                                    r.uniform(0.5, 1.5, (1, 3, 1, 1))]),
        ("scale", _projected(lambda x: T.scale(x, 1.7)),
         [r.uniform(-1, 1, (1, 1, 3, 4))]),
        ("add_scalar", _projected(lambda x: T.add_scalar(x, 0.9)),
         [r.uniform(-1, 1, (1, 1, 3, 4))]),
        ("abs_val", _projected(T.abs_val),
         [_away_from_zero(r, (1, 1, 3, 5))]),
        ("exp", _projected(T.exp_t), [r.uniform(-1, 1, (1, 1, 3, 4))]),
        ("log", _projected(T.log_t), [r.uniform(0.1, 2.0, (1, 1, 3, 4))]),
        ("power", _projected(lambda x: T.power(x, -0.5)),
         [r.uniform(0.3, 2.0, (1, 1, 3, 4))]),
        ("relu", _projected(T.relu), [_away_from_zero(r, (2, 3, 4, 4))]),
        ("sum_all", lambda ts: T.sum_all(ts[0]),
         [r.uniform(-1, 1, (2, 3, 4, 4))]),
        ("channel_mean", _projected(T.channel_mean),
         [r.uniform(-1, 1, (2, 3, 4, 4))]),
        ("softmax", _projected(T.softmax_channel),
         [r.uniform(-2, 2, (2, 3, 4, 4))]),
        ("conv2d_pad", _projected(lambda x, w, b: T.conv2d(x, w, b, padding=1)),
         [r.uniform(-1, 1, (2, 3, 5, 5)), r.uniform(-0.5, 0.5, (4, 3, 3, 3)),
          r.uniform(-0.5, 0.5, (1, 4, 1, 1))]),
        ("conv2d_stride", _projected(lambda x, w, b: T.conv2d(x, w, b,
                                                              stride=2)),
         [r.uniform(-1, 1, (2, 2, 6, 6)), r.uniform(-0.5, 0.5, (3, 2, 3, 3)),
          r.uniform(-0.5, 0.5, (1, 3, 1, 1))]),
        ("maxpool2x", _projected(T.maxpool2x), [_pool_safe(r, (2, 2, 4, 4))]),
        ("upsample", _projected(T.upsample_nearest2x),
         [r.uniform(-1, 1, (2, 2, 3, 3))]),
        ("concat", _projected(T.concat_channels),
         [r.uniform(-1, 1, (2, 2, 3, 3)), r.uniform(-1, 1, (2, 3, 3, 3))]),
        ("cross_entropy",
         lambda ts: T.cross_entropy_pixelwise(ts[0], labels),
         [r.uniform(-2, 2, (2, 3, 3, 3))]),
    ]


def _loss_states(r, widths=(3, 2)):
    """Snapshotted float64 BN layers whose affine pair sits >= 0.05 away
    from the snapshot, so the |.| terms of the consistency loss are smooth
    across the FD stencil."""
    states = []
    for w in widths:
        st = BN.BNState(w, dtype=np.float64)
        st.gamma.data[...] = r.uniform(0.5, 1.5, st.gamma.dims)
        st.beta.data[...] = r.uniform(-0.5, 0.5, st.beta.dims)
        st.mu_run = r.uniform(-0.5, 0.5, w)
        st.var_run = r.uniform(0.5, 2.0, w)
        BN.snapshot_source(st)
        st.gamma.data[...] += _away_from_zero(r, st.gamma.dims, 0.05)
        st.beta.data[...] += _away_from_zero(r, st.beta.dims, 0.05)
        states.append(st)
    return states


def _check_loss_gradients(loss_builder, params, tol=1e-4, h=1e-3):
    loss = loss_builder()
    T.backward(loss)

    def loss_fn():
        with T.no_grad():
            return loss_builder().item()

    for p, (fd, _) in zip(params, certified_fd(loss_fn, params, h=h)):
        err = rel_err(p.grad.astype(np.float64), fd)
        assert err < tol, f"loss gradient relative error {err:.3e}"
        p.grad = None


def _adapt_objective_net():
    """A small snapshotted float64 net plus a closure computing the full
    adaptation objective (entropy + consistency + weighted self-training
    with frozen labels and weights) as a plain float."""
    net = build_segmentor(SMALL, seed=20, dtype=np.float64)
    r = rng(23)
    for st in net.bns:
        st.gamma.data[...] = r.uniform(0.6, 1.4, st.gamma.dims)
        st.beta.data[...] = r.uniform(-0.3, 0.3, st.beta.dims)
        st.mu_run = r.uniform(-0.5, 0.5, st.channels)
        st.var_run = r.uniform(0.5, 2.0, st.channels)
    net.snapshot_source()
    for st in net.bns:
        st.gamma.data[...] += _away_from_zero(r, st.gamma.dims, 0.05)
        st.beta.data[...] += _away_from_zero(r, st.beta.dims, 0.05)
    x = rng(21).uniform(0, 1, (2, 1, 8, 8))

    with T.no_grad():
        p0 = net.predict(T.Tensor(x), "adapt", eta_t=0.3).data
        alphas = transferability_weights(
            [layer_divergence(st) for st in net.bns])
    labels = pseudo_labels(p0, class_thresholds(p0, 50.0))
    psi = rng(24).uniform(0.1, 0.5, size=p0[:, 0].shape)

    def objective():
        p = net.predict(T.Tensor(x), "adapt", eta_t=0.3)
        total = hbs_loss(net.bns, alphas, scaling_adjust=True)
        total = T.add(total, self_entropy_loss(p))
        return T.add(total, T.scale(mcst_loss(p, labels, psi), 5.0))

    return net, objective


def test_gradient_suite_against_finite_differences():
    t0 = time.perf_counter()

    for name, build, arrays in _op_cases():
        try:
            check_gradients(build, arrays, rel_tol=1e-4, h=1e-3)
        except AssertionError as exc:
            raise AssertionError(f"op {name}: {exc}") from exc

    r = rng(7)
    states = _loss_states(r)
    alphas = transferability_weights([r.uniform(0, 3, st.channels)
                                      for st in states])
    params = [v for st in states for v in (st.gamma, st.beta)]
    _check_loss_gradients(
        lambda: hbs_loss(states, alphas, scaling_adjust=False), params)
    _check_loss_gradients(
        lambda: hbs_loss(states, alphas, scaling_adjust=True), params)

    logits = T.Tensor(rng(8).uniform(-2, 2, (2, 3, 4, 4)), requires_grad=True)
    _check_loss_gradients(
        lambda: self_entropy_loss(T.softmax_channel(logits)), [logits])

    with T.no_grad():
        p0 = T.softmax_channel(logits).data
    frozen = pseudo_labels(p0, class_thresholds(p0, 60.0))
    psi = rng(9).uniform(0.1, 0.5, size=(2, 4, 4))
    _check_loss_gradients(
        lambda: mcst_loss(T.softmax_channel(logits), frozen, psi), [logits])

    # Full network at 1e-3: a random point of a relu/maxpool net keeps some
    # branch margin below the stencil width, and a finite difference taken
    # across a branch flip does not estimate the derivative, so step 1e-3 is
    # compared on stencil-certified elements (that certificate must cover
    # the overwhelming majority; finer-step full coverage lives in the
    # network unit tests).
    net, objective = _adapt_objective_net()
    T.backward(objective())

    def loss_fn():
        with T.no_grad():
            return objective().item()

    params = net.parameters()
    total = certified = 0
    for p, (fd, cert) in zip(params, certified_fd(loss_fn, params, h=1e-3)):
        total += cert.size
        certified += int(cert.sum())
        if cert.any():
            scale = max(np.abs(p.grad[cert]).max(), 1e-8)
            err = np.abs(fd[cert] - p.grad[cert]).max() / scale
            assert err < 1e-3, f"network gradient relative error {err:.3e}"
    assert certified / total > 0.9, \
        f"only {certified}/{total} FD stencils stayed branch-clean"

    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0, f"gradient suite took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# 2. Momentum-blend endpoints: the adapt forward at eta=0 equals pure
#    batch-statistic normalisation and at eta=1 equals pure source-statistic
#    normalisation, within 1e-6, on 100 random inputs.
# ---------------------------------------------------------------------------

def test_bn_adapt_blend_endpoints():
    r = rng(31)
    for _ in range(100):
        b = int(r.integers(2, 6))
        c = int(r.integers(1, 5))
        h = int(r.integers(2, 7))
        w = int(r.integers(2, 7))
        st = BN.BNState(c)
        st.gamma.data[...] = r.uniform(0.5, 1.5, st.gamma.dims).astype(np.float32)
        st.beta.data[...] = r.uniform(-0.5, 0.5, st.beta.dims).astype(np.float32)
        st.mu_run = r.uniform(-1, 1, c).astype(np.float32)
        st.var_run = r.uniform(0.5, 2.0, c).astype(np.float32)
        BN.snapshot_source(st)
        x = r.uniform(-2, 2, (b, c, h, w)).astype(np.float32)

        x64 = x.astype(np.float64)
        gam = st.gamma.data.astype(np.float64)
        bet = st.beta.data.astype(np.float64)

        mu_b = x64.mean(axis=(0, 2, 3), keepdims=True)
        var_b = ((x64 - mu_b) ** 2).mean(axis=(0, 2, 3), keepdims=True)
        want0 = (x64 - mu_b) / np.sqrt(var_b + st.eps) * gam + bet
        got0 = BN.bn_forward_adapt(T.Tensor(x), st, 0.0).data
        assert np.abs(got0 - want0).max() < 1e-6

        mu_s = st.mu_src.astype(np.float64).reshape(1, c, 1, 1)
        var_s = st.var_src.astype(np.float64).reshape(1, c, 1, 1)
        want1 = (x64 - mu_s) / np.sqrt(var_s + st.eps) * gam + bet
        got1 = BN.bn_forward_adapt(T.Tensor(x), st, 1.0).data
        assert np.abs(got1 - want1).max() < 1e-6


# ---------------------------------------------------------------------------
# 3. Momentum decay law: eta(t) matches eta0*exp(-t/tau) within 1e-12 for
#    t <= 1000 and decreases strictly (in float64 the default tau=1 schedule
#    underflows to exactly 0 near t=746; strictness is required up to that
#    point and a slower schedule is checked strictly across the whole range).
#    The engine must log exactly these values.
# ---------------------------------------------------------------------------

def test_momentum_decay_law(tmp_path):
    sched = BN.EMDSchedule()
    vals = [BN.emd_momentum(t, sched) for t in range(1001)]
    for t, v in enumerate(vals):
        assert abs(v - math.exp(-float(t))) < 1e-12
    for t in range(1000):
        if vals[t] > 0.0:
            assert vals[t + 1] < vals[t], f"not strictly decreasing at t={t}"
        else:
            assert vals[t + 1] == 0.0

    slow = BN.EMDSchedule(eta0=1.0, tau=2.0)
    sv = [BN.emd_momentum(t, slow) for t in range(1001)]
    assert all(abs(sv[t] - math.exp(-t / 2.0)) < 1e-12 for t in range(1001))
    assert all(sv[t + 1] < sv[t] for t in range(1000))

    # the logged schedule of a real run is the same law
    dspec = DataSpec(size=16, seed=40)
    ds = _make_dataset(dspec, "target", 12)
    net = build_segmentor(SMALL, seed=40)
    src = _make_dataset(dspec, "source", 12)
    train_source(net, src, epochs=1, lr=1e-2, batch_size=6, seed=40)
    net.snapshot_source()
    cfg = AdaptConfig(epochs=3, batch_size=6, seed=40, log_channels=False)
    adapt(net, ds, cfg, out_dir=str(tmp_path))
    logged = np.loadtxt(tmp_path / "metrics.csv", delimiter=",",
                        skiprows=1, usecols=(1, 2))
    for it, eta in logged:
        assert abs(eta - math.exp(-it)) < 1e-12


# ---------------------------------------------------------------------------
# 4. Transferability weights: they sum to the total channel count within
#    1e-9, and a channel with larger divergence never gets a larger weight,
#    on 100 random divergence vectors.
# ---------------------------------------------------------------------------

def test_transferability_sum_and_antimonotonicity():
    r = rng(41)
    for _ in range(100):
        layers = int(r.integers(1, 5))
        divs = [r.uniform(0, 10, int(r.integers(1, 17)))
                for _ in range(layers)]
        alphas = transferability_weights(divs)
        flat_d = np.concatenate(divs)
        flat_a = np.concatenate(alphas)
        assert abs(flat_a.sum() - flat_d.size) < 1e-9
        order = np.argsort(flat_d, kind="stable")
        assert (np.diff(flat_a[order]) <= 0).all(), \
            "larger divergence produced a larger weight"


# ---------------------------------------------------------------------------
# 5. Pseudo-label oracle equivalence: thresholds and labels exactly equal a
#    literal brute-force implementation on 200 random batches (B<=10, N<=4,
#    8x8); the per-class retained count stays inside the tie band of k.
# ---------------------------------------------------------------------------

def _brute_force_thresholds(p, keep_ratio):
    n_classes = p.shape[1]
    conf = p.max(axis=1)
    arg = p.argmax(axis=1)
    lam = []
    for n in range(n_classes):
        pool = sorted((float(v) for v in conf[arg == n]), reverse=True)
        if not pool:
            lam.append(float("inf"))
            continue
        k = max(1, int(math.floor(keep_ratio / 100.0 * len(pool))))
        lam.append(pool[k - 1])
    return lam


def _brute_force_labels(p, lam):
    B, N, H, W = p.shape
    out = np.zeros(p.shape, dtype=np.uint8)
    for b in range(B):
        for i in range(H):
            for j in range(W):
                best, best_ratio = 0, -1.0
                for n in range(N):
                    ratio = 0.0 if math.isinf(lam[n]) \
                        else float(p[b, n, i, j]) / lam[n]
                    if ratio > best_ratio:
                        best, best_ratio = n, ratio
                if float(p[b, best, i, j]) >= lam[best]:
                    out[b, best, i, j] = 1
    return out


def test_pseudo_label_brute_force_equivalence():
    r = rng(51)
    for case in range(200):
        B = int(r.integers(1, 11))
        N = int(r.integers(2, 5))
        raw = r.uniform(0.01, 1.0, (B, N, 8, 8)).astype(np.float32)
        p = raw / raw.sum(axis=1, keepdims=True)
        keep = float(r.uniform(0, 100)) if case % 10 else float(
            [0.0, 100.0][(case // 10) % 2])

        lam = class_thresholds(p, keep)
        want_lam = _brute_force_thresholds(p, keep)
        assert [float(v) for v in lam] == want_lam, f"case {case}"

        got = pseudo_labels(p, lam)
        want = _brute_force_labels(p, want_lam)
        assert np.array_equal(got, want), f"case {case}"

        conf = p.max(axis=1)
        arg = p.argmax(axis=1)
        for n in range(N):
            pool = conf[arg == n]
            if pool.size == 0:
                continue
            k = max(1, int(math.floor(keep / 100.0 * pool.size)))
            kept = int((pool >= lam[n]).sum())
            ties = int((pool == np.float32(lam[n])).sum())
            assert k <= kept <= k + max(0, ties - 1), f"case {case} class {n}"


# ---------------------------------------------------------------------------
# 6. Consistency weight contract: psi lies in [1-sigmoid(2), 0.5] on 10^4
#    random prediction/history pairs, equals exactly 0.5 when history agrees
#    with the current prediction, and never increases as the mean L1
#    distance grows.
# ---------------------------------------------------------------------------

def test_consistency_weight_contract():
    r = rng(61)
    lo = 1.0 - 1.0 / (1.0 + math.exp(-2.0))
    all_d, all_psi = [], []
    pairs = 0
    while pairs < 10_000:
        N = int(r.integers(2, 5))
        shape = (N, 10, 10)
        raw = r.uniform(0.01, 1.0, shape).astype(np.float32)
        p_now = raw / raw.sum(axis=0, keepdims=True)
        hist = []
        for _ in range(int(r.integers(1, 6))):
            hraw = r.uniform(0.01, 1.0, shape).astype(np.float32)
            hist.append(hraw / hraw.sum(axis=0, keepdims=True))
        psi = consistency_weight_map(p_now, hist)
        d = np.mean([np.abs(p_now.astype(np.float64)
                            - h.astype(np.float64)).sum(axis=0)
                     for h in hist], axis=0)
        # psi is float32; allow one rounding step around the exact bounds
        assert (psi >= lo - 1e-6).all() and (psi <= 0.5).all()
        all_d.append(d.ravel())
        all_psi.append(psi.ravel())
        pairs += d.size

    same = consistency_weight_map(p_now, [p_now.copy(), p_now.copy()])
    assert (same == 0.5).all(), "identical history must give exactly 0.5"

    d = np.concatenate(all_d)
    psi = np.concatenate(all_psi)
    order = np.argsort(d, kind="stable")
    assert (np.diff(psi[order]) <= 1e-7).all(), \
        "psi increased with the mean L1 distance"


# ---------------------------------------------------------------------------
# 7. Fixed point: when the affine pair starts at its snapshot and the
#    entropy and self-training terms are off, 50 adaptation iterations leave
#    the checkpoint byte-identical.
# ---------------------------------------------------------------------------

def test_zero_objective_adaptation_is_identity(tmp_path):
    dspec = DataSpec(size=32, seed=70)
    src = _make_dataset(dspec, "source", 12)
    tgt = _make_dataset(dspec, "target", 12)
    net = build_segmentor(SMALL, seed=70)
    train_source(net, src, epochs=2, lr=1e-2, batch_size=6, seed=70)
    net.snapshot_source()

    before = tmp_path / "before.ckpt"
    after = tmp_path / "after.ckpt"
    save_checkpoint(str(before), net)
    cfg = AdaptConfig(epochs=50, batch_size=12, seed=70, use_se=False,
                      use_mcsf=False, log_channels=False)
    adapt(net, tgt, cfg)
    save_checkpoint(str(after), net)
    assert before.read_bytes() == after.read_bytes()


# ---------------------------------------------------------------------------
# Synthetic five-seed benchmark shared by the remaining tests.
# ---------------------------------------------------------------------------

BENCH_SEEDS = (0, 1, 2, 3, 4)
BENCH_TRAIN = 200
BENCH_VAL = 48
SOURCE_EPOCHS = 30
VARIANTS = {
    "mcosuda": dict(),
    "osuda-lgamma": dict(use_mcsf=False),
    "osuda": dict(use_mcsf=False, use_scaling_adjust=False),
    "osuda-noac": dict(use_mcsf=False, use_scaling_adjust=False,
                       use_adaptive_channels=False),
    "osuda-nose": dict(use_se=False, use_mcsf=False,
                       use_scaling_adjust=False),
}


def _make_dataset(spec, domain, count, start=0):
    imgs, msks, ids = [], [], []
    for i in range(start, start + count):
        img, msk = render_sample(spec, domain, i)
        imgs.append(img)
        msks.append(msk)
        ids.append(f"{domain[:3]}{i:05d}")
    return Dataset(root="", ids=ids, images=np.concatenate(imgs),
                   masks=np.concatenate(msks))


def _bench_fingerprint():
    cfg = {
        "data": dataclasses.asdict(DataSpec(seed=0)),
        "net": dataclasses.asdict(SegmentorSpec()),
        "adapt": dataclasses.asdict(AdaptConfig()),
        "source": {"epochs": SOURCE_EPOCHS, "lr": 1e-2, "batch_size": 12},
        "counts": {"train": BENCH_TRAIN, "val": BENCH_VAL},
        "prune_fraction": 10.0,
    }
    blob = json.dumps(cfg, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _run_benchmark_seed(seed):
    dspec = DataSpec(seed=seed)
    src_train = _make_dataset(dspec, "source", BENCH_TRAIN)
    tgt_train = _make_dataset(dspec, "target", BENCH_TRAIN)
    tgt_val = _make_dataset(dspec, "target", BENCH_VAL, start=BENCH_TRAIN)

    t0 = time.perf_counter()
    net = build_segmentor(SegmentorSpec(), seed=seed)
    train_source(net, src_train, epochs=SOURCE_EPOCHS, lr=1e-2,
                 batch_size=12, seed=seed)
    src_eval = evaluate(net, tgt_val, mode="run", with_hausdorff=False)

    result = {
        "src_only": src_eval["dice_foreground"],
        "src_entropy": src_eval["mean_entropy"],
        "variants": {},
    }
    keep_net = None
    for name, flags in VARIANTS.items():
        adapted = clone_segmentor(net)
        adapted.snapshot_source()
        cfg = AdaptConfig(seed=seed, log_channels=False, **flags)
        with tempfile.TemporaryDirectory() as out:
            adapt(adapted, tgt_train, cfg, out_dir=out, val_dataset=tgt_val)
            with open(os.path.join(out, "val_metrics.csv")) as fh:
                rows = fh.read().strip().splitlines()[1:]
            curve = [float(line.split(",")[-1]) for line in rows]
        ev = evaluate(adapted, tgt_val, mode="batch", with_hausdorff=False)
        result["variants"][name] = {
            "dsc": ev["dice_foreground"],
            "entropy": ev["mean_entropy"],
            "val_curve": curve,
        }
        if name == "mcosuda":
            # the headline path: source training, one adaptation, both evals
            result["c8_minutes"] = (time.perf_counter() - t0) / 60.0
            keep_net = adapted

    prune = prune_study(keep_net, tgt_val, fraction=10.0)
    result["prune_drop_smallest"] = prune[1]["drop"]
    result["prune_drop_largest"] = prune[2]["drop"]
    adist = a_distance_study(net, keep_net, src_train, tgt_train, seed=seed)
    result["a_before"] = adist["before"]
    result["a_after"] = adist["after"]
    return result


@pytest.fixture(scope="session")
def benchmark():
    root = os.environ.get(
        "SEGADAPT_BENCH_CACHE",
        os.path.join(os.path.dirname(__file__), ".bench_cache"))
    os.makedirs(root, exist_ok=True)
    key = _bench_fingerprint()
    seeds = {}
    for seed in BENCH_SEEDS:
        path = os.path.join(root, f"bench-{key}-seed{seed}.json")
        if os.path.exists(path):
            with open(path) as fh:
                seeds[seed] = json.load(fh)
            continue
        print(f"\n[benchmark] computing seed {seed} "
              f"(five variants, several minutes) ...", flush=True)
        seeds[seed] = _run_benchmark_seed(seed)
        with open(path, "w") as fh:
            json.dump(seeds[seed], fh, indent=1)
    return seeds


# ---------------------------------------------------------------------------
# 8. Adaptation gain: the fully adapted model beats the source-only model's
#    foreground DSC in at least 4 of 5 seeds, by more than 5 points on
#    average, inside 15 minutes per seed on one CPU core.
# ---------------------------------------------------------------------------

def test_benchmark_adaptation_beats_source_only(benchmark):
    gains = [s["variants"]["mcosuda"]["dsc"] - s["src_only"]
             for s in benchmark.values()]
    wins = sum(g > 0 for g in gains)
    assert wins >= 4, f"adaptation won only {wins}/5 seeds: {gains}"
    mean_gain = float(np.mean(gains))
    assert mean_gain > 0.05, f"mean foreground DSC gain {mean_gain:.4f}"
    slowest = max(s["c8_minutes"] for s in benchmark.values())
    assert slowest < 15.0, f"slowest seed took {slowest:.1f} minutes"


# ---------------------------------------------------------------------------
# 9. Ablation ordering: on seed means, full method >= scale-weighted
#    consistency >= plain consistency; and the plain variant beats dropping
#    the channel weighting or the entropy term in a majority of seeds.
# ---------------------------------------------------------------------------

def test_benchmark_ablation_ordering(benchmark):
    means = {name: float(np.mean([s["variants"][name]["dsc"]
                                  for s in benchmark.values()]))
             for name in VARIANTS}
    assert means["mcosuda"] >= means["osuda-lgamma"] >= means["osuda"], \
        f"mean ordering violated: {means}"
    for ablation in ("osuda-noac", "osuda-nose"):
        wins = sum(s["variants"]["osuda"]["dsc"]
                   >= s["variants"][ablation]["dsc"]
                   for s in benchmark.values())
        assert wins >= 3, f"osuda >= {ablation} in only {wins}/5 seeds"


# ---------------------------------------------------------------------------
# 10. Stability: the variance of validation DSC over the last 10 adaptation
#     epochs with the self-training term is <= without it in >= 4 of 5 seeds.
# ---------------------------------------------------------------------------

def test_benchmark_consistency_stabilizes_validation(benchmark):
    wins = 0
    for s in benchmark.values():
        with_mcsf = np.var(s["variants"]["mcosuda"]["val_curve"][-10:])
        without = np.var(s["variants"]["osuda-lgamma"]["val_curve"][-10:])
        wins += with_mcsf <= without
    assert wins >= 4, f"self-training stabilised only {wins}/5 seeds"


# ---------------------------------------------------------------------------
# 11. Pruning and domain distance: dropping the 10% smallest-scale channels
#     hurts no more than dropping the 10% largest in a majority of seeds,
#     and the proxy domain distance shrinks after adaptation in a majority.
# ---------------------------------------------------------------------------

def test_benchmark_pruning_and_domain_distance(benchmark):
    prune_wins = sum(s["prune_drop_smallest"] <= s["prune_drop_largest"]
                     for s in benchmark.values())
    assert prune_wins >= 3, f"smallest-scale pruning safer in only " \
                            f"{prune_wins}/5 seeds"
    adist_wins = sum(s["a_after"] <= s["a_before"]
                     for s in benchmark.values())
    assert adist_wins >= 3, f"domain distance shrank in only " \
                            f"{adist_wins}/5 seeds"


# ---------------------------------------------------------------------------
# 12. Entropy descent: whenever the entropy term is on, the mean target
#     self-entropy after adaptation is strictly below the source model's,
#     in every seed.
# ---------------------------------------------------------------------------

def test_benchmark_entropy_descent(benchmark):
    for seed, s in benchmark.items():
        for name in ("mcosuda", "osuda-lgamma", "osuda", "osuda-noac"):
            after = s["variants"][name]["entropy"]
            assert after < s["src_entropy"], \
                f"seed {seed} {name}: entropy {after:.4f} did not drop " \
                f"below {s['src_entropy']:.4f}"
