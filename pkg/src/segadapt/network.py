"""A small encoder-decoder segmentor with skip connections.

Three encoder levels of conv + BN + ReLU + 2x pool, a bottleneck conv, then
mirrored decoder levels of nearest upsample + skip concat + conv + BN + ReLU,
and a 1x1 projection to class logits. Widths double per level from
``base_width``. Small on purpose: the point is studying how the BN layers
behave under domain shift, not raw capacity.

Also here: global channel pruning by snapshot scale, and the checkpoint
format (named .tns entries plus a JSON meta blob and a trailing checksum).
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import batchnorm as BN
from . import tensor as T
from .errors import CheckpointError, ContractError, ShapeError
from .seeding import CODE_INIT, derive_rng

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class SegmentorSpec:
    in_channels: int = 1
    class_count: int = 3
    level_count: int = 3
    base_width: int = 8

    def __post_init__(self):
        if self.in_channels < 1 or self.base_width < 1 or self.level_count < 1:
            raise ContractError(f"degenerate segmentor spec: {self}")
        if self.class_count < 2:
            raise ContractError(f"need at least 2 classes, got {self.class_count}")

    @property
    def widths(self):
        return [self.base_width * 2 ** l for l in range(self.level_count)]

    @property
    def bottleneck_width(self):
        return self.base_width * 2 ** self.level_count


class ConvLayer:
    """3x3 (or 1x1) convolution with bias, initialised U(+-1/sqrt(fan_in))."""

    def __init__(self, in_c, out_c, kernel, padding, rng, dtype):
        fan_in = in_c * kernel * kernel
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(out_c, in_c, kernel, kernel))
        b = rng.uniform(-bound, bound, size=(1, out_c, 1, 1))
        self.weight = T.Tensor(w.astype(dtype), requires_grad=True)
        self.bias = T.Tensor(b.astype(dtype), requires_grad=True)
        self.padding = padding

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=1,
                        padding=self.padding)


class Segmentor:
    """Encoder-decoder over rank-4 tensors; see the module docstring.

    Convs and BN layers are indexed in forward order: encoders, bottleneck,
    decoders (deepest first), final projection (convs only). Checkpoint entry
    names follow these indices.
    """

    def __init__(self, spec, rng, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        widths = spec.widths
        self.convs = []
        self.bns = []
        in_c = spec.in_channels
        for w in widths:
            self.convs.append(ConvLayer(in_c, w, 3, 1, rng, self.dtype))
            self.bns.append(BN.BNState(w, dtype=self.dtype))
            in_c = w
        bw = spec.bottleneck_width
        self.convs.append(ConvLayer(in_c, bw, 3, 1, rng, self.dtype))
        self.bns.append(BN.BNState(bw, dtype=self.dtype))
        cur = bw
        for l in reversed(range(spec.level_count)):
            self.convs.append(ConvLayer(cur + widths[l], widths[l], 3, 1,
                                        rng, self.dtype))
            self.bns.append(BN.BNState(widths[l], dtype=self.dtype))
            cur = widths[l]
        self.convs.append(ConvLayer(cur, spec.class_count, 1, 0, rng, self.dtype))
        self.bottleneck = None

    @property
    def mode(self):
        modes = {st.mode for st in self.bns}
        if len(modes) != 1:
            raise ContractError(f"layers disagree on mode: {sorted(modes)}")
        return self.bns[0].mode

    def parameters(self):
        ps = []
        for conv in self.convs:
            ps.extend([conv.weight, conv.bias])
        for st in self.bns:
            ps.extend([st.gamma, st.beta])
        return ps

    def snapshot_source(self):
        for st in self.bns:
            BN.snapshot_source(st)

    def _bn_apply(self, x, st, mode, eta_t, stats):
        if mode == "train":
            return BN.bn_forward_source_train(x, st, self._bn_momentum)
        if mode == "eval":
            return BN.bn_forward_eval(x, st, stats=stats)
        if mode == "adapt":
            return BN.bn_forward_adapt(x, st, eta_t)
        if mode == "batch":
            return BN.bn_forward_adapt(x, st, 0.0)
        raise ContractError(f"unknown forward mode {mode!r}")

    def forward(self, x, mode, eta_t=None, stats="run", bn_momentum=0.1):
        """Class logits for a batch. ``mode`` is one of:

        train  batch statistics with running-stat updates (source training)
        eval   stored statistics, "run" or "src" per ``stats``; pure
        adapt  source/batch blend at momentum ``eta_t``
        batch  pure batch statistics on a snapshotted model (the eta_t -> 0
               limit), the inference mode for adapted checkpoints
        """
        spec = self.spec
        b, c, h, w = x.dims
        if c != spec.in_channels:
            raise ShapeError(f"expected {spec.in_channels} input channels, "
                             f"got {c}")
        div = 2 ** spec.level_count
        if h % div or w % div:
            raise ShapeError(f"spatial dims must divide {div}, got {h}x{w}")
        if mode == "adapt" and eta_t is None:
            raise ContractError("adapt forward needs eta_t")
        self._bn_momentum = bn_momentum

        skips = []
        cur = x
        idx = 0
        for _ in range(spec.level_count):
            cur = T.relu(self._bn_apply(self.convs[idx](cur), self.bns[idx],
                                        mode, eta_t, stats))
            skips.append(cur)
            cur = T.maxpool2x(cur)
            idx += 1
        cur = T.relu(self._bn_apply(self.convs[idx](cur), self.bns[idx],
                                    mode, eta_t, stats))
        self.bottleneck = cur
        idx += 1
        for l in reversed(range(spec.level_count)):
            cur = T.upsample_nearest2x(cur)
            cur = T.concat_channels(cur, skips[l])
            cur = T.relu(self._bn_apply(self.convs[idx](cur), self.bns[idx],
                                        mode, eta_t, stats))
            idx += 1
        return self.convs[idx](cur)

    def predict(self, x, mode, eta_t=None, stats="run"):
        return T.softmax_channel(self.forward(x, mode, eta_t=eta_t, stats=stats))

    def clear_diagnostics(self):
        self.bottleneck = None
        for st in self.bns:
            st.batch_mu = st.batch_var = None
            st.mu_live = st.var_live = None
            st.last_normalized = None


def build_segmentor(spec, seed=0, dtype=np.float32):
    return Segmentor(spec, derive_rng(seed, CODE_INIT), dtype=dtype)


def clone_segmentor(net):
    """An independent copy: same weights, statistics, snapshot, and mode.
    Diagnostics and the iteration counter do not carry over."""
    twin = Segmentor(net.spec, derive_rng(0, CODE_INIT), dtype=net.dtype)
    for mine, theirs in zip(twin.convs, net.convs):
        mine.weight.data[...] = theirs.weight.data
        mine.bias.data[...] = theirs.bias.data
    for mine, theirs in zip(twin.bns, net.bns):
        BN.load_state_vectors(mine, BN.state_vectors(theirs),
                              snapshotted=theirs.snapshotted)
        mine.mode = theirs.mode
    return twin


def prune_channels(net, fraction, order="smallest"):
    """Zero out the affine pair of floor(fraction% of all BN channels),
    ranked by snapshot scale across every layer jointly. ``order`` picks the
    end of the ranking to remove. Returns a pruned copy; the input net and
    the snapshots are untouched."""
    if order not in ("smallest", "largest"):
        raise ContractError(f"order must be 'smallest' or 'largest', got {order!r}")
    if not 0.0 <= fraction <= 100.0:
        raise ContractError(f"fraction must lie in [0, 100], got {fraction}")
    ranked = []
    for li, st in enumerate(net.bns):
        if not st.snapshotted:
            raise ContractError("pruning ranks snapshot scales; snapshot first")
        for ci, g in enumerate(st.gamma_src.astype(np.float64)):
            ranked.append((float(g), li, ci))
    ranked.sort()
    total = len(ranked)
    count = int(np.floor(fraction / 100.0 * total))
    picked = ranked[:count] if order == "smallest" else ranked[-count:] if count else []
    out = clone_segmentor(net)
    for _, li, ci in picked:
        out.bns[li].gamma.data[0, ci, 0, 0] = 0.0
        out.bns[li].beta.data[0, ci, 0, 0] = 0.0
    return out


# ---------------------------------------------------------------------------
# checkpoints: named .tns entries, JSON meta, trailing mod-2^64 checksum


def _entry(name, array):
    nb = name.encode("utf-8")
    return struct.pack("<H", len(nb)) + nb + T.encode_tns(array)


def save_checkpoint(path, net):
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "in_channels": net.spec.in_channels,
        "class_count": net.spec.class_count,
        "level_count": net.spec.level_count,
        "base_width": net.spec.base_width,
        "mode": net.mode,
    }
    blob = bytearray()
    blob += _entry("meta.json", np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8))
    for i, conv in enumerate(net.convs):
        blob += _entry(f"conv{i}.weight", conv.weight.data.astype(np.float32))
        blob += _entry(f"conv{i}.bias",
                       conv.bias.data.reshape(-1).astype(np.float32))
    for j, st in enumerate(net.bns):
        for key, vec in BN.state_vectors(st).items():
            blob += _entry(f"bn{j}.{key}", vec.astype(np.float32))
    digest = sum(blob) % (1 << 64)
    blob += struct.pack("<Q", digest)
    with open(path, "wb") as fh:
        fh.write(blob)


def _parse_entries(blob, origin):
    at = 0
    entries = {}
    while at < len(blob):
        if at + 2 > len(blob):
            raise CheckpointError(f"{origin}: truncated entry header")
        (nlen,) = struct.unpack_from("<H", blob, at)
        at += 2
        name = blob[at:at + nlen].decode("utf-8")
        at += nlen
        if blob[at:at + 4] != b"TNS1":
            raise CheckpointError(f"{origin}: entry {name!r} is not a tensor")
        code, rank = struct.unpack_from("<BB", blob, at + 4)
        dims = struct.unpack_from(f"<{rank}Q", blob, at + 6)
        width = 4 if code == 0 else 1
        size = 6 + 8 * rank + int(np.prod(dims, dtype=np.uint64)) * width
        entries[name] = T.decode_tns(blob[at:at + size], f"{origin}:{name}")
        at += size
    return entries


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise CheckpointError(f"{path}: too short to hold a checksum")
    body, tail = blob[:-8], blob[-8:]
    (stored,) = struct.unpack("<Q", tail)
    digest = sum(body) % (1 << 64)
    if digest != stored:
        raise CheckpointError(f"{path}: checksum mismatch (stored "
                              f"{stored:#018x}, computed {digest:#018x})")
    entries = _parse_entries(body, str(path))
    if "meta.json" not in entries:
        raise CheckpointError(f"{path}: missing meta entry")
    meta = json.loads(entries["meta.json"].tobytes().decode("utf-8"))
    version = meta.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build "
                              f"reads version {CHECKPOINT_VERSION}")
    spec = SegmentorSpec(in_channels=meta["in_channels"],
                         class_count=meta["class_count"],
                         level_count=meta["level_count"],
                         base_width=meta["base_width"])
    net = Segmentor(spec, derive_rng(0, CODE_INIT))
    mode = meta["mode"]
    if mode not in BN.MODES:
        raise CheckpointError(f"{path}: unknown mode {mode!r}")
    for i, conv in enumerate(net.convs):
        w = entries.get(f"conv{i}.weight")
        b = entries.get(f"conv{i}.bias")
        if w is None or b is None:
            raise CheckpointError(f"{path}: missing conv{i} entries")
        if w.shape != conv.weight.dims:
            raise CheckpointError(f"{path}: conv{i}.weight has shape "
                                  f"{w.shape}, expected {conv.weight.dims}")
        conv.weight.data[...] = w
        conv.bias.data[...] = b.reshape(conv.bias.dims)
    snapshotted = mode == "adapt"
    for j, st in enumerate(net.bns):
        vectors = {}
        for key in BN.STATE_VECTOR_NAMES:
            v = entries.get(f"bn{j}.{key}")
            if v is None:
                raise CheckpointError(f"{path}: missing bn{j}.{key}")
            vectors[key] = v
        BN.load_state_vectors(st, vectors, snapshotted=snapshotted)
        st.mode = mode
    return net
