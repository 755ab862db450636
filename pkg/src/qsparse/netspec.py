"""Network description, cost accounting, precision assignment and quantized conv.

Blocks follow the EDM U-Net taxonomy: ``conv_act`` layers carry full shapes;
``skip``, ``embedding`` and ``attention`` blocks are cost-modeled from annotated
MAC and FP16-byte counts and act as identity in the functional path.

Weighted compute uses the FP16 : INT8 : INT4 multiply equivalence 1 : 1/2 : 1/4,
i.e. ``macs * bits / 16`` with ``bits`` the wider of the two operand formats.
"""

import hashlib
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError, DomainError
from .quant import FORMATS, QuantFormat, get_format, quantize, silu, relu, sqnr
from .tensorkit import as_activation, as_weight

BLOCK_KINDS = ("skip", "conv_act", "embedding", "attention")
ACTIVATIONS = ("silu", "relu", "none")
BUNDLED = ("edm1-cifar10-desk", "edm1-generic-small")


@dataclass(frozen=True)
class BlockSpec:
    name: str
    kind: str
    cin: int = 0
    cout: int = 0
    h: int = 0
    w: int = 0
    r: int = 1
    s: int = 1
    activation: str = "none"
    macs: int | None = None
    bytes: int | None = None  # FP16 bytes, for annotated (non-conv) blocks

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ConfigError(f"block {self.name!r}: unknown kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"block {self.name!r}: unknown activation {self.activation!r}")
        if self.is_conv:
            dims = (self.cin, self.cout, self.h, self.w, self.r, self.s)
            if min(dims) < 1:
                raise ConfigError(f"conv block {self.name!r} needs positive shape fields")
        elif self.macs is None or self.bytes is None or self.macs < 0 or self.bytes < 0:
            raise ConfigError(f"{self.kind} block {self.name!r} needs macs and bytes annotations")

    @property
    def is_conv(self):
        return self.kind == "conv_act"

    @property
    def mac_count(self):
        if self.is_conv:
            return self.h * self.w * self.cout * self.cin * self.r * self.s
        return self.macs

    @property
    def weight_elems(self):
        return self.cin * self.cout * self.r * self.s

    @property
    def act_elems(self):
        """Input plus output activation elements moved by the layer."""
        return (self.cin + self.cout) * self.h * self.w


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    blocks: tuple
    sensitive: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        names = [b.name for b in self.blocks]
        if len(set(names)) != len(names):
            raise ConfigError(f"network {self.name!r}: duplicate block names")
        if not self.blocks:
            raise ConfigError(f"network {self.name!r} has no blocks")
        if self.sensitive is not None:
            object.__setattr__(self, "sensitive", tuple(self.sensitive))
            self._check_names(self.sensitive)

    def _check_names(self, names):
        known = set(self.block_names)
        unknown = [n for n in names if n not in known]
        if unknown:
            raise ConfigError(f"unknown block names: {unknown}")

    @property
    def block_names(self):
        return [b.name for b in self.blocks]

    @property
    def conv_blocks(self):
        return [b for b in self.blocks if b.is_conv]

    def __getitem__(self, name):
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    def input_is_relu(self, name):
        """Whether the input of conv block ``name`` comes from a ReLU conv block."""
        prev = None
        for b in self.conv_blocks:
            if b.name == name:
                return prev is not None and prev.activation == "relu"
            prev = b
        raise KeyError(name)

    def default_sensitive(self):
        convs = [b.name for b in self.conv_blocks]
        if len(convs) <= 4:
            return tuple(convs)
        return tuple(convs[:2] + convs[-2:])


# -- config files -----------------------------------------------------------


def _block_from_dict(d):
    if not isinstance(d, dict) or "name" not in d or "kind" not in d:
        raise ConfigError(f"block entries need name and kind: {d!r}")
    allowed = {"name", "kind", "cin", "cout", "h", "w", "r", "s", "activation", "macs", "bytes"}
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"block {d['name']!r}: unknown fields {sorted(extra)}")
    return BlockSpec(**d)


def network_from_dict(doc):
    if not isinstance(doc, dict) or "blocks" not in doc:
        raise ConfigError("network config needs a 'blocks' list")
    blocks = [_block_from_dict(b) for b in doc["blocks"]]
    return NetworkSpec(name=doc.get("name", "network"), blocks=blocks, sensitive=doc.get("sensitive"))


def read_config_text(path_or_name):
    """Raw text of a bundled config name or a file path."""
    if str(path_or_name) in BUNDLED:
        return resources.files("qsparse").joinpath(f"configs/{path_or_name}.yaml").read_text()
    path = Path(path_or_name)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return path.read_text()


def load_network(path_or_name):
    """Load a network from a YAML/JSON file or a bundled config name."""
    try:
        doc = yaml.safe_load(read_config_text(path_or_name))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse network config: {exc}") from exc
    return network_from_dict(doc)


def network_digest(net):
    return hashlib.sha256(repr(net).encode()).hexdigest()[:16]


# -- precision maps ---------------------------------------------------------


@dataclass(frozen=True)
class PrecisionPair:
    weight: QuantFormat
    act: QuantFormat

    @classmethod
    def of(cls, weight, act=None):
        return cls(get_format(weight), get_format(weight if act is None else act))

    @property
    def bits(self):
        return max(self.weight.bits, self.act.bits)


@dataclass(frozen=True)
class PrecisionMap:
    pairs: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.pairs[name]

    def __iter__(self):
        return iter(self.pairs)

    def __len__(self):
        return len(self.pairs)

    def validate(self, net):
        names = net.block_names
        if set(self.pairs) != set(names) or len(self.pairs) != len(names):
            missing = sorted(set(names) - set(self.pairs))
            extra = sorted(set(self.pairs) - set(names))
            raise ConfigError(f"precision map mismatch: missing {missing}, extra {extra}")
        return self


def uniform_precision(net, fmt, act_fmt=None):
    pair = PrecisionPair.of(fmt, act_fmt)
    return PrecisionMap({b.name: pair for b in net.blocks})


def assign_mixed_precision(net, sensitive=None, low="int4-fp8s", low_unsigned="uint4-fp8s",
                           high="mxint8"):
    """8-bit for sensitive and non-conv blocks, 4-bit elsewhere.

    4-bit activations are unsigned when the block input comes from a ReLU block.
    ``sensitive=None`` uses the network's configured set, falling back to the
    first two and last two conv blocks.
    """
    if sensitive is None:
        sensitive = net.sensitive if net.sensitive is not None else net.default_sensitive()
    sensitive = set(sensitive)
    net._check_names(sensitive)
    high_pair = PrecisionPair.of(high)
    pairs = {}
    for b in net.blocks:
        if not b.is_conv or b.name in sensitive:
            pairs[b.name] = high_pair
        else:
            act = low_unsigned if net.input_is_relu(b.name) else low
            pairs[b.name] = PrecisionPair.of(low, act)
    return PrecisionMap(pairs)


# -- cost model -------------------------------------------------------------


def _n_groups(fmt, channels, per_channel):
    if fmt.passthrough:
        return 0
    if fmt.granularity == "per-tensor":
        return 1
    if fmt.granularity == "per-channel":
        return channels
    return channels * math.ceil(per_channel / fmt.block_size)


@dataclass(frozen=True)
class BlockCost:
    name: str
    kind: str
    macs: int
    weighted_cost: float
    weight_bytes: float
    act_bytes: float
    scale_bytes: float

    @property
    def data_bytes(self):
        return self.weight_bytes + self.act_bytes


@dataclass(frozen=True)
class CostReport:
    entries: tuple

    def _sum(self, attr, kinds=None):
        return sum(getattr(e, attr) for e in self.entries if kinds is None or e.kind in kinds)

    @property
    def macs(self):
        return self._sum("macs")

    @property
    def weighted_cost(self):
        return self._sum("weighted_cost")

    @property
    def data_bytes(self):
        return self._sum("data_bytes")

    @property
    def scale_bytes(self):
        return self._sum("scale_bytes")

    def share(self, attr, kinds=None, names=None):
        """Fraction of total ``attr`` carried by blocks matching ``kinds``/``names``."""
        total = self._sum(attr)
        part = sum(
            getattr(e, attr) for e in self.entries
            if (kinds is None or e.kind in kinds) and (names is None or e.name in names)
        )
        return part / total if total else 0.0


def block_cost(b, p):
    """MACs, weighted compute (FP16-multiply equivalents), and bytes of one block."""
    macs = b.mac_count
    weighted = macs * p.bits / 16
    if not b.is_conv:
        return BlockCost(b.name, b.kind, macs, weighted, 0.0, b.bytes * p.bits / 16, 0.0)
    wbytes = b.weight_elems * p.weight.bits / 8
    abytes = b.act_elems * p.act.bits / 8
    scale_bytes = (
        _n_groups(p.weight, b.cin, b.cout * b.r * b.s) * p.weight.scale_bits
        + _n_groups(p.act, b.cin, b.h * b.w) * p.act.scale_bits
        + _n_groups(p.act, b.cout, b.h * b.w) * p.act.scale_bits
    ) / 8
    return BlockCost(b.name, b.kind, macs, weighted, wbytes, abytes, scale_bytes)


def network_cost(net, pmap):
    pmap.validate(net)
    return CostReport(tuple(block_cost(b, pmap[b.name]) for b in net.blocks))


def savings_report(net, pmap):
    """(compute saving, memory saving) versus an all-FP16 run of the same network.

    Memory compares data bytes; scale-factor storage is reported separately in
    :class:`CostReport`.
    """
    base = network_cost(net, uniform_precision(net, "fp16"))
    rep = network_cost(net, pmap)
    return 1 - rep.weighted_cost / base.weighted_cost, 1 - rep.data_bytes / base.data_bytes


def quantization_speedup(net, pmap):
    """FP16 weighted compute divided by the quantized weighted compute."""
    base = network_cost(net, uniform_precision(net, "fp16"))
    return base.weighted_cost / network_cost(net, pmap).weighted_cost


# -- functional convolution -------------------------------------------------
#
# Reduction order is fixed so that any channel partition reproduces the same
# floating-point result: per input channel, taps (r, s) are accumulated in
# row-major order with each term formed as (integer product) * (scale product);
# channel partial sums are then merged in ascending channel order.


def _pads(R, S):
    return (R - 1) // 2, (S - 1) // 2


def _pad(a, R, S, value=0):
    pt, pl = _pads(R, S)
    return np.pad(a, ((0, 0), (pt, R - 1 - pt), (pl, S - 1 - pl)), constant_values=value)


def _operands(q):
    codes = q.codes if q.format.passthrough else q.codes.astype(np.int64)
    return codes, q.scale_map()


def channel_partial_sums(xq, wq, channels=None):
    """Per-input-channel partial sums, shape ``(len(channels), K, H, W)``.

    ``xq`` is a quantized ``(C, H, W)`` activation, ``wq`` a quantized
    ``(C, K, R, S)`` weight.
    """
    a, sa = _operands(xq)
    wc, ws = _operands(wq)
    C, H, W = a.shape
    _, K, R, S = wc.shape
    if channels is not None:
        idx = np.asarray(channels, dtype=np.intp)
        a, sa, wc, ws = a[idx], sa[idx], wc[idx], ws[idx]
    ap, sp = _pad(a, R, S), _pad(sa, R, S, value=1.0)
    acc = np.zeros((a.shape[0], K, H, W))
    for r in range(R):
        for s in range(S):
            tap_a = ap[:, None, r:r + H, s:s + W]
            tap_s = sp[:, None, r:r + H, s:s + W]
            acc += (tap_a * wc[:, :, r, s, None, None]) * (tap_s * ws[:, :, r, s, None, None])
    return acc


def merge_partial_sums(psums):
    """Sum channel partial sums in ascending channel order."""
    out = np.zeros(psums.shape[1:])
    for p in psums:
        out += p
    return out


def apply_activation(x, activation):
    if activation == "relu":
        return relu(x)
    if activation == "silu":
        return silu(x)
    if activation == "none":
        return np.asarray(x, dtype=np.float64)
    raise DomainError(f"unknown activation {activation!r}")


def check_conv_shapes(x, w):
    x = as_activation(x, np.float64)
    w = as_weight(w, np.float64)
    if x.shape[0] != w.shape[0]:
        raise DomainError(f"activation has {x.shape[0]} channels, weight expects {w.shape[0]}")
    return x, w


def quantize_operands(x, w, p):
    x, w = check_conv_shapes(x, w)
    return quantize(x, p.act), quantize(w, p.weight)


def conv_exec_quantized(x, w, p, activation="none"):
    """Stride-1, same-padded, bias-free conv of quantized operands.

    ``x`` is ``(C, H, W)``, ``w`` is ``(C, K, R, S)``; returns ``(K, H, W)``.
    """
    xq, wq = quantize_operands(x, w, p)
    return apply_activation(merge_partial_sums(channel_partial_sums(xq, wq)), activation)


def conv2d_reference(x, w):
    """Real-valued conv with the same reduction order as the quantized path."""
    return conv_exec_quantized(x, w, PrecisionPair.of("fp16"))


def int_conv2d(codes, wcodes):
    """Exact integer conv of integer codes, ``(C,H,W) x (C,K,R,S) -> (K,H,W)`` int64."""
    a = np.asarray(codes, dtype=np.int64)
    wc = np.asarray(wcodes, dtype=np.int64)
    C, H, W = a.shape
    _, K, R, S = wc.shape
    ap = _pad(a, R, S)
    out = np.zeros((K, H, W), dtype=np.int64)
    for r in range(R):
        for s in range(S):
            out += np.einsum("chw,ck->khw", ap[:, r:r + H, s:s + W], wc[:, :, r, s])
    return out


# -- sensitivity sweep ------------------------------------------------------


def _adapt(x, b):
    """Resample a functional activation to block ``b``'s input shape."""
    C, H, W = x.shape
    if H != b.h or W != b.w:
        if H > b.h and H % b.h == 0 and W % b.w == 0:
            fh, fw = H // b.h, W // b.w
            x = x.reshape(C, b.h, fh, b.w, fw).mean(axis=(2, 4))
        elif b.h % H == 0 and b.w % W == 0:
            x = np.repeat(np.repeat(x, b.h // H, axis=1), b.w // W, axis=2)
        else:
            raise ConfigError(f"cannot resample {H}x{W} to {b.h}x{b.w} for {b.name!r}")
    if x.shape[0] != b.cin:
        x = np.resize(x, (b.cin, b.h, b.w))
    return x


def synthetic_weights(net, seed):
    rng = np.random.default_rng(seed)
    convs = net.conv_blocks
    x0 = rng.standard_normal((convs[0].cin, convs[0].h, convs[0].w))
    weights = {
        b.name: rng.standard_normal((b.cin, b.cout, b.r, b.s)) * math.sqrt(2.0 / (b.cin * b.r * b.s))
        for b in convs
    }
    return x0, weights


def _run(net, x, weights, pairs, start=0):
    convs = net.conv_blocks
    for b in convs[start:]:
        x = _adapt(x, b)
        x = conv_exec_quantized(x, weights[b.name], pairs[b.name], b.activation)
    return x


def sensitivity_sweep(net, seed=0, low="int4-fp8s", low_unsigned="uint4-fp8s", high="mxint8"):
    """End-to-end SQNR with one conv block at 4-bit and all others at 8-bit.

    Returns ``{block name: SQNR dB}`` in network order; lower means more
    sensitive. Inputs and weights are synthetic and fully determined by ``seed``.
    """
    convs = net.conv_blocks
    if not convs:
        raise ConfigError("sensitivity sweep needs conv blocks")
    x0, weights = synthetic_weights(net, seed)
    fp = PrecisionPair.of("fp16")
    reference = _run(net, x0, weights, {b.name: fp for b in convs})

    high_pair = PrecisionPair.of(high)
    high_pairs = {b.name: high_pair for b in convs}
    # all-8-bit prefix is shared by every sweep entry
    inputs, x = [], x0
    for b in convs:
        x = _adapt(x, b)
        inputs.append(x)
        x = conv_exec_quantized(x, weights[b.name], high_pair, b.activation)

    scores = {}
    for i, b in enumerate(convs):
        act = low_unsigned if np.all(inputs[i] >= 0) and net.input_is_relu(b.name) else low
        y = conv_exec_quantized(inputs[i], weights[b.name], PrecisionPair.of(low, act), b.activation)
        y = _run(net, y, weights, high_pairs, start=i + 1)
        scores[b.name] = sqnr(reference, y)
    return scores

