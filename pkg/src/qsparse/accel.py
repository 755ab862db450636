"""Analytical cycle and energy model of a heterogeneous dense/sparse accelerator.

Input channels of each conv layer are split into a dense group, run on dense
processing elements (DPEs), and a sparse group, run on sparse processing
elements (SPEs) that only multiply nonzero activations and pay a bitmap-decode
cost. The two groups produce partial sums that are merged at the end of the
layer. The baseline is a purely dense accelerator with two DPEs.

A PE multiplier lane performs one FP16, two 8-bit or four 4-bit multiplies per
cycle, so effective lanes scale with ``16 / bits``.
"""

import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError, DomainError
from .netspec import (
    PrecisionPair, apply_activation, channel_partial_sums, merge_partial_sums,
    quantization_speedup, quantize_operands,
)
from .sparsity import ChannelClassification, apply_update_schedule
from .tensorkit import compress_channel


@dataclass(frozen=True)
class EnergyTable:
    """Per-event energies in pJ."""

    mac_int4: float = 0.1
    mac_int8: float = 0.2
    mac_fp16: float = 0.8
    buf_byte: float = 0.15
    dram_byte: float = 10.0

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ConfigError(f"energy entry {k} must be non-negative")

    def mac(self, bits):
        if bits <= 4:
            return self.mac_int4
        if bits <= 8:
            return self.mac_int8
        return self.mac_fp16


@dataclass(frozen=True)
class ArchConfig:
    """PE counts and datapath parameters.

    With ``reconfigurable`` set, an SPE that runs out of sparse work switches to
    its dense datapath and takes a share of the dense channels.
    """

    dpe: int = 1
    spe: int = 1
    lanes: int = 128
    decode_width: int = 128
    merge_cycles: int = 1
    reconfigurable: bool = True
    energy: EnergyTable = field(default_factory=EnergyTable)

    def __post_init__(self):
        if self.dpe < 0 or self.spe < 0 or self.dpe + self.spe < 1:
            raise ConfigError("need at least one PE and non-negative PE counts")
        if self.lanes < 1 or self.decode_width < 1 or self.merge_cycles < 0:
            raise ConfigError("lanes and decode_width must be positive, merge_cycles >= 0")

    @classmethod
    def baseline(cls, like=None):
        """Purely dense accelerator with two DPEs."""
        like = like or cls()
        return replace(like, dpe=2, spe=0)

    @property
    def total_pes(self):
        return self.dpe + self.spe


def arch_from_dict(doc):
    doc = dict(doc or {})
    energy = doc.pop("energy", None) or {}
    allowed = {"dpe", "spe", "lanes", "decode_width", "merge_cycles", "reconfigurable"}
    extra = set(doc) - allowed
    if extra:
        raise ConfigError(f"unknown arch fields {sorted(extra)}")
    try:
        return ArchConfig(energy=EnergyTable(**energy), **doc)
    except TypeError as exc:
        raise ConfigError(f"bad arch config: {exc}") from exc


def load_arch(path):
    if path is None:
        return ArchConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"arch config not found: {path}")
    try:
        return arch_from_dict(yaml.safe_load(path.read_text()))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse arch config: {exc}") from exc


# -- engine models ----------------------------------------------------------


def dpe_cycles(macs, lanes):
    if lanes <= 0:
        raise DomainError("lanes must be positive")
    return -(-int(macs) // int(lanes))


def spe_cycles(nnz_macs, total_elements, lanes, decode_width):
    """Compute cycles over nonzero MACs plus bitmap-decode cycles."""
    if lanes <= 0 or decode_width <= 0:
        raise DomainError("lanes and decode_width must be positive")
    return -(-int(nnz_macs) // int(lanes)) + -(-int(total_elements) // int(decode_width))


# -- counters and energy ----------------------------------------------------


@dataclass
class Counters:
    """Event counts: MACs per operand bit width, buffer bytes, off-chip bytes."""

    macs: dict = field(default_factory=dict)
    buffer_bytes: float = 0.0
    dram_bytes: float = 0.0

    def add_macs(self, bits, n):
        self.macs[bits] = self.macs.get(bits, 0) + n

    def __add__(self, other):
        macs = dict(self.macs)
        for b, n in other.macs.items():
            macs[b] = macs.get(b, 0) + n
        return Counters(macs, self.buffer_bytes + other.buffer_bytes,
                        self.dram_bytes + other.dram_bytes)

    def scaled(self, k):
        return Counters({b: n * k for b, n in self.macs.items()},
                        self.buffer_bytes * k, self.dram_bytes * k)


@dataclass(frozen=True)
class EnergyBreakdown:
    compute: float
    buffer: float
    dram: float

    @property
    def total(self):
        return self.compute + self.buffer + self.dram

    def __add__(self, other):
        return EnergyBreakdown(self.compute + other.compute, self.buffer + other.buffer,
                               self.dram + other.dram)


ZERO_ENERGY = EnergyBreakdown(0.0, 0.0, 0.0)


def energy_of(counters, table=None):
    """Linear combination of event counts with per-event energies (pJ)."""
    table = table or EnergyTable()
    compute = sum(n * table.mac(bits) for bits, n in counters.macs.items())
    return EnergyBreakdown(float(compute), counters.buffer_bytes * table.buf_byte,
                           counters.dram_bytes * table.dram_byte)


# -- layer simulation -------------------------------------------------------


@dataclass(frozen=True)
class LayerProfile:
    """Work description of one conv layer.

    Each input channel holds ``elems_per_channel`` activations; each activation
    feeds ``macs_per_element`` multiplies (``cout * r * s``).
    """

    name: str
    channels: int
    elems_per_channel: int
    macs_per_element: int
    weight_elems: int = 0
    out_elems: int = 0
    weight_bits: int = 16
    act_bits: int = 16

    @classmethod
    def from_block(cls, b, p=None):
        p = p or PrecisionPair.of("fp16")
        return cls(b.name, b.cin, b.h * b.w, b.cout * b.r * b.s, b.weight_elems,
                   b.cout * b.h * b.w, p.weight.bits, p.act.bits)

    @property
    def bits(self):
        return max(self.weight_bits, self.act_bits)

    @property
    def macs_per_channel(self):
        return self.elems_per_channel * self.macs_per_element

    @property
    def total_macs(self):
        return self.channels * self.macs_per_channel


@dataclass(frozen=True)
class LayerResult:
    name: str
    cycles: int
    dpe_cycles: int
    spe_cycles: int
    merge_cycles: int
    dense_macs: int
    sparse_nnz_macs: int
    skipped_macs: int
    counters: Counters

    @property
    def total_macs(self):
        return self.dense_macs + self.sparse_nnz_macs + self.skipped_macs


def _as_mask(cls, channels):
    mask = cls.sparse if isinstance(cls, ChannelClassification) else np.asarray(cls, dtype=bool)
    if mask.shape != (channels,):
        raise DomainError(f"classification covers {mask.size} channels, layer has {channels}")
    return mask


def _ceil_div(a, b):
    return -(-np.asarray(a, dtype=np.int64) // np.int64(b))


def _layer_batch(profile, zero_frac, sparse, arch):
    """Vectorized layer model over a leading time axis: inputs are ``(T, C)``."""
    n = profile.elems_per_channel
    mpe = profile.macs_per_element
    nnz = np.rint((1.0 - zero_frac) * n).astype(np.int64)
    n_sparse = sparse.sum(axis=1).astype(np.int64)
    n_dense = profile.channels - n_sparse
    dense_macs = n_dense * n * mpe
    nnz_macs = np.where(sparse, nnz, 0).sum(axis=1) * mpe
    skipped = n_sparse * n * mpe - nnz_macs

    lanes = arch.lanes * 16 // profile.bits
    if arch.spe:
        spe = _ceil_div(nnz_macs, arch.spe * lanes) + _ceil_div(n_sparse * n, arch.spe * arch.decode_width)
        spe = np.where(n_sparse > 0, spe, 0)
    else:
        spe = np.zeros_like(dense_macs)
    dpe = _ceil_div(dense_macs, arch.dpe * lanes) if arch.dpe else np.zeros_like(dense_macs)

    if arch.dpe == 0:
        latency = spe + _ceil_div(dense_macs, arch.spe * lanes)
    elif arch.reconfigurable and arch.spe:
        # idle SPE time absorbs dense work
        shared = _ceil_div(dense_macs + spe * arch.spe * lanes, arch.total_pes * lanes)
        latency = np.where(spe < dpe, np.maximum(spe, shared), np.maximum(dpe, spe))
    else:
        latency = np.maximum(dpe, spe)
    merge = np.where((dense_macs > 0) & (n_sparse > 0), arch.merge_cycles, 0)

    act_bytes = profile.act_bits / 8
    bitmap_bytes = n_sparse * ((n + 7) // 8)
    executed = dense_macs + nnz_macs
    weight_bytes = profile.weight_elems * profile.weight_bits / 8
    out_bytes = profile.out_elems * act_bytes
    in_bytes = (n_dense * n + np.where(sparse, nnz, 0).sum(axis=1)) * act_bytes + bitmap_bytes
    detector = out_bytes if arch.spe else 0.0
    buffer_bytes = executed * act_bytes + weight_bytes + out_bytes + bitmap_bytes + detector
    dram_bytes = weight_bytes + in_bytes
    return dict(cycles=latency + merge, dpe=dpe, spe=spe, merge=merge, dense_macs=dense_macs,
                nnz_macs=nnz_macs, skipped=skipped, executed=executed,
                buffer_bytes=buffer_bytes, dram_bytes=dram_bytes)


def _check_arch_for(sparse, dense_any, arch):
    if sparse.any() and arch.spe == 0:
        raise ConfigError("sparse channels need at least one SPE")
    if dense_any and arch.dpe == 0 and not arch.reconfigurable:
        raise ConfigError("dense channels need a DPE or reconfigurable SPEs")


def simulate_layer(profile, zero_frac, cls, arch):
    """Cycles and event counts of one layer for one channel classification.

    ``zero_frac`` holds the actual zero fraction of every input channel; sparse
    channels are charged for their nonzero MACs only, dense channels for all.
    Latency is the slower engine group plus a merge step when both groups are
    non-empty.
    """
    zero_frac = np.asarray(zero_frac, dtype=np.float64)
    if zero_frac.shape != (profile.channels,):
        raise DomainError("zero_frac must have one entry per channel")
    sparse = _as_mask(cls, profile.channels)
    _check_arch_for(sparse, not sparse.all(), arch)
    r = {k: v[0] for k, v in _layer_batch(profile, zero_frac[None], sparse[None], arch).items()}
    c = Counters()
    c.add_macs(profile.bits, int(r["executed"]))
    c.buffer_bytes = float(r["buffer_bytes"])
    c.dram_bytes = float(r["dram_bytes"])
    return LayerResult(profile.name, int(r["cycles"]), int(r["dpe"]), int(r["spe"]),
                       int(r["merge"]), int(r["dense_macs"]), int(r["nnz_macs"]),
                       int(r["skipped"]), c)


def simulate_annotated(b, p, arch):
    """Non-conv block: dense work spread over every PE able to run it."""
    lanes = arch.lanes * 16 // p.bits
    pes = arch.total_pes if arch.reconfigurable else arch.dpe
    c = Counters()
    c.add_macs(p.bits, b.macs)
    nbytes = b.bytes * p.bits / 16
    c.buffer_bytes = float(nbytes)
    c.dram_bytes = float(nbytes)
    return LayerResult(b.name, dpe_cycles(b.macs, pes * lanes), 0, 0, 0, b.macs, 0, 0, c)


# -- full runs --------------------------------------------------------------


@dataclass
class SimResult:
    cycles: int
    baseline_cycles: int
    dpe_cycles: int
    spe_cycles: int
    energy: EnergyBreakdown
    baseline_energy: EnergyBreakdown
    speedup_quant: float
    per_timestep: list
    per_layer: list

    @property
    def speedup_sparsity(self):
        return self.baseline_cycles / self.cycles

    @property
    def speedup_total(self):
        return self.speedup_quant * self.speedup_sparsity

    @property
    def energy_saving(self):
        return 1.0 - self.energy.total / self.baseline_energy.total

    @property
    def load_balance(self):
        """Busy-cycle ratio of the less loaded engine type to the more loaded one."""
        hi = max(self.dpe_cycles, self.spe_cycles)
        return min(self.dpe_cycles, self.spe_cycles) / hi if hi else 1.0

    def summary(self):
        return {
            "cycles": self.cycles,
            "baseline_cycles": self.baseline_cycles,
            "speedup_sparsity": self.speedup_sparsity,
            "speedup_quant": self.speedup_quant,
            "speedup_total": self.speedup_total,
            "energy_pj": self.energy.total,
            "baseline_energy_pj": self.baseline_energy.total,
            "energy_saving": self.energy_saving,
            "energy_breakdown_pj": vars(self.energy),
            "baseline_energy_breakdown_pj": vars(self.baseline_energy),
            "load_balance": self.load_balance,
        }


def _layer_inputs(net, trace):
    """Which conv layers see ReLU (sparse-eligible) inputs; validates trace width."""
    eligible = {b.name: net.input_is_relu(b.name) for b in net.conv_blocks}
    need = max((b.cin for b in net.conv_blocks if eligible[b.name]), default=0)
    if need > trace.channels:
        raise ConfigError(f"trace has {trace.channels} channels but layers need up to {need}")
    return eligible


def _energy_arrays(executed_by_bits, buffer_bytes, dram_bytes, table):
    compute = sum(n * table.mac(bits) for bits, n in executed_by_bits.items())
    return compute, buffer_bytes * table.buf_byte, dram_bytes * table.dram_byte


def simulate_run(net, pmap, trace, schedule=None, arch=None, threshold=0.30, period=1):
    """Simulate every time step of ``trace`` through ``net``.

    Conv layers whose input comes from a ReLU block use the first ``cin``
    channels of the trace and of the step's classification; other conv inputs
    are treated as dense. ``schedule`` defaults to re-classification every
    ``period`` steps at ``threshold``. The baseline runs the same work on two
    DPEs with equal total lanes.
    """
    arch = arch or ArchConfig()
    base_arch = ArchConfig.baseline(arch)
    pmap.validate(net)
    T = trace.timesteps
    if T < 1:
        raise ConfigError("trace has no time steps")
    if schedule is None:
        schedule = apply_update_schedule(trace, threshold, period)
    if len(schedule) != T:
        raise ConfigError("schedule length does not match trace time steps")
    eligible = _layer_inputs(net, trace)
    masks = np.stack([cls.sparse for cls in schedule])
    if masks.shape[1] < trace.channels:
        raise ConfigError("classification covers fewer channels than the trace")
    Z = trace.sparsity.astype(np.float64)

    keys = ("cycles", "dpe", "spe", "dense_macs", "nnz_macs", "skipped")
    runs = {"het": (arch, {}), "base": (base_arch, {})}
    for _, (_, tot) in runs.items():
        for k in keys + ("buffer_bytes", "dram_bytes"):
            tot[k] = np.zeros(T)
        tot["executed"] = defaultdict(lambda: np.zeros(T))
    per_layer = []
    for b in net.blocks:
        row = {"layer": b.name, "kind": b.kind}
        p = pmap[b.name]
        for tag, (a, tot) in runs.items():
            if b.is_conv:
                prof = LayerProfile.from_block(b, p)
                if eligible[b.name] and tag == "het":
                    z, m = Z[:, :b.cin], masks[:, :b.cin]
                else:
                    z = Z[:, :b.cin] if eligible[b.name] else np.zeros((T, b.cin))
                    m = np.zeros((T, b.cin), dtype=bool)
                _check_arch_for(m, not m.all(), a)
                r = _layer_batch(prof, z, m, a)
                bits = prof.bits
            else:
                lr = simulate_annotated(b, p, a)
                r = {k: np.full(T, v) for k, v in dict(
                    cycles=lr.cycles, dpe=0, spe=0, dense_macs=lr.dense_macs, nnz_macs=0,
                    skipped=0, executed=lr.dense_macs, buffer_bytes=lr.counters.buffer_bytes,
                    dram_bytes=lr.counters.dram_bytes).items()}
                bits = p.bits
            for k in keys + ("buffer_bytes", "dram_bytes"):
                tot[k] = tot[k] + r[k]
            tot["executed"][bits] = tot["executed"][bits] + r["executed"]
            prefix = "" if tag == "het" else "baseline_"
            row[prefix + "cycles"] = int(np.sum(r["cycles"]))
            if tag == "het":
                row.update(dense_macs=int(np.sum(r["dense_macs"])),
                           sparse_nnz_macs=int(np.sum(r["nnz_macs"])),
                           skipped_macs=int(np.sum(r["skipped"])))
        per_layer.append(row)

    het, base = runs["het"][1], runs["base"][1]
    e = _energy_arrays(het["executed"], het["buffer_bytes"], het["dram_bytes"], arch.energy)
    eb = _energy_arrays(base["executed"], base["buffer_bytes"], base["dram_bytes"], arch.energy)
    per_t = []
    for t, cls in enumerate(schedule):
        sp = trace.sparsity[t][cls.sparse[:trace.channels]]
        per_t.append({
            "timestep": t,
            "cycles": int(het["cycles"][t]),
            "baseline_cycles": int(base["cycles"][t]),
            "speedup": float(base["cycles"][t] / het["cycles"][t]),
            "energy_pj": float(e[0][t] + e[1][t] + e[2][t]),
            "baseline_energy_pj": float(eb[0][t] + eb[1][t] + eb[2][t]),
            "n_sparse": int(sp.size),
            "sparse_portion_sparsity": float(sp.astype(np.float64).mean()) if sp.size else float("nan"),
            "stale_steps": t - cls.source_timestep if cls.source_timestep is not None else 0,
        })
    total = lambda parts: EnergyBreakdown(*(float(np.sum(x)) for x in parts))
    return SimResult(
        cycles=int(het["cycles"].sum()), baseline_cycles=int(base["cycles"].sum()),
        dpe_cycles=int(het["dpe"].sum()), spe_cycles=int(het["spe"].sum()),
        energy=total(e), baseline_energy=total(eb),
        speedup_quant=quantization_speedup(net, pmap),
        per_timestep=per_t, per_layer=per_layer,
    )


# -- functional split execution ---------------------------------------------


def _sparse_channel_psums(cc, sa, wc, ws, H, W):
    """Partial sums of one bitmap-compressed channel, visiting nonzeros only."""
    K, R, S = wc.shape
    pt, pl = (R - 1) // 2, (S - 1) // 2
    pos = np.flatnonzero(cc.mask)
    hp, wp = np.divmod(pos, W)
    vals = cc.values
    svals = sa.reshape(-1)[pos]
    acc = np.zeros((K, H, W))
    for r in range(R):
        for s in range(S):
            ho, wo = hp - r + pt, wp - s + pl
            ok = (ho >= 0) & (ho < H) & (wo >= 0) & (wo < W)
            term = (vals[ok][None, :] * wc[:, r, s, None]) * (svals[ok][None, :] * ws[:, r, s, None])
            acc[:, ho[ok], wo[ok]] += term
    return acc


def split_conv_exec(x, w, cls, p=None, activation="none"):
    """Conv computed as a dense-channel part plus a sparse-channel part.

    The sparse part iterates the nonzeros of bitmap-compressed channels. Partial
    sums of both parts are merged in channel order, so the result equals
    :func:`qsparse.netspec.conv_exec_quantized` exactly for any classification.
    """
    p = p or PrecisionPair.of("int4-fp8s")
    xq, wq = quantize_operands(x, w, p)
    C, H, W = xq.shape
    sparse = _as_mask(cls, C)
    K = wq.shape[1]
    psums = np.empty((C, K, H, W))
    dense_idx = np.flatnonzero(~sparse)
    if dense_idx.size:
        psums[dense_idx] = channel_partial_sums(xq, wq, dense_idx)

    codes = xq.codes if xq.format.passthrough else xq.codes.astype(np.int64)
    wcodes = wq.codes if wq.format.passthrough else wq.codes.astype(np.int64)
    smap, wsmap = xq.scale_map(), wq.scale_map()
    for c in np.flatnonzero(sparse):
        cc = compress_channel(codes[c])
        psums[c] = _sparse_channel_psums(cc, smap[c], wcodes[c], wsmap[c], H, W)
    return apply_activation(merge_partial_sums(psums), activation)
