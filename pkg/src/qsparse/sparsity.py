"""Per-channel activation sparsity: measurement, classification, synthetic traces.

A trace records, for every time step ``t`` and channel ``c``, the fraction of
zero elements in that channel. Optionally it also carries the activations
themselves, stored on disk as bitmap-compressed channels.
"""

import csv
import io
import struct
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .errors import ConfigError, DomainError, FormatError
from .tensorkit import as_activation, compress_channel

DEFAULT_THRESHOLD = 0.30

MAGIC = b"SQDMTRC1"
VERSION = 1
FLAG_TENSORS = 0x1
_HEADER = struct.Struct("<8sIIIIII")


@dataclass(eq=False)
class SparsityTrace:
    """Zero fractions ``sparsity[t, c]`` and optional ``tensors[t, c, h, w]``.

    ``states`` holds the generator's latent channel states (True = sparse state)
    when the trace was synthesized; it is not serialized.
    """

    sparsity: np.ndarray
    height: int = 0
    width: int = 0
    tensors: np.ndarray | None = None
    states: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.sparsity = np.asarray(self.sparsity, dtype=np.float32)
        if self.sparsity.ndim != 2:
            raise DomainError("sparsity must be (timesteps, channels)")
        if np.any(~np.isfinite(self.sparsity)) or np.any(self.sparsity < 0) or np.any(self.sparsity > 1):
            raise DomainError("sparsity fractions must lie in [0, 1]")
        if self.tensors is not None:
            self.tensors = np.asarray(self.tensors, dtype=np.float32)
            expected = (self.timesteps, self.channels, self.height, self.width)
            if self.tensors.shape != expected:
                raise DomainError(f"tensors shape {self.tensors.shape} != {expected}")

    @property
    def timesteps(self):
        return self.sparsity.shape[0]

    @property
    def channels(self):
        return self.sparsity.shape[1]

    def __eq__(self, other):
        if not isinstance(other, SparsityTrace):
            return NotImplemented
        same_tensors = (self.tensors is None and other.tensors is None) or (
            self.tensors is not None and other.tensors is not None
            and np.array_equal(self.tensors, other.tensors)
        )
        return (
            (self.height, self.width) == (other.height, other.width)
            and np.array_equal(self.sparsity, other.sparsity)
            and same_tensors
        )


@dataclass(frozen=True, eq=False)
class ChannelClassification:
    """Dense/sparse partition of channels; ``sparse[c]`` is True for sparse channels.

    ``source_timestep`` is the step whose measurements produced the partition
    (older than ``timestep`` when the classification is stale).
    """

    timestep: int
    sparse: np.ndarray
    threshold: float
    source_timestep: int | None = None

    @property
    def sparse_channels(self):
        return np.flatnonzero(self.sparse)

    @property
    def dense_channels(self):
        return np.flatnonzero(~self.sparse)

    @property
    def n_channels(self):
        return self.sparse.size


def measure_channel_sparsity(act):
    """Zero fraction of each channel of a ``(C, H, W)`` activation."""
    act = as_activation(act)
    C = act.shape[0]
    flat = act.reshape(C, -1)
    return (flat == 0).sum(axis=1) / flat.shape[1]


def classify_channels(sparsity, threshold=DEFAULT_THRESHOLD, timestep=0):
    """A channel is sparse when its zero fraction is at least ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise DomainError(f"threshold must lie in [0, 1], got {threshold}")
    frac = np.asarray(sparsity, dtype=np.float64)
    return ChannelClassification(timestep, frac >= threshold, threshold, timestep)


class SparsityDetector(BaseEstimator):
    """Output-side sparsity detector: measures channels and labels them sparse/dense.

    ``transform`` returns per-channel zero fractions; ``predict`` returns a
    boolean array that is True for sparse channels.
    """

    def __init__(self, threshold=DEFAULT_THRESHOLD):
        self.threshold = threshold

    def fit(self, X, y=None):
        if not 0.0 <= self.threshold <= 1.0:
            raise DomainError(f"threshold must lie in [0, 1], got {self.threshold}")
        X = as_activation(X)
        self.n_channels_ = X.shape[0]
        return self

    def _check(self, X):
        check_is_fitted(self, "n_channels_")
        X = as_activation(X)
        if X.shape[0] != self.n_channels_:
            raise DomainError(f"expected {self.n_channels_} channels, got {X.shape[0]}")
        return X

    def transform(self, X):
        return measure_channel_sparsity(self._check(X))

    def predict(self, X):
        return self.transform(X) >= self.threshold

    def fit_predict(self, X, y=None):
        return self.fit(X).predict(X)


# -- synthetic traces -------------------------------------------------------


@dataclass(frozen=True)
class TraceGenParams:
    """Two-state per-channel Markov model of temporal sparsity.

    Each channel is in a sparse or dense state. Between steps it keeps its state
    with probability ``persistence`` and otherwise redraws it from the
    stationary mix, which is chosen so the mean zero fraction equals
    ``target_mean``. Elements of a channel are zero independently with the zero
    probability of its current state.
    """

    channels: int = 256
    timesteps: int = 64
    target_mean: float = 0.65
    persistence: float = 0.9
    sparse_state_sparsity: float = 0.70
    dense_state_sparsity: float = 0.15
    height: int = 16
    width: int = 16
    seed: int = 0
    keep_tensors: bool = True

    def __post_init__(self):
        for name in ("target_mean", "persistence", "sparse_state_sparsity", "dense_state_sparsity"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        for name in ("channels", "timesteps", "height", "width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        self.sparse_fraction  # validates reachability

    @property
    def sparse_fraction(self):
        """Stationary probability of the sparse state."""
        hi, lo, m = self.sparse_state_sparsity, self.dense_state_sparsity, self.target_mean
        if hi == lo:
            if abs(m - hi) > 1e-12:
                raise ConfigError(f"target mean {m} unreachable with both states at {hi}")
            return 1.0
        pi = (m - lo) / (hi - lo)
        if not 0.0 <= pi <= 1.0:
            raise ConfigError(
                f"target mean {m} unreachable with state sparsities {lo} and {hi}"
            )
        return pi


def generate_trace(p=None, **overrides):
    """Synthesize a trace (and activations) that is fully determined by ``p.seed``."""
    if p is None:
        p = TraceGenParams(**overrides)
    elif overrides:
        raise TypeError("pass either params or keyword overrides, not both")
    rng = np.random.default_rng(p.seed)
    pi = p.sparse_fraction
    C, T, H, W = p.channels, p.timesteps, p.height, p.width
    n = H * W

    states = np.empty((T, C), dtype=bool)
    sparsity = np.empty((T, C), dtype=np.float32)
    tensors = np.empty((T, C, H, W), dtype=np.float32) if p.keep_tensors else None

    state = rng.random(C) < pi
    for t in range(T):
        if t > 0:
            keep = rng.random(C) < p.persistence
            redraw = rng.random(C) < pi
            state = np.where(keep, state, redraw)
        states[t] = state
        zero_prob = np.where(state, p.sparse_state_sparsity, p.dense_state_sparsity)
        zeros = rng.random((C, n)) < zero_prob[:, None]
        values = rng.uniform(0.05, 1.0, size=(C, n)).astype(np.float32)
        sparsity[t] = zeros.sum(axis=1) / n
        if tensors is not None:
            tensors[t] = np.where(zeros, np.float32(0), values).reshape(C, H, W)
    return SparsityTrace(sparsity, H, W, tensors, states)


def apply_update_schedule(trace, threshold=DEFAULT_THRESHOLD, period=1):
    """Classification used at each time step when re-classifying every ``period`` steps.

    Fresh classifications are computed at steps that are multiples of ``period``
    and held, stale, in between.
    """
    if period < 1:
        raise DomainError(f"update period must be >= 1, got {period}")
    out, current = [], None
    for t in range(trace.timesteps):
        if t % period == 0:
            current = classify_channels(trace.sparsity[t], threshold, timestep=t)
        out.append(ChannelClassification(t, current.sparse, threshold, current.source_timestep))
    return out


def sparse_portion_sparsity(trace, schedule):
    """Mean zero fraction over channel-steps classified sparse (NaN if none)."""
    mask = np.stack([cls.sparse for cls in schedule])
    if not mask.any():
        return float("nan")
    return float(trace.sparsity[mask].astype(np.float64).mean())


# -- binary format ----------------------------------------------------------


def serialize_trace(trace):
    """Encode a trace in the little-endian ``SQDMTRC1`` container."""
    flags = FLAG_TENSORS if trace.tensors is not None else 0
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, VERSION, flags, trace.channels, trace.timesteps,
                           trace.height, trace.width))
    for t in range(trace.timesteps):
        buf.write(trace.sparsity[t].astype("<f4").tobytes())
        if flags & FLAG_TENSORS:
            for ch in trace.tensors[t]:
                cc = compress_channel(ch)
                buf.write(cc.bitmap.tobytes())
                buf.write(cc.values.astype("<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated stream: need {n} bytes for {what}", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk


def parse_trace(data):
    """Decode bytes produced by :func:`serialize_trace`."""
    rd = _Reader(bytes(data))
    magic, version, flags, C, T, H, W = _HEADER.unpack(rd.take(_HEADER.size, "header"))
    if magic != MAGIC:
        raise FormatError(f"bad magic {bytes(magic)!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 8)
    if flags & ~FLAG_TENSORS:
        raise FormatError(f"unknown flag bits {flags:#x}", 12)
    has_tensors = bool(flags & FLAG_TENSORS)
    n = H * W
    nbitmap = (n + 7) // 8
    sparsity = np.empty((T, C), dtype=np.float32)
    tensors = np.zeros((T, C, H, W), dtype=np.float32) if has_tensors else None
    for t in range(T):
        start = rd.pos
        row = np.frombuffer(rd.take(4 * C, f"sparsity record {t}"), dtype="<f4")
        if np.any(~np.isfinite(row)) or np.any(row < 0) or np.any(row > 1):
            raise FormatError(f"sparsity record {t} has fractions outside [0, 1]", start)
        sparsity[t] = row
        if not has_tensors:
            continue
        for c in range(C):
            bitmap = np.frombuffer(rd.take(nbitmap, f"bitmap t={t} c={c}"), dtype=np.uint8)
            mask = np.unpackbits(bitmap, count=n, bitorder="little").astype(bool)
            if n % 8 and np.unpackbits(bitmap, bitorder="little")[n:].any():
                raise FormatError(f"padding bits set in bitmap t={t} c={c}", rd.pos - nbitmap)
            nnz = int(mask.sum())
            vals = np.frombuffer(rd.take(4 * nnz, f"values t={t} c={c}"), dtype="<f4")
            flat = np.zeros(n, dtype=np.float32)
            flat[mask] = vals
            tensors[t, c] = flat.reshape(H, W)
    if rd.pos != len(rd.data):
        raise FormatError(f"{len(rd.data) - rd.pos} trailing bytes", rd.pos)
    try:
        return SparsityTrace(sparsity, H, W, tensors)
    except DomainError as exc:
        raise FormatError(str(exc)) from exc


def write_trace(path, trace):
    with open(path, "wb") as fh:
        fh.write(serialize_trace(trace))


def read_trace(path):
    with open(path, "rb") as fh:
        return parse_trace(fh.read())


def trace_to_csv(trace, header=None):
    """Long-form CSV with columns timestep, channel, sparsity."""
    out = io.StringIO()
    if header:
        out.write(header)
    wr = csv.writer(out, lineterminator="\n")
    wr.writerow(["timestep", "channel", "sparsity"])
    for t in range(trace.timesteps):
        for c in range(trace.channels):
            wr.writerow([t, c, repr(float(trace.sparsity[t, c]))])
    return out.getvalue()
