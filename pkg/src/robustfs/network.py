"""Feature extractor, base head, EMA shadow weights and checkpoint I/O.

The extractor is an MLP whose every layer, including the last one, is
followed by ReLU, so features are nonnegative and the square-root transform
used downstream is always well defined.  Parameters are stored as plain
float32 arrays; forward passes wrap them in fresh leaf tensors so that a
caller decides per call whether parameter gradients are wanted.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import (
    BadMagicError,
    CheckpointShapeError,
    ShapeError,
    TruncatedError,
    VersionMismatchError,
)
from .tensor import Tensor

MAGIC = b"RFSC"
VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...] = (256, 128)
    feature_dim: int = 64
    num_base_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.feature_dim, self.num_base_classes)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all MlpSpec dimensions must be >= 1, got {dims}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        widths = [self.input_dim, *self.hidden_dims, self.feature_dim]
        return list(zip(widths[:-1], widths[1:]))


def extractor_names(spec: MlpSpec) -> list[str]:
    names = []
    for i in range(len(spec.layer_dims)):
        names += [f"fc{i}.weight", f"fc{i}.bias"]
    return names


HEAD_NAMES = ("head.weight", "head.bias")


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out)).astype(np.float32)


@dataclass
class Network:
    spec: MlpSpec
    theta: dict[str, np.ndarray]
    omega: dict[str, np.ndarray]
    ema_theta: dict[str, np.ndarray] = field(default_factory=dict)
    ema_tau: float = 0.999

    @classmethod
    def init(cls, spec: MlpSpec, seed: int = 0, ema_tau: float = 0.999) -> "Network":
        """Glorot-uniform weights, zero biases; the EMA shadow starts as a copy."""
        rng = np.random.default_rng(seed)
        theta = {}
        for i, (fan_in, fan_out) in enumerate(spec.layer_dims):
            theta[f"fc{i}.weight"] = _glorot(rng, fan_in, fan_out)
            theta[f"fc{i}.bias"] = np.zeros(fan_out, dtype=np.float32)
        omega = {
            "head.weight": _glorot(rng, spec.feature_dim, spec.num_base_classes),
            "head.bias": np.zeros(spec.num_base_classes, dtype=np.float32),
        }
        net = cls(spec, theta, omega, ema_tau=ema_tau)
        net.reset_ema()
        return net

    def reset_ema(self) -> None:
        self.ema_theta = {k: v.copy() for k, v in self.theta.items()}

    def copy(self) -> "Network":
        return Network(
            self.spec,
            {k: v.copy() for k, v in self.theta.items()},
            {k: v.copy() for k, v in self.omega.items()},
            {k: v.copy() for k, v in self.ema_theta.items()},
            self.ema_tau,
        )

    def parameter_tensors(self) -> dict[str, Tensor]:
        """Fresh leaf tensors over theta and omega, for one training step."""
        params = {k: Tensor(v, requires_grad=True) for k, v in self.theta.items()}
        params.update({k: Tensor(v, requires_grad=True) for k, v in self.omega.items()})
        return params

    def _check_input(self, x: Tensor) -> None:
        if x.data.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ShapeError("features", x.shape, (None, self.spec.input_dim))

    def features(self, x, use_ema: bool = False, params: Optional[dict[str, Tensor]] = None) -> Tensor:
        """Extractor output ``[batch, feature_dim]``, post-ReLU.

        With ``use_ema`` the shadow weights are read and theta is never
        touched.  ``params`` (from ``parameter_tensors``) makes the output
        differentiable wrt the extractor parameters.
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        self._check_input(x)
        if use_ema:
            source = self.ema_theta
        elif params is not None:
            source = params
        else:
            source = self.theta
        h = x
        for i in range(len(self.spec.layer_dims)):
            h = T.relu(T.affine(h, source[f"fc{i}.weight"], source[f"fc{i}.bias"]))
        return h

    def logits(self, x, use_ema: bool = False, params: Optional[dict[str, Tensor]] = None) -> Tensor:
        z = self.features(x, use_ema=use_ema, params=params)
        source = params if params is not None else self.omega
        return T.affine(z, source["head.weight"], source["head.bias"])

    def ema_update(self) -> None:
        """theta' <- tau * theta' + (1 - tau) * theta, extractor only."""
        tau = np.float32(self.ema_tau)
        rest = np.float32(1.0) - tau
        for name, current in self.theta.items():
            shadow = self.ema_theta[name]
            shadow *= tau
            shadow += rest * current

    # ------------------------------------------------------------ checkpoint

    def save(self, path) -> None:
        Path(path).write_bytes(encode_checkpoint(self))

    @classmethod
    def load(cls, path) -> "Network":
        return decode_checkpoint(Path(path).read_bytes())


def _pack_record(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    out = [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim)]
    out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def encode_checkpoint(net: Network) -> bytes:
    """Serialize to the little-endian ``RFSC`` layout.

    magic, u32 version, spec block (u32 input_dim, u32 n_hidden, u32 hidden
    dims..., u32 feature_dim, u32 num_base_classes), f64 ema_tau, u32 record
    count, records, u8 ema flag, then u32 count and EMA records when the flag
    is 1.  A record is u32 name length, UTF-8 name, u32 rank, u32 dims,
    float32 payload.
    """
    s = net.spec
    parts = [MAGIC, struct.pack("<I", VERSION)]
    parts.append(struct.pack("<II", s.input_dim, len(s.hidden_dims)))
    parts.append(struct.pack(f"<{len(s.hidden_dims)}I", *s.hidden_dims))
    parts.append(struct.pack("<II", s.feature_dim, s.num_base_classes))
    parts.append(struct.pack("<d", net.ema_tau))
    params = {**net.theta, **net.omega}
    parts.append(struct.pack("<I", len(params)))
    parts += [_pack_record(k, v) for k, v in params.items()]
    if net.ema_theta:
        parts.append(struct.pack("<BI", 1, len(net.ema_theta)))
        parts += [_pack_record(k, v) for k, v in net.ema_theta.items()]
    else:
        parts.append(struct.pack("<B", 0))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise TruncatedError(f"checkpoint truncated at byte {self.pos} (needed {n} more, have {len(self.buf) - self.pos})")
        chunk = self.buf[self.pos : end]
        self.pos = end
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_records(r: _Reader, count: int) -> dict[str, np.ndarray]:
    out = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if dims else 1
        payload = r.take(4 * n)
        out[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    return out


def _expected_shapes(spec: MlpSpec) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for i, (fan_in, fan_out) in enumerate(spec.layer_dims):
        shapes[f"fc{i}.weight"] = (fan_in, fan_out)
        shapes[f"fc{i}.bias"] = (fan_out,)
    shapes["head.weight"] = (spec.feature_dim, spec.num_base_classes)
    shapes["head.bias"] = (spec.num_base_classes,)
    return shapes


def _check_shapes(records: dict[str, np.ndarray], expected: dict[str, tuple[int, ...]], what: str) -> None:
    if set(records) != set(expected):
        missing = sorted(set(expected) - set(records))
        extra = sorted(set(records) - set(expected))
        raise CheckpointShapeError(f"{what}: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if records[name].shape != shape:
            raise CheckpointShapeError(f"{what}: {name} has shape {records[name].shape}, spec block says {shape}")


def decode_checkpoint(buf: bytes) -> Network:
    r = _Reader(buf)
    if len(buf) < 4 and not MAGIC.startswith(buf):
        raise BadMagicError(f"bad magic {buf!r}, expected {MAGIC!r}")
    magic = r.take(4)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this build reads {VERSION}")
    input_dim, n_hidden = r.unpack("<II")
    hidden = r.unpack(f"<{n_hidden}I") if n_hidden else ()
    feature_dim, num_classes = r.unpack("<II")
    try:
        spec = MlpSpec(input_dim, hidden, feature_dim, num_classes)
    except ValueError as exc:
        raise CheckpointShapeError(str(exc)) from None
    (tau,) = r.unpack("<d")
    (count,) = r.unpack("<I")
    params = _read_records(r, count)
    expected = _expected_shapes(spec)
    _check_shapes(params, expected, "parameters")
    (flag,) = r.unpack("<B")
    ema = {}
    if flag:
        (n_ema,) = r.unpack("<I")
        ema = _read_records(r, n_ema)
        _check_shapes(ema, {k: v for k, v in expected.items() if not k.startswith("head.")}, "ema")
    theta = {k: params[k] for k in extractor_names(spec)}
    omega = {k: params[k] for k in HEAD_NAMES}
    return Network(spec, theta, omega, ema, tau)


def checkpoint_hash(net: Network) -> str:
    return hashlib.sha256(encode_checkpoint(net)).hexdigest()
