"""Architecture descriptions, the two 1D-CNN templates, and grid enumeration.

Template ``A``: three Conv1D layers each followed by a size-2 MaxPool, then a
dense classifier.  Template ``B``: two Conv1D layers with optional size-2/4
pooling.  Kernel size is one global choice per configuration.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field, replace

from .errors import ConfigurationError
from .kvfile import format_kv, parse_kv
from .quantize import SUPPORTED_BITS

POW2_CHANNELS = (2, 4, 8, 16, 32, 64, 128)
KERNELS = (7, 15)
TEMPLATE_CONVS = {"A": 3, "B": 2}


@dataclass(frozen=True)
class ArchConfig:
    template: str
    channels: tuple
    kernel: int
    pools: tuple  # 0 marks an absent pooling layer
    w_bits: tuple  # one per conv, then the dense layer
    a_bits: tuple  # one per conv output
    n_classes: int
    in_channels: int = 3
    length: int = 64

    def __post_init__(self):
        for name in ("channels", "pools", "w_bits", "a_bits"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    @property
    def n_conv(self) -> int:
        return len(self.channels)

    def validate(self) -> None:
        if self.template not in TEMPLATE_CONVS:
            raise ConfigurationError(f"unknown template {self.template!r}")
        n = TEMPLATE_CONVS[self.template]
        if len(self.channels) != n or len(self.pools) != n:
            raise ConfigurationError(f"template {self.template} needs {n} conv and pool entries")
        if len(self.w_bits) != n + 1 or len(self.a_bits) != n:
            raise ConfigurationError(f"template {self.template} needs {n + 1} weight and {n} activation bit-widths")
        limit = 128 if self.template == "A" else 32
        for c in self.channels:
            if c not in POW2_CHANNELS or c > limit:
                raise ConfigurationError(f"channel count {c} not a power of two in [2, {limit}]")
        if self.kernel not in KERNELS:
            raise ConfigurationError(f"kernel size must be one of {KERNELS}, got {self.kernel}")
        allowed_pools = {2} if self.template == "A" else {0, 2, 4}
        if any(p not in allowed_pools for p in self.pools):
            raise ConfigurationError(f"pools {self.pools} invalid for template {self.template}")
        for b in self.w_bits + self.a_bits:
            if b not in SUPPORTED_BITS:
                raise ConfigurationError(f"bit-width {b} unsupported")
        if self.n_classes < 2 or self.in_channels < 1 or self.length < 1:
            raise ConfigurationError("n_classes >= 2, in_channels >= 1 and length >= 1 required")

    def lengths(self) -> list:
        """Feature-map length after each conv block (post-pooling)."""
        out, length = [], self.length
        for p in self.pools:
            if p:
                length //= p
            out.append(length)
        return out

    @property
    def fc_in_features(self) -> int:
        return self.channels[-1] * self.lengths()[-1]

    def with_bits(self, w_bits, a_bits) -> "ArchConfig":
        return replace(self, w_bits=tuple(w_bits), a_bits=tuple(a_bits))

    def uniform_bits(self):
        """The single bit-width if all tensors share one, else ``None``."""
        bits = set(self.w_bits) | set(self.a_bits)
        return bits.pop() if len(bits) == 1 else None

    def to_dict(self) -> dict:
        return {
            "template": self.template,
            "channels": list(self.channels),
            "kernel": self.kernel,
            "pools": list(self.pools),
            "w_bits": list(self.w_bits),
            "a_bits": list(self.a_bits),
            "n_classes": self.n_classes,
            "in_channels": self.in_channels,
            "length": self.length,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        try:
            return cls(
                template=str(d["template"]),
                channels=_int_tuple(d["channels"]),
                kernel=int(d["kernel"]),
                pools=_int_tuple(d["pools"]),
                w_bits=_int_tuple(d["w_bits"]),
                a_bits=_int_tuple(d["a_bits"]),
                n_classes=int(d["n_classes"]),
                in_channels=int(d.get("in_channels", 3)),
                length=int(d.get("length", 64)),
            )
        except KeyError as exc:
            raise ConfigurationError(f"architecture config missing key {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(f"bad architecture config: {exc}") from None

    def to_text(self) -> str:
        return format_kv(self.to_dict())

    @classmethod
    def from_text(cls, text: str) -> "ArchConfig":
        return cls.from_dict(parse_kv(text))

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def _int_tuple(v):
    if isinstance(v, str):
        return tuple(int(t) for t in v.split(",") if t.strip())
    if isinstance(v, int):
        return (v,)
    return tuple(int(t) for t in v)


@dataclass(frozen=True)
class GridSpec:
    template: str
    channel_choices: tuple
    kernel_choices: tuple = KERNELS
    pool_choices: tuple = (2,)
    bits: int = 8
    n_classes: int = 6
    in_channels: int = 3
    length: int = 64

    @classmethod
    def template_a(cls, bits=8, **kw) -> "GridSpec":
        return cls("A", POW2_CHANNELS, KERNELS, (2,), bits, **kw)

    @classmethod
    def template_b(cls, bits=8, **kw) -> "GridSpec":
        return cls("B", (2, 4, 8, 16, 32), KERNELS, (0, 2, 4), bits, **kw)


def enumerate_grid(spec: GridSpec) -> list:
    """Cartesian product in (channels per conv, kernel, pool per position) order."""
    if spec.template not in TEMPLATE_CONVS:
        raise ConfigurationError(f"unknown template {spec.template!r}")
    for name in ("channel_choices", "kernel_choices", "pool_choices"):
        if not getattr(spec, name):
            raise ConfigurationError(f"grid choice set {name} is empty")
    n = TEMPLATE_CONVS[spec.template]
    configs = []
    for chans in itertools.product(sorted(spec.channel_choices), repeat=n):
        for k in sorted(spec.kernel_choices):
            for pools in itertools.product(sorted(spec.pool_choices), repeat=n):
                configs.append(ArchConfig(
                    template=spec.template,
                    channels=chans,
                    kernel=k,
                    pools=pools,
                    w_bits=(spec.bits,) * (n + 1),
                    a_bits=(spec.bits,) * n,
                    n_classes=spec.n_classes,
                    in_channels=spec.in_channels,
                    length=spec.length,
                ))
    return configs


def instantiate(cfg: ArchConfig, seed: int = 0):
    """Build an untrained :class:`~subbyte_har.network.Network` for ``cfg``."""
    from .network import Network

    return Network(cfg, seed=seed)
