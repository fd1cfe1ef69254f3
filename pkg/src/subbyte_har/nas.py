"""Differentiable per-tensor bit-width search over a fixed architecture.

Every weight tensor and every conv output gets a :class:`MixedPrecisionSite`.
Training adds ``lam * sum(expected_bits)`` to the task loss; afterwards each
site keeps its argmax branch and the resulting fixed-precision network is
fine-tuned from the searched weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DomainError
from .mixed import MixedPrecisionSite, expected_bits, expected_bits_grad, site_bits
from .model_space import ArchConfig
from .network import ALPHA_INIT, Network, initial_alpha
from .quantize import SUPPORTED_BITS
from .data import stratified_split
from .train import TrainProtocol, _fit, evaluate, train_fixed

log = logging.getLogger(__name__)


def default_sweep() -> list:
    return [round(float(v), 12) for v in np.linspace(1e-4, 1e-3, 10)]


@dataclass
class NasConfig:
    lambda_sweep: list = field(default_factory=default_sweep)
    search_epochs: int | None = None  # None: use the protocol's max_epochs
    finetune: bool = True

    def __post_init__(self):
        self.lambda_sweep = [float(v) for v in self.lambda_sweep]
        if not self.lambda_sweep:
            raise ConfigurationError("lambda sweep must not be empty")
        if any(v < 0 for v in self.lambda_sweep):
            raise DomainError("lambda values must be non-negative")


@dataclass
class NasResult:
    lam: float
    arch: ArchConfig
    model: Network
    holdout_score: float
    model_bits: int  # weight storage only
    cost_bits: int  # every searched site, as regularized


def site_counts(arch: ArchConfig) -> dict:
    """Element count per site: weights by tensor size, activations by conv output size at batch 1."""
    counts, c_in = {}, arch.in_channels
    for i, c in enumerate(arch.channels):
        counts[f"w{i}"] = c * c_in * arch.kernel
        c_in = c
    counts[f"w{arch.n_conv}"] = arch.fc_in_features * arch.n_classes
    length = arch.length
    for i, c in enumerate(arch.channels):
        counts[f"a{i}"] = c * length
        if arch.pools[i]:
            length //= arch.pools[i]
    return counts


def attach_sites(model: Network) -> Network:
    """Switch ``model`` into search mode (in place) and return it."""
    counts = site_counts(model.arch)
    sites = {}
    for name, count in counts.items():
        i = int(name[1:])
        if name[0] == "w":
            sites[name] = MixedPrecisionSite("weight", count, float(model.alpha_w[i]))
        else:
            sites[name] = MixedPrecisionSite("activation", count, ALPHA_INIT)
    model.mixed = sites
    return model


def regularizer(lam: float):
    """``extra_loss`` callback for training: ``lam * sum(expected_bits)`` and its logit gradients."""
    def extra(model):
        total, grads = 0.0, {}
        for name, site in model.mixed.items():
            total += expected_bits(site)
            grads[f"{name}.logits"] = lam * expected_bits_grad(site)
        return lam * total, grads
    return extra


def extract_fixed(model: Network) -> ArchConfig:
    """Argmax branch per site (ties to fewer bits).  Pools simply see the
    preceding conv's codes, and the network input stays 8-bit."""
    if model.mixed is None:
        raise ConfigurationError("model has no search sites")
    n = model.arch.n_conv
    w_bits = [site_bits(model.mixed[f"w{i}"]) for i in range(n + 1)]
    a_bits = [site_bits(model.mixed[f"a{i}"]) for i in range(n)]
    return model.arch.with_bits(w_bits, a_bits)


def fixed_from_search(model: Network) -> Network:
    """Fixed-precision network carrying the searched weights and chosen-branch clips."""
    arch = extract_fixed(model)
    out = Network(arch, model.seed, model.widths)
    for i in range(arch.n_conv):
        out.conv_w[i][...] = model.conv_w[i]
        out.conv_b[i][...] = model.conv_b[i]
        for w, bn in model.bns[i].params.items():
            dst = out.bns[i].params[w]
            for f in ("gamma", "beta", "running_mean", "running_var"):
                getattr(dst, f)[...] = getattr(bn, f)
    out.fc_w[...] = model.fc_w
    out.fc_b[...] = model.fc_b
    for i, b in enumerate(arch.w_bits):
        out.alpha_w[i] = model.mixed[f"w{i}"].alphas[SUPPORTED_BITS.index(b)]
    for i, b in enumerate(arch.a_bits):
        # a searched 1-bit clip sits near the shared init, which stalls fixed binary training
        out.alpha_a[i] = initial_alpha(1) if b == 1 else model.mixed[f"a{i}"].alphas[SUPPORTED_BITS.index(b)]
    out.input_scale, out.input_zero_point = model.input_scale, model.input_zero_point
    return out


def bit_totals(arch: ArchConfig) -> tuple:
    """``(weight bits, weight + activation bits)`` of a fixed assignment."""
    counts = site_counts(arch)
    wb = sum(counts[f"w{i}"] * b for i, b in enumerate(arch.w_bits))
    ab = sum(counts[f"a{i}"] * b for i, b in enumerate(arch.a_bits))
    return wb, wb + ab


def search_once(base_arch: ArchConfig, data, protocol: TrainProtocol, lam: float, nas: NasConfig | None = None,
                seed: int = 0, echo=None) -> NasResult:
    nas = nas or NasConfig()
    if lam < 0:
        raise DomainError("lambda must be non-negative")
    model = attach_sites(Network(base_arch, seed))
    search_protocol = protocol
    if nas.search_epochs is not None:
        search_protocol = replace(protocol, max_epochs=nas.search_epochs)
    model = _fit(model, data, search_protocol, (1.0,), extra_loss=regularizer(lam), echo=echo)
    fixed = fixed_from_search(model)
    if nas.finetune:
        fixed = train_fixed(fixed, data, protocol, echo=echo)
    if nas.finetune:
        score = max((h["holdout_score"] for h in fixed.history), default=float("nan"))
    else:
        # same split _fit draws first from the protocol seed
        _, hold = stratified_split(data.y, protocol.holdout_fraction, np.random.default_rng(protocol.seed))
        score = evaluate(fixed, data.subset(hold) if hold.size else data).balanced_accuracy
    wb, cb = bit_totals(fixed.arch)
    log.info("lambda=%g bits w=%s a=%s", lam, fixed.arch.w_bits, fixed.arch.a_bits)
    return NasResult(lam, fixed.arch, fixed, score, wb, cb)


def nas_search(base_arch: ArchConfig, data, protocol: TrainProtocol, nas: NasConfig | None = None,
               seed: int = 0, report_path=None, echo=None) -> list:
    """One search + extraction + fine-tune per lambda, all from the same seed."""
    nas = nas or NasConfig()
    results = [search_once(base_arch, data, protocol, lam, nas, seed, echo) for lam in nas.lambda_sweep]
    if report_path is not None:
        write_sweep_report(results, report_path)
    return results


def sweep_report(results) -> str:
    lines = ["lambda,w_bits,a_bits,model_bits,cost_bits,holdout_score,arch_digest"]
    for r in results:
        lines.append(f"{r.lam!r},{'/'.join(map(str, r.arch.w_bits))},{'/'.join(map(str, r.arch.a_bits))},"
                     f"{r.model_bits},{r.cost_bits},{r.holdout_score!r},{r.arch.digest}")
    return "\n".join(lines) + "\n"


def write_sweep_report(results, path) -> None:
    Path(path).write_text(sweep_report(results))


def non_increasing_violations(results) -> list:
    """Indices ``i`` where extracted cost bits strictly increase from sweep point ``i - 1``."""
    ordered = sorted(results, key=lambda r: r.lam)
    return [i for i in range(1, len(ordered)) if ordered[i].cost_bits > ordered[i - 1].cost_bits]
