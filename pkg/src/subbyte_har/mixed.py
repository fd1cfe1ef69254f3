"""Softmax-weighted bit-width branches for differentiable precision search."""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, DomainError
from .quantize import (
    SUPPORTED_BITS,
    ActQuantizer,
    WeightQuantizer,
    fake_quant_act,
    fake_quant_act_grad,
    fake_quant_weight,
    fake_quant_weight_grad,
)

BRANCH_BITS = np.array(SUPPORTED_BITS, dtype=np.float64)


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_backward(probs, grad_probs):
    return probs * (grad_probs - np.dot(probs, grad_probs))


class MixedPrecisionSite:
    """One searchable tensor: branch logits plus an independent clip value per branch."""

    def __init__(self, kind: str, element_count: int, alpha_init: float, logits=None):
        if kind not in ("weight", "activation"):
            raise ConfigurationError(f"site kind must be 'weight' or 'activation', got {kind!r}")
        if element_count <= 0:
            raise ConfigurationError("element_count must be positive")
        self.kind = kind
        self.element_count = int(element_count)
        self.logits = np.zeros(len(SUPPORTED_BITS)) if logits is None else np.asarray(logits, dtype=np.float64).copy()
        self.alphas = np.full(len(SUPPORTED_BITS), float(alpha_init))

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits)

    def _quantizer(self, j):
        cls = WeightQuantizer if self.kind == "weight" else ActQuantizer
        return cls(SUPPORTED_BITS[j], float(self.alphas[j]))

    def forward(self, x):
        fq = fake_quant_weight if self.kind == "weight" else fake_quant_act
        branches = [fq(x, self._quantizer(j)) for j in range(len(SUPPORTED_BITS))]
        p = self.probs
        out = sum(p[j] * branches[j] for j in range(len(branches)))
        return out, (x, branches, p)

    def backward(self, grad, cache):
        """Return ``(grad_x, grad_logits, grad_alphas)``."""
        x, branches, p = cache
        fqg = fake_quant_weight_grad if self.kind == "weight" else fake_quant_act_grad
        gx = np.zeros_like(x, dtype=np.float64)
        galphas = np.zeros(len(SUPPORTED_BITS))
        gp = np.zeros(len(SUPPORTED_BITS))
        for j, yb in enumerate(branches):
            gp[j] = float(np.sum(grad * yb))
            gxb, ga = fqg(x, self._quantizer(j), grad * p[j])
            gx += gxb
            galphas[j] = ga
        return gx, _softmax_backward(p, gp), galphas


def mixed_weight(site: MixedPrecisionSite, w_fp):
    """``sum_b softmax(logits)_b * fake_quant_weight(w_fp, b)``."""
    if site.kind != "weight":
        raise ConfigurationError("mixed_weight needs a weight site")
    return site.forward(w_fp)[0]


def mixed_activation(site: MixedPrecisionSite, y_fp):
    if site.kind != "activation":
        raise ConfigurationError("mixed_activation needs an activation site")
    return site.forward(y_fp)[0]


def expected_bits(site: MixedPrecisionSite) -> float:
    return float(np.dot(BRANCH_BITS, site.probs) * site.element_count)


def expected_bits_grad(site: MixedPrecisionSite) -> np.ndarray:
    """Gradient of :func:`expected_bits` with respect to the site logits."""
    return _softmax_backward(site.probs, BRANCH_BITS * site.element_count)


def nas_loss(task_loss: float, sites, lam: float) -> float:
    if lam < 0:
        raise DomainError("lambda must be non-negative")
    return float(task_loss) + lam * sum(expected_bits(s) for s in sites)


def site_bits(site: MixedPrecisionSite) -> int:
    """Argmax branch; ties go to the smaller bit-width."""
    return SUPPORTED_BITS[int(np.argmax(site.logits))]
