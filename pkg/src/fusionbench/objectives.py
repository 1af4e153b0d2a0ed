"""Task losses and auxiliary multimodal objectives, all differentiable torch functions.

Auxiliary heads (``g1``, ``g2``, decoders) are passed in as callables so the same
loss can be used with linear maps, MLPs or the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

EPS = 1e-8


class NonFinitePrediction(ValueError):
    """A model output handed to a loss contains NaN."""


@dataclass
class LossTerm:
    name: str
    weight: float
    value: torch.Tensor

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError(f"loss weight for {self.name!r} must be non-negative")


@dataclass
class CompositeObjective:
    terms: list = field(default_factory=list)

    def __post_init__(self):
        if not self.terms:
            raise ValueError("an objective needs at least one term")

    @property
    def total(self):
        out = 0.0
        for term in self.terms:
            out = out + term.weight * term.value
        return out

    def values(self):
        return {t.name: float(t.value.detach()) for t in self.terms}

    def __getitem__(self, name):
        for term in self.terms:
            if term.name == name:
                return term
        raise KeyError(name)


def task_loss(pred, y, task_kind="classification"):
    """Cross-entropy over softmax (classification), BCE per label (multilabel) or MSE."""
    if torch.isnan(pred).any():
        raise NonFinitePrediction("NaN in predictions")
    if task_kind == "classification":
        return F.cross_entropy(pred, y.long())
    if task_kind == "multilabel":
        return F.binary_cross_entropy_with_logits(pred, y.to(pred.dtype))
    if task_kind == "regression":
        return F.mse_loss(pred, y.to(pred.dtype).reshape(pred.shape))
    raise ValueError(f"unknown task kind {task_kind!r}")


def _apply(head, z):
    return z if head is None else head(z)


def pearson_per_dim(a, b):
    """Per-column Pearson correlation over the batch; columns with (near) zero
    variance in either input get correlation 0."""
    a = a - a.mean(dim=0)
    b = b - b.mean(dim=0)
    va, vb = (a * a).mean(dim=0), (b * b).mean(dim=0)
    ok = (va > EPS) & (vb > EPS)
    denom = torch.sqrt(torch.where(ok, va * vb, torch.ones_like(va)))
    corr = (a * b).mean(dim=0) / denom
    return torch.where(ok, corr, torch.zeros_like(corr))


def cca_loss(z1, z2, g1=None, g2=None):
    """Negative mean per-dimension correlation between g1(z1) and g2(z2) over a batch."""
    if z1.shape[0] < 2:
        raise ValueError("correlation needs a batch of at least 2")
    return -pearson_per_dim(_apply(g1, z1), _apply(g2, z2)).mean()


def _cos(a, b):
    na = torch.linalg.vector_norm(a, dim=1).clamp_min(EPS)
    nb = torch.linalg.vector_norm(b, dim=1).clamp_min(EPS)
    return (a * b).sum(dim=1) / (na * nb)


def refnet_contrastive_loss(z_mm, z1, z2, g1=None, g2=None):
    """(1 - cos(z_mm, g1(z1))) + (1 - cos(z_mm, g2(z2))), averaged over the batch."""
    return ((1 - _cos(z_mm, _apply(g1, z1))) + (1 - _cos(z_mm, _apply(g2, z2)))).mean()


def median_bandwidth(q, p):
    pooled = torch.cat([q, p]).detach()
    dist = torch.cdist(pooled, pooled)
    off = dist[~torch.eye(len(pooled), dtype=torch.bool)]
    return float(off.median().clamp_min(EPS)) if off.numel() else 1.0


def mmd(q, p, bandwidth=None, unbiased=True):
    """Squared MMD between sample sets with a Gaussian kernel
    k(x, y) = exp(-|x - y|^2 / (2 h^2)). ``bandwidth=None`` uses the median heuristic."""
    if len(q) == 0 or len(p) == 0:
        raise ValueError("both sample sets must be non-empty")
    if bandwidth is None:
        bandwidth = median_bandwidth(q, p)
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    q, p = q.reshape(len(q), -1), p.reshape(len(p), -1)

    def gram(a, b):
        return torch.exp(-torch.cdist(a, b).pow(2) / (2 * bandwidth ** 2))

    kqq, kpp, kqp = gram(q, q), gram(p, p), gram(q, p)
    n, m = len(q), len(p)
    if unbiased:
        if n < 2 or m < 2:
            raise ValueError("unbiased MMD needs at least 2 samples per set")
        term_q = (kqq.sum() - kqq.diagonal().sum()) / (n * (n - 1))
        term_p = (kpp.sum() - kpp.diagonal().sum()) / (m * (m - 1))
    else:
        term_q, term_p = kqq.mean(), kpp.mean()
    return term_q + term_p - 2 * kqp.mean()


def reconstruction_error(x, x_hat, normalize=True):
    """Batch mean of per-sample L2 reconstruction error.

    With ``normalize`` the norm is divided by sqrt(elements per sample), i.e. the
    per-sample RMS error, which keeps the scale independent of input shape.
    """
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    diff = (x - x_hat).flatten(1)
    err = torch.linalg.vector_norm(diff, dim=1)
    if normalize:
        err = err / diff.shape[1] ** 0.5
    return err.mean()


def mctn_cycle_loss(x1, x2, x1_hat, x2_hat, normalize=True):
    """|x1 - x1_hat| + |x2 - x2_hat| along the translation cycle."""
    return reconstruction_error(x1, x1_hat, normalize) + reconstruction_error(x2, x2_hat, normalize)


def mfm_objective(xs, y, zs, z_y, decoders, head, lam, task_kind="classification",
                  prior=None, bandwidth=None, normalize=True, generator=None):
    """Reconstruction of every modality from (z_i, z_y), prediction from z_y, and an
    MMD pull of the latent codes towards a unit Gaussian.

    ``prior`` may carry pre-drawn unit-Gaussian samples; otherwise they are drawn from
    ``generator``. Latents are the concatenation [z_1, ..., z_M, z_y].
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    recon = sum(reconstruction_error(x, dec(z, z_y), normalize)
                for x, z, dec in zip(xs, zs, decoders))
    task = task_loss(head(z_y), y, task_kind)
    latent = torch.cat([*zs, z_y], dim=1)
    if prior is None:
        prior = torch.randn(latent.shape, generator=generator, dtype=latent.dtype)
    reg = mmd(latent, prior, bandwidth) if lam > 0 else latent.new_zeros(())
    return CompositeObjective([LossTerm("reconstruction", 1.0, recon),
                               LossTerm("task", 1.0, task),
                               LossTerm("mmd", float(lam), reg)])
