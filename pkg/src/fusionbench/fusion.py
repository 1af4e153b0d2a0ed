"""Fusion operators: each maps a list of unimodal representations to z_mm.

The functional forms (``tensor_fuse``, ``lrtf_fuse``, ``mi_fuse`` ...) are plain
tensor functions; the modules wrap them with learnable parameters and are looked
up by their config tag through :func:`build_fusion`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .encoders import MLP, MultiHeadAttention, sinusoidal_positions, uniform_fan_in_

TF_DIM_CAP = 10 ** 7

FUSION_TAGS = ("ef", "lf", "tf", "lrtf", "mi-matrix", "mi-vector", "mi-scalar", "film",
               "nlgate", "gate", "mult")


class ScalabilityError(ValueError):
    """Raised when a tensor product would exceed the configured size cap."""


def early_fuse(xs):
    """Concatenate raw inputs after flattening all non-batch dims."""
    return torch.cat([x.flatten(1) for x in xs], dim=1)


def late_fuse(zs):
    return torch.cat([z.flatten(1) for z in zs], dim=1)


def _with_bias(z):
    return torch.cat([z, torch.ones_like(z[:, :1])], dim=1)


def tensor_fusion_dim(dims):
    return math.prod(d + 1 for d in dims)


def tensor_fuse(zs, cap=TF_DIM_CAP):
    """Flattened outer product of the bias-augmented vectors [z_m; 1].

    The first modality's index varies slowest, so ``out[..., i*(d2+1) + j]`` is
    ``[z1;1]_i * [z2;1]_j`` for two modalities.
    """
    if len(zs) < 2:
        raise ValueError("tensor fusion needs at least 2 modalities")
    size = tensor_fusion_dim([z.shape[1] for z in zs])
    if size > cap:
        raise ScalabilityError(f"tensor fusion output of {size} entries exceeds cap {cap}")
    out = _with_bias(zs[0])
    for z in zs[1:]:
        out = (out[:, :, None] * _with_bias(z)[:, None, :]).flatten(1)
    return out


def lrtf_fuse(zs, factors):
    """Low-rank tensor fusion: sum over rank of the elementwise product across
    modalities of ``[z_m; 1] @ W_m[r]``. ``factors[m]`` has shape (rank, d_m + 1, d_out)."""
    if not factors or factors[0].shape[0] < 1:
        raise ValueError("rank must be >= 1")
    rank, d_out = factors[0].shape[0], factors[0].shape[2]
    fused = None
    for z, W in zip(zs, factors):
        if W.shape != (rank, z.shape[1] + 1, d_out):
            raise ValueError(f"factor shape {tuple(W.shape)} does not match input dim {z.shape[1]}")
        proj = torch.einsum("bi,rio->bro", _with_bias(z), W)
        fused = proj if fused is None else fused * proj
    return fused.sum(dim=1)


@dataclass
class MIParams:
    """Bilinear parameters. Shapes by mode (d1, d2 input dims):

    * matrix: W (d1, d_out, d2), U (d1, d_out), V (d_out, d2), b (d_out)
    * vector: W (d1, d2), U (d1,), V (d1, d2), b (d1)   -- W and U diagonal in (i, k)
    * scalar: W (d2,), U (1,), V (d2,), b (1,)
    """

    W: torch.Tensor
    U: torch.Tensor
    V: torch.Tensor
    b: torch.Tensor


def mi_shapes(mode, d1, d2, d_out=None):
    if mode == "matrix":
        if d_out is None:
            raise ValueError("matrix mode needs d_out")
        return {"W": (d1, d_out, d2), "U": (d1, d_out), "V": (d_out, d2), "b": (d_out,)}
    if mode == "vector":
        return {"W": (d1, d2), "U": (d1,), "V": (d1, d2), "b": (d1,)}
    if mode == "scalar":
        return {"W": (d2,), "U": (1,), "V": (d2,), "b": (1,)}
    raise ValueError(f"unknown MI mode {mode!r}")


def mi_fuse(z1, z2, params, mode):
    """z_mm = z1 W z2 + z1^T U + V z2 + b under the structural constraint of ``mode``."""
    d1, d2 = z1.shape[1], z2.shape[1]
    d_out = params.b.shape[0] if mode == "matrix" else None
    expected = mi_shapes(mode, d1, d2, d_out)
    for name, shape in expected.items():
        got = tuple(getattr(params, name).shape)
        if got != shape:
            raise ValueError(f"MI {mode} mode expects {name} of shape {shape}, got {got}")
    if mode == "matrix":
        return (torch.einsum("bi,ioj,bj->bo", z1, params.W, z2)
                + z1 @ params.U + z2 @ params.V.T + params.b)
    if mode == "vector":
        return z1 * (z2 @ params.W.T + params.U) + z2 @ params.V.T + params.b
    gamma = z2 @ params.W + params.U
    beta = z2 @ params.V + params.b
    return z1 * gamma[:, None] + beta[:, None]


def film_fuse(z1, z2, gamma_net, beta_net):
    """gamma(z2) * z1 + beta(z2) with arbitrary conditioning networks."""
    gamma, beta = gamma_net(z2), beta_net(z2)
    if gamma.shape != z1.shape or beta.shape != z1.shape:
        raise ValueError(f"FiLM conditioning outputs {tuple(gamma.shape)} do not match z1 "
                         f"{tuple(z1.shape)}")
    return gamma * z1 + beta


def gate_fuse(z1, z2, gate):
    return z1 * gate(z2)


class Concat(nn.Module):
    """Late fusion (``lf``) or, applied to raw inputs, early fusion (``ef``)."""

    needs_sequences = False

    def __init__(self, in_dims, early=False):
        super().__init__()
        self.early = early
        self.out_dim = sum(in_dims)

    def forward(self, zs):
        return early_fuse(zs) if self.early else late_fuse(zs)


class TensorFusion(nn.Module):
    needs_sequences = False

    def __init__(self, in_dims, cap=TF_DIM_CAP):
        super().__init__()
        if len(in_dims) < 2:
            raise ValueError("tensor fusion needs at least 2 modalities")
        self.out_dim = tensor_fusion_dim(in_dims)
        if self.out_dim > cap:
            raise ScalabilityError(f"tensor fusion output of {self.out_dim} entries exceeds "
                                   f"cap {cap}; use lrtf instead")
        self.cap = cap

    def forward(self, zs):
        return tensor_fuse(zs, self.cap)


class LowRankTensorFusion(nn.Module):
    """
    Rank-factorised tensor fusion.

    :param in_dims: unimodal representation sizes
    :param out_dim: size of the fused vector
    :param rank: number of rank-one terms; must be >= 1
    """

    needs_sequences = False

    def __init__(self, in_dims, out_dim=16, rank=4):
        super().__init__()
        if rank < 1:
            raise ValueError("rank must be >= 1")
        self.factors = nn.ParameterList(
            nn.Parameter(torch.empty(rank, d + 1, out_dim)) for d in in_dims)
        self.out_dim = out_dim
        self.rank = rank

    def forward(self, zs):
        return lrtf_fuse(zs, list(self.factors))


class MultInteractions(nn.Module):
    """
    Multiplicative interaction layer between two modalities.

    :param in_dims: (d1, d2)
    :param mode: ``matrix``, ``vector`` or ``scalar``
    :param out_dim: output size in matrix mode; other modes output d1
    """

    needs_sequences = False

    def __init__(self, in_dims, mode="matrix", out_dim=16):
        super().__init__()
        if len(in_dims) != 2:
            raise ValueError("MI fusion takes exactly 2 modalities")
        d1, d2 = in_dims
        self.mode = mode
        shapes = mi_shapes(mode, d1, d2, out_dim)
        self.W = nn.Parameter(torch.empty(shapes["W"]))
        self.U = nn.Parameter(torch.empty(shapes["U"]))
        self.V = nn.Parameter(torch.empty(shapes["V"]))
        self.b = nn.Parameter(torch.empty(shapes["b"]))
        self.custom_init = {"W": 1 / math.sqrt(d1 * d2), "U": 1 / math.sqrt(d1),
                            "V": 1 / math.sqrt(d2), "b": 1 / math.sqrt(d2)}
        self.out_dim = out_dim if mode == "matrix" else d1

    def params(self):
        return MIParams(self.W, self.U, self.V, self.b)

    def forward(self, zs):
        return mi_fuse(zs[0], zs[1], self.params(), self.mode)


class FiLM(nn.Module):
    """gamma/beta networks conditioned on the second modality modulate the first.

    With ``hidden_dims=()`` both networks are single linear maps and the layer is
    the same function as ``mi-vector``.
    """

    needs_sequences = False

    def __init__(self, in_dims, hidden_dims=(16,)):
        super().__init__()
        if len(in_dims) != 2:
            raise ValueError("FiLM takes exactly 2 modalities")
        d1, d2 = in_dims
        self.gamma_net = MLP(d2, hidden_dims, d1, final_activation=False)
        self.beta_net = MLP(d2, hidden_dims, d1, final_activation=False)
        self.out_dim = d1

    def forward(self, zs):
        return film_fuse(zs[0], zs[1], self.gamma_net, self.beta_net)


class DenseGate(nn.Module):
    def __init__(self, d2, d1):
        super().__init__()
        self.linear = nn.Linear(d2, d1)

    def forward(self, z2):
        return torch.sigmoid(self.linear(z2))


class QKVGate(nn.Module):
    """Attention gate: each output unit owns a learned query that attends over the
    features of z2, embedded as scalar tokens ``z2_j * a_j + c_j``. A zero
    parameter set gives a gate of exactly 0.5."""

    def __init__(self, d2, d1, key_dim=8):
        super().__init__()
        self.queries = nn.Parameter(torch.empty(d1, key_dim))
        self.key_scale = nn.Parameter(torch.empty(d2, key_dim))
        self.key_shift = nn.Parameter(torch.empty(d2, key_dim))
        self.value_scale = nn.Parameter(torch.empty(d2))
        self.value_shift = nn.Parameter(torch.empty(d2))
        self.bias = nn.Parameter(torch.empty(d1))
        self.key_dim = key_dim
        self.custom_init = {"queries": 1 / math.sqrt(key_dim), "key_scale": 1.0,
                            "key_shift": 1.0, "value_scale": 1 / math.sqrt(d2),
                            "value_shift": 1 / math.sqrt(d2), "bias": 0.1}

    def forward(self, z2):
        keys = z2[:, :, None] * self.key_scale + self.key_shift
        values = z2 * self.value_scale + self.value_shift
        logits = torch.einsum("qk,bjk->bqj", self.queries, keys) / math.sqrt(self.key_dim)
        attn = torch.softmax(logits, dim=-1)
        return torch.sigmoid(torch.einsum("bqj,bj->bq", attn, values) + self.bias)


class Gate(nn.Module):
    """z1 * h(z2) with h a sigmoid gate (``dense`` or ``qkv`` variant)."""

    needs_sequences = False

    def __init__(self, in_dims, variant="qkv", key_dim=8):
        super().__init__()
        if len(in_dims) != 2:
            raise ValueError("gated fusion takes exactly 2 modalities")
        d1, d2 = in_dims
        if variant == "dense":
            self.gate = DenseGate(d2, d1)
        elif variant == "qkv":
            self.gate = QKVGate(d2, d1, key_dim)
        else:
            raise ValueError(f"unknown gate variant {variant!r}")
        self.variant = variant
        self.out_dim = d1

    def forward(self, zs):
        return gate_fuse(zs[0], zs[1], self.gate)


class CrossmodalBlock(nn.Module):
    """Queries from sequence ``a`` attend over keys/values from sequence ``b``,
    followed by a feed-forward sublayer; both sublayers are pre-norm residual."""

    def __init__(self, d_a, d_b, d_model, heads=1, positional=True):
        super().__init__()
        self.proj_a = nn.Linear(d_a, d_model)
        self.proj_b = nn.Linear(d_b, d_model)
        self.norm_a = nn.LayerNorm(d_model)
        self.norm_b = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, heads)
        self.norm_ff = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, 2 * d_model), nn.ReLU(),
                                nn.Linear(2 * d_model, d_model))
        self.positional = positional

    def forward(self, a, b):
        qa, kb = self.proj_a(a), self.proj_b(b)
        if self.positional:
            qa = qa + sinusoidal_positions(qa.shape[1], qa.shape[2], qa.dtype)
            kb = kb + sinusoidal_positions(kb.shape[1], kb.shape[2], kb.dtype)
        h = qa + self.attn(self.norm_a(qa), self.norm_b(kb))
        return h + self.ff(self.norm_ff(h))


def crossmodal_pairs(n):
    """Ordered pairs (query, context): (0,1),(1,0) for two inputs; for three,
    (0,1),(1,0),(0,2),(2,0),(1,2),(2,1)."""
    pairs = []
    for i in range(n):
        for j in range(i + 1, n):
            pairs += [(i, j), (j, i)]
    return sorted(pairs, key=lambda p: (min(p), max(p)))


class CrossmodalFusion(nn.Module):
    """
    Crossmodal transformer fusion over temporal representations.

    :param in_dims: feature dims of the input sequences
    :param d_model: attention width; must be divisible by ``heads``
    :param groups: required above three inputs -- a partition of modality indices into
        at most three groups whose members are concatenated feature-wise first
    """

    needs_sequences = True

    def __init__(self, in_dims, d_model=8, heads=1, positional=True, groups=None):
        super().__init__()
        if d_model % heads:
            raise ValueError(f"{heads} heads do not divide d_model={d_model}")
        M = len(in_dims)
        if groups is None:
            if M > 3:
                raise ValueError(f"crossmodal fusion over {M} > 3 modalities needs a "
                                 "`groups` clustering into at most 3 groups")
            groups = [[m] for m in range(M)]
        flat = sorted(m for g in groups for m in g)
        if flat != list(range(M)) or not 2 <= len(groups) <= 3:
            raise ValueError("groups must partition all modalities into 2 or 3 groups")
        self.groups = [list(g) for g in groups]
        group_dims = [sum(in_dims[m] for m in g) for g in self.groups]
        self.pairs = crossmodal_pairs(len(self.groups))
        self.blocks = nn.ModuleList(
            CrossmodalBlock(group_dims[i], group_dims[j], d_model, heads, positional)
            for i, j in self.pairs)
        self.out_dim = len(self.pairs) * d_model
        self.d_model = d_model

    def forward(self, zs):
        seqs = [torch.cat([zs[m] for m in g], dim=-1) for g in self.groups]
        pooled = [blk(seqs[i], seqs[j]).mean(dim=1) for blk, (i, j) in zip(self.blocks, self.pairs)]
        return torch.cat(pooled, dim=1)


def crossmodal_fuse(z1, z2, module):
    """[pool CM(z1, z2), pool CM(z2, z1)] using a two-input :class:`CrossmodalFusion`."""
    return module([z1, z2])


def build_fusion(tag, in_dims, seed=0, dtype=torch.float32, **params):
    """Instantiate the fusion module registered under ``tag`` with seeded parameters."""
    in_dims = list(in_dims)
    if tag in ("ef", "lf"):
        module = Concat(in_dims, early=tag == "ef")
    elif tag == "tf":
        module = TensorFusion(in_dims, **params)
    elif tag == "lrtf":
        module = LowRankTensorFusion(in_dims, **params)
    elif tag.startswith("mi-"):
        module = MultInteractions(in_dims, mode=tag[3:], **params)
    elif tag == "film":
        module = FiLM(in_dims, **params)
    elif tag == "nlgate":
        module = Gate(in_dims, variant="qkv", **params)
    elif tag == "gate":
        module = Gate(in_dims, variant="dense", **params)
    elif tag == "mult":
        module = CrossmodalFusion(in_dims, **params)
    else:
        raise ValueError(f"unknown fusion tag {tag!r}; choose from {FUSION_TAGS}")
    module.tag = tag
    uniform_fan_in_(module, seed)
    return module.to(dtype)
