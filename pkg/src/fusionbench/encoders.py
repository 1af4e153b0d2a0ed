"""Small unimodal encoders mapping one modality to a representation z_m.

Every encoder is an ``nn.Module`` whose ``forward(x, sequence=False)`` returns a
``(batch, out_dim)`` vector; temporal encoders return the full ``(batch, T, out_dim)``
sequence when ``sequence=True``. Parameters are initialised from a seeded uniform
fan-in distribution so that a spec fully determines its parameters.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import torch
from torch import nn
from torch.func import functional_call

ENCODER_KINDS = ("mlp", "recurrent", "convolutional", "transformer", "deep-set", "identity")

COMPATIBLE = {
    "mlp": ("static-vector", "table"),
    "recurrent": ("temporal-sequence",),
    "transformer": ("temporal-sequence",),
    "convolutional": ("image-grid",),
    "deep-set": ("set",),
    "identity": ("static-vector", "table", "temporal-sequence", "image-grid", "set"),
}

ACTIVATIONS = {"relu": nn.ReLU, "tanh": nn.Tanh, "sigmoid": nn.Sigmoid, "identity": nn.Identity}


@dataclass(frozen=True)
class EncoderSpec:
    kind: str
    in_shape: tuple
    out_dim: int
    hidden_dims: tuple = field(default=())
    seed: int = 0
    activation: str = "relu"
    positional: bool = True
    heads: int = 1

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        object.__setattr__(self, "in_shape", tuple(int(s) for s in self.in_shape))
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.out_dim < 1:
            raise ValueError("out_dim must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        expected_rank = {"recurrent": 2, "transformer": 2, "convolutional": 3, "deep-set": 2}
        if self.kind in expected_rank and len(self.in_shape) != expected_rank[self.kind]:
            raise ValueError(f"{self.kind} encoder needs an input of rank "
                             f"{expected_rank[self.kind]}, got shape {self.in_shape}")
        if self.kind == "identity":
            flat = math.prod(self.in_shape)
            out = self.in_shape[-1] if len(self.in_shape) == 2 else flat
            if self.out_dim not in (flat, out):
                raise ValueError(f"identity encoder out_dim must be {flat}, got {self.out_dim}")
        if self.kind == "recurrent" and self.hidden_dims:
            raise ValueError("recurrent encoders use out_dim as their hidden size")

    def to_json(self):
        return {"kind": self.kind, "in_shape": list(self.in_shape), "out_dim": self.out_dim,
                "hidden_dims": list(self.hidden_dims), "seed": self.seed,
                "activation": self.activation, "positional": self.positional,
                "heads": self.heads}

    @classmethod
    def from_json(cls, obj):
        obj = dict(obj)
        obj["in_shape"] = tuple(obj["in_shape"])
        obj["hidden_dims"] = tuple(obj.get("hidden_dims", ()))
        return cls(**obj)


def check_compatible(spec, modality_kind):
    if modality_kind not in COMPATIBLE[spec.kind]:
        raise ValueError(f"{spec.kind} encoder cannot consume a {modality_kind} modality")


def uniform_fan_in_(module, seed):
    """Re-initialise every parameter of ``module`` from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    Weights use their trailing-dimension product as fan-in; a bias reuses the bound
    of the weight with the same suffix. Norm layers are reset to (1, 0).
    """
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for mod in module.modules():
            own = dict(mod.named_parameters(recurse=False))
            if not own:
                continue
            if isinstance(mod, nn.LayerNorm):
                mod.weight.fill_(1.0)
                mod.bias.fill_(0.0)
                continue
            bounds = {}
            for name, p in own.items():
                if name.startswith("weight") and p.ndim >= 2:
                    bound = 1.0 / math.sqrt(max(1, math.prod(p.shape[1:])))
                    bounds[name[len("weight"):]] = bound
            for name, p in own.items():
                if getattr(mod, "custom_init", None) and name in mod.custom_init:
                    bound = mod.custom_init[name]
                elif name.startswith("weight") and p.ndim >= 2:
                    bound = bounds[name[len("weight"):]]
                elif name.startswith("bias"):
                    bound = bounds.get(name[len("bias"):], 1.0 / math.sqrt(max(1, p.numel())))
                else:
                    bound = 1.0 / math.sqrt(max(1, p.shape[-1] if p.ndim else 1))
                p.copy_((torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 - 1) * bound)
    return module


class MLP(nn.Module):
    """Stack of linear layers; ``final_activation`` controls the last layer."""

    def __init__(self, in_dim, hidden_dims, out_dim, activation="relu", final_activation=True):
        super().__init__()
        dims = [in_dim, *hidden_dims, out_dim]
        layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            layers.append(nn.Linear(a, b))
            if i < len(dims) - 2 or final_activation:
                layers.append(ACTIVATIONS[activation]())
        self.net = nn.Sequential(*layers)
        self.out_dim = out_dim

    def forward(self, x):
        return self.net(x)


class MLPEncoder(nn.Module):
    temporal = False

    def __init__(self, spec):
        super().__init__()
        self.mlp = MLP(math.prod(spec.in_shape), spec.hidden_dims, spec.out_dim, spec.activation)
        self.out_dim = spec.out_dim

    def forward(self, x, sequence=False):
        return self.mlp(x.flatten(1))


class RecurrentEncoder(nn.Module):
    """Single-layer GRU; the vector output is the final hidden state."""

    temporal = True

    def __init__(self, spec):
        super().__init__()
        self.gru = nn.GRU(spec.in_shape[1], spec.out_dim, batch_first=True)
        self.out_dim = spec.out_dim

    def forward(self, x, sequence=False):
        seq, _ = self.gru(x)
        return seq if sequence else seq[:, -1]


def sinusoidal_positions(T, d, dtype=torch.float32):
    pos = torch.arange(T, dtype=torch.float64)[:, None]
    i = torch.arange(d, dtype=torch.float64)[None, :]
    angle = pos / torch.pow(10000.0, (2 * (i // 2)) / d)
    table = torch.where(i % 2 == 0, torch.sin(angle), torch.cos(angle))
    return table.to(dtype)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with separate query and key/value sources."""

    def __init__(self, d_model, heads=1):
        super().__init__()
        if d_model % heads:
            raise ValueError(f"{heads} heads do not divide model dim {d_model}")
        self.heads = heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)
        self.last_weights = None

    def forward(self, query, context):
        B, Tq, d = query.shape
        Tk = context.shape[1]
        h = self.heads
        q = self.q(query).view(B, Tq, h, d // h).transpose(1, 2)
        k = self.k(context).view(B, Tk, h, d // h).transpose(1, 2)
        v = self.v(context).view(B, Tk, h, d // h).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        weights = torch.softmax(logits, dim=-1)
        self.last_weights = weights.detach()
        out = (weights @ v).transpose(1, 2).reshape(B, Tq, d)
        return self.o(out)


class TransformerEncoder(nn.Module):
    """Input projection, one pre-norm self-attention block and a feed-forward block."""

    temporal = True

    def __init__(self, spec):
        super().__init__()
        d = spec.out_dim
        ff = spec.hidden_dims[0] if spec.hidden_dims else 2 * d
        self.proj = nn.Linear(spec.in_shape[1], d)
        self.norm1 = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, spec.heads)
        self.norm2 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, ff), nn.ReLU(), nn.Linear(ff, d))
        self.positional = spec.positional
        self.out_dim = d

    def forward(self, x, sequence=False):
        h = self.proj(x)
        if self.positional:
            h = h + sinusoidal_positions(h.shape[1], h.shape[2], h.dtype)
        a = self.norm1(h)
        h = h + self.attn(a, a)
        h = h + self.ff(self.norm2(h))
        return h if sequence else h[:, -1]


class ConvEncoder(nn.Module):
    """3x3 convolutions over an (H, W, C) grid, global mean pooling, linear output."""

    temporal = False

    def __init__(self, spec):
        super().__init__()
        channels = [spec.in_shape[2], *(spec.hidden_dims or (8,))]
        layers = []
        for a, b in zip(channels[:-1], channels[1:]):
            layers += [nn.Conv2d(a, b, 3, padding=1), ACTIVATIONS[spec.activation]()]
        self.conv = nn.Sequential(*layers)
        self.out = nn.Linear(channels[-1], spec.out_dim)
        self.out_dim = spec.out_dim

    def forward(self, x, sequence=False):
        h = self.conv(x.permute(0, 3, 1, 2))
        return self.out(h.mean(dim=(2, 3)))


class DeepSetEncoder(nn.Module):
    """rho(sum_i phi(x_i)) over set elements.

    Rows that are entirely NaN are treated as absent, which lets a batch hold sets of
    different sizes. The pooled sum adds each feature column in sorted order, so the
    result does not depend on element order down to the last bit.
    """

    temporal = False

    def __init__(self, spec):
        super().__init__()
        hidden = spec.hidden_dims or (spec.out_dim,)
        self.phi = MLP(spec.in_shape[1], hidden[:-1], hidden[-1], spec.activation)
        self.rho = nn.Linear(hidden[-1], spec.out_dim)
        self.out_dim = spec.out_dim

    def forward(self, x, sequence=False):
        present = ~torch.isnan(x).all(dim=-1, keepdim=True)
        h = self.phi(torch.nan_to_num(x, nan=0.0))
        h = torch.where(present, h, torch.zeros_like(h))
        pooled = torch.sort(h, dim=1).values.sum(dim=1)
        return self.rho(pooled)


class IdentityEncoder(nn.Module):
    """Pass-through. The vector output is the flattened input when ``out_dim`` equals
    its size, otherwise the last step of a (T, d) input."""

    def __init__(self, spec):
        super().__init__()
        self.temporal = len(spec.in_shape) == 2
        self.flatten = spec.out_dim == math.prod(spec.in_shape)
        self.out_dim = spec.out_dim

    def forward(self, x, sequence=False):
        if sequence:
            return x
        return x.flatten(1) if self.flatten else x[:, -1]


_BUILDERS = {
    "mlp": MLPEncoder,
    "recurrent": RecurrentEncoder,
    "transformer": TransformerEncoder,
    "convolutional": ConvEncoder,
    "deep-set": DeepSetEncoder,
    "identity": IdentityEncoder,
}


def build_encoder(spec, dtype=torch.float32):
    module = _BUILDERS[spec.kind](spec)
    uniform_fan_in_(module, spec.seed)
    return module.to(dtype)


def init_params(spec, dtype=torch.float32):
    """Deterministic parameter dict for ``spec``."""
    return OrderedDict((k, v.detach().clone())
                       for k, v in build_encoder(spec, dtype).named_parameters())


def encode(x, spec, params, sequence=False):
    """Functional forward pass: run the encoder described by ``spec`` with ``params``."""
    x = torch.as_tensor(x)
    expected = tuple(x.shape[1:])
    if spec.kind != "deep-set" and expected != spec.in_shape:
        raise ValueError(f"input shape {expected} does not match encoder in_shape {spec.in_shape}")
    if spec.kind == "deep-set" and expected[-1] != spec.in_shape[-1]:
        raise ValueError(f"set element dim {expected[-1]} != {spec.in_shape[-1]}")
    module = build_encoder(spec, dtype=x.dtype)
    return functional_call(module, dict(params), (x,), {"sequence": sequence})


def count_params(module):
    return sum(p.numel() for p in module.parameters())


def analytic_param_count(spec):
    """Closed-form parameter count for each encoder kind."""
    d_out = spec.out_dim
    if spec.kind == "identity":
        return 0
    if spec.kind == "mlp":
        dims = [math.prod(spec.in_shape), *spec.hidden_dims, d_out]
        return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    if spec.kind == "recurrent":
        d_in = spec.in_shape[1]
        return 3 * (d_in * d_out + d_out * d_out + 2 * d_out)
    if spec.kind == "transformer":
        d_in, d = spec.in_shape[1], d_out
        ff = spec.hidden_dims[0] if spec.hidden_dims else 2 * d
        return (d_in * d + d) + 4 * (d * d + d) + 2 * (2 * d) + (d * ff + ff) + (ff * d + d)
    if spec.kind == "convolutional":
        channels = [spec.in_shape[2], *(spec.hidden_dims or (8,))]
        conv = sum(a * b * 9 + b for a, b in zip(channels[:-1], channels[1:]))
        return conv + channels[-1] * d_out + d_out
    if spec.kind == "deep-set":
        hidden = spec.hidden_dims or (d_out,)
        dims = [spec.in_shape[1], *hidden]
        phi = sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
        return phi + hidden[-1] * d_out + d_out
    raise ValueError(spec.kind)
