"""Training structures: plain supervised learning, GradBlend, MCTN and MFM, plus the
``test`` entry point that scores a trained model on performance, complexity and
robustness.

A model is a :class:`ModelBundle` of unimodal encoders f_1..f_M, a fusion module
f_mm and a head g_y. Anything used only while training (stream heads, decoders,
translators, projection heads) lives in ``bundle.aux`` and is left out of the
inference parameter count.
"""

from __future__ import annotations

import copy
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import evalmetrics, perturb
from .encoders import MLP, EncoderSpec, build_encoder, count_params, uniform_fan_in_
from .fusion import build_fusion
from .objectives import (CompositeObjective, LossTerm, NonFinitePrediction, cca_loss,
                         mctn_cycle_loss, mfm_objective, reconstruction_error,
                         refnet_contrastive_loss, task_loss)
from .serialization import load_params, save_params

STRUCTURES = ("supervised", "gradblend", "mctn", "mfm")
OBJECTIVE_TERMS = ("task", "cca", "refnet")
BLEND_EPS = 0.1


class TrainingDiverged(RuntimeError):
    """A loss became NaN or infinite."""


def _pool(z):
    """Vector view of an encoder output: sequences are averaged over time."""
    return z.mean(dim=1) if z.dim() == 3 else z


def _to_tensor(x, dtype):
    return torch.from_numpy(np.array(x, dtype=np.float32)).to(dtype)


def _labels_tensor(y, task_kind, dtype):
    y = np.asarray(y)
    if task_kind == "classification":
        return torch.from_numpy(y.astype(np.int64))
    return torch.from_numpy(np.array(y, dtype=np.float32)).to(dtype)


def head_output_dim(task):
    return task.size


def _decide(logits, task_kind):
    """Hard predictions and scores from raw head outputs."""
    if task_kind == "classification":
        scores = torch.softmax(logits, dim=1)
        return logits.argmax(dim=1).numpy(), scores.numpy()
    if task_kind == "multilabel":
        scores = torch.sigmoid(logits)
        return (scores > 0.5).long().numpy(), scores.numpy()
    pred = logits.numpy()
    return (pred[:, 0] if pred.shape[1] == 1 else pred), None


class ModelBundle(nn.Module):
    """Encoders + fusion + head, the f_1..f_M, f_mm, g_y decomposition.

    :param encoder_specs: one :class:`EncoderSpec` per modality
    :param fusion_tag: key of the fusion operator (see ``fusion.FUSION_TAGS``)
    :param n_out: head output size (classes, labels or regression dims)
    :param task_kind: classification, multilabel or regression
    :param fusion_params: keyword arguments for the fusion module
    :param head_hidden: hidden widths of the head MLP
    :param seed: seed for fusion and head initialisation
    """

    structure = "supervised"

    def __init__(self, encoder_specs, fusion_tag, n_out, task_kind="classification",
                 fusion_params=None, head_hidden=(), seed=0, dtype=torch.float32):
        super().__init__()
        self.encoder_specs = [s if isinstance(s, EncoderSpec) else EncoderSpec.from_json(s)
                              for s in encoder_specs]
        self.fusion_tag = fusion_tag
        self.fusion_params = dict(fusion_params or {})
        self.n_out = int(n_out)
        self.task_kind = task_kind
        self.head_hidden = tuple(head_hidden)
        self.seed = seed
        self.dtype = dtype
        if fusion_tag == "ef" and any(s.kind != "identity" for s in self.encoder_specs):
            raise ValueError("early fusion concatenates raw inputs; use identity encoders")
        self.encoders = nn.ModuleList(build_encoder(s, dtype) for s in self.encoder_specs)
        in_dims = [s.out_dim for s in self.encoder_specs]
        self.fusion = build_fusion(fusion_tag, in_dims, seed=seed + 1, dtype=dtype,
                                   **self.fusion_params)
        self.head = MLP(self.fusion.out_dim, self.head_hidden, self.n_out,
                        final_activation=False)
        uniform_fan_in_(self.head, seed + 2)
        self.head.to(dtype)
        self.aux = nn.ModuleDict()

    # -- forward paths --
    @property
    def n_modalities(self):
        return len(self.encoder_specs)

    def encode_all(self, xs):
        seq = getattr(self.fusion, "needs_sequences", False)
        return [enc(x, sequence=seq) for enc, x in zip(self.encoders, xs)]

    def forward_all(self, xs):
        """Returns (unimodal codes, fused code, head output)."""
        zs = self.encode_all(xs)
        z_mm = self.fusion(zs)
        return zs, z_mm, self.head(z_mm)

    def forward(self, xs):
        return self.forward_all(xs)[2]

    def inputs(self, modalities):
        return [_to_tensor(m, self.dtype) for m in modalities]

    @torch.no_grad()
    def logits(self, modalities):
        was_training = self.training
        self.eval()
        try:
            return self(self.inputs(modalities))
        finally:
            self.train(was_training)

    def predict(self, modalities):
        """(hard predictions, scores) as numpy arrays for a list of modality arrays."""
        return _decide(self.logits(modalities), self.task_kind)

    # -- accounting --
    def inference_modules(self):
        return [*self.encoders, self.fusion, self.head]

    def param_counts(self):
        """(training count, inference count); training-only modules in ``aux`` and
        anything off the prediction path only enter the first."""
        seen, inference = set(), 0
        for module in self.inference_modules():
            for p in module.parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    inference += p.numel()
        return count_params(self), inference

    def check_data(self, specs):
        """Raise if the dataset's modalities do not match the encoders' input shapes."""
        if len(specs) != self.n_modalities:
            raise ValueError(f"model expects {self.n_modalities} modalities, data has {len(specs)}")
        for enc, spec in zip(self.encoder_specs, specs):
            shape = tuple(spec.shape)
            ok = shape[-1] == enc.in_shape[-1] if enc.kind == "deep-set" else shape == enc.in_shape
            if not ok:
                raise ValueError(f"modality {spec.name!r} has shape {shape}, encoder expects "
                                 f"{enc.in_shape}")

    def config(self):
        return {"structure": self.structure,
                "encoders": [s.to_json() for s in self.encoder_specs],
                "fusion": self.fusion_tag, "fusion_params": self.fusion_params,
                "n_out": self.n_out, "task_kind": self.task_kind,
                "head_hidden": list(self.head_hidden), "seed": self.seed,
                "aux": self.aux_config()}

    def aux_config(self):
        terms = getattr(self, "objective_terms", None)
        return {"terms": terms} if terms else {}


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.01
    optimizer: str = "sgd"
    patience: int | None = None
    seed: int = 0
    momentum: float = 0.9

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be positive")

    def to_json(self):
        return {"epochs": self.epochs, "batch_size": self.batch_size, "lr": self.lr,
                "optimizer": self.optimizer, "patience": self.patience, "seed": self.seed,
                "momentum": self.momentum}

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


@dataclass(frozen=True)
class BlendWeights:
    """Loss weights (w_1, ..., w_M, w_mm) on the probability simplex."""

    weights: tuple

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or len(w) < 2:
            raise ValueError("need at least one unimodal and one multimodal weight")
        if (w < 0).any() or not math.isclose(w.sum(), 1.0, abs_tol=1e-9):
            raise ValueError(f"blend weights must lie on the simplex, got {w}")
        object.__setattr__(self, "weights", tuple(float(x) for x in w))

    @property
    def unimodal(self):
        return self.weights[:-1]

    @property
    def multimodal(self):
        return self.weights[-1]

    @classmethod
    def uniform(cls, n_streams):
        return cls(tuple([1.0 / n_streams] * n_streams))


@dataclass
class TrainResult:
    model: ModelBundle
    history: dict
    train_time_s: float
    blend_weights: BlendWeights | None = None
    extras: dict = field(default_factory=dict)


# --- the shared loop -----------------------------------------------------------

def _optimizer(params, cfg):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr)
    return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum)


def _score(model, split, task, n_classes):
    """Validation score where larger is better."""
    pred, scores = model.predict(split.modalities)
    report = evalmetrics.compute_performance(pred, split.labels, task.kind, scores, n_classes)
    metric = evalmetrics.primary_metric(task.kind)
    value = report[metric]
    return metric, (-value if metric in evalmetrics.LOWER_IS_BETTER else value), value


def _check_finite(objective, epoch, step):
    total = objective.total
    if not torch.isfinite(total):
        raise TrainingDiverged(f"loss became {float(total)} at epoch {epoch}, batch {step}; "
                               f"terms: {objective.values()}")
    return total


def _fit(model, data, cfg, objective_fn, on_epoch=None):
    """Minibatch descent on ``objective_fn(model, xs, y, generator)`` with early
    stopping on the validation metric. The best-validation parameters are restored."""
    task = data.task
    n_classes = task.size if task.kind == "classification" else None
    xs_train = model.inputs(data.train.modalities)
    y_train = _labels_tensor(data.train.labels, task.kind, model.dtype)
    xs_valid = model.inputs(data.valid.modalities)
    y_valid = _labels_tensor(data.valid.labels, task.kind, model.dtype)
    shuffle = torch.Generator().manual_seed(cfg.seed)
    noise = torch.Generator().manual_seed(cfg.seed + 1)
    eval_noise_seed = cfg.seed + 2
    optimizer = _optimizer(model.parameters(), cfg)
    n = len(y_train)

    def full_objective(xs, y):
        g = torch.Generator().manual_seed(eval_noise_seed)
        model.eval()
        with torch.no_grad():
            out = objective_fn(model, xs, y, g)
        model.train()
        return out

    history = {"epochs": [], "best_epoch": None, "metric": None, "stopped_early": False}
    best, best_state, since_best = -math.inf, None, 0
    if on_epoch is not None:
        on_epoch(0, model)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        perm = torch.randperm(n, generator=shuffle)
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            try:
                objective = objective_fn(model, [x[idx] for x in xs_train], y_train[idx], noise)
            except NonFinitePrediction as err:
                raise TrainingDiverged(f"{err} at epoch {epoch}, batch {step}") from err
            total = _check_finite(objective, epoch, step)
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            if not all(torch.isfinite(q).all() for q in model.parameters()):
                raise TrainingDiverged(f"parameters became non-finite at epoch {epoch}, "
                                       f"batch {step}")
        train_obj = full_objective(xs_train, y_train)
        valid_obj = full_objective(xs_valid, y_valid)
        metric, score, value = _score(model, data.valid, task, n_classes)
        history["metric"] = metric
        history["epochs"].append({
            "epoch": epoch,
            "train_loss": float(train_obj.total),
            "valid_loss": float(valid_obj.total),
            "train_terms": train_obj.values(),
            "valid_terms": valid_obj.values(),
            "valid_metric": value,
        })
        if on_epoch is not None:
            on_epoch(epoch, model)
        if score > best:
            best, since_best = score, 0
            best_state = copy.deepcopy(model.state_dict())
            history["best_epoch"] = epoch
        else:
            since_best += 1
            if cfg.patience is not None and since_best >= cfg.patience:
                history["stopped_early"] = True
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    return history


# --- supervised ----------------------------------------------------------------

def _add_projection_heads(model, terms):
    """Training-only projections g1, g2 used by correlation / contrastive terms."""
    names = {t["name"] for t in terms}
    model.objective_terms = [dict(t) for t in terms]
    if names - set(OBJECTIVE_TERMS):
        raise ValueError(f"unknown objective terms {sorted(names - set(OBJECTIVE_TERMS))}")
    if ("cca" in names or "refnet" in names) and model.n_modalities != 2:
        raise ValueError("cca and refnet terms need exactly two modalities")
    d1, d2 = (s.out_dim for s in model.encoder_specs[:2]) if model.n_modalities >= 2 else (0, 0)
    if "cca" in names and "cca_g1" not in model.aux:
        k = min(d1, d2)
        model.aux["cca_g1"] = nn.Linear(d1, k)
        model.aux["cca_g2"] = nn.Linear(d2, k)
    if "refnet" in names and "refnet_g1" not in model.aux:
        model.aux["refnet_g1"] = nn.Linear(d1, model.fusion.out_dim)
        model.aux["refnet_g2"] = nn.Linear(d2, model.fusion.out_dim)
    for name in ("cca_g1", "cca_g2", "refnet_g1", "refnet_g2"):
        if name in model.aux:
            uniform_fan_in_(model.aux[name], model.seed + 3 + len(name))
            model.aux[name].to(model.dtype)


def supervised_objective(terms=None):
    """Objective factory: task loss plus optional weighted cca / refnet terms."""
    terms = list(terms or [{"name": "task", "weight": 1.0}])

    def objective(model, xs, y, generator=None):
        zs, z_mm, out = model.forward_all(xs)
        built = []
        for term in terms:
            name, weight = term["name"], float(term.get("weight", 1.0))
            if name == "task":
                value = task_loss(out, y, model.task_kind)
            elif name == "cca":
                value = cca_loss(_pool(zs[0]), _pool(zs[1]), model.aux["cca_g1"],
                                 model.aux["cca_g2"])
            else:
                value = refnet_contrastive_loss(z_mm, _pool(zs[0]), _pool(zs[1]),
                                                model.aux["refnet_g1"], model.aux["refnet_g2"])
            built.append(LossTerm(name, weight, value))
        return CompositeObjective(built)

    return objective


def train_supervised(model, data, cfg, terms=None):
    """Plain supervised learning on the composite objective (task loss by default)."""
    model.check_data(data.specs)
    terms = terms or [{"name": "task", "weight": 1.0}]
    _add_projection_heads(model, terms)
    start = time.perf_counter()
    history = _fit(model, data, cfg, supervised_objective(terms))
    return TrainResult(model, history, time.perf_counter() - start)


# --- GradBlend -------------------------------------------------------------------

def _require_streams(model):
    if model.fusion_tag == "ef" or model.n_modalities < 2:
        raise ValueError("GradBlend needs per-modality branches; early fusion has no streams")


def add_stream_heads(model):
    """One linear head per unimodal branch, registered as training-only modules."""
    for m, spec in enumerate(model.encoder_specs):
        key = f"stream_{m}"
        if key not in model.aux:
            head = nn.Linear(spec.out_dim, model.n_out)
            uniform_fan_in_(head, model.seed + 100 + m)
            model.aux[key] = head.to(model.dtype)


def stream_losses(model, xs, y):
    """Task loss of every unimodal stream head, then of the multimodal head."""
    zs, _, out = model.forward_all(xs)
    losses = [task_loss(model.aux[f"stream_{m}"](_pool(z)), y, model.task_kind)
              for m, z in enumerate(zs)]
    losses.append(task_loss(out, y, model.task_kind))
    return losses


def blend_objective(weights):
    def objective(model, xs, y, generator=None):
        losses = stream_losses(model, xs, y)
        names = [f"stream_{m}" for m in range(len(losses) - 1)] + ["multimodal"]
        return CompositeObjective([LossTerm(n, w, v) for n, w, v in zip(names, weights, losses)])

    return objective


def compute_blend_weights(histories, eps=BLEND_EPS):
    """Blend weights from per-stream probe curves.

    ``histories`` holds one ``{"train": [...], "valid": [...]}`` loss record per stream,
    unimodal streams first and the multimodal stream last. With G the drop in
    validation loss over the window and O the growth of the validation-minus-train
    gap (floored at ``eps``), each stream gets weight proportional to max(G, 0) / O^2.
    """
    gains, overfit = [], []
    for h in histories:
        train, valid = np.asarray(h["train"], float), np.asarray(h["valid"], float)
        if len(train) < 2 or len(valid) < 2:
            raise ValueError("each stream needs at least 2 checkpoints")
        gains.append(max(valid[0] - valid[-1], 0.0))
        gap_growth = (valid[-1] - train[-1]) - (valid[0] - train[0])
        overfit.append(max(gap_growth, eps))
    raw = np.asarray(gains) / np.asarray(overfit) ** 2
    if not np.isfinite(raw).all() or raw.sum() <= 0:
        warnings.warn("degenerate generalization statistics; using uniform blend weights")
        return BlendWeights.uniform(len(histories))
    return BlendWeights(tuple(raw / raw.sum()))


def probe_window(epochs):
    return max(2, math.ceil(0.2 * epochs))


def _probe(model, data, cfg):
    """Train a throwaway copy on the uniformly weighted stream losses and record each
    stream's full train and validation loss after every epoch."""
    probe = copy.deepcopy(model)
    n_streams = probe.n_modalities + 1
    xs_train = probe.inputs(data.train.modalities)
    y_train = _labels_tensor(data.train.labels, data.task.kind, probe.dtype)
    xs_valid = probe.inputs(data.valid.modalities)
    y_valid = _labels_tensor(data.valid.labels, data.task.kind, probe.dtype)
    records = [{"train": [], "valid": []} for _ in range(n_streams)]

    def record(epoch, m):
        m.eval()
        with torch.no_grad():
            tr = stream_losses(m, xs_train, y_train)
            va = stream_losses(m, xs_valid, y_valid)
        m.train()
        for k in range(n_streams):
            records[k]["train"].append(float(tr[k]))
            records[k]["valid"].append(float(va[k]))

    probe_cfg = TrainConfig(probe_window(cfg.epochs), cfg.batch_size, cfg.lr, cfg.optimizer,
                            None, cfg.seed, cfg.momentum)
    _fit(probe, data, probe_cfg, blend_objective([1.0 / n_streams] * n_streams), on_epoch=record)
    return records


def train_gradblend(model, data, cfg, weights=None):
    """Probe phase for generalization statistics, then the main phase on
    sum_k w_k * loss_k over unimodal stream heads and the multimodal head.

    Weights are computed once after the probe; pass ``weights`` to force them.
    """
    _require_streams(model)
    model.check_data(data.specs)
    model.structure = "gradblend"
    add_stream_heads(model)
    start = time.perf_counter()
    records = None
    if weights is None:
        records = _probe(model, data, cfg)
        weights = compute_blend_weights(records)
    elif not isinstance(weights, BlendWeights):
        weights = BlendWeights(tuple(weights))
    if len(weights.weights) != model.n_modalities + 1:
        raise ValueError("need one blend weight per modality plus one multimodal weight")
    history = _fit(model, data, cfg, blend_objective(weights.weights))
    history["blend_weights"] = list(weights.weights)
    return TrainResult(model, history, time.perf_counter() - start, weights,
                       {"probe": records})


# --- MCTN ---------------------------------------------------------------------

class MCTNBundle(ModelBundle):
    """Translation model x_1 -> z -> x_2_hat -> z' -> x_1_hat with the head on z.

    Prediction reads modality 1 only; the decoders and the second encoder exist for
    training and are kept in ``aux``.
    """

    structure = "mctn"

    def __init__(self, encoder_specs, n_out, task_kind="classification", decoder_hidden=(32,),
                 head_hidden=(), seed=0, dtype=torch.float32, x_shapes=None):
        specs = [s if isinstance(s, EncoderSpec) else EncoderSpec.from_json(s)
                 for s in encoder_specs]
        if len(specs) != 2:
            raise ValueError("MCTN is defined for exactly two modalities")
        super().__init__(specs[:1], "lf", n_out, task_kind, head_hidden=head_hidden,
                         seed=seed, dtype=dtype)
        self.second_spec = specs[1]
        self.decoder_hidden = tuple(decoder_hidden)
        self.x_shapes = [tuple(s.in_shape) for s in specs]
        d1, d2 = (math.prod(s) for s in self.x_shapes)
        self.aux["encoder_2"] = build_encoder(specs[1], dtype)
        self.aux["decoder_12"] = MLP(specs[0].out_dim, self.decoder_hidden, d2,
                                     final_activation=False)
        self.aux["decoder_21"] = MLP(specs[1].out_dim, self.decoder_hidden, d1,
                                     final_activation=False)
        for i, key in enumerate(("decoder_12", "decoder_21")):
            uniform_fan_in_(self.aux[key], seed + 10 + i)
            self.aux[key].to(dtype)

    def translate(self, xs):
        x1, x2 = xs[0], xs[1]
        z = self.encoders[0](x1)
        x2_hat = self.aux["decoder_12"](z).reshape(x2.shape)
        z_back = self.aux["encoder_2"](x2_hat)
        x1_hat = self.aux["decoder_21"](z_back).reshape(x1.shape)
        return z, x1_hat, x2_hat

    def forward(self, xs):
        # only xs[0] is read on the prediction path
        return self.head(self.encoders[0](xs[0]))

    def inputs(self, modalities):
        return [_to_tensor(m, self.dtype) for m in modalities]

    def logits(self, modalities):
        with torch.no_grad():
            was_training = self.training
            self.eval()
            try:
                return self([_to_tensor(modalities[0], self.dtype)])
            finally:
                self.train(was_training)

    def check_data(self, specs):
        if len(specs) != 2:
            raise ValueError("MCTN needs two modalities at training time")
        for shape, spec in zip(self.x_shapes, specs):
            if tuple(spec.shape) != shape:
                raise ValueError(f"modality {spec.name!r} has shape {tuple(spec.shape)}, "
                                 f"expected {shape}")

    def config(self):
        cfg = super().config()
        cfg["encoders"] = [self.encoder_specs[0].to_json(), self.second_spec.to_json()]
        cfg["decoder_hidden"] = list(self.decoder_hidden)
        return cfg


def mctn_objective(model, xs, y, generator=None):
    z, x1_hat, x2_hat = model.translate(xs)
    cycle = mctn_cycle_loss(xs[0], xs[1], x1_hat, x2_hat)
    task = task_loss(model.head(z), y, model.task_kind)
    return CompositeObjective([LossTerm("cycle", 1.0, cycle), LossTerm("task", 1.0, task)])


def train_mctn(model, data, cfg):
    """Cycle translation loss plus the task loss on the joint code z."""
    if not isinstance(model, MCTNBundle):
        raise TypeError("train_mctn needs an MCTNBundle")
    model.check_data(data.specs)
    start = time.perf_counter()
    history = _fit(model, data, cfg, mctn_objective)
    return TrainResult(model, history, time.perf_counter() - start)


# --- MFM -----------------------------------------------------------------------

class _Decoder(nn.Module):
    def __init__(self, d_private, d_shared, hidden, d_out):
        super().__init__()
        self.net = MLP(d_private + d_shared, hidden, d_out, final_activation=False)

    def forward(self, z, z_y):
        return self.net(torch.cat([z, z_y], dim=1))


class MFMBundle(ModelBundle):
    """Factorized model: private encoders give z_1..z_M, the shared encoders plus
    fusion give z_y; decoders rebuild each x_m from (z_m, z_y) and the head predicts
    from z_y. Private encoders and decoders are training-only."""

    structure = "mfm"

    def __init__(self, encoder_specs, fusion_tag, n_out, task_kind="classification",
                 fusion_params=None, head_hidden=(), private_dim=4, decoder_hidden=(32,),
                 seed=0, dtype=torch.float32):
        super().__init__(encoder_specs, fusion_tag, n_out, task_kind, fusion_params,
                         head_hidden, seed, dtype)
        self.private_dim = int(private_dim)
        self.decoder_hidden = tuple(decoder_hidden)
        for m, spec in enumerate(self.encoder_specs):
            if spec.kind == "identity":
                private = EncoderSpec("mlp", spec.in_shape if len(spec.in_shape) == 1
                                      else (math.prod(spec.in_shape),),
                                      self.private_dim, seed=seed + 200 + m)
            else:
                private = EncoderSpec(spec.kind, spec.in_shape, self.private_dim,
                                      spec.hidden_dims, seed + 200 + m, spec.activation,
                                      spec.positional, spec.heads)
            self.aux[f"private_{m}"] = build_encoder(private, dtype)
            self.aux[f"private_{m}"].flat_input = spec.kind == "identity"
            dec = _Decoder(self.private_dim, self.fusion.out_dim, self.decoder_hidden,
                           math.prod(spec.in_shape))
            uniform_fan_in_(dec, seed + 300 + m)
            self.aux[f"decoder_{m}"] = dec.to(dtype)

    def factors(self, xs):
        """(private codes z_1..z_M, shared code z_y)."""
        zs = []
        for m, x in enumerate(xs):
            enc = self.aux[f"private_{m}"]
            zs.append(_pool(enc(x.flatten(1) if enc.flat_input else x)))
        _, z_y, _ = self.forward_all(xs)
        return zs, z_y

    def decoders(self):
        return [self.aux[f"decoder_{m}"] for m in range(self.n_modalities)]

    def config(self):
        cfg = super().config()
        cfg["private_dim"] = self.private_dim
        cfg["decoder_hidden"] = list(self.decoder_hidden)
        return cfg


def mfm_loss(lam):
    if lam < 0:
        raise ValueError("lambda must be non-negative")

    def objective(model, xs, y, generator=None):
        zs, z_y = model.factors(xs)
        targets = [torch.nan_to_num(x).flatten(1) for x in xs]
        return mfm_objective(targets, y, zs, z_y, model.decoders(), model.head, lam,
                             model.task_kind, generator=generator)

    return objective


def train_mfm(model, data, cfg, lam=0.1):
    """Optimise reconstruction + task + lam * MMD prior matching."""
    if not isinstance(model, MFMBundle):
        raise TypeError("train_mfm needs an MFMBundle")
    model.check_data(data.specs)
    start = time.perf_counter()
    history = _fit(model, data, cfg, mfm_loss(lam))
    return TrainResult(model, history, time.perf_counter() - start)


def train_reconstruction_error(model, split):
    """Mean reconstruction error of an :class:`MFMBundle` over a split."""
    xs = model.inputs(split.modalities)
    with torch.no_grad():
        zs, z_y = model.factors(xs)
        return float(sum(reconstruction_error(torch.nan_to_num(x).flatten(1), dec(z, z_y))
                         for x, z, dec in zip(xs, zs, model.decoders())))


# --- construction, checkpoints, test -----------------------------------------------

def build_bundle(config, dtype=torch.float32):
    """Rebuild a bundle from :meth:`ModelBundle.config` output (weights not loaded)."""
    structure = config.get("structure", "supervised")
    common = dict(n_out=config["n_out"], task_kind=config["task_kind"],
                  head_hidden=tuple(config.get("head_hidden", ())),
                  seed=config.get("seed", 0), dtype=dtype)
    if structure == "mctn":
        return MCTNBundle(config["encoders"],
                          decoder_hidden=tuple(config.get("decoder_hidden", (32,))), **common)
    if structure == "mfm":
        return MFMBundle(config["encoders"], config["fusion"],
                         fusion_params=config.get("fusion_params"),
                         private_dim=config.get("private_dim", 4),
                         decoder_hidden=tuple(config.get("decoder_hidden", (32,))), **common)
    model = ModelBundle(config["encoders"], config["fusion"],
                        fusion_params=config.get("fusion_params"), **common)
    model.structure = structure
    if structure == "gradblend":
        add_stream_heads(model)
    terms = config.get("aux", {}).get("terms")
    if terms:
        _add_projection_heads(model, terms)
    return model


def save_checkpoint(model, directory):
    state = {k: v.detach() for k, v in model.state_dict().items()}
    save_params(state, directory, model.config())


def load_checkpoint(directory):
    state, meta = load_params(directory)
    model = build_bundle(meta)
    model.load_state_dict(state)
    return model


def test(model, data, robustness=None, train_time_s=0.0):
    """Score a trained model: (PerformanceReport, ComplexityReport, robustness curves).

    ``robustness`` configures the noisy grid (``families``, ``levels``,
    ``multimodal_family``, ``seed``, ``params``); ``None`` uses the defaults.
    """
    model.check_data(data.specs)
    task = data.task
    n_classes = task.size if task.kind == "classification" else None
    pred, scores = model.predict(data.test.modalities)
    performance = evalmetrics.compute_performance(pred, data.test.labels, task.kind, scores,
                                                  n_classes)
    complexity = evalmetrics.profile_complexity(model, data.test, train_time_s)
    cfg = dict(robustness or {})
    grid = perturb.build_noisy_grid(
        data.test, data.specs, families=cfg.get("families"),
        levels=cfg.get("levels", perturb.DEFAULT_LEVELS),
        multimodal_family=cfg.get("multimodal_family", "auto"),
        seed=cfg.get("seed", 0), params=cfg.get("params"))
    curves = evalmetrics.robustness_curve(model, grid, task.kind, cfg.get("metric"), n_classes)
    return performance, complexity, curves
