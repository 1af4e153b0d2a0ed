"""Seeded synthetic multimodal datasets, split handling and word-level alignment.

All generators are pure functions of their arguments: the same call returns
byte-identical arrays. Samples are drawn once and then divided 80/10/10 into
train/valid/test by a seeded permutation.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .serialization import read_array, write_array, write_json

KINDS = ("static-vector", "temporal-sequence", "image-grid", "set", "table")
TEMPORAL_KINDS = ("temporal-sequence",)

# feature dims of the usual affect-recognition extractors: word vectors, facial, acoustic
DEFAULT_DIMS = (300, 35, 74)


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    kind: str
    shape: tuple
    sample_rate: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown modality kind {self.kind!r}")
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if not self.shape or any(s < 1 for s in self.shape):
            raise ValueError(f"modality {self.name!r}: shape entries must be >= 1, got {self.shape}")
        if self.kind in TEMPORAL_KINDS and len(self.shape) != 2:
            raise ValueError(f"temporal modality {self.name!r} needs shape (T, d)")

    @property
    def temporal(self):
        return self.kind in TEMPORAL_KINDS

    def to_json(self):
        return {"name": self.name, "kind": self.kind, "shape": list(self.shape),
                "sample_rate": self.sample_rate}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["name"], obj["kind"], tuple(obj["shape"]), obj.get("sample_rate"))


@dataclass(frozen=True)
class Task:
    """Label space: ``classification`` with ``size`` classes, ``multilabel`` with
    ``size`` binary labels, or ``regression`` with ``size`` output dims."""

    kind: str
    size: int

    def __post_init__(self):
        if self.kind not in ("classification", "regression", "multilabel"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.size < 1:
            raise ValueError("task size must be >= 1")

    def check(self, labels):
        labels = np.asarray(labels)
        if self.kind == "classification":
            if labels.ndim != 1 or labels.min(initial=0) < 0 or labels.max(initial=0) >= self.size:
                raise ValueError(f"class labels must lie in [0, {self.size})")
        elif not np.all(np.isfinite(labels)):
            raise ValueError("labels must be finite")


@dataclass(frozen=True)
class MultimodalSample:
    modalities: list
    label: object


@dataclass
class Split:
    modalities: list
    labels: np.ndarray
    indices: np.ndarray

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return MultimodalSample([m[i] for m in self.modalities], self.labels[i])

    def subset(self, idx):
        return Split([m[idx] for m in self.modalities], self.labels[idx], self.indices[idx])

    def nbytes(self):
        return sum(m.nbytes for m in self.modalities) + self.labels.nbytes


@dataclass
class DatasetSplits:
    train: Split
    valid: Split
    test: Split
    specs: list
    task: Task
    seed: int
    name: str = "custom"
    meta: dict = field(default_factory=dict)

    @property
    def n_modalities(self):
        return len(self.specs)

    def splits(self):
        return {"train": self.train, "valid": self.valid, "test": self.test}

    def spec_by_name(self, name):
        for spec in self.specs:
            if spec.name == name:
                return spec
        raise KeyError(name)


class DatasetSource(Protocol):
    """Anything exposing train/valid/test splits and modality specs can be plugged in."""

    train: Split
    valid: Split
    test: Split
    specs: list
    task: Task


@dataclass(frozen=True)
class WordIntervals:
    intervals: tuple

    def __post_init__(self):
        ivs = tuple((float(s), float(e)) for s, e in self.intervals)
        for s, e in ivs:
            if not 0 <= s < e:
                raise ValueError(f"invalid interval ({s}, {e})")
        if any(a[0] > b[0] for a, b in zip(ivs, ivs[1:])):
            raise ValueError("intervals must be sorted by start time")
        object.__setattr__(self, "intervals", ivs)

    def __len__(self):
        return len(self.intervals)


def _check_positive(**kwargs):
    for key, value in kwargs.items():
        vals = value if isinstance(value, (list, tuple)) else [value]
        if any(v is None or v < 1 for v in vals):
            raise ValueError(f"{key} must be positive, got {value}")


def _resolve_dims(M, d):
    if d is None:
        return [DEFAULT_DIMS[m % len(DEFAULT_DIMS)] for m in range(M)]
    if isinstance(d, int):
        return [d] * M
    d = list(d)
    if len(d) != M:
        raise ValueError(f"expected {M} dims, got {len(d)}")
    return d


def _freeze(arr):
    arr.setflags(write=False)
    return arr


def split_samples(modalities, labels, seed, fractions=(0.8, 0.1, 0.1)):
    """Shuffle with ``seed`` and cut into train/valid/test by ``fractions``."""
    n = len(labels)
    perm = np.random.default_rng([seed, 0x5EED]).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_valid = int(round(fractions[1] * n))
    cuts = (perm[:n_train], perm[n_train:n_train + n_valid], perm[n_train + n_valid:])
    out = []
    for idx in cuts:
        idx = np.sort(idx)
        out.append(Split([_freeze(m[idx]) for m in modalities], _freeze(labels[idx]), _freeze(idx)))
    return out


def _assemble(name, modalities, labels, specs, task, seed, meta):
    for arr, spec in zip(modalities, specs):
        assert arr.shape[1:] == spec.shape, (arr.shape, spec.shape)
        assert np.all(np.isfinite(arr))
    task.check(labels)
    train, valid, test = split_samples(modalities, labels, seed)
    return DatasetSplits(train, valid, test, list(specs), task, seed, name, meta)


def make_redundant(M=2, d=None, n=1000, noise=0.1, seed=0, latent_dim=4, n_classes=2):
    """Every modality is a noisy linear view of one shared latent that fixes the label.

    Rows of each mixing matrix have unit norm, so each coordinate carries unit signal
    variance and ``noise`` is the noise-to-signal std ratio per coordinate.
    """
    dims = _resolve_dims(M, d)
    _check_positive(M=M, d=dims, latent_dim=latent_dim)
    if n < 10:
        raise ValueError("n must be >= 10")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    k = min(latent_dim, min(dims))
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((n, k))
    if n_classes == 2:
        w = rng.standard_normal(k)
        labels = (u @ w > 0).astype(np.int64)
        label_weights = w[:, None]
    else:
        label_weights = rng.standard_normal((k, n_classes))
        labels = np.argmax(u @ label_weights, axis=1).astype(np.int64)
    mixing, modalities = [], []
    for dm in dims:
        A = rng.standard_normal((dm, k))
        A /= np.linalg.norm(A, axis=1, keepdims=True)
        x = u @ A.T + noise * rng.standard_normal((n, dm))
        mixing.append(A)
        modalities.append(x.astype(np.float32))
    specs = [ModalitySpec(f"view{m}", "static-vector", (dm,)) for m, dm in enumerate(dims)]
    meta = {"mixing": mixing, "label_weights": label_weights, "noise": noise}
    return _assemble("make_redundant", modalities, labels, specs,
                     Task("classification", n_classes), seed, meta)


def interaction_label(bits):
    """XOR over the modality axis of an (n, M) bit array."""
    return np.bitwise_xor.reduce(np.asarray(bits, dtype=np.int64), axis=1)


def make_interaction(M=2, n=4000, flip_prob=0.05, seed=0, d=8, signal=3.0):
    """Each modality hides one bit along a random direction; the label is their XOR.

    No function that is additive over modalities can decode the label, while a
    multiplicative interaction of the two decoded bits can reach ``1 - flip_prob``.
    """
    if M != 2:
        raise ValueError("make_interaction supports exactly 2 modalities")
    if not 0 <= flip_prob < 0.5:
        raise ValueError("flip_prob must lie in [0, 0.5)")
    dims = _resolve_dims(M, d)
    _check_positive(d=dims)
    if n < 10:
        raise ValueError("n must be >= 10")
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, size=(n, M))
    flips = rng.random(n) < flip_prob
    labels = (interaction_label(bits) ^ flips).astype(np.int64)
    modalities, directions = [], []
    for m, dm in enumerate(dims):
        mu = rng.standard_normal(dm)
        mu *= signal / np.linalg.norm(mu)
        x = (2 * bits[:, m:m + 1] - 1) * mu + rng.standard_normal((n, dm))
        directions.append(mu)
        modalities.append(x.astype(np.float32))
    specs = [ModalitySpec(f"bit{m}", "static-vector", (dm,)) for m, dm in enumerate(dims)]
    meta = {"bits": bits, "flips": flips, "directions": directions, "flip_prob": flip_prob}
    return _assemble("make_interaction", modalities, labels, specs,
                     Task("classification", 2), seed, meta)


def _token_intervals(T, n_tokens, rng):
    if n_tokens == T:
        cuts = np.arange(1, T)
    else:
        cuts = np.sort(rng.choice(np.arange(1, T), size=n_tokens - 1, replace=False))
    bounds = np.concatenate([[0], cuts, [T]])
    return WordIntervals(tuple(zip(bounds[:-1].tolist(), bounds[1:].tolist())))


def make_temporal(M=2, T=20, rates=None, n=600, seed=0, d=None, n_tokens=None):
    """Sequences at different sample rates sharing one event structure.

    Modality 0 is sampled once per word token; modality ``m > 0`` has ``T * rates[m]``
    rows, row ``i`` covering time ``i / rates[m]``. Every modality carries one event
    (feature 0 set to 1 over one token's span); the label is 1 iff all events fall on
    the same token. Returns ``(splits, intervals)``.
    """
    rates = [1] * M if rates is None else list(rates)
    if len(rates) != M:
        raise ValueError(f"expected {M} rates, got {len(rates)}")
    _check_positive(M=M, T=T, rates=rates)
    if any(r > T for r in rates):
        raise ValueError(f"sample rates may not exceed T={T}")
    if M < 2:
        raise ValueError("make_temporal needs at least 2 modalities")
    n_tokens = T if n_tokens is None else n_tokens
    if not 2 <= n_tokens <= T:
        raise ValueError("n_tokens must lie in [2, T]")
    dims = _resolve_dims(M, d)
    _check_positive(d=dims)
    rng = np.random.default_rng(seed)
    intervals = _token_intervals(T, n_tokens, rng)

    labels = rng.integers(0, 2, size=n).astype(np.int64)
    positions = np.empty((n, M), dtype=np.int64)
    for i in range(n):
        if labels[i]:
            positions[i] = rng.integers(n_tokens)
        else:
            while True:
                pos = rng.integers(n_tokens, size=M)
                if np.any(pos != pos[0]):
                    break
            positions[i] = pos

    modalities, specs = [], []
    for m, dm in enumerate(dims):
        if m == 0:
            length, rate = n_tokens, n_tokens / T
            span = [(t, t + 1) for t in range(n_tokens)]
        else:
            length, rate = T * rates[m], rates[m]
            span = [(int(s * rate), int(e * rate)) for s, e in intervals.intervals]
        x = rng.standard_normal((n, length, dm)).astype(np.float32)
        x[:, :, 0] = 0.0
        for i in range(n):
            a, b = span[positions[i, m]]
            x[i, a:b, 0] = 1.0
        modalities.append(x)
        specs.append(ModalitySpec(f"stream{m}", "temporal-sequence", (length, dm), float(rate)))
    meta = {"positions": positions, "intervals": [list(iv) for iv in intervals.intervals],
            "rates": rates}
    splits = _assemble("make_temporal", modalities, labels, specs,
                       Task("classification", 2), seed, meta)
    return splits, intervals


def word_align(seq, intervals, rate=1.0, return_mask=False):
    """Average the rows of ``seq`` whose timestamps fall inside each word interval.

    Row ``i`` of ``seq`` (shape ``(..., T, d)``) sits at time ``i / rate``. Intervals
    covering no row yield a zero vector; those are reported in the boolean mask when
    ``return_mask`` is set, otherwise a warning is raised.
    """
    if not isinstance(intervals, WordIntervals):
        intervals = WordIntervals(tuple(intervals))
    seq = np.asarray(seq)
    T = seq.shape[-2]
    times = np.arange(T) / rate
    weights = np.zeros((len(intervals), T))
    for t, (s, e) in enumerate(intervals.intervals):
        rows = (times >= s) & (times < e)
        if rows.any():
            weights[t, rows] = 1.0 / rows.sum()
    empty = weights.sum(axis=1) == 0
    out = np.matmul(weights, seq).astype(seq.dtype, copy=False)
    if return_mask:
        return out, empty
    if empty.any():
        warnings.warn(f"{int(empty.sum())} word interval(s) cover no rows; emitted zeros",
                      stacklevel=2)
    return out


def align_dataset(splits, intervals):
    """Apply :func:`word_align` to every non-token temporal modality of ``splits``."""
    new = {}
    specs = list(splits.specs)
    for key, split in splits.splits().items():
        mods = []
        for m, (arr, spec) in enumerate(zip(split.modalities, specs)):
            if m == 0 or not spec.temporal:
                mods.append(arr)
            else:
                mods.append(_freeze(word_align(arr, intervals, rate=spec.sample_rate)))
        new[key] = Split(mods, split.labels, split.indices)
    aligned_specs = [
        s if m == 0 or not s.temporal
        else ModalitySpec(s.name, s.kind, (len(intervals), s.shape[1]), specs[0].sample_rate)
        for m, s in enumerate(specs)
    ]
    return DatasetSplits(new["train"], new["valid"], new["test"], aligned_specs, splits.task,
                         splits.seed, splits.name + "+wordalign", dict(splits.meta))


def append_noise_modality(splits, dim=8, seed=0, name="noise"):
    """Return a copy of ``splits`` with one extra static modality of pure Gaussian noise."""
    rng = np.random.default_rng([seed, 0xA0153])
    new = {}
    for key, split in splits.splits().items():
        noise = rng.standard_normal((len(split), dim)).astype(np.float32)
        new[key] = Split(list(split.modalities) + [_freeze(noise)], split.labels, split.indices)
    specs = list(splits.specs) + [ModalitySpec(name, "static-vector", (dim,))]
    return DatasetSplits(new["train"], new["valid"], new["test"], specs, splits.task,
                         splits.seed, splits.name + "+noise", dict(splits.meta))


GENERATORS = {
    "make_redundant": make_redundant,
    "make_interaction": make_interaction,
    "make_temporal": make_temporal,
}


def generate(name, **kwargs):
    """Run a registered generator by name; temporal data is returned word-aligned
    only when ``align=True`` is passed."""
    align = kwargs.pop("align", False)
    if name not in GENERATORS:
        raise KeyError(f"unknown generator {name!r}; choose from {sorted(GENERATORS)}")
    out = GENERATORS[name](**kwargs)
    if isinstance(out, tuple):
        splits, intervals = out
        if align:
            splits = align_dataset(splits, intervals)
        splits.meta["intervals"] = [list(iv) for iv in intervals.intervals]
        return splits
    return out


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (list, tuple)):
        return [_jsonable(o) for o in obj]
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def save_dataset(splits, directory):
    """Write ``spec.json`` plus one raw little-endian file per (split, modality)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for key, split in splits.splits().items():
        for spec, arr in zip(splits.specs, split.modalities):
            fname = f"{key}.{spec.name}.bin"
            files[fname] = write_array(directory / fname, arr.astype(np.float32, copy=False))
        files[f"{key}.labels.bin"] = write_array(directory / f"{key}.labels.bin", split.labels)
        files[f"{key}.indices.bin"] = write_array(directory / f"{key}.indices.bin",
                                                  split.indices.astype(np.int64))
    write_json(directory / "spec.json", {
        "name": splits.name,
        "seed": splits.seed,
        "task": {"kind": splits.task.kind, "size": splits.task.size},
        "specs": [s.to_json() for s in splits.specs],
        "counts": {k: len(s) for k, s in splits.splits().items()},
        "files": files,
        "meta": _jsonable(splits.meta),
    })


def load_dataset(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "spec.json").read_text())
    files = manifest["files"]
    specs = [ModalitySpec.from_json(s) for s in manifest["specs"]]

    def load(fname):
        entry = files[fname]
        return _freeze(read_array(directory / fname, entry["dtype"], entry["shape"]))

    parts = {}
    for key in ("train", "valid", "test"):
        mods = [load(f"{key}.{spec.name}.bin") for spec in specs]
        parts[key] = Split(mods, load(f"{key}.labels.bin"), load(f"{key}.indices.bin"))
    task = Task(manifest["task"]["kind"], manifest["task"]["size"])
    return DatasetSplits(parts["train"], parts["valid"], parts["test"], specs, task,
                         manifest["seed"], manifest["name"], manifest["meta"])


def as_splits(source: DatasetSource | Sequence) -> DatasetSplits:
    """Coerce an external ``(splits, specs)`` provider into :class:`DatasetSplits`."""
    if isinstance(source, DatasetSplits):
        return source
    try:
        return DatasetSplits(source.train, source.valid, source.test, list(source.specs),
                             source.task, getattr(source, "seed", 0),
                             getattr(source, "name", "external"))
    except AttributeError as exc:
        raise TypeError("dataset must expose train/valid/test, specs and task") from exc
