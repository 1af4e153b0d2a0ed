"""Seeded, level-parameterised imperfections for each modality type and for
several modalities at once, plus the noisy test grids used for robustness curves.

Every call is a pure function of ``(input, spec, sample_index)``: the random stream
is derived from the PerturbationSpec seed, the sample index and the family name, and never
from the level. Using the same stream at every level makes corruption nested as
the level grows (an entry dropped at p = 0.3 is also dropped at p = 0.6). Level 0
always returns the input unchanged.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .serialization import write_array, write_json

ALL = "ALL"

TEXT_FAMILIES = ("typo", "sticky", "omission", "swap_letters", "permute_middle")
IMAGE_FAMILIES = ("gaussian", "salt_pepper", "periodic", "grayscale", "contrast", "invert",
                  "white_balance", "colorize", "hflip", "channel_isolate", "crop", "rotate",
                  "translate")
TIMESERIES_FAMILIES = ("white_noise", "random_drop", "structured_drop")
AUDIO_FAMILIES = ("awgn", "random_drop", "structured_drop")
TABLE_FAMILIES = ("table_drop", "table_swap")
SET_FAMILIES = ("set_drop", "set_noise")
MULTIMODAL_FAMILIES = ("correlated_noise", "correlated_drop", "temporal_drop",
                       "structured_temporal_drop", "missing_modality")

# modality kinds each unimodal family may be applied to inside a dataset
FAMILY_KINDS = {
    **{f: ("image-grid",) for f in IMAGE_FAMILIES},
    "white_noise": ("temporal-sequence", "static-vector", "table"),
    "awgn": ("temporal-sequence",),
    "random_drop": ("temporal-sequence",),
    "structured_drop": ("temporal-sequence",),
    "table_drop": ("table", "static-vector"),
    "table_swap": ("table", "static-vector"),
    "set_drop": ("set",),
    "set_noise": ("set",),
}

DEFAULT_FAMILIES = {
    "static-vector": ("white_noise",),
    "table": ("table_drop",),
    "temporal-sequence": ("white_noise", "random_drop"),
    "image-grid": ("gaussian", "salt_pepper"),
    "set": ("set_noise", "set_drop"),
}

NOISE_FAMILY = {"static-vector": "white_noise", "table": "white_noise",
                "temporal-sequence": "white_noise", "image-grid": "gaussian", "set": "set_noise"}
DROP_FAMILY = {"static-vector": "table_drop", "table": "table_drop",
               "temporal-sequence": "random_drop", "image-grid": "salt_pepper", "set": "set_drop"}

DEFAULT_LEVELS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


class UnsupportedPerturbation(ValueError):
    """The family cannot be applied to this data (e.g. no shared time axis)."""


@dataclass(frozen=True)
class PerturbationSpec:
    family: str
    level: float
    target: str = ALL
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.level <= 1.0:
            raise ValueError(f"level must lie in [0, 1], got {self.level}")
        known = set(TEXT_FAMILIES + IMAGE_FAMILIES + TIMESERIES_FAMILIES + AUDIO_FAMILIES
                    + TABLE_FAMILIES + SET_FAMILIES + MULTIMODAL_FAMILIES)
        if self.family not in known:
            raise ValueError(f"unknown perturbation family {self.family!r}")

    def at(self, level):
        return PerturbationSpec(self.family, level, self.target, dict(self.params), self.seed)

    def to_json(self):
        return {"target": self.target, "family": self.family, "level": self.level,
                "params": dict(self.params), "seed": self.seed}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["family"], obj["level"], obj.get("target", ALL),
                   dict(obj.get("params", {})), obj.get("seed", 0))


def sample_rng(spec, sample_index=0):
    """Random stream for one sample, independent of the level and of other samples."""
    key = zlib.crc32(spec.family.encode())
    return np.random.default_rng(np.random.SeedSequence(int(spec.seed),
                                                        spawn_key=(int(sample_index), key)))


def _check_family(spec, allowed):
    if spec.family not in allowed:
        raise ValueError(f"family {spec.family!r} is not one of {allowed}")


# --- text -----------------------------------------------------------------

_QWERTY = {
    "q": "wa", "w": "qeas", "e": "wrsd", "r": "etdf", "t": "ryfg", "y": "tugh", "u": "yihj",
    "i": "uojk", "o": "ipkl", "p": "ol",
    "a": "qwsz", "s": "adwezx", "d": "sferxc", "f": "dgrtcv", "g": "fhtyvb", "h": "gjyubn",
    "j": "hkuinm", "k": "jliom", "l": "kop",
    "z": "asx", "x": "zcsd", "c": "xvdf", "v": "cbfg", "b": "vngh", "n": "bmhj", "m": "njk",
}
QWERTY_NEIGHBORS = {k: tuple(v) for k, v in _QWERTY.items()}


def _typo(word, p, rng):
    out = []
    for ch in word:
        neighbors = QWERTY_NEIGHBORS.get(ch.lower())
        if neighbors and rng.random() < p:
            new = neighbors[rng.integers(len(neighbors))]
            ch = new.upper() if ch.isupper() else new
        out.append(ch)
    return "".join(out)


def _text_word(word, family, p, m, rng):
    if family == "typo":
        return _typo(word, p, rng)
    if rng.random() >= p:
        return word
    n = len(word)
    if family == "sticky" and n:
        picks = set(rng.choice(n, size=min(m, n), replace=False).tolist())
        return "".join(ch * 2 if i in picks else ch for i, ch in enumerate(word))
    if family == "omission" and n > 1:
        picks = set(rng.choice(n, size=min(m, n - 1), replace=False).tolist())
        return "".join(ch for i, ch in enumerate(word) if i not in picks)
    if family == "swap_letters" and n >= 4:
        i = int(rng.integers(1, n - 2))
        chars = list(word)
        chars[i], chars[i + 1] = chars[i + 1], chars[i]
        return "".join(chars)
    if family == "permute_middle" and n >= 4:
        middle = list(word[1:-1])
        rng.shuffle(middle)
        return word[0] + "".join(middle) + word[-1]
    return word


def perturb_text(tokens, spec, sample_index=0):
    """Character-level noise on a list of word tokens.

    ``typo`` replaces each letter by a QWERTY neighbour with probability p. The other
    families fire once per word with probability p: ``sticky`` doubles m letters,
    ``omission`` deletes m letters, ``swap_letters`` swaps one adjacent interior pair
    and ``permute_middle`` shuffles all but the first and last letter.
    """
    _check_family(spec, TEXT_FAMILIES)
    if spec.level == 0:
        return list(tokens)
    rng = sample_rng(spec, sample_index)
    m = int(spec.params.get("m", 1))
    return [_text_word(w, spec.family, spec.level, m, rng) for w in tokens]


# --- images ---------------------------------------------------------------

def _image_scale(img):
    return 255.0 if np.issubdtype(img.dtype, np.integer) else 1.0


def _finish(img, out, scale):
    out = np.clip(out, 0.0, scale)
    if np.issubdtype(img.dtype, np.integer):
        out = np.rint(out)
    return out.astype(img.dtype)


def _need_rgb(img, family):
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"{family} needs an (H, W, 3) image, got shape {img.shape}")


GRAY_WEIGHTS = np.array([0.3, 0.59, 0.11])
COLORIZE_TINT = np.array([1.0, 0.8, 0.55])
PERIODIC_PERIOD = 8


def perturb_image(img, spec, sample_index=0):
    """Image noise, colour and geometric corruptions.

    Arrays are (H, W) or (H, W, C), integers in [0, 255] or floats in [0, 1]. Gaussian
    noise has variance p in units of the full intensity range; salt-and-pepper kills
    each pixel with probability p; the periodic family adds a diagonal sine grating of
    amplitude p; every other family fires on the whole image with probability p. Geometric families keep the shape and pad with zeros.
    """
    _check_family(spec, IMAGE_FAMILIES)
    img = np.asarray(img)
    if spec.level == 0:
        return img.copy()
    p, family = spec.level, spec.family
    rng = sample_rng(spec, sample_index)
    scale = _image_scale(img)
    x = img.astype(np.float64)
    H, W = img.shape[:2]
    expand = (slice(None), slice(None)) + ((None,) if img.ndim == 3 else ())

    if family == "gaussian":
        noise = rng.normal(0.0, np.sqrt(p) * scale, size=(H, W))
        return _finish(img, x + noise[expand], scale)
    if family == "salt_pepper":
        dead = rng.random((H, W)) < p
        value = np.where(rng.random((H, W)) < 0.5, 0.0, scale)
        out = np.where(dead[expand], value[expand], x)
        return _finish(img, out, scale)
    if family == "periodic":
        ii, jj = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        grating = p * scale * np.sin(2 * np.pi * (ii + jj) / PERIODIC_PERIOD)
        return _finish(img, x + grating[expand], scale)
    if family in ("grayscale", "white_balance", "colorize", "channel_isolate"):
        _need_rgb(img, family)
    if rng.random() >= p:
        return img.copy()
    if family == "grayscale":
        gray = x @ GRAY_WEIGHTS
        return _finish(img, np.repeat(gray[:, :, None], 3, axis=2), scale)
    if family == "contrast":
        return _finish(img, x.mean() + 0.5 * (x - x.mean()), scale)
    if family == "invert":
        return _finish(img, scale - x, scale)
    if family == "white_balance":
        warm = rng.random() < 0.5
        gains = np.array([1.2, 1.0, 0.8]) if warm else np.array([0.8, 1.0, 1.2])
        return _finish(img, x * gains, scale)
    if family == "colorize":
        gray = x @ GRAY_WEIGHTS
        return _finish(img, gray[:, :, None] * COLORIZE_TINT, scale)
    if family == "hflip":
        return img[:, ::-1].copy()
    if family == "channel_isolate":
        keep = rng.integers(3)
        out = np.zeros_like(x)
        out[:, :, keep] = 1.2 * x[:, :, keep]
        return _finish(img, out, scale)
    if family == "crop":
        h, w = max(1, int(round(0.8 * H))), max(1, int(round(0.8 * W)))
        top, left = rng.integers(H - h + 1), rng.integers(W - w + 1)
        out = np.zeros_like(x)
        out[top:top + h, left:left + w] = x[top:top + h, left:left + w]
        return _finish(img, out, scale)
    if family == "rotate":
        angle = rng.uniform(20.0, 40.0)
        out = ndimage.rotate(x, angle, axes=(1, 0), reshape=False, order=1,
                             mode="constant", cval=0.0)
        return _finish(img, out, scale)
    if family == "translate":
        direction = rng.integers(4)
        axis = 0 if direction < 2 else 1
        shift = max(1, int(round(0.1 * img.shape[axis])))
        shift = -shift if direction % 2 else shift
        out = np.roll(x, shift, axis=axis)
        index = [slice(None)] * x.ndim
        index[axis] = slice(0, shift) if shift > 0 else slice(shift, None)
        out[tuple(index)] = 0.0
        return _finish(img, out, scale)
    raise AssertionError(family)


# --- time series / audio --------------------------------------------------

def _rows(seq):
    return seq.shape[0]


def structured_blocks(T, m, rng):
    """Candidate start indices of non-overlapping length-m blocks, at a random offset."""
    if m > T:
        raise ValueError(f"structured drop length m={m} exceeds sequence length {T}")
    offset = int(rng.integers(T % m + 1))
    return np.arange(offset, T - m + 1, m)


def _time_mask(T, family, p, params, rng):
    """Boolean mask of dropped time steps for random/structured drops."""
    if family in ("random_drop", "temporal_drop"):
        return rng.random(T) < p
    m = int(params.get("m", max(1, T // 10)))
    starts = structured_blocks(T, m, rng)
    fire = rng.random(len(starts)) < p
    mask = np.zeros(T, dtype=bool)
    for s in starts[fire]:
        mask[s:s + m] = True
    return mask


def _drop_rows(seq, mask):
    out = seq.copy()
    out[mask] = 0
    return out


def perturb_timeseries(seq, spec, sample_index=0):
    """``white_noise`` adds N(0, p^2) to every entry; ``random_drop`` zeroes each time
    step with probability p; ``structured_drop`` zeroes runs of ``m`` consecutive steps,
    each run firing with probability p. Time is the first axis."""
    _check_family(spec, TIMESERIES_FAMILIES + ("awgn",))
    seq = np.asarray(seq)
    if spec.level == 0:
        return seq.copy()
    rng = sample_rng(spec, sample_index)
    if spec.family in ("white_noise", "awgn"):
        noise = rng.normal(0.0, spec.level, size=seq.shape)
        return (seq + noise).astype(seq.dtype)
    mask = _time_mask(_rows(seq), spec.family, spec.level, spec.params, rng)
    return _drop_rows(seq, mask)


def perturb_audio(wave, spec, sample_index=0):
    """Additive white Gaussian noise with std p, or the time-series drops, on a 1-D
    waveform or a (T, F) spectrogram."""
    _check_family(spec, AUDIO_FAMILIES)
    return perturb_timeseries(wave, spec, sample_index)


# --- tables and sets ------------------------------------------------------

def perturb_tabular(row, spec, sample_index=0):
    """``table_drop`` zeroes each entry with probability p; ``table_swap`` visits every
    entry and with probability p swaps it with a uniformly chosen entry."""
    _check_family(spec, TABLE_FAMILIES)
    row = np.asarray(row)
    if spec.level == 0:
        return row.copy()
    rng = sample_rng(spec, sample_index)
    flat = row.reshape(-1).copy()
    if spec.family == "table_drop":
        flat[rng.random(flat.size) < spec.level] = 0
    else:
        fire = rng.random(flat.size) < spec.level
        partners = rng.integers(flat.size, size=flat.size)
        for i in np.flatnonzero(fire):
            j = partners[i]
            flat[i], flat[j] = flat[j], flat[i]
    return flat.reshape(row.shape)


def perturb_set(elems, spec, sample_index=0):
    """``set_drop`` removes each element (row) with probability p, so the set shrinks;
    ``set_noise`` adds N(0, p^2) to element features."""
    _check_family(spec, SET_FAMILIES)
    elems = np.asarray(elems)
    if spec.level == 0:
        return elems.copy()
    rng = sample_rng(spec, sample_index)
    if spec.family == "set_drop":
        keep = rng.random(len(elems)) >= spec.level
        return elems[keep].copy()
    return (elems + rng.normal(0.0, spec.level, size=elems.shape)).astype(elems.dtype)


def _pad_set(elems, n):
    out = np.full((n,) + elems.shape[1:], np.nan, dtype=elems.dtype)
    out[:len(elems)] = elems
    return out


def perturb_array(x, kind, spec, sample_index=0):
    """Apply a unimodal family to one sample of a dataset modality of type ``kind``.

    Dropped set elements are re-padded with NaN rows so the array keeps its shape;
    the deep-set encoder treats NaN rows as absent.
    """
    allowed = FAMILY_KINDS.get(spec.family)
    if allowed is None or kind not in allowed:
        raise UnsupportedPerturbation(f"family {spec.family!r} does not apply to {kind} data")
    if spec.family in IMAGE_FAMILIES:
        return perturb_image(x, spec, sample_index)
    if spec.family in TABLE_FAMILIES:
        return perturb_tabular(x, spec, sample_index)
    if spec.family in SET_FAMILIES:
        out = perturb_set(x, spec, sample_index)
        return _pad_set(out, len(x)) if spec.family == "set_drop" else out
    return perturb_timeseries(x, spec, sample_index)


# --- multimodal -------------------------------------------------------------

def _kinds(modalities, specs):
    if specs is None:
        return ["temporal-sequence" if np.ndim(m) == 2 else "static-vector" for m in modalities]
    return [s.kind for s in specs]


def _target_index(spec, specs, M):
    if spec.target == ALL:
        return None
    if isinstance(spec.target, int):
        return spec.target
    names = [s.name for s in specs] if specs else []
    if spec.target in names:
        return names.index(spec.target)
    raise ValueError(f"unknown target modality {spec.target!r}")


def shared_time_axis(modalities, specs=None):
    """Length of the common time axis, or None if the modalities do not share one."""
    kinds = _kinds(modalities, specs)
    if any(k != "temporal-sequence" for k in kinds):
        return None
    lengths = {np.shape(m)[0] for m in modalities}
    return lengths.pop() if len(lengths) == 1 else None


def perturb_multimodal(sample, spec, specs=None, sample_index=0, return_events=False):
    """Correlated imperfections driven by one random draw shared by all modalities.

    ``correlated_noise`` / ``correlated_drop``: a single coin with probability p decides
    whether every modality receives its own noise (drop) family at level p.
    ``temporal_drop`` / ``structured_temporal_drop``: one time mask zeroes the same
    steps in every modality. ``missing_modality``: with probability p the target
    modality (a random one when the target is ALL) is zeroed entirely.
    """
    _check_family(spec, MULTIMODAL_FAMILIES)
    modalities = list(getattr(sample, "modalities", sample))
    kinds = _kinds(modalities, specs)
    M = len(modalities)
    family, p = spec.family, spec.level
    if family in ("temporal_drop", "structured_temporal_drop"):
        T = shared_time_axis(modalities, specs)
        if T is None:
            raise UnsupportedPerturbation(
                "temporal drops need modalities that share one time axis")
    events = {"triggered": False, "mask": None, "dropped": None}
    if p == 0:
        out = [np.array(m, copy=True) for m in modalities]
        return (out, events) if return_events else out
    rng = sample_rng(spec, sample_index)

    if family in ("correlated_noise", "correlated_drop"):
        triggered = bool(rng.random() < p)
        events["triggered"] = triggered
        out = []
        for m, (x, kind) in enumerate(zip(modalities, kinds)):
            if not triggered:
                out.append(np.array(x, copy=True))
                continue
            inner = (NOISE_FAMILY if family == "correlated_noise" else DROP_FAMILY)[kind]
            inner_spec = PerturbationSpec(inner, p, params=spec.params,
                                          seed=int(rng.integers(2 ** 31)))
            out.append(perturb_array(np.asarray(x), kind, inner_spec, sample_index))
    elif family in ("temporal_drop", "structured_temporal_drop"):
        mask = _time_mask(T, family, p, spec.params, rng)
        events["mask"] = mask
        events["triggered"] = bool(mask.any())
        out = [_drop_rows(np.asarray(x), mask) for x in modalities]
    else:
        target = _target_index(spec, specs, M)
        triggered = bool(rng.random() < p)
        chosen = int(rng.integers(M)) if target is None else target
        events["triggered"] = triggered
        events["dropped"] = chosen if triggered else None
        out = [np.zeros_like(np.asarray(x)) if triggered and m == chosen
               else np.array(x, copy=True) for m, x in enumerate(modalities)]
    return (out, events) if return_events else out


# --- noisy test grids ---------------------------------------------------------

MULTIMODAL_PARTITION = "multimodal"


@dataclass
class NoisyTestGrid:
    """Test sets corrupted at increasing levels, one partition per modality plus an
    optional multimodal partition. Corrupted sets are generated lazily and cached;
    level 0 returns the clean arrays themselves."""

    levels: list
    partitions: list
    clean: list
    labels: np.ndarray
    indices: np.ndarray
    specs: list
    families: dict
    multimodal_family: str | None
    seed: int = 0
    params: dict = field(default_factory=dict)
    reason: str | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def get(self, partition, level):
        if partition not in self.partitions:
            raise KeyError(partition)
        if level == 0:
            return self.clean
        key = (partition, float(level))
        if key not in self._cache:
            self._cache[key] = self._build(partition, float(level))
        return self._cache[key]

    def save(self, directory):
        """Write every (partition, level) test set as raw little-endian float32 files
        plus a ``grid.json`` index."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = {"labels.bin": write_array(directory / "labels.bin", self.labels),
                 "indices.bin": write_array(directory / "indices.bin",
                                            self.indices.astype(np.int64))}
        for partition in self.partitions:
            for i, level in enumerate(self.levels):
                for spec, arr in zip(self.specs, self.get(partition, level)):
                    fname = f"{partition}.{i}.{spec.name}.bin"
                    files[fname] = write_array(directory / fname, arr.astype(np.float32))
        write_json(directory / "grid.json", {
            "levels": self.levels, "partitions": self.partitions, "reason": self.reason,
            "specs": [s.to_json() for s in self.specs],
            "families": {k: list(v) for k, v in self.families.items()},
            "multimodal_family": self.multimodal_family, "seed": self.seed, "files": files})

    def _build(self, partition, level):
        if partition == MULTIMODAL_PARTITION:
            spec = PerturbationSpec(self.multimodal_family, level, params=self.params,
                                    seed=self.seed)
            per_mod = [[] for _ in self.clean]
            for i, idx in enumerate(self.indices):
                sample = [m[i] for m in self.clean]
                for m, x in enumerate(perturb_multimodal(sample, spec, self.specs, int(idx))):
                    per_mod[m].append(x)
            return [np.stack(xs).astype(c.dtype) for xs, c in zip(per_mod, self.clean)]
        m = [s.name for s in self.specs].index(partition)
        kind = self.specs[m].kind
        arr = self.clean[m]
        out = np.empty_like(arr)
        for i, idx in enumerate(self.indices):
            x = arr[i]
            for family in self.families[partition]:
                fspec = PerturbationSpec(family, level, partition, self.params, self.seed)
                x = perturb_array(x, kind, fspec, int(idx))
            out[i] = x
        result = list(self.clean)
        result[m] = out
        return result


def build_noisy_grid(test_split, specs, families=None, levels=DEFAULT_LEVELS,
                     multimodal_family="auto", seed=0, params=None):
    """Build the M (or M + 1) partitions of increasingly corrupted test data.

    ``families`` maps modality name -> list of unimodal families (defaults by modality
    kind). The multimodal partition uses ``multimodal_family`` ("auto" picks
    ``temporal_drop``); it is omitted, with a recorded reason, when the modalities do
    not share a time axis.
    """
    levels = sorted(float(s) for s in levels)
    if not levels or levels[0] != 0.0:
        raise ValueError("levels must include 0.0")
    families = dict(families or {})
    for spec in specs:
        fams = tuple(families.get(spec.name, DEFAULT_FAMILIES[spec.kind]))
        for fam in fams:
            if spec.kind not in FAMILY_KINDS.get(fam, ()):
                raise UnsupportedPerturbation(f"family {fam!r} does not apply to "
                                              f"{spec.kind} modality {spec.name!r}")
        families[spec.name] = fams
    partitions = [s.name for s in specs]
    reason = None
    if multimodal_family == "auto":
        multimodal_family = "temporal_drop"
    if multimodal_family is not None:
        temporal_family = multimodal_family in ("temporal_drop", "structured_temporal_drop")
        lengths = {s.shape[0] for s in specs} if all(s.temporal for s in specs) else None
        if temporal_family and (lengths is None or len(lengths) != 1):
            reason = "modalities share no time dimension; multimodal partition omitted"
            multimodal_family = None
        else:
            partitions.append(MULTIMODAL_PARTITION)
    return NoisyTestGrid(levels, partitions, list(test_split.modalities),
                         np.asarray(test_split.labels), np.asarray(test_split.indices),
                         list(specs), families, multimodal_family, seed, dict(params or {}),
                         reason)
