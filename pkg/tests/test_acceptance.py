"""The ten acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line (shown in the terminal summary) and then
asserts the verdict.
"""

import copy
import itertools
import json
import math
import time

import numpy as np
import pytest
import torch

from fusionbench import cli
from fusionbench.encoders import EncoderSpec, analytic_param_count, build_encoder, count_params
from fusionbench.evalmetrics import (RobustnessCurve, compute_performance, effective_robustness,
                                     relative_robustness, trapezoid)
from fusionbench.fusion import (FUSION_TAGS, build_fusion, late_fuse, early_fuse, lrtf_fuse,
                                tensor_fuse)
from fusionbench.perturb import PerturbationSpec
from fusionbench.synthdata import append_noise_modality, make_interaction, make_redundant
from fusionbench.training import (MCTNBundle, MFMBundle, ModelBundle, TrainConfig,
                                  train_gradblend, train_mctn, train_supervised)

from acceptance_log import record
from calibration import RATE_CHECKS, level_zero_cases, same_bytes
from oracles import fine_riemann, gradient_relative_error, naive_lrtf, random_projection, \
    within_binomial
from test_encoders import SPECS as ENCODER_SPECS
from test_encoders import _input as encoder_input
from test_fusion import GRAD_CASES, _seqs
from test_objectives import _loss_cases


def _accuracy(model, split):
    pred, _ = model.predict(split.modalities)
    return float(np.mean(pred == split.labels))


# 1 ---------------------------------------------------------------------------------

def test_criterion_01_fusion_dimensions():
    failures, checked = [], 0
    d_model = 8
    for M in (2, 3):
        for dims in itertools.product((1, 2, 3, 4), repeat=M):
            zs = [torch.randn(2, d) for d in dims]
            tf = tensor_fuse(zs).shape[1]
            tf_mod = build_fusion("tf", dims).out_dim
            want_tf = math.prod(d + 1 for d in dims)
            cat = (late_fuse(zs).shape[1], early_fuse(zs).shape[1],
                   build_fusion("lf", dims).out_dim)
            mult = build_fusion("mult", dims, d_model=d_model)
            seq_out = mult([torch.randn(2, 3, d) for d in dims]).shape[1]
            n_pairs = M * (M - 1)
            ok = (tf == tf_mod == want_tf and all(c == sum(dims) for c in cat)
                  and mult.out_dim == seq_out == n_pairs * d_model)
            if M == 2:
                ok = ok and mult.out_dim == 2 * d_model
            checked += 1
            if not ok:
                failures.append(dims)
    assert record(1, "fusion dimensions", not failures,
                  f"{checked} configurations, {len(failures)} mismatches")


# 2 ---------------------------------------------------------------------------------

def test_criterion_02_oracle_equivalences():
    rng = np.random.default_rng(2)
    worst_lrtf = 0.0
    for _ in range(50):
        M = int(rng.integers(2, 4))
        dims = rng.integers(1, 4, size=M)
        rank, d_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        zs = [rng.standard_normal(d) for d in dims]
        factors = [rng.standard_normal((rank, d + 1, d_out)) for d in dims]
        got = lrtf_fuse([torch.from_numpy(z)[None] for z in zs],
                        [torch.from_numpy(f) for f in factors])[0].numpy()
        want = naive_lrtf(zs, factors)
        worst_lrtf = max(worst_lrtf, np.linalg.norm(got - want) / max(np.linalg.norm(want), 1e-300))

    worst_trap = 0.0
    for trial in range(50):
        n = int(rng.integers(2, 9))
        sigmas = [0.0, *np.sort(rng.choice(np.arange(1, 100), n - 2, replace=False) / 100), 1.0]
        values = rng.uniform(0, 1, size=n).tolist()
        worst_trap = max(worst_trap, abs(trapezoid(sigmas, values) - fine_riemann(sigmas, values)))
        f, lf = RobustnessCurve("p", sigmas, values), RobustnessCurve("p", sigmas, values[::-1])
        gap = [a - b for a, b in zip(values, values[::-1])]
        worst_trap = max(worst_trap, abs(relative_robustness(f, lf) - fine_riemann(sigmas, gap)))

    # hand confusion matrices
    hand = []
    r = compute_performance([0, 0, 1, 1, 2, 2], [0, 0, 0, 1, 1, 2])
    hand.append(r["accuracy"] == 4 / 6 and r["micro_f1"] == 8 / 12
                and r["macro_f1"] == np.mean([4 / 5, 1 / 2, 2 / 3]))
    r = compute_performance([[1], [1], [1], [0]], [[1], [1], [0], [1]], "multilabel")
    hand.append(r["micro_f1"] == 4 / 6)
    r = compute_performance([1, 1, 0, 0], [1, 0, 0, 1])  # tp 1 fp 1 fn 1 per class
    hand.append(r["accuracy"] == 0.5 and r["macro_f1"] == 0.5)
    r = compute_performance(np.array([1.0, 2.0]), np.array([0.0, 4.0]), "regression")
    hand.append(r["mse"] == 2.5 and r["mae"] == 1.5)

    ok = worst_lrtf < 1e-5 and worst_trap < 1e-12 and all(hand)
    assert record(2, "oracle equivalences", ok,
                  f"LRTF max rel err {worst_lrtf:.1e}, trapezoid max err {worst_trap:.1e}, "
                  f"hand matrices {sum(hand)}/{len(hand)} exact")


# 3 ---------------------------------------------------------------------------------

def test_criterion_03_gradients():
    worst = {}
    for tag in FUSION_TAGS:
        case = GRAD_CASES[tag]
        module = build_fusion(tag, case["dims"], seed=1, dtype=torch.float64,
                              **case.get("params", {}))
        errs = []
        for trial in range(10):
            if module.needs_sequences:
                zs = _seqs(case["dims"], T_len=3, seed=trial)
            else:
                g = torch.Generator().manual_seed(trial)
                zs = [torch.randn(2, d, generator=g, dtype=torch.float64) for d in case["dims"]]
            for z in zs:
                z.requires_grad_(True)
            w = random_projection(module(zs), trial)
            errs.append(gradient_relative_error(lambda: (module(zs) * w).sum(),
                                                [*zs, *module.parameters()]))
        worst[f"fusion:{tag}"] = max(errs)
    for kind, spec in ENCODER_SPECS.items():
        module = build_encoder(spec, torch.float64)
        errs = []
        for trial in range(10):
            x = encoder_input(spec, seed=trial).requires_grad_(True)
            w = random_projection(module(x), trial)
            errs.append(gradient_relative_error(lambda: (module(x) * w).sum(),
                                                [x, *module.parameters()]))
        worst[f"encoder:{kind}"] = max(errs)
    for name in _loss_cases(0):
        errs = []
        for trial in range(10):
            tensors, fn = _loss_cases(trial)[name]
            for t in tensors:
                t.requires_grad_(True)
            errs.append(gradient_relative_error(fn, tensors))
        worst[f"loss:{name}"] = max(errs)
    bad = {k: v for k, v in worst.items() if not v < 1e-4}
    assert record(3, "finite-difference gradients", not bad,
                  f"{len(worst)} operators x 10 instances, max rel err {max(worst.values()):.1e}"
                  + (f", failing {sorted(bad)}" if bad else ""))


# 4 ---------------------------------------------------------------------------------

def _interaction_model(data, tag, seed):
    specs = [EncoderSpec("mlp", s.shape, 4, (16,), seed=seed + m)
             for m, s in enumerate(data.specs)]
    params = {"out_dim": 8} if tag == "mi-matrix" else {}
    return ModelBundle(specs, tag, 2, fusion_params=params, seed=seed)


def test_criterion_04_interaction_separation():
    start = time.perf_counter()
    rows, ok = [], True
    for seed in range(5):
        data = make_interaction(n=4000, flip_prob=0.05, seed=seed)
        cfg = TrainConfig(epochs=20, lr=0.05, seed=seed)
        acc = {}
        for tag in ("tf", "mi-matrix", "lf"):
            model = _interaction_model(data, tag, seed)
            train_supervised(model, data, cfg)
            acc[tag] = _accuracy(model, data.test)
        ok &= max(acc["tf"], acc["mi-matrix"]) >= 0.90 and acc["lf"] <= 0.60
        rows.append(f"s{seed} tf={acc['tf']:.3f} mi={acc['mi-matrix']:.3f} lf={acc['lf']:.3f}")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 120
    assert record(4, "interaction separation", ok, "; ".join(rows) + f"; {elapsed:.0f}s")


# 5 ---------------------------------------------------------------------------------

def test_criterion_05_robustness_identities():
    rng = np.random.default_rng(5)
    sig = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
    checks = []
    for _ in range(200):
        lf_vals = rng.uniform(0.2, 0.8, size=6).tolist()
        lf = RobustnessCurve("p", sig, lf_vals)
        checks.append(relative_robustness(lf, lf) == 0.0 and effective_robustness(lf, lf) == 0.0)
        f_vals = rng.uniform(0, 1, size=6).tolist()
        f_vals[0] = lf_vals[0]
        f = RobustnessCurve("p", sig, f_vals)
        checks.append(effective_robustness(f, lf) == relative_robustness(f, lf))
        shift = float(rng.uniform(-0.15, 0.15))
        translated = RobustnessCurve("p", sig, [v + shift for v in lf_vals])
        checks.append(abs(effective_robustness(translated, lf)) < 1e-12)
    assert record(5, "robustness identities", all(checks),
                  f"{sum(checks)}/{len(checks)} identity checks hold")


# 6 ---------------------------------------------------------------------------------

def test_criterion_06_mctn_single_modality():
    data = make_redundant(n=600, d=(6, 5), seed=6)
    specs = [EncoderSpec("mlp", (6,), 8, (16,), seed=0), EncoderSpec("mlp", (5,), 8, (16,), seed=1)]
    model = MCTNBundle(specs, 2, seed=0)
    train_mctn(model, data, TrainConfig(epochs=3, lr=0.05))
    rng = np.random.default_rng(6)
    identical = 0
    for trial in range(100):
        x1 = rng.standard_normal((16, 6)).astype(np.float32) * rng.uniform(0.1, 10)
        x2 = rng.standard_normal((16, 5)).astype(np.float32)
        ref = model.logits([x1, x2])
        variants = [np.zeros_like(x2), rng.standard_normal(x2.shape).astype(np.float32) * 100,
                    np.full_like(x2, np.nan)]
        same = all(torch.equal(model.logits([x1, v]), ref) for v in variants)
        same &= torch.equal(model.logits([x1]), ref)
        identical += same
    assert record(6, "MCTN ignores modality 2", identical == 100,
                  f"{identical}/100 fuzzed inputs bit-identical (zeroed, random, NaN, dropped)")


# 7 ---------------------------------------------------------------------------------

def test_criterion_07_perturbation_calibration():
    misses = []
    for family, check in RATE_CHECKS.items():
        for p in (0.1, 0.5, 0.9):
            count, n, expected = check(p, seed=7)
            if not within_binomial(count, n, expected):
                misses.append(f"{family}@{p}: {count / n:.3f} vs {expected:.3f}")
    cases = level_zero_cases()
    identity = [same_bytes(apply(PerturbationSpec(f, 0.0, seed=7), x), x) for f, apply, x in cases]
    deterministic = []
    for family, apply, x in cases:
        spec = PerturbationSpec(family, 0.5, seed=7, params={"m": 2})
        deterministic.append(same_bytes(apply(spec, x), apply(spec, x)))
    families = {f for f, _, _ in cases}
    ok = not misses and all(identity) and all(deterministic) and len(families) >= 20
    assert record(7, "perturbation calibration", ok,
                  f"{len(RATE_CHECKS)} families x 3 levels in 3-sigma CI "
                  f"({len(misses)} misses{': ' + '; '.join(misses) if misses else ''}), "
                  f"level-0 identity {sum(identity)}/{len(identity)} over {len(families)} families, "
                  f"determinism {sum(deterministic)}/{len(deterministic)}")


# 8 ---------------------------------------------------------------------------------

def test_criterion_08_gradblend():
    rows, below, acc_ok = [], 0, 0
    for seed in range(5):
        data = append_noise_modality(make_redundant(n=3000, d=(6, 5), noise=1.0, seed=seed),
                                     seed=seed)
        cfg = TrainConfig(epochs=30, lr=0.05, seed=seed)

        def model():
            specs = [EncoderSpec("mlp", s.shape, 8, (16,), seed=seed + m)
                     for m, s in enumerate(data.specs)]
            return ModelBundle(specs, "lf", 2, seed=seed)

        gb = train_gradblend(model(), data, cfg)
        lf = model()
        train_supervised(lf, data, cfg)
        w_noise = gb.blend_weights.unimodal[2]
        acc_gb, acc_lf = _accuracy(gb.model, data.test), _accuracy(lf, data.test)
        below += w_noise < 1 / 4
        acc_ok += acc_gb >= acc_lf - 0.02
        rows.append(f"s{seed} w_noise={w_noise:.3f} gb={acc_gb:.3f} lf={acc_lf:.3f}")
    ok = below >= 4 and acc_ok == 5
    assert record(8, "GradBlend sanity", ok,
                  f"noise weight < 1/4 in {below}/5, accuracy within 0.02 of LF in {acc_ok}/5; "
                  + "; ".join(rows))


# 9 ---------------------------------------------------------------------------------

def test_criterion_09_reproducibility(tmp_path):
    config = json.loads(open(__file__.replace("tests/test_acceptance.py",
                                              "configs/interaction_lf.json")).read())
    config["dataset"]["args"]["n"] = 1000
    config["training"]["config"]["epochs"] = 5
    config["seeds"] = [0, 1]
    a = cli.run_experiment(copy.deepcopy(config), tmp_path / "a")
    b = cli.run_experiment(copy.deepcopy(config), tmp_path / "b")
    identical = (a / "metrics.json").read_bytes() == (b / "metrics.json").read_bytes()
    mismatches = cli.audit(a)
    ok = identical and not mismatches
    assert record(9, "end-to-end reproducibility", ok,
                  f"metrics.json byte-identical={identical}, audit mismatches={len(mismatches)}")


# 10 --------------------------------------------------------------------------------

def _fusion_formula(tag, dims, params):
    d1, d2 = dims[0], dims[-1]
    if tag in ("ef", "lf", "tf"):
        return 0
    if tag == "lrtf":
        return sum(params["rank"] * (d + 1) * params["out_dim"] for d in dims)
    if tag == "mi-matrix":
        o = params["out_dim"]
        return d1 * o * d2 + d1 * o + o * d2 + o
    if tag == "mi-vector":
        return 2 * d1 * d2 + 2 * d1
    if tag == "mi-scalar":
        return 2 * d2 + 2
    if tag == "film":
        h = params["hidden_dims"][0]
        return 2 * ((d2 * h + h) + (h * d1 + d1))
    if tag == "gate":
        return d2 * d1 + d1
    if tag == "nlgate":
        k = params["key_dim"]
        return d1 * k + 2 * d2 * k + 2 * d2 + d1
    if tag == "mult":
        dm = params["d_model"]
        block = lambda a, b: ((a * dm + dm) + (b * dm + dm) + 3 * 2 * dm  # noqa: E731
                              + 4 * (dm * dm + dm) + (dm * 2 * dm + 2 * dm) + (2 * dm * dm + dm))
        return block(d1, d2) + block(d2, d1)
    raise AssertionError(tag)


def test_criterion_10_complexity_accounting():
    mismatches = []
    for kind, spec in ENCODER_SPECS.items():
        for width in (2, 4, 8):
            obj = {**spec.to_json(), "out_dim": width if kind != "identity" else spec.out_dim}
            if spec.hidden_dims:
                obj["hidden_dims"] = [width * 2]
            s = EncoderSpec.from_json(obj)
            if count_params(build_encoder(s)) != analytic_param_count(s):
                mismatches.append(f"encoder {kind} width {width}")
    for tag, case in GRAD_CASES.items():
        params = case.get("params", {})
        module = build_fusion(tag, case["dims"], **params)
        if count_params(module) != _fusion_formula(tag, case["dims"], params):
            mismatches.append(f"fusion {tag}")
    data = make_redundant(n=200, d=(6, 5), seed=10)
    specs = [EncoderSpec("mlp", s.shape, 8, (16,), seed=m) for m, s in enumerate(data.specs)]
    mfm = MFMBundle(specs, "lf", 2, private_dim=3, decoder_hidden=(8,))
    train_count, inference_count = mfm.param_counts()
    plain = ModelBundle(specs, "lf", 2)
    encoders = sum(analytic_param_count(s) for s in specs)
    head = 16 * 2 + 2
    decoders = sum((3 + 16) * 8 + 8 + 8 * d + d for d in (6, 5))
    private = sum(d * 16 + 16 + 16 * 3 + 3 for d in (6, 5))
    mfm_ok = (inference_count == encoders + head == count_params(plain)
              and train_count == inference_count + decoders + private)
    if not mfm_ok:
        mismatches.append("mfm inference count")
    assert record(10, "complexity accounting", not mismatches,
                  f"encoders, fusion ops and MFM (inference {inference_count} of {train_count} "
                  f"params, decoders excluded) match closed forms"
                  if not mismatches else f"mismatches: {mismatches}")
