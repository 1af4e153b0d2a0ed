"""Independent reference computations used by the tests."""

import itertools
import math

import numpy as np
import torch


def central_differences(fn, tensors, eps=1e-6):
    """Numerical gradient of scalar ``fn()`` w.r.t. each tensor by central differences."""
    grads = []
    for t in tensors:
        g = torch.zeros_like(t)
        flat, gflat = t.data.view(-1), g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = float(fn())
            flat[i] = orig - eps
            down = float(fn())
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def gradient_relative_error(fn, tensors, eps=1e-6):
    """max over tensors of |analytic - numeric| / max(|analytic|, |numeric|) in norm.

    Tensors whose true gradient vanishes (a key bias under softmax, say) would turn
    finite-difference round-off into a relative error near 1, so the denominator
    is floored at 1e-4."""
    for t in tensors:
        t.grad = None
    fn().backward()
    analytic = [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t)
                for t in tensors]
    with torch.no_grad():
        numeric = central_differences(fn, tensors, eps)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = max(a.norm().item(), n.norm().item(), 1e-4)
        worst = max(worst, (a - n).norm().item() / scale)
    return worst


def random_projection(output, seed):
    """Fixed random weights turning any output into a scalar test function."""
    g = torch.Generator().manual_seed(seed)
    return torch.randn(output.shape, generator=g, dtype=output.dtype)


def naive_lrtf(zs, factors):
    """Rebuild the full weight tensor sum_r outer_m W_m[r] and contract it with the
    outer product of [z_m; 1] by explicit index loops (one sample)."""
    aug = [np.append(z, 1.0) for z in zs]
    rank, _, d_out = factors[0].shape
    shape = [len(a) for a in aug]
    out = np.zeros(d_out)
    for idx in itertools.product(*[range(s) for s in shape]):
        weight = np.zeros(d_out)
        for r in range(rank):
            term = np.ones(d_out)
            for m, i in enumerate(idx):
                term = term * factors[m][r, i]
            weight += term
        coeff = np.prod([aug[m][i] for m, i in enumerate(idx)])
        out += coeff * weight
    return out


def fine_riemann(sigmas, values, per_segment=2000):
    """Midpoint sum of the piecewise-linear interpolant on a grid refining every segment."""
    total = []
    for (x0, x1), (y0, y1) in zip(zip(sigmas[:-1], sigmas[1:]), zip(values[:-1], values[1:])):
        h = (x1 - x0) / per_segment
        mids = x0 + h * (np.arange(per_segment) + 0.5)
        ys = y0 + (y1 - y0) * (mids - x0) / (x1 - x0)
        total.extend((ys * h).tolist())
    return math.fsum(total)


def within_binomial(count, n, p, k=3.0):
    """Is count/n within k standard errors of p?"""
    return abs(count / n - p) <= k * math.sqrt(p * (1 - p) / n) + 1e-12
