"""Self-check suite run by ``wisernet verify``.

Each check returns a :class:`CheckResult`; the suite never raises on a
failed property, it reports it.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from wisernet.autodiff import functional as F
from wisernet.autodiff.gradcheck import check_gradients
from wisernet.autodiff.tensor import Tensor, concat, precision, where
from wisernet.config import TrainConfig
from wisernet.losses import dice_loss, lambda_schedule, total_loss
from wisernet.metrics import hd95
from wisernet.segnet import ModelConfig, WaveSegNet, model_forward
from wisernet.wavelet import SubBands, dwt_haar, idwt_haar
from wisernet.wiser import WiserParams, edge_select, ortho_loss, wiser_forward


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""
    seconds: float = 0.0


def _timed(name: str, tolerance: float, fn: Callable[[], tuple]) -> CheckResult:
    started = time.perf_counter()
    try:
        value, detail = fn()
        passed = bool(value <= tolerance) if not math.isnan(value) else False
    except Exception as exc:  # a crashing check is a failing check
        value, detail, passed = float("nan"), f"{type(exc).__name__}: {exc}", False
    return CheckResult(name, passed, float(value), tolerance, detail, time.perf_counter() - started)


# -- wavelet ---------------------------------------------------------------


def wavelet_roundtrip(dwt=dwt_haar, idwt=idwt_haar, n: int = 100, seed: int = 0):
    """Worst reconstruction error and worst relative energy gap over random tensors."""
    rng = np.random.default_rng(seed)
    worst_rec, worst_energy = 0.0, 0.0
    for _ in range(n):
        shape = (int(rng.integers(1, 5)), int(rng.integers(1, 17)), 2 * int(rng.integers(1, 17)),
                 2 * int(rng.integers(1, 17)))
        x = rng.standard_normal(shape).astype(np.float32)
        bands = dwt(Tensor(x))
        rec = idwt(bands).data
        worst_rec = max(worst_rec, float(np.max(np.abs(rec - x))))
        energy = sum(float(np.sum(b.data.astype(np.float64) ** 2)) for b in bands)
        ref = float(np.sum(x.astype(np.float64) ** 2))
        worst_energy = max(worst_energy, abs(energy - ref) / ref)
    return worst_rec, worst_energy


# -- gradients -----------------------------------------------------------------


def op_gradient_errors(seed: int = 0) -> dict:
    """Finite-difference relative error for every differentiable op, at float64."""
    rng = np.random.default_rng(seed)
    errors = {}
    with precision(np.float64):
        def leaf(*shape, low=None):
            data = rng.standard_normal(shape)
            if low is not None:
                data = np.abs(data) + low
            return Tensor(data, requires_grad=True)

        x, y = leaf(2, 3, 6, 6), leaf(2, 3, 6, 6)
        w, b = leaf(4, 3, 3, 3), leaf(4)
        pos = leaf(2, 3, 6, 6, low=0.5)
        # keep relu inputs away from the kink
        away = Tensor(np.where(rng.random((2, 3, 6, 6)) < 0.5, -1.0, 1.0) * (0.1 + rng.random((2, 3, 6, 6))),
                      requires_grad=True)
        mask = rng.random((2, 3, 6, 6)) < 0.5
        target = (rng.random((2, 3, 6, 6)) < 0.4).astype(np.float64)
        vec = leaf(3, 5)
        cases = {
            "add": (lambda: x + y, [x, y]),
            "sub": (lambda: x - y, [x, y]),
            "mul": (lambda: x * y, [x, y]),
            "div": (lambda: x / pos, [x, pos]),
            "pow": (lambda: pos ** 1.5, [pos]),
            "abs": (lambda: pos.abs() + (-pos).abs(), [pos]),
            "sqrt": (lambda: pos.sqrt(), [pos]),
            "sum": (lambda: x.sum(axis=(2, 3)), [x]),
            "mean": (lambda: x.mean(axis=1, keepdims=True), [x]),
            "amax": (lambda: x.amax(axis=(2, 3)), [x]),
            "amin": (lambda: x.amin(axis=(1, 2, 3)), [x]),
            "reshape": (lambda: x.reshape(2, -1), [x]),
            "getitem": (lambda: x[:, 1:, ::2], [x]),
            "where": (lambda: where(mask, x, y), [x, y]),
            "conv2d": (lambda: F.conv2d(x, w, b, stride=1, pad=1), [x, w, b]),
            "conv2d_stride2": (lambda: F.conv2d(x, w, b, stride=2, pad=1), [x, w, b]),
            "conv2d_1x1": (lambda: F.conv2d(x, w[:, :, 1:2, 1:2], b), [x, w]),
            "instance_norm": (lambda: F.instance_norm(x), [x]),
            "global_avg_pool": (lambda: F.global_avg_pool(x), [x]),
            "relu": (lambda: F.relu(away), [away]),
            "sigmoid": (lambda: F.sigmoid(x), [x]),
            "upsample_nearest": (lambda: F.upsample(x, 2, "nearest"), [x]),
            "upsample_bilinear": (lambda: F.upsample(x, 2, "bilinear"), [x]),
            "pad_replicate": (lambda: F.pad_replicate(x, 1, 1), [x]),
            "l2_normalize": (lambda: F.l2_normalize(vec, axis=1), [vec]),
            "dwt_haar": (lambda: _stack_bands(dwt_haar(x)), [x]),
            "idwt_haar": (lambda: idwt_haar(SubBands(x, y, x * 0.5, y * 2.0)), [x, y]),
            "dice_loss": (lambda: dice_loss(F.sigmoid(x), target), [x]),
        }
        for name, (fn, leaves) in cases.items():
            errors[name] = check_gradients(fn, leaves)
    return errors


def _stack_bands(bands: SubBands) -> Tensor:
    return concat([bands.ll, bands.lh, bands.hl, bands.hh], axis=1)


def wiser_gradient_error(seed: int = 0) -> float:
    """Whole WISER block (output plus decorrelation term) on a 1x4x8x8 input."""
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        p = WiserParams(4, np.random.default_rng(seed + 1))
        # a non-zero gate exercises the selector path
        p.gate_conv.weight.data = rng.standard_normal(p.gate_conv.weight.shape) * 0.5
        x = Tensor(rng.standard_normal((1, 4, 8, 8)), requires_grad=True)

        def fn():
            out = wiser_forward(x, p)
            return out.s_tilde.sum(axis=(1,)) + out.ortho_term

        return check_gradients(fn, [x] + p.parameters(), max_entries=12, seed=seed)


def end_to_end_gradient_error(seed: int = 0, entries_per_tensor: int = 3) -> float:
    """Total loss of the full model on a 1x3x32x32 input, after the ramp."""
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        cfg = TrainConfig(seed=seed)
        model = WaveSegNet(ModelConfig(seed=seed))
        for wp in model.wiser:
            wp.gate_conv.weight.data = rng.standard_normal(wp.gate_conv.weight.shape) * 0.5
        # Zero biases on the all-zero normalized 1x1 planes of the deepest
        # level put relu exactly on its kink; move every bias off it.
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.data = rng.standard_normal(p.shape) * 0.1
        x = Tensor(rng.random((1, 3, 32, 32)), requires_grad=True)
        y = np.zeros((1, 2, 32, 32))
        y[0, 0, 8:24, 8:24] = 1
        y[0, 1, 12:20, 12:20] = 1

        def fn():
            loss, _ = total_loss(model_forward(x, model), y, cfg, epoch=20)
            return loss

        return check_gradients(fn, [x] + model.parameters(), max_entries=entries_per_tensor, seed=seed)


# -- closed forms ----------------------------------------------------------------


def closed_form_errors() -> dict:
    """Absolute deviation from hand-derived values for losses, gate and ramp."""
    errs = {}
    with precision(np.float64):
        y = np.zeros((1, 1, 2, 4))
        y[0, 0, 0, :] = 1
        errs["dice_perfect"] = abs(dice_loss(Tensor(y), y).item() - 0.0)
        n = 4
        disjoint = 1.0 - y
        errs["dice_disjoint"] = abs(dice_loss(Tensor(disjoint), y).item() - (1.0 - 1.0 / (2 * n + 1.0)))
        half = np.zeros_like(y)
        half[0, 0, 0, :2] = 1
        errs["dice_partial"] = abs(dice_loss(Tensor(half), y, smooth=0.0).item() - 1.0 / 3.0)

        v1 = np.array([1.0, -1.0, 1.0, -1.0])
        v2 = np.array([1.0, 1.0, -1.0, -1.0])
        same = Tensor(np.broadcast_to(np.array([1.0, 2.0, 3.0, 4.0])[None, :, None, None], (1, 4, 2, 2)).copy())
        a = Tensor(np.broadcast_to(v1[None, :, None, None], (1, 4, 2, 2)).copy())
        b = Tensor(np.broadcast_to(v2[None, :, None, None], (1, 4, 2, 2)).copy())
        errs["ortho_identical"] = abs(ortho_loss(same, same).item() - 1.0)
        errs["ortho_orthogonal"] = abs(ortho_loss(a, b).item() - 0.0)
        both_c = Tensor(np.concatenate([same.data, a.data]))
        both_s = Tensor(np.concatenate([same.data, b.data]))
        errs["ortho_batch"] = abs(ortho_loss(both_c, both_s).item() - 0.5)

        p = WiserParams(2, np.random.default_rng(0), eps_gate=0.25)
        f_c = Tensor(np.ones((1, 2, 2, 2)))
        errs["gate_identity"] = float(np.max(np.abs(edge_select(f_c, p).data - 1.0)))
        p.gate_conv.bias.data[:] = 60.0
        errs["gate_upper"] = float(np.max(np.abs(edge_select(f_c, p).data - 1.25)))
        p.gate_conv.bias.data[:] = -60.0
        errs["gate_lower"] = float(np.max(np.abs(edge_select(f_c, p).data - 0.75)))
    return errs


def scheduler_table() -> List[tuple]:
    """``(epoch, expected, got)`` at warmup end, ramp middle and ramp end."""
    table = [(5, 0.0), (10, 0.05), (15, 0.1)]
    return [(e, want, lambda_schedule(e, 5, 10, 0.1)) for e, want in table]


# -- HD95 oracle ---------------------------------------------------------------


def brute_boundary(mask: np.ndarray) -> List[tuple]:
    h, w = mask.shape
    points = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ni, nj = i + di, j + dj
                if not (0 <= ni < h and 0 <= nj < w) or not mask[ni, nj]:
                    points.append((i, j))
                    break
    return points


def linear_percentile(values: List[float], q: float) -> float:
    """Linear interpolation between order statistics.

    Interpolates from whichever neighbour is nearer, which keeps the result
    bit-identical to ``numpy.percentile``.
    """
    ordered = sorted(values)
    pos = (len(ordered) - 1) * (q / 100.0)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(ordered) - 1)
    t = pos - lo
    a, b = ordered[lo], ordered[hi]
    if t >= 0.5:
        return b - (b - a) * (1.0 - t)
    return a + (b - a) * t


def brute_hd95(pred: np.ndarray, gt: np.ndarray) -> float:
    bp, bg = brute_boundary(pred), brute_boundary(gt)
    if not bp and not bg:
        return 0.0
    if not bp or not bg:
        return math.hypot(*pred.shape)

    def directed(src, dst):
        return [math.sqrt(min((a - c) ** 2 + (b - d) ** 2 for c, d in dst)) for a, b in src]

    return max(linear_percentile(directed(bp, bg), 95), linear_percentile(directed(bg, bp), 95))


def random_mask_pair(rng: np.random.Generator, size: int = 32):
    def blob():
        m = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(1, 4))):
            r0, c0 = rng.integers(0, size, 2)
            h, w = rng.integers(1, size // 2, 2)
            m[r0 : r0 + h, c0 : c0 + w] = True
        if rng.random() < 0.3:
            m &= rng.random((size, size)) < 0.8
        return m

    return blob(), blob()


def hd95_oracle_mismatches(n: int = 200, size: int = 32, seed: int = 0) -> int:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n):
        a, b = random_mask_pair(rng, size)
        if hd95(a, b) != brute_hd95(a, b):
            bad += 1
    return bad


# -- suite -----------------------------------------------------------------------


def run_suite(dwt=dwt_haar, idwt=idwt_haar, quick: bool = False) -> List[CheckResult]:
    """All properties; ``dwt``/``idwt`` are injectable for negative controls."""
    results = []
    n_tensors = 20 if quick else 100
    roundtrip = {}

    def rec():
        roundtrip["rec"], roundtrip["energy"] = wavelet_roundtrip(dwt, idwt, n=n_tensors)
        return roundtrip["rec"], f"{n_tensors} random tensors"

    results.append(_timed("dwt_reconstruction", 1e-5, rec))
    results.append(_timed("dwt_energy", 1e-4, lambda: (roundtrip.get("energy", float("nan")), "relative")))

    op_errors = {}

    def ops():
        op_errors.update(op_gradient_errors())
        worst = max(op_errors, key=op_errors.get)
        return op_errors[worst], f"worst op {worst}"

    results.append(_timed("gradcheck_ops", 1e-6, ops))
    results.append(_timed("gradcheck_wiser", 1e-4, lambda: (wiser_gradient_error(), "1x4x8x8 block")))
    if not quick:
        results.append(_timed("gradcheck_end_to_end", 1e-4,
                              lambda: (end_to_end_gradient_error(), "total loss, 1x3x32x32")))

    def closed():
        errs = closed_form_errors()
        worst = max(errs, key=errs.get)
        return errs[worst], f"worst case {worst}"

    results.append(_timed("loss_closed_forms", 1e-6, closed))

    def sched():
        table = scheduler_table()
        off = [e for e, want, got in table if want != got]
        return (1.0 if off else 0.0), ("mismatch at " + ",".join(map(str, off))) if off else "exact"

    results.append(_timed("lambda_schedule", 0.0, sched))
    n_pairs = 40 if quick else 200
    results.append(_timed("hd95_oracle", 0.0,
                          lambda: (float(hd95_oracle_mismatches(n_pairs)), f"mismatches over {n_pairs} pairs")))
    return results


def format_table(results: List[CheckResult]) -> str:
    lines = [f"{'check':<24} {'status':<6} {'value':>12} {'tolerance':>10}  detail"]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{r.name:<24} {status:<6} {r.value:>12.3e} {r.tolerance:>10.1e}  {r.detail}")
    grad = [r.value for r in results if r.name.startswith("gradcheck") and not math.isnan(r.value)]
    if grad:
        lines.append(f"max gradient-check relative error: {max(grad):.3e}")
    return "\n".join(lines)
