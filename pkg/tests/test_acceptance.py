"""End-to-end acceptance checks, one test per criterion.

The ablation fixture trains baseline, +WISER and +WISER+DS for three seeds
on freshly generated 64x64 domains; it dominates the suite's runtime.
"""

import time

import numpy as np
import pytest
from conftest import record_criterion

from wisernet import ablation
from wisernet.autodiff import Conv2d, Tensor
from wisernet.cli import main
from wisernet.losses import dice_loss, lambda_schedule
from wisernet.metrics import brightness_invariance
from wisernet.segnet import ModelConfig, WaveSegNet, model_summary
from wisernet.synthdata import AnatomySpec, generate_sample, load_dataset, style_presets
from wisernet.verify import (
    end_to_end_gradient_error,
    hd95_oracle_mismatches,
    op_gradient_errors,
    wiser_gradient_error,
)
from wisernet.wavelet import dwt_haar, idwt_haar
from wisernet.wiser import WiserParams, edge_select, ortho_loss

TARGETS = ("shift_mild", "shift_color", "shift_lowlight")
SEEDS = (0, 1, 2)


def test_criterion_1_wavelet_exactness():
    rng = np.random.default_rng(2024)
    started = time.perf_counter()
    worst_rec = worst_energy = 0.0
    for _ in range(100):
        shape = (int(rng.integers(1, 5)), int(rng.integers(1, 17)), 2 * int(rng.integers(1, 17)),
                 2 * int(rng.integers(1, 17)))
        x = rng.standard_normal(shape).astype(np.float32)
        bands = dwt_haar(Tensor(x))
        worst_rec = max(worst_rec, float(np.abs(idwt_haar(bands).data - x).max()))
        energy = sum(float((b.data.astype(np.float64) ** 2).sum()) for b in bands)
        ref = float((x.astype(np.float64) ** 2).sum())
        worst_energy = max(worst_energy, abs(energy - ref) / ref)
    seconds = time.perf_counter() - started
    ok = worst_rec < 1e-5 and worst_energy < 1e-4 and seconds < 5
    record_criterion(1, ok, f"max rec err {worst_rec:.2e}, energy gap {worst_energy:.2e}, {seconds:.2f}s")
    assert ok


def test_criterion_2_gradient_fidelity():
    started = time.perf_counter()
    ops = op_gradient_errors()
    block = wiser_gradient_error()
    e2e = end_to_end_gradient_error()
    seconds = time.perf_counter() - started
    worst_op = max(ops, key=ops.get)
    ok = ops[worst_op] < 1e-6 and block < 1e-4 and e2e < 1e-4 and seconds < 120
    record_criterion(2, ok, f"ops worst {worst_op} {ops[worst_op]:.2e}, wiser {block:.2e}, "
                            f"end-to-end {e2e:.2e}, {seconds:.1f}s")
    assert ok


def test_criterion_3_closed_form_table(f64):
    errs = {}
    y = np.zeros((1, 1, 2, 4))
    y[0, 0, 0] = 1
    errs["dice perfect"] = abs(dice_loss(Tensor(y), y).item())
    errs["dice disjoint"] = abs(dice_loss(Tensor(1 - y), y).item() - (1 - 1 / (2 * 4 + 1)))
    half = np.zeros_like(y)
    half[0, 0, 0, :2] = 1
    errs["dice partial"] = abs(dice_loss(Tensor(half), y, smooth=0.0).item() - 1 / 3)

    def pooled(*vecs):
        return Tensor(np.stack([np.broadcast_to(np.asarray(v, float)[:, None, None], (len(v), 2, 2)) for v in vecs]))

    a, b, c = [1, 2, 3, 4], [1, -1, 1, -1], [1, 1, -1, -1]
    errs["ortho 1"] = abs(ortho_loss(pooled(a), pooled(a)).item() - 1)
    errs["ortho 0"] = abs(ortho_loss(pooled(b), pooled(c)).item())
    errs["ortho 0.5"] = abs(ortho_loss(pooled(a, b), pooled(a, c)).item() - 0.5)

    p = WiserParams(2, eps_gate=0.25)
    f_c = Tensor(np.ones((1, 2, 2, 2)))
    for bias, want in ((0.0, 1.0), (60.0, 1.25), (-60.0, 0.75)):
        p.gate_conv.bias.data[:] = bias
        errs[f"gate {want}"] = float(np.abs(edge_select(f_c, p).data - want).max())

    schedule = [(e, want, lambda_schedule(e, 5, 10, 0.1)) for e, want in ((5, 0.0), (10, 0.05), (15, 0.1))]
    worst = max(errs, key=errs.get)
    exact = all(got == want for _, want, got in schedule)
    ok = errs[worst] < 1e-6 and exact
    record_criterion(3, ok, f"worst loss case {worst} {errs[worst]:.1e}, schedule exact {exact}")
    assert ok


def test_criterion_4_hd95_oracle():
    started = time.perf_counter()
    bad = hd95_oracle_mismatches(n=200, size=32, seed=7)
    seconds = time.perf_counter() - started
    ok = bad == 0 and seconds < 30
    record_criterion(4, ok, f"{bad}/200 mismatches, {seconds:.1f}s")
    assert ok


def test_criterion_7_accounting():
    conv = Conv2d(4, 8, 3, rng=np.random.default_rng(0))
    one = model_summary(conv, input_size=16, in_channels=4)
    on = model_summary(WaveSegNet(ModelConfig(wiser_enabled=True, ds_enabled=False)))
    off = model_summary(WaveSegNet(ModelConfig(wiser_enabled=False, ds_enabled=False)))
    ok = (one["params"] == 296 and one["macs"] == 73728
          and on["params"] > off["params"] and on["macs"] > off["macs"])
    overhead = 100 * (on["macs"] / off["macs"] - 1)
    record_criterion(7, ok, f"params {off['params']} -> {on['params']}, MACs {off['macs']} -> {on['macs']} "
                            f"(+{overhead:.1f}%); full-scale reference 18.75M -> 21.99M params, context only")
    assert ok


def test_criterion_8_ablate_determinism(tmp_path):
    data = tmp_path / "data"
    assert main(["generate", "--out", str(data), "--n", "8", "--n-val", "4", "--n-test", "4",
                 "--n-target", "4", "--size", "32", "--targets", "shift_mild,shift_color"]) == 0
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        code = main(["ablate", "--out", str(out), "--data", str(data), "--seeds", "2", "--seed", "5",
                     "--epochs", "2", "--patience", "2", "--input-size", "32", "--no-checkpoints"])
        assert code == 0
        outs.append(out)
    names = ["ablation.csv", "ablation_per_seed.csv", "distances.csv", "distances_compare.csv"]
    names += sorted(str(p.relative_to(outs[0])) for p in (outs[0] / "runs").rglob("history.csv"))
    same = [n for n in names if (outs[0] / n).read_bytes() == (outs[1] / n).read_bytes()]
    ok = len(same) == len(names)
    record_criterion(8, ok, f"{len(same)}/{len(names)} CSVs byte-identical")
    assert ok


# -- trained-model criteria ---------------------------------------------------


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    started = time.perf_counter()
    assert main(["generate", "--out", str(root), "--seed", "0"]) == 0
    source = load_dataset(root / "source")
    train, val, test = source.subset("train"), source.subset("val"), source.subset("test")
    test.domain = "source"
    targets = [load_dataset(root / t) for t in TARGETS]
    result = ablation.run_ablation(train, val, [test] + targets, ablation.desk_protocol(), SEEDS)
    train_seconds = time.perf_counter() - started
    return {"result": result, "test": test, "targets": targets, "train_seconds": train_seconds}


@pytest.mark.slow
def test_criterion_5_ablation_direction(trained):
    result = trained["result"]
    base = result.mean_target_dsc("base")
    wiser = result.mean_target_dsc("wiser")
    full = result.mean_target_dsc("wiser_ds")
    src_gap = result.source_dsc("wiser_ds") - result.source_dsc("base")
    minutes = trained["train_seconds"] / 60
    ok = full >= wiser >= base and full - base >= 2.0 and abs(src_gap) <= 2.0 and minutes < 45
    record_criterion(5, ok, f"target DSC base {base:.2f} / wiser {wiser:.2f} / wiser+ds {full:.2f}; "
                            f"source gap {src_gap:+.2f}; {minutes:.1f} min")
    assert ok


@pytest.fixture(scope="module")
def distance_rows(trained):
    started = time.perf_counter()
    rows = ablation.distance_table(trained["result"], trained["test"], trained["targets"])
    return rows, time.perf_counter() - started


@pytest.mark.slow
def test_criterion_6_distance_direction(distance_rows):
    rows, seconds = distance_rows
    pooled = {r["metric"]: r for r in ablation.compare_distances(rows)
              if r["pair"] == f"source~{ablation.POOLED}"}
    lower = [m for m in ablation.DISTANCE_METRICS if pooled[m]["lower_with_wiser"]]
    ok = len(lower) == 3 and seconds < 120
    detail = ", ".join(f"{m} {pooled[m]['without_wiser']:.4f}->{pooled[m]['with_wiser']:.4f}"
                       for m in ablation.DISTANCE_METRICS)
    record_criterion(6, ok, f"{detail}; {seconds:.1f}s")
    assert ok


@pytest.mark.slow
def test_criterion_9_content_style_decoupling(trained):
    model = trained["result"].run("wiser_ds", SEEDS[0]).model
    pairs = [generate_sample(AnatomySpec(), style_presets("source"), 900_000 + i) for i in range(50)]
    images = np.concatenate([p[0] for p in pairs])
    cos = brightness_invariance(model, images, offset=0.1, level=1)
    rate = float(np.mean(cos[:, 0] > cos[:, 1]))
    ok = rate >= 0.8
    record_criterion(9, ok, f"content more invariant on {100 * rate:.0f}% of 50 pairs "
                            f"(mean cos content {cos[:, 0].mean():.4f}, style {cos[:, 1].mean():.4f})")
    assert ok
