import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wisernet.autodiff import Conv2d, Tensor, load_checkpoint
from wisernet.config import TrainConfig
from wisernet.exceptions import ConfigurationError, LoadError
from wisernet.losses import total_loss
from wisernet.segnet import (
    ModelConfig,
    WaveSegNet,
    encoder_forward,
    filter_skips,
    load_model,
    model_forward,
    model_summary,
    save_model,
    write_summary_csv,
)


def images(n=2, size=64, seed=0):
    return np.random.default_rng(seed).random((n, 3, size, size)).astype(np.float32)


def test_encoder_shapes_for_64():
    m = WaveSegNet(ModelConfig())
    skips = encoder_forward(Tensor(images(1)), m)
    assert [s.shape for s in skips] == [(1, 8, 32, 32), (1, 16, 16, 16), (1, 32, 8, 8), (1, 64, 4, 4)]


def test_forward_shape_chain_and_heads():
    m = WaveSegNet(ModelConfig())
    out = model_forward(images(2), m, retain_features=True)
    assert out.main_probs.shape == (2, 2, 64, 64)
    assert 0 < out.main_probs.data.min() and out.main_probs.data.max() < 1
    assert [p.shape[2] for p in out.aux_probs] == [16, 8, 4]
    assert len(out.ortho_terms) == 4
    assert out.bottleneck.shape == (2, 64, 4, 4)
    assert [f.shape for f in out.filtered_skips] == [s.shape for s in out.skip_features]


def test_indivisible_input_rejected():
    m = WaveSegNet(ModelConfig())
    with pytest.raises(ConfigurationError):
        model_forward(np.zeros((1, 3, 48, 48), dtype=np.float32), m)
    with pytest.raises(ConfigurationError):
        model_forward(np.zeros((1, 1, 64, 64), dtype=np.float32), m)


def test_baseline_skips_are_identity_and_no_aux():
    m = WaveSegNet(ModelConfig(wiser_enabled=False, ds_enabled=False))
    skips = encoder_forward(Tensor(images(1)), m)
    filtered, ortho, _ = filter_skips(skips, m)
    assert all(f is s for f, s in zip(filtered, skips)) and ortho == []
    out = model_forward(images(1), m)
    assert out.aux_logits == [] and out.ortho_terms == []


def test_ablation_variants_share_encoder_init():
    a = WaveSegNet(ModelConfig(wiser_enabled=False, ds_enabled=False, seed=3)).state_dict()
    b = WaveSegNet(ModelConfig(seed=3)).state_dict()
    for name, value in a.items():
        np.testing.assert_array_equal(value, b[name])


def test_batch_permutation_equivariance():
    m = WaveSegNet(ModelConfig(seed=1))
    x = images(3, seed=2)
    perm = [2, 0, 1]
    a = model_forward(x, m).main_probs.data
    b = model_forward(x[perm], m).main_probs.data
    np.testing.assert_allclose(a[perm], b, atol=1e-6)


def test_forward_deterministic_under_seed():
    x = images(1)
    a = model_forward(x, WaveSegNet(ModelConfig(seed=5))).main_probs.data
    b = model_forward(x, WaveSegNet(ModelConfig(seed=5))).main_probs.data
    assert a.tobytes() == b.tobytes()


def test_zeroed_skips_still_decode():
    m = WaveSegNet(ModelConfig(wiser_enabled=False))
    for conv in [c for blk in m.encoder for c in blk.convs]:
        conv.weight.data[:] = 0
    assert model_forward(images(1), m).main_probs.shape == (1, 2, 64, 64)


def test_single_conv_accounting_closed_form():
    class One(Conv2d):
        pass

    conv = One(4, 8, 3, rng=np.random.default_rng(0))
    stats = model_summary(conv, input_size=16, in_channels=4)
    assert stats["params"] == 296
    assert stats["macs"] == 8 * 16 * 16 * 9 * 4 == 73728


def test_wiser_strictly_increases_params_and_macs():
    on = model_summary(WaveSegNet(ModelConfig(wiser_enabled=True, ds_enabled=False)))
    off = model_summary(WaveSegNet(ModelConfig(wiser_enabled=False, ds_enabled=False)))
    assert on["params"] > off["params"] and on["macs"] > off["macs"]
    assert on["peak_activation_bytes"] > off["peak_activation_bytes"]


def test_summary_params_equal_checkpoint_elements(tmp_path):
    m = WaveSegNet(ModelConfig())
    save_model(tmp_path / "m.ckpt", m)
    _, tensors = load_checkpoint(tmp_path / "m.ckpt")
    assert model_summary(m)["params"] == sum(t.size for t in tensors.values())


def test_summary_csv_columns(tmp_path):
    path = tmp_path / "s.csv"
    write_summary_csv(path, [{"config_hash": "abc", "params": 1, "macs": 2, "peak_bytes": 3}])
    assert path.read_text() == "config_hash,params,macs,peak_bytes\nabc,1,2,3\n"


def test_save_load_roundtrip(tmp_path):
    m = WaveSegNet(ModelConfig(seed=4, alpha=0.3))
    save_model(tmp_path / "m.ckpt", m, {"note": "x"})
    loaded, meta = load_model(tmp_path / "m.ckpt")
    assert loaded.config == m.config and meta["note"] == "x"
    x = images(1)
    assert model_forward(x, loaded).main_probs.data.tobytes() == model_forward(x, m).main_probs.data.tobytes()


def test_load_rejects_architecture_mismatch(tmp_path):
    m = WaveSegNet(ModelConfig())
    save_model(tmp_path / "m.ckpt", m, {"model.base_width": 4})
    with pytest.raises(LoadError):
        load_model(tmp_path / "m.ckpt")


def test_dead_parameter_sweep():
    # lambda is past warmup so the style branch is trained as well
    cfg = TrainConfig(input_size=64)
    m = WaveSegNet(cfg.model_config())
    rng = np.random.default_rng(0)
    hit = {name: False for name, _ in m.named_parameters()}
    for trial in range(3):
        x = rng.random((2, 3, 64, 64)).astype(np.float32)
        y = np.zeros((2, 2, 64, 64), dtype=np.float32)
        y[:, 0, 16:48, 16:48] = 1
        y[:, 1, 24:40, 24:40] = 1
        m.zero_grad()
        loss, _ = total_loss(model_forward(x, m), y, cfg, epoch=20)
        loss.backward()
        for name, p in m.named_parameters():
            hit[name] |= bool(p.grad is not None and np.any(p.grad != 0))
    assert [n for n, ok in hit.items() if not ok] == []


@settings(max_examples=6, deadline=None)
@given(k=st.integers(1, 3), depth=st.sampled_from([2, 3]))
def test_shape_contract_for_divisible_sizes(k, depth):
    m = WaveSegNet(ModelConfig(depth=depth, base_width=2))
    size = k * 2 ** (depth + 1)
    out = model_forward(np.zeros((1, 3, size, size), dtype=np.float32), m)
    assert out.main_probs.shape == (1, 2, size, size)
    assert len(out.aux_probs) == depth - 1
