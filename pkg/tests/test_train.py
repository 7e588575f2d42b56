import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sharpcos.data import AugmentationConfig
from sharpcos.errors import CheckpointError, NonFiniteError
from sharpcos.models import LayerVariantConfig, build_model
from sharpcos.tensor import no_grad
from sharpcos.train import (MAGIC, TELEMETRY_HEADER, Adam, OneCycleSchedule, OptimizerState,
                            TrainConfig, adam_step, evaluate, read_checkpoint, read_telemetry,
                            restore_model, save_checkpoint, telemetry_columns, train)

from conftest import make_dataset

QUICK = dict(batch_size=16, augment=AugmentationConfig(False))


def tiny_data(n=32, seed=0):
    return make_dataset(n, seed)


# -- optimiser ---------------------------------------------------------------------
def reference_adam(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_adam_matches_scalar_reference():
    grads = [0.5, -1.0, 2.0, 0.1]
    p = np.array([1.0])
    state = OptimizerState.for_params([p])
    for g in grads:
        adam_step([p], [np.array([g])], state, 0.01)
    assert p[0] == pytest.approx(reference_adam(1.0, grads, 0.01), abs=1e-15)
    assert state.step == 4


def test_first_adam_step_is_lr_times_sign():
    p = np.array([0.0, 0.0])
    adam_step([p], [np.array([3.0, -0.2])], OptimizerState.for_params([p]), 0.1)
    np.testing.assert_allclose(p, [-0.1, 0.1], rtol=1e-6)


def test_zero_gradients_are_fixed_points():
    model, _ = build_model(LayerVariantConfig("scs"))
    before = [p.data.copy() for p in model.parameters()]
    opt = Adam(model.parameters())
    for _ in range(5):
        opt.zero_grad()
        opt.step(0.01)
    for a, p in zip(before, model.parameters()):
        np.testing.assert_array_equal(a, p.data)


def test_adam_rejects_bad_lr_and_shapes():
    p = np.zeros(2)
    with pytest.raises(ValueError):
        adam_step([p], [np.zeros(2)], OptimizerState.for_params([p]), 0.0)
    with pytest.raises(ValueError):
        adam_step([p], [np.zeros(3)], OptimizerState.for_params([p]), 0.1)


# -- schedule --------------------------------------------------------------------------
def test_onecycle_endpoints():
    s = OneCycleSchedule(1000, max_lr=0.01)
    assert s(0) == pytest.approx(0.01 / 25, rel=1e-12)
    assert s(300) == pytest.approx(0.01, rel=1e-12)
    assert s(1000) == pytest.approx(1e-6, rel=1e-9)
    # halfway through each phase the cosine sits at the midpoint
    assert s(150) == pytest.approx((0.01 + 0.0004) / 2, rel=1e-12)
    assert s(650) == pytest.approx((0.01 + 1e-6) / 2, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 5000), st.floats(0.05, 0.95))
def test_onecycle_shape(total, pct):
    s = OneCycleSchedule(total, 0.01, pct)
    lrs = np.array([s(t) for t in range(total + 1)])
    peak = int(np.argmax(lrs))
    assert np.all(np.diff(lrs[:peak + 1]) >= -1e-18)
    assert np.all(np.diff(lrs[peak:]) <= 1e-18)
    assert lrs.max() <= 0.01 + 1e-15 and lrs.min() >= 1e-6 - 1e-15


def test_onecycle_validation():
    with pytest.raises(ValueError):
        OneCycleSchedule(0)
    with pytest.raises(ValueError):
        OneCycleSchedule(10)(11)


# -- checkpoints ---------------------------------------------------------------------------
@pytest.mark.parametrize("kind,norm", [("scs", "batchnorm"), ("conv", "none")])
def test_checkpoint_roundtrip_is_bit_identical(tmp_path, kind, norm):
    model, desc = build_model(LayerVariantConfig(kind, "relu", normalization=norm, seed=3))
    train(model, tiny_data(), tiny_data(), TrainConfig(epochs=1, **QUICK))
    save_checkpoint(model, desc, tmp_path / "m.ckpt", {"epoch": 1})
    clone, desc2, ckpt = restore_model(tmp_path / "m.ckpt")
    x = np.random.default_rng(0).random((3, 3, 32, 32))
    model.eval()
    clone.eval()
    with no_grad():
        np.testing.assert_array_equal(model(x).data, clone(x).data)
    assert ckpt.extra == {"epoch": 1} and desc2.digest() == desc.digest()


def test_checkpoint_header(tmp_path):
    model, desc = build_model(LayerVariantConfig())
    save_checkpoint(model, desc, tmp_path / "m.ckpt")
    blob = (tmp_path / "m.ckpt").read_bytes()
    assert blob[:8] == MAGIC and blob[8:12] == (1).to_bytes(4, "little")
    assert blob[12:44] == desc.digest()
    assert list(read_checkpoint(tmp_path / "m.ckpt").params) == [n for n, _ in model.named_parameters()]


@pytest.mark.parametrize("damage", ["magic", "flip", "truncate", "missing"])
def test_corrupt_checkpoints_rejected(tmp_path, damage):
    model, desc = build_model(LayerVariantConfig())
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, desc, path)
    blob = bytearray(path.read_bytes())
    if damage == "magic":
        blob[0] ^= 0xFF
    elif damage == "flip":
        blob[len(blob) // 2] ^= 1
    elif damage == "truncate":
        blob = blob[:-100]
    path.write_bytes(bytes(blob))
    if damage == "missing":
        path.unlink()
    with pytest.raises(CheckpointError):
        restore_model(path)


# -- training loop and telemetry -------------------------------------------------------------
def test_telemetry_schema(tmp_path):
    model, desc = build_model(LayerVariantConfig("scs", "none", normalization="batchnorm"))
    train(model, tiny_data(), tiny_data(20, 1), TrainConfig(epochs=2, **QUICK), desc, tmp_path)
    lines = (tmp_path / "telemetry.csv").read_bytes().split(b"\n")
    header = lines[0].decode().split(",")
    assert header[:7] == TELEMETRY_HEADER
    assert header == telemetry_columns(model)
    assert "block1.extract.p[15]" in header and "block3.extract.q" in header
    assert "fc.w_norm" in header and "fc.g_norm" in header and "block1.norm.w_norm" in header
    rows = read_telemetry(tmp_path / "telemetry.csv")
    assert [r["epoch"] for r in rows] == ["1", "2"]
    assert all(r[k] != "" for r in rows for k in header)
    assert lines[-1] == b"" and b"\r" not in b"".join(lines)


def test_cossim_telemetry_has_q_but_no_p():
    model, _ = build_model(LayerVariantConfig("cossim"))
    cols = telemetry_columns(model)
    assert "block1.extract.q" in cols and not any(".p[" in c for c in cols)
    conv_cols = telemetry_columns(build_model(LayerVariantConfig("conv"))[0])
    assert not any(c.endswith(".q") or ".p[" in c for c in conv_cols)


def test_checkpoints_written(tmp_path):
    model, desc = build_model(LayerVariantConfig("conv", "relu"))
    res = train(model, tiny_data(), tiny_data(), TrainConfig(epochs=2, **QUICK), desc, tmp_path)
    assert {p.name for p in tmp_path.iterdir()} >= {"init.ckpt", "best.ckpt", "final.ckpt"}
    assert res.best_test_acc == max(r.test_acc for r in res.records)
    assert res.steps == 4


def test_zero_epochs_writes_only_init(tmp_path):
    model, desc = build_model(LayerVariantConfig())
    res = train(model, tiny_data(), tiny_data(), TrainConfig(epochs=0, **QUICK), desc, tmp_path)
    assert res.records == [] and res.best_test_acc is None
    assert sorted(p.name for p in tmp_path.iterdir()) == ["init.ckpt"]


def test_training_is_deterministic(tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=16, seed=7, record_times=False)
    for run in ("a", "b"):
        model, desc = build_model(LayerVariantConfig("scs", seed=2))
        train(model, tiny_data(), tiny_data(16, 1), cfg, desc, tmp_path / run)
    assert (tmp_path / "a/telemetry.csv").read_bytes() == (tmp_path / "b/telemetry.csv").read_bytes()
    assert (tmp_path / "a/final.ckpt").read_bytes() == (tmp_path / "b/final.ckpt").read_bytes()


def test_training_reduces_loss():
    model, _ = build_model(LayerVariantConfig("scs", "none"))
    res = train(model, tiny_data(), tiny_data(), TrainConfig(epochs=6, max_lr=0.01, **QUICK))
    assert res.records[-1].train_loss < res.records[0].train_loss


def test_early_stop_on_train_accuracy():
    model, _ = build_model(LayerVariantConfig("conv", "relu"))
    cfg = TrainConfig(epochs=50, stop_at_train_acc=0.0, **QUICK)
    res = train(model, tiny_data(), tiny_data(), cfg)
    assert len(res.records) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_names_layer():
    model, _ = build_model(LayerVariantConfig("sdp"))
    model.block2.extract.weight.data[:] = np.nan
    with pytest.raises(NonFiniteError) as exc:
        train(model, tiny_data(), tiny_data(), TrainConfig(epochs=1, **QUICK))
    assert exc.value.where == "block2"


def test_evaluate_counts_correct():
    model, _ = build_model(LayerVariantConfig("conv", "relu"))
    ds = tiny_data(20)
    model.eval()
    with no_grad():
        pred = np.argmax(model(ds.images).data, axis=1)
    loss, acc = evaluate(model, ds, batch_size=7)
    assert acc == np.mean(pred == ds.labels) and loss > 0


def test_float32_training_runs():
    model, _ = build_model(LayerVariantConfig("scs"), dtype=np.float32)
    res = train(model, tiny_data(16), tiny_data(16), TrainConfig(epochs=1, **QUICK))
    assert np.isfinite(res.records[0].train_loss)
    assert model.parameters()[0].dtype == np.float32

