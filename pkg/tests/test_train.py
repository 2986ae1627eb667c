import csv
import json
import struct
import zlib

import numpy as np
import pytest

import rnp.train as train_mod
from rnp.data import Dataset, SynthSpec, synth_strokes
from rnp.model import RNP, ModelConfig, model_loss
from rnp.tape import Tensor
from rnp.train import (AdamState, BadMagic, CRCMismatch, ShapeMismatch, TrainConfig, TrainingDiverged, adam_step,
                       clip_global_norm, dumps, fit, load_checkpoint, loads, param_digest, save_checkpoint)


@pytest.fixture(scope="module")
def corpus():
    ds, _ = synth_strokes(SynthSpec(count=8, seed=0, image_size=14, patch_size=6))
    return ds


def tiny_model(seed=0):
    return RNP.init(ModelConfig.tiny(seed=seed))


def p(values):
    return {"w": Tensor(np.asarray(values, dtype=np.float64))}


@pytest.mark.parametrize("g", [3.0, -0.002, 250.0])
def test_adam_first_step_is_lr_times_sign(g):
    params = p([1.0, 1.0])
    st = AdamState(lr=1e-3)
    adam_step(st, params, {"w": np.array([g, -g])})
    # m_hat = g, v_hat = g^2 at t = 1
    expected = 1e-3 * g / (abs(g) + 1e-8)
    np.testing.assert_allclose(params["w"].data, [1 - expected, 1 + expected], rtol=1e-12)


def test_adam_two_steps_closed_form():
    params = p([0.0])
    st = AdamState(lr=0.1)
    for g in (1.0, 3.0):
        adam_step(st, params, {"w": np.array([g])})
    m = (0.9 * 0.1 * 1 + 0.1 * 3) / (1 - 0.9 ** 2)
    v = (0.999 * 0.001 * 1 + 0.001 * 9) / (1 - 0.999 ** 2)
    first = 0.1 * 1 / (1 + 1e-8)
    np.testing.assert_allclose(params["w"].data, [-first - 0.1 * m / (np.sqrt(v) + 1e-8)], rtol=1e-12)


def test_adam_zero_gradient_leaves_params():
    params = p([0.5, -2.0])
    st = AdamState()
    adam_step(st, params, {"w": np.zeros(2)})
    assert params["w"].data.tolist() == [0.5, -2.0] and st.step == 1


def test_adam_rejects_non_finite_and_names_param():
    with pytest.raises(FloatingPointError, match="w"):
        adam_step(AdamState(), p([0.0]), {"w": np.array([np.nan])})


def test_clip_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_global_norm(grads, 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose([grads["a"][0], grads["b"][0]], [0.6, 0.8])
    small = {"a": np.array([0.1])}
    clip_global_norm(small, 1.0)
    assert small["a"][0] == 0.1


def test_zero_steps_keeps_initialisation(corpus, tmp_path):
    m = tiny_model()
    before = param_digest(m.named_parameters())
    fit(m, corpus, TrainConfig(max_steps=0, checkpoint_path=str(tmp_path / "c.rnp")))
    loaded, _ = load_checkpoint(tmp_path / "c.rnp")
    assert param_digest(loaded.named_parameters()) == before == param_digest(RNP.init(m.cfg).named_parameters())


def test_encoder_only_freezes_hypernetwork(corpus):
    m = tiny_model()
    hyper, enc = param_digest(m.hyper_params()), param_digest(m.encoder_params())
    fit(m, corpus, TrainConfig(lr=1e-3, batch_size=4, max_steps=3, trainable="encoder"))
    assert param_digest(m.hyper_params()) == hyper
    assert param_digest(m.encoder_params()) != enc


def test_fixed_seed_reproduces_trajectory(corpus):
    runs = []
    for _ in range(2):
        _, hist = fit(tiny_model(), corpus, TrainConfig(lr=1e-3, batch_size=4, max_steps=4, seed=3))
        runs.append([(h.recon, h.part_reg, h.kl, h.total) for h in hist])
    assert runs[0] == runs[1] and len(runs[0]) == 4


def test_metrics_csv(corpus, tmp_path):
    path = tmp_path / "m.csv"
    _, hist = fit(tiny_model(), corpus, TrainConfig(batch_size=4, max_steps=3, metrics_path=str(path)))
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["step", "recon", "part_reg", "kl", "total"]
    assert [int(r[0]) for r in rows[1:]] == [1, 2, 3]
    assert float(rows[-1][4]) == pytest.approx(hist[-1].total, rel=1e-8)


def test_fit_rejects_bad_trainable(corpus):
    with pytest.raises(ValueError, match="trainable"):
        fit(tiny_model(), corpus, TrainConfig(trainable="decoder"))


def test_divergence_rolls_back(corpus, monkeypatch):
    calls = {"n": 0}

    def flaky(model, x, noise=None):
        calls["n"] += 1
        loss, terms = model_loss(model, x, noise)
        if calls["n"] == 3:
            loss = loss * np.float32(np.nan)
        return loss, terms

    monkeypatch.setattr(train_mod, "model_loss", flaky)
    m = tiny_model()
    with pytest.raises(TrainingDiverged, match="step 3") as info:
        fit(m, corpus, TrainConfig(lr=1e-3, batch_size=2, max_steps=10))
    assert info.value.last_good is m
    # the model holds the parameters written by step 2, all finite
    assert all(np.all(np.isfinite(t.data)) for t in m.named_parameters().values())
    assert param_digest(m.named_parameters()) != param_digest(tiny_model().named_parameters())


def test_checkpoint_forward_bitwise(tmp_path):
    m = tiny_model(seed=4)
    path = tmp_path / "m.rnp"
    save_checkpoint(m, path, {"dataset": "probe", "seed": 4})
    back, meta = load_checkpoint(path)
    assert meta["dataset"] == "probe" and meta["model"]["z_dim"] == 8
    x = Tensor(np.random.default_rng(0).random((8, 14, 14)).astype(np.float32))
    a, b = model_loss(m, x)[1][0].data, model_loss(back, x)[1][0].data
    assert a.tobytes() == b.tobytes()
    assert dumps(back, {"dataset": "probe", "seed": 4}) == path.read_bytes()


def test_checkpoint_layout_header():
    buf = dumps(tiny_model())
    assert buf[:4] == b"RNP1"
    n = int.from_bytes(buf[4:8], "little")
    assert buf[8:8 + n].startswith(b"{") and b'"model"' in buf[8:8 + n]


def test_corrupted_byte_is_crc_error():
    buf = bytearray(dumps(tiny_model()))
    buf[len(buf) // 2] ^= 0x01
    with pytest.raises(CRCMismatch):
        loads(bytes(buf))


def test_bad_magic():
    buf = dumps(tiny_model())
    with pytest.raises(BadMagic):
        loads(b"XXXX" + buf[4:])


def test_config_shape_mismatch():
    buf = dumps(tiny_model())
    n = int.from_bytes(buf[4:8], "little")
    meta = json.loads(buf[8:8 + n])
    meta["model"]["hidden"] = 32
    blob = json.dumps(meta, sort_keys=True).encode()
    body = buf[:4] + struct.pack("<I", len(blob)) + blob + buf[8 + n:-4]
    with pytest.raises(ShapeMismatch):
        loads(body + struct.pack("<I", zlib.crc32(body)))


def test_errors_are_distinct():
    assert len({BadMagic, CRCMismatch, ShapeMismatch}) == 3
    assert not any(issubclass(a, b) for a in (BadMagic, CRCMismatch, ShapeMismatch)
                   for b in (BadMagic, CRCMismatch, ShapeMismatch) if a is not b)


def test_dataset_rejects_nan():
    with pytest.raises(ValueError, match="finite"):
        Dataset(np.full((1, 14, 14), np.nan, np.float32), np.zeros(1, np.int64))
