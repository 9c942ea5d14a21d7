import csv

import numpy as np
import pytest

from qecw.autodiff import ops
from qecw.errors import InvalidParameterError, NumericalError, ShapeError
from qecw.layout import build_layout, build_memory_z_circuit
from qecw.models import (ModelSpec, TrainConfig, build_model, evaluate_ler, load_model, save_model, train)
from qecw.pauli_sim import ShotDataset, sample_shots

from conftest import noisy


@pytest.mark.parametrize("d", [3, 5, 7, 9])
def test_tcn_parameter_counts(d):
    assert build_model(ModelSpec("TCN", "small", d, d)).n_parameters() == 103_297
    assert build_model(ModelSpec("TCN", "large", d, d)).n_parameters() == 411_393
    assert ModelSpec("TCN", "tiny", d, d).n_parameters == 26_049


def test_tcn_count_formula():
    for c1, c2, scale in [(16, 32, "tiny"), (32, 64, "small"), (64, 128, "large")]:
        formula = 18 * c1 * c1 + 9 * c1 * c2 + 16 * c2 * c2 + 4 * c1 + 12 * c2 + 1
        assert ModelSpec("TCN", scale, 3, 3).n_parameters == formula


def test_mlp_counts():
    for scale, h in [("small", 512), ("large", 1024)]:
        n = 3 * 8
        expected = n * h + h + 2 * h + 6 * (2 * (h * h + h) + 4 * h) + h + 1
        spec = ModelSpec("MLP", scale, 3, 3)
        assert spec.n_parameters == expected
    assert build_model(ModelSpec("MLP", "small", 3, 3)).n_parameters() == ModelSpec("MLP", "small", 3, 3).n_parameters


def test_convs_before_norm_have_no_bias():
    m = build_model(ModelSpec("TCN", "tiny", 3, 3))
    for name in ("res_conv", "conv1", "conv2", "conv3", "tconv1", "tconv2"):
        assert getattr(m, name).bias is None
    assert m.proj.bias is not None and m.head.bias is not None


@pytest.mark.parametrize("family,scale", [("GNN", "small"), ("TCN", "huge"), ("MLP", "tiny")])
def test_unknown_spec(family, scale):
    with pytest.raises(InvalidParameterError):
        ModelSpec(family, scale, 3, 3)


def test_embedding_places_bits_on_their_plaquette():
    d, r = 3, 3
    m = build_model(ModelSpec("TCN", "tiny", d, r), seed=4)
    circuit = build_memory_z_circuit(build_layout(d), r)
    emb = m.embed
    for det in circuit.detectors:
        bits = np.zeros((1, circuit.n_detectors), np.uint8)
        bits[0, det.id] = 1
        grid = emb(bits).data.reshape(r, 16, d + 1, d + 1)
        frames, _, rows, cols = np.nonzero(grid)
        row, col = circuit.layout.grid_cell(circuit.layout.stabilizers[det.stabilizer_index])
        assert set(frames) == {min(det.round, r) - 1}
        assert set(rows) == {row} and set(cols) == {col}
        assert np.allclose(grid[frames[0], :, row, col], emb.table[det.id])


def test_embedding_not_trainable():
    m = build_model(ModelSpec("TCN", "tiny", 3, 3))
    assert all("embed" not in name for name, _ in m.named_parameters())
    assert "embed.table" in m.state_dict()


def test_forward_shapes_and_errors():
    m = build_model(ModelSpec("TCN", "tiny", 3, 3))
    out = m(np.zeros((5, 24), np.uint8))
    assert out.shape == (5,)
    with pytest.raises(ShapeError):
        m(np.zeros((5, 25), np.uint8))
    with pytest.raises(ShapeError):
        evaluate_ler(m, sample_shots(noisy(5, 5), 10, seed=0))


def _small_data(n=3000, p=0.005, seed=1):
    return sample_shots(noisy(3, 3, "SD", p), n, seed=seed)


def test_zero_head_predicts_no_flip():
    m = build_model(ModelSpec("TCN", "tiny", 3, 3))
    m.head.weight.data[:] = 0
    m.head.bias.data[:] = 0
    ds = _small_data(2000)
    rep = evaluate_ler(m, ds)
    assert rep.failures == int(ds.labels.sum())
    assert evaluate_ler(m, ds) == rep


def _quick_cfg(**kw):
    base = dict(lr=1e-3, warmup=0, decay_end=4, max_epochs=2, patience=2, batch=256, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_training_is_deterministic_and_freezes_embedding(tmp_path):
    ds = _small_data()
    runs = []
    for k in range(2):
        m = build_model(ModelSpec("TCN", "tiny", 3, 3), seed=5)
        table = m.embed.table.tobytes()
        res = train(m, _quick_cfg(), ds, history_path=tmp_path / f"h{k}.csv")
        assert m.embed.table.tobytes() == table
        runs.append((res, m))
    (a, ma), (b, mb) = runs
    assert [h["val_loss"] for h in a.history] == [h["val_loss"] for h in b.history]
    for (n1, p1), (_, p2) in zip(ma.named_parameters(), mb.named_parameters()):
        assert np.array_equal(p1.data, p2.data), n1
    with open(tmp_path / "h0.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["epoch", "train_loss", "val_loss", "val_ler", "lr", "seconds"]
    assert len(rows) == len(a.history)


def test_noise_free_training_reaches_zero_ler():
    ds = sample_shots(noisy(3, 3, "SD", 0.0), 2000, seed=0)
    m = build_model(ModelSpec("TCN", "tiny", 3, 3))
    res = train(m, _quick_cfg(max_epochs=1, patience=1), ds)
    assert res.history[0]["val_ler"] == 0.0


def test_best_checkpoint_is_returned():
    ds = _small_data()
    m = build_model(ModelSpec("MLP", "small", 3, 3), seed=1)
    res = train(m, _quick_cfg(max_epochs=3, patience=3, lr=5e-4), ds)
    best = min(h["val_loss"] for h in res.history)
    assert res.best_val_loss == best
    bits = ds.bits()
    n_val = int(round(0.02 * len(bits)))
    z = m.logits(bits[-n_val:, :-1]).astype(np.float64)
    y = bits[-n_val:, -1]
    loss = np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z))))
    assert loss == pytest.approx(best, rel=1e-5)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_abort_reports_context():
    ds = _small_data(1000)
    m = build_model(ModelSpec("TCN", "tiny", 3, 3))
    m.proj.weight.data[0, 0] = np.inf
    with pytest.raises(NumericalError, match=r"epoch 0, batch 0, lr"):
        train(m, _quick_cfg(), ds)


def test_online_training_runs():
    m = build_model(ModelSpec("TCN", "tiny", 3, 3))
    res = train(m, _quick_cfg(online=True, online_shots=1024, online_val_shots=512, max_epochs=1, patience=1))
    assert len(res.history) == 1


@pytest.mark.parametrize("kw", [dict(patience=20, max_epochs=10), dict(lr=0.0), dict(batch=0),
                                dict(val_fraction=1.0), dict(warmup=10, decay_end=5)])
def test_train_config_validation(kw):
    with pytest.raises(InvalidParameterError):
        TrainConfig(**kw)


def test_train_needs_matching_data():
    m = build_model(ModelSpec("TCN", "tiny", 5, 5))
    with pytest.raises(ShapeError):
        train(m, _quick_cfg(), _small_data(500))
    with pytest.raises(InvalidParameterError):
        train(m, _quick_cfg())


@pytest.mark.parametrize("family,scale", [("TCN", "tiny"), ("MLP", "small")])
def test_checkpoint_round_trip(tmp_path, family, scale):
    m = build_model(ModelSpec(family, scale, 3, 3), seed=2)
    ds = _small_data(600)
    m.train()
    m(ds.detectors[:256])  # move the running statistics off their defaults
    m.eval()
    save_model(m, tmp_path / "a.qeck")
    back = load_model(tmp_path / "a.qeck")
    assert np.array_equal(back.logits(ds.detectors), m.logits(ds.detectors))
    save_model(back, tmp_path / "b.qeck")
    assert (tmp_path / "a.qeck").read_bytes() == (tmp_path / "b.qeck").read_bytes()


def test_dataset_from_bits_matches_model_input():
    ds = _small_data(100)
    again = ShotDataset.from_bits(ds.bits(), 3, 3, "SD", 0.005, 1)
    assert again.payload == ds.payload


def test_float64_model_gradients():
    """The assembled network passes a finite-difference check on a few parameters."""
    m = build_model(ModelSpec("TCN", "tiny", 3, 3), seed=0, dropout=0.0).to(np.float64).eval()
    bits = _small_data(8).detectors
    y = np.arange(8) % 2
    m.head.weight.grad = None
    ops.bce_with_logits(m(bits), y).backward()
    for param in (m.head.weight, m.proj.weight, m.conv2.weight):
        g = param.grad.reshape(-1)
        flat = param.data.reshape(-1)
        for i in np.random.default_rng(0).choice(flat.size, 4, replace=False):
            orig = flat[i]
            flat[i] = orig + 1e-4
            up = float(ops.bce_with_logits(m(bits), y).data)
            flat[i] = orig - 1e-4
            down = float(ops.bce_with_logits(m(bits), y).data)
            flat[i] = orig
            assert abs((up - down) / 2e-4 - g[i]) / max(1.0, abs(g[i])) < 1e-5
