import json

import numpy as np
import pytest
from scipy import stats as sps

import gdiff.train as train_mod
from gdiff.datasets import (
    Checkerboard,
    IDXFormatError,
    IDXImages,
    Ring8,
    make_dataset,
    read_idx,
    write_idx,
)
from gdiff.model import AdamState, Denoiser, adam_step, load_checkpoint
from gdiff.train import ConfigError, TrainConfig, TrainingError, stream_seeds, train_loop


def small_cfg(**kw):
    d = {"seed": 3, "model": {"hidden": [16, 16], "n_freq": 2}, "batch_size": 32,
         "steps": 40, "log_interval": 10, "checkpoint_interval": 20}
    d.update(kw)
    return TrainConfig.from_dict(d)


def test_single_example_overfits():
    net = Denoiser(2, [32, 32], seed=0)
    x = np.array([[0.3, -0.8]])
    y = np.array([[1.1, 0.4]])
    st = AdamState.for_model(net, lr=1e-3)
    first, _ = net.loss_and_grad(x, 50, y)
    for _ in range(2000):
        loss, g = net.loss_and_grad(x, 50, y)
        adam_step(net, g, st)
    assert loss < 0.05 * first


def test_timesteps_are_uniform(monkeypatch):
    seen = []
    real = train_mod.closed_form_batch

    def spy(x0, t, fam, s, rng):
        seen.append(np.asarray(t).copy())
        return real(x0, t, fam, s, rng)

    monkeypatch.setattr(train_mod, "closed_form_batch", spy)
    cfg = small_cfg(steps=200, batch_size=500)
    train_loop(cfg)
    t = np.concatenate(seen)
    counts = np.bincount(t, minlength=101)[1:]
    assert t.min() >= 1 and t.max() <= 100
    _, p = sps.chisquare(counts)
    assert p > 1e-3


def test_same_config_same_loss_curve():
    a = train_loop(small_cfg())
    b = train_loop(small_cfg())
    assert [m["loss"] for m in a.metrics] == [m["loss"] for m in b.metrics]
    assert all(np.array_equal(p, q) for p, q in zip(a.model.params, b.model.params))
    c = train_loop(small_cfg(seed=4))
    assert [m["loss"] for m in a.metrics] != [m["loss"] for m in c.metrics]


@pytest.mark.parametrize("family", [{"family": "gaussian"}, {"family": "gamma", "theta0": 0.01},
                                    {"family": "mixture"}])
def test_resume_is_bit_exact(tmp_path, family):
    kw = dict(family=family, checkpoint_interval=1000, log_interval=100, batch_size=16)
    full = train_loop(small_cfg(steps=2000, **kw))
    d = tmp_path / "run"
    train_loop(small_cfg(steps=1000, **kw), out_dir=d)
    assert load_checkpoint(d / "checkpoint.gdnm").meta["step"] == 1000
    resumed = train_loop(small_cfg(steps=2000, **kw), out_dir=d, resume=d / "checkpoint.gdnm")
    assert all(np.array_equal(p, q) for p, q in zip(full.model.params, resumed.model.params))
    assert [m["loss"] for m in full.metrics[10:]] == [m["loss"] for m in resumed.metrics]
    with pytest.raises(ConfigError):
        train_loop(small_cfg(steps=2000, **dict(kw, lr=2e-3)), resume=d / "checkpoint.gdnm")


def test_resume_continues_exactly(tmp_path):
    cfg = small_cfg(steps=2000, checkpoint_interval=1000, log_interval=100, batch_size=16)
    full = train_loop(cfg)
    d = tmp_path / "run"

    class Stop(Exception):
        pass

    def halt(rec):
        if rec["step"] == 1100:
            raise Stop

    with pytest.raises(Stop):
        train_loop(cfg, out_dir=d, on_log=halt)
    assert load_checkpoint(d / "checkpoint.gdnm").meta["step"] == 1000
    resumed = train_loop(cfg, out_dir=d, resume=d / "checkpoint.gdnm")
    assert all(np.array_equal(p, q) for p, q in zip(full.model.params, resumed.model.params))
    assert [m["loss"] for m in full.metrics[10:]] == [m["loss"] for m in resumed.metrics]
    assert all(np.array_equal(p, q) for p, q in zip(full.adam.m, resumed.adam.m))
    lines = (d / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(x)["step"] for x in lines] == list(range(100, 2001, 100))


def test_outputs_written(tmp_path):
    res = train_loop(small_cfg(), out_dir=tmp_path)
    ck = load_checkpoint(tmp_path / "checkpoint.gdnm")
    assert ck.meta["step"] == 40 and ck.adam.step == 40
    assert ck.meta["config_hash"] == small_cfg().digest()
    assert len((tmp_path / "metrics.jsonl").read_text().splitlines()) == 4
    assert all(np.array_equal(p, q) for p, q in zip(res.model.params, ck.model.params))


def test_stream_seeds_distinct():
    init, data, diff = stream_seeds(0)
    a = np.random.default_rng(data).random(4)
    b = np.random.default_rng(diff).random(4)
    assert not np.array_equal(a, b)
    assert stream_seeds(0)[0] == init != stream_seeds(1)[0]


@pytest.mark.parametrize("bad,field", [
    ({"steps": 10}, "seed"),
    ({"seed": 1, "learning_rate": 0.1}, "learning_rate"),
    ({"seed": 1, "lr": -1.0}, "lr"),
    ({"seed": 1, "steps": 0}, "steps"),
    ({"seed": 1, "batch_size": 2.5}, "batch_size"),
    ({"seed": 1, "family": {"family": "cauchy"}}, "family"),
    ({"seed": 1, "family": {"family": "gamma", "theta0": -1}}, "family"),
    ({"seed": 1, "schedule": {"type": "linear", "T": 0}}, "schedule"),
    ({"seed": 1, "dataset": {"name": "mnist"}}, "dataset"),
    ({"seed": 1, "model": {"depth": 3}}, "model.depth"),
    ({"seed": 1, "model": {"cond_mode": "film"}}, "model"),
    ({"seed": 1, "version": 2}, "version"),
    ({"seed": 1, "early_stop": "yes"}, "early_stop"),
])
def test_config_errors_name_the_field(bad, field):
    with pytest.raises(ConfigError) as e:
        TrainConfig.from_dict(bad)
    assert e.value.field == field


def test_config_round_trip():
    cfg = small_cfg()
    again = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg and again.digest() == cfg.digest()


def test_divergence_is_reported(tmp_path):
    cfg = small_cfg(lr=1e300, steps=50)
    with np.errstate(all="ignore"), pytest.raises(TrainingError) as e:
        train_loop(cfg, out_dir=tmp_path)
    diag = json.loads((tmp_path / "diverged.json").read_text())
    assert diag["step"] == e.value.diagnostics["step"]
    assert "rng_before" in diag and len(diag["t"]) == 32


def test_early_stop_flag():
    cfg = small_cfg(steps=5000, early_stop=True, log_interval=500, lr=1e-5)
    res = train_loop(cfg)
    assert res.stopped_early and res.adam.step < 5000


# -- datasets ----------------------------------------------------------------

def test_ring8_standardised_moments():
    ds = Ring8()
    x = ds.sample(10**5, np.random.default_rng(0))
    assert np.all(np.abs(x.mean(axis=0)) < 0.02)
    np.testing.assert_allclose(x.var(axis=0), 1.0, rtol=0.03)
    np.testing.assert_allclose(np.linalg.norm(ds.modes, axis=1), 4.0 / ds.std[0])


def test_checkerboard_points_in_dark_cells():
    ds = Checkerboard()
    raw = ds.to_raw(ds.sample(10**4, np.random.default_rng(1)))
    assert np.all(Checkerboard.in_dark_cell(raw))
    assert not Checkerboard.in_dark_cell(np.array([[0.5, -0.5]]))[0]


def test_dataset_specs():
    assert make_dataset("glyphs8x8").data_shape == (8, 8)
    img = make_dataset("glyphs8x8").sample(10, np.random.default_rng(2))
    assert img.min() >= -1 and img.max() <= 1
    with pytest.raises(ValueError):
        make_dataset({"name": "ring8", "radius": 1, "colour": 2})
    with pytest.raises(ValueError):
        make_dataset({"name": "file"})


def test_idx_hand_fixture(tmp_path):
    raw = bytes([0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3]) + bytes(range(0, 240, 20))
    arr = read_idx(raw)
    assert arr.shape == (2, 2, 3) and arr[1, 1, 2] == 220
    assert write_idx(arr) == raw
    p = tmp_path / "imgs.idx"
    p.write_bytes(raw)
    ds = make_dataset({"name": "file", "path": str(p)})
    assert isinstance(ds, IDXImages) and ds.data_shape == (2, 3)
    x = ds.sample(50, np.random.default_rng(0))
    assert x.min() == -1.0 and x.max() <= 1.0


@pytest.mark.parametrize("data", [
    b"\0\0",
    bytes([1, 0, 8, 1, 0, 0, 0, 1, 5]),
    bytes([0, 0, 0x0D, 1, 0, 0, 0, 1, 5]),
    bytes([0, 0, 8, 2, 0, 0, 0, 1]),
    bytes([0, 0, 8, 1, 0, 0, 0, 3, 5, 5]),
])
def test_idx_errors(data):
    with pytest.raises(IDXFormatError):
        read_idx(data)
