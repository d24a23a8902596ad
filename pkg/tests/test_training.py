import csv

import numpy as np
import pytest

from scenedecomp import autodiff as ad
from scenedecomp.autodiff import Tensor
from scenedecomp.datasets import generate_tetris, save_dataset
from scenedecomp.inference import InferenceTrace
from scenedecomp.training import (
    METRICS_HEADER,
    PRESETS,
    BatchSampler,
    TrainConfig,
    build_config,
    format_config,
    load_model,
    model_config_from_checkpoint,
    parse_config_text,
    save_model,
    total_loss,
    train_loop,
    train_step,
)

from toy import K, toy_image, toy_model

SMALL = dict(
    K="2", T="2", latent_dim="8", batch_size="4", dec_hidden="8,8", ref_channels="8,8",
    ref_strides="1,2", mlp_hidden="16", eval_every="5", eval_size="8", checkpoint_every="5",
    wall_clock="false",
)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    train, test = root / "train.bin", root / "test.bin"
    save_dataset(train, *generate_tetris(40, seed=1, canvas=20, pieces=2))
    save_dataset(test, *generate_tetris(8, seed=2, canvas=20, pieces=2))
    return str(train), str(test)


def small_config(tiny_data, out_dir, **extra):
    values = dict(SMALL, dataset=tiny_data[0], eval_dataset=tiny_data[1], out_dir=str(out_dir))
    values.update({k: str(v) for k, v in extra.items()})
    return build_config(overrides=values)


def read_rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------- total loss


def fake_trace(values):
    return InferenceTrace(losses=[Tensor(np.array([v])) for v in values])


@pytest.mark.parametrize("values,expected", [((7.0,), 7.0), ((2.0, 4.0), 5.0), ((3.0, 3.0, 3.0), 6.0)])
def test_total_loss_weights(values, expected):
    assert total_loss(fake_trace(values), len(values)).item() == pytest.approx(expected, abs=1e-12)


def test_total_loss_averages_batch():
    trace = InferenceTrace(losses=[Tensor(np.array([1.0, 3.0]))])
    assert total_loss(trace, 1).item() == 2.0


def test_total_loss_length_mismatch():
    with pytest.raises(ValueError):
        total_loss(fake_trace((1.0, 2.0)), 3)


# ----------------------------------------------------------------- train step


def test_step_updates_every_parameter_group():
    cfg, store = toy_model()
    before = {name: t.data.copy() for name, t in store.items()}
    tcfg = TrainConfig(K=K, T=2, batch_size=2)
    rec = train_step(toy_image(0, batch=2), store, cfg, tcfg, np.random.default_rng(0))
    assert store.step == rec.step == 1
    assert rec.grad_norm > 0
    for name, t in store.items():
        # decoder, refiner and initial posterior all feed the loss, so all move
        assert not np.array_equal(before[name], t.data), name


def test_step_is_deterministic():
    x = toy_image(1, batch=2)
    tcfg = TrainConfig(K=K, T=2, batch_size=2)
    losses = []
    for _ in range(2):
        cfg, store = toy_model()
        recs = [train_step(x, store, cfg, tcfg, np.random.default_rng(s)) for s in range(5)]
        losses.append([r.total_loss for r in recs])
    assert losses[0] == losses[1]


def test_non_finite_step_leaves_params_untouched():
    cfg, store = toy_model()
    store["dec.conv2.b"].data[:] = np.nan
    snapshot = {name: t.data.copy() for name, t in store.items()}
    with np.errstate(all="ignore"), pytest.raises(ad.NonFiniteError):
        train_step(toy_image(0, batch=2), store, cfg, TrainConfig(K=K, T=2), np.random.default_rng(0))
    for name, t in store.items():
        np.testing.assert_array_equal(t.data, snapshot[name])


# ----------------------------------------------------------------- config


def test_config_validation():
    for bad in (dict(batch_size=0), dict(T=0), dict(lr=0.0), dict(K=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_config_precedence_and_round_trip():
    text = "K = 5\nlr=0.001  # faster\n\nablation = grad_means, coords\n"
    file_values = parse_config_text(text)
    cfg = build_config(file_values, {"K": "6"}, preset="tetris-mini")
    assert cfg.K == 6 and cfg.lr == 0.001 and cfg.T == PRESETS["tetris-mini"]["T"]
    assert cfg.ablation == ("grad_means", "coords")
    again = build_config(parse_config_text(format_config(cfg)))
    assert again == cfg


def test_config_errors_name_the_key():
    with pytest.raises(ValueError, match="bogus"):
        build_config({"bogus": "1"})
    with pytest.raises(ValueError, match="'K'"):
        build_config({"K": "three"})
    with pytest.raises(ValueError, match="line 1"):
        parse_config_text("no equals sign")
    with pytest.raises(ValueError):
        build_config(preset="nope")


def test_model_config_survives_checkpoint(tmp_path):
    cfg, store = toy_model(lstm_hidden=5)
    save_model(tmp_path / "m.ckpt", store, cfg)
    loaded, loaded_cfg = load_model(tmp_path / "m.ckpt", np.float64)
    assert loaded_cfg == cfg
    assert set(loaded) == set(store)


def test_batch_sampler_depends_only_on_seed_and_step():
    a = BatchSampler(50, 8, 3)
    b = BatchSampler(50, 8, 3)
    assert np.array_equal(a.indices(17), b.indices(17))
    seen = np.concatenate([a.indices(s) for s in range(6)])
    assert len(set(seen.tolist())) == len(seen)  # one epoch without repeats
    assert np.array_equal(b.indices(3), BatchSampler(50, 8, 3).indices(3))


# ------------------------------------------------------------------- loop


def test_loop_writes_rows_checkpoint_and_eval(tiny_data, tmp_path):
    cfg = small_config(tiny_data, tmp_path, total_updates=10)
    summary = train_loop(cfg)
    rows = read_rows(cfg.metrics_path)
    assert tuple(rows[0]) == METRICS_HEADER
    assert [int(r[0]) for r in rows[1:]] == list(range(1, 11))
    assert [r[4] != "" for r in rows[1:]] == [i % 5 == 0 for i in range(1, 11)]
    assert all(r[5] == "0.0" for r in rows[1:])
    assert summary["steps"] == 10
    assert (tmp_path / "config.txt").read_text() == format_config(cfg)


def test_loop_is_bit_reproducible(tiny_data, tmp_path):
    a = small_config(tiny_data, tmp_path / "a", total_updates=6)
    b = small_config(tiny_data, tmp_path / "b", total_updates=6)
    train_loop(a)
    train_loop(b)
    assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()
    assert a.checkpoint_path.read_bytes() == b.checkpoint_path.read_bytes()


def test_resume_continues_numbering_and_matches_straight_run(tiny_data, tmp_path):
    straight = small_config(tiny_data, tmp_path / "s", total_updates=10)
    train_loop(straight)
    part = small_config(tiny_data, tmp_path / "r", total_updates=5)
    train_loop(part)
    rest = small_config(tiny_data, tmp_path / "r", total_updates=10, resume="true")
    train_loop(rest)
    rows = read_rows(rest.metrics_path)
    assert [int(r[0]) for r in rows[1:]] == list(range(1, 11))
    assert rest.metrics_path.read_bytes() == straight.metrics_path.read_bytes()


def test_checkpoint_round_trip_preserves_eval(tiny_data, tmp_path):
    from scenedecomp.datasets import images_as_float, load_arrays
    from scenedecomp.evaluation import evaluate_batch

    cfg = small_config(tiny_data, tmp_path, total_updates=3)
    train_loop(cfg)
    store, model_cfg = load_model(cfg.checkpoint_path)
    again, _ = load_model(cfg.checkpoint_path)
    _, recs = load_arrays(tiny_data[1])
    x = images_as_float(recs)
    a = evaluate_batch(store, model_cfg, x, recs, 2, 2, np.random.default_rng(0))
    b = evaluate_batch(again, model_cfg, x, recs, 2, 2, np.random.default_rng(0))
    assert np.array_equal(a["ari"], b["ari"]) and np.array_equal(a["mse"], b["mse"])
    assert model_config_from_checkpoint(store, ad.load_checkpoint(cfg.checkpoint_path)[1]) == model_cfg


def test_keep_steps_writes_snapshots(tiny_data, tmp_path):
    cfg = small_config(tiny_data, tmp_path, total_updates=4, keep_steps="2")
    train_loop(cfg)
    snap = cfg.snapshot_path(2)
    assert snap.name == "model-step2.ckpt" and snap.exists()
    assert load_model(snap)[0].step == 2


def test_missing_dataset_names_path(tmp_path):
    cfg = build_config(overrides=dict(SMALL, dataset=str(tmp_path / "absent.bin"), out_dir=str(tmp_path)))
    with pytest.raises(OSError, match="absent.bin"):
        train_loop(cfg)
