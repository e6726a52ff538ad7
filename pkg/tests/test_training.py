import json

import numpy as np
import pytest

from qjfuse import autodiff as ad
from qjfuse.model import ModelConfig
from qjfuse.training import (AdamW, ConfigError, PRESETS, RunConfig, average_drop_rate, evaluate, load_data,
                             masked_eval, metrics_from_probs, pearson, train, weighted_f1, with_variant)


def small_run(**kw):
    model = dict(modalities={"m1": 6, "m2": 6}, D=3, K=2, M=6, C=2, steps=3, dt=0.2, attn_dim=3, dropout=0.0)
    model.update(kw.pop("model", {}))
    obj = {"model": model, "data": {"synthetic": {"n_samples": 200, "coupling": "xor_joint", "noise": 0.3}},
           "batch_size": 32, "epochs": 3, "patience": 2}
    obj.update(kw)
    return RunConfig.from_json(obj)


def test_adamw_zero_gradient_is_pure_decay():
    p = {"a": ad.parameter(np.array([1.0, -2.0, 4.0])), "b": ad.parameter(np.array([3.0]))}
    opt = AdamW(p, {"g1": ["a"], "g2": ["b"]}, {"g1": 0.1, "default": 0.01}, weight_decay=0.5)
    opt.step({})
    np.testing.assert_allclose(p["a"].data, np.array([1.0, -2.0, 4.0]) * (1 - 0.1 * 0.5), rtol=0, atol=0)
    np.testing.assert_allclose(p["b"].data, [3.0 * (1 - 0.01 * 0.5)], rtol=0, atol=0)


def test_adamw_first_step_moves_by_lr():
    p = {"w": ad.parameter(np.array([0.5, 0.5]))}
    opt = AdamW(p, {"g": ["w"]}, {"g": 0.01}, weight_decay=0.0)
    opt.step({"w": np.array([2.0, -3.0])})
    np.testing.assert_allclose(p["w"].data, [0.49, 0.51], atol=1e-9)
    with pytest.raises(ConfigError):
        AdamW(p, {"g": ["w"]}, {"g": 0.0})


def test_weighted_f1_fixture():
    y_true = [0, 0, 0, 1, 1, 1, 1, 2, 2, 2]
    y_pred = [0, 0, 1, 1, 1, 2, 1, 2, 0, 2]
    # per-class F1 2/3, 3/4, 2/3 with supports 3, 4, 3
    assert weighted_f1(y_true, y_pred) == pytest.approx(0.7, abs=1e-12)
    assert weighted_f1([1, 1], [1, 1]) == 1.0


def test_pearson_examples():
    x = np.random.default_rng(0).normal(size=20)
    assert pearson(x, x) == pytest.approx(1.0, abs=1e-12)
    assert pearson(x, -2 * x + 1) == pytest.approx(-1.0, abs=1e-12)
    assert pearson(x, np.ones(20)) == 0.0


def test_regression_metrics_from_class_expectation():
    probs = np.array([[1.0, 0, 0], [0, 0, 1.0], [0, 1.0, 0]])
    m = metrics_from_probs(probs, [0, 2, 1], scores=np.array([-3.0, 3.0, 0.0]))
    assert m["accuracy"] == 1.0 and m["mae"] == 0.0 and m["corr"] == pytest.approx(1.0)
    for k in ("acc2", "acc3", "acc5", "acc7"):
        assert 0 <= m[k] <= 1


def test_config_errors():
    with pytest.raises(ConfigError):
        RunConfig.from_json({"epochs": 3, "learning_rate": 0.1})
    with pytest.raises(ConfigError):
        RunConfig.from_json({"model": {"D": 3, "zeta": 1}})
    with pytest.raises(ConfigError):
        RunConfig.from_json({"patience": 0})
    with pytest.raises(ConfigError):
        RunConfig.from_json({"preset": "imagenet"})
    with pytest.raises(ConfigError):
        load_data(RunConfig.from_json({"data": {"csv": "x"}}))
    with pytest.raises(ConfigError):
        load_data(small_run(model={"C": 3}))


def test_config_file_round_trip(tmp_path):
    cfg = small_run()
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_json()))
    assert RunConfig.load(tmp_path / "c.json") == cfg
    (tmp_path / "bad.json").write_text("[1, 2]")
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "bad.json")


def test_presets_fill_defaults_without_overriding():
    cfg = RunConfig.from_json({"preset": "mosei", "model": {"steps": 7}})
    assert cfg.model.steps == 7 and cfg.batch_size == PRESETS["mosei"]["batch_size"]
    assert cfg.model.dropout == 0.15 and cfg.lr["modality:audio"] == 1e-4
    assert RunConfig.from_json({"preset": "sims"}).model.temperature == 0.05


def test_variant_copies():
    cfg = small_run()
    only = with_variant(cfg, "only:m2")
    assert only.model.modalities == {"m2": 6} and cfg.model.modalities == {"m1": 6, "m2": 6}
    assert with_variant(cfg, "no_qj").model.variant == "no_qj"
    with pytest.raises(ConfigError):
        with_variant(cfg, "only:m9")
    with pytest.raises(ConfigError):
        with_variant(cfg, "no_such_variant")


def test_early_stopping_restores_the_best_epoch():
    cfg = small_run(epochs=8, patience=1, lr={"default": 0.05})
    splits = load_data(cfg)
    res = train(cfg, splits)
    vals = [h["valid_task"] for h in res.history]
    assert res.best_epoch == int(np.argmin(vals))
    assert len(res.history) <= res.best_epoch + 1 + cfg.patience
    assert evaluate(res.model, splits["valid"])["task_loss"] == pytest.approx(min(vals), abs=1e-12)


def test_training_is_deterministic():
    cfg = small_run(epochs=2)
    a, b = train(cfg), train(cfg)
    assert json.dumps(a.metrics, sort_keys=True) == json.dumps(b.metrics, sort_keys=True)
    assert a.history == b.history


def test_marginal_data_is_solvable_without_jumps():
    cfg = RunConfig.from_json({
        "model": {"modalities": {"m1": 8, "m2": 8}, "D": 4, "K": 2, "M": 8, "C": 2, "steps": 3,
                  "variant": "no_qj", "attn_dim": 4},
        "data": {"synthetic": {"n_samples": 600, "coupling": "marginal", "noise": 0.3}},
        "epochs": 10, "patience": 3})
    assert train(cfg).metrics["accuracy"] >= 0.95


def test_masked_eval_rows_and_drop_rate():
    cfg = small_run(epochs=1)
    splits = load_data(cfg)
    res = train(cfg, splits)
    rows = masked_eval(res.model, splits["test"], [0, 0.5, 1.0], seeds=2)
    assert [r["mask_rate"] for r in rows] == [0.0, 0.5, 1.0]
    assert rows[0]["accuracy"] == res.metrics["accuracy"]
    fake = [{"acc": 0.8}, {"acc": 0.6}, {"acc": 0.4}]
    assert average_drop_rate(fake, "acc") == pytest.approx(37.5)
