"""Smoke test for the samga_py extension module.

Build and install first:  pip install -e crates/py --no-build-isolation
Run with:                  python -m pytest python/smoke_test.py
"""

import math

import pytest

import samga_py as sg


def test_routing_matches_softmax():
    logits = [-2.0, -1.0, 0.0, -1.0, -2.0]
    w = sg.route_infer(logits)
    z = sum(math.exp(v) for v in logits)
    assert all(abs(a - math.exp(v) / z) < 1e-12 for a, v in zip(w, logits))
    shifted = sg.route_infer([v + 7.0 for v in logits])
    assert all(abs(a - b) < 1e-12 for a, b in zip(w, shifted))


def test_deviation_rows_sum_to_zero():
    dev = sg.routing_deviation([0.1, 0.5, -0.3], [[0.2, -0.1, 0.0], [1.0, 0.0, -1.0]])
    assert len(dev) == 2
    assert all(abs(sum(row)) < 1e-12 for row in dev)


def test_loss_values():
    pair = [[1.0, 0.0], [0.0, 1.0]]
    assert abs(sg.retrieval_loss(pair, pair, tau=1.0) - math.log(1 + math.exp(-1))) < 1e-10
    same = [[0.3, 1.0, -2.0]] * 4
    assert abs(sg.retrieval_loss(same, same) - math.log(4)) < 1e-10
    assert abs(sg.mmd_loss(same, same)) < 1e-12
    assert sg.lambda_at(11) == pytest.approx(0.25)
    assert sg.lambda_at(21) == 0.0
    with pytest.raises(ValueError):
        sg.retrieval_loss([[0.0, 0.0], [1.0, 0.0]], pair)


def test_gradcheck_passes():
    for lam in (0.4, None):
        passed, blocks = sg.gradcheck(lam)
        assert passed
        assert {name for name, _, _ in blocks} >= {"router.q", "router.b", "head.log_tau"}


def test_config_rejects_unknown_keys():
    cfg = sg.Config()
    cfg.set("train.epochs", "5")
    assert '"epochs": 5' in cfg.to_json()
    with pytest.raises(ValueError, match="train.lrr"):
        cfg.set("train.lrr", "0.1")


def test_generate_train_evaluate(tmp_path):
    data = sg.Dataset.generate(seed=1)
    assert data.subjects == 5 and data.num_layers == 5
    data.save(str(tmp_path / "data"))
    again = sg.Dataset.load(str(tmp_path / "data"))
    assert again.num_trials == data.num_trials

    cfg = sg.Config()
    cfg.set("train.epochs", "8")
    cfg.set("loss.t_c", "5")
    cfg.set("train.subject", "1")
    run = sg.train(data, cfg)
    metrics = run.evaluate(data, [1, 5])
    assert metrics["n_way"] == 48
    assert metrics["top1"] > 1 / 48
    assert len(run.history()) <= 8
    assert abs(sum(run.global_weights()) - 1.0) < 1e-12

    run.save(str(tmp_path / "best.ckpt"))
    run.load_state(str(tmp_path / "best.ckpt"), data)
    assert run.evaluate(data, [1])["top1"] == metrics["top1"]
