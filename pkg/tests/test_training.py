import numpy as np
import pytest

from marginlab.attacks import AttackSpec
from marginlab.data import gen_two_moons, split
from marginlab.losses import LossConfig
from marginlab.nets import InitSpec, build_mlp
from marginlab.training import (
    EpochRecord,
    TrainConfig,
    TrainingDivergedError,
    cosine_lr,
    select_best,
    sgd_step,
    train,
)

ADV = AttackSpec(kind="pgd", epsilon=0.1, steps=5, restarts=1, seed=0)


def _small_setup(seed=0, n=120):
    ds = gen_two_moons(n, 0.1, seed=seed)
    tr, va, _ = split(ds, (0.6, 0.2, 0.2), seed=seed)
    net = build_mlp([2, 8, 2], init=InitSpec(seed=seed))
    return net, tr, va


def _cfg(**kw):
    base = dict(epochs=4, batch_size=32, lr0=0.05, lr_min=0.001, momentum=0.9,
                weight_decay=0.0, loss=LossConfig(variant="ce-only"),
                adv_val=ADV, adv_val_size=16, seed=1)
    base.update(kw)
    return TrainConfig(**base)


def test_cosine_lr_endpoints_and_midpoint():
    assert cosine_lr(0, 10, 0.1, 0.001) == pytest.approx(0.1)
    assert cosine_lr(10, 10, 0.1, 0.001) == pytest.approx(0.001)
    assert cosine_lr(5, 10, 0.1, 0.001) == pytest.approx((0.1 + 0.001) / 2)
    with pytest.raises(ValueError):
        cosine_lr(11, 10, 0.1, 0.001)
    with pytest.raises(ValueError):
        cosine_lr(0, 0, 0.1, 0.001)


def test_sgd_step_plain_gradient_descent():
    from marginlab.autodiff import Tensor

    p = Tensor([1.0, 2.0], requires_grad=True)
    v = [np.zeros(2)]
    sgd_step([p], [np.array([0.5, -1.0])], v, lr=0.1, momentum=0.0, weight_decay=0.0)
    np.testing.assert_allclose(p.data, [0.95, 2.1])


def test_sgd_step_zero_grad_fixed_point():
    from marginlab.autodiff import Tensor

    p = Tensor([3.0], requires_grad=True)
    v = [np.zeros(1)]
    sgd_step([p], [np.zeros(1)], v, lr=0.1, momentum=0.9, weight_decay=0.0)
    np.testing.assert_array_equal(p.data, [3.0])


def test_sgd_two_steps_constant_gradient_displacement():
    from marginlab.autodiff import Tensor

    mu, lr, g = 0.7, 0.01, np.array([2.0])
    p = Tensor([1.0], requires_grad=True)
    v = [np.zeros(1)]
    sgd_step([p], [g], v, lr, mu, 0.0)
    sgd_step([p], [g], v, lr, mu, 0.0)
    # total displacement lr*g*(2 + mu)
    np.testing.assert_allclose(p.data, 1.0 - lr * g * (2 + mu))


def test_sgd_step_shape_mismatch():
    from marginlab.autodiff import Tensor

    p = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="shape mismatch"):
        sgd_step([p], [np.zeros(3)], [np.zeros(2)], 0.1, 0.0, 0.0)


def test_train_history_and_lr_trace():
    net, tr, va = _small_setup()
    cfg = _cfg(epochs=5)
    result = train(net, (tr, va), cfg)
    assert len(result.history) == 5
    for rec in result.history:
        assert rec.lr == pytest.approx(cosine_lr(rec.epoch, 5, cfg.lr0, cfg.lr_min))
    assert result.stopped_reason == "completed"
    assert result.best_epoch == select_best(result.history)


def test_burn_in_equals_ce_only_trajectory():
    loss_cfg = LossConfig(variant="elsayed-hinge", lam=5.0, gamma=0.3)
    net1, tr, va = _small_setup(3)
    r1 = train(net1, (tr, va), _cfg(loss=loss_cfg, burn_in_epochs=4, epochs=4))
    net2, _, _ = _small_setup(3)
    r2 = train(net2, (tr, va), _cfg(loss=LossConfig(variant="ce-only"), epochs=4))
    for p1, p2 in zip(net1.params, net2.params):
        np.testing.assert_array_equal(p1.data, p2.data)
    for a, b in zip(r1.history, r2.history):
        assert a.ce_loss == b.ce_loss
        assert a.robust_val_acc == b.robust_val_acc


def test_lambda_zero_equals_ce_only_trajectory():
    net1, tr, va = _small_setup(4)
    r1 = train(net1, (tr, va), _cfg(loss=LossConfig(variant="elsayed-hinge", lam=0.0, gamma=0.3)))
    net2, _, _ = _small_setup(4)
    r2 = train(net2, (tr, va), _cfg(loss=LossConfig(variant="ce-only")))
    for p1, p2 in zip(net1.params, net2.params):
        np.testing.assert_array_equal(p1.data, p2.data)


def test_mm_part_zero_during_burn_in():
    net, tr, va = _small_setup(5)
    cfg = _cfg(loss=LossConfig(variant="elsayed-hinge", lam=5.0, gamma=0.5),
               burn_in_epochs=2, epochs=4)
    result = train(net, (tr, va), cfg)
    assert result.history[0].mm_loss == 0.0
    assert result.history[1].mm_loss == 0.0
    assert any(r.mm_loss != 0.0 for r in result.history[2:])


def test_train_determinism_bit_identical():
    net1, tr, va = _small_setup(6)
    r1 = train(net1, (tr, va), _cfg(seed=42))
    net2, _, _ = _small_setup(6)
    r2 = train(net2, (tr, va), _cfg(seed=42))
    for p1, p2 in zip(net1.params, net2.params):
        np.testing.assert_array_equal(p1.data, p2.data)
    assert [r.row()[:-1] for r in r1.history] == [r.row()[:-1] for r in r2.history]


def test_select_best_rules():
    def rec(epoch, acc):
        return EpochRecord(epoch, 0.1, 0, 0, 0, 0, acc, 0, 0)

    assert select_best([rec(0, 10), rec(1, 30), rec(2, 20)]) == 1
    assert select_best([rec(0, 5), rec(1, 5), rec(2, 5)]) == 0
    assert select_best([rec(0, 1), rec(1, 2), rec(2, 3)]) == 2
    with pytest.raises(ValueError):
        select_best([])


def test_selected_checkpoint_beats_final_epoch():
    net, tr, va = _small_setup(7)
    result = train(net, (tr, va), _cfg(epochs=6))
    best = result.history[result.best_epoch].robust_val_acc
    assert best >= result.history[-1].robust_val_acc


def test_early_stop_patience():
    net, tr, va = _small_setup(8)
    cfg = _cfg(epochs=30, early_stop_patience=2, lr0=0.0, lr_min=0.0)
    # zero learning rate: robust val acc never improves after epoch 0
    result = train(net, (tr, va), cfg)
    assert result.stopped_reason == "early-stop"
    assert len(result.history) < 30


def test_nonfinite_loss_aborts_with_context():
    net, tr, va = _small_setup(9)
    cfg = _cfg(lr0=1e9, lr_min=1e9, epochs=10,
               loss=LossConfig(variant="exp-loss", lam=1e12, gamma=5.0, alpha=50.0))
    with pytest.raises(TrainingDivergedError) as exc_info:
        train(net, (tr, va), cfg)
    err = exc_info.value
    assert err.epoch >= 0
    assert err.last_checkpoint is not None


def test_train_writes_artifacts(tmp_path):
    net, tr, va = _small_setup(10)
    result = train(net, (tr, va), _cfg(epochs=3), out_dir=tmp_path)
    assert (tmp_path / "history.csv").exists()
    assert (tmp_path / "best.ckpt").exists()
    assert (tmp_path / "final.ckpt").exists()
    lines = (tmp_path / "history.csv").read_text().strip().splitlines()
    assert lines[0] == ",".join(EpochRecord.FIELDS)
    assert len(lines) == 4

    from marginlab.nets import load_checkpoint

    best = load_checkpoint(tmp_path / "best.ckpt")
    for pa, pb in zip(best.params, result.best_checkpoint.params):
        np.testing.assert_array_equal(pa.data, pb.data)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(burn_in_epochs=10, epochs=5)
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        TrainConfig(lr0=0.01, lr_min=0.1)


def test_train_config_serialization_roundtrip():
    cfg = _cfg(loss=LossConfig(variant="exp-loss", lam=100.0, gamma=0.2), burn_in_epochs=2)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
