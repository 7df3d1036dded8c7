import numpy as np
import pytest

from marginlab.attacks import AttackSpec, fab_attack, fgsm, pgd, robust_accuracy
from marginlab.data import gen_two_moons
from marginlab.losses import LossConfig, batch_loss
from marginlab.margins import NormSpec, batch_logit_margins, oracle_margin
from marginlab.nets import InitSpec, build_mlp

LINF = NormSpec(np.inf)
L2 = NormSpec(2.0)


def _linear_net(w_logical, b=None):
    k, d = np.asarray(w_logical).shape
    net = build_mlp([d, k], init=InitSpec(scheme="zeros"))
    net.params[0].data = np.asarray(w_logical, dtype=np.float64).T.copy()
    if b is not None:
        net.params[1].data = np.asarray(b, dtype=np.float64).copy()
    return net


def _trained_moons_net(seed=0, epochs=60):
    ds = gen_two_moons(300, 0.08, seed=seed)
    net = build_mlp([2, 16, 16, 2], init=InitSpec(seed=seed))
    cfg = LossConfig(variant="ce-only")
    vel = [np.zeros(p.shape) for p in net.params]
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        perm = rng.permutation(len(ds))
        for s in range(0, len(ds), 64):
            idx = perm[s : s + 64]
            net.zero_grad()
            batch_loss(net, (ds.inputs[idx], ds.labels[idx]), cfg).loss.backward()
            for p, v in zip(net.params, vel):
                v *= 0.9
                v += p.grad
                p.data = p.data - 0.05 * v
    return net, ds


def test_spec_validation():
    with pytest.raises(ValueError):
        AttackSpec(kind="deepfool")
    with pytest.raises(ValueError):
        AttackSpec(kind="pgd", epsilon=-0.1)
    with pytest.raises(ValueError):
        AttackSpec(kind="pgd", steps=0)
    with pytest.raises(ValueError):
        AttackSpec(kind="pgd", clip_min=1.0, clip_max=0.0)
    with pytest.raises(ValueError):
        AttackSpec(kind="pgd", step_size=0.0)
    assert AttackSpec(kind="pgd", epsilon=0.2, steps=10).resolved_step_size == pytest.approx(0.05)


def test_spec_serialization_roundtrip():
    spec = AttackSpec(kind="pgd", norm=L2, epsilon=0.5, steps=7, step_size=0.1,
                      restarts=3, random_start=False, clip_min=0.0, clip_max=1.0, seed=9)
    assert AttackSpec.from_dict(spec.to_dict()) == spec


def test_fgsm_zero_epsilon_returns_x():
    net, ds = _trained_moons_net(1, epochs=10)
    spec = AttackSpec(kind="fgsm", epsilon=0.0)
    result = fgsm(net, ds.inputs[:20], ds.labels[:20], spec)
    np.testing.assert_array_equal(result.adversarial, ds.inputs[:20])


def test_fgsm_linear_analytic_direction():
    rng = np.random.default_rng(2)
    for _ in range(10):
        w = rng.normal(size=(2, 3))
        while np.abs(w[0] - w[1]).min() < 1e-3:
            w = rng.normal(size=(2, 3))
        net = _linear_net(w)
        x = rng.normal(size=(5, 3))
        y = rng.integers(2, size=5)
        spec = AttackSpec(kind="fgsm", epsilon=0.1)
        result = fgsm(net, x, y, spec)
        # CE gradient direction for binary linear model: -(w_y - w_c) scaled
        for i in range(5):
            dw = w[y[i]] - w[1 - y[i]]
            expected = x[i] - 0.1 * np.sign(dw)
            np.testing.assert_allclose(result.adversarial[i], expected, atol=1e-12)


def test_fgsm_exact_epsilon_at_nonclipped_coordinates():
    net, ds = _trained_moons_net(3, epochs=10)
    x, y = ds.inputs[:30], ds.labels[:30]
    spec = AttackSpec(kind="fgsm", epsilon=0.07)
    result = fgsm(net, x, y, spec)
    delta = result.adversarial - x
    nonzero = np.abs(delta) > 0
    np.testing.assert_allclose(np.abs(delta[nonzero]), 0.07, rtol=0, atol=1e-12)


def test_pgd_zero_epsilon_returns_x():
    net, ds = _trained_moons_net(4, epochs=10)
    spec = AttackSpec(kind="pgd", epsilon=0.0, steps=5)
    result = pgd(net, ds.inputs[:10], ds.labels[:10], spec)
    np.testing.assert_array_equal(result.adversarial, ds.inputs[:10])


def test_pgd_beats_fgsm_on_linear_models():
    rng = np.random.default_rng(5)
    for trial in range(30):
        k = int(rng.choice([2, 3, 5]))
        w = rng.normal(size=(k, 4))
        b = rng.normal(size=k) * 0.3
        net = _linear_net(w, b)
        x = rng.normal(size=(8, 4))
        y = rng.integers(k, size=8)
        eps = 0.15
        f = fgsm(net, x, y, AttackSpec(kind="fgsm", epsilon=eps))
        p = pgd(net, x, y, AttackSpec(kind="pgd", epsilon=eps, steps=20, random_start=False))
        assert (p.loss_achieved >= f.loss_achieved - 1e-9).all()


def test_pgd_ball_and_box_feasible_every_time():
    net, ds = _trained_moons_net(6, epochs=10)
    x, y = ds.inputs[:40], ds.labels[:40]
    for norm in (LINF, L2):
        for eps in (0.05, 0.2):
            spec = AttackSpec(kind="pgd", norm=norm, epsilon=eps, steps=8,
                              restarts=2, clip_min=-2.0, clip_max=3.0, seed=1)
            result = pgd(net, x, y, spec)
            delta = (result.adversarial - x).reshape(len(x), -1)
            assert (norm.primal(delta) <= eps + 1e-9).all()
            assert result.adversarial.min() >= -2.0
            assert result.adversarial.max() <= 3.0


def test_pgd_restart_monotone_in_ce():
    net, ds = _trained_moons_net(7, epochs=20)
    x, y = ds.inputs[:25], ds.labels[:25]
    prev = None
    for restarts in (1, 2, 3):
        spec = AttackSpec(kind="pgd", epsilon=0.15, steps=10, restarts=restarts, seed=3)
        ce = pgd(net, x, y, spec).loss_achieved
        if prev is not None:
            assert (ce >= prev - 1e-12).all()
        prev = ce


def test_pgd_determinism():
    net, ds = _trained_moons_net(8, epochs=10)
    spec = AttackSpec(kind="pgd", epsilon=0.1, steps=6, restarts=2, seed=11)
    a = pgd(net, ds.inputs[:15], ds.labels[:15], spec)
    b = pgd(net, ds.inputs[:15], ds.labels[:15], spec)
    np.testing.assert_array_equal(a.adversarial, b.adversarial)
    np.testing.assert_array_equal(a.success_mask, b.success_mask)


def test_pgd_sharding_independent():
    net, ds = _trained_moons_net(9, epochs=10)
    spec = AttackSpec(kind="pgd", epsilon=0.1, steps=5, restarts=2, seed=7)
    full = pgd(net, ds.inputs[:16], ds.labels[:16], spec)
    # per-sample seeds derive from the sample index, but sharding changes the
    # index; verify instead that a single-sample run with the same index
    # stream start reproduces the first sample
    single = pgd(net, ds.inputs[:1], ds.labels[:1], spec)
    np.testing.assert_allclose(full.adversarial[0], single.adversarial[0], atol=1e-9)


def test_fab_attack_success_iff_margin_within_budget():
    net, ds = _trained_moons_net(10, epochs=60)
    phi, _ = batch_logit_margins(net(ds.inputs).data, ds.labels)
    correct = np.nonzero(phi > 0)[0][:40]
    x, y = ds.inputs[correct], ds.labels[correct]
    oracle_vals = np.array([
        oracle_margin(net, x[i], int(y[i]), LINF, resolution=180).value for i in range(len(x))
    ])
    eps = float(np.median(oracle_vals))
    spec = AttackSpec(kind="fab", epsilon=eps, steps=20)
    result = fab_attack(net, x, y, spec)
    clear_in = oracle_vals < eps * 0.9
    clear_out = oracle_vals > eps * 1.1
    # FAB upper-bounds the margin, so it can miss a nearby boundary segment
    # on a few in-budget points; it can never fabricate an out-of-budget hit
    assert result.success_mask[clear_in].mean() >= 0.8
    assert (~result.success_mask[clear_out]).all()


def test_fab_attack_zero_epsilon():
    net, ds = _trained_moons_net(11, epochs=30)
    spec = AttackSpec(kind="fab", epsilon=0.0, steps=10)
    result = fab_attack(net, ds.inputs[:30], ds.labels[:30], spec)
    phi, _ = batch_logit_margins(net(ds.inputs[:30]).data, ds.labels[:30])
    already_wrong = phi <= 0
    np.testing.assert_array_equal(result.success_mask, already_wrong)


def test_fab_attack_ball_feasible():
    net, ds = _trained_moons_net(12, epochs=30)
    x, y = ds.inputs[:30], ds.labels[:30]
    spec = AttackSpec(kind="fab", epsilon=0.12, steps=20, clip_min=-3.0, clip_max=3.0)
    result = fab_attack(net, x, y, spec)
    delta = (result.adversarial - x).reshape(len(x), -1)
    assert (LINF.primal(delta) <= 0.12 + 1e-9).all()


def test_robust_accuracy_zero_budget_equals_clean():
    net, ds = _trained_moons_net(13, epochs=30)
    clean = (np.argmax(net(ds.inputs).data, 1) == ds.labels).mean()
    spec = AttackSpec(kind="pgd", epsilon=0.0, steps=3)
    assert robust_accuracy(net, ds, [spec]) == pytest.approx(clean)


def test_robust_accuracy_monotone_in_specs():
    net, ds = _trained_moons_net(14, epochs=30)
    specs = [
        AttackSpec(kind="pgd", epsilon=0.1, steps=10, seed=1),
        AttackSpec(kind="fgsm", epsilon=0.1),
        AttackSpec(kind="fab", epsilon=0.1, steps=15),
    ]
    accs = [robust_accuracy(net, ds, specs[: i + 1]) for i in range(3)]
    assert accs[0] >= accs[1] >= accs[2]
    clean = (np.argmax(net(ds.inputs).data, 1) == ds.labels).mean()
    assert all(a <= clean for a in accs)


def test_robust_accuracy_untrained_net_low():
    ds = gen_two_moons(200, 0.08, seed=15)
    net = build_mlp([2, 16, 16, 2], init=InitSpec(seed=15))
    clean = (np.argmax(net(ds.inputs).data, 1) == ds.labels).mean()
    spec = AttackSpec(kind="pgd", epsilon=0.1, steps=20, seed=0)
    robust = robust_accuracy(net, ds, [spec])
    assert robust <= clean + 1e-12


def test_robust_accuracy_requires_specs():
    net, ds = _trained_moons_net(16, epochs=5)
    with pytest.raises(ValueError):
        robust_accuracy(net, ds, [])
