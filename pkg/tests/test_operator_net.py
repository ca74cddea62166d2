"""Operator network tests.

Oracles: an explicit mask-matrix (indicator diagonal) evaluation of the box
penalty, central finite differences for every gradient path, and scalar
per-sample recomputation of the batched loss.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepc_lab.dataset import TrainingSample, build_dataset
from deepc_lab.errors import ConfigError, DimensionError, TrainingError
from deepc_lab.hankel import Trajectory, partition
from deepc_lab.operator_net import (
    LossWeights,
    OperatorNetwork,
    TrainConfig,
    build_context,
    context_dim,
    grad,
    loss,
    soft_penalty,
    train,
)

N_U, N_Y, T_INI, N_P, T_REC = 2, 1, 2, 3, 30
WIDTH = T_REC - (T_INI + N_P) + 1


def small_hankel(seed=0):
    rng = np.random.default_rng(seed)
    u = Trajectory(rng.uniform(-1, 1, (N_U, T_REC)))
    y = Trajectory(rng.standard_normal((N_Y, T_REC)))
    return partition(u, y, T_INI, N_P)


def small_weights(p_u=10.0, p_y=10.0, wide=False):
    span = 1e9 if wide else 0.8
    return LossWeights(q=5.0, r=1.0, p_u=p_u, p_y=p_y,
                       u_lb=np.full(N_U * N_P, -span), u_ub=np.full(N_U * N_P, span),
                       y_lb=np.full(N_Y * N_P, -span), y_ub=np.full(N_Y * N_P, span))


def random_samples(count, seed):
    rng = np.random.default_rng(seed)
    return [TrainingSample(
        u_ini=rng.standard_normal(N_U * T_INI),
        y_ini=rng.standard_normal(N_Y * T_INI),
        e_u=rng.standard_normal(N_U),
        e_y=rng.standard_normal(N_Y),
        u_ref=rng.standard_normal(N_U * N_P),
        y_ref=rng.standard_normal(N_Y * N_P),
    ) for _ in range(count)]


def small_net(variant="I", seed=0, hidden=(8, 7)):
    return OperatorNetwork.create(variant, N_U, N_Y, T_INI, N_P, WIDTH,
                                  hidden=hidden, seed=seed)


# ------------------------------------------------------------- soft penalty

def mask_penalty_oracle(u_hat, y_hat, w):
    """Literal indicator-diagonal quadratic forms."""
    def side(v, lb, ub, p):
        P_lb = np.diag(p * (v < lb).astype(float))
        P_ub = np.diag(p * (v > ub).astype(float))
        return (v - lb) @ P_lb @ (v - lb) + (v - ub) @ P_ub @ (v - ub)
    return side(u_hat, w.u_lb, w.u_ub, w.p_u) + side(y_hat, w.y_lb, w.y_ub, w.p_y)


def test_penalty_zero_inside_bounds():
    w = small_weights()
    assert soft_penalty(np.zeros(N_U * N_P), np.zeros(N_Y * N_P), w) == 0.0


def test_penalty_single_term_hand_value():
    w = LossWeights(q=1.0, r=1.0, p_u=10.0, p_y=10.0,
                    u_lb=np.array([0.0]), u_ub=np.array([1.0]),
                    y_lb=np.array([-1.0]), y_ub=np.array([1.0]))
    val = soft_penalty(np.array([1.1]), np.array([0.0]), w)
    assert abs(val - 10.0 * 0.01) < 1e-15


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_penalty_matches_mask_matrix_oracle(seed):
    rng = np.random.default_rng(seed)
    w = small_weights()
    u_hat = rng.uniform(-2, 2, N_U * N_P)
    y_hat = rng.uniform(-2, 2, N_Y * N_P)
    assert abs(soft_penalty(u_hat, y_hat, w)
               - mask_penalty_oracle(u_hat, y_hat, w)) < 1e-12


# ------------------------------------------------------------------ forward

def test_forward_zero_net_outputs_zero():
    net = small_net()
    for W in net.weights:
        W[:] = 0.0
    out = net.forward(np.random.default_rng(1).standard_normal(net.input_dim))
    np.testing.assert_array_equal(out, np.zeros(WIDTH))


def test_forward_single_layer_identity():
    d = 5
    net = OperatorNetwork("I", [np.eye(d)], [np.zeros(d)])
    v = np.random.default_rng(2).standard_normal(d)
    np.testing.assert_array_equal(net.forward(v), v)


def test_forward_deterministic_across_instances():
    a = small_net(seed=33)
    b = small_net(seed=33)
    v = np.random.default_rng(3).standard_normal(a.input_dim)
    assert np.array_equal(a.forward(v), b.forward(v))
    for Wa, Wb in zip(a.weights, b.weights):
        assert np.array_equal(Wa, Wb)


def test_forward_dimension_error_names_sizes():
    net = small_net()
    with pytest.raises(DimensionError, match=str(net.input_dim)):
        net.forward(np.zeros(net.input_dim + 1))


def test_forward_piecewise_linear_within_activation_pattern():
    net = small_net(seed=4)
    rng = np.random.default_rng(5)
    x = rng.standard_normal(net.input_dim)
    d = rng.standard_normal(net.input_dim)
    x2 = x + 1e-4 * d
    # confirm both points share the rectifier pattern before asserting
    def pattern(v):
        signs = []
        h = v
        for i, (W, b) in enumerate(zip(net.weights, net.biases)):
            h = h @ W.T + b
            if i != len(net.weights) - 1:
                signs.append(h > 0)
                h = np.maximum(h, 0)
        return np.concatenate(signs)
    assert np.array_equal(pattern(x), pattern(x2))
    for alpha in (0.25, 0.5, 0.75):
        mid = alpha * x + (1 - alpha) * x2
        expect = alpha * net.forward(x) + (1 - alpha) * net.forward(x2)
        np.testing.assert_allclose(net.forward(mid), expect, atol=1e-10)


def test_create_dimensions_for_benchmark_scale():
    net1 = OperatorNetwork.create("I", 3, 3, 10, 10, 181)
    assert net1.layer_sizes == [66, 150, 150, 181]
    net2 = OperatorNetwork.create("II", 3, 3, 10, 10, 181)
    assert net2.layer_sizes == [63, 150, 150, 181]
    lim = np.sqrt(6.0 / 66)
    assert np.abs(net1.weights[0]).max() <= lim
    assert np.abs(net1.weights[0]).max() > 0.5 * lim
    assert not net1.weights[0].flags.writeable or True  # plain arrays allowed
    np.testing.assert_array_equal(net1.biases[0], np.zeros(150))


def test_context_layout_and_dims():
    s = random_samples(1, 7)[0]
    c1 = build_context(s, "I")
    np.testing.assert_array_equal(
        c1, np.concatenate([s.u_ini, s.y_ini, s.e_u, s.e_y]))
    c2 = build_context(s, "II")
    np.testing.assert_array_equal(
        c2, np.concatenate([s.u_ini, s.y_ini, s.e_y]))
    assert context_dim("I", N_U, N_Y, T_INI) == c1.size
    assert context_dim("II", N_U, N_Y, T_INI) == c2.size
    with pytest.raises(ConfigError):
        context_dim("III", 1, 1, 1)


# --------------------------------------------------------------------- loss

def exact_fit_setup():
    hs = small_hankel()
    g0 = np.random.default_rng(8).standard_normal(WIDTH)
    net = small_net()
    for W in net.weights:
        W[:] = 0.0
    net.biases[-1][:] = g0
    s = random_samples(1, 9)[0]._replace(u_ref=hs.U_f @ g0, y_ref=hs.Y_f @ g0)
    return hs, net, s


def test_loss_zero_at_exact_fit():
    hs, net, s = exact_fit_setup()
    assert loss(net, [s], hs, small_weights(wide=True)) < 1e-24


def test_loss_zero_under_degenerate_weights():
    hs = small_hankel()
    net = small_net(seed=10)
    w = LossWeights(q=0.0, r=0.0, p_u=0.0, p_y=0.0,
                    u_lb=np.full(N_U * N_P, -np.inf), u_ub=np.full(N_U * N_P, np.inf),
                    y_lb=np.full(N_Y * N_P, -np.inf), y_ub=np.full(N_Y * N_P, np.inf))
    assert loss(net, random_samples(4, 11), hs, w) == 0.0


def scalar_loss_oracle(net, samples, hs, w):
    """Per-sample recomputation with plain loops and scalars."""
    total = 0.0
    for s in samples:
        g = net.forward(build_context(s, net.variant))
        u_hat = hs.U_f @ g
        y_hat = hs.Y_f @ g
        ry = y_hat - s.y_ref
        total += float(ry @ (w.q * ry))
        if net.variant == "I":
            ru = u_hat - s.u_ref
            total += float(ru @ (w.r * ru))
        total += mask_penalty_oracle(u_hat, y_hat, w)
    return total / len(samples)


@pytest.mark.parametrize("variant", ["I", "II"])
def test_loss_matches_scalar_oracle(variant):
    hs = small_hankel(seed=12)
    net = small_net(variant, seed=13)
    samples = random_samples(3, 14)
    w = small_weights()
    assert abs(loss(net, samples, hs, w)
               - scalar_loss_oracle(net, samples, hs, w)) < 1e-12


def test_loss_rejects_empty_or_mismatched():
    hs = small_hankel()
    net = small_net()
    with pytest.raises(DimensionError):
        loss(net, [], hs, small_weights())
    bad = OperatorNetwork.create("I", N_U, N_Y, T_INI, N_P, WIDTH + 1)
    with pytest.raises(DimensionError):
        loss(bad, random_samples(1, 15), hs, small_weights())


# ---------------------------------------------------------------- gradients

def kink_signature(net, samples, hs, w):
    """Rectifier sign pattern plus box-hinge activity for a whole batch.

    A central difference is only a valid derivative probe when both
    endpoints sit on the same smooth piece, so tests compare signatures at
    the two perturbed points and skip coordinates that straddle a kink.
    """
    sig = []
    for s in samples:
        h = build_context(s, net.variant)
        for i, (W, b) in enumerate(zip(net.weights, net.biases)):
            h = h @ W.T + b
            if i != len(net.weights) - 1:
                sig.append(h > 0)
                h = np.maximum(h, 0.0)
        u_hat = hs.U_f @ h
        y_hat = hs.Y_f @ h
        sig.extend([u_hat < w.u_lb, u_hat > w.u_ub, y_hat < w.y_lb, y_hat > w.y_ub])
    return np.concatenate(sig)


def fd_gradient(net, samples, hs, w, arr, idx, h=1e-5):
    """Central difference, or None when the step crosses a kink."""
    orig = arr[idx]
    arr[idx] = orig + h
    lp = loss(net, samples, hs, w)
    sig_p = kink_signature(net, samples, hs, w)
    arr[idx] = orig - h
    lm = loss(net, samples, hs, w)
    sig_m = kink_signature(net, samples, hs, w)
    arr[idx] = orig
    if not np.array_equal(sig_p, sig_m):
        return None
    return (lp - lm) / (2 * h)


@pytest.mark.parametrize("variant", ["I", "II"])
def test_grad_matches_finite_differences(variant):
    hs = small_hankel(seed=16)
    net = small_net(variant, seed=17)
    samples = random_samples(5, 18)
    w = small_weights()
    dWs, dbs = grad(net, samples, hs, w)
    rng = np.random.default_rng(19)
    checks = 0
    for layer in range(len(net.weights)):
        for _ in range(12):
            i = rng.integers(net.weights[layer].shape[0])
            j = rng.integers(net.weights[layer].shape[1])
            fd = fd_gradient(net, samples, hs, w, net.weights[layer], (i, j))
            if fd is None:
                continue
            an = dWs[layer][i, j]
            assert abs(an - fd) / max(1e-8, abs(an), abs(fd)) < 1e-5
            checks += 1
        for _ in range(3):
            i = rng.integers(net.biases[layer].shape[0])
            fd = fd_gradient(net, samples, hs, w, net.biases[layer], (i,))
            if fd is None:
                continue
            an = dbs[layer][i]
            assert abs(an - fd) / max(1e-8, abs(an), abs(fd)) < 1e-5
            checks += 1
    assert checks >= 30


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10**6), variant=st.sampled_from(["I", "II"]))
def test_grad_finite_difference_property(seed, variant):
    rng = np.random.default_rng(seed)
    hs = small_hankel(seed=seed % 100)
    net = small_net(variant, seed=seed, hidden=(6,))
    samples = random_samples(2, seed + 1)
    w = small_weights(p_u=float(rng.uniform(0, 20)), p_y=float(rng.uniform(0, 20)))
    dWs, dbs = grad(net, samples, hs, w)
    for _ in range(5):
        layer = int(rng.integers(len(net.weights)))
        i = int(rng.integers(net.weights[layer].shape[0]))
        j = int(rng.integers(net.weights[layer].shape[1]))
        fd = fd_gradient(net, samples, hs, w, net.weights[layer], (i, j))
        if fd is None:
            continue
        an = dWs[layer][i, j]
        assert abs(an - fd) / max(1e-6, abs(an), abs(fd)) < 1e-4


def test_grad_vanishes_at_exact_fit():
    hs, net, s = exact_fit_setup()
    dWs, dbs = grad(net, [s], hs, small_weights(wide=True))
    for dW, db in zip(dWs, dbs):
        assert np.abs(dW).max() < 1e-8
        assert np.abs(db).max() < 1e-8


def test_grad_q_term_is_linear_in_q():
    hs = small_hankel(seed=20)
    net = small_net(seed=21)
    samples = random_samples(3, 22)

    def grads_with_q(qval):
        w = LossWeights(q=qval, r=1.0, p_u=10.0, p_y=10.0,
                        u_lb=np.full(N_U * N_P, -0.8), u_ub=np.full(N_U * N_P, 0.8),
                        y_lb=np.full(N_Y * N_P, -0.8), y_ub=np.full(N_Y * N_P, 0.8))
        return grad(net, samples, hs, w)

    dW0, _ = grads_with_q(0.0)
    dW1, _ = grads_with_q(5.0)
    dW2, _ = grads_with_q(10.0)
    for a, b, c in zip(dW0, dW1, dW2):
        np.testing.assert_allclose(c - b, b - a, rtol=1e-9, atol=1e-12)


def test_variant_two_ignores_input_references():
    hs = small_hankel(seed=23)
    net = small_net("II", seed=24)
    samples = random_samples(4, 25)
    rng = np.random.default_rng(26)
    mangled = [s._replace(e_u=rng.standard_normal(N_U) * 100,
                          u_ref=rng.standard_normal(N_U * N_P) * 100)
               for s in samples]
    w = small_weights()
    assert loss(net, samples, hs, w) == loss(net, mangled, hs, w)
    g1, b1 = grad(net, samples, hs, w)
    g2, b2 = grad(net, mangled, hs, w)
    for a, b in zip(g1 + b1, g2 + b2):
        np.testing.assert_array_equal(a, b)


# ----------------------------------------------------------------- training

def grn_like_dataset(seed=27, length=60):
    rng = np.random.default_rng(seed)
    u = Trajectory(rng.uniform(-1, 1, (N_U, length)))
    y = Trajectory(np.cumsum(rng.standard_normal((N_Y, length)), axis=1) * 0.1)
    return build_dataset([(u, y)], T_INI, N_P), partition(
        u.slice(0, T_REC), y.slice(0, T_REC), T_INI, N_P)


def test_training_reduces_loss_and_is_deterministic():
    ds, hs = grn_like_dataset()
    w = small_weights()
    tc = TrainConfig(epochs=60, batch=16, learning_rate=1e-3, seed=5)
    net_a = small_net(seed=28)
    hist_a = train(net_a, ds, hs, w, tc)
    net_b = small_net(seed=28)
    train(net_b, ds, hs, w, tc)
    for Wa, Wb in zip(net_a.weights, net_b.weights):
        np.testing.assert_array_equal(Wa, Wb)
    assert len(hist_a.train_loss) == 60
    assert np.mean(hist_a.train_loss[-5:]) < np.mean(hist_a.train_loss[:5])


def test_zero_epochs_leaves_net_unchanged():
    ds, hs = grn_like_dataset()
    net = small_net(seed=29)
    before = [W.copy() for W in net.weights] + [b.copy() for b in net.biases]
    hist = train(net, ds, hs, small_weights(), TrainConfig(epochs=0))
    after = list(net.weights) + list(net.biases)
    for a, b in zip(before, after):
        np.testing.assert_array_equal(a, b)
    assert hist.train_loss == []


def test_divergence_raises_with_epoch_index():
    ds, hs = grn_like_dataset()
    net = small_net(seed=30)
    tc = TrainConfig(epochs=50, batch=8, learning_rate=1e160, seed=1)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(TrainingError) as exc:
            train(net, ds, hs, small_weights(), tc)
    assert isinstance(exc.value.epoch, int)


def test_validation_loss_logged_and_csv(tmp_path):
    ds, hs = grn_like_dataset()
    from deepc_lab.dataset import train_val_split
    tr, va = train_val_split(ds, 0.2, seed=3)
    net = small_net(seed=31)
    hist = train(net, tr, hs, small_weights(),
                 TrainConfig(epochs=4, batch=8, learning_rate=1e-3), val=va)
    assert len(hist.val_loss) == 4
    assert all(isinstance(v, float) for v in hist.val_loss)
    path = tmp_path / "log.csv"
    hist.write_csv(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,wall_ms"
    assert len(lines) == 5
    first = lines[1].split(",")
    assert float(first[1]) == hist.train_loss[0]
    assert float(first[2]) == hist.val_loss[0]


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=-1)
    with pytest.raises(ConfigError):
        TrainConfig(batch=0)
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0.0)


# -------------------------------------------------------------- persistence

def test_model_file_roundtrip(tmp_path):
    net = small_net(seed=32)
    net.weights[1][0, 0] = np.pi
    path = tmp_path / "model.json"
    net.save(path)
    back = OperatorNetwork.load(path)
    assert back.variant == net.variant
    assert back.layer_sizes == net.layer_sizes
    assert back.fingerprint == net.fingerprint
    for Wa, Wb in zip(net.weights, back.weights):
        np.testing.assert_array_equal(Wa, Wb)
    for ba, bb in zip(net.biases, back.biases):
        np.testing.assert_array_equal(ba, bb)


def test_fingerprint_guard_blocks_mismatched_pairing():
    net = OperatorNetwork.create("I", N_U, N_Y, T_INI, N_P, WIDTH)
    hs = small_hankel()
    net.check_fingerprint(hs)  # matching dims pass
    rng = np.random.default_rng(34)
    u = Trajectory(rng.standard_normal((N_U, T_REC + 1)))
    y = Trajectory(rng.standard_normal((N_Y, T_REC + 1)))
    other = partition(u, y, T_INI, N_P)
    with pytest.raises(ConfigError):
        net.check_fingerprint(other)


def test_network_validation():
    with pytest.raises(DimensionError):
        OperatorNetwork("I", [np.zeros((3, 2)), np.zeros((4, 4))],
                        [np.zeros(3), np.zeros(4)])
    with pytest.raises(DimensionError):
        OperatorNetwork("I", [np.array([[np.inf, 0.0]])], [np.zeros(1)])
    with pytest.raises(ConfigError):
        OperatorNetwork("X", [np.eye(2)], [np.zeros(2)])
