import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from okddip.autodiff import Tensor, backward, finite_difference_check, softmax_with_temperature
from okddip.distillation import (
    AttentionProjector,
    ablation_weights,
    attention_weights,
    derive_peer_targets,
    derive_peer_targets_from_logits,
    dis1_loss,
    dis2_loss,
    kd_teacher_loss,
    mse_approximation_gap,
    okddip_total_loss,
    stack_peers,
)
from okddip.models import GroupForwardOutput, build_group, forward_group, mlp_config


# --- plain-python oracles --------------------------------------------------

def py_softmax(row, T=1.0):
    mx = max(row)
    e = [math.exp((v - mx) / T) for v in row]
    s = sum(e)
    return [v / s for v in e]


def py_kl(t, q):
    return sum(ti * math.log(ti / qi) for ti, qi in zip(t, q) if ti > 0)


def to_output(logits, T, features=None):
    logits = [Tensor(np.array(g, dtype=float), requires_grad=True) for g in logits]
    feats = features or [Tensor(np.zeros((len(logits[0].data), 1))) for _ in logits]
    return GroupForwardOutput(
        feats, logits,
        [softmax_with_temperature(g, 1.0) for g in logits],
        [softmax_with_temperature(g, T) for g in logits],
    )


# --- attention -------------------------------------------------------------

def test_identical_features_give_uniform_rows():
    rng = np.random.default_rng(0)
    proj = AttentionProjector.init(5, 5, rng)
    h = np.repeat(rng.standard_normal((3, 1, 5)), 4, axis=1)
    alpha = attention_weights(Tensor(h), proj).data
    np.testing.assert_allclose(alpha, 0.25, atol=1e-15)


@pytest.mark.parametrize("c", [0.5, 1.0, 2.0])
def test_identity_projection_orthonormal_features(c):
    h = Tensor(np.array([[[c, 0.0], [0.0, c]]]))
    alpha = attention_weights(h, AttentionProjector.identity(2)).data[0]
    scores = [[c * c, 0.0], [0.0, c * c]]
    expected = [[math.exp(s) / sum(math.exp(v) for v in row) for s in row] for row in scores]
    np.testing.assert_allclose(alpha, expected, rtol=1e-14)


def test_generic_attention_is_asymmetric():
    rng = np.random.default_rng(1)
    proj = AttentionProjector.init(6, 6, rng)
    h = rng.standard_normal((1, 3, 6))
    alpha = attention_weights(Tensor(h), proj).data[0]
    # brute-force evaluation of the normalized embedded-Gaussian weights
    L, E = h[0] @ proj.W_L.data, h[0] @ proj.W_E.data
    brute = np.array([[math.exp(L[a] @ E[b]) for b in range(3)] for a in range(3)])
    brute /= brute.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(alpha, brute, rtol=1e-12)
    assert any(abs(brute[a, b] - brute[b, a]) > 1e-6 for a in range(3) for b in range(3))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 5.0))
def test_attention_rows_stochastic_and_positive(seed, c):
    rng = np.random.default_rng(seed)
    proj = AttentionProjector.init(4, 4, rng)
    h = c * rng.standard_normal((3, 3, 4))
    alpha = attention_weights(Tensor(h), proj).data
    np.testing.assert_allclose(alpha.sum(axis=-1), 1.0, atol=1e-9)
    assert np.all(alpha > 0)


def test_attention_rejects_nonfinite_and_single_peer():
    proj = AttentionProjector.identity(2)
    with pytest.raises(ValueError):
        attention_weights(Tensor(np.full((1, 2, 2), np.nan)), proj)
    with pytest.raises(ValueError):
        attention_weights(Tensor(np.ones((1, 1, 2))), proj)


def test_attention_gradcheck_all_inputs():
    rng = np.random.default_rng(2)
    proj = AttentionProjector.init(3, 2, rng)
    h = Tensor(rng.standard_normal((2, 3, 3)))
    w = Tensor(rng.standard_normal((2, 3, 3)))
    from okddip.autodiff import ops

    def f(ps):
        return ops.sum(ops.mul(attention_weights(ps[0], AttentionProjector(ps[1], ps[2])), w))

    assert finite_difference_check(f, [h, proj.W_L, proj.W_E]) < 1e-4


# --- targets ---------------------------------------------------------------

def test_uniform_alpha_targets_are_peer_mean():
    q = np.random.default_rng(3).dirichlet(np.ones(4), size=(2, 3))
    t = derive_peer_targets(ablation_weights("mean", 2, 3), Tensor(q)).data
    np.testing.assert_allclose(t, np.repeat(q.mean(axis=1, keepdims=True), 3, axis=1), rtol=1e-14)


def test_self_alpha_targets_are_own_predictions():
    q = np.random.default_rng(4).dirichlet(np.ones(4), size=(2, 3))
    t = derive_peer_targets(ablation_weights("self_only", 2, 3), Tensor(q)).data
    np.testing.assert_array_equal(t, q)


def test_hand_targets_three_peers():
    alpha = [[0.5, 0.25, 0.25], [0.1, 0.8, 0.1], [0.0, 0.3, 0.7]]
    q = [[0.6, 0.4], [0.2, 0.8], [0.5, 0.5]]
    expected = [[sum(alpha[a][b] * q[b][j] for b in range(3)) for j in range(2)] for a in range(3)]
    t = derive_peer_targets(Tensor(np.array([alpha])), Tensor(np.array([q]))).data[0]
    np.testing.assert_allclose(t, expected, rtol=1e-15)


@given(st.integers(0, 2**31 - 1))
def test_targets_are_distributions(seed):
    rng = np.random.default_rng(seed)
    alpha = rng.dirichlet(np.ones(3), size=(2, 3))
    q = rng.dirichlet(np.ones(5), size=(2, 3))
    t = derive_peer_targets(Tensor(alpha), Tensor(q)).data
    assert np.all(t >= 0)
    np.testing.assert_allclose(t.sum(axis=-1), 1.0, atol=1e-12)


def test_detached_targets_pass_gradient_only_to_alpha():
    rng = np.random.default_rng(5)
    alpha = Tensor(rng.dirichlet(np.ones(2), size=(1, 2)), requires_grad=True)
    q = Tensor(rng.dirichlet(np.ones(3), size=(1, 2)), requires_grad=True)
    from okddip.autodiff import ops

    backward(ops.sum(derive_peer_targets(alpha, q, detach=True)))
    assert alpha.grad is not None and q.grad is None
    alpha.grad = None
    backward(ops.sum(derive_peer_targets(alpha, q, detach=False)))
    assert q.grad is not None


def test_logit_aggregation_variant():
    alpha = np.array([[[0.25, 0.75], [0.5, 0.5]]])
    g = np.array([[[1.0, -1.0], [0.0, 2.0]]])
    t = derive_peer_targets_from_logits(Tensor(alpha), Tensor(g), 3.0).data[0]
    for a in range(2):
        mixed = [sum(alpha[0, a, b] * g[0, b, j] for b in range(2)) for j in range(2)]
        np.testing.assert_allclose(t[a], py_softmax(mixed, 3.0), rtol=1e-14)


# --- losses ----------------------------------------------------------------

def test_dis1_zero_for_identical_peers():
    q = np.tile(np.array([0.2, 0.3, 0.5]), (2, 3, 1))
    alpha = np.random.default_rng(6).dirichlet(np.ones(3), size=(2, 3))
    targets = derive_peer_targets(Tensor(alpha), Tensor(q))
    assert abs(dis1_loss(targets, Tensor(q)).item()) < 1e-15


def test_dis1_hand_two_peers():
    q = [[0.7, 0.3], [0.4, 0.6]]
    alpha = [[0.6, 0.4], [0.2, 0.8]]
    t = [[sum(alpha[a][b] * q[b][j] for b in range(2)) for j in range(2)] for a in range(2)]
    expected = py_kl(t[0], q[0]) + py_kl(t[1], q[1])
    targets = derive_peer_targets(Tensor(np.array([alpha])), Tensor(np.array([q])))
    assert dis1_loss(targets, Tensor(np.array([q]))).item() == pytest.approx(expected, rel=1e-13)


@given(st.integers(0, 2**31 - 1))
def test_dis1_nonnegative_and_positive_when_peers_differ(seed):
    rng = np.random.default_rng(seed)
    q = rng.dirichlet(np.ones(4), size=(3, 3))
    alpha = ablation_weights("random", 3, 3, rng=rng)
    loss = dis1_loss(derive_peer_targets(alpha, Tensor(q)), Tensor(q)).item()
    assert loss > 0


def test_dis2_zero_when_leader_matches_mean():
    q = np.random.default_rng(7).dirichlet(np.ones(3), size=(2, 3))
    assert abs(dis2_loss(Tensor(q), Tensor(q.mean(axis=1))).item()) < 1e-15


def test_dis2_single_peer_degenerates():
    qp = np.array([[[0.3, 0.7]]])
    leader = np.array([[0.6, 0.4]])
    assert dis2_loss(Tensor(qp), Tensor(leader)).item() == pytest.approx(py_kl([0.3, 0.7], [0.6, 0.4]))


def test_dis2_hand_three_peers():
    peers = [[0.5, 0.2, 0.3], [0.1, 0.1, 0.8], [0.3, 0.4, 0.3]]
    leader = [0.2, 0.5, 0.3]
    mean = [sum(p[j] for p in peers) / 3 for j in range(3)]
    val = dis2_loss(Tensor(np.array([peers])), Tensor(np.array([leader]))).item()
    assert val == pytest.approx(py_kl(mean, leader), rel=1e-13)


MICRO_LOGITS = [
    [[1.0, -0.5], [0.2, 0.3]],
    [[-0.4, 0.9], [1.5, -1.0]],
    [[0.0, 0.7], [-0.3, 0.1]],
]
MICRO_ALPHA = [[[0.7, 0.3], [0.45, 0.55]], [[0.2, 0.8], [0.6, 0.4]]]
MICRO_LABELS = [0, 1]


def hand_total(logits, alpha, labels, T, rampup):
    m, B = len(logits), len(labels)
    q = [[py_softmax(logits[a][i]) for i in range(B)] for a in range(m)]
    qp = [[py_softmax(logits[a][i], T) for i in range(B)] for a in range(m)]
    ce = sum(-sum(math.log(q[a][i][labels[i]]) for i in range(B)) / B for a in range(m))
    P = m - 1
    dis1 = 0.0
    for a in range(P):
        acc = 0.0
        for i in range(B):
            t = [sum(alpha[i][a][b] * qp[b][i][j] for b in range(P)) for j in range(2)]
            acc += py_kl(t, qp[a][i])
        dis1 += acc / B
    dis2 = 0.0
    for i in range(B):
        tm = [sum(qp[b][i][j] for b in range(P)) / P for j in range(2)]
        dis2 += py_kl(tm, qp[m - 1][i]) / B
    return ce + rampup * T * T * (dis1 + dis2), ce, dis1, dis2


@pytest.mark.parametrize("rampup", [0.0, 0.3, 1.0])
def test_total_loss_micro_instance(rampup):
    out = to_output(MICRO_LOGITS, 3.0)
    total, parts = okddip_total_loss(out, MICRO_LABELS, Tensor(np.array(MICRO_ALPHA)), 3.0, rampup)
    exp_total, ce, d1, d2 = hand_total(MICRO_LOGITS, MICRO_ALPHA, MICRO_LABELS, 3.0, rampup)
    assert total.item() == pytest.approx(exp_total, rel=1e-13)
    assert parts.ce_sum == pytest.approx(ce, rel=1e-13)
    assert parts.dis1 == pytest.approx(d1, rel=1e-12)
    assert parts.dis2 == pytest.approx(d2, rel=1e-12)


def test_total_loss_rampup_zero_is_ce_sum_exactly():
    out = to_output(MICRO_LOGITS, 3.0)
    total, parts = okddip_total_loss(out, MICRO_LABELS, Tensor(np.array(MICRO_ALPHA)), 3.0, 0.0)
    from okddip.autodiff import cross_entropy, ops

    ce_sum = ops.add_n([cross_entropy(q, MICRO_LABELS) for q in out.q]).item()
    assert total.item() == ce_sum


def test_total_loss_factor_nine_at_T3():
    out = to_output(MICRO_LOGITS, 3.0)
    total, parts = okddip_total_loss(out, MICRO_LABELS, Tensor(np.array(MICRO_ALPHA)), 3.0, 1.0)
    assert parts.distill_weight == 9.0
    assert total.item() == pytest.approx(parts.ce_sum + 9.0 * (parts.dis1 + parts.dis2), rel=1e-14)


def test_total_loss_validates():
    out = to_output(MICRO_LOGITS, 3.0)
    with pytest.raises(ValueError):
        okddip_total_loss(out, MICRO_LABELS, None, 3.0, 1.5)
    with pytest.raises(ValueError):
        okddip_total_loss(out, MICRO_LABELS, None, 0.0, 0.5)


def test_two_level_off_drops_leader():
    out = to_output(MICRO_LOGITS, 3.0)
    _, parts = okddip_total_loss(out, MICRO_LABELS, Tensor(np.array(MICRO_ALPHA)), 3.0, 1.0, two_level=False)
    assert len(parts.ce) == 2 and parts.dis2 == 0.0
    backward(_)
    assert out.logits[2].grad is None


def test_leader_gets_no_dis1_gradient():
    out = to_output(MICRO_LOGITS, 3.0)
    from okddip.autodiff import ops

    targets = derive_peer_targets(Tensor(np.array(MICRO_ALPHA)), stack_peers(out.q_prime[:2]))
    backward(dis1_loss(targets, stack_peers(out.q_prime[:2])))
    assert out.logits[2].grad is None
    assert out.logits[0].grad is not None


# --- teacher ---------------------------------------------------------------

def test_kd_equal_logits_reduces_to_ce():
    g = np.array([[0.3, -1.2, 2.0]])
    q = softmax_with_temperature(Tensor(g), 1.0)
    qp = softmax_with_temperature(Tensor(g), 4.0)
    from okddip.autodiff import cross_entropy

    assert kd_teacher_loss(q, qp, g, [2], 4.0).item() == pytest.approx(cross_entropy(q, [2]).item(), abs=1e-15)


def test_kd_hand_two_classes():
    s, te, T = [0.5, -0.5], [2.0, 0.0], 2.0
    q, qp, t = py_softmax(s), py_softmax(s, T), py_softmax(te, T)
    expected = -math.log(q[1]) + T * T * py_kl(t, qp)
    val = kd_teacher_loss(Tensor(np.array([q])), Tensor(np.array([qp])), np.array([te]), [1], T).item()
    assert val == pytest.approx(expected, rel=1e-13)


def test_kd_T1_multiplier_is_one():
    s, te = [0.1, 0.4], [1.0, -1.0]
    q = py_softmax(s)
    expected = -math.log(q[0]) + py_kl(py_softmax(te), q)
    val = kd_teacher_loss(Tensor(np.array([q])), Tensor(np.array([q])), np.array([te]), [0], 1.0).item()
    assert val == pytest.approx(expected, rel=1e-13)


# --- ablation weights ------------------------------------------------------

def test_ablation_mean_and_self():
    np.testing.assert_array_equal(ablation_weights("mean", 1, 3).data[0], np.full((3, 3), 1 / 3))
    np.testing.assert_array_equal(ablation_weights("self_only", 2, 3).data[1], np.eye(3))


def test_ablation_random_seeded():
    a = ablation_weights("random", 4, 3, rng=np.random.default_rng(11)).data
    b = ablation_weights("random", 4, 3, rng=np.random.default_rng(11)).data
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-9)
    assert np.all(a > 0)


def test_ablation_identity_asymmetry_row_stochastic():
    h = Tensor(np.random.default_rng(12).standard_normal((2, 3, 4)))
    a = ablation_weights("identity_asymmetry", 2, 3, features=h).data
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-9)


def test_ablation_unknown_kind():
    with pytest.raises(ValueError, match="unknown ablation kind"):
        ablation_weights("median", 1, 3)


def test_self_only_has_no_cross_peer_coupling():
    """With one-hot self attention peer b's parameters get nothing from peer a's term."""
    g = build_group(mlp_config(5, 3, m=4, mode="network_based", seed=3))
    x = np.random.default_rng(13).standard_normal((6, 5))
    out = forward_group(g, x, 3.0)
    qp = stack_peers(out.q_prime[:3])
    from okddip.autodiff import kl_rows, ops

    targets = derive_peer_targets(ablation_weights("self_only", 6, 3), qp, detach=False)
    # term of peer 0 only
    backward(ops.mean(ops.take(kl_rows(targets, qp), 0, axis=1)))
    for b in (1, 2):
        assert all(p.grad is None or not np.any(p.grad) for p in g.student_parameters(b))


# --- KL vs MSE probe -------------------------------------------------------

def _probe_logits(seed, batch=64, C=4):
    r = np.random.default_rng(seed)
    z = r.standard_normal((batch, C))
    v = r.standard_normal((batch, C))
    return z - z.mean(axis=1, keepdims=True), v - v.mean(axis=1, keepdims=True)


def test_mse_gap_zero_for_identical():
    z, _ = _probe_logits(0)
    t = softmax_with_temperature(Tensor(z), 20.0).data
    assert mse_approximation_gap(z, t, 20.0) == 0.0


def test_mse_gap_matches_closed_form():
    # closed form: dKL/dz = T(q'-t); dMSE/dz = J^T (q'-t), J = (diag q' - q'q'^T)/T
    z, v = _probe_logits(1)
    T, C, B = 20.0, 4, 64
    q = softmax_with_temperature(Tensor(z), T).data
    t = softmax_with_temperature(Tensor(v), T).data
    r = q - t
    g_kl = T * r / B
    g_mse = (q * r - q * (q * r).sum(axis=1, keepdims=True)) / T / B * C * T * T
    expected = np.linalg.norm(g_kl - g_mse) / np.linalg.norm(g_kl)
    assert mse_approximation_gap(z, t, T) == pytest.approx(expected, rel=1e-9)


def test_mse_gap_below_five_percent_at_T20():
    z, v = _probe_logits(0)
    t = softmax_with_temperature(Tensor(v), 20.0).data
    assert mse_approximation_gap(z, t, 20.0) < 0.05


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mse_gap_shrinks_with_temperature(seed):
    z, v = _probe_logits(seed, batch=8)
    gaps = [mse_approximation_gap(z, softmax_with_temperature(Tensor(v), T).data, T) for T in (5.0, 20.0, 80.0)]
    assert gaps[0] > gaps[1] > gaps[2]


def test_mse_gap_requires_zero_mean():
    with pytest.raises(ValueError):
        mse_approximation_gap(np.array([[1.0, 2.0]]), np.array([[0.5, 0.5]]), 20.0)
