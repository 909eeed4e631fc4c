"""Two-level group distillation: attention-weighted peer targets and the losses built on them.

Shapes: peers are stacked on axis 1, so peer features are ``[batch, P, d]``
and peer predictions ``[batch, P, classes]`` with ``P = m - 1``. The leader
is always the last student.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, backward, cross_entropy, kl_divergence, kl_rows, ops, softmax_with_temperature

ABLATION_WEIGHT_KINDS = ("random", "mean", "identity_asymmetry", "self_only")


@dataclass
class AttentionProjector:
    """The two projections shared by all auxiliary peers (not tied)."""

    W_L: Tensor
    W_E: Tensor

    @classmethod
    def init(cls, feature_dim: int, proj_dim: int, rng: np.random.Generator) -> "AttentionProjector":
        # plain linear-layer bound: the ReLU-scaled one saturates the attention softmax at init
        bound = 1.0 / np.sqrt(feature_dim)
        W_L = Tensor(rng.uniform(-bound, bound, (feature_dim, proj_dim)), requires_grad=True, name="W_L")
        W_E = Tensor(rng.uniform(-bound, bound, (feature_dim, proj_dim)), requires_grad=True, name="W_E")
        return cls(W_L, W_E)

    @classmethod
    def identity(cls, feature_dim: int) -> "AttentionProjector":
        return cls(Tensor(np.eye(feature_dim)), Tensor(np.eye(feature_dim)))

    def parameters(self) -> list[Tensor]:
        return [self.W_L, self.W_E]


def stack_peers(tensors: Sequence[Tensor]) -> Tensor:
    """List of P tensors [batch, k] -> [batch, P, k]."""
    return ops.stack(list(tensors), axis=1)


def attention_weights(h: Tensor, proj: AttentionProjector) -> Tensor:
    """alpha[i, a, b] = softmax_b( (W_L^T h_a) . (W_E^T h_b) ) for each sample i."""
    if h.ndim != 3:
        raise ValueError(f"peer features must be [batch, peers, dim], got {h.shape}")
    if h.shape[1] < 2:
        raise ValueError("attention needs at least two auxiliary peers")
    if not np.all(np.isfinite(h.data)):
        raise ValueError("attention_weights: non-finite peer features")
    L = ops.matmul(h, proj.W_L)
    E = ops.matmul(h, proj.W_E)
    return ops.softmax(ops.matmul(L, ops.transpose(E)), axis=-1)


def ablation_weights(
    kind: str,
    batch: int,
    num_peers: int,
    rng: np.random.Generator | None = None,
    features: Tensor | None = None,
) -> Tensor:
    """Attention matrices for the ablations: random, mean, identity_asymmetry, self_only."""
    if num_peers < 2:
        raise ValueError("ablation weights need at least two auxiliary peers")
    P = num_peers
    if kind == "random":
        if rng is None:
            raise ValueError("random ablation weights need an rng")
        w = 1.0 - rng.random((batch, P, P))  # (0, 1]
        return Tensor(w / w.sum(axis=-1, keepdims=True))
    if kind == "mean":
        return Tensor(np.full((batch, P, P), 1.0 / P))
    if kind == "self_only":
        return Tensor(np.broadcast_to(np.eye(P), (batch, P, P)).copy())
    if kind == "identity_asymmetry":
        if features is None:
            raise ValueError("identity_asymmetry weights need peer features")
        return attention_weights(features, AttentionProjector.identity(features.shape[-1]))
    raise ValueError(f"unknown ablation kind {kind!r}; expected one of {ABLATION_WEIGHT_KINDS}")


def derive_peer_targets(alpha: Tensor, q_prime_peers: Tensor, detach: bool = True) -> Tensor:
    """t_a = sum_b alpha_ab q'_b, per sample. With ``detach`` only alpha carries gradient."""
    q = ops.detach(q_prime_peers) if detach else q_prime_peers
    return ops.matmul(alpha, q)


def derive_peer_targets_from_logits(alpha: Tensor, peer_logits: Tensor, T: float, detach: bool = True) -> Tensor:
    """Variant that mixes logits first and softens afterwards."""
    g = ops.detach(peer_logits) if detach else peer_logits
    mixed = ops.matmul(alpha, g)
    return ops.softmax(ops.scale(mixed, 1.0 / T), axis=-1)


def dis1_loss(targets: Tensor, q_prime_peers: Tensor) -> Tensor:
    """Sum over peers of the batch-mean KL(t_a || q'_a)."""
    if targets.shape[1] < 2:
        raise ValueError("first-level distillation needs at least two auxiliary peers")
    per_peer = kl_rows(targets, q_prime_peers)  # [batch, P]
    return ops.mean(ops.sum(per_peer, axis=1))


def leader_target(q_prime_peers: Tensor, detach: bool = True) -> Tensor:
    q = ops.detach(q_prime_peers) if detach else q_prime_peers
    return ops.mean(q, axis=1)


def dis2_loss(q_prime_peers: Tensor, q_prime_leader: Tensor, detach: bool = True) -> Tensor:
    return kl_divergence(leader_target(q_prime_peers, detach), q_prime_leader)


@dataclass
class LossBreakdown:
    ce: list[float]
    dis1: float
    dis2: float
    kd: float
    distill_weight: float
    total: float

    @property
    def ce_sum(self) -> float:
        return float(sum(self.ce))


def okddip_total_loss(
    out,
    labels,
    alpha: Tensor | None,
    T: float,
    rampup: float,
    detach_targets: bool = True,
    aggregate_logits: bool = False,
    two_level: bool = True,
) -> tuple[Tensor, LossBreakdown]:
    """Cross-entropy of every trained student plus ``rampup * T^2 * (dis1 + dis2)``.

    ``out`` is a :class:`~okddip.models.GroupForwardOutput`. With
    ``two_level=False`` the leader is left out entirely (no CE, no dis2).
    ``alpha=None`` drops the first-level term.
    """
    if not T > 0:
        raise ValueError("T must be positive")
    if not 0.0 <= rampup <= 1.0:
        raise ValueError(f"rampup must lie in [0, 1], got {rampup}")
    P = out.m - 1
    trained = range(out.m) if two_level else range(P)
    ces = [cross_entropy(out.q[a], labels) for a in trained]
    peers_qp = stack_peers(out.q_prime[:P])

    parts: list[Tensor] = []
    d1 = d2 = 0.0
    if alpha is not None:
        if aggregate_logits:
            targets = derive_peer_targets_from_logits(alpha, stack_peers(out.logits[:P]), T, detach_targets)
        else:
            targets = derive_peer_targets(alpha, peers_qp, detach_targets)
        l1 = dis1_loss(targets, peers_qp)
        parts.append(l1)
        d1 = l1.item()
    if two_level:
        l2 = dis2_loss(peers_qp, out.q_prime[-1], detach_targets)
        parts.append(l2)
        d2 = l2.item()

    weight = rampup * T * T
    ce_total = ops.add_n(ces)
    # a zero weight keeps the distillation graph out entirely, so the attention
    # projections get no gradient (and hence no weight-decay step) that epoch
    total = ops.add(ce_total, ops.scale(ops.add_n(parts), weight)) if parts and weight else ce_total
    return total, LossBreakdown([c.item() for c in ces], d1, d2, 0.0, weight, total.item())


def kd_term(q_prime: Tensor, teacher_logits, T: float) -> Tensor:
    """T^2 * KL(softmax(teacher / T) || q'); the teacher is a constant."""
    teacher = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, dtype=float)
    t = softmax_with_temperature(Tensor(teacher), T)
    return ops.scale(kl_divergence(t, q_prime), T * T)


def kd_teacher_loss(student_q: Tensor, student_q_prime: Tensor, teacher_logits, labels, T: float) -> Tensor:
    return ops.add(cross_entropy(student_q, labels), kd_term(student_q_prime, teacher_logits, T))


def mse_approximation_gap(logits: np.ndarray, targets: np.ndarray, T: float) -> float:
    """Relative gap between the T^2-scaled KL gradient and the scaled MSE-surrogate gradient.

    Both gradients are taken with respect to zero-meaned ``logits``. For large
    T the softmax Jacobian acting on zero-sum vectors tends to ``I / (C T)``,
    so ``C T^2`` times the gradient of ``0.5 * ||q' - t||^2`` approaches the
    gradient of ``T^2 * KL(t || q')``. Returned as
    ``||g_kl - g_mse|| / ||g_kl||`` over the whole batch (0 when both vanish).
    """
    logits = np.asarray(logits, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if np.abs(logits.mean(axis=-1)).max() > 1e-9:
        raise ValueError("logits must be zero-meaned per row")
    C = logits.shape[-1]

    g = Tensor(logits.copy(), requires_grad=True)
    backward(ops.scale(kl_divergence(Tensor(targets), softmax_with_temperature(g, T)), T * T))
    g_kl = g.grad

    g = Tensor(logits.copy(), requires_grad=True)
    diff = ops.sub(softmax_with_temperature(g, T), Tensor(targets))
    backward(ops.scale(ops.mean(ops.sum(ops.mul(diff, diff), axis=-1)), 0.5))
    g_mse = g.grad * (C * T * T)

    norm = np.linalg.norm(g_kl)
    if norm < 1e-12:
        # coincident predictions and targets: both gradients vanish up to rounding
        return 0.0 if np.linalg.norm(g_mse) < 1e-12 else float("inf")
    return float(np.linalg.norm(g_kl - g_mse) / norm)
