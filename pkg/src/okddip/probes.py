"""Property probes shared by ``okddip selftest`` and the acceptance tests.

Every probe returns a :class:`ProbeResult`; none of them raise on a failed
property, so callers decide whether to print, exit or assert.
"""
from __future__ import annotations

import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import distillation as D
from .autodiff import Tensor, backward, cross_entropy, finite_difference_check, kl_rows, no_grad, ops
from .autodiff import softmax_with_temperature
from .metrics import csv_text
from .models import StudentGroupConfig, build_group, forward_group, mlp_config
from .training import TrainConfig, batch_loss, train_run

GRAD_TOL = 1e-4
MSE_GAP_TOL = 0.05
DETERMINISM_TOL = 1e-9


@dataclass
class ProbeResult:
    name: str
    passed: bool
    value: float
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


# --- gradient correctness ----------------------------------------------------

def micro_group(seed: int = 0):
    """m=3 branch group on 3 classes with a ReLU trunk, small enough for finite differences."""
    cfg = StudentGroupConfig(m=3, input_shape=(3,), num_classes=3, trunk_spec=("linear:4", "relu"),
                             branch_spec=("linear:4", "relu"), feature_dim=4, proj_dim=3, seed=seed)
    group = build_group(cfg)
    rng = np.random.default_rng(seed + 100)
    # zero biases over dead units sit exactly on a ReLU kink, where central differences disagree by design
    for p in group.parameters():
        p.data = p.data + 0.3 * rng.standard_normal(p.shape)
    x = rng.standard_normal((2, 3))
    y = np.array([0, 2])
    return group, x, y


def full_loss_discrepancy(detach: bool, seed: int = 0, T: float = 3.0, rampup: float = 1.0) -> float:
    """Finite-difference check of the complete group loss over every parameter, projector included.

    For detached targets the differenced function freezes the targets at the
    unperturbed parameters, which is exactly what a stop-gradient means.
    """
    group, x, y = micro_group(seed)
    P = group.m - 1
    params = group.parameters()

    def loss(_):
        out = forward_group(group, x, T)
        alpha = D.attention_weights(D.stack_peers(out.features[:P]), group.projector)
        return D.okddip_total_loss(out, y, alpha, T, rampup, detach_targets=detach)[0]

    numeric = None
    if detach:
        with no_grad():
            frozen = Tensor(D.stack_peers(forward_group(group, x, T).q_prime[:P]).data)

        def numeric(_):
            out = forward_group(group, x, T)
            peers = D.stack_peers(out.q_prime[:P])
            alpha = D.attention_weights(D.stack_peers(out.features[:P]), group.projector)
            d1 = D.dis1_loss(D.derive_peer_targets(alpha, frozen, detach=False), peers)
            d2 = D.dis2_loss(frozen, out.q_prime[-1], detach=False)
            ce = ops.add_n([cross_entropy(q, y) for q in out.q])
            return ops.add(ce, ops.scale(ops.add(d1, d2), rampup * T * T))

    return finite_difference_check(loss, params, numeric_f=numeric)


def probe_gradients() -> ProbeResult:
    gaps = {d: full_loss_discrepancy(d) for d in (True, False)}
    worst = max(gaps.values())
    detail = ", ".join(f"detach_targets={d}: {g:.2e}" for d, g in gaps.items()) + f" (tol {GRAD_TOL:g})"
    return ProbeResult("gradient correctness", worst < GRAD_TOL, worst, detail)


# --- attention -----------------------------------------------------------------

def probe_attention(draws: int = 1000, seed: int = 0) -> ProbeResult:
    rng = np.random.default_rng(seed)
    worst_row = 0.0
    min_entry = np.inf
    asym = 0
    for _ in range(draws):
        P, d = int(rng.integers(2, 6)), int(rng.integers(2, 9))
        proj = D.AttentionProjector.init(d, int(rng.integers(1, 9)), rng)
        h = rng.standard_normal((2, P, d)) * rng.uniform(0.1, 3.0)
        alpha = D.attention_weights(Tensor(h), proj).data
        worst_row = max(worst_row, float(np.abs(alpha.sum(axis=-1) - 1.0).max()))
        min_entry = min(min_entry, float(alpha.min()))
        asym += bool(np.any(np.abs(alpha - np.swapaxes(alpha, 1, 2)) > 1e-12))
    passed = worst_row <= 1e-9 and min_entry > 0 and asym >= 1
    detail = (f"{draws} draws, max |row sum - 1| = {worst_row:.1e}, min entry = {min_entry:.2e}, "
              f"asymmetric draws = {asym}")
    return ProbeResult("attention invariants", passed, worst_row, detail)


# --- degenerate aggregations ------------------------------------------------------

def uniform_vs_mean_gap(seed: int = 0) -> float:
    group = build_group(mlp_config(6, 4, m=4, seed=seed))
    group.projector.W_L.data[:] = 0.0  # zero scores make every attention row uniform
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((8, 6)), rng.integers(0, 4, size=8)
    l1, _ = batch_loss(group, x, y, TrainConfig(method="okddip"), 0.6)
    l2, _ = batch_loss(group, x, y, TrainConfig(method="ablation:mean"), 0.6)
    return abs(l1.item() - l2.item())


def self_only_coupling(seed: int = 0) -> float:
    """Largest gradient any peer's parameters receive from another peer's first-level term."""
    group = build_group(mlp_config(6, 4, m=4, mode="network_based", seed=seed))
    x = np.random.default_rng(seed).standard_normal((8, 6))
    P = group.m - 1
    worst = 0.0
    for detach in (True, False):
        for a in range(P):
            for p in group.parameters():
                p.grad = None
            out = forward_group(group, x, 3.0)
            qp = D.stack_peers(out.q_prime[:P])
            t = D.derive_peer_targets(D.ablation_weights("self_only", len(x), P), qp, detach)
            backward(ops.mean(ops.take(kl_rows(t, qp), a, axis=1)))
            for b in range(P):
                if b == a:
                    continue
                for p in group.student_parameters(b):
                    if p.grad is not None:
                        worst = max(worst, float(np.abs(p.grad).max()))
    return worst


def probe_degenerate() -> ProbeResult:
    gap = uniform_vs_mean_gap()
    coupling = self_only_coupling()
    passed = gap == 0.0 and coupling == 0.0
    detail = f"uniform-vs-mean loss gap = {gap:.1e}, self-only cross-peer gradient = {coupling:.1e}"
    return ProbeResult("degenerate aggregations", passed, max(gap, coupling), detail)


# --- KL vs MSE ---------------------------------------------------------------------

def pinned_probe_logits(seed: int = 0, batch: int = 64, classes: int = 4):
    """Zero-meaned standard-normal student and target logits."""
    r = np.random.default_rng(seed)
    z = r.standard_normal((batch, classes))
    v = r.standard_normal((batch, classes))
    return z - z.mean(axis=1, keepdims=True), v - v.mean(axis=1, keepdims=True)


def mse_gaps(temperatures=(5.0, 20.0, 80.0), seed: int = 0) -> dict[float, float]:
    z, v = pinned_probe_logits(seed)
    out = {}
    for T in temperatures:
        t = softmax_with_temperature(Tensor(v), T).data
        out[T] = D.mse_approximation_gap(z, t, T)
    return out


def probe_mse() -> ProbeResult:
    gaps = mse_gaps()
    vals = list(gaps.values())
    monotone = all(b < a for a, b in zip(vals, vals[1:]))
    passed = gaps[20.0] < MSE_GAP_TOL and monotone
    detail = ", ".join(f"T={T:g}: {g:.4f}" for T, g in gaps.items()) + f" (tol {MSE_GAP_TOL:g} at T=20)"
    return ProbeResult("KL vs MSE gradient gap", passed, gaps[20.0], detail)


# --- loss algebra --------------------------------------------------------------------

def loss_algebra_gaps(seed: int = 0) -> tuple[float, float]:
    group, x, y = micro_group(seed)
    out = forward_group(group, x, 3.0)
    P = group.m - 1
    alpha = D.attention_weights(D.stack_peers(out.features[:P]), group.projector)
    total0, _ = D.okddip_total_loss(out, y, alpha, 3.0, 0.0)
    ce_sum = ops.add_n([cross_entropy(q, y) for q in out.q]).item()
    total1, parts = D.okddip_total_loss(out, y, alpha, 3.0, 1.0)
    distill = (parts.dis1 + parts.dis2) * 9.0
    return abs(total0.item() - ce_sum), abs((total1.item() - ce_sum) - distill) + abs(parts.distill_weight - 9.0)


def probe_loss_algebra() -> ProbeResult:
    g0, g9 = loss_algebra_gaps()
    # the factor-9 residual can only be float rounding of the final additions
    passed = g0 == 0.0 and g9 < 1e-14
    detail = f"rampup=0 total - CE sum = {g0:.1e}, T=3 factor residual = {g9:.1e}"
    return ProbeResult("loss algebra", passed, max(g0, g9), detail)


# --- determinism -----------------------------------------------------------------------

def determinism_gap(seed: int = 3) -> tuple[float, bool]:
    train, test = data_mod.synth_gaussian_mixture(4, 40, 6, 2.0, seed)

    def run():
        group = build_group(mlp_config(6, 4, m=3, seed=seed))
        return train_run(group, train, test, TrainConfig(epochs=3, batch_size=32, seed=seed))[1]

    r1, r2 = run(), run()
    worst = max(abs(a[c] - b[c]) for a, b in zip(r1.rows, r2.rows) for c in r1.columns)
    return worst, csv_text(r1) == csv_text(r2)


def probe_determinism() -> ProbeResult:
    worst, same_bytes = determinism_gap()
    passed = worst <= DETERMINISM_TOL
    return ProbeResult("determinism", passed, worst,
                       f"max report difference = {worst:.1e}, byte-identical CSV = {same_bytes}")


# --- file formats ------------------------------------------------------------------------

def _expect(kind, fn) -> bool:
    try:
        fn()
    except kind:
        return True
    except Exception:  # noqa: BLE001 - any other exception kind is a failure here
        return False
    return False


def format_checks(root: Path) -> dict[str, bool]:
    rng = np.random.default_rng(0)
    checks = {}
    imgs = rng.integers(0, 256, size=(3, 5, 4), dtype=np.uint8)
    labels = np.array([2, 0, 1], dtype=np.uint8)
    ip, lp = root / "img.idx", root / "lab.idx"
    data_mod.write_idx(ip, imgs)
    data_mod.write_idx(lp, labels)
    first = ip.read_bytes()
    data_mod.write_idx(ip, data_mod.read_idx(ip))
    checks["idx images round trip"] = ip.read_bytes() == first and np.array_equal(data_mod.read_idx(ip), imgs)
    checks["idx labels round trip"] = np.array_equal(data_mod.read_idx(lp), labels)

    cimgs = rng.integers(0, 256, size=(2, 3, 32, 32), dtype=np.uint8)
    cp = root / "batch.bin"
    data_mod.write_cifar_binary(cp, cimgs, np.array([7, 3]))
    first = cp.read_bytes()
    pix, lab = data_mod.read_cifar_binary(cp)
    data_mod.write_cifar_binary(cp, pix, lab)
    checks["cifar round trip"] = cp.read_bytes() == first and np.array_equal(pix, cimgs)

    bad = root / "bad.idx"
    bad.write_bytes(b"\x00\x00\x08\x02\x00\x00\x00\x01\x00")
    checks["bad magic"] = _expect(data_mod.BadMagicError, lambda: data_mod.read_idx(bad))
    trunc = root / "trunc.idx"
    trunc.write_bytes(first[:0] + b"\x00\x00\x08\x01\x00\x00\x00\x05\x01\x02")
    checks["truncated"] = _expect(data_mod.TruncatedFileError, lambda: data_mod.read_idx(trunc))
    lp2 = root / "lab2.idx"
    data_mod.write_idx(lp2, labels[:2])
    checks["count mismatch"] = _expect(data_mod.CountMismatchError, lambda: data_mod.load_idx(ip, lp2, 3))
    cbad = root / "bad.bin"
    cbad.write_bytes(b"\x00" * 3072)
    checks["cifar length"] = _expect(data_mod.DataFormatError, lambda: data_mod.read_cifar_binary(cbad))
    return checks


def probe_formats() -> ProbeResult:
    with tempfile.TemporaryDirectory() as tmp:
        checks = format_checks(Path(tmp))
    failed = [k for k, ok in checks.items() if not ok]
    detail = f"{len(checks) - len(failed)}/{len(checks)} fixture checks" + (f", failed: {failed}" if failed else "")
    return ProbeResult("format fidelity", not failed, float(len(failed)), detail)


PROBES = (
    probe_gradients,
    probe_attention,
    probe_degenerate,
    probe_mse,
    probe_loss_algebra,
    probe_determinism,
    probe_formats,
)


def run_all() -> list[ProbeResult]:
    return [p() for p in PROBES]
