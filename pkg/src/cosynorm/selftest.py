"""Numeric self-checks runnable from the CLI: CTC oracle agreement,
gradient integrity, and rotary-position identities."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .ctc import ctc_brute_force, ctc_feasible, ctc_loss
from .layers import apply_rope
from .seeding import derive_rng


def _check_ctc_oracle(log) -> bool:
    rng = derive_rng(0, "selftest-ctc")
    worst = 0.0
    for _ in range(60):
        t_len = int(rng.integers(1, 7))
        vocab = int(rng.integers(2, 5))
        n_labels = int(rng.integers(0, 4))
        logits = rng.standard_normal((t_len, vocab))
        lattice = logits - np.log(np.exp(logits - logits.max(1, keepdims=True))
                                  .sum(1, keepdims=True)) - logits.max(1, keepdims=True)
        labels = list(rng.integers(1, vocab, n_labels))
        a = ctc_loss(lattice, labels).loss
        b = ctc_brute_force(lattice, labels)
        if np.isinf(a) and np.isinf(b):
            continue
        worst = max(worst, abs(a - b))
    ok = worst < 1e-6
    log(f"ctc oracle agreement: max |diff| {worst:.2e}  {'ok' if ok else 'FAIL'}")
    return ok


def _check_gradients(log) -> bool:
    rng = derive_rng(0, "selftest-grad")
    w1 = ad.Parameter("w1", rng.standard_normal((4, 6)))
    b1 = ad.Parameter("b1", rng.standard_normal(6))
    w2 = ad.Parameter("w2", rng.standard_normal((6, 1)))
    x = rng.standard_normal((5, 4))

    def f():
        h = ad.silu(ad.add(ad.matmul(ad.Tensor(x), w1), b1))
        return ad.mean(ad.square(ad.matmul(h, w2)))

    mlp_err = ad.finite_diff_check(f, [w1, b1, w2])

    logits = ad.Parameter("z", rng.standard_normal((4, 3)))
    labels = [1, 2]

    def g():
        from .ctc import ctc_loss_op

        return ctc_loss_op(ad.log_softmax(logits, axis=1), labels)

    ctc_err = ad.finite_diff_check(g, [logits])
    ok = mlp_err < 1e-4 and ctc_err < 1e-4
    log(f"gradient checks: mlp {mlp_err:.2e}, ctc {ctc_err:.2e}  {'ok' if ok else 'FAIL'}")
    return ok


def _check_rope(log) -> bool:
    rng = derive_rng(0, "selftest-rope")
    worst = 0.0
    for dh in (2, 4, 8, 16):
        for _ in range(25):
            q = ad.Tensor(rng.standard_normal((1, dh)))
            k = ad.Tensor(rng.standard_normal((1, dh)))
            p1, p2, d = rng.uniform(0.0, 100.0, 3)
            lhs = float((apply_rope(q, [p1]).data * apply_rope(k, [p2]).data).sum())
            rhs = float((apply_rope(q, [p1 + d]).data * apply_rope(k, [p2 + d]).data).sum())
            worst = max(worst, abs(lhs - rhs))
    ok = worst < 1e-6
    log(f"rope shift invariance: max |diff| {worst:.2e}  {'ok' if ok else 'FAIL'}")
    return ok


def run(log=print) -> int:
    checks = [_check_ctc_oracle(log), _check_gradients(log), _check_rope(log)]
    if all(checks):
        log("selftest passed")
        return 0
    log("selftest FAILED")
    return 1
