"""Built-in oracles: finite-difference gradients, the margin loss, and the theory suite."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig, build_encoder, encode
from .siamese import combined_loss, contrastive_loss
from .tensor import Tensor
from .theory import CheckOutcome, theory_suite

OP_TOL = 1e-4
E2E_TOL = 1e-3
E2E_EPS = 1e-3
KINK_TOL = 1e-6
REDUCED = EncoderConfig(input_shape=(3, 12, 12), stem_widths=(3, 4), inception_widths=(2, 2, 2, 2),
                        head_widths=(4, 4), code_length=6)


def operator_cases(seed: int = 0):
    """(name, scalar function of one input, input point) for every differentiable operator."""
    rng = np.random.default_rng(seed)
    w = lambda *s: rng.normal(size=s)
    k33, k13, kb = w(3, 2, 3, 3), w(2, 2, 1, 3), w(3)
    lin_w, lin_b = w(4, 5), w(4)
    other = w(3, 4)
    proj_conv2d_1 = w(3, 5, 5)
    proj_conv2d_stride2_1 = w(3, 3, 3)
    proj_conv2d_asym_1 = w(2, 4, 4)
    proj_conv2d_kernel_1 = w(2, 5, 5)
    proj_conv2d_kernel_2 = w(3, 5, 5)
    proj_maxpool2d_1 = w(2, 2, 2)
    proj_maxpool2d_pad_1 = w(2, 4, 4)
    proj_zero_pad_1 = w(2, 5, 5)
    proj_concat_channels_1 = w(4, 3, 3)
    proj_linear_1 = w(4)
    proj_linear_weight_1 = w(2, 5)
    proj_linear_weight_2 = w(2, 4)
    proj_softmax_1 = w(2, 5)
    cases = [
        ("add", lambda x: (x + Tensor(other)).sum(), w(3, 4)),
        ("add_broadcast", lambda x: ((x + Tensor(other[0])) * Tensor(other)).sum(), w(4)),
        ("sub", lambda x: (Tensor(other) - x * x).sum(), w(3, 4)),
        ("mul", lambda x: (x * Tensor(other) * x).sum(), w(3, 4)),
        ("neg", lambda x: (-x * Tensor(other)).sum(), w(3, 4)),
        ("sum_axis", lambda x: (x.sum(axis=1) * Tensor(other[:, 0])).sum(), w(3, 4)),
        ("mean", lambda x: (x * x).mean(), w(3, 4)),
        ("reshape", lambda x: (x.reshape(4, 3) * Tensor(other.reshape(4, 3))).sum(), w(3, 4)),
        ("take", lambda x: (T.take(x, np.array([0, 2, 2])) * Tensor(other[:3])).sum(), w(3, 4)),
        ("relu", lambda x: (T.relu(x) * Tensor(other)).sum(), w(3, 4)),
        ("conv2d", lambda x: (T.conv2d(x, Tensor(k33), Tensor(kb), 1, 1) * Tensor(proj_conv2d_1)).sum(), w(2, 5, 5)),
        ("conv2d_stride2", lambda x: (T.conv2d(x, Tensor(k33), None, 2, 1) * Tensor(proj_conv2d_stride2_1)).sum(), w(2, 5, 5)),
        ("conv2d_asym", lambda x: (T.conv2d(x, Tensor(k13), None, 1, (0, 1)) * Tensor(proj_conv2d_asym_1)).sum(), w(2, 4, 4)),
        ("conv2d_kernel", lambda k: (T.conv2d(Tensor(proj_conv2d_kernel_1), k, None, 1, 1) * Tensor(proj_conv2d_kernel_2)).sum(), w(3, 2, 3, 3)),
        ("maxpool2d", lambda x: (T.maxpool2d(x, 2, 2) * Tensor(proj_maxpool2d_1)).sum(), w(2, 4, 4)),
        ("maxpool2d_pad", lambda x: (T.maxpool2d(x, 3, 1, 1) * Tensor(proj_maxpool2d_pad_1)).sum(), w(2, 4, 4)),
        ("zero_pad", lambda x: (T.zero_pad(x, (5, 5)) * Tensor(proj_zero_pad_1)).sum(), w(2, 4, 4)),
        ("concat_channels", lambda x: (T.concat_channels([x, x * x]) * Tensor(proj_concat_channels_1)).sum(), w(2, 3, 3)),
        ("linear", lambda x: (T.linear(x, Tensor(lin_w), Tensor(lin_b)) * Tensor(proj_linear_1)).sum(), w(5)),
        ("linear_weight", lambda W: (T.linear(Tensor(proj_linear_weight_1), W) * Tensor(proj_linear_weight_2)).sum(), w(4, 5)),
        ("softmax", lambda x: (T.softmax(x) * Tensor(proj_softmax_1)).sum(), w(2, 5)),
        ("cross_entropy", lambda x: T.cross_entropy(T.softmax(x), np.array([1, 3])), w(2, 5)),
    ]
    return cases


def operator_gradients(seed: int = 0, tol: float = OP_TOL) -> list[CheckOutcome]:
    out = []
    for name, fn, point in operator_cases(seed):
        err = T.grad_check(fn, point, eps=1e-3)
        out.append(CheckOutcome(f"grad[{name}]", err <= tol, f"rel err {err:.2e}"))
    return out


def smooth_coords(fn, point: np.ndarray, eps: float, coords) -> list[int]:
    """Coordinates whose forward and backward one-sided slopes agree.

    The encoder is piecewise linear in its input and in any one kernel entry,
    so a disagreement means a relu or pooling kink lies within +-eps and the
    central difference there is not a derivative estimate.
    """
    with T.precision(np.float64), T.no_grad():
        probe = np.array(point, dtype=np.float64)
        f0 = float(fn(Tensor(probe.copy())).data)
        keep = []
        for i in coords:
            orig = probe.flat[i]
            probe.flat[i] = orig + eps
            up = float(fn(Tensor(probe.copy())).data)
            probe.flat[i] = orig - eps
            down = float(fn(Tensor(probe.copy())).data)
            probe.flat[i] = orig
            fwd, bwd = (up - f0) / eps, (f0 - down) / eps
            if abs(fwd - bwd) <= KINK_TOL * max(abs(fwd), abs(bwd), 1.0):
                keep.append(int(i))
    return keep


def encoder_gradient(seed: int = 0, tol: float = E2E_TOL, coords: int = 60, per_param: int = 6) -> CheckOutcome:
    """Reduced-width encoder: d(code . v) against central differences.

    Checks ``coords`` input pixels and ``per_param`` entries of every
    parameter tensor, skipping entries that straddle a kink.
    """
    rng = np.random.default_rng(seed)
    worst, checked, sampled = 0.0, 0, 0
    with T.precision(np.float64):
        params = build_encoder(REDUCED, seed=seed, dtype=np.float64)
        image = rng.uniform(0.0, 1.0, size=REDUCED.input_shape)
        v = Tensor(rng.normal(size=REDUCED.code_length))

        via_input = lambda x: (encode(params, x) * v).sum()
        targets = [(via_input, image, coords)]
        for name, base in params.tensors.items():
            def via_param(p, name=name, base=base):
                params.tensors[name] = p
                try:
                    return (encode(params, Tensor(image)) * v).sum()
                finally:
                    params.tensors[name] = base
            targets.append((via_param, base.data, per_param))

        for fn, point, n in targets:
            pick = rng.choice(point.size, size=min(n, point.size), replace=False)
            keep = smooth_coords(fn, point, E2E_EPS, pick)
            sampled += len(pick)
            checked += len(keep)
            if keep:
                worst = max(worst, T.grad_check(fn, point, eps=E2E_EPS, coords=keep))
    ok = worst <= tol and checked >= sampled // 2
    return CheckOutcome("grad[encoder_end_to_end]", ok,
                        f"rel err {worst:.2e} over {checked}/{sampled} coords off kinks "
                        f"(input + {len(targets) - 1} parameter tensors)")


def loss_oracles(seed: int = 0, count: int = 1000) -> list[CheckOutcome]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        d = float(rng.uniform(0, 5))
        g = int(rng.integers(0, 2))
        m = float(rng.uniform(0.1, 10))
        direct = (1 - g) * d ** 2 + g * max(0.0, m - d ** 2)
        worst = max(worst, abs(contrastive_loss(d, g, m) - direct))
    combo = all(combined_loss(s, c, a) == a * s + c
                for s, c, a in rng.uniform(0, 10, size=(count, 3)).tolist())
    return [CheckOutcome("loss[contrastive_vs_direct]", worst <= 1e-12, f"max abs diff {worst:.1e}"),
            CheckOutcome("loss[combined_exact]", combo, "alpha*L_sim + L_class bit-equal")]


def run_all(grid: int = 100, seed: int = 0) -> list[CheckOutcome]:
    return operator_gradients(seed) + [encoder_gradient(seed)] + loss_oracles(seed) + theory_suite(grid, seed)


def failures(outcomes: list[CheckOutcome]) -> list[CheckOutcome]:
    return [o for o in outcomes if not o.passed and not o.informational]


def report(outcomes: list[CheckOutcome]) -> str:
    lines = []
    for o in outcomes:
        tag = "INFO" if o.informational else ("PASS" if o.passed else "FAIL")
        lines.append(f"{tag}\t{o.name}\t{o.detail}")
    bad = failures(outcomes)
    lines.append(f"summary: {len(outcomes) - len(bad)}/{len(outcomes)} checks ok" +
                 ("" if not bad else "; failing: " + ", ".join(o.name for o in bad)))
    return "\n".join(lines) + "\n"


__all__ = ["run_all", "report", "failures", "operator_gradients", "encoder_gradient", "loss_oracles", "smooth_coords"]
