"""Self-contained property suite behind the `verify` CLI command: round
trips, Jacobian log-dets against finite differences, gradient checks,
Nystrom-vs-exact attention and the analytic bound toy.

Every check returns (ok, detail); `run_all` prints one line per check.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .bijections import (
    ActNorm,
    AffineCoupling,
    InvConv1x1,
    LOG_2PI,
    Squeeze,
    standard_normal_logprob_np,
)
from .coupling import CouplingNetConfig, NystromAttention
from .cross_unit import CrossUnitCoupling
from .evaluation import log_mean_exp
from .model import PRESETS, FlowModel, GlowModule, desk_12_4
from .tensor import Tape, Tensor

SMALL_COUPLING = CouplingNetConfig(
    proj_channels=8, dense_layers=1, dense_growth=4, attn_landmarks=4
)


def numeric_jacobian(fn, x, eps=1e-5):
    """Dense Jacobian of fn: R^n -> R^m at x by central differences."""
    x = np.asarray(x, dtype=np.float64)
    y0 = fn(x)
    jac = np.zeros((y0.size, x.size))
    flat = x.reshape(-1)
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = eps
        hi = fn((flat + bump).reshape(x.shape)).reshape(-1)
        lo = fn((flat - bump).reshape(x.shape)).reshape(-1)
        jac[:, i] = (hi - lo) / (2 * eps)
    return jac


def fd_gradient(fn, arr, coords, eps=1e-5):
    """Central finite differences of a scalar fn at selected flat coords."""
    flat = arr.reshape(-1)
    grads = {}
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn()
        flat[i] = orig - eps
        lo = fn()
        flat[i] = orig
        grads[i] = (hi - lo) / (2 * eps)
    return grads


def relative_error(a, b):
    denom = max(abs(a), abs(b), 1e-12)
    return abs(a - b) / denom


def exact_attention(q, k, v):
    """Oracle softmax attention over (b, h, n, d) arrays (numpy only)."""
    logits = q @ np.swapaxes(k, -1, -2)
    logits = logits - logits.max(axis=-1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=-1, keepdims=True)
    return weights @ v


# ---------------------------------------------------------------------------
# checks


def check_roundtrip_bijections():
    rng = np.random.default_rng(7)
    worst = 0.0
    for dtype, tol in ((np.float32, 1e-4), (np.float64, 1e-8)):
        layers = {
            "actnorm": ActNorm(6, dtype=dtype),
            "invconv": InvConv1x1(6, rng, dtype=dtype),
            "squeeze": Squeeze(),
            "coupling": GlowModule(6, 4, 4, SMALL_COUPLING, rng,
                                   dtype=dtype).coupling,
        }
        for name, layer in layers.items():
            layer.eval()
            x = rng.standard_normal((1000, 6, 4, 4)).astype(dtype)
            y, _ = layer.forward(Tensor(x))
            back = layer.inverse(y.data)
            err = float(np.abs(back - x).max())
            worst = max(worst, err / tol)
            if err > tol:
                return False, f"{name} ({np.dtype(dtype).name}) err {err:.3e} > {tol}"
    return True, f"worst error {worst:.3f}x tolerance"


def check_roundtrip_model():
    model = FlowModel(desk_12_4()).eval()
    rng = np.random.default_rng(3)
    x = rng.random((64, 3, 8, 8)).astype(np.float32)
    model.encode(x, rng)  # initializes actnorm
    worst = 0.0
    for _ in range(1000 // 64 + 1):
        x = rng.random((64, 3, 8, 8)).astype(np.float32)
        z, dropped = model.encode(x, rng)
        back = model.decode(z, dropped)
        worst = max(worst, float(np.abs(back - x).max()))
    if worst > 1e-4:
        return False, f"model round trip err {worst:.3e} > 1e-4"
    return True, f"model round trip err {worst:.3e}"


def _layer_logdet_check(layer, x):
    y, ld = layer.forward(Tensor(x))
    analytic = float(ld.data[0])

    def fn(arr):
        with T.no_grad():
            out, _ = layer.forward(Tensor(arr))
        return out.data.copy()

    jac = numeric_jacobian(fn, x)
    _, fd = np.linalg.slogdet(jac)
    return relative_error(analytic, float(fd))


def check_jacobians():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((1, 4, 2, 2))
    actnorm = ActNorm(4, dtype=np.float64)
    actnorm.initialize_from(rng.standard_normal((16, 4, 2, 2)))
    invconv = InvConv1x1(4, rng, dtype=np.float64)
    # move off the orthogonal initialization so the logdet is non-trivial
    for _, p in invconv.named_parameters():
        p.data = p.data + 0.2 * rng.standard_normal(p.data.shape)
    cases = {
        "actnorm": actnorm,
        "invconv": invconv,
    }
    module = GlowModule(4, 2, 2, SMALL_COUPLING, rng, dtype=np.float64).eval()
    module.actnorm.initialize_from(rng.standard_normal((16, 4, 2, 2)))
    for _, p in module.coupling.named_parameters():
        p.data = p.data + 0.1 * rng.standard_normal(p.data.shape)
    cases["coupling"] = module.coupling

    worst = 0.0
    for name, layer in cases.items():
        err = _layer_logdet_check(layer, x)
        worst = max(worst, err)
        if err > 1e-3:
            return False, f"{name} logdet rel err {err:.2e} > 1e-3"

    mods = [GlowModule(4, 2, 2, SMALL_COUPLING, rng, dtype=np.float64).eval()
            for _ in range(3)]
    for m in mods:
        m.actnorm.initialize_from(rng.standard_normal((16, 4, 2, 2)))
        for _, p in m.named_parameters():
            p.data = p.data + 0.05 * rng.standard_normal(p.data.shape)

    def composed_forward(arr):
        out = Tensor(arr)
        total = 0.0
        for m in mods:
            out, ld = m.forward(out)
            total = total + ld
        return out, total

    y, ld = composed_forward(x)

    def fn(arr):
        with T.no_grad():
            out, _ = composed_forward(arr)
        return out.data.copy()

    jac = numeric_jacobian(fn, x)
    _, fd = np.linalg.slogdet(jac)
    err = relative_error(float(ld.data[0]), float(fd))
    worst = max(worst, err)
    if err > 1e-3:
        return False, f"composed 3-module logdet rel err {err:.2e} > 1e-3"
    return True, f"worst logdet rel err {worst:.2e}"


def _gradcheck(build_loss, params, n_coords=6, tol=1e-3, seed=5):
    """Autodiff vs central differences on sampled coordinates of every
    parameter; only coordinates with |g| > 1e-6 are compared."""
    rng = np.random.default_rng(seed)
    tape = Tape()
    for name, p in params.items():
        tape.register(name, p)
    grads = tape.gradients(build_loss())
    worst = 0.0
    for name, p in params.items():
        g = grads[name]
        coords = rng.choice(p.size, size=min(n_coords, p.size), replace=False)
        fd = fd_gradient(lambda: float(build_loss().item()), p.data, coords)
        for i, fd_val in fd.items():
            a = float(g.reshape(-1)[i])
            if max(abs(a), abs(fd_val)) < 1e-6:
                continue
            err = relative_error(a, fd_val)
            worst = max(worst, err)
            if err > tol:
                return False, worst, f"{name}[{i}]: autodiff {a:.6e} vs fd {fd_val:.6e}"
    return True, worst, ""


def check_gradients():
    rng = np.random.default_rng(13)
    reports = []

    # conv2d
    x = Tensor(rng.standard_normal((2, 3, 5, 5)), requires_grad=True)
    k = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
    ok, worst, msg = _gradcheck(
        lambda: T.tsum(T.tanh(T.conv2d(x, k, padding=1))),
        {"x": x, "k": k},
    )
    if not ok:
        return False, f"conv2d: {msg}"
    reports.append(worst)

    # glow module (includes dense block + attention via the coupling net)
    module = GlowModule(4, 4, 4, SMALL_COUPLING, rng, dtype=np.float64)
    module.eval()
    module.actnorm.initialize_from(rng.standard_normal((16, 4, 4, 4)))
    for _, p in module.named_parameters():
        p.data = p.data + 0.05 * rng.standard_normal(p.data.shape)
    xin = rng.standard_normal((2, 4, 4, 4))

    def module_loss():
        y, ld = module.forward(Tensor(xin))
        return T.tsum(y * y) + T.tsum(ld)

    ok, worst, msg = _gradcheck(module_loss, dict(module.named_parameters()),
                                n_coords=3)
    if not ok:
        return False, f"glow module: {msg}"
    reports.append(worst)

    # full desk-style model NLL (scaled down, float64)
    from .model import BlockConfig, FlowConfig

    cfg = FlowConfig(blocks=(BlockConfig(2, 1),), growth_rate=2,
                     image_shape=(3, 4, 4), coupling=SMALL_COUPLING, seed=1)
    model = FlowModel(cfg, dtype=np.float64).eval()
    x_disc = np.random.default_rng(2).integers(0, 256, (2, 3, 4, 4)).astype(np.uint8)
    model.bound_terms(x_disc, np.random.default_rng(0))  # actnorm init
    for _, p in model.named_parameters():
        p.data = p.data + 0.05 * rng.standard_normal(p.data.shape)

    def nll():
        bound, _ = model.bound_terms(x_disc, np.random.default_rng(42))
        return (-bound).mean()

    ok, worst, msg = _gradcheck(nll, dict(model.named_parameters()), n_coords=2)
    if not ok:
        return False, f"model nll: {msg}"
    reports.append(worst)
    return True, f"worst rel err {max(reports):.2e}"


def check_nystrom():
    rng = np.random.default_rng(17)
    # collapse: landmarks == sequence length
    attn = NystromAttention(8, 4, 4, landmarks=16, heads=1, pinv_iters=6,
                            rng=rng, dtype=np.float64)
    x = rng.standard_normal((4, 8, 4, 4))
    out = attn(Tensor(x)).data

    full = NystromAttention(8, 4, 4, landmarks=16, heads=1, pinv_iters=6,
                            rng=rng, dtype=np.float64)
    for (_, a), (_, b) in zip(full.named_parameters(), attn.named_parameters()):
        a.data = b.data.copy()
    # oracle: run q/k/v projections, then exact attention in numpy
    seq = (x + attn.pos.embedding.data).reshape(4, 8, 16).transpose(0, 2, 1)
    scale = 1.0 / math.sqrt(math.sqrt(8))
    q = (seq @ attn.q_proj.weight.data + attn.q_proj.bias.data)[:, None] * scale
    k = (seq @ attn.k_proj.weight.data + attn.k_proj.bias.data)[:, None] * scale
    v = (seq @ attn.v_proj.weight.data + attn.v_proj.bias.data)[:, None]
    ref = exact_attention(q, k, v)[:, 0]
    ref = ref @ attn.out_proj.weight.data + attn.out_proj.bias.data
    ref = ref.transpose(0, 2, 1).reshape(4, 8, 4, 4)
    rel = np.abs(out - ref).max() / max(np.abs(ref).max(), 1e-12)
    if rel > 1e-4:
        return False, f"collapse (m = n_seq) rel err {rel:.2e} > 1e-4"

    # low-rank: 4 landmarks on 16 positions, median over 100 trials
    errs = []
    for trial in range(100):
        trng = np.random.default_rng(100 + trial)
        a4 = NystromAttention(8, 4, 4, landmarks=4, heads=1, pinv_iters=6,
                              rng=trng, dtype=np.float64)
        xi = np.random.default_rng(500 + trial).standard_normal((1, 8, 4, 4))
        approx = a4(Tensor(xi)).data
        seq = (xi + a4.pos.embedding.data).reshape(1, 8, 16).transpose(0, 2, 1)
        q = (seq @ a4.q_proj.weight.data + a4.q_proj.bias.data)[:, None] * scale
        k = (seq @ a4.k_proj.weight.data + a4.k_proj.bias.data)[:, None] * scale
        v = (seq @ a4.v_proj.weight.data + a4.v_proj.bias.data)[:, None]
        ref = exact_attention(q, k, v)[:, 0]
        ref = ref @ a4.out_proj.weight.data + a4.out_proj.bias.data
        ref = ref.transpose(0, 2, 1).reshape(1, 8, 4, 4)
        errs.append(np.linalg.norm(approx - ref) / max(np.linalg.norm(ref), 1e-12))
    med = float(np.median(errs))
    if med > 0.15:
        return False, f"landmark approximation median rel err {med:.3f} > 0.15"
    return True, f"collapse err {rel:.2e}, m=n/4 median err {med:.3f}"


def toy_bound_samples(z_value, mu, sigma, n_samples, rng):
    """Single-draw bound samples for the analytic toy: identity flow above
    one augmentation, N(0, I) termination over (z, noise)."""
    coupling = CrossUnitCoupling(
        k=1, context_channels=1,
        conditioner=lambda ctx: (
            Tensor(np.full((1, 1, 1, 1), mu)),
            Tensor(np.full((1, 1, 1, 1), sigma)),
        ),
    )
    z = Tensor(np.full((n_samples, 1, 1, 1), z_value))
    z_aug, logdet, noise = coupling.augment(z, [], rng)
    prior = standard_normal_logprob_np(z_aug.data)
    return prior + logdet.data + noise


def check_bound_toy():
    # sigma > 1/sqrt(2) keeps importance-weight variance finite
    rng = np.random.default_rng(23)
    z_value = 0.7
    exact = -0.5 * z_value**2 - 0.5 * LOG_2PI
    samples = toy_bound_samples(z_value, mu=0.3, sigma=0.85, n_samples=10_000,
                                rng=rng)
    est = float(log_mean_exp(samples, axis=0))
    w = np.exp(samples - samples.max())
    se = float(w.std() / (w.mean() * math.sqrt(w.size)))
    if abs(est - exact) > 3 * se:
        return False, f"LME {est:.5f} vs exact {exact:.5f} beyond 3 se ({se:.2e})"
    mean_1 = float(samples.mean())
    if mean_1 > exact + 3 * samples.std() / math.sqrt(samples.size):
        return False, "single-sample bound exceeds the exact marginal"
    return True, f"estimate {est:.5f} vs exact {exact:.5f} (se {se:.1e})"


def check_dimension_accounting():
    for name, factory in PRESETS.items():
        cfg = factory()
        c, h, w = cfg.image_shape
        inflow = c * h * w
        k = cfg.growth_rate
        for bi, blk in enumerate(cfg.blocks):
            inflow_block = (blk.units - 1) * k * h * w
            inflow += inflow_block
            c += (blk.units - 1) * k
            if bi < len(cfg.blocks) - 1:
                c, h, w = 4 * c, h // 2, w // 2
                c //= 2
        # config arithmetic cross-checked against the desk build
        if name == "desk-12-4":
            model = FlowModel(cfg)
            got_in, got_out = model.dimension_accounting()
            if got_in != inflow or got_in != got_out:
                return False, f"{name}: {got_in} vs {got_out} (expected {inflow})"
    return True, "input + noise dims == latent + factored dims for all presets"


def check_actnorm_init():
    rng = np.random.default_rng(29)
    layer = ActNorm(5, dtype=np.float64)
    x = 3.0 + 2.5 * rng.standard_normal((64, 5, 6, 6))
    y, _ = layer.forward(Tensor(x))
    mean = np.abs(y.data.mean(axis=(0, 2, 3))).max()
    std = np.abs(y.data.std(axis=(0, 2, 3)) - 1).max()
    if mean > 1e-4 or std > 1e-3:
        return False, f"post-init mean {mean:.2e} / std dev {std:.2e}"
    return True, f"post-init |mean| {mean:.1e}, |std-1| {std:.1e}"


CHECKS = [
    ("bijection round trips", check_roundtrip_bijections),
    ("model round trip", check_roundtrip_model),
    ("jacobian log-dets vs finite differences", check_jacobians),
    ("gradients vs finite differences", check_gradients),
    ("nystrom vs exact attention", check_nystrom),
    ("mc bound vs analytic marginal", check_bound_toy),
    ("dimension accounting", check_dimension_accounting),
    ("actnorm initialization statistics", check_actnorm_init),
]


def run_all(report=print):
    """Run every check; returns True when all pass."""
    all_ok = True
    for name, fn in CHECKS:
        ok, detail = fn()
        all_ok = all_ok and ok
        report(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return all_ok
