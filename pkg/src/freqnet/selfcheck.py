"""Numerical self-checks runnable without pytest (CLI `freqnet selfcheck`).

Holds the central-difference gradient oracle used both here and by the test
suite, plus the three check suites: DCT round-trip, analytic-vs-numerical
gradients for every differentiable op, and the degeneracy identities.
"""

import numpy as np

from . import autodiff as ad
from .dct import dct_matrix, forward_dct_block, inverse_dct_block

FD_STEP = 1e-5
FD_RTOL = 1e-4


def finite_difference_grad(func, arrays, h: float = FD_STEP):
    """Central-difference gradient of scalar func w.r.t. each input array.

    func receives copies of the arrays and returns a float. Independent of the
    autodiff engine by construction: it only ever calls func.
    """
    grads = []
    for target_idx, target in enumerate(arrays):
        base = np.array(target, dtype=np.float64)
        grad = np.zeros_like(base)
        flat = base.ravel()
        gflat = grad.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = func(*[base if k == target_idx else arrays[k] for k in range(len(arrays))])
            flat[i] = orig - h
            down = func(*[base if k == target_idx else arrays[k] for k in range(len(arrays))])
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(grad)
    return grads


def relative_grad_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / denom)


# ---------------------------------------------------------------------------
# Suite 1: DCT round-trip and Parseval


def check_dct_roundtrip(n_blocks: int = 1000, m: int = 32, seed: int = 0):
    rng = np.random.default_rng(seed)
    worst_rt = 0.0
    worst_parseval = 0.0
    for _ in range(n_blocks):
        block = rng.uniform(-128.0, 127.0, size=(m, m))
        coeffs = forward_dct_block(block)
        back = inverse_dct_block(coeffs)
        worst_rt = max(worst_rt, float(np.max(np.abs(back - block))))
        e_pix = float((block * block).sum())
        e_coef = float((coeffs * coeffs).sum())
        worst_parseval = max(worst_parseval, abs(e_pix - e_coef) / e_pix)
    ortho = float(np.max(np.abs(dct_matrix(m) @ dct_matrix(m).T - np.eye(m))))
    ok = worst_rt < 1e-9 and worst_parseval < 1e-9 and ortho < 1e-12
    return ok, {
        "blocks": n_blocks,
        "max_roundtrip_err": worst_rt,
        "max_parseval_rel": worst_parseval,
        "orthonormality": ortho,
    }


# ---------------------------------------------------------------------------
# Suite 2: gradient checks per operator


def _offsets_away_from_integers(rng, shape):
    """Random offsets whose fractional part avoids the bilinear kinks."""
    sign = rng.choice([-1.0, 1.0], size=shape)
    return sign * rng.uniform(0.15, 0.85, size=shape)


def _grad_case(name, build, arrays, h=FD_STEP):
    """Compare engine gradients with the finite-difference oracle."""
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    loss = build(*tensors)
    ad.backward(loss)

    def numeric(*arrs):
        consts = [ad.Tensor(a) for a in arrs]
        return float(build(*consts).data)

    fd = finite_difference_grad(numeric, [t.data.copy() for t in tensors], h=h)
    err = max(relative_grad_error(t.grad, f) for t, f in zip(tensors, fd))
    return {"op": name, "rel_err": err, "ok": err < FD_RTOL}


def check_gradients(seeds: int = 20, seed0: int = 100):
    """FD-vs-analytic comparison for every differentiable operator."""
    results = []
    for s in range(seeds):
        rng = np.random.default_rng(seed0 + s)
        x = rng.normal(size=(1, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3)) * 0.5
        b = rng.normal(size=3) * 0.1
        results.append(
            _grad_case(
                "conv2d",
                lambda xt, wt, bt: ad.tensor_sum(
                    ad.mul(t := ad.conv2d(xt, wt, bt, stride=1, padding=1), t)
                ),
                [x, w, b],
            )
        )
        ws = rng.normal(size=(2, 1, 3, 3)) * 0.5
        bs = rng.normal(size=2) * 0.1
        results.append(
            _grad_case(
                "depthwise_conv2d",
                lambda xt, wt, bt: ad.tensor_sum(
                    ad.mul(t := ad.depthwise_conv2d(xt, wt, bt, padding=1), t)
                ),
                [x, ws, bs],
            )
        )
        xd = rng.normal(size=(1, 2, 6, 6))
        wd = rng.normal(size=(2, 2, 3, 3)) * 0.5
        bd = rng.normal(size=2) * 0.1
        off = _offsets_away_from_integers(rng, (1, 18, 6, 6))
        results.append(
            _grad_case(
                "deformable_conv2d",
                lambda xt, wt, bt, ot: ad.tensor_sum(
                    ad.mul(t := ad.deformable_conv2d(xt, wt, bt, ot), t)
                ),
                [xd, wd, bd, off],
            )
        )
        xl = rng.normal(size=(2, 3, 4, 4))
        results.append(
            _grad_case(
                "leaky_relu",
                lambda xt: ad.tensor_sum(ad.mul(t := ad.leaky_relu(xt, 0.2), t)),
                [xl],
            )
        )
        a = rng.normal(size=(3, 4))
        c = rng.normal(size=(3, 4))
        results.append(
            _grad_case(
                "weighted_sum",
                lambda at, ct: ad.tensor_sum(
                    ad.mul(t := ad.weighted_sum([at, ct], [0.3, 0.7]), t)
                ),
                [a, c],
            )
        )
        sq = rng.uniform(0.5, 2.0, size=(4, 4))
        results.append(
            _grad_case("sqrt", lambda st: ad.tensor_sum(ad.sqrt(st)), [sq])
        )
    return all(r["ok"] for r in results), results


def check_residual_block_gradients(seeds: int = 20, seed0: int = 300):
    """FD checks through the three residual block kinds and the loss."""
    from .metrics import freq_loss_graph, table1_weights
    from .model import (
        deformable_residual_block,
        depthwise_residual_block,
        residual_block,
    )

    def block_params(rng, kind, c):
        p = {}
        if kind == "rb":
            p["conv1.w"] = rng.normal(size=(c, c, 3, 3)) * 0.3
            p["conv1.b"] = rng.normal(size=c) * 0.1
            p["conv2.w"] = rng.normal(size=(c, c, 3, 3)) * 0.3
            p["conv2.b"] = rng.normal(size=c) * 0.1
        elif kind == "drb":
            p["conv1.w"] = rng.normal(size=(c, c, 3, 3)) * 0.3
            p["conv1.b"] = rng.normal(size=c) * 0.1
            p["offset.w"] = rng.normal(size=(18, c, 3, 3)) * 0.05
            p["offset.b"] = rng.normal(size=18) * 0.05
            p["dconv.w"] = rng.normal(size=(c, c, 3, 3)) * 0.3
            p["dconv.b"] = rng.normal(size=c) * 0.1
        else:
            p["dwconv.w"] = rng.normal(size=(c, 1, 3, 3)) * 0.3
            p["dwconv.b"] = rng.normal(size=c) * 0.1
            p["conv2.w"] = rng.normal(size=(c, c, 1, 1)) * 0.3
            p["conv2.b"] = rng.normal(size=c) * 0.1
        return p

    funcs = {
        "rb": residual_block,
        "drb": deformable_residual_block,
        "dwrb": depthwise_residual_block,
    }
    results = []
    for s in range(seeds):
        rng = np.random.default_rng(seed0 + s)
        for kind, fn in funcs.items():
            c = 2
            params = block_params(rng, kind, c)
            names = sorted(params)
            x = rng.normal(size=(1, c, 4, 4))

            def build(xt, *ptensors):
                pmap = {n: t for n, t in zip(names, ptensors)}
                out = fn(xt, lambda key: pmap[key], slope=0.2)
                return ad.tensor_sum(ad.mul(out, out))

            arrays = [x] + [params[n] for n in names]
            results.append(_grad_case(f"residual:{kind}", build, arrays))
        # freq_loss gradient w.r.t. the predicted maps, tighter tolerance.
        # The Charbonnier curvature scale is epsilon, so the FD step must sit
        # well below it to keep truncation error under 1e-5.
        profile = table1_weights(10)
        sr = rng.normal(size=(1, 100, 2, 2))
        hr = rng.normal(size=(1, 100, 2, 2))
        res = _grad_case(
            "freq_loss",
            lambda st: freq_loss_graph(st, hr, profile.betas, epsilon=1e-3),
            [sr],
            h=1e-6,
        )
        res["ok"] = res["rel_err"] < 1e-5
        results.append(res)
    return all(r["ok"] for r in results), results


# ---------------------------------------------------------------------------
# Suite 3: degeneracy identities


def check_degeneracy(seed: int = 7):
    """Zero-offset deformable == standard conv; depthwise isolation."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    off = np.zeros((2, 18, 8, 8))
    got = ad.deformable_conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b), ad.Tensor(off))
    want = ad.conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b), stride=1, padding=1)
    dev = float(np.max(np.abs(got.data - want.data)))

    # Depthwise isolation: zeroing every channel but one leaves that output
    # channel bit-identical.
    xw = rng.normal(size=(1, 4, 6, 6))
    dw = rng.normal(size=(4, 1, 3, 3))
    db = rng.normal(size=4)
    full = ad.depthwise_conv2d(ad.Tensor(xw), ad.Tensor(dw), ad.Tensor(db), padding=1)
    masked = xw.copy()
    masked[:, [0, 1, 3]] = 0.0
    solo = ad.depthwise_conv2d(ad.Tensor(masked), ad.Tensor(dw), ad.Tensor(db), padding=1)
    iso = bool(np.array_equal(full.data[:, 2], solo.data[:, 2]))

    ok = dev <= 1e-12 and iso
    return ok, {"deformable_zero_offset_dev": dev, "depthwise_isolated": iso}


def run_selfcheck(quick: bool = False):
    """Run all suites; returns (ok, report lines)."""
    lines = []
    ok_all = True
    n_blocks = 100 if quick else 1000
    seeds = 5 if quick else 20

    ok, info = check_dct_roundtrip(n_blocks=n_blocks)
    ok_all &= ok
    lines.append(
        f"[{'PASS' if ok else 'FAIL'}] dct round-trip: "
        f"max err {info['max_roundtrip_err']:.2e}, "
        f"parseval {info['max_parseval_rel']:.2e} over {info['blocks']} blocks"
    )

    ok, results = check_gradients(seeds=seeds)
    ok_all &= ok
    worst = max(r["rel_err"] for r in results)
    lines.append(
        f"[{'PASS' if ok else 'FAIL'}] operator gradients vs finite differences: "
        f"worst rel err {worst:.2e} over {len(results)} cases"
    )

    ok, results = check_residual_block_gradients(seeds=max(3, seeds // 4))
    ok_all &= ok
    worst = max(r["rel_err"] for r in results)
    lines.append(
        f"[{'PASS' if ok else 'FAIL'}] residual block / loss gradients: "
        f"worst rel err {worst:.2e} over {len(results)} cases"
    )

    ok, info = check_degeneracy()
    ok_all &= ok
    lines.append(
        f"[{'PASS' if ok else 'FAIL'}] degeneracies: zero-offset dev "
        f"{info['deformable_zero_offset_dev']:.2e}, "
        f"depthwise isolation {info['depthwise_isolated']}"
    )
    return ok_all, lines
