"""Finite-difference gradient verification.

`grad_check` is the oracle used everywhere a backward pass needs independent
confirmation: it compares the engine's analytic gradients against central
finite differences. `run_checks` drives a named suite covering every
operator and every loss term; the CLI's `gradcheck` subcommand and the
acceptance tests both run it.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward

DEFAULT_EPS = 1e-5
DEFAULT_TOL = 1e-4

# Probes must stay clear of relu kinks / top-k ties so central differences
# straddle a smooth region; 100x the probe step is comfortably safe.
_KINK_MARGIN = 1e-3


def grad_check(f, inputs, eps=DEFAULT_EPS, max_coords=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    `f` maps the list of input tensors to a scalar tensor and is re-evaluated
    with perturbed inputs, so it must be deterministic (stochastic pieces need
    a fixed seed inside `f`). The error at each probed coordinate is
    |analytic - numeric| / max(1, |analytic|, |numeric|).

    By default every coordinate of every input is probed; `max_coords` caps
    the number of probed coordinates per input (sampled with `rng`), which
    keeps whole-model checks affordable while still touching every input.
    """
    out = f(inputs)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    backward(out)
    # inputs the output does not depend on (e.g. a detached ranking) never
    # receive a gradient; their analytic gradient is zero
    analytic = [
        np.zeros_like(x.data) if x.grad is None else np.array(x.grad, copy=True)
        for x in inputs
    ]

    worst = 0.0
    for x, ga in zip(inputs, analytic):
        flat = x.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            if rng is None:
                raise ValueError("max_coords needs an rng to sample coordinates")
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        ga_flat = ga.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            plus = f(inputs).item()
            flat[i] = orig - eps
            minus = f(inputs).item()
            flat[i] = orig
            numeric = (plus - minus) / (2.0 * eps)
            err = abs(ga_flat[i] - numeric) / max(1.0, abs(ga_flat[i]), abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# probe construction

def uniform_probe(rng, shape, low=-2.0, high=2.0):
    return rng.uniform(low, high, size=shape)


def away_from_zero(rng, shape, margin=_KINK_MARGIN):
    """Uniform in [-2, 2] with every coordinate at least `margin` from 0."""
    x = rng.uniform(low=margin, high=2.0, size=shape)
    return x * np.where(rng.random(shape) < 0.5, -1.0, 1.0)


def distinct_entries(rng, n, margin=_KINK_MARGIN):
    """1-D probe whose sorted entries are pairwise more than `margin` apart."""
    while True:
        v = rng.uniform(-2.0, 2.0, size=n)
        s = np.sort(v)
        if n == 1 or np.min(np.diff(s)) > margin:
            return v


# ---------------------------------------------------------------------------
# named check suite

@dataclass
class CheckResult:
    name: str
    max_error: float
    coords: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def _operator_checks(rng, t_len, dim):
    """(name, f, inputs, max_coords) for every engine operator."""
    d4 = max(dim // 4, 1)
    checks = []

    a = Tensor(uniform_probe(rng, (t_len, dim)), requires_grad=True)
    b = Tensor(uniform_probe(rng, (t_len, dim)), requires_grad=True)
    row = Tensor(uniform_probe(rng, (dim,)), requires_grad=True)
    checks.append(("add", lambda xs: ad.sum_all(ad.add(xs[0], xs[1])), [a, b], None))
    checks.append(("add_broadcast", lambda xs: ad.sum_all(ad.add(xs[0], xs[1])), [a, row], None))
    checks.append(("sub", lambda xs: ad.sum_all(ad.sub(xs[0], xs[1])), [a, b], None))
    checks.append(("neg", lambda xs: ad.sum_all(ad.neg(xs[0])), [a], None))
    checks.append((
        "mul",
        lambda xs: ad.sum_all(ad.mul(ad.mul(xs[0], xs[1]), xs[0])),
        [a, b],
        None,
    ))

    m1 = Tensor(uniform_probe(rng, (t_len, d4)), requires_grad=True)
    m2 = Tensor(uniform_probe(rng, (d4, t_len)), requires_grad=True)
    checks.append(("matmul", lambda xs: ad.sum_all(ad.matmul(xs[0], xs[1])), [m1, m2], None))
    checks.append((
        "transpose",
        lambda xs: ad.sum_all(ad.matmul(xs[0], ad.transpose(xs[0]))),
        [m1],
        None,
    ))
    checks.append((
        "reshape",
        lambda xs: ad.sum_all(ad.mul(ad.reshape(xs[0], (d4, t_len)), xs[1])),
        [m1, m2],
        None,
    ))
    checks.append((
        "concat",
        lambda xs: ad.sum_all(ad.mul(ad.concat([xs[0], xs[1]], axis=1), ad.concat([xs[1], xs[0]], axis=1))),
        [a, b],
        None,
    ))
    checks.append((
        "narrow",
        lambda xs: ad.sum_all(ad.mul(ad.narrow(xs[0], 0, t_len - 1), ad.narrow(xs[0], 1, t_len))),
        [a],
        None,
    ))

    vec = Tensor(distinct_entries(rng, t_len), requires_grad=True)
    idx = rng.integers(0, t_len, size=t_len)
    checks.append(("gather", lambda xs: ad.sum_all(ad.mul(ad.gather(xs[0], idx), ad.gather(xs[0], idx))), [vec], None))

    for width, dilation in ((1, 1), (3, 1), (3, 2), (3, 4)):
        cx = Tensor(uniform_probe(rng, (t_len, dim)), requires_grad=True)
        cw = Tensor(uniform_probe(rng, (d4, dim, width), low=-1.0, high=1.0), requires_grad=True)
        cb = Tensor(uniform_probe(rng, (d4,)), requires_grad=True)

        def conv_f(xs, _d=dilation):
            return ad.sum_all(ad.mul(ad.conv1d(xs[0], xs[1], xs[2], _d), 0.5))

        checks.append((f"conv1d_w{width}_d{dilation}", conv_f, [cx, cw, cb], None))

    rx = Tensor(away_from_zero(rng, (t_len, dim)), requires_grad=True)
    checks.append(("relu", lambda xs: ad.sum_all(ad.mul(ad.relu(xs[0]), xs[0])), [rx], None))
    sx = Tensor(uniform_probe(rng, (t_len, dim)), requires_grad=True)
    checks.append(("sigmoid", lambda xs: ad.sum_all(ad.sigmoid(xs[0])), [sx], None))

    dx = Tensor(uniform_probe(rng, (t_len, dim)), requires_grad=True)
    drop_seed = int(rng.integers(0, 2**31))

    def dropout_f(xs):
        # fresh generator per call keeps the mask fixed across FD evaluations
        return ad.sum_all(ad.dropout(xs[0], 0.7, True, np.random.default_rng(drop_seed)))

    checks.append(("dropout", dropout_f, [dx], None))

    nx = Tensor(away_from_zero(rng, (t_len, dim)), requires_grad=True)
    checks.append(("l2_norm_rows", lambda xs: ad.sum_all(ad.l2_norm_rows(xs[0])), [nx], None))

    tv = Tensor(distinct_entries(rng, t_len), requires_grad=True)
    k = max(1, t_len // 2)
    checks.append(("topk_mean", lambda xs: ad.topk_mean(xs[0], k), [tv], None))

    lx = Tensor(uniform_probe(rng, (t_len,), low=0.1, high=2.0), requires_grad=True)
    checks.append(("log", lambda xs: ad.sum_all(ad.log(xs[0])), [lx], None))
    checks.append(("sum", lambda xs: ad.sum_all(ad.mul(xs[0], xs[0])), [lx], None))
    checks.append(("mean", lambda xs: ad.mean_all(ad.mul(xs[0], xs[0])), [lx], None))
    return checks


def _loss_checks(rng, t_len, dim, k):
    from . import losses

    weights = losses.LossWeights(top_k=k)

    def bags(xs):
        # raw probes are mapped into valid bag ranges inside the checked
        # function so gradients flow through the mapping
        abn = losses.BagScores(
            magnitudes=ad.add(xs[0], 3.0), scores=ad.sigmoid(xs[1]), label=1
        )
        nrm = losses.BagScores(
            magnitudes=ad.add(xs[2], 3.0), scores=ad.sigmoid(xs[3]), label=0
        )
        return abn, nrm

    def probe():
        return [
            Tensor(distinct_entries(rng, t_len), requires_grad=True),
            Tensor(uniform_probe(rng, (t_len,)), requires_grad=True),
            Tensor(distinct_entries(rng, t_len), requires_grad=True),
            Tensor(uniform_probe(rng, (t_len,)), requires_grad=True),
        ]

    # probe magnitudes sit in (1, 5), so their top-k gap stays below 4 and a
    # margin of 6 keeps the hinge active and clear of its kink
    checks = [
        ("loss_magnitude", lambda xs: losses.magnitude_loss(*bags(xs), margin=6.0, k=k), probe(), None),
        ("loss_classification_abnormal", lambda xs: losses.classification_loss(bags(xs)[0], k), probe(), None),
        ("loss_classification_normal", lambda xs: losses.classification_loss(bags(xs)[1], k), probe(), None),
        ("loss_smoothness", lambda xs: losses.smoothness(bags(xs)[0]), probe(), None),
        ("loss_sparsity", lambda xs: losses.sparsity(bags(xs)[0]), probe(), None),
        ("loss_total", lambda xs: losses.total_loss(*bags(xs), weights).total, probe(), None),
    ]
    return checks


def _model_checks(rng, t_len, dim, k, max_coords):
    from . import losses, model

    params = model.init_params(dim, t_len, seed=int(rng.integers(0, 2**31)))
    weights = losses.LossWeights(top_k=k)
    abn_feat = uniform_probe(rng, (t_len, dim))
    nrm_feat = uniform_probe(rng, (t_len, dim))
    drop_seed = int(rng.integers(0, 2**31))

    feat_in = Tensor(uniform_probe(rng, (t_len, dim)), requires_grad=True)

    def attention_f(xs):
        return ad.sum_all(ad.mul(model.attention_forward(xs[0], params.attention), 0.25))

    def classifier_f(xs):
        scores = model.classifier_forward(
            xs[0], params.classifier, training=True, rng=np.random.default_rng(drop_seed)
        )
        return ad.sum_all(scores)

    param_tensors = [p.value for p in params.parameters()]

    def total_f(_xs):
        rng_fwd = np.random.default_rng(drop_seed)
        abn = model.model_forward(abn_feat, params, training=True, rng=rng_fwd, label=1)
        nrm = model.model_forward(nrm_feat, params, training=True, rng=rng_fwd, label=0)
        return losses.total_loss(abn, nrm, weights).total

    attn_in = Tensor(uniform_probe(rng, (t_len, dim)), requires_grad=True)
    return [
        ("model_attention", attention_f, [attn_in], None),
        ("model_classifier", classifier_f, [feat_in], None),
        ("model_total_loss_params", total_f, param_tensors, max_coords),
    ]


def run_checks(t_len=4, dim=8, seeds=10, base_seed=0, eps=DEFAULT_EPS, tol=DEFAULT_TOL,
               top_k=2, max_model_coords=6):
    """Run every operator and loss-term check across `seeds` probes.

    Returns a list of CheckResult, one row per named check, carrying the
    worst relative error seen over all seeds.
    """
    worst = {}
    coords = {}
    for s in range(seeds):
        rng = np.random.default_rng(base_seed + s)
        all_checks = (
            _operator_checks(rng, t_len, dim)
            + _loss_checks(rng, t_len, dim, top_k)
            + _model_checks(rng, t_len, dim, top_k, max_model_coords)
        )
        for name, f, inputs, max_coords in all_checks:
            err = grad_check(f, inputs, eps=eps, max_coords=max_coords, rng=rng)
            worst[name] = max(worst.get(name, 0.0), err)
            n = sum(min(x.size, max_coords) if max_coords else x.size for x in inputs)
            coords[name] = coords.get(name, 0) + n
    return [CheckResult(name, worst[name], coords[name], tol) for name in worst]


@contextlib.contextmanager
def broken_gradient():
    """Deliberately corrupt relu's backward pass (detector sanity hook).

    Lets tests and the CLI prove the checker actually catches wrong
    gradients; never active outside this context.
    """
    real_relu = ad.relu

    def bad_relu(x):
        x = ad.as_tensor(x)
        mask = x.data > 0

        def backward_fn(g):
            if x.requires_grad:
                x.grad += g * mask * 1.05

        return ad._result(np.where(mask, x.data, 0.0), (x,), backward_fn, "relu")

    ad.relu = bad_relu
    try:
        yield
    finally:
        ad.relu = real_relu
