"""Finite-difference verification of every layer kind and loss."""

from dataclasses import dataclass

import numpy as np

from . import nn
from .train import LOSSES, loss_grads, loss_values

LAYER_TOL = 1e-5
LOSS_TOL = 1e-8
KINK_MARGIN = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tol: float
    checked: int
    skipped: int = 0

    @property
    def passed(self):
        return self.checked > 0 and self.max_rel_error <= self.tol


def _away_from_zero(rng, shape, margin=KINK_MARGIN):
    x = rng.uniform(-1.0, 1.0, shape)
    bad = np.abs(x) < margin
    while bad.any():
        x[bad] = rng.uniform(-1.0, 1.0, int(bad.sum()))
        bad = np.abs(x) < margin
    return x


def _distinct_pairs(rng, shape, margin=KINK_MARGIN):
    """Inputs whose width-2 pooling windows have a clear winner."""
    x = rng.uniform(-1.0, 1.0, shape)
    length = shape[-1] - shape[-1] % 2
    a, b = x[..., 0:length:2], x[..., 1:length:2]
    close = np.abs(a - b) < margin
    b[close] = a[close] + np.where(a[close] > 0, -0.5, 0.5)
    x[..., 1:length:2] = b
    return x


def check_layer(layer, x, train=False, fault=0.0, seed=0, h=1e-5, max_per_array=None):
    """Check input and parameter gradients of ``sum(layer(x) * R)`` for random R."""
    rng = np.random.default_rng(seed + 1)
    y = layer.forward(x, train)
    proj = rng.uniform(-1.0, 1.0, y.shape)
    dx = layer.backward(proj)
    arrays = [x] + [a for _, a in layer.param_arrays()]
    analytic = [dx] + [g * (1.0 + fault) for g in layer.grad_arrays()]
    analytic[0] = analytic[0] * (1.0 + fault)

    def loss():
        return float(np.sum(layer.forward(x, train) * proj))

    return nn.grad_check(loss, arrays, analytic, h=h, kink_state=layer.kink_state,
                         max_per_array=max_per_array, seed=seed)


def layer_items(seed=0):
    """(name, layer, input, train flag) cases covering all seven layer kinds."""
    rng = np.random.default_rng(seed)

    def conv(cin, cout, k, **kw):
        layer = nn.Conv1d(cin, cout, k, **kw)
        layer.params["weight"][...] = rng.uniform(-1, 1, layer.params["weight"].shape)
        layer.params["bias"][...] = rng.uniform(-1, 1, layer.params["bias"].shape)
        return layer

    dense = nn.Dense(12, 4)
    dense.params["weight"][...] = rng.uniform(-1, 1, (4, 12))
    dense.params["bias"][...] = rng.uniform(-1, 1, 4)
    bn = nn.BatchNorm1d(3)
    bn.params["gamma"][...] = rng.uniform(0.5, 1.5, 3)
    bn.params["beta"][...] = rng.uniform(-1, 1, 3)
    bn_infer = nn.BatchNorm1d(3)
    bn_infer.params["gamma"][...] = rng.uniform(0.5, 1.5, 3)
    bn_infer.buffers["running_mean"][...] = rng.uniform(-0.5, 0.5, 3)
    bn_infer.buffers["running_var"][...] = rng.uniform(0.5, 2.0, 3)
    res = nn.ResidualBlock(3, 3)
    for c in (res.conv1, res.conv2):
        c.params["weight"][...] = rng.uniform(-0.5, 0.5, c.params["weight"].shape)
        c.params["bias"][...] = rng.uniform(-0.2, 0.2, c.params["bias"].shape)
    return [
        ("conv1d same", conv(3, 4, 5), rng.uniform(-1, 1, (2, 3, 11)), False),
        ("conv1d valid stride2", conv(2, 3, 4, stride=2, padding="valid"), rng.uniform(-1, 1, (2, 2, 13)), False),
        ("relu", nn.ReLU(), _away_from_zero(rng, (2, 3, 9)), False),
        ("maxpool", nn.MaxPool1d(2, 2), _distinct_pairs(rng, (2, 3, 9)), False),
        ("batchnorm train", bn, rng.uniform(-1, 1, (4, 3, 6)), True),
        ("batchnorm infer", bn_infer, rng.uniform(-1, 1, (2, 3, 6)), False),
        ("dense", dense, rng.uniform(-1, 1, (3, 2, 6)), False),
        ("gap", nn.GlobalAvgPool(), rng.uniform(-1, 1, (2, 3, 7)), False),
        ("residual block", res, rng.uniform(-1, 1, (2, 3, 10)), False),
    ]


def loss_points():
    """Residuals in [-10, 10] kept clear of the mae/huber kinks at 0 and +-1."""
    pts = np.linspace(-10.0, 10.0, 41) + 0.0137
    return pts[(np.abs(pts) > KINK_MARGIN) & (np.abs(np.abs(pts) - 1.0) > KINK_MARGIN)]


def check_loss(loss, fault=0.0, delta=1.0, h=1e-5):
    pts = loss_points()
    worst = 0.0
    for e in pts:
        step = h * max(1.0, abs(e))
        numeric = (loss_values(loss, e + step, delta) - loss_values(loss, e - step, delta)) / (2 * step)
        analytic = loss_grads(loss, e, delta) * (1.0 + fault)
        worst = max(worst, nn.relative_error(float(analytic), float(numeric)))
    return CheckResult(f"loss {loss}", worst, LOSS_TOL, len(pts))


def run_suite(fault=0.0, seed=0):
    results = []
    for name, layer, x, train in layer_items(seed):
        rep = check_layer(layer, x, train, fault=fault, seed=seed)
        results.append(CheckResult(name, rep.max_rel_error, LAYER_TOL, rep.checked, rep.skipped))
    for loss in LOSSES:
        results.append(check_loss(loss, fault=fault))
    return results


def check_model(model, x, y, loss, delta=1.0, train=False, fault=0.0, h=1e-5, max_per_array=None, seed=0):
    """Parameter gradients of the batch-mean loss for a whole model.

    Elements whose perturbation flips a ReLU or max-pool decision are
    skipped and counted.
    """
    pred = model.forward(x, train)
    e = pred - y
    model.backward(loss_grads(loss, e, delta) / len(y))
    analytic = [g * (1.0 + fault) for g in model.gradients()]

    def objective():
        return float(np.mean(loss_values(loss, model.forward(x, train) - y, delta)))

    return nn.grad_check(objective, model.parameters(), analytic, h=h, kink_state=model.kink_state,
                         max_per_array=max_per_array, seed=seed)
