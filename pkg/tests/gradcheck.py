"""Central finite-difference checks shared by the unit and acceptance tests."""

import numpy as np

from twinlab.distill import Activation, Conv1D, Dense, Flatten, LossSpec, MicroNet, gradients


def probe_net(seed=0):
    """Smooth (tanh) conv net with 468 parameters and two taps."""
    layers = [Conv1D(1, 3, 5, 2, 2), Activation("tanh"), Conv1D(3, 4, 3, 2, 1), Activation("tanh"),
              Flatten(), Dense(40, 10)]
    return MicroNet(layers, (1, 40), taps=(1, 3), rng_seed=seed)


def probe_batch(net, seed=0, batch=6):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, 40))
    y = rng.integers(0, 10, batch)
    _, taps = net.forward(rng.standard_normal((batch, 40)))
    return x, y, [t.copy() for t in taps]


def max_relative_error(net, x, y, spec, teacher_acts=None, h=1e-5, floor=1e-8):
    """Largest |analytic - numeric| / max(|analytic|, |numeric|, floor) over all parameters."""
    _, grad = gradients(net, x, y, spec, teacher_acts)
    base = net.params.copy()
    num = np.zeros_like(base)
    for i in range(base.size):
        net.params = base.copy()
        net.params[i] += h
        up = gradients(net, x, y, spec, teacher_acts)[0]
        net.params = base.copy()
        net.params[i] -= h
        down = gradients(net, x, y, spec, teacher_acts)[0]
        num[i] = (up - down) / (2 * h)
    net.params = base
    denom = np.maximum(np.maximum(np.abs(grad), np.abs(num)), floor)
    return float(np.max(np.abs(grad - num) / denom))


LOSS_SPECS = {
    "cross_entropy": LossSpec(1.0, 0.0),
    "rsa": LossSpec(0.0, 1.0),
    "weighted_sum": LossSpec(0.4, 2.5),
}
