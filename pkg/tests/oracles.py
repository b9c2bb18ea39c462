"""Independent reference computations used by several test modules."""
import numpy as np

from fedtraffic.learner import Minibatch, QNetwork, td_loss


def random_problem(rng, hidden=None, batch=8, n_actions=None):
    """Small random network, target network and minibatch."""
    if hidden is None:
        hidden = tuple(int(h) for h in rng.integers(2, 7, size=rng.integers(1, 3)))
    n_actions = n_actions or int(rng.integers(2, 5))
    sizes = (6, *hidden, n_actions)
    net = QNetwork.initialize(sizes, rng)
    net = QNetwork(sizes, net.params + rng.normal(0, 0.1, net.params.size))
    target = QNetwork.initialize(sizes, rng)
    mb = Minibatch(rng.uniform(0, 1, (batch, 6)), rng.integers(0, n_actions, batch),
                   rng.normal(0.5, 0.5, batch), rng.uniform(0, 1, (batch, 6)),
                   rng.random(batch) < 0.2)
    return net, target, mb


def fd_gradient(net, target, batch, gamma, h=1e-5):
    """Central finite differences of the TD loss, one coordinate at a time."""
    out = np.empty_like(net.params)
    for i in range(net.params.size):
        p_plus = net.params.copy()
        p_minus = net.params.copy()
        p_plus[i] += h
        p_minus[i] -= h
        out[i] = (td_loss(QNetwork(net.layer_sizes, p_plus), target, batch, gamma)
                  - td_loss(QNetwork(net.layer_sizes, p_minus), target, batch, gamma)) / (2 * h)
    return out


def relative_error(analytic, numeric, floor=1e-6):
    """Per-coordinate relative error; ``floor`` guards coordinates that are zero."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale
