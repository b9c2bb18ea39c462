"""The learner's building blocks on their own: forward pass, TD loss,
analytic gradient against finite differences, and one SGD step.

Run with ``python demos/q_learning_pieces.py``.
"""
import numpy as np

from fedtraffic.learner import (LearnerConfig, Minibatch, ReplayBuffer, apply_gradient,
                                compute_gradient, forward, merge_gradients, network_for,
                                td_loss)

rng = np.random.default_rng(1)
cfg = LearnerConfig(hidden_sizes=(16, 16))
net = network_for(cfg, rng)
target = net.copy()
print("layer sizes", net.layer_sizes, "parameters", net.params.size)
print("Q(s) for a random state:", np.round(forward(net, rng.random(6)), 4))

# fill a replay buffer with random transitions and draw one minibatch
buf = ReplayBuffer(1000)
for _ in range(600):
    buf.push(rng.random(6), int(rng.integers(5)), float(rng.random()), rng.random(6),
             bool(rng.random() < 0.01))
batch = buf.sample(rng)
loss = td_loss(net, target, batch, cfg.gamma)
g = compute_gradient(net, target, batch, cfg.gamma)
print("TD loss %.5f, gradient norm %.5f" % (loss, np.linalg.norm(g.values)))

# central differences on a handful of coordinates
h = 1e-5
for i in rng.choice(net.params.size, 5, replace=False):
    plus, minus = net.copy(), net.copy()
    plus.params[i] += h
    minus.params[i] -= h
    fd = (td_loss(plus, target, batch, cfg.gamma) - td_loss(minus, target, batch, cfg.gamma)) / (2 * h)
    print("  coord %4d  analytic % .6e  numeric % .6e" % (i, g.values[i], fd))

# a small step downhill lowers the loss on the same batch
stepped = apply_gradient(net, g, 1e-2)
print("loss after one step: %.5f" % td_loss(stepped, target, batch, cfg.gamma))

# what the server does with seven gradients
grads = [compute_gradient(net, target, buf.sample(rng), cfg.gamma, source_agent=k)
         for k in range(7)]
merged = merge_gradients(grads)
print("merged gradient norm %.5f (mean of individual norms %.5f)"
      % (np.linalg.norm(merged.values), np.mean([np.linalg.norm(x.values) for x in grads])))
