"""Pure-numpy batch kernels for the dense network core.

This is the fallback backend; ``offmarl._fastcore`` implements the same
three functions in Cython on top of BLAS. Both operate on C-contiguous
float64 arrays and must agree numerically (up to BLAS rounding) so either
can serve a run.
"""

import numpy as np

BACKEND_NAME = "numpy"


def forward_batch(x, weights, biases):
    """Run the MLP on a batch.

    Returns the list of per-layer activations: post-ReLU hidden layers
    followed by the linear output, each of shape (batch, layer_width).
    """
    acts = []
    h = x
    last = len(weights) - 1
    for layer, (w, b) in enumerate(zip(weights, biases)):
        z = h @ w
        z += b
        if layer < last:
            np.maximum(z, 0.0, out=z)
        acts.append(z)
        h = z
    return acts


def backward_batch(x, acts, weights, grad_out):
    """Backpropagate upstream output gradients through cached activations.

    Returns (d_weights, d_biases) accumulated (summed) over the batch, i.e.
    the exact gradients of sum_b grad_out[b] . output[b].
    """
    n_layers = len(weights)
    d_weights = [None] * n_layers
    d_biases = [None] * n_layers
    g = grad_out
    for layer in range(n_layers - 1, -1, -1):
        inp = x if layer == 0 else acts[layer - 1]
        d_weights[layer] = inp.T @ g
        d_biases[layer] = g.sum(axis=0)
        if layer > 0:
            g = g @ weights[layer].T
            # ReLU derivative; post-activation sign equals pre-activation sign
            g *= acts[layer - 1] > 0.0
    return d_weights, d_biases


def adam_step(params, grads, first_moments, second_moments, step, lr, beta1, beta2, eps):
    """Bias-corrected Adam update, in place over a flat list of arrays.

    ``step`` is the already-incremented step counter (1 on the first call).
    """
    corr1 = 1.0 - beta1**step
    corr2 = 1.0 - beta2**step
    for p, g, m, v in zip(params, grads, first_moments, second_moments):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / corr1) / (np.sqrt(v / corr2) + eps)
