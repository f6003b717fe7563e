"""Supervised fine-tuning probe: a linear head trained jointly with the encoder.

This is the stronger "from scratch" comparison: starting from random-init
weights it is plain supervised training of the same encoder, which the
frozen-feature control under-states.
"""

from __future__ import annotations

import numpy as np

from ..model import BatchInputs, EncoderParams, backward, forward, scene_inputs
from .probe import ProbeResult, _softmax, score


def _stack(inputs: list[BatchInputs]) -> BatchInputs:
    x2 = None if inputs[0].x2 is None else np.concatenate([i.x2 for i in inputs])
    n2 = None if inputs[0].n2 is None else np.concatenate([i.n2 for i in inputs])
    n = sum(i.n_anchor for i in inputs)
    return BatchInputs(np.concatenate([i.x3 for i in inputs]), np.concatenate([i.n3 for i in inputs]),
                       x2, n2, n, 0, 0)


def finetune_probe(params: EncoderParams, train_scenes, test_scenes, n_classes: int, objective: str,
                   steps: int = 500, lr: float = 0.1, image_size: int = 64) -> tuple[ProbeResult, EncoderParams]:
    """Full-batch gradient descent on mean cross-entropy over head and encoder.

    Returns the held-out IoU scores and the fine-tuned encoder.
    """
    from .train import canonical_view  # local: train imports this module lazily

    def batch(scenes):
        views = [canonical_view(s, image_size) for s in scenes]
        return _stack([scene_inputs(v, params, objective) for v in views]), np.concatenate([s.labels for s in scenes])

    tr, tr_y = batch(train_scenes)
    te, te_y = batch(test_scenes)
    onehot = np.eye(n_classes)[tr_y]
    n = len(tr_y)
    w = np.zeros((params.out_dim, n_classes))
    b = np.zeros(n_classes)
    for _ in range(steps):
        feats, cache = forward(tr, params)
        f = feats["fused"]
        g = (_softmax(f @ w + b) - onehot) / n
        df = g @ w.T
        w -= lr * (f.T @ g)
        b -= lr * g.sum(axis=0)
        grads = backward(cache, {"fused": df}, params)
        params = params.with_tensors({k: t - lr * grads[k] for k, t in params.tensors().items()})

    pred = np.argmax(forward(te, params)[0]["fused"] @ w + b, axis=1)
    return score(pred, te_y, tr_y, n_classes), params
