"""Gradient inducing: reweight top-level channels by consensus feedback.

For one image with top block ``F5`` and embedding ``e = head(F5)``, the
similarity to the group consensus is ``c = e . e_dag``.  The positive part of
``dc/dF5`` is averaged over space to give one importance weight per channel,
and ``F5`` is rescaled channel-wise by those weights.
"""

import numpy as np
import torch

from .encoder import ConsensusEmbedding
from .errors import NumericError, ShapeError


def _as_tensor(x, dtype=None):
    if isinstance(x, ConsensusEmbedding):
        x = x.weights
    t = x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x))
    return t.to(dtype) if dtype is not None else t


def compute_similarity(e_n, e_dag):
    """Inner product of an embedding with the consensus (or any vector)."""
    a = _as_tensor(e_n, torch.float64).reshape(-1)
    b = _as_tensor(e_dag, torch.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"similarity of vectors with dimensions {a.numel()} and {b.numel()}")
    return float(torch.dot(a, b))


def induced_gradient(backbone, f5, e_dag):
    """``ReLU(dc/dF5)`` for a batch of top blocks against one consensus.

    Backpropagation runs through ``backbone.head`` only, on a detached copy of
    ``f5``; parameter ``.grad`` fields are never touched.  Images in the batch
    are independent, so the gradient of the summed similarities is the
    per-image gradient.
    """
    single = f5.ndim == 3
    x = f5[None] if single else f5
    dtype = next(backbone.parameters()).dtype
    x = x.detach().to(dtype).requires_grad_(True)
    weights = _as_tensor(e_dag, dtype).reshape(-1)
    with torch.enable_grad():
        logits = backbone.head(x)
        if logits.shape[-1] != weights.numel():
            raise ShapeError(f"consensus has {weights.numel()} entries, embedding has {logits.shape[-1]}")
        sim = (logits * weights).sum()
        (grad,) = torch.autograd.grad(sim, x, only_inputs=True)
    if not torch.isfinite(grad).all():
        raise NumericError("non-finite induced gradient")
    grad = torch.relu(grad)
    return grad[0] if single else grad


def channel_weights(g):
    """Global average pooling of a ``C x H x W`` (or ``N x C x H x W``) gradient."""
    if g.ndim not in (3, 4):
        raise ShapeError(f"expected a C x H x W gradient, got shape {tuple(g.shape)}")
    return g.mean(dim=(-2, -1))


def induce_features(f5, w):
    """Scale channel ``k`` of ``f5`` by ``w[k]``."""
    w = torch.as_tensor(w, dtype=f5.dtype)
    if w.shape[-1] != f5.shape[-3] or (w.ndim == 2 and f5.ndim == 4 and w.shape[0] != f5.shape[0]):
        raise ShapeError(f"{w.shape[-1]} channel weights for features with {f5.shape[-3]} channels")
    return f5 * w[..., None, None]


def gim(backbone, f5, e_dag):
    """Induced features and channel weights in one call; weights carry no graph."""
    w = channel_weights(induced_gradient(backbone, f5, e_dag)).detach().to(f5.dtype)
    return induce_features(f5, w), w
