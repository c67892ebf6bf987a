"""Soft IoU objective and its deep-supervision total."""

import numpy as np
import torch

from .decoder import upsample
from .errors import ContractError, ShapeError

DENOMINATOR_FLOOR = 1e-8
SUPERVISED_LEVELS = 4


def _soft_iou(s, g):
    inter = (s * g).sum(dim=(-2, -1))
    union = (s + g - s * g).sum(dim=(-2, -1))
    empty = union <= 0
    loss = 1.0 - inter / union.clamp_min(DENOMINATOR_FLOOR)
    return torch.where(empty, torch.zeros_like(loss), loss), empty


def soft_iou(s, g, return_flag=False):
    """``1 - sum(s*g) / sum(s + g - s*g)`` over the last two axes.

    Both maps empty counts as perfect agreement: the loss is 0 and, with
    ``return_flag=True``, the degenerate flag is set.  Numpy inputs give
    floats; tensors stay differentiable.
    """
    as_numpy = not torch.is_tensor(s)
    st = torch.as_tensor(np.asarray(s, dtype=np.float64)) if as_numpy else s
    gt = torch.as_tensor(np.asarray(g, dtype=np.float64)) if not torch.is_tensor(g) else g.to(st.dtype)
    if st.shape != gt.shape:
        raise ShapeError(f"prediction {tuple(st.shape)} and mask {tuple(gt.shape)} differ")
    loss, empty = _soft_iou(st, gt)
    if as_numpy:
        loss = float(loss) if loss.ndim == 0 else loss.numpy()
        empty = bool(empty) if empty.ndim == 0 else empty.numpy()
    if return_flag:
        return loss, empty
    return loss


def total_loss(levels, masks):
    """Plain double sum of soft IoU over images and the four supervised levels.

    ``levels[n]`` holds the maps ``[S1, S2, S3, S4]`` of image ``n`` (any
    order; the sum is symmetric) and ``masks[n]`` its ground truth.  Maps are
    bilinearly resized to the mask resolution first.
    """
    if len(levels) != len(masks):
        raise ContractError(f"{len(levels)} prediction sets for {len(masks)} masks")
    total = None
    for maps, g in zip(levels, masks):
        if len(maps) != SUPERVISED_LEVELS:
            raise ContractError(f"each image contributes exactly {SUPERVISED_LEVELS} supervised maps, got {len(maps)}")
        g = torch.as_tensor(g)
        for s in maps:
            s = torch.as_tensor(s).to(g.dtype if g.is_floating_point() else torch.float32)
            if s.shape[-2:] != g.shape[-2:]:
                s = upsample(s.reshape(1, 1, *s.shape[-2:]), g.shape[-2:])[0, 0]
            term = _soft_iou(s.reshape(g.shape[-2:]), g.reshape(g.shape[-2:]).to(s.dtype))[0]
            total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return total


def group_loss(maps, masks):
    """Batched form used in training.

    ``maps`` is the decoder output ``[S5, S4, S3, S2, S1]`` (each
    ``N x 1 x h x w``) and ``masks`` is ``N x 1 x H x W``; ``S5`` is unsupervised.
    """
    if len(maps) != SUPERVISED_LEVELS + 1:
        raise ContractError(f"expected 5 decoder maps, got {len(maps)}")
    size = masks.shape[-2:]
    total = masks.new_zeros(())
    for s in maps[1:]:
        total = total + _soft_iou(upsample(s, size), masks)[0].sum()
    return total
