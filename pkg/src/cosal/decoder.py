"""Top-down decoding with attention retention and deep supervision.

Level ``i`` (4 down to 1) gates the encoder block ``F^i`` with the upsampled
prediction of level ``i + 1``, merges it into the upsampled running state and
predicts a new single-channel map.  The first guide is the normalized channel
mean of the induced top block.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericError, ShapeError

DECODER_CHANNELS = 64


def upsample(x, size):
    """Bilinear resize (corner alignment off) of an ``N x C x H x W`` tensor."""
    size = tuple(int(s) for s in size)
    if tuple(x.shape[-2:]) == size:
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def _batched(x):
    if x.ndim == 2:
        return x[None, None], 2
    if x.ndim == 3:
        return x[None], 3
    return x, 4


def initial_guide(f5_induced):
    """Channel mean of the induced top block, min-max normalized per image.

    Constant maps normalize to zero.  Returns ``N x 1 x h x w`` for batched
    input and ``h x w`` for a single ``C x h x w`` block.
    """
    x, nd = _batched(f5_induced)
    m = x.mean(dim=1, keepdim=True)
    lo = m.amin(dim=(-2, -1), keepdim=True)
    hi = m.amax(dim=(-2, -1), keepdim=True)
    span = hi - lo
    safe = torch.where(span > 0, span, torch.ones_like(span))
    s = torch.where(span > 0, (m - lo) / safe, torch.zeros_like(m))
    return s[0, 0] if nd == 3 else s


def arm_gate(guide, f_i):
    """Multiply every channel of ``f_i`` by the upsampled single-channel guide."""
    g, _ = _batched(guide)
    f, nd = _batched(f_i)
    if g.shape[1] != 1:
        raise ShapeError(f"guide must have one channel, got {g.shape[1]}")
    (gh, gw), (fh, fw) = g.shape[-2:], f.shape[-2:]
    if fh % gh or fw % gw or fh // gh != fw // gw:
        raise ShapeError(f"cannot upsample a {gh}x{gw} guide onto {fh}x{fw} features")
    out = upsample(g, (fh, fw)) * f
    return out[0] if nd == 3 else out


def _conv(c_in, c_out, k=3):
    return nn.Conv2d(c_in, c_out, k, padding=k // 2)


class Decoder(nn.Module):
    """Reduce (R), merge (E) and predict (D) heads for levels 1-4, plus the top reduction.

    ``use_arm=False`` replaces gating with a plain skip connection.
    """

    def __init__(self, widths, channels=DECODER_CHANNELS, use_arm=True):
        super().__init__()
        widths = tuple(int(w) for w in widths)
        if len(widths) != 5:
            raise ShapeError("decoder expects five encoder widths")
        self.widths = widths
        self.use_arm = use_arm
        c = channels
        self.top = nn.Sequential(_conv(widths[4], c), nn.ReLU(inplace=True))
        self.reduce = nn.ModuleList(
            nn.Sequential(_conv(widths[i], c), nn.ReLU(inplace=True), _conv(c, c), nn.ReLU(inplace=True))
            for i in range(4)
        )
        self.merge = nn.ModuleList(
            nn.Sequential(_conv(c, c), nn.ReLU(inplace=True), _conv(c, c), nn.ReLU(inplace=True))
            for _ in range(4)
        )
        self.predict = nn.ModuleList(
            nn.Sequential(_conv(c, c), nn.ReLU(inplace=True), _conv(c, 1, k=1), nn.Sigmoid())
            for _ in range(4)
        )

    def step(self, level, guide, f_i, p_prev):
        """One level of the top-down chain; returns ``(gated F^i, P^i, S^i)``."""
        k = level - 1
        gated = arm_gate(guide, f_i) if self.use_arm else f_i
        p = self.merge[k](upsample(p_prev, f_i.shape[-2:]) + self.reduce[k](gated))
        return gated, p, self.predict[k](p)

    def forward(self, blocks, f5_induced, out_size=None, return_states=False):
        """Maps ``[S5, S4, S3, S2, S1]``; ``S1`` is resized to ``out_size`` when given."""
        if len(blocks) != 5:
            raise ShapeError(f"expected 5 encoder blocks, got {len(blocks)}")
        for b, w in zip(blocks, self.widths):
            if b.shape[1] != w:
                raise ShapeError(f"encoder block has {b.shape[1]} channels, decoder expects {w}")
        guide = initial_guide(f5_induced)
        p = self.top(f5_induced)
        maps, states, gated_blocks = [guide], [p], []
        for level in (4, 3, 2, 1):
            gated, p, guide = self.step(level, guide, blocks[level - 1], p)
            maps.append(guide)
            states.append(p)
            gated_blocks.append(gated)
        if out_size is not None:
            maps[-1] = upsample(maps[-1], out_size)
        if not all(torch.isfinite(m).all() for m in maps):
            raise NumericError("non-finite decoder output")
        if return_states:
            return maps, states, gated_blocks
        return maps


def decode(pyramid, f5_induced, params):
    """Decode one image's pyramid; returns five ``h x w`` maps, ``S1`` at input size."""
    blocks = [b[None] for b in pyramid.blocks]
    f5 = f5_induced[None] if f5_induced.ndim == 3 else f5_induced
    maps = params(blocks, f5, out_size=pyramid.input_size)
    return [m[0, 0] for m in maps]
