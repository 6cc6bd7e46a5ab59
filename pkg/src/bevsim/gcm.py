"""Geometry compensation: stacks of multi-head deformable self-attention.

Applied in the UV plane before lifting (shared across camera views) and in
the BEV plane after pooling. Offset and output projections start at zero,
so a freshly built stack is exactly the identity; training moves the
sampling locations away from the reference grid.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Linear, Module


def reference_grid(h, w):
    """(h, w, 2) cell centers in [0,1]^2: [..., 0] = (j+0.5)/w along width,
    [..., 1] = (i+0.5)/h along height (the bilinear sampling convention)."""
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    return np.stack([(jj + 0.5) / w, (ii + 0.5) / h], axis=-1)


class DeformAttnLayer(Module):
    """One deformable self-attention layer with a residual connection."""

    def __init__(self, rng, channels, heads=2, points=4, offset_radius=0.1):
        if channels % heads != 0:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.points = points
        self.channels = channels
        self.query = Linear(rng, channels, channels)
        self.value = Linear(rng, channels, channels)
        self.offset = Linear(rng, channels, heads * points * 2, zero=True)
        self.attn = Linear(rng, channels, heads * points)
        self.out = Linear(rng, channels, channels, zero=True)
        self.radius = Tensor(np.array([offset_radius]), requires_grad=True)

    def __call__(self, f):
        b, c, h, w = f.shape
        hw = h * w
        m, k = self.heads, self.points
        cm = c // m

        flat = ad.reshape(ad.transpose(f, (0, 2, 3, 1)), (b * hw, c))
        q = self.query(flat)
        off = ad.mul(ad.tanh(self.offset(q)), self.radius)
        off = ad.reshape(off, (b, hw, m, k, 2))
        att = ad.softmax(ad.reshape(self.attn(q), (b, hw, m, k)), axis=3)

        ref = reference_grid(h, w).reshape(1, hw, 1, 1, 2)
        ref = Tensor(np.broadcast_to(ref, (b, hw, m, k, 2)).copy())
        loc = ad.clip(ad.add(ref, off), 0.0, 1.0)

        # all heads sampled in one call: maps (B*M, Cm, H, W), pts (B*M, HW*K, 2)
        val = ad.reshape(self.value(flat), (b, hw, m, cm))
        vmaps = ad.reshape(ad.transpose(val, (0, 2, 3, 1)), (b * m, cm, h, w))
        pts = ad.reshape(ad.transpose(loc, (0, 2, 1, 3, 4)), (b * m, hw * k, 2))
        sampled = ad.reshape(ad.bilinear_sample(vmaps, pts), (b, m, hw, k, cm))
        wgt = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (b, m, hw, k, 1))
        pooled = ad.tsum(ad.mul(ad.broadcast_to(wgt, (b, m, hw, k, cm)), sampled), axis=3)
        merged = ad.reshape(ad.transpose(pooled, (0, 2, 1, 3)), (b * hw, c))
        proj = ad.reshape(self.out(merged), (b, hw, c))
        proj = ad.transpose(proj, (0, 2, 1))
        return ad.add(f, ad.reshape(proj, (b, c, h, w)))

    def sampling_stats(self, f):
        """Attention mass splatted at the nearest cell of each sampling
        location, summed over batch/queries/heads (diagnostic only)."""
        b, c, h, w = f.shape
        hw = h * w
        m, k = self.heads, self.points
        with ad.no_grad():
            flat = ad.reshape(ad.transpose(f, (0, 2, 3, 1)), (b * hw, c))
            q = self.query(flat)
            off = ad.mul(ad.tanh(self.offset(q)), self.radius)
            off = ad.reshape(off, (b, hw, m, k, 2)).data
            att = ad.softmax(ad.reshape(self.attn(q), (b, hw, m, k)), axis=3).data
        ref = reference_grid(h, w).reshape(1, hw, 1, 1, 2)
        loc = np.clip(ref + off, 0.0, 1.0)
        jx = np.clip((loc[..., 0] * w).astype(np.int64), 0, w - 1)
        iy = np.clip((loc[..., 1] * h).astype(np.int64), 0, h - 1)
        mass = np.zeros((h, w))
        np.add.at(mass, (iy.reshape(-1), jx.reshape(-1)), att.reshape(-1))
        return mass


class GeometryCompensation(Module):
    """A stack of deformable attention layers; n_layers=0 is the identity."""

    def __init__(self, rng, channels, n_layers=2, heads=2, points=4, offset_radius=0.1):
        self.layers = [
            DeformAttnLayer(rng, channels, heads, points, offset_radius)
            for _ in range(n_layers)
        ]

    def __call__(self, f):
        for layer in self.layers:
            f = layer(f)
        return f

    def attention_mass(self, f):
        total = None
        for layer in self.layers:
            mass = layer.sampling_stats(f)
            total = mass if total is None else total + mass
            with ad.no_grad():
                f = layer(f)
        return total
