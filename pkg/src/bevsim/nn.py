"""Tiny layer toolkit on top of the autodiff tensors.

Modules are plain parameter holders: construction draws weights from the
rng handed in, __call__ builds graph ops. named_parameters() walks
attributes recursively in definition order, which fixes the optimizer's
update order and keeps checkpoints deterministic.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    def named_parameters(self, prefix="", _seen=None):
        """Yield (name, Tensor) for every parameter in definition order.

        Shared submodules (e.g. tied depth heads) are emitted once, under
        the first name that reaches them.
        """
        seen = _seen if _seen is not None else set()
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad and id(value) not in seen:
                    seen.add(id(value))
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.", seen)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.", seen)
                    elif isinstance(item, Tensor) and item.requires_grad and id(item) not in seen:
                        seen.add(id(item))
                        yield f"{name}.{i}", item

    def param_dict(self):
        return dict(self.named_parameters())

    def n_params(self):
        return sum(p.size for _, p in self.named_parameters())


def he_weight(rng, shape, fan_in):
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


def zeros_param(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


class Conv2d(Module):
    """k x k cross-correlation with bias, 'same' padding by default."""

    def __init__(self, rng, c_in, c_out, k=3, stride=1, pad=None, bias_init=0.0, zero=False):
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        fan_in = c_in * k * k
        if zero:
            self.w = zeros_param((c_out, c_in, k, k))
        else:
            self.w = he_weight(rng, (c_out, c_in, k, k), fan_in)
        self.b = Tensor(np.full(c_out, float(bias_init)), requires_grad=True)

    def __call__(self, x):
        out = ad.conv2d(x, self.w, self.stride, self.pad)
        c_out = self.b.shape[0]
        bshape = (1, c_out, 1, 1) if out.ndim == 4 else (c_out, 1, 1)
        return ad.add(out, ad.broadcast_to(ad.reshape(self.b, bshape), out.shape))


class Linear(Module):
    def __init__(self, rng, d_in, d_out, zero=False):
        if zero:
            self.w = zeros_param((d_in, d_out))
        else:
            self.w = he_weight(rng, (d_in, d_out), d_in)
        self.b = zeros_param((d_out,))

    def __call__(self, x):
        out = ad.matmul(x, self.w)
        return ad.add(out, ad.broadcast_to(ad.reshape(self.b, (1, self.b.shape[0])), out.shape))
