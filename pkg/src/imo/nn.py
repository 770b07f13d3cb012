"""Parameter container and thin layer wrappers over the core ops."""

from collections import OrderedDict

import numpy as np

from .core import ops
from .core.tensor import Tensor, default_dtype
from .errors import ShapeError


class ModelParams:
    """Ordered ``name -> Tensor`` map of learnable weights and state buffers.

    Trainable entries have ``requires_grad=True``; buffers (batch-norm running
    statistics) do not and are updated in place by the forward pass.
    """

    def __init__(self, dtype=None):
        self.dtype = np.dtype(dtype or default_dtype())
        self._entries = OrderedDict()

    def add(self, name, array, trainable=True):
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(array, dtype=self.dtype), requires_grad=trainable)
        self._entries[name] = t
        return t

    def __getitem__(self, name):
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __iter__(self):
        return iter(self._entries.items())

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def trainable(self, prefix=""):
        return [(k, t) for k, t in self._entries.items() if t.requires_grad and k.startswith(prefix)]

    def zero_grad(self):
        for t in self._entries.values():
            t.grad = None

    def state(self):
        return OrderedDict((k, t.data.copy()) for k, t in self._entries.items())

    def load_state(self, state):
        missing = [k for k in self._entries if k not in state]
        extra = [k for k in state if k not in self._entries]
        if missing or extra:
            raise ShapeError(f"parameter names differ: missing={missing} unexpected={extra}")
        for k, t in self._entries.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ShapeError(f"parameter {k!r}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data = arr.astype(t.dtype, copy=True)


def fan_in_uniform(rng, shape, fan_in):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv:
    """2-d or 3-d convolution with optional bias."""

    def __init__(self, params, name, cin, cout, k, rng, stride=1, padding=0,
                 groups=1, bias=True, dims=2):
        shape = (cout, cin // groups) + (k,) * dims
        fan_in = (cin // groups) * k ** dims
        self.w = params.add(f"{name}.weight", fan_in_uniform(rng, shape, fan_in))
        self.b = params.add(f"{name}.bias", np.zeros(cout)) if bias else None
        self.stride, self.padding, self.groups, self.dims = stride, padding, groups, dims

    def __call__(self, x):
        conv = ops.conv2d if self.dims == 2 else ops.conv3d
        return conv(x, self.w, self.b, self.stride, self.padding, self.groups)


class Linear:
    def __init__(self, params, name, fin, fout, rng, bias=True):
        self.w = params.add(f"{name}.weight", fan_in_uniform(rng, (fout, fin), fin))
        self.b = params.add(f"{name}.bias", np.zeros(fout)) if bias else None

    def __call__(self, x):
        return ops.linear(x, self.w, self.b)


class BatchNorm:
    def __init__(self, params, name, channels, momentum=0.1, eps=1e-5):
        self.gamma = params.add(f"{name}.gamma", np.ones(channels))
        self.beta = params.add(f"{name}.beta", np.zeros(channels))
        self.running_mean = params.add(f"{name}.running_mean", np.zeros(channels), trainable=False)
        self.running_var = params.add(f"{name}.running_var", np.ones(channels), trainable=False)
        self.momentum, self.eps = momentum, eps

    def __call__(self, x, training):
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean.data,
                              self.running_var.data, training, self.momentum, self.eps)
