import numpy as np

from einconv.blocks.models import Block, Params
from einconv.errors import ConfigError


class MaxPool(Block):
    """Non-overlapping max pooling over every spatial axis.

    Trailing rows that do not fill a window are dropped. The gradient goes to
    the first maximum of each window in row-major order.
    """

    def __init__(self, factor: int = 2):
        if factor < 1:
            raise ConfigError(f"MaxPool factor must be positive, got {factor}")
        self.factor = factor

    @property
    def name(self) -> str:
        return "MaxPool"

    def describe(self) -> str:
        return "MaxPool" if self.factor == 2 else f"MaxPool({self.factor})"

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        *spatial, channels = input_shape
        pooled = tuple(s // self.factor for s in spatial)
        if min(pooled, default=1) < 1:
            raise ConfigError(f"MaxPool({self.factor}) cannot shrink spatial shape {tuple(spatial)}")
        return pooled + (channels,)

    def _windows(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        f = self.factor
        n, *spatial, c = x.shape
        pooled = [s // f for s in spatial]
        cropped = x[(slice(None),) + tuple(slice(0, p * f) for p in pooled)]
        # (n, p1, f, p2, f, ..., c) -> (n, p1, p2, ..., c, f, f, ...)
        split = cropped.reshape([n] + [v for p in pooled for v in (p, f)] + [c])
        ndim = len(pooled)
        order = [0] + [1 + 2 * a for a in range(ndim)] + [1 + 2 * ndim] + [2 + 2 * a for a in range(ndim)]
        windows = split.transpose(order).reshape([n] + pooled + [c, f**ndim])
        return windows, (x.shape, pooled, order)

    def forward(self, params: Params, x: np.ndarray):
        windows, layout = self._windows(x)
        arg = windows.argmax(axis=-1)
        out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
        return out, (arg, layout)

    def backward(self, params: Params, cache, grad_out: np.ndarray):
        arg, (shape, pooled, order) = cache
        f = self.factor
        n, c = shape[0], shape[-1]
        ndim = len(pooled)
        routed = np.zeros(arg.shape + (f**ndim,))
        np.put_along_axis(routed, arg[..., None], grad_out[..., None], axis=-1)
        split_shape = [n] + pooled + [c] + [f] * ndim
        inverse = np.argsort(order)
        cropped = routed.reshape(split_shape).transpose(inverse).reshape(
            [n] + [p * f for p in pooled] + [c]
        )
        grad_x = np.zeros(shape)
        grad_x[(slice(None),) + tuple(slice(0, p * f) for p in pooled)] = cropped
        return grad_x, {}


class GlobalAvgPool(Block):
    @property
    def name(self) -> str:
        return "GAP"

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        return input_shape[-1:]

    def forward(self, params: Params, x: np.ndarray):
        axes = tuple(range(1, x.ndim - 1))
        return x.mean(axis=axes), x.shape

    def backward(self, params: Params, cache, grad_out: np.ndarray):
        shape = cache
        n, *spatial, c = shape
        count = int(np.prod(spatial))
        grad = np.broadcast_to(grad_out.reshape([n] + [1] * len(spatial) + [c]) / count, shape)
        return grad.copy(), {}
