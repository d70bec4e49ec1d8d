"""Dense float64 tensors with tape-based reverse-mode differentiation.

A Tensor wraps a numpy array and remembers how it was produced. Each op
returns a new Tensor whose ``_backward`` closure scatters the incoming
gradient to the op's inputs; ``Tensor.backward()`` walks the tape in
reverse topological order. Gradients accumulate, so a value consumed by
several downstream nodes receives the sum of their contributions.

Conv2d is valid-mode, stride 1, square kernels, lowered to a single GEMM
through im2col. The backward pass recomputes the column buffer from the
saved input instead of retaining it, which keeps peak memory flat when
the same layer runs many times per step.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DataError, DimensionError, UsageError

_grad_enabled = True


class no_grad:
    """Context manager that disables tape construction inside its block."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Backpropagate from a scalar loss through the recorded tape."""
        if self.data.shape != ():
            raise UsageError(
                f"backward() needs a scalar, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.accumulate_grad(np.ones((), dtype=np.float64))
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # Arithmetic sugar. Scalars are wrapped; everything stays float64.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def parameter(data) -> Tensor:
    """A leaf tensor that collects gradients."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise and linear algebra


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(-g)

    return _make(-a.data, (a,), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(
            f"matmul expects 2D operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}"
        )
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _make(data, (a, b), backward)


def tsum(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, float(g)))

    return _make(np.asarray(a.data.sum()), (a,), backward)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    if n == 0:
        raise DimensionError("mean of an empty tensor")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, float(g) / n))

    return _make(np.asarray(a.data.mean()), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.data.shape))

    return _make(data, (a,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map. x [B,N] or [N]; weight [M,N]; bias [M]. Returns [B,M] or [M]."""
    if weight.ndim != 2:
        raise DimensionError(f"linear weight must be 2D, got {weight.data.shape}")
    single = x.ndim == 1
    if x.ndim not in (1, 2):
        raise DimensionError(f"linear input must be 1D or 2D, got {x.data.shape}")
    n = x.data.shape[-1]
    if n != weight.data.shape[1]:
        raise DimensionError(
            f"linear: input features {n} != weight in-features {weight.data.shape[1]}"
        )
    if bias is not None and bias.data.shape != (weight.data.shape[0],):
        raise DimensionError(
            f"linear: bias shape {bias.data.shape} != ({weight.data.shape[0]},)"
        )
    x2 = x.data[None, :] if single else x.data
    data = x2 @ weight.data.T
    if bias is not None:
        data = data + bias.data
    if single:
        data = data[0]

    def backward(g):
        g2 = g[None, :] if single else g
        xin = x.data[None, :] if single else x.data
        if weight.requires_grad:
            weight.accumulate_grad(g2.T @ xin)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g2.sum(axis=0))
        if x.requires_grad:
            gx = g2 @ weight.data
            x.accumulate_grad(gx[0] if single else gx)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(data, parents, backward)


# ---------------------------------------------------------------------------
# Activations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * mask)

    # np.maximum, not np.where: NaN must propagate so diverged values are
    # caught by the loss finiteness check instead of silently becoming 0
    return _make(np.maximum(x.data, 0.0), (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    # Evaluated branch-wise so large |x| cannot overflow exp.
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * out * (1.0 - out))

    return _make(out, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * (1.0 - out * out))

    return _make(out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if x.requires_grad:
            dot = (g * out).sum(axis=axis, keepdims=True)
            x.accumulate_grad(out * (g - dot))

    return _make(out, (x,), backward)


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh, "softmax": softmax}


def activation(x: Tensor, mode: str) -> Tensor:
    if mode not in _ACTIVATIONS:
        raise ConfigError(
            f"unknown activation {mode!r}, expected one of {sorted(_ACTIVATIONS)}"
        )
    return _ACTIVATIONS[mode](x)


# ---------------------------------------------------------------------------
# Convolution and pooling


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """[B,C,H,W] -> [B, H2*W2, C*k*k] patches for a valid stride-1 conv."""
    b, c, h, w = x.shape
    h2, w2 = h - k + 1, w - k + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, h2 * w2, c * k * k)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Valid-mode stride-1 convolution.

    x is [C,H,W] or [B,C,H,W]; weight is [O,C,k,k] with a square kernel;
    bias, if given, is [O]. Output spatial size is (H-k+1, W-k+1).
    """
    if weight.ndim != 4 or weight.data.shape[2] != weight.data.shape[3]:
        raise DimensionError(
            f"conv2d weight must be [O,C,k,k] with square kernel, got {weight.data.shape}"
        )
    single = x.ndim == 3
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv2d input must be 3D or 4D, got {x.data.shape}")
    xb = x.data[None] if single else x.data
    b, c, h, w = xb.shape
    o, cw, k, _ = weight.data.shape
    if c != cw:
        raise DimensionError(
            f"conv2d: input has {c} channels but weight expects {cw}"
        )
    if h < k or w < k:
        raise DimensionError(
            f"conv2d: kernel {k} larger than input {h}x{w}"
        )
    if bias is not None and bias.data.shape != (o,):
        raise DimensionError(f"conv2d: bias shape {bias.data.shape} != ({o},)")
    h2, w2 = h - k + 1, w - k + 1
    f = h2 * w2
    wmat = weight.data.reshape(o, c * k * k)
    # One flat GEMM over all batch positions beats B skinny ones.
    cols = _im2col(xb, k).reshape(b * f, c * k * k)
    out = (cols @ wmat.T).reshape(b, f, o)
    out = out.transpose(0, 2, 1).reshape(b, o, h2, w2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    if single:
        out = out[0]

    def backward(g):
        gb = g[None] if single else g
        gf = np.ascontiguousarray(
            gb.reshape(b, o, f).transpose(0, 2, 1)
        ).reshape(b * f, o)
        if weight.requires_grad:
            weight.accumulate_grad((gf.T @ cols).reshape(o, c, k, k))
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(gb.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = (gf @ wmat).reshape(b, h2, w2, c, k, k)
            dx = np.zeros_like(xb)
            for dy in range(k):
                for dxo in range(k):
                    dx[:, :, dy:dy + h2, dxo:dxo + w2] += dcols[
                        :, :, :, :, dy, dxo
                    ].transpose(0, 3, 1, 2)
            x.accumulate_grad(dx[0] if single else dx)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


def max_pool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max pool. Ties resolve to the first element in
    row-major scan order within each window."""
    if window != 2:
        raise ConfigError(f"max_pool2d supports window=2 only, got {window}")
    single = x.ndim == 3
    if x.ndim not in (3, 4):
        raise DimensionError(f"max_pool2d input must be 3D or 4D, got {x.data.shape}")
    xb = x.data[None] if single else x.data
    b, c, h, w = xb.shape
    if h % 2 or w % 2:
        raise DimensionError(f"max_pool2d needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    v = xb.reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        b, c, h2, w2, 4
    )
    idx = v.argmax(axis=-1)
    out = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]
    if single:
        out = out[0]

    def backward(g):
        gb = g[None] if single else g
        dv = np.zeros((b, c, h2, w2, 4), dtype=np.float64)
        np.put_along_axis(dv, idx[..., None], gb[..., None], axis=-1)
        dx = dv.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
            b, c, h, w
        )
        if x.requires_grad:
            x.accumulate_grad(dx[0] if single else dx)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# Batch normalization


class BatchNormState:
    """Learnable scale/shift plus running statistics for one BN layer.

    momentum is the retained fraction of the old running value. Batch
    variance is the biased (divide by N) estimate, in both the batch
    statistics and the running update.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.9):
        if channels < 1:
            raise ConfigError(f"batch norm needs channels >= 1, got {channels}")
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self.eps = eps
        self.momentum = momentum

    @property
    def channels(self) -> int:
        return self.gamma.data.shape[0]


def batch_norm(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Normalize per channel. x is [B,C] or [B,C,H,W].

    Training mode uses batch statistics and updates the running ones;
    inference mode uses the stored running statistics and never writes.
    """
    if x.ndim == 2:
        axes = (0,)
        view = (1, -1)
    elif x.ndim == 4:
        axes = (0, 2, 3)
        view = (1, -1, 1, 1)
    else:
        raise DimensionError(f"batch_norm input must be 2D or 4D, got {x.data.shape}")
    c = x.data.shape[1]
    if c != state.channels:
        raise DimensionError(
            f"batch_norm: input has {c} channels, state has {state.channels}"
        )
    gamma, beta = state.gamma, state.beta
    gview = gamma.data.reshape(view)
    bview = beta.data.reshape(view)

    if training:
        n = x.data.shape[0] * (1 if x.ndim == 2 else x.data.shape[2] * x.data.shape[3])
        if x.data.shape[0] < 2:
            raise ConfigError("batch_norm training mode needs batch size >= 2")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        invstd = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.data - mean.reshape(view)) * invstd.reshape(view)
        out = gview * xhat + bview
        m = state.momentum
        state.running_mean = m * state.running_mean + (1.0 - m) * mean
        state.running_var = m * state.running_var + (1.0 - m) * var

        def backward(g):
            if gamma.requires_grad:
                gamma.accumulate_grad((g * xhat).sum(axis=axes))
            if beta.requires_grad:
                beta.accumulate_grad(g.sum(axis=axes))
            if x.requires_grad:
                sum_g = g.sum(axis=axes).reshape(view)
                sum_gx = (g * xhat).sum(axis=axes).reshape(view)
                dx = (gview * invstd.reshape(view) / n) * (
                    n * g - sum_g - xhat * sum_gx
                )
                x.accumulate_grad(dx)

        return _make(out, (x, gamma, beta), backward)

    invstd = 1.0 / np.sqrt(state.running_var + state.eps)
    xhat = (x.data - state.running_mean.reshape(view)) * invstd.reshape(view)
    out = gview * xhat + bview

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=axes))
        if x.requires_grad:
            x.accumulate_grad(g * gview * invstd.reshape(view))

    return _make(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# Loss


def cross_entropy_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross entropy over a batch. logits [B,K], labels int in [0,K)."""
    if logits.ndim != 2:
        raise DimensionError(f"cross entropy expects [B,K] logits, got {logits.data.shape}")
    labels = np.asarray(labels)
    b, k = logits.data.shape
    if labels.shape != (b,):
        raise DimensionError(
            f"labels shape {labels.shape} does not match batch {b}"
        )
    if not np.issubdtype(labels.dtype, np.integer):
        raise DataError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.min() < 0 or labels.max() >= k:
        raise DataError(
            f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]"
        )
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(b), labels].mean()
    probs = np.exp(logp)

    def backward(g):
        if logits.requires_grad:
            d = probs.copy()
            d[np.arange(b), labels] -= 1.0
            logits.accumulate_grad(d * (float(g) / b))

    return _make(np.asarray(loss), (logits,), backward)


# ---------------------------------------------------------------------------
# Optimizers


class Optimizer:
    """SGD or Adam over an explicit parameter list.

    step() applies one update from the accumulated gradients and then
    zeroes them. A parameter with no gradient at step time is a usage
    error: it means backward never reached it.
    """

    def __init__(
        self,
        params: list[Tensor],
        kind: str = "adam",
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if kind not in ("sgd", "adam"):
            raise ConfigError(f"optimizer kind must be 'sgd' or 'adam', got {kind!r}")
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        if not params:
            raise ConfigError("optimizer needs at least one parameter")
        self.params = list(params)
        self.kind = kind
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        if kind == "adam":
            self._m = [np.zeros_like(p.data) for p in self.params]
            self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise UsageError(
                    f"parameter {i} has no gradient; call backward() before step()"
                )
        self.t += 1
        if self.kind == "sgd":
            for p in self.params:
                p.data -= self.lr * p.grad
        else:
            b1, b2 = self.beta1, self.beta2
            bc1 = 1.0 - b1 ** self.t
            bc2 = 1.0 - b2 ** self.t
            for i, p in enumerate(self.params):
                self._m[i] = b1 * self._m[i] + (1.0 - b1) * p.grad
                self._v[i] = b2 * self._v[i] + (1.0 - b2) * p.grad * p.grad
                mhat = self._m[i] / bc1
                vhat = self._v[i] / bc2
                p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        for p in self.params:
            p.grad = None
