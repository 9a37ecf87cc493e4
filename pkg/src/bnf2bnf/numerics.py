"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` (entered with a
``with`` block) whenever at least one input requires a gradient. Outside a
tape everything runs as plain numpy, which is the inference fast path.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError, NumericError

DTYPE = np.float64
LAYER_NORM_EPS = 1e-5


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self.is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return slice_(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class DetachReplay:
    """Records the value of every ``detach`` in a reference pass, then replays those
    values in later passes after ``rewind``.

    Central differences taken under replay hold each stop-gradient output constant,
    which is the function backpropagation differentiates.
    """

    _active: list["DetachReplay"] = []

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.pos: int | None = None

    def __enter__(self) -> "DetachReplay":
        DetachReplay._active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        DetachReplay._active.pop()

    def rewind(self) -> None:
        self.pos = 0

    def _take(self, x: Tensor) -> np.ndarray:
        if self.pos is None:
            self.values.append(x.data.copy())
            return x.data
        if self.pos >= len(self.values) or self.values[self.pos].shape != x.shape:
            raise ContractError("detach replay: pass differs from the recorded reference pass")
        self.pos += 1
        return self.values[self.pos - 1].copy()


def detach(x: Tensor) -> Tensor:
    """Same values, cut from the graph."""
    if DetachReplay._active:
        return Tensor(DetachReplay._active[-1]._take(x))
    return Tensor(x.data)


class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    _stack: list["Tape"] = []

    def __init__(self):
        self.records: list[tuple[tuple[Tensor, ...], tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()


def active_tape() -> Tape | None:
    return Tape._stack[-1] if Tape._stack else None


def _record(inputs: tuple[Tensor, ...], outputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
    tape = active_tape()
    if tape is None:
        return
    for t in inputs:
        if t.requires_grad:
            break
    else:
        return
    for o in outputs:
        o.requires_grad = True
        o.is_leaf = False
    tape.records.append((inputs, outputs, backward_fn))


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape.

    Leaf gradients accumulate across calls until ``zero_grad``; the tape is
    cleared afterwards.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    for inputs, outputs, fn in reversed(tape.records):
        grads_out = [o.grad for o in outputs]
        if all(g is None for g in grads_out):
            continue
        grads_out = [np.zeros_like(o.data) if g is None else g for o, g in zip(outputs, grads_out)]
        grads_in = fn(*grads_out)
        for t, g in zip(inputs, grads_in):
            if g is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = g.copy() if t.is_leaf else g
            elif t.is_leaf:
                # leaf buffers are private (allocated by zero_grad), safe to update in place
                t.grad += g
            else:
                t.grad = t.grad + g
    tape.clear()


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, kind: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise -----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data)
    _record((a, b), (out,), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data)
    _record((a, b), (out,), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data)
    _record(
        (a, b),
        (out,),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )
    return out


def square(x: Tensor) -> Tensor:
    out = Tensor(x.data * x.data)
    _record((x,), (out,), lambda g: (2.0 * g * x.data,))
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * np.tanh(0.5 * z) + 0.5


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = Tensor(s)
    _record((x,), (out,), lambda g: (g * s * (1.0 - s),))
    return out


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    out = Tensor(t)
    _record((x,), (out,), lambda g: (g * (1.0 - t * t),))
    return out


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0.0
    out = Tensor(np.where(keep, x.data, 0.0))
    _record((x,), (out,), lambda g: (g * keep,))
    return out


def softplus(x: Tensor) -> Tensor:
    out = Tensor(np.logaddexp(0.0, x.data))
    _record((x,), (out,), lambda g: (g * _sigmoid(x.data),))
    return out


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    out = Tensor(e)
    _record((x,), (out,), lambda g: (g * e,))
    return out


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    s = _softmax(x.data)
    out = Tensor(s)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    _record((x,), (out,), back)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm: input {x.shape} vs gain {gain.shape} / bias {bias.shape}")
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    out = Tensor(xhat * gain.data + bias.data)

    def back(g):
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        flat_g = g.reshape(-1, n)
        return dx, (flat_g * xhat.reshape(-1, n)).sum(axis=0), flat_g.sum(axis=0)

    _record((x, gain, bias), (out,), back)
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None (eval mode) or rate is 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    if rng is None or rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    out = Tensor(x.data * mask)
    _record((x,), (out,), lambda g: (g * mask,))
    return out


# linear algebra ----------------------------------------------------------------


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x``."""
    if x.shape[-1] != weight.shape[0] or (bias is not None and bias.shape != weight.shape[1:]):
        raise DimensionError(
            f"affine: input {x.shape} vs weight {weight.shape}"
            + (f" / bias {bias.shape}" if bias is not None else "")
        )
    y = x.data @ weight.data
    if bias is not None:
        y = y + bias.data
    out = Tensor(y)
    n_in, n_out = weight.shape

    def back(g):
        flat_g = g.reshape(-1, n_out)
        gw = x.data.reshape(-1, n_in).T @ flat_g
        gx = g @ weight.data.T
        return (gx, gw) if bias is None else (gx, gw, flat_g.sum(axis=0))

    _record((x, weight) if bias is None else (x, weight, bias), (out,), back)
    return out


# structural --------------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {ref} and {t.shape}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=ax))
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    _record(tuple(tensors), (out,), lambda g: tuple(np.split(g, bounds, axis=ax)))
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise DimensionError(f"stack: incompatible shapes {tensors[0].shape} and {t.shape}")
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))
    n = len(tensors)
    _record(tuple(tensors), (out,), lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))
    return out


def slice_(x: Tensor, index) -> Tensor:
    out = Tensor(x.data[index])

    def back(g):
        gx = np.zeros_like(x.data)
        if _needs_add_at(index):
            np.add.at(gx, index, g)
        else:
            gx[index] = g
        return (gx,)

    _record((x,), (out,), back)
    return out


def _needs_add_at(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    _record((x,), (out,), lambda g: (g.reshape(x.shape),))
    return out


def repeat_frames(x: Tensor, r: int) -> Tensor:
    """Repeat every frame along the time axis (-2) ``r`` times."""
    if r < 1:
        raise ConfigurationError(f"upsample factor must be >= 1, got {r}")
    if r == 1:
        return x
    out = Tensor(np.repeat(x.data, r, axis=-2))

    def back(g):
        shape = g.shape[:-2] + (x.shape[-2], r, g.shape[-1])
        return (g.reshape(shape).sum(axis=-2),)

    _record((x,), (out,), back)
    return out


# reductions ----------------------------------------------------------------------


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    out = Tensor(x.data.sum(axis=axis))

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    _record((x,), (out,), back)
    return out


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis), 1.0 / n)


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of ``x`` over entries whose (batch, time) mask is 1.

    ``x`` is [B, T, ...] and ``mask`` is [B, T]. The time axis is reduced
    first and sequentially so trailing padded frames (mask 0) cannot change
    the value, not even in the last bit.
    """
    mask = np.asarray(mask, dtype=DTYPE)
    if x.shape[:2] != mask.shape:
        raise DimensionError(f"masked_mean: values {x.shape} vs mask {mask.shape}")
    per_frame = int(np.prod(x.shape[2:], dtype=np.int64))
    count = mask.sum() * per_frame
    if count == 0:
        raise ContractError("masked_mean: mask selects no entries")
    m = mask.reshape(mask.shape + (1,) * (x.ndim - 2))
    masked = x.data * m
    over_time = _sequential_time_sum(masked)
    out = Tensor(np.array(over_time.sum() / count))

    def back(g):
        return (np.broadcast_to(g / count * m, x.shape).copy(),)

    _record((x,), (out,), back)
    return out


def _sequential_time_sum(a: np.ndarray) -> np.ndarray:
    acc = np.zeros(a.shape[:1] + a.shape[2:], dtype=DTYPE)
    for t in range(a.shape[1]):
        acc = acc + a[:, t]
    return acc


def masked_mse(pred: Tensor, target, mask: np.ndarray) -> Tensor:
    """Masked mean-squared error; padded frames contribute exactly zero."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: prediction {pred.shape} vs target {target.shape}")
    return masked_mean(square(sub(pred, target)), mask)


def weighted_sum(weights: Tensor, memory: Tensor) -> Tensor:
    """Context vectors: weights [B, T] times memory [B, T, D] summed over T."""
    if weights.shape != memory.shape[:2]:
        raise DimensionError(f"weighted_sum: weights {weights.shape} vs memory {memory.shape}")
    w = weights.data[:, :, None]
    out = Tensor(_sequential_time_sum(w * memory.data))

    def back(g):
        gw = (memory.data * g[:, None, :]).sum(axis=-1)
        gm = w * g[:, None, :]
        return gw, gm

    _record((weights, memory), (out,), back)
    return out


# recurrent and convolutional ---------------------------------------------------------


def lstm_cell_step(x: Tensor, h_prev: Tensor, c_prev: Tensor, weight: Tensor, bias: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step. ``weight`` is [(I + H), 4H] acting on concat(x, h_prev); gate order i, f, g, o."""
    hdim = h_prev.shape[-1]
    in_dim = x.shape[-1]
    if (
        c_prev.shape != h_prev.shape
        or weight.shape != (in_dim + hdim, 4 * hdim)
        or bias.shape != (4 * hdim,)
        or x.shape[:-1] != h_prev.shape[:-1]
    ):
        raise DimensionError(
            f"lstm_cell_step: x {x.shape}, h {h_prev.shape}, c {c_prev.shape}, "
            f"weight {weight.shape}, bias {bias.shape}"
        )
    xh = np.concatenate([x.data, h_prev.data], axis=-1)
    z = xh @ weight.data + bias.data
    i = _sigmoid(z[..., :hdim])
    f = _sigmoid(z[..., hdim : 2 * hdim])
    gc = np.tanh(z[..., 2 * hdim : 3 * hdim])
    o = _sigmoid(z[..., 3 * hdim :])
    c = f * c_prev.data + i * gc
    tc = np.tanh(c)
    h_out, c_out = Tensor(o * tc), Tensor(c)

    def back(gh, gc_out):
        dc = gc_out + gh * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [
                dc * gc * i * (1.0 - i),
                dc * c_prev.data * f * (1.0 - f),
                dc * i * (1.0 - gc * gc),
                gh * tc * o * (1.0 - o),
            ],
            axis=-1,
        )
        flat = dz.reshape(-1, 4 * hdim)
        gw = xh.reshape(-1, in_dim + hdim).T @ flat
        gxh = dz @ weight.data.T
        return gxh[..., :in_dim], gxh[..., in_dim:], dc * f, gw, flat.sum(axis=0)

    _record((x, h_prev, c_prev, weight, bias), (h_out, c_out), back)
    return h_out, c_out


def _as_batched(x: Tensor, kind: str) -> bool:
    if x.ndim not in (2, 3):
        raise DimensionError(f"{kind}: expected [T, C] or [B, T, C], got {x.shape}")
    return x.ndim == 2


def _check_kernel(k: int, stride: int) -> None:
    if k % 2 == 0:
        raise ConfigurationError(f"convolution kernel size must be odd, got {k}")
    if stride != 1:
        raise ConfigurationError(f"only stride 1 is supported, got {stride}")


def depthwise_conv1d(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Per-channel same-padded convolution. x [T, C] or [B, T, C]; kernel [K, C]."""
    single = _as_batched(x, "depthwise_conv1d")
    k = kernel.shape[0]
    _check_kernel(k, stride)
    if kernel.ndim != 2 or kernel.shape[1] != x.shape[-1]:
        raise DimensionError(f"depthwise_conv1d: input {x.shape} vs kernel {kernel.shape}")
    xd = x.data[None] if single else x.data
    t_len, pad = xd.shape[1], k // 2
    xp = np.pad(xd, ((0, 0), (pad, pad), (0, 0)))
    y = np.zeros_like(xd)
    for j in range(k):
        y = y + xp[:, j : j + t_len] * kernel.data[j]
    out = Tensor(y[0] if single else y)

    def back(g):
        gd = g[None] if single else g
        gxp = np.zeros_like(xp)
        gk = np.empty_like(kernel.data)
        for j in range(k):
            gxp[:, j : j + t_len] += gd * kernel.data[j]
            gk[j] = (gd * xp[:, j : j + t_len]).reshape(-1, gd.shape[-1]).sum(axis=0)
        gx = gxp[:, pad : pad + t_len]
        return (gx[0] if single else gx), gk

    _record((x, kernel), (out,), back)
    return out


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded full convolution. x [B, T, Cin]; weight [K, Cin, Cout]."""
    single = _as_batched(x, "conv1d")
    k, c_in, c_out = weight.shape
    _check_kernel(k, 1)
    if x.shape[-1] != c_in or (bias is not None and bias.shape != (c_out,)):
        raise DimensionError(f"conv1d: input {x.shape} vs weight {weight.shape}")
    xd = x.data[None] if single else x.data
    b, t_len, pad = xd.shape[0], xd.shape[1], k // 2
    xp = np.pad(xd, ((0, 0), (pad, pad), (0, 0)))
    cols = np.concatenate([xp[:, j : j + t_len] for j in range(k)], axis=-1)
    w2 = weight.data.reshape(k * c_in, c_out)
    y = cols @ w2
    if bias is not None:
        y = y + bias.data
    out = Tensor(y[0] if single else y)

    def back(g):
        gd = g[None] if single else g
        flat = gd.reshape(-1, c_out)
        gw = (cols.reshape(-1, k * c_in).T @ flat).reshape(weight.shape)
        gcols = gd @ w2.T
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, j : j + t_len] += gcols[..., j * c_in : (j + 1) * c_in]
        gx = gxp[:, pad : pad + t_len]
        gx = gx[0] if single else gx
        return (gx, gw) if bias is None else (gx, gw, flat.sum(axis=0))

    _record((x, weight) if bias is None else (x, weight, bias), (out,), back)
    return out


def gmm_alignment(
    params: Tensor, mu_prev: Tensor, n_positions: int, sigma_min: float
) -> tuple[Tensor, Tensor, Tensor]:
    """Mixture-of-Gaussians alignment over source positions 0..n_positions-1.

    ``params`` is [B, 3K] holding raw mixture logits, mean increments and
    widths. Returns (weights [B, T], new means [B, K], widths [B, K]).
    """
    k = mu_prev.shape[-1]
    if params.shape[-1] != 3 * k or params.shape[:-1] != mu_prev.shape[:-1]:
        raise DimensionError(f"gmm_alignment: params {params.shape} vs means {mu_prev.shape}")
    raw = params.data
    omega = _softmax(raw[..., :k])
    delta = np.logaddexp(0.0, raw[..., k : 2 * k])
    sigma = np.logaddexp(0.0, raw[..., 2 * k :]) + sigma_min
    mu = mu_prev.data + delta
    pos = np.arange(n_positions, dtype=DTYPE)
    z = (pos - mu[..., None]) / sigma[..., None]
    gauss = np.exp(-0.5 * z * z)
    weights = np.einsum("...k,...kt->...t", omega, gauss)
    w_out, mu_out, sigma_out = Tensor(weights), Tensor(mu), Tensor(sigma)

    def back(gw, gmu, gsigma):
        d_omega = np.einsum("...t,...kt->...k", gw, gauss)
        dz = gw[..., None, :] * omega[..., None] * gauss * (-z)
        d_mu = gmu - (dz / sigma[..., None]).sum(axis=-1)
        d_sigma = gsigma - (dz * z / sigma[..., None]).sum(axis=-1)
        d_logits = omega * (d_omega - (d_omega * omega).sum(axis=-1, keepdims=True))
        d_raw = np.concatenate(
            [d_logits, d_mu * _sigmoid(raw[..., k : 2 * k]), d_sigma * _sigmoid(raw[..., 2 * k :])],
            axis=-1,
        )
        return d_raw, d_mu

    _record((params, mu_prev), (w_out, mu_out, sigma_out), back)
    return w_out, mu_out, sigma_out


# dispatch ----------------------------------------------------------------------------

PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "affine": affine,
    "add": add,
    "sub": sub,
    "mul": mul,
    "square": square,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "softplus": softplus,
    "exp": exp,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "dropout": dropout,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "stack": lambda *ts, axis=0: stack(ts, axis=axis),
    "slice": slice_,
    "reshape": reshape,
    "sum": sum_,
    "mean": mean,
    "masked_mean": masked_mean,
    "masked_mse": masked_mse,
    "weighted_sum": weighted_sum,
    "repeat_frames": repeat_frames,
}


def primitive_forward(kind: str, *inputs, **options) -> Tensor:
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ConfigurationError(f"unknown primitive {kind!r}; known: {sorted(PRIMITIVES)}") from None
    return fn(*inputs, **options)


# verification oracle -------------------------------------------------------------------


def finite_difference_gradient(
    f: Callable[[], float], params: Sequence[Tensor], eps: float = 1e-5
) -> list[np.ndarray]:
    """Central differences of ``f`` w.r.t. every scalar entry of ``params``.

    ``f`` is re-evaluated with each entry nudged in place and must be
    deterministic. No tape is involved.
    """
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    grads = []
    for p in params:
        flat = p.data.reshape(-1)
        g = np.empty(flat.size, dtype=DTYPE)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f())
            flat[i] = orig - eps
            down = float(f())
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"non-finite objective while probing {p.name or 'parameter'}[{i}]")
            g[i] = (up - down) / (2.0 * eps)
        grads.append(g.reshape(p.shape))
    return grads


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest |a - n| / max(|a|, |n|), skipping entries where both are below ``floor``."""
    a, n = np.abs(analytic), np.abs(numeric)
    keep = (a >= floor) | (n >= floor)
    if not keep.any():
        return 0.0
    return float((np.abs(analytic - numeric)[keep] / np.maximum(a, n)[keep]).max())
