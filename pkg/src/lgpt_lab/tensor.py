"""Dense float64 tensors with a dynamic tape for reverse-mode autodiff.

Every learnable computation in the repo flows through this module. Design
choices: 64-bit floats throughout (finite-difference verification needs the
precision), a define-by-run tape (graph topology varies per example), and
strictly ordered gradient accumulation so repeated runs are bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LAYER_NORM_EPS = 1e-5

# When True, every op asserts its output is finite. Enabled by the test
# suite; off by default because it costs a full pass over each result.
check_finite = False


class TensorError(ValueError):
    """Contract violation in a tensor operation (shape, domain, tape use)."""


class GradientError(RuntimeError):
    """Non-finite gradient encountered during an optimizer step."""


class FrozenParameterError(RuntimeError):
    """An optimizer was pointed at parameters that do not accept gradients."""


class Tensor:
    """A dense float64 array plus autodiff bookkeeping.

    ``tape_id`` is set when the tensor is produced by a recorded operation;
    leaves (parameters, constants) keep it as None.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape_id: int | None = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Record:
    kind: str
    inputs: tuple
    output: Tensor
    backward_fn: object  # callable: grad_out -> tuple of per-input grads


class Tape:
    """Append-only record of operations; backward walks it once, reversed."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


_TAPE_STACK: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _emit(kind: str, out_data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    out = Tensor(out_data)
    if check_finite and not np.all(np.isfinite(out.data)):
        raise TensorError(f"non-finite values produced by op '{kind}'")
    tape = active_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        out.tape_id = len(tape.records)
        tape.records.append(_Record(kind, inputs, out, backward_fn))
    return out


def backward(loss: Tensor, params=None) -> None:
    """Populate .grad on every requires_grad ancestor of a scalar loss.

    ``params``, when given, is an iterable of leaf tensors that should end
    up with an explicit (possibly zero) gradient even if they did not
    participate in the computation.
    """
    if loss.data.shape != ():
        raise TensorError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    tape = active_tape()
    if tape is None:
        raise TensorError("backward requires an active tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    refs: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        refs.pop(id(rec.output), None)
        if g is None:
            continue
        input_grads = rec.backward_fn(g)
        for inp, gi in zip(rec.inputs, input_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                refs[key] = inp
    for key, g in grads.items():
        t = refs[key]
        t.grad = g if t.grad is None else t.grad + g
    if params is not None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise TensorError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def add_bias(a: Tensor, bias: Tensor) -> Tensor:
    """Broadcast-add a length-d bias vector to every row of a (m, d) tensor."""
    if a.data.shape[-1] != bias.data.shape[-1] or bias.data.ndim != 1:
        raise TensorError(f"add_bias shape mismatch: {a.data.shape} vs {bias.data.shape}")
    return _emit("add_bias", a.data + bias.data, (a, bias),
                 lambda g: (g, g.sum(axis=0)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise TensorError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g, ad=a.data, bd=b.data: (g * bd, g * ad))


def mul_rowvec(a: Tensor, row: Tensor) -> Tensor:
    """Multiply every row of a (m, d) tensor by a (1, d) row vector."""
    if row.data.shape != (1, a.data.shape[1]):
        raise TensorError(f"mul_rowvec shape mismatch: {a.data.shape} vs {row.data.shape}")
    return _emit("mul_rowvec", a.data * row.data, (a, row),
                 lambda g, ad=a.data, rd=row.data: (g * rd, (g * ad).sum(axis=0, keepdims=True)))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise TensorError(f"matmul shape mismatch: {a.data.shape} vs {b.data.shape}")
    return _emit("matmul", a.data @ b.data, (a, b),
                 lambda g, ad=a.data, bd=b.data: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _emit("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def concat_rows(parts: list[Tensor]) -> Tensor:
    sizes = [p.data.shape[0] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=0)

    def bwd(g, sizes=sizes):
        grads, off = [], 0
        for s in sizes:
            grads.append(g[off:off + s])
            off += s
        return tuple(grads)

    return _emit("concat_rows", out, tuple(parts), bwd)


def concat_cols(parts: list[Tensor]) -> Tensor:
    sizes = [p.data.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)

    def bwd(g, sizes=sizes):
        grads, off = [], 0
        for s in sizes:
            grads.append(g[:, off:off + s])
            off += s
        return tuple(grads)

    return _emit("concat_cols", out, tuple(parts), bwd)


def gather_rows(a: Tensor, ids) -> Tensor:
    idx = np.asarray(ids, dtype=np.intp)

    def bwd(g, idx=idx, shape=a.data.shape):
        ga = np.zeros(shape)
        np.add.at(ga, idx, g)
        return (ga,)

    return _emit("gather_rows", a.data[idx], (a,), bwd)


def tile_rows(a: Tensor, count: int) -> Tensor:
    if a.data.shape[0] != 1:
        raise TensorError(f"tile_rows expects a single row, got {a.data.shape}")
    return _emit("tile_rows", np.repeat(a.data, count, axis=0), (a,),
                 lambda g: (g.sum(axis=0, keepdims=True),))


def repeat_cols(a: Tensor, block: int) -> Tensor:
    """Repeat each column `block` times: (m, h) -> (m, h*block)."""
    m, h = a.data.shape
    return _emit("repeat_cols", np.repeat(a.data, block, axis=1), (a,),
                 lambda g, m=m, h=h, block=block: (g.reshape(m, h, block).sum(axis=2),))


def block_sum_cols(a: Tensor, block: int) -> Tensor:
    """Sum disjoint column blocks of width `block`: (m, h*block) -> (m, h)."""
    m, d = a.data.shape
    if d % block != 0:
        raise TensorError(f"block_sum_cols: width {d} not divisible by {block}")
    h = d // block
    out = a.data.reshape(m, h, block).sum(axis=2)
    return _emit("block_sum_cols", out, (a,),
                 lambda g, block=block: (np.repeat(g, block, axis=1),))


def sum_rows(a: Tensor) -> Tensor:
    """Sum over rows: (m, d) -> (1, d)."""
    m = a.data.shape[0]
    return _emit("sum_rows", a.data.sum(axis=0, keepdims=True), (a,),
                 lambda g, m=m: (np.repeat(g, m, axis=0),))


def mean_rows(a: Tensor) -> Tensor:
    m = a.data.shape[0]
    return _emit("mean_rows", a.data.mean(axis=0, keepdims=True), (a,),
                 lambda g, m=m: (np.repeat(g / m, m, axis=0),))


def sum_all(a: Tensor) -> Tensor:
    return _emit("sum_all", np.asarray(a.data.sum()), (a,),
                 lambda g, shape=a.data.shape: (np.broadcast_to(g, shape).copy() if shape else g,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit("tanh", out, (a,), lambda g, out=out: (g * (1.0 - out * out),))


# ---------------------------------------------------------------------------
# Normalization, attention and loss primitives
# ---------------------------------------------------------------------------

def softmax_rows(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bwd(g, out=out):
        dot = (g * out).sum(axis=1, keepdims=True)
        return ((g - dot) * out,)

    return _emit("softmax_rows", out, (a,), bwd)


def segment_softmax(a: Tensor, seg_ids, num_segments: int) -> Tensor:
    """Column-wise softmax within row groups sharing a segment id.

    Rows of `a` belonging to the same segment form one softmax; computed
    with per-segment max subtraction for stability.
    """
    idx = np.asarray(seg_ids, dtype=np.intp)
    seg_max = np.full((num_segments, a.data.shape[1]), -np.inf)
    np.maximum.at(seg_max, idx, a.data)
    e = np.exp(a.data - seg_max[idx])
    seg_sum = np.zeros((num_segments, a.data.shape[1]))
    np.add.at(seg_sum, idx, e)
    out = e / seg_sum[idx]

    def bwd(g, out=out, idx=idx, num_segments=num_segments):
        dot = np.zeros((num_segments, g.shape[1]))
        np.add.at(dot, idx, g * out)
        return ((g - dot[idx]) * out,)

    return _emit("segment_softmax", out, (a,), bwd)


def segment_sum_rows(a: Tensor, seg_ids, num_segments: int) -> Tensor:
    """Sum rows into their segment slot: (m, d) -> (num_segments, d)."""
    idx = np.asarray(seg_ids, dtype=np.intp)
    out = np.zeros((num_segments, a.data.shape[1]))
    np.add.at(out, idx, a.data)
    return _emit("segment_sum_rows", out, (a,), lambda g, idx=idx: (g[idx],))


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    mu = a.data.mean(axis=1, keepdims=True)
    var = a.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out = xhat * gain.data + bias.data

    def bwd(g, xhat=xhat, inv=inv, gd=gain.data, d=a.data.shape[1]):
        dxhat = g * gd
        da = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return (da, (g * xhat).sum(axis=0), g.sum(axis=0))

    return _emit("layer_norm", out, (a, gain, bias), bwd)


def cross_entropy_masked(logits: Tensor, targets, mask) -> Tensor:
    """Mean NLL over masked positions of a (T, V) logit matrix."""
    tgt = np.asarray(targets, dtype=np.intp)
    msk = np.asarray(mask, dtype=np.float64)
    t_len, vocab = logits.data.shape
    if len(tgt) != t_len or len(msk) != t_len:
        raise TensorError(f"cross_entropy_masked: {t_len} logit rows, "
                          f"{len(tgt)} targets, {len(msk)} mask entries")
    if np.any((tgt < 0) | (tgt >= vocab)):
        raise TensorError("cross_entropy_masked: target id out of vocabulary range")
    n_active = msk.sum()
    if n_active == 0:
        raise TensorError("cross_entropy_masked: all-zero mask gives a degenerate loss")
    zmax = logits.data.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(logits.data - zmax).sum(axis=1))
    nll = lse - logits.data[np.arange(t_len), tgt]
    out = np.asarray((nll * msk).sum() / n_active)

    def bwd(g, tgt=tgt, msk=msk, n_active=n_active, zmax=zmax, ld=logits.data):
        p = np.exp(ld - zmax)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(len(tgt)), tgt] -= 1.0
        return (g * p * (msk / n_active)[:, None],)

    return _emit("cross_entropy_masked", out, (logits,), bwd)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamWState:
    """Per-parameter moment buffers plus step counter and hyperparameters."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class AdamW:
    """Decoupled weight decay Adam over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if lr <= 0:
            raise TensorError(f"AdamW: lr must be positive, got {lr}")
        for name, p in params.items():
            if not p.requires_grad:
                raise FrozenParameterError(
                    f"parameter group '{name}' is frozen and cannot be optimized")
        self.params = dict(params)
        self.state = AdamWState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                                weight_decay=weight_decay)
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        s = self.state
        s.step_count += 1
        bc1 = 1.0 - s.beta1 ** s.step_count
        bc2 = 1.0 - s.beta2 ** s.step_count
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise GradientError(f"non-finite gradient in parameter group '{name}'")
            s.m[name] = s.beta1 * s.m[name] + (1.0 - s.beta1) * g
            s.v[name] = s.beta2 * s.v[name] + (1.0 - s.beta2) * g * g
            m_hat = s.m[name] / bc1
            v_hat = s.v[name] / bc2
            if s.weight_decay:
                p.data -= s.lr * s.weight_decay * p.data
            p.data -= s.lr * m_hat / (np.sqrt(v_hat) + s.eps)


def uniform_init(rng: np.random.Generator, rows: int, cols: int, fan_in: int | None = None,
                 requires_grad: bool = True) -> Tensor:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weight matrix."""
    bound = 1.0 / math.sqrt(fan_in if fan_in is not None else rows)
    return Tensor(rng.uniform(-bound, bound, size=(rows, cols)), requires_grad=requires_grad)
