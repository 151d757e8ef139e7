"""Dense float64 tensors with taped reverse-mode differentiation.

All arithmetic is double precision. Operations record onto the innermost
active :class:`Tape`; with no tape open they are plain numpy computations,
so inference code pays no autodiff overhead. Gradients accumulate
additively into ``Tensor.grad`` (parameters keep theirs until an optimizer
step clears them).

Log-space code in this package uses ``-inf`` as an exact zero-probability
sentinel; ``logsumexp`` and friends propagate it without producing NaNs.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ContractError, NumericError, ShapeError

NEG_INF = float("-inf")

_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in construction order, which is a topological order
    of the computation graph, so :func:`backward` can simply walk the list
    in reverse.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        assert popped is self, "tapes closed out of order"
        return False


def _active_tape():
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """A dense float64 array plus the hooks backward() needs."""

    __slots__ = ("data", "grad", "_parents", "_vjp")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def check_finite(self, what: str = "tensor") -> "Tensor":
        """Raise :class:`NumericError` if any entry is NaN or infinite."""
        if not np.isfinite(self.data).all():
            raise NumericError(f"{what} contains non-finite values")
        return self

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    # Operator sugar; the module-level functions do the real work.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A named leaf tensor whose gradient buffer is always allocated."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _node(out_data, parents, vjp) -> Tensor:
    out = Tensor(out_data)
    out._parents = parents
    out._vjp = vjp
    _TAPES[-1].nodes.append(out)
    return out


def custom_node(out_data, parents, vjp_builder) -> Tensor:
    """Register a fused operation with a hand-written backward pass.

    ``vjp_builder(accumulate)`` is only invoked when a tape is active; it
    must return a function of the output gradient that calls
    ``accumulate(parent, grad)`` for each parent.
    """
    if _active_tape() is None:
        return Tensor(out_data)
    return _node(out_data, tuple(parents), vjp_builder(_accum))


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the parent's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(tape: Tape, loss: Tensor):
    """Accumulate d(loss)/d(node) into every node reachable on the tape.

    The loss must be a scalar. Parameter gradients add onto whatever is
    already in their buffers; clearing is the optimizer's job.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.data.shape}")
    _accum(loss, np.ones_like(loss.data))
    for node in reversed(tape.nodes):
        if node.grad is None or node._vjp is None:
            continue
        node._vjp(node.grad)


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = a.data + b.data
    if _active_tape() is None:
        return Tensor(out)

    def vjp(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _node(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = a.data - b.data
    if _active_tape() is None:
        return Tensor(out)

    def vjp(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _node(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = a.data * b.data
    if _active_tape() is None:
        return Tensor(out)

    def vjp(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = _t(a)
    if _active_tape() is None:
        return Tensor(-a.data)

    def vjp(g):
        _accum(a, -g)

    return _node(-a.data, (a,), vjp)


def scale(a, c: float) -> Tensor:
    a = _t(a)
    c = float(c)
    if _active_tape() is None:
        return Tensor(a.data * c)

    def vjp(g):
        _accum(a, g * c)

    return _node(a.data * c, (a,), vjp)


def matmul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ShapeError(f"matmul supports 1-D/2-D operands, got {a.data.ndim}-D and {b.data.ndim}-D")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul shapes do not conform: {a.data.shape} @ {b.data.shape}") from exc
    if _active_tape() is None:
        return Tensor(out)

    def vjp(g):
        ad, bd = a.data, b.data
        if ad.ndim == 2 and bd.ndim == 2:
            _accum(a, g @ bd.T)
            _accum(b, ad.T @ g)
        elif ad.ndim == 1 and bd.ndim == 2:
            _accum(a, bd @ g)
            _accum(b, np.outer(ad, g))
        elif ad.ndim == 2 and bd.ndim == 1:
            _accum(a, np.outer(g, bd))
            _accum(b, ad.T @ g)
        else:  # 1-D @ 1-D inner product
            _accum(a, g * bd)
            _accum(b, g * ad)

    return _node(out, (a, b), vjp)


def tanh(a) -> Tensor:
    a = _t(a)
    out = np.tanh(a.data)
    if _active_tape() is None:
        return Tensor(out)

    def vjp(g):
        _accum(a, g * (1.0 - out * out))

    return _node(out, (a,), vjp)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(log sigmoid(x)); stable for large |x|.
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(a) -> Tensor:
    """Elementwise logistic function; output in (0, 1)."""
    a = _t(a)
    if not np.isfinite(a.data).all():
        raise NumericError("sigmoid input contains non-finite values")
    out = _sigmoid(a.data)
    if _active_tape() is None:
        return Tensor(out)

    def vjp(g):
        _accum(a, g * out * (1.0 - out))

    return _node(out, (a,), vjp)


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(x)), computed without overflow."""
    a = _t(a)
    out = -np.logaddexp(0.0, -a.data)
    if _active_tape() is None:
        return Tensor(out)

    def vjp(g):
        _accum(a, g * np.exp(-np.logaddexp(0.0, a.data)))  # sigmoid(-x)

    return _node(out, (a,), vjp)


def exp(a) -> Tensor:
    a = _t(a)
    out = np.exp(a.data)
    if _active_tape() is None:
        return Tensor(out)

    def vjp(g):
        _accum(a, g * out)

    return _node(out, (a,), vjp)


def log(a) -> Tensor:
    a = _t(a)
    out = np.log(a.data)
    if _active_tape() is None:
        return Tensor(out)

    def vjp(g):
        _accum(a, g / a.data)

    return _node(out, (a,), vjp)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _t(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    if _active_tape() is None:
        return Tensor(out)

    def vjp(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(ge, a.data.shape).copy())

    return _node(out, (a,), vjp)


def mean_(a) -> Tensor:
    a = _t(a)
    n = a.data.size
    return scale(sum_(a), 1.0 / n)


def logsumexp(a, axis: int, keepdims: bool = False) -> Tensor:
    """log(sum(exp(x))) along one axis; -inf rows stay -inf with zero grad."""
    a = _t(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    s = np.sum(np.exp(x - m_safe), axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        out_k = np.where(s > 0.0, np.log(np.maximum(s, 1e-323)) + m_safe, NEG_INF)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)
    if _active_tape() is None:
        return Tensor(out)

    def vjp(g):
        with np.errstate(invalid="ignore"):
            w = np.where(np.isfinite(out_k), np.exp(x - out_k), 0.0)
        ge = g if keepdims else np.expand_dims(g, axis)
        _accum(a, w * ge)

    return _node(out, (a,), vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _t(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    z = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    out = x - z
    if _active_tape() is None:
        return Tensor(out)

    def vjp(g):
        _accum(a, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _node(out, (a,), vjp)


def softmax(a, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; entries positive and summing to one."""
    a = _t(a)
    if not np.isfinite(a.data).all():
        raise NumericError("softmax input contains non-finite values")
    x = a.data
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    if _active_tape() is None:
        return Tensor(out)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(a, out * (g - dot))

    return _node(out, (a,), vjp)


def affine(w, x, b) -> Tensor:
    """W @ x + b with explicit shape validation."""
    w, x, b = _t(w), _t(x), _t(b)
    if w.data.ndim != 2 or x.data.ndim != 1 or b.data.ndim != 1:
        raise ShapeError(
            f"affine expects W (m,n), x (n,), b (m,); got {w.data.shape}, {x.data.shape}, {b.data.shape}"
        )
    m, n = w.data.shape
    if x.data.shape[0] != n or b.data.shape[0] != m:
        raise ShapeError(
            f"affine shapes do not conform: W {w.data.shape}, x {x.data.shape}, b {b.data.shape}"
        )
    return add(matmul(w, x), b)


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_t(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    if _active_tape() is None:
        return Tensor(out)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(p, g[tuple(sl)])

    return _node(out, tuple(parts), vjp)


def stack(parts) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    parts = [_t(p) for p in parts]
    out = np.stack([p.data for p in parts], axis=0)
    if _active_tape() is None:
        return Tensor(out)

    def vjp(g):
        for k, p in enumerate(parts):
            _accum(p, g[k])

    return _node(out, tuple(parts), vjp)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    a = _t(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = a.data[sl].copy()
    if _active_tape() is None:
        return Tensor(out)

    def vjp(g):
        gf = np.zeros_like(a.data)
        gf[sl] += g
        _accum(a, gf)

    return _node(out, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = _t(a)
    out = a.data.reshape(shape)
    if _active_tape() is None:
        return Tensor(out)

    def vjp(g):
        _accum(a, g.reshape(a.data.shape))

    return _node(out, (a,), vjp)


def take_rows(a, indices) -> Tensor:
    """Row gather (embedding lookup); duplicate rows accumulate gradients."""
    a = _t(a)
    idx = np.asarray(indices, dtype=np.int64)
    out = a.data[idx]
    if _active_tape() is None:
        return Tensor(out)

    def vjp(g):
        gf = np.zeros_like(a.data)
        np.add.at(gf, idx, g)
        _accum(a, gf)

    return _node(out, (a,), vjp)


def take_per_row(a, indices) -> Tensor:
    """out[k] = a[k, indices[k]] for a 2-D tensor."""
    a = _t(a)
    idx = np.asarray(indices, dtype=np.int64)
    rows = np.arange(a.data.shape[0])
    out = a.data[rows, idx]
    if _active_tape() is None:
        return Tensor(out)

    def vjp(g):
        gf = np.zeros_like(a.data)
        np.add.at(gf, (rows, idx), g)
        _accum(a, gf)

    return _node(out, (a,), vjp)


def element(a, index) -> Tensor:
    """Extract a single entry as a scalar tensor."""
    a = _t(a)
    out = np.asarray(a.data[index], dtype=np.float64)
    if _active_tape() is None:
        return Tensor(out)

    def vjp(g):
        gf = np.zeros_like(a.data)
        gf[index] += g
        _accum(a, gf)

    return _node(out, (a,), vjp)


def dropout(a, rate: float, rng: "RngState", training: bool) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, scale survivors.

    Evaluation mode (training=False) is exactly the identity.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    a = _t(a)
    if not training or rate == 0.0:
        return a
    u = rng.generator.uniform(size=a.data.shape)
    mask = np.where(u >= rate, 1.0 / (1.0 - rate), 0.0)
    out = a.data * mask
    if _active_tape() is None:
        return Tensor(out)

    def vjp(g):
        _accum(a, g * mask)

    return _node(out, (a,), vjp)


def transition_log_matrix(log_emit: np.ndarray, log_shift: np.ndarray, force_last: bool) -> np.ndarray:
    """Monotone alignment transitions in log space as a plain array.

    Entry [k, i] is the log probability of moving from position k to
    position i (0-based): shift through k..i-1, then emit at i; -inf for
    i < k. With ``force_last`` the final position always emits, so each
    row is a proper distribution.
    """
    n = log_emit.shape[0]
    le = log_emit
    ls = log_shift
    if force_last:
        le = le.copy()
        ls = ls.copy()
        le[-1] = 0.0
        ls[-1] = NEG_INF
    # c[p] = sum of log_shift[0..p-1]; the forced -inf at the last position
    # is never consumed because shifts stop before the emit position.
    c = np.concatenate(([0.0], np.cumsum(ls[:-1])))
    t = c[None, :] - c[:, None] + le[None, :]
    rows = np.arange(n)
    return np.where(rows[None, :] >= rows[:, None], t, NEG_INF)


def monotone_transition(log_emit, log_shift, force_last: bool = True) -> Tensor:
    """Differentiable version of :func:`transition_log_matrix`."""
    a, b = _t(log_emit), _t(log_shift)
    n = a.data.shape[0]
    out = transition_log_matrix(a.data, b.data, force_last)
    if _active_tape() is None:
        return Tensor(out)
    upper = np.arange(n)[None, :] >= np.arange(n)[:, None]

    def vjp(g):
        gm = np.where(upper, g, 0.0)
        d_le = gm.sum(axis=0)
        dc = gm.sum(axis=0) - gm.sum(axis=1)
        # c[p] depends on log_shift[u] for u < p.
        rev = np.cumsum(dc[::-1])[::-1]
        d_ls = np.concatenate((rev[1:], [0.0]))
        if force_last:
            d_le[-1] = 0.0
            d_ls[-1] = 0.0
        _accum(a, d_le)
        _accum(b, d_ls)

    return _node(out, (a, b), vjp)


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------

class RngState:
    """Deterministic random source: identical seed, identical draw sequence.

    ``derive`` produces an independent child stream identified by an
    integer key, so components (init, dropout, shuffling) cannot perturb
    each other's sequences.
    """

    def __init__(self, seed: int, _key: tuple = ()):
        self.seed = int(seed)
        self._key = _key
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=_key)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def derive(self, key: int) -> "RngState":
        return RngState(self.seed, self._key + (int(key),))

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self.generator.uniform(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


# ---------------------------------------------------------------------------
# LSTM cell
# ---------------------------------------------------------------------------

class LstmCell:
    """Single LSTM layer. Gates are packed as [input, forget, cell, output].

    Weights are stored input-major (E, 4H) so the same code path serves
    1-D vectors and batched 2-D rows.
    """

    INIT_RANGE = 0.08
    FORGET_BIAS = 1.0

    def __init__(self, name: str, input_size: int, hidden_size: int, rng: RngState):
        self.input_size = input_size
        self.hidden_size = hidden_size
        r = self.INIT_RANGE
        h = hidden_size
        self.w_x = Parameter(f"{name}.w_x", rng.uniform(-r, r, (input_size, 4 * h)))
        self.w_h = Parameter(f"{name}.w_h", rng.uniform(-r, r, (h, 4 * h)))
        bias = rng.uniform(-r, r, (4 * h,))
        bias[h : 2 * h] = self.FORGET_BIAS
        self.bias = Parameter(f"{name}.bias", bias)

    def parameters(self):
        return [self.w_x, self.w_h, self.bias]

    def zero_state(self, batch: int | None = None):
        shape = (self.hidden_size,) if batch is None else (batch, self.hidden_size)
        return Tensor(np.zeros(shape)), Tensor(np.zeros(shape))

    def step(self, state, x):
        """One taped cell update; returns the new (h, c) pair."""
        h_prev, c_prev = state
        gates = add(add(matmul(x, self.w_x), matmul(h_prev, self.w_h)), self.bias)
        hs = self.hidden_size
        i = sigmoid(narrow(gates, -1, 0, hs))
        f = sigmoid(narrow(gates, -1, hs, hs))
        g = tanh(narrow(gates, -1, 2 * hs, hs))
        o = sigmoid(narrow(gates, -1, 3 * hs, hs))
        c = add(mul(f, c_prev), mul(i, g))
        h = mul(o, tanh(c))
        return h, c

    def zero_state_np(self):
        return np.zeros(self.hidden_size), np.zeros(self.hidden_size)

    def step_np(self, state, x: np.ndarray):
        """Tape-free twin of :meth:`step` for decode-time scoring."""
        h_prev, c_prev = state
        gates = x @ self.w_x.data + h_prev @ self.w_h.data + self.bias.data
        hs = self.hidden_size
        i = _sigmoid(gates[..., 0:hs])
        f = _sigmoid(gates[..., hs : 2 * hs])
        g = np.tanh(gates[..., 2 * hs : 3 * hs])
        o = _sigmoid(gates[..., 3 * hs : 4 * hs])
        c = f * c_prev + i * g
        h = o * np.tanh(c)
        return h, c


def lstm_step(prev_state, x, cell: LstmCell):
    """Functional wrapper over :meth:`LstmCell.step`."""
    return cell.step(prev_state, x)


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias correction; gradients are cleared after each step."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ConfigError("parameter names must be unique within one model")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self):
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for p in self.params:
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1 ** t)
            v_hat = v / (1.0 - b2 ** t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.grad[...] = 0.0


def adam_update(optimizer: Adam):
    """Apply one optimizer step (alias for :meth:`Adam.step`)."""
    optimizer.step()


def clip_global_norm(params, max_norm: float = 5.0) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the pre-clip norm.
    """
    total = 0.0
    for p in params:
        total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for p in params:
            p.grad *= factor
    return norm
