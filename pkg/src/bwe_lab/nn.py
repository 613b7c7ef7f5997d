"""Neural building blocks on the autodiff engine.

Dense layers, GRU cells, three-layer MLPs with layer normalization and
leaky rectifiers, the modified sigmoid output activation, Adam, global
gradient clipping and finite-difference gradient checking.

Layout conventions: activations are row-major [batch x features] (or
[features] for single vectors); weights are [n_in x n_out] so forward is
x @ W + b. GRU gates are stacked in one weight matrix in z, r, n column
order. The recurrence, frozen for checkpoint compatibility:

    z = sigmoid(x W_z + h U_z + b_z)
    r = sigmoid(x W_r + h U_r + b_r)
    n = tanh(x W_n + r * (h U_n) + b_n)
    h' = (1 - z) * n + z * h
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import UsageError

__all__ = [
    "ParamStore",
    "GruParams",
    "Mlp3Params",
    "dense",
    "gru_step",
    "gru_sequence",
    "mlp3",
    "feature_norm",
    "modified_sigmoid",
    "softmax",
    "init_dense",
    "init_gru",
    "init_mlp3",
    "init_feature_norm",
    "adam_step",
    "clip_gradients",
    "param_count",
    "grad_check",
    "GradCheckReport",
    "LEAKY_SLOPE",
    "GRU_CONVENTION",
]

LEAKY_SLOPE = 0.2
LN10 = math.log(10.0)
# recorded in checkpoints so a loader can verify cell compatibility
GRU_CONVENTION = "gates z,r,n stacked; n=tanh(xWn + r*(hUn) + bn); h'=(1-z)*n+z*h"

softmax = ad.softmax


# ---------------------------------------------------------------------------
# Parameter store
# ---------------------------------------------------------------------------


class ParamStore:
    """Named trainable tensors plus optimizer state.

    Parameters are created in a fixed order by the model builders; the
    store's RNG is consumed in that order, so (seed, architecture) fully
    determines the initialization.
    """

    def __init__(self, seed: int, dtype=np.float64):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.step = 0
        self._rng = np.random.default_rng(self.seed)
        self._adam_m: dict[str, np.ndarray] = {}
        self._adam_v: dict[str, np.ndarray] = {}

    def add(self, name: str, shape: tuple[int, ...], init: str = "zeros", fan_in: int | None = None) -> Tensor:
        if name in self.params:
            raise UsageError(f"duplicate parameter name {name!r}")
        if init == "zeros":
            data = np.zeros(shape, dtype=self.dtype)
        elif init == "ones":
            data = np.ones(shape, dtype=self.dtype)
        elif init == "uniform":
            if not fan_in:
                raise UsageError(f"uniform init for {name!r} requires fan_in")
            bound = 1.0 / math.sqrt(fan_in)
            data = self._rng.uniform(-bound, bound, size=shape).astype(self.dtype)
        else:
            raise UsageError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    @classmethod
    def wrap(cls, tensors) -> "ParamStore":
        """View a plain sequence of Tensors as a store (for grad_check)."""
        store = cls(seed=0, dtype=np.asarray(tensors[0].data).dtype)
        for i, t in enumerate(tensors):
            store.params[t.name or f"tensor_{i}"] = t
        return store

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None

    def gradients(self) -> dict[str, np.ndarray | None]:
        return {k: t.grad for k, t in self.params.items()}

    def set_values(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            if name not in self.params:
                raise UsageError(f"unknown parameter {name!r}")
            t = self.params[name]
            if t.data.shape != arr.shape:
                raise UsageError(f"shape mismatch for {name!r}: {t.data.shape} vs {arr.shape}")
            t.data = arr.astype(self.dtype)


def param_count(store: ParamStore) -> int:
    """Exact number of trainable scalars."""
    return sum(t.size for t in store.params.values())


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def dense(x, W: Tensor, b: Tensor) -> Tensor:
    """x @ W + b with gradients for x, W and b."""
    x = ad.as_tensor(x)
    if x.data.ndim == 1:
        return ad.reshape(ad.matmul(ad.reshape(x, (1, -1)), W) + b, (-1,))
    return ad.matmul(x, W) + b


def init_dense(store: ParamStore, name: str, n_in: int, n_out: int) -> tuple[Tensor, Tensor]:
    W = store.add(f"{name}.W", (n_in, n_out), init="uniform", fan_in=n_in)
    b = store.add(f"{name}.b", (n_out,), init="zeros")
    return W, b


@dataclass
class GruParams:
    """Stacked-gate GRU cell parameters: W [in x 3h], U [h x 3h], b [3h]."""

    W: Tensor
    U: Tensor
    b: Tensor

    @property
    def n_units(self) -> int:
        return self.U.data.shape[0]


def init_gru(store: ParamStore, name: str, n_in: int, n_h: int) -> GruParams:
    W = store.add(f"{name}.W", (n_in, 3 * n_h), init="uniform", fan_in=n_in)
    U = store.add(f"{name}.U", (n_h, 3 * n_h), init="uniform", fan_in=n_h)
    b = store.add(f"{name}.b", (3 * n_h,), init="zeros")
    return GruParams(W, U, b)


def gru_step(x, h, p: GruParams) -> Tensor:
    """One GRU update. x: [B x in] or [in]; h: [B x h] or [h]."""
    x, h = ad.as_tensor(x), ad.as_tensor(h)
    squeeze = x.data.ndim == 1
    if squeeze:
        x = ad.reshape(x, (1, -1))
        h = ad.reshape(h, (1, -1))
    nh = p.n_units
    gates_x = ad.matmul(x, p.W) + p.b
    gates_h = ad.matmul(h, p.U)
    z = ad.sigmoid(gates_x[:, 0:nh] + gates_h[:, 0:nh])
    r = ad.sigmoid(gates_x[:, nh : 2 * nh] + gates_h[:, nh : 2 * nh])
    n = ad.tanh(gates_x[:, 2 * nh : 3 * nh] + r * gates_h[:, 2 * nh : 3 * nh])
    out = (1.0 - z) * n + z * h
    if squeeze:
        out = ad.reshape(out, (-1,))
    return out


def gru_sequence(x_seq, h0: np.ndarray, p: GruParams) -> Tensor:
    """Run a GRU over a whole sequence as one fused graph node.

    x_seq: Tensor or array [T x B x in]; h0: array [B x h].
    Returns [T x B x h]. Forward keeps the per-step gate activations so
    the backward pass can run backpropagation-through-time in a tight
    NumPy loop; results match a chain of gru_step() nodes exactly.
    """
    x_seq = ad.as_tensor(x_seq)
    xs = x_seq.data
    if xs.ndim != 3:
        raise UsageError(f"gru_sequence expects [T x B x in], got {xs.shape}")
    t_len, batch, _ = xs.shape
    nh = p.n_units
    W, U, b = p.W.data, p.U.data, p.b.data

    # all input projections in one GEMM
    gx = (xs.reshape(t_len * batch, -1) @ W + b).reshape(t_len, batch, 3 * nh)
    zs = np.empty((t_len, batch, nh), dtype=xs.dtype)
    rs = np.empty_like(zs)
    ns = np.empty_like(zs)
    uns = np.empty_like(zs)  # h_{t-1} @ U_n, needed for backward
    hs = np.empty((t_len + 1, batch, nh), dtype=xs.dtype)
    hs[0] = h0
    for t in range(t_len):
        gh = hs[t] @ U
        z = _sigmoid_np(gx[t, :, 0:nh] + gh[:, 0:nh])
        r = _sigmoid_np(gx[t, :, nh : 2 * nh] + gh[:, nh : 2 * nh])
        un = gh[:, 2 * nh : 3 * nh]
        n = np.tanh(gx[t, :, 2 * nh : 3 * nh] + r * un)
        zs[t], rs[t], ns[t], uns[t] = z, r, n, un
        hs[t + 1] = (1.0 - z) * n + z * hs[t]
    value = hs[1:].copy()
    needs_x = x_seq.requires_grad

    # The four vjps share one backpropagation-through-time sweep. It is
    # cached per output-gradient array; holding a reference to that array
    # keeps its id() valid for the lifetime of the cache entry.
    cache: dict = {}

    def _bptt(g):
        if cache.get("key") != id(g):
            da_wb = np.empty((t_len, batch, 3 * nh), dtype=xs.dtype)  # slots z, r, n
            da_u = np.empty_like(da_wb)  # slots z, r, du_n (what U and h_prev see)
            dh = np.zeros((batch, nh), dtype=xs.dtype)
            for t in range(t_len - 1, -1, -1):
                dh = dh + g[t]
                z, r, n, un, h_prev = zs[t], rs[t], ns[t], uns[t], hs[t]
                da_n = dh * (1.0 - z) * (1.0 - n * n)
                da_z = dh * (h_prev - n) * z * (1.0 - z)
                du_n = da_n * r
                da_r = da_n * un * r * (1.0 - r)
                da_wb[t, :, 0:nh] = da_z
                da_wb[t, :, nh : 2 * nh] = da_r
                da_wb[t, :, 2 * nh : 3 * nh] = da_n
                da_u[t, :, 0:nh] = da_z
                da_u[t, :, nh : 2 * nh] = da_r
                da_u[t, :, 2 * nh : 3 * nh] = du_n
                dh = dh * z + da_u[t] @ U.T
            cache.update(key=id(g), g_ref=g, wb=da_wb, u=da_u)
        return cache

    def vjp_x(g):
        c = _bptt(g)
        return (c["wb"].reshape(-1, 3 * nh) @ W.T).reshape(xs.shape)

    def vjp_W(g):
        c = _bptt(g)
        return xs.reshape(-1, xs.shape[2]).T @ c["wb"].reshape(-1, 3 * nh)

    def vjp_U(g):
        c = _bptt(g)
        return hs[:-1].reshape(-1, nh).T @ c["u"].reshape(-1, 3 * nh)

    def vjp_b(g):
        c = _bptt(g)
        return c["wb"].reshape(-1, 3 * nh).sum(axis=0)

    return ad.custom(
        (x_seq, p.W, p.U, p.b),
        value,
        (vjp_x if needs_x else None, vjp_W, vjp_U, vjp_b),
        name="gru_sequence",
    )


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class Mlp3Params:
    layers: list[tuple[Tensor, Tensor]]  # (W, b) per layer
    norms: list[tuple[Tensor, Tensor]]  # (gain, bias) per layer


def init_mlp3(store: ParamStore, name: str, n_in: int, width: int) -> Mlp3Params:
    layers, norms = [], []
    for i in range(3):
        w, b = init_dense(store, f"{name}.l{i}", n_in if i == 0 else width, width)
        layers.append((w, b))
        g = store.add(f"{name}.ln{i}.g", (width,), init="ones")
        be = store.add(f"{name}.ln{i}.b", (width,), init="zeros")
        norms.append((g, be))
    return Mlp3Params(layers, norms)


def mlp3(x, p: Mlp3Params) -> Tensor:
    """Three blocks of dense -> layer norm -> leaky ReLU."""
    h = ad.as_tensor(x)
    for (W, b), (g, be) in zip(p.layers, p.norms):
        h = ad.leaky_relu(ad.layer_norm(dense(h, W, b), g, be), LEAKY_SLOPE)
    return h


def init_feature_norm(store: ParamStore, name: str, dim: int) -> tuple[Tensor, Tensor]:
    """Trainable per-coefficient scale/shift, initialized to identity."""
    scale = store.add(f"{name}.scale", (dim,), init="ones")
    shift = store.add(f"{name}.shift", (dim,), init="zeros")
    return scale, shift


def feature_norm(x, scale: Tensor, shift: Tensor) -> Tensor:
    return ad.as_tensor(x) * scale + shift


def modified_sigmoid(x):
    """2 * sigmoid(x)^ln(10) + 1e-7, the positive-output activation.

    Strictly positive, range (1e-7, 2 + 1e-7), exponent is the natural
    log of 10. Works on Tensors (differentiable) and plain arrays.
    """
    if isinstance(x, Tensor):
        return ad.power(ad.sigmoid(x), LN10) * 2.0 + 1e-7
    return 2.0 * _sigmoid_np(np.asarray(x, dtype=np.float64)) ** LN10 + 1e-7


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Standard Adam with bias correction; increments the step counter."""
    missing = [k for k, t in store.params.items() if t.grad is None]
    if missing:
        raise UsageError(f"adam_step: gradients absent for {missing[:4]}{'...' if len(missing) > 4 else ''}")
    store.step += 1
    t = store.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in store.params.items():
        g = p.grad
        m = store._adam_m.get(name)
        v = store._adam_v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        store._adam_m[name] = m
        store._adam_v[name] = v
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def clip_gradients(store: ParamStore, max_norm: float = 3.0) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm.

    Returns the pre-clip norm (useful for logging).
    """
    total = 0.0
    for t in store.params.values():
        if t.grad is not None:
            total += float(np.sum(t.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for t in store.params.values():
            if t.grad is not None:
                t.grad = t.grad * factor
    return norm


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Per-tensor and aggregate relative errors vs finite differences."""

    per_tensor: dict[str, tuple[float, float]] = field(default_factory=dict)  # name -> (max, mean)
    rel_errors: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def worst(self) -> float:
        return float(self.rel_errors.max()) if self.rel_errors.size else 0.0

    def fraction_within(self, tol: float) -> float:
        if not self.rel_errors.size:
            return 1.0
        return float(np.mean(self.rel_errors <= tol))

    def summary(self) -> str:
        return (
            f"{self.rel_errors.size} params checked: worst {self.worst:.3e}, "
            f"{100 * self.fraction_within(1e-3):.1f}% within 1e-3"
        )


def grad_check(
    f,
    store,
    eps: float = 1e-4,
    param_names: list[str] | None = None,
    denom_floor: float = 1e-6,
) -> GradCheckReport:
    """Compare backward-pass gradients of f() against central differences.

    f is a zero-argument callable returning a scalar Tensor, deterministic
    across calls (fix all seeds). store is a ParamStore or a plain sequence
    of Tensors. Every scalar in the selected tensors is perturbed by +-eps.
    Relative error uses max(|analytic|, |numeric|, denom_floor) as the
    denominator so near-zero gradients do not blow up the ratio.
    """
    if not isinstance(store, ParamStore):
        store = ParamStore.wrap(store)
    if store.dtype != np.float64:
        raise UsageError("grad_check requires float64 parameters")
    names = param_names if param_names is not None else store.names()

    store.zero_grads()
    loss = f()
    loss.backward()
    analytic = {k: np.array(store[k].grad, copy=True) for k in names}

    report = GradCheckReport()
    all_errs = []
    for name in names:
        t = store[name]
        flat = t.data.reshape(-1)
        errs = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with ad.no_grad():
                f_plus = f().item()
            flat[i] = orig - eps
            with ad.no_grad():
                f_minus = f().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = analytic[name].reshape(-1)[i]
            errs[i] = abs(a - numeric) / max(abs(a), abs(numeric), denom_floor)
        report.per_tensor[name] = (float(errs.max()), float(errs.mean()))
        all_errs.append(errs)
    report.rel_errors = np.concatenate(all_errs) if all_errs else np.zeros(0)
    store.zero_grads()
    return report
