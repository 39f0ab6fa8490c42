"""A small numpy layer engine with hand-written backward passes.

Layers act on the last axis, so inputs may be (batch, dim) or
(batch, time, dim); the GRU needs the time axis. ``Network.forward`` in train
mode caches whatever ``backward`` needs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
LAYER_KINDS = ("affine", "relu", "batch_norm", "dropout", "gru", "linear_out")


class CheckpointError(ValueError):
    pass


class ParamTensor:
    __slots__ = ("values", "grad")

    def __init__(self, values):
        self.values = values
        self.grad = np.zeros_like(values)

    @property
    def shape(self):
        return self.values.shape


@dataclass
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ValueError(f"{self.kind}: dims must be positive")
        p = self.extra.get("dropout_p", 0.0)
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1), got {p}")

    def to_dict(self):
        return {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim, "extra": dict(self.extra)}


def _uniform(rng, fan_in, shape, dtype):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Layer:
    def __init__(self, spec: LayerSpec):
        self.spec = spec
        self.params: dict[str, ParamTensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x, train):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def _need_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{self.spec.kind}: backward called without a cached train-mode forward")
        return self._cache


class Affine(Layer):
    def __init__(self, spec, rng, dtype):
        super().__init__(spec)
        self.params["W"] = ParamTensor(_uniform(rng, spec.in_dim, (spec.in_dim, spec.out_dim), dtype))
        if spec.extra.get("bias", True):
            self.params["b"] = ParamTensor(_uniform(rng, spec.in_dim, (spec.out_dim,), dtype))

    def forward(self, x, train):
        if x.shape[-1] != self.spec.in_dim:
            raise ValueError(f"{self.spec.kind}: input dim {x.shape[-1]} != {self.spec.in_dim}")
        y = x @ self.params["W"].values
        if "b" in self.params:
            y = y + self.params["b"].values
        self._cache = x if train else None
        return y

    def backward(self, grad):
        x = self._need_cache()
        x2 = x.reshape(-1, x.shape[-1])
        g2 = grad.reshape(-1, grad.shape[-1])
        self.params["W"].grad += x2.T @ g2
        if "b" in self.params:
            self.params["b"].grad += g2.sum(axis=0)
        return grad @ self.params["W"].values.T


class ReLU(Layer):
    def forward(self, x, train):
        mask = x > 0
        self._cache = mask if train else None
        return x * mask

    def backward(self, grad):
        return grad * self._need_cache()


class BatchNorm(Layer):
    """Normalises over every axis but the last."""

    def __init__(self, spec, rng, dtype):
        super().__init__(spec)
        d = spec.in_dim
        self.momentum = spec.extra.get("batch_norm_momentum", 0.1)
        self.eps = spec.extra.get("eps", 1e-5)
        self.params["gamma"] = ParamTensor(np.ones(d, dtype=dtype))
        self.params["beta"] = ParamTensor(np.zeros(d, dtype=dtype))
        self.buffers["running_mean"] = np.zeros(d, dtype=dtype)
        self.buffers["running_var"] = np.ones(d, dtype=dtype)
        self.last_normalized = None

    def forward(self, x, train):
        if x.shape[-1] != self.spec.in_dim:
            raise ValueError(f"batch_norm: input dim {x.shape[-1]} != {self.spec.in_dim}")
        gamma, beta = self.params["gamma"].values, self.params["beta"].values
        if not train:
            self._cache = None
            inv = 1.0 / np.sqrt(self.buffers["running_var"] + self.eps)
            return (x - self.buffers["running_mean"]) * (inv * gamma) + beta
        axes = tuple(range(x.ndim - 1))
        n = x.size // x.shape[-1]
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        m = self.momentum
        unbiased = var * (n / max(n - 1, 1))
        self.buffers["running_mean"] = ((1 - m) * self.buffers["running_mean"] + m * mu).astype(x.dtype)
        self.buffers["running_var"] = ((1 - m) * self.buffers["running_var"] + m * unbiased).astype(x.dtype)
        self._cache = (xhat, inv, axes, n)
        self.last_normalized = xhat
        return xhat * gamma + beta

    def backward(self, grad):
        xhat, inv, axes, n = self._need_cache()
        gamma = self.params["gamma"].values
        self.params["gamma"].grad += (grad * xhat).sum(axis=axes)
        self.params["beta"].grad += grad.sum(axis=axes)
        dxhat = grad * gamma
        return (inv / n) * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))


class Dropout(Layer):
    def __init__(self, spec, rng):
        super().__init__(spec)
        self.p = spec.extra.get("dropout_p", 0.1)
        self.rng = rng
        self.frozen_mask = None

    def forward(self, x, train):
        if not train or self.p == 0.0:
            self._cache = None if not train else np.ones((), dtype=x.dtype)
            return x
        if self.frozen_mask is not None and self.frozen_mask.shape == x.shape:
            mask = self.frozen_mask
        else:
            keep = self.rng.random(x.shape) >= self.p
            mask = keep.astype(x.dtype) / (1.0 - self.p)
        self._cache = mask
        return x * mask

    def backward(self, grad):
        return grad * self._need_cache()


class GRU(Layer):
    """GRU over (batch, time, in_dim).

    r = sig(x Wr + h Ur + br), z = sig(x Wz + h Uz + bz),
    n = tanh(x Wn + r * (h Un) + bn), h' = (1 - z) * n + z * h.

    Gate blocks are stacked [r | z | n] along the last axis of W, U and b.
    Bidirectional layers concatenate [forward, backward] features; without
    ``return_sequences`` the output is each direction's final state.
    """

    def __init__(self, spec, rng, dtype):
        super().__init__(spec)
        ex = spec.extra
        self.direction = ex.get("gru_direction", "forward")
        if self.direction not in ("forward", "bidirectional"):
            raise ValueError(f"gru_direction must be forward or bidirectional, got {self.direction!r}")
        self.return_sequences = ex.get("return_sequences", True)
        n_dirs = 2 if self.direction == "bidirectional" else 1
        if spec.out_dim % n_dirs:
            raise ValueError("bidirectional GRU needs an even out_dim")
        self.hidden = spec.out_dim // n_dirs
        h, d = self.hidden, spec.in_dim
        self.dirs = ["fw", "bw"][:n_dirs]
        for p in self.dirs:
            self.params[f"{p}_W"] = ParamTensor(_uniform(rng, d, (d, 3 * h), dtype))
            self.params[f"{p}_U"] = ParamTensor(_uniform(rng, h, (h, 3 * h), dtype))
            self.params[f"{p}_b"] = ParamTensor(_uniform(rng, h, (3 * h,), dtype))

    def _run(self, x, prefix, reverse, train):
        W, U, b = (self.params[f"{prefix}_{k}"].values for k in "WUb")
        bsz, steps, _ = x.shape
        h_dim = self.hidden
        xw = x @ W + b
        h = np.zeros((bsz, h_dim), dtype=x.dtype)
        hs = np.empty((steps, bsz, h_dim), dtype=x.dtype)
        order = range(steps - 1, -1, -1) if reverse else range(steps)
        if train:
            cache = {k: np.empty((steps, bsz, h_dim), dtype=x.dtype) for k in ("h_prev", "r", "z", "n", "hu_n")}
        for t in order:
            hu = h @ U
            g = xw[:, t]
            r = _sigmoid(g[:, :h_dim] + hu[:, :h_dim])
            z = _sigmoid(g[:, h_dim : 2 * h_dim] + hu[:, h_dim : 2 * h_dim])
            hu_n = hu[:, 2 * h_dim :]
            n = np.tanh(g[:, 2 * h_dim :] + r * hu_n)
            if train:
                cache["h_prev"][t], cache["r"][t], cache["z"][t] = h, r, z
                cache["n"][t], cache["hu_n"][t] = n, hu_n
            h = (1.0 - z) * n + z * h
            hs[t] = h
        return hs, (cache if train else None)

    def forward(self, x, train):
        if x.ndim != 3:
            raise ValueError("gru expects (batch, time, dim) input")
        if x.shape[-1] != self.spec.in_dim:
            raise ValueError(f"gru: input dim {x.shape[-1]} != {self.spec.in_dim}")
        outs, caches = [], []
        for prefix in self.dirs:
            hs, cache = self._run(x, prefix, prefix == "bw", train)
            outs.append(hs)
            caches.append(cache)
        self._cache = (x, caches) if train else None
        if self.return_sequences:
            return np.concatenate([np.swapaxes(h, 0, 1) for h in outs], axis=-1)
        steps = x.shape[1]
        finals = [outs[0][steps - 1]] + ([outs[1][0]] if len(outs) > 1 else [])
        return np.concatenate(finals, axis=-1)

    def _back(self, x, prefix, reverse, cache, dh_seq):
        W, U = self.params[f"{prefix}_W"].values, self.params[f"{prefix}_U"].values
        h_dim = self.hidden
        steps = x.shape[1]
        dxw = np.empty((x.shape[0], steps, 3 * h_dim), dtype=x.dtype)
        dU = np.zeros_like(U)
        dh_next = np.zeros_like(dh_seq[0])
        order = range(steps) if reverse else range(steps - 1, -1, -1)
        for t in order:
            dh = dh_seq[t] + dh_next
            h_prev, r, z = cache["h_prev"][t], cache["r"][t], cache["z"][t]
            n, hu_n = cache["n"][t], cache["hu_n"][t]
            dn = dh * (1.0 - z)
            dz = dh * (h_prev - n)
            da_n = dn * (1.0 - n * n)
            dr = da_n * hu_n
            da_r = dr * r * (1.0 - r)
            da_z = dz * z * (1.0 - z)
            dxw_t = np.concatenate([da_r, da_z, da_n], axis=1)
            dhu = np.concatenate([da_r, da_z, da_n * r], axis=1)
            dU += h_prev.T @ dhu
            dh_next = dh * z + dhu @ U.T
            dxw[:, t] = dxw_t
        flat_x = x.reshape(-1, x.shape[-1])
        flat_g = dxw.reshape(-1, 3 * h_dim)
        self.params[f"{prefix}_W"].grad += flat_x.T @ flat_g
        self.params[f"{prefix}_U"].grad += dU
        self.params[f"{prefix}_b"].grad += flat_g.sum(axis=0)
        return dxw @ W.T

    def backward(self, grad):
        x, caches = self._need_cache()
        steps = x.shape[1]
        h_dim = self.hidden
        dx = np.zeros_like(x)
        for k, prefix in enumerate(self.dirs):
            dh_seq = np.zeros((steps, x.shape[0], h_dim), dtype=x.dtype)
            if self.return_sequences:
                dh_seq[:] = np.swapaxes(grad[..., k * h_dim : (k + 1) * h_dim], 0, 1)
            else:
                dh_seq[0 if prefix == "bw" else steps - 1] = grad[:, k * h_dim : (k + 1) * h_dim]
            dx += self._back(x, prefix, prefix == "bw", caches[k], dh_seq)
        return dx


def make_layer(spec: LayerSpec, rng, dtype):
    if spec.kind in ("affine", "linear_out"):
        return Affine(spec, rng, dtype)
    if spec.kind == "relu":
        return ReLU(spec)
    if spec.kind == "batch_norm":
        return BatchNorm(spec, rng, dtype)
    if spec.kind == "dropout":
        return Dropout(spec, rng)
    if spec.kind == "gru":
        return GRU(spec, rng, dtype)
    raise ValueError(spec.kind)


class Network:
    def __init__(self, specs, rng_seed=0, dtype=np.float64):
        specs = [s if isinstance(s, LayerSpec) else LayerSpec(**s) for s in specs]
        for a, b in zip(specs, specs[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer {a.kind} -> {b.kind}: {a.out_dim} != {b.in_dim}")
        self.specs = specs
        self.rng_seed = int(rng_seed)
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(self.rng_seed)
        self.layers = [make_layer(s, self.rng, self.dtype) for s in specs]
        self.mode = "eval"
        self._forward_ok = False

    @property
    def in_dim(self):
        return self.specs[0].in_dim

    @property
    def out_dim(self):
        return self.specs[-1].out_dim

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                yield f"{i}.{layer.spec.kind}.{name}", p

    def named_buffers(self):
        for i, layer in enumerate(self.layers):
            for name, b in layer.buffers.items():
                yield f"{i}.{layer.spec.kind}.{name}", layer, name, b

    def parameters(self):
        return [p for _, p in self.named_params()]

    def n_params(self):
        return sum(p.values.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad[...] = 0.0

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def forward(self, x, train=None):
        train = self.mode == "train" if train is None else train
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"input dim {x.shape[-1]} != network input {self.in_dim}")
        for layer in self.layers:
            x = layer.forward(x, train)
        self._forward_ok = train
        return x

    __call__ = forward

    def backward(self, loss_grad):
        if not self._forward_ok:
            raise RuntimeError("backward needs a preceding train-mode forward")
        g = np.asarray(loss_grad, dtype=self.dtype)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g


def mse_loss(pred, target):
    pred = np.asarray(pred)
    diff = pred - np.asarray(target, dtype=pred.dtype)
    loss = float(np.mean(diff * diff))
    return loss, (2.0 / diff.size) * diff


class Adam:
    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.values -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.values.dtype)


def adam_step(params, state: Adam):
    """Apply one update to ``params`` (which must be ``state``'s parameters)."""
    if list(params) != state.params:
        raise ValueError("params do not belong to this Adam state")
    state.step()
    return params


def _freeze_dropout(net, freeze):
    for layer in net.layers:
        if isinstance(layer, Dropout):
            layer.frozen_mask = layer._cache if freeze and layer._cache is not None and layer._cache.ndim else None


def gradient_check(net: Network, x, target, step=1e-5, check_input=False):
    """Largest relative error between analytic and central-difference gradients.

    Uses train mode; dropout masks are drawn once and held fixed.
    """
    x = np.asarray(x, dtype=np.float64)
    net.zero_grad()
    out = net.forward(x, train=True)
    _, g = mse_loss(out, target)
    dx = net.backward(g)
    _freeze_dropout(net, True)

    def loss_at():
        return mse_loss(net.forward(x, train=True), target)[0]

    def rel(a, n):
        return abs(a - n) / max(abs(a), abs(n), 1e-8)

    worst = 0.0
    try:
        for _, p in net.named_params():
            analytic = p.grad.copy()
            flat = p.values.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + step
                lp = loss_at()
                flat[i] = old - step
                lm = loss_at()
                flat[i] = old
                worst = max(worst, rel(analytic.reshape(-1)[i], (lp - lm) / (2 * step)))
        if check_input:
            xf = x.reshape(-1)
            for i in range(xf.size):
                old = xf[i]
                xf[i] = old + step
                lp = loss_at()
                xf[i] = old - step
                lm = loss_at()
                xf[i] = old
                worst = max(worst, rel(dx.reshape(-1)[i], (lp - lm) / (2 * step)))
    finally:
        _freeze_dropout(net, False)
    return worst


# ---------------------------------------------------------------- checkpoints

def network_state(net: Network, model_kind="network", normalization=None, meta=None):
    arrays = {}
    for name, p in net.named_params():
        arrays[name] = {"shape": list(p.values.shape), "values": p.values.astype(np.float64).ravel().tolist()}
    for name, _, _, b in net.named_buffers():
        arrays[name] = {"shape": list(b.shape), "values": b.astype(np.float64).ravel().tolist()}
    return {
        "format_version": FORMAT_VERSION,
        "model_kind": model_kind,
        "dtype": net.dtype.name,
        "rng_seed": net.rng_seed,
        "layers": [s.to_dict() for s in net.specs],
        "params": arrays,
        "normalization": normalization,
        "meta": meta or {},
    }


def network_from_state(state: dict) -> Network:
    version = state.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format_version {version!r}, expected {FORMAT_VERSION}")
    net = Network([LayerSpec(**s) for s in state["layers"]], state.get("rng_seed", 0), state.get("dtype", "float64"))
    arrays = state["params"]

    def fetch(name, like):
        if name not in arrays:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        entry = arrays[name]
        if tuple(entry["shape"]) != like.shape:
            raise CheckpointError(f"parameter {name!r} has shape {entry['shape']}, expected {list(like.shape)}")
        return np.array(entry["values"], dtype=np.float64).reshape(like.shape).astype(like.dtype)

    for name, p in net.named_params():
        p.values = fetch(name, p.values)
        p.grad = np.zeros_like(p.values)
    for name, layer, key, b in net.named_buffers():
        layer.buffers[key] = fetch(name, b)
    return net


def save_checkpoint(net: Network, path, model_kind="network", normalization=None, meta=None):
    doc = network_state(net, model_kind, normalization, meta)
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_checkpoint(path) -> tuple[Network, dict]:
    """Returns the network and the raw document (normalization, meta, ...)."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a checkpoint document ({exc})") from None
    return network_from_state(doc), doc
