"""Minimal differentiable-network substrate.

Plain numpy float64 throughout: parameters live in a ParamStore keyed by
name, layers are functional forward/backward pairs with explicit caches,
and Adam updates the store in place. Small by design; the layer zoo is
exactly what the driving model needs (dense, strided conv, leaky ReLU,
GRU cell) and every backward is checked against finite differences in
the test suite.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

LEAKY_SLOPE = 0.2
MODEL_MAGIC = "neurotraj-model"


class ShapeError(ValueError):
    """Raised when tensor shapes do not match a layer's expectation."""


class ParamStore:
    """Named parameters with matching gradient and Adam moment tensors."""

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already registered")
        arr = np.array(value, dtype=np.float64)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        self.grads[name] += grad

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


def adam_step(store: ParamStore, lr: float = 3e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in store.params.items():
        g = store.grads[name]
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    store.zero_grads()


# --- activations --------------------------------------------------------------

def leaky_relu_forward(x: np.ndarray, slope: float = LEAKY_SLOPE):
    y = np.where(x >= 0.0, x, slope * x)
    return y, (x >= 0.0, slope)


def leaky_relu_backward(grad_y: np.ndarray, cache):
    pos, slope = cache
    return np.where(pos, grad_y, slope * grad_y)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    p = x >= 0
    out[p] = 1.0 / (1.0 + np.exp(-x[p]))
    e = np.exp(x[~p])
    out[~p] = e / (1.0 + e)
    return out


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def softplus_grad(x: np.ndarray) -> np.ndarray:
    return sigmoid(x)


# --- dense ---------------------------------------------------------------

def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """y = x @ w.T + b with x of shape (B, n_in), w (n_out, n_in)."""
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {w.shape}")
    return x @ w.T + b, (x, w)


def dense_backward(grad_y: np.ndarray, cache):
    x, w = cache
    grad_w = grad_y.T @ x
    grad_b = grad_y.sum(axis=0)
    grad_x = grad_y @ w
    return grad_x, grad_w, grad_b


# --- strided convolution --------------------------------------------------

def _im2col(xp: np.ndarray, kernel: int, stride: int):
    """(B, C, Hp, Wp) -> (B, C*k*k, oh*ow) patch matrix.

    Built from k*k strided slice copies, which beats gathering through a
    sliding-window view for the strided kernels used here.
    """
    b, c, hp, wp = xp.shape
    oh = (hp - kernel) // stride + 1
    ow = (wp - kernel) // stride + 1
    cols = np.empty((b, c, kernel, kernel, oh, ow))
    for ki in range(kernel):
        for kj in range(kernel):
            cols[:, :, ki, kj] = xp[:, :, ki:ki + stride * oh:stride,
                                    kj:kj + stride * ow:stride]
    return cols.reshape(b, c * kernel * kernel, oh * ow), oh, ow


def _col2im(grad_cols: np.ndarray, xp_shape, kernel: int, stride: int,
            oh: int, ow: int) -> np.ndarray:
    """Scatter-add of column gradients back onto the padded input."""
    b, c, hp, wp = xp_shape
    gc = grad_cols.reshape(b, c, kernel, kernel, oh, ow)
    gxp = np.zeros(xp_shape)
    for ki in range(kernel):
        for kj in range(kernel):
            gxp[:, :, ki:ki + stride * oh:stride,
                kj:kj + stride * ow:stride] += gc[:, :, ki, kj]
    return gxp


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                   stride: int = 2, pad: int = 1):
    """2-D convolution, x (B, C, H, W), w (O, C, k, k), bias per channel."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    kernel = w.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols, oh, ow = _im2col(xp, kernel, stride)
    wf = w.reshape(w.shape[0], -1)
    y = np.matmul(wf, cols) + b[None, :, None]
    y = y.reshape(x.shape[0], w.shape[0], oh, ow)
    return y, (cols, xp.shape, w, stride, pad)


def conv2d_backward(grad_y: np.ndarray, cache, need_input_grad: bool = True):
    cols, xp_shape, w, stride, pad = cache
    b_sz, o, oh, ow = grad_y.shape
    gy = grad_y.reshape(b_sz, o, oh * ow)
    wf = w.reshape(o, -1)
    grad_w = np.matmul(gy, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    grad_b = gy.sum(axis=(0, 2))
    grad_x = None
    if need_input_grad:
        grad_cols = np.matmul(wf.T, gy)
        _, _, hp, wp = xp_shape
        gxp = _col2im(grad_cols, xp_shape, w.shape[2], stride, oh, ow)
        grad_x = gxp[:, :, pad:hp - pad, pad:wp - pad] if pad else gxp
    return grad_x, grad_w, grad_b


# --- GRU cell ---------------------------------------------------------------

GRU_PARAM_SUFFIXES = ("Wr", "Ur", "br", "Wz", "Uz", "bz", "Wn", "Un", "bn")


def init_gru_params(store: ParamStore, prefix: str, n_in: int, hidden: int,
                    rng: np.random.Generator) -> None:
    bound = 1.0 / np.sqrt(hidden)
    for gate in ("r", "z", "n"):
        store.add(f"{prefix}.W{gate}", rng.uniform(-bound, bound, (hidden, n_in)))
        store.add(f"{prefix}.U{gate}", rng.uniform(-bound, bound, (hidden, hidden)))
        store.add(f"{prefix}.b{gate}", np.zeros(hidden))


def gru_cell_forward(x: np.ndarray, h: np.ndarray, store: ParamStore, prefix: str):
    """One step: gates r, z and candidate n; h' = (1 - z) n + z h."""
    p = store.params
    if x.shape[1] != p[f"{prefix}.Wr"].shape[1]:
        raise ShapeError(
            f"gru_cell {prefix!r}: input {x.shape} incompatible with "
            f"weight {p[f'{prefix}.Wr'].shape}"
        )
    r = sigmoid(x @ p[f"{prefix}.Wr"].T + h @ p[f"{prefix}.Ur"].T + p[f"{prefix}.br"])
    z = sigmoid(x @ p[f"{prefix}.Wz"].T + h @ p[f"{prefix}.Uz"].T + p[f"{prefix}.bz"])
    hn = h @ p[f"{prefix}.Un"].T
    n = np.tanh(x @ p[f"{prefix}.Wn"].T + r * hn + p[f"{prefix}.bn"])
    h_new = (1.0 - z) * n + z * h
    return h_new, (x, h, r, z, n, hn, prefix)


def gru_cell_backward(grad_h_new: np.ndarray, cache, store: ParamStore):
    """Accumulates parameter grads into the store; returns (grad_x, grad_h)."""
    x, h, r, z, n, hn, prefix = cache
    p = store.params
    g = grad_h_new
    dz = g * (h - n) * z * (1.0 - z)
    dn_pre = g * (1.0 - z) * (1.0 - n * n)
    dr = dn_pre * hn * r * (1.0 - r)

    store.accumulate(f"{prefix}.Wn", dn_pre.T @ x)
    store.accumulate(f"{prefix}.Un", (dn_pre * r).T @ h)
    store.accumulate(f"{prefix}.bn", dn_pre.sum(axis=0))
    store.accumulate(f"{prefix}.Wz", dz.T @ x)
    store.accumulate(f"{prefix}.Uz", dz.T @ h)
    store.accumulate(f"{prefix}.bz", dz.sum(axis=0))
    store.accumulate(f"{prefix}.Wr", dr.T @ x)
    store.accumulate(f"{prefix}.Ur", dr.T @ h)
    store.accumulate(f"{prefix}.br", dr.sum(axis=0))

    grad_x = dn_pre @ p[f"{prefix}.Wn"] + dz @ p[f"{prefix}.Wz"] + dr @ p[f"{prefix}.Wr"]
    grad_h = (g * z + (dn_pre * r) @ p[f"{prefix}.Un"] + dz @ p[f"{prefix}.Uz"]
              + dr @ p[f"{prefix}.Ur"])
    return grad_x, grad_h


# --- layer chains -------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    """One feedforward layer in a chain.

    kind is one of dense, conv2d, leaky_relu, flatten. (The GRU cell is
    recurrent and used standalone; see gru_cell_forward.)
    """

    kind: str
    name: str = ""
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 4
    stride: int = 2
    pad: int = 1
    slope: float = LEAKY_SLOPE

    def to_json(self) -> dict:
        out = {"kind": self.kind}
        if self.name:
            out["name"] = self.name
        for key in ("in_features", "out_features", "in_channels", "out_channels"):
            if getattr(self, key):
                out[key] = getattr(self, key)
        if self.kind == "conv2d":
            out.update(kernel=self.kernel, stride=self.stride, pad=self.pad)
        if self.kind == "leaky_relu":
            out["slope"] = self.slope
        return out


class Chain:
    """A straight pipeline of LayerSpecs sharing one ParamStore."""

    def __init__(self, layers: list[LayerSpec]):
        self.layers = list(layers)
        for layer in self.layers:
            if layer.kind in ("dense", "conv2d") and not layer.name:
                raise ValueError(f"{layer.kind} layer needs a parameter name")

    def init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        for layer in self.layers:
            if layer.kind == "dense":
                bound = 1.0 / np.sqrt(layer.in_features)
                store.add(f"{layer.name}.w",
                          rng.uniform(-bound, bound, (layer.out_features, layer.in_features)))
                store.add(f"{layer.name}.b", rng.uniform(-bound, bound, layer.out_features))
            elif layer.kind == "conv2d":
                fan_in = layer.in_channels * layer.kernel * layer.kernel
                bound = 1.0 / np.sqrt(fan_in)
                store.add(f"{layer.name}.w",
                          rng.uniform(-bound, bound,
                                      (layer.out_channels, layer.in_channels,
                                       layer.kernel, layer.kernel)))
                store.add(f"{layer.name}.b", rng.uniform(-bound, bound, layer.out_channels))

    def forward(self, store: ParamStore, x: np.ndarray):
        caches = []
        for layer in self.layers:
            if layer.kind == "dense":
                try:
                    x, cache = dense_forward(x, store[f"{layer.name}.w"],
                                             store[f"{layer.name}.b"])
                except ShapeError as exc:
                    raise ShapeError(f"layer {layer.name!r}: {exc}") from None
            elif layer.kind == "conv2d":
                try:
                    x, cache = conv2d_forward(x, store[f"{layer.name}.w"],
                                              store[f"{layer.name}.b"],
                                              stride=layer.stride, pad=layer.pad)
                except ShapeError as exc:
                    raise ShapeError(f"layer {layer.name!r}: {exc}") from None
            elif layer.kind == "leaky_relu":
                x, cache = leaky_relu_forward(x, layer.slope)
            elif layer.kind == "flatten":
                cache = x.shape
                x = x.reshape(x.shape[0], -1)
            else:
                raise ValueError(f"unknown layer kind {layer.kind!r}")
            caches.append(cache)
        return x, caches

    def backward(self, store: ParamStore, caches, grad_y: np.ndarray,
                 need_input_grad: bool = True) -> np.ndarray | None:
        if len(caches) != len(self.layers):
            raise ValueError("cache does not match chain (missing forward?)")
        grad = grad_y
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            cache = caches[i]
            first = i == 0
            if layer.kind == "dense":
                grad, gw, gb = dense_backward(grad, cache)
                store.accumulate(f"{layer.name}.w", gw)
                store.accumulate(f"{layer.name}.b", gb)
            elif layer.kind == "conv2d":
                grad, gw, gb = conv2d_backward(
                    grad, cache, need_input_grad=need_input_grad or not first)
                store.accumulate(f"{layer.name}.w", gw)
                store.accumulate(f"{layer.name}.b", gb)
            elif layer.kind == "leaky_relu":
                grad = leaky_relu_backward(grad, cache)
            elif layer.kind == "flatten":
                grad = grad.reshape(cache)
        return grad


# --- model file ----------------------------------------------------------------
# One file: a JSON header line (layer specs, tensor names and shapes, free-form
# config), then the parameter payloads concatenated in header order as
# little-endian float64.

def save_params(path, store: ParamStore, layers: list[dict] | None = None,
                config: dict | None = None) -> None:
    tensors = [{"name": name, "shape": list(store.params[name].shape)}
               for name in store.names()]
    header = {
        "magic": MODEL_MAGIC,
        "layers": layers or [],
        "tensors": tensors,
        "config": config or {},
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for name in store.names():
            fh.write(np.ascontiguousarray(store.params[name], dtype="<f8").tobytes())


def load_params(path) -> tuple[ParamStore, list[dict], dict]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed model header: {exc}") from exc
    if header.get("magic") != MODEL_MAGIC:
        raise ValueError("not a model file (bad magic)")
    store = ParamStore()
    offset = 0
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * 8
        chunk = payload[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise ValueError(f"truncated payload for tensor {entry['name']!r}")
        store.add(entry["name"], np.frombuffer(chunk, dtype="<f8").reshape(shape))
        offset += nbytes
    if offset != len(payload):
        raise ValueError("trailing bytes after declared tensors")
    return store, header.get("layers", []), header.get("config", {})
