"""Parameters, layers, optimizer, and checkpoint serialization.

Layers are thin functional wrappers that register their tensors in a
ParamStore (insertion-ordered, seeded init) and build autodiff graphs when
called.  Convolutions pad circularly in x -- panoramas are periodic in
longitude and seam equivariance is load-bearing for the whole pipeline --
and with zeros in y.

Checkpoint byte layout (little-endian), version 1:

    magic  b"ODVW" | u32 version | u32 entry_count
    entry: u16 name_len | name utf-8 | u8 dtype (0=f64, 1=i64)
           | u8 ndim | u32 dims[ndim] | raw array bytes

Entries are written in dict order; loading reproduces arrays bit-exactly.
"""

from __future__ import annotations

import struct

import numpy as np

from .autodiff import Tensor, concat, conv2d, gelu, matmul

MAGIC = b"ODVW"
CHECKPOINT_VERSION = 1
_DTYPES = {0: np.float64, 1: np.int64}
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.int64): 1}


class ParamStore:
    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self._params: dict[str, Tensor] = {}

    def param(self, name: str, shape: tuple, std: float, fill: float = 0.0) -> Tensor:
        if name in self._params:
            t = self._params[name]
            if t.shape != tuple(shape):
                raise ValueError(f"param {name} re-registered with shape {shape} != {t.shape}")
            return t
        data = np.full(shape, float(fill))
        if std > 0:
            data += self.rng.normal(0.0, std, size=shape)
        t = Tensor(data)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def names(self):
        return list(self._params)

    def tensors(self):
        return list(self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def n_params(self) -> int:
        return sum(t.size for t in self._params.values())

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state_dict(self, d: dict):
        for k, t in self._params.items():
            if k not in d:
                raise KeyError(f"checkpoint is missing parameter {k}")
            if d[k].shape != t.data.shape:
                raise ValueError(f"shape mismatch for {k}: {d[k].shape} != {t.data.shape}")
            t.data = np.asarray(d[k], dtype=np.float64).copy()


# ------------------------------------------------------------------ layers --

class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 zero: bool = False):
        std = 0.0 if zero else float(np.sqrt(1.0 / d_in))
        self.w = store.param(f"{name}.w", (d_in, d_out), std)
        self.b = store.param(f"{name}.b", (d_out,), 0.0)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.w) + self.b


class MLP:
    def __init__(self, store, name, dims: list, zero_last: bool = False):
        self.layers = [
            Linear(store, f"{name}.{i}", dims[i], dims[i + 1],
                   zero=zero_last and i == len(dims) - 2)
            for i in range(len(dims) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = gelu(layer(x))
        return self.layers[-1](x)


class Conv:
    """3x3 (or kxk) conv; x-padding is circular, y-padding zero."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 k: int = 3, zero: bool = False):
        std = 0.0 if zero else float(np.sqrt(2.0 / (c_in * k * k)))
        self.k = k
        self.w = store.param(f"{name}.w", (c_out, c_in, k, k), std)
        self.b = store.param(f"{name}.b", (c_out,), 0.0)

    def __call__(self, x: Tensor, wrap_x: bool = True) -> Tensor:
        r = self.k // 2
        if r:
            if wrap_x:
                x = concat([x[:, :, :, -r:], x, x[:, :, :, :r]], axis=3)
            else:
                zx = Tensor(np.zeros(x.shape[:3] + (r,)))
                x = concat([zx, x, zx], axis=3)
            zy = Tensor(np.zeros(x.shape[:2] + (r,) + x.shape[3:]))
            x = concat([zy, x, zy], axis=2)
        return conv2d(x, self.w, self.b, stride=1, padding=0)


# --------------------------------------------------------------- optimizer --

class Adam:
    def __init__(self, store: ParamStore, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros(v.shape) for k, v in zip(store.names(), store.tensors())}
        self.v = {k: np.zeros(v.shape) for k, v in zip(store.names(), store.tensors())}

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name in self.store.names():
            p = self.store[name]
            g = p.grad if p.grad is not None else 0.0
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            p.data -= self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)

    def state_dict(self) -> dict:
        out = {"opt.t": np.array([self.t], dtype=np.int64)}
        out |= {f"opt.m.{k}": v.copy() for k, v in self.m.items()}
        out |= {f"opt.v.{k}": v.copy() for k, v in self.v.items()}
        return out

    def load_state_dict(self, d: dict):
        self.t = int(d["opt.t"][0])
        self.m = {k: d[f"opt.m.{k}"].copy() for k in self.m}
        self.v = {k: d[f"opt.v.{k}"].copy() for k in self.v}


# -------------------------------------------------------------- checkpoint --

def save_checkpoint(path, arrays: dict):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _DTYPE_CODES:
                raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            code, ndim = struct.unpack("<BB", fh.read(2))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            dtype = np.dtype(_DTYPES[code]).newbyteorder("<")
            raw = fh.read(int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize)
            out[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(_DTYPES[code])
        return out
