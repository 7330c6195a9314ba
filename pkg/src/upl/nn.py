"""Parameterized layers, the parameter store and checkpoint serialization.

Layers are thin callables over autodiff Tensors. Weights are initialized
uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero, layer-norm gain one;
all parameters live in float64.
"""

import struct

import numpy as np

from upl import autodiff as ad
from upl.autodiff import Tensor
from upl.errors import DataError

CHECKPOINT_MAGIC = b"UPL1"


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    """Affine map y = x @ W + b on the trailing axis."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.d_in, self.d_out = d_in, d_out
        self.w = Tensor(xavier_uniform(rng, d_in, d_out, (d_in, d_out)), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ValueError(f"linear expects trailing dim {self.d_in}, got {x.shape}")
        lead = x.shape[:-1]
        flat = ad.reshape(x, (-1, self.d_in)) if x.ndim != 2 else x
        out = ad.matmul(flat, self.w)
        if self.b is not None:
            out = out + self.b
        if x.ndim != 2:
            out = ad.reshape(out, lead + (self.d_out,))
        return out

    def parameters(self):
        return {"w": self.w} if self.b is None else {"w": self.w, "b": self.b}


class Conv1dProto:
    """1-D convolution along the prototype axis of a (C, d) tensor.

    The d feature coordinates act as channels and the C prototypes as the
    spatial axis, zero-padded at the borders. Width 1 is exactly a
    channel-mixing linear map.
    """

    def __init__(self, d: int, width: int, rng: np.random.Generator, bias: bool = True):
        if width < 1 or width % 2 == 0:
            raise ValueError(f"kernel width must be odd and positive, got {width}")
        self.d, self.width = d, width
        self.kernel = Tensor(xavier_uniform(rng, d * width, d, (d, d, width)), requires_grad=True)
        self.b = Tensor(np.zeros(d), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.d:
            raise ValueError(f"conv1d expects (C, {self.d}), got {x.shape}")
        c = x.shape[0]
        pad = (self.width - 1) // 2
        if pad:
            zeros = Tensor(np.zeros((pad, self.d)))
            x_pad = ad.concat([zeros, x, zeros], axis=0)
        else:
            x_pad = x
        out = None
        for t in range(self.width):
            tap = ad.reshape(ad.narrow(self.kernel, 2, t, 1), (self.d, self.d))
            term = ad.matmul(ad.narrow(x_pad, 0, t, c), ad.transpose(tap))
            out = term if out is None else out + term
        if self.b is not None:
            out = out + self.b
        return out

    def parameters(self):
        return {"kernel": self.kernel} if self.b is None else {"kernel": self.kernel, "b": self.b}


class LayerNorm:
    """Per-row normalization to zero mean / unit variance, then affine."""

    def __init__(self, d: int, eps: float = 1e-5):
        self.d, self.eps = d, eps
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d:
            raise ValueError(f"layer_norm expects trailing dim {self.d}, got {x.shape}")
        mu = ad.tmean(x, axis=-1, keepdims=True)
        xc = x - mu
        var = ad.tmean(xc * xc, axis=-1, keepdims=True)
        y = xc / ad.sqrt(var + self.eps)
        return y * self.gain + self.bias

    def parameters(self):
        return {"gain": self.gain, "bias": self.bias}


def linear(x, w, b=None) -> Tensor:
    """Functional affine map for ad-hoc weights (tests, oracles)."""
    out = ad.matmul(x, w)
    return out if b is None else out + b


class ParamStore:
    """Named parameter tensors with gradients and a step counter."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.step = 0

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def add_module(self, prefix: str, module) -> None:
        for key, tensor in module.parameters().items():
            self.add(f"{prefix}.{key}", tensor)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def fill_missing_grads(self):
        """Zero gradients for parameters untouched by the last backward pass."""
        for t in self._params.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)

    # -- checkpoint format: magic UPL1, then little-endian records of
    #    (u32 name length, utf-8 name, u32 rank, u64 extents, float64 payload),
    #    parameters sorted by name.

    def to_bytes(self) -> bytes:
        chunks = [CHECKPOINT_MAGIC]
        for name in sorted(self._params):
            data = self._params[name].data
            raw = name.encode("utf-8")
            chunks.append(struct.pack("<I", len(raw)))
            chunks.append(raw)
            chunks.append(struct.pack("<I", data.ndim))
            chunks.append(struct.pack(f"<{data.ndim}Q", *data.shape))
            chunks.append(np.ascontiguousarray(data, dtype="<f8").tobytes())
        return b"".join(chunks)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    def load(self, path):
        """Load a checkpoint in place; names and shapes must match exactly."""
        state = read_checkpoint(path)
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise DataError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, values in state.items():
            tensor = self._params[name]
            if tensor.data.shape != values.shape:
                raise DataError(f"checkpoint shape mismatch for {name!r}: {values.shape} vs {tensor.data.shape}")
            tensor.data = values

    @staticmethod
    def from_checkpoint(path) -> "ParamStore":
        store = ParamStore()
        for name, values in read_checkpoint(path).items():
            store.add(name, Tensor(values))
        return store


def read_checkpoint(path) -> dict:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"{path}: cannot read checkpoint ({exc})") from exc
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    state = {}
    off = 4
    try:
        while off < len(blob):
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, off)
            off += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            values = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
            off += 8 * count
            state[name] = values.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: truncated or corrupt checkpoint") from exc
    return state


class Optimizer:
    """SGD or Adam over a ParamStore; step() consumes and zeroes gradients."""

    def __init__(self, kind: str = "adam", learning_rate: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {kind!r}")
        if learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        self.kind = kind
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._moments: dict[str, tuple] = {}

    def step(self, store: ParamStore):
        missing = [name for name, t in store.items() if t.grad is None]
        if missing:
            raise ValueError(f"missing gradients for {missing}")
        t = store.step + 1
        for name, param in store.items():
            g = param.grad
            if self.kind == "sgd":
                param.data = param.data - self.learning_rate * g
            else:
                m, v = self._moments.get(name, (np.zeros_like(param.data), np.zeros_like(param.data)))
                m = self.beta1 * m + (1.0 - self.beta1) * g
                v = self.beta2 * v + (1.0 - self.beta2) * g * g
                self._moments[name] = (m, v)
                m_hat = m / (1.0 - self.beta1**t)
                v_hat = v / (1.0 - self.beta2**t)
                param.data = param.data - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
        store.zero_grad()
        store.step = t


def optimizer_step(store: ParamStore, opt: Optimizer):
    opt.step(store)
