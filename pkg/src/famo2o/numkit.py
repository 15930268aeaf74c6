"""Small dense-network kernel: MLPs with hand-written backprop, Adam, policy
heads and the sinusoidal balance-coefficient encoding.

Parameters of every :class:`Mlp` live in one flat float64 vector; the
per-layer weight matrices and bias vectors are views into it.  Gradients use
the same flat layout, so optimizers, soft target updates and checkpoints all
operate on a single array.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Iterable

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0

_NET_MAGIC = b"FMLP"
_CKPT_MAGIC = b"FO2C"
_FORMAT_VERSION = 1


class ContractError(ValueError):
    """Raised when an operation is called outside its documented contract."""


class NonFiniteError(ArithmeticError):
    """Raised when NaN/Inf would be written into parameters."""


class Mlp:
    """ReLU multi-layer perceptron with an identity output layer."""

    def __init__(
        self,
        layer_dims: Iterable[int],
        rng: np.random.Generator | None = None,
        last_layer_scale: float | None = None,
    ):
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2 or any(d <= 0 for d in dims):
            raise ContractError(f"layer_dims must hold >= 2 positive ints, got {dims}")
        self.layer_dims = dims
        sizes = [a * b + b for a, b in zip(dims[:-1], dims[1:])]
        self.params = np.zeros(sum(sizes))
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        self._bind()
        if rng is not None:
            self.init(rng, last_layer_scale)

    def _bind(self) -> None:
        self.weights.clear()
        self.biases.clear()
        offset = 0
        for a, b in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            self.weights.append(self.params[offset:offset + a * b].reshape(a, b))
            offset += a * b
            self.biases.append(self.params[offset:offset + b])
            offset += b

    def init(self, rng: np.random.Generator, last_layer_scale: float | None = None) -> None:
        """Uniform fan-in initialisation; optionally shrink the output layer."""
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            bound = 1.0 / np.sqrt(w.shape[0])
            if i == n - 1 and last_layer_scale is not None:
                bound = last_layer_scale
            w[...] = rng.uniform(-bound, bound, size=w.shape)
            b[...] = rng.uniform(-bound, bound, size=b.shape)

    @property
    def n_params(self) -> int:
        return self.params.size

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def copy(self) -> "Mlp":
        clone = Mlp(self.layer_dims)
        clone.params[...] = self.params
        return clone

    def load_params(self, flat: np.ndarray) -> None:
        if flat.shape != self.params.shape:
            raise ContractError(f"expected {self.params.shape} params, got {flat.shape}")
        self.params[...] = flat

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Return ``(output, cache)``; ``x`` is ``(batch, in_dim)`` or ``(in_dim,)``."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim or x.ndim not in (1, 2):
            raise ContractError(f"input shape {x.shape} does not match in_dim={self.in_dim}")
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        cache = [h]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w
            h += b
            if i < last:
                np.maximum(h, 0.0, out=h)
            cache.append(h)
        cache.append(squeeze)  # type: ignore[arg-type]
        return (h[0] if squeeze else h), cache

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(
        self, cache: list, grad_out: np.ndarray, param_grad: bool = True, input_grad: bool = True
    ) -> tuple[np.ndarray | None, np.ndarray | None]:
        """Reverse-mode pass.  Returns ``(flat param grads, grad wrt input)``;
        either part is None when not requested."""
        squeeze = cache[-1]
        acts = cache[:-1]
        g = np.asarray(grad_out, dtype=np.float64)
        if squeeze:
            g = g[None, :]
        if g.shape != acts[-1].shape:
            raise ContractError(f"upstream grad shape {g.shape} != output shape {acts[-1].shape}")
        grads = np.empty_like(self.params) if param_grad else None
        offset = self.params.size
        n = len(self.weights)
        for i in range(n - 1, -1, -1):
            w = self.weights[i]
            if i < n - 1:
                g = g * (acts[i + 1] > 0.0)
            if grads is not None:
                nb = w.shape[1]
                nw = w.size
                np.sum(g, axis=0, out=grads[offset - nb:offset])
                np.matmul(acts[i].T, g, out=grads[offset - nb - nw:offset - nb].reshape(w.shape))
                offset -= nb + nw
            if i == 0 and not input_grad:
                return grads, None
            g = g @ w.T
        return grads, (g[0] if squeeze else g)


def mlp_forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    return net(x)


def mlp_backward(net: Mlp, x: np.ndarray, upstream_grad: np.ndarray) -> np.ndarray:
    """Flat parameter gradient of ``<upstream_grad, net(x)>``."""
    _, cache = net.forward(x)
    grads, _ = net.backward(cache, upstream_grad)
    return grads


class Adam:
    """Bias-corrected Adam over one flat parameter vector."""

    def __init__(self, n_params: int, lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ContractError("learning rate must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0
        self._tmp = np.zeros(n_params)

    def step(self, params: np.ndarray, grads: np.ndarray) -> None:
        """Descend ``grads`` in place."""
        if grads.shape != params.shape or params.shape != self.m.shape:
            raise ContractError(f"shape mismatch: params {params.shape}, grads {grads.shape}")
        if not np.isfinite(grads.sum()) and not np.all(np.isfinite(grads)):
            raise NonFiniteError("non-finite gradient entries; update rejected")
        self.t += 1
        tmp = self._tmp
        self.m *= self.beta1
        np.multiply(grads, 1.0 - self.beta1, out=tmp)
        self.m += tmp
        self.v *= self.beta2
        np.multiply(grads, grads, out=tmp)
        tmp *= 1.0 - self.beta2
        self.v += tmp
        # lr * m_hat / (sqrt(v_hat) + eps) without materialising the hats
        np.sqrt(self.v, out=tmp)
        tmp *= 1.0 / np.sqrt(1.0 - self.beta2 ** self.t)
        tmp += self.eps
        np.divide(self.m, tmp, out=tmp)
        tmp *= self.lr / (1.0 - self.beta1 ** self.t)
        params -= tmp


def adam_step(state: Adam, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    state.step(params, grads)
    return params


def soft_update(target: Mlp, online: Mlp, rate: float) -> None:
    """``target <- (1 - rate) * target + rate * online``."""
    target.params *= 1.0 - rate
    target.params += rate * online.params


# --- policy heads -------------------------------------------------------------

def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def clamp_log_std(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Clamp to ``[LOG_STD_MIN, LOG_STD_MAX]``; the mask marks pass-through entries."""
    mask = (raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)
    return np.clip(raw, LOG_STD_MIN, LOG_STD_MAX), mask


def gaussian_log_prob(x: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """Diagonal Gaussian log-density summed over the last axis."""
    z = (x - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * np.log(2.0 * np.pi), axis=-1)


def tanh_log_jacobian(u: np.ndarray, scale: float) -> np.ndarray:
    """``log |d(scale * tanh(u)) / du|`` summed over the last axis (stable form)."""
    return np.sum(np.log(scale) + 2.0 * (np.log(2.0) - u - np.logaddexp(0.0, -2.0 * u)), axis=-1)


def squashed_log_prob(u: np.ndarray, mean: np.ndarray, log_std: np.ndarray, scale: float) -> np.ndarray:
    """Log-density of ``a = scale * tanh(u)`` with ``u ~ N(mean, exp(log_std))``."""
    return gaussian_log_prob(u, mean, log_std) - tanh_log_jacobian(u, scale)


def unsquash(actions: np.ndarray, scale: float, margin: float = 1e-6) -> np.ndarray:
    """Pre-tanh value of a box action, clipped away from the boundary."""
    return np.arctanh(np.clip(actions / scale, -1.0 + margin, 1.0 - margin))


# --- balance-coefficient encoding ---------------------------------------------

def encoding_frequencies(dim: int) -> np.ndarray:
    if dim <= 0 or dim % 2:
        raise ContractError(f"encoding dimension must be even and positive, got {dim}")
    return 1.0 / 10000.0 ** (np.arange(0, dim, 2) / dim)


def sinusoid(position: np.ndarray, dim: int) -> np.ndarray:
    """Interleaved ``[sin(p f_0), cos(p f_0), sin(p f_1), ...]`` rows."""
    p = np.asarray(position, dtype=np.float64)
    angles = p[..., None] * encoding_frequencies(dim)
    out = np.empty(p.shape + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def sinusoid_grad(position: np.ndarray, dim: int) -> np.ndarray:
    """Elementwise derivative of :func:`sinusoid` with respect to the position."""
    p = np.asarray(position, dtype=np.float64)
    f = encoding_frequencies(dim)
    angles = p[..., None] * f
    out = np.empty(p.shape + (dim,))
    out[..., 0::2] = f * np.cos(angles)
    out[..., 1::2] = -f * np.sin(angles)
    return out


# --- checkpoints --------------------------------------------------------------
# Per network: magic "FMLP", u32 version, u32 n_layers, u32 layer_dims[n_layers+1],
# then for each layer the weight matrix (in_dim x out_dim, row-major) followed
# by its bias, all little-endian float64.  A checkpoint file is magic "FO2C",
# u32 version, u32 count, then per entry u32 name length, utf-8 name, network.

def write_mlp(fh: BinaryIO, net: Mlp) -> None:
    dims = net.layer_dims
    fh.write(_NET_MAGIC)
    fh.write(struct.pack("<II", _FORMAT_VERSION, len(dims) - 1))
    fh.write(struct.pack(f"<{len(dims)}I", *dims))
    fh.write(net.params.astype("<f8").tobytes())


def read_mlp(fh: BinaryIO) -> Mlp:
    if fh.read(4) != _NET_MAGIC:
        raise ValueError("not a network block (bad magic)")
    version, n_layers = struct.unpack("<II", fh.read(8))
    if version != _FORMAT_VERSION:
        raise ValueError(f"unsupported network format version {version}")
    dims = struct.unpack(f"<{n_layers + 1}I", fh.read(4 * (n_layers + 1)))
    net = Mlp(dims)
    raw = fh.read(8 * net.n_params)
    if len(raw) != 8 * net.n_params:
        raise ValueError("truncated network block")
    net.params[...] = np.frombuffer(raw, dtype="<f8")
    return net


def save_checkpoint(path, nets: dict[str, Mlp]) -> None:
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _FORMAT_VERSION, len(nets)))
        for name, net in nets.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            write_mlp(fh, net)


def load_checkpoint(path) -> dict[str, Mlp]:
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        nets = {}
        for _ in range(count):
            (length,) = struct.unpack("<I", fh.read(4))
            name = fh.read(length).decode("utf-8")
            nets[name] = read_mlp(fh)
        return nets


class BalanceSpace:
    """Closed interval of balance coefficients plus the encoding width.

    ``normalize`` switches the encoded position from the raw coefficient to
    its relative position ``(beta - beta_min) / (beta_max - beta_min)``.
    Out-of-range inputs are clamped and counted in ``n_clamped``.
    """

    def __init__(self, beta_min: float, beta_max: float, enc_dim: int = 8, normalize: bool = False):
        if not (0.0 < beta_min <= beta_max) or not np.isfinite(beta_max):
            raise ContractError(f"need 0 < beta_min <= beta_max, got [{beta_min}, {beta_max}]")
        encoding_frequencies(enc_dim)
        self.beta_min = float(beta_min)
        self.beta_max = float(beta_max)
        self.enc_dim = int(enc_dim)
        self.normalize = normalize
        self.n_clamped = 0

    @property
    def width(self) -> float:
        return self.beta_max - self.beta_min

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.beta_min + self.beta_max)

    def __repr__(self) -> str:
        return f"BalanceSpace({self.beta_min}, {self.beta_max}, enc_dim={self.enc_dim})"

    def clamp(self, beta: np.ndarray, count: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """Clamp into the interval; the mask marks entries left untouched."""
        beta = np.asarray(beta, dtype=np.float64)
        inside = (beta >= self.beta_min) & (beta <= self.beta_max)
        if count:
            self.n_clamped += int(beta.size - np.count_nonzero(inside))
        return np.clip(beta, self.beta_min, self.beta_max), inside

    def position(self, beta: np.ndarray) -> tuple[np.ndarray, float]:
        """Encoded position and its derivative with respect to beta."""
        if self.normalize:
            scale = 1.0 / self.width if self.width > 0 else 0.0
            return (beta - self.beta_min) * scale, scale
        return beta, 1.0


def encode_balance(beta, dim: int, space: BalanceSpace) -> np.ndarray:
    """Sinusoidal features of (a batch of) balance coefficients."""
    if dim != space.enc_dim:
        raise ContractError(f"encoding dimension {dim} differs from the space's {space.enc_dim}")
    clamped, _ = space.clamp(beta)
    pos, _ = space.position(clamped)
    return sinusoid(pos, dim)


def encode_balance_grad(beta, space: BalanceSpace) -> np.ndarray:
    """d encode_balance / d beta (zero where beta was clamped)."""
    clamped, inside = space.clamp(beta, count=False)
    pos, scale = space.position(clamped)
    return sinusoid_grad(pos, space.enc_dim) * (scale * inside)[..., None]
