"""Tanh MLPs with hand-written forward and reverse passes.

Weights are stored ``(out, in)`` so a layer computes ``x @ W.T + b``. All
batched entry points accept a single observation vector or a ``(B, dim)``
batch; parameter gradients are summed over the batch in row order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))
LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0


@dataclass
class MlpParams:
    weights: list
    biases: list
    log_std: np.ndarray | None = None

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must have the same number of layers")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {i}: bias length {b.shape[0]} != weight rows {w.shape[0]}")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: input width does not chain with layer {i - 1}")
        if self.log_std is not None and not np.all(np.isfinite(self.log_std)):
            raise ValueError("log_std must be finite")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def arrays(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        if self.log_std is not None:
            out.append(self.log_std)
        return out

    def flatten(self) -> np.ndarray:
        return np.concatenate([x.ravel() for x in self.arrays()])

    def unflatten(self, flat) -> "MlpParams":
        """Return a new params object with the same shapes filled from ``flat``."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.size:
            raise ValueError(f"expected {self.size} values, got {flat.size}")
        pos = 0
        chunks = []
        for x in self.arrays():
            chunks.append(flat[pos : pos + x.size].reshape(x.shape).copy())
            pos += x.size
        n = len(self.weights)
        return MlpParams(
            weights=chunks[0 : 2 * n : 2],
            biases=chunks[1 : 2 * n : 2],
            log_std=chunks[2 * n] if self.log_std is not None else None,
        )

    @property
    def size(self) -> int:
        return sum(x.size for x in self.arrays())

    def copy(self) -> "MlpParams":
        return self.unflatten(self.flatten())

    def zeros_like(self) -> "MlpParams":
        return self.unflatten(np.zeros(self.size))


@dataclass
class PolicyOutput:
    mean: np.ndarray
    std: np.ndarray


def _uniform_layer(rng, fan_in, fan_out, gain):
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros(fan_out)


def init_mlp(sizes, rng, out_gain=1.0, hidden_gain=1.0, log_std_dim=None) -> MlpParams:
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        gain = out_gain if i == len(sizes) - 2 else hidden_gain
        w, b = _uniform_layer(rng, fan_in, fan_out, gain)
        weights.append(w)
        biases.append(b)
    log_std = np.zeros(log_std_dim) if log_std_dim is not None else None
    return MlpParams(weights, biases, log_std)


def init_policy(dim_s, dim_a, hidden=(64, 64), rng=None) -> MlpParams:
    rng = np.random.default_rng() if rng is None else rng
    return init_mlp([dim_s, *hidden, dim_a], rng, out_gain=0.01, log_std_dim=dim_a)


def init_critic(dim_s, hidden=(64, 64), rng=None) -> MlpParams:
    rng = np.random.default_rng() if rng is None else rng
    return init_mlp([dim_s, *hidden, 1], rng, out_gain=1.0)


# ---------------------------------------------------------------------------
# generic MLP passes


def _as_batch(params, obs):
    x = np.asarray(obs, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != params.in_dim:
        raise ValueError(f"observation has dimension {x.shape[1]}, network expects {params.in_dim}")
    return x, single


def mlp_forward(params: MlpParams, x):
    """Return the linear output and the list of layer inputs for the backward pass."""
    inputs = [x]
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        h = z if i == last else np.tanh(z)
        if i != last:
            inputs.append(h)
    return h, inputs


def mlp_backward(params: MlpParams, inputs, g_out):
    """Vector-Jacobian product through the MLP; returns (dW list, db list, dx)."""
    n = len(params.weights)
    dws, dbs = [None] * n, [None] * n
    g = g_out
    for i in range(n - 1, -1, -1):
        x_in = inputs[i]
        dws[i] = g.T @ x_in
        dbs[i] = g.sum(axis=0)
        g = g @ params.weights[i]
        if i > 0:
            g = g * (1.0 - x_in**2)
    return dws, dbs, g


# ---------------------------------------------------------------------------
# policy


def policy_forward(params: MlpParams, obs) -> PolicyOutput:
    x, single = _as_batch(params, obs)
    mean, _ = mlp_forward(params, x)
    std = np.exp(params.log_std)
    if single:
        return PolicyOutput(mean[0], std.copy())
    return PolicyOutput(mean, np.broadcast_to(std, mean.shape).copy())


def sample_reparam(out: PolicyOutput, noise):
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[-1] != out.mean.shape[-1]:
        raise ValueError("noise dimension must match the action dimension")
    return out.mean + out.std * noise


def log_prob(out: PolicyOutput, a):
    z = (np.asarray(a, dtype=np.float64) - out.mean) / out.std
    return -0.5 * np.sum(z**2 + 2.0 * np.log(out.std) + LOG_2PI, axis=-1)


def entropy(params: MlpParams) -> float:
    return float(np.sum(0.5 * (LOG_2PI + 1.0) + params.log_std))


def policy_backward(params: MlpParams, obs, noise, upstream):
    """Backprop ``dL/da`` through ``a = mean(s) + exp(log_std) * noise``.

    Returns the parameter gradient (summed over the batch) and ``dL/ds`` per sample.
    """
    x, single = _as_batch(params, obs)
    g = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    eps = np.atleast_2d(np.asarray(noise, dtype=np.float64))
    _, inputs = mlp_forward(params, x)
    dws, dbs, dx = mlp_backward(params, inputs, g)
    d_log_std = np.sum(g * np.exp(params.log_std) * eps, axis=0)
    grad = MlpParams(dws, dbs, d_log_std)
    return grad, dx[0] if single else dx


def policy_mean_backward(params: MlpParams, inputs, g_mean, g_log_std) -> MlpParams:
    dws, dbs, _ = mlp_backward(params, inputs, g_mean)
    return MlpParams(dws, dbs, np.asarray(g_log_std, dtype=np.float64))


def clamp_log_std(params: MlpParams) -> MlpParams:
    if params.log_std is not None:
        np.clip(params.log_std, LOG_STD_MIN, LOG_STD_MAX, out=params.log_std)
    return params


# ---------------------------------------------------------------------------
# critic


def value_forward(params: MlpParams, obs):
    x, single = _as_batch(params, obs)
    v, _ = mlp_forward(params, x)
    v = v[:, 0]
    return float(v[0]) if single else v


def value_backward(params: MlpParams, obs, upstream):
    """Returns (parameter gradient summed over the batch, dL/ds per sample)."""
    x, single = _as_batch(params, obs)
    g = np.asarray(upstream, dtype=np.float64).reshape(-1, 1)
    _, inputs = mlp_forward(params, x)
    dws, dbs, dx = mlp_backward(params, inputs, g)
    return MlpParams(dws, dbs, None), dx[0] if single else dx


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)


def adam_step(params: MlpParams, grads: MlpParams, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam step; returns new params and new state."""
    g = grads.flatten()
    if g.shape != state.m.shape:
        raise ValueError("gradient does not match the optimiser state")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    theta = params.flatten() - lr * m_hat / (np.sqrt(v_hat) + eps)
    return params.unflatten(theta), AdamState(m, v, t)


def clip_grad_norm(grads: MlpParams, max_norm: float) -> MlpParams:
    flat = grads.flatten()
    norm = float(np.sqrt(np.dot(flat, flat)))
    if norm > max_norm:
        return grads.unflatten(flat * (max_norm / norm))
    return grads


# ---------------------------------------------------------------------------
# checkpoint files
#
# Layout (all integers little-endian):
#   magic            8 bytes  b"APGCKPT\x01" (last byte is the format version)
#   n_arrays         uint32
#   per array:
#     name_len       uint32, then name_len bytes of UTF-8 name
#     ndim           uint32, then ndim x uint64 shape entries
#     data           prod(shape) x float64, C order
# Names are "<net>/W<i>", "<net>/b<i>" and "<net>/log_std".

CKPT_MAGIC = b"APGCKPT\x01"


def _named_arrays(prefix: str, params: MlpParams):
    out = []
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        out.append((f"{prefix}/W{i}", w))
        out.append((f"{prefix}/b{i}", b))
    if params.log_std is not None:
        out.append((f"{prefix}/log_std", params.log_std))
    return out


def save_checkpoint(path, nets: dict) -> None:
    """Write ``{"policy": MlpParams, "critic": MlpParams}`` style mappings."""
    entries = []
    for prefix, params in nets.items():
        entries += _named_arrays(prefix, params)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    pos = 8
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n

    nets = {}
    for prefix in sorted({k.split("/")[0] for k in arrays}):
        n_layers = sum(1 for k in arrays if k.startswith(f"{prefix}/W"))
        nets[prefix] = MlpParams(
            weights=[arrays[f"{prefix}/W{i}"] for i in range(n_layers)],
            biases=[arrays[f"{prefix}/b{i}"] for i in range(n_layers)],
            log_std=arrays.get(f"{prefix}/log_std"),
        )
    return nets
