"""Small feedforward networks with exact reverse-mode gradients.

Flat parameter layout, layer by layer: the weight matrix of shape
``(fan_out, fan_in)`` in row-major order, then its bias of length ``fan_out``.
Hidden layers apply the activation; the output layer is the identity.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import fmt_float

LEAKY_SLOPE = 0.01
SMALL_INIT_FACTOR = 1e-2

CHECKPOINT_MAGIC = "INVDYN-CHECKPOINT"
CHECKPOINT_VERSION = 1


class Activation(str, enum.Enum):
    LEAKY_RELU = "leakyrelu"
    TANH = "tanh"
    IDENTITY = "identity"

    @property
    def code(self) -> int:
        return {"leakyrelu": 0, "tanh": 1, "identity": 2}[self.value]


class InitScale(str, enum.Enum):
    STANDARD = "standard"
    SMALL = "small"


@dataclass(frozen=True)
class MlpArch:
    layer_widths: tuple[int, ...]
    activation: Activation = Activation.TANH

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        object.__setattr__(self, "activation", Activation(self.activation))
        if len(widths) < 3:
            raise ValueError(f"need at least one hidden layer, got widths {widths}")
        if min(widths) < 1:
            raise ValueError(f"layer widths must be >= 1, got {widths}")

    @property
    def n_in(self) -> int:
        return self.layer_widths[0]

    @property
    def n_out(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum(a * b + b for a, b in zip(w[:-1], w[1:]))

    def shapes(self):
        w = self.layer_widths
        return list(zip(w[1:], w[:-1]))


NODE_ARCH = MlpArch((3, 64, 64, 3), Activation.LEAKY_RELU)
UDE_ARCH = MlpArch((3, 16, 16, 1), Activation.TANH)


@dataclass(frozen=True, eq=False)
class ModelParams:
    arch: MlpArch
    flat: np.ndarray
    seed: int | None = field(default=None)

    def __post_init__(self):
        flat = np.array(self.flat, dtype=float).ravel()
        if flat.size != self.arch.n_params:
            raise ValueError(f"{self.arch.layer_widths} needs {self.arch.n_params} params, got {flat.size}")
        if not np.all(np.isfinite(flat)):
            raise ValueError("parameters must be finite")
        flat.flags.writeable = False
        object.__setattr__(self, "flat", flat)

    def layers(self):
        """Views ``[(W, b), ...]`` into the flat array."""
        return unflatten(self.arch, self.flat)

    def replace_flat(self, flat) -> "ModelParams":
        return ModelParams(self.arch, flat, self.seed)


def unflatten(arch: MlpArch, flat: np.ndarray):
    out, k = [], 0
    for fo, fi in arch.shapes():
        W = flat[k : k + fo * fi].reshape(fo, fi)
        k += fo * fi
        b = flat[k : k + fo]
        k += fo
        out.append((W, b))
    return out


def flatten(layers) -> np.ndarray:
    return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in layers])


def _act(kind: Activation, z):
    if kind is Activation.LEAKY_RELU:
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    if kind is Activation.TANH:
        return np.tanh(z)
    return z


def _act_deriv(kind: Activation, z, a):
    if kind is Activation.LEAKY_RELU:
        return np.where(z > 0, 1.0, LEAKY_SLOPE)
    if kind is Activation.TANH:
        return 1.0 - a * a
    return np.ones_like(z)


def _forward_cache(params: ModelParams, x):
    x = np.asarray(x, dtype=float)
    if x.shape != (params.arch.n_in,):
        raise ValueError(f"input must have length {params.arch.n_in}, got shape {x.shape}")
    layers = params.layers()
    posts, pres = [x], []
    h = x
    for li, (W, b) in enumerate(layers):
        z = W @ h + b
        h = z if li == len(layers) - 1 else _act(params.arch.activation, z)
        pres.append(z)
        posts.append(h)
    return layers, pres, posts


def mlp_forward(params: ModelParams, x) -> np.ndarray:
    return _forward_cache(params, x)[2][-1]


def mlp_grad(params: ModelParams, x, upstream):
    """Vector-Jacobian products ``(d y/d params)^T u`` and ``(d y/d x)^T u``."""
    u = np.asarray(upstream, dtype=float)
    if u.shape != (params.arch.n_out,):
        raise ValueError(f"upstream must have length {params.arch.n_out}, got shape {u.shape}")
    layers, pres, posts = _forward_cache(params, x)
    grads = [None] * len(layers)
    delta = u
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        grads[li] = (np.outer(delta, posts[li]), delta.copy())
        g_in = W.T @ delta
        if li > 0:
            delta = g_in * _act_deriv(params.arch.activation, pres[li - 1], posts[li])
    return flatten(grads), g_in


def init_params(arch: MlpArch, seed: int, scale: InitScale | str = InitScale.STANDARD) -> ModelParams:
    """Fan-in scaled uniform weights and biases, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``.

    Draws come from ``PCG64(seed)`` layer by layer in flat order. ``small``
    multiplies the same draw by ``SMALL_INIT_FACTOR``.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    parts = []
    for fo, fi in arch.shapes():
        lim = np.sqrt(1.0 / fi)
        parts.append(rng.uniform(-lim, lim, size=fo * fi + fo))
    flat = np.concatenate(parts)
    if InitScale(scale) is InitScale.SMALL:
        flat = flat * SMALL_INIT_FACTOR
    return ModelParams(arch, flat, seed)


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path: str | Path, params: ModelParams, extra: dict[str, str] | None = None) -> None:
    """Text header of ``key=value`` lines ending in ``END``, then the flat array as little-endian float64."""
    lines = [
        f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}",
        "widths=" + ",".join(map(str, params.arch.layer_widths)),
        f"activation={params.arch.activation.value}",
        f"seed={'' if params.seed is None else params.seed}",
        f"n_params={params.arch.n_params}",
    ]
    for key, val in (extra or {}).items():
        lines.append(f"{key}={val}")
    lines.append("END")
    header = ("\n".join(lines) + "\n").encode()
    body = struct.pack(f"<{params.flat.size}d", *params.flat)
    Path(path).write_bytes(header + body)


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict[str, str]]:
    raw = Path(path).read_bytes()
    end = raw.find(b"\nEND\n")
    if not raw.startswith(CHECKPOINT_MAGIC.encode()) or end < 0:
        raise ValueError(f"{path}: not a checkpoint file")
    lines = raw[:end].decode().split("\n")
    version = int(lines[0].split()[1])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    meta = dict(line.split("=", 1) for line in lines[1:])
    arch = MlpArch(tuple(int(w) for w in meta["widths"].split(",")), Activation(meta["activation"]))
    n = int(meta["n_params"])
    body = raw[end + 5 :]
    if len(body) != 8 * n:
        raise ValueError(f"{path}: expected {8 * n} bytes of parameters, found {len(body)}")
    flat = np.array(struct.unpack(f"<{n}d", body))
    seed = int(meta["seed"]) if meta["seed"] else None
    return ModelParams(arch, flat, seed), meta


def export_text(path: str | Path, params: ModelParams) -> None:
    Path(path).write_text("".join(fmt_float(v) + "\n" for v in params.flat))
