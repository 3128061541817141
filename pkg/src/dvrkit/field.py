"""Joint occupancy / texture network.

A single residual MLP maps a point (optionally concatenated with a latent
code) to four logits: one occupancy logit and three colour logits, each
squashed with a sigmoid.  The network has an input layer, ``n_blocks``
residual blocks of two affine layers each, and an output layer::

    h = W_in x + b_in
    h = h + W2 relu(W1 relu(h) + b1) + b2      (per block)
    out = W_out relu(h) + b_out

Two evaluation paths exist.  :func:`evaluate` is plain numpy and is what the
ray marcher calls thousands of times per iteration.  :func:`field_forward`
records the same computation on a :class:`~dvrkit.autodiff.Tape` when one is
given.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import BinaryIO

import numpy as np

from . import autodiff as ad

MAGIC = b"DVRF"
VERSION = 1
EPS_GRAD = 1e-8
_HEADER = struct.Struct("<4sIIII")


class FieldError(ValueError):
    pass


@dataclass
class FieldParams:
    """All weights of the network.  Arrays are stored in declaration order."""

    width: int
    latent_dim: int
    arrays: dict[str, np.ndarray] = dc_field(default_factory=dict)

    @property
    def n_blocks(self) -> int:
        return sum(1 for k in self.arrays if k.endswith(".fc1.W"))

    @property
    def names(self) -> list[str]:
        return list(self.arrays)

    def __getitem__(self, name):
        return self.arrays[name]

    def num_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def copy(self) -> "FieldParams":
        return FieldParams(self.width, self.latent_dim, {k: v.copy() for k, v in self.arrays.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.arrays.values()])

    def with_flat(self, vector: np.ndarray) -> "FieldParams":
        out, offset = {}, 0
        for k, a in self.arrays.items():
            out[k] = np.asarray(vector[offset : offset + a.size], dtype=np.float64).reshape(a.shape)
            offset += a.size
        return FieldParams(self.width, self.latent_dim, out)

    def bind(self, tape: ad.Tape) -> "BoundParams":
        """Leaf tensors for every array, created once per tape."""
        cache = getattr(tape, "_bound", None)
        if cache is None:
            cache = {}
            tape._bound = cache
        key = id(self)
        if key not in cache:
            cache[key] = BoundParams(self, {k: tape.leaf(v) for k, v in self.arrays.items()})
        return cache[key]


@dataclass
class BoundParams:
    params: FieldParams
    tensors: dict[str, ad.Tensor]

    def __getitem__(self, name):
        return self.tensors[name]

    def gradients(self, leaf_grads: dict[int, np.ndarray]) -> dict[str, np.ndarray]:
        return {k: leaf_grads[t.node] for k, t in self.tensors.items()}


def layer_shapes(width: int, n_blocks: int = 5, latent_dim: int = 0) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {
        "fc_in.W": (3 + latent_dim, width),
        "fc_in.b": (width,),
    }
    for i in range(n_blocks):
        shapes[f"block{i}.fc1.W"] = (width, width)
        shapes[f"block{i}.fc1.b"] = (width,)
        shapes[f"block{i}.fc2.W"] = (width, width)
        shapes[f"block{i}.fc2.b"] = (width,)
    shapes["fc_out.W"] = (width, 4)
    shapes["fc_out.b"] = (4,)
    return shapes


def init_params(
    width: int = 128,
    n_blocks: int = 5,
    latent_dim: int = 0,
    rng: np.random.Generator | int | None = 0,
    occupancy_bias: float = 0.5,
) -> FieldParams:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases 0, except the
    occupancy output bias, which starts at ``occupancy_bias``."""
    if width < 1 or n_blocks < 0 or latent_dim < 0:
        raise FieldError(f"invalid architecture width={width} n_blocks={n_blocks} latent_dim={latent_dim}")
    rng = np.random.default_rng(rng)
    arrays = {}
    for name, shape in layer_shapes(width, n_blocks, latent_dim).items():
        if name.endswith(".W"):
            bound = 1.0 / np.sqrt(shape[0])
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        else:
            arrays[name] = np.zeros(shape)
    arrays["fc_out.b"][0] = occupancy_bias
    return FieldParams(width, latent_dim, arrays)


def _inputs(points, z, params: FieldParams) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise FieldError(f"points must have shape (B, 3), got {points.shape}")
    if not np.all(np.isfinite(points)):
        raise FieldError("points contain non-finite values")
    z = _latent(z, params)
    if params.latent_dim == 0:
        return points
    return np.concatenate([points, np.broadcast_to(z, (len(points), params.latent_dim))], axis=1)


def _latent(z, params: FieldParams) -> np.ndarray:
    z = np.zeros(0) if z is None else np.asarray(z, dtype=np.float64).reshape(-1)
    if z.size != params.latent_dim:
        raise FieldError(f"latent code has dimension {z.size}, network expects {params.latent_dim}")
    return z


def evaluate_logits(points, z, params: FieldParams, chunk: int = 1024) -> np.ndarray:
    """Untaped forward pass returning the (B, 4) raw logits.

    Works through the batch in small chunks with preallocated buffers; on
    one core this is about twice as fast as whole-batch evaluation.
    """
    x = _inputs(points, z, params)
    a = params.arrays
    blocks = [
        (a[f"block{i}.fc1.W"], a[f"block{i}.fc1.b"], a[f"block{i}.fc2.W"], a[f"block{i}.fc2.b"])
        for i in range(params.n_blocks)
    ]
    out = np.empty((len(x), 4))
    for s in range(0, len(x), chunk):
        h = x[s : s + chunk] @ a["fc_in.W"]
        h += a["fc_in.b"]
        r = np.empty_like(h)
        net = np.empty_like(h)
        for W1, b1, W2, b2 in blocks:
            np.maximum(h, 0.0, out=r)
            np.matmul(r, W1, out=net)
            net += b1
            np.maximum(net, 0.0, out=net)
            np.matmul(net, W2, out=r)
            r += b2
            h += r
        np.maximum(h, 0.0, out=h)
        o = out[s : s + len(h)]
        np.matmul(h, a["fc_out.W"], out=o)
        o += a["fc_out.b"]
    return out


def min_preactivation(points, z, params: FieldParams) -> np.ndarray:
    """Per point, the smallest |input| to any ReLU: distance to a kink."""
    a = params.arrays
    h = _inputs(points, z, params) @ a["fc_in.W"] + a["fc_in.b"]
    margin = np.abs(h).min(axis=1)
    for i in range(params.n_blocks):
        pre = f"block{i}."
        net = np.maximum(h, 0.0) @ a[pre + "fc1.W"] + a[pre + "fc1.b"]
        h = h + np.maximum(net, 0.0) @ a[pre + "fc2.W"] + a[pre + "fc2.b"]
        margin = np.minimum(margin, np.minimum(np.abs(net).min(axis=1), np.abs(h).min(axis=1)))
    return margin


def evaluate(points, z, params: FieldParams) -> tuple[np.ndarray, np.ndarray]:
    """Untaped forward pass: (occupancy (B,), rgb (B, 3))."""
    out = ad._sigmoid(evaluate_logits(points, z, params))
    return out[:, 0], out[:, 1:]


def evaluate_occupancy(points, z, params: FieldParams, chunk: int = 1 << 16) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if len(points) <= chunk:
        return evaluate(points, z, params)[0]
    return np.concatenate([evaluate(points[i : i + chunk], z, params)[0] for i in range(0, len(points), chunk)])


def field_forward(points, z, params: FieldParams, tape: ad.Tape | None = None, *, bound=None):
    """Occupancy and colour for a batch of points.

    ``points`` may be a Tensor (e.g. surface points that depend on the
    parameters through the depth operator).  Without a tape the call is a
    plain numpy evaluation and returns arrays; with a tape it returns
    ``(occ, rgb)`` Tensors of shapes (B,) and (B, 3).  A latent Tensor ``z``
    is concatenated to every point.
    """
    if tape is None and not isinstance(points, ad.Tensor):
        return evaluate(points, z, params)
    if tape is None:
        tape = points.tape
    if bound is None:
        bound = params.bind(tape)
    x = points if isinstance(points, ad.Tensor) else ad.constant(points)
    if x.data.ndim != 2 or x.data.shape[1] != 3:
        raise FieldError(f"points must have shape (B, 3), got {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise FieldError("points contain non-finite values")
    if params.latent_dim:
        if isinstance(z, ad.Tensor):
            if z.data.size != params.latent_dim:
                raise FieldError(f"latent code has dimension {z.data.size}, network expects {params.latent_dim}")
            zrow = ad.mul(ad.constant(np.ones((x.shape[0], params.latent_dim))), z)
        else:
            zrow = ad.constant(np.broadcast_to(_latent(z, params), (x.shape[0], params.latent_dim)))
        x = ad.concat([x, zrow], axis=1)
    logits = _logits_taped(x, bound, params.n_blocks)
    out = ad.sigmoid(logits)
    return ad.slice_(out, (slice(None), 0)), ad.slice_(out, (slice(None), slice(1, 4)))


def _logits_taped(x: ad.Tensor, bound: BoundParams, n_blocks: int) -> ad.Tensor:
    h = ad.add_bias(ad.matmul(x, bound["fc_in.W"]), bound["fc_in.b"])
    for i in range(n_blocks):
        pre = f"block{i}."
        net = ad.add_bias(ad.matmul(ad.relu(h), bound[pre + "fc1.W"]), bound[pre + "fc1.b"])
        dx = ad.add_bias(ad.matmul(ad.relu(net), bound[pre + "fc2.W"]), bound[pre + "fc2.b"])
        h = ad.add(h, dx)
    return ad.add_bias(ad.matmul(ad.relu(h), bound["fc_out.W"]), bound["fc_out.b"])


def field_gradient(points, z, params: FieldParams) -> np.ndarray:
    """Spatial gradient of the occupancy probability, d occ / d p.

    Accepts a single 3-vector or a (B, 3) batch; points are independent, so
    one reverse sweep of ``sum(occ)`` yields every per-point gradient.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    _inputs(pts, z, params)
    tape = ad.Tape()
    leaf = tape.leaf(pts)
    occ, _ = field_forward(leaf, z, params, tape)
    grads = ad.backward(ad.sum(occ))
    g = grads[leaf.node]
    return g[0] if single else g


def surface_normal(points, z, params: FieldParams, eps: float = EPS_GRAD):
    """Unit normals ``grad f / |grad f|`` and a validity flag.

    The gradient of an occupancy field points into the object; the flag is
    False where ``|grad f| <= eps`` and the normal there is zero.
    """
    g = field_gradient(points, z, params)
    norm = np.linalg.norm(g, axis=-1, keepdims=True)
    ok = norm[..., 0] > eps
    n = np.where(norm > eps, g / np.where(norm > eps, norm, 1.0), 0.0)
    return n, ok


def occupancy_gradient_taped(points: np.ndarray, z, params: FieldParams, tape: ad.Tape, bound=None) -> ad.Tensor:
    """d occ / d p for constant points, recorded as a function of the weights.

    The reverse pass through the network is written out explicitly with the
    ReLU masks of the forward pass held fixed, so the result is a first-order
    graph in the parameters (no tape is differentiated twice).
    """
    if bound is None:
        bound = params.bind(tape)
    a = params.arrays
    x = _inputs(points, z, params)
    # Forward pass in numpy to collect activation masks and the output slope.
    h = x @ a["fc_in.W"] + a["fc_in.b"]
    masks = []
    for i in range(params.n_blocks):
        pre = f"block{i}."
        m_h = h > 0
        net = np.where(m_h, h, 0.0) @ a[pre + "fc1.W"] + a[pre + "fc1.b"]
        m_net = net > 0
        h = h + np.where(m_net, net, 0.0) @ a[pre + "fc2.W"] + a[pre + "fc2.b"]
        masks.append((m_h.astype(float), m_net.astype(float)))
    m_out = (h > 0).astype(float)
    # Forward pass on tape gives the sigmoid slope as a function of the weights.
    occ, _ = field_forward(points, z, params, tape, bound=bound)
    slope = ad.mul(occ, ad.sub(ad.constant(1.0), occ))
    w_occ = ad.slice_(bound["fc_out.W"], (slice(None), slice(0, 1)))
    # g_h: (B, width) gradient of the occupancy logit w.r.t. the hidden state.
    g = ad.mul(ad.constant(m_out), ad.transpose(w_occ))
    for i in reversed(range(params.n_blocks)):
        pre = f"block{i}."
        m_h, m_net = masks[i]
        g_net = ad.mul(ad.matmul(g, ad.transpose(bound[pre + "fc2.W"])), ad.constant(m_net))
        g_in = ad.mul(ad.matmul(g_net, ad.transpose(bound[pre + "fc1.W"])), ad.constant(m_h))
        g = ad.add(g, g_in)
    w_xyz = ad.slice_(bound["fc_in.W"], (slice(0, 3), slice(None)))
    g_p = ad.matmul(g, ad.transpose(w_xyz))
    return ad.mul(g_p, ad.slice_(slope, (slice(None), None)))


# --- checkpoint ----------------------------------------------------------


def write_params(fh: BinaryIO, params: FieldParams) -> None:
    """Header ``<4sIIII`` = (b"DVRF", version, width, n_blocks, latent_dim),
    then every array in declaration order as little-endian float64."""
    fh.write(_HEADER.pack(MAGIC, VERSION, params.width, params.n_blocks, params.latent_dim))
    for a in params.arrays.values():
        fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_params(fh: BinaryIO, source: str = "<stream>") -> FieldParams:
    raw = fh.read(_HEADER.size)
    if len(raw) != _HEADER.size:
        raise FieldError(f"{source}: truncated checkpoint header")
    magic, version, width, n_blocks, latent_dim = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise FieldError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise FieldError(f"{source}: unsupported checkpoint version {version}")
    arrays = {}
    for name, shape in layer_shapes(width, n_blocks, latent_dim).items():
        count = int(np.prod(shape))
        buf = fh.read(8 * count)
        if len(buf) != 8 * count:
            raise FieldError(f"{source}: truncated array {name}")
        arrays[name] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
    return FieldParams(width, latent_dim, arrays)


def save_params(path, params: FieldParams) -> None:
    with open(path, "wb") as fh:
        write_params(fh, params)


def load_params(path) -> FieldParams:
    path = Path(path)
    with open(path, "rb") as fh:
        return read_params(fh, str(path))
