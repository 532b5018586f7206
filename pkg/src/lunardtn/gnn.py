"""Graph-attention Q-network with hand-written reverse-mode gradients.

Architecture (default widths)::

    x_n (7) -> linear embed (64)
            -> GAT, 8 heads x 64, ELU        -> (512)
            -> GAT, 1 head  x 64, ELU        -> (64), plus the embedding
            -> per-node MLP 64 -> 32 (ReLU) -> 1   = Q-value of "send to node n"

Each row of the padded graph is a candidate next hop (row 0 is the deciding
rover itself, i.e. hold), so the Q-vector has one entry per padded slot and
permuting neighbor rows permutes the Q-values the same way.

Attention follows the usual GAT form: ``e_ij = LeakyReLU(a_dst . z_i +
a_src . z_j)`` over adjacency-permitted pairs, softmax over ``j``.

Everything is batched over graphs: features ``(B, n, 7)``, adjacency
``(B, n, n)``, validity ``(B, n)``. Padded rows beyond the last valid row of a
batch are cropped before any arithmetic, and masked rows never feed valid ones.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError

LEAKY_SLOPE = 0.2
MAGIC = b"GATQ"
FORMAT_VERSION = 1
PARAM_ORDER = (
    "embed_W", "embed_b",
    "gat1_W", "gat1_a_src", "gat1_a_dst", "gat1_b",
    "gat2_W", "gat2_a_src", "gat2_a_dst", "gat2_b",
    "mlp1_W", "mlp1_b",
    "mlp2_W", "mlp2_b",
)


@dataclass(frozen=True)
class Dims:
    in_dim: int = 7
    embed: int = 64
    heads: int = 8
    head_dim: int = 64
    out_dim: int = 64
    hidden: int = 32
    n_max: int = 32
    dropout: float = 0.2

    def __post_init__(self):
        if self.out_dim != self.embed:
            raise ShapeError("out_dim must equal embed for the skip connection")
        if min(self.in_dim, self.embed, self.heads, self.head_dim, self.hidden, self.n_max) < 1:
            raise ShapeError("all widths must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ShapeError("dropout must be in [0, 1)")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        h1 = self.heads * self.head_dim
        return {
            "embed_W": (self.in_dim, self.embed), "embed_b": (self.embed,),
            "gat1_W": (self.embed, h1), "gat1_a_src": (self.heads, self.head_dim),
            "gat1_a_dst": (self.heads, self.head_dim), "gat1_b": (h1,),
            "gat2_W": (h1, self.out_dim), "gat2_a_src": (1, self.out_dim),
            "gat2_a_dst": (1, self.out_dim), "gat2_b": (self.out_dim,),
            "mlp1_W": (self.out_dim, self.hidden), "mlp1_b": (self.hidden,),
            "mlp2_W": (self.hidden, 1), "mlp2_b": (1,),
        }

    def header_fields(self) -> tuple[int, ...]:
        return (self.in_dim, self.embed, self.heads, self.head_dim,
                self.out_dim, self.hidden, self.n_max)


class Params(dict):
    """Named parameter arrays plus the architecture they belong to."""

    def __init__(self, dims: Dims, arrays: dict[str, np.ndarray]):
        super().__init__(arrays)
        self.dims = dims

    @classmethod
    def init(cls, dims: Dims = Dims(), seed: int = 0, dtype=np.float32) -> "Params":
        rng = np.random.default_rng(seed)
        arrays = {}
        for name, shape in dims.shapes().items():
            if name.endswith("_b"):
                arrays[name] = np.zeros(shape, dtype=dtype)
                continue
            if name.endswith(("_a_src", "_a_dst")):
                fan_in, fan_out = shape[1], 1
            else:
                fan_in, fan_out = shape
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            arrays[name] = rng.uniform(-lim, lim, size=shape).astype(dtype)
        return cls(dims, arrays)

    def copy(self) -> "Params":
        return Params(self.dims, {k: v.copy() for k, v in self.items()})

    def astype(self, dtype) -> "Params":
        return Params(self.dims, {k: v.astype(dtype) for k, v in self.items()})

    def zeros_like(self) -> "Params":
        return Params(self.dims, {k: np.zeros_like(v) for k, v in self.items()})

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.values())

    def to_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(self[k], dtype="<f4").tobytes() for k in PARAM_ORDER)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


@dataclass
class PaddedGraph:
    features: np.ndarray   # (n_max, 7)
    adjacency: np.ndarray  # (n_max, n_max) bool, self-loops on valid rows
    valid: np.ndarray      # (n_max,) bool
    self_index: int = 0
    node_ids: tuple[int, ...] = ()  # simulator node id of each occupied slot

    def compact(self) -> "PaddedGraph":
        """Copy without the trailing padding rows (for storage)."""
        n = self.n_used
        return PaddedGraph(self.features[:n].astype(np.float32), self.adjacency[:n, :n].copy(),
                           self.valid[:n].copy(), self.self_index, self.node_ids)

    @property
    def n_used(self) -> int:
        idx = np.flatnonzero(self.valid)
        return int(idx[-1]) + 1 if len(idx) else 0


# -- activations --------------------------------------------------------------

def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def _elu_grad(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0))).astype(x.dtype)


def _dropout_mask(rng, shape, rate, dtype):
    keep = 1.0 - rate
    return (rng.random(shape) < keep).astype(dtype) / dtype.type(keep)


# -- GAT layer ----------------------------------------------------------------

def _gat_forward(h, W, a_src, a_dst, b, adj):
    B, n, _ = h.shape
    heads, f = a_src.shape
    z = (h.reshape(B * n, -1) @ W).reshape(B, n, heads, f).transpose(0, 2, 1, 3)  # B,H,n,F
    s_src = z @ a_src[None, :, :, None]  # B,H,n,1
    s_dst = z @ a_dst[None, :, :, None]
    e = s_dst + s_src.transpose(0, 1, 3, 2)  # B,H,i,j
    el = np.where(e > 0, e, LEAKY_SLOPE * e)
    mask = adj[:, None, :, :]
    em = np.where(mask, el, -np.inf)
    m = em.max(-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0)
    p = np.exp(em - m)
    den = p.sum(-1, keepdims=True)
    att = p / np.where(den > 0, den, 1)
    out = (att @ z).transpose(0, 2, 1, 3).reshape(B, n, heads * f) + b
    cache = (h, z, e, att, out)
    return _elu(out), att, cache


def _gat_backward(dact, W, a_src, a_dst, cache):
    h, z, e, att, pre = cache
    B, n, _ = h.shape
    heads, f = a_src.shape
    dpre = dact * _elu_grad(pre)
    db = dpre.sum((0, 1))
    dout = dpre.reshape(B, n, heads, f).transpose(0, 2, 1, 3)  # B,H,n,F
    datt = dout @ z.transpose(0, 1, 3, 2)                      # B,H,i,j
    dz = att.transpose(0, 1, 3, 2) @ dout
    dem = att * (datt - (att * datt).sum(-1, keepdims=True))
    de = dem * np.where(e > 0, 1.0, LEAKY_SLOPE).astype(dem.dtype)
    ds_dst = de.sum(-1)  # B,H,i
    ds_src = de.sum(-2)  # B,H,j
    da_src = np.einsum("bhnf,bhn->hf", z, ds_src)
    da_dst = np.einsum("bhnf,bhn->hf", z, ds_dst)
    dz = dz + ds_src[..., None] * a_src[None, :, None, :] + ds_dst[..., None] * a_dst[None, :, None, :]
    dz_flat = dz.transpose(0, 2, 1, 3).reshape(B * n, heads * f)
    dW = h.reshape(B * n, -1).T @ dz_flat
    dh = (dz_flat @ W.T).reshape(B, n, -1)
    return dh, dW, da_src, da_dst, db


# -- network ------------------------------------------------------------------

def _check(params: Params, x, adj, valid):
    d = params.dims
    if x.ndim != 3 or x.shape[2] != d.in_dim:
        raise ShapeError(f"features must be (B, n, {d.in_dim}), got {x.shape}")
    B, n, _ = x.shape
    if n > d.n_max:
        raise ShapeError(f"{n} rows exceed n_max={d.n_max}")
    if adj.shape != (B, n, n) or valid.shape != (B, n):
        raise ShapeError(f"adjacency {adj.shape} / valid {valid.shape} do not match features {x.shape}")


def forward_batch(params: Params, x, adj, valid, training: bool = False,
                  rng: np.random.Generator | None = None):
    """Q-values ``(B, n)`` (``-inf`` on invalid rows) and a cache for :func:`backward`."""
    x = np.asarray(x)
    adj = np.asarray(adj, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    _check(params, x, adj, valid)
    dt = params["embed_W"].dtype
    x = x.astype(dt, copy=False)
    adj = adj & valid[:, :, None] & valid[:, None, :]
    B, n, _ = x.shape
    rate = params.dims.dropout if training else 0.0
    if rate > 0 and rng is None:
        raise ValueError("training forward needs an rng for dropout")

    h0 = (x.reshape(B * n, -1) @ params["embed_W"]).reshape(B, n, -1) + params["embed_b"]
    h1, att1, c1 = _gat_forward(h0, params["gat1_W"], params["gat1_a_src"],
                                params["gat1_a_dst"], params["gat1_b"], adj)
    m1 = _dropout_mask(rng, h1.shape, rate, h1.dtype) if rate > 0 else None
    h1d = h1 * m1 if m1 is not None else h1
    h2, att2, c2 = _gat_forward(h1d, params["gat2_W"], params["gat2_a_src"],
                                params["gat2_a_dst"], params["gat2_b"], adj)
    # skip from the embedding: on a fully connected neighbourhood the attention
    # rows coincide, so without it every node would get the same output
    h2 = h2 + h0
    m2 = _dropout_mask(rng, h2.shape, rate, h2.dtype) if rate > 0 else None
    h2d = h2 * m2 if m2 is not None else h2
    pre3 = h2d @ params["mlp1_W"] + params["mlp1_b"]
    h3 = np.maximum(pre3, 0)
    m3 = _dropout_mask(rng, h3.shape, rate, h3.dtype) if rate > 0 else None
    h3d = h3 * m3 if m3 is not None else h3
    q = (h3d @ params["mlp2_W"])[..., 0] + params["mlp2_b"][0]
    q = np.where(valid, q, -np.inf)
    cache = dict(x=x, valid=valid, h0=h0, c1=c1, m1=m1, h1d=h1d, c2=c2, m2=m2,
                 h2d=h2d, pre3=pre3, m3=m3, h3d=h3d, att=(att1, att2))
    return q, cache


def backward(params: Params, cache: dict, dq) -> Params:
    """Gradient of ``sum(dq * q)`` with respect to every parameter.

    ``dq`` is ignored on invalid rows.
    """
    dq = np.where(cache["valid"], dq, 0).astype(cache["h3d"].dtype)
    B, n = dq.shape
    g = {}
    h3d = cache["h3d"]
    g["mlp2_b"] = np.array([dq.sum()], dtype=dq.dtype)
    g["mlp2_W"] = (h3d.reshape(B * n, -1).T @ dq.reshape(B * n, 1))
    dh3 = dq[..., None] * params["mlp2_W"][:, 0]
    if cache["m3"] is not None:
        dh3 = dh3 * cache["m3"]
    dpre3 = dh3 * (cache["pre3"] > 0)
    h2d = cache["h2d"]
    g["mlp1_W"] = h2d.reshape(B * n, -1).T @ dpre3.reshape(B * n, -1)
    g["mlp1_b"] = dpre3.sum((0, 1))
    dh2 = dpre3 @ params["mlp1_W"].T
    if cache["m2"] is not None:
        dh2 = dh2 * cache["m2"]
    dh1, g["gat2_W"], g["gat2_a_src"], g["gat2_a_dst"], g["gat2_b"] = _gat_backward(
        dh2, params["gat2_W"], params["gat2_a_src"], params["gat2_a_dst"], cache["c2"])
    if cache["m1"] is not None:
        dh1 = dh1 * cache["m1"]
    dh0, g["gat1_W"], g["gat1_a_src"], g["gat1_a_dst"], g["gat1_b"] = _gat_backward(
        dh1, params["gat1_W"], params["gat1_a_src"], params["gat1_a_dst"], cache["c1"])
    dh0 = dh0 + dh2
    x = cache["x"]
    g["embed_W"] = x.reshape(B * n, -1).T @ dh0.reshape(B * n, -1)
    g["embed_b"] = dh0.sum((0, 1))
    return Params(params.dims, {k: np.asarray(g[k], dtype=params[k].dtype).reshape(params[k].shape)
                                for k in PARAM_ORDER})


def stack_graphs(graphs: list[PaddedGraph]):
    """Batch arrays padded (or cropped) to the widest used row count."""
    n = max(1, max(gr.n_used for gr in graphs))
    B = len(graphs)
    x = np.zeros((B, n, graphs[0].features.shape[1]))
    adj = np.zeros((B, n, n), dtype=bool)
    valid = np.zeros((B, n), dtype=bool)
    for b, gr in enumerate(graphs):
        k = min(n, len(gr.valid))
        x[b, :k] = gr.features[:k]
        adj[b, :k, :k] = gr.adjacency[:k, :k]
        valid[b, :k] = gr.valid[:k]
    return x, adj, valid


def forward(params: Params, graph: PaddedGraph, training: bool = False,
            seed: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Q-values over all ``n_max`` slots and the valid-action mask for one graph."""
    d = params.dims
    if graph.features.shape != (d.n_max, d.in_dim) or graph.adjacency.shape != (d.n_max, d.n_max) \
            or graph.valid.shape != (d.n_max,):
        raise ShapeError("padded graph does not match the model's n_max / input width")
    if not graph.valid[graph.self_index]:
        raise ShapeError("self row must be valid")
    x, adj, valid = stack_graphs([graph])
    rng = np.random.default_rng(seed) if training else None
    q, _ = forward_batch(params, x, adj, valid, training, rng)
    out = np.full(d.n_max, -np.inf, dtype=q.dtype)
    out[:q.shape[1]] = q[0]
    return out, graph.valid.copy()


def attention(params: Params, graph: PaddedGraph) -> tuple[np.ndarray, np.ndarray]:
    """Attention coefficients of both layers, for inspection and tests."""
    x, adj, valid = stack_graphs([graph])
    _, cache = forward_batch(params, x, adj, valid)
    a1, a2 = cache["att"]
    return a1[0], a2[0, 0]


# -- checkpoints ----------------------------------------------------------------
# Layout (little-endian):
#   4s   magic "GATQ"
#   u16  format version
#   7*u32  in_dim, embed, heads, head_dim, out_dim, hidden, n_max
#   u32  parameter count
#   f32[] parameters, tensors in PARAM_ORDER, each C-order

_HEADER = struct.Struct("<4sH7II")


def save_checkpoint(params: Params, path: str | Path) -> int:
    payload = params.to_bytes()
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, *params.dims.header_fields(), params.n_params)
    data = header + payload
    Path(path).write_bytes(data)
    return len(data)


def load_checkpoint(path: str | Path, expect: Dims | None = None) -> Params:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, *fields, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    try:
        dims = Dims(*fields)
    except (TypeError, ShapeError) as exc:
        raise FormatError(f"{path}: bad dims {tuple(fields)}") from exc
    if expect is not None and dims.header_fields() != expect.header_fields():
        raise FormatError(f"{path}: architecture {dims.header_fields()} != {expect.header_fields()}")
    shapes = dims.shapes()
    if count != sum(int(np.prod(s)) for s in shapes.values()):
        raise FormatError(f"{path}: parameter count {count} does not match dims")
    if len(data) != _HEADER.size + 4 * count:
        raise FormatError(f"{path}: payload is {len(data) - _HEADER.size} bytes, expected {4 * count}")
    flat = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).astype(np.float32)
    arrays, pos = {}, 0
    for name in PARAM_ORDER:
        size = int(np.prod(shapes[name]))
        arrays[name] = flat[pos:pos + size].reshape(shapes[name]).copy()
        pos += size
    if not all(np.isfinite(a).all() for a in arrays.values()):
        raise FormatError(f"{path}: non-finite parameters")
    return Params(dims, arrays)
