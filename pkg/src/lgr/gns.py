"""Graph Network-based Simulator in plain numpy with hand-written gradients.

Encoder -> K message-passing blocks -> decoder, every block an MLP::

    h = node_enc(x_node)             e = edge_enc(x_edge)
    e' = edge_mlp([e, h_recv, h_send]) + e
    h' = node_mlp([h, sum_{edges into i} e']) + h
    out = decoder(h)

Hidden layers use ReLU, output layers are linear, and the encoder/processor
MLPs end in LayerNorm.  Parameters live in an ordered ``dict`` of float64
arrays; :func:`backward` returns gradients under the same keys.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numba as nb
import numpy as np

from .errors import ShapeMismatch, SpecMismatch
from .features import GraphSample, NormStats

LN_EPS = 1e-5


@dataclass(frozen=True)
class GnsSpec:
    node_in: int = 15
    edge_in: int = 4
    latent: int = 64
    n_blocks: int = 3
    hidden_layers: int = 2
    layernorm: bool = True
    out: int = 3

    def __post_init__(self):
        if self.hidden_layers < 1:
            raise ValueError("every MLP needs at least one hidden layer")

    @classmethod
    def paper_scale(cls, node_in: int = 15) -> "GnsSpec":
        """Five 128-wide message-passing blocks, one hidden layer per MLP."""
        return cls(node_in=node_in, latent=128, n_blocks=5, hidden_layers=1)


@nb.njit(cache=True)
def _layernorm_forward(z, g, b, eps):
    n, d = z.shape
    y = np.empty_like(z)
    xhat = np.empty_like(z)
    inv = np.empty(n)
    for i in range(n):
        mu = 0.0
        for k in range(d):
            mu += z[i, k]
        mu /= d
        var = 0.0
        for k in range(d):
            t = z[i, k] - mu
            var += t * t
        s = 1.0 / np.sqrt(var / d + eps)
        inv[i] = s
        for k in range(d):
            xh = (z[i, k] - mu) * s
            xhat[i, k] = xh
            y[i, k] = xh * g[k] + b[k]
    return y, xhat, inv


@nb.njit(cache=True)
def _layernorm_backward(dy, xhat, inv, g):
    n, d = dy.shape
    dx = np.empty_like(dy)
    dg = np.zeros(d)
    db = np.zeros(d)
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for k in range(d):
            dxh = dy[i, k] * g[k]
            m1 += dxh
            m2 += dxh * xhat[i, k]
            dg[k] += dy[i, k] * xhat[i, k]
            db[k] += dy[i, k]
        m1 /= d
        m2 /= d
        for k in range(d):
            dx[i, k] = inv[i] * (dy[i, k] * g[k] - m1 - xhat[i, k] * m2)
    return dx, dg, db


class Mlp:
    """MLP whose first layer takes a list of input pieces.

    A piece may be gathered (``X[idx]``) before entering the first layer; its
    contribution is computed as ``(X @ W_piece)[idx]`` so the projection runs
    on nodes rather than edges.
    """

    def __init__(self, name: str, in_dims, width: int, out: int, hidden_layers: int,
                 layernorm: bool):
        self.name = name
        self.in_dims = list(in_dims)
        self.dims = [sum(self.in_dims)] + [width] * hidden_layers + [out]
        self.layernorm = layernorm

    def param_shapes(self) -> dict:
        shapes = {}
        for k, (a, b) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            shapes[f"{self.name}.{k}.w"] = (a, b)
            shapes[f"{self.name}.{k}.b"] = (b,)
        if self.layernorm:
            shapes[f"{self.name}.ln.g"] = (self.dims[-1],)
            shapes[f"{self.name}.ln.b"] = (self.dims[-1],)
        return shapes

    def init(self, params: dict, rng: np.random.Generator) -> None:
        for key, shape in self.param_shapes().items():
            if key.endswith(".w"):
                limit = math.sqrt(6.0 / (shape[0] + shape[1]))
                params[key] = rng.uniform(-limit, limit, shape)
            elif key.endswith("ln.g"):
                params[key] = np.ones(shape)
            else:
                params[key] = np.zeros(shape)

    def forward(self, params, pieces):
        """``pieces``: list of ``(X, gather_idx_or_None)``."""
        n_lin = len(self.dims) - 1
        w0 = params[f"{self.name}.0.w"]
        z = params[f"{self.name}.0.b"]
        row = 0
        for (x, idx), d in zip(pieces, self.in_dims):
            proj = x @ w0[row:row + d]
            z = z + (proj if idx is None else proj[idx])
            row += d
        acts = []
        for k in range(1, n_lin):
            a = np.maximum(z, 0.0)
            acts.append((z, a))
            z = a @ params[f"{self.name}.{k}.w"] + params[f"{self.name}.{k}.b"]
        ln = None
        if self.layernorm:
            z, xhat, inv = _layernorm_forward(np.ascontiguousarray(z), params[f"{self.name}.ln.g"],
                                              params[f"{self.name}.ln.b"], LN_EPS)
            ln = (xhat, inv)
        return z, (pieces, acts, ln)

    def backward(self, params, grads, cache, dy, scatters):
        """Accumulate parameter grads; return input grads per piece.

        ``scatters[k]`` is the ``(N, E)`` matrix that adjoins piece ``k``'s
        gather (ignored for un-gathered pieces).
        """
        pieces, acts, ln = cache
        n_lin = len(self.dims) - 1
        if self.layernorm:
            xhat, inv = ln
            dy, dg, db = _layernorm_backward(np.ascontiguousarray(dy), xhat, inv,
                                             params[f"{self.name}.ln.g"])
            _acc(grads, f"{self.name}.ln.g", dg)
            _acc(grads, f"{self.name}.ln.b", db)
        dz = dy
        for k in range(n_lin - 1, 0, -1):
            z_prev, a_prev = acts[k - 1]
            _acc(grads, f"{self.name}.{k}.w", a_prev.T @ dz)
            _acc(grads, f"{self.name}.{k}.b", dz.sum(axis=0))
            dz = (dz @ params[f"{self.name}.{k}.w"].T) * (z_prev > 0)
        _acc(grads, f"{self.name}.0.b", dz.sum(axis=0))
        w0 = params[f"{self.name}.0.w"]
        dw0 = np.zeros_like(w0)
        dxs = []
        row = 0
        for k, ((x, idx), d) in enumerate(zip(pieces, self.in_dims)):
            dz_nodes = dz if idx is None else scatters[k] @ dz
            dw0[row:row + d] = x.T @ dz_nodes
            dxs.append(dz_nodes @ w0[row:row + d].T)
            row += d
        _acc(grads, f"{self.name}.0.w", dw0)
        return dxs


def _acc(grads: dict, key: str, value: np.ndarray) -> None:
    if key in grads:
        grads[key] += value
    else:
        grads[key] = value


class GnsModel:
    """Weights, architecture and normalization statistics of one simulator."""

    def __init__(self, spec: GnsSpec, stats: NormStats | None = None, seed=0, params=None,
                 meta: dict | None = None):
        self.spec = spec
        self.stats = NormStats.identity() if stats is None else stats
        # feature settings the model was trained with (history, radius, ...)
        self.meta = dict(meta or {})
        d, hl, ln = spec.latent, spec.hidden_layers, spec.layernorm
        self.node_enc = Mlp("node_enc", [spec.node_in], d, d, hl, ln)
        self.edge_enc = Mlp("edge_enc", [spec.edge_in], d, d, hl, ln)
        self.edge_mlps = [Mlp(f"block{k}.edge", [d, d, d], d, d, hl, ln)
                          for k in range(spec.n_blocks)]
        self.node_mlps = [Mlp(f"block{k}.node", [d, d], d, d, hl, ln)
                          for k in range(spec.n_blocks)]
        self.decoder = Mlp("decoder", [d], d, spec.out, hl, False)
        if params is None:
            rng = np.random.default_rng(seed)
            params = {}
            for mlp in self.mlps():
                mlp.init(params, rng)
        else:
            expected = self.param_shapes()
            if list(params) != list(expected) or any(
                    tuple(params[k].shape) != tuple(s) for k, s in expected.items()):
                raise SpecMismatch("parameter arrays do not match the model spec")
        self.params = params

    def mlps(self):
        blocks = [m for pair in zip(self.edge_mlps, self.node_mlps) for m in pair]
        return [self.node_enc, self.edge_enc, *blocks, self.decoder]

    def param_shapes(self) -> dict:
        shapes = {}
        for mlp in self.mlps():
            shapes.update(mlp.param_shapes())
        return shapes

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    # -- forward / backward ------------------------------------------------

    def forward(self, sample: GraphSample, keep_cache: bool = False):
        """Normalized accelerations ``(N, 3)`` (and the cache if requested)."""
        sp = self.spec
        if sample.node_features.shape[1] != sp.node_in:
            raise ShapeMismatch(
                f"node features have width {sample.node_features.shape[1]}, model expects {sp.node_in}")
        if sample.edge_features.shape[1] != sp.edge_in:
            raise ShapeMismatch(
                f"edge features have width {sample.edge_features.shape[1]}, model expects {sp.edge_in}")
        p = self.params
        recv, send = sample.receivers, sample.senders
        S = sample.scatter_matrix("receivers")
        h, c_ne = self.node_enc.forward(p, [(sample.node_features, None)])
        e, c_ee = self.edge_enc.forward(p, [(sample.edge_features, None)])
        blocks = []
        for em, nm in zip(self.edge_mlps, self.node_mlps):
            de, c_e = em.forward(p, [(e, None), (h, recv), (h, send)])
            e = de + e
            agg = S @ e
            dh, c_n = nm.forward(p, [(h, None), (agg, None)])
            h = dh + h
            blocks.append((c_e, c_n))
        out, c_dec = self.decoder.forward(p, [(h, None)])
        if not keep_cache:
            return out
        return out, (sample, c_ne, c_ee, blocks, c_dec)

    __call__ = forward

    def backward(self, cache, dout: np.ndarray) -> dict:
        """Gradients of ``sum(dout * forward(sample))`` for every parameter."""
        sample, c_ne, c_ee, blocks, c_dec = cache
        p = self.params
        grads: dict = {}
        S_recv = sample.scatter_matrix("receivers")
        S_send = sample.scatter_matrix("senders")
        (dh,) = self.decoder.backward(p, grads, c_dec, dout, [None])
        de = np.zeros((sample.n_edges, self.spec.latent))
        for (c_e, c_n), em, nm in zip(reversed(blocks), reversed(self.edge_mlps),
                                      reversed(self.node_mlps)):
            dh_in, dagg = nm.backward(p, grads, c_n, dh, [None, None])
            dh = dh + dh_in
            # agg = S_recv @ e_new  =>  d e_new += S_recv^T dagg = dagg[recv]
            de = de + dagg[sample.receivers]
            de_in, dh_recv, dh_send = em.backward(p, grads, c_e, de, [None, S_recv, S_send])
            de = de + de_in
            dh = dh + dh_recv + dh_send
        self.edge_enc.backward(p, grads, c_ee, de, [None])
        self.node_enc.backward(p, grads, c_ne, dh, [None])
        return {k: grads[k] for k in self.params}

    def loss_and_grad(self, sample: GraphSample):
        pred, cache = self.forward(sample, keep_cache=True)
        value, dpred = loss(pred, sample.targets, sample.mask, with_grad=True)
        return value, self.backward(cache, dpred)

    def copy(self) -> "GnsModel":
        return GnsModel(self.spec, self.stats, params={k: v.copy() for k, v in self.params.items()},
                        meta=self.meta)


def loss(pred, target, mask=None, with_grad: bool = False):
    """Mean squared error over all (masked) node components."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {target.shape}")
    r = pred - target
    if mask is not None:
        r = r * np.asarray(mask, dtype=np.float64)[:, None]
        count = float(np.count_nonzero(mask)) * pred.shape[1]
    else:
        count = float(r.size)
    value = float(np.sum(r * r) / count)
    if with_grad:
        return value, 2.0 * r / count
    return value


# -- optimizer -------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    lr_init: float = 1e-4
    lr_final: float = 1e-6
    decay_steps: float = 5e6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model: GnsModel, **hyper) -> "AdamState":
        zeros = {k: np.zeros_like(v) for k, v in model.params.items()}
        return cls({k: z.copy() for k, z in zeros.items()}, zeros, **hyper)

    def lr(self, step: int | None = None) -> float:
        """Exponential decay from ``lr_init`` towards ``lr_final`` (x0.1 per ``decay_steps``)."""
        s = self.step if step is None else step
        return self.lr_final + (self.lr_init - self.lr_final) * 0.1 ** (s / self.decay_steps)

    def hyper(self) -> dict:
        return {k: getattr(self, k) for k in
                ("lr_init", "lr_final", "decay_steps", "beta1", "beta2", "eps")}

    def update(self, params: dict, grads: dict) -> None:
        lr = self.lr()
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step
        c2 = 1.0 - b2**self.step
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train_step(model: GnsModel, adam: AdamState, batch: GraphSample) -> float:
    value, grads = model.loss_and_grad(batch)
    adam.update(model.params, grads)
    return value


def train(model: GnsModel, adam: AdamState, source, steps: int, batch_size: int = 1,
          callback=None) -> list:
    """Run ``steps`` Adam updates on batches drawn from ``source``."""
    losses = []
    for i in range(steps):
        value = train_step(model, adam, source.batch(batch_size))
        losses.append(value)
        if callback is not None:
            callback(i, value)
    return losses


# -- checkpoints -----------------------------------------------------------

CKPT_MAGIC = b"LGCK"
CKPT_VERSION = 1


def save_checkpoint(model: GnsModel, adam: AdamState | None, path) -> None:
    """``LGCK`` | u32 version | u32 header length | JSON header | f64 payload.

    Payload order: parameters, then Adam first and second moments, each in
    header key order.
    """
    header = {
        "spec": asdict(model.spec),
        "stats": model.stats.to_dict(),
        "meta": model.meta,
        "params": [[k, list(v.shape)] for k, v in model.params.items()],
        "adam": None if adam is None else {"step": adam.step, **adam.hyper()},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(blob)) + blob)
        for v in model.params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
        if adam is not None:
            for store in (adam.m, adam.v):
                for k in model.params:
                    fh.write(np.ascontiguousarray(store[k], dtype="<f8").tobytes())


def load_checkpoint(path, spec: GnsSpec | None = None):
    """Returns ``(model, adam_or_None)``; ``spec`` (if given) must match."""
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise SpecMismatch(f"{path} is not a checkpoint (magic {raw[:4]!r})")
    version, n = struct.unpack("<II", raw[4:12])
    if version != CKPT_VERSION:
        raise SpecMismatch(f"checkpoint version {version}, expected {CKPT_VERSION}")
    header = json.loads(raw[12:12 + n])
    stored = GnsSpec(**header["spec"])
    if spec is not None and spec != stored:
        raise SpecMismatch(f"checkpoint spec {stored} does not match requested {spec}")
    offset = 12 + n

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += 8 * count
        return arr.astype(np.float64)

    params = {k: take(tuple(s)) for k, s in header["params"]}
    model = GnsModel(stored, NormStats.from_dict(header["stats"]), params=params,
                     meta=header.get("meta"))
    adam = None
    if header["adam"] is not None:
        hyper = dict(header["adam"])
        step = hyper.pop("step")
        m = {k: take(tuple(s)) for k, s in header["params"]}
        v = {k: take(tuple(s)) for k, s in header["params"]}
        adam = AdamState(m, v, step, **hyper)
    if offset != len(raw):
        raise SpecMismatch(f"{path}: {len(raw) - offset} trailing bytes")
    return model, adam
