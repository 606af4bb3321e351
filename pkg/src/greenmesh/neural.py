"""Learnable edge correction and residual state correction.

Both networks are small tanh MLP stacks evaluated with numpy; every forward
pass returns a tape of intermediates, and ``backward`` walks that tape to
accumulate exact parameter gradients into a :class:`ParamStore`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import container
from .mesh import EdgeGeometry, Mesh, NodeType
from .operators import on_pattern


class ParamStore:
    """Flat float64 parameter vector with named segments and a matching gradient buffer."""

    def __init__(self, shapes: dict[str, tuple[int, ...]]):
        self.segments: dict[str, tuple[int, tuple[int, ...]]] = {}
        self._slices: dict[str, tuple[slice, tuple[int, ...]]] = {}
        offset = 0
        for name, shape in shapes.items():
            shape = tuple(int(s) for s in shape)
            size = int(np.prod(shape))
            self.segments[name] = (offset, shape)
            self._slices[name] = (slice(offset, offset + size), shape)
            offset += size
        self.values = np.zeros(offset)
        self.grads = np.zeros(offset)

    @property
    def size(self) -> int:
        return self.values.size

    def _slice(self, name):
        return self._slices[name]

    def __getitem__(self, name: str) -> np.ndarray:
        sl, shape = self._slice(name)
        return self.values[sl].reshape(shape)

    def grad(self, name: str) -> np.ndarray:
        sl, shape = self._slice(name)
        return self.grads[sl].reshape(shape)

    def zero_grad(self) -> None:
        self.grads[:] = 0.0

    def copy(self) -> "ParamStore":
        out = ParamStore({k: v[1] for k, v in self.segments.items()})
        out.values[:] = self.values
        out.grads[:] = self.grads
        return out

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.segments if n.startswith(prefix)]

    def mask(self, prefix: str) -> np.ndarray:
        m = np.zeros(self.size, dtype=bool)
        for n in self.names(prefix):
            m[self._slice(n)[0]] = True
        return m


def save_checkpoint(store: ParamStore, path: str | Path, hyper: dict, seed: int, extra: dict | None = None) -> str:
    meta = {
        "kind": "checkpoint",
        "segments": [{"name": n, "shape": list(s)} for n, (_, s) in store.segments.items()],
        "hyperparameters": hyper,
        "seed": int(seed),
    }
    if extra:
        meta.update(extra)
    return container.write(path, meta, {"params": store.values})


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict]:
    meta, arr = container.read(path)
    if meta.get("kind") != "checkpoint":
        raise container.ContainerError(f"{path} is not a checkpoint")
    store = ParamStore({s["name"]: tuple(s["shape"]) for s in meta["segments"]})
    if arr["params"].size != store.size:
        raise container.ContainerError("parameter block size does not match manifest")
    store.values[:] = arr["params"]
    return store, meta


class MLP:
    """Affine layers with tanh between them; the output layer is linear."""

    def __init__(self, prefix: str, sizes: list[int]):
        self.prefix = prefix
        self.sizes = list(sizes)

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def shapes(self) -> dict[str, tuple[int, ...]]:
        out = {}
        for k in range(self.n_layers):
            out[f"{self.prefix}.W{k}"] = (self.sizes[k], self.sizes[k + 1])
            out[f"{self.prefix}.b{k}"] = (self.sizes[k + 1],)
        return out

    def init(self, store: ParamStore, rng: np.random.Generator, scale: float, zero_last: bool = False) -> None:
        for k in range(self.n_layers):
            w = store[f"{self.prefix}.W{k}"]
            w[...] = scale * rng.standard_normal(w.shape) / np.sqrt(w.shape[0])
            store[f"{self.prefix}.b{k}"][...] = 0.0
        if zero_last:
            store[f"{self.prefix}.W{self.n_layers - 1}"][...] = 0.0

    def forward(self, store: ParamStore, x: np.ndarray):
        acts = [x]
        a = x
        for k in range(self.n_layers):
            z = a @ store[f"{self.prefix}.W{k}"] + store[f"{self.prefix}.b{k}"]
            a = np.tanh(z) if k < self.n_layers - 1 else z
            acts.append(a)
        return a, acts

    def backward(self, store: ParamStore, acts, dy: np.ndarray) -> np.ndarray:
        dz = dy
        for k in range(self.n_layers - 1, -1, -1):
            a_in = acts[k]
            store.grad(f"{self.prefix}.W{k}")[...] += a_in.T @ dz
            store.grad(f"{self.prefix}.b{k}")[...] += dz.sum(axis=0)
            da = dz @ store[f"{self.prefix}.W{k}"].T
            if k > 0:
                dz = da * (1.0 - acts[k] ** 2)
            else:
                return da
        return dz

    def output_bound(self, store: ParamStore) -> float:
        """Bound on |output| given that the last layer sees tanh inputs in [-1, 1]."""
        k = self.n_layers - 1
        w = store[f"{self.prefix}.W{k}"]
        b = store[f"{self.prefix}.b{k}"]
        return float(np.max(np.abs(w).sum(axis=0) + np.abs(b)))


@dataclass(frozen=True)
class NetConfig:
    width: int = 64
    layers: int = 2
    mlp_hidden: int = 2
    diagonal: str = "zero_row_sum"  # or "free"
    correction_scale: float | None = None
    residual_width: int = 16
    residual_scale: float = 1.0
    state_scale: float = 1.0

    def __post_init__(self):
        if self.width < 1 or self.layers < 1:
            raise ValueError("width and layers must be >= 1")
        if self.diagonal not in ("zero_row_sum", "free"):
            raise ValueError(f"unknown diagonal rule {self.diagonal!r}")


def _sizes(n_in: int, width: int, n_out: int, hidden: int) -> list[int]:
    return [n_in] + [width] * hidden + [n_out]


class _Graph:
    """Static graph arrays shared by both networks."""

    def __init__(self, mesh: Mesh, geometry: EdgeGeometry):
        self.n = mesh.n_nodes
        self.src = np.asarray(mesh.edges[:, 0])
        self.dst = np.asarray(mesh.edges[:, 1])
        e = len(self.src)
        self.scatter = sp.csr_matrix((np.ones(e), (self.src, np.arange(e))), shape=(self.n, e))
        self.scatter_dst = sp.csr_matrix((np.ones(e), (self.dst, np.arange(e))), shape=(self.n, e))
        lo = mesh.nodes.min(axis=0)
        span = float(np.max(mesh.nodes.max(axis=0) - lo)) or 1.0
        onehot = np.eye(3)[np.asarray(mesh.node_type, dtype=np.int64)]
        self.node_feat = np.hstack([(mesh.nodes - lo) / span, onehot])
        self.edge_len = float(np.mean(geometry.distance))
        self.edge_feat = np.hstack([geometry.displacement, geometry.distance[:, None]]) / self.edge_len
        self.volume_feat = (mesh.control_volume / np.mean(mesh.control_volume))[:, None]
        self.pattern = mesh.pattern
        self.dirichlet = mesh.node_type == NodeType.DIRICHLET


class CorrectionNet:
    """Encode-process-decode network emitting one scalar per directed edge.

    Node inputs are normalized positions and the one-hot node type; edge
    inputs are the displacement and distance divided by the mean edge length.
    The diagonal is ``-sum`` of the row (``diagonal="zero_row_sum"``) or decoded
    from ``[h_i, h_i]`` (``diagonal="free"``). Outputs are multiplied by
    ``correction_scale``.
    """

    prefix = "corr"

    def __init__(self, config: NetConfig, mesh: Mesh, geometry: EdgeGeometry):
        self.config = config
        self.graph = _Graph(mesh, geometry)
        self.scale = 1.0 if config.correction_scale is None else float(config.correction_scale)
        h, hid = config.width, config.mlp_hidden
        p = self.prefix
        self.node_enc = MLP(f"{p}.node_enc", _sizes(5, h, h, hid))
        self.edge_enc = MLP(f"{p}.edge_enc", _sizes(3, h, h, hid))
        self.message = [MLP(f"{p}.msg{m}", _sizes(3 * h, h, h, hid)) for m in range(config.layers)]
        self.update = [MLP(f"{p}.upd{m}", _sizes(2 * h, h, h, hid)) for m in range(config.layers)]
        self.decoder = MLP(f"{p}.dec", _sizes(2 * h, h, 1, hid))

    def mlps(self) -> list[MLP]:
        return [self.node_enc, self.edge_enc, *self.message, *self.update, self.decoder]

    def shapes(self) -> dict:
        out = {}
        for m in self.mlps():
            out.update(m.shapes())
        return out

    def init(self, store: ParamStore, rng: np.random.Generator, scale: float) -> None:
        for m in self.mlps():
            m.init(store, rng, scale, zero_last=m is self.decoder)

    def forward(self, store: ParamStore):
        """Return (pattern-aligned data of L_neural, tape)."""
        g = self.graph
        h, a_node = self.node_enc.forward(store, g.node_feat)
        e, a_edge = self.edge_enc.forward(store, g.edge_feat)
        layers = []
        for msg, upd in zip(self.message, self.update):
            m_out, a_msg = msg.forward(store, np.hstack([h[g.src], h[g.dst], e]))
            agg = g.scatter @ m_out
            u_out, a_upd = upd.forward(store, np.hstack([h, agg]))
            layers.append((a_msg, a_upd))
            h = h + u_out
        s = self.scale
        val, a_dec = self.decoder.forward(store, np.hstack([h[g.src], h[g.dst]]))
        val = s * val[:, 0]
        data = np.zeros(g.pattern.nnz)
        data[g.pattern.edge_pos] = val
        a_diag = None
        if self.config.diagonal == "zero_row_sum":
            data[g.pattern.diag_pos] = -(g.scatter @ val)
        else:
            dval, a_diag = self.decoder.forward(store, np.hstack([h, h]))
            data[g.pattern.diag_pos] = s * dval[:, 0]
        tape = {"a_node": a_node, "a_edge": a_edge, "layers": layers, "a_dec": a_dec, "a_diag": a_diag}
        return data, tape

    def emit(self, store: ParamStore) -> sp.csr_matrix:
        return on_pattern(self.graph.pattern, self.forward(store)[0])

    def backward(self, store: ParamStore, tape, d_data: np.ndarray) -> None:
        if tape is None:
            raise RuntimeError("backward called without a recorded forward pass")
        g = self.graph
        hd = self.config.width
        s = self.scale
        d_data = np.asarray(d_data, dtype=np.float64)
        d_val = d_data[g.pattern.edge_pos].copy()
        d_h = np.zeros((g.n, hd))
        if self.config.diagonal == "zero_row_sum":
            d_val -= d_data[g.pattern.diag_pos][g.src]
        else:
            d_in = self.decoder.backward(store, tape["a_diag"], (s * d_data[g.pattern.diag_pos])[:, None])
            d_h += d_in[:, :hd] + d_in[:, hd:]
        d_in = self.decoder.backward(store, tape["a_dec"], (s * d_val)[:, None])
        d_h += g.scatter @ d_in[:, :hd] + g.scatter_dst @ d_in[:, hd:]
        d_e = np.zeros((len(g.src), hd))
        for (msg, upd), (a_msg, a_upd) in reversed(list(zip(zip(self.message, self.update), tape["layers"]))):
            d_upd_in = upd.backward(store, a_upd, d_h)
            d_hprev = d_h + d_upd_in[:, :hd]
            d_agg = d_upd_in[:, hd:]
            d_msg_in = msg.backward(store, a_msg, d_agg[g.src])
            d_hprev += g.scatter @ d_msg_in[:, :hd] + g.scatter_dst @ d_msg_in[:, hd : 2 * hd]
            d_e += d_msg_in[:, 2 * hd :]
            d_h = d_hprev
        self.edge_enc.backward(store, tape["a_edge"], d_e)
        self.node_enc.backward(store, tape["a_node"], d_h)

    def entry_bound(self, store: ParamStore) -> float:
        """Upper bound on |[L_neural]_ij| for off-diagonal entries."""
        return self.scale * self.decoder.output_bound(store)


class ResidualHead:
    """One message-passing layer mapping the current state to an additive correction.

    Node inputs: ``u_i / state_scale``, relative control volume, one-hot type.
    Edge inputs: normalized displacement and distance. The correction is zero
    on Dirichlet nodes.
    """

    prefix = "res"

    def __init__(self, config: NetConfig, mesh: Mesh, geometry: EdgeGeometry):
        self.config = config
        self.graph = _Graph(mesh, geometry)
        h, hid = config.residual_width, config.mlp_hidden
        p = self.prefix
        self.node_static = np.hstack([self.graph.volume_feat, self.graph.node_feat[:, 2:]])
        self.edge_static = self.graph.edge_feat
        self.node_enc = MLP(f"{p}.node_enc", _sizes(1 + self.node_static.shape[1], h, h, hid))
        self.message = MLP(f"{p}.msg", _sizes(2 * h + 3, h, h, hid))
        self.update = MLP(f"{p}.upd", _sizes(2 * h, h, h, hid))
        self.decoder = MLP(f"{p}.dec", _sizes(h, h, 1, hid))

    def mlps(self) -> list[MLP]:
        return [self.node_enc, self.message, self.update, self.decoder]

    def shapes(self) -> dict:
        out = {}
        for m in self.mlps():
            out.update(m.shapes())
        return out

    def init(self, store: ParamStore, rng: np.random.Generator, scale: float) -> None:
        for m in self.mlps():
            m.init(store, rng, scale, zero_last=m is self.decoder)

    def forward(self, store: ParamStore, u: np.ndarray):
        g = self.graph
        x = np.hstack([(np.asarray(u, dtype=np.float64) / self.config.state_scale)[:, None], self.node_static])
        h, a_node = self.node_enc.forward(store, x)
        m_out, a_msg = self.message.forward(store, np.hstack([h[g.src], h[g.dst], self.edge_static]))
        agg = g.scatter @ m_out
        u_out, a_upd = self.update.forward(store, np.hstack([h, agg]))
        h2 = h + u_out
        out, a_dec = self.decoder.forward(store, h2)
        du = self.config.residual_scale * out[:, 0]
        du[g.dirichlet] = 0.0
        return du, {"a_node": a_node, "a_msg": a_msg, "a_upd": a_upd, "a_dec": a_dec}

    def backward(self, store: ParamStore, tape, d_du: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients; return the cotangent of the input state."""
        if tape is None:
            raise RuntimeError("backward called without a recorded forward pass")
        g = self.graph
        hd = self.config.residual_width
        d = np.array(d_du, dtype=np.float64) * self.config.residual_scale
        d[g.dirichlet] = 0.0
        d_h2 = self.decoder.backward(store, tape["a_dec"], d[:, None])
        d_upd_in = self.update.backward(store, tape["a_upd"], d_h2)
        d_h = d_h2 + d_upd_in[:, :hd]
        d_msg_in = self.message.backward(store, tape["a_msg"], d_upd_in[:, hd:][g.src])
        d_h += g.scatter @ d_msg_in[:, :hd] + g.scatter_dst @ d_msg_in[:, hd : 2 * hd]
        d_x = self.node_enc.backward(store, tape["a_node"], d_h)
        return d_x[:, 0] / self.config.state_scale


def init_params(
    seed: int,
    width: int = 64,
    layers: int = 2,
    scale: float = 1.0,
    *,
    mesh: Mesh,
    geometry: EdgeGeometry,
    config: NetConfig | None = None,
) -> tuple[ParamStore, CorrectionNet, ResidualHead]:
    """Build both networks and a seeded parameter store.

    Hidden layers get fan-in scaled normal weights times ``scale``; the last
    decoder layers start at zero so the untrained model is the physics solver.
    """
    if width < 1 or layers < 1:
        raise ValueError("width and layers must be >= 1")
    config = config or NetConfig(width=width, layers=layers)
    if config.width != width or config.layers != layers:
        config = NetConfig(**{**asdict(config), "width": width, "layers": layers})
    net = CorrectionNet(config, mesh, geometry)
    head = ResidualHead(config, mesh, geometry)
    store = ParamStore({**net.shapes(), **head.shapes()})
    rng = np.random.default_rng(seed)
    net.init(store, rng, scale)
    head.init(store, rng, scale)
    return store, net, head


def emit_correction(net: CorrectionNet, store: ParamStore) -> sp.csr_matrix:
    return net.emit(store)


def apply_residual(head: ResidualHead, store: ParamStore, u: np.ndarray) -> np.ndarray:
    return head.forward(store, u)[0]


def power_iteration(op: sp.spmatrix, iters: int = 100, seed: int = 0, tol: float = 0.0):
    """Largest singular triple (sigma, left u, right v) by alternating power steps."""
    op = sp.csr_matrix(op)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(op.shape[1])
    v /= np.linalg.norm(v)
    u = np.zeros(op.shape[0])
    sigma = 0.0
    for _ in range(iters):
        av = op @ v
        na = np.linalg.norm(av)
        if na == 0.0:
            return 0.0, u, v
        u = av / na
        atu = op.T @ u
        nt = np.linalg.norm(atu)
        if nt == 0.0:
            return 0.0, u, v
        v_new = atu / nt
        prev, sigma = sigma, nt
        v = v_new
        if tol and abs(sigma - prev) <= tol * sigma:
            break
    return float(u @ (op @ v)), u, v


def spectral_penalty(l_neural: sp.spmatrix, gamma_max: float, iters: int = 100, seed: int = 0):
    """Hinge penalty ``max(0, sigma - gamma_max)^2`` and its gradient on the csr data.

    The gradient uses the converged singular pair: d sigma / d A_rc = u_r v_c.
    """
    if gamma_max <= 0:
        raise ValueError("gamma_max must be positive")
    op = sp.csr_matrix(l_neural)
    sigma, u, v = power_iteration(op, iters=iters, seed=seed)
    excess = sigma - gamma_max
    if excess <= 0:
        return 0.0, np.zeros(op.nnz)
    rows = np.repeat(np.arange(op.shape[0]), np.diff(op.indptr))
    return float(excess**2), 2.0 * excess * u[rows] * v[op.indices]
