"""DeepGraphONet: GNN branch, MLP trunk, per-node dot-product merge.

Branch: a stack of mean-aggregation message-passing layers
``H_i' = act(W1 H_i + W2 mean_{j in N(i)} H_j + b)``; the last layer is
linear and has width q. No pooling, so there is one coefficient row per
node. Trunk: an MLP on ``h_n / h`` whose every layer (including the
last) is activated. Output per node: ``<b_i, phi(h_n)>``, no extra bias.

No weight shape depends on the graph, which is what lets a model trained
on one graph be applied unchanged to another.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import (CompatibilityError, ConfigError, CorruptFileError, DimensionError,
                     DomainError, VersionMismatchError)
from .graph import Graph
from .sampling import MemoryWindow, feature_width, sensor_count
from .tensorcore import (ACTIVATIONS, ParamStore, Tensor, activate, add, as_tensor, matmul,
                         no_grad, reshape, take_rows, transpose, uniform_init)

MAGIC = b"DGON"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    n_gnn_layers: int = 4
    gnn_hidden_width: int = 64
    n_trunk_layers: int = 3
    trunk_hidden_width: int = 64
    latent_dim: int = 32
    activation: str = "tanh"
    variant: str = "standard"
    m: int = 51
    t_M: float = 0.05
    h: float = 0.02

    def __post_init__(self):
        if self.latent_dim < 1 or self.n_gnn_layers < 1 or self.n_trunk_layers < 1:
            raise ConfigError("latent_dim and layer counts must be >= 1")
        if self.gnn_hidden_width < 1 or self.trunk_hidden_width < 1:
            raise ConfigError("hidden widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.variant not in ("standard", "resolution_independent"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.m < 2:
            raise ConfigError("m must be >= 2")
        if not (self.t_M > 0 and self.h > 0):
            raise ConfigError("t_M and h must be positive")

    @classmethod
    def reference(cls, **kw) -> ModelConfig:
        """The large published configuration: 20 branch layers, 5 trunk layers, q=100."""
        base = dict(n_gnn_layers=20, gnn_hidden_width=100, n_trunk_layers=5,
                    trunk_hidden_width=100, latent_dim=100)
        base.update(kw)
        return cls(**base)

    @property
    def input_width(self) -> int:
        return feature_width(self.m, self.variant)

    @property
    def sensors(self) -> int:
        return sensor_count(self.m, self.variant)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def init_store(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    w_in = cfg.input_width
    for layer in range(cfg.n_gnn_layers):
        w_out = cfg.latent_dim if layer == cfg.n_gnn_layers - 1 else cfg.gnn_hidden_width
        store.add(f"branch.{layer}.W1", uniform_init(rng, (w_out, w_in), w_in))
        store.add(f"branch.{layer}.W2", uniform_init(rng, (w_out, w_in), w_in))
        store.add(f"branch.{layer}.b", uniform_init(rng, (w_out,), w_in))
        w_in = w_out
    w_in = 1
    for layer in range(cfg.n_trunk_layers):
        w_out = cfg.latent_dim if layer == cfg.n_trunk_layers - 1 else cfg.trunk_hidden_width
        store.add(f"trunk.{layer}.W", uniform_init(rng, (w_out, w_in), w_in))
        store.add(f"trunk.{layer}.b", uniform_init(rng, (w_out,), w_in))
        w_in = w_out
    return store


def mp_layer(W1, W2, b, g: Graph, H, activation: str = "tanh") -> Tensor:
    """One message-passing layer on ``H`` of shape ``[n, w_in]`` or ``[B, n, w_in]``."""
    W1, W2, b, H = as_tensor(W1), as_tensor(W2), as_tensor(b), as_tensor(H)
    if H.ndim < 2 or H.shape[-1] != W1.shape[1] or W2.shape != W1.shape:
        raise DimensionError(f"mp_layer: input width {H.shape} does not match weights {W1.shape}")
    if H.shape[-2] != g.node_count:
        raise DimensionError(f"mp_layer: {H.shape[-2]} node rows for a {g.node_count}-node graph")
    agg = matmul(Tensor(g.mean_matrix), H)
    z = add(add(matmul(H, transpose(W1)), matmul(agg, transpose(W2))), b)
    return activate(z, activation)


def merge(b, phi) -> Tensor:
    """Per-node dot product: ``b[..., n, q]`` with ``phi[..., q]`` gives ``[..., n]``."""
    b, phi = as_tensor(b), as_tensor(phi)
    if b.shape[-1] != phi.shape[-1]:
        raise DimensionError(f"merge: coefficient width {b.shape[-1]} != basis width {phi.shape[-1]}")
    out = matmul(b, reshape(phi, phi.shape + (1,)))
    return reshape(out, out.shape[:-1])


class DeepGraphONet:
    """Model configuration plus trainable parameters."""

    def __init__(self, config: ModelConfig, store: ParamStore | None = None, seed: int = 0):
        self.config = config
        self.store = store if store is not None else init_store(config, seed)

    def copy(self) -> DeepGraphONet:
        return DeepGraphONet(self.config, self.store.copy())

    def branch_features(self, window: MemoryWindow) -> np.ndarray:
        cfg = self.config
        if window.num_sensors != cfg.sensors:
            raise CompatibilityError(
                f"{cfg.variant} model with m={cfg.m} expects {cfg.sensors} sensors, "
                f"window has {window.num_sensors}")
        if abs(window.t_M - cfg.t_M) > 1e-12:
            raise CompatibilityError(f"window t_M={window.t_M} but model was built for t_M={cfg.t_M}")
        return window.features(cfg.variant)

    def branch(self, g: Graph, X) -> Tensor:
        """Coefficients ``[..., n, q]`` from branch inputs ``[..., n, F]``."""
        cfg = self.config
        if g.node_count == 0:
            raise DimensionError("branch needs a graph with at least one node")
        H = as_tensor(X)
        if H.shape[-1] != cfg.input_width:
            raise CompatibilityError(
                f"branch input width {H.shape[-1]} != {cfg.input_width} expected by the "
                f"{cfg.variant} layout with m={cfg.m}")
        s = self.store
        last = cfg.n_gnn_layers - 1
        for layer in range(cfg.n_gnn_layers):
            act = "identity" if layer == last else cfg.activation
            H = mp_layer(s[f"branch.{layer}.W1"], s[f"branch.{layer}.W2"], s[f"branch.{layer}.b"],
                         g, H, act)
        return H

    def trunk(self, h_n, allow_extrapolation: bool = False) -> Tensor:
        """Basis values ``[..., q]`` for query times ``h_n`` (seconds, shape ``[...]``)."""
        cfg = self.config
        h_n = np.asarray(h_n, dtype=np.float64)
        if not allow_extrapolation and (np.any(h_n < -1e-12) or np.any(h_n > cfg.h * (1 + 1e-12))):
            raise DomainError(f"query h_n outside [0, {cfg.h}]")
        scalar = h_n.ndim == 0
        z = Tensor((h_n / cfg.h).reshape(-1, 1) if scalar else (h_n / cfg.h)[..., None])
        s = self.store
        for layer in range(cfg.n_trunk_layers):
            W, b = s[f"trunk.{layer}.W"], s[f"trunk.{layer}.b"]
            z = activate(add(matmul(z, transpose(W)), b), cfg.activation)
        return reshape(z, (cfg.latent_dim,)) if scalar else z

    def forward_batch(self, g: Graph, X, h_n) -> Tensor:
        """Predictions ``[B, n]`` for branch inputs ``[B, n, F]`` and queries ``[B]``."""
        return merge(self.branch(g, X), self.trunk(h_n))

    def forward_grouped(self, g: Graph, X, h_n, window_index) -> Tensor:
        """Like ``forward_batch`` but with ``G`` unique windows ``[G, n, F]``
        shared by the ``B`` queries; ``window_index[B]`` maps query to window."""
        return merge(take_rows(self.branch(g, X), window_index), self.trunk(h_n))

    def forward(self, g: Graph, window: MemoryWindow, h_n: float) -> Tensor:
        return merge(self.branch(g, self.branch_features(window)), self.trunk(np.asarray(h_n)))

    def predict(self, g: Graph, window: MemoryWindow, h_values) -> np.ndarray:
        """``[Q, n]`` predictions for several queries sharing one window (no tape)."""
        with no_grad():
            b = self.branch(g, self.branch_features(window)).data
            phi = self.trunk(np.asarray(h_values, dtype=np.float64)).data
        return phi @ b.T

    def check_compatible(self, variant: str, m: int, t_M: float, h: float) -> None:
        cfg = self.config
        mismatches = [f"{k}: weights={a} config={b}" for k, a, b in
                      (("variant", cfg.variant, variant), ("m", cfg.m, m),
                       ("t_M", cfg.t_M, t_M), ("h", cfg.h, h))
                      if (a != b if isinstance(a, str) else abs(a - b) > 1e-12)]
        if mismatches:
            raise CompatibilityError("weights incompatible with run config: " + "; ".join(mismatches))


def branch_forward(model: DeepGraphONet, g: Graph, window: MemoryWindow) -> Tensor:
    return model.branch(g, model.branch_features(window))


def trunk_forward(model: DeepGraphONet, h_n: float, allow_extrapolation: bool = False) -> Tensor:
    return model.trunk(np.asarray(h_n, dtype=np.float64), allow_extrapolation)


def forward(model: DeepGraphONet, g: Graph, window: MemoryWindow, h_n: float) -> Tensor:
    return model.forward(g, window, h_n)


def save_params(model: DeepGraphONet, path) -> None:
    """Write the DGON container: magic, version, JSON config, named float64 tensors, CRC32."""
    cfg_blob = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(cfg_blob)), cfg_blob]
    for name, t in model.store.items():
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_params(path) -> DeepGraphONet:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CorruptFileError(f"{path}: not a DGON weight file")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptFileError(f"{path}: checksum mismatch (truncated or corrupted)")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    try:
        (clen,) = struct.unpack_from("<I", body, 8)
        config = ModelConfig.from_dict(json.loads(body[12:12 + clen].decode()))
        pos = 12 + clen
        tensors = {}
        while pos < len(body):
            (nlen,) = struct.unpack_from("<I", body, pos)
            name = body[pos + 4:pos + 4 + nlen].decode()
            pos += 4 + nlen
            (rank,) = struct.unpack_from("<I", body, pos)
            shape = struct.unpack_from(f"<{rank}I", body, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(body, dtype="<f8", count=count, offset=pos).reshape(shape)
            pos += 8 * count
            tensors[name] = data.astype(np.float64)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CorruptFileError(f"{path}: malformed payload ({exc})") from None
    model = DeepGraphONet(config, seed=0)
    if set(tensors) != set(model.store):
        raise CorruptFileError(f"{path}: tensor names do not match the configured architecture")
    model.store.load_values(tensors)
    return model
