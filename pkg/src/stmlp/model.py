"""The cascaded channel-independent MLP forecaster and its ablation variants.

Every operator in the default model acts on the trailing (embedding) axis
of a ``(batch, node, feature)`` tensor, so a node's forecast depends only on
that node's history plus shared, learned embeddings. The one exception is
the optional node-mixing layer of the ``channel="cm"`` variant.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields, asdict
from pathlib import Path

import numpy as np

from . import numcore as nc
from .numcore import Tensor

CHECKPOINT_MAGIC = b"STMP"
CHECKPOINT_VERSION = 1
EMBEDDINGS = ("td", "dw", "sp", "su")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_nodes: int
    T: int = 12
    Q: int = 12
    K: int = 288
    K_week: int = 7
    d_td: int = 32
    d_dw: int = 32
    d_sp: int = 32
    d_su: int = 32
    d_d: int = 96
    n_A: int = 1
    n_B: int = 1
    n_C: int = 3
    norm_kind: str = "layer"
    dropout_p: float = 0.15
    structure: str = "cascaded"
    channel: str = "ci"
    use_td: bool = True
    use_dw: bool = True
    use_sp: bool = True
    use_su: bool = True
    block_order: str = "affine_norm"
    scale_calendar: bool = True
    bn_momentum: float = 0.1
    norm_eps: float = 1e-5
    dtype: str = "float64"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_nodes < 1 or self.T < 1 or self.Q < 1 or self.K < 1 or self.K_week < 1:
            raise ConfigError("n_nodes, T, Q, K and K_week must be positive")
        for name in ("d_td", "d_dw", "d_sp", "d_su"):
            if getattr(self, "use_" + name[2:]) and getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1 when its embedding is enabled")
        if self.d_d < 1:
            raise ConfigError("d_d must be >= 1; the data embedding cannot be disabled")
        if min(self.n_A, self.n_B, self.n_C) < 0:
            raise ConfigError("block counts must be non-negative")
        if self.norm_kind not in ("layer", "batch"):
            raise ConfigError(f"norm_kind must be 'layer' or 'batch', got {self.norm_kind!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must lie in [0, 1)")
        if self.structure not in ("cascaded", "parallel_concat"):
            raise ConfigError(f"unknown structure {self.structure!r}")
        if self.channel not in ("ci", "cm"):
            raise ConfigError(f"unknown channel strategy {self.channel!r}")
        if self.block_order not in ("affine_norm", "norm_affine"):
            raise ConfigError(f"unknown block_order {self.block_order!r}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @property
    def d_t(self) -> int:
        return self.d_td * self.use_td + self.d_dw * self.use_dw

    @property
    def d_s(self) -> int:
        return self.d_sp * self.use_sp + self.d_su * self.use_su

    @property
    def d_st(self) -> int:
        return self.d_t + self.d_s

    @property
    def d(self) -> int:
        return self.d_st + self.d_d

    def dims(self) -> dict[str, int]:
        return {"d_t": self.d_t, "d_s": self.d_s, "d_st": self.d_st, "d": self.d,
                "head_in": self.d, "head_out": self.Q}

    # key=value text used in checkpoints and config echoes
    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in asdict(self).items())

    @classmethod
    def from_mapping(cls, values: dict) -> "ModelConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        kw = {k: _coerce(v, known[k].type) for k, v in values.items()}
        return cls(**kw)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls.from_mapping(parse_kv(text))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(v, typ):
    if not isinstance(v, str):
        return v
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "bool":
        low = v.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {v!r}")
    if typ == "int":
        return int(v)
    if typ == "float":
        return float(v)
    return v.strip()


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"expected key=value, got {line!r}")
        out[key.strip()] = value.strip()
    return out


def variant_name(cfg: ModelConfig) -> str:
    parts = ["cascaded" if cfg.structure == "cascaded" else "parallel"]
    missing = [e for e in EMBEDDINGS if not getattr(cfg, "use_" + e)]
    parts.append("full" if not missing else "-".join("no_" + m for m in missing))
    if cfg.channel == "cm":
        parts.append("cm")
    return "/".join(parts)


class STMLP:
    """Parameters, buffers and forward passes of one forecaster instance.

    ``graph`` is the fixed N x N scaled Laplacian; it is only required when
    the predefined-graph embedding is enabled.
    """

    def __init__(self, config: ModelConfig, graph: np.ndarray | None = None, seed: int = 0):
        self.config = config
        self.dtype = np.dtype(config.dtype)
        N = config.n_nodes
        if config.use_sp:
            if graph is None:
                raise ConfigError("use_sp requires a graph matrix")
            graph = np.asarray(graph, dtype=self.dtype)
            if graph.shape != (N, N):
                raise ConfigError(f"graph must be {N}x{N}, got {graph.shape}")
        self.graph = graph if config.use_sp else None
        self.params: dict[str, Tensor] = {}
        self.bn_stats: dict[str, nc.BatchNormStats] = {}
        self.normalizer_mean = 0.0
        self.normalizer_std = 1.0
        self._rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
        self._build()

    # construction -------------------------------------------------------
    def _uniform(self, name: str, shape: tuple[int, ...], fan_in: int) -> None:
        bound = 1.0 / np.sqrt(fan_in)
        data = self._rng.uniform(-bound, bound, size=shape).astype(self.dtype)
        self.params[name] = Tensor(data, requires_grad=True, name=name)

    def _const(self, name: str, data) -> None:
        self.params[name] = Tensor(np.asarray(data, dtype=self.dtype), requires_grad=True, name=name)

    def _affine(self, prefix: str, d_in: int, d_out: int) -> None:
        self._uniform(prefix + ".W", (d_in, d_out), d_in)
        self._uniform(prefix + ".b", (d_out,), d_in)

    def _blocks(self, module: str, count: int, width: int) -> None:
        if width == 0:
            return
        for k in range(count):
            p = f"{module}.{k}"
            self._affine(p + ".affine", width, width)
            self._const(p + ".norm.gamma", np.ones(width))
            self._const(p + ".norm.beta", np.zeros(width))
            if self.config.norm_kind == "batch":
                self.bn_stats[p + ".norm"] = nc.BatchNormStats(width, self.config.bn_momentum, self.dtype)

    def _build(self) -> None:
        c = self.config
        if c.use_td:
            self._uniform("B_td", (c.K, c.d_td), c.d_td)
        if c.use_dw:
            self._uniform("B_dw", (c.K_week, c.d_dw), c.d_dw)
        if c.use_sp:
            self._uniform("B_sp", (c.n_nodes, c.d_sp), c.d_sp)
        if c.use_su:
            self._uniform("B_su", (c.n_nodes, c.d_su), c.d_su)
        self._affine("data_embed", 3 * c.T, c.d_d)
        if c.structure == "cascaded":
            self._blocks("A", c.n_A, c.d_t)
            self._blocks("B", c.n_B, c.d_st)
            self._blocks("C", c.n_C, c.d)
        if c.channel == "cm":
            self._affine("mix", c.n_nodes, c.n_nodes)
        self._affine("head", c.d, c.Q)

    # accounting ---------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def has_module(self, module: str) -> bool:
        return any(k.startswith(module + ".") for k in self.params)

    def dims(self) -> dict[str, int]:
        return self.config.dims()

    # embeddings ---------------------------------------------------------
    def embed_time_of_day(self, td_last, n_nodes: int) -> Tensor:
        return _lookup_replicate(self.params["B_td"], td_last, n_nodes)

    def embed_day_of_week(self, dw_last, n_nodes: int) -> Tensor:
        return _lookup_replicate(self.params["B_dw"], dw_last, n_nodes)

    def embed_spatial(self) -> list[Tensor]:
        """Per-node spatial embeddings ``[A @ B_sp, B_su]`` (enabled ones only), each (N, d)."""
        parts = []
        if self.config.use_sp:
            parts.append(nc.matmul(Tensor(self.graph), self.params["B_sp"]))
        if self.config.use_su:
            parts.append(self.params["B_su"])
        return parts

    def embed_data(self, x: np.ndarray, td: np.ndarray, dw: np.ndarray) -> Tensor:
        """Affine map of ``[history | td-seq | dw-seq]`` per node to ``d_d`` features."""
        c = self.config
        x = np.asarray(x, dtype=self.dtype)
        B, N, T = x.shape
        td = np.asarray(td)
        dw = np.asarray(dw)
        if T != c.T or td.shape != (B, T) or dw.shape != (B, T):
            raise nc.ShapeError(f"embed_data expects x(B,N,{c.T}) and calendars (B,{c.T}); "
                                f"got {x.shape}, {td.shape}, {dw.shape}")
        td_f = td / c.K if c.scale_calendar else td
        dw_f = dw / c.K_week if c.scale_calendar else dw
        cal = np.concatenate([td_f, dw_f], axis=-1).astype(self.dtype)
        feats = np.concatenate([x, np.broadcast_to(cal[:, None, :], (B, N, 2 * T))], axis=-1)
        return nc.affine(Tensor(feats), self.params["data_embed.W"], self.params["data_embed.b"])

    # blocks -------------------------------------------------------------
    def _norm(self, prefix: str, h: Tensor, mode: str) -> Tensor:
        g, b = self.params[prefix + ".gamma"], self.params[prefix + ".beta"]
        if self.config.norm_kind == "layer":
            return nc.layer_norm(h, g, b, self.config.norm_eps)
        return nc.batch_norm(h, g, b, self.bn_stats[prefix], mode, self.config.norm_eps)

    def mlp_module(self, E: Tensor, module: str, mode: str, rng=None) -> Tensor:
        """Residual blocks ``E + dropout(relu(norm(affine(E))))`` applied in sequence."""
        k = 0
        while f"{module}.{k}.affine.W" in self.params:
            p = f"{module}.{k}"
            if self.config.block_order == "affine_norm":
                h = nc.affine(E, self.params[p + ".affine.W"], self.params[p + ".affine.b"])
                h = self._norm(p + ".norm", h, mode)
            else:
                h = self._norm(p + ".norm", E, mode)
                h = nc.affine(h, self.params[p + ".affine.W"], self.params[p + ".affine.b"])
            h = nc.dropout(nc.relu(h), self.config.dropout_p, mode, rng)
            E = E + h
            k += 1
        return E

    # forward ------------------------------------------------------------
    def _temporal_parts(self, td, dw, n_nodes) -> list[Tensor]:
        parts = []
        if self.config.use_td:
            parts.append(self.embed_time_of_day(np.asarray(td)[:, -1], n_nodes))
        if self.config.use_dw:
            parts.append(self.embed_day_of_week(np.asarray(dw)[:, -1], n_nodes))
        return parts

    def forward(self, x, td, dw, mode: str = "eval", rng=None) -> Tensor:
        """Normalized-scale forecast of shape ``(B, N, Q)``."""
        c = self.config
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 3 or x.shape[1] != c.n_nodes:
            raise nc.ShapeError(f"x must be (B, {c.n_nodes}, {c.T}), got {x.shape}")
        B, N, _ = x.shape
        t_parts = self._temporal_parts(td, dw, N)
        s_parts = [nc.broadcast_to(nc.reshape(e, (1, N, e.shape[-1])), (B, N, e.shape[-1]))
                   for e in self.embed_spatial()]
        E_d = self.embed_data(x, td, dw)

        if c.structure == "parallel_concat":
            E = nc.concat_last(t_parts + s_parts + [E_d])
        else:
            h = self.mlp_module(nc.concat_last(t_parts), "A", mode, rng) if t_parts else None
            stage2 = ([h] if h is not None else []) + s_parts
            if stage2:
                h = self.mlp_module(nc.concat_last(stage2), "B", mode, rng)
            stage3 = ([h] if h is not None else []) + [E_d]
            E = self.mlp_module(nc.concat_last(stage3), "C", mode, rng)
        if c.channel == "cm":
            E = nc.mix_nodes(E, self.params["mix.W"], self.params["mix.b"])
        return nc.affine(E, self.params["head.W"], self.params["head.b"])

    def __call__(self, batch, mode: str = "eval", rng=None) -> Tensor:
        return self.forward(batch.x, batch.td, batch.dw, mode, rng)

    def predict(self, batch) -> np.ndarray:
        """Eval-mode forecast in the original (denormalized) units."""
        out = self.forward(batch.x, batch.td, batch.dw, "eval").data
        return out * self.normalizer_std + self.normalizer_mean

    # state --------------------------------------------------------------
    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        if self.graph is not None:
            out["graph.A"] = self.graph
        for name, st in self.bn_stats.items():
            out[name + ".running_mean"] = st.mean
            out[name + ".running_var"] = st.var
            out[name + ".initialized"] = np.array([1.0 if st.initialized else 0.0])
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data.copy() for k, p in self.params.items()}
        state.update({k: np.array(v, copy=True) for k, v in self.buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if k not in state:
                raise KeyError(f"missing parameter {k!r} in state")
            if state[k].shape != p.shape:
                raise nc.ShapeError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=self.dtype, copy=True)
        if "graph.A" in state:
            self.graph = np.array(state["graph.A"], dtype=self.dtype, copy=True)
        for name, st in self.bn_stats.items():
            st.mean = np.array(state[name + ".running_mean"], dtype=self.dtype, copy=True)
            st.var = np.array(state[name + ".running_var"], dtype=self.dtype, copy=True)
            st.initialized = bool(state[name + ".initialized"][0])


def _lookup_replicate(table: Tensor, index, n_nodes: int) -> Tensor:
    """Row ``index[b]`` of ``table`` copied to all ``n_nodes`` nodes: (B, N, d)."""
    index = np.asarray(index)
    rows = nc.take_rows(table, index)  # (B, d)
    B, d = rows.shape
    return nc.broadcast_to(nc.reshape(rows, (B, 1, d)), (B, n_nodes, d))


# checkpoints -------------------------------------------------------------

def save_checkpoint(path: str | Path, model: STMLP, extra: dict | None = None) -> None:
    """Write config and every named tensor in canonical order (params, then buffers)."""
    text = model.config.to_text()
    text += f"normalizer.mean={model.normalizer_mean!r}\nnormalizer.std={model.normalizer_std!r}\n"
    for k, v in (extra or {}).items():
        text += f"{k}={v}\n"
    cfg = text.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(cfg)) + cfg)
        for name, arr in model.state_dict().items():
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            fh.write(arr.tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, n = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    meta = parse_kv(blob[pos:pos + n].decode("utf-8"))
    pos += n
    tensors = {}
    while pos < len(blob):
        (ln,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + ln].decode("utf-8")
        pos += ln
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
        pos += 8 * count
    return meta, tensors


def load_checkpoint(path: str | Path) -> STMLP:
    meta, tensors = read_checkpoint(path)
    model_keys = {f.name for f in fields(ModelConfig)}
    cfg = ModelConfig.from_mapping({k: v for k, v in meta.items() if k in model_keys})
    model = STMLP(cfg, graph=tensors.get("graph.A"))
    model.load_state_dict(tensors)
    model.normalizer_mean = float(meta.get("normalizer.mean", 0.0))
    model.normalizer_std = float(meta.get("normalizer.std", 1.0))
    return model
