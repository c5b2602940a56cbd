"""Causal pre-norm transformer LM whose FFN sublayers are fine-grained MoE layers."""

from __future__ import annotations

import dataclasses
import io
import json
import math
import zipfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .balance import BalanceStats, device_balance_loss, expert_balance_loss, load_dispersion
from .errors import ConfigError, DimensionError
from .moe import (
    ExpertParams,
    FFNParams,
    MoEConfig,
    RouteOptions,
    RoutingDecision,
    Router,
    count_params,
    expert_ffn,
    ffn_param_count,
    init_ffn,
    init_moe,
    moe_forward,
)
from .tensor import Tensor

CHECKPOINT_FORMAT = "finemoe-checkpoint"
CHECKPOINT_VERSION = 1

# named substreams of the single run seed
STREAMS = {"init": 0, "data": 1, "shuffle": 2}


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STREAMS[name], *extra)))


@dataclass(frozen=True)
class ModelConfig:
    L: int
    d: int
    heads: int
    head_dim: int
    vocab: int
    seq_len: int
    moe: MoEConfig
    first_layer_dense: bool = False
    init_std: float = 0.006
    tie_embeddings: bool = False
    ln_eps: float = 1e-5
    balance_reduction: str = "sum"
    dense_ffn_inner: int | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.L < 0 or self.d < 1 or self.heads < 1 or self.head_dim < 1:
            raise ConfigError("L >= 0 and d, heads, head_dim >= 1 required")
        if self.vocab < 1 or self.seq_len < 1:
            raise ConfigError("vocab and seq_len must be >= 1")
        if self.init_std <= 0:
            raise ConfigError(f"init_std > 0 violated: {self.init_std}")
        if self.moe.d != self.d:
            raise ConfigError(f"moe.d={self.moe.d} must equal model d={self.d}")
        if self.balance_reduction not in ("sum", "mean"):
            raise ConfigError("balance_reduction must be 'sum' or 'mean'")

    @property
    def attn_dim(self) -> int:
        return self.heads * self.head_dim

    @property
    def ffn_inner(self) -> int:
        return self.dense_ffn_inner or self.moe.base_ffn_inner

    def is_moe_layer(self, layer: int) -> bool:
        return not (self.first_layer_dense and layer == 0)

    @property
    def n_moe_layers(self) -> int:
        return sum(self.is_moe_layer(i) for i in range(self.L))

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        if out["moe"]["device_groups"] is not None:
            out["moe"]["device_groups"] = [list(g) for g in out["moe"]["device_groups"]]
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        raw = dict(raw)
        moe_raw = dict(raw.pop("moe"))
        _reject_unknown(moe_raw, MoEConfig, "moe")
        _reject_unknown(raw, cls, "model")
        if moe_raw.get("device_groups") is not None:
            moe_raw["device_groups"] = tuple(tuple(g) for g in moe_raw["device_groups"])
        return cls(moe=MoEConfig(**moe_raw), **raw)

    def replace_moe(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, moe=dataclasses.replace(self.moe, **changes))


def _reject_unknown(raw: dict, klass, where: str) -> None:
    known = {f.name for f in dataclasses.fields(klass)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {', '.join(unknown)}")


def preset(name: str) -> ModelConfig:
    """Named architecture presets. The three large ones carry real shapes and are meant for accounting."""
    if name == "validation-2B":
        moe = MoEConfig(d=1280, N=16, m=4, K=2, K_s=1, base_ffn_inner=3456, alpha1=0.01)
        return ModelConfig(L=9, d=1280, heads=10, head_dim=128, vocab=8192, seq_len=2048, moe=moe)
    if name == "moe-16B":
        # 2 shared + 64 routed experts of 0.25x a 5632-wide FFN; 66 experts is not a multiple of 4
        moe = MoEConfig(d=2048, N=33, m=2, K=4, K_s=2, base_ffn_inner=5632,
                        expert_inner_override=1408, alpha1=0.001)
        return ModelConfig(L=28, d=2048, heads=16, head_dim=128, vocab=100_000, seq_len=4096,
                           moe=moe, first_layer_dense=True)
    if name == "moe-145B":
        # 4 shared + 128 routed experts of 0.125x a 10944-wide FFN (1368, padded to a multiple of 64),
        # routed experts spread over 4 devices
        moe = MoEConfig(d=4096, N=33, m=4, K=4, K_s=4, base_ffn_inner=10944,
                        expert_inner_override=1408, D=4, alpha1=0.003, alpha2=0.05)
        return ModelConfig(L=62, d=4096, heads=32, head_dim=128, vocab=100_000, seq_len=4096,
                           moe=moe, first_layer_dense=True)
    if name == "desk":
        moe = MoEConfig(d=64, N=4, m=4, K=1, K_s=1, base_ffn_inner=128, alpha1=0.01)
        return ModelConfig(L=2, d=64, heads=4, head_dim=16, vocab=256, seq_len=32, moe=moe)
    raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


PRESETS = ("validation-2B", "moe-16B", "moe-145B", "desk")


# ---------------------------------------------------------------- parameters

@dataclass
class LayerParams:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    experts: ExpertParams | None = None
    router: Router | None = None
    dense: FFNParams | None = None


class ParamStore:
    """Ordered name -> Tensor registry; initialisation draws each tensor from its own named substream."""

    def __init__(self, seed: int, std: float):
        self.seed = seed
        self.std = std
        self.tensors: dict[str, Tensor] = {}

    def normal(self, name: str, shape: tuple[int, ...]) -> Tensor:
        rng = substream(self.seed, "init", zlib.crc32(name.encode()))
        return self._add(name, rng.normal(0.0, self.std, size=shape))

    def const(self, name: str, shape: tuple[int, ...], value: float) -> Tensor:
        return self._add(name, np.full(shape, value))

    def _add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.tensors:
            raise ConfigError(f"duplicate parameter name {name}")
        t = Tensor(data, requires_grad=True, name=name)
        self.tensors[name] = t
        return t


@dataclass
class ForwardResult:
    logits: Tensor
    decisions: list[RoutingDecision]
    decision_layers: list[int] = field(default_factory=list)


@dataclass
class LossBreakdown:
    total: Tensor
    lm: Tensor
    expbal: Tensor
    devbal: Tensor
    decisions: list[RoutingDecision]
    load_max_mean: float = 0.0
    load_cv: float = 0.0


class MoETransformer:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        store = ParamStore(seed, cfg.init_std)
        d = cfg.d
        self.tok_emb = store.normal("tok_emb", (cfg.vocab, d))
        self.pos_emb = store.normal("pos_emb", (cfg.seq_len, d))
        self.layers: list[LayerParams] = []
        for i in range(cfg.L):
            p = f"layers.{i}"
            lp = LayerParams(
                ln1_g=store.const(f"{p}.ln1.g", (d,), 1.0),
                ln1_b=store.const(f"{p}.ln1.b", (d,), 0.0),
                wq=store.normal(f"{p}.attn.wq", (d, cfg.attn_dim)),
                wk=store.normal(f"{p}.attn.wk", (d, cfg.attn_dim)),
                wv=store.normal(f"{p}.attn.wv", (d, cfg.attn_dim)),
                wo=store.normal(f"{p}.attn.wo", (cfg.attn_dim, d)),
                ln2_g=store.const(f"{p}.ln2.g", (d,), 1.0),
                ln2_b=store.const(f"{p}.ln2.b", (d,), 0.0),
            )
            if cfg.is_moe_layer(i):
                lp.experts, lp.router = init_moe(cfg.moe, store.normal, prefix=f"{p}.moe")
            else:
                lp.dense = init_ffn(store.normal, f"{p}.ffn", d, cfg.ffn_inner)
            self.layers.append(lp)
        self.lnf_g = store.const("lnf.g", (d,), 1.0)
        self.lnf_b = store.const("lnf.b", (d,), 0.0)
        self.head = None if cfg.tie_embeddings else store.normal("head", (d, cfg.vocab))
        self.params: dict[str, Tensor] = store.tensors

    # -- state -----------------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ConfigError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, t in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise DimensionError(f"{k}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data[...] = arr

    def zero_grad(self) -> None:
        tn.zero_grad(self.params.values())

    # -- forward ---------------------------------------------------------------
    def attention_block(self, x: Tensor, lp: LayerParams) -> Tensor:
        """Pre-norm multi-head causal self-attention plus residual; ``x`` is [B, T, d]."""
        cfg = self.cfg
        if x.ndim != 3 or x.shape[2] != cfg.d:
            raise DimensionError(f"attention_block: expected [B, T, {cfg.d}], got {x.shape}")
        B, T, _ = x.shape
        if T > cfg.seq_len:
            raise DimensionError(f"sequence length {T} exceeds seq_len {cfg.seq_len}")
        H, hd = cfg.heads, cfg.head_dim
        a = tn.layer_norm(x, lp.ln1_g, lp.ln1_b, cfg.ln_eps)

        def heads(w):
            return tn.transpose(tn.reshape(tn.matmul(a, w), (B, T, H, hd)), (0, 2, 1, 3))

        q, k, v = heads(lp.wq), heads(lp.wk), heads(lp.wv)
        scores = tn.scale(tn.matmul(q, tn.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
        future = np.triu(np.ones((T, T), dtype=bool), k=1)
        att = tn.softmax(scores, axis=-1, mask=future)
        o = tn.reshape(tn.transpose(tn.matmul(att, v), (0, 2, 1, 3)), (B, T, H * hd))
        return tn.add(x, tn.matmul(o, lp.wo))

    def ffn_block(self, x: Tensor, lp: LayerParams, options: RouteOptions | None):
        """Pre-norm FFN/MoE sublayer plus residual; ``x`` is [B*T, d]."""
        a = tn.layer_norm(x, lp.ln2_g, lp.ln2_b, self.cfg.ln_eps)
        if lp.dense is not None:
            return tn.add(x, expert_ffn(a, lp.dense, self.cfg.moe.activation)), None
        return self.moe(a, x, lp, options)

    def moe(self, a: Tensor, residual: Tensor, lp: LayerParams, options: RouteOptions | None):
        return moe_forward(a, self.cfg.moe, lp.experts, lp.router, residual=residual, options=options)

    def forward(self, tokens, options: RouteOptions | None = None) -> ForwardResult:
        """Logits ``[B*T, V]`` for integer ``tokens`` of shape [B, T] (or [T])."""
        cfg = self.cfg
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        B, T = tokens.shape
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
            raise IndexError(f"token ids must lie in [0, {cfg.vocab})")
        if T > cfg.seq_len:
            raise DimensionError(f"sequence length {T} exceeds seq_len {cfg.seq_len}")
        x = tn.add(tn.take(self.tok_emb, tokens), tn.take(self.pos_emb, slice(0, T)))
        decisions, where = [], []
        for i, lp in enumerate(self.layers):
            x = self.attention_block(x, lp)
            flat, decision = self.ffn_block(tn.reshape(x, (B * T, cfg.d)), lp, options)
            x = tn.reshape(flat, (B, T, cfg.d))
            if decision is not None:
                decisions.append(decision)
                where.append(i)
        h = tn.layer_norm(tn.reshape(x, (B * T, cfg.d)), self.lnf_g, self.lnf_b, cfg.ln_eps)
        head = tn.transpose(self.tok_emb) if self.head is None else self.head
        return ForwardResult(tn.matmul(h, head), decisions, where)

    def loss(self, tokens, targets, options: RouteOptions | None = None, *, with_balance: bool = True) -> LossBreakdown:
        """LM cross-entropy plus per-layer expert and device balance losses."""
        out = self.forward(tokens, options)
        lm = tn.cross_entropy(out.logits, np.asarray(targets).reshape(-1))
        moe_cfg = self.cfg.moe
        expbal_terms, devbal_terms, loads = [], [], []
        for dec in out.decisions:
            if dec.k_routed == 0:
                continue
            stats = BalanceStats.from_decision(dec)
            loads.append(load_dispersion(stats))
            if with_balance:
                expbal_terms.append(expert_balance_loss(stats, moe_cfg.alpha1))
                if moe_cfg.D > 1:
                    devbal_terms.append(device_balance_loss(stats, moe_cfg.groups(), moe_cfg.alpha2))
        expbal = _reduce(expbal_terms, self.cfg.balance_reduction)
        devbal = _reduce(devbal_terms, self.cfg.balance_reduction)
        total = tn.add(tn.add(lm, expbal), devbal)
        mm = float(np.mean([l["max_mean"] for l in loads])) if loads else 0.0
        cv = float(np.mean([l["cv"] for l in loads])) if loads else 0.0
        return LossBreakdown(total, lm, expbal, devbal, out.decisions, mm, cv)


def _reduce(terms: list[Tensor], how: str) -> Tensor:
    if not terms:
        return Tensor(0.0)
    acc = terms[0]
    for t in terms[1:]:
        acc = tn.add(acc, t)
    return tn.scale(acc, 1.0 / len(terms)) if how == "mean" else acc


# ---------------------------------------------------------------- accounting

def count_model_params(cfg: ModelConfig) -> dict:
    """Total and activated parameter counts from shapes.

    Activated parameters exclude the embedding lookup tables (they are read,
    not multiplied) and the routed experts a token does not select.
    """
    d, V = cfg.d, cfg.vocab
    emb = V * d + cfg.seq_len * d
    attn = 4 * d * cfg.attn_dim + 4 * d  # projections + two LayerNorms
    head = 0 if cfg.tie_embeddings else d * V
    moe = count_params(cfg.moe)
    dense = ffn_param_count(d, cfg.ffn_inner)
    n_moe = cfg.n_moe_layers
    n_dense = cfg.L - n_moe
    total = emb + cfg.L * attn + n_moe * moe["totals"]["total"] + n_dense * dense + 2 * d + head
    non_emb_activated = cfg.L * attn + n_moe * moe["totals"]["activated"] + n_dense * dense + 2 * d
    activated = non_emb_activated + (head if head else V * d)
    return {
        "embedding": emb,
        "attention_per_layer": attn,
        "moe_layer": moe,
        "dense_ffn": dense,
        "head": head,
        "moe_layers": n_moe,
        "dense_layers": n_dense,
        "total": total,
        "activated": activated,
    }


# ---------------------------------------------------------------- checkpoints

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _write_member(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(path, model: MoETransformer, meta: dict | None = None) -> Path:
    """Write a zip archive: header.json, config.json, then one little-endian float64 .npy per parameter."""
    path = Path(path)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "byte_order": "little",
        "dtype": "float64",
        "params": [{"name": k, "shape": list(v.shape)} for k, v in model.params.items()],
        "seed": model.seed,
        "meta": meta or {},
    }
    with zipfile.ZipFile(path, "w") as zf:
        _write_member(zf, "header.json", json.dumps(header, indent=2, sort_keys=True).encode())
        _write_member(zf, "config.json", json.dumps(model.cfg.to_dict(), indent=2, sort_keys=True).encode())
        for name, t in model.params.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(t.data, dtype="<f8"), allow_pickle=False)
            _write_member(zf, f"params/{name}.npy", buf.getvalue())
    return path


def load_checkpoint(path) -> tuple[MoETransformer, dict]:
    """Rebuild a model from :func:`save_checkpoint` output; returns ``(model, header)``."""
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"{path}: not a {CHECKPOINT_FORMAT} archive")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {header.get('version')}")
        cfg = ModelConfig.from_dict(json.loads(zf.read("config.json")))
        state = {}
        for entry in header["params"]:
            with zf.open(f"params/{entry['name']}.npy") as fh:
                state[entry["name"]] = np.lib.format.read_array(io.BytesIO(fh.read()), allow_pickle=False)
    model = MoETransformer(cfg, seed=header.get("seed", 0))
    model.load_state_dict(state)
    return model, header
