"""BERT/ALBERT encoder family with factorized embeddings and cross-layer sharing.

Parameters live in a :class:`ParameterStore` keyed by path.  Encoder tensors
are stored once per *group*; ``attention_group_of`` and ``ffn_group_of`` map
each layer to the group it reads, so sharing is purely a matter of how many
groups exist.  A shared tensor used by several layers receives the sum of the
per-layer gradients from the autodiff core automatically.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

SHARING_STRATEGIES = ("all", "attention_only", "ffn_only", "none", "grouped")
OBJECTIVES = ("mlm_only", "mlm_nsp", "mlm_sop")
INIT_STDDEV = 0.02
_MASK_NEG = -1e4


class ConfigError(ValueError):
    """Invalid model configuration."""


@dataclass
class ModelConfig:
    num_layers: int = 12
    hidden_size: int = 768
    num_heads: int | None = None
    embedding_size: int = 128
    vocab_size: int = 30000
    ffn_size: int | None = None
    max_positions: int = 512
    sharing_strategy: str = "all"
    group_size: int = 1
    dropout_p: float = 0.1
    objective: str = "mlm_sop"
    factorize_embedding: bool | None = None
    layer_norm_eps: float = 1e-12

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    @property
    def uses_sentence_pair(self) -> bool:
        return self.objective != "mlm_only"


def validate_config(cfg: ModelConfig) -> ModelConfig:
    """Return a copy with defaults filled (heads H/64, FFN 4H) after checking invariants."""
    h = cfg.hidden_size
    for name in ("num_layers", "hidden_size", "embedding_size", "vocab_size", "max_positions"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be positive, got {getattr(cfg, name)}")
    heads = cfg.num_heads
    if heads is None:
        heads = h // 64
        if heads == 0:
            raise ConfigError(f"hidden_size {h} < 64: the H/64 head rule gives 0 heads; set num_heads")
    if heads < 1 or h % heads:
        raise ConfigError(f"hidden_size {h} is not divisible by num_heads {heads}")
    ffn = cfg.ffn_size if cfg.ffn_size is not None else 4 * h
    if ffn < 1:
        raise ConfigError(f"ffn_size must be positive, got {ffn}")
    if cfg.sharing_strategy not in SHARING_STRATEGIES:
        raise ConfigError(f"unknown sharing_strategy {cfg.sharing_strategy!r}")
    if cfg.objective not in OBJECTIVES:
        raise ConfigError(f"unknown objective {cfg.objective!r}")
    if cfg.sharing_strategy == "grouped":
        if cfg.group_size < 1 or cfg.num_layers % cfg.group_size:
            raise ConfigError(
                f"grouped sharing needs num_layers ({cfg.num_layers}) divisible by group_size ({cfg.group_size})"
            )
    if not 0.0 <= cfg.dropout_p < 1.0:
        raise ConfigError(f"dropout_p must be in [0, 1), got {cfg.dropout_p}")
    factorize = cfg.factorize_embedding
    if factorize is None:
        factorize = cfg.embedding_size != h
    elif not factorize and cfg.embedding_size != h:
        raise ConfigError(
            f"embedding_size {cfg.embedding_size} != hidden_size {h} requires factorize_embedding"
        )
    return dataclasses.replace(cfg, num_heads=heads, ffn_size=ffn, factorize_embedding=factorize)


def resolve_layer_groups(strategy: str, num_layers: int, group_size: int = 1) -> tuple[list[int], list[int]]:
    """Map each layer to its attention group and its FFN group."""
    if num_layers < 1:
        raise ConfigError("num_layers must be at least 1")
    const = [0] * num_layers
    ident = list(range(num_layers))
    if strategy == "all":
        return const, list(const)
    if strategy == "none":
        return ident, list(ident)
    if strategy == "attention_only":
        return const, ident
    if strategy == "ffn_only":
        return ident, const
    if strategy == "grouped":
        if group_size < 1 or num_layers % group_size:
            raise ConfigError(f"num_layers {num_layers} not divisible by group_size {group_size}")
        blocks = [i // group_size for i in range(num_layers)]
        return blocks, list(blocks)
    raise ConfigError(f"unknown sharing strategy {strategy!r}")


# -- parameter inventory ------------------------------------------------

def _attention_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    h = cfg.hidden_size
    shapes = {}
    for proj in "qkvo":
        shapes[f"{proj}_weight"] = (h, h)
        shapes[f"{proj}_bias"] = (h,)
    shapes["ln_gamma"] = (h,)
    shapes["ln_beta"] = (h,)
    return shapes


def _ffn_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    h, f = cfg.hidden_size, cfg.ffn_size
    return {
        "in_weight": (h, f),
        "in_bias": (f,),
        "out_weight": (f, h),
        "out_bias": (h,),
        "ln_gamma": (h,),
        "ln_beta": (h,),
    }


def _embedding_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    e = cfg.embedding_size
    shapes = {
        "embeddings.token": (cfg.vocab_size, e),
        "embeddings.position": (cfg.max_positions, e),
        "embeddings.segment": (2, e),
        "embeddings.ln_gamma": (e,),
        "embeddings.ln_beta": (e,),
    }
    if cfg.factorize_embedding:
        shapes["embeddings.projection_weight"] = (e, cfg.hidden_size)
        shapes["embeddings.projection_bias"] = (cfg.hidden_size,)
    return shapes


def _head_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    h, e = cfg.hidden_size, cfg.embedding_size
    return {
        "heads.pooler.weight": (h, h),
        "heads.pooler.bias": (h,),
        "heads.mlm.transform_weight": (h, e),
        "heads.mlm.transform_bias": (e,),
        "heads.mlm.ln_gamma": (e,),
        "heads.mlm.ln_beta": (e,),
        "heads.mlm.output_bias": (cfg.vocab_size,),
        "heads.sp.weight": (h, 2),
        "heads.sp.bias": (2,),
    }


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter path and shape ``build_model`` allocates, in allocation order."""
    cfg = validate_config(cfg)
    att_of, ffn_of = resolve_layer_groups(cfg.sharing_strategy, cfg.num_layers, cfg.group_size)
    shapes = dict(_embedding_shapes(cfg))
    for g in sorted(set(att_of)):
        for name, shape in _attention_shapes(cfg).items():
            shapes[f"group{g}.attention.{name}"] = shape
    for g in sorted(set(ffn_of)):
        for name, shape in _ffn_shapes(cfg).items():
            shapes[f"group{g}.ffn.{name}"] = shape
    shapes.update(_head_shapes(cfg))
    return shapes


@dataclass
class ParameterBreakdown:
    embeddings: int
    attention_per_group: int
    ffn_per_group: int
    attention_groups: int
    ffn_groups: int
    heads: int

    @property
    def encoder(self) -> int:
        return self.attention_per_group * self.attention_groups + self.ffn_per_group * self.ffn_groups

    @property
    def total(self) -> int:
        return self.embeddings + self.encoder + self.heads

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder"] = self.encoder
        d["total"] = self.total
        return d


def count_parameters(cfg: ModelConfig) -> ParameterBreakdown:
    """Closed-form parameter count.

    embeddings = V*E + P*E + 2*E + 2*E (+ E*H + H when factorized)
    attention  = 4*(H*H + H) + 2*H                       per attention group
    ffn        = 2*H*F + F + H + 2*H                     per FFN group
    heads      = (H*H + H) + (H*E + E + 2*E + V) + (2*H + 2)
    """
    cfg = validate_config(cfg)
    h, e, v, p, f = cfg.hidden_size, cfg.embedding_size, cfg.vocab_size, cfg.max_positions, cfg.ffn_size
    emb = v * e + p * e + 2 * e + 2 * e
    if cfg.factorize_embedding:
        emb += e * h + h
    att = 4 * (h * h + h) + 2 * h
    ffn = 2 * h * f + f + h + 2 * h
    heads = (h * h + h) + (h * e + e + 2 * e + v) + (2 * h + 2)
    att_of, ffn_of = resolve_layer_groups(cfg.sharing_strategy, cfg.num_layers, cfg.group_size)
    return ParameterBreakdown(
        embeddings=emb,
        attention_per_group=att,
        ffn_per_group=ffn,
        attention_groups=len(set(att_of)),
        ffn_groups=len(set(ffn_of)),
        heads=heads,
    )


# -- store --------------------------------------------------------------

@dataclass
class ParameterStore:
    config: ModelConfig
    params: dict[str, Tensor]
    attention_group_of: list[int] = field(default_factory=list)
    ffn_group_of: list[int] = field(default_factory=list)

    def __getitem__(self, path: str) -> Tensor:
        return self.params[path]

    def __contains__(self, path: str) -> bool:
        return path in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def items(self):
        return self.params.items()

    @property
    def data_dtype(self):
        return next(iter(self.params.values())).dtype

    def num_scalars(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {k: t.grad for k, t in self.params.items()}

    def copy(self) -> "ParameterStore":
        return ParameterStore.from_arrays(self.config, {k: v.copy() for k, v in self.arrays().items()})

    @classmethod
    def from_arrays(cls, cfg: ModelConfig, arrays: dict[str, np.ndarray], dtype=None) -> "ParameterStore":
        cfg = validate_config(cfg)
        expected = parameter_shapes(cfg)
        missing = set(expected) - set(arrays)
        extra = set(arrays) - set(expected)
        if missing or extra:
            raise ConfigError(
                f"parameter set does not match config: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}"
            )
        params = {}
        for path, shape in expected.items():
            arr = np.asarray(arrays[path])
            if arr.shape != shape:
                raise ConfigError(f"{path}: checkpoint shape {arr.shape} != config shape {shape}")
            params[path] = T.parameter(arr, dtype=dtype or arr.dtype)
        att_of, ffn_of = resolve_layer_groups(cfg.sharing_strategy, cfg.num_layers, cfg.group_size)
        return cls(cfg, params, att_of, ffn_of)


def truncated_normal(rng: np.random.Generator, shape, stddev: float = INIT_STDDEV, dtype=np.float64) -> np.ndarray:
    """Normal draws resampled until they fall within two standard deviations."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return (x * stddev).astype(dtype)


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> ParameterStore:
    cfg = validate_config(cfg)
    rng = np.random.default_rng(seed)
    arrays = {}
    for path, shape in parameter_shapes(cfg).items():
        leaf = path.rsplit(".", 1)[-1]
        if leaf.endswith("gamma"):
            arrays[path] = np.ones(shape, dtype=dtype)
        elif leaf.endswith("beta") or leaf.endswith("bias"):
            arrays[path] = np.zeros(shape, dtype=dtype)
        else:
            arrays[path] = truncated_normal(rng, shape, dtype=dtype)
    return ParameterStore.from_arrays(cfg, arrays, dtype=dtype)


# -- forward ------------------------------------------------------------

@dataclass
class ForwardOutput:
    hidden_states: list[Tensor]
    mlm_logits: Tensor
    sp_logits: Tensor | None = None
    layer_inputs: list[Tensor] | None = None
    layer_outputs: list[Tensor] | None = None

    @property
    def final_hidden(self) -> Tensor:
        return self.hidden_states[-1]


def _attention(x: Tensor, p: dict, prefix: str, mask_add: np.ndarray, cfg: ModelConfig, training, rng) -> Tensor:
    b, s, h = x.shape
    a, d = cfg.num_heads, cfg.head_dim

    def heads(name):
        y = x @ p[f"{prefix}.{name}_weight"] + p[f"{prefix}.{name}_bias"]
        return y.reshape(b, s, a, d).transpose(0, 2, 1, 3)

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d)) + mask_add
    probs = T.dropout(T.softmax(scores, axis=-1), cfg.dropout_p, training, rng)
    ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(b, s, h)
    out = ctx @ p[f"{prefix}.o_weight"] + p[f"{prefix}.o_bias"]
    out = T.dropout(out, cfg.dropout_p, training, rng)
    return T.layer_norm(x + out, p[f"{prefix}.ln_gamma"], p[f"{prefix}.ln_beta"], cfg.layer_norm_eps)


def _ffn(x: Tensor, p: dict, prefix: str, cfg: ModelConfig, training, rng) -> Tensor:
    inner = T.gelu(x @ p[f"{prefix}.in_weight"] + p[f"{prefix}.in_bias"])
    out = inner @ p[f"{prefix}.out_weight"] + p[f"{prefix}.out_bias"]
    out = T.dropout(out, cfg.dropout_p, training, rng)
    return T.layer_norm(x + out, p[f"{prefix}.ln_gamma"], p[f"{prefix}.ln_beta"], cfg.layer_norm_eps)


def forward(
    params: ParameterStore,
    cfg: ModelConfig | None,
    batch,
    training: bool = False,
    trace: bool = False,
    rng: np.random.Generator | None = None,
) -> ForwardOutput:
    """Run the encoder and both heads on a packed batch.

    ``batch`` needs ``token_ids``, ``segment_ids`` and ``padding_mask`` arrays of
    shape (B, S).
    """
    cfg = validate_config(cfg or params.config)
    p = params.params
    ids = np.asarray(batch.token_ids)
    seg = np.asarray(batch.segment_ids)
    pad = np.asarray(batch.padding_mask, dtype=bool)
    if ids.ndim != 2:
        raise T.DimensionError(f"token_ids must be B x S, got shape {ids.shape}")
    b, s = ids.shape
    if s > cfg.max_positions:
        raise ValueError(f"sequence length {s} exceeds max_positions {cfg.max_positions}")
    if training and cfg.dropout_p > 0 and rng is None:
        raise ValueError("training with dropout needs an rng")

    x = T.embedding(p["embeddings.token"], ids)
    x = x + T.embedding(p["embeddings.position"], np.arange(s))
    x = x + T.embedding(p["embeddings.segment"], seg)
    x = T.layer_norm(x, p["embeddings.ln_gamma"], p["embeddings.ln_beta"], cfg.layer_norm_eps)
    x = T.dropout(x, cfg.dropout_p, training, rng)
    if cfg.factorize_embedding:
        x = x @ p["embeddings.projection_weight"] + p["embeddings.projection_bias"]

    mask_add = ((~pad).astype(x.dtype) * _MASK_NEG)[:, None, None, :]
    hidden, ins, outs = [], [], []
    for i in range(cfg.num_layers):
        if trace:
            ins.append(x)
        x = _attention(x, p, f"group{params.attention_group_of[i]}.attention", mask_add, cfg, training, rng)
        x = _ffn(x, p, f"group{params.ffn_group_of[i]}.ffn", cfg, training, rng)
        hidden.append(x)
        if trace:
            outs.append(x)

    t = T.gelu(x @ p["heads.mlm.transform_weight"] + p["heads.mlm.transform_bias"])
    t = T.layer_norm(t, p["heads.mlm.ln_gamma"], p["heads.mlm.ln_beta"], cfg.layer_norm_eps)
    mlm_logits = t @ p["embeddings.token"].T + p["heads.mlm.output_bias"]

    sp_logits = None
    if cfg.uses_sentence_pair:
        pooled = T.tanh(x[:, 0, :] @ p["heads.pooler.weight"] + p["heads.pooler.bias"])
        sp_logits = pooled @ p["heads.sp.weight"] + p["heads.sp.bias"]

    return ForwardOutput(
        hidden_states=hidden,
        mlm_logits=mlm_logits,
        sp_logits=sp_logits,
        layer_inputs=ins if trace else None,
        layer_outputs=outs if trace else None,
    )


def pretraining_loss(out: ForwardOutput, batch) -> tuple[Tensor, Tensor, Tensor | None]:
    """Return (total, mlm, sentence-pair) losses; the last is None for MLM-only."""
    logits = out.mlm_logits
    b, s, v = logits.shape
    mlm = T.cross_entropy_logits(logits.reshape(b * s, v), np.asarray(batch.mlm_targets).reshape(-1))
    if out.sp_logits is None or batch.sp_labels is None:
        return mlm, mlm, None
    sp = T.cross_entropy_logits(out.sp_logits, batch.sp_labels)
    return mlm + sp, mlm, sp


# -- warm start ---------------------------------------------------------

_MUST_MATCH = ("hidden_size", "embedding_size", "vocab_size", "num_heads", "ffn_size", "max_positions", "factorize_embedding")


def warm_start_expand(source: ParameterStore, target_cfg: ModelConfig) -> ParameterStore:
    """Initialise a (usually deeper) model from a shallower one.

    Embeddings and heads are copied.  Each target group is seeded from the
    source group used by source layer ``i mod source_L``, where ``i`` is the
    first target layer reading that group; under all-sharing this copies the
    single group, under no sharing it tiles the source layers cyclically.
    """
    src_cfg = validate_config(source.config)
    tgt = validate_config(target_cfg)
    for name in _MUST_MATCH:
        if getattr(src_cfg, name) != getattr(tgt, name):
            raise ConfigError(
                f"warm start {name} mismatch: source {getattr(src_cfg, name)} vs target {getattr(tgt, name)}"
            )
    if tgt.num_layers < src_cfg.num_layers:
        raise ConfigError(f"target num_layers {tgt.num_layers} < source num_layers {src_cfg.num_layers}")

    src = source.arrays()
    att_of, ffn_of = resolve_layer_groups(tgt.sharing_strategy, tgt.num_layers, tgt.group_size)
    arrays: dict[str, np.ndarray] = {}
    for path in parameter_shapes(tgt):
        if not path.startswith("group"):
            arrays[path] = src[path].copy()

    def seed_groups(kind: str, tgt_map: list[int], src_map: list[int]):
        for g in sorted(set(tgt_map)):
            first = tgt_map.index(g)
            sg = src_map[first % src_cfg.num_layers]
            prefix = f"group{sg}.{kind}."
            for path, arr in src.items():
                if path.startswith(prefix):
                    arrays[f"group{g}.{kind}.{path[len(prefix):]}"] = arr.copy()

    seed_groups("attention", att_of, source.attention_group_of)
    seed_groups("ffn", ffn_of, source.ffn_group_of)
    dtype = next(iter(src.values())).dtype
    return ParameterStore.from_arrays(tgt, arrays, dtype=dtype)
