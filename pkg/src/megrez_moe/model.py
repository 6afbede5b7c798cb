"""Dense-first grouped MoE transformer.

Layer layout: ``n_dense_leading`` dense layers, then ``n_groups * group_size``
MoE layers.  Every layer is pre-norm: ``x += attn(norm(x)); x += ffn(norm(x))``.

Routing modes
    standard  one routed pool per MoE layer, router owned by the layer
    shared    one routed pool per group of ``group_size`` MoE layers
    pregated  shared pools; the gate of MoE layer ``i`` is computed by the
              router hosted on layer ``i - 1`` (the last dense layer hosts the
              router of the first MoE layer; the last layer hosts none)

Initialization: normal(0, 0.02), except residual-output matrices (attention
output and FFN down projections) which use ``0.02 / sqrt(2 * n_layers)``;
norm weights start at 1.  Each tensor draws from ``rng.child(name)`` so its
value depends only on the seed and its name.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .moe import (
    ConfigError,
    ExpertParams,
    ExpertPool,
    GateDecision,
    RouterParams,
    expert_forward,
    group_of,
    moe_block_pregated,
    moe_block_shared,
    moe_block_standard,
)
from .tensor import DTYPES, Rng, Tensor, check_finite, matmul, rms_norm, softmax

ROUTING_MODES = ("standard", "shared", "pregated")


class InputError(ValueError):
    """Model inputs are malformed (token ids, lengths, masks)."""


@dataclass
class ModelConfig:
    n_layers: int = 4
    group_size: int = 3
    n_dense_leading: int = 1
    d_model: int = 16
    n_heads: int = 2
    d_head: int = 8
    routed_experts_per_group: int = 8
    top_k: int = 2
    shared_experts_per_layer: int = 1
    d_expert: int = 8
    d_dense_ffn: int = 32
    rope_base: float = 1_000_000.0
    vocab_size: int = 32
    seq_len_max: int = 64
    routing_mode: str = "shared"
    precision: str = "f64"
    seed: int = 0
    norm_eps: float = 1e-6
    router_bias: bool = False

    @property
    def n_moe_layers(self) -> int:
        return self.n_layers - self.n_dense_leading

    @property
    def n_groups(self) -> int:
        return self.n_moe_layers // self.group_size

    @property
    def n_pools(self) -> int:
        return self.n_moe_layers if self.routing_mode == "standard" else self.n_groups

    @property
    def dtype(self):
        return DTYPES[self.precision]

    def is_moe(self, layer: int) -> bool:
        return layer >= self.n_dense_leading

    def pool_index(self, layer: int) -> int:
        if self.routing_mode == "standard":
            return layer - self.n_dense_leading
        return group_of(layer, self.group_size, self.n_dense_leading)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        preset = data.pop("preset", None)
        base = preset_config(preset) if preset else cls()
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return dataclasses.replace(base, **data)


# Values taken from the Megrez2-Preview description.  Width, head layout and
# vocabulary are not published; the completion below is an assumption used
# only for parameter accounting.
MEGREZ2_PREVIEW = ModelConfig(
    n_layers=31,
    group_size=3,
    n_dense_leading=1,
    routed_experts_per_group=64,
    top_k=6,
    shared_experts_per_layer=4,
    d_expert=1408,
    d_dense_ffn=10944,
    rope_base=1_000_000.0,
    seq_len_max=32768,
    routing_mode="pregated",
    d_model=2048,
    n_heads=16,
    d_head=128,
    vocab_size=122880,
)
PRESET_ASSUMED_FIELDS = {"megrez2-preview": ("d_model", "n_heads", "d_head", "vocab_size")}
PRESETS = {"megrez2-preview": MEGREZ2_PREVIEW}


def preset_config(name: str) -> ModelConfig:
    try:
        return dataclasses.replace(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; known: {', '.join(PRESETS)}") from None


@dataclass(frozen=True)
class Violation:
    field: str
    message: str

    def __str__(self):
        return f"{self.field}: {self.message}"


def validate(cfg: ModelConfig) -> list[Violation]:
    """Every broken invariant of ``cfg``; an empty list means the config is usable."""
    out = []
    for name in ("n_layers", "group_size", "d_model", "n_heads", "d_head",
                 "routed_experts_per_group", "top_k", "d_expert", "d_dense_ffn",
                 "vocab_size", "seq_len_max"):
        value = getattr(cfg, name)
        if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
            out.append(Violation(name, f"must be a positive integer, got {value!r}"))
    for name in ("n_dense_leading", "shared_experts_per_layer"):
        value = getattr(cfg, name)
        if not isinstance(value, int) or isinstance(value, bool) or value < 0:
            out.append(Violation(name, f"must be a non-negative integer, got {value!r}"))
    if out:
        return out

    if cfg.n_dense_leading >= cfg.n_layers:
        out.append(Violation("n_dense_leading", f"{cfg.n_dense_leading} leaves no MoE layers out of {cfg.n_layers}"))
    elif cfg.n_moe_layers % cfg.group_size:
        out.append(Violation(
            "group_size",
            f"{cfg.n_moe_layers} MoE layers (n_layers - n_dense_leading) not divisible by {cfg.group_size}",
        ))
    if cfg.top_k > cfg.routed_experts_per_group:
        out.append(Violation("top_k", f"{cfg.top_k} exceeds routed_experts_per_group={cfg.routed_experts_per_group}"))
    if cfg.d_head % 2:
        out.append(Violation("d_head", f"rotary embedding needs an even head size, got {cfg.d_head}"))
    if not cfg.rope_base > 1.0:
        out.append(Violation("rope_base", f"must exceed 1, got {cfg.rope_base}"))
    if not cfg.norm_eps > 0:
        out.append(Violation("norm_eps", "must be positive"))
    if cfg.routing_mode not in ROUTING_MODES:
        out.append(Violation("routing_mode", f"{cfg.routing_mode!r} not in {ROUTING_MODES}"))
    elif cfg.routing_mode == "pregated" and cfg.n_dense_leading < 1:
        out.append(Violation("n_dense_leading", "pregated routing needs a dense layer to host the first router"))
    if cfg.precision not in DTYPES:
        out.append(Violation("precision", f"{cfg.precision!r} not in {tuple(DTYPES)}"))
    return out


# ---------------------------------------------------------------------------
# Parameters


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor


@dataclass
class Layer:
    index: int
    attn_norm: Tensor
    attn: AttentionParams
    ffn_norm: Tensor
    ffn: ExpertParams | None = None  # dense layers only
    shared: list[ExpertParams] = field(default_factory=list)
    pool: ExpertPool | None = None  # view over the group pool plus ``shared``
    router: RouterParams | None = None  # the router hosted on this layer


@dataclass
class Model:
    cfg: ModelConfig
    embed: Tensor  # vocab x d_model
    layers: list[Layer]
    final_norm: Tensor
    lm_head: Tensor  # d_model x vocab
    pools: list[ExpertPool]

    def gate_router(self, layer: int) -> RouterParams:
        """Router that produces the gate of MoE layer ``layer``."""
        if self.cfg.routing_mode == "pregated":
            return self.layers[layer - 1].router
        return self.layers[layer].router

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        """Every stored tensor exactly once; pooled experts appear under their pool."""
        yield "embed", self.embed
        for layer in self.layers:
            p = f"layer{layer.index}"
            yield f"{p}.attn_norm", layer.attn_norm
            for name in ("wq", "wk", "wv", "wo"):
                yield f"{p}.attn.{name}", getattr(layer.attn, name)
            yield f"{p}.ffn_norm", layer.ffn_norm
            if layer.ffn is not None:
                yield from _expert_tensors(f"{p}.ffn", layer.ffn)
            for s, e in enumerate(layer.shared):
                yield from _expert_tensors(f"{p}.shared{s}", e)
            if layer.router is not None:
                yield f"{p}.router.weight", layer.router.weight
                if layer.router.bias is not None:
                    yield f"{p}.router.bias", layer.router.bias
        for pool in self.pools:
            for j, e in enumerate(pool.routed):
                yield from _expert_tensors(f"pool{pool.group_index}.expert{j}", e)
        yield "final_norm", self.final_norm
        yield "lm_head", self.lm_head


def _expert_tensors(prefix: str, e: ExpertParams):
    yield f"{prefix}.w_gate", e.w_gate
    yield f"{prefix}.w_up", e.w_up
    yield f"{prefix}.w_down", e.w_down


def build(cfg: ModelConfig, rng: Rng | None = None) -> Model:
    problems = validate(cfg)
    if problems:
        raise ConfigError("; ".join(map(str, problems)))
    rng = rng if rng is not None else Rng(cfg.seed)
    dtype = cfg.dtype
    std = 0.02
    std_out = 0.02 / math.sqrt(2 * cfg.n_layers)
    d, hd = cfg.d_model, cfg.n_heads * cfg.d_head

    def normal(name, shape, s=std):
        return rng.child(name).normal(shape, s).astype(dtype)

    def expert(name, hidden):
        return ExpertParams(
            normal(f"{name}.w_gate", (d, hidden)),
            normal(f"{name}.w_up", (d, hidden)),
            normal(f"{name}.w_down", (hidden, d), std_out),
        )

    def router(name):
        bias = normal(f"{name}.bias", (cfg.routed_experts_per_group,)) if cfg.router_bias else None
        return RouterParams(normal(f"{name}.weight", (d, cfg.routed_experts_per_group)), bias)

    pools = [
        ExpertPool(p, [expert(f"pool{p}.expert{j}", cfg.d_expert) for j in range(cfg.routed_experts_per_group)])
        for p in range(cfg.n_pools)
    ]
    layers = []
    for i in range(cfg.n_layers):
        name = f"layer{i}"
        layer = Layer(
            index=i,
            attn_norm=np.ones(d, dtype=dtype),
            attn=AttentionParams(
                normal(f"{name}.attn.wq", (d, hd)),
                normal(f"{name}.attn.wk", (d, hd)),
                normal(f"{name}.attn.wv", (d, hd)),
                normal(f"{name}.attn.wo", (hd, d), std_out),
            ),
            ffn_norm=np.ones(d, dtype=dtype),
        )
        if cfg.is_moe(i):
            m = i - cfg.n_dense_leading
            layer.shared = [expert(f"{name}.shared{s}", cfg.d_expert) for s in range(cfg.shared_experts_per_layer)]
            layer.pool = pools[cfg.pool_index(i)].with_shared(layer.shared)
            if cfg.routing_mode != "pregated":
                layer.router = router(f"router{m}")
        else:
            layer.ffn = expert(f"{name}.ffn", cfg.d_dense_ffn)
        # pregated: layer i hosts the gate of MoE layer i + 1
        if cfg.routing_mode == "pregated" and i + 1 < cfg.n_layers and cfg.is_moe(i + 1):
            layer.router = router(f"pregate{i + 1 - cfg.n_dense_leading}")
        layers.append(layer)

    return Model(
        cfg=cfg,
        embed=normal("embed", (cfg.vocab_size, d)),
        layers=layers,
        final_norm=np.ones(d, dtype=dtype),
        lm_head=normal("lm_head", (d, cfg.vocab_size)),
        pools=pools,
    )


# ---------------------------------------------------------------------------
# Forward


def rope_apply(x: Tensor, positions, base: float) -> Tensor:
    """Rotate each (even, odd) feature pair by ``position * base**(-2j / d_head)``.

    ``x`` is ``tokens x heads x d_head``.
    """
    d_head = x.shape[-1]
    if d_head % 2:
        raise ConfigError(f"rotary embedding needs an even head size, got {d_head}")
    positions = np.asarray(positions, dtype=np.float64)
    inv_freq = base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    angles = positions[:, None] * inv_freq[None, :]
    cos = np.cos(angles)[:, None, :].astype(x.dtype)
    sin = np.sin(angles)[:, None, :].astype(x.dtype)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def attention(p: AttentionParams, x: Tensor, positions, mask: np.ndarray, cfg: ModelConfig) -> Tensor:
    t = x.shape[0]
    h, dh = cfg.n_heads, cfg.d_head
    q = rope_apply(matmul(x, p.wq).reshape(t, h, dh), positions, cfg.rope_base)
    k = rope_apply(matmul(x, p.wk).reshape(t, h, dh), positions, cfg.rope_base)
    v = matmul(x, p.wv).reshape(t, h, dh)
    scale = 1.0 / math.sqrt(dh)
    heads = []
    for i in range(h):
        scores = matmul(q[:, i], k[:, i].T) * scale
        probs = softmax(np.where(mask, scores, -np.inf), axis=-1)
        heads.append(matmul(probs, v[:, i]))
    return matmul(np.concatenate(heads, axis=1), p.wo)


@dataclass
class RoutingRecord:
    """Gate decision of one MoE layer, tagged with the pool it addressed."""

    layer: int
    group: int
    mode: str
    decision: GateDecision


def forward(
    model: Model,
    token_ids,
    attn_mask: np.ndarray | None = None,
    positions=None,
    trace: list[RoutingRecord] | None = None,
) -> Tensor:
    """Logits ``tokens x vocab``.

    ``attn_mask[q, k]`` is True where query ``q`` may see key ``k``; it is
    intersected with the causal mask.  ``positions`` default to 0..T-1.
    """
    cfg = model.cfg
    ids = np.asarray(token_ids)
    if ids.ndim != 1 or ids.size == 0:
        raise InputError(f"token_ids must be a non-empty 1-D sequence, got shape {ids.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise InputError("token_ids must be integers")
    if ids.size > cfg.seq_len_max:
        raise InputError(f"{ids.size} tokens exceed seq_len_max={cfg.seq_len_max}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise InputError(f"token id out of range [0, {cfg.vocab_size})")
    t = ids.size
    mask = causal_mask(t)
    if attn_mask is not None:
        attn_mask = np.asarray(attn_mask, dtype=bool)
        if attn_mask.shape != (t, t):
            raise InputError(f"attn_mask must be {t}x{t}, got {attn_mask.shape}")
        mask = mask & attn_mask
    if positions is None:
        positions = np.arange(t)
    elif len(positions) != t:
        raise InputError("positions and token_ids differ in length")

    x = model.embed[ids].copy()
    k = cfg.top_k
    for layer in model.layers:
        x = x + attention(layer.attn, rms_norm(x, layer.attn_norm, cfg.norm_eps), positions, mask, cfg)
        hn = rms_norm(x, layer.ffn_norm, cfg.norm_eps)
        if layer.ffn is not None:
            x = x + expert_forward(layer.ffn, hn)
            continue
        i = layer.index
        gates = [] if trace is not None else None
        if cfg.routing_mode == "standard":
            y = moe_block_standard(layer.pool, layer.router, hn, k, layer_index=i, trace=gates)
        elif cfg.routing_mode == "shared":
            y = moe_block_shared(model.pools, i, cfg.group_size, layer.router, hn, k,
                                 n_dense_leading=cfg.n_dense_leading, shared=layer.shared, trace=gates)
        else:
            y = moe_block_pregated(layer.pool, model.gate_router(i), hn, k, i, trace=gates)
        if trace is not None:
            trace.append(RoutingRecord(i, cfg.pool_index(i), cfg.routing_mode, gates[0]))
        x = x + y
    return check_finite(matmul(rms_norm(x, model.final_norm, cfg.norm_eps), model.lm_head), "logits")


# ---------------------------------------------------------------------------
# Parameter accounting


@dataclass
class ParamReport:
    stored_total: int
    activated_per_token: int
    stored: dict[str, int]
    activated: dict[str, int]
    assumed_fields: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["assumed_fields"] = list(self.assumed_fields)
        return out


def count_params(cfg: ModelConfig, assumed_fields: tuple[str, ...] = ()) -> ParamReport:
    """Exact parameter counts implied by ``cfg``.

    Activated counts what one token touches: the output head, norms,
    attention, the router of each MoE layer, ``top_k`` routed experts and the
    shared experts of each MoE layer, and the dense FFNs.  The input embedding
    is a row lookup and is counted as stored only.
    """
    problems = validate(cfg)
    if problems:
        raise ConfigError("; ".join(map(str, problems)))
    d, hd = cfg.d_model, cfg.n_heads * cfg.d_head
    expert = 3 * d * cfg.d_expert
    n_moe = cfg.n_moe_layers
    router = d * cfg.routed_experts_per_group + (cfg.routed_experts_per_group if cfg.router_bias else 0)
    common = {
        "output_head": d * cfg.vocab_size,
        "norms": (2 * cfg.n_layers + 1) * d,
        "attention": cfg.n_layers * 4 * d * hd,
        "routers": n_moe * router,
        "shared_experts": n_moe * cfg.shared_experts_per_layer * expert,
        "dense_ffn": cfg.n_dense_leading * 3 * d * cfg.d_dense_ffn,
    }
    stored = {"embeddings": cfg.vocab_size * d, **common,
              "routed_experts": cfg.n_pools * cfg.routed_experts_per_group * expert}
    activated = {"embeddings": 0, **common, "routed_experts": n_moe * cfg.top_k * expert}
    return ParamReport(sum(stored.values()), sum(activated.values()), stored, activated, tuple(assumed_fields))


# ---------------------------------------------------------------------------
# Binary tensor container
#
# Little-endian layout:
#   magic  b"MGZT"
#   u32    format version (1)
#   u32    header length, then that many bytes of UTF-8 JSON (sorted keys)
#   u32    tensor count
#   per tensor: u16 name length, name bytes, u8 dtype code (0 f64, 1 f32,
#               2 i64), u8 ndim, u64 dims..., u64 data offset, u64 nbytes
#   data blob; offsets are relative to the start of the blob

MAGIC = b"MGZT"
FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1, np.dtype("<i8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_tensors(path, tensors: dict[str, np.ndarray], header: dict | None = None) -> None:
    head = json.dumps(header or {}, sort_keys=True).encode()
    directory, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise TypeError(f"unsupported dtype {arr.dtype} for {name}")
        raw = arr.astype(dt, copy=False).tobytes()
        nb = name.encode()
        directory.append(
            struct.pack("<H", len(nb)) + nb
            + struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim)
            + struct.pack(f"<{arr.ndim}Q", *arr.shape)
            + struct.pack("<QQ", offset, len(raw))
        )
        blobs.append(raw)
        offset += len(raw)
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<II", FORMAT_VERSION, len(head)) + head)
        f.write(struct.pack("<I", len(directory)))
        f.write(b"".join(directory))
        f.write(b"".join(blobs))


def load_tensors(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a tensor container (bad magic)")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    pos = 12
    header = json.loads(buf[pos : pos + hlen])
    pos += hlen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + nlen].decode()
        pos += nlen
        code, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        off, nbytes = struct.unpack_from("<QQ", buf, pos)
        pos += 16
        entries.append((name, _CODE_DTYPES[code], shape, off, nbytes))
    tensors = {}
    for name, dt, shape, off, nbytes in entries:
        raw = buf[pos + off : pos + off + nbytes]
        tensors[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    return header, tensors


def save_model(model: Model, path) -> None:
    save_tensors(path, dict(model.named_parameters()), {"config": model.cfg.to_dict()})


def load_model(path) -> Model:
    header, tensors = load_tensors(path)
    model = build(ModelConfig.from_dict(header["config"]))
    for name, arr in model.named_parameters():
        if name not in tensors:
            raise ValueError(f"{path}: missing tensor {name}")
        arr[...] = tensors[name]
    return model
