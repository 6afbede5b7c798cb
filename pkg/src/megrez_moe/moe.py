"""Routed mixture-of-experts blocks.

Three ways of wiring the same aggregation ``sum_j w_j * E_j(h)``:

* ``moe_block_standard``  every layer owns its router and its expert pool;
* ``moe_block_shared``    ``n`` consecutive MoE layers read one pool (group
  ``g = (i - n_dense_leading) // n``) but keep their own routers;
* ``moe_block_pregated``  the gate for layer ``i`` comes from the router
  owned by layer ``i - 1``, applied to layer ``i``'s input.

Gating is softmax over all ``M`` scores, top-k with ties going to the lower
expert index, then renormalization of the selected weights.  Shared experts
are always evaluated and added with weight 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, check_finite, matmul, sigmoid, silu, silu_grad, softmax


class ConfigError(ValueError):
    """Parameters or arguments are inconsistent with each other."""


class StateError(RuntimeError):
    """An operation needs state that was never recorded."""


@dataclass
class RouterParams:
    weight: Tensor  # d_model x M
    bias: Tensor | None = None

    @property
    def n_experts(self) -> int:
        return self.weight.shape[1]

    def n_params(self) -> int:
        return self.weight.size + (0 if self.bias is None else self.bias.size)

    def copy(self) -> "RouterParams":
        return RouterParams(self.weight.copy(), None if self.bias is None else self.bias.copy())


@dataclass
class ExpertParams:
    """Gated FFN: ``(silu(h @ w_gate) * (h @ w_up)) @ w_down``."""

    w_gate: Tensor  # d_model x d_expert
    w_up: Tensor  # d_model x d_expert
    w_down: Tensor  # d_expert x d_model

    def __post_init__(self):
        d_model, d_hidden = self.w_gate.shape
        if self.w_up.shape != (d_model, d_hidden) or self.w_down.shape != (d_hidden, d_model):
            raise ConfigError(
                f"inconsistent expert shapes: gate {self.w_gate.shape}, "
                f"up {self.w_up.shape}, down {self.w_down.shape}"
            )

    @property
    def d_model(self) -> int:
        return self.w_gate.shape[0]

    def n_params(self) -> int:
        return self.w_gate.size + self.w_up.size + self.w_down.size


@dataclass
class ExpertPool:
    """Routed experts of one group, plus the shared experts of the layer using it.

    Layers of a group build their view with ``with_shared`` so that ``routed``
    is the very same list object across the group.
    """

    group_index: int
    routed: list[ExpertParams]
    shared: list[ExpertParams] = field(default_factory=list)

    @property
    def n_experts(self) -> int:
        return len(self.routed)

    def with_shared(self, shared: list[ExpertParams]) -> "ExpertPool":
        return ExpertPool(self.group_index, self.routed, shared)


@dataclass
class GateDecision:
    indices: np.ndarray  # tokens x k, int
    weights: Tensor  # tokens x k, renormalized
    source_layer: int = -1
    probs: Tensor | None = None  # tokens x M softmax, kept for backward

    @property
    def k(self) -> int:
        return self.indices.shape[1]


def route_topk(router: RouterParams, h: Tensor, k: int, source_layer: int = -1) -> GateDecision:
    m = router.n_experts
    if not 1 <= k <= m:
        raise ConfigError(f"top_k={k} must lie in [1, {m}]")
    if h.shape[-1] != router.weight.shape[0]:
        raise ConfigError(f"router expects width {router.weight.shape[0]}, got {h.shape[-1]}")
    logits = matmul(h, router.weight)
    if router.bias is not None:
        logits = logits + router.bias
    probs = softmax(logits, axis=-1)
    # stable sort of -p keeps lower index first among ties
    indices = np.argsort(-probs, axis=-1, kind="stable")[:, :k]
    picked = np.take_along_axis(probs, indices, axis=-1)
    weights = picked / np.sum(picked, axis=-1, keepdims=True)
    return GateDecision(indices, weights, source_layer, probs)


def expert_forward(e: ExpertParams, h: Tensor) -> Tensor:
    if h.shape[-1] != e.d_model:
        raise ConfigError(f"expert expects width {e.d_model}, got {h.shape[-1]}")
    return matmul(silu(matmul(h, e.w_gate)) * matmul(h, e.w_up), e.w_down)


def _combine(pool: ExpertPool, decision: GateDecision, h: Tensor) -> Tensor:
    """Weighted sum over the k slots (in slot order) plus the shared experts."""
    if decision.indices.size and decision.indices.max() >= pool.n_experts:
        raise ConfigError(f"gate selects expert beyond pool size {pool.n_experts}")
    tokens, k = decision.indices.shape
    slots = np.zeros((tokens, k, h.shape[-1]), dtype=h.dtype)
    for j in np.unique(decision.indices):
        rows, cols = np.nonzero(decision.indices == j)
        y = expert_forward(pool.routed[j], h[rows])
        slots[rows, cols] = decision.weights[rows, cols][:, None] * y
    out = np.zeros_like(h)
    for s in range(k):
        out += slots[:, s]
    for e in pool.shared:
        out += expert_forward(e, h)
    return check_finite(out, "moe block")


def moe_block_standard(
    pool: ExpertPool,
    router: RouterParams,
    h: Tensor,
    k: int,
    layer_index: int = -1,
    trace: list | None = None,
) -> Tensor:
    if router.n_experts != pool.n_experts:
        raise ConfigError(f"router addresses {router.n_experts} experts, pool holds {pool.n_experts}")
    decision = route_topk(router, h, k, source_layer=layer_index)
    if trace is not None:
        trace.append(decision)
    return _combine(pool, decision, h)


def group_of(layer_index: int, group_size: int, n_dense_leading: int = 0) -> int:
    """Pool index of an MoE layer; dense leading layers are not counted."""
    if layer_index < n_dense_leading:
        raise ConfigError(f"layer {layer_index} is a dense layer and has no expert pool")
    return (layer_index - n_dense_leading) // group_size


def moe_block_shared(
    pools: list[ExpertPool],
    layer_index: int,
    group_size: int,
    router: RouterParams,
    h: Tensor,
    k: int,
    n_dense_leading: int = 0,
    shared: list[ExpertParams] | None = None,
    trace: list | None = None,
) -> Tensor:
    g = group_of(layer_index, group_size, n_dense_leading)
    if not 0 <= g < len(pools):
        raise ConfigError(f"layer {layer_index} maps to group {g}, only {len(pools)} pools")
    pool = pools[g] if shared is None else pools[g].with_shared(shared)
    decision = route_topk(router, h, k, source_layer=layer_index)
    if router.n_experts != pool.n_experts:
        raise ConfigError(f"router addresses {router.n_experts} experts, pool holds {pool.n_experts}")
    if trace is not None:
        trace.append(decision)
    return _combine(pool, decision, h)


def moe_block_pregated(
    pool: ExpertPool,
    router_prev: RouterParams,
    h: Tensor,
    k: int,
    layer_index: int,
    trace: list | None = None,
) -> Tensor:
    """Layer ``layer_index`` aggregated with the gate of ``router_prev`` on its own input."""
    if router_prev.n_experts != pool.n_experts:
        raise ConfigError(
            f"router addresses {router_prev.n_experts} experts, pool holds {pool.n_experts}"
        )
    decision = route_topk(router_prev, h, k, source_layer=layer_index - 1)
    if trace is not None:
        trace.append(decision)
    return _combine(pool, decision, h)


# ---------------------------------------------------------------------------
# Backward pass for one block.  Selection indices are treated as constants;
# gradients reach the router through the renormalized softmax of the
# selected entries.


@dataclass
class ExpertGrads:
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor


@dataclass
class BlockRecord:
    """Everything ``moe_block_backward`` needs from the forward pass."""

    h: Tensor
    router: RouterParams
    pool: ExpertPool
    decision: GateDecision
    # per selected expert id: (rows, slot columns, pre-activation gate, up, expert output)
    routed_acts: dict[int, tuple]
    shared_acts: list[tuple]


@dataclass
class BlockGrads:
    h: Tensor
    router_weight: Tensor
    router_bias: Tensor | None
    routed: dict[int, ExpertGrads]
    shared: list[ExpertGrads]


def _expert_acts(e: ExpertParams, h: Tensor) -> tuple:
    a = matmul(h, e.w_gate)
    u = matmul(h, e.w_up)
    y = matmul(silu(a) * u, e.w_down)
    return a, u, y


def _expert_backward(e: ExpertParams, h: Tensor, a: Tensor, u: Tensor, gy: Tensor):
    s = a * sigmoid(a)
    m = s * u
    dm = matmul(gy, e.w_down.T)
    da = dm * u * silu_grad(a)
    du = dm * s
    grads = ExpertGrads(
        w_gate=matmul(h.T, da),
        w_up=matmul(h.T, du),
        w_down=matmul(m.T, gy),
    )
    dh = matmul(da, e.w_gate.T) + matmul(du, e.w_up.T)
    return grads, dh


def moe_block_forward(
    pool: ExpertPool, router: RouterParams, h: Tensor, k: int, source_layer: int = -1
) -> tuple[Tensor, BlockRecord]:
    """Same output as ``moe_block_standard`` with the activations kept for backward."""
    if router.n_experts != pool.n_experts:
        raise ConfigError(f"router addresses {router.n_experts} experts, pool holds {pool.n_experts}")
    decision = route_topk(router, h, k, source_layer)
    tokens, k = decision.indices.shape
    slots = np.zeros((tokens, k, h.shape[-1]), dtype=h.dtype)
    routed_acts = {}
    for j in np.unique(decision.indices):
        rows, cols = np.nonzero(decision.indices == j)
        a, u, y = _expert_acts(pool.routed[j], h[rows])
        routed_acts[int(j)] = (rows, cols, a, u, y)
        slots[rows, cols] = decision.weights[rows, cols][:, None] * y
    out = np.zeros_like(h)
    for s in range(k):
        out += slots[:, s]
    shared_acts = []
    for e in pool.shared:
        a, u, y = _expert_acts(e, h)
        shared_acts.append((a, u))
        out += y
    record = BlockRecord(h, router, pool, decision, routed_acts, shared_acts)
    return check_finite(out, "moe block"), record


def moe_block_backward(record: BlockRecord | None, grad_out: Tensor) -> BlockGrads:
    if record is None or record.decision.probs is None:
        raise StateError("moe_block_backward needs the record of a forward pass")
    h, dec = record.h, record.decision
    if grad_out.shape != h.shape:
        raise ConfigError(f"upstream gradient shape {grad_out.shape} != {h.shape}")

    dh = np.zeros_like(h)
    gw = np.zeros_like(dec.weights)  # dL/d(renormalized weight) per slot
    routed = {}
    for j, (rows, cols, a, u, y) in record.routed_acts.items():
        gw[rows, cols] = np.sum(grad_out[rows] * y, axis=-1)
        gy = dec.weights[rows, cols][:, None] * grad_out[rows]
        grads, dh_rows = _expert_backward(record.pool.routed[j], h[rows], a, u, gy)
        routed[j] = grads
        np.add.at(dh, rows, dh_rows)
    shared = []
    for e, (a, u) in zip(record.pool.shared, record.shared_acts):
        grads, dh_e = _expert_backward(e, h, a, u, grad_out)
        shared.append(grads)
        dh += dh_e

    # w_s = p_s / P over the selected slots, P = sum of selected p
    probs = dec.probs
    picked = np.take_along_axis(probs, dec.indices, axis=-1)
    total = np.sum(picked, axis=-1, keepdims=True)
    centered = gw - np.sum(gw * dec.weights, axis=-1, keepdims=True)
    gp = np.zeros_like(probs)
    np.put_along_axis(gp, dec.indices, centered / total, axis=-1)
    # softmax backward: dz = p * (gp - <p, gp>)
    dz = probs * (gp - np.sum(probs * gp, axis=-1, keepdims=True))

    router = record.router
    dh += matmul(dz, router.weight.T)
    return BlockGrads(
        h=dh,
        router_weight=matmul(h.T, dz),
        router_bias=None if router.bias is None else np.sum(dz, axis=0),
        routed=routed,
        shared=shared,
    )


def switch_aux_loss(decision: GateDecision, coeff: float = 0.0) -> float:
    """Switch-style balance penalty ``coeff * M * sum_j f_j * P_j``.

    ``f_j`` is the fraction of slot assignments given to expert ``j`` and
    ``P_j`` the mean router probability.  Off by default (``coeff=0``).
    """
    if decision.probs is None:
        raise StateError("auxiliary loss needs router probabilities")
    m = decision.probs.shape[1]
    counts = np.bincount(decision.indices.reshape(-1), minlength=m)
    frac = counts / decision.indices.size
    mean_prob = np.mean(decision.probs, axis=0)
    return float(coeff * m * np.sum(frac * mean_prob))
