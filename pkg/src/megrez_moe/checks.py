"""Property suites behind ``megrez-moe check``.

Each suite returns a list of ``CheckResult``; results carry only
deterministic numbers so that reports are byte-stable across runs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .model import ModelConfig, build, forward
from .moe import ExpertParams, ExpertPool, GateDecision, RouterParams, moe_block_backward, moe_block_forward
from .tensor import Rng, finite_diff_grad
from .train_utils import balance_metrics, build_packed_batch

GRAD_EPS = 1e-5
GRAD_TOL = 1e-5
# Coordinates smaller than this are held to GRAD_TOL * GRAD_FLOOR absolute
# error; central differences at eps=1e-5 carry ~1e-10 rounding noise, which
# would swamp a pure ratio on gradients that are exactly zero.
GRAD_FLOOR = 1e-3
PACKING_TOL = 1e-10


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)

    def __post_init__(self):
        self.passed = bool(self.passed)  # numpy bools are not JSON-serializable

    def to_dict(self) -> dict:
        return asdict(self)


def toy_config(**changes) -> ModelConfig:
    base = ModelConfig(n_layers=4, n_dense_leading=1, group_size=3, d_model=16, n_heads=2, d_head=8,
                       routed_experts_per_group=8, top_k=2, shared_experts_per_layer=1, d_expert=8,
                       d_dense_ffn=32, vocab_size=32, seq_len_max=64)
    return base.replace(**changes)


def tie_pregated_routers(pregated, shared) -> None:
    """Give every pre-gate router the parameters of the router it replaces."""
    for layer in shared.layers:
        if layer.router is not None:
            pregated.layers[layer.index - 1].router = layer.router.copy()


def equivalence_suite(seeds=range(20), n_tokens: int = 12) -> list[CheckResult]:
    reduction, tying = [], []
    for seed in seeds:
        tokens = Rng(seed).child("tokens").integers(0, 32, n_tokens)
        cfg = toy_config(group_size=1, seed=seed)
        std = forward(build(cfg.replace(routing_mode="standard")), tokens)
        shr = forward(build(cfg.replace(routing_mode="shared")), tokens)
        reduction.append(bool(np.array_equal(std, shr)))

        cfg = toy_config(group_size=3, seed=seed)
        shared_model = build(cfg.replace(routing_mode="shared"))
        pregated_model = build(cfg.replace(routing_mode="pregated"))
        tie_pregated_routers(pregated_model, shared_model)
        tying.append(bool(np.array_equal(forward(shared_model, tokens), forward(pregated_model, tokens))))
    return [
        CheckResult("n=1 shared equals standard (bitwise)", all(reduction),
                    {"seeds": len(reduction), "identical": sum(reduction)}),
        CheckResult("tied pregated equals shared (bitwise)", all(tying),
                    {"seeds": len(tying), "identical": sum(tying)}),
    ]


def random_block(seed: int, d_model=4, n_experts=4, d_expert=5, n_shared=1, bias=True):
    rng = Rng(seed)

    def mat(name, shape, std=0.7):
        return rng.child(name).normal(shape, std)

    routed = [ExpertParams(mat(f"e{j}.g", (d_model, d_expert)), mat(f"e{j}.u", (d_model, d_expert)),
                           mat(f"e{j}.d", (d_expert, d_model))) for j in range(n_experts)]
    shared = [ExpertParams(mat(f"s{j}.g", (d_model, d_expert)), mat(f"s{j}.u", (d_model, d_expert)),
                           mat(f"s{j}.d", (d_expert, d_model))) for j in range(n_shared)]
    router = RouterParams(mat("router", (d_model, n_experts), 1.5), mat("bias", (n_experts,)) if bias else None)
    return ExpertPool(0, routed, shared), router


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def gradient_check(seed: int, d_model=4, n_experts=4, k=2, tokens=3, eps=GRAD_EPS) -> dict[str, float]:
    """Max relative error of every analytic gradient against central differences.

    The loss is ``sum(out * R)`` for a fixed random ``R``; finite differences
    run the full forward, selection included.
    """
    pool, router = random_block(seed, d_model, n_experts)
    rng = Rng(seed).child("inputs")
    h = rng.normal((tokens, d_model))
    upstream = rng.normal((tokens, d_model))

    out, record = moe_block_forward(pool, router, h, k)
    grads = moe_block_backward(record, upstream)

    def loss() -> float:
        y, _ = moe_block_forward(pool, router, h, k)
        return float(np.sum(y * upstream))

    def fd(arr):
        def f(x):
            saved = arr.copy()
            arr[...] = x
            try:
                return loss()
            finally:
                arr[...] = saved
        return finite_diff_grad(f, arr.copy(), eps)

    errors = {
        "h": relative_error(grads.h, fd(h)),
        "router.weight": relative_error(grads.router_weight, fd(router.weight)),
        "router.bias": relative_error(grads.router_bias, fd(router.bias)),
    }
    for j, g in sorted(grads.routed.items()):
        e = pool.routed[j]
        for name in ("w_gate", "w_up", "w_down"):
            errors[f"expert{j}.{name}"] = relative_error(getattr(g, name), fd(getattr(e, name)))
    for s, g in enumerate(grads.shared):
        e = pool.shared[s]
        for name in ("w_gate", "w_up", "w_down"):
            errors[f"shared{s}.{name}"] = relative_error(getattr(g, name), fd(getattr(e, name)))
    return errors


def gradient_suite(seeds=range(20)) -> list[CheckResult]:
    results = []
    for seed in seeds:
        errors = gradient_check(seed)
        worst = max(errors.values())
        results.append(CheckResult(f"moe block backward vs finite differences, seed {seed}", worst < GRAD_TOL,
                                   {"max_rel_error": worst, "tensors": len(errors)}))
    return results


def random_samples(rng: Rng, n: int, vocab: int, max_sample: int) -> list[list[int]]:
    lengths = rng.integers(1, max_sample + 1, n)
    return [rng.integers(0, vocab, int(n_tok)).tolist() for n_tok in lengths]


def packing_check(seed: int, n_samples: int = 10, max_len: int = 24) -> float:
    """Largest |packed - standalone| logit difference over all samples of one random packing."""
    cfg = toy_config(seed=seed)
    model = build(cfg)
    samples = random_samples(Rng(seed).child("samples"), n_samples, cfg.vocab_size, 8)
    worst = 0.0
    i = 0
    for batch in build_packed_batch(samples, max_len):
        logits = forward(model, batch.token_ids, batch.attention_mask, batch.positions)
        for b in range(len(batch.sample_bounds)):
            alone = forward(model, samples[i])
            worst = max(worst, float(np.max(np.abs(logits[batch.sample_slice(b)] - alone))))
            i += 1
    return worst


def packing_suite(seeds=range(10)) -> list[CheckResult]:
    results = []
    for seed in seeds:
        worst = packing_check(seed)
        results.append(CheckResult(f"packed forward isolates samples, packing {seed}", worst <= PACKING_TOL,
                                   {"max_abs_diff": worst}))
    return results


def balance_suite(seeds=range(10), n_experts: int = 8, k: int = 2, tokens: int = 50) -> list[CheckResult]:
    results = []
    rr = np.arange(n_experts * 4).reshape(-1, 1) % n_experts
    uniform = balance_metrics([GateDecision(rr, np.ones_like(rr, dtype=float))], n_experts)
    results.append(CheckResult("round-robin load is perfectly balanced",
                               uniform.max_over_mean == 1.0 and abs(uniform.entropy - np.log(n_experts)) < 1e-12,
                               {"max_over_mean": uniform.max_over_mean, "entropy": uniform.entropy}))
    collapsed = balance_metrics([GateDecision(np.zeros((tokens, 1), dtype=np.int64), np.ones((tokens, 1)))], n_experts)
    results.append(CheckResult("single-expert load has zero entropy", collapsed.entropy == 0.0,
                               {"entropy": collapsed.entropy}))
    ok = True
    for seed in seeds:
        rng = Rng(seed)
        decisions = []
        for _ in range(3):
            idx = np.stack([rng.permutation(n_experts)[:k] for _ in range(tokens)])
            decisions.append(GateDecision(idx, np.full(idx.shape, 1.0 / k)))
        m = balance_metrics(decisions, n_experts)
        tally = [0] * n_experts
        for d in decisions:
            for row in d.indices.tolist():
                for e in row:
                    tally[e] += 1
        ok &= m.counts.tolist() == tally and int(m.counts.sum()) == 3 * tokens * k
    results.append(CheckResult("counts match a brute-force tally", bool(ok), {"seeds": len(seeds)}))
    return results


SUITES = {
    "equivalence": equivalence_suite,
    "gradients": gradient_suite,
    "packing": packing_suite,
    "balance": balance_suite,
}
