"""Command line entry point.

Exit codes: 0 success, 1 domain failure (invalid config, failed check,
rejected input), 2 I/O or parse error.  Reports are JSON on stdout unless
``--out`` is given; every report carries a ``manifest`` block.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from fractions import Fraction

import numpy as np

from . import __version__
from .cachesim import MODES, DeviceSpec, SelectionTrace, compare_modes, simulate
from .checks import SUITES
from .model import (
    PRESET_ASSUMED_FIELDS,
    InputError,
    ModelConfig,
    build,
    count_params,
    forward,
    preset_config,
    save_tensors,
    validate,
)
from .moe import ConfigError
from .tensor import Rng

# refuse to instantiate anything bigger; the full-size preset is accounting-only
MAX_BUILD_PARAMS = 50_000_000

DEFAULT_DEVICE = {
    "cache_capacity_experts": 16,
    "load_time_per_expert": 1.0,
    "attn_compute_time_per_layer": 2.0,
    "expert_compute_time_per_expert": 0.25,
    "overlap_enabled": True,
}


class DomainError(Exception):
    """Reported with exit code 1."""


def _read_json(path):
    with open(path) as f:
        return json.load(f)


def resolve_config(args) -> tuple[ModelConfig, tuple[str, ...]]:
    data = {}
    preset = args.preset
    if args.config:
        data = _read_json(args.config)
        if not isinstance(data, dict):
            raise ValueError(f"{args.config}: config must be a JSON object")
        preset = data.pop("preset", preset)
    try:
        base = preset_config(preset) if preset else ModelConfig()
        cfg = ModelConfig.from_dict({**base.to_dict(), **data})
    except (ConfigError, TypeError) as exc:
        raise DomainError(str(exc)) from None
    if getattr(args, "mode", None):
        cfg = cfg.replace(routing_mode=args.mode)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    assumed = tuple(f for f in PRESET_ASSUMED_FIELDS.get(preset, ()) if f not in data)
    return cfg, assumed


def manifest(args, cfg: ModelConfig, started: float, inputs=None, outputs=None) -> dict:
    return {
        "subcommand": args.command,
        "config": cfg.to_dict(),
        "preset": args.preset,
        "seed": cfg.seed,
        "tool_version": __version__,
        "inputs": inputs or {},
        "outputs": outputs or {},
        # excluded by default so that repeated runs are byte-identical
        "wall_clock_s": round(time.perf_counter() - started, 6) if args.timing else None,
    }


def emit(doc: dict, out: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if out:
        with open(out, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def _require_valid(cfg: ModelConfig) -> None:
    problems = validate(cfg)
    if problems:
        raise DomainError("invalid config: " + "; ".join(map(str, problems)))


def _require_buildable(cfg: ModelConfig) -> None:
    n = count_params(cfg).stored_total
    if n > MAX_BUILD_PARAMS:
        raise DomainError(f"config stores {n:,} parameters; only configs up to {MAX_BUILD_PARAMS:,} are instantiated")


def _read_tokens(path) -> np.ndarray:
    with open(path) as f:
        text = f.read()
    try:
        values = json.loads(text)
    except json.JSONDecodeError:
        values = text.split()
    try:
        return np.array([int(v) for v in values], dtype=np.int64)
    except (TypeError, ValueError):
        raise ValueError(f"{path}: tokens must be a JSON list or whitespace-separated integers") from None


def _tokens(args, cfg: ModelConfig) -> tuple[np.ndarray, dict]:
    if args.tokens:
        return _read_tokens(args.tokens), {"tokens": args.tokens}
    n = min(16, cfg.seq_len_max)
    return Rng(cfg.seed).child("cli.tokens").integers(0, cfg.vocab_size, n), {"tokens": f"generated:{n}"}


def cmd_validate(args, started) -> int:
    cfg, assumed = resolve_config(args)
    problems = validate(cfg)
    doc = {
        "manifest": manifest(args, cfg, started, {"config": args.config}),
        "ok": not problems,
        "violations": [{"field": v.field, "message": v.message} for v in problems],
        "assumed_fields": list(assumed),
    }
    if not problems:
        doc["derived"] = {"n_moe_layers": cfg.n_moe_layers, "n_groups": cfg.n_groups, "n_pools": cfg.n_pools}
    emit(doc, args.out)
    for v in problems:
        print(f"violation: {v}", file=sys.stderr)
    return 0 if not problems else 1


def cmd_forward(args, started) -> int:
    cfg, _ = resolve_config(args)
    _require_valid(cfg)
    _require_buildable(cfg)
    tokens, inputs = _tokens(args, cfg)
    out_path = args.out or "logits.bin"
    routing: list = []
    try:
        logits = forward(build(cfg), tokens, trace=routing)
    except InputError as exc:
        raise DomainError(str(exc)) from None
    man = manifest(args, cfg, started, {"config": args.config, **inputs}, {"logits": out_path})
    save_tensors(out_path, {"logits": logits, "token_ids": tokens}, {"manifest": man})
    emit({"manifest": man, "logits_shape": list(logits.shape), "moe_layers_routed": len(routing)}, None)
    return 0


def cmd_params(args, started) -> int:
    cfg, assumed = resolve_config(args)
    _require_valid(cfg)
    reports = {mode: count_params(cfg.replace(routing_mode=mode), assumed) for mode in MODES}
    ratio = Fraction(reports["shared"].stored["routed_experts"], reports["standard"].stored["routed_experts"])
    doc = {
        "manifest": manifest(args, cfg, started, {"config": args.config}),
        "report": count_params(cfg, assumed).to_dict(),
        "modes": {m: r.to_dict() for m, r in reports.items()},
        "routed_stored_ratio_shared_over_standard": str(ratio),
        "routed_ratio_is_one_over_group_size": ratio == Fraction(1, cfg.group_size),
        "activated_equal_across_modes": len({r.activated_per_token for r in reports.values()}) == 1,
    }
    if assumed:
        doc["banner"] = ("ASSUMED FIELDS: " + ", ".join(assumed)
                         + " are not published; totals are illustrative and not compared to reported sizes")
        print(doc["banner"], file=sys.stderr)
    if doc["report"]["stored_total"] <= MAX_BUILD_PARAMS:
        walked = sum(arr.size for _, arr in build(cfg).named_parameters())
        doc["allocation_walk"] = {"stored_total": walked, "matches": walked == doc["report"]["stored_total"]}
    emit(doc, args.out)
    return 0


def cmd_simulate(args, started) -> int:
    cfg, _ = resolve_config(args)
    try:
        device = DeviceSpec.from_dict({**DEFAULT_DEVICE, **(_read_json(args.device) if args.device else {})})
    except TypeError as exc:
        raise ValueError(f"device spec: {exc}") from None
    inputs = {"config": args.config, "device": args.device}
    try:
        if args.trace:
            with open(args.trace) as f:
                trace = SelectionTrace.loads(f.read())
            reports = {"trace": simulate(trace, device, args.policy)}
            inputs["trace"] = args.trace
        else:
            _require_valid(cfg)
            _require_buildable(cfg)
            modes = MODES if args.modes == "all" else tuple(args.modes.split(","))
            unknown = set(modes) - set(MODES)
            if unknown:
                raise DomainError(f"unknown modes: {', '.join(sorted(unknown))}")
            tokens, tok_inputs = _tokens(args, cfg)
            inputs.update(tok_inputs)
            reports = compare_modes(cfg, device, tokens, args.policy, modes)
    except (ConfigError, InputError) as exc:
        raise DomainError(str(exc)) from None

    outputs = {}
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        for name, rep in reports.items():
            path = os.path.join(args.out, f"timeline_{name.replace('/', '_')}.csv")
            with open(path, "w") as f:
                f.write(rep.timeline_csv())
            outputs[name] = path
        outputs["report"] = os.path.join(args.out, "report.json")
    doc = {
        "manifest": manifest(args, cfg, started, inputs, outputs),
        "device": dataclasses.asdict(device),
        "reports": {name: rep.summary() for name, rep in reports.items()},
    }
    emit(doc, outputs.get("report"))
    return 0


def cmd_check(args, started) -> int:
    cfg, _ = resolve_config(args)
    names = list(SUITES) if args.suite == "all" else [args.suite]
    results = {name: [r.to_dict() for r in SUITES[name]()] for name in names}
    passed = all(r["passed"] for rs in results.values() for r in rs)
    emit({"manifest": manifest(args, cfg, started, {"suite": args.suite}), "passed": passed, "suites": results},
         args.out)
    for rs in results.values():
        for r in rs:
            print(f"{'PASS' if r['passed'] else 'FAIL'}  {r['name']}", file=sys.stderr)
    return 0 if passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="megrez-moe", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (may name a preset)")
    common.add_argument("--preset", choices=sorted(PRESET_ASSUMED_FIELDS), help="start from a named preset")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output path (directory for simulate)")
    common.add_argument("--timing", action="store_true", help="record wall-clock time in the manifest")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("validate", parents=[common], help="check a config")
    p = sub.add_parser("forward", parents=[common], help="run a forward pass, write logits")
    p.add_argument("--tokens", help="token ids: JSON list or whitespace-separated")
    p.add_argument("--mode", choices=MODES)
    p = sub.add_parser("params", parents=[common], help="stored and activated parameter counts")
    p.add_argument("--mode", choices=MODES)
    p = sub.add_parser("simulate", parents=[common], help="expert cache / prefetch simulation")
    p.add_argument("--device", help="JSON device spec")
    p.add_argument("--modes", default="all", help="'all' or comma-separated routing modes")
    p.add_argument("--tokens", help="token ids for the traced forward")
    p.add_argument("--trace", help="simulate a trace file instead of tracing a model")
    p.add_argument("--policy", default="lru", choices=("lru", "fifo", "belady"))
    p = sub.add_parser("check", parents=[common], help="run an invariant suite")
    p.add_argument("--suite", default="all", choices=[*SUITES, "all"])
    return parser


COMMANDS = {
    "validate": cmd_validate,
    "forward": cmd_forward,
    "params": cmd_params,
    "simulate": cmd_simulate,
    "check": cmd_check,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    started = time.perf_counter()
    try:
        return COMMANDS[args.command](args, started)
    except (DomainError, ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
