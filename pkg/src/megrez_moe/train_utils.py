"""Fine-tuning mechanics: turn-level loss, sample packing, routing balance."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .model import InputError
from .tensor import Tensor


class SegmentationError(ValueError):
    pass


@dataclass(frozen=True)
class Turn:
    start: int
    end: int  # exclusive
    trainable: bool = True

    def __len__(self):
        return self.end - self.start


@dataclass
class TurnSegmentation:
    """Turns of each sample in one packed sequence, all in sequence coordinates."""

    samples: list[list[Turn]]

    def turns(self) -> list[Turn]:
        return [t for sample in self.samples for t in sample]

    def check(self, length: int) -> None:
        prev_end = 0
        for t in self.turns():
            if t.start < prev_end or t.end < t.start or t.end > length:
                raise SegmentationError(f"turn [{t.start}, {t.end}) overlaps, is unordered, or leaves [0, {length})")
            prev_end = t.end

    def dumps(self) -> str:
        lines = []
        for s, sample in enumerate(self.samples):
            for t in sample:
                lines.append(json.dumps({"sample": s, "start": t.start, "end": t.end, "trainable": t.trainable}))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "TurnSegmentation":
        samples: dict[int, list[Turn]] = {}
        for line in text.splitlines():
            if line.strip():
                r = json.loads(line)
                samples.setdefault(int(r["sample"]), []).append(
                    Turn(int(r["start"]), int(r["end"]), bool(r.get("trainable", True))))
        return cls([samples[s] for s in sorted(samples)])


def turn_level_loss(token_losses: Tensor, seg: TurnSegmentation) -> float:
    """Mean over trainable turns of each turn's mean token loss.

    Every turn is normalized by its own length, so a short turn weighs as much
    as a long one.  Non-trainable turns and tokens outside any turn are ignored.
    """
    token_losses = np.asarray(token_losses, dtype=np.float64)
    seg.check(token_losses.shape[0])
    per_turn = []
    for t in seg.turns():
        if not t.trainable:
            continue
        if len(t) == 0:
            raise SegmentationError(f"trainable turn [{t.start}, {t.end}) is empty")
        per_turn.append(math.fsum(token_losses[t.start : t.end]) / len(t))
    if not per_turn:
        raise SegmentationError("no trainable turns")
    return math.fsum(per_turn) / len(per_turn)


@dataclass
class PackedBatch:
    token_ids: np.ndarray
    sample_bounds: list[tuple[int, int]]  # half-open, in sequence coordinates
    positions: np.ndarray
    attention_mask: np.ndarray  # [query, key] True where visible
    sample_ids: np.ndarray = field(repr=False, default=None)  # -1 marks padding

    def sample_slice(self, i: int) -> slice:
        start, end = self.sample_bounds[i]
        return slice(start, end)


def block_causal_mask(sample_ids: np.ndarray) -> np.ndarray:
    """Causal within each sample, nothing across samples; padding sees only itself."""
    n = sample_ids.shape[0]
    same = sample_ids[:, None] == sample_ids[None, :]
    mask = same & np.tril(np.ones((n, n), dtype=bool))
    pad = sample_ids < 0
    mask[pad, :] = False
    mask[pad, pad] = True
    return mask


def _pack_one(samples: list[list[int]], max_len: int, pad_id: int | None) -> PackedBatch:
    ids, sid, pos, bounds = [], [], [], []
    for i, s in enumerate(samples):
        bounds.append((len(ids), len(ids) + len(s)))
        ids.extend(s)
        sid.extend([i] * len(s))
        pos.extend(range(len(s)))
    if pad_id is not None and len(ids) < max_len:
        extra = max_len - len(ids)
        ids.extend([pad_id] * extra)
        sid.extend([-1] * extra)
        pos.extend([0] * extra)
    sample_ids = np.array(sid, dtype=np.int64)
    return PackedBatch(np.array(ids, dtype=np.int64), bounds, np.array(pos, dtype=np.int64),
                       block_causal_mask(sample_ids), sample_ids)


def build_packed_batch(samples: list[list[int]], max_len: int, pad_id: int | None = None) -> list[PackedBatch]:
    """Greedy in-order packing into sequences of at most ``max_len`` tokens.

    With ``pad_id`` set, each sequence is padded to exactly ``max_len``.
    """
    for i, s in enumerate(samples):
        if len(s) == 0 or len(s) > max_len:
            raise InputError(f"sample {i} has length {len(s)}, must be in [1, {max_len}]")
    out, current, used = [], [], 0
    for s in samples:
        if used + len(s) > max_len:
            out.append(_pack_one(current, max_len, pad_id))
            current, used = [], 0
        current.append(list(s))
        used += len(s)
    if current:
        out.append(_pack_one(current, max_len, pad_id))
    return out


@dataclass
class BalanceMetrics:
    counts: np.ndarray
    max_over_mean: float
    entropy: float

    def to_dict(self) -> dict:
        return {"counts": self.counts.tolist(), "max_over_mean": self.max_over_mean, "entropy": self.entropy}


def balance_metrics(decisions, n_experts: int) -> BalanceMetrics:
    """Per-expert assignment counts, their max/mean ratio, and the entropy (nats) of the load."""
    if not decisions:
        raise ValueError("balance_metrics needs at least one gate decision")
    counts = np.zeros(n_experts, dtype=np.int64)
    for d in decisions:
        counts += np.bincount(np.asarray(d.indices).reshape(-1), minlength=n_experts)
    total = int(counts.sum())
    mean = total / n_experts
    frac = counts[counts > 0] / total
    entropy = 0.0 - float(np.sum(frac * np.log(frac)))
    return BalanceMetrics(counts, float(counts.max() / mean), entropy)
