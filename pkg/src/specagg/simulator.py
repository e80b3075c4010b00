"""Deterministic discrete-event model of the two-stream pipeline.

Replays a per-step acceptance trace under parameterized decode and
transmission delays.  Time advances through one recurrence per aggregation:

  * a side whose draft was accepted keeps decoding back to back, so its next
    draft is ready one decode after the previous one finished;
  * a rejected side restarts the moment it learns the outcome (immediately on
    the aggregating node, one target transmission later on the other);
  * an aggregation fires once the aggregator holds both step-u drafts, local
    one at decode completion, remote one after a one-way transmission.

Aggregation itself costs nothing.  Network latency is the per-side constant
plus a shared sinusoidal-jitter term sampled at send time.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .common import Side
from .dists import CompressedDist
from .profiler import DecodeModel
from .scheduler import (
    AcceptanceEstimate,
    CostVector,
    MovingAcceptance,
    choose_side,
    theoretical_speedup,
)
from .rng import derive_seed
from . import transport

STRATEGIES = ("device", "cloud", "random", "dragon")
DEFAULT_JITTER_PERIOD_S = 20.0 * math.pi


@dataclass(frozen=True)
class NetModel:
    """Shared network-latency component added on top of per-side constants.

    Instantaneous one-way latency at time t is base + extra + jitter, with
    jitter_amplitude defaulting to a fifth of the total and the period to
    20*pi seconds.  bandwidth (bytes/ms) adds a size-proportional term; None
    means unmetered.
    """

    base_latency: float = 0.0
    extra_latency: float = 0.0
    jitter_amplitude: float | None = None
    jitter_period_s: float = DEFAULT_JITTER_PERIOD_S
    bandwidth: float | None = None

    def __post_init__(self) -> None:
        if self.base_latency < 0 or self.extra_latency < 0:
            raise ValueError("latencies must be non-negative")
        if self.jitter_period_s <= 0:
            raise ValueError("jitter period must be positive")
        amp = self.amplitude
        if amp < 0 or amp > self.base_latency + self.extra_latency + 1e-12:
            raise ValueError("jitter amplitude must stay within the latency")

    @property
    def amplitude(self) -> float:
        if self.jitter_amplitude is None:
            return (self.base_latency + self.extra_latency) / 5.0
        return self.jitter_amplitude


def instantaneous_latency(net: NetModel, t_seconds: float) -> float:
    """One-way latency (ms) at wall time t (seconds)."""
    if t_seconds < 0:
        raise ValueError("time must be non-negative")
    phase = 2.0 * math.pi * t_seconds / net.jitter_period_s
    return net.base_latency + net.extra_latency + net.amplitude * math.sin(phase)


@dataclass(frozen=True)
class AcceptanceTrace:
    """Replayable per-step (accept_device, accept_cloud) decisions."""

    flags: tuple[tuple[bool, bool], ...]

    def __post_init__(self) -> None:
        if not self.flags:
            raise ValueError("empty trace")

    def __len__(self) -> int:
        return len(self.flags)

    @classmethod
    def bernoulli(
        cls, n: int, p_device: float, p_cloud: float, seed: int
    ) -> "AcceptanceTrace":
        rng = np.random.default_rng(derive_seed(seed, "trace"))
        dev = rng.random(n) < p_device
        cld = rng.random(n) < p_cloud
        return cls(tuple((bool(a), bool(b)) for a, b in zip(dev, cld)))

    @classmethod
    def constant(cls, n: int, accept_device: bool, accept_cloud: bool) -> "AcceptanceTrace":
        return cls(tuple((accept_device, accept_cloud) for _ in range(n)))

    @classmethod
    def load_csv(cls, path: str | Path) -> "AcceptanceTrace":
        rows: list[tuple[int, bool, bool]] = []
        with open(path, "r", newline="", encoding="ascii") as fh:
            for record in csv.reader(fh):
                if not record or not record[0].strip().isdigit():
                    continue  # header or blank
                rows.append((int(record[0]), record[1].strip() == "1", record[2].strip() == "1"))
        rows.sort(key=lambda r: r[0])
        return cls(tuple((a, b) for _, a, b in rows))

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="ascii") as fh:
            writer = csv.writer(fh)
            writer.writerow(("step", "accept_l", "accept_r"))
            for step, (a, b) in enumerate(self.flags):
                writer.writerow((step, int(a), int(b)))


@dataclass(frozen=True)
class SimResult:
    total_time: float
    per_token: tuple[float, ...]
    switches: int
    side_history: tuple[Side, ...]

    def steady_per_token(self, tail: int = 100) -> float:
        tail = min(tail, len(self.per_token))
        return float(sum(self.per_token[-tail:]) / tail)


@lru_cache(maxsize=1)
def default_message_bytes(kept_tokens: int = 32, vocab_size: int = 50_272) -> tuple[int, int]:
    """(draft frame bytes, target frame bytes) from actual wire encodings."""
    ids = np.arange(kept_tokens, dtype=np.uint32)
    vals = np.full(kept_tokens, 1.0 / kept_tokens, dtype=np.float16)
    draft = transport.DraftMsg(
        step=0,
        token=0,
        h=0.0,
        decode_ms=1.0,
        dist=CompressedDist(vocab_size=vocab_size, token_ids=ids, values=vals),
    )
    target = transport.TargetMsg(step=0, target=0, accept_l=True, accept_r=True)
    return len(transport.encode_frame(draft)), len(transport.encode_frame(target))


class _DragonPolicy:
    """Scheduler state for the adaptive strategy: acceptance EMAs per side."""

    def __init__(self) -> None:
        self.rates = {Side.DEVICE: MovingAcceptance(), Side.CLOUD: MovingAcceptance()}

    def next_side(
        self,
        current: Side,
        flags: tuple[bool, bool],
        costs: CostVector,
        net: NetModel,
        now_ms: float,
        draft_bytes: int,
        c_dec: dict[Side, float],
    ) -> Side:
        self.rates[Side.DEVICE].update(flags[0])
        self.rates[Side.CLOUD].update(flags[1])
        shared = instantaneous_latency(net, now_ms / 1000.0)
        if net.bandwidth is not None:
            shared += draft_bytes / net.bandwidth
        remote = current.other
        trans = {
            Side.DEVICE: costs.c_trans_l + shared,
            Side.CLOUD: costs.c_trans_r + shared,
        }
        oriented = CostVector(
            c_dec_l=c_dec[current],
            c_dec_r=c_dec[remote],
            c_trans_l=trans[current],
            c_trans_r=trans[remote],
        )
        acc = AcceptanceEstimate(
            alpha_l=self.rates[current].value, alpha_r=self.rates[remote].value
        )
        return choose_side(current, oriented, acc)


def simulate(
    trace: AcceptanceTrace,
    costs: CostVector,
    net: NetModel,
    strategy: str,
    *,
    seed: int = 0,
    start_side: Side = Side.DEVICE,
    draft_bytes: int | None = None,
    target_bytes: int | None = None,
    decode_models: dict[Side, DecodeModel] | None = None,
    decode_t0: int = 64,
) -> SimResult:
    """Run the recurrence over the whole trace under one strategy.

    Strategies: 'device' / 'cloud' aggregate statically, 'random' re-picks a
    side after every step, 'dragon' follows the greedy latency rule.  The
    device stream maps to the l slot of costs.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if draft_bytes is None or target_bytes is None:
        measured = default_message_bytes()
        draft_bytes = measured[0] if draft_bytes is None else draft_bytes
        target_bytes = measured[1] if target_bytes is None else target_bytes

    trans_const = {Side.DEVICE: costs.c_trans_l, Side.CLOUD: costs.c_trans_r}

    def c_dec(side: Side, step: int) -> float:
        if decode_models is not None and side in decode_models:
            return max(0.0, decode_models[side].predict(decode_t0 + step))
        return costs.c_dec_l if side is Side.DEVICE else costs.c_dec_r

    def one_way(side: Side, at_ms: float, nbytes: int) -> float:
        delay = trans_const[side] + instantaneous_latency(net, at_ms / 1000.0)
        if net.bandwidth is not None:
            delay += nbytes / net.bandwidth
        return delay

    rng = np.random.default_rng(derive_seed(seed, "strategy"))
    dragon = _DragonPolicy() if strategy == "dragon" else None

    agg = start_side if strategy in ("random", "dragon") else Side(strategy)
    agg_free = 0.0
    ready = {s: c_dec(s, 0) for s in Side}
    per_token: list[float] = []
    history: list[Side] = []
    switches = 0
    t_prev = 0.0

    for step, flags in enumerate(trace.flags):
        remote = agg.other
        local_avail = ready[agg]
        remote_avail = ready[remote] + one_way(remote, ready[remote], draft_bytes)
        t_now = max(agg_free, local_avail, remote_avail)

        accepted = {Side.DEVICE: flags[0], Side.CLOUD: flags[1]}
        outcome_known = {agg: t_now, remote: t_now + one_way(agg, t_now, target_bytes)}

        for s in Side:
            base = ready[s] if accepted[s] else outcome_known[s]
            ready[s] = base + c_dec(s, step + 1)

        history.append(agg)
        per_token.append(t_now - t_prev)
        t_prev = t_now

        if strategy == "random":
            nxt = Side.DEVICE if rng.random() < 0.5 else Side.CLOUD
        elif dragon is not None:
            nxt = dragon.next_side(
                agg,
                flags,
                costs,
                net,
                t_now,
                draft_bytes,
                {s: c_dec(s, step + 1) for s in Side},
            )
        else:
            nxt = agg
        if nxt is not agg:
            switches += 1
            agg_free = outcome_known[nxt]
        else:
            agg_free = t_now
        agg = nxt

    return SimResult(
        total_time=t_prev,
        per_token=tuple(per_token),
        switches=switches,
        side_history=tuple(history),
    )


@dataclass(frozen=True)
class SpeedupPoint:
    costs: CostVector
    alpha_r: float
    empirical: float
    theoretical: float


def speedup_curve(
    cost_grid: list[CostVector],
    alpha_grid: list[float],
    tokens: int = 10_000,
    seed: int = 0,
    net: NetModel | None = None,
) -> list[SpeedupPoint]:
    """Empirical vs closed-form speedup over all-reject synchronization.

    Aggregation stays on the device side; the replayed traces accept remote
    drafts with rate alpha_r and always reject local ones, matching the
    closed form's independence from the local rate.
    """
    net = net or NetModel()
    vanilla_trace = AcceptanceTrace.constant(tokens, False, False)
    out: list[SpeedupPoint] = []
    for costs in cost_grid:
        vanilla = simulate(vanilla_trace, costs, net, "device", seed=seed)
        for i, alpha in enumerate(alpha_grid):
            trace = AcceptanceTrace.bernoulli(tokens, 0.0, alpha, derive_seed(seed, "curve", i))
            run = simulate(trace, costs, net, "device", seed=seed)
            out.append(
                SpeedupPoint(
                    costs=costs,
                    alpha_r=alpha,
                    empirical=vanilla.total_time / run.total_time,
                    theoretical=theoretical_speedup(costs, alpha),
                )
            )
    return out
