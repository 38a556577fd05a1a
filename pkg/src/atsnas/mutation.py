"""Swap and replace mutations plus the per-block parameter budget."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Iterable, Optional, Union

import numpy as np

from .genome import (
    ArchitectureGenome,
    LayerSpec,
    SearchSpaceConfig,
    block_input_channels,
    block_param_count,
    canonical_hash,
    validate,
)


class MutationRejected(ValueError):
    """The mutated genome cannot be made valid."""


class InvalidMutationError(ValueError):
    """The requested mutation uses options outside the search space."""


class SearchSpaceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SwapLayers:
    slot_a: int
    slot_b: int

    def to_dict(self) -> dict:
        return {"type": "swap", "slot_a": self.slot_a, "slot_b": self.slot_b}


@dataclass(frozen=True)
class ReplaceLayer:
    slot: int
    layer: LayerSpec
    repeats: Optional[int] = None

    def to_dict(self) -> dict:
        return {"type": "replace", "slot": self.slot, "layer": self.layer.to_dict(), "repeats": self.repeats}


MutationOp = Union[SwapLayers, ReplaceLayer]


@dataclass(frozen=True)
class MutationRecord:
    parent_hash: str
    child_hash: str
    op: MutationOp
    rebalanced: bool

    def to_json(self) -> str:
        return json.dumps(
            {"parent": self.parent_hash, "child": self.child_hash, "op": self.op.to_dict(), "rebalanced": self.rebalanced},
            sort_keys=True,
        )


def _check_slot(genome: ArchitectureGenome, slot: int) -> None:
    if not 0 <= slot < len(genome.blocks):
        raise IndexError(f"slot {slot} out of range for {len(genome.blocks)} blocks")


def rebalance(genome: ArchitectureGenome, budget: int, config: SearchSpaceConfig) -> ArchitectureGenome:
    """Shrink out_channels until every block fits ``budget``.

    Greedy: the block with the largest overshoot is cut first, to the widest
    channel option that fits and keeps residual skips shape-compatible.
    Channels only ever decrease.  Raises ``MutationRejected`` when no such
    option exists.
    """
    if budget is None:
        return genome
    if budget < 1:
        raise MutationRejected(f"budget {budget} cannot be met by any block")
    current = genome
    while True:
        costs = [
            block_param_count(cin, b.layer, b.repeats, config.expansion)
            for cin, b in zip(block_input_channels(current), current.blocks)
        ]
        over = [(cost - budget, -slot) for slot, cost in enumerate(costs) if cost > budget]
        if not over:
            return current
        _, neg_slot = max(over)
        slot = -neg_slot
        block = current.blocks[slot]
        cin = block_input_channels(current)[slot]
        for c in sorted((c for c in config.channels if c < block.layer.out_channels), reverse=True):
            layer = LayerSpec(block.layer.conv_op, block.layer.ksize, block.layer.se_ratio, block.layer.skip, c)
            if block_param_count(cin, layer, block.repeats, config.expansion) > budget:
                continue
            candidate = current.with_layer(slot, layer)
            if validate(candidate).ok:
                current = candidate
                break
        else:
            raise MutationRejected(
                f"slot {slot} {block.label}: no channel option fits budget {budget}"
            )


def _finish(child: ArchitectureGenome, config: Optional[SearchSpaceConfig]) -> tuple[ArchitectureGenome, bool]:
    rebalanced = False
    if config is not None and config.block_budget is not None:
        fixed = rebalance(child, config.block_budget, config)
        rebalanced = fixed != child
        child = fixed
    report = validate(child, config)
    if not report.ok:
        raise MutationRejected("; ".join(report.violations))
    return child, rebalanced


def _swap(genome, slot_a, slot_b):
    _check_slot(genome, slot_a)
    _check_slot(genome, slot_b)
    a, b = genome.blocks[slot_a].layer, genome.blocks[slot_b].layer
    return genome.with_layer(slot_a, b).with_layer(slot_b, a)


def _replace(genome, slot, new_layer, repeats, config):
    _check_slot(genome, slot)
    if config is not None:
        bad = []
        if new_layer.conv_op not in config.conv_ops:
            bad.append(f"conv_op={new_layer.conv_op.value}")
        if new_layer.ksize not in config.kernel_sizes:
            bad.append(f"ksize={new_layer.ksize}")
        if new_layer.se_ratio not in config.se_ratios:
            bad.append(f"se_ratio={new_layer.se_ratio}")
        if new_layer.skip not in config.skips:
            bad.append(f"skip={new_layer.skip.value}")
        if new_layer.out_channels not in config.channels:
            bad.append(f"out_channels={new_layer.out_channels}")
        if repeats is not None and repeats not in config.repeats:
            bad.append(f"repeats={repeats}")
        if bad:
            raise InvalidMutationError("not in the option lists: " + ", ".join(bad))
    return genome.with_layer(slot, new_layer, repeats)


def apply_swap(genome: ArchitectureGenome, slot_a: int, slot_b: int,
               config: Optional[SearchSpaceConfig] = None) -> ArchitectureGenome:
    """Exchange the layer specs of two blocks (repeat counts stay in place)."""
    return _finish(_swap(genome, slot_a, slot_b), config)[0]


def apply_replace(genome: ArchitectureGenome, slot: int, new_layer: LayerSpec,
                  config: Optional[SearchSpaceConfig] = None, repeats: Optional[int] = None) -> ArchitectureGenome:
    return _finish(_replace(genome, slot, new_layer, repeats, config), config)[0]


def apply_mutation(genome: ArchitectureGenome, op: MutationOp,
                   config: Optional[SearchSpaceConfig] = None) -> tuple[ArchitectureGenome, bool]:
    """Apply ``op``; returns the child and whether rebalancing changed it."""
    if isinstance(op, SwapLayers):
        child = _swap(genome, op.slot_a, op.slot_b)
    else:
        child = _replace(genome, op.slot, op.layer, op.repeats, config)
    return _finish(child, config)


def _draw_op(rng: np.random.Generator, genome: ArchitectureGenome, config: SearchSpaceConfig) -> MutationOp:
    if rng.integers(2) == 0:
        a, b = rng.choice(len(genome.blocks), size=2, replace=False)
        return SwapLayers(int(a), int(b))
    layer = LayerSpec(
        conv_op=config.conv_ops[rng.integers(len(config.conv_ops))],
        ksize=config.kernel_sizes[rng.integers(len(config.kernel_sizes))],
        se_ratio=config.se_ratios[rng.integers(len(config.se_ratios))],
        skip=config.skips[rng.integers(len(config.skips))],
        out_channels=config.channels[rng.integers(len(config.channels))],
    )
    return ReplaceLayer(int(rng.integers(len(genome.blocks))), layer, config.repeats[rng.integers(len(config.repeats))])


def propose_children(
    genome: ArchitectureGenome,
    config: SearchSpaceConfig,
    seed,
    n: int = 8,
    exclude: Iterable[str] = (),
    max_attempts: Optional[int] = None,
) -> list[tuple[ArchitectureGenome, MutationRecord]]:
    """Up to ``n`` distinct one-mutation children, none equal to the parent
    or hashed in ``exclude``.  Warns with ``SearchSpaceWarning`` when fewer
    than ``n`` could be found within ``max_attempts`` draws."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if max_attempts is None:
        max_attempts = 50 * n + 200
    rng = np.random.default_rng(seed)
    parent_hash = canonical_hash(genome)
    seen = {parent_hash, *exclude}
    out = []
    for _ in range(max_attempts):
        if len(out) == n:
            break
        op = _draw_op(rng, genome, config)
        if isinstance(op, SwapLayers) and genome.blocks[op.slot_a].layer == genome.blocks[op.slot_b].layer:
            continue
        try:
            child, rebalanced = apply_mutation(genome, op, config)
        except (MutationRejected, InvalidMutationError):
            continue
        h = canonical_hash(child)
        if h in seen:
            continue
        seen.add(h)
        out.append((child, MutationRecord(parent_hash, h, op, rebalanced)))
    if len(out) < n:
        warnings.warn(
            f"only {len(out)} of {n} distinct children found for {parent_hash[:12]}",
            SearchSpaceWarning,
            stacklevel=2,
        )
    return out
