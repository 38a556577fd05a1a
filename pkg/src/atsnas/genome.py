"""Search-space encoding for the pyramid backbone.

A genome fixes the contents of every block slot of a multi-scale
encoder/decoder backbone.  The backbone itself is not searched: each scale
holds two encoder blocks, two decoder blocks and a refine block, and every
scale below the first also has a downsample block (entering it) and an
upsample block (leaving it).  All layers inside a block are identical.

Dataflow (``S`` scales, ``E``/``D``/``R`` = encoder/decoder/refine)::

    image -> E(1,1) -> E(1,2) -> Down(2,6) -> E(2,1) -> ... -> E(S,2)
          -> D(S,3) -> D(S,4) -> R(S,5) -> Up(S,7)
          -> [+ E(S-1,2)] -> D(S-1,3) -> ... -> R(1,5) -> 1x1 head

The coarse-to-fine fusion adds the upsampled coarse features to the
encoder output of the finer scale.  When the two channel counts differ a
fixed (unsearched) 1x1 projection maps the coarse features first.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterator, Optional, Sequence

import numpy as np

SCHEMA_VERSION = 1


class InvalidConfigError(ValueError):
    pass


class InvalidGenomeError(ValueError):
    pass


class ConvOp(str, Enum):
    VANILLA = "Vanilla2D"
    DEPTHWISE = "Depthwise"
    INVERTED_BOTTLENECK = "InvertedBottleneck"


class Skip(str, Enum):
    RESIDUAL = "Residual"
    NONE = "None"


class BlockKind(str, Enum):
    ENCODER = "Encoder"
    DECODER = "Decoder"
    REFINE = "Refine"
    DOWNSAMPLE = "Downsample"
    UPSAMPLE = "Upsample"


# block index j -> kind, in slot order within a scale
_SCALE_LAYOUT = (
    (1, BlockKind.ENCODER),
    (2, BlockKind.ENCODER),
    (3, BlockKind.DECODER),
    (4, BlockKind.DECODER),
    (5, BlockKind.REFINE),
    (6, BlockKind.DOWNSAMPLE),
    (7, BlockKind.UPSAMPLE),
)

ALLOWED_KSIZES = (3, 5)
ALLOWED_SE_RATIOS = (0.0, 0.25)


@dataclass(frozen=True)
class LayerSpec:
    conv_op: ConvOp
    ksize: int
    se_ratio: float
    skip: Skip
    out_channels: int

    def to_dict(self) -> dict:
        return {
            "conv_op": self.conv_op.value,
            "ksize": int(self.ksize),
            "se_ratio": float(self.se_ratio),
            "skip": self.skip.value,
            "out_channels": int(self.out_channels),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(
            conv_op=ConvOp(d["conv_op"]),
            ksize=int(d["ksize"]),
            se_ratio=float(d["se_ratio"]),
            skip=Skip(d["skip"]),
            out_channels=int(d["out_channels"]),
        )


@dataclass(frozen=True)
class BlockSpec:
    kind: BlockKind
    scale: int
    index: int
    repeats: int
    layer: LayerSpec

    @property
    def label(self) -> str:
        return f"{self.kind.value.lower()} ({self.scale},{self.index})"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "scale": int(self.scale),
            "index": int(self.index),
            "repeats": int(self.repeats),
            "layer": self.layer.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BlockSpec":
        return cls(
            kind=BlockKind(d["kind"]),
            scale=int(d["scale"]),
            index=int(d["index"]),
            repeats=int(d["repeats"]),
            layer=LayerSpec.from_dict(d["layer"]),
        )


@dataclass(frozen=True)
class ArchitectureGenome:
    num_scales: int
    blocks: tuple[BlockSpec, ...]
    input_resolution: tuple[int, int, int] = (32, 32, 3)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "num_scales": int(self.num_scales),
            "input_resolution": [int(v) for v in self.input_resolution],
            "blocks": [b.to_dict() for b in self.blocks],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureGenome":
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise InvalidGenomeError(f"unsupported schema_version {version!r}")
        return cls(
            num_scales=int(d["num_scales"]),
            blocks=tuple(BlockSpec.from_dict(b) for b in d["blocks"]),
            input_resolution=tuple(int(v) for v in d["input_resolution"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ArchitectureGenome":
        return cls.from_dict(json.loads(text))

    def with_layer(self, slot: int, layer: LayerSpec, repeats: Optional[int] = None) -> "ArchitectureGenome":
        block = self.blocks[slot]
        new = replace(block, layer=layer, repeats=block.repeats if repeats is None else repeats)
        return replace(self, blocks=self.blocks[:slot] + (new,) + self.blocks[slot + 1:])


@dataclass(frozen=True)
class SearchSpaceConfig:
    """Option lists for one block, shared by every slot of the backbone.

    ``block_budget`` caps the parameter count of any single block (``None``
    disables the constraint).  ``expansion`` is the inverted-bottleneck
    width multiplier; it is fixed, not searched.
    """

    num_scales: int = 3
    conv_ops: tuple[ConvOp, ...] = (ConvOp.VANILLA, ConvOp.DEPTHWISE, ConvOp.INVERTED_BOTTLENECK)
    kernel_sizes: tuple[int, ...] = (3, 5)
    se_ratios: tuple[float, ...] = (0.0, 0.25)
    skips: tuple[Skip, ...] = (Skip.RESIDUAL, Skip.NONE)
    channels: tuple[int, ...] = (8, 16, 24, 32)
    repeats: tuple[int, ...] = (1, 2, 3)
    input_resolution: tuple[int, int, int] = (32, 32, 3)
    block_budget: Optional[int] = None
    expansion: int = 3

    def __post_init__(self):
        # normalise list-ish inputs so configs built from YAML compare equal
        object.__setattr__(self, "conv_ops", tuple(ConvOp(v) for v in self.conv_ops))
        object.__setattr__(self, "skips", tuple(Skip(v) for v in self.skips))
        object.__setattr__(self, "kernel_sizes", tuple(int(v) for v in self.kernel_sizes))
        object.__setattr__(self, "se_ratios", tuple(float(v) for v in self.se_ratios))
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))
        object.__setattr__(self, "repeats", tuple(int(v) for v in self.repeats))
        object.__setattr__(self, "input_resolution", tuple(int(v) for v in self.input_resolution))

    @property
    def sub_space_size(self) -> int:
        """Per-block option count M."""
        return (
            len(self.conv_ops) * len(self.kernel_sizes) * len(self.se_ratios)
            * len(self.skips) * len(self.channels) * len(self.repeats)
        )

    def layer_options(self) -> list[LayerSpec]:
        return [
            LayerSpec(op, k, se, sk, c)
            for op, k, se, sk, c in itertools.product(
                self.conv_ops, self.kernel_sizes, self.se_ratios, self.skips, self.channels
            )
        ]

    def check(self) -> None:
        if self.num_scales < 1:
            raise InvalidConfigError(f"num_scales must be >= 1, got {self.num_scales}")
        for name in ("conv_ops", "kernel_sizes", "se_ratios", "skips", "channels", "repeats"):
            values = getattr(self, name)
            if not values:
                raise InvalidConfigError(f"{name} must not be empty")
            if len(set(values)) != len(values):
                raise InvalidConfigError(f"{name} has duplicate entries")
        if any(k not in ALLOWED_KSIZES for k in self.kernel_sizes):
            raise InvalidConfigError(f"kernel_sizes must be drawn from {ALLOWED_KSIZES}")
        if any(r not in ALLOWED_SE_RATIOS for r in self.se_ratios):
            raise InvalidConfigError(f"se_ratios must be drawn from {ALLOWED_SE_RATIOS}")
        if any(c < 1 for c in self.channels) or any(n < 1 for n in self.repeats):
            raise InvalidConfigError("channels and repeats must be positive")
        if self.expansion < 1:
            raise InvalidConfigError("expansion must be positive")
        h, w, c = self.input_resolution
        if min(h, w, c) < 1:
            raise InvalidConfigError("input_resolution entries must be positive")
        if self.block_budget is not None:
            if self.block_budget < 1:
                raise InvalidConfigError("block_budget must be positive")
            # every reachable input width needs at least one affordable block
            for cin in set(self.channels) | {c}:
                cheapest = min(
                    block_param_count(cin, layer, min(self.repeats), self.expansion)
                    for layer in self.layer_options()
                    if layer.skip is Skip.NONE or layer.out_channels == cin
                )
                if cheapest > self.block_budget:
                    raise InvalidConfigError(
                        f"block_budget {self.block_budget} unsatisfiable for input width {cin}"
                    )


def backbone_template(num_scales: int) -> list[tuple[BlockKind, int, int]]:
    """Slot layout ``(kind, scale, index)`` in canonical (scale-major) order."""
    if num_scales < 1:
        raise InvalidConfigError(f"num_scales must be >= 1, got {num_scales}")
    slots = []
    for i in range(1, num_scales + 1):
        for j, kind in _SCALE_LAYOUT:
            if i == 1 and j > 5:
                continue
            slots.append((kind, i, j))
    return slots


def slot_index(scale: int, index: int) -> int:
    base = 0 if scale == 1 else 5 + (scale - 2) * 7
    return base + index - 1


def execution_order(num_scales: int) -> list[int]:
    """Slot indices in the order data flows through the backbone."""
    order = []
    for i in range(1, num_scales + 1):
        if i > 1:
            order.append(slot_index(i, 6))
        order += [slot_index(i, 1), slot_index(i, 2)]
    for i in range(num_scales, 0, -1):
        if i < num_scales:
            order.append(slot_index(i + 1, 7))
        order += [slot_index(i, 3), slot_index(i, 4), slot_index(i, 5)]
    return order


def _predecessor(num_scales: int, slot: int) -> Optional[int]:
    """Slot whose output feeds ``slot`` (``None`` means the input image)."""
    kind, i, j = backbone_template(num_scales)[slot]
    if (i, j) == (1, 1):
        return None
    if j == 1:
        return slot_index(i, 6)
    if j == 6:
        return slot_index(i - 1, 2)
    if j == 7:
        return slot_index(i, 5)
    if j == 3:
        # the fused tensor carries the encoder width at this scale
        return slot_index(i, 2)
    return slot - 1


def block_input_channels(genome: ArchitectureGenome) -> list[int]:
    """Input width of every slot, derived from its predecessor's out_channels."""
    result = []
    for slot in range(len(genome.blocks)):
        pred = _predecessor(genome.num_scales, slot)
        if pred is None:
            result.append(genome.input_resolution[2])
        else:
            result.append(genome.blocks[pred].layer.out_channels)
    return result


def fusion_widths(genome: ArchitectureGenome) -> list[tuple[int, int, int]]:
    """``(scale, coarse_width, fine_width)`` for each coarse-to-fine fusion."""
    out = []
    for i in range(1, genome.num_scales):
        coarse = genome.blocks[slot_index(i + 1, 7)].layer.out_channels
        fine = genome.blocks[slot_index(i, 2)].layer.out_channels
        out.append((i, coarse, fine))
    return out


# -- parameter accounting ----------------------------------------------------

def se_param_count(channels: int, ratio: float) -> int:
    if ratio == 0:
        return 0
    hidden = math.ceil(ratio * channels)
    return channels * hidden + hidden + hidden * channels + channels


def layer_param_count(cin: int, layer: LayerSpec, expansion: int = 3) -> int:
    k2 = layer.ksize * layer.ksize
    cout = layer.out_channels
    if layer.conv_op is ConvOp.VANILLA:
        n = k2 * cin * cout + cout
    elif layer.conv_op is ConvOp.DEPTHWISE:
        n = (k2 * cin + cin) + (cin * cout + cout)
    else:
        e = expansion * cin
        n = (cin * e + e) + (k2 * e + e) + (e * cout + cout)
    return n + se_param_count(cin, layer.se_ratio)


def block_param_count(cin: int, layer: LayerSpec, repeats: int, expansion: int = 3) -> int:
    first = layer_param_count(cin, layer, expansion)
    rest = layer_param_count(layer.out_channels, layer, expansion)
    return first + (repeats - 1) * rest


def block_param_counts(genome: ArchitectureGenome, expansion: int = 3) -> list[int]:
    cins = block_input_channels(genome)
    return [
        block_param_count(cin, b.layer, b.repeats, expansion)
        for cin, b in zip(cins, genome.blocks)
    ]


def param_count(genome: ArchitectureGenome, expansion: int = 3) -> int:
    """Exact learnable-scalar count: blocks, fusion projections and the head."""
    report = validate(genome)
    if not report.ok:
        raise InvalidGenomeError("; ".join(report.violations))
    total = sum(block_param_counts(genome, expansion))
    for _, coarse, fine in fusion_widths(genome):
        if coarse != fine:
            total += coarse * fine + fine
    last = genome.blocks[slot_index(1, 5)].layer.out_channels
    return total + last + 1


def suggest_block_budget(config: SearchSpaceConfig) -> int:
    """1.5x the median block size over every (input width, layer, repeats) choice."""
    sizes = [
        block_param_count(cin, layer, n, config.expansion)
        for cin in config.channels
        for layer in config.layer_options()
        for n in config.repeats
    ]
    return int(math.ceil(1.5 * float(np.median(sizes))))


def space_size(config: SearchSpaceConfig) -> int:
    """Raw encoding cardinality ``M ** (5 + 7 (S - 1))`` as an exact integer."""
    return config.sub_space_size ** len(backbone_template(config.num_scales))


# -- validity ------------------------------------------------------------------

@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def residual_allowed(block: BlockSpec, cin: int) -> bool:
    if block.kind in (BlockKind.DOWNSAMPLE, BlockKind.UPSAMPLE):
        return False
    return cin == block.layer.out_channels


def validate(genome: ArchitectureGenome, config: Optional[SearchSpaceConfig] = None) -> ValidationReport:
    """Check structural invariants; with ``config`` also option membership and budget."""
    v: list[str] = []
    if genome.num_scales < 1:
        return ValidationReport([f"num_scales must be >= 1, got {genome.num_scales}"])
    template = backbone_template(genome.num_scales)
    if len(genome.blocks) != len(template):
        return ValidationReport(
            [f"expected {len(template)} blocks for {genome.num_scales} scales, got {len(genome.blocks)}"]
        )
    if min(genome.input_resolution) < 1:
        v.append(f"input_resolution must be positive, got {genome.input_resolution}")
    for slot, (block, (kind, i, j)) in enumerate(zip(genome.blocks, template)):
        where = f"slot {slot} {block.label}"
        if block.kind in (BlockKind.DOWNSAMPLE, BlockKind.UPSAMPLE) and block.scale < 2:
            v.append(f"{where}: {block.kind.value} block not allowed at scale 1")
        elif (block.kind, block.scale, block.index) != (kind, i, j):
            v.append(f"{where}: expected {kind.value} ({i},{j})")
        layer = block.layer
        if block.repeats < 1:
            v.append(f"{where}: repeats must be >= 1")
        if layer.ksize not in ALLOWED_KSIZES:
            v.append(f"{where}: ksize {layer.ksize} not in {ALLOWED_KSIZES}")
        if layer.se_ratio not in ALLOWED_SE_RATIOS:
            v.append(f"{where}: se_ratio {layer.se_ratio} not in {ALLOWED_SE_RATIOS}")
        if layer.out_channels < 1:
            v.append(f"{where}: out_channels must be positive")
    if v:
        return ValidationReport(v)

    cins = block_input_channels(genome)
    for slot, (block, cin) in enumerate(zip(genome.blocks, cins)):
        if block.layer.skip is Skip.RESIDUAL and not residual_allowed(block, cin):
            v.append(
                f"slot {slot} {block.label}: residual skip joins {cin} -> "
                f"{block.layer.out_channels} channels"
                + (" across a resampling block" if block.kind in (BlockKind.DOWNSAMPLE, BlockKind.UPSAMPLE) else "")
            )

    if config is not None:
        options = {
            "conv_op": set(config.conv_ops),
            "ksize": set(config.kernel_sizes),
            "se_ratio": set(config.se_ratios),
            "skip": set(config.skips),
            "out_channels": set(config.channels),
        }
        if genome.num_scales != config.num_scales:
            v.append(f"num_scales {genome.num_scales} differs from config {config.num_scales}")
        for slot, block in enumerate(genome.blocks):
            for name, allowed in options.items():
                if getattr(block.layer, name) not in allowed:
                    v.append(f"slot {slot} {block.label}: {name}={getattr(block.layer, name)!r} not an option")
            if block.repeats not in config.repeats:
                v.append(f"slot {slot} {block.label}: repeats={block.repeats} not an option")
        if config.block_budget is not None:
            for slot, (block, cin) in enumerate(zip(genome.blocks, cins)):
                n = block_param_count(cin, block.layer, block.repeats, config.expansion)
                if n > config.block_budget:
                    v.append(f"slot {slot} {block.label}: {n} params exceeds budget {config.block_budget}")
    return ValidationReport(v)


# -- construction ----------------------------------------------------------------

def _block_ok(block: BlockSpec, cin: int, config: SearchSpaceConfig) -> bool:
    if block.layer.skip is Skip.RESIDUAL and not residual_allowed(block, cin):
        return False
    if config.block_budget is not None:
        cost = block_param_count(cin, block.layer, block.repeats, config.expansion)
        if cost > config.block_budget:
            return False
    return True


def random_genome(config: SearchSpaceConfig, seed, max_tries: int = 10_000) -> ArchitectureGenome:
    """Draw every block uniformly from the option lists, resampling a block
    until it is valid given the width it receives.  Pure in ``(config, seed)``."""
    config.check()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    template = backbone_template(config.num_scales)
    blocks: list[Optional[BlockSpec]] = [None] * len(template)
    out_width: dict[int, int] = {}
    for slot in execution_order(config.num_scales):
        kind, i, j = template[slot]
        pred = _predecessor(config.num_scales, slot)
        cin = config.input_resolution[2] if pred is None else out_width[pred]
        for _ in range(max_tries):
            layer = LayerSpec(
                conv_op=config.conv_ops[rng.integers(len(config.conv_ops))],
                ksize=config.kernel_sizes[rng.integers(len(config.kernel_sizes))],
                se_ratio=config.se_ratios[rng.integers(len(config.se_ratios))],
                skip=config.skips[rng.integers(len(config.skips))],
                out_channels=config.channels[rng.integers(len(config.channels))],
            )
            block = BlockSpec(kind, i, j, config.repeats[rng.integers(len(config.repeats))], layer)
            if _block_ok(block, cin, config):
                break
        else:
            raise InvalidConfigError(f"could not sample a valid block for slot {slot}")
        blocks[slot] = block
        out_width[slot] = layer.out_channels
    return ArchitectureGenome(config.num_scales, tuple(blocks), config.input_resolution)


def enumerate_genomes(config: SearchSpaceConfig) -> Iterator[ArchitectureGenome]:
    """Every valid genome of the space, in lexicographic option order."""
    config.check()
    template = backbone_template(config.num_scales)
    per_slot = [
        [BlockSpec(kind, i, j, n, layer) for layer in config.layer_options() for n in config.repeats]
        for kind, i, j in template
    ]
    needs_check = Skip.RESIDUAL in config.skips or config.block_budget is not None
    for combo in itertools.product(*per_slot):
        genome = ArchitectureGenome(config.num_scales, combo, config.input_resolution)
        if needs_check and not validate(genome, config).ok:
            continue
        yield genome


def canonical_hash(genome: ArchitectureGenome) -> str:
    """SHA-256 hex digest of the canonical JSON serialization."""
    return hashlib.sha256(genome.to_json().encode("utf-8")).hexdigest()


def save_genome(genome: ArchitectureGenome, path) -> None:
    text = json.dumps(genome.to_dict(), sort_keys=True, indent=2)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")


def load_genome(path) -> ArchitectureGenome:
    with open(path, encoding="utf-8") as fh:
        return ArchitectureGenome.from_dict(json.load(fh))


def uniform_genome(
    num_scales: int,
    layer: LayerSpec,
    repeats: int = 1,
    input_resolution: Sequence[int] = (32, 32, 3),
) -> ArchitectureGenome:
    """Genome with the same layer in every slot (handy for fixtures)."""
    blocks = tuple(BlockSpec(kind, i, j, repeats, layer) for kind, i, j in backbone_template(num_scales))
    return ArchitectureGenome(num_scales, blocks, tuple(input_resolution))
