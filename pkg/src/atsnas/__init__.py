"""Multi-objective architecture search for compact dense-prediction networks.

Training-free scoring of untrained candidates, mutation, and an assisted
tabu search that trains only the most promising child per step.
"""

from .genome import (
    ArchitectureGenome,
    BlockKind,
    ConvOp,
    LayerSpec,
    SearchSpaceConfig,
    Skip,
    canonical_hash,
    enumerate_genomes,
    load_genome,
    param_count,
    random_genome,
    save_genome,
    space_size,
    validate,
)
from .evaluator import TrainConfig, accuracy, gen_task, grade, reward
from .scorer import score, score_codes
from .search import Context, Objective, SearchConfig, run_search

__version__ = "0.1.0"
