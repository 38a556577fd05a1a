"""Trained-quality side of the objective.

Supplies the accuracy ``A(m)`` and size ``P(m)`` that enter the validation
grade, using a procedural depth-regression task small enough to train on a
laptop CPU, and implements the grade and mutation-reward formulas.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .genome import ArchitectureGenome, canonical_hash, param_count
from .tensor import NetworkInstance, NumericError, backward, compile_genome, forward, forward_with_tape, init_params

MIN_DEPTH = 0.5
MAX_DEPTH = 10.0
PRED_FLOOR = 1e-3
DELTA1_THRESHOLD = 1.25
SCORE_TOLERANCE = 1e-12


class TrainingError(RuntimeError):
    def __init__(self, epoch: int, message: str):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


# -- synthetic scenes -------------------------------------------------------------

@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    albedo: tuple[float, float, float]


@dataclass(frozen=True)
class Scene:
    """A back plane ``normal . X = offset`` plus spheres, camera at the origin
    looking down +z with focal length equal to the image width."""

    plane_normal: tuple[float, float, float]
    plane_offset: float
    plane_albedo: tuple[float, float, float] = (0.6, 0.6, 0.6)
    spheres: tuple[Sphere, ...] = ()


# fixed input standardisation, measured on large samples of random_scene
RGB_MEAN = 0.06
RGB_STD = 0.03

LIGHT = np.array([-0.3, -0.5, -1.0]) / np.linalg.norm([-0.3, -0.5, -1.0])


def camera_rays(height: int, width: int) -> np.ndarray:
    """Per-pixel ray directions ``(H, W, 3)`` with unit z component."""
    f = float(width)
    v, u = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    return np.stack([(u - width / 2) / f, (v - height / 2) / f, np.ones_like(u)], axis=-1)


def render_scene(scene: Scene, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Ray-cast ``scene``; returns ``(rgb (3, H, W), depth (1, H, W))``."""
    d = camera_rays(height, width)
    n = np.asarray(scene.plane_normal, dtype=float)
    denom = d @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t_plane = np.where(denom > 1e-9, scene.plane_offset / denom, np.inf)
    depth = t_plane
    normal = np.broadcast_to(-n / np.linalg.norm(n), d.shape).copy()
    albedo = np.broadcast_to(np.asarray(scene.plane_albedo, dtype=float), d.shape).copy()
    dd = np.einsum("hwk,hwk->hw", d, d)
    for sph in scene.spheres:
        c = np.asarray(sph.center, dtype=float)
        dc = d @ c
        disc = dc * dc - dd * (c @ c - sph.radius ** 2)
        with np.errstate(invalid="ignore"):
            t = np.where(disc >= 0, (dc - np.sqrt(np.maximum(disc, 0.0))) / dd, np.inf)
        hit = (t > 0) & (t < depth)
        depth = np.where(hit, t, depth)
        pts = t[..., None] * d
        normal = np.where(hit[..., None], (pts - c) / sph.radius, normal)
        albedo = np.where(hit[..., None], np.asarray(sph.albedo, dtype=float), albedo)
    depth = np.clip(depth, MIN_DEPTH, MAX_DEPTH)
    shading = 0.2 + 0.8 * np.clip(normal @ -LIGHT, 0.0, None)
    rgb = albedo * shading[..., None] * np.exp(-depth / 6.0)[..., None]
    return rgb.transpose(2, 0, 1), depth[None]


def random_scene(rng: np.random.Generator, max_spheres: int = 3) -> Scene:
    tilt = rng.uniform(-0.5, 0.5, size=2)
    normal = np.array([tilt[0], tilt[1], 1.0])
    normal /= np.linalg.norm(normal)
    spheres = []
    for _ in range(int(rng.integers(0, max_spheres + 1))):
        z = rng.uniform(1.5, 4.5)
        spheres.append(
            Sphere(
                center=(float(rng.uniform(-0.35, 0.35) * z), float(rng.uniform(-0.35, 0.35) * z), float(z)),
                radius=float(rng.uniform(0.25, 0.8)),
                albedo=tuple(float(a) for a in rng.uniform(0.3, 1.0, size=3)),
            )
        )
    return Scene(
        plane_normal=tuple(float(v) for v in normal),
        plane_offset=float(rng.uniform(3.0, 7.0)),
        plane_albedo=tuple(float(a) for a in rng.uniform(0.3, 1.0, size=3)),
        spheres=tuple(spheres),
    )


@dataclass
class SyntheticTask:
    seed: int
    count: int
    resolution: tuple[int, int]
    max_spheres: int
    inputs: np.ndarray = field(repr=False)
    targets: np.ndarray = field(repr=False)
    val_fraction: float = 0.2

    @property
    def n_val(self) -> int:
        return max(1, int(round(self.count * self.val_fraction))) if self.count > 1 else 0

    def train_split(self):
        n = self.count - self.n_val
        return self.inputs[:n], self.targets[:n]

    def val_split(self):
        if self.n_val == 0:
            return self.inputs, self.targets
        n = self.count - self.n_val
        return self.inputs[n:], self.targets[n:]


def gen_task(seed: int, count: int, resolution=(16, 16), max_spheres: int = 3, val_fraction: float = 0.2) -> SyntheticTask:
    """Procedural depth-regression dataset; bit-identical for equal arguments."""
    if count < 1:
        raise ValueError("count must be >= 1")
    h, w = resolution
    rng = np.random.default_rng(seed)
    inputs = np.empty((count, 3, h, w))
    targets = np.empty((count, 1, h, w))
    for k in range(count):
        inputs[k], targets[k] = render_scene(random_scene(rng, max_spheres), h, w)
    inputs = (inputs - RGB_MEAN) / RGB_STD
    return SyntheticTask(seed, count, (h, w), max_spheres, inputs, targets, val_fraction)


# -- training ---------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 7e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_start: int = 10
    decay_every: int = 5
    decay_fraction: float = 0.05

    def check(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0 or self.eps <= 0:
            raise ValueError("learning_rate must be >= 0 and eps > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if not 0 < self.decay_fraction < 1 or self.decay_every < 1 or self.decay_start < 0:
            raise ValueError("decay_fraction must lie in (0, 1), decay_every >= 1, decay_start >= 0")

    def lr_at(self, epoch: int) -> float:
        """Constant until ``decay_start``, then cut by ``decay_fraction`` at
        the start of every ``decay_every``-epoch interval (0-based epochs)."""
        if epoch < self.decay_start:
            return self.learning_rate
        steps = (epoch - self.decay_start) // self.decay_every + 1
        return self.learning_rate * (1.0 - self.decay_fraction) ** steps


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def train(net: NetworkInstance, task: SyntheticTask, config: TrainConfig, seed, params=None):
    """Adam on mean squared depth error over the training split.

    Returns ``(params, history)`` where ``history[e]`` is the mean training
    loss seen during epoch ``e``.  The input store is never modified.
    """
    config.check()
    rng = np.random.default_rng(seed)
    if params is None:
        params = init_params(net, rng.integers(2 ** 63))
    params = {k: v.copy() for k, v in params.items()}
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(p) for k, p in params.items()}
    x_train, y_train = task.train_split()
    n = len(x_train)
    history = []
    step = 0
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            try:
                pred, tape = forward_with_tape(net, params, x_train[idx])
                loss, grad = mse_loss(pred, y_train[idx])
                if not math.isfinite(loss):
                    raise TrainingError(epoch, "loss is not finite")
                grads = backward(net, tape, grad)
            except NumericError as exc:
                raise TrainingError(epoch, str(exc)) from exc
            losses.append(loss * len(idx))
            step += 1
            c1 = 1.0 - config.beta1 ** step
            c2 = 1.0 - config.beta2 ** step
            for k, g in grads.items():
                m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g
                v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g * g
                params[k] -= lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + config.eps)
        history.append(sum(losses) / n)
    return params, history


# -- metrics and objective ---------------------------------------------------------

def accuracy(pred: np.ndarray, target: np.ndarray) -> float:
    """delta_1: fraction of pixels with ``max(p/t, t/p) < 1.25``."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    p = np.maximum(pred, PRED_FLOOR)
    t = np.maximum(target, PRED_FLOOR)
    ratio = np.maximum(p / t, t / p)
    return float(np.mean(ratio < DELTA1_THRESHOLD))


@dataclass(frozen=True)
class ValidationGrade:
    grade: float
    accuracy: float
    params: int
    target: int
    alpha: float
    r: int


def _compactness(size: float, target: float) -> tuple[float, int]:
    r = 0 if size <= target else 1
    return (target / size) ** r, r


def grade(accuracy_value: float, params: int, target: int, alpha: float) -> ValidationGrade:
    """``G = alpha * A + (1 - alpha) * (P / P_m) ** r`` with ``r = [P_m > P]``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if params <= 0 or target <= 0:
        raise ValueError("parameter counts must be positive")
    term, r = _compactness(params, target)
    g = alpha * accuracy_value + (1.0 - alpha) * term
    return ValidationGrade(g, accuracy_value, int(params), int(target), alpha, r)


@dataclass(frozen=True)
class Reward:
    value: float
    fallback: bool = False


def reward(score_parent: float, score_child: float, params_child: int, target: int, alpha: float) -> Reward:
    """Mutation reward ``alpha * s_child / s_parent + (1 - alpha) * (P / P_child) ** r``.

    The score ratio is undefined for a degenerate or ~zero parent score; the
    reward then falls back to the raw child score (``fallback=True``), which
    preserves the ordering among siblings.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if not math.isfinite(score_parent) or abs(score_parent) <= SCORE_TOLERANCE:
        return Reward(float(score_child), fallback=True)
    term, _ = _compactness(params_child, target)
    if alpha == 0.0:
        ratio_term = 0.0
    else:
        ratio_term = alpha * (score_child / score_parent)
    return Reward(ratio_term + (1.0 - alpha) * term)


# -- one-shot evaluation of a genome -----------------------------------------------

@dataclass(frozen=True)
class EvalResult:
    hash: str
    accuracy: float
    params: int
    grade: float
    epochs: int
    wall_seconds: float
    final_loss: float

    def as_row(self) -> dict:
        return asdict(self)


def evaluate_genome(
    genome: ArchitectureGenome,
    task: SyntheticTask,
    config: TrainConfig,
    seed,
    target: int,
    alpha: float,
    init_seed=None,
    expansion: int = 3,
) -> tuple[EvalResult, dict]:
    """Compile, train on the task's training split and grade on its
    validation split.  Returns the result and the trained parameter store.

    ``init_seed`` fixes the starting weights (defaults to a draw from
    ``seed``); pass the scoring seed to train the network that was scored.
    """
    start = time.perf_counter()
    h, w = task.resolution
    net = compile_genome(genome, (genome.input_resolution[2], h, w), expansion)
    start_params = None if init_seed is None else init_params(net, init_seed)
    params, history = train(net, task, config, seed, params=start_params)
    x_val, y_val = task.val_split()
    pred, _ = forward(net, params, x_val)
    a = accuracy(pred, y_val)
    p = param_count(genome, expansion)
    g = grade(a, p, target, alpha)
    result = EvalResult(
        hash=canonical_hash(genome),
        accuracy=a,
        params=p,
        grade=g.grade,
        epochs=config.epochs,
        wall_seconds=time.perf_counter() - start,
        final_loss=history[-1] if history else float("nan"),
    )
    return result, params
