"""Delta-parameter pruning: rank, assign drop probabilities, sample, rescale.

Four methods share one pipeline:

    nodrop    keep everything (probabilities all 0)
    random    drop every element independently at a uniform rate p, then
              rescale survivors by 1/(1-p)
    topk      deterministically keep the ceil(keep_fraction * n) elements
              with the highest scores per ranking group, never rescale
    magprune  rank elements per group by score, give rank r the drop
              probability p + epsilon*(r/n - 1/2) (largest score gets the
              smallest probability), sample Bernoulli masks, rescale each
              survivor by 1/(1-p_i)

Ranking groups are either whole tensors ("layer") or leading-dimension
slices ("row"; 1-D tensors always fall back to layer). Scores are plain
magnitudes, or magnitudes weighted by per-column input activation norms for
2-D tensors. Masks come from counter-based substreams keyed by
(seed, tensor name, group index), so outputs are independent of traversal
and thread schedule.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .container import TensorMap
from .errors import ConfigError
from .rng import Substream, child_keys, stream_key, uniform_matrix

logger = logging.getLogger(__name__)

METHOD_NODROP = "nodrop"
METHOD_RANDOM = "random"
METHOD_TOPK = "topk"
METHOD_MAGPRUNE = "magprune"
METHODS = (METHOD_NODROP, METHOD_RANDOM, METHOD_TOPK, METHOD_MAGPRUNE)

GRANULARITY_ROW = "row"
GRANULARITY_LAYER = "layer"
GRANULARITIES = (GRANULARITY_ROW, GRANULARITY_LAYER)

SCORE_MAGNITUDE = "magnitude"
SCORE_ACTIVATION = "activation"
SCORES = (SCORE_MAGNITUDE, SCORE_ACTIVATION)

_SEED_MAX = 2**64


@dataclass(frozen=True)
class PruneSpec:
    """Full description of one pruning configuration."""

    method: str
    p: float = 0.0
    epsilon: float = 0.0
    keep_fraction: float = 1.0
    granularity: str = GRANULARITY_ROW
    score: str = SCORE_MAGNITUDE
    rescale: bool | None = None  # None = method default
    seed: int = 0
    activation_norms: TensorMap | None = field(default=None, repr=False)
    norms_path: str | None = None  # provenance for report echoes

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method '{self.method}'")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"unknown granularity '{self.granularity}'")
        if self.score not in SCORES:
            raise ConfigError(f"unknown score source '{self.score}'")
        if not isinstance(self.seed, int) or not 0 <= self.seed < _SEED_MAX:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.method in (METHOD_RANDOM, METHOD_MAGPRUNE) and not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"drop rate p must be in [0, 1], got {self.p}")
        if self.method == METHOD_MAGPRUNE:
            if self.epsilon < 0.0:
                raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
            _check_probability_window(self.p, self.epsilon)
        if self.method == METHOD_TOPK and not 0.0 <= self.keep_fraction <= 1.0:
            raise ConfigError(f"keep_fraction must be in [0, 1], got {self.keep_fraction}")
        if self.rescale and self.method in (METHOD_NODROP, METHOD_TOPK):
            raise ConfigError(f"rescale is not applicable to method '{self.method}'")
        if self.score == SCORE_ACTIVATION and self.activation_norms is None:
            raise ConfigError("score 'activation' requires activation norms")

    @property
    def rescale_enabled(self) -> bool:
        if self.rescale is None:
            return self.method in (METHOD_RANDOM, METHOD_MAGPRUNE)
        return self.rescale

    def to_json_dict(self) -> dict:
        out: dict = {"method": self.method, "granularity": self.granularity,
                     "score": self.score, "rescale": self.rescale_enabled,
                     "seed": self.seed}
        if self.method in (METHOD_RANDOM, METHOD_MAGPRUNE):
            out["p"] = self.p
        if self.method == METHOD_MAGPRUNE:
            out["epsilon"] = self.epsilon
        if self.method == METHOD_TOPK:
            out["keep_fraction"] = self.keep_fraction
        if self.norms_path is not None:
            out["activations"] = self.norms_path
        return out


@dataclass
class PruneOutcome:
    """Per-tensor result of the drop step.

    pruned[i] is 0 wherever mask[i] == 1; kept elements are the original
    delta, scaled by 1/(1-probs[i]) when rescaling is on.
    """

    pruned: np.ndarray
    mask: np.ndarray
    probs: np.ndarray
    dropped_fraction: float


def _check_probability_window(p: float, epsilon: float) -> None:
    if p - epsilon / 2.0 < 0.0:
        raise ConfigError(
            f"invalid probability window, violated: p - epsilon/2 >= 0 "
            f"(p={p}, epsilon={epsilon})"
        )
    if p + epsilon / 2.0 > 1.0:
        raise ConfigError(
            f"invalid probability window, violated: p + epsilon/2 <= 1 "
            f"(p={p}, epsilon={epsilon})"
        )


def rank_group(values: np.ndarray, descending: bool = True) -> np.ndarray:
    """Rank a 1-D score array: rank 0 is the largest value when descending.

    Ties break by ascending element index, so ranks are a permutation of
    0..n-1 and results are reproducible.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("rank_group expects a 1-D array")
    if np.isnan(v).any():
        raise ValueError("NaN in scores")
    order = np.argsort(-v if descending else v, kind="stable")
    ranks = np.empty(v.size, dtype=np.int64)
    ranks[order] = np.arange(v.size, dtype=np.int64)
    return ranks


def assign_probabilities(ranks: np.ndarray, p: float, epsilon: float) -> np.ndarray:
    """Map ranks to drop probabilities: rank r of n gets p + epsilon*(r/n - 1/2).

    This is the symmetric form of p_min + (epsilon/n)*r with
    p_min = p - epsilon/2; it evaluates more stably in floating point.
    The rank-0 (largest) element always receives the minimum probability
    and the probabilities are clipped to [0, 1] to shed rounding dust.
    """
    _check_probability_window(p, epsilon)
    ranks = np.asarray(ranks, dtype=np.int64)
    n = ranks.size
    if n == 0:
        return np.empty(0, dtype=np.float64)
    probs = p + epsilon * (ranks / n - 0.5)
    return np.clip(probs, 0.0, 1.0)


def sample_mask(probs: np.ndarray, stream: Substream) -> np.ndarray:
    """Draw an independent Bernoulli drop mask; element i uses counter i."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size and (probs.min() < 0.0 or probs.max() > 1.0):
        raise ValueError("drop probabilities must lie in [0, 1]")
    u = stream.uniforms(probs.size).reshape(probs.shape)
    return (u < probs).astype(np.uint8)


def rescale_survivors(deltas: np.ndarray, mask: np.ndarray,
                      probs: np.ndarray) -> np.ndarray:
    """Zero dropped elements and scale kept ones by 1/(1-p_i).

    Dropped positions never reach the division, so p_i = 1 (which forces
    mask 1) cannot divide by zero.
    """
    deltas = np.asarray(deltas, dtype=np.float32)
    denom = np.where(mask == 1, 1.0, 1.0 - np.asarray(probs, dtype=np.float64))
    scaled = (deltas.astype(np.float64) / denom).astype(np.float32)
    return np.where(mask == 1, np.float32(0.0), scaled)


def activation_weighted_scores(deltas: np.ndarray, norms: np.ndarray) -> np.ndarray:
    """Score a 2-D delta tensor by |delta[i, j]| * norms[j]."""
    deltas = np.asarray(deltas)
    norms = np.asarray(norms, dtype=np.float64)
    if deltas.ndim != 2 or norms.ndim != 1:
        raise ValueError("expected a 2-D delta tensor and a 1-D norms vector")
    if norms.size != deltas.shape[1]:
        raise ValueError(
            f"length mismatch: {norms.size} norms for {deltas.shape[1]} columns"
        )
    if norms.size and norms.min() < 0.0:
        raise ValueError("activation norms must be non-negative")
    return np.abs(deltas.astype(np.float64)) * norms[None, :]


def _group_view(arr: np.ndarray, granularity: str) -> np.ndarray:
    """Reshape to (groups, group_size); 1-D tensors always form one group."""
    if granularity == GRANULARITY_ROW and arr.ndim >= 2:
        # explicit row length: -1 cannot be inferred for zero-size tensors
        return arr.reshape(arr.shape[0], math.prod(arr.shape[1:]))
    return arr.reshape(1, arr.size)


def _score_view(name: str, arr: np.ndarray, spec: PruneSpec) -> np.ndarray:
    if spec.score == SCORE_ACTIVATION:
        if arr.ndim == 2:
            norms_map = spec.activation_norms
            if name not in norms_map:
                raise ConfigError(f"no activation norms for tensor '{name}'")
            norms = norms_map.array(name)
            if norms.ndim != 1 or norms.size != arr.shape[1]:
                raise ConfigError(
                    f"activation norms for tensor '{name}' must be 1-D with "
                    f"{arr.shape[1]} entries"
                )
            if norms.size and norms.min() < 0.0:
                raise ConfigError(f"activation norms for tensor '{name}' must be non-negative")
            scores = activation_weighted_scores(arr, norms)
        else:
            logger.warning(
                "tensor '%s' is %d-D; activation-weighted scoring applies to 2-D "
                "tensors only, falling back to magnitude", name, arr.ndim)
            scores = np.abs(arr.astype(np.float64))
    else:
        scores = np.abs(arr.astype(np.float64))
    return _group_view(scores, spec.granularity)


def _rank_rows(scores: np.ndarray) -> np.ndarray:
    if np.isnan(scores).any():
        raise ValueError("NaN in scores")
    order = np.argsort(-scores, axis=1, kind="stable")
    ranks = np.empty(scores.shape, dtype=np.int64)
    np.put_along_axis(ranks, order, np.arange(scores.shape[1], dtype=np.int64)[None, :], axis=1)
    return ranks


def _keep_count(keep_fraction: float, group_size: int) -> int:
    return min(group_size, max(0, math.ceil(keep_fraction * group_size)))


def _group_masks(name: str, spec: PruneSpec, probs: np.ndarray) -> np.ndarray:
    parent = stream_key(spec.seed, name)
    keys = child_keys(parent, np.arange(probs.shape[0]))
    u = uniform_matrix(keys, probs.shape[1])
    return (u < probs).astype(np.uint8)


def topk_prune(deltas: np.ndarray, keep_fraction: float,
               granularity: str = GRANULARITY_LAYER,
               scores: np.ndarray | None = None) -> PruneOutcome:
    """Keep the ceil(keep_fraction * n) highest-scored elements per group.

    Deterministic: reported probabilities are 0 for kept and 1 for dropped
    elements and no rescaling ever happens.
    """
    if not 0.0 <= keep_fraction <= 1.0:
        raise ConfigError(f"keep_fraction must be in [0, 1], got {keep_fraction}")
    arr = np.asarray(deltas, dtype=np.float32)
    mat = _group_view(arr, granularity)
    score_mat = (_group_view(np.asarray(scores, dtype=np.float64), granularity)
                 if scores is not None else np.abs(mat.astype(np.float64)))
    ranks = _rank_rows(score_mat)
    k = _keep_count(keep_fraction, mat.shape[1])
    mask = (ranks >= k).astype(np.uint8)
    pruned = np.where(mask == 1, np.float32(0.0), mat)
    n = arr.size
    return PruneOutcome(
        pruned=pruned.reshape(arr.shape),
        mask=mask.reshape(arr.shape),
        probs=mask.astype(np.float64).reshape(arr.shape),
        dropped_fraction=float(int(mask.sum()) / n) if n else 0.0,
    )


def _prune_tensor(name: str, arr: np.ndarray, spec: PruneSpec) -> PruneOutcome:
    mat = _group_view(arr, spec.granularity)

    if spec.method == METHOD_NODROP:
        return PruneOutcome(
            pruned=arr,
            mask=np.zeros(arr.shape, dtype=np.uint8),
            probs=np.zeros(arr.shape, dtype=np.float64),
            dropped_fraction=0.0,
        )

    if spec.method == METHOD_TOPK:
        scores = _score_view(name, arr, spec)
        ranks = _rank_rows(scores)
        k = _keep_count(spec.keep_fraction, mat.shape[1])
        mask = (ranks >= k).astype(np.uint8)
        probs = mask.astype(np.float64)
    elif spec.method == METHOD_RANDOM:
        probs = np.full(mat.shape, float(spec.p), dtype=np.float64)
        mask = _group_masks(name, spec, probs)
    else:  # magprune
        scores = _score_view(name, arr, spec)
        ranks = _rank_rows(scores)
        n = mat.shape[1]
        if n:
            probs = np.clip(spec.p + spec.epsilon * (ranks / n - 0.5), 0.0, 1.0)
        else:
            probs = np.zeros(mat.shape, dtype=np.float64)
        mask = _group_masks(name, spec, probs)

    if spec.rescale_enabled:
        pruned = rescale_survivors(mat, mask, probs)
    else:
        pruned = np.where(mask == 1, np.float32(0.0), mat)

    n = arr.size
    return PruneOutcome(
        pruned=pruned.reshape(arr.shape),
        mask=mask.reshape(arr.shape),
        probs=probs.reshape(arr.shape),
        dropped_fraction=float(int(mask.sum()) / n) if n else 0.0,
    )


def prune(deltas: TensorMap, spec: PruneSpec, threads: int = 1) -> dict[str, PruneOutcome]:
    """Apply the drop step to every tensor of a delta map.

    Returns one PruneOutcome per tensor name. Results are a pure function of
    (deltas, spec), whatever the thread count.
    """
    spec.validate()
    names = deltas.names()
    if threads > 1 and len(names) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = {name: pool.submit(_prune_tensor, name, deltas.array(name), spec)
                       for name in names}
            return {name: fut.result() for name, fut in futures.items()}
    return {name: _prune_tensor(name, deltas.array(name), spec) for name in names}
