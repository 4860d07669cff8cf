"""Independent verification tools.

node_expectation_check confirms by Monte Carlo that stochastic pruning with
rescaling preserves the expected output of a linear node: dropping element i
with probability p_i and scaling survivors by 1/(1-p_i) leaves
E[sum_i x_i (w_i + delta_hat_i)] equal to sum_i x_i (w_i + delta_i).

reference_pipeline is a deliberately naive, scalar, single-threaded
transcription of the merge pipeline that consumes the same random
substreams. It exists so the production implementation can be checked for
bit-exact equality on small instances; keep it dumb and keep it separate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .container import Dtype, Tensor, TensorMap, check_homologous
from .errors import ConfigError
from .merging import LAMBDA_ADAPTIVE, LAMBDA_CONSTANT, MergeSettings
from .pruning import (METHOD_MAGPRUNE, METHOD_NODROP, METHOD_RANDOM,
                      METHOD_TOPK, GRANULARITY_LAYER, GRANULARITY_ROW,
                      SCORE_ACTIVATION, SCORE_MAGNITUDE, PruneOutcome,
                      PruneSpec, assign_probabilities, rank_group)
from .rng import child_keys, stream_key, substream, uniform_matrix

_REFERENCE_SIZE_GUARD = 100_000


@dataclass(frozen=True)
class LinearNodeFixture:
    """One linear node: weights w, deltas, and an input vector of equal length."""

    weights: np.ndarray
    deltas: np.ndarray
    x: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        d = np.asarray(self.deltas, dtype=np.float64)
        x = np.asarray(self.x, dtype=np.float64)
        if not (w.ndim == d.ndim == x.ndim == 1) or not (w.size == d.size == x.size):
            raise ValueError("weights, deltas and x must be 1-D arrays of equal length")
        if not (np.isfinite(w).all() and np.isfinite(d).all() and np.isfinite(x).all()):
            raise ValueError("fixture values must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "deltas", d)
        object.__setattr__(self, "x", x)


@dataclass
class ExpectationReport:
    analytic: float
    sample_mean: float
    standard_error: float
    trials: int
    z_score: float

    def to_json_dict(self) -> dict:
        return {
            "analytic": self.analytic,
            "sample_mean": self.sample_mean,
            "standard_error": self.standard_error,
            "trials": self.trials,
            "z_score": self.z_score,
        }


def _fixture_probs(fixture: LinearNodeFixture, spec: PruneSpec) -> np.ndarray:
    if spec.method == METHOD_RANDOM:
        return np.full(fixture.deltas.size, float(spec.p))
    ranks = rank_group(np.abs(fixture.deltas))
    return assign_probabilities(ranks, spec.p, spec.epsilon)


def node_expectation_check(fixture: LinearNodeFixture, spec: PruneSpec,
                           trials: int) -> ExpectationReport:
    """Monte-Carlo estimate of the pruned node's output vs the exact value.

    Trial j draws its mask from the substream (spec.seed, j). The standard
    error is the closed-form Bernoulli value
    sqrt(sum_i (x_i delta_i)^2 p_i/(1-p_i) / trials), so the z-score of a
    correct implementation is standard-normal-like.
    """
    if spec.method not in (METHOD_RANDOM, METHOD_MAGPRUNE):
        raise ConfigError(f"expectation check needs a stochastic method, got '{spec.method}'")
    if not spec.rescale_enabled:
        raise ConfigError(
            "expectation check refused: with rescale off the expected delta is "
            "(1-p_i)*delta_i, not delta_i, so preservation fails by construction"
        )
    if trials < 100:
        raise ConfigError(f"trials must be at least 100, got {trials}")

    d, x, w = fixture.deltas, fixture.x, fixture.weights
    probs = _fixture_probs(fixture, spec)
    if probs.size and probs.max() >= 1.0:
        raise ConfigError("a drop probability of 1 never preserves the expectation")

    analytic = float(((w + d) * x).sum())
    keys = child_keys(stream_key(spec.seed), np.arange(trials))
    u = uniform_matrix(keys, d.size)
    masks = u < probs[None, :]
    d_hat = np.where(masks, 0.0, d / (1.0 - probs))
    # Summing centered terms keeps the deterministic case exactly exact.
    diffs = ((d_hat - d[None, :]) * x[None, :]).sum(axis=1)
    sample_mean = analytic + float(diffs.sum()) / trials

    variance = float(((x * d) ** 2 * probs / (1.0 - probs)).sum())
    standard_error = math.sqrt(variance / trials)
    if standard_error > 0.0:
        z = (sample_mean - analytic) / standard_error
    else:
        z = 0.0
    return ExpectationReport(analytic=analytic, sample_mean=sample_mean,
                             standard_error=standard_error, trials=trials,
                             z_score=z)


def drop_rate_report(outcomes: dict[str, PruneOutcome]) -> dict:
    """Exact per-tensor and global dropped fractions (popcount ratios)."""
    per_tensor = {}
    total = 0
    dropped = 0
    for name in sorted(outcomes):
        mask = outcomes[name].mask
        per_tensor[name] = float(int(mask.sum()) / mask.size) if mask.size else 0.0
        total += mask.size
        dropped += int(mask.sum())
    return {
        "per_tensor": per_tensor,
        "global": float(dropped / total) if total else 0.0,
    }


# ---------------------------------------------------------------------------
# Scalar reference pipeline
# ---------------------------------------------------------------------------

def _ref_sign(v) -> int:
    if v > 0:
        return 1
    if v < 0:
        return -1
    return 0


def _ref_groups(shape: tuple[int, ...], granularity: str) -> list[list[int]]:
    """Flat element indices of each ranking group, in counter order."""
    size = int(np.prod(shape)) if shape else 0
    if granularity == GRANULARITY_ROW and len(shape) >= 2:
        row_len = size // shape[0] if shape[0] else 0
        return [list(range(r * row_len, (r + 1) * row_len)) for r in range(shape[0])]
    return [list(range(size))]


def _ref_scores(name: str, flat_delta: np.ndarray, shape: tuple[int, ...],
                spec: PruneSpec) -> list[float]:
    scores = [abs(float(v)) for v in flat_delta]
    if spec.score == SCORE_ACTIVATION and len(shape) == 2:
        norms = spec.activation_norms.array(name)
        cols = shape[1]
        scores = [scores[i] * float(norms[i % cols]) for i in range(len(scores))]
    return scores


def _ref_prune_tensor(name: str, flat_delta: np.ndarray, shape: tuple[int, ...],
                      spec: PruneSpec) -> np.ndarray:
    pruned = np.empty(flat_delta.size, dtype=np.float32)
    scores = _ref_scores(name, flat_delta, shape, spec)
    for g, members in enumerate(_ref_groups(shape, spec.granularity)):
        n = len(members)
        stream = substream(spec.seed, name, g)
        if spec.method == METHOD_NODROP:
            probs = [0.0] * n
        elif spec.method == METHOD_RANDOM:
            probs = [float(spec.p)] * n
        else:
            group_scores = [scores[i] for i in members]
            order = sorted(range(n), key=lambda i: (-group_scores[i], i))
            ranks = [0] * n
            for r, i in enumerate(order):
                ranks[i] = r
            if spec.method == METHOD_TOPK:
                k = min(n, max(0, math.ceil(spec.keep_fraction * n)))
                probs = [0.0 if ranks[i] < k else 1.0 for i in range(n)]
            else:
                probs = [min(max(spec.p + spec.epsilon * (ranks[i] / n - 0.5), 0.0), 1.0)
                         for i in range(n)]
        for counter, i in enumerate(members):
            if spec.method == METHOD_NODROP:
                dropped = False
            elif spec.method == METHOD_TOPK:
                dropped = probs[counter] == 1.0
            else:
                dropped = stream.uniform(counter) < probs[counter]
            if dropped:
                pruned[i] = np.float32(0.0)
            elif spec.rescale_enabled:
                pruned[i] = np.float32(np.float64(flat_delta[i]) / (1.0 - probs[counter]))
            else:
                pruned[i] = flat_delta[i]
    return pruned


def reference_pipeline(base: TensorMap, experts: list[TensorMap],
                       settings: MergeSettings) -> TensorMap:
    """Naive scalar merge used as an exact-equality oracle on small inputs."""
    total = sum(t.size for t in base) * max(1, len(experts))
    if total > _REFERENCE_SIZE_GUARD:
        raise ValueError(
            f"reference pipeline size guard exceeded ({total} > {_REFERENCE_SIZE_GUARD})"
        )
    settings.validate(len(experts))
    check_homologous(base, experts)
    specs = settings.specs_for(len(experts))
    n_experts = len(experts)

    # Step 0 + 1: deltas and drop, one expert at a time, scalar arithmetic.
    pruned: list[dict[str, np.ndarray]] = []
    for expert, spec in zip(experts, specs):
        per_tensor = {}
        for name in base.names():
            b = base.array(name).reshape(-1)
            e = expert.array(name).reshape(-1)
            delta = np.empty(b.size, dtype=np.float32)
            for i in range(b.size):
                delta[i] = e[i] - b[i]
            per_tensor[name] = _ref_prune_tensor(name, delta, base[name].shape, spec)
        pruned.append(per_tensor)

    merged_tensors = []
    for name in base.names():
        shape = base[name].shape
        size = base[name].size
        flats = [pruned[t][name] for t in range(n_experts)]

        sign = np.zeros(size, dtype=np.int64)
        if settings.elect:
            for k in range(size):
                acc = np.float32(0.0)
                for t in range(n_experts):
                    acc = np.float32(acc + flats[t][k])
                sign[k] = _ref_sign(acc)

        if settings.lambda_mode == LAMBDA_ADAPTIVE:
            rescaled = []
            for t, spec in enumerate(specs):
                out = np.empty(size, dtype=np.float32)
                for members in _ref_groups(shape, spec.granularity):
                    elected = {i for i in members
                               if flats[t][i] != 0 and _ref_sign(flats[t][i]) == sign[i]}
                    m = len(members)
                    if m and elected:
                        p_eff = (m - len(elected)) / m
                        factor = 1.0 / (1.0 - p_eff)
                    else:
                        factor = 0.0
                    for i in members:
                        if i in elected:
                            out[i] = np.float32(np.float64(flats[t][i]) * factor)
                        else:
                            out[i] = np.float32(0.0)
                rescaled.append(out)
            flats = rescaled
            lam = 1.0
        else:
            lam = settings.lam

        fused = np.empty(size, dtype=np.float32)
        for k in range(size):
            if settings.elect:
                if sign[k] == 0:
                    fused[k] = np.float32(0.0)
                    continue
                acc = np.float32(0.0)
                count = 0
                for t in range(n_experts):
                    v = flats[t][k]
                    if v != 0 and _ref_sign(v) == sign[k]:
                        acc = np.float32(acc + v)
                        count += 1
                fused[k] = np.float32(acc / np.float32(count)) if count else np.float32(0.0)
            else:
                acc = np.float32(0.0)
                for t in range(n_experts):
                    acc = np.float32(acc + flats[t][k])
                fused[k] = np.float32(acc / np.float32(n_experts))

        base_flat = base.array(name).reshape(-1)
        lam32 = np.float32(lam)
        out = np.empty(size, dtype=np.float32)
        for k in range(size):
            out[k] = np.float32(base_flat[k] + np.float32(lam32 * fused[k]))
        merged_tensors.append(
            Tensor.from_f32(name, out.reshape(shape), base[name].dtype))
    return TensorMap(merged_tensors)


# ---------------------------------------------------------------------------
# Randomized instance generation (shared by the verify command and tests)
# ---------------------------------------------------------------------------

def random_instance(rng: np.random.Generator, max_experts: int = 4,
                    max_elements: int = 64
                    ) -> tuple[TensorMap, list[TensorMap], MergeSettings]:
    """Draw a small random merge instance covering the whole option matrix."""
    n_experts = int(rng.integers(1, max_experts + 1))
    n_tensors = int(rng.integers(1, 4))
    use_activation = bool(rng.random() < 0.25)

    shapes = {}
    dtypes = {}
    for i in range(n_tensors):
        name = f"t{i}"
        if use_activation or rng.random() < 0.6:
            rows = int(rng.integers(1, 9))
            cols = int(rng.integers(1, max(2, max_elements // rows) + 1))
            shapes[name] = (rows, cols)
        else:
            shapes[name] = (int(rng.integers(1, max_elements + 1)),)
        dtypes[name] = Dtype.F32 if rng.random() < 0.8 else (
            Dtype.F16 if rng.random() < 0.5 else Dtype.BF16)

    def _draw_map(center: dict[str, np.ndarray] | None) -> TensorMap:
        arrays = {}
        for name, shape in shapes.items():
            v = rng.normal(0.0, 0.5, size=shape).astype(np.float32)
            if center is not None:
                v = center[name] + rng.normal(0.0, 0.2, size=shape).astype(np.float32)
            arrays[name] = v
        return TensorMap.from_arrays(arrays, dtypes)

    base = _draw_map(None)
    base_arrays = base.arrays()
    experts = [_draw_map(base_arrays) for _ in range(n_experts)]

    norms = None
    if use_activation:
        norms = TensorMap.from_arrays({
            name: np.abs(rng.normal(0.0, 1.0, size=shape[1])).astype(np.float32)
            for name, shape in shapes.items() if len(shape) == 2})

    def _draw_spec() -> PruneSpec:
        method = str(rng.choice([METHOD_NODROP, METHOD_RANDOM, METHOD_TOPK,
                                 METHOD_MAGPRUNE]))
        granularity = str(rng.choice([GRANULARITY_ROW, GRANULARITY_LAYER]))
        score = SCORE_ACTIVATION if (use_activation and method in (METHOD_TOPK, METHOD_MAGPRUNE)) \
            else SCORE_MAGNITUDE
        p = float(rng.uniform(0.0, 1.0))
        kwargs = dict(granularity=granularity, score=score,
                      seed=int(rng.integers(0, 2**32)),
                      activation_norms=norms if score == SCORE_ACTIVATION else None)
        if method == METHOD_RANDOM:
            spec = PruneSpec(method, p=p, rescale=bool(rng.random() < 0.8), **kwargs)
        elif method == METHOD_MAGPRUNE:
            eps = float(rng.uniform(0.0, 2.0 * min(p, 1.0 - p)))
            spec = PruneSpec(method, p=p, epsilon=eps,
                             rescale=bool(rng.random() < 0.8), **kwargs)
        elif method == METHOD_TOPK:
            spec = PruneSpec(method, keep_fraction=float(rng.uniform(0.0, 1.0)), **kwargs)
        else:
            spec = PruneSpec(method, **kwargs)
        return spec

    if rng.random() < 0.3:
        spec: PruneSpec | tuple[PruneSpec, ...] = tuple(_draw_spec() for _ in range(n_experts))
    else:
        spec = _draw_spec()

    elect_enabled = bool(rng.random() < 0.7)
    if elect_enabled and rng.random() < 0.3:
        settings = MergeSettings(prune=spec, elect=True, lambda_mode=LAMBDA_ADAPTIVE)
    else:
        settings = MergeSettings(prune=spec, elect=elect_enabled,
                                 lambda_mode=LAMBDA_CONSTANT,
                                 lam=float(rng.uniform(0.0, 2.0)))
    return base, experts, settings
