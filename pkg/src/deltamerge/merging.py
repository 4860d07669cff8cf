"""Merge pipeline: deltas -> drop -> elect -> fuse -> apply.

All tensor arithmetic is float32 with a fixed accumulation order
(expert-list order, element-wise), so merges are bit-reproducible for a
given configuration and seed. Election compares the signs of the pruned
deltas; dropped elements (exact zeros) are never members of a position's
electorate. Fusion averages the members' values; positions whose delta sum
cancels to exactly zero fuse to zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .container import (FORMAT_VERSION, Dtype, Tensor, TensorMap,
                        check_homologous, load_container, save_container,
                        write_file_atomic)
from .errors import ConfigError, HomologyError
from .pruning import PruneOutcome, PruneSpec, _group_view, prune
from .rng import RNG_VERSION

LAMBDA_CONSTANT = "constant"
LAMBDA_ADAPTIVE = "adaptive"
LAMBDA_MODES = (LAMBDA_CONSTANT, LAMBDA_ADAPTIVE)


@dataclass(frozen=True)
class MergeSettings:
    """Pipeline switches shared by the real merge and the reference oracle."""

    prune: PruneSpec | tuple[PruneSpec, ...]
    elect: bool = True
    lambda_mode: str = LAMBDA_CONSTANT
    lam: float = 1.0

    def validate(self, expert_count: int) -> None:
        if expert_count < 1:
            raise ConfigError("at least one expert is required")
        if self.lambda_mode not in LAMBDA_MODES:
            raise ConfigError(f"unknown lambda mode '{self.lambda_mode}'")
        if self.lambda_mode == LAMBDA_CONSTANT and self.lam < 0.0:
            raise ConfigError(f"constant lambda must be >= 0, got {self.lam}")
        if self.lambda_mode == LAMBDA_ADAPTIVE and not self.elect:
            raise ConfigError("adaptive lambda requires the elect step")
        if isinstance(self.prune, tuple) and len(self.prune) != expert_count:
            raise ConfigError(
                f"{len(self.prune)} prune specs for {expert_count} experts"
            )

    def specs_for(self, expert_count: int) -> list[PruneSpec]:
        if isinstance(self.prune, tuple):
            return list(self.prune)
        return [self.prune] * expert_count


@dataclass(frozen=True)
class MergeConfig:
    """A full merge job: checkpoint paths plus pipeline settings."""

    base: str
    experts: tuple[str, ...]
    output: str
    settings: MergeSettings


@dataclass
class Election:
    """Per-position dominant sign and electorate size, keyed by tensor name."""

    sign: dict[str, np.ndarray]
    member_count: dict[str, np.ndarray]


@dataclass
class MergeReport:
    config: dict
    per_expert: list[dict]
    election: dict | None
    rng_version: str = RNG_VERSION
    format_version: str = FORMAT_VERSION

    def to_json_dict(self) -> dict:
        return {
            "config": self.config,
            "per_expert": self.per_expert,
            "election": self.election,
            "rng_version": self.rng_version,
            "format_version": self.format_version,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2)


def _sign_i8(x: np.ndarray) -> np.ndarray:
    return (x > 0).astype(np.int8) - (x < 0).astype(np.int8)


def _require_same_names(maps: Sequence[TensorMap]) -> list[str]:
    names = maps[0].names()
    for i, m in enumerate(maps[1:], start=1):
        if m.names() != names:
            raise HomologyError(f"tensor map {i} does not share the first map's tensor names")
    return names


def compute_deltas(base: TensorMap, expert: TensorMap) -> TensorMap:
    """Per-element expert minus base, in float32."""
    _require_same_names([base, expert])
    tensors = []
    for name in base.names():
        b, e = base.array(name), expert.array(name)
        if b.shape != e.shape:
            raise HomologyError(f"shape mismatch for tensor '{name}'")
        tensors.append(Tensor.from_f32(name, e - b, Dtype.F32))
    return TensorMap(tensors)


def elect(pruned_deltas: Sequence[TensorMap]) -> Election:
    """Pick each position's dominant sign: the sign of the cross-expert sum.

    member_count is the number of experts whose value at the position is
    nonzero with that sign. The sum accumulates in float32, expert-list
    order, so results do not depend on scheduling.
    """
    names = _require_same_names(pruned_deltas)
    sign: dict[str, np.ndarray] = {}
    member_count: dict[str, np.ndarray] = {}
    for name in names:
        total = np.zeros(pruned_deltas[0][name].shape, dtype=np.float32)
        for m in pruned_deltas:
            total = total + m.array(name)
        s = _sign_i8(total)
        counts = np.zeros(total.shape, dtype=np.int32)
        for m in pruned_deltas:
            d = m.array(name)
            counts += ((d != 0) & (_sign_i8(d) == s)).astype(np.int32)
        sign[name] = s
        member_count[name] = counts
    return Election(sign=sign, member_count=member_count)


def fuse(pruned_deltas: Sequence[TensorMap], election: Election | None = None) -> TensorMap:
    """Average the pruned deltas per position.

    With an election only members (nonzero, sign-matching) contribute and the
    divisor is the member count; sign-zero positions fuse to zero. Without an
    election every expert contributes and the divisor is the expert count.
    """
    names = _require_same_names(pruned_deltas)
    tensors = []
    for name in names:
        total = np.zeros(pruned_deltas[0][name].shape, dtype=np.float32)
        if election is None:
            for m in pruned_deltas:
                total = total + m.array(name)
            fused = total / np.float32(len(pruned_deltas))
        else:
            s = election.sign[name]
            counts = np.zeros(total.shape, dtype=np.int32)
            for m in pruned_deltas:
                d = m.array(name)
                member = (d != 0) & (_sign_i8(d) == s)
                total = total + np.where(member, d, np.float32(0.0))
                counts += member.astype(np.int32)
            quotient = total / np.maximum(counts, 1).astype(np.float32)
            fused = np.where(s != 0, quotient, np.float32(0.0))
        tensors.append(Tensor.from_f32(name, fused, Dtype.F32))
    return TensorMap(tensors)


def apply_deltas(base: TensorMap, delta_avg: TensorMap, lam: float) -> TensorMap:
    """base + lam * delta, element-wise float32; output keeps base dtypes."""
    _require_same_names([base, delta_avg])
    lam32 = np.float32(lam)
    tensors = []
    for name in base.names():
        b = base.array(name)
        d = delta_avg.array(name)
        if b.shape != d.shape:
            raise HomologyError(f"shape mismatch for tensor '{name}'")
        tensors.append(Tensor.from_f32(name, b + lam32 * d, base[name].dtype))
    return TensorMap(tensors)


def adaptive_rescale(pruned_deltas: Sequence[TensorMap], election: Election,
                     specs: Sequence[PruneSpec]) -> list[TensorMap]:
    """Compensate drop and election losses per expert and ranking group.

    For expert t and group g the effective drop rate is the fraction of
    elements that are zero after the drop step or unelected; surviving
    elected elements are multiplied by 1/(1 - p_eff). Groups that lost
    everything contribute zeros. Unelected elements never participate in
    fusion, so they are zeroed as well.
    """
    out = []
    for m, spec in zip(pruned_deltas, specs):
        tensors = []
        for name in m.names():
            d = m.array(name)
            s = election.sign[name]
            elected = (d != 0) & (_sign_i8(d) == s)
            dmat = _group_view(d, spec.granularity)
            emat = _group_view(elected, spec.granularity)
            group_size = dmat.shape[1]
            if group_size == 0:
                tensors.append(Tensor.from_f32(name, d, Dtype.F32))
                continue
            kept = emat.sum(axis=1)
            p_eff = (group_size - kept) / group_size
            denom = np.where(kept > 0, 1.0 - p_eff, 1.0)
            factor = np.where(kept > 0, 1.0 / denom, 0.0)
            scaled = (dmat.astype(np.float64) * factor[:, None]).astype(np.float32)
            rescaled = np.where(emat, scaled, np.float32(0.0)).reshape(d.shape)
            tensors.append(Tensor.from_f32(name, rescaled, Dtype.F32))
        out.append(TensorMap(tensors))
    return out


def _election_report(election: Election, expert_count: int) -> dict:
    report = {}
    for name, counts in election.member_count.items():
        sign = election.sign[name]
        hist = np.bincount(counts.ravel(), minlength=expert_count + 1)
        contested = sign != 0
        if contested.any():
            rate = float(counts[contested].mean() / expert_count)
        else:
            rate = 0.0
        report[name] = {
            "histogram": {str(i): int(c) for i, c in enumerate(hist)},
            "agreement_rate": rate,
        }
    return report


def _expert_report(outcomes: dict[str, PruneOutcome]) -> dict:
    per_tensor = {name: out.dropped_fraction for name, out in sorted(outcomes.items())}
    total = sum(o.mask.size for o in outcomes.values())
    dropped = sum(int(o.mask.sum()) for o in outcomes.values())
    return {
        "dropped_fraction": per_tensor,
        "overall_dropped_fraction": float(dropped / total) if total else 0.0,
    }


def merge_tensor_maps(base: TensorMap, experts: Sequence[TensorMap],
                      settings: MergeSettings, threads: int = 1
                      ) -> tuple[TensorMap, MergeReport]:
    """Run the full in-memory pipeline and produce the merged map plus report."""
    settings.validate(len(experts))
    check_homologous(base, experts)
    specs = settings.specs_for(len(experts))

    pruned_maps: list[TensorMap] = []
    per_expert: list[dict] = []
    for expert, spec in zip(experts, specs):
        deltas = compute_deltas(base, expert)
        outcomes = prune(deltas, spec, threads=threads)
        pruned_maps.append(TensorMap.from_arrays(
            {name: outcomes[name].pruned for name in deltas.names()}))
        per_expert.append(_expert_report(outcomes))

    election = elect(pruned_maps) if settings.elect else None
    lam = settings.lam
    if settings.lambda_mode == LAMBDA_ADAPTIVE:
        pruned_maps = adaptive_rescale(pruned_maps, election, specs)
        lam = 1.0

    delta_avg = fuse(pruned_maps, election)
    merged = apply_deltas(base, delta_avg, lam)

    report = MergeReport(
        config={
            "expert_count": len(experts),
            "elect": settings.elect,
            "lambda_mode": settings.lambda_mode,
            "lambda": lam,
            "prune": [spec.to_json_dict() for spec in specs],
        },
        per_expert=per_expert,
        election=_election_report(election, len(experts)) if election else None,
    )
    return merged, report


def report_path(output: str) -> str:
    return str(output) + ".report.json"


def merge(config: MergeConfig, threads: int = 1) -> tuple[TensorMap, MergeReport]:
    """Load, merge and save: the end-to-end job described by a MergeConfig."""
    base = load_container(config.base)
    experts = [load_container(p) for p in config.experts]
    merged, report = merge_tensor_maps(base, experts, config.settings, threads=threads)
    report.config["base"] = str(config.base)
    report.config["experts"] = [str(p) for p in config.experts]
    report.config["output"] = str(config.output)
    save_container(merged, config.output)
    write_file_atomic(report_path(config.output), report.to_json().encode("utf-8") + b"\n")
    return merged, report
