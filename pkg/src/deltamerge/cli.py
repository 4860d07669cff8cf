"""Command-line front end.

    deltamerge merge <config.json> [--threads N]
    deltamerge prune <config.json>
    deltamerge inspect <checkpoint>
    deltamerge verify <config.json>

Results go to stdout as JSON; errors go to stderr as one JSON object.
Exit codes: 0 success, 1 verification check failed, 2 invalid configuration,
3 incompatible checkpoints, 4 I/O or container failure. Configs are explicit
JSON documents (no environment variables); relative paths inside a config
resolve against the config file's directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any

import numpy as np

from .container import (FORMAT_VERSION, TensorMap, load_container,
                        save_container, write_file_atomic)
from .errors import ConfigError, ContainerError, HomologyError
from .merging import (LAMBDA_ADAPTIVE, LAMBDA_CONSTANT, MergeConfig,
                      MergeSettings, apply_deltas, compute_deltas, merge,
                      merge_tensor_maps)
from .oracle import (LinearNodeFixture, node_expectation_check,
                     drop_rate_report, random_instance, reference_pipeline)
from .pruning import (METHOD_MAGPRUNE, METHOD_NODROP, METHOD_RANDOM,
                      METHOD_TOPK, SCORE_ACTIVATION, PruneSpec, prune)
from .rng import RNG_VERSION

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG = 2
EXIT_INCOMPATIBLE = 3
EXIT_IO = 4

_SPEC_KEYS = {"method", "p", "epsilon", "keep_fraction", "granularity",
              "score", "rescale", "seed", "activations"}
_MERGE_KEYS = {"base", "experts", "prune", "elect", "lambda_mode", "lambda", "output"}
_PRUNE_JOB_KEYS = {"base", "expert", "prune", "output"}
_VERIFY_KEYS = {"seed", "trials", "node_fixtures", "fixture_max_len",
                "oracle_instances", "oracle_max_experts", "oracle_max_elements",
                "fixtures"}
_FIXTURE_KEYS = {"weights", "deltas", "x", "spec"}


def _check_keys(obj: dict, allowed: set[str], required: set[str], context: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{context} must be a JSON object")
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {context}: {', '.join(unknown)}")
    missing = sorted(required - set(obj))
    if missing:
        raise ConfigError(f"missing key(s) in {context}: {', '.join(missing)}")


def _number(obj: dict, key: str, context: str, default: float | None = None) -> float:
    if key not in obj:
        if default is None:
            raise ConfigError(f"missing key '{key}' in {context}")
        return default
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"'{key}' in {context} must be a number")
    return float(v)


def _integer(obj: dict, key: str, context: str, default: int | None = None) -> int:
    if key not in obj:
        if default is None:
            raise ConfigError(f"missing key '{key}' in {context}")
        return default
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"'{key}' in {context} must be an integer")
    return v


def _string(obj: dict, key: str, context: str, default: str | None = None) -> str:
    if key not in obj:
        if default is None:
            raise ConfigError(f"missing key '{key}' in {context}")
        return default
    if not isinstance(obj[key], str):
        raise ConfigError(f"'{key}' in {context} must be a string")
    return obj[key]


def _boolean(obj: dict, key: str, context: str, default: bool) -> bool:
    if key not in obj:
        return default
    if not isinstance(obj[key], bool):
        raise ConfigError(f"'{key}' in {context} must be a boolean")
    return obj[key]


def _load_config(path: str) -> tuple[dict, Path]:
    text = Path(path).read_text(encoding="utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    return obj, Path(path).resolve().parent


def _resolve(path: str, config_dir: Path) -> str:
    return str((config_dir / path) if not Path(path).is_absolute() else Path(path))


def _parse_spec(obj: dict, config_dir: Path, context: str,
                allow_sweep: bool = False) -> PruneSpec | list[tuple[float, PruneSpec]]:
    _check_keys(obj, _SPEC_KEYS, {"method"}, context)
    method = _string(obj, "method", context)
    if method not in (METHOD_NODROP, METHOD_RANDOM, METHOD_TOPK, METHOD_MAGPRUNE):
        raise ConfigError(f"unknown method '{method}' in {context}")

    relevant = {"method", "granularity", "score", "rescale", "seed", "activations"}
    if method in (METHOD_RANDOM, METHOD_MAGPRUNE):
        relevant.add("p")
    if method == METHOD_MAGPRUNE:
        relevant.add("epsilon")
    if method == METHOD_TOPK:
        relevant.add("keep_fraction")
    irrelevant = sorted(set(obj) - relevant)
    if irrelevant:
        raise ConfigError(
            f"key(s) not applicable to method '{method}' in {context}: {', '.join(irrelevant)}"
        )

    common: dict[str, Any] = {
        "granularity": _string(obj, "granularity", context, "row"),
        "score": _string(obj, "score", context, "magnitude"),
        "seed": _integer(obj, "seed", context, 0),
    }
    if "rescale" in obj:
        if not isinstance(obj["rescale"], bool):
            raise ConfigError(f"'rescale' in {context} must be a boolean")
        common["rescale"] = obj["rescale"]
    if common["score"] == SCORE_ACTIVATION:
        norms_path = _resolve(_string(obj, "activations", context), config_dir)
        common["activation_norms"] = load_container(norms_path)
        common["norms_path"] = norms_path
    elif "activations" in obj:
        raise ConfigError(f"'activations' in {context} requires score 'activation'")

    if method == METHOD_TOPK:
        return PruneSpec(method, keep_fraction=_number(obj, "keep_fraction", context), **common)
    if method == METHOD_NODROP:
        return PruneSpec(method, **common)

    epsilon = _number(obj, "epsilon", context, 0.0) if method == METHOD_MAGPRUNE else 0.0
    p_raw = obj.get("p")
    if allow_sweep and isinstance(p_raw, list):
        if not p_raw:
            raise ConfigError(f"sweep list 'p' in {context} must be non-empty")
        sweep = []
        for v in p_raw:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"sweep values of 'p' in {context} must be numbers")
            sweep.append((float(v), PruneSpec(method, p=float(v), epsilon=epsilon, **common)))
        return sweep
    p = _number(obj, "p", context)
    return PruneSpec(method, p=p, epsilon=epsilon, **common)


def _parse_merge_config(obj: dict, config_dir: Path) -> MergeConfig:
    _check_keys(obj, _MERGE_KEYS, {"base", "experts", "prune", "output"}, "merge config")
    experts = obj["experts"]
    if (not isinstance(experts, list) or not experts
            or any(not isinstance(e, str) for e in experts)):
        raise ConfigError("'experts' must be a non-empty list of paths")
    prune_obj = obj["prune"]
    if isinstance(prune_obj, list):
        if len(prune_obj) != len(experts):
            raise ConfigError(
                f"{len(prune_obj)} prune specs for {len(experts)} experts"
            )
        spec: PruneSpec | tuple[PruneSpec, ...] = tuple(
            _parse_spec(s, config_dir, f"prune spec {i}") for i, s in enumerate(prune_obj))
    else:
        spec = _parse_spec(prune_obj, config_dir, "prune spec")
    lambda_mode = _string(obj, "lambda_mode", "merge config", LAMBDA_CONSTANT)
    if lambda_mode not in (LAMBDA_CONSTANT, LAMBDA_ADAPTIVE):
        raise ConfigError(f"unknown lambda_mode '{lambda_mode}'")
    if lambda_mode == LAMBDA_ADAPTIVE and "lambda" in obj:
        raise ConfigError("'lambda' is not applicable when lambda_mode is 'adaptive'")
    settings = MergeSettings(
        prune=spec,
        elect=_boolean(obj, "elect", "merge config", True),
        lambda_mode=lambda_mode,
        lam=_number(obj, "lambda", "merge config", 1.0),
    )
    settings.validate(len(experts))
    return MergeConfig(
        base=_resolve(_string(obj, "base", "merge config"), config_dir),
        experts=tuple(_resolve(e, config_dir) for e in experts),
        output=_resolve(_string(obj, "output", "merge config"), config_dir),
        settings=settings,
    )


def _print_error(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}, sort_keys=True), file=sys.stderr)


def _guarded(fn) -> int:
    try:
        return fn()
    except ConfigError as exc:
        _print_error("config", str(exc))
        return EXIT_CONFIG
    except HomologyError as exc:
        _print_error("homology", str(exc))
        return EXIT_INCOMPATIBLE
    except ContainerError as exc:
        _print_error("container", str(exc))
        return EXIT_IO
    except OSError as exc:
        _print_error("io", str(exc))
        return EXIT_IO


def cmd_merge(config_path: str, threads: int = 1) -> int:
    def run() -> int:
        obj, config_dir = _load_config(config_path)
        config = _parse_merge_config(obj, config_dir)
        _, report = merge(config, threads=threads)
        print(report.to_json())
        return EXIT_OK
    return _guarded(run)


def _sweep_output(output: str, p: float) -> str:
    path = Path(output)
    return str(path.with_name(f"{path.stem}_p{p:g}{path.suffix}"))


def cmd_prune(config_path: str) -> int:
    def run() -> int:
        obj, config_dir = _load_config(config_path)
        _check_keys(obj, _PRUNE_JOB_KEYS, {"base", "expert", "prune", "output"}, "prune config")
        parsed = _parse_spec(obj["prune"], config_dir, "prune spec", allow_sweep=True)
        output = _resolve(_string(obj, "output", "prune config"), config_dir)
        base = load_container(_resolve(_string(obj, "base", "prune config"), config_dir))
        expert = load_container(_resolve(_string(obj, "expert", "prune config"), config_dir))
        deltas = compute_deltas(base, expert)

        jobs: list[tuple[str, PruneSpec]]
        if isinstance(parsed, list):
            jobs = [(_sweep_output(output, p), spec) for p, spec in parsed]
        else:
            jobs = [(output, parsed)]

        results = []
        for out_path, spec in jobs:
            outcomes = prune(deltas, spec)
            pruned_map = TensorMap.from_arrays(
                {name: outcomes[name].pruned for name in deltas.names()})
            checkpoint = apply_deltas(base, pruned_map, 1.0)
            save_container(checkpoint, out_path)
            report = {
                "config": spec.to_json_dict(),
                "drop_rate": drop_rate_report(outcomes),
                "rng_version": RNG_VERSION,
                "format_version": FORMAT_VERSION,
            }
            write_file_atomic(out_path + ".report.json",
                              (json.dumps(report, sort_keys=True, indent=2) + "\n").encode())
            results.append({"output": out_path, "report": report})
        print(json.dumps({"outputs": results}, sort_keys=True))
        return EXIT_OK
    return _guarded(run)


def cmd_inspect(checkpoint_path: str) -> int:
    def run() -> int:
        tmap = load_container(checkpoint_path)
        for tensor in tmap:
            arr = tensor.f32()
            zero_fraction = float(np.count_nonzero(arr == 0) / arr.size) if arr.size else 0.0
            print(json.dumps({
                "name": tensor.name,
                "dtype": tensor.dtype.value,
                "shape": list(tensor.shape),
                "zero_fraction": zero_fraction,
            }, sort_keys=True))
        return EXIT_OK
    return _guarded(run)


def _parse_fixture(obj: dict, i: int) -> tuple[LinearNodeFixture, PruneSpec]:
    context = f"fixture {i}"
    _check_keys(obj, _FIXTURE_KEYS, _FIXTURE_KEYS, context)
    try:
        fixture = LinearNodeFixture(weights=np.asarray(obj["weights"], dtype=np.float64),
                                    deltas=np.asarray(obj["deltas"], dtype=np.float64),
                                    x=np.asarray(obj["x"], dtype=np.float64))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{context}: {exc}") from exc
    spec = _parse_spec(obj["spec"], Path("."), f"{context} spec")
    return fixture, spec


def _random_fixture(rng: np.random.Generator, max_len: int
                    ) -> tuple[LinearNodeFixture, PruneSpec]:
    n = int(rng.integers(1, max_len + 1))
    fixture = LinearNodeFixture(weights=rng.normal(0, 1, n), deltas=rng.normal(0, 1, n),
                                x=rng.normal(0, 1, n))
    p = float(rng.uniform(0.05, 0.9))
    if rng.random() < 0.5:
        spec = PruneSpec(METHOD_RANDOM, p=p, seed=int(rng.integers(0, 2**32)))
    else:
        eps = float(rng.uniform(0.0, 1.8 * min(p, 1.0 - p)))
        spec = PruneSpec(METHOD_MAGPRUNE, p=p, epsilon=eps, seed=int(rng.integers(0, 2**32)))
    return fixture, spec


def cmd_verify(config_path: str) -> int:
    def run() -> int:
        obj, _ = _load_config(config_path)
        _check_keys(obj, _VERIFY_KEYS, set(), "verify config")
        seed = _integer(obj, "seed", "verify config", 0)
        trials = _integer(obj, "trials", "verify config", 10_000)
        rng = np.random.default_rng(seed)

        cases: list[tuple[LinearNodeFixture, PruneSpec]] = []
        if "fixtures" in obj:
            if not isinstance(obj["fixtures"], list):
                raise ConfigError("'fixtures' must be a list")
            cases = [_parse_fixture(f, i) for i, f in enumerate(obj["fixtures"])]
        else:
            count = _integer(obj, "node_fixtures", "verify config", 20)
            max_len = _integer(obj, "fixture_max_len", "verify config", 32)
            cases = [_random_fixture(rng, max_len) for _ in range(count)]

        node_results = []
        all_ok = True
        for i, (fixture, spec) in enumerate(cases):
            report = node_expectation_check(fixture, spec, trials)
            ok = abs(report.z_score) < 4.0
            all_ok &= ok
            node_results.append({"fixture": i, "passed": ok,
                                 "report": report.to_json_dict()})

        oracle_results = []
        instances = _integer(obj, "oracle_instances", "verify config", 20)
        max_experts = _integer(obj, "oracle_max_experts", "verify config", 3)
        max_elements = _integer(obj, "oracle_max_elements", "verify config", 48)
        for i in range(instances):
            base, experts, settings = random_instance(rng, max_experts, max_elements)
            merged, _ = merge_tensor_maps(base, experts, settings)
            expected = reference_pipeline(base, experts, settings)
            equal = merged == expected
            all_ok &= equal
            oracle_results.append({"instance": i, "experts": len(experts),
                                   "equal": bool(equal)})

        print(json.dumps({"passed": bool(all_ok), "node_checks": node_results,
                          "pipeline_checks": oracle_results}, sort_keys=True))
        return EXIT_OK if all_ok else EXIT_VERIFY_FAILED
    return _guarded(run)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="deltamerge",
        description="Merge homologous fine-tuned checkpoints by pruning, "
                    "sign-electing and fusing their delta parameters.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_merge = sub.add_parser("merge", help="merge expert checkpoints into one")
    p_merge.add_argument("config", help="JSON merge configuration")
    p_merge.add_argument("--threads", type=int, default=1,
                         help="worker cap; never changes results")

    p_prune = sub.add_parser("prune", help="prune one expert against its base")
    p_prune.add_argument("config", help="JSON prune configuration")

    p_inspect = sub.add_parser("inspect", help="describe a checkpoint container")
    p_inspect.add_argument("checkpoint")

    p_verify = sub.add_parser("verify", help="run statistical and oracle checks")
    p_verify.add_argument("config", help="JSON verify configuration")

    args = parser.parse_args(argv)
    if args.command == "merge":
        return cmd_merge(args.config, threads=args.threads)
    if args.command == "prune":
        return cmd_prune(args.config)
    if args.command == "inspect":
        return cmd_inspect(args.checkpoint)
    return cmd_verify(args.config)


if __name__ == "__main__":
    sys.exit(main())
