"""Command-line front end: generate, sweep, prepare-refs, evaluate, inspect-cache."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .attention import FeatureCache
from .backends import resolve_backend
from .evaluation import RandomConvExtractor, metric_report, write_report
from .pipeline import (
    SWEEP_AXES,
    ConfigError,
    RunConfig,
    apply_overrides,
    prepare_references,
    sweep,
    synthesize,
    with_axis,
    write_result,
    write_sweep,
)
from .references import load_image, save_trajectories

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

DEFAULT_SWEEPS = {
    "lambda": [0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 1.0],
    "eta": [0.0, 0.25, 0.5, 0.75, 1.0],
    "gamma": [0.0, 20.0, 40.0, 60.0, 80.0],
}

log = logging.getLogger("sketchstyle")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sketchstyle", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, needs_spec=True):
        p.add_argument("--spec", required=needs_spec, help="JSON run-spec file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a run-spec field (dotted keys, repeatable)")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--backend", default="toy", help="'toy' or 'adapter:<name>'")
        p.add_argument("--trace", action="store_true", help="write a per-step trace")

    common(sub.add_parser("generate", help="synthesize one sketch"))
    sp = sub.add_parser("sweep", help="synthesize along one parameter axis")
    common(sp)
    sp.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sp.add_argument("--values", help="comma-separated values (defaults exist for lambda, eta, gamma)")
    sp.add_argument("--jobs", type=int, default=1, help="worker processes for sweep cells")
    common(sub.add_parser("prepare-refs", help="invert references and cache their features"))
    ep = sub.add_parser("evaluate", help="write a CSV metric report")
    common(ep)
    ep.add_argument("--image", help="evaluate this PNG instead of generating one")
    ep.add_argument("--run-id", default=None)
    ip = sub.add_parser("inspect-cache", help="summarize a feature cache file")
    ip.add_argument("cache", help="feature cache file")
    return parser


def _load_config(args) -> RunConfig:
    path = Path(args.spec)
    if not path.is_file():
        raise ConfigError(f"spec: no such file {path}")
    base = RunConfig.load(path)
    cfg = RunConfig.from_dict(apply_overrides(base.to_dict(), args.overrides))
    for ref in cfg.references:
        if not Path(ref).is_file():
            raise ConfigError(f"references: no such file {ref}")
    return cfg


def _parse_values(args) -> list[float]:
    if args.values is None:
        if args.axis not in DEFAULT_SWEEPS:
            raise ConfigError(f"values: no default sweep for axis {args.axis}; pass --values")
        return DEFAULT_SWEEPS[args.axis]
    try:
        return [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"values: {exc}") from exc


def _write_json(path: Path, payload) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2))
    tmp.replace(path)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "inspect-cache":
            return _inspect(args.cache)
        cfg = _load_config(args)
        backend = resolve_backend(args.backend)
        values = None
        if args.verb == "sweep":
            values = _parse_values(args)
            if not values:
                raise ConfigError("values: at least one sweep value is required")
            for v in values:
                with_axis(cfg, args.axis, v)
        if args.verb == "evaluate" and args.image and not Path(args.image).is_file():
            raise ConfigError(f"image: no such file {args.image}")
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID

    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if args.verb == "generate":
            result = synthesize(cfg, backend, trace=args.trace)
            write_result(result, out / "output.png")
            _write_json(out / "output.json", result.config_echo)
            print(out / "output.png")
        elif args.verb == "sweep":
            res = sweep(cfg, args.axis, values, backend, jobs=args.jobs)
            print(write_sweep(res, out))
        elif args.verb == "prepare-refs":
            if not cfg.references:
                raise ConfigError("references: prepare-refs needs at least one reference")
            prepared = prepare_references(cfg, backend)
            prepared.cache.save(out / "features.skfc")
            save_trajectories(prepared.bundles, out / "trajectories.npz")
            _write_json(out / "references.json", {
                "references": list(cfg.references),
                "layer_ids": sorted(prepared.layer_ids),
                "steps": prepared.steps,
                "entries": len(prepared.cache),
            })
            print(out / "features.skfc")
        elif args.verb == "evaluate":
            _evaluate(args, cfg, backend, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - surfaced as exit code 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _evaluate(args, cfg: RunConfig, backend, out: Path) -> None:
    shape = backend.image_shape()
    if args.image:
        image = load_image(args.image, shape)
        source = str(args.image)
    else:
        result = synthesize(cfg, backend)
        write_result(result, out / "output.png")
        image, source = result.image, str(out / "output.png")
    refs = [load_image(p, shape) for p in cfg.references]
    run_id = args.run_id or Path(args.spec).stem
    rows = metric_report(run_id, image, cfg.prompt, refs, RandomConvExtractor(in_channels=shape[0]))
    write_report(rows, out / "report.csv")
    _write_json(out / "report.json", {
        "run_id": run_id,
        "image": source,
        "extractor": "random_conv(seed=0)",
        "brightened_before_metrics": True,
        "config": cfg.to_dict(),
        "metrics": {name: value for _, name, value in rows},
    })
    print(out / "report.csv")


def _inspect(path: str) -> int:
    try:
        cache = FeatureCache.load(path)
    except (OSError, ValueError) as exc:
        print(f"error: cache: {exc}", file=sys.stderr)
        return EXIT_INVALID
    print(f"{path}: {len(cache)} entries")
    print(f"  references: {cache.num_refs}")
    ts = cache.timesteps
    print(f"  timesteps:  {len(ts)} ({ts[0]} .. {ts[-1]})" if ts else "  timesteps:  0")
    for layer in cache.layer_ids:
        sample = next(r for (l, _), refs in cache.entries.items() if l == layer for r in refs)
        q = "yes" if sample.Q is not None else "no"
        print(f"  layer {layer}: K/V {sample.K.shape[0]}x{sample.K.shape[1]} float32, queries: {q}")
    return EXIT_OK


def main() -> None:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
