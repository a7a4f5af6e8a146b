"""
Command line interface::

    rankpipe serve          run the HTTP scoring service
    rankpipe replay         replay a trace against a service and print run metrics
    rankpipe bench          run the acceptance measurements and write a report
    rankpipe tune           offline tuning of the pipeline parameters
    rankpipe train-shedder  train the pruning model of the load shedder
    rankpipe gen-workload   generate a synthetic trace
    rankpipe build-cube     build a cube (and model generation) directory

Exit codes: 0 ok, 1 configuration error, 2 runtime failure.
"""
import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence

from . import __version__, config, costs, pipeline
from .bench import SECTIONS, BenchSettings, bench
from .client import ServiceClient
from .cube import SparseParameter, all_disk, all_memory, build, mark_done, memory_first
from .errors import ConfigError, RankpipeError
from .models import DEFAULT_MODELS, write_synthetic_generation
from .scorer import model_path, random_model
from .scorer import save as save_model
from .service import ScoringService, ServiceConfig, serve
from .shedding import (
    OverloadDetector,
    label_requests,
    read_shed_logs,
    save_pruner,
    synthetic_final_scorer,
    train_pruner,
    write_shed_logs,
)
from .space import ParameterSpace
from .stages import serving_pipeline
from .tuning import (
    DEFAULT_COST_PROFILE,
    PipelineHarness,
    collect_logs,
    default_space,
    desk_allocator_model,
    fit_surrogates,
    run_plan,
    tune,
    write_logs,
    write_overlay,
    write_report,
)
from .workload import WorkloadSpec, calibrate_zipf, generate, read_trace, replay, write_trace

LOG = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_FAILURE = 2


def _dump(doc: Any, path: Optional[str]) -> None:
    text = json.dumps(doc, indent=2, default=str)
    if path:
        with open(path, "w", encoding="utf-8") as fd:
            fd.write(text)
    else:
        print(text)


def _service_config(args: argparse.Namespace) -> ServiceConfig:
    service_config = ServiceConfig.load(args.config) if args.config else ServiceConfig()
    return service_config.override(
        listen=getattr(args, "listen", None),
        pipeline_config=getattr(args, "pipeline", None),
        model_root=getattr(args, "model_root", None),
        poll_interval=getattr(args, "poll_interval", None),
        shedder_model=getattr(args, "shedder_model", None),
        capacity_rps=getattr(args, "capacity_rps", None),
        force_overload=getattr(args, "force_overload", None) or None,
        watch=False if getattr(args, "no_watch", False) else None,
        query_cache=False if getattr(args, "no_query_cache", False) else None,
        cube_cache=False if getattr(args, "no_cube_cache", False) else None,
    )


def cmd_serve(args: argparse.Namespace) -> int:
    service_config = _service_config(args).validate()
    handle = serve(service_config)
    LOG.info("listening on %s", handle.url)
    try:
        handle.serve_forever()
    except KeyboardInterrupt:
        LOG.info("interrupted")
    finally:
        handle.shutdown()
    return EXIT_OK


def cmd_replay(args: argparse.Namespace) -> int:
    trace = read_trace(args.trace)
    if args.model_root:
        service_config = _service_config(args).override(watch=False).validate()
        with ScoringService(service_config) as service:
            result = replay(trace, service, args.speed, args.max_inflight)
    else:
        client = ServiceClient(args.url, timeout=args.timeout)
        try:
            result = replay(trace, client, args.speed, args.max_inflight)
        finally:
            client.close()
    _dump(result.summary(), args.output)
    return EXIT_OK if not result.failed else EXIT_FAILURE


def cmd_bench(args: argparse.Namespace) -> int:
    sections = list(args.section or [s for s in SECTIONS if s != "offline_tuning"])
    if args.with_tune and "offline_tuning" not in sections:
        sections.append("offline_tuning")
    settings = BenchSettings(
        model_root=args.model_root,
        work_dir=args.work_dir,
        seed=args.seed,
        quick=args.quick,
        sections=sections,
    )
    trace = read_trace(args.trace) if args.trace else None
    report = bench(settings, trace, args.report)
    for name, section in report["sections"].items():
        print(f"{name:20s} {'pass' if section['pass'] else 'FAIL'}")
    return EXIT_OK if report["pass"] else EXIT_FAILURE


def cmd_tune(args: argparse.Namespace) -> int:
    space = ParameterSpace.load(args.space) if args.space else default_space()
    if args.pipeline:
        pipeline_config = pipeline.load_pipeline_config(args.pipeline)
    else:
        pipeline_config = serving_pipeline(costs=DEFAULT_COST_PROFILE)
    service_config = ServiceConfig(model_root=args.model_root)
    if not os.path.isdir(args.model_root):
        raise ConfigError(f"model root {args.model_root} does not exist")

    trace = read_trace(args.trace)
    if args.requests:
        trace = trace[: args.requests]
    harness = PipelineHarness(pipeline_config, service_config, trace, space)

    if args.allocator_model == "desk":
        costs.set_allocator_hook(desk_allocator_model)

    plan_size = args.plan_size or space.dimension * 10
    logs = collect_logs(harness, run_plan(space, plan_size, args.seed), args.repetitions)
    if args.logs:
        write_logs(logs, args.logs)
    surrogates = fit_surrogates(logs, space, seed=args.seed)
    result = tune(
        space,
        surrogates,
        finalists=args.finalists,
        harness=harness,
        budget=args.budget,
        seed=args.seed,
        slack=args.slack,
    )

    write_overlay(space, result.recommended, args.overlay)
    write_report(result.report, args.report)
    LOG.info("wrote overlay %s and report %s", args.overlay, args.report)
    return EXIT_OK


def cmd_train_shedder(args: argparse.Namespace) -> int:
    if args.logs:
        logs = read_shed_logs(args.logs)
    elif args.trace:
        if not args.capacity_rps:
            raise ConfigError("labelling a trace needs --capacity-rps")
        detector = OverloadDetector(args.capacity_rps, args.capacity_fraction, args.window)
        logs = label_requests(
            read_trace(args.trace),
            synthetic_final_scorer(),
            args.slate_size,
            args.epsilon,
            detector,
        )
        if args.write_logs:
            write_shed_logs(logs, args.write_logs)
    else:
        raise ConfigError("either --logs or --trace is required")

    model = train_pruner(logs, epochs=args.epochs, seed=args.seed, epsilon=args.epsilon)
    save_pruner(model, args.output)
    _dump(model.metadata, None)
    return EXIT_OK


def cmd_gen_workload(args: argparse.Namespace) -> int:
    values: Dict[str, Any] = WorkloadSpec.load(args.spec).to_dict() if args.spec else {}
    flags = {
        "key_universe": args.key_universe,
        "zipf_exponent": args.zipf_exponent,
        "user_count": args.users,
        "item_count": args.items,
        "recurrence_prob": args.recurrence_prob,
        "recurrence_window": args.recurrence_window,
        "duration": args.duration,
        "base_rate": args.base_rate,
        "day_length": args.day_length,
        "candidates": args.candidates,
        "feedback_fraction": args.feedback_fraction,
        "seed": args.seed,
    }
    values.update({k: v for k, v in flags.items() if v is not None})

    if args.calibrate:
        top, mass = (float(v) for v in args.calibrate.split(":"))
        universe = values.get("key_universe", WorkloadSpec.key_universe)
        values["zipf_exponent"] = calibrate_zipf(universe, top, mass)
        LOG.info("calibrated zipf exponent %.6f", values["zipf_exponent"])

    spec = WorkloadSpec.from_dict(values)
    count = write_trace(generate(spec), args.output)
    LOG.info("wrote %d requests to %s", count, args.output)
    return EXIT_OK


def _placement(name: str):
    if name == "memory":
        return all_memory
    if name == "disk":
        return all_disk
    if name.startswith("memory-first:"):
        return memory_first(int(name.split(":", 1)[1]))
    raise ConfigError(f"unknown placement policy {name}")


def _read_pairs(path: str):
    with open(path, "r", encoding="utf-8") as fd:
        for line in fd:
            if line.strip():
                doc = json.loads(line)
                yield doc["feature"], SparseParameter(
                    doc["embedding"], doc.get("show", 0.0), doc.get("click", 0.0)
                )


def cmd_build_cube(args: argparse.Namespace) -> int:
    placement = _placement(args.placement)
    if args.synthetic:
        manifest = write_synthetic_generation(
            args.output,
            args.generation,
            key_universe=args.key_universe,
            embedding_dim=args.embedding_dim,
            seed=args.seed,
            placement_policy=placement,
            block_size_bytes=args.block_size,
            shard_count=args.shards,
        )
    else:
        if not args.input:
            raise ConfigError("build-cube needs --input or --synthetic")
        manifest = build(
            _read_pairs(args.input),
            args.output,
            placement_policy=placement,
            block_size_bytes=args.block_size,
            shard_count=args.shards,
            generation=args.generation,
            write_done=False,
        )
        if args.random_models:
            for i, (name, slots) in enumerate(sorted(DEFAULT_MODELS.items())):
                model = random_model(
                    name,
                    slots,
                    manifest.embedding_dim,
                    generation=manifest.generation,
                    seed=args.seed + i,
                )
                save_model(model, model_path(args.output, name))
        mark_done(args.output)

    LOG.info(
        "built generation %d in %s: %d blocks",
        manifest.generation,
        args.output,
        len(manifest.blocks),
    )
    return EXIT_OK


def _add_service_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="service configuration file (JSON)")
    parser.add_argument("--model-root", help=f"model root (default {config.MODEL_ROOT})")
    parser.add_argument("--pipeline", help="pipeline configuration file (JSON)")
    parser.add_argument("--shedder-model", help="pruning model file")
    parser.add_argument("--capacity-rps", type=float, help="capacity for overload detection")
    parser.add_argument("--force-overload", action="store_true", help="always shed")
    parser.add_argument("--no-query-cache", action="store_true")
    parser.add_argument("--no-cube-cache", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rankpipe", description=__doc__.splitlines()[1])
    parser.add_argument("--version", action="version", version=f"rankpipe {__version__}")
    parser.add_argument(
        "--log-level", default=config.LOG_LEVEL, help="logging level (default %(default)s)"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("serve", help="run the HTTP scoring service")
    _add_service_flags(p)
    p.add_argument("--listen", help=f"host:port (default {config.LISTEN_ADDRESS})")
    p.add_argument("--poll-interval", type=float, help="model watch poll interval in seconds")
    p.add_argument("--no-watch", action="store_true", help="do not watch for new generations")
    p.set_defaults(func=cmd_serve)

    p = commands.add_parser("replay", help="replay a trace and print run metrics")
    _add_service_flags(p)
    p.add_argument("--trace", required=True)
    p.add_argument("--url", help="service URL (default http://LISTEN_ADDRESS)")
    p.add_argument("--speed", type=float, default=0.0, help="0 replays as fast as possible")
    p.add_argument("--max-inflight", type=int, default=16)
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--output", help="metrics file (default stdout)")
    p.set_defaults(func=cmd_replay)

    p = commands.add_parser("bench", help="run the acceptance measurements")
    p.add_argument("--model-root", help="model root (default: a synthetic generation)")
    p.add_argument("--trace", help="trace for the replay-based sections")
    p.add_argument("--report", default="bench-report.json")
    p.add_argument("--work-dir")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true", help="scaled-down smoke run")
    p.add_argument("--section", action="append", choices=SECTIONS)
    p.add_argument("--with-tune", action="store_true", help="include offline tuning")
    p.set_defaults(func=cmd_bench)

    p = commands.add_parser("tune", help="offline tuning of pipeline parameters")
    p.add_argument("--pipeline", help="base pipeline configuration (default: serving pipeline)")
    p.add_argument("--space", help="parameter space file (default: built-in space)")
    p.add_argument("--trace", required=True)
    p.add_argument("--model-root", default=config.MODEL_ROOT)
    p.add_argument("--requests", type=int, help="use only the first N requests of the trace")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--budget", type=int, default=config.CMA_ES_BUDGET)
    p.add_argument("--plan-size", type=int, help="random points measured (default 10 x dim)")
    p.add_argument("--repetitions", type=int, default=1)
    p.add_argument("--finalists", type=int, default=config.FINALISTS)
    p.add_argument("--slack", type=float, default=config.LATENCY_SLACK)
    p.add_argument("--allocator-model", choices=("none", "desk"), default="none")
    p.add_argument("--logs", help="also write the collected stage logs here")
    p.add_argument("--overlay", default="tuned-overlay.json")
    p.add_argument("--report", default="tuning-report.json")
    p.set_defaults(func=cmd_tune)

    p = commands.add_parser("train-shedder", help="train the pruning model")
    p.add_argument("--logs", help="shed-log file (JSON lines)")
    p.add_argument("--trace", help="label a trace instead of reading shed logs")
    p.add_argument("--write-logs", help="write the labelled shed logs here")
    p.add_argument("--epsilon", type=float, default=config.SHED_EPSILON)
    p.add_argument("--slate-size", type=int, default=10)
    p.add_argument("--capacity-rps", type=float)
    p.add_argument("--capacity-fraction", type=float, default=config.CAPACITY_FRACTION)
    p.add_argument("--window", type=float, default=1.0, help="arrival rate window in seconds")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", default="pruner.bin")
    p.set_defaults(func=cmd_train_shedder)

    p = commands.add_parser("gen-workload", help="generate a synthetic trace")
    p.add_argument("--spec", help="workload spec file (JSON); flags override it")
    p.add_argument("--calibrate", metavar="TOP:MASS", help="calibrate the exponent, e.g. 0.01:0.8")
    p.add_argument("--key-universe", type=int)
    p.add_argument("--zipf-exponent", type=float)
    p.add_argument("--users", type=int)
    p.add_argument("--items", type=int)
    p.add_argument("--recurrence-prob", type=float)
    p.add_argument("--recurrence-window", type=float)
    p.add_argument("--duration", type=float)
    p.add_argument("--base-rate", type=float)
    p.add_argument("--day-length", type=float)
    p.add_argument("--candidates", type=int)
    p.add_argument("--feedback-fraction", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_gen_workload)

    p = commands.add_parser("build-cube", help="build a cube directory")
    p.add_argument("--output", required=True)
    p.add_argument("--input", help="JSON lines of {feature, embedding, show, click}")
    p.add_argument("--synthetic", action="store_true", help="random cube and dense models")
    p.add_argument("--random-models", action="store_true", help="add random dense models")
    p.add_argument("--generation", type=int, default=1)
    p.add_argument("--key-universe", type=int, default=10_000)
    p.add_argument("--embedding-dim", type=int, default=8)
    p.add_argument("--block-size", type=int, default=config.BLOCK_SIZE_BYTES)
    p.add_argument("--shards", type=int, default=1)
    p.add_argument("--placement", default="memory", help="memory, disk or memory-first:N")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_build_cube)

    return parser


def main(argv: Sequence[str] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=args.log_level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as e:
        LOG.error("configuration error: %s", e)
        return EXIT_CONFIG
    except RankpipeError as e:
        LOG.error("%s", e)
        return EXIT_FAILURE
    except OSError as e:
        LOG.error("%s", e)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
