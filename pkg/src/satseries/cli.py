"""Command-line entry point: ``satseries <stage> --config PATH``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from pydantic import ValidationError

from .config import load_config
from .hub import HubError, SimulatedClock, TaskState, schedule_lta_requests, DownloadTask

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("satseries")


class JsonFormatter(logging.Formatter):
    def format(self, record):
        d = {"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()}
        if record.exc_info:
            d["exc"] = self.formatException(record.exc_info)
        return json.dumps(d)


def setup_logging(json_logs: bool, verbose: bool = False):
    handler = logging.StreamHandler(sys.stderr)
    if json_logs:
        handler.setFormatter(JsonFormatter())
    else:
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    logging.getLogger("httpx").setLevel(logging.WARNING)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="pipeline configuration (YAML)")
    common.add_argument("--jobs", type=int, default=1, help="worker threads for parallel stages")
    common.add_argument("--dry-run", action="store_true", help="report planned work without writing")
    common.add_argument("--json-logs", action="store_true", help="log JSON lines to stderr")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="satseries", description="Satellite timeseries dataset builder")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("query", parents=[common], help="search the hub, rank products, write a selection file")
    sub.add_parser("download", parents=[common], help="fetch the selected products")
    sub.add_parser("rasterize", parents=[common], help="burn parcel polygons into label grids")
    sub.add_parser("tile", parents=[common], help="cut products into aligned window patches")
    sub.add_parser("assemble", parents=[common], help="group patches into timeseries samples")
    sub.add_parser("all", parents=[common], help="run every stage in order")

    hub = sub.add_parser("mock-hub", help="serve the scripted mock hub")
    hub.add_argument("--catalog", required=True, type=Path)
    hub.add_argument("--host", default="127.0.0.1")
    hub.add_argument("--port", type=int, default=8765)
    hub.add_argument("--chunk-delay", type=float, default=0.0, help="seconds between 4 KiB download chunks")

    demo = sub.add_parser("demo", help="write the synthetic end-to-end fixture")
    demo.add_argument("directory", type=Path)
    demo.add_argument("--hub-url", default="http://127.0.0.1:8765")
    return p


def _query(cfg, args) -> int:
    from . import pipeline

    try:
        res = pipeline.run_query(cfg, pipeline.hub_for(cfg), dry_run=args.dry_run)
    except HubError as exc:
        log.error("hub error: %s", exc)
        return EXIT_CONFIG
    if not res.selected:
        print("warning: no products selected", file=sys.stderr)
    print(f"{res.searched} found, {len(res.ranked)} ranked, {len(res.selected)} selected")
    return EXIT_OK


def _download(cfg, args) -> int:
    from . import pipeline
    from .catalog import read_selection

    hub = pipeline.hub_for(cfg)
    if args.dry_run:
        layout = pipeline.Layout(cfg.output_root)
        tasks = [DownloadTask(e.product_id) for e in read_selection(layout.selection)]
        clock = SimulatedClock()
        try:
            for ev in schedule_lta_requests(tasks, cfg.throttle_policy(), clock, hub.is_online):
                print(f"+{ev.time / 60:8.1f} min  {ev.kind:12s} {ev.product_id}")
        except HubError as exc:
            log.error("hub error: %s", exc)
            return EXIT_CONFIG
        return EXIT_OK
    report = pipeline.run_download(cfg, hub)
    print(f"{len(report.done)} done ({len(report.downloaded)} transferred), {len(report.failed)} failed")
    for pid, reason in report.failed.items():
        print(f"FAILED {pid}: {reason}", file=sys.stderr)
    return EXIT_PARTIAL if report.failed else EXIT_OK


def _rasterize(cfg, args) -> int:
    from . import pipeline

    out = pipeline.run_rasterize(cfg, jobs=args.jobs, dry_run=args.dry_run)
    print(f"labels for {len(out)} tile(s)")
    return EXIT_OK


def _tile(cfg, args) -> int:
    from . import pipeline

    r = pipeline.run_tile(cfg, dry_run=args.dry_run)
    print(f"{r.products} product(s), {r.windows} windows, {r.patches_written} patches written")
    return EXIT_PARTIAL if r.skipped else EXIT_OK


def _assemble(cfg, args) -> int:
    from . import pipeline

    index, stats = pipeline.run_assemble(cfg, jobs=args.jobs, dry_run=args.dry_run)
    if index is not None:
        print(f"{stats.samples} samples ({stats.regenerated} regenerated)")
    return EXIT_OK


def _all(cfg, args) -> int:
    worst = EXIT_OK
    for stage in (_query, _download, _rasterize, _tile, _assemble):
        code = stage(cfg, args)
        if code == EXIT_CONFIG:
            return code
        worst = max(worst, code)
    return worst


STAGES = {"query": _query, "download": _download, "rasterize": _rasterize, "tile": _tile, "assemble": _assemble, "all": _all}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "mock-hub":
        setup_logging(False)
        from .mockhub import serve

        serve(args.catalog, args.host, args.port, args.chunk_delay)
        return EXIT_OK
    if args.command == "demo":
        from .fixtures import build_end_to_end

        fx = build_end_to_end(args.directory, args.hub_url)
        print(f"config: {fx.config}\ncatalog: {fx.catalog}")
        return EXIT_OK

    setup_logging(args.json_logs, args.verbose)
    try:
        cfg = load_config(args.config)
    except ValidationError as exc:
        for err in exc.errors():
            loc = ".".join(str(x) for x in err["loc"])
            msg = err["msg"].removeprefix("Value error, ")
            print(f"config error: {loc}: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.jobs < 1:
        print("config error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG

    from .pipeline import StageError

    try:
        return STAGES[args.command](cfg, args)
    except StageError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except HubError as exc:
        log.error("hub error: %s", exc)
        return EXIT_CONFIG
    except ValueError as exc:
        # parse/format errors carry file and line context in their message
        log.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
