"""Command-line front end for the stitching pipeline.

Subcommands mirror the pipeline stages: register -> solve -> align ->
render, plus graphviz export, the synthetic benchmark, and a pipeline
command chaining all stages. Machine output goes to stdout or files;
logging goes to stderr. Exit codes: 0 success, 2 usage, 3 I/O, 4 schema,
5 pipeline failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench as bench_mod
from .align import align as align_graph
from .align import multigraph_dot, prune, simple_graph_dot
from .errors import RegistrationError, SchemaError, StitchError
from .graph import TileNode, load_graph, save_graph, to_json
from .images import load_manifest, read_raw
from .registration import RegistrationParams, register_all
from .render import render, save_png
from .solver import SolverConfig, solve

log = logging.getLogger("tileweave")

EXIT_OK = 0
EXIT_IO = 3
EXIT_SCHEMA = 4
EXIT_PIPELINE = 5

MODE_ALIASES = {
    "gd": "gradient_descent",
    "gradient_descent": "gradient_descent",
    "lm": "levenberg_marquardt",
    "levenberg_marquardt": "levenberg_marquardt",
}


def _emit(doc: dict, out: str | None):
    text = json.dumps(doc, indent=1)
    if out:
        Path(out).write_text(text)
    else:
        print(text)


def _manifest_nodes(manifest) -> list[TileNode]:
    return [
        TileNode(id=t.id, image_ref=manifest.resolve_path(t), nominal_offset=t.nominal_offset)
        for t in manifest.tiles
    ]


def _params_from_args(args) -> RegistrationParams:
    return RegistrationParams(
        window_radius=args.window_radius,
        search_radius=args.search_radius,
        abs_threshold=args.abs_threshold,
        rel_threshold=args.rel_threshold,
        nms_radius=args.nms_radius,
        max_candidates=args.max_candidates,
        max_features=args.max_features,
        min_feature_distance=args.min_feature_distance,
        quality=args.quality,
    )


def _add_registration_flags(p: argparse.ArgumentParser):
    p.add_argument("--min-overlap", type=int, default=None,
                   help="override the manifest's min_overlap_px")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--window-radius", type=int, default=16)
    p.add_argument("--search-radius", type=int, default=32)
    p.add_argument("--abs-threshold", type=float, default=0.5)
    p.add_argument("--rel-threshold", type=float, default=0.7)
    p.add_argument("--nms-radius", type=int, default=3)
    p.add_argument("--max-candidates", type=int, default=8)
    p.add_argument("--max-features", type=int, default=64)
    p.add_argument("--min-feature-distance", type=float, default=10.0)
    p.add_argument("--quality", type=float, default=0.01)


def _add_solver_flags(p: argparse.ArgumentParser):
    p.add_argument("--tau", type=float, default=None,
                   help="dummy-edge cost in pixels (default: graph's own)")
    p.add_argument("--mode", choices=sorted(MODE_ALIASES), default="lm")


def cmd_register(args) -> int:
    manifest = load_manifest(args.manifest)
    nodes = _manifest_nodes(manifest)
    min_overlap = args.min_overlap or manifest.min_overlap_px
    graph = register_all(
        nodes,
        min_overlap_px=min_overlap,
        params=_params_from_args(args),
        tau=args.tau if args.tau is not None else 5.0,
        threads=args.threads,
    )
    for b in graph.bundles:
        log.info("bundle (%d,%d): %d candidates", b.i, b.j, len(b.candidates))
    _emit(to_json(graph), args.output)
    return EXIT_OK


def cmd_solve(args) -> int:
    graph = load_graph(args.graph)
    if args.tau is not None:
        graph.tau = args.tau
    config = SolverConfig(tau=graph.tau, mode=MODE_ALIASES[args.mode])
    report = solve(graph, config)
    log.info("solved: loss %.6g after %d iterations", report.loss, report.iterations)
    if args.report:
        Path(args.report).write_text(json.dumps(report.to_json(), indent=1))
    _emit(to_json(graph), args.output)
    return EXIT_OK


def cmd_align(args) -> int:
    graph = load_graph(args.graph)
    simple, result = align_graph(graph)
    log.info(
        "aligned: %d edges retained, %d dropped, %d components, rms %.4f",
        result.edges_retained, result.edges_dropped,
        len(result.components), result.rms,
    )
    _emit(result.to_json(), args.output)
    return EXIT_OK


def cmd_render(args) -> int:
    manifest = load_manifest(args.manifest)
    doc = json.loads(Path(args.alignment).read_text())
    if "offsets" not in doc:
        raise SchemaError("alignment document has no offsets")
    offsets = doc["offsets"]
    if len(offsets) != len(manifest.tiles):
        raise SchemaError(
            f"alignment has {len(offsets)} offsets for {len(manifest.tiles)} tiles"
        )
    tiles = [read_raw(manifest.resolve_path(t)) for t in manifest.tiles]
    composite = render(tiles, offsets, blend=args.blend, margin=args.margin)
    save_png(composite, args.output)
    log.info("wrote %s (%dx%d)", args.output, composite.shape[1], composite.shape[0])
    return EXIT_OK


def cmd_graphviz(args) -> int:
    graph = load_graph(args.graph)
    if args.pruned:
        simple = prune(graph)
        text = simple_graph_dot(simple)
    else:
        text = multigraph_dot(graph)
    if args.output:
        Path(args.output).write_text(text)
    else:
        print(text, end="")
    return EXIT_OK


def cmd_bench(args) -> int:
    names = list(bench_mod.ARCHETYPES) if args.archetype == "all" else [args.archetype]
    for name in names:
        report = bench_mod.run_benchmark(
            name, seed=args.seed, threads=args.threads, tau=args.tau
        )
        csv_text = report.to_csv()
        if args.output:
            out = Path(args.output)
            if len(names) > 1:
                out = out.with_name(f"{out.stem}_{name}{out.suffix}")
            out.write_text(csv_text)
        else:
            print(f"# archetype: {name}")
            print(csv_text, end="")
        if args.json:
            jout = Path(args.json)
            if len(names) > 1:
                jout = jout.with_name(f"{jout.stem}_{name}{jout.suffix}")
            jout.write_text(json.dumps(report.to_json(), indent=1))
    return EXIT_OK


def cmd_pipeline(args) -> int:
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(args.manifest)
    nodes = _manifest_nodes(manifest)
    min_overlap = args.min_overlap or manifest.min_overlap_px
    tau = args.tau if args.tau is not None else 5.0

    graph = register_all(
        nodes, min_overlap_px=min_overlap,
        params=_params_from_args(args), tau=tau, threads=args.threads,
    )
    save_graph(graph, outdir / "graph.json")

    report = solve(graph, SolverConfig(tau=graph.tau, mode=MODE_ALIASES[args.mode]))
    report.save(outdir / "report.json")
    save_graph(graph, outdir / "solved.json")

    simple, result = align_graph(graph)
    result.save(outdir / "alignment.json")
    (outdir / "pruned.dot").write_text(simple_graph_dot(simple))
    (outdir / "multigraph.dot").write_text(multigraph_dot(graph))

    tiles = [read_raw(manifest.resolve_path(t)) for t in manifest.tiles]
    composite = render(tiles, result.offsets, blend=args.blend, margin=args.margin)
    save_png(composite, outdir / "composite.png")
    log.info("pipeline complete: %s", outdir)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="tileweave",
        description="Stitch overlapping tile images via cycle-consistent "
        "candidate selection on a connectivity multigraph.",
    )
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", help="detect candidates for all overlapping pairs")
    p.add_argument("manifest")
    p.add_argument("-o", "--output", default=None, help="graph JSON (default stdout)")
    p.add_argument("--tau", type=float, default=None)
    _add_registration_flags(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("solve", help="optimize weights and offsets on a graph")
    p.add_argument("graph")
    p.add_argument("-o", "--output", default=None, help="solved graph JSON (default stdout)")
    p.add_argument("--report", default=None, help="solve report JSON path")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("align", help="prune a solved graph and globally align")
    p.add_argument("graph")
    p.add_argument("-o", "--output", default=None, help="alignment JSON (default stdout)")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("render", help="composite tiles at aligned offsets")
    p.add_argument("manifest")
    p.add_argument("alignment")
    p.add_argument("-o", "--output", required=True, help="output PNG")
    p.add_argument("--blend", choices=("overwrite", "feather"), default="overwrite")
    p.add_argument("--margin", type=int, default=16)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("graphviz", help="DOT export of a graph")
    p.add_argument("graph")
    p.add_argument("-o", "--output", default=None, help="DOT path (default stdout)")
    p.add_argument("--pruned", action="store_true", help="export the pruned simple graph")
    p.set_defaults(func=cmd_graphviz)

    p = sub.add_parser("bench", help="synthetic archetype benchmark")
    p.add_argument("archetype", choices=(*bench_mod.ARCHETYPES, "all"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("-o", "--output", default=None, help="CSV path (default stdout)")
    p.add_argument("--json", default=None, help="also write a JSON report")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("pipeline", help="register, solve, align, render in one go")
    p.add_argument("manifest")
    p.add_argument("outdir")
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--mode", choices=sorted(MODE_ALIASES), default="lm")
    p.add_argument("--blend", choices=("overwrite", "feather"), default="overwrite")
    p.add_argument("--margin", type=int, default=16)
    _add_registration_flags(p)
    p.set_defaults(func=cmd_pipeline)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        log.error("%s", exc)
        return EXIT_IO
    except OSError as exc:
        log.error("I/O failure: %s", exc)
        return EXIT_IO
    except SchemaError as exc:
        log.error("schema violation: %s", exc)
        return EXIT_SCHEMA
    except (StitchError, RegistrationError, ValueError) as exc:
        log.error("pipeline failure: %s", exc)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
