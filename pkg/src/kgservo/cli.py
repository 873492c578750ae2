"""Batch command-line front end.

Subcommands: ``generate`` (seeded trial datasets), ``servo`` (one closed-
loop trial), ``eval`` (baseline correlation report), ``kg`` (graph
inspection and queries), ``memory`` (demonstration store management).

Exit codes: 0 success, 1 usage, 2 memory failure, 3 control failure,
4 parse error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_MEMORY = 2
EXIT_CONTROL = 3
EXIT_PARSE = 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 by default; the contract is 1
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kgservo", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="generate a seeded trial dataset")
    gen.add_argument("--scene", required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--n-videos", type=int, default=19)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--stride", type=int, default=1)
    gen.add_argument("--tree", help="behavior tree file (default: built-in grasp stack)")

    srv = sub.add_parser("servo", help="run one closed-loop servo trial")
    srv.add_argument("--scene", required=True)
    srv.add_argument("--task", default="grasp")
    srv.add_argument("--tree", help="behavior tree file")
    srv.add_argument("--from-memory", action="store_true")
    srv.add_argument("--store", default=os.environ.get("SERVO_EKG_STORE"))
    srv.add_argument("--k", type=int, default=3)
    srv.add_argument("--seed", type=int, default=0)
    srv.add_argument("--placement", type=int, default=None,
                     help="randomize object placement with this index")
    srv.add_argument("--out")
    srv.add_argument("--segmenter", default="sim",
                     help="'sim' or 'sidecar:http://host:port'")
    srv.add_argument("--record-masks", help="record every produced mask here")
    srv.add_argument("--alpha", type=float, default=None)
    srv.add_argument("--broyden-lambda", type=float, default=None)
    srv.add_argument("--broyden-numerator", choices=("delta_e", "e"), default=None)
    srv.add_argument("--epsilon", type=float, default=None)
    srv.add_argument("--explore-angle", type=float, default=None,
                     help="exploratory motion, radians")
    srv.add_argument("--gain", type=float, default=None)
    srv.add_argument("--damping", type=float, default=None)
    srv.add_argument("--max-step", type=float, default=None)
    srv.add_argument("--converge-eps", type=float, default=None)
    srv.add_argument("--max-iters", type=int, default=None)
    srv.add_argument("--rate-hz", type=float, default=None)

    ev = sub.add_parser("eval", help="baseline correlation report over a dataset")
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--out", help="write report.txt / report.csv here")
    ev.add_argument("--stride", type=int, default=1)
    ev.add_argument("--srocc-literal", action="store_true",
                    help="use unsquared rank differences")

    kg = sub.add_parser("kg", help="inspect and query .ekg graphs")
    kg.add_argument("subcommand", choices=("query", "show", "canonicalize"))
    kg.add_argument("files", nargs="+")
    kg.add_argument("--pattern", help="basic graph pattern (query only)")

    mem = sub.add_parser("memory", help="demonstration store management")
    mem.add_argument("subcommand", choices=("add", "list"))
    mem.add_argument("--store", default=os.environ.get("SERVO_EKG_STORE"))
    mem.add_argument("--frame", help="first-frame PGM (add)")
    mem.add_argument("--graph", help="experience .ekg (add)")
    mem.add_argument("--task", default="")
    mem.add_argument("--object", default="")
    mem.add_argument("--id", dest="demo_id", default=None)

    return parser


def _servo_config(args):
    from .servo import ServoConfig

    overrides = {}
    for flag, field in (
        ("broyden_lambda", "broyden_lambda"),
        ("broyden_numerator", "broyden_numerator"),
        ("epsilon", "epsilon"),
        ("explore_angle", "explore_angle"),
        ("gain", "gain"),
        ("damping", "damping"),
        ("max_step", "max_step"),
        ("converge_eps", "converge_eps"),
        ("max_iters", "max_iters"),
        ("rate_hz", "rate_hz"),
    ):
        value = getattr(args, flag)
        if value is not None:
            overrides[field] = value
    return ServoConfig(**overrides)


def cmd_generate(args) -> int:
    from .dataset import generate_dataset

    tree_text = Path(args.tree).read_text() if args.tree else None
    generate_dataset(
        args.scene,
        args.out,
        n_videos=args.n_videos,
        seed=args.seed,
        stride=args.stride,
        tree_text=tree_text,
    )
    print(f"wrote {args.n_videos} videos to {args.out}")
    return EXIT_OK


def cmd_servo(args) -> int:
    from . import btree, dataset, memory, runner, sim
    from .btree import TickStatus

    if bool(args.tree) == bool(args.from_memory):
        raise UsageError("provide exactly one of --tree / --from-memory")
    scene = sim.scene_from_json(args.scene)
    if args.placement is not None:
        dataset.randomize_scene(scene, args.seed, args.placement)

    tree = None
    store = None
    if args.tree:
        tree = btree.tree_parse(Path(args.tree).read_text())
    else:
        if not args.store:
            raise UsageError("--from-memory needs --store or SERVO_EKG_STORE")
        store = memory.MemoryStore(args.store)

    segmenter = None
    if args.segmenter != "sim":
        kind, sep, url = args.segmenter.partition(":")
        if kind != "sidecar" or not sep or not url:
            raise UsageError(f"bad --segmenter {args.segmenter!r}")
        from .segclient import SidecarSegmenter

        segmenter = SidecarSegmenter(url, scene)
    if args.record_masks:
        inner = segmenter if segmenter is not None else sim.SimSegmenter(scene)
        segmenter = sim.RecordingSegmenter(inner, args.record_masks)

    spec = runner.TrialSpec(
        scene=scene,
        task=args.task,
        tree=tree,
        store=store,
        k=args.k,
        servo_config=_servo_config(args),
        segmenter=segmenter,
        alpha=args.alpha,
    )
    result = runner.run_trial(spec)
    if args.out:
        verdict = runner.write_trial_artifacts(result, args.out)
    else:
        verdict = {
            "status": result.root_status.value,
            "iterations": result.iterations,
            "final_error": result.final_error,
        }
    print(json.dumps(verdict))
    return EXIT_OK if result.root_status is TickStatus.SUCCESS else EXIT_CONTROL


def cmd_eval(args) -> int:
    from .evaluation import run_baselines, srocc, srocc_literal

    report = run_baselines(
        args.dataset,
        stride=args.stride,
        srocc_fn=srocc_literal if args.srocc_literal else srocc,
    )
    print(report.table())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(report.table() + "\n")
        (out / "report.csv").write_text(report.csv())
    return EXIT_OK


def _term_text(term) -> str:
    from . import ekg

    if isinstance(term, ekg.Iri):
        return str(term)
    return str(term)


def cmd_kg(args) -> int:
    from . import ekg

    graphs = [ekg.parse(Path(f).read_text()) for f in args.files]
    if args.subcommand == "show":
        for g in graphs:
            sys.stdout.write(ekg.serialize(g))
        return EXIT_OK
    if args.subcommand == "canonicalize":
        for g in graphs:
            entities = {
                t
                for triple in g.sorted_triples()
                for t in (triple.subject, triple.object)
                if isinstance(t, ekg.Iri) and t.ns is ekg.Namespace.REKGR
            }
            for entity in sorted(entities, key=ekg.term_key):
                for triple in ekg.canonicalize(entity):
                    ekg.insert(g, triple)
            sys.stdout.write(ekg.serialize(g))
        return EXIT_OK
    if not args.pattern:
        raise UsageError("kg query needs --pattern")
    pattern = ekg.parse_pattern(args.pattern)
    for binding in ekg.query(graphs, pattern):
        line = "\t".join(
            f"?{var}={_term_text(binding[var])}" for var in pattern.projection
        )
        print(line)
    return EXIT_OK


def cmd_memory(args) -> int:
    from . import ekg, memory, pgm

    if not args.store:
        raise UsageError("memory commands need --store or SERVO_EKG_STORE")
    store = memory.MemoryStore(args.store)
    if args.subcommand == "list":
        for demo in store.list_demos():
            print(f"{demo.id}\t{demo.task}\t{demo.object_label}")
        return EXIT_OK
    if not args.frame or not args.graph:
        raise UsageError("memory add needs --frame and --graph")
    graph = ekg.parse(Path(args.graph).read_text())
    frame = pgm.read_pgm(args.frame)
    demo = store.remember(
        graph,
        frame,
        task=args.task,
        object_label=args.object,
        demo_id=args.demo_id,
    )
    print(demo.id)
    return EXIT_OK


_COMMANDS = {
    "generate": cmd_generate,
    "servo": cmd_servo,
    "eval": cmd_eval,
    "kg": cmd_kg,
    "memory": cmd_memory,
}


def main(argv=None) -> int:
    from . import btree, ekg, memory, servo
    from .evaluation import DatasetFormat, EvalError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (memory.EmptyStore, ekg.NoUsableExperience) as exc:
        print(f"memory error: {exc}", file=sys.stderr)
        return EXIT_MEMORY
    except (servo.FeatureLost,) as exc:
        print(f"control error: {exc}", file=sys.stderr)
        return EXIT_CONTROL
    except (ekg.ParseError, btree.TreeParseError, DatasetFormat,
            json.JSONDecodeError) as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (memory.StoreError, EvalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MEMORY
    except FileNotFoundError as exc:
        print(f"file not found: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
