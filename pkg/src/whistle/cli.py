"""``whistle`` command line: data generation, training, adaptation, evaluation,
the experiment matrix and the gradient suite.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

from . import config as C
from .adapt import METHODS
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .evalkit import MatrixSpec, MissingPrerequisite, evaluate, run_matrix
from .lmfusion import FusionConfig, gamma_search
from .manifest import RunManifest, write_manifest
from .pipeline import SeedRun, ckpt_name, target_lm
from .world import World, build_world, generate_corpora, load_dataset, save_dataset

log = logging.getLogger("whistle")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file")
    common.add_argument("--preset", default="default", choices=sorted(C.PRESETS))
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field")
    common.add_argument("--seed", type=int, help="run seed (defaults to the first eval seed)")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--data", type=Path, help="dataset directory from gen-data (default: regenerate)")

    p = _Parser(prog="whistle", description=" ".join(__doc__.split("\n\n")[0].split()))
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen-data", parents=[common], help="write world and corpora to --out")
    sub.add_parser("train-base", parents=[common], help="train the source-domain recognizer")
    t = sub.add_parser("train-tle", parents=[common], help="fit the TLE to a frozen recognizer")
    t.add_argument("--base", type=Path, required=True)
    a = sub.add_parser("adapt", parents=[common], help="text-only adaptation of a base checkpoint")
    a.add_argument("--method", required=True, choices=METHODS)
    a.add_argument("--base", type=Path, required=True)
    a.add_argument("--tle", type=Path)
    e = sub.add_parser("eval", parents=[common], help="decode a corpus and report WER")
    e.add_argument("--ckpt", type=Path, required=True)
    e.add_argument("--corpus", default="target", choices=("target", "source"))
    e.add_argument("--split", default="test", choices=("dev", "test"))
    e.add_argument("--beam", type=int)
    e.add_argument("--limit", type=int, help="evaluate only the first N utterances")
    sf = e.add_mutually_exclusive_group()
    sf.add_argument("--sf", action="store_true", help="shallow fusion with the target-text trigram LM")
    sf.add_argument("--gamma-grid", action="store_true", help="fusion with gamma chosen on the dev split")
    e.add_argument("--gamma", type=float, help="fusion weight for --sf")
    m = sub.add_parser("run-matrix", parents=[common], help="method x corpus x seed table")
    m.add_argument("--ckpt-dir", type=Path, help="per-seed checkpoint cache (default: OUT/checkpoints)")
    m.add_argument("--methods", nargs="+")
    m.add_argument("--seeds", nargs="+", type=int)
    m.add_argument("--no-train", action="store_true", help="fail instead of training missing checkpoints")
    g = sub.add_parser("grad-check", parents=[common], help="central-difference check of every op")
    g.add_argument("--tol", type=float, default=1e-5)
    return p


def load_run_config(args) -> C.Config:
    cfg = C.load_config(args.config) if args.config else C.preset(args.preset)
    if args.config and args.preset != "default":
        data = C._merge(C.PRESETS[args.preset], cfg.to_dict())
        cfg = C.from_dict(data)
    return C.apply_overrides(cfg, args.set)


def _seed(args, cfg: C.Config) -> int:
    return int(args.seed) if args.seed is not None else int(cfg.eval.seeds[0])


def _world_and_corpora(args, cfg: C.Config) -> tuple:
    if args.data:
        world, corpora = load_dataset(args.data)
        if world.config != cfg.world:
            log.warning("dataset world config differs from the run config; using the dataset's")
        return world, corpora
    world = build_world(config=cfg.world)
    return world, generate_corpora(world)


def _seed_run(args, cfg: C.Config, seed: int, directory: Path) -> SeedRun:
    world, corpora = _world_and_corpora(args, cfg)
    run = SeedRun(cfg, seed, directory, world=world)
    run._corpora = corpora
    return run


def cmd_gen_data(args, cfg, manifest) -> dict:
    world, corpora = _world_and_corpora(args, cfg)
    save_dataset(args.out, world, corpora.values())
    return {f"{d}_{s}": len(c) for (d, s), c in corpora.items()}


def cmd_train_base(args, cfg, manifest) -> dict:
    seed = _seed(args, cfg)
    run = _seed_run(args, cfg, seed, args.out)
    run.base()
    return {"base_steps": cfg.adapt.base_steps}


def cmd_train_tle(args, cfg, manifest) -> dict:
    seed = _seed(args, cfg)
    run = _seed_run(args, cfg, seed, args.out)
    run._models["none"] = load_checkpoint(args.base, kind="asr")
    run.tle()
    curve = json.loads((args.out / "tle.heldout.json").read_text())
    return {"heldout_mse_initial": curve[0][1], "heldout_mse_final": curve[-1][1]} if curve else {}


def cmd_adapt(args, cfg, manifest) -> dict:
    seed = _seed(args, cfg)
    if args.method == "none":
        load_checkpoint(args.base, kind="asr")
        shutil.copyfile(args.base, args.out / ckpt_name("none"))
        return {"method": "none"}
    if "tle" in args.method and args.tle is None:
        raise UsageError(f"--method {args.method} needs --tle")
    run = _seed_run(args, cfg, seed, args.out)
    run._models["none"] = load_checkpoint(args.base, kind="asr")
    if args.tle is not None:
        run._tle = load_checkpoint(args.tle, kind="tle")
    run.adapted(args.method)
    return {"method": args.method}


def cmd_eval(args, cfg, manifest) -> dict:
    # Only the recognizer checkpoint is read; the TLE plays no part in inference.
    model = load_checkpoint(args.ckpt, kind="asr")
    world, corpora = _world_and_corpora(args, cfg)
    beam = args.beam or cfg.eval.beam_size
    test = corpora[(args.corpus, args.split)]
    if args.limit:
        test = type(test)(test.domain, test.split, test.items[: args.limit])
    metrics: dict = {"corpus": f"{args.corpus}-{args.split}", "beam": beam}
    if args.sf or args.gamma_grid:
        lm = target_lm(world, corpora[("target", "train")])
        fusion = FusionConfig(gamma=0.0, beam_size=beam, grid=tuple(cfg.fusion.grid))
        if args.gamma_grid:
            best, table = gamma_search(model, lm, corpora[("target", "dev")], fusion)
            metrics["gamma_table"] = {str(g): r.wer for g, r in table.items()}
            fusion.gamma = best
        else:
            if args.gamma is None:
                raise UsageError("--sf needs --gamma")
            fusion.gamma = args.gamma
        fusion.validate()
        metrics["gamma"] = fusion.gamma
        report = evaluate(model, test, beam_size=beam, lm=lm, fusion=fusion)
    else:
        if args.gamma is not None:
            raise UsageError("--gamma only applies with --sf")
        report = evaluate(model, test, beam_size=beam)
    (args.out / "eval.json").write_text(json.dumps(report.to_json(), indent=1) + "\n")
    metrics.update(wer=report.wer, S=report.sub, D=report.dele, I=report.ins, n_ref_words=report.n_ref_words)
    print(f"WER {100 * report.wer:.2f}% ({report.sub} S, {report.dele} D, {report.ins} I / {report.n_ref_words})")
    return metrics


def cmd_run_matrix(args, cfg, manifest) -> dict:
    spec = MatrixSpec(
        methods=tuple(args.methods or cfg.eval.methods),
        corpora=tuple(cfg.eval.corpora),
        seeds=tuple(args.seeds if args.seeds is not None else cfg.eval.seeds),
    )
    try:
        spec.validate()
    except ValueError as e:
        raise C.ConfigError("eval.methods", str(e)) from e
    manifest.seeds = list(spec.seeds)
    ckpt_dir = args.ckpt_dir or args.out / "checkpoints"
    cells = run_matrix(spec, cfg, ckpt_dir, args.out, train_missing=not args.no_train)
    print((args.out / "matrix.md").read_text(), end="")
    return {f"{c.method}/{c.corpus}/{c.seed}": c.report.wer for c in cells}


def cmd_grad_check(args, cfg, manifest) -> dict:
    from .gradsuite import run_suite

    results = run_suite()
    worst = 0.0
    for name, err in results.items():
        ok = err <= args.tol
        worst = max(worst, err)
        print(f"{'PASS' if ok else 'FAIL'} {name:<20} max rel err {err:.2e}")
    if worst > args.tol:
        raise RuntimeError(f"gradient check failed: worst relative error {worst:.2e} > {args.tol:g}")
    return {"max_rel_err": worst}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-base": cmd_train_base,
    "train-tle": cmd_train_tle,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "run-matrix": cmd_run_matrix,
    "grad-check": cmd_grad_check,
}


def _setup_logging() -> None:
    level = os.environ.get("WHISTLE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv: list | None = None) -> int:
    _setup_logging()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        cfg = load_run_config(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except C.ConfigError as e:
        print(f"whistle: config error at {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as e:
        print(f"whistle: {e}", file=sys.stderr)
        return 1

    args.out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest.start(["whistle", *argv], cfg, [_seed(args, cfg)])
    C.save_config(cfg, args.out / "config.json")
    try:
        manifest.metrics = COMMANDS[args.command](args, cfg, manifest) or {}
    except UsageError as e:
        print(f"whistle: {e}", file=sys.stderr)
        return 1
    except C.ConfigError as e:
        print(f"whistle: config error at {e}", file=sys.stderr)
        return 1
    except (CheckpointError, MissingPrerequisite, RuntimeError, ValueError, OSError) as e:
        print(f"whistle: {e}", file=sys.stderr)
        write_manifest(manifest, args.out, status="failed")
        return 2
    write_manifest(manifest, args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
