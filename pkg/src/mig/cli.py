"""``mig`` command line: data generation, library, embedding, training, evaluation, ablations."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .config import RunConfig, load_config
from .errors import ConfigError, MIGError

log = logging.getLogger("mig")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3, 4


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        overrides += [f"data.seed={args.seed}", f"library.seed={args.seed}", f"train.seed={args.seed}"]
    return load_config(args.config, overrides)


def _corpora(cfg: RunConfig, data_dir: str | None):
    from .pipeline import make_corpora
    from .prompt_library import load_coco

    if data_dir:
        d = Path(data_dir)
        return (load_coco(d / "train.json", d / "train", split="train"),
                load_coco(d / "test.json", d / "test", split="test"))
    return make_corpora(cfg)


def cmd_gen_data(cfg, args, out: Path) -> int:
    from .pipeline import make_corpora
    from .prompt_library import write_coco

    train, test = make_corpora(cfg)
    rows = []
    for name, corpus in (("train", train), ("test", test)):
        write_coco(corpus, out / "data" / f"{name}.json", out / "data" / name)
        n_out = sum(a.outlier for _, a in corpus.annotations())
        rows.append((name, len(corpus.images), sum(1 for _ in corpus.annotations()), n_out, corpus.digest()))
    print("split\timages\tinstances\toutliers\tdigest")
    for r in rows:
        print("\t".join(str(v) for v in r))
    return EXIT_OK


def cmd_build_library(cfg, args, out: Path) -> int:
    from .prompt_library import build_library, scan_manifest

    train, _ = _corpora(cfg, args.data)
    lib = build_library(train, guard=cfg.library.guard, seed=cfg.library.seed)
    lib.save(out / "library")
    print("category\tname\tinstances\toutliers")
    for c, name in lib.categories.items():
        insts = lib.instances[c]
        print(f"{c}\t{name}\t{len(insts)}\t{sum(i.outlier for i in insts)}")
    leaks = scan_manifest(lib.manifest())
    print(f"# manifest scan: {len(leaks)} non-training instances; digest {lib.digest()}")
    return EXIT_OK if not leaks else EXIT_RUNTIME


def _load_library(cfg, args, out: Path):
    from .prompt_library import PromptLibrary, build_library

    root = Path(args.library) if args.library else out / "library"
    if (root / "manifest.json").exists():
        return PromptLibrary.load(root, guard=cfg.library.guard)
    train, _ = _corpora(cfg, args.data)
    return build_library(train, guard=cfg.library.guard, seed=cfg.library.seed)


def cmd_embed(cfg, args, out: Path) -> int:
    from .embedding import ToyEmbedder, embed_prompts, save_embeddings

    lib = _load_library(cfg, args, out)
    provider = ToyEmbedder(dim=cfg.model.prompt_dim)
    d = out / "embeddings"
    d.mkdir(parents=True, exist_ok=True)
    print("category\tN\tD\tfile")
    for c, insts in lib.instances.items():
        if not insts:
            continue
        m = embed_prompts(provider, insts)
        path = d / f"{c}.mige"
        save_embeddings(m, path)
        print(f"{c}\t{m.N}\t{m.D}\t{path}")
    return EXIT_OK


def cmd_train(cfg, args, out: Path) -> int:
    import torch

    from .pipeline import TRAIN_LOG, run_eval, run_training, write_reports
    from .plotting import plot_loss_curve, read_log

    torch.set_num_threads(max(1, args.threads))
    t0 = time.perf_counter()
    state, ws = run_training(cfg, out, resume=args.resume)
    info = {"iterations": state.iteration, "threads": torch.get_num_threads(),
            "train_seconds": time.perf_counter() - t0}
    records = read_log(out / "train_log.jsonl")
    if records:
        plot_loss_curve(records, out / "loss_curve.png")
    print("iteration\tloss\tcheckpoint")
    print(f"{state.iteration}\t{state.trace[-1] if state.trace else float('nan'):.6f}\t{out / 'checkpoint.migc'}")
    if args.eval:
        t0 = time.perf_counter()
        reports = run_eval(cfg, state.model, ws)
        info["eval_seconds"] = time.perf_counter() - t0
        write_reports(reports, out)
        for r in reports.values():
            print(r.table())
    (out / "run_info.json").write_text(json.dumps(info, indent=1))
    log.info("log written to %s", out / TRAIN_LOG)
    return EXIT_OK


def cmd_eval(cfg, args, out: Path) -> int:
    import torch

    from .pipeline import CHECKPOINT, Workspace, run_eval, write_reports
    from .training import load_checkpoint

    torch.set_num_threads(max(1, args.threads))
    ckpt = Path(args.checkpoint) if args.checkpoint else out / CHECKPOINT
    state = load_checkpoint(ckpt, cfg.resolved_model(), cfg.train)
    reports = run_eval(cfg, state.model, Workspace.build(cfg))
    path = write_reports(reports, out)
    for r in reports.values():
        print(r.table())
        print()
    print(f"# report: {path}")
    return EXIT_OK


def cmd_ablate(cfg, args, out: Path) -> int:
    from .evaluation import ABLATIONS, run_ablation
    from .plotting import plot_ablation

    kinds = sorted(ABLATIONS) if args.kind == "all" else [args.kind]
    # finished cells, keyed by resolved config: reruns and overlapping grids reuse them
    cache_path = out / "ablation_cells.json"
    cache = json.loads(cache_path.read_text()) if cache_path.exists() else {}

    def progress(kind, value, seed, res):
        cache_path.write_text(json.dumps(cache, indent=1))
        print(f"# {kind} {value} seed {seed}: box AP50 {100 * res['box_AP50']:.2f}", file=sys.stderr, flush=True)

    for kind in kinds:
        table = run_ablation(kind, cfg, workers=args.workers, progress=progress, cache=cache)
        table.save(out)
        plot_ablation(table, out / f"ablation_{kind}.png")
        print(table.text())
        print()
    return EXIT_OK


def cmd_inspect(cfg, args, out: Path) -> int:
    from .checkpoint import CKPT_MAGIC, load_sections
    from .embedding import load_embeddings
    from .prompt_library import scan_manifest

    path = Path(args.path)
    if path.is_dir():
        path = path / "manifest.json"
    if path.suffix == ".json":
        man = json.loads(path.read_text())
        leaks = scan_manifest(man)
        print("category\tinstances")
        for c, n in man.get("counts", {}).items():
            print(f"{c}\t{n}")
        print(f"# non-training instances: {len(leaks)}")
        return EXIT_OK if not leaks else EXIT_RUNTIME
    if path.suffix == ".jsonl":
        from .plotting import read_log

        recs = read_log(path)
        print("iter\tclass\tl1\tgiou\tmask\ttotal")
        for r in recs[:: max(1, len(recs) // 20)] + recs[-1:]:
            print("\t".join([str(r["iter"])] + [f"{r[k]:.4f}" for k in ("class", "l1", "giou", "mask", "total")]))
        return EXIT_OK
    head = path.read_bytes()[:4]
    if head == CKPT_MAGIC:
        secs = load_sections(path)
        print("section\tdtype\tshape")
        for name, arr in secs.items():
            print(f"{name}\t{arr.dtype}\t{'x'.join(map(str, arr.shape))}")
        return EXIT_OK
    m = load_embeddings(path)
    print(f"category\tN\tD\tprovider\n{m.category}\t{m.N}\t{m.D}\t{m.provider_id}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "build-library": cmd_build_library,
    "embed": cmd_embed,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "inspect": cmd_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file (sections of key = value)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    common.add_argument("--out", default="runs/default", help="output directory")
    common.add_argument("--seed", type=int, help="seed for data, library and training")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mig", description=__doc__)
    p.add_argument("--version", action="version", version=f"mig {__version__}")
    sub = p.add_subparsers(dest="verb", required=True)
    sub.add_parser("gen-data", parents=[common], help="render the synthetic corpus as COCO json + png")
    for verb in ("build-library", "embed"):
        sp = sub.add_parser(verb, parents=[common], help=f"{verb.replace('-', ' ')} from the training split")
        sp.add_argument("--data", help="directory written by gen-data (default: regenerate from config)")
        if verb == "embed":
            sp.add_argument("--library", help="library directory (default: OUT/library)")
    sp = sub.add_parser("train", parents=[common], help="train a model")
    sp.add_argument("--resume", help="checkpoint to resume from")
    sp.add_argument("--eval", action="store_true", help="evaluate on the held-out split afterwards")
    sp.add_argument("--threads", type=int, default=1)
    sp = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the held-out split")
    sp.add_argument("--checkpoint", help="checkpoint path (default: OUT/checkpoint.migc)")
    sp.add_argument("--threads", type=int, default=1)
    sp = sub.add_parser("ablate", parents=[common], help="run a prompt ablation grid")
    sp.add_argument("--kind", choices=["selector", "frequency", "quantity", "all"], default="all")
    sp.add_argument("--workers", type=int, help="parallel cells (capped by MIG_WORKERS)")
    sp = sub.add_parser("inspect", parents=[common], help="describe a checkpoint, embedding file, manifest or log")
    sp.add_argument("path")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        out = Path(args.out)
        if args.verb != "inspect":
            from .pipeline import snapshot

            out.mkdir(parents=True, exist_ok=True)
            snapshot(cfg, out)
        return COMMANDS[args.verb](cfg, args, out)
    except ConfigError as exc:
        print(json.dumps({"error": "ConfigError", "message": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG
    except (MIGError, OSError, ValueError, KeyError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
