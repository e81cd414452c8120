"""Command-line entry point: ``msgsagan {train,ablate,generate,evaluate,synth-corpus}``.

Failures exit nonzero and print one JSON object ``{"error": kind, "message": ...}``
on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .data import blob_corpus, load_dir, resolve_root, write_pngs
from .errors import MSGSAGANError
from .metrics import MSSSIMConfig, evaluate_images, get_extractor

EXIT_CODES = {"configuration": 2, "ingestion": 3, "environment": 4, "checkpoint": 5, "diverged": 6, "numeric": 7}


def _cmd_train(args) -> dict:
    cfg = harness.load_run_config(args.config)
    overrides = {k: v for k, v in (("out_dir", args.out_dir), ("seed", args.seed), ("corpus", args.corpus))
                 if v is not None}
    cfg = cfg.replace(**overrides)
    corpus = harness.load_corpus(cfg.corpus, cfg.resolution)
    record = harness.train(cfg, corpus, resume=args.resume)
    return {"record": str(Path(cfg.out_dir) / "record.json"), "checkpoint": record.checkpoint,
            "steps": len(record.steps), "final_metrics": record.final_metrics}


def _cmd_ablate(args) -> dict:
    base = harness.load_run_config(args.config) if args.config else harness.RunConfig()
    if args.out_dir:
        base = base.replace(out_dir=args.out_dir)
    if args.corpus:
        base = base.replace(corpus=args.corpus)
    matrix_path = args.matrix or harness.reference_grid_path()
    matrix = harness.read_matrix(matrix_path, base, reference_grid=args.matrix is None)
    corpus = harness.load_corpus(base.corpus, base.resolution)
    csv_path = Path(args.csv) if args.csv else Path(base.out_dir) / "ablation.csv"
    records, csv_path = harness.run_ablation(matrix, corpus, csv_path)
    return {"csv": str(csv_path), "runs": len(records),
            "failed": [r.config["name"] for r in records if r.status != "ok"]}


def _cmd_generate(args) -> dict:
    paths = harness.generate_samples(args.ckpt, args.n, args.seed, args.out)
    return {"out": str(args.out), "images": len(paths)}


def _cmd_evaluate(args) -> dict:
    real_dir = resolve_root(args.real_dir)
    extractor = get_extractor(args.extractor)
    if args.ckpt:
        state = harness.load_checkpoint(args.ckpt)
        res = harness.RunConfig.from_dict(state["config"]).resolution
        real = load_dir(real_dir, target=res, range_tag="tanh")
        report = harness.evaluate_run(args.ckpt, real, args.seed, extractor=extractor, n_pairs=args.n_pairs)
    else:
        real = load_dir(real_dir, target=args.resolution)
        gen = load_dir(args.gen_dir, target=args.resolution)
        ssim_cfg = (MSSSIMConfig(num_scales=args.num_scales) if args.num_scales
                    else MSSSIMConfig.for_resolution(args.resolution))
        report = evaluate_images(real.data, gen.data, extractor, n_pairs=args.n_pairs, seed=args.seed,
                                 cfg=ssim_cfg)
    harness.write_report(report, args.out)
    return report.to_dict()


def _cmd_synth(args) -> dict:
    paths = write_pngs(blob_corpus(args.n, args.resolution, args.seed), args.out, prefix="blob_")
    return {"out": str(args.out), "images": len(paths)}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msgsagan", description="Train and evaluate multi-scale gradient GANs with self-attention.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", required=True, help="flat TOML file of run settings")
    t.add_argument("--corpus", help="image directory or blobs:<n> (default: config, then $MSGSAGAN_CORPUS)")
    t.add_argument("--out-dir")
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=_cmd_train)

    a = sub.add_parser("ablate", help="run an ablation matrix and write the results as CSV")
    a.add_argument("--matrix", help="CSV of GAN,PN,SN,MBD,AM,FA,Opt,LR,Loss rows (default: bundled reference grid)")
    a.add_argument("--config", help="base run settings shared by all rows")
    a.add_argument("--corpus")
    a.add_argument("--out-dir")
    a.add_argument("--csv", help="output CSV path (default: <out-dir>/ablation.csv)")
    a.set_defaults(func=_cmd_ablate)

    g = sub.add_parser("generate", help="write samples from a checkpoint")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_generate)

    e = sub.add_parser("evaluate", help="MS-SSIM, FID and mode-collapse report")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--gen-dir")
    e.add_argument("--real-dir", help="default: $MSGSAGAN_CORPUS")
    e.add_argument("--n-pairs", type=int)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--extractor", choices=("standard", "identity"), default="standard")
    e.add_argument("--resolution", type=int, default=64)
    e.add_argument("--num-scales", type=int, help="MS-SSIM scales (default: as many as the resolution allows)")
    e.add_argument("--out", required=True, help="report JSON path")
    e.set_defaults(func=_cmd_evaluate)

    s = sub.add_parser("synth-corpus", help="write the two-blob toy corpus as PNGs")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=500)
    s.add_argument("--resolution", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except MSGSAGANError as exc:
        print(json.dumps({"error": exc.kind, "message": str(exc)}), file=sys.stderr)
        return EXIT_CODES.get(exc.kind, 1)
    except FileNotFoundError as exc:
        print(json.dumps({"error": "ingestion", "message": str(exc)}), file=sys.stderr)
        return EXIT_CODES["ingestion"]
    print(json.dumps(result, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
