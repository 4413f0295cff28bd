"""Command line entry point: ``ctrlo <command> [flags]``.

Exit codes: 0 ok, 2 config error, 3 data/format error, 4 numeric abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import checkpoint
from .config import from_dict, parse_assignments
from .errors import ConfigError, FormatError, NumericAbort
from .synthscene import generate_dataset, ingest_features, make_codebooks, write_features

log = logging.getLogger("ctrlo")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# dimensions a checkpoint fixes; eval/render refuse configs that change them
_MODEL_KEYS = ("grid", "d_appearance", "d_emb", "n_slots", "d_slot", "d_attn", "slot_mlp_hidden",
               "map_blocks", "map_heads", "map_ff_mult", "dec_hidden", "dec_layers", "head_hidden")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _common(p, out=True, data=True):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--seed", type=int)
    p.add_argument("--device-workers", type=int, dest="workers", help="data-generation worker threads")
    if out:
        p.add_argument("--out", help="output directory (file for gen-data)")
    if data:
        p.add_argument("--data", help="dataset in the CTLO binary format")


def build_parser():
    ap = _Parser(prog="ctrlo", description="query-conditioned slot attention on synthetic feature grids")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one model")
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--binding-mode", default="unique_argmax", choices=["unique_argmax", "mutual"])

    p = sub.add_parser("ablate", help="train and evaluate the component-ablation grid")
    _common(p)
    p.add_argument("--seeds", type=int, default=3, help="number of consecutive seeds")
    p.add_argument("--with-no-init", action="store_true", help="add the slot-init-off row")

    p = sub.add_parser("render", help="write PPM mask rasters for some scenes")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--cell", type=int, default=8, help="pixels per patch")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    _common(p, data=False)
    p.add_argument("--count", type=int, default=256)

    p = sub.add_parser("inspect-data", help="validate and summarize a dataset file")
    p.add_argument("--data", required=True)
    p.add_argument("--json", action="store_true")
    return ap


def _config(args, base=None):
    """Defaults (or a checkpoint's config) <- --config <- --set <- --seed."""
    d = {} if base is None else base.to_dict()
    if args.config:
        try:
            with open(args.config) as fh:
                d.update(parse_assignments(fh, args.config))
        except OSError as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from None
    d.update(parse_assignments(args.set, "--set"))
    if getattr(args, "workers", None) is not None:
        d["workers"] = args.workers
    if args.seed is not None:
        d["seed"] = args.seed
    cfg = from_dict(d)
    if base is not None:
        changed = [k for k in _MODEL_KEYS if getattr(cfg, k) != getattr(base, k)]
        if changed:
            raise ConfigError(f"config changes checkpoint dimensions: {', '.join(changed)}")
    return cfg


def _dataset(args, cfg, n=None):
    if args.data:
        data = ingest_features(args.data)
        if not data:
            raise FormatError(f"{args.data}: dataset is empty")
        k, d = cfg.grid ** 2, cfg.d_feat
        shape = data[0].features.data.shape
        if shape != (k, d):
            raise ConfigError(f"dataset features {shape} do not match config ({k}, {d})")
        return data
    from .training import make_eval_set
    return make_eval_set(cfg, n=n)


def cmd_train(args):
    from .training import train

    cfg = _config(args)
    out = args.out or "run"
    data = ingest_features(args.data) if args.data else None

    def progress(step, parts):
        if (step + 1) % 100 == 0 or step == 0:
            log.info("step %d  recon %.5f  contrastive %.4f", step + 1, parts["recon"], parts["contrastive"])

    train(cfg, out_dir=out, dataset=data, progress=progress)
    with open(os.path.join(out, "config.txt"), "w") as fh:
        fh.write(cfg.to_text())
    print(f"wrote {os.path.join(out, 'final.ckpt')}")


def _load_ckpt(path):
    try:
        return checkpoint.load(path)
    except OSError as e:
        raise FormatError(f"cannot read checkpoint {path}: {e}") from None


def cmd_eval(args):
    from .training import evaluate, write_report

    params, base, _ = _load_ckpt(args.checkpoint)
    cfg = _config(args, base)
    rep = evaluate(params, cfg, _dataset(args, cfg), binding_mode=args.binding_mode)
    print(rep.to_text(), end="")
    if args.out:
        write_report(rep, cfg, args.out)


def cmd_ablate(args):
    from .training import ablate

    cfg = _config(args)
    seeds = [cfg.seed + i for i in range(args.seeds)]
    table = ablate(cfg, seeds, include_no_init=args.with_no_init, out_dir=args.out or "ablation",
                   progress=lambda name, seed, rep: log.info("%s seed %d: %s", name, seed, rep.to_dict()))
    print(table.to_text(), end="")


def cmd_render(args):
    from .render import render_masks

    params, base, _ = _load_ckpt(args.checkpoint)
    cfg = _config(args, base)
    data = _dataset(args, cfg, n=args.count)[:args.count]
    paths = render_masks(params, cfg, data, args.out or "render", cell=args.cell)
    print(f"wrote {len(paths)} files to {args.out or 'render'}")


def cmd_gen_data(args):
    from .training import scene_config

    cfg = _config(args)
    if args.count < 0:
        raise ConfigError("--count must be >= 0")
    sc = scene_config(cfg)
    data = generate_dataset(sc, make_codebooks(sc, cfg.seed), args.count, seed=cfg.seed)
    out = args.out or "data.ctlo"
    write_features(data, out)
    print(f"wrote {len(data)} samples to {out}")


def cmd_inspect(args):
    data = ingest_features(args.data)
    n_obj = np.array([len(s.scene.objects) for s in data])
    n_q = np.array([len(s.queries) for s in data])
    summary = {"samples": len(data)}
    if data:
        s0 = data[0]
        summary.update({
            "grid": s0.scene.grid, "d_feat": s0.features.dim, "d_emb": int(s0.queries.lang_codes.shape[1]),
            "objects_min": int(n_obj.min()), "objects_max": int(n_obj.max()),
            "objects_mean": round(float(n_obj.mean()), 3), "queries_mean": round(float(n_q.mean()), 3),
            "with_points": sum(s.queries.points is not None for s in data),
            "foreground_fraction": round(float(np.mean([(~s.scene.background).mean() for s in data])), 4),
        })
    if args.json:
        print(json.dumps(summary))
    else:
        for k, v in summary.items():
            print(f"{k}: {v}")


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "render": cmd_render,
            "gen-data": cmd_gen_data, "inspect-data": cmd_inspect}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericAbort as e:
        where = f"; last good checkpoint {e.checkpoint}" if e.checkpoint else ""
        print(f"numeric abort: {e}{where}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
