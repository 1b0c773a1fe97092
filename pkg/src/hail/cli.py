"""``hail`` command line: gen-phantom, pretrain, train, harmonize, evaluate.

Errors exit nonzero with one ``hail: error: <Kind>: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, HailConfig
from .metrics import identity_model
from .model import Harmonizer, load_model
from .phantom import MANIFEST_NAME, generate_dataset, read_manifest
from .pipeline import EvalProtocol, format_results_table, parse_direction
from .training import pretrain_phase1, split_dataset, train_phase2
from .volume import inverse_normalize, minmax_normalize, read_volume, write_volume

EXIT_USAGE = 2
EXIT_FAILURE = 1


class UsageError(Exception):
    pass


def _config(args) -> HailConfig:
    cfg = HailConfig.load(getattr(args, "config", None))
    return cfg.with_overrides(getattr(args, "set", None) or [])


def _manifest(data: str):
    path = Path(data) / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"no manifest at {path}")
    return read_manifest(path)


def cmd_gen_phantom(args) -> None:
    if args.n < 1:
        raise UsageError(f"--n must be >= 1, got {args.n}")
    cfg = _config(args)
    updates = {"phantom.n_per_site": args.n}
    if args.seed is not None:
        updates["phantom.seed"] = args.seed
    if args.edge is not None:
        updates["phantom.edge"] = args.edge
    if args.sites is not None:
        available = cfg["phantom.sites"]
        if not 1 <= args.sites <= len(available):
            raise UsageError(f"--sites must lie in 1..{len(available)}, got {args.sites}")
        updates["phantom.sites"] = tuple(available[: args.sites])
    cfg = cfg.with_values(updates)
    out = Path(args.out)
    entries = generate_dataset(
        cfg["phantom.n_per_site"], cfg.site_profiles(), out, cfg["phantom.seed"], cfg["phantom.edge"]
    )
    cfg.echo(out)
    print(f"wrote {len(entries)} volumes and {out / MANIFEST_NAME}")


def cmd_pretrain(args) -> None:
    cfg = _config(args)
    manifest = _manifest(args.data)
    split = split_dataset(manifest, 1, cfg["data.split_seed"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo(out)
    result = pretrain_phase1(split, cfg.train_config(1), args.data, out)
    print(f"best validation loss {result.best_val:.6f}; checkpoint {result.checkpoint_path}")


def cmd_train(args) -> None:
    cfg = _config(args)
    if args.no_consistency:
        cfg = cfg.with_values({"loss.lambda_consistency": 0.0})
    manifest = _manifest(args.data)
    split = split_dataset(
        manifest, 2, cfg["data.split_seed"], cfg["data.phase2_sites"], cfg["data.held_out_site"]
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo(out)
    result = train_phase2(
        split,
        args.phase1,
        cfg.train_config(2),
        args.data,
        out,
        tuple(cfg["data.phase2_sites"]),
        cfg["data.held_out_site"],
    )
    print(f"best validation loss {result.best_val:.6f}; checkpoint {result.checkpoint_path}")


def cmd_harmonize(args) -> None:
    cfg = _config(args)
    model = load_model(args.model)
    src = read_volume(args.input)
    exemplar = read_volume(args.exemplar)
    src_n = src if src.norm is not None else minmax_normalize(src)
    ex_n = exemplar if exemplar.norm is not None else minmax_normalize(exemplar)
    if src_n.dims != ex_n.dims:
        raise ValueError(f"input dims {src_n.dims} differ from exemplar dims {ex_n.dims}")
    overlap = args.overlap if args.overlap is not None else cfg["eval.overlap"]
    pred = Harmonizer(model, overlap=overlap, batch_size=cfg["eval.batch_size"])(src_n, ex_n)
    if args.apply_inverse:
        pred = inverse_normalize(pred)
    write_volume(pred, args.out)
    print(f"wrote {args.out}")


def cmd_evaluate(args) -> None:
    cfg = _config(args)
    directions = [d.strip() for d in args.directions.split(",") if d.strip()]
    if not directions:
        raise UsageError("--directions is empty")
    for d in directions:
        parse_direction(d)
    manifest = _manifest(args.data)
    protocol = EvalProtocol.from_config(manifest, args.data, cfg)
    if args.model == "identity":
        harmonizer = identity_model
    else:
        harmonizer = Harmonizer(load_model(args.model), cfg["eval.overlap"], cfg["eval.batch_size"])
    report = protocol.evaluate(harmonizer, directions, cfg["eval.mask_policy"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo(out)
    report.write(out / "metrics.csv")
    seen = [d for d in directions if d in cfg["eval.seen_directions"]]
    unseen = [d for d in directions if d not in seen]
    table = format_results_table(report, seen, unseen, f"model: {args.model}")
    (out / "table.txt").write_text(table, encoding="utf-8")
    print(table, end="")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hail", description="One-shot 3D intensity harmonization on phantoms.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, with_config=True):
        if with_config:
            sp.add_argument("--config", help="flat section.key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    g = sub.add_parser("gen-phantom", help="write a multi-site phantom dataset and manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--sites", type=int, help="number of site profiles to render (first N)")
    g.add_argument("--n", type=int, required=True, help="volumes per site")
    g.add_argument("--seed", type=int)
    g.add_argument("--edge", type=int)
    common(g)
    g.set_defaults(func=cmd_gen_phantom)

    pt = sub.add_parser("pretrain", help="phase 1: autoencoder pre-training")
    pt.add_argument("--data", required=True)
    pt.add_argument("--out", required=True)
    common(pt)
    pt.set_defaults(func=cmd_pretrain)

    tr = sub.add_parser("train", help="phase 2: style-transfer training with a frozen encoder")
    tr.add_argument("--data", required=True)
    tr.add_argument("--phase1", required=True, help="phase-1 checkpoint")
    tr.add_argument("--out", required=True)
    tr.add_argument("--no-consistency", action="store_true", help="ablation: lambda_consistency = 0")
    common(tr)
    tr.set_defaults(func=cmd_train)

    hz = sub.add_parser("harmonize", help="harmonize one volume towards one exemplar")
    hz.add_argument("--input", required=True)
    hz.add_argument("--exemplar", required=True)
    hz.add_argument("--model", required=True)
    hz.add_argument("--out", required=True)
    hz.add_argument("--overlap", type=int)
    hz.add_argument("--apply-inverse", action="store_true", help="map the output back to the input's intensity range")
    common(hz)
    hz.set_defaults(func=cmd_harmonize)

    ev = sub.add_parser("evaluate", help="nWD / rAVD report for harmonization directions")
    ev.add_argument("--data", required=True)
    ev.add_argument("--model", required=True, help="checkpoint path, or 'identity'")
    ev.add_argument("--directions", default="A->B,B->A,A->C,C->A,B->C,C->B")
    ev.add_argument("--out", required=True)
    common(ev)
    ev.set_defaults(func=cmd_evaluate)
    return p


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split()) or exc.__class__.__name__


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"hail: error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, AssertionError, FloatingPointError) as exc:
        print(f"hail: error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())
