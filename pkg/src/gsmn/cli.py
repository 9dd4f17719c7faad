"""Command-line entry point: ``gsmn synth|train|eval|match|inspect-ckpt``.

Exit status is 0 on success, 2 for usage errors and 1 for any runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import Tape
from .config import PRESETS, apply_preset, build_configs, config_to_dict, parse_config_text
from .errors import GsmnError
from .evaluate import KS, evaluate, write_rankings
from .graphio import corpus_hash, generate_synthetic, load_corpus
from .match import similarity_matrix
from .train import fit, load_checkpoint

log = logging.getLogger("gsmn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _configs(args):
    values = parse_config_text(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    values.update(_overrides(args.set))
    for key in ("seed", "epochs", "lr"):
        if getattr(args, key, None) is not None:
            values[key] = str(getattr(args, key))
    match, train = build_configs(values)
    if args.preset:
        match = apply_preset(match, args.preset)
    return match, train


def cmd_synth(args) -> int:
    root = generate_synthetic(args.out, seed=args.seed, n_images=args.images, feature_dim=args.dim, noise=args.noise)
    print(f"wrote {args.images} images to {root} (sha256 {corpus_hash(root)[:16]})")
    return 0


def cmd_train(args) -> int:
    match, train = _configs(args)
    corpus = load_corpus(args.data)
    manifest = {
        "code_version": __version__,
        "corpus": str(Path(args.data)),
        "corpus_sha256": corpus_hash(args.data),
        "seed": train.seed,
        "preset": args.preset or "full",
        "numpy": np.__version__,
        "python": platform.python_version(),
        **config_to_dict(match, train),
    }
    result = fit(corpus, match, train, args.out, manifest)
    last = result.history[-1] if result.history else {}
    print(f"trained {train.epochs} epochs; best epoch {result.best_epoch} "
          f"val rSum {result.best_val_rsum}; final loss {last.get('loss', float('nan')):.5f}")
    print(f"checkpoints in {args.out}")
    return 0


def _print_eval(ev, label="") -> None:
    parts = [f"i2t R@{k} {ev.i2t.recalls[k]:.1f}" for k in KS] + [f"t2i R@{k} {ev.t2i.recalls[k]:.1f}" for k in KS]
    print(f"{label}{' | '.join(parts)} | rSum {ev.rsum:.1f}")


def cmd_eval(args) -> int:
    corpus = load_corpus(args.data)
    models = [load_checkpoint(args.ckpt).build_model()]
    if args.ckpt2:
        models.append(load_checkpoint(args.ckpt2).build_model())
    ev = evaluate(models, corpus, args.split, folds=args.folds)
    _print_eval(ev)
    out = Path(args.rankings) if args.rankings else Path(args.ckpt).resolve().parent / f"rankings_{args.split}.jsonl"
    write_rankings(out, ev)
    print(f"rankings written to {out}")
    if args.json:
        print(json.dumps(ev.summary(), sort_keys=True))
    return 0


def cmd_match(args) -> int:
    corpus = load_corpus(args.data)
    model = load_checkpoint(args.ckpt).build_model()
    if args.image not in corpus.images:
        raise UsageError(f"unknown image id {args.image!r}")
    if args.text not in corpus.texts:
        raise UsageError(f"unknown text id {args.text!r}")
    image, text = corpus.images[args.image], corpus.texts[args.text]
    details = {}
    score = float(similarity_matrix(Tape(record=False), model, [image], [text], details).data[0, 0])
    print(f"{args.image} {args.text} {score:.10f}")
    if args.dump:
        Path(args.dump).parent.mkdir(parents=True, exist_ok=True)
        with open(args.dump, "w", encoding="utf-8") as fh:
            n, m = len(image.regions), len(text.tokens)
            record = {"image_id": args.image, "text_id": args.text, "score": score, "tokens": list(text.tokens)}
            if "t2i_attention" in details:
                record["t2i_attention"] = details["t2i_attention"][0, 0, :m, :n].tolist()
                record["t2i_match"] = details["t2i_match"][0, 0, :m].tolist()
            if "i2t_attention" in details:
                record["i2t_attention"] = details["i2t_attention"][0, 0, :n, :m].tolist()
                record["i2t_match"] = details["i2t_match"][0, 0, :n].tolist()
            fh.write(json.dumps(record) + "\n")
        print(f"attention written to {args.dump}")
    return 0


def cmd_inspect(args) -> int:
    ck = load_checkpoint(args.ckpt)
    total = sum(int(a.size) for a in ck.params.values())
    print(f"epoch {ck.epoch}  val rSum {ck.val_rsum}  vocab {len(ck.vocab)}  parameters {total}")
    for key, value in config_to_dict(ck.match_config, ck.train_config).items():
        print(f"[{key}]")
        for k, v in value.items():
            print(f"  {k} = {v}")
    for name, arr in ck.params.items():
        print(f"  {name:28s} {str(tuple(arr.shape)):16s} norm {float(np.linalg.norm(arr)):.6g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gsmn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"gsmn {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic corpus")
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--images", type=int, default=100)
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--noise", type=float, default=0.05, help="std of the per-region feature noise")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model; writes checkpoints, metrics.jsonl and manifest.json")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--out", required=True)
    t.add_argument("--preset", choices=sorted(PRESETS))
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="Recall@K and rSum on a split; two checkpoints are ensembled")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--ckpt2")
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--folds", type=int, default=1)
    e.add_argument("--rankings", help="rankings dump path (default: next to --ckpt)")
    e.add_argument("--json", action="store_true", help="also print the recalls as one JSON line")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("match", help="score one image-text pair")
    m.add_argument("--data", required=True)
    m.add_argument("--ckpt", required=True)
    m.add_argument("--image", required=True)
    m.add_argument("--text", required=True)
    m.add_argument("--dump", help="write attention weights and match vectors as one JSON line")
    m.set_defaults(func=cmd_match)

    i = sub.add_parser("inspect-ckpt", help="print a checkpoint's config and parameter shapes")
    i.add_argument("ckpt")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (GsmnError, OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
