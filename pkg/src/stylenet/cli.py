"""Single command-line entry point for every capability.

Subcommands: synth, train, eval, search, rf, gradcam, project. Exit codes:
0 success, 1 usage error, 2 data error, 3 numeric failure. Every run writes
one manifest (key=value lines: subcommand, resolved flags, seed, timestamps,
artifacts) alongside its outputs; re-running with the manifest's flags
reproduces the outputs bit-identically, timestamps excluded.

All randomness flows from the single --seed of the invocation; submodule
seeds are derived by hashing (seed, purpose).
"""

import argparse
import datetime
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import (SynthConfig, generate, load_dataset, read_ppm,
                      write_ppm)
from .errors import DataError, NumericError, UsageError
from .evo import Genome, evolve
from .interpret import format_projection, grad_cam, overlay, tsne
from .models import ArchConfig, VARIANTS, build_model
from .receptive import LayerGeom, format_table, is_disjoint, receptive_field
from .seeding import derive_seed
from .training import TrainConfig, evaluate, emit_report, format_report, train


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def _now() -> str:
    return datetime.datetime.now().isoformat(timespec="seconds")


def write_manifest(path, subcommand: str, args, artifacts, started: str,
                   ended: str) -> None:
    skip = {"command", "func"}
    lines = [f"subcommand={subcommand}"]
    for key in sorted(vars(args)):
        if key in skip:
            continue
        lines.append(f"flag.{key}={getattr(args, key)}")
    lines.append(f"seed={getattr(args, 'seed', 0)}")
    lines.append(f"started={started}")
    lines.append(f"ended={ended}")
    for artifact in artifacts:
        lines.append(f"artifact={artifact}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _run(subcommand, args, handler):
    started = _now()
    artifacts, manifest_path = handler(args)
    write_manifest(manifest_path, subcommand, args, artifacts, started, _now())


# ---------------------------------------------------------------------------
# subcommand handlers (each returns (artifacts, manifest_path))


def cmd_synth(args):
    cfg = SynthConfig(per_class=args.per_class, size=args.size, seed=args.seed,
                      paired=args.paired)
    data = generate(cfg, args.out)
    print(f"wrote {len(data)} images ({args.per_class} per class) to {args.out}")
    return [args.out], os.path.join(args.out, "manifest.txt")


def _arch_config(arch: str, truncation: int, seed: int) -> ArchConfig:
    return ArchConfig(variant=arch, truncation=truncation,
                      seed=derive_seed(seed, "arch-init")).validate()


def cmd_train(args):
    data = load_dataset(args.data)
    train_set, val_set, _test = data.split((0.7, 0.15),
                                           seed=derive_seed(args.seed, "split"))
    model = build_model(_arch_config(args.arch, args.truncation, args.seed))
    config = TrainConfig(epochs=args.epochs, batch_size=args.batch,
                         learning_rate=args.lr,
                         seed=derive_seed(args.seed, "train"))
    curves = train(model, train_set, val_set, config)
    save_checkpoint(model, args.out)
    last = len(curves.train_loss) - 1
    print(f"trained {args.arch} for {args.epochs} epochs: "
          f"train loss {curves.train_loss[last]:.4f} "
          f"acc {curves.train_acc[last]:.4f}"
          + (f", val acc {curves.val_acc[last]:.4f}" if curves.val_acc else ""))
    print(f"checkpoint: {args.out} ({model.param_count()} parameters)")
    return [args.out], args.out + ".manifest"


def cmd_eval(args):
    model = load_checkpoint(args.model)
    data = load_dataset(args.data)
    report = evaluate(model, data)
    text = emit_report(report) if args.report == "machine" else format_report(report) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(f"report: {args.out}")
        return [args.out], args.out + ".manifest"
    sys.stdout.write(text)
    return [], "eval.manifest"


def cmd_search(args):
    data = load_dataset(args.data)
    train_set, val_set, _test = data.split((0.7, 0.15),
                                           seed=derive_seed(args.seed, "split"))
    base = Genome(arch=_arch_config(args.arch, args.truncation, args.seed),
                  learning_rate=args.lr, epoch_budget=args.budget_epochs)
    result = evolve(base, args.pop, args.gens, train_set, val_set,
                    seed=derive_seed(args.seed, "search"), batch_size=args.batch)
    history = result.format_history()
    best = (f"best_fitness={result.best.fitness!r} "
            f"best_genome={result.best.summary()}\n")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(history + best)
        print(f"history: {args.out}")
        sys.stdout.write(best)
        return [args.out], args.out + ".manifest"
    sys.stdout.write(history + best)
    return [], "search.manifest"


def _parse_layer_file(path):
    layers = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                parts = line.split()
                if len(parts) not in (2, 3):
                    raise DataError(f"{path}:{lineno}: expected 'kernel stride "
                                    f"[padding]', got {line!r}")
                try:
                    values = [int(p) for p in parts]
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-integer in {line!r}") from None
                layers.append(LayerGeom(*values))
    except OSError as e:
        raise DataError(f"cannot read layer config {path}: {e}") from None
    if not layers:
        raise DataError(f"{path}: no layers defined")
    return layers


def cmd_rf(args):
    layers = _parse_layer_file(args.config)
    if args.report == "machine":
        table = receptive_field(layers)
        disjoint, margin = is_disjoint(layers)
        lines = [f"layer.{i}={g.kernel},{g.stride},{g.padding},"
                 f"{rf.size},{rf.jump},{rf.offset!r}"
                 for i, (g, rf) in enumerate(zip(layers, table), start=1)]
        lines.append(f"disjoint={'yes' if disjoint else 'no'}")
        lines.append(f"margin={margin}")
        sys.stdout.write("\n".join(lines) + "\n")
    else:
        sys.stdout.write(format_table(layers) + "\n")
    return [], "rf.manifest"


def cmd_gradcam(args):
    model = load_checkpoint(args.model)
    image = read_ppm(args.image)
    heatmap = grad_cam(model, image, layer_name=args.layer,
                       class_index=args.class_index)
    heat_path = args.out + ".heat.ppm"
    overlay_path = args.out + ".overlay.ppm"
    write_ppm(heat_path, np.repeat(heatmap.values[None, :, :], 3, axis=0))
    write_ppm(overlay_path, overlay(image, heatmap))
    print(f"heatmap (layer {heatmap.layer}, class {heatmap.class_index}): "
          f"{heat_path}, {overlay_path}")
    return [heat_path, overlay_path], args.out + ".manifest"


def cmd_project(args):
    model = load_checkpoint(args.model)
    data = load_dataset(args.data)
    chunks = [model.embed(data.images[s:s + 64]).data
              for s in range(0, len(data), 64)]
    embeddings = np.concatenate(chunks, axis=0)
    projection = tsne(embeddings, perplexity=args.perplexity,
                      iterations=args.iters, seed=derive_seed(args.seed, "tsne"))
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(format_projection(projection, data.labels, data.paths))
    print(f"projected {len(data)} points (final KL {projection.kl:.4f}): {args.out}")
    return [args.out], args.out + ".manifest"


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(prog="stylenet",
                     description="Style-based image classification toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="generate a synthetic corpus")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--per-class", dest="per_class", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--paired", action="store_true",
                   help="share shape layouts across the four classes")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one architecture")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--arch", choices=VARIANTS, required=True)
    p.add_argument("--truncation", type=int, default=9)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", choices=("text", "machine"), default="text")
    p.add_argument("--out", default=None, help="write the report here instead of stdout")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("search", help="evolutionary configuration search")
    p.add_argument("--data", required=True)
    p.add_argument("--arch", choices=VARIANTS, required=True)
    p.add_argument("--truncation", type=int, default=9)
    p.add_argument("--pop", type=int, default=8)
    p.add_argument("--gens", type=int, default=5)
    p.add_argument("--budget-epochs", dest="budget_epochs", type=int, default=3)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="write the history here")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("rf", help="receptive-field table for a conv stack")
    p.add_argument("--config", required=True,
                   help="text file: one 'kernel stride [padding]' per line")
    p.add_argument("--report", choices=("text", "machine"), default="text")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_rf)

    p = sub.add_parser("gradcam", help="class-evidence heatmap for one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True, help="input PPM image")
    p.add_argument("--layer", default=None)
    p.add_argument("--class", dest="class_index", type=int, required=True)
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("project", help="t-SNE projection of model embeddings")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _run(args.command, args, args.func)
        return 0
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
