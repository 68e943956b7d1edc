"""Command line entry point: ``etta <subcommand> [flags]``.

Every flag can also come from ``--config FILE`` (``key=value`` lines, ``#``
comments); flags given on the command line win.  Exit codes: 0 success,
1 usage error, 2 runtime error.
"""
from __future__ import annotations

import os

# BLAS thread pools are sized at numpy import time
_threads = os.environ.get("ETTA_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

log = logging.getLogger("etta")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def read_config(path, known: set[str]) -> dict[str, str]:
    """Parse a ``key=value`` file; keys use flag spelling with or without dashes."""
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{p}: config file not found")
    out = {}
    for lineno, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{p}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        dest = key.lstrip("-").replace("-", "_")
        if dest not in known:
            raise UsageError(f"{p}:{lineno}: unknown key {key!r}")
        out[dest] = value
    return out


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{p}: {what} not found")
    return p


def build_parser() -> _Parser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="etta", description="Test-time energy adaptation for 2D segmentation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help_):
        p = sub.add_parser(name, help=help_, formatter_class=fmt)
        p.add_argument("--config", default=None, help="key=value file supplying defaults for these flags")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        return p

    p = add("gen-data", "generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=100, help="number of samples")
    p.add_argument("--domain", choices=("source", "target"), default="source", help="intensity domain")
    p.add_argument("--seed", type=int, default=0, help="seed0; sample i uses seed0*100000+i")
    p.add_argument("--h", type=int, default=64, help="image height (multiple of 16)")
    p.add_argument("--w", type=int, default=64, help="image width (multiple of 16)")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    p = add("train-seg", "pretrain the segmentation UNet on a source dataset")
    p.add_argument("--data", required=True, help="source dataset directory")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int, default=30, help="training epochs")
    p.add_argument("--batch", type=int, default=8, help="minibatch size")
    p.add_argument("--lr", type=float, default=1e-4, help="Adam learning rate")
    p.add_argument("--augment-p", type=float, default=0.5, help="probability of augmenting a sample")
    p.add_argument("--seed", type=int, default=0, help="initialization and shuffling seed")
    p.add_argument("--log-csv", default=None, help="training log; empty means <out>.csv")

    p = add("train-energy", "train the patch energy model against a frozen segmentation model")
    p.add_argument("--data", required=True, help="source dataset directory")
    p.add_argument("--seg", required=True, help="segmentation checkpoint")
    p.add_argument("--out", required=True, help="energy checkpoint path")
    p.add_argument("--delta", type=float, default=0.1, help="FGSM magnitude")
    p.add_argument("--tau", type=int, default=50, help="mismatch count marking a patch out of distribution")
    p.add_argument("--patch", type=int, default=16, help="patch side in pixels")
    p.add_argument("--epochs", type=int, default=40, help="training epochs")
    p.add_argument("--batch", type=int, default=8, help="samples per minibatch")
    p.add_argument("--lr", type=float, default=1e-4, help="peak Adam learning rate")
    p.add_argument("--warmup", type=int, default=1000, help="linear warmup steps before cosine decay")
    p.add_argument("--spatial-p", type=float, default=0.5, help="probability of a spatial corruption")
    p.add_argument("--temperature-min", type=float, default=1.0,
                   help="lower bound of the log-uniform softmax temperature applied to training maps")
    p.add_argument("--temperature-max", type=float, default=1.0,
                   help="upper bound of that temperature (1,1 disables the jitter)")
    p.add_argument("--seed", type=int, default=0, help="initialization and sampling seed")
    p.add_argument("--log-csv", default=None, help="training log; empty means <out>.csv")

    for name, help_ in (("adapt", "stream a dataset through test-time adaptation"),
                        ("eval", "evaluate the pretrained model without adaptation")):
        p = add(name, help_)
        p.add_argument("--data", required=True, help="target dataset directory")
        p.add_argument("--split", default="test", choices=("train", "val", "test", "all"), help="samples to stream")
        p.add_argument("--seg", required=True, help="segmentation checkpoint")
        p.add_argument("--energy", default=None, help="energy checkpoint (required for --method energy)")
        p.add_argument("--batch", type=int, default=4, help="test batch size")
        p.add_argument("--out-csv", required=True, help="per-batch summary CSV")
        if name == "adapt":
            p.add_argument("--method", choices=("energy", "tent", "none"), default="energy", help="adaptation objective")
            p.add_argument("--iters", type=int, default=10, help="Adam steps per batch")
            p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate for BatchNorm gamma/beta")
            p.add_argument("--no-restore", action="store_true", help="keep adapted weights across batches")
            p.add_argument("--emit-energy-maps", default=None, metavar="DIR",
                           help="write per-iteration OOD score maps as PGM images")

    p = add("gradcheck", "finite-difference check of every differentiable primitive")
    p.add_argument("--seed", type=int, default=0, help="seed for the random probes")
    return parser


def _parse(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    command = next((tok for tok in rest if not tok.startswith("-")), None)
    subparsers = parser._subparsers._group_actions[0].choices
    if known.config and command in subparsers:
        subparser = subparsers[command]
        names = {a.dest for a in subparser._actions if a.dest not in ("help", "config")}
        values = read_config(known.config, names)
        converted = {}
        for action in subparser._actions:
            if action.dest not in values:
                continue
            raw = values[action.dest]
            if action.const is True:  # store_true flags
                converted[action.dest] = raw.lower() in ("1", "true", "yes", "on")
            else:
                converted[action.dest] = action.type(raw) if action.type else raw
            action.required = False
        subparser.set_defaults(**converted)
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError(parser.format_help())
    return args


def cmd_gen_data(args) -> None:
    from .data import build_dataset

    build_dataset(args.out, args.n, args.domain, args.seed, args.h, args.w, force=args.force)
    print(f"wrote {args.n} {args.domain} samples to {args.out}")


def cmd_train_seg(args) -> None:
    from .data import load_split
    from .networks import build_seg_model
    from .train_seg import TrainConfig, train_source

    data = _require(args.data, "dataset directory")
    images, masks = load_split(data, "train")
    val_images, val_masks = load_split(data, "val")
    model = build_seg_model(seed=args.seed)
    cfg = TrainConfig(args.epochs, args.batch, args.lr, args.augment_p, args.seed)
    _, history = train_source(model, images, masks, val_images, val_masks, cfg, checkpoint=args.out,
                              log_csv=args.log_csv or f"{args.out}.csv")
    best = max(row["val_dice"] for row in history)
    print(f"best val foreground Dice {best:.4f}; checkpoint {args.out}")


def cmd_train_energy(args) -> None:
    from .data import load_split
    from .energy import EnergyTrainConfig, PerturbConfig, evaluate_energy, train_energy
    from .networks import build_energy_model, load_seg_model

    data = _require(args.data, "dataset directory")
    f = load_seg_model(_require(args.seg, "segmentation checkpoint"))
    g = build_energy_model(f.num_classes, seed=args.seed)
    if args.patch != g.patch:
        raise ValueError(f"--patch {args.patch} does not match the energy model's patch size {g.patch}")
    images, masks = load_split(data, "train")
    val = load_split(data, "val")
    cfg = EnergyTrainConfig(epochs=args.epochs, batch=args.batch, lr=args.lr, warmup_steps=args.warmup,
                            tau=args.tau, patch=args.patch, seed=args.seed,
                            perturb=PerturbConfig(delta=args.delta, spatial_p=args.spatial_p, patch=args.patch,
                                                  temperature_range=(args.temperature_min, args.temperature_max)))
    train_energy(g, f, images, masks, cfg, checkpoint=args.out, log_csv=args.log_csv or f"{args.out}.csv")
    if len(val[0]):
        acc = evaluate_energy(g, f, *val, cfg)
        print(f"val patch accuracy {acc['accuracy']:.4f} (OOD fraction {acc['pos_fraction']:.3f})")
    print(f"checkpoint {args.out}")


def cmd_adapt(args, method: str | None = None) -> None:
    from .data import load_split
    from .networks import load_energy_model, load_seg_model
    from .tta import AdaptConfig, run_stream

    data = _require(args.data, "dataset directory")
    f = load_seg_model(_require(args.seg, "segmentation checkpoint"))
    g = load_energy_model(_require(args.energy, "energy checkpoint")) if args.energy else None
    method = method or args.method
    if method == "energy" and g is None:
        raise UsageError("adapt --method energy requires --energy CKPT")
    images, masks = load_split(data, args.split)
    cfg = AdaptConfig(iters=getattr(args, "iters", 10), lr=getattr(args, "lr", 0.0), batch=args.batch,
                      method=method, restore=not getattr(args, "no_restore", False))
    _, summary = run_stream(f, g, images, masks, cfg, out_csv=args.out_csv,
                            energy_map_dir=getattr(args, "emit_energy_maps", None))
    print(f"{method}: foreground Dice {summary['pre_dice']:.4f} -> {summary['post_dice']:.4f}; "
          f"csv {args.out_csv}")


def cmd_gradcheck(args) -> int:
    from .gradcheck import main as gradcheck_main

    return gradcheck_main(args.seed)


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _parse(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    handlers = {"gen-data": cmd_gen_data, "train-seg": cmd_train_seg, "train-energy": cmd_train_energy,
                "adapt": cmd_adapt, "eval": lambda a: cmd_adapt(a, method="none"), "gradcheck": cmd_gradcheck}
    try:
        rc = handlers[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"etta {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
