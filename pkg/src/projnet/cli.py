"""Command line interface.

Subcommands: train, eval, bits-sweep, ratio, fetch-mnist. Exit codes:
2 for configuration problems, 3 for data problems, 4 for model-file
problems.
"""

import argparse
import gzip
import hashlib
import sys
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Tuple

import numpy as np

from . import __version__
from .backend import BACKEND
from .config import RunConfig, parse_config_text
from .data import (
    DEV_SPLIT_SEED,
    MIN_HASH_SPACE,
    MNIST_FILES,
    Dataset,
    FeaturizerConfig,
    load_tsv_corpus,
    mnist_splits,
    synth_blobs,
)
from .errors import ConfigError, DataError, ModelFormatError
from .model_format import export, infer_batch, load_model, save_model
from .models import arch_param_count
from .projection import ProjectionConfig
from .training import (
    CSV_COLUMNS,
    EvalReport,
    LossParts,
    LossSpec,
    TERMS,
    TrainOptions,
    evaluate,
    load_checkpoint,
    precision_at,
    save_checkpoint,
    train_many,
    write_manifest,
)

MNIST_MIRRORS = [
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
]

# md5 of each decompressed idx payload (mirrors differ in gzip framing)
MNIST_MD5 = {
    "train-images-idx3-ubyte.gz": "6bbc9ace898e44ae57da46a324031adb",
    "train-labels-idx1-ubyte.gz": "a25bea736e30d166cdddb491f175f624",
    "t10k-images-idx3-ubyte.gz": "2646ac647ad5339dbf082846283269ea",
    "t10k-labels-idx1-ubyte.gz": "27ae3e4e09519cfbb04c329615203637",
}


def _load_cfg(args) -> RunConfig:
    text = ""
    source = "<defaults>"
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text(encoding="utf-8")
        source = path.name
    for item in getattr(args, "set", None) or []:
        text += "\n" + item
    if getattr(args, "steps", None) is not None:
        text += f"\nsteps = {args.steps}"
    return parse_config_text(text, source=source)


def _parse_mask(raw: str) -> frozenset:
    """Comma list of loss terms; hatp is accepted for hat_p."""
    names = set()
    for part in raw.split(","):
        part = part.strip().lower().replace("hatp", "hat_p")
        if not part:
            continue
        if part not in TERMS:
            raise ConfigError(
                f"unknown loss term {part!r}; pick from theta,p,hatp"
            )
        names.add(part)
    if not names:
        raise ConfigError("loss mask cannot be empty")
    return frozenset(names)


def _options(args) -> TrainOptions:
    mask = getattr(args, "loss_mask", None)
    return TrainOptions(
        use_kl=getattr(args, "kl", False),
        couple_teacher=getattr(args, "couple_teacher", False),
        pretrain_steps=getattr(args, "pretrain", 0),
        loss_mask=_parse_mask(mask) if mask else frozenset(TERMS),
    )


def _split_tenth(ds: Dataset):
    """Carve a fixed tenth out of a dataset as its dev part."""
    order = np.random.default_rng(DEV_SPLIT_SEED).permutation(len(ds))
    cut = max(1, len(ds) // 10)
    return ds.take(np.sort(order[cut:])), ds.take(np.sort(order[:cut]))


def _featurizer(seed: int, input_dim: int) -> FeaturizerConfig:
    # dense columns are 1..input_dim, so the hash space is one wider
    if input_dim + 1 < MIN_HASH_SPACE:
        raise ConfigError(
            f"tsv features hash into input_dim + 1 slots, which must be "
            f">= {MIN_HASH_SPACE}; raise input_dim (config says {input_dim})"
        )
    return FeaturizerConfig(hash_space=input_dim + 1, seed=seed)


def _load_data(args, cfg: RunConfig):
    """(train, dev, test_or_None) for the chosen dataset flags."""
    if args.dataset == "mnist":
        if cfg.input_dim != 784:
            raise ConfigError(
                f"mnist inputs are 784 wide; set input_dim = 784 "
                f"(config says {cfg.input_dim})"
            )
        if cfg.num_classes != 10:
            raise ConfigError("mnist has 10 classes")
        return mnist_splits(args.data_dir, dev_size=args.dev_size)
    if args.dataset == "tsv":
        if not args.tsv:
            raise ConfigError("--dataset tsv needs --tsv PATH")
        feat = _featurizer(cfg.seed, cfg.input_dim)
        ds = load_tsv_corpus(args.tsv, feat)
        if ds.num_classes != cfg.num_classes:
            raise ConfigError(
                f"corpus has {ds.num_classes} labels, config says "
                f"{cfg.num_classes}"
            )
        if args.tsv_dev:
            return ds, load_tsv_corpus(args.tsv_dev, feat), None
        train, dev = _split_tenth(ds)
        return train, dev, None
    if args.dataset == "synth":
        n = args.synth_n
        full = synth_blobs(cfg.num_classes, cfg.input_dim,
                           n + max(1, n // 5), cfg.seed,
                           separation=args.synth_sep)
        train = full.take(np.arange(n))
        dev = full.take(np.arange(n, len(full)))
        return train, dev, None
    raise ConfigError(f"unknown dataset {args.dataset!r}")


def _add_data_flags(p: argparse.ArgumentParser):
    p.add_argument("--dataset", choices=["mnist", "tsv", "synth"],
                   default="mnist")
    p.add_argument("--data-dir", "--mnist-dir", dest="data_dir",
                   default="data/mnist",
                   help="directory with the four mnist idx files")
    p.add_argument("--dev-size", type=int, default=5000,
                   help="rows held out of mnist train as the dev set")
    p.add_argument("--tsv", help="label<TAB>text training file")
    p.add_argument("--tsv-dev", help="separate dev file for --dataset tsv")
    p.add_argument("--synth-n", type=int, default=4000,
                   help="training rows for --dataset synth")
    p.add_argument("--synth-sep", type=float, default=4.0,
                   help="blob center separation for --dataset synth")


def _add_cfg_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--steps", type=int, help="override the steps config key")


def _add_options_flags(p: argparse.ArgumentParser):
    p.add_argument("--pretrain", type=int, default=0,
                   help="trainer-only steps before joint training")
    p.add_argument("--kl", action="store_true",
                   help="use KL for the imitation term instead of plain "
                        "cross entropy")
    p.add_argument("--couple-teacher", action="store_true",
                   help="let the imitation term update the trainer too")


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    train_ds, dev_ds, test_ds = _load_data(args, cfg)
    options = _options(args)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "log.csv"

    def progress(step, results):
        if args.quiet:
            return
        row = results[0].history[-1]
        line = (f"step {step:>7}  projection p@1 {row['p1']:.4f}  "
                f"loss {row['loss_total']:.4f}")
        try:
            trow = results[0].last("trainer")
            line += f"  trainer p@1 {trow['p1']:.4f}"
        except KeyError:
            pass
        print(line, flush=True)

    t0 = time.time()
    result = train_many([cfg], train_ds, dev_ds, options, [csv_path],
                        progress)[0]
    wall = time.time() - t0

    ckpt_path = out_dir / "checkpoint.npz"
    save_checkpoint(ckpt_path, result.model, cfg)
    em = export(result.model, train_ds.label_names)
    model_path = out_dir / "model.pnjt"
    save_model(em, model_path)

    extra = {
        "train_rows": len(train_ds),
        "dev_rows": len(dev_ds) if dev_ds else 0,
        "backend": BACKEND,
        "wall_seconds": f"{wall:.1f}",
        "model_bytes": model_path.stat().st_size,
    }
    write_manifest(out_dir / "manifest.txt", cfg, options, extra)

    if not args.quiet:
        print(f"trained in {wall:.1f}s on backend {BACKEND}")
        print(f"wrote {model_path} ({model_path.stat().st_size} bytes), "
              f"{ckpt_path}, {csv_path}, {out_dir / 'manifest.txt'}")
    if test_ds is not None:
        spec = LossSpec.from_config(cfg, options.use_kl,
                                    options.couple_teacher, options.loss_mask)
        reports = evaluate(result.model, test_ds, spec)
        for name in ("trainer", "projection"):
            if name in reports:
                r = reports[name]
                print(f"test {name}: p@1 {r.p1:.4f}  p@3 {r.p3:.4f}  "
                      f"p@5 {r.p5:.4f}")
    return 0


def _resolve_model(path_arg: str, network: str) -> Path:
    """Model file for the requested network; run dirs resolve by name."""
    path = Path(path_arg)
    if path.is_dir():
        path = path / ("model.pnjt" if network == "exported"
                       else "checkpoint.npz")
    if not path.exists():
        raise ModelFormatError(f"missing model file: {path}")
    return path


def _eval_dataset(args, seed: int, input_dim=None) -> Dataset:
    if args.dataset == "mnist":
        train, dev, test = mnist_splits(args.data_dir, dev_size=args.dev_size)
        return {"train": train, "dev": dev, "test": test}[args.split]
    if args.dataset == "tsv":
        if not args.tsv:
            raise ConfigError("--dataset tsv needs --tsv PATH")
        if args.hash_space:
            feat = FeaturizerConfig(hash_space=args.hash_space, seed=seed)
        elif input_dim is not None:
            feat = _featurizer(seed, input_dim)
        else:
            raise ConfigError(
                "--dataset tsv needs --hash-space matching training "
                "(input_dim + 1)"
            )
        return load_tsv_corpus(args.tsv, feat)
    raise ConfigError(f"eval does not support dataset {args.dataset!r}")


def _write_eval_csv(path, step: int, report: EvalReport):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        fh.write(f"{step},{report.network},{report.p1:.6f},{report.p3:.6f},"
                 f"{report.p5:.6f},{report.loss.total:.6f},"
                 f"{report.loss.theta:.6f},{report.loss.p:.6f},"
                 f"{report.loss.hat_p:.6f}\n")


def cmd_eval(args) -> int:
    path = _resolve_model(args.model, args.network)
    if args.network == "exported":
        em = load_model(path)
        ds = _eval_dataset(args, em.seed)
        probs = infer_batch(em, ds.indptr, ds.indices, ds.values)
        pk = precision_at(probs.astype(np.float64), ds.labels)
        picked = np.clip(probs[np.arange(len(ds)), ds.labels], 1e-12, None)
        nll = float(-np.log(picked).mean())
        report = EvalReport("exported", pk[1], pk[3], pk[5],
                            LossParts(nll, 0.0, 0.0, nll))
    else:
        model, cfg = load_checkpoint(path)
        ds = _eval_dataset(args, cfg.seed, input_dim=cfg.input_dim)
        reports = evaluate(model, ds, LossSpec.from_config(cfg))
        if args.network not in reports:
            raise ConfigError(
                f"no {args.network} report; the config weights give the "
                f"trainer no part in the loss"
            )
        report = reports[args.network]
    print(f"rows {len(ds)}  network {report.network}  "
          f"p@1 {report.p1:.4f}  p@3 {report.p3:.4f}  "
          f"p@5 {report.p5:.4f}  loss {report.loss.total:.4f}")
    csv_out = Path(args.csv_out) if args.csv_out else path.parent / "eval.csv"
    _write_eval_csv(csv_out, 0, report)
    if not args.quiet:
        print(f"wrote {csv_out}")
    return 0


@dataclass(frozen=True)
class SweepSpec:
    """One bits-sweep request: which (T, d) pairs, how to train, where."""

    pairs: Tuple[Tuple[int, int], ...]
    options: TrainOptions
    out_dir: Path

    def __post_init__(self):
        if not self.pairs:
            raise ConfigError("sweep needs at least one TxD pair")


def _parse_bits(raw: str) -> List[Tuple[int, int]]:
    pairs = []
    for part in raw.split(","):
        part = part.strip().lower()
        if "x" not in part:
            raise ConfigError(
                f"bad bits spec {part!r}; use TxD pairs like 8x10,60x12"
            )
        t, d = part.split("x", 1)
        try:
            pairs.append((int(t), int(d)))
        except ValueError:
            raise ConfigError(f"bad bits spec {part!r}") from None
    if not pairs:
        raise ConfigError("empty bits spec")
    # rows come out sorted by total bits; ties keep listing order
    return sorted(pairs, key=lambda td: td[0] * td[1])


SWEEP_COLUMNS = ["bits", "projection_p1", "trainer_p1", "quality_ratio"]


def cmd_bits_sweep(args) -> int:
    base = _load_cfg(args)
    spec = SweepSpec(tuple(_parse_bits(args.bits)), _options(args),
                     Path(args.out_dir))
    for t, d in spec.pairs:
        ProjectionConfig(base.seed, t, d)
    cfgs = [replace(base, T=t, d=d) for t, d in spec.pairs]
    train_ds, dev_ds, _ = _load_data(args, base)

    out_dir = spec.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_paths = [out_dir / f"t{t}d{d}.csv" for t, d in spec.pairs]

    t0 = time.time()
    results = train_many(cfgs, train_ds, dev_ds, spec.options, csv_paths)
    wall = time.time() - t0

    trainer_p1 = results[0].last("trainer")["p1"]
    print(f"swept {len(spec.pairs)} heads against one trainer in "
          f"{wall:.1f}s; trainer dev p@1 {trainer_p1:.4f}")
    print(f"{'bits':>6} {'T':>4} {'d':>3} {'p@1':>8} {'quality':>8} "
          f"{'params':>8}")
    sweep_path = out_dir / "sweep.csv"
    with open(sweep_path, "w", newline="") as fh:
        fh.write(",".join(SWEEP_COLUMNS) + "\n")
        for (t, d), result in zip(spec.pairs, results):
            p1 = result.last("projection")["p1"]
            ratio = p1 / trainer_p1 if trainer_p1 > 0 else float("nan")
            head_params = result.model.head.num_params()
            print(f"{t * d:>6} {t:>4} {d:>3} {p1:>8.4f} {ratio:>8.4f} "
                  f"{head_params:>8}")
            fh.write(f"{t * d},{p1:.6f},{trainer_p1:.6f},{ratio:.6f}\n")
            fh.flush()
            em = export(result.model, train_ds.label_names)
            save_model(em, out_dir / f"t{t}d{d}.pnjt")
    print(f"wrote {sweep_path}")
    return 0


# published compression ratios for the reference 784-1000-1000-1000-10
# baseline, keyed by (T, d, head hidden layers)
PUBLISHED_RATIOS = {
    (8, 10, ()): 3453.0,
    (10, 12, ()): 2312.0,
    (60, 10, ()): 466.0,
    (60, 12, ()): 388.0,
    (60, 10, (128,)): 36.0,
    (60, 12, (256,)): 15.0,
    (70, 12, (256,)): 13.0,
}

_REFERENCE_TRAINER = (784, (1000, 1000, 1000), 10)


def cmd_ratio(args) -> int:
    cfg = _load_cfg(args)
    if args.arch:
        try:
            sizes = [int(s) for s in args.arch.split("-")]
        except ValueError:
            raise ConfigError(
                f"bad --arch {args.arch!r}; use 784-1000-10"
            ) from None
        if len(sizes) < 2:
            raise ConfigError("--arch needs at least input-output")
        cfg = replace(cfg, input_dim=sizes[0],
                      hidden_layers=tuple(sizes[1:-1]),
                      num_classes=sizes[-1])
    trainer_sizes = [cfg.input_dim, *cfg.hidden_layers, cfg.num_classes]
    head_sizes = [cfg.T * cfg.d, *cfg.head_hidden_layers, cfg.num_classes]
    print(f"trainer {'-'.join(map(str, trainer_sizes))}")
    print(f"student {cfg.T}x{cfg.d} bits -> "
          f"{'-'.join(map(str, head_sizes))}")
    ratios = {}
    for biases in (True, False):
        tp = arch_param_count(trainer_sizes, biases)
        hp = arch_param_count(head_sizes, biases)
        tag = "with biases" if biases else "weights only"
        ratios[tag] = tp / hp
        print(f"{tag:>13}: trainer {tp:>10}  student {hp:>8}  "
              f"ratio {tp / hp:>9.1f}")

    key = (cfg.T, cfg.d, tuple(cfg.head_hidden_layers))
    reference = (cfg.input_dim, tuple(cfg.hidden_layers), cfg.num_classes)
    if reference == _REFERENCE_TRAINER and key in PUBLISHED_RATIOS:
        target = PUBLISHED_RATIOS[key]
        hits = [tag for tag, r in ratios.items()
                if abs(r - target) / target <= 0.02]
        if hits:
            print(f"published ratio {target:.0f}: matched within 2% "
                  f"({', '.join(hits)})")
        else:
            print(f"published ratio {target:.0f}: neither convention "
                  f"matches within 2%")
    return 0


def _payload_md5(path: Path) -> str:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return hashlib.md5(raw).hexdigest()


def _verify_mnist_file(path: Path) -> None:
    want = MNIST_MD5[path.name]
    got = _payload_md5(path)
    if got != want:
        raise DataError(
            f"{path.name}: payload md5 {got} does not match the "
            f"canonical {want}"
        )


def cmd_fetch_mnist(args) -> int:
    dest = Path(args.dest)
    dest.mkdir(parents=True, exist_ok=True)
    for name in MNIST_FILES.values():
        target = dest / name
        if target.exists():
            _verify_mnist_file(target)
            print(f"{name}: already present, checksum ok")
            continue
        last_err = None
        for mirror in MNIST_MIRRORS:
            url = mirror + name
            try:
                with urllib.request.urlopen(url, timeout=60) as resp:
                    target.write_bytes(resp.read())
                print(f"{name}: fetched from {mirror}")
                last_err = None
                break
            except (urllib.error.URLError, OSError) as exc:
                last_err = exc
        if last_err is not None:
            raise DataError(f"could not fetch {name}: {last_err}")
        try:
            _verify_mnist_file(target)
        except DataError:
            target.unlink()
            raise
        print(f"{name}: checksum ok")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="projnet",
        description="Train big networks jointly with tiny hash-projected "
                    "students.",
    )
    parser.add_argument("--version", action="version",
                        version=f"projnet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a trainer/student pair")
    _add_cfg_flags(p)
    _add_data_flags(p)
    _add_options_flags(p)
    p.add_argument("--out-dir", default="runs/latest")
    p.add_argument("--loss-mask", metavar="TERMS",
                   help="comma list from theta,p,hatp; terms left out are "
                        "dropped from the objective")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained or exported model")
    p.add_argument("--model", required=True,
                   help="run directory, .pnjt file, or checkpoint.npz")
    p.add_argument("--network",
                   choices=["trainer", "projection", "exported"],
                   default="exported")
    p.add_argument("--dataset", choices=["mnist", "tsv"], default="mnist")
    p.add_argument("--data-dir", "--mnist-dir", dest="data_dir",
                   default="data/mnist")
    p.add_argument("--dev-size", type=int, default=5000)
    p.add_argument("--split", choices=["train", "dev", "test"],
                   default="test")
    p.add_argument("--tsv")
    p.add_argument("--hash-space", type=int)
    p.add_argument("--csv-out", help="where to write the one-row report "
                                     "(default: eval.csv beside the model)")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bits-sweep",
                       help="train several bit widths against one trainer")
    _add_cfg_flags(p)
    _add_data_flags(p)
    _add_options_flags(p)
    p.add_argument("--bits", required=True,
                   help="comma list of TxD pairs, e.g. 8x10,10x12,60x12")
    p.add_argument("--out-dir", default="runs/sweep")
    p.set_defaults(func=cmd_bits_sweep)

    p = sub.add_parser("ratio", help="print parameter counts and ratios")
    _add_cfg_flags(p)
    p.add_argument("--arch", help="trainer shape like 784-1000-1000-1000-10")
    p.set_defaults(func=cmd_ratio)

    p = sub.add_parser("fetch-mnist", help="download the four mnist files")
    p.add_argument("--dest", default="data/mnist")
    p.set_defaults(func=cmd_fetch_mnist)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except ModelFormatError as exc:
        print(f"model file error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
