"""Command-line entry point: ``smanet {gen-data,train,eval,gradcheck,predict}``.

Run configuration is a flat ``key=value`` file; ``#`` starts a comment.
Every key has a default (see ``RunConfig``), unknown keys are rejected.
Keys shared between the generator, the model and the trainer (``seed``,
``seq_len``, ``num_classes``, ``input_size``) mean the same thing everywhere.

Exit codes: 0 success, 1 usage or I/O error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from smanet.formats import FormatError, load_tensor, read_manifest
from smanet.metrics import evaluation_report, format_report
from smanet.model import CLASS_NAMES, ModelConfig, SlicePrediction, SMANet
from smanet.tensor import ConfigError, NumericalError, ShapeError
from smanet.training import CheckpointMismatch, TrainConfig, model_from_checkpoint, train_loop

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2
RUN_CONFIG_NAME = "run.cfg"


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    # shared
    seed: int = 0
    seq_len: int = 5
    num_classes: int = 3
    input_size: int = 32
    # generator
    num_eyes: int = 20
    sequences_per_eye: int = 24
    noise_sigma: float = 0.05
    open_range: tuple = (55.0, 80.0)
    narrow_range: tuple = (18.0, 35.0)
    synechiae_range: tuple = (0.0, 8.0)
    dominant_bias: float = 0.6
    max_drift: float = 2.0
    # model
    stage_channels: tuple = (16, 32, 64)
    se_reduction: int = 4
    convlstm_hidden: int = 32
    convlstm_kernel: int = 3
    convlstm_layers: int = 2
    we_conv_channels: int = 8
    we_kernel: int = 3
    # training
    learning_rate: float = 1e-4
    lr_decay: float = 0.95
    lam: float = 1.0
    epochs: int = 30
    batch_size: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    test_fraction: float = 0.5
    jitter: float = 0.0
    vote_slices: bool = False

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        types = {f.name: f.default for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"{source}:{lineno}: key {key!r} given twice")
            try:
                values[key] = _coerce(types[key], value)
            except ValueError:
                raise ConfigError(f"{source}:{lineno}: bad value for {key}: {value!r}") from None
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.parse(text, str(path))

    def dump(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, (tuple, list)):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"

    def generator_config(self):
        from smanet.synthetic import GeneratorConfig
        return GeneratorConfig(
            seed=self.seed, num_eyes=self.num_eyes, sequences_per_eye=self.sequences_per_eye,
            seq_len=self.seq_len, size=self.input_size, noise_sigma=self.noise_sigma,
            num_classes=self.num_classes, open_range=self.open_range, narrow_range=self.narrow_range,
            synechiae_range=self.synechiae_range, class_proportions=(1 / self.num_classes,) * self.num_classes,
            dominant_bias=self.dominant_bias, max_drift=self.max_drift,
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            input_size=self.input_size, num_classes=self.num_classes, seq_len=self.seq_len,
            stage_channels=list(self.stage_channels), se_reduction=self.se_reduction,
            convlstm_hidden=self.convlstm_hidden, convlstm_kernel=self.convlstm_kernel,
            convlstm_layers=self.convlstm_layers, we_conv_channels=self.we_conv_channels,
            we_kernel=self.we_kernel,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, lr_decay=self.lr_decay, lam=self.lam, epochs=self.epochs,
            batch_size=self.batch_size, seed=self.seed, beta1=self.beta1, beta2=self.beta2,
            adam_eps=self.adam_eps, test_fraction=self.test_fraction, jitter=self.jitter,
            vote_slices=self.vote_slices,
        )


def _coerce(default, text: str):
    if isinstance(default, bool):
        lowered = text.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ValueError(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        kind = type(default[0])
        return tuple(kind(v) for v in text.split(",") if v.strip())
    raise ValueError(text)


def class_names(num_classes: int) -> tuple[str, ...]:
    return CLASS_NAMES if num_classes == 3 else ("open", "closed")


# ---------------------------------------------------------------- data helpers

def _load_split(data_dir, train_cfg: TrainConfig, split: str | None):
    """Eye-grouped (train, test) SequenceSets, or just the requested one."""
    from smanet.synthetic import load_sequences, split_grouped

    root = Path(data_dir)
    manifest = root / "manifest.csv"
    if not manifest.is_file():
        raise UsageError(f"no manifest.csv in {root}")
    entries = read_manifest(manifest)
    train, test = split_grouped(entries, train_cfg.test_fraction, train_cfg.seed)
    if split == "train":
        return load_sequences(root, train)
    if split == "test":
        return load_sequences(root, test)
    return load_sequences(root, train), load_sequences(root, test)


def predict_one(model: SMANet, sequence: np.ndarray) -> SlicePrediction:
    """Single-sequence inference; eval and predict both go through here."""
    if sequence.ndim != 3:
        raise ShapeError(f"a sequence is [T,S,S], got shape {sequence.shape}")
    if sequence.shape[0] != model.config.seq_len:
        raise ShapeError(f"checkpoint expects T={model.config.seq_len} slices, sequence has {sequence.shape[0]}")
    return model.predict(sequence[None], batch_size=1)[0]


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    from smanet.synthetic import generate_synthetic

    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise UsageError(f"refusing to write into non-empty {out}")
    entries = generate_synthetic(cfg.generator_config(), out)
    (out / RUN_CONFIG_NAME).write_text(cfg.dump(), encoding="utf-8")
    counts = np.bincount([e.label for e in entries], minlength=cfg.num_classes)
    print(f"wrote {len(entries)} sequences to {out}")
    for name, n in zip(class_names(cfg.num_classes), counts):
        print(f"{name}\t{n}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.epochs is not None:
        cfg.epochs = args.epochs
    model_cfg, train_cfg = cfg.model_config(), cfg.train_config()
    train_set, test_set = _load_split(args.data, train_cfg, None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / RUN_CONFIG_NAME).write_text(cfg.dump(), encoding="utf-8")
    result = train_loop(model_cfg, train_cfg, train_set, test_set, out, resume=args.resume,
                        log=lambda r: print(r.line(), flush=True))
    print(f"best_val_bacc={result.best_val_bacc:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, train_cfg, _ = model_from_checkpoint(args.checkpoint)
    data = _load_split(args.data, train_cfg, args.split)
    preds = [predict_one(model, x) for x in data.x]
    if train_cfg.vote_slices:
        labels_pred = np.array([p.slice_vote for p in preds])
    else:
        labels_pred = np.array([p.predicted_class for p in preds])
    probs = np.stack([p.probs_final for p in preds])
    report = evaluation_report(data.labels, labels_pred, probs, model.config.num_classes)
    text = format_report(report, {"split": args.split, "sequences": len(data)})
    sys.stdout.write(text)
    run_dir = Path(args.checkpoint).parent
    (run_dir / f"eval_{args.split}.txt").write_text(text, encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from smanet.gradcheck import format_table, run_suite

    rows = run_suite(args.seed)
    print(format_table(rows))
    failed = [r.name for r in rows if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return EXIT_NUMERICAL
    return EXIT_OK


def _row(values) -> str:
    return " ".join(f"{v:.6f}" for v in values)


def cmd_predict(args) -> int:
    model, _, _ = model_from_checkpoint(args.checkpoint)
    try:
        sequence = load_tensor(args.sequence)
    except OSError as exc:
        raise UsageError(f"cannot read sequence {args.sequence}: {exc.strerror}") from None
    pred = predict_one(model, sequence)
    names = class_names(model.config.num_classes)
    print(f"class={names[pred.predicted_class]}")
    print("classes: " + " ".join(names))
    for t, row in enumerate(pred.probs_slice):
        print(f"slice[{t}] {_row(row)}")
    for t, row in enumerate(pred.probs_seq):
        print(f"seq[{t}] {_row(row)}")
    print(f"final {_row(pred.probs_final)}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="smanet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic angle-wedge dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="continue from a checkpoint written with the same config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metric report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and block")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("predict", help="classify one sequence file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sequence", required=True)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, ConfigError, ShapeError, FormatError, CheckpointMismatch,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
