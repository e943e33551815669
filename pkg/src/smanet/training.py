"""Multi-level loss, Adam, checkpoint state and the deterministic training loop."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from smanet import ops
from smanet.formats import load_checkpoint, save_checkpoint
from smanet.metrics import ConfusionMatrix, balanced_accuracy
from smanet.model import ModelConfig, SMANet
from smanet.synthetic import SequenceSet
from smanet.tensor import ConfigError, NumericalError, Tape, Tensor


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    lr_decay: float = 0.95
    lam: float = 1.0
    epochs: int = 30
    batch_size: int = 4
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    test_fraction: float = 0.5
    jitter: float = 0.0
    vote_slices: bool = False

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not 0 < self.test_fraction < 1:
            raise ConfigError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")

    def epoch_lr(self, epoch: int) -> float:
        """Learning rate for zero-based ``epoch``."""
        return self.learning_rate * self.lr_decay ** epoch


# ---------------------------------------------------------------- losses

def _rows(logits: Tensor, targets) -> tuple[Tensor, np.ndarray, int]:
    """Flatten [T,K] or [B,T,K] logits to rows with one repeated target per sequence."""
    if logits.ndim == 2:
        logits = ops.reshape(logits, (1,) + logits.dims)
    b, t, k = logits.dims
    targets = np.broadcast_to(np.asarray(targets, dtype=np.int64).reshape(-1), (b,))
    return ops.reshape(logits, (b * t, k)), np.repeat(targets, t), t


def loss_2d(slice_logits: Tensor, targets) -> Tensor:
    """Slice-level loss: sum over the T slices of cross-entropy against the sequence label.

    Batched input [B,T,K] averages the per-sequence sums over B.
    """
    rows, row_targets, t = _rows(slice_logits, targets)
    ce, _ = ops.softmax_cross_entropy(rows, row_targets)
    return ops.mul(ce, float(t))


def loss_3d(seq_logits: Tensor, final_logits: Tensor, targets) -> Tensor:
    """Sequence-level loss: per-position cross-entropy summed over T, plus the final head's."""
    positions = loss_2d(seq_logits, targets)
    if final_logits.ndim == 1:
        final_logits = ops.reshape(final_logits, (1,) + final_logits.dims)
    targets = np.broadcast_to(np.asarray(targets, dtype=np.int64).reshape(-1), (final_logits.dims[0],))
    final, _ = ops.softmax_cross_entropy(final_logits, targets)
    return ops.add(positions, final)


def loss_sv(l2d: Tensor, l3d: Tensor, lam: float) -> Tensor:
    return ops.add(l2d, ops.mul(l3d, float(lam)))


def batch_loss(model: SMANet, x: Tensor, labels, lam: float):
    out = model(x)
    total = loss_sv(loss_2d(out.slice_logits, labels),
                    loss_3d(out.seq_logits, out.final_logits, labels), lam)
    return total, out


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0


class Adam:
    """Bias-corrected Adam over a name -> Tensor parameter map."""

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = AdamState({n: np.zeros_like(p.data) for n, p in params.items()},
                               {n: np.zeros_like(p.data) for n, p in params.items()})

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if not np.isfinite(p.grad).all():
                raise NumericalError(f"non-finite gradient in parameter {name}")
        st = self.state
        st.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for name, p in self.params.items():
            g = p.grad
            m, v = st.m[name], st.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)
            if not np.isfinite(p.data).all():
                raise NumericalError(f"parameter {name} became non-finite after the update")


# ---------------------------------------------------------------- checkpoint state

class CheckpointMismatch(ValueError):
    """Checkpoint tensors do not fit the model they are loaded into."""


def _encode_config(prefix: str, cfg) -> dict[str, np.ndarray]:
    out = {}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        out[f"{prefix}.{f.name}"] = np.atleast_1d(np.asarray(value, dtype=np.float32))
    return out


def _decode_config(cls, prefix: str, entries: dict[str, np.ndarray]):
    """Inverse of _encode_config; floats round-trip through 7 significant digits."""
    kwargs = {}
    defaults = cls()
    for f in fields(cls):
        key = f"{prefix}.{f.name}"
        if key not in entries:
            raise CheckpointMismatch(f"checkpoint lacks config entry {key}")
        raw = entries[key]
        default = getattr(defaults, f.name)
        if isinstance(default, bool):
            kwargs[f.name] = bool(raw[0])
        elif isinstance(default, int):
            kwargs[f.name] = int(round(float(raw[0])))
        elif isinstance(default, float):
            kwargs[f.name] = float(f"{float(raw[0]):.7g}")
        else:
            kwargs[f.name] = [int(round(float(v))) for v in raw]
    return cls(**kwargs)


def model_entries(model: SMANet) -> dict[str, np.ndarray]:
    entries = {n: p.data for n, p in model.named_parameters().items()}
    entries.update(model.named_buffers())
    return entries


def checkpoint_entries(model: SMANet, train_cfg: TrainConfig, opt: Adam | None = None,
                       epoch: int = 0, best: float = -1.0) -> dict[str, np.ndarray]:
    entries = model_entries(model)
    entries.update(_encode_config("config.model", model.config))
    entries.update(_encode_config("config.train", train_cfg))
    if opt is not None:
        for name in model.named_parameters():
            entries[f"adam.m.{name}"] = opt.state.m[name]
            entries[f"adam.v.{name}"] = opt.state.v[name]
        entries["adam.step"] = np.array([opt.state.step], dtype=np.float32)
    entries["meta.epoch"] = np.array([epoch], dtype=np.float32)
    entries["meta.best_val_bacc"] = np.array([best], dtype=np.float32)
    return entries


def load_model_entries(model: SMANet, entries: dict[str, np.ndarray]) -> None:
    """Copy parameters and buffers in; the first missing or mis-shaped tensor is an error."""
    targets = {n: p.data for n, p in model.named_parameters().items()}
    targets.update(model.named_buffers())
    for name, dst in targets.items():
        if name not in entries:
            raise CheckpointMismatch(f"checkpoint has no tensor {name}")
        if entries[name].shape != dst.shape:
            raise CheckpointMismatch(
                f"tensor {name}: checkpoint dims {entries[name].shape} vs model dims {dst.shape}")
    known = set(targets)
    for name in entries:
        if not name.startswith(("config.", "adam.", "meta.")) and name not in known:
            raise CheckpointMismatch(f"checkpoint tensor {name} has no counterpart in the model")
    for name, dst in targets.items():
        dst[...] = entries[name]


def model_from_checkpoint(path) -> tuple[SMANet, TrainConfig, dict]:
    entries = load_checkpoint(path)
    model_cfg = _decode_config(ModelConfig, "config.model", entries)
    train_cfg = _decode_config(TrainConfig, "config.train", entries)
    model = SMANet(model_cfg, seed=train_cfg.seed)
    load_model_entries(model, entries)
    return model, train_cfg, entries


def restore_optimizer(opt: Adam, entries: dict[str, np.ndarray]) -> None:
    for name in opt.params:
        for kind, store in (("m", opt.state.m), ("v", opt.state.v)):
            key = f"adam.{kind}.{name}"
            if key not in entries:
                raise CheckpointMismatch(f"checkpoint has no optimizer tensor {key}")
            store[name][...] = entries[key]
    opt.state.step = int(entries["adam.step"][0])


# ---------------------------------------------------------------- loop

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_bacc: float
    lr: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.train_loss:.6f}\t{self.val_bacc:.6f}\t{self.lr:.6e}"


@dataclass
class TrainResult:
    model: SMANet
    history: list
    best_val_bacc: float


def predict_classes(model: SMANet, data: SequenceSet, vote_slices: bool = False) -> np.ndarray:
    preds = model.predict(data.x)
    return np.array([p.slice_vote if vote_slices else p.predicted_class for p in preds])


def evaluate_bacc(model: SMANet, data: SequenceSet, vote_slices: bool = False) -> float:
    pred = predict_classes(model, data, vote_slices)
    return balanced_accuracy(ConfusionMatrix.from_labels(data.labels, pred, model.config.num_classes))


def _jitter(x: np.ndarray, amount: float, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    brightness = rng.uniform(-amount, amount, size=(n, 1, 1, 1))
    contrast = rng.uniform(1 - amount, 1 + amount, size=(n, 1, 1, 1))
    return np.clip((x - 0.5) * contrast + 0.5 + brightness, 0.0, 1.0).astype(np.float32)


def train_loop(model_cfg: ModelConfig, train_cfg: TrainConfig, train_set: SequenceSet,
               val_set: SequenceSet | None = None, out_dir=None, resume=None,
               log=None) -> TrainResult:
    """Train with a seeded per-epoch shuffle; writes last.smck, best.smck and metrics.tsv.

    ``resume`` is a checkpoint path written by a previous run with the same
    configs; training continues from the epoch after the one it recorded.
    """
    model = SMANet(model_cfg, seed=train_cfg.seed)
    opt = Adam(model.named_parameters(), train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
    start_epoch, best = 0, -1.0
    if resume is not None:
        entries = load_checkpoint(resume)
        saved_cfg = _decode_config(ModelConfig, "config.model", entries)
        if saved_cfg != model_cfg:
            raise CheckpointMismatch(f"resume checkpoint was written for {saved_cfg}")
        load_model_entries(model, entries)
        restore_optimizer(opt, entries)
        start_epoch = int(entries["meta.epoch"][0])
        best = float(entries["meta.best_val_bacc"][0])

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "metrics.tsv"
        if resume is None or not log_path.exists():
            log_path.write_text("", encoding="utf-8")
        if train_cfg.epochs == 0 or start_epoch >= train_cfg.epochs:
            save_checkpoint(out / "last.smck", checkpoint_entries(model, train_cfg, opt, start_epoch, best))
            if not (out / "best.smck").exists():
                save_checkpoint(out / "best.smck", checkpoint_entries(model, train_cfg, opt, start_epoch, best))

    history = []
    n = len(train_set)
    for epoch in range(start_epoch, train_cfg.epochs):
        lr = train_cfg.epoch_lr(epoch)
        order = np.random.default_rng([train_cfg.seed, epoch]).permutation(n)
        model.train()
        losses = []
        try:
            for start in range(0, n, train_cfg.batch_size):
                idx = order[start:start + train_cfg.batch_size]
                xb = train_set.x[idx]
                if train_cfg.jitter > 0:
                    xb = _jitter(xb, train_cfg.jitter, np.random.default_rng([train_cfg.seed, epoch, start]))
                model.zero_grad()
                with Tape() as tape:
                    loss, _ = batch_loss(model, Tensor(xb), train_set.labels[idx], train_cfg.lam)
                tape.backward(loss)
                opt.step(lr)
                losses.append(loss.item())
        except NumericalError:
            if out is not None:
                save_checkpoint(out / "last.smck", checkpoint_entries(model, train_cfg, opt, epoch, best))
            raise
        train_loss = float(np.mean(losses))
        if not math.isfinite(train_loss):
            raise NumericalError(f"training loss became non-finite in epoch {epoch + 1}")
        val_bacc = evaluate_bacc(model, val_set, train_cfg.vote_slices) if val_set is not None else float("nan")
        record = EpochRecord(epoch + 1, train_loss, val_bacc, lr)
        history.append(record)
        if log is not None:
            log(record)
        improved = val_bacc > best
        if improved:
            best = val_bacc
        if out is not None:
            with open(out / "metrics.tsv", "a", encoding="utf-8", newline="\n") as fh:
                fh.write(record.line() + "\n")
            entries = checkpoint_entries(model, train_cfg, opt, epoch + 1, best)
            save_checkpoint(out / "last.smck", entries)
            if improved or not (out / "best.smck").exists():
                save_checkpoint(out / "best.smck", entries)
    return TrainResult(model, history, best)


def config_dict(cfg) -> dict:
    return asdict(cfg)
