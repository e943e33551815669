"""SMA-Net: MSDA backbone per slice, ConvLSTM over the slice features, and three heads.

The three prediction families for a sequence of T slices:

* slice probabilities, one row per slice, from the backbone features directly;
* sequence probabilities, one row per position, from the ConvLSTM states;
* the final prediction, from a 1-D convolution over the T sequence rows
  (the weighted ensemble) followed by a fully connected layer.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from smanet import ops
from smanet.layers import (
    Conv1d,
    ConvBNReLU,
    ConvLSTM,
    ConvLstmConfig,
    Linear,
    Module,
    MsdaConfig,
    MSDABlock,
    msda_census,
)
from smanet.tensor import ConfigError, ShapeError, Tensor

CLASS_NAMES = ("open", "narrow", "synechiae")


@dataclass
class ModelConfig:
    input_size: int = 32
    num_classes: int = 3
    seq_len: int = 5
    stage_channels: list = field(default_factory=lambda: [16, 32, 64])
    se_reduction: int = 4
    convlstm_hidden: int = 32
    convlstm_kernel: int = 3
    convlstm_layers: int = 2
    we_conv_channels: int = 8
    we_kernel: int = 3

    def __post_init__(self):
        self.stage_channels = [int(c) for c in self.stage_channels]
        if self.num_classes not in (2, 3):
            raise ConfigError(f"num_classes must be 2 or 3, got {self.num_classes}")
        if not self.stage_channels:
            raise ConfigError("at least one backbone stage is required")
        if self.input_size % 2 ** (len(self.stage_channels) + 1):
            raise ConfigError(
                f"input_size {self.input_size} not divisible by 2^{len(self.stage_channels) + 1}")
        if self.we_kernel % 2 == 0:
            raise ConfigError(f"we_kernel must be odd for same padding, got {self.we_kernel}")
        if self.seq_len < self.we_kernel:
            raise ConfigError(f"seq_len {self.seq_len} shorter than we_kernel {self.we_kernel}")

    @property
    def convlstm(self) -> ConvLstmConfig:
        return ConvLstmConfig(self.stage_channels[-1], self.convlstm_hidden,
                              self.convlstm_kernel, self.convlstm_layers)

    @property
    def feature_size(self) -> int:
        return self.input_size // 2 ** (len(self.stage_channels) + 1)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SlicePrediction:
    probs_slice: np.ndarray  # [T,K]
    probs_seq: np.ndarray  # [T,K]
    probs_final: np.ndarray  # [K]

    @property
    def predicted_class(self) -> int:
        return int(np.argmax(self.probs_final))  # argmax keeps the lowest index on ties

    @property
    def slice_vote(self) -> int:
        return majority_vote(self.probs_slice)


def majority_vote(probs: np.ndarray) -> int:
    """Most frequent per-row argmax; ties go to the lowest class index."""
    votes = np.bincount(np.argmax(probs, axis=1), minlength=probs.shape[1])
    return int(np.argmax(votes))


@dataclass
class ForwardOutput:
    slice_logits: Tensor  # [B,T,K]
    seq_logits: Tensor  # [B,T,K]
    final_logits: Tensor  # [B,K]

    def predictions(self) -> list[SlicePrediction]:
        ps = ops._softmax(self.slice_logits.data.astype(np.float64))
        pq = ops._softmax(self.seq_logits.data.astype(np.float64))
        pf = ops._softmax(self.final_logits.data.astype(np.float64))
        return [SlicePrediction(ps[b], pq[b], pf[b]) for b in range(pf.shape[0])]


class WeightedEnsemble(Module):
    """Conv1d over the T x K probability descriptor, ReLU, flatten, FC to K logits."""

    def __init__(self, num_classes, seq_len, channels, kernel, rng):
        self.seq_len = seq_len
        self.conv = Conv1d(num_classes, channels, kernel, rng, padding=kernel // 2)
        self.fc = Linear(channels * seq_len, num_classes, rng)

    def __call__(self, probs_seq: Tensor) -> Tensor:
        """probs_seq [B,T,K] -> logits [B,K]."""
        b, t, _ = probs_seq.dims
        if t != self.seq_len:
            raise ShapeError(f"weighted ensemble was built for T={self.seq_len}, got T={t}")
        h = ops.relu(self.conv(ops.transpose(probs_seq, (0, 2, 1))))
        return self.fc(ops.reshape(h, (b, -1)))


class SMANet(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        k = config.num_classes
        chans = config.stage_channels
        self.stem = ConvBNReLU(1, chans[0], 3, rng, stride=2, padding=1)
        prev = chans[0]
        for i, c in enumerate(chans, start=1):
            stage = Module()
            stage.msda = MSDABlock(MsdaConfig(prev, c, config.se_reduction), rng)
            stage.down = ConvBNReLU(c, c, 3, rng, stride=2, padding=1)
            setattr(self, f"stage{i}", stage)
            prev = c
        self.slice_head = Linear(config.stage_channels[-1], k, rng)
        self.convlstm = ConvLSTM(config.convlstm, rng)
        self.seq_head = Linear(config.convlstm_hidden, k, rng)
        self.ensemble = WeightedEnsemble(k, config.seq_len, config.we_conv_channels,
                                         config.we_kernel, rng)

    def backbone(self, x: Tensor) -> Tensor:
        """Slices [N,1,S,S] -> features [N,C_last,S/2^(stages+1),...]: stride-2 stem,
        then per stage an MSDA block and a stride-2 3x3 conv."""
        h = self.stem(x)
        for i in range(1, len(self.config.stage_channels) + 1):
            stage = getattr(self, f"stage{i}")
            h = stage.down(stage.msda(h))
        return h

    def features(self, x: Tensor) -> Tensor:
        """[B,T,S,S] sequences -> backbone features [B,T,C,h,w]."""
        if x.ndim != 4:
            raise ShapeError(f"expected [B,T,S,S] sequences, got {x.dims}")
        b, t, s, s2 = x.dims
        if s != self.config.input_size or s2 != s:
            raise ShapeError(f"slices must be {self.config.input_size}x{self.config.input_size}, got {s}x{s2}")
        feats = self.backbone(ops.reshape(x, (b * t, 1, s, s)))
        return ops.reshape(feats, (b, t) + feats.dims[1:])

    def __call__(self, x: Tensor) -> ForwardOutput:
        b, t = x.dims[:2]
        if t != self.config.seq_len:
            raise ShapeError(f"model was built for T={self.config.seq_len} slices, got {t}")
        feats = self.features(x)
        flat = ops.reshape(feats, (b * t,) + feats.dims[2:])
        k = self.config.num_classes
        slice_logits = ops.reshape(self.slice_head(ops.global_avg_pool(flat)), (b, t, k))

        states = self.convlstm.unroll([ops.select(feats, 1, i) for i in range(t)])
        hs = ops.stack(states, axis=1)  # [B,T,Ch,h,w]
        hs = ops.reshape(hs, (b * t,) + hs.dims[2:])
        seq_flat = self.seq_head(ops.global_avg_pool(hs))
        seq_logits = ops.reshape(seq_flat, (b, t, k))
        probs_seq = ops.reshape(ops.softmax(seq_flat), (b, t, k))
        final_logits = self.ensemble(probs_seq)
        return ForwardOutput(slice_logits, seq_logits, final_logits)

    def predict(self, sequences: np.ndarray, batch_size: int = 32) -> list[SlicePrediction]:
        """Eval-mode forward over an array of sequences [B,T,S,S]."""
        was_training = self.training
        self.eval()
        preds = []
        try:
            for start in range(0, len(sequences), batch_size):
                chunk = Tensor(sequences[start:start + batch_size])
                preds.extend(self(chunk).predictions())
        finally:
            self.train(was_training)
        return preds


def parameter_census(config: ModelConfig) -> dict[str, int]:
    """Analytic parameter counts per component, independent of any instance."""
    chans = config.stage_channels
    k = config.num_classes
    census = {"stem": chans[0] * 9 + 2 * chans[0]}
    prev = chans[0]
    depthwise = 0
    for i, c in enumerate(chans, start=1):
        block = msda_census(MsdaConfig(prev, c, config.se_reduction))
        depthwise += int(np.sum(block.branches))
        census[f"stage{i}.msda"] = block.total
        census[f"stage{i}.down"] = c * c * 9 + 2 * c
        prev = c
    census["slice_head"] = chans[-1] * k + k
    lstm = config.convlstm
    ks = lstm.kernel_size ** 2
    total = 0
    for layer in range(lstm.num_layers):
        cin = lstm.input_channels if layer == 0 else lstm.hidden_channels
        total += (cin + lstm.hidden_channels) * 4 * lstm.hidden_channels * ks + 4 * lstm.hidden_channels
    census["convlstm"] = total
    census["seq_head"] = lstm.hidden_channels * k + k
    census["ensemble"] = (k * config.we_conv_channels * config.we_kernel + config.we_conv_channels
                          + config.we_conv_channels * config.seq_len * k + k)
    census["depthwise_branches"] = depthwise
    census["total"] = int(np.sum([v for n, v in census.items() if n != "depthwise_branches"]))
    return census


def depthwise_branch_weights(model: SMANet) -> int:
    return int(np.sum([p.size for n, p in model.named_parameters().items()
                       if ".branch" in n and n.endswith("depthwise.weight")]))

