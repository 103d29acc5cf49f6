"""Spiking backbones, the spike decoder and the composed forecasting model.

Activations between layers are binary spike arrays with a leading sub-step axis of length Ts. Only the first
encoder map and the decoder consume float values.

Backbones take encoder output of shape (Ts, B, T, C):

- `SpikeTcn`: stacked causal dilated convolution blocks with SEW residuals. Neuron state is reset at every series
  step, so all steps are computed at once. Output (Ts, B, channels * T).
- `SpikeRnn`: a recurrent spiking cell whose membrane persists over all T x Ts sub-steps of a window. Output is the
  hidden spikes of the last series step, (Ts, B, hidden).
- `SpikeGru`: the GRU recurrence with every gate replaced by a spiking layer:

      z  = SN_z(W_z x + U_z h)
      r  = SN_r(W_r x + U_r h)
      n  = SN_n(W_n x + U_n (r * h))
      h' = z * h + (1 - z) * n

  Output as for `SpikeRnn`.
- `ISpikformer`: channels are tokens. Each channel's (Ts * T) spikes are embedded to dimension D, then passed through
  spiking self-attention blocks. Output (Ts, B, C, D).
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from spikets import autodiff as ad
from spikets.autodiff import DiffArray, as_diff_array
from spikets.encoders import ENCODER_KINDS, Encoder, build_encoder, check_binary
from spikets.errors import ConfigError, ShapeError
from spikets.layers import Affine, BatchNorm, CausalConv1d, MatMulLayer, Module, ModuleList, SpikingLayer
from spikets.lif import AlignmentConfig, LifConfig, LifState, lif_step, reset_state
from spikets.probe import record_activity

logger = logging.getLogger(__name__)

BACKBONES = ("tcn", "rnn", "gru", "ispikformer")
SEW_MODES = ("ADD", "AND", "IAND")
READOUTS = ("rate", "flatten")


@dataclass(frozen=True)
class TcnConfig:
    kernel_size: Optional[int] = None
    channels: int = 16
    blocks: int = 3
    downsample_kernel: int = 1

    def resolved_kernel(self, lookback: int) -> int:
        """int: The kernel size, or 3 for short windows (T <= 24) and 16 for longer ones when not set."""
        if self.kernel_size is not None:
            return self.kernel_size
        return 3 if lookback <= 24 else 16


@dataclass(frozen=True)
class RnnConfig:
    hidden: int = 128


@dataclass(frozen=True)
class SpikformerConfig:
    dim: int = 512
    ffn_dim: int = 1024
    blocks: int = 2
    ssa_threshold: float = 0.25
    scale: float = 0.125


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of a forecasting model.

    Args:
        backbone (str): One of "tcn", "rnn", "gru", "ispikformer".
        encoder (str): One of "delta", "conv", "repeat".
        ts (int): SNN sub-steps per series step.
        lif (LifConfig): Neuron parameters of every spiking layer (SSA layers override the threshold).
        readout (str): How the decoder reads the Ts axis: "flatten" (every sub-step's spikes) or "rate" (mean
            firing rate).
        sew_mode (str): Residual combine, one of "ADD", "AND", "IAND".
        encoder_kernel (int): Kernel size of the conv encoder.
        bn_momentum (float): Running-statistics momentum of every batch norm.
        bn_eps (float): Batch norm epsilon.
    """

    backbone: str = "tcn"
    encoder: str = "conv"
    ts: int = 4
    lif: LifConfig = field(default_factory=LifConfig)
    readout: str = "flatten"
    sew_mode: str = "ADD"
    encoder_kernel: int = 3
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    tcn: TcnConfig = field(default_factory=TcnConfig)
    rnn: RnnConfig = field(default_factory=RnnConfig)
    spikformer: SpikformerConfig = field(default_factory=SpikformerConfig)

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"Unknown backbone '{self.backbone}', expected one of {BACKBONES}")
        if self.encoder not in ENCODER_KINDS:
            raise ConfigError(f"Unknown encoder '{self.encoder}', expected one of {ENCODER_KINDS}")
        if self.readout not in READOUTS:
            raise ConfigError(f"Unknown readout '{self.readout}', expected one of {READOUTS}")
        if self.sew_mode not in SEW_MODES:
            raise ConfigError(f"Unknown SEW mode '{self.sew_mode}', expected one of {SEW_MODES}")
        if self.ts < 1:
            raise ConfigError(f"ts must be >= 1, got {self.ts}")
        if self.encoder_kernel < 1:
            raise ConfigError(f"encoder_kernel must be >= 1, got {self.encoder_kernel}")


def sew_combine(a: DiffArray, b: DiffArray, mode: str = "ADD") -> DiffArray:
    """Spike-element-wise combine of two binary arrays.

    ADD gives values in {0, 1, 2}; AND (a * b) and IAND ((1 - a) * b) stay binary.
    """
    a, b = as_diff_array(a), as_diff_array(b)
    if a.shape != b.shape:
        raise ShapeError(f"sew_combine: shape mismatch {a.shape} vs {b.shape}")
    check_binary(a, "sew_combine operand")
    check_binary(b, "sew_combine operand")
    if mode == "ADD":
        return a + b
    elif mode == "AND":
        return a * b
    elif mode == "IAND":
        return (1.0 - a) * b
    raise ValueError(f"Unknown SEW mode '{mode}', expected one of {SEW_MODES}")


class SewCombine(Module):
    """SEW residual connector. Records zero multiply-accumulates."""

    def __init__(self, mode: str = "ADD"):
        super().__init__()
        self.mode = mode

    def forward(self, a: DiffArray, b: DiffArray) -> DiffArray:
        record_activity(self, [a, b], 0)
        return sew_combine(a, b, self.mode)


def gru_update(z: DiffArray, h: DiffArray, n: DiffArray) -> DiffArray:
    """Binary multiplex h' = z * h + (1 - z) * n."""
    return z * h + (1.0 - z) * n


def spiking_attention(
    q: DiffArray,
    k: DiffArray,
    v: DiffArray,
    scale: float,
    sn: SpikingLayer,
    qk_matmul: Optional[MatMulLayer] = None,
    kv_matmul: Optional[MatMulLayer] = None,
) -> DiffArray:
    """SN(scale * (Q K^T) V) for binary Q, K, V of shape (Ts, ..., tokens, D); no softmax."""
    qk_matmul = qk_matmul or MatMulLayer()
    kv_matmul = kv_matmul or MatMulLayer()
    scores = qk_matmul(q, ad.swapaxes(k, -1, -2))
    return sn(kv_matmul(scores, v) * scale)


class TcnBlock(Module):
    """Causal conv -> BN -> SN, with a SEW residual and a spiking down-sampler when channel counts differ."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel_size: int,
        dilation: int,
        cfg: ModelConfig,
        rng: np.random.Generator,
    ):
        super().__init__()
        self.lif = cfg.lif
        self.conv = CausalConv1d(c_in, c_out, kernel_size, rng, dilation=dilation)
        self.bn = BatchNorm(c_out, feature_axis=2, eps=cfg.bn_eps, momentum=cfg.bn_momentum)
        self.sn = SpikingLayer(cfg.lif)
        if c_in != c_out:
            self.downsample = CausalConv1d(c_in, c_out, cfg.tcn.downsample_kernel, rng)
            self.downsample_bn = BatchNorm(c_out, feature_axis=2, eps=cfg.bn_eps, momentum=cfg.bn_momentum)
            self.downsample_sn = SpikingLayer(cfg.lif)
        else:
            self.downsample = None
        self.sew = SewCombine(cfg.sew_mode)
        self.out_sn = SpikingLayer(cfg.lif)

    def _fire(self, sn: SpikingLayer, currents: DiffArray, sequential: bool) -> DiffArray:
        if not sequential:
            return sn(currents)
        spikes = []
        state = LifState()
        for t in range(currents.shape[-1]):
            reset_state(state, self.lif)
            spikes.append(sn(currents[..., t], state))
        return ad.stack(spikes, axis=-1)

    def forward(self, x: DiffArray, sequential: bool = False) -> DiffArray:
        out = self._fire(self.sn, self.bn(self.conv(x)), sequential)
        if self.downsample is not None:
            residual = self._fire(self.downsample_sn, self.downsample_bn(self.downsample(x)), sequential)
        else:
            residual = x
        return self._fire(self.out_sn, self.sew(out, residual), sequential)


class SpikeTcn(Module):
    def __init__(self, channels_in: int, lookback: int, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        kernel = cfg.tcn.resolved_kernel(lookback)
        self.blocks = ModuleList()
        c_in = channels_in
        for i in range(cfg.tcn.blocks):
            self.blocks.append(TcnBlock(c_in, cfg.tcn.channels, kernel, 2**i, cfg, rng))
            c_in = cfg.tcn.channels
        self.out_features = cfg.tcn.channels * lookback

    def forward(self, s: DiffArray, sequential: bool = False) -> DiffArray:
        """Map spikes (Ts, B, T, C) to hidden spikes (Ts, B, channels * T).

        With `sequential`, each series step is fired on its own after an explicit state reset; the result is
        identical to the default batched evaluation.
        """
        check_binary(s, "Spike-TCN input")
        x = s.transpose(0, 1, 3, 2)
        for block in self.blocks:
            x = block(x, sequential=sequential)
        ts, batch = x.shape[:2]
        return x.reshape(ts, batch, x.shape[2] * x.shape[3])


class SpikeRnn(Module):
    def __init__(self, channels_in: int, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.lif = cfg.lif
        self.hidden = cfg.rnn.hidden
        self.input_proj = Affine(channels_in, self.hidden, rng)
        self.recurrent_proj = Affine(self.hidden, self.hidden, rng)
        self.out_features = self.hidden

    def forward(self, s: DiffArray, reset_at=()) -> DiffArray:
        """Run the cell over every series step and sub-step of spikes (Ts, B, T, C).

        Args:
            s (DiffArray): Input spikes.
            reset_at (Iterable[int]): Series steps at whose start the state is zeroed (used to probe statefulness).

        Returns:
            DiffArray: Hidden spikes of the last series step, (Ts, B, hidden).
        """
        check_binary(s, "Spike-RNN input")
        ts, batch, steps, _ = s.shape
        state = LifState()
        h = DiffArray(np.zeros((batch, self.hidden)))
        for t in range(steps):
            if t in reset_at:
                reset_state(state, self.lif)
                h = DiffArray(np.zeros((batch, self.hidden)))
            last = []
            for k in range(ts):
                h = lif_step(self.input_proj(s[k, :, t, :]) + self.recurrent_proj(h), state, self.lif)
                last.append(h)
        return ad.stack(last, axis=0)


class SpikeGru(Module):
    """Gated recurrence with every gate a spiking layer:

        z  = SN(W_z x + U_z h)
        r  = SN(W_r x + U_r h)
        n  = SN(W_n x + U_n (r * h))
        h' = z * h + (1 - z) * n

    All terms are binary, so h' is binary too.
    """

    def __init__(self, channels_in: int, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.lif = cfg.lif
        self.hidden = cfg.rnn.hidden
        for gate in ("z", "r", "n"):
            setattr(self, f"w_{gate}", Affine(channels_in, self.hidden, rng))
            setattr(self, f"u_{gate}", Affine(self.hidden, self.hidden, rng))
        self.out_features = self.hidden

    def step(self, x: DiffArray, h: DiffArray, states: dict) -> DiffArray:
        """One sub-step of the spiking GRU recurrence; `states` holds the z, r and n membrane states."""
        z = lif_step(self.w_z(x) + self.u_z(h), states["z"], self.lif)
        r = lif_step(self.w_r(x) + self.u_r(h), states["r"], self.lif)
        n = lif_step(self.w_n(x) + self.u_n(r * h), states["n"], self.lif)
        return gru_update(z, h, n)

    def forward(self, s: DiffArray, reset_at=()) -> DiffArray:
        check_binary(s, "Spike-GRU input")
        ts, batch, steps, _ = s.shape
        states = {gate: LifState() for gate in ("z", "r", "n")}
        h = DiffArray(np.zeros((batch, self.hidden)))
        for t in range(steps):
            if t in reset_at:
                for state in states.values():
                    reset_state(state, self.lif)
                h = DiffArray(np.zeros((batch, self.hidden)))
            last = []
            for k in range(ts):
                h = self.step(s[k, :, t, :], h, states)
                last.append(h)
        return ad.stack(last, axis=0)


class SpikingSelfAttention(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        dim = cfg.spikformer.dim
        ssa_lif = LifConfig(
            u_thr=cfg.spikformer.ssa_threshold,
            beta=cfg.lif.beta,
            v_reset=cfg.lif.v_reset,
            alpha=cfg.lif.alpha,
            center_at_threshold=cfg.lif.center_at_threshold,
        )
        self.scale = cfg.spikformer.scale
        for name in ("q", "k", "v"):
            setattr(self, f"{name}_proj", Affine(dim, dim, rng))
            setattr(self, f"{name}_bn", BatchNorm(dim, eps=cfg.bn_eps, momentum=cfg.bn_momentum))
            setattr(self, f"{name}_sn", SpikingLayer(ssa_lif))
        self.qk = MatMulLayer()
        self.kv = MatMulLayer()
        self.attn_sn = SpikingLayer(ssa_lif)
        self.out_proj = Affine(dim, dim, rng)
        self.out_bn = BatchNorm(dim, eps=cfg.bn_eps, momentum=cfg.bn_momentum)
        self.out_sn = SpikingLayer(cfg.lif)

    def project(self, name: str, x: DiffArray) -> DiffArray:
        proj, bn, sn = (getattr(self, f"{name}_{part}") for part in ("proj", "bn", "sn"))
        return sn(bn(proj(x)))

    def forward(self, x: DiffArray) -> DiffArray:
        q, k, v = (self.project(name, x) for name in ("q", "k", "v"))
        attn = spiking_attention(q, k, v, self.scale, self.attn_sn, self.qk, self.kv)
        return self.out_sn(self.out_bn(self.out_proj(attn)))


class SpikingMlp(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        dim, hidden = cfg.spikformer.dim, cfg.spikformer.ffn_dim
        self.fc1 = Affine(dim, hidden, rng)
        self.bn1 = BatchNorm(hidden, eps=cfg.bn_eps, momentum=cfg.bn_momentum)
        self.sn1 = SpikingLayer(cfg.lif)
        self.fc2 = Affine(hidden, dim, rng)
        self.bn2 = BatchNorm(dim, eps=cfg.bn_eps, momentum=cfg.bn_momentum)
        self.sn2 = SpikingLayer(cfg.lif)

    def forward(self, x: DiffArray) -> DiffArray:
        return self.sn2(self.bn2(self.fc2(self.sn1(self.bn1(self.fc1(x))))))


class SpikformerBlock(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.attn = SpikingSelfAttention(cfg, rng)
        self.attn_sew = SewCombine(cfg.sew_mode)
        self.attn_out_sn = SpikingLayer(cfg.lif)
        self.mlp = SpikingMlp(cfg, rng)
        self.mlp_sew = SewCombine(cfg.sew_mode)
        self.mlp_out_sn = SpikingLayer(cfg.lif)

    def forward(self, x: DiffArray) -> DiffArray:
        x = self.attn_out_sn(self.attn_sew(self.attn(x), x))
        return self.mlp_out_sn(self.mlp_sew(self.mlp(x), x))


class ISpikformer(Module):
    def __init__(self, lookback: int, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.ts = cfg.ts
        self.embedding = Affine(cfg.ts * lookback, cfg.spikformer.dim, rng, macs_scale=cfg.ts)
        self.embedding_sn = SpikingLayer(cfg.lif)
        self.blocks = ModuleList(SpikformerBlock(cfg, rng) for _ in range(cfg.spikformer.blocks))
        self.out_features = cfg.spikformer.dim

    def embed(self, s: DiffArray) -> DiffArray:
        """Channel-wise spiking embedding: (Ts, B, T, C) spikes to (Ts, B, C, D) token spikes."""
        ts, batch, steps, channels = s.shape
        tokens = s.transpose(1, 3, 0, 2).reshape(batch, channels, ts * steps)
        current = self.embedding(tokens)
        return self.embedding_sn(ad.stack([current] * self.ts, axis=0))

    def forward(self, s: DiffArray) -> DiffArray:
        check_binary(s, "iSpikformer input")
        x = self.embed(s)
        for block in self.blocks:
            x = block(x)
        return x


class Decoder(Module):
    """Fully connected head mapping hidden spikes to an (L, C) forecast.

    With `per_channel`, the hidden spikes are (Ts, B, C, F) and one shared map F -> L is applied per channel token;
    otherwise they are (Ts, B, F) and mapped to L * C values.
    """

    def __init__(
        self,
        in_features: int,
        horizon: int,
        channels: int,
        ts: int,
        rng: np.random.Generator,
        readout: str = "rate",
        per_channel: bool = False,
    ):
        super().__init__()
        if readout not in READOUTS:
            raise ConfigError(f"Unknown readout '{readout}', expected one of {READOUTS}")
        self.horizon, self.channels, self.readout, self.per_channel = horizon, channels, readout, per_channel
        features = in_features * (ts if readout == "flatten" else 1)
        out = horizon if per_channel else horizon * channels
        self.proj = Affine(features, out, rng, float_input=True)

    def read(self, h: DiffArray) -> DiffArray:
        if self.readout == "rate":
            return h.mean(axis=0)
        if self.per_channel:
            ts, batch, channels, features = h.shape
            return h.transpose(1, 2, 0, 3).reshape(batch, channels, ts * features)
        ts, batch, features = h.shape
        return h.transpose(1, 0, 2).reshape(batch, ts * features)

    def forward(self, h: DiffArray) -> DiffArray:
        y = self.proj(self.read(h))
        if self.per_channel:
            return y.transpose(0, 2, 1)
        return y.reshape(y.shape[0], self.horizon, self.channels)


def decode(h: DiffArray, decoder: Decoder) -> DiffArray:
    """Forecast (B, L, C) from backbone spikes."""
    return decoder(h)


class ForecastModel(Module):
    """Encoder, spiking backbone and decoder behind one call: (B, T, C) windows to (B, L, C) forecasts."""

    def __init__(
        self,
        encoder: Encoder,
        backbone: Module,
        decoder: Decoder,
        alignment: AlignmentConfig,
        horizon: int,
        config: Optional[ModelConfig] = None,
    ):
        super().__init__()
        self.encoder = encoder
        self.backbone = backbone
        self.decoder = decoder
        self.alignment = alignment
        self.horizon = horizon
        self.config = config

    def forward(self, x) -> DiffArray:
        x = as_diff_array(x)
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        expected = (self.alignment.series_len, self.alignment.channels)
        if x.ndim != 3 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"Model expects windows of shape (B, {expected[0]}, {expected[1]}), got {x.shape}")
        return self.decoder(self.backbone(self.encoder(x)))


def build_backbone(cfg: ModelConfig, lookback: int, channels: int, rng: np.random.Generator) -> Module:
    if cfg.backbone == "tcn":
        return SpikeTcn(channels, lookback, cfg, rng)
    elif cfg.backbone == "rnn":
        return SpikeRnn(channels, cfg, rng)
    elif cfg.backbone == "gru":
        return SpikeGru(channels, cfg, rng)
    return ISpikformer(lookback, cfg, rng)


def build_model(cfg: ModelConfig, lookback: int, horizon: int, channels: int, seed: int = 0) -> ForecastModel:
    """Create a freshly initialized forecasting model.

    Args:
        cfg (ModelConfig): Architecture.
        lookback (int): Window length T.
        horizon (int): Forecast length L.
        channels (int): Number of series C.
        seed (int): Seed of the weight initialization.

    Returns:
        ForecastModel: The model, in training mode.
    """
    if min(lookback, horizon, channels) < 1:
        raise ConfigError("lookback, horizon and channels must all be >= 1")
    rng = np.random.default_rng(seed)
    encoder = build_encoder(
        cfg.encoder,
        cfg.ts,
        cfg.lif,
        rng,
        kernel_size=cfg.encoder_kernel,
        bn_eps=cfg.bn_eps,
        bn_momentum=cfg.bn_momentum,
    )
    backbone = build_backbone(cfg, lookback, channels, rng)
    decoder = Decoder(
        backbone.out_features,
        horizon,
        channels,
        cfg.ts,
        rng,
        readout=cfg.readout,
        per_channel=cfg.backbone == "ispikformer",
    )
    alignment = AlignmentConfig(ts=cfg.ts, series_len=lookback, channels=channels)
    model = ForecastModel(encoder, backbone, decoder, alignment, horizon, config=cfg)
    logger.debug("Built %s/%s model with %d parameters", cfg.encoder, cfg.backbone, model.num_parameters())
    return model
