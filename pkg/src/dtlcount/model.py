"""Dual-decoder counting network.

An encoder (3x3 conv blocks with pooling), a feature enhancement module
(spatial attention, channel attention, six dilated convolutions), and two
decoders fed by the same enhanced features: the domain-agnostic decoder
regresses the cell density map (ReLU head), the domain-specific decoder
reconstructs the cell-free style image (sigmoid head). Training minimizes
pixel MSE on the density map plus a perceptual term comparing feature maps
of the generated and ground-truth style images under a frozen extractor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DataError, ShapeError
from .tensor import ConvParams, Tensor

ENCODER_GROUP = "encoder"
ENHANCE_GROUP = "enhance"
SPECIFIC_GROUP = "decoder_specific"
AGNOSTIC_GROUP = "decoder_agnostic"
PARAMETER_GROUPS = (ENCODER_GROUP, ENHANCE_GROUP, SPECIFIC_GROUP, AGNOSTIC_GROUP)


@dataclass
class ModelConfig:
    """Architecture knobs. Defaults are the desk-scale 64x64 configuration."""

    input_channels: int = 1
    base_width: int = 16
    encoder_blocks: tuple = ()  # ((convs, out_channels), ...) - derived from base_width if empty
    dilation_rates: tuple = (1, 2, 4, 8, 4, 2)
    decoder_channels: tuple = (32, 16, 16)
    style_channels: int = 1
    extractor_blocks: int = 2
    attention_reduction: int = 4
    disentangled: bool = True
    # Density maps integrate to the count, so their raw values are ~1e-2 at
    # most and an MSE against them starves the density branch of gradient
    # (the ReLU head dies while the style branch keeps learning). The model
    # therefore regresses `density_scale * density`; count estimates divide
    # the predicted integral back by this factor.
    density_scale: float = 100.0
    seed: int = 0

    def __post_init__(self):
        if not self.encoder_blocks:
            bw = self.base_width
            self.encoder_blocks = ((2, bw), (2, 2 * bw), (3, 4 * bw))
        self.encoder_blocks = tuple((int(n), int(c)) for n, c in self.encoder_blocks)
        self.dilation_rates = tuple(int(d) for d in self.dilation_rates)
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        if len(self.encoder_blocks) != 3:
            raise DataError(
                f"encoder needs exactly 3 pooled blocks (decoders upsample 3 times), "
                f"got {len(self.encoder_blocks)}")
        if len(self.dilation_rates) != 6:
            raise DataError(f"dilation_rates needs 6 entries, got {len(self.dilation_rates)}")
        if len(self.decoder_channels) != 3:
            raise DataError(f"decoder_channels needs 3 entries, got {len(self.decoder_channels)}")
        if not (1 <= self.extractor_blocks <= 3):
            raise DataError(f"extractor_blocks must be 1..3, got {self.extractor_blocks}")
        if self.density_scale <= 0:
            raise DataError(f"density_scale must be positive, got {self.density_scale}")

    def to_dict(self):
        return {
            "input_channels": self.input_channels,
            "base_width": self.base_width,
            "encoder_blocks": [list(b) for b in self.encoder_blocks],
            "dilation_rates": list(self.dilation_rates),
            "decoder_channels": list(self.decoder_channels),
            "style_channels": self.style_channels,
            "extractor_blocks": self.extractor_blocks,
            "attention_reduction": self.attention_reduction,
            "disentangled": self.disentangled,
            "density_scale": self.density_scale,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["encoder_blocks"] = tuple(tuple(b) for b in d["encoder_blocks"])
        d["dilation_rates"] = tuple(d["dilation_rates"])
        d["decoder_channels"] = tuple(d["decoder_channels"])
        return cls(**d)


TINY_CONFIG = ModelConfig(
    base_width=4,
    encoder_blocks=((1, 4), (1, 8), (1, 8)),
    dilation_rates=(1, 2, 1, 2, 1, 2),
    decoder_channels=(8, 8, 8),
)


@dataclass
class LossReport:
    """Eq-style loss split: total = mse + perceptual."""

    total: float
    mse: float
    perceptual: float
    batch_size: int


@dataclass
class TrainingSample:
    """One supervised item: image, target density, target style, true count."""

    image: np.ndarray  # [C, H, W] in [0, 1]
    density: np.ndarray  # [H, W]
    style: np.ndarray | None  # [C, H, W] in [0, 1]
    count: float


class _Init:
    """He fan-in initializer drawing from one seeded stream."""

    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)

    def conv(self, cout, cin, k):
        std = np.sqrt(2.0 / (cin * k * k))
        return self.rng.standard_normal((cout, cin, k, k)) * std

    def dense(self, fout, fin):
        std = np.sqrt(2.0 / fin)
        return self.rng.standard_normal((fout, fin)) * std


class CounterModel:
    """Parameter container plus the forward graph builders.

    Parameter names are unique and partitioned into the four groups
    (encoder, enhance, decoder_specific, decoder_agnostic); transfer
    surgery relies on that partition.
    """

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params

    # -- parameter bookkeeping ------------------------------------------------

    def parameters(self):
        return list(self.params.values())

    def group_names(self, group):
        prefix = group + "."
        return [n for n in self.params if n.startswith(prefix)]

    def group_parameters(self, group):
        return [self.params[n] for n in self.group_names(group)]

    def export_arrays(self):
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_arrays(self, arrays):
        for name, p in self.params.items():
            values = np.asarray(arrays[name], dtype=T.default_dtype())
            if values.shape != p.data.shape:
                raise ShapeError("load_arrays", name, p.data.shape, values.shape)
            p.data = values.copy()

    def _conv(self, name, padding=0, dilation=1):
        return ConvParams(self.params[name + ".w"], self.params[name + ".b"],
                          padding=padding, dilation=dilation)

    # -- forward pieces --------------------------------------------------------

    def encoder(self, x: Tensor, blocks=None) -> Tensor:
        n_blocks = len(self.config.encoder_blocks) if blocks is None else blocks
        h = x
        for b in range(n_blocks):
            n_convs, _ = self.config.encoder_blocks[b]
            for c in range(n_convs):
                h = T.relu(T.conv2d(h, self._conv(f"encoder.b{b}.c{c}", padding=1)))
            h = T.max_pool2d(h, 2)
        return h

    def spatial_attention(self, f: Tensor) -> Tensor:
        m = T.conv2d(f, self._conv("enhance.spatial.c0", padding=1))
        m = T.conv2d(T.relu(m), self._conv("enhance.spatial.c1", padding=1))
        return T.scale_spatial(f, T.sigmoid(m))

    def channel_attention(self, f: Tensor) -> Tensor:
        w = T.dense(T.global_avg_pool(f), self.params["enhance.channel.fc0.w"],
                    self.params["enhance.channel.fc0.b"])
        w = T.dense(T.relu(w), self.params["enhance.channel.fc1.w"],
                    self.params["enhance.channel.fc1.b"])
        return T.scale_channels(f, T.sigmoid(w))

    def dilated_stack(self, f: Tensor) -> Tensor:
        h = f
        for i, rate in enumerate(self.config.dilation_rates):
            h = T.relu(T.conv2d(h, self._conv(f"enhance.dilated.c{i}", padding=rate, dilation=rate)))
        return h

    def enhance(self, f: Tensor) -> Tensor:
        return self.dilated_stack(self.channel_attention(self.spatial_attention(f)))

    def _decode(self, group, features: Tensor, head_activation) -> Tensor:
        h = features
        for i in range(3):
            h = T.upsample_nearest(h, 2)
            h = T.relu(T.conv2d(h, self._conv(f"{group}.c{i}", padding=1)))
        head = T.conv2d(h, self._conv(f"{group}.head"))
        return T.activation(head, head_activation)

    def forward(self, x: Tensor):
        """Run the full network: returns (density map, style image or None)."""
        if x.data.ndim != 4:
            raise ShapeError("forward", "input rank", 4, x.data.ndim)
        h, w = x.data.shape[2:]
        if h % 8 or w % 8:
            raise ShapeError("forward", "spatial extent", "divisible by 8", (h, w))
        enhanced = self.enhance(self.encoder(x))
        density = self._decode(AGNOSTIC_GROUP, enhanced, "relu")
        if not self.config.disentangled:
            return density, None
        style = self._decode(SPECIFIC_GROUP, enhanced, "sigmoid")
        return density, style


def build_model(config: ModelConfig) -> CounterModel:
    """Deterministically initialized model: He fan-in weights, zero biases."""
    init = _Init(config.seed)
    params = {}

    def param(name, values):
        params[name] = Tensor(values, requires_grad=True, name=name)

    def conv_pair(name, cout, cin, k):
        param(name + ".w", init.conv(cout, cin, k))
        param(name + ".b", np.zeros(cout))

    in_ch = config.input_channels
    for b, (n_convs, out_ch) in enumerate(config.encoder_blocks):
        for c in range(n_convs):
            conv_pair(f"encoder.b{b}.c{c}", out_ch, in_ch if c == 0 else out_ch, 3)
        in_ch = out_ch
    feat_ch = in_ch

    red = config.attention_reduction
    sp_hidden = max(1, feat_ch // red)
    conv_pair("enhance.spatial.c0", sp_hidden, feat_ch, 3)
    conv_pair("enhance.spatial.c1", 1, sp_hidden, 3)
    ch_hidden = max(1, feat_ch // red)
    param("enhance.channel.fc0.w", init.dense(ch_hidden, feat_ch))
    param("enhance.channel.fc0.b", np.zeros(ch_hidden))
    param("enhance.channel.fc1.w", init.dense(feat_ch, ch_hidden))
    param("enhance.channel.fc1.b", np.zeros(feat_ch))
    for i in range(len(config.dilation_rates)):
        conv_pair(f"enhance.dilated.c{i}", feat_ch, feat_ch, 3)

    def decoder(group, out_channels):
        ch = feat_ch
        for i, dec_ch in enumerate(config.decoder_channels):
            conv_pair(f"{group}.c{i}", dec_ch, ch, 3)
            ch = dec_ch
        conv_pair(f"{group}.head", out_channels, ch, 1)

    if config.disentangled:
        decoder(SPECIFIC_GROUP, config.style_channels)
    decoder(AGNOSTIC_GROUP, 1)

    return CounterModel(config, params)


def parameter_group(name: str) -> str:
    group = name.split(".", 1)[0]
    if group not in PARAMETER_GROUPS:
        raise DataError(f"parameter {name!r} belongs to no known group")
    return group


# ---------------------------------------------------------------------------
# perceptual feature extractor
# ---------------------------------------------------------------------------

class FeatureExtractor:
    """Frozen copy of the encoder's leading blocks.

    Produces the feature maps compared by the perceptual loss. The weights
    are snapshots: they never receive gradients, and gradients flow only
    into the image being encoded.
    """

    def __init__(self, config: ModelConfig, arrays: dict):
        self.config = config
        self.arrays = {name: np.asarray(a) for name, a in arrays.items()}

    @classmethod
    def snapshot(cls, model: CounterModel):
        blocks = model.config.extractor_blocks
        names = []
        for b in range(blocks):
            n_convs, _ = model.config.encoder_blocks[b]
            for c in range(n_convs):
                names += [f"encoder.b{b}.c{c}.w", f"encoder.b{b}.c{c}.b"]
        return cls(model.config, {n: model.params[n].data.copy() for n in names})

    def features(self, image: Tensor) -> Tensor:
        h = image
        for b in range(self.config.extractor_blocks):
            n_convs, _ = self.config.encoder_blocks[b]
            for c in range(n_convs):
                conv = ConvParams(
                    Tensor(self.arrays[f"encoder.b{b}.c{c}.w"]),
                    Tensor(self.arrays[f"encoder.b{b}.c{c}.b"]),
                    padding=1,
                )
                h = T.relu(T.conv2d(h, conv))
            h = T.max_pool2d(h, 2)
        return h


def perceptual_loss(style_pred: Tensor, style_truth, extractor: FeatureExtractor) -> Tensor:
    """MSE between extractor feature maps; gradients reach the prediction only."""
    truth = style_truth if isinstance(style_truth, Tensor) else Tensor(style_truth)
    if style_pred.data.shape != truth.data.shape:
        raise ShapeError("perceptual_loss", "style shape", truth.data.shape, style_pred.data.shape)
    phi_pred = extractor.features(style_pred)
    phi_truth = extractor.features(truth.detach())
    return T.mse_loss(phi_pred, phi_truth)


def total_loss(density_pred, density_truth, style_pred, style_truth, extractor):
    """Unweighted sum of the density MSE and the style perceptual terms.

    Returns (loss tensor, LossReport). When the model runs without the
    domain-specific decoder, the perceptual term is exactly zero.
    """
    batch = density_pred.data.shape[0]
    mse = T.mse_loss(density_pred, density_truth)
    if style_pred is None:
        return mse, LossReport(mse.item(), mse.item(), 0.0, batch)
    perc = perceptual_loss(style_pred, style_truth, extractor)
    loss = mse + perc
    return loss, LossReport(loss.item(), mse.item(), perc.item(), batch)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _stack_batch(samples, dtype):
    images = np.stack([s.image for s in samples]).astype(dtype, copy=False)
    density = np.stack([s.density for s in samples])[:, None].astype(dtype, copy=False)
    styles = None
    if all(s.style is not None for s in samples):
        styles = np.stack([s.style for s in samples]).astype(dtype, copy=False)
    return images, density, styles


def train_epoch(model, samples, optimizer, batch_size, rng, extractor=None):
    """One seeded-shuffle pass over the dataset.

    With `extractor=None` the perceptual features come from a fresh detached
    snapshot of the live encoder each batch (the pretraining regime);
    passing a frozen FeatureExtractor pins them (the transfer regime).
    Returns mean loss terms plus the MAE of the on-pass count predictions.
    """
    if not samples:
        raise DataError("train_epoch needs a non-empty dataset")
    if model.config.disentangled and any(s.style is None for s in samples):
        raise DataError("disentangled training requires a style image per sample")
    dtype = T.default_dtype()
    scale = model.config.density_scale
    order = rng.permutation(len(samples))
    sums = np.zeros(3)
    predicted, truth = [], []
    for start in range(0, len(order), batch_size):
        batch = [samples[i] for i in order[start:start + batch_size]]
        images, density, styles = _stack_batch(batch, dtype)
        snap = extractor
        if snap is None and model.config.disentangled:
            snap = FeatureExtractor.snapshot(model)
        density_pred, style_pred = model.forward(Tensor(images))
        loss, report = total_loss(density_pred, density * dtype(scale),
                                  style_pred, styles, snap)
        T.zero_grad(model.parameters())
        T.backward(loss)
        T.adam_step(model.parameters(), optimizer)
        sums += np.array([report.total, report.mse, report.perceptual]) * len(batch)
        predicted.extend((density_pred.data.sum(axis=(1, 2, 3)) / scale).tolist())
        truth.extend(s.count for s in batch)
    n = len(samples)
    from .density import mae  # local import avoids a cycle at module load
    return {
        "loss_total": sums[0] / n,
        "loss_mse": sums[1] / n,
        "loss_perc": sums[2] / n,
        "train_mae": mae(predicted, truth),
    }


def predict_counts(model, images) -> list:
    """Deterministic inference: integrate the predicted density map per image
    and undo the training-time density scaling."""
    counts = []
    for image in images:
        arr = np.asarray(image, dtype=T.default_dtype())[None]
        density, _ = model.forward(Tensor(arr))
        counts.append(float(density.data.sum()) / model.config.density_scale)
    return counts
