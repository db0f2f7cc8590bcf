"""Progressive transfer learning with checkpoint surgery.

The protocol adapts a counter trained on a synthetic source domain to a
target domain with only a few annotated images, in four stages:

1. pretrain on the source domain (density + style supervision),
2. replace the domain-specific decoder with a fresh random one,
3. fine-tune on synthesized target-domain images,
4. fine-tune on the few real annotated target images.

Three ablation variants alter the protocol: ``no_disentangle`` drops the
style decoder and the perceptual term entirely, ``no_synth`` skips stage 3,
and ``joint_finetune`` merges stages 3 and 4 into a single pass over the
concatenated set.

The perceptual feature extractor is frozen when stage 3 begins and reused
unchanged for stage 4. It is never stored in checkpoints: surgery preserves
encoder tensors bitwise, so the extractor is reconstructible from the
checkpoint's own encoder, which is how :func:`finetune` builds it when none
is supplied.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, decode_checkpoint, encode_checkpoint
from .data import AnnotatedImage, DomainSpec, generate_domain, toy_source_spec
from .density import mae
from .errors import ConfigError, DataError
from .model import (SPECIFIC_GROUP, CounterModel, FeatureExtractor,
                    ModelConfig, build_model, predict_counts, train_epoch)
from .seeding import rng_for, seed_for
from .synthesis import (SynthesisConfig, extract_patches, inpaint,
                        synthesize_dataset)

ABLATIONS = ("none", "no_disentangle", "no_synth", "joint_finetune")

# Bookkeeping ranks: a fine-tune may only advance the tag. joint_ft stands in
# for synth_ft+real_ft, and direct marks the no-transfer baseline.
STAGE_RANKS = {
    "init": 0, "source": 1, "direct": 1, "surgered": 2,
    "synth_ft": 3, "joint_ft": 3, "real_ft": 4,
}


@dataclass
class TransferPlan:
    """Everything needed to run the four-stage protocol end to end."""

    source_spec: DomainSpec = field(default_factory=toy_source_spec)
    source_images: int = 40
    model: ModelConfig = field(default_factory=ModelConfig)
    target_few: list = field(default_factory=list)
    synth_cfg: SynthesisConfig = field(default_factory=SynthesisConfig)
    stage_epochs: tuple = (60, 15, 30)  # (pretrain, synth_finetune, real_finetune)
    stage_lrs: tuple = (1e-3, 1e-4, 1e-5)
    batch_size: int = 4
    eval_set: list | None = None  # per-stage MAE target; default: target_few
    seed: int = 0
    ablation: str = "none"

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")
        if len(self.stage_epochs) != 3 or any(e < 0 for e in self.stage_epochs):
            raise ConfigError(f"stage_epochs must be 3 counts >= 0, got {self.stage_epochs}")
        if len(self.stage_lrs) != 3 or any(lr < 0 for lr in self.stage_lrs):
            raise ConfigError(f"stage_lrs must be 3 rates >= 0, got {self.stage_lrs}")
        if self.source_images < 1:
            raise ConfigError("source_images must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    @property
    def disentangled(self) -> bool:
        return self.ablation != "no_disentangle"


# ---------------------------------------------------------------------------
# checkpoint <-> model
# ---------------------------------------------------------------------------

def checkpoint_from_model(model: CounterModel, stage: str, seed: int,
                          history=None) -> Checkpoint:
    return Checkpoint(tensors=model.export_arrays(),
                      config=model.config.to_dict(), stage=stage,
                      seed=seed, history=list(history or []))


def model_from_checkpoint(ckpt: Checkpoint) -> CounterModel:
    config = ModelConfig.from_dict(ckpt.config)
    model = build_model(config)
    expected = set(model.params)
    got = set(ckpt.tensors)
    if expected != got:
        missing = sorted(expected - got)[:3]
        extra = sorted(got - expected)[:3]
        raise DataError(
            f"checkpoint tensors do not match config {config.to_dict()!r}: "
            f"missing {missing}, unexpected {extra}")
    model.load_arrays(ckpt.tensors)
    return model


def extractor_from_checkpoint(ckpt: Checkpoint) -> FeatureExtractor:
    """The frozen perceptual extractor implied by a checkpoint's encoder."""
    return FeatureExtractor.snapshot(model_from_checkpoint(ckpt))


# ---------------------------------------------------------------------------
# dataset adapters
# ---------------------------------------------------------------------------

def _chw(pixels: np.ndarray) -> np.ndarray:
    return np.transpose(pixels, (2, 0, 1))


def training_samples(items, with_style: bool, style_override=None) -> list:
    """Normalize annotated or synthesized items into TrainingSample triples.

    ``style_override`` supplies per-item style images for real target images,
    whose ground-truth style is the stage-2 inpainted background.
    """
    from .model import TrainingSample

    if style_override is not None and len(style_override) != len(items):
        raise DataError(
            f"{len(style_override)} style overrides for {len(items)} items")
    out = []
    for index, item in enumerate(items):
        if hasattr(item, "pixels"):  # AnnotatedImage
            pixels, annotations = item.pixels, item.annotations
            density = item.density
            if density is None:
                density = item.with_density().density
            style = item.style
        else:  # SynthesizedSample
            pixels, annotations = item.image, item.annotations
            density = item.density
            style = item.style
        if style_override is not None:
            style = style_override[index]
        style_chw = None
        if with_style:
            if style is None:
                raise DataError(
                    f"item {index} lacks the style image required for "
                    "disentangled training")
            style_chw = _chw(style.pixels)
        out.append(TrainingSample(image=_chw(pixels), density=density.values,
                                  style=style_chw, count=float(len(annotations))))
    return out


def _train(model, samples, epochs, lr, batch_size, rng, extractor, stage,
           history):
    optimizer = T.AdamState(learning_rate=lr)
    for epoch in range(epochs):
        stats = train_epoch(model, samples, optimizer, batch_size, rng,
                            extractor=extractor)
        history.append({"stage": stage, "epoch": epoch, **stats})
    return history


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def pretrain_source(plan: TransferPlan, source_data=None) -> Checkpoint:
    """Stage 1: train on the source domain (generated from the plan's spec,
    or supplied pre-loaded via ``source_data``).

    The perceptual features come from a detached snapshot of the live encoder
    each batch; the extractor is only frozen once pretraining ends.
    """
    if source_data is None:
        source = generate_domain(plan.source_spec, plan.source_images,
                                 seed=seed_for(plan.seed, "transfer", "source_data"))
    else:
        source = list(source_data)
    if not source:
        raise DataError("pretraining needs a non-empty source dataset")
    config = replace(plan.model, disentangled=plan.disentangled,
                     input_channels=plan.source_spec.channels,
                     seed=seed_for(plan.seed, "transfer", "model_init"))
    model = build_model(config)
    samples = training_samples(source, with_style=plan.disentangled)
    rng = rng_for(plan.seed, "transfer", "source", "shuffle")
    history = _train(model, samples, plan.stage_epochs[0], plan.stage_lrs[0],
                     plan.batch_size, rng, None, "source", [])
    return checkpoint_from_model(model, "source", plan.seed, history)


def replace_domain_specific_decoder(ckpt: Checkpoint, seed: int) -> Checkpoint:
    """Stage 2: fresh random domain-specific decoder, everything else bitwise."""
    config = ModelConfig.from_dict(ckpt.config)
    if not config.disentangled:
        raise DataError("checkpoint has no domain-specific decoder to replace")
    model_from_checkpoint(ckpt)  # validates the tensor partition
    donor = build_model(replace(config, seed=int(seed)))
    fresh = {name: donor.params[name].data.astype(np.float32)
             for name in donor.group_names(SPECIFIC_GROUP)}
    if not fresh:
        raise DataError("checkpoint has a malformed parameter partition")
    tensors = {name: (fresh[name] if name in fresh else values)
               for name, values in ckpt.tensors.items()}
    history = ckpt.history + [{"stage": "surgered", "event": "decoder_surgery",
                               "surgery_seed": int(seed)}]
    return Checkpoint(tensors=tensors, config=ckpt.config, stage="surgered",
                      seed=ckpt.seed, history=history)


def finetune(ckpt: Checkpoint, dataset, epochs: int, lr: float,
             batch_size: int = 4, extractor: FeatureExtractor | None = None,
             stage: str = "synth_ft", style_override=None) -> Checkpoint:
    """Stages 3-4: continue training from a checkpoint on new data.

    With ``extractor=None`` the frozen extractor is rebuilt from the incoming
    checkpoint's encoder (exact for a surgered checkpoint, since surgery
    preserves the encoder bitwise).
    """
    if not dataset:
        raise DataError("finetune needs a non-empty dataset")
    if stage not in STAGE_RANKS:
        raise DataError(f"unknown stage tag {stage!r}")
    before = STAGE_RANKS.get(ckpt.stage, 0)
    if STAGE_RANKS[stage] <= before:
        raise DataError(
            f"stage must advance strictly: {ckpt.stage!r} -> {stage!r}")
    model = model_from_checkpoint(ckpt)
    if extractor is None and model.config.disentangled:
        extractor = FeatureExtractor.snapshot(model)
    samples = training_samples(dataset, with_style=model.config.disentangled,
                               style_override=style_override)
    rng = rng_for(ckpt.seed, "transfer", stage, "shuffle")
    history = _train(model, samples, epochs, lr, batch_size, rng, extractor,
                     stage, list(ckpt.history))
    return checkpoint_from_model(model, stage, ckpt.seed, history)


def evaluate(ckpt: Checkpoint, test_set, workers: int = 1) -> dict:
    """Count-level MAE of a checkpoint on annotated images (read-only).

    ``workers`` > 1 fans single-image inference out over threads; forward
    passes only read the parameters, so results are order-stable and
    identical to the sequential path.
    """
    if not test_set:
        raise DataError("evaluate needs a non-empty test set")
    model = model_from_checkpoint(ckpt)
    images = [_chw(item.pixels) for item in test_set]
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            predicted = [c[0] for c in pool.map(
                lambda img: predict_counts(model, [img]), images)]
    else:
        predicted = predict_counts(model, images)
    truth = [float(len(item.annotations)) for item in test_set]
    return {
        "mae": mae(truth, predicted),
        "per_image": [(t, p) for t, p in zip(truth, predicted)],
    }


# ---------------------------------------------------------------------------
# full protocol
# ---------------------------------------------------------------------------

def _inpainted_styles(target_few):
    styles = []
    for image in target_few:
        _, hole_mask = extract_patches(image)
        styles.append(inpaint(image, hole_mask))
    return styles


def run_progressive_transfer(plan: TransferPlan):
    """Execute the staged protocol; returns (final checkpoint, report rows).

    Each report row carries the stage tag and the MAE on the evaluation set
    (``plan.eval_set``, defaulting to the few annotated images themselves).
    """
    if not plan.target_few:
        raise DataError("transfer needs at least one annotated target image")
    eval_set = plan.eval_set or plan.target_few
    report = []

    def measure(ckpt, stage, epochs, lr):
        row = {"stage": stage, "epochs": epochs, "lr": lr,
               "mae": evaluate(ckpt, eval_set)["mae"]}
        report.append(row)

    ckpt = pretrain_source(plan)
    measure(ckpt, "source", plan.stage_epochs[0], plan.stage_lrs[0])

    if plan.disentangled:
        ckpt = replace_domain_specific_decoder(
            ckpt, seed_for(plan.seed, "transfer", "surgery"))
        measure(ckpt, "surgered", 0, 0.0)
        extractor = extractor_from_checkpoint(ckpt)
    else:
        extractor = None

    if plan.ablation == "no_synth":
        styles = _inpainted_styles(plan.target_few) if plan.disentangled else None
    else:
        synth_cfg = replace(plan.synth_cfg,
                            seed=seed_for(plan.seed, "transfer", "synthesis"))
        synth_samples, styles, _ = synthesize_dataset(plan.target_few, synth_cfg)

    if plan.ablation == "joint_finetune":
        real = list(plan.target_few)
        joint = synth_samples + real
        # joint_finetune keeps the disentangled loss, so every item needs its
        # style: the synthesized ones carry theirs, the real ones get the
        # stage-2 inpainted backgrounds.
        override = [s.style for s in synth_samples] + styles[:len(real)]
        ckpt = finetune(ckpt, joint, plan.stage_epochs[1] + plan.stage_epochs[2],
                        plan.stage_lrs[1], plan.batch_size, extractor,
                        stage="joint_ft", style_override=override)
        measure(ckpt, "joint_ft", plan.stage_epochs[1] + plan.stage_epochs[2],
                plan.stage_lrs[1])
        return ckpt, report

    if plan.ablation != "no_synth" and plan.stage_epochs[1] > 0 and synth_samples:
        ckpt = finetune(ckpt, synth_samples, plan.stage_epochs[1],
                        plan.stage_lrs[1], plan.batch_size, extractor,
                        stage="synth_ft")
        measure(ckpt, "synth_ft", plan.stage_epochs[1], plan.stage_lrs[1])

    ckpt = finetune(ckpt, plan.target_few, plan.stage_epochs[2],
                    plan.stage_lrs[2], plan.batch_size, extractor,
                    stage="real_ft",
                    style_override=styles if plan.disentangled else None)
    measure(ckpt, "real_ft", plan.stage_epochs[2], plan.stage_lrs[2])
    return ckpt, report


def train_direct(target_few, model_cfg: ModelConfig | None = None,
                 epochs: int = 60, lr: float = 1e-3, batch_size: int = 4,
                 seed: int = 0) -> Checkpoint:
    """Baseline arm: train from scratch on only the few annotated images."""
    if not target_few:
        raise DataError("direct training needs a non-empty dataset")
    config = replace(model_cfg or ModelConfig(), disentangled=False,
                     input_channels=target_few[0].pixels.shape[2],
                     seed=seed_for(seed, "direct", "model_init"))
    model = build_model(config)
    samples = training_samples(target_few, with_style=False)
    rng = rng_for(seed, "direct", "shuffle")
    history = _train(model, samples, epochs, lr, batch_size, rng, None,
                     "direct", [])
    return checkpoint_from_model(model, "direct", seed, history)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """Canonical serialized form, for determinism comparisons."""
    return encode_checkpoint(ckpt)


def checkpoints_identical(a: Checkpoint, b: Checkpoint) -> bool:
    return encode_checkpoint(a) == encode_checkpoint(b)
