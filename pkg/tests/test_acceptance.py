"""Acceptance gate: nine verifiable criteria, one printed verdict per test.

Each test prints a single line

    [criterion N] <name>: PASS|FAIL - <measured values and tolerance>

and then asserts, so `pytest tests/test_acceptance.py -v -s` shows the
verdicts inline. Tolerances are pinned in the verdicts themselves.
"""

import time
from dataclasses import replace

import numpy as np

import dtlcount.tensor as T
from dtlcount.checkpoint import load_checkpoint
from dtlcount.config import ExperimentConfig
from dtlcount.data import generate_domain, toy_target_spec
from dtlcount.density import (DotAnnotations, estimate_count,
                              render_density_map)
from dtlcount.harness import cmd_bench, cmd_gradcheck, cmd_transfer, read_tsv
from dtlcount.model import (AGNOSTIC_GROUP, SPECIFIC_GROUP, TINY_CONFIG,
                            FeatureExtractor, build_model, parameter_group,
                            perceptual_loss)
from dtlcount.synthesis import (PATCH_SIZE, CellPatch, GanConfig,
                                SynthesisConfig, inpaint, sample_patches,
                                synthesize_dataset, train_patch_gan)
from dtlcount.tensor import Tensor, zero_grad
from dtlcount.transfer import (TransferPlan, pretrain_source,
                               replace_domain_specific_decoder)

# Reduced-scale experiment reused by the structural criteria (7 and 8);
# the directional benchmark (criterion 6) runs the built-in defaults.
SMALL_INI = """\
[source]
n_images = 8
n_test = 3

[target]
n_few = 3
n_test = 3

[synthesis]
num_images = 6
count_range = 3,8
generated_patches = 8
gan_steps = 20

[training]
base_width = 4

[transfer]
stage_epochs = 3,2,2
direct_epochs = 4
n_seeds = 1
"""


def _verdict(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"[criterion {number}] {name}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. gradient correctness
# ---------------------------------------------------------------------------

def test_criterion_1_gradient_correctness():
    started = time.time()
    exit_code = cmd_gradcheck()
    elapsed = time.time() - started
    _verdict(1, "gradient correctness",
             exit_code == 0 and elapsed < 120.0,
             f"cmd_gradcheck exit {exit_code} (every op and the full loss "
             f"< 1e-4 max relative error, 64-bit), {elapsed:.1f}s of 120s")


# ---------------------------------------------------------------------------
# 2. density oracle
# ---------------------------------------------------------------------------

def test_criterion_2_density_integral_equals_count():
    rng = np.random.default_rng(20260814)
    worst = 0.0
    for _ in range(100):
        count = int(rng.integers(0, 201))
        width = int(rng.integers(48, 160))
        height = int(rng.integers(48, 160))
        points = np.column_stack([rng.uniform(0, width - 1e-9, count),
                                  rng.uniform(0, height - 1e-9, count)])
        annotations = DotAnnotations(points, width, height)
        sigma = float(rng.uniform(1.0, 6.0))
        density = render_density_map(annotations, sigma)
        worst = max(worst, abs(estimate_count(density) - count))
    _verdict(2, "density oracle", worst < 1e-6,
             f"100 annotation sets of 0-200 points: max "
             f"|integral - count| = {worst:.2e}, tolerance 1e-6")


# ---------------------------------------------------------------------------
# 3. disentangled gradient paths
# ---------------------------------------------------------------------------

def _max_group_grad(model, group):
    """Largest |gradient| over a parameter group; None grads count as 0."""
    worst = 0.0
    touched = False
    for name, param in model.params.items():
        if parameter_group(name) != group:
            continue
        if param.grad is not None:
            worst = max(worst, float(np.abs(param.grad).max()))
            touched = touched or np.any(param.grad != 0)
    return worst, touched


def test_criterion_3_disentangled_gradient_paths():
    worst_specific = worst_agnostic = 0.0
    for trial in range(3):
        model = build_model(replace(TINY_CONFIG, seed=500 + trial))
        extractor = FeatureExtractor.snapshot(model)
        rng = np.random.default_rng(900 + trial)
        images = Tensor(rng.uniform(0, 1, (2, TINY_CONFIG.input_channels,
                                           16, 16)))
        density_pred, style_pred = model.forward(images)

        mse = T.mse_loss(density_pred, rng.uniform(0, 1,
                                                   density_pred.data.shape))
        T.backward(mse)
        value, _ = _max_group_grad(model, SPECIFIC_GROUP)
        worst_specific = max(worst_specific, value)
        _, agnostic_live = _max_group_grad(model, AGNOSTIC_GROUP)
        assert agnostic_live  # the MSE term must actually reach its decoder

        zero_grad(model.params.values())
        perc = perceptual_loss(style_pred,
                               rng.uniform(0, 1, style_pred.data.shape),
                               extractor)
        T.backward(perc)
        value, _ = _max_group_grad(model, AGNOSTIC_GROUP)
        worst_agnostic = max(worst_agnostic, value)
        _, specific_live = _max_group_grad(model, SPECIFIC_GROUP)
        assert specific_live  # and the perceptual term must reach its own

    ok = worst_specific == 0.0 and worst_agnostic == 0.0
    _verdict(3, "disentangled gradient paths", ok,
             f"3 random batches: max |dL_MSE/d specific| = {worst_specific}, "
             f"max |dL_PERC/d agnostic| = {worst_agnostic}, both exactly 0")


# ---------------------------------------------------------------------------
# 4. synthesis consistency
# ---------------------------------------------------------------------------

def test_criterion_4_synthesis_consistency():
    few = generate_domain(toy_target_spec(), 3, seed=41)
    cfg = SynthesisConfig(num_images=200, count_range=(3, 8),
                          min_center_distance=6.0, gan=GanConfig(steps=30),
                          generated_patches=8, seed=4)
    samples, _, _ = synthesize_dataset(few, cfg)
    assert len(samples) == 200

    worst_integral = max(abs(estimate_count(s.density) - len(s.annotations))
                         for s in samples)

    # Independent support oracle: the paste alpha lives strictly inside a
    # radius-16 disc around each center, so everything outside the union of
    # those discs must match the style image bitwise.
    center = (PATCH_SIZE - 1) / 2.0
    yy, xx = np.mgrid[0:PATCH_SIZE, 0:PATCH_SIZE]
    disc = np.sqrt((yy - center) ** 2 + (xx - center) ** 2) < 16.0
    half = PATCH_SIZE // 2
    mismatched = 0
    for sample in samples:
        height, width = sample.style.pixels.shape[:2]
        support = np.zeros((height, width), dtype=bool)
        for x, y in sample.annotations.points:
            cx, cy = int(x), int(y)
            support[cy - half:cy + half, cx - half:cx + half] |= disc
        if not np.array_equal(sample.image[~support],
                              sample.style.pixels[~support]):
            mismatched += 1

    rng = np.random.default_rng(77)
    inpaint_violations = 0
    for _ in range(20):
        image = rng.uniform(0, 1, (40, 40, 1))
        mask = rng.uniform(size=(40, 40)) < 0.3
        mask[0, 0] = False  # keep at least one boundary pixel
        filled = inpaint(image, mask)
        if not np.array_equal(filled.pixels[~mask], image[~mask]):
            inpaint_violations += 1

    ok = worst_integral < 1e-6 and mismatched == 0 and inpaint_violations == 0
    _verdict(4, "synthesis consistency", ok,
             f"200 samples: max |integral - count| = {worst_integral:.2e} "
             f"(tolerance 1e-6), {mismatched} images differ from the style "
             f"outside pasted supports, {inpaint_violations}/20 inpaintings "
             f"touched unmasked pixels")


# ---------------------------------------------------------------------------
# 5. transfer surgery
# ---------------------------------------------------------------------------

def test_criterion_5_transfer_surgery():
    plan = TransferPlan(
        source_images=8, model=TINY_CONFIG,
        target_few=generate_domain(toy_target_spec(), 2, seed=51),
        synth_cfg=SynthesisConfig(num_images=4, count_range=(3, 8),
                                  min_center_distance=6.0,
                                  gan=GanConfig(steps=15),
                                  generated_patches=6),
        stage_epochs=(3, 2, 2), seed=9)
    source = pretrain_source(plan)
    surgered = replace_domain_specific_decoder(source, seed=99)

    preserved = [name for name in source.tensors
                 if parameter_group(name) != SPECIFIC_GROUP
                 and np.array_equal(surgered.tensors[name],
                                    source.tensors[name])]
    non_specific = [name for name in source.tensors
                    if parameter_group(name) != SPECIFIC_GROUP]
    specific = [name for name in source.tensors
                if parameter_group(name) == SPECIFIC_GROUP]
    changed = [name for name in specific
               if not np.array_equal(surgered.tensors[name],
                                     source.tensors[name])]
    ok = (len(preserved) == len(non_specific) and len(specific) > 0
          and len(changed) == len(specific))
    _verdict(5, "transfer surgery", ok,
             f"{len(preserved)}/{len(non_specific)} non-specific tensors "
             f"bitwise identical, {len(changed)}/{len(specific)} "
             f"domain-specific tensors re-initialized")


# ---------------------------------------------------------------------------
# 6. progressive transfer beats direct training (built-in benchmark)
# ---------------------------------------------------------------------------

def test_criterion_6_transfer_beats_direct(tmp_path):
    config = ExperimentConfig.defaults()
    assert config.target["n_few"] == 5 and config.transfer["n_seeds"] == 3
    started = time.time()
    exit_code = cmd_bench(config, tmp_path / "bench")
    elapsed = time.time() - started

    by_method = {}
    for row in read_tsv(tmp_path / "bench" / "bench_report.tsv"):
        by_method.setdefault(row["method"], []).append(float(row["mae"]))
    transfer_mean = float(np.mean(by_method["transfer:none"]))
    direct_mean = float(np.mean(by_method["direct"]))
    ok = (exit_code == 0 and len(by_method["transfer:none"]) == 3
          and transfer_mean < direct_mean and elapsed < 45 * 60)
    _verdict(6, "progressive transfer beats direct training", ok,
             f"N=5, 3 seeds: mean test MAE transfer {transfer_mean:.3f} "
             f"< direct {direct_mean:.3f}; {elapsed / 60:.1f} min of 45")


# ---------------------------------------------------------------------------
# 7. ablation structure
# ---------------------------------------------------------------------------

def test_criterion_7_ablation_structure(tmp_path):
    config = ExperimentConfig.from_text(SMALL_INI)
    variants = ("no_disentangle", "no_synth", "joint_finetune")
    reports = {}
    for variant in variants:
        out = tmp_path / variant
        assert cmd_transfer(config.override(ablation=variant), out) == 0
        reports[variant] = read_tsv(out / "report.tsv")

    comparable = all(
        rows and set(rows[0]) == set(reports[variants[0]][0])
        and all(float(row["mae"]) >= 0.0 for row in rows)
        for rows in reports.values())

    history = load_checkpoint(tmp_path / "no_disentangle" / "final.ckpt").history
    perc_values = [row["loss_perc"] for row in history if "loss_perc" in row]
    perc_zero = bool(perc_values) and all(v == 0.0 for v in perc_values)

    ok = comparable and perc_zero
    _verdict(7, "ablation structure", ok,
             f"{len(reports)} variants completed from one config with "
             f"comparable MAE rows; no_disentangle perceptual loss exactly 0 "
             f"in all {len(perc_values)} epochs")


# ---------------------------------------------------------------------------
# 8. bench determinism
# ---------------------------------------------------------------------------

def test_criterion_8_bench_determinism(tmp_path):
    config = ExperimentConfig.from_text(SMALL_INI)
    for name in ("first", "second"):
        assert cmd_bench(config, tmp_path / name) == 0
    first_files = sorted(p.relative_to(tmp_path / "first")
                         for p in (tmp_path / "first").rglob("*")
                         if p.is_file())
    second_files = sorted(p.relative_to(tmp_path / "second")
                          for p in (tmp_path / "second").rglob("*")
                          if p.is_file())
    differing = [str(rel) for rel in first_files
                 if ((tmp_path / "first" / rel).read_bytes()
                     != (tmp_path / "second" / rel).read_bytes())]
    ok = first_files == second_files and not differing and len(first_files) > 0
    _verdict(8, "bench determinism", ok,
             f"two identical-seed runs: {len(first_files)} files each, "
             f"all byte-identical (checkpoints, reports, configs, figures)"
             if not differing else
             f"two identical-seed runs differ in: {', '.join(differing[:5])}")


# ---------------------------------------------------------------------------
# 9. GAN degenerate-distribution sanity
# ---------------------------------------------------------------------------

def test_criterion_9_gan_constant_convergence():
    constant = 0.62
    patches = [CellPatch(np.full((PATCH_SIZE, PATCH_SIZE, 1), constant))
               for _ in range(8)]
    generator = train_patch_gan(patches, GanConfig(steps=2000, seed=5))
    sampled = sample_patches(generator, 64, seed=11)
    sample_mean = float(np.mean([p.pixels for p in sampled]))
    ok = abs(sample_mean - constant) < 0.1
    _verdict(9, "GAN degenerate-distribution sanity", ok,
             f"after 2000 steps on constant {constant} patches, sample mean "
             f"= {sample_mean:.4f} (|difference| = "
             f"{abs(sample_mean - constant):.4f} < 0.1)")
