"""Command implementations behind the ``dtl-count`` CLI.

Each ``cmd_*`` function performs one pipeline step, prints a human-readable
summary to stdout, writes machine-readable TSV/PNG/checkpoint artifacts into
its output directory, and returns a process exit code (0 success,
1 verification failure, 2 usage/config error). Input problems raise
:class:`~dtlcount.errors.DtlError` subclasses, which the CLI maps to exit
code 2. Every run directory receives the fully-resolved config so the run
can be reproduced from its artifacts.
"""

from __future__ import annotations

import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ExperimentConfig
from .data import (generate_domain, load_annotated_dataset, load_checkpoint,
                   save_annotated_dataset, save_checkpoint)
from .density import estimate_count
from .errors import DataError
from .figures import (count_scatter_figure, loss_curves_figure,
                      method_comparison_figure, stage_mae_figure)
from .model import (TINY_CONFIG, ConvParams, FeatureExtractor, Tensor,
                    build_model, total_loss)
from .seeding import seed_for
from .synthesis import SynthesizedSample, synthesize_dataset
from .transfer import (TransferPlan, evaluate, pretrain_source,
                       run_progressive_transfer, train_direct)

GRADCHECK_TOLERANCE = 1e-4

REPORT_COLUMNS = ("dataset", "method", "n_few", "seed", "stage", "epochs",
                  "lr", "mae")


# ---------------------------------------------------------------------------
# small shared helpers
# ---------------------------------------------------------------------------

def _format_cell(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def write_tsv(path, columns, rows) -> None:
    lines = ["\t".join(columns)]
    for row in rows:
        lines.append("\t".join(_format_cell(row[c]) for c in columns))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_tsv(path) -> list:
    text = Path(path).read_text(encoding="utf-8")
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise DataError(f"{path}: empty report")
    header = lines[0].split("\t")
    return [dict(zip(header, line.split("\t"))) for line in lines[1:]]


def _dataset_stats(images) -> str:
    counts = [im.count for im in images]
    if not counts:
        return "0 images"
    return (f"{len(counts)} images, counts mean {np.mean(counts):.2f} "
            f"std {np.std(counts):.2f} range [{min(counts)}, {max(counts)}]")


def _write_manifest(images, path) -> None:
    rows = [{"name": im.name or f"img_{i:04d}", "count": im.count}
            for i, im in enumerate(images)]
    write_tsv(path, ("name", "count"), rows)


def _plan_from_config(config: ExperimentConfig, target_few, eval_set=None,
                      workers: int = 1) -> TransferPlan:
    transfer = config.transfer
    return TransferPlan(
        source_spec=config.to_domain_spec("source"),
        source_images=config.source["n_images"],
        model=config.to_model_config(),
        target_few=target_few,
        synth_cfg=replace(config.to_synthesis_config(), workers=workers),
        stage_epochs=tuple(transfer["stage_epochs"]),
        stage_lrs=tuple(transfer["stage_lrs"]),
        batch_size=config.training["batch_size"],
        eval_set=eval_set,
        seed=transfer["seed"],
        ablation=transfer["ablation"])


def _generate_bench_data(config: ExperimentConfig, seed: int):
    """The three datasets of one benchmark run, all derived from one seed."""
    source_spec = replace(config.to_domain_spec("source"), seed=seed)
    target_spec = replace(config.to_domain_spec("target"), seed=seed)
    few = generate_domain(target_spec, config.target["n_few"],
                          seed=seed_for(seed, "bench", "few"))
    test = generate_domain(target_spec, config.target["n_test"],
                           seed=seed_for(seed, "bench", "test"))
    return source_spec, few, test


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def cmd_generate(config: ExperimentConfig, out_dir) -> int:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = config.transfer["seed"]
    jobs = (
        ("source", config.to_domain_spec("source"), config.source["n_images"]),
        ("source_test", config.to_domain_spec("source"), config.source["n_test"]),
        ("target_few", config.to_domain_spec("target"), config.target["n_few"]),
        ("target_test", config.to_domain_spec("target"), config.target["n_test"]),
    )
    for label, spec, count in jobs:
        images = generate_domain(spec, count,
                                 seed=seed_for(seed, "generate", label))
        save_annotated_dataset(images, out / label)
        _write_manifest(images, out / label / "manifest.tsv")
        print(f"{label}: {_dataset_stats(images)} -> {out / label}")
    config.write_resolved(out / "config.ini")
    return 0


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------

def cmd_pretrain(config: ExperimentConfig, out_dir, data_dir=None) -> int:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source_data = None
    if data_dir is not None:
        source_data = load_annotated_dataset(data_dir)
        if not source_data:
            raise DataError(f"dataset directory {data_dir} holds no images")
        print(f"loaded source data: {_dataset_stats(source_data)}")
    plan = _plan_from_config(config, target_few=[])  # target side unused here
    started = time.time()
    ckpt = pretrain_source(plan, source_data=source_data)
    save_checkpoint(ckpt, out / "source.ckpt")
    config.write_resolved(out / "config.ini")
    last = ckpt.history[-1] if ckpt.history else {}
    print(f"pretrained {plan.stage_epochs[0]} epochs in "
          f"{time.time() - started:.1f}s; final train MAE "
          f"{last.get('train_mae', float('nan')):.3f} -> {out / 'source.ckpt'}")
    return 0


# ---------------------------------------------------------------------------
# synthesize
# ---------------------------------------------------------------------------

def cmd_synthesize(config: ExperimentConfig, few_dir, out_dir,
                   workers: int = 1) -> int:
    few = load_annotated_dataset(few_dir)
    if not few:
        raise DataError(f"few-shot directory {few_dir} holds no annotated images")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    synth_cfg = replace(config.to_synthesis_config(), workers=workers)
    samples, styles, gan = synthesize_dataset(few, synth_cfg)
    annotated = [_synthesized_to_annotated(s, f"synth_{i:04d}")
                 for i, s in enumerate(samples)]
    save_annotated_dataset(annotated, out)
    _write_manifest(annotated, out / "manifest.tsv")
    config.write_resolved(out / "config.ini")

    # post-write verification: reload and compare density integrals to counts
    reloaded = load_annotated_dataset(out)
    worst = 0.0
    for image in reloaded:
        worst = max(worst, abs(estimate_count(image.density) - image.count))
    print(f"synthesized {len(samples)} images from {len(few)} annotated inputs "
          f"({len(styles)} styles, GAN {len(gan.training_log)} steps)")
    print(f"verification: max |density integral - count| = {worst:.2e}")
    if worst > 1e-6:
        print("verification FAILED (tolerance 1e-6)")
        return 1
    return 0


def _synthesized_to_annotated(sample: SynthesizedSample, name: str):
    from .data import AnnotatedImage

    return AnnotatedImage(pixels=sample.image, annotations=sample.annotations,
                          style=sample.style, density=sample.density, name=name)


# ---------------------------------------------------------------------------
# transfer
# ---------------------------------------------------------------------------

def _report_rows(config, stage_rows, method, seed):
    dataset = config.target["name"]
    n_few = config.target["n_few"]
    return [{"dataset": dataset, "method": method, "n_few": n_few,
             "seed": seed, **row} for row in stage_rows]


def cmd_transfer(config: ExperimentConfig, out_dir, workers: int = 1) -> int:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = config.transfer["seed"]
    source_spec, few, test = _generate_bench_data(config, seed)
    plan = replace(_plan_from_config(config, few, eval_set=test, workers=workers),
                   source_spec=source_spec)
    started = time.time()
    ckpt, stage_report = run_progressive_transfer(plan)
    method = f"transfer:{plan.ablation}"
    rows = _report_rows(config, stage_report, method, seed)
    save_checkpoint(ckpt, out / "final.ckpt")
    write_tsv(out / "report.tsv", REPORT_COLUMNS, rows)
    config.write_resolved(out / "config.ini")
    if config.output["figures"]:
        stage_mae_figure(stage_report, out / "stage_mae.png")
        loss_curves_figure(ckpt.history, out / "loss_curves.png")
        count_scatter_figure(evaluate(ckpt, test, workers=workers)["per_image"],
                             out / "scatter.png")
    for row in stage_report:
        print(f"  stage {row['stage']:10s} mae {row['mae']:8.3f}")
    print(f"transfer ({plan.ablation}) done in {time.time() - started:.1f}s "
          f"-> {out / 'final.ckpt'}")
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def cmd_evaluate(ckpt_path, data_dir, out_dir=None, workers: int = 1) -> int:
    ckpt = load_checkpoint(ckpt_path)
    test_set = load_annotated_dataset(data_dir)
    if not test_set:
        raise DataError(f"dataset directory {data_dir} holds no annotated images")
    result = evaluate(ckpt, test_set, workers=workers)
    print(f"checkpoint: {ckpt_path} (stage {ckpt.stage})")
    print(f"dataset:    {data_dir} ({len(test_set)} images)")
    print(f"MAE: {result['mae']:.6g}")
    print("image\ttruth\tpredicted")
    rows = []
    for image, (truth, predicted) in zip(test_set, result["per_image"]):
        name = image.name or "?"
        print(f"{name}\t{truth:.6g}\t{predicted:.6g}")
        rows.append({"image": name, "truth": truth, "predicted": predicted})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_tsv(out / "evaluation.tsv", ("image", "truth", "predicted"), rows)
        count_scatter_figure(result["per_image"], out / "scatter.png")
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def _op_check_suite(rng):
    """One gradient check per registered differentiable op.

    Inputs are drawn away from the non-differentiable points of kinked ops
    (relu/leaky_relu at 0, max_pool ties) so central differences are valid.
    """
    def leaf(shape, lo=-1.0, hi=1.0):
        return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)

    def away_from_zero(shape, scale=1.0):
        signs = np.where(rng.uniform(size=shape) < 0.5, -1.0, 1.0)
        return Tensor(signs * rng.uniform(0.4, 1.4, shape) * scale,
                      requires_grad=True)

    suite = {}

    a, b = leaf((3, 4)), leaf((3, 4))
    suite["add"] = (lambda: T.sum_all(T.mul(T.add(a, b), T.add(a, b))), [a, b])
    c, d = leaf((3, 4)), leaf((3, 4))
    suite["sub"] = (lambda: T.sum_all(T.mul(T.sub(c, d), T.sub(c, d))), [c, d])
    e, f = leaf((3, 4)), leaf((3, 4))
    suite["mul"] = (lambda: T.sum_all(T.mul(e, f)), [e, f])
    g = leaf((4, 5))
    suite["sum_all"] = (lambda: T.mul(T.sum_all(g), T.sum_all(g)), [g])
    h = leaf((4, 5))
    suite["mean_all"] = (lambda: T.mul(T.mean_all(h), T.mean_all(h)), [h])
    i = leaf((3, 4), lo=0.5, hi=2.0)
    suite["log"] = (lambda: T.sum_all(T.log(i)), [i])
    j = leaf((3, 4), lo=-2.0, hi=2.0)
    suite["softplus"] = (lambda: T.sum_all(T.softplus(j)), [j])
    k = away_from_zero((3, 4))
    suite["relu"] = (lambda: T.sum_all(T.mul(T.relu(k), T.relu(k))), [k])
    l = away_from_zero((3, 4))
    suite["leaky_relu"] = (
        lambda: T.sum_all(T.mul(T.leaky_relu(l), T.leaky_relu(l))), [l])
    m = leaf((3, 4), lo=-2.0, hi=2.0)
    suite["sigmoid"] = (lambda: T.sum_all(T.mul(T.sigmoid(m), T.sigmoid(m))), [m])
    n = leaf((3, 4), lo=-2.0, hi=2.0)
    suite["tanh"] = (lambda: T.sum_all(T.mul(T.tanh(n), T.tanh(n))), [n])

    cx = leaf((2, 3, 9, 9))
    cw = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.5, requires_grad=True)
    cb = leaf((4,))
    conv = ConvParams(cw, cb, stride=2, padding=1, dilation=2)
    suite["conv2d"] = (
        lambda: T.sum_all(T.mul(T.conv2d(cx, conv), T.conv2d(cx, conv))),
        [cx, cw, cb])
    px = leaf((2, 3, 6, 6))
    suite["max_pool2d"] = (
        lambda: T.sum_all(T.mul(T.max_pool2d(px), T.max_pool2d(px))), [px])
    ux = leaf((2, 3, 4, 4))
    suite["upsample_nearest"] = (
        lambda: T.sum_all(T.mul(T.upsample_nearest(ux), T.upsample_nearest(ux))),
        [ux])
    dx, dw, db = leaf((3, 5)), leaf((4, 5)), leaf((4,))
    suite["dense"] = (
        lambda: T.sum_all(T.mul(T.dense(dx, dw, db), T.dense(dx, dw, db))),
        [dx, dw, db])
    gx = leaf((2, 4, 5, 5))
    suite["global_avg_pool"] = (
        lambda: T.sum_all(T.mul(T.global_avg_pool(gx), T.global_avg_pool(gx))),
        [gx])
    sx, sw = leaf((2, 4, 3, 3)), leaf((2, 4), lo=0.3, hi=1.5)
    suite["scale_channels"] = (lambda: T.sum_all(T.scale_channels(sx, sw)),
                               [sx, sw])
    tx, tm = leaf((2, 4, 3, 3)), leaf((2, 1, 3, 3), lo=0.3, hi=1.5)
    suite["scale_spatial"] = (lambda: T.sum_all(T.scale_spatial(tx, tm)),
                              [tx, tm])
    mp = leaf((2, 3, 4, 4))
    mt = rng.uniform(-1.0, 1.0, (2, 3, 4, 4))
    suite["mse_loss"] = (lambda: T.mse_loss(mp, mt), [mp])
    return suite


def _full_model_check(rng):
    """Gradient-check every parameter of the tiny model through the full
    density + perceptual loss."""
    model = build_model(replace(TINY_CONFIG, seed=1234))
    params = model.parameters()
    # Nudge to a generic point: freshly initialized biases are zero, which
    # sits exactly on ReLU kinks wherever an upstream unit is inactive.
    for p in params:
        p.data = p.data + rng.uniform(-0.05, 0.05, p.data.shape)
    image = rng.uniform(0.0, 1.0, (1, 1, 16, 16))
    density = rng.uniform(0.0, 0.5, (1, 1, 16, 16))
    style = rng.uniform(0.0, 1.0, (1, 1, 16, 16))
    extractor = FeatureExtractor.snapshot(model)

    def build():
        density_pred, style_pred = model.forward(Tensor(image))
        loss, _ = total_loss(density_pred, density, style_pred, style, extractor)
        return loss

    return build, params


def cmd_gradcheck(entries_per_param: int = 4) -> int:
    """Check every registered op and the full Eq-style loss in 64-bit mode."""
    results = []
    with T.use_dtype(np.float64):
        rng = np.random.default_rng(20240817)
        for name, (build, params) in _op_check_suite(rng).items():
            error = T.grad_check(build, params=params,
                                 entries_per_param=entries_per_param)
            results.append((name, error))
        build, params = _full_model_check(rng)
        results.append(("full_eq1_loss", T.grad_check(
            build, params=params, entries_per_param=2)))

    from .tensor import DIFFERENTIABLE_OPS

    checked = {name for name, _ in results}
    missing = [op for op in DIFFERENTIABLE_OPS if op not in checked]

    print(f"{'op':18s} {'max rel err':>12s}  status")
    failed = False
    for name, error in results:
        ok = error < GRADCHECK_TOLERANCE
        failed |= not ok
        print(f"{name:18s} {error:12.3e}  {'ok' if ok else 'FAIL'}")
    if missing:
        print(f"MISSING checks for registered ops: {missing}")
        failed = True
    print(f"tolerance {GRADCHECK_TOLERANCE:g}; "
          f"{'all passed' if not failed else 'FAILURES above'}")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(run_dirs, out_path=None) -> int:
    """Combine the final row of each run's report.tsv into one table."""
    combined = []
    for run_dir in run_dirs:
        path = Path(run_dir) / "report.tsv"
        if not path.exists():
            raise DataError(f"no report.tsv in run directory {run_dir}")
        rows = read_tsv(path)
        if not rows:
            raise DataError(f"{path}: no data rows")
        final = rows[-1]
        combined.append({
            "dataset": final["dataset"], "n_few": int(final["n_few"]),
            "method": final["method"], "mae": float(final["mae"]),
            "run_dir": str(run_dir)})
    combined.sort(key=lambda r: (r["dataset"], r["n_few"], r["method"]))
    columns = ("dataset", "n_few", "method", "mae", "run_dir")
    print("\t".join(columns))
    for row in combined:
        print("\t".join(_format_cell(row[c]) for c in columns))
    if out_path is not None:
        write_tsv(out_path, columns, combined)
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def cmd_bench(config: ExperimentConfig, out_dir, workers: int = 1) -> int:
    """One-command benchmark: for each seed, run the full progressive
    transfer and the direct-training baseline on identical data, then emit
    the combined comparison."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base_seed = config.transfer["seed"]
    seeds = [base_seed + i for i in range(config.transfer["n_seeds"])]
    combined = []
    first_transfer = None
    started = time.time()

    for seed in seeds:
        seed_config = config.override(seed=seed)
        source_spec, few, test = _generate_bench_data(seed_config, seed)
        plan = replace(_plan_from_config(seed_config, few, eval_set=test,
                                         workers=workers),
                       source_spec=source_spec)

        ckpt, stage_report = run_progressive_transfer(plan)
        method = f"transfer:{plan.ablation}"
        rows = _report_rows(seed_config, stage_report, method, seed)
        arm_dir = out / f"seed_{seed}" / "transfer"
        arm_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, arm_dir / "final.ckpt")
        write_tsv(arm_dir / "report.tsv", REPORT_COLUMNS, rows)
        transfer_mae = stage_report[-1]["mae"]
        combined.append({"method": method, "seed": seed, "mae": transfer_mae})
        if first_transfer is None:
            first_transfer = (ckpt, stage_report, test)

        direct = train_direct(few, model_cfg=config.to_model_config(),
                              epochs=config.transfer["direct_epochs"],
                              lr=config.transfer["direct_lr"],
                              batch_size=config.training["batch_size"],
                              seed=seed)
        direct_mae = evaluate(direct, test, workers=workers)["mae"]
        direct_rows = _report_rows(
            seed_config,
            [{"stage": "direct", "epochs": config.transfer["direct_epochs"],
              "lr": config.transfer["direct_lr"], "mae": direct_mae}],
            "direct", seed)
        arm_dir = out / f"seed_{seed}" / "direct"
        arm_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(direct, arm_dir / "final.ckpt")
        write_tsv(arm_dir / "report.tsv", REPORT_COLUMNS, direct_rows)
        combined.append({"method": "direct", "seed": seed, "mae": direct_mae})
        print(f"seed {seed}: transfer {transfer_mae:.3f} vs direct "
              f"{direct_mae:.3f}  ({time.time() - started:.0f}s elapsed)")

    rows = [{"dataset": config.target["name"], "n_few": config.target["n_few"],
             **row} for row in combined]
    rows.sort(key=lambda r: (r["dataset"], r["n_few"], r["method"], r["seed"]))
    write_tsv(out / "bench_report.tsv",
              ("dataset", "n_few", "method", "seed", "mae"), rows)
    config.write_resolved(out / "config.ini")

    if config.output["figures"]:
        method_comparison_figure(combined, out / "comparison.png")
        ckpt, stage_report, test = first_transfer
        stage_mae_figure(stage_report, out / "stage_mae.png")
        loss_curves_figure(ckpt.history, out / "loss_curves.png")
        count_scatter_figure(evaluate(ckpt, test)["per_image"],
                             out / "scatter.png")

    means = {}
    for row in combined:
        means.setdefault(row["method"], []).append(row["mae"])
    print("mean MAE by method:")
    for method in sorted(means):
        values = means[method]
        print(f"  {method:18s} {np.mean(values):8.3f}  (n={len(values)})")
    return 0
