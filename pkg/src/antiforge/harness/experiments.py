"""Experiment runners. Each writes CSV + markdown + manifest under ``out_dir/<name>``.

Attacks run on fixed-size chunks of the image set. The attack seed of a
chunk depends only on (master seed, method, chunk index), and chunk results
are joined in image order, so the worker count never changes output bytes.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from PIL import Image

from .. import transforms as T
from ..attacks import ATTACKS, AttackConfig, colorspace_attack, eot_wrap, output_distortion
from ..colorspace import ColorSpaceTag
from ..metrics import (
    ASR_THRESHOLD,
    MetricsReport,
    asr,
    auc,
    high_frequency_ratio,
    image_report,
    lid_scores,
    output_report,
    spectrum,
    summarize,
)
from ..seeding import derive_seed
from ..surrogate import ConditionalGenerator
from .config import ConfigError, ExperimentConfig
from .data import load_directory, load_image, synthetic_faces
from .records import ResultRecord, markdown_table, write_config, write_csv, write_manifest

log = logging.getLogger(__name__)


# -- inputs ------------------------------------------------------------------------


def load_images(cfg: ExperimentConfig) -> tuple[np.ndarray, list[str]]:
    if cfg.data_dir is not None:
        return load_directory(cfg.data_dir, cfg.size, cfg.n_images)
    x = synthetic_faces(cfg.seed, cfg.n_images, cfg.size)
    return x, [f"synthetic_{i:04d}" for i in range(cfg.n_images)]


def _labels(cfg: ExperimentConfig, model: ConditionalGenerator) -> tuple[int, ...]:
    return cfg.labels if cfg.labels is not None else tuple(range(model.n_labels))


# -- chunked attack fan-out -----------------------------------------------------------


@dataclass(frozen=True)
class _Job:
    method: str
    cfg: AttackConfig
    model: Any
    x: np.ndarray
    sampler: Any = None
    space: str | None = None


def _run_job(job: _Job) -> tuple[np.ndarray, float]:
    if job.space is not None:
        x_adv, theta, _ = colorspace_attack(job.x, job.model, job.cfg, job.space, job.sampler)
        return x_adv, float(np.abs(theta).max(initial=0.0))
    attack = ATTACKS[job.method]
    if job.sampler is not None:
        attack = eot_wrap(attack, job.sampler)
    result = attack(job.x, job.model, job.cfg)
    x_adv = result[0]
    if job.method == "antiforge":
        theta_linf = result[1].linf()
    else:
        theta_linf = float(np.abs(x_adv - job.x).max(initial=0.0)) * 2.0  # back on the [-1, 1] scale
    return x_adv, theta_linf


def attack_images(
    cfg: ExperimentConfig,
    model: ConditionalGenerator,
    x: np.ndarray,
    method: str,
    *,
    sampler=None,
    space: str | None = None,
    **overrides: Any,
) -> tuple[np.ndarray, float]:
    """Attack every image in ``x``; returns x_adv and the largest |theta| seen."""
    if method not in cfg.attacks:
        raise ValueError(f"attack {method!r} is not configured")
    if cfg.labels is not None and "labels" not in overrides:
        overrides["labels"] = cfg.labels
    jobs = []
    for ci, start in enumerate(range(0, len(x), cfg.chunk_size)):
        seed = derive_seed(cfg.seed, f"attack:{method}", ci)
        acfg = cfg.attack_config(method, seed, **overrides)
        jobs.append(_Job(method, acfg, model, x[start : start + cfg.chunk_size], sampler, space))
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    return np.concatenate([r[0] for r in results]), max(r[1] for r in results)


# -- evaluation ----------------------------------------------------------------------


def _gen(model, x01, c):
    return model.forward(2.0 * x01 - 1.0, c)


def evaluate_outputs(model, x_ref, x_eval, labels: Sequence[int]):
    """Compare G(x_ref, c) with G(x_eval, c) for every label.

    Returns ``(per_label, combined)``: per_label maps label to
    (MetricsReport, rows); combined averages each image's metrics over
    labels before aggregating.
    """
    per_label = {}
    for c in labels:
        per_label[c] = output_report(_gen(model, x_ref, c), _gen(model, x_eval, c))
    combined_rows = []
    for i in range(len(x_ref)):
        rows_i = [per_label[c][1][i] for c in labels]
        mean = {k: float(np.mean([r[k] for r in rows_i])) for k in ("l2", "ssim", "mse")}
        mean["psnr"] = math.inf if mean["mse"] == 0.0 else 10.0 * math.log10(255.0**2 / mean["mse"])
        combined_rows.append(mean)
    return per_label, (summarize(combined_rows), combined_rows)


# -- shared output plumbing --------------------------------------------------------------


def _outdir(cfg: ExperimentConfig, name: str) -> Path:
    out = cfg.out_dir / name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _finish(cfg: ExperimentConfig, name: str, out: Path, files: list[Path]) -> None:
    files = list(files) + [write_config(out, cfg.raw)]
    write_manifest(out, name, cfg.raw, files)
    log.info("%s: wrote %d files to %s", name, len(files), out)


def _metric_cells(report: MetricsReport) -> dict[str, float]:
    return report.as_dict()


def _write_md(path: Path, title: str, header, rows) -> Path:
    path.write_text(f"# {title}\n\n" + markdown_table(header, rows))
    return path


# -- experiments -----------------------------------------------------------------------


def run_effectiveness(cfg: ExperimentConfig) -> list[ResultRecord]:
    """L2 / PSNR / SSIM / MSE / ASR between G(x) and G(x_adv) per method and label."""
    model = cfg.surrogate.build()
    x, ids = load_images(cfg)
    labels = _labels(cfg, model)
    names = cfg.label_names(model)
    h = cfg.config_hash
    records, table, image_rows = [], [], []
    for method in cfg.attacks:
        x_adv, _ = attack_images(cfg, model, x, method)
        per_label, (combined, combined_rows) = evaluate_outputs(model, x, x_adv, labels)
        entries = [(names[k], per_label[c]) for k, c in enumerate(labels)] + [("all", (combined, combined_rows))]
        for label_name, (report, rows) in entries:
            table.append({"config_hash": h, "method": method, "surrogate": cfg.surrogate.name,
                          "label": label_name, **_metric_cells(report)})
            for image_id, r in zip(ids, rows):
                image_rows.append({"config_hash": h, "method": method, "label": label_name,
                                   "image_id": image_id, **r})
            records.append(ResultRecord("effectiveness", method, "none", report, rows, config_hash=h))
    out = _outdir(cfg, "effectiveness")
    files = [
        write_csv(out / "effectiveness.csv", "effectiveness", table),
        write_csv(out / "effectiveness_images.csv", "effectiveness_images", image_rows),
        _write_md(out / "effectiveness.md", "Disruption of surrogate outputs",
                  ["method", "label", "L2", "PSNR", "SSIM", "ASR"],
                  [[r["method"], r["label"], r["l2"], r["psnr"], r["ssim"], r["asr"]] for r in table]),
    ]
    _finish(cfg, "effectiveness", out, files)
    return records


def robustness_defenses(cfg: ExperimentConfig) -> list[tuple[str, T.TransformSpec, dict[str, Any], Any]]:
    """(name, transform applied to x_adv, attack overrides, EOT sampler) per row."""
    sec = cfg.section["robustness"]
    q, eps, sigma = int(sec["jpeg_quality"]), float(sec["jpeg_epsilon"]), float(sec["blur_sigma"])
    jpeg = T.TransformSpec("jpeg", {"quality": q})
    blur = T.TransformSpec("gaussian_blur", {"sigma": sigma})
    return [
        ("none", T.IDENTITY, {}, None),
        (f"jpeg_q{q}", jpeg, {}, None),
        (f"jpeg_q{q}_eps{eps:g}", jpeg, {"epsilon": eps}, None),
        (f"blur_s{sigma:g}", blur, {}, None),
        (f"blur_s{sigma:g}_eot", blur, {}, T.BlurSampler(sec["eot_sigmas"])),
    ]


def run_robustness(cfg: ExperimentConfig) -> list[ResultRecord]:
    """Distortion after a transform is applied to x_adv (and to x for the reference)."""
    model = cfg.surrogate.build()
    x, _ = load_images(cfg)
    labels = _labels(cfg, model)
    h = cfg.config_hash
    records, table = [], []
    for method in cfg.attacks:
        cache: dict[tuple, np.ndarray] = {}
        for name, spec, overrides, sampler in robustness_defenses(cfg):
            key = (tuple(sorted(overrides.items())), sampler is not None)
            if key not in cache:
                cache[key] = attack_images(cfg, model, x, method, sampler=sampler, **overrides)[0]
            x_adv = cache[key]
            _, (report, rows) = evaluate_outputs(model, T.apply_chain(x, spec), T.apply_chain(x_adv, spec), labels)
            table.append({"config_hash": h, "method": method, "defense": name, **_metric_cells(report)})
            records.append(ResultRecord("robustness", method, name, report, rows, config_hash=h))
    out = _outdir(cfg, "robustness")
    methods = list(cfg.attacks)
    defenses = [d[0] for d in robustness_defenses(cfg)]
    by_key = {(r["method"], r["defense"]): r for r in table}
    files = [
        write_csv(out / "robustness.csv", "robustness", table),
        _write_md(out / "robustness.md", "L2 distortion under input transformations",
                  ["defense", *methods],
                  [[d, *(by_key[(m, d)]["l2"] for m in methods)] for d in defenses]),
    ]
    _finish(cfg, "robustness", out, files)
    return records


def run_reconstruction(cfg: ExperimentConfig, reconstruct: bool = True) -> list[ResultRecord]:
    """Input (I) and output (O) similarity before and after the restoration chain.

    Both sides compare the restored clean image with the restored x_adv, so
    the numbers measure what is left of the perturbation.
    """
    model = cfg.surrogate.build()
    x, _ = load_images(cfg)
    labels = _labels(cfg, model)
    h = cfg.config_hash
    records, table = [], []
    stages = [("attack", lambda im: im)]
    if reconstruct:
        stages.append(("attack+reconstruction", T.reconstruct))
    for method in cfg.attacks:
        x_adv, _ = attack_images(cfg, model, x, method)
        for stage, fn in stages:
            xr, ar = fn(x), fn(x_adv)
            inp, _ = image_report(xr, ar)
            _, (report, rows) = evaluate_outputs(model, xr, ar, labels)
            table.append({
                "config_hash": h, "method": method, "stage": stage,
                "ssim_i": inp["ssim"], "psnr_i": inp["psnr"], "mse_i": inp["mse"],
                "ssim_o": report.ssim, "psnr_o": report.psnr, "mse_o": report.mse,
                "l2_o": report.l2, "asr_o": report.asr,
            })
            records.append(ResultRecord("reconstruction", method, stage, report, rows, config_hash=h))
    out = _outdir(cfg, "reconstruction")
    cols = ["ssim_i", "psnr_i", "mse_i", "ssim_o", "psnr_o", "mse_o"]
    files = [
        write_csv(out / "reconstruction.csv", "reconstruction", table),
        _write_md(out / "reconstruction.md", "Similarity before and after reconstruction",
                  ["method", "stage", "SSIM (I)", "PSNR (I)", "MSE (I)", "SSIM (O)", "PSNR (O)", "MSE (O)"],
                  [[r["method"], r["stage"], *(r[c] for c in cols)] for r in table]),
    ]
    _finish(cfg, "reconstruction", out, files)
    return records


def run_transfer(cfg: ExperimentConfig) -> dict[tuple[str, str], float]:
    """ASR of perturbations crafted on surrogate i and evaluated on surrogate j."""
    method = cfg.section["transfer"]["method"]
    if method not in cfg.attacks:
        raise ConfigError(f"transfer.method {method!r} is not configured under attacks")
    specs = cfg.transfer_surrogates
    models = [s.build() for s in specs]
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        names = [f"{n}#{i}" for i, n in enumerate(names)]
    n_common = min(m.n_labels for m in models)
    labels = cfg.labels if cfg.labels is not None else tuple(range(n_common))
    if max(labels) >= n_common:
        raise ValueError(f"labels {labels} exceed the smallest surrogate label set ({n_common})")
    x, _ = load_images(cfg)
    h = cfg.config_hash
    long_rows, matrix = [], {}
    for i, src in enumerate(models):
        x_adv, _ = attack_images(cfg, src, x, method, labels=labels)
        for j, dst in enumerate(models):
            d = output_distortion(dst, x, x_adv, labels)
            matrix[(names[i], names[j])] = asr(d)
            long_rows.append({"config_hash": h, "method": method, "source": names[i], "target": names[j],
                              "l2": float(d.mean()), "asr": asr(d)})
    wide = []
    for a in names:
        row = {"config_hash": h, "source": a}
        row.update({b: ("-" if a == b else matrix[(a, b)]) for b in names})
        wide.append(row)
    out = _outdir(cfg, "transfer")
    files = [
        write_csv(out / "transfer.csv", "transfer", long_rows),
        write_csv(out / "transfer_matrix.csv", "transfer_matrix", wide, ["config_hash", "source", *names]),
        _write_md(out / "transfer.md", f"Transfer ASR ({method}); rows craft, columns evaluate",
                  ["source", *names], [[r["source"], *(r[b] for b in names)] for r in wide]),
    ]
    _finish(cfg, "transfer", out, files)
    return matrix


def _downsample(x: np.ndarray, size: int) -> np.ndarray:
    h, w = x.shape[-3:-1]
    if h % size == 0 and w % size == 0:
        fh, fw = h // size, w // size
        return x.reshape(x.shape[:-3] + (size, fh, size, fw, 3)).mean(axis=(-4, -2))
    out = []
    for im in x.reshape((-1, h, w, 3)):
        chans = [np.asarray(Image.fromarray(im[..., k].astype(np.float32), mode="F").resize((size, size), Image.BOX))
                 for k in range(3)]
        out.append(np.stack(chans, axis=-1))
    return np.asarray(out, dtype=np.float64).reshape(x.shape[:-3] + (size, size, 3))


def lid_auc(clean: np.ndarray, adv: np.ndarray, k: int, size: int) -> float:
    """AUC of LID scores separating x_adv from x on downsampled pixel features.

    Image i (clean or protected) is scored against the clean set without image i.
    """
    n = len(clean)
    if n - 1 <= k:
        raise ValueError(f"LID with k={k} needs more than {k + 1} images, got {n}")
    fc = _downsample(clean, size).reshape(n, -1)
    fa = _downsample(adv, size).reshape(n, -1)
    scores, labels = [], []
    for i in range(n):
        ref = np.delete(fc, i, axis=0)
        scores.append(float(lid_scores(fc[i : i + 1], ref, k)[0]))
        labels.append(0)
        scores.append(float(lid_scores(fa[i : i + 1], ref, k)[0]))
        labels.append(1)
    return auc(scores, labels)


def run_colorspace(cfg: ExperimentConfig) -> tuple[dict[tuple[str, str], float], dict[str, float]]:
    """The same bounded Adam attack parameterised in each colour space."""
    sec = cfg.section["colorspace"]
    model = cfg.surrogate.build()
    x, _ = load_images(cfg)
    labels = _labels(cfg, model)
    h = cfg.config_hash
    transforms = [T.TransformSpec("jpeg", {"quality": int(sec["jpeg_quality"])})]
    transforms += [T.TransformSpec("gaussian_blur", {"sigma": float(s)}) for s in sec["blur_sigmas"]]
    spaces = [ColorSpaceTag.parse(s).value for s in sec["spaces"]]
    rows, lid_rows, l2, aucs = [], [], {}, {}
    for space in spaces:
        x_adv, _ = attack_images(cfg, model, x, "antiforge", space=space)
        for spec in transforms:
            d = output_distortion(model, T.apply_chain(x, spec), T.apply_chain(x_adv, spec), labels)
            l2[(spec.label, space)] = float(d.mean())
            rows.append({"config_hash": h, "space": space, "transform": spec.label,
                         "l2": float(d.mean()), "asr": asr(d)})
        k = int(sec["lid_k"])
        aucs[space] = lid_auc(x, x_adv, k, int(sec["lid_size"]))
        lid_rows.append({"config_hash": h, "space": space, "k": k, "auc": aucs[space]})
    out = _outdir(cfg, "colorspace")
    files = [
        write_csv(out / "colorspace.csv", "colorspace", rows),
        write_csv(out / "colorspace_lid.csv", "colorspace_lid", lid_rows),
        _write_md(out / "colorspace.md", "L2 distortion per colour space after transforms",
                  ["transform", *spaces], [[t.label, *(l2[(t.label, s)] for s in spaces)] for t in transforms]),
        _write_md(out / "colorspace_lid.md", "LID detection AUC", ["space", "AUC"],
                  [[r["space"], r["auc"]] for r in lid_rows]),
    ]
    _finish(cfg, "colorspace", out, files)
    return l2, aucs


def run_magnitude_ablation(cfg: ExperimentConfig, plot: bool = True) -> list[tuple[float, float]]:
    """Mean output L2 of the Lab attack as epsilon grows."""
    model = cfg.surrogate.build()
    x, _ = load_images(cfg)
    labels = _labels(cfg, model)
    h = cfg.config_hash
    rows, curve = [], []
    for eps in cfg.section["ablation"]["epsilons"]:
        eps = float(eps)
        x_adv, linf = attack_images(cfg, model, x, "antiforge", epsilon=eps)
        d = output_distortion(model, x, x_adv, labels)
        curve.append((eps, float(d.mean())))
        rows.append({"config_hash": h, "epsilon": eps, "l2": float(d.mean()), "asr": asr(d), "linf": linf})
    out = _outdir(cfg, "ablation")
    files = [
        write_csv(out / "ablation.csv", "ablation", rows),
        _write_md(out / "ablation.md", "Output L2 versus perturbation budget", ["epsilon", "L2", "ASR"],
                  [[r["epsilon"], r["l2"], r["asr"]] for r in rows]),
    ]
    if plot:
        files.append(_plot_curve(out / "ablation.png", curve))
    _finish(cfg, "ablation", out, files)
    return curve


def _plot_curve(path: Path, curve: list[tuple[float, float]]) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.2), dpi=120)
    ax.plot([c[0] for c in curve], [c[1] for c in curve], marker="o")
    ax.axhline(ASR_THRESHOLD, color="gray", linestyle="--", linewidth=0.8)
    ax.set_xlabel("epsilon")
    ax.set_ylabel("mean output L2")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def _to_rgb8(img01: np.ndarray) -> np.ndarray:
    if img01.ndim == 2:
        img01 = np.repeat(img01[..., None], 3, axis=-1)
    return T.to_uint8(img01)


def emit_spectra(cfg: ExperimentConfig) -> dict[str, float]:
    """Composite PNG of {real, fake from clean, fake from protected} over their spectra."""
    sec = cfg.section["spectra"]
    model = cfg.surrogate.build()
    x, ids = load_images(cfg)
    i, c = int(sec["image_index"]), int(sec["label"])
    if not 0 <= i < len(x):
        raise ValueError(f"spectra.image_index {i} out of range for {len(x)} images")
    xi = x[i : i + 1]
    x_adv, _ = attack_images(cfg, model, xi, "antiforge")
    panels = {
        "real": xi[0],
        "fake_clean": (_gen(model, xi, c)[0] + 1.0) / 2.0,
        "fake_protected": (_gen(model, x_adv, c)[0] + 1.0) / 2.0,
    }
    cutoff = float(sec["cutoff"])
    ratios = {name: high_frequency_ratio(img, cutoff) for name, img in panels.items()}
    top = np.concatenate([_to_rgb8(np.clip(p, 0, 1)) for p in panels.values()], axis=1)
    bottom = np.concatenate([_to_rgb8(spectrum(p)) for p in panels.values()], axis=1)
    out = _outdir(cfg, "spectra")
    png = out / "spectra.png"
    Image.fromarray(np.concatenate([top, bottom], axis=0)).save(png, format="PNG")
    h = cfg.config_hash
    files = [
        png,
        write_csv(out / "spectra.csv", "spectra",
                  [{"config_hash": h, "panel": k, "hf_ratio": v} for k, v in ratios.items()]),
    ]
    _finish(cfg, "spectra", out, files)
    return ratios


# -- protect ------------------------------------------------------------------------------


def _stats(a: np.ndarray) -> dict[str, float]:
    return {"max_abs": float(np.abs(a).max(initial=0.0)), "mean_abs": float(np.abs(a).mean()),
            "std": float(a.std())}


def protect_images(cfg: ExperimentConfig, inputs: Sequence["str | Path"], out: "str | Path") -> tuple[list[Path], list[str]]:
    """Write a protected PNG plus sidecar JSON for each input image.

    Images keep their own resolution. Unreadable files are reported and
    skipped. Returns (written PNG paths, error messages).
    """
    from ..attacks import antiforge_attack

    model = cfg.surrogate.build()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths: list[Path] = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(q for q in p.iterdir() if q.is_file()))
        else:
            paths.append(p)
    written, errors = [], []
    for idx, path in enumerate(paths):
        try:
            x = load_image(path)
        except (OSError, ValueError) as exc:
            msg = f"{path}: {exc}"
            log.error("cannot read %s", msg)
            errors.append(msg)
            continue
        acfg = cfg.attack_config("antiforge", derive_seed(cfg.seed, "protect", idx))
        if cfg.labels is not None:
            acfg = AttackConfig.from_dict({**acfg.to_dict(), "labels": cfg.labels})
        x_adv, pert, trace = antiforge_attack(x, model, acfg)
        target = out / f"{path.stem}.png"
        Image.fromarray(T.to_uint8(x_adv)).save(target, format="PNG")
        saved = np.asarray(Image.open(target), dtype=np.float64) / 255.0
        sidecar = {
            "source": str(path),
            "config_hash": cfg.config_hash,
            "epsilon": acfg.epsilon,
            "iterations": acfg.iterations,
            "theta_a": _stats(pert.theta_a),
            "theta_b": _stats(pert.theta_b),
            "theta_linf": pert.linf(),
            "rgb_linf": float(np.abs(x_adv - x).max()),
            "rgb_linf_saved_8bit": int(np.abs(saved * 255.0 - x * 255.0).round().max()),
            "gamut_events": int(trace.clamp_counts.sum()),
            "output_l2": float(trace.final_distortion),
        }
        target.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")
        written.append(target)
    return written, errors
