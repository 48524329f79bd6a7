"""Experiment plans: cached dataset / extractor / reconstructor artifacts plus CSV and SVG reports.

A :class:`Workspace` owns one output directory. Every artifact it trains is
stored there as a checkpoint with its config snapshot and is reused when the
snapshot still matches, so experiments that share models only train once.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import analysis, plotting
from .config import PretrainConfig, SynthConfig, TrainConfig
from .contrastive import collect_latents, pretrain
from .models import DCConfig, FeatureExtractor, build_reconstructor, from_two_channel
from .phantoms import Volume, read_dataset, select, synthesize_dataset, write_dataset
from .serialization import (ConfigError, apply_overrides, config_path_for, format_value, load_checkpoint,
                            read_config, save_checkpoint, write_config)
from .training import RunRecord, SliceResult, evaluate_reconstruction, train_reconstructor

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["volume_id", "slice", "model", "mode", "acceleration", "mask_kind", "snr_db",
                  "nmse", "psnr", "ssim"]
SWEEP_ACCELERATIONS = (4.0, 6.0, 8.0, 10.0, 12.0)
NOISE_LEVELS = (40.0, 35.0, 30.0, 25.0, 20.0)


@dataclass
class ExperimentPlan:
    """Axes of one experiment; written next to its outputs as ``plan.cfg``."""
    name: str
    dataset: str
    models: tuple[str, ...] = ("cascade",)
    modes: tuple[str, ...] = ("without_cl", "with_cl")
    accelerations: tuple[float, ...] = (8.0,)
    mask_kinds: tuple[str, ...] = ("random",)
    snr_levels: tuple[float | None, ...] = (None,)
    seeds: tuple[int, ...] = (0,)
    out: str = "."
    family: str = "A"

    def validate(self) -> None:
        if not Path(self.dataset).exists():
            raise FileNotFoundError(f"dataset not found: {self.dataset}")
        out = Path(self.out)
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
        if not (self.models and self.modes and self.accelerations and self.mask_kinds and self.snr_levels):
            raise ConfigError(f"plan {self.name}: every axis needs at least one value")


# -- CSV helpers ---------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return "inf"
    if isinstance(value, float):
        return "inf" if math.isinf(value) else repr(value)
    return str(value)


def write_csv(path, rows: Sequence[Mapping], columns: Sequence[str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c)) for c in columns])
    return path


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def metric_rows(results: Sequence[SliceResult], model: str, mode: str, mask_kind: str,
                snr_db: float | None) -> list[dict]:
    return [{"volume_id": r.volume_id, "slice": r.slice, "model": model, "mode": mode,
             "acceleration": r.acceleration, "mask_kind": mask_kind, "snr_db": snr_db,
             "nmse": r.nmse, "psnr": r.psnr, "ssim": r.ssim} for r in results]


def write_record(path, record: RunRecord) -> Path:
    rows = [{"epoch": 0, "train_loss": float("nan"), "val_loss": record.initial_val_loss, "wall_time": 0.0}]
    rows += [{"epoch": e + 1, "train_loss": t, "val_loss": v, "wall_time": w}
             for e, (t, v, w) in enumerate(zip(record.train_loss, record.val_loss, record.wall_time))]
    return write_csv(path, rows, ["epoch", "train_loss", "val_loss", "wall_time"])


def read_record(path, seed: int = 0) -> RunRecord:
    rows = read_csv(path)
    rec = RunRecord(seed=seed)
    for row in rows:
        if int(row["epoch"]) == 0:
            rec.initial_val_loss = float(row["val_loss"])
        else:
            rec.train_loss.append(float(row["train_loss"]))
            rec.val_loss.append(float(row["val_loss"]))
            rec.wall_time.append(float(row["wall_time"]))
    return rec


def _summary_rows(rows, keys=("model", "mode", "acceleration", "mask_kind", "snr_db")) -> list[dict]:
    typed = [{**r, "acceleration": float(r["acceleration"])} for r in rows]
    return analysis.summarize(typed, list(keys))


# -- workspace -----------------------------------------------------------------

def _snapshot(cfg) -> dict[str, str]:
    return {f.name: format_value(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}


@dataclass
class Workspace:
    out: Path
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    pretrain_overrides: dict = field(default_factory=dict)
    train_overrides: dict = field(default_factory=dict)
    progress: Callable[[str], None] | None = None

    def __post_init__(self):
        self.out = Path(self.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self._volumes: list[Volume] | None = None
        self._extractors: dict[str, FeatureExtractor] = {}

    def _log(self, msg: str) -> None:
        logger.info(msg)
        if self.progress is not None:
            self.progress(msg)

    @property
    def dataset_path(self) -> Path:
        return self.out / "data.ckv"

    def volumes(self) -> list[Volume]:
        if self._volumes is None:
            if not self.dataset_path.exists():
                self._log(f"synthesizing dataset (seed {self.synth.seed})")
                vols = synthesize_dataset(self.synth.seed, (self.synth.size, self.synth.size),
                                          self.synth.num_slices, self.synth.counts())
                write_dataset(vols, self.dataset_path)
            self._volumes = read_dataset(self.dataset_path)
        return self._volumes

    def pretrain_config(self, family: str = "A") -> PretrainConfig:
        cfg = PretrainConfig(dataset=str(self.dataset_path), family=family, seed=self.seed)
        return replace(cfg, **self.pretrain_overrides)

    def train_config(self, model: str, mode: str, family: str = "A") -> TrainConfig:
        extractor = str(self.out / "extractor-A.clmp") if mode == "with_cl" else ""
        cfg = TrainConfig(dataset=str(self.dataset_path), family=family, mode=mode, model=model,
                          extractor=extractor, seed=self.seed)
        return replace(cfg, **self.train_overrides)

    def _cached(self, path: Path, cfg) -> bool:
        cfg_path = config_path_for(path)
        return path.exists() and cfg_path.exists() and read_config(cfg_path) == _snapshot(cfg)

    def extractor(self, pretrained: bool = True) -> FeatureExtractor:
        """Pretrained (family A) or freshly initialized feature extractor."""
        cfg = self.pretrain_config("A")
        T = FeatureExtractor(seed=cfg.seed)
        if not pretrained:
            return T
        if "A" in self._extractors:
            return self._extractors["A"]
        path = self.out / "extractor-A.clmp"
        if self._cached(path, cfg):
            T.load_state_dict(load_checkpoint(path))
        else:
            self._log(f"pretraining feature extractor ({cfg.epochs} epochs)")
            _, history = pretrain(T, self.volumes(), cfg)
            save_checkpoint(T.state_dict(), path, _snapshot(cfg))
            write_csv(self.out / "extractor-A.history.csv",
                      [{"step": s, "epoch": e, "loss": v} for s, e, v in history], ["step", "epoch", "loss"])
            # Reconstructors trained on the previous extractor's latents are stale now.
            for stale in self.out.glob("recon-*-with_cl.clmp"):
                stale.unlink()
        self._extractors["A"] = T
        return T

    def reconstructor(self, model: str, mode: str, family: str = "A"):
        """Trained reconstructor and its RunRecord, from cache when possible."""
        cfg = self.train_config(model, mode, family)
        stem = f"recon-{family}-{model}-{mode}"
        path = self.out / f"{stem}.clmp"
        G = build_reconstructor(model, seed=cfg.seed, dc=DCConfig(cfg.dc_lambda, cfg.hard_dc))
        T = self.extractor() if mode == "with_cl" else None
        record_path = self.out / f"{stem}.record.csv"
        if self._cached(path, cfg) and record_path.exists():
            G.load_state_dict(load_checkpoint(path))
            record = read_record(record_path, cfg.seed)
        else:
            self._log(f"training {model} {mode} on family {family} ({cfg.epochs} epochs)")
            G, record = train_reconstructor(G, T, self.volumes(), cfg)
            save_checkpoint(G.state_dict(), path, _snapshot(cfg))
            write_record(record_path, record)
        return G, T, record

    def evaluate(self, model: str, mode: str, accelerations: Sequence[float], family: str = "A",
                 train_family: str | None = None, mask_kind: str = "random",
                 snr_db: float | None = None) -> list[dict]:
        G, T, _ = self.reconstructor(model, mode, train_family or family)
        test = select(self.volumes(), family=family, split="test")
        cfg = self.train_config(model, mode, family)
        rows = []
        for acc in accelerations:
            res = evaluate_reconstruction(T, G, test, acc, mask_kind, snr_db, cfg.num_coils, cfg.coil_seed,
                                          seed=self.seed)
            rows += metric_rows(res, model, mode, mask_kind, snr_db)
        return rows

    def latents(self, pretrained: bool, accelerations: Sequence[float] = (2.0, 4.0, 6.0, 8.0),
                family: str = "A", split: str = "test"):
        cfg = self.pretrain_config()
        vols = select(self.volumes(), family=family, split=split)
        return collect_latents(self.extractor(pretrained), vols, accelerations, cfg.num_coils, cfg.coil_seed,
                               seed=self.seed, mask_kind=cfg.mask_kind)


# -- experiments ---------------------------------------------------------------

def _metric_report(ws: Workspace, name: str, rows: list[dict], plot_metrics=("nmse", "psnr", "ssim")) -> dict:
    out = ws.out / name
    write_csv(out / "metrics.csv", rows, METRIC_COLUMNS)
    summary = _summary_rows(rows)
    write_csv(out / "summary.csv", summary)
    for m in plot_metrics:
        plotting.metric_vs_acceleration(summary, m, out / f"{m}.svg", title=name)
    return {"rows": rows, "summary": summary}


def _sweep(ws: Workspace, plan: ExperimentPlan) -> list[dict]:
    rows = []
    for model in plan.models:
        for mode in plan.modes:
            for kind in plan.mask_kinds:
                for snr in plan.snr_levels:
                    rows += ws.evaluate(model, mode, plan.accelerations, family=plan.family,
                                        train_family=plan.family, mask_kind=kind, snr_db=snr)
    return rows


def exp1_accel_sweep(ws: Workspace, plan: ExperimentPlan) -> dict:
    return _metric_report(ws, plan.name, _sweep(ws, plan))


def exp2_transfer(ws: Workspace, plan: ExperimentPlan) -> dict:
    """Extractor pretrained on family A, reconstructors trained and tested on family B."""
    return _metric_report(ws, plan.name, _sweep(ws, plan))


def exp3_mask_swap(ws: Workspace, plan: ExperimentPlan) -> dict:
    """Models trained on random masks, evaluated on random and equispaced masks."""
    report = _metric_report(ws, plan.name, _sweep(ws, plan), plot_metrics=())
    summary = report["summary"]
    for m in ("nmse", "psnr", "ssim"):
        series = {mode: [next(r[f"{m}_mean"] for r in summary if r["mode"] == mode and r["mask_kind"] == k)
                         for k in plan.mask_kinds] for mode in plan.modes}
        plotting.grouped_bars(list(plan.mask_kinds), series, ws.out / plan.name / f"{m}.svg", m.upper())
    return report


def exp4_noise(ws: Workspace, plan: ExperimentPlan) -> dict:
    report = _metric_report(ws, plan.name, _sweep(ws, plan), plot_metrics=())
    summary = report["summary"]
    labels = [f"{s:g} dB" for s in plan.snr_levels]
    for m in ("nmse", "psnr", "ssim"):
        series, errs = {}, {}
        for mode in plan.modes:
            picked = [next(r for r in summary if r["mode"] == mode and r["snr_db"] == s) for s in plan.snr_levels]
            series[mode] = [r[f"{m}_mean"] for r in picked]
            errs[mode] = [r[f"{m}_std"] for r in picked]
        plotting.grouped_bars(labels, series, ws.out / plan.name / f"{m}.svg", m.upper(), errs)
    return report


def exp6_alignment(ws: Workspace, plan: ExperimentPlan, bins: int = 30) -> dict:
    """Positive-pair distances per acceleration pair at random init and after pretraining."""
    accelerations = plan.accelerations
    before, _ = ws.latents(False, accelerations)
    after, _ = ws.latents(True, accelerations)
    d0, d1 = analysis.pair_distances(before, accelerations), analysis.pair_distances(after, accelerations)
    hi = max(max(d.max() for d in d0.values()), max(d.max() for d in d1.values())) * (1 + 1e-9)
    edges = np.linspace(0.0, hi, bins + 1)
    h0 = analysis.pair_distance_histogram(before, accelerations, edges)
    h1 = analysis.pair_distance_histogram(after, accelerations, edges)
    rows = [{"key": k, "num_pairs": int(h0[k].counts.sum()), "mean_init": h0[k].mean, "mean_pretrained": h1[k].mean,
             "alignment_init": analysis.alignment((_pairs(before, accelerations, k))),
             "alignment_pretrained": analysis.alignment((_pairs(after, accelerations, k)))} for k in h0]
    out = ws.out / plan.name
    write_csv(out / "pair_distances.csv", rows)
    hist_rows = [{"key": k, "stage": stage, "bin_lo": edges[i], "bin_hi": edges[i + 1], "count": int(h[k].counts[i])}
                 for stage, h in (("init", h0), ("pretrained", h1)) for k in h for i in range(bins)]
    write_csv(out / "histograms.csv", hist_rows)
    plotting.pair_histograms(h0, h1, out / "histograms.svg")
    return {"rows": rows, "before": h0, "after": h1}


def _pairs(latents, accelerations, key):
    i, j = [list(map(float, accelerations)).index(float(a)) for a in key.split("-")]
    return latents[:, i], latents[:, j]


def exp7_uniformity(ws: Workspace, plan: ExperimentPlan, beta: float = 2.0) -> dict:
    """Uniformity of held-out latents, pooled over scans and accelerations."""
    accelerations = plan.accelerations
    rows = []
    for stage, pretrained in (("init", False), ("pretrained", True)):
        z, _ = ws.latents(pretrained, accelerations)
        row = {"stage": stage, "uniformity": analysis.uniformity(z.reshape((-1,) + z.shape[2:]), beta)}
        for q, acc in enumerate(accelerations):
            row[f"uniformity_{acc:g}x"] = analysis.uniformity(z[:, q], beta)
        rows.append(row)
    out = ws.out / plan.name
    write_csv(out / "uniformity.csv", rows)
    cats = ["pooled"] + [f"{a:g}X" for a in accelerations]
    series = {r["stage"]: [r["uniformity"]] + [r[f"uniformity_{a:g}x"] for a in accelerations] for r in rows}
    plotting.grouped_bars(cats, series, out / "uniformity.svg", "uniformity (lower is more uniform)")
    return {"rows": rows}


def _gt_magnitude(inputs_shape, volumes, num_coils, coil_seed):
    """Fully sampled coil-image magnitudes in collect_latents order, shape (scans, H, W)."""
    from .phantoms import volume_coils
    out = []
    for vol in volumes:
        sens = volume_coils(vol, num_coils, coil_seed).sensitivities
        for s in range(vol.num_slices):
            for c in range(num_coils):
                out.append(np.abs(sens[c] * vol.slices[s].astype(np.complex128)))
    return np.stack(out)


def exp8_mi(ws: Workspace, plan: ExperimentPlan, bins: int = 32, with_recon: bool = True) -> dict:
    """Histogram MI with the ground truth: contrastive latents vs zero-filled inputs."""
    accelerations = plan.accelerations
    cfg = ws.pretrain_config()
    vols = select(ws.volumes(), family="A", split="test")
    z, x = ws.latents(True, accelerations)
    gt = _gt_magnitude(x.shape, vols, cfg.num_coils, cfg.coil_seed)
    z_mag, x_mag = analysis.latent_magnitude(z), analysis.latent_magnitude(x)
    rows = []
    for q, acc in enumerate(accelerations):
        rows.append({"acceleration": acc, "mi_latent": analysis.mutual_info_hist(z_mag[:, q], gt, bins),
                     "mi_zero_filled": analysis.mutual_info_hist(x_mag[:, q], gt, bins)})
    out = ws.out / plan.name
    write_csv(out / "mi.csv", rows)
    plotting.grouped_bars([f"{a:g}X" for a in accelerations],
                          {"zero-filled": [r["mi_zero_filled"] for r in rows],
                           "latent": [r["mi_latent"] for r in rows]}, out / "mi.svg", "MI with ground truth (nats)")
    result = {"rows": rows}
    if with_recon:
        # Per-slice MI against per-slice reconstruction quality (slices pool their coils).
        per_coil = cfg.num_coils
        scatter_rows = []
        for mode, src in (("without_cl", x_mag), ("with_cl", z_mag)):
            for q, acc in enumerate(accelerations):
                metrics = ws.evaluate(plan.models[0], mode, [acc])
                for k, m in enumerate(metrics):
                    sl = slice(k * per_coil, (k + 1) * per_coil)
                    scatter_rows.append({"mode": mode, "acceleration": acc, "volume_id": m["volume_id"],
                                         "slice": m["slice"], "mi": analysis.mutual_info_hist(src[sl, q], gt[sl], bins),
                                         "nmse": m["nmse"], "psnr": m["psnr"], "ssim": m["ssim"]})
        write_csv(out / "mi_vs_metrics.csv", scatter_rows)
        for metric in ("nmse", "psnr", "ssim"):
            pts = {mode: ([r["mi"] for r in scatter_rows if r["mode"] == mode],
                          [r[metric] for r in scatter_rows if r["mode"] == mode])
                   for mode in ("without_cl", "with_cl")}
            plotting.mi_scatter(pts, out / f"mi_vs_{metric}.svg", metric.upper())
        result["scatter"] = scatter_rows
    return result


def exp9_convergence(ws: Workspace, plan: ExperimentPlan) -> dict:
    records = {mode: ws.reconstructor(plan.models[0], mode, plan.family)[2] for mode in plan.modes}
    target = records["without_cl"].val_loss[-1]
    rows = []
    for mode, rec in records.items():
        for e, (t, v) in enumerate(zip(rec.train_loss, rec.val_loss), 1):
            rows.append({"mode": mode, "epoch": e, "train_loss": t, "val_loss": v})
    out = ws.out / plan.name
    write_csv(out / "curves.csv", rows)
    reach = {mode: rec.epochs_to_reach(target) for mode, rec in records.items()}
    write_csv(out / "epochs_to_reach.csv",
              [{"mode": m, "threshold": target, "epochs": "" if r is None else r} for m, r in reach.items()])
    plotting.loss_curves({f"{m} val": [rec.initial_val_loss] + rec.val_loss for m, rec in records.items()}
                         | {f"{m} train": [float("nan")] + rec.train_loss for m, rec in records.items()},
                         out / "curves.svg", ylabel="loss")
    return {"records": records, "threshold": target, "epochs_to_reach": reach}


EXPERIMENTS: dict[str, Callable[[Workspace], dict]] = {
    "exp1-accel-sweep": exp1_accel_sweep,
    "exp2-transfer": exp2_transfer,
    "exp3-mask-swap": exp3_mask_swap,
    "exp4-noise": exp4_noise,
    "exp6-alignment": exp6_alignment,
    "exp7-uniformity": exp7_uniformity,
    "exp8-mi": exp8_mi,
    "exp9-convergence": exp9_convergence,
}


LATENT_ACCELERATIONS = (2.0, 4.0, 6.0, 8.0)


def default_plan(name: str, ws: Workspace) -> ExperimentPlan:
    """The axes each named experiment sweeps, bound to a workspace."""
    axes = {
        "exp1-accel-sweep": dict(models=("plain", "cascade"), accelerations=SWEEP_ACCELERATIONS),
        "exp2-transfer": dict(accelerations=(4.0, 6.0, 8.0), family="B"),
        "exp3-mask-swap": dict(accelerations=(4.0,), mask_kinds=("random", "equispaced")),
        "exp4-noise": dict(accelerations=(8.0,), snr_levels=NOISE_LEVELS),
        "exp6-alignment": dict(modes=("with_cl",), accelerations=LATENT_ACCELERATIONS),
        "exp7-uniformity": dict(modes=("with_cl",), accelerations=LATENT_ACCELERATIONS),
        "exp8-mi": dict(accelerations=LATENT_ACCELERATIONS),
        "exp9-convergence": dict(accelerations=tuple(ws.train_config("cascade", "without_cl").accelerations)),
    }
    if name not in axes:
        raise KeyError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")
    return ExperimentPlan(name, str(ws.dataset_path), seeds=(ws.seed,), out=str(ws.out / name), **axes[name])


def run_experiment(name: str, ws: Workspace, plan: ExperimentPlan | None = None) -> dict:
    if name not in EXPERIMENTS:
        raise KeyError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")
    plan = plan or default_plan(name, ws)
    ws.volumes()
    plan.validate()
    write_config(dataclasses.asdict(plan), Path(plan.out) / "plan.cfg")
    return EXPERIMENTS[name](ws, plan)


def workspace_from_config(out, seed: int, values: Mapping[str, str] | None = None, progress=None) -> Workspace:
    """Split ``synth.*``, ``pretrain.*`` and ``train.*`` keys of a flat config into a Workspace."""
    values = dict(values or {})
    groups: dict[str, dict[str, str]] = {"synth": {}, "pretrain": {}, "train": {}}
    for key, raw in values.items():
        prefix, _, name = key.partition(".")
        if prefix not in groups or not name:
            raise ConfigError(f"experiment config keys must start with synth., pretrain. or train.: {key!r}")
        groups[prefix][name] = raw
    synth = apply_overrides(SynthConfig(), groups["synth"])
    pre = apply_overrides(PretrainConfig(), groups["pretrain"])
    tr = apply_overrides(TrainConfig(), groups["train"])
    pre_over = {k: getattr(pre, k) for k in groups["pretrain"]}
    tr_over = {k: getattr(tr, k) for k in groups["train"]}
    return Workspace(Path(out), seed=seed, synth=synth, pretrain_overrides=pre_over, train_overrides=tr_over,
                     progress=progress)
