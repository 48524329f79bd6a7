"""Command-line interface.

Exit codes:
    0  success
    1  unexpected internal error
    2  bad command-line usage
    3  missing input file
    4  malformed or invalid configuration
    5  dataset checksum, version or format error
    6  checkpoint format error or checkpoint/model mismatch
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import analysis, experiments, plotting
from .config import PretrainConfig, SynthConfig, TrainConfig
from .contrastive import collect_latents, pretrain
from .experiments import METRIC_COLUMNS, write_csv, write_record
from .models import DCConfig, FeatureExtractor, build_reconstructor
from .phantoms import (DatasetError, Volume, make_undersampled_pair, read_dataset, select,
                       synthesize_dataset, volume_coils, write_dataset)
from .serialization import (CheckpointError, ConfigError, apply_overrides, config_path_for, format_value,
                            load_checkpoint, read_config, save_checkpoint, write_config)
from .training import infer, train_reconstructor

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_MISSING, EXIT_CONFIG, EXIT_DATASET, EXIT_CHECKPOINT = range(7)

logger = logging.getLogger("clmri")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _snr(text: str) -> float | None:
    if text.lower() in ("inf", "none", ""):
        return None
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or 'inf', got {text!r}") from None


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _load_config(cls, args, flag_values: dict):
    """Defaults <- --config file <- explicit flags."""
    cfg = cls()
    if getattr(args, "config", None):
        cfg = apply_overrides(cfg, read_config(_require(args.config, "config file")))
    flags = {k: v for k, v in flag_values.items() if v is not None}
    cfg = replace(cfg, **flags)
    if hasattr(cfg, "validate"):
        try:
            cfg.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return cfg


def _snapshot(cfg) -> dict[str, str]:
    return experiments._snapshot(cfg)


def _model_for(cfg: TrainConfig):
    return build_reconstructor(cfg.model, seed=cfg.seed, dc=DCConfig(cfg.dc_lambda, cfg.hard_dc))


def _load_extractor(path) -> FeatureExtractor:
    T = FeatureExtractor()
    _load_state(T, path)
    return T


def _load_state(model, path) -> None:
    state = load_checkpoint(_require(path, "checkpoint"))
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from None


# -- commands ------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _load_config(SynthConfig, args, {"seed": args.seed})
    vols = synthesize_dataset(cfg.seed, (cfg.size, cfg.size), cfg.num_slices, cfg.counts())
    manifest = write_dataset(vols, args.out)
    write_config(_snapshot(cfg), config_path_for(args.out))
    print(f"wrote {len(manifest.entries)} volumes to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _load_config(PretrainConfig, args, {"dataset": args.dataset, "seed": args.seed, "epochs": args.epochs,
                                              "accelerations": args.accel, "mask_kind": args.mask})
    vols = read_dataset(_require(cfg.dataset, "dataset"))
    T = FeatureExtractor(seed=cfg.seed)
    _, history = pretrain(T, vols, cfg, progress=_progress(args, "pretrain step {0} epoch {1} loss {2:.6f}"))
    save_checkpoint(T.state_dict(), args.out, _snapshot(cfg))
    write_csv(Path(str(args.out) + ".history.csv"), [{"step": s, "epoch": e, "loss": v} for s, e, v in history],
              ["step", "epoch", "loss"])
    last = history[-1][2] if history else float("nan")
    print(f"pretrained extractor saved to {args.out} (final loss {last:.6f})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(TrainConfig, args, {"dataset": args.dataset, "seed": args.seed, "epochs": args.epochs,
                                           "accelerations": args.accel, "mask_kind": args.mask, "mode": args.mode,
                                           "model": args.model, "extractor": args.extractor})
    vols = read_dataset(_require(cfg.dataset, "dataset"))
    T = _load_extractor(cfg.extractor) if cfg.mode == "with_cl" else None
    G = _model_for(cfg)
    G, record = train_reconstructor(G, T, vols, cfg,
                                    progress=_progress(args, "train epoch {0} train {1:.6f} val {2:.6f}"))
    save_checkpoint(G.state_dict(), args.out, _snapshot(cfg))
    write_record(Path(str(args.out) + ".record.csv"), record)
    print(f"reconstructor saved to {args.out} (final val loss {record.val_loss[-1] if record.val_loss else record.initial_val_loss:.6f})")
    return EXIT_OK


def _reconstructor_from_checkpoint(path):
    cfg = apply_overrides(TrainConfig(), read_config(_require(config_path_for(path), "checkpoint config")))
    G = _model_for(cfg)
    _load_state(G, path)
    T = _load_extractor(cfg.extractor) if cfg.mode == "with_cl" else None
    return cfg, G, T


def cmd_reconstruct(args) -> int:
    cfg, G, T = _reconstructor_from_checkpoint(args.checkpoint)
    vols = select(read_dataset(_require(args.dataset, "dataset")), family=args.family or cfg.family, split=args.split)
    acc = args.accel[0] if args.accel else 8.0
    mask_kind = args.mask or "random"
    seed = cfg.seed if args.seed is None else args.seed
    out = []
    for vol in vols:
        pair = make_undersampled_pair(vol, acc, mask_kind, volume_coils(vol, cfg.num_coils, cfg.coil_seed), seed,
                                      args.snr_db)
        recon = np.stack([infer(T, G, pair.zero_filled[s], pair.kspace[s], pair.mask) for s in range(vol.num_slices)])
        out.append(Volume(vol.volume_id, vol.family, vol.split, recon.astype(np.complex64)))
    write_dataset(out, args.out)
    write_config({"checkpoint": str(args.checkpoint), "model": cfg.model, "mode": cfg.mode, "acceleration": acc,
                  "mask_kind": mask_kind, "snr_db": args.snr_db, "seed": seed, "num_coils": cfg.num_coils,
                  "coil_seed": cfg.coil_seed}, config_path_for(args.out))
    print(f"wrote {len(out)} reconstructed volumes to {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    """Per-slice metrics of a reconstruction file against the fully sampled magnitudes."""
    recon = {v.volume_id: v for v in read_dataset(_require(args.recon, "reconstruction file"))}
    truth = {v.volume_id: v for v in read_dataset(_require(args.dataset, "dataset"))}
    meta = {}
    if config_path_for(args.recon).exists():
        meta = read_config(config_path_for(args.recon))
    rows = []
    for vid, rv in recon.items():
        if vid not in truth:
            raise DatasetError(f"volume {vid} is not in {args.dataset}")
        gt = np.abs(truth[vid].slices.astype(np.complex128))
        est = np.abs(rv.slices.astype(np.complex128))
        if gt.shape != est.shape:
            raise DatasetError(f"volume {vid}: shape {est.shape} does not match ground truth {gt.shape}")
        peak = float(gt.max())
        for s in range(gt.shape[0]):
            rows.append({"volume_id": vid, "slice": s, "model": meta.get("model", "none"),
                         "mode": meta.get("mode", "none"), "acceleration": float(meta.get("acceleration", 1.0)),
                         "mask_kind": meta.get("mask_kind", "none"), "snr_db": _snr(meta.get("snr_db", "")),
                         "nmse": analysis.nmse(est[s], gt[s]), "psnr": analysis.psnr(est[s], gt[s], peak),
                         "ssim": analysis.ssim(est[s], gt[s], peak)})
    out = Path(args.out)
    write_csv(out, rows, METRIC_COLUMNS)
    summary = analysis.summarize(rows, ["model", "mode", "acceleration", "mask_kind", "snr_db"])
    write_csv(out.with_name(out.stem + ".summary.csv"), summary)
    for s in summary:
        print(f"{s['model']} {s['mode']} {s['acceleration']:g}X: NMSE {s['nmse_mean']:.5f} "
              f"PSNR {s['psnr_mean']:.3f} SSIM {s['ssim_mean']:.4f} ({s['n']} slices)")
    return EXIT_OK


def cmd_analyze(args) -> int:
    """Latent diagnostics of an extractor checkpoint versus a freshly initialized one."""
    T = _load_extractor(args.extractor)
    pcfg = PretrainConfig()
    ecfg_path = config_path_for(args.extractor)
    if ecfg_path.exists():
        pcfg = apply_overrides(pcfg, read_config(ecfg_path))
    seed = pcfg.seed if args.seed is None else args.seed
    accs = args.accel or pcfg.accelerations
    vols = select(read_dataset(_require(args.dataset, "dataset")), family=args.family or pcfg.family, split=args.split)
    if not vols:
        raise ConfigError(f"no volumes in split {args.split}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kw = dict(num_coils=pcfg.num_coils, coil_seed=pcfg.coil_seed, seed=seed, mask_kind=args.mask or pcfg.mask_kind)
    z1, x = collect_latents(T, vols, accs, **kw)
    z0, _ = collect_latents(FeatureExtractor(seed=pcfg.seed), vols, accs, **kw)
    hi = max(d.max() for z in (z0, z1) for d in analysis.pair_distances(z, accs).values())
    edges = np.linspace(0.0, hi * (1 + 1e-9), 31)
    h0 = analysis.pair_distance_histogram(z0, accs, edges)
    h1 = analysis.pair_distance_histogram(z1, accs, edges)
    gt = experiments._gt_magnitude(x.shape, vols, pcfg.num_coils, pcfg.coil_seed)
    rows = []
    for key in h0:
        rows.append({"key": key, "num_pairs": int(h0[key].counts.sum()), "mean_distance_init": h0[key].mean,
                     "mean_distance": h1[key].mean,
                     "alignment_init": analysis.alignment(experiments._pairs(z0, accs, key)),
                     "alignment": analysis.alignment(experiments._pairs(z1, accs, key))})
    write_csv(out / "pair_distances.csv", rows)
    plotting.pair_histograms(h0, h1, out / "histograms.svg")
    flat = lambda z: z.reshape((-1,) + z.shape[2:])  # noqa: E731
    uni = [{"stage": "init", "uniformity": analysis.uniformity(flat(z0))},
           {"stage": "checkpoint", "uniformity": analysis.uniformity(flat(z1))}]
    write_csv(out / "uniformity.csv", uni)
    zm, xm = analysis.latent_magnitude(z1), analysis.latent_magnitude(x)
    mi = [{"acceleration": a, "mi_latent": analysis.mutual_info_hist(zm[:, q], gt),
           "mi_zero_filled": analysis.mutual_info_hist(xm[:, q], gt)} for q, a in enumerate(accs)]
    write_csv(out / "mi.csv", mi)
    plotting.grouped_bars([f"{a:g}X" for a in accs], {"zero-filled": [r["mi_zero_filled"] for r in mi],
                                                      "latent": [r["mi_latent"] for r in mi]},
                          out / "mi.svg", "MI with ground truth (nats)")
    for r in rows:
        print(f"{r['key']}: mean distance {r['mean_distance_init']:.4f} -> {r['mean_distance']:.4f}")
    print(f"uniformity {uni[0]['uniformity']:.4f} -> {uni[1]['uniformity']:.4f}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    values = read_config(_require(args.config, "config file")) if args.config else {}
    seed = 0 if args.seed is None else args.seed
    ws = experiments.workspace_from_config(args.out, seed, values,
                                           progress=None if args.quiet else (lambda m: print(m, flush=True)))
    if args.epochs is not None:
        ws.train_overrides["epochs"] = args.epochs
    if args.pretrain_epochs is not None:
        ws.pretrain_overrides["epochs"] = args.pretrain_epochs
    snapshot = {"experiment": args.name, "seed": seed}
    snapshot.update({f"synth.{k}": v for k, v in _snapshot(ws.synth).items()})
    snapshot.update({f"pretrain.{k}": format_value(v) for k, v in ws.pretrain_overrides.items()})
    snapshot.update({f"train.{k}": format_value(v) for k, v in ws.train_overrides.items()})
    (ws.out / args.name).mkdir(parents=True, exist_ok=True)
    write_config(snapshot, ws.out / args.name / "run.cfg")
    experiments.run_experiment(args.name, ws)
    print(f"{args.name}: outputs in {ws.out / args.name}")
    return EXIT_OK


def _progress(args, fmt: str):
    if getattr(args, "quiet", False):
        return None
    return lambda *vals: print(fmt.format(*vals), flush=True)


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clmri", description="Contrastive feature extraction for undersampled MRI.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help: str):
        sp.add_argument("--config", help="plain-text key=value config file")
        sp.add_argument("--seed", type=int, help="random seed")
        sp.add_argument("--out", required=True, help=out_help)
        sp.add_argument("--quiet", action="store_true", help="suppress progress lines")

    sp = sub.add_parser("synth", help="synthesize a phantom dataset")
    common(sp, "output CKV1 file")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("pretrain", help="contrastive pretraining of the feature extractor")
    common(sp, "output checkpoint")
    sp.add_argument("--dataset")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--accel", type=_floats, help="comma-separated accelerations")
    sp.add_argument("--mask", choices=["random", "equispaced"])
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("train", help="train a reconstructor")
    common(sp, "output checkpoint")
    sp.add_argument("--dataset")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--accel", type=_floats, help="comma-separated training accelerations")
    sp.add_argument("--mask", choices=["random", "equispaced"])
    sp.add_argument("--mode", choices=["with_cl", "without_cl"])
    sp.add_argument("--model", choices=["plain", "cascade"])
    sp.add_argument("--extractor", help="pretrained extractor checkpoint (with_cl)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("reconstruct", help="reconstruct undersampled test volumes")
    common(sp, "output CKV1 file of magnitude reconstructions")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--checkpoint", required=True, help="reconstructor checkpoint")
    sp.add_argument("--accel", type=_floats)
    sp.add_argument("--mask", choices=["random", "equispaced"])
    sp.add_argument("--snr-db", type=_snr, default=None)
    sp.add_argument("--family", choices=["A", "B"])
    sp.add_argument("--split", default="test", choices=["train", "val", "test"])
    sp.set_defaults(func=cmd_reconstruct)

    sp = sub.add_parser("evaluate", help="per-slice NMSE/PSNR/SSIM of reconstructions")
    common(sp, "output per-slice CSV")
    sp.add_argument("--dataset", required=True, help="ground-truth dataset")
    sp.add_argument("--recon", required=True, help="reconstruction CKV1 file")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("analyze", help="latent diagnostics of an extractor checkpoint")
    common(sp, "output directory")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--extractor", required=True)
    sp.add_argument("--accel", type=_floats)
    sp.add_argument("--mask", choices=["random", "equispaced"])
    sp.add_argument("--family", choices=["A", "B"])
    sp.add_argument("--split", default="test", choices=["train", "val", "test"])
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("experiment", help="run a named experiment plan")
    sp.add_argument("name", choices=sorted(experiments.EXPERIMENTS))
    common(sp, "workspace directory (artifacts are cached and reused)")
    sp.add_argument("--epochs", type=int, help="reconstructor training epochs")
    sp.add_argument("--pretrain-epochs", type=int)
    sp.set_defaults(func=cmd_experiment)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        code, msg = EXIT_MISSING, str(exc)
    except ConfigError as exc:
        code, msg = EXIT_CONFIG, str(exc)
    except DatasetError as exc:
        code, msg = EXIT_DATASET, str(exc)
    except CheckpointError as exc:
        code, msg = EXIT_CHECKPOINT, str(exc)
    except (ValueError, KeyError) as exc:
        code, msg = EXIT_CONFIG, str(exc)
    except Exception as exc:  # noqa: BLE001 - last-resort one-line diagnostic
        code, msg = EXIT_INTERNAL, f"{type(exc).__name__}: {exc}"
    print(f"clmri {args.command}: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
