"""Command-line entry point.

Every subcommand is a pure function of its flags, input files and seed:
re-running with identical inputs produces byte-identical outputs.  No
timestamps or machine-specific data are ever written.  Exit codes: 0
success, 2 usage or configuration error, 3 data validation error, 4
internal invariant violation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .core import PartVocabulary, read_lpc, read_set, write_lpc, write_set
from .diffusion import (
    DiffusionTrainConfig,
    GlobalDenoiserParams,
    NoiseSchedule,
    PointDenoiserParams,
    diffusion_tensors,
    train_diffusion,
)
from .distances import distance_matrix, resolve_threads
from .errors import BadConfig, PcgenError, VocabMismatch
from .metrics import (
    MetricReport,
    coverage,
    miou,
    mmd,
    one_nna,
    part_averaged_metric,
)
from .distances import snap_score
from .nn import load_checkpoint, save_checkpoint
from .sampling import EditRequest, edit, generate, reconstruct_cloud
from .synth import (
    AttackConfig,
    ShapeFamilyConfig,
    recombine_attack,
    synth_set,
)
from .vae import VaeParams, VaeTrainConfig, train_vae

EVAL_METRICS = ("1nna", "cov", "mmd", "1nna-p", "cov-p", "mmd-p", "snap", "miou")


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _echo_config(outdir: Path, command: str, config: dict) -> None:
    _write_json(outdir / "run_config.json", {"command": command, "version": __version__, **config})


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_curve(path: Path, curve) -> None:
    if not curve:
        return
    cols = list(curve[0].keys())
    lines = [",".join(cols)]
    for row in curve:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in cols))
    path.write_text("\n".join(lines) + "\n")


# --- model directory I/O ------------------------------------------------------

def save_vae_model(outdir: Path, vae: VaeParams, vocab: PartVocabulary, config: dict):
    outdir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(vae.params(), outdir / "vae.slnk")
    _write_json(outdir / "vae_meta.json", {
        "model": vae.meta(),
        "part_names": list(vocab.names),
        "train_config": config,
        "version": __version__,
    })


def load_vae_model(modeldir: Path):
    meta = json.loads((modeldir / "vae_meta.json").read_text())
    vae = VaeParams.from_meta(meta["model"])
    vae.load(load_checkpoint(modeldir / "vae.slnk"))
    vocab = PartVocabulary(tuple(meta["part_names"]))
    return vae, vocab


def save_diffusion_model(outdir: Path, gd, pd, schedule, config: dict):
    outdir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(diffusion_tensors(gd, pd, schedule), outdir / "diffusion.slnk")
    _write_json(outdir / "diffusion_meta.json", {
        "global": {"d_z": gd.d_z, "width": gd.width, "n_blocks": len(gd.blocks)},
        "point": {"d_h": pd.d_h, "d_z": pd.d_z, "c": pd.c, "width": pd.width},
        "train_config": config,
        "version": __version__,
    })


def load_diffusion_model(modeldir: Path):
    meta = json.loads((modeldir / "diffusion_meta.json").read_text())
    tensors = load_checkpoint(modeldir / "diffusion.slnk")
    g = meta["global"]
    p = meta["point"]
    gd = GlobalDenoiserParams.create(g["d_z"], width=g["width"], n_blocks=g["n_blocks"])
    pd = PointDenoiserParams.create(p["d_h"], p["d_z"], p["c"], width=p["width"])
    gd.load(tensors)
    pd.load(tensors)
    schedule = NoiseSchedule.from_betas(tensors["schedule.betas"])
    return gd, pd, schedule


# --- subcommands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.config:
        cfg = ShapeFamilyConfig.from_json(json.loads(Path(args.config).read_text()))
    else:
        ppp = tuple(int(x) for x in args.points_per_part.split(","))
        cfg = ShapeFamilyConfig(
            family=args.family, d=args.d, points_per_part=ppp,
            rho=args.rho, pose_jitter=args.pose_jitter, seed=args.seed,
        )
    out = Path(args.output)
    pcs = synth_set(cfg, args.count)
    write_set(pcs, out, fmt=args.format)
    _echo_config(out, "synth", {"count": args.count, **cfg.to_json()})
    print(f"wrote {len(pcs)} clouds to {out}")
    return 0


def cmd_attack(args) -> int:
    donors = read_set(args.donors)
    if args.config:
        cfg = AttackConfig.from_json(json.loads(Path(args.config).read_text()))
    else:
        cfg = AttackConfig(
            mode=args.mode, count=args.count, seed=args.seed,
            contact_points=args.contact_points,
        )
    out = Path(args.output)
    pcs = recombine_attack(donors, cfg)
    write_set(pcs, out, fmt=args.format)
    _echo_config(out, "attack", {"donors": str(args.donors), **cfg.to_json()})
    print(f"wrote {len(pcs)} recombined clouds to {out}")
    return 0


def cmd_train_vae(args) -> int:
    data = read_set(args.data)
    cfg = VaeTrainConfig(
        epochs=args.epochs, lr=args.lr, lambda_z=args.lambda_z,
        lambda_h=args.lambda_h, seed=args.seed,
        semi_supervised=args.semi_supervised,
        labeled_fraction=args.labeled_fraction,
    )
    vae = VaeParams.create(
        d=data[0].d, c=data.vocab.c, d_z=args.d_z, d_h=args.d_h,
        hidden=args.hidden, seed=args.seed,
    )
    vae, curve = train_vae(vae, data, cfg)
    out = Path(args.output)
    save_vae_model(out, vae, data.vocab, cfg.to_json())
    _write_curve(out / "vae_curve.csv", curve)
    print(f"trained VAE for {args.epochs} epochs; final loss {curve[-1]['total']:.6g}")
    return 0


def cmd_train_diffusion(args) -> int:
    data = read_set(args.data)
    modeldir = Path(args.model)
    if not (modeldir / "vae.slnk").exists():
        raise BadConfig(f"no VAE checkpoint in {modeldir}; run train-vae first")
    vae, vocab = load_vae_model(modeldir)
    if vocab.c != data.vocab.c:
        raise VocabMismatch(
            f"model has {vocab.c} parts, data has {data.vocab.c}"
        )
    cfg = DiffusionTrainConfig(
        steps=args.steps, beta_start=args.beta_start, beta_end=args.beta_end,
        lambda_seg=args.lambda_seg, epochs=args.epochs, lr=args.lr,
        width=args.width, global_width=args.global_width, seed=args.seed,
        semi_supervised=args.semi_supervised,
        labeled_fraction=args.labeled_fraction,
    )
    gd, pd, schedule, curve = train_diffusion(vae, data, cfg)
    out = Path(args.output)
    save_diffusion_model(out, gd, pd, schedule, cfg.to_json())
    _write_curve(out / "diffusion_curve.csv", curve)
    print(
        f"trained denoisers for {args.epochs} epochs; "
        f"final noise loss {curve[-1]['point_noise']:.6g}"
    )
    return 0


def cmd_generate(args) -> int:
    modeldir = Path(args.model)
    vae, vocab = load_vae_model(modeldir)
    gd, pd, schedule = load_diffusion_model(modeldir)
    pcs = generate(
        vae, gd, pd, schedule, vocab, n=args.n, count=args.count,
        seed=args.seed, soft_labels=args.soft_labels,
    )
    out = Path(args.output)
    write_set(pcs, out, fmt=args.format)
    _echo_config(out, "generate", {
        "model": str(modeldir), "count": args.count, "n": args.n,
        "seed": args.seed, "soft_labels": args.soft_labels,
        "checkpoint_sha256": _sha256(modeldir / "diffusion.slnk"),
    })
    print(f"generated {len(pcs)} clouds into {out}")
    return 0


def cmd_reconstruct(args) -> int:
    vae, vocab = load_vae_model(Path(args.model))
    cloud = read_lpc(args.input, vocab)
    out = Path(args.output)
    write_lpc(reconstruct_cloud(vae, cloud), out)
    print(f"wrote reconstruction to {out}")
    return 0


def cmd_edit(args) -> int:
    modeldir = Path(args.model)
    vae, vocab = load_vae_model(modeldir)
    _, pd, schedule = load_diffusion_model(modeldir)
    cloud = read_lpc(args.input, vocab)
    request = EditRequest(
        cloud=cloud, freeze_part=args.freeze_part, tau=args.tau, seed=args.seed
    )
    edited = edit(vae, pd, schedule, request)
    out = Path(args.output)
    write_lpc(edited, out)
    _write_json(out.with_suffix(".provenance.json"), {
        "command": "edit",
        "input": str(args.input),
        "freeze_part": args.freeze_part,
        "tau": args.tau,
        "seed": args.seed,
        "checkpoint_sha256": _sha256(modeldir / "diffusion.slnk"),
        "version": __version__,
    })
    print(f"wrote edited cloud to {out}")
    return 0


def _metric_rows(metrics, real, gen, distance, threads, emd_cap, save_dir):
    rows = []
    plain = [m for m in metrics if m in ("1nna", "cov", "mmd")]
    blocks = {}

    def block(a, b, key):
        if key not in blocks:
            blocks[key] = distance_matrix(a, b, distance, threads=threads, emd_cap=emd_cap)
        return blocks[key]

    for m in plain:
        if m == "1nna":
            rr = block(real, real, "rr")
            rg = block(real, gen, "rg")
            gg = block(gen, gen, "gg")
            value = one_nna(rr.values, rg.values, gg.values)
        else:
            gr = block(gen, real, "gr")
            value = coverage(gr.values) if m == "cov" else mmd(gr.values)
        rows.append((m, distance, value))
    for m in metrics:
        if m.endswith("-p"):
            value = part_averaged_metric(m[:-2], real, gen)
            rows.append((m, "cd-part", value))
        elif m == "snap":
            scores = [snap_score(c) for c in gen]
            rows.append((m, "cd-subset", float(np.mean(scores))))
        elif m == "miou":
            if len(real) != len(gen):
                raise BadConfig(
                    "miou pairs clouds by index and needs equal set sizes"
                )
            vals = [
                miou(g.labels, r.labels, real.vocab.c)
                for r, g in zip(real, gen)
            ]
            rows.append((m, "labels", float(np.mean(vals))))
    if save_dir is not None:
        save_dir.mkdir(parents=True, exist_ok=True)
        for key, m in blocks.items():
            m.save(save_dir / f"{key}.json")
    return rows


def cmd_evaluate(args) -> int:
    real = read_set(args.real)
    gen = read_set(args.gen)
    if real.vocab.c != gen.vocab.c:
        raise VocabMismatch(
            f"sets disagree on part count: {real.vocab.c} vs {gen.vocab.c}"
        )
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    for m in metrics:
        if m not in EVAL_METRICS:
            raise BadConfig(f"unknown metric {m!r}; known: {', '.join(EVAL_METRICS)}")
    threads = resolve_threads(args.threads)
    save_dir = Path(args.save_distances) if args.save_distances else None
    rows = _metric_rows(
        metrics, real, gen, args.distance, threads, args.emd_cap, save_dir
    )
    reports = [
        MetricReport(
            metric=m, distance=dist, value=v,
            r_size=len(real), g_size=len(gen), seed=args.seed,
        )
        for m, dist, v in rows
    ]
    payload = {
        "reports": [r.to_json() for r in reports],
        "config": {
            "real": str(args.real), "gen": str(args.gen),
            "distance": args.distance, "metrics": metrics,
            "threads": threads, "seed": args.seed, "emd_cap": args.emd_cap,
        },
        "version": __version__,
    }
    if args.output:
        _write_json(args.output, payload)
    for r in reports:
        print(r.render())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcgen",
        description="Labeled point-cloud generation and part-aware evaluation",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a procedural labeled shape set")
    p.add_argument("--family", default="stick-ball", choices=("stick-ball", "winged-body"))
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--points-per-part", default="128,128")
    p.add_argument("--rho", type=float, default=0.9)
    p.add_argument("--pose-jitter", type=float, default=0.1)
    p.add_argument("--config", help="ShapeFamilyConfig JSON (overrides flags)")
    p.add_argument("--format", default="lpc", choices=("lpc", "lpcs"))
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("attack", help="recombine parts of donor clouds")
    p.add_argument("--donors", required=True)
    p.add_argument("--mode", default="centroid-snap", choices=("none", "centroid-snap"))
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--contact-points", type=int, default=30)
    p.add_argument("--config", help="AttackConfig JSON (overrides flags)")
    p.add_argument("--format", default="lpc", choices=("lpc", "lpcs"))
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("train-vae", help="stage 1: train the conditional VAE")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lambda-z", type=float, default=1e-3)
    p.add_argument("--lambda-h", type=float, default=1e-3)
    p.add_argument("--d-z", type=int, default=16)
    p.add_argument("--d-h", type=int, default=4)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--semi-supervised", action="store_true")
    p.add_argument("--labeled-fraction", type=float, default=1.0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_train_vae)

    p = sub.add_parser("train-diffusion", help="stage 2: train both denoisers")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="directory with the stage-1 checkpoint")
    p.add_argument("--steps", "-T", type=int, default=200)
    p.add_argument("--beta-start", type=float, default=1e-4)
    p.add_argument("--beta-end", type=float, default=0.05)
    p.add_argument("--lambda-seg", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=400)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--width", type=int, default=96)
    p.add_argument("--global-width", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--semi-supervised", action="store_true")
    p.add_argument("--labeled-fraction", type=float, default=1.0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_train_diffusion)

    p = sub.add_parser("generate", help="sample labeled clouds from a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--n", type=int, default=256, help="points per cloud")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--soft-labels", action="store_true",
                   help="condition the decoder on smoothed probabilities")
    p.add_argument("--format", default="lpc", choices=("lpc", "lpcs"))
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("reconstruct", help="VAE round trip of one cloud")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("edit", help="regenerate all parts except a frozen one")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--freeze-part", type=int, required=True)
    p.add_argument("--tau", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("evaluate", help="set-level metrics between two cloud sets")
    p.add_argument("--real", required=True)
    p.add_argument("--gen", required=True)
    p.add_argument("--distance", default="pcd", choices=("cd", "emd", "pcd"))
    p.add_argument("--metrics", default="1nna,cov,mmd")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--emd-cap", type=int, default=256)
    p.add_argument("--save-distances", help="directory for distance-matrix JSON dumps")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PcgenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # internal invariant violation
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
