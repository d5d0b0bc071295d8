"""Command-line entry point for scripted, reproducible runs.

Exit codes: 0 success, 2 usage error, 3 numeric failure (non-finite loss),
4 I/O or validation failure. Every run writes a manifest recording the
command, config snapshot, seed, input hashes, outputs, and wall-clock;
identical runs differ only in the timestamp fields.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, nn
from .attention import export_maps
from .errors import (ParseError, ResourceLimitError, ShapeError, StateError,
                     StructureError, TrainingDivergence, ValidationError)
from .mesh import (Icosphere, QuadMesh, TriMesh, build_icosphere,
                   catmull_clark, load_mesh, save_mesh)
from .model import (PROFILES, SiTConfig, init_model, load_checkpoint,
                    parameter_count, reset_head, save_checkpoint)
from .patching import (build_ico_patch_table, build_quad_patch_table,
                       extract_sequence, load_pairing, save_patch_table)
from .resample import (FeatureField, apply_resample, build_resample_table,
                       rotation_matrix, save_resample_table)
from .train import (Dataset, TrainConfig, evaluate, gen_synthetic,
                    pretrain_mpp, train_loop, write_metrics)

FORMAT_VERSIONS = {"SURFMESH": "v1", "PATCHTABLE": "v1", "RESAMPLE": "v1",
                   "SITCHECKPOINT": "v1"}


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(dest, command: str, args: argparse.Namespace,
                    inputs: list, outputs: list, started: float,
                    extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "config": {k: v for k, v in sorted(vars(args).items())
                   if k != "func" and v is not None},
        "seed": getattr(args, "seed", None),
        "input_hashes": {str(p): _sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "wall_clock_s": time.time() - started,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "versions": {"surfacevit": __version__, **FORMAT_VERSIONS},
    }
    if extra:
        manifest.update(extra)
    with open(dest, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _out_dir(args) -> Path:
    d = args.out_dir or os.environ.get("SURFACEVIT_OUT", ".")
    path = Path(d)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _parse_kv_file(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ParseError(f"{path}:{lineno}: expected 'key = value'")
            out[key.strip()] = val.strip()
    return out


_MODEL_FIELDS = {f: t for f, t in [
    ("layers", int), ("heads", int), ("dim", int), ("mlp", int),
    ("patches", int), ("patch_vertices", int), ("channels", int),
    ("dropout_embed", float), ("dropout_attn", float), ("dropout_ffn", float),
    ("head_kind", str), ("n_classes", int), ("head_hidden", int),
    ("deconfound", lambda s: s in ("1", "true", "True")),
]}


def _resolve_model_config(args) -> SiTConfig:
    """--config is a profile name or a key=value file (optionally naming a
    base profile); --set key=value flags override either."""
    spec = args.config
    overrides: dict[str, str] = {}
    if spec in PROFILES:
        base = asdict(PROFILES[spec])
    elif Path(spec).exists():
        kv = _parse_kv_file(spec)
        profile = kv.pop("profile", "sit-tiny-ico")
        if profile not in PROFILES:
            raise ValidationError(f"unknown profile {profile!r}")
        base = asdict(PROFILES[profile])
        overrides.update(kv)
    else:
        raise ValidationError(f"--config {spec!r}: not a profile "
                              f"({', '.join(PROFILES)}) or a file")
    for item in getattr(args, "set", None) or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ValidationError(f"--set {item!r}: expected key=value")
        overrides[key.strip()] = val.strip()
    for key, val in overrides.items():
        if key not in _MODEL_FIELDS:
            raise ValidationError(f"unknown model config key {key!r}")
        base[key] = _MODEL_FIELDS[key](val)
    return SiTConfig(**base)


def _train_config(args, loss: str) -> TrainConfig:
    return TrainConfig(
        optimizer=args.optimizer, lr=args.lr, momentum=args.momentum,
        batch_size=args.batch_size, iterations=args.iterations,
        augment=args.augment, angle_cap=args.angle_cap,
        sampler=args.sampler, seed=args.seed, loss=loss,
        mpp_ratio=args.mpp_ratio,
        checkpoint_interval=args.checkpoint_interval)


def _synthetic_dataset(args, config: SiTConfig) -> Dataset:
    if not args.synthetic:
        raise ValidationError("this build feeds training from --synthetic N "
                              "(restricted imaging datasets are out of scope)")
    ico = build_icosphere(args.ico_order)
    coarse = args.coarse_order if args.coarse_order is not None \
        else args.ico_order - 4
    rng = nn.substream(args.data_seed, 0)
    task = ("classification" if config.head_kind == "classification"
            else "regression")
    ds = gen_synthetic(ico, args.synthetic, rng, channels=config.channels,
                       coarse_order=coarse, task=task)
    n, v = ds.table.rows.shape
    if (n, v) != (config.patches, config.patch_vertices):
        raise ValidationError(
            f"synthetic patch table ({n}, {v}) does not match model config "
            f"({config.patches}, {config.patch_vertices}); adjust --ico-order/"
            f"--coarse-order or the config")
    return ds


# ---------------------------------------------------------------------------
# subcommands


def cmd_icosphere(args) -> int:
    started = time.time()
    ico = build_icosphere(args.order)
    save_mesh(ico.mesh, args.out)
    print(f"icosphere order {args.order}: {ico.vertex_count} vertices, "
          f"{ico.face_count} faces -> {args.out}")
    _write_manifest(str(args.out) + ".manifest.json", "icosphere", args,
                    [], [args.out], started)
    return 0


def cmd_patch(args) -> int:
    started = time.time()
    inputs = []
    if args.control:
        control = load_mesh(args.control)
        if not isinstance(control, QuadMesh):
            raise ValidationError(f"{args.control}: expected a quad mesh")
        inputs.append(args.control)
        fine = catmull_clark(catmull_clark(control))
        pairing = None
        if args.pairs:
            pairing = load_pairing(args.pairs)
            inputs.append(args.pairs)
        table = build_quad_patch_table(control, fine, pairing)
    else:
        if args.fine is None or args.coarse is None:
            raise ValidationError("need --fine and --coarse orders, or --control")
        table = build_ico_patch_table(build_icosphere(args.fine),
                                      build_icosphere(args.coarse))
    save_patch_table(table, args.out)
    print(f"patch table: N={table.patch_count} V={table.vertices_per_patch} "
          f"-> {args.out}")
    _write_manifest(str(args.out) + ".manifest.json", "patch", args,
                    inputs, [args.out], started)
    return 0


def _parse_rotate(spec: str) -> tuple[str, float]:
    axis, sep, deg = spec.partition(":")
    if not sep:
        raise ValidationError(f"--rotate {spec!r}: expected axis:degrees")
    return axis, float(deg)


def cmd_resample(args) -> int:
    started = time.time()
    src = load_mesh(args.src)
    dst = load_mesh(args.dst)
    fld_mesh = load_mesh(args.field)
    for name, m in (("src", src), ("dst", dst), ("field", fld_mesh)):
        if not isinstance(m, TriMesh):
            raise ValidationError(f"--{name}: expected a tri mesh")
    if not fld_mesh.channels:
        raise ValidationError(f"{args.field}: no channels to resample")
    if fld_mesh.vertex_count != src.vertex_count:
        raise ValidationError("field vertex count != src mesh")
    lookup = dst.vertices.astype(np.float64)
    lookup /= np.linalg.norm(lookup, axis=1, keepdims=True)
    if args.rotate:
        axis, deg = _parse_rotate(args.rotate)
        lookup = lookup @ rotation_matrix(axis, deg)  # == (R^-1 v), R^-1=R.T
    from .resample import _build_table
    table = _build_table(src, lookup)
    out_field = apply_resample(FeatureField.from_mesh(fld_mesh), table)
    save_mesh(dst.with_channels(out_field.as_channels()), args.out)
    outputs = [args.out]
    if args.table_out:
        save_resample_table(table, args.table_out)
        outputs.append(args.table_out)
    print(f"resampled {out_field.channel_count} channels onto "
          f"{out_field.vertex_count} vertices -> {args.out}")
    _write_manifest(str(args.out) + ".manifest.json", "resample", args,
                    [args.src, args.dst, args.field], outputs, started)
    return 0


def cmd_info(args) -> int:
    config = _resolve_model_config(args)
    total = parameter_count(config, include_mpp=args.with_mpp)
    print(f"config: {config}")
    print(f"parameters: {total} ({total / 1e6:.2f}M)")
    return 0


def _run_training(args, mpp: bool) -> int:
    started = time.time()
    out = _out_dir(args)
    config = _resolve_model_config(args)
    tcfg = _train_config(args, "mpp" if mpp else args.loss)
    dataset = _synthetic_dataset(args, config)
    rng = nn.rng_from_seed(args.seed)
    if args.init_from:
        model = load_checkpoint(args.init_from)
        if args.reset_head:
            reset_head(model, rng)
    else:
        model = init_model(config, rng)
    save_checkpoint(model, out / "init")
    stem = out / "model"
    runner = pretrain_mpp if mpp else train_loop
    model, history = runner(model, dataset, tcfg, checkpoint_stem=str(stem))
    np.savetxt(out / "loss_history.txt", history, fmt="%r")
    metrics = [{"metric": "final_loss", "value": history[-1],
                "split": "train", "seed": args.seed},
               {"metric": "mean_last_decile",
                "value": float(np.mean(history[-max(1, len(history) // 10):])),
                "split": "train", "seed": args.seed}]
    write_metrics(out / "metrics.jsonl", metrics)
    print(f"{'pretrain' if mpp else 'train'}: {tcfg.iterations} iterations, "
          f"final loss {history[-1]:.6g} -> {out}")
    inputs = [args.init_from + ".manifest"] if args.init_from else []
    _write_manifest(out / "run_manifest.json",
                    "pretrain" if mpp else "train", args, inputs,
                    [stem.with_suffix(".manifest"), stem.with_suffix(".bin"),
                     out / "loss_history.txt", out / "metrics.jsonl"],
                    started)
    return 0


def cmd_train(args) -> int:
    return _run_training(args, mpp=False)


def cmd_pretrain(args) -> int:
    return _run_training(args, mpp=True)


def cmd_eval(args) -> int:
    started = time.time()
    model = load_checkpoint(args.checkpoint)
    dataset = _synthetic_dataset(args, model.config)
    metrics = evaluate(model, dataset)
    records = [{"metric": k, "value": v, "split": args.split,
                "seed": args.seed} for k, v in sorted(metrics.items())]
    write_metrics(args.metrics_out, records)
    for rec in records:
        print(f"{rec['metric']}: {rec['value']}")
    _write_manifest(str(args.metrics_out) + ".manifest.json", "eval", args,
                    [args.checkpoint + ".manifest", args.checkpoint + ".bin"],
                    [args.metrics_out], started)
    return 0


def cmd_attend(args) -> int:
    started = time.time()
    model = load_checkpoint(args.checkpoint)
    fld_mesh = load_mesh(args.field)
    if not isinstance(fld_mesh, TriMesh) or not fld_mesh.channels:
        raise ValidationError(f"{args.field}: expected a tri mesh with channels")
    # infer icosphere orders from the field size and the model's patch count
    v = fld_mesh.vertex_count
    order = round(np.log((v - 2) / 10) / np.log(4))
    if 10 * 4 ** order + 2 != v:
        raise ValidationError(f"field vertex count {v} is not an icosphere size")
    coarse = round(np.log(model.config.patches / 20) / np.log(4))
    if 20 * 4 ** coarse != model.config.patches:
        raise ValidationError("model patch count is not an icosphere face count")
    fine_ico = build_icosphere(order)
    table = build_ico_patch_table(fine_ico, build_icosphere(coarse))
    field = FeatureField.from_mesh(fld_mesh)
    seq = extract_sequence(field, table)
    heads = ([int(h) for h in args.heads.split(",")] if args.heads else None)
    out = _out_dir(args)
    manifest = export_maps(model, seq, table, fine_ico.mesh, out, heads=heads)
    print(f"attention maps ({len(manifest['channels'])} channels) -> {out}")
    _write_manifest(out / "run_manifest.json", "attend", args,
                    [args.field, args.checkpoint + ".manifest",
                     args.checkpoint + ".bin"],
                    [out / "attention_maps.surfmesh",
                     out / "attention_manifest.json"], started)
    return 0


# ---------------------------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default="sit-tiny-ico",
                   help="profile name or key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a model config field")
    p.add_argument("--synthetic", type=int, default=0,
                   help="generate N synthetic examples")
    p.add_argument("--ico-order", type=int, default=6)
    p.add_argument("--coarse-order", type=int, default=None)
    p.add_argument("--data-seed", type=int, default=1234)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--optimizer", choices=["sgd", "adam"], default="sgd")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--augment", action="store_true")
    p.add_argument("--angle-cap", type=float, default=10.0)
    p.add_argument("--sampler", choices=["uniform", "adaptive"],
                   default="uniform")
    p.add_argument("--mpp-ratio", type=float, default=0.5)
    p.add_argument("--checkpoint-interval", type=int, default=0)
    p.add_argument("--init-from", help="checkpoint stem to warm-start from")
    p.add_argument("--reset-head", action="store_true",
                   help="re-initialize the head after --init-from")
    p.add_argument("--out-dir", help="output directory "
                   "(default $SURFACEVIT_OUT or .)")
    p.add_argument("--workers", type=int, default=1,
                   help="worker streams for batch assembly; results are "
                   "identical for any value")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="surfacevit",
                                 description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("icosphere", help="build and save an icosphere")
    p.add_argument("--order", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_icosphere)

    p = sub.add_parser("patch", help="build a patch table")
    p.add_argument("--fine", type=int, help="fine icosphere order")
    p.add_argument("--coarse", type=int, help="coarse icosphere order")
    p.add_argument("--control", help="quad control mesh (subdivided twice)")
    p.add_argument("--pairs", help="element pairing file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_patch)

    p = sub.add_parser("resample", help="resample a field between spheres")
    p.add_argument("--src", required=True)
    p.add_argument("--dst", required=True)
    p.add_argument("--field", required=True,
                   help="mesh file whose channels are resampled")
    p.add_argument("--out", required=True)
    p.add_argument("--rotate", metavar="AXIS:DEG")
    p.add_argument("--table-out")
    p.set_defaults(func=cmd_resample)

    p = sub.add_parser("info", help="print parameter count for a config")
    p.add_argument("--config", default="sit-tiny-ico")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--with-mpp", action="store_true")
    p.set_defaults(func=cmd_info)

    p = sub.add_parser("train", help="supervised training")
    _add_train_flags(p)
    p.add_argument("--loss", choices=["mse", "cross_entropy"], default="mse")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pretrain", help="masked-patch pretraining")
    _add_train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint stem")
    p.add_argument("--synthetic", type=int, default=0)
    p.add_argument("--ico-order", type=int, default=6)
    p.add_argument("--coarse-order", type=int, default=None)
    p.add_argument("--data-seed", type=int, default=1234)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="test")
    p.add_argument("--metrics-out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attend", help="export attention maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--field", required=True,
                   help="mesh file with input channels")
    p.add_argument("--heads", help="comma-separated head indices")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_attend)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingDivergence as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (ParseError, ValidationError, StructureError, ShapeError,
            ResourceLimitError, StateError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
