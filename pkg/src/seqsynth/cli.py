"""Command-line surface: phantom-gen, preprocess, train, synthesize, evaluate.

Exit codes: 0 success, 2 usage/config error, 3 I/O failure, 4 numeric failure,
5 checkpoint or geometry incompatibility.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np
import torch

from .config import load_config, write_resolved_config
from .data import (
    PreprocessParams,
    VolumeSet,
    crop_and_resize,
    list_cached_patients,
    load_volume_set,
    mean_normalize,
    preprocess_dataset,
    read_cache,
    resize_bilinear,
    write_cache,
)
from .errors import (
    BoxOutOfBounds,
    CheckpointMismatch,
    ConstantImage,
    CorruptCache,
    DegenerateSample,
    DegenerateVolume,
    EmptyForeground,
    InvalidScenario,
    NonFiniteLoss,
    ShapeError,
    ShapeMismatch,
    VolumeIOError,
)
from .evaluation import (
    evaluate_model,
    plane_analyses,
    synthesize_missing,
    write_plane_csv,
)
from .networks import (
    FULL_WIDTHS,
    DiscriminatorSpec,
    GeneratorSpec,
)
from .nifti import read_nifti, write_nifti
from .phantom import PhantomSpec, generate_phantom_dataset
from .scenario import (
    MODE_MIMO,
    CurriculumSchedule,
    enumerate_valid,
    parse_scenario,
)
from .training import (
    TrainConfig,
    fit,
    load_checkpoint_metadata,
    load_generator,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_INCOMPATIBLE = 5


class UsageError(Exception):
    pass


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _sequence_path(directory: Path, name: str) -> Path | None:
    for suffix in (".nii.gz", ".nii"):
        p = directory / f"{name}{suffix}"
        if p.is_file():
            return p
    return None


def cmd_phantom_gen(args) -> int:
    if not _is_power_of_two(args.size):
        raise UsageError(f"--size must be a power of two, got {args.size}")
    spec = PhantomSpec(
        n_patients=args.n,
        image_size=args.size,
        depth=args.depth,
        noise_sigma=args.noise_sigma,
        seed=args.seed,
    )
    out = Path(args.out)
    volumes = generate_phantom_dataset(spec)
    channel_names = args.channels.split(",")
    if len(channel_names) != spec.n_channels:
        raise UsageError(
            f"{len(channel_names)} channel names for {spec.n_channels} contrasts"
        )
    for v in volumes:
        pdir = out / v.patient_id
        for name, seq in zip(channel_names, v.sequences):
            write_nifti(pdir / f"{name}.nii.gz", seq, spacing=v.spacing)
        sidecar = {"patient_id": v.patient_id, "seed": spec.seed, "shape": list(v.shape)}
        (pdir / "meta.json").write_text(json.dumps(sidecar, indent=2))
    manifest = {
        "n_patients": spec.n_patients,
        "image_size": spec.image_size,
        "depth": spec.depth,
        "noise_sigma": spec.noise_sigma,
        "seed": spec.seed,
        "channel_names": channel_names,
        "patients": [v.patient_id for v in volumes],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"wrote {len(volumes)} phantom patients to {out}")
    return EXIT_OK


def _discover_patients(root: Path, channel_names: list[str]) -> list[tuple[str, list[Path]]]:
    found = []
    for pdir in sorted(p for p in root.iterdir() if p.is_dir()):
        paths = [_sequence_path(pdir, name) for name in channel_names]
        if all(p is not None for p in paths):
            found.append((pdir.name, paths))
    if not found:
        raise VolumeIOError(
            f"no patient directories with all of {channel_names} under {root}"
        )
    return found


def cmd_preprocess(args) -> int:
    root = Path(args.root)
    if not root.is_dir():
        raise VolumeIOError(f"dataset root {root} is not a directory")
    channel_names = tuple(args.channels.split(","))
    patients = _discover_patients(root, list(channel_names))
    volumes = [
        load_volume_set(paths, patient_id=pid, channel_names=channel_names)
        for pid, paths in patients
    ]
    processed, params = preprocess_dataset(
        volumes,
        size=(args.size, args.size),
        threshold=args.threshold,
        channel_names=channel_names,
        workers=args.workers,
    )
    cache_dir = Path(args.out)
    for v, slices in processed:
        write_cache(cache_dir, v, slices, params)
        print(f"cached {v.patient_id}: {slices.shape}")
    (cache_dir / "preprocess_params.json").write_text(
        json.dumps(params.to_json(), indent=2)
    )
    print(f"wrote {len(processed)} patients to {cache_dir}")
    return EXIT_OK


def _load_cached(
    cache_dir: Path, ids: list[str], channel_names: tuple[str, ...]
) -> tuple[list[tuple[str, np.ndarray]], dict]:
    out, prep = [], None
    for pid in ids:
        arr, sidecar = read_cache(cache_dir, pid, channel_names=channel_names)
        this_prep = sidecar["preprocessing"]
        if prep is None:
            prep = this_prep
        elif prep != this_prep:
            raise CorruptCache(
                f"cache entry {pid} preprocessed with different parameters"
            )
        out.append((pid, arr))
    return out, prep


def cmd_train(args) -> int:
    config_path = Path(args.config)
    if not config_path.is_file():
        raise UsageError(f"config file {config_path} does not exist")
    overrides: dict = {}
    if args.out is not None:
        overrides["output_dir"] = args.out
    if args.seed is not None:
        overrides["seed"] = args.seed
    config = load_config(config_path, overrides)

    out_dir = Path(config["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved_config(config, out_dir)

    ds = config["dataset"]
    channel_names = tuple(ds["channel_names"])
    cache_dir = Path(ds["cache_dir"]) if ds["cache_dir"] else out_dir / "cache"
    if not cache_dir.is_dir() or not list_cached_patients(cache_dir):
        if not ds["root"]:
            raise UsageError(
                f"no cache at {cache_dir} and no dataset.root to preprocess from"
            )
        pre = config["preprocessing"]
        patients = _discover_patients(Path(ds["root"]), list(channel_names))
        volumes = [
            load_volume_set(paths, patient_id=pid, channel_names=channel_names)
            for pid, paths in patients
        ]
        processed, params = preprocess_dataset(
            volumes,
            size=(pre["size"], pre["size"]),
            threshold=pre["threshold"],
            channel_names=channel_names,
            workers=pre["workers"],
        )
        for v, slices in processed:
            write_cache(cache_dir, v, slices, params)

    all_ids = list_cached_patients(cache_dir)
    train_ids = ds["train_patients"] or all_ids
    val_ids = ds["val_patients"] or []
    train_patients, prep = _load_cached(cache_dir, train_ids, channel_names)
    val_patients, _ = _load_cached(cache_dir, val_ids, channel_names) if val_ids else ([], None)

    size = train_patients[0][1].shape[-1]
    g_cfg = config["generator"]
    depth = g_cfg["depth"]
    if 2**depth != size:
        raise CheckpointMismatch(
            f"generator depth {depth} implies input size {2**depth}, cache has {size}"
        )
    widths = tuple(g_cfg["widths"]) if g_cfg["widths"] else FULL_WIDTHS[:depth]
    g_spec = GeneratorSpec(
        channels=len(channel_names),
        depth=depth,
        widths=widths,
        final_activation=g_cfg["final_activation"],
        dropout_p=g_cfg["dropout_p"],
    )
    d_cfg = config["discriminator"]
    d_spec = DiscriminatorSpec(
        channels=len(channel_names),
        n_blocks=d_cfg["n_blocks"],
        base_width=d_cfg["base_width"],
        input_noise_sigma=d_cfg["input_noise_sigma"],
    )
    t = config["training"]
    train_config = TrainConfig(
        lam=t["lam"],
        d_loss_scale=t["d_loss_scale"],
        lr=t["lr"],
        adam_betas=tuple(t["adam_betas"]),
        batch_size=t["batch_size"],
        epochs=t["epochs"],
        ic_enabled=t["ic_enabled"],
        imputation=t["imputation"],
        schedule=CurriculumSchedule(**t["schedule"]),
        mode=t["mode"],
        miso_target=t["miso_target"],
        seed=config["seed"],
        checkpoint_every=t["checkpoint_every"],
    )
    try:
        result = fit(
            train_config,
            g_spec,
            d_spec,
            train_patients,
            out_dir,
            channel_names,
            val_patients=val_patients or None,
            preprocessing=prep,
            resume_from=args.resume,
        )
    except NonFiniteLoss as e:
        dump = out_dir / "diagnostic_dump.json"
        dump.write_text(json.dumps(e.diagnostics, indent=2))
        print(f"non-finite loss; diagnostics written to {dump}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"training complete: {result.final_checkpoint}")
    print(f"loss log: {result.log_path}")
    return EXIT_OK


def cmd_synthesize(args) -> int:
    meta = load_checkpoint_metadata(args.checkpoint)
    channel_names = tuple(meta["channel_names"])
    scenario = parse_scenario(args.scenario, len(channel_names))
    if meta.get("preprocessing") is None:
        raise CheckpointMismatch(
            "checkpoint carries no preprocessing geometry; cannot map outputs "
            "back to scanner space"
        )
    params = PreprocessParams.from_json(meta["preprocessing"])

    scan_dir = Path(args.scan)
    present_paths = {}
    for ch in scenario.present:
        p = _sequence_path(scan_dir, channel_names[ch])
        if p is None:
            raise VolumeIOError(
                f"scenario {scenario} marks {channel_names[ch]} present but no "
                f"{channel_names[ch]}.nii[.gz] in {scan_dir}"
            )
        present_paths[ch] = p

    loaded = {ch: read_nifti(p) for ch, p in present_paths.items()}
    shapes = {vol.shape for vol, _ in loaded.values()}
    if len(shapes) != 1:
        raise ShapeMismatch(f"present sequences disagree in shape: {shapes}")
    full_shape = shapes.pop()
    spacing = next(iter(loaded.values()))[1]

    sequences = []
    for ch in range(len(channel_names)):
        if ch in loaded:
            sequences.append(loaded[ch][0])
        else:
            sequences.append(np.zeros(full_shape, dtype=np.float32))
    vs = VolumeSet(
        patient_id=scan_dir.name or "scan", sequences=sequences, spacing=spacing
    )
    # normalize present channels only; missing ones are placeholders
    divisors = {}
    for ch in scenario.present:
        sub = VolumeSet(patient_id=vs.patient_id, sequences=[vs.sequences[ch]])
        normed = mean_normalize(sub)
        vs.sequences[ch] = normed.sequences[0]
        divisors[channel_names[ch]] = normed.per_sequence_mean[0]

    arr = crop_and_resize(vs, params.bbox, params.size)

    generator, _ = load_generator(args.checkpoint, expected_channels=channel_names)
    rng = torch.Generator().manual_seed(args.seed)
    imputation = meta["train_config"]["imputation"]

    t0 = time.perf_counter()
    synth = synthesize_missing(generator, arr, scenario, imputation, rng)
    wall = time.perf_counter() - t0

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (z0, y0, x0), (z1, y1, x1) = params.bbox.mins, params.bbox.maxs
    written = []
    for ch in scenario.missing:
        back = resize_bilinear(synth[:, ch], (y1 - y0 + 1, x1 - x0 + 1))
        full = np.zeros(full_shape, dtype=np.float32)
        full[z0 : z1 + 1, y0 : y1 + 1, x0 : x1 + 1] = back
        path = out_dir / f"{channel_names[ch]}.nii.gz"
        write_nifti(path, full, spacing=spacing)
        written.append(str(path))
    record = {
        "scenario": str(scenario),
        "checkpoint": str(args.checkpoint),
        "synthesized": written,
        "present_divisors": divisors,
        "wall_time_s": wall,
        "note": "outputs are in mean-normalized intensity units",
    }
    (out_dir / "synthesis_record.json").write_text(json.dumps(record, indent=2))
    print(f"synthesized {len(written)} sequence(s) in {wall:.3f}s -> {out_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    meta = load_checkpoint_metadata(args.checkpoint)
    channel_names = tuple(meta["channel_names"])
    generator, _ = load_generator(args.checkpoint, expected_channels=channel_names)

    cache_dir = Path(args.cache)
    ids = args.patients.split(",") if args.patients else list_cached_patients(cache_dir)
    if not ids:
        raise VolumeIOError(f"no cached patients in {cache_dir}")
    patients, _ = _load_cached(cache_dir, ids, channel_names)

    size = patients[0][1].shape[-1]
    if size != generator.spec.input_size:
        raise CheckpointMismatch(
            f"cache slice size {size} != generator input {generator.spec.input_size}"
        )

    tc = meta["train_config"]
    if args.scenarios:
        scenarios = [
            parse_scenario(s, len(channel_names)) for s in args.scenarios.split(",")
        ]
    else:
        scenarios = enumerate_valid(
            len(channel_names), tc.get("mode", MODE_MIMO), tc.get("miso_target")
        )
    rng = torch.Generator().manual_seed(args.seed)
    report = evaluate_model(
        generator,
        patients,
        scenarios,
        channel_names=channel_names,
        renormalize=not args.no_renorm,
        imputation=tc.get("imputation", "zeros"),
        rng=rng,
    )
    out_dir = Path(args.out)
    report.to_csv(out_dir / "report.csv")
    report.to_json(out_dir / "report.json")
    g = report.grand_mean
    print(
        f"evaluated {len(scenarios)} scenarios x {len(patients)} patients: "
        f"mse {g['mse']:.5g}, psnr {g['psnr']:.4g} dB, ssim {g['ssim']:.4g}"
    )
    if args.stats == "planes":
        rng = torch.Generator().manual_seed(args.seed)
        analyses = plane_analyses(
            generator,
            patients,
            scenarios,
            channel_names=channel_names,
            renormalize=not args.no_renorm,
            imputation=tc.get("imputation", "zeros"),
            rng=rng,
        )
        write_plane_csv(out_dir / "planes.csv", analyses)
        print(f"per-plane statistics -> {out_dir / 'planes.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="seqsynth",
        description="Synthesize missing MRI pulse sequences from the present ones.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("phantom-gen", help="generate a synthetic test dataset")
    g.add_argument("--n", type=int, default=10, help="number of patients")
    g.add_argument("--size", type=int, default=64, help="slice size (power of two)")
    g.add_argument("--depth", type=int, default=10, help="slices per volume")
    g.add_argument("--noise-sigma", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--channels", default="T1,T2,T1c,T2flair")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_phantom_gen)

    g = sub.add_parser("preprocess", help="normalize, crop, resize, and cache")
    g.add_argument("--root", required=True, help="directory of patient subdirectories")
    g.add_argument("--out", required=True, help="cache directory")
    g.add_argument("--size", type=int, default=256)
    g.add_argument("--threshold", type=float, default=0.0)
    g.add_argument("--channels", default="T1,T2,T1c,T2flair")
    g.add_argument("--workers", type=int, default=1)
    g.set_defaults(func=cmd_preprocess)

    g = sub.add_parser("train", help="train a synthesis model from a JSON config")
    g.add_argument("--config", required=True)
    g.add_argument("--out", default=None, help="override output_dir")
    g.add_argument("--seed", type=int, default=None, help="override seed")
    g.add_argument("--resume", default=None, help="checkpoint to resume from")
    g.set_defaults(func=cmd_train)

    g = sub.add_parser("synthesize", help="synthesize missing sequences for one scan")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--scan", required=True, help="directory with present sequences")
    g.add_argument("--scenario", required=True, help='bit string, e.g. "1010"')
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_synthesize)

    g = sub.add_parser("evaluate", help="score a checkpoint on cached volumes")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--cache", required=True, help="preprocessed cache directory")
    g.add_argument("--out", required=True)
    g.add_argument("--patients", default=None, help="comma-separated ids")
    g.add_argument("--scenarios", default=None, help="comma-separated bit strings")
    g.add_argument("--stats", choices=["planes"], default=None)
    g.add_argument("--no-renorm", action="store_true",
                   help="skip [0,1] re-normalization before metrics")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_evaluate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, InvalidScenario) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (jsonschema.ValidationError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (VolumeIOError, CorruptCache) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteLoss, DegenerateVolume, EmptyForeground, ConstantImage,
            DegenerateSample) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointMismatch, ShapeMismatch, ShapeError, BoxOutOfBounds) as e:
        print(f"incompatible inputs: {e}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
