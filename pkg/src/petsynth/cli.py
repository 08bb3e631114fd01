"""Command-line driver binding the library into reproducible batch pipelines.

Subcommands cover the whole workflow: phantom dataset generation, pair
preparation, the two training stages, synthesis, reconstruction scoring, and
detection post-processing (false-positive reduction and FROC curves).

Every run writes its artifacts under --out plus a single run_manifest.json
echoing the resolved configuration, the seed, input and output paths,
wall-clock seconds, and a sha256 checksum per artifact; a run is reproducible
from its manifest alone.  Options may also come from a ``key = value`` config
file via --config, with explicit command-line flags taking precedence.

Exit codes: 0 success; 2 usage or configuration error; 3 missing, unreadable,
or inconsistent data; 4 numerical divergence during training.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from .dataprep import (
    PairRecord,
    ScanPair,
    extract_slices,
    prepare_pair,
    read_pair_manifest,
    split_train_val,
    write_pair_manifest,
)
from .detection import (
    DEFAULT_TH_GRID,
    connected_components,
    froc,
    froc_csv,
    froc_plot,
    reduce_false_positives,
    score_detection,
    suv_threshold_mask,
)
from .evaluate import aggregate_report, evaluate_pair, report_csv, report_table
from .phantom import (
    PhantomConfig,
    PhantomGeometryError,
    generate_candidates,
    save_phantom_pair,
)
from .training import (
    CheckpointError,
    TrainConfig,
    TrainingDivergence,
    history_to_csv,
    load_checkpoint,
    save_checkpoint,
    synthesize,
    train_cgan,
    train_fcn,
)
from .volume import (
    CT_WINDOW,
    MALIGNANCY_SUV,
    SUV_WINDOW,
    Modality,
    MVolError,
    Volume3D,
    load_volume,
    save_volume,
    window_and_normalize,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

_REQUIRED = object()


class UsageError(Exception):
    """Bad flag value, bad config file, or a missing required option."""


# ---------------------------------------------------------------------------
# Option parsing: every option is declared once with a converter and default,
# so command-line flags and config-file keys go through the same validation.
# ---------------------------------------------------------------------------

def _int(s: str) -> int:
    return int(s)


def _float(s: str) -> float:
    return float(s)


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _str(s: str) -> str:
    return s


def _size(s: str) -> tuple[int, int]:
    """'64' or '64x48' -> (64, 48)."""
    parts = s.lower().split("x")
    if len(parts) == 1:
        n = int(parts[0])
        return (n, n)
    if len(parts) == 2:
        return (int(parts[0]), int(parts[1]))
    raise ValueError(f"expected N or NxM, got {s!r}")


def _float_list(s: str) -> tuple[float, ...]:
    return tuple(float(p) for p in s.split(",") if p.strip())


def _path_list(s: str) -> tuple[str, ...]:
    items = tuple(p.strip() for p in s.split(",") if p.strip())
    if not items:
        raise ValueError("empty path list")
    return items


class _Command:
    """One subcommand: its argparse parser plus the option table."""

    def __init__(self, subparsers, name: str, help_: str):
        self.name = name
        self.parser = subparsers.add_parser(name, help=help_)
        self.parser.add_argument("--config", default=None, metavar="FILE",
                                 help="key = value option file; flags win")
        self.options: dict[str, tuple] = {}

    def opt(self, flag: str, convert, default, help_: str) -> None:
        dest = "lam" if flag == "--lambda" else flag.lstrip("-").replace("-", "_")
        suffix = "" if default in (_REQUIRED, None) else f" (default {default})"
        self.parser.add_argument(flag, dest=dest, default=None, metavar="V",
                                 help=help_ + suffix)
        self.options[dest] = (convert, default)


def _read_config_file(path: str) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise UsageError(f"cannot read config file {path}: {e}")
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        key = key.strip().replace("-", "_")
        if key == "lambda":
            key = "lam"
        values[key] = value.strip()
    return values


def _resolve_options(cmd: _Command, args: argparse.Namespace) -> dict:
    file_vals = _read_config_file(args.config) if args.config else {}
    unknown = sorted(set(file_vals) - set(cmd.options))
    if unknown:
        raise UsageError(f"unknown config key(s) for {cmd.name}: "
                         + ", ".join(unknown))
    resolved = {}
    for dest, (convert, default) in cmd.options.items():
        raw = getattr(args, dest)
        if raw is None:
            raw = file_vals.get(dest)
        if raw is None:
            if default is _REQUIRED:
                flag = "--lambda" if dest == "lam" else "--" + dest.replace("_", "-")
                raise UsageError(f"missing required option {flag}")
            resolved[dest] = default
            continue
        try:
            resolved[dest] = convert(raw)
        except (TypeError, ValueError) as e:
            raise UsageError(f"bad value for {dest}: {raw!r} ({e})")
    return resolved


# ---------------------------------------------------------------------------
# Run manifests
# ---------------------------------------------------------------------------

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    return v


def _physical_files(outputs: list) -> list[Path]:
    """Expand logical artifact paths to files on disk (an MVOL is a
    sidecar + raster pair)."""
    files = []
    for p in outputs:
        s = str(p)
        if s.endswith(".mvol"):
            files += [Path(s + ".json"), Path(s + ".raw")]
        else:
            files.append(Path(s))
    return sorted(files, key=str)


def _write_manifest(command: str, opt: dict, inputs: list, outputs: list,
                    out_dir: Path, wall: float) -> Path:
    files = _physical_files(outputs)
    manifest = {
        "command": command,
        "config": {k: _jsonable(v) for k, v in sorted(opt.items())},
        "seed": opt.get("seed"),
        "inputs": sorted(str(p) for p in inputs),
        "outputs": [os.path.relpath(p, out_dir) for p in files],
        "wall_clock_sec": round(wall, 3),
        "checksums": {os.path.relpath(p, out_dir): _sha256(p) for p in files},
    }
    path = out_dir / "run_manifest.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    return path


# ---------------------------------------------------------------------------
# Shared loaders
# ---------------------------------------------------------------------------

def _resolve_rel(path: str, base: Path) -> str:
    p = Path(path)
    return str(p if p.is_absolute() else base / p)


def _load_pairs(manifest_path: str):
    """Load a pair manifest into (records, resolved ct/pet path pairs)."""
    records = read_pair_manifest(manifest_path)
    if not records:
        raise ValueError(f"pair manifest {manifest_path} is empty")
    base = Path(manifest_path).parent
    paths = [(_resolve_rel(r.ct_path, base), _resolve_rel(r.pet_path, base))
             for r in records]
    return records, paths


def _load_slices(manifest_path: str):
    """Normalized training slices from a prepared pair manifest."""
    records, paths = _load_pairs(manifest_path)
    slices, inputs = [], [manifest_path]
    for rec, (ct_path, pet_path) in zip(records, paths):
        pair = ScanPair(load_volume(ct_path), load_volume(pet_path),
                        slice_range=rec.slice_range)
        slices.extend(extract_slices(pair))
        inputs += [ct_path, pet_path]
    return slices, inputs


def _norm_suv_threshold(suv_th: float) -> float:
    if not SUV_WINDOW.lo < suv_th < SUV_WINDOW.hi:
        raise ValueError(f"SUV threshold {suv_th} outside the SUV window "
                         f"({SUV_WINDOW.lo}, {SUV_WINDOW.hi})")
    return (suv_th - SUV_WINDOW.lo) / (SUV_WINDOW.hi - SUV_WINDOW.lo)


def _load_normalized_ct(path: str) -> Volume3D:
    v = load_volume(path)
    if v.modality is Modality.CT:
        return window_and_normalize(v, CT_WINDOW)
    if v.modality is Modality.NORMALIZED:
        return v
    raise ValueError(f"{path}: expected a CT or NORMALIZED volume, "
                     f"got {v.modality.value}")


def _load_fcn_state(path: str):
    state = load_checkpoint(path)
    if state.kind != "fcn":
        raise ValueError(f"{path} is a {state.kind} checkpoint, expected stage 1")
    return state


# ---------------------------------------------------------------------------
# Command implementations; each returns (inputs, output file paths)
# ---------------------------------------------------------------------------

def _default_pet_dims(size: tuple[int, int], n_slices: int,
                      cfg: PhantomConfig) -> tuple[int, int, int]:
    """Smallest PET grid whose extent covers the CT grid on x and y."""
    dims = []
    for axis in range(2):
        ct_extent = (size[axis] - 1) * cfg.ct_spacing[axis] + cfg.ct_offset[axis]
        span = ct_extent - cfg.pet_offset[axis]
        dims.append(max(2, math.ceil(span / cfg.pet_spacing[axis]) + 1))
    return (dims[0], dims[1], n_slices)


def _cmd_phantom(opt: dict, out_dir: Path):
    size, n_slices = opt["size"], opt["slices"]
    base = PhantomConfig(seed=opt["seed"], n_lesions=opt["n_lesions"])
    cfg = replace(base, ct_dims=(size[0], size[1], n_slices),
                  pet_dims=_default_pet_dims(size, n_slices, base))
    outputs = []
    records = []
    for i in range(opt["n_scans"]):
        stem = f"scan{i:04d}"
        scan_cfg = replace(cfg, seed=cfg.seed + i)
        rec, gt_path = save_phantom_pair(scan_cfg, out_dir, stem)
        records.append(PairRecord(f"{stem}_ct.mvol", f"{stem}_pet.mvol"))
        outputs += [rec.ct_path, rec.pet_path, gt_path]
        if opt["n_false"] > 0:
            pair = prepare_pair(load_volume(rec.ct_path), load_volume(rec.pet_path))
            avoid = suv_threshold_mask(pair.pet)
            _, prob = generate_candidates(load_volume(gt_path), opt["n_false"],
                                          avoid, seed=scan_cfg.seed)
            prob_path = out_dir / f"{stem}_prob.mvol"
            save_volume(prob, prob_path)
            outputs.append(prob_path)
    manifest = out_dir / "pairs.csv"
    write_pair_manifest(records, manifest)
    outputs.append(manifest)
    print(f"wrote {opt['n_scans']} phantom scan(s) to {out_dir}")
    return [], outputs


def _cmd_prepare(opt: dict, out_dir: Path):
    records, paths = _load_pairs(opt["pairs"])
    inputs = [opt["pairs"]]
    outputs = []
    new_records = []
    for i, (rec, (ct_path, pet_path)) in enumerate(zip(records, paths)):
        inputs += [ct_path, pet_path]
        pair = prepare_pair(load_volume(ct_path), load_volume(pet_path),
                            dose=rec.dose, weight=rec.weight,
                            slice_range=rec.slice_range)
        stem = f"prep{i:04d}"
        ct_out, pet_out = out_dir / f"{stem}_ct.mvol", out_dir / f"{stem}_pet.mvol"
        save_volume(pair.ct, ct_out)
        save_volume(pair.pet, pet_out)
        outputs += [ct_out, pet_out]
        new_records.append(PairRecord(f"{stem}_ct.mvol", f"{stem}_pet.mvol",
                                      slice_lo=rec.slice_lo, slice_hi=rec.slice_hi))
    manifest = out_dir / "pairs.csv"
    write_pair_manifest(new_records, manifest)
    outputs.append(manifest)
    print(f"prepared {len(new_records)} pair(s) into {out_dir}")
    return inputs, outputs


def _train_config(opt: dict, **overrides) -> TrainConfig:
    common = dict(
        learning_rate=opt["lr"], batch_size=opt["batch"],
        max_steps=opt["steps"], seed=opt["seed"], augment=opt["augment"],
        noise_bound=opt["noise_bound"], eval_every=opt["eval_every"],
        patience=opt["patience"],
    )
    common.update(overrides)
    return TrainConfig(**common)


def _split_for_validation(slices, opt: dict):
    if opt["val_fraction"] <= 0:
        return slices, None
    return split_train_val(slices, opt["val_fraction"], opt["seed"])


def _cmd_train_fcn(opt: dict, out_dir: Path):
    slices, inputs = _load_slices(opt["pairs"])
    train, val = _split_for_validation(slices, opt)
    cfg = _train_config(opt, width_scale=opt["width_scale"],
                        input_size=opt["input_size"])
    state = train_fcn(train, cfg, val)
    ckpt, loss_csv = out_dir / "fcn_checkpoint.npz", out_dir / "loss.csv"
    save_checkpoint(state, ckpt)
    history_to_csv(state, loss_csv)
    last = [v for s, n, v in state.history if n == "loss_fcn"]
    if last:
        print(f"stage 1 done: {state.step} step(s), final loss {last[-1]:.6g}")
    return inputs, [ckpt, loss_csv]


def _cmd_train_cgan(opt: dict, out_dir: Path):
    fcn_state = _load_fcn_state(opt["fcn"])
    slices, inputs = _load_slices(opt["pairs"])
    inputs.append(opt["fcn"])
    train, val = _split_for_validation(slices, opt)
    width = opt["width_scale"]
    size = opt["input_size"]
    cfg = _train_config(
        opt,
        width_scale=fcn_state.cfg.width_scale if width is None else width,
        input_size=fcn_state.gen_graph.input_size if size is None else size,
        lam=opt["lam"], suv_threshold=_norm_suv_threshold(opt["suv_th"]),
        joint_finetune=opt["joint_finetune"],
    )
    state = train_cgan(train, fcn_state, cfg, val)
    ckpt, loss_csv = out_dir / "cgan_checkpoint.npz", out_dir / "loss.csv"
    save_checkpoint(state, ckpt)
    history_to_csv(state, loss_csv)
    last = [v for s, n, v in state.history if n == "loss_g"]
    if last:
        print(f"stage 2 done: {state.step} step(s), final generator loss "
              f"{last[-1]:.6g}")
    return inputs, [ckpt, loss_csv]


def _cmd_synthesize(opt: dict, out_dir: Path):
    inputs = [opt["ct"], opt["fcn"]]
    ct = _load_normalized_ct(opt["ct"])
    fcn_state = _load_fcn_state(opt["fcn"])
    cgan_state = None
    if opt["cgan"] is not None:
        inputs.append(opt["cgan"])
        cgan_state = load_checkpoint(opt["cgan"])
        if cgan_state.kind != "cgan":
            raise ValueError(f"{opt['cgan']} is a {cgan_state.kind} checkpoint, "
                             "expected stage 2")
    vp = synthesize(ct, fcn_state, cgan_state)
    out_path = out_dir / "virtual_pet.mvol"
    save_volume(vp, out_path)
    print(f"wrote {out_path}")
    return inputs, [out_path]


def _cmd_evaluate(opt: dict, out_dir: Path):
    syns, refs = opt["syn"], opt["ref"]
    if len(syns) != len(refs):
        raise UsageError(f"{len(syns)} synthesized vs {len(refs)} reference "
                         "volumes; counts must match")
    records = [evaluate_pair(load_volume(s), load_volume(r),
                             threshold=opt["suv_th"])
               for s, r in zip(syns, refs)]
    report = aggregate_report(records, label=opt["label"])
    csv_path = out_dir / "report.csv"
    report_csv(report, csv_path)
    print(report_table([report]))
    return list(syns) + list(refs), [csv_path]


def _score_as_dict(score) -> dict:
    tpr = None if math.isnan(score.tpr) else score.tpr
    return {"tpr": tpr, "fpr": score.fpr, "hits": list(score.hits)}


def _load_prob_candidates(opt: dict):
    prob = load_volume(opt["prob"])
    if prob.modality is not Modality.PROB:
        raise ValueError(f"{opt['prob']}: expected a PROB volume, "
                         f"got {prob.modality.value}")
    gt = load_volume(opt["gt"])
    gt_cands = connected_components(gt)
    syn = load_volume(opt["syn"])
    return prob, gt_cands, syn


def _cmd_reduce_fp(opt: dict, out_dir: Path):
    prob, gt_cands, syn = _load_prob_candidates(opt)
    mask = Volume3D((prob.data > opt["prob_th"]).astype("float32"),
                    prob.spacing, prob.offset, Modality.MASK)
    cands = connected_components(mask, scores=prob)
    suv_mask = suv_threshold_mask(syn, opt["suv_th"])
    kept = reduce_false_positives(cands, suv_mask, opt["min_overlap"])
    before = score_detection(cands, gt_cands)
    after = score_detection(kept, gt_cands)

    kept_mask = Volume3D((kept.label_volume() > 0).astype("float32"),
                         prob.spacing, prob.offset, Modality.MASK)
    mask_path = out_dir / "candidates_kept.mvol"
    save_volume(kept_mask, mask_path)
    score_path = out_dir / "detection.json"
    with open(score_path, "w", encoding="utf-8") as f:
        json.dump({
            "prob_threshold": opt["prob_th"],
            "suv_threshold": opt["suv_th"],
            "min_overlap_voxels": opt["min_overlap"],
            "n_candidates": len(cands.components),
            "n_kept": len(kept.components),
            "before": _score_as_dict(before),
            "after": _score_as_dict(after),
        }, f, indent=2)
        f.write("\n")
    print(f"candidates {len(cands.components)} -> {len(kept.components)}; "
          f"tpr {before.tpr:.3g} -> {after.tpr:.3g}, "
          f"fpr {before.fpr:.3g} -> {after.fpr:.3g}")
    return [opt["prob"], opt["gt"], opt["syn"]], [mask_path, score_path]


def _cmd_froc(opt: dict, out_dir: Path):
    prob, gt_cands, syn = _load_prob_candidates(opt)
    kw = dict(th_grid=opt["th_grid"], min_overlap_voxels=opt["min_overlap"],
              suv_th=opt["suv_th"])
    points_raw = froc(prob, gt_cands, syn, use_fpr_layer=False, **kw)
    points_red = froc(prob, gt_cands, syn, use_fpr_layer=True, **kw)
    raw_csv = out_dir / "froc_raw.csv"
    red_csv = out_dir / "froc_reduced.csv"
    plot = out_dir / "froc.png"
    froc_csv(points_raw, raw_csv)
    froc_csv(points_red, red_csv)
    froc_plot(points_raw, points_red, plot)
    print(f"froc over {len(opt['th_grid'])} threshold(s) written to {out_dir}")
    return [opt["prob"], opt["gt"], opt["syn"]], [raw_csv, red_csv, plot]


# ---------------------------------------------------------------------------
# Parser assembly
# ---------------------------------------------------------------------------

def _add_common_train_opts(cmd: _Command) -> None:
    cmd.opt("--pairs", _str, _REQUIRED, "prepared pair manifest")
    cmd.opt("--out", _str, _REQUIRED, "output directory")
    cmd.opt("--steps", _int, 500, "Adam steps")
    cmd.opt("--seed", _int, 0, "run seed")
    cmd.opt("--batch", _int, 4, "batch size")
    cmd.opt("--lr", _float, 1e-5, "learning rate")
    cmd.opt("--augment", _bool, True, "random scale/translate augmentation")
    cmd.opt("--noise-bound", _float, 0.005, "input noise clip bound")
    cmd.opt("--val-fraction", _float, 0.0, "validation split fraction")
    cmd.opt("--eval-every", _int, 0, "validation cadence in steps (0 = off)")
    cmd.opt("--patience", _int, 5, "early-stop patience in evaluations")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="petsynth",
        description="CT-to-PET synthesis pipeline (phantom data, two-stage "
                    "training, evaluation, and detection post-processing)")
    subparsers = parser.add_subparsers(dest="command", required=True)
    commands: dict[str, tuple[_Command, callable]] = {}

    c = _Command(subparsers, "phantom", "generate a synthetic CT/PET dataset")
    c.opt("--out", _str, _REQUIRED, "output directory")
    c.opt("--seed", _int, 0, "base seed; scan i uses seed + i")
    c.opt("--n-scans", _int, 1, "number of scans")
    c.opt("--n-lesions", _int, 2, "lesions per scan")
    c.opt("--n-false", _int, 0,
          "planted false candidates per scan (emits a probability map)")
    c.opt("--size", _size, (64, 64), "CT cross-section, N or NxM")
    c.opt("--slices", _int, 16, "axial slices")
    commands["phantom"] = (c, _cmd_phantom)

    c = _Command(subparsers, "prepare", "align and normalize raw pairs")
    c.opt("--pairs", _str, _REQUIRED, "raw pair manifest")
    c.opt("--out", _str, _REQUIRED, "output directory")
    commands["prepare"] = (c, _cmd_prepare)

    c = _Command(subparsers, "train-fcn", "stage 1: fit the synthesis FCN")
    _add_common_train_opts(c)
    c.opt("--width-scale", _float, 0.25, "channel width multiplier")
    c.opt("--input-size", _size, (64, 64), "training slice size, N or NxM")
    commands["train-fcn"] = (c, _cmd_train_fcn)

    c = _Command(subparsers, "train-cgan",
                 "stage 2: adversarial refinement over a stage-1 checkpoint")
    _add_common_train_opts(c)
    c.opt("--fcn", _str, _REQUIRED, "stage-1 checkpoint")
    c.opt("--width-scale", _float, None,
          "channel width multiplier (default: from the stage-1 checkpoint)")
    c.opt("--input-size", _size, None,
          "slice size (default: from the stage-1 checkpoint)")
    c.opt("--lambda", _float, 20.0, "reconstruction loss weight")
    c.opt("--suv-th", _float, MALIGNANCY_SUV, "SUV split threshold")
    c.opt("--joint-finetune", _bool, False,
          "propagate generator gradients into a copy of the stage-1 network")
    commands["train-cgan"] = (c, _cmd_train_cgan)

    c = _Command(subparsers, "synthesize", "run synthesis on a CT volume")
    c.opt("--ct", _str, _REQUIRED, "input CT (raw or normalized MVOL)")
    c.opt("--fcn", _str, _REQUIRED, "stage-1 checkpoint")
    c.opt("--cgan", _str, None, "optional stage-2 checkpoint")
    c.opt("--out", _str, _REQUIRED, "output directory")
    commands["synthesize"] = (c, _cmd_synthesize)

    c = _Command(subparsers, "evaluate", "region-split MAE/PSNR report")
    c.opt("--syn", _path_list, _REQUIRED, "synthesized volume(s), comma separated")
    c.opt("--ref", _path_list, _REQUIRED, "reference volume(s), comma separated")
    c.opt("--suv-th", _float, MALIGNANCY_SUV, "SUV split threshold")
    c.opt("--label", _str, "synthesis", "report label")
    c.opt("--out", _str, _REQUIRED, "output directory")
    commands["evaluate"] = (c, _cmd_evaluate)

    c = _Command(subparsers, "reduce-fp",
                 "drop candidates with no synthesized high-SUV support")
    c.opt("--prob", _str, _REQUIRED, "detector probability map (MVOL)")
    c.opt("--gt", _str, _REQUIRED, "ground-truth lesion mask (MVOL)")
    c.opt("--syn", _str, _REQUIRED, "synthesized PET (MVOL)")
    c.opt("--prob-th", _float, 0.95, "candidate probability threshold")
    c.opt("--suv-th", _float, MALIGNANCY_SUV, "SUV gating threshold")
    c.opt("--min-overlap", _int, 1, "minimum overlap voxels to keep a candidate")
    c.opt("--out", _str, _REQUIRED, "output directory")
    commands["reduce-fp"] = (c, _cmd_reduce_fp)

    c = _Command(subparsers, "froc", "FROC curves with and without SUV gating")
    c.opt("--prob", _str, _REQUIRED, "detector probability map (MVOL)")
    c.opt("--gt", _str, _REQUIRED, "ground-truth lesion mask (MVOL)")
    c.opt("--syn", _str, _REQUIRED, "synthesized PET (MVOL)")
    c.opt("--th-grid", _float_list, DEFAULT_TH_GRID,
          "ascending probability thresholds, comma separated")
    c.opt("--suv-th", _float, MALIGNANCY_SUV, "SUV gating threshold")
    c.opt("--min-overlap", _int, 1, "minimum overlap voxels to keep a candidate")
    c.opt("--out", _str, _REQUIRED, "output directory")
    commands["froc"] = (c, _cmd_froc)

    parser.set_defaults(_commands=commands)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    cmd, runner = args._commands[args.command]
    try:
        opt = _resolve_options(cmd, args)
        t0 = time.monotonic()
        out_dir = Path(opt["out"])
        os.makedirs(out_dir, exist_ok=True)
        inputs, outputs = runner(opt, out_dir)
        if args.config:
            inputs = list(inputs) + [args.config]
        _write_manifest(args.command, opt, inputs, outputs, out_dir,
                        time.monotonic() - t0)
        return EXIT_OK
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergence as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (MVolError, CheckpointError, PhantomGeometryError, FileNotFoundError,
            IsADirectoryError, NotADirectoryError, PermissionError,
            ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
