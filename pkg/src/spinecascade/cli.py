"""Command-line entry point: phantom-gen, train-stage1, train-stage2, infer, eval.

Exit codes: 0 success, 2 usage error, 3 data error, 4 no spine found.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .augment import AugmentSpec
from .autodiff import CheckpointError
from .metrics import ID_RADIUS_MM, report_rows, rows_to_csv, rows_to_text, seg_metrics
from .nets import INSTANCE, SEMANTIC, NetConfig, load_net
from .phantom import (
    PhantomSpec,
    PhantomSpecError,
    check_feasible,
    generate_phantom,
    random_phantom_spec,
    read_phantom,
    write_phantom,
)
from .pipeline.cascade import CascadeParams, NoSpineFound, run_cascade, write_result
from .training import TrainConfig, load_dataset, train
from .volume import Volume, VolumeIOError, clip_normalize, read_volume

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NO_SPINE = 0, 2, 3, 4


class DataError(Exception):
    """Bad input data or configuration; maps to exit code 3."""


# config files


def load_config(path):
    """Parse a TOML or JSON config; returns ``(dict, base directory for relative paths)``."""
    if path is None:
        return {}, Path.cwd()
    p = Path(path)
    if not p.is_file():
        raise DataError(f"config file {p} not found")
    text = p.read_bytes()
    try:
        if p.suffix.lower() == ".json":
            cfg = json.loads(text)
        else:
            cfg = tomllib.loads(text.decode())
    except (ValueError, tomllib.TOMLDecodeError) as e:
        raise DataError(f"cannot parse config {p}: {e}") from None
    if not isinstance(cfg, dict):
        raise DataError(f"config {p} must be a table/object")
    return cfg, p.parent.resolve()


def _resolve(base, value):
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def _out_path(args, cfg, base, key="out"):
    if args.out is not None:
        return Path(args.out)
    if key in cfg:
        return _resolve(base, cfg[key])
    raise DataError("no output location: pass --out or set 'out' in the config")


def _seed(args, cfg, default=0):
    return int(args.seed if args.seed is not None else cfg.get("seed", default))


# atomic output helpers


def _fresh_dir(target: Path, force: bool):
    if target.exists() and any(target.iterdir()) and not force:
        raise DataError(f"output directory {target} is not empty (use --force to replace)")
    tmp = target.with_name(target.name + f".tmp-{os.getpid()}")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    return tmp


def _commit_dir(tmp: Path, target: Path):
    if target.exists():
        shutil.rmtree(target)
    os.replace(tmp, target)


def _write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# phantom-gen


def _phantom_base(cfg):
    section = dict(cfg.get("phantom", {}))
    try:
        return PhantomSpec(**section)
    except TypeError as e:
        raise DataError(f"bad [phantom] section: {e}") from None


def case_seeds(master_seed, count):
    return [int(s) for s in np.random.SeedSequence(master_seed).generate_state(count)]


def cmd_phantom_gen(args):
    cfg, base = load_config(args.config)
    count = int(args.count if args.count is not None else cfg.get("count", 10))
    if count < 1:
        raise DataError("count must be >= 1")
    seed = _seed(args, cfg)
    spec = _phantom_base(cfg)
    require_boundary = bool(cfg.get("require_boundary", True))
    fixed_range = "first_label" in cfg.get("phantom", {}) or "last_label" in cfg.get("phantom", {})
    out = _out_path(args, cfg, base)
    specs = []
    for i, s in enumerate(case_seeds(seed, count)):
        case_spec = replace(spec, seed=s) if fixed_range else random_phantom_spec(s, spec, require_boundary)
        specs.append((f"case{i:03d}", case_spec))
    # validate every spec before touching the disk
    for _, s in specs:
        check_feasible(s)
    tmp = _fresh_dir(out, args.force)
    cases = []
    for name, s in specs:
        write_phantom(generate_phantom(s), tmp / name, s)
        cases.append({"name": name, "path": name, "seed": s.seed, "first_label": s.first_label, "last_label": s.last_label})
    manifest = {"seed": seed, "count": count, "phantom": spec.to_dict(), "cases": cases}
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1))
    _commit_dir(tmp, out)
    print(f"wrote {count} phantoms to {out}")
    return EXIT_OK


# training


def train_config_from(cfg, stage, seed):
    preset = SEMANTIC if stage == 1 else INSTANCE
    net_cfg = NetConfig(**{**preset.to_dict(), **cfg.get("net", {}), "in_channels": preset.in_channels, "out_channels": preset.out_channels})
    aug = AugmentSpec(**cfg.get("augment", {}))
    keys = ("lr", "batch_size", "iterations", "keep_fraction", "jitter_vox", "roi_margin", "class_balance")
    extra = {k: cfg[k] for k in keys if k in cfg}
    return TrainConfig(stage=stage, net=net_cfg, augment=aug, seed=seed, **extra)


def _train_cmd(args, stage):
    cfg, base = load_config(args.config)
    section = {**cfg, **cfg.get(f"stage{stage}", {})}
    seed = _seed(args, section)
    try:
        tcfg = train_config_from(section, stage, seed)
    except (TypeError, ValueError) as e:
        raise DataError(f"bad training config: {e}") from None
    if args.iterations is not None:
        tcfg = replace(tcfg, iterations=args.iterations)
    dataset = _resolve(base, args.dataset or section.get("dataset"))
    if dataset is None or not (dataset / "manifest.json").is_file():
        raise DataError(f"dataset manifest not found under {dataset}")
    names = section.get("cases")
    cases = load_dataset(dataset, names)
    out = _out_path(args, cfg, base)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    every = max(1, tcfg.iterations // 20)

    def log(it, loss):
        rows.append((it, loss))
        if not args.quiet and (it % every == 0 or it == tcfg.iterations - 1):
            print(f"stage{stage} iter {it + 1}/{tcfg.iterations} loss {loss:.5f}", flush=True)

    result = train(cases, tcfg, log)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "loss"])
    for it, loss in rows:
        w.writerow([it + 1, repr(float(loss))])
    _write_text(out / f"stage{stage}_loss.csv", buf.getvalue())
    result.net.save(out / f"stage{stage}", result.optimizer)
    print(f"stage{stage} checkpoint written to {out / f'stage{stage}.json'} ({result.seconds:.1f} s)")
    return EXIT_OK


# inference


def cascade_params_from(cfg):
    try:
        return CascadeParams(**cfg.get("cascade", {}))
    except (TypeError, ValueError) as e:
        raise DataError(f"bad [cascade] section: {e}") from None


def _gray(v: Volume, plane):
    norm = clip_normalize(v).data
    return ((norm[plane] + 1.0) * 127.5).clip(0, 255)


def slice_images(volume: Volume, instance_ids: np.ndarray):
    """Mid-axial (x-y) and sagittal (y-z) 8-bit slices with instances tinted."""
    nx, ny, nz = volume.dims
    if instance_ids.any():
        idx = np.nonzero(instance_ids)
        x_mid, z_mid = int(np.median(idx[0])), int(np.median(idx[2]))
    else:
        x_mid, z_mid = nx // 2, nz // 2
    out = {}
    for name, plane in (("axial", (slice(None), slice(None), z_mid)), ("sagittal", (x_mid, slice(None), slice(None)))):
        gray = _gray(volume, plane)
        ids = instance_ids[plane]
        tint = np.where(ids > 0, 96 + (ids.astype(np.int64) * 53) % 160, 0)
        img = np.where(ids > 0, 0.4 * gray + 0.6 * tint, gray)
        out[name] = np.round(img).astype(np.uint8).T  # rows follow the second array axis
    return out


def write_pgm(path: Path, img: np.ndarray):
    h, w = img.shape
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())
    os.replace(tmp, path)


def cmd_infer(args):
    cfg, base = load_config(args.config)
    params = cascade_params_from(cfg)
    vol_path = Path(args.volume) if args.volume else _resolve(base, cfg.get("volume"))
    s1 = Path(args.stage1) if args.stage1 else _resolve(base, cfg.get("stage1_checkpoint"))
    s2 = Path(args.stage2) if args.stage2 else _resolve(base, cfg.get("stage2_checkpoint"))
    if vol_path is None or s1 is None or s2 is None:
        raise DataError("infer needs --volume, --stage1 and --stage2 (or the config keys volume, stage1_checkpoint, stage2_checkpoint)")
    volume = read_volume(vol_path)
    if not isinstance(volume, Volume):
        raise DataError(f"{vol_path} holds labels, not an image")
    net1, net2 = load_net(s1), load_net(s2)
    if net1.kind != "semantic" or net2.kind != "instance":
        raise DataError("stage1 must be a semantic checkpoint and stage2 an instance checkpoint")
    out = _out_path(args, cfg, base)
    result = run_cascade(volume, net1, net2, params)
    tmp = _fresh_dir(out, True)
    write_result(result, tmp)
    if args.dump_slices:
        for name, img in slice_images(volume, result.instance_labels.data).items():
            write_pgm(tmp / f"{name}.pgm", img)
    _commit_dir(tmp, out)
    labels = [x.anatomical.name if x.anatomical else "?" for x in result.instances]
    print(f"{len(result.instances)} vertebrae: {' '.join(labels)}")
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


# evaluation


def _load_bundle(directory):
    d = Path(directory)
    report = json.loads((d / "report.json").read_text())
    ids = read_volume(d / "instances.json")
    return report, ids


def match_by_overlap(pred_ids, truth_ids, k):
    t = truth_ids == k
    n = int(pred_ids.max())
    overlap = np.bincount(pred_ids[t], minlength=n + 1)[1:]
    if overlap.size == 0 or overlap.max() == 0:
        return np.zeros_like(t)
    return pred_ids == int(np.argmax(overlap)) + 1


def evaluate_case(pred_dir, truth_dir):
    """Segmentation rows and localization inputs for one (bundle, phantom) pair."""
    report, ids = _load_bundle(pred_dir)
    truth = read_phantom(truth_dir)
    if ids.dims != truth.instance_labels.dims or ids.spacing != truth.instance_labels.spacing:
        raise DataError(f"{pred_dir} and {truth_dir} have different geometry")
    inst_rows = []
    for k, lab in enumerate(truth.anatomical, start=1):
        m = seg_metrics(match_by_overlap(ids.data, truth.instance_labels.data, k), truth.instance_labels.data == k, ids.spacing)
        inst_rows.append({"label": lab.name, "dice": m.dice, "assd_mm": m.assd_mm, "hd_mm": m.hd_mm})
    pred = [(x["anatomical"], x["centroid_mm"]) for x in report["instances"] if x["anatomical"] is not None]
    truth_pts = [(lab.name, c) for lab, c in zip(truth.anatomical, truth.centroids_mm)]
    return inst_rows, pred, truth_pts


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return v


def cmd_eval(args):
    preds, truths = args.pred or [], args.truth or []
    if not preds or len(preds) != len(truths):
        raise DataError(f"need matching --pred/--truth lists, got {len(preds)} and {len(truths)}")
    for p, t in zip(preds, truths):
        if Path(p).name != Path(t).name and not args.allow_name_mismatch:
            raise DataError(f"case mismatch: {p} vs {t}")
    out = Path(args.out) if args.out else None
    if out is None:
        raise DataError("eval needs --out")
    case_rows, inst_table, loc_cases = [], [], []
    for p, t in zip(preds, truths):
        inst_rows, pred, truth_pts = evaluate_case(p, t)
        name = Path(t).name
        dices = [r["dice"] for r in inst_rows]
        finite = [r for r in inst_rows if not math.isnan(r["assd_mm"])]
        case_rows.append(
            {
                "case": name,
                "dice": float(np.mean(dices)) if dices else float("nan"),
                "assd_mm": float(np.mean([r["assd_mm"] for r in finite])) if finite else float("nan"),
                "hd_mm": float(np.mean([r["hd_mm"] for r in finite])) if finite else float("nan"),
                "n": len(inst_rows),
                "undefined": len(inst_rows) - len(finite),
            }
        )
        inst_table.extend({"case": name, **r} for r in inst_rows)
        loc_cases.append((pred, truth_pts))
    out.mkdir(parents=True, exist_ok=True)

    def table(rows, cols):
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})
        return buf.getvalue()

    _write_text(out / "segmentation.csv", table(case_rows, ["case", "dice", "assd_mm", "hd_mm", "n", "undefined"]))
    _write_text(out / "segmentation_instances.csv", table(inst_table, ["case", "label", "dice", "assd_mm", "hd_mm"]))
    rows = report_rows(loc_cases, args.radius)
    _write_text(out / "localization.csv", rows_to_csv(rows))
    print(rows_to_text(rows), end="")
    return EXIT_OK


# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--config", help="TOML or JSON config; relative paths inside resolve against its directory")
    common.add_argument("--out", help="output directory")

    p = _Parser(prog="spinecascade", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("phantom-gen", parents=[common], help="write a synthetic phantom dataset")
    g.add_argument("--count", type=int)
    g.add_argument("--force", action="store_true", help="replace a non-empty output directory")
    g.set_defaults(func=cmd_phantom_gen)

    for stage in (1, 2):
        t = sub.add_parser(f"train-stage{stage}", parents=[common], help=f"train the stage-{stage} network")
        t.add_argument("--dataset", help="dataset directory (overrides the config)")
        t.add_argument("--iterations", type=int)
        t.add_argument("--quiet", action="store_true")
        t.set_defaults(func=lambda a, s=stage: _train_cmd(a, s))

    i = sub.add_parser("infer", parents=[common], help="run the cascade on one volume")
    i.add_argument("--volume")
    i.add_argument("--stage1", help="stage-1 checkpoint (.json)")
    i.add_argument("--stage2", help="stage-2 checkpoint (.json)")
    i.add_argument("--dump-slices", action="store_true", help="also write axial.pgm and sagittal.pgm")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", parents=[common], help="score result bundles against phantom truth")
    e.add_argument("--pred", nargs="+", help="result bundle directories")
    e.add_argument("--truth", nargs="+", help="phantom case directories, same order")
    e.add_argument("--radius", type=float, default=ID_RADIUS_MM, help="identification radius in mm")
    e.add_argument("--allow-name-mismatch", action="store_true")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NoSpineFound as e:
        print(f"no spine found: {e}", file=sys.stderr)
        return EXIT_NO_SPINE
    except (DataError, VolumeIOError, CheckpointError, PhantomSpecError, FileNotFoundError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
