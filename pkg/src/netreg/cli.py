"""Command-line interface.

Commands: phantom, register, eval, gradcheck, ablate, overlay. Settings
come from an optional --config file of `key = value` lines plus any
number of --set key=value overrides; unknown keys are rejected. Every
command writes the fully resolved configuration into its output
directory, and re-running from that file reproduces the outputs.

Exit codes: 0 success, 1 usage or configuration error, 2 input file
format error, 3 numerical divergence (including gradient-check failure).
"""

from __future__ import annotations

import argparse
import multiprocessing
import os
import sys
import time

import numpy as np

from . import gradcheck as gc
from .losses import LossWeights
from .metrics import EvalReport, LabeledMasks, evaluate
from .network import NetConfig
from .optim import (DivergenceError, ScheduleConfig, register_direct,
                    register_pyramid, write_trace_csv)
from .phantom import default_spec, generate
from .volio import VolumeFormatError, normalize_intensity, read_volume, write_volume


class UsageError(Exception):
    pass


def _parse_bool(s: str) -> bool:
    t = s.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_int_list(s: str) -> tuple[int, ...]:
    t = s.strip()
    return tuple(int(p) for p in t.split(",")) if t else ()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


# key -> (parser, default); strings stay strings
KEY_SPECS: dict = {
    "out": (str, ""),
    "fixed": (str, ""),
    "moving": (str, ""),
    "init_field": (str, ""),
    "field": (str, ""),
    "warped": (str, ""),
    "case_dir": (str, ""),
    "normalize": (str, "minmax"),
    "method": (str, "pyramid"),
    "up_to_level": (int, 0),
    "workers": (int, 1),

    "net_depth": (int, 3),
    "net_base_channels": (int, 8),
    "net_residual_blocks_per_level": (int, 4),
    "net_use_residual_connections": (_parse_bool, True),
    "net_down_mode": (str, "strided_conv"),
    "net_up_mode": (str, "transpose_conv"),
    "net_activation_slope": (float, 0.2),
    "net_seed": (int, 0),
    "net_two_channel_input": (_parse_bool, False),

    "sched_iters_per_level": (_parse_int_list, ()),
    "sched_lr": (float, 1e-4),
    "sched_freeze_fraction": (float, 0.2),
    "sched_squaring_steps": (int, 7),
    "sched_seed": (int, 0),

    "loss_lambda_smooth": (float, 2.0),
    "loss_lambda_diffeo": (float, 1.0),
    "loss_ncc_window": (int, 7),

    "phantom_extent": (int, 64),
    "phantom_noise_level": (float, 0.02),
    "phantom_background": (float, 0.05),
    "phantom_seed": (int, 0),

    "ablate_configs": (str, "all"),
    "ablate_seeds": (int, 10),

    "gradcheck_seeds": (int, 2),
    "gradcheck_coords": (int, 24),
}


def _assign(cfg: dict, key: str, raw: str, origin: str):
    if key not in KEY_SPECS:
        raise UsageError(f"{origin}: unknown config key {key!r}")
    parser, _ = KEY_SPECS[key]
    try:
        cfg[key] = parser(raw)
    except ValueError as e:
        raise UsageError(f"{origin}: bad value for {key}: {e}")


def resolve_config(config_path: str | None, overrides: list[str]) -> dict:
    cfg = {k: d for k, (_, d) in KEY_SPECS.items()}
    if config_path:
        try:
            with open(config_path) as fh:
                lines = fh.readlines()
        except OSError as e:
            raise UsageError(f"cannot read config file: {e}")
        for i, line in enumerate(lines, start=1):
            t = line.split("#", 1)[0].strip()
            if not t:
                continue
            if "=" not in t:
                raise UsageError(f"{config_path}: line {i}: expected 'key = value'")
            k, v = t.split("=", 1)
            _assign(cfg, k.strip(), v.strip(), f"{config_path}: line {i}")
    for ov in overrides:
        if "=" not in ov:
            raise UsageError(f"--set needs key=value, got {ov!r}")
        k, v = ov.split("=", 1)
        _assign(cfg, k.strip(), v.strip(), "--set")
    return cfg


def _out_dir(cfg) -> str:
    out = cfg["out"]
    if not out:
        raise UsageError("this command requires --set out=DIR")
    os.makedirs(out, exist_ok=True)
    return out


def write_config_echo(cfg: dict, outdir: str):
    with open(os.path.join(outdir, "config.txt"), "w") as fh:
        for k in sorted(cfg):
            fh.write(f"{k} = {_fmt(cfg[k])}\n")


def _net_config(cfg) -> NetConfig:
    return NetConfig(depth=cfg["net_depth"], base_channels=cfg["net_base_channels"],
                     residual_blocks_per_level=cfg["net_residual_blocks_per_level"],
                     use_residual_connections=cfg["net_use_residual_connections"],
                     down_mode=cfg["net_down_mode"], up_mode=cfg["net_up_mode"],
                     activation_slope=cfg["net_activation_slope"], seed=cfg["net_seed"],
                     two_channel_input=cfg["net_two_channel_input"])


def _sched_config(cfg) -> ScheduleConfig:
    return ScheduleConfig(
        iters_per_level=cfg["sched_iters_per_level"] or None,
        lr=cfg["sched_lr"], freeze_fraction=cfg["sched_freeze_fraction"],
        weights=LossWeights(lambda_smooth=cfg["loss_lambda_smooth"],
                            lambda_diffeo=cfg["loss_lambda_diffeo"],
                            ncc_window=cfg["loss_ncc_window"]),
        squaring_steps=cfg["sched_squaring_steps"], seed=cfg["sched_seed"])


def _read_image(path, what) -> np.ndarray:
    if not path:
        raise UsageError(f"this command requires --set {what}=FILE")
    arr, _ = read_volume(path)
    if arr.ndim != 3:
        raise VolumeFormatError(f"{path}: expected a single-channel volume for {what}")
    return np.asarray(arr, dtype=np.float32)


def _read_field(path, what) -> np.ndarray:
    arr, _ = read_volume(path)
    if arr.ndim != 4 or arr.shape[0] != 3:
        raise VolumeFormatError(f"{path}: expected a 3-channel field for {what}")
    return np.asarray(arr, dtype=np.float32)


def cmd_phantom(cfg) -> int:
    out = _out_dir(cfg)
    spec = default_spec(cfg["phantom_extent"], cfg["phantom_seed"])
    spec.noise_level = cfg["phantom_noise_level"]
    spec.background = cfg["phantom_background"]
    case = generate(spec)
    write_volume(os.path.join(out, "fixed.nvol"), case.fixed)
    write_volume(os.path.join(out, "moving.nvol"), case.moving)
    write_volume(os.path.join(out, "phi_gt.nvol"), case.phi_gt)
    write_volume(os.path.join(out, "phi_reg.nvol"), case.phi_reg)
    for time_name, masks in (("fixed", case.fixed_masks), ("moving", case.moving_masks)):
        for label, m in {**masks.organs, **masks.lesions}.items():
            write_volume(os.path.join(out, f"mask_{time_name}_{label}.nvol"), m)
    write_config_echo(cfg, out)
    print(f"phantom case written to {out}")
    return 0


def _load_case_masks(case_dir: str):
    if not case_dir or not os.path.isdir(case_dir):
        raise UsageError("this command requires --set case_dir=DIR (a phantom output directory)")
    found = {"fixed": LabeledMasks({}, {}), "moving": LabeledMasks({}, {})}
    for name in sorted(os.listdir(case_dir)):
        if not (name.startswith("mask_") and name.endswith(".nvol")):
            continue
        rest = name[len("mask_"):-len(".nvol")]
        time_name, _, label = rest.partition("_")
        if time_name not in found or not label:
            raise VolumeFormatError(f"{case_dir}/{name}: mask files are named "
                                    "mask_<fixed|moving>_<label>.nvol")
        arr, _ = read_volume(os.path.join(case_dir, name))
        kind = found[time_name].lesions if label.startswith("lesion") else found[time_name].organs
        kind[label] = np.asarray(arr, dtype=bool)
    if not found["fixed"].organs and not found["fixed"].lesions:
        raise UsageError(f"no mask_*.nvol files in {case_dir}")
    return found["fixed"], found["moving"]


def cmd_register(cfg) -> int:
    out = _out_dir(cfg)
    fixed = normalize_intensity(_read_image(cfg["fixed"], "fixed"), cfg["normalize"])
    moving = normalize_intensity(_read_image(cfg["moving"], "moving"), cfg["normalize"])
    sched = _sched_config(cfg)
    if cfg["method"] == "pyramid":
        net_cfg = _net_config(cfg)
        init = _read_field(cfg["init_field"], "init_field") if cfg["init_field"] else None
        upto = cfg["up_to_level"] or None
        result = register_pyramid(fixed, moving, net_cfg, sched, init_field=init,
                                  up_to_level=upto)
    elif cfg["method"] == "direct":
        budget = sum(sched.resolve_iters(cfg["net_depth"]))
        result = register_direct(fixed, moving, sched, iterations=budget)
    else:
        raise UsageError(f"method must be 'pyramid' or 'direct', got {cfg['method']!r}")
    write_volume(os.path.join(out, "displacement.nvol"), result.displacement)
    write_volume(os.path.join(out, "warped.nvol"), result.warped)
    write_trace_csv(result.loss_trace, os.path.join(out, "loss_trace.csv"))
    with open(os.path.join(out, "report.csv"), "w") as fh:
        fh.write(EvalReport.csv_header() + "\n" + result.metrics.csv_row() + "\n")
    write_config_echo(cfg, out)
    print(f"registered in {result.wall_time:.1f} s over {result.iterations} iterations; "
          f"sdjdet {result.metrics.sdjdet:.4f}")
    return 0


def cmd_eval(cfg) -> int:
    out = _out_dir(cfg)
    if not cfg["field"]:
        raise UsageError("eval requires --set field=FILE (displacement to evaluate)")
    phi = _read_field(cfg["field"], "field")
    fixed_masks, moving_masks = _load_case_masks(cfg["case_dir"])
    report = evaluate(fixed_masks, moving_masks, phi)
    with open(os.path.join(out, "report.csv"), "w") as fh:
        fh.write(EvalReport.csv_header() + "\n" + report.csv_row() + "\n")
    write_config_echo(cfg, out)
    print("eval report: " + report.csv_row())
    return 0


def cmd_gradcheck(cfg) -> int:
    results = gc.run_suite(seeds=range(cfg["gradcheck_seeds"]),
                           max_coords=cfg["gradcheck_coords"], report=print)
    if all(r.passed for r in results):
        print(f"gradcheck: all {len(results)} operators passed")
        return 0
    print("gradcheck: FAILED")
    return 3


# ordered ablation lattice; each entry overrides the base configuration
ABLATE_CONFIGS: dict[str, dict] = {
    "depth_1": {"net_depth": 1},
    "depth_2": {"net_depth": 2},
    "depth_3": {"net_depth": 3},
    "depth_4": {"net_depth": 4},
    "no_residual": {"net_use_residual_connections": False},
    "pool_up": {"net_down_mode": "max_pool", "net_up_mode": "trilinear"},
    "no_regularization": {"loss_lambda_smooth": 0.0, "loss_lambda_diffeo": 0.0},
    "direct": {"method": "direct"},
    "level_1": {"up_to_level": 1},
    "level_2": {"up_to_level": 2},
    "two_channel": {"net_two_channel_input": True},
}


def _ablate_job(args) -> tuple:
    cfg, config_id, seed_index = args
    job = dict(cfg)
    job.update(ABLATE_CONFIGS[config_id])
    spec = default_spec(job["phantom_extent"], job["phantom_seed"] + seed_index)
    spec.noise_level = job["phantom_noise_level"]
    spec.background = job["phantom_background"]
    case = generate(spec)
    fixed = normalize_intensity(case.fixed, job["normalize"])
    moving = normalize_intensity(case.moving, job["normalize"])
    sched = _sched_config(job)
    t0 = time.monotonic()
    if job["method"] == "direct":
        budget = sum(sched.resolve_iters(job["net_depth"]))
        result = register_direct(fixed, moving, sched, iterations=budget)
    else:
        result = register_pyramid(fixed, moving, _net_config(job), sched,
                                  up_to_level=job["up_to_level"] or None)
    seconds = time.monotonic() - t0
    rep = evaluate(case.fixed_masks, case.moving_masks, result.displacement)
    return (config_id, seed_index, rep.dice_organs_mean, rep.dice_lesions_mean,
            rep.detection_rate, rep.disappearing_rate, rep.sdjdet,
            result.iterations, seconds)


def cmd_ablate(cfg) -> int:
    out = _out_dir(cfg)
    ids = list(ABLATE_CONFIGS) if cfg["ablate_configs"] == "all" else [
        s.strip() for s in cfg["ablate_configs"].split(",") if s.strip()]
    for i in ids:
        if i not in ABLATE_CONFIGS:
            raise UsageError(f"unknown ablate config {i!r}; known: {', '.join(ABLATE_CONFIGS)}")
    n_seeds = cfg["ablate_seeds"]
    if n_seeds < 1:
        raise UsageError("ablate_seeds must be >= 1")
    jobs = [(cfg, cid, s) for cid in ids for s in range(n_seeds)]
    if cfg["workers"] > 1:
        with multiprocessing.Pool(cfg["workers"]) as pool:
            rows = pool.map(_ablate_job, jobs)
    else:
        rows = [_ablate_job(j) for j in jobs]

    def agg(vals):
        vals = [v for v in vals if v is not None]
        return (float(np.mean(vals)), float(np.std(vals))) if vals else (None, None)

    lines = ["config_id,dice_organs_mean,dice_organs_std,dice_lesions_mean,"
             "dice_lesions_std,detection_rate,disappearing_rate,sdjdet,iterations,seconds"]
    for cid in ids:
        rs = [r for r in rows if r[0] == cid]
        do_m, do_s = agg([r[2] for r in rs])
        dl_m, dl_s = agg([r[3] for r in rs])
        det, _ = agg([r[4] for r in rs])
        dis, _ = agg([r[5] for r in rs])
        sdj, _ = agg([r[6] for r in rs])
        iters = rs[0][7]
        secs = sum(r[8] for r in rs)
        cells = [cid]
        for v in (do_m, do_s, dl_m, dl_s, det, dis, sdj):
            cells.append("na" if v is None else f"{v:.6f}")
        cells.append(str(iters))
        cells.append(f"{secs:.2f}")
        lines.append(",".join(cells))
    with open(os.path.join(out, "ablate.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    write_config_echo(cfg, out)
    print(f"ablate: {len(ids)} configs x {n_seeds} seeds -> {out}/ablate.csv")
    return 0


def _mid_slices(vol: np.ndarray):
    z, y, x = vol.shape
    return (("axial", vol[z // 2, :, :]),
            ("coronal", vol[:, y // 2, :]),
            ("sagittal", vol[:, :, x // 2]))


def _to_u8(img: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if hi <= lo:
        return np.zeros(img.shape, dtype=np.uint8)
    t = np.clip((img - lo) / (hi - lo), 0.0, 1.0)
    return (t * 255.0 + 0.5).astype(np.uint8)


def cmd_overlay(cfg) -> int:
    out = _out_dir(cfg)
    fixed = _read_image(cfg["fixed"], "fixed")
    warped = _read_image(cfg["warped"], "warped")
    if fixed.shape != warped.shape:
        raise VolumeFormatError(
            f"overlay extents differ: fixed {fixed.shape} vs warped {warped.shape}")
    f_lo, f_hi = float(fixed.min()), float(fixed.max())
    w_lo, w_hi = float(warped.min()), float(warped.max())
    for (name, fs), (_, ws) in zip(_mid_slices(fixed), _mid_slices(warped)):
        g = _to_u8(fs, f_lo, f_hi)
        p = _to_u8(ws, w_lo, w_hi)
        rgb = np.stack([p, g, p], axis=-1)  # fixed green, warped pink
        h, w = g.shape
        with open(os.path.join(out, f"overlay_{name}.ppm"), "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(rgb.tobytes())
    write_config_echo(cfg, out)
    print(f"overlays written to {out}")
    return 0


COMMANDS = {
    "phantom": cmd_phantom,
    "register": cmd_register,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "overlay": cmd_overlay,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="netreg", description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter, exit_on_error=False)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", default=None, help="file of key = value lines")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a single config key")
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args.config, args.overrides)
        return COMMANDS[args.command](cfg)
    except SystemExit as e:  # argparse --help or residual error paths
        return 0 if e.code in (0, None) else 1
    except (argparse.ArgumentError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except VolumeFormatError as e:
        print(f"input error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
