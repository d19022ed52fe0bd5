"""Scene x quality sweeps comparing rprr against independent transmission.

A config is a plain ``key = value`` file::

    scenes = standard            # "standard", preset names, raw:<dir> or tum:<dir>
    width = 640                  # synthetic scenes only
    height = 480
    qualities = 100, 85, 70, 50, 30
    seed = 0                     # RPRR_SEED in the environment wins
    transport = inprocess        # or socket
    workers = 1                  # >1 runs cells in worker processes
    postprocess = true
    threshold.max_byte_ratio = 0.67
    threshold.min_psnr_q100 = 30
    threshold.psnr_monotone = true

Each cell (scene, quality) runs one rprr session and one independent
transmission and yields two CSV rows. Timing-derived columns are listed in
``TIMING_COLUMNS``; every other column is a pure function of config and seed.
"""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .datasets import load_scene_pair, parse_key_values
from .errors import IngestionError, RPRRError, ValidationError
from .geometry import Intrinsics
from .metrics import EnergyModel, bpp_of, energy_estimate, psnr
from .postproc import FilterConfig
from .scenes import gen_synthetic_scene, standard_scenes
from .session import SessionConfig, run_independent, run_session

COLUMNS = ["scene", "scheme", "quality", "depth_bytes", "color_bytes", "total_bytes", "bpp",
           "psnr_db", "iterations", "byte_ratio", "error", "t_p", "t_e", "t_s", "energy_mj"]
TIMING_COLUMNS = ("t_p", "t_e", "t_s", "energy_mj")
DEFAULT_QUALITIES = (100, 85, 70, 50, 30)

_THRESHOLD_KEYS = {"max_byte_ratio", "min_psnr_q100", "psnr_monotone"}
_KEYS = {"scenes", "width", "height", "qualities", "seed", "transport", "workers", "postprocess",
         "ghost_delta_mm", "ghost_majority", "crack_max_window", "frame_gap", "frame_index"}


def _bool(text, key):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"{key}: expected true/false, got {text!r}")


@dataclass
class ExperimentConfig:
    scenes: list = field(default_factory=lambda: ["standard"])
    width: int = 640
    height: int = 480
    qualities: tuple = DEFAULT_QUALITIES
    seed: int = 0
    transport: str = "inprocess"
    workers: int = 1
    postprocess: bool = True
    filters: FilterConfig = FilterConfig()
    frame_index: int = 0
    frame_gap: int = 10
    thresholds: dict = field(default_factory=dict)

    @classmethod
    def from_text(cls, text, source="<config>", env=None):
        env = os.environ if env is None else env
        kv = parse_key_values(text, source)
        cfg, filt = cls(), {}
        for key, value in kv.items():
            try:
                if key.startswith("threshold."):
                    name = key.split(".", 1)[1]
                    if name not in _THRESHOLD_KEYS:
                        raise ValidationError(f"unknown threshold {name!r} "
                                              f"(known: {', '.join(sorted(_THRESHOLD_KEYS))})")
                    cfg.thresholds[name] = _bool(value, key) if name == "psnr_monotone" else float(value)
                elif key not in _KEYS:
                    raise ValidationError(f"unknown key {key!r} (known: {', '.join(sorted(_KEYS))})")
                elif key == "scenes":
                    cfg.scenes = [s.strip() for s in value.split(",") if s.strip()]
                elif key == "qualities":
                    cfg.qualities = tuple(int(q) for q in value.split(","))
                elif key == "transport":
                    cfg.transport = value
                elif key == "postprocess":
                    cfg.postprocess = _bool(value, key)
                elif key in ("ghost_delta_mm", "ghost_majority"):
                    filt["ghost_range_delta" if key == "ghost_delta_mm" else key] = float(value)
                elif key == "crack_max_window":
                    filt[key] = int(value)
                else:
                    setattr(cfg, key, int(value))
            except ValueError as exc:
                raise ValidationError(f"{source}: {key}: {exc}") from None
        if filt:
            cfg.filters = FilterConfig(**filt)
        if env.get("RPRR_SEED"):
            try:
                cfg.seed = int(env["RPRR_SEED"])
            except ValueError:
                raise ValidationError(f"RPRR_SEED must be an integer, got {env['RPRR_SEED']!r}") from None
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, env=None):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise IngestionError(f"{path}: cannot read config ({exc.strerror})") from None
        return cls.from_text(text, str(path), env)

    def validate(self):
        if not self.scenes:
            raise ValidationError("no scenes configured")
        if not self.qualities or any(not 0 <= q <= 100 for q in self.qualities):
            raise ValidationError("qualities must be a non-empty list in 0..100")
        if self.transport not in ("inprocess", "socket"):
            raise ValidationError(f"transport must be inprocess or socket, not {self.transport!r}")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")


def resolve_scenes(cfg: ExperimentConfig):
    """``(name, ScenePair)`` for every configured scene, in config order."""
    K = Intrinsics.default(cfg.width, cfg.height)
    presets = {s.name: s for s in standard_scenes(K)}
    out = []
    for entry in cfg.scenes:
        if entry == "standard":
            out += [(s.name, gen_synthetic_scene(s, cfg.seed)) for s in presets.values()]
        elif entry in presets:
            out.append((entry, gen_synthetic_scene(presets[entry], cfg.seed)))
        elif entry.startswith(("raw:", "tum:")):
            fmt, path = entry.split(":", 1)
            pair = load_scene_pair(path, fmt, index=cfg.frame_index, gap=cfg.frame_gap)
            out.append((pair.name or entry, pair))
        else:
            raise IngestionError(f"unknown scene {entry!r}: use 'standard', one of "
                                 f"{', '.join(presets)}, raw:<dir> or tum:<dir>")
    names = [n for n, _ in out]
    if len(set(names)) != len(names):
        raise ValidationError("scene names must be unique")
    return out


def _row(scene, scheme, quality, rec, C_ref, C_hat, K, model):
    return {
        "scene": scene, "scheme": scheme, "quality": quality,
        "depth_bytes": rec.depth_bytes, "color_bytes": rec.color_bytes,
        "total_bytes": rec.total,
        "bpp": bpp_of(rec.total, K.width, K.height),
        "psnr_db": psnr(C_ref, C_hat),
        "iterations": rec.iterations, "byte_ratio": "", "error": "",
        "t_p": rec.t_p, "t_e": rec.t_e, "t_s": rec.t_s,
        "energy_mj": 1000.0 * energy_estimate(rec, model),
    }


def _error_row(scene, scheme, quality, exc):
    row = dict.fromkeys(COLUMNS, "")
    row.update(scene=scene, scheme=scheme, quality=quality,
               error=f"{type(exc).__name__}: {exc}".replace("\n", " "))
    return row


def run_cell(scene, pair, quality, cfg: ExperimentConfig, model=EnergyModel()):
    """Two rows (rprr, independent) for one scene at one colour quality."""
    K = pair.intrinsics
    rows = []
    scfg = SessionConfig(quality=quality, seed=cfg.seed, postprocess=cfg.postprocess,
                         filters=cfg.filters)
    try:
        _, C_hat, _, rec = run_session(cfg.transport, (pair.Z_a, pair.C_a), (pair.Z_b, pair.C_b),
                                       K, scfg)
        rows.append(_row(scene, "rprr", quality, rec, pair.C_b, C_hat, K, model))
    except (RPRRError, ValueError) as exc:
        rows.append(_error_row(scene, "rprr", quality, exc))
    try:
        _, C_ind, rec = run_independent((pair.Z_a, pair.C_a), (pair.Z_b, pair.C_b), K, quality,
                                        cfg.transport, return_frames=True)
        rows.append(_row(scene, "independent", quality, rec, pair.C_b, C_ind, K, model))
    except (RPRRError, ValueError) as exc:
        rows.append(_error_row(scene, "independent", quality, exc))
    if not rows[0]["error"] and not rows[1]["error"]:
        rows[0]["byte_ratio"] = rows[0]["total_bytes"] / rows[1]["total_bytes"]
    return rows


def _cell_job(args):
    return run_cell(*args)


def run_rows(cfg: ExperimentConfig):
    scenes = resolve_scenes(cfg)
    jobs = [(name, pair, q, cfg) for name, pair in scenes for q in cfg.qualities]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_cell_job, jobs))
    else:
        results = [_cell_job(j) for j in jobs]
    return [row for cell in results for row in cell]


# -- reporting --------------------------------------------------------------------------

def _fmt(value):
    if isinstance(value, float):
        return "inf" if math.isinf(value) else f"{value:.6f}"
    return str(value)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r[k]) for k in COLUMNS})
    return buf.getvalue()


def strip_timing(csv_text) -> str:
    """The CSV with timing-derived columns removed; equal across repeat runs."""
    rows = list(csv.DictReader(io.StringIO(csv_text)))
    keep = [c for c in COLUMNS if c not in TIMING_COLUMNS]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=keep, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def check_thresholds(rows, thresholds) -> list:
    """Messages for every failed check; empty means all passed."""
    failures = [f"{r['scene']}/{r['scheme']}/q{r['quality']}: {r['error']}" for r in rows if r["error"]]
    ok = [r for r in rows if not r["error"]]
    if "max_byte_ratio" in thresholds:
        lim = thresholds["max_byte_ratio"]
        for r in ok:
            if r["scheme"] == "rprr" and r["byte_ratio"] != "" and r["byte_ratio"] > lim:
                failures.append(f"{r['scene']} q{r['quality']}: byte ratio "
                                f"{r['byte_ratio']:.3f} > {lim}")
    if "min_psnr_q100" in thresholds:
        lim = thresholds["min_psnr_q100"]
        for r in ok:
            if r["quality"] == 100 and r["psnr_db"] < lim:
                failures.append(f"{r['scene']}/{r['scheme']} q100: PSNR {r['psnr_db']:.2f} dB < {lim}")
    if thresholds.get("psnr_monotone"):
        groups = {}
        for r in ok:
            groups.setdefault((r["scene"], r["scheme"]), []).append(r)
        for (scene, scheme), rs in groups.items():
            rs = sorted(rs, key=lambda r: r["bpp"])
            for lo, hi in zip(rs, rs[1:]):
                if lo["psnr_db"] > hi["psnr_db"]:
                    failures.append(f"{scene}/{scheme}: PSNR rises from {hi['psnr_db']:.2f} to "
                                    f"{lo['psnr_db']:.2f} dB as bpp drops to {lo['bpp']:.3f}")
    return failures


def summarize(rows, failures) -> str:
    lines = ["scene                    q    rprr bytes  indep bytes  ratio  rprr dB  indep dB  iters"]
    by = {(r["scene"], r["quality"], r["scheme"]): r for r in rows}
    for scene, q in dict.fromkeys((r["scene"], r["quality"]) for r in rows):
        a, b = by.get((scene, q, "rprr")), by.get((scene, q, "independent"))
        if a is None or b is None or a["error"] or b["error"]:
            lines.append(f"{scene:<24} {q:>3}  error")
            continue
        lines.append(f"{scene:<24} {q:>3}  {a['total_bytes']:>10}  {b['total_bytes']:>11}  "
                     f"{a['byte_ratio']:.3f}  {a['psnr_db']:7.2f}  {b['psnr_db']:8.2f}  "
                     f"{a['iterations']:>5}")
    lines.append("")
    lines += ["FAIL " + f for f in failures] or ["all thresholds passed"]
    return "\n".join(lines) + "\n"


def run_experiment(config, out_dir, env=None):
    """Run the sweep in ``config`` (path or :class:`ExperimentConfig`), write
    ``results.csv`` and ``summary.txt`` into ``out_dir`` and return
    ``(rows, failures)``. The caller exits nonzero when failures is non-empty."""
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.load(config, env)
    rows = run_rows(cfg)
    failures = check_thresholds(rows, cfg.thresholds)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(rows_to_csv(rows))
    (out / "summary.txt").write_text(summarize(rows, failures))
    return rows, failures
