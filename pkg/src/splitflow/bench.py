"""Ablation benchmark, eta_dec sweep and the aggregation-inequality harness.

Every (method, eta_dec, seed) job is independent and seeded, so the process
pool and the serial path produce the same numbers.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .editing import EditSchedule, check_vfa_inequality, run_edit
from .errors import SplitFlowError
from .metrics import NOT_APPLICABLE, background_displacement, energy_distance, mse, ssim_or_na

METRICS_HEADER = "# splitflow-metrics v1"
PER_SEED_HEADER = "# splitflow-per-seed v1"
VFA_HEADER = "# splitflow-vfa-margins v1"
METRIC_COLUMNS = ("method", "eta_dec", "mse", "psnr", "ssim", "energy_distance_to_target",
                  "background_displacement", "step_count", "n_seeds", "failures")
PLOTTED = ("background_displacement", "energy_distance_to_target", "mse")


@dataclass
class EditTaskData:
    """Everything a bench job needs besides the field."""

    x0_by_seed: dict
    cond_src: object
    cond_tgt: object
    sub_conds: list
    mask: np.ndarray
    target_cloud: np.ndarray
    peak: float


@dataclass
class JobResult:
    method: str
    eta_dec: int
    seed: int
    latent: Optional[np.ndarray] = None
    background_displacement: Optional[float] = None
    mse: Optional[float] = None
    ssim: object = NOT_APPLICABLE
    step_count: Optional[int] = None
    error: Optional[str] = None


@dataclass
class MetricReport:
    rows: list
    per_seed: list
    fingerprint: str
    seeds: tuple
    proxies: dict = field(default_factory=lambda: {
        "energy_distance_to_target": "proxy for target alignment (text-image similarity)",
        "background_displacement": "proxy for background preservation",
    })

    def to_dict(self) -> dict:
        return {"format": "splitflow-metrics", "version": 1, "fingerprint": self.fingerprint,
                "seeds": list(self.seeds), "proxies": self.proxies, "rows": self.rows}


def config_fingerprint(cfg) -> str:
    """Short stable hash of everything that determines bench numbers."""
    payload = {
        "scene": {"shape": cfg.scene.shape, "spread": cfg.scene.spread, "background": cfg.scene.background.tolist(),
                  "attributes": [(a.name, a.locations, a.means.tolist()) for a in cfg.scene.attributes]},
        "model": asdict(cfg.model), "train": asdict(cfg.train), "schedule": asdict(cfg.schedule),
        "edit": asdict(cfg.edit), "task": asdict(cfg.task), "bench": asdict(cfg.bench), "seeds": cfg.seeds,
    }
    blob = json.dumps(payload, sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def prepare_task(cfg, seeds: Optional[Sequence[int]] = None) -> EditTaskData:
    from .prompts import decompose_attributes

    scene = cfg.scene
    seeds = cfg.seeds if seeds is None else seeds
    src, tgt = cfg.task.source, cfg.task.target
    cond_src, cond_tgt = scene.condition(src), scene.condition(tgt)
    subs = decompose_attributes(cond_src, cond_tgt, scene.block_layout(), cfg.edit.max_sub_prompts).sub_prompts
    x0s = {s: scene.sample(1, np.random.default_rng(cfg.bench.source_seed_offset + s), src)[0][0] for s in seeds}
    cloud = scene.sample(cfg.bench.target_samples, np.random.default_rng(cfg.bench.target_seed), tgt)[0]
    return EditTaskData(x0s, cond_src, cond_tgt, subs, scene.edit_mask(src, tgt), cloud, scene.data_range())


def _background_only(x, x0, mask):
    out = np.array(x0, copy=True)
    keep = mask == 0
    out[:, keep] = x[:, keep]
    return out


def run_job(fld, task: EditTaskData, cfg, method: str, eta_dec: int, seed: int) -> JobResult:
    res = JobResult(method, eta_dec, seed)
    schedule = EditSchedule(cfg.schedule.T, cfg.schedule.eta_max, eta_dec)
    x0 = task.x0_by_seed[seed]
    edit_cfg = type(cfg.edit)(**{**asdict(cfg.edit), "seed": seed})
    try:
        x, report = run_edit(method, fld, x0, task.cond_src, task.cond_tgt, schedule, edit_cfg, task.sub_conds)
    except SplitFlowError as exc:
        res.error = f"{type(exc).__name__}: {exc}"
        return res
    keep = task.mask == 0
    res.latent = x
    res.background_displacement = background_displacement(x0, x, task.mask)
    res.mse = mse(x[:, keep], x0[:, keep]) if keep.any() else 0.0
    res.ssim = ssim_or_na(_background_only(x, x0, task.mask), x0, peak=task.peak)
    res.step_count = report.delta_evals
    return res


_WORKER = {}


def _init_worker(fld, task, cfg):
    _WORKER.update(fld=fld, task=task, cfg=cfg)


def _pool_job(args):
    return run_job(_WORKER["fld"], _WORKER["task"], _WORKER["cfg"], *args)


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if math.isinf(v):
        return "inf"
    return repr(float(v))


def aggregate(results: Sequence[JobResult], task: EditTaskData, methods, sweep) -> list:
    rows = []
    for eta in sweep:
        for m in methods:
            group = [r for r in results if r.method == m and r.eta_dec == eta]
            ok = [r for r in group if r.error is None]
            row = {"method": m, "eta_dec": eta, "n_seeds": len(group), "failures": len(group) - len(ok)}
            if not ok:
                row.update({c: NOT_APPLICABLE for c in METRIC_COLUMNS if c not in row})
                rows.append(row)
                continue
            m_mse = float(np.mean([r.mse for r in ok]))
            ssims = [r.ssim for r in ok]
            row.update({
                "mse": m_mse,
                "psnr": math.inf if m_mse == 0 else 10.0 * math.log10(task.peak ** 2 / m_mse),
                "ssim": NOT_APPLICABLE if any(s == NOT_APPLICABLE for s in ssims) else float(np.mean(ssims)),
                "energy_distance_to_target": energy_distance(np.stack([r.latent for r in ok]), task.target_cloud),
                "background_displacement": float(np.mean([r.background_displacement for r in ok])),
                "step_count": int(round(np.mean([r.step_count for r in ok]))),
            })
            rows.append(row)
    return rows


def run_bench(fld, cfg, workers: Optional[int] = None) -> MetricReport:
    """Run every toggled method at every sweep point for every seed."""
    task = prepare_task(cfg)
    jobs = [(m, eta, s) for eta in cfg.sweep_points for m in cfg.bench.methods for s in cfg.seeds]
    workers = cfg.bench.workers if workers is None else workers
    if workers > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(fld, task, cfg)) as pool:
            results = list(pool.map(_pool_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [run_job(fld, task, cfg, *j) for j in jobs]
    rows = aggregate(results, task, cfg.bench.methods, cfg.sweep_points)
    return MetricReport(rows, results, config_fingerprint(cfg), cfg.seeds)


def write_metrics_csv(path, report: MetricReport) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"{METRICS_HEADER} fingerprint={report.fingerprint} seeds={len(report.seeds)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in report.rows:
            w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])


def write_per_seed_csv(path, report: MetricReport) -> None:
    cols = ("method", "eta_dec", "seed", "background_displacement", "mse", "step_count", "status")
    with open(path, "w", newline="") as fh:
        fh.write(f"{PER_SEED_HEADER} fingerprint={report.fingerprint}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in report.per_seed:
            if r.error is None:
                w.writerow([r.method, r.eta_dec, r.seed, _fmt(r.background_displacement), _fmt(r.mse), r.step_count, "ok"])
            else:
                w.writerow([r.method, r.eta_dec, r.seed, NOT_APPLICABLE, NOT_APPLICABLE, NOT_APPLICABLE, r.error])


def write_metrics_json(path, report: MetricReport) -> None:
    def clean(v):
        return "inf" if isinstance(v, float) and math.isinf(v) else v
    doc = report.to_dict()
    doc["rows"] = [{k: clean(v) for k, v in row.items()} for row in doc["rows"]]
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_metrics_csv(path) -> list:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def plot_metrics(rows: list, out_dir, methods: Sequence[str]) -> list:
    """One SVG per metric against eta_dec, a marked line per method. Timestamps are left out."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    with matplotlib.rc_context({"svg.hashsalt": "splitflow", "svg.fonttype": "none"}):
        for metric in PLOTTED:
            fig, ax = plt.subplots(figsize=(5, 3.5))
            for m in methods:
                pts = sorted((r["eta_dec"], r[metric]) for r in rows if r["method"] == m and r[metric] != NOT_APPLICABLE)
                if pts:
                    ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=m)
            ax.set_xlabel("eta_dec")
            ax.set_ylabel(metric)
            ax.invert_xaxis()
            if ax.lines:
                ax.legend(fontsize="small")
            fig.tight_layout()
            path = out_dir / f"{metric}_vs_eta_dec.svg"
            fig.savefig(path, format="svg", metadata={"Date": None})
            plt.close(fig)
            paths.append(path)
    return paths


# --- inequality harness ----------------------------------------------------------

@dataclass
class VfaCheckResult:
    margins: np.ndarray
    gibbs: np.ndarray
    jensen: np.ndarray
    ks: np.ndarray
    dims: np.ndarray

    @property
    def worst(self) -> float:
        return float(min(self.margins.min(), self.gibbs.min(), self.jensen.min()))

    def passed(self, tol: float = 1e-9) -> bool:
        return self.worst >= -tol


def vfa_trials(trials: int, dims: Sequence[int] = (2, 16, 128), ks: Sequence[int] = tuple(range(1, 9)),
               seed: int = 0) -> VfaCheckResult:
    """Random unit-vector sets, each scored by :func:`check_vfa_inequality`."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if not dims or not ks or min(dims) < 1 or min(ks) < 1:
        raise ValueError("dims and ks must be non-empty positive lists")
    rng = np.random.default_rng(seed)
    out = {k: np.empty(trials) for k in ("margin", "gibbs", "jensen")}
    kk = rng.choice(np.asarray(ks), size=trials)
    dd = rng.choice(np.asarray(dims), size=trials)
    for t in range(trials):
        g = rng.standard_normal((kk[t], dd[t]))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        m = check_vfa_inequality(g)
        out["margin"][t], out["gibbs"][t], out["jensen"][t] = m.margin, m.gibbs, m.jensen
    return VfaCheckResult(out["margin"], out["gibbs"], out["jensen"], kk, dd)


def write_margin_histogram(path, result: VfaCheckResult, bins: int = 40) -> None:
    lo, hi = float(result.margins.min()), float(result.margins.max())
    if hi <= lo:
        hi = lo + 1.0
    counts, edges = np.histogram(result.margins, bins=bins, range=(lo, hi))
    with open(path, "w", newline="") as fh:
        fh.write(f"{VFA_HEADER} trials={len(result.margins)} min_margin={lo!r} "
                 f"min_gibbs={float(result.gibbs.min())!r} min_jensen={float(result.jensen.min())!r}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("bin_lo", "bin_hi", "count"))
        for a, b, c in zip(edges[:-1], edges[1:], counts):
            w.writerow((repr(float(a)), repr(float(b)), int(c)))
