"""Command-line entry point: ``splitflow <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 numeric/runtime failure,
4 external-service failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .config import METHODS, load_config, reference_config
from .editing import EditSchedule, run_edit
from .errors import ConfigError, DimensionError, NetworkError, NumericError, ParseError, SplitFlowError
from .fields import Condition, MlpField, load_field, quantize, save_field
from .latent import load_any, save_latent, save_latent_text
from .prompts import (TEMPLATES, LlmEndpointConfig, PromptPair, decompose_attributes, decompose_llm,
                      decompose_manual, decompose_rule_based, format_numbered_list)
from .training import train, write_loss_csv

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_SERVICE = 0, 2, 3, 4
log = logging.getLogger("splitflow")


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _load_model(cfg, path=None):
    path = Path(path) if path else cfg.model_path
    if not path.is_file():
        raise ConfigError(f"model file not found: {path} (run `splitflow train` first)")
    fld = load_field(path)
    if tuple(fld.input_shape) != cfg.scene.shape or fld.cond_dim != cfg.scene.cond_dim:
        raise ConfigError(f"{path}: model shape does not match the configured scene")
    return fld


# --- train ---------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    fld = MlpField.create(cfg.scene.shape, cfg.scene.cond_dim, cfg.model.hidden, cfg.model.activation,
                          seed=cfg.model.init_seed)
    log.info("training %s field for %d steps", "x".join(map(str, cfg.model.hidden)), cfg.train.steps)
    trained, losses = train(fld, cfg.scene, cfg.train)
    cfg.models_dir.mkdir(parents=True, exist_ok=True)
    cfg.reports_dir.mkdir(parents=True, exist_ok=True)
    save_field(cfg.model_path, quantize(trained))
    write_loss_csv(cfg.reports_dir / "loss.csv", losses)
    w = max(1, len(losses) // 10)
    print(f"model: {cfg.model_path}")
    print(f"loss: {losses[:w].mean():.5f} (first {w} steps) -> {losses[-w:].mean():.5f} (last {w} steps)")
    return EXIT_OK


# --- sample --------------------------------------------------------------------

def cmd_sample(args) -> int:
    cfg = load_config(args.config)
    values = args.values if args.values is not None else list(cfg.task.source)
    x = cfg.scene.sample(1, np.random.default_rng(args.seed), values)[0][0]
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    (save_latent_text if out.suffix == ".json" else save_latent)(out, x)
    print(f"latent: {out}  ({cfg.scene.describe(values)})")
    return EXIT_OK


# --- edit ----------------------------------------------------------------------

def _llm_endpoint(cfg, args):
    if args.base_url:
        return LlmEndpointConfig(args.base_url, **({"model": args.llm_model} if args.llm_model else {}))
    if cfg.llm is None:
        raise ConfigError("the llm decomposer needs an `llm:` section in the config or --base-url")
    return cfg.llm


def _text_decomposition(pair, backend, endpoint, n_max, strict, template):
    """Text sub-prompts from ``backend``; an unreachable LLM falls back to the rule splitter unless ``strict``."""
    if backend == "rule":
        return decompose_rule_based(pair, n_max)
    try:
        return decompose_llm(pair, template, endpoint, n_max)
    except (NetworkError, ParseError) as exc:
        if strict:
            raise CliError(f"LLM decomposition failed: {exc}", EXIT_SERVICE) from exc
        log.warning("LLM decomposition failed (%s); falling back to the rule-based splitter", exc)
        return decompose_rule_based(pair, n_max)


def sub_conditions(cfg, decomposer: str, args=None):
    """Sub-target conditions plus the decomposition record for the configured edit."""
    scene, src, tgt = cfg.scene, cfg.task.source, cfg.task.target
    cond_src, cond_tgt = scene.condition(src), scene.condition(tgt)
    n_max = cfg.edit.max_sub_prompts
    if decomposer == "attribute":
        result = decompose_attributes(cond_src, cond_tgt, scene.block_layout(), n_max)
        return result.sub_prompts, result
    pair = PromptPair(scene.describe(src), scene.describe(tgt))
    if decomposer.startswith("manual:"):
        path = Path(decomposer.split(":", 1)[1])
        if not path.is_file():
            raise ConfigError(f"manual decomposition file not found: {path}")
        result = decompose_manual(path.read_text(), n_max)
    elif decomposer in ("rule", "llm"):
        endpoint = _llm_endpoint(cfg, args) if decomposer == "llm" else None
        result = _text_decomposition(pair, decomposer, endpoint, n_max, getattr(args, "strict", False),
                                     getattr(args, "template", "psi1"))
    else:
        raise ConfigError(f"unknown decomposer {decomposer!r}")
    conds = []
    for text in result.sub_prompts:
        values = scene.parse_prompt(text, src)
        if values == tuple(src):
            log.warning("sub-prompt %r names no attribute change", text)
        conds.append(Condition(scene.embed(values), label=text))
    return conds, result


def cmd_edit(args) -> int:
    cfg = load_config(args.config)
    fld = _load_model(cfg, args.model)
    src_path = Path(args.source)
    if not src_path.is_file():
        raise ConfigError(f"source latent not found: {src_path}")
    x0 = load_any(src_path)
    if x0.shape != cfg.scene.shape:
        raise DimensionError(f"source latent shape {x0.shape} does not match the scene {cfg.scene.shape}")
    method = "ltp+vfa" if args.method == "splitflow" else args.method
    edit_cfg = cfg.edit if args.seed is None else type(cfg.edit)(**{**vars(cfg.edit), "seed": args.seed})
    schedule = cfg.schedule if args.eta_dec is None else EditSchedule(cfg.schedule.T, cfg.schedule.eta_max, args.eta_dec)
    cond_src, cond_tgt = cfg.scene.condition(cfg.task.source), cfg.scene.condition(cfg.task.target)
    decomposition = None
    subs = []
    if method != "baseline":
        subs, decomposition = sub_conditions(cfg, args.decomposer, args)
    x, report = run_edit(method, fld, x0, cond_src, cond_tgt, schedule, edit_cfg, subs)

    stem = args.output or f"{src_path.stem}_{method.replace('+', '_')}"
    cfg.latents_dir.mkdir(parents=True, exist_ok=True)
    cfg.reports_dir.mkdir(parents=True, exist_ok=True)
    latent_path = cfg.latents_dir / f"{stem}.sflt"
    save_latent(latent_path, x)
    report.final_latent = str(latent_path)
    doc = report.to_dict()
    doc["source"] = {"path": str(src_path), "values": list(cfg.task.source), "caption": cfg.scene.describe(cfg.task.source)}
    doc["target"] = {"values": list(cfg.task.target), "caption": cfg.scene.describe(cfg.task.target)}
    doc["seed"] = edit_cfg.seed
    if decomposition is not None:
        doc["decomposition"] = {
            "provenance": decomposition.provenance,
            "template": decomposition.template_used,
            "sub_prompts": [c.label for c in subs],
        }
    report_path = cfg.reports_dir / f"{stem}.json"
    report_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"latent: {latent_path}")
    print(f"report: {report_path}  (N={report.n_sub}, delta evaluations={report.delta_evals})")
    return EXIT_OK


# --- bench ---------------------------------------------------------------------

def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    if args.methods:
        cfg.bench = type(cfg.bench)(**{**vars(cfg.bench), "methods": tuple(args.methods.split(","))})
    if args.eta_dec_sweep:
        cfg.bench = type(cfg.bench)(**{**vars(cfg.bench), "eta_dec_sweep": tuple(args.eta_dec_sweep)})
        for eta in cfg.sweep_points:
            EditSchedule(cfg.schedule.T, cfg.schedule.eta_max, eta)
    if args.seeds is not None:
        cfg.seeds = tuple(range(args.seeds))
    fld = _load_model(cfg, args.model)
    report = bench_mod.run_bench(fld, cfg, workers=args.workers)
    cfg.reports_dir.mkdir(parents=True, exist_ok=True)
    bench_mod.write_metrics_csv(cfg.reports_dir / "metrics.csv", report)
    bench_mod.write_metrics_json(cfg.reports_dir / "metrics.json", report)
    bench_mod.write_per_seed_csv(cfg.reports_dir / "per_seed.csv", report)
    plots = bench_mod.plot_metrics(report.rows, cfg.plots_dir, cfg.bench.methods)
    print(f"metrics: {cfg.reports_dir / 'metrics.csv'}")
    print(f"plots: {', '.join(str(p) for p in plots)}")
    for row in report.rows:
        bd = row["background_displacement"]
        ed = row["energy_distance_to_target"]
        print(f"  {row['method']:>8} eta_dec={row['eta_dec']:>2}  background_displacement="
              f"{bd if isinstance(bd, str) else f'{bd:.5f}'}  energy_distance_to_target="
              f"{ed if isinstance(ed, str) else f'{ed:.5f}'}  failures={row['failures']}")
    failed = sum(r["failures"] for r in report.rows)
    if failed == len(report.per_seed):
        raise CliError("every bench run failed; see per_seed.csv", EXIT_NUMERIC)
    if failed:
        log.warning("%d of %d runs failed; see per_seed.csv", failed, len(report.per_seed))
    return EXIT_OK


# --- vfa-check -----------------------------------------------------------------

def cmd_vfa_check(args) -> int:
    try:
        result = bench_mod.vfa_trials(args.trials, args.dims, args.ks, args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    bench_mod.write_margin_histogram(out, result)
    status = "PASS" if result.passed() else "FAIL"
    print(f"{status}: {args.trials} trials, min margin {result.margins.min():.3e}, "
          f"min gibbs {result.gibbs.min():.3e}, min jensen {result.jensen.min():.3e}")
    print(f"histogram: {out}")
    return EXIT_OK if result.passed() else EXIT_NUMERIC


# --- decompose -----------------------------------------------------------------

def cmd_decompose(args) -> int:
    pair = PromptPair(args.src, args.tgt)
    endpoint = None
    if args.backend == "llm":
        if not args.base_url:
            raise ConfigError("--backend llm needs --base-url")
        kw = {"model": args.llm_model} if args.llm_model else {}
        endpoint = LlmEndpointConfig(args.base_url, api_key_env=args.api_key_env, timeout=args.timeout, **kw)
    result = _text_decomposition(pair, args.backend, endpoint, args.n_max, args.strict, args.template)
    print(format_numbered_list(result.sub_prompts))
    return EXIT_OK


# --- helpers -------------------------------------------------------------------

def cmd_init_config(args) -> int:
    text = reference_config()
    if args.output in (None, "-"):
        sys.stdout.write(text)
    else:
        path = Path(args.output)
        if path.exists() and not args.force:
            raise ConfigError(f"{path} exists; pass --force to overwrite")
        path.write_text(text)
        print(f"config: {path}")
    return EXIT_OK


def cmd_stub_llm(args) -> int:
    from .llm_stub import StubLLMServer

    reply = Path(args.reply_file).read_text() if args.reply_file else args.reply
    stub = StubLLMServer(reply=reply, port=args.port)
    print(f"stub chat-completion endpoint at {stub.base_url}", flush=True)
    try:
        stub.serve_forever()
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splitflow", description="Split-flow latent editing on desk-scale scenes.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init-config", help="write the documented reference config")
    s.add_argument("-o", "--output", help="file to write (default: standard output)")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_init_config)

    s = sub.add_parser("train", help="train the velocity field of a config")
    s.add_argument("config")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw a source latent from the configured scene")
    s.add_argument("config")
    s.add_argument("-o", "--output", required=True, help=".sflt (binary) or .json (text) latent file")
    s.add_argument("--values", type=_int_list, help="attribute values, e.g. 0,0,0 (default: edit.source)")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("edit", help="edit one source latent")
    s.add_argument("config")
    s.add_argument("--source", required=True, help="source latent file")
    s.add_argument("--method", default="splitflow", choices=["splitflow", *METHODS])
    s.add_argument("--decomposer", default="attribute", help="attribute | rule | llm | manual:<file>")
    s.add_argument("--template", default="psi1", choices=TEMPLATES)
    s.add_argument("--strict", action="store_true", help="fail instead of falling back when the LLM is unavailable")
    s.add_argument("--base-url", help="chat-completion endpoint (overrides the config)")
    s.add_argument("--llm-model")
    s.add_argument("--model", help="field file (default: <output_dir>/models/field.sff)")
    s.add_argument("--seed", type=int, help="noise seed (default: edit.seed)")
    s.add_argument("--eta-dec", type=int)
    s.add_argument("--output", help="stem for the latent and report files")
    s.set_defaults(func=cmd_edit)

    s = sub.add_parser("bench", help="run the method ablation / eta_dec sweep")
    s.add_argument("config")
    s.add_argument("--model")
    s.add_argument("--methods", help="comma-separated override of bench.methods")
    s.add_argument("--eta-dec-sweep", type=_int_list, help="e.g. 30,29,28,27,26")
    s.add_argument("--seeds", type=int, help="use seeds 0..N-1")
    s.add_argument("--workers", type=int, help="process pool size (default: bench.workers)")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("vfa-check", help="verify the aggregation inequality on random unit vectors")
    s.add_argument("--trials", type=int, default=10000)
    s.add_argument("--dims", type=_int_list, default=[2, 16, 128])
    s.add_argument("--ks", type=_int_list, default=list(range(1, 9)), help="numbers of vectors per set")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--output", default="vfa_margins.csv")
    s.set_defaults(func=cmd_vfa_check)

    s = sub.add_parser("decompose", help="split a target prompt into sub-prompts")
    s.add_argument("--src", required=True)
    s.add_argument("--tgt", required=True)
    s.add_argument("--template", default="psi1", choices=TEMPLATES)
    s.add_argument("--backend", default="llm", choices=["llm", "rule"])
    s.add_argument("--strict", action="store_true")
    s.add_argument("--base-url")
    s.add_argument("--llm-model")
    s.add_argument("--api-key-env", default="SPLITFLOW_LLM_API_KEY")
    s.add_argument("--timeout", type=float, default=30.0)
    s.add_argument("--n-max", type=int, default=3)
    s.set_defaults(func=cmd_decompose)

    s = sub.add_parser("stub-llm", help="serve canned chat-completion replies locally")
    s.add_argument("--reply", default="")
    s.add_argument("--reply-file")
    s.add_argument("--port", type=int, default=8765)
    s.set_defaults(func=cmd_stub_llm)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except NetworkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SERVICE
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SERVICE
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SplitFlowError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
