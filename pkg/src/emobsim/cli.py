"""Command line entry point: scenario generation, simulation, training and comparison studies."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .baselines import make_planner, run_planner
from .domain import DeploymentPlan, ValidationError
from .metrics import EpisodeReport
from .neural.policy import PolicyParams
from .neural.search import PAPER_SCALES, Controller, prepare_controller
from .scenario import Scenario, ScenarioConfig, generate_scenario
from .simulator import run_episode
from .trainer import TrainConfig, WorkerPool, evaluate_params, lambda_grid, train, train_with_grid

log = logging.getLogger("emobsim")

BASELINES = ("fd", "rev", "cov", "oo", "io")
COMPARE_METRICS = ("SC", "NV", "GMV", "objective")
DAILY_COLUMNS = ("day", "sc", "nv", "gmv", "cost", "budget_violated")


def _sha(obj) -> str:
    blob = obj if isinstance(obj, bytes) else json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class RunManifest:
    command: str
    config_hash: str
    scenario_hash: str | None
    seeds: list
    version: str = __version__
    started: float = field(default_factory=time.time)
    finished: float | None = None
    args: dict = field(default_factory=dict)

    def write(self, out_dir) -> Path:
        self.finished = time.time()
        path = Path(out_dir) / "manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str))
        return path


def max_workers(requested: int) -> int:
    cap = os.environ.get("EMOBSIM_THREADS")
    w = max(1, int(requested))
    if cap:
        w = min(w, max(1, int(cap)))
    return w


def load_config(path) -> dict:
    if path is None:
        return {}
    with open(path) as f:
        cfg = json.load(f)
    if not isinstance(cfg, dict):
        raise ValidationError("config must be a JSON object")
    return cfg


def parse_seeds(text: str | None, default=(0,)) -> list[int]:
    if text is None or text == "":
        return list(default)
    if ":" in text:
        a, b = text.split(":")
        return list(range(int(a), int(b)))
    return [int(s) for s in text.split(",")]


def parse_scale(text: str | None):
    if text is None:
        return None
    vals = tuple(float(v) for v in text.split(","))
    if len(vals) < 2 or vals[0] != 0.0 or any(b <= a for a, b in zip(vals, vals[1:])):
        raise ValidationError(f"action scale must start at 0 and increase: {text}")
    return vals


# ------------------------------------------------------------------------------ planners
def controller_from_config(scenario: Scenario, cfg: dict, w: float | None = None, lam=None,
                           action_scale=None, eps=None) -> Controller:
    c = dict(cfg.get("controller", {}))
    return prepare_controller(
        scenario,
        region_size=int(c.get("region_size", 20)),
        partition_seed=int(c.get("partition_seed", 0)),
        w=float(w if w is not None else cfg.get("w", 1.0)),
        lam=lam if lam is not None else (c["lam"] if isinstance(c.get("lam"), (int, float)) else None),
        action_scale=tuple(action_scale or c.get("action_scale", (0.0, 0.1, 0.2))),
        eps=float(eps if eps is not None else c.get("epsilon", 0.1)),
        predictor=c.get("predictor", "gcn"),
    )


def load_checkpoint(scenario: Scenario, path) -> tuple[Controller, PolicyParams]:
    params = PolicyParams.load(path)
    if params.meta.get("scenario_digest") not in (None, scenario.digest()):
        raise ValidationError(f"checkpoint {path} was trained on a different scenario")
    return Controller.from_meta(scenario, params.meta), params


def evaluate_planner(scenario: Scenario, name: str, seeds: Sequence[int], w: float = 1.0,
                     checkpoint=None, mode: str = "greedy", workers: int = 1) -> list[EpisodeReport]:
    name = name.lower()
    if name == "mans":
        if checkpoint is None or not Path(checkpoint).exists():
            raise FileNotFoundError(f"missing checkpoint for mans: {checkpoint}")
        ctl, params = load_checkpoint(scenario, checkpoint)
        if ctl.reward.w != w:
            log.info("checkpoint trained with w=%s, reporting objective with w=%s", ctl.reward.w, w)
        with WorkerPool(ctl, max_workers(workers)) as pool:
            reps = evaluate_params(ctl, params, seeds, mode, pool)
        return [EpisodeReport(r.per_day, w, r.tallies, r.plan) for r in reps]
    return [run_planner(scenario, make_planner(name), int(s), w) for s in seeds]


def summarize(reports: Sequence[EpisodeReport]) -> dict:
    out = {}
    for m in COMPARE_METRICS + ("PM",):
        vals = np.array([getattr(r, m) for r in reports], float)
        out[f"{m}_mean"] = float(vals.mean())
        out[f"{m}_std"] = float(vals.std())
    out["infeasible_days_mean"] = float(np.mean([r.infeasible_days for r in reports]))
    return out


def cmd_compare(scenario: Scenario, planners: Sequence[str], seeds: Sequence[int], w: float = 1.0,
                reference: str = "fd", checkpoints: dict | None = None, mode: str = "greedy",
                workers: int = 1) -> list[dict]:
    """Per-planner mean/std rows with Δ = (x − ref)/ref against the reference planner."""
    checkpoints = checkpoints or {}
    rows, per_seed = [], {}
    for name in planners:
        try:
            reps = evaluate_planner(scenario, name, seeds, w, checkpoints.get(name), mode, workers)
        except FileNotFoundError as exc:
            print(f"notice: skipping {name}: {exc}", file=sys.stderr)
            continue
        per_seed[name] = [r.objective for r in reps]
        rows.append({"planner": name, "seeds": len(seeds), **summarize(reps)})
    ref = next((r for r in rows if r["planner"] == reference), None)
    for r in rows:
        for m in COMPARE_METRICS:
            base = ref[f"{m}_mean"] if ref else float("nan")
            r[f"delta_{m}"] = (r[f"{m}_mean"] - base) / base if ref and base != 0 else float("nan")
        r["objective_per_seed"] = per_seed[r["planner"]]
    return rows


def write_rows(path, rows: Sequence[dict], columns: Sequence[str] | None = None) -> None:
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        wr.writeheader()
        for r in rows:
            wr.writerow(r)


def cmd_sweep(scenario: Scenario, parameter: str, values: Sequence, seeds: Sequence[int], cfg: dict,
              out_dir, plan_budget: int | None = None, workers: int = 1, mode: str = "greedy") -> list[dict]:
    """Train and evaluate MANS per value; long-format rows (value, seed, SC, NV)."""
    if parameter not in ("w", "action_scale"):
        raise ValidationError(f"unknown sweep parameter {parameter!r}")
    out = Path(out_dir)
    tc = TrainConfig.from_dict(cfg.get("train", {}))
    if plan_budget is not None:
        tc = TrainConfig.from_dict({**tc.to_dict(), "plan_budget": int(plan_budget)})
    tc = TrainConfig.from_dict({**tc.to_dict(), "workers": max_workers(workers)})
    rows = []
    for k, v in enumerate(values):
        if parameter == "w":
            ctl = controller_from_config(scenario, cfg, w=float(v))
            label = v
        else:
            ctl = controller_from_config(scenario, cfg, action_scale=tuple(v))
            label = ",".join(f"{x:g}" for x in v)
        res = train(ctl, tc, out / f"point_{k}")
        with WorkerPool(ctl, tc.workers) as pool:
            reps = evaluate_params(ctl, res.params, seeds, mode, pool)
        for s, r in zip(seeds, reps):
            rows.append({"value": label, "seed": s, "SC": r.SC, "NV": r.NV, "PM": r.PM, "objective": r.objective})
    write_rows(out / "sweep.csv", rows, ("value", "seed", "SC", "NV", "PM", "objective"))
    return rows


def cmd_report_daily(report: dict | EpisodeReport) -> list[dict]:
    d = report.to_json() if isinstance(report, EpisodeReport) else report
    return [{"day": r["day"], "sc": r["sc"], "nv": r["nv"], "gmv": r["gmv"], "cost": r["cost"],
             "budget_violated": int(bool(r["budget_violated"]))} for r in d["per_day"]]


# ------------------------------------------------------------------------------ argparse
def _scenario_arg(p):
    p.add_argument("--scenario", required=True, help="scenario JSON file")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="emobsim", description="E-mobility station deployment simulator.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenario", help="generate a synthetic city")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("simulate", help="simulate one plan")
    _scenario_arg(p)
    p.add_argument("--plan", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--w", type=float, default=1.0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train the neural planner")
    _scenario_arg(p)
    p.add_argument("--config")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--plan-budget", type=int)
    p.add_argument("--action-scale")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--w", type=float)
    p.add_argument("--lam", help="penalty weight, comma list to grid search, or 'grid' (default) for "
                                 "multiples 0, 0.5, 1, 2 of the scale-matched weight")
    p.add_argument("--master-seed", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="evaluate one planner over seeds")
    _scenario_arg(p)
    p.add_argument("--planner", required=True, choices=BASELINES + ("mans",))
    p.add_argument("--checkpoint")
    p.add_argument("--seeds", default="0:5")
    p.add_argument("--w", type=float, default=1.0)
    p.add_argument("--mode", choices=("greedy", "sample"), default="greedy")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("compare", help="comparison table over planners and seeds")
    _scenario_arg(p)
    p.add_argument("--planners", default="fd,rev,cov,oo,io,mans")
    p.add_argument("--checkpoint", help="MANS checkpoint")
    p.add_argument("--seeds", default="0:5")
    p.add_argument("--w", type=float, default=1.0)
    p.add_argument("--reference", default="fd")
    p.add_argument("--mode", choices=("greedy", "sample"), default="greedy")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="train/evaluate MANS across w or action scales")
    _scenario_arg(p)
    p.add_argument("--param", required=True, choices=("w", "action_scale"))
    p.add_argument("--values", help="w: comma list (fractions like 9/1 allowed); action_scale: 'standard' (the four default scales) or a;b;c lists")
    p.add_argument("--config")
    p.add_argument("--seeds", default="0:5")
    p.add_argument("--plan-budget", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report-daily", help="per-day CSV from a report JSON")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    return ap


def _frac(text: str) -> float:
    if "/" in text:
        a, b = text.split("/")
        return float(a) / float(b)
    return float(text)


def _dir_of(path) -> Path:
    return Path(path).resolve().parent


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(argv) if argv is not None else sys.argv[1:]
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    # the exact argv goes into the manifest so a run can be repeated from it
    vargs = {**vars(args), "argv": argv}
    cmd = args.command
    if cmd in ("gen-scenario", "simulate", "report-daily"):
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)

    if cmd == "gen-scenario":
        cfg = load_config(args.config)
        scen = generate_scenario(ScenarioConfig.from_dict(cfg.get("scenario", cfg)), args.seed)
        scen.save(args.out)
        RunManifest(cmd, _sha(cfg), scen.digest(), [args.seed], args=vargs).write(_dir_of(args.out))
        return 0

    if cmd == "report-daily":
        with open(args.report) as f:
            rows = cmd_report_daily(json.load(f))
        write_rows(args.out, rows, DAILY_COLUMNS)
        RunManifest(cmd, _sha({}), None, [], args=vargs).write(_dir_of(args.out))
        return 0

    scen = Scenario.load(args.scenario)

    if cmd == "simulate":
        plan = DeploymentPlan.load(args.plan)
        rep = run_episode(scen, plan, args.seed, args.w)
        Path(args.out).write_text(rep.dumps())
        RunManifest(cmd, _sha({"w": args.w}), scen.digest(), [args.seed], args=vargs).write(_dir_of(args.out))
        return 0

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if cmd == "train":
        cfg = load_config(args.config)
        tdict = dict(cfg.get("train", {}))
        if args.plan_budget is not None:
            tdict["plan_budget"] = args.plan_budget
        if args.master_seed is not None:
            tdict["master_seed"] = args.master_seed
        tdict["workers"] = max_workers(args.workers if args.workers else tdict.get("workers", 1))
        tc = TrainConfig.from_dict(tdict)
        lam_arg = args.lam if args.lam is not None else cfg.get("controller", {}).get("lam")
        if isinstance(lam_arg, str) and lam_arg != "grid":
            lam_arg = [float(v) for v in lam_arg.split(",")]
        fixed = float(lam_arg) if isinstance(lam_arg, (int, float)) else None
        ctl = controller_from_config(scen, cfg, w=args.w, lam=fixed, action_scale=parse_scale(args.action_scale),
                                     eps=args.epsilon)
        grid = None
        if lam_arg is None or lam_arg == "grid":
            grid = lambda_grid(ctl.reward.lam)
        elif isinstance(lam_arg, list):
            grid = lam_arg
        ctl, res, rows = train_with_grid(ctl, tc, grid or [ctl.reward.lam], out)
        if rows:
            write_rows(out / "lambda_grid.csv", rows, ("lam", "final_objective", "infeasible_day_rate", "plans"))
        RunManifest(cmd, _sha({"config": cfg, "train": tc.to_dict(), "meta": ctl.meta()}), scen.digest(),
                    [tc.master_seed], args=vargs).write(out)
        print(f"best mean objective {res.best_objective:.4f}; checkpoints in {out}")
        return 0

    seeds = parse_seeds(args.seeds) if hasattr(args, "seeds") else []

    if cmd == "evaluate":
        reps = evaluate_planner(scen, args.planner, seeds, args.w, args.checkpoint, args.mode, args.workers)
        for s, r in zip(seeds, reps):
            (out / f"report_seed{s}.json").write_text(r.dumps())
        summary = {"planner": args.planner, "seeds": seeds, **summarize(reps)}
        (out / "summary.json").write_text(json.dumps(summary, indent=2))
        RunManifest(cmd, _sha({"planner": args.planner, "w": args.w, "mode": args.mode}), scen.digest(), seeds,
                    args=vargs).write(out)
        return 0

    if cmd == "compare":
        planners = [p.strip().lower() for p in args.planners.split(",") if p.strip()]
        rows = cmd_compare(scen, planners, seeds, args.w, args.reference, {"mans": args.checkpoint},
                           args.mode, args.workers)
        cols = ["planner", "seeds"] + [f"{m}_{s}" for m in COMPARE_METRICS + ("PM",) for s in ("mean", "std")] + \
            ["infeasible_days_mean"] + [f"delta_{m}" for m in COMPARE_METRICS]
        write_rows(out / "comparison.csv", rows, cols)
        (out / "comparison.json").write_text(json.dumps(rows, indent=2))
        RunManifest(cmd, _sha({"planners": planners, "w": args.w, "ref": args.reference}), scen.digest(), seeds,
                    args=vargs).write(out)
        return 0

    if cmd == "sweep":
        cfg = load_config(args.config)
        if args.param == "w":
            values = [_frac(v) for v in (args.values or "9/1,1,1/9").split(",")]
        elif args.values in (None, "standard"):
            values = [tuple(s) for s in PAPER_SCALES]
        else:
            values = [parse_scale(v) for v in args.values.split(";")]
        rows = cmd_sweep(scen, args.param, values, seeds, cfg, out, args.plan_budget, args.workers)
        RunManifest(cmd, _sha({"config": cfg, "param": args.param, "values": values}), scen.digest(), seeds,
                    args=vargs).write(out)
        print(f"{len(rows)} rows written to {out / 'sweep.csv'}")
        return 0
    return 1


def main(argv: Sequence[str] | None = None) -> int:
    try:
        return run(argv)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        for e in getattr(exc, "errors", []) or []:
            print(f"  {e}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code) if isinstance(exc.code, int) else 2
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
