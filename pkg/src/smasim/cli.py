"""``smasim`` command-line driver: validate, sweep, compare, pipeline, explain-plan."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .config import ConfigError, MachineConfig, emit_config, load_config, resolve_config
from .energy import STRUCTURES, account, compare_energy
from .engines import run_dot_product, run_semi_broadcast, run_weight_stationary
from .mapper import SCHEDULERS, MappingError, estimate_gemm, plan_tiling, run_double_buffered
from .oracle import GemmProblem, GemmShape, gemm_reference, matches_reference, random_problem
from .trace import flops_efficiency
from .workloads import (WorkloadError, load_model, load_pipeline, run_model,
                        run_pipeline)

log = logging.getLogger("smasim")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

CSV_COLUMNS = ("config", "size_m", "size_n", "size_k", "cycles", "macs", "efficiency",
               "a_reuse", "stall_cycles", "energy_total_pj") + tuple(
    "energy_" + s.replace(" ", "_") + "_pj" for s in STRUCTURES)

DEFAULT_SWEEP_CONFIGS = ("volta-baseline", "4-tc", "2-sma", "3-sma", "tpu-dataflow")
DEFAULT_SIZES = (64, 128, 256, 512, 1024, 2048, 4096)
DEFAULT_MODELS = ("alexnet", "vgg-a", "googlenet", "mask-rcnn", "deeplab")
PIPELINE_CONFIGS = ("volta-baseline", "4-tc", "3-sma")

EXPERIMENTS = {
    # id: (subject, reference, axis, expectation)
    "iso-flop": ("2-sma", "4-tc", "sizes", "speedup > 1 for sizes >= 1024"),
    "iso-area": ("3-sma", "4-tc", "models", "speedup > 1 on pure-GEMM models"),
    "energy": ("3-sma", "4-tc", "models", "energy ratio < 1, savings led by on-chip memory"),
    "tpu-dataflow": ("tpu-dataflow", "2-sma", "sizes", "slowdown within [1.1, 1.6]"),
}


class ReportError(ValueError):
    pass


# ---------------------------------------------------------------------------
# helpers


def parse_sizes(text: str) -> List[int]:
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad size list {text!r}") from exc
    if not sizes or min(sizes) < 1:
        raise ConfigError("sizes must be positive integers")
    return sizes


def parse_dims(text: str) -> Tuple[int, int, int]:
    parts = [int(s) for s in text.replace("x", ",").split(",") if s.strip()]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3 or min(parts) < 1:
        raise ConfigError(f"dims must be N or M,N,K, got {text!r}")
    return tuple(parts)


def config_digest(cfg: MachineConfig) -> str:
    return hashlib.sha256(emit_config(cfg).encode()).hexdigest()[:16]


def embed_configs(cfgs: Sequence[MachineConfig]) -> List[dict]:
    # a list, so that replay keeps the original config order
    return [{"name": c.name, "digest": config_digest(c), "yaml": emit_config(c)} for c in cfgs]


def a_reuse(cfg: MachineConfig, n: int) -> float:
    """MACs per A word fetched: every A element feeds one array width of B columns."""
    if cfg.dataflow in ("semi_broadcast", "weight_stationary"):
        width = cfg.sma_array_cols
    elif cfg.dataflow == "dot_product":
        width = 4
    else:
        width = 1
    return n / -(-n // width)


def report(experiment: str, cfgs: Sequence[MachineConfig], invocation: dict, records: list,
           seed: Optional[int] = None, **extra) -> dict:
    doc = {"experiment": experiment, "tool_version": __version__, "seed": seed,
           "configs": embed_configs(cfgs), "invocation": invocation, "records": records}
    doc.update(extra)
    return doc


def dump_json(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def dump_csv(rows: List[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def _write(text: str, out: Optional[str]) -> None:
    if out:
        with open(out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _parallel(fn: Callable, items: list, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, *zip(*items)))


# ---------------------------------------------------------------------------
# validate


def _mapper_config(index: int) -> Tuple[MachineConfig, str]:
    units = 1 + index % 3
    sched = SCHEDULERS[(index // 3) % len(SCHEDULERS)]
    base = resolve_config("2-sma")
    return base.with_(name=f"sma-{units}u", sma_units_per_sm=units,
                      simd_lanes_per_sm=64 * units), sched


def _run_engine(fn: Callable) -> Callable:
    def run(p: GemmProblem, index: int):
        c, trace, _ = fn(p)
        return c, trace.macs
    return run


def _run_mapper(p: GemmProblem, index: int):
    cfg, sched = _mapper_config(index)
    c, trace = run_double_buffered(plan_tiling(p, cfg), p, sched, cfg)
    return c, trace.macs


RUNNERS: Dict[str, Callable] = {
    "semi_broadcast": _run_engine(run_semi_broadcast),
    "weight_stationary": _run_engine(run_weight_stationary),
    "dot_product": _run_engine(run_dot_product),
    "mapper": _run_mapper,
}


def validation_problem(seed: int, index: int, max_dim: int) -> GemmProblem:
    rng = np.random.default_rng([seed, index])
    m, n, k = (int(x) for x in rng.integers(1, max_dim + 1, size=3))
    return random_problem(rng, m, n, k)


def check_case(seed: int, index: int, max_dim: int, rtol: float = 1e-5) -> List[dict]:
    p = validation_problem(seed, index, max_dim)
    ref = gemm_reference(p)
    failures = []
    for name, runner in RUNNERS.items():
        c, macs = runner(p, index)
        problems = []
        if not matches_reference(c, p, rtol, reference=ref):
            problems.append("result differs from oracle")
        if macs != p.macs:
            problems.append(f"mac count {macs} != {p.macs}")
        if problems:
            err = np.abs(c.astype(np.float64) - ref) if c is not None else np.array([np.inf])
            worst = np.unravel_index(int(np.argmax(err)), err.shape)
            failures.append({
                "index": index, "runner": name, "problems": problems,
                "m": p.m, "n": p.n, "k": p.k, "alpha": p.alpha, "beta": p.beta,
                "layouts": [p.layout_a, p.layout_b, p.layout_c],
                "worst_element": [int(x) for x in worst], "max_abs_error": float(err.max()),
                "repro": {"seed": seed, "index": index, "max_dim": max_dim},
            })
    return failures


def cmd_validate(seed: int = 1, count: int = 100, max_dim: int = 512, jobs: int = 1,
                 rtol: float = 1e-5) -> dict:
    if count == 0:
        log.warning("count is 0: nothing to validate")
    per_case = _parallel(check_case, [(seed, i, max_dim, rtol) for i in range(count)], jobs)
    failures = [f for case in per_case for f in case]
    inv = {"command": "validate", "seed": seed, "count": count, "max_dim": max_dim}
    return report("validate", [], inv, failures, seed=seed, passed=not failures,
                  cases=count, runners=sorted(RUNNERS))


# ---------------------------------------------------------------------------
# sweep


def sweep_point(cfg: MachineConfig, size: int, sched: Optional[str] = None) -> dict:
    trace = estimate_gemm(cfg, size, size, size, sched=sched)
    energy = account(trace)
    row = {"config": cfg.name, "size_m": size, "size_n": size, "size_k": size,
           "cycles": trace.total_cycles, "macs": trace.macs,
           "efficiency": flops_efficiency(trace), "a_reuse": a_reuse(cfg, size),
           "stall_cycles": trace.counters["stall_cycle"], "energy_total_pj": energy.total_pj}
    for s in STRUCTURES:
        row["energy_" + s.replace(" ", "_") + "_pj"] = energy.breakdown[s]
    return row


def cmd_sweep(cfgs: Sequence[MachineConfig], sizes: Sequence[int], jobs: int = 1) -> List[dict]:
    items = [(c, s) for c in cfgs for s in sizes]
    rows = _parallel(sweep_point, items, jobs)
    order = {c.name: i for i, c in enumerate(cfgs)}
    return sorted(rows, key=lambda r: (order[r["config"]], r["size_m"]))


# ---------------------------------------------------------------------------
# compare


def _size_record(subject: MachineConfig, ref: MachineConfig, size: int) -> dict:
    a = estimate_gemm(subject, size, size, size)
    b = estimate_gemm(ref, size, size, size)
    return {"size": size, "subject_cycles": a.total_cycles, "reference_cycles": b.total_cycles,
            "subject_efficiency": flops_efficiency(a), "reference_efficiency": flops_efficiency(b),
            "speedup": b.total_cycles / a.total_cycles,
            "slowdown": a.total_cycles / b.total_cycles}


def _model_record(subject: MachineConfig, ref: MachineConfig, model: str) -> dict:
    m = load_model(model)
    ra, rb = run_model(m, subject), run_model(m, ref)
    ea, eb = account(ra.trace), account(rb.trace)
    cmp = compare_energy(ea, eb)
    return {"model": model, "subject_ms": ra.latency_ms, "reference_ms": rb.latency_ms,
            "speedup": rb.latency_ms / ra.latency_ms, "energy_ratio": cmp.total_ratio,
            "energy_structure_ratios": cmp.ratios, "energy_deltas_pj": cmp.deltas,
            "dominant_structure": cmp.dominant}


def cmd_compare(experiment: str, sizes: Sequence[int] = DEFAULT_SIZES,
                models: Sequence[str] = DEFAULT_MODELS,
                cfgs: Optional[Tuple[MachineConfig, MachineConfig]] = None, jobs: int = 1) -> dict:
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}; known: {sorted(EXPERIMENTS)}")
    subj_name, ref_name, axis, expectation = EXPERIMENTS[experiment]
    subject, ref = cfgs or (resolve_config(subj_name), resolve_config(ref_name))
    if axis == "sizes":
        records = _parallel(_size_record, [(subject, ref, s) for s in sizes], jobs)
        inv = {"command": "compare", "experiment": experiment, "sizes": list(sizes)}
    else:
        records = _parallel(_model_record, [(subject, ref, m) for m in models], jobs)
        inv = {"command": "compare", "experiment": experiment, "models": list(models)}
    return report(experiment, [subject, ref], inv, records, subject=subject.name,
                  reference=ref.name, expectation=expectation)


# ---------------------------------------------------------------------------
# pipeline


def cmd_pipeline(spec_ref: str, cfgs: Sequence[MachineConfig],
                 intervals: Sequence[int]) -> List[dict]:
    spec = load_pipeline(spec_ref)
    rows = []
    for cfg in cfgs:
        base = None
        for n in intervals:
            res = run_pipeline(spec.with_interval(n), cfg)
            if base is None:
                base = run_pipeline(spec.with_interval(1), cfg).average_ms
            rows.append({"config": cfg.name, "detection_interval": n,
                         "det_ms": res.task_ms["DET"], "tra_ms": res.task_ms["TRA"],
                         "loc_ms": res.task_ms["LOC"], "average_ms": res.average_ms,
                         "reduction_vs_n1": 1.0 - res.average_ms / base,
                         "target_ms": res.target_ms, "meets_target": res.meets_target})
    return rows


PIPELINE_COLUMNS = ("config", "detection_interval", "det_ms", "tra_ms", "loc_ms", "average_ms",
                    "reduction_vs_n1", "target_ms", "meets_target")


# ---------------------------------------------------------------------------
# argument handling


def _configs(refs: Optional[List[str]], default: Sequence[str]) -> List[MachineConfig]:
    names: List[str] = []
    for r in refs or default:
        names += [x for x in r.split(",") if x]
    return [resolve_config(n) for n in names]


def _replay_configs(doc: dict) -> List[MachineConfig]:
    return [load_config(v["yaml"]) for v in doc.get("configs", [])]


def _emit_rows(args, experiment: str, cfgs, rows, columns, inv, seed=None) -> None:
    if args.format == "csv":
        _write(dump_csv(rows, columns), args.out)
    else:
        _write(dump_json(report(experiment, cfgs, inv, rows, seed=seed)), args.out)


def _write_trace(path: Optional[str], cfgs: Sequence[MachineConfig], sizes: Sequence[int]) -> None:
    if not path:
        return
    with open(path, "w") as fh:
        for cfg in cfgs:
            for s in sizes:
                t = estimate_gemm(cfg, s, s, s)
                fh.write(json.dumps({
                    "config": cfg.name, "size": s, "cycles": t.total_cycles,
                    "counters": dict(sorted(t.counters.items())),
                    "requests": {"/".join(map(str, k)): v for k, v in sorted(t.requests.items())},
                    "stats": dict(sorted(t.stats.items()))}, sort_keys=True) + "\n")


def _run(args) -> int:
    replay = None
    if getattr(args, "replay", None):
        try:
            with open(args.replay) as fh:
                replay = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read replay report {args.replay}: {exc}") from exc
        inv = replay.get("invocation") or {}
        if inv.get("command") != args.command:
            raise ConfigError(f"report was produced by {inv.get('command')!r}, not {args.command!r}")
        args.format = "json"

    if args.command == "validate":
        seed, count, max_dim = args.seed, args.count, args.max_dim
        if replay:
            seed, count, max_dim = inv["seed"], inv["count"], inv["max_dim"]
        doc = cmd_validate(seed, count, max_dim, args.jobs)
        _write(dump_json(doc), args.out)
        for f in doc["records"]:
            print(f"FAIL case {f['index']} on {f['runner']}: {'; '.join(f['problems'])} "
                  f"(m={f['m']} n={f['n']} k={f['k']}, replay with --seed {seed} "
                  f"--count {f['index'] + 1} --max-dim {max_dim})", file=sys.stderr)
        print(f"validate: {count} cases, {len(doc['records'])} failures", file=sys.stderr)
        return EXIT_OK if doc["passed"] else EXIT_FAIL

    if args.command == "sweep":
        cfgs = _replay_configs(replay) if replay else _configs(args.config, DEFAULT_SWEEP_CONFIGS)
        sizes = inv["sizes"] if replay else parse_sizes(args.sizes)
        rows = cmd_sweep(cfgs, sizes, args.jobs)
        _emit_rows(args, "sweep", cfgs, rows, CSV_COLUMNS, {"command": "sweep", "sizes": sizes})
        _write_trace(args.trace, cfgs, sizes)
        return EXIT_OK

    if args.command == "compare":
        experiment = inv["experiment"] if replay else args.experiment
        sizes = inv.get("sizes", DEFAULT_SIZES) if replay else parse_sizes(args.sizes)
        models = inv.get("models", DEFAULT_MODELS) if replay else args.models.split(",")
        cfgs = None
        if replay:
            cfgs = tuple(_replay_configs(replay))
        elif args.config:
            cfgs = tuple(_configs(args.config, ()))
            if len(cfgs) != 2:
                raise ConfigError("compare takes exactly two configs: subject,reference")
        doc = cmd_compare(experiment, sizes, models, cfgs, args.jobs)
        _write(dump_json(doc), args.out)
        return EXIT_OK

    if args.command == "pipeline":
        spec = inv["spec"] if replay else args.spec
        cfgs = _replay_configs(replay) if replay else _configs(args.config, PIPELINE_CONFIGS)
        intervals = inv["intervals"] if replay else parse_sizes(args.intervals)
        rows = cmd_pipeline(spec, cfgs, intervals)
        _emit_rows(args, "pipeline", cfgs, rows, PIPELINE_COLUMNS,
                   {"command": "pipeline", "spec": spec, "intervals": intervals})
        return EXIT_OK

    if args.command == "explain-plan":
        cfgs = _configs(args.config, ("3-sma",))
        m, n, k = parse_dims(args.dims)
        for cfg in cfgs:
            print(f"[{cfg.name}]")
            print(plan_tiling(GemmShape(m, n, k), cfg).explain())
        return EXIT_OK
    raise ConfigError(f"unknown command {args.command!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smasim", description=__doc__)
    parser.add_argument("--version", action="version", version=f"smasim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, fmt: bool = True, jobs: bool = True, replay: bool = True):
        p.add_argument("--config", action="append",
                       help="preset name, file under SMASIM_CONFIG_DIR or YAML path; repeat or comma-separate")
        p.add_argument("--out", help="write the report here instead of stdout")
        if fmt:
            p.add_argument("--format", choices=("csv", "json"), default="csv")
        if jobs:
            p.add_argument("--jobs", type=int, default=1, help="worker processes")
        if replay:
            p.add_argument("--replay", metavar="REPORT", help="re-run the invocation stored in a JSON report")

    p = sub.add_parser("validate", help="random GEMMs through every engine and the mapper")
    common(p, fmt=False)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--max-dim", type=int, default=512)

    p = sub.add_parser("sweep", help="FLOPS efficiency versus square matrix size")
    common(p)
    p.add_argument("--sizes", default=",".join(map(str, DEFAULT_SIZES)))
    p.add_argument("--seed", type=int, default=0, help="accepted for symmetry; sweeps are deterministic")
    p.add_argument("--trace", metavar="PATH", help="write per-point counters as JSON lines")

    p = sub.add_parser("compare", help="pairwise config comparison (JSON)")
    common(p, fmt=False)
    p.add_argument("experiment", nargs="?", default="iso-flop", choices=sorted(EXPERIMENTS))
    p.add_argument("--sizes", default=",".join(map(str, DEFAULT_SIZES)))
    p.add_argument("--models", default=",".join(DEFAULT_MODELS))

    p = sub.add_parser("pipeline", help="frame latency versus detection interval")
    common(p, jobs=False)
    p.add_argument("--spec", default="driving", help="bundled pipeline name or YAML path")
    p.add_argument("--intervals", default="1,2,4,8")

    p = sub.add_parser("explain-plan", help="describe the LSMA tiling of one GEMM")
    common(p, fmt=False, jobs=False, replay=False)
    p.add_argument("dims", nargs="?", default="4096", help="N or M,N,K")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="smasim: %(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except (ConfigError, WorkloadError, MappingError, ReportError) as exc:
        print(f"smasim: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
