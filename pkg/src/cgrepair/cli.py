"""Command-line surface: verify, repair, pathology cases, and index experiments.

All randomness flows from a single ``--seed`` through named substreams.
Every output file embeds the resolved configuration in its header, so a
run can be reproduced from its own artifacts.

Exit codes: 0 success/verified, 1 counterexamples found or removal failed,
2 undecided or step limit, 3 timeout, 64 usage or parse errors.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import engine, pathology, removal, rmi, search
from .models import load_model, save_model
from .specs import load_spec

CONFIG_DEFAULTS = {
    "seed": 0,
    "searcher": "vertex",
    "remover": "penalty",
    "objective": "distance",
    "mode": "optimal",
    "tolerance": 1e-6,
    "early_exit_threshold": 1e-9,
    "max_nodes": 200_000,
    "restarts": 10,
    "parallelism": 1,
    "max_repair_steps": 0,
    "time_budget": None,
    "termination_threshold": 0.0,
    "satisfaction_constant": 1e-4,
    "qp_margin": 1e-2,
    "penalty_lr": 1e-3,
    "penalty_iters": 5000,
}


class UsageError(Exception):
    pass


def load_run_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise UsageError("config file must hold a flat JSON object")
    unknown = set(doc) - set(CONFIG_DEFAULTS)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return doc


def resolve_config(args) -> dict:
    """File values override defaults; explicit flags override the file."""
    config = dict(CONFIG_DEFAULTS)
    if getattr(args, "config", None):
        config.update(load_run_config(args.config))
    for key in CONFIG_DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            config[key] = value
    return config


def _search_config(config: dict) -> search.SearchConfig:
    return search.SearchConfig(
        mode=config["mode"],
        tolerance=config["tolerance"],
        early_exit_threshold=config["early_exit_threshold"],
        max_nodes=int(config["max_nodes"]),
        time_budget=config["time_budget"],
        rng_seed=int(config["seed"]),
        restarts=int(config["restarts"]),
        parallelism=int(config["parallelism"]),
    )


def _load_xy_dataset(path):
    data = np.loadtxt(path, ndmin=2)
    if data.shape[1] < 2:
        raise UsageError("dataset file needs input column(s) and a target column")
    return data[:, :-1], data[:, -1]


def _build_objective(config, model, dataset):
    kind = config["objective"]
    if kind == "distance":
        return removal.ParamDistanceSq(model.param_vector())
    if kind == "l1":
        return removal.AbsParams()
    if kind == "mse":
        if dataset is None:
            raise UsageError("objective 'mse' needs --dataset")
        return removal.MseOnDataset(dataset[0], dataset[1])
    raise UsageError(f"unknown objective {kind!r}")


def _build_remover(config, spec, dataset):
    kind = config["remover"]
    if kind == "penalty":
        return removal.PenaltyRemover(
            removal.PenaltyConfig(
                lr=float(config["penalty_lr"]), max_iters=int(config["penalty_iters"])
            )
        )
    if kind == "augment-lsq":
        if dataset is None:
            raise UsageError("remover 'augment-lsq' needs --dataset")
        xs, ts = dataset
        order = np.argsort(xs[:, 0])
        sorted_x = xs[order, 0]
        sorted_t = ts[order]

        def nearest_target(x: float) -> float:
            idx = int(np.clip(np.searchsorted(sorted_x, x), 0, sorted_x.size - 1))
            return float(sorted_t[idx])

        return removal.AugmentLsqRemover((xs[:, 0], ts), nearest_target)
    if kind == "qp":
        if dataset is None:
            raise UsageError("remover 'qp' needs --dataset")
        return removal.QpExactRemover(spec, (dataset[0][:, 0], dataset[1]),
                                      margins=(float(config["qp_margin"]),
                                               config["satisfaction_constant"], 0.0))
    raise UsageError(f"unknown remover {kind!r}")


def cmd_verify(args) -> int:
    config = resolve_config(args)
    model = load_model(args.model)
    spec = load_spec(args.spec)
    searcher = search.make_searcher(config["searcher"], _search_config(config))

    results = []
    counterexamples = 0
    unknowns = 0
    for prop in spec:
        res = searcher(model, prop)
        entry = {"property": prop.name, "status": res.status}
        if res.is_counterexample:
            counterexamples += 1
            entry["x"] = res.x.tolist()
            entry["value"] = res.value
        elif res.is_verified:
            entry["lower_bound"] = res.lower_bound
        else:
            unknowns += 1
        results.append(entry)

    document = {"config": config, "results": results}
    text = json.dumps(document, indent=2)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    if counterexamples:
        return 1
    if unknowns:
        return 2
    return 0


_STATUS_EXIT = {
    engine.REPAIRED: 0,
    engine.REMOVAL_FAILED: 1,
    engine.STEP_LIMIT: 2,
    engine.TIMEOUT: 3,
}


def _trace_lines(trace, config, record_params):
    yield {"type": "header", "config": config}
    yield {
        "type": "cr0",
        "success": trace.cr0.success,
        "objective": trace.cr0.objective,
        "iterations": trace.cr0.iterations,
    }
    for record in trace.records:
        line = {
            "type": "step",
            "n": record.index,
            "counterexamples": [
                {
                    "property": cex.property_name,
                    "x": cex.x.tolist(),
                    "value": cex.value,
                    "searcher": cex.searcher,
                }
                for cex in record.counterexamples
            ],
            "removal": {
                "success": record.removal.success,
                "objective": record.removal.objective,
                "iterations": record.removal.iterations,
                "final_penalty_weight": record.removal.final_penalty_weight,
            },
            "search_seconds": record.search_seconds,
            "removal_seconds": record.removal_seconds,
        }
        if record_params and record.params is not None:
            line["theta"] = record.params.tolist()
        yield line
    yield {
        "type": "summary",
        "status": trace.status,
        "repair_steps": trace.repair_steps,
        "final_params": trace.final_params.tolist(),
        "wall_seconds": trace.wall_seconds,
    }


def cmd_repair(args) -> int:
    config = resolve_config(args)
    model = load_model(args.model)
    spec = load_spec(args.spec)
    dataset = _load_xy_dataset(args.dataset) if args.dataset else None

    search_cfg = _search_config(config)
    cascade = [search.make_searcher(s.strip(), search_cfg) for s in config["searcher"].split(",")]
    objective = _build_objective(config, model, dataset)
    remover = _build_remover(config, spec, dataset)

    problem = engine.RobustProblem(model, objective, spec)
    cfg = engine.CgrConfig(
        searcher_cascade=cascade,
        remover=remover,
        max_repair_steps=int(config["max_repair_steps"]),
        time_budget=config["time_budget"],
        termination_threshold=float(config["termination_threshold"]),
        satisfaction_constant=float(config["satisfaction_constant"]),
        record_params=args.record_params,
    )
    repaired, trace = engine.run_cgr(problem, cfg)

    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as fh:
            for line in _trace_lines(trace, config, args.record_params):
                fh.write(json.dumps(line) + "\n")
    if trace.status == engine.REPAIRED and args.model_out:
        save_model(repaired, args.model_out)
    print(f"status: {trace.status} (repair steps: {trace.repair_steps})")
    return _STATUS_EXIT[trace.status]


def cmd_pathology(args) -> int:
    config = {"case": args.case, "steps": args.steps, "mode": args.mode}
    rows = pathology.run_case(args.case, args.steps, mode=args.mode)
    width = max(len(r.theta) for r in rows)
    header = ["n"] + [f"theta{i + 1}" for i in range(width)] + ["x", "fsat"]
    lines = [f"# {json.dumps(config)}", ",".join(header)]
    for r in rows:
        theta = list(r.theta) + [""] * (width - len(r.theta))
        lines.append(",".join([str(r.n), *[repr(t) if t != "" else "" for t in theta], repr(r.x), repr(r.fsat)]))
    text = "\n".join(lines)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def cmd_rmi(args) -> int:
    if args.rmi_command == "gen":
        dataset = rmi.generate_dataset(args.seed, args.n, (args.range[0], args.range[1]))
        dataset.save(args.out)
        print(f"wrote {dataset.size} keys to {args.out}")
        return 0
    if args.rmi_command == "build":
        dataset = rmi.load_dataset(args.dataset, seed=args.seed)
        built = rmi.build_rmi(dataset, args.blocks, rmi.TrainConfig(epochs=args.epochs))
        save_model(built.stage1, f"{args.out_prefix}-stage1.json")
        for info, model in zip(built.blocks, built.stage2):
            save_model(model, f"{args.out_prefix}-stage2-{info.index}.json")
        meta = {
            "blocks": [
                {"index": b.index, "start": b.start, "end": b.end, "key_lo": b.key_lo, "key_hi": b.key_hi}
                for b in built.blocks
            ],
            "seed": args.seed,
            "epochs": args.epochs,
        }
        with open(f"{args.out_prefix}-meta.json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2)
        print(f"wrote stage-1, {len(built.stage2)} stage-2 models, and metadata to {args.out_prefix}-*")
        return 0
    if args.rmi_command == "experiment":
        epsilons = tuple(float(e) for e in args.eps.split(","))
        methods = tuple(m.strip() for m in args.methods.split(","))
        report = rmi.run_table2_experiment(
            num_rmis=args.rmis,
            n_keys=args.keys,
            K=args.blocks,
            epsilons=epsilons,
            methods=methods,
            base_seed=args.seed,
            progress=args.progress,
        )
        config = {
            "rmis": args.rmis,
            "keys": args.keys,
            "blocks": args.blocks,
            "eps": list(epsilons),
            "methods": list(methods),
            "seed": args.seed,
        }
        rmi.report_to_csv(report, args.out, header_comment=json.dumps(config))
        for line in report.summary_lines():
            print(line)
        print(f"wrote {len(report.rows)} rows to {args.out}")
        return 0
    raise UsageError("unknown rmi subcommand")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(64)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cgrepair", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p, keys):
        p.add_argument("--config", help="flat JSON config file")
        for key in keys:
            flag = "--" + key.replace("_", "-")
            p.add_argument(flag, dest=key, default=None, type=str_to_value(key))

    verify = sub.add_parser("verify", parents=[], help="verify a model against a specification")
    verify.add_argument("model")
    verify.add_argument("spec")
    verify.add_argument("--out", help="counterexample report (JSON)")
    add_config_flags(
        verify,
        ["seed", "searcher", "mode", "tolerance", "early_exit_threshold", "max_nodes", "restarts", "parallelism", "time_budget"],
    )

    repair = sub.add_parser("repair", help="run counterexample-guided repair")
    repair.add_argument("model")
    repair.add_argument("spec")
    repair.add_argument("--dataset", help="whitespace-separated x/t dataset file")
    repair.add_argument("--trace", help="trace output (JSON lines)")
    repair.add_argument("--model-out", help="repaired model output path")
    repair.add_argument("--record-params", action="store_true", help="embed parameter snapshots in the trace")
    add_config_flags(repair, list(CONFIG_DEFAULTS))

    path = sub.add_parser("pathology", help="run a termination case study")
    path_sub = path.add_subparsers(dest="path_command", required=True)
    runp = path_sub.add_parser("run")
    runp.add_argument("case", choices=pathology.CASES)
    runp.add_argument("--steps", type=int, default=100)
    runp.add_argument("--mode", choices=["scripted", "optimal"], default="scripted")
    runp.add_argument("--out", help="iterate table output (CSV)")

    rmi_parser = sub.add_parser("rmi", help="integer-dataset learned-index tooling")
    rmi_sub = rmi_parser.add_subparsers(dest="rmi_command", required=True)
    gen = rmi_sub.add_parser("gen")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--n", type=int, default=20_000)
    gen.add_argument("--range", type=int, nargs=2, default=(0, 1_000_000))
    gen.add_argument("--out", required=True)
    build = rmi_sub.add_parser("build")
    build.add_argument("--dataset", required=True)
    build.add_argument("--blocks", type=int, default=10)
    build.add_argument("--epochs", type=int, default=10)
    build.add_argument("--seed", type=int, default=0)
    build.add_argument("--out-prefix", required=True)
    experiment = rmi_sub.add_parser("experiment")
    experiment.add_argument("--rmis", type=int, default=20)
    experiment.add_argument("--keys", type=int, default=20_000)
    experiment.add_argument("--blocks", type=int, default=10)
    experiment.add_argument("--eps", default="100,150")
    experiment.add_argument("--methods", default="ouroboros,specrepair,qp")
    experiment.add_argument("--seed", type=int, default=1234)
    experiment.add_argument("--progress", action="store_true")
    experiment.add_argument("--out", required=True)
    return parser


def str_to_value(key):
    default = CONFIG_DEFAULTS[key]

    def convert(text):
        if text is None:
            return None
        if key == "time_budget":
            return float(text)
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text

    return convert


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "verify":
            return cmd_verify(args)
        if args.command == "repair":
            return cmd_repair(args)
        if args.command == "pathology":
            return cmd_pathology(args)
        if args.command == "rmi":
            return cmd_rmi(args)
        raise UsageError(f"unknown command {args.command!r}")
    except (UsageError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 64


if __name__ == "__main__":
    sys.exit(main())
