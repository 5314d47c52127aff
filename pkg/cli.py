"""
Command-line front end for the CBSE toolkit.
Subcommands: validate | losses | solve | sweep | robust | io-baseline.
Human summaries go to stdout, machine-readable results only to --out files.
"""
import argparse
import csv
import hashlib
import logging
import sys
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from config import Config, setup_logging
from errors import CbseError, InputError, ValidationError
from game import brute_force_se, cost_sweep, individual_optimization, level_sweep, solve_cbbi
from lincontrol import LinkMode, StateSpaceModel
from lossmap import build_loss_table, fraction_percent, fractional_losses, importance_ranking
from modelio import (
    load_model,
    load_model_set,
    model_from_manifest,
    read_json,
    validate_model,
    write_json_atomic,
)
from robust import ModelSet, RobustGameSolver, controller_mismatch

LOSS_REPORT_FIELDS = ["rank", "node", "delta", "fractional_loss_pct"]
_OUTCOME_FIELDS = [
    "attacker_payoff", "fractional_payoff_pct", "defender_fractional_payoff_pct",
    "a_star", "d_star", "attacker_cost", "defender_cost",
    "num_attacker_ties", "num_defender_ties", "used_nonconverged_losses", "error",
]
SWEEP_FIELDS = ["gamma_a", "gamma_d"] + _OUTCOME_FIELDS
LEVEL_FIELDS = ["L_a", "L_d"] + _OUTCOME_FIELDS
ROBUST_FIELDS = [
    "model", "gamma_a", "gamma_d", "ideal_payoff", "nominal_payoff", "average_payoff",
    "ideal_fractional_pct", "nominal_fractional_pct", "average_fractional_pct",
    "mu_nominal_pct", "mu_average_pct", "degenerate", "error",
]
PER_MODEL_FIELDS = ["model", "gamma_a", "gamma_d", "ideal_fractional_pct", "a_star", "d_star"]

# Top-level keys of the JSON result files; optional keys appear only when requested
RUN_KEYS = ["command", "config", "input_hashes", "seed", "tool_version", "results", "timings", "started_at"]
VALIDATE_KEYS = ["run", "status", "reports"]
LOSSES_KEYS = ["run", "version", "model_hash", "mode", "n", "J_opt", "entries", "ranking", "fractional_losses"]
SOLVE_KEYS = ["run", "game", "input", "config", "J_opt", "cbse"]
SOLVE_OPTIONAL_KEYS = ["oracle", "per_model"]
IO_BASELINE_KEYS = ["run", "input", "config", "J_opt", "io"]
ROBUST_SUMMARY_KEYS = ["run", "cost_pair_weighting", "models", "nominal_index", "nominal", "average",
                       "failed_points"]
ROBUST_SUMMARY_OPTIONAL_KEYS = ["controller_mismatch_pct"]


def _float_list(text: str) -> List[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _int_list(text: str) -> List[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _cost_pairs(text: str) -> List[Tuple[float, float]]:
    """'ga:gd,ga:gd' -> [(ga, gd), ...]"""
    pairs = []
    for item in text.split(","):
        if not item.strip():
            continue
        gamma_a, gamma_d = item.split(":")
        pairs.append((float(gamma_a), float(gamma_d)))
    return pairs


def _file_digest(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


class CommandInterface:
    """Runs one subcommand: loads inputs, drives the pipeline, writes results"""

    def __init__(self, args: argparse.Namespace, config: Config, logger=None):
        self.args = args
        self.config = config
        self.logger = logger or logging.getLogger(__name__)
        self.mode = LinkMode(args.mode).value
        self.options = config.solver_options(args.allow_marginal)
        self.cache = None if getattr(args, "no_cache", False) else config.get_loss_cache()
        self.tracker = config.get_run_tracker(args.command)
        self.tracker.seed = args.seed
        self.tracker.config.update(mode=self.mode, allow_marginal=args.allow_marginal)

    # Inputs

    def _load(self, path: str):
        """A model or a model set, told apart by the manifest's `models` key"""
        manifest = read_json(path)
        self.tracker.add_input(Path(path).name, _file_digest(path))
        with self.tracker.stage("load"):
            if "models" in manifest:
                model_set = load_model_set(path, self.args.allow_marginal)
                for ref in manifest["models"]:
                    ref_path = Path(path).parent / ref
                    self.tracker.add_input(ref_path.name, _file_digest(str(ref_path)))
                return model_set
            return load_model(path, self.args.allow_marginal)

    def _load_model(self, path: str) -> StateSpaceModel:
        loaded = self._load(path)
        if isinstance(loaded, ModelSet):
            raise InputError(f"{path} is a model set; this command needs a single model")
        return loaded

    def _load_model_set(self, path: str) -> ModelSet:
        loaded = self._load(path)
        if isinstance(loaded, StateSpaceModel):
            return ModelSet([loaded])
        return loaded

    def _table(self, model: StateSpaceModel):
        with self.tracker.stage("loss_table"):
            return build_loss_table(model, self.mode, self.options, self.config.pattern_cap,
                                    self.config.jobs, self.cache)

    def _robust_solver(self, model_set: ModelSet) -> RobustGameSolver:
        with self.tracker.stage("loss_table"):
            return RobustGameSolver.from_model_set(model_set, self.mode, self.options, self.config.pattern_cap,
                                                   self.config.jobs, self.cache, self.logger)

    def _game_config(self, n: int):
        gamma_a, gamma_d = self.args.ga, self.args.gd
        if getattr(self.args, "costs", None):
            costs = read_json(self.args.costs)
            self.tracker.add_input(Path(self.args.costs).name, _file_digest(self.args.costs))
            gamma_a, gamma_d = costs.get("gamma_a", gamma_a), costs.get("gamma_d", gamma_d)
        if gamma_a is None or gamma_d is None:
            raise InputError("attacker and defender costs are required (--ga/--gd or --costs)")
        return self.config.game_config(n, self.args.La, self.args.Ld, gamma_a, gamma_d)

    # Outputs

    def _write_json(self, payload: Dict, results: Optional[Dict] = None):
        record = self.tracker.finish(results)
        payload = {"run": record.to_dict(), **payload}
        if self.args.out:
            write_json_atomic(self.args.out, payload)
            print(f"💾 Results written to {self.args.out}")
        return payload

    def _write_csv(self, path: str, fields: Sequence[str], rows: Iterable[Dict]) -> int:
        """Stream rows to CSV, flushing each one so partial sweeps survive failures"""
        count = 0
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.DictWriter(handle, fieldnames=list(fields), extrasaction="ignore")
            writer.writeheader()
            for row in rows:
                writer.writerow(row)
                handle.flush()
                count += 1
        print(f"💾 {count} rows written to {path}")
        return count

    def _write_run_sidecar(self, path: str, results: Dict):
        record = self.tracker.finish(results)
        write_json_atomic(f"{path}.run.json", {"run": record.to_dict(), "results": results})

    # Commands

    def cmd_validate(self) -> int:
        path = self.args.input
        manifest = read_json(path)
        reports = []
        if "models" in manifest:
            refs = [Path(path).parent / ref for ref in manifest["models"]]
        else:
            refs = [Path(path)]
        for ref in refs:
            try:
                model = model_from_manifest(read_json(ref), source=ref.stem)
                violations = validate_model(model, self.args.allow_marginal)
            except InputError as e:
                violations = [str(e)]
            reports.append({"path": str(ref), "violations": violations})
        if "models" in manifest and all(not r["violations"] for r in reports):
            try:
                load_model_set(path, self.args.allow_marginal)
            except InputError as e:
                reports.append({"path": str(path), "violations": [str(e)]})

        ok = all(not r["violations"] for r in reports)
        print("\n" + "="*50)
        print("🔎 VALIDATION REPORT")
        print("="*50)
        for report in reports:
            status = "ok" if not report["violations"] else "; ".join(report["violations"])
            print(f"{'✅' if not report['violations'] else '❌'} {report['path']}: {status}")
        print("="*50)
        self._write_json({"status": "ok" if ok else "invalid", "reports": reports}, {"ok": ok})
        return 0 if ok else ValidationError.exit_code

    def cmd_losses(self) -> int:
        model = self._load_model(self.args.input)
        table = self._table(model)
        report = fractional_losses(table)
        ranking = importance_ranking(table)

        print("\n" + "="*50)
        print(f"📉 LOSS TABLE - {model.name} ({self.mode})")
        print("="*50)
        print(f"J_opt = {table.J_opt:.6g}, {1 << table.n} patterns, {len(table.flagged_patterns())} flagged")
        print(f"{'Rank':>4} {'Node':>5} {'Fract. loss %':>14}")
        for row in report["nodes"]:
            print(f"{row['rank']:>4} {row['node']:>5} {row['fractional_loss_pct']:>14.4f}")
        print(f"{'':>4} {'OL':>5} {report['open_loop']['fractional_loss_pct']:>14.4f}")
        if self.cache is not None:
            stats = self.cache.get_cache_stats()
            print(f"\n💾 Cache: {stats['total_entries']} tables, {stats['total_bytes']} bytes in {stats['cache_dir']}")
        print("="*50)

        if self.args.report:
            self._write_csv(self.args.report, LOSS_REPORT_FIELDS, report["nodes"])
        self._write_json({**table.to_dict(), "ranking": ranking, "fractional_losses": report},
                         {"J_opt": table.J_opt, "ranking": ranking})
        return 0

    def cmd_solve(self) -> int:
        game = self.args.game
        if game == "fixed":
            model = self._load_model(self.args.input)
            table = self._table(model)
            config = self._game_config(model.n)
            with self.tracker.stage("cbbi"):
                result = solve_cbbi(config, table, self.config.jobs)
            payload = {"game": game, "input": model.name, "config": config.to_dict(), "J_opt": table.J_opt,
                       "cbse": result.to_dict(table.J_opt)}
            if self.args.check_oracle:
                with self.tracker.stage("oracle"):
                    se_payoff, pairs = brute_force_se(config, table)
                payload["oracle"] = {"se_payoff": se_payoff, "num_se_pairs": len(pairs),
                                     "matches": abs(se_payoff - result.attacker_payoff)
                                     <= config.payoff_tie_tol * max(1.0, abs(se_payoff))}
        else:
            model_set = self._load_model_set(self.args.input)
            solver = self._robust_solver(model_set)
            config = self._game_config(model_set.models[0].n)
            with self.tracker.stage("cbbi"):
                result = solver.average_cbse(config) if game == "average" else solver.nominal_cbse(config)
            J_opt = solver.average_table.J_opt if game == "average" else solver.tables[solver.nominal_index].J_opt
            per_model = [
                {"model": i, "attacker_payoff": solver.evaluate(result, i),
                 "fractional_payoff_pct": fraction_percent(solver.evaluate(result, i), t.J_opt)}
                for i, t in enumerate(solver.tables)
            ]
            payload = {"game": game, "input": Path(self.args.input).stem, "config": config.to_dict(),
                       "J_opt": J_opt, "cbse": result.to_dict(J_opt), "per_model": per_model}

        print("\n" + "="*50)
        print(f"♟️ CBSE ({game} game)")
        print("="*50)
        print(f"🗡️ Attacker a* = {result.a_star}  cost {result.attacker_cost:.4g}")
        print(f"🛡️ Defender d* = {result.d_star}  cost {result.defender_cost:.4g}")
        print(f"📊 Attacker payoff {result.attacker_payoff:.6g} "
              f"({payload['cbse']['fractional_payoff_pct']:.4f}% of J_opt)")
        if "oracle" in payload:
            print(f"🔁 Brute-force SE payoff {payload['oracle']['se_payoff']:.6g} "
                  f"({'match' if payload['oracle']['matches'] else 'MISMATCH'})")
        print("="*50)
        self._write_json(payload, {"attacker_payoff": result.attacker_payoff})
        if "oracle" in payload and not payload["oracle"]["matches"]:
            self.logger.error("CBBI payoff differs from the brute-force SE payoff")
            return 1
        return 0

    def cmd_sweep(self) -> int:
        ga_grid, gd_grid = _float_list(self.args.ga_grid), _float_list(self.args.gd_grid)
        if not ga_grid or not gd_grid:
            raise InputError("cost grid is empty")
        model = self._load_model(self.args.input)
        table = self._table(model)
        base = self.config.game_config(model.n, self.args.La, self.args.Ld, ga_grid[0], gd_grid[0])

        with self.tracker.stage("sweep"):
            if self.args.sweep_levels:
                if len(ga_grid) > 1 or len(gd_grid) > 1:
                    self.logger.warning("Level sweep uses the first value of each cost grid")
                rows = level_sweep(table, base, _int_list(self.args.la_grid), _int_list(self.args.ld_grid),
                                   self.config.jobs)
                count = self._write_csv(self.args.out, LEVEL_FIELDS, rows)
            else:
                rows = cost_sweep(table, base, ga_grid, gd_grid, self.config.jobs)
                count = self._write_csv(self.args.out, SWEEP_FIELDS, rows)
        self._write_run_sidecar(self.args.out, {"rows": count, "J_opt": table.J_opt,
                                                "levels": bool(self.args.sweep_levels)})
        return 0

    def cmd_robust(self) -> int:
        cost_grid = _cost_pairs(self.args.cost_grid)
        if not cost_grid:
            raise InputError("cost grid is empty")
        model_set = self._load_model_set(self.args.input)
        solver = self._robust_solver(model_set)
        base = self.config.game_config(model_set.models[0].n, self.args.La, self.args.Ld, *cost_grid[0])

        rows: List[Dict] = []

        def collect():
            for row in solver.iter_mismatch_rows(cost_grid, base):
                rows.append(row)
                yield row

        with self.tracker.stage("robust"):
            self._write_csv(self.args.out, ROBUST_FIELDS, collect())
            nominal, average = solver.mismatch_statistics(cost_grid, base)
            if self.args.per_model_gd_grid:
                path = self.args.per_model_out or f"{self.args.out}.per_model.csv"
                self._write_csv(path, PER_MODEL_FIELDS,
                                solver.per_model_sweep(base, _float_list(self.args.per_model_gd_grid)))

        summary = {
            "cost_pair_weighting": "uniform",
            "models": model_set.size,
            "nominal_index": model_set.nominal_index,
            "nominal": nominal.to_dict(),
            "average": average.to_dict(),
            "failed_points": sum(1 for r in rows if r.get("error")),
        }
        if self.args.controller_mismatch:
            with self.tracker.stage("controller_mismatch"):
                summary["controller_mismatch_pct"] = [
                    controller_mismatch(model_set, i, self.options) for i in range(model_set.size)
                ]

        print("\n" + "="*50)
        print("🌐 ROBUST GAMES")
        print("="*50)
        for name, stats in (("Nominal-model", nominal), ("Average-payoff", average)):
            s = stats.summary()
            if s["count"]:
                print(f"{name}: mean {s['mean']:.4f}%  median {s['median']:.4f}%  "
                      f"min {s['min']:.4f}%  max {s['max']:.4f}%  ({s['degenerate']} degenerate)")
            else:
                print(f"{name}: no defined mismatches ({s['degenerate']} degenerate)")
        print("="*50)

        summary_path = self.args.summary or f"{self.args.out}.summary.json"
        record = self.tracker.finish({"points": len(rows)})
        write_json_atomic(summary_path, {"run": record.to_dict(), **summary})
        print(f"💾 Summary written to {summary_path}")
        return 0

    def cmd_io_baseline(self) -> int:
        model = self._load_model(self.args.input)
        table = self._table(model)
        config = self._game_config(model.n)
        with self.tracker.stage("io_baseline"):
            result = individual_optimization(config, table, jobs=self.config.jobs)

        print("\n" + "="*50)
        print("⚖️ INDIVIDUAL OPTIMIZATION vs CBSE")
        print("="*50)
        print(f"IO:   a={result.a_io} d={result.d_io} realized payoff {result.realized_payoff:.6g}")
        print(f"CBSE: a*={result.cbse.a_star} d*={result.cbse.d_star} payoff {result.cbse.attacker_payoff:.6g}")
        print(f"Defender payoff vs best-responding attacker: IO {result.defender_payoff_vs_best_response:.6g}"
              f" / CBSE {result.cbse.defender_payoff:.6g}")
        print("="*50)
        self._write_json({"input": model.name, "config": config.to_dict(), "J_opt": table.J_opt,
                          "io": result.to_dict(table.J_opt)},
                         {"realized_payoff": result.realized_payoff})
        return 0

    def run(self) -> int:
        handler = {
            "validate": self.cmd_validate,
            "losses": self.cmd_losses,
            "solve": self.cmd_solve,
            "sweep": self.cmd_sweep,
            "robust": self.cmd_robust,
            "io-baseline": self.cmd_io_baseline,
        }[self.args.command]
        code = handler()
        if self.config.enable_run_history:
            self.tracker.print_run_summary()
        return code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cbse", description="Cost-based Stackelberg security games "
                                                               "over networked control systems")
    parser.add_argument("--jobs", type=int, default=None, help="parallel workers (default CBSE_JOBS or all cores)")
    parser.add_argument("--cache-dir", default=None, help="loss-table cache directory")
    parser.add_argument("--no-cache", action="store_true", help="neither read nor write the loss-table cache")
    parser.add_argument("--seed", type=int, default=None, help="recorded in the run header")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING, ...")
    parser.add_argument("--allow-marginal", action="store_true", help="accept nearly marginal A matrices")
    parser.add_argument("--mode", default=LinkMode.FULL_NODE.value, choices=[m.value for m in LinkMode])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a model or model-set manifest")
    p.add_argument("input")
    p.add_argument("--out", default=None)

    p = sub.add_parser("losses", help="loss table and node importance ranking")
    p.add_argument("input")
    p.add_argument("--out", default=None, help="loss table JSON")
    p.add_argument("--report", default=None, help="ranking CSV")

    def add_game_flags(p, costs_required: bool = False):
        p.add_argument("--La", type=int, default=3)
        p.add_argument("--Ld", type=int, default=3)
        if costs_required:
            p.add_argument("--ga", type=float, default=None, help="attacker cost per node")
            p.add_argument("--gd", type=float, default=None, help="defender cost per node")
            p.add_argument("--costs", default=None, help="JSON file with per-node gamma_a / gamma_d")

    p = sub.add_parser("solve", help="CBSE of a fixed, average-payoff or nominal-model game")
    p.add_argument("input")
    add_game_flags(p, costs_required=True)
    p.add_argument("--game", default="fixed", choices=["fixed", "average", "nominal-eval"])
    p.add_argument("--check-oracle", action="store_true", help="compare with brute-force SE enumeration")
    p.add_argument("--out", default=None)

    p = sub.add_parser("sweep", help="CBSE over a cost grid or level grid")
    p.add_argument("input")
    add_game_flags(p)
    p.add_argument("--ga-grid", required=True)
    p.add_argument("--gd-grid", required=True)
    p.add_argument("--sweep-levels", action="store_true", help="sweep L_a x L_d instead of costs")
    p.add_argument("--la-grid", default="1,2,3")
    p.add_argument("--ld-grid", default="1,2,3")
    p.add_argument("--out", required=True, help="CSV")

    p = sub.add_parser("robust", help="nominal-model vs average-payoff games over a model set")
    p.add_argument("input")
    add_game_flags(p)
    p.add_argument("--cost-grid", required=True, help="ga:gd pairs, comma separated")
    p.add_argument("--per-model-gd-grid", default=None)
    p.add_argument("--per-model-out", default=None)
    p.add_argument("--controller-mismatch", action="store_true")
    p.add_argument("--summary", default=None, help="boxplot summary JSON")
    p.add_argument("--out", required=True, help="mismatch CSV")

    p = sub.add_parser("io-baseline", help="individual optimization compared with the CBSE")
    p.add_argument("input")
    add_game_flags(p, costs_required=True)
    p.add_argument("--out", default=None)

    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one command and map errors to exit codes"""
    args = build_parser().parse_args(argv)
    logger = setup_logging(args.log_level)
    try:
        config = Config(cache_dir=args.cache_dir, jobs=args.jobs)
        return CommandInterface(args, config, logger).run()
    except CbseError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"❌ Error: {e}")
        return e.exit_code
    except ValueError as e:
        logger.error(f"Invalid input: {e}")
        print(f"❌ Error: {e}")
        return InputError.exit_code
    except Exception as e:
        logger.exception(f"Unexpected failure: {e}")
        print(f"❌ Unexpected error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(run())
