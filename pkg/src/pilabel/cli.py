"""Experiment runner: ``pilabel run|list|check``."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .diffengine import DivergenceError, fd_check, fd_gradient, loss_gradient
from .oracle import (
    OracleError,
    allen_cahn_reference,
    burgers_reference,
    error_metrics,
    helmholtz_reference,
    uniform_grid,
)
from .pde import make_allen_cahn, make_helmholtz, make_vburgers, sample_points, write_points_csv
from .pigp import ConditioningError, KernelConfig, gp_jet, save_gp
from .pinn import TrainConfig, init_mlp, predict, save_mlp, write_history_csv
from .semisup import (
    FidelityCriteria,
    PigpTrainer,
    PinnTrainer,
    bootstrap_train,
    co_train,
    self_train,
)

__all__ = ["ConfigError", "ExperimentConfig", "ExperimentReport", "load_config",
           "run_experiment", "run_cached", "load_report", "list_experiments", "run_checks",
           "main"]

log = logging.getLogger("pilabel")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_ORACLE = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


def _configs_dir():
    return resources.files("pilabel") / "configs"


def _schema():
    return json.loads((_configs_dir() / "schema.json").read_text())


@dataclass
class ExperimentConfig:
    raw: dict
    path: str = ""

    @property
    def id(self):
        return self.raw["id"]

    @property
    def scale(self):
        return float(self.raw.get("scale", 1.0))

    def scaled(self, n, minimum=1):
        return max(minimum, int(round(n * self.scale))) if n else 0


def load_config(path_or_dict, scale=None, seed=None) -> ExperimentConfig:
    """Parse and validate a config; ``scale``/``seed`` override the file's values."""
    import jsonschema

    if isinstance(path_or_dict, dict):
        raw, path = json.loads(json.dumps(path_or_dict)), ""
    else:
        path = str(path_or_dict)
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    if scale is not None:
        raw["scale"] = scale
    if seed is not None:
        raw["seed"] = seed
    try:
        jsonschema.validate(raw, _schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config field {where}: {exc.message}") from None
    mode = raw["mode"]
    need = {"self_pinn": ["pinn", "criteria"], "self_pigp": ["pigp", "criteria"],
            "pinn_trains_pigp": ["pinn", "pigp", "pinn_criteria"],
            "pigp_trains_pinn": ["pinn", "pigp", "gp_criteria"],
            "co_train": ["pinn", "pigp", "pinn_criteria", "gp_criteria"],
            "pinn_gp_bootstrap": ["pinn", "bootstrap"]}[mode]
    missing = [k for k in need if k not in raw]
    if missing:
        raise ConfigError(f"mode {mode!r} requires {missing}")
    return ExperimentConfig(raw, path)


def _problem(cfg: ExperimentConfig):
    p = cfg.raw["problem"]
    if p["name"] == "vburgers":
        if "nu" not in p:
            raise ConfigError("vburgers needs a viscosity 'nu'")
        return make_vburgers(p["nu"])
    if p["name"] == "allen_cahn":
        return make_allen_cahn()
    return make_helmholtz(p.get("k", 1.0))


def _reference(cfg, problem):
    axes = uniform_grid(problem.domain, cfg.raw.get("reference_grid", 256))
    if problem.name == "vburgers":
        return burgers_reference(problem.params["nu"], axes)
    if problem.name == "allen_cahn":
        return allen_cahn_reference(axes)
    return helmholtz_reference(axes)


def _sets(cfg, problem, spec, seed):
    bnd = spec["boundary"]
    if isinstance(bnd, dict):
        bnd = {k: cfg.scaled(v, 3) for k, v in bnd.items()}
    elif isinstance(bnd, list):
        bnd = [cfg.scaled(v, 3) for v in bnd]
    else:
        bnd = cfg.scaled(bnd, 3)
    return sample_points(problem, cfg.scaled(spec["collocation"]), bnd,
                         cfg.scaled(spec.get("test", 2000)), seed)


def _criteria(d):
    return FidelityCriteria(**d) if d is not None else None


def _pinn_trainer(cfg, problem):
    p = cfg.raw["pinn"]
    model = init_mlp(problem.dim, p["hidden"], cfg.raw["seed"] + 1000, p.get("activation", "tanh"),
                     problem.domain if p.get("normalize_inputs", False) else None)
    weights = list(p["weights"]) + [p.get("pseudo_weight", 0.1)]
    tc = TrainConfig(cfg.scaled(p["steps_per_round"]), p["learning_rate"], weights,
                     stop_total_loss=p.get("stop_total_loss"),
                     snapshot_stride=p.get("history_stride", 100))
    init = p.get("initial_steps")
    return PinnTrainer(model, tc, None if init is None else cfg.scaled(init))


def _pigp_trainer(cfg):
    g = cfg.raw["pigp"]
    kernel = KernelConfig(tuple(g["lengthscales"]), g["nugget"], g["beta"],
                          g.get("pseudo_noise", 1e-4))
    return PigpTrainer(kernel, g.get("max_gn_iters", 30), g.get("tol", 1e-12))


@dataclass
class ExperimentReport:
    config: dict
    rounds: list = field(default_factory=list)
    oracle: dict = field(default_factory=dict)
    verdict: dict = field(default_factory=dict)
    files: list = field(default_factory=list)

    def metric(self, model, key="l2_rel"):
        return [r[f"{model}_{key}"] for r in self.rounds if f"{model}_{key}" in r]

    def to_json(self):
        return json.dumps({"config": self.config, "oracle": self.oracle, "rounds": self.rounds,
                           "verdict": self.verdict, "files": self.files}, indent=2,
                          sort_keys=True, default=float)


def _f(v):
    return repr(float(v)) if v is not None else ""


def _write_snapshot(path, it, sets, pseudo_lists, coords):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", *[f"coord_{c}" for c in coords], "tag", "source", "residual_score",
                    "variance_score", "iteration_added", "value"])
        for p in sets.collocation:
            w.writerow([it, *map(_f, p), "CL", "", "", "", "", ""])
        for p, g in zip(sets.boundary, sets.boundary_group):
            w.writerow([it, *map(_f, p), "BC", f"group{int(g)}", "", "", "", ""])
        for p in sets.test:
            w.writerow([it, *map(_f, p), "TEST", "", "", "", "", ""])
        for labels in pseudo_lists:
            for lab in labels:
                w.writerow([it, *map(_f, lab.point), "PD", lab.source, _f(lab.residual_score),
                            _f(lab.variance_score), lab.iteration_added, _f(lab.value)])


def _write_metrics(path, rounds):
    keys = []
    for r in rounds:
        keys += [k for k in r if k not in keys and k != "seconds"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for r in rounds:
            w.writerow([r.get(k, "") if isinstance(r.get(k), (int, str)) else _f(r.get(k))
                        for k in keys])


def run_experiment(config, out_dir="runs", scale=None, seed=None) -> ExperimentReport:
    """Run one experiment and write its artifacts under ``out_dir/<id>``."""
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config, scale, seed)
    if isinstance(config, ExperimentConfig) and (scale is not None or seed is not None):
        cfg = load_config(cfg.raw, scale, seed)
    raw = cfg.raw
    problem = _problem(cfg)
    out = Path(out_dir) / cfg.id
    out.mkdir(parents=True, exist_ok=True)
    ref = _reference(cfg, problem)
    grid = ref.points()
    report = ExperimentReport(raw, oracle={"provenance": ref.provenance,
                                           "accuracy_estimate": ref.accuracy_estimate,
                                           "grid": [len(a) for a in ref.axes]})
    seed0 = raw["seed"]
    sets = _sets(cfg, problem, raw["points"], seed0)
    coords = problem.coords
    mode = raw["mode"]

    def score(prefix, pred):
        m = error_metrics(pred, ref)
        return {f"{prefix}_l2_rel": m["l2_rel"], f"{prefix}_linf_abs": m["linf_abs"]}

    def pinn_metrics(ev):
        return score("pinn", predict(ev.model, grid))

    def gp_metrics(ev):
        return score("pigp", gp_jet(ev.solution, grid).u)

    def on_round(snap):
        log.info("round %d done in %.1fs: %s", snap.iteration, snap.seconds, snap.metrics)

    t0 = time.perf_counter()
    pinn_tr = _pinn_trainer(cfg, problem) if "pinn" in raw else None
    gp_tr = _pigp_trainer(cfg) if "pigp" in raw else None
    gp_sets = sets
    if gp_tr is not None and "points" in raw["pigp"] and mode != "self_pigp":
        gp_sets = _sets(cfg, problem, raw["pigp"]["points"], seed0 + 1)
        gp_sets.test = sets.test
    baseline = None
    if mode == "self_pinn":
        _, snaps = self_train(pinn_tr, problem, sets, _criteria(raw["criteria"]),
                                  raw["i_max"], pinn_metrics, on_round)
    elif mode == "self_pigp":
        gsets = _sets(cfg, problem, raw["pigp"]["points"], seed0) if "points" in raw["pigp"] \
            else sets
        sets = gsets
        _, snaps = self_train(gp_tr, problem, sets, _criteria(raw["criteria"]), raw["i_max"],
                                  gp_metrics, on_round)
    elif mode == "pinn_gp_bootstrap":
        b = raw["bootstrap"]
        kernel = KernelConfig(tuple(b["lengthscales"]), b.get("nugget", 1e-5), 1.0)
        _, snaps = bootstrap_train(pinn_tr, problem, sets, b["near_boundary_dist"],
                                       b["residual_tol"], kernel, raw["i_max"],
                                       b.get("noise", 1e-4), pinn_metrics, on_round)
        if raw.get("baseline", True):
            # plain PINN with the same total number of steps
            base_tr = _pinn_trainer(cfg, problem)
            base_tr.config.steps = pinn_tr.steps_done
            base_tr.initial_steps = None
            ev, _ = base_tr.train(problem, sets)
            baseline = {"steps": pinn_tr.steps_done, **pinn_metrics(ev)}
            save_mlp(out / "baseline_pinn.npz", ev.model)
            write_history_csv(out / "history_baseline.csv", base_tr.history,
                              [g.name for g in problem.groups])
    else:
        pc = _criteria(raw.get("pinn_criteria")) if mode != "pigp_trains_pinn" else None
        gc = _criteria(raw.get("gp_criteria")) if mode != "pinn_trains_pigp" else None
        freeze_nn = raw.get("freeze_pinn", mode == "pinn_trains_pigp")
        freeze_gp = raw.get("freeze_pigp", False)
        _, snaps = co_train(
            pinn_tr, gp_tr, problem, sets, pc, gc, raw["i_max"], freeze_nn, freeze_gp,
            lambda a, b: {**pinn_metrics(a), **gp_metrics(b)}, on_round, gp_sets=gp_sets)

    for snap in snaps:
        row = {"round": snap.iteration}
        for k, v in snap.sizes.items():
            row[f"n_pd_{k}"] = v
        row.update(snap.metrics)
        for k, v in snap.losses.items():
            if isinstance(v, dict):
                row.update({f"{k}_{kk}": vv for kk, vv in v.items()})
            else:
                row[f"loss_{k}"] = v
        row["seconds"] = snap.seconds
        report.rounds.append(row)
        path = out / f"snapshot_round{snap.iteration:02d}.csv"
        _write_snapshot(path, snap.iteration, sets, list(snap.pseudo.values()), coords)
        report.files.append(path.name)

    _write_metrics(out / "metrics.csv", report.rounds)
    write_points_csv(out / "points.csv", sets, coords)
    report.files += ["metrics.csv", "points.csv"]
    if pinn_tr is not None and pinn_tr.history:
        write_history_csv(out / "history_pinn.csv", pinn_tr.history,
                          [g.name for g in problem.groups])
        save_mlp(out / "model_pinn.npz", pinn_tr.model)
        report.files += ["history_pinn.csv", "model_pinn.npz"]
    if gp_tr is not None and gp_tr.solution is not None:
        save_gp(out / "model_pigp.npz", gp_tr.solution)
        report.files.append("model_pigp.npz")

    first, last = report.rounds[0], report.rounds[-1]
    primary = {"self_pinn": "pinn", "self_pigp": "pigp", "pinn_trains_pigp": "pigp",
               "pigp_trains_pinn": "pinn", "co_train": "pinn", "pinn_gp_bootstrap": "pinn"}[mode]
    key = f"{primary}_l2_rel"
    report.verdict = {
        "model": primary, "rounds": len(report.rounds),
        "l2_rel_first": first[key], "l2_rel_last": last[key],
        "linf_abs_first": first[f"{primary}_linf_abs"],
        "linf_abs_last": last[f"{primary}_linf_abs"],
        "improved": bool(last[key] < first[key]),
        "seconds": time.perf_counter() - t0,
    }
    if baseline is not None:
        report.verdict["baseline"] = baseline
        report.verdict["beats_baseline"] = bool(last[key] < baseline["pinn_l2_rel"])
    (out / "report.json").write_text(report.to_json())
    report.files.append("report.json")
    return report


def _source_digest():
    h = hashlib.sha256()
    for f in sorted(Path(__file__).parent.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def run_key(cfg: ExperimentConfig):
    """Digest of the validated config and the package sources."""
    h = hashlib.sha256(json.dumps(cfg.raw, sort_keys=True).encode())
    h.update(_source_digest().encode())
    return h.hexdigest()[:16]


def load_report(path) -> ExperimentReport:
    d = json.loads(Path(path).read_text())
    return ExperimentReport(d["config"], d["rounds"], d["oracle"], d["verdict"], d["files"])


def run_cached(config, root, scale=None, seed=None):
    """Run an experiment under ``root/<key>`` unless a finished run with the same
    config and package sources is already there; returns ``(report, run dir)``."""
    cfg = load_config(config.raw if isinstance(config, ExperimentConfig) else config, scale, seed)
    base = Path(root) / f"{cfg.id}-{run_key(cfg)}"
    done = base / cfg.id / "report.json"
    if not done.exists():
        run_experiment(cfg, base)
    return load_report(done), done.parent


def _shipped():
    out = []
    for f in sorted(_configs_dir().iterdir(), key=lambda p: p.name):
        if f.name.endswith(".json") and f.name != "schema.json":
            raw = json.loads(f.read_text())
            out.append({"id": raw["id"], "description": raw["description"], "file": f.name})
    return out


def list_experiments(filter_=None):
    rows = _shipped()
    if filter_:
        rows = [r for r in rows if filter_ in r["id"]]
    return rows


def shipped_config_path(exp_id):
    for r in _shipped():
        if r["id"] == exp_id:
            return str(_configs_dir() / r["file"])
    raise ConfigError(f"unknown experiment id {exp_id!r}")


def run_checks(seed=0, n_configs=20):
    """Derivative finite-difference checks plus oracle self-convergence; returns a list of
    ``(name, ok, detail)``."""
    results = []
    rng = np.random.default_rng(seed)
    problems = [make_vburgers(0.01 / np.pi), make_allen_cahn(), make_helmholtz()]
    for prob in problems:
        worst_jet = worst_grad = 0.0
        for _ in range(n_configs):
            model = init_mlp(2, [8, 8], seed=int(rng.integers(1 << 31)))
            lo, hi = prob.domain[:, 0], prob.domain[:, 1]
            X = lo + (hi - lo) * rng.uniform(0.05, 0.95, size=(4, 2))
            for x in X:
                worst_jet = max(worst_jet, fd_check(model, x, prob.spec, 1e-4))

            def loss(tr, X=X, prob=prob):
                return prob.interior_residual(X, tr.jet(X, prob.spec)).square().mean()

            g = loss_gradient(loss, model)
            idx = rng.choice(model.n_params, size=10, replace=False)
            fd = fd_gradient(loss, model, 1e-6, idx)
            worst_grad = max(worst_grad, float(np.max(np.abs(g[idx] - fd) /
                                                      np.maximum(np.abs(fd), 1.0))))
        results.append((f"derivatives:{prob.name}", worst_jet < 1e-5,
                        f"max rel err {worst_jet:.2e}"))
        results.append((f"gradient:{prob.name}", worst_grad < 1e-5,
                        f"max rel err {worst_grad:.2e}"))
    try:
        axes = (np.linspace(0.1, 1.0, 6), np.linspace(-1, 1, 9))
        r = burgers_reference(0.01 / np.pi, axes, use_cache=False)
        results.append(("oracle:burgers", r.accuracy_estimate < 1e-6,
                        f"node doubling {r.accuracy_estimate:.2e}"))
        r = allen_cahn_reference((np.linspace(0, 1, 5), np.linspace(-1, 1, 9)), use_cache=False)
        results.append(("oracle:allen_cahn", r.accuracy_estimate < 1e-6,
                        f"step halving {r.accuracy_estimate:.2e}"))
    except OracleError as exc:
        results.append(("oracle", False, str(exc)))
    return results


def _parser():
    ap = argparse.ArgumentParser(prog="pilabel", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)
    r = sub.add_parser("run", help="run an experiment config (path or shipped id)")
    r.add_argument("config")
    r.add_argument("--scale", type=float)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", default="runs")
    ls = sub.add_parser("list", help="list shipped experiments")
    ls.add_argument("--filter")
    ls.add_argument("--json", action="store_true")
    sub.add_parser("check", help="derivative and oracle self-checks")
    return ap


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.verb == "list":
        rows = list_experiments(args.filter)
        if args.json:
            print(json.dumps(rows, indent=2))
        else:
            width = max([len(r["id"]) for r in rows] + [2])
            for r in rows:
                print(f"{r['id']:<{width}}  {r['description']}")
        return EXIT_OK
    if args.verb == "check":
        try:
            results = run_checks()
        except OracleError as exc:
            print(f"FAIL oracle: {exc}")
            return EXIT_ORACLE
        for name, ok, detail in results:
            print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        if all(ok for _, ok, _ in results):
            return EXIT_OK
        return EXIT_ORACLE
    path = args.config
    try:
        if not Path(path).exists():
            path = shipped_config_path(path)
        report = run_experiment(path, args.out, args.scale, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OracleError as exc:
        print(f"oracle failure: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    except ConditioningError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    v = report.verdict
    print(f"{report.config['id']}: {v['model']} l2_rel {v['l2_rel_first']:.3e} -> "
          f"{v['l2_rel_last']:.3e} over {v['rounds']} rounds ({v['seconds']:.0f}s)")
    if "baseline" in v:
        print(f"  plain baseline l2_rel {v['baseline']['pinn_l2_rel']:.3e}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
