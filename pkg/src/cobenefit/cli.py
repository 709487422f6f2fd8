"""Command-line workflows.

Every subcommand reads an optional INI config (``--config``), applies flag
overrides, writes its artifacts under ``--out-dir`` and finishes by writing
``manifest_<subcommand>.json`` listing inputs, outputs and timings.

Exit codes: 0 success, 1 other error, 2 usage, 3 missing input file,
4 malformed input or config, 5 model shape underflow.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import grid, health, nn, rescnn, synthetic, training
from .grid import EMISSION_CHANNELS, SchemaError, parse_channel
from .rescnn import PRUNED_SPACE, SEARCH_SPACE, BuildError, HyperParams

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_MISSING, EXIT_SCHEMA, EXIT_SHAPE = 0, 1, 2, 3, 4, 5

# 2015 per-capita GDP, current US$ (World Bank): United States, China
DEFAULT_VSL = dict(base=8.7e6, pcgdp_base=56762.7, pcgdp_target=8016.4, elasticity=0.8)


class ConfigError(SchemaError):
    pass


# --- config ------------------------------------------------------------------

class Config:
    """INI config with typed getters. Relative paths resolve against the
    config file's directory."""

    def __init__(self, path=None):
        self.path = path
        self.parser = configparser.ConfigParser(interpolation=None)
        self.parser.optionxform = str
        if path:
            if not os.path.exists(path):
                raise FileNotFoundError(path)
            try:
                self.parser.read(path)
            except configparser.Error as exc:
                raise ConfigError(f"{path}: {exc}") from None
        self.base = os.path.dirname(os.path.abspath(path)) if path else os.getcwd()

    def section(self, name) -> dict:
        return dict(self.parser[name]) if self.parser.has_section(name) else {}

    def get(self, section, key, default=None, kind=str):
        value = self.section(section).get(key)
        if value is None or value == "":
            return default
        try:
            if kind is bool:
                return value.strip().lower() in ("1", "true", "yes", "on")
            return kind(value)
        except ValueError:
            raise ConfigError(f"[{section}] {key}: cannot read {value!r} as {kind.__name__}") from None

    def path_of(self, section, key, default=None):
        value = self.get(section, key)
        if value is None:
            return default
        return value if os.path.isabs(value) else os.path.join(self.base, value)


def _floats(text):
    return tuple(float(v) for v in text.replace(",", " ").split())


def hyper_from_config(cfg: Config) -> HyperParams:
    try:
        return HyperParams.from_dict(cfg.section("model"))
    except ValueError as exc:
        raise ConfigError(f"[model] {exc}") from None


def kernel_from_config(cfg: Config) -> synthetic.OracleKernel:
    sec = cfg.section("kernel")
    d = synthetic.OracleKernel().to_dict()
    try:
        for key, value in sec.items():
            if key not in d:
                raise ConfigError(f"[kernel] unknown key {key}")
            if key in ("beta", "geo_coef"):
                d[key] = _floats(value)
            elif value.strip().lower() in ("", "none") and key in ("saturation", "support_cells"):
                d[key] = None
            elif key == "support_cells":
                d[key] = int(value)
            else:
                d[key] = float(value)
        return synthetic.OracleKernel.from_dict(d)
    except ValueError as exc:
        raise ConfigError(f"[kernel] {exc}") from None


def gemm_from_config(cfg: Config) -> health.GemmParams:
    sec = cfg.section("gemm")
    d = dict(health.GEMM_NCD_LRI.__dict__)
    try:
        for key, value in sec.items():
            if key not in d:
                raise ConfigError(f"[gemm] unknown key {key}")
            d[key] = float(value)
        return health.GemmParams(**d)
    except ValueError as exc:
        raise ConfigError(f"[gemm] {exc}") from None


def vsl_from_config(cfg: Config) -> health.VslConfig:
    d = dict(DEFAULT_VSL)
    for key in d:
        d[key] = cfg.get("vsl", key, d[key], float)
    try:
        return health.VslConfig(**d)
    except ValueError as exc:
        raise ConfigError(f"[vsl] {exc}") from None


def emission_factor(cfg: Config, sector) -> float:
    ch = parse_channel(sector)
    value = cfg.get("emission_factors", ch.name, None, float)
    if value is None:
        raise ConfigError(f"[emission_factors] {ch.name} is required (tCO2 per tce)")
    if value <= 0:
        raise ConfigError(f"[emission_factors] {ch.name} must be positive")
    return value


def mortality_from_config(cfg: Config):
    path = cfg.path_of("health", "mortality")
    return health.ILLUSTRATIVE_MORTALITY if path is None else health.read_mortality(path)


# --- run directory -------------------------------------------------------------

def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Tracks inputs, outputs and timings for the manifest."""

    def __init__(self, args, cfg: Config):
        self.args = args
        self.cfg = cfg
        self.out = args.out_dir
        os.makedirs(self.out, exist_ok=True)
        self.inputs = []
        self.outputs = []
        self.timings = {}
        self._t0 = time.perf_counter()
        if cfg.path:
            self.inputs.append(cfg.path)

    def path(self, *parts):
        p = os.path.join(self.out, *parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    def wrote(self, *paths):
        self.outputs.extend(str(p) for p in paths)

    def used(self, *paths):
        self.inputs.extend(str(p) for p in paths)

    def timed(self, label, fn, *a, **kw):
        t = time.perf_counter()
        out = fn(*a, **kw)
        self.timings[label] = round(time.perf_counter() - t, 3)
        return out

    def write_csv(self, name, header, rows):
        path = self.path(name)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        self.wrote(path)
        return path

    def finish(self):
        self.timings["total"] = round(time.perf_counter() - self._t0, 3)
        manifest = {
            "subcommand": self.args.command,
            "argv": self.args.argv,
            "config": self.cfg.path,
            "seed": self.args.seed,
            "workers": self.args.workers,
            "inputs": {p: sha256(p) for p in sorted(set(self.inputs)) if os.path.isfile(p)},
            "outputs": {p: sha256(p) for p in self.outputs},
            "timings_s": self.timings,
        }
        path = os.path.join(self.out, f"manifest_{self.args.command.replace('-', '_')}.json")
        with open(path, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def fmt(x) -> str:
    return repr(float(x))


def _world_dir(run: Run):
    return run.args.world or run.cfg.path_of("paths", "world") or os.path.join(run.out, "world")


def _model_dir(run: Run):
    return run.args.model or run.cfg.path_of("paths", "model") or os.path.join(run.out, "model")


def load_world(run: Run):
    d = _world_dir(run)
    if not os.path.isdir(d):
        raise FileNotFoundError(f"world directory {d} not found")
    world = grid.read_world(d)
    run.used(*(os.path.join(d, f) for f in sorted(os.listdir(d))))
    return world


def load_model(run: Run):
    d = _model_dir(run)
    for name in ("model.ckpt", "model.json"):
        if not os.path.exists(os.path.join(d, name)):
            raise FileNotFoundError(os.path.join(d, name))
    try:
        model = rescnn.load_model(d)
    except (KeyError, json.JSONDecodeError, nn.CheckpointError) as exc:
        raise SchemaError(f"{d}: {exc}") from None
    run.used(os.path.join(d, "model.ckpt"), os.path.join(d, "model.json"))
    return model


def _split_seed(run: Run):
    return run.cfg.get("split", "seed", run.args.seed, int)


def write_split(split: grid.DatasetSplit, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "split"])
        for tag in ("train", "val", "test"):
            for sid in getattr(split, tag):
                w.writerow([sid, tag])


def read_split(path) -> grid.DatasetSplit:
    parts = {"train": [], "val": [], "test": []}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["id", "split"]:
            raise SchemaError(f"{path}: expected header id,split")
        for rec in reader:
            if len(rec) != 2 or rec[1] not in parts:
                raise SchemaError(f"{path}: bad row {rec}")
            parts[rec[1]].append(rec[0])
    return grid.DatasetSplit(tuple(parts["train"]), tuple(parts["val"]), tuple(parts["test"]), -1)


def _datasets(world, split, half_extent):
    weights = grid.compute_station_weights(world.stations, world.city_population)
    return [training.build_dataset(world, getattr(split, tag), half_extent, weights)
            for tag in ("train", "val", "test")]


def _sectors(arg):
    if not arg or arg.upper() == "ALL":
        return list(EMISSION_CHANNELS)
    out = []
    for name in arg.split(","):
        ch = parse_channel(name)
        if not grid.is_emission(ch):
            raise ValueError(f"{ch.name} is not an emission sector")
        out.append(ch)
    return out


# --- subcommands -------------------------------------------------------------

def cmd_gen_world(run: Run):
    cfg = run.cfg
    size = _floats(cfg.get("world", "size", "60 60"))
    kernel = kernel_from_config(cfg)
    totals = {ch.name: cfg.get("world", f"total_{ch.name}", None, float) for ch in EMISSION_CHANNELS}
    world = run.timed("generate", synthetic.generate_world, run.args.seed,
                      size=(int(size[0]), int(size[1])),
                      n_stations=cfg.get("world", "n_stations", 300, int),
                      kernel=kernel,
                      national_totals={k: v for k, v in totals.items() if v is not None},
                      total_population=cfg.get("world", "total_population", 1.0e8, float),
                      cell_km=cfg.get("world", "cell_km", 10.0, float))
    out = os.path.join(run.out, "world")
    run.wrote(*synthetic.write_synthetic_world(world, kernel, out))
    print(f"world {world.shape[0]}x{world.shape[1]}, {len(world.stations)} stations -> {out}")


def _train_and_save(run: Run, world, hyper, split, seed):
    model = rescnn.build_model(hyper, seed=seed)
    train_data, val_data, test_data = _datasets(world, split, hyper.half_extent)
    res = run.timed("train", training.train, model, train_data, hyper, seed=seed)
    mdir = os.path.join(run.out, "model")
    run.wrote(*rescnn.save_model(model, mdir))
    split_path = os.path.join(mdir, "split.csv")
    write_split(split, split_path)
    run.wrote(split_path)
    run.write_csv("train_trace.csv", ["epoch", "train_wmse"], [[e, fmt(l)] for e, l in res.trace])
    reports = [training.evaluate(model, d, tag) for d, tag in
               ((train_data, "train"), (val_data, "val"), (test_data, "test"))]
    path = run.path("metrics.csv")
    training.write_metrics(reports, path)
    run.wrote(path)
    _print_metrics(reports)
    return model


def cmd_train(run: Run):
    world = load_world(run)
    hyper = hyper_from_config(run.cfg)
    split = grid.split_dataset(world.station_ids(), _split_seed(run))
    _train_and_save(run, world, hyper, split, run.args.seed)


def _print_metrics(reports):
    print(f"{'split':<6} {'n':>5} {'MFB':>9} {'MFE':>9} {'MPE':>9} {'rho':>7} {'R2':>7}")
    for r in reports:
        print(f"{r.tag:<6} {r.n:>5} {r.mfb:>9.4f} {r.mfe:>9.4f} {r.mpe:>9.4f} {r.rho:>7.4f} {r.r2:>7.4f}")


def cmd_evaluate(run: Run):
    world = load_world(run)
    model = load_model(run)
    split_path = os.path.join(_model_dir(run), "split.csv")
    if os.path.exists(split_path):
        split = read_split(split_path)
        run.used(split_path)
    else:
        split = grid.split_dataset(world.station_ids(), _split_seed(run))
    datasets = _datasets(world, split, model.hyper.half_extent)
    reports = [training.evaluate(model, d, tag) for d, tag in zip(datasets, ("train", "val", "test"))]
    path = run.path("metrics.csv")
    training.write_metrics(reports, path)
    run.wrote(path)
    _print_metrics(reports)


def _overrides(run: Run) -> dict:
    d = run.cfg.section("search.overrides")
    for item in run.args.override or []:
        if "=" not in item:
            raise ConfigError(f"--override expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        d[k.strip()] = v.strip()
    try:
        parsed = HyperParams.from_dict(d)
    except ValueError as exc:
        raise ConfigError(f"search overrides: {exc}") from None
    return {k: getattr(parsed, k) for k in d}


def cmd_search(run: Run):
    args, cfg = run.args, run.cfg
    world = load_world(run)
    base = hyper_from_config(cfg)
    space_name = args.space or cfg.get("search", "space", "full")
    spaces = {"full": SEARCH_SPACE, "pruned": PRUNED_SPACE}
    if space_name not in spaces:
        raise ConfigError(f"unknown search space {space_name!r}")
    space = spaces[space_name]
    n_trials = args.trials if args.trials is not None else cfg.get("search", "trials", 400, int)
    overrides = _overrides(run)
    base = base.replace(**overrides)
    split = grid.split_dataset(world.station_ids(), _split_seed(run))
    train_data, val_data, _ = _datasets(world, split, base.half_extent)
    objective = training.TrainValObjective(train_data, val_data)

    trials = run.timed("random_search", training.random_search, space, n_trials, objective,
                       seed=args.seed, overrides=overrides, base=base, workers=args.workers)
    log = run.path("trials.csv")
    training.append_trial_log(trials, log)
    best = min(trials, key=lambda r: (r.val_wmse, r.trial_id))
    summary = {"random_trials": n_trials, "random_best": best.hyper.to_dict(),
               "random_best_val_wmse": best.val_wmse}
    best_hyper = best.hyper
    if args.then_grid:
        grid_space_name = args.grid_space or cfg.get("search", "grid_space", "pruned")
        if grid_space_name == "reduced":
            gspace = PRUNED_SPACE
        elif grid_space_name == "pruned":
            delta = cfg.get("search", "delta", None, float)
            gspace = training.prune_space(trials, space, delta=delta,
                                          kappa=cfg.get("search", "kappa", 2.0, float),
                                          delta_frac=cfg.get("search", "delta_frac", 0.05, float))
        else:
            raise ConfigError(f"unknown grid space {grid_space_name!r}")
        gspace = {k: v for k, v in gspace.items() if k not in overrides}
        best_hyper, board = run.timed("grid_search", training.grid_search, gspace, objective, seed=args.seed,
                                      base=base, workers=args.workers,
                                      first_id=n_trials)
        training.append_trial_log(sorted(board, key=lambda r: r.trial_id), log, header=False)
        summary.update(grid_space={k: list(v) for k, v in gspace.items()},
                       grid_combinations=training.grid_size(gspace),
                       grid_best_val_wmse=board[0].val_wmse)
    run.wrote(log)
    summary["best"] = best_hyper.to_dict()
    path = run.path("search_summary.json")
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    run.wrote(path)
    print(f"best hyperparameters: {json.dumps(best_hyper.to_dict(), sort_keys=True)}")
    if args.train_best:
        # search overrides are a budget control; the winner trains for the full schedule
        final = args.final_iterations or hyper_from_config(cfg).iterations
        _train_and_save(run, world, best_hyper.replace(iterations=final), split, args.seed)


def _health_inputs(run: Run, world):
    cfg = run.cfg
    mortality = mortality_from_config(cfg)
    mpath = cfg.path_of("health", "mortality")
    if mpath:
        run.used(mpath)
    demo = health.station_demography(world, world.stations, mortality)
    return demo, gemm_from_config(cfg)


def cmd_scenario_sweep(run: Run):
    args, cfg = run.args, run.cfg
    world = load_world(run)
    model = load_model(run)
    demo, gemm = _health_inputs(run, world)
    sector = parse_channel(args.sector)
    fractions = health.sweep_fractions(args.p_max, args.p_step)
    weights = grid.compute_station_weights(world.stations, world.city_population)
    rows = run.timed("sweep", health.curtailment_sweep, model, world, world.stations, sector, demo, gemm,
                     weights, fractions=fractions, n_draws=cfg.get("health", "n_draws", 1000, int),
                     seed=args.seed, ci_level=cfg.get("health", "ci_level", 0.95, float))
    run.write_csv(f"sweep_{sector.name}.csv",
                  ["p", "pop_weighted_pm25", "avoided_deaths", "ci_low", "ci_high"],
                  [[fmt(r.p), fmt(r.pop_weighted_concentration), fmt(r.avoided_deaths), fmt(r.ci_low),
                    fmt(r.ci_high)] for r in rows])
    for r in rows:
        print(f"p={r.p:.2f} pm25={r.pop_weighted_concentration:.3f} avoided={r.avoided_deaths:.1f} "
              f"[{r.ci_low:.1f}, {r.ci_high:.1f}]")


def _fields(run: Run, world, model, sectors):
    demo, gemm = _health_inputs(run, world)
    value = health.vsl(vsl_from_config(run.cfg))
    out = {}
    for ch in sectors:
        ef = emission_factor(run.cfg, ch)
        contrib = run.timed(f"md_{ch.name}", health.model_damage_contributions, model, world, world.stations,
                            ch, demo, gemm, value)
        out[ch] = (contrib, health.field_from_contributions(contrib, world, ef))
    return out


def cmd_md_map(run: Run):
    world = load_world(run)
    model = load_model(run)
    clamp = run.args.clamp_nonnegative
    summary = []
    for ch, (_, field) in _fields(run, world, model, _sectors(run.args.sector)).items():
        md = field.values(clamp)
        rows = [[r, c, ch.name, fmt(md[r, c])] for r, c in zip(*np.nonzero(field.covered))]
        run.write_csv(f"md_{ch.name}.csv", ["row", "col", "sector", "md_usd_per_tco2"], rows)
        vals = md[field.covered]
        summary.append([ch.name, int(field.covered.sum()), field.n_uncovered, field.n_negative,
                        fmt(vals.mean()), fmt(vals.std())])
        print(f"{ch.name}: mean {vals.mean():.2f} $/tCO2, sd {vals.std():.2f}, "
              f"{field.n_negative} negative cells, {field.n_uncovered} cells without coverage")
    run.write_csv("md_summary.csv", ["sector", "covered_cells", "uncovered_cells", "negative_cells",
                                     "mean_md_usd_per_tco2", "sd_md_usd_per_tco2"], summary)


def _regions(run: Run, world):
    path = run.cfg.path_of("paths", "regions")
    if path is None:
        return world.regions
    run.used(path)
    return grid.read_region_map(path, world.shape)


def cmd_total_damage(run: Run):
    world = load_world(run)
    model = load_model(run)
    regions = _regions(run, world)
    rows = []
    for ch, (_, field) in _fields(run, world, model, _sectors(run.args.sector)).items():
        s = health.total_damage(field, world, regions)
        for region, td in s.by_region.items():
            rows.append([ch.name, region, fmt(td)])
        rows.append([ch.name, "ALL", fmt(s.total)])
        print(f"{ch.name}: total damage {s.total / 1e9:.3f} billion $/yr "
              f"({s.unmapped_cells} unmapped cells, {s.uncovered_emissions:.3g} tce/yr uncovered)")
    run.write_csv("total_damage.csv", ["sector", "region", "td_usd_per_yr"], rows)


def cmd_distance_curve(run: Run):
    world = load_world(run)
    model = load_model(run)
    edges = None if not run.args.edges_km else list(_floats(run.args.edges_km))
    rows = []
    for ch, (contrib, _) in _fields(run, world, model, _sectors(run.args.sector)).items():
        curve = health.damage_by_distance(contrib, world, edges)
        full = curve[-1][1]
        for edge, td in curve:
            share = td / full if full else 0.0
            rows.append([ch.name, fmt(edge), fmt(td), fmt(share)])
            print(f"{ch.name} {edge:6.0f} km: {td / 1e9:.4f} billion $/yr ({share:.1%})")
    run.write_csv("distance_curve.csv", ["sector", "edge_km", "damage_usd_per_yr", "share_of_full"], rows)


COMMANDS = {
    "gen-world": cmd_gen_world,
    "train": cmd_train,
    "search": cmd_search,
    "evaluate": cmd_evaluate,
    "scenario-sweep": cmd_scenario_sweep,
    "md-map": cmd_md_map,
    "total-damage": cmd_total_damage,
    "distance-curve": cmd_distance_curve,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--seed", type=int, default=0, help="run seed (default 0)")
    common.add_argument("--workers", type=int, default=1, help="worker processes for search")
    common.add_argument("--out-dir", default="run", help="run directory (default ./run)")
    common.add_argument("--world", help="world directory (default [paths] world or OUT/world)")
    common.add_argument("--model", help="model directory (default [paths] model or OUT/model)")

    parser = argparse.ArgumentParser(prog="cobenefit", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-world", parents=[common], help="generate a synthetic oracle world")
    sub.add_parser("train", parents=[common], help="train a model with the [model] hyperparameters")
    s = sub.add_parser("search", parents=[common], help="random search, optional pruning and grid search")
    s.add_argument("--trials", type=int, help="random trials (default [search] trials or 400)")
    s.add_argument("--then-grid", action="store_true", help="grid-search the pruned space afterwards")
    s.add_argument("--space", choices=["full", "pruned"], help="random-search space")
    s.add_argument("--grid-space", choices=["pruned", "reduced"],
                   help="grid over the space pruned from the trials, or the fixed published reduced space")
    s.add_argument("--override", action="append", metavar="KEY=VALUE",
                   help="fix a hyperparameter in every trial (budget control); repeatable")
    s.add_argument("--train-best", action="store_true", help="train and save the winning model")
    s.add_argument("--final-iterations", type=int, help="epochs for --train-best (default: [model] iterations)")
    sub.add_parser("evaluate", parents=[common], help="five-metric report on train/val/test")
    s = sub.add_parser("scenario-sweep", parents=[common], help="avoided deaths under sector curtailment")
    s.add_argument("--sector", required=True)
    s.add_argument("--p-max", type=float, default=0.20)
    s.add_argument("--p-step", type=float, default=0.02)
    for name, text in (("md-map", "marginal damage field per sector"),
                       ("total-damage", "total damage per sector and region"),
                       ("distance-curve", "cumulative damage by window size")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--sector", default="ALL", help="comma-separated sectors or ALL")
        if name == "md-map":
            s.add_argument("--clamp-nonnegative", action="store_true",
                           help="report negative marginal damages as zero")
        if name == "distance-curve":
            s.add_argument("--edges-km", help="square edge lengths in km (default 110, 210, ... full)")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    try:
        cfg = Config(args.config)
        run = Run(args, cfg)
        COMMANDS[args.command](run)
        run.finish()
        return EXIT_OK
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc.filename or exc}", file=sys.stderr)
        return EXIT_MISSING
    except (BuildError, nn.ShapeError) as exc:
        print(f"error: shape underflow: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except SchemaError as exc:
        print(f"error: schema violation: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (ValueError, KeyError, training.TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
