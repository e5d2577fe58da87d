"""``powercal`` command line.

Subcommands: generate, shape, train, eval, pipeline, report.  Settings come
from built-in defaults, then an optional TOML config file (``--config``),
then explicit flags; later sources win.  Exit codes: 0 ok, 1 usage or
config, 2 io, 3 numeric divergence, 4 data integrity.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .calibration import ABLATIONS, TrainConfig, train, write_trace
from .errors import ConfigError, PowercalError
from .evaluation import (
    emit_report,
    evaluate_report,
    parse_report,
    split_districts,
    write_diff_csv,
)
from .pipeline import INITS, initial_params, merge, restrict, run_pipeline
from .powerlaw import parse_shape, share_targets
from .regions import load_hierarchy, save_hierarchy
from .scorer import init_ordinal, load_params, save_params, score
from .synth import SynthConfig, benchmark_default, generate_country

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("powercal")

PRESETS = {"benchmark": benchmark_default}

DEFAULTS = {
    "seed": 0,
    "deterministic": True,
    "workers": 1,
    "indicator": "population",
    "shape": "rule_90_10",
    "top_m": 7,
    "min_municipalities": 7,
    "learning_rate": 1e-2,
    "max_iters": 2000,
    "convergence_tol": 1e-8,
    "optimizer": "adam",
    "lambda_inter": 1.0,
    "ablate": "full",
    "init": "ordinal",
    "noise_sigma": 0.5,
    "label_count": 1000,
    "test_frac": 0.2,
    "split_seed": None,
    "granularity": "municipality",
    "scope": "district",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- settings


class Settings:
    """Flag values layered over config-file values layered over DEFAULTS."""

    def __init__(self, args):
        self.args = args
        self.config = {}
        self.synth = {}
        path = getattr(args, "config", None)
        if path:
            try:
                with open(path, "rb") as fh:
                    raw = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
            self.synth = raw.pop("synth", {})
            for key, value in raw.items():
                if isinstance(value, dict):
                    self.config.update(value)
                else:
                    self.config[key] = value
            unknown = set(self.config) - set(DEFAULTS) - {"regions", "tiles"}
            if unknown:
                raise ConfigError(f"{path}: unknown setting(s) {', '.join(sorted(unknown))}")

    def __getitem__(self, key):
        value = getattr(self.args, key, None)
        if value is not None:
            return value
        if key in self.config:
            return self.config[key]
        return DEFAULTS.get(key)

    def resolved(self, keys):
        return {k: self[k] for k in keys}

    def train_config(self) -> TrainConfig:
        return TrainConfig.for_ablation(
            self["ablate"],
            shape=parse_shape(self["shape"]),
            top_m=int(self["top_m"]),
            min_municipalities=int(self["min_municipalities"]),
            learning_rate=float(self["learning_rate"]),
            max_iters=int(self["max_iters"]),
            convergence_tol=float(self["convergence_tol"]),
            seed=int(self["seed"]),
            optimizer=self["optimizer"],
            inter_weight=float(self["lambda_inter"]),
            workers=int(self["workers"]),
            deterministic=bool(self["deterministic"]),
        )

    def split_seed(self):
        s = self["split_seed"]
        return int(self["seed"]) if s is None else int(s)


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, settings, started, inputs, outputs, seeds) -> None:
    resolved = {k: settings[k] for k in sorted(DEFAULTS)}
    resolved["synth"] = settings.synth
    blob = json.dumps(resolved, sort_keys=True, default=str).encode()
    manifest = {
        "tool": "powercal",
        "version": __version__,
        "command": ["powercal", *getattr(settings.args, "argv", [])],
        "config_hash": hashlib.sha256(blob).hexdigest(),
        "settings": resolved,
        "seeds": seeds,
        "inputs": {str(p): _digest(p) for p in inputs},
        "outputs": {str(p): _digest(p) for p in outputs},
        "duration_seconds": round(time.perf_counter() - started, 6),
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _synth_config(settings, preset) -> SynthConfig:
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {', '.join(PRESETS)}")
    cfg = PRESETS[preset or "benchmark"]()
    if settings.synth:
        merged = {**{k: getattr(cfg, k) for k in cfg.__dataclass_fields__}, **settings.synth}
        cfg = SynthConfig.from_dict(merged)
    if settings.args.seed is not None:
        cfg = cfg.replace(seed=settings.args.seed)
    return cfg


def _load(settings):
    regions = settings["regions"]
    tiles = settings["tiles"]
    if not regions or not tiles:
        raise ConfigError("--regions and --tiles are required")
    return load_hierarchy(regions, tiles, settings["indicator"]), [regions, tiles]


def _read_labels(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("tile_id,"):
                continue
            tid, _, label = line.partition(",")
            out.append((tid.strip(), label.strip()))
    return out


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    started = time.perf_counter()
    settings = Settings(args)
    cfg = _synth_config(settings, args.preset)
    h = generate_country(cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    regions, tiles = out / "regions.txt", out / "tiles.csv"
    save_hierarchy(h, regions, tiles)
    write_manifest(out / "manifest.json", settings, started, [], [regions, tiles], {"synth": cfg.seed})
    log.info("wrote %d districts, %d municipalities, %d tiles to %s",
             len(h.districts), len(h.municipalities), h.n_tiles, out)
    return 0


def cmd_shape(args) -> int:
    settings = Settings(args)
    shape = parse_shape(args.a if args.a is not None else (args.preset or settings["shape"]))
    m = int(settings["top_m"])
    target = share_targets(m, shape)
    print(f"a = {shape.a!r}")
    print(f"shares (m={m}):")
    for i, s in enumerate(target.shares, start=1):
        print(f"  {i} {float(s)!r}")
    return 0


def cmd_train(args) -> int:
    started = time.perf_counter()
    settings = Settings(args)
    h, inputs = _load(settings)
    cfg = settings.train_config()
    seed = int(settings["seed"])
    train_ids, _ = split_districts(h, float(settings["test_frac"]), settings.split_seed())
    if args.params:
        p0 = load_params(args.params)
        inputs.append(args.params)
    elif args.labels:
        p0 = init_ordinal(h.without_truth(), _read_labels(args.labels), seed)
        inputs.append(args.labels)
    else:
        p0 = initial_params(h, settings["init"], seed, train_ids,
                            float(settings["noise_sigma"]), int(settings["label_count"]))
    h_train = h.subset(train_ids).without_truth()
    result = train(restrict(p0, h, h_train), h_train, cfg)
    params = merge(p0, h, result.params, h_train)
    save_params(params, args.out)
    outputs = [args.out]
    if args.trace:
        write_trace(result.trace, args.trace)
        outputs.append(args.trace)
    last = result.trace[-1]
    print(f"iterations={last.iter} stop={result.reason} l_intra={last.l_intra:.6g} "
          f"l_inter={last.l_inter:.6g} l_total={last.l_total:.6g}")
    write_manifest(args.manifest or Path(args.out).with_suffix(".manifest.json"),
                   settings, started, inputs, outputs, {"seed": seed, "split": settings.split_seed()})
    return 0


def cmd_eval(args) -> int:
    started = time.perf_counter()
    settings = Settings(args)
    h, inputs = _load(settings)
    params = load_params(args.params)
    inputs.append(args.params)
    _, test_ids = split_districts(h, float(settings["test_frac"]), settings.split_seed())
    h_test = h.subset(test_ids)
    s = score(restrict(params, h, h_test), h_test)
    report = evaluate_report(s, h_test, model=args.model_name or Path(args.params).stem)
    head = report.headline()
    gran, scope = settings["granularity"], settings["scope"]
    if gran not in ("grid", "municipality"):
        raise ConfigError(f"granularity must be grid or municipality, got {gran!r}")
    if scope not in ("district", "country"):
        raise ConfigError(f"scope must be district or country, got {scope!r}")
    print(f"{scope} {gran} R2 = {head[f'{scope}_{gran}_r2']:.4f}")
    outputs = []
    if args.out:
        emit_report(report, args.out)
        outputs.append(args.out)
    if args.diff_csv:
        write_diff_csv(s, h_test, args.diff_csv)
        outputs.append(args.diff_csv)
    if outputs:
        write_manifest(args.manifest or Path(outputs[0]).with_suffix(".manifest.json"),
                       settings, started, inputs, outputs, {"split": settings.split_seed()})
    return 0


def cmd_pipeline(args) -> int:
    started = time.perf_counter()
    settings = Settings(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = {"seed": int(settings["seed"]), "split": settings.split_seed()}
    if settings["regions"] or settings["tiles"]:
        h, inputs = _load(settings)
    else:
        synth = _synth_config(settings, args.preset)
        h = generate_country(synth)
        data = out / "data"
        data.mkdir(exist_ok=True)
        inputs = [data / "regions.txt", data / "tiles.csv"]
        save_hierarchy(h, *inputs)
        seeds["synth"] = synth.seed
    ablate = settings["ablate"]
    cfg = settings.train_config()
    result = run_pipeline(
        h, cfg,
        ablate=ablate,
        init=settings["init"],
        seed=int(settings["seed"]),
        test_frac=float(settings["test_frac"]),
        split_seed=settings.split_seed(),
        noise_sigma=float(settings["noise_sigma"]),
        label_count=int(settings["label_count"]),
    )
    outputs = []
    save_params(result.initial, out / "init.ckpt")
    save_params(result.params, out / "params.ckpt")
    outputs += [out / "init.ckpt", out / "params.ckpt"]
    if result.trace is not None:
        write_trace(result.trace, out / "trace.csv")
        outputs.append(out / "trace.csv")
    emit_report(result.report, out / "report.txt")
    outputs.append(out / "report.txt")
    h_test = h.subset(result.test_ids)
    write_diff_csv(score(restrict(result.params, h, h_test), h_test), h_test, out / "diff.csv")
    outputs.append(out / "diff.csv")
    write_manifest(out / "manifest.json", settings, started, inputs, outputs, seeds)
    for key, value in result.report.headline().items():
        print(f"{key} {value:.4f}")
    return 0


def cmd_report(args) -> int:
    reports = [parse_report(p) for p in args.inputs]
    cols = ["district_grid_r2", "district_municipality_r2", "country_grid_r2", "country_municipality_r2"]
    lines = [
        f"{'model':<20s} {'district/grid':>14s} {'district/muni':>14s} {'country/grid':>14s} {'country/muni':>14s}"
    ]
    for path, rep in zip(args.inputs, reports):
        name = rep.model or Path(path).stem
        head = rep.headline()
        lines.append(f"{name:<20s} " + " ".join(f"{head[c]:>14.4f}" for c in cols))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file; explicit flags override it")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                        help="fixed-order reductions (default on)")
    common.add_argument("--workers", type=int, default=None)
    common.add_argument("--quiet", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--regions")
    data.add_argument("--tiles")
    data.add_argument("--indicator", default=None, help="ground-truth column (default population)")
    data.add_argument("--test-frac", dest="test_frac", type=float, default=None)
    data.add_argument("--split-seed", dest="split_seed", type=int, default=None)

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--shape", default=None, help="preset name or numeric a")
    training.add_argument("--top-m", dest="top_m", type=int, default=None)
    training.add_argument("--min-municipalities", dest="min_municipalities", type=int, default=None)
    training.add_argument("--lr", dest="learning_rate", type=float, default=None)
    training.add_argument("--max-iters", dest="max_iters", type=int, default=None)
    training.add_argument("--tol", dest="convergence_tol", type=float, default=None)
    training.add_argument("--optimizer", choices=["gd", "momentum", "adam"], default=None)
    training.add_argument("--lambda-inter", dest="lambda_inter", type=float, default=None)
    training.add_argument("--ablate", choices=list(ABLATIONS), default=None)
    training.add_argument("--init", choices=list(INITS), default=None)
    training.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=None)
    training.add_argument("--label-count", dest="label_count", type=int, default=None)

    parser = _Parser(prog="powercal", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"powercal {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    p.add_argument("--preset", default=None)
    p.add_argument("--out-dir", default="data")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("shape", parents=[common], help="print a shape and its share targets")
    p.add_argument("--preset", default=None)
    p.add_argument("--a", type=float, default=None)
    p.add_argument("--top-m", dest="top_m", type=int, default=None)
    p.set_defaults(func=cmd_shape)

    p = sub.add_parser("train", parents=[common, data, training], help="calibrate a scorer")
    p.add_argument("--params", help="initial checkpoint (overrides --init)")
    p.add_argument("--labels", help="tile_id,class file for the ordinal init")
    p.add_argument("--out", default="params.ckpt")
    p.add_argument("--trace")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common, data], help="evaluate a checkpoint")
    p.add_argument("--params", required=True)
    p.add_argument("--granularity", choices=["grid", "municipality"], default=None)
    p.add_argument("--scope", choices=["district", "country"], default=None)
    p.add_argument("--out")
    p.add_argument("--diff-csv", dest="diff_csv")
    p.add_argument("--model-name", dest="model_name")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", parents=[common, data, training], help="init, train and evaluate")
    p.add_argument("--preset", default=None)
    p.add_argument("--out-dir", default="run")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("report", parents=[common], help="compare evaluation reports")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except PowercalError as exc:
        print(f"powercal: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"powercal: io error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
