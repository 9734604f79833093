"""Command-line experiment driver.

``cbmlab run --config exp.json`` executes gen-data, train, calibrate,
evaluate, curve and report in order.  Each stage is also a subcommand that
reads the artifacts of the stages before it from ``--out``.

Every CSV starts with a ``# stage=... config_hash=... schema_version=...``
comment row.  Nothing time-dependent is written, so identical configs give
byte-identical trees.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import sys
from dataclasses import dataclass, fields
from pathlib import Path


from .calibration import calibrate_model, concept_logits, expected_calibration_error, fit_platt
from .datagen import TaskSpec, generate_task, load_dataset, save_dataset
from .interventions import (
    BayesApproxConfig,
    InterventionCurve,
    exact_bayes_curve,
    intervention_curve,
    load_masked_bayes,
    masked_bayes_curve,
    save_masked_bayes,
    train_masked_bayes,
    validate_fractions,
)
from .metrics import evaluate, per_concept_auc, write_reports
from .models import KINDS, ModelConfig, forward, init_model, load_model, save_model
from .tensorcore import sigmoid
from .training import TrainConfig, inference_options, train

SCHEMA_VERSION = 1
BAYES_KINDS = ("exact_bayes", "masked_bayes")

DEFAULTS = {
    "task": {"sigma_x": 0.3, "fractions": [0.6, 0.2, 0.2]},
    "models": [{"kind": "vanilla_cbm"}, {"kind": "cem"}, {"kind": "mixcem"}],
    "train": {},
    "calibration": {"enabled": True, "epochs": 30, "lr": 0.01},
    "interventions": {"fractions": [0.0, 0.25, 0.5, 0.75, 1.0], "trials": 5,
                      "shift_levels": [0.05, 0.1], "mc_samples": 50, "bayes": {}},
}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"stage {stage} failed: {exc}")
        self.stage = stage


# -- config --------------------------------------------------------------------

def _require(d: dict, key: str, where: str):
    if key not in d:
        raise ConfigError(f"{where}{key}: missing required field")
    return d[key]


def _known(d: dict, allowed, where: str) -> None:
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ConfigError(f"{where}{extra[0]}: unknown field")


def _field_names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def validate_config(raw: dict) -> dict:
    """Fill defaults and check the experiment config; errors name the offending field."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    cfg = copy.deepcopy(raw)
    version = _require(cfg, "schema_version", "")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {version!r}")
    seed = _require(cfg, "seed", "")
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        raise ConfigError("seed: must be an unsigned 64-bit integer")
    _known(cfg, {"schema_version", "seed", "task", "models", "train", "calibration", "interventions", "out"}, "")

    task = {**DEFAULTS["task"], **_require(cfg, "task", "")}
    for key in ("K", "k", "n", "L", "N"):
        _require(task, key, "task.")
    _known(task, _field_names(TaskSpec) - {"seed"}, "task.")
    try:
        TaskSpec(**{**task, "seed": 0, "fractions": tuple(task["fractions"])}).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"task: {exc}") from None
    cfg["task"] = task

    models = cfg.get("models", DEFAULTS["models"])
    if not models:
        raise ConfigError("models: need at least one model")
    seen = set()
    for i, m in enumerate(models):
        kind = _require(m, "kind", f"models[{i}].")
        if kind not in KINDS:
            raise ConfigError(f"models[{i}].kind: unknown kind {kind!r}")
        if kind in seen:
            raise ConfigError(f"models[{i}].kind: duplicate kind {kind!r}")
        seen.add(kind)
        _known(m, _field_names(ModelConfig) - {"n_in", "k", "L", "seed"}, f"models[{i}].")
    cfg["models"] = models

    train_cfg = cfg.get("train", {})
    _known(train_cfg, _field_names(TrainConfig) - {"seed"}, "train.")
    try:
        TrainConfig(**train_cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from None
    cfg["train"] = train_cfg

    cal = {**DEFAULTS["calibration"], **cfg.get("calibration", {})}
    _known(cal, DEFAULTS["calibration"], "calibration.")
    if cal["epochs"] < 0 or cal["lr"] <= 0:
        raise ConfigError("calibration: need epochs >= 0 and lr > 0")
    cfg["calibration"] = cal

    iv = {**DEFAULTS["interventions"], **cfg.get("interventions", {})}
    _known(iv, DEFAULTS["interventions"], "interventions.")
    try:
        validate_fractions(iv["fractions"])
    except ValueError as exc:
        raise ConfigError(f"interventions.fractions: {exc}") from None
    if iv["trials"] < 1:
        raise ConfigError("interventions.trials: must be >= 1")
    if any(not 0 < s <= 1 for s in iv["shift_levels"]):
        raise ConfigError("interventions.shift_levels: levels must lie in (0, 1]")
    _known(iv["bayes"], _field_names(BayesApproxConfig) - {"seed"}, "interventions.bayes.")
    cfg["interventions"] = iv
    return cfg


def load_config(path: str | Path) -> dict:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return validate_config(raw)


def config_hash(cfg: dict) -> str:
    blob = json.dumps({k: v for k, v in cfg.items() if k != "out"}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def stage_seed(master: int, stage: str) -> int:
    """64-bit seed for ``stage``; keyed by name so new stages never shift old ones."""
    h = hashlib.blake2b(stage.encode(), digest_size=8, key=int(master).to_bytes(8, "little"))
    return int.from_bytes(h.digest(), "little")


# -- run context -------------------------------------------------------------------

@dataclass
class Run:
    cfg: dict
    out: Path
    plots: bool = True

    @property
    def hash(self) -> str:
        return config_hash(self.cfg)

    def header(self, stage: str) -> str:
        return f"# stage={stage} config_hash={self.hash} schema_version={SCHEMA_VERSION}"

    def seed(self, stage: str) -> int:
        return stage_seed(self.cfg["seed"], stage)

    def upstream_hash(self, kind: str | None = None) -> str:
        """Hash of the config parts a trained artifact depends on."""
        part = {"seed": self.cfg["seed"], "task": self.cfg["task"], "train": self.cfg["train"]}
        if kind is not None:
            part["model"] = next(m for m in self.cfg["models"] if m["kind"] == kind)
        if kind == "mixcem":
            part["calibration"] = self.cfg["calibration"]
        return config_hash(part)

    @property
    def kinds(self) -> list[str]:
        return [m["kind"] for m in self.cfg["models"]]

    @property
    def shifts(self) -> list[float]:
        return [0.0, *self.cfg["interventions"]["shift_levels"]]

    def data_dir(self) -> Path:
        return self.out / "data"

    def model_path(self, kind: str, calibrated: bool | None = None) -> Path:
        if calibrated is None:
            calibrated = kind == "mixcem" and self.cfg["calibration"]["enabled"]
        return self.out / "models" / (f"{kind}_calibrated.json" if calibrated else f"{kind}.json")

    def curve_path(self, kind: str, shift: float) -> Path:
        return self.out / "curves" / f"{kind}_shift{shift:g}.csv"


def _task_spec(run: Run) -> TaskSpec:
    t = run.cfg["task"]
    return TaskSpec(K=t["K"], k=t["k"], n=t["n"], L=t["L"], N=t["N"], sigma_x=t["sigma_x"],
                    seed=run.seed("gen-data"), fractions=tuple(t["fractions"]))


def _load_data(run: Run):
    meta = run.data_dir() / "meta.json"
    if not meta.exists():
        raise FileNotFoundError(f"missing dataset: expected {meta} (run gen-data first)")
    ds = load_dataset(run.data_dir())
    if ds.spec != _task_spec(run):
        raise ValueError(f"stale dataset at {meta}: task spec differs from config (rerun gen-data)")
    return ds


def _load_model(run: Run, kind: str, calibrated: bool | None = None):
    path = run.model_path(kind, calibrated)
    if not path.exists():
        raise FileNotFoundError(f"missing model: expected {path}")
    model = load_model(path)
    if model.meta.get("upstream_hash") != run.upstream_hash(kind):
        raise ValueError(f"stale model at {path}: built from a different config")
    return model


def _select(run: Run, only: str | None) -> list[str]:
    if only is None:
        return run.kinds
    if only not in run.kinds:
        raise ValueError(f"model {only!r} is not in the config (have {', '.join(run.kinds)})")
    return [only]


def _write_csv(path: Path, header: str, columns, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(header + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        w.writerows(rows)
    return path


# -- stages -------------------------------------------------------------------------

def stage_gen_data(run: Run, **_) -> None:
    ds = generate_task(_task_spec(run))
    save_dataset(ds, run.data_dir(), header=run.header("gen-data"))


def stage_train(run: Run, model: str | None = None, **_) -> None:
    ds = _load_data(run)
    for kind in _select(run, model):
        extra = next(m for m in run.cfg["models"] if m["kind"] == kind)
        mcfg = ModelConfig(**{**extra, "n_in": ds.spec.width, "k": ds.spec.k, "L": ds.spec.L,
                              "seed": run.seed(f"init:{kind}")})
        tcfg = TrainConfig(**{**run.cfg["train"], "seed": run.seed(f"train:{kind}")})
        trained, history = train(init_model(mcfg), ds, tcfg, dataset_id=run.upstream_hash())
        trained.meta["upstream_hash"] = run.upstream_hash(kind)
        save_model(trained, run.model_path(kind, calibrated=False))
        history.write_csv(run.out / "models" / f"{kind}_history.csv", run.header("train"))
    if model is None:
        bcfg = BayesApproxConfig(**{**run.cfg["interventions"]["bayes"], "seed": run.seed("train:masked_bayes")})
        save_masked_bayes(train_masked_bayes(ds, bcfg), run.out / "models" / "masked_bayes.json")


def stage_calibrate(run: Run, model: str | None = None, **_) -> None:
    cal = run.cfg["calibration"]
    if not cal["enabled"] or "mixcem" not in _select(run, model):
        return
    ds = _load_data(run)
    raw = load_model(run.model_path("mixcem", calibrated=False))
    if raw.meta.get("upstream_hash") != run.upstream_hash("mixcem"):
        raise ValueError(f"stale model at {run.model_path('mixcem', False)}: built from a different config")
    val = ds.subset("val")
    platt = fit_platt(raw, val, epochs=cal["epochs"], lr=cal["lr"])
    calibrated = calibrate_model(raw, platt)
    save_model(calibrated, run.model_path("mixcem", calibrated=True))

    z = concept_logits(raw, val.x)
    aucs = per_concept_auc(z, val.c)
    p_before = sigmoid(z)
    p_after = forward(calibrated, val.x, inference_options(calibrated, mc_samples=1)).p_hat
    rows = []
    for i in range(val.c.shape[1]):
        rows.append((i, repr(float(platt.a[i])), repr(float(platt.b[i])),
                     repr(expected_calibration_error(p_before[:, i], val.c[:, i])),
                     repr(expected_calibration_error(p_after[:, i], val.c[:, i])),
                     "" if aucs[i] is None else repr(aucs[i])))
    _write_csv(run.out / "calibration" / "mixcem_platt.csv", run.header("calibrate"),
               ("concept", "a", "b", "val_ece_before", "val_ece_after", "val_auc"), rows)
    _write_csv(run.out / "calibration" / "mixcem_losses.csv", run.header("calibrate"),
               ("epoch", "val_bce"), [(e, repr(v)) for e, v in enumerate(platt.losses)])


def _opts(run: Run, model):
    return inference_options(model, mc_samples=run.cfg["interventions"]["mc_samples"],
                             rng_seed=run.seed("inference"))


def stage_evaluate(run: Run, model: str | None = None, **_) -> None:
    ds = _load_data(run)
    test = ds.subset("test")
    for kind in _select(run, model):
        m = _load_model(run, kind)
        opts = _opts(run, m)
        rows = [evaluate(m, test, opts).row(kind, "test", 0.0)]
        for level in run.shifts[1:]:
            rep = evaluate(m, test, opts, shift=level, stats=ds.feature_stats,
                           noise_seed=run.seed("noise"))
            rows.append(rep.row(kind, "test", level))
        write_reports(run.out / "metrics" / f"{kind}.csv", rows, run.header("evaluate"))


def stage_curve(run: Run, model: str | None = None, **_) -> None:
    ds = _load_data(run)
    test = ds.subset("test")
    iv = run.cfg["interventions"]
    fractions, trials, order_seed = iv["fractions"], iv["trials"], run.seed("curve")
    header = run.header("curve")
    for kind in _select(run, model):
        m = _load_model(run, kind)
        opts = _opts(run, m)
        for level in run.shifts:
            curve = intervention_curve(m, test, fractions, trials, opts, shift=level or None,
                                       stats=ds.feature_stats, seed=order_seed, noise_seed=run.seed("noise"))
            curve.write(run.curve_path(kind, level), header)
    if model is None:
        exact = exact_bayes_curve(ds.spec, test, fractions, trials, seed=order_seed)
        bayes_path = run.out / "models" / "masked_bayes.json"
        masked = masked_bayes_curve(load_masked_bayes(bayes_path), test, fractions, trials, seed=order_seed)
        # both references ignore the inputs, so every shift level shares one curve
        for level in run.shifts:
            exact.write(run.curve_path("exact_bayes", level), header)
            masked.write(run.curve_path("masked_bayes", level), header)


def stage_report(run: Run, **_) -> None:
    fractions = run.cfg["interventions"]["fractions"]
    rows, curves = [], {}
    for kind in [*run.kinds, *BAYES_KINDS]:
        for level in run.shifts:
            path = run.curve_path(kind, level)
            if not path.exists():
                continue
            curve = InterventionCurve.read(path)
            curves[(kind, level)] = curve
            rows.append((kind, "test", repr(float(level)), repr(curve.auc),
                         *[repr(float(v)) for v in curve.mean]))
    if not rows:
        raise FileNotFoundError(f"no curve files under {run.out / 'curves'} (run curve first)")
    columns = ("model", "split", "shift", "auc", *[f"acc@{f:g}" for f in fractions])
    _write_csv(run.out / "report" / "summary.csv", run.header("report"), columns, rows)
    if run.plots:
        _plot(run, curves)


def _plot(run: Run, curves: dict) -> None:
    try:
        import matplotlib
    except ImportError:
        print("matplotlib not installed; skipping plots", file=sys.stderr)
        return
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = run.hash
    for level in run.shifts:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for (kind, lv), curve in curves.items():
            if lv == level:
                style = "--" if kind in BAYES_KINDS else "-"
                ax.errorbar(curve.fractions, curve.mean, yerr=curve.std, label=kind, ls=style, capsize=2)
        ax.set_xlabel("fraction of concepts intervened")
        ax.set_ylabel("task accuracy")
        ax.set_title("ID" if level == 0 else f"salt-and-pepper {level:g}")
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = run.out / "report" / f"curves_shift{level:g}.svg"
        fig.savefig(path, metadata={"Date": None, "Creator": None})
        plt.close(fig)


STAGES = {
    "gen-data": stage_gen_data,
    "train": stage_train,
    "calibrate": stage_calibrate,
    "evaluate": stage_evaluate,
    "curve": stage_curve,
    "report": stage_report,
}


def run_pipeline(run: Run, model: str | None = None) -> None:
    for name, fn in STAGES.items():
        try:
            fn(run, model=model)
        except Exception as exc:
            raise StageError(name, exc) from exc


# -- argument handling ------------------------------------------------------------------

def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cbmlab", description="Concept bottleneck experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", *STAGES):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment JSON")
        p.add_argument("--out", help="artifact directory (overrides config 'out')")
        p.add_argument("--seed", type=_u64, help="master seed override")
        p.add_argument("--model", help="restrict to one model kind")
        p.add_argument("--noise", type=_floats, help="shift levels, e.g. 0.05,0.1")
        p.add_argument("--fractions", type=_floats, help="intervention fraction grid")
        p.add_argument("--trials", type=int, help="intervention trials")
        p.add_argument("--no-plots", action="store_true", help="skip SVG plots")
    return parser


def make_run(args: argparse.Namespace) -> Run:
    raw = json.loads(Path(args.config).read_text()) if Path(args.config).exists() else None
    if raw is None:
        raise ConfigError(f"config file not found: {args.config}")
    if args.seed is not None:
        raw["seed"] = args.seed
    iv = raw.setdefault("interventions", {})
    if args.noise is not None:
        iv["shift_levels"] = args.noise
    if args.fractions is not None:
        iv["fractions"] = args.fractions
    if args.trials is not None:
        iv["trials"] = args.trials
    cfg = validate_config(raw)
    out = args.out or cfg.get("out")
    if not out:
        raise ConfigError("out: missing; pass --out or set 'out' in the config")
    return Run(cfg, Path(out), plots=not args.no_plots)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run = make_run(args)
    except json.JSONDecodeError as exc:
        print(f"error: {args.config}: line {exc.lineno} column {exc.colno}: {exc.msg}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    run.out.mkdir(parents=True, exist_ok=True)
    (run.out / "config.json").write_text(json.dumps(run.cfg, sort_keys=True, indent=1) + "\n")
    try:
        if args.command == "run":
            run_pipeline(run, args.model)
        else:
            try:
                STAGES[args.command](run, model=args.model)
            except Exception as exc:
                raise StageError(args.command, exc) from exc
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
