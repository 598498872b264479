"""Command-line entry point: synth, validate, features, evaluate, ablate, explain, report.

Exit codes: 0 ok, 1 usage or config error, 2 data error (missing files,
rejected records), 3 training error, 4 anything else. Errors are also
written to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .cohort import OUTCOMES, Cohort, cohort_summary, load_cohort, write_cohort
from .contrastive import TrainConfig, TrainingError, save_model, train_model
from .evaluation.experiment import CONDITIONS, ablation_pretraining, evaluate
from .evaluation.report import dump_json, load_report, write_tables
from .features.dataset import build_dataset, write_features_csv
from .features.registry import ExtractionConfig, FeatureRegistry, default_registry
from .interpretability import aggregate_by_sensor, explain_cv, global_importance, write_importances
from .nn import derive_seed
from .synthetic import GeneratorConfig, generate, permute_labels

logger = logging.getLogger("phenotrace")

CONFIG_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAINING, EXIT_INTERNAL = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    """Everything a run needs besides its input files."""

    train: TrainConfig = field(default_factory=TrainConfig)
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    outcomes: tuple[str, ...] = OUTCOMES
    conditions: tuple[str, ...] = ("combined",)
    repetitions: int = 10
    seed: int = 0
    n_permutations: int = 200
    explain_folds: int | None = None

    def to_dict(self) -> dict:
        return {
            "v": CONFIG_VERSION,
            "train": self.train.to_dict(),
            "extraction": self.extraction.to_dict(),
            "generator": self.generator.to_dict(),
            "outcomes": list(self.outcomes),
            "conditions": list(self.conditions),
            "repetitions": self.repetitions,
            "seed": self.seed,
            "n_permutations": self.n_permutations,
            "explain_folds": self.explain_folds,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        doc = dict(doc)
        if doc.pop("v", None) != CONFIG_VERSION:
            raise UsageError(f"config must declare \"v\": {CONFIG_VERSION}")
        known = {"train", "extraction", "generator", "outcomes", "conditions", "repetitions", "seed", "n_permutations", "explain_folds"}
        unknown = set(doc) - known
        if unknown:
            raise UsageError(f"unknown config keys {sorted(unknown)}")
        try:
            cfg = cls(
                train=TrainConfig.from_dict(doc.get("train", {})),
                extraction=ExtractionConfig.from_dict(doc.get("extraction", {})),
                generator=GeneratorConfig.from_dict(doc.get("generator", {})),
            )
            if "outcomes" in doc:
                cfg.outcomes = _check_names(doc["outcomes"], OUTCOMES, "outcome")
            if "conditions" in doc:
                cfg.conditions = _check_names(doc["conditions"], CONDITIONS, "condition")
            for key in ("repetitions", "seed", "n_permutations"):
                if key in doc:
                    setattr(cfg, key, int(doc[key]))
            cfg.explain_folds = doc.get("explain_folds")
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid config: {exc}") from exc
        if cfg.repetitions < 1 or cfg.n_permutations < 1:
            raise UsageError("repetitions and n_permutations must be positive")
        return cfg


def _check_names(values, allowed, kind) -> tuple[str, ...]:
    if isinstance(values, str):
        values = [v.strip() for v in values.split(",") if v.strip()]
    bad = [v for v in values if v not in allowed]
    if bad or not values:
        raise UsageError(f"unknown {kind}(s) {bad}; choose from {','.join(allowed)}")
    return tuple(values)


def _read_json(path, what: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} file is not valid JSON: {exc}") from exc


def load_run_config(args) -> RunConfig:
    cfg = RunConfig.from_dict(_read_json(args.config, "config")) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "outcomes", None):
        cfg.outcomes = _check_names(args.outcomes, OUTCOMES, "outcome")
    if getattr(args, "conditions", None):
        cfg.conditions = _check_names(args.conditions, CONDITIONS, "condition")
    if getattr(args, "reps", None) is not None:
        if args.reps < 1:
            raise UsageError("--reps must be positive")
        cfg.repetitions = args.reps
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def load_registry(args) -> FeatureRegistry:
    if getattr(args, "registry", None):
        try:
            return FeatureRegistry.from_dict(_read_json(args.registry, "registry"))
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"invalid registry: {exc}") from exc
    return default_registry()


# --------------------------------------------------------------------------
# manifest


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    command: str
    args: dict
    config: dict
    registry_hash: str
    seed: int
    inputs: dict[str, str] = field(default_factory=dict)  # path -> sha256
    artifacts: dict[str, str] = field(default_factory=dict)
    tool_version: str = __version__

    def write(self, out_dir: Path) -> Path:
        path = Path(out_dir) / "manifest.json"
        doc = asdict(self)
        doc["v"] = 1
        path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        return path


def _manifest(args, cfg: RunConfig, registry: FeatureRegistry, out: Path, artifacts) -> Path:
    inputs = {}
    for key in ("participants", "active", "passive", "config", "registry", "model", "input"):
        p = getattr(args, key, None)
        if p:
            inputs[str(p)] = file_digest(p)
    recorded = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out", "verbose") and v is not None}
    return RunManifest(
        command=args.command,
        args=recorded,
        config=cfg.to_dict(),
        registry_hash=registry.hash(),
        seed=cfg.seed,
        inputs=inputs,
        artifacts={Path(a).name: file_digest(a) for a in sorted(map(str, artifacts))},
    ).write(out)


# --------------------------------------------------------------------------
# commands


def _load_inputs(args) -> Cohort:
    for key in ("participants", "active", "passive"):
        if not getattr(args, key, None):
            raise UsageError(f"--{key} is required")
    try:
        cohort = load_cohort(args.participants, args.active, args.passive)
    except FileNotFoundError as exc:
        raise DataError(f"input file not found: {exc}") from exc
    if getattr(args, "permute_labels", False):
        cohort = permute_labels(cohort, seed=derive_seed(args.seed or 0, "null"))
    return cohort


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> int:
    cfg = load_run_config(args)
    gen = cfg.generator
    if args.preset == "null":
        gen = gen.with_effects_scaled(0.0)
    elif args.preset == "borderline":
        gen = replace(gen, coupling="linear")
    if args.seed is not None:
        gen = replace(gen, seed=args.seed)
    if args.users is not None:
        gen = replace(gen, n_users=args.users)
    cfg.generator = gen
    out = _out_dir(args)
    cohort, truth = generate(gen)
    paths = list(write_cohort(cohort, out))
    truth_path = out / "truth.json"
    truth_path.write_text(json.dumps(truth.to_dict(), sort_keys=True, indent=1) + "\n")
    paths.append(truth_path)
    _manifest(args, cfg, default_registry(), out, paths)
    print(json.dumps({"participants": len(cohort.participants), "active": len(cohort.active), "passive": len(cohort.passive)}))
    return EXIT_OK


def completeness(cohort: Cohort, days: int = 14) -> dict[str, list[int]]:
    """Number of participants contributing active / passive data on each study day."""
    active = [set() for _ in range(days)]
    passive = [set() for _ in range(days)]
    for r in cohort.active:
        d = cohort.by_id[r.participant_id].day_index(r.date)
        if 0 <= d < days:
            active[d].add(r.participant_id)
    for e in cohort.passive:
        d = cohort.by_id[e.participant_id].day_index(e.local_date)
        if 0 <= d < days:
            passive[d].add(e.participant_id)
    return {"active": [len(s) for s in active], "passive": [len(s) for s in passive]}


def cmd_validate(args) -> int:
    cohort = _load_inputs(args)
    report = {
        "participants": len(cohort.participants),
        "active": len(cohort.active),
        "passive": len(cohort.passive),
        "rejects": [{"source": r.source, "line": r.line_no, "reason": r.reason} for r in cohort.rejects],
        "summary": [
            {"measure": s.measure, "mean": s.mean, "sd": s.sd, "high_risk": s.count_text()} for s in cohort_summary(cohort)
        ]
        if cohort.participants
        else [],
        "completeness": completeness(cohort),
    }
    text = json.dumps(report, indent=1, sort_keys=True) + "\n"
    if args.out:
        out = _out_dir(args)
        path = out / "validation.json"
        path.write_text(text)
        _manifest(args, load_run_config(args), default_registry(), out, [path])
    sys.stdout.write(text)
    return EXIT_DATA if cohort.rejects else EXIT_OK


def _dataset(args, cfg: RunConfig):
    cohort = _load_inputs(args)
    registry = load_registry(args)
    return build_dataset(cohort, registry, cfg.extraction), registry


def cmd_features(args) -> int:
    cfg = load_run_config(args)
    dataset, registry = _dataset(args, cfg)
    out = _out_dir(args)
    csv_path = write_features_csv(dataset, out / "features.csv")
    reg_path = out / "registry.json"
    reg_path.write_text(json.dumps(registry.to_dict(), indent=1) + "\n")
    ext_path = out / "extraction.json"
    ext_path.write_text(json.dumps(cfg.extraction.to_dict(), indent=1, sort_keys=True) + "\n")
    _manifest(args, cfg, registry, out, [csv_path, reg_path, ext_path])
    print(json.dumps({"rows": len(dataset), "features": len(registry)}))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_run_config(args)
    dataset, registry = _dataset(args, cfg)
    out = _out_dir(args)
    report = evaluate(dataset, cfg.outcomes, cfg.conditions, cfg.train, cfg.repetitions, cfg.seed, args.jobs)
    report.meta["registry_hash"] = registry.hash()
    doc = report.to_dict()
    paths = [dump_json(doc, out / "report.json")]
    paths += write_tables(doc, out)
    _manifest(args, cfg, registry, out, paths)
    print((out / "summary.txt").read_text(), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_run_config(args)
    dataset, registry = _dataset(args, cfg)
    out = _out_dir(args)
    cond = cfg.conditions[0] if args.conditions else "combined"
    table = ablation_pretraining(dataset, cfg.outcomes, cfg.train, cfg.repetitions, cfg.seed, cond, args.jobs)
    json_path = dump_json(table, out / "ablation.json")
    csv_path = out / "ablation.csv"
    lines = ["outcome,pretrained_mean,pretrained_sd,no_pretraining_mean,no_pretraining_sd"]
    for o, row in table["outcomes"].items():
        a, b = row["pretrained"], row["no_pretraining"]
        lines.append(f"{o},{a['mean']!r},{a['sd']!r},{b['mean']!r},{b['sd']!r}")
    lines.append(f"pooled,{table['pooled']['pretrained']!r},,{table['pooled']['no_pretraining']!r},")
    csv_path.write_text("\n".join(lines) + "\n")
    _manifest(args, cfg, registry, out, [json_path, csv_path])
    test = table["test"]
    p = "n/a (" + test.get("note", "") + ")" if test.get("p") is None else f"{test['p']:.4g} {test['stars']}"
    print(f"pretrained {table['pooled']['pretrained']:.3f}  no pretraining {table['pooled']['no_pretraining']:.3f}  paired t p={p}")
    return EXIT_OK


def cmd_explain(args) -> int:
    from .contrastive import load_model

    cfg = load_run_config(args)
    if args.permutations is not None:
        cfg.n_permutations = args.permutations
    if args.folds is not None:
        cfg.explain_folds = args.folds
    dataset, registry = _dataset(args, cfg)
    out = _out_dir(args)
    written = []
    for outcome in cfg.outcomes:
        sub = out / outcome
        if args.model:
            if not Path(args.model).exists():
                raise DataError(f"model file not found: {args.model}")
            model = load_model(args.model)
            if model.registry_hash and model.registry_hash != registry.hash():
                raise DataError("model was trained with a different feature registry")
            baseline = model.norm.median if model.norm is not None else np.zeros(len(registry))
            imp = global_importance(model, dataset.X, baseline, cfg.n_permutations, derive_seed(cfg.seed, "explain", outcome))
        else:
            imp = explain_cv(dataset, outcome, cfg.train, cfg.seed, cfg.n_permutations, cfg.explain_folds)
        written += write_importances(imp, registry, sub)
        if args.save_model:
            model = train_model(
                dataset.X, dataset.participant_ids, dataset.row_labels(outcome), cfg.train,
                derive_seed(cfg.seed, "pretrain", "final"), derive_seed(cfg.seed, "finetune", "final", outcome),
            )
            model.registry_hash, model.feature_names = registry.hash(), registry.names
            path = sub / "model.json"
            save_model(path, model, cfg.train)
            written.append(path)
        groups = aggregate_by_sensor(imp, registry)
        top = sorted(groups.items(), key=lambda kv: -kv[1])[:5]
        print(outcome + ": " + ", ".join(f"{k} {v:.4f}" for k, v in top))
    _manifest(args, cfg, registry, out, written)
    return EXIT_OK


def cmd_report(args) -> int:
    if not args.input:
        raise UsageError("--input is required")
    if not Path(args.input).exists():
        raise DataError(f"report not found: {args.input}")
    try:
        doc = load_report(args.input)
    except (ValueError, json.JSONDecodeError) as exc:
        raise DataError(str(exc)) from exc
    out = _out_dir(args)
    paths = write_tables(doc, out, svg=args.svg)
    _manifest(args, RunConfig(), default_registry(), out, paths)
    print((out / "summary.txt").read_text(), end="")
    return EXIT_OK


def cmd_rerun(args) -> int:
    """Repeat the run a manifest describes, writing to a new ``--out``."""
    doc = _read_json(args.manifest, "manifest")
    argv = [doc["command"]]
    for key, value in doc["args"].items():
        if key == "command" or value is False:
            continue
        flag = "--" + key.replace("_", "-")
        argv += [flag] if value is True else [flag, str(value)]
    argv += ["--out", args.out]
    return main(argv)


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="phenotrace", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def inputs(p):
        p.add_argument("--participants")
        p.add_argument("--active")
        p.add_argument("--passive")
        p.add_argument("--permute-labels", action="store_true", help="null control: shuffle scores across participants")

    def common(p):
        p.add_argument("--config", help="run config JSON (schema version 1)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")

    def grid(p):
        p.add_argument("--registry", help="feature registry JSON")
        p.add_argument("--outcomes", help="comma list from " + ",".join(OUTCOMES))
        p.add_argument("--conditions", help="comma list from " + ",".join(CONDITIONS))
        p.add_argument("--reps", type=int)
        p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    common(p)
    p.add_argument("--preset", choices=("default", "null", "borderline"), default="default")
    p.add_argument("--users", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("validate", help="check cohort files and summarise them")
    common(p)
    inputs(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("features", help="write the daily feature table")
    common(p)
    inputs(p)
    p.add_argument("--registry")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("evaluate", help="repeated leave-one-subject-out evaluation")
    common(p)
    inputs(p)
    grid(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="with vs without contrastive pretraining")
    common(p)
    inputs(p)
    grid(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("explain", help="Shapley feature importances")
    common(p)
    inputs(p)
    grid(p)
    p.add_argument("--model", help="checkpoint to explain instead of retraining per fold")
    p.add_argument("--save-model", action="store_true", help="also fit and save a model on all users")
    p.add_argument("--permutations", type=int)
    p.add_argument("--folds", type=int, help="user folds for retraining (default: one per user)")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("report", help="tables, summary and charts from report.json")
    p.add_argument("--input", help="report.json written by evaluate")
    p.add_argument("--out")
    p.add_argument("--svg", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("rerun", help="repeat the run recorded in a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rerun)
    return parser


def _fail(code: int, kind: str, exc: BaseException) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("missing command")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except DataError as exc:
        return _fail(EXIT_DATA, "data", exc)
    except TrainingError as exc:
        return _fail(EXIT_TRAINING, "training", exc)
    except Exception as exc:  # noqa: BLE001
        return _fail(EXIT_INTERNAL, "internal", exc)


if __name__ == "__main__":
    sys.exit(main())
