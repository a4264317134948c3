"""Command-line entry point: run configuration, the five pipeline verbs, and reports.

Usage::

    progseg train-teacher run.yaml [--epochs N]
    progseg pseudolabel   run.yaml [--teacher CKPT]
    progseg train-student run.yaml [--teacher CKPT] [--fractions 1.0] [--stage-epochs N]
    progseg evaluate      run.yaml
    progseg report        run.yaml

Relative output directories are resolved under ``$PROGSEG_OUTPUT`` when set.
Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .backbone import BackboneConfig, load_checkpoint, save_checkpoint, state_digest
from .core import LabeledSet, UnlabeledSet
from .dataio import Layout, SyntheticSpec, generate_synthetic, load_corpus, load_volume_stack
from .engine import TrainHistory, predict
from .losses import LossConfig
from .metrics import classwise_scores
from .pseudolabel import PseudoLabelCache, generate_pseudolabels, rank_samples
from .student import CurriculumSchedule, StudentTrainConfig, read_stage_reports, run_curriculum, write_stage_reports
from .teacher import TeacherTrainConfig, train_teacher

log = logging.getLogger("progseg")

OUTPUT_ENV = "PROGSEG_OUTPUT"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ValueError):
    """Invalid or missing run configuration."""


class MissingArtifact(ConfigError):
    """A command needs an output of an earlier command that is not there."""


# ------------------------------------------------------------------ configuration


@dataclass
class DataConfig:
    """Where images come from: ``synthetic``, a saved ``corpus`` directory, or a file ``layout``."""

    kind: str = "synthetic"
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    corpus: Optional[str] = None
    root: Optional[str] = None
    layout: Optional[dict] = None
    splits: Optional[dict] = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "corpus", "layout"):
            raise ValueError(f"data.kind must be synthetic, corpus or layout, got {self.kind!r}")
        if self.kind == "corpus" and not self.corpus:
            raise ValueError("data.corpus is required when data.kind is corpus")
        if self.kind == "layout":
            if not self.root or not self.splits:
                raise ValueError("data.root and data.splits are required when data.kind is layout")
            unknown = set(self.splits) - {"labeled", "unlabeled", "val"}
            if unknown:
                raise ValueError(f"data.splits has unknown keys {sorted(unknown)}")


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/quickstart"
    # shift applied to the log-variance before it damps pixel confidence
    logvar_ref: float = 0.0
    teacher_uses_unlabeled: bool = True
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    teacher: TeacherTrainConfig = field(default_factory=TeacherTrainConfig)
    schedule: CurriculumSchedule = field(default_factory=CurriculumSchedule)
    student: StudentTrainConfig = field(default_factory=StudentTrainConfig)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, raw: Optional[dict]) -> "RunConfig":
        raw = dict(raw or {})
        # component seeds inherit the run seed unless set explicitly
        seed = raw.get("seed", 0)
        for section in ("teacher", "student"):
            sub = raw.get(section)
            if sub is None or isinstance(sub, dict):
                raw[section] = {"seed": seed, **(sub or {})}
        return _build(cls, raw, "")

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(
            self,
            seed=seed,
            teacher=dataclasses.replace(self.teacher, seed=seed),
            student=dataclasses.replace(self.student, seed=seed),
        )

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config is not valid YAML: {exc}") from exc
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls.loads(path.read_text())

    def output_root(self) -> Path:
        out = Path(self.output_dir)
        base = os.environ.get(OUTPUT_ENV)
        return out if out.is_absolute() or not base else Path(base) / out


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, raw, prefix: str):
    """Build a dataclass from a mapping, reporting problems by dotted field name."""
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected a mapping, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: unknown field(s) {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in raw.items():
        sub = _nested_type(cls, name)
        kwargs[name] = _build(sub, value, f"{prefix}{name}.") if sub is not None and value is not None else value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}") from exc


_NESTED = {
    RunConfig: {
        "data": DataConfig,
        "backbone": BackboneConfig,
        "loss": LossConfig,
        "teacher": TeacherTrainConfig,
        "schedule": CurriculumSchedule,
        "student": StudentTrainConfig,
    },
    DataConfig: {"synthetic": SyntheticSpec},
}


def _nested_type(cls, name):
    return _NESTED.get(cls, {}).get(name)


# ------------------------------------------------------------------ run state


class Run:
    """Resolved paths and lazily loaded data for one configuration."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = cfg.output_root()
        self._data = None

    # artifact paths
    @property
    def teacher_ckpt(self) -> Path:
        return self.root / "teacher" / "teacher.ckpt"

    @property
    def teacher_history(self) -> Path:
        return self.root / "teacher" / "history.jsonl"

    @property
    def cache_dir(self) -> Path:
        return self.root / "pseudolabels" / "cache"

    @property
    def ranking(self) -> Path:
        return self.root / "pseudolabels" / "ranking.csv"

    @property
    def student_ckpt(self) -> Path:
        return self.root / "student" / "student.ckpt"

    @property
    def student_history(self) -> Path:
        return self.root / "student" / "history.jsonl"

    @property
    def stage_reports(self) -> Path:
        return self.root / "student" / "stage_reports.jsonl"

    @property
    def metrics(self) -> Path:
        return self.root / "eval" / "metrics.json"

    @property
    def report_dir(self) -> Path:
        return self.root / "report"

    def data(self):
        if self._data is None:
            self._data = load_data(self.cfg.data)
        return self._data

    def write_config(self) -> None:
        _atomic_text(self.root / "config.yaml", self.cfg.dump())


def load_data(dc: DataConfig):
    """Return (labeled, unlabeled, val) for a data configuration."""
    if dc.kind == "synthetic":
        return generate_synthetic(dc.synthetic)
    if dc.kind == "corpus":
        return load_corpus(dc.corpus)
    layout = Layout(**(dc.layout or {})) if dc.layout and "modalities" in dc.layout else Layout.brats(**(dc.layout or {}))
    out = []
    for split in ("labeled", "unlabeled", "val"):
        vols, masks, ids = [], [], []
        for case in dc.splits.get(split, []):
            v, m = load_volume_stack(Path(dc.root) / case, layout)
            vols += v
            ids += [f"{case}_{z:03d}" for z in range(len(v))]
            if split != "unlabeled":
                if m is None:
                    raise ConfigError(f"data.splits.{split}: case {case} has no label file")
                masks += m
        out.append(UnlabeledSet(vols, ids) if split == "unlabeled" else LabeledSet(vols, masks, ids))
    return tuple(out)


def _atomic_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _write_history(path: Path, history: TrainHistory) -> None:
    tmp = path.with_name(path.name + ".tmp")
    history.to_jsonl(tmp)
    tmp.replace(path)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {what}: {path}")
    return path


# ------------------------------------------------------------------ commands


def cmd_train_teacher(run: Run, args) -> int:
    cfg = run.cfg
    tcfg = run.cfg.teacher
    if args.epochs is not None:
        tcfg = dataclasses.replace(tcfg, epochs=args.epochs)
    labeled, unlabeled, val = run.data()
    model, history = train_teacher(
        labeled, val, cfg.backbone, tcfg, cfg.loss, unlabeled=unlabeled if cfg.teacher_uses_unlabeled else None
    )
    run.write_config()
    save_checkpoint(run.teacher_ckpt, model, {"role": "teacher", "epochs": len(history), "aborted": history.aborted})
    _write_history(run.teacher_history, history)
    log.info("teacher: %d epochs, checkpoint %s", len(history), run.teacher_ckpt)
    if history.aborted:
        log.error("teacher training stopped on a non-finite loss")
        return EXIT_RUNTIME
    return EXIT_OK


def _teacher_path(run: Run, args) -> Path:
    return _require(Path(args.teacher) if getattr(args, "teacher", None) else run.teacher_ckpt, "teacher checkpoint")


def _pseudolabels(run: Run, teacher, write: bool = True):
    _, unlabeled, _ = run.data()
    cache = PseudoLabelCache(run.cache_dir)
    digest = state_digest(teacher)
    stale = cache.digests() - {digest} if run.cache_dir.exists() else set()
    if stale:
        log.warning("pseudo-label cache was built by a different teacher; rebuilding")
    samples, computed = generate_pseudolabels(unlabeled, teacher, run.cfg.teacher.K, run.cfg.seed, cache, run.cfg.logvar_ref)
    if write:
        run.cache_dir.mkdir(parents=True, exist_ok=True)
        by_id = {s.sample_id: s for s in samples}
        tmp = run.ranking.with_name(run.ranking.name + ".tmp")
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "C_img", "rank"])
            for rank, sid in enumerate(rank_samples(samples), start=1):
                w.writerow([sid, repr(float(by_id[sid].image_conf)), rank])
        tmp.replace(run.ranking)
    return samples, computed


def read_ranking(path) -> list:
    with open(path, newline="") as fh:
        return [(r["sample_id"], float(r["C_img"]), int(r["rank"])) for r in csv.DictReader(fh)]


def cmd_pseudolabel(run: Run, args) -> int:
    teacher = load_checkpoint(_teacher_path(run, args))
    samples, computed = _pseudolabels(run, teacher)
    log.info("pseudo-labels: %d samples, %d recomputed, %d from cache", len(samples), computed, len(samples) - computed)
    print(json.dumps({"samples": len(samples), "computed": computed}))
    return EXIT_OK


def cmd_train_student(run: Run, args) -> int:
    cfg = run.cfg
    teacher = load_checkpoint(_teacher_path(run, args))
    schedule = cfg.schedule
    if args.fractions is not None or args.stage_epochs is not None:
        fractions = tuple(args.fractions) if args.fractions is not None else schedule.fractions
        epochs = args.stage_epochs if args.stage_epochs is not None else (
            schedule.epochs if len(fractions) == len(schedule.fractions) else schedule.epochs[0]
        )
        try:
            schedule = CurriculumSchedule(fractions, epochs)
        except ValueError as exc:
            raise ConfigError(f"schedule override: {exc}") from exc
    labeled, _, val = run.data()
    samples, _ = _pseudolabels(run, teacher)
    model, reports, history, _ = run_curriculum(labeled, samples, val, cfg.backbone, schedule, cfg.loss, cfg.student)
    meta = {"role": "student", "teacher_digest": state_digest(teacher), "stages": len(reports), "aborted": history.aborted}
    save_checkpoint(run.student_ckpt, model, meta)
    _write_history(run.student_history, history)
    tmp = run.stage_reports.with_name(run.stage_reports.name + ".tmp")
    write_stage_reports(tmp, reports)
    tmp.replace(run.stage_reports)
    for r in reports:
        log.info("stage %d (%.0f%%): best val dice %.4f, gain %+.4f", r.stage, 100 * r.fraction, r.best_val_dice, r.dice_gain)
    if history.aborted:
        log.error("student training stopped on a non-finite loss after %d stage(s)", len(reports))
        return EXIT_RUNTIME
    return EXIT_OK


def _score_block(model, val: LabeledSet) -> dict:
    x, y = val.arrays()
    probs, _ = predict(model, x)
    scores = classwise_scores(probs.argmax(1), y, model.config.num_classes)
    return {
        "classes": scores.to_records(),
        "inconsistent_classes": scores.inconsistencies(),
        "accuracy": float((probs.argmax(1) == y).mean()),
    }


def cmd_evaluate(run: Run, args) -> int:
    teacher = load_checkpoint(_require(run.teacher_ckpt, "teacher checkpoint"))
    student = load_checkpoint(_require(run.student_ckpt, "student checkpoint"))
    _, _, val = run.data()
    if len(val) == 0:
        raise ConfigError("evaluation needs a non-empty validation split")
    result = {"n_cases": len(val), "teacher": _score_block(teacher, val), "student": _score_block(student, val)}
    _atomic_text(run.metrics, json.dumps(result, indent=1, sort_keys=True))
    for role in ("teacher", "student"):
        c = result[role]["classes"]
        log.info("%s: %s", role, "  ".join(f"{k} {v['dice']:.3f}" for k, v in c.items() if k != "macro"))
    return EXIT_OK


def cmd_report(run: Run, args) -> int:
    from . import report

    teacher_hist = TrainHistory.from_jsonl(_require(run.teacher_history, "teacher history"))
    student_hist = TrainHistory.from_jsonl(_require(run.student_history, "student history"))
    reports = read_stage_reports(_require(run.stage_reports, "stage reports"))
    teacher = load_checkpoint(_require(run.teacher_ckpt, "teacher checkpoint"))
    student = load_checkpoint(_require(run.student_ckpt, "student checkpoint"))
    _require(run.ranking, "pseudo-label ranking")
    _require(run.metrics, "evaluation metrics")
    labeled, unlabeled, val = run.data()
    samples, _ = _pseudolabels(run, teacher, write=False)

    out = run.report_dir
    out.mkdir(parents=True, exist_ok=True)
    report.plot_teacher_curves(teacher_hist, out / "teacher_curves.png")
    report.plot_student_curves(student_hist, reports, out / "student_curves.png")
    report.plot_confidence(samples, out / "confidence.png")
    cases = val if len(val) else labeled
    x, y = cases.arrays()
    tp, _ = predict(teacher, x)
    sp, _ = predict(student, x)
    report.plot_agreement(tp, sp, out / "agreement.png")
    report.plot_cases(x, y, tp.argmax(1), sp.argmax(1), out / "cases.png", n_cases=args.cases)
    log.info("report written to %s", out)
    return EXIT_OK


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "pseudolabel": cmd_pseudolabel,
    "train-student": cmd_train_student,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def _positive(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="progseg", description="Teacher/student curriculum segmentation pipeline")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="YAML run configuration")
        p.add_argument("--output", help="override output_dir")
        p.add_argument("--seed", type=int, help="override the run seed")
        if name == "train-teacher":
            p.add_argument("--epochs", type=_positive, help="override teacher epochs")
        if name in ("pseudolabel", "train-student"):
            p.add_argument("--teacher", help="teacher checkpoint (default: the run's own)")
        if name == "train-student":
            p.add_argument("--fractions", type=float, nargs="+", help="override stage fractions")
            p.add_argument("--stage-epochs", type=_positive, help="epochs per stage")
        if name == "report":
            p.add_argument("--cases", type=_positive, default=3, help="number of per-case panels")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        if args.output:
            cfg.output_dir = args.output
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        return COMMANDS[args.command](Run(cfg), args)
    except ConfigError as exc:
        print(f"progseg: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failure
        log.exception("%s failed", args.command)
        print(f"progseg: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
