"""Stage orchestration: every stage reads and writes artifacts under one output directory.

Stages run in the order ``synth, split, curves, label, sample, ica, train,
explain, report``. Labeling precedes sampling because evaluation sampling
windows end before each record's first stroke code.

Every stage writes ``manifests/<stage>.json`` holding the config hash, the
stage seed and SHA-256 digests of its inputs and outputs. Stage seeds derive
from the root seed as ``SeedSequence([root, crc32(stage)])``; per-patient
streams spawn from that with the patient's index in the cohort file.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import shutil
import warnings
import zlib
from dataclasses import asdict, dataclass
from datetime import date
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from . import attribution, binio, svg
from .cohort import Cohort, GeneratorConfig, SyntheticGroundTruth, generate_cohort, read_cohort, write_cohort
from .curves import CurveParams, PopulationStats, build_curveset, population_stats
from .errors import ConfigError, InputError, MissingArtifactError, StalenessWarning
from .forest import HyperParams, LabeledDataset, RandomForest, auroc, fit_forest, roc_curve, search_hyperparams, write_trial_log
from .ica import IcaModel, SourceMatrix, amari_index, fit_ica, match_components, project, reconstruction_residual
from .labeling import CodeCriteria, Label, preset, read_labels_csv, refine_inclusion_codes, label_cohort, write_labels_csv
from .sampling import DataMatrix, StandardizationStats, apply_standardization, sample_times, standardize

log = logging.getLogger("latentrisk.pipeline")

STAGES = ("synth", "split", "curves", "label", "sample", "ica", "train", "explain", "report")

# which earlier stages each stage reads from
UPSTREAM = {
    "synth": (),
    "split": ("synth",),
    "curves": ("synth", "split"),
    "label": ("synth", "split"),
    "sample": ("synth", "split", "curves", "label"),
    "ica": ("synth", "sample"),
    "train": ("label", "ica"),
    "explain": ("synth", "label", "ica", "train"),
    "report": tuple(STAGES[:-1]),
}

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "input_cohort": None,
    "synth": {},
    "split": {"test_probability": 0.2, "evaluation_prefix": "G43"},
    "curves": {"bandwidth_days": 365, "n_shifts": 16, "baseline_intensity": 0.05, "ignore_prefixes": [], "export": 3},
    "labels": {"preset": "cryptogenic", "criteria_path": None, "refine": True},
    "sampling": {"density": 1.0},
    "ica": {"k": 8, "nonlinearity": "logcosh", "tol": 1e-4, "max_iter": 400},
    "model": {
        "search_space": {"max_depth": [4, 6, 8], "min_samples_leaf": [10, 20, 50], "max_features": [0.3, 0.5, 0.8]},
        "budget": 6,
        "strategies": ["random", "coordinate"],
        "n_folds": 6,
        "search_trees": 30,
        "final": {"n_trees": 100, "class_weight": "balanced"},
    },
    "explain": {"top_n": 10, "n_signatures": 4, "statistic": "mean_abs", "signature_top_n": 10},
}


def _merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict) and k not in ("synth", "search_space"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def stage_seed(root: int, stage: str) -> int:
    return int(np.random.SeedSequence([int(root), zlib.crc32(stage.encode())]).generate_state(1)[0])


@dataclass(frozen=True)
class PipelineConfig:
    settings: dict
    out: Path
    base_dir: Path

    @classmethod
    def from_dict(cls, d: Mapping, out: str | Path | None = None, base_dir: str | Path = ".", label_preset: str | None = None) -> "PipelineConfig":
        unknown = set(d) - set(DEFAULTS) - {"out"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        settings = _merge(DEFAULTS, {k: v for k, v in d.items() if k != "out"})
        if label_preset is not None:
            settings["labels"]["preset"] = label_preset
            settings["labels"]["criteria_path"] = None
        if not isinstance(settings["seed"], int):
            raise ConfigError("seed must be an explicit integer")
        base = Path(base_dir)
        out_dir = Path(out) if out is not None else base / d.get("out", "run")
        cfg = cls(settings, out_dir, base)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path, out: str | Path | None = None, label_preset: str | None = None) -> "PipelineConfig":
        path = Path(path)
        if not path.is_file():
            raise MissingArtifactError(f"config file {path} not found")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(d, out, path.parent, label_preset)

    def validate(self) -> None:
        s = self.settings
        GeneratorConfig.from_dict(s["synth"]).validate()
        p = s["split"]["test_probability"]
        if not 0 <= p <= 1:
            raise ConfigError("split.test_probability must lie in [0, 1]")
        if s["sampling"]["density"] <= 0:
            raise ConfigError("sampling.density must be positive")
        if s["ica"]["k"] < 1:
            raise ConfigError("ica.k must be >= 1")
        for key in ("input_cohort",):
            if s[key] is not None and not self.resolve(s[key]).is_file():
                raise MissingArtifactError(f"{key} {s[key]} not found")
        if s["labels"]["criteria_path"] is not None and not self.resolve(s["labels"]["criteria_path"]).is_file():
            raise MissingArtifactError(f"labels.criteria_path {s['labels']['criteria_path']} not found")
        self.criteria()
        if s["model"]["budget"] < 1:
            raise ConfigError("model.budget must be >= 1")

    def resolve(self, p: str | Path) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def hash(self) -> str:
        return hashlib.sha256(canonical_json(self.settings).encode()).hexdigest()

    @property
    def root_seed(self) -> int:
        return int(self.settings["seed"])

    def seed(self, stage: str) -> int:
        return stage_seed(self.root_seed, stage)

    def criteria(self) -> CodeCriteria:
        lab = self.settings["labels"]
        if lab["criteria_path"] is not None:
            return CodeCriteria.load(self.resolve(lab["criteria_path"]))
        return preset(lab["preset"])

    def curve_params(self) -> CurveParams:
        c = self.settings["curves"]
        ignore = sorted(set(c["ignore_prefixes"]) | self.criteria().stroke_codes)
        return CurveParams(int(c["bandwidth_days"]), int(c["n_shifts"]), float(c["baseline_intensity"]), tuple(ignore))


# --------------------------------------------------------------------------
# artifact bookkeeping

ARTIFACTS = {
    "cohort": ("synth", "cohort.jsonl"),
    "truth": ("synth", "ground_truth.bin"),
    "split": ("split", "split.csv"),
    "popstats": ("curves", "curves/population_stats.json"),
    "labels": ("label", "labels/labels.csv"),
    "criteria": ("label", "labels/criteria_refined.json"),
    "coincidence": ("label", "labels/coincidence.csv"),
    "discovery": ("sample", "matrices/discovery.bin"),
    "discovery_meta": ("sample", "matrices/discovery.json"),
    "train_matrix": ("sample", "matrices/train.bin"),
    "train_meta": ("sample", "matrices/train.json"),
    "test_matrix": ("sample", "matrices/test.bin"),
    "test_meta": ("sample", "matrices/test.json"),
    "ica_model": ("ica", "ica/ica_model.bin"),
    "sources_discovery": ("ica", "ica/sources_discovery.bin"),
    "sources_train": ("ica", "ica/sources_train.bin"),
    "sources_test": ("ica", "ica/sources_test.bin"),
    "model": ("train", "model/forest.bin"),
    "shap": ("explain", "explain/shap.csv"),
}


class Run:
    def __init__(self, config: PipelineConfig):
        self.config = config
        self.out = config.out
        self.out.mkdir(parents=True, exist_ok=True)

    def path(self, rel: str) -> Path:
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def artifact(self, name: str) -> Path:
        return self.path(ARTIFACTS[name][1])

    def require(self, name: str) -> Path:
        stage, rel = ARTIFACTS[name]
        p = self.out / rel
        if not p.is_file():
            raise MissingArtifactError(f"missing {rel} in {self.out}; run `pipeline {stage}` first")
        return p

    def manifest_path(self, stage: str) -> Path:
        return self.path(f"manifests/{stage}.json")

    def check_upstream(self, stage: str) -> dict[str, str]:
        """Warn when an upstream stage ran under a different config; return upstream output hashes."""
        hashes = {}
        for up in UPSTREAM[stage]:
            mp = self.out / "manifests" / f"{up}.json"
            if not mp.is_file():
                continue
            m = json.loads(mp.read_text())
            if m.get("config_hash") != self.config.hash:
                warnings.warn(
                    f"stage {up!r} was produced with a different config (hash {m.get('config_hash', '?')[:12]}); "
                    f"rerun `pipeline {up}`",
                    StalenessWarning,
                    stacklevel=3,
                )
            hashes.update(m.get("outputs", {}))
        return hashes

    def write_manifest(self, stage: str, inputs: Mapping[str, str], outputs: list[Path]) -> dict:
        doc = {
            "stage": stage,
            "config_hash": self.config.hash,
            "root_seed": self.config.root_seed,
            "seed": self.config.seed(stage),
            "inputs": dict(sorted(inputs.items())),
            "outputs": {str(p.relative_to(self.out)): binio.sha256_file(p) for p in sorted(outputs)},
        }
        self.manifest_path(stage).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        return doc


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


def _read_json(path: Path):
    return json.loads(path.read_text())


def _load_cohort(run: Run) -> Cohort:
    return read_cohort(run.require("cohort"))


def _read_split(run: Run) -> dict[str, tuple[bool, str]]:
    out = {}
    with open(run.require("split"), newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["patient_id"]] = (row["evaluation"] == "1", row["set"])
    return out


# --------------------------------------------------------------------------
# stages


def cmd_synth(run: Run) -> dict:
    s = run.config.settings
    outputs = [run.artifact("cohort")]
    inputs = {}
    if s["input_cohort"] is not None:
        src = run.config.resolve(s["input_cohort"])
        write_cohort(read_cohort(src), outputs[0])
        inputs[str(src)] = binio.sha256_file(src)
        truth_path = run.out / ARTIFACTS["truth"][1]
        if truth_path.exists():
            truth_path.unlink()
    else:
        cohort, truth = generate_cohort(GeneratorConfig.from_dict(s["synth"]), run.config.seed("synth"))
        write_cohort(cohort, outputs[0])
        truth.save(run.artifact("truth"))
        outputs.append(run.artifact("truth"))
    log.info("synth: wrote %s", outputs[0])
    return run.write_manifest("synth", inputs, outputs)


def assign_split(patient_ids, evaluation, test_probability: float, seed: int) -> list[str]:
    """Evaluation patients go to test with the given probability; everyone else trains."""
    rng = np.random.default_rng(seed)
    u = rng.random(len(patient_ids))
    return ["test" if e and x < test_probability else "train" for e, x in zip(evaluation, u)]


def cmd_split(run: Run) -> dict:
    inputs = run.check_upstream("split")
    s = run.config.settings["split"]
    cohort = _load_cohort(run)
    pids = [r.patient_id for r in cohort.records]
    evaluation = [any(c.startswith(s["evaluation_prefix"]) for c in r.codes()) for r in cohort.records]
    sets = assign_split(pids, evaluation, float(s["test_probability"]), run.config.seed("split"))
    out = run.artifact("split")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "evaluation", "set"])
        for pid, e, st in zip(pids, evaluation, sets):
            w.writerow([pid, int(e), st])
    n_eval = sum(evaluation)
    n_test = sets.count("test")
    log.info("split: %d evaluation patients, %d test", n_eval, n_test)
    return run.write_manifest("split", inputs, [out])


def _discovery_ids(split: Mapping[str, tuple[bool, str]]) -> list[str]:
    return [p for p, (_, st) in split.items() if st != "test"]


def _curve_seed(run: Run, index: int) -> int:
    return int(np.random.SeedSequence([run.config.seed("curves"), index]).generate_state(1)[0])


def cmd_curves(run: Run) -> dict:
    """Population statistics from the discovery set plus a few exported curvesets.

    All curvesets are deterministic in (record, stats, seed), so later stages
    rebuild them on demand rather than storing every m x t matrix.
    """
    inputs = run.check_upstream("curves")
    cohort = _load_cohort(run)
    split = _read_split(run)
    disc = cohort.subset(_discovery_ids(split))
    stats = population_stats(disc)
    params = run.config.curve_params()
    outputs = [_write_json(run.artifact("popstats"), {**stats.to_dict(), "curve_params": asdict(params)})]
    n_export = int(run.config.settings["curves"]["export"])
    for i, r in enumerate(cohort.records[:n_export]):
        cs = build_curveset(r, cohort.variables, stats, params, _curve_seed(run, i))
        p = run.path(f"curves/{r.patient_id}.bin")
        cs.save(p)
        outputs.append(p)
    return run.write_manifest("curves", inputs, outputs)


def cmd_label(run: Run) -> dict:
    inputs = run.check_upstream("label")
    cohort = _load_cohort(run)
    split = _read_split(run)
    criteria = run.config.criteria()
    outputs = []
    if run.config.settings["labels"]["refine"] and criteria.refined_inclusion is None:
        disc = [r for r in cohort.records if split[r.patient_id][1] != "test"]
        criteria, report = refine_inclusion_codes(disc, criteria)
        p = run.artifact("coincidence")
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["code", "prefix", "n_records", "n_coincident", "coincidence", "retained"])
            for e in report:
                w.writerow([e.code, e.prefix, e.n_records, e.n_coincident, "" if e.coincidence is None else repr(e.coincidence), int(e.retained)])
        outputs.append(p)
    criteria.save(run.artifact("criteria"))
    outputs.append(run.artifact("criteria"))
    evaluation = [r for r in cohort.records if split[r.patient_id][0]]
    result = label_cohort(evaluation, criteria)
    write_labels_csv(result, run.artifact("labels"))
    outputs.append(run.artifact("labels"))
    counts = result.stage_counts()
    counts["excluded"] = len(result.excluded)
    outputs.append(_write_json(run.path("labels/stage_counts.json"), counts))
    log.info("label: %s", counts)
    return run.write_manifest("label", inputs, outputs)


def _concat(mats: list[DataMatrix], m: int) -> DataMatrix:
    if not mats:
        raise InputError("no samples drawn")
    return DataMatrix(
        np.concatenate([x.values for x in mats], axis=1) if mats else np.zeros((m, 0)),
        tuple(p for x in mats for p in x.patient_ids),
        tuple(d for x in mats for d in x.dates),
    )


def _columns(cs, dates) -> DataMatrix:
    idx = [(d - cs.start_date).days for d in dates]
    return DataMatrix(cs.matrix[:, idx], (cs.patient_id,) * len(dates), tuple(dates))


def cmd_sample(run: Run) -> dict:
    """Discovery cross-sections over whole records, evaluation ones inside prediction windows."""
    inputs = run.check_upstream("sample")
    cohort = _load_cohort(run)
    split = _read_split(run)
    labels = read_labels_csv(run.require("labels"))
    stats = PopulationStats.from_dict(_read_json(run.require("popstats")))
    params = run.config.curve_params()
    density = float(run.config.settings["sampling"]["density"])

    test_ids = {p for p, (_, st) in split.items() if st == "test"}
    discovery_ids = set(_discovery_ids(split))
    # leakage guard: no test patient contributes to discovery
    assert not (test_ids & discovery_ids), "test patients leaked into the discovery set"

    seed = run.config.seed("sample")
    disc, train, test = [], [], []
    for i, r in enumerate(cohort.records):
        pid = r.patient_id
        in_eval = split[pid][0] and pid in labels.windows
        if pid not in discovery_ids and not in_eval:
            continue
        rng_disc, rng_eval = (np.random.default_rng(c) for c in np.random.SeedSequence([seed, i]).spawn(2))
        d_dates = sample_times((r.record_start, r.record_end), density, False, rng_disc) if pid in discovery_ids else []
        e_dates = []
        if in_eval:
            w = labels.windows[pid]
            e_dates = sample_times((w.start, w.end), density, True, rng_eval)
        if not d_dates and not e_dates:
            continue
        cs = build_curveset(r, cohort.variables, stats, params, _curve_seed(run, i))
        if d_dates:
            disc.append(_columns(cs, d_dates))
        if e_dates:
            (test if pid in test_ids else train).append(_columns(cs, e_dates))

    X = _concat(disc, cohort.m)
    assert not (set(X.patient_ids) & test_ids), "test patients leaked into the discovery matrix"
    Xz, std = standardize(X, cohort.kinds())
    outputs = []
    Xz.save(run.artifact("discovery"), run.artifact("discovery_meta"), std)
    outputs += [run.artifact("discovery"), run.artifact("discovery_meta")]
    for name, mats in (("train", train), ("test", test)):
        E = apply_standardization(_concat(mats, cohort.m), std)
        E.save(run.artifact(f"{name}_matrix"), run.artifact(f"{name}_meta"), std)
        outputs += [run.artifact(f"{name}_matrix"), run.artifact(f"{name}_meta")]
    log.info("sample: discovery n=%d, train n=%d, test n=%d", Xz.n, sum(x.n for x in train), sum(x.n for x in test))
    return run.write_manifest("sample", inputs, outputs)


def _load_matrix(run: Run, name: str) -> DataMatrix:
    meta = "discovery_meta" if name == "discovery" else f"{name}_meta"
    key = "discovery" if name == "discovery" else f"{name}_matrix"
    return DataMatrix.load(run.require(key), run.require(meta))


def _save_sources(path: Path, S: SourceMatrix) -> Path:
    binio.write(
        path,
        "source-matrix",
        {"values": S.values},
        {"patient_ids": list(S.patient_ids), "dates": [d.isoformat() for d in S.dates]},
    )
    return path


def load_sources(path: str | Path) -> SourceMatrix:
    a, meta = binio.read(path, "source-matrix")
    return SourceMatrix(a["values"], tuple(meta["patient_ids"]), tuple(date.fromisoformat(d) for d in meta["dates"]))


def cmd_ica(run: Run) -> dict:
    inputs = run.check_upstream("ica")
    s = run.config.settings["ica"]
    cohort = _load_cohort(run)
    X = _load_matrix(run, "discovery")
    model, S = fit_ica(X, int(s["k"]), s["nonlinearity"], float(s["tol"]), int(s["max_iter"]), run.config.seed("ica"))
    model.save(run.artifact("ica_model"))
    outputs = [run.artifact("ica_model"), _save_sources(run.artifact("sources_discovery"), S)]
    for name in ("train", "test"):
        outputs.append(_save_sources(run.artifact(f"sources_{name}"), project(_load_matrix(run, name), model)))
    p = run.path("ica/signatures.csv")
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variable", *(f"source_{j}" for j in range(model.k))])
        for v, row in zip(cohort.variables, model.mixing):
            w.writerow([v.id, *(repr(float(x)) for x in row)])
    outputs.append(p)
    report = {
        "k": model.k,
        "iterations": model.report.iterations,
        "final_delta": model.report.final_delta,
        "converged": model.report.converged,
        "reconstruction_residual": reconstruction_residual(X, model),
    }
    truth_path = run.out / ARTIFACTS["truth"][1]
    if truth_path.is_file():
        truth = SyntheticGroundTruth.load(truth_path)
        if truth.true_mixing.shape == model.mixing.shape:
            report["amari_index"] = amari_index(model.mixing, truth.true_mixing)
            perm, corr = match_components(model.mixing.T, truth.true_mixing.T)
            report["matched_sources"] = [int(j) for j in perm]
            report["signature_correlations"] = [float(c) for c in corr]
            report["risk_source_estimate"] = int(perm[truth.planted_risk_source])
        report["planted_risk_source"] = truth.planted_risk_source
    outputs.append(_write_json(run.path("ica/report.json"), report))
    log.info("ica: k=%d converged=%s after %d iterations", model.k, model.report.converged, model.report.iterations)
    return run.write_manifest("ica", inputs, outputs)


def _dataset(run: Run, name: str) -> LabeledDataset:
    labels = read_labels_csv(run.require("labels"))
    S = load_sources(run.require(f"sources_{name}"))
    y = np.array([labels.outcomes[p].label is Label.POSITIVE for p in S.patient_ids], dtype=np.int64)
    return LabeledDataset(S.values.T.copy(), y, np.array(S.patient_ids))


def cmd_train(run: Run) -> dict:
    inputs = run.check_upstream("train")
    s = run.config.settings["model"]
    data = _dataset(run, "train")
    seed = run.config.seed("train")
    base = HyperParams.from_dict({**s["final"], "n_trees": int(s["search_trees"]), "seed": seed})
    best, trials = search_hyperparams(data, s["search_space"], int(s["budget"]), tuple(s["strategies"]), seed, int(s["n_folds"]), base)
    final = HyperParams.from_dict({**asdict(best), **s["final"], "seed": seed})
    forest = fit_forest(data, final)
    forest.save(run.artifact("model"))
    write_trial_log(trials, run.path("model/trials.csv"))
    best_trial = max(trials, key=lambda t: t.mean_auroc)
    meta = {
        "hyperparams": asdict(final),
        "cv_mean_auroc": best_trial.mean_auroc,
        "cv_fold_aurocs": best_trial.fold_aurocs,
        "n_train_rows": data.n,
        "n_train_patients": int(len(np.unique(data.groups))),
        "n_positive_rows": int(data.labels.sum()),
        "n_features": data.k,
        "class_balance": forest.class_balance,
    }
    outputs = [run.artifact("model"), run.path("model/trials.csv"), _write_json(run.path("model/model.json"), meta)]
    log.info("train: best CV AUROC %.3f with %s", best_trial.mean_auroc, best_trial.params)
    return run.write_manifest("train", inputs, outputs)


def _variable_names(run: Run) -> list[str]:
    with open(run.require("cohort"), encoding="utf-8") as fh:
        header = json.loads(fh.readline())
    return [v["id"] for v in header["variables"]]


def cmd_explain(run: Run) -> dict:
    inputs = run.check_upstream("explain")
    s = run.config.settings["explain"]
    forest = RandomForest.load(run.require("model"))
    ica_model = IcaModel.load(run.require("ica_model"))
    data = _dataset(run, "test")
    S_test = load_sources(run.require("sources_test"))
    S_disc = load_sources(run.require("sources_discovery"))
    base, phi, pred = attribution.tree_shap_matrix(forest, data.features)
    err = np.abs(base + phi.sum(axis=1) - pred)
    k = forest.n_features
    outputs = []

    p = run.artifact("shap")
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "date", "label", "prediction", "base_value", *(f"shap_{j}" for j in range(k))])
        for i in range(data.n):
            w.writerow([S_test.patient_ids[i], S_test.dates[i].isoformat(), int(data.labels[i]), repr(float(pred[i])), repr(base), *(repr(float(x)) for x in phi[i])])
    outputs.append(p)

    pct = attribution.expression_percentiles(S_test.values, S_disc.values)
    p = run.path("explain/expression_percentiles.csv")
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "date", *(f"source_{j}" for j in range(k))])
        for i in range(data.n):
            w.writerow([S_test.patient_ids[i], S_test.dates[i].isoformat(), *(f"{x:.4f}" for x in pct[:, i])])
    outputs.append(p)

    ranking = attribution.rank_sources(phi, s["statistic"])
    p = run.path("explain/ranking.csv")
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "source", "mean_abs_shap", "max_abs_shap"])
        for r, e in enumerate(ranking.entries, 1):
            w.writerow([r, e.source, repr(e.mean_abs), repr(e.max_abs)])
    outputs.append(p)

    # waterfall for one seeded random test record
    i = int(np.random.default_rng(run.config.seed("explain")).integers(data.n))
    sv = attribution.ShapVector(base, phi[i], float(pred[i]))
    wf = attribution.waterfall(sv, int(s["top_n"]))
    title = f"{S_test.patient_ids[i]} on {S_test.dates[i].isoformat()}"
    outputs.append(_write_json(run.path("explain/waterfall.json"), {"row": i, "patient_id": S_test.patient_ids[i], **wf.to_dict()}))
    svg.write(run.path("explain/waterfall.svg"), svg.waterfall_svg(wf, f"Contributions for {title}"))
    outputs.append(run.path("explain/waterfall.svg"))

    names = _variable_names(run)
    for j in ranking.order()[: int(s["n_signatures"])]:
        desc = attribution.describe_signature(ica_model.mixing, j, int(s["signature_top_n"]), names, S_disc.values[j])
        outputs.append(_write_json(run.path(f"explain/signature_{j}.json"), desc.to_dict()))
        svg.write(run.path(f"explain/signature_{j}.svg"), svg.signature_svg(desc))
        outputs.append(run.path(f"explain/signature_{j}.svg"))

    summary = {"base_value": base, "max_local_accuracy_error": float(err.max()), "n_records": data.n, "order": ranking.order()}
    outputs.append(_write_json(run.path("explain/summary.json"), summary))
    log.info("explain: %d test rows, max local accuracy error %.2e", data.n, err.max())
    return run.write_manifest("explain", inputs, outputs)


def cmd_report(run: Run) -> dict:
    inputs = run.check_upstream("report")
    forest = RandomForest.load(run.require("model"))
    data = _dataset(run, "test")
    scores = forest.predict_proba(data.features)
    auc = auroc(scores, data.labels)
    fpr, tpr = roc_curve(scores, data.labels)
    outputs = []
    svg.write(run.path("report/roc.svg"), svg.roc_svg(fpr, tpr, auc, "Test set ROC"))
    outputs.append(run.path("report/roc.svg"))
    p = run.path("report/roc.csv")
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fpr", "tpr"])
        w.writerows([repr(float(a)), repr(float(b))] for a, b in zip(fpr, tpr))
    outputs.append(p)
    model_meta = _read_json(run.require("model").with_name("model.json"))
    explain = _read_json(run.out / "explain/summary.json") if (run.out / "explain/summary.json").is_file() else None
    for f in sorted((run.out / "explain").glob("*.svg")):
        dst = run.path(f"report/{f.name}")
        shutil.copyfile(f, dst)
        outputs.append(dst)
    summary = {
        "test_auroc": auc,
        "cv_mean_auroc": model_meta["cv_mean_auroc"],
        "n_test_rows": data.n,
        "n_test_patients": int(len(np.unique(data.groups))),
        "n_test_positive_rows": int(data.labels.sum()),
        "label_preset": run.config.settings["labels"]["preset"],
        "stage_counts": _read_json(run.out / "labels/stage_counts.json"),
        "top_sources": explain["order"][:10] if explain else None,
        "upstream_artifacts": dict(sorted(inputs.items())),
    }
    ica_report = run.out / "ica/report.json"
    if ica_report.is_file():
        summary["ica"] = _read_json(ica_report)
    outputs.append(_write_json(run.path("report/summary.json"), summary))
    log.info("report: test AUROC %.3f", auc)
    return run.write_manifest("report", inputs, outputs)


COMMANDS: dict[str, Callable[[Run], dict]] = {
    "synth": cmd_synth,
    "split": cmd_split,
    "curves": cmd_curves,
    "label": cmd_label,
    "sample": cmd_sample,
    "ica": cmd_ica,
    "train": cmd_train,
    "explain": cmd_explain,
    "report": cmd_report,
}


def run_stage(config: PipelineConfig, stage: str) -> dict:
    if stage not in COMMANDS:
        raise ConfigError(f"unknown stage {stage!r}")
    return COMMANDS[stage](Run(config))


def run_all(config: PipelineConfig) -> dict:
    run = Run(config)
    last = {}
    for stage in STAGES:
        last = COMMANDS[stage](run)
    return last
