"""Stage orchestration: data -> pretrain -> adapt -> eval, with a run manifest.

Each stage writes into ``<output_dir>/<stage>-<key>/`` where ``key`` hashes
the stage's own config together with the key of the stage it consumes, so a
changed upstream never mixes with stale downstream outputs. A ``done.json``
marker listing file hashes is written last; a stage whose marker exists is
reused unless ``force`` is set.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
import time
import warnings
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from eapo import __version__
from eapo.config import ExperimentConfig, stable_hash
from eapo.data import (
    EXPORT_INTENSITY,
    EXPORT_LABEL,
    Dataset,
    Schema,
    Standardizer,
    apply_standardizer,
    export_table,
    fit_standardizer,
    generate_synthetic,
    load_table,
)
from eapo.evaluation import intensity_breakdown, metrics_at_threshold, roc_auc, select_threshold_pr
from eapo.model import Classifier, freeze_reference, init_classifier
from eapo.retrieval import build_local_manifold, export_manifold, extract_extreme
from eapo.training import finetune, pretrain

log = logging.getLogger(__name__)

DONE = "done.json"


class StageError(RuntimeError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _finish(stage_dir: Path, info: dict) -> None:
    files = sorted(p for p in stage_dir.rglob("*") if p.is_file() and p.name != DONE)
    info = dict(info, files={str(p.relative_to(stage_dir)): sha256_file(p) for p in files})
    _write_json(stage_dir / DONE, info)


def _is_done(stage_dir: Path) -> bool:
    """Marker present and every file it lists still on disk."""
    marker = stage_dir / DONE
    if not marker.is_file():
        return False
    try:
        listed = json.loads(marker.read_text(encoding="utf-8")).get("files", {})
    except (OSError, ValueError):
        return False
    return all((stage_dir / rel).is_file() for rel in listed)


def _fresh(stage_dir: Path) -> None:
    if stage_dir.exists():
        shutil.rmtree(stage_dir)
    stage_dir.mkdir(parents=True)


@dataclass(frozen=True)
class StageKeys:
    data: str
    pretrain: str
    adapt: str
    eval: str


def stage_keys(cfg: ExperimentConfig) -> StageKeys:
    d = cfg.to_dict()
    data_part: dict = {"data": d["data"]}
    if cfg.files is not None:
        data_part["train_sha256"] = sha256_file(cfg.files.train)
        data_part["test_sha256"] = sha256_file(cfg.files.test)
    data = stable_hash(data_part)
    pre = stable_hash({"data": data, "model": d["model"], "pretrain": d["pretrain"]})
    adapt = stable_hash({"pretrain": pre, "finetune": d["finetune"]})
    ev = stable_hash({"adapt": adapt, "evaluation": d["evaluation"]})
    return StageKeys(data, pre, adapt, ev)


class Run:
    """Resolved paths for one experiment config."""

    def __init__(self, cfg: ExperimentConfig, force: bool = False):
        cfg.validate()
        self.cfg = cfg
        self.force = force
        self.out = Path(cfg.output_dir)
        self.keys = stage_keys(cfg)
        self.durations: dict[str, float] = {}

    @property
    def data_dir(self) -> Path:
        return self.out / f"data-{self.keys.data}"

    @property
    def pretrain_dir(self) -> Path:
        return self.out / f"pretrain-{self.keys.pretrain}"

    @property
    def adapt_dir(self) -> Path:
        return self.out / f"adapt-{self.keys.adapt}"

    @property
    def eval_dir(self) -> Path:
        return self.out / f"eval-{self.keys.eval}"

    @property
    def manifest_path(self) -> Path:
        return self.out / f"manifest-{self.keys.eval}.json"

    # -- data ------------------------------------------------------------------

    def synth(self) -> Path:
        if self.cfg.synthetic is None:
            raise StageError("synth requires a synthetic data source")
        d = self.data_dir
        if _is_done(d) and not self.force:
            return d
        t0 = time.perf_counter()
        try:
            _fresh(d)
        except OSError as exc:
            raise StageError(f"cannot write to {d}: {exc}") from exc
        train, test = generate_synthetic(self.cfg.synthetic)
        export_table(train, d / "train.csv")
        export_table(test, d / "test.csv")
        _finish(d, {"stage": "data", "key": self.keys.data, "n_train": len(train), "n_test": len(test)})
        self.durations["synth"] = time.perf_counter() - t0
        log.info("synthetic data written to %s", d)
        return d

    def load_data(self) -> tuple[Dataset, Dataset]:
        if self.cfg.synthetic is not None:
            d = self.synth()
            train = load_table(d / "train.csv", _synthetic_schema(self.cfg))
            test = load_table(d / "test.csv", _synthetic_schema(self.cfg))
        else:
            f = self.cfg.files
            train = load_table(f.train, f.schema)
            test = load_table(f.test, f.schema)
        if train.dim != test.dim:
            raise StageError("train and test tables have different feature dimensions")
        return train, test

    def standardized(self) -> tuple[Dataset, Dataset, Standardizer]:
        train, test = self.load_data()
        path = self.pretrain_dir / "standardizer.json"
        if path.is_file():
            st = Standardizer.from_dict(json.loads(path.read_text()))
        else:
            st = fit_standardizer(train)
        return apply_standardizer(st, train), apply_standardizer(st, test), st

    # -- pretrain ----------------------------------------------------------------

    def run_pretrain(self) -> Path:
        d = self.pretrain_dir
        if _is_done(d) and not self.force:
            return d
        train, _ = self.load_data()
        t0 = time.perf_counter()
        _fresh(d)
        st = fit_standardizer(train)
        _write_json(d / "standardizer.json", st.to_dict())
        trs = apply_standardizer(st, train)
        spec = self.cfg.model
        model = init_classifier(spec.kind, trs.dim, spec.hidden, spec.seed)
        trained, hist = pretrain(
            model,
            trs,
            self.cfg.pretrain,
            monitor=lambda m: _safe_auc(m, trs),
            checkpoint_dir=d / "checkpoints",
            checkpoint_every=self.cfg.checkpoint_every,
        )
        trained.save(d / "checkpoint.json")
        hist.write_csv(d / "history.csv")
        _finish(d, {"stage": "pretrain", "key": self.keys.pretrain, "data_key": self.keys.data})
        self.durations["pretrain"] = time.perf_counter() - t0
        log.info("pretrained checkpoint written to %s", d)
        return d

    # -- adapt ---------------------------------------------------------------------

    def run_adapt(self) -> Path:
        d = self.adapt_dir
        if _is_done(d) and not self.force:
            return d
        if not _is_done(self.pretrain_dir):
            raise StageError(f"no pretrained checkpoint at {self.pretrain_dir}; run 'pretrain' first")
        t0 = time.perf_counter()
        trs, tes, _ = self.standardized()
        base = Classifier.load(self.pretrain_dir / "checkpoint.json")
        ref = freeze_reference(base)
        ft = self.cfg.finetune

        # test labels are never read here: only the feature matrix
        queries = tes.features
        if self.cfg.query_subsample is not None and self.cfg.query_subsample < len(queries):
            pick = np.sort(
                np.random.default_rng(ft.seed).choice(len(queries), self.cfg.query_subsample, replace=False)
            )
            queries = queries[pick]
        manifold = build_local_manifold(queries, trs, ft.k)
        if len(manifold) == 0:
            raise StageError("local manifold is empty")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            extreme = extract_extreme(manifold)
        for w in caught:
            log.warning("%s", w.message)

        _fresh(d)
        # audit exports carry raw (unstandardized) training features
        raw_train, _ = self.load_data()
        export_manifold(_raw_view(manifold, raw_train), d / "local_manifold.csv")
        export_manifold(_raw_view(extreme, raw_train), d / "extreme_subset.csv")

        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            adapted, hist = finetune(
                base,
                ref,
                manifold,
                extreme,
                ft,
                checkpoint_dir=d / "checkpoints",
                checkpoint_every=self.cfg.checkpoint_every,
            )
        for w in caught:
            log.warning("%s", w.message)
        if ref.snapshot.param_hash() != ref.param_hash:
            raise StageError("reference policy changed during fine-tuning")
        adapted.save(d / "checkpoint.json")
        hist.write_csv(d / "history.csv")
        _finish(
            d,
            {
                "stage": "adapt",
                "key": self.keys.adapt,
                "pretrain_key": self.keys.pretrain,
                "manifold_size": len(manifold),
                "extreme_size": len(extreme),
                "query_count": manifold.query_count,
                "reference_sha256": ref.param_hash,
            },
        )
        self.durations["adapt"] = time.perf_counter() - t0
        log.info("adapted checkpoint written to %s (|D_local|=%d, |D_extreme|=%d)", d, len(manifold), len(extreme))
        return d

    # -- eval ------------------------------------------------------------------------

    def run_eval(self) -> Path:
        d = self.eval_dir
        if _is_done(d) and not self.force:
            return d
        if not _is_done(self.pretrain_dir):
            raise StageError(f"no pretrained checkpoint at {self.pretrain_dir}; run 'pretrain' first")
        t0 = time.perf_counter()
        trs, tes, _ = self.standardized()
        checkpoints = {"pretrained": self.pretrain_dir / "checkpoint.json"}
        if _is_done(self.adapt_dir):
            checkpoints["adapted"] = self.adapt_dir / "checkpoint.json"
        _fresh(d)
        summary = {}
        for name, path in checkpoints.items():
            model = Classifier.load(path)
            rep, bd = evaluate_model(model, trs, tes, self.cfg.evaluation.bin_width)
            header = [
                f"model = {name}",
                f"checkpoint_sha256 = {sha256_file(path)}",
                f"train_rows = {len(trs)}",
                f"test_rows = {len(tes)}",
            ]
            (d / f"{name}_report.txt").write_text("\n".join(header) + "\n" + rep.to_text(), encoding="utf-8")
            if bd is not None:
                bd.write_csv(d / f"{name}_breakdown.csv")
            summary[name] = {"roc_auc": rep.roc_auc, "f1": rep.f1, "recall": rep.recall, "threshold": rep.threshold}
        _finish(d, {"stage": "eval", "key": self.keys.eval, "threshold_source": "train", "summary": summary})
        self.durations["eval"] = time.perf_counter() - t0
        return d

    # -- everything ----------------------------------------------------------------

    def run_all(self) -> Path:
        if self.cfg.synthetic is not None:
            self.synth()
        self.run_pretrain()
        self.run_adapt()
        self.run_eval()
        return self.write_manifest()

    def write_manifest(self) -> Path:
        artifacts = {}
        for stage_dir in (self.data_dir, self.pretrain_dir, self.adapt_dir, self.eval_dir):
            if not stage_dir.is_dir():
                continue
            for p in sorted(stage_dir.rglob("*")):
                if p.is_file():
                    artifacts[str(p.relative_to(self.out))] = sha256_file(p)
        if self.cfg.files is not None:
            artifacts["input:train"] = sha256_file(self.cfg.files.train)
            artifacts["input:test"] = sha256_file(self.cfg.files.test)
        cfg = self.cfg
        manifest = {
            "version": __version__,
            "config": cfg.to_dict(),
            "keys": asdict(self.keys),
            "seeds": {
                "data": cfg.synthetic.seed if cfg.synthetic else None,
                "model": cfg.model.seed,
                "pretrain": cfg.pretrain.seed,
                "finetune": cfg.finetune.seed,
            },
            "threshold_source": "train",
            "artifacts": artifacts,
            "durations_seconds": {k: round(v, 3) for k, v in self.durations.items()},
        }
        _write_json(self.manifest_path, manifest)
        return self.manifest_path


def _synthetic_schema(cfg: ExperimentConfig) -> Schema:
    names = tuple(f"x{i}" for i in range(cfg.synthetic.dim))
    return Schema(names, label_column=EXPORT_LABEL, intensity_column=EXPORT_INTENSITY)


def _raw_view(part, raw_train: Dataset):
    """Same membership as ``part`` but with unstandardized training rows."""
    return replace(part, data=raw_train.subset(part.source_indices))


def _safe_auc(model: Classifier, ds: Dataset) -> Optional[float]:
    if 0 < ds.positive_count < len(ds):
        return roc_auc(model.forward(ds.features), ds.labels)
    return None


def evaluate_model(model: Classifier, train: Dataset, test: Dataset, bin_width: float = 0.5):
    """Threshold from the training split, metrics and breakdown on the test split."""
    p_train = model.predict_proba(train.features)
    p_test = model.predict_proba(test.features)
    threshold = select_threshold_pr(p_train, train.labels)
    rep = metrics_at_threshold(p_test, test.labels, threshold, threshold_source="train")
    if rep.roc_auc is None:
        log.warning("test set has a single class; ROC-AUC disabled")
    pos = test.labels == 1
    bd = None
    if pos.any() and np.all(test.intensity[pos] > 0):
        bd = intensity_breakdown(p_test, test.labels, test.intensity, threshold, bin_width)
    elif pos.any():
        log.warning("some test positives lack an intensity; breakdown skipped")
    return rep, bd


def verify_manifest(path) -> list[str]:
    """Paths whose current hash differs from the manifest (empty list = OK)."""
    path = Path(path)
    manifest = json.loads(path.read_text(encoding="utf-8"))
    out = Path(manifest["config"]["output_dir"])
    if not out.is_absolute() and not out.exists():
        out = path.parent
    bad = []
    for rel, digest in manifest["artifacts"].items():
        if rel.startswith("input:"):
            continue
        p = out / rel
        if not p.is_file() or sha256_file(p) != digest:
            bad.append(rel)
    return bad
