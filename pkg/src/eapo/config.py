"""Experiment configuration: one YAML document, every knob named.

Missing keys fall back to the published protocol (focal pretraining for 50
epochs at lr 0.005, fine-tuning for 100 epochs at lr 1e-4, beta 0.1,
lambda1 1.0, lambda2 0.1, k 5).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, Optional

import yaml

from eapo.data import Schema, SyntheticConfig
from eapo.objectives import EAPOWeights, FocalParams
from eapo.training import FinetuneConfig, PretrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FileSource:
    train: str
    test: str
    schema: Schema


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "mlp"
    hidden: tuple[int, ...] = (64, 64)
    seed: int = 0


@dataclass(frozen=True)
class EvalConfig:
    bin_width: float = 0.5


@dataclass(frozen=True)
class ExperimentConfig:
    synthetic: Optional[SyntheticConfig] = None
    files: Optional[FileSource] = None
    model: ModelSpec = ModelSpec()
    pretrain: PretrainConfig = PretrainConfig()
    finetune: FinetuneConfig = FinetuneConfig()
    evaluation: EvalConfig = EvalConfig()
    query_subsample: Optional[int] = None
    checkpoint_every: int = 0
    output_dir: str = "runs"

    def validate(self, check_paths: bool = True) -> None:
        if (self.synthetic is None) == (self.files is None):
            raise ConfigError("exactly one data source (synthetic or files) must be configured")
        if self.synthetic is not None:
            self.synthetic.validate()
        if self.files is not None and check_paths:
            for p in (self.files.train, self.files.test):
                if not Path(p).is_file():
                    raise ConfigError(f"data file not found: {p}")
        self.pretrain.validate()
        self.finetune.validate()
        if self.query_subsample is not None and self.query_subsample < 1:
            raise ConfigError("query_subsample must be positive")
        if self.evaluation.bin_width <= 0:
            raise ConfigError("evaluation.bin_width must be positive")

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"data": {}}
        if self.synthetic is not None:
            d["data"]["synthetic"] = asdict(self.synthetic)
        if self.files is not None:
            s = self.files.schema
            d["data"]["files"] = {
                "train": self.files.train,
                "test": self.files.test,
                "schema": {
                    "features": list(s.features),
                    "label_column": s.label_column,
                    "dm_column": s.dm_column,
                    "intensity_column": s.intensity_column,
                    "delimiter": s.delimiter,
                },
            }
        d["model"] = {"kind": self.model.kind, "hidden": list(self.model.hidden), "seed": self.model.seed}
        p = self.pretrain
        d["pretrain"] = {
            "loss": p.loss,
            "epochs": p.epochs,
            "learning_rate": p.learning_rate,
            "batch_size": p.batch_size,
            "seed": p.seed,
            "focal": {"gamma": p.focal.gamma, "alpha": p.focal.alpha},
        }
        f = self.finetune
        d["finetune"] = {
            "mode": f.mode,
            "k": f.k,
            "beta": f.weights.beta,
            "lambda1": f.weights.lambda1,
            "lambda2": f.weights.lambda2,
            "sft_loss": f.sft_loss,
            "epochs": f.epochs,
            "learning_rate": f.learning_rate,
            "batch_size": f.batch_size,
            "seed": f.seed,
            "focal": {"gamma": f.focal.gamma, "alpha": f.focal.alpha},
            "query_subsample": self.query_subsample,
        }
        d["evaluation"] = {"bin_width": self.evaluation.bin_width}
        d["checkpoint_every"] = self.checkpoint_every
        d["output_dir"] = self.output_dir
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        # a run manifest embeds the resolved config under "config"
        if "config" in d and "artifacts" in d:
            d = d["config"]
        data = d.get("data") or {}
        synthetic = files = None
        if data.get("synthetic") is not None:
            synthetic = SyntheticConfig(**data["synthetic"])
        if data.get("files") is not None:
            fd = data["files"]
            files = FileSource(str(fd["train"]), str(fd["test"]), Schema.from_dict(fd["schema"]))
        if synthetic is None and files is None:
            synthetic = SyntheticConfig()

        md = d.get("model") or {}
        kind = md.get("kind", "mlp")
        model = ModelSpec(
            kind=kind,
            hidden=tuple(md.get("hidden", (64, 64) if kind == "mlp" else ())),
            seed=int(md.get("seed", 0)),
        )

        pd = d.get("pretrain") or {}
        loss = pd.get("loss", "focal")
        pfocal = pd.get("focal") or {}
        pretrain = PretrainConfig(
            loss=loss,
            epochs=int(pd.get("epochs", 100 if loss == "bce" else 50)),
            learning_rate=float(pd.get("learning_rate", 0.005)),
            batch_size=int(pd.get("batch_size", 256)),
            seed=int(pd.get("seed", 0)),
            focal=FocalParams(float(pfocal.get("gamma", 2.0)), pfocal.get("alpha", 0.25)),
        )

        fd = d.get("finetune") or {}
        ffocal = fd.get("focal") or pfocal
        finetune = FinetuneConfig(
            k=int(fd.get("k", 5)),
            weights=EAPOWeights(
                float(fd.get("beta", 0.1)), float(fd.get("lambda1", 1.0)), float(fd.get("lambda2", 0.1))
            ),
            sft_loss=fd.get("sft_loss", loss),
            epochs=int(fd.get("epochs", 100)),
            learning_rate=float(fd.get("learning_rate", 1e-4)),
            batch_size=int(fd.get("batch_size", 256)),
            mode=_mode(fd.get("mode", "eapo")),
            seed=int(fd.get("seed", 0)),
            focal=FocalParams(float(ffocal.get("gamma", 2.0)), ffocal.get("alpha", 0.25)),
        )
        qs = fd.get("query_subsample", d.get("query_subsample"))

        ed = d.get("evaluation") or {}
        return cls(
            synthetic=synthetic,
            files=files,
            model=model,
            pretrain=pretrain,
            finetune=finetune,
            evaluation=EvalConfig(float(ed.get("bin_width", 0.5))),
            query_subsample=None if qs is None else int(qs),
            checkpoint_every=int(d.get("checkpoint_every", 0)),
            output_dir=str(d.get("output_dir", "runs")),
        )

    # -- overrides -----------------------------------------------------------

    def with_overrides(
        self,
        seed: Optional[int] = None,
        k: Optional[int] = None,
        mode: Optional[str] = None,
        out: Optional[str] = None,
    ) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = replace(
                cfg,
                synthetic=replace(cfg.synthetic, seed=seed) if cfg.synthetic else None,
                model=replace(cfg.model, seed=seed),
                pretrain=replace(cfg.pretrain, seed=seed),
                finetune=replace(cfg.finetune, seed=seed),
            )
        if k is not None:
            cfg = replace(cfg, finetune=replace(cfg.finetune, k=k))
        if mode is not None:
            cfg = replace(cfg, finetune=replace(cfg.finetune, mode=_mode(mode)))
        if out is not None:
            cfg = replace(cfg, output_dir=out)
        return cfg


def _mode(m: str) -> str:
    m = m.replace("-", "_")
    if m not in ("eapo", "sft_only"):
        raise ConfigError(f"mode must be eapo or sft-only, got {m!r}")
    return m


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    d = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    return ExperimentConfig.from_dict(d or {})


def stable_hash(obj: Any, length: int = 12) -> str:
    """Short sha256 of the canonical JSON encoding of ``obj``."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:length]
