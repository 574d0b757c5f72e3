"""Run configuration and the prepare / train / evaluate stages behind the CLI."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import read_checkpoint, read_sparse, write_checkpoint, write_sparse
from .config import (MODEL_FIELDS, PRESETS, SYNTHETIC_CORPUS, ConfigError, ModelConfig,
                     canonical_json, digest)
from .data import (DataError, generate_synthetic, interaction_matrix, load_feature_matrix,
                   load_interactions, make_split)
from .evaluator import MetricsReport, evaluate_split, make_cold_start_split
from .graphs import (MODALITY_ORDER, GraphSet, ModalityBundle, NormalizedAdjacency, build_backbone,
                     knn_incidence)
from .linalg import make_operator
from .trainer import TrainReport, fit

RUN_FIELDS = {"preset", "interactions", "features", "output_dir", "synthetic",
              "cold_start", "split_mode", "k", "grid"}
DATA_MODEL_FIELDS = ("knn_k", "hgnn_style", "seed")

MANIFEST = "manifest.json"
CHECKPOINT = "checkpoint.mmhc"


@dataclass
class RunConfig:
    model: ModelConfig
    preset: str | None = None
    interactions: str | None = None
    features: dict = field(default_factory=dict)
    output_dir: str = "run"
    synthetic: dict | None = None
    cold_start: float | None = None
    split_mode: str = "global"
    k: int = 20
    grid: dict | None = None

    def validate(self):
        if self.interactions is None and self.synthetic is None:
            raise ConfigError("config needs 'interactions' (with 'features') or a synthetic corpus")
        if self.interactions is not None and not self.features:
            raise ConfigError("'features' must map at least one modality to a file")
        bad = set(self.features) - set(MODALITY_ORDER)
        if bad:
            raise ConfigError(f"unknown modality tags in 'features': {sorted(bad)}")
        if self.cold_start is not None and not 0 < self.cold_start < 1:
            raise ConfigError("cold_start must lie in (0, 1)")
        if self.split_mode not in ("global", "per_user"):
            raise ConfigError("split_mode must be 'global' or 'per_user'")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.synthetic is not None:
            extra = set(self.synthetic) - set(SYNTHETIC_CORPUS)
            if extra:
                raise ConfigError(f"unknown synthetic keys: {sorted(extra)}")
        if self.grid is not None:
            if not isinstance(self.grid, dict) or not self.grid:
                raise ConfigError("grid must be a nonempty object of lists")
            bad = set(self.grid) - MODEL_FIELDS
            if bad:
                raise ConfigError(f"grid keys must be model fields, got {sorted(bad)}")
        return self

    def data_spec(self) -> dict:
        """Everything that determines the prepared artifacts."""
        source = ({"synthetic": self.synthetic} if self.interactions is None else
                  {"interactions": self.interactions, "features": dict(sorted(self.features.items()))})
        return {**source, "cold_start": self.cold_start, "split_mode": self.split_mode,
                **{k: getattr(self.model, k) for k in DATA_MODEL_FIELDS}}

    def data_digest(self) -> str:
        return digest(self.data_spec())

    def config_digest(self) -> str:
        return digest({"data": self.data_spec(), "model": self.model.to_dict()})

    def with_model(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, model=self.model.replace(**changes))


def build_run_config(doc: dict, preset: str | None = None, seed: int | None = None,
                     ablate=(), k: int | None = None, cold_start: float | None = None,
                     output_dir: str | None = None) -> RunConfig:
    """Merge preset < config document < command-line overrides."""
    unknown = set(doc) - RUN_FIELDS - MODEL_FIELDS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    preset = preset or doc.get("preset")
    if preset and preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    model = dict(PRESETS[preset]) if preset else {}
    model.update({key: v for key, v in doc.items() if key in MODEL_FIELDS})
    if seed is not None:
        model["seed"] = seed
    for part in ablate:
        if part == "u2u":
            model["use_u2u"] = False
        elif part == "i2i":
            model["use_i2i"] = False
        elif part == "scl":
            model.update(use_scl=False, alpha=0.0, beta=0.0)
        else:
            raise ConfigError(f"unknown ablation {part!r}")
    run = {key: v for key, v in doc.items() if key in RUN_FIELDS and key != "preset"}
    if preset == "synthetic" and "interactions" not in run:
        run["synthetic"] = {**SYNTHETIC_CORPUS, **(run.get("synthetic") or {})}
    if k is not None:
        run["k"] = k
    if cold_start is not None:
        run["cold_start"] = cold_start
    if output_dir is not None:
        run["output_dir"] = output_dir
    try:
        cfg = RunConfig(model=ModelConfig.from_dict(model), preset=preset, **run)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def load_run_config(path, **overrides) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return build_run_config(doc, **overrides)


# -- in-memory stages ---------------------------------------------------------

@dataclass
class Prepared:
    n_users: int
    n_items: int
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    graphs: GraphSet
    incidences: dict
    cold_items: np.ndarray | None = None
    cold_test: np.ndarray | None = None
    data_digest: str = ""


def load_corpus(cfg: RunConfig):
    if cfg.interactions is None:
        s = cfg.synthetic
        return generate_synthetic(s["users"], s["items"], s["blocks"], s["noise"], s["seed"])
    path = Path(cfg.interactions)
    if not path.exists():
        raise DataError(f"interaction file not found: {path}")
    log_ = load_interactions(path)
    feats = {}
    for tag, fpath in cfg.features.items():
        if not Path(fpath).exists():
            raise DataError(f"feature file for modality {tag!r} not found: {fpath}")
        feats[tag] = load_feature_matrix(fpath)
        if feats[tag].shape[0] != log_.n_items:
            raise DataError(f"modality {tag!r} has {feats[tag].shape[0]} rows, "
                            f"corpus has {log_.n_items} items")
    return log_, ModalityBundle.from_dict(feats)


def prepare(cfg: RunConfig) -> Prepared:
    log_, feats = load_corpus(cfg)
    seed = cfg.model.seed
    cold_items = cold_test = None
    pairs = log_.pairs
    if cfg.cold_start is not None:
        cs = make_cold_start_split(pairs, log_.n_items, cfg.cold_start, seed)
        pairs, cold_items, cold_test = cs.warm_pairs, cs.cold_items, cs.cold_pairs
    warm = dataclasses.replace(log_, pairs=pairs)
    split = make_split(warm, seed, cfg.split_mode)
    A = interaction_matrix(split.train, log_.n_users, log_.n_items)
    if A.nnz == 0:
        raise DataError("training split has no interactions")
    incid = {"u2u": A, "i2i": knn_incidence(feats, cfg.model.knn_k)}
    graphs = graphs_from_incidences(incid, cfg.model.hgnn_style, build_backbone(A).matrix,
                                    log_.n_users, log_.n_items)
    return Prepared(log_.n_users, log_.n_items, split.train, split.valid, split.test, graphs,
                    incid, cold_items, cold_test, cfg.data_digest())


def graphs_from_incidences(incid, hgnn_style, backbone_matrix, n_users, n_items) -> GraphSet:
    return GraphSet(u2u=make_operator(incid["u2u"], hgnn_style),
                    i2i=make_operator(incid["i2i"], hgnn_style),
                    backbone=NormalizedAdjacency(backbone_matrix, n_users, n_items))


def eval_pairs(prep: Prepared):
    """Overall test pairs (cold interactions included) and the cold-only subset."""
    if prep.cold_test is None:
        return prep.test, None
    return np.concatenate([prep.test, prep.cold_test]), prep.cold_test


def train(cfg: RunConfig, prep: Prepared):
    return fit(cfg.model, prep.n_users, prep.n_items, prep.train, prep.valid, prep.graphs)


def evaluate(cfg: RunConfig, prep: Prepared, params, model_cfg: ModelConfig | None = None,
             k: int | None = None) -> MetricsReport:
    test, cold = eval_pairs(prep)
    return evaluate_split(params, prep.graphs, model_cfg or cfg.model, prep.train, test,
                          k or cfg.k, cold, cfg.config_digest())


# -- on-disk artifacts --------------------------------------------------------

def _write_pairs(path: Path, pairs):
    with path.open("w", encoding="utf-8") as fh:
        for u, i in np.asarray(pairs).reshape(-1, 2):
            fh.write(f"{u}\t{i}\n")


def _read_pairs(path: Path) -> np.ndarray:
    text = path.read_text(encoding="utf-8").split()
    return np.array(text, dtype=np.int64).reshape(-1, 2)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def save_prepared(cfg: RunConfig, prep: Prepared) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"train.tsv": prep.train, "valid.tsv": prep.valid, "test.tsv": prep.test}
    if prep.cold_test is not None:
        files["cold_test.tsv"] = prep.cold_test
    for name, pairs in files.items():
        _write_pairs(out / name, pairs)
    if prep.cold_items is not None:
        (out / "cold_items.txt").write_text("".join(f"{i}\n" for i in prep.cold_items))
    write_sparse(out / "u2u.csr", prep.incidences["u2u"])
    write_sparse(out / "i2i.csr", prep.incidences["i2i"])
    write_sparse(out / "backbone.csr", prep.graphs.backbone.matrix)
    names = sorted(p.name for p in out.iterdir()
                   if p.suffix in (".tsv", ".csr") or p.name == "cold_items.txt")
    manifest = {
        "data_digest": prep.data_digest,
        "data_spec": cfg.data_spec(),
        "n_users": prep.n_users,
        "n_items": prep.n_items,
        "files": {name: sha256_file(out / name) for name in names},
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_prepared(cfg: RunConfig) -> Prepared:
    out = Path(cfg.output_dir)
    mpath = out / MANIFEST
    if not mpath.exists():
        raise DataError(f"{mpath} missing; run 'prepare' first")
    manifest = json.loads(mpath.read_text())
    if manifest["data_digest"] != cfg.data_digest():
        raise ConfigError(
            f"prepared data in {out} has digest {manifest['data_digest'][:12]}, current config "
            f"implies {cfg.data_digest()[:12]}; rerun 'prepare' with this config")
    for name, expected in manifest["files"].items():
        if sha256_file(out / name) != expected:
            raise DataError(f"{out / name} changed since 'prepare' (hash mismatch)")
    n_users, n_items = manifest["n_users"], manifest["n_items"]
    incid = {"u2u": read_sparse(out / "u2u.csr"), "i2i": read_sparse(out / "i2i.csr")}
    graphs = graphs_from_incidences(incid, cfg.model.hgnn_style, read_sparse(out / "backbone.csr"),
                                    n_users, n_items)
    cold_items = cold_test = None
    if (out / "cold_test.tsv").exists():
        cold_test = _read_pairs(out / "cold_test.tsv")
        cold_items = np.array((out / "cold_items.txt").read_text().split(), dtype=np.int64)
    return Prepared(n_users, n_items, _read_pairs(out / "train.tsv"), _read_pairs(out / "valid.tsv"),
                    _read_pairs(out / "test.tsv"), graphs, incid, cold_items, cold_test,
                    manifest["data_digest"])


def save_training(cfg: RunConfig, params, report: TrainReport) -> Path:
    out = Path(cfg.output_dir)
    meta = {"model_config": cfg.model.to_dict(), "config_digest": cfg.config_digest(),
            "data_digest": cfg.data_digest()}
    write_checkpoint(out / CHECKPOINT, params, meta)
    doc = {"config_digest": cfg.config_digest(), **report.to_json()}
    (out / "train_report.json").write_text(canonical_json(doc) + "\n")
    return out / CHECKPOINT


def load_training(cfg: RunConfig, path=None):
    path = Path(path) if path else Path(cfg.output_dir) / CHECKPOINT
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}; run 'train' first")
    params, meta = read_checkpoint(path)
    if meta.get("data_digest") != cfg.data_digest():
        raise ConfigError("checkpoint was trained on different prepared data "
                          f"(digest {str(meta.get('data_digest'))[:12]} vs {cfg.data_digest()[:12]})")
    if meta.get("config_digest") != cfg.config_digest():
        raise ConfigError("checkpoint config digest differs from the current config; pass the same "
                          "config, seed and --ablate flags used for 'train'")
    return params, ModelConfig.from_dict(meta["model_config"])
