"""Run configuration: one YAML document, validated up front, plus ablation presets."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .data.synthetic import SynthSpec
from .losses import LossWeights
from .models import ModelConfig
from .pose import DEFAULT_BANDWIDTH_RANGE
from .train import TrainConfig


class ConfigError(ValueError):
    pass


# Each preset lists section overrides plus the last stage it trains.
ABLATIONS = {
    "baseline_single": {"model": {"single_branch_classifier": True}, "stages": 1},
    "baseline_siamese": {"stages": 1},
    "dr_gan": {"model": {"share_encoder_with_did": True}, "loss": {"lambda_sp": 0.0}},
    "share_e": {"model": {"share_encoder_with_did": True}},
    "no_sp": {"loss": {"lambda_sp": 0.0}},
    "no_veri": {"loss": {"lambda_v": 0.0}},
    "no_sp_no_veri": {"loss": {"lambda_sp": 0.0, "lambda_v": 0.0}},
    "no_pd": {"loss": {"lambda_pd": 0.0}},
    "no_id": {"loss": {"lambda_id": 0.0}},
    "no_id_pd": {"loss": {"lambda_id": 0.0, "lambda_pd": 0.0}},
    "no_pose_aug": {"train": {"pose_augmentation": False}},
    "full": {},
}

# desk runs use smaller images, so heatmap bandwidths shrink in proportion
DESK_BANDWIDTH_RANGE = (1.0, 1.5)
# the full-scale fine-tuning rates barely move a desk encoder in ~130 steps
DESK_STAGE3_RATES = {"E": 5e-4, "G": 5e-4, "V": 5e-3}


def _check_keys(section, d, allowed):
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be a mapping, got {type(d).__name__}")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")


@dataclass
class DatasetConfig:
    source: str = "synth"  # synth | directory
    path: str = None  # directory source: Market-style root or flat image directory
    landmark_file: str = None
    synth: dict = field(default_factory=dict)  # SynthSpec overrides for training data
    heldout: dict = field(default_factory=dict)  # query/gallery split for evaluation

    HELDOUT_KEYS = ("n_identities", "images_per_identity", "queries_per_identity",
                    "query_pose_variation", "gallery_pose_variation", "seed")

    def validate(self):
        if self.source not in ("synth", "directory"):
            raise ConfigError(f"dataset.source must be 'synth' or 'directory', got {self.source!r}")
        if self.source == "directory" and not self.path:
            raise ConfigError("dataset.path is required when dataset.source is 'directory'")
        spec_keys = {f.name for f in fields(SynthSpec)} - {"split", "background_palette"}
        _check_keys("dataset.synth", self.synth, spec_keys)
        _check_keys("dataset.heldout", self.heldout, self.HELDOUT_KEYS)


@dataclass
class EvalConfig:
    junk_same_camera: bool = False
    max_rank: int = 20
    batch_size: int = 64

    def validate(self):
        if self.max_rank < 1 or self.batch_size < 1:
            raise ConfigError("eval.max_rank and eval.batch_size must be >= 1")


@dataclass
class RunConfig:
    preset: str = "desk"
    seed: int = 0
    ablation: str = "full"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def last_stage(self):
        return ABLATIONS[self.ablation].get("stages", 3)

    def synth_spec(self, **extra):
        base = {"height": self.model.height, "width": self.model.width}
        return SynthSpec(**{**base, **self.dataset.synth, **extra})

    def heldout_spec(self):
        h = dict(self.dataset.heldout)
        train = self.synth_spec()
        spec = SynthSpec(
            n_identities=h.get("n_identities", train.n_identities),
            images_per_identity=h.get("images_per_identity", train.images_per_identity),
            n_cameras=train.n_cameras, height=train.height, width=train.width,
            seed=h.get("seed", train.seed + 1),
            identity_offset=train.identity_offset + train.n_identities,
        )
        opts = {k: h[k] for k in ("queries_per_identity", "query_pose_variation",
                                  "gallery_pose_variation") if k in h}
        return spec, opts

    def to_dict(self):
        return {
            "preset": self.preset,
            "seed": self.seed,
            "ablation": self.ablation,
            "dataset": {k: v for k, v in asdict(self.dataset).items()},
            "model": self.model.to_dict(),
            "loss": self.loss.to_dict(),
            "train": {k: v for k, v in self.train.to_dict().items() if k != "seed"},
            "eval": asdict(self.eval),
        }

    def dump(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path


TOP_KEYS = ("preset", "seed", "ablation", "dataset", "model", "loss", "train", "eval")


def build_config(raw=None, preset=None, seed=None, ablation=None):
    """Validate a raw mapping (e.g. parsed YAML) and apply flag overrides.

    Precedence, lowest first: preset defaults, file values, flags, then the
    ablation preset's toggles.
    """
    raw = copy.deepcopy(raw or {})
    _check_keys("top level", raw, TOP_KEYS)
    preset = preset or raw.get("preset", "desk")
    if preset not in ("desk", "full"):
        raise ConfigError(f"preset must be 'desk' or 'full', got {preset!r}")
    ablation = ablation or raw.get("ablation", "full")
    if ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation!r}; choose from {sorted(ABLATIONS)}")
    seed = int(seed if seed is not None else raw.get("seed", 0))
    sections = {k: dict(raw.get(k) or {}) for k in ("dataset", "model", "loss", "train", "eval")}
    for k, v in sections.items():
        _check_keys(k, v, _section_keys(k))
    for section, values in ABLATIONS[ablation].items():
        if section != "stages":
            sections[section].update(values)
    model_kw = {k: v for k, v in sections["model"].items() if k != "preset"}
    if model_kw.get("single_branch_classifier") and "num_identities" not in model_kw:
        # class count follows the training identities; directory sources fix it after loading
        synth_ids = sections["dataset"].get("synth", {}).get("n_identities", SynthSpec().n_identities)
        model_kw["num_identities"] = synth_ids if sections["dataset"].get("source", "synth") == "synth" else 2
    try:
        model = (ModelConfig.full if preset == "full" else ModelConfig.desk)(**model_kw)
        loss = LossWeights.from_dict(sections["loss"])
        train = TrainConfig.from_dict({**train_defaults(preset), **sections["train"], "seed": seed})
        if preset == "desk":
            user = train.rates.get("stage3", {})
            train.rates = {**train.rates, "stage3": {**DESK_STAGE3_RATES, **user}}
        for stage in (1, 2, 3):
            train.schedule(stage)
        dataset = DatasetConfig(**sections["dataset"])
        dataset.validate()
        ev = EvalConfig(**sections["eval"])
        ev.validate()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    cfg = RunConfig(preset, seed, ablation, dataset, model, loss, train, ev)
    try:
        cfg.synth_spec()
        cfg.heldout_spec()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def train_defaults(preset):
    if preset == "full":
        return {"epoch_scale": 1.0, "bandwidth_range": DEFAULT_BANDWIDTH_RANGE}
    return {"bandwidth_range": DESK_BANDWIDTH_RANGE}


def _section_keys(section):
    return {
        "dataset": [f.name for f in fields(DatasetConfig)],
        "model": [f.name for f in fields(ModelConfig)],
        "loss": [f.name for f in fields(LossWeights)],
        "train": [f.name for f in fields(TrainConfig) if f.name != "seed"],
        "eval": [f.name for f in fields(EvalConfig)],
    }[section]


def load_config(path=None, **flags):
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path} is not valid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path} must contain a mapping")
    return build_config(raw, **flags)
