"""
Configuration Manager for the BASEN toolkit
Handles the run configuration document: defaults, file loading, dotted
overrides, validation and the per-run snapshot.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from src.backend.basen import ModelConfig
from src.backend.corpus import SynthConfig
from src.backend.errors import ConfigValidationError
from src.backend.losses import GAMMA_GRID, LossWeights
from src.backend.schedules import ScheduleConfig, TemperatureSchedule
from src.backend.selection import PLACEMENTS

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_FILE = "config/default_settings.json"
RUN_ROOT_ENV = "BASEN_RUN_ROOT"
DEFAULT_RUN_ROOT = "runs"


@dataclass
class PreprocessConfig:
    filter_lo_hz: float = 0.1
    filter_hi_hz: float = 45.0
    filter_order: int = 4
    compute_mua: bool = True
    a_gamma: float = 0.5
    a_delta: float = 0.5
    seg_len_s: float = 2.0
    hop_s: Optional[float] = None

    def validate(self) -> List[str]:
        bad = []
        if not 0 <= self.filter_lo_hz < self.filter_hi_hz:
            bad.extend(["filter_lo_hz", "filter_hi_hz"])
        if self.filter_order < 1:
            bad.append("filter_order")
        if self.a_gamma < 0:
            bad.append("a_gamma")
        if self.a_delta < 0:
            bad.append("a_delta")
        if not self.seg_len_s > 0:
            bad.append("seg_len_s")
        if self.hop_s is not None and not self.hop_s > 0:
            bad.append("hop_s")
        return bad


@dataclass
class ResGSConfig:
    k_neurons: int = 4
    residual_weight: float = 0.1
    placement: str = "leading"
    selector_lr: float = 0.005
    stage1_epochs: int = 5
    stage2_epochs: int = 60
    fresh_optimizer: bool = True
    pretrained_checkpoint: Optional[str] = None

    def validate(self) -> List[str]:
        bad = []
        if self.k_neurons < 1:
            bad.append("k_neurons")
        if not 0 <= self.residual_weight <= 1:
            bad.append("residual_weight")
        if self.placement not in PLACEMENTS:
            bad.append("placement")
        if not self.selector_lr > 0:
            bad.append("selector_lr")
        if self.stage1_epochs < 1:
            bad.append("stage1_epochs")
        if self.stage2_epochs < 0:
            bad.append("stage2_epochs")
        return bad


@dataclass
class ConvRSConfig:
    gamma_list: List[float] = field(default_factory=lambda: list(GAMMA_GRID))
    n_blocks: int = 4
    reduced_length: int = 16
    kernel_size: int = 3
    threshold: float = 0.5
    initial_epochs: int = 60
    selector_lr: float = 0.005
    stage1_epochs: int = 5
    stage1_lr: float = 0.005
    stage2_epochs: int = 60
    stage2_lr: float = 0.0002

    def validate(self) -> List[str]:
        bad = []
        gammas = list(self.gamma_list)
        if (not gammas or gammas[0] != 0 or any(g < 0 for g in gammas)
                or any(b <= a for a, b in zip(gammas, gammas[1:]))):
            bad.append("gamma_list")
        for name in ("n_blocks", "reduced_length", "kernel_size", "initial_epochs", "stage1_epochs"):
            if getattr(self, name) < 1:
                bad.append(name)
        if self.stage2_epochs < 0:
            bad.append("stage2_epochs")
        if not 0 <= self.threshold <= 1:
            bad.append("threshold")
        for name in ("selector_lr", "stage1_lr", "stage2_lr"):
            if not getattr(self, name) > 0:
                bad.append(name)
        return bad


@dataclass
class EvaluationConfig:
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    test_seg_len_s: float = 20.0
    write_xlsx: bool = True

    def validate(self) -> List[str]:
        bad = []
        if not 0 <= self.val_fraction < 1:
            bad.append("val_fraction")
        if not 0 <= self.test_fraction < 1:
            bad.append("test_fraction")
        if self.val_fraction + self.test_fraction >= 1 and "val_fraction" not in bad:
            bad.extend(["val_fraction", "test_fraction"])
        if not self.test_seg_len_s > 0:
            bad.append("test_seg_len_s")
        return bad


@dataclass
class PathsConfig:
    data_dir: str = "data"
    run_dir: str = ""
    layout_csv: str = "config/layouts/grid16.csv"

    def validate(self) -> List[str]:
        return [] if self.data_dir else ["data_dir"]


SECTIONS = {
    "synth": SynthConfig,
    "preprocess": PreprocessConfig,
    "model": ModelConfig,
    "loss": LossWeights,
    "schedule": ScheduleConfig,
    "temperature": TemperatureSchedule,
    "resgs": ResGSConfig,
    "convrs": ConvRSConfig,
    "evaluation": EvaluationConfig,
    "paths": PathsConfig,
}
TOP_LEVEL = {"seed": 0, "device": "cpu"}


@dataclass
class RunConfig:
    """Every module configuration of one run."""

    synth: SynthConfig = field(default_factory=SynthConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    temperature: TemperatureSchedule = field(default_factory=TemperatureSchedule)
    resgs: ResGSConfig = field(default_factory=ResGSConfig)
    convrs: ConvRSConfig = field(default_factory=ConvRSConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0
    device: str = "cpu"

    def to_dict(self) -> Dict[str, Any]:
        return _plain(asdict(self))


def _plain(value: Any) -> Any:
    """Tuples become lists so the document is plain JSON."""
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def default_run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, DEFAULT_RUN_ROOT))


def parse_override(text: str) -> Tuple[str, Any]:
    """Split 'section.key=value'; the value is parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigValidationError([text], [f"override '{text}' must look like section.key=value"])
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _type_ok(default: Any, value: Any) -> bool:
    if default is None:
        return value is None or isinstance(value, (str, int, float))
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, (list, tuple)):
        return isinstance(value, (list, tuple)) and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
        )
    return True


class ConfigManager:
    """Manages the run configuration document."""

    def __init__(self, config_file: Optional[str] = None):
        """Initialize the configuration manager; None starts from built-in defaults."""
        self.config_file = config_file
        self.config = self.load_config()

    def load_config(self) -> Dict[str, Any]:
        """Load configuration from file merged over the defaults."""
        config = self.get_default_config()
        if self.config_file is None:
            return config
        try:
            with open(self.config_file, "r", encoding="utf-8") as f:
                loaded = json.load(f)
        except FileNotFoundError:
            raise ConfigValidationError(["config_file"], [f"config file not found: {self.config_file}"])
        except json.JSONDecodeError as e:
            raise ConfigValidationError(["config_file"], [f"malformed JSON in {self.config_file}: {e}"])
        if not isinstance(loaded, dict):
            raise ConfigValidationError(["config_file"], ["config document must be a JSON object"])

        unknown = []
        for section, value in loaded.items():
            if section in TOP_LEVEL:
                config[section] = value
            elif section in SECTIONS and isinstance(value, dict):
                for key, item in value.items():
                    if key in config[section]:
                        config[section][key] = item
                    else:
                        unknown.append(f"{section}.{key}")
            else:
                unknown.append(section)
        if unknown:
            raise ConfigValidationError(unknown, [f"unknown key '{key}'" for key in unknown])
        return config

    def get_default_config(self) -> Dict[str, Any]:
        """Get default configuration."""
        return RunConfig().to_dict()

    def save_config(self, path: Optional[Union[str, Path]] = None) -> Path:
        """Save the configuration document (to the loaded file unless a path is given)."""
        target = Path(path or self.config_file or DEFAULT_CONFIG_FILE)
        try:
            os.makedirs(target.parent, exist_ok=True)
            with open(target, "w", encoding="utf-8") as f:
                json.dump(self.config, f, indent=4, sort_keys=True)
                f.write("\n")
        except OSError as e:
            raise Exception(f"Failed to save config file: {str(e)}")
        return target

    def set_value(self, dotted_key: str, value: Any) -> None:
        """Set one value by dotted key; unknown keys are rejected."""
        if dotted_key in TOP_LEVEL:
            self.config[dotted_key] = value
            return
        section, _, key = dotted_key.partition(".")
        if section not in SECTIONS or key not in self.config[section]:
            raise ConfigValidationError([dotted_key], [f"unknown key '{dotted_key}'"])
        self.config[section][key] = value

    def apply_overrides(self, overrides: List[str]) -> None:
        """Apply 'section.key=value' strings, collecting every unknown key."""
        unknown = []
        for text in overrides or []:
            key, value = parse_override(text)
            try:
                self.set_value(key, value)
            except ConfigValidationError:
                unknown.append(key)
        if unknown:
            raise ConfigValidationError(unknown, [f"unknown key '{key}'" for key in unknown])

    def get_run_config(self) -> RunConfig:
        """Validate the document and build the typed configuration.

        Raises:
            ConfigValidationError: listing every offending dotted key
        """
        bad: List[str] = []
        sections = {}
        for name, cls in SECTIONS.items():
            values = self.config[name]
            defaults = asdict(cls())
            for key, value in values.items():
                if not _type_ok(defaults[key], value):
                    bad.append(f"{name}.{key}")
            if any(key.startswith(f"{name}.") for key in bad):
                continue
            section = cls(**values)
            bad.extend(f"{name}.{key}" for key in section.validate())
            sections[name] = section
        if not isinstance(self.config["seed"], int) or isinstance(self.config["seed"], bool) or self.config["seed"] < 0:
            bad.append("seed")
        if not isinstance(self.config["device"], str):
            bad.append("device")

        if not bad:
            if sections["model"].eeg_channels != sections["synth"].q_channels:
                bad.append("model.eeg_channels")
            if sections["resgs"].k_neurons > sections["model"].eeg_channels:
                bad.append("resgs.k_neurons")
        if bad:
            bad = list(dict.fromkeys(bad))
            raise ConfigValidationError(bad)
        return RunConfig(seed=self.config["seed"], device=self.config["device"], **sections)

    def get_synth_config(self) -> SynthConfig:
        return self.get_run_config().synth

    def get_preprocess_config(self) -> PreprocessConfig:
        return self.get_run_config().preprocess

    def get_model_config(self) -> ModelConfig:
        return self.get_run_config().model

    def get_loss_weights(self) -> LossWeights:
        return self.get_run_config().loss

    def get_schedule_config(self) -> ScheduleConfig:
        return self.get_run_config().schedule

    def get_paths(self) -> PathsConfig:
        return self.get_run_config().paths

    def snapshot(self, run_dir: Union[str, Path]) -> Path:
        """Write the resolved document to <run_dir>/config.json."""
        self.get_run_config()
        path = self.save_config(Path(run_dir) / "config.json")
        logger.info("Wrote config snapshot to %s", path)
        return path

    @staticmethod
    def describe_keys() -> List[Tuple[str, Any]]:
        """Every dotted key with its default, for --help."""
        defaults = RunConfig().to_dict()
        rows = [(key, defaults[key]) for key in TOP_LEVEL]
        for section in SECTIONS:
            rows.extend((f"{section}.{key}", value) for key, value in defaults[section].items())
        return rows


def load_run_config(config_file: Optional[str] = None, overrides: Optional[List[str]] = None,
                    **flags: Any) -> Tuple[ConfigManager, RunConfig]:
    """Defaults < file < --set overrides < dedicated flags (seed, run_dir, data_dir)."""
    manager = ConfigManager(config_file)
    manager.apply_overrides(overrides or [])
    if flags.get("seed") is not None:
        manager.set_value("seed", flags["seed"])
        manager.set_value("synth.seed", flags["seed"])
    if flags.get("run_dir") is not None:
        manager.set_value("paths.run_dir", str(flags["run_dir"]))
    if flags.get("data_dir") is not None:
        manager.set_value("paths.data_dir", str(flags["data_dir"]))
    return manager, manager.get_run_config()
