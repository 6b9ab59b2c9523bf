"""Experiment configuration documents (JSON) and seed derivation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import dataio, trm, training
from .errors import ConfigError
from .pipeline import PipelineConfig

SECTIONS = ("seed", "geometry", "trm", "pipeline", "training", "data", "simulate", "gridsearch", "output")


def derive_seed(root: int, name: str) -> int:
    """Stable 63-bit sub-seed for a named randomness stream."""
    digest = hashlib.sha256(f"{int(root)}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _take(section: dict, name: str, allowed) -> dict:
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
    return section


def _build(cls, section: dict, name: str, **fixed):
    allowed = [f.name for f in fields(cls) if f.name not in fixed]
    _take(section, name, allowed)
    try:
        return cls(**section, **fixed)
    except TypeError as exc:
        raise ConfigError(f"section '{name}': {exc}") from None


@dataclass
class ExperimentConfig:
    seed: int
    geometry: trm.RoadGeometry
    trm: trm.TrmConfig
    pipeline: PipelineConfig
    training: training.TrainConfig
    standardize_inputs: bool = False
    data: dict = field(default_factory=dict)
    synth: dataio.SynthConfig | None = None
    simulate: dict = field(default_factory=dict)
    gridsearch: dict = field(default_factory=dict)
    output: Path = Path("out")
    base_dir: Path = Path(".")

    # --- paths -------------------------------------------------------------
    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def measurements_path(self) -> Path:
        p = self.data.get("measurements")
        return self.resolve(p) if p else self.output / "data" / "measurements.csv"

    @property
    def ground_truth_path(self) -> Path:
        p = self.data.get("ground_truth")
        return self.resolve(p) if p else self.output / "data" / "ground_truth.csv"

    @property
    def split(self) -> tuple[float, ...]:
        return tuple(self.data.get("split", (0.8, 0.1, 0.1)))

    @property
    def stride(self) -> int:
        return int(self.data.get("stride", 1))


DATA_KEYS = ("measurements", "ground_truth", "split", "stride", "eval_split", "synth")


def parse_config(doc: dict, base_dir=".", seed_override: int | None = None, output_override=None) -> ExperimentConfig:
    """Validate a config document; every problem raises :class:`ConfigError`."""
    try:
        return _parse(doc, base_dir, seed_override, output_override)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from None


def _parse(doc, base_dir, seed_override, output_override) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    _take(doc, "config", SECTIONS)
    base_dir = Path(base_dir)
    seed = int(doc.get("seed", 0) if seed_override is None else seed_override)

    g = dict(_req(doc, "geometry"))
    _take(g, "geometry", ("n_interfaces", "dx", "observed", "hidden"))
    try:
        geometry = trm.RoadGeometry.from_indices(
            int(g["n_interfaces"]), float(g["dx"]), list(g["observed"]), list(g.get("hidden", []))
        )
    except KeyError as exc:
        raise ConfigError(f"geometry needs {exc}") from None

    t = dict(_req(doc, "trm"))
    _take(t, "trm", ("rho_max", "dT", "v_max", "v_max_kmh", "p_t"))
    if ("v_max" in t) == ("v_max_kmh" in t):
        raise ConfigError("trm needs exactly one of v_max (m/s) or v_max_kmh")
    v_max = float(t["v_max"]) if "v_max" in t else float(t["v_max_kmh"]) / 3.6
    try:
        trm_cfg = trm.TrmConfig(float(t["rho_max"]), geometry.dx, float(t["dT"]), v_max, t.get("p_t"))
    except KeyError as exc:
        raise ConfigError(f"trm needs {exc}") from None

    pl = dict(doc.get("pipeline", {}))
    _take(pl, "pipeline", ("n_past", "n_future", "reg_weight", "standardize_inputs"))
    standardize = bool(pl.pop("standardize_inputs", False))
    try:
        pipe = PipelineConfig(geometry, trm_cfg, int(pl["n_past"]), int(pl["n_future"]), float(pl.get("reg_weight", 1.0)))
    except KeyError as exc:
        raise ConfigError(f"pipeline needs {exc}") from None

    tr = dict(doc.get("training", {}))
    if "seed" in tr:
        raise ConfigError("training seeds derive from the root 'seed'")
    train_cfg = _build(training.TrainConfig, tr, "training", seed=derive_seed(seed, "shuffle"))

    data = dict(doc.get("data", {}))
    _take(data, "data", DATA_KEYS)
    synth_doc = data.pop("synth", None)
    synth = None
    if synth_doc is not None:
        synth = _build(
            dataio.SynthConfig,
            dict(synth_doc),
            "data.synth",
            geometry=geometry,
            trm=trm_cfg,
            seed=derive_seed(seed, "synth"),
            noise_seed=derive_seed(seed, "noise"),
        )
    if "split" in data and len(data["split"]) != 3:
        raise ConfigError("data.split needs three fractions (train, validation, test)")
    if data.get("eval_split", "test") not in ("train", "valid", "test"):
        raise ConfigError("data.eval_split must be train, valid or test")

    # a command-line output path is taken relative to the working directory
    if output_override is not None:
        output = Path(output_override)
    else:
        output = Path(doc.get("output", "out"))
        output = output if output.is_absolute() else base_dir / output
    return ExperimentConfig(
        seed=seed,
        geometry=geometry,
        trm=trm_cfg,
        pipeline=pipe,
        training=train_cfg,
        standardize_inputs=standardize,
        data=data,
        synth=synth,
        simulate=dict(doc.get("simulate", {})),
        gridsearch=dict(doc.get("gridsearch", {})),
        output=output,
        base_dir=base_dir,
    )


def _req(doc, key):
    if key not in doc:
        raise ConfigError(f"config needs a '{key}' section")
    if not isinstance(doc[key], dict):
        raise ConfigError(f"'{key}' must be an object")
    return doc[key]


def load_config(path, seed_override=None, output_override=None) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(doc, path.parent, seed_override, output_override)
