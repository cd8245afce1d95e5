"""Experiment configuration: INI parsing, validation, and hashing."""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .estimators import parse_estimator_id
from .simulator import DEFAULT_OMEGA_SCALE, ETA_KINDS, MASK_MODES

EXPERIMENT_KINDS = ("calibration", "variance_scaling", "ranking", "figure1")


class ConfigError(ValueError):
    """An experiment configuration is invalid."""


@dataclass
class ExperimentConfig:
    kind: str
    estimators: list[str]
    n_clusters: int
    n_units: int
    repetitions: int = 1
    qini_k: int = 10
    seed: int = 0
    workers: int = 1
    eta_kind: str = "exp_decay"
    mask_mode: str = "increment"
    treat_prob: float = 0.5
    mask_prob: float = 0.5
    softmax_temperature: float = 0.1
    discount: float = 0.08
    price_base: float = 20.0
    price_slope: float = 100.0
    margin_base: float = 0.01
    margin_slope: float = 0.05
    omega_scale: float = DEFAULT_OMEGA_SCALE
    omega_csv_0: Optional[str] = None
    omega_csv_1: Optional[str] = None
    epsilons: list[float] = field(default_factory=lambda: [0.0])
    score_uses_mask: bool = False
    sweep_m: Optional[list[int]] = None
    sweep_n: Optional[list[int]] = None
    b_max: float = 1.0
    folds: int = 2
    out_dir: Optional[str] = None
    keep_going: bool = False
    split_curves: bool = False

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        if not self.estimators:
            raise ConfigError("at least one estimator id is required")
        for estimator_id in self.estimators:
            try:
                parse_estimator_id(estimator_id)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        if self.repetitions < 1:
            raise ConfigError("repetitions must be positive")
        if self.qini_k < 1:
            raise ConfigError("qini_grid must be positive")
        if self.n_clusters < 1 or self.n_units < 1:
            raise ConfigError("n_clusters and n_units must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be positive")
        if self.eta_kind not in ETA_KINDS:
            raise ConfigError(f"eta must be one of {ETA_KINDS}")
        if self.mask_mode not in MASK_MODES:
            raise ConfigError(f"mask_mode must be one of {MASK_MODES}")
        if not 0 < self.treat_prob < 1:
            raise ConfigError("treat_prob must lie strictly between 0 and 1")
        if not 0 <= self.mask_prob <= 1:
            raise ConfigError("mask_prob must lie in [0, 1]")
        if self.softmax_temperature <= 0:
            raise ConfigError("softmax_temperature must be positive")
        if self.b_max <= 0:
            raise ConfigError("b_max must be positive")
        if self.folds < 2:
            raise ConfigError("folds must be at least 2")
        if not self.epsilons:
            raise ConfigError("at least one policy epsilon is required")
        for eps in self.epsilons:
            if not 0.0 <= eps <= 1.0:
                raise ConfigError("policy epsilons must lie in [0, 1]")
        if self.sweep_m is not None and self.sweep_n is not None:
            raise ConfigError("sweep_m and sweep_n are mutually exclusive")
        for name, sweep in (("sweep_m", self.sweep_m), ("sweep_n", self.sweep_n)):
            if sweep is not None:
                if not sweep:
                    raise ConfigError(f"{name} must be a nonempty list")
                if any(v < 1 for v in sweep):
                    raise ConfigError(f"{name} entries must be positive")
        if self.kind == "ranking":
            if len(self.epsilons) < 2:
                raise ConfigError("ranking needs at least two policy epsilons")
            if self.sweep_m or self.sweep_n:
                raise ConfigError("ranking does not support sweeps")
        else:
            if len(self.epsilons) != 1:
                raise ConfigError(f"{self.kind} uses exactly one policy epsilon")
        if self.kind == "variance_scaling" and not (self.sweep_m or self.sweep_n):
            raise ConfigError("variance_scaling requires sweep_m or sweep_n")
        if self.kind == "figure1" and (self.sweep_m or self.sweep_n):
            raise ConfigError("figure1 does not support sweeps")

    def cells(self) -> list[tuple[int, int]]:
        """The (n_clusters, n_units) grid this experiment runs over."""
        if self.sweep_m:
            return [(self.n_clusters, m) for m in self.sweep_m]
        if self.sweep_n:
            return [(n, self.n_units) for n in self.sweep_n]
        return [(self.n_clusters, self.n_units)]

    def numeric_fields(self) -> dict:
        """Every field that influences the produced numbers."""
        payload = asdict(self)
        for presentation_only in ("workers", "out_dir", "keep_going", "split_curves"):
            payload.pop(presentation_only)
        return payload

    def config_hash(self) -> str:
        canonical = json.dumps(self.numeric_fields(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


_SECTION_KEYS = {
    "experiment": (
        "kind", "repetitions", "estimators", "qini_grid", "seed", "workers",
        "sweep_m", "sweep_n", "b_max", "folds",
    ),
    "simulator": (
        "n_clusters", "n_units", "eta", "mask_mode", "treat_prob", "mask_prob",
        "softmax_temperature", "discount", "price_base", "price_slope",
        "margin_base", "margin_slope", "omega_scale", "omega_csv_0", "omega_csv_1",
    ),
    "policies": ("epsilons", "score_uses_mask"),
}

_REQUIRED = {"experiment": ("kind", "estimators"), "simulator": ("n_clusters", "n_units")}


def _split_list(raw: str) -> list[str]:
    return [item for item in (piece.strip() for piece in raw.split(",")) if item]


def parse_config(path) -> ExperimentConfig:
    """Read and validate an experiment file; unknown keys are errors."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as handle:
            parser.read_file(handle)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None

    for section in parser.sections():
        if section not in _SECTION_KEYS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key in parser[section]:
            if key not in _SECTION_KEYS[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
    for section, keys in _REQUIRED.items():
        if section not in parser:
            raise ConfigError(f"{path}: missing section [{section}]")
        for key in keys:
            if key not in parser[section]:
                raise ConfigError(f"{path}: missing key {key!r} in [{section}]")

    exp = parser["experiment"]
    sim = parser["simulator"]
    pol = parser["policies"] if "policies" in parser else {}

    def _int(section, key, default=None):
        raw = section.get(key)
        if raw is None:
            return default
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{path}: {key} must be an integer, got {raw!r}") from None

    def _float(section, key, default=None):
        raw = section.get(key)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{path}: {key} must be a number, got {raw!r}") from None

    def _int_list(section, key):
        raw = section.get(key)
        if raw is None:
            return None
        try:
            return [int(v) for v in _split_list(raw)]
        except ValueError:
            raise ConfigError(f"{path}: {key} must be a list of integers") from None

    epsilons = [0.0]
    if "epsilons" in pol:
        try:
            epsilons = [float(v) for v in _split_list(pol["epsilons"])]
        except ValueError:
            raise ConfigError(f"{path}: epsilons must be a list of numbers") from None
    score_uses_mask = False
    if "score_uses_mask" in pol:
        raw = pol["score_uses_mask"].strip().lower()
        if raw not in ("true", "false"):
            raise ConfigError(f"{path}: score_uses_mask must be true or false")
        score_uses_mask = raw == "true"

    defaults = ExperimentConfig.__dataclass_fields__
    try:
        return ExperimentConfig(
            kind=exp["kind"].strip(),
            estimators=_split_list(exp["estimators"]),
            repetitions=_int(exp, "repetitions", 1),
            qini_k=_int(exp, "qini_grid", 10),
            seed=_int(exp, "seed", 0),
            workers=_int(exp, "workers", 1),
            sweep_m=_int_list(exp, "sweep_m"),
            sweep_n=_int_list(exp, "sweep_n"),
            b_max=_float(exp, "b_max", 1.0),
            folds=_int(exp, "folds", 2),
            n_clusters=_int(sim, "n_clusters"),
            n_units=_int(sim, "n_units"),
            eta_kind=sim.get("eta", defaults["eta_kind"].default).strip(),
            mask_mode=sim.get("mask_mode", defaults["mask_mode"].default).strip(),
            treat_prob=_float(sim, "treat_prob", defaults["treat_prob"].default),
            mask_prob=_float(sim, "mask_prob", defaults["mask_prob"].default),
            softmax_temperature=_float(
                sim, "softmax_temperature", defaults["softmax_temperature"].default
            ),
            discount=_float(sim, "discount", defaults["discount"].default),
            price_base=_float(sim, "price_base", defaults["price_base"].default),
            price_slope=_float(sim, "price_slope", defaults["price_slope"].default),
            margin_base=_float(sim, "margin_base", defaults["margin_base"].default),
            margin_slope=_float(sim, "margin_slope", defaults["margin_slope"].default),
            omega_scale=_float(sim, "omega_scale", DEFAULT_OMEGA_SCALE),
            omega_csv_0=sim.get("omega_csv_0"),
            omega_csv_1=sim.get("omega_csv_1"),
            epsilons=epsilons,
            score_uses_mask=score_uses_mask,
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def load_omega(path) -> np.ndarray:
    """Coefficient matrix fixture: plain CSV of floats."""
    matrix = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    return matrix
