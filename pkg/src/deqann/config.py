"""Run configuration: one INI file, every key typed and checked."""

import configparser
import io
from dataclasses import dataclass, field
from pathlib import Path

from .deq import TrainConfig
from .fixedpoint import SolverConfig
from .graphimage import Thresholds


class ConfigError(ValueError):
    pass


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_float(text):
    return None if text.strip().lower() in ("", "none") else float(text)


def _int_list(text):
    return [int(v) for v in text.replace(",", " ").split()]


def _float_list(text):
    return [float(v) for v in text.replace(",", " ").split()]


def _path_list(text):
    return [v.strip() for v in text.replace("\n", ",").split(",") if v.strip()]


# section -> key -> (parser, default)
SCHEMA = {
    "data": {
        "source": (str, "synthetic"),
        "n_per_class": (int, 100),
        "n_test_per_class": (int, 0),
        "seed": (int, 0),
        "image_size": (int, 64),
        "cutoff": (float, 2.0),
        "structure_dir": (str, ""),
        "property_csv": (str, ""),
        "task": (str, "bandgap"),
        "test_fraction": (float, 0.0),
        "dipole_threshold": (float, 4.803),
        "pore_threshold": (_optional_float, None),
        "gap_metal_max": (float, 0.1),
        "gap_insulator_min": (float, 3.0),
    },
    "model": {
        "k1": (int, 8),
        "norm_eps": (float, 4.0),
        "lipschitz_cap": (float, 0.8),
    },
    "solver": {
        "m": (int, 5),
        "lam": (float, 1e-5),
        "beta": (float, 1.0),
        "tol": (float, 1e-2),
        "max_iter": (int, 1000),
    },
    "train": {
        "learning_rate": (float, 0.5),
        "epochs": (int, 20),
        "batch_size": (int, 32),
        "cosine_annealing": (_bool, False),
        "seed": (int, 0),
        "backward_tol": (_optional_float, None),
    },
    "bench": {
        "cases": (int, 20),
        "dim": (int, 64),
        "seed": (int, 0),
        "model_batch": (int, 8),
    },
    "tune": {
        "m_grid": (_int_list, [1, 2, 3, 5, 8]),
        "beta_grid": (_float_list, [0.5, 0.8, 1.0]),
        "problem": (str, "linear"),
        "dim": (int, 10),
        "seed": (int, 0),
    },
    "infer": {
        "model": (str, ""),
        "images": (_path_list, []),
    },
    "output": {
        "dir": (str, "run"),
    },
}

PATH_KEYS = {("data", "structure_dir"), ("data", "property_csv"), ("infer", "model"),
             ("output", "dir")}


def _format(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    sections: dict = field(default_factory=dict)

    def __getitem__(self, section):
        return self.sections[section]

    @property
    def out_dir(self):
        return Path(self.sections["output"]["dir"])

    def solver_config(self):
        return SolverConfig(**self.sections["solver"])

    def train_config(self):
        return TrainConfig(**self.sections["train"])

    def thresholds(self):
        d = self.sections["data"]
        return Thresholds(dipole=d["dipole_threshold"], pore=d["pore_threshold"],
                          gap_metal_max=d["gap_metal_max"],
                          gap_insulator_min=d["gap_insulator_min"])

    def to_ini(self):
        """Fully resolved configuration text; loading it reproduces this config."""
        cp = configparser.ConfigParser(interpolation=None)
        for section, values in self.sections.items():
            cp[section] = {k: _format(v) for k, v in values.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def parse_config(text, base_dir=None):
    """Parse INI text; unknown sections or keys raise :class:`ConfigError`."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    sections = {name: {k: default for k, (_, default) in keys.items()}
                for name, keys in SCHEMA.items()}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in cp[section].items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown config key '{key}' in [{section}]")
            parser = SCHEMA[section][key][0]
            try:
                sections[section][key] = parser(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for '{key}' in [{section}]: {exc}") from None
    if base_dir is not None:
        for section, key in PATH_KEYS:
            value = sections[section][key]
            if value and not Path(value).is_absolute():
                sections[section][key] = str((Path(base_dir) / value).resolve())
        sections["infer"]["images"] = [
            p if Path(p).is_absolute() else str((Path(base_dir) / p).resolve())
            for p in sections["infer"]["images"]]
    cfg = RunConfig(sections)
    try:
        cfg.solver_config()
        cfg.train_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if sections["data"]["source"] not in ("synthetic", "structures"):
        raise ConfigError("data.source must be 'synthetic' or 'structures'")
    return cfg


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, base_dir=path.parent)
