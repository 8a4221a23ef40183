"""INI config files: one place to assemble every component's config.

Recognized sections: [preamble], [channel], [model], [baseline], [train],
[experiment]. Every key is optional and falls back to the dataclass
default; unknown sections or keys are rejected so typos fail loudly.
The derived preamble quantities sg_count and sample_rate may be stated
for documentation and are checked against the configured numerology.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass

from .baseline import BaselineConfig
from .bench import ExperimentConfig
from .neural import ModelConfig, TrainConfig
from .preamble import PreambleConfig
from .scenario import DelayProfile


@dataclass
class ConfigBundle:
    preamble: PreambleConfig
    profile: DelayProfile
    model: ModelConfig
    baseline: BaselineConfig
    train: TrainConfig
    experiment: ExperimentConfig
    checkpoint: str | None = None     # [model] checkpoint
    calib_trials: int = 10000         # [baseline] calib_trials


def default_bundle() -> ConfigBundle:
    return ConfigBundle(preamble=PreambleConfig(), profile=DelayProfile(),
                        model=ModelConfig(), baseline=BaselineConfig(),
                        train=TrainConfig(), experiment=ExperimentConfig())


def _float(s: str) -> float:
    return float(s)


def _int(s: str) -> int:
    return int(s)


def _str(s: str) -> str:
    return s


def _opt_float(s: str) -> float | None:
    return None if s.strip().lower() == "none" else float(s)


def _pair(s: str) -> tuple[float, float]:
    parts = [float(p) for p in s.split(",")]
    if len(parts) != 2:
        raise ValueError(f"expected two comma-separated numbers, got {s!r}")
    return (parts[0], parts[1])


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(p) for p in s.split(","))


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.split(","))


def _opt_floats(s: str) -> tuple:
    return tuple(None if p.strip().lower() == "none" else float(p)
                 for p in s.split(","))


_SCHEMA = {
    "preamble": {"delta_f": _float, "n_fft": _int, "n_sc": _int,
                 "sc_offset": _int, "n_reps": _int, "k_users": _int,
                 "carrier_freq": _float},
    "channel": {"n_rays": _int, "rms_delay_spread": _float},
    "model": {"conv_blocks": _int, "channels": _int, "kernel": _int,
              "mlp_hidden": _ints, "detection_threshold": _float},
    "baseline": {"fft_size": _int, "gamma": _opt_float, "target_fa": _float,
                 "toa_max": _opt_float},
    "train": {"steps": _int, "batch_size": _int, "lr": _float, "seed": _int,
              "p_active_range": _pair, "cfo_max_ppm": _float,
              "toa_max": _opt_float, "snr_range_db": _pair},
    "experiment": {"snr_points_db": _opt_floats,
                   "cfo_max_ppm_points": _floats, "p_active_points": _floats,
                   "n_trials": _int, "seed": _int, "snr_range_db": _pair,
                   "toa_max": _opt_float, "bin_width_db": _float,
                   "chunk": _int},
}

# keys handled outside the dataclass constructors
_EXTRA = {"model": {"checkpoint": _str}, "baseline": {"calib_trials": _int},
          "preamble": {"sg_count": _int, "sample_rate": _float}}


def _parse_section(parser: configparser.ConfigParser, section: str
                   ) -> tuple[dict, dict]:
    known = _SCHEMA[section]
    extra_known = _EXTRA.get(section, {})
    kwargs, extras = {}, {}
    if not parser.has_section(section):
        return kwargs, extras
    for key, raw in parser.items(section):
        try:
            if key in known:
                kwargs[key] = known[key](raw)
            elif key in extra_known:
                extras[key] = extra_known[key](raw)
            else:
                raise ValueError("unknown key")
        except ValueError as err:
            raise ValueError(f"config [{section}] {key} = {raw!r}: {err}") from err
    return kwargs, extras


def load_config(path) -> ConfigBundle:
    """Parse an INI file into a ConfigBundle; missing file is an error."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ValueError(f"config has unknown section [{section}]")

    pre_kwargs, pre_extra = _parse_section(parser, "preamble")
    preamble = PreambleConfig(**pre_kwargs)
    if "sg_count" in pre_extra and pre_extra["sg_count"] != preamble.sg_count:
        raise ValueError(f"config [preamble] sg_count = {pre_extra['sg_count']}"
                         f" but the numerology implies {preamble.sg_count}")
    if "sample_rate" in pre_extra \
            and pre_extra["sample_rate"] != preamble.sample_rate:
        raise ValueError(f"config [preamble] sample_rate = "
                         f"{pre_extra['sample_rate']} but the numerology "
                         f"implies {preamble.sample_rate}")

    chan_kwargs, _ = _parse_section(parser, "channel")
    profile = DelayProfile(**chan_kwargs)

    model_kwargs, model_extra = _parse_section(parser, "model")
    bl_kwargs, bl_extra = _parse_section(parser, "baseline")
    train_kwargs, _ = _parse_section(parser, "train")
    exp_kwargs, _ = _parse_section(parser, "experiment")
    train = TrainConfig(profile=profile, **train_kwargs)
    experiment = ExperimentConfig(profile=profile, **exp_kwargs)

    return ConfigBundle(preamble=preamble, profile=profile,
                        model=ModelConfig(**model_kwargs),
                        baseline=BaselineConfig(**bl_kwargs),
                        train=train, experiment=experiment,
                        checkpoint=model_extra.get("checkpoint"),
                        calib_trials=bl_extra.get("calib_trials", 10000))
