"""INI campaign configuration.

Every section and key is optional; missing values fall back to the
dataclass defaults. Example::

    [campaign]
    seed = 7
    budget = 40
    campaign_id = ec-dmc-emc
    baseline = 0.30, 0.00, 0.70, 1.1      ; w_ec, w_dmc, w_emc, molality or "none"

    [grid]
    ec_frac = 0.30, 0.50, 11              ; low, high, levels
    dmc_ratio = 0.0, 1.0, 11
    molality = 0.0, 1.8, 11

    [planner]
    init_count = 5
    random_period = 5
    ucb_beta = 2.0
    cycle = ThompsonSampling, ExpectedImprovement, TopTwoEI, UCB
    n_restarts = 16

    [lab]
    noise_sigma = 0.01152
    contamination = 0.08
    triplicate_minutes = 70
    rinse_minutes = 10
    anchors = path/to/anchors.csv         ; recalibrate the surface from a CSV

    [protocol]
    transport = loopback                  ; or http
    host = 127.0.0.1
    port = 0

    [analytics]
    human_hours_per_day = 8
    human_minutes_per_experiment = 28.8
    robot_hours_per_day = 24
    ml_doe_count = 42
    factorial_levels = 5
    factors = 3

    [feeder.EC-2m]                        ; any [feeder.*] section replaces the default roster
    w_ec = 1
    w_dmc = 0
    w_emc = 0
    molality = 2.0
    inventory_ml = 500
    density = 1.52                        ; optional, estimated when absent
"""

from __future__ import annotations

import configparser
from dataclasses import fields, replace
from pathlib import Path

from .analytics import HumanModel, RobotModel
from .campaign import CampaignConfig
from .composition import Electrolyte
from .planner import PlannerConfig
from .virtual_lab import LabConfig, calibrate_surface, load_anchors

_GRID_AXES = ("ec_frac", "dmc_ratio", "molality")


def _floats(text):
    return [float(v) for v in text.split(",")]


def _typed(dc_type, section, skip=()):
    out = {}
    for f in fields(dc_type):
        if f.name in skip or f.name not in section:
            continue
        raw = section[f.name]
        default = f.default
        if isinstance(default, bool):
            out[f.name] = section.getboolean(f.name)
        elif isinstance(default, int):
            out[f.name] = int(raw)
        elif isinstance(default, float):
            out[f.name] = float(raw)
        elif isinstance(default, tuple):
            out[f.name] = tuple(v.strip() for v in raw.split(","))
        elif isinstance(default, str):
            out[f.name] = raw
    return out


def read_ini(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    with Path(path).open() as fh:
        parser.read_file(fh)
    return parser


def load_config(path=None, **overrides) -> CampaignConfig:
    """Build a :class:`CampaignConfig` from an INI file plus keyword overrides."""
    kwargs = {}
    if path is not None:
        ini = read_ini(path)
        if ini.has_section("campaign"):
            sec = ini["campaign"]
            for key, cast in (("seed", int), ("budget", int), ("campaign_id", str)):
                if key in sec:
                    kwargs[key] = cast(sec[key])
            if "baseline" in sec:
                text = sec["baseline"].strip()
                kwargs["baseline"] = None if text.lower() == "none" else Electrolyte.from_fractions(*_floats(text))
        if ini.has_section("grid"):
            bounds, levels = [], []
            for name, (lo, hi), n in zip(_GRID_AXES, CampaignConfig.grid_bounds, CampaignConfig.grid_levels):
                if name in ini["grid"]:
                    lo, hi, n = _floats(ini["grid"][name])
                bounds.append((lo, hi))
                levels.append(int(n))
            kwargs["grid_bounds"], kwargs["grid_levels"] = tuple(bounds), tuple(levels)
        if ini.has_section("planner"):
            kwargs["planner"] = PlannerConfig(**_typed(PlannerConfig, ini["planner"]))
        if ini.has_section("lab"):
            sec = ini["lab"]
            lab = LabConfig(**_typed(LabConfig, sec, skip=("temp_range",)))
            if "temp_range" in sec:
                lab = replace(lab, temp_range=tuple(_floats(sec["temp_range"])))
            if "anchors" in sec:
                anchor_path = Path(sec["anchors"])
                if not anchor_path.is_absolute():
                    anchor_path = Path(path).parent / anchor_path
                es, kappa, weights, labels = load_anchors(anchor_path)
                lab = replace(lab, surface=calibrate_surface(zip(es, kappa), weights, labels))
            kwargs["lab"] = lab
        if ini.has_section("protocol"):
            sec = ini["protocol"]
            for key, cast in (("transport", str), ("host", str), ("port", int)):
                if key in sec:
                    kwargs[key] = cast(sec[key])
        feeders = []
        for name in ini.sections():
            if name.startswith("feeder."):
                sec = ini[name]
                entry = {
                    "id": name.split(".", 1)[1],
                    "w_ec": float(sec["w_ec"]),
                    "w_dmc": float(sec["w_dmc"]),
                    "w_emc": float(sec["w_emc"]),
                    "molality": float(sec["molality"]),
                    "inventory_ml": float(sec.get("inventory_ml", 500.0)),
                }
                if "density" in sec:
                    entry["density"] = float(sec["density"])
                feeders.append(entry)
        if feeders:
            kwargs["feeders"] = tuple(feeders)
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return CampaignConfig(**kwargs)


def load_efficiency_models(path=None):
    """(HumanModel, RobotModel, extra) from the [analytics] section.

    The robot's per-experiment minutes default to the lab's triplicate plus
    rinse time.
    """
    human, robot, extra = HumanModel(), None, {}
    lab = LabConfig()
    if path is not None:
        ini = read_ini(path)
        if ini.has_section("lab"):
            lab = LabConfig(**_typed(LabConfig, ini["lab"], skip=("temp_range",)))
        if ini.has_section("analytics"):
            sec = ini["analytics"]
            human = HumanModel(
                float(sec.get("human_hours_per_day", human.hours_per_day)),
                float(sec.get("human_minutes_per_experiment", human.minutes_per_experiment)),
            )
            robot_hours = float(sec.get("robot_hours_per_day", 24.0))
            robot = RobotModel.from_lab(lab, robot_hours)
            if "robot_minutes_per_experiment" in sec:
                robot = RobotModel(robot_hours, float(sec["robot_minutes_per_experiment"]))
            for key in ("ml_doe_count", "factorial_levels", "factors"):
                if key in sec:
                    extra[key] = int(sec[key])
    if robot is None:
        robot = RobotModel.from_lab(lab)
    return human, robot, extra
