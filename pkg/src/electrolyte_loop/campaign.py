"""Closed-loop campaign orchestration, persistence, and post-hoc selection."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .composition import (
    DEFAULT_GRID_BOUNDS,
    DEFAULT_LEVELS,
    DensityModel,
    Electrolyte,
    axes_to_electrolyte,
    default_feeders,
    enumerate_grid,
    make_feeder,
)
from .errors import CampaignComplete
from .planner import ObservationSet, PlannerConfig, next_point, to_unit
from .protocol import (
    ExperimentClient,
    ExperimentRequest,
    ExperimentResponse,
    HttpTransport,
    LabService,
    LoopbackTransport,
    serve,
)
from .virtual_lab import ElectrodeModel, LabConfig, SurfaceParams, new_lab

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
LOG_NAME = "campaign.jsonl"
CSV_NAME = "campaign.csv"
BASELINE = Electrolyte.from_fractions(0.30, 0.0, 0.70, 1.1)
CSV_COLUMNS = (
    "step",
    "kind",
    "w_ec",
    "w_dmc",
    "w_emc",
    "molality",
    "conductivity_ms_cm",
    "temperature_c",
    "density_g_ml",
    "best_so_far",
)


@dataclass(frozen=True)
class CampaignConfig:
    grid_bounds: tuple = DEFAULT_GRID_BOUNDS
    grid_levels: tuple = DEFAULT_LEVELS
    planner: PlannerConfig = PlannerConfig()
    lab: LabConfig = LabConfig()
    feeders: tuple | None = None
    budget: int = 40
    seed: int = 0
    campaign_id: str = "campaign"
    baseline: Electrolyte | None = BASELINE
    transport: str = "loopback"
    host: str = "127.0.0.1"
    port: int = 0
    out_dir: str | None = field(default=None, compare=False)

    def __post_init__(self):
        size = int(np.prod(self.grid_levels))
        if self.budget < 0:
            raise ValueError("budget must be non-negative")
        if self.budget > size:
            raise ValueError(f"budget {self.budget} exceeds grid size {size}")
        if self.transport not in ("loopback", "http"):
            raise ValueError("transport must be 'loopback' or 'http'")

    def lab_config(self) -> LabConfig:
        """Lab settings with the campaign seed folded in."""
        return replace(self.lab, seed=int(np.random.SeedSequence([self.seed, 0x1AB]).generate_state(1)[0]))

    def make_feeders(self):
        if self.feeders is None:
            return default_feeders(self.lab.feeder_inventory_ml, self.lab.density)
        return [
            make_feeder(
                f["id"], f["w_ec"], f["w_dmc"], f["w_emc"], f["molality"], f["inventory_ml"],
                self.lab.density, f.get("density"),
            )
            for f in self.feeders
        ]

    # -- snapshot ---------------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("out_dir")
        d["planner"]["cycle"] = [k.value for k in self.planner.cycle]
        d["baseline"] = _electrolyte_dict(self.baseline) if self.baseline is not None else None
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict, out_dir=None) -> "CampaignConfig":
        lab = dict(d["lab"])
        lab["surface"] = SurfaceParams(**lab["surface"])
        lab["density"] = DensityModel(**lab["density"])
        lab["electrode"] = ElectrodeModel(**lab["electrode"])
        lab["temp_range"] = tuple(lab["temp_range"])
        planner = dict(d["planner"])
        planner["cycle"] = tuple(planner["cycle"])
        base = d.get("baseline")
        return cls(
            grid_bounds=tuple(tuple(b) for b in d["grid_bounds"]),
            grid_levels=tuple(d["grid_levels"]),
            planner=PlannerConfig(**planner),
            lab=LabConfig(**lab),
            feeders=tuple(d["feeders"]) if d.get("feeders") is not None else None,
            budget=d["budget"],
            seed=d["seed"],
            campaign_id=d["campaign_id"],
            baseline=_electrolyte_from(base) if base else None,
            transport=d.get("transport", "loopback"),
            host=d.get("host", "127.0.0.1"),
            port=d.get("port", 0),
            out_dir=out_dir,
        )


def _electrolyte_dict(e: Electrolyte) -> dict:
    return {"w_ec": e.blend.w_ec, "w_dmc": e.blend.w_dmc, "w_emc": e.blend.w_emc, "molality": e.molality}


def _electrolyte_from(d: dict) -> Electrolyte:
    return Electrolyte.from_fractions(d["w_ec"], d["w_dmc"], d["w_emc"], d["molality"])


@dataclass
class CampaignLog:
    config: dict
    entries: list = field(default_factory=list)
    reference: dict | None = None
    summary: dict | None = None

    def reported(self) -> list:
        """Reported conductivity per entry (None for failed experiments)."""
        return [e["response"].get("conductivity_ms_cm") if e["response"]["status"] == "ok" else None for e in self.entries]


def _line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, allow_nan=False) + "\n"


def _append(path: Path, record: dict) -> None:
    with path.open("a", encoding="utf-8") as fh:
        fh.write(_line(record))
        fh.flush()
        os.fsync(fh.fileno())


def read_log(path) -> CampaignLog:
    """Parse a log file; a trailing partial line (interrupted write) is ignored."""
    path = Path(path)
    out = None
    with path.open("r", encoding="utf-8") as fh:
        for raw in fh:
            if not raw.endswith("\n"):
                break
            rec = json.loads(raw)
            kind = rec.get("type")
            if kind == "header":
                if rec.get("schema_version") != SCHEMA_VERSION:
                    raise ValueError(f"unsupported log schema {rec.get('schema_version')}")
                out = CampaignLog(rec["config"])
            elif out is None:
                raise ValueError("log does not start with a header")
            elif kind == "reference":
                out.reference = rec
            elif kind == "entry":
                if rec["step"] != len(out.entries) + 1:
                    raise ValueError(f"entry step {rec['step']} out of order")
                out.entries.append(rec)
            elif kind == "summary":
                out.summary = rec
    if out is None:
        raise ValueError(f"{path} holds no campaign header")
    return out


def _valid_prefix_bytes(path: Path) -> bytes:
    data = path.read_bytes()
    cut = data.rfind(b"\n")
    return data[: cut + 1] if cut >= 0 else b""


class _Loop:
    """Everything needed to drive one campaign against one instrument."""

    def __init__(self, cfg: CampaignConfig, client: ExperimentClient):
        self.cfg = cfg
        self.client = client
        self.grid = enumerate_grid(cfg.grid_bounds, cfg.grid_levels)
        self.obs = ObservationSet()
        self.attempted: set = set()
        self.best = None

    def reference_record(self) -> dict | None:
        if self.cfg.baseline is None:
            return None
        req = ExperimentRequest(f"{self.cfg.campaign_id}-reference", 1, self.cfg.baseline)
        resp = self.client.submit(req)
        return {"type": "reference", "request": req.to_dict(), "response": resp.to_dict()}

    def step(self, k: int) -> dict:
        rng = np.random.default_rng([self.cfg.seed, k])
        axes, kind, info = next_point(self.obs, self.grid, self.cfg.planner, k, rng, exclude=self.attempted)
        req = ExperimentRequest(self.cfg.campaign_id, k, axes_to_electrolyte(axes))
        resp = self.client.submit(req)
        return self.record(k, kind.value, info, req, resp)

    def record(self, k, kind, info, req, resp) -> dict:
        idx = info["grid_index"]
        self.attempted.add(idx)
        if resp.status == "ok":
            self.obs.add(self.grid.normalized()[idx], resp.conductivity_ms_cm)
            self.best = resp.conductivity_ms_cm if self.best is None else max(self.best, resp.conductivity_ms_cm)
        return {
            "type": "entry",
            "step": k,
            "kind": kind,
            "grid_index": idx,
            "hyperparameters": info.get("hyperparameters"),
            "request": req.to_dict(),
            "response": resp.to_dict(),
            "best_so_far": self.best,
        }

    def absorb(self, entry: dict) -> None:
        """Re-apply a logged entry: resubmit it to the fresh instrument and check the outcome."""
        req = ExperimentRequest.from_dict(entry["request"])
        resp = self.client.submit(req)
        if resp.to_dict() != entry["response"]:
            raise ValueError(f"step {entry['step']}: instrument replay diverged from the log")
        info = {"grid_index": entry["grid_index"], "hyperparameters": entry["hyperparameters"]}
        rebuilt = self.record(entry["step"], entry["kind"], info, req, resp)
        if _line(rebuilt) != _line(entry):
            raise ValueError(f"step {entry['step']}: log entry is inconsistent")


class _Instrument:
    """Context manager yielding a client bound to a fresh virtual lab."""

    def __init__(self, cfg: CampaignConfig):
        self.cfg = cfg
        self.server = None

    def __enter__(self) -> ExperimentClient:
        lab_cfg = self.cfg.lab_config()
        service = LabService(new_lab(lab_cfg, self.cfg.make_feeders()), lab_cfg)
        if self.cfg.transport == "http":
            self.server = serve(service, host=self.cfg.host, port=self.cfg.port)
            return ExperimentClient(HttpTransport(self.server.url))
        return ExperimentClient(LoopbackTransport(service))

    def __exit__(self, *exc):
        if self.server is not None:
            self.server.shutdown()


def run_campaign(cfg: CampaignConfig, resume: bool = False, client: ExperimentClient | None = None) -> CampaignLog:
    """Run (or resume) a campaign; persists to ``cfg.out_dir`` when set.

    With ``resume`` the existing log's entries are replayed against a fresh
    instrument (verifying each one) and the loop continues from there.
    """
    path = Path(cfg.out_dir) / LOG_NAME if cfg.out_dir else None
    snapshot = cfg.to_dict()
    header = {"type": "header", "schema_version": SCHEMA_VERSION, "config": snapshot}

    prefix = None
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        if resume and path.exists():
            path.write_bytes(_valid_prefix_bytes(path))
            prefix = read_log(path)
            if prefix.config != snapshot:
                raise ValueError("existing log was written with a different configuration")
            if prefix.summary is not None:
                path.write_bytes(b"".join(_line(r).encode() for r in _records(prefix, summary=False)))
                prefix.summary = None
        else:
            path.write_text(_line(header), encoding="utf-8")

    if client is None:
        with _Instrument(cfg) as own_client:
            return _drive(cfg, own_client, header, prefix, path)
    return _drive(cfg, client, header, prefix, path)


def _records(clog: CampaignLog, summary=True):
    yield {"type": "header", "schema_version": SCHEMA_VERSION, "config": clog.config}
    if clog.reference is not None:
        yield clog.reference
    yield from clog.entries
    if summary and clog.summary is not None:
        yield clog.summary


def _drive(cfg, client, header, prefix, path) -> CampaignLog:
    loop = _Loop(cfg, client)
    out = CampaignLog(header["config"])

    if cfg.baseline is not None:
        ref = loop.reference_record()
        if prefix is not None and prefix.reference is not None:
            if ref != prefix.reference:
                raise ValueError("reference measurement diverged from the log")
        elif path is not None:
            _append(path, ref)
        out.reference = ref

    for entry in prefix.entries if prefix is not None else ():
        loop.absorb(entry)
        out.entries.append(entry)

    status = "complete"
    for k in range(len(out.entries) + 1, cfg.budget + 1):
        try:
            entry = loop.step(k)
        except CampaignComplete:
            status = "grid_exhausted"
            break
        out.entries.append(entry)
        if path is not None:
            _append(path, entry)
        log.info("step %d %s -> %s", k, entry["kind"], entry["response"].get("conductivity_ms_cm"))

    out.summary = {
        "type": "summary",
        "status": status,
        "entries": len(out.entries),
        "best_so_far": loop.best,
    }
    if path is not None:
        _append(path, out.summary)
        (path.parent / CSV_NAME).write_text(export_csv(out), encoding="utf-8")
    return out


def replay(log_path) -> tuple[bool, CampaignLog]:
    """Re-run a logged campaign from its header; True when byte-identical."""
    original = Path(log_path).read_bytes()
    clog = read_log(log_path)
    cfg = CampaignConfig.from_dict(clog.config)
    rerun = run_campaign(cfg)
    data = b"".join(_line(r).encode() for r in _records(rerun))
    return data == original, rerun


# -- analysis ---------------------------------------------------------------


def best_so_far(clog: CampaignLog) -> list:
    """Prefix maximum of reported conductivity, one point per entry."""
    curve, best = [], None
    for e, value in zip(clog.entries, clog.reported()):
        if value is not None:
            best = value if best is None else max(best, value)
        curve.append((e["step"], best))
    return curve


def export_csv(clog: CampaignLog) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for e, (_, best) in zip(clog.entries, best_so_far(clog)):
        c = e["request"]["composition"]
        r = e["response"]
        writer.writerow(
            [
                e["step"],
                e["kind"],
                repr(c["w_ec"]),
                repr(c["w_dmc"]),
                repr(c["w_emc"]),
                repr(c["molality_mol_kg"]),
                r.get("conductivity_ms_cm"),
                r.get("temperature_c"),
                r.get("density_g_ml"),
                best,
            ]
        )
    return buf.getvalue()


@dataclass(frozen=True)
class CandidateRule:
    kind: str
    n: int
    kappa_min: float = 0.0
    solvent: str | None = None

    def __post_init__(self):
        if self.kind not in ("top", "high_molality", "low_molality", "top_with_solvent"):
            raise ValueError(f"unknown rule kind {self.kind!r}")
        if self.n < 1 or self.kappa_min < 0:
            raise ValueError("rule needs n >= 1 and kappa_min >= 0")
        if self.kind == "top_with_solvent" and self.solvent not in ("EC", "DMC", "EMC"):
            raise ValueError("top_with_solvent needs solvent EC, DMC or EMC")


def TopConductivity(n: int) -> CandidateRule:
    return CandidateRule("top", n)


def HighMolalityAbove(kappa_min: float, n: int) -> CandidateRule:
    return CandidateRule("high_molality", n, kappa_min)


def LowMolalityAbove(kappa_min: float, n: int) -> CandidateRule:
    return CandidateRule("low_molality", n, kappa_min)


def TopWithSolventPresent(solvent: str, n: int) -> CandidateRule:
    return CandidateRule("top_with_solvent", n, solvent=solvent)


DEFAULT_RULES = (TopConductivity(3), HighMolalityAbove(10.0, 2), LowMolalityAbove(10.0, 1))


def _measurements(clog: CampaignLog):
    seen = {}
    for e in clog.entries:
        r = e["response"]
        if r["status"] != "ok":
            continue
        c = e["request"]["composition"]
        el = Electrolyte.from_fractions(c["w_ec"], c["w_dmc"], c["w_emc"], c["molality_mol_kg"])
        key = el.key()
        if key not in seen or r["conductivity_ms_cm"] > seen[key][1]:
            seen[key] = (el, r["conductivity_ms_cm"])
    return list(seen.values())


def select_candidates(clog: CampaignLog, rules=DEFAULT_RULES) -> list:
    """Apply ``rules`` in order; each rule skips compositions already picked.

    Ordering uses only the measured values and compositions, so the result
    does not depend on the order of log entries.
    """
    pool = _measurements(clog)
    picked, taken = [], set()
    for rule in rules:
        if rule.kind == "top":
            eligible = sorted(pool, key=lambda p: (-p[1], p[0].key()))
        elif rule.kind == "high_molality":
            eligible = sorted(
                (p for p in pool if p[1] > rule.kappa_min), key=lambda p: (-p[0].molality, -p[1], p[0].key())
            )
        elif rule.kind == "low_molality":
            eligible = sorted(
                (p for p in pool if p[1] > rule.kappa_min), key=lambda p: (p[0].molality, -p[1], p[0].key())
            )
        else:
            attr = {"EC": "w_ec", "DMC": "w_dmc", "EMC": "w_emc"}[rule.solvent]
            eligible = sorted(
                (p for p in pool if getattr(p[0].blend, attr) > 0), key=lambda p: (-p[1], p[0].key())
            )
        count = 0
        for el, kappa in eligible:
            if count == rule.n:
                break
            if el.key() in taken:
                continue
            taken.add(el.key())
            picked.append({"rule": rule.kind, "composition": _electrolyte_dict(el), "conductivity_ms_cm": kappa})
            count += 1
    return picked
