"""Synthetic end-to-end scenarios: generate a corpus, train, evaluate, compare to thresholds."""
from __future__ import annotations

import configparser
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from scipy.ndimage import distance_transform_edt

from .data import (SplitConfig, SyntheticClassSpec, SyntheticTextureSpec, load_mask,
                   scan_mvtec_layout, write_synthetic_class)
from .metrics import coverage_at_full_precision_recall
from .model import DOMAIN_GENERALIZED, ModelConfig
from .objective import LossWeights
from .pipeline import evaluate_records, train_from_records
from .scoring import DEFAULT_SIGMA, Scorer, image_score
from .teacher import BackboneSpec, Teacher
from .trainer import TrainConfig

LOGGER = logging.getLogger(__name__)


class BudgetExceeded(RuntimeError):
    pass


@dataclass
class AcceptanceScenario:
    name: str
    classes: List[SyntheticClassSpec]
    mode: str = "standard"
    n_val: int = 20
    max_epochs: int = 40
    max_wall_clock: float = 1800.0
    seed: int = 0
    weights: str = "auto"
    input_size: int = 256
    sigma: float = DEFAULT_SIGMA
    min_auroc: Optional[float] = None
    min_coverage: Optional[float] = None
    min_localization: Optional[float] = None
    chance_auroc_tolerance: Optional[float] = None

    def __post_init__(self):
        if not self.classes:
            raise ValueError("scenario needs at least one class")
        for v in (self.min_auroc, self.min_coverage, self.min_localization,
                  self.chance_auroc_tolerance):
            if v is not None and not 0 <= v <= 1:
                raise ValueError(f"thresholds must lie in [0, 1], got {v}")
        if self.max_epochs < 1 or self.max_wall_clock <= 0:
            raise ValueError("budget must be positive")


@dataclass
class Check:
    name: str
    measured: float
    threshold: str
    passed: bool


@dataclass
class ScenarioReport:
    scenario: str
    passed: bool
    checks: List[Check] = field(default_factory=list)
    per_class: Dict[str, dict] = field(default_factory=dict)
    epochs_run: int = 0
    wall_clock: float = 0.0
    workdir: str = ""
    error: str = ""

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2))

    def lines(self) -> List[str]:
        out = [f"{'PASS' if c.passed else 'FAIL'} {self.scenario}.{c.name}: "
               f"{c.measured:.4f} (need {c.threshold})" for c in self.checks]
        if self.error:
            out.append(f"FAIL {self.scenario}: {self.error}")
        return out


# --- scenario files ---------------------------------------------------------

_TEXTURE_KEYS = {"pattern": str, "noise_std": float, "defect_magnitude": float,
                 "period": int, "contrast": float}
_CLASS_KEYS = {"n_train": int, "n_test_good": int, "n_test_defective": int,
               "defect": str, "seed": int}
_SCENARIO_KEYS = {"mode": str, "n_val": int, "max_epochs": int, "max_wall_clock": float,
                  "seed": int, "weights": str, "input_size": int, "sigma": float}
_EXPECT_KEYS = {"min_auroc": float, "min_coverage": float, "min_localization": float,
                "chance_auroc_tolerance": float}


def _take(section, allowed, where, handled=()):
    out = {}
    for key, raw in section.items():
        if key in allowed:
            out[key] = allowed[key](raw)
        elif key not in handled:
            raise ValueError(f"unknown key {key!r} in [{where}]")
    return out


def parse_scenario(text: str, name: str = "") -> AcceptanceScenario:
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_string(text)
    kwargs = {}
    if parser.has_section("scenario"):
        kwargs.update(_take(parser["scenario"], _SCENARIO_KEYS, "scenario", ("name",)))
    if parser.has_section("expect"):
        kwargs.update(_take(parser["expect"], _EXPECT_KEYS, "expect"))
    classes = []
    for section in parser.sections():
        if section in ("scenario", "expect"):
            continue
        if not section.startswith("class."):
            raise ValueError(f"unknown section [{section}]")
        sec = parser[section]
        allowed = {**_TEXTURE_KEYS, **_CLASS_KEYS}
        values = _take(sec, allowed, section, ("base_color", "defect_size"))
        tex = {k: v for k, v in values.items() if k in _TEXTURE_KEYS}
        if "base_color" in sec:
            tex["base_color"] = tuple(float(v) for v in sec["base_color"].split(","))
        if "defect_size" in sec:
            tex["defect_size"] = tuple(int(v) for v in sec["defect_size"].split(","))
        tex["size"] = kwargs.get("input_size", 256)
        cls = {k: v for k, v in values.items() if k in _CLASS_KEYS}
        classes.append(SyntheticClassSpec(section[len("class."):],
                                          SyntheticTextureSpec(**tex), **cls))
    return AcceptanceScenario(name=parser.get("scenario", "name", fallback=name),
                              classes=classes, **kwargs)


def builtin_scenarios() -> List[str]:
    return sorted(p.name[:-4] for p in resources.files("rdfabric.scenarios").iterdir()
                  if p.name.endswith(".ini"))


def load_scenario(name_or_path: str) -> AcceptanceScenario:
    path = Path(name_or_path)
    if path.suffix == ".ini" and path.exists():
        return parse_scenario(path.read_text(), path.stem)
    res = resources.files("rdfabric.scenarios") / f"{name_or_path}.ini"
    if not res.is_file():
        raise ValueError(f"unknown scenario {name_or_path!r}; built-in: {builtin_scenarios()}")
    return parse_scenario(res.read_text(), name_or_path)


# --- measurements -------------------------------------------------------------

def localization_hits(scored, sigma: float, size: int) -> List[bool]:
    """For every detected defect (score above the highest good score), is the
    map argmax within 3 sigma of the ground-truth region?"""
    max_good = scored.scores[~scored.labels].max()
    hits = []
    for rec, amap, score in zip(scored.records, scored.maps, scored.scores):
        if not rec.is_defective or score <= max_good or not rec.mask_path:
            continue
        mask = load_mask(rec.mask_path, size) > 0
        if not mask.any():
            continue
        # Euclidean distance to the nearest defect pixel; dilation radius 3 sigma
        dist = distance_transform_edt(~mask)
        hits.append(bool(dist[image_score(amap).argmax_location] <= 3 * sigma))
    return hits


def run_scenario(scenario: AcceptanceScenario, workdir) -> ScenarioReport:
    """Generate data, train, evaluate and compare against the scenario thresholds.

    Artifacts (data, checkpoints, logs, report) stay in ``workdir``.
    """
    workdir = Path(workdir)
    data_root = workdir / "data"
    report = ScenarioReport(scenario.name, passed=False, workdir=str(workdir))
    start = time.perf_counter()
    # every class gets n_val extra training images that the split holds out
    for spec in scenario.classes:
        if not (data_root / spec.name).exists():
            write_synthetic_class(data_root, replace(spec, n_train=spec.n_train + scenario.n_val))
    records = {c.name: scan_mvtec_layout(data_root, c.name) for c in scenario.classes}

    backbone = BackboneSpec(input_size=scenario.input_size, weights=scenario.weights)
    teacher = Teacher(backbone)
    dg = scenario.mode == DOMAIN_GENERALIZED
    model_cfg = ModelConfig(mode=scenario.mode, link_taps=() if dg else (0, 1),
                            input_size=scenario.input_size)
    train_cfg = TrainConfig(epochs=scenario.max_epochs, seed=scenario.seed)

    def guard(row):
        report.epochs_run = row["epoch"]
        elapsed = time.perf_counter() - start
        if elapsed > scenario.max_wall_clock:
            raise BudgetExceeded(f"wall-clock budget {scenario.max_wall_clock:.0f}s exceeded "
                                 f"after epoch {row['epoch']} ({elapsed:.0f}s)")

    groups = {"pooled": [r for c in records.values() for r in c]} if dg else records
    try:
        scorers = {}
        for group, recs in groups.items():
            n_train = sum(r.split == "train" for r in recs)
            n_val = scenario.n_val * (len(records) if dg else 1)
            split = SplitConfig(train_fraction=(n_train - n_val) / n_train,
                                seed=scenario.seed)
            ckpt = train_from_records(recs, model_cfg, backbone, train_cfg, LossWeights(),
                                      split, workdir / "models" / group, on_epoch=guard,
                                      teacher=teacher)
            scorers[group] = Scorer(teacher, ckpt.build_model(), sigma=scenario.sigma)
        for name, recs in records.items():
            scorer = scorers["pooled" if dg else name]
            ev, scored = evaluate_records(scorer, recs, name, coverage=True)
            hits = localization_hits(scored, scenario.sigma, scenario.input_size)
            report.per_class[name] = {
                "image_auroc": ev.image_auroc,
                "coverage_tol0": coverage_at_full_precision_recall(scored.scores, scored.labels, 0.0),
                "coverage": ev.coverage,
                "localization": float(np.mean(hits)) if hits else math.nan,
                "n_detected": len(hits),
                "n_good": ev.n_good, "n_defective": ev.n_defective,
            }
    except BudgetExceeded as exc:
        report.error = str(exc)
    report.wall_clock = time.perf_counter() - start
    if report.wall_clock > scenario.max_wall_clock and not report.error:
        report.error = f"wall-clock budget {scenario.max_wall_clock:.0f}s exceeded"
    _apply_thresholds(scenario, report)
    report.passed = not report.error and all(c.passed for c in report.checks)
    report.to_json(workdir / "report.json")
    return report


def _apply_thresholds(scenario: AcceptanceScenario, report: ScenarioReport) -> None:
    for name, m in report.per_class.items():
        if scenario.min_auroc is not None:
            report.checks.append(Check(f"{name}.image_auroc", m["image_auroc"],
                                       f">= {scenario.min_auroc}",
                                       m["image_auroc"] >= scenario.min_auroc))
        if scenario.min_coverage is not None:
            report.checks.append(Check(f"{name}.coverage_tol0", m["coverage_tol0"],
                                       f">= {scenario.min_coverage}",
                                       m["coverage_tol0"] >= scenario.min_coverage))
        if scenario.min_localization is not None:
            loc = m["localization"]
            report.checks.append(Check(f"{name}.localization", loc,
                                       f">= {scenario.min_localization}",
                                       not math.isnan(loc) and loc >= scenario.min_localization))
        if scenario.chance_auroc_tolerance is not None:
            tol = scenario.chance_auroc_tolerance
            report.checks.append(Check(f"{name}.chance_auroc", m["image_auroc"],
                                       f"within 0.5 +/- {tol}",
                                       abs(m["image_auroc"] - 0.5) <= tol))
