"""Scoring, detection metrics, robustness sweeps and report files.

All metrics are fractions in [0, 1]. A score above the threshold means
"synthetic" (label 1).
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .augment import Perturbation
from .datagen import FAKE, REAL, REAL_FAMILY, Corpus, Record
from .netarch import CLASSIFIER, DetectorNetwork, InputTooSmallError, classify_batch
from .tensorcore import ContractError

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1


class UndefinedMetricError(ValueError):
    """A metric needs both real and fake scores."""


@dataclass(frozen=True)
class ScoreEntry:
    id: str
    score: float
    label: int
    family: str


@dataclass
class ScoreSet:
    entries: list[ScoreEntry]
    errors: list[dict] = field(default_factory=list)

    @classmethod
    def from_arrays(cls, real, fake, family: str = "fake") -> "ScoreSet":
        entries = [ScoreEntry(f"r{i}", float(s), REAL, REAL_FAMILY) for i, s in enumerate(real)]
        entries += [ScoreEntry(f"f{i}", float(s), FAKE, family) for i, s in enumerate(fake)]
        return cls(entries)

    def reals(self) -> np.ndarray:
        return np.array([e.score for e in self.entries if e.label == REAL], dtype=np.float64)

    def fakes(self, family: str | None = None) -> np.ndarray:
        return np.array([e.score for e in self.entries
                         if e.label == FAKE and (family is None or e.family == family)], dtype=np.float64)

    def families(self) -> list[str]:
        return sorted({e.family for e in self.entries if e.label == FAKE})

    def for_family(self, family: str) -> "ScoreSet":
        """Shared reals plus the fakes of one family."""
        return ScoreSet([e for e in self.entries if e.label == REAL or e.family == family])

    def to_dicts(self) -> list[dict]:
        return [{"id": e.id, "score": e.score, "label": e.label, "family": e.family} for e in self.entries]


def _split(scores: ScoreSet) -> tuple[np.ndarray, np.ndarray]:
    real, fake = scores.reals(), scores.fakes()
    if real.size == 0 or fake.size == 0:
        raise UndefinedMetricError("metric needs at least one real and one fake score")
    return real, fake


# --------------------------------------------------------------------------
# Scoring
# --------------------------------------------------------------------------

def score_dataset(net: DetectorNetwork, corpus: Corpus, split: str = "test",
                  perturbation: Perturbation = Perturbation(), batch_size: int = 32) -> ScoreSet:
    """Classify every record of ``split`` at its native (post-perturbation) resolution.

    Same-sized images are batched together; images smaller than the
    network minimum are recorded in ``errors`` and skipped.
    """
    if net.head_kind != CLASSIFIER:
        raise ContractError("score_dataset needs a classifier head")
    records = corpus.split(split)
    prepared: list[tuple[Record, np.ndarray]] = []
    errors = []
    for rec in records:
        img = perturbation.apply(corpus.image(rec))
        try:
            net.check_input(*img.shape[:2])
        except InputTooSmallError as exc:
            errors.append({"id": rec.id, "error": str(exc)})
            continue
        prepared.append((rec, img))
    scores: dict[str, float] = {}
    by_shape: dict[tuple[int, int], list[tuple[Record, np.ndarray]]] = {}
    for rec, img in prepared:
        by_shape.setdefault(img.shape[:2], []).append((rec, img))
    for group in by_shape.values():
        for i in range(0, len(group), batch_size):
            part = group[i:i + batch_size]
            out = classify_batch(net, [im for _, im in part])
            for (rec, _), s in zip(part, out):
                scores[rec.id] = float(s)
    entries = [ScoreEntry(r.id, scores[r.id], int(r.label), r.family) for r, _ in prepared]
    if errors:
        log.warning("%d images skipped (below network minimum) under %s", len(errors), perturbation.label)
    return ScoreSet(entries, errors)


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------

def accuracy_at(scores: ScoreSet, threshold: float = 0.5) -> float:
    if not scores.entries:
        raise UndefinedMetricError("accuracy needs at least one score")
    correct = sum((e.score > threshold) == (e.label == FAKE) for e in scores.entries)
    return correct / len(scores.entries)


def balanced_accuracy_at(scores: ScoreSet, threshold: float) -> float:
    real, fake = _split(scores)
    return 0.5 * (np.count_nonzero(real <= threshold) / real.size + np.count_nonzero(fake > threshold) / fake.size)


def auc(scores: ScoreSet) -> float:
    """Mann-Whitney AUC: P(fake > real) with ties counted one half, via sorting."""
    real, fake = _split(scores)
    r = np.sort(real)
    below = np.searchsorted(r, fake, side="left")
    not_above = np.searchsorted(r, fake, side="right")
    # twice the pair count keeps everything in exact integers
    twice = int(np.sum(below, dtype=np.int64) * 2 + np.sum(not_above - below, dtype=np.int64))
    return twice / (2 * real.size * fake.size)


def auc_bruteforce(scores: ScoreSet) -> float:
    real, fake = _split(scores)
    twice = 0
    for f in fake:
        for r in real:
            twice += 2 if f > r else (1 if f == r else 0)
    return twice / (2 * real.size * fake.size)


def roc_curve(scores: ScoreSet) -> list[tuple[float, float]]:
    """(false-alarm rate, detection rate) for thresholds from above the max score down to the min."""
    real, fake = _split(scores)
    pts = [(0.0, 0.0)]
    for t in np.unique(np.concatenate([real, fake]))[::-1]:
        pts.append((np.count_nonzero(real >= t) / real.size, np.count_nonzero(fake >= t) / fake.size))
    return pts


@dataclass(frozen=True)
class PdResult:
    threshold: float
    detection: float
    false_alarm: float


def pd_at_far(scores: ScoreSet, far: float) -> PdResult:
    """Detection rate at the smallest real-score threshold whose false-alarm rate is <= ``far``.

    A real image is a false alarm when its score is strictly above the
    threshold; no interpolation between scores.
    """
    if not 0.0 < far < 1.0:
        raise ContractError(f"far must be in (0, 1), got {far}")
    real, fake = _split(scores)
    r = np.sort(real)
    n = r.size
    for t in np.unique(r):
        fa = (n - np.searchsorted(r, t, side="right")) / n
        if fa <= far:
            return PdResult(float(t), np.count_nonzero(fake > t) / fake.size, float(fa))
    raise AssertionError("the largest real score always has zero false alarms")


def histogram(scores: ScoreSet, bins: int = 20) -> dict[str, list[int]]:
    """Equal-width bins over [0, 1] per group (``real`` and each fake family).

    Bins are half-open ``[lo, hi)`` except the last, which includes 1.0.
    """
    if bins < 2:
        raise ContractError(f"bins must be >= 2, got {bins}")
    groups: dict[str, list[float]] = {}
    for e in scores.entries:
        key = REAL_FAMILY if e.label == REAL else e.family
        groups.setdefault(key, []).append(e.score)
    out = {}
    for key in sorted(groups):
        s = np.asarray(groups[key])
        idx = np.minimum(np.floor(s * bins).astype(int), bins - 1)
        out[key] = np.bincount(idx, minlength=bins).tolist()
    return out


def best_balanced_threshold(scores: ScoreSet) -> tuple[float, float]:
    """Exhaustive search over distinct scores; ties go to the lowest threshold."""
    real, fake = _split(scores)
    best_t, best_b = None, -1.0
    for t in np.unique(np.concatenate([real, fake])):
        b = balanced_accuracy_at(scores, float(t))
        if b > best_b:
            best_t, best_b = float(t), b
    return best_t, best_b


@dataclass
class ThresholdSpread:
    thresholds: dict[str, float]
    spread: float
    skipped: list[str] = field(default_factory=list)


def per_family_threshold_spread(scores: ScoreSet, families: Sequence[str] | None = None) -> ThresholdSpread:
    """Balanced-accuracy-optimal threshold per family and their range (max - min).

    ``families`` defaults to every family with fake scores; listed families
    without fakes are skipped with a warning.
    """
    thresholds = {}
    skipped = []
    for fam in (families if families is not None else scores.families()):
        sub = scores.for_family(fam)
        if sub.fakes().size == 0:
            log.warning("family %s has no fake scores; skipped", fam)
            skipped.append(fam)
            continue
        thresholds[fam], _ = best_balanced_threshold(sub)
    vals = list(thresholds.values())
    spread = (max(vals) - min(vals)) if vals else 0.0
    return ThresholdSpread(thresholds, float(spread), skipped)


def family_metrics(scores: ScoreSet, threshold: float = 0.5) -> dict[str, float]:
    pd1 = pd_at_far(scores, 0.01)
    pd10 = pd_at_far(scores, 0.10)
    return {
        "accuracy": accuracy_at(scores, threshold),
        "auc": auc(scores),
        "pd_at_1": pd1.detection,
        "pd_at_10": pd10.detection,
        "n_real": int(scores.reals().size),
        "n_fake": int(scores.fakes().size),
    }


def metrics_by_family(scores: ScoreSet, threshold: float = 0.5) -> dict[str, dict[str, float]]:
    """Per-family metrics (shared reals) plus an equal-weight ``avg`` row."""
    out = {fam: family_metrics(scores.for_family(fam), threshold) for fam in scores.families()}
    if out:
        keys = ("accuracy", "auc", "pd_at_1", "pd_at_10")
        out["avg"] = {k: float(np.mean([out[f][k] for f in scores.families()])) for k in keys}
    return out


# --------------------------------------------------------------------------
# Robustness sweep
# --------------------------------------------------------------------------

@dataclass
class SweepCell:
    perturbation: str
    accuracy: float | None
    auc: float | None
    n_scored: int
    n_errors: int
    error: str | None = None
    by_family: dict[str, dict[str, float]] = field(default_factory=dict)


def robustness_sweep(net: DetectorNetwork, corpus: Corpus, grid: Sequence[Perturbation],
                     split: str = "test", threshold: float = 0.5) -> list[SweepCell]:
    """One scoring pass per perturbation; the unperturbed baseline is always included first."""
    if not grid:
        raise ContractError("sweep grid must not be empty")
    cells = [Perturbation()] + [p for p in grid if p.kind != "none"]
    out = []
    for p in cells:
        try:
            s = score_dataset(net, corpus, split, p)
            by_fam = {f: {"accuracy": accuracy_at(s.for_family(f), threshold), "auc": auc(s.for_family(f))}
                      for f in s.families()}
            out.append(SweepCell(str(p), accuracy_at(s, threshold), auc(s), len(s.entries), len(s.errors),
                                 by_family=by_fam))
        except (ValueError, UndefinedMetricError) as exc:
            log.warning("sweep cell %s failed: %s", p, exc)
            out.append(SweepCell(str(p), None, None, 0, 0, error=str(exc)))
    return out


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------

@dataclass
class MetricsReport:
    metrics: dict[str, dict[str, float]]
    histogram: dict[str, list[int]]
    threshold_spread: dict
    sweep: list[dict]
    config: dict
    seed: int
    bins: int = 20
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "config": self.config,
            "metrics": self.metrics,
            "histogram": {"bins": self.bins, "counts": self.histogram},
            "threshold_spread": self.threshold_spread,
            "sweep": self.sweep,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {d.get('schema_version')}")
        return cls(metrics=d["metrics"], histogram=d["histogram"]["counts"], threshold_spread=d["threshold_spread"],
                   sweep=d["sweep"], config=d["config"], seed=d["seed"], bins=d["histogram"]["bins"])


def build_report(scores: ScoreSet, sweep: Sequence[SweepCell] | None, config: dict, seed: int,
                 bins: int = 20, threshold: float = 0.5) -> MetricsReport:
    spread = per_family_threshold_spread(scores)
    return MetricsReport(
        metrics=metrics_by_family(scores, threshold),
        histogram=histogram(scores, bins),
        threshold_spread={"thresholds": spread.thresholds, "spread": spread.spread},
        sweep=[sweep_cell_dict(c) for c in (sweep or [])],
        config=config,
        seed=seed,
        bins=bins,
    )


def sweep_cell_dict(c: SweepCell) -> dict:
    return {"perturbation": c.perturbation, "accuracy": c.accuracy, "auc": c.auc, "n_scored": c.n_scored,
            "n_errors": c.n_errors, "error": c.error, "by_family": c.by_family}


def _csv(rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else ("" if v is None else v) for v in row])
    return buf.getvalue()


def write_report(report: MetricsReport, out_dir: str | Path) -> list[Path]:
    """``report.json`` plus ``metrics.csv``, ``sweep.csv`` and ``histogram.csv``; byte-stable."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "report.json": json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n",
        "metrics.csv": _csv([["family", "metric", "value"]] +
                            [[fam, k, v] for fam, m in report.metrics.items() for k, v in m.items()]),
        "sweep.csv": _csv([["perturbation", "accuracy", "auc", "n_scored", "n_errors"]] +
                          [[c["perturbation"], c["accuracy"], c["auc"], c["n_scored"], c["n_errors"]]
                           for c in report.sweep]),
        "histogram.csv": _csv([["group", "bin", "lower", "upper", "count"]] +
                              [[g, i, i / report.bins, (i + 1) / report.bins, n]
                               for g, counts in report.histogram.items() for i, n in enumerate(counts)]),
    }
    paths = []
    for name, text in files.items():
        p = out / name
        p.write_text(text, encoding="utf-8")
        paths.append(p)
    return paths


def read_report(out_dir: str | Path) -> MetricsReport:
    return MetricsReport.from_dict(json.loads((Path(out_dir) / "report.json").read_text(encoding="utf-8")))
