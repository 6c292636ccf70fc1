"""Candidate selection, all-correct voting and verification metrics.

A building is kept as unchanged only if every patch in its candidate sets is
classified as the class its face should show. Roof candidates are the best
quarter of the views that see the roof; for each pair of opposite façades
the better-visible one is kept and its best third of views is used.
"""

from __future__ import annotations

import csv
import io as _io
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import io
from .errors import MissingVerdict, NoVisibleViews, UndefinedRatio, ValidationError
from .lod1 import enumerate_faces
from .network import FACADE, ROOF
from .patches import FaceProjection

UNCHANGED = "unchanged"
CHANGED = "changed"
INSUFFICIENT = "insufficient-evidence"
MODES = ("nadir", "oblique", "3d")
PAIR_DOT = -0.9


def _rank(projections: Iterable[FaceProjection]) -> list:
    """Sort by projected area descending, ties by view id."""
    return sorted(projections, key=lambda p: (-p.area, p.view_id))


def _visible(projections):
    return [p for p in projections if p.in_frustum and p.front_facing and p.visible_area > 0]


def candidate_count(n: int, fraction: int) -> int:
    return max(1, math.ceil(n / fraction)) if n > 0 else 0


def select_roof_candidates(projections: Sequence[FaceProjection]) -> tuple:
    """Top quarter (at least one) of the views that see the roof."""
    vis = _visible(projections)
    if not vis:
        raise NoVisibleViews("roof not visible in any view")
    return tuple(_rank(vis)[: candidate_count(len(vis), 4)])


def pair_opposite(normals) -> list:
    """Greedy pairing of antiparallel normals.

    Each façade is matched with the not-yet-paired façade whose normal is
    most opposite, provided their dot product is below ``PAIR_DOT``.
    Returns a list of groups, each a tuple of one or two indices.
    """
    n = np.asarray(normals, dtype=np.float64)
    free = list(range(len(n)))
    groups = []
    while free:
        i = free.pop(0)
        best, best_dot = None, PAIR_DOT
        for j in free:
            d = float(n[i] @ n[j])
            if d < best_dot:
                best, best_dot = j, d
        if best is None:
            groups.append((i,))
        else:
            free.remove(best)
            groups.append((i, best))
    return groups


def select_facade_candidates(faces, projections: Mapping[str, Sequence[FaceProjection]]) -> tuple:
    """Per opposite pair keep the more visible façade, then its top third of views.

    ``faces`` are the building's façade :class:`~ffpverify.lod1.Face` objects
    and ``projections`` maps each face id to its per-view projections.
    """
    vis = [_visible(projections.get(f.face_id, ())) for f in faces]
    totals = [sum(p.visible_area for p in v) for v in vis]
    out = []
    for group in pair_opposite([f.normal for f in faces]):
        keep = max(group, key=lambda k: (totals[k], -k))
        if not vis[keep]:
            continue
        ranked = _rank(vis[keep])
        out.extend(ranked[: candidate_count(len(ranked), 3)])
    if not out:
        raise NoVisibleViews("no façade visible in any view")
    return tuple(out)


@dataclass(frozen=True)
class CandidateSet:
    building_id: str
    roof: tuple = ()
    facades: tuple = ()

    def restricted(self, mode: str) -> tuple:
        if mode == "nadir":
            return self.roof
        if mode == "oblique":
            return self.facades
        if mode == "3d":
            return self.roof + self.facades
        raise ValidationError(f"unknown mode {mode!r}")

    def complete(self, mode: str) -> bool:
        if mode == "nadir":
            return bool(self.roof)
        if mode == "oblique":
            return bool(self.facades)
        return bool(self.roof) and bool(self.facades)


def build_candidates(building, projections: Mapping[str, Sequence[FaceProjection]], views=None) -> CandidateSet:
    """Candidate sets of a :class:`~ffpverify.lod1.Lod1Building`; empty sets when unseen.

    ``views``, when given, restricts every face to projections from those
    view ids (single-view-class modes).
    """
    if views is not None:
        views = set(views)
        projections = {k: [p for p in v if p.view_id in views] for k, v in projections.items()}
    faces = enumerate_faces(building)
    try:
        roof = select_roof_candidates(projections.get(faces[0].face_id, ()))
    except NoVisibleViews:
        roof = ()
    try:
        facades = select_facade_candidates(faces[1:], projections)
    except NoVisibleViews:
        facades = ()
    return CandidateSet(building.building_id, roof, facades)


@dataclass(frozen=True)
class PatchVerdict:
    sample_id: str
    face_id: str
    view_id: str
    predicted: int
    expected: int
    confidence: float = float("nan")

    @property
    def correct(self) -> bool:
        return self.predicted == self.expected


def expected_class(kind: str) -> int:
    return ROOF if kind == "roof" else FACADE


def patch_verdict(sample_id, face_id, view_id, kind, probs) -> PatchVerdict:
    """Verdict from class probabilities; ``confidence`` is P(expected class)."""
    probs = np.asarray(probs, dtype=np.float64)
    exp = expected_class(kind)
    return PatchVerdict(sample_id, face_id, view_id, int(np.argmax(probs)), exp, float(probs[exp]))


@dataclass(frozen=True)
class BuildingVerdict:
    building_id: str
    decision: str
    verdicts: tuple = ()
    n_roof: int = 0
    n_facade: int = 0

    @property
    def n_incorrect(self) -> int:
        return sum(not v.correct for v in self.verdicts)

    @property
    def worst_patch_id(self) -> str:
        """Least confident patch, preferring incorrect ones; empty when none."""
        if not self.verdicts:
            return ""

        def key(v):
            c = v.confidence if np.isfinite(v.confidence) else 0.0
            return (v.correct, c, v.sample_id)

        return min(self.verdicts, key=key).sample_id

    @property
    def flagged(self) -> bool:
        return self.decision != UNCHANGED


def vote(candidates: CandidateSet, verdicts: Mapping, mode: str = "3d") -> BuildingVerdict:
    """All-correct rule over the candidate sets used by ``mode``.

    ``verdicts`` maps ``(face_id, view_id)`` to :class:`PatchVerdict`.
    An empty required set yields insufficient evidence, which takes
    precedence over any patch result.
    """
    if mode not in MODES:
        raise ValidationError(f"unknown mode {mode!r}")
    n_roof = len(candidates.roof) if mode != "oblique" else 0
    n_fac = len(candidates.facades) if mode != "nadir" else 0
    if not candidates.complete(mode):
        return BuildingVerdict(candidates.building_id, INSUFFICIENT, (), n_roof, n_fac)
    used = []
    for p in candidates.restricted(mode):
        key = (p.face_id, p.view_id)
        if key not in verdicts:
            raise MissingVerdict(f"no verdict for face {p.face_id} in view {p.view_id}")
        used.append(verdicts[key])
    decision = UNCHANGED if all(v.correct for v in used) else CHANGED
    return BuildingVerdict(candidates.building_id, decision, tuple(used), n_roof, n_fac)


def vote_single_view_mode(mode: str, candidates: CandidateSet, verdicts: Mapping) -> BuildingVerdict:
    """Roof-only (``nadir``) or façade-only (``oblique``) voting."""
    if mode not in ("nadir", "oblique"):
        raise ValidationError(f"single-view mode must be nadir or oblique, got {mode!r}")
    return vote(candidates, verdicts, mode)


@dataclass(frozen=True)
class ConfusionCounts:
    TP: int = 0
    FN: int = 0
    FP: int = 0
    TN: int = 0

    def __post_init__(self):
        for k in ("TP", "FN", "FP", "TN"):
            v = getattr(self, k)
            if int(v) != v or v < 0:
                raise ValidationError(f"{k} must be a non-negative integer, got {v!r}")

    def __add__(self, other):
        return ConfusionCounts(self.TP + other.TP, self.FN + other.FN, self.FP + other.FP, self.TN + other.TN)


@dataclass(frozen=True)
class Metrics:
    C_P: float
    C_N: float


def ratio_percent(num: int, den: int) -> float:
    if den == 0:
        raise UndefinedRatio("ratio with zero denominator")
    return round(100.0 * num / den, 1)


def compute_metrics(c: ConfusionCounts) -> Metrics:
    """C_P = TP / (TP + FN) and C_N = TN / (TN + FP), in percent to one decimal."""
    return Metrics(ratio_percent(c.TP, c.TP + c.FN), ratio_percent(c.TN, c.TN + c.FP))


def confusion(verdicts: Iterable[BuildingVerdict], demolished: Mapping[str, bool]) -> ConfusionCounts:
    """Positive is demolished; a building is predicted positive unless judged unchanged."""
    tp = fn = fp = tn = 0
    for v in verdicts:
        truth = bool(demolished[v.building_id])
        if truth:
            tp += v.flagged
            fn += not v.flagged
        else:
            fp += v.flagged
            tn += not v.flagged
    return ConfusionCounts(tp, fn, fp, tn)


def summary(c: ConfusionCounts) -> dict:
    """JSON-ready counts and ratios; undefined ratios become ``"n/a"``."""
    out = {"TP": c.TP, "FN": c.FN, "FP": c.FP, "TN": c.TN}
    for name, num, den in (("C_P", c.TP, c.TP + c.FN), ("C_N", c.TN, c.TN + c.FP)):
        try:
            out[name] = ratio_percent(num, den)
        except UndefinedRatio:
            out[name] = "n/a"
    return out


REPORT_FIELDS = ("building_id", "decision", "n_roof_candidates", "n_facade_candidates", "n_incorrect", "worst_patch_id")


def verdicts_csv(verdicts: Iterable[BuildingVerdict]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for v in sorted(verdicts, key=lambda v: v.building_id):
        w.writerow([v.building_id, v.decision, v.n_roof, v.n_facade, v.n_incorrect, v.worst_patch_id])
    return buf.getvalue()


def write_verdicts(path, verdicts) -> None:
    io.write_text(path, verdicts_csv(verdicts))


def read_verdicts(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
