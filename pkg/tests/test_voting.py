from decimal import ROUND_HALF_UP, Decimal

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ffpverify.errors import MissingVerdict, NoVisibleViews, UndefinedRatio, ValidationError
from ffpverify.lod1 import Face, Lod1Building, enumerate_faces
from ffpverify.network import BACKGROUND, FACADE, ROOF
from ffpverify.patches import FaceProjection
from ffpverify.voting import (
    CHANGED,
    INSUFFICIENT,
    UNCHANGED,
    BuildingVerdict,
    CandidateSet,
    ConfusionCounts,
    PatchVerdict,
    build_candidates,
    candidate_count,
    compute_metrics,
    confusion,
    pair_opposite,
    patch_verdict,
    read_verdicts,
    select_facade_candidates,
    select_roof_candidates,
    summary,
    vote,
    vote_single_view_mode,
    write_verdicts,
)
from published_counts import ROWS


def proj(face_id, view_id, area, visible=None, in_frustum=True, front=True):
    return FaceProjection(face_id, view_id, np.zeros((4, 2)), float(area), in_frustum, front, float(area if visible is None else visible))


def test_roof_top_quarter():
    ps = [proj("r", f"v{i}", a) for i, a in enumerate([100, 90, 80, 70, 60, 50, 40, 30])]
    chosen = select_roof_candidates(ps[::-1])
    assert [p.area for p in chosen] == [100, 90]
    assert len(select_roof_candidates(ps[:3])) == 1
    with pytest.raises(NoVisibleViews):
        select_roof_candidates([])
    with pytest.raises(NoVisibleViews):
        select_roof_candidates([proj("r", "v0", 50, visible=0), proj("r", "v1", 50, front=False)])


def test_candidate_count_rounds_up():
    assert [candidate_count(n, 4) for n in range(0, 10)] == [0, 1, 1, 1, 1, 2, 2, 2, 2, 3]
    assert candidate_count(6, 3) == 2


def test_ties_broken_by_view_id():
    ps = [proj("r", v, 10) for v in ("c", "a", "d", "b", "e")]
    assert [p.view_id for p in select_roof_candidates(ps)] == ["a", "b"]


def _facade(i, normal):
    return Face(f"b/facade{i}", "b", "facade", np.zeros((4, 3)), np.asarray(normal, dtype=float))


def test_facade_pairs_keep_larger():
    faces = [_facade(0, (0, -1, 0)), _facade(1, (1, 0, 0)), _facade(2, (0, 1, 0)), _facade(3, (-1, 0, 0))]
    areas = {0: 100, 1: 80, 2: 40, 3: 70}
    projections = {f.face_id: [proj(f.face_id, "v0", areas[k])] for k, f in enumerate(faces)}
    chosen = select_facade_candidates(faces, projections)
    assert sorted(p.face_id for p in chosen) == ["b/facade0", "b/facade1"]


def test_facade_views_top_third():
    faces = [_facade(0, (0, -1, 0)), _facade(1, (0, 1, 0))]
    projections = {"b/facade0": [proj("b/facade0", f"v{i}", 10 * (i + 1)) for i in range(6)]}
    chosen = select_facade_candidates(faces, projections)
    assert [p.view_id for p in chosen] == ["v5", "v4"]
    with pytest.raises(NoVisibleViews):
        select_facade_candidates(faces, {})


def test_unpaired_facades_always_kept():
    # L footprint: two of the six edges have no antiparallel partner left
    b = Lod1Building("L", np.array([[0, 0], [4, 0], [4, 1], [1, 1], [1, 3], [0, 3]], dtype=float), 0.0, 5.0)
    facades = enumerate_faces(b)[1:]
    groups = pair_opposite([f.normal for f in facades])
    assert sorted(groups) == [(0, 2), (1, 5), (3,), (4,)]
    # the singles win nothing against a partner, yet they stay selected
    projections = {f.face_id: [proj(f.face_id, "v0", 1.0 if k in (3, 4) else 100.0)] for k, f in enumerate(facades)}
    chosen = {p.face_id for p in select_facade_candidates(facades, projections)}
    assert {facades[3].face_id, facades[4].face_id} <= chosen and len(chosen) == 4


def _verdicts(cands, wrong=()):
    out = {}
    for p in cands.roof + cands.facades:
        exp = ROOF if "roof" in p.face_id else FACADE
        pred = BACKGROUND if (p.face_id, p.view_id) in wrong else exp
        out[(p.face_id, p.view_id)] = PatchVerdict(f"{p.face_id}@{p.view_id}", p.face_id, p.view_id, pred, exp, 0.9)
    return out


CANDS = CandidateSet("b", (proj("b/roof", "n", 50),), (proj("b/facade0", "o1", 30), proj("b/facade1", "o2", 20)))


def test_vote_examples():
    assert vote(CANDS, _verdicts(CANDS)).decision == UNCHANGED
    bad = vote(CANDS, _verdicts(CANDS, wrong={("b/facade1", "o2")}))
    assert bad.decision == CHANGED and bad.n_incorrect == 1 and bad.worst_patch_id == "b/facade1@o2"
    empty_roof = CandidateSet("b", (), CANDS.facades)
    assert vote(empty_roof, _verdicts(CANDS)).decision == INSUFFICIENT
    with pytest.raises(MissingVerdict):
        vote(CANDS, {})
    with pytest.raises(ValidationError):
        vote(CANDS, _verdicts(CANDS), mode="top")


def test_single_view_modes():
    v = _verdicts(CANDS, wrong={("b/facade0", "o1")})
    assert vote_single_view_mode("nadir", CANDS, v).decision == UNCHANGED
    assert vote(CANDS, v, "3d").decision == CHANGED
    v = _verdicts(CANDS, wrong={("b/roof", "n")})
    assert vote_single_view_mode("oblique", CANDS, v).decision == UNCHANGED
    assert vote_single_view_mode("nadir", CandidateSet("b", (), CANDS.facades), v).decision == INSUFFICIENT
    with pytest.raises(ValidationError):
        vote_single_view_mode("3d", CANDS, v)


@given(st.lists(st.booleans(), min_size=1, max_size=8), st.booleans())
def test_adding_a_candidate_never_unflags(correct, extra_correct):
    facades = tuple(proj(f"b/facade{i}", f"o{i}", 10) for i in range(len(correct)))
    cands = CandidateSet("b", (proj("b/roof", "n", 50),), facades)
    wrong = {(p.face_id, p.view_id) for p, ok in zip(facades, correct) if not ok}
    before = vote(cands, _verdicts(cands, wrong))
    more = CandidateSet("b", cands.roof, facades + (proj("b/facade99", "x", 5),))
    wrong2 = wrong | (set() if extra_correct else {("b/facade99", "x")})
    after = vote(more, _verdicts(more, wrong2))
    if before.decision == CHANGED:
        assert after.decision == CHANGED
    assert after.flagged >= before.flagged


@given(st.lists(st.floats(1, 1e4), min_size=1, max_size=12, unique=True), st.floats(1e-3, 1e3))
def test_ranking_is_scale_free(areas, k):
    ps = [proj("r", f"v{i:02d}", a) for i, a in enumerate(areas)]
    scaled = [proj("r", p.view_id, p.area * k) for p in ps]
    assert [p.view_id for p in select_roof_candidates(ps)] == [p.view_id for p in select_roof_candidates(scaled)]


def test_build_candidates_restricts_views():
    b = Lod1Building("b", np.array([[0, 0], [10, 0], [10, 10], [0, 10]], dtype=float), 0.0, 10.0)
    faces = enumerate_faces(b)
    projections = {faces[0].face_id: [proj(faces[0].face_id, "nadir", 400), proj(faces[0].face_id, "obl", 100)]}
    projections[faces[1].face_id] = [proj(faces[1].face_id, "obl", 80)]
    full = build_candidates(b, projections)
    assert [p.view_id for p in full.roof] == ["nadir"] and len(full.facades) == 1
    only = build_candidates(b, projections, views=["obl"])
    assert [p.view_id for p in only.roof] == ["obl"]
    nadir = build_candidates(b, projections, views=["nadir"])
    assert nadir.facades == () and not nadir.complete("3d") and nadir.complete("nadir")


def test_patch_verdict_confidence():
    v = patch_verdict("s", "b/roof", "n", "roof", [0.2, 0.7, 0.1])
    assert v.predicted == FACADE and v.expected == ROOF and not v.correct and v.confidence == pytest.approx(0.2)


# ---------------------------------------------------------------------------
# metrics


def _percent_half_up(num, den):
    return float((Decimal(100 * num) / Decimal(den)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


CONSISTENT = [r for r in ROWS if (r[0], r[1]) != ("Zurich", "oblique")]


@pytest.mark.parametrize("row", CONSISTENT, ids=[f"{r[0]}-{r[1]}" for r in CONSISTENT])
def test_published_percentages(row):
    _, _, tp, fn, fp, tn, cp, cn = row
    m = compute_metrics(ConfusionCounts(tp, fn, fp, tn))
    assert (m.C_P, m.C_N) == (_percent_half_up(tp, tp + fn), _percent_half_up(tn, tn + fp))
    assert abs(m.C_P - cp) <= 0.1 + 1e-9 and abs(m.C_N - cn) <= 0.1 + 1e-9


def test_zurich_oblique_counts_disagree_with_printed_ratio():
    # the printed negatives (32 + 702 = 734) differ from the other two rows
    # of the same city (763); the printed 92.0 matches 702 / 763
    _, _, tp, fn, fp, tn, cp, cn = next(r for r in ROWS if (r[0], r[1]) == ("Zurich", "oblique"))
    m = compute_metrics(ConfusionCounts(tp, fn, fp, tn))
    assert m.C_P == cp == 51.9
    assert m.C_N == 95.6 and cn == 92.0
    assert _percent_half_up(tn, 763) == 92.0
    zurich = [r for r in ROWS if r[0] == "Zurich"]
    assert sorted({r[4] + r[5] for r in zurich}) == [734, 763]


def test_metric_examples():
    assert compute_metrics(ConfusionCounts(54, 0, 72, 691)) == (m := compute_metrics(ConfusionCounts(54, 0, 72, 691)))
    assert (m.C_P, m.C_N) == (100.0, 90.6)
    m = compute_metrics(ConfusionCounts(114, 0, 161, 2231))
    assert (m.C_P, m.C_N) == (100.0, 93.3)
    m = compute_metrics(ConfusionCounts(51, 3, 46, 717))
    assert (m.C_P, m.C_N) == (94.4, 94.0)


def test_undefined_ratios():
    with pytest.raises(UndefinedRatio):
        compute_metrics(ConfusionCounts(0, 0, 1, 5))
    s = summary(ConfusionCounts(0, 0, 2, 10))
    assert s["C_P"] == "n/a" and s["C_N"] == pytest.approx(83.3)
    with pytest.raises(ValidationError):
        ConfusionCounts(-1, 0, 0, 0)


def test_confusion_is_an_associative_reduction():
    vs = [
        BuildingVerdict("a", CHANGED),
        BuildingVerdict("b", UNCHANGED),
        BuildingVerdict("c", INSUFFICIENT),
        BuildingVerdict("d", UNCHANGED),
    ]
    truth = {"a": True, "b": True, "c": False, "d": False}
    total = confusion(vs, truth)
    assert total == ConfusionCounts(TP=1, FN=1, FP=1, TN=1)
    assert confusion(vs[:2], truth) + confusion(vs[2:], truth) == total


def test_report_csv(tmp_path):
    vs = [BuildingVerdict("b2", CHANGED, (PatchVerdict("x@v", "x", "v", 2, 0, 0.1),), 1, 2), BuildingVerdict("b1", UNCHANGED, (), 1, 1)]
    write_verdicts(tmp_path / "v.csv", vs)
    rows = read_verdicts(tmp_path / "v.csv")
    assert [r["building_id"] for r in rows] == ["b1", "b2"]
    assert rows[1] == {
        "building_id": "b2",
        "decision": "changed",
        "n_roof_candidates": "1",
        "n_facade_candidates": "2",
        "n_incorrect": "1",
        "worst_patch_id": "x@v",
    }
