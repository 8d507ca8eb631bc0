import numpy as np
import pytest

from pyeiph.core_model import *
from pyeiph.scoring import (
    dataset_summary,
    diagnose,
    doucet_score,
    grade_counts,
    grade_statistics,
    round_half_away,
    ths,
)

# slide, counts by grade 0..4, printed score
TABLE = [
    ("01_EIPH", (1013, 1782, 1218, 348, 85), 126),
    ("02_EIPH", (5084, 6203, 1450, 64, 11), 72),
    ("03_EIPH", (4295, 1697, 330, 3, 0), 37),
    ("04_EIPH", (2551, 2379, 508, 10, 0), 63),
    ("05_EIPH", (1754, 634, 99, 2, 0), 34),
    ("06_EIPH", (1908, 933, 148, 3, 0), 41),
    ("07_EIPH", (48, 127, 352, 495, 51), 235),
    ("08_EIPH", (471, 290, 160, 3, 0), 67),
    ("09_EIPH", (568, 1053, 932, 1446, 753), 216),
    ("10_EIPH", (592, 2131, 4037, 3098, 527), 208),
    ("11_EIPH", (283, 553, 859, 131, 15), 148),
    ("12_EIPH", (2839, 2452, 435, 25, 0), 59),
    ("13_EIPH", (767, 302, 43, 0, 0), 35),
    ("14_EIPH", (637, 252, 70, 8, 1), 43),
    ("15_EIPH", (1995, 1062, 81, 5, 0), 39),
    ("16_EIPH", (2611, 2509, 984, 363, 24), 87),
    ("17_EIPH", (1639, 2566, 1818, 1066, 6), 133),
]


@pytest.mark.parametrize("slide,counts,printed", TABLE, ids=[t[0] for t in TABLE])
def test_table_scores(slide, counts, printed):
    result = ths(GradeCounts(counts))
    assert abs(result.rounded - printed) <= 1
    assert result.n_cells == sum(counts)
    assert result.diagnosis_confirmed == (result.rounded > 75)


def test_named_rows_exact():
    assert ths(GradeCounts((1013, 1782, 1218, 348, 85))).rounded == 126
    assert ths(GradeCounts((48, 127, 352, 495, 51))).rounded == 235
    assert ths(GradeCounts((568, 1053, 932, 1446, 753))).rounded == 216


def test_extremes():
    assert ths(GradeCounts((0, 0, 0, 0, 7))).score == 400.0
    r = ths(GradeCounts((300, 0, 0, 0, 0)))
    assert r.score == 0.0
    assert not r.diagnosis_confirmed


def test_empty_counts_rejected():
    with pytest.raises(EIPHError, match="no cells to score"):
        ths(GradeCounts())


def test_grade_counts():
    assert tuple(grade_counts([])) == (0, 0, 0, 0, 0)
    box = BoundingBox(0, 0, 10, 10)
    cells = [CellAnnotation(g, box, g) for g in GRADES]
    assert tuple(grade_counts(cells)) == (1, 1, 1, 1, 1)
    dets = [Detection.certain(box, 3), Detection.certain(box, 3)]
    assert tuple(grade_counts(dets)) == (0, 0, 0, 2, 0)


def test_diagnose_boundary():
    assert diagnose(75) is False
    assert diagnose(76) is True
    assert diagnose(0) is False
    # decided on the rounded score
    assert diagnose(75.5) is True
    assert diagnose(75.49) is False
    with pytest.raises(EIPHError):
        diagnose(401)
    with pytest.raises(EIPHError):
        diagnose(-1)


def test_round_half_away():
    assert round_half_away(0.5) == 1
    assert round_half_away(2.5) == 3
    assert round_half_away(-2.5) == -3
    assert round_half_away(2.4999) == 2


def test_doucet_recipe_matches_for_300_cells():
    rng = np.random.default_rng(3)
    for _ in range(200):
        counts = GradeCounts(tuple(rng.multinomial(300, [0.2] * 5)))
        assert doucet_score(counts) == pytest.approx(ths(counts).score, abs=1e-12)
    with pytest.raises(EIPHError):
        doucet_score(GradeCounts((1, 0, 0, 0, 0)))


def test_scale_invariance():
    counts = GradeCounts((637, 252, 70, 8, 1))
    base = ths(counts)
    for k in (2, 3, 17):
        assert ths(counts.scaled(k)).score == base.score


def test_grade_statistics_row_01():
    mu, sigma = grade_statistics(GradeCounts((1013, 1782, 1218, 348, 85)))
    assert 100 * mu == pytest.approx(ths(GradeCounts((1013, 1782, 1218, 348, 85))).score)
    assert sigma == pytest.approx(0.959, abs=5e-3)


def test_dataset_summary(make_set):
    sets = [
        make_set([(0, 0, 10, 10, 4), (20, 20, 10, 10, 0)], slide_id="a"),
        make_set([], slide_id="b"),
    ]
    df = dataset_summary(sets)
    assert list(df["slide"]) == ["a", "b"]
    assert df.loc[0, "score"] == 200
    assert df.loc[0, "grade_4"] == 1
    assert df.loc[1, "total"] == 0
