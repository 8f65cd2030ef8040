from darkadapt.experiments import (LADDER, TABLE_COLUMNS, comparison_table, evaluate_visual_baseline, subset_pool,
                                   table_csv, with_config, write_table)
from darkadapt.recognizer import ladder_configs

from conftest import tiny_train


def test_ladder_matches_recognizer_ladder():
    rcfgs = ladder_configs(tiny_train().recognizer_config(4, 8, 4))
    assert [n for n, _ in LADDER] == [n for n, _ in rcfgs]
    for (_, over), (_, rc) in zip(LADDER, rcfgs):
        cfg = tiny_train(**over).recognizer_config(4, 8, 4)
        assert (cfg.adaptive_encoder, cfg.adaptive_prompts, cfg.adaptive_classifier, cfg.tie_day_branch) == \
            (rc.adaptive_encoder, rc.adaptive_prompts, rc.adaptive_classifier, rc.tie_day_branch)


def test_with_config_rebuilds_targets_for_raw_mode(tiny_prep):
    same = with_config(tiny_prep, lam=0.03)
    assert same.pseudo is tiny_prep.pseudo and same.config.lam == 0.03
    raw = with_config(tiny_prep, raw_targets=True)
    assert raw.pseudo.dim == 81 and tiny_prep.pseudo.dim == 64


def test_subset_pool(tiny_prep):
    small = subset_pool(tiny_prep, 5, seed=0)
    assert len(small.pool_clips) == 5 == len(small.banks["pool"])
    assert [c.clip_id for c in small.pool_clips] == small.banks["pool"].ids
    assert subset_pool(tiny_prep, 10_000) is tiny_prep


def test_baseline_row(tiny_prep):
    row = evaluate_visual_baseline(tiny_prep)
    assert row["n_day"] + row["n_dark"] == len(tiny_prep.banks["test"])
    assert 0 <= row["dark"] <= 1


def test_table_outputs(tmp_path):
    rows = [dict(name="a", metric="accuracy", day=0.9, dark=0.5, gap=0.4, n_day=3, n_dark=4, seconds=1.0),
            dict(name="b", metric="accuracy", day=None, dark=0.7, gap=None, n_day=0, n_dark=4, seconds=2.0)]
    text = comparison_table(rows)
    assert text.splitlines()[0].split() == list(TABLE_COLUMNS) and "n/a" in text
    assert table_csv(rows).splitlines()[2].startswith("b,accuracy,,0.7")
    txt, csv_path = write_table(rows, tmp_path)
    assert txt.read_text() == text and csv_path.read_text() == table_csv(rows)
