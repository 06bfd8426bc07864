import csv
import dataclasses
import json
import os

import numpy as np
import pytest

from itercomp.config import default_config
from itercomp.errors import DataError
from itercomp.gallery import GeneratorProfile
from itercomp.iterate import (
    _insert_position,
    expand_dataset,
    median_insert_rank,
    rank_insert,
    run_itercomp,
)
from itercomp.prefs import PreferenceDataset, RankedImage
from itercomp.reward import reward_score
from itercomp.rng import substream
from itercomp.scene import decode_scene


class TestInsertPosition:
    def test_spec_example(self):
        assert _insert_position([5, 4, 3, 2, 1, 0], 2.5) == 4

    def test_below_all_appends(self):
        assert _insert_position([5, 4, 3], -1.0) == 4

    def test_above_all_leads(self):
        assert _insert_position([5, 4, 3], 9.0) == 1

    def test_tie_places_new_after_tied_image(self):
        assert _insert_position([5, 3, 1], 3.0) == 3

    def test_empty_scores(self):
        assert _insert_position([], 1.0) == 1


def make_new_image(scene_vec, provenance="policy-iter-1"):
    return RankedImage(decode_scene(scene_vec), provenance, rank=0, rater_scores=[], aggregate=0.0)


class TestRankInsert:
    def test_length_grows_and_old_order_preserved(self, small_dataset, small_rewards):
        rng = substream(0, "ri")
        for ranking in small_dataset.rankings[:30]:
            rm = small_rewards[ranking.category]
            new = make_new_image(rng.normal(0.5, 0.3, size=18))
            updated = rank_insert(ranking, new, rm)
            assert len(updated.images) == len(ranking.images) + 1
            old_order = [img.provenance for img in sorted(ranking.images, key=lambda i: i.rank)]
            new_order = [
                img.provenance
                for img in sorted(updated.images, key=lambda i: i.rank)
                if img.provenance != "policy-iter-1"
            ]
            assert new_order == old_order

    def test_insertion_rank_matches_score_count(self, small_dataset, small_rewards):
        ranking = small_dataset.rankings[0]
        rm = small_rewards[ranking.category]
        rng = substream(1, "ri")
        new = make_new_image(rng.normal(0.5, 0.3, size=18))
        new_score = reward_score(rm, ranking.prompt, new.scene)
        existing = [reward_score(rm, ranking.prompt, img.scene) for img in ranking.images]
        updated = rank_insert(ranking, new, rm)
        inserted = next(i for i in updated.images if i.provenance == "policy-iter-1")
        assert inserted.rank == 1 + sum(s >= new_score for s in existing)
        assert inserted.aggregate == pytest.approx(new_score)

    def test_category_mismatch_rejected(self, small_dataset, small_rewards):
        ranking = next(r for r in small_dataset.rankings if r.category == "attribute")
        with pytest.raises(DataError):
            rank_insert(ranking, make_new_image(np.zeros(18)), small_rewards["spatial"])


class TestExpandDataset:
    @pytest.fixture()
    def tagged(self, small_dataset, small_rewards, small_pretrained):
        model, _ = small_pretrained
        model = model.copy()
        model.iteration = 1
        rms = {}
        for cat, rm in small_rewards.items():
            rm = dataclasses.replace(rm)
            rm.iteration = 1
            rms[cat] = rm
        subset = PreferenceDataset(small_dataset.rankings[:40], iteration=0)
        return subset, model, rms

    def test_every_ranking_gains_one_image(self, tagged):
        dataset, model, rms = tagged
        out = expand_dataset(dataset, model, rms, substream(2, "ex"))
        assert out.iteration == 1
        assert all(len(r.images) == 7 for r in out.rankings)
        for r in out.rankings:
            assert sum(img.provenance == "policy-iter-1" for img in r.images) == 1

    def test_rank_preservation_subsequence(self, tagged):
        dataset, model, rms = tagged
        out = expand_dataset(dataset, model, rms, substream(3, "ex"))
        for before, after in zip(dataset.rankings, out.rankings):
            old = [img.provenance for img in sorted(before.images, key=lambda i: i.rank)]
            new = [
                img.provenance
                for img in sorted(after.images, key=lambda i: i.rank)
                if not img.provenance.startswith("policy-")
            ]
            assert new == old

    def test_expansion_is_deterministic(self, tagged):
        dataset, model, rms = tagged
        a = expand_dataset(dataset, model, rms, substream(4, "ex"))
        b = expand_dataset(dataset, model, rms, substream(4, "ex"))
        for ra, rb in zip(a.rankings, b.rankings):
            assert [i.rank for i in ra.images] == [i.rank for i in rb.images]
            assert np.array_equal(ra.images[-1].scene.vec, rb.images[-1].scene.vec)

    def test_gallery_additions_also_inserted(self, tagged):
        dataset, model, rms = tagged
        extra = GeneratorProfile("late-join", 0.05, 0.05, 0.05, 0.02)
        out = expand_dataset(dataset, model, rms, substream(5, "ex"), new_profiles=[extra])
        assert all(len(r.images) == 8 for r in out.rankings)
        for r in out.rankings:
            assert sum(img.provenance == "late-join" for img in r.images) == 1

    def test_untagged_model_rejected(self, small_dataset, small_rewards, small_pretrained):
        model, _ = small_pretrained  # iteration 0, not 1
        with pytest.raises(DataError):
            expand_dataset(small_dataset, model, small_rewards, substream(6, "ex"))

    def test_median_insert_rank(self, tagged):
        dataset, model, rms = tagged
        out = expand_dataset(dataset, model, rms, substream(7, "ex"))
        med = median_insert_rank(out, 1)
        assert 1.0 <= med <= 7.0
        with pytest.raises(DataError):
            median_insert_rank(out, 9)


def tiny_run_config(tmp_path, seed=21):
    config = default_config(seed=seed)
    config.prompt_counts = {"attribute": 8, "spatial": 8, "nonspatial": 8}
    config.reward = dataclasses.replace(
        config.reward, epochs_first_iteration=2, epochs_per_iteration=1
    )
    config.diffusion = dataclasses.replace(config.diffusion, pretrain_steps=250)
    config.refl = dataclasses.replace(config.refl, prompts_per_category=10, passes=1)
    config.eval = dataclasses.replace(config.eval, prompts_per_category=8, bootstrap_samples=50)
    config.iterations = 2
    config.workdir = str(tmp_path / "run")
    return config


class TestRunItercomp:
    def test_tiny_run_produces_all_artifacts(self, tmp_path):
        config = tiny_run_config(tmp_path)
        report = run_itercomp(config)
        assert len(report.rows) == 3  # iteration 0 + 2 feedback iterations
        assert report.rows[0]["median_policy_insert_rank"] is None
        for k, row in enumerate(report.rows):
            assert row["iteration"] == k
            assert 0.0 <= row["composite"] <= 1.0
        for k in range(3):
            d = os.path.join(config.workdir, f"iter_{k}")
            assert os.path.exists(os.path.join(d, "prefs.jsonl"))
            assert os.path.exists(os.path.join(d, "base.json"))
            assert os.path.exists(os.path.join(d, "metrics.json"))
            if k > 0:
                for short in ("attr", "spatial", "nonspatial"):
                    assert os.path.exists(os.path.join(d, f"rm_{short}.json"))
        assert os.path.exists(os.path.join(config.workdir, "report.csv"))
        assert os.path.exists(os.path.join(config.workdir, "config.json"))

    def test_report_csv_schema(self, tmp_path):
        config = tiny_run_config(tmp_path)
        run_itercomp(config)
        with open(os.path.join(config.workdir, "report.csv")) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3
        assert list(rows[0]) == [
            "iteration", "oracle_attr", "oracle_spatial", "oracle_nonspatial", "composite",
            "rm_acc_attr", "rm_acc_spatial", "rm_acc_nonspatial", "median_policy_insert_rank",
        ]
        assert rows[0]["median_policy_insert_rank"] == ""
        assert rows[1]["median_policy_insert_rank"] != ""

    def test_zero_iterations_gives_baseline_only(self, tmp_path):
        config = tiny_run_config(tmp_path)
        config.iterations = 0
        report = run_itercomp(config)
        assert len(report.rows) == 1
        metrics = json.load(open(os.path.join(config.workdir, "iter_0", "metrics.json")))
        assert "pretrain" in metrics and "dataset_stats" in metrics

    def test_rerun_is_bit_identical(self, tmp_path):
        config_a = tiny_run_config(tmp_path / "a")
        config_b = tiny_run_config(tmp_path / "b")
        run_itercomp(config_a)
        run_itercomp(config_b)
        for rel in ("report.csv", "iter_0/prefs.jsonl", "iter_1/prefs.jsonl",
                    "iter_1/base.json", "iter_1/rm_attr.json", "iter_2/metrics.json"):
            a = open(os.path.join(config_a.workdir, rel), "rb").read()
            b = open(os.path.join(config_b.workdir, rel), "rb").read()
            assert a == b, rel

    def test_resume_reuses_artifacts_and_matches(self, tmp_path):
        config = tiny_run_config(tmp_path)
        report_full = run_itercomp(config)
        # wipe the last iteration, resume, and compare the final report
        import shutil

        shutil.rmtree(os.path.join(config.workdir, "iter_2"))
        report_resumed = run_itercomp(config, resume=True)
        assert report_full.rows == report_resumed.rows

    def test_dataset_growth_per_iteration(self, tmp_path):
        config = tiny_run_config(tmp_path)
        run_itercomp(config)
        from itercomp.prefs import load_dataset

        for k, expected_m in ((0, 6), (1, 7), (2, 8)):
            ds = load_dataset(os.path.join(config.workdir, f"iter_{k}", "prefs.jsonl"))
            assert all(len(r.images) == expected_m for r in ds.rankings)

    def test_no_future_leakage_in_tags(self, tmp_path):
        config = tiny_run_config(tmp_path)
        run_itercomp(config)
        for k in (1, 2):
            rm = json.load(open(os.path.join(config.workdir, f"iter_{k}", "rm_attr.json")))
            ds_iter = json.load(
                open(os.path.join(config.workdir, f"iter_{k - 1}", "prefs.jsonl"))
            ) if False else None
            assert rm["iteration"] == k
            with open(os.path.join(config.workdir, f"iter_{k - 1}", "prefs.jsonl")) as fh:
                first = json.loads(fh.readline())
            assert first["iteration"] == k - 1
