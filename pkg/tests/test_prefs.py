import json

import numpy as np
import pytest

from itercomp.errors import DataError
from itercomp.gallery import default_gallery
from itercomp.prefs import (
    PreferenceDataset,
    PreferencePair,
    PreferenceRanking,
    RankedImage,
    RaterSpec,
    build_dataset,
    dataset_stats,
    expand_pairs,
    load_dataset,
    pair_count,
    ranked_first_proportions,
    rate_and_rank,
    save_dataset,
    save_stats,
)
from itercomp.rng import substream
from itercomp.scene import ORACLES, canonical_scene, decode_scene, sample_prompt


def scenes_with_scores(prompt, category, targets, rng):
    """Scenes whose oracle scores land near the requested targets, built by
    degrading the canonical scene's present flags fractionally."""
    oracle = ORACLES[category]
    canon = canonical_scene(prompt, rng)
    out = []
    for target in targets:
        vec = canon.vec.copy()
        for i in prompt.required_slots():
            vec[i * 6] = target  # present in [0, 1] scales attribute score
        out.append(decode_scene(vec))
    return out


class TestRateAndRank:
    def test_noiseless_raters_sort_by_oracle(self):
        rng = substream(0, "p")
        prompt = sample_prompt(rng, "attribute")
        scenes = scenes_with_scores(prompt, "attribute", [0.2, 0.9, 0.5, 0.7], rng)
        ranking = rate_and_rank(scenes, prompt, "attribute", RaterSpec(noise_std=0.0), rng)
        oracle = ORACLES["attribute"]
        scores = [oracle(prompt, img.scene) for img in sorted(ranking.images, key=lambda i: i.rank)]
        assert scores == sorted(scores, reverse=True)

    def test_two_identical_scenes_tie_break_by_index(self):
        rng = substream(1, "p")
        prompt = sample_prompt(rng, "attribute")
        scene = canonical_scene(prompt, rng)
        ranking = rate_and_rank([scene, scene], prompt, "attribute", RaterSpec(noise_std=0.0), rng,
                                provenances=["first", "second"])
        by_rank = sorted(ranking.images, key=lambda i: i.rank)
        assert [img.rank for img in by_rank] == [1, 2]
        assert by_rank[0].provenance == "first"

    def test_large_gap_survives_rater_noise(self):
        rng = substream(2, "p")
        wins = 0
        for _ in range(200):
            prompt = sample_prompt(rng, "attribute")
            scenes = scenes_with_scores(prompt, "attribute", [0.95, 0.7, 0.6, 0.5], rng)
            ranking = rate_and_rank(scenes, prompt, "attribute", RaterSpec(noise_std=0.02), rng)
            best = min(ranking.images, key=lambda i: i.rank)
            wins += best.provenance == "0"
        assert wins >= 198  # >= 99%

    def test_fewer_than_two_scenes_rejected(self):
        rng = substream(3, "p")
        prompt = sample_prompt(rng, "attribute")
        with pytest.raises(DataError):
            rate_and_rank([canonical_scene(prompt, rng)], prompt, "attribute", RaterSpec(), rng)

    def test_rater_scores_recorded_per_image(self):
        rng = substream(4, "p")
        prompt = sample_prompt(rng, "spatial")
        scenes = scenes_with_scores(prompt, "spatial", [0.9, 0.3], rng)
        ranking = rate_and_rank(scenes, prompt, "spatial", RaterSpec(), rng)
        for img in ranking.images:
            assert len(img.rater_scores) == 3
            assert np.all(np.isfinite(img.rater_scores))

    def test_weighted_raters_must_match_count(self):
        with pytest.raises(ValueError):
            RaterSpec(count=3, weights=(0.5, 0.5)).resolved_weights()


class TestExpandPairs:
    @pytest.mark.parametrize("m,expected", [(2, 1), (6, 15), (7, 21), (10, 45)])
    def test_pair_counts(self, m, expected, small_dataset):
        ranking = small_dataset.rankings[0]
        base = sorted(ranking.images, key=lambda i: i.rank)
        images = [
            RankedImage(base[i % len(base)].scene, str(i), i + 1, [], 0.0) for i in range(m)
        ]
        pairs = expand_pairs(PreferenceRanking(ranking.prompt, ranking.category, images))
        assert len(pairs) == expected == pair_count(m)

    def test_winner_always_ranked_better(self, small_dataset):
        for ranking in small_dataset.rankings[:40]:
            for pair in expand_pairs(ranking):
                assert pair.winner_rank < pair.loser_rank

    def test_pair_invariant_enforced(self, small_dataset):
        r = small_dataset.rankings[0]
        images = sorted(r.images, key=lambda i: i.rank)
        with pytest.raises(DataError):
            PreferencePair(r.prompt, r.category, images[0].scene, images[1].scene, 2, 1)


class TestBuildDataset:
    def test_small_dataset_accounting(self, small_dataset):
        stats = dataset_stats(small_dataset)
        assert stats.per_category["attribute"] == {"texts": 80, "images": 480, "pairs": 1200}
        assert stats.totals == {"texts": 240, "images": 1440, "pairs": 3600}

    def test_zero_prompts_gives_empty_dataset(self):
        dataset, stats = build_dataset({}, default_gallery(), RaterSpec(), substream(5, "p"))
        assert dataset.rankings == []
        assert stats.totals == {"texts": 0, "images": 0, "pairs": 0}

    def test_accounting_identity(self, small_dataset):
        stats = dataset_stats(small_dataset)
        m = 6
        for cat, entry in stats.per_category.items():
            assert entry["images"] == entry["texts"] * m
            assert entry["pairs"] == entry["texts"] * pair_count(m)

    def test_build_is_deterministic(self):
        counts = {"attribute": 5, "spatial": 5}
        a, _ = build_dataset(counts, default_gallery(), RaterSpec(), substream(6, "p"))
        b, _ = build_dataset(counts, default_gallery(), RaterSpec(), substream(6, "p"))
        for ra, rb in zip(a.rankings, b.rankings):
            assert ra.prompt == rb.prompt
            for ia, ib in zip(ra.images, rb.images):
                assert ia.rank == ib.rank and np.array_equal(ia.scene.vec, ib.scene.vec)

    def test_ranks_are_permutations(self, small_dataset):
        for r in small_dataset.rankings:
            assert sorted(img.rank for img in r.images) == list(range(1, 7))


class TestRankedFirst:
    def test_single_ranking_gives_unit_fraction(self, small_dataset):
        d = PreferenceDataset([small_dataset.rankings[0]])
        fractions = ranked_first_proportions(d)
        (cat, by_prov), = fractions.items()
        assert sum(by_prov.values()) == pytest.approx(1.0)
        assert max(by_prov.values()) == 1.0

    def test_fractions_sum_to_one_per_category(self, small_dataset):
        fractions = ranked_first_proportions(small_dataset)
        for by_prov in fractions.values():
            assert sum(by_prov.values()) == pytest.approx(1.0, abs=1e-12)

    def test_empty_dataset_rejected(self):
        with pytest.raises(DataError):
            ranked_first_proportions(PreferenceDataset([]))


class TestPersistence:
    def test_jsonl_round_trip(self, small_dataset, tmp_path):
        path = tmp_path / "prefs.jsonl"
        save_dataset(small_dataset, path)
        loaded = load_dataset(path)
        assert len(loaded.rankings) == len(small_dataset.rankings)
        assert loaded.iteration == small_dataset.iteration
        for ra, rb in zip(small_dataset.rankings, loaded.rankings):
            assert ra.prompt == rb.prompt
            for ia, ib in zip(ra.images, rb.images):
                assert ia.rank == ib.rank
                assert ia.provenance == ib.provenance
                assert np.allclose(ia.scene.vec, ib.scene.vec)

    def test_jsonl_schema(self, small_dataset, tmp_path):
        path = tmp_path / "prefs.jsonl"
        save_dataset(small_dataset, path)
        with open(path) as fh:
            first = json.loads(fh.readline())
        assert set(first) == {"prompt_id", "category", "prompt", "images", "iteration"}
        img = first["images"][0]
        assert set(img) == {"scene", "provenance", "rank", "rater_scores", "aggregate"}
        assert len(img["scene"]) == 18
        assert first["images"][0]["rank"] == 1

    def test_stats_schema(self, small_dataset, tmp_path):
        path = tmp_path / "stats.json"
        save_stats(dataset_stats(small_dataset), path)
        with open(path) as fh:
            obj = json.load(fh)
        assert set(obj) == {"per_category", "totals", "ranked_first"}
        assert obj["totals"]["pairs"] == 3600
