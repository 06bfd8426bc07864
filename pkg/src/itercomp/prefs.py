"""Preference dataset construction: noisy weighted raters rank each prompt's
gallery outputs; rankings expand on demand into winner/loser pairs."""

import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError, GenerationError
from .gallery import Gallery
from .scene import DEFAULT_ORACLE_PARAMS, ORACLES, OracleParams, Prompt, Scene, sample_prompt
from .gallery import gallery_sample

log = logging.getLogger(__name__)

PROMPT_RETRIES = 10


@dataclass(frozen=True)
class RaterSpec:
    count: int = 3
    noise_std: float = 0.02
    weights: tuple = ()

    def resolved_weights(self) -> np.ndarray:
        if self.weights:
            if len(self.weights) != self.count:
                raise ValueError("rater weights length must equal rater count")
            return np.asarray(self.weights, dtype=float)
        return np.full(self.count, 1.0 / self.count)

    def to_json(self) -> dict:
        return {"count": self.count, "noise_std": self.noise_std, "weights": list(self.weights)}

    @classmethod
    def from_json(cls, obj: dict) -> "RaterSpec":
        return cls(obj["count"], obj["noise_std"], tuple(obj.get("weights", ())))


@dataclass
class RankedImage:
    scene: Scene
    provenance: str
    rank: int
    rater_scores: list
    aggregate: float


@dataclass
class PreferenceRanking:
    prompt: Prompt
    category: str
    images: list  # RankedImage, sorted best-first (rank 1..m)

    @property
    def prompt_id(self) -> str:
        return self.prompt.prompt_id

    def __post_init__(self):
        if len(self.images) < 2:
            raise DataError("ranking needs at least 2 images")
        ranks = sorted(img.rank for img in self.images)
        if ranks != list(range(1, len(self.images) + 1)):
            raise DataError(f"ranks {ranks} are not a permutation of 1..m")


@dataclass(frozen=True)
class PreferencePair:
    prompt: Prompt
    category: str
    winner: Scene
    loser: Scene
    winner_rank: int
    loser_rank: int

    @property
    def prompt_id(self) -> str:
        return self.prompt.prompt_id

    def __post_init__(self):
        if not self.winner_rank < self.loser_rank:
            raise DataError("winner rank must be strictly better (lower) than loser rank")


@dataclass
class PreferenceDataset:
    rankings: list
    iteration: int = 0

    def by_category(self, category: str) -> list:
        return [r for r in self.rankings if r.category == category]

    def prompts(self) -> list:
        return [r.prompt for r in self.rankings]


def rate_and_rank(scenes, prompt: Prompt, category: str, rater_spec: RaterSpec,
                  rng: np.random.Generator, provenances=None,
                  oracle_params: OracleParams = DEFAULT_ORACLE_PARAMS) -> PreferenceRanking:
    """Rank scenes for one prompt by weighted Borda count over noisy raters.

    Each rater scores every scene with the category oracle plus Gaussian
    noise, ranks by score, and contributes weighted Borda points.  Ties in
    the aggregate break by mean noisy score, then by input index, so the
    result is deterministic given the rng.
    """
    m = len(scenes)
    if m < 2:
        raise DataError("need at least 2 scenes to rank")
    if provenances is None:
        provenances = [str(i) for i in range(m)]
    oracle = ORACLES[category]
    weights = rater_spec.resolved_weights()
    true_scores = np.array([oracle(prompt, s, oracle_params) for s in scenes])
    noisy = true_scores[None, :] + rater_spec.noise_std * rng.normal(size=(rater_spec.count, m))
    borda = np.zeros(m)
    for r in range(rater_spec.count):
        order = sorted(range(m), key=lambda j: (-noisy[r, j], j))
        for pos, j in enumerate(order):
            borda[j] += weights[r] * (m - 1 - pos)
    mean_noisy = noisy.mean(axis=0)
    final = sorted(range(m), key=lambda j: (-borda[j], -mean_noisy[j], j))
    images = [
        RankedImage(
            scene=scenes[j],
            provenance=str(provenances[j]),
            rank=pos + 1,
            rater_scores=[float(x) for x in noisy[:, j]],
            aggregate=float(borda[j]),
        )
        for pos, j in enumerate(final)
    ]
    return PreferenceRanking(prompt, category, images)


def expand_pairs(ranking: PreferenceRanking) -> list:
    """All m(m-1)/2 winner/loser pairs implied by one ranking."""
    images = sorted(ranking.images, key=lambda img: img.rank)
    pairs = []
    for a in range(len(images)):
        for b in range(a + 1, len(images)):
            pairs.append(
                PreferencePair(
                    prompt=ranking.prompt,
                    category=ranking.category,
                    winner=images[a].scene,
                    loser=images[b].scene,
                    winner_rank=images[a].rank,
                    loser_rank=images[b].rank,
                )
            )
    return pairs


def pair_count(m: int) -> int:
    return m * (m - 1) // 2


def _build_ranking(category: str, gallery: Gallery, rater_spec: RaterSpec,
                   rng: np.random.Generator, oracle_params: OracleParams) -> PreferenceRanking:
    last_err = None
    for _ in range(PROMPT_RETRIES):
        prompt = sample_prompt(rng, category)
        try:
            samples = gallery_sample(gallery, prompt, rng, oracle_params)
        except GenerationError as err:
            log.info("resampling prompt %s: %s", prompt.prompt_id, err)
            last_err = err
            continue
        scenes = [s for _, s in samples]
        provenances = [gallery.profiles[i].name for i, _ in samples]
        return rate_and_rank(scenes, prompt, category, rater_spec, rng, provenances, oracle_params)
    raise DataError(f"could not build a {category} ranking after {PROMPT_RETRIES} prompts: {last_err}")


def build_dataset(prompt_counts: dict, gallery: Gallery, rater_spec: RaterSpec,
                  rng: np.random.Generator,
                  oracle_params: OracleParams = DEFAULT_ORACLE_PARAMS):
    """Dataset of prompt_counts[category] rankings per category, plus stats."""
    rankings = []
    for category in sorted(prompt_counts):
        count = prompt_counts[category]
        streams = rng.spawn(count)
        for child in streams:
            rankings.append(_build_ranking(category, gallery, rater_spec, child, oracle_params))
    dataset = PreferenceDataset(rankings, iteration=0)
    return dataset, dataset_stats(dataset)


@dataclass
class DatasetStats:
    per_category: dict
    totals: dict
    ranked_first: dict

    def to_json(self) -> dict:
        return {
            "per_category": self.per_category,
            "totals": self.totals,
            "ranked_first": self.ranked_first,
        }


def dataset_stats(dataset: PreferenceDataset) -> DatasetStats:
    per_category = {}
    for r in dataset.rankings:
        entry = per_category.setdefault(r.category, {"texts": 0, "images": 0, "pairs": 0})
        m = len(r.images)
        entry["texts"] += 1
        entry["images"] += m
        entry["pairs"] += pair_count(m)
    totals = {
        key: sum(entry[key] for entry in per_category.values())
        for key in ("texts", "images", "pairs")
    }
    ranked_first = ranked_first_proportions(dataset) if dataset.rankings else {}
    return DatasetStats(per_category, totals, ranked_first)


def ranked_first_proportions(dataset: PreferenceDataset) -> dict:
    """Per category: fraction of rankings won by each provenance."""
    if not dataset.rankings:
        raise DataError("empty dataset")
    result = {}
    for r in dataset.rankings:
        counts = result.setdefault(r.category, {})
        best = min(r.images, key=lambda img: img.rank)
        counts[best.provenance] = counts.get(best.provenance, 0) + 1
    return {
        category: {prov: n / sum(counts.values()) for prov, n in sorted(counts.items())}
        for category, counts in result.items()
    }


def ranking_to_json(ranking: PreferenceRanking, iteration: int) -> dict:
    return {
        "prompt_id": ranking.prompt_id,
        "category": ranking.category,
        "prompt": ranking.prompt.to_json(),
        "images": [
            {
                "scene": [float(x) for x in img.scene.vec],
                "provenance": img.provenance,
                "rank": img.rank,
                "rater_scores": img.rater_scores,
                "aggregate": img.aggregate,
            }
            for img in sorted(ranking.images, key=lambda img: img.rank)
        ],
        "iteration": iteration,
    }


def ranking_from_json(obj: dict) -> PreferenceRanking:
    prompt = Prompt.from_json(obj["prompt"])
    images = [
        RankedImage(
            scene=Scene(np.asarray(rec["scene"], dtype=float)),
            provenance=rec["provenance"],
            rank=rec["rank"],
            rater_scores=list(rec["rater_scores"]),
            aggregate=rec["aggregate"],
        )
        for rec in obj["images"]
    ]
    return PreferenceRanking(prompt, obj["category"], images)


def save_dataset(dataset: PreferenceDataset, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        for ranking in dataset.rankings:
            fh.write(json.dumps(ranking_to_json(ranking, dataset.iteration)))
            fh.write("\n")
    os.replace(tmp, path)


def load_dataset(path) -> PreferenceDataset:
    rankings = []
    iteration = 0
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            iteration = obj.get("iteration", 0)
            rankings.append(ranking_from_json(obj))
    if not rankings:
        raise DataError(f"no rankings in {path}")
    return PreferenceDataset(rankings, iteration=iteration)


def save_stats(stats: DatasetStats, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(stats.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
