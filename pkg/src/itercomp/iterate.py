"""Outer loop: retrain reward models, run feedback finetuning, sample the
policy into every ranking, and repeat.  Pre-existing images never change
relative order when a new sample is inserted."""

import csv
import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig, save_config
from .diffusion import DiffusionModel, load_diffusion, pretrain, refl_finetune, sample, save_diffusion
from .errors import DataError
from .evaluate import evaluate_model
from .gallery import Gallery, generate
from .prefs import (
    PreferenceDataset,
    PreferenceRanking,
    RankedImage,
    build_dataset,
    dataset_stats,
    load_dataset,
    save_dataset,
    save_stats,
)
from .reward import RewardModel, load_reward, reward_score, save_reward, train_reward
from .rng import substream
from .scene import CATEGORIES, decode_scene, sample_prompt
from .errors import GenerationError

log = logging.getLogger(__name__)

REPORT_COLUMNS = [
    "iteration",
    "oracle_attr",
    "oracle_spatial",
    "oracle_nonspatial",
    "composite",
    "rm_acc_attr",
    "rm_acc_spatial",
    "rm_acc_nonspatial",
    "median_policy_insert_rank",
]

_CAT_SHORT = {"attribute": "attr", "spatial": "spatial", "nonspatial": "nonspatial"}


@dataclass
class IterationState:
    iteration: int
    dataset: PreferenceDataset
    reward_models: dict
    model: DiffusionModel
    gallery: Gallery
    history: list = field(default_factory=list)


@dataclass
class RunReport:
    seed: int
    config: dict
    rows: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)  # seconds per completed stage row

    def to_csv(self, path) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: _fmt(row.get(k)) for k in REPORT_COLUMNS})
        os.replace(tmp, path)


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return value


def _insert_position(existing_scores, new_score) -> int:
    """1 + number of existing scores >= the new score: strict winners go
    ahead of the new image, and score ties keep existing images ahead too."""
    return 1 + sum(1 for s in existing_scores if s >= new_score)


def rank_insert(ranking: PreferenceRanking, new_image: RankedImage,
                rm: RewardModel) -> PreferenceRanking:
    """Insert a new image by reward score, preserving the relative order of
    every pre-existing image."""
    if rm.category != ranking.category:
        raise DataError(
            f"reward model category {rm.category!r} != ranking category {ranking.category!r}"
        )
    images = sorted(ranking.images, key=lambda img: img.rank)
    existing_scores = [reward_score(rm, ranking.prompt, img.scene) for img in images]
    new_score = reward_score(rm, ranking.prompt, new_image.scene)
    pos = _insert_position(existing_scores, new_score)
    inserted = dataclasses.replace(new_image, rank=pos, aggregate=new_score)
    out = []
    for img in images:
        rank = img.rank if img.rank < pos else img.rank + 1
        out.append(dataclasses.replace(img, rank=rank))
    out.insert(pos - 1, inserted)
    return PreferenceRanking(ranking.prompt, ranking.category, out)


def expand_dataset(dataset: PreferenceDataset, model: DiffusionModel, reward_models: dict,
                   rng: np.random.Generator, new_profiles=(), oracle_params=None) -> PreferenceDataset:
    """Rank-insert one policy sample per ranking (plus one sample per newly
    added gallery profile); returns the next-iteration dataset."""
    k_next = dataset.iteration + 1
    if model.iteration != k_next:
        raise DataError(f"model iteration {model.iteration} != expected {k_next}")
    for rm in reward_models.values():
        if rm.iteration != k_next:
            raise DataError(f"reward model {rm.category} iteration {rm.iteration} != {k_next}")
    provenance = f"policy-iter-{k_next}"
    rankings = []
    streams = rng.spawn(len(dataset.rankings))
    for ranking, stream in zip(dataset.rankings, streams):
        rm = reward_models.get(ranking.category)
        if rm is None:
            raise DataError(f"no reward model for category {ranking.category!r}")
        try:
            raw = sample(model, ranking.prompt, stream)
        except Exception as err:
            raise DataError(f"sampling failed for prompt {ranking.prompt_id}: {err}") from err
        scene = decode_scene(raw)
        new_image = RankedImage(scene, provenance, rank=0, rater_scores=[], aggregate=0.0)
        updated = rank_insert(ranking, new_image, rm)
        for profile in new_profiles:
            try:
                extra_scene = generate(profile, ranking.prompt, stream, oracle_params) \
                    if oracle_params is not None else generate(profile, ranking.prompt, stream)
            except GenerationError as err:
                raise DataError(f"gallery addition {profile.name} failed on {ranking.prompt_id}: {err}") from err
            extra = RankedImage(extra_scene, profile.name, rank=0, rater_scores=[], aggregate=0.0)
            updated = rank_insert(updated, extra, rm)
        rankings.append(updated)
    return PreferenceDataset(rankings, iteration=k_next)


def median_insert_rank(dataset: PreferenceDataset, iteration: int) -> float:
    provenance = f"policy-iter-{iteration}"
    ranks = [
        img.rank
        for r in dataset.rankings
        for img in r.images
        if img.provenance == provenance
    ]
    if not ranks:
        raise DataError(f"no {provenance} images in dataset")
    return float(np.median(ranks))


def _iter_dir(workdir, k) -> str:
    return os.path.join(workdir, f"iter_{k}")


def _model_sampler(model):
    return lambda prompt, rng: sample(model, prompt, rng)


def _evaluate(config: RunConfig, model) -> dict:
    report = evaluate_model(
        _model_sampler(model),
        config.eval.prompts_per_category,
        substream(config.seed, "eval"),
        bootstrap_samples=config.eval.bootstrap_samples,
        oracle_params=config.oracles,
        model_id=f"iter-{model.iteration}",
    )
    return report.to_json()


def _refl_prompt_sequence(config: RunConfig, k: int):
    stream = substream(config.seed, "refl-prompts", k)
    base = [
        sample_prompt(stream, category)
        for category in CATEGORIES
        for _ in range(config.refl.prompts_per_category)
    ]
    prompts = []
    for _ in range(config.refl.passes):
        order = stream.permutation(len(base))
        prompts.extend(base[i] for i in order)
    return prompts


def _write_metrics(path, metrics: dict) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _row_from_metrics(metrics: dict) -> dict:
    row = {"iteration": metrics["iteration"]}
    oracle = metrics["eval"]["per_category"]
    row["oracle_attr"] = oracle["attribute"]["mean"]
    row["oracle_spatial"] = oracle["spatial"]["mean"]
    row["oracle_nonspatial"] = oracle["nonspatial"]["mean"]
    row["composite"] = metrics["eval"]["composite"]
    for category in CATEGORIES:
        key = f"rm_acc_{_CAT_SHORT[category]}"
        row[key] = metrics.get("reward_accuracy", {}).get(category)
    row["median_policy_insert_rank"] = metrics.get("median_policy_insert_rank")
    return row


def run_itercomp(config: RunConfig, workdir=None, iterations=None, resume: bool = False) -> RunReport:
    """Full closed-loop run; all artifacts land under the work directory.

    Every stage draws from its own substream of config.seed, so reruns (and
    resumed runs) reproduce the same numbers stage by stage.
    """
    workdir = workdir or config.workdir
    iters = config.iterations if iterations is None else iterations
    os.makedirs(workdir, exist_ok=True)
    save_config(config, os.path.join(workdir, "config.json"))
    report = RunReport(seed=config.seed, config=config.to_json())
    gallery = config.make_gallery()

    # ---- iteration 0: dataset + pretrained base model -------------------
    t_start = time.perf_counter()
    d0_dir = _iter_dir(workdir, 0)
    os.makedirs(d0_dir, exist_ok=True)
    prefs_path = os.path.join(d0_dir, "prefs.jsonl")
    if resume and os.path.exists(prefs_path):
        dataset = load_dataset(prefs_path)
        stats = dataset_stats(dataset)
        log.info("resume: loaded %d rankings from %s", len(dataset.rankings), prefs_path)
    else:
        log.info("building preference dataset (%s prompts)", dict(config.prompt_counts))
        dataset, stats = build_dataset(
            config.prompt_counts, gallery, config.raters,
            substream(config.seed, "dataset"), config.oracles,
        )
        save_dataset(dataset, prefs_path)
    save_stats(stats, os.path.join(d0_dir, "stats.json"))

    base_path = os.path.join(d0_dir, "base.json")
    pretrain_metrics = None
    if resume and os.path.exists(base_path):
        model = load_diffusion(base_path)
        log.info("resume: loaded pretrained base model")
    else:
        data = [(r.prompt, img.scene) for r in dataset.rankings for img in r.images]
        log.info("pretraining on %d (prompt, scene) pairs", len(data))
        model, pre_report = pretrain(
            data, config.diffusion.pretrain_hyper(),
            substream(config.seed, "pretrain"), config.diffusion.schedule(),
        )
        model.seed = config.seed
        save_diffusion(model, base_path)
        pretrain_metrics = pre_report.to_json()

    metrics0 = {
        "iteration": 0,
        "eval": _evaluate(config, model),
        "dataset_stats": stats.to_json(),
    }
    if pretrain_metrics is not None:
        metrics0["pretrain"] = pretrain_metrics
    _write_metrics(os.path.join(d0_dir, "metrics.json"), metrics0)
    report.rows.append(_row_from_metrics(metrics0))
    report.wall_clock.append(time.perf_counter() - t_start)
    log.info("iteration 0 composite %.4f", metrics0["eval"]["composite"])

    # ---- feedback iterations --------------------------------------------
    reward_models: dict = {}
    for k in range(1, iters + 1):
        t_iter = time.perf_counter()
        kdir = _iter_dir(workdir, k)
        os.makedirs(kdir, exist_ok=True)
        rm_paths = {c: os.path.join(kdir, f"rm_{_CAT_SHORT[c]}.json") for c in CATEGORIES}
        base_k = os.path.join(kdir, "base.json")
        prefs_k = os.path.join(kdir, "prefs.jsonl")
        metrics_k = os.path.join(kdir, "metrics.json")

        if resume and all(os.path.exists(p) for p in (*rm_paths.values(), base_k, prefs_k, metrics_k)):
            reward_models = {c: load_reward(rm_paths[c]) for c in CATEGORIES}
            model = load_diffusion(base_k)
            dataset = load_dataset(prefs_k)
            with open(metrics_k) as fh:
                metrics = json.load(fh)
            log.info("resume: loaded iteration %d artifacts", k)
            report.rows.append(_row_from_metrics(metrics))
            report.wall_clock.append(time.perf_counter() - t_iter)
            continue

        epochs = (
            config.reward.epochs_first_iteration if k == 1 else config.reward.epochs_per_iteration
        )
        accuracies = {}
        new_rewards = {}
        for category in CATEGORIES:
            rm, train_rep = train_reward(
                dataset, category, config.reward.hyper(epochs),
                substream(config.seed, "reward", k, category),
                init_model=reward_models.get(category),
            )
            rm.iteration = k
            new_rewards[category] = rm
            accuracies[category] = train_rep.holdout_accuracy
            save_reward(rm, rm_paths[category])
        reward_models = new_rewards
        log.info("iteration %d reward accuracies %s", k, accuracies)

        prompts = _refl_prompt_sequence(config, k)
        model, refl_report = refl_finetune(
            model, list(reward_models.values()), prompts, config.refl.config(),
            substream(config.seed, "refl", k),
        )
        model.iteration = k
        save_diffusion(model, base_k)

        additions = config.gallery_additions.get(k, [])
        dataset = expand_dataset(
            dataset, model, reward_models, substream(config.seed, "expand", k),
            new_profiles=additions, oracle_params=config.oracles,
        )
        if additions:
            gallery = gallery.extended(additions)
        save_dataset(dataset, prefs_k)

        metrics = {
            "iteration": k,
            "eval": _evaluate(config, model),
            "reward_accuracy": accuracies,
            "median_policy_insert_rank": median_insert_rank(dataset, k),
            "ranked_first": dataset_stats(dataset).ranked_first,
            "refl": {
                "steps": refl_report.steps,
                "prompts": refl_report.prompts,
                "mean_reward_first_50": float(np.mean(refl_report.reward_curve[:50]))
                if refl_report.reward_curve else None,
                "mean_reward_last_50": float(np.mean(refl_report.reward_curve[-50:]))
                if refl_report.reward_curve else None,
            },
        }
        _write_metrics(metrics_k, metrics)
        report.rows.append(_row_from_metrics(metrics))
        report.wall_clock.append(time.perf_counter() - t_iter)
        log.info(
            "iteration %d composite %.4f median insert rank %.1f",
            k, metrics["eval"]["composite"], metrics["median_policy_insert_rank"],
        )

    report.to_csv(os.path.join(workdir, "report.csv"))
    with open(os.path.join(workdir, "timings.json"), "w") as fh:
        json.dump({"wall_clock_seconds": report.wall_clock}, fh, indent=2)
        fh.write("\n")
    return report
