"""Oracle-based evaluation of a conditional scene generator."""

from dataclasses import dataclass

import numpy as np

from .scene import CATEGORIES, DEFAULT_ORACLE_PARAMS, ORACLES, decode_scene, sample_prompt


@dataclass
class EvalReport:
    model_id: str
    prompts_per_category: int
    bootstrap_samples: int
    per_category: dict  # category -> {"mean", "ci_low", "ci_high"}
    composite: float

    def to_json(self) -> dict:
        return {
            "model_id": self.model_id,
            "prompts_per_category": self.prompts_per_category,
            "bootstrap_samples": self.bootstrap_samples,
            "per_category": self.per_category,
            "composite": self.composite,
        }


def _bootstrap_ci(scores: np.ndarray, rng: np.random.Generator, samples: int):
    idx = rng.integers(len(scores), size=(samples, len(scores)))
    means = scores[idx].mean(axis=1)
    return float(np.percentile(means, 2.5)), float(np.percentile(means, 97.5))


def evaluate_model(sample_fn, prompt_count: int, rng: np.random.Generator,
                   bootstrap_samples: int = 1000, oracle_params=DEFAULT_ORACLE_PARAMS,
                   model_id: str = "model") -> EvalReport:
    """Score prompt_count fresh prompts per category with the matching oracle.

    ``sample_fn(prompt, rng)`` must return a raw scene vector; it is decoded
    before scoring.  Confidence intervals are 95% percentile bootstrap.
    """
    if prompt_count < 1:
        raise ValueError("prompt_count must be >= 1")
    per_category = {}
    means = []
    for category in CATEGORIES:
        cat_rng = rng.spawn(1)[0]
        streams = cat_rng.spawn(prompt_count + 1)
        scores = np.empty(prompt_count)
        for i in range(prompt_count):
            prompt = sample_prompt(streams[i], category)
            scene = decode_scene(sample_fn(prompt, streams[i]))
            scores[i] = ORACLES[category](prompt, scene, oracle_params)
        lo, hi = _bootstrap_ci(scores, streams[-1], bootstrap_samples)
        mean = float(scores.mean())
        per_category[category] = {"mean": mean, "ci_low": lo, "ci_high": hi}
        means.append(mean)
    return EvalReport(
        model_id=model_id,
        prompts_per_category=prompt_count,
        bootstrap_samples=bootstrap_samples,
        per_category=per_category,
        composite=float(np.mean(means)),
    )
