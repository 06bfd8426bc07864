"""Per-category reward models trained on preference pairs with the pairwise
logistic (Bradley-Terry) loss."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .net import (
    DenseNet,
    adam_init,
    adam_step,
    flatten_grads,
    flatten_params,
    init_net,
    load_checkpoint,
    net_backward,
    net_forward,
    net_from_checkpoint,
    net_to_checkpoint,
    param_count,
    save_checkpoint,
    set_flat_params,
)
from .prefs import PreferenceDataset, expand_pairs, pair_count
from .rng import substream
from .scene import (
    CATEGORIES,
    EMBED_DIM,
    F_ACTIVITY,
    F_HUE,
    F_SHAPE,
    F_X,
    F_Y,
    FIELDS_PER_SLOT,
    N_SLOTS,
    SCENE_DIM,
    OracleSymmetry,
    Prompt,
    Scene,
    embed_prompt,
    sample_symmetry,
    transform_prompt,
    transform_scene_grad,
    transform_scene_rows,
    transform_scene_vec,
)

# scene fields each category's oracle provably ignores; resampling them in
# training pairs changes nothing about the label but teaches the invariance
_IRRELEVANT_FIELDS = {
    "attribute": (F_X, F_Y, F_ACTIVITY),
    "spatial": (F_HUE, F_SHAPE, F_ACTIVITY),
    "nonspatial": (F_X, F_Y, F_HUE, F_SHAPE),
}
_IRRELEVANT_IDX = {
    category: np.array([s * FIELDS_PER_SLOT + f for s in range(N_SLOTS) for f in fields])
    for category, fields in _IRRELEVANT_FIELDS.items()
}
_X_IDX = np.arange(N_SLOTS) * FIELDS_PER_SLOT + F_X
_Y_IDX = np.arange(N_SLOTS) * FIELDS_PER_SLOT + F_Y
_SHAPE_IDX = np.arange(N_SLOTS) * FIELDS_PER_SLOT + F_SHAPE

log = logging.getLogger(__name__)

REWARD_DIMS = (EMBED_DIM + SCENE_DIM, 64, 64, 1)


@dataclass
class RewardModel:
    category: str
    net: DenseNet
    iteration: int = 0
    epochs_trained: int = 0
    seed: int | None = None

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if self.net.layer_dims[0] != EMBED_DIM + SCENE_DIM or self.net.layer_dims[-1] != 1:
            raise ValueError(f"reward net dims {self.net.layer_dims} incompatible")


@dataclass(frozen=True)
class RewardHyper:
    epochs: int = 600
    lr: float = 1e-3
    batch: int = 64
    holdout_fraction: float = 0.1
    weight_decay: float = 0.0      # L2 penalty added to the pairwise loss
    input_jitter: float = 0.0      # train-time Gaussian noise on scene inputs
    augment: bool = True           # oracle-symmetry augmentation of (prompt, pair)
    label_smoothing: float = 0.10  # soft targets against rater-noise label flips
    average_fraction: float = 0.25  # Polyak-average the last fraction of steps


def init_reward(rng: np.random.Generator, category: str, seed=None) -> RewardModel:
    return RewardModel(category, init_net(rng, REWARD_DIMS), seed=seed)


def _scene_vec(scene) -> np.ndarray:
    if isinstance(scene, Scene):
        return scene.vec
    v = np.asarray(scene, dtype=float)
    if v.shape != (SCENE_DIM,):
        raise ValueError(f"scene vector must have shape ({SCENE_DIM},), got {v.shape}")
    return v


def reward_input(prompt: Prompt, scene) -> np.ndarray:
    return np.concatenate([embed_prompt(prompt), _scene_vec(scene)])


def _build_scoring_symmetries() -> list:
    """Fixed symmetry ensemble averaged over at scoring time.

    Scores are the mean of the net over orbit points of the oracle symmetry
    group; the ensemble is a build-time constant so scoring stays a
    deterministic function of (checkpoint, prompt, scene).
    """
    identity = OracleSymmetry((0, 1, 2), 0.0, False, False, False, (False, False, False))
    rng = substream(0x5C0_12E, "reward-scoring-ensemble")
    return [identity] + [sample_symmetry(rng) for _ in range(15)]


SCORING_SYMMETRIES = _build_scoring_symmetries()


def scoring_variants(prompt: Prompt) -> list:
    """The (embedding, symmetry) pairs scoring averages over, precomputable
    when many scenes are scored against the same prompt."""
    return [(embed_prompt(transform_prompt(prompt, sym)), sym) for sym in SCORING_SYMMETRIES]


def score_scenes(rm: RewardModel, prompt: Prompt, scene_rows: np.ndarray,
                 variants=None) -> np.ndarray:
    """Symmetry-averaged scores for (n, SCENE_DIM) raw scene rows."""
    scene_rows = np.asarray(scene_rows, dtype=float)
    if variants is None:
        variants = scoring_variants(prompt)
    total = np.zeros(len(scene_rows))
    rows = np.empty((len(scene_rows), EMBED_DIM + SCENE_DIM))
    for emb, sym in variants:
        rows[:, :EMBED_DIM] = emb
        rows[:, EMBED_DIM:] = transform_scene_rows(scene_rows, sym)
        total += net_forward(rm.net, rows)[:, 0]
    return total / len(variants)


def reward_score(rm: RewardModel, prompt: Prompt, scene) -> float:
    """Scalar score for (prompt, scene); scene may be a Scene or a raw vector."""
    if prompt.category != rm.category:
        log.debug(
            "cross-category scoring: %s reward model on %s prompt %s",
            rm.category, prompt.category, prompt.prompt_id,
        )
    return float(score_scenes(rm, prompt, _scene_vec(scene)[None, :])[0])


def reward_score_and_scene_grad(rm: RewardModel, prompt: Prompt, scene, variants=None):
    """Score plus its gradient w.r.t. the raw scene vector (adjoint of the
    symmetry average); this is the reward surface feedback finetuning climbs."""
    vec = _scene_vec(scene)
    if variants is None:
        variants = scoring_variants(prompt)
    k = len(variants)
    rows = np.empty((k, EMBED_DIM + SCENE_DIM))
    for i, (emb, sym) in enumerate(variants):
        rows[i, :EMBED_DIM] = emb
        rows[i, EMBED_DIM:] = transform_scene_vec(vec, sym)
    scores = net_forward(rm.net, rows)[:, 0]
    _, row_grads = net_backward(rm.net, rows, np.ones((k, 1)))
    grad = np.zeros(SCENE_DIM)
    for i, (_, sym) in enumerate(variants):
        grad += transform_scene_grad(row_grads[i, EMBED_DIM:], sym)
    return float(scores.mean()), grad / k


def bt_loss(r_w, r_l):
    """-log sigmoid(r_w - r_l), computed stably for any score gap."""
    return np.logaddexp(0.0, -(np.asarray(r_w, dtype=float) - np.asarray(r_l, dtype=float)))


@dataclass
class TrainReport:
    category: str
    epochs: int
    steps: int
    init_loss: float
    final_loss: float
    holdout_loss_init: float
    holdout_loss_final: float
    holdout_accuracy: float
    loss_curve: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "category": self.category,
            "epochs": self.epochs,
            "steps": self.steps,
            "init_loss": self.init_loss,
            "final_loss": self.final_loss,
            "holdout_loss_init": self.holdout_loss_init,
            "holdout_loss_final": self.holdout_loss_final,
            "holdout_accuracy": self.holdout_accuracy,
            "loss_curve": self.loss_curve,
        }


def _score_gaps(rm: RewardModel, rankings, variant_cache=None):
    """Winner-minus-loser score gaps for every implied pair, ranking by ranking."""
    gaps = []
    for idx, r in enumerate(rankings):
        mat = np.stack([img.scene.vec for img in sorted(r.images, key=lambda im: im.rank)])
        variants = variant_cache[idx] if variant_cache is not None else None
        scores = score_scenes(rm, r.prompt, mat, variants)
        m = len(scores)
        for a in range(m):
            for b in range(a + 1, m):
                gaps.append(scores[a] - scores[b])
    return np.asarray(gaps)


def _mean_bt_over(rm, rankings, variant_cache=None) -> float:
    return float(np.mean(np.logaddexp(0.0, -_score_gaps(rm, rankings, variant_cache))))


def _accuracy_over(rm, rankings, variant_cache=None) -> float:
    gaps = _score_gaps(rm, rankings, variant_cache)
    return float(np.mean(np.where(gaps > 0, 1.0, np.where(gaps == 0, 0.5, 0.0))))


_HUE_IDX = np.arange(N_SLOTS) * FIELDS_PER_SLOT + F_HUE
_EMB_COS_IDX = 4 * np.arange(N_SLOTS) + 1
_EMB_SIN_IDX = 4 * np.arange(N_SLOTS) + 2
_EMB_REQ_IDX = 4 * np.arange(N_SLOTS)
_EMB_SHAPE_IDX = 4 * np.arange(N_SLOTS) + 3


class _AugmentedSampler:
    """Vectorized label-preserving augmentation over one category's rankings.

    Discrete symmetries (slot permutation x mirrors x constraint reorder and
    endpoint swaps) are baked into a per-ranking pool of embedding variants;
    continuous ones (hue rotation, position translation, shape shift) and the
    irrelevant-field resampling are applied per batch with array ops.
    """

    VARIANTS = 48  # 6 permutations x 2 mirror_x x 2 mirror_y x 2 reorderings

    def __init__(self, category, train, scene_mats, rng):
        import itertools

        self.category = category
        n = len(train)
        if len({mat.shape[0] for mat in scene_mats}) != 1:
            raise DataError("augmented training expects rankings of equal size")
        self.scenes = np.stack(scene_mats)  # (n, m, SCENE_DIM)
        self.m = self.scenes.shape[1]
        self.pairs = _index_pairs(self.m)
        self.emb_pool = np.empty((n, self.VARIANTS, EMBED_DIM))
        self.perm_id = np.empty((n, self.VARIANTS), dtype=int)
        self.mx = np.empty((n, self.VARIANTS), dtype=bool)
        self.my = np.empty((n, self.VARIANTS), dtype=bool)
        perms = list(itertools.permutations(range(N_SLOTS)))
        # scene gather LUT per permutation: out[j] = in[inv_perm[j]]
        self.perm_lut = np.empty((len(perms), SCENE_DIM), dtype=int)
        for pid, perm in enumerate(perms):
            inv = np.argsort(perm)
            self.perm_lut[pid] = (
                np.repeat(inv, FIELDS_PER_SLOT) * FIELDS_PER_SLOT
                + np.tile(np.arange(FIELDS_PER_SLOT), N_SLOTS)
            )
        for ri, ranking in enumerate(train):
            v = 0
            for pid, perm in enumerate(perms):
                for mx in (False, True):
                    for my in (False, True):
                        for rev in (False, True):
                            sym = sample_symmetry(rng)
                            sym = type(sym)(perm, 0.0, mx, my, rev, sym.swap_endpoints)
                            self.emb_pool[ri, v] = embed_prompt(transform_prompt(ranking.prompt, sym))
                            self.perm_id[ri, v] = pid
                            self.mx[ri, v] = mx
                            self.my[ri, v] = my
                            v += 1

    def _transform_scenes(self, raw, perm_ids, mx, my, hue_shift):
        out = np.take_along_axis(raw, self.perm_lut[perm_ids], axis=1)
        out[:, _X_IDX] = np.where(mx[:, None], 1.0 - out[:, _X_IDX], out[:, _X_IDX])
        out[:, _Y_IDX] = np.where(my[:, None], 1.0 - out[:, _Y_IDX], out[:, _Y_IDX])
        out[:, _HUE_IDX] = (out[:, _HUE_IDX] + hue_shift[:, None]) % 1.0
        return out

    def batch(self, size, rng):
        """One batch of (winner_rows, loser_rows), fully augmented."""
        r_idx = rng.integers(len(self.scenes), size=size)
        v_idx = rng.integers(self.VARIANTS, size=size)
        pair_idx = rng.integers(len(self.pairs), size=size)
        a, b = self.pairs[pair_idx, 0], self.pairs[pair_idx, 1]
        hue_shift = rng.random(size)

        emb = self.emb_pool[r_idx, v_idx].copy()
        phi = 2.0 * np.pi * hue_shift
        c, s = np.cos(phi)[:, None], np.sin(phi)[:, None]
        cos0, sin0 = emb[:, _EMB_COS_IDX].copy(), emb[:, _EMB_SIN_IDX].copy()
        emb[:, _EMB_COS_IDX] = cos0 * c - sin0 * s
        emb[:, _EMB_SIN_IDX] = cos0 * s + sin0 * c

        perm_ids = self.perm_id[r_idx, v_idx]
        mx, my = self.mx[r_idx, v_idx], self.my[r_idx, v_idx]
        win = self._transform_scenes(self.scenes[r_idx, a], perm_ids, mx, my, hue_shift)
        lose = self._transform_scenes(self.scenes[r_idx, b], perm_ids, mx, my, hue_shift)

        if self.category == "spatial":
            for idx in (_X_IDX, _Y_IDX):
                both = np.concatenate([win[:, idx], lose[:, idx]], axis=1)
                lo, hi = -both.min(axis=1), 1.0 - both.max(axis=1)
                delta = np.where(hi > lo, lo + rng.random(size) * np.maximum(hi - lo, 0.0), 0.0)
                win[:, idx] += delta[:, None]
                lose[:, idx] += delta[:, None]
        elif self.category == "attribute":
            required = emb[:, _EMB_REQ_IDX] == 1.0
            targets = emb[:, _EMB_SHAPE_IDX]
            shapes = np.stack([targets, win[:, _SHAPE_IDX], lose[:, _SHAPE_IDX]])
            lo, hi = -shapes.min(axis=0), 1.0 - shapes.max(axis=0)
            delta = np.where(required & (hi > lo),
                             lo + rng.random((size, N_SLOTS)) * np.maximum(hi - lo, 0.0), 0.0)
            emb[:, _EMB_SHAPE_IDX] += delta
            win[:, _SHAPE_IDX] += delta
            lose[:, _SHAPE_IDX] += delta

        irrelevant = _IRRELEVANT_IDX[self.category]
        win[:, irrelevant] = rng.random((size, irrelevant.size))
        lose[:, irrelevant] = rng.random((size, irrelevant.size))

        rows_w = np.hstack([emb, win])
        rows_l = np.hstack([emb.copy(), lose])
        return rows_w, rows_l


def _index_pairs(m: int) -> np.ndarray:
    return np.array([(a, b) for a in range(m) for b in range(a + 1, m)])


def train_reward(dataset: PreferenceDataset, category: str, hyper: RewardHyper,
                 rng: np.random.Generator, init_model: RewardModel | None = None):
    """Fit a reward model on one category's rankings; returns (model, report).

    Pairs are sampled uniformly from each ranking's expansion rather than
    materialized, so one epoch covers all implied pairs in expectation.  The
    holdout split is by prompt, never by pair.
    """
    rankings = dataset.by_category(category)
    if not rankings:
        raise DataError(f"dataset has no {category!r} rankings")

    order = rng.permutation(len(rankings))
    n_hold = int(round(hyper.holdout_fraction * len(rankings)))
    if len(rankings) >= 2 and hyper.holdout_fraction > 0:
        n_hold = max(n_hold, 1)
    hold = [rankings[i] for i in order[:n_hold]]
    train = [rankings[i] for i in order[n_hold:]]
    if not train:
        raise DataError("holdout fraction leaves no training rankings")

    if init_model is not None:
        if init_model.category != category:
            raise DataError("warm-start model category mismatch")
        net = DenseNet(
            init_model.net.layer_dims,
            [w.copy() for w in init_model.net.weights],
            [b.copy() for b in init_model.net.biases],
        )
    else:
        net = init_net(rng, REWARD_DIMS)

    embs = [embed_prompt(r.prompt) for r in train]
    scene_mats = [
        np.stack([img.scene.vec for img in sorted(r.images, key=lambda im: im.rank)])
        for r in train
    ]
    sizes = np.array([len(r.images) for r in train])
    idx_pairs = {int(m): _index_pairs(int(m)) for m in np.unique(sizes)}
    sampler = _AugmentedSampler(category, train, scene_mats, rng) if hyper.augment else None

    probe = RewardModel(category, net)
    train_variants = [scoring_variants(r.prompt) for r in train]
    hold_variants = [scoring_variants(r.prompt) for r in hold]
    init_loss = _mean_bt_over(probe, train, train_variants)
    holdout_loss_init = _mean_bt_over(probe, hold, hold_variants) if hold else math.nan

    total_pairs = int(sum(pair_count(len(r.images)) for r in train))
    steps_per_epoch = max(1, math.ceil(total_pairs / hyper.batch))
    params = flatten_params(net)
    state = adam_init(param_count(net))
    total_steps = hyper.epochs * steps_per_epoch
    average_from = (
        int(total_steps * (1.0 - hyper.average_fraction)) if hyper.average_fraction > 0 else total_steps
    )
    avg_params = np.zeros_like(params)
    n_averaged = 0
    loss_curve = []
    steps = 0
    for _ in range(hyper.epochs):
        epoch_losses = []
        for _ in range(steps_per_epoch):
            if sampler is not None:
                rows_w, rows_l = sampler.batch(hyper.batch, rng)
            else:
                r_idx = rng.integers(len(train), size=hyper.batch)
                rows_w = np.empty((hyper.batch, EMBED_DIM + SCENE_DIM))
                rows_l = np.empty_like(rows_w)
                for row, ri in enumerate(r_idx):
                    pairs = idx_pairs[int(sizes[ri])]
                    a, b = pairs[rng.integers(len(pairs))]
                    rows_w[row, :EMBED_DIM] = embs[ri]
                    rows_l[row, :EMBED_DIM] = embs[ri]
                    rows_w[row, EMBED_DIM:] = scene_mats[ri][a]
                    rows_l[row, EMBED_DIM:] = scene_mats[ri][b]
            x = np.vstack([rows_w, rows_l])
            if hyper.input_jitter > 0:
                x[:, EMBED_DIM:] += hyper.input_jitter * rng.normal(size=(2 * hyper.batch, SCENE_DIM))
            out = net_forward(net, x)[:, 0]
            d = out[: hyper.batch] - out[hyper.batch :]
            losses = np.logaddexp(0.0, -d)
            epoch_losses.append(float(np.mean(losses)))
            # d(mean loss)/dd = sigmoid(d) - 1, shifted by the label smoothing
            g = (_stable_sigmoid(d) - 1.0 + hyper.label_smoothing) / hyper.batch
            upstream = np.concatenate([g, -g])[:, None]
            grads, _ = net_backward(net, x, upstream)
            flat = flatten_grads(grads)
            if hyper.weight_decay > 0:
                flat += hyper.weight_decay * params
            params, state = adam_step(state, params, flat, hyper.lr)
            set_flat_params(net, params)
            steps += 1
            if steps > average_from:
                avg_params += params
                n_averaged += 1
        loss_curve.append(float(np.mean(epoch_losses)))
    if n_averaged:
        params = avg_params / n_averaged
        set_flat_params(net, params)

    final_loss = _mean_bt_over(probe, train, train_variants)
    holdout_loss_final = _mean_bt_over(probe, hold, hold_variants) if hold else math.nan
    model = RewardModel(category, net, epochs_trained=hyper.epochs)
    if init_model is not None:
        model.iteration = init_model.iteration
        model.epochs_trained += init_model.epochs_trained
    acc = _accuracy_over(probe, hold, hold_variants) if hold else math.nan
    report = TrainReport(
        category=category,
        epochs=hyper.epochs,
        steps=steps,
        init_loss=init_loss,
        final_loss=final_loss,
        holdout_loss_init=holdout_loss_init,
        holdout_loss_final=holdout_loss_final,
        holdout_accuracy=acc,
        loss_curve=loss_curve,
    )
    return model, report


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def pairwise_accuracy(rm: RewardModel, pairs) -> float:
    """Fraction of pairs scored winner > loser; exact ties count half."""
    if not pairs:
        raise DataError("no pairs to evaluate")
    groups = {}
    for pair in pairs:
        groups.setdefault(pair.prompt_id, (pair.prompt, []))[1].append(pair)
    total = 0.0
    for prompt, plist in groups.values():
        mat = np.stack([q.winner.vec for q in plist] + [q.loser.vec for q in plist])
        scores = score_scenes(rm, prompt, mat)
        w, l = scores[: len(plist)], scores[len(plist):]
        total += float(np.sum(np.where(w > l, 1.0, np.where(w == l, 0.5, 0.0))))
    return total / len(pairs)


def holdout_pairs(dataset: PreferenceDataset, category: str, fraction: float,
                  rng: np.random.Generator) -> list:
    """The pairs a matching train_reward call would hold out (same split rule)."""
    rankings = dataset.by_category(category)
    order = rng.permutation(len(rankings))
    n_hold = int(round(fraction * len(rankings)))
    if len(rankings) >= 2 and fraction > 0:
        n_hold = max(n_hold, 1)
    pairs = []
    for i in order[:n_hold]:
        pairs.extend(expand_pairs(rankings[i]))
    return pairs


def save_reward(rm: RewardModel, path, hyperparams=None) -> None:
    ckpt = net_to_checkpoint(
        rm.net,
        seed=rm.seed,
        hyperparams=hyperparams,
        kind="reward",
        category=rm.category,
        iteration=rm.iteration,
    )
    save_checkpoint(ckpt, path)


def load_reward(path) -> RewardModel:
    ckpt = load_checkpoint(path)
    if ckpt.get("kind") != "reward":
        raise DataError(f"{path} is not a reward checkpoint")
    net = net_from_checkpoint(ckpt)
    return RewardModel(
        ckpt["category"],
        net,
        iteration=ckpt.get("iteration", 0),
        seed=ckpt.get("metadata", {}).get("seed"),
    )
