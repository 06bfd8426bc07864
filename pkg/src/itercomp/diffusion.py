"""Conditional DDPM over scene vectors, with multi-reward feedback finetuning.

The denoiser predicts the injected noise from (noisy scene, timestep
embedding, prompt embedding).  Feedback finetuning rolls a sample down to a
random late timestep without tracking gradients, applies the denoiser once
more inside the gradient scope, estimates the clean scene from that single
call, and backpropagates the weighted reward losses through it.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
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
from .reward import reward_score_and_scene_grad, scoring_variants
from .scene import EMBED_DIM, SCENE_DIM, Prompt, embed_prompt

log = logging.getLogger(__name__)

TIME_EMBED_DIM = 8
DENOISER_DIMS = (SCENE_DIM + TIME_EMBED_DIM + EMBED_DIM, 128, 128, SCENE_DIM)


@dataclass
class NoiseSchedule:
    """Linear beta schedule; arrays are indexed 1..T with index 0 by convention
    (beta_0 = 0, alpha_bar_0 = 1)."""

    timesteps: int = 40
    beta_start: float = 1e-4
    beta_end: float = 0.02
    beta: np.ndarray = field(init=False, repr=False)
    alpha: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)
    beta_tilde: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.timesteps < 1:
            raise ConfigError("schedule needs at least 1 timestep")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ConfigError("need 0 < beta_start <= beta_end < 1")
        T = self.timesteps
        self.beta = np.zeros(T + 1)
        self.beta[1:] = np.linspace(self.beta_start, self.beta_end, T)
        self.alpha = 1.0 - self.beta
        self.alpha_bar = np.cumprod(self.alpha)
        # posterior variance; zero at t=1 where no noise is injected
        self.beta_tilde = np.zeros(T + 1)
        self.beta_tilde[2:] = (
            self.beta[2:] * (1.0 - self.alpha_bar[1:-1]) / (1.0 - self.alpha_bar[2:])
        )


def time_embedding(t: int, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / (half - 1))
    angles = t * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])


@dataclass
class DiffusionModel:
    net: DenseNet
    schedule: NoiseSchedule
    seed: int | None = None
    steps_trained: int = 0
    iteration: int = 0

    def __post_init__(self):
        if self.net.layer_dims[0] != DENOISER_DIMS[0] or self.net.layer_dims[-1] != SCENE_DIM:
            raise ValueError(f"denoiser dims {self.net.layer_dims} incompatible")

    def copy(self) -> "DiffusionModel":
        net = DenseNet(
            self.net.layer_dims,
            [w.copy() for w in self.net.weights],
            [b.copy() for b in self.net.biases],
        )
        return DiffusionModel(net, self.schedule, self.seed, self.steps_trained, self.iteration)


def init_diffusion(rng: np.random.Generator, schedule: NoiseSchedule | None = None,
                   seed=None) -> DiffusionModel:
    return DiffusionModel(init_net(rng, DENOISER_DIMS), schedule or NoiseSchedule(), seed=seed)


def _check_t(schedule: NoiseSchedule, t: int, lo: int = 1) -> int:
    t = int(t)
    if not lo <= t <= schedule.timesteps:
        raise ValueError(f"timestep {t} outside [{lo}, {schedule.timesteps}]")
    return t


def forward_noise(x0, t: int, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Noised latent sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; t=0 returns x0."""
    t = _check_t(schedule, t, lo=0)
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def _denoiser_input(z, t, emb):
    return np.concatenate([z, time_embedding(t), emb])


def _predict_eps(model: DiffusionModel, z, t, emb):
    return net_forward(model.net, _denoiser_input(z, t, emb))


def _posterior_mean(model, z, t, eps_hat):
    s = model.schedule
    return (z - s.beta[t] / np.sqrt(1.0 - s.alpha_bar[t]) * eps_hat) / np.sqrt(s.alpha[t])


def denoise_step(model: DiffusionModel, z_t, t: int, prompt: Prompt,
                 rng: np.random.Generator) -> np.ndarray:
    """Ancestral step z_t -> z_{t-1}; deterministic at t=1 (no injected noise)."""
    t = _check_t(model.schedule, t)
    emb = embed_prompt(prompt)
    eps_hat = _predict_eps(model, np.asarray(z_t, dtype=float), t, emb)
    mu = _posterior_mean(model, z_t, t, eps_hat)
    if t == 1:
        return mu
    return mu + np.sqrt(model.schedule.beta_tilde[t]) * rng.normal(size=SCENE_DIM)


def sample(model: DiffusionModel, prompt: Prompt, rng: np.random.Generator) -> np.ndarray:
    """Draw z_T ~ N(0, I) and denoise for T steps; returns the raw scene vector."""
    emb = embed_prompt(prompt)
    z = rng.normal(size=SCENE_DIM)
    for t in range(model.schedule.timesteps, 0, -1):
        eps_hat = _predict_eps(model, z, t, emb)
        z = _posterior_mean(model, z, t, eps_hat)
        if t > 1:
            z = z + np.sqrt(model.schedule.beta_tilde[t]) * rng.normal(size=SCENE_DIM)
    return z


def predict_x0(model: DiffusionModel, z_t, t: int, prompt: Prompt) -> np.ndarray:
    """One-shot clean-scene estimate (z_t - sqrt(1-abar_t) eps_hat) / sqrt(abar_t)."""
    t = _check_t(model.schedule, t)
    emb = embed_prompt(prompt)
    z_t = np.asarray(z_t, dtype=float)
    eps_hat = _predict_eps(model, z_t, t, emb)
    ab = model.schedule.alpha_bar[t]
    return (z_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


@dataclass(frozen=True)
class PretrainHyper:
    steps: int = 20000
    lr: float = 1e-3
    batch: int = 64


@dataclass
class PretrainReport:
    steps: int
    init_loss: float
    final_loss: float
    loss_curve: list = field(default_factory=list)  # mean loss per 100 steps

    def to_json(self) -> dict:
        return {
            "steps": self.steps,
            "init_loss": self.init_loss,
            "final_loss": self.final_loss,
            "loss_curve": self.loss_curve,
        }


def _denoising_probe_loss(model, embs, scenes, rng, n=512):
    """Mean ||eps - eps_hat||^2 over a fixed probe of (example, t, eps) draws."""
    idx = rng.integers(len(scenes), size=n)
    ts = rng.integers(1, model.schedule.timesteps + 1, size=n)
    eps = rng.normal(size=(n, SCENE_DIM))
    ab = model.schedule.alpha_bar[ts][:, None]
    z = np.sqrt(ab) * scenes[idx] + np.sqrt(1.0 - ab) * eps
    temb = np.stack([time_embedding(int(t)) for t in ts])
    x = np.hstack([z, temb, embs[idx]])
    out = net_forward(model.net, x)
    return float(np.mean(np.sum((out - eps) ** 2, axis=1)))


def pretrain(data, hyper: PretrainHyper, rng: np.random.Generator,
             schedule: NoiseSchedule | None = None):
    """Train the denoiser to predict injected noise on (prompt, scene) pairs.

    Returns (model, report).  Timesteps are drawn uniformly from 1..T.
    """
    if not data:
        raise DataError("pretraining needs at least one (prompt, scene) example")
    model = init_diffusion(rng, schedule)
    embs = np.stack([embed_prompt(p) for p, _ in data])
    scenes = np.stack([s.vec for _, s in data])

    probe_rng = rng.spawn(1)[0]
    init_loss = _denoising_probe_loss(model, embs, scenes, probe_rng, n=512)

    params = flatten_params(model.net)
    state = adam_init(param_count(model.net))
    curve, window = [], []
    T = model.schedule.timesteps
    for step in range(hyper.steps):
        idx = rng.integers(len(data), size=hyper.batch)
        ts = rng.integers(1, T + 1, size=hyper.batch)
        eps = rng.normal(size=(hyper.batch, SCENE_DIM))
        ab = model.schedule.alpha_bar[ts][:, None]
        z = np.sqrt(ab) * scenes[idx] + np.sqrt(1.0 - ab) * eps
        temb = np.stack([time_embedding(int(t)) for t in ts])
        x = np.hstack([z, temb, embs[idx]])
        out = net_forward(model.net, x)
        resid = out - eps
        window.append(float(np.mean(np.sum(resid**2, axis=1))))
        grads, _ = net_backward(model.net, x, 2.0 * resid / hyper.batch)
        params, state = adam_step(state, params, flatten_grads(grads), hyper.lr)
        set_flat_params(model.net, params)
        if (step + 1) % 100 == 0:
            curve.append(float(np.mean(window)))
            window = []
        if (step + 1) % 5000 == 0:
            log.info("pretrain step %d/%d loss %.3f", step + 1, hyper.steps, curve[-1])
    final_loss = _denoising_probe_loss(model, embs, scenes, probe_rng, n=512)
    model.steps_trained = hyper.steps
    return model, PretrainReport(hyper.steps, init_loss, final_loss, curve)


def _default_weights():
    return {"attribute": 1.0, "spatial": 1.0, "nonspatial": 1.0}


@dataclass(frozen=True)
class ReflConfig:
    lam: float = 1e-3          # reward re-weight scale
    t_min: int = 1             # finetuning timestep range, inclusive
    t_max: int = 10
    phi: str = "negate"        # reward-to-loss map: negate or relu_margin
    margin: float = 1.0        # margin for relu_margin
    lr: float = 1e-5
    batch: int = 4
    reward_weights: dict = field(default_factory=_default_weights)
    rho: float = 0.0           # optional denoising-loss regularizer weight

    def validate(self, timesteps: int) -> None:
        if not 1 <= self.t_min <= self.t_max <= timesteps:
            raise ConfigError(
                f"need 1 <= t_min <= t_max <= {timesteps}, got [{self.t_min}, {self.t_max}]"
            )
        if self.lam < 0 or self.rho < 0:
            raise ConfigError("lam and rho must be >= 0")
        if self.phi not in ("negate", "relu_margin"):
            raise ConfigError(f"unknown phi {self.phi!r}")
        if self.batch < 1 or self.lr <= 0:
            raise ConfigError("batch must be >= 1 and lr > 0")

    def phi_and_grad(self, r: float):
        if self.phi == "negate":
            return -r, -1.0
        if r < self.margin:
            return self.margin - r, -1.0
        return 0.0, 0.0


@dataclass
class ReflDraws:
    """All randomness for one feedback step, frozen so the loss is a pure
    function of the parameters (finite differences rely on this)."""

    t: int
    z_T: np.ndarray
    step_noises: dict  # j -> noise injected after the j -> j-1 step, for j > 1
    reg_t: int | None = None
    reg_eps: np.ndarray | None = None
    reg_x0: np.ndarray | None = None


def make_refl_draws(cfg: ReflConfig, schedule: NoiseSchedule, rng: np.random.Generator,
                    reg_x0=None) -> ReflDraws:
    t = int(rng.integers(cfg.t_min, cfg.t_max + 1))
    z_T = rng.normal(size=SCENE_DIM)
    # one draw per noise-injecting step: T..t+1 during roll-down, plus t itself
    noises = {j: rng.normal(size=SCENE_DIM) for j in range(schedule.timesteps, 1, -1) if j >= t}
    reg_t = reg_eps = None
    if cfg.rho > 0:
        if reg_x0 is None:
            raise ConfigError("rho > 0 needs a regularizer target scene")
        reg_t = int(rng.integers(1, schedule.timesteps + 1))
        reg_eps = rng.normal(size=SCENE_DIM)
    return ReflDraws(t, z_T, noises, reg_t, reg_eps, reg_x0)


def refl_loss_and_grads(model: DiffusionModel, reward_models, prompt: Prompt,
                        cfg: ReflConfig, draws: ReflDraws):
    """Feedback loss, flat parameter gradients, and diagnostics for one prompt.

    Gradients flow only through the single denoiser application at the drawn
    timestep (and the clean-scene algebra); the roll-down from T is severed.
    """
    cfg.validate(model.schedule.timesteps)
    if not reward_models:
        raise ConfigError("need at least one reward model")
    s = model.schedule
    emb = embed_prompt(prompt)
    t = draws.t

    z = draws.z_T
    for j in range(s.timesteps, t, -1):  # no grad: T -> t
        eps_hat = _predict_eps(model, z, j, emb)
        z = _posterior_mean(model, z, j, eps_hat)
        if j > 1:
            z = z + np.sqrt(s.beta_tilde[j]) * draws.step_noises[j]
    z_t = z

    # single in-scope denoiser call
    x_in = _denoiser_input(z_t, t, emb)
    eps_hat = net_forward(model.net, x_in)
    ab = s.alpha_bar[t]
    x0_hat = (z_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
    z_prev = _posterior_mean(model, z_t, t, eps_hat)
    if t > 1:
        z_prev = z_prev + np.sqrt(s.beta_tilde[t]) * draws.step_noises[t]

    loss = 0.0
    dloss_dx0 = np.zeros(SCENE_DIM)
    scores = {}
    variants = scoring_variants(prompt)
    for rm in reward_models:
        r, r_grad = reward_score_and_scene_grad(rm, prompt, x0_hat, variants)
        scores[rm.category] = r
        w = cfg.reward_weights.get(rm.category, 1.0)
        phi, dphi = cfg.phi_and_grad(r)
        loss += cfg.lam * w * phi
        dloss_dx0 += cfg.lam * w * dphi * r_grad

    dloss_deps = dloss_dx0 * (-np.sqrt(1.0 - ab) / np.sqrt(ab))
    grads, _ = net_backward(model.net, x_in, dloss_deps)
    flat = flatten_grads(grads)

    if cfg.rho > 0:
        z_reg = forward_noise(draws.reg_x0, draws.reg_t, draws.reg_eps, s)
        x_reg = _denoiser_input(z_reg, draws.reg_t, emb)
        out = net_forward(model.net, x_reg)
        resid = out - draws.reg_eps
        loss += cfg.rho * float(np.sum(resid**2))
        reg_grads, _ = net_backward(model.net, x_reg, 2.0 * cfg.rho * resid)
        flat = flat + flatten_grads(reg_grads)

    diagnostics = {
        "t": t,
        "rewards": scores,
        "loss": float(loss),
        "z_t": z_t,
        "z_prev": z_prev,
        "x0_hat": x0_hat,
    }
    return float(loss), flat, diagnostics


def refl_step(model: DiffusionModel, reward_models, prompt: Prompt, cfg: ReflConfig,
              rng: np.random.Generator, reg_x0=None):
    """Draw the step's randomness, then compute the feedback loss and gradients."""
    cfg.validate(model.schedule.timesteps)
    draws = make_refl_draws(cfg, model.schedule, rng, reg_x0)
    return refl_loss_and_grads(model, reward_models, prompt, cfg, draws)


@dataclass
class ReflReport:
    steps: int
    prompts: int
    loss_curve: list = field(default_factory=list)       # mean loss per batch
    reward_curve: list = field(default_factory=list)     # per-batch mean of summed rewards

    def to_json(self) -> dict:
        return {
            "steps": self.steps,
            "prompts": self.prompts,
            "loss_curve": self.loss_curve,
            "reward_curve": self.reward_curve,
        }


def refl_finetune(model: DiffusionModel, reward_models, prompts, cfg: ReflConfig,
                  rng: np.random.Generator, reg_scenes=None):
    """One pass of feedback learning over the prompt list, batched Adam updates.

    Returns (finetuned model copy, report); the input model is not mutated.
    """
    cfg.validate(model.schedule.timesteps)
    out = model.copy()
    if not prompts:
        return out, ReflReport(0, 0)
    params = flatten_params(out.net)
    state = adam_init(param_count(out.net))
    streams = rng.spawn(len(prompts))
    report = ReflReport(0, len(prompts))
    for start in range(0, len(prompts), cfg.batch):
        chunk = prompts[start : start + cfg.batch]
        acc = np.zeros_like(params)
        batch_loss, batch_reward = 0.0, 0.0
        for offset, prompt in enumerate(chunk):
            reg_x0 = reg_scenes[start + offset] if reg_scenes is not None else None
            loss, grads, diag = refl_step(out, reward_models, prompt, cfg,
                                          streams[start + offset], reg_x0)
            acc += grads / len(chunk)
            batch_loss += loss / len(chunk)
            batch_reward += sum(diag["rewards"].values()) / len(chunk)
        params, state = adam_step(state, params, acc, cfg.lr)
        set_flat_params(out.net, params)
        report.steps += 1
        report.loss_curve.append(batch_loss)
        report.reward_curve.append(batch_reward)
    return out, report


def save_diffusion(model: DiffusionModel, path, hyperparams=None) -> None:
    ckpt = net_to_checkpoint(
        model.net,
        seed=model.seed,
        hyperparams=hyperparams,
        kind="diffusion",
        schedule={
            "T": model.schedule.timesteps,
            "beta_start": model.schedule.beta_start,
            "beta_end": model.schedule.beta_end,
        },
        iteration=model.iteration,
        steps_trained=model.steps_trained,
    )
    save_checkpoint(ckpt, path)


def load_diffusion(path) -> DiffusionModel:
    ckpt = load_checkpoint(path)
    if ckpt.get("kind") != "diffusion":
        raise DataError(f"{path} is not a diffusion checkpoint")
    sch = ckpt["schedule"]
    schedule = NoiseSchedule(sch["T"], sch["beta_start"], sch["beta_end"])
    model = DiffusionModel(
        net_from_checkpoint(ckpt),
        schedule,
        seed=ckpt.get("metadata", {}).get("seed"),
        steps_trained=ckpt.get("steps_trained", 0),
        iteration=ckpt.get("iteration", 0),
    )
    return model
