"""Independent reference implementations used as test oracles."""

import numpy as np

from itercomp.diffusion import ReflConfig, ReflDraws, time_embedding
from itercomp.net import flatten_grads, net_backward, net_forward
from itercomp.reward import SCORING_SYMMETRIES
from itercomp.scene import EMBED_DIM, SCENE_DIM, embed_prompt, transform_prompt, transform_scene_vec


_JACOBIAN_CACHE = {}


def _transform_jacobian(sym):
    """Jacobian of the scene transform by finite differences at a fixed base.

    The transform is affine in the scene vector (signed permutation plus a
    hue shift of unit slope), so the Jacobian is base-independent; the base
    0.37 keeps every hue coordinate away from the mod-1 wrap under each
    fixed scoring shift.
    """
    if sym in _JACOBIAN_CACHE:
        return _JACOBIAN_CACHE[sym]
    base = np.full(SCENE_DIM, 0.37)
    assert abs((0.37 + sym.hue_shift) % 1.0 - 0.5) < 0.5 - 1e-2  # no wrap nearby
    h = 1e-3
    ref = transform_scene_vec(base, sym)
    J = np.empty((SCENE_DIM, SCENE_DIM))
    for j in range(SCENE_DIM):
        probe = base.copy()
        probe[j] += h
        J[:, j] = (transform_scene_vec(probe, sym) - ref) / h
    _JACOBIAN_CACHE[sym] = J
    return J


def _reference_reward_and_grad(rm, prompt, x0):
    """Symmetry-averaged reward and its scene gradient, with the transform
    adjoint recovered numerically rather than via the production backmap."""
    score = 0.0
    grad = np.zeros(SCENE_DIM)
    for sym in SCORING_SYMMETRIES:
        emb = embed_prompt(transform_prompt(prompt, sym))
        row = np.concatenate([emb, transform_scene_vec(x0, sym)])
        score += float(net_forward(rm.net, row)[0])
        _, row_grad = net_backward(rm.net, row, np.ones(1))
        grad += _transform_jacobian(sym).T @ row_grad[EMBED_DIM:]
    k = len(SCORING_SYMMETRIES)
    return score / k, grad / k


def refl_reference(model, reward_models, prompt, cfg: ReflConfig, draws: ReflDraws):
    """Gradient-severed reference path for the feedback step.

    Walks the whole sampling chain while tracking how the loss gradient would
    propagate through every denoiser application, then keeps only the
    in-scope step's direct contribution (severing the roll-down), exactly as
    the algorithm prescribes.  Returns (loss, kept_grads, severed_grads_sum)
    where kept_grads must equal the production implementation and
    severed_grads_sum is what severing discarded.
    """
    s = model.schedule
    emb = embed_prompt(prompt)
    t = draws.t

    # forward roll-down, recording each step's denoiser input
    z = draws.z_T
    step_inputs = {}
    for j in range(s.timesteps, t, -1):
        x_in = np.concatenate([z, time_embedding(j), emb])
        step_inputs[j] = x_in
        eps = net_forward(model.net, x_in)
        z = (z - s.beta[j] / np.sqrt(1.0 - s.alpha_bar[j]) * eps) / np.sqrt(s.alpha[j])
        if j > 1:
            z = z + np.sqrt(s.beta_tilde[j]) * draws.step_noises[j]
    z_t = z

    x_in_t = np.concatenate([z_t, time_embedding(t), emb])
    eps_t = net_forward(model.net, x_in_t)
    ab = s.alpha_bar[t]
    x0_hat = (z_t - np.sqrt(1.0 - ab) * eps_t) / np.sqrt(ab)

    loss = 0.0
    dloss_dx0 = np.zeros(SCENE_DIM)
    for rm in reward_models:
        r, r_grad = _reference_reward_and_grad(rm, prompt, x0_hat)
        w = cfg.reward_weights.get(rm.category, 1.0)
        phi, dphi = cfg.phi_and_grad(r)
        loss += cfg.lam * w * phi
        dloss_dx0 += cfg.lam * w * dphi * r_grad

    # in-scope step: gradient through eps_t with z_t held constant (kept)
    deps_t = dloss_dx0 * (-np.sqrt(1.0 - ab) / np.sqrt(ab))
    kept, dz_via_eps = net_backward(model.net, x_in_t, deps_t)
    kept_flat = flatten_grads(kept)

    # what full backpropagation through the chain would add (severed)
    dz = dloss_dx0 / np.sqrt(ab) + dz_via_eps[:SCENE_DIM]  # d loss / d z_t
    severed_flat = np.zeros_like(kept_flat)
    for j in range(t + 1, s.timesteps + 1):
        coef = s.beta[j] / np.sqrt(1.0 - s.alpha_bar[j])
        upstream_eps = -(coef / np.sqrt(s.alpha[j])) * dz
        pgrads, dz_in = net_backward(model.net, step_inputs[j], upstream_eps)
        severed_flat += flatten_grads(pgrads)
        dz = dz / np.sqrt(s.alpha[j]) + dz_in[:SCENE_DIM]
    return float(loss), kept_flat, severed_flat


def objective_J_loops(theta, spec):
    """Plain nested-loop re-implementation of the pairwise objective."""
    import itertools

    from itercomp.theory import chain_from_theta, trajectory_prob

    chain = chain_from_theta(theta)
    trajs = list(itertools.product(range(spec.n_states), repeat=spec.steps + 1))
    total = 0.0
    for c in range(spec.n_contexts):
        p_theta = [trajectory_prob(chain, tr, c) for tr in trajs]
        p_ref = [trajectory_prob(spec.ref, tr, c) for tr in trajs]
        lr = [np.log(a) - np.log(b) for a, b in zip(p_theta, p_ref)]
        ctx = 0.0
        for a, tr_a in enumerate(trajs):
            for b, tr_b in enumerate(trajs):
                if spec.reward[c, tr_a[0]] >= spec.reward[c, tr_b[0]]:
                    w, l = a, b
                else:
                    w, l = b, a
                d = spec.beta * (lr[w] - lr[l])
                ctx += p_theta[a] * p_theta[b] * (-np.logaddexp(0.0, -d))
        total += ctx
    return total / spec.n_contexts
