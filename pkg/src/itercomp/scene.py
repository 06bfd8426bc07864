"""Scenes, prompts, prompt embeddings, and the three compositional oracles.

A scene is a fixed 18-dim vector: 3 object slots x (present, x, y, hue,
shape, activity), slot-major.  Prompts are structured specifications over
those slots; the oracles score how well a scene satisfies a prompt on one
of three axes (attribute binding, spatial relations, non-spatial relations).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import GenerationError

N_SLOTS = 3
FIELDS_PER_SLOT = 6
SCENE_DIM = N_SLOTS * FIELDS_PER_SLOT  # 18
EMBED_DIM = 42

# per-slot field offsets
F_PRESENT, F_X, F_Y, F_HUE, F_SHAPE, F_ACTIVITY = range(FIELDS_PER_SLOT)

CATEGORIES = ("attribute", "spatial", "nonspatial")
RELATIONS = ("left_of", "right_of", "above", "below", "near")
NONSPATIAL_KINDS = ("interacting", "independent")

FIELD_NAMES = ("present", "x", "y", "hue", "shape", "activity")


@dataclass(frozen=True)
class OracleParams:
    """Soft-score temperatures; defaults spread gallery outputs over [0.1, 0.95]."""

    spatial_temp: float = 0.05
    near_scale: float = 0.04


DEFAULT_ORACLE_PARAMS = OracleParams()


@dataclass
class Scene:
    """Decoded scene: all fields in range, hue wrapped to [0, 1)."""

    vec: np.ndarray

    def slot(self, i: int) -> np.ndarray:
        return self.vec[i * FIELDS_PER_SLOT : (i + 1) * FIELDS_PER_SLOT]

    def present(self, i):
        return self.vec[i * FIELDS_PER_SLOT + F_PRESENT]

    def pos(self, i):
        base = i * FIELDS_PER_SLOT
        return self.vec[base + F_X], self.vec[base + F_Y]

    def hue(self, i):
        return self.vec[i * FIELDS_PER_SLOT + F_HUE]

    def shape_val(self, i):
        return self.vec[i * FIELDS_PER_SLOT + F_SHAPE]

    def activity(self, i):
        return self.vec[i * FIELDS_PER_SLOT + F_ACTIVITY]

    def to_json(self) -> dict:
        objects = []
        for i in range(N_SLOTS):
            objects.append({name: float(v) for name, v in zip(FIELD_NAMES, self.slot(i))})
        return {"objects": objects}

    @classmethod
    def from_json(cls, obj: dict) -> "Scene":
        vec = np.zeros(SCENE_DIM)
        for i, rec in enumerate(obj["objects"]):
            for f, name in enumerate(FIELD_NAMES):
                vec[i * FIELDS_PER_SLOT + f] = float(rec[name])
        return cls(vec)


def decode_scene(raw) -> Scene:
    """Clamp everything to [0, 1] except hue, which wraps to [0, 1). Idempotent."""
    raw = np.asarray(raw, dtype=float)
    if raw.shape != (SCENE_DIM,):
        raise ValueError(f"scene vector must have shape ({SCENE_DIM},), got {raw.shape}")
    v = raw.reshape(N_SLOTS, FIELDS_PER_SLOT).copy()
    hue = v[:, F_HUE] % 1.0
    v = np.clip(v, 0.0, 1.0)
    v[:, F_HUE] = hue
    return Scene(v.reshape(SCENE_DIM))


@dataclass(frozen=True)
class SlotSpec:
    required: bool = False
    target_hue: float | None = None
    target_shape: float | None = None


@dataclass(frozen=True)
class SpatialConstraint:
    relation: str
    i: int
    j: int


@dataclass(frozen=True)
class NonSpatialConstraint:
    kind: str
    i: int
    j: int


@dataclass(frozen=True)
class Prompt:
    prompt_id: str
    category: str
    slots: tuple = field(default_factory=tuple)
    spatial: tuple = field(default_factory=tuple)
    nonspatial: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if len(self.slots) != N_SLOTS:
            raise ValueError(f"prompt needs {N_SLOTS} slot specs")
        required = [i for i, s in enumerate(self.slots) if s.required]
        if not required:
            raise ValueError("prompt must require at least one slot")
        for c in self.spatial:
            if c.relation not in RELATIONS:
                raise ValueError(f"unknown relation {c.relation!r}")
            self._check_pair(c.i, c.j, required)
        if len(self.spatial) > 2:
            raise ValueError("at most 2 spatial constraints")
        for c in self.nonspatial:
            if c.kind not in NONSPATIAL_KINDS:
                raise ValueError(f"unknown kind {c.kind!r}")
            self._check_pair(c.i, c.j, required)
        if len(self.nonspatial) > 1:
            raise ValueError("at most 1 non-spatial constraint")

    @staticmethod
    def _check_pair(i, j, required):
        if i == j:
            raise ValueError("constraint needs two distinct slots")
        for k in (i, j):
            if k not in required:
                raise ValueError(f"constraint references non-required slot {k}")

    def required_slots(self) -> list:
        return [i for i, s in enumerate(self.slots) if s.required]

    def to_json(self) -> dict:
        return {
            "prompt_id": self.prompt_id,
            "category": self.category,
            "slots": [
                {
                    "required": s.required,
                    "target_hue": s.target_hue,
                    "target_shape": s.target_shape,
                }
                for s in self.slots
            ],
            "spatial": [{"relation": c.relation, "i": c.i, "j": c.j} for c in self.spatial],
            "nonspatial": [{"kind": c.kind, "i": c.i, "j": c.j} for c in self.nonspatial],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Prompt":
        return cls(
            prompt_id=obj["prompt_id"],
            category=obj["category"],
            slots=tuple(
                SlotSpec(s["required"], s["target_hue"], s["target_shape"]) for s in obj["slots"]
            ),
            spatial=tuple(
                SpatialConstraint(c["relation"], c["i"], c["j"]) for c in obj["spatial"]
            ),
            nonspatial=tuple(
                NonSpatialConstraint(c["kind"], c["i"], c["j"]) for c in obj["nonspatial"]
            ),
        )


def embed_prompt(prompt: Prompt) -> np.ndarray:
    """Deterministic 42-dim featurization; absent constraints embed as zero blocks."""
    emb = np.zeros(EMBED_DIM)
    for i, s in enumerate(prompt.slots):
        base = 4 * i
        if s.required:
            emb[base] = 1.0
            emb[base + 1] = np.cos(2.0 * np.pi * s.target_hue)
            emb[base + 2] = np.sin(2.0 * np.pi * s.target_hue)
            emb[base + 3] = s.target_shape
    off = 4 * N_SLOTS  # 12
    for k, c in enumerate(prompt.spatial):
        base = off + 11 * k
        emb[base + RELATIONS.index(c.relation)] = 1.0
        emb[base + 5 + c.i] = 1.0
        emb[base + 8 + c.j] = 1.0
    off += 22
    for c in prompt.nonspatial:
        emb[off + NONSPATIAL_KINDS.index(c.kind)] = 1.0
        emb[off + 2 + c.i] = 1.0
        emb[off + 5 + c.j] = 1.0
    return emb


def hue_distance(a: float, b: float) -> float:
    d = abs(a - b) % 1.0
    return min(d, 1.0 - d)


def oracle_attribute(prompt: Prompt, scene: Scene, params: OracleParams = DEFAULT_ORACLE_PARAMS) -> float:
    """Mean per required slot of present * hue-match * shape-match."""
    required = prompt.required_slots()
    if not required:
        return 1.0
    total = 0.0
    for i in required:
        s = prompt.slots[i]
        hue_term = max(0.0, 1.0 - 2.0 * hue_distance(scene.hue(i), s.target_hue))
        shape_term = max(0.0, 1.0 - abs(scene.shape_val(i) - s.target_shape))
        total += scene.present(i) * hue_term * shape_term
    return total / len(required)


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


def _spatial_constraint_score(c: SpatialConstraint, scene: Scene, params: OracleParams) -> float:
    xi, yi = scene.pos(c.i)
    xj, yj = scene.pos(c.j)
    if c.relation == "left_of":
        geom = _sigmoid((xj - xi) / params.spatial_temp)
    elif c.relation == "right_of":
        geom = _sigmoid((xi - xj) / params.spatial_temp)
    elif c.relation == "above":  # y increases upward
        geom = _sigmoid((yi - yj) / params.spatial_temp)
    elif c.relation == "below":
        geom = _sigmoid((yj - yi) / params.spatial_temp)
    elif c.relation == "near":
        geom = np.exp(-((xi - xj) ** 2 + (yi - yj) ** 2) / params.near_scale)
    else:  # pragma: no cover - validated at construction
        raise ValueError(c.relation)
    return float(geom) * scene.present(c.i) * scene.present(c.j)


def oracle_spatial(prompt: Prompt, scene: Scene, params: OracleParams = DEFAULT_ORACLE_PARAMS) -> float:
    if not prompt.spatial:
        return 1.0
    scores = [_spatial_constraint_score(c, scene, params) for c in prompt.spatial]
    return float(np.mean(scores))


def oracle_nonspatial(prompt: Prompt, scene: Scene, params: OracleParams = DEFAULT_ORACLE_PARAMS) -> float:
    if not prompt.nonspatial:
        return 1.0
    scores = []
    for c in prompt.nonspatial:
        ai, aj = scene.activity(c.i), scene.activity(c.j)
        if c.kind == "interacting":
            s = scene.present(c.i) * scene.present(c.j) * ai * aj * (1.0 - abs(ai - aj))
        else:
            s = 1.0 - ai * aj
        scores.append(s)
    return float(np.mean(scores))


ORACLES = {
    "attribute": oracle_attribute,
    "spatial": oracle_spatial,
    "nonspatial": oracle_nonspatial,
}


def _distinct_pairs(slots: list) -> list:
    return [(a, b) for ai, a in enumerate(slots) for b in slots[ai + 1 :]]


# mix weights chosen so constraint scores stay informative under rater noise:
# two averaged constraints (and "interacting") separate generators much more
# cleanly than a single saturating constraint, and "near" most of all
_P_SPATIAL_THREE_SLOTS = 0.85
_RELATION_WEIGHTS = (0.175, 0.175, 0.175, 0.175, 0.30)  # aligned with RELATIONS
_P_INTERACTING = 0.7


def sample_prompt(rng: np.random.Generator, category: str) -> Prompt:
    """Random prompt of one category; fully determined by the rng stream."""
    if category not in CATEGORIES:
        raise ValueError(f"unknown category {category!r}")
    if category == "attribute":
        n_req = int(rng.integers(1, N_SLOTS + 1))
    elif category == "spatial":
        n_req = 3 if rng.random() < _P_SPATIAL_THREE_SLOTS else 2
    else:
        n_req = int(rng.integers(2, N_SLOTS + 1))
    req = sorted(rng.choice(N_SLOTS, size=n_req, replace=False).tolist())
    slots = [SlotSpec() for _ in range(N_SLOTS)]
    for i in req:
        slots[i] = SlotSpec(True, float(rng.random()), float(rng.random()))
    spatial, nonspatial = (), ()
    if category == "spatial":
        n_c = 1 if n_req == 2 else 2
        pairs = _distinct_pairs(req)
        pick = rng.choice(len(pairs), size=n_c, replace=False)
        constraints = []
        for p in pick:
            i, j = pairs[int(p)]
            if rng.random() < 0.5:
                i, j = j, i
            relation = RELATIONS[int(rng.choice(len(RELATIONS), p=_RELATION_WEIGHTS))]
            constraints.append(SpatialConstraint(relation, i, j))
        spatial = tuple(constraints)
    elif category == "nonspatial":
        pairs = _distinct_pairs(req)
        i, j = pairs[int(rng.integers(len(pairs)))]
        kind = "interacting" if rng.random() < _P_INTERACTING else "independent"
        nonspatial = (NonSpatialConstraint(kind, i, j),)
    prompt_id = f"{category}-{int(rng.integers(2**32)):08x}"
    return Prompt(prompt_id, category, tuple(slots), spatial, nonspatial)


CANONICAL_MIN_SCORE = 0.95
CANONICAL_MAX_TRIES = 1000
_NEAR_PROPOSAL_STD = 0.02
# directional margins proposed just above the acceptance threshold, so that
# generator position noise spreads constraint scores instead of saturating them
_MARGIN_LO, _MARGIN_HI = 0.15, 0.20
# activity targets sit off the [0, 1] clamp boundaries for the same reason
_ACTIVITY_INTERACTING = 0.98   # 0.98^2 >= 0.95
_ACTIVITY_INDEPENDENT = 0.20   # 1 - 0.2^2 >= 0.95

# directional relation -> (axis, sign) meaning coord[axis](j) - coord[axis](i)
# should be sign * margin
_DIRECTIONAL = {
    "left_of": (0, 1.0),
    "right_of": (0, -1.0),
    "above": (1, -1.0),
    "below": (1, 1.0),
}


def _propose_positions(prompt: Prompt, rng: np.random.Generator) -> dict:
    """One position proposal per required slot.  Constrained slots are placed
    relative to their partners near the acceptance boundary; everything else
    is uniform.  Acceptance is decided by the constraint scores alone."""
    placed = {}
    for c in prompt.spatial:
        if c.i in placed and c.j in placed:
            continue
        if c.relation == "near":
            anchor, dep = (c.i, c.j) if c.i in placed or c.j not in placed else (c.j, c.i)
            if anchor not in placed:
                placed[anchor] = np.array([rng.random(), rng.random()])
            placed[dep] = placed[anchor] + rng.normal(0.0, _NEAR_PROPOSAL_STD, size=2)
            continue
        axis, sign = _DIRECTIONAL[c.relation]
        anchor, dep, direction = (c.i, c.j, sign) if c.i in placed or c.j not in placed else (c.j, c.i, -sign)
        if anchor not in placed:
            placed[anchor] = np.array([rng.random(), rng.random()])
        pos = np.array([rng.random(), rng.random()])
        pos[axis] = placed[anchor][axis] + direction * rng.uniform(_MARGIN_LO, _MARGIN_HI)
        placed[dep] = pos
    for i in prompt.required_slots():
        if i not in placed:
            placed[i] = np.array([rng.random(), rng.random()])
    return placed


def canonical_scene(prompt: Prompt, rng: np.random.Generator,
                    params: OracleParams = DEFAULT_ORACLE_PARAMS) -> Scene:
    """Ground-truth scene: targets copied exactly, positions rejection-sampled
    until every spatial constraint scores >= 0.95 (<= 1000 proposals)."""
    vec = np.zeros(SCENE_DIM)
    req = prompt.required_slots()
    for i in req:
        s = prompt.slots[i]
        base = i * FIELDS_PER_SLOT
        vec[base + F_PRESENT] = 1.0
        vec[base + F_HUE] = s.target_hue
        vec[base + F_SHAPE] = s.target_shape
        vec[base + F_ACTIVITY] = 0.5
    for c in prompt.nonspatial:
        a = _ACTIVITY_INTERACTING if c.kind == "interacting" else _ACTIVITY_INDEPENDENT
        vec[c.i * FIELDS_PER_SLOT + F_ACTIVITY] = a
        vec[c.j * FIELDS_PER_SLOT + F_ACTIVITY] = a

    for _ in range(CANONICAL_MAX_TRIES):
        trial = vec.copy()
        for i, (x, y) in _propose_positions(prompt, rng).items():
            trial[i * FIELDS_PER_SLOT + F_X] = x
            trial[i * FIELDS_PER_SLOT + F_Y] = y
        scene = decode_scene(trial)
        if all(
            _spatial_constraint_score(c, scene, params) >= CANONICAL_MIN_SCORE
            for c in prompt.spatial
        ):
            return scene
    raise GenerationError(
        f"no canonical scene for prompt {prompt.prompt_id} after {CANONICAL_MAX_TRIES} tries",
        prompt_id=prompt.prompt_id,
    )


# --- oracle symmetries -----------------------------------------------------
# Transformations that leave every oracle score exactly unchanged when
# applied jointly to a prompt and its scenes: relabeling slots, rotating all
# hues, mirroring either axis (with the matching relation rewrite), reordering
# constraints, and swapping a constraint's endpoints (with rewrite).  Reward
# training uses them as label-preserving augmentation.

_MIRROR_X_RELATION = {"left_of": "right_of", "right_of": "left_of"}
_MIRROR_Y_RELATION = {"above": "below", "below": "above"}
_SWAP_RELATION = {"left_of": "right_of", "right_of": "left_of", "above": "below", "below": "above", "near": "near"}


@dataclass(frozen=True)
class OracleSymmetry:
    perm: tuple          # slot relabeling: old slot i becomes slot perm[i]
    hue_shift: float
    mirror_x: bool
    mirror_y: bool
    reverse_constraints: bool
    swap_endpoints: tuple  # one flag per possible constraint (2 spatial + 1 non-spatial)


def sample_symmetry(rng: np.random.Generator) -> OracleSymmetry:
    return OracleSymmetry(
        perm=tuple(int(i) for i in rng.permutation(N_SLOTS)),
        hue_shift=float(rng.random()),
        mirror_x=bool(rng.random() < 0.5),
        mirror_y=bool(rng.random() < 0.5),
        reverse_constraints=bool(rng.random() < 0.5),
        swap_endpoints=tuple(bool(rng.random() < 0.5) for _ in range(3)),
    )


def _transform_relation(relation: str, sym: OracleSymmetry, swap: bool) -> str:
    if sym.mirror_x:
        relation = _MIRROR_X_RELATION.get(relation, relation)
    if sym.mirror_y:
        relation = _MIRROR_Y_RELATION.get(relation, relation)
    if swap:
        relation = _SWAP_RELATION[relation]
    return relation


def transform_prompt(prompt: Prompt, sym: OracleSymmetry) -> Prompt:
    slots = [SlotSpec()] * N_SLOTS
    for i, s in enumerate(prompt.slots):
        if s.required:
            slots[sym.perm[i]] = SlotSpec(True, (s.target_hue + sym.hue_shift) % 1.0, s.target_shape)
        else:
            slots[sym.perm[i]] = s
    spatial = []
    for k, c in enumerate(prompt.spatial):
        swap = sym.swap_endpoints[k]
        i, j = (c.j, c.i) if swap else (c.i, c.j)
        spatial.append(
            SpatialConstraint(_transform_relation(c.relation, sym, swap), sym.perm[i], sym.perm[j])
        )
    if sym.reverse_constraints:
        spatial.reverse()
    nonspatial = []
    for c in prompt.nonspatial:
        i, j = (c.j, c.i) if sym.swap_endpoints[2] else (c.i, c.j)
        nonspatial.append(NonSpatialConstraint(c.kind, sym.perm[i], sym.perm[j]))
    return Prompt(prompt.prompt_id, prompt.category, tuple(slots), tuple(spatial), tuple(nonspatial))


def transform_scene_vec(vec: np.ndarray, sym: OracleSymmetry) -> np.ndarray:
    v = np.asarray(vec, dtype=float).reshape(N_SLOTS, FIELDS_PER_SLOT)
    out = np.empty_like(v)
    for i in range(N_SLOTS):
        out[sym.perm[i]] = v[i]
    out[:, F_HUE] = (out[:, F_HUE] + sym.hue_shift) % 1.0
    if sym.mirror_x:
        out[:, F_X] = 1.0 - out[:, F_X]
    if sym.mirror_y:
        out[:, F_Y] = 1.0 - out[:, F_Y]
    return out.reshape(SCENE_DIM)


def transform_scene_rows(mat: np.ndarray, sym: OracleSymmetry) -> np.ndarray:
    """transform_scene_vec applied to every row of an (n, SCENE_DIM) array."""
    v = np.asarray(mat, dtype=float).reshape(len(mat), N_SLOTS, FIELDS_PER_SLOT)
    out = np.empty_like(v)
    for i in range(N_SLOTS):
        out[:, sym.perm[i]] = v[:, i]
    out[:, :, F_HUE] = (out[:, :, F_HUE] + sym.hue_shift) % 1.0
    if sym.mirror_x:
        out[:, :, F_X] = 1.0 - out[:, :, F_X]
    if sym.mirror_y:
        out[:, :, F_Y] = 1.0 - out[:, :, F_Y]
    return out.reshape(len(mat), SCENE_DIM)


def transform_scene_grad(grad: np.ndarray, sym: OracleSymmetry) -> np.ndarray:
    """Pull a gradient w.r.t. a transformed scene back to the original scene.

    The scene transform is affine: slot relabeling permutes blocks, mirrors
    negate the x/y slope, and the hue shift has unit slope, so the adjoint is
    a signed permutation.
    """
    g = np.asarray(grad, dtype=float).reshape(N_SLOTS, FIELDS_PER_SLOT)
    out = np.empty_like(g)
    for i in range(N_SLOTS):
        out[i] = g[sym.perm[i]]
    if sym.mirror_x:
        out[:, F_X] = -out[:, F_X]
    if sym.mirror_y:
        out[:, F_Y] = -out[:, F_Y]
    return out.reshape(SCENE_DIM)
