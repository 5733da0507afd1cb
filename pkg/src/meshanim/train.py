"""Optimizer, PCA motion basis, synthetic data and the training loop."""

from __future__ import annotations

import dataclasses
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import seeding
from . import tensor as T
from .mesh import TriangleMesh, VertexMask, icosphere
from .model import (BETA_REG, BETA_SWD, BETA_VELOCITY, ModelConfig, Params, SequenceSample,
                    forward_sequence, init_params, loss_total)
from .ot import Normalization, sample_projections
from .resample import Hierarchy

FPS = 30.0
AUDIO_RATE = 50.0
FEATURE_DIM = 8
MAX_CHUNK_FRAMES = 16
CLIP_NORM = 10.0

HISTORY_COLUMNS = ("epoch", "steps", "train_loss", "val_loss", "l_rec", "l_vel", "l_swd", "l_reg")


class TrainingError(RuntimeError):
    def __init__(self, message, step):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 100
    max_steps: int | None = None
    seed: int = 0
    gamma: float = 1.0
    n_projections: int = 100
    p: float = 2.0
    val_fraction: float = 0.25
    loss_betas: tuple = (BETA_VELOCITY, BETA_SWD, BETA_REG)
    clip_norm: float | None = CLIP_NORM
    max_chunk_frames: int = MAX_CHUNK_FRAMES

    def __post_init__(self):
        object.__setattr__(self, "loss_betas", tuple(float(b) for b in self.loss_betas))
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning rate and weight decay must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ValueError("invalid Adam hyper-parameters")
        if self.epochs < 1 or (self.max_steps is not None and self.max_steps < 0):
            raise ValueError("epochs must be >= 1 and max_steps >= 0")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.n_projections < 1 or self.p < 1 or self.max_chunk_frames < 1:
            raise ValueError("n_projections, p and max_chunk_frames must be positive (p >= 1)")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- PCA

@dataclass(frozen=True, eq=False)
class PCABasis:
    mean: np.ndarray  # (D,)
    components: np.ndarray  # (k, D), orthonormal rows
    explained_variance: np.ndarray  # (k,)
    total_variance: float

    @property
    def explained_variance_ratio(self):
        if self.total_variance == 0:
            return np.zeros_like(self.explained_variance)
        return self.explained_variance / self.total_variance

    def transform(self, x):
        return (np.asarray(x) - self.mean) @ self.components.T

    def reconstruct(self, coeffs):
        return self.mean + np.asarray(coeffs) @ self.components


def pca_fit(data, k=50, seed=0, sweeps=20, rank_tol=1e-10) -> PCABasis:
    """Top-``k`` principal components of the rows of ``data`` (S, D).

    Orthogonal subspace iteration on the smaller of the two Gram
    matrices, finished with a Rayleigh-Ritz step.  The largest-magnitude
    entry of each component is made positive.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("pca_fit needs at least two samples in an (S, D) array")
    if k < 1:
        raise ValueError("k must be >= 1")
    s, d = x.shape
    mean = x.mean(axis=0)
    xc = x - mean
    gram_rows = s < d
    g = xc @ xc.T if gram_rows else xc.T @ xc
    dim = g.shape[0]
    m = min(k, dim)
    q = np.linalg.qr(seeding.rng(seed, "pca").standard_normal((dim, m)))[0]
    for _ in range(sweeps):
        q = np.linalg.qr(g @ q)[0]
    evals, evecs = np.linalg.eigh(q.T @ g @ q)
    order = np.argsort(evals)[::-1]
    evals = np.maximum(evals[order], 0.0)
    vecs = q @ evecs[:, order]
    top = evals[0] if len(evals) else 0.0
    rank = int(np.sum(evals > rank_tol * top)) if top > 0 else 0
    if rank < k:
        warnings.warn(f"requested {k} components but the centered data has rank {rank}", RuntimeWarning)
    evals, vecs = evals[:rank], vecs[:, :rank]
    if gram_rows:
        comps = (xc.T @ vecs) / np.sqrt(evals)
    else:
        comps = vecs
    comps = comps.T
    if rank:
        # re-orthonormalize against round-off, keeping the order
        qm, r = np.linalg.qr(comps.T)
        comps = (qm * np.where(np.diag(r) < 0, -1.0, 1.0)).T
        pivot = np.argmax(np.abs(comps), axis=1)
        comps *= np.where(comps[np.arange(rank), pivot] < 0, -1.0, 1.0)[:, None]
    total = float(np.sum(xc * xc) / (s - 1))
    return PCABasis(mean, comps.reshape(rank, d), evals / (s - 1), total)


# ---------------------------------------------------------------- AdamW

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    steps: int = 0


def adamw_step(params: dict, grads: dict, state: AdamState, config: TrainConfig, step_index=None):
    """One AdamW update on name -> array dicts; returns (new params, state).

    Weight decay is decoupled: ``p <- p - lr*wd*p`` before the Adam step.
    ``step_index`` is the number of updates already applied (defaults to
    ``state.steps``).
    """
    t = (state.steps if step_index is None else int(step_index)) + 1
    lr, wd = config.learning_rate, config.weight_decay
    b1, b2 = config.beta1, config.beta2
    out = {}
    for name, p in params.items():
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise T.NonFiniteError(f"non-finite gradient for {name}")
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        decayed = p - lr * wd * p
        out[name] = decayed - lr * m_hat / (np.sqrt(v_hat) + config.eps)
    state.steps = t
    return out, state


def clip_gradients(grads: dict, max_norm):
    """Scale all gradients so their global norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is None or total <= max_norm:
        return grads, total
    factor = max_norm / total
    return {k: g * factor for k, g in grads.items()}, total


# ---------------------------------------------------------------- synthetic data

@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    template: TriangleMesh
    samples: list
    masks: dict  # label -> VertexMask
    envelopes: list  # per sequence, e(t) at frame times


def synth_masks(template: TriangleMesh):
    n = template.n_vertices
    order = np.argsort(template.vertices[:, 2], kind="stable")
    return {
        "lip": VertexMask(order[: max(1, int(round(0.1 * n)))], "lip"),
        "face": VertexMask(order[: max(1, int(round(0.4 * n)))], "face"),
        "head": VertexMask(np.arange(n), "head"),
    }


def jaw_field(template: TriangleMesh, lip: VertexMask, amplitude=0.15):
    """Smooth downward bump centered on the lip cap, zero far from it."""
    v = template.vertices
    center = v[lip.indices].mean(axis=0)
    radius = 1.5 * np.max(np.linalg.norm(v[lip.indices] - center, axis=1))
    radius = max(radius, template.mean_edge_length())  # single-vertex lip on tiny meshes
    r = np.linalg.norm(v - center, axis=1) / radius
    w = np.where(r < 1, (1 - r * r) ** 2, 0.0)
    direction = np.array([0.0, -0.3, -1.0]) / np.sqrt(1.09)
    return amplitude * w[:, None] * direction


def _envelope(rng):
    """Smooth random envelope clipped to [0, 1]; reaches 0 on part of the range."""
    freqs = rng.uniform(0.5, 3.0, size=3)
    phases = rng.uniform(0, 2 * np.pi, size=3)
    amps = rng.uniform(0.5, 1.0, size=3)
    offset = rng.uniform(0.2, 0.5)
    def e(times):
        s = np.sin(2 * np.pi * freqs[None] * np.asarray(times)[:, None] + phases[None]) @ amps / amps.sum()
        return np.clip(offset + 0.8 * s, 0.0, 1.0)
    return e


def _smooth_fields(rng, points, count):
    """``count`` spatially smooth scalar fields on ``points`` bounded by 1."""
    k = rng.standard_normal((count, 3, 3))
    ph = rng.uniform(0, 2 * np.pi, size=(count, 3))
    waves = np.sin(np.einsum("nd,cwd->cnw", points, k) + ph[:, None, :])
    return waves.mean(axis=2)


def synth_dataset(seed=1, n_sequences=8, frames_per_seq=16, fps=FPS, audio_rate=AUDIO_RATE,
                  subdivisions=3, noise=0.002) -> SyntheticDataset:
    """Deterministic talking-sphere dataset with a learnable audio->motion map."""
    if n_sequences < 1 or frames_per_seq < 1:
        raise ValueError("need at least one sequence of at least one frame")
    template = icosphere(subdivisions)
    masks = synth_masks(template)
    field = jaw_field(template, masks["lip"])
    n_audio = max(1, int(round(frames_per_seq * audio_rate / fps)))
    band = np.linspace(2.0, 20.0, FEATURE_DIM - 1)
    samples, envelopes = [], []
    for i in range(n_sequences):
        rng = seeding.rng(seed, "synth", i)
        env = _envelope(rng)
        ta = np.arange(n_audio) / audio_rate
        tv = np.arange(frames_per_seq) / fps
        ea = env(ta)
        feats = np.empty((n_audio, FEATURE_DIM))
        feats[:, 0] = ea + 0.01 * rng.standard_normal(n_audio)
        phase = rng.uniform(0, 2 * np.pi, size=FEATURE_DIM - 1)
        carrier = np.sin(2 * np.pi * band[None] * ta[:, None] + phase[None])
        feats[:, 1:] = ea[:, None] * carrier + 0.05 * rng.standard_normal((n_audio, FEATURE_DIM - 1))
        ev = env(tv)
        fields = _smooth_fields(rng, template.vertices, 3)  # (3, N): one per axis
        drift = np.sin(2 * np.pi * rng.uniform(0.2, 1.0, size=3)[None] * tv[:, None]
                       + rng.uniform(0, 2 * np.pi, size=3)[None])  # (T, 3)
        wobble = noise * drift[:, None, :] * fields.T[None]
        targets = template.vertices[None] + ev[:, None, None] * field[None] + wobble
        samples.append(SequenceSample(template, feats, targets, fps=fps, name=f"seq{i:03d}"))
        envelopes.append(ev)
    return SyntheticDataset(template, samples, masks, envelopes)


# ---------------------------------------------------------------- data handling

def chunk_sample(sample: SequenceSample, max_frames=MAX_CHUNK_FRAMES):
    """Split into consecutive chunks of at most ``max_frames`` frames.

    Features are cut at the proportional positions, so every chunk keeps at
    least one feature row.
    """
    t = sample.n_frames
    if t <= max_frames:
        return [sample]
    ratio = len(sample.features) / t
    out = []
    for k, start in enumerate(range(0, t, max_frames)):
        stop = min(t, start + max_frames)
        fa = min(int(math.floor(start * ratio)), len(sample.features) - 1)
        fb = max(fa + 1, int(math.floor(stop * ratio)) if stop < t else len(sample.features))
        out.append(SequenceSample(sample.template, sample.features[fa:fb], sample.targets[start:stop],
                                  sample.fps, f"{sample.name}#{k}"))
    return out


def split_dataset(samples, val_fraction, seed):
    """Deterministic (train, validation) split of a sample list."""
    n = len(samples)
    n_val = int(round(val_fraction * n)) if n > 1 else 0
    n_val = min(n_val, n - 1)
    if val_fraction > 0 and n > 1:
        n_val = max(n_val, 1)
    perm = seeding.rng(seed, "split").permutation(n)
    val = sorted(perm[:n_val].tolist())
    train = sorted(perm[n_val:].tolist())
    return [samples[i] for i in train], [samples[i] for i in val]


def fit_motion_basis(samples, k=50, seed=0):
    disp = np.concatenate([(s.targets - s.template.vertices[None]).reshape(s.n_frames, -1) for s in samples])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return pca_fit(disp, k, seed)


# ---------------------------------------------------------------- training loop

@dataclass
class _Item:
    sample: SequenceSample
    normalization: Normalization


def _item_loss(item: _Item, params: Params, hierarchy, model_config, config: TrainConfig, projections,
               with_grad=True):
    s = item.sample
    with T.Tape() as tape:
        pred = forward_sequence(s.template, s.features, s.n_frames, params, hierarchy, model_config)
        terms = loss_total(pred, s.targets, params, s.template.faces, config.gamma, projections,
                           config.loss_betas, config.p, item.normalization)
    grads = None
    if with_grad:
        names = list(params)
        grads = dict(zip(names, tape.gradient(terms.total, [params[k] for k in names])))
    comps = np.array([terms.total.item(), terms.reconstruction, terms.velocity, terms.swd, terms.regularization])
    return comps, grads


class _Runner:
    def __init__(self, threads):
        self.threads = max(1, int(threads))
        self.pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None

    def map(self, fn, items):
        if self.pool is None:
            return [fn(i) for i in items]
        return list(self.pool.map(fn, items))  # results come back in submission order

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


def _evaluate(items, params, hierarchy, model_config, config, projections, runner):
    if not items:
        return None
    res = runner.map(lambda it: _item_loss(it, params, hierarchy, model_config, config, projections, False)[0],
                     items)
    total = np.zeros(5)
    for r in res:
        total = total + r
    return total / len(items)


@dataclass
class TrainResult:
    params: Params
    history: list
    model_config: ModelConfig
    pca: PCABasis
    best_epoch: int
    final_params: Params
    n_train: int
    n_val: int


def train(config: TrainConfig, samples, hierarchy: Hierarchy, model_config: ModelConfig | None = None,
          threads=1, log=None) -> TrainResult:
    """Minibatch AdamW training with validation-based model selection.

    History row 0 evaluates the initial parameters; row ``e`` holds the mean
    batch loss over epoch ``e`` and the validation loss after it.  Returns
    the parameters with the lowest validation loss (the last ones when
    there is no validation split).
    """
    samples = list(samples)
    if not samples:
        raise ValueError("empty dataset")
    template = samples[0].template
    for s in samples:
        if not s.template.same_topology(template):
            raise ValueError(f"sample {s.name} has a different topology from the first sample")
    train_s, val_s = split_dataset(samples, config.val_fraction, config.seed)
    if model_config is None:
        model_config = ModelConfig(n_vertices=template.n_vertices, feature_dim=samples[0].features.shape[1])
    pca = fit_motion_basis(train_s, model_config.n_components, seeding.derive_seed(config.seed, "pca"))
    params = init_params(model_config, hierarchy, pca, seed=seeding.derive_seed(config.seed, "init"))

    def items(seq):
        out = []
        for s in seq:
            for c in chunk_sample(s, config.max_chunk_frames):
                out.append(_Item(c, Normalization.from_frames(c.targets, c.template.faces)))
        return out

    train_items, val_items = items(train_s), items(val_s)
    eval_proj = sample_projections(6, config.n_projections, seeding.derive_seed(config.seed, "eval-projections"))
    runner = _Runner(threads)
    state = AdamState()
    history = []

    def row(epoch, steps, tr, va):
        history.append({"epoch": epoch, "steps": steps, "train_loss": float(tr[0]),
                        "val_loss": float(va[0]) if va is not None else float("nan"),
                        "l_rec": float(tr[1]), "l_vel": float(tr[2]), "l_swd": float(tr[3]), "l_reg": float(tr[4])})
        if log:
            log(history[-1])

    try:
        va = _evaluate(val_items, params, hierarchy, model_config, config, eval_proj, runner)
        tr = _evaluate(train_items, params, hierarchy, model_config, config, eval_proj, runner)
        row(0, 0, tr, va)
        best = (va[0] if va is not None else np.inf, 0, params)
        step = 0
        max_steps = config.max_steps
        for epoch in range(1, config.epochs + 1):
            if max_steps is not None and step >= max_steps:
                break
            order = seeding.rng(config.seed, "shuffle", epoch).permutation(len(train_items))
            acc = np.zeros(5)
            n_batches = 0
            for start in range(0, len(order), config.batch_size):
                if max_steps is not None and step >= max_steps:
                    break
                batch = [train_items[i] for i in order[start:start + config.batch_size]]
                proj = sample_projections(6, config.n_projections, seeding.derive_seed(config.seed, "projections", step))
                try:
                    results = runner.map(
                        lambda it: _item_loss(it, params, hierarchy, model_config, config, proj), batch)
                    comps = np.zeros(5)
                    grads = {k: np.zeros(v.shape) for k, v in params.items()}
                    for c, g in results:
                        comps = comps + c
                        for k in grads:
                            grads[k] = grads[k] + g[k]
                    comps = comps / len(batch)
                    grads = {k: g / len(batch) for k, g in grads.items()}
                    grads, _ = clip_gradients(grads, config.clip_norm)
                    new, state = adamw_step(params.arrays(), grads, state, config, step)
                    params = Params.from_arrays(new)
                except (T.NonFiniteError, FloatingPointError) as exc:
                    raise TrainingError(str(exc), step) from exc
                acc = acc + comps
                n_batches += 1
                step += 1
            if n_batches == 0:
                break
            va = _evaluate(val_items, params, hierarchy, model_config, config, eval_proj, runner)
            row(epoch, step, acc / n_batches, va)
            if va is not None and va[0] < best[0]:
                best = (va[0], epoch, params)
        if va is None:
            best = (np.inf, history[-1]["epoch"], params)
    finally:
        runner.close()
    return TrainResult(best[2], history, model_config, pca, best[1], params, len(train_s), len(val_s))


def format_history(history) -> str:
    """CSV text with full-precision floats (``repr``) for bitwise comparison."""
    lines = [",".join(HISTORY_COLUMNS)]
    for r in history:
        lines.append(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in HISTORY_COLUMNS))
    return "\n".join(lines) + "\n"
