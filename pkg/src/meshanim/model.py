"""Template-conditioned audio-to-mesh-motion network and its training losses.

The template mesh passes through Chebyshev convolutions and selection
pooling down the resampling hierarchy to a latent code.  Audio features go
through a temporal convolution stack and are linearly resampled to the
frame count.  Per frame, the concatenated codes drive two branches whose
outputs add up to the vertex displacement: a linear map onto PCA motion
components, and a refinement decoder that mirrors the mesh encoder with
barycentric unpooling.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .mesh import TriangleMesh
from .ot import Normalization, ProjectionSet, swd_loss
from .ottk import load_tensor, read_json, save_tensor, write_json
from .resample import Hierarchy, load_hierarchy, save_hierarchy
from .spectral import ChebConvLayer, cheb_conv

BETA_VELOCITY = 10.0
BETA_SWD = 1.0
BETA_REG = 0.01


@dataclass(frozen=True)
class ModelConfig:
    n_vertices: int
    feature_dim: int = 8
    latent_dim: int = 64
    code_dim: int = 64
    audio_channels: tuple = (64, 64, 64)
    kernel_width: int = 5
    mesh_channels: tuple = (16, 32, 32)
    cheb_order: int = 6
    n_components: int = 50

    def __post_init__(self):
        object.__setattr__(self, "audio_channels", tuple(self.audio_channels))
        object.__setattr__(self, "mesh_channels", tuple(self.mesh_channels))
        if self.kernel_width % 2 != 1:
            raise ValueError("kernel_width must be odd for same padding")
        if self.audio_channels[-1] != self.code_dim:
            raise ValueError("last audio channel count must equal code_dim")

    @property
    def refine_channels(self):
        """Output widths of the refinement convolutions, coarse to fine."""
        return tuple(reversed(self.mesh_channels[:-1])) + (3,)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class SequenceSample:
    template: TriangleMesh
    features: np.ndarray  # (T_a, F)
    targets: np.ndarray  # (T, N, 3)
    fps: float = 30.0
    name: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.targets.ndim != 3 or self.targets.shape[0] < 1:
            raise ValueError("targets must be (T, N, 3) with T >= 1")
        if self.targets.shape[1] != self.template.n_vertices:
            raise ValueError(f"target topology ({self.targets.shape[1]} vertices) differs from "
                             f"template ({self.template.n_vertices})")
        if self.features.ndim != 2 or len(self.features) < 1:
            raise ValueError("features must be a non-empty (T_a, F) array")

    @property
    def n_frames(self):
        return self.targets.shape[0]


class Params(dict):
    """Ordered mapping of parameter name to trainable tensor."""

    def arrays(self):
        return {k: v.data for k, v in self.items()}

    @classmethod
    def from_arrays(cls, arrays):
        return cls((k, T.Tensor(v, requires_grad=True)) for k, v in arrays.items())

    def copy(self):
        return Params.from_arrays(self.arrays())


def _glorot(rng, fan_in, fan_out, shape=None):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


def init_params(config: ModelConfig, hierarchy: Hierarchy, pca=None, seed=0) -> Params:
    """Fresh parameters; the PCA branch starts from ``pca`` when given."""
    if hierarchy.depth != len(config.mesh_channels):
        raise ValueError(f"hierarchy depth {hierarchy.depth} does not match "
                         f"{len(config.mesh_channels)} mesh encoder stages")
    rng = np.random.default_rng(seed)
    arrays = {}
    k = config.cheb_order
    f_in = 3
    for level, f_out in enumerate(config.mesh_channels):
        layer = ChebConvLayer.init(f_in, f_out, k, rng)
        arrays[f"cheb{level}.theta"] = layer.theta.data
        arrays[f"cheb{level}.bias"] = layer.bias.data
        f_in = f_out
    coarse = hierarchy.sizes[-1] * config.mesh_channels[-1]
    arrays["encoder.fc.weight"] = _glorot(rng, coarse, config.latent_dim)
    arrays["encoder.fc.bias"] = np.zeros(config.latent_dim)

    c_in = config.feature_dim
    for i, c_out in enumerate(config.audio_channels):
        arrays[f"audio.conv{i}.weight"] = _glorot(rng, config.kernel_width * c_in, c_out)
        arrays[f"audio.conv{i}.bias"] = np.zeros(c_out)
        c_in = c_out

    joint = config.latent_dim + config.code_dim
    n = config.n_vertices
    if pca is not None:
        basis, mean = np.asarray(pca.components), np.asarray(pca.mean)
    else:
        basis, mean = np.zeros((config.n_components, 3 * n)), np.zeros(3 * n)
    if basis.ndim != 2 or basis.shape[1] != 3 * n or len(basis) > config.n_components:
        raise ValueError(f"PCA basis shape {basis.shape} incompatible with ({config.n_components}, {3 * n})")
    if len(basis) < config.n_components:
        # rank-deficient training data: unused components start at zero
        basis = np.vstack([basis, np.zeros((config.n_components - len(basis), 3 * n))])
    arrays["motion.coeff.weight"] = _glorot(rng, joint, config.n_components)
    arrays["motion.coeff.bias"] = np.zeros(config.n_components)
    arrays["motion.basis"] = basis
    arrays["motion.mean"] = mean

    arrays["refine.fc.weight"] = _glorot(rng, joint, coarse)
    arrays["refine.fc.bias"] = np.zeros(coarse)
    f_in = config.mesh_channels[-1]
    for step, f_out in enumerate(config.refine_channels):
        level = hierarchy.depth - 1 - step
        layer = ChebConvLayer.init(f_in, f_out, k, rng)
        arrays[f"refine.cheb{level}.theta"] = layer.theta.data
        arrays[f"refine.cheb{level}.bias"] = layer.bias.data
        f_in = f_out
    return Params.from_arrays(arrays)


def _layer(params, prefix):
    return ChebConvLayer(params[f"{prefix}.theta"], params[f"{prefix}.bias"])


# ---------------------------------------------------------------- encoders

def encode_mesh(template, hierarchy: Hierarchy, params: Params):
    """Latent code (1, latent_dim) of the template vertex positions."""
    verts = template.vertices if isinstance(template, TriangleMesh) else np.asarray(template)
    if verts.shape[0] != hierarchy.sizes[0]:
        raise ValueError(f"template has {verts.shape[0]} vertices, hierarchy expects {hierarchy.sizes[0]}")
    x = T.Tensor(verts)
    for level in range(hierarchy.depth):
        x = T.relu(cheb_conv(hierarchy.scaled[level], x, _layer(params, f"cheb{level}")))
        x = T.sparse_matmul(hierarchy.levels[level].down, x)
    flat = T.reshape(x, (1, -1))
    return T.matmul(flat, params["encoder.fc.weight"]) + params["encoder.fc.bias"]


def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) linear interpolation with aligned endpoints."""
    if n_in < 1 or n_out < 1:
        raise ValueError("interpolation needs at least one sample on each side")
    m = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] += frac
    return m


def temporal_conv(x, weight, bias, width):
    """Same-padded 1-D convolution of (T, C_in) with a (width*C_in, C_out) kernel."""
    n, c = x.shape
    half = width // 2
    pad = T.Tensor(np.zeros((half, c)))
    padded = T.concat([pad, x, pad], axis=0) if half else x
    windows = T.concat([padded[k:k + n] for k in range(width)], axis=1)
    return T.matmul(windows, weight) + bias


def encode_audio(features, n_frames: int, params: Params, config: ModelConfig):
    """Temporal convolutions then linear resampling to (n_frames, code_dim)."""
    feats = np.asarray(features.data if isinstance(features, T.Tensor) else features, dtype=np.float64)
    if feats.ndim != 2 or len(feats) == 0:
        raise ValueError("audio features must be a non-empty (T_a, F) array")
    if n_frames < 1:
        raise ValueError("target length must be >= 1")
    x = T.as_tensor(features)
    n_layers = len(config.audio_channels)
    for i in range(n_layers):
        x = temporal_conv(x, params[f"audio.conv{i}.weight"], params[f"audio.conv{i}.bias"], config.kernel_width)
        if i < n_layers - 1:
            x = T.relu(x)
    return T.matmul(T.Tensor(interpolation_matrix(len(feats), n_frames)), x)


# ---------------------------------------------------------------- decoder

def decode_motion(z_mesh, codes, params: Params, hierarchy: Hierarchy, config: ModelConfig):
    """Per-frame displacements (T, N, 3) from the mesh code and T audio codes."""
    codes = T.as_tensor(codes)
    if codes.ndim == 1:
        codes = T.reshape(codes, (1, -1))
    z_mesh = T.as_tensor(z_mesh)
    if z_mesh.ndim == 1:
        z_mesh = T.reshape(z_mesh, (1, -1))
    n_frames = codes.shape[0]
    if z_mesh.shape[1] + codes.shape[1] != params["motion.coeff.weight"].shape[0]:
        raise ValueError("latent and audio code widths do not match the decoder")
    joint = T.concat([T.matmul(T.Tensor(np.ones((n_frames, 1))), z_mesh), codes], axis=1)
    n = hierarchy.sizes[0]

    coeffs = T.matmul(joint, params["motion.coeff.weight"]) + params["motion.coeff.bias"]
    linear = T.matmul(coeffs, params["motion.basis"]) + params["motion.mean"]
    linear = T.reshape(linear, (n_frames, n, 3))

    depth = hierarchy.depth
    h = T.matmul(joint, params["refine.fc.weight"]) + params["refine.fc.bias"]
    h = T.reshape(h, (n_frames, hierarchy.sizes[-1], config.mesh_channels[-1]))
    for step in range(depth):
        level = depth - 1 - step
        h = T.sparse_matmul(hierarchy.levels[level].up, h)
        h = cheb_conv(hierarchy.scaled[level], h, _layer(params, f"refine.cheb{level}"))
        if step < depth - 1:
            h = T.relu(h)
    if depth == 0:
        h = T.reshape(h, (n_frames, n, -1))
    return linear + h


def forward_sequence(template: TriangleMesh, features, n_frames, params, hierarchy, config):
    """Predicted vertex sequence (T, N, 3); the mesh code is computed once."""
    z = encode_mesh(template, hierarchy, params)
    codes = encode_audio(features, n_frames, params, config)
    return T.add(decode_motion(z, codes, params, hierarchy, config), template.vertices)


# ---------------------------------------------------------------- losses

def loss_reconstruction(pred, target):
    """Sum over frames and vertices of the per-vertex Euclidean error."""
    return T.tsum(T.norm(T.sub(pred, target), axis=-1))


def loss_velocity(pred, target):
    """Sum of per-vertex Euclidean errors between consecutive-frame differences."""
    pred = T.as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, T.Tensor) else target)
    if pred.shape[0] < 2:
        return T.Tensor(0.0)
    dp = pred[1:] - pred[:-1]
    dt = target[1:] - target[:-1]
    return T.tsum(T.norm(T.sub(dp, dt), axis=-1))


def parameter_norm(params: Params):
    """Euclidean norm of all trainable arrays concatenated."""
    flat = [T.reshape(p, (-1,)) for p in params.values()]
    return T.norm(T.concat(flat, axis=0))


@dataclass
class LossTerms:
    total: T.Tensor
    reconstruction: float
    velocity: float
    swd: float
    regularization: float


def loss_total(pred, target, params: Params, faces, gamma=1.0, projections: ProjectionSet | None = None,
               betas=(BETA_VELOCITY, BETA_SWD, BETA_REG), p=2, normalization: Normalization | None = None,
               swd_weights=None) -> LossTerms:
    """Reconstruction + weighted velocity, sliced Wasserstein and parameter-norm terms."""
    b_vel, b_swd, b_reg = betas
    lr = loss_reconstruction(pred, target)
    lv = loss_velocity(pred, target)
    total = T.add(lr, T.scale(lv, b_vel))
    lsw = 0.0
    if b_swd:
        sw = swd_loss(pred, target, faces, gamma, projections, p, normalization, swd_weights)
        total = T.add(total, T.scale(sw, b_swd))
        lsw = sw.item()
    reg = 0.0
    if b_reg:
        rn = parameter_norm(params)
        total = T.add(total, T.scale(rn, b_reg))
        reg = rn.item()
    return LossTerms(total, lr.item(), lv.item(), lsw, reg)


# ---------------------------------------------------------------- archive

def save_model(directory, params: Params, config: ModelConfig, hierarchy: Hierarchy, template: TriangleMesh,
               extra=None):
    """Model archive: one OTTK file per array plus ``model.json``."""
    from .mesh import save_obj

    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, t in params.items():
        fname = f"params/{name}.ottk"
        save_tensor(t.data, directory / fname)
        entries.append({"name": name, "shape": list(t.shape), "file": fname})
    save_hierarchy(hierarchy, directory / "hierarchy")
    save_obj(template, directory / "template.obj")
    manifest = {
        "format": "meshanim-model/1",
        "config": config.to_dict(),
        "params": entries,
        "hierarchy_sizes": hierarchy.sizes,
        "template": "template.obj",
    }
    manifest.update(extra or {})
    write_json(manifest, directory / "model.json")
    return manifest


@dataclass
class ModelArchive:
    params: Params
    config: ModelConfig
    hierarchy: Hierarchy
    template: TriangleMesh
    manifest: dict = field(default_factory=dict)


def load_model(directory) -> ModelArchive:
    from .mesh import load_obj

    directory = Path(directory)
    manifest = read_json(directory / "model.json")
    arrays = {}
    for e in manifest["params"]:
        arr = load_tensor(directory / e["file"])
        if list(arr.shape) != list(e["shape"]):
            raise ValueError(f"parameter {e['name']} has shape {arr.shape}, manifest says {e['shape']}")
        arrays[e["name"]] = arr
    config = ModelConfig.from_dict(manifest["config"])
    hierarchy = load_hierarchy(directory / "hierarchy")
    template = load_obj(directory / manifest["template"])
    return ModelArchive(Params.from_arrays(arrays), config, hierarchy, template, manifest)
