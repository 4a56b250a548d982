"""Pose network: point-wise fusion, two folding generators and a pose head.

All forward functions operate on batches: per-point inputs are shaped
``(B, N, C)``. Two-dimensional inputs are treated as a batch of one.

Layout of one forward pass::

    appearance (B,N,fa) --+
    depth      (B,N,3)  --+-- three branches of point-fusion blocks (FC + non-local)
    model pts  (B,N,3)  --+        -> concat (B,N,3d) -> shared MLP -> mean pool
                                   -> enrich each row with the pooled vector
                                   -> squeeze-excitation gate
    pooled vector  -> folding generator x2 (canonical / posed clouds)
    enriched rows  -> shared MLP head -> per-point quaternion, translation, confidence
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from . import autodiff as ad
from .data import APPEARANCE_DIM
from .geometry import Quaternion, RigidTransform


@dataclass(frozen=True)
class ModelConfig:
    d_emb: int = 64
    n_points: int = 128
    fusion_depth: int = 2
    grid_size: int = 256
    se_ratio: int = 8
    nonlocal_ratio: int = 2
    head_widths: tuple = (256, 128)
    global_width: int = 256
    fold_width: int = 256
    appearance_dim: int = APPEARANCE_DIM
    use_pointfusion: bool = True
    coord_scale: float = 10.0  # network works in decimetres
    grid_seed: int = 0
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "head_widths", tuple(int(w) for w in self.head_widths))
        for f in ("d_emb", "n_points", "fusion_depth", "grid_size", "se_ratio",
                  "nonlocal_ratio", "global_width", "fold_width", "appearance_dim"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")
        if self.d_emb % self.se_ratio:
            raise ValueError(f"se_ratio {self.se_ratio} must divide d_emb {self.d_emb}")
        if self.d_emb % self.nonlocal_ratio:
            raise ValueError("nonlocal_ratio must divide d_emb")
        if not self.head_widths or min(self.head_widths) < 1:
            raise ValueError("head_widths must be positive")
        if self.coord_scale <= 0:
            raise ValueError("coord_scale must be positive")

    @property
    def fused_width(self) -> int:
        return 3 * self.d_emb + self.global_width

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_widths"] = list(self.head_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FusedFeature:
    per_point: ad.Tensor  # (B, N, 3 d_emb)
    global_vec: ad.Tensor  # (B, global_width)
    enriched: ad.Tensor  # (B, N, 3 d_emb + global_width), after the SE gate
    pooled_input: ad.Tensor  # (B, N, global_width), rows averaged into global_vec


@dataclass
class GenerationOutput:
    cano: ad.Tensor  # (B, grid_size, 3) metres, object frame
    posed: ad.Tensor  # (B, grid_size, 3) metres, camera frame


@dataclass
class PosePrediction:
    """Per-point hypotheses for a single sample."""

    quats: np.ndarray  # (N, 4) unit, (w, x, y, z)
    trans: np.ndarray  # (N, 3)
    conf: np.ndarray  # (N,), sums to 1

    def __len__(self) -> int:
        return len(self.conf)

    def pose(self, i: int) -> RigidTransform:
        q = self.quats[i].astype(np.float64)
        return RigidTransform(Quaternion.from_array(q / np.linalg.norm(q)),
                              self.trans[i].astype(np.float64))

    def permute(self, perm) -> "PosePrediction":
        return PosePrediction(self.quats[perm], self.trans[perm], self.conf[perm])


# ---------------------------------------------------------------------------
# parameters


def _dense(rng, fan_in, fan_out, dtype, gain=2.0):
    return rng.normal(0.0, np.sqrt(gain / fan_in), (fan_in, fan_out)).astype(dtype)


def init_weights(cfg: ModelConfig, dtype=np.float32) -> dict[str, ad.Tensor]:
    """He-initialised weights; non-local output projections start at zero."""
    rng = np.random.default_rng(cfg.init_seed)
    w: dict[str, np.ndarray] = {}
    d = cfg.d_emb
    cr = d // cfg.nonlocal_ratio

    for branch, width in (("app", cfg.appearance_dim), ("depth", 3), ("model", 3)):
        fan_in = width
        for k in range(cfg.fusion_depth):
            p = f"{branch}.block{k}"
            w[f"{p}.fc.w"] = _dense(rng, fan_in, d, dtype)
            w[f"{p}.fc.b"] = np.zeros(d, dtype)
            if cfg.use_pointfusion:
                w[f"{p}.nl.theta"] = _dense(rng, d, cr, dtype, 1.0)
                w[f"{p}.nl.phi"] = _dense(rng, d, cr, dtype, 1.0)
                w[f"{p}.nl.g"] = _dense(rng, d, cr, dtype, 1.0)
                w[f"{p}.nl.out"] = np.zeros((cr, d), dtype)
            fan_in = d

    G = cfg.global_width
    w["pool.fc0.w"] = _dense(rng, 3 * d, G, dtype)
    w["pool.fc0.b"] = np.zeros(G, dtype)
    w["pool.fc1.w"] = _dense(rng, G, G, dtype)
    w["pool.fc1.b"] = np.zeros(G, dtype)

    C = cfg.fused_width
    hidden = C // cfg.se_ratio
    w["se.fc0.w"] = _dense(rng, C, hidden, dtype)
    w["se.fc0.b"] = np.zeros(hidden, dtype)
    w["se.fc1.w"] = _dense(rng, hidden, C, dtype, 1.0)
    w["se.fc1.b"] = np.zeros(C, dtype)

    F = cfg.fold_width
    for gen in ("cano", "posed"):
        for stage in ("fold0", "fold1"):
            p = f"gen.{gen}.{stage}"
            # first layer acts on [point (3) | global (G)], stored as two blocks
            first = _dense(rng, 3 + G, F, dtype)
            w[f"{p}.fc0.wp"], w[f"{p}.fc0.wg"] = first[:3], first[3:]
            w[f"{p}.fc0.b"] = np.zeros(F, dtype)
            w[f"{p}.fc1.w"] = _dense(rng, F, F, dtype)
            w[f"{p}.fc1.b"] = np.zeros(F, dtype)
            w[f"{p}.fc2.w"] = _dense(rng, F, 3, dtype, 1.0)
            w[f"{p}.fc2.b"] = np.zeros(3, dtype)

    fan_in = C
    for k, width in enumerate(cfg.head_widths):
        w[f"head.fc{k}.w"] = _dense(rng, fan_in, width, dtype)
        w[f"head.fc{k}.b"] = np.zeros(width, dtype)
        fan_in = width
    w["head.out.w"] = _dense(rng, fan_in, 8, dtype, 0.01)
    b = np.zeros(8, dtype)
    b[0] = 1.0  # identity rotation at init
    w["head.out.b"] = b
    return {k: ad.Tensor(v, requires_grad=True) for k, v in w.items()}


def make_grid(cfg: ModelConfig, dtype=np.float32) -> np.ndarray:
    """Fixed standard-normal 3D grid shared by both generators."""
    return np.random.default_rng(cfg.grid_seed).standard_normal((cfg.grid_size, 3)).astype(dtype)


# ---------------------------------------------------------------------------
# building blocks


def _linear(x: ad.Tensor, w: ad.Tensor, b: Optional[ad.Tensor] = None) -> ad.Tensor:
    y = ad.matmul(x, w)
    if b is not None:
        y = y + ad.broadcast(b, y.shape)
    return y


def _batched(x, dtype) -> ad.Tensor:
    x = x if isinstance(x, ad.Tensor) else ad.Tensor(np.asarray(x, dtype=dtype))
    return ad.reshape(x, (1,) + x.shape) if len(x.shape) == 2 else x


def nonlocal_block(x: ad.Tensor, weights: dict, prefix: str) -> ad.Tensor:
    """Embedded-Gaussian attention over the points with a residual connection.

    ``y = x + softmax(theta(x) phi(x)^T / sqrt(c')) g(x) W_out``
    """
    wt = weights[f"{prefix}.theta"]
    if x.shape[-1] != wt.shape[0]:
        raise ValueError(f"non-local block {prefix}: input width {x.shape[-1]} != {wt.shape[0]}")
    theta = ad.matmul(x, wt)
    phi = ad.matmul(x, weights[f"{prefix}.phi"])
    g = ad.matmul(x, weights[f"{prefix}.g"])
    scale = 1.0 / np.sqrt(wt.shape[1])
    attn = ad.softmax(ad.matmul(theta, ad.transpose(phi)) * scale, axis=-1)
    return x + ad.matmul(ad.matmul(attn, g), weights[f"{prefix}.out"])


def _branch(x: ad.Tensor, cfg: ModelConfig, weights: dict, name: str) -> ad.Tensor:
    for k in range(cfg.fusion_depth):
        p = f"{name}.block{k}"
        x = ad.relu(_linear(x, weights[f"{p}.fc.w"], weights[f"{p}.fc.b"]))
        if cfg.use_pointfusion:
            x = nonlocal_block(x, weights, f"{p}.nl")
    return x


def fuse(appearance, depth_points, model_points, cfg: ModelConfig, weights: dict) -> FusedFeature:
    """Fuse appearance, centred depth points and model points into per-point features.

    Geometric inputs are expected already centred and multiplied by
    ``cfg.coord_scale`` (see :func:`prepare_inputs`).
    """
    dtype = weights["pool.fc0.w"].dtype
    a, d, m = (_batched(v, dtype) for v in (appearance, depth_points, model_points))
    if not (a.shape[:2] == d.shape[:2] == m.shape[:2]):
        raise ValueError(f"branch inputs disagree on (batch, points): "
                         f"{a.shape[:2]}, {d.shape[:2]}, {m.shape[:2]}")
    B, N = a.shape[:2]
    per_point = ad.concat([_branch(a, cfg, weights, "app"),
                           _branch(d, cfg, weights, "depth"),
                           _branch(m, cfg, weights, "model")], axis=-1)
    h = ad.relu(_linear(per_point, weights["pool.fc0.w"], weights["pool.fc0.b"]))
    h = ad.relu(_linear(h, weights["pool.fc1.w"], weights["pool.fc1.b"]))
    global_vec = ad.mean(h, axis=1)
    G = global_vec.shape[-1]
    enriched = ad.concat([per_point, ad.broadcast(ad.reshape(global_vec, (B, 1, G)), (B, N, G))],
                         axis=-1)
    squeeze = ad.mean(enriched, axis=1)
    z = ad.relu(_linear(squeeze, weights["se.fc0.w"], weights["se.fc0.b"]))
    gate = ad.sigmoid(_linear(z, weights["se.fc1.w"], weights["se.fc1.b"]))
    C = gate.shape[-1]
    enriched = enriched * ad.broadcast(ad.reshape(gate, (B, 1, C)), enriched.shape)
    return FusedFeature(per_point, global_vec, enriched, h)


def _fold(points, global_vec: ad.Tensor, weights: dict, prefix: str) -> ad.Tensor:
    """One folding stage: MLP over [point | global vector] rows -> 3D points.

    The first layer is split into a point block and a global block, which is
    the same linear map as concatenating the global vector to every row.
    """
    B, G = global_vec.shape
    if weights[f"{prefix}.fc0.wg"].shape[0] != G:
        raise ValueError(f"{prefix}: global width {G} != {weights[f'{prefix}.fc0.wg'].shape[0]}")
    pt = ad.matmul(points, weights[f"{prefix}.fc0.wp"])
    glob = _linear(global_vec, weights[f"{prefix}.fc0.wg"], weights[f"{prefix}.fc0.b"])
    F = glob.shape[-1]
    R = points.shape[-2]
    h = ad.broadcast(pt, (B, R, F)) + ad.broadcast(ad.reshape(glob, (B, 1, F)), (B, R, F))
    h = ad.relu(h)
    h = ad.relu(_linear(h, weights[f"{prefix}.fc1.w"], weights[f"{prefix}.fc1.b"]))
    return _linear(h, weights[f"{prefix}.fc2.w"], weights[f"{prefix}.fc2.b"])


def generate(feature: FusedFeature, cfg: ModelConfig, weights: dict, grid: np.ndarray,
             centroid: Optional[np.ndarray] = None) -> GenerationOutput:
    """Decode the pooled feature into canonical and posed clouds.

    The posed branch is expressed relative to the observed centroid, which
    is added back (``centroid`` of shape (B, 3), metres).
    """
    g = feature.global_vec
    B = g.shape[0]
    grid_t = ad.Tensor(grid.astype(g.dtype))
    out = {}
    for name in ("cano", "posed"):
        p = f"gen.{name}"
        first = _fold(grid_t, g, weights, f"{p}.fold0")
        out[name] = _fold(first, g, weights, f"{p}.fold1") * (1.0 / cfg.coord_scale)
    posed = out["posed"]
    if centroid is not None:
        c = np.broadcast_to(np.asarray(centroid, dtype=g.dtype).reshape(B, 1, 3), posed.shape)
        posed = posed + c
    return GenerationOutput(out["cano"], posed)


@dataclass
class HeadOutput:
    quat: ad.Tensor  # (B, N, 4) unit
    trans: ad.Tensor  # (B, N, 3) metres, camera frame
    conf: ad.Tensor  # (B, N) softmax over points

    def prediction(self, b: int = 0) -> PosePrediction:
        return PosePrediction(self.quat.value[b].copy(), self.trans.value[b].copy(),
                              self.conf.value[b].copy())


def pose_head(feature: FusedFeature, cfg: ModelConfig, weights: dict,
              depth_points_m: np.ndarray) -> HeadOutput:
    """Shared per-point MLP -> (quaternion, translation, confidence).

    Translations are offsets, in network units, from each point's observed
    camera-frame position ``depth_points_m`` (B, N, 3).
    """
    x = feature.enriched
    for k in range(len(cfg.head_widths)):
        x = ad.relu(_linear(x, weights[f"head.fc{k}.w"], weights[f"head.fc{k}.b"]))
    out = _linear(x, weights["head.out.w"], weights["head.out.b"])
    B, N, _ = out.shape
    q_raw = ad.gather_rows(out, [0, 1, 2, 3], axis=-1)
    norm = ad.l2_norm_rows(q_raw)
    # a vanishing raw quaternion is replaced by the identity
    tiny = (norm.value < 1e-8).astype(out.dtype)
    denom = norm + tiny
    keep = np.broadcast_to((1.0 - tiny)[..., None], (B, N, 4))
    ident = np.zeros((B, N, 4), out.dtype)
    ident[..., 0] = tiny
    quat = (q_raw * keep) / ad.broadcast(ad.reshape(denom, (B, N, 1)), (B, N, 4)) + ident
    offset = ad.gather_rows(out, [4, 5, 6], axis=-1) * (1.0 / cfg.coord_scale)
    trans = offset + np.asarray(depth_points_m, dtype=out.dtype).reshape(B, N, 3)
    conf = ad.softmax(ad.reshape(ad.gather_rows(out, [7], axis=-1), (B, N)), axis=-1)
    return HeadOutput(quat, trans, conf)


def predict_pose(feature: FusedFeature, cfg: ModelConfig, weights: dict,
                 depth_points_m: np.ndarray) -> PosePrediction:
    """Per-point pose hypotheses for the first (or only) sample in the batch."""
    return pose_head(feature, cfg, weights, depth_points_m).prediction(0)


def select_final(pred: PosePrediction) -> RigidTransform:
    """Hypothesis with the highest confidence; the lowest index wins ties."""
    return pred.pose(int(np.argmax(pred.conf)))


# ---------------------------------------------------------------------------
# input preparation and the model object


@dataclass
class Batch:
    appearance: np.ndarray  # (B, N, fa)
    depth_in: np.ndarray  # (B, N, 3) centred, scaled
    model_in: np.ndarray  # (B, N, 3) scaled
    depth_m: np.ndarray  # (B, N, 3) camera-frame metres
    centroid: np.ndarray  # (B, 3)


def prepare_inputs(appearance, observed_points, model_points, cfg: ModelConfig,
                   rng: Optional[np.random.Generator] = None, dtype=np.float32) -> dict:
    """Sample ``cfg.n_points`` rows per branch and normalise one sample.

    Returns a dict with ``appearance``, ``depth_in``, ``model_in``,
    ``depth_m`` and ``centroid``. Without ``rng`` the first N rows are used
    (cycled if fewer), which keeps inference inputs explicit.
    """
    obs = np.asarray(observed_points, dtype=np.float64)
    mod = np.asarray(model_points, dtype=np.float64)
    N = cfg.n_points
    if rng is None:
        oi = np.arange(N) % len(obs)
        mi = np.arange(N) % len(mod)
    else:
        oi = rng.choice(len(obs), N, replace=N > len(obs))
        mi = rng.choice(len(mod), N, replace=N > len(mod))
    pts = obs[oi]
    centroid = pts.mean(axis=0)
    return {
        "appearance": np.asarray(appearance)[oi].astype(dtype),
        "depth_in": ((pts - centroid) * cfg.coord_scale).astype(dtype),
        "model_in": (mod[mi] * cfg.coord_scale).astype(dtype),
        "depth_m": pts.astype(dtype),
        "centroid": centroid,
    }


def stack_inputs(items: list[dict]) -> Batch:
    return Batch(*(np.stack([it[k] for it in items]) for k in
                   ("appearance", "depth_in", "model_in", "depth_m", "centroid")))


class PoseNet:
    """Configuration, weights and the fixed generator grid, bundled."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), dtype=np.float32,
                 weights: Optional[dict] = None, grid: Optional[np.ndarray] = None):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.weights = weights if weights is not None else init_weights(cfg, self.dtype)
        self.grid = grid if grid is not None else make_grid(cfg, self.dtype)

    def parameters(self) -> list[ad.Tensor]:
        return list(self.weights.values())

    def fuse(self, batch: Batch) -> FusedFeature:
        return fuse(batch.appearance, batch.depth_in, batch.model_in, self.cfg, self.weights)

    def forward(self, batch: Batch, with_generation: bool = True):
        feat = self.fuse(batch)
        head = pose_head(feat, self.cfg, self.weights, batch.depth_m)
        gen = generate(feat, self.cfg, self.weights, self.grid, batch.centroid) if with_generation else None
        return feat, head, gen

    def predict(self, appearance, observed_points, model_points,
                rng: Optional[np.random.Generator] = None) -> PosePrediction:
        batch = stack_inputs([prepare_inputs(appearance, observed_points, model_points,
                                             self.cfg, rng, self.dtype)])
        _, head, _ = self.forward(batch, with_generation=False)
        return head.prediction(0)

    def save(self, path: str | os.PathLike) -> None:
        """Write ``path`` (text checkpoint) and ``path + '.json'`` (config sidecar)."""
        tensors = {k: v.value for k, v in self.weights.items()}
        tensors["grid"] = self.grid
        ad.save_checkpoint(path, tensors)
        with open(f"{path}.json", "w") as fh:
            json.dump({"model_config": self.cfg.to_dict(), "grid_seed": self.cfg.grid_seed,
                       "dtype": self.dtype.name}, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PoseNet":
        with open(f"{path}.json") as fh:
            meta = json.load(fh)
        cfg = ModelConfig.from_dict(meta["model_config"])
        tensors = ad.load_checkpoint(path)
        grid = tensors.pop("grid")
        expected = set(init_weights(cfg, np.float64))
        if set(tensors) != expected:
            raise ValueError(f"{path}: checkpoint tensors do not match the config "
                             f"(missing {sorted(expected - set(tensors))[:3]}, "
                             f"extra {sorted(set(tensors) - expected)[:3]})")
        weights = {k: ad.Tensor(v, requires_grad=True) for k, v in tensors.items()}
        return cls(cfg, meta.get("dtype", "float32"), weights, grid)
