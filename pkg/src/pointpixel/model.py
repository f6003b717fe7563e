"""Miniature 3D-context / 2D-context encoders and their fusion.

Each branch maps a 6-channel input row plus its k neighbors to a unit
feature::

    h_i = relu(W1 x_i + b1)
    m_i = mean_{j in kNN(i)} relu(W1 x_j + b1)
    f_i = normalize(W2 [h_i ; m_i] + b2)

The 3D branch takes (xyz, rgb) with neighbors in point space; the 2D branch
takes (normalized pixel position, rgb, depth) with neighbors in the image
plane. Gradients are computed by hand (reverse mode) and checked against
finite differences in the tests.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, ContractError, DegenerateFeatureError

FUSION_MODES = ("early", "late", "hybrid")
TENSOR_ORDER = ("W1", "b1", "W2", "b2", "V1", "bv1", "V2", "bv2")
CHECKPOINT_MAGIC = b"P4CCKP01"
CHECKPOINT_VERSION = 1
IN_CHANNELS = 6

# channel layout of the two input encodings
XYZ_3D, RGB_3D = [0, 1, 2], [3, 4, 5]
GEOM_2D, RGB_2D = [0, 1, 5], [2, 3, 4]


@dataclass(frozen=True, eq=False)
class EncoderParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    V1: np.ndarray
    bv1: np.ndarray
    V2: np.ndarray
    bv2: np.ndarray
    fusion_mode: str = "hybrid"
    knn_k: int = 8

    def __post_init__(self):
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.fusion_mode!r}")
        h, d = self.H, self.D
        if h < 4 or d < 4 or self.knn_k < 1:
            raise ConfigError("need H >= 4, D >= 4, knn_k >= 1")
        shapes = {"W1": (h, IN_CHANNELS), "b1": (h,), "W2": (d, 2 * h), "b2": (d,)}
        shapes.update(V1=shapes["W1"], bv1=shapes["b1"], V2=shapes["W2"], bv2=shapes["b2"])
        for name, shape in shapes.items():
            t = getattr(self, name)
            if t.shape != shape:
                raise ContractError(f"{name} has shape {t.shape}, expected {shape}")
            if not np.all(np.isfinite(t)):
                raise ContractError(f"{name} has non-finite entries")

    @property
    def H(self) -> int:
        return self.W1.shape[0]

    @property
    def D(self) -> int:
        return self.W2.shape[0]

    @property
    def out_dim(self) -> int:
        return self.D if self.fusion_mode == "early" else 2 * self.D

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TENSOR_ORDER}

    def with_tensors(self, tensors: dict[str, np.ndarray]) -> "EncoderParams":
        return replace(self, **tensors)

    def identical_to(self, other: "EncoderParams") -> bool:
        return (self.fusion_mode == other.fusion_mode and self.knn_k == other.knn_k
                and all(np.array_equal(a, b) for a, b in zip(self.tensors().values(), other.tensors().values())))


def init_params(hidden: int = 32, dim: int = 16, knn_k: int = 8, fusion_mode: str = "hybrid",
                seed: int = 0) -> EncoderParams:
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    t = {}
    for w1, b1, w2, b2 in (("W1", "b1", "W2", "b2"), ("V1", "bv1", "V2", "bv2")):
        t[w1] = uniform((hidden, IN_CHANNELS), IN_CHANNELS)
        t[b1] = uniform((hidden,), IN_CHANNELS)
        t[w2] = uniform((dim, 2 * hidden), 2 * hidden)
        t[b2] = uniform((dim,), 2 * hidden)
    return EncoderParams(**t, fusion_mode=fusion_mode, knn_k=knn_k)


# --- one branch ---------------------------------------------------------------


def _branch_forward(w1, b1, w2, b2, x, xn):
    a = x @ w1.T + b1
    an = xn @ w1.T + b1
    c = np.concatenate([np.maximum(a, 0.0), np.maximum(an, 0.0).mean(axis=1)], axis=1)
    z = c @ w2.T + b2
    r = np.linalg.norm(z, axis=1, keepdims=True)
    if r.size and r.min() < 1e-12:
        raise DegenerateFeatureError("zero-norm feature before normalization")
    f = z / r
    return f, (x, xn, a, an, c, r, f)


def _branch_backward(cache, df, w2):
    x, xn, a, an, c, r, f = cache
    dz = (df - f * np.sum(f * df, axis=1, keepdims=True)) / r
    dw2 = dz.T @ c
    db2 = dz.sum(axis=0)
    dc = dz @ w2
    h = a.shape[1]
    da = dc[:, :h] * (a > 0)
    dan = (dc[:, None, h:] / xn.shape[1]) * (an > 0)
    dw1 = da.T @ x + dan.reshape(-1, h).T @ xn.reshape(-1, xn.shape[2])
    db1 = da.sum(axis=0) + dan.sum(axis=(0, 1))
    return dw1, db1, dw2, db2


def _check_inputs(pairs, neighbors, context):
    pairs = np.asarray(pairs, dtype=np.float64)
    context = pairs if context is None else np.asarray(context, dtype=np.float64)
    neighbors = np.asarray(neighbors, dtype=np.int64)
    if pairs.ndim != 2 or pairs.shape[1] != IN_CHANNELS or context.shape[1] != IN_CHANNELS:
        raise ContractError("inputs must have 6 channels")
    if neighbors.ndim != 2 or neighbors.shape[0] != pairs.shape[0]:
        raise ContractError("need one neighbor row per input row")
    if neighbors.size and (neighbors.min() < 0 or neighbors.max() >= context.shape[0]):
        raise ContractError("neighbor index out of range")
    if not (np.all(np.isfinite(pairs)) and np.all(np.isfinite(context))):
        raise ContractError("inputs must be finite")
    return pairs, context[neighbors]


def encode3d(pairs, neighbors, params: EncoderParams, context=None) -> np.ndarray:
    """3D-context features; ``neighbors`` index rows of ``context`` (default: ``pairs``)."""
    x, xn = _check_inputs(pairs, neighbors, context)
    return _branch_forward(params.W1, params.b1, params.W2, params.b2, x, xn)[0]


def encode2d(pairs, pixel_neighbors, params: EncoderParams, context=None) -> np.ndarray:
    """2D-context features; same computation with the image-plane branch weights."""
    x, xn = _check_inputs(pairs, pixel_neighbors, context)
    return _branch_forward(params.V1, params.bv1, params.V2, params.bv2, x, xn)[0]


# --- fusion -------------------------------------------------------------------


def _normalize(u):
    r = np.linalg.norm(u, axis=1, keepdims=True)
    return u / r, r


def fuse(f3d, f2d, mode: str) -> np.ndarray:
    if mode not in FUSION_MODES:
        raise ConfigError(f"unknown fusion mode {mode!r}")
    if mode == "early":
        return f3d
    if f2d is None or f3d.shape[0] != f2d.shape[0]:
        raise ContractError("fusion needs two feature blocks with the same number of rows")
    return _normalize(np.concatenate([f3d, f2d], axis=1))[0]


# --- batch inputs, forward, backward -----------------------------------------


def knn_indices(coords: np.ndarray, rows: np.ndarray, k: int, tree: cKDTree | None = None) -> np.ndarray:
    """k nearest other points of each query row; ties resolved by the tree (deterministic)."""
    coords = np.asarray(coords, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.int64)
    n = coords.shape[0]
    if n < 2:
        raise ContractError("need at least two points for neighborhoods")
    kk = min(k + 1, n)
    tree = cKDTree(coords) if tree is None else tree
    _, idx = tree.query(coords[rows], k=kk)
    idx = np.asarray(idx, dtype=np.int64).reshape(len(rows), kk)
    is_self = idx == rows[:, None]
    # drop the self column where present, otherwise the farthest one
    is_self[~is_self.any(axis=1), -1] = True
    out = idx[~is_self].reshape(len(rows), kk - 1)
    if kk - 1 < k:  # fewer than k other points: repeat the farthest
        out = np.concatenate([out, np.repeat(out[:, -1:], k - (kk - 1), axis=1)], axis=1)
    return out


def inputs_3d(scene) -> np.ndarray:
    return np.concatenate([scene.points, scene.colors], axis=1)


def inputs_2d(view) -> np.ndarray:
    cam = view.camera
    u = (view.uv[:, 0] - cam.cx) / cam.fx
    v = (view.uv[:, 1] - cam.cy) / cam.fy
    # depth relative to the world origin's depth: keeps the channel centered
    # instead of carrying a camera-distance offset into every pre-activation
    z0 = cam.to_camera_frame(np.zeros((1, 3)))[0, 2]
    return np.column_stack([u, v, view.scene.colors, view.depth - z0])


def branch_masks(fusion_mode: str, objective: str) -> tuple[np.ndarray, np.ndarray]:
    """Channel masks (3D, 2D): late fusion and the cross-modal objective split modalities."""
    m3 = np.ones(IN_CHANNELS)
    m2 = np.ones(IN_CHANNELS)
    if objective == "crossmodal" or fusion_mode == "late":
        m3[RGB_3D] = 0.0
        m2[GEOM_2D] = 0.0
    return m3, m2


@dataclass(frozen=True, eq=False)
class BatchInputs:
    """Stacked encoder inputs: anchors, then positives, then disturbed rows."""

    x3: np.ndarray
    n3: np.ndarray
    x2: np.ndarray | None
    n2: np.ndarray | None
    n_anchor: int
    n_positive: int
    n_disturbed: int

    def split(self, feats: np.ndarray):
        a = self.n_anchor
        p = a + self.n_positive
        return feats[:a], feats[a:p], feats[p:p + self.n_disturbed]


class _ViewContext:
    def __init__(self, view, knn_k: int, need_2d: bool):
        self.x3 = inputs_3d(view.scene)
        self.tree3 = cKDTree(view.scene.points)
        self.points = view.scene.points
        self.knn_k = knn_k
        if need_2d:
            self.x2 = inputs_2d(view)
            self.tree2 = cKDTree(view.uv)
            self.uv = view.uv

    def nbr3(self, rows):
        return knn_indices(self.points, rows, self.knn_k, self.tree3)

    def nbr2(self, rows):
        return knn_indices(self.uv, rows, self.knn_k, self.tree2)


def splice(geometry_row: np.ndarray, color_row: np.ndarray, color_channels) -> np.ndarray:
    out = geometry_row.copy()
    out[..., color_channels] = color_row[..., color_channels]
    return out


def assemble_inputs(view1, view2, batch, knn_k: int, fusion_mode: str, objective: str,
                    disturbed: bool = True) -> BatchInputs:
    """Gather encoder inputs for a PairBatch.

    Disturbed row k keeps the geometry channels of positive point k and takes
    the color channels of point d(k), both from view 2; its neighborhood is the
    (undisturbed) neighborhood of k.
    """
    need_2d = fusion_mode != "early" or objective == "crossmodal"
    c1 = _ViewContext(view1, knn_k, need_2d)
    c2 = _ViewContext(view2, knn_k, need_2d)
    anc, pos, dis = batch.anchor_idx, batch.positive_idx, batch.disturb_idx
    m3, m2 = branch_masks(fusion_mode, objective)

    nb1, nb2 = c1.nbr3(anc), c2.nbr3(pos)
    x3 = [c1.x3[anc], c2.x3[pos]]
    n3 = [c1.x3[nb1], c2.x3[nb2]]
    if disturbed:
        x3.append(splice(c2.x3[pos], c2.x3[dis], RGB_3D))
        n3.append(c2.x3[nb2])
    x3, n3 = np.concatenate(x3) * m3, np.concatenate(n3) * m3

    x2 = n2 = None
    if need_2d:
        pb1, pb2 = c1.nbr2(anc), c2.nbr2(pos)
        x2 = [c1.x2[anc], c2.x2[pos]]
        n2 = [c1.x2[pb1], c2.x2[pb2]]
        if disturbed:
            x2.append(splice(c2.x2[pos], c2.x2[dis], RGB_2D))
            n2.append(c2.x2[pb2])
        x2, n2 = np.concatenate(x2) * m2, np.concatenate(n2) * m2
    b = len(anc)
    return BatchInputs(x3, n3, x2, n2, b, b, b if disturbed else 0)


def forward(inputs: BatchInputs, params: EncoderParams):
    """Features for every stacked row.

    Returns ``(feats, cache)`` where ``feats`` has keys ``f3d``, ``f2d`` (None
    when the 2D branch is unused) and ``fused``.
    """
    f3d, c3 = _branch_forward(params.W1, params.b1, params.W2, params.b2, inputs.x3, inputs.n3)
    f2d = c2 = None
    if inputs.x2 is not None:
        f2d, c2 = _branch_forward(params.V1, params.bv1, params.V2, params.bv2, inputs.x2, inputs.n2)
    if params.fusion_mode == "early":
        fused, rf = f3d, None
    else:
        if f2d is None:
            raise ContractError(f"{params.fusion_mode} fusion needs 2D inputs")
        fused, rf = _normalize(np.concatenate([f3d, f2d], axis=1))
    feats = {"f3d": f3d, "f2d": f2d, "fused": fused}
    return feats, {"c3": c3, "c2": c2, "rf": rf, "fused": fused, "mode": params.fusion_mode, "D": params.D}


def backward(cache, upstream: dict[str, np.ndarray], params: EncoderParams) -> dict[str, np.ndarray]:
    """Parameter gradients given upstream gradients on any of f3d / f2d / fused."""
    d3 = upstream.get("f3d")
    d2 = upstream.get("f2d")
    dfused = upstream.get("fused")
    n_rows = cache["c3"][0].shape[0]
    for name, g in upstream.items():
        if g is not None and g.shape[0] != n_rows:
            raise ContractError(f"upstream gradient {name} has {g.shape[0]} rows, expected {n_rows}")
    d3 = np.zeros_like(cache["c3"][6]) if d3 is None else d3.copy()
    if cache["c2"] is not None:
        d2 = np.zeros_like(cache["c2"][6]) if d2 is None else d2.copy()
    elif d2 is not None and np.any(d2):
        raise ContractError("gradient given for an unused 2D branch")
    if dfused is not None:
        if cache["mode"] == "early":
            d3 += dfused
        else:
            f, r = cache["fused"], cache["rf"]
            du = (dfused - f * np.sum(f * dfused, axis=1, keepdims=True)) / r
            d3 += du[:, : cache["D"]]
            d2 += du[:, cache["D"]:]

    grads = {}
    grads["W1"], grads["b1"], grads["W2"], grads["b2"] = _branch_backward(cache["c3"], d3, params.W2)
    if cache["c2"] is not None:
        grads["V1"], grads["bv1"], grads["V2"], grads["bv2"] = _branch_backward(cache["c2"], d2, params.V2)
    else:
        for name in ("V1", "bv1", "V2", "bv2"):
            grads[name] = np.zeros_like(getattr(params, name))
    return grads


# --- whole-scene features -------------------------------------------------------


def scene_inputs(view, params: EncoderParams, objective: str = "p4contrast") -> BatchInputs:
    """Encoder inputs for every point of a view, masked as the objective requires."""
    fusion = "late" if objective == "crossmodal" else params.fusion_mode
    rows = np.arange(view.scene.n_points)
    ctx = _ViewContext(view, params.knn_k, fusion != "early")
    m3, m2 = branch_masks(fusion, objective)
    x2 = n2 = None
    if fusion != "early":
        x2, n2 = ctx.x2 * m2, ctx.x2[ctx.nbr2(rows)] * m2
    return BatchInputs(ctx.x3 * m3, ctx.x3[ctx.nbr3(rows)] * m3, x2, n2, len(rows), 0, 0)


def scene_features(view, params: EncoderParams, objective: str = "p4contrast") -> np.ndarray:
    """Downstream features for every point of a view (fused per the params' mode)."""
    return forward(scene_inputs(view, params, objective), params)[0]["fused"]


# --- checkpoints ----------------------------------------------------------------


def params_to_bytes(params: EncoderParams) -> bytes:
    head = CHECKPOINT_MAGIC + struct.pack(
        "<IBIII", CHECKPOINT_VERSION, FUSION_MODES.index(params.fusion_mode), params.H, params.D, params.knn_k)
    return head + b"".join(np.asarray(t, dtype="<f8").tobytes() for t in params.tensors().values())


def params_from_bytes(data: bytes) -> EncoderParams:
    if data[:8] != CHECKPOINT_MAGIC:
        raise ContractError("not a checkpoint (bad magic)")
    if len(data) < 8 + struct.calcsize("<IBIII"):
        raise ContractError("truncated checkpoint header")
    version, mode, h, d, k = struct.unpack_from("<IBIII", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    shapes = [(h, IN_CHANNELS), (h,), (d, 2 * h), (d,)] * 2
    off = 8 + struct.calcsize("<IBIII")
    if mode >= len(FUSION_MODES):
        raise ContractError(f"unknown fusion mode code {mode}")
    if len(data) != off + 8 * sum(int(np.prod(s)) for s in shapes):
        raise ContractError("checkpoint size does not match its header")
    tensors = {}
    for name, shape in zip(TENSOR_ORDER, shapes):
        count = int(np.prod(shape))
        tensors[name] = np.frombuffer(data, "<f8", count, off).reshape(shape).astype(np.float64)
        off += 8 * count
    return EncoderParams(**tensors, fusion_mode=FUSION_MODES[mode], knn_k=k)


def save_checkpoint(params: EncoderParams, path) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_checkpoint(path) -> EncoderParams:
    return params_from_bytes(Path(path).read_bytes())
