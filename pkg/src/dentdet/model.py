"""Frozen feature encoder, RoI pooling, and the trainable detection decoder.

The encoder is handcrafted and deterministic (cell statistics plus fixed
sinusoidal positional channels); only the decoder MLP and its four output
heads (box regression plus quadrant / enumeration / diagnosis classifiers)
carry parameters.  All gradients are computed analytically in float64.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .diffusion import MIN_SIZE, signal_decode
from .labels import HEAD_CLASS_COUNTS, HEAD_NAMES, HeadMask

ParamStore = dict[str, np.ndarray]

STAT_CHANNELS = 4  # mean, std, |grad_x|, |grad_y|
HIST_EDGES = (0.1, 0.3, 0.5, 0.7, 0.9)  # intensity-band boundaries
HIST_CHANNELS = len(HIST_EDGES) + 1
POS_CHANNELS = 8
NUM_CHANNELS = STAT_CHANNELS + HIST_CHANNELS + POS_CHANNELS


@dataclass(frozen=True)
class ModelConfig:
    grid: int = 16  # feature grid resolution G
    pool: int = 4  # RoI bins per axis P
    hidden: int = 128  # trunk width H
    time_dim: int = 16  # sinusoidal timestep embedding size
    scale: float = 2.0  # signal-space scale
    focal_gamma: float = 2.0
    cls_weight: float = 2.0
    l1_weight: float = 5.0
    giou_weight: float = 2.0

    @property
    def channels(self) -> int:
        return NUM_CHANNELS

    @property
    def feat_dim(self) -> int:
        return self.pool * self.pool * self.channels + self.time_dim

    def fingerprint(self) -> str:
        blob = json.dumps(self.__dict__, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Frozen encoder


def encode_image(img: np.ndarray, grid: int = 16) -> np.ndarray:
    """Deterministic (G, G, C) feature grid from a grayscale image.

    Per cell: mean intensity, intensity std, mean horizontal and vertical
    gradient magnitudes, the occupancy fractions of six fixed intensity
    bands (a coarse per-cell histogram, which preserves distinct gray
    levels that a plain mean would blend away), and eight fixed sinusoidal
    positional channels.
    """
    img = np.asarray(img)
    if img.ndim != 2 or img.size == 0:
        raise ValueError("encode_image expects a non-empty 2-D grayscale array")
    h, w = img.shape
    if h < grid or w < grid:
        raise ValueError(f"image {w}x{h} smaller than feature grid {grid}")
    x = img.astype(np.float64)
    if img.dtype == np.uint8:
        x = x / 255.0
    gy, gx = np.gradient(x)
    ch, cw = h // grid, w // grid
    crop = lambda a: a[: grid * ch, : grid * cw].reshape(grid, ch, grid, cw)
    cells = crop(x)
    feats = np.empty((grid, grid, NUM_CHANNELS), dtype=np.float64)
    feats[..., 0] = cells.mean(axis=(1, 3))
    feats[..., 1] = cells.std(axis=(1, 3))
    feats[..., 2] = crop(np.abs(gx)).mean(axis=(1, 3))
    feats[..., 3] = crop(np.abs(gy)).mean(axis=(1, 3))
    bands = np.digitize(cells, HIST_EDGES)
    for b in range(HIST_CHANNELS):
        feats[..., STAT_CHANNELS + b] = (bands == b).mean(axis=(1, 3))
    u = (np.arange(grid) + 0.5) / grid
    uu, vv = np.meshgrid(u, u)  # uu varies along x (axis 1), vv along y (axis 0)
    pos = [
        np.sin(np.pi * uu), np.cos(np.pi * uu),
        np.sin(2 * np.pi * uu), np.cos(2 * np.pi * uu),
        np.sin(np.pi * vv), np.cos(np.pi * vv),
        np.sin(2 * np.pi * vv), np.cos(2 * np.pi * vv),
    ]
    feats[..., STAT_CHANNELS + HIST_CHANNELS :] = np.stack(pos, axis=-1)
    return feats


def _axis_weights(lo: np.ndarray, hi: np.ndarray, pool: int, grid: int):
    """Overlap lengths between P equal bins of [lo, hi] and the G grid cells.

    Returns (weights (N, P, G), bin width (N,)).
    """
    n = lo.shape[0]
    span = hi - lo
    # Fully degenerate spans sample the single nearest cell.
    tiny = span < 1e-9
    lo = np.where(tiny, np.clip(lo, 0.0, 1.0 - 1e-6), lo)
    span = np.where(tiny, 1e-6, span)
    edges = lo[:, None] + span[:, None] * np.arange(pool + 1) / pool  # (N, P+1)
    cell_lo = np.arange(grid) / grid
    cell_hi = cell_lo + 1.0 / grid
    w = np.minimum(edges[:, 1:, None], cell_hi) - np.maximum(
        edges[:, :-1, None], cell_lo
    )
    return np.clip(w, 0.0, None), span / pool


def roi_pool(grid_feats: np.ndarray, box, pool: int) -> np.ndarray:
    """Cell-coverage mean pooling of one box into a (P*P*C,) vector."""
    from .geometry import Box

    arr = box.to_array() if isinstance(box, Box) else np.asarray(box, dtype=np.float64)
    return roi_pool_batch(grid_feats, arr[None, :], pool)[0]


def roi_pool_batch(grid_feats: np.ndarray, boxes01: np.ndarray, pool: int) -> np.ndarray:
    """Pool N normalized center-size boxes into (N, P*P*C) feature vectors.

    Each of the P x P bins takes the coverage-weighted mean of the grid
    cells it overlaps; boxes are clamped to the image first.
    """
    g = grid_feats.shape[0]
    boxes01 = np.asarray(boxes01, dtype=np.float64)
    x0 = np.clip(boxes01[:, 0] - boxes01[:, 2] / 2, 0.0, 1.0)
    x1 = np.clip(boxes01[:, 0] + boxes01[:, 2] / 2, 0.0, 1.0)
    y0 = np.clip(boxes01[:, 1] - boxes01[:, 3] / 2, 0.0, 1.0)
    y1 = np.clip(boxes01[:, 1] + boxes01[:, 3] / 2, 0.0, 1.0)
    wx, bw = _axis_weights(x0, x1, pool, g)
    wy, bh = _axis_weights(y0, y1, pool, g)
    vals = np.einsum("nyg,nxh,ghc->nyxc", wy, wx, grid_feats, optimize=True)
    vals = vals / (
        np.maximum(bh, 1e-12)[:, None, None, None]
        * np.maximum(bw, 1e-12)[:, None, None, None]
    )
    n = boxes01.shape[0]
    return vals.reshape(n, -1)


def time_embedding(t: float, dim: int) -> np.ndarray:
    """Standard sinusoidal embedding of a scalar timestep."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t * freqs
    return np.concatenate([np.sin(args), np.cos(args)])


# ---------------------------------------------------------------------------
# Parameters


def _head_dim(head: str) -> int:
    # One extra logit per head reserved for the background decision; only
    # the deepest supervised head uses it at loss time.
    return HEAD_CLASS_COUNTS[head] + 1


def init_params(
    cfg: ModelConfig, rng: np.random.Generator, head_scale: float = 1e-4
) -> ParamStore:
    """Fresh decoder parameters.

    Trunk and box head use Xavier-uniform init; classification heads start
    near zero (uniform class probabilities).  ``head_scale`` sets the small
    symmetric range for head weights so independently initialized stages
    never share a tensor bit-for-bit; pass 0 for exactly-zero heads.
    """

    def xavier(fan_in, fan_out):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=(fan_in, fan_out))

    d, h = cfg.feat_dim, cfg.hidden
    params: ParamStore = {
        "trunk.w1": xavier(d, h),
        "trunk.b1": np.zeros(h),
        "trunk.w2": xavier(h, h),
        "trunk.b2": np.zeros(h),
        "box.w": xavier(h, 4),
        "box.b": np.zeros(4),
    }
    for head in HEAD_NAMES:
        k = _head_dim(head)
        params[f"head_{head}.w"] = rng.uniform(
            -head_scale, head_scale, size=(h + d, k)
        )
        params[f"head_{head}.b"] = rng.uniform(-head_scale, head_scale, size=k)
    return params


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h = cfg.feat_dim, cfg.hidden
    shapes = {
        "trunk.w1": (d, h), "trunk.b1": (h,),
        "trunk.w2": (h, h), "trunk.b2": (h,),
        "box.w": (h, 4), "box.b": (4,),
    }
    for head in HEAD_NAMES:
        k = _head_dim(head)
        shapes[f"head_{head}.w"] = (h + d, k)
        shapes[f"head_{head}.b"] = (k,)
    return shapes


def check_shapes(params: ParamStore, cfg: ModelConfig) -> None:
    expected = param_shapes(cfg)
    if set(params) != set(expected):
        raise ValueError(
            f"parameter names mismatch: {sorted(set(params) ^ set(expected))}"
        )
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ValueError(
                f"{name}: shape {params[name].shape}, expected {shape}"
            )


def zero_grads(cfg: ModelConfig) -> ParamStore:
    return {k: np.zeros(v) for k, v in param_shapes(cfg).items()}


# ---------------------------------------------------------------------------
# Forward / backward


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ForwardCache:
    """Intermediate activations kept for the analytic backward pass."""

    x: np.ndarray  # (M, D) input features
    h1: np.ndarray
    h2: np.ndarray
    z0_pred: np.ndarray  # (M, 4) signal space
    logits: dict[str, np.ndarray]  # head -> (M, K+1)


def forward_features(
    cfg: ModelConfig, grid_feats: np.ndarray, z: np.ndarray, t: float
) -> np.ndarray:
    """Per-proposal decoder input: pooled RoI features of the decoded noisy
    box concatenated with the timestep embedding."""
    boxes01 = signal_decode(np.asarray(z, dtype=np.float64), cfg.scale)
    roi = roi_pool_batch(grid_feats, boxes01, cfg.pool)
    emb = np.broadcast_to(time_embedding(t, cfg.time_dim), (roi.shape[0], cfg.time_dim))
    return np.concatenate([roi, emb], axis=1)


def forward_net(params: ParamStore, x: np.ndarray, z: np.ndarray) -> ForwardCache:
    """Two-layer ReLU trunk; the box head reads the trunk output, while the
    classification heads read the trunk output concatenated with the raw
    input features — a skip connection that keeps linearly separable input
    evidence available even when the trunk specializes toward regression.

    The box head is residual: it predicts a signal-space correction to the
    input proposal ``z`` rather than an absolute position.  This anchors the
    identity mapping (a proposal refines toward the object under it) at
    initialization.  With an absolute head, set matching can amplify a
    chance anti-correlation in the fresh weights into a stable mirrored
    solution: each object gets claimed by the proposal at its reflected
    position, which scores fine on position-defined labels but leaves
    appearance-defined heads reading the wrong window.
    """
    h1 = np.maximum(x @ params["trunk.w1"] + params["trunk.b1"], 0.0)
    h2 = np.maximum(h1 @ params["trunk.w2"] + params["trunk.b2"], 0.0)
    z0_pred = np.asarray(z, dtype=np.float64) + h2 @ params["box.w"] + params["box.b"]
    h2x = np.concatenate([h2, x], axis=1)
    logits = {
        head: h2x @ params[f"head_{head}.w"] + params[f"head_{head}.b"]
        for head in HEAD_NAMES
    }
    return ForwardCache(x=x, h1=h1, h2=h2, z0_pred=z0_pred, logits=logits)


def backward_net(
    params: ParamStore,
    cache: ForwardCache,
    dz0_pred: np.ndarray,
    dlogits: dict[str, np.ndarray],
    grads: ParamStore,
) -> None:
    """Accumulate parameter gradients for upstream gradients on the decoder
    outputs.  Heads absent from ``dlogits`` receive exactly zero gradient."""
    h1, h2, x = cache.h1, cache.h2, cache.x
    width = h2.shape[1]
    h2x = np.concatenate([h2, x], axis=1)
    dh2 = dz0_pred @ params["box.w"].T
    grads["box.w"] += h2.T @ dz0_pred
    grads["box.b"] += dz0_pred.sum(axis=0)
    for head, dl in dlogits.items():
        dh2 += dl @ params[f"head_{head}.w"][:width].T
        grads[f"head_{head}.w"] += h2x.T @ dl
        grads[f"head_{head}.b"] += dl.sum(axis=0)
    dh2 = dh2 * (h2 > 0)
    dh1 = (dh2 @ params["trunk.w2"].T) * (h1 > 0)
    grads["trunk.w2"] += h1.T @ dh2
    grads["trunk.b2"] += dh2.sum(axis=0)
    grads["trunk.w1"] += x.T @ dh1
    grads["trunk.b1"] += dh1.sum(axis=0)


def loss_probs_for_mask(
    logits: dict[str, np.ndarray], mask: HeadMask
) -> dict[str, np.ndarray]:
    """Per-head probabilities used by matching and the loss.

    The deepest supervised head runs softmax over K+1 classes (background
    included); shallower supervised heads over their K foreground classes.
    Unsupervised heads are omitted.
    """
    out = {}
    for head in mask.active_heads:
        k = HEAD_CLASS_COUNTS[head]
        if head == mask.deepest_head:
            out[head] = softmax(logits[head])
        else:
            out[head] = softmax(logits[head][:, :k])
    return out


def decode(
    params: ParamStore,
    grid_feats: np.ndarray,
    z: np.ndarray,
    t: float,
    mask: HeadMask,
    cfg: ModelConfig,
):
    """Run the decoder on N proposals.

    Returns (detections, z0_pred, cache).  Detection display probabilities
    are softmaxed over foreground classes only; ``loss_probs`` additionally
    carries the background-aware distributions for the supervised heads.
    """
    from .matching import Detection
    from .geometry import Box

    check_shapes(params, cfg)
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != 4:
        raise ValueError("proposals must be an (N, 4) array")
    x = forward_features(cfg, grid_feats, z, t)
    cache = forward_net(params, x, z)
    display = {
        head: softmax(cache.logits[head][:, : HEAD_CLASS_COUNTS[head]])
        for head in HEAD_NAMES
    }
    loss_probs = loss_probs_for_mask(cache.logits, mask)
    boxes01 = signal_decode(cache.z0_pred, cfg.scale)
    deepest = mask.deepest_head
    dets = []
    for i in range(z.shape[0]):
        dets.append(
            Detection(
                box=Box.from_array(boxes01[i]),
                probs_q=display["quadrant"][i],
                probs_e=display["enumeration"][i],
                probs_d=display["diagnosis"][i],
                score=float(display[deepest][i].max()),
                loss_probs={h: p[i] for h, p in loss_probs.items()},
            )
        )
    return dets, cache.z0_pred, cache


def decode_grad_mask(z0_pred: np.ndarray, scale: float) -> np.ndarray:
    """Derivative of signal_decode w.r.t. its input (0 where clamped)."""
    x = (z0_pred / scale + 1.0) / 2.0
    m = np.empty_like(x)
    m[..., :2] = (x[..., :2] > 0.0) & (x[..., :2] < 1.0)
    m[..., 2:] = (x[..., 2:] > MIN_SIZE) & (x[..., 2:] < 1.0)
    return m / (2.0 * scale)


@dataclass
class BatchItem:
    """One training image prepared for the decoder."""

    grid_feats: np.ndarray
    z: np.ndarray  # (N, 4) signal-space proposals
    t: float
    gt_boxes: np.ndarray  # (M, 4) normalized center-size
    gt_labels: list  # list of LabelTriple, length M


def loss_gradients(
    params: ParamStore,
    batch: list[BatchItem],
    mask: HeadMask,
    cfg: ModelConfig,
):
    """Loss and exact analytic gradients over a batch of images.

    Returns (loss, grads, breakdown) with the loss mean-reduced over images.
    Gradients of heads outside the mask are identically zero.
    """
    from .matching import LossBreakdown, loss_forward_backward, match_arrays

    check_shapes(params, cfg)
    grads = zero_grads(cfg)
    b = len(batch)
    totals = np.zeros(6)
    caches = []
    for item in batch:
        x = forward_features(cfg, item.grid_feats, item.z, item.t)
        cache = forward_net(params, x, item.z)
        caches.append(cache)
    for item, cache in zip(batch, caches):
        boxes01 = signal_decode(cache.z0_pred, cfg.scale)
        probs = loss_probs_for_mask(cache.logits, mask)
        pairs = match_arrays(probs, boxes01, item.gt_boxes, item.gt_labels, mask, cfg)
        bd, dlogits, dboxes01 = loss_forward_backward(
            probs, boxes01, item.gt_boxes, item.gt_labels, pairs, mask, cfg
        )
        if not np.isfinite(bd.total):
            bad = [
                name
                for name, v in zip(
                    ("cls_q", "cls_e", "cls_d", "l1", "giou"),
                    (bd.cls_q, bd.cls_e, bd.cls_d, bd.l1, bd.giou),
                )
                if not np.isfinite(v)
            ]
            raise FloatingPointError(f"non-finite loss terms: {bad}")
        totals += np.array([bd.cls_q, bd.cls_e, bd.cls_d, bd.l1, bd.giou, bd.total])
        # Mean over the batch; pad partial-head gradients up to K+1 logits.
        dz0_pred = dboxes01 * decode_grad_mask(cache.z0_pred, cfg.scale) / b
        full_dlogits = {}
        for head, dl in dlogits.items():
            full = np.zeros_like(cache.logits[head])
            full[:, : dl.shape[1]] = dl / b
            full_dlogits[head] = full
        backward_net(params, cache, dz0_pred, full_dlogits, grads)
    totals /= b
    breakdown = LossBreakdown(*totals)
    return breakdown.total, grads, breakdown


# ---------------------------------------------------------------------------
# Weight transfer and checkpoints


def transfer_weights(
    src: ParamStore,
    dst: ParamStore,
    src_mask: HeadMask | None = None,
) -> tuple[ParamStore, list[str]]:
    """Copy trunk, box head, and previously supervised classification heads
    from ``src`` into a copy of ``dst``.

    Heads outside ``src_mask`` (newly supervised at the deeper stage) keep
    their fresh initialization.  Returns the new store and the list of
    copied tensor names.
    """
    for name in ("trunk.w1", "trunk.b1", "trunk.w2", "trunk.b2", "box.w", "box.b"):
        if src[name].shape != dst[name].shape:
            raise ValueError(f"incompatible trunk shapes for {name}")
    heads = src_mask.active_heads if src_mask is not None else tuple(HEAD_NAMES)
    copied = ["trunk.w1", "trunk.b1", "trunk.w2", "trunk.b2", "box.w", "box.b"]
    copied += [f"head_{h}.{p}" for h in heads for p in ("w", "b")]
    out = {k: v.copy() for k, v in dst.items()}
    for name in copied:
        if src[name].shape != out[name].shape:
            raise ValueError(f"incompatible shapes for {name}")
        out[name] = src[name].copy()
    return out, copied


_CKPT_MAGIC = b"DDCKPT01"


def save_checkpoint(path, params: ParamStore, meta: dict | None = None) -> None:
    """Self-describing binary container: JSON header with tensor directory,
    then raw float64 little-endian data.  Round-trips bit-exactly."""
    names = sorted(params)
    header = json.dumps(
        {
            "meta": meta or {},
            "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names],
        }
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for n in names:
            f.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    with open(path, "rb") as f:
        if f.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        params: ParamStore = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(count * 8), dtype="<f8").astype(
                np.float64
            )
            params[entry["name"]] = data.reshape(shape)
    return params, header["meta"]
