"""Toy two-branch volumetric segmenter with hand-written backpropagation.

Architecture: a shared trunk of 3x3x3 same-padded convolutions with ReLU,
followed by two independent 1x1x1 heads that each emit one logit channel
(tumor-proximal and tumor-distal branch).  A logistic link turns logits
into foreground probabilities.

Everything is plain numpy.  Parameters and activations follow a single
dtype (float32 for training, float64 for gradient verification); loss
reductions happen in float64 either way.  Feature maps are laid out as
``(channels, nz, ny, nx)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

KERNEL = 3  # trunk kernel edge; same padding of 1
DIST_SCALE_MM = 100.0  # distance channel is divided by this before the net


@dataclass(frozen=True)
class SegmenterConfig:
    in_channels: int = 3  # CT, PET, distance map
    trunk_channels: tuple[int, ...] = (8, 8)
    seed: int = 0

    def __post_init__(self):
        if len(self.trunk_channels) < 1:
            raise ValueError("at least one trunk layer is required")
        if self.in_channels < 1 or any(c < 1 for c in self.trunk_channels):
            raise ValueError("channel counts must be >= 1")
        object.__setattr__(self, "trunk_channels", tuple(int(c) for c in self.trunk_channels))


@dataclass
class SegmenterParams:
    config: SegmenterConfig
    trunk_w: list[np.ndarray]  # per layer (Cout, Cin, 3, 3, 3)
    trunk_b: list[np.ndarray]  # per layer (Cout,)
    head_w: list[np.ndarray]  # two heads, each (C_trunk,)
    head_b: list[np.ndarray]  # two heads, each ()
    step: int = 0

    @property
    def dtype(self) -> np.dtype:
        return self.trunk_w[0].dtype

    def tensors(self) -> list[np.ndarray]:
        """Live parameter arrays in canonical order (trunk then heads)."""
        out = []
        for w, b in zip(self.trunk_w, self.trunk_b):
            out.extend([w, b])
        for w, b in zip(self.head_w, self.head_b):
            out.extend([w, b])
        return out


def init_params(config: SegmenterConfig, dtype=np.float32) -> SegmenterParams:
    """Deterministic Glorot-uniform weights and zero biases from the seed."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(config.seed)))
    trunk_w, trunk_b = [], []
    c_in = config.in_channels
    k3 = KERNEL**3
    for c_out in config.trunk_channels:
        a = np.sqrt(6.0 / (c_in * k3 + c_out * k3))
        w = rng.uniform(-a, a, size=(c_out, c_in, KERNEL, KERNEL, KERNEL))
        trunk_w.append(w.astype(dtype))
        trunk_b.append(np.zeros(c_out, dtype=dtype))
        c_in = c_out
    head_w, head_b = [], []
    for _ in range(2):
        a = np.sqrt(6.0 / (c_in + 1))
        head_w.append(rng.uniform(-a, a, size=c_in).astype(dtype))
        head_b.append(np.zeros((), dtype=dtype))
    return SegmenterParams(config, trunk_w, trunk_b, head_w, head_b)


def _im2col(x: np.ndarray) -> np.ndarray:
    """(C, nz, ny, nx) -> (N, C*27) patch matrix with zero same-padding."""
    c = x.shape[0]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (KERNEL, KERNEL, KERNEL), axis=(1, 2, 3))
    n = x.shape[1] * x.shape[2] * x.shape[3]
    return np.ascontiguousarray(win.transpose(1, 2, 3, 0, 4, 5, 6).reshape(n, c * KERNEL**3))


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    cols = _im2col(x)
    c_out = w.shape[0]
    y = cols @ w.reshape(c_out, -1).T + b
    spatial = x.shape[1:]
    return np.ascontiguousarray(y.T.reshape((c_out,) + spatial)), cols


def _conv_backward(d_out: np.ndarray, cols: np.ndarray, w: np.ndarray, in_shape):
    c_out = d_out.shape[0]
    d_mat = d_out.reshape(c_out, -1).T  # (N, Cout)
    dw = (d_mat.T @ cols).reshape(w.shape)
    db = d_mat.sum(axis=0)
    d_cols = d_mat @ w.reshape(c_out, -1)  # (N, Cin*27)
    c_in, (nz, ny, nx) = in_shape[0], in_shape[1:]
    d_pad = np.zeros((c_in, nz + 2, ny + 2, nx + 2), dtype=d_out.dtype)
    dc = d_cols.reshape(nz, ny, nx, c_in, KERNEL, KERNEL, KERNEL)
    for dz in range(KERNEL):
        for dy in range(KERNEL):
            for dx in range(KERNEL):
                d_pad[:, dz:dz + nz, dy:dy + ny, dx:dx + nx] += dc[
                    :, :, :, :, dz, dy, dx
                ].transpose(3, 0, 1, 2)
    return dw, db, d_pad[:, 1:-1, 1:-1, 1:-1]


def forward(params: SegmenterParams, x: np.ndarray, keep_cache: bool = False):
    """Run the segmenter on a (in_channels, nz, ny, nx) stack.

    Returns ``(p_prox, p_dist)`` probability arrays of shape (nz, ny, nx),
    plus the activation cache when ``keep_cache`` is set (reused by
    ``backward`` to avoid recomputing the trunk).
    """
    x = np.ascontiguousarray(x, dtype=params.dtype)
    if x.ndim != 4 or x.shape[0] != params.config.in_channels:
        raise ValueError(
            f"input must be ({params.config.in_channels}, nz, ny, nx), got {x.shape}"
        )
    if any(s < 1 for s in x.shape[1:]):
        raise ValueError("spatial dims must be >= 1")
    feats = x
    cache = {"x": x, "cols": [], "pre": [], "acts": []} if keep_cache else None
    for w, b in zip(params.trunk_w, params.trunk_b):
        pre, cols = _conv_forward(feats, w, b)
        feats = np.maximum(pre, 0)
        if keep_cache:
            cache["cols"].append(cols)
            cache["pre"].append(pre)
            cache["acts"].append(feats)
    probs = []
    for hw, hb in zip(params.head_w, params.head_b):
        logits = np.tensordot(hw, feats, axes=([0], [0])) + hb
        probs.append(expit(logits))
    if keep_cache:
        cache["feats"] = feats
        return probs[0], probs[1], cache
    return probs[0], probs[1]


def backward(
    params: SegmenterParams,
    x: np.ndarray,
    grad_logits: tuple[np.ndarray, np.ndarray],
    cache: dict | None = None,
) -> list[np.ndarray]:
    """Backpropagate per-branch logit gradients to every parameter.

    Head gradients flow into the shared trunk and are summed there, so the
    trunk receives signal from both branches.  Returns gradient arrays in
    the canonical ``params.tensors()`` order.
    """
    if cache is None:
        _, _, cache = forward(params, x, keep_cache=True)
    feats = cache["feats"]
    dtype = params.dtype
    d_feats = np.zeros_like(feats)
    head_grads = []
    for hw, dz in zip(params.head_w, grad_logits):
        dz = np.ascontiguousarray(dz, dtype=dtype)
        dhw = np.tensordot(dz, feats, axes=([0, 1, 2], [1, 2, 3]))
        dhb = dz.sum(dtype=dtype)
        head_grads.append((dhw.astype(dtype), np.asarray(dhb, dtype=dtype)))
        d_feats += hw[:, None, None, None] * dz[None]

    trunk_grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params.trunk_w)
    d_act = d_feats
    for i in range(len(params.trunk_w) - 1, -1, -1):
        d_pre = d_act * (cache["pre"][i] > 0)
        in_arr = cache["x"] if i == 0 else cache["acts"][i - 1]
        dw, db, d_act = _conv_backward(
            d_pre, cache["cols"][i], params.trunk_w[i], in_arr.shape
        )
        trunk_grads[i] = (dw, db)

    out: list[np.ndarray] = []
    for dw, db in trunk_grads:
        out.extend([dw, db])
    for dhw, dhb in head_grads:
        out.extend([dhw, dhb])
    return out


class MomentumSgd:
    """Classical momentum gradient descent: v <- mu*v + g; p <- p - lr*v."""

    def __init__(self, lr: float, momentum: float = 0.0):
        if lr <= 0:
            raise ValueError("lr must be > 0")
        if not 0 <= momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        self.lr = lr
        self.momentum = momentum
        self._velocity: list[np.ndarray] | None = None

    def step(self, params: SegmenterParams, grads: list[np.ndarray]) -> SegmenterParams:
        tensors = params.tensors()
        if len(grads) != len(tensors):
            raise ValueError("gradient list does not match parameter list")
        for g in grads:
            if not np.isfinite(g).all():
                raise FloatingPointError("non-finite gradient: training diverged")
        if self._velocity is None:
            self._velocity = [np.zeros_like(t) for t in tensors]
        for t, v, g in zip(tensors, self._velocity, grads):
            v *= self.momentum
            v += g.reshape(v.shape)
            t -= (self.lr * v).astype(t.dtype)
        params.step += 1
        return params


def normalize_input_stack(ct: np.ndarray, pet: np.ndarray, dist_mm: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Build the 3-channel network input.

    CT and PET are z-scored over the given region; the distance channel is
    divided by ``DIST_SCALE_MM``.  Statistics are computed in float64.
    """
    out = np.empty((3,) + ct.shape, dtype=dtype)
    for i, ch in enumerate((ct, pet)):
        ch64 = np.asarray(ch, dtype=np.float64)
        mu = ch64.mean()
        sd = ch64.std()
        if sd < 1e-8:
            sd = 1.0
        out[i] = ((ch64 - mu) / sd).astype(dtype)
    out[2] = (np.asarray(dist_mm, dtype=np.float64) / DIST_SCALE_MM).astype(dtype)
    return out


def save_checkpoint(path_prefix: str | Path, params: SegmenterParams, extra: dict | None = None) -> None:
    """Write ``<prefix>.json`` manifest + ``<prefix>.raw`` little-endian payload."""
    prefix = Path(path_prefix)
    prefix = prefix.with_suffix("") if prefix.suffix in (".json", ".raw") else prefix
    tensors = params.tensors()
    names = _tensor_names(params)
    dtype_code = "f64" if params.dtype == np.float64 else "f32"
    manifest = {
        "config": {
            "in_channels": params.config.in_channels,
            "trunk_channels": list(params.config.trunk_channels),
            "seed": params.config.seed,
        },
        "dtype": dtype_code,
        "step": params.step,
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in zip(names, tensors)],
    }
    if extra:
        manifest["extra"] = extra
    prefix.parent.mkdir(parents=True, exist_ok=True)
    with open(prefix.with_suffix(".json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    raw_dtype = "<f8" if dtype_code == "f64" else "<f4"
    payload = b"".join(np.ascontiguousarray(t, dtype=raw_dtype).tobytes() for t in tensors)
    prefix.with_suffix(".raw").write_bytes(payload)


def load_checkpoint(path_prefix: str | Path) -> tuple[SegmenterParams, dict]:
    """Load a checkpoint pair; returns the params and the manifest dict."""
    prefix = Path(path_prefix)
    prefix = prefix.with_suffix("") if prefix.suffix in (".json", ".raw") else prefix
    with open(prefix.with_suffix(".json")) as fh:
        manifest = json.load(fh)
    cfg = manifest["config"]
    config = SegmenterConfig(
        in_channels=cfg["in_channels"],
        trunk_channels=tuple(cfg["trunk_channels"]),
        seed=cfg["seed"],
    )
    dtype = np.float64 if manifest["dtype"] == "f64" else np.float32
    raw_dtype = np.dtype("<f8") if manifest["dtype"] == "f64" else np.dtype("<f4")
    params = init_params(config, dtype=dtype)
    params.step = manifest.get("step", 0)
    tensors = params.tensors()
    payload = prefix.with_suffix(".raw").read_bytes()
    expected = sum(t.size for t in tensors) * raw_dtype.itemsize
    if len(payload) != expected:
        raise ValueError(
            f"checkpoint payload size mismatch: expected {expected} bytes, got {len(payload)}"
        )
    offset = 0
    for t, entry in zip(tensors, manifest["tensors"]):
        if list(t.shape) != entry["shape"]:
            raise ValueError(f"tensor {entry['name']} shape mismatch")
        nbytes = t.size * raw_dtype.itemsize
        flat = np.frombuffer(payload[offset:offset + nbytes], dtype=raw_dtype)
        t[...] = flat.reshape(t.shape).astype(dtype)
        offset += nbytes
    return params, manifest


def _tensor_names(params: SegmenterParams) -> list[str]:
    names = []
    for i in range(len(params.trunk_w)):
        names.extend([f"trunk{i}.w", f"trunk{i}.b"])
    for branch in ("prox", "dist"):
        names.extend([f"head_{branch}.w", f"head_{branch}.b"])
    return names


def flatten_params(params: SegmenterParams) -> np.ndarray:
    """All parameters as one float64 vector in canonical order (for checks)."""
    return np.concatenate([t.astype(np.float64).ravel() for t in params.tensors()])


def assign_flat(params: SegmenterParams, vec: np.ndarray) -> None:
    """Write a flat vector back into the parameter tensors."""
    offset = 0
    for t in params.tensors():
        t[...] = vec[offset:offset + t.size].reshape(t.shape).astype(t.dtype)
        offset += t.size
    if offset != vec.size:
        raise ValueError("flat vector length does not match parameter count")
