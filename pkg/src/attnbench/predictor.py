"""Trainable attention head: 1x1 conv stack -> ConvLSTM -> Gaussian blur -> softmax.

Everything is plain numpy in float64 with hand-written reverse-mode
gradients.  Features arrive as ``(T, C, H, W)`` for one sequence or
``(B, T, C, H, W)`` for a batch of equal-length sequences.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .hws import FrameWeight, FrameWeightTable, SequenceWindow, enumerate_windows, sample_windows
from .maps import AttentionMap, ClipSequence, SmoothingConfig, normalize, smoothing_matrix

log = logging.getLogger(__name__)

KERNEL = 3


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, losses: Sequence[float] = ()):
        super().__init__(message)
        self.losses = list(losses)


@dataclass(frozen=True)
class PredictorConfig:
    """Layer widths: ``channels`` runs from the feature depth to the ConvLSTM input."""

    channels: tuple[int, ...] = (8, 8, 8, 4)
    hidden: int = 8
    sigma: float = 1.5

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) < 2 or min(self.channels) < 1 or self.hidden < 1:
            raise ValueError(f"invalid predictor widths {self.channels}, hidden={self.hidden}")

    @property
    def n_conv(self) -> int:
        return len(self.channels) - 1

    @property
    def smoothing(self) -> SmoothingConfig:
        return SmoothingConfig(self.sigma)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        out: dict[str, tuple[int, ...]] = {}
        for layer, (cin, cout) in enumerate(zip(self.channels[:-1], self.channels[1:])):
            out[f"conv{layer}_w"] = (cin, cout)
            out[f"conv{layer}_b"] = (cout,)
        g = 4 * self.hidden
        out["lstm_wx"] = (g, self.channels[-1], KERNEL, KERNEL)
        out["lstm_wh"] = (g, self.hidden, KERNEL, KERNEL)
        out["lstm_b"] = (g,)
        out["proj_w"] = (self.hidden,)
        out["proj_b"] = (1,)
        return out


PAPER_CONFIG = PredictorConfig((256, 64, 16, 8), hidden=8)
DESK_CONFIG = PredictorConfig((8, 8, 8, 4), hidden=8)


@dataclass(eq=False)
class PredictorParams:
    config: PredictorConfig
    arrays: dict[str, np.ndarray]

    def __post_init__(self):
        expected = self.config.shapes()
        if set(expected) != set(self.arrays):
            missing = sorted(set(expected) - set(self.arrays))
            extra = sorted(set(self.arrays) - set(expected))
            raise ValueError(f"parameter names mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            a = np.asarray(self.arrays[name], dtype=np.float64)
            if a.shape != shape:
                raise ValueError(f"parameter {name}: shape {a.shape}, expected {shape}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"parameter {name} has non-finite values")
            self.arrays[name] = a

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def copy(self) -> "PredictorParams":
        return PredictorParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}


def init_params(config: PredictorConfig = DESK_CONFIG, seed: int = 0) -> PredictorParams:
    rng = np.random.default_rng(seed)
    arrays = {}
    for layer, (cin, cout) in enumerate(zip(config.channels[:-1], config.channels[1:])):
        arrays[f"conv{layer}_w"] = rng.normal(0.0, np.sqrt(2.0 / cin), (cin, cout))
        arrays[f"conv{layer}_b"] = np.full(cout, 0.01)
    hd = config.hidden
    fan_in = KERNEL * KERNEL * (config.channels[-1] + hd)
    scale = 1.0 / np.sqrt(fan_in)
    arrays["lstm_wx"] = rng.normal(0.0, scale, (4 * hd, config.channels[-1], KERNEL, KERNEL))
    arrays["lstm_wh"] = rng.normal(0.0, scale, (4 * hd, hd, KERNEL, KERNEL))
    b = np.zeros(4 * hd)
    b[hd:2 * hd] = 1.0  # forget gate starts open
    arrays["lstm_b"] = b
    arrays["proj_w"] = rng.normal(0.0, 1.0 / np.sqrt(hd), hd)
    arrays["proj_b"] = np.zeros(1)
    return PredictorParams(config, arrays)


@dataclass(frozen=True)
class DropoutConfig:
    conv_stack_rate: float = 0.5
    lstm_input_rate: float = 0.25
    lstm_recurrent_rate: float = 0.25
    mode: str = "train"

    def __post_init__(self):
        for name in ("conv_stack_rate", "lstm_input_rate", "lstm_recurrent_rate"):
            r = getattr(self, name)
            if not 0.0 <= r < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {r}")
        if self.mode not in ("train", "eval"):
            raise ValueError(f"dropout mode must be 'train' or 'eval', got {self.mode!r}")

    @property
    def active(self) -> bool:
        return self.mode == "train"


EVAL = DropoutConfig(mode="eval")


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_sequences: int = 10
    sequence_length: int = 6
    iterations: int = 10000

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_sequences < 1 or self.sequence_length < 1 or self.iterations < 0:
            raise ValueError("batch_sequences and sequence_length must be >= 1")


# -- convolution helpers ------------------------------------------------------


def _im2col(x: np.ndarray) -> np.ndarray:
    """``(B, C, H, W)`` -> ``(B, C*9, H*W)`` patches of a zero-padded 3x3 window."""
    b, c, h, w = x.shape
    r = KERNEL // 2
    xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)))
    cols = np.empty((b, c, KERNEL, KERNEL, h, w))
    for dy in range(KERNEL):
        for dx in range(KERNEL):
            cols[:, :, dy, dx] = xp[:, :, dy:dy + h, dx:dx + w]
    return cols.reshape(b, c * KERNEL * KERNEL, h * w)


def _col2im(dcols: np.ndarray, c: int, h: int, w: int) -> np.ndarray:
    b = dcols.shape[0]
    r = KERNEL // 2
    d = dcols.reshape(b, c, KERNEL, KERNEL, h, w)
    dxp = np.zeros((b, c, h + 2 * r, w + 2 * r))
    for dy in range(KERNEL):
        for dx in range(KERNEL):
            dxp[:, :, dy:dy + h, dx:dx + w] += d[:, :, dy, dx]
    return dxp[:, :, r:r + h, r:r + w]


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(scores: np.ndarray) -> np.ndarray:
    """Softmax over the last axis."""
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _keep_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray | None:
    if rate == 0.0:
        return None
    return (rng.random(shape) >= rate) / (1.0 - rate)


# -- forward / backward -------------------------------------------------------


@dataclass(eq=False)
class ForwardCache:
    params: PredictorParams
    batched: bool
    grid: tuple[int, int]
    conv_inputs: list[np.ndarray] = field(default_factory=list)
    conv_pre: list[np.ndarray] = field(default_factory=list)
    conv_masks: list[np.ndarray | None] = field(default_factory=list)
    mask_x: np.ndarray | None = None
    mask_h: np.ndarray | None = None
    steps: list[dict[str, np.ndarray]] = field(default_factory=list)
    probs: np.ndarray | None = None  # (B, T, H*W)


def _as_batch(features: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 4:
        return x[None], False
    if x.ndim == 5:
        return x, True
    raise ValueError(f"features must be (T,C,H,W) or (B,T,C,H,W), got shape {x.shape}")


def forward(
    params: PredictorParams,
    features: np.ndarray,
    dropout: DropoutConfig = EVAL,
    seed: int | np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardCache]:
    """Run the head over a sequence; returns per-frame probabilities ``(..., T, H, W)``.

    In train mode the conv stack uses fresh inverted-dropout masks per frame;
    the ConvLSTM input and recurrent masks are drawn once per sequence and
    reused at every step.
    """
    cfg = params.config
    x, batched = _as_batch(features)
    b, t_len, c0, h, w = x.shape
    if t_len < 1:
        raise ValueError("sequence must contain at least one frame")
    if c0 != cfg.channels[0]:
        raise ValueError(f"conv0: feature channels {c0} != expected {cfg.channels[0]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("features contain non-finite values")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    train = dropout.active
    cache = ForwardCache(params, batched, (h, w))

    a = x
    for layer in range(cfg.n_conv):
        wmat = params[f"conv{layer}_w"]
        if a.shape[2] != wmat.shape[0]:
            raise ValueError(f"conv{layer}: input channels {a.shape[2]} != {wmat.shape[0]}")
        z = np.einsum("btchw,cd->btdhw", a, wmat) + params[f"conv{layer}_b"][:, None, None]
        r = np.maximum(z, 0.0)
        m = _keep_mask(rng, r.shape, dropout.conv_stack_rate) if train else None
        cache.conv_inputs.append(a)
        cache.conv_pre.append(z)
        cache.conv_masks.append(m)
        a = r if m is None else r * m

    hd = cfg.hidden
    cin = cfg.channels[-1]
    if train:
        cache.mask_x = _keep_mask(rng, (b, cin, h, w), dropout.lstm_input_rate)
        cache.mask_h = _keep_mask(rng, (b, hd, h * w), dropout.lstm_recurrent_rate)
    wx = params["lstm_wx"].reshape(4 * hd, -1)
    wh = params["lstm_wh"].reshape(4 * hd, -1)
    bias = params["lstm_b"][:, None]
    pw = params["proj_w"]
    pb = params["proj_b"][0]
    sm = cfg.smoothing
    ky = smoothing_matrix(h, sm)
    kx = smoothing_matrix(w, sm)

    hprev = np.zeros((b, hd, h * w))
    cprev = np.zeros((b, hd, h * w))
    probs = np.empty((b, t_len, h * w))
    for t in range(t_len):
        xt = a[:, t]
        if cache.mask_x is not None:
            xt = xt * cache.mask_x
        hin = hprev if cache.mask_h is None else hprev * cache.mask_h
        cols_x = _im2col(xt)
        cols_h = _im2col(hin.reshape(b, hd, h, w))
        z = wx @ cols_x + wh @ cols_h + bias
        i = _sigmoid(z[:, :hd])
        f = _sigmoid(z[:, hd:2 * hd])
        o = _sigmoid(z[:, 2 * hd:3 * hd])
        g = np.tanh(z[:, 3 * hd:])
        c = f * cprev + i * g
        tc = np.tanh(c)
        hcur = o * tc
        score = np.einsum("bkn,k->bn", hcur, pw) + pb
        smoothed = ky @ score.reshape(b, h, w) @ kx.T
        p = softmax(smoothed.reshape(b, h * w))
        probs[:, t] = p
        cache.steps.append(dict(cols_x=cols_x, cols_h=cols_h, i=i, f=f, o=o, g=g,
                                c_prev=cprev, tc=tc, h=hcur))
        hprev, cprev = hcur, c
    cache.probs = probs
    out = probs.reshape(b, t_len, h, w)
    return (out if batched else out[0]), cache


def backward(cache: ForwardCache, gt: np.ndarray) -> dict[str, np.ndarray]:
    """Gradient of the summed per-frame cross-entropy w.r.t. every parameter."""
    params = cache.params
    cfg = params.config
    h, w = cache.grid
    g_arr = np.asarray(gt, dtype=np.float64)
    if not cache.batched:
        g_arr = g_arr[None]
    b, t_len = cache.probs.shape[:2]
    if g_arr.shape != (b, t_len, h, w):
        raise ValueError(f"ground truth shape {g_arr.shape} does not match forward output {(b, t_len, h, w)}")
    g_flat = g_arr.reshape(b, t_len, h * w)
    grads = params.zeros_like()

    hd = cfg.hidden
    cin = cfg.channels[-1]
    wx = params["lstm_wx"].reshape(4 * hd, -1)
    wh = params["lstm_wh"].reshape(4 * hd, -1)
    pw = params["proj_w"]
    sm = cfg.smoothing
    ky = smoothing_matrix(h, sm)
    kx = smoothing_matrix(w, sm)

    dwx = np.zeros_like(wx)
    dwh = np.zeros_like(wh)
    db = np.zeros(4 * hd)
    du = np.zeros((b, t_len, cin, h, w))
    dh_next = np.zeros((b, hd, h * w))
    dc_next = np.zeros((b, hd, h * w))
    for t in reversed(range(t_len)):
        st = cache.steps[t]
        p = cache.probs[:, t]
        gt_t = g_flat[:, t]
        dlogits = p * gt_t.sum(axis=1, keepdims=True) - gt_t
        dscore = (ky.T @ dlogits.reshape(b, h, w) @ kx).reshape(b, h * w)
        grads["proj_w"] += np.einsum("bn,bkn->k", dscore, st["h"])
        grads["proj_b"][0] += dscore.sum()
        dh = pw[None, :, None] * dscore[:, None, :] + dh_next
        i, f, o, g, tc = st["i"], st["f"], st["o"], st["g"], st["tc"]
        do = dh * tc
        dc = dh * o * (1.0 - tc * tc) + dc_next
        di = dc * g
        dg = dc * i
        df = dc * st["c_prev"]
        dc_next = dc * f
        dz = np.concatenate(
            [di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)], axis=1
        )
        db += dz.sum(axis=(0, 2))
        dwx += np.tensordot(dz, st["cols_x"], axes=([0, 2], [0, 2]))
        dwh += np.tensordot(dz, st["cols_h"], axes=([0, 2], [0, 2]))
        dxt = _col2im(wx.T @ dz, cin, h, w)
        if cache.mask_x is not None:
            dxt = dxt * cache.mask_x
        du[:, t] = dxt
        dhin = _col2im(wh.T @ dz, hd, h, w).reshape(b, hd, h * w)
        dh_next = dhin if cache.mask_h is None else dhin * cache.mask_h
    grads["lstm_wx"] = dwx.reshape(params["lstm_wx"].shape)
    grads["lstm_wh"] = dwh.reshape(params["lstm_wh"].shape)
    grads["lstm_b"] = db

    dout = du
    for layer in reversed(range(cfg.n_conv)):
        m = cache.conv_masks[layer]
        dr = dout if m is None else dout * m
        dz = dr * (cache.conv_pre[layer] > 0)
        grads[f"conv{layer}_w"] = np.einsum("btchw,btdhw->cd", cache.conv_inputs[layer], dz)
        grads[f"conv{layer}_b"] = dz.sum(axis=(0, 1, 3, 4))
        if layer:
            dout = np.einsum("btdhw,cd->btchw", dz, params[f"conv{layer}_w"])
    return grads


def cross_entropy(pred, gt) -> float:
    """``-sum(gt * ln(pred))``; ``pred`` must be strictly positive."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {g.shape}")
    if np.any(p <= 0):
        raise ValueError("cross-entropy needs a strictly positive prediction")
    return float(-np.sum(g * np.log(p)))


def sequence_loss(probs: np.ndarray, gt: np.ndarray) -> float:
    """Cross-entropy summed over every frame (and sequence) of a forward pass."""
    p = np.asarray(probs, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {g.shape}")
    return float(-np.sum(g * np.log(p)))


def predict(params: PredictorParams, features: np.ndarray) -> list[AttentionMap]:
    """Eval-mode prediction for one sequence ``(T, C, H, W)``."""
    probs, _ = forward(params, features, EVAL)
    return [normalize(p) for p in probs]


# -- optimisation -------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState | None,
    config: OptimizerConfig,
    t: int,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new arrays and state, inputs untouched."""
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"diverged: non-finite gradient for {k}")
    if state is None:
        state = AdamState({k: np.zeros_like(v) for k, v in params.items()},
                          {k: np.zeros_like(v) for k, v in params.items()})
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k}")
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        new_params[k] = p - config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.epsilon)
        new_m[k] = m
        new_v[k] = v
    return new_params, AdamState(new_m, new_v, t)


@dataclass(frozen=True, eq=False)
class TrainingClip:
    """Feature tensor ``(T, C, H, W)`` with its target attention maps."""

    clip_id: str
    features: np.ndarray
    targets: ClipSequence

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 4:
            raise ValueError(f"clip {self.clip_id!r}: features must be (T,C,H,W), got {f.shape}")
        if f.shape[0] != len(self.targets) or f.shape[2:] != self.targets.shape:
            raise ValueError(
                f"clip {self.clip_id!r}: features {f.shape} do not match targets "
                f"{(len(self.targets),) + self.targets.shape}"
            )
        object.__setattr__(self, "features", f)

    def __len__(self):
        return self.features.shape[0]


@dataclass
class TrainResult:
    params: PredictorParams
    losses: list[float]


def uniform_table(corpus: Sequence[TrainingClip]) -> FrameWeightTable:
    return FrameWeightTable(
        [FrameWeight(c.clip_id, i, 0.0, 1.0) for c in corpus for i in range(len(c))]
    )


def training_windows(
    corpus: Sequence[TrainingClip],
    sampler: str,
    table: FrameWeightTable | None,
    length: int,
) -> list[SequenceWindow]:
    lengths = {c.clip_id: len(c) for c in corpus}
    if sampler == "uniform":
        return enumerate_windows(lengths, uniform_table(corpus), length)
    if sampler == "hws":
        if table is None:
            raise ValueError("hws sampler needs a frame weight table")
        return enumerate_windows(lengths, table, length)
    raise ValueError(f"unknown sampler {sampler!r}; expected 'uniform' or 'hws'")


def train(
    corpus: Sequence[TrainingClip],
    config: OptimizerConfig = OptimizerConfig(),
    *,
    sampler: str = "uniform",
    table: FrameWeightTable | None = None,
    dropout: DropoutConfig = DropoutConfig(),
    seed: int = 0,
    model_config: PredictorConfig = DESK_CONFIG,
    init: PredictorParams | None = None,
) -> TrainResult:
    """Minimize mean per-frame cross-entropy over sampled windows with Adam.

    Each iteration draws ``batch_sequences`` windows (uniformly over windows,
    or proportional to summed HWS weights), runs one batched forward/backward,
    averages gradients over all frames in the batch and takes an Adam step.
    """
    if not corpus:
        raise ValueError("empty training corpus")
    by_id = {c.clip_id: c for c in corpus}
    windows = training_windows(corpus, sampler, table, config.sequence_length)
    rng = np.random.default_rng([seed, 1])
    params = init.copy() if init is not None else init_params(model_config, seed)
    arrays = params.arrays
    state = None
    losses: list[float] = []
    n_frames = config.batch_sequences * config.sequence_length
    for it in range(1, config.iterations + 1):
        batch = sample_windows(windows, config.batch_sequences, rng)
        x = np.stack([by_id[wn.clip_id].features[wn.start_frame:wn.start_frame + wn.length]
                      for wn in batch])
        g = np.stack([by_id[wn.clip_id].targets.stack[wn.start_frame:wn.start_frame + wn.length]
                      for wn in batch])
        probs, cache = forward(PredictorParams(params.config, arrays), x, dropout, rng)
        loss = sequence_loss(probs, g) / n_frames
        if not np.isfinite(loss):
            raise DivergenceError(f"diverged: non-finite loss at iteration {it}", losses)
        losses.append(loss)
        grads = {k: v / n_frames for k, v in backward(cache, g).items()}
        try:
            arrays, state = adam_step(arrays, grads, state, config, it)
        except DivergenceError as err:
            raise DivergenceError(str(err), losses) from None
        if it % 100 == 0:
            log.debug("iteration %d loss %.4f", it, loss)
    return TrainResult(PredictorParams(params.config, arrays), losses)


def baseline_mean_predictor(train_clips: Sequence[ClipSequence]) -> AttentionMap:
    """Frame-weighted mean of every training map."""
    if not train_clips:
        raise ValueError("empty training set")
    total = None
    count = 0
    for clip in train_clips:
        s = clip.stack.sum(axis=0)
        total = s if total is None else total + s
        count += len(clip)
    if count == 0:
        raise ValueError("training clips contain no frames")
    return normalize(total / count)
