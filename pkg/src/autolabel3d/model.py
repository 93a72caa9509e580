"""Point-cloud pose predictor, its training loop and checkpoint format.

The network is a shared per-point MLP followed by a max-pool (PointNet
style). Inputs are centred on their per-axis median and the translation head
predicts a residual from that median, so the predicted translation moves
exactly with the input cloud. Three heads sit on the pooled feature:
translation (3), yaw (``n_bins`` logits, or a 2-vector decoded with atan2 for
the arctan baseline) and a per-point log-variance head that also sees each
point's first-layer feature.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .geometry import Pose4DoF, TemplateMesh, wrap_2pi
from .losses import BatchPrediction, EgoChain, LossWeights, YawBins, total_loss

log = logging.getLogger(__name__)

MAGIC = b"AL3D"
FORMAT_VERSION = 1
LOG_VAR_LIMIT = 10.0


@dataclass
class TrainConfig:
    learning_rate: float = 3e-3
    lr_decay_factor: float = 0.3
    lr_decay_every_epochs: int = 30
    epochs: int = 150
    batch_size: int = 64
    n_bins: int = 64
    seed: int = 0
    weight_alignment: float = 1.0
    weight_yaw: float = 1.0
    weight_consistency: float = 1.0
    outlier_aware: bool = True
    yaw_head: str = "bins"  # "bins" or "arctan"
    horizon: int = 5
    encoder_widths: tuple = (64, 128, 256)
    head_hidden: int = 128
    variance_hidden: int = 64
    separate_variance_encoder: bool = False

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        for name in ("learning_rate", "lr_decay_factor", "lr_decay_every_epochs", "batch_size",
                     "n_bins", "horizon", "head_hidden", "variance_hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if any(w <= 0 for w in self.encoder_widths) or not self.encoder_widths:
            raise ValueError("encoder widths must be positive")
        if self.yaw_head not in ("bins", "arctan"):
            raise ValueError(f"unknown yaw head {self.yaw_head!r}")

    @property
    def bins(self) -> YawBins:
        return YawBins(self.n_bins)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.weight_alignment, self.weight_yaw, self.weight_consistency)

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during 0-based ``epoch``."""
        return self.learning_rate * self.lr_decay_factor ** (epoch // self.lr_decay_every_epochs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelParams:
    config: TrainConfig
    arrays: dict = field(default_factory=dict)  # insertion order = declared order

    def names(self):
        return list(self.arrays)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.arrays.values()])

    def with_flat(self, vec) -> "ModelParams":
        out, pos = {}, 0
        for k, a in self.arrays.items():
            out[k] = np.asarray(vec[pos:pos + a.size], dtype=np.float64).reshape(a.shape).copy()
            pos += a.size
        return ModelParams(self.config, out)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: a.copy() for k, a in self.arrays.items()})

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays.values())


def param_shapes(cfg: TrainConfig):
    """Declared parameter order and shapes."""
    shapes = []

    def encoder(prefix):
        prev = 3
        for i, w in enumerate(cfg.encoder_widths):
            shapes.append((f"{prefix}.{i}.w", (prev, w)))
            shapes.append((f"{prefix}.{i}.b", (w,)))
            prev = w

    def mlp(prefix, n_in, hidden, n_out):
        shapes.extend([(f"{prefix}.0.w", (n_in, hidden)), (f"{prefix}.0.b", (hidden,)),
                       (f"{prefix}.1.w", (hidden, n_out)), (f"{prefix}.1.b", (n_out,))])

    g = cfg.encoder_widths[-1]
    encoder("enc")
    mlp("trans", g, cfg.head_hidden, 3)
    mlp("yaw", g, cfg.head_hidden, cfg.n_bins if cfg.yaw_head == "bins" else 2)
    if cfg.separate_variance_encoder:
        encoder("venc")
    mlp("var", cfg.encoder_widths[0] + g, cfg.variance_hidden, 1)
    return shapes


def init_params(cfg: TrainConfig, rng: np.random.Generator | None = None) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    arrays = {}
    for name, shape in param_shapes(cfg):
        if name.endswith(".w"):
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        else:
            arrays[name] = np.zeros(shape)
    return ModelParams(cfg, arrays)


def zero_params(cfg: TrainConfig) -> ModelParams:
    return ModelParams(cfg, {name: np.zeros(shape) for name, shape in param_shapes(cfg)})


@dataclass
class Prediction:
    translation: np.ndarray
    log_var: np.ndarray
    yaw_logits: np.ndarray | None = None
    yaw_angle: float | None = None


def _encode(P, prefix, n_layers, X, offsets):
    h = X
    first = None
    for i in range(n_layers):
        h = ad.relu(h @ P[f"{prefix}.{i}.w"] + P[f"{prefix}.{i}.b"])
        if first is None:
            first = h
    return first, ad.segment_max(h, offsets)


def _mlp(P, prefix, x):
    return ad.relu(x @ P[f"{prefix}.0.w"] + P[f"{prefix}.0.b"]) @ P[f"{prefix}.1.w"] + P[f"{prefix}.1.b"]


def forward_batch(params: ModelParams, point_sets, trainable: bool = False):
    """Run the network on B clouds.

    Returns:
      (BatchPrediction, leaf tensors by parameter name). Leaves collect
      gradients when ``trainable`` is set.
    """
    cfg = params.config
    wrap = ad.param if trainable else ad.Tensor
    P = {k: wrap(v) for k, v in params.arrays.items()}
    sets = [np.asarray(getattr(p, "points", p), dtype=np.float64).reshape(-1, 3) for p in point_sets]
    counts = np.array([len(p) for p in sets], dtype=np.int64)
    if len(sets) == 0 or np.any(counts == 0):
        raise ValueError("every instance needs at least one point")
    offsets = np.concatenate([[0], np.cumsum(counts)])
    medians = np.stack([np.median(p, axis=0) for p in sets])
    Xc = np.concatenate(sets) - np.repeat(medians, counts, axis=0)
    n_layers = len(cfg.encoder_widths)

    h1, g = _encode(P, "enc", n_layers, Xc, offsets)
    translation = _mlp(P, "trans", g) + medians
    yaw_out = _mlp(P, "yaw", g)
    if cfg.separate_variance_encoder:
        h1, gv = _encode(P, "venc", n_layers, Xc, offsets)
    else:
        gv = g
    feat = ad.concat([h1, ad.repeat_rows(gv, counts)], axis=1)
    log_var = ad.clip(ad.reshape(_mlp(P, "var", feat), (-1,)), -LOG_VAR_LIMIT, LOG_VAR_LIMIT)

    if cfg.yaw_head == "bins":
        pred = BatchPrediction(translation, log_var, yaw_logits=yaw_out)
    else:
        pred = BatchPrediction(translation, log_var,
                               yaw_angle=ad.atan2(ad.take(yaw_out, (slice(None), 0)),
                                                  ad.take(yaw_out, (slice(None), 1))))
    return pred, P


def split_batch(pred: BatchPrediction, point_sets) -> list:
    counts = [len(getattr(p, "points", p)) for p in point_sets]
    offs = np.concatenate([[0], np.cumsum(counts)])
    out = []
    for b in range(len(counts)):
        out.append(Prediction(
            translation=pred.translation.value[b].copy(),
            log_var=pred.log_var.value[offs[b]:offs[b + 1]].copy(),
            yaw_logits=None if pred.yaw_logits is None else pred.yaw_logits.value[b].copy(),
            yaw_angle=None if pred.yaw_angle is None else float(pred.yaw_angle.value[b]),
        ))
    return out


def forward(params: ModelParams, points) -> Prediction:
    pts = np.asarray(getattr(points, "points", points), dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("forward needs at least one point")
    pred, _ = forward_batch(params, [pts])
    return split_batch(pred, [pts])[0]


def forward_arctan(params: ModelParams, points) -> Prediction:
    if params.config.yaw_head != "arctan":
        raise ValueError("parameters were not built with the arctan yaw head")
    return forward(params, points)


def predict_batch(params: ModelParams, point_sets) -> list:
    pred, _ = forward_batch(params, point_sets)
    return split_batch(pred, point_sets)


def decode_pose(pred: Prediction, bins: YawBins = YawBins()) -> Pose4DoF:
    if pred.yaw_logits is not None:
        yaw = bins.centre(int(np.argmax(pred.yaw_logits)))
    else:
        yaw = pred.yaw_angle
    return Pose4DoF(yaw, pred.translation)


def decode_arctan(x1: float, x2: float) -> float:
    """Yaw in [0, 2*pi) of a (sin, cos)-like head output; (0, 0) gives 0."""
    return wrap_2pi(math.atan2(x1, x2))


# -- training -----------------------------------------------------------------


@dataclass
class TrainingSet:
    """What training is allowed to see: clouds, frame ids, tracks, ego motion."""

    points: list
    frame_ids: np.ndarray
    tracks: list = field(default_factory=list)
    ego: EgoChain | None = None

    def __post_init__(self):
        self.frame_ids = np.asarray(self.frame_ids, dtype=np.int64)
        if len(self.points) == 0:
            raise ValueError("training set is empty")
        if len(self.frame_ids) != len(self.points):
            raise ValueError("one frame id per instance is required")
        seen = set()
        for tr in self.tracks:
            for i in tr:
                if i in seen:
                    raise ValueError(f"instance {i} appears in two tracks")
                seen.add(i)


@dataclass
class AdamState:
    step: int
    m: dict
    v: dict

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls(0, {k: np.zeros_like(a) for k, a in params.arrays.items()},
                   {k: np.zeros_like(a) for k, a in params.arrays.items()})


def adam_update(params: ModelParams, grads: dict, state: AdamState, lr: float,
                beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params.arrays[k] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def make_batches(n_instances: int, tracks, batch_size: int, rng: np.random.Generator):
    """Shuffled batches that never split a track."""
    in_track = set(i for tr in tracks for i in tr)
    units = [list(tr) for tr in tracks] + [[i] for i in range(n_instances) if i not in in_track]
    order = rng.permutation(len(units))
    batches, cur = [], []
    for u in order:
        unit = units[u]
        if cur and len(cur) + len(unit) > batch_size:
            batches.append(cur)
            cur = []
        cur = cur + unit
    if cur:
        batches.append(cur)
    return batches


def batch_loss(params: ModelParams, data: TrainingSet, idx, mesh: TemplateMesh, trainable=True):
    """Loss breakdown of instances ``idx`` and the parameter leaves."""
    cfg = params.config
    idx = list(idx)
    local = {g: l for l, g in enumerate(idx)}
    sets = [data.points[i] for i in idx]
    pred, leaves = forward_batch(params, sets, trainable=trainable)
    tracks = [[local[i] for i in tr] for tr in data.tracks if tr and tr[0] in local]
    breakdown = total_loss(sets, pred, mesh, cfg.bins, tracks=tracks, ego=data.ego,
                           frame_ids=data.frame_ids[idx], horizon=cfg.horizon,
                           weights=cfg.weights, outlier_aware=cfg.outlier_aware)
    return breakdown, leaves, pred


@dataclass
class TrainResult:
    params: ModelParams
    history: list
    optimizer: AdamState
    epochs_completed: int


def _report_non_finite(params, data, idx, mesh, epoch):
    for i in idx:
        b, _, _ = batch_loss(params, data, [i], mesh, trainable=False)
        if not math.isfinite(b.total):
            raise FloatingPointError(f"non-finite loss at epoch {epoch}: instance {i}")
    raise FloatingPointError(f"non-finite loss at epoch {epoch} in batch {list(idx)[:8]}...")


def train(data: TrainingSet, mesh: TemplateMesh, config: TrainConfig,
          params: ModelParams | None = None, optimizer: AdamState | None = None,
          start_epoch: int = 0, progress=None) -> TrainResult:
    """Adam on the composite loss over track-preserving shuffled batches.

    ``start_epoch`` resumes the learning-rate schedule and the shuffling
    stream; pass the parameters and optimizer state from the checkpoint.
    """
    if params is None:
        params = init_params(config)
    else:
        params = params.copy()
    optimizer = AdamState.zeros(params) if optimizer is None else optimizer
    history = []
    for epoch in range(start_epoch, config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        lr = config.lr_at(epoch)
        sums = np.zeros(5)
        n_seen = 0
        for idx in make_batches(len(data.points), data.tracks, config.batch_size, rng):
            b, leaves, _ = batch_loss(params, data, idx, mesh)
            if not math.isfinite(b.total):
                _report_non_finite(params, data, idx, mesh, epoch)
            grads = dict(zip(leaves, ad.grad(b.graph, list(leaves.values()))))
            adam_update(params, grads, optimizer, lr)
            sums += len(idx) * np.array([b.alignment, b.yaw_ce, b.consistency_centre,
                                         b.consistency_front, b.total])
            n_seen += len(idx)
        rec = dict(zip(("alignment", "yaw_ce", "consistency_centre", "consistency_front", "total"),
                       (sums / n_seen).tolist()))
        rec.update(epoch=epoch, lr=lr)
        history.append(rec)
        log.info("epoch %d lr %.2e total %.4f align %.4f yaw %.4f", epoch, lr, rec["total"],
                 rec["alignment"], rec["yaw_ce"])
        if progress is not None:
            progress(rec)
    return TrainResult(params, history, optimizer, config.epochs)


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(path, params: ModelParams, epochs_completed: int = 0,
                    optimizer: AdamState | None = None) -> None:
    """Binary checkpoint plus a ``.json`` sidecar holding the TrainConfig.

    Layout: b"AL3D", u32 version, u32 header length, UTF-8 JSON header
    (config echo, parameter names/shapes, epochs completed, optimizer step),
    then little-endian float64 parameters in declared order, then (if
    present) Adam first and second moments in the same order.
    """
    path = Path(path)
    header = {
        "config": params.config.to_dict(),
        "params": [[k, list(a.shape)] for k, a in params.arrays.items()],
        "epochs_completed": int(epochs_completed),
        "optimizer_step": None if optimizer is None else int(optimizer.step),
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(hb)))
        fh.write(hb)
        fh.write(params.flat().astype("<f8").tobytes())
        if optimizer is not None:
            for store in (optimizer.m, optimizer.v):
                fh.write(np.concatenate([store[k].reshape(-1) for k in params.arrays]).astype("<f8").tobytes())
    with open(str(path) + ".json", "w") as fh:
        json.dump(params.config.to_dict(), fh, indent=2, sort_keys=True)


def load_checkpoint(path):
    """Returns (ModelParams, epochs_completed, AdamState or None)."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not an AL3D checkpoint (bad magic at byte 0)")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12:12 + hlen])
    cfg = TrainConfig.from_dict(header["config"])
    names = [n for n, _ in param_shapes(cfg)]
    if names != [n for n, _ in header["params"]]:
        raise ValueError(f"{path}: parameter layout does not match its config")
    n = sum(int(np.prod(s)) for _, s in header["params"])
    body = np.frombuffer(raw, dtype="<f8", offset=12 + hlen)
    expected = n * (3 if header["optimizer_step"] is not None else 1)
    if body.size != expected:
        raise ValueError(f"{path}: expected {expected} floats after the header, found {body.size}")
    template = ModelParams(cfg, {k: np.zeros(s) for k, s in header["params"]})
    params = template.with_flat(body[:n])
    opt = None
    if header["optimizer_step"] is not None:
        m = template.with_flat(body[n:2 * n]).arrays
        v = template.with_flat(body[2 * n:]).arrays
        opt = AdamState(header["optimizer_step"], m, v)
    return params, header["epochs_completed"], opt
