"""Training and evaluation protocols.

* Next-frame prediction: teacher-forced training on the first ``train_steps``
  transitions of each sequence, then recursive rollout at test time.
* Anomaly detection: one-step-ahead reconstruction trained on sliding
  windows of normal sequences; at test time only the central frame of each
  window is reconstructed and its MSE is the frame's anomaly score.

Training minimizes the smooth Tchebycheff composite of MSE and soft delta
occupancy with Adam.  The learning rate halves when the validation loss has
not improved for ``ceil(patience / 2)`` epochs and training stops after
``patience`` non-improving epochs; the best validation weights are restored.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .cost_model import UnitCostReport, dense_model_flops, model_reports, summarize
from .objectives import ObjectiveVector, ScalarizationConfig, composite_loss
from .sparsest_cell import SequenceModel, StepStats, save_checkpoint
from .tensor_core import derive_seed, make_rng

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 200
    patience: int = 10
    lr: float = 1e-4
    lr_decay: float = 0.5
    batch_size: int = 4
    train_steps: int = 10
    window: int = 21
    stride: int = 1
    w_mse: float = 1.0
    mu: float = 0.1
    tau: float = 0.05
    # Divisor for the MSE objective inside the composite loss.  0 selects the
    # variance of the training frames, i.e. the MSE of a constant predictor,
    # which puts MSE and occupancy on comparable scales.
    mse_scale: float = 1.0
    # Prediction only: if > 0, validation warms up on ``train_steps`` frames and
    # rolls out this many steps recursively, as the test protocol does;
    # 0 validates teacher-forced.
    val_horizon: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 3")
        if self.epochs < 0 or self.batch_size < 1 or self.train_steps < 1 or self.stride < 1:
            raise ValueError("epochs, batch_size, train_steps and stride must be positive")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.mse_scale < 0:
            raise ValueError("mse_scale must be >= 0")
        if self.val_horizon < 0:
            raise ValueError("val_horizon must be >= 0")

    @property
    def scalarization(self) -> ScalarizationConfig:
        return ScalarizationConfig(self.w_mse, self.mu, scale=(self.mse_scale or 1.0, 1.0))

    def resolved(self, train: np.ndarray) -> "TrainConfig":
        """Copy with an automatic ``mse_scale`` replaced by the training-frame variance."""
        if self.mse_scale > 0:
            return self
        return replace(self, mse_scale=float(np.var(train)))


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float | None
    train_mse: float | None
    val_loss: float
    val_mse: float
    val_occupancy: float
    thetas: list


@dataclass
class TrainReport:
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    checkpoint: str | None = None
    final: ObjectiveVector | None = None
    mse_scale: float = 1.0

    def as_dict(self) -> dict:
        d = asdict(self)
        d["final"] = asdict(self.final) if self.final else None
        return d


@dataclass
class BatchResult:
    loss: ad.Var
    mse: float
    occupancy: float
    soft_occupancy: float | None
    predictions: list


def _stack_occupancy(stats: StepStats) -> float:
    records = stats.occ_x + stats.occ_h
    return float(np.mean(np.concatenate(records))) if records else 1.0


def forward_batch(model: SequenceModel, inputs: np.ndarray, targets: np.ndarray,
                  scal: ScalarizationConfig, tau: float | None) -> BatchResult:
    """Teacher-forced pass over ``(B, T, C, H, W)`` inputs against shifted targets."""
    B, T, _, H, W = inputs.shape
    states = model.start(B, H, W)
    stats = StepStats()
    sparse = model.kind == "sparse"
    use_soft = sparse and tau is not None and scal.w_mse < 1.0
    err = None
    preds = []
    for t in range(T):
        pred, states = model.step(states, inputs[:, t], tau if use_soft else None, stats)
        term = ad.mse(pred, targets[:, t])
        err = term if err is None else err + term
        preds.append(pred.value)
    err = ad.mul(err, 1.0 / T)
    soft = None
    if use_soft:
        acc = stats.soft[0]
        for s in stats.soft[1:]:
            acc = acc + s
        soft = ad.mul(acc, 1.0 / len(stats.soft))
    if sparse:
        loss = composite_loss(err, soft if soft is not None else 0.0, scal)
    else:
        loss = err
    return BatchResult(loss, float(err.value), _stack_occupancy(stats) if sparse else 1.0,
                       None if soft is None else float(soft.value), preds)


def _batches(n: int, size: int, order=None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, size):
        yield idx[start:start + size]


def evaluate_teacher_forced(model: SequenceModel, data: np.ndarray, steps: int,
                            scal: ScalarizationConfig, batch_size: int = 32) -> tuple[float, float, float]:
    """Validation ``(composite loss, MSE, hard occupancy)`` over a split."""
    if len(data) == 0:
        raise ValueError("empty evaluation split")
    mse_sum = occ_sum = 0.0
    with ad.no_grad():
        for idx in _batches(len(data), batch_size):
            batch = data[idx]
            res = forward_batch(model, batch[:, :steps], batch[:, 1:steps + 1], scal, None)
            mse_sum += res.mse * len(idx)
            occ_sum += res.occupancy * len(idx)
    m, occ = mse_sum / len(data), occ_sum / len(data)
    loss = composite_loss(m, occ, scal) if model.kind == "sparse" else m
    return float(loss), m, occ


def evaluate_rollout(model: SequenceModel, data: np.ndarray, warmup: int, horizon: int,
                     scal: ScalarizationConfig) -> tuple[float, float, float]:
    """Validation ``(composite loss, rollout MSE, hard occupancy)`` over a split."""
    if len(data) == 0:
        raise ValueError("empty evaluation split")
    res = evaluate_prediction(model, data, warmup, horizon)
    if model.kind == "dense":
        return res.mse, res.mse, 1.0
    return float(composite_loss(res.mse, res.occupancy, scal)), res.mse, res.occupancy


def train_prediction(model: SequenceModel, train: np.ndarray, val: np.ndarray, cfg: TrainConfig,
                     checkpoint_path=None, log_path=None) -> TrainReport:
    """Fit ``model`` in place; the weights with the lowest validation loss are restored."""
    steps = min(cfg.train_steps, train.shape[1] - 1)
    if steps < 1:
        raise ValueError("sequences need at least two frames")
    cfg = cfg.resolved(train)
    scal = cfg.scalarization
    opt = ad.Adam(model.parameters(), lr=cfg.lr)
    report = TrainReport(mse_scale=cfg.mse_scale)
    horizon = min(cfg.val_horizon, val.shape[1] - steps)
    if cfg.val_horizon and horizon < 1:
        raise ValueError("validation sequences are too short for a rollout after train_steps frames")

    def validate():
        if horizon:
            return evaluate_rollout(model, val, steps, horizon, scal)
        return evaluate_teacher_forced(model, val, steps, scal)

    log_file = open(log_path, "w") if log_path else None

    def record(epoch, train_loss, train_mse):
        val_loss, val_mse, val_occ = validate()
        rec = EpochRecord(epoch, opt.lr, train_loss, train_mse, val_loss, val_mse, val_occ,
                          [list(t) for t in model.thetas()])
        report.history.append(rec)
        if log_file:
            log_file.write(json.dumps(asdict(rec)) + "\n")
            log_file.flush()
        log.info("epoch %d val_loss %.6g mse %.6g occ %.4f", epoch, val_loss, val_mse, val_occ)
        return rec

    try:
        rec = record(0, None, None)
        report.best_val_loss, report.best_epoch = rec.val_loss, 0
        best = model.arrays()
        since_best = 0
        decay_every = math.ceil(cfg.patience / 2)
        for epoch in range(1, cfg.epochs + 1):
            rng = make_rng(derive_seed(cfg.seed, epoch))
            order = rng.permutation(len(train))
            losses, mses = [], []
            for idx in _batches(len(train), cfg.batch_size, order):
                batch = train[idx]
                opt.zero_grad()
                res = forward_batch(model, batch[:, :steps], batch[:, 1:steps + 1], scal, cfg.tau)
                if not np.isfinite(res.loss.value):
                    raise ad.TrainingError(f"non-finite loss at epoch {epoch}")
                ad.backward(res.loss)
                opt.step()
                losses.append(float(res.loss.value))
                mses.append(res.mse)
            rec = record(epoch, float(np.mean(losses)), float(np.mean(mses)))
            if rec.val_loss < report.best_val_loss:
                report.best_val_loss, report.best_epoch = rec.val_loss, epoch
                best = model.arrays()
                since_best = 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    break
                if since_best % decay_every == 0:
                    opt.lr *= cfg.lr_decay
    finally:
        if log_file:
            log_file.close()
    model.load_arrays(best)
    _, val_mse, val_occ = validate()
    report.final = ObjectiveVector(val_mse, val_occ)
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path)
        report.checkpoint = str(checkpoint_path)
    return report


@dataclass
class EvalResult:
    mse: float
    occupancy: float | None
    ar: float | None
    flops_dense: float
    flops_sparse: float
    ar_exact: float | None
    units: list

    def as_dict(self) -> dict:
        d = asdict(self)
        d["units"] = [u.as_dict() if isinstance(u, UnitCostReport) else u for u in self.units]
        return d


def evaluate_prediction(model: SequenceModel, data: np.ndarray, warmup: int = 10,
                        horizon: int = 10, batch_size: int = 32) -> EvalResult:
    """Recursive-rollout MSE plus delta occupancy and per-step cost.

    Occupancy statistics cover every step of the rollout (teacher-forced
    warm-up and free-running horizon).  For a dense model the acceleration
    ratio is not applicable and reported as ``None``.
    """
    S, T, C, H, W = data.shape
    if warmup < 1 or warmup + horizon > T:
        raise ValueError(f"warmup {warmup} + horizon {horizon} exceeds sequence length {T}")
    L = model.n_layers
    occ_x = [[] for _ in range(L)]
    occ_h = [[] for _ in range(L)]
    se = 0.0
    with ad.no_grad():
        for idx in _batches(S, batch_size):
            frames = data[idx]
            stats = StepStats()
            states = model.start(len(idx), H, W)
            for t in range(warmup):
                pred, states = model.step(states, frames[:, t], None, stats)
            for k in range(horizon):
                se += float(np.sum((pred.value - frames[:, warmup + k]) ** 2))
                if k + 1 < horizon:
                    pred, states = model.step(states, pred, None, stats)
            for n, (ox, oh) in enumerate(zip(stats.occ_x, stats.occ_h)):
                occ_x[n % L].append(ox)
                occ_h[n % L].append(oh)
    mse = se / (S * max(horizon, 1) * C * H * W)
    cfg = model.config
    if model.kind == "dense":
        fd = float(dense_model_flops(cfg.hidden, cfg.data_channels, cfg.kernel_size, H, W))
        return EvalResult(mse, None, None, fd, fd, None, [])
    mx = [float(np.mean(np.concatenate(o))) for o in occ_x]
    mh = [float(np.mean(np.concatenate(o))) for o in occ_h]
    units = model_reports(cfg.hidden, cfg.data_channels, cfg.kernel_size, H, W, mx, mh)
    summary = summarize(units)
    occupancy = float(np.mean(mx + mh))
    return EvalResult(mse, occupancy, summary["ar"], summary["flops_dense"],
                      summary["flops_sparse"], summary["ar_exact"], units)


# --- anomaly detection -------------------------------------------------------------

def sliding_windows(sequences: np.ndarray, window: int, stride: int = 1) -> np.ndarray:
    """All windows ``(N, window, C, H, W)`` from ``(S, T, C, H, W)`` sequences."""
    out = []
    for seq in sequences:
        if len(seq) < window:
            raise ValueError(f"sequence of length {len(seq)} shorter than window {window}")
        out.extend(seq[s:s + window] for s in range(0, len(seq) - window + 1, stride))
    return np.stack(out)


def train_reconstruction(model: SequenceModel, train: np.ndarray, val: np.ndarray,
                         cfg: TrainConfig, checkpoint_path=None, log_path=None) -> TrainReport:
    """Train on every window of the normal sequences to reconstruct each next frame."""
    tw = sliding_windows(train, cfg.window, cfg.stride)
    vw = sliding_windows(val, cfg.window, cfg.stride)
    wcfg = TrainConfig(**{**asdict(cfg), "train_steps": cfg.window - 1, "val_horizon": 0})
    return train_prediction(model, tw, vw, wcfg, checkpoint_path, log_path)


def anomaly_scores(model, sequence: np.ndarray, window: int = 21, stride: int = 1,
                   batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Central-frame reconstruction MSE for every sliding window.

    Returns ``(frame_indices, scores)``.  The central frame of a window is
    reconstructed from the frames preceding it inside that window, with the
    recurrent state reset at the window start.  Frames that are never a
    window centre receive no score.
    """
    sequence = np.asarray(sequence, dtype=np.float64)
    T = len(sequence)
    if T < window:
        raise ValueError(f"sequence of length {T} shorter than window {window}")
    half = window // 2
    starts = np.arange(0, T - window + 1, stride)
    centres = starts + half
    H, W = sequence.shape[-2:]
    scores = np.empty(len(starts))
    with ad.no_grad():
        for idx in _batches(len(starts), batch_size):
            ctx = np.stack([sequence[s:s + half] for s in starts[idx]])
            states = model.start(len(idx), H, W)
            for t in range(half):
                pred, states = model.step(states, ctx[:, t])
            err = (pred.value - sequence[centres[idx]]) ** 2
            scores[idx] = err.reshape(len(idx), -1).mean(axis=1)
    return centres, scores
