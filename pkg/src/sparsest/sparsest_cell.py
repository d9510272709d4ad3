"""ConvLSTM and SparseST recurrent units plus stacked next-frame models.

Two execution paths share one set of weights:

* ``ConvLSTMCell`` / ``SparseSTCell`` step a single ``(C, H, W)`` frame with
  plain numpy.  The sparse cell runs real gather-scatter sparse convolutions
  on the delta tensors and counts every MAC it executes.
* ``SequenceModel.step`` runs a batch ``(B, C, H, W)`` on the autodiff tape.
  Convolving a masked dense delta is numerically the same product as the
  sparse convolution, so training uses that form.

Gate blocks are fused along the output-channel axis in the order
``i, f, o, c``; ``wx`` has shape ``(4 * C_out, C_in, K, K)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .delta_network import DeltaState, delta_step
from .sparse_conv import ConvKernel, MacCounter, dense_conv2d, sparse_conv2d
from .tensor_core import FormatError, StructuralError, as_dense, make_rng, occupancy, to_dense

GATES = ("i", "f", "o", "c")


def gate_kernels(w: np.ndarray, c_out: int) -> dict[str, ConvKernel]:
    return {g: ConvKernel(w[n * c_out:(n + 1) * c_out]) for n, g in enumerate(GATES)}


def _lstm_update(pre: np.ndarray, c_prev: np.ndarray, c_out: int):
    i = expit(pre[:c_out])
    f = expit(pre[c_out:2 * c_out])
    o = expit(pre[2 * c_out:3 * c_out])
    cand = np.tanh(pre[3 * c_out:])
    c = f * c_prev + i * cand
    h = o * np.tanh(c)
    return h, c, (i, f, o, cand)


class ConvLSTMCell:
    """Dense ConvLSTM unit without biases or peepholes."""

    def __init__(self, wx, wh):
        self.wx = np.asarray(wx, dtype=np.float64)
        self.wh = np.asarray(wh, dtype=np.float64)
        self.c_out = self.wh.shape[1]
        if self.wx.shape[0] != 4 * self.c_out or self.wh.shape[0] != 4 * self.c_out:
            raise StructuralError("wx/wh must have 4 * C_out output channels")
        self.kx = ConvKernel(self.wx)
        self.kh = ConvKernel(self.wh)
        self.h = self.c = None
        self.last_gates = None

    @property
    def c_in(self) -> int:
        return self.wx.shape[1]

    def reset(self, H: int, W: int) -> None:
        self.h = np.zeros((self.c_out, H, W))
        self.c = np.zeros((self.c_out, H, W))

    def step(self, x_t) -> np.ndarray:
        x_t = as_dense(x_t, "x_t")
        if x_t.shape[0] != self.c_in:
            raise StructuralError(f"expected {self.c_in} input channels, got {x_t.shape[0]}")
        if self.h is None or self.h.shape[1:] != x_t.shape[1:]:
            self.reset(*x_t.shape[1:])
        pre = dense_conv2d(x_t, self.kx) + dense_conv2d(self.h, self.kh)
        self.h, self.c, self.last_gates = _lstm_update(pre, self.c, self.c_out)
        return self.h


@dataclass
class StepRecord:
    occ_x: float
    occ_h: float
    active_x: int
    active_h: int
    macs: int


class SparseSTCell(ConvLSTMCell):
    """Delta-gated unit: sparse convolutions of thresholded deltas feed
    per-gate delta memories ``M`` that replace the full dense products."""

    def __init__(self, wx, wh, theta_x: float = 0.0, theta_h: float = 0.0):
        super().__init__(wx, wh)
        if theta_x < 0 or theta_h < 0:
            raise ValueError("thresholds must be non-negative")
        self.theta_x = float(theta_x)
        self.theta_h = float(theta_h)
        self.counter = MacCounter()
        self.records: list[StepRecord] = []

    def reset(self, H: int, W: int) -> None:
        super().reset(H, W)
        self.dx_state = DeltaState.zeros((self.c_in, H, W), self.theta_x)
        self.dh_state = DeltaState.zeros((self.c_out, H, W), self.theta_h)
        self.memory = np.zeros((4 * self.c_out, H, W))
        self.counter = MacCounter()
        self.records = []

    def step(self, x_t) -> np.ndarray:
        x_t = as_dense(x_t, "x_t")
        if x_t.shape[0] != self.c_in:
            raise StructuralError(f"expected {self.c_in} input channels, got {x_t.shape[0]}")
        if self.h is None or self.h.shape[1:] != x_t.shape[1:]:
            self.reset(*x_t.shape[1:])
        dx, self.dx_state = delta_step(self.dx_state, x_t)
        dh, self.dh_state = delta_step(self.dh_state, self.h)
        before = self.counter.macs
        self.memory = (self.memory
                       + to_dense(sparse_conv2d(dx, self.kx, self.counter))
                       + to_dense(sparse_conv2d(dh, self.kh, self.counter)))
        self.h, self.c, self.last_gates = _lstm_update(self.memory, self.c, self.c_out)
        self.records.append(StepRecord(occupancy(dx), occupancy(dh), dx.n_active, dh.n_active,
                                       self.counter.macs - before))
        return self.h


# --- batched model on the autodiff tape -----------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    kind: str = "sparse"  # "sparse" (SparseST) or "dense" (ConvLSTM)
    data_channels: int = 1
    hidden: tuple = (8, 8)
    kernel_size: int = 3
    head_bias: bool = True

    def __post_init__(self):
        if self.kind not in ("sparse", "dense"):
            raise ValueError(f"unknown cell kind {self.kind!r}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd and positive")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not self.hidden or min(self.hidden) < 1:
            raise ValueError("need at least one layer with positive channels")


@dataclass
class LayerState:
    h: ad.Var
    c: ad.Var
    memory: ad.Var | None = None
    xhat_x: ad.Var | None = None
    xhat_h: ad.Var | None = None


@dataclass
class StepStats:
    """Per-layer hard delta occupancies (arrays over the batch) and soft surrogates."""

    occ_x: list = field(default_factory=list)
    occ_h: list = field(default_factory=list)
    soft: list = field(default_factory=list)


class SequenceModel:
    """Stack of ConvLSTM or SparseST layers with a 1x1 sigmoid output head."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.params: dict[str, ad.Parameter] = {}
        shapes = self.param_shapes()
        params = params or {}
        for name, shape in shapes.items():
            value = params.get(name, np.zeros(shape))
            value = np.asarray(value, dtype=np.float64)
            if value.shape != shape:
                raise StructuralError(f"parameter {name} has shape {value.shape}, expected {shape}")
            clamp = (0.0, np.inf) if name.startswith("theta") else None
            self.params[name] = ad.Parameter(value, name=name, clamp=clamp)

    @property
    def kind(self) -> str:
        return self.config.kind

    @property
    def n_layers(self) -> int:
        return len(self.config.hidden)

    def param_shapes(self) -> dict[str, tuple]:
        cfg = self.config
        K = cfg.kernel_size
        shapes = {}
        c_in = cfg.data_channels
        for l, ch in enumerate(cfg.hidden):
            shapes[f"wx{l}"] = (4 * ch, c_in, K, K)
            shapes[f"wh{l}"] = (4 * ch, ch, K, K)
            c_in = ch
        shapes["head_w"] = (cfg.data_channels, c_in, 1, 1)
        if cfg.head_bias:
            shapes["head_b"] = (cfg.data_channels,)
        if cfg.kind == "sparse":
            for l in range(len(cfg.hidden)):
                shapes[f"theta_x{l}"] = ()
                shapes[f"theta_h{l}"] = ()
        return shapes

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, output_bias: float = 0.0,
             theta: float = 0.0) -> "SequenceModel":
        rng = make_rng(seed)
        params = {}
        for name, shape in cls(config).param_shapes().items():
            if name.startswith("theta"):
                params[name] = np.array(theta)
            elif name == "head_b":
                params[name] = np.full(shape, output_bias)
            elif name.startswith("wx") or name.startswith("wh"):
                l = int(name[2:])
                c_in = config.data_channels if l == 0 else config.hidden[l - 1]
                fan_in = (c_in + config.hidden[l]) * shape[2] * shape[3]
                params[name] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
            else:
                params[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[1]), size=shape)
        return cls(config, params)

    def parameters(self) -> list[ad.Parameter]:
        return list(self.params.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            self.params[k].value = np.array(v, dtype=np.float64)

    def thetas(self) -> list[tuple[float, float]]:
        if self.kind != "sparse":
            return []
        return [(float(self.params[f"theta_x{l}"].value), float(self.params[f"theta_h{l}"].value))
                for l in range(self.n_layers)]

    # reference cells
    def reference_cells(self) -> list[ConvLSTMCell]:
        cells = []
        for l in range(self.n_layers):
            wx, wh = self.params[f"wx{l}"].value, self.params[f"wh{l}"].value
            if self.kind == "sparse":
                tx, th = self.thetas()[l]
                cells.append(SparseSTCell(wx, wh, tx, th))
            else:
                cells.append(ConvLSTMCell(wx, wh))
        return cells

    def head_array(self, h_top: np.ndarray) -> np.ndarray:
        w = self.params["head_w"].value[:, :, 0, 0]
        z = np.tensordot(w, h_top, axes=([1], [0]))
        if self.config.head_bias:
            z = z + self.params["head_b"].value[:, None, None]
        return expit(z)

    # batched tape path
    def start(self, batch: int, H: int, W: int) -> list[LayerState]:
        states = []
        c_in = self.config.data_channels
        for ch in self.config.hidden:
            zeros = ad.Var(np.zeros((batch, ch, H, W)))
            st = LayerState(h=zeros, c=zeros)
            if self.kind == "sparse":
                st.memory = ad.Var(np.zeros((batch, 4 * ch, H, W)))
                st.xhat_x = ad.Var(np.zeros((batch, c_in, H, W)))
                st.xhat_h = zeros
            states.append(st)
            c_in = ch
        return states

    def step(self, states: list[LayerState], x, tau: float | None = None,
             stats: StepStats | None = None):
        """Advance every layer one time step; returns ``(prediction, new_states)``.

        When ``tau`` is given, the thresholds receive surrogate gradients
        through the delta values, and soft site-occupancy surrogates of both
        delta streams of every layer are appended to ``stats.soft``.
        """
        inp = x if isinstance(x, ad.Var) else ad.Var(x)
        new_states = []
        for l, st in enumerate(states):
            ch = self.config.hidden[l]
            wx, wh = self.params[f"wx{l}"], self.params[f"wh{l}"]
            if self.kind == "sparse":
                tx, th = self.params[f"theta_x{l}"], self.params[f"theta_h{l}"]
                dx, xhat_x, fired_x = ad.delta_threshold(inp, st.xhat_x, tx, tau)
                dh, xhat_h, fired_h = ad.delta_threshold(st.h, st.xhat_h, th, tau)
                if stats is not None:
                    stats.occ_x.append(fired_x.any(axis=1).mean(axis=(1, 2)))
                    stats.occ_h.append(fired_h.any(axis=1).mean(axis=(1, 2)))
                    if tau is not None:
                        stats.soft.append(ad.soft_site_occupancy(inp, st.xhat_x, tx, tau))
                        stats.soft.append(ad.soft_site_occupancy(st.h, st.xhat_h, th, tau))
                memory = st.memory + ad.conv2d(dx, wx) + ad.conv2d(dh, wh)
                pre = memory
            else:
                pre = ad.conv2d(inp, wx) + ad.conv2d(st.h, wh)
            i = ad.sigmoid(ad.channel_slice(pre, 0, ch))
            f = ad.sigmoid(ad.channel_slice(pre, ch, 2 * ch))
            o = ad.sigmoid(ad.channel_slice(pre, 2 * ch, 3 * ch))
            cand = ad.tanh(ad.channel_slice(pre, 3 * ch, 4 * ch))
            c = f * st.c + i * cand
            h = o * ad.tanh(c)
            if self.kind == "sparse":
                new_states.append(LayerState(h, c, memory, xhat_x, xhat_h))
            else:
                new_states.append(LayerState(h, c))
            inp = h
        z = ad.conv2d(inp, self.params["head_w"], self.params.get("head_b"))
        return ad.sigmoid(z), new_states


def run_reference(model: SequenceModel, frames) -> tuple[list[np.ndarray], list[ConvLSTMCell]]:
    """Teacher-forced pass of one ``(T, C, H, W)`` sequence through the
    per-sample reference cells; returns the per-step predictions and the
    cells, whose step records and MAC counters can then be inspected."""
    frames = np.asarray(frames, dtype=np.float64)
    cells = model.reference_cells()
    H, W = frames.shape[-2:]
    for cell in cells:
        cell.reset(H, W)
    preds = []
    for x in frames:
        for cell in cells:
            x = cell.step(x)
        preds.append(model.head_array(x))
    return preds, cells


def rollout(model: SequenceModel, frames, warmup: int, horizon: int) -> list[np.ndarray]:
    """Teacher-force ``warmup`` frames, then feed predictions back for ``horizon`` steps.

    ``frames`` is ``(T, C, H, W)`` or batched ``(B, T, C, H, W)``; the returned
    list holds one prediction per horizon step with the matching leading shape.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 4:
        return [p[0] for p in rollout(model, frames[None], warmup, horizon)]
    if frames.shape[1] == 0:
        raise ValueError("empty frame sequence")
    if warmup < 1 or frames.shape[1] < warmup:
        raise ValueError(f"need 1 <= warmup <= {frames.shape[1]}, got {warmup}")
    if horizon == 0:
        return []
    B, _, _, H, W = frames.shape
    with ad.no_grad():
        states = model.start(B, H, W)
        for t in range(warmup):
            pred, states = model.step(states, frames[:, t])
        preds = [pred.value]
        for _ in range(horizon - 1):
            pred, states = model.step(states, pred)
            preds.append(pred.value)
    return preds


# --- checkpoint file (SSTM) -------------------------------------------------------

CHECKPOINT_MAGIC = b"SSTM"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIIIIII")  # magic, version, kind, layers, data_ch, K, head_bias


def checkpoint_to_bytes(model: SequenceModel) -> bytes:
    cfg = model.config
    kind = 1 if cfg.kind == "sparse" else 0
    out = [_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, kind, len(cfg.hidden),
                             cfg.data_channels, cfg.kernel_size, int(cfg.head_bias)),
           struct.pack(f"<{len(cfg.hidden)}I", *cfg.hidden)]
    thetas = []
    for name in model.param_shapes():
        if name.startswith("theta"):
            thetas.append(model.params[name].value)
        else:
            out.append(np.ascontiguousarray(model.params[name].value, dtype="<f4").tobytes())
    out.append(np.array(thetas, dtype="<f4").tobytes())
    return b"".join(out)


def checkpoint_from_bytes(buf: bytes) -> SequenceModel:
    if len(buf) < _CKPT_HEADER.size:
        raise FormatError("truncated checkpoint header")
    magic, version, kind, n_layers, data_ch, K, head_bias = _CKPT_HEADER.unpack_from(buf)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if kind not in (0, 1):
        raise FormatError(f"unknown cell kind code {kind}")
    pos = _CKPT_HEADER.size
    hidden = struct.unpack_from(f"<{n_layers}I", buf, pos)
    pos += 4 * n_layers
    cfg = ModelConfig("sparse" if kind else "dense", data_ch, hidden, K, bool(head_bias))
    shapes = SequenceModel(cfg).param_shapes()
    theta_names = [n for n in shapes if n.startswith("theta")]
    weight_names = [n for n in shapes if not n.startswith("theta")]
    expected = 4 * (sum(int(np.prod(shapes[n])) for n in weight_names) + len(theta_names))
    if len(buf) - pos != expected:
        raise FormatError(f"checkpoint payload holds {len(buf) - pos} bytes, expected {expected}")
    params = {}
    for name in weight_names:
        count = int(np.prod(shapes[name]))
        params[name] = np.frombuffer(buf, "<f4", count, pos).reshape(shapes[name]).astype(np.float64)
        pos += 4 * count
    thetas = np.frombuffer(buf, "<f4", len(theta_names), pos).astype(np.float64)
    for name, value in zip(theta_names, thetas):
        params[name] = np.array(value)
    return SequenceModel(cfg, params)


def save_checkpoint(model: SequenceModel, path) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(model))


def load_checkpoint(path) -> SequenceModel:
    return checkpoint_from_bytes(Path(path).read_bytes())
