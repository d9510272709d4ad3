"""Command-line entry point.

Every tunable lives in one flat ``RunConfig``.  Values come from the field
defaults, then an optional ``key = value`` file (``--config``), then
command-line flags; the resolved config is embedded in every JSON output.

Exit codes: 0 success, 1 usage, 2 data or file format, 3 numerical failure.
Errors go to stderr followed by an ``error_code=<n>`` line.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from functools import partial
from pathlib import Path

import numpy as np
from scipy.special import logit

from . import autodiff as ad
from .cost_model import CSV_FIELDS
from .data_eval import AnomalyCycleConfig, BouncingBlobConfig, generate_blobs, generate_cycles, roc_auc
from .objectives import ObjectiveVector
from .pareto import (CURVE_FIELDS, FRONT_FIELDS, GPFitError, ParetoRecord, curve_rows, default_grid,
                     dominance_filter, explore, front_rows)
from .sparsest_cell import ModelConfig, SequenceModel, load_checkpoint
from .tensor_core import FormatError, StructuralError, read_dataset, write_dataset
from .train import TrainConfig, anomaly_scores, evaluate_prediction, train_prediction, train_reconstruction

log = logging.getLogger(__name__)

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3
COMMANDS = ("generate", "train", "eval", "anomaly", "flops", "pareto", "front-export")
SPLITS = ("train", "val", "test")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    jobs: int = 1
    out_dir: str = "."
    data_dir: str = ""  # defaults to out_dir
    checkpoint: str = ""  # defaults to <out_dir>/model.sstm
    records: str = ""  # defaults to <out_dir>/pareto_records.csv
    # dataset
    dataset: str = "blobs"
    size: int = 16
    channels: int = 1
    length: int = 20
    n_train: int = 200
    n_val: int = 50
    n_test: int = 100
    n_blobs: int = 2
    blob_min: int = 3
    blob_max: int = 5
    speed_min: float = 0.5
    speed_max: float = 1.5
    cargo: int = 3
    margin: int = 2
    cycle_speed: int = 1
    frame_step: int = 1
    background_max: float = 0.3
    injectors: str = "stall:24:34,off_path:52:60"
    # model
    kind: str = "sparse"
    hidden: str = "8,8"
    kernel_size: int = 3
    head_bias: bool = True
    theta_init: float = 0.0
    # training
    task: str = "predict"  # predict | reconstruct
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
    mse_scale: float = 1.0
    val_horizon: int = 0
    # evaluation
    warmup: int = 10
    horizon: int = 10
    # explorer
    init_weights: str = "0.1,0.25,0.5,0.75,0.9,1.0"
    iterations: int = 0
    grid_size: int = 101
    gp_iterations: int = 500
    gp_lr: float = 0.05
    independent_gp: bool = False
    log_mse: bool = False

    # --- derived configs ---------------------------------------------------------
    def path(self, name: str) -> Path:
        return Path(self.out_dir) / name

    @property
    def data_path(self) -> Path:
        return Path(self.data_dir or self.out_dir)

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else self.path("model.sstm")

    @property
    def records_path(self) -> Path:
        return Path(self.records) if self.records else self.path("pareto_records.csv")

    def blob_config(self) -> BouncingBlobConfig:
        return BouncingBlobConfig(self.size, self.channels, self.n_blobs, self.blob_min, self.blob_max,
                                  self.length, self.speed_min, self.speed_max, self.n_train,
                                  self.n_val, self.n_test, self.seed)

    def cycle_config(self) -> AnomalyCycleConfig:
        return AnomalyCycleConfig(self.size, self.cargo, self.margin, self.cycle_speed, self.length,
                                  self.frame_step, self.background_max, self.n_train, self.n_val,
                                  self.n_test, parse_injectors(self.injectors), self.seed)

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.kind, self.channels, parse_ints(self.hidden), self.kernel_size,
                           self.head_bias)

    def train_config(self, w_mse: float | None = None) -> TrainConfig:
        return TrainConfig(self.epochs, self.patience, self.lr, self.lr_decay, self.batch_size,
                           self.train_steps, self.window, self.stride,
                           self.w_mse if w_mse is None else w_mse, self.mu, self.tau,
                           self.mse_scale, self.val_horizon, self.seed)

    def weights(self) -> list[float]:
        return [float(v) for v in self.init_weights.split(",") if v.strip()]

    def validate(self) -> None:
        """Build every derived config once so bad values surface as usage errors."""
        if self.dataset not in ("blobs", "cycles"):
            raise ValueError(f"dataset must be 'blobs' or 'cycles', got {self.dataset!r}")
        if self.task not in ("predict", "reconstruct"):
            raise ValueError(f"task must be 'predict' or 'reconstruct', got {self.task!r}")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        if self.grid_size < 2:
            raise ValueError("grid_size must be >= 2")
        self.blob_config() if self.dataset == "blobs" else self.cycle_config()
        self.model_config()
        self.train_config().scalarization
        if any(not 0 <= w <= 1 for w in self.weights()):
            raise ValueError("init_weights must lie in [0, 1]")


def parse_ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ValueError(f"expected comma-separated integers, got {text!r}") from None


def parse_injectors(text: str) -> tuple:
    out = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        try:
            kind, start, stop = item.split(":")
            out.append((kind, int(start), int(stop)))
        except ValueError:
            raise ValueError(f"injector must be kind:start:stop, got {item!r}") from None
    return tuple(out)


def parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


_CONVERTERS = {"int": int, "float": float, "bool": parse_bool, "str": str}


def _field_types() -> dict[str, callable]:
    return {f.name: _CONVERTERS[f.type] for f in fields(RunConfig)}


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment.  Unknown keys are errors."""
    types = _field_types()
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        try:
            values[key] = types[key](value)
        except ValueError as exc:
            raise UsageError(f"{path}:{n}: {exc}") from None
    return values


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sparsest", description="Delta-sparse ConvLSTM toolkit.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="key = value file; flags override it")
    parser.add_argument("-v", "--verbose", action="store_true")
    for f in fields(RunConfig):
        parser.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None,
                            type=_CONVERTERS[f.type], metavar=f.type.upper())
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = read_config_file(args.config) if args.config else {}
    for f in fields(RunConfig):
        flag = getattr(args, f.name)
        if flag is not None:
            values[f.name] = flag
    cfg = RunConfig(**values)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cfg


# --- output helpers ------------------------------------------------------------

def write_json(path: Path, payload: dict, cfg: RunConfig) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {**payload, "config": asdict(cfg)}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, field_names, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=field_names, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def load_split(cfg: RunConfig, split: str) -> np.ndarray:
    path = cfg.data_path / f"{split}.sstd"
    if not path.exists():
        raise FileNotFoundError(f"dataset file {path} not found")
    return read_dataset(path)


def load_labels(cfg: RunConfig) -> np.ndarray:
    path = cfg.data_path / "dataset.json"
    if not path.exists():
        raise FileNotFoundError(f"dataset sidecar {path} not found")
    meta = json.loads(path.read_text())
    if "test_labels" not in meta:
        raise FormatError(f"{path} holds no frame labels; generate with dataset = cycles")
    return np.asarray(meta["test_labels"], dtype=bool)


def new_model(cfg: RunConfig, train: np.ndarray) -> SequenceModel:
    mean = float(np.clip(train.mean(), 1e-6, 1 - 1e-6)) if train.size else 0.5
    return SequenceModel.init(cfg.model_config(), seed=cfg.seed, output_bias=float(logit(mean)),
                              theta=cfg.theta_init)


def fit(cfg: RunConfig, model, train, val, w_mse=None, checkpoint=None, log_path=None):
    tcfg = cfg.train_config(w_mse)
    fn = train_reconstruction if cfg.task == "reconstruct" else train_prediction
    return fn(model, train, val, tcfg, checkpoint, log_path)


# --- commands ------------------------------------------------------------------

def cmd_generate(cfg: RunConfig) -> None:
    out = cfg.data_path
    out.mkdir(parents=True, exist_ok=True)
    if cfg.dataset == "blobs":
        data = generate_blobs(cfg.blob_config())
        meta = {"dataset": "blobs"}
    else:
        data = generate_cycles(cfg.cycle_config())
        meta = {"dataset": "cycles", "test_labels": data["test_labels"].astype(int).tolist()}
    for split in SPLITS:
        write_dataset(out / f"{split}.sstd", data[split])
    meta["shapes"] = {s: list(data[s].shape) for s in SPLITS}
    write_json(out / "dataset.json", meta, cfg)


def cmd_train(cfg: RunConfig) -> None:
    train, val = load_split(cfg, "train"), load_split(cfg, "val")
    model = new_model(cfg, train)
    report = fit(cfg, model, train, val, checkpoint=cfg.checkpoint_path,
                 log_path=cfg.path("train_log.jsonl"))
    write_json(cfg.path("train.json"), report.as_dict(), cfg)


def _evaluate(cfg: RunConfig):
    model = load_checkpoint(cfg.checkpoint_path)
    return model, evaluate_prediction(model, load_split(cfg, "test"), cfg.warmup, cfg.horizon)


def cmd_eval(cfg: RunConfig) -> None:
    model, res = _evaluate(cfg)
    payload = res.as_dict()
    payload["kind"] = model.kind
    payload["thetas"] = [list(t) for t in model.thetas()]
    write_json(cfg.path("metrics.json"), payload, cfg)


def cmd_flops(cfg: RunConfig) -> None:
    model, res = _evaluate(cfg)
    if model.kind == "dense":
        raise FormatError("flops report needs a sparse checkpoint")
    write_csv(cfg.path("flops.csv"), CSV_FIELDS, [u.as_dict() for u in res.units])


def cmd_anomaly(cfg: RunConfig) -> None:
    model = load_checkpoint(cfg.checkpoint_path)
    test = load_split(cfg, "test")
    labels = load_labels(cfg)
    if labels.shape != test.shape[:2]:
        raise FormatError("label shape does not match the test split")
    rows, all_scores, all_labels = [], [], []
    for s, seq in enumerate(test):
        centres, scores = anomaly_scores(model, seq, cfg.window, cfg.stride)
        for t, sc in zip(centres, scores):
            rows.append({"sequence": s, "frame": int(t), "score": float(sc), "label": int(labels[s, t])})
        all_scores.append(scores)
        all_labels.append(labels[s, centres])
    scores, lab = np.concatenate(all_scores), np.concatenate(all_labels)
    roc = roc_auc(scores, lab)
    write_csv(cfg.path("scores.csv"), ["sequence", "frame", "score", "label"], rows)
    write_csv(cfg.path("roc.csv"), ["threshold", "fpr", "tpr"],
              [{"threshold": float(t), "fpr": float(f), "tpr": float(p)}
               for t, f, p in zip(roc.thresholds, roc.fpr, roc.tpr)])
    write_json(cfg.path("anomaly.json"), {
        "auc": roc.auc,
        "mean_score_anomalous": float(scores[lab].mean()),
        "mean_score_normal": float(scores[~lab].mean()),
        "n_frames": int(lab.size), "n_anomalous": int(lab.sum())}, cfg)


RECORD_FIELDS = ["run_id", "seed", "w_mse", "mse", "occupancy"]


def train_at_weight(cfg: RunConfig, w: float) -> ParetoRecord:
    """Train one model at ``w`` and score it on the test split (worker-safe)."""
    train, val, test = (load_split(cfg, s) for s in SPLITS)
    model = new_model(cfg, train)
    run_id = f"w{w:.4f}"
    fit(cfg, model, train, val, w_mse=w, checkpoint=cfg.path(f"model_{run_id}.sstm"))
    res = evaluate_prediction(model, test, cfg.warmup, cfg.horizon)
    occ = res.occupancy if res.occupancy is not None else 1.0
    return ParetoRecord(float(w), ObjectiveVector(res.mse, occ), run_id, cfg.seed)


def cmd_pareto(cfg: RunConfig) -> None:
    trainer = partial(train_at_weight, cfg)
    grid = default_grid(cfg.grid_size)
    fit_kwargs = {"iterations": cfg.gp_iterations, "lr": cfg.gp_lr,
                  "independent": cfg.independent_gp, "log_mse": cfg.log_mse}
    if cfg.jobs > 1:
        with ProcessPoolExecutor(cfg.jobs) as pool:
            records, gp = explore(trainer, cfg.weights(), cfg.iterations, grid, fit_kwargs, pool.map)
    else:
        records, gp = explore(trainer, cfg.weights(), cfg.iterations, grid, fit_kwargs)
    write_csv(cfg.records_path, RECORD_FIELDS, [record_row(r) for r in records])
    payload = {"records": [record_row(r) for r in records]}
    if gp is not None:
        write_csv(cfg.path("gp_curve.csv"), CURVE_FIELDS, curve_rows(gp, grid))
        payload["gp"] = {"lengthscale": float(np.exp(gp.hyper.log_ell)),
                         "task_cov": gp.hyper.task_cov.tolist(), "noise": gp.noise.tolist(),
                         "nmll": gp.nmll_trace[-1] if gp.nmll_trace else None}
    write_json(cfg.path("pareto.json"), payload, cfg)


def record_row(r: ParetoRecord) -> dict:
    return {"run_id": r.run_id, "seed": r.seed, "w_mse": r.w_mse,
            "mse": r.objectives.mse, "occupancy": r.objectives.occupancy}


def read_records(path: Path) -> list[ParetoRecord]:
    if not path.exists():
        raise FileNotFoundError(f"records file {path} not found")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(RECORD_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise FormatError(f"{path} lacks columns {sorted(missing)}")
        try:
            return [ParetoRecord(float(row["w_mse"]),
                                 ObjectiveVector(float(row["mse"]), float(row["occupancy"])),
                                 row["run_id"], int(row["seed"])) for row in reader]
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from None


def cmd_front_export(cfg: RunConfig) -> None:
    records = read_records(cfg.records_path)
    front = dominance_filter(records)
    write_csv(cfg.path("front.csv"), FRONT_FIELDS, front_rows(front))


HANDLERS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "anomaly": cmd_anomaly,
            "flops": cmd_flops, "pareto": cmd_pareto, "front-export": cmd_front_export}


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    print(f"error_code={code}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, str(exc))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](cfg)
    except (ad.TrainingError, GPFitError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return _fail(EXIT_NUMERIC, str(exc))
    except (FormatError, StructuralError, OSError, ValueError) as exc:
        return _fail(EXIT_DATA, str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
