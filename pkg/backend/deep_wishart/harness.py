"""
Experiment plumbing: CSV datasets, splits, standardisation, presets, run
records and result workbooks.
"""

import io
import json
import logging
import os
import re
import time
from dataclasses import asdict, dataclass, field
from typing import Any, BinaryIO, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from Crypto.Hash import SHA1, SHA256
from openpyxl import Workbook
from openpyxl.styles import Alignment, Font, PatternFill
from openpyxl.utils import get_column_letter

from . import inference
from .errors import DomainError, EmptyDataset, ParseError, ShapeMismatch, UnknownPreset
from .model import DeepWishartProcess, ModelConfig
from .numerics import RngStream

logger = logging.getLogger(__name__)

PACKAGE_DIR = os.path.dirname(os.path.abspath(__file__))
PRESETS_DIR = os.path.join(os.path.dirname(PACKAGE_DIR), "presets")
STD_FLOOR = 1e-8

# pandas reports ragged rows as "Expected <n> fields in line <line>, saw <m>"
RAGGED_ROW = re.compile(r"Expected (\d+) fields in line (\d+), saw (\d+)")

# Run stream ids: one independent stream per purpose.
INIT_STREAM, TRAIN_STREAM, EVAL_STREAM = 1, 2, 3


@dataclass
class DatasetSpec:
    """Where a dataset lives and how it is split."""

    path: str
    target_column: int = -1
    split_seed: int = 0
    split_index: int = 0
    train_fraction: float = 0.9
    skip_header: bool = False
    split_file: Optional[str] = None


# ---------------------------------------------------------------------------
# Datasets and splits
# ---------------------------------------------------------------------------

def load_csv(spec: DatasetSpec) -> Tuple[np.ndarray, np.ndarray]:
    """
    Read a numeric CSV into inputs and targets.

    Args:
        spec: Dataset description; ``target_column`` may be negative

    Returns:
        (X, y) with X of shape P x D

    Raises:
        ParseError: with the 0-based file row and column of the first
            non-numeric cell; for a ragged row the column is the first
            missing or extra field
        EmptyDataset: when no data rows remain
    """
    skip = 1 if spec.skip_header else 0
    try:
        frame = pd.read_csv(spec.path, header=None, skiprows=skip, dtype=str,
                            skip_blank_lines=True, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise EmptyDataset(spec.path) from None
    except pd.errors.ParserError as exc:
        match = RAGGED_ROW.search(str(exc))
        if match is None:
            raise ParseError(skip, 0, reason=f"Unreadable CSV ({exc})") from None
        expected, line, seen = (int(g) for g in match.groups())
        raise ParseError(line - 1, expected, reason=f"Row has {seen} fields, expected {expected}") from None
    if frame.empty:
        raise EmptyDataset(spec.path)

    missing = frame.isna().to_numpy()
    if missing.any():
        row, col = (int(v) for v in np.argwhere(missing)[0])
        raise ParseError(row + skip, col, reason=f"Row has {col} fields, expected {frame.shape[1]}")

    stripped = frame.apply(lambda col: col.str.strip())
    numeric = stripped.apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().to_numpy()
    if bad.any():
        row, col = (int(v) for v in np.argwhere(bad)[0])
        raise ParseError(row + skip, col, frame.iat[row, col])

    data = numeric.to_numpy(dtype=np.float64)
    if data.shape[1] < 2:
        raise ShapeMismatch(f"Dataset '{spec.path}' needs at least one input and one target column")
    target = spec.target_column % data.shape[1]
    y = data[:, target]
    x = np.delete(data, target, axis=1)
    logger.info("Loaded %s: %d rows, %d inputs", spec.path, x.shape[0], x.shape[1])
    return x, y


def split_indices(n: int, spec: DatasetSpec) -> Tuple[np.ndarray, np.ndarray]:
    """
    Disjoint, exhaustive (train, test) index arrays.

    A ``split_file`` lists the training row indices (whitespace separated);
    otherwise a random partition is drawn from ``(split_seed, split_index)``.
    """
    if spec.split_file:
        train = np.unique(np.loadtxt(spec.split_file, dtype=np.int64, ndmin=1))
        if train.size == 0 or train.min() < 0 or train.max() >= n:
            raise DomainError(f"Split file '{spec.split_file}' has indices outside [0, {n})")
        return train, np.setdiff1d(np.arange(n), train)
    if not 0.0 < spec.train_fraction <= 1.0:
        raise DomainError(f"train_fraction must be in (0, 1], got {spec.train_fraction}")
    perm = RngStream(spec.split_seed, spec.split_index).permutation(n)
    n_train = min(n, max(1, int(round(spec.train_fraction * n))))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


@dataclass
class Standardizer:
    """Per-column affine transform fitted on the training set."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray, y: np.ndarray) -> "Standardizer":
        if len(x) == 0:
            raise EmptyDataset("training split")
        y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
        return cls(x_mean=x.mean(axis=0), x_std=np.maximum(x.std(axis=0), STD_FLOOR),
                   y_mean=y.mean(axis=0), y_std=np.maximum(y.std(axis=0), STD_FLOOR))

    def transform_x(self, x):
        return (x - self.x_mean) / self.x_std

    def inverse_x(self, x):
        return x * self.x_std + self.x_mean

    def transform_y(self, y):
        return (np.asarray(y).reshape(len(y), -1) - self.y_mean) / self.y_std

    def inverse_y(self, y):
        return np.asarray(y).reshape(len(y), -1) * self.y_std + self.y_mean

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {k: np.asarray(v) for k, v in asdict(self).items()}

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "Standardizer":
        return cls(**{k: np.asarray(arrays[k], dtype=np.float64)
                      for k in ("x_mean", "x_std", "y_mean", "y_std")})


def standardize(x_train, y_train, x_test, y_test):
    """Standardise both splits with training statistics; returns the arrays and the transform."""
    st = Standardizer.fit(x_train, y_train)
    return (st.transform_x(x_train), st.transform_y(y_train),
            st.transform_x(x_test), st.transform_y(y_test), st)


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

def list_presets() -> List[Dict[str, str]]:
    presets = []
    for filename in sorted(os.listdir(PRESETS_DIR)):
        if not filename.endswith(".json"):
            continue
        with open(os.path.join(PRESETS_DIR, filename), "r") as f:
            data = json.load(f)
        presets.append({"id": os.path.splitext(filename)[0], "name": data.get("name", ""),
                        "description": data.get("description", "")})
    return presets


def load_preset(preset_id: str) -> Dict[str, Any]:
    """Preset by id: ``{"name", "description", "model": {...}, "schedule": {...}}``."""
    path = os.path.join(PRESETS_DIR, f"{os.path.basename(preset_id)}.json")
    if not os.path.exists(path):
        raise UnknownPreset(preset_id)
    with open(path, "r") as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# Run records
# ---------------------------------------------------------------------------

def code_hash(root: str = PACKAGE_DIR) -> str:
    """Git-style content hash: SHA-1 over the sorted (path, blob id) list of the package sources."""
    entries = []
    for dirpath, _, filenames in sorted(os.walk(root)):
        for filename in sorted(filenames):
            if not filename.endswith(".py"):
                continue
            path = os.path.join(dirpath, filename)
            with open(path, "rb") as f:
                content = f.read()
            blob = SHA1.new(b"blob %d\0" % len(content) + content).hexdigest()
            entries.append(f"{os.path.relpath(path, root)} {blob}\n")
    return SHA1.new("".join(entries).encode()).hexdigest()


@dataclass
class RunRecord:
    """Outcome of one experiment; ``digest`` ignores wall time."""

    dataset: str
    seed: int
    config: Dict[str, Any]
    elbo_per_point: float
    test_loglik: Optional[float]
    wall_time: float
    code_hash: str
    steps: int = 0
    n_train: int = 0
    n_test: int = 0
    extra: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunRecord":
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        payload = self.to_dict()
        payload.pop("wall_time")
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return SHA256.new(canonical.encode("utf-8")).hexdigest()

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path: str) -> "RunRecord":
        with open(path, "r") as f:
            return cls.from_json(f.read())


def run_experiment(spec: DatasetSpec, model_config: ModelConfig, sched: inference.TrainSchedule,
                   seed: int, out_dir: Optional[str] = None) -> RunRecord:
    """
    Load, split, standardise, train and evaluate one model.

    Writes ``run.json``, ``checkpoint.npz`` and ``trace.jsonl`` into
    ``out_dir`` when given.
    """
    start = time.perf_counter()
    x, y = load_csv(spec)
    train_idx, test_idx = split_indices(len(x), spec)
    x_tr, y_tr, x_te, y_te, st = standardize(x[train_idx], y[train_idx], x[test_idx], y[test_idx])

    paths = {}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        paths = {name: os.path.join(out_dir, name)
                 for name in ("run.json", "checkpoint.npz", "trace.jsonl")}

    model = DeepWishartProcess.initialize(model_config, x_tr, RngStream(seed, INIT_STREAM))
    inference.train(model, x_tr, y_tr, sched, RngStream(seed, TRAIN_STREAM),
                    trace_path=paths.get("trace.jsonl"), checkpoint_path=paths.get("checkpoint.npz"),
                    standardizer=st.to_arrays())

    eval_rng = RngStream(seed, EVAL_STREAM)
    elbo = inference.evaluate_elbo(model, x_tr, y_tr, model.config.eval_samples, eval_rng.split(0))
    test_ll = None
    if len(test_idx):
        test_ll = inference.test_loglik(model, x_te, y_te, model.config.eval_samples,
                                        eval_rng.split(1), target_scale=st.y_std)

    record = RunRecord(dataset=os.path.basename(spec.path), seed=seed,
                       config={"model": asdict(model_config), "schedule": asdict(sched),
                               "dataset": asdict(spec)},
                       elbo_per_point=elbo, test_loglik=test_ll,
                       wall_time=time.perf_counter() - start, code_hash=code_hash(),
                       steps=sched.steps, n_train=len(train_idx), n_test=len(test_idx))
    if "run.json" in paths:
        record.save(paths["run.json"])
    logger.info("Run finished: elbo/N=%.4f test LL=%s digest=%s", elbo,
                "n/a" if test_ll is None else f"{test_ll:.4f}", record.digest())
    return record


def evaluate_checkpoint(checkpoint: str, spec: DatasetSpec, samples: Optional[int] = None,
                        seed: int = 0) -> Dict[str, Any]:
    """Test log-likelihood and ELBO per point of a saved model on every row of a CSV."""
    model, arrays = DeepWishartProcess.load(checkpoint)
    x, y = load_csv(spec)
    target_scale = 1.0
    if arrays is not None:
        st = Standardizer.from_arrays(arrays)
        x, y, target_scale = st.transform_x(x), st.transform_y(y), st.y_std
    samples = samples or model.config.eval_samples
    rng = RngStream(seed, EVAL_STREAM)
    return {
        "ok": True,
        "rows": int(len(x)),
        "test_loglik": inference.test_loglik(model, x, y, samples, rng.split(1), target_scale),
        "elbo_per_point": inference.evaluate_elbo(model, x, y, samples, rng.split(0)),
    }


# ---------------------------------------------------------------------------
# Result tables
# ---------------------------------------------------------------------------

TABLE_COLUMNS = [
    ("Dataset", 18), ("Depth", 8), ("Inducing", 10), ("Seed", 8), ("Steps", 10),
    ("ELBO/N", 12), ("Test LL", 12), ("Wall time (s)", 14), ("Digest", 20),
]


def _table_row(record: RunRecord) -> List[Any]:
    model_cfg = record.config.get("model", {})
    return [record.dataset, model_cfg.get("depth"), model_cfg.get("inducing"), record.seed,
            record.steps, round(record.elbo_per_point, 4),
            None if record.test_loglik is None else round(record.test_loglik, 4),
            round(record.wall_time, 1), record.digest()[:16]]


def write_results_workbook(records: Sequence[RunRecord],
                           target: Union[str, BinaryIO, None] = None) -> bytes:
    """
    One-row-per-run results table as an ``.xlsx`` workbook.

    Args:
        records: Runs to tabulate
        target: Optional path or binary stream to also write to

    Returns:
        The workbook bytes
    """
    wb = Workbook()
    ws = wb.active
    ws.title = "DWP Runs"

    header_fill = PatternFill(start_color="DDEBF7", end_color="DDEBF7", fill_type="solid")
    for col, (title, width) in enumerate(TABLE_COLUMNS, start=1):
        cell = ws.cell(row=1, column=col, value=title)
        cell.font = Font(bold=True)
        cell.fill = header_fill
        cell.alignment = Alignment(horizontal="center", vertical="center")
        ws.column_dimensions[get_column_letter(col)].width = width

    for row, record in enumerate(records, start=2):
        for col, value in enumerate(_table_row(record), start=1):
            cell = ws.cell(row=row, column=col, value=value)
            cell.alignment = Alignment(horizontal="center", vertical="center")

    buffer = io.BytesIO()
    wb.save(buffer)
    data = buffer.getvalue()
    if isinstance(target, str):
        with open(target, "wb") as f:
            f.write(data)
    elif target is not None:
        target.write(data)
    return data
