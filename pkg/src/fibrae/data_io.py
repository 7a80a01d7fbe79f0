"""Dataset ingestion (CSV, IDX images, synthetic clusters), normalization,
model archives, and run configuration.

Archive byte layout (version 1): magic b"FAE1", a little-endian uint32 length
prefix, a UTF-8 JSON architecture block, then the flat float64 little-endian
parameter payload with groups in the order encoder, embedding, decoder,
adversarial classifier, condition classifier, discriminator (weights then
bias per layer). Loading a saved model is bit-identical.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .geodesic import SolverConfig
from .nn import DenseLayer, FiberedAutoencoder, GradientReversal, ModelConfig
from .training import TrainConfig

__all__ = [
    "Dataset",
    "load_csv",
    "load_idx",
    "normalize_minmax",
    "denormalize_minmax",
    "save_model",
    "load_model",
    "make_synthetic",
    "ModelSection",
    "RunConfig",
    "load_run_config",
    "atomic_write_bytes",
    "atomic_write_text",
]

log = logging.getLogger("fibrae.data_io")

ARCHIVE_MAGIC = b"FAE1"
ARCHIVE_VERSION = 1


@dataclass
class Dataset:
    """Feature matrix with dense integer condition ids.

    Training requires features in [0, 1]; the range is validated on
    construction unless unit_range=False (loaders that deliberately return
    raw values, leaving normalization to a separate step).
    """

    features: np.ndarray
    conditions: np.ndarray
    n_conditions: int
    condition_labels: list = None
    feature_ranges: tuple = None  # (mins, maxs) used by normalization
    unit_range: bool = True

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.conditions = np.atleast_1d(np.asarray(self.conditions, dtype=np.intp))
        if self.features.shape[0] != self.conditions.shape[0]:
            raise ValueError("feature rows and condition ids differ in count")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")
        if self.unit_range and self.features.size and (
                self.features.min() < 0.0 or self.features.max() > 1.0):
            raise ValueError("features must lie in [0, 1]; normalize first")
        if self.conditions.size and (self.conditions.min() < 0
                                     or self.conditions.max() >= self.n_conditions):
            raise ValueError(f"condition ids must lie in [0, {self.n_conditions})")
        if self.condition_labels is None:
            self.condition_labels = [str(i) for i in range(self.n_conditions)]

    def normalized(self) -> "Dataset":
        """Copy with features mapped into [0, 1] and the ranges recorded."""
        x, ranges = normalize_minmax(self.features)
        return Dataset(x, self.conditions.copy(), self.n_conditions,
                       condition_labels=list(self.condition_labels),
                       feature_ranges=ranges)

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def _dense_reindex(raw_labels):
    """Condition ids in first-appearance order; returns (ids, ordered labels)."""
    order = {}
    ids = np.empty(len(raw_labels), dtype=np.intp)
    for i, label in enumerate(raw_labels):
        if label not in order:
            order[label] = len(order)
        ids[i] = order[label]
    return ids, list(order)


def load_csv(path, condition_column: str) -> Dataset:
    """Features from all non-condition numeric columns; conditions densely
    re-indexed in first-appearance order. Normalization is NOT applied here."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"empty CSV file: {path}") from None
        header = [h.strip() for h in header]
        if condition_column not in header:
            raise ValueError(f"condition column '{condition_column}' not found in {header}")
        cond_idx = header.index(condition_column)
        feat_names = [h for i, h in enumerate(header) if i != cond_idx]
        rows, raw_conditions = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"row {line_no} has {len(row)} cells, header has {len(header)}")
            raw_conditions.append(row[cond_idx].strip())
            feats = []
            for i, cell in enumerate(row):
                if i == cond_idx:
                    continue
                try:
                    feats.append(float(cell))
                except ValueError:
                    name = header[i]
                    raise ValueError(
                        f"non-numeric value {cell!r} in feature column '{name}' at row {line_no}"
                    ) from None
            rows.append(feats)
    if not rows:
        raise ValueError(f"CSV file has a header but no data rows: {path}")
    ids, labels = _dense_reindex(raw_conditions)
    features = np.asarray(rows, dtype=np.float64)
    return Dataset(features, ids, n_conditions=len(labels), condition_labels=labels,
                   unit_range=False)


def load_idx(images_path, labels_path) -> Dataset:
    """MNIST-style IDX pair: pixels flattened row-major and scaled into [0, 1]."""
    with open(images_path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise ValueError("truncated IDX image header")
    magic, count, rows, cols = struct.unpack(">iiii", blob[:16])
    if magic != 2051:
        raise ValueError(f"bad IDX image magic {magic}, expected 2051")
    expected = count * rows * cols
    payload = np.frombuffer(blob, dtype=np.uint8, offset=16)
    if payload.size != expected:
        raise ValueError(f"IDX image payload has {payload.size} bytes, expected {expected}")
    with open(labels_path, "rb") as fh:
        label_blob = fh.read()
    if len(label_blob) < 8:
        raise ValueError("truncated IDX label header")
    lmagic, lcount = struct.unpack(">ii", label_blob[:8])
    if lmagic != 2049:
        raise ValueError(f"bad IDX label magic {lmagic}, expected 2049")
    labels = np.frombuffer(label_blob, dtype=np.uint8, offset=8)
    if labels.size != lcount:
        raise ValueError(f"IDX label payload has {labels.size} entries, header says {lcount}")
    if lcount != count:
        raise ValueError(f"IDX pair mismatch: {count} images vs {lcount} labels")
    features = payload.reshape(count, rows * cols).astype(np.float64) / 255.0
    ids, ordered = _dense_reindex([int(v) for v in labels])
    return Dataset(features, ids, n_conditions=len(ordered),
                   condition_labels=[str(v) for v in ordered])


def normalize_minmax(x):
    """Per-feature (x - min) / (max - min); constant features map to 0 (flagged).

    Returns (normalized, (mins, maxs)); the ranges invert the map for
    non-constant features.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    mins = x.min(axis=0)
    maxs = x.max(axis=0)
    span = maxs - mins
    constant = span == 0.0
    if np.any(constant):
        log.warning("normalizing %d constant feature(s) to zero: columns %s",
                    int(constant.sum()), np.nonzero(constant)[0].tolist())
    safe = np.where(constant, 1.0, span)
    out = (x - mins) / safe
    out[:, constant] = 0.0
    return out, (mins, maxs)


def denormalize_minmax(x, ranges):
    mins, maxs = ranges
    return np.atleast_2d(np.asarray(x, dtype=np.float64)) * (maxs - mins) + mins


def make_synthetic(n_conditions: int, per_condition: int, dim: int, seed: int,
                   factor_dim: int = 2, mean_scale: float = 1.0,
                   factor_scale: float = 0.7, noise_scale: float = 0.05) -> Dataset:
    """Gaussian clusters with condition-specific means plus a factor of
    variation shared across conditions, rescaled into [0, 1].

    The shared factor gives every condition the same within-condition
    structure, so transport between conditions has something to preserve.
    """
    if n_conditions < 1 or per_condition < 1 or dim < 1:
        raise ValueError("counts and dimension must be positive")
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, mean_scale, size=(n_conditions, dim))
    loading = rng.normal(0.0, 1.0, size=(dim, factor_dim))
    loading /= np.linalg.norm(loading, axis=0, keepdims=True)
    blocks, ids = [], []
    for c in range(n_conditions):
        factors = rng.normal(0.0, factor_scale, size=(per_condition, factor_dim))
        noise = rng.normal(0.0, noise_scale, size=(per_condition, dim))
        blocks.append(means[c] + factors @ loading.T + noise)
        ids.extend([c] * per_condition)
    x, ranges = normalize_minmax(np.vstack(blocks))
    return Dataset(x, np.asarray(ids), n_conditions=n_conditions, feature_ranges=ranges)


# -- model archives ------------------------------------------------------------


def _layer_specs(layers):
    return [[int(l.weights.shape[0]), int(l.weights.shape[1]), l.activation] for l in layers]


def _arch_block(model: FiberedAutoencoder) -> dict:
    cfg = model.config
    return {
        "version": ARCHIVE_VERSION,
        "input_dim": cfg.input_dim,
        "fiber_dim": cfg.fiber_dim,
        "base_dim": cfg.base_dim,
        "conditions": cfg.conditions,
        "omega0": cfg.omega0,
        "decoder_output_activation": cfg.decoder_output_activation,
        "grl_lambda": model.grl.lam,
        "condition_labels": model.condition_labels,
        "layers": {group: _layer_specs(getattr(model, group))
                   for group in ("encoder", "decoder", "adv_classifier",
                                 "cond_classifier", "discriminator")},
    }


def save_model(model: FiberedAutoencoder, path):
    arch = json.dumps(_arch_block(model), sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes()
                       for p in model.all_params())
    atomic_write_bytes(path, ARCHIVE_MAGIC + struct.pack("<I", len(arch)) + arch + payload)


def _hidden_sizes(specs):
    return [out for out, _inp, _act in specs[:-1]]


def load_model(path) -> FiberedAutoencoder:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != ARCHIVE_MAGIC:
        raise ValueError(f"not a model archive (bad magic {blob[:4]!r})")
    (arch_len,) = struct.unpack("<I", blob[4:8])
    arch = json.loads(blob[8:8 + arch_len].decode("utf-8"))
    if arch.get("version") != ARCHIVE_VERSION:
        raise ValueError(
            f"unsupported archive version {arch.get('version')}; supported: {ARCHIVE_VERSION}")
    layers = arch["layers"]
    config = ModelConfig(
        input_dim=arch["input_dim"], fiber_dim=arch["fiber_dim"],
        base_dim=arch["base_dim"], conditions=arch["conditions"],
        encoder_hidden=_hidden_sizes(layers["encoder"]),
        decoder_hidden=_hidden_sizes(layers["decoder"]),
        adv_hidden=_hidden_sizes(layers["adv_classifier"]),
        cond_hidden=_hidden_sizes(layers["cond_classifier"]),
        disc_hidden=_hidden_sizes(layers["discriminator"]),
        omega0=arch["omega0"],
        decoder_output_activation=arch["decoder_output_activation"],
    )
    raw = np.frombuffer(blob, dtype="<f8", offset=8 + arch_len)
    cursor = 0

    def take(shape):
        nonlocal cursor
        size = int(np.prod(shape))
        if cursor + size > raw.size:
            raise ValueError("archive payload shorter than the architecture requires")
        out = np.array(raw[cursor:cursor + size].reshape(shape), copy=True)
        cursor += size
        return out

    def take_layers(specs):
        return [DenseLayer(take((out_dim, in_dim)), take((out_dim,)), act)
                for out_dim, in_dim, act in specs]

    # Payload group order: encoder, embedding, decoder, then the three heads.
    enc = take_layers(layers["encoder"])
    emb = take((arch["conditions"], arch["base_dim"]))
    dec = take_layers(layers["decoder"])
    adv = take_layers(layers["adv_classifier"])
    cond = take_layers(layers["cond_classifier"])
    disc = take_layers(layers["discriminator"])
    if cursor != raw.size:
        raise ValueError(f"archive payload has {raw.size - cursor} unexpected trailing values")
    return FiberedAutoencoder(
        config=config, encoder=enc, embedding=emb, decoder=dec,
        adv_classifier=adv, cond_classifier=cond, discriminator=disc,
        grl=GradientReversal(arch["grl_lambda"]),
        condition_labels=arch["condition_labels"],
    )


# -- run configuration ------------------------------------------------------------


@dataclass
class ModelSection:
    """Architecture knobs that do not depend on the dataset."""

    fiber_dim: int = 2
    base_dim: int = 2
    encoder_hidden: list = field(default_factory=lambda: [64, 32])
    decoder_hidden: list = field(default_factory=lambda: [32, 64])
    adv_hidden: list = field(default_factory=lambda: [32])
    cond_hidden: list = field(default_factory=lambda: [32])
    disc_hidden: list = field(default_factory=lambda: [32])
    omega0: float = 1.0
    decoder_output_activation: str = "sigmoid"


@dataclass
class RunConfig:
    """JSON-backed run description: dataset, model, training and solver knobs."""

    dataset: str = None
    condition_column: str = "condition"
    synthetic: dict = None
    output_dir: str = "fibrae_out"
    seed: int = 0
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)

    def to_model_config(self, input_dim: int, conditions: int) -> ModelConfig:
        m = self.model
        return ModelConfig(
            input_dim=input_dim, fiber_dim=m.fiber_dim, base_dim=m.base_dim,
            conditions=conditions, encoder_hidden=list(m.encoder_hidden),
            decoder_hidden=list(m.decoder_hidden), adv_hidden=list(m.adv_hidden),
            cond_hidden=list(m.cond_hidden), disc_hidden=list(m.disc_hidden),
            omega0=m.omega0, decoder_output_activation=m.decoder_output_activation,
        )


def _build_section(cls, data, where):
    if not isinstance(data, dict):
        raise ValueError(f"config section '{where}' must be an object")
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ValueError(f"unknown key(s) {sorted(unknown)} in config section '{where}'; "
                         f"allowed: {sorted(allowed)}")
    return cls(**data)


def load_run_config(path) -> RunConfig:
    """Parse and validate a run configuration; unknown keys are rejected."""
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError("run config must be a JSON object")
    allowed = {f.name for f in fields(RunConfig)}
    unknown = set(data) - allowed
    if unknown:
        raise ValueError(f"unknown top-level config key(s): {sorted(unknown)}; "
                         f"allowed: {sorted(allowed)}")
    sections = {}
    if "model" in data:
        sections["model"] = _build_section(ModelSection, data["model"], "model")
    if "train" in data:
        sections["train"] = _build_section(TrainConfig, data["train"], "train")
    if "solver" in data:
        sections["solver"] = _build_section(SolverConfig, data["solver"], "solver")
    plain = {k: v for k, v in data.items() if k not in ("model", "train", "solver")}
    if "synthetic" in plain and plain["synthetic"] is not None:
        allowed_syn = {"conditions", "per_condition", "dim", "seed", "factor_dim"}
        unknown = set(plain["synthetic"]) - allowed_syn
        if unknown:
            raise ValueError(f"unknown key(s) {sorted(unknown)} in config section 'synthetic'")
    return RunConfig(**plain, **sections)


def dump_run_config(config: RunConfig) -> str:
    return json.dumps(asdict(config), indent=2, sort_keys=True)


# -- atomic writes ----------------------------------------------------------------


def _atomic_write(path, data, mode):
    """Write via a temp file plus rename so interrupted runs leave no partial file."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".fibrae-tmp-")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path, data: bytes):
    _atomic_write(path, data, "wb")


def atomic_write_text(path, text: str):
    _atomic_write(path, text, "w")
