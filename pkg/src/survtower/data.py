"""Preprocessing, augmentation, and the dataset file formats.

A dataset bundle is a directory:

    manifest.txt          key: value lines (vocabulary, normalization
                          statistics, split assignment, per-sample entries)
    volumes/<id>.psnv     one binary volume per patient

Volume files: magic "PSNV", u16 little-endian version (=1), u32 dims
d,h,w, then d*h*w float32 little-endian values, slice-major. Volumes are
stored preprocessed (resized to 8x96x96, range-normalized to [0,1]);
the eight augmented variants are derived on demand from the stored
volume and the sample's augmentation id, never materialized on disk.

Clinical input is UTF-8 CSV with header
``patient_id,<categorical...>,age,survival_days,event``; a missing age
is an empty field.

Normalization statistics are always functions of the training split
alone and are stored in the manifest, not recomputed at load time.
Round-trips are byte-exact: floats are serialized with ``repr``, and
every section is emitted in a canonical order.
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clinical import ClinicalVocabulary, FieldStats
from .errors import (
    ConfigError,
    DegenerateFeatureError,
    FormatError,
    PipelineError,
)

logger = logging.getLogger(__name__)

VOLUME_DIMS = (8, 96, 96)
SPLITS = ("train", "val", "test")
N_FOLDS = 5

# fixed augmentation enumeration (format version 1); every operator is a
# bijection on the voxel grid
AUGMENTATIONS = (
    "identity",
    "rotate90",
    "rotate180",
    "rotate270",
    "flip-horizontal",
    "flip-vertical",
    "swap-axes",
    "reverse-slices",
)


# ---------------------------------------------------------------------------
# feature scaling

def minmax_fit(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi == lo:
        raise DegenerateFeatureError(f"constant feature (value {lo}): min-max scaling undefined")
    return lo, hi


def minmax_apply(values, lo: float, hi: float):
    arr = np.asarray(values, dtype=np.float64)
    return (arr - lo) / (hi - lo)


def minmax_scale(values):
    lo, hi = minmax_fit(values)
    return minmax_apply(values, lo, hi)


def zscore_fit(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    std = float(arr.std())  # population std
    if std == 0.0:
        raise DegenerateFeatureError(f"constant feature (value {mean}): z-scoring undefined")
    return mean, std


def zscore_apply(values, mean: float, std: float):
    return (np.asarray(values, dtype=np.float64) - mean) / std


def zscore(values):
    mean, std = zscore_fit(values)
    return zscore_apply(values, mean, std)


def impute_ages(ages: list[float | None], is_train: list[bool]) -> tuple[list[float], float]:
    """Replace missing ages with the mean of observed *training* ages.

    The mean is computed over observed values only; imputation happens
    before any scaling.
    """
    observed = [a for a, t in zip(ages, is_train) if t and a is not None]
    if not observed:
        raise PipelineError("cannot impute: every training-split age is missing")
    mean = float(np.mean(observed))
    return [mean if a is None else float(a) for a in ages], mean


# ---------------------------------------------------------------------------
# volumes

def resize_volume(raw: np.ndarray, out_dims=VOLUME_DIMS) -> np.ndarray:
    """Separable trilinear resize with corner-aligned sampling.

    Corner alignment makes the interpolation reproduce linear ramps
    exactly, which is the oracle used to test it.
    """
    arr = np.asarray(raw, dtype=np.float64)
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise ConfigError(f"expected a non-empty 3D volume, got shape {arr.shape}")
    for axis, new_n in enumerate(out_dims):
        old_n = arr.shape[axis]
        if old_n == new_n:
            continue
        if old_n == 1:
            arr = np.repeat(arr, new_n, axis=axis)
            continue
        pos = np.linspace(0.0, old_n - 1, new_n)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, old_n - 1)
        frac = pos - lo
        shape = [1, 1, 1]
        shape[axis] = new_n
        frac = frac.reshape(shape)
        arr = np.take(arr, lo, axis=axis) * (1.0 - frac) + np.take(arr, hi, axis=axis) * frac
    return arr


def normalize_volume(raw: np.ndarray) -> np.ndarray:
    """Resize to 8x96x96 and linearly map the value range onto [0,1].

    A constant volume has no range; by convention it maps to all-0.5
    (logged, since it indicates a degenerate scan).
    """
    if not np.all(np.isfinite(raw)):
        raise PipelineError("volume contains non-finite values")
    resized = resize_volume(raw, VOLUME_DIMS)
    lo, hi = float(resized.min()), float(resized.max())
    if hi == lo:
        logger.warning("constant volume (value %s); normalizing to all-0.5", lo)
        return np.full(VOLUME_DIMS, 0.5, dtype=np.float32)
    return ((resized - lo) / (hi - lo)).astype(np.float32)


def augment_volume(volume: np.ndarray, aug_id: int) -> np.ndarray:
    """One of the eight deterministic variants of a (f,h,w) volume."""
    if volume.shape[1] != volume.shape[2]:
        raise ConfigError(f"augmentation needs square in-plane dims, got {volume.shape}")
    if aug_id == 0:
        out = volume
    elif aug_id in (1, 2, 3):
        out = np.rot90(volume, k=aug_id, axes=(1, 2))
    elif aug_id == 4:
        out = volume[:, :, ::-1]
    elif aug_id == 5:
        out = volume[:, ::-1, :]
    elif aug_id == 6:
        out = np.swapaxes(volume, 1, 2)
    elif aug_id == 7:
        out = volume[::-1]
    else:
        raise ConfigError(f"augmentation id must be 0..7, got {aug_id}")
    return np.ascontiguousarray(out)


def augment(volume: np.ndarray) -> list[np.ndarray]:
    return [augment_volume(volume, i) for i in range(len(AUGMENTATIONS))]


# ---------------------------------------------------------------------------
# volume file format (PSNV)

_VOLUME_MAGIC = b"PSNV"
_VOLUME_VERSION = 1
_VOLUME_HEADER = struct.Struct("<4sHIII")


def save_volume(path, volume: np.ndarray):
    arr = np.ascontiguousarray(np.asarray(volume, dtype="<f4"))
    if arr.ndim != 3:
        raise ConfigError(f"volume files hold 3D arrays, got shape {arr.shape}")
    header = _VOLUME_HEADER.pack(_VOLUME_MAGIC, _VOLUME_VERSION, *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def load_volume(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < _VOLUME_HEADER.size:
        raise FormatError(f"volume file {path} truncated in header", offset=len(blob))
    magic, version, d, h, w = _VOLUME_HEADER.unpack_from(blob)
    if magic != _VOLUME_MAGIC:
        raise FormatError(
            f"volume file {path}: expected magic {_VOLUME_MAGIC!r}, found {magic!r}", offset=0
        )
    if version != _VOLUME_VERSION:
        raise FormatError(f"volume file {path}: unsupported version {version}", offset=4)
    need = _VOLUME_HEADER.size + d * h * w * 4
    if len(blob) < need:
        raise FormatError(
            f"volume file {path}: payload truncated ({len(blob)} of {need} bytes)",
            offset=len(blob),
        )
    arr = np.frombuffer(blob, dtype="<f4", count=d * h * w, offset=_VOLUME_HEADER.size)
    return arr.reshape(d, h, w).copy()


# ---------------------------------------------------------------------------
# clinical records on disk

@dataclass
class RawPatient:
    patient_id: str
    categorical: dict[str, str]
    age: float | None
    survival_days: float
    event: int
    volume: np.ndarray | None = None

    @property
    def items(self) -> list[str]:
        return [f"{k}={self.categorical[k]}" for k in sorted(self.categorical)]


def save_clinical_csv(path, patients: list[RawPatient]):
    fields = sorted(patients[0].categorical) if patients else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", *fields, "age", "survival_days", "event"])
        for p in patients:
            age = "" if p.age is None else repr(float(p.age))
            writer.writerow(
                [p.patient_id, *[p.categorical[f] for f in fields],
                 age, repr(float(p.survival_days)), p.event]
            )


def load_clinical_csv(path) -> list[RawPatient]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty clinical file") from None
        if header[:1] != ["patient_id"] or header[-3:] != ["age", "survival_days", "event"]:
            raise FormatError(
                f"{path}: header must be patient_id,<categorical...>,age,survival_days,event; got {header}"
            )
        fields = header[1:-3]
        patients = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            categorical = dict(zip(fields, row[1:-3]))
            age = None if row[-3] == "" else float(row[-3])
            patients.append(
                RawPatient(row[0], categorical, age, float(row[-2]), int(row[-1]))
            )
    return patients


# ---------------------------------------------------------------------------
# dataset assembly

@dataclass
class Sample:
    patient_id: str
    aug_id: int
    tokens: np.ndarray
    covariates: dict[str, float]
    time_norm: float
    event: int


@dataclass
class SurvivalDataset:
    categorical_fields: list[str]
    continuous_fields: list[str]
    vocab: ClinicalVocabulary
    stats: dict[str, FieldStats]
    patients: dict[str, RawPatient]          # raw clinical meta, no volume attached
    volumes: dict[str, np.ndarray]           # preprocessed 8x96x96 in [0,1]
    split: dict[str, str]
    split_seed: int
    split_ratios: tuple[float, float, float]
    split_fold: int
    samples: list[Sample] = field(default_factory=list)

    def patient_ids(self, split: str | None = None) -> list[str]:
        ids = sorted(self.patients)
        if split is None:
            return ids
        return [p for p in ids if self.split[p] == split]

    def sample_volume(self, sample: Sample) -> np.ndarray:
        return augment_volume(self.volumes[sample.patient_id], sample.aug_id)

    def select(self, split: str, uncensored_only: bool = False, augmented: bool = False) -> list[Sample]:
        out = []
        for s in self.samples:
            if self.split[s.patient_id] != split:
                continue
            if uncensored_only and s.event != 1:
                continue
            if not augmented and s.aug_id != 0:
                continue
            out.append(s)
        return out


def check_ratios(ratios) -> tuple[float, float, float]:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    return ratios


def assign_splits(patient_ids, seed: int, ratios, fold: int) -> dict[str, str]:
    """Deterministic patient-level split with rotating test folds.

    The held-out portion rotates over N_FOLDS equal chunks of a seeded
    shuffle; the remainder is divided train/val by the first two ratios.
    Across folds the test chunks partition the patients exactly.
    """
    ratios = check_ratios(ratios)
    if not 0 <= fold < N_FOLDS:
        raise ConfigError(f"fold must lie in [0,{N_FOLDS}), got {fold}")
    ids = sorted(patient_ids)
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    chunks = np.array_split(np.arange(len(order)), N_FOLDS)
    test = {order[i] for i in chunks[fold]}
    rest = [p for p in order if p not in test]
    n_train = int(round(len(rest) * ratios[0] / (ratios[0] + ratios[1])))
    split = {}
    for i, p in enumerate(rest):
        split[p] = "train" if i < n_train else "val"
    for p in test:
        split[p] = "test"
    counts = {name: sum(1 for v in split.values() if v == name) for name in SPLITS}
    if min(counts.values()) < 1:
        raise ConfigError(f"too few patients for a {ratios} split: got counts {counts}")
    return split


def _check_token(kind: str, value: str):
    if not value or any(ch in value for ch in " ,;\t\n"):
        raise PipelineError(f"{kind} {value!r} contains characters the manifest format reserves")


def _assemble(
    patients: dict[str, RawPatient],
    volumes: dict[str, np.ndarray],
    seed: int,
    ratios,
    fold: int,
) -> SurvivalDataset:
    ids = sorted(patients)
    split = assign_splits(ids, seed, ratios, fold)
    categorical_fields = sorted(patients[ids[0]].categorical)
    for pid in ids:
        _check_token("patient id", pid)
        if sorted(patients[pid].categorical) != categorical_fields:
            raise PipelineError(f"patient {pid} has inconsistent categorical fields")
        for item in patients[pid].items:
            _check_token("clinical item", item)

    is_train = [split[p] == "train" for p in ids]
    ages, age_mean = impute_ages([patients[p].age for p in ids], is_train)
    age_by_pid = dict(zip(ids, ages))

    train_ages = [age_by_pid[p] for p in ids if split[p] == "train"]
    age_mu, age_sd = zscore_fit(train_ages)
    train_days = [patients[p].survival_days for p in ids if split[p] == "train"]
    days_lo, days_hi = minmax_fit(train_days)
    stats = {
        "age": FieldStats(min=float(min(train_ages)), max=float(max(train_ages)), mean=age_mu, std=age_sd),
        "survival_days": FieldStats(
            min=days_lo, max=days_hi,
            mean=float(np.mean(train_days)), std=float(np.std(train_days)),
        ),
    }

    vocab = ClinicalVocabulary(
        items={v: i for i, v in enumerate(sorted({it for p in patients.values() for it in p.items}))}
    )

    samples = []
    for pid in ids:
        p = patients[pid]
        tokens = vocab.encode_items(p.items)
        covariates = {"age": float(zscore_apply(age_by_pid[pid], age_mu, age_sd))}
        time_norm = float(minmax_apply(p.survival_days, days_lo, days_hi))
        for aug_id in range(len(AUGMENTATIONS)):
            samples.append(Sample(pid, aug_id, tokens, covariates, time_norm, p.event))

    return SurvivalDataset(
        categorical_fields=categorical_fields,
        continuous_fields=["age"],
        vocab=vocab,
        stats=stats,
        patients={pid: RawPatient(pid, dict(patients[pid].categorical), patients[pid].age,
                                  patients[pid].survival_days, patients[pid].event)
                  for pid in ids},
        volumes=volumes,
        split=split,
        split_seed=int(seed),
        split_ratios=check_ratios(ratios),
        split_fold=int(fold),
        samples=samples,
    )


def build_dataset(raw_patients: list[RawPatient], seed: int, ratios=(0.6, 0.2, 0.2), fold: int = 0) -> SurvivalDataset:
    """Preprocess raw patients (volumes included) into a dataset."""
    if len({p.patient_id for p in raw_patients}) != len(raw_patients):
        raise PipelineError("duplicate patient ids")
    volumes = {}
    for p in raw_patients:
        if p.volume is None:
            raise PipelineError(f"patient {p.patient_id} has no volume")
        volumes[p.patient_id] = normalize_volume(p.volume)
    patients = {p.patient_id: RawPatient(p.patient_id, dict(p.categorical), p.age, p.survival_days, p.event)
                for p in raw_patients}
    return _assemble(patients, volumes, seed, ratios, fold)


def apply_split(dataset: SurvivalDataset, seed: int, ratios, fold: int) -> SurvivalDataset:
    """Re-split an existing dataset; statistics and normalized targets are
    recomputed from the new training split (volumes are reused as stored)."""
    if (
        dataset.split_seed == int(seed)
        and dataset.split_ratios == check_ratios(ratios)
        and dataset.split_fold == int(fold)
    ):
        return dataset
    return _assemble(dataset.patients, dataset.volumes, seed, ratios, fold)


# ---------------------------------------------------------------------------
# dataset bundle on disk

_MANIFEST_MAGIC = "PSND"
_MANIFEST_VERSION = 1


def _manifest_lines(ds: SurvivalDataset) -> list[str]:
    lines = [
        f"format: {_MANIFEST_MAGIC}",
        f"version: {_MANIFEST_VERSION}",
        f"categorical_fields: {','.join(ds.categorical_fields)}",
        f"continuous_fields: {','.join(ds.continuous_fields)}",
        f"patients: {len(ds.patients)}",
        f"samples: {len(ds.samples)}",
        f"split_seed: {ds.split_seed}",
        f"split_ratios: {','.join(repr(r) for r in ds.split_ratios)}",
        f"split_fold: {ds.split_fold}",
        f"vocab_size: {ds.vocab.size}",
    ]
    inverse = {i: item for item, i in ds.vocab.items.items()}
    for i in range(ds.vocab.size):
        lines.append(f"vocab.{i}: {inverse[i]}")
    for name in sorted(ds.stats):
        s = ds.stats[name]
        lines.append(
            f"stat.{name}: min={s.min!r} max={s.max!r} mean={s.mean!r} std={s.std!r}"
        )
    for pid in sorted(ds.patients):
        p = ds.patients[pid]
        age = "missing" if p.age is None else repr(float(p.age))
        lines.append(
            f"patient.{pid}: split={ds.split[pid]} volume=volumes/{pid}.psnv "
            f"age={age} days={float(p.survival_days)!r} event={p.event} "
            f"items={','.join(p.items)}"
        )
    for i, s in enumerate(ds.samples):
        cov = ";".join(f"{k}={s.covariates[k]!r}" for k in sorted(s.covariates))
        lines.append(
            f"sample.{i}: patient={s.patient_id} aug={s.aug_id} "
            f"tokens={','.join(str(t) for t in s.tokens)} cov={cov} "
            f"target={s.time_norm!r} event={s.event}"
        )
    return lines


def save_dataset(ds: SurvivalDataset, path):
    root = Path(path)
    (root / "volumes").mkdir(parents=True, exist_ok=True)
    (root / "manifest.txt").write_text("\n".join(_manifest_lines(ds)) + "\n", encoding="utf-8")
    for pid in sorted(ds.volumes):
        save_volume(root / "volumes" / f"{pid}.psnv", ds.volumes[pid])


def _parse_kv(line: str, lineno: int):
    if ": " not in line:
        raise FormatError(f"manifest line {lineno}: expected 'key: value', got {line!r}")
    key, value = line.split(": ", 1)
    return key, value


def _parse_fields(value: str) -> dict[str, str]:
    out = {}
    for part in value.split(" "):
        k, v = part.split("=", 1)
        out[k] = v
    return out


def load_dataset(path) -> SurvivalDataset:
    root = Path(path)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise FormatError(f"{root}: no manifest.txt found")
    lines = manifest.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("format: "):
        raise FormatError(f"{manifest}: missing format line")
    if lines[0] != f"format: {_MANIFEST_MAGIC}":
        raise FormatError(f"{manifest}: expected format magic {_MANIFEST_MAGIC}, got {lines[0]!r}")
    header: dict[str, str] = {}
    vocab_items: dict[str, int] = {}
    stats: dict[str, FieldStats] = {}
    patients: dict[str, RawPatient] = {}
    split: dict[str, str] = {}
    samples: list[Sample] = []
    for lineno, line in enumerate(lines, start=1):
        if not line:
            continue
        key, value = _parse_kv(line, lineno)
        if key.startswith("vocab."):
            vocab_items[value] = int(key.split(".", 1)[1])
        elif key.startswith("stat."):
            kv = _parse_fields(value)
            stats[key.split(".", 1)[1]] = FieldStats(
                min=float(kv["min"]), max=float(kv["max"]),
                mean=float(kv["mean"]), std=float(kv["std"]),
            )
        elif key.startswith("patient."):
            pid = key.split(".", 1)[1]
            kv = _parse_fields(value)
            categorical = dict(item.split("=", 1) for item in kv["items"].split(","))
            age = None if kv["age"] == "missing" else float(kv["age"])
            patients[pid] = RawPatient(pid, categorical, age, float(kv["days"]), int(kv["event"]))
            split[pid] = kv["split"]
            if kv["split"] not in SPLITS:
                raise FormatError(f"manifest line {lineno}: bad split {kv['split']!r}")
        elif key.startswith("sample."):
            kv = _parse_fields(value)
            covariates = {}
            if kv["cov"]:
                for part in kv["cov"].split(";"):
                    k, v = part.split("=", 1)
                    covariates[k] = float(v)
            tokens = np.array([int(t) for t in kv["tokens"].split(",")], dtype=np.int64)
            samples.append(
                Sample(kv["patient"], int(kv["aug"]), tokens, covariates,
                       float(kv["target"]), int(kv["event"]))
            )
        else:
            header[key] = value
    if int(header.get("version", "-1")) != _MANIFEST_VERSION:
        raise FormatError(f"{manifest}: unsupported version {header.get('version')!r}")
    volumes = {}
    for pid in patients:
        volumes[pid] = load_volume(root / "volumes" / f"{pid}.psnv")
    ds = SurvivalDataset(
        categorical_fields=header["categorical_fields"].split(","),
        continuous_fields=header["continuous_fields"].split(","),
        vocab=ClinicalVocabulary(items=vocab_items),
        stats=stats,
        patients=patients,
        volumes=volumes,
        split=split,
        split_seed=int(header["split_seed"]),
        split_ratios=tuple(float(r) for r in header["split_ratios"].split(",")),
        split_fold=int(header["split_fold"]),
        samples=samples,
    )
    if len(ds.samples) != int(header["samples"]) or len(ds.patients) != int(header["patients"]):
        raise FormatError(f"{manifest}: entry counts disagree with header")
    return ds
