"""File formats, manifest handling, seeded randomness and run configuration.

Tensor files use a tiny little-endian container::

    magic  b"OCT1"            4 bytes
    dtype  0=u8, 1=u16, 2=f32 1 byte
    ndim   1..4               1 byte
    dims   uint32 LE each     4*ndim bytes
    data   row-major payload

Everything random in the package draws from :class:`Rng`, which wraps numpy's
PCG64 bit generator. Module sub-seeds are ``seed ^ MODULE_SALT[name]``.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"OCT1"
FORMAT_VERSION = "OCT1"
MANIFEST_VERSION = "manifest-v1"

_DTYPES = {0: np.dtype("<u1"), 1: np.dtype("<u2"), 2: np.dtype("<f4")}
_CODES = {np.dtype(np.uint8): 0, np.dtype(np.uint16): 1, np.dtype(np.float32): 2}


class OctadError(Exception):
    """Base class for all package errors."""


class ValidationError(OctadError, ValueError):
    """Input data or arguments violate a documented contract."""


class TensorFormatError(ValidationError):
    pass


class BadMagicError(TensorFormatError):
    pass


class BadDtypeError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class ManifestError(ValidationError):
    pass


class MissingColumnError(ManifestError):
    pass


class LabelYearsMismatchError(ManifestError):
    pass


class DuplicateRecordError(ManifestError):
    pass


class ConfigError(ValidationError):
    pass


# --------------------------------------------------------------------------
# tensors


def write_tensor(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype not in _CODES:
        raise BadDtypeError(f"unsupported dtype {arr.dtype}; expected u8, u16 or f32")
    if not 1 <= arr.ndim <= 4:
        raise TensorFormatError(f"ndim must be in 1..4, got {arr.ndim}")
    if any(d < 1 for d in arr.shape):
        raise TensorFormatError(f"all dims must be >= 1, got {arr.shape}")
    code = _CODES[arr.dtype]
    header = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(header + payload)


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}")
    code, ndim = buf[4], buf[5]
    if code not in _DTYPES:
        raise BadDtypeError(f"dtype code {code} > 2")
    if not 1 <= ndim <= 4:
        raise TensorFormatError(f"ndim {ndim} outside 1..4")
    end = 6 + 4 * ndim
    if len(buf) < end:
        raise TruncatedPayloadError("header shorter than declared ndim")
    dims = struct.unpack(f"<{ndim}I", buf[6:end])
    if any(d < 1 for d in dims):
        raise TensorFormatError(f"zero extent in dims {dims}")
    dtype = _DTYPES[code]
    nbytes = math.prod(dims) * dtype.itemsize
    if len(buf) - end < nbytes:
        raise TruncatedPayloadError(f"payload has {len(buf) - end} bytes, expected {nbytes}")
    if len(buf) - end > nbytes:
        raise TensorFormatError("trailing bytes after payload")
    data = np.frombuffer(buf, dtype=dtype, count=math.prod(dims), offset=end)
    return data.reshape(dims).astype(dtype.newbyteorder("="))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# --------------------------------------------------------------------------
# manifest

MANIFEST_COLUMNS = (
    "subject_id",
    "eye",
    "age",
    "sex",
    "instance",
    "years_to_diagnosis",
    "label",
    "image_path",
)


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    eye: str
    age: int
    sex: str
    instance: int
    years_to_diagnosis: float | None
    label: str
    image_path: str

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.subject_id, self.eye, self.instance)

    @property
    def is_ad(self) -> bool:
        return self.label == "AD"


@dataclass(frozen=True)
class Manifest:
    records: tuple[SubjectRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        validate_records(self.records)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def subjects(self) -> list[str]:
        return sorted({r.subject_id for r in self.records})

    def by_subject(self) -> dict[str, list[SubjectRecord]]:
        out: dict[str, list[SubjectRecord]] = {}
        for r in self.records:
            out.setdefault(r.subject_id, []).append(r)
        return out

    def filter(self, pred) -> "Manifest":
        return Manifest(tuple(r for r in self.records if pred(r)))


def validate_records(records: Iterable[SubjectRecord]) -> None:
    seen = set()
    for r in records:
        if r.eye not in ("L", "R"):
            raise ManifestError(f"{r.subject_id}: eye must be L or R, got {r.eye!r}")
        if r.sex not in ("F", "M"):
            raise ManifestError(f"{r.subject_id}: sex must be F or M, got {r.sex!r}")
        if r.instance not in (0, 1):
            raise ManifestError(f"{r.subject_id}: instance must be 0 or 1, got {r.instance!r}")
        if r.label not in ("AD", "CN"):
            raise ManifestError(f"{r.subject_id}: label must be AD or CN, got {r.label!r}")
        if not 18 <= r.age <= 110:
            raise ManifestError(f"{r.subject_id}: age {r.age} outside 18..110")
        if (r.label == "AD") != (r.years_to_diagnosis is not None):
            raise LabelYearsMismatchError(
                f"{r.subject_id}: label={r.label} inconsistent with years_to_diagnosis="
                f"{r.years_to_diagnosis}"
            )
        if r.years_to_diagnosis is not None and not (
            math.isfinite(r.years_to_diagnosis) and r.years_to_diagnosis >= 0
        ):
            raise ManifestError(f"{r.subject_id}: years_to_diagnosis must be finite and >= 0")
        if r.key in seen:
            raise DuplicateRecordError(f"duplicate record {r.key}")
        seen.add(r.key)


def _parse_int(value: str, what: str, row: int) -> int:
    try:
        return int(value)
    except ValueError:
        raise ManifestError(f"row {row}: non-numeric {what} {value!r}") from None


def parse_manifest(text: str) -> Manifest:
    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames or []
    missing = [c for c in MANIFEST_COLUMNS if c not in header]
    if missing:
        raise MissingColumnError(f"missing column(s): {', '.join(missing)}")
    extra = [c for c in header if c not in MANIFEST_COLUMNS]
    if extra:
        raise ManifestError(f"unexpected column(s): {', '.join(extra)}")
    records = []
    for i, row in enumerate(reader, start=2):
        if None in row or any(v is None for v in row.values()):
            raise ManifestError(f"row {i}: expected {len(MANIFEST_COLUMNS)} fields")
        years_txt = row["years_to_diagnosis"].strip()
        try:
            years = float(years_txt) if years_txt else None
        except ValueError:
            raise ManifestError(f"row {i}: non-numeric years_to_diagnosis {years_txt!r}") from None
        records.append(
            SubjectRecord(
                subject_id=row["subject_id"].strip(),
                eye=row["eye"].strip(),
                age=_parse_int(row["age"].strip(), "age", i),
                sex=row["sex"].strip(),
                instance=_parse_int(row["instance"].strip(), "instance", i),
                years_to_diagnosis=years,
                label=row["label"].strip(),
                image_path=row["image_path"].strip(),
            )
        )
    return Manifest(tuple(records))


def _fmt_years(y: float | None) -> str:
    return "" if y is None else repr(float(y))


def serialize_manifest(m: Manifest) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_COLUMNS)
    for r in m.records:
        w.writerow(
            [r.subject_id, r.eye, r.age, r.sex, r.instance, _fmt_years(r.years_to_diagnosis),
             r.label, r.image_path]
        )
    return buf.getvalue()


def load_manifest(path) -> Manifest:
    return parse_manifest(Path(path).read_text(encoding="utf-8"))


def save_manifest(path, m: Manifest) -> None:
    Path(path).write_text(serialize_manifest(m), encoding="utf-8")


# --------------------------------------------------------------------------
# randomness

MODULE_SALT = {
    "phantom": 0x5048414E544F4D00,
    "cohort": 0x434F484F52540000,
    "folds": 0x464F4C4453000000,
    "model": 0x4D4F44454C000000,
    "augment": 0x4155474D454E5400,
    "eval": 0x4556414C00000000,
    "explain": 0x4558504C41494E00,
}

_MASK64 = (1 << 64) - 1


def module_seed(seed: int, module: str) -> int:
    return (int(seed) & _MASK64) ^ MODULE_SALT[module]


class Rng:
    """Seeded PCG64 stream. Single owner; use :meth:`child` to fan out."""

    def __init__(self, seed: int, key: Sequence[int] = ()):
        self.seed = int(seed) & _MASK64
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def next_f64(self) -> float:
        return float(self.gen.random())

    def child(self, *key: int) -> "Rng":
        """Independent stream identified by ``key`` under this stream's seed.

        Children depend only on (seed, key), never on how much of the parent
        stream has been consumed, so work can be scheduled in any order.
        """
        return Rng(self.seed, self.key + tuple(key))

    def shuffle(self, items: Sequence) -> list:
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = int(self.next_f64() * (i + 1))
            out[i], out[j] = out[j], out[i]
        return out

    def integers(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi]."""
        return lo + min(int(self.next_f64() * (hi - lo + 1)), hi - lo)

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.next_f64()


def rng_new(seed: int) -> Rng:
    return Rng(seed)


def rng_next_f64(rng: Rng) -> float:
    return rng.next_f64()


def rng_shuffle(rng: Rng, items: Sequence) -> list:
    return rng.shuffle(items)


# --------------------------------------------------------------------------
# run configuration

CHANNEL_MODES = ("composite", "raw3", "mask3", "contour3")
PHANTOM_PRESETS = ("default", "geometry")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    learning_rate: float = 1e-3
    batch_size: int = 4
    epochs: int = 100
    swa_start_epoch: int = 80
    year_cap: float = 4.0
    channel_mode: str = "composite"
    augmentation_enabled: bool = True
    threshold_saliency: float = 0.8
    # experiment shape
    lr_grid: tuple[float, ...] = (1e-3, 1e-4, 2.7e-5)
    image_size: int = 512
    weight_decay: float = 0.01
    n_runs: int = 5
    n_outer: int = 5
    n_inner: int = 3
    # phantom cohort
    n_ad: int = 28
    n_cn: int = 30
    thinning_fraction: float = 0.4
    phantom_preset: str = "default"
    subfield_halfwidth_px: int = 42
    pooled_overlap: bool = False
    augment: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 1 <= self.swa_start_epoch < self.epochs:
            raise ConfigError("swa_start_epoch must satisfy 1 <= swa_start_epoch < epochs")
        if not 0.0 <= self.threshold_saliency <= 1.0:
            raise ConfigError("threshold_saliency must lie in [0, 1]")
        if self.channel_mode not in CHANNEL_MODES:
            raise ConfigError(f"channel_mode must be one of {CHANNEL_MODES}")
        if self.phantom_preset not in PHANTOM_PRESETS:
            raise ConfigError(f"phantom_preset must be one of {PHANTOM_PRESETS}")
        if self.year_cap <= 0:
            raise ConfigError("year_cap must be > 0")
        if self.learning_rate < 0 or any(lr < 0 for lr in self.lr_grid):
            raise ConfigError("learning rates must be >= 0")
        if not self.lr_grid:
            raise ConfigError("lr_grid must not be empty")
        if self.image_size < 32 or 512 % self.image_size:
            raise ConfigError("image_size must divide 512 and be >= 32")
        if not 0.0 <= self.thinning_fraction < 1.0:
            raise ConfigError("thinning_fraction must lie in [0, 1)")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


FAST_PROFILE = {"image_size": 64, "epochs": 10, "swa_start_epoch": 8}


def _coerce(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        k = k.strip()
        if k in out:
            raise ConfigError(f"line {n}: duplicate key {k!r}")
        out[k] = v.strip()
    return out


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    defaults = {f.name: getattr(base, f.name) for f in dataclasses.fields(RunConfig)}
    changes: dict = {}
    augment = dict(base.augment)
    for k, v in parse_kv(text).items():
        if k.startswith("augment."):
            augment[k[len("augment."):]] = _coerce(k, v, 0.0)
        elif k in defaults and k != "augment":
            changes[k] = _coerce(k, v, defaults[k])
        else:
            raise ConfigError(f"unknown config key {k!r}")
    if augment:
        changes["augment"] = augment
    return dataclasses.replace(base, **changes)


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(RunConfig):
        v = getattr(cfg, f.name)
        if f.name == "augment":
            for k in sorted(v):
                lines.append(f"augment.{k}={v[k]!r}")
            continue
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, tuple):
            v = ",".join(repr(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), base)
