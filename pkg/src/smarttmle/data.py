"""Trial data model: subject records, regimes, the step-up rule and CSV ingestion."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, TextIO, Union

import numpy as np

CSV_COLUMNS = ("id", "w0", "y0", "a0", "c1", "w1", "y1", "a1", "c2", "w2", "y2", "c3", "y3")

CONTROL, TEXT, WEBAPP, ECOACH = 0, 1, 2, 3
STAGE0_ARMS = (CONTROL, TEXT, WEBAPP)
STAGE1_ARMS = (CONTROL, TEXT, WEBAPP, ECOACH)

DEFAULT_COUNT_CAP = 1000


class DataError(ValueError):
    """Raised for malformed rows or data violating the trial invariants."""

    def __init__(self, message: str, row: Optional[int] = None, ids: Iterable[str] = ()):
        self.row = row
        self.ids = list(ids)
        super().__init__(message)


def evaluate_rule_d(a0: int, y0: int, y1: int) -> int:
    """Stage-1 arm under the step-up rule: non-improvers on an active arm move to eCoaching."""
    if a0 not in STAGE0_ARMS:
        raise DataError(f"invalid stage-0 arm code {a0!r}")
    if y0 < 0 or y1 < 0:
        raise DataError("counts must be nonnegative")
    if a0 == CONTROL:
        return CONTROL
    if y1 < y0 or y1 == 0:
        return a0
    return ECOACH


def rule_d(a0, y0, y1) -> np.ndarray:
    """Vectorised :func:`evaluate_rule_d`. NaN counts yield NaN."""
    a0 = np.asarray(a0, dtype=float)
    y0 = np.asarray(y0, dtype=float)
    y1 = np.asarray(y1, dtype=float)
    eligible = (a0 != CONTROL) & (y1 >= y0) & (y1 != 0)
    out = np.where(eligible, float(ECOACH), a0)
    return np.where(np.isnan(y0) | np.isnan(y1), np.nan, out)


def step_up_eligible(a0, y0, y1) -> np.ndarray:
    a0 = np.asarray(a0, dtype=float)
    y0 = np.asarray(y0, dtype=float)
    y1 = np.asarray(y1, dtype=float)
    with np.errstate(invalid="ignore"):
        return (a0 != CONTROL) & (y1 >= y0) & (y1 != 0)


@dataclass(frozen=True)
class Regime:
    """One of the five hypothetical interventions.

    ``stage1_policy`` is either the string ``"step_up"`` (apply the rule d) or
    an arm code for a static assignment.
    """

    label: str
    stage0_arm: int
    stage1_policy: Union[str, int]

    @property
    def is_step_up(self) -> bool:
        return self.stage1_policy == "step_up"

    def stage1_arm(self, a0: int, y0: int, y1: int) -> int:
        if self.is_step_up:
            return evaluate_rule_d(a0, y0, y1)
        return int(self.stage1_policy)

    def policy_arms(self, a0, y0, y1) -> np.ndarray:
        """Stage-1 arm obtained by applying this regime's policy *family* to arm ``a0``.

        Step-up regimes map ``a0`` to ``d(a0, y0, y1)``; static regimes keep
        ``a0``. Used to pool regressions over the regime's sister regimes.
        """
        if self.is_step_up:
            return rule_d(a0, y0, y1)
        a0 = np.asarray(a0, dtype=float)
        return np.where(np.isnan(np.asarray(y1, dtype=float)), np.nan, a0)

    def relabel(self, arm_map: dict) -> "Regime":
        policy = self.stage1_policy if self.is_step_up else arm_map[int(self.stage1_policy)]
        return Regime(self.label, arm_map[self.stage0_arm], policy)


REGIMES = {
    "I": Regime("I", CONTROL, CONTROL),
    "II": Regime("II", TEXT, "step_up"),
    "IIA": Regime("IIA", TEXT, TEXT),
    "III": Regime("III", WEBAPP, "step_up"),
    "IIIA": Regime("IIIA", WEBAPP, WEBAPP),
}

# Table 2 contrasts, as (minuend, subtrahend).
CONTRASTS = (
    ("II", "I"),
    ("III", "I"),
    ("IIA", "I"),
    ("IIIA", "I"),
    ("II", "IIA"),
    ("III", "IIIA"),
)


def get_regime(label: Union[str, Regime]) -> Regime:
    if isinstance(label, Regime):
        return label
    try:
        return REGIMES[label.upper()]
    except KeyError:
        raise ValueError(f"unknown regime {label!r}; expected one of {sorted(REGIMES)}") from None


@dataclass(frozen=True)
class SubjectRecord:
    id: str
    w0: float
    y0: int
    a0: int
    c1: int
    w1: Optional[float] = None
    y1: Optional[int] = None
    a1: Optional[int] = None
    c2: int = 0
    w2: Optional[float] = None
    y2: Optional[int] = None
    c3: int = 0
    y3: Optional[int] = None

    @property
    def cumulative_y(self) -> Optional[int]:
        if self.c3 != 1:
            return None
        return self.y1 + self.y2 + self.y3


def follows_regime(record: SubjectRecord, regime: Regime, through_stage: int) -> bool:
    """Arm concordance with ``regime`` through stage 0 or 1 (attendance is not checked)."""
    if through_stage not in (0, 1):
        raise ValueError("through_stage must be 0 or 1")
    if record.a0 != regime.stage0_arm:
        return False
    if through_stage == 0:
        return True
    if record.a1 is None or record.y1 is None:
        return False
    return record.a1 == regime.stage1_arm(record.a0, record.y0, record.y1)


def _nan_if_none(x):
    return np.nan if x is None else x


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """Columnar, validated trial data. Absent values are NaN."""

    ids: np.ndarray
    w0: np.ndarray
    y0: np.ndarray
    a0: np.ndarray
    c1: np.ndarray
    w1: np.ndarray
    y1: np.ndarray
    a1: np.ndarray
    c2: np.ndarray
    w2: np.ndarray
    y2: np.ndarray
    c3: np.ndarray
    y3: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in CSV_COLUMNS[1:]:
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        ids = np.asarray(self.ids, dtype=object)
        ids.setflags(write=False)
        object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return len(self.ids)

    def __len__(self) -> int:
        return self.n

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrialDataset) or other.n != self.n:
            return False
        if list(self.ids) != list(other.ids):
            return False
        return all(
            np.array_equal(getattr(self, c), getattr(other, c), equal_nan=True)
            for c in CSV_COLUMNS[1:]
        )

    @property
    def cumulative_y(self) -> np.ndarray:
        return self.y1 + self.y2 + self.y3

    def records(self) -> Iterator[SubjectRecord]:
        for i in range(self.n):
            yield self.record(i)

    def record(self, i: int) -> SubjectRecord:
        def opt(arr, cast):
            v = arr[i]
            return None if np.isnan(v) else cast(v)

        return SubjectRecord(
            id=str(self.ids[i]),
            w0=float(self.w0[i]),
            y0=int(self.y0[i]),
            a0=int(self.a0[i]),
            c1=int(self.c1[i]),
            w1=opt(self.w1, float),
            y1=opt(self.y1, int),
            a1=opt(self.a1, int),
            c2=int(self.c2[i]),
            w2=opt(self.w2, float),
            y2=opt(self.y2, int),
            c3=int(self.c3[i]),
            y3=opt(self.y3, int),
        )

    def subset(self, mask) -> "TrialDataset":
        cols = {c: getattr(self, c)[mask] for c in CSV_COLUMNS[1:]}
        return TrialDataset(ids=self.ids[mask], metadata=dict(self.metadata), **cols)

    def arm_counts(self) -> dict:
        return {a: int(np.sum(self.a0 == a)) for a in STAGE0_ARMS}

    @classmethod
    def from_records(cls, records: Iterable[SubjectRecord], **kwargs) -> "TrialDataset":
        records = list(records)
        cols = {c: np.array([_nan_if_none(getattr(r, c)) for r in records], dtype=float)
                for c in CSV_COLUMNS[1:]}
        return from_arrays(ids=[r.id for r in records], **cols, **kwargs)


def _check_monotone(d: dict, coerce: bool) -> list:
    c1, c2, c3 = d["c1"], d["c2"], d["c3"]
    bad = ((c2 == 1) & (c1 != 1)) | ((c3 == 1) & (c2 != 1))
    if coerce and bad.any():
        c2 = np.where(c1 == 1, c2, 0.0)
        c3 = np.where(c2 == 1, c3, 0.0)
        d["c2"], d["c3"] = c2, c3
        for name, ind in (("w2", c2), ("y2", c2), ("y3", c3)):
            d[name] = np.where(ind == 1, d[name], np.nan)
        return []
    return list(np.flatnonzero(bad))


def from_arrays(
    ids,
    *,
    count_cap: int = DEFAULT_COUNT_CAP,
    coerce_monotone: bool = False,
    metadata: Optional[dict] = None,
    **columns,
) -> TrialDataset:
    """Build a validated :class:`TrialDataset` from column arrays.

    Raises
    ------
    DataError
        If any subject violates the record invariants; ``ids`` lists them.
    """
    ids = np.asarray(list(ids), dtype=object)
    n = len(ids)
    d = {}
    for c in CSV_COLUMNS[1:]:
        arr = np.asarray(columns[c], dtype=float).reshape(-1)
        if arr.shape[0] != n:
            raise DataError(f"column {c} has length {arr.shape[0]}, expected {n}")
        d[c] = arr
    if len(set(ids.tolist())) != n:
        seen, dup = set(), []
        for s in ids:
            if s in seen:
                dup.append(s)
            seen.add(s)
        raise DataError("duplicate subject ids", ids=dup)

    bad = np.zeros(n, dtype=bool)
    for c in ("w0", "y0", "a0", "c1", "c2", "c3"):
        bad |= np.isnan(d[c])
    for c in ("c1", "c2", "c3"):
        bad |= ~np.isin(d[c], (0, 1))
    bad |= ~np.isin(d["a0"], STAGE0_ARMS)
    for c in ("y0", "y1", "y2", "y3"):
        v = d[c]
        with np.errstate(invalid="ignore"):
            bad |= ~np.isnan(v) & ((v < 0) | (v != np.round(v)) | (v > count_cap))
    if bad.any():
        raise DataError("invalid values (codes, counts or count cap)", ids=ids[bad])

    nonmono = _check_monotone(d, coerce_monotone)
    if nonmono:
        raise DataError("non-monotone missingness", ids=ids[nonmono])

    presence = (
        ("w1", "c1"), ("y1", "c1"), ("a1", "c1"),
        ("w2", "c2"), ("y2", "c2"), ("y3", "c3"),
    )
    for col, ind in presence:
        mismatch = np.isnan(d[col]) == (d[ind] == 1)
        bad |= mismatch
    if bad.any():
        raise DataError("fields present/absent inconsistently with attendance", ids=ids[bad])

    att = d["c1"] == 1
    a0, a1 = d["a0"], d["a1"]
    elig = step_up_eligible(a0, d["y0"], d["y1"])
    with np.errstate(invalid="ignore"):
        ok = np.where(elig, (a1 == a0) | (a1 == ECOACH), a1 == a0)
    bad |= att & ~ok
    if bad.any():
        raise DataError("stage-1 arm inconsistent with the step-up design", ids=ids[bad])

    return TrialDataset(ids=ids, metadata=dict(metadata or {}), **d)


def _parse_field(raw: str, kind: type, rownum: int, name: str):
    raw = raw.strip()
    if raw == "":
        return np.nan
    try:
        if kind is int:
            v = float(raw)
            if v != math.floor(v):
                raise ValueError
            return v
        return float(raw)
    except ValueError:
        raise DataError(f"row {rownum}: cannot parse {name}={raw!r}", row=rownum) from None


_KINDS = {"w0": float, "w1": float, "w2": float}


def parse_dataset(
    source: Union[str, TextIO],
    *,
    count_cap: int = DEFAULT_COUNT_CAP,
    coerce_monotone: bool = False,
) -> TrialDataset:
    """Parse the trial CSV schema from a string or text stream.

    Row numbers in errors count the header as row 1.
    """
    stream = io.StringIO(source) if isinstance(source, str) else source
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("empty input: missing header") from None
    header = [h.strip() for h in header]
    if tuple(header) != CSV_COLUMNS:
        raise DataError(f"header must be {','.join(CSV_COLUMNS)}; got {','.join(header)}", row=1)
    ids, cols = [], {c: [] for c in CSV_COLUMNS[1:]}
    for rownum, row in enumerate(reader, start=2):
        if not row or all(not f.strip() for f in row):
            continue
        if len(row) != len(CSV_COLUMNS):
            raise DataError(
                f"row {rownum}: expected {len(CSV_COLUMNS)} fields, got {len(row)}", row=rownum
            )
        if not row[0].strip():
            raise DataError(f"row {rownum}: missing id", row=rownum)
        ids.append(row[0].strip())
        for name, raw in zip(CSV_COLUMNS[1:], row[1:]):
            cols[name].append(_parse_field(raw, _KINDS.get(name, int), rownum, name))
    return from_arrays(ids, count_cap=count_cap, coerce_monotone=coerce_monotone, **cols)


def read_dataset(path, **kwargs) -> TrialDataset:
    with open(path, newline="") as fh:
        return parse_dataset(fh, **kwargs)


def _fmt(v: float, integer: bool) -> str:
    if np.isnan(v):
        return ""
    if integer:
        return str(int(v))
    return repr(float(v))


def serialize_dataset(data: TrialDataset) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    cols = [getattr(data, c) for c in CSV_COLUMNS[1:]]
    integer = [_KINDS.get(c, int) is int for c in CSV_COLUMNS[1:]]
    for i in range(data.n):
        writer.writerow([data.ids[i]] + [_fmt(col[i], it) for col, it in zip(cols, integer)])
    return buf.getvalue()
