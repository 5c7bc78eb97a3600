"""Manifest ingestion, longitudinal pairing, augmentation, sampling and CV splits."""

from __future__ import annotations

import datetime as dt
import json
import warnings
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch
from PIL import Image

from .config import ConfigError

ARTIFACT_TAGS = ("blood", "stool", "TLG", "PQ")
OUTCOMES = {"cCR": 0, "LR": 1}
MANIFEST_FORMAT = "ssdca-manifest"
MANIFEST_VERSION = 1

# per-channel normalization applied after resizing to the encoder resolution
PIXEL_MEAN = (0.485, 0.456, 0.406)
PIXEL_STD = (0.229, 0.224, 0.225)


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class StudyRecord:
    patient_id: str
    image_path: str
    acquisition_date: dt.date
    timepoint_index: int
    outcome: str
    artifacts: frozenset[str] = frozenset()
    image_id: str = ""
    mask_path: str | None = None
    cohort: str = "dev"

    @property
    def label(self) -> int:
        return OUTCOMES[self.outcome]

    def to_json(self) -> dict:
        d = asdict(self)
        d["acquisition_date"] = self.acquisition_date.isoformat()
        d["artifacts"] = sorted(self.artifacts)
        return d

    @classmethod
    def from_json(cls, d: dict, line_no: int = 0) -> "StudyRecord":
        try:
            date = dt.date.fromisoformat(d["acquisition_date"])
            tags = frozenset(d.get("artifacts") or ())
            rec = cls(
                patient_id=str(d["patient_id"]),
                image_path=str(d["image_path"]),
                acquisition_date=date,
                timepoint_index=int(d["timepoint_index"]),
                outcome=d["outcome"],
                artifacts=tags,
                image_id=str(d.get("image_id") or Path(d["image_path"]).stem),
                mask_path=d.get("mask_path"),
                cohort=d.get("cohort", "dev"),
            )
        except KeyError as err:
            raise ManifestError(f"line {line_no}: missing field {err.args[0]}") from err
        except (TypeError, ValueError) as err:
            raise ManifestError(f"line {line_no}: {err}") from err
        if rec.outcome not in OUTCOMES:
            raise ManifestError(f"line {line_no}: outcome must be one of {sorted(OUTCOMES)}")
        if rec.timepoint_index < 0:
            raise ManifestError(f"line {line_no}: negative timepoint_index")
        bad = rec.artifacts - set(ARTIFACT_TAGS)
        if bad:
            raise ManifestError(f"line {line_no}: unknown artifact tags {sorted(bad)}")
        if rec.cohort not in ("dev", "test"):
            raise ManifestError(f"line {line_no}: cohort must be 'dev' or 'test'")
        return rec


@dataclass(frozen=True)
class LongitudinalPair:
    pre: StudyRecord
    post: StudyRecord
    label: int

    @property
    def patient_id(self) -> str:
        return self.pre.patient_id

    @property
    def same_day_group(self) -> tuple[str, str]:
        return (self.post.patient_id, self.post.acquisition_date.isoformat())


def write_manifest(records: Iterable[StudyRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION}) + "\n")
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> list[StudyRecord]:
    """Read and validate a manifest; image/mask paths are resolved relative to it."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ManifestError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as err:
        raise ManifestError(f"{path}: bad header line") from err
    if header.get("format") != MANIFEST_FORMAT or header.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest header {header}")
    records = []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as err:
            raise ManifestError(f"line {i}: invalid JSON") from err
        if not isinstance(d, dict) or "image_path" not in d:
            raise ManifestError(f"line {i}: missing field 'image_path'")
        d["image_path"] = str(path.parent / d["image_path"])
        if d.get("mask_path"):
            d["mask_path"] = str(path.parent / d["mask_path"])
        records.append(StudyRecord.from_json(d, i))
    validate_records(records)
    return records


def validate_records(records: Sequence[StudyRecord]) -> None:
    by_patient = group_by_patient(records)
    for pid, recs in by_patient.items():
        if len({r.outcome for r in recs}) > 1:
            raise ManifestError(f"patient {pid}: records disagree on outcome")
        if len({r.cohort for r in recs}) > 1:
            raise ManifestError(f"patient {pid}: records disagree on cohort")
        dates: dict[int, set[dt.date]] = defaultdict(set)
        for r in recs:
            dates[r.timepoint_index].add(r.acquisition_date)
        for tp, ds in dates.items():
            if len(ds) > 1:
                raise ManifestError(f"patient {pid}: timepoint {tp} has several dates")
        ordered = sorted(dates)
        for a, b in zip(ordered, ordered[1:]):
            if not min(dates[a]) < min(dates[b]):
                raise ManifestError(f"patient {pid}: timepoint {b} is not dated after timepoint {a}")


def group_by_patient(records: Iterable[StudyRecord]) -> dict[str, list[StudyRecord]]:
    out: dict[str, list[StudyRecord]] = defaultdict(list)
    for r in records:
        out[r.patient_id].append(r)
    return dict(out)


def patient_outcomes(records: Iterable[StudyRecord]) -> dict[str, int]:
    return {pid: recs[0].label for pid, recs in group_by_patient(records).items()}


def build_pairs(records: Sequence[StudyRecord], mode: str, patients: Iterable[str] | None = None) -> list[LongitudinalPair]:
    """Construct longitudinal pairs labelled with the patient's final outcome.

    ``train`` emits every temporally ordered timepoint pair (restaging to
    follow-up and follow-up to later follow-up); ``test`` only restaging
    against the last available follow-up. Same-day images are paired
    exhaustively.
    """
    if mode not in ("train", "test"):
        raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")
    validate_records(records)
    keep = set(patients) if patients is not None else None
    pairs = []
    for pid, recs in sorted(group_by_patient(records).items()):
        if keep is not None and pid not in keep:
            continue
        by_tp: dict[int, list[StudyRecord]] = defaultdict(list)
        for r in recs:
            by_tp[r.timepoint_index].append(r)
        tps = sorted(by_tp)
        if len(tps) < 2:
            warnings.warn(f"patient {pid} has fewer than 2 timepoints; no pairs built", stacklevel=2)
            continue
        if mode == "train":
            tp_pairs = list(combinations(tps, 2))
        else:
            tp_pairs = [(tps[0], tps[-1])]
        for a, b in tp_pairs:
            for pre in sorted(by_tp[a], key=lambda r: r.image_id):
                for post in sorted(by_tp[b], key=lambda r: r.image_id):
                    pairs.append(LongitudinalPair(pre, post, pre.label))
    return pairs


def augment(pre: torch.Tensor, post: torch.Tensor, rng: np.random.Generator):
    """Independent random 90-degree rotation plus horizontal/vertical flips per image."""
    return augment_image(pre, rng), augment_image(post, rng)


def augment_image(img: torch.Tensor, rng: np.random.Generator, ops: tuple[int, bool, bool] | None = None) -> torch.Tensor:
    # img: (3, H, W); ops = (quarter turns, hflip, vflip)
    if ops is None:
        ops = (int(rng.integers(4)), bool(rng.integers(2)), bool(rng.integers(2)))
    k, hflip, vflip = ops
    if k:
        img = torch.rot90(img, k, dims=(1, 2))
    if hflip:
        img = torch.flip(img, dims=(2,))
    if vflip:
        img = torch.flip(img, dims=(1,))
    return img


def balanced_sampler(labels: Sequence[int], rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Indices drawn with replacement so that each class has total probability 1/2."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ConfigError("balanced sampling needs both classes present", "labels")
    n = len(labels) if n is None else n
    weights = np.zeros(len(labels))
    for c in classes:
        members = labels == c
        weights[members] = 1.0 / (len(classes) * members.sum())
    return rng.choice(len(labels), size=n, replace=True, p=weights)


@dataclass
class SplitPlan:
    folds: list[list[str]]
    seed: int = 0

    @property
    def k(self) -> int:
        return len(self.folds)

    def val_patients(self, i: int) -> list[str]:
        return list(self.folds[i])

    def train_patients(self, i: int) -> list[str]:
        return [p for j, f in enumerate(self.folds) if j != i for p in f]


def stratified_kfold(outcomes: dict[str, int], k: int = 5, seed: int = 0) -> SplitPlan:
    """Patient-level stratified folds.

    Patients of each class are shuffled and dealt round-robin; the dealing
    position carries over between classes so fold sizes stay within one.
    """
    by_class: dict[int, list[str]] = defaultdict(list)
    for pid in sorted(outcomes):
        by_class[outcomes[pid]].append(pid)
    for c, members in by_class.items():
        if len(members) < k:
            raise ConfigError(f"class {c} has {len(members)} patients, fewer than k={k}", "k")
    rng = np.random.default_rng(seed)
    folds: list[list[str]] = [[] for _ in range(k)]
    pos = 0
    for c in sorted(by_class):
        members = list(by_class[c])
        rng.shuffle(members)
        for pid in members:
            folds[pos % k].append(pid)
            pos += 1
    return SplitPlan([sorted(f) for f in folds], seed)


def stratified_holdout(outcomes: dict[str, int], fraction: float, rng: np.random.Generator) -> set[str]:
    """Pick ``round(fraction * n_c)`` patients from each class."""
    chosen: set[str] = set()
    for c in sorted(set(outcomes.values())):
        members = sorted(p for p, o in outcomes.items() if o == c)
        n = int(round(fraction * len(members)))
        chosen.update(rng.permutation(members)[:n].tolist())
    return chosen


def load_image(path: str | Path, image_size: int) -> torch.Tensor:
    """PNG -> bilinear resize -> (3, S, S) float tensor normalized per channel."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (image_size, image_size):
            im = im.resize((image_size, image_size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(PIXEL_MEAN, np.float32)) / np.asarray(PIXEL_STD, np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def load_mask(path: str | Path | None, image_size: int) -> np.ndarray:
    if not path:
        return np.zeros((image_size, image_size), dtype=bool)
    with Image.open(path) as im:
        im = im.convert("L")
        if im.size != (image_size, image_size):
            im = im.resize((image_size, image_size), Image.NEAREST)
        return np.asarray(im) > 127


@dataclass
class ImageStore:
    """Decodes each image once and keeps the normalized tensor in memory."""

    image_size: int
    _cache: dict[str, torch.Tensor] = field(default_factory=dict)

    def get(self, rec: StudyRecord) -> torch.Tensor:
        key = rec.image_path
        if key not in self._cache:
            self._cache[key] = load_image(key, self.image_size)
        return self._cache[key]

    def batch(
        self, pairs: Sequence[LongitudinalPair], rng: np.random.Generator | None = None
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        pres, posts = [], []
        for p in pairs:
            a, b = self.get(p.pre), self.get(p.post)
            if rng is not None:
                a, b = augment(a, b, rng)
            pres.append(a)
            posts.append(b)
        labels = torch.tensor([p.label for p in pairs], dtype=torch.float32)
        return torch.stack(pres), torch.stack(posts), labels


def iter_batches(items: Sequence, size: int) -> Iterator[Sequence]:
    for i in range(0, len(items), size):
        yield items[i : i + size]
