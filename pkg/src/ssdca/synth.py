"""Deterministic synthetic longitudinal endoscopy-like dataset.

Every patient looks alike at restaging (a pale, flat scar). Regrowth
patients develop a textured dark-red nodular lesion at later visits whose
radius and contrast grow with the visit index; complete responders only
keep a slowly fading scar. Lesion placement is random per image, so the two images
of a pair are never spatially aligned. Artifact overlays are drawn per image
and recorded in the manifest.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .config import ConfigError
from .data import ARTIFACT_TAGS, StudyRecord, stratified_holdout, write_manifest


@dataclass
class SynthSpec:
    n_patients: int = 32
    timepoints: int = 3
    lr_ratio: float = 0.5
    images_per_visit: int = 1
    image_size: int = 224
    artifact_probs: dict[str, float] = field(default_factory=lambda: {t: 0.15 for t in ARTIFACT_TAGS})
    test_fraction: float = 0.25
    visit_interval_days: int = 90
    start_date: str = "2020-01-06"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not isinstance(self.n_patients, int) or self.n_patients < 2:
            raise ConfigError("n_patients must be an integer >= 2", "n_patients")
        if not isinstance(self.timepoints, int) or self.timepoints < 1:
            raise ConfigError("timepoints must be an integer >= 1", "timepoints")
        if not 0.0 < self.lr_ratio < 1.0:
            raise ConfigError("lr_ratio must lie in (0, 1)", "lr_ratio")
        if not isinstance(self.images_per_visit, int) or self.images_per_visit < 1:
            raise ConfigError("images_per_visit must be an integer >= 1", "images_per_visit")
        if not isinstance(self.image_size, int) or self.image_size < 32:
            raise ConfigError("image_size must be an integer >= 32", "image_size")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in [0, 1)", "test_fraction")
        if not isinstance(self.artifact_probs, dict):
            raise ConfigError("artifact_probs must be a mapping", "artifact_probs")
        for tag, p in self.artifact_probs.items():
            if tag not in ARTIFACT_TAGS:
                raise ConfigError(f"unknown artifact tag {tag!r}", f"artifact_probs.{tag}")
            if not 0.0 <= float(p) <= 1.0:
                raise ConfigError(f"artifact probability for {tag} outside [0, 1]", f"artifact_probs.{tag}")
        try:
            dt.date.fromisoformat(self.start_date)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"start_date: {err}", "start_date") from err

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        for name in data:
            if name not in known:
                raise ConfigError(f"unknown field {name!r}", name)
        try:
            return cls(**data)
        except TypeError as err:
            raise ConfigError(str(err), "spec") from err


def _disk(size: int, cy: float, cx: float, ry: float, rx: float, angle: float, soft: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    r = np.sqrt(u * u + v * v)
    return np.clip((1.0 - r) / soft + 0.5, 0.0, 1.0)


def _blend(img: np.ndarray, alpha: np.ndarray, color) -> np.ndarray:
    a = alpha[..., None]
    return img * (1 - a) + np.asarray(color, dtype=np.float64) * a


def _background(rng: np.random.Generator, size: int, tint: np.ndarray) -> np.ndarray:
    low = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 16)
    low /= np.abs(low).max() + 1e-12
    fine = gaussian_filter(rng.standard_normal((size, size)), sigma=1.0)
    img = tint[None, None, :] * (1.0 + 0.12 * low[..., None]) + 0.02 * fine[..., None]
    # endoscope vignette
    cy, cx = rng.uniform(0.35, 0.65, size=2) * size
    yy, xx = np.mgrid[0:size, 0:size]
    d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2) / size
    return img * (1.0 - 0.55 * d[..., None] ** 2)


def _place(rng: np.random.Generator, size: int, radius: float) -> tuple[float, float]:
    margin = radius + 0.05 * size
    return tuple(rng.uniform(margin, size - margin, size=2))


def _scar(rng, img, size, strength):
    r = rng.uniform(0.11, 0.16) * size
    cy, cx = _place(rng, size, r)
    alpha = _disk(size, cy, cx, r * rng.uniform(0.7, 1.0), r, rng.uniform(0, np.pi), 0.6)
    return _blend(img, 0.55 * strength * alpha, (0.93, 0.82, 0.80))


def _lesion(rng, img, size, growth):
    """Textured nodular regrowth; returns (image, boolean lesion mask)."""
    r = (0.10 + 0.10 * growth) * size
    cy, cx = _place(rng, size, r)
    shape = _disk(size, cy, cx, r * rng.uniform(0.8, 1.0), r, rng.uniform(0, np.pi), 0.35)
    wobble = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 40)
    shape = np.clip(shape + 0.6 * wobble * (shape > 0), 0.0, 1.0)
    nodules = gaussian_filter(rng.standard_normal((size, size)), sigma=1.6)
    nodules = (nodules - nodules.min()) / (np.ptp(nodules) + 1e-12)
    alpha = (0.55 + 0.4 * growth) * shape
    img = _blend(img, alpha, (0.62, 0.12, 0.16))
    img = img + (0.35 * growth * shape * (nodules - 0.5))[..., None] * np.array([1.0, 0.55, 0.55])
    return img, shape > 0.5


def _blood(rng, img, size):
    for _ in range(rng.integers(1, 4)):
        r = rng.uniform(0.03, 0.09) * size
        cy, cx = _place(rng, size, r)
        alpha = _disk(size, cy, cx, r * rng.uniform(0.4, 1.0), r, rng.uniform(0, np.pi), 0.5)
        img = _blend(img, 0.85 * alpha, (0.42, 0.02, 0.05))
    return img


def _stool(rng, img, size):
    for _ in range(rng.integers(1, 4)):
        r = rng.uniform(0.05, 0.13) * size
        cy, cx = _place(rng, size, r)
        blob = _disk(size, cy, cx, r * rng.uniform(0.5, 1.0), r, rng.uniform(0, np.pi), 0.4)
        blob = np.clip(blob + 0.5 * gaussian_filter(rng.standard_normal((size, size)), 3) * (blob > 0), 0, 1)
        img = _blend(img, 0.95 * blob, (0.55, 0.44, 0.14))
    return img


def _telangiectasia(rng, img, size):
    canvas = np.zeros((size, size))
    for _ in range(rng.integers(10, 26)):
        y, x = rng.uniform(0, size, size=2)
        heading = rng.uniform(0, 2 * np.pi)
        for _ in range(rng.integers(15, 45)):
            heading += rng.normal(0, 0.4)
            y, x = y + np.sin(heading), x + np.cos(heading)
            iy, ix = int(y), int(x)
            if 0 <= iy < size and 0 <= ix < size:
                canvas[iy, ix] = 1.0
    canvas = np.clip(gaussian_filter(canvas, 0.7) * 3.0, 0, 1)
    return _blend(img, 0.8 * canvas, (0.78, 0.08, 0.14))


def _poor_quality(rng, img, size):
    img = gaussian_filter(img, sigma=(rng.uniform(3.0, 5.0),) * 2 + (0,))
    img = img * rng.uniform(1.35, 1.7) + 0.08
    spots = np.zeros((size, size))
    for _ in range(rng.integers(3, 9)):
        cy, cx = rng.uniform(0, size, size=2)
        r = rng.uniform(0.01, 0.04) * size
        spots = np.maximum(spots, _disk(size, cy, cx, r, r * rng.uniform(1, 2.5), rng.uniform(0, np.pi), 0.6))
    return _blend(img, spots, (1.0, 1.0, 1.0))


_ARTIFACT_FNS = {"blood": _blood, "stool": _stool, "TLG": _telangiectasia, "PQ": _poor_quality}


def render_image(
    rng: np.random.Generator, size: int, tint: np.ndarray, outcome: str, growth: float, artifacts: list[str]
) -> tuple[np.ndarray, np.ndarray]:
    """One uint8 RGB image and its lesion mask. ``growth`` in [0, 1]."""
    img = _background(rng, size, tint)
    mask = np.zeros((size, size), dtype=bool)
    img = _scar(rng, img, size, 1.0 - 0.4 * growth if outcome == "cCR" else 1.0)
    if outcome == "LR" and growth > 0:
        img, mask = _lesion(rng, img, size, growth)
    for tag in ARTIFACT_TAGS:
        if tag in artifacts:
            img = _ARTIFACT_FNS[tag](rng, img, size)
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8), mask


def synth_generate(spec: SynthSpec, seed: int, out_dir: str | Path) -> Path:
    """Write images, lesion masks and ``manifest.jsonl``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(seed)
    cohort_rng, *patient_seeds = [np.random.default_rng(s) for s in root.spawn(spec.n_patients + 1)]

    n_lr = int(round(spec.lr_ratio * spec.n_patients))
    outcomes = {f"P{i:03d}": ("LR" if i < n_lr else "cCR") for i in range(spec.n_patients)}
    test_ids = stratified_holdout({p: int(o == "LR") for p, o in outcomes.items()}, spec.test_fraction, cohort_rng)
    start = dt.date.fromisoformat(spec.start_date)
    probs = {t: float(spec.artifact_probs.get(t, 0.0)) for t in ARTIFACT_TAGS}

    records = []
    for (pid, outcome), rng in zip(outcomes.items(), patient_seeds):
        tint = np.array([0.80, 0.45, 0.42]) + rng.uniform(-0.05, 0.05, size=3)
        first = start + dt.timedelta(days=int(rng.integers(0, 60)))
        for tp in range(spec.timepoints):
            date = first + dt.timedelta(days=spec.visit_interval_days * tp)
            growth = tp / (spec.timepoints - 1) if spec.timepoints > 1 else 0.0
            for k in range(spec.images_per_visit):
                tags = [t for t in ARTIFACT_TAGS if probs[t] > 0 and rng.random() < probs[t]]
                pixels, mask = render_image(rng, spec.image_size, tint, outcome, growth, tags)
                image_id = f"{pid}_t{tp}_{k}"
                rel = f"images/{image_id}.png"
                Image.fromarray(pixels).save(out / rel)
                mask_rel = None
                if mask.any():
                    mask_rel = f"masks/{image_id}.png"
                    Image.fromarray(mask.astype(np.uint8) * 255).save(out / mask_rel)
                records.append(
                    StudyRecord(
                        patient_id=pid,
                        image_path=rel,
                        acquisition_date=date,
                        timepoint_index=tp,
                        outcome=outcome,
                        artifacts=frozenset(tags),
                        image_id=image_id,
                        mask_path=mask_rel,
                        cohort="test" if pid in test_ids else "dev",
                    )
                )
    path = out / "manifest.jsonl"
    write_manifest(records, path)
    return path
