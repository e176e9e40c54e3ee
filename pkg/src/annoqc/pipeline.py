"""File-level pipeline stages behind the command line.

Directory layout
----------------
Input (raw annotations)::

    <input>/<image_id>/<annotator_id>.png
    <input>/<image_id>/_background.png      optional

Output::

    <output>/masks/<image_id>/<annotator_id>.png     normalized 0/255 masks
    <output>/masks/<image_id>/manifest.json
    <output>/agreement/<image_id>_matrix.csv
    <output>/agreement/<image_id>_medians.csv
    <output>/agreement/<image_id>_pairwise.csv       long-format score distribution
    <output>/filter/<image_id>_report.json
    <output>/filter/<image_id>_included.txt
    <output>/consensus/{all,filtered}/<image_id>_<map>.png
    <output>/consensus/{all,filtered}/summary.json
    <output>/run_summary.json                        written by ``report``

All paths written into documents are relative to ``<output>`` and no
document carries a timestamp, so identical inputs give identical trees.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .agreement import (
    DEFAULT_THRESHOLD,
    AnnotationSet,
    FilterReport,
    filter_annotators,
    median_agreement,
    pairwise_matrix,
)
from .consensus import all_maps
from .masks import (
    AlphaPolicy,
    ImageError,
    load_mask,
    load_raw,
    remove_speckles,
    binarize,
    save_gray,
    save_mask,
    subtract_background,
)
from .synthetic import AnnotatorProfile, GroundTruthScene, annotator_ids, simulate_cohort

log = logging.getLogger(__name__)

BACKGROUND_NAME = "_background.png"
MASKS_DIR = "masks"
AGREEMENT_DIR = "agreement"
FILTER_DIR = "filter"
CONSENSUS_DIR = "consensus"


class PipelineError(Exception):
    """Fatal error for a whole stage, carrying a machine-readable kind."""

    def __init__(self, kind: str, message: str, path: str | None = None):
        self.kind = kind
        self.path = path
        super().__init__(message)

    def record(self) -> dict:
        return {"level": "error", "kind": self.kind, "message": str(self), "path": self.path}


@dataclass
class PipelineConfig:
    input: str | None = None
    output: str | None = None
    threshold: float = DEFAULT_THRESHOLD
    min_speckle_size: int = 2
    connectivity: int = 8
    alpha: str = AlphaPolicy.IGNORE.value
    tolerance: int = 0
    use_filtered: bool = False
    backgrounds: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        if not 0.0 <= self.threshold <= 1.0:
            raise PipelineError("invalid-config", f"threshold must lie in [0, 1], got {self.threshold}")
        if self.min_speckle_size < 1:
            raise PipelineError("invalid-config", "min_speckle_size must be >= 1")
        if self.connectivity not in (4, 8):
            raise PipelineError("invalid-config", "connectivity must be 4 or 8")
        if self.tolerance < 0:
            raise PipelineError("invalid-config", "tolerance must be >= 0")
        try:
            AlphaPolicy(self.alpha)
        except ValueError:
            raise PipelineError("invalid-config", f"alpha must be 'ignore' or 'include', got {self.alpha!r}")
        for image_id, p in self.backgrounds.items():
            if not Path(p).is_file():
                raise PipelineError("file-missing", f"background for {image_id} not found", p)

    def echo(self) -> dict:
        """Config as recorded in summaries; the output location is left out."""
        d = asdict(self)
        d.pop("output")
        return d


def load_config_file(path: str | Path) -> dict:
    """Read a YAML or JSON mapping."""
    p = Path(path)
    if not p.is_file():
        raise PipelineError("file-missing", "config file not found", str(p))
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise PipelineError("invalid-config", f"cannot parse config: {exc}", str(p))
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise PipelineError("invalid-config", "config must be a mapping", str(p))
    return data


class Problems:
    """Non-fatal per-file and per-image problems collected during a run."""

    def __init__(self):
        self.records: list[dict] = []

    def add(self, kind: str, message: str, path: str | None = None, image_id: str | None = None):
        rec = {"level": "warning", "kind": kind, "message": message, "path": path, "image_id": image_id}
        log.warning("%s: %s (%s)", kind, message, path or image_id)
        self.records.append(rec)

    def __bool__(self) -> bool:
        return bool(self.records)


def _dump_json(data, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=False) + "\n")


def _rel(path: Path, root: Path) -> str:
    return path.relative_to(root).as_posix()


def _image_dirs(root: Path) -> list[Path]:
    if not root.is_dir():
        raise PipelineError("file-missing", "input directory not found", str(root))
    return sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))


def _annotator_files(image_dir: Path) -> list[Path]:
    return sorted(
        p for p in image_dir.iterdir()
        if p.is_file() and p.suffix.lower() == ".png" and not p.name.startswith("_")
    )


# --------------------------------------------------------------------------
# ingest


def ingest_image(image_dir: Path, cfg: PipelineConfig, problems: Problems) -> tuple[dict, dict[str, np.ndarray]]:
    """Post-process every annotator PNG of one image.

    Returns the manifest entry and the normalized masks (unreadable files are
    skipped and recorded).
    """
    image_id = image_dir.name
    bg_path = Path(cfg.backgrounds[image_id]) if image_id in cfg.backgrounds else image_dir / BACKGROUND_NAME
    background = load_raw(bg_path) if bg_path.is_file() else None
    policy = AlphaPolicy(cfg.alpha)

    masks: dict[str, np.ndarray] = {}
    entries = []
    shape = None
    for f in _annotator_files(image_dir):
        annotator = f.stem
        try:
            raw = load_raw(f)
        except ImageError as exc:
            problems.add(exc.kind, str(exc), str(f), image_id)
            entries.append({"id": annotator, "status": "unreadable", "error": exc.kind})
            continue
        if shape is None:
            shape = (raw.height, raw.width)
        if (raw.height, raw.width) != shape:
            raise PipelineError(
                "dimension-mismatch",
                f"{f.name} is {raw.width}x{raw.height}, expected {shape[1]}x{shape[0]} in image {image_id}",
                str(f),
            )
        if background is not None:
            if (background.height, background.width) != shape:
                raise PipelineError("dimension-mismatch", f"background does not match image {image_id}", str(bg_path))
            raw = subtract_background(raw, background, cfg.tolerance)
        binary = binarize(raw, policy)
        clean = remove_speckles(binary, cfg.min_speckle_size, cfg.connectivity)
        fg = int(clean.sum())
        entries.append({
            "id": annotator,
            "status": "empty" if fg == 0 else "ok",
            "foreground_pixels": fg,
            "speckle_pixels_removed": int(binary.sum()) - fg,
        })
        masks[annotator] = clean
    manifest = {
        "image_id": image_id,
        "width": shape[1] if shape else None,
        "height": shape[0] if shape else None,
        "background": background is not None,
        "annotators": entries,
    }
    return manifest, masks


def run_ingest(cfg: PipelineConfig, problems: Problems) -> dict[str, dict]:
    root = Path(cfg.input)
    out = Path(cfg.output)
    manifests = {}
    for image_dir in _image_dirs(root):
        image_id = image_dir.name
        try:
            manifest, masks = ingest_image(image_dir, cfg, problems)
        except (PipelineError, ImageError) as exc:
            problems.add(getattr(exc, "kind", "error"), str(exc), getattr(exc, "path", None), image_id)
            continue
        dest = out / MASKS_DIR / image_id
        dest.mkdir(parents=True, exist_ok=True)
        for stale in dest.glob("*.png"):
            stale.unlink()
        for annotator, m in masks.items():
            save_mask(m, dest / f"{annotator}.png")
        manifest["ingest"] = {
            "min_speckle_size": cfg.min_speckle_size,
            "connectivity": cfg.connectivity,
            "alpha": cfg.alpha,
            "tolerance": cfg.tolerance,
        }
        _dump_json(manifest, dest / "manifest.json")
        manifests[image_id] = manifest
    return manifests


# --------------------------------------------------------------------------
# normalized masks


def mask_root(cfg: PipelineConfig) -> Path:
    return Path(cfg.output) / MASKS_DIR


def load_annotation_sets(root: Path, problems: Problems) -> dict[str, AnnotationSet]:
    """Read normalized masks, one set per image directory."""
    if not root.is_dir():
        raise PipelineError("missing-stage", "normalized masks not found; run ingest first", str(root))
    sets = {}
    for image_dir in _image_dirs(root):
        masks = {}
        for f in _annotator_files(image_dir):
            try:
                masks[f.stem] = load_mask(f)
            except ImageError as exc:
                problems.add(exc.kind, str(exc), str(f), image_dir.name)
        if not masks:
            problems.add("empty-image", "no readable masks", str(image_dir), image_dir.name)
            continue
        try:
            sets[image_dir.name] = AnnotationSet.from_dict(image_dir.name, masks)
        except ValueError as exc:
            problems.add("dimension-mismatch", str(exc), str(image_dir), image_dir.name)
    return sets


# --------------------------------------------------------------------------
# agreement and filtering


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def run_agreement(cfg: PipelineConfig, problems: Problems, sets: dict[str, AnnotationSet] | None = None) -> dict[str, dict]:
    out = Path(cfg.output)
    if sets is None:
        sets = load_annotation_sets(mask_root(cfg), problems)
    results = {}
    for image_id, aset in sets.items():
        if len(aset) < 2:
            problems.add("too-few-annotators", f"{len(aset)} annotator(s); agreement needs 2", image_id=image_id)
            continue
        matrix = pairwise_matrix(aset)
        medians = median_agreement(matrix)
        dest = out / AGREEMENT_DIR
        dest.mkdir(parents=True, exist_ok=True)
        (dest / f"{image_id}_matrix.csv").write_text(matrix.to_csv())
        # repr keeps full float precision so downstream values match exactly
        (dest / f"{image_id}_medians.csv").write_text(
            _csv([("annotator", "median_dice")] + [(a, repr(m)) for a, m in medians.items()])
        )
        n = len(aset)
        rows = [("annotator", "other", "dice")]
        rows += [
            (aset.annotators[i], aset.annotators[j], repr(float(matrix.scores[i, j])))
            for i in range(n) for j in range(n) if i != j
        ]
        (dest / f"{image_id}_pairwise.csv").write_text(_csv(rows))
        results[image_id] = {"matrix": matrix, "medians": medians}
    return results


def run_filter(cfg: PipelineConfig, problems: Problems, sets: dict[str, AnnotationSet] | None = None) -> dict[str, FilterReport]:
    out = Path(cfg.output)
    if sets is None:
        sets = load_annotation_sets(mask_root(cfg), problems)
    reports = {}
    for image_id, aset in sets.items():
        if len(aset) < 2:
            problems.add("too-few-annotators", f"{len(aset)} annotator(s); filtering needs 2", image_id=image_id)
            continue
        _, report = filter_annotators(aset, cfg.threshold)
        if report.all_excluded:
            problems.add("all-excluded", "every annotator fell below the threshold", image_id=image_id)
        dest = out / FILTER_DIR
        dest.mkdir(parents=True, exist_ok=True)
        (dest / f"{image_id}_report.json").write_text(report.to_json())
        (dest / f"{image_id}_included.txt").write_text("".join(f"{a}\n" for a in report.included))
        reports[image_id] = report
    return reports


def load_filter_report(cfg: PipelineConfig, image_id: str) -> FilterReport:
    path = Path(cfg.output) / FILTER_DIR / f"{image_id}_report.json"
    if not path.is_file():
        raise PipelineError("missing-stage", f"no filter report for {image_id}; run filter first", str(path))
    return FilterReport.from_dict(json.loads(path.read_text()))


# --------------------------------------------------------------------------
# consensus


def run_consensus(
    cfg: PipelineConfig,
    problems: Problems,
    use_filtered: bool,
    sets: dict[str, AnnotationSet] | None = None,
    reports: dict[str, FilterReport] | None = None,
) -> dict:
    """Write consensus maps for every image and return the stage summary."""
    out = Path(cfg.output)
    if sets is None:
        sets = load_annotation_sets(mask_root(cfg), problems)
    variant = "filtered" if use_filtered else "all"
    dest = out / CONSENSUS_DIR / variant
    images = {}
    for image_id, aset in sets.items():
        entry: dict = {"annotator_count": len(aset)}
        used = aset
        if use_filtered:
            try:
                report = reports[image_id] if reports and image_id in reports else load_filter_report(cfg, image_id)
            except PipelineError as exc:
                problems.add(exc.kind, str(exc), exc.path, image_id)
                continue
            entry["excluded_count"] = report.excluded_count
            entry["excluded"] = list(report.excluded)
            if not report.included:
                problems.add("empty-included-set", "no annotators left after filtering", image_id=image_id)
                continue
            used = aset.subset(report.included)
        entry["used"] = list(used.annotators)
        outputs = {}
        for name, img in all_maps(used).items():
            p = dest / f"{image_id}_{name}.png"
            save_gray(img, p)
            outputs[name] = _rel(p, out)
        entry["outputs"] = outputs
        images[image_id] = entry
    summary = {
        "pipeline_version": __version__,
        "variant": variant,
        "config": cfg.echo(),
        "images": images,
    }
    _dump_json(summary, dest / "summary.json")
    return summary


def run_report(cfg: PipelineConfig, problems: Problems) -> dict:
    """Full chain: ingest, agreement, filter, then consensus before and after."""
    manifests = run_ingest(cfg, problems)
    sets = load_annotation_sets(mask_root(cfg), problems)
    sets = {k: v for k, v in sets.items() if k in manifests}
    agreement = run_agreement(cfg, problems, sets)
    reports = run_filter(cfg, problems, sets)
    before = run_consensus(cfg, problems, False, sets)
    after = run_consensus(cfg, problems, True, sets, reports)
    out = Path(cfg.output)
    images = {}
    for image_id, aset in sets.items():
        rep = reports.get(image_id)
        files = {}
        if image_id in agreement:
            files["matrix"] = f"{AGREEMENT_DIR}/{image_id}_matrix.csv"
            files["medians"] = f"{AGREEMENT_DIR}/{image_id}_medians.csv"
            files["pairwise"] = f"{AGREEMENT_DIR}/{image_id}_pairwise.csv"
        if rep is not None:
            files["filter_report"] = f"{FILTER_DIR}/{image_id}_report.json"
        images[image_id] = {
            "annotator_count": len(aset),
            "excluded_count": rep.excluded_count if rep else None,
            "excluded": list(rep.excluded) if rep else None,
            "outputs": {
                **files,
                "consensus_all": before["images"].get(image_id, {}).get("outputs", {}),
                "consensus_filtered": after["images"].get(image_id, {}).get("outputs", {}),
            },
        }
    summary = {
        "pipeline_version": __version__,
        "config": cfg.echo(),
        "images": images,
        "problems": problems.records,
    }
    _dump_json(summary, out / "run_summary.json")
    return summary


# --------------------------------------------------------------------------
# simulation


def load_profiles(path: str | Path) -> list[AnnotatorProfile]:
    """Profiles from a YAML/JSON file: either a list or ``{"profiles": [...]}``."""
    p = Path(path)
    if not p.is_file():
        raise PipelineError("file-missing", "profile config not found", str(p))
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise PipelineError("invalid-config", f"cannot parse profiles: {exc}", str(p))
    if isinstance(data, dict):
        data = data.get("profiles")
    if not isinstance(data, list) or not data:
        raise PipelineError("invalid-config", "expected a non-empty list of profiles", str(p))
    try:
        return [AnnotatorProfile.from_dict(d) for d in data]
    except (TypeError, ValueError, AttributeError) as exc:
        raise PipelineError("invalid-config", f"bad profile: {exc}", str(p))


def load_truth(path: str | Path) -> np.ndarray:
    raw = load_raw(path)
    if raw.channels != 1 or not np.isin(raw.pixels, (0, 255)).all():
        raise PipelineError("non-binary-truth", "truth must be a gray PNG with only 0 and 255", str(path))
    return raw.pixels[:, :, 0] == 255


def run_simulate(profiles_path: str, truth_path: str, output: str, image_id: str = "sim", connectivity: int = 8) -> dict:
    profiles = load_profiles(profiles_path)
    scene = GroundTruthScene.from_mask(load_truth(truth_path), connectivity)
    cohort = simulate_cohort(scene, profiles, image_id)
    dest = Path(output) / image_id
    dest.mkdir(parents=True, exist_ok=True)
    for annotator, m in zip(cohort.annotators, cohort.masks):
        save_mask(m, dest / f"{annotator}.png")
    manifest = {
        "image_id": image_id,
        "annotator_count": len(profiles),
        "annotators": [
            {"id": a, "profile": p.to_dict()} for a, p in zip(annotator_ids(len(profiles)), profiles)
        ],
    }
    _dump_json(manifest, Path(output) / f"{image_id}_manifest.json")
    return manifest
