"""Classification metrics, corruption robustness, code-distance heatmaps and inference."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentConfig, _erase_with, motion_blur
from .classifier import Prediction, predict, predict_batch
from .encoder import EncodeTrace, encode, encode_batched
from .image import SignImage, write_pgm
from . import tensor as T

CONDITIONS = ("clean", "blur", "occ")


# ---------------------------------------------------------------------------
# confusion and metrics
# ---------------------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, columns = predicted

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(pairs, num_classes: int) -> ConfusionMatrix:
    """Count (true, predicted) label pairs into a C x C matrix."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in pairs:
        if not (0 <= t < num_classes and 0 <= p < num_classes):
            raise ValueError(f"label pair ({t}, {p}) outside [0, {num_classes})")
        cm[t, p] += 1
    return ConfusionMatrix(cm)


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(num.shape, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


@dataclass
class MetricsReport:
    precision: np.ndarray
    recall: np.ndarray
    class_accuracy: np.ndarray  # one-vs-rest (TP + TN) / total
    support: np.ndarray
    accuracy: float  # top-1: trace / total
    total: int
    condition: str = "clean"
    confusion: ConfusionMatrix | None = None

    @property
    def macro_precision(self) -> float:
        return float(self.precision.mean())

    @property
    def macro_recall(self) -> float:
        return float(self.recall.mean())

    @property
    def macro_accuracy(self) -> float:
        return float(self.class_accuracy.mean())

    def summary(self) -> dict[str, float]:
        return {"accuracy": self.accuracy, "macro_precision": self.macro_precision,
                "macro_recall": self.macro_recall, "macro_accuracy": self.macro_accuracy}

    def to_text(self) -> str:
        lines = [f"condition={self.condition}", f"samples={self.total}"]
        lines += [f"{k}={v:.6f}" for k, v in self.summary().items()]
        return "\n".join(lines) + "\n"

    def to_csv(self, labels=None) -> str:
        rows = [f"{'class' if labels is None else 'group'},precision,recall,accuracy,support"]
        for c in range(len(self.precision)):
            rows.append(f"{c if labels is None else labels[c]},{self.precision[c]:.6f},{self.recall[c]:.6f},{self.class_accuracy[c]:.6f},"
                        f"{int(self.support[c])}")
        return "\n".join(rows) + "\n"


def metrics(cm: ConfusionMatrix, condition: str = "clean") -> MetricsReport:
    """One-vs-rest precision, recall and accuracy per class; a zero denominator gives 0."""
    counts = cm.counts.astype(np.int64)
    total = counts.sum()
    if total == 0:
        raise ValueError("metrics need at least one evaluated sample")
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    tn = total - tp - fp - fn
    return MetricsReport(_ratio(tp, tp + fp), _ratio(tp, tp + fn), (tp + tn) / total, counts.sum(axis=1),
                         float(tp.sum() / total), int(total), condition, cm)


def read_groups(path, num_classes: int) -> list[str]:
    """Parse ``class_id<whitespace>group name`` lines ('#' starts a comment); every class must be listed once."""
    groups: dict[int, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split(None, 1)
        if len(parts) != 2 or not parts[0].isdigit():
            raise ValueError(f"{path}:{lineno}: expected 'class_id group', got {raw!r}")
        c = int(parts[0])
        if not 0 <= c < num_classes:
            raise ValueError(f"{path}:{lineno}: class {c} outside [0, {num_classes})")
        if c in groups:
            raise ValueError(f"{path}:{lineno}: class {c} listed twice")
        groups[c] = parts[1].strip()
    missing = sorted(set(range(num_classes)) - set(groups))
    if missing:
        raise ValueError(f"{path}: classes without a group: {missing}")
    return [groups[c] for c in range(num_classes)]


def group_confusion(cm: ConfusionMatrix, groups) -> tuple[ConfusionMatrix, list[str]]:
    """Collapse a class confusion matrix onto groups, named in order of first appearance."""
    if len(groups) != cm.num_classes:
        raise ValueError(f"{len(groups)} group labels for {cm.num_classes} classes")
    names = list(dict.fromkeys(groups))
    member = np.zeros((cm.num_classes, len(names)), dtype=np.int64)
    member[np.arange(cm.num_classes), [names.index(g) for g in groups]] = 1
    return ConfusionMatrix(member.T @ cm.counts @ member), names


# ---------------------------------------------------------------------------
# corrupted test conditions
# ---------------------------------------------------------------------------

def corrupt(image: SignImage, condition: str, seed, config: AugmentConfig = AugmentConfig()) -> SignImage:
    """Apply one evaluation condition: clean, blur (random length and angle) or occ (erase, p = 1)."""
    if condition == "clean":
        return image
    rng = np.random.default_rng(seed)
    if condition == "blur":
        length = int(rng.integers(config.blur_length[0], config.blur_length[1] + 1))
        return motion_blur(image, length, rng.uniform(*config.blur_angle))
    if condition == "occ":
        return _erase_with(image, config, rng)
    raise ValueError(f"unknown condition {condition!r}; expected one of {CONDITIONS}")


def evaluate(model, images, condition: str = "clean", seed: int = 0,
             config: AugmentConfig = AugmentConfig()) -> MetricsReport:
    if not images:
        raise ValueError("no test images")
    shown = [corrupt(im, condition, [seed, i, CONDITIONS.index(condition)], config) for i, im in enumerate(images)]
    codes = encode_batched(model.encoder, np.stack([im.pixels for im in shown]))
    pred, _ = predict_batch(model.classifier, codes)
    truth = [im.class_id for im in images]
    return metrics(confusion(zip(truth, pred.tolist()), model.num_classes), condition)


@dataclass
class RobustnessReport:
    reports: dict[str, MetricsReport]

    def deltas(self) -> dict[str, float]:
        """Accuracy change of every condition relative to clean."""
        if "clean" not in self.reports:
            return {}
        base = self.reports["clean"].accuracy
        return {c: r.accuracy - base for c, r in self.reports.items() if c != "clean"}

    def summary_text(self) -> str:
        lines = [f"{c}.{k}={v:.6f}" for c, r in self.reports.items() for k, v in r.summary().items()]
        lines += [f"delta.{c}.accuracy={d:.6f}" for c, d in self.deltas().items()]
        return "\n".join(lines) + "\n"


def robustness_report(model, images, conditions=CONDITIONS, seed: int = 0,
                      config: AugmentConfig | None = None) -> RobustnessReport:
    """Metrics on the clean, motion-blurred and occluded versions of ``images`` (fixed seeds).

    Evaluation uses full-strength corruption: every image is blurred (length
    and angle from ``config``) or erased (area and aspect from ``config``).
    """
    config = config or AugmentConfig()
    return RobustnessReport({c: evaluate(model, images, c, seed, config) for c in conditions})


def write_reports(out_dir, report: RobustnessReport, groups=None) -> list[Path]:
    """Per-condition text and CSV reports plus a summary; ``groups`` adds group-level CSVs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for c, r in report.reports.items():
        files = [(f"metrics_{c}.txt", r.to_text()), (f"metrics_{c}.csv", r.to_csv())]
        if groups is not None:
            gcm, names = group_confusion(r.confusion, groups)
            files.append((f"groups_{c}.csv", metrics(gcm, c).to_csv(names)))
        for name, text in files:
            path = out / name
            path.write_text(text, encoding="utf-8")
            written.append(path)
    path = out / "summary.txt"
    path.write_text(report.summary_text(), encoding="utf-8")
    return written + [path]


# ---------------------------------------------------------------------------
# heatmap
# ---------------------------------------------------------------------------

@dataclass
class HeatmapMatrix:
    mean: np.ndarray  # NaN marks an absent cell
    min: np.ndarray
    max: np.ndarray
    counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.mean)

    def present_rows(self) -> np.ndarray:
        return np.flatnonzero(self.counts > 0)

    def diagonal_fraction(self) -> float:
        """Share of present rows whose smallest mean distance sits on the diagonal."""
        rows = self.present_rows()
        if not len(rows):
            return float("nan")
        return float(np.mean([np.nanargmin(self.mean[r]) == r for r in rows]))

    def intra_inter_ratio(self) -> float:
        rows = self.present_rows()
        off = ~np.eye(self.num_classes, dtype=bool)
        intra = self.mean[rows, rows].mean()
        inter = self.mean[rows][off[rows]].mean()
        return float(intra / inter)

    def to_csv(self) -> str:
        fmt = lambda v: "absent" if np.isnan(v) else f"{v:.6g}"
        return "\n".join(",".join(fmt(v) for v in row) for row in self.mean) + "\n"

    def to_pgm_pixels(self, cell: int = 8) -> np.ndarray:
        m = self.mean
        lo, hi = np.nanmin(m), np.nanmax(m)
        scaled = np.zeros_like(m) if hi <= lo else (m - lo) / (hi - lo)
        gray = np.where(np.isnan(m), 0, np.round(scaled * 255)).astype(np.uint8)
        return np.kron(gray, np.ones((cell, cell), dtype=np.uint8))

    def write(self, out_dir, stem: str = "heatmap") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, pgm_path = out / f"{stem}.csv", out / f"{stem}.pgm"
        csv_path.write_text(self.to_csv(), encoding="utf-8")
        write_pgm(pgm_path, self.to_pgm_pixels())
        return csv_path, pgm_path


def heatmap(encoder, codebook, images, num_classes: int | None = None) -> HeatmapMatrix:
    """Mean/min/max distance between test codes of class i and the template code of class j."""
    tcodes = np.asarray(codebook.codes, dtype=np.float64)
    c = num_classes or len(tcodes)
    mean = np.full((c, len(tcodes)), np.nan)
    lo, hi = mean.copy(), mean.copy()
    counts = np.zeros(c, dtype=np.int64)
    if images:
        labels = np.array([im.class_id for im in images])
        codes = encode_batched(encoder, np.stack([im.pixels for im in images])).astype(np.float64)
        dist = np.sqrt(((codes[:, None, :] - tcodes[None]) ** 2).sum(-1))
        for k in range(c):
            rows = dist[labels == k]
            counts[k] = len(rows)
            if len(rows):
                mean[k], lo[k], hi[k] = rows.mean(0), rows.min(0), rows.max(0)
    return HeatmapMatrix(mean, lo, hi, counts)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

@dataclass
class InferenceResult:
    predictions: list[Prediction]
    seconds: list[float]
    trace: EncodeTrace = field(default_factory=EncodeTrace)


def infer(model, images, trace: EncodeTrace | None = None) -> InferenceResult:
    """Classify each image with one encoder pass and no template encodings."""
    trace = trace or EncodeTrace()
    preds, secs = [], []
    for im in images:
        px = getattr(im, "pixels", im)
        start = time.perf_counter()
        with T.no_grad():
            code = encode(model.encoder, px, trace, role="sample")
        preds.append(predict(model.classifier, code))
        secs.append(time.perf_counter() - start)
    return InferenceResult(preds, secs, trace)


def single_branch_check(trace: EncodeTrace, images: int) -> bool:
    """Exactly one sample-branch pass per classified image and no template passes."""
    return trace.sample_passes == images and trace.template_passes == 0
