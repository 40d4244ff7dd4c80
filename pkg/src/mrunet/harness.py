"""Training, evaluation, prediction, two-model comparison and curve output."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple
from xml.sax.saxutils import escape

import numpy as np

from . import datapipe as dp
from .errors import CompatibilityError, DegenerateVarianceError, DivergenceError, ValidationError
from .metrics import METRICS, MetricsReport, binarize, paired_t_one_tailed, write_metrics_csv
from .netbuilder import ArchitectureSpec, Model, Variant, build_model, infer_spec, load_weights, save_weights
from .optim import Adadelta, soft_dice, soft_dice_loss
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)

CHECKPOINT = "best.mrun"
RUN_META = "run.json"
RUN_LOG = "runlog.csv"
LOG_COLUMNS = ("epoch", "train_loss", "val_sdsc", "seconds")

DESK = {"base_channels": 8, "size": 64, "max_epochs": 300, "batch_size": 4}
DESK_SYNTHETIC = {"count": 24, "size": 64, "multi_scale": True}
DESK_SPLIT = (16, 4, 4)

# fields that must agree between the two runs of a comparison
DATA_FIELDS = ("data", "synthetic", "data_seed", "split", "size", "augment", "norm_roi")


@dataclass
class TrainConfig:
    arch: str = "unet"
    base_channels: int = 64
    data: Optional[str] = None
    synthetic: Optional[dict] = None
    size: Optional[int] = None
    split: Optional[List[int]] = None
    augment: bool = True
    norm_roi: str = "foreground"
    batch_size: int = 16
    max_epochs: int = 5000
    lr: float = 1.0
    rho: float = 0.95
    eps: float = 1e-6
    seed: int = 0
    data_seed: Optional[int] = None
    patience: Optional[int] = None
    tau: float = 0.8
    threshold: float = 0.5
    out: str = "runs/train"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ValidationError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.data is None and self.synthetic is None:
            raise ValidationError("config needs either a dataset path or a synthetic spec")
        if self.patience is not None and self.patience < 1:
            raise ValidationError("patience must be >= 1")
        try:
            Variant(self.arch)
            dp.Roi(self.norm_roi)
        except ValueError as exc:
            raise ValidationError(str(exc)) from None

    @property
    def effective_data_seed(self) -> int:
        return self.seed if self.data_seed is None else self.data_seed

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from None

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        d = dict(DESK)
        d.pop("size")
        d.update(augment=False, synthetic=dict(DESK_SYNTHETIC), split=list(DESK_SPLIT))
        d.update(overrides)
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def data_key(self) -> dict:
        d = {k: getattr(self, k) for k in DATA_FIELDS}
        d["data_seed"] = self.effective_data_seed
        return d


@dataclass
class RunLogRecord:
    epoch: int
    train_loss: float
    val_sdsc: float
    seconds: float


@dataclass
class PreparedData:
    split: dp.Split
    norm: dp.NormalizationParams
    train: List[dp.ImageSample]
    validation: List[dp.ImageSample]
    test: List[dp.ImageSample]
    in_channels: int


@dataclass
class TrainResult:
    model: Model
    log: List[RunLogRecord]
    best_epoch: int
    best_val_sdsc: float
    out_dir: Path
    data: PreparedData = field(repr=False)

    @property
    def checkpoint(self) -> Path:
        return self.out_dir / CHECKPOINT


# ---------------------------------------------------------------------------
# data


def load_samples(config: TrainConfig) -> List[dp.ImageSample]:
    if config.data is not None:
        samples = dp.load_dataset(config.data)
    else:
        syn = {**DESK_SYNTHETIC, **(config.synthetic or {})}
        samples = dp.gen_synthetic(
            int(syn["count"]), int(syn["size"]), config.effective_data_seed, bool(syn.get("multi_scale", True))
        )
    if config.size is not None:
        samples = [dp.resize_sample(s, config.size) for s in samples]
    return samples


def prepare_data(config: TrainConfig) -> PreparedData:
    """Split, compute normalization from the training split only, augment."""
    samples = load_samples(config)
    sizes = tuple(config.split) if config.split is not None else None
    split = dp.split_dataset(samples, config.effective_data_seed, sizes)
    norm = dp.default_norm_params(split.train, dp.Roi(config.norm_roi))
    train, val = split.train, split.validation
    if config.augment:
        train = dp.augment_all(train)
        val = dp.augment_all(val)
    return PreparedData(split, norm, train, val, list(split.test), samples[0].image.channels)


# ---------------------------------------------------------------------------
# inference helpers


def predict_probs(model: Model, x: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Foreground probability maps (N, H, W) computed forward-only."""
    out = []
    for i in range(0, len(x), batch_size):
        chunk = Tensor(x[i:i + batch_size].astype(model.dtype, copy=False))
        out.append(model(chunk).data[:, 1])
    return np.concatenate(out) if out else np.zeros((0,) + x.shape[2:])


def validation_sdsc(model: Model, x: np.ndarray, y: np.ndarray, batch_size: int = 16) -> float:
    probs = predict_probs(model, x, batch_size)
    return float(soft_dice(np.stack([1 - probs, probs], axis=1), y).mean())


# ---------------------------------------------------------------------------
# training


def write_run_log(records: Sequence[RunLogRecord], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in records:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_sdsc), f"{r.seconds:.3f}"])
    return path


def read_run_log(path) -> List[RunLogRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [RunLogRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_sdsc"]), float(r["seconds"])) for r in rows]


def _save_meta(out: Path, config: TrainConfig, spec: ArchitectureSpec, data: PreparedData, **extra) -> None:
    meta = {
        "config": config.to_dict(),
        "spec": spec.to_dict(),
        "norm": data.norm.to_dict(),
        "split": data.split.ids(),
        **extra,
    }
    (out / RUN_META).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def train(config: TrainConfig, data: Optional[PreparedData] = None) -> TrainResult:
    """Adadelta on soft-Dice loss; keep the epoch with the best validation soft Dice."""
    data = data or prepare_data(config)
    if not data.train or not data.validation:
        raise ValidationError("training and validation splits must be non-empty")
    spec = ArchitectureSpec(Variant(config.arch), config.base_channels, data.in_channels)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)

    xt, yt = dp.to_arrays(data.train, data.norm)
    xv, yv = dp.to_arrays(data.validation, data.norm)
    model = build_model(spec, seed=config.seed)
    opt = Adadelta(list(model.parameters.values()), rho=config.rho, eps=config.eps, lr=config.lr)
    rng = np.random.default_rng(config.seed)

    records: List[RunLogRecord] = []
    best_epoch, best = 0, -math.inf
    since_best = 0
    start = time.perf_counter()
    n = len(xt)
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for b in range(0, n, config.batch_size):
            idx = order[b:b + config.batch_size]
            with Tape():
                lv = soft_dice_loss(model(Tensor(xt[idx])), yt[idx])
            loss = lv.value
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss {loss} at epoch {epoch}, batch {b // config.batch_size}")
            opt.zero_grad()
            backward(lv.loss)
            opt.step()
            total += loss * len(idx)
        val = validation_sdsc(model, xv, yv, config.batch_size)
        if not math.isfinite(val):
            raise DivergenceError(f"non-finite validation soft Dice at epoch {epoch}")
        records.append(RunLogRecord(epoch, total / n, val, time.perf_counter() - start))
        if val > best:
            best, best_epoch, since_best = val, epoch, 0
            save_weights(model, out / CHECKPOINT)
        else:
            since_best += 1
        if epoch == 1 or epoch % 10 == 0:
            log.info("%s epoch %d loss %.4f val sDSC %.4f (best %.4f @ %d)", config.arch, epoch, total / n, val, best, best_epoch)
        if config.patience is not None and since_best >= config.patience:
            log.info("early stop at epoch %d (no improvement for %d epochs)", epoch, config.patience)
            break

    write_run_log(records, out / RUN_LOG)
    _save_meta(out, config, spec, data, best_epoch=best_epoch, best_val_sdsc=best)
    best_model = load_weights(out / CHECKPOINT, spec)
    log.info("best epoch %d, validation sDSC %.4f", best_epoch, best)
    return TrainResult(best_model, records, best_epoch, best, out, data)


# ---------------------------------------------------------------------------
# evaluation and prediction


def evaluate(model: Model, samples: Sequence[dp.ImageSample], norm: dp.NormalizationParams,
             threshold: float = 0.5, batch_size: int = 16) -> MetricsReport:
    """Forward, threshold, and score every sample against its mask."""
    if not samples:
        raise ValidationError("cannot evaluate an empty split")
    if samples[0].image.channels != model.spec.in_channels:
        raise CompatibilityError(
            f"model expects {model.spec.in_channels} channels, data has {samples[0].image.channels}"
        )
    x, y = dp.to_arrays(samples, norm)
    probs = predict_probs(model, x, batch_size)
    report = MetricsReport()
    for s, p, g in zip(samples, probs, y):
        report.add(s.identifier, binarize(p, threshold), g[0] > 0)
    return report


def load_run(checkpoint) -> Tuple[Model, dict]:
    """Model plus run metadata (``run.json`` beside the checkpoint, if any)."""
    checkpoint = Path(checkpoint)
    if checkpoint.is_dir():
        checkpoint = checkpoint / CHECKPOINT
    meta_path = checkpoint.parent / RUN_META
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    spec = ArchitectureSpec.from_dict(meta["spec"]) if "spec" in meta else infer_spec(checkpoint)
    return load_weights(checkpoint, spec), meta


def norm_from_meta(meta: dict) -> dp.NormalizationParams:
    if "norm" in meta:
        return dp.NormalizationParams(**meta["norm"])
    log.warning("no run.json next to checkpoint; normalizing intensities by 255")
    return dp.NormalizationParams(0.0, 255.0, dp.NormMode.RGB255)


def evaluate_checkpoint(checkpoint, split: str = "test", data: Optional[str] = None,
                        threshold: float = 0.5) -> MetricsReport:
    """Evaluate a saved run on one of its splits, or on every image of ``data``."""
    model, meta = load_run(checkpoint)
    norm = norm_from_meta(meta)
    if data is not None:
        samples = dp.load_dataset(data)
        size = meta.get("config", {}).get("size")
        if size:
            samples = [dp.resize_sample(s, size) for s in samples]
    else:
        if "config" not in meta:
            raise ValidationError("no run.json found; pass a dataset directory to evaluate")
        prepared = prepare_data(TrainConfig.from_dict(meta["config"]))
        samples = {"train": prepared.train, "validation": prepared.validation, "test": prepared.test}[split]
    return evaluate(model, samples, norm, threshold)


def predict(checkpoint, image_path, output_path, prob_path=None, resize: Optional[int] = None,
            threshold: float = 0.5) -> Path:
    """Write the binary mask (0/255 PNG) and optionally the probability map."""
    model, meta = load_run(checkpoint)
    norm = norm_from_meta(meta)
    raster = dp.load_raster(image_path)
    if resize is not None:
        raster = dp.resize_bicubic(raster, resize, resize)
    x = dp.normalize(raster, norm).transpose(2, 0, 1)[None]
    p = predict_probs(model, x)[0].astype(np.float64)
    mask = binarize(p, threshold)
    dp.save_raster(dp.Raster.from_array(np.where(mask, 255, 0).astype(np.uint8)), output_path)
    if prob_path is not None:
        q = np.floor(p * 255.0 + 0.5)
        if threshold == 0.5:
            # keep mask == 255  <=>  prob >= 128 exact at the boundary
            q = np.where(mask, np.maximum(q, 128), np.minimum(q, 127))
        dp.save_raster(dp.Raster.from_array(q.astype(np.uint8)), prob_path)
    return Path(output_path)


# ---------------------------------------------------------------------------
# comparison


def epochs_to_threshold(records: Sequence[RunLogRecord], tau: float) -> Optional[int]:
    for r in records:
        if r.val_sdsc >= tau:
            return r.epoch
    return None


def _ttest_entry(a: Sequence[float], b: Sequence[float]) -> dict:
    try:
        res = paired_t_one_tailed(a, b)
    except DegenerateVarianceError:
        return {"status": "no difference", "t": None, "df": len(a) - 1, "p": None, "significant": False}
    return {"status": "ok", **res.to_dict()}


def compare_reports(unet: Dict[str, MetricsReport], mrunet: Dict[str, MetricsReport]) -> dict:
    """Comparison block: mean/sd per model and a paired one-tailed t per metric."""
    table = {}
    for split in ("validation", "test"):
        a, b = unet[split], mrunet[split]
        if a.ids != b.ids:
            raise ValidationError(f"{split}: models were evaluated on different images")
        agg_a, agg_b = a.aggregate(), b.aggregate()
        table[split] = {
            m: {
                "unet": {"mean": agg_a[m][0], "sd": agg_a[m][1]},
                "mrunet": {"mean": agg_b[m][0], "sd": agg_b[m][1]},
                "ttest": _ttest_entry(getattr(a, m), getattr(b, m)),
            }
            for m in METRICS
        }
    return table


def format_table(table: dict, training_rate: Optional[dict] = None) -> str:
    """Plain-text rendering; significant mrU-Net improvements are starred."""
    head = ["Model", *(f"{s[:4]} {m[:4]}" for s in ("validation", "test") for m in METRICS)]
    lines = [" | ".join(head), " | ".join("---" for _ in head)]
    for model, label in (("unet", "U-Net"), ("mrunet", "mrU-Net")):
        cells = [label]
        for split in ("validation", "test"):
            for m in METRICS:
                e = table[split][m]
                v = e[model]
                star = "*" if model == "mrunet" and e["ttest"]["significant"] else ""
                cells.append(f"{v['mean']:.1f}±{v['sd']:.1f}%{star}")
        lines.append(" | ".join(cells))
    lines.append("")
    lines.append("* significant improvement of mrU-Net (paired one-tailed t, p < 0.05)")
    for split in ("validation", "test"):
        for m in METRICS:
            t = table[split][m]["ttest"]
            if t["status"] == "ok":
                lines.append(f"{split:10s} {m:11s} t={t['t']:+.4f} df={t['df']} p={t['p']:.4g}")
            else:
                lines.append(f"{split:10s} {m:11s} no difference (all paired differences equal)")
    if training_rate:
        lines.append("")
        lines.append(f"epochs to validation sDSC >= {training_rate['tau']}:")
        for model in ("unet", "mrunet"):
            lines.append(f"  {model:7s} per seed {training_rate[model]}  median {training_rate['median'][model]}")
    return "\n".join(lines) + "\n"


def _median_epochs(values: Sequence[Optional[int]]):
    """Median with unreached (None) runs ranked last; None if the median is unreached."""
    vals = sorted(math.inf if v is None else v for v in values)
    med = float(np.median(vals))
    return None if math.isinf(med) else med


def check_same_data(config_u: TrainConfig, config_m: TrainConfig) -> None:
    ku, km = config_u.data_key(), config_m.data_key()
    if ku != km:
        diff = sorted(k for k in ku if ku[k] != km[k])
        raise ValidationError(f"compared runs must share dataset and splits; differing fields: {diff}")


def compare(config_u: TrainConfig, config_m: TrainConfig, seeds: Optional[Sequence[int]] = None,
            checkpoints: Optional[Tuple[str, str]] = None, out: Optional[str] = None) -> dict:
    """Train (or load) both variants on identical splits and compare them.

    With several ``seeds`` each seed trains a fresh pair; the comparison block
    is reported per seed and epochs-to-threshold is summarised by median.
    """
    check_same_data(config_u, config_m)
    if Variant(config_u.arch) is not Variant.UNET or Variant(config_m.arch) is not Variant.MRUNET:
        raise ValidationError("compare expects a unet config and an mrunet config")
    out_dir = Path(out or Path(config_u.out).parent / "compare")
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = list(seeds) if seeds else [config_u.seed]
    if checkpoints is not None and len(seeds) > 1:
        raise ValidationError("pre-trained checkpoints can only be compared for a single seed")

    per_seed = []
    rate = {"tau": config_u.tau, "unet": [], "mrunet": []}
    curves = {}
    for seed in seeds:
        seed_dir = out_dir / f"seed{seed}"
        reports: Dict[str, Dict[str, MetricsReport]] = {}
        for cfg in (config_u, config_m):
            variant = Variant(cfg.arch).value
            run_cfg = TrainConfig.from_dict({**cfg.to_dict(), "seed": seed, "out": str(seed_dir / variant)})
            if checkpoints is not None:
                path = checkpoints[0] if variant == "unet" else checkpoints[1]
                model, meta = load_run(path)
                data = prepare_data(run_cfg)
                norm = norm_from_meta(meta) if meta else data.norm
                log_path = Path(path if Path(path).is_dir() else Path(path).parent) / RUN_LOG
                records = read_run_log(log_path) if log_path.exists() else []
            else:
                result = train(run_cfg)
                model, data, norm, records = result.model, result.data, result.data.norm, result.log
            reports[variant] = {
                "validation": evaluate(model, data.validation, norm, cfg.threshold),
                "test": evaluate(model, data.test, norm, cfg.threshold),
            }
            vdir = seed_dir / variant
            vdir.mkdir(parents=True, exist_ok=True)
            for split, rep in reports[variant].items():
                write_metrics_csv(rep, vdir / f"{split}_metrics.csv")
            rate[variant].append(epochs_to_threshold(records, cfg.tau))
            if records:
                curves[f"{variant}-seed{seed}"] = records
        table = compare_reports(reports["unet"], reports["mrunet"])
        per_seed.append({"seed": seed, "table": table})

    rate["median"] = {v: _median_epochs(rate[v]) for v in ("unet", "mrunet")}
    report = {"seeds": seeds, "per_seed": per_seed, "training_rate": rate}
    (out_dir / "compare.json").write_text(json.dumps(report, indent=2) + "\n")
    text = "".join(f"== seed {e['seed']} ==\n" + format_table(e["table"]) + "\n" for e in per_seed)
    text += f"epochs to validation sDSC >= {rate['tau']} (None = not reached):\n"
    for v in ("unet", "mrunet"):
        text += f"  {v:7s} per seed {rate[v]}  median {rate['median'][v]}\n"
    (out_dir / "compare.txt").write_text(text)
    if curves:
        emit_curves(curves, out_dir / "curves")
    return report


# ---------------------------------------------------------------------------
# curves


def emit_curves(logs: Dict[str, Sequence[RunLogRecord]], out_dir, width: int = 640, height: int = 400) -> Path:
    """One CSV per log plus ``val_sdsc.svg`` with a polyline per log."""
    if not logs:
        raise ValidationError("no run logs given")
    for name, records in logs.items():
        if not records:
            raise ValidationError(f"run log {name!r} is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, records in logs.items():
        write_run_log(records, out / f"{name}.csv")
    (out / "val_sdsc.svg").write_text(curves_svg(logs, width, height))
    return out


MARGIN = 50
COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


def curve_points(records: Sequence[RunLogRecord], max_epoch: int, width: int, height: int) -> List[Tuple[float, float]]:
    """SVG coordinates: x linear in epoch over [1, max_epoch], y linear in sDSC over [0, 1]."""
    pw, ph = width - 2 * MARGIN, height - 2 * MARGIN
    span = max(max_epoch - 1, 1)
    return [
        (round(MARGIN + pw * (r.epoch - 1) / span, 2), round(MARGIN + ph * (1.0 - r.val_sdsc), 2))
        for r in records
    ]


def curves_svg(logs: Dict[str, Sequence[RunLogRecord]], width: int = 640, height: int = 400) -> str:
    max_epoch = max(r.epoch for recs in logs.values() for r in recs)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<line x1="{MARGIN}" y1="{height - MARGIN}" x2="{width - MARGIN}" y2="{height - MARGIN}" stroke="black"/>',
        f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{height - MARGIN}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle" font-size="13">epoch</text>',
        f'<text x="14" y="{height / 2}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 14 {height / 2})">validation sDSC</text>',
        f'<text x="{MARGIN - 6}" y="{height - MARGIN + 4}" text-anchor="end" font-size="11">0</text>',
        f'<text x="{MARGIN - 6}" y="{MARGIN + 4}" text-anchor="end" font-size="11">1</text>',
        f'<text x="{width - MARGIN}" y="{height - MARGIN + 16}" text-anchor="end" font-size="11">{max_epoch}</text>',
    ]
    for i, (name, records) in enumerate(logs.items()):
        colour = COLOURS[i % len(COLOURS)]
        pts = " ".join(f"{x},{y}" for x, y in curve_points(records, max_epoch, width, height))
        parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{pts}">'
                     f'<title>{escape(name)}</title></polyline>')
        parts.append(f'<text x="{width - MARGIN - 4}" y="{MARGIN + 14 * (i + 1)}" text-anchor="end" '
                     f'font-size="11" fill="{colour}">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
