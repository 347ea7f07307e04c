"""Batch orchestration: config file handling, dataset ingestion, run execution,
persistence of adversarial outputs, and report emission.

The run configuration is a single INI-style text file; an empty or absent
[attack] section reproduces the reference hyperparameters exactly. All
outputs are written atomically (temp file + rename) and the manifest contains
no wall-clock values, so identically seeded runs are byte-identical.
"""
from __future__ import annotations

import configparser
import dataclasses
import importlib
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from . import __version__
from .attack import AttackConfig, AttackResult, run_attack, run_text_attack
from .backbone import DiffusionBackbone, ImageTensor
from .errors import ConfigurationError
from .evaluation import (
    Classifier,
    RandomProjectionFeatures,
    ToyClassifier,
    fid,
    top1,
    train_toy_classifier,
    transfer_matrix,
)
from .toy import ToyBackboneConfig, build_toy_backbone

_ATTACK_FIELD_ORDER = [
    "n_sample_steps",
    "n_invert_steps",
    "guidance_inversion",
    "guidance_denoise",
    "lr",
    "iterations",
    "alpha",
    "beta",
    "gamma",
    "mask_mode",
    "top_n",
    "text_attack",
    "ext_loss_weight",
    "seed",
]


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def attack_config_to_ini(cfg: AttackConfig) -> str:
    """Canonical [attack] section text; the golden-file test pins this form."""
    lines = ["[attack]"]
    for name in _ATTACK_FIELD_ORDER:
        lines.append(f"{name} = {_format_value(getattr(cfg, name))}")
    return "\n".join(lines) + "\n"


def _parse_attack_section(section) -> AttackConfig:
    defaults = AttackConfig()
    kwargs = {}
    for f in dataclasses.fields(AttackConfig):
        if section is None or f.name not in section:
            continue
        raw = section[f.name]
        if f.type == "bool" or isinstance(getattr(defaults, f.name), bool):
            kwargs[f.name] = raw.strip().lower() in ("1", "true", "yes", "on")
        elif isinstance(getattr(defaults, f.name), int):
            kwargs[f.name] = int(raw)
        elif isinstance(getattr(defaults, f.name), float):
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = raw.strip()
    return AttackConfig(**kwargs)


@dataclass(frozen=True)
class ComponentSpec:
    """A backbone or classifier spec such as ``toy:seed=7,epochs=300``."""

    kind: str
    params: dict

    @classmethod
    def parse(cls, text: str) -> "ComponentSpec":
        text = text.strip()
        if ":" not in text:
            return cls(text, {})
        kind, _, rest = text.partition(":")
        if kind == "external":
            return cls("external", {"path": rest})
        params = {}
        for item in rest.split(","):
            item = item.strip()
            if not item:
                continue
            key, _, value = item.partition("=")
            params[key.strip()] = value.strip()
        return cls(kind, params)

    def int_param(self, name: str, default: int) -> int:
        return int(self.params.get(name, default))


@dataclass
class RunConfig:
    dataset_dir: Path
    labels_file: Path
    output_dir: Path
    attack: AttackConfig = field(default_factory=AttackConfig)
    backbone: ComponentSpec = field(default_factory=lambda: ComponentSpec("toy", {}))
    surrogate: ComponentSpec = field(default_factory=lambda: ComponentSpec("toy", {"seed": "7"}))
    targets: list[ComponentSpec] = field(default_factory=list)
    metrics_accuracy: bool = True
    metrics_fid: bool = True
    resize: tuple[int, int] = (224, 224)
    workers: int = 1
    config_text: str = ""


def load_run_config(path: Path) -> RunConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    parser = configparser.ConfigParser()
    parser.read_string(text)
    if "dataset" not in parser or "output" not in parser:
        raise ConfigurationError("config needs [dataset] and [output] sections")
    ds = parser["dataset"]
    resize = tuple(int(v) for v in ds.get("resize", "224,224").split(","))
    if len(resize) != 2:
        raise ConfigurationError("resize must be H,W")
    targets_raw = parser.get("targets", "specs", fallback="")
    targets = [ComponentSpec.parse(s) for s in targets_raw.split(";") if s.strip()]
    cfg = RunConfig(
        dataset_dir=Path(ds["dir"]),
        labels_file=Path(ds.get("labels", str(Path(ds["dir"]) / "labels.tsv"))),
        output_dir=Path(parser["output"]["dir"]),
        attack=_parse_attack_section(parser["attack"] if "attack" in parser else None),
        backbone=ComponentSpec(
            parser.get("backbone", "kind", fallback="toy"),
            dict(parser["backbone"]) if "backbone" in parser else {},
        ),
        surrogate=ComponentSpec.parse(parser.get("surrogate", "spec", fallback="toy:seed=7")),
        targets=targets,
        metrics_accuracy=parser.getboolean("metrics", "accuracy", fallback=True),
        metrics_fid=parser.getboolean("metrics", "fid", fallback=True),
        resize=resize,  # type: ignore[arg-type]
        workers=parser.getint("run", "workers", fallback=1),
        config_text=text,
    )
    return cfg


class IngestError(ConfigurationError):
    def __init__(self, problems: list[str]) -> None:
        super().__init__("dataset ingestion failed:\n" + "\n".join(problems))
        self.problems = problems


def ingest_dataset(
    dataset_dir: Path, labels_file: Path, resize: tuple[int, int]
) -> list[tuple[ImageTensor, int, str]]:
    """Load, resize and normalize every labeled image, in filename order.

    Any image without a label entry (or unreadable file) is collected and the
    whole ingest aborts with the full list.
    """
    dataset_dir, labels_file = Path(dataset_dir), Path(labels_file)
    problems: list[str] = []
    labels: dict[str, tuple[int, str]] = {}
    if not labels_file.is_file():
        raise IngestError([f"labels file missing: {labels_file}"])
    for lineno, line in enumerate(labels_file.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            problems.append(f"{labels_file}:{lineno}: expected filename<TAB>index<TAB>name")
            continue
        labels[parts[0]] = (int(parts[1]), parts[2])
    files = sorted(
        p.name for p in dataset_dir.iterdir()
        if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp")
    )
    if not files and not problems:
        return []
    out: list[tuple[ImageTensor, int, str]] = []
    h, w = resize
    for name in files:
        if name not in labels:
            problems.append(f"no label entry for {name}")
            continue
        try:
            with Image.open(dataset_dir / name) as im:
                im = im.convert("RGB").resize((w, h), resample=Image.BILINEAR)
                arr = np.asarray(im, dtype=np.float64) / 255.0
        except Exception as exc:  # noqa: BLE001 - collected per file
            problems.append(f"unreadable image {name}: {exc}")
            continue
        idx, cls_name = labels[name]
        out.append((ImageTensor(torch.from_numpy(arr)), idx, cls_name))
    if problems:
        raise IngestError(problems)
    return out


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp-{os.getpid()}")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_image_png(img: ImageTensor, path: Path) -> None:
    arr = (img.data.detach().numpy() * 255.0).round().clip(0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def load_image_png(path: Path) -> ImageTensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return ImageTensor(torch.from_numpy(arr))


def trace_to_csv(result: AttackResult) -> str:
    lines = ["iteration,attack,transfer,structure,ext,total"]
    for i, e in enumerate(result.loss_trace):
        ext = "" if e.ext is None else repr(e.ext)
        lines.append(f"{i},{e.attack!r},{e.transfer!r},{e.structure!r},{ext},{e.total!r}")
    return "\n".join(lines) + "\n"


@dataclass
class RunManifest:
    version: str
    seed: int
    config_text: str
    records: list[dict]
    failures: list[dict]
    evaluation: dict

    def to_json(self) -> str:
        payload = {
            "version": self.version,
            "seed": self.seed,
            "config_text": self.config_text,
            "records": self.records,
            "failures": self.failures,
            "evaluation": self.evaluation,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        d = json.loads(text)
        return cls(
            version=d["version"],
            seed=d["seed"],
            config_text=d["config_text"],
            records=d["records"],
            failures=d["failures"],
            evaluation=d["evaluation"],
        )


def _build_backbone(spec: ComponentSpec) -> DiffusionBackbone:
    if spec.kind == "toy":
        kwargs = {}
        for f in dataclasses.fields(ToyBackboneConfig):
            if f.name in spec.params:
                value = spec.params[f.name]
                kwargs[f.name] = float(value) if f.type == "float" else int(value)
        return build_toy_backbone(ToyBackboneConfig(**kwargs))
    if spec.kind == "external":
        return _load_external(spec.params["path"])
    raise ConfigurationError(f"unknown backbone kind {spec.kind!r}")


def _load_external(path: str):
    """Load ``module.sub:factory`` and call the factory with no arguments."""
    module_name, _, attr = path.partition(":")
    if not attr:
        raise ConfigurationError(f"external spec {path!r} must be module:factory")
    factory = getattr(importlib.import_module(module_name), attr)
    return factory()


def _build_classifier(
    spec: ComponentSpec,
    samples: Sequence[tuple[ImageTensor, int, str]],
    label_set: tuple[str, ...],
) -> Classifier:
    if spec.kind == "toy":
        clf = ToyClassifier(spec.int_param("seed", 7), label_set)
        dataset = [(img, y) for img, y, _ in samples]
        return train_toy_classifier(clf, dataset, epochs=spec.int_param("epochs", 500))
    if spec.kind == "external":
        return _load_external(spec.params["path"])
    raise ConfigurationError(f"unknown classifier kind {spec.kind!r}")


def _label_set_from(samples: Sequence[tuple[ImageTensor, int, str]]) -> tuple[str, ...]:
    by_index: dict[int, str] = {}
    for _, idx, name in samples:
        if by_index.setdefault(idx, name) != name:
            raise ConfigurationError(f"label index {idx} maps to both {by_index[idx]!r} and {name!r}")
    if not by_index:
        raise ConfigurationError("dataset has no labels")
    k = max(by_index) + 1
    return tuple(by_index.get(i, f"class{i}") for i in range(k))


def run_pipeline(cfg: RunConfig) -> RunManifest:
    """Attack every dataset image, persist outputs, evaluate, and emit reports.

    Per-image errors are recorded and the run continues; the manifest reports
    the failure count.
    """
    out = Path(cfg.output_dir)
    adv_dir, trace_dir, reports_dir = out / "adversarial", out / "traces", out / "reports"
    for d in (adv_dir, trace_dir, reports_dir):
        d.mkdir(parents=True, exist_ok=True)

    samples = ingest_dataset(cfg.dataset_dir, cfg.labels_file, cfg.resize)
    names = sorted(
        p.name for p in Path(cfg.dataset_dir).iterdir()
        if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp")
    )

    records: list[dict] = []
    failures: list[dict] = []
    evaluation: dict = {}
    timings: dict = {}

    if samples:
        backbone = _build_backbone(cfg.backbone)
        if (cfg.resize[0], cfg.resize[1], 3) != backbone.image_shape:
            raise ConfigurationError(
                f"resize {cfg.resize} does not match backbone image shape {backbone.image_shape}"
            )
        label_set = _label_set_from(samples)
        surrogate = _build_classifier(cfg.surrogate, samples, label_set)
        targets = [_build_classifier(t, samples, label_set) for t in cfg.targets]

        def attack_one(item):
            name, (img, label, cls_name) = item
            if cfg.attack.text_attack:
                with torch.no_grad():
                    logits = surrogate.logits(img)
                order = torch.argsort(logits, descending=True)
                result = run_text_attack(
                    backbone, surrogate, img, int(order[0]), int(order[1]), cfg.attack
                )
            else:
                result = run_attack(backbone, surrogate, img, cls_name, cfg.attack)
            return name, img, label, cls_name, result

        items = list(zip(names, samples))
        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                outcomes = list(pool.map(lambda it: _safe(attack_one, it), items))
        else:
            outcomes = [_safe(attack_one, it) for it in items]

        adv_images, clean_images, labels = [], [], []
        for item, outcome in zip(items, outcomes):
            name = item[0]
            if isinstance(outcome, Exception):
                failures.append({"input": name, "error": f"{type(outcome).__name__}: {outcome}"})
                continue
            _, img, label, cls_name, result = outcome
            stem = Path(name).stem
            out_name = f"{stem}_adv.png"
            save_image_png(result.adversarial, adv_dir / out_name)
            trace_name = f"{stem}_trace.csv"
            atomic_write_text(trace_dir / trace_name, trace_to_csv(result))
            final = result.loss_trace[-1] if result.loss_trace else None
            records.append(
                {
                    "input": name,
                    "output": f"adversarial/{out_name}",
                    "trace": f"traces/{trace_name}",
                    "caption": result.caption,
                    "label": label,
                    "class_name": cls_name,
                    "pred_clean": result.pred_clean,
                    "pred_adv": result.pred_adv,
                    "success": result.success_on_surrogate,
                    "losses": {
                        "attack": final.attack if final else None,
                        "transfer": final.transfer if final else None,
                        "structure": final.structure if final else None,
                        "ext": final.ext if final else None,
                        "total": final.total if final else None,
                    },
                }
            )
            timings[name] = result.elapsed
            adv_images.append(load_image_png(adv_dir / out_name))
            clean_images.append(img)
            labels.append(label)

        if records and targets and cfg.metrics_accuracy:
            report = transfer_matrix(adv_images, clean_images, labels, targets, surrogate.name)
            evaluation["transfer"] = {
                "surrogate": report.surrogate_name,
                "rows": [dataclasses.asdict(r) for r in report.rows],
                "avg_adv_wo_self": report.avg_adv_wo_self,
                "avg_clean_wo_self": report.avg_clean_wo_self,
            }
        if records and cfg.metrics_fid:
            extractor = RandomProjectionFeatures(seed=cfg.attack.seed)
            evaluation["fid_adv_vs_clean"] = fid(extractor, adv_images, clean_images)

    manifest = RunManifest(
        version=__version__,
        seed=cfg.attack.seed,
        config_text=cfg.config_text or attack_config_to_ini(cfg.attack),
        records=records,
        failures=failures,
        evaluation=evaluation,
    )
    atomic_write_text(out / "manifest.json", manifest.to_json())
    atomic_write_text(
        out / "timings.json", json.dumps(timings, indent=2, sort_keys=True) + "\n"
    )
    emit_report(manifest, reports_dir, run_dir=out)
    return manifest


def _safe(fn, item):
    try:
        return fn(item)
    except Exception as exc:  # noqa: BLE001 - per-image containment
        return exc


def emit_report(manifest: RunManifest, reports_dir: Path, run_dir: Optional[Path] = None) -> list[Path]:
    """Write the transfer CSV, per-image loss-trace plots, and a text summary."""
    reports_dir = Path(reports_dir)
    reports_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    transfer = manifest.evaluation.get("transfer")
    csv_path = reports_dir / "transfer.csv"
    lines = ["target,clean_top1,adv_top1"]
    if transfer:
        for row in transfer["rows"]:
            lines.append(f"{row['name']},{row['clean_accuracy']!r},{row['adv_accuracy']!r}")
        avg_a, avg_c = transfer["avg_adv_wo_self"], transfer["avg_clean_wo_self"]
        if avg_a is None:
            lines.append("AVG(w/o self),undefined,undefined")
        else:
            lines.append(f"AVG(w/o self),{avg_c!r},{avg_a!r}")
    atomic_write_text(csv_path, "\n".join(lines) + "\n")
    written.append(csv_path)

    if run_dir is not None and manifest.records:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        for rec in manifest.records:
            trace_path = Path(run_dir) / rec["trace"]
            if not trace_path.is_file():
                continue
            rows = trace_path.read_text().splitlines()[1:]
            series: dict[str, list[float]] = {"attack": [], "transfer": [], "structure": [], "total": []}
            for row in rows:
                parts = row.split(",")
                series["attack"].append(float(parts[1]))
                series["transfer"].append(float(parts[2]))
                series["structure"].append(float(parts[3]))
                series["total"].append(float(parts[5]))
            fig, ax = plt.subplots(figsize=(5, 3))
            for key, vals in series.items():
                if vals:
                    ax.plot(vals, label=key)
            ax.set_xlabel("iteration")
            ax.set_ylabel("loss")
            ax.legend(fontsize=7)
            fig.tight_layout()
            plot_path = reports_dir / f"{Path(rec['input']).stem}_loss.png"
            fig.savefig(plot_path)
            plt.close(fig)
            written.append(plot_path)

    n = len(manifest.records)
    successes = sum(1 for r in manifest.records if r["success"])
    summary = [
        f"diffattack run (version {manifest.version}, seed {manifest.seed})",
        f"images attacked: {n}",
        f"per-image failures: {len(manifest.failures)}",
        f"surrogate success rate: {successes / n:.3f}" if n else "surrogate success rate: n/a",
    ]
    if transfer:
        summary.append(f"surrogate: {transfer['surrogate']}")
        for row in transfer["rows"]:
            summary.append(
                f"  target {row['name']}: clean {row['clean_accuracy']:.3f} "
                f"adv {row['adv_accuracy']:.3f}"
            )
        if transfer["avg_adv_wo_self"] is not None:
            summary.append(
                f"  AVG(w/o self): clean {transfer['avg_clean_wo_self']:.3f} "
                f"adv {transfer['avg_adv_wo_self']:.3f}"
            )
        else:
            summary.append("  AVG(w/o self): undefined (no non-surrogate target)")
    if "fid_adv_vs_clean" in manifest.evaluation:
        summary.append(f"fid(adversarial, clean): {manifest.evaluation['fid_adv_vs_clean']:.6f}")
    summary_path = reports_dir / "summary.txt"
    atomic_write_text(summary_path, "\n".join(summary) + "\n")
    written.append(summary_path)
    return written


def evaluate_run(cfg: RunConfig) -> RunManifest:
    """Recompute metrics for an existing run directory from its saved outputs."""
    out = Path(cfg.output_dir)
    manifest = RunManifest.from_json((out / "manifest.json").read_text(encoding="utf-8"))
    samples = ingest_dataset(cfg.dataset_dir, cfg.labels_file, cfg.resize)
    by_name = {name: s for name, s in zip(
        sorted(p.name for p in Path(cfg.dataset_dir).iterdir()
               if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp")),
        samples,
    )}
    adv_images, clean_images, labels = [], [], []
    for rec in manifest.records:
        sample = by_name.get(rec["input"])
        if sample is None:
            continue
        adv_images.append(load_image_png(out / rec["output"]))
        clean_images.append(sample[0])
        labels.append(sample[1])
    evaluation: dict = {}
    if adv_images:
        label_set = _label_set_from(samples)
        surrogate = _build_classifier(cfg.surrogate, samples, label_set)
        targets = [_build_classifier(t, samples, label_set) for t in cfg.targets]
        if targets and cfg.metrics_accuracy:
            report = transfer_matrix(adv_images, clean_images, labels, targets, surrogate.name)
            evaluation["transfer"] = {
                "surrogate": report.surrogate_name,
                "rows": [dataclasses.asdict(r) for r in report.rows],
                "avg_adv_wo_self": report.avg_adv_wo_self,
                "avg_clean_wo_self": report.avg_clean_wo_self,
            }
        if cfg.metrics_fid:
            extractor = RandomProjectionFeatures(seed=cfg.attack.seed)
            evaluation["fid_adv_vs_clean"] = fid(extractor, adv_images, clean_images)
    manifest.evaluation = evaluation
    atomic_write_text(out / "manifest.json", manifest.to_json())
    emit_report(manifest, out / "reports", run_dir=out)
    return manifest
