"""Experiment orchestration: config files, seeded stages, artifacts, sweeps and verification.

A run directory holds everything needed to re-derive its numbers::

    config.ini            the resolved configuration
    val.cbds, eval.cbds   clean validation pool and clean evaluation images
    eval_triggered.cbds   triggered evaluation images (non-target classes)
    model.ckpt            backdoored network
    verdicts.jsonl        one detection record per screened input
    repaired.ckpt         network after repair
    repair.json           repair report (checksums, changed tensors)
    report.json           every metric of the run
    timing.json           wall-clock figures (not reproducible by nature)
    summary.csv           one row per run, fixed header ``SUMMARY_FIELDS``
"""
from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import logging
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .cetf import AuxPool, DEConfig, DetectConfig, DetectionVerdict, detect, recount_transitions
from .errors import ConfigError, FormatError, LabError
from .metrics import MetricsReport, evaluate
from .micronet import (
    Network,
    NetworkConfig,
    checkpoint_bytes,
    load_checkpoint,
    reference_config,
    save_checkpoint,
    train,
)
from .poison import (
    Dataset,
    PoisonPolicy,
    TriggerSpec,
    load_dataset,
    poison_dataset,
    preset,
    save_dataset,
    stamp_images,
    synth_dataset,
)
from .region import Region
from .repair import (
    METHODS,
    RepairReport,
    build_repair_set,
    build_repair_set_from_trigger,
    changed_tensors,
    repair,
    tensor_groups,
)

log = logging.getLogger("cetflab")

SUMMARY_FIELDS = (
    "seed",
    "attack",
    "repair_method",
    "trigger_source",
    "n_clean",
    "n_poisoned",
    "accu",
    "asr",
    "flagged_clean",
    "flagged_poisoned",
    "accu_filtered",
    "asr_filtered",
    "accu_repaired",
    "asr_repaired",
    "model_sha256",
    "repaired_sha256",
)

# TriggerSpec fields that may be overridden from the [attack] section
_TRIGGER_KEYS = (
    "position",
    "row",
    "col",
    "size_policy",
    "size_min",
    "size_max",
    "count",
    "blend_weight",
    "blend_seed",
    "sig_amplitude",
    "sig_frequency",
)


class StageError(LabError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DataParams:
    n_train: int = 5000
    n_val: int = 1000
    n_eval: int = 1000
    classes: int = 10


@dataclass
class AttackParams:
    preset: str = "badnets"
    rate: float = 0.1
    target: int = 0
    overrides: dict = field(default_factory=dict)

    def trigger(self) -> TriggerSpec:
        try:
            return preset(self.preset, **self.overrides).validate()
        except LabError as e:
            raise ConfigError(str(e)) from e

    def policy(self, seed: int) -> PoisonPolicy:
        return PoisonPolicy(self.rate, self.target, seed)


@dataclass
class NetParams:
    widths: tuple = (16, 32)
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5


@dataclass
class TrainParams:
    epochs: int = 10
    lr: float = 0.05
    batch_size: int = 64
    schedule: str = "cosine"


@dataclass
class DetectParams:
    enabled: bool = True
    n_poisoned: int = 200
    n_clean: int = 200
    verdict_threshold: float = 0.5
    cam_threshold: float = 0.7
    dilation_frac: float = 0.25


@dataclass
class RepairParams:
    method: str = "bn_unlearn"
    trigger: str = "cetf"  # cetf | ground_truth
    per_class_count: int = 2
    epochs: int = 3
    lr: float = 0.01  # naive unlearning
    bn_lr: float = 0.1  # BN-unlearning
    passes: int = 10


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    data: DataParams = field(default_factory=DataParams)
    attack: AttackParams = field(default_factory=AttackParams)
    network: NetParams = field(default_factory=NetParams)
    train: TrainParams = field(default_factory=TrainParams)
    de: DEConfig = field(default_factory=DEConfig)
    detect: DetectParams = field(default_factory=DetectParams)
    repair: RepairParams = field(default_factory=RepairParams)

    def validate(self) -> "ExperimentConfig":
        d = self.data
        if d.classes < 2 or min(d.n_train, d.n_val, d.n_eval) < 1:
            raise ConfigError("data sizes must be positive and classes >= 2")
        if not 0 <= self.attack.target < d.classes:
            raise ConfigError("attack target must be a valid class")
        if not 0.0 <= self.attack.rate <= 1.0:
            raise ConfigError("poison rate must lie in [0,1]")
        self.attack.trigger()
        if not self.network.widths or min(self.network.widths) < 1:
            raise ConfigError("network widths must be positive")
        t = self.train
        if t.epochs < 0 or t.lr <= 0 or t.batch_size < 2 or t.schedule not in ("constant", "cosine"):
            raise ConfigError("invalid training parameters")
        try:
            self.detect_config().validate()
        except LabError as e:
            raise ConfigError(str(e)) from e
        if min(self.detect.n_poisoned, self.detect.n_clean) < 0:
            raise ConfigError("detection counts must be non-negative")
        r = self.repair
        if r.method not in METHODS or r.trigger not in ("cetf", "ground_truth"):
            raise ConfigError(f"repair method must be one of {METHODS}, trigger cetf|ground_truth")
        if r.per_class_count < 1 or r.epochs < 0 or r.passes < 0 or r.lr <= 0 or r.bn_lr <= 0:
            raise ConfigError("invalid repair parameters")
        return self

    def network_config(self) -> NetworkConfig:
        cfg = reference_config(tuple(self.network.widths), self.data.classes)
        return replace(cfg, bn_momentum=self.network.bn_momentum, bn_eps=self.network.bn_eps)

    def detect_config(self) -> DetectConfig:
        de = replace(self.de, seed=stage_seed(self.seed, "detect"))
        p = self.detect
        return DetectConfig(de, p.verdict_threshold, p.cam_threshold, p.dilation_frac)


_SECTIONS = {
    "data": DataParams,
    "attack": AttackParams,
    "network": NetParams,
    "train": TrainParams,
    "de": DEConfig,
    "detect": DetectParams,
    "repair": RepairParams,
}
_BOOLS = {"true": True, "yes": True, "1": True, "on": True, "false": False, "no": False, "0": False, "off": False}


def _convert(raw: str, like, where: str):
    try:
        if isinstance(like, bool):
            return _BOOLS[raw.strip().lower()]
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
        return raw.strip()
    except (KeyError, ValueError) as e:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from e


def _fill(obj, section: configparser.SectionProxy, name: str):
    known = {f.name: f for f in fields(obj)}
    updates, overrides = {}, {}
    template = TriggerSpec()
    for key, raw in section.items():
        if name == "attack" and key in _TRIGGER_KEYS:
            overrides[key] = _convert(raw, getattr(template, key), f"[{name}] {key}")
        elif key in known and key != "overrides" and not (name == "de" and key == "seed"):
            updates[key] = _convert(raw, getattr(obj, key), f"[{name}] {key}")
        else:
            raise ConfigError(f"unknown key [{name}] {key}")
    obj = replace(obj, **updates)
    if overrides:
        obj = replace(obj, overrides={**obj.overrides, **overrides})
    return obj


def parse_config(text: str) -> ExperimentConfig:
    """Read an INI document (see ``config_to_ini`` for every key and its default)."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from e
    cfg = ExperimentConfig()
    for name in parser.sections():
        section = parser[name]
        if name == "run":
            for key, raw in section.items():
                if key == "seed":
                    cfg.seed = _convert(raw, 0, "[run] seed")
                elif key == "out":
                    cfg.out = raw.strip()
                else:
                    raise ConfigError(f"unknown key [run] {key}")
        elif name in _SECTIONS:
            setattr(cfg, name, _fill(getattr(cfg, name), section, name))
        else:
            raise ConfigError(f"unknown section [{name}]")
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def config_to_ini(cfg: ExperimentConfig) -> str:
    """Canonical INI text; ``parse_config(config_to_ini(c)) == c``."""
    lines = ["[run]", f"seed = {cfg.seed}", f"out = {cfg.out}", ""]
    for name in _SECTIONS:
        obj = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in fields(obj):
            if f.name == "overrides" or (name == "de" and f.name == "seed"):
                continue
            lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
        if name == "attack":
            for key in sorted(obj.overrides):
                lines.append(f"{key} = {_format(obj.overrides[key])}")
        lines.append("")
    return "\n".join(lines)


def stage_seed(root: int, stage: str) -> int:
    """Child seed for a named stage, stable across runs and platforms."""
    seq = np.random.SeedSequence(int(root), spawn_key=(zlib.crc32(stage.encode("utf-8")),))
    return int(seq.generate_state(1, np.uint64)[0])


def training_key(cfg: ExperimentConfig) -> str:
    """Hash of everything that determines the backdoored model."""
    parts = {
        "seed": cfg.seed,
        "data": asdict(cfg.data),
        "attack": asdict(cfg.attack),
        "network": asdict(cfg.network),
        "train": asdict(cfg.train),
    }
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# stages


@dataclass
class Splits:
    clean_train: Dataset  # training set before poisoning
    train: Dataset  # poisoned training set
    val: Dataset  # defender's clean pool
    eval: Dataset  # clean evaluation images
    triggered: Dataset  # eval images of non-target classes with the trigger applied


def make_splits(cfg: ExperimentConfig) -> Splits:
    d = cfg.data
    spec = cfg.attack.trigger()
    train_set, test = synth_dataset(stage_seed(cfg.seed, "data"), d.n_train, d.n_val + d.n_eval, d.classes)
    poisoned = poison_dataset(train_set, spec, cfg.attack.policy(stage_seed(cfg.seed, "poison")))
    val = test.subset(np.arange(d.n_val))
    ev = test.subset(np.arange(d.n_val, d.n_val + d.n_eval))
    keep = np.flatnonzero(ev.labels != cfg.attack.target)
    images, regions = stamp_images(ev.images[keep], spec, stage_seed(cfg.seed, "trigger"))
    labels = ev.labels[keep]
    triggered = Dataset(images, labels.copy(), np.ones(len(keep), bool), labels.copy(), regions)
    return Splits(train_set, poisoned, val, ev, triggered)


def train_model(cfg: ExperimentConfig, train_set: Dataset, cache_dir=None) -> Network:
    """Train the backdoored model, reusing ``cache_dir/<training_key>.ckpt`` when present."""
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"{training_key(cfg)}.ckpt"
        if path.exists():
            log.info("loading cached model %s", path)
            return load_checkpoint(path)
    t = cfg.train
    net = Network(cfg.network_config(), seed=stage_seed(cfg.seed, "init"))
    train(
        net,
        train_set.images,
        train_set.labels,
        t.epochs,
        t.lr,
        t.batch_size,
        seed=stage_seed(cfg.seed, "train"),
        lr_schedule=t.schedule,
        log=log.info,
    )
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(net, path)
    return net


def detect_all(net: Network, images: np.ndarray, cfg: DetectConfig, pool: AuxPool, ids, threads: int = 1) -> list[DetectionVerdict]:
    """Screen every image; the output order follows ``ids`` whatever the pool size."""
    ids = [int(i) for i in ids]
    if len(ids) != len(images):
        raise LabError("one id per image required")

    def job(k):
        return detect(images[k], net, cfg, pool, input_id=ids[k])

    if threads <= 1:
        out = [job(k) for k in range(len(ids))]
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            out = list(ex.map(job, range(len(ids))))
    return sorted(out, key=lambda v: v.input_id)


def successful_attacks(net: Network, triggered: Dataset, target: int, limit: int) -> np.ndarray:
    """Rows of ``triggered`` the model sends to the target, first ``limit`` of them."""
    hits = np.flatnonzero(net.predict(triggered.images) == target)
    return hits[:limit]


def pick_trigger(records: list[dict]) -> dict | None:
    """Most convincing extraction among poisoned-set verdicts: highest transition
    ratio, then smallest region, then lowest id."""
    found = [r for r in records if r["set"] == "poisoned" and _flagged(r)]
    if not found:
        return None
    return min(found, key=lambda r: (-r["transition_ratio"], r["region"][2] * r["region"][3], r["input_id"]))


def _flagged(rec: dict) -> bool:
    return rec["verdict"] == "poisoned"


# ids: poisoned inputs keep their row in eval_triggered, clean ones are offset
CLEAN_ID_OFFSET = 1_000_000


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _float(x: float) -> str:
    return "nan" if x != x else repr(float(x))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")


def verdict_record(v: DetectionVerdict, kind: str, source: int) -> dict:
    rec = v.to_record()
    rec["set"] = kind
    rec["source"] = int(source)
    return rec


def summary_row(report: dict) -> dict:
    return {k: report[k] for k in SUMMARY_FIELDS}


def summary_text(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SUMMARY_FIELDS)
    for row in rows:
        writer.writerow([_float(row[k]) if isinstance(row[k], float) else row[k] for k in SUMMARY_FIELDS])
    return buf.getvalue()


def append_summary(path: Path, row: dict) -> None:
    text = summary_text([row])
    if path.exists() and path.stat().st_size:
        text = text.split("\n", 1)[1]
    with open(path, "a", encoding="utf-8", newline="") as fh:
        fh.write(text)


class Workspace:
    """Lazily computed pipeline stages backed by files in one run directory.

    Each stage is computed at most once per instance; stage failures surface as
    :class:`StageError` and leave earlier artifacts in place.
    """

    def __init__(self, cfg: ExperimentConfig, out=None, threads: int = 1, cache_dir=None):
        self.cfg = cfg.validate()
        self.out = Path(out if out is not None else cfg.out)
        self.threads = threads
        self.cache_dir = cache_dir
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.ini").write_text(config_to_ini(cfg), encoding="utf-8")
        self._splits: Splits | None = None
        self._net: Network | None = None
        self._records: list[dict] | None = None
        self.timing: dict = {}

    @property
    def target(self) -> int:
        return self.cfg.attack.target

    def _stage(self, name, fn):
        try:
            return fn()
        except StageError:
            raise
        except LabError as e:
            raise StageError(name, e) from e

    @property
    def splits(self) -> Splits:
        if self._splits is None:
            self._splits = self._stage("data", lambda: make_splits(self.cfg))
            save_dataset(self._splits.val, self.out / "val.cbds")
            save_dataset(self._splits.eval, self.out / "eval.cbds")
            save_dataset(self._splits.triggered, self.out / "eval_triggered.cbds")
        return self._splits

    @property
    def net(self) -> Network:
        if self._net is None:
            ckpt, key = self.out / "model.ckpt", self.out / "model.key"
            if ckpt.exists() and key.exists() and key.read_text().strip() == training_key(self.cfg):
                self._net = self._stage("train", lambda: load_checkpoint(ckpt))
            else:
                splits = self.splits
                self._net = self._stage("train", lambda: train_model(self.cfg, splits.train, self.cache_dir))
                save_checkpoint(self._net, ckpt)
                key.write_text(training_key(self.cfg) + "\n")
        return self._net

    def attack_eval(self, net: Network) -> MetricsReport:
        s = self.splits
        return evaluate(net, s.eval.images, s.eval.labels, s.triggered.images, self.target)

    def screened_rows(self) -> tuple[np.ndarray, np.ndarray]:
        """Successful-attack rows of the triggered set and clean rows that get screened."""
        hits = successful_attacks(self.net, self.splits.triggered, self.target, self.cfg.detect.n_poisoned)
        return hits, np.arange(min(self.cfg.detect.n_clean, len(self.splits.eval)))

    def screen(self) -> list[dict]:
        """Run the detector over both screened sets and write ``verdicts.jsonl``."""
        net, s = self.net, self.splits
        hits, clean_rows = self.screened_rows()
        dcfg = self.cfg.detect_config()

        def run():
            pool = AuxPool.from_images(net, s.val.images)
            vp = detect_all(net, s.triggered.images[hits], dcfg, pool, hits, self.threads)
            vc = detect_all(net, s.eval.images[clean_rows], dcfg, pool, clean_rows + CLEAN_ID_OFFSET, self.threads)
            return [verdict_record(v, "poisoned", r) for v, r in zip(vp, hits)] + [
                verdict_record(v, "clean", r) for v, r in zip(vc, clean_rows)
            ]

        self._records = self._stage("detect", run)
        with open(self.out / "verdicts.jsonl", "w", encoding="utf-8") as fh:
            for rec in self._records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return self._records

    def records(self) -> list[dict]:
        """Verdicts of this instance, else those on disk, else a fresh screening."""
        if self._records is None:
            path = self.out / "verdicts.jsonl"
            self._records = read_verdicts(path) if path.exists() else self.screen()
        return self._records

    def filtered(self) -> MetricsReport | None:
        recs = self.records()
        vp = [r for r in recs if r["set"] == "poisoned"]
        vc = [r for r in recs if r["set"] == "clean"]
        if not vp or not vc:
            return None
        s = self.splits
        crow = np.array([r["source"] for r in vc])
        return evaluate(
            self.net,
            s.eval.images[crow],
            s.eval.labels[crow],
            s.triggered.images[[r["source"] for r in vp]],
            self.target,
            clean_flagged=[_flagged(r) for r in vc],
            poisoned_flagged=[_flagged(r) for r in vp],
        )

    def repair(self) -> tuple[Network | None, dict | None]:
        """Repair with the configured method; ``(None, None)`` when no trigger was extracted."""
        r, s, net = self.cfg.repair, self.splits, self.net
        rseed = stage_seed(self.cfg.seed, "repair")
        source = None
        if r.trigger == "ground_truth":
            build = lambda: build_repair_set_from_trigger(s.val, self.cfg.attack.trigger(), r.per_class_count, rseed, self.cfg.data.classes)
        else:
            chosen = pick_trigger(self.records())
            if chosen is None:
                log.warning("no trigger extracted; repair skipped")
                for name in ("repaired.ckpt", "repair.json"):
                    (self.out / name).unlink(missing_ok=True)
                return None, None
            source = chosen["input_id"]
            region = Region.from_list(chosen["region"])
            rows, cols = region.slices()
            patch = s.triggered.images[chosen["source"]][:, rows, cols]
            build = lambda: build_repair_set(s.val, patch, region, r.per_class_count, rseed, self.cfg.data.classes)

        def run():
            rs = build()
            lr = r.bn_lr if r.method == "bn_unlearn" else r.lr
            return repair(net, r.method, rs, r.epochs, lr, r.passes, rseed, lambda m: _pair(self.attack_eval(m)))

        fixed, report = self._stage("repair", run)
        save_checkpoint(fixed, self.out / "repaired.ckpt")
        rec = report.to_record()
        self.timing["repair_epoch_seconds"] = rec.pop("epoch_seconds")
        rec["trigger_source_id"] = source
        _write_json(self.out / "repair.json", rec)
        return fixed, rec


def _pair(m: MetricsReport) -> tuple[float, float]:
    return m.accu, m.asr


def run_experiment(cfg: ExperimentConfig, out=None, threads: int = 1, cache_dir=None) -> Path:
    """train -> attack eval -> screen -> repair -> re-eval, with every artifact on disk."""
    ws = Workspace(cfg, out, threads, cache_dir)
    base = ws.attack_eval(ws.net)
    log.info("backdoored model: accu %.4f asr %.4f", base.accu, base.asr)
    filtered = None
    if cfg.detect.enabled:
        ws.screen()
        filtered = ws.filtered()
    else:
        (ws.out / "verdicts.jsonl").unlink(missing_ok=True)
        ws._records = []
    fixed, rep = ws.repair()
    out = ws.out
    report = {
        "seed": cfg.seed,
        "attack": cfg.attack.preset,
        "repair_method": cfg.repair.method,
        "trigger_source": cfg.repair.trigger,
        "n_clean": filtered.n if filtered else 0,
        "n_poisoned": filtered.m if filtered else 0,
        "accu": base.accu,
        "asr": base.asr,
        "flagged_clean": filtered.flagged_clean if filtered else 0,
        "flagged_poisoned": filtered.flagged_poisoned if filtered else 0,
        "accu_filtered": filtered.accu_accepted if filtered else float("nan"),
        "asr_filtered": filtered.asr if filtered else float("nan"),
        "accu_repaired": rep["accu_after"] if rep else float("nan"),
        "asr_repaired": rep["asr_after"] if rep else float("nan"),
        "model_sha256": _sha(out / "model.ckpt"),
        "repaired_sha256": _sha(out / "repaired.ckpt") if fixed is not None else "",
        "base": base.to_record(),
        "filtered": filtered.to_record() if filtered else None,
    }
    _write_json(out / "report.json", report)
    _write_json(out / "timing.json", ws.timing)
    append_summary(out / "summary.csv", summary_row(report))
    return out


# ---------------------------------------------------------------------------
# sweeps and histograms


SWEEP_PARAMETERS = {"individuals": "population_size", "alpha": "alpha"}


def sweep(
    net: Network,
    images: np.ndarray,
    pool: AuxPool,
    base: DetectConfig,
    parameter: str,
    values,
    threads: int = 1,
) -> list[dict]:
    """Post-defense ASR over fixed successful-attack inputs for each parameter value.

    Every input attacks successfully before screening, so the ASR is the share
    the detector lets through.
    """
    if parameter not in SWEEP_PARAMETERS:
        raise ConfigError(f"sweep parameter must be one of {sorted(SWEEP_PARAMETERS)}")
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    rows = []
    for value in values:
        value = int(value) if parameter == "individuals" else float(value)
        cfg = replace(base, de=replace(base.de, **{SWEEP_PARAMETERS[parameter]: value}))
        verdicts = detect_all(net, images, cfg, pool, range(len(images)), threads)
        flagged = sum(v.poisoned for v in verdicts)
        rows.append({"parameter": parameter, "value": value, "n": len(images), "flagged": flagged,
                     "asr": (len(images) - flagged) / len(images)})
    return rows


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["parameter", "value", "n", "flagged", "asr"])
    for r in rows:
        w.writerow([r["parameter"], r["value"], r["n"], r["flagged"], repr(r["asr"])])
    return buf.getvalue()


HISTOGRAM_BINS = 10


def transition_histogram(
    net: Network,
    clean_images: np.ndarray,
    poisoned_images: np.ndarray,
    cfg: DetectConfig,
    pool: AuxPool,
    threads: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Transition ratios of every screened input; a search that finds nothing counts as 0."""
    if len(clean_images) == 0 or len(poisoned_images) == 0:
        raise ConfigError("histogram needs clean and poisoned inputs")
    vc = detect_all(net, clean_images, cfg, pool, np.arange(len(clean_images)) + CLEAN_ID_OFFSET, threads)
    vp = detect_all(net, poisoned_images, cfg, pool, range(len(poisoned_images)), threads)
    return np.array([v.transition_ratio for v in vc]), np.array([v.transition_ratio for v in vp])


def histogram_counts(ratios: np.ndarray, bins: int = HISTOGRAM_BINS) -> np.ndarray:
    """Counts over ``[k/bins, (k+1)/bins)``, the last bin closed at 1."""
    # ratios are k/h exactly; the small offset keeps k/10 out of the bin below
    idx = np.minimum(np.floor(np.asarray(ratios) * bins + 1e-9).astype(int), bins - 1)
    return np.bincount(idx, minlength=bins)


def histogram_csv(clean: np.ndarray, poisoned: np.ndarray, bins: int = HISTOGRAM_BINS) -> str:
    c, p = histogram_counts(clean, bins), histogram_counts(poisoned, bins)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_low", "bin_high", "clean", "poisoned"])
    for k in range(bins):
        w.writerow([f"{k / bins:.1f}", f"{(k + 1) / bins:.1f}", int(c[k]), int(p[k])])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# verification


def read_verdicts(path) -> list[dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"cannot read verdicts {path}: {e}") from e


def _close(a, b) -> bool:
    if isinstance(a, float) and isinstance(b, float) and math.isnan(a) and math.isnan(b):
        return True
    return a == b


def verify(run_dir) -> list[str]:
    """Recompute every reported number from the stored artifacts; returns mismatches."""
    run = Path(run_dir)
    problems: list[str] = []
    try:
        report = json.loads((run / "report.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"cannot read report in {run}: {e}") from e
    cfg = load_config(run / "config.ini")
    target = cfg.attack.target
    val = load_dataset(run / "val.cbds")
    ev = load_dataset(run / "eval.cbds")
    trig = load_dataset(run / "eval_triggered.cbds")
    net = load_checkpoint(run / "model.ckpt")

    def check(name, got, want):
        if not _close(got, want):
            problems.append(f"{name}: stored {want!r}, recomputed {got!r}")

    check("model_sha256", _sha(run / "model.ckpt"), report["model_sha256"])
    base = evaluate(net, ev.images, ev.labels, trig.images, target)
    check("accu", base.accu, report["accu"])
    check("asr", base.asr, report["asr"])

    if (run / "verdicts.jsonl").exists():
        recs = read_verdicts(run / "verdicts.jsonl")
        vp = [r for r in recs if r["set"] == "poisoned"]
        vc = [r for r in recs if r["set"] == "clean"]
        for r in recs:
            images = trig.images if r["set"] == "poisoned" else ev.images
            image = images[r["source"]]
            pred = int(net.predict(image[None])[0])
            check(f"verdict {r['input_id']} prediction", pred, r["prediction"])
            check(f"verdict {r['input_id']} forward passes", r["evaluations"] * (1 + cfg.de.aux_count), r["forward_passes"])
            if r["evaluations"] > cfg.de.population_size * (1 + r["generations"]):
                problems.append(f"verdict {r['input_id']}: evaluations exceed the generation budget")
            trace = r["fitness_trace"]
            if any(b < a for a, b in zip(trace, trace[1:])):
                problems.append(f"verdict {r['input_id']}: fitness trace decreases")
            if r["region"] is None:
                check(f"verdict {r['input_id']} ratio", 0.0, r["transition_ratio"])
                check(f"verdict {r['input_id']} verdict", False, _flagged(r))
                continue
            region = Region.from_list(r["region"])
            ratio = recount_transitions(net, image, region, val.images[r["aux_indices"]], pred)
            check(f"verdict {r['input_id']} ratio", ratio, r["transition_ratio"])
            check(f"verdict {r['input_id']} verdict", ratio > cfg.detect.verdict_threshold, _flagged(r))
        prow = np.array([r["source"] for r in vp], dtype=int)
        crow = np.array([r["source"] for r in vc], dtype=int)
        if len(prow) and len(crow):
            filt = evaluate(net, ev.images[crow], ev.labels[crow], trig.images[prow], target,
                            clean_flagged=[_flagged(r) for r in vc], poisoned_flagged=[_flagged(r) for r in vp])
            check("asr_filtered", filt.asr, report["asr_filtered"])
            check("accu_filtered", filt.accu_accepted, report["accu_filtered"])
            check("flagged_clean", filt.flagged_clean, report["flagged_clean"])
            check("flagged_poisoned", filt.flagged_poisoned, report["flagged_poisoned"])

    if (run / "repaired.ckpt").exists():
        fixed = load_checkpoint(run / "repaired.ckpt")
        check("repaired_sha256", _sha(run / "repaired.ckpt"), report["repaired_sha256"])
        post = evaluate(fixed, ev.images, ev.labels, trig.images, target)
        check("accu_repaired", post.accu, report["accu_repaired"])
        check("asr_repaired", post.asr, report["asr_repaired"])
        changed = changed_tensors(net, fixed)
        groups = tensor_groups(net)
        allowed = {
            "naive": set(net.state_dict()),
            "bn_unlearn": set(groups["bn_affine"]) | set(groups["bn_running"]),
            "bn_clean": set(groups["bn_running"]),
        }[cfg.repair.method]
        stray = sorted(set(changed) - allowed)
        if stray:
            problems.append(f"{cfg.repair.method} changed tensors outside its scope: {stray}")
        rep = json.loads((run / "repair.json").read_text(encoding="utf-8"))
        check("repair changed list", changed, rep["changed"])

    try:
        with open(run / "summary.csv", encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as e:
        raise FormatError(f"cannot read summary in {run}: {e}") from e
    if not rows or tuple(rows[0]) != SUMMARY_FIELDS:
        problems.append("summary.csv header differs from SUMMARY_FIELDS")
    else:
        want = summary_text([summary_row(report)]).splitlines()[1].split(",")
        check("summary.csv last row", rows[-1], want)
    return problems


def checkpoint_digest(net: Network) -> str:
    return hashlib.sha256(checkpoint_bytes(net)).hexdigest()
