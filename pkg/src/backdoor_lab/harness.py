"""Experiment configuration, the attack/defend pipeline and seed sweeps.

A configuration is flat ``key = value`` text with dotted section prefixes::

    # desk defaults
    attack.trigger = blended
    relearn.alpha = 0.7
    run.seeds = 0,1,2

Unknown keys are errors. Every random draw in a run is derived from the run
seed plus a fixed string key, so a (config, seed) pair pins down every output
byte.
"""

from dataclasses import dataclass, field, fields, replace, asdict
import hashlib
import io
import logging
import os

import numpy as np

from . import checkpoint, data, nn, train
from .errors import BackdoorLabError, ConfigError, FixtureGateError, InputError
from .relearn import RelearnConfig, ulrl_defend
from .rng import make_rng
from .train import TrainConfig
from .unlearn import UnlearnConfig

__all__ = [
    "DataConfig", "ModelSpec", "AttackConfig", "IdentifyConfig", "DefenseConfig",
    "RunConfig", "ExperimentConfig", "SweepSpec", "SWEEP_PARAMETERS",
    "parse_config", "load_config", "config_text", "config_hash", "Fixture",
    "build_fixture", "run_attack", "run_defense", "defend_seed", "run_seed",
    "run_sweep", "aggregate", "results_csv",
    "cmd_gen_data", "cmd_attack", "cmd_defend", "cmd_sweep", "cmd_eval",
    "GATE_C_ACC", "GATE_ASR",
]

log = logging.getLogger(__name__)

GATE_C_ACC = 0.90
GATE_ASR = 0.95


@dataclass(frozen=True)
class DataConfig:
    num_classes: int = 4
    train_per_class: int = 500
    test_per_class: int = 200
    channels: int = 3
    height: int = 8
    width: int = 8
    separation: float = 0.8
    noise: float = 0.15

    @property
    def image_shape(self):
        return (self.channels, self.height, self.width)


@dataclass(frozen=True)
class ModelSpec:
    conv: tuple = ()
    hidden: tuple = (64, 32)


@dataclass(frozen=True)
class AttackConfig:
    trigger: str = "patch"
    poison_rate: float = 0.1
    target: int = 0
    patch_size: int = 3
    blend_alpha: float = 0.2
    amplitude: float = 40 / 255
    frequency: int = 6


@dataclass(frozen=True)
class IdentifyConfig:
    method: str = "mad"
    tau: float = 3.5
    hard_threshold: int = 2
    random_neurons: int = 0  # > 0 switches to the random-selection ablation


@dataclass(frozen=True)
class DefenseConfig:
    fraction: float = 0.01


@dataclass(frozen=True)
class RunConfig:
    seeds: tuple = tuple(range(10))
    check_gates: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    attack: AttackConfig = field(default_factory=AttackConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    # at K = 4 a fully collapsed model still scores 1/K = 0.25 on a balanced set
    unlearn: UnlearnConfig = field(default_factory=lambda: UnlearnConfig(ca_min=0.25))
    identify: IdentifyConfig = field(default_factory=IdentifyConfig)
    relearn: RelearnConfig = field(default_factory=RelearnConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        if not self.run.seeds:
            raise ConfigError("run.seeds must not be empty")
        if any(s < 0 for s in self.run.seeds):
            raise ConfigError("seeds must be non-negative")

    def with_value(self, key, value):
        """Copy with one dotted key replaced; ``value`` may be text or typed."""
        section, _, name = key.partition(".")
        sub = getattr(self, section, None) if name else None
        if sub is None or name not in {f.name for f in fields(sub)}:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str):
            value = _coerce(key, getattr(sub, name), value)
        try:
            return replace(self, **{section: replace(sub, **{name: value})})
        except InputError as exc:
            raise ConfigError(f"{key}: {exc}") from None


# sections whose per-seed ``seed`` field is filled in from the run seed
_SEEDED = ("train", "unlearn", "relearn")


def _coerce(key, default, text):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(t) for t in text.replace(" ", "").split(",") if t)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def parse_config(text, base=None):
    """Parse ``key = value`` lines on top of ``base`` (defaults if omitted)."""
    cfg = base or ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key = key.strip()
        if key.endswith(".seed") and key.split(".")[0] in _SEEDED:
            raise ConfigError(f"line {lineno}: {key} is derived from run.seeds")
        try:
            cfg = cfg.with_value(key, value)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return cfg


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def config_text(cfg):
    """Canonical ``key = value`` rendering (sorted, seeds excluded per section)."""
    lines = []
    for section, values in asdict(cfg).items():
        for name, value in values.items():
            if section in _SEEDED and name == "seed":
                continue
            if isinstance(value, (tuple, list)):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{section}.{name} = {value}")
    return "\n".join(sorted(lines)) + "\n"


def config_hash(cfg):
    return hashlib.sha256(config_text(cfg).encode()).hexdigest()


def data_config_hash(cfg):
    """Hash of the keys that determine the generated datasets."""
    lines = [ln for ln in config_text(cfg).splitlines() if ln.startswith(("data.", "attack."))]
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()


# -- pipeline ---------------------------------------------------------------

@dataclass
class Fixture:
    train_clean: data.LabeledDataset
    test: data.LabeledDataset
    train_poisoned: data.LabeledDataset
    trigger: object
    seed: int


def make_trigger(cfg):
    a = cfg.attack
    return data.make_trigger(a.trigger, cfg.data.image_shape, size=a.patch_size,
                             alpha=a.blend_alpha, amplitude=a.amplitude,
                             frequency=a.frequency)


def build_fixture(cfg, seed):
    d = cfg.data
    rng = make_rng(seed, "data")
    protos = data.make_prototypes(d.num_classes, d.image_shape, d.separation, rng)
    args = (d.channels, d.height, d.width, d.separation, d.noise, rng)
    tr = data.gen_synthetic(d.num_classes, d.train_per_class, *args, prototypes=protos)
    te = data.gen_synthetic(d.num_classes, d.test_per_class, *args, prototypes=protos)
    spec = make_trigger(cfg)
    plan = data.PoisonPlan(cfg.attack.poison_rate, cfg.attack.target)
    poisoned = data.poison_dataset(tr, spec, plan, make_rng(seed, "poison"))
    return Fixture(tr, te, poisoned, spec, seed)


def monitor_for(cfg, fixture):
    target = cfg.attack.target
    return lambda m: (train.clean_accuracy(m, fixture.test),
                      train.attack_success_rate(m, fixture.test, fixture.trigger, target))


def run_attack(cfg, fixture):
    """Train a fresh desk model on the poisoned split. Returns ``(model, MetricsReport)``."""
    seed = fixture.seed
    model = nn.build_model(cfg.data.image_shape, cfg.data.num_classes, make_rng(seed, "init"),
                           conv=cfg.model.conv, hidden=cfg.model.hidden)
    tcfg = replace(cfg.train, seed=seed)
    return train.train_backdoored(model, fixture.train_poisoned, tcfg,
                                  monitor=monitor_for(cfg, fixture))


def check_gates(report, seed):
    if report.clean_accuracy < GATE_C_ACC or report.attack_success_rate < GATE_ASR:
        raise FixtureGateError(
            f"seed {seed}: fixture gates failed (C-ACC {report.clean_accuracy:.4f} "
            f"needs >= {GATE_C_ACC}, ASR {report.attack_success_rate:.4f} needs >= {GATE_ASR})")


def run_defense(cfg, model, fixture):
    """Run the full defense on ``model``. Returns ``(purified, SuspicionReport, MetricsReport)``."""
    seed = fixture.seed
    dd = data.sample_defense_set(fixture.train_clean, cfg.defense.fraction,
                                 make_rng(seed, "defense"))
    idf = cfg.identify
    return ulrl_defend(model, dd, replace(cfg.unlearn, seed=seed),
                       replace(cfg.relearn, seed=seed), make_rng(seed, "reinit"),
                       method=idf.method, tau=idf.tau, hard_threshold=idf.hard_threshold,
                       random_neurons=idf.random_neurons or None,
                       monitor=monitor_for(cfg, fixture))


@dataclass
class SeedResult:
    seed: int
    c_acc_before: float = float("nan")
    asr_before: float = float("nan")
    c_acc_after: float = float("nan")
    asr_after: float = float("nan")
    flagged: list = field(default_factory=list)
    epochs_used: int = 0
    status: str = "ok"
    error: BackdoorLabError = None

    @property
    def ok(self):
        return self.error is None


def defend_seed(cfg, model, fixture):
    """Defend one model, capturing library errors in the result.

    Returns ``(SeedResult, outputs)`` where ``outputs`` is the
    ``(purified, SuspicionReport, MetricsReport)`` triple or ``None`` on error.
    """
    c0, a0 = monitor_for(cfg, fixture)(model)
    res = SeedResult(fixture.seed, c0, a0)
    try:
        outputs = run_defense(cfg, model, fixture)
    except BackdoorLabError as exc:
        log.error("seed %d: %s", fixture.seed, exc)
        res.status, res.error = type(exc).__name__, exc
        res.epochs_used = getattr(exc, "epochs_used", 0)
        return res, None
    _, report, metrics = outputs
    res.c_acc_after = metrics.clean_accuracy
    res.asr_after = metrics.attack_success_rate
    res.flagged = list(report.flagged)
    res.epochs_used = report.epochs_used
    if report.fine_tune_only:
        res.status = "fine_tune_only"
    return res, outputs


def run_seed(cfg, seed, defend=True, model=None, fixture=None):
    """Attack (unless ``model`` is given) and optionally defend for one seed."""
    fixture = fixture or build_fixture(cfg, seed)
    if model is None:
        model, _ = run_attack(cfg, fixture)
    if not defend:
        c0, a0 = monitor_for(cfg, fixture)(model)
        return SeedResult(seed, c0, a0)
    return defend_seed(cfg, model, fixture)[0]


# -- CSV helpers ------------------------------------------------------------

def _f(x):
    return "" if x is None or np.isnan(x) else f"{float(x):.6f}"


RESULT_COLUMNS = ("c_acc_before", "asr_before", "c_acc_after", "asr_after", "n_flagged")


def aggregate(results):
    """``{stat: {column: value}}`` with mean/min/max over seeds that have a value."""
    out = {}
    for stat, fn in (("mean", np.mean), ("min", np.min), ("max", np.max)):
        row = {}
        for col in RESULT_COLUMNS:
            vals = [len(r.flagged) if col == "n_flagged" else getattr(r, col) for r in results
                    if r.ok or col in ("c_acc_before", "asr_before")]
            vals = [v for v in vals if not np.isnan(v)]
            row[col] = float(fn(vals)) if vals else float("nan")
        out[stat] = row
    return out


def _result_row(r):
    return (f"{_f(r.c_acc_before)},{_f(r.asr_before)},"
            f"{_f(r.c_acc_after)},{_f(r.asr_after)},{len(r.flagged) if r.ok else ''},"
            f"{';'.join(map(str, r.flagged))},{r.epochs_used},{r.status}")


def results_csv(results, lead=(), lead_values=None):
    """Per-seed rows followed by mean/min/max rows; ``lead`` columns come first."""
    buf = io.StringIO()
    head = ",".join((*lead, "seed", "c_acc_before", "asr_before", "c_acc_after",
                     "asr_after", "n_flagged", "flagged", "epochs_used", "status"))
    buf.write(head + "\n")
    groups = lead_values or [((), results)]
    for values, group in groups:
        prefix = "".join(f"{v}," for v in values)
        for r in group:
            buf.write(f"{prefix}{r.seed},{_result_row(r)}\n")
        for stat, row in aggregate(group).items():
            buf.write(f"{prefix}{stat},{_f(row['c_acc_before'])},{_f(row['asr_before'])},"
                      f"{_f(row['c_acc_after'])},{_f(row['asr_after'])},"
                      f"{_f(row['n_flagged'])},,,\n")
    return buf.getvalue()


def _write(path, text):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _seed_dir(out, seed):
    return os.path.join(out, f"seed-{seed}")


# -- commands ---------------------------------------------------------------

DATA_FILES = ("train_clean.ulrd", "test.ulrd", "train_poisoned.ulrd")


def cmd_gen_data(cfg, out):
    """Write clean/test/poisoned datasets per seed plus ``manifest.txt``."""
    lines = [f"config_sha256 = {config_hash(cfg)}",
             f"data_config_sha256 = {data_config_hash(cfg)}"]
    for seed in cfg.run.seeds:
        fx = build_fixture(cfg, seed)
        d = _seed_dir(out, seed)
        os.makedirs(d, exist_ok=True)
        for name, ds in zip(DATA_FILES, (fx.train_clean, fx.test, fx.train_poisoned)):
            blob = data.dataset_to_bytes(ds)
            with open(os.path.join(d, name), "wb") as fh:
                fh.write(blob)
            lines.append(f"seed-{seed}/{name} = {hashlib.sha256(blob).hexdigest()}")
    _write(os.path.join(out, "manifest.txt"), "\n".join(lines) + "\n")
    _write(os.path.join(out, "config.txt"), config_text(cfg))
    return 0


def _read_manifest(out):
    path = os.path.join(out, "manifest.txt")
    if not os.path.exists(path):
        raise ConfigError(f"no manifest under {out}; run gen-data first")
    with open(path, encoding="utf-8") as fh:
        return dict(line.split(" = ", 1) for line in fh.read().splitlines() if " = " in line)


def _load_fixture(cfg, out, seed):
    if _read_manifest(out).get("data_config_sha256") != data_config_hash(cfg):
        raise ConfigError(f"datasets under {out} were generated with a different "
                          "data/attack config; rerun gen-data")
    d = _seed_dir(out, seed)
    paths = [os.path.join(d, n) for n in DATA_FILES]
    if not all(os.path.exists(p) for p in paths):
        raise ConfigError(f"datasets for seed {seed} not found under {d}; run gen-data first")
    tr, te, po = (data.load_dataset(p) for p in paths)
    return Fixture(tr, te, po, make_trigger(cfg), seed)


def cmd_attack(cfg, out):
    """Train one backdoored model per seed; raise on gate failure after writing outputs."""
    failures = []
    for seed in cfg.run.seeds:
        fx = _load_fixture(cfg, out, seed)
        model, report = run_attack(cfg, fx)
        d = _seed_dir(out, seed)
        checkpoint.save_model(model, os.path.join(d, "backdoored.ulrl"))
        _write(os.path.join(d, "attack.csv"), report.to_csv())
        log.info("seed %d: C-ACC %.4f ASR %.4f", seed, report.clean_accuracy,
                 report.attack_success_rate)
        if cfg.run.check_gates:
            try:
                check_gates(report, seed)
            except FixtureGateError as exc:
                failures.append(str(exc))
    if failures:
        raise FixtureGateError("; ".join(failures))
    return 0


def cmd_defend(cfg, out, checkpoint_path=None):
    """Defend each seed's checkpoint; write per-seed CSVs and ``defend.csv``.

    Seeds that fail are reported and skipped; the last error is raised only if
    every seed failed.
    """
    results = []
    for seed in cfg.run.seeds:
        d = _seed_dir(out, seed)
        fx = _load_fixture(cfg, out, seed)
        path = checkpoint_path or os.path.join(d, "backdoored.ulrl")
        if not os.path.exists(path):
            raise ConfigError(f"checkpoint {path} not found; run attack first")
        res, outputs = defend_seed(cfg, checkpoint.load_model(path), fx)
        results.append(res)
        if outputs is None:
            continue
        purified, report, metrics = outputs
        checkpoint.save_model(purified, os.path.join(d, "purified.ulrl"))
        _write(os.path.join(d, "defense.csv"), report.to_csv() + metrics.to_csv())
    _write(os.path.join(out, "defend.csv"), results_csv(results))
    if all(not r.ok for r in results):
        raise results[-1].error
    return 0


@dataclass(frozen=True)
class SweepSpec:
    parameter: str
    values: tuple
    base: ExperimentConfig = field(default_factory=ExperimentConfig)

    def __post_init__(self):
        if self.parameter not in SWEEP_PARAMETERS:
            raise ConfigError(f"unknown sweep parameter {self.parameter!r}; "
                              f"choose from {sorted(SWEEP_PARAMETERS)}")
        if not self.values:
            raise ConfigError("sweep value list is empty")

    def configs(self):
        key = SWEEP_PARAMETERS[self.parameter]
        return [(v, self.base.with_value(key, str(v))) for v in self.values]


SWEEP_PARAMETERS = {
    "defense_fraction": "defense.fraction",
    "tau": "identify.tau",
    "hard_threshold": "identify.hard_threshold",
    "alpha": "relearn.alpha",
    "poison_rate": "attack.poison_rate",
    "dispersion_method": "identify.method",
    "regularizer": "relearn.regularizer",
}

# sweeps over these reuse one trained model per seed
_DEFENSE_ONLY = {"defense_fraction", "tau", "hard_threshold", "alpha",
                 "dispersion_method", "regularizer"}


def run_sweep(spec):
    """Return ``[(value, [SeedResult, ...]), ...]`` covering seeds x values once each."""
    configs = spec.configs()
    groups = [(v, []) for v, _ in configs]
    for seed in spec.base.run.seeds:
        cached = None
        for (value, cfg), (_, group) in zip(configs, groups):
            if spec.parameter in _DEFENSE_ONLY:
                if cached is None:
                    fx = build_fixture(cfg, seed)
                    cached = (fx, run_attack(cfg, fx)[0])
                fx, model = cached
                group.append(run_seed(cfg, seed, model=model, fixture=fx))
            else:
                group.append(run_seed(cfg, seed))
    return groups


def cmd_sweep(spec, out):
    groups = run_sweep(spec)
    text = results_csv(None, lead=("parameter", "value"),
                       lead_values=[((spec.parameter, v), g) for v, g in groups])
    _write(os.path.join(out, f"sweep_{spec.parameter}.csv"), text)
    return 0


def cmd_eval(cfg, out, checkpoint_path):
    """Evaluate a checkpoint on each seed's test split; write ``eval.csv``."""
    if not os.path.exists(checkpoint_path):
        raise ConfigError(f"checkpoint {checkpoint_path} not found")
    model = checkpoint.load_model(checkpoint_path)
    buf = io.StringIO()
    buf.write("seed,c_acc,asr\n")
    for seed in cfg.run.seeds:
        fx = _load_fixture(cfg, out, seed)
        c, a = monitor_for(cfg, fx)(model)
        buf.write(f"{seed},{_f(c)},{_f(a)}\n")
    _write(os.path.join(out, "eval.csv"), buf.getvalue())
    return 0
