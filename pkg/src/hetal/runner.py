"""The acquisition loop, experiment configs, metrics and result files."""

from __future__ import annotations

import csv
import json
import math
import time
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from hetal.acquisition import AcquisitionRequest, Strategy, acquire
from hetal.data import (
    DataPool,
    NoiseKind,
    NoiseSpec,
    apply_noise,
    init_pool,
    make_four_moons,
    make_mini_images,
)
from hetal.errors import ConfigurationError, HetalError, InputError, PreconditionError
from hetal.finetune import AugmentSpec, FinetuneConfig, finetune
from hetal.nn import EmaState, ModelConfig, ModelState, accuracy, forward, init_state, train
from hetal import svg

CSV_COLUMNS = ("seed", "strategy", "round", "test_acc", "clean_selected", "k", "cum_clean_frac", "train_loss", "wall_ms")
DATASETS = ("four_moons", "mini_images")


@dataclass
class ExperimentConfig:
    dataset: str = "mini_images"
    noise: str = "noisy_blank"
    strategy: str = "rand"
    rounds: int = 10
    k: int = 100
    init_labeled: int = 200
    finetune: bool = False
    seeds: tuple[int, ...] = (0,)
    out: Optional[str] = None

    # data
    n_per_class: int = 200
    n_test_per_class: int = 100
    n_classes: int = 10
    image_noise: float = 0.3
    moon_noise: float = 0.1
    noisy_moon: int = 2
    n_noisy: Optional[int] = None  # default: enough to reach `mix`
    k_unique: Optional[int] = None  # default: 1 blank / 100 diverse / 100 class
    target_class: int = 1
    mix: Optional[float] = 0.8

    # model and training
    hidden: tuple[int, ...] = (128, 64)
    dropout: Optional[float] = None  # default: 0.1 for bald, else 0
    epochs: int = 300
    batch_size: int = 64
    lr: float = 1e-3
    ema_alpha: float = 0.99
    bald_passes: int = 10

    # fine-tuning
    ft_threshold: float = 0.8
    ft_epochs: int = 100
    ft_lr: float = 1e-3
    aug_jitter: float = 0.1
    aug_feature_dropout: float = 0.0
    aug_channel_scale: float = 0.0
    aug_cutout: float = 0.0
    aug_ops: Optional[int] = None

    record_wall_time: bool = True

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.dataset not in DATASETS:
            raise ConfigurationError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        NoiseKind(self.noise)
        Strategy(self.strategy)
        if self.rounds < 1 or self.k < 1 or self.init_labeled < 0:
            raise ConfigurationError("need rounds >= 1, k >= 1 and init_labeled >= 0")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if self.dataset == "four_moons" and self.noise != "none":
            raise ConfigurationError("four_moons carries its own noisy moon; use noise=none")

    @property
    def label(self) -> str:
        return self.strategy + ("+ft" if self.finetune else "")

    def dropout_rate(self) -> float:
        if self.dropout is not None:
            return self.dropout
        return 0.1 if self.strategy == Strategy.BALD.value else 0.0

    def model_config(self, n_inputs: int, n_classes: int, seed: int = 0) -> ModelConfig:
        return ModelConfig((n_inputs, *self.hidden, n_classes), dropout_rate=self.dropout_rate(), seed=seed)

    def finetune_config(self, n_channels: int) -> FinetuneConfig:
        family = "image" if self.aug_channel_scale or self.aug_cutout else "tabular"
        aug = AugmentSpec(
            family=family,
            jitter_std=self.aug_jitter,
            feature_dropout=self.aug_feature_dropout,
            channel_scale=self.aug_channel_scale,
            cutout_frac=self.aug_cutout,
            n_channels=n_channels,
            ops_per_example=self.aug_ops,
        )
        return FinetuneConfig(
            confidence_threshold=self.ft_threshold,
            ft_epochs=self.ft_epochs,
            ft_lr=self.ft_lr,
            batch_size=self.batch_size,
            augmentation=aug,
        )

    def noise_spec(self, seed: int) -> NoiseSpec:
        kind = NoiseKind(self.noise)
        if kind is NoiseKind.NONE:
            return NoiseSpec(kind)
        n_clean = self.n_per_class * self.n_classes
        n_noisy = self.n_noisy
        if n_noisy is None:
            mix = 0.8 if self.mix is None else self.mix
            n_noisy = max(1, math.ceil(n_clean * mix / (1.0 - mix) - 1e-9)) if mix < 1 else n_clean
        k_unique = self.k_unique
        if k_unique is None:
            k_unique = {NoiseKind.NOISY_BLANK: 1, NoiseKind.NOISY_DIVERSE: 100, NoiseKind.NOISY_CLASS: 100}[kind]
        return NoiseSpec(kind, n_noisy=n_noisy, k_unique=min(k_unique, n_noisy),
                         target_class=self.target_class, seed=seed)


@dataclass
class TestSet:
    x: np.ndarray
    y: np.ndarray


@dataclass
class RoundRecord:
    seed: int
    strategy: str
    round: int
    test_acc: float
    clean_selected: int
    k: int
    cum_clean_frac: float
    train_loss: float
    wall_ms: int
    selected_indices: tuple[int, ...] = ()

    def csv_row(self) -> list[str]:
        return [
            str(self.seed), self.strategy, str(self.round), repr(float(self.test_acc)),
            str(self.clean_selected), str(self.k), repr(float(self.cum_clean_frac)),
            repr(float(self.train_loss)), str(self.wall_ms),
        ]

    @classmethod
    def from_csv_row(cls, row: dict) -> "RoundRecord":
        return cls(
            seed=int(row["seed"]),
            strategy=row["strategy"],
            round=int(row["round"]),
            test_acc=float(row["test_acc"]),
            clean_selected=int(row["clean_selected"]),
            k=int(row["k"]),
            cum_clean_frac=float(row["cum_clean_frac"]),
            train_loss=float(row["train_loss"]),
            wall_ms=int(row["wall_ms"]),
        )


@dataclass
class Scatter:
    """What the 2-D decision-region plot needs, captured after a run's last round."""

    features: np.ndarray
    labels: np.ndarray
    is_noisy: np.ndarray
    acquired: np.ndarray
    grid_x: np.ndarray
    grid_y: np.ndarray
    grid_pred: np.ndarray
    title: str


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list[RoundRecord]
    summary: dict
    scatters: list[Scatter] = field(default_factory=list)


def build_dataset(config: ExperimentConfig, seed: int) -> tuple[DataPool, TestSet]:
    """Pool (with the initial labeled set drawn) and a clean held-out test set."""
    ss = np.random.SeedSequence([seed, 7919])
    pool_seed, noise_seed, init_seed, test_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(4))
    if config.dataset == "four_moons":
        base = make_four_moons(config.n_per_class, config.moon_noise, config.noisy_moon, seed=pool_seed)
        # clean-only test split: the noisy moon has no true label to score against
        test_pool = make_four_moons(config.n_test_per_class, config.moon_noise, config.noisy_moon, seed=test_seed)
        clean = ~test_pool.is_noisy
        test = TestSet(test_pool.features[clean], test_pool.labels[clean])
        pool = base
        mix = None
    else:
        base = make_mini_images(config.n_per_class, config.n_classes, seed=pool_seed, noise_std=config.image_noise)
        test_pool = make_mini_images(config.n_test_per_class, config.n_classes, seed=test_seed,
                                     noise_std=config.image_noise)
        test = TestSet(test_pool.features, test_pool.labels)
        pool = apply_noise(base, config.noise_spec(noise_seed))
        mix = config.mix if NoiseKind(config.noise) is not NoiseKind.NONE else None
    pool = init_pool(pool, config.init_labeled, mix=mix, seed=init_seed)
    if config.k * config.rounds > len(pool.unlabeled_idx):
        raise ConfigurationError(
            f"k*rounds = {config.k * config.rounds} exceeds the {len(pool.unlabeled_idx)} unlabeled examples"
        )
    return pool, test


def run_round(
    pool: DataPool,
    test: TestSet,
    config: ExperimentConfig,
    round_index: int,
    seed: int,
    history: Sequence[RoundRecord] = (),
) -> tuple[DataPool, RoundRecord, ModelState, EmaState]:
    """Train from scratch, optionally fine-tune, evaluate, acquire ``k`` and label them."""
    start = time.perf_counter()
    if len(pool.unlabeled_idx) < config.k:
        raise PreconditionError(
            f"only {len(pool.unlabeled_idx)} unlabeled examples left, need {config.k}"
        )
    init_rng, train_rng, ft_rng, acq_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence([seed, round_index]).spawn(4)
    )
    mcfg = config.model_config(pool.dim, pool.n_classes, seed=seed)
    state = init_state(mcfg, init_rng)
    ema = EmaState.track(state, config.ema_alpha)
    x, y = pool.labeled_data()
    state, ema, trace = train(
        state, ema, mcfg, x, y,
        epochs=config.epochs, batch_size=config.batch_size, lr=config.lr, rng=train_rng,
    )
    view = pool.view()
    if config.finetune:
        n_channels = 3 if pool.dim % 3 == 0 else 1
        state, ema, _ = finetune(state, ema, mcfg, view, config.finetune_config(n_channels), rng=ft_rng)
    test_acc = accuracy(state, mcfg, test.x, test.y)

    request = AcquisitionRequest(config.strategy, config.k, bald_passes=config.bald_passes)
    selected = acquire(request, view, state, ema, mcfg, rng=acq_rng)

    # provenance is read only here, after the strategy has returned
    clean_selected = int((~pool.is_noisy[selected]).sum())
    total_clean = clean_selected + sum(r.clean_selected for r in history)
    total_picked = len(selected) + sum(r.k for r in history)
    wall_ms = int(round((time.perf_counter() - start) * 1000)) if config.record_wall_time else 0
    record = RoundRecord(
        seed=seed,
        strategy=config.label,
        round=round_index,
        test_acc=test_acc,
        clean_selected=clean_selected,
        k=len(selected),
        cum_clean_frac=total_clean / total_picked,
        train_loss=float(trace[-1]) if len(trace) else float("nan"),
        wall_ms=wall_ms,
        selected_indices=tuple(int(i) for i in selected),
    )
    return pool.label(selected), record, state, ema


def _decision_grid(state, mcfg, features, resolution=60):
    lo = features.min(axis=0) - 0.3
    hi = features.max(axis=0) + 0.3
    gx = np.linspace(lo[0], hi[0], resolution)
    gy = np.linspace(lo[1], hi[1], resolution)
    xx, yy = np.meshgrid(gx, gy)
    pred = forward(state, mcfg, np.column_stack([xx.ravel(), yy.ravel()])).predictions
    return gx, gy, pred.reshape(resolution, resolution)


def run_seed(config: ExperimentConfig, seed: int) -> tuple[list[RoundRecord], Optional[Scatter]]:
    pool, test = build_dataset(config, seed)
    initial = pool.labeled_idx.copy()
    records: list[RoundRecord] = []
    state = mcfg = None
    for r in range(config.rounds):
        pool, record, state, _ = run_round(pool, test, config, r, seed, records)
        records.append(record)
        mcfg = config.model_config(pool.dim, pool.n_classes, seed=seed)
    scatter = None
    if pool.dim == 2:
        gx, gy, pred = _decision_grid(state, mcfg, pool.features)
        scatter = Scatter(
            features=pool.features,
            labels=pool.labels,
            is_noisy=pool.is_noisy,
            acquired=np.setdiff1d(pool.labeled_idx, initial),
            grid_x=gx, grid_y=gy, grid_pred=pred,
            title=f"{config.label} (seed {seed}): test accuracy {records[-1].test_acc:.2%}",
        )
    return records, scatter


def summarize(records: Sequence[RoundRecord]) -> dict:
    """Final-round accuracy and clean fraction, mean and std over seeds, per strategy."""
    out = {}
    for strategy in dict.fromkeys(r.strategy for r in records):
        finals = {}
        for r in records:
            if r.strategy == strategy and (r.seed not in finals or r.round > finals[r.seed].round):
                finals[r.seed] = r
        acc = np.array([f.test_acc for f in finals.values()])
        clean = np.array([f.cum_clean_frac for f in finals.values()])
        out[strategy] = {
            "seeds": sorted(finals),
            "final_acc": {str(s): f.test_acc for s, f in sorted(finals.items())},
            "final_acc_mean": float(acc.mean()),
            "final_acc_std": float(acc.std()),
            "cum_clean_frac_mean": float(clean.mean()),
            "cum_clean_frac_std": float(clean.std()),
        }
    return out


def run_experiment(config: ExperimentConfig, emit: bool = True) -> ExperimentResult:
    """All rounds for every seed; writes result files when ``config.out`` is set."""
    records, scatters = [], []
    for seed in config.seeds:
        seed_records, scatter = run_seed(config, seed)
        records.extend(seed_records)
        if scatter is not None:
            scatters.append(scatter)
    result = ExperimentResult(config, records, summarize(records), scatters)
    if emit and config.out:
        emit_results(records, config.out, configs=[config], scatters=scatters[:1])
    return result


def write_rounds_csv(records: Sequence[RoundRecord], path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow(r.csv_row())


def read_rounds_csv(path: Union[str, Path]) -> list[RoundRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise InputError(f"{path}: unexpected columns {reader.fieldnames}")
        return [RoundRecord.from_csv_row(row) for row in reader]


def learning_curves(records: Sequence[RoundRecord]) -> dict[str, list[float]]:
    curves = {}
    for strategy in dict.fromkeys(r.strategy for r in records):
        rows = [r for r in records if r.strategy == strategy]
        n_rounds = max(r.round for r in rows) + 1
        curves[strategy] = [
            float(np.mean([r.test_acc for r in rows if r.round == i])) for i in range(n_rounds)
        ]
    return curves


def emit_results(
    records: Sequence[RoundRecord],
    out_dir: Union[str, Path],
    configs: Sequence[ExperimentConfig] = (),
    scatters: Sequence[Scatter] = (),
) -> list[Path]:
    """Write rounds.csv, summary.json, learning_curve.svg and any decision-region plots."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = [out / "rounds.csv", out / "summary.json", out / "learning_curve.svg"]
        write_rounds_csv(records, written[0])
        payload = {
            "configs": [config_to_dict(c) for c in configs],
            "summary": summarize(records),
            "selected": [
                {"seed": r.seed, "strategy": r.strategy, "round": r.round, "indices": list(r.selected_indices)}
                for r in records
            ],
        }
        written[1].write_text(json.dumps(payload, indent=2) + "\n")
        written[2].write_text(svg.learning_curve(learning_curves(records)))
        for sc in scatters:
            path = out / f"decision_{sc.title.split(' ')[0].replace('+', '_')}.svg"
            path.write_text(svg.decision_scatter(sc))
            written.append(path)
    except OSError as exc:
        raise HetalError(f"could not write results to {out}: {exc}") from exc
    return written


# flat key=value config files

def config_to_dict(config: ExperimentConfig) -> dict:
    d = asdict(config)
    d["seeds"] = list(config.seeds)
    d["hidden"] = list(config.hidden)
    return d


def _coerce(value: str, hint) -> object:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is Union and type(None) in args:
        if value.strip().lower() in ("", "none", "null"):
            return None
        hint = next(a for a in args if a is not type(None))
        origin = typing.get_origin(hint)
    if hint is bool:
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if origin is tuple:
        return tuple(int(v) for v in value.split(",") if v.strip())
    if hint in (int, float, str):
        return hint(value.strip())
    raise ValueError(f"unsupported config type {hint}")


def config_overrides(pairs: dict[str, str]) -> dict:
    """Turn raw ``key -> text`` pairs into typed ExperimentConfig keyword arguments."""
    hints = typing.get_type_hints(ExperimentConfig)
    known = {f.name for f in fields(ExperimentConfig)}
    typed = {}
    for key, text in pairs.items():
        name = key.strip().replace("-", "_")
        if name not in known:
            raise ConfigurationError(f"unknown config key {key!r}")
        try:
            typed[name] = _coerce(text, hints[name])
        except ValueError as exc:
            raise ConfigurationError(f"bad value for {name}: {exc}") from exc
    return typed


def read_config_file(path: Union[str, Path]) -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path: Union[str, Path], **overrides) -> ExperimentConfig:
    kwargs = config_overrides(read_config_file(path))
    kwargs.update(overrides)
    return ExperimentConfig(**kwargs)


def with_strategy(config: ExperimentConfig, strategy: str, finetune: Optional[bool] = None) -> ExperimentConfig:
    changes = {"strategy": strategy}
    if finetune is not None:
        changes["finetune"] = finetune
    return replace(config, **changes)
