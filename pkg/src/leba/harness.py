"""Experiment campaigns: configuration, runs over an attack set, metrics and reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from leba import attack as A
from leba import data, hoga, nets
from leba import oracle as O
from leba.tensor import ContractError

logger = logging.getLogger(__name__)

VARIANTS = ("simba", "simba_plus", "simba_pp", "leba_train", "leba_test")
CSV_HEADER = ["variant", "seed", "n", "asr", "avg_q", "avg_q_prime"]


@dataclass
class ExperimentConfig:
    # data and models
    dataset: str = "data/desk"
    split: str = "test"
    limit: int = 200
    skip: int = 0  # drop this many correctly classified images first (fresh splits)
    victim: str = "models/victim.w"
    surrogate: str = "models/surrogate.w"
    variant: str = "leba_train"
    defense: str = "none"
    endpoint: str = ""  # host:port of a remote oracle; empty runs the victim in-process
    repeats: int = 1
    seed: int = 0
    output: str = "runs/default"
    save_images: bool = False
    # attack
    epsilon: float = 0.1
    zeta: float = 2.5
    n_q: Optional[int] = 20
    n_t: int = 10
    mu: float = 0.9
    kernel_size: int = 5
    kernel_sigma: float = 1.5
    buffer_size: int = 24
    max_queries: int = 2000
    # learning
    lam: float = 0.01
    gamma0: float = 3.0
    hoga_lr: float = 0.03
    backward_loss: bool = True
    forward_loss: bool = True
    adaptive_gamma: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.repeats < 1:
            raise ContractError(f"repeats must be >= 1, got {self.repeats}")
        if self.limit < 1:
            raise ContractError(f"limit must be >= 1, got {self.limit}")
        O.DefenseSpec.parse(self.defense)

    def attack_config(self, seed: int) -> A.AttackConfig:
        return A.AttackConfig(
            epsilon=self.epsilon,
            zeta=self.zeta,
            n_q=self.n_q,
            n_t=self.n_t,
            mu=self.mu,
            kernel_size=self.kernel_size,
            kernel_sigma=self.kernel_sigma,
            buffer_size=self.buffer_size,
            lam=self.lam,
            gamma0=self.gamma0,
            max_queries=self.max_queries,
            mode="test" if self.variant == "leba_test" else "train",
            seed=seed,
        )

    def hoga_state(self) -> hoga.HogaState:
        return hoga.HogaState(
            gamma=self.gamma0,
            lam=self.lam,
            lr=self.hoga_lr,
            use_backward_loss=self.backward_loss,
            use_forward_loss=self.forward_loss,
            adaptive_gamma=self.adaptive_gamma,
        )

    def replace(self, **kw) -> "ExperimentConfig":
        return ExperimentConfig(**{**asdict(self), **kw})


# ---------------------------------------------------------------- config files
#
# One "key = value" per line; "#" starts a comment. Values are typed by the
# field: true/false for flags, "none" for an absent optional integer.


def _field_types() -> dict[str, type]:
    return typing.get_type_hints(ExperimentConfig)


def parse_value(key: str, text: str):
    types = _field_types()
    if key not in types:
        raise ContractError(f"unknown config key {key!r}")
    tp, text = types[key], text.strip()
    optional = typing.get_origin(tp) is typing.Union
    if optional:
        if text.lower() == "none":
            return None
        tp = next(a for a in typing.get_args(tp) if a is not type(None))
    try:
        if tp is bool:
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        return tp(text)
    except ValueError:
        raise ContractError(f"config key {key!r}: cannot read {text!r} as {tp.__name__}") from None


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def read_config(path, overrides: Optional[dict[str, str]] = None) -> ExperimentConfig:
    """Read a key = value file; ``overrides`` (raw strings) win over file keys."""
    values: dict[str, str] = {}
    if path is not None:
        for n, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"{path}:{n}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            values[key] = val
    values.update(overrides or {})
    return ExperimentConfig(**{k: parse_value(k, v) for k, v in values.items()})


def write_config(cfg: ExperimentConfig, path) -> None:
    lines = [f"{f.name} = {format_value(getattr(cfg, f.name))}" for f in fields(cfg)]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- metrics


@dataclass
class MetricsRow:
    variant: str
    seed: Optional[int]  # None marks the aggregate over repeats
    n: int
    asr: float
    avg_q: float  # mean queries over successes; nan without successes
    avg_q_prime: float  # failures counted at the budget


def avgq_convert(avg_q_prime: float, asr: float, budget: int) -> float:
    """AVG.Q over successes from AVG.Q' (failures at ``budget``) and the success rate."""
    if not 0 < asr <= 1:
        raise ContractError(f"avgq_convert needs 0 < asr <= 1, got {asr}")
    return (avg_q_prime - (1 - asr) * budget) / asr


def metrics(variant: str, seed: Optional[int], results: list[A.AttackResult], budget: int) -> MetricsRow:
    n = len(results)
    if n == 0:
        raise ContractError("no attack results to summarise")
    ok = np.array([r.success for r in results])
    q = np.array([r.queries for r in results], dtype=np.float64)
    avg_q = float(q[ok].mean()) if ok.any() else math.nan
    avg_q_prime = float(np.where(ok, q, budget).mean())
    return MetricsRow(variant, seed, n, float(ok.mean()), avg_q, avg_q_prime)


# ---------------------------------------------------------------- campaigns


@dataclass
class ImageLog:
    repeat: int
    seed: int
    index: int
    label: int
    success: bool
    queries: int
    l2: float
    hoga_steps: int
    trace: list = field(default_factory=list)


@dataclass
class RunOutput:
    rows: list[MetricsRow]
    logs: list[ImageLog]
    adversarial: dict[int, np.ndarray]  # repeat -> stacked adversarial images
    surrogates: dict[int, nets.Model]  # repeat -> surrogate after the run


def attack_set(cfg: ExperimentConfig, victim: nets.Model) -> nets.LabeledDataset:
    """Correctly classified images of the split, after skipping ``skip`` of them."""
    ds = data.load_dataset(cfg.dataset, cfg.split, limit=cfg.skip + cfg.limit, victim=victim)
    return ds.subset(np.arange(cfg.skip, len(ds)))


def _make_oracle(cfg: ExperimentConfig, victim: nets.Model):
    if cfg.endpoint:
        return O.RemoteOracle(cfg.endpoint, victim.spec.input_shape)
    return O.wrap_defense(victim, O.DefenseSpec.parse(cfg.defense))


def run_experiment(cfg: ExperimentConfig, dataset: Optional[nets.LabeledDataset] = None) -> RunOutput:
    """Attack every image ``repeats`` times (seed, seed+1, ...) with the configured variant."""
    victim = nets.load_any(cfg.victim)
    images = attack_set(cfg, victim) if dataset is None else dataset
    if len(images) == 0:
        raise ContractError("attack set is empty")
    needs_surrogate = cfg.variant != "simba"
    base = nets.load_any(cfg.surrogate) if needs_surrogate else None

    rows, logs, adversarial, surrogates = [], [], {}, {}
    for r in range(cfg.repeats):
        seed = cfg.seed + r
        acfg = cfg.attack_config(seed)
        oracle = _make_oracle(cfg, victim)
        surrogate = base.copy() if base is not None else None
        learner = A.Learner(surrogate, acfg, cfg.hoga_state()) if cfg.variant.startswith("leba") else None
        results = []
        for i, (x, y) in enumerate(zip(images.images, images.labels)):
            y = int(y)
            rng = np.random.default_rng([seed, i])
            before = oracle.used
            try:
                res = _attack_one(cfg.variant, x, y, oracle, surrogate, learner, acfg, rng)
            except Exception as exc:
                raise RuntimeError(f"attack failed on image {i} (repeat {r}, seed {seed}): {exc}") from exc
            spent = oracle.used - before
            if spent != res.queries:
                raise RuntimeError(f"image {i}: attack counted {res.queries} queries, oracle metered {spent}")
            results.append(res)
            logs.append(ImageLog(r, seed, i, y, res.success, res.queries, res.l2_dist, res.hoga_steps, res.trace))
        if isinstance(oracle, O.RemoteOracle):
            oracle.close()
        rows.append(metrics(cfg.variant, seed, results, cfg.max_queries))
        adversarial[r] = np.stack([res.x_adv for res in results])
        if surrogate is not None:
            surrogates[r] = surrogate
        logger.info("%s seed %d: ASR %.4f AVG.Q' %.2f", cfg.variant, seed, rows[-1].asr, rows[-1].avg_q_prime)
    rows.append(aggregate(rows, cfg.max_queries))
    return RunOutput(rows, logs, adversarial, surrogates)


def _attack_one(variant, x, y, oracle, surrogate, learner, acfg, rng) -> A.AttackResult:
    if variant == "simba":
        return A.simba(x, y, oracle, acfg, rng)
    if variant == "simba_plus":
        return A.simba_plus(x, y, oracle, surrogate, acfg, rng)
    if variant == "simba_pp":
        return A.simba_pp(x, y, oracle, surrogate, acfg, rng)
    return A.leba(x, y, oracle, learner, acfg, rng)


def aggregate(rows: list[MetricsRow], budget: int) -> MetricsRow:
    """Pool equally sized repeats: mean ASR and AVG.Q', AVG.Q over all successes."""
    n = sum(r.n for r in rows)
    asr = sum(r.asr * r.n for r in rows) / n
    avg_q_prime = sum(r.avg_q_prime * r.n for r in rows) / n
    succ = sum(r.asr * r.n for r in rows)
    total = sum(r.avg_q * r.asr * r.n for r in rows if r.asr > 0)
    avg_q = total / succ if succ > 0 else math.nan
    return MetricsRow(rows[0].variant, None, n, asr, avg_q, avg_q_prime)


def mean_over_seeds(rows: list[MetricsRow]) -> MetricsRow:
    """The aggregate row of a run (the last one)."""
    agg = [r for r in rows if r.seed is None]
    if len(agg) != 1:
        raise ContractError("expected exactly one aggregate row")
    return agg[0]


# ---------------------------------------------------------------- reports


def _g(x: float) -> str:
    return f"{x:.6g}"


def rows_to_csv(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([r.variant, "all" if r.seed is None else r.seed, r.n, _g(r.asr), _g(r.avg_q), _g(r.avg_q_prime)])
    return buf.getvalue()


def read_metrics_csv(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ContractError(f"{path}: unexpected header {reader.fieldnames}")
        return [
            MetricsRow(
                d["variant"],
                None if d["seed"] == "all" else int(d["seed"]),
                int(d["n"]),
                float(d["asr"]),
                float(d["avg_q"]),
                float(d["avg_q_prime"]),
            )
            for d in reader
        ]


def emit_report(rows: list[MetricsRow], logs: list[ImageLog], path, adversarial=None) -> dict[str, Path]:
    """Write metrics.csv, traces.jsonl and, if given, adversarial images as .npy."""
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = {"metrics": out / "metrics.csv", "traces": out / "traces.jsonl"}
        written["metrics"].write_text(rows_to_csv(rows))
        with open(written["traces"], "w") as fh:
            for log in logs:
                rec = asdict(log)
                rec["trace"] = [[int(i), float(j)] for i, j in log.trace]
                fh.write(json.dumps(rec) + "\n")
        for r, imgs in (adversarial or {}).items():
            written[f"adv{r}"] = out / f"adversarial_r{r}.npy"
            np.save(written[f"adv{r}"], imgs)
    except OSError as exc:
        raise OSError(f"cannot write report under {out}: {exc}") from exc
    return written


def run_and_report(cfg: ExperimentConfig) -> RunOutput:
    """run_experiment, then write the report, the config and per-repeat surrogates to cfg.output."""
    result = run_experiment(cfg)
    out = Path(cfg.output)
    emit_report(result.rows, result.logs, out, result.adversarial if cfg.save_images else None)
    write_config(cfg, out / "config.txt")
    if cfg.variant == "leba_train":
        for r, model in result.surrogates.items():
            nets.save_weights(model, out / f"surrogate_r{r}.w")
    return result


# ---------------------------------------------------------------- desk models


@dataclass(frozen=True)
class ModelRecipe:
    name: str
    spec: nets.ModelSpec
    epochs: int = 8
    lr: float = 0.1
    fgsm_eps: Optional[float] = None


DESK_MODELS = (
    # benchmark victim: tinycnn trained with half of each batch replaced by FGSM examples
    ModelRecipe("victim", nets.ModelSpec("tinycnn", channels=(8, 16), kernel=3, seed=1), fgsm_eps=0.1),
    ModelRecipe("surrogate", nets.ModelSpec("tinycnn", channels=(4, 8), kernel=5, seed=3), epochs=16),
    ModelRecipe("plain", nets.ModelSpec("tinycnn", channels=(8, 16), kernel=3, seed=1)),
    ModelRecipe("robust", nets.ModelSpec("tinycnn", channels=(8, 16), kernel=3, seed=1), fgsm_eps=0.2),
)


def train_models(dataset_root, out_dir, recipes=DESK_MODELS, seed: int = 0) -> dict[str, dict]:
    """Build the desk dataset if absent, train every recipe and save ``<name>.w``."""
    root, out = Path(dataset_root), Path(out_dir)
    if not data.split_paths(root, "train")[0].exists():
        data.build_desk_dataset(root, seed=seed)
    train, test = data.read_split(root, "train"), data.read_split(root, "test")
    out.mkdir(parents=True, exist_ok=True)
    report = {}
    for rec in recipes:
        model, train_acc = nets.train(nets.init_model(rec.spec), train, rec.epochs, rec.lr, 32, fgsm_eps=rec.fgsm_eps)
        nets.save_weights(model, out / f"{rec.name}.w")
        report[rec.name] = {
            "train_acc": train_acc,
            "test_acc": nets.accuracy(model, test),
            "fgsm_acc": O.robust_accuracy(model, test, 0.1),
        }
        logger.info("%s: %s", rec.name, report[rec.name])
    return report
