"""Alternating optimization of the four networks, prediction and scoring."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autodiff import (AdamState, NonFiniteError, adam_update, make_rng, sample_standard_normal,
                       seed_sequence)
from .datasets import DomainDataset, batch_iterator
from .networks import ModelSpec, encode, flatten, head_logits, init_model_params
from .objectives import Batch, LossGraph

DISCRIMINATORS = ("task", "binary", "none")
HISTORY_TERMS = ("class", "disc", "teach", "adv_f", "adv_q", "entropic", "smooth",
                 "bin_disc", "bin_enc")
DEFAULT_ORDER = ("D", "F", "Q", "h")


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        self.step = step
        super().__init__(f"training aborted at step {step}: {cause}")


@dataclass(frozen=True)
class TrainConfig:
    lambda_q: float = 0.01
    lambda_h: float = 1.0
    lambda_h_prime: float = 0.1
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 16
    epochs: int = 300
    latent_dim: int = 16
    encoder_hidden: tuple[int, ...] = (128, 128)
    classifier_hidden: tuple[int, ...] = (64,)
    task_disc_hidden: tuple[int, ...] = (128, 64)
    binary_disc_hidden: tuple[int, ...] = (64,)
    source_reg: bool = True
    target_reg: bool = True
    discriminator: str = "task"
    update_order: tuple[str, ...] = DEFAULT_ORDER
    seed: int = 0

    def __post_init__(self):
        for name in ("encoder_hidden", "classifier_hidden", "task_disc_hidden",
                     "binary_disc_hidden", "update_order"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        for name in ("lambda_q", "lambda_h", "lambda_h_prime"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.discriminator not in DISCRIMINATORS:
            raise ValueError(f"discriminator must be one of {DISCRIMINATORS}")
        if sorted(self.update_order) != sorted(DEFAULT_ORDER):
            raise ValueError(f"update_order must be a permutation of {DEFAULT_ORDER}")

    def source_only(self) -> "TrainConfig":
        """Same settings with every adaptation term switched off."""
        return replace(self, source_reg=False, target_reg=False, discriminator="none")

    def model_spec(self, input_dim: int, n_classes: int) -> ModelSpec:
        return ModelSpec.default(input_dim, n_classes, self.latent_dim, self.encoder_hidden,
                                 self.classifier_hidden, self.task_disc_hidden,
                                 self.binary_disc_hidden)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Model:
    spec: ModelSpec
    params: dict  # group -> {name: array}

    def flat(self) -> dict:
        return flatten(self.params)


@dataclass
class TrainState:
    params: dict
    optim: dict  # group -> AdamState
    step: int = 0


@dataclass
class RunHistory:
    config: TrainConfig
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    wall_clock: float = field(default=0.0, compare=False)

    def write_csv(self, path) -> None:
        """One row per step, then one flagged row per epoch with accuracies."""
        cols = ["kind", "step", "epoch", *HISTORY_TERMS, "source_acc", "target_acc"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for rec in self.steps:
                w.writerow(["step", rec["step"], rec["epoch"],
                            *(repr(rec[t]) for t in HISTORY_TERMS), "", ""])
            for rec in self.epochs:
                w.writerow(["epoch", rec["step"], rec["epoch"], *([""] * len(HISTORY_TERMS)),
                            _fmt(rec["source_acc"]), _fmt(rec["target_acc"])])

    @property
    def final_target_accuracy(self) -> float | None:
        return self.epochs[-1]["target_acc"] if self.epochs else None


def _fmt(v):
    return "" if v is None else repr(v)


# -- step objectives -------------------------------------------------------------

def _weights(group: str, cfg: TrainConfig) -> dict[str, float]:
    if group == "Q":
        w = {"class": 1.0}
        if cfg.discriminator == "task":
            w.update(disc_source=1.0, teach=1.0)
        elif cfg.discriminator == "binary":
            w["bin_enc"] = 1.0
        if cfg.source_reg:
            w["adv_q"] = cfg.lambda_q
    elif group == "h":
        w = {"class": cfg.lambda_h}
        if cfg.target_reg:
            w.update(entropic=cfg.lambda_h_prime, smooth=cfg.lambda_h_prime)
    elif group == "D":
        w = {"disc": 1.0} if cfg.discriminator == "task" else (
            {"bin_disc": 1.0} if cfg.discriminator == "binary" else {})
    elif group == "F":
        w = {"adv_f": 1.0} if cfg.source_reg else {}
    else:
        raise ValueError(f"unknown group {group!r}")
    return {k: v for k, v in w.items() if v != 0.0}


class Trainer:
    """Holds the per-group objective graphs for one configuration."""

    def __init__(self, cfg: TrainConfig, spec: ModelSpec):
        self.cfg = cfg
        self.spec = spec
        self.weights = {g: _weights(g, cfg) for g in DEFAULT_ORDER}
        self.graphs = {g: LossGraph(spec, (), w) if w else None for g, w in self.weights.items()}

    def trained_group(self, group: str) -> str:
        # the D slot trains whichever discriminator head is active
        if group == "D" and self.cfg.discriminator == "binary":
            return "B"
        return group

    def init_state(self, seed) -> TrainState:
        params = init_model_params(self.spec, seed)
        c = self.cfg
        optim = {g: AdamState.zeros_like(params[g], lr=c.learning_rate, beta1=c.beta1,
                                         beta2=c.beta2) for g in params}
        return TrainState(params, optim)

    def objective(self, group: str, state: TrainState, batch: Batch) -> float:
        graph = self.graphs[group]
        if graph is None:
            return 0.0
        return graph.evaluate(flatten(state.params), batch)["objective"]

    def step(self, group: str, state: TrainState, batch: Batch) -> tuple[TrainState, dict]:
        """One ADAM update of a single parameter group; all others are untouched."""
        graph = self.graphs[group]
        if graph is None:
            return state, {}
        target = self.trained_group(group)
        flat = flatten(state.params)
        _, grads = graph.gradient("objective", flat, batch, wrt=list(state.params[target]))
        values = {k: float(graph.tape.value(n)[0, 0]) for k, n in graph.nodes.items()}
        new_group, new_opt = adam_update(state.params[target], grads, state.optim[target])
        params = dict(state.params)
        params[target] = new_group
        optim = dict(state.optim)
        optim[target] = new_opt
        return TrainState(params, optim, state.step), values

    def step_encoder(self, state, batch):
        return self.step("Q", state, batch)

    def step_classifier(self, state, batch):
        return self.step("h", state, batch)

    def step_task_discriminator(self, state, batch):
        return self.step("D", state, batch)

    def step_binary_discriminator(self, state, batch):
        return self.step("F", state, batch)


def draw_batch(rng: np.random.Generator, xs, ys, xt, latent_dim: int) -> Batch:
    """Attach fresh noise to a data batch.  Always draws every noise matrix so
    the stream advances identically whatever terms are active."""
    n_s, n_t = len(xs), len(xt)
    return Batch(xs, ys, xt,
                 eps_s=sample_standard_normal(rng, (n_s, latent_dim)),
                 eps_t=sample_standard_normal(rng, (n_t, latent_dim)),
                 eps_t2=sample_standard_normal(rng, (n_t, latent_dim)),
                 z_prior=sample_standard_normal(rng, (n_s, latent_dim)))


def _streams(seed):
    init, src, tgt, noise = seed_sequence(seed).spawn(4)
    return init, make_rng(src), make_rng(tgt), make_rng(noise)


def train(cfg: TrainConfig, source: DomainDataset, target: DomainDataset,
          n_classes: int | None = None) -> tuple[Model, RunHistory]:
    """Alternate the four subproblem updates over shuffled batch pairs.

    Target labels are only read through the evaluation accessor, to report
    per-epoch accuracy.
    """
    if source.labels is None:
        raise ValueError("the source dataset must be labeled")
    if len(source) < cfg.batch_size or len(target) < cfg.batch_size:
        raise ValueError(f"datasets ({len(source)}, {len(target)} rows) are smaller than "
                         f"batch_size={cfg.batch_size}")
    if source.X.shape[1] != target.X.shape[1]:
        raise ValueError("source and target inputs have different widths")
    k = n_classes or int(source.labels.max()) + 1
    spec = cfg.model_spec(source.X.shape[1], k)
    trainer = Trainer(cfg, spec)
    init_seed, src_rng, tgt_rng, noise_rng = _streams(cfg.seed)
    state = trainer.init_state(init_seed)
    history = RunHistory(cfg)
    t0 = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        s_batches = batch_iterator(len(source), cfg.batch_size, src_rng)
        t_batches = batch_iterator(len(target), cfg.batch_size, tgt_rng)
        for si, ti in zip(s_batches, t_batches):
            xs, ys, xt = source.X[si], source.labels[si], target.X[ti]
            record = {"step": step, "epoch": epoch, **{t: 0.0 for t in HISTORY_TERMS}}
            try:
                for group in cfg.update_order:
                    batch = draw_batch(noise_rng, xs, ys, xt, cfg.latent_dim)
                    state, values = trainer.step(group, state, batch)
                    for term, v in values.items():
                        if term in record and term in trainer.weights[group]:
                            record[term] = v
            except NonFiniteError as exc:
                raise TrainingAborted(step, exc) from exc
            if not all(np.isfinite(record[t]) for t in HISTORY_TERMS):
                raise TrainingAborted(step, FloatingPointError("non-finite loss"))
            history.steps.append(record)
            step += 1
        model = Model(spec, state.params)
        history.epochs.append({
            "step": step, "epoch": epoch,
            "source_acc": evaluate_accuracy(model, source),
            "target_acc": evaluate_accuracy(model, target) if target.has_evaluation_labels else None,
        })
    history.wall_clock = time.perf_counter() - t0
    return Model(spec, state.params), history


def latent_mean(model: Model, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    zeros = np.zeros((X.shape[0], model.spec.latent_dim))
    return encode(model.params["Q"], X, zeros, model.spec).mu


def predict_proba(model: Model, X) -> np.ndarray:
    """Classifier probabilities evaluated at the encoder mean (no sampling)."""
    logits = head_logits(model.params["h"], latent_mean(model, X), model.spec.classifier, "h")
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def predict(model: Model, X) -> np.ndarray:
    # argmax returns the lowest index on ties
    logits = head_logits(model.params["h"], latent_mean(model, X), model.spec.classifier, "h")
    return np.argmax(logits, axis=1)


def evaluate_accuracy(model: Model, data: DomainDataset) -> float:
    labels = data.evaluation_labels()
    if len(labels) == 0:
        raise ValueError("cannot score an empty dataset")
    return float(np.mean(predict(model, data.X) == labels))
