"""Dense networks for the encoder, classifier and the two discriminators.

Parameters live in plain dicts keyed ``"<group>.W<i>"`` / ``"<group>.b<i>"``
so they can be bound directly onto a :class:`~tdda.autodiff.Tape`.
Group names: ``Q`` (encoder), ``h`` (classifier), ``D`` (task discriminator,
K+1 outputs), ``F`` (prior discriminator) and ``B`` (binary source/target
discriminator used by the Adv-d baseline).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .autodiff import PROB_FLOOR, Node, Tape, make_rng, seed_sequence

GROUPS = ("Q", "h", "D", "F", "B")
CHECKPOINT_MAGIC = "tdda-params"
CHECKPOINT_VERSION = 1
# log-variance bounds: keep sigma in [e^-30, e^30] so no parameter setting overflows
LOGVAR_MIN, LOGVAR_MAX = -60.0, 60.0


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    slope: float = 0.2
    head: str = "linear"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ValueError("an MLP needs an input and an output width")
        if min(self.widths) < 1:
            raise ValueError(f"all widths must be >= 1, got {self.widths}")
        if self.head not in ("linear", "softmax", "sigmoid"):
            raise ValueError(f"unknown head {self.head!r}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


@dataclass(frozen=True)
class ModelSpec:
    """Architectures of all five networks for a given problem size."""

    input_dim: int
    n_classes: int
    latent_dim: int
    encoder: MlpSpec
    classifier: MlpSpec
    task_disc: MlpSpec
    prior_disc: MlpSpec
    domain_disc: MlpSpec

    @classmethod
    def default(cls, input_dim: int, n_classes: int, latent_dim: int = 16,
                encoder_hidden=(128, 128), classifier_hidden=(64,),
                task_disc_hidden=(128, 64), binary_disc_hidden=(64,)) -> "ModelSpec":
        p = int(latent_dim)
        return cls(
            input_dim=int(input_dim), n_classes=int(n_classes), latent_dim=p,
            encoder=MlpSpec((input_dim, *encoder_hidden, 2 * p)),
            classifier=MlpSpec((p, *classifier_hidden, n_classes), head="softmax"),
            task_disc=MlpSpec((p, *task_disc_hidden, n_classes + 1), head="softmax"),
            prior_disc=MlpSpec((p, *binary_disc_hidden, 1), head="sigmoid"),
            domain_disc=MlpSpec((p, *binary_disc_hidden, 1), head="sigmoid"),
        )

    def group(self, name: str) -> MlpSpec:
        return {"Q": self.encoder, "h": self.classifier, "D": self.task_disc,
                "F": self.prior_disc, "B": self.domain_disc}[name]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        nets = {k: MlpSpec(**v) for k, v in d.items() if isinstance(v, dict)}
        return cls(**{**d, **nets})


def init_params(spec: MlpSpec, seed, prefix: str) -> dict[str, np.ndarray]:
    """Uniform(-sqrt(6/fan_in), sqrt(6/fan_in)) weights and zero biases."""
    rng = make_rng(seed)
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        bound = np.sqrt(6.0 / fan_in)
        params[f"{prefix}.W{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"{prefix}.b{i}"] = np.zeros((1, fan_out))
    return params


def init_model_params(spec: ModelSpec, seed) -> dict[str, dict[str, np.ndarray]]:
    seeds = seed_sequence(seed).spawn(len(GROUPS))
    return {g: init_params(spec.group(g), s, g) for g, s in zip(GROUPS, seeds)}


def flatten(params: dict[str, dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    return {k: v for group in params.values() for k, v in group.items()}


def mlp_logits(tape: Tape, spec: MlpSpec, prefix: str, x: Node, frozen: bool = False) -> Node:
    """Pre-head output of an MLP.  ``frozen`` blocks gradients into its weights."""
    h = x
    for i in range(spec.n_layers):
        W, b = tape.param(f"{prefix}.W{i}"), tape.param(f"{prefix}.b{i}")
        if frozen:
            W, b = tape.stop_gradient(W), tape.stop_gradient(b)
        h = tape.bias_add(tape.matmul(h, W), b)
        if i < spec.n_layers - 1:
            h = tape.leaky_relu(h, spec.slope)
    return h


@dataclass
class EncoderNodes:
    mu: Node
    logvar: Node
    sigma: Node
    z: Node


def encoder_graph(tape: Tape, spec: ModelSpec, x: Node, eps: Node,
                  out: EncoderNodes | None = None) -> EncoderNodes:
    """Gaussian encoder with z = mu + sigma * eps.

    Passing an earlier ``out`` reuses its mu/sigma so a second noise draw
    shares the deterministic part of the graph.
    """
    p = spec.latent_dim
    if out is None:
        stats = mlp_logits(tape, spec.encoder, "Q", x)
        mu = tape.slice_cols(stats, 0, p)
        logvar = tape.clip(tape.slice_cols(stats, p, 2 * p), LOGVAR_MIN, LOGVAR_MAX)
        sigma = tape.exp(tape.scale(logvar, 0.5))
    else:
        mu, logvar, sigma = out.mu, out.logvar, out.sigma
    z = tape.add(mu, tape.mul(sigma, eps))
    return EncoderNodes(mu, logvar, sigma, z)


@dataclass
class LatentCode:
    mu: np.ndarray
    sigma: np.ndarray
    z: np.ndarray
    eps: np.ndarray = field(repr=False)


@lru_cache(maxsize=64)
def _encode_tape(spec: ModelSpec):
    tape = Tape()
    enc = encoder_graph(tape, spec, tape.input("x"), tape.input("eps"))
    return tape, enc


@lru_cache(maxsize=64)
def _head_tape(spec: MlpSpec, prefix: str):
    tape = Tape()
    logits = mlp_logits(tape, spec, prefix, tape.input("z"))
    return tape, logits


def _check_width(x: np.ndarray, width: int, what: str) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != width:
        raise ValueError(f"{what} must have {width} columns, got shape {x.shape}")
    return x


def encode(params: dict[str, np.ndarray], x, eps, spec: ModelSpec) -> LatentCode:
    x = _check_width(x, spec.input_dim, "x")
    eps = _check_width(eps, spec.latent_dim, "eps")
    if eps.shape[0] != x.shape[0]:
        raise ValueError(f"x has {x.shape[0]} rows but eps has {eps.shape[0]}")
    tape, enc = _encode_tape(spec)
    tape.forward({**params, "x": x, "eps": eps})
    return LatentCode(tape.value(enc.mu), tape.value(enc.sigma), tape.value(enc.z), eps)


def head_logits(params: dict[str, np.ndarray], z, spec: MlpSpec, prefix: str) -> np.ndarray:
    z = _check_width(z, spec.widths[0], "z")
    tape, logits = _head_tape(spec, prefix)
    tape.forward({**params, "z": z})
    return tape.value(logits)


def _softmax(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def classify(params, z, spec: ModelSpec) -> np.ndarray:
    """Class-membership probabilities, one simplex row per latent."""
    return _softmax(head_logits(params, z, spec.classifier, "h"))


def discriminate_task(params, z, spec: ModelSpec) -> np.ndarray:
    """K+1 probabilities per latent; the last column is the target class."""
    return _softmax(head_logits(params, z, spec.task_disc, "D"))


def logistic(logit) -> np.ndarray:
    p = np.exp(-np.logaddexp(0.0, -np.asarray(logit, dtype=np.float64)))
    return np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)


def discriminate_binary(params, z, spec: ModelSpec, prefix: str = "F") -> np.ndarray:
    return logistic(head_logits(params, z, spec.group(prefix), prefix))[:, 0]


# -- checkpoints --------------------------------------------------------------
#
# Text layout, UTF-8, one record per line:
#   tdda-params <version>
#   spec <ModelSpec as one-line JSON>
#   param <name> <rows> <cols>
#   <rows*cols floats in row-major order, float.hex notation, space separated>
#   ... one param/values pair per parameter ...


def save_checkpoint(path, spec: ModelSpec, params: dict[str, dict[str, np.ndarray]]) -> None:
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}",
             "spec " + json.dumps(spec.to_dict(), sort_keys=True)]
    for name, arr in flatten(params).items():
        lines.append(f"param {name} {arr.shape[0]} {arr.shape[1]}")
        lines.append(" ".join(float(v).hex() for v in arr.reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[ModelSpec, dict[str, dict[str, np.ndarray]]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].split() != [CHECKPOINT_MAGIC, str(CHECKPOINT_VERSION)]:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} parameter file")
    if not lines[1].startswith("spec "):
        raise ValueError(f"{path}: missing spec record")
    spec = ModelSpec.from_dict(json.loads(lines[1][5:]))
    params: dict[str, dict[str, np.ndarray]] = {g: {} for g in GROUPS}
    for header, body in zip(lines[2::2], lines[3::2]):
        tag, name, rows, cols = header.split()
        if tag != "param":
            raise ValueError(f"{path}: unexpected record {tag!r}")
        values = [float.fromhex(v) for v in body.split()]
        shape = (int(rows), int(cols))
        if len(values) != shape[0] * shape[1]:
            raise ValueError(f"{path}: {name} has {len(values)} values, expected {shape}")
        params[name.split(".")[0]][name] = np.array(values, dtype=np.float64).reshape(shape)
    return spec, params
