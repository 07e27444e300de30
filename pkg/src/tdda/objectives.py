"""Loss terms of the adaptation objective, built as tape graphs.

Every term is a batch mean, so the weights that combine them do not depend
on the batch size.  Conventions fixed here:

* the prior discriminator ``F`` outputs 1 for draws from N(0, I) and 0 for
  encoded source features; the encoder minimizes ``-mean log F(z_source)``;
* the binary domain discriminator ``B`` of the Adv-d baseline outputs 0 for
  source and 1 for target, and the encoder is trained on inverted labels;
* the classifier output used as a pseudo-label in the teacher loss is a
  constant, and so are the discriminator weights inside encoder-side terms.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping

import numpy as np

from .autodiff import Node, Tape
from .networks import ModelSpec, encoder_graph, mlp_logits

TERMS = ("class", "disc", "disc_source", "disc_target", "teach", "adv_f", "adv_q",
         "entropic", "smooth", "bin_disc", "bin_enc")


@dataclass
class Batch:
    """One optimization step's worth of data and noise.

    ``ys`` holds integer labels for the source rows.  ``eps_t2`` is the second
    noise draw for the target rows used by the smoothness term.
    """

    xs: np.ndarray
    ys: np.ndarray
    xt: np.ndarray
    eps_s: np.ndarray
    eps_t: np.ndarray
    eps_t2: np.ndarray | None = None
    z_prior: np.ndarray | None = None

    def bindings(self, n_classes: int) -> dict[str, np.ndarray]:
        if len(self.xs) == 0 or len(self.xt) == 0:
            raise ValueError("empty batch")
        ys = np.asarray(self.ys, dtype=np.int64)
        onehot = np.zeros((len(ys), n_classes))
        onehot[np.arange(len(ys)), ys] = 1.0
        target_onehot = np.zeros((len(self.xt), n_classes + 1))
        target_onehot[:, -1] = 1.0
        out = {
            "xs": self.xs, "xt": self.xt, "eps_s": self.eps_s, "eps_t": self.eps_t,
            "ys": onehot, "ys_aug": np.hstack([onehot, np.zeros((len(ys), 1))]),
            "t_aug": target_onehot,
        }
        if self.eps_t2 is not None:
            out["eps_t2"] = self.eps_t2
        if self.z_prior is not None:
            out["z_prior"] = self.z_prior
        return out


# -- network-free pieces -------------------------------------------------------

def cross_entropy(tape: Tape, log_probs: Node, targets: Node) -> Node:
    """``-mean_rows(targets . log_probs)``."""
    return tape.scale(tape.mean(tape.sum_rows(tape.mul(targets, log_probs))), -1.0)


def entropy(tape: Tape, logits: Node) -> Node:
    p = tape.softmax(logits)
    return tape.scale(tape.mean(tape.sum_rows(tape.mul(p, tape.log_softmax(logits)))), -1.0)


def l1_consistency(tape: Tape, logits_a: Node, logits_b: Node) -> Node:
    return tape.mean(tape.l1_diff(tape.softmax(logits_a), tape.softmax(logits_b)))


def neg_mean_log_sigmoid(tape: Tape, logit: Node, label: int) -> Node:
    """Binary cross-entropy of a logistic head against a constant label."""
    signed = logit if label == 1 else tape.scale(logit, -1.0)
    return tape.scale(tape.mean(tape.log_sigmoid(signed)), -1.0)


def teacher_cross_entropy(tape: Tape, h_logits: Node, d_logits: Node, n_classes: int) -> Node:
    pseudo = tape.stop_gradient(tape.softmax(h_logits))
    log_d = tape.slice_cols(tape.log_softmax(d_logits), 0, n_classes)
    return cross_entropy(tape, log_d, pseudo)


# -- full graphs ---------------------------------------------------------------

class LossGraph:
    """A tape holding the requested loss terms over all networks.

    Intermediate nodes (encodings, network outputs) are built once and shared
    between terms.  ``weights`` adds an ``"objective"`` node equal to the
    weighted sum of the named terms.
    """

    def __init__(self, spec: ModelSpec, terms, weights: Mapping[str, float] | None = None):
        unknown = set(terms) - set(TERMS)
        if unknown:
            raise ValueError(f"unknown loss terms: {sorted(unknown)}")
        self.spec = spec
        self.tape = Tape()
        self._cache: dict = {}
        self.nodes: dict[str, Node] = {t: self._term(t) for t in terms}
        self.weights = dict(weights or {})
        if self.weights:
            total = None
            for term, w in self.weights.items():
                node = self._term(term)
                self.nodes[term] = node
                piece = node if w == 1.0 else self.tape.scale(node, w)
                total = piece if total is None else self.tape.add(total, piece)
            self.nodes["objective"] = total

    def _term(self, name: str) -> Node:
        return self._get(("term", name), getattr(self, f"_build_{name}"))

    def _get(self, key, build):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    # shared intermediates
    def _enc(self, which):
        t = self.tape
        if which == "s":
            return self._get("enc_s", lambda: encoder_graph(t, self.spec, t.input("xs"), t.input("eps_s")))
        if which == "t":
            return self._get("enc_t", lambda: encoder_graph(t, self.spec, t.input("xt"), t.input("eps_t")))
        return self._get("enc_t2", lambda: encoder_graph(
            t, self.spec, None, t.input("eps_t2"), out=self._enc("t")))

    def _head(self, group, z_key, frozen=False):
        def build():
            z = self.tape.input("z_prior") if z_key == "prior" else self._enc(z_key).z
            return mlp_logits(self.tape, self.spec.group(group), group, z, frozen=frozen)
        return self._get((group, z_key, frozen), build)

    # terms
    def _build_class(self):
        t = self.tape
        return cross_entropy(t, t.log_softmax(self._head("h", "s")), t.input("ys"))

    def _build_disc_source(self):
        t = self.tape
        return cross_entropy(t, t.log_softmax(self._head("D", "s")), t.input("ys_aug"))

    def _build_disc_target(self):
        t = self.tape
        return cross_entropy(t, t.log_softmax(self._head("D", "t")), t.input("t_aug"))

    def _build_disc(self):
        return self.tape.add(self._term("disc_source"), self._term("disc_target"))

    def _build_teach(self):
        return teacher_cross_entropy(self.tape, self._head("h", "t"), self._head("D", "t"),
                                     self.spec.n_classes)

    def _build_adv_f(self):
        t = self.tape
        return t.add(neg_mean_log_sigmoid(t, self._head("F", "prior"), 1),
                     neg_mean_log_sigmoid(t, self._head("F", "s"), 0))

    def _build_adv_q(self):
        return neg_mean_log_sigmoid(self.tape, self._head("F", "s", frozen=True), 1)

    def _build_entropic(self):
        return entropy(self.tape, self._head("h", "t"))

    def _build_smooth(self):
        return l1_consistency(self.tape, self._head("h", "t"), self._head("h", "t2"))

    def _build_bin_disc(self):
        t = self.tape
        return t.add(neg_mean_log_sigmoid(t, self._head("B", "s"), 0),
                     neg_mean_log_sigmoid(t, self._head("B", "t"), 1))

    def _build_bin_enc(self):
        t = self.tape
        return t.add(neg_mean_log_sigmoid(t, self._head("B", "s", frozen=True), 1),
                     neg_mean_log_sigmoid(t, self._head("B", "t", frozen=True), 0))

    # evaluation
    def evaluate(self, params: Mapping[str, np.ndarray], batch: Batch) -> dict[str, float]:
        self.tape.forward({**params, **batch.bindings(self.spec.n_classes)})
        return {k: float(self.tape.value(n)[0, 0]) for k, n in self.nodes.items()}

    def gradient(self, term: str, params: Mapping[str, np.ndarray], batch: Batch,
                 wrt=None) -> tuple[float, dict[str, np.ndarray]]:
        self.tape.forward({**params, **batch.bindings(self.spec.n_classes)})
        node = self.nodes[term]
        wrt = [k for k in params if k in self.tape.params] if wrt is None else wrt
        return float(self.tape.value(node)[0, 0]), self.tape.backward(node, wrt)


@lru_cache(maxsize=128)
def _single(spec: ModelSpec, term: str) -> LossGraph:
    return LossGraph(spec, (term,))


def _value(term, params, spec, batch) -> float:
    return _single(spec, term).evaluate(params, batch)[term]


def loss_class(params, spec: ModelSpec, batch: Batch) -> float:
    """Source cross-entropy of the classifier on reparameterized latents."""
    return _value("class", params, spec, batch)


def loss_disc(params, spec: ModelSpec, batch: Batch) -> float:
    """(K+1)-way cross-entropy: source rows labeled by class, target rows as class K."""
    return _value("disc", params, spec, batch)


def loss_teach(params, spec: ModelSpec, batch: Batch) -> float:
    return _value("teach", params, spec, batch)


def loss_adv_f(params, spec: ModelSpec, batch: Batch) -> float:
    return _value("adv_f", params, spec, batch)


def loss_adv_q(params, spec: ModelSpec, batch: Batch) -> float:
    return _value("adv_q", params, spec, batch)


def loss_entropic(params, spec: ModelSpec, batch: Batch) -> float:
    return _value("entropic", params, spec, batch)


def loss_smooth(params, spec: ModelSpec, batch: Batch) -> float:
    if batch.eps_t2 is None:
        raise ValueError("the smoothness term needs a second noise draw (eps_t2)")
    return _value("smooth", params, spec, batch)


def loss_binary_domain_baseline(params, spec: ModelSpec, batch: Batch,
                                side: str = "discriminator") -> float:
    if side not in ("discriminator", "encoder"):
        raise ValueError(f"side must be 'discriminator' or 'encoder', got {side!r}")
    return _value("bin_disc" if side == "discriminator" else "bin_enc", params, spec, batch)
