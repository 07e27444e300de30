"""Multi-seed runs, the ablation grid, the discriminator comparison and
embedding export.  Each CSV gets a ``.config`` sidecar holding the resolved
settings that produced it."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .datasets import (DomainDataset, ShiftSpec, apply_shift, desk_subset, gen_two_moons,
                       load_idx, rescale_inputs)
from .autodiff import seed_sequence
from .networks import save_checkpoint
from .trainer import Model, RunHistory, latent_mean, predict, train

ABLATION_ARMS = {
    "full": {},
    "wo-s": {"source_reg": False},
    "wo-t": {"target_reg": False},
    "wo-st": {"source_reg": False, "target_reg": False},
}
DISCRIMINATOR_ARMS = {"task-d": {"discriminator": "task"}, "adv-d": {"discriminator": "binary"}}
SUMMARY_COLUMNS = ("arm", "n_seeds", "mean_target_acc", "std_target_acc", "mean_source_acc",
                   "seeds", "target_accs")


class SeedRunError(RuntimeError):
    def __init__(self, seed: int, cause: Exception):
        self.seed = seed
        self.cause = cause
        super().__init__(f"seed {seed}: {cause}")


@dataclass
class ArmSummary:
    arm: str
    seeds: tuple
    target_accs: tuple
    source_accs: tuple

    @property
    def mean(self) -> float:
        return float(np.mean(self.target_accs))

    @property
    def std(self) -> float:
        # sample deviation over runs; a single run has none
        return float(np.std(self.target_accs, ddof=1)) if len(self.target_accs) > 1 else 0.0

    def row(self) -> list:
        return [self.arm, len(self.seeds), repr(self.mean), repr(self.std),
                repr(float(np.mean(self.source_accs))), ";".join(map(str, self.seeds)),
                ";".join(repr(a) for a in self.target_accs)]


def load_domains(cfg: ExperimentConfig, seed: int) -> tuple[DomainDataset, DomainDataset]:
    """Source and (label-quarantined) target sets, rescaled to [-1, 1]."""
    if cfg.dataset == "two_moons":
        s_seed, t_seed, shift_seed = seed_sequence(seed).spawn(3)
        source = gen_two_moons(cfg.n_points, cfg.noise_std, s_seed)
        shift = ShiftSpec(rotation=float(np.deg2rad(cfg.rotation_deg)),
                          translation=cfg.translation or None, scaling=cfg.scaling or None,
                          noise_std=cfg.shift_noise)
        target = apply_shift(gen_two_moons(cfg.n_points, cfg.noise_std, t_seed), shift, shift_seed)
        return rescale_inputs(source), rescale_inputs(target)
    domains = []
    for images, labels, tag in ((cfg.source_images, cfg.source_labels, "source"),
                                (cfg.target_images, cfg.target_labels, "target")):
        data = load_idx(images, labels or None, domain=tag)
        data = desk_subset(data, cfg.desk_rows, cfg.image_side, cfg.desk_side, seed)
        domains.append(rescale_inputs(data, per_feature=False))
    return domains[0], domains[1]


def seed_config(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    return replace(cfg, seeds=(seed,), train=replace(cfg.train, seed=seed))


def write_with_echo(path: Path, cfg: ExperimentConfig, write) -> None:
    write(path)
    path.with_suffix(".config").write_text(cfg.echo(), encoding="utf-8")


def run_seed(cfg: ExperimentConfig, seed: int) -> tuple[Model, RunHistory, DomainDataset, DomainDataset]:
    try:
        source, target = load_domains(cfg, seed)
        model, history = train(replace(cfg.train, seed=seed), source, target)
    except Exception as exc:
        raise SeedRunError(seed, exc) from exc
    return model, history, source, target


def run_experiment(cfg: ExperimentConfig, out_dir=None, arm: str = "run") -> ArmSummary:
    """Train once per seed, write each history and a one-row summary."""
    out = Path(out_dir if out_dir is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    target_accs, source_accs = [], []
    for seed in cfg.seeds:
        model, history, source, target = run_seed(cfg, seed)
        one = seed_config(cfg, seed)
        write_with_echo(out / f"history_seed{seed}.csv", one, history.write_csv)
        if cfg.save_model:
            save_checkpoint(out / f"model_seed{seed}.params", model.spec, model.params)
            (out / f"model_seed{seed}.config").write_text(one.echo(), encoding="utf-8")
        if cfg.export_embeddings:
            write_with_echo(out / f"embeddings_seed{seed}.csv", one,
                            lambda p: export_embeddings(model, (source, target), p))
        last = history.epochs[-1] if history.epochs else None
        source_accs.append(last["source_acc"] if last else float("nan"))
        target_accs.append(last["target_acc"] if last and last["target_acc"] is not None
                           else float("nan"))
    summary = ArmSummary(arm, cfg.seeds, tuple(target_accs), tuple(source_accs))
    write_with_echo(out / "summary.csv", cfg, lambda p: write_summary(p, [summary]))
    return summary


def write_summary(path, summaries) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for s in summaries:
            w.writerow(s.row())


def arm_configs(cfg: ExperimentConfig, arms: dict) -> dict[str, ExperimentConfig]:
    return {name: replace(cfg, train=replace(cfg.train, **switches))
            for name, switches in arms.items()}


def _run_arms(cfg: ExperimentConfig, arms: dict, out_dir) -> list[ArmSummary]:
    out = Path(out_dir if out_dir is not None else cfg.out)
    summaries = [run_experiment(arm_cfg, out / name, arm=name)
                 for name, arm_cfg in arm_configs(cfg, arms).items()]
    write_with_echo(out / "summary.csv", cfg, lambda p: write_summary(p, summaries))
    return summaries


def run_ablation_suite(cfg: ExperimentConfig, out_dir=None) -> list[ArmSummary]:
    return _run_arms(cfg, ABLATION_ARMS, out_dir)


def run_discriminator_comparison(cfg: ExperimentConfig, out_dir=None) -> list[ArmSummary]:
    return _run_arms(cfg, DISCRIMINATOR_ARMS, out_dir)


def export_embeddings(model: Model, datasets, path) -> None:
    """Encoder means of every row: ``z0..z{p-1}, domain, label, predicted``.

    ``label`` is empty for rows without any labels.
    """
    p = model.spec.latent_dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"z{j}" for j in range(p)] + ["domain", "label", "predicted"])
        for data in datasets:
            mu = latent_mean(model, data.X)
            pred = predict(model, data.X)
            labels = data.evaluation_labels() if data.has_evaluation_labels else None
            for i in range(len(data)):
                lab = "" if labels is None else int(labels[i])
                w.writerow([repr(float(v)) for v in mu[i]] + [data.domain, lab, int(pred[i])])
