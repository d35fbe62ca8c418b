"""Glue shared by the command line and the experiment scripts."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np

from .armodel import GeoARModel, GuidanceConfig, TrainResult, sample_molecule, train
from .canon import CanonicalSequence, tokenize
from .config import RunConfig
from .georope import dataset_anchors
from .metrics import molecule_class
from .molio import Molecule, read_xyz_file, synth_dataset, write_xyz_file


def read_xyz_dir(path) -> list[Molecule]:
    """All ``*.xyz`` files in a directory, in sorted file-name order."""
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"not a directory: {path}")
    files = sorted(path.glob("*.xyz"))
    if not files:
        raise FileNotFoundError(f"no .xyz files in {path}")
    return [read_xyz_file(f) for f in files]


def load_dataset(cfg: RunConfig) -> list[Molecule]:
    if cfg.dataset is None:
        return synth_dataset(cfg.data_seed, cfg.n_molecules, cfg.templates, cfg.jitter)
    mols = read_xyz_dir(cfg.dataset)
    return [m if m.class_id is not None else m.with_class(molecule_class(m)) for m in mols]


def build_model(cfg: RunConfig, seqs: Sequence[CanonicalSequence]) -> GeoARModel:
    """Fresh model whose Nystrom anchors tile the bounding box of the canonical coordinates."""
    coords = np.concatenate([s.coords for s in seqs])
    anchors = dataset_anchors(coords, cfg.anchor_shape, cfg.anchor_pad)
    return GeoARModel(cfg.geo_config(anchors), cfg.model_config(), seed=cfg.seed)


def train_run(cfg: RunConfig, callback=None) -> tuple[TrainResult, list[CanonicalSequence]]:
    seqs = [tokenize(m) for m in load_dataset(cfg)]
    model = build_model(cfg, seqs)
    result = train(model, seqs, cfg.train_config(), cfg.schedule(), cfg.guidance(), callback)
    return result, seqs


def sample_seed(seed: int, idx: int) -> int:
    """Independent per-sample seed derived from the run seed and the sample index."""
    return int(np.random.SeedSequence([seed, idx]).generate_state(1)[0])


def generate(
    model: GeoARModel,
    n: int,
    seed: int,
    class_id: int | None,
    scale: float,
    schedule,
    max_len: int = 32,
    temperature: float = 1.0,
) -> list[Molecule]:
    guidance = GuidanceConfig(scale=scale, p_drop=0.0)
    return [
        sample_molecule(model, class_id, max_len, schedule, guidance, sample_seed(seed, i), temperature).molecule
        for i in range(n)
    ]


def write_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss_type", "loss_diff"])
        for step, lt, ld in trace:
            w.writerow([step, repr(lt), repr(ld)])


def plot_trace(path, trace) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = [t[0] for t in trace]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, [t[1] for t in trace], label="type (cross-entropy)")
    ax.plot(steps, [t[2] for t in trace], label="coordinates (noise MSE)")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def write_samples(out_dir, mols: Sequence[Molecule], seed: int) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, m in enumerate(mols):
        p = out_dir / f"sample_{seed}_{i}.xyz"
        write_xyz_file(p, m)
        paths.append(p)
    return paths
