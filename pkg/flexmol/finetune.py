"""
Ajuste fino com uma cabeça linear sobre a representação molecular.

A cabeça lê a média mascarada do fluxo final do modelo. Moléculas de
modalidades diferentes vão para lotes diferentes, de modo que um mesmo
conjunto pode misturar registros 2D, 3D e pareados.
"""

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from rich.progress import Progress
from torch import nn

from .errors import ConfigError, ValidationError
from .featurize import FeaturizedMolecule, featurize
from .model import FlexMol
from .molio import Batch, Molecule, collate
from .pretrain import DTYPES

log = logging.getLogger(__name__)

TASKS = ("regression", "classification")


@dataclass(frozen=True)
class FinetuneConfig:
    task: str = "regression"
    lr: float = 1e-4
    epochs: int = 10
    batch_size: int = 16
    freeze_backbone: bool = False
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"tarefa deve ser uma de {TASKS}, recebi {self.task!r}", key="task")
        if self.lr <= 0:
            raise ConfigError("lr deve ser positivo", key="lr")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs e batch_size devem ser ao menos 1")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype deve ser um de {sorted(DTYPES)}", key="dtype")


class PropertyModel(nn.Module):
    def __init__(self, backbone: FlexMol):
        super().__init__()
        self.backbone = backbone
        self.head = nn.Linear(backbone.config.dim, 1)

    def forward(self, batch: Batch) -> torch.Tensor:
        return self.head(self.backbone.representation(batch)).squeeze(-1)


@dataclass
class FinetuneResult:
    model: PropertyModel
    history: list[dict] = field(default_factory=list)


def _labels(records: Sequence[FeaturizedMolecule], cfg: FinetuneConfig) -> None:
    for rec in records:
        if rec.label is None:
            raise ValidationError("registro sem rótulo ('label')", mol_id=rec.mol_id)
        if cfg.task == "classification" and rec.label not in (0, 1):
            raise ValidationError(f"rótulo de classificação deve ser 0 ou 1, recebi {rec.label}", mol_id=rec.mol_id)


def group_batches(records: Sequence[FeaturizedMolecule], batch_size: int, dtype, rng=None):
    """
    Lotes homogêneos em modalidade; com `rng`, a ordem é embaralhada.
    """
    groups: dict[tuple[bool, bool], list[FeaturizedMolecule]] = defaultdict(list)
    for rec in records:
        groups[rec.feats2d is not None, rec.feats3d is not None].append(rec)
    chunks = []
    for key in sorted(groups):
        items = groups[key]
        if rng is not None:
            items = [items[k] for k in rng.permutation(len(items))]
        chunks.extend(items[s : s + batch_size] for s in range(0, len(items), batch_size))
    if rng is not None:
        chunks = [chunks[k] for k in rng.permutation(len(chunks))]
    for chunk in chunks:
        labels = torch.tensor([rec.label for rec in chunk], dtype=dtype)
        yield collate(chunk, dtype), labels


def property_loss(pred: torch.Tensor, labels: torch.Tensor, task: str) -> torch.Tensor:
    if task == "regression":
        return F.mse_loss(pred, labels)
    return F.binary_cross_entropy_with_logits(pred, labels)


@torch.no_grad()
def evaluate_property(model: PropertyModel, molecules: Sequence[Molecule], cfg: FinetuneConfig) -> dict[str, float]:
    """
    Perda média e MAE (regressão) ou acurácia (classificação).
    """
    model.eval()
    dtype = DTYPES[cfg.dtype]
    records = [featurize(mol, model.backbone.config.feature_config()) for mol in molecules]
    _labels(records, cfg)
    preds, labels = [], []
    for batch, y in group_batches(records, cfg.batch_size, dtype):
        preds.append(model(batch))
        labels.append(y)
    pred, y = torch.cat(preds), torch.cat(labels)
    out = {"loss": float(property_loss(pred, y, cfg.task))}
    if cfg.task == "regression":
        out["mae"] = float((pred - y).abs().mean())
    else:
        out["accuracy"] = float(((pred > 0).to(y.dtype) == y).double().mean())
    return out


def finetune(
    molecules: Sequence[Molecule],
    backbone: FlexMol,
    cfg: FinetuneConfig,
    valid: Sequence[Molecule] | None = None,
    progress: bool = False,
) -> FinetuneResult:
    """
    Treina a cabeça de propriedade (e o modelo, se `freeze_backbone` for
    falso) sobre os rótulos dos registros.
    """
    torch.manual_seed(cfg.seed)
    dtype = DTYPES[cfg.dtype]
    model = PropertyModel(backbone).to(dtype)
    if cfg.freeze_backbone:
        backbone.requires_grad_(False)
    records = [featurize(mol, backbone.config.feature_config()) for mol in molecules]
    _labels(records, cfg)

    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    result = FinetuneResult(model)
    steps = cfg.epochs * math.ceil(len(records) / cfg.batch_size)

    with Progress(disable=not progress, transient=True) as bar:
        task = bar.add_task("[cyan]finetune", total=steps)
        for epoch in range(cfg.epochs):
            model.train()
            losses = []
            for batch, labels in group_batches(records, cfg.batch_size, dtype, rng):
                loss = property_loss(model(batch), labels, cfg.task)
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                losses.append(float(loss.detach()))
                bar.update(task, advance=1)
            entry = {"epoch": epoch, "train_loss": float(np.mean(losses))}
            if valid:
                entry.update({f"valid_{k}": v for k, v in evaluate_property(model, valid, cfg).items()})
            log.info("finetune época %d: %s", epoch, entry)
            result.history.append(entry)
    return result
