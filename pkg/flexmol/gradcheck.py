"""
Verificação dos gradientes da perda total do Stage 1 por diferenças finitas
centrais, em precisão de 64 bits.

Para cada tensor de parâmetros são comparadas a entrada de maior gradiente e
algumas entradas sorteadas. A corrupção do lote e os alvos da perda de
consistência ficam fixos durante as perturbações.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .featurize import FeatureConfig, featurize
from .losses import LossWeights, total_stage1
from .model import FlexMol, ModelConfig
from .molio import Bond, BondType, Molecule, collate
from .pretrain import TrainConfig, apply_corruption, stage1_terms

log = logging.getLogger(__name__)

STEP = 1e-5
TOLERANCE = 1e-4
# Abaixo de FLOOR a comparação vira erro absoluto.
FLOOR = 1e-2


@dataclass
class GradcheckReport:
    max_rel_error: float
    worst_parameter: str
    checked: int
    tolerance: float = TOLERANCE
    groups: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def to_dict(self) -> dict:
        return {
            "max_rel_error": self.max_rel_error,
            "worst_parameter": self.worst_parameter,
            "checked_entries": self.checked,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "groups": self.groups,
        }


def toy_molecule(n_atoms: int, seed: int = 0, mol_id: str | None = None) -> Molecule:
    """
    Cadeia de `n_atoms` átomos pesados com uma conformação aleatória.
    """
    rng = np.random.default_rng(seed)
    atoms = [int(z) for z in rng.choice([6, 7, 8], size=n_atoms)]
    types = list(BondType)[:3]
    bonds = [Bond(i, i + 1, types[int(rng.integers(len(types)))]) for i in range(n_atoms - 1)]
    coords = np.cumsum(rng.normal(scale=0.8, size=(n_atoms, 3)) + [1.2, 0.0, 0.0], axis=0)
    return Molecule(mol_id or f"toy{seed}", atoms, bonds=bonds, conformers=[coords])


def tiny_config(dim: int = 8, **kwargs) -> ModelConfig:
    options = {"num_kernels": 4, "num_layers": 2, "num_mm_layers": 1, "num_heads": 2, "mlp_ratio": 2}
    options.update(kwargs)
    features = FeatureConfig(max_hop=8, max_path_len=4)
    return ModelConfig.from_features(features, dim=dim, **options)


def relative_error(analytic: float, numeric: float, floor: float = FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def run_gradcheck(
    n_atoms: int = 3,
    dim: int = 8,
    seed: int = 0,
    samples: int = 2,
    config: ModelConfig | None = None,
    weights: LossWeights | None = None,
) -> GradcheckReport:
    """
    Compara gradientes analíticos e numéricos de `total_stage1` em um lote
    de duas moléculas com `n_atoms` átomos.
    """
    torch.manual_seed(seed)
    cfg = config or tiny_config(dim)
    weights = weights or LossWeights()
    model = FlexMol(cfg).to(torch.float64)
    molecules = [toy_molecule(n_atoms, seed), toy_molecule(n_atoms, seed + 1)]
    records = [featurize(mol, cfg.feature_config()) for mol in molecules]
    batch = collate(records, torch.float64)
    corrupted, plan = apply_corruption(batch, TrainConfig(dtype="float64"), np.random.default_rng(seed))

    state = model(corrupted)
    targets = {k: getattr(state, k).detach() for k in ("x_F", "y_F", "P", "Q")}
    report = total_stage1(stage1_terms(state, corrupted, plan, weights, targets), weights)
    model.zero_grad()
    report.loss.backward()

    def loss_value() -> float:
        with torch.no_grad():
            st = model(corrupted)
            return total_stage1(stage1_terms(st, corrupted, plan, weights, targets), weights).total

    rng = np.random.default_rng([seed, 7])
    worst, worst_name, checked = 0.0, "", 0
    groups: dict[str, float] = {}
    for name, param in model.named_parameters():
        grad = param.grad if param.grad is not None else torch.zeros_like(param)
        flat = param.data.view(-1)
        gflat = grad.view(-1)
        entries = {int(gflat.abs().argmax())}
        entries.update(int(k) for k in rng.choice(flat.numel(), size=min(samples, flat.numel()), replace=False))
        for k in sorted(entries):
            original = float(flat[k])
            flat[k] = original + STEP
            plus = loss_value()
            flat[k] = original - STEP
            minus = loss_value()
            flat[k] = original
            numeric = (plus - minus) / (2 * STEP)
            err = relative_error(float(gflat[k]), numeric)
            checked += 1
            group = name.split(".")[0]
            groups[group] = max(groups.get(group, 0.0), err)
            if err > worst:
                worst, worst_name = err, f"{name}[{k}]"
    log.info("gradcheck: %d entradas, erro relativo máximo %.3g em %s", checked, worst, worst_name)
    return GradcheckReport(worst, worst_name, checked, groups=groups)
