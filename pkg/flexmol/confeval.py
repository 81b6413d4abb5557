"""
Geração e avaliação de conjuntos de conformações.

As métricas são COV (fração das conformações de referência com alguma
conformação gerada a menos de δ Å) e MAT (média, sobre as referências, da
menor RMSD até uma conformação gerada). A RMSD usa alinhamento de Kabsch sem
reflexões.
"""

import logging
import statistics
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
import torch
from rich.table import Table
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from .errors import ConfigError, ModalityError, ValidationError
from .featurize import FeatureConfig, featurize
from .model import FlexMol
from .molio import Molecule, collate

log = logging.getLogger(__name__)

REFINEMENT_ROUNDS = 8


class Role(str, Enum):
    GENERATED = "generated"
    REFERENCE = "reference"


@dataclass(frozen=True)
class EvalConfig:
    delta: float = 0.5
    heavy_atoms_only: bool = True

    def __post_init__(self):
        if self.delta <= 0:
            raise ConfigError(f"delta deve ser positivo, recebi {self.delta}", key="delta")


@dataclass(frozen=True)
class ConformerSet:
    molecule_id: str
    conformers: list[np.ndarray]
    role: Role = Role.REFERENCE
    atomic_numbers: list[int] | None = None

    def __post_init__(self):
        if not self.conformers:
            raise ValidationError("conjunto de conformações vazio", mol_id=self.molecule_id)
        confs = [np.asarray(c, dtype=np.float64) for c in self.conformers]
        n = confs[0].shape[0]
        if any(c.shape != (n, 3) for c in confs):
            raise ValidationError("conformações com números de átomos diferentes", mol_id=self.molecule_id)
        super().__setattr__("conformers", confs)

    @property
    def n_atoms(self) -> int:
        return self.conformers[0].shape[0]

    def __len__(self):
        return len(self.conformers)

    @classmethod
    def from_molecule(cls, mol: Molecule, role: Role = Role.REFERENCE) -> "ConformerSet":
        if not mol.has_3d:
            raise ModalityError("registro sem conformações", mol_id=mol.id)
        return cls(mol.id, mol.conformers, role, list(mol.atomic_numbers))

    def to_molecule(self, template: Molecule | None = None) -> Molecule:
        if template is not None:
            return Molecule(
                template.id, template.atomic_numbers, template.formal_charges, template.bonds, self.conformers
            )
        return Molecule(self.molecule_id, self.atomic_numbers, conformers=self.conformers)


#
# RMSD
#
def kabsch_rmsd(coords: np.ndarray, ref: np.ndarray) -> float:
    """
    RMSD mínima entre duas conformações sobre todas as rotações próprias e
    translações.
    """
    a = np.asarray(coords, dtype=np.float64)
    b = np.asarray(ref, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
        raise ValidationError(f"conformações com formas diferentes: {a.shape} e {b.shape}")
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    if np.allclose(a, 0.0) or np.allclose(b, 0.0):
        return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1))))

    v, _, w = np.linalg.svd(a.T @ b)
    if np.linalg.det(v) * np.linalg.det(w) < 0.0:
        v[:, -1] = -v[:, -1]
    moved = a @ (v @ w)
    return float(np.sqrt(np.mean(np.sum((moved - b) ** 2, axis=1))))


def heavy_atom_mask(atomic_numbers: Sequence[int] | None, n: int) -> np.ndarray:
    """
    Átomos pesados (Z > 1). Sem números atômicos, ou sem nenhum átomo pesado,
    todos os átomos são usados.
    """
    if atomic_numbers is None:
        return np.ones(n, dtype=bool)
    mask = np.asarray(atomic_numbers) > 1
    return mask if mask.any() else np.ones(n, dtype=bool)


def rmsd_matrix(generated: ConformerSet, reference: ConformerSet, cfg: EvalConfig | None = None) -> np.ndarray:
    """
    Matriz |S_r|×|S_g| de RMSDs alinhadas.
    """
    cfg = cfg or EvalConfig()
    if generated.n_atoms != reference.n_atoms:
        msg = f"{generated.n_atoms} átomos gerados para {reference.n_atoms} de referência"
        raise ValidationError(msg, mol_id=reference.molecule_id)
    z = reference.atomic_numbers or generated.atomic_numbers
    keep = heavy_atom_mask(z, reference.n_atoms) if cfg.heavy_atoms_only else np.ones(reference.n_atoms, dtype=bool)
    out = np.empty((len(reference), len(generated)))
    for r, ref in enumerate(reference.conformers):
        for g, gen in enumerate(generated.conformers):
            out[r, g] = kabsch_rmsd(gen[keep], ref[keep])
    return out


def coverage(generated: ConformerSet, reference: ConformerSet, cfg: EvalConfig | None = None) -> float:
    cfg = cfg or EvalConfig()
    rmsd = rmsd_matrix(generated, reference, cfg)
    return float(np.mean(rmsd.min(axis=1) < cfg.delta))


def matching(generated: ConformerSet, reference: ConformerSet, cfg: EvalConfig | None = None) -> float:
    rmsd = rmsd_matrix(generated, reference, cfg)
    return float(np.mean(rmsd.min(axis=1)))


#
# Relatório
#
@dataclass
class EvalReport:
    cov_mean: float
    cov_median: float
    mat_mean: float
    mat_median: float
    delta: float
    per_molecule: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "cov_mean": self.cov_mean,
            "cov_median": self.cov_median,
            "mat_mean": self.mat_mean,
            "mat_median": self.mat_median,
            "delta": self.delta,
            "per_molecule": self.per_molecule,
        }

    def table(self) -> Table:
        table = Table(title=f"Conformações (δ = {self.delta} Å)")
        table.add_column("métrica")
        table.add_column("média", justify="right")
        table.add_column("mediana", justify="right")
        table.add_row("COV (%)", f"{100 * self.cov_mean:.2f}", f"{100 * self.cov_median:.2f}")
        table.add_row("MAT (Å)", f"{self.mat_mean:.4f}", f"{self.mat_median:.4f}")
        return table


def evaluate(pairs: Sequence[tuple[ConformerSet, ConformerSet]], cfg: EvalConfig | None = None) -> EvalReport:
    """
    COV e MAT por molécula e suas médias e medianas sobre o conjunto.

    Cada item de `pairs` é (S_g, S_r) para a mesma molécula.
    """
    cfg = cfg or EvalConfig()
    if not pairs:
        raise ValidationError("nenhuma molécula para avaliar")
    rows = []
    for generated, reference in pairs:
        if generated.molecule_id != reference.molecule_id:
            msg = f"conjuntos de moléculas diferentes: {generated.molecule_id} e {reference.molecule_id}"
            raise ValidationError(msg)
        rmsd = rmsd_matrix(generated, reference, cfg)
        best = rmsd.min(axis=1)
        rows.append(
            {
                "id": reference.molecule_id,
                "cov": float(np.mean(best < cfg.delta)),
                "mat": float(np.mean(best)),
                "n_generated": len(generated),
                "n_reference": len(reference),
            }
        )
    covs = [row["cov"] for row in rows]
    mats = [row["mat"] for row in rows]
    return EvalReport(
        cov_mean=statistics.fmean(covs),
        cov_median=statistics.median(covs),
        mat_mean=statistics.fmean(mats),
        mat_median=statistics.median(mats),
        delta=cfg.delta,
        per_molecule=rows,
    )


def pair_sets(generated: Sequence[Molecule], reference: Sequence[Molecule]) -> list[tuple[ConformerSet, ConformerSet]]:
    """
    Associa registros gerados e de referência pelo id.
    """
    by_id = {mol.id: mol for mol in generated}
    missing = [mol.id for mol in reference if mol.id not in by_id]
    if missing:
        raise ValidationError(f"sem conformações geradas para: {', '.join(missing)}")
    return [
        (ConformerSet.from_molecule(by_id[mol.id], Role.GENERATED), ConformerSet.from_molecule(mol, Role.REFERENCE))
        for mol in reference
    ]


#
# Geração
#
@torch.no_grad()
def generate_conformers(
    mol: Molecule,
    model: FlexMol,
    count: int | None = None,
    seed: int = 0,
    feature_config: FeatureConfig | None = None,
    rounds: int = REFINEMENT_ROUNDS,
) -> ConformerSet:
    """
    Gera `count` conformações a partir do grafo 2D.

    Cada amostra parte de uma nuvem gaussiana (σ = 1 Å) semeada por
    (seed, k) e é refinada pela cabeça de posições durante `rounds` rodadas,
    usando a representação de pares do forward apenas 2D. Sem `count`, gera
    o dobro do número de conformações de referência do registro.
    """
    if not mol.has_2d:
        raise ModalityError("geração exige ligações (2D)", mol_id=mol.id)
    if count is None:
        if not mol.has_3d:
            raise ValidationError("sem conformações de referência para definir a quantidade", mol_id=mol.id)
        count = 2 * len(mol.conformers)
    if count < 1:
        raise ValidationError(f"quantidade de conformações deve ser positiva, recebi {count}", mol_id=mol.id)

    model.eval()
    dtype = next(model.parameters()).dtype
    cfg = feature_config or model.config.feature_config()
    batch = collate([featurize(mol.only("2d"), cfg)], dtype)
    state = model.forward_2d(batch)
    pair = state.P_L

    conformers = []
    for k in range(count):
        rng = np.random.default_rng([seed, k])
        coords = torch.as_tensor(rng.normal(0.0, 1.0, size=(1, mol.n_atoms, 3)), dtype=dtype)
        for _ in range(rounds):
            coords = model.position_head(pair, coords, batch.atom_mask)
        conformers.append(coords[0].cpu().numpy().astype(np.float64))
    log.debug("%s: %d conformações geradas", mol.id, count)
    return ConformerSet(mol.id, conformers, Role.GENERATED, list(mol.atomic_numbers))


#
# Oráculo
#
def _rmsd_after(rotations: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    moved = np.einsum("kij,nj->kni", rotations, a)
    return np.sqrt(np.mean(np.sum((moved - b) ** 2, axis=-1), axis=-1))


def brute_force_rmsd(
    coords: np.ndarray,
    ref: np.ndarray,
    samples: int = 1_000_000,
    seed: int = 0,
    chunk: int = 50_000,
) -> float:
    """
    RMSD mínima por busca aleatória em quatérnios unitários seguida de
    refinamento local (Nelder-Mead sobre o vetor de rotação).
    """
    a = np.asarray(coords, dtype=np.float64)
    b = np.asarray(ref, dtype=np.float64)
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    rng = np.random.default_rng(seed)

    best_value, best_rotvec = np.inf, np.zeros(3)
    for start in range(0, samples, chunk):
        quats = rng.normal(size=(min(chunk, samples - start), 4))
        rotations = Rotation.from_quat(quats / np.linalg.norm(quats, axis=1, keepdims=True))
        values = _rmsd_after(rotations.as_matrix(), a, b)
        k = int(np.argmin(values))
        if values[k] < best_value:
            best_value, best_rotvec = float(values[k]), rotations[k].as_rotvec()

    def objective(rotvec):
        matrix = Rotation.from_rotvec(rotvec).as_matrix()[None]
        return float(_rmsd_after(matrix, a, b)[0])

    result = minimize(objective, best_rotvec, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-12})
    return min(best_value, float(result.fun))
