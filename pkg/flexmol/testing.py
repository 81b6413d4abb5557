"""
Funções que auxiliam na criação de testes: geradores de moléculas e grafos
aleatórios, movimentos rígidos, modelos minúsculos e verificações comuns.
"""

from typing import Iterable, Sequence

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from .featurize import FeatureConfig, featurize
from .gradcheck import tiny_config
from .model import FlexMol, ForwardState, ModelConfig
from .molio import Batch, Bond, BondType, Molecule, collate

SMALL_FEATURES = FeatureConfig(max_hop=8, max_path_len=4)

METHANE_SDF = """\
methane
  flexmol

  5  4  0  0  0  0  0  0  0  0999 V2000
    0.0000    0.0000    0.0000 C   0  0  0  0  0  0  0  0  0  0  0  0
    0.6291    0.6291    0.6291 H   0  0  0  0  0  0  0  0  0  0  0  0
   -0.6291   -0.6291    0.6291 H   0  0  0  0  0  0  0  0  0  0  0  0
   -0.6291    0.6291   -0.6291 H   0  0  0  0  0  0  0  0  0  0  0  0
    0.6291   -0.6291   -0.6291 H   0  0  0  0  0  0  0  0  0  0  0  0
  1  2  1  0
  1  3  1  0
  1  4  1  0
  1  5  1  0
M  END
$$$$
"""


#
# Geradores
#
def random_bonds(n: int, rng: np.random.Generator, extra: int = 0, connected: bool = True) -> list[Bond]:
    """
    Árvore aleatória sobre `n` átomos mais `extra` arestas sorteadas. Com
    `connected=False`, a árvore é partida em duas componentes.
    """
    types = list(BondType)
    pairs = set()
    for j in range(1, n):
        pairs.add((int(rng.integers(j)), j))
    if not connected and n > 1:
        pairs.discard(max(pairs, key=lambda p: p[1]))
    candidates = [(i, j) for i in range(n) for j in range(i + 1, n) if (i, j) not in pairs]
    if not connected:
        cut = n - 1
        candidates = [(i, j) for i, j in candidates if (i < cut) == (j < cut)]
    for k in rng.permutation(len(candidates))[:extra]:
        pairs.add(candidates[k])
    return [Bond(i, j, types[int(rng.integers(len(types)))]) for i, j in sorted(pairs)]


def random_conformer(n: int, rng: np.random.Generator, spread: float = 1.5) -> np.ndarray:
    return rng.normal(scale=spread, size=(n, 3))


def random_molecule(
    n_atoms: int,
    seed: int = 0,
    modality: str = "paired",
    n_conformers: int = 1,
    extra_bonds: int = 0,
    connected: bool = True,
    label: float | None = None,
    mol_id: str | None = None,
) -> Molecule:
    """
    Molécula aleatória de átomos C, N, O e H com a modalidade pedida
    ("paired", "2d" ou "3d").
    """
    rng = np.random.default_rng(seed)
    atoms = [int(z) for z in rng.choice([1, 6, 7, 8], size=n_atoms, p=[0.2, 0.5, 0.15, 0.15])]
    bonds = random_bonds(n_atoms, rng, extra_bonds, connected) if modality != "3d" else None
    conformers = [random_conformer(n_atoms, rng) for _ in range(n_conformers)] if modality != "2d" else None
    return Molecule(mol_id or f"mol{seed}", atoms, bonds=bonds, conformers=conformers, label=label)


def random_dataset(
    count: int,
    seed: int = 0,
    sizes: Sequence[int] = (3, 4, 5, 6),
    modality: str = "paired",
    **kwargs,
) -> list[Molecule]:
    rng = np.random.default_rng(seed)
    return [
        random_molecule(int(rng.choice(sizes)), seed=seed * 1000 + k, modality=modality, mol_id=f"m{k}", **kwargs)
        for k in range(count)
    ]


def random_rigid_motion(seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """
    Rotação própria uniforme e translação aleatória (R, t).
    """
    rng = np.random.default_rng(seed)
    rotation = Rotation.from_quat(rng.normal(size=4)).as_matrix()
    return rotation, rng.normal(scale=3.0, size=3)


def move(coords: np.ndarray, rotation: np.ndarray, translation: np.ndarray) -> np.ndarray:
    return np.asarray(coords) @ rotation.T + translation


def moved_molecule(mol: Molecule, rotation: np.ndarray, translation: np.ndarray) -> Molecule:
    confs = [move(c, rotation, translation) for c in mol.conformers]
    return Molecule(mol.id, mol.atomic_numbers, mol.formal_charges, mol.bonds, confs, mol.label)


def permuted_molecule(mol: Molecule, perm: Sequence[int]) -> Molecule:
    """
    Mesma molécula com os átomos reordenados: o novo átomo k é o antigo
    `perm[k]`.
    """
    inverse = {old: new for new, old in enumerate(perm)}
    bonds = None
    if mol.bonds is not None:
        bonds = [Bond(inverse[i], inverse[j], t) for i, j, t in mol.bonds]
    confs = [c[list(perm)] for c in mol.conformers] if mol.conformers else None
    atoms = [mol.atomic_numbers[k] for k in perm]
    charges = [mol.formal_charges[k] for k in perm]
    return Molecule(mol.id, atoms, charges, bonds, confs, mol.label)


#
# Modelos e lotes
#
def tiny_model(seed: int = 0, dtype: torch.dtype = torch.float64, **kwargs) -> FlexMol:
    torch.manual_seed(seed)
    return FlexMol(tiny_config(**kwargs)).to(dtype)


def make_batch(
    molecules: Iterable[Molecule],
    cfg: FeatureConfig | ModelConfig = SMALL_FEATURES,
    dtype: torch.dtype = torch.float64,
) -> Batch:
    if isinstance(cfg, ModelConfig):
        cfg = cfg.feature_config()
    return collate([featurize(mol, cfg) for mol in molecules], dtype)


#
# Verificações
#
def assert_state_finite(state: ForwardState) -> None:
    for name, value in vars(state).items():
        if isinstance(value, torch.Tensor):
            assert torch.isfinite(value).all(), f"tensor {name} tem valores não finitos"


def assert_close(a, b, atol: float = 1e-8, rtol: float = 1e-6, msg: str = "") -> None:
    a = torch.as_tensor(a)
    b = torch.as_tensor(b, dtype=a.dtype)
    diff = float((a - b).abs().max()) if a.numel() else 0.0
    assert torch.allclose(a, b, atol=atol, rtol=rtol), f"{msg} diferença máxima {diff:.3g}".strip()
