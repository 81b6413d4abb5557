"""
Features estruturais sem parâmetros, calculadas uma vez por molécula.

Para a modalidade 2D: graus, distâncias de caminho mínimo (SPD) e sequências
de arestas ao longo de um caminho mínimo. Para a 3D: a matriz de distâncias
euclidianas. O módulo também traz oráculos de força bruta usados nos testes.
"""

import hashlib
import json
import logging
import os
from collections import deque
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

from .errors import FeaturizeError, ModalityError
from .molio import Bond, BondType, Molecule

log = logging.getLogger(__name__)

CACHE_VERSION = 1

#
# Vocabulário atômico: 0 = preenchimento, (Z, carga) nas linhas 1..500, MASK.
#
MAX_ATOMIC_NUMBER = 100
MIN_CHARGE, MAX_CHARGE = -2, 2
N_CHARGES = MAX_CHARGE - MIN_CHARGE + 1
PAD_INDEX = 0
MASK_INDEX = 1 + MAX_ATOMIC_NUMBER * N_CHARGES
VOCAB_SIZE = MASK_INDEX + 1

# Classes de par: 0 = sem ligação, 1..4 = tipo de ligação.
NUM_PAIR_CLASSES = len(BondType) + 1


def atom_index(z: int, charge: int = 0) -> int:
    if not 1 <= z <= MAX_ATOMIC_NUMBER:
        raise FeaturizeError(f"número atômico fora do vocabulário: {z}")
    if not MIN_CHARGE <= charge <= MAX_CHARGE:
        raise FeaturizeError(f"carga formal fora do vocabulário: {charge}")
    return 1 + (z - 1) * N_CHARGES + (charge - MIN_CHARGE)


def atom_indices(atomic_numbers: Sequence[int], charges: Sequence[int] | None = None) -> np.ndarray:
    """
    Índices do vocabulário para cada par (número atômico, carga formal).

    Ex.: atom_indices([6, 8]) -> array([28, 38])
    """
    charges = charges if charges is not None else [0] * len(atomic_numbers)
    return np.array([atom_index(z, c) for z, c in zip(atomic_numbers, charges)], dtype=np.int64)


def decode_atom_index(index: int) -> tuple[int, int]:
    """
    Inverso de `atom_index`.
    """
    if not 1 <= index < MASK_INDEX:
        raise FeaturizeError(f"índice sem átomo correspondente: {index}")
    z, c = divmod(index - 1, N_CHARGES)
    return z + 1, c + MIN_CHARGE


@dataclass(frozen=True)
class FeatureConfig:
    """
    Limites das features estruturais.

    `edge_feat_dim` é o one-hot dos tipos de ligação mais uma posição
    reservada para "sem ligação".
    """

    max_degree: int = 8
    max_hop: int = 100
    max_path_len: int = 16
    edge_feat_dim: int = NUM_PAIR_CLASSES

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value <= 0:
                raise FeaturizeError(f"{name} deve ser positivo, recebi {value}")
        if self.max_path_len > self.max_hop:
            raise FeaturizeError(f"max_path_len ({self.max_path_len}) maior que max_hop ({self.max_hop})")
        if self.edge_feat_dim < len(BondType):
            raise FeaturizeError(f"edge_feat_dim deve ser ao menos {len(BondType)}")

    @property
    def unreachable(self) -> int:
        return self.max_hop + 1

    def digest(self) -> str:
        data = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha1(data.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class Features2D:
    degree_index: np.ndarray
    spd: np.ndarray
    edge_path: np.ndarray
    path_len: np.ndarray
    pair_class: np.ndarray


@dataclass(frozen=True)
class Features3D:
    coords: np.ndarray
    dist: np.ndarray


@dataclass(frozen=True)
class FeaturizedMolecule:
    """
    Molécula acompanhada das features de cada modalidade disponível.

    `conformer` indica qual conformação foi usada em `feats3d`.
    """

    molecule: Molecule
    config: FeatureConfig
    atoms: np.ndarray
    feats2d: Features2D | None
    feats3d: Features3D | None
    conformer: int = 0

    @property
    def mol_id(self) -> str:
        return self.molecule.id

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def label(self) -> float | None:
        return self.molecule.label

    def with_conformer(self, k: int) -> "FeaturizedMolecule":
        """
        Refaz apenas as features 3D a partir da conformação `k`.
        """
        if self.feats3d is None:
            raise ModalityError("registro sem conformações", mol_id=self.mol_id)
        if k == self.conformer:
            return self
        feats3d = featurize_3d(self.molecule.conformers[k])
        return replace(self, feats3d=feats3d, conformer=k)

    def with_coords(self, coords: np.ndarray) -> "FeaturizedMolecule":
        return replace(self, feats3d=featurize_3d(coords))

    def only(self, modality: str) -> "FeaturizedMolecule":
        """
        Descarta a modalidade que não foi pedida ("2d" ou "3d").
        """
        molecule = self.molecule.only(modality)
        if modality == "2d":
            return replace(self, molecule=molecule, feats3d=None)
        return replace(self, molecule=molecule, feats2d=None)


#
# Operações estruturais
#
def neighbors(n: int, bonds: Sequence[Bond]) -> list[list[tuple[int, BondType]]]:
    """
    Lista de adjacência com vizinhos em ordem crescente de índice.
    """
    adj: list[list[tuple[int, BondType]]] = [[] for _ in range(n)]
    for i, j, bond_type in bonds:
        adj[i].append((j, bond_type))
        adj[j].append((i, bond_type))
    for row in adj:
        row.sort(key=lambda item: item[0])
    return adj


def _bfs(adj, source: int) -> tuple[list[int], list[int]]:
    n = len(adj)
    dist = [-1] * n
    pred = [-1] * n
    dist[source] = 0
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v, _ in adj[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                pred[v] = u
                queue.append(v)
    return dist, pred


def compute_spd(n: int, bonds: Sequence[Bond], cfg: FeatureConfig) -> np.ndarray:
    """
    Distâncias de caminho mínimo entre todos os pares, por busca em largura.

    Distâncias maiores que `max_hop` são truncadas em `max_hop`; pares sem
    caminho recebem `max_hop + 1`.
    """
    adj = neighbors(n, bonds)
    spd = np.full((n, n), cfg.unreachable, dtype=np.int64)
    for source in range(n):
        dist, _ = _bfs(adj, source)
        for target, d in enumerate(dist):
            if d >= 0:
                spd[source, target] = min(d, cfg.max_hop)
    return spd


def compute_edge_paths(
    n: int,
    bonds: Sequence[Bond],
    spd: np.ndarray,
    cfg: FeatureConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Sequência de features de aresta ao longo de um caminho mínimo de cada par.

    O caminho escolhido é o descoberto primeiro pela busca em largura que
    expande vizinhos em ordem crescente de índice, ou seja, o menor caminho
    mínimo em ordem lexicográfica a partir da origem. Apenas as primeiras
    `max_path_len` arestas são mantidas.
    """
    adj = neighbors(n, bonds)
    bond_types = {}
    for i, j, bond_type in bonds:
        bond_types[i, j] = bond_types[j, i] = bond_type

    edge_path = np.zeros((n, n, cfg.max_path_len, cfg.edge_feat_dim), dtype=np.float64)
    path_len = np.zeros((n, n), dtype=np.int64)
    for source in range(n):
        dist, pred = _bfs(adj, source)
        for target in range(n):
            if target == source or dist[target] < 0:
                continue
            nodes = [target]
            while nodes[-1] != source:
                nodes.append(pred[nodes[-1]])
            nodes.reverse()
            length = min(dist[target], cfg.max_path_len)
            path_len[source, target] = length
            for step in range(length):
                bond_type = bond_types[nodes[step], nodes[step + 1]]
                edge_path[source, target, step, bond_type.index] = 1.0

    unreachable = spd == cfg.unreachable
    if np.any(path_len[unreachable]):
        raise FeaturizeError("caminho encontrado para par marcado como inalcançável")
    return edge_path, path_len


def compute_degrees(n: int, bonds: Sequence[Bond], cfg: FeatureConfig) -> np.ndarray:
    ends = [i for i, _, _ in bonds] + [j for _, j, _ in bonds]
    degree = np.bincount(np.array(ends, dtype=np.int64), minlength=n)
    return np.minimum(degree, cfg.max_degree).astype(np.int64)


def compute_distances(coords: np.ndarray) -> np.ndarray:
    """
    Matriz de distâncias euclidianas ‖rᵢ − rⱼ‖.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise FeaturizeError(f"coordenadas com forma {coords.shape}, esperava (n, 3)")
    if not np.all(np.isfinite(coords)):
        raise FeaturizeError("coordenadas não finitas")
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def compute_pair_class(n: int, bonds: Sequence[Bond]) -> np.ndarray:
    pair_class = np.zeros((n, n), dtype=np.int64)
    for i, j, bond_type in bonds:
        pair_class[i, j] = pair_class[j, i] = bond_type.index + 1
    return pair_class


def featurize_2d(mol: Molecule, cfg: FeatureConfig) -> Features2D:
    n, bonds = mol.n_atoms, mol.bonds or []
    spd = compute_spd(n, bonds, cfg)
    edge_path, path_len = compute_edge_paths(n, bonds, spd, cfg)
    return Features2D(
        degree_index=compute_degrees(n, bonds, cfg),
        spd=spd,
        edge_path=edge_path,
        path_len=path_len,
        pair_class=compute_pair_class(n, bonds),
    )


def featurize_3d(coords: np.ndarray) -> Features3D:
    coords = np.asarray(coords, dtype=np.float64)
    return Features3D(coords=coords, dist=compute_distances(coords))


def featurize(mol: Molecule, cfg: FeatureConfig | None = None, conformer: int = 0) -> FeaturizedMolecule:
    """
    Calcula as features de todas as modalidades presentes em `mol`.
    """
    cfg = cfg or FeatureConfig()
    try:
        atoms = atom_indices(mol.atomic_numbers, mol.formal_charges)
    except FeaturizeError as e:
        raise FeaturizeError(str(e), mol_id=mol.id) from e
    feats2d = featurize_2d(mol, cfg) if mol.has_2d else None
    feats3d = None
    if mol.has_3d:
        if not 0 <= conformer < len(mol.conformers):
            raise FeaturizeError(f"conformação {conformer} inexistente", mol_id=mol.id)
        try:
            feats3d = featurize_3d(mol.conformers[conformer])
        except FeaturizeError as e:
            raise FeaturizeError(str(e), mol_id=mol.id) from e
    return FeaturizedMolecule(mol, cfg, atoms, feats2d, feats3d, conformer)


def check_features(record: FeaturizedMolecule) -> list[str]:
    """
    Lista problemas encontrados nas features 2D de um registro.

    Verifica simetria e diagonal do SPD, desigualdade triangular dentro de
    cada componente conexa e coerência entre `path_len` e o SPD.
    """
    problems: list[str] = []
    feats, cfg = record.feats2d, record.config
    if feats is None:
        return problems
    spd = feats.spd
    if not np.array_equal(spd, spd.T):
        problems.append("SPD não simétrico")
    if np.any(np.diag(spd) != 0):
        problems.append("diagonal do SPD não nula")

    reach = spd <= cfg.max_hop
    if np.all(spd[reach] < cfg.max_hop):
        via = spd[:, :, None] + spd[None, :, :]
        both = reach[:, :, None] & reach[None, :, :]
        bound = np.where(both, via, np.iinfo(np.int64).max).min(axis=1)
        if np.any(spd[reach] > bound[reach]):
            problems.append("SPD viola a desigualdade triangular")

    expected = np.where(reach, np.minimum(spd, cfg.max_path_len), 0)
    np.fill_diagonal(expected, 0)
    if not np.array_equal(feats.path_len, expected):
        problems.append("path_len incoerente com o SPD")

    steps = np.arange(cfg.max_path_len)
    beyond = steps[None, None, :] >= feats.path_len[:, :, None]
    if np.any(feats.edge_path[beyond] != 0):
        problems.append("edge_path não nulo além do comprimento do caminho")
    return problems


#
# Cache de featurização
#
class FeatureCache:
    """
    Cache em disco de registros featurizados, indexado pelo conteúdo da
    molécula (id, átomos, cargas, ligações e conformações presentes) e pelo
    digest da FeatureConfig.

    A mesma molécula com outra modalidade tem outra chave: um registro só 2D
    nunca recebe features 3D calculadas para a versão pareada.

    Ex.: cache = FeatureCache(); rec = cache.get_or_compute(mol, cfg)
    """

    def __init__(self, root: str | Path | None = None):
        root = root or os.environ.get("FLEXMOL_CACHE_DIR") or Path.home() / ".cache" / "flexmol"
        self.root = Path(root)

    @staticmethod
    def content_key(mol: Molecule) -> str:
        record = mol.to_record()
        record.pop("label", None)
        record["modality"] = mol.modality.value
        payload = json.dumps(record, sort_keys=True, separators=(",", ":"))
        return hashlib.sha1(payload.encode("utf-8")).hexdigest()

    def path(self, mol: Molecule, cfg: FeatureConfig) -> Path:
        return self.root / cfg.digest() / f"{self.content_key(mol)}.npz"

    def save(self, record: FeaturizedMolecule) -> Path:
        path = self.path(record.molecule, record.config)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {"version": np.array(CACHE_VERSION), "atoms": record.atoms}
        if record.feats2d is not None:
            arrays.update({f"f2_{k}": v for k, v in asdict(record.feats2d).items()})
        if record.feats3d is not None:
            arrays.update({f"f3_{k}": v for k, v in asdict(record.feats3d).items()})
            arrays["conformer"] = np.array(record.conformer)
        with open(path, "wb") as fd:
            np.savez(fd, **arrays)
        return path

    def load(self, mol: Molecule, cfg: FeatureConfig) -> FeaturizedMolecule | None:
        path = self.path(mol, cfg)
        if not path.exists():
            return None
        with np.load(path) as data:
            if int(data["version"]) != CACHE_VERSION:
                log.info("cache desatualizado para %s, recalculando", mol.id)
                return None
            keys = set(data.files)
            if len(data["atoms"]) != mol.n_atoms:
                return None
            if ("f2_spd" in keys) != mol.has_2d or ("f3_dist" in keys) != mol.has_3d:
                log.info("modalidades do cache divergem de %s, recalculando", mol.id)
                return None
            feats2d = feats3d = None
            if "f2_spd" in keys:
                feats2d = Features2D(**{f: data[f"f2_{f}"] for f in Features2D.__dataclass_fields__})
            if "f3_dist" in keys:
                feats3d = Features3D(**{f: data[f"f3_{f}"] for f in Features3D.__dataclass_fields__})
            conformer = int(data["conformer"]) if "conformer" in keys else 0
            return FeaturizedMolecule(mol, cfg, data["atoms"], feats2d, feats3d, conformer)

    def get_or_compute(self, mol: Molecule, cfg: FeatureConfig) -> FeaturizedMolecule:
        record = self.load(mol, cfg)
        if record is None:
            record = featurize(mol, cfg)
            self.save(record)
        return record


#
# Oráculos
#
def floyd_warshall_spd(n: int, bonds: Sequence[Bond], cfg: FeatureConfig) -> np.ndarray:
    """
    SPD calculado com Floyd-Warshall (scipy), com as mesmas regras de
    truncamento de `compute_spd`.
    """
    rows = np.array([i for i, _, _ in bonds], dtype=np.int64)
    cols = np.array([j for _, j, _ in bonds], dtype=np.int64)
    graph = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    dist = shortest_path(graph, method="FW", directed=False, unweighted=True)
    spd = np.full((n, n), cfg.unreachable, dtype=np.int64)
    finite = np.isfinite(dist)
    spd[finite] = np.minimum(dist[finite], cfg.max_hop).astype(np.int64)
    return spd


def enumerate_shortest_paths(n: int, bonds: Sequence[Bond], source: int, target: int) -> list[tuple[int, ...]]:
    """
    Todos os caminhos simples de comprimento mínimo entre dois átomos, em
    ordem lexicográfica. Busca exaustiva; use apenas em grafos pequenos.
    """
    adj = neighbors(n, bonds)
    paths: list[tuple[int, ...]] = []

    def walk(path: list[int]):
        u = path[-1]
        if u == target:
            paths.append(tuple(path))
            return
        for v, _ in adj[u]:
            if v not in path:
                path.append(v)
                walk(path)
                path.pop()

    walk([source])
    if not paths:
        return []
    shortest = min(len(p) for p in paths)
    return sorted(p for p in paths if len(p) == shortest)
