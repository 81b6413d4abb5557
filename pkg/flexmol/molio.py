"""
Modelo de dados, leitura/escrita, partição e agrupamento em lotes de moléculas.

O formato canônico é JSON por linha (um registro por molécula). Arquivos SDF
V2000 são aceitos apenas para importação.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, NamedTuple, Sequence

import numpy as np
import torch

from .errors import ModalityError, ParseError, ValidationError

if TYPE_CHECKING:
    from .featurize import FeaturizedMolecule

log = logging.getLogger(__name__)

BIAS_SENTINEL = -1e9
MANIFEST_VERSION = 1

# Símbolos dos elementos 1..100; o índice na tupla + 1 é o número atômico.
ELEMENTS = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni "
    "Cu Zn Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I "
    "Xe Cs Ba La Ce Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt "
    "Au Hg Tl Pb Bi Po At Rn Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm"
).split()
ATOMIC_NUMBERS = {sym: z for z, sym in enumerate(ELEMENTS, start=1)}

# Códigos de carga do bloco de átomos V2000 (colunas 37-39).
SDF_CHARGE_CODES = {0: 0, 1: 3, 2: 2, 3: 1, 4: 0, 5: -1, 6: -2, 7: -3}


class BondType(str, Enum):
    SINGLE = "single"
    DOUBLE = "double"
    TRIPLE = "triple"
    AROMATIC = "aromatic"

    @property
    def index(self) -> int:
        return list(BondType).index(self)


SDF_BOND_CODES = {
    1: BondType.SINGLE,
    2: BondType.DOUBLE,
    3: BondType.TRIPLE,
    4: BondType.AROMATIC,
}


class Bond(NamedTuple):
    i: int
    j: int
    bond_type: BondType = BondType.SINGLE


class Modality(str, Enum):
    PAIRED = "paired"
    ONLY_2D = "2d_only"
    ONLY_3D = "3d_only"
    MIXED = "mixed"


@dataclass(frozen=True)
class Molecule:
    """
    Uma molécula com qualquer combinação das modalidades 2D (ligações) e 3D
    (conformações).

    Ex.: Molecule("m1", [6, 8], bonds=[Bond(0, 1, BondType.DOUBLE)])
    """

    id: str
    atomic_numbers: list[int]
    formal_charges: list[int] = field(default_factory=list)
    bonds: list[Bond] | None = None
    conformers: list[np.ndarray] | None = None
    label: float | None = None

    def __post_init__(self):
        if not self.formal_charges:
            super().__setattr__("formal_charges", [0] * len(self.atomic_numbers))
        if self.bonds is not None:
            super().__setattr__("bonds", [self._bond(b) for b in self.bonds])
        if self.conformers is not None:
            confs = [np.asarray(c, dtype=np.float64) for c in self.conformers]
            super().__setattr__("conformers", confs)

    def _bond(self, entry) -> Bond:
        # [i, j] sem tipo vale como ligação simples.
        if len(entry) not in (2, 3):
            msg = f"ligação malformada {list(entry)!r}: esperava [i, j] ou [i, j, tipo]"
            raise ValidationError(msg, mol_id=self.id)
        i, j, *rest = entry
        return Bond(int(i), int(j), BondType(rest[0]) if rest else BondType.SINGLE)

    @property
    def n_atoms(self) -> int:
        return len(self.atomic_numbers)

    @property
    def has_2d(self) -> bool:
        return self.bonds is not None

    @property
    def has_3d(self) -> bool:
        return bool(self.conformers)

    @property
    def modality(self) -> Modality:
        if self.has_2d and self.has_3d:
            return Modality.PAIRED
        return Modality.ONLY_2D if self.has_2d else Modality.ONLY_3D

    def validate(self) -> "Molecule":
        """
        Verifica os invariantes do registro e retorna a própria molécula.

        Lança ValidationError nomeando a molécula no primeiro problema
        encontrado.
        """
        n = self.n_atoms
        if n == 0:
            raise ValidationError("molécula sem átomos", mol_id=self.id)
        if len(self.formal_charges) != n:
            msg = f"{len(self.formal_charges)} cargas para {n} átomos"
            raise ValidationError(msg, mol_id=self.id)
        if not self.has_2d and not self.has_3d:
            raise ValidationError("sem ligações e sem conformações", mol_id=self.id)

        seen: set[tuple[int, int]] = set()
        for i, j, _ in self.bonds or ():
            if not (0 <= i < n and 0 <= j < n):
                msg = f"ligação ({i}, {j}) fora do intervalo [0, {n})"
                raise ValidationError(msg, mol_id=self.id)
            if i == j:
                raise ValidationError(f"ligação do átomo {i} consigo mesmo", mol_id=self.id)
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValidationError(f"ligação duplicada {key}", mol_id=self.id)
            seen.add(key)

        for k, conf in enumerate(self.conformers or ()):
            if conf.shape != (n, 3):
                msg = f"conformação {k} tem forma {conf.shape}, esperava ({n}, 3)"
                raise ValidationError(msg, mol_id=self.id)
        return self

    def only(self, modality: str) -> "Molecule":
        """
        Cópia contendo apenas a modalidade pedida ("2d" ou "3d").
        """
        if modality == "2d":
            if not self.has_2d:
                raise ModalityError("registro sem ligações (2D)", mol_id=self.id)
            return Molecule(self.id, self.atomic_numbers, self.formal_charges, self.bonds, None, self.label)
        if modality == "3d":
            if not self.has_3d:
                raise ModalityError("registro sem conformações (3D)", mol_id=self.id)
            return Molecule(self.id, self.atomic_numbers, self.formal_charges, None, self.conformers, self.label)
        raise ValueError(f"modalidade desconhecida: {modality!r}")

    def to_record(self) -> dict:
        """
        Registro JSON no esquema {id, atoms, charges?, bonds?, coords?, label?}.
        """
        record: dict = {"id": self.id, "atoms": list(self.atomic_numbers)}
        if any(self.formal_charges):
            record["charges"] = list(self.formal_charges)
        if self.bonds is not None:
            record["bonds"] = [[i, j, t.value] for i, j, t in self.bonds]
        if self.conformers:
            record["coords"] = [c.tolist() for c in self.conformers]
        if self.label is not None:
            record["label"] = self.label
        return record

    @classmethod
    def from_record(cls, record: dict) -> "Molecule":
        return cls(
            id=str(record["id"]),
            atomic_numbers=[int(z) for z in record["atoms"]],
            formal_charges=[int(c) for c in record.get("charges") or []],
            bonds=record.get("bonds"),
            conformers=record.get("coords"),
            label=record.get("label"),
        )


#
# JSONL
#
def parse_jsonl(path: str | Path) -> list[Molecule]:
    """
    Lê um arquivo JSONL de moléculas, validando cada registro.

    Linhas em branco são ignoradas. Erros de sintaxe produzem um ParseError
    com o número da linha; violações de invariantes, um ValidationError com o
    id da molécula.
    """
    molecules = []
    with open(path, encoding="utf-8") as fd:
        for lineno, line in enumerate(fd, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"JSON inválido: {e.msg}", line=lineno) from e
            if not isinstance(record, dict) or "id" not in record or "atoms" not in record:
                raise ParseError("registro sem as chaves 'id' e 'atoms'", line=lineno)
            try:
                mol = Molecule.from_record(record)
            except (TypeError, ValueError) as e:
                raise ParseError(str(e), line=lineno, mol_id=record.get("id")) from e
            molecules.append(mol.validate())
    return molecules


def write_jsonl(path: str | Path, molecules: Iterable[Molecule]) -> int:
    """
    Escreve as moléculas em JSONL e retorna o número de registros.
    """
    count = 0
    with open(path, "w", encoding="utf-8") as fd:
        for mol in molecules:
            fd.write(json.dumps(mol.to_record()))
            fd.write("\n")
            count += 1
    return count


#
# SDF V2000
#
def parse_sdf_v2000(path: str | Path) -> list[Molecule]:
    """
    Importa um arquivo com molfiles V2000 concatenados e separados por "$$$$".

    A linha de contagens é lida em colunas fixas (átomos 1-3, ligações 4-6).
    Linhas "M  CHG" substituem as cargas do bloco de átomos; os demais blocos
    de propriedades ("M  ...") e campos de dados são ignorados.
    """
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    molecules = []
    start = 0
    for lineno, line in enumerate(lines):
        if line.strip() == "$$$$":
            block = lines[start:lineno]
            if any(s.strip() for s in block):
                molecules.append(_parse_molfile(block, start + 1, Path(path).stem, len(molecules)))
            start = lineno + 1
    tail = lines[start:]
    if any(s.strip() for s in tail):
        molecules.append(_parse_molfile(tail, start + 1, Path(path).stem, len(molecules)))
    return molecules


def _parse_molfile(block: list[str], first_line: int, stem: str, index: int) -> Molecule:
    if len(block) < 4:
        raise ParseError("molfile sem linha de contagens", line=first_line)

    counts_line = first_line + 3
    counts = block[3]
    try:
        n_atoms = int(counts[0:3])
        n_bonds = int(counts[3:6])
    except ValueError as e:
        raise ParseError(f"linha de contagens inválida: {counts!r}", line=counts_line) from e

    body = block[4:]
    end = next((k for k, s in enumerate(body) if s.startswith("M  ")), None)
    if end is None:
        while body and not body[-1].strip():
            body = body[:-1]
        end = len(body)
    if end != n_atoms + n_bonds:
        msg = (
            f"linha de contagens declara {n_atoms} átomos e {n_bonds} ligações, "
            f"mas o bloco tem {end} linhas"
        )
        raise ParseError(msg, line=counts_line)

    mol_id = block[0].strip() or f"{stem}_{index}"
    atomic_numbers, charges, coords = [], [], []
    unknown = []
    for k, line in enumerate(body[:n_atoms]):
        try:
            xyz = [float(line[0:10]), float(line[10:20]), float(line[20:30])]
            symbol = line[31:34].strip()
            code = int(line[36:39].strip() or 0)
        except ValueError as e:
            raise ParseError(f"linha de átomo inválida: {line!r}", line=counts_line + 1 + k) from e
        if symbol not in ATOMIC_NUMBERS:
            unknown.append(symbol)
            continue
        atomic_numbers.append(ATOMIC_NUMBERS[symbol])
        charges.append(SDF_CHARGE_CODES.get(code, 0))
        coords.append(xyz)
    if unknown:
        raise ParseError(f"elementos desconhecidos: {', '.join(sorted(set(unknown)))}", mol_id=mol_id)

    bonds = []
    for k, line in enumerate(body[n_atoms:end]):
        lineno = counts_line + 1 + n_atoms + k
        try:
            i, j, code = int(line[0:3]), int(line[3:6]), int(line[6:9])
        except ValueError as e:
            raise ParseError(f"linha de ligação inválida: {line!r}", line=lineno) from e
        if code not in SDF_BOND_CODES:
            raise ParseError(f"tipo de ligação V2000 não suportado: {code}", line=lineno)
        bonds.append(Bond(i - 1, j - 1, SDF_BOND_CODES[code]))

    charge_lines = [
        (counts_line + 1 + end + k, line)
        for k, line in enumerate(body[end:])
        if line.startswith("M  CHG")
    ]
    if charge_lines:
        charges = [0] * len(atomic_numbers)
    for lineno, line in charge_lines:
        for atom, charge in _charge_entries(line, lineno):
            if not 1 <= atom <= len(charges):
                raise ParseError(f"M  CHG refere o átomo {atom}, fora de [1, {len(charges)}]", line=lineno)
            charges[atom - 1] = charge

    mol =Molecule(mol_id, atomic_numbers, charges, bonds, [np.array(coords, dtype=np.float64)])
    return mol.validate()


def _charge_entries(line: str, lineno: int) -> list[tuple[int, int]]:
    # "M  CHGnn8 aaa vvv ...": contagem seguida de pares (átomo, carga).
    try:
        fields = [int(tok) for tok in line[6:].split()]
    except ValueError as e:
        raise ParseError(f"linha M  CHG inválida: {line!r}", line=lineno) from e
    if not fields or len(fields) != 1 + 2 * fields[0]:
        raise ParseError(f"linha M  CHG inválida: {line!r}", line=lineno)
    return list(zip(fields[1::2], fields[2::2]))


#
# Partição
#
def random_split(
    dataset: Sequence[Molecule],
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> tuple[list[Molecule], list[Molecule], list[Molecule]]:
    """
    Partição aleatória e determinística em treino/validação/teste.

    Validação e teste recebem floor(fração · n) moléculas; o resto fica no
    treino.
    """
    if not dataset:
        raise ValidationError("não é possível particionar um dataset vazio")
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValidationError(f"frações devem ser três valores positivos: {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValidationError(f"frações devem somar 1: {fractions}")

    n = len(dataset)
    n_valid = math.floor(fractions[1] * n + 1e-9)
    n_test = math.floor(fractions[2] * n + 1e-9)
    order = np.random.default_rng(seed).permutation(n)
    items = [dataset[k] for k in order]
    n_train = n - n_valid - n_test
    return items[:n_train], items[n_train : n_train + n_valid], items[n_train + n_valid :]


#
# Manifesto
#
@dataclass(frozen=True)
class DatasetManifest:
    path: str
    count: int
    modality: Modality
    format_version: int = MANIFEST_VERSION


def infer_modality(molecules: Iterable[Molecule]) -> Modality:
    kinds = {mol.modality for mol in molecules}
    if len(kinds) == 1:
        return kinds.pop()
    return Modality.MIXED


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def write_manifest(path: str | Path, molecules: Sequence[Molecule]) -> DatasetManifest:
    manifest = DatasetManifest(str(path), len(molecules), infer_modality(molecules))
    data = {**asdict(manifest), "modality": manifest.modality.value}
    manifest_path(path).write_text(json.dumps(data, indent=2, sort_keys=True), encoding="utf-8")
    return manifest


def read_manifest(path: str | Path) -> DatasetManifest:
    data = json.loads(manifest_path(path).read_text(encoding="utf-8"))
    if data.get("format_version") != MANIFEST_VERSION:
        raise ValidationError(f"versão de manifesto não suportada: {data.get('format_version')}")
    return DatasetManifest(data["path"], data["count"], Modality(data["modality"]), data["format_version"])


def check_manifest(manifest: DatasetManifest, molecules: Sequence[Molecule]) -> None:
    if manifest.count != len(molecules):
        raise ValidationError(f"manifesto declara {manifest.count} registros, arquivo tem {len(molecules)}")
    actual = infer_modality(molecules)
    if manifest.modality != actual:
        raise ValidationError(f"manifesto declara modalidade {manifest.modality.value}, registros são {actual.value}")


#
# Lotes
#
@dataclass(frozen=True)
class Batch:
    """
    Lote de moléculas featurizadas, preenchido até o maior número de átomos.

    Tensores por átomo têm forma B×n; tensores por par, B×n×n. Posições de
    preenchimento têm `atom_mask` falso e não contribuem para perdas nem
    para médias.
    """

    records: list["FeaturizedMolecule"]
    atoms: torch.Tensor
    atom_mask: torch.Tensor
    pair_class: torch.Tensor
    degree: torch.Tensor | None = None
    spd: torch.Tensor | None = None
    edge_path: torch.Tensor | None = None
    path_len: torch.Tensor | None = None
    coords: torch.Tensor | None = None
    dist: torch.Tensor | None = None

    @property
    def ids(self) -> list[str]:
        return [r.mol_id for r in self.records]

    @property
    def pad_to(self) -> int:
        return self.atoms.shape[1]

    @property
    def size(self) -> int:
        return self.atoms.shape[0]

    @property
    def pair_mask(self) -> torch.Tensor:
        return self.atom_mask[:, :, None] & self.atom_mask[:, None, :]

    @property
    def has_2d(self) -> bool:
        return self.degree is not None

    @property
    def has_3d(self) -> bool:
        return self.coords is not None

    @property
    def modality(self) -> str:
        if self.has_2d and self.has_3d:
            return "paired"
        return "2d" if self.has_2d else "3d"

    def key_bias(self, dtype: torch.dtype | None = None) -> torch.Tensor:
        """
        Viés aditivo B×n por chave: 0 para átomos reais, BIAS_SENTINEL para
        preenchimento.
        """
        dtype = dtype or self.float_dtype
        zero = torch.zeros((), dtype=dtype)
        return torch.where(self.atom_mask, zero, torch.tensor(BIAS_SENTINEL, dtype=dtype))

    @property
    def float_dtype(self) -> torch.dtype:
        for tensor in (self.coords, self.edge_path):
            if tensor is not None:
                return tensor.dtype
        return torch.get_default_dtype()


def collate(records: Sequence["FeaturizedMolecule"], dtype: torch.dtype = torch.float32) -> Batch:
    """
    Agrupa moléculas featurizadas em um Batch.

    Todas as moléculas devem ter sido featurizadas com a mesma FeatureConfig e
    ter as mesmas modalidades.
    """
    if not records:
        raise ValidationError("lote vazio")
    digests = {r.config.digest() for r in records}
    if len(digests) > 1:
        raise ValidationError(f"lote com configurações de features diferentes: {sorted(digests)}")
    kinds = {(r.feats2d is not None, r.feats3d is not None) for r in records}
    if len(kinds) > 1:
        raise ModalityError("lote com modalidades misturadas")
    has_2d, has_3d = kinds.pop()

    cfg = records[0].config
    size, n_max = len(records), max(r.n_atoms for r in records)
    atoms = torch.zeros(size, n_max, dtype=torch.long)
    atom_mask = torch.zeros(size, n_max, dtype=torch.bool)
    pair_class = torch.zeros(size, n_max, n_max, dtype=torch.long)
    extra: dict[str, torch.Tensor] = {}
    if has_2d:
        extra["degree"] = torch.zeros(size, n_max, dtype=torch.long)
        extra["spd"] = torch.zeros(size, n_max, n_max, dtype=torch.long)
        extra["edge_path"] = torch.zeros(size, n_max, n_max, cfg.max_path_len, cfg.edge_feat_dim, dtype=dtype)
        extra["path_len"] = torch.zeros(size, n_max, n_max, dtype=torch.long)
    if has_3d:
        extra["coords"] = torch.zeros(size, n_max, 3, dtype=dtype)
        extra["dist"] = torch.zeros(size, n_max, n_max, dtype=dtype)

    for b, rec in enumerate(records):
        n = rec.n_atoms
        atoms[b, :n] = torch.from_numpy(rec.atoms)
        atom_mask[b, :n] = True
        if rec.feats2d is not None:
            f2 = rec.feats2d
            pair_class[b, :n, :n] = torch.from_numpy(f2.pair_class)
            extra["degree"][b, :n] = torch.from_numpy(f2.degree_index)
            extra["spd"][b, :n, :n] = torch.from_numpy(f2.spd)
            extra["edge_path"][b, :n, :n] = torch.from_numpy(f2.edge_path).to(dtype)
            extra["path_len"][b, :n, :n] = torch.from_numpy(f2.path_len)
        if rec.feats3d is not None:
            extra["coords"][b, :n] = torch.from_numpy(rec.feats3d.coords).to(dtype)
            extra["dist"][b, :n, :n] = torch.from_numpy(rec.feats3d.dist).to(dtype)

    return Batch(list(records), atoms, atom_mask, pair_class, **extra)
