import json

import numpy as np
import pytest
import torch

from flexmol import testing
from flexmol.errors import ModalityError, ParseError, ValidationError
from flexmol.featurize import featurize
from flexmol.molio import (
    BIAS_SENTINEL,
    Bond,
    BondType,
    Modality,
    Molecule,
    check_manifest,
    collate,
    manifest_path,
    parse_jsonl,
    parse_sdf_v2000,
    random_split,
    read_manifest,
    write_jsonl,
    write_manifest,
)


def molfile(atoms, bonds, properties, name="mol"):
    """
    Molfile V2000 mínimo; cada átomo é "Sím dd ccc" (colunas 32-39).
    """
    counts = f"{len(atoms):3d}{len(bonds):3d}  0  0  0  0  0  0  0  0999 V2000"
    atom_lines = [f"{0.0:10.4f}{0.0:10.4f}{1.5 * k:10.4f} {a}" for k, a in enumerate(atoms)]
    return "\n".join([name, "  flexmol", "", counts, *atom_lines, *bonds, *properties, "M  END", "$$$$", ""])


class TestMolecule:
    def test_modalidades(self, water):
        assert water.modality == Modality.PAIRED
        assert water.only("2d").modality == Modality.ONLY_2D
        assert water.only("3d").modality == Modality.ONLY_3D

    def test_only_sem_modalidade(self, water):
        with pytest.raises(ModalityError, match="water"):
            water.only("2d").only("3d")

    def test_cargas_padrao(self, water):
        assert water.formal_charges == [0, 0, 0]

    def test_ligacoes_sao_normalizadas(self, water):
        assert water.bonds[0] == Bond(0, 1, BondType.SINGLE)

    @pytest.mark.parametrize(
        "kwargs, message",
        [
            ({"atomic_numbers": []}, "sem átomos"),
            ({"bonds": [(0, 5, "single")]}, "fora do intervalo"),
            ({"bonds": [(1, 1, "single")]}, "consigo mesmo"),
            ({"bonds": [(0, 1, "single"), (1, 0, "double")]}, "duplicada"),
            ({"conformers": [np.zeros((2, 3))]}, "forma"),
            ({"bonds": None, "conformers": None}, "sem ligações"),
            ({"formal_charges": [0, 1]}, "cargas"),
        ],
    )
    def test_validacao(self, kwargs, message):
        data = {
            "id": "bad",
            "atomic_numbers": [6, 6, 8],
            "bonds": [(0, 1, "single")],
            "conformers": [np.zeros((3, 3))],
        }
        data.update(kwargs)
        with pytest.raises(ValidationError, match=message) as info:
            Molecule(**data).validate()
        assert info.value.mol_id == "bad"

    def test_registro_json(self, water):
        record = water.to_record()
        assert record["atoms"] == [8, 1, 1]
        assert record["bonds"] == [[0, 1, "single"], [0, 2, "single"]]
        assert "charges" not in record
        assert "label" not in record


class TestJsonl:
    def test_le_o_que_escreve(self, tmp_path):
        modalities = ["paired", "2d", "3d"]
        mols = [
            testing.random_molecule(
                3 + k % 7,
                seed=k,
                modality=modalities[k % 3],
                n_conformers=1 + k % 2,
                extra_bonds=k % 3,
                label=0.25 * k if k % 4 else None,
                mol_id=f"r{k}",
            )
            for k in range(50)
        ]
        path = tmp_path / "data.jsonl"
        assert write_jsonl(path, mols) == 50
        loaded = parse_jsonl(path)
        assert [m.to_record() for m in loaded] == [m.to_record() for m in mols]
        assert [m.modality for m in loaded] == [m.modality for m in mols]
        assert all(m.bonds == o.bonds for m, o in zip(loaded, mols))

    def test_ligacao_sem_tipo_e_simples(self, tmp_path):
        path = tmp_path / "data.jsonl"
        path.write_text(json.dumps({"id": "y1", "atoms": [6, 8], "bonds": [[0, 1]]}) + "\n")
        [mol] = parse_jsonl(path)
        assert mol.bonds == [Bond(0, 1, BondType.SINGLE)]

    def test_ligacao_sem_tipo_fora_do_intervalo(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps({"id": "y2", "atoms": [6, 8], "bonds": [[0, 5]]}) + "\n")
        with pytest.raises(ValidationError, match="fora do intervalo"):
            parse_jsonl(path)

    def test_ligacao_malformada(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps({"id": "y3", "atoms": [6, 8], "bonds": [[0]]}) + "\n")
        with pytest.raises(ValidationError, match=r"\[y3\] ligação malformada \[0\]"):
            parse_jsonl(path)

    def test_json_invalido_indica_linha(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"id": "a", "atoms": [6], "coords": [[[0, 0, 0]]]}\n\n{"id": "b", atoms}\n')
        with pytest.raises(ParseError) as info:
            parse_jsonl(path)
        assert info.value.line == 3

    def test_registro_invalido_indica_molecula(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps({"id": "x1", "atoms": [6, 8], "bonds": [[0, 2, "single"]]}) + "\n")
        with pytest.raises(ValidationError, match=r"\[x1\]"):
            parse_jsonl(path)

    def test_tipo_de_ligacao_desconhecido(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps({"id": "x2", "atoms": [6, 8], "bonds": [[0, 1, "quadruple"]]}) + "\n")
        with pytest.raises(ParseError):
            parse_jsonl(path)


class TestSdf:
    def test_metano(self, tmp_path):
        path = tmp_path / "methane.sdf"
        path.write_text(testing.METHANE_SDF)
        [mol] = parse_sdf_v2000(path)
        assert mol.id == "methane"
        assert mol.atomic_numbers == [6, 1, 1, 1, 1]
        assert len(mol.bonds) == 4
        assert all(b.i == 0 and b.bond_type is BondType.SINGLE for b in mol.bonds)
        assert mol.conformers[0].shape == (5, 3)
        assert mol.conformers[0][1, 0] == pytest.approx(0.6291)

    def test_varias_moleculas_e_id_padrao(self, tmp_path):
        path = tmp_path / "two.sdf"
        second = testing.METHANE_SDF.replace("methane\n", "\n", 1)
        path.write_text(testing.METHANE_SDF + second)
        mols = parse_sdf_v2000(path)
        assert [m.id for m in mols] == ["methane", "two_1"]

    def test_contagem_inconsistente(self, tmp_path):
        path = tmp_path / "bad.sdf"
        path.write_text(testing.METHANE_SDF.replace("  5  4  0", "  5  3  0"))
        with pytest.raises(ParseError) as info:
            parse_sdf_v2000(path)
        assert info.value.line == 4

    def test_elemento_desconhecido(self, tmp_path):
        path = tmp_path / "bad.sdf"
        lines = testing.METHANE_SDF.splitlines(keepends=True)
        lines[5] = lines[5].replace(" H  ", " Xx ")
        path.write_text("".join(lines))
        with pytest.raises(ParseError, match="Xx"):
            parse_sdf_v2000(path)

    def test_cargas_do_bloco_de_propriedades(self, tmp_path):
        path = tmp_path / "ammonium.sdf"
        path.write_text(molfile(["N   0  0"], [], ["M  CHG  1   1   1", "M  ISO  1   1  15"]))
        [mol] = parse_sdf_v2000(path)
        assert mol.atomic_numbers == [7]
        assert mol.formal_charges == [1]

    def test_m_chg_substitui_coluna_de_carga(self, tmp_path):
        path = tmp_path / "co.sdf"
        path.write_text(molfile(["C   0  5", "O   0  0"], ["  1  2  1  0"], ["M  CHG  1   2  -1"]))
        [mol] = parse_sdf_v2000(path)
        assert mol.formal_charges == [0, -1]
        assert mol.bonds == [Bond(0, 1, BondType.SINGLE)]

    def test_coluna_de_carga_em_branco(self, tmp_path):
        path = tmp_path / "blank.sdf"
        path.write_text(molfile(["O   0   ", "H   0  0"], ["  1  2  1  0"], []))
        [mol] = parse_sdf_v2000(path)
        assert mol.formal_charges == [0, 0]

    def test_m_chg_fora_do_intervalo(self, tmp_path):
        path = tmp_path / "bad.sdf"
        path.write_text(molfile(["N   0  0"], [], ["M  CHG  1   3   1"]))
        with pytest.raises(ParseError, match="átomo 3") as info:
            parse_sdf_v2000(path)
        assert info.value.line == 6


class TestSplit:
    def test_tamanhos(self, paired):
        data = testing.random_dataset(20)
        train, valid, test = random_split(data, (0.8, 0.1, 0.1), seed=3)
        assert (len(train), len(valid), len(test)) == (16, 2, 2)
        ids = [m.id for m in train + valid + test]
        assert sorted(ids) == sorted(m.id for m in data)

    def test_deterministico(self):
        data = testing.random_dataset(10)
        a = random_split(data, seed=5)
        b = random_split(data, seed=5)
        assert [[m.id for m in part] for part in a] == [[m.id for m in part] for part in b]

    @pytest.mark.parametrize("fractions", [(0.5, 0.5, 0.5), (1.0, 0.0, 0.0), (0.5, 0.5)])
    def test_fracoes_invalidas(self, fractions):
        with pytest.raises(ValidationError):
            random_split(testing.random_dataset(4), fractions)


class TestManifest:
    def test_escreve_e_verifica(self, tmp_path, paired):
        path = tmp_path / "data.jsonl"
        write_jsonl(path, paired)
        manifest = write_manifest(path, paired)
        assert manifest_path(path).name == "data.jsonl.manifest.json"
        loaded = read_manifest(path)
        assert loaded == manifest
        assert loaded.modality == Modality.PAIRED
        check_manifest(loaded, paired)

    def test_modalidade_mista(self, tmp_path, paired):
        mixed = paired[:2] + [paired[2].only("2d")]
        manifest = write_manifest(tmp_path / "mixed.jsonl", mixed)
        assert manifest.modality == Modality.MIXED
        with pytest.raises(ValidationError, match="modalidade"):
            check_manifest(manifest, paired[:3])

    def test_contagem_divergente(self, tmp_path, paired):
        manifest = write_manifest(tmp_path / "data.jsonl", paired)
        with pytest.raises(ValidationError, match="registros"):
            check_manifest(manifest, paired[:-1])


class TestCollate:
    def test_formas_e_mascaras(self):
        mols = [testing.random_molecule(3, seed=0), testing.random_molecule(5, seed=1)]
        batch = testing.make_batch(mols)
        assert batch.atoms.shape == (2, 5)
        assert batch.atom_mask.sum(1).tolist() == [3, 5]
        assert batch.spd.shape == (2, 5, 5)
        assert batch.edge_path.shape == (2, 5, 5, 4, 5)
        assert batch.coords.shape == (2, 5, 3)
        assert batch.modality == "paired"
        assert batch.atoms[0, 3:].tolist() == [0, 0]
        assert not batch.pair_mask[0, 1, 4]

    def test_vies_das_chaves(self):
        mols = [testing.random_molecule(2, seed=0), testing.random_molecule(4, seed=1)]
        bias = testing.make_batch(mols).key_bias()
        assert bias[0].tolist() == [0.0, 0.0, BIAS_SENTINEL, BIAS_SENTINEL]
        assert bias.dtype == torch.float64

    def test_modalidades_misturadas(self):
        recs = [
            featurize(testing.random_molecule(3, seed=0)),
            featurize(testing.random_molecule(3, seed=1, modality="2d")),
        ]
        with pytest.raises(ModalityError):
            collate(recs)

    def test_configuracoes_diferentes(self):
        mol = testing.random_molecule(3)
        recs = [featurize(mol, testing.SMALL_FEATURES), featurize(mol)]
        with pytest.raises(ValidationError, match="configurações"):
            collate(recs)

    def test_lote_vazio(self):
        with pytest.raises(ValidationError):
            collate([])
