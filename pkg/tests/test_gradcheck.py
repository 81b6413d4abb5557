import pytest

from flexmol.gradcheck import FLOOR, relative_error, run_gradcheck, tiny_config, toy_molecule
from flexmol.losses import LossWeights


def test_erro_relativo():
    assert relative_error(2.0, 2.0) == 0.0
    assert relative_error(1.0, 1.1) == pytest.approx(0.1 / 1.1)
    assert relative_error(0.0, FLOOR / 10) == pytest.approx(0.1)


def test_molecula_de_brinquedo():
    mol = toy_molecule(4, seed=3)
    assert mol.n_atoms == 4
    assert len(mol.bonds) == 3
    assert mol.has_2d and mol.has_3d
    assert all(z > 1 for z in mol.atomic_numbers)


@pytest.mark.timeout(600)
def test_gradientes_do_stage1():
    report = run_gradcheck()
    assert report.passed, report.to_dict()
    assert report.max_rel_error < 1e-4
    assert report.checked > 0
    assert {"encoder", "decoder", "feature_learners", "position_head", "spd_head"} <= set(report.groups)


@pytest.mark.timeout(600)
def test_sem_codificador_multimodal_e_pesos_diferentes():
    weights = LossWeights(w_cl=0.5, w_ra=2.0, w_c=1.0, w_atom=1.0, w_pos=3.0, w_spd=0.5, temperature=0.5)
    report = run_gradcheck(n_atoms=4, seed=1, config=tiny_config(use_mm_encoder=False), weights=weights)
    assert report.passed, report.to_dict()
    assert "mm_encoder" not in report.groups
