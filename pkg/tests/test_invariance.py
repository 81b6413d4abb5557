"""
Simetrias do modelo: movimentos rígidos, permutação de átomos, neutralidade
do preenchimento e o isolamento entre os blocos compartilhados e os
específicos de cada modalidade.
"""

import numpy as np
import pytest
import torch

from flexmol import testing
from flexmol.losses import LossWeights
from flexmol.pretrain import TrainConfig, apply_corruption, stage1_terms

NO_NOISE = TrainConfig(dtype="float64", coord_noise=0.0)
TRIALS = range(100)


@pytest.fixture
def molecules():
    return [testing.random_molecule(5, seed=11), testing.random_molecule(4, seed=12)]


def trial_molecules(seed: int):
    rng = np.random.default_rng([seed, 5])
    sizes = rng.integers(3, 9, size=2)
    return [testing.random_molecule(int(n), seed=1000 * seed + k) for k, n in enumerate(sizes)]


def forward(model, molecules):
    model.eval()
    with torch.no_grad():
        return model(testing.make_batch(molecules))


def stage1_losses(model, molecules, seed=0) -> dict[str, float]:
    batch = testing.make_batch(molecules)
    corrupted, plan = apply_corruption(batch, NO_NOISE, np.random.default_rng(seed))
    model.eval()
    with torch.no_grad():
        terms = stage1_terms(model(corrupted), corrupted, plan, LossWeights())
    return {k: float(v) for k, v in terms.items()}


class TestMovimentoRigido:
    @pytest.mark.parametrize("seed", TRIALS)
    def test_entradas_3d_invariantes(self, model, seed):
        molecules = trial_molecules(seed)
        rotation, translation = testing.random_rigid_motion(seed)
        moved = [testing.moved_molecule(m, rotation, translation) for m in molecules]
        a, b = forward(model, molecules), forward(model, moved)
        testing.assert_close(b.y, a.y, atol=1e-9)
        testing.assert_close(b.Q, a.Q, atol=1e-9)
        testing.assert_close(b.y_F, a.y_F, atol=1e-9)
        testing.assert_close(b.atom_logits, a.atom_logits, atol=1e-9)

    @pytest.mark.parametrize("seed", TRIALS)
    def test_posicoes_equivariantes(self, model, seed):
        molecules = trial_molecules(seed)
        rotation, translation = testing.random_rigid_motion(seed)
        moved = [testing.moved_molecule(m, rotation, translation) for m in molecules]
        a, b = forward(model, molecules), forward(model, moved)
        mask = testing.make_batch(molecules).atom_mask
        R = torch.as_tensor(rotation)
        t = torch.as_tensor(translation)
        expected = a.coords_hat @ R.T + t
        testing.assert_close(b.coords_hat[mask], expected[mask], atol=1e-9)

    @pytest.mark.parametrize("seed", TRIALS)
    def test_cabeca_de_posicoes(self, model, seed):
        torch.manual_seed(seed)
        pair = torch.randn(1, 4, 4, 2, dtype=torch.float64)
        coords = torch.randn(1, 4, 3, dtype=torch.float64)
        mask = torch.ones(1, 4, dtype=torch.bool)
        rotation, translation = testing.random_rigid_motion(seed + 7)
        R, t = torch.as_tensor(rotation), torch.as_tensor(translation)
        with torch.no_grad():
            out = model.position_head(pair, coords, mask)
            moved = model.position_head(pair, coords @ R.T + t, mask)
        testing.assert_close(moved, out @ R.T + t, atol=1e-10)

    @pytest.mark.parametrize("seed", TRIALS)
    def test_perdas_do_stage1_invariantes(self, model, seed):
        molecules = trial_molecules(seed)
        rotation, translation = testing.random_rigid_motion(seed + 20)
        moved = [testing.moved_molecule(m, rotation, translation) for m in molecules]
        a = stage1_losses(model, molecules, seed)
        b = stage1_losses(model, moved, seed)
        assert a.keys() == b.keys()
        for name in a:
            assert b[name] == pytest.approx(a[name], rel=1e-7, abs=1e-9), name


class TestPermutacao:
    @pytest.mark.parametrize("seed", TRIALS)
    def test_saidas_equivariantes(self, model, seed):
        rng = np.random.default_rng([seed, 6])
        n = int(rng.integers(3, 9))
        mol = testing.random_molecule(n, seed=seed + 21)
        perm = [int(k) for k in rng.permutation(n)]
        a = forward(model, [mol])
        b = forward(model, [testing.permuted_molecule(mol, perm)])
        p = torch.tensor(perm)
        testing.assert_close(b.atom_logits[0], a.atom_logits[0][p], atol=1e-9)
        testing.assert_close(b.coords_hat[0], a.coords_hat[0][p], atol=1e-9)
        testing.assert_close(b.spd_logits[0], a.spd_logits[0][p][:, p], atol=1e-9)
        testing.assert_close(b.P_L[0], a.P_L[0][p][:, p], atol=1e-9)

    def test_representacao_invariante(self, model):
        mol = testing.random_molecule(5, seed=22)
        perm = [4, 2, 0, 3, 1]
        model.eval()
        with torch.no_grad():
            a = model.representation(testing.make_batch([mol]))
            b = model.representation(testing.make_batch([testing.permuted_molecule(mol, perm)]))
        testing.assert_close(b, a, atol=1e-9)


class TestPreenchimento:
    @pytest.mark.parametrize("seed", TRIALS)
    def test_vizinho_maior_nao_altera_saida(self, model, seed):
        rng = np.random.default_rng([seed, 7])
        n = int(rng.integers(3, 7))
        small = testing.random_molecule(n, seed=seed + 40)
        big = testing.random_molecule(n + int(rng.integers(1, 5)), seed=seed + 41)
        alone = forward(model, [small])
        together = forward(model, [small, big])
        testing.assert_close(together.atom_logits[0, :n], alone.atom_logits[0], atol=1e-9)
        testing.assert_close(together.coords_hat[0, :n], alone.coords_hat[0], atol=1e-9)
        testing.assert_close(together.spd_logits[0, :n, :n], alone.spd_logits[0], atol=1e-9)
        testing.assert_close(together.x_F[0, :n], alone.x_F[0], atol=1e-9)
        testing.assert_close(together.y_F[0, :n], alone.y_F[0], atol=1e-9)


class TestIsolamento:
    def perturb(self, module):
        with torch.no_grad():
            for param in module.parameters():
                param.add_(0.5)

    def test_atencao_compartilhada_afeta_as_duas_modalidades(self, model, molecules):
        before = forward(model, molecules)
        self.perturb(model.encoder.attention[0])
        after = forward(model, molecules)
        assert not torch.allclose(after.x_F, before.x_F)
        assert not torch.allclose(after.y_F, before.y_F)

    def test_especialista_afeta_so_sua_modalidade(self, model, molecules):
        before = forward(model, molecules)
        self.perturb(model.encoder.experts["2d"])
        after = forward(model, molecules)
        assert not torch.allclose(after.x_F, before.x_F)
        assert torch.equal(after.y_F, before.y_F)

    def test_atencao_cruzada_por_direcao(self, model, molecules):
        before = forward(model, molecules)
        self.perturb(model.decoder.directions["2d_to_3d"][0].cross)
        after = forward(model, molecules)
        assert not torch.allclose(after.y_hat, before.y_hat)
        assert torch.equal(after.x_hat, before.x_hat)
        assert torch.equal(after.x_F, before.x_F)
