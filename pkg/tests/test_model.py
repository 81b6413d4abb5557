import math

import pytest
import torch

from flexmol import testing
from flexmol.errors import FeaturizeError, ModelError
from flexmol.gradcheck import tiny_config
from flexmol.model import (
    FlexMol,
    GaussianBasis,
    ModelConfig,
    PairBiasedAttention,
    mask_pair,
)
from flexmol.molio import BIAS_SENTINEL


@pytest.fixture
def batch():
    mols = [testing.random_molecule(3, seed=2), testing.random_molecule(5, seed=3, extra_bonds=1)]
    return testing.make_batch(mols)


class TestConfig:
    def test_dim_divisivel_por_cabecas(self):
        with pytest.raises(ModelError):
            ModelConfig(dim=10, num_heads=3)

    def test_padroes(self):
        cfg = ModelConfig()
        assert (cfg.dim, cfg.num_kernels, cfg.num_layers, cfg.num_mm_layers) == (512, 128, 4, 4)
        assert cfg.num_spd_classes == 102
        assert cfg.vocab_size == 502

    def test_dicionario(self):
        cfg = tiny_config()
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg
        assert cfg.feature_config() == testing.SMALL_FEATURES


class TestGaussian:
    def test_valor_no_centro(self):
        basis = GaussianBasis(num_kernels=1, num_pair_classes=5).double()
        dist = torch.zeros(1, 1, 1, dtype=torch.float64)
        value = basis(dist, torch.zeros(1, 1, 1, dtype=torch.long))
        assert float(value) == pytest.approx(1 / math.sqrt(2 * math.pi))
        assert float(value) == pytest.approx(0.39894, abs=1e-5)

    def test_afinidade_por_classe(self):
        basis = GaussianBasis(num_kernels=4, num_pair_classes=5).double()
        with torch.no_grad():
            basis.beta.weight[2] = 1.0
        dist = torch.full((1, 1, 2), 2.0, dtype=torch.float64)
        classes = torch.tensor([[[0, 2]]])
        shifted = basis(torch.full((1, 1, 2), 3.0, dtype=torch.float64), classes)
        out = basis(dist, classes)
        assert torch.allclose(out[0, 0, 1], shifted[0, 0, 0])


class TestAtencao:
    def test_pesos_somam_um_e_ignoram_preenchimento(self):
        torch.manual_seed(0)
        attention = PairBiasedAttention(8, 2).double()
        x = torch.randn(1, 4, 8, dtype=torch.float64)
        mask = torch.tensor([[True, True, True, False]])
        pair = mask_pair(torch.zeros(1, 4, 4, 2, dtype=torch.float64), mask[:, :, None] & mask[:, None, :])
        weights = attention.attention_weights(x, pair)
        assert torch.allclose(weights[0, :3].sum(1), torch.ones(3, 2, dtype=torch.float64))
        assert torch.all(weights[0, :3, 3] < 1e-12)

    def test_logits_por_cabeca(self):
        attention = PairBiasedAttention(8, 2)
        out, logits = attention(torch.randn(2, 3, 8), torch.zeros(2, 3, 3, 2))
        assert out.shape == (2, 3, 8)
        assert logits.shape == (2, 3, 3, 2)

    def test_mask_pair(self):
        mask = torch.tensor([[True, False]])
        pair = mask_pair(torch.ones(1, 2, 2, 1), mask[:, :, None] & mask[:, None, :])
        assert pair[0, :, :, 0].tolist() == [[1.0, BIAS_SENTINEL], [BIAS_SENTINEL, BIAS_SENTINEL]]


class TestForward:
    def test_pareado(self, model, batch):
        state = model(batch)
        testing.assert_state_finite(state)
        assert state.modality == "paired"
        assert state.atom_logits.shape == (2, 5, 502)
        assert state.coords_hat.shape == (2, 5, 3)
        assert state.spd_logits.shape == (2, 5, 5, 10)
        assert state.P_L.shape == state.Q_L.shape == (2, 5, 5, 2)
        assert state.final_stream.shape == (2, 5, 8)

    def test_apenas_2d(self, model):
        batch = testing.make_batch([testing.random_molecule(4, seed=1, modality="2d")])
        state = model(batch)
        assert state.modality == "2d"
        assert state.coords_hat is None
        assert state.y_hat.shape == state.x_F.shape
        assert state.spd_logits.shape == (1, 4, 4, 10)

    def test_apenas_3d(self, model):
        batch = testing.make_batch([testing.random_molecule(4, seed=1, modality="3d")])
        state = model(batch)
        assert state.modality == "3d"
        assert state.spd_logits is None
        assert state.x_hat.shape == state.y_F.shape
        assert state.coords_hat.shape == (1, 4, 3)

    def test_sem_decodificador(self, model):
        batch = testing.make_batch([testing.random_molecule(4, seed=1, modality="2d")])
        state = model(batch, use_decoder=False)
        assert state.y_hat is None
        assert torch.allclose(state.fused, state.x_F + state.y_tilde)

    def test_sem_codificador_multimodal(self, batch):
        model = testing.tiny_model(use_mm_encoder=False)
        assert model.mm_encoder is None
        state = model(batch)
        assert torch.equal(state.x_L, state.x_hat)
        assert torch.equal(state.Q_L, state.Q_hat)

    def test_pareado_sem_decodificadores(self, batch):
        model = testing.tiny_model(use_mm_encoder=False)
        state = model(batch, use_decoder=False)
        assert state.x_hat is None and state.y_hat is None
        assert torch.equal(state.x_L, state.x_F)
        assert torch.equal(state.Q_L, state.Q_F)
        assert state.spd_logits.shape == (2, 5, 5, 10)

    def test_pareado_sem_decodificadores_ignora_seus_pesos(self, model, batch):
        before = model(batch, use_decoder=False)
        with torch.no_grad():
            for param in model.decoder.parameters():
                param.add_(0.5)
        after = model(batch, use_decoder=False)
        assert torch.equal(after.atom_logits, before.atom_logits)

    @pytest.mark.parametrize("modality", ["2d", "3d"])
    def test_sem_fusao_da_modalidade_ausente(self, model, modality):
        batch = testing.make_batch([testing.random_molecule(4, seed=1, modality=modality)])
        state = model(batch, fuse_missing=False)
        assert state.x_hat is None and state.y_hat is None
        own = state.x_F if modality == "2d" else state.y_F
        assert torch.equal(state.fused, own)
        with torch.no_grad():
            for param in model.feature_learners.parameters():
                param.add_(0.5)
        assert torch.equal(model(batch, fuse_missing=False).atom_logits, state.atom_logits)

    def test_representacao(self, model, batch):
        assert model.representation(batch).shape == (2, 8)

    def test_codificacao_de_arestas_sem_caminho(self, model):
        mol = testing.random_molecule(4, seed=0, connected=False, modality="2d")
        batch = testing.make_batch([mol])
        enc = model.edge_encoding(batch.edge_path, batch.path_len)
        assert float(enc[0, 0, 3]) == 0.0

    def test_preenchimento_nao_altera_saida(self, model):
        small = testing.random_molecule(3, seed=4)
        big = testing.random_molecule(6, seed=5)
        alone = model(testing.make_batch([small]))
        together = model(testing.make_batch([small, big]))
        testing.assert_close(together.atom_logits[0, :3], alone.atom_logits[0], atol=1e-9)
        testing.assert_close(together.coords_hat[0, :3], alone.coords_hat[0], atol=1e-9)
        testing.assert_close(together.spd_logits[0, :3, :3], alone.spd_logits[0], atol=1e-9)


class TestErros:
    def test_indice_fora_do_vocabulario(self, model):
        with pytest.raises(FeaturizeError):
            model.embed(torch.tensor([[502]]))
        with pytest.raises(FeaturizeError):
            model.embed_atoms(torch.tensor([[0]]))

    def test_embed_atoms(self, model):
        z = torch.tensor([[6, 8]])
        expected = model.embed(torch.tensor([[28, 38]]))
        assert torch.equal(model.embed_atoms(z), expected)

    def test_ativacao_nao_finita(self, model, batch):
        with torch.no_grad():
            model.encoder.experts["2d"][0].ffn[0].weight.fill_(float("nan"))
        with pytest.raises(ModelError) as info:
            model(batch)
        assert info.value.layer == "encoder[2d].0"

    def test_memoria_incompativel(self, model, batch):
        state = model(batch)
        with pytest.raises(ModelError):
            model.decoder(state.x_F, state.P, state.y_F[:1], state.Q, "3d_to_2d", batch.pair_mask, batch.key_bias())


class TestCompartilhamento:
    def test_atencao_compartilhada(self, model):
        counts = model.parameter_counts()
        attention = sum(p.numel() for p in model.encoder.attention.parameters())
        attention += sum(p.numel() for p in model.decoder.attention.parameters())
        assert counts["shared_attention"] == attention
        assert counts["total"] == counts["trainable"]
        assert len(model.encoder.attention) == model.config.num_layers

    def test_gradiente_2d_e_3d_chegam_na_mesma_atencao(self, model):
        weight = model.encoder.attention[0].q_proj.weight
        for modality, stream in (("2d", "x_F"), ("3d", "y_F")):
            model.zero_grad()
            batch = testing.make_batch([testing.random_molecule(4, seed=1, modality=modality)])
            getattr(model(batch), stream).sum().backward()
            assert weight.grad is not None and weight.grad.abs().sum() > 0

    def test_especialistas_separados(self, model):
        batch = testing.make_batch([testing.random_molecule(4, seed=1, modality="2d")])
        model.zero_grad()
        model(batch).x_F.sum().backward()
        assert model.encoder.experts["3d"][0].ffn[0].weight.grad is None
        assert model.encoder.experts["2d"][0].ffn[0].weight.grad is not None

    def test_modelo_padrao(self):
        model = FlexMol(ModelConfig(dim=16, num_kernels=4, num_heads=2, num_layers=1, num_mm_layers=1))
        assert model.atom_table.num_embeddings == 502
