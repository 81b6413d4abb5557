import pytest

from flexmol.confeval import EvalConfig
from flexmol.errors import ConfigError
from flexmol.finetune import FinetuneConfig
from flexmol.losses import LossWeights
from flexmol.pretrain import TrainConfig
from flexmol.settings import Settings, coerce, field_names


@pytest.fixture
def layered():
    settings = Settings.from_defaults(TrainConfig, EvalConfig)
    settings = settings.push({"lr": "1e-3", "w_cl": "0.5", "delta": "1.25"}, "arquivo")
    return settings.push({"lr": "2e-3", "seed": None}, "flags")


class TestEscopos:
    def test_padroes_achatados(self):
        settings = Settings.from_defaults(TrainConfig)
        assert settings["lr"] == 3e-5
        assert settings["w_spd"] == 1.0
        assert settings["temperature"] == 1.0
        assert "weights" not in settings

    def test_camada_mais_interna_vence(self, layered):
        assert layered["lr"] == "2e-3"
        assert layered["w_cl"] == "0.5"
        assert layered["batch_size"] == 16

    def test_fonte(self, layered):
        assert layered.source("lr") == "flags"
        assert layered.source("delta") == "arquivo"
        assert layered.source("mask_ratio") == "defaults"
        with pytest.raises(KeyError):
            layered.source("nada")

    def test_none_nao_esconde_camada_anterior(self, layered):
        assert layered.source("seed") == "defaults"

    def test_chave_ausente(self, layered):
        with pytest.raises(KeyError):
            layered["nada"]
        assert layered.get("nada", 3) == 3
        assert "nada" not in layered

    def test_dicionario(self, layered):
        data = layered.to_dict()
        assert data["lr"] == "2e-3"
        assert data["delta"] == "1.25"
        assert [s.name for s in layered.iter_scopes()] == ["flags", "arquivo", "defaults"]

    def test_primeira_classe_define_padrao_compartilhado(self):
        assert Settings.from_defaults(TrainConfig, FinetuneConfig)["lr"] == 3e-5
        assert Settings.from_defaults(FinetuneConfig, TrainConfig)["lr"] == 1e-4


class TestBuild:
    def test_converte_tipos(self, layered):
        cfg = layered.build(TrainConfig)
        assert cfg.lr == 2e-3
        assert cfg.batch_size == 16
        assert cfg.weights == LossWeights(w_cl=0.5)
        assert layered.build(EvalConfig) == EvalConfig(delta=1.25)

    def test_padroes_de_cada_classe(self):
        settings = Settings.from_defaults(TrainConfig, FinetuneConfig).push({"seed": "3"}, "flags")
        assert settings.build(TrainConfig).lr == 3e-5
        assert settings.build(FinetuneConfig).lr == 1e-4
        assert settings.build(FinetuneConfig).seed == settings.build(TrainConfig).seed == 3

    def test_opcional(self):
        settings = Settings.from_defaults(TrainConfig).push({"max_steps": "none"}, "arquivo")
        assert settings.build(TrainConfig).max_steps is None
        assert settings.push({"max_steps": "40"}, "flags").build(TrainConfig).max_steps == 40

    def test_validacao_do_dataclass(self):
        settings = Settings.from_defaults(TrainConfig).push({"mask_ratio": "1.5"}, "flags")
        with pytest.raises(ConfigError) as info:
            settings.build(TrainConfig)
        assert info.value.key == "mask_ratio"

    def test_chave_desconhecida(self, layered):
        layered = layered.push({"learning_rate": "1"}, "flags")
        with pytest.raises(ConfigError) as info:
            layered.check_known(TrainConfig, EvalConfig)
        assert info.value.key == "learning_rate"
        layered.parent.check_known(TrainConfig, EvalConfig)

    def test_nomes_de_campos(self):
        names = field_names(TrainConfig)
        assert {"lr", "w_cl", "temperature"} <= names
        assert "weights" not in names


class TestCoerce:
    @pytest.mark.parametrize("text", ["true", "Yes", "ON", "1"])
    def test_verdadeiro(self, text):
        assert coerce(text, bool) is True

    @pytest.mark.parametrize("text", ["false", "no", "Off", "0"])
    def test_falso(self, text):
        assert coerce(text, bool) is False

    def test_numeros(self):
        assert coerce("1e-3", float) == 0.001
        assert coerce(" 12 ", int) == 12
        assert coerce(3, float) == 3.0
        assert coerce("none", int | None) is None
        assert coerce("5", int | None) == 5
        assert coerce(7, str) == "7"

    @pytest.mark.parametrize(
        "value, hint",
        [("talvez", bool), ("1.5", int), ("abc", float), (True, int), (False, float)],
    )
    def test_invalidos(self, value, hint):
        with pytest.raises(ConfigError) as info:
            coerce(value, hint, "campo")
        assert info.value.key == "campo"

    def test_tipo_nao_suportado(self):
        with pytest.raises(ConfigError):
            coerce("[1]", list, "x")
