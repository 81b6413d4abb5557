import pytest

from flexmol.config import load_config, parse_config, parse_entries
from flexmol.errors import ConfigError


class TestParseConfig:
    def test_exemplo_simples(self):
        assert parse_config("lr = 1e-3  # taxa\nseed=7") == {"lr": "1e-3", "seed": "7"}

    def test_comentarios_e_linhas_em_branco(self):
        src = """
        # cabeçalho

        dim = 16
            # indentado
        dtype = float64   # comentário no fim
        """
        assert parse_config(src) == {"dim": "16", "dtype": "float64"}

    def test_valor_vazio(self):
        assert parse_config("max_steps =\n") == {"max_steps": ""}

    def test_valor_com_espacos(self):
        assert parse_config("nome = dois termos") == {"nome": "dois termos"}

    def test_arquivo_vazio(self):
        assert parse_config("") == {}
        assert parse_config("# só comentário\n") == {}

    def test_numeros_de_linha(self):
        entries = parse_entries("a = 1\n\n# x\nb = 2\n")
        assert [(e.key, e.line) for e in entries] == [("a", 1), ("b", 4)]


class TestErros:
    def test_chave_repetida(self):
        with pytest.raises(ConfigError) as info:
            parse_config("lr = 1\nseed = 2\nlr = 3\n")
        assert info.value.key == "lr"
        assert info.value.line == 3
        assert "linha 1" in str(info.value)

    def test_linha_sem_igual(self):
        with pytest.raises(ConfigError) as info:
            parse_config("lr = 1\nsomente texto\n")
        assert info.value.line == 2

    def test_linha_comecando_com_igual(self):
        with pytest.raises(ConfigError):
            parse_config("= 3\n")

    def test_arquivo_ausente(self, tmp_path):
        with pytest.raises(ConfigError, match="não encontrado"):
            load_config(tmp_path / "missing.cfg")

    def test_arquivo(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("batch_size = 4\nw_cl = 0.5\n", encoding="utf-8")
        assert load_config(path) == {"batch_size": "4", "w_cl": "0.5"}
