"""
Leitura de arquivos de configuração "chave = valor".

A gramática está em `config.lark`. O transformador produz uma lista de
entradas com o número da linha de cada uma, usado nas mensagens de erro.
"""

from pathlib import Path
from typing import NamedTuple

from lark import Lark, Transformer, v_args
from lark.exceptions import UnexpectedInput

from .errors import ConfigError

DIR = Path(__file__).parent
GRAMMAR_PATH = DIR / "config.lark"


class Entry(NamedTuple):
    key: str
    value: str
    line: int


@v_args(inline=True)
class ConfigTransformer(Transformer):
    def start(self, *entries: Entry) -> list[Entry]:
        return list(entries)

    def entry(self, key, value=None) -> Entry:
        text = str(value).strip() if value is not None else ""
        return Entry(str(key), text, key.line)


config_parser = Lark(
    GRAMMAR_PATH.read_text(encoding="utf-8"),
    parser="lalr",
    transformer=ConfigTransformer(),
)


def parse_entries(src: str) -> list[Entry]:
    if not src.endswith("\n"):
        src += "\n"
    try:
        return config_parser.parse(src)
    except UnexpectedInput as e:
        raise ConfigError(f"linha de configuração inválida (coluna {e.column})", line=e.line) from e


def parse_config(src: str) -> dict[str, str]:
    """
    Converte o texto de um arquivo de configuração em um dicionário.

    Ex.:
        >>> parse_config("lr = 1e-3  # taxa\\nseed=7")
        {'lr': '1e-3', 'seed': '7'}
    """
    result: dict[str, str] = {}
    lines: dict[str, int] = {}
    for key, value, line in parse_entries(src):
        if key in result:
            raise ConfigError(f"chave '{key}' repetida (definida na linha {lines[key]})", key=key, line=line)
        result[key] = value
        lines[key] = line
    return result


def load_config(path: str | Path) -> dict[str, str]:
    path = Path(path)
    try:
        src = path.read_text(encoding="utf-8")
    except FileNotFoundError as e:
        raise ConfigError(f"arquivo de configuração não encontrado: {path}") from e
    return parse_config(src)
