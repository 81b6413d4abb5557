"""
Configuração em camadas: padrões dos dataclasses, arquivo `--config` e flags
da linha de comando.

Cada camada é um escopo com um pai, e a busca de uma chave começa pelo escopo
mais interno. Os valores textuais são convertidos segundo a anotação do campo
do dataclass que os consome.
"""

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from typing import Any, Iterator, Optional

from .errors import ConfigError

ScopeDict = dict[str, Any]
TRUE = {"true", "yes", "on", "1"}
FALSE = {"false", "no", "off", "0"}
NONE = {"none", "null", ""}


@dataclass
class Settings:
    """
    Escopo de configuração com fallback para o escopo pai.
    """

    scope: ScopeDict = field(default_factory=dict)
    parent: Optional["Settings"] = None
    name: str = "defaults"

    @classmethod
    def from_defaults(cls, *classes: type) -> "Settings":
        """
        Escopo raiz com os valores padrão dos campos dos dataclasses.
        """
        scope: ScopeDict = {}
        for klass in classes:
            for f in dataclasses.fields(klass):
                default = _default(f)
                if dataclasses.is_dataclass(default):
                    for key, value in dataclasses.asdict(default).items():
                        scope.setdefault(key, value)
                elif default is not dataclasses.MISSING:
                    scope.setdefault(f.name, default)
        return cls(scope)

    def __getitem__(self, key: str) -> Any:
        if key in self.scope:
            return self.scope[key]
        elif self.parent is not None:
            return self.parent[key]
        raise KeyError(f"Configuração '{key}' não encontrada.")

    def __contains__(self, key: str) -> bool:
        return key in self.scope or (self.parent is not None and key in self.parent)

    def get(self, key: str, default: Any = None) -> Any:
        return self[key] if key in self else default

    def push(self, scope: ScopeDict, name: str) -> "Settings":
        """
        Adiciona `scope` como escopo mais interno. Valores None são
        descartados, para que flags ausentes não escondam o arquivo.
        """
        return Settings({k: v for k, v in scope.items() if v is not None}, self, name)

    def iter_scopes(self) -> Iterator["Settings"]:
        yield self
        if self.parent is not None:
            yield from self.parent.iter_scopes()

    def source(self, key: str) -> str:
        """
        Nome da camada que define `key`.
        """
        for settings in self.iter_scopes():
            if key in settings.scope:
                return settings.name
        raise KeyError(f"Configuração '{key}' não encontrada.")

    def overrides(self, key: str) -> bool:
        """
        Se `key` foi definida acima do escopo raiz.
        """
        return any(key in s.scope for s in self.iter_scopes() if s.parent is not None)

    def to_dict(self) -> ScopeDict:
        if self.parent is None:
            return self.scope.copy()
        return {**self.parent.to_dict(), **self.scope}

    def check_known(self, *classes: type) -> None:
        """
        Falha se alguma chave não pertence a nenhum dos dataclasses.
        """
        known = set()
        for klass in classes:
            known.update(field_names(klass))
        for settings in self.iter_scopes():
            unknown = sorted(set(settings.scope) - known)
            if unknown:
                msg = f"chaves desconhecidas em {settings.name}: {', '.join(unknown)}"
                raise ConfigError(msg, key=unknown[0])

    def build(self, klass: type):
        """
        Instancia `klass` com os valores das camadas acima da raiz, convertidos
        segundo as anotações dos campos. Os demais campos mantêm o padrão do
        próprio `klass`, já que classes diferentes podem ter padrões
        diferentes para a mesma chave (ex.: lr).
        """
        hints = typing.get_type_hints(klass)
        kwargs = {}
        for f in dataclasses.fields(klass):
            hint = hints[f.name]
            if dataclasses.is_dataclass(hint):
                kwargs[f.name] = self.build(hint)
            elif self.overrides(f.name):
                kwargs[f.name] = coerce(self[f.name], hint, f.name)
        return klass(**kwargs)


def field_names(klass: type) -> set[str]:
    hints = typing.get_type_hints(klass)
    names = set()
    for f in dataclasses.fields(klass):
        if dataclasses.is_dataclass(hints[f.name]):
            names.update(field_names(hints[f.name]))
        else:
            names.add(f.name)
    return names


def _default(f: dataclasses.Field) -> Any:
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return dataclasses.MISSING


def coerce(value: Any, hint: Any, key: str = "") -> Any:
    """
    Converte `value` para o tipo anotado. Apenas strings são convertidas;
    outros valores são verificados.

    Ex.: coerce("1e-3", float) -> 0.001; coerce("none", int | None) -> None
    """
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if isinstance(value, str) and value.strip().lower() in NONE or value is None:
            return None
        return coerce(value, args[0], key)

    if hint is bool:
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in TRUE:
            return True
        if text in FALSE:
            return False
        raise ConfigError(f"valor booleano inválido para {key}: {value!r}", key=key)

    if hint in (int, float):
        if isinstance(value, bool):
            raise ConfigError(f"valor numérico inválido para {key}: {value!r}", key=key)
        try:
            return hint(value) if hint is float or not isinstance(value, str) else int(value.strip())
        except (TypeError, ValueError) as e:
            raise ConfigError(f"valor {hint.__name__} inválido para {key}: {value!r}", key=key) from e

    if hint is str:
        return str(value)
    raise ConfigError(f"tipo de configuração não suportado para {key}: {hint}", key=key)
