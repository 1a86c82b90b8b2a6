from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .exceptions import AnonymizeError

logger = logging.getLogger(__name__)

TOKEN_PREFIX = "ENT_"
TOKEN_PATTERN = re.compile(r"(?<!\w)ENT_[0-9a-f]{8}(?!\w)")
UNKNOWN_ENTITY = "[UNKNOWN ENTITY]"
MAX_REHASH = 64
DEFAULT_SALT = "insightdesk"


@dataclass(frozen=True)
class NameVault:
    forward: Mapping[str, str] = field(default_factory=dict)
    reverse: Mapping[str, str] = field(default_factory=dict)
    salt: str = DEFAULT_SALT

    def __len__(self) -> int:
        return len(self.forward)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self.forward)

    def token_for(self, name: str) -> str | None:
        return self.forward.get(name)


def _token(salt: str, name: str, counter: int) -> str:
    digest = hashlib.sha256(f"{salt}:{name}:{counter}".encode("utf-8")).hexdigest()
    return TOKEN_PREFIX + digest[:8]


def register(vault: NameVault, names: Iterable[str]) -> NameVault:
    """Vault extended with tokens for every new name, in the given order."""
    forward = dict(vault.forward)
    reverse = dict(vault.reverse)
    for name in names:
        if not isinstance(name, str) or not name:
            raise AnonymizeError("보호할 이름이 비어 있습니다.", code="empty_name")
        if name in forward:
            continue
        for counter in range(MAX_REHASH):
            token = _token(vault.salt, name, counter)
            if token not in reverse:
                break
        else:
            raise AnonymizeError(
                f"'{name}'의 토큰이 {MAX_REHASH}번 모두 충돌했습니다.", code="token_collision"
            )
        forward[name] = token
        reverse[token] = name
    return NameVault(forward=forward, reverse=reverse, salt=vault.salt)


def name_pattern(names: Iterable[str]) -> re.Pattern[str] | None:
    """Longest-first alternation of literal names bounded by non-word characters."""
    unique = sorted(set(names), key=lambda name: (-len(name), name))
    if not unique:
        return None
    return re.compile(r"(?<!\w)(?:" + "|".join(re.escape(name) for name in unique) + r")(?!\w)")


def encode(text: str, names: Iterable[str], vault: NameVault) -> tuple[str, NameVault]:
    """Replace names with their tokens.

    ``ENT_`` strings already present in the text are registered as literal
    names too, so decode gives them back instead of reporting them as leaks.
    """
    names = list(names)
    literals = sorted(set(TOKEN_PATTERN.findall(text)) - set(names))
    if not names and not literals:
        return text, vault
    vault = register(vault, [*names, *literals])
    pattern = name_pattern([*names, *literals])
    return pattern.sub(lambda match: vault.forward[match.group(0)], text), vault


def decode(text: str, vault: NameVault) -> tuple[str, int]:
    """Restore known tokens; unknown ``ENT_`` tokens become the marker and count as leaks."""
    leaks = 0

    def restore(match: re.Match[str]) -> str:
        nonlocal leaks
        name = vault.reverse.get(match.group(0))
        if name is None:
            leaks += 1
            return UNKNOWN_ENTITY
        return name

    decoded = TOKEN_PATTERN.sub(restore, text)
    if leaks:
        logger.info("decode: %d unknown entity token(s) replaced", leaks)
    return decoded, leaks


def find_names(text: str, names: Iterable[str]) -> list[str]:
    pattern = name_pattern(names)
    return pattern.findall(text) if pattern is not None else []


def vault_payload(vault: NameVault) -> dict:
    return {
        "salt": vault.salt,
        "entries": [{"name": name, "token": token} for name, token in vault.forward.items()],
    }


def save_vault(vault: NameVault, path: str | Path) -> Path:
    target = Path(path)
    target.write_text(json.dumps(vault_payload(vault), ensure_ascii=False, indent=2), encoding="utf-8")
    return target


def load_vault(path: str | Path) -> NameVault:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        salt = str(payload["salt"])
        entries = [(str(item["name"]), str(item["token"])) for item in payload["entries"]]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise AnonymizeError(f"이름 보관소 파일을 읽을 수 없습니다: {path}") from exc
    forward = dict(entries)
    reverse = {token: name for name, token in entries}
    if len(forward) != len(entries) or len(reverse) != len(entries):
        raise AnonymizeError("이름 보관소에 중복 항목이 있습니다.", code="token_collision")
    if not all(TOKEN_PATTERN.fullmatch(token) for token in reverse):
        raise AnonymizeError("이름 보관소의 토큰 형식이 잘못되었습니다.")
    return NameVault(forward=forward, reverse=reverse, salt=salt)
