"""Statement decomposition into entity-description tables.

A statement is broken into rows, each pairing an entity with the description
the statement attaches to it. Rows must be self-contained: the model is
instructed to resolve pronouns, and a lexical blocklist rejects rows where a
bare pronoun survives. The LLM output contract is a strict JSON array of
two-field objects; parse failures are retried with a corrective prompt.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .data import derive_seed
from .metrics import tokenize
from .prompts import PromptLibrary
from .providers import ChatRequest, Provider

PRONOUNS = frozenset({"he", "she", "it", "they", "this", "these", "those"})

_PARSE_RETRIES = 2
_CORRECTIVE_NOTE = (
    "Your previous reply could not be used. Reply again with only a JSON array "
    'of objects of the form {"entity": "...", "description": "..."}, with both '
    "fields non-empty and no pronouns."
)


class DecompositionError(Exception):
    """The model never produced a valid row table for a statement."""

    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class DegenerateStatementError(DecompositionError):
    """The model returned a well-formed but empty row set."""


@dataclass(frozen=True)
class EntityRow:
    entity: str
    description: str
    row_index: int


@dataclass(frozen=True)
class EntityTable:
    sample_id: str
    statement: str
    rows: tuple[EntityRow, ...]


def strip_code_fences(text: str) -> str:
    text = text.strip()
    if text.startswith("```"):
        lines = text.splitlines()
        if len(lines) >= 2:
            body = lines[1:]
            if body and body[-1].strip().startswith("```"):
                body = body[:-1]
            text = "\n".join(body).strip()
    return text


def _row_violation(entity: str, description: str) -> str | None:
    if not entity.strip() or not description.strip():
        return "empty entity or description"
    for fieldname, value in (("entity", entity), ("description", description)):
        hit = PRONOUNS.intersection(tokenize(value).tokens)
        if hit:
            return f"pronoun {sorted(hit)[0]!r} in {fieldname}"
    return None


def parse_rows(raw: str) -> list[EntityRow]:
    """Parse the strict array-of-objects contract; raises ValueError otherwise."""
    payload = json.loads(strip_code_fences(raw))
    if not isinstance(payload, list):
        raise ValueError("reply is not a JSON array")
    rows: list[EntityRow] = []
    for i, item in enumerate(payload):
        if not isinstance(item, dict) or "entity" not in item or "description" not in item:
            raise ValueError(f"row {i} is not an object with entity and description")
        entity, description = item["entity"], item["description"]
        if not isinstance(entity, str) or not isinstance(description, str):
            raise ValueError(f"row {i} fields must be strings")
        violation = _row_violation(entity, description)
        if violation:
            raise ValueError(f"row {i}: {violation}")
        rows.append(EntityRow(entity=entity.strip(), description=description.strip(), row_index=i))
    return rows


def decompose(
    statement: str,
    question: str,
    provider: Provider,
    templates: PromptLibrary,
    *,
    model: str = "",
    sample_id: str = "",
    seed: int = 0,
    max_output_tokens: int = 1024,
    chat_extra: tuple[tuple[str, object], ...] = (),
    keep_raw_dir: str | Path | None = None,
) -> EntityTable:
    """Decompose a statement into an entity-description table via a chat call."""
    if not statement.strip():
        raise ValueError("statement must be non-empty")
    prompt = templates.render("text2table", statement=statement, question=question)
    messages: list[dict] = [{"role": "user", "content": prompt}]
    raw = ""
    last_error = ""
    for attempt in range(1 + _PARSE_RETRIES):
        req = ChatRequest(
            model=model,
            messages=tuple(messages),
            temperature=0.0,
            seed=derive_seed(seed, "decompose", sample_id, str(attempt)),
            max_output_tokens=max_output_tokens,
            extra=chat_extra,
        )
        raw = provider.chat(req, purpose="decompose")
        if keep_raw_dir is not None:
            _persist_raw(keep_raw_dir, "text2table", raw)
        try:
            rows = parse_rows(raw)
        except (ValueError, json.JSONDecodeError) as exc:
            last_error = str(exc)
            messages = messages + [
                {"role": "assistant", "content": raw},
                {"role": "user", "content": _CORRECTIVE_NOTE},
            ]
            continue
        if not rows:
            raise DegenerateStatementError(
                f"statement decomposed to zero rows: {statement[:80]!r}", raw=raw
            )
        return EntityTable(sample_id=sample_id, statement=statement, rows=tuple(rows))
    raise DecompositionError(
        f"no valid row table after {1 + _PARSE_RETRIES} attempts: {last_error}", raw=raw
    )


def row_sentence(row: EntityRow) -> str:
    """Canonical self-contained rendering of a row, consumed by masking."""
    return f"{row.entity} — {row.description}"


def _persist_raw(directory: str | Path, kind: str, raw: str) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    digest = hashlib.sha256(raw.encode("utf-8")).hexdigest()[:12]
    (directory / f"{kind}-{digest}.txt").write_text(raw, encoding="utf-8")
