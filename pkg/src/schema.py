"""
Shared domain types.

Tools, queries and judgments are frozen dataclasses so a loaded dataset can be
shared between workers without copying. Every type that lands on disk has a
`to_dict` / `from_dict` pair matching the JSONL layouts in docs/SPECIFICATIONS.md.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Any, Optional


class FieldId(str, Enum):
    DESCRIPTION = "description"
    PARAMETERS = "parameters"
    RESPONSE = "response"
    EXAMPLES = "examples"


FIELDS = (FieldId.DESCRIPTION, FieldId.PARAMETERS, FieldId.RESPONSE, FieldId.EXAMPLES)
SEMANTIC_FIELDS = (FieldId.DESCRIPTION, FieldId.RESPONSE, FieldId.EXAMPLES)

# Whole-document representations for the full-doc modes: the raw doc text
# (the baseline) and the concatenated standardized fields.
FULL_DOC = "full_doc"
FULL_DOC_STANDARDIZED = "full_doc_standardized"


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RawTool:
    id: str
    source_tag: str
    doc: Any


@dataclass(frozen=True)
class Query:
    id: str
    text: str
    turns: Optional[tuple[tuple[str, str], ...]] = None


@dataclass(frozen=True)
class Qrels:
    entries: tuple[tuple[str, str, int], ...] = ()

    @cached_property
    def _by_query(self) -> dict[str, dict[str, int]]:
        table: dict[str, dict[str, int]] = {}
        for query_id, tool_id, relevance in self.entries:
            table.setdefault(query_id, {})[tool_id] = relevance
        return table

    def relevant(self, query_id: str) -> set[str]:
        return {t for t, rel in self._by_query.get(query_id, {}).items() if rel > 0}

    def judged_queries(self) -> set[str]:
        return set(self._by_query)

    def relevant_pairs(self) -> int:
        return sum(1 for _, _, rel in self.entries if rel > 0)

    def as_dict(self) -> dict[str, set[str]]:
        """query id -> set of relevant tool ids (queries without positives omitted)."""
        return {q: self.relevant(q) for q in self._by_query if self.relevant(q)}


@dataclass(frozen=True)
class Dataset:
    name: str
    tools: tuple[RawTool, ...]
    queries: tuple[Query, ...]
    qrels: Qrels

    @cached_property
    def tools_by_id(self) -> dict[str, RawTool]:
        return {t.id: t for t in self.tools}

    @cached_property
    def queries_by_id(self) -> dict[str, Query]:
        return {q.id: q for q in self.queries}


# ---------------------------------------------------------------------------
# Standardized documentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamSpec:
    name: str
    type_hint: str = "string"
    description: str = ""
    required: bool = True

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "type": self.type_hint,
            "description": self.description,
            "required": self.required,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ParamSpec":
        return cls(
            name=str(data["name"]),
            type_hint=str(data.get("type") or "string"),
            description=str(data.get("description") or ""),
            required=bool(data.get("required", True)),
        )


@dataclass(frozen=True)
class StandardizedTool:
    tool_id: str
    description: str
    parameters: tuple[ParamSpec, ...] = ()
    response: str = ""
    examples: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "tool_id": self.tool_id,
            "description": self.description,
            "parameters": [p.to_dict() for p in self.parameters],
            "response": self.response,
            "examples": list(self.examples),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StandardizedTool":
        return cls(
            tool_id=str(data["tool_id"]),
            description=str(data.get("description") or ""),
            parameters=tuple(ParamSpec.from_dict(p) for p in data.get("parameters") or []),
            response=str(data.get("response") or ""),
            examples=tuple(str(e) for e in data.get("examples") or []),
        )


def render_param(param: ParamSpec) -> str:
    flag = "required" if param.required else "optional"
    return f"{param.name} ({param.type_hint}): {param.description} [{flag}]"


def field_text(tool: StandardizedTool, field_id: FieldId) -> str:
    """Flat text of one field, as indexed by the relevance backends."""
    if field_id == FieldId.DESCRIPTION:
        return tool.description
    if field_id == FieldId.PARAMETERS:
        return "\n".join(render_param(p) for p in tool.parameters)
    if field_id == FieldId.RESPONSE:
        return tool.response
    if field_id == FieldId.EXAMPLES:
        return "\n".join(tool.examples)
    raise ValueError(f"Unknown field: {field_id}")


def concatenated_text(tool: StandardizedTool, skip: frozenset = frozenset()) -> str:
    parts = [field_text(tool, f) for f in FIELDS if f not in skip]
    return "\n".join(p for p in parts if p)


# ---------------------------------------------------------------------------
# Rewritten queries
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToolNeed:
    user_intent: str
    tool_description: str
    expected_response: str

    def projection(self, field_id: FieldId) -> str:
        if field_id == FieldId.DESCRIPTION:
            return self.tool_description
        if field_id == FieldId.RESPONSE:
            return self.expected_response
        if field_id == FieldId.EXAMPLES:
            return self.user_intent
        raise ValueError(f"Tool needs have no projection for field '{field_id}'")

    def to_dict(self) -> dict:
        return {
            "user_intent": self.user_intent,
            "tool_description": self.tool_description,
            "expected_response": self.expected_response,
        }


@dataclass(frozen=True)
class ArgumentSpec:
    role: str
    type_hint: str = "string"

    def to_dict(self) -> dict:
        return {"role": self.role, "type": self.type_hint}


def render_argument(arg: ArgumentSpec) -> str:
    return f"{arg.role} ({arg.type_hint})"


@dataclass(frozen=True)
class RewrittenQuery:
    query_id: str
    tool_needs: tuple[ToolNeed, ...]
    extracted_arguments: tuple[ArgumentSpec, ...] = field(default=())

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "tool_needs": [n.to_dict() for n in self.tool_needs],
            "extracted_arguments": [a.to_dict() for a in self.extracted_arguments],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RewrittenQuery":
        return cls(
            query_id=str(data["query_id"]),
            tool_needs=tuple(
                ToolNeed(
                    user_intent=str(n.get("user_intent") or ""),
                    tool_description=str(n.get("tool_description") or ""),
                    expected_response=str(n.get("expected_response") or ""),
                )
                for n in data.get("tool_needs") or []
            ),
            extracted_arguments=tuple(
                ArgumentSpec(role=str(a["role"]), type_hint=str(a.get("type") or "string"))
                for a in data.get("extracted_arguments") or []
            ),
        )

    def flat_text(self) -> str:
        """All need text in one string; used by the rewrite-only full-doc variant."""
        return "\n".join(
            f"{n.user_intent}\n{n.tool_description}\n{n.expected_response}" for n in self.tool_needs
        )
