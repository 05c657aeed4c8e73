"""
Tool documentation standardization.

Raw documentation of any shape is mapped onto four fields (description,
parameters, response, examples) either by a chat model or, offline, by the
rule-based extractor `mock_standardize`.
"""

import hashlib
import json
import logging
import re
from pathlib import Path
from typing import Any, Optional

from errors import SchemaValidationError, StandardizationError
from schema import ParamSpec, RawTool, StandardizedTool
from services.llm_service import ChatProvider, LlmRequest, ResponseCache, gather_bounded

logger = logging.getLogger("Toolsift.Standardizer")

PROMPT_DIR = Path(__file__).resolve().parent.parent / "prompts"
TEMPLATE_VERSION = "standardize_v1"

DESCRIPTION_KEYS = ("description", "desc", "tool_description", "api_description", "summary")
PARAMETER_KEYS = ("parameters", "api_arguments", "arguments", "params", "inputs", "input_parameters")
RESPONSE_KEYS = ("response", "returns", "return", "output", "outputs", "responses", "response_description")
EXAMPLE_KEYS = ("examples", "example", "example_code", "usage")
NAME_KEYS = ("name", "tool_name", "api_name", "function_name")


def load_template(version: str) -> tuple[str, str]:
    """Returns (system message, user template) of a versioned prompt file."""
    text = (PROMPT_DIR / f"{version}.txt").read_text(encoding="utf-8")
    system, _, user = text.partition("\n---\n")
    return system.strip(), user


def template_fingerprint(version: str) -> str:
    text = (PROMPT_DIR / f"{version}.txt").read_text(encoding="utf-8")
    return f"{version}:{hashlib.sha256(text.encode('utf-8')).hexdigest()[:16]}"


def doc_text(doc: Any) -> str:
    """Canonical text of a raw doc: strings as-is, structured docs as sorted JSON."""
    if isinstance(doc, str):
        return doc
    return json.dumps(doc, sort_keys=True, ensure_ascii=False)


def raw_doc_text(doc: Any) -> str:
    """Flat, readable text of a raw doc for the full-doc baseline."""
    if isinstance(doc, str):
        return doc
    if isinstance(doc, dict):
        return "\n".join(f"{k}: {raw_doc_text(v)}" for k, v in doc.items())
    if isinstance(doc, list):
        return "\n".join(raw_doc_text(v) for v in doc)
    return "" if doc is None else str(doc)


def tool_name(raw: RawTool) -> str:
    doc = _as_mapping(raw.doc)
    if doc:
        for key in NAME_KEYS:
            if isinstance(doc.get(key), str) and doc[key].strip():
                return doc[key].strip()
    return raw.id


# ---------------------------------------------------------------------------
# Rule-based extraction
# ---------------------------------------------------------------------------

def _as_mapping(doc: Any) -> Optional[dict]:
    if isinstance(doc, dict):
        return doc
    if isinstance(doc, str):
        try:
            parsed = json.loads(doc)
        except json.JSONDecodeError:
            return None
        return parsed if isinstance(parsed, dict) else None
    return None


def _first(doc: dict, keys: tuple) -> Any:
    for key in keys:
        value = doc.get(key)
        if value not in (None, "", [], {}):
            return value
    return None


def _flag_required(spec: dict, default: bool = True) -> bool:
    if spec.get("optional") is True:
        return False
    if spec.get("required") is False:
        return False
    if spec.get("required") is True or spec.get("optional") is False:
        return True
    return default


def _param_from(name: str, spec: Any, default_required: bool = True) -> ParamSpec:
    if isinstance(spec, dict):
        return ParamSpec(
            name=name,
            type_hint=str(spec.get("type") or "string"),
            description=str(spec.get("description") or spec.get("desc") or ""),
            required=_flag_required(spec, default_required),
        )
    return ParamSpec(name=name, description="" if spec is None else str(spec), required=default_required)


def _extract_parameters(doc: dict) -> list[ParamSpec]:
    params: list[ParamSpec] = []

    # ToolBench style: separate required / optional lists
    if "required_parameters" in doc or "optional_parameters" in doc:
        for key, required in (("required_parameters", True), ("optional_parameters", False)):
            for spec in doc.get(key) or []:
                if isinstance(spec, dict) and spec.get("name"):
                    params.append(_param_from(str(spec["name"]), spec, required))
                elif isinstance(spec, str):
                    params.append(ParamSpec(name=spec, required=required))
        return params

    value = _first(doc, PARAMETER_KEYS)
    if value is None:
        return params

    if isinstance(value, dict) and isinstance(value.get("properties"), dict):
        # JSON schema: an explicit "required" list marks the others optional
        required_list = value.get("required")
        for name, spec in value["properties"].items():
            default = name in required_list if isinstance(required_list, list) else True
            params.append(_param_from(str(name), spec, default))
    elif isinstance(value, dict):
        for name, spec in value.items():
            params.append(_param_from(str(name), spec))
    elif isinstance(value, list):
        for spec in value:
            if isinstance(spec, dict) and spec.get("name"):
                params.append(_param_from(str(spec["name"]), spec))
            elif isinstance(spec, str) and spec.strip():
                params.append(ParamSpec(name=spec.strip()))
    return params


def _as_text(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value.strip()
    return json.dumps(value, sort_keys=True, ensure_ascii=False)


def _dedup_params(params: list[ParamSpec]) -> tuple[ParamSpec, ...]:
    seen, unique = set(), []
    for p in params:
        if p.name in seen:
            continue
        seen.add(p.name)
        unique.append(p)
    return tuple(unique)


def mock_standardize(raw: RawTool) -> StandardizedTool:
    """Deterministic key-mapping standardization; no network."""
    doc = _as_mapping(raw.doc)
    if doc is None:
        raise StandardizationError(raw.id, "documentation is not structured JSON")

    description = _as_text(_first(doc, DESCRIPTION_KEYS))
    if not description:
        raise StandardizationError(raw.id, "no description-like key in documentation")

    examples = _first(doc, EXAMPLE_KEYS)
    if isinstance(examples, list):
        examples = tuple(_as_text(e) for e in examples if _as_text(e))
    elif examples is not None:
        examples = (_as_text(examples),)
    else:
        examples = ()

    return StandardizedTool(
        tool_id=raw.id,
        description=description,
        parameters=_dedup_params(_extract_parameters(doc)),
        response=_as_text(_first(doc, RESPONSE_KEYS)),
        examples=examples,
    )


def raw_fields(raw: RawTool) -> StandardizedTool:
    """Fields of the raw documentation without any reformatting (no-standardization ablation)."""
    try:
        return mock_standardize(raw)
    except StandardizationError:
        return StandardizedTool(tool_id=raw.id, description=raw_doc_text(raw.doc))


# ---------------------------------------------------------------------------
# LLM-driven standardization
# ---------------------------------------------------------------------------

_FENCE = re.compile(r"^```(?:json)?\s*|\s*```$", re.MULTILINE)


def _extract_json(text: str) -> dict:
    cleaned = _FENCE.sub("", text.strip())
    start, end = cleaned.find("{"), cleaned.rfind("}")
    if start == -1 or end < start:
        raise ValueError("no JSON object in model output")
    data = json.loads(cleaned[start:end + 1])
    if not isinstance(data, dict):
        raise ValueError("model output is not a JSON object")
    return data


def parse_standardized(text: str, tool_id: str) -> StandardizedTool:
    """Parse model output into the four fields; raises ValueError on malformed output."""
    data = _extract_json(text)

    raw_params = data.get("parameters") or []
    if not isinstance(raw_params, list):
        raise ValueError("'parameters' must be a list")
    params = []
    for spec in raw_params:
        if not isinstance(spec, dict) or not str(spec.get("name") or "").strip():
            raise ValueError("every parameter needs a non-empty 'name'")
        params.append(ParamSpec(
            name=str(spec["name"]).strip(),
            type_hint=str(spec.get("type") or "string"),
            description=str(spec.get("description") or ""),
            required=spec.get("required") is not False,
        ))
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate parameter names: {names}")

    examples = data.get("examples") or []
    if isinstance(examples, str):
        examples = [examples]
    if not isinstance(examples, list):
        raise ValueError("'examples' must be a list of strings")

    return StandardizedTool(
        tool_id=tool_id,
        description=_as_text(data.get("description")),
        parameters=tuple(params),
        response=_as_text(data.get("response")),
        examples=tuple(_as_text(e) for e in examples if _as_text(e)),
    )


def _has_flag(spec: dict) -> bool:
    return isinstance(spec.get("optional"), bool) or isinstance(spec.get("required"), bool)


def _collect_flags(node: Any, flags: dict[str, bool]) -> None:
    """Explicit required/optional markings anywhere in a structured doc, whatever key holds them."""
    if isinstance(node, list):
        for item in node:
            _collect_flags(item, flags)
        return
    if not isinstance(node, dict):
        return
    properties, required_list = node.get("properties"), node.get("required")
    if isinstance(properties, dict) and isinstance(required_list, list):
        for name in properties:
            flags.setdefault(str(name), name in required_list)
    if isinstance(node.get("name"), str) and _has_flag(node):
        flags.setdefault(node["name"], _flag_required(node))
    for key, value in node.items():
        if isinstance(value, dict) and _has_flag(value):
            flags.setdefault(str(key), _flag_required(value))
        _collect_flags(value, flags)


def _explicitly_optional(raw: RawTool) -> Optional[set[str]]:
    """Names the raw doc marks optional, or None when the doc is unstructured."""
    doc = _as_mapping(raw.doc)
    if doc is None:
        return None
    flags: dict[str, bool] = {}
    _collect_flags(doc, flags)
    optional = {name for name, required in flags.items() if not required}
    return optional | {p.name for p in _extract_parameters(doc) if not p.required}



def enforce_required_default(tool: StandardizedTool, raw: RawTool) -> StandardizedTool:
    """Parameters stay required unless the raw documentation explicitly marks them optional."""
    optional = _explicitly_optional(raw)
    if optional is None:
        if "optional" in doc_text(raw.doc).lower():
            return tool
        optional = set()
    params = tuple(
        ParamSpec(p.name, p.type_hint, p.description, p.name not in optional)
        for p in tool.parameters
    )
    return StandardizedTool(tool.tool_id, tool.description, params, tool.response, tool.examples)


def serialize_fields(tool: StandardizedTool) -> str:
    """Canonical cached form: the four fields only, without the tool id."""
    data = tool.to_dict()
    data.pop("tool_id")
    return json.dumps(data, sort_keys=True, ensure_ascii=False)


def _from_cached(text: str, tool_id: str) -> StandardizedTool:
    data = json.loads(text)
    data["tool_id"] = tool_id
    return StandardizedTool.from_dict(data)


async def standardize(raw: RawTool, provider: ChatProvider, cache: ResponseCache,
                      version: str = TEMPLATE_VERSION) -> StandardizedTool:
    source = doc_text(raw.doc)
    if not source.strip():
        raise StandardizationError(raw.id, "empty documentation")

    key = ResponseCache.key(provider.cache_tag, source, template_fingerprint(version))
    cached = cache.get(key)
    if cached is not None:
        return _from_cached(cached, raw.id)

    system, user_template = load_template(version)
    messages = [
        {"role": "system", "content": system},
        {"role": "user", "content": user_template.format(doc=source)},
    ]
    response = await provider.complete(LlmRequest(messages=messages))
    try:
        tool = parse_standardized(response.text, raw.id)
    except (ValueError, json.JSONDecodeError) as e:
        logger.warning(f"Repairing unparseable output for tool {raw.id}: {e}")
        messages = messages + [
            {"role": "assistant", "content": response.text},
            {"role": "user", "content": f"Your reply could not be used: {e}. Return only the corrected JSON object."},
        ]
        response = await provider.complete(LlmRequest(messages=messages))
        try:
            tool = parse_standardized(response.text, raw.id)
        except (ValueError, json.JSONDecodeError) as e:
            logger.error(f"Tool {raw.id} still unparseable after repair: {e}")
            raise StandardizationError(raw.id, f"unparseable model output after repair ({e})")

    if not tool.description:
        raise SchemaValidationError(raw.id, "empty description in model output")
    tool = enforce_required_default(tool, raw)
    if not tool.response:
        logger.warning(f"Tool {raw.id}: documentation has no response information; response left empty")

    text = serialize_fields(tool)
    cache.put(key, text)
    return _from_cached(text, raw.id)


class StandardizerService:
    def __init__(self, provider: Optional[ChatProvider], cache: Optional[ResponseCache],
                 parallelism: int = 4, mock: bool = False):
        if not mock and (provider is None or cache is None):
            raise ValueError("A chat provider and cache are required unless running with mocks")
        self.provider = provider
        self.cache = cache
        self.parallelism = parallelism
        self.mock = mock

    async def standardize_all(self, tools: list[RawTool]) -> list[StandardizedTool]:
        if self.mock:
            return [mock_standardize(t) for t in tools]
        logger.info(f"Standardizing {len(tools)} tools ({self.parallelism} calls in flight)")
        return await gather_bounded(
            [lambda raw=raw: standardize(raw, self.provider, self.cache) for raw in tools],
            self.parallelism,
        )


def write_standardized(tools: list[StandardizedTool], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for tool in tools:
            f.write(json.dumps(tool.to_dict(), ensure_ascii=False) + "\n")


def load_standardized(path) -> list[StandardizedTool]:
    with open(path, "r", encoding="utf-8") as f:
        return [StandardizedTool.from_dict(json.loads(line)) for line in f if line.strip()]
