"""Factor analytics over attributed narratives.

Scored words become five-category factor summaries (LLM-backed with a
deterministic rule-based fallback), get trimmed to top factors per aspect,
canonicalized by grouping rules, and counted into a cross-aspect
co-occurrence graph for Sankey export.
"""

from __future__ import annotations

import enum
import html
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional, Sequence

import jsonschema
import yaml

from .attribution import WordAttribution, parse_annotated
from .augment import ChatClient, UnavailableError
from .util import atomic_write_text


class AspectCategory(enum.Enum):
    ENVIRONMENTAL = "environmental"
    VEHICLE_OCCUPANT = "vehicle_occupant"
    BEHAVIORAL = "behavioral"
    INFRASTRUCTURE = "infrastructure"
    UNUSUAL = "unusual"


_ASPECT_ORDER = {cat: i for i, cat in enumerate(AspectCategory)}

_ASPECT_LABELS = {
    AspectCategory.ENVIRONMENTAL: "environmental",
    AspectCategory.VEHICLE_OCCUPANT: "vehicle and occupant",
    AspectCategory.BEHAVIORAL: "behavioral",
    AspectCategory.INFRASTRUCTURE: "infrastructure",
    AspectCategory.UNUSUAL: "unusual or standout",
}

ASPECT_COLORS = {
    AspectCategory.ENVIRONMENTAL: "#4e79a7",
    AspectCategory.VEHICLE_OCCUPANT: "#f28e2b",
    AspectCategory.BEHAVIORAL: "#e15759",
    AspectCategory.INFRASTRUCTURE: "#76b7b2",
    AspectCategory.UNUSUAL: "#af7aa1",
}

DEFAULT_FACTOR_PROMPT = (
    "You are a road safety analyst. You will receive a crash narrative in "
    "which each word is followed by its attribution score in brackets. "
    "Identify the high-scoring words relevant to each factor category and "
    "reply with only a JSON object of the form "
    '{"environmental": {"summary": str, "terms": [{"term": str, "score": number}]}, '
    '"vehicle_occupant": {...}, "behavioral": {...}, "infrastructure": {...}, '
    '"unusual": {...}}. Every category key must be present even when its '
    "term list is empty."
)

_REPAIR_PROMPT = (
    "Your previous reply could not be parsed. Respond again with only the "
    "JSON object in the exact shape requested, no prose and no code fences."
)


class AnalyticsError(Exception):
    pass


@dataclass(frozen=True)
class FactorTerm:
    term: str
    score: float
    position: int = 0  # earlier narrative position wins score ties


@dataclass
class CategorySummary:
    summary: str
    terms: list[FactorTerm] = field(default_factory=list)


@dataclass
class FactorSummary:
    caseno: str
    categories: dict[AspectCategory, CategorySummary]
    source: str = "llm"

    def __post_init__(self):
        for cat in AspectCategory:
            if cat not in self.categories:
                raise AnalyticsError(f"missing category {cat.value!r}")
        for summary in self.categories.values():
            summary.terms = sorted(
                (t for t in summary.terms if t.score > 0),
                key=lambda t: (-t.score, t.position),
            )


@dataclass(frozen=True)
class GroupingRule:
    pattern: re.Pattern
    name: str


@dataclass(frozen=True)
class GroupingRules:
    rules: tuple[GroupingRule, ...]

    def canonical(self, factor: str) -> str:
        for rule in self.rules:
            if rule.pattern.search(factor):
                return rule.name
        return factor


@dataclass(frozen=True)
class FactorNode:
    name: str
    aspect: AspectCategory
    count: int


@dataclass(frozen=True)
class FactorLink:
    source: int  # node indices
    target: int
    count: int


@dataclass
class CooccurrenceGraph:
    nodes: list[FactorNode]
    links: list[FactorLink]


def load_grouping_rules(path: Optional[str | Path] = None) -> GroupingRules:
    if path is None:
        raw = resources.files("crashlens.data").joinpath("grouping_rules.yaml").read_text("utf-8")
    else:
        raw = Path(path).read_text("utf-8")
    doc = yaml.safe_load(raw)
    rules = []
    for i, entry in enumerate(doc["rules"]):
        try:
            pattern = re.compile(entry["match"], re.IGNORECASE)
        except (re.error, KeyError, TypeError) as exc:
            raise AnalyticsError(f"grouping rule {i} invalid: {exc}") from exc
        rules.append(GroupingRule(pattern=pattern, name=str(entry["name"])))
    grouping = GroupingRules(rules=tuple(rules))
    for rule in rules:
        # canonical names must be fixed points or grouping is not idempotent
        if grouping.canonical(rule.name) != rule.name:
            raise AnalyticsError(
                f"canonical name {rule.name!r} is itself regrouped; rules not idempotent"
            )
    return grouping


def load_category_lexicon(path: Optional[str | Path] = None) -> dict[AspectCategory, list[str]]:
    if path is None:
        raw = resources.files("crashlens.data").joinpath("category_lexicon.yaml").read_text("utf-8")
    else:
        raw = Path(path).read_text("utf-8")
    doc = yaml.safe_load(raw)
    out: dict[AspectCategory, list[str]] = {}
    for key, keywords in doc["categories"].items():
        out[AspectCategory(key)] = [str(k) for k in keywords]
    return out


_PUNCT_STRIP = ".,;:!?()'\"[]"


def _match_keyword(keyword: str, word: str) -> bool:
    if keyword.startswith("re:"):
        return re.search(keyword[3:], word) is not None
    return keyword in word


def rule_based_factors(
    words: Sequence[WordAttribution],
    category_lexicon: Optional[Mapping[AspectCategory, Sequence[str]]] = None,
    caseno: str = "",
) -> FactorSummary:
    """Deterministic offline categorizer: first matching category wins,
    unmatched scored words land in the unusual/standout bucket."""
    lexicon = category_lexicon if category_lexicon is not None else load_category_lexicon()
    buckets: dict[AspectCategory, dict[str, FactorTerm]] = {cat: {} for cat in AspectCategory}
    for word in words:
        if word.score <= 0:
            continue
        term = word.word.strip(_PUNCT_STRIP)
        if not term:
            continue
        folded = term.lower()
        category = AspectCategory.UNUSUAL
        for cat in AspectCategory:
            if any(_match_keyword(k, folded) for k in lexicon.get(cat, ())):
                category = cat
                break
        existing = buckets[category].get(folded)
        if existing is None or word.score > existing.score:
            position = existing.position if existing else word.char_span[0]
            buckets[category][folded] = FactorTerm(
                term=term, score=word.score, position=min(position, word.char_span[0])
            )
    categories = {}
    for cat in AspectCategory:
        terms = sorted(buckets[cat].values(), key=lambda t: (-t.score, t.position))
        label = _ASPECT_LABELS[cat]
        if terms:
            summary = f"Notable {label} terms: {', '.join(t.term for t in terms[:5])}."
        else:
            summary = f"No notable {label} terms."
        categories[cat] = CategorySummary(summary=summary, terms=terms)
    return FactorSummary(caseno=caseno, categories=categories, source="rules")


def _parse_factor_payload(completion: str, caseno: str) -> FactorSummary:
    text = completion.strip()
    fence = re.match(r"^```(?:json)?\s*(.*?)\s*```$", text, re.DOTALL)
    if fence:
        text = fence.group(1)
    doc = json.loads(text)
    if not isinstance(doc, dict):
        raise ValueError("completion is not a JSON object")
    categories = {}
    for cat in AspectCategory:
        entry = doc[cat.value]  # KeyError -> parse failure -> repair/fallback
        terms = []
        for i, item in enumerate(entry.get("terms", [])):
            if isinstance(item, Mapping):
                term, score = str(item["term"]), float(item["score"])
            else:
                term, score = str(item[0]), float(item[1])
            terms.append(FactorTerm(term=term, score=score, position=i))
        categories[cat] = CategorySummary(summary=str(entry.get("summary", "")), terms=terms)
    return FactorSummary(caseno=caseno, categories=categories, source="llm")


def summarize_factors(
    annotated: str,
    client: ChatClient,
    prompt_template: str = DEFAULT_FACTOR_PROMPT,
    caseno: str = "",
    category_lexicon: Optional[Mapping[AspectCategory, Sequence[str]]] = None,
    temperature: float = 0.0,
) -> FactorSummary:
    """LLM factor summary with one repair retry, then rule-based fallback."""
    try:
        completion = client.send(prompt_template, annotated, temperature)
    except (ConnectionError, TimeoutError, OSError) as exc:
        raise UnavailableError(str(exc)) from exc
    for attempt in range(2):
        try:
            return _parse_factor_payload(completion, caseno)
        except (ValueError, KeyError, TypeError, IndexError):
            if attempt == 0:
                try:
                    completion = client.send(
                        prompt_template, f"{annotated}\n\n{_REPAIR_PROMPT}", temperature
                    )
                except (ConnectionError, TimeoutError, OSError) as exc:
                    raise UnavailableError(str(exc)) from exc
    _, words = parse_annotated(annotated)
    return rule_based_factors(words, category_lexicon, caseno=caseno)


def extract_top_factors(summary: FactorSummary, k: int = 5) -> dict[AspectCategory, list[str]]:
    """Top-k terms for the four named aspects (unusual/standout excluded)."""
    out: dict[AspectCategory, list[str]] = {}
    for cat in AspectCategory:
        if cat is AspectCategory.UNUSUAL:
            continue
        terms = sorted(summary.categories[cat].terms, key=lambda t: (-t.score, t.position))
        out[cat] = [t.term for t in terms[:k]]
    return out


def semantic_group(
    factors: Mapping[AspectCategory, Sequence[str]], rules: GroupingRules
) -> dict[AspectCategory, list[str]]:
    """Canonicalize factor names (first matching rule wins) and dedupe."""
    out: dict[AspectCategory, list[str]] = {}
    for cat, names in factors.items():
        seen: set[str] = set()
        grouped: list[str] = []
        for name in names:
            canonical = rules.canonical(name)
            if canonical not in seen:
                seen.add(canonical)
                grouped.append(canonical)
        out[cat] = grouped
    return out


def cooccurrence(
    case_factors: Sequence[Mapping[AspectCategory, Sequence[str]]],
) -> CooccurrenceGraph:
    """Count, once per case, every unordered cross-aspect factor pair."""
    pair_counts: Counter = Counter()
    for case in case_factors:
        items = sorted(
            {(cat, name) for cat, names in case.items() for name in names},
            key=lambda item: (_ASPECT_ORDER[item[0]], item[1]),
        )
        for i in range(len(items)):
            for j in range(i + 1, len(items)):
                if items[i][0] is items[j][0]:
                    continue
                pair_counts[(items[i], items[j])] += 1

    node_totals: Counter = Counter()
    for (a, b), count in pair_counts.items():
        node_totals[a] += count
        node_totals[b] += count
    keys = sorted(node_totals, key=lambda item: (_ASPECT_ORDER[item[0]], item[1]))
    index = {key: i for i, key in enumerate(keys)}
    nodes = [FactorNode(name=name, aspect=cat, count=node_totals[(cat, name)]) for cat, name in keys]
    links = sorted(
        (
            FactorLink(source=index[a], target=index[b], count=count)
            for (a, b), count in pair_counts.items()
        ),
        key=lambda link: (link.source, link.target),
    )
    return CooccurrenceGraph(nodes=nodes, links=links)


SANKEY_SCHEMA = {
    "type": "object",
    "required": ["nodes", "links"],
    "additionalProperties": False,
    "properties": {
        "nodes": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "aspect", "count", "color"],
                "additionalProperties": False,
                "properties": {
                    "name": {"type": "string", "minLength": 1},
                    "aspect": {"enum": [cat.value for cat in AspectCategory]},
                    "count": {"type": "integer", "minimum": 1},
                    "color": {"type": "string", "pattern": "^#[0-9a-f]{6}$"},
                },
            },
        },
        "links": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["source", "target", "count"],
                "additionalProperties": False,
                "properties": {
                    "source": {"type": "integer", "minimum": 0},
                    "target": {"type": "integer", "minimum": 0},
                    "count": {"type": "integer", "minimum": 1},
                },
            },
        },
    },
}


def graph_to_json(graph: CooccurrenceGraph) -> dict:
    return {
        "nodes": [
            {
                "name": node.name,
                "aspect": node.aspect.value,
                "count": node.count,
                "color": ASPECT_COLORS[node.aspect],
            }
            for node in graph.nodes
        ],
        "links": [
            {"source": link.source, "target": link.target, "count": link.count}
            for link in graph.links
        ],
    }


def graph_from_json(doc: Mapping) -> CooccurrenceGraph:
    validate_sankey(doc)
    nodes = [
        FactorNode(name=n["name"], aspect=AspectCategory(n["aspect"]), count=n["count"])
        for n in doc["nodes"]
    ]
    links = [FactorLink(source=l["source"], target=l["target"], count=l["count"]) for l in doc["links"]]
    return CooccurrenceGraph(nodes=nodes, links=links)


def validate_sankey(doc: Mapping) -> None:
    jsonschema.validate(instance=doc, schema=SANKEY_SCHEMA)
    n = len(doc["nodes"])
    for link in doc["links"]:
        if link["source"] >= n or link["target"] >= n:
            raise jsonschema.ValidationError("link endpoint out of node range")


def _sankey_html(doc: Mapping) -> str:
    width, height, pad = 960.0, 600.0, 8.0
    columns: dict[str, list[int]] = {cat.value: [] for cat in AspectCategory}
    for i, node in enumerate(doc["nodes"]):
        columns[node["aspect"]].append(i)
    active = [aspect for aspect in columns if columns[aspect]]
    geom: dict[int, list[float]] = {}
    col_w = 18.0
    for ci, aspect in enumerate(active):
        ids = columns[aspect]
        total = sum(doc["nodes"][i]["count"] for i in ids)
        usable = height - pad * (len(ids) + 1)
        x = 40.0 + (width - 120.0) * (ci / max(len(active) - 1, 1))
        y = pad
        for i in ids:
            h = max(usable * doc["nodes"][i]["count"] / total, 4.0) if total else 4.0
            geom[i] = [x, y, h]
            y += h + pad
    parts = [
        "<!DOCTYPE html>",
        "<html><head><meta charset=\"utf-8\"><title>Factor co-occurrence</title>",
        "<style>body{font-family:sans-serif;background:#fff}text{font-size:11px}</style>",
        "</head><body>",
        f'<svg width="{width:.0f}" height="{height:.0f}">',
    ]
    out_off = {i: 0.0 for i in geom}
    in_off = {i: 0.0 for i in geom}
    for link in doc["links"]:
        s, t = link["source"], link["target"]
        if s not in geom or t not in geom:
            continue
        sx, sy, sh = geom[s]
        tx, ty, th = geom[t]
        s_total = max(sum(l["count"] for l in doc["links"] if l["source"] == s), 1)
        t_total = max(sum(l["count"] for l in doc["links"] if l["target"] == t), 1)
        w_s = sh * link["count"] / s_total
        w_t = th * link["count"] / t_total
        y0 = sy + out_off[s] + w_s / 2
        y1 = ty + in_off[t] + w_t / 2
        out_off[s] += w_s
        in_off[t] += w_t
        x0, x1 = sx + col_w, tx
        mid = (x0 + x1) / 2
        color = doc["nodes"][s]["color"]
        parts.append(
            f'<path d="M{x0:.1f},{y0:.1f} C{mid:.1f},{y0:.1f} {mid:.1f},{y1:.1f} {x1:.1f},{y1:.1f}" '
            f'stroke="{color}" stroke-width="{max((w_s + w_t) / 2, 1.0):.1f}" fill="none" opacity="0.35"/>'
        )
    for i, node in enumerate(doc["nodes"]):
        if i not in geom:
            continue
        x, y, h = geom[i]
        parts.append(
            f'<rect x="{x:.1f}" y="{y:.1f}" width="{col_w:.0f}" height="{h:.1f}" fill="{node["color"]}"/>'
        )
        parts.append(
            f'<text x="{x + col_w + 4:.1f}" y="{y + h / 2 + 4:.1f}">'
            f"{html.escape(node['name'])} ({node['count']})</text>"
        )
    parts.append("</svg></body></html>")
    return "\n".join(parts) + "\n"


def export_sankey(
    graph: CooccurrenceGraph,
    json_path: Optional[str | Path] = None,
    html_path: Optional[str | Path] = None,
) -> dict:
    doc = graph_to_json(graph)
    validate_sankey(doc)
    if json_path is not None:
        atomic_write_text(json_path, json.dumps(doc, ensure_ascii=False, indent=2) + "\n")
    if html_path is not None:
        atomic_write_text(html_path, _sankey_html(doc))
    return doc


_HEATMAP_CSS = (
    "body{font-family:Georgia,serif;max-width:54em;margin:2em auto;line-height:1.6}"
    ".hi{background:#f4cccc;color:#990000;padding:0 2px}"
    ".mid{background:#d9ead3;color:#38761d;padding:0 2px}"
)


def export_heatmap(
    annotated: str,
    threshold_hi: float,
    path: str | Path,
    caseno: str = "",
) -> str:
    """Binary red/green rendering: score >= threshold_hi red, positive green."""
    narrative, words = parse_annotated(annotated)
    parts = [
        "<!DOCTYPE html>",
        '<html><head><meta charset="utf-8">',
        f"<title>Attribution heatmap {html.escape(caseno)}</title>",
        f"<style>{_HEATMAP_CSS}</style></head><body>",
        f"<h3>Case {html.escape(caseno)}</h3>" if caseno else "<h3>Attribution heatmap</h3>",
        "<p>",
    ]
    cursor = 0
    body: list[str] = []
    for word in words:
        start, end = word.char_span
        body.append(html.escape(narrative[cursor:start]))
        text = html.escape(narrative[start:end])
        if word.score >= threshold_hi:
            body.append(f'<span class="hi" title="{word.score:.2f}">{text}</span>')
        elif word.score > 0:
            body.append(f'<span class="mid" title="{word.score:.2f}">{text}</span>')
        else:
            body.append(text)
        cursor = end
    body.append(html.escape(narrative[cursor:]))
    parts.append("".join(body))
    parts.append("</p></body></html>")
    text = "\n".join(parts) + "\n"
    atomic_write_text(path, text)
    return text
