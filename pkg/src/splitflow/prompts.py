"""Sub-target decomposition: LLM client, rule-based splitter and attribute decomposer.

The LLM path speaks the OpenAI-compatible chat-completion protocol. The
instruction templates live in ``templates/`` as versioned text files.
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass
from importlib import resources
from string import Template
from typing import Optional, Sequence
from urllib.parse import urlparse

import httpx
import numpy as np

from .errors import ConfigError, NetworkError, ParseError
from .fields import Condition

TEMPLATE_VERSION = 1
TEMPLATES = ("psi1", "psi2")
PROVENANCES = ("llm", "rule", "manual", "attribute")
DEFAULT_N_MAX = 3

_NUMBERED = re.compile(r"^\s*\d+\s*[.):]\s*(.*?)\s*$")


@dataclass(frozen=True)
class PromptPair:
    source_text: str
    target_text: str

    def __post_init__(self):
        if not self.source_text.strip() or not self.target_text.strip():
            raise ConfigError("source and target prompts must be non-empty")


@dataclass
class DecompositionResult:
    sub_prompts: list  # str or Condition
    provenance: str
    template_used: str = "none"
    raw: str = ""

    def __post_init__(self):
        if not self.sub_prompts:
            raise ConfigError("a decomposition needs at least one sub-prompt")
        if self.provenance not in PROVENANCES:
            raise ConfigError(f"unknown provenance {self.provenance!r}")

    def __len__(self):
        return len(self.sub_prompts)


@dataclass
class LlmEndpointConfig:
    base_url: str
    model: str = "mistral-7b-instruct"
    api_key_env: str = "SPLITFLOW_LLM_API_KEY"
    timeout: float = 30.0
    temperature: float = 0.0

    def __post_init__(self):
        url = urlparse(self.base_url)
        if url.scheme not in ("http", "https") or not url.netloc:
            raise ConfigError(f"malformed endpoint URL {self.base_url!r}")
        if self.timeout <= 0:
            raise ConfigError("timeout must be positive")

    @property
    def api_key(self) -> Optional[str]:
        return os.environ.get(self.api_key_env)


def load_template(name: str) -> str:
    if name not in TEMPLATES:
        raise ConfigError(f"unknown template {name!r}; choose from {TEMPLATES}")
    return resources.files("splitflow").joinpath("templates", f"{name}_v{TEMPLATE_VERSION}.txt").read_text()


def render_template(pair: PromptPair, template: str = "psi1") -> str:
    return Template(load_template(template)).substitute(source=pair.source_text, target=pair.target_text)


def parse_numbered_list(text: str) -> list:
    """Items of lines that start with ``1.``, ``1)`` or ``1:``, in order; surrounding quotes are removed."""
    items = []
    for line in text.splitlines():
        m = _NUMBERED.match(line)
        if m:
            item = m.group(1).strip().strip('"').strip()
            if item:
                items.append(item)
    return items


def format_numbered_list(items: Sequence[str]) -> str:
    return "\n".join(f"{i}. {item}" for i, item in enumerate(items, 1))


def _cap(items: list, n_max: Optional[int]) -> list:
    return items if n_max is None else items[:n_max]


def decompose_llm(pair: PromptPair, template: str, endpoint: LlmEndpointConfig, n_max: Optional[int] = DEFAULT_N_MAX,
                  client: Optional[httpx.Client] = None) -> DecompositionResult:
    """Ask a chat-completion endpoint to split the target prompt."""
    body = {
        "model": endpoint.model,
        "messages": [{"role": "user", "content": render_template(pair, template)}],
        "temperature": endpoint.temperature,
    }
    headers = {"Authorization": f"Bearer {endpoint.api_key}"} if endpoint.api_key else {}
    url = endpoint.base_url.rstrip("/") + "/chat/completions"
    try:
        if client is None:
            with httpx.Client(timeout=endpoint.timeout) as c:
                resp = c.post(url, json=body, headers=headers)
        else:
            resp = client.post(url, json=body, headers=headers, timeout=endpoint.timeout)
        resp.raise_for_status()
        content = resp.json()["choices"][0]["message"]["content"]
    except httpx.HTTPError as exc:
        raise NetworkError(f"chat-completion request to {url} failed: {exc}") from exc
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise NetworkError(f"malformed chat-completion response from {url}: {exc}") from exc
    items = parse_numbered_list(content)
    if not items:
        raise ParseError("LLM reply contains no numbered items", raw=content)
    return DecompositionResult(_cap(items, n_max), "llm", template, raw=content)


# --- rule-based splitter -------------------------------------------------------

ATTRIBUTE_MARKERS = ("with", "wearing", "holding", "having", "without")
_SEGMENT_SPLIT = re.compile(r"\s*[,;]\s*|\s+(?:and|or|but|while)\s+", re.IGNORECASE)


def _is_gerund(token: str) -> bool:
    t = token.lower()
    return len(t) > 4 and t.endswith("ing") and t.isalpha()


def _clauses(tokens: list, seen_marker: bool):
    """Split a token list at attribute prepositions and (once a preposition was seen) gerunds.

    Returns (leading tokens before the first split point, [clause token lists]).
    """
    lead, clauses = [], []
    current = lead
    for tok in tokens:
        low = tok.lower()
        if low in ATTRIBUTE_MARKERS or (seen_marker and _is_gerund(tok)):
            current = [tok]
            clauses.append(current)
            if low in ATTRIBUTE_MARKERS:
                seen_marker = True
        else:
            current.append(tok)
    return lead, clauses


def split_target(text: str) -> tuple:
    """Return (head noun phrase, clause strings) for the documented splitting rules.

    1. Split into segments at commas, semicolons and the conjunctions and/or/but/while.
    2. In the first segment, the head is everything before the first attribute
       preposition (with, wearing, holding, having, without).
    3. Every segment is split again before attribute prepositions and, after the
       first preposition has appeared, before gerunds (``-ing`` words).
    4. A later segment that does not open with a marker is read as a
       continuation of the most recent preposition (``", blue scarf"`` becomes
       ``"with blue scarf"``).
    """
    text = " ".join(text.strip().rstrip(".").split())
    segments = [s for s in _SEGMENT_SPLIT.split(text) if s]
    if not segments:
        return text, []
    head_tokens, clauses = _clauses(segments[0].split(), False)
    seen = bool(clauses)
    last_prep = next((c[0] for c in reversed(clauses) if c[0].lower() in ATTRIBUTE_MARKERS), None)
    for seg in segments[1:]:
        lead, more = _clauses(seg.split(), True)
        if lead:
            if lead[0].lower() not in ATTRIBUTE_MARKERS and not _is_gerund(lead[0]) and last_prep and seen:
                lead = [last_prep, *lead]
            clauses.append(lead)
        clauses.extend(more)
        for c in more:
            if c[0].lower() in ATTRIBUTE_MARKERS:
                last_prep = c[0]
        seen = True
    return " ".join(head_tokens), [" ".join(c) for c in clauses]


def decompose_rule_based(pair: PromptPair, n_max: Optional[int] = DEFAULT_N_MAX) -> DecompositionResult:
    """Deterministic offline decomposition: one sub-prompt per attribute clause, each led by the head noun phrase."""
    head, clauses = split_target(pair.target_text)
    if not head or not clauses:
        return DecompositionResult([pair.target_text.strip()], "rule")
    if n_max is not None and len(clauses) > n_max:
        clauses = clauses[: n_max - 1] + [" ".join(clauses[n_max - 1:])]
    return DecompositionResult([f"{head} {c}" for c in clauses], "rule")


def decompose_manual(text: str, n_max: Optional[int] = DEFAULT_N_MAX) -> DecompositionResult:
    """Sub-prompts from a user file: a numbered list, or one prompt per non-empty line."""
    items = parse_numbered_list(text) or [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not items:
        raise ConfigError("manual decomposition file lists no sub-prompts")
    return DecompositionResult(_cap(items, n_max), "manual")


# --- attribute decomposer ------------------------------------------------------

def decompose_attributes(cond_src: Condition, cond_tgt: Condition, layout: Sequence, n_max: Optional[int] = DEFAULT_N_MAX) -> DecompositionResult:
    """One sub-condition per differing attribute block: the source with that block swapped to the target's.

    ``layout`` is a list of ``(start, stop)`` slices partitioning the embedding.
    When more blocks differ than ``n_max`` allows, the surplus blocks are all
    swapped in the last sub-condition.
    """
    src, tgt = cond_src.embedding, cond_tgt.embedding
    if src.shape != tgt.shape:
        raise ConfigError("source and target conditions differ in dimension")
    covered = sorted(layout)
    if covered and (covered[0][0] != 0 or covered[-1][1] != src.size or
                    any(a[1] != b[0] for a, b in zip(covered, covered[1:]))):
        raise ConfigError("block layout must partition the embedding")
    changed = [(a, b) for a, b in layout if not np.array_equal(src[a:b], tgt[a:b])]
    if not changed:
        raise ConfigError("no edit requested: source and target conditions are identical")
    if n_max is not None and len(changed) > n_max:
        groups = [[blk] for blk in changed[: n_max - 1]] + [changed[n_max - 1:]]
    else:
        groups = [[blk] for blk in changed]
    subs = []
    for group in groups:
        emb = src.copy()
        for a, b in group:
            emb[a:b] = tgt[a:b]
        subs.append(Condition(emb, label="+".join(f"[{a}:{b}]" for a, b in group)))
    return DecompositionResult(subs, "attribute")
