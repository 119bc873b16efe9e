"""Synthetic conditional scenes: the desk-scale stand-in for an image distribution."""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError
from .fields import Condition


_WORD = re.compile(r"[A-Za-z0-9_-]+")


@dataclass
class Attribute:
    """One discrete attribute of a scene, rendered at a fixed set of spatial locations.

    ``means[v]`` is the channel vector drawn (plus noise) at each of ``locations``
    when the attribute takes value ``v``.
    """

    name: str
    locations: list
    means: np.ndarray
    value_names: Optional[list] = None

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.locations = [tuple(int(v) for v in loc) for loc in self.locations]
        if not self.locations:
            raise ConfigError(f"attribute {self.name!r} has no locations")
        if self.value_names is None:
            self.value_names = [f"v{v}" for v in range(self.n_values)]
        self.value_names = [str(n) for n in self.value_names]
        if len(self.value_names) != self.n_values or len(set(self.value_names)) != self.n_values:
            raise ConfigError(f"attribute {self.name!r} needs {self.n_values} distinct value names")
        if not _WORD.fullmatch(self.name) or not all(_WORD.fullmatch(n) for n in self.value_names):
            raise ConfigError(f"attribute {self.name!r}: names must be single words")

    @property
    def n_values(self) -> int:
        return self.means.shape[0]


@dataclass
class Scene:
    """Desk-scale stand-in for an image distribution conditioned on discrete attributes.

    Every location not owned by an attribute is background, drawn around
    ``background`` regardless of the condition. The condition embedding is the
    concatenation of one one-hot block per attribute.
    """

    shape: tuple
    attributes: list
    spread: float = 0.1
    background: Optional[np.ndarray] = None
    subject: str = "a figure"

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        c, h, w = self.shape
        self.background = np.zeros(self.shape) if self.background is None else np.asarray(self.background, dtype=np.float64).reshape(self.shape)
        seen = set()
        for attr in self.attributes:
            if attr.means.shape[1] != c:
                raise ConfigError(f"attribute {attr.name!r}: means have {attr.means.shape[1]} channels, scene has {c}")
            for loc in attr.locations:
                if not (0 <= loc[0] < h and 0 <= loc[1] < w):
                    raise ConfigError(f"attribute {attr.name!r}: location {loc} outside {h}x{w} grid")
                if loc in seen:
                    raise ConfigError(f"location {loc} claimed by two attributes")
                seen.add(loc)
        if self.spread < 0:
            raise ConfigError("spread must be non-negative")

    @property
    def cond_dim(self) -> int:
        return sum(a.n_values for a in self.attributes)

    def block_layout(self) -> list:
        """(start, stop) slice of the embedding owned by each attribute."""
        out, start = [], 0
        for a in self.attributes:
            out.append((start, start + a.n_values))
            start += a.n_values
        return out

    def embed(self, values: Sequence[int]) -> np.ndarray:
        if len(values) != len(self.attributes):
            raise ConfigError(f"expected {len(self.attributes)} attribute values, got {len(values)}")
        emb = np.zeros(self.cond_dim)
        for (start, _), attr, v in zip(self.block_layout(), self.attributes, values):
            if not 0 <= v < attr.n_values:
                raise ConfigError(f"attribute {attr.name!r} has no value {v}")
            emb[start + v] = 1.0
        return emb

    def condition(self, values: Sequence[int]) -> Condition:
        return Condition(self.embed(values), label=",".join(f"{a.name}={v}" for a, v in zip(self.attributes, values)))

    def mean(self, values: Sequence[int]) -> np.ndarray:
        m = self.background.copy()
        for attr, v in zip(self.attributes, values):
            for h, w in attr.locations:
                m[:, h, w] = attr.means[v]
        return m

    def sample(self, n: int, rng: np.random.Generator, values: Optional[Sequence[int]] = None):
        """Draw ``n`` latents; attribute values are uniform unless fixed by ``values``.

        Returns (latents (n, C, H, W), values (n, n_attr), embeddings (n, D)).
        """
        if values is None:
            vals = np.stack([rng.integers(0, a.n_values, size=n) for a in self.attributes], axis=1) if self.attributes else np.zeros((n, 0), int)
        else:
            vals = np.tile(np.asarray(values, dtype=int), (n, 1))
        means = np.stack([self.mean(v) for v in vals]) if n else np.zeros((0, *self.shape))
        xs = means + self.spread * rng.standard_normal((n, *self.shape))
        embs = np.stack([self.embed(v) for v in vals]) if n else np.zeros((0, self.cond_dim))
        return xs, vals, embs

    def edit_mask(self, src_values, tgt_values) -> np.ndarray:
        """(H, W) map with 1 where an attribute changes between source and target, 0 elsewhere."""
        mask = np.zeros(self.shape[1:])
        for attr, s, t in zip(self.attributes, src_values, tgt_values):
            if s != t:
                for h, w in attr.locations:
                    mask[h, w] = 1.0
        return mask

    def data_range(self) -> float:
        """Spread of the data: extent of all means and background, widened by three standard deviations each side."""
        vals = [self.background.ravel()] + [a.means.ravel() for a in self.attributes]
        allv = np.concatenate(vals)
        return float(allv.max() - allv.min() + 6.0 * self.spread) or 1.0

    # --- text view, so that prompt-based decomposers can drive the toy scene ---

    def describe(self, values: Sequence[int]) -> str:
        """Caption such as ``"a figure with red hat, blue scarf and green glasses"``."""
        self.embed(values)
        parts = [f"{a.value_names[v]} {a.name}" for a, v in zip(self.attributes, values)]
        if not parts:
            return self.subject
        listed = parts[0] if len(parts) == 1 else ", ".join(parts[:-1]) + " and " + parts[-1]
        return f"{self.subject} with {listed}"

    def parse_prompt(self, text: str, base_values: Sequence[int]) -> tuple:
        """Attribute values named in ``text`` (as ``"<value> <attribute>"``); the rest come from ``base_values``."""
        out = list(base_values)
        if len(out) != len(self.attributes):
            raise ConfigError(f"expected {len(self.attributes)} base values, got {len(out)}")
        low = text.lower()
        for k, attr in enumerate(self.attributes):
            hits = [v for v, name in enumerate(attr.value_names)
                    if re.search(rf"\b{re.escape(name.lower())}\s+{re.escape(attr.name.lower())}\b", low)]
            if len(hits) > 1:
                raise ConfigError(f"prompt {text!r} names several values of {attr.name!r}")
            if hits:
                out[k] = hits[0]
        return tuple(out)
