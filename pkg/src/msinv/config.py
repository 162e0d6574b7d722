"""Flat key=value experiment configuration.

One typed key per line (``key = value``), ``#`` comments; unknown keys are
rejected so typos fail loudly.  See the README for the full key table.
"""

from dataclasses import dataclass, field

import numpy as np

from .basis import BasisSpec
from .mesh import create_mesh, create_partition
from .models import build_survey, generate_block_model, generate_salt_model

_MODES = ("full", "ms-fixed", "ms-adaptive")


def _parse_bool(s):
    v = s.strip().lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_modes(s):
    modes = tuple(tok.strip() for tok in s.split(",") if tok.strip())
    for mode in modes:
        if mode not in _MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {_MODES}")
    if not modes:
        raise ValueError("at least one mode is required")
    return modes


def _parse_families(s):
    return tuple(tok.strip() for tok in s.split(",") if tok.strip())


def _parse_blocks(s):
    """``i0:i1,j0:j1,k0:k1=sigma`` entries separated by ``;``."""
    out = []
    for chunk in s.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        rng_part, _, val_part = chunk.partition("=")
        if not val_part:
            raise ValueError(f"block spec {chunk!r} is missing '=sigma'")
        spans = rng_part.split(",")
        if len(spans) != 3:
            raise ValueError(f"block spec {chunk!r} needs three index ranges")
        extent = []
        for span in spans:
            a, _, b = span.partition(":")
            extent.extend([int(a), int(b)])
        out.append((tuple(extent), float(val_part)))
    return out


# key -> (parser, default); None default means the key is required
_KEYS = {
    "n1": (int, None), "n2": (int, None), "n3": (int, None),
    "h1": (float, 1.0), "h2": (float, 1.0), "h3": (float, 1.0),
    "b1": (int, 0), "b2": (int, 0), "b3": (int, 0),
    "families": (_parse_families, ("lagrange", "skeleton", "local_pca")),
    "pca_rank": (int, 4),
    "pca_total": (int, 0),
    "sources_x": (int, 3), "sources_y": (int, 3),
    "receivers_x": (int, 8), "receivers_y": (int, 8),
    "model": (str, "blocks"),
    "background": (float, 0.01),
    "blocks": (_parse_blocks, []),
    "salt_body": (float, 3.0),
    "noise": (float, 0.01),
    "seed": (int, 0),
    "alpha": (float, 1e-8),
    "lower": (float, None), "upper": (float, None),
    "max_gn": (int, 10), "max_cg": (int, 15),
    "modes": (_parse_modes, ("full", "ms-fixed", "ms-adaptive")),
    "solver": (str, "direct"),
    "cg_tol": (float, 1e-6), "cg_maxit": (int, 100),
    "workers": (int, 1),
    "out": (str, "out"),
    "dump_basis": (_parse_bool, False),
}

_REQUIRED = ("n1", "n2", "n3")


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=dict)

    def __getattr__(self, name):
        values = object.__getattribute__(self, "values")
        if name in values:
            return values[name]
        raise AttributeError(name)

    def mesh(self):
        return create_mesh(self.n1, self.n2, self.n3, self.h1, self.h2, self.h3)

    def partition(self, mesh=None):
        if not (self.b1 and self.b2 and self.b3):
            raise ValueError("b1/b2/b3 are required for multiscale modes")
        return create_partition(mesh or self.mesh(), self.b1, self.b2, self.b3)

    def basis_spec(self):
        return BasisSpec(families=self.families, pca_rank=self.pca_rank,
                         pca_total=self.pca_total)

    def survey(self, mesh=None):
        return build_survey(mesh or self.mesh(),
                            n_src=(self.sources_x, self.sources_y),
                            n_rec=(self.receivers_x, self.receivers_y))

    def true_model(self, mesh=None):
        mesh = mesh or self.mesh()
        if self.model == "blocks":
            return generate_block_model(mesh, self.blocks, self.background)
        if self.model == "salt":
            return generate_salt_model(mesh, background=self.background,
                                       body=self.salt_body)
        raise ValueError(f"unknown model kind {self.model!r}")

    def reference_model(self, mesh=None):
        mesh = mesh or self.mesh()
        return np.full(mesh.n_cells, np.log(self.background))

    def echo_lines(self):
        out = []
        for key in sorted(self.values):
            val = self.values[key]
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            elif isinstance(val, list):
                val = "; ".join(f"{e[0]}={e[1]}" for e in val)
            out.append(f"{key} = {val}")
        return out


def parse_config(text):
    """Parse configuration text; unknown keys raise ``ValueError``."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key = key.strip()
        if key not in _KEYS:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        parser, _default = _KEYS[key]
        try:
            values[key] = parser(val.strip())
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad value for {key}: {exc}") from exc
    for key in _REQUIRED:
        if key not in values:
            raise ValueError(f"missing required key {key!r}")
    for key, (_parser, default) in _KEYS.items():
        values.setdefault(key, default)
    return ExperimentConfig(values=values)


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
